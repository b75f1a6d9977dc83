//! Image-quality metrics, the measurement/null-space split of a
//! reconstruction error, and a relative volume error over labelled regions.

use crate::consistency::{ssim_map, ConsistencyWeights};
use crate::degradation::{apply_linear, pseudo_inverse_apply, DegradationConfig, PinvParams};
use crate::error::{Error, Result};
use crate::image::{l2_sq, Image, LabelMap};

/// `10·log10(peak² / MSE)`; `+∞` when the images are identical.
pub fn psnr(a: &Image, b: &Image, peak: f64) -> Result<f64> {
    let mse = l2_sq(a, b)? / a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

/// Mean of the local SSIM map.
pub fn ssim_aggregate(a: &Image, b: &Image, w: &ConsistencyWeights) -> Result<f64> {
    Ok(ssim_map(a, b, w)?.mean())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HallucinationReport {
    /// `‖A x̂ − A x_true‖₂`, measurement space.
    pub intrinsic: f64,
    /// `‖(I − A⁺A)(x̂ − x_true)‖₂`, image space.
    pub extrinsic: f64,
    pub eps_used: f64,
    /// Whether the pseudoinverse solve reached its tolerance.
    pub converged: bool,
}

/// `(I − A⁺A) d` with the regularized pseudoinverse of the linear operator.
pub fn null_space_component(
    d: &Image,
    cfg: &DegradationConfig,
    params: PinvParams,
) -> Result<(Image, bool)> {
    let ad = apply_linear(d, cfg)?;
    let sol = pseudo_inverse_apply(&ad, cfg, d.dims(), params)?;
    Ok((d.sub(&sol.x)?, sol.converged))
}

/// Splits `x̂ − x_true` into its measurement-visible and null-space parts
/// using the linear operator only (γ excluded on both sides).
pub fn hallucination_decompose(
    x_hat: &Image,
    x_true: &Image,
    cfg: &DegradationConfig,
    eps: f64,
) -> Result<HallucinationReport> {
    let d = x_hat.sub(x_true)?;
    let intrinsic = apply_linear(&d, cfg)?.norm();
    let (null, converged) = null_space_component(
        &d,
        cfg,
        PinvParams {
            eps,
            ..PinvParams::default()
        },
    )?;
    Ok(HallucinationReport {
        intrinsic,
        extrinsic: null.norm(),
        eps_used: eps,
        converged,
    })
}

/// `2|V_pred − V_gt| / (V_pred + V_gt)`
pub fn rve_from_volumes(v_pred: usize, v_gt: usize) -> Result<f64> {
    if v_pred + v_gt == 0 {
        return Err(Error::UndefinedRegion);
    }
    Ok(2.0 * v_pred.abs_diff(v_gt) as f64 / (v_pred + v_gt) as f64)
}

/// Disk dilation of the pixels labelled `class_id`.
pub fn dilated_mask(labels: &LabelMap, class_id: u8, radius: usize) -> Vec<bool> {
    let (w, h) = labels.dims();
    let r = radius as isize;
    let mut mask = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            if labels.get(x, y) != class_id {
                continue;
            }
            for dy in -r..=r {
                for dx in -r..=r {
                    if dx * dx + dy * dy > r * r {
                        continue;
                    }
                    let (nx, ny) = (x as isize + dx, y as isize + dy);
                    if nx >= 0 && ny >= 0 && (nx as usize) < w && (ny as usize) < h {
                        mask[ny as usize * w + nx as usize] = true;
                    }
                }
            }
        }
    }
    mask
}

/// Relative volume error of one class. The predicted volume counts pixels
/// of `x_hat` inside `band = [lo, hi]` within a radius-2 dilation of the
/// true region.
pub fn region_volume_error(
    x_hat: &Image,
    labels_true: &LabelMap,
    class_id: u8,
    band: (f64, f64),
) -> Result<f64> {
    if x_hat.dims() != labels_true.dims() {
        return Err(Error::DimensionMismatch {
            expected: labels_true.dims(),
            actual: x_hat.dims(),
        });
    }
    let mask = dilated_mask(labels_true, class_id, 2);
    let v_pred = x_hat
        .data()
        .iter()
        .zip(&mask)
        .filter(|(v, m)| **m && **v >= band.0 && **v <= band.1)
        .count();
    rve_from_volumes(v_pred, labels_true.count(class_id))
}
