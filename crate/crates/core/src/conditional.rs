//! Phase-one conditional reconstructions `x̂_cond = f(y)`.
//!
//! Two stand-ins for a trained enhancement network: an analytic baseline
//! (bilinear upsampling plus inverse gamma) and a ridge-regression patch
//! model mapping each low-resolution patch to the `k x k` high-resolution
//! block under its center pixel. Anything implementing
//! [`ConditionalModel`] can feed the refinement stage.

use nalgebra::{DMatrix, DVector};

use crate::degradation::DegradationConfig;
use crate::error::{invalid, Error, Result};
use crate::filter::reflect;
use crate::image::Image;

/// Output clamp applied by [`RidgeModel::predict`].
pub const RIDGE_CLAMP: (f64, f64) = (0.0, 1.2);

pub trait ConditionalModel {
    fn predict(&self, y: &Image) -> Result<Image>;

    fn name(&self) -> &str;
}

/// Bilinear resize with half-pixel centers and edge clamping.
pub fn bilinear_resize(img: &Image, out_w: usize, out_h: usize) -> Image {
    let (w, h) = img.dims();
    if (w, h) == (out_w, out_h) {
        return img.clone();
    }
    let sx = w as f64 / out_w as f64;
    let sy = h as f64 / out_h as f64;
    let coord = |o: usize, scale: f64, n: usize| {
        let c = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = c.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, c - i0 as f64)
    };
    Image::from_fn(out_w, out_h, |x, y| {
        let (x0, x1, fx) = coord(x, sx, w);
        let (y0, y1, fy) = coord(y, sy, h);
        let top = img.get(x0, y0) * (1.0 - fx) + img.get(x1, y0) * fx;
        let bot = img.get(x0, y1) * (1.0 - fx) + img.get(x1, y1) * fx;
        top * (1.0 - fy) + bot * fy
    })
}

/// Bilinear upsampling by `k` followed by `max(v, 0)^(1/γ)` with the
/// *assumed* training γ. Negative (noise-driven) values are clipped to zero
/// before the inverse gamma.
pub fn naive_predict(y: &Image, cfg_assumed: &DegradationConfig) -> Result<Image> {
    cfg_assumed.validate()?;
    let k = cfg_assumed.factor_k;
    let up = bilinear_resize(y, y.width() * k, y.height() * k);
    let inv = 1.0 / cfg_assumed.gamma;
    if inv == 1.0 {
        return Ok(up);
    }
    Ok(up.map(|v| v.max(0.0).powf(inv)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct NaiveModel {
    pub cfg_assumed: DegradationConfig,
}

impl ConditionalModel for NaiveModel {
    fn predict(&self, y: &Image) -> Result<Image> {
        naive_predict(y, &self.cfg_assumed)
    }

    fn name(&self) -> &str {
        "naive"
    }
}

/// Linear patch regressor: `(patch_in² + 1) x k²` weights, bias last.
#[derive(Debug, Clone, PartialEq)]
pub struct RidgeModel {
    pub patch_in: usize,
    pub scale_k: usize,
    /// Row-major `(patch_in² + 1) x scale_k²`.
    pub weights: Vec<f64>,
    pub ridge_lambda: f64,
    /// Fingerprint of the degradation the model was trained on.
    pub trained_on: String,
}

fn patch_features(y: &Image, cx: usize, cy: usize, patch_in: usize, out: &mut [f64]) {
    let r = (patch_in / 2) as isize;
    let (w, h) = y.dims();
    let mut i = 0;
    for dy in -r..=r {
        let sy = reflect(cy as isize + dy, h);
        for dx in -r..=r {
            out[i] = y.get(reflect(cx as isize + dx, w), sy);
            i += 1;
        }
    }
    out[i] = 1.0;
}

impl RidgeModel {
    pub fn n_features(&self) -> usize {
        self.patch_in * self.patch_in + 1
    }

    pub fn n_outputs(&self) -> usize {
        self.scale_k * self.scale_k
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_in == 0 || self.patch_in % 2 == 0 {
            return Err(invalid("patch_in", "must be odd"));
        }
        if self.scale_k == 0 {
            return Err(invalid("scale_k", "must be positive"));
        }
        if self.weights.len() != self.n_features() * self.n_outputs() {
            return Err(invalid("weights", "size does not match patch_in and scale_k"));
        }
        if self.weights.iter().any(|w| !w.is_finite()) {
            return Err(invalid("weights", "non-finite entry"));
        }
        Ok(())
    }

    /// Block prediction without the final clamp (linear in `y`).
    pub fn predict_unclamped(&self, y: &Image) -> Result<Image> {
        self.validate()?;
        let k = self.scale_k;
        let (nf, no) = (self.n_features(), self.n_outputs());
        let (w, h) = y.dims();
        let mut out = Image::zeros(w * k, h * k);
        let mut feat = vec![0.0; nf];
        for cy in 0..h {
            for cx in 0..w {
                patch_features(y, cx, cy, self.patch_in, &mut feat);
                for o in 0..no {
                    let mut acc = 0.0;
                    for (f, fv) in feat.iter().enumerate() {
                        acc += fv * self.weights[f * no + o];
                    }
                    out.set(cx * k + o % k, cy * k + o / k, acc);
                }
            }
        }
        Ok(out)
    }
}

impl ConditionalModel for RidgeModel {
    fn predict(&self, y: &Image) -> Result<Image> {
        Ok(self
            .predict_unclamped(y)?
            .map(|v| v.clamp(RIDGE_CLAMP.0, RIDGE_CLAMP.1)))
    }

    fn name(&self) -> &str {
        "ridge"
    }
}

/// Fits the patch regressor on `(x_hf, y_lf)` pairs by solving
/// `(PᵀP + λI) W = PᵀQ` with a Cholesky factorization.
pub fn ridge_fit(
    pairs: &[(Image, Image)],
    patch_in: usize,
    k: usize,
    ridge_lambda: f64,
    trained_on: impl Into<String>,
) -> Result<RidgeModel> {
    if pairs.is_empty() {
        return Err(Error::Empty("training pairs"));
    }
    if !(ridge_lambda > 0.0) {
        return Err(invalid("ridge_lambda", "must be > 0"));
    }
    if patch_in == 0 || patch_in % 2 == 0 {
        return Err(invalid("patch_in", "must be odd"));
    }
    if k == 0 {
        return Err(invalid("k", "must be positive"));
    }
    let nf = patch_in * patch_in + 1;
    let no = k * k;
    let mut ptp = DMatrix::<f64>::zeros(nf, nf);
    let mut ptq = DMatrix::<f64>::zeros(nf, no);
    let mut feat = vec![0.0; nf];
    let mut target = vec![0.0; no];
    for (x, y) in pairs {
        let expected = (y.width() * k, y.height() * k);
        if x.dims() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                actual: x.dims(),
            });
        }
        for cy in 0..y.height() {
            for cx in 0..y.width() {
                patch_features(y, cx, cy, patch_in, &mut feat);
                for (o, t) in target.iter_mut().enumerate() {
                    *t = x.get(cx * k + o % k, cy * k + o / k);
                }
                for i in 0..nf {
                    let fi = feat[i];
                    for j in i..nf {
                        ptp[(i, j)] += fi * feat[j];
                    }
                    for (o, t) in target.iter().enumerate() {
                        ptq[(i, o)] += fi * t;
                    }
                }
            }
        }
    }
    for i in 0..nf {
        for j in 0..i {
            ptp[(i, j)] = ptp[(j, i)];
        }
        ptp[(i, i)] += ridge_lambda;
    }
    let chol = ptp
        .cholesky()
        .ok_or_else(|| invalid("ridge_lambda", "normal equations not positive definite"))?;
    let mut weights = vec![0.0; nf * no];
    for o in 0..no {
        let col = chol.solve(&DVector::from_column_slice(ptq.column(o).as_slice()));
        for f in 0..nf {
            weights[f * no + o] = col[f];
        }
    }
    Ok(RidgeModel {
        patch_in,
        scale_k: k,
        weights,
        ridge_lambda,
        trained_on: trained_on.into(),
    })
}
