//! Composite data-consistency loss
//!
//! ```text
//! L_DC = ‖y − A(x̂)‖² + λ₁·mean((S(y) − S(Ax̂))²) + λ₂·mean((1 − SSIM(y, Ax̂))²)
//! ```
//!
//! where `S` is the ε-smoothed Sobel gradient magnitude and `SSIM` the
//! per-pixel structural similarity map. Both auxiliary terms live in
//! measurement space. The gradient with respect to `x_t` uses the frozen
//! Tweedie Jacobian `∂x̂_0/∂x_t ≈ I/√ᾱ_t`.

use crate::degradation::{apply_forward, apply_linear_adjoint, gamma_jacobian_diag, DegradationConfig};
use crate::diffusion::{tweedie_denoise, DiffusionSchedule, ScoreModel};
use crate::error::{invalid, Error, Result};
use crate::filter::{correlate3, correlate3_adjoint, gaussian_kernel, separable, separable_adjoint};
use crate::image::{l2_sq, Image};

const SOBEL_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
const SOBEL_Y: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];
const SOBEL_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConsistencyWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub ssim_window: usize,
    pub ssim_k1: f64,
    pub ssim_k2: f64,
    pub peak: f64,
}

impl Default for ConsistencyWeights {
    fn default() -> Self {
        Self {
            lambda1: 0.5,
            lambda2: 0.1,
            ssim_window: 11,
            ssim_k1: 0.01,
            ssim_k2: 0.03,
            peak: 1.0,
        }
    }
}

impl ConsistencyWeights {
    /// Plain L2 (both auxiliary weights zero).
    pub fn l2_only() -> Self {
        Self {
            lambda1: 0.0,
            lambda2: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(invalid("lambda", "weights must be non-negative"));
        }
        if self.ssim_window < 3 || self.ssim_window % 2 == 0 {
            return Err(invalid("ssim_window", "must be odd and >= 3"));
        }
        if !(self.ssim_k1 > 0.0 && self.ssim_k2 > 0.0 && self.peak > 0.0) {
            return Err(invalid("ssim", "k1, k2 and peak must be positive"));
        }
        Ok(())
    }

    fn c1(&self) -> f64 {
        (self.ssim_k1 * self.peak).powi(2)
    }

    fn c2(&self) -> f64 {
        (self.ssim_k2 * self.peak).powi(2)
    }

    fn window_kernel(&self) -> Vec<f64> {
        gaussian_kernel(self.ssim_window as f64 / 6.0, self.ssim_window / 2)
    }
}

struct SobelParts {
    gx: Image,
    gy: Image,
    mag: Image,
}

fn sobel_parts(img: &Image) -> Result<SobelParts> {
    if img.width() < 3 || img.height() < 3 {
        return Err(invalid("image", "sobel needs at least 3x3"));
    }
    let gx = correlate3(img, &SOBEL_X);
    let gy = correlate3(img, &SOBEL_Y);
    let mag = gx.zip_map(&gy, |a, b| (a * a + b * b + SOBEL_EPS * SOBEL_EPS).sqrt())?;
    Ok(SobelParts { gx, gy, mag })
}

/// `√(Gx² + Gy² + ε²)` with unnormalized 3x3 Sobel kernels.
pub fn sobel_magnitude(img: &Image) -> Result<Image> {
    Ok(sobel_parts(img)?.mag)
}

/// Local statistics behind one SSIM map.
struct SsimStats {
    mu_a: Image,
    mu_b: Image,
    var_a: Image,
    var_b: Image,
    cov: Image,
}

fn ssim_stats(a: &Image, b: &Image, w: &ConsistencyWeights) -> Result<SsimStats> {
    a.ensure_same_dims(b)?;
    w.validate()?;
    if a.width() < w.ssim_window || a.height() < w.ssim_window {
        return Err(invalid(
            "ssim_window",
            format!("{} exceeds image {}x{}", w.ssim_window, a.width(), a.height()),
        ));
    }
    let k = w.window_kernel();
    let mu_a = separable(a, &k);
    let mu_b = separable(b, &k);
    let m_aa = separable(&a.mul(a)?, &k);
    let m_bb = separable(&b.mul(b)?, &k);
    let m_ab = separable(&a.mul(b)?, &k);
    let var_a = m_aa.zip_map(&mu_a, |m, u| m - u * u)?;
    let var_b = m_bb.zip_map(&mu_b, |m, u| m - u * u)?;
    let mu_ab = mu_a.mul(&mu_b)?;
    let cov = m_ab.sub(&mu_ab)?;
    Ok(SsimStats {
        mu_a,
        mu_b,
        var_a,
        var_b,
        cov,
    })
}

/// Per-pixel SSIM with a Gaussian window of std `window/6`.
pub fn ssim_map(a: &Image, b: &Image, w: &ConsistencyWeights) -> Result<Image> {
    let st = ssim_stats(a, b, w)?;
    let (c1, c2) = (w.c1(), w.c2());
    let data = (0..a.len())
        .map(|i| {
            let (ua, ub) = (st.mu_a.data()[i], st.mu_b.data()[i]);
            let n = (2.0 * ua * ub + c1) * (2.0 * st.cov.data()[i] + c2);
            let d = (ua * ua + ub * ub + c1) * (st.var_a.data()[i] + st.var_b.data()[i] + c2);
            n / d
        })
        .collect();
    Ok(Image::from_vec_unchecked(a.width(), a.height(), data))
}

/// The three weighted terms of the loss, kept separate for reporting.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTerms {
    pub l2: f64,
    pub edge: f64,
    pub ssim: f64,
}

impl LossTerms {
    pub fn total(&self) -> f64 {
        self.l2 + self.edge + self.ssim
    }
}

/// Loss terms between a measurement `y` and a predicted measurement `b`.
pub fn measurement_loss_terms(y: &Image, b: &Image, w: &ConsistencyWeights) -> Result<LossTerms> {
    y.ensure_same_dims(b)?;
    let m = y.len() as f64;
    let l2 = l2_sq(y, b)?;
    let edge = if w.lambda1 > 0.0 {
        w.lambda1 * l2_sq(&sobel_magnitude(y)?, &sobel_magnitude(b)?)? / m
    } else {
        0.0
    };
    let ssim = if w.lambda2 > 0.0 {
        let map = ssim_map(y, b, w)?;
        w.lambda2 * map.data().iter().map(|s| (1.0 - s) * (1.0 - s)).sum::<f64>() / m
    } else {
        0.0
    };
    Ok(LossTerms { l2, edge, ssim })
}

/// `L_DC(y, x̂)` with `A` the noise-free forward operator.
pub fn dc_loss(y: &Image, x0_hat: &Image, cfg: &DegradationConfig, w: &ConsistencyWeights) -> Result<f64> {
    let b = apply_forward(x0_hat, cfg, None)?;
    if b.dims() != y.dims() {
        return Err(Error::DimensionMismatch {
            expected: y.dims(),
            actual: b.dims(),
        });
    }
    Ok(measurement_loss_terms(y, &b, w)?.total())
}

/// Gradient of the measurement-space loss with respect to `b = A x̂`.
pub fn measurement_gradient(y: &Image, b: &Image, w: &ConsistencyWeights) -> Result<Image> {
    y.ensure_same_dims(b)?;
    let m = y.len() as f64;
    let mut g = b.sub(y)?.scale(2.0);

    if w.lambda1 > 0.0 {
        let sy = sobel_magnitude(y)?;
        let sb = sobel_parts(b)?;
        // d/dS_b of λ₁/M Σ (S_y − S_b)²
        let up = sb.mag.sub(&sy)?.scale(2.0 * w.lambda1 / m);
        let ux = up.mul(&sb.gx)?.zip_map(&sb.mag, |a, s| a / s)?;
        let uy = up.mul(&sb.gy)?.zip_map(&sb.mag, |a, s| a / s)?;
        g.add_scaled_inplace(1.0, &correlate3_adjoint(&ux, &SOBEL_X))?;
        g.add_scaled_inplace(1.0, &correlate3_adjoint(&uy, &SOBEL_Y))?;
    }

    if w.lambda2 > 0.0 {
        let st = ssim_stats(y, b, w)?;
        let (c1, c2) = (w.c1(), w.c2());
        let n = y.len();
        let mut d_mu = vec![0.0; n];
        let mut d_mbb = vec![0.0; n];
        let mut d_mab = vec![0.0; n];
        for i in 0..n {
            let (ua, ub) = (st.mu_a.data()[i], st.mu_b.data()[i]);
            let a1 = 2.0 * ua * ub + c1;
            let a2 = 2.0 * st.cov.data()[i] + c2;
            let b1 = ua * ua + ub * ub + c1;
            let b2 = st.var_a.data()[i] + st.var_b.data()[i] + c2;
            let den = b1 * b2;
            let s = a1 * a2 / den;
            // upstream dL/dS for λ₂/M Σ (1 − S)²
            let up = -2.0 * w.lambda2 * (1.0 - s) / m;
            let dn_dmu = 2.0 * ua * a2 - 2.0 * ua * a1;
            let dd_dmu = 2.0 * ub * b2 - 2.0 * ub * b1;
            d_mu[i] = up * (dn_dmu - s * dd_dmu) / den;
            d_mbb[i] = up * (-s * b1 / den);
            d_mab[i] = up * (2.0 * a1 / den);
        }
        let (wd, ht) = y.dims();
        let k = w.window_kernel();
        let g_mu = separable_adjoint(&Image::from_vec_unchecked(wd, ht, d_mu), &k);
        let g_mbb = separable_adjoint(&Image::from_vec_unchecked(wd, ht, d_mbb), &k);
        let g_mab = separable_adjoint(&Image::from_vec_unchecked(wd, ht, d_mab), &k);
        for i in 0..n {
            g.data_mut()[i] += g_mu.data()[i]
                + 2.0 * b.data()[i] * g_mbb.data()[i]
                + y.data()[i] * g_mab.data()[i];
        }
    }
    Ok(g)
}

/// Gradient of `L_DC(y, ·)` at `x̂_0` in image space.
pub fn dc_gradient_x0(
    y: &Image,
    x0_hat: &Image,
    cfg: &DegradationConfig,
    w: &ConsistencyWeights,
) -> Result<Image> {
    let b = apply_forward(x0_hat, cfg, None)?;
    if b.dims() != y.dims() {
        return Err(Error::DimensionMismatch {
            expected: y.dims(),
            actual: b.dims(),
        });
    }
    let gb = measurement_gradient(y, &b, w)?;
    let back = apply_linear_adjoint(&gb, cfg, x0_hat.dims())?;
    back.mul(&gamma_jacobian_diag(x0_hat, cfg.gamma, cfg.gamma_floor)?)
}

/// `∇_{x_t} L_DC(y, x̂_0(x_t))` under the frozen Jacobian `I/√ᾱ_t`.
/// Returns the gradient together with the `x̂_0` it was evaluated at.
pub fn dc_gradient_with_x0<S: ScoreModel + ?Sized>(
    y: &Image,
    x_t: &Image,
    t: usize,
    prior: &S,
    sched: &DiffusionSchedule,
    cfg: &DegradationConfig,
    w: &ConsistencyWeights,
) -> Result<(Image, Image)> {
    let x0 = tweedie_denoise(x_t, t, prior, sched)?;
    let g = dc_gradient_x0(y, &x0, cfg, w)?.scale(1.0 / sched.alpha_bar(t).sqrt());
    Ok((g, x0))
}

pub fn dc_gradient<S: ScoreModel + ?Sized>(
    y: &Image,
    x_t: &Image,
    t: usize,
    prior: &S,
    sched: &DiffusionSchedule,
    cfg: &DegradationConfig,
    w: &ConsistencyWeights,
) -> Result<Image> {
    Ok(dc_gradient_with_x0(y, x_t, t, prior, sched, cfg, w)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{forward_noise, GaussianMixturePrior};
    use crate::image::dot;
    use crate::rng::{derive_seed, gaussian_image};

    fn smooth_random(w: usize, h: usize, seed: u64) -> Image {
        gaussian_image(w, h, seed).map(|v| 0.5 + 0.15 * v.clamp(-3.0, 3.0))
    }

    #[test]
    fn sobel_examples() {
        let c = sobel_magnitude(&Image::filled(6, 5, 0.4)).unwrap();
        assert!(c.data().iter().all(|v| *v <= 1e-7));

        // vertical step: columns 0..3 are 0, columns 3..6 are 1
        let step = Image::from_fn(6, 5, |x, _| if x >= 3 { 1.0 } else { 0.0 });
        let s = sobel_magnitude(&step).unwrap();
        for y in 0..5 {
            // hand-applied kernel: (1 + 2 + 1) * 1 on both edge columns
            assert!((s.get(2, y) - 4.0).abs() < 1e-12);
            assert!((s.get(3, y) - 4.0).abs() < 1e-12);
            assert!(s.get(0, y) < 1e-7 && s.get(5, y) < 1e-7);
        }

        let r = smooth_random(7, 5, 3);
        let a = sobel_magnitude(&r.rotate90()).unwrap();
        let b = sobel_magnitude(&r).unwrap().rotate90();
        for (p, q) in a.data().iter().zip(b.data()) {
            assert!((p - q).abs() < 1e-12);
        }
        assert!(sobel_magnitude(&Image::zeros(2, 5)).is_err());
    }

    #[test]
    fn ssim_examples() {
        let w = ConsistencyWeights::default();
        let a = smooth_random(16, 16, 4);
        assert!(ssim_map(&a, &a, &w).unwrap().data().iter().all(|v| *v == 1.0));

        let (c, d) = (0.3, 0.25);
        let m = ssim_map(&Image::filled(12, 12, c), &Image::filled(12, 12, c + d), &w).unwrap();
        let c1 = (0.01f64).powi(2);
        let expect = (2.0 * c * (c + d) + c1) / (c * c + (c + d) * (c + d) + c1);
        for v in m.data() {
            assert!((v - expect).abs() < 1e-12);
        }

        let b = smooth_random(16, 16, 5).scale(-1.0);
        let m = ssim_map(&a, &b, &w).unwrap();
        assert!(m.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(ssim_map(&a, &Image::zeros(16, 15), &w).is_err());
        assert!(ssim_map(&Image::zeros(8, 8), &Image::zeros(8, 8), &w).is_err());
    }

    #[test]
    fn dc_loss_examples() {
        let cfg = DegradationConfig {
            noise_sigma: 0.0,
            ..DegradationConfig::in_distribution()
        };
        let w = ConsistencyWeights::default();
        let x = smooth_random(32, 32, 6);
        let y = apply_forward(&x, &cfg, None).unwrap();
        assert_eq!(dc_loss(&y, &x, &cfg, &w).unwrap(), 0.0);

        let other = smooth_random(32, 32, 7);
        let plain = dc_loss(&y, &other, &cfg, &ConsistencyWeights::l2_only()).unwrap();
        let b = apply_forward(&other, &cfg, None).unwrap();
        assert_eq!(plain, l2_sq(&y, &b).unwrap());

        // independent recomputation of each term
        let w16 = ConsistencyWeights {
            ssim_window: 7,
            ..w
        };
        let x16 = smooth_random(16, 16, 8);
        let y16 = smooth_random(16, 16, 9);
        let id = DegradationConfig::identity();
        let total = dc_loss(&y16, &x16, &id, &w16).unwrap();
        let sy = sobel_magnitude(&y16).unwrap();
        let sx = sobel_magnitude(&x16).unwrap();
        let mut edge = 0.0;
        for i in 0..256 {
            edge += (sy.data()[i] - sx.data()[i]).powi(2);
        }
        let map = ssim_map(&y16, &x16, &w16).unwrap();
        let mut ss = 0.0;
        for v in map.data() {
            ss += (1.0 - v).powi(2);
        }
        let expect = l2_sq(&y16, &x16).unwrap() + 0.5 * edge / 256.0 + 0.1 * ss / 256.0;
        assert!((total - expect).abs() < 1e-12);

        assert!(dc_loss(&Image::zeros(5, 5), &x, &cfg, &w).is_err());
    }

    #[test]
    fn measurement_gradient_matches_finite_differences() {
        let w = ConsistencyWeights {
            ssim_window: 5,
            ..ConsistencyWeights::default()
        };
        let y = smooth_random(9, 9, 10);
        let b = smooth_random(9, 9, 11);
        let g = measurement_gradient(&y, &b, &w).unwrap();
        let h = 1e-6;
        for d in 0..5 {
            let v = gaussian_image(9, 9, 50 + d);
            let f = |s: f64| measurement_loss_terms(&y, &b.axpy(s, &v).unwrap(), &w).unwrap().total();
            let fd = (f(h) - f(-h)) / (2.0 * h);
            let an = dot(&g, &v).unwrap();
            assert!((fd - an).abs() / an.abs().max(1e-6) < 1e-5, "fd {fd} an {an}");
        }
    }

    #[test]
    fn gradient_vanishes_at_perfect_consistency() {
        let sched = DiffusionSchedule::standard();
        let cfg = DegradationConfig {
            noise_sigma: 0.0,
            ..DegradationConfig::in_distribution()
        };
        let w = ConsistencyWeights {
            ssim_window: 7,
            ..ConsistencyWeights::default()
        };
        let mu = smooth_random(16, 16, 12);
        let prior = GaussianMixturePrior::uniform(vec![mu.clone()], 0.05).unwrap();
        let xt = forward_noise(&mu, 30, &sched, 1).unwrap();
        let x0 = tweedie_denoise(&xt, 30, &prior, &sched).unwrap();
        let y = apply_forward(&x0, &cfg, None).unwrap();
        let g = dc_gradient(&y, &xt, 30, &prior, &sched, &cfg, &w).unwrap();
        assert!(g.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn gradient_reduces_to_scaled_residual() {
        let sched = DiffusionSchedule::standard();
        let mu = smooth_random(8, 8, 13);
        let prior = GaussianMixturePrior::uniform(vec![mu.clone()], 0.1).unwrap();
        let t = 100;
        let xt = forward_noise(&mu, t, &sched, 2).unwrap();
        let y = smooth_random(8, 8, 14);
        let cfg = DegradationConfig::identity();
        let g = dc_gradient(&y, &xt, t, &prior, &sched, &cfg, &ConsistencyWeights::l2_only()).unwrap();
        let x0 = tweedie_denoise(&xt, t, &prior, &sched).unwrap();
        let s = 2.0 / sched.alpha_bar(t).sqrt();
        for i in 0..64 {
            let expect = s * (x0.data()[i] - y.data()[i]);
            assert!((g.data()[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_matches_frozen_jacobian_differences() {
        let sched = DiffusionSchedule::standard();
        let cfg = DegradationConfig {
            gamma: 0.7,
            blur_sigma: 1.0,
            blur_radius: 3,
            factor_k: 2,
            noise_sigma: 0.0,
            gamma_floor: 1e-6,
        };
        let w = ConsistencyWeights {
            ssim_window: 7,
            ..ConsistencyWeights::default()
        };
        let templates: Vec<Image> = (0..3).map(|k| smooth_random(16, 16, 20 + k)).collect();
        let prior = GaussianMixturePrior::uniform(templates.clone(), 0.05).unwrap();
        let y = apply_forward(&smooth_random(16, 16, 30), &cfg, Some(1)).unwrap();
        for t in [10usize, 100, 500] {
            let xt = forward_noise(&templates[0], t, &sched, 40 + t as u64).unwrap();
            let g = dc_gradient(&y, &xt, t, &prior, &sched, &cfg, &w).unwrap();
            let x0 = tweedie_denoise(&xt, t, &prior, &sched).unwrap();
            let inv = 1.0 / sched.alpha_bar(t).sqrt();
            let h = 1e-5;
            for d in 0..5 {
                let v = gaussian_image(16, 16, derive_seed(t as u64, d));
                let f = |s: f64| dc_loss(&y, &x0.axpy(s * inv, &v).unwrap(), &cfg, &w).unwrap();
                let fd = (f(h) - f(-h)) / (2.0 * h);
                let an = dot(&g, &v).unwrap();
                assert!((fd - an).abs() / fd.abs() < 1e-3, "t={t} fd={fd} an={an}");
            }
        }
    }

    #[test]
    fn l2_term_blind_to_null_space() {
        let cfg = DegradationConfig {
            gamma: 1.0,
            noise_sigma: 0.0,
            ..DegradationConfig::in_distribution()
        };
        let w = ConsistencyWeights {
            ssim_window: 7,
            ..ConsistencyWeights::default()
        };
        let x = smooth_random(16, 16, 60);
        let y = apply_forward(&smooth_random(16, 16, 61), &cfg, None).unwrap();
        // +1/-1 checker inside each 2x2 block averages to zero
        let v = Image::from_fn(16, 16, |i, j| if (i + j) % 2 == 0 { 0.01 } else { -0.01 });
        assert!(crate::degradation::apply_linear(&v, &cfg).unwrap().norm() < 1e-15);
        let before = dc_loss(&y, &x, &cfg, &w).unwrap();
        let after = dc_loss(&y, &x.add(&v).unwrap(), &cfg, &w).unwrap();
        assert!((before - after).abs() < 1e-9);
    }
}
