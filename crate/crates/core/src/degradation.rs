//! Forward degradation `y = Blur(DS_k(Γ_γ(x))) + n`, its linear part
//! `Blur ∘ DS_k`, the adjoint of that linear part, and a Tikhonov-regularized
//! pseudoinverse used to split reconstruction error into measurement-space
//! and null-space components.
//!
//! The composition order is literal: gamma innermost, blur outermost (the
//! blur acts on the downsampled grid).

use crate::error::{invalid, Error, Result};
use crate::filter::{gaussian_kernel, separable, separable_adjoint};
use crate::image::{dot, Image};
use crate::rng::gaussian_image;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DegradationConfig {
    pub gamma: f64,
    pub blur_sigma: f64,
    pub blur_radius: usize,
    pub factor_k: usize,
    pub noise_sigma: f64,
    pub gamma_floor: f64,
}

impl Default for DegradationConfig {
    fn default() -> Self {
        Self::in_distribution()
    }
}

impl DegradationConfig {
    /// Training-condition preset: γ = 0.7, k = 2, σ_blur = 1, σ_n = 0.02.
    pub fn in_distribution() -> Self {
        Self {
            gamma: 0.7,
            blur_sigma: 1.0,
            blur_radius: 3,
            factor_k: 2,
            noise_sigma: 0.02,
            gamma_floor: 1e-6,
        }
    }

    /// Lower-contrast shift: γ = 0.4, everything else as in-distribution.
    pub fn ood_contrast() -> Self {
        Self {
            gamma: 0.4,
            ..Self::in_distribution()
        }
    }

    /// Lower-resolution shift: k = 3, everything else as in-distribution.
    pub fn ood_resolution() -> Self {
        Self {
            factor_k: 3,
            ..Self::in_distribution()
        }
    }

    /// Identity operator with no noise (γ = 1, k = 1, no blur).
    pub fn identity() -> Self {
        Self {
            gamma: 1.0,
            blur_sigma: 0.0,
            blur_radius: 0,
            factor_k: 1,
            noise_sigma: 0.0,
            gamma_floor: 1e-6,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0) || !self.gamma.is_finite() {
            return Err(invalid("gamma", format!("must be > 0, got {}", self.gamma)));
        }
        if !(self.blur_sigma >= 0.0) || !self.blur_sigma.is_finite() {
            return Err(invalid("blur_sigma", "must be finite and >= 0"));
        }
        if self.blur_sigma > 0.0 && (self.blur_radius as f64) < (3.0 * self.blur_sigma).ceil() {
            return Err(invalid(
                "blur_radius",
                format!(
                    "{} < ceil(3 * blur_sigma) = {}",
                    self.blur_radius,
                    (3.0 * self.blur_sigma).ceil()
                ),
            ));
        }
        if self.factor_k == 0 {
            return Err(invalid("factor_k", "must be positive"));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(invalid("noise_sigma", "must be finite and >= 0"));
        }
        if !(self.gamma_floor > 0.0 && self.gamma_floor <= 0.01) {
            return Err(invalid("gamma_floor", "must lie in (0, 0.01]"));
        }
        Ok(())
    }

    /// Validates the config and checks that `factor_k` divides the image.
    pub fn validate_for(&self, width: usize, height: usize) -> Result<()> {
        self.validate()?;
        if width % self.factor_k != 0 || height % self.factor_k != 0 {
            return Err(invalid(
                "factor_k",
                format!("{} does not divide {}x{}", self.factor_k, width, height),
            ));
        }
        Ok(())
    }

    /// Measurement dims for a `width x height` input.
    pub fn measurement_dims(&self, width: usize, height: usize) -> (usize, usize) {
        (width / self.factor_k, height / self.factor_k)
    }

    /// Canonical `key=value` lines, sorted by key.
    pub fn canonical_lines(&self) -> Vec<String> {
        vec![
            format!("blur_radius={}", self.blur_radius),
            format!("blur_sigma={}", self.blur_sigma),
            format!("factor_k={}", self.factor_k),
            format!("gamma={}", self.gamma),
            format!("gamma_floor={}", self.gamma_floor),
            format!("noise_sigma={}", self.noise_sigma),
        ]
    }

    pub fn fingerprint(&self) -> String {
        crate::fingerprint::hash_lines(self.canonical_lines())
    }

    fn kernel(&self) -> Vec<f64> {
        gaussian_kernel(self.blur_sigma, self.blur_radius)
    }
}

fn check_gamma(gamma: f64) -> Result<()> {
    if gamma > 0.0 && gamma.is_finite() {
        Ok(())
    } else {
        Err(invalid("gamma", format!("must be > 0, got {gamma}")))
    }
}

/// `max(p, floor)^γ` per pixel.
pub fn gamma_transform(x: &Image, gamma: f64, floor: f64) -> Result<Image> {
    check_gamma(gamma)?;
    if gamma == 1.0 {
        return Ok(x.map(|v| v.max(floor)));
    }
    Ok(x.map(|v| v.max(floor).powf(gamma)))
}

/// `γ · max(p, floor)^(γ−1)` per pixel.
///
/// Below the floor this is the derivative evaluated at the floor, not zero;
/// it keeps a bounded pull on pixels that the clamp has flattened.
pub fn gamma_jacobian_diag(x: &Image, gamma: f64, floor: f64) -> Result<Image> {
    check_gamma(gamma)?;
    if gamma == 1.0 {
        return Ok(x.map(|_| 1.0));
    }
    Ok(x.map(|v| gamma * v.max(floor).powf(gamma - 1.0)))
}

/// Separable Gaussian blur with reflective borders. Identity when
/// `sigma == 0` or `radius == 0`.
pub fn gaussian_blur(x: &Image, sigma: f64, radius: usize) -> Image {
    separable(x, &gaussian_kernel(sigma, radius))
}

/// Block-mean downsampling by `k`.
pub fn downsample(x: &Image, k: usize) -> Result<Image> {
    let (w, h) = x.dims();
    if k == 0 || w % k != 0 || h % k != 0 {
        return Err(invalid(
            "factor_k",
            format!("{k} does not divide {w}x{h}"),
        ));
    }
    if k == 1 {
        return Ok(x.clone());
    }
    let (ow, oh) = (w / k, h / k);
    let inv = 1.0 / (k * k) as f64;
    let src = x.data();
    let mut out = vec![0.0; ow * oh];
    for y in 0..h {
        let orow = &mut out[(y / k) * ow..(y / k + 1) * ow];
        for (xx, v) in src[y * w..(y + 1) * w].iter().enumerate() {
            orow[xx / k] += v;
        }
    }
    out.iter_mut().for_each(|v| *v *= inv);
    Ok(Image::from_vec_unchecked(ow, oh, out))
}

/// Adjoint of [`downsample`]: replicate each pixel into a `k x k` block
/// scaled by `1/k²`.
pub fn downsample_adjoint(y: &Image, k: usize) -> Image {
    if k == 1 {
        return y.clone();
    }
    let (w, h) = (y.width() * k, y.height() * k);
    let inv = 1.0 / (k * k) as f64;
    Image::from_fn(w, h, |xx, yy| y.get(xx / k, yy / k) * inv)
}

/// `Blur(DS_k(Γ_γ(x)))`, plus i.i.d. N(0, σ_n²) noise when `seed` is given
/// and `noise_sigma > 0`.
pub fn apply_forward(x: &Image, cfg: &DegradationConfig, seed: Option<u64>) -> Result<Image> {
    cfg.validate_for(x.width(), x.height())?;
    let g = gamma_transform(x, cfg.gamma, cfg.gamma_floor)?;
    let mut y = separable(&downsample(&g, cfg.factor_k)?, &cfg.kernel());
    if let Some(seed) = seed {
        if cfg.noise_sigma > 0.0 {
            let n = gaussian_image(y.width(), y.height(), seed);
            y.add_scaled_inplace(cfg.noise_sigma, &n)?;
        }
    }
    Ok(y)
}

/// Linear part `Blur ∘ DS_k` (γ and noise excluded).
pub fn apply_linear(x: &Image, cfg: &DegradationConfig) -> Result<Image> {
    cfg.validate_for(x.width(), x.height())?;
    Ok(separable(&downsample(x, cfg.factor_k)?, &cfg.kernel()))
}

/// Adjoint of [`apply_linear`] mapping a measurement back onto an
/// `out_dims` image.
pub fn apply_linear_adjoint(
    y: &Image,
    cfg: &DegradationConfig,
    out_dims: (usize, usize),
) -> Result<Image> {
    cfg.validate_for(out_dims.0, out_dims.1)?;
    let expected = cfg.measurement_dims(out_dims.0, out_dims.1);
    if y.dims() != expected {
        return Err(Error::DimensionMismatch {
            expected,
            actual: y.dims(),
        });
    }
    Ok(downsample_adjoint(
        &separable_adjoint(y, &cfg.kernel()),
        cfg.factor_k,
    ))
}

/// Result of an iterative symmetric solve.
#[derive(Debug, Clone)]
pub struct SolveOutcome {
    pub x: Image,
    pub iterations: usize,
    pub converged: bool,
    /// ‖b − Mx_k‖ for k = 0..=iterations.
    pub residual_norms: Vec<f64>,
}

/// Conjugate residual iteration for a symmetric positive definite operator,
/// started from zero. Unlike plain CG, the residual 2-norm is
/// non-increasing at every iteration.
pub fn conjugate_residual(
    op: impl Fn(&Image) -> Result<Image>,
    b: &Image,
    max_iter: usize,
    tol: f64,
) -> Result<SolveOutcome> {
    let b_norm = b.norm();
    let mut x = Image::zeros(b.width(), b.height());
    if b_norm == 0.0 {
        return Ok(SolveOutcome {
            x,
            iterations: 0,
            converged: true,
            residual_norms: vec![0.0],
        });
    }
    let mut r = b.clone();
    let mut ar = op(&r)?;
    let mut p = r.clone();
    let mut ap = ar.clone();
    let mut r_ar = dot(&r, &ar)?;
    let mut history = vec![b_norm];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < max_iter {
        let ap_ap = dot(&ap, &ap)?;
        if ap_ap == 0.0 || r_ar == 0.0 {
            break;
        }
        let alpha = r_ar / ap_ap;
        x.add_scaled_inplace(alpha, &p)?;
        r.add_scaled_inplace(-alpha, &ap)?;
        iterations += 1;
        let rn = r.norm();
        history.push(rn);
        if rn <= tol * b_norm {
            converged = true;
            break;
        }
        ar = op(&r)?;
        let r_ar_next = dot(&r, &ar)?;
        let beta = r_ar_next / r_ar;
        r_ar = r_ar_next;
        p = r.axpy(beta, &p)?;
        ap = ar.axpy(beta, &ap)?;
    }
    Ok(SolveOutcome {
        x,
        iterations,
        converged,
        residual_norms: history,
    })
}

/// Solver settings for the regularized pseudoinverse.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PinvParams {
    pub eps: f64,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for PinvParams {
    fn default() -> Self {
        Self {
            eps: 1e-4,
            max_iter: 500,
            tol: 1e-8,
        }
    }
}

/// Solves `(AᵀA + eps·I) x = Aᵀy` with `A = apply_linear`. `out_dims` is
/// the image-space size. Non-convergence is reported, not raised.
pub fn pseudo_inverse_apply(
    y: &Image,
    cfg: &DegradationConfig,
    out_dims: (usize, usize),
    params: PinvParams,
) -> Result<SolveOutcome> {
    if !(params.eps > 0.0) {
        return Err(invalid("eps", "must be > 0"));
    }
    let rhs = apply_linear_adjoint(y, cfg, out_dims)?;
    conjugate_residual(
        |v| {
            let mut n = apply_linear_adjoint(&apply_linear(v, cfg)?, cfg, out_dims)?;
            n.add_scaled_inplace(params.eps, v)?;
            Ok(n)
        },
        &rhs,
        params.max_iter,
        params.tol,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::l2_sq;
    use crate::rng::gaussian_image;

    fn noiseless(gamma: f64, sigma: f64, k: usize) -> DegradationConfig {
        DegradationConfig {
            gamma,
            blur_sigma: sigma,
            blur_radius: (3.0 * sigma).ceil() as usize,
            factor_k: k,
            noise_sigma: 0.0,
            gamma_floor: 1e-6,
        }
    }

    fn positive_image(w: usize, h: usize, seed: u64) -> Image {
        gaussian_image(w, h, seed).map(|v| 0.5 + 0.15 * v.clamp(-2.5, 2.5))
    }

    #[test]
    fn gamma_transform_examples() {
        let x = positive_image(5, 5, 1);
        let id = gamma_transform(&x, 1.0, 1e-6).unwrap();
        assert_eq!(id, x);
        let q = Image::filled(1, 1, 0.25);
        assert!((gamma_transform(&q, 0.5, 1e-6).unwrap().get(0, 0) - 0.5).abs() < 1e-15);
        let one = Image::filled(2, 2, 1.0);
        for g in [0.3, 0.7, 2.0] {
            assert_eq!(gamma_transform(&one, g, 1e-6).unwrap(), one);
        }
        assert!(gamma_transform(&x, 0.0, 1e-6).is_err());
        assert!(gamma_transform(&x, -1.0, 1e-6).is_err());
    }

    #[test]
    fn gamma_jacobian_examples() {
        let x = positive_image(4, 4, 2);
        assert_eq!(gamma_jacobian_diag(&x, 1.0, 1e-6).unwrap(), Image::filled(4, 4, 1.0));
        let q = Image::filled(1, 1, 0.25);
        assert!((gamma_jacobian_diag(&q, 0.5, 1e-6).unwrap().get(0, 0) - 1.0).abs() < 1e-15);
        assert!(gamma_jacobian_diag(&x, 0.0, 1e-6).is_err());
    }

    #[test]
    fn gamma_jacobian_matches_central_differences() {
        let x = positive_image(8, 8, 3);
        let v = gaussian_image(8, 8, 4);
        let h = 1e-6;
        let gamma = 0.7;
        let jac = gamma_jacobian_diag(&x, gamma, 1e-6).unwrap();
        let analytic = jac.mul(&v).unwrap();
        let plus = gamma_transform(&x.axpy(h, &v).unwrap(), gamma, 1e-6).unwrap();
        let minus = gamma_transform(&x.axpy(-h, &v).unwrap(), gamma, 1e-6).unwrap();
        let fd = plus.sub(&minus).unwrap().scale(1.0 / (2.0 * h));
        let rel = fd.sub(&analytic).unwrap().norm() / analytic.norm();
        assert!(rel < 1e-5, "rel {rel}");
    }

    #[test]
    fn blur_examples() {
        let c = Image::filled(9, 7, 0.3);
        let b = gaussian_blur(&c, 1.5, 5);
        for v in b.data() {
            assert!((v - 0.3).abs() < 1e-15);
        }
        let x = positive_image(6, 6, 5);
        assert_eq!(gaussian_blur(&x, 0.0, 3), x);

        let mut delta = Image::zeros(9, 9);
        delta.set(4, 4, 1.0);
        let out = gaussian_blur(&delta, 1.0, 3);
        // oracle: kernel built by hand
        let raw: Vec<f64> = (-3i32..=3).map(|i| (-(i * i) as f64 / 2.0).exp()).collect();
        let s: f64 = raw.iter().sum();
        let k: Vec<f64> = raw.iter().map(|v| v / s).collect();
        for y in 0..9 {
            for x in 0..9 {
                let expect = if (1..8).contains(&x) && (1..8).contains(&y) {
                    k[x - 1] * k[y - 1]
                } else {
                    0.0
                };
                assert!((out.get(x, y) - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn downsample_examples() {
        let x = positive_image(6, 4, 6);
        assert_eq!(downsample(&x, 1).unwrap(), x);
        let d = Image::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(downsample(&d, 2).unwrap().data(), &[0.5]);
        let c = downsample(&Image::filled(6, 6, 0.4), 3).unwrap();
        assert_eq!(c.dims(), (2, 2));
        for v in c.data() {
            assert!((v - 0.4).abs() < 1e-15);
        }
        assert!(downsample(&x, 4).is_err());
    }

    #[test]
    fn forward_examples() {
        let x = positive_image(8, 8, 7);
        let id = apply_forward(&x, &DegradationConfig::identity(), Some(3)).unwrap();
        assert_eq!(id, x);

        let cfg = DegradationConfig {
            noise_sigma: 0.0,
            ..DegradationConfig::in_distribution()
        };
        let c = apply_forward(&Image::filled(8, 8, 0.36), &cfg, None).unwrap();
        assert_eq!(c.dims(), (4, 4));
        let expect = 0.36f64.powf(0.7);
        for v in c.data() {
            assert!((v - expect).abs() < 1e-14);
        }

        let noisy = DegradationConfig::in_distribution();
        let a = apply_forward(&x, &noisy, Some(11)).unwrap();
        let b = apply_forward(&x, &noisy, Some(11)).unwrap();
        assert_eq!(a, b);
        let c = apply_forward(&x, &noisy, Some(12)).unwrap();
        assert_ne!(a, c);
        assert!(apply_forward(&Image::zeros(7, 8), &noisy, None).is_err());
    }

    #[test]
    fn forward_monotone_on_constants() {
        let cfg = noiseless(0.4, 1.0, 2);
        let lo = apply_forward(&Image::filled(8, 8, 0.3), &cfg, None).unwrap();
        let hi = apply_forward(&Image::filled(8, 8, 0.6), &cfg, None).unwrap();
        assert!(lo.data().iter().zip(hi.data()).all(|(a, b)| a < b));
    }

    #[test]
    fn linear_examples() {
        let cfg = noiseless(0.6, 1.0, 2);
        let x = positive_image(12, 12, 8);
        let lin = apply_linear(&x, &cfg).unwrap();
        let fwd = apply_forward(&x, &DegradationConfig { gamma: 1.0, ..cfg }, None).unwrap();
        assert!(l2_sq(&lin, &fwd).unwrap() < 1e-28);

        let z = gaussian_image(12, 12, 9);
        let (a, b) = (0.7, -1.9);
        let lhs = apply_linear(&x.scale(a).axpy(b, &z).unwrap(), &cfg).unwrap();
        let rhs = lin.scale(a).axpy(b, &apply_linear(&z, &cfg).unwrap()).unwrap();
        assert!(lhs.sub(&rhs).unwrap().data().iter().all(|d| d.abs() < 1e-12));

        let id = DegradationConfig::identity();
        assert_eq!(apply_linear(&z, &id).unwrap(), z);
    }

    #[test]
    fn adjoint_examples() {
        let cfg = noiseless(1.0, 1.0, 2);
        for seed in 0..10 {
            let x = gaussian_image(16, 16, 100 + seed);
            let y = gaussian_image(8, 8, 200 + seed);
            let lhs = dot(&apply_linear(&x, &cfg).unwrap(), &y).unwrap();
            let rhs = dot(&x, &apply_linear_adjoint(&y, &cfg, (16, 16)).unwrap()).unwrap();
            assert!((lhs - rhs).abs() / (x.norm() * y.norm()) < 1e-9);
        }
        let id = DegradationConfig::identity();
        let y = gaussian_image(5, 5, 1);
        assert_eq!(apply_linear_adjoint(&y, &id, (5, 5)).unwrap(), y);
        let z = apply_linear_adjoint(&Image::zeros(8, 8), &cfg, (16, 16)).unwrap();
        assert_eq!(z, Image::zeros(16, 16));
        assert!(apply_linear_adjoint(&Image::zeros(7, 8), &cfg, (16, 16)).is_err());
    }

    #[test]
    fn pinv_identity_operator() {
        let y = positive_image(10, 10, 10);
        let out = pseudo_inverse_apply(
            &y,
            &DegradationConfig::identity(),
            (10, 10),
            PinvParams {
                eps: 1e-8,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(out.converged);
        for (a, b) in out.x.data().iter().zip(y.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn pinv_reproduces_consistent_measurements() {
        let cfg = noiseless(1.0, 1.0, 2);
        let x0 = positive_image(16, 16, 11);
        let y = apply_linear(&x0, &cfg).unwrap();
        let out = pseudo_inverse_apply(
            &y,
            &cfg,
            (16, 16),
            PinvParams {
                eps: 1e-6,
                max_iter: 2000,
                tol: 1e-10,
            },
        )
        .unwrap();
        let ax = apply_linear(&out.x, &cfg).unwrap();
        let rel = ax.sub(&y).unwrap().norm() / y.norm();
        assert!(rel < 1e-4, "rel {rel}");
    }

    #[test]
    fn pinv_zero_and_bad_eps() {
        let cfg = noiseless(1.0, 1.0, 2);
        let out = pseudo_inverse_apply(&Image::zeros(4, 4), &cfg, (8, 8), PinvParams::default())
            .unwrap();
        assert_eq!(out.x, Image::zeros(8, 8));
        let bad = PinvParams {
            eps: 0.0,
            ..Default::default()
        };
        assert!(pseudo_inverse_apply(&Image::zeros(4, 4), &cfg, (8, 8), bad).is_err());
    }

    #[test]
    fn pinv_contracts_toward_measurement_and_residuals_monotone() {
        let cfg = noiseless(1.0, 1.0, 2);
        let x0 = positive_image(24, 24, 12);
        let y = apply_forward(
            &x0,
            &DegradationConfig {
                noise_sigma: 0.02,
                ..cfg
            },
            Some(5),
        )
        .unwrap();
        let out = pseudo_inverse_apply(&y, &cfg, (24, 24), PinvParams::default()).unwrap();
        let x_init = apply_linear_adjoint(&y, &cfg, (24, 24)).unwrap();
        let after = apply_linear(&out.x, &cfg).unwrap().sub(&y).unwrap().norm();
        let before = apply_linear(&x_init, &cfg).unwrap().sub(&y).unwrap().norm();
        assert!(after <= before);
        for w in out.residual_norms.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-12), "{} > {}", w[1], w[0]);
        }
    }

    #[test]
    fn config_validation() {
        assert!(DegradationConfig::in_distribution().validate().is_ok());
        let bad_radius = DegradationConfig {
            blur_sigma: 2.0,
            blur_radius: 5,
            ..DegradationConfig::in_distribution()
        };
        assert!(bad_radius.validate().is_err());
        let bad_floor = DegradationConfig {
            gamma_floor: 0.02,
            ..DegradationConfig::in_distribution()
        };
        assert!(bad_floor.validate().is_err());
        assert!(DegradationConfig::in_distribution().validate_for(9, 8).is_err());
        assert_ne!(
            DegradationConfig::in_distribution().fingerprint(),
            DegradationConfig::ood_contrast().fingerprint()
        );
    }
}
