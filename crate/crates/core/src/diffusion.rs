//! Variance-preserving diffusion machinery with an exact Gaussian-mixture
//! score.
//!
//! Time index `t` runs over `0..T`; the marginal at level `t` is
//! `x_t = √ᾱ_t x_0 + √(1−ᾱ_t) ε`. Under a mixture prior
//! `x_0 ~ Σ_k w_k N(μ_k, σ_p² I)` the noised marginal stays a mixture,
//! `p_t = Σ_k w_k N(√ᾱ_t μ_k, v_t I)` with `v_t = ᾱ_t σ_p² + 1 − ᾱ_t`, so its
//! score is available in closed form.

use crate::error::{invalid, Error, Result};
use crate::image::Image;
use crate::rng::gaussian_image;

/// Linear-β noise schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    beta_min: f64,
    beta_max: f64,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl DiffusionSchedule {
    /// `beta[t]` interpolates linearly from `beta_min` (t = 0) to `beta_max`
    /// (t = T−1). `alpha_bar` is accumulated in log space.
    pub fn linear(steps: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if steps < 2 {
            return Err(invalid("T", "need at least 2 steps"));
        }
        if !(0.0 < beta_min && beta_min < beta_max && beta_max < 1.0) {
            return Err(invalid(
                "beta",
                format!("need 0 < beta_min ({beta_min}) < beta_max ({beta_max}) < 1"),
            ));
        }
        if beta_min >= 0.01 {
            return Err(invalid("beta_min", "alpha_bar[0] must exceed 0.99"));
        }
        let last = (steps - 1) as f64;
        let beta: Vec<f64> = (0..steps)
            .map(|t| beta_min + (beta_max - beta_min) * t as f64 / last)
            .collect();
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut log_acc = 0.0;
        let alpha_bar = beta
            .iter()
            .map(|b| {
                log_acc += (-b).ln_1p();
                log_acc.exp()
            })
            .collect();
        Ok(Self {
            beta_min,
            beta_max,
            beta,
            alpha,
            alpha_bar,
        })
    }

    /// The common `T = 1000`, `β ∈ [1e-4, 0.02]` schedule.
    pub fn standard() -> Self {
        Self::linear(1000, 1e-4, 0.02).expect("valid default schedule")
    }

    #[inline]
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn beta_min(&self) -> f64 {
        self.beta_min
    }

    pub fn beta_max(&self) -> f64 {
        self.beta_max
    }

    #[inline]
    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t]
    }

    #[inline]
    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    #[inline]
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// Posterior ("small") variance `β̃_t = β_t (1−ᾱ_{t−1}) / (1−ᾱ_t)`, t ≥ 1.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        self.beta[t] * (1.0 - self.alpha_bar[t - 1]) / (1.0 - self.alpha_bar[t])
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t < self.steps() {
            Ok(())
        } else {
            Err(Error::TimeOutOfRange {
                t,
                lo: 0,
                hi: self.steps(),
            })
        }
    }

    pub fn canonical_lines(&self) -> Vec<String> {
        vec![
            format!("T={}", self.steps()),
            format!("beta_max={}", self.beta_max),
            format!("beta_min={}", self.beta_min),
        ]
    }
}

/// Anything that can supply `∇_x log p_t(x)`.
pub trait ScoreModel {
    fn score(&self, x: &Image, t: usize, sched: &DiffusionSchedule) -> Result<Image>;

    /// Lines identifying the model for artifact fingerprints.
    fn canonical_lines(&self) -> Vec<String> {
        Vec::new()
    }
}

/// Isotropic Gaussian mixture over images.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixturePrior {
    templates: Vec<Image>,
    weights: Vec<f64>,
    sigma_p: f64,
}

impl GaussianMixturePrior {
    pub fn new(templates: Vec<Image>, weights: Vec<f64>, sigma_p: f64) -> Result<Self> {
        if templates.is_empty() {
            return Err(Error::Empty("templates"));
        }
        if weights.len() != templates.len() {
            return Err(invalid("weights", "one weight per template required"));
        }
        let dims = templates[0].dims();
        if let Some(bad) = templates.iter().find(|t| t.dims() != dims) {
            return Err(Error::DimensionMismatch {
                expected: dims,
                actual: bad.dims(),
            });
        }
        if weights.iter().any(|w| !(*w > 0.0)) {
            return Err(invalid("weights", "must be positive"));
        }
        if (weights.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err(invalid("weights", "must sum to 1"));
        }
        if !(sigma_p > 0.0) || !sigma_p.is_finite() {
            return Err(invalid("sigma_p", "must be positive"));
        }
        Ok(Self {
            templates,
            weights,
            sigma_p,
        })
    }

    /// Equal weights over `templates`.
    pub fn uniform(templates: Vec<Image>, sigma_p: f64) -> Result<Self> {
        let k = templates.len().max(1);
        Self::new(templates, vec![1.0 / k as f64; k], sigma_p)
    }

    pub fn templates(&self) -> &[Image] {
        &self.templates
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn sigma_p(&self) -> f64 {
        self.sigma_p
    }

    pub fn dims(&self) -> (usize, usize) {
        self.templates[0].dims()
    }

    fn template_hash(&self) -> String {
        let mut bytes = Vec::new();
        for t in &self.templates {
            bytes.extend((t.width() as u64).to_le_bytes());
            bytes.extend((t.height() as u64).to_le_bytes());
            t.data().iter().for_each(|v| bytes.extend(v.to_le_bytes()));
        }
        crate::fingerprint::hash_bytes(&bytes)
    }

    /// `v_t = ᾱ_t σ_p² + (1 − ᾱ_t)`
    pub fn marginal_variance(&self, t: usize, sched: &DiffusionSchedule) -> f64 {
        let ab = sched.alpha_bar(t);
        ab * self.sigma_p * self.sigma_p + (1.0 - ab)
    }

    fn check(&self, x: &Image, t: usize, sched: &DiffusionSchedule) -> Result<()> {
        sched.check_t(t)?;
        if x.dims() != self.dims() {
            return Err(Error::DimensionMismatch {
                expected: self.dims(),
                actual: x.dims(),
            });
        }
        Ok(())
    }

    /// Unnormalized component log-weights `ln w_k − ‖x − √ᾱμ_k‖²/(2v)`.
    fn component_logits(&self, x: &Image, t: usize, sched: &DiffusionSchedule) -> Vec<f64> {
        let s = sched.alpha_bar(t).sqrt();
        let v = self.marginal_variance(t, sched);
        self.templates
            .iter()
            .zip(&self.weights)
            .map(|(mu, w)| {
                let d: f64 = x
                    .data()
                    .iter()
                    .zip(mu.data())
                    .map(|(a, m)| {
                        let e = a - s * m;
                        e * e
                    })
                    .sum();
                w.ln() - d / (2.0 * v)
            })
            .collect()
    }

    /// Mixture responsibilities `r_k(x)` at level `t`.
    pub fn responsibilities(
        &self,
        x: &Image,
        t: usize,
        sched: &DiffusionSchedule,
    ) -> Result<Vec<f64>> {
        self.check(x, t, sched)?;
        let logits = self.component_logits(x, t, sched);
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut r: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let z: f64 = r.iter().sum();
        r.iter_mut().for_each(|v| *v /= z);
        Ok(r)
    }

    /// `log p_t(x)` including all normalizing constants.
    pub fn log_density(&self, x: &Image, t: usize, sched: &DiffusionSchedule) -> Result<f64> {
        self.check(x, t, sched)?;
        let v = self.marginal_variance(t, sched);
        let logits = self.component_logits(x, t, sched);
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
        let d = x.len() as f64;
        Ok(lse - 0.5 * d * (2.0 * std::f64::consts::PI * v).ln())
    }

    /// Draws `x_0` from the mixture (no clamping). Returns the image and the
    /// chosen component.
    pub fn sample(&self, seed: u64) -> (Image, usize) {
        use rand::Rng;
        let mut rng = crate::rng::rng_from_seed(seed);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut k = self.templates.len() - 1;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                k = i;
                break;
            }
        }
        let (w, h) = self.dims();
        let n = gaussian_image(w, h, crate::rng::derive_seed(seed, 1));
        let x = self.templates[k]
            .axpy(self.sigma_p, &n)
            .expect("template dims");
        (x, k)
    }
}

impl ScoreModel for GaussianMixturePrior {
    /// `Σ_k r_k (√ᾱ μ_k − x) / v_t`
    fn score(&self, x: &Image, t: usize, sched: &DiffusionSchedule) -> Result<Image> {
        let r = self.responsibilities(x, t, sched)?;
        let s = sched.alpha_bar(t).sqrt();
        let inv_v = 1.0 / self.marginal_variance(t, sched);
        let mut out: Vec<f64> = x.data().iter().map(|v| -v).collect();
        for (mu, rk) in self.templates.iter().zip(&r) {
            if *rk == 0.0 {
                continue;
            }
            let c = rk * s;
            for (o, m) in out.iter_mut().zip(mu.data()) {
                *o += c * m;
            }
        }
        out.iter_mut().for_each(|v| *v *= inv_v);
        Ok(Image::from_vec_unchecked(x.width(), x.height(), out))
    }

    fn canonical_lines(&self) -> Vec<String> {
        let weights: Vec<String> = self.weights.iter().map(|w| w.to_string()).collect();
        vec![
            format!("prior_K={}", self.templates.len()),
            format!("prior_sigma_p={}", self.sigma_p),
            format!("prior_templates={}", self.template_hash()),
            format!("prior_weights={}", weights.join(";")),
        ]
    }
}

pub fn make_schedule(steps: usize, beta_min: f64, beta_max: f64) -> Result<DiffusionSchedule> {
    DiffusionSchedule::linear(steps, beta_min, beta_max)
}

/// `√ᾱ_t x_0 + √(1−ᾱ_t) ε`, ε seeded.
pub fn forward_noise(x0: &Image, t: usize, sched: &DiffusionSchedule, seed: u64) -> Result<Image> {
    sched.check_t(t)?;
    let ab = sched.alpha_bar(t);
    let eps = gaussian_image(x0.width(), x0.height(), seed);
    x0.scale(ab.sqrt()).axpy((1.0 - ab).sqrt(), &eps)
}

pub fn gmm_score(
    prior: &GaussianMixturePrior,
    x: &Image,
    t: usize,
    sched: &DiffusionSchedule,
) -> Result<Image> {
    prior.score(x, t, sched)
}

/// Tweedie estimate from a precomputed score.
pub fn tweedie_from_score(
    x_t: &Image,
    score: &Image,
    t: usize,
    sched: &DiffusionSchedule,
) -> Result<Image> {
    sched.check_t(t)?;
    let ab = sched.alpha_bar(t);
    Ok(x_t.axpy(1.0 - ab, score)?.scale(1.0 / ab.sqrt()))
}

/// `x̂_0 = (x_t + (1−ᾱ_t) s(x_t, t)) / √ᾱ_t`
pub fn tweedie_denoise<S: ScoreModel + ?Sized>(
    x_t: &Image,
    t: usize,
    prior: &S,
    sched: &DiffusionSchedule,
) -> Result<Image> {
    let s = prior.score(x_t, t, sched)?;
    tweedie_from_score(x_t, &s, t, sched)
}

/// Ancestral transition from a precomputed score at `(x_t, t)`.
pub fn ancestral_from_score(
    x_t: &Image,
    score: &Image,
    t: usize,
    sched: &DiffusionSchedule,
    seed: u64,
) -> Result<Image> {
    if t == 0 || t >= sched.steps() {
        return Err(Error::TimeOutOfRange {
            t,
            lo: 1,
            hi: sched.steps(),
        });
    }
    let mut next = x_t
        .axpy(sched.beta(t), score)?
        .scale(1.0 / sched.alpha(t).sqrt());
    if t > 1 {
        let z = gaussian_image(x_t.width(), x_t.height(), seed);
        next.add_scaled_inplace(sched.posterior_variance(t).sqrt(), &z)?;
    }
    Ok(next)
}

/// `x_{t−1} = (x_t + β_t s(x_t, t))/√α_t + √β̃_t z`, with `z = 0` at t = 1.
pub fn ancestral_step<S: ScoreModel + ?Sized>(
    x_t: &Image,
    t: usize,
    prior: &S,
    sched: &DiffusionSchedule,
    seed: u64,
) -> Result<Image> {
    if t == 0 || t >= sched.steps() {
        return Err(Error::TimeOutOfRange {
            t,
            lo: 1,
            hi: sched.steps(),
        });
    }
    let s = prior.score(x_t, t, sched)?;
    ancestral_from_score(x_t, &s, t, sched, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_seed;

    fn rand_templates(k: usize, w: usize, h: usize, seed: u64) -> Vec<Image> {
        (0..k)
            .map(|i| gaussian_image(w, h, derive_seed(seed, i as u64)).map(|v| 0.5 + 0.2 * v))
            .collect()
    }

    #[test]
    fn schedule_examples() {
        let s = make_schedule(1000, 1e-4, 0.02).unwrap();
        assert!(s.alpha_bar(999) < 1e-4);
        // regression constant: prod(1 - linspace(1e-4, 0.02, 1000)), computed
        // once with numpy
        assert!((s.alpha_bar(999) - 4.035_829_765_375_68e-5).abs() < 1e-15);
        assert!((s.alpha_bar(0) - (1.0 - 1e-4)).abs() < 1e-16);

        let two = make_schedule(2, 1e-3, 0.5).unwrap();
        assert_eq!(two.betas(), &[1e-3, 0.5]);

        for w in s.betas().windows(2) {
            assert!(w[1] >= w[0] && w[0] > 0.0);
        }
        for w in s.alpha_bars().windows(2) {
            assert!(w[1] < w[0]);
        }
        assert!(s.alpha_bars().iter().all(|&a| a > 0.0 && a < 1.0));

        assert!(make_schedule(1, 1e-4, 0.02).is_err());
        assert!(make_schedule(10, 0.02, 1e-4).is_err());
        assert!(make_schedule(10, 0.0, 0.02).is_err());
        assert!(make_schedule(10, 1e-4, 1.0).is_err());
    }

    #[test]
    fn forward_noise_examples() {
        let s = DiffusionSchedule::standard();
        let x0 = rand_templates(1, 8, 8, 1).remove(0);
        let early = forward_noise(&x0, 0, &s, 3).unwrap();
        assert!(early.sub(&x0).unwrap().norm() / x0.norm() < 0.05);
        assert_eq!(forward_noise(&x0, 500, &s, 9).unwrap(), forward_noise(&x0, 500, &s, 9).unwrap());
        assert!(forward_noise(&x0, 1000, &s, 9).is_err());
    }

    #[test]
    fn forward_noise_monte_carlo_mean() {
        let s = DiffusionSchedule::standard();
        let t = 300;
        let x0 = Image::filled(1, 1, 0.7);
        let n = 10_000;
        let draws: Vec<f64> = (0..n)
            .map(|i| forward_noise(&x0, t, &s, derive_seed(77, i)).unwrap().get(0, 0))
            .collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let se = (1.0 - s.alpha_bar(t)).sqrt() / (n as f64).sqrt();
        assert!((mean - s.alpha_bar(t).sqrt() * 0.7).abs() < 4.0 * se);
    }

    #[test]
    fn score_single_gaussian_is_analytic() {
        let s = DiffusionSchedule::standard();
        let mu = rand_templates(1, 6, 6, 2);
        let prior = GaussianMixturePrior::uniform(mu.clone(), 0.1).unwrap();
        let x = gaussian_image(6, 6, 4);
        for t in [0, 10, 400, 999] {
            let sc = gmm_score(&prior, &x, t, &s).unwrap();
            let ab = s.alpha_bar(t);
            let v = prior.marginal_variance(t, &s);
            for i in 0..x.len() {
                let expect = (ab.sqrt() * mu[0].data()[i] - x.data()[i]) / v;
                assert!((sc.data()[i] - expect).abs() < 1e-12 * (1.0 + expect.abs()));
            }
        }
    }

    #[test]
    fn score_vanishes_at_symmetric_point() {
        let s = DiffusionSchedule::standard();
        let mu = rand_templates(1, 5, 5, 3).remove(0);
        let prior = GaussianMixturePrior::uniform(vec![mu.clone(), mu.scale(-1.0)], 0.05).unwrap();
        let sc = gmm_score(&prior, &Image::zeros(5, 5), 200, &s).unwrap();
        assert!(sc.data().iter().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn score_matches_log_density_differences() {
        let s = DiffusionSchedule::standard();
        let prior = GaussianMixturePrior::new(
            rand_templates(4, 8, 8, 5),
            vec![0.1, 0.2, 0.3, 0.4],
            0.2,
        )
        .unwrap();
        let h = 1e-5;
        for t in [1, 250, 500, 750, 999] {
            let x = forward_noise(&prior.templates()[1], t, &s, 10 + t as u64).unwrap();
            let sc = gmm_score(&prior, &x, t, &s).unwrap();
            for i in (0..64).step_by(7) {
                let mut xp = x.clone();
                xp.data_mut()[i] += h;
                let mut xm = x.clone();
                xm.data_mut()[i] -= h;
                let fd = (prior.log_density(&xp, t, &s).unwrap()
                    - prior.log_density(&xm, t, &s).unwrap())
                    / (2.0 * h);
                let rel = (fd - sc.data()[i]).abs() / sc.data()[i].abs().max(1e-3);
                assert!(rel < 1e-4, "t={t} i={i} fd={fd} an={}", sc.data()[i]);
            }
        }
    }

    #[test]
    fn responsibilities_do_not_overflow_for_large_inputs() {
        let s = DiffusionSchedule::standard();
        let prior = GaussianMixturePrior::uniform(rand_templates(3, 4, 4, 6), 0.05).unwrap();
        let x = Image::filled(4, 4, 1e3);
        for t in [0, 500, 999] {
            let r = prior.responsibilities(&x, t, &s).unwrap();
            assert!(r.iter().all(|v| v.is_finite()));
            assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(gmm_score(&prior, &x, t, &s).unwrap().is_finite());
            assert!(prior.marginal_variance(t, &s) > 0.0);
        }
    }

    #[test]
    fn tweedie_examples() {
        let s = DiffusionSchedule::standard();
        let mu = rand_templates(1, 5, 5, 7).remove(0);
        let sym = GaussianMixturePrior::uniform(vec![mu.clone(), mu.scale(-1.0)], 0.05).unwrap();
        let z = Image::zeros(5, 5);
        let t = 100;
        let x0 = tweedie_denoise(&z, t, &sym, &s).unwrap();
        assert!(x0.data().iter().all(|v| v.abs() < 1e-14));

        // single Gaussian: x̂_0 equals the exact conditional mean
        let sigma_p = 0.3;
        let prior = GaussianMixturePrior::uniform(vec![mu.clone()], sigma_p).unwrap();
        let x = gaussian_image(5, 5, 8);
        for t in [0, 50, 500, 999] {
            let ab = s.alpha_bar(t);
            let v = ab * sigma_p * sigma_p + 1.0 - ab;
            let got = tweedie_denoise(&x, t, &prior, &s).unwrap();
            for i in 0..25 {
                let m = mu.data()[i];
                let expect = m + (ab.sqrt() * sigma_p * sigma_p / v) * (x.data()[i] - ab.sqrt() * m);
                assert!((got.data()[i] - expect).abs() < 1e-10, "t={t}");
            }
        }

        // t = 0 limit stays finite
        let tiny = GaussianMixturePrior::uniform(vec![mu.clone()], 1e-3).unwrap();
        let out = tweedie_denoise(&gaussian_image(5, 5, 9), 0, &tiny, &s).unwrap();
        assert!(out.is_finite());
    }

    #[test]
    fn tweedie_pull_to_prior_monotone_in_sigma() {
        let s = DiffusionSchedule::standard();
        let mu = rand_templates(1, 8, 8, 12).remove(0);
        let xt = forward_noise(&mu, 200, &s, 5).unwrap();
        let errs: Vec<f64> = [0.4, 0.2, 0.1, 0.05, 0.01, 0.001]
            .iter()
            .map(|&sp| {
                let prior = GaussianMixturePrior::uniform(vec![mu.clone()], sp).unwrap();
                tweedie_denoise(&xt, 200, &prior, &s).unwrap().sub(&mu).unwrap().norm()
            })
            .collect();
        for w in errs.windows(2) {
            assert!(w[1] < w[0]);
        }
        assert!(errs.last().unwrap() / mu.norm() < 1e-4);
    }

    #[test]
    fn ancestral_examples() {
        let s = make_schedule(50, 1e-3, 0.2).unwrap();
        let prior = GaussianMixturePrior::uniform(rand_templates(2, 4, 4, 13), 0.1).unwrap();
        let x = gaussian_image(4, 4, 1);
        let a = ancestral_step(&x, 1, &prior, &s, 1).unwrap();
        let b = ancestral_step(&x, 1, &prior, &s, 2).unwrap();
        assert_eq!(a, b);
        assert_eq!(ancestral_step(&x, 7, &prior, &s, 3).unwrap(), ancestral_step(&x, 7, &prior, &s, 3).unwrap());
        assert_ne!(ancestral_step(&x, 7, &prior, &s, 3).unwrap(), ancestral_step(&x, 7, &prior, &s, 4).unwrap());
        assert!(ancestral_step(&x, 0, &prior, &s, 1).is_err());
        assert!(ancestral_step(&x, 50, &prior, &s, 1).is_err());
    }

    #[test]
    fn reverse_run_recovers_gaussian_mean() {
        let s = make_schedule(200, 5e-4, 0.1).unwrap();
        let mu = Image::new(2, 1, vec![0.3, 0.8]).unwrap();
        let sigma_p = 0.2;
        let prior = GaussianMixturePrior::uniform(vec![mu.clone()], sigma_p).unwrap();
        let runs = 200;
        let mut acc = Image::zeros(2, 1);
        for r in 0..runs {
            let base = derive_seed(1234, r);
            let mut x = gaussian_image(2, 1, base);
            for t in (1..200).rev() {
                x = ancestral_step(&x, t, &prior, &s, derive_seed(base, t as u64)).unwrap();
            }
            acc.add_scaled_inplace(1.0 / runs as f64, &x).unwrap();
        }
        // x at level 0 has variance ᾱ_0 σ_p² + (1 − ᾱ_0)
        let se = prior.marginal_variance(0, &s).sqrt() / (runs as f64).sqrt();
        let scale = s.alpha_bar(0).sqrt();
        for i in 0..2 {
            assert!((acc.data()[i] - scale * mu.data()[i]).abs() < 3.0 * se);
        }
    }
}
