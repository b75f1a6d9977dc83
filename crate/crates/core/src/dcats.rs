//! Data-consistency-aware start-time selection.
//!
//! A memory bank stores, for a grid of diffusion times, the average
//! measurement log-likelihood of reference images that were noised to `t`
//! and denoised back in one Tweedie step. At test time the (tempered)
//! log-likelihood of the conditional prediction is matched against the bank
//! and the closest grid time becomes the starting point of the reverse run.

use rayon::prelude::*;

use crate::degradation::{apply_forward, DegradationConfig};
use crate::diffusion::{forward_noise, tweedie_denoise, DiffusionSchedule, ScoreModel};
use crate::error::{invalid, Error, Result};
use crate::fingerprint::hash_lines;
use crate::image::{l2_sq, Image};
use crate::rng::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DcatsParams {
    pub tau: f64,
    pub t_grid_stride: usize,
}

impl Default for DcatsParams {
    fn default() -> Self {
        Self {
            tau: 0.4,
            t_grid_stride: 25,
        }
    }
}

impl DcatsParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(invalid("tau", format!("{} not in (0, 1]", self.tau)));
        }
        if self.t_grid_stride == 0 {
            return Err(invalid("t_grid_stride", "must be positive"));
        }
        Ok(())
    }
}

/// `stride, 2·stride, …` strictly below `steps`.
pub fn time_grid(steps: usize, stride: usize) -> Result<Vec<usize>> {
    if stride == 0 {
        return Err(invalid("t_grid_stride", "must be positive"));
    }
    let grid: Vec<usize> = (1..).map(|j| j * stride).take_while(|t| *t < steps).collect();
    if grid.is_empty() {
        return Err(invalid("t_grid_stride", format!("{stride} leaves no grid point below T={steps}")));
    }
    Ok(grid)
}

/// Fingerprint tying an artifact to a degradation, schedule and prior.
pub fn pipeline_fingerprint<S: ScoreModel + ?Sized>(
    cfg: &DegradationConfig,
    sched: &DiffusionSchedule,
    prior: &S,
) -> String {
    let mut lines = cfg.canonical_lines();
    lines.extend(sched.canonical_lines());
    lines.extend(prior.canonical_lines());
    hash_lines(lines)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    pub t_grid: Vec<usize>,
    /// Mean reference log-likelihood per grid time.
    pub avg_loglik: Vec<f64>,
    /// Standard error of each mean.
    pub se: Vec<f64>,
    pub n_refs: usize,
    pub n_draws: usize,
    pub noise_sigma: f64,
    /// Number of likelihood evaluations spent building the bank.
    pub evaluations: usize,
    pub fingerprint: String,
}

impl MemoryBank {
    pub fn validate(&self) -> Result<()> {
        if self.t_grid.is_empty() {
            return Err(Error::Empty("memory bank"));
        }
        if self.avg_loglik.len() != self.t_grid.len() || self.se.len() != self.t_grid.len() {
            return Err(invalid("memory bank", "column lengths differ"));
        }
        if self.t_grid.windows(2).any(|w| w[0] >= w[1]) || self.t_grid[0] == 0 {
            return Err(invalid("t_grid", "must be strictly increasing and start above 0"));
        }
        if self.n_refs == 0 || self.n_draws == 0 {
            return Err(invalid("memory bank", "needs at least one reference and one draw"));
        }
        if self.avg_loglik.iter().chain(&self.se).any(|v| !v.is_finite()) {
            return Err(invalid("memory bank", "non-finite entry"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.t_grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t_grid.is_empty()
    }

    /// True when each grid value exceeds the next by more than
    /// `n_se` combined standard errors.
    pub fn strictly_decreasing_within(&self, n_se: f64) -> bool {
        (1..self.len()).all(|i| {
            let band = n_se * (self.se[i - 1].powi(2) + self.se[i].powi(2)).sqrt();
            self.avg_loglik[i - 1] - self.avg_loglik[i] > band
        })
    }
}

/// `−‖y − A(x̂_0)‖² / (2σ_n² M)` with the noise-free forward operator.
pub fn measurement_loglik(y: &Image, x0_hat: &Image, cfg: &DegradationConfig) -> Result<f64> {
    if !(cfg.noise_sigma > 0.0) {
        return Err(invalid("noise_sigma", "log-likelihood needs noise_sigma > 0"));
    }
    let b = apply_forward(x0_hat, cfg, None)?;
    let r = l2_sq(y, &b)?;
    Ok(-r / (2.0 * cfg.noise_sigma * cfg.noise_sigma * y.len() as f64))
}

/// Builds the bank over the grid `stride, 2·stride, … < T`.
///
/// Each (reference, draw) pair uses one noise image at every grid time
/// (common random numbers), so differences between grid times are not
/// masked by independent sampling noise. Reference pairs are processed in
/// parallel; per-pair values are reduced sequentially in reference order
/// (draws inner) so the result is independent of thread scheduling.
pub fn build_memory_bank<S: ScoreModel + Sync + ?Sized>(
    refs: &[(Image, Image)],
    prior: &S,
    sched: &DiffusionSchedule,
    cfg: &DegradationConfig,
    params: &DcatsParams,
    n_draws: usize,
    seed: u64,
) -> Result<MemoryBank> {
    params.validate()?;
    if refs.is_empty() {
        return Err(Error::Empty("reference pairs"));
    }
    if n_draws == 0 {
        return Err(invalid("n_draws", "must be positive"));
    }
    if !(cfg.noise_sigma > 0.0) {
        return Err(invalid("noise_sigma", "log-likelihood needs noise_sigma > 0"));
    }
    for (x, y) in refs {
        cfg.validate_for(x.width(), x.height())?;
        let m = cfg.measurement_dims(x.width(), x.height());
        if y.dims() != m {
            return Err(Error::DimensionMismatch {
                expected: m,
                actual: y.dims(),
            });
        }
    }
    let grid = time_grid(sched.steps(), params.t_grid_stride)?;

    let per_ref: Vec<Vec<f64>> = refs
        .par_iter()
        .enumerate()
        .map(|(r, (x, y))| {
            let mut vals = Vec::with_capacity(grid.len() * n_draws);
            for &t in &grid {
                for d in 0..n_draws {
                    let s = derive_seed(derive_seed(seed, r as u64), d as u64);
                    let x_t = forward_noise(x, t, sched, s)?;
                    let x0 = tweedie_denoise(&x_t, t, prior, sched)?;
                    vals.push(measurement_loglik(y, &x0, cfg)?);
                }
            }
            Ok(vals)
        })
        .collect::<Result<_>>()?;

    let n = (refs.len() * n_draws) as f64;
    let mut avg = Vec::with_capacity(grid.len());
    let mut se = Vec::with_capacity(grid.len());
    for g in 0..grid.len() {
        let mut sum = 0.0;
        for vals in &per_ref {
            for d in 0..n_draws {
                sum += vals[g * n_draws + d];
            }
        }
        let mean = sum / n;
        let mut ss = 0.0;
        for vals in &per_ref {
            for d in 0..n_draws {
                ss += (vals[g * n_draws + d] - mean).powi(2);
            }
        }
        let var = if n > 1.0 { ss / (n - 1.0) } else { 0.0 };
        avg.push(mean);
        se.push((var / n).sqrt());
    }

    let bank = MemoryBank {
        evaluations: grid.len() * refs.len() * n_draws,
        t_grid: grid,
        avg_loglik: avg,
        se,
        n_refs: refs.len(),
        n_draws,
        noise_sigma: cfg.noise_sigma,
        fingerprint: pipeline_fingerprint(cfg, sched, prior),
    };
    bank.validate()?;
    Ok(bank)
}

/// `argmin_t |τ·loglik − L̄(t)|`, ties resolved toward the smaller `t`.
pub fn select_time_from_loglik(bank: &MemoryBank, loglik: f64, tau: f64) -> Result<usize> {
    if bank.is_empty() {
        return Err(Error::Empty("memory bank"));
    }
    let target = tau * loglik;
    let mut best = (f64::INFINITY, bank.t_grid[0]);
    for (&t, &l) in bank.t_grid.iter().zip(&bank.avg_loglik) {
        let gap = (target - l).abs();
        if gap < best.0 {
            best = (gap, t);
        }
    }
    Ok(best.1)
}

pub fn select_time(
    bank: &MemoryBank,
    y: &Image,
    x_cond: &Image,
    cfg: &DegradationConfig,
    params: &DcatsParams,
) -> Result<usize> {
    params.validate()?;
    let ll = measurement_loglik(y, x_cond, cfg)?;
    select_time_from_loglik(bank, ll, params.tau)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::GaussianMixturePrior;
    use crate::rng::gaussian_image;

    fn cfg() -> DegradationConfig {
        DegradationConfig::in_distribution()
    }

    fn bank(t: Vec<usize>, l: Vec<f64>) -> MemoryBank {
        MemoryBank {
            se: vec![0.0; t.len()],
            t_grid: t,
            avg_loglik: l,
            n_refs: 1,
            n_draws: 1,
            noise_sigma: 0.02,
            evaluations: 0,
            fingerprint: String::new(),
        }
    }

    #[test]
    fn loglik_examples() {
        let c = cfg();
        let x = gaussian_image(16, 16, 1).map(|v| 0.5 + 0.1 * v);
        let y = apply_forward(&x, &c, None).unwrap();
        assert_eq!(measurement_loglik(&y, &x, &c).unwrap(), 0.0);

        // residual with ‖r‖² = 2σ²M
        let m = y.len() as f64;
        let r = Image::filled(y.width(), y.height(), (2.0 * 0.02f64.powi(2) * m / m).sqrt());
        let shifted = y.add(&r).unwrap();
        assert!((measurement_loglik(&shifted, &x, &c).unwrap() + 1.0).abs() < 1e-12);

        let far = y.add(&r.scale(2.0)).unwrap();
        assert!(measurement_loglik(&far, &x, &c).unwrap() < -1.0);

        let silent = DegradationConfig {
            noise_sigma: 0.0,
            ..c
        };
        assert!(measurement_loglik(&y, &x, &silent).is_err());
    }

    #[test]
    fn grid_layout() {
        assert_eq!(time_grid(1000, 25).unwrap().len(), 39);
        assert_eq!(time_grid(100, 25).unwrap(), vec![25, 50, 75]);
        assert!(time_grid(10, 25).is_err());
        assert!(time_grid(10, 0).is_err());
    }

    #[test]
    fn selection_rules() {
        let b = bank(vec![10, 20, 30, 40], vec![-1.0, -2.0, -4.0, -8.0]);
        // perfect prediction: loglik 0
        assert_eq!(select_time_from_loglik(&b, 0.0, 0.4).unwrap(), 10);
        // exact match τ·ll = L̄(30)
        assert_eq!(select_time_from_loglik(&b, -4.0 / 0.4, 0.4).unwrap(), 30);
        // equidistant between -2 and -4
        assert_eq!(select_time_from_loglik(&b, -3.0, 1.0).unwrap(), 20);
        assert_eq!(select_time_from_loglik(&b, -100.0, 0.4).unwrap(), 40);
        assert!(select_time_from_loglik(&bank(vec![], vec![]), 0.0, 0.4).is_err());
    }

    #[test]
    fn selection_monotone_in_quality() {
        let b = bank((1..=20).map(|i| i * 10).collect(), (1..=20).map(|i| -(i as f64).powf(1.5)).collect());
        let mut last = 0;
        for q in 0..200 {
            let t = select_time_from_loglik(&b, -(q as f64) * 0.5, 0.4).unwrap();
            assert!(t >= last);
            last = t;
        }
    }

    fn degenerate_setup() -> (Vec<(Image, Image)>, GaussianMixturePrior, DegradationConfig) {
        let c = DegradationConfig {
            noise_sigma: 0.01,
            ..DegradationConfig::identity()
        };
        let x = gaussian_image(12, 12, 3).map(|v| 0.5 + 0.1 * v);
        let y = apply_forward(&x, &c, None).unwrap();
        let prior = GaussianMixturePrior::uniform(vec![x.clone()], 1e-6).unwrap();
        (vec![(x, y)], prior, c)
    }

    #[test]
    fn perfect_prior_bank_is_flat_zero() {
        let (refs, prior, c) = degenerate_setup();
        let sched = DiffusionSchedule::standard();
        let b = build_memory_bank(&refs, &prior, &sched, &c, &DcatsParams::default(), 2, 7).unwrap();
        assert_eq!(b.len(), 39);
        assert!(b.avg_loglik.iter().all(|l| l.abs() < 1e-6), "{:?}", b.avg_loglik);
    }

    #[test]
    fn bank_is_deterministic_and_counted() {
        let c = cfg();
        let sched = DiffusionSchedule::linear(100, 1e-3, 0.05).unwrap();
        let tpl: Vec<Image> = (0..3).map(|i| gaussian_image(16, 16, 20 + i).map(|v| 0.5 + 0.1 * v)).collect();
        let prior = GaussianMixturePrior::uniform(tpl, 0.05).unwrap();
        let refs: Vec<(Image, Image)> = (0..3)
            .map(|i| {
                let x = prior.sample(40 + i).0;
                let y = apply_forward(&x, &c, Some(50 + i)).unwrap();
                (x, y)
            })
            .collect();
        let p = DcatsParams {
            tau: 0.4,
            t_grid_stride: 10,
        };
        let a = build_memory_bank(&refs, &prior, &sched, &c, &p, 3, 9).unwrap();
        let b = build_memory_bank(&refs, &prior, &sched, &c, &p, 3, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.evaluations, 9 * 3 * 3);
        let fewer = build_memory_bank(&refs[..1], &prior, &sched, &c, &p, 3, 9).unwrap();
        assert_eq!(fewer.evaluations, 9 * 3);
        assert_ne!(build_memory_bank(&refs, &prior, &sched, &c, &p, 3, 10).unwrap(), a);
        assert!(build_memory_bank(&[], &prior, &sched, &c, &p, 3, 9).is_err());
        assert_eq!(a.fingerprint, pipeline_fingerprint(&c, &sched, &prior));
        assert_ne!(a.fingerprint, pipeline_fingerprint(&DegradationConfig::ood_contrast(), &sched, &prior));
    }
}
