//! Two-phase reconstruction: conditional prediction, start-time selection,
//! then a short reverse diffusion with line-searched consistency updates.
//! A fixed-step, pure-noise-initialized baseline is provided for comparison.

use std::time::Instant;

use crate::conditional::ConditionalModel;
use crate::consistency::{dc_gradient_x0, dc_gradient_with_x0, dc_loss, ConsistencyWeights};
use crate::dcats::{measurement_loglik, pipeline_fingerprint, select_time, DcatsParams, MemoryBank};
use crate::degradation::DegradationConfig;
use crate::diffusion::{
    ancestral_from_score, ancestral_step, forward_noise, tweedie_denoise, tweedie_from_score,
    DiffusionSchedule, ScoreModel,
};
use crate::error::{invalid, Error, Result};
use crate::image::{clamp, dot, Image};
use crate::linesearch::{central_difference, strong_wolfe, WolfeParams};
use crate::rng::{derive_seed, gaussian_image};

const INIT_TAG: u64 = 0x1_0000_0000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Dynamic,
    Vanilla,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Dynamic => "dynamic",
            Mode::Vanilla => "vanilla",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dynamic" => Ok(Mode::Dynamic),
            "vanilla" => Ok(Mode::Vanilla),
            _ => Err(invalid("mode", format!("unknown mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveParams {
    pub mode: Mode,
    /// Fixed step of the vanilla baseline.
    pub rho: f64,
    pub wolfe: WolfeParams,
    pub dcats: DcatsParams,
    pub weights: ConsistencyWeights,
    pub seed: u64,
    pub t_start_override: Option<usize>,
}

impl Default for SolveParams {
    fn default() -> Self {
        Self {
            mode: Mode::Dynamic,
            rho: 1.0,
            wolfe: WolfeParams::default(),
            dcats: DcatsParams::default(),
            weights: ConsistencyWeights::default(),
            seed: 0,
            t_start_override: None,
        }
    }
}

impl SolveParams {
    pub fn validate(&self, sched: &DiffusionSchedule) -> Result<()> {
        if !(self.rho >= 0.0) || !self.rho.is_finite() {
            return Err(invalid("rho", "must be a finite non-negative number"));
        }
        self.wolfe.validate()?;
        self.dcats.validate()?;
        self.weights.validate()?;
        if let Some(t) = self.t_start_override {
            if t == 0 || t >= sched.steps() {
                return Err(Error::TimeOutOfRange {
                    t,
                    lo: 1,
                    hi: sched.steps(),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub x: Image,
    pub alpha: f64,
    /// Loss at the ancestral point, before the consistency update.
    pub ldc_pre: f64,
    /// Loss after the update (equal to `ldc_pre` when skipped).
    pub ldc: f64,
    pub armijo: bool,
    pub curvature: bool,
    /// `φ′(0)` used by the line search; 0 when skipped.
    pub slope0: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    pub output: Image,
    pub x_cond: Image,
    pub cond_loglik: Option<f64>,
    pub t_start: usize,
    pub steps_taken: usize,
    pub alpha_trace: Vec<f64>,
    pub ldc_trace: Vec<f64>,
    pub ldc_pre_trace: Vec<f64>,
    pub armijo_trace: Vec<bool>,
    pub wall_time: f64,
}

/// One baseline step: ancestral transition, then `−ρ ∇_{x_t}‖y − A(x̂_0)‖²`
/// evaluated at `(x_t, t)` with the frozen Jacobian.
#[allow(clippy::too_many_arguments)]
pub fn dps_step_vanilla<S: ScoreModel + ?Sized>(
    x_t: &Image,
    t: usize,
    y: &Image,
    prior: &S,
    sched: &DiffusionSchedule,
    cfg: &DegradationConfig,
    rho: f64,
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
    let mut next = ancestral_from_score(x_t, &s, t, sched, seed)?;
    if rho != 0.0 {
        let x0 = tweedie_from_score(x_t, &s, t, sched)?;
        let g = dc_gradient_x0(y, &x0, cfg, &ConsistencyWeights::l2_only())?;
        next.add_scaled_inplace(-rho / sched.alpha_bar(t).sqrt(), &g)?;
    }
    Ok(next)
}

/// One refinement step: ancestral transition to `x′`, then a strong-Wolfe
/// step along `−∇ L_DC(x̂_0(x′))` at level `t − 1`.
///
/// `φ(α) = L_DC(y, x̂_0(x′ + α p))`. The slope at zero is the analytic
/// `⟨g, p⟩ = −‖g‖²`; slopes at trial points are central differences along the
/// exact denoising path. If the search finds no acceptable step the update
/// is skipped.
#[allow(clippy::too_many_arguments)]
pub fn dynamic_step<S: ScoreModel + ?Sized>(
    x_t: &Image,
    t: usize,
    y: &Image,
    prior: &S,
    sched: &DiffusionSchedule,
    cfg: &DegradationConfig,
    w: &ConsistencyWeights,
    wolfe: &WolfeParams,
    seed: u64,
) -> Result<StepOutcome> {
    let xp = ancestral_step(x_t, t, prior, sched, seed)?;
    let level = t - 1;
    let (g, x0) = dc_gradient_with_x0(y, &xp, level, prior, sched, cfg, w)?;
    let ldc_pre = dc_loss(y, &x0, cfg, w)?;
    let skipped = |x: Image| StepOutcome {
        x,
        alpha: 0.0,
        ldc_pre,
        ldc: ldc_pre,
        armijo: false,
        curvature: false,
        slope0: 0.0,
    };
    if g.norm() == 0.0 {
        return Ok(skipped(xp));
    }
    let p = g.scale(-1.0);

    let mut failure: Option<Error> = None;
    let mut phi = |a: f64| -> f64 {
        if a == 0.0 {
            return ldc_pre;
        }
        let eval = xp
            .axpy(a, &p)
            .and_then(|x| tweedie_denoise(&x, level, prior, sched))
            .and_then(|x0| dc_loss(y, &x0, cfg, w));
        match eval {
            Ok(v) if v.is_finite() => v,
            Ok(_) => f64::INFINITY,
            Err(e) => {
                failure.get_or_insert(e);
                f64::NAN
            }
        }
    };
    let slope0 = -dot(&g, &g)?;
    let result = {
        let phi_cell = std::cell::RefCell::new(&mut phi);
        strong_wolfe(
            |a| (phi_cell.borrow_mut())(a),
            |a| {
                if a == 0.0 {
                    slope0
                } else {
                    central_difference(|b| (phi_cell.borrow_mut())(b), a)
                }
            },
            *wolfe,
        )
    };
    if let Some(e) = failure {
        return Err(e);
    }
    match result {
        Ok(r) if r.alpha > 0.0 => Ok(StepOutcome {
            x: xp.axpy(r.alpha, &p)?,
            alpha: r.alpha,
            ldc_pre,
            ldc: r.phi_alpha,
            armijo: r.armijo,
            curvature: r.curvature,
            slope0,
        }),
        Ok(_) | Err(Error::NotDescentDirection(_)) => Ok(StepOutcome {
            slope0: slope0.min(0.0),
            ..skipped(xp)
        }),
        Err(e) => Err(e),
    }
}

/// Runs the full pipeline on one measurement.
///
/// The bank is required in dynamic mode unless `t_start_override` is set;
/// when present its fingerprint must match `(cfg, sched, prior)`.
#[allow(clippy::too_many_arguments)]
pub fn solve<S: ScoreModel + ?Sized>(
    y: &Image,
    conditional: &dyn ConditionalModel,
    prior: &S,
    sched: &DiffusionSchedule,
    cfg: &DegradationConfig,
    bank: Option<&MemoryBank>,
    params: &SolveParams,
) -> Result<SolveReport> {
    let start = Instant::now();
    params.validate(sched)?;
    if let Some(b) = bank {
        b.validate()?;
        let expected = pipeline_fingerprint(cfg, sched, prior);
        if b.fingerprint != expected {
            return Err(Error::FingerprintMismatch {
                expected,
                found: b.fingerprint.clone(),
            });
        }
    }
    let x_cond = conditional.predict(y)?;
    let cond_loglik = if cfg.noise_sigma > 0.0 {
        Some(measurement_loglik(y, &x_cond, cfg)?)
    } else {
        None
    };

    let (t_start, mut x) = match params.mode {
        Mode::Dynamic => {
            let t = match (params.t_start_override, bank) {
                (Some(t), _) => t,
                (None, Some(b)) => select_time(b, y, &x_cond, cfg, &params.dcats)?,
                (None, None) => return Err(Error::Empty("memory bank")),
            };
            let x_t = forward_noise(&x_cond, t, sched, derive_seed(params.seed, INIT_TAG))?;
            (t, x_t)
        }
        Mode::Vanilla => {
            let t = params.t_start_override.unwrap_or(sched.steps() - 1);
            let (w, h) = x_cond.dims();
            (t, gaussian_image(w, h, derive_seed(params.seed, INIT_TAG)))
        }
    };

    let mut alpha_trace = Vec::with_capacity(t_start);
    let mut ldc_trace = Vec::with_capacity(t_start);
    let mut ldc_pre_trace = Vec::with_capacity(t_start);
    let mut armijo_trace = Vec::with_capacity(t_start);
    for t in (1..=t_start).rev() {
        let seed = derive_seed(params.seed, t as u64);
        match params.mode {
            Mode::Dynamic => {
                let step = dynamic_step(&x, t, y, prior, sched, cfg, &params.weights, &params.wolfe, seed)?;
                alpha_trace.push(step.alpha);
                ldc_trace.push(step.ldc);
                ldc_pre_trace.push(step.ldc_pre);
                armijo_trace.push(step.armijo);
                x = step.x;
            }
            Mode::Vanilla => {
                x = dps_step_vanilla(&x, t, y, prior, sched, cfg, params.rho, seed)?;
                let x0 = tweedie_denoise(&x, t - 1, prior, sched)?;
                let l = dc_loss(y, &x0, cfg, &ConsistencyWeights::l2_only())?;
                alpha_trace.push(params.rho);
                ldc_trace.push(l);
                ldc_pre_trace.push(l);
                armijo_trace.push(false);
            }
        }
    }
    let x0 = tweedie_denoise(&x, 0, prior, sched)?;
    let output = clamp(&x0, 0.0, 1.0)?;
    Ok(SolveReport {
        output,
        x_cond,
        cond_loglik,
        t_start,
        steps_taken: alpha_trace.len(),
        alpha_trace,
        ldc_trace,
        ldc_pre_trace,
        armijo_trace,
        wall_time: start.elapsed().as_secs_f64(),
    })
}
