//! Strong Wolfe line search (bracket, then zoom).
//!
//! Accepts a step `α` when
//!
//! ```text
//! φ(α) ≤ φ(0) + c₁ α φ'(0)        (sufficient decrease)
//! |φ'(α)| ≤ c₂ |φ'(0)|            (strong curvature)
//! ```
//!
//! Inside the bracket trial points come from cubic interpolation (quadratic
//! when the derivative at the high end is unknown), safeguarded to the
//! middle 80% of the interval with bisection as the fallback.

use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WolfeParams {
    pub c1: f64,
    pub c2: f64,
    pub alpha_init: f64,
    pub alpha_max: f64,
    pub max_iters: usize,
}

impl Default for WolfeParams {
    fn default() -> Self {
        Self {
            c1: 1e-4,
            c2: 0.9,
            alpha_init: 1.0,
            alpha_max: 100.0,
            max_iters: 25,
        }
    }
}

impl WolfeParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.c1 && self.c1 < self.c2 && self.c2 < 1.0) {
            return Err(invalid("wolfe", "need 0 < c1 < c2 < 1"));
        }
        if !(self.alpha_init > 0.0 && self.alpha_max > 0.0) {
            return Err(invalid("wolfe", "alpha_init and alpha_max must be positive"));
        }
        if self.max_iters == 0 {
            return Err(invalid("wolfe", "max_iters must be positive"));
        }
        Ok(())
    }

    /// Upper bound on φ/φ' evaluations for one search.
    pub fn eval_budget(&self) -> usize {
        2 * self.max_iters + 2
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineSearchResult {
    pub alpha: f64,
    pub phi_alpha: f64,
    /// Calls made to `phi` and `dphi` combined.
    pub evals: usize,
    pub armijo: bool,
    pub curvature: bool,
}

struct Search<P, D> {
    phi: P,
    dphi: D,
    params: WolfeParams,
    phi0: f64,
    dphi0: f64,
    evals: usize,
    iters: usize,
    best: Option<(f64, f64)>,
}

impl<P: FnMut(f64) -> f64, D: FnMut(f64) -> f64> Search<P, D> {
    fn eval_phi(&mut self, a: f64) -> f64 {
        self.evals += 1;
        (self.phi)(a)
    }

    fn eval_dphi(&mut self, a: f64) -> f64 {
        self.evals += 1;
        (self.dphi)(a)
    }

    fn armijo(&self, a: f64, pa: f64) -> bool {
        pa.is_finite() && pa <= self.phi0 + self.params.c1 * a * self.dphi0
    }

    fn curvature(&self, da: f64) -> bool {
        da.is_finite() && da.abs() <= -self.params.c2 * self.dphi0
    }

    fn note_armijo(&mut self, a: f64, pa: f64) {
        if a > 0.0 && self.best.is_none_or(|(_, pb)| pa < pb) {
            self.best = Some((a, pa));
        }
    }

    fn done(&self, alpha: f64, phi_alpha: f64) -> LineSearchResult {
        LineSearchResult {
            alpha,
            phi_alpha,
            evals: self.evals,
            armijo: true,
            curvature: true,
        }
    }

    fn fallback(&self) -> LineSearchResult {
        match self.best {
            Some((alpha, phi_alpha)) => LineSearchResult {
                alpha,
                phi_alpha,
                evals: self.evals,
                armijo: true,
                curvature: false,
            },
            None => LineSearchResult {
                alpha: 0.0,
                phi_alpha: self.phi0,
                evals: self.evals,
                armijo: false,
                curvature: false,
            },
        }
    }

    fn bracket(&mut self) -> LineSearchResult {
        let p = self.params;
        let (mut a_prev, mut phi_prev, mut dphi_prev) = (0.0, self.phi0, self.dphi0);
        let mut a = p.alpha_init.min(p.alpha_max);
        while self.iters < p.max_iters {
            self.iters += 1;
            let pa = self.eval_phi(a);
            if !self.armijo(a, pa) || (self.iters > 1 && pa >= phi_prev) {
                return self.zoom(a_prev, phi_prev, dphi_prev, a, pa, None);
            }
            self.note_armijo(a, pa);
            let da = self.eval_dphi(a);
            if self.curvature(da) {
                return self.done(a, pa);
            }
            if da >= 0.0 {
                return self.zoom(a, pa, da, a_prev, phi_prev, Some(dphi_prev));
            }
            if a >= p.alpha_max {
                return LineSearchResult {
                    alpha: a,
                    phi_alpha: pa,
                    evals: self.evals,
                    armijo: true,
                    curvature: false,
                };
            }
            a_prev = a;
            phi_prev = pa;
            dphi_prev = da;
            a = (2.0 * a).min(p.alpha_max);
        }
        self.fallback()
    }

    /// `lo` always satisfies sufficient decrease and has the lowest φ seen
    /// in the bracket; the minimizer lies between `lo` and `hi`.
    fn zoom(
        &mut self,
        mut lo: f64,
        mut phi_lo: f64,
        mut dphi_lo: f64,
        mut hi: f64,
        mut phi_hi: f64,
        mut dphi_hi: Option<f64>,
    ) -> LineSearchResult {
        while self.iters < self.params.max_iters {
            self.iters += 1;
            let trial = interpolate(lo, phi_lo, dphi_lo, hi, phi_hi, dphi_hi);
            let pt = self.eval_phi(trial);
            if !self.armijo(trial, pt) || pt >= phi_lo {
                hi = trial;
                phi_hi = pt;
                dphi_hi = None;
            } else {
                self.note_armijo(trial, pt);
                let dt = self.eval_dphi(trial);
                if self.curvature(dt) {
                    return self.done(trial, pt);
                }
                if dt * (hi - lo) >= 0.0 {
                    hi = lo;
                    phi_hi = phi_lo;
                    dphi_hi = Some(dphi_lo);
                }
                lo = trial;
                phi_lo = pt;
                dphi_lo = dt;
            }
            if (hi - lo).abs() <= 1e-14 * lo.abs().max(1.0) {
                break;
            }
        }
        self.fallback()
    }
}

fn interpolate(lo: f64, f_lo: f64, g_lo: f64, hi: f64, f_hi: f64, g_hi: Option<f64>) -> f64 {
    let (a, b) = if lo < hi { (lo, hi) } else { (hi, lo) };
    let width = b - a;
    let (min_ok, max_ok) = (a + 0.1 * width, b - 0.1 * width);
    let candidate = match g_hi {
        Some(g_hi) => cubic_min(lo, f_lo, g_lo, hi, f_hi, g_hi),
        None => quadratic_min(lo, f_lo, g_lo, hi, f_hi),
    };
    match candidate {
        Some(c) if c.is_finite() && c >= min_ok && c <= max_ok => c,
        _ => 0.5 * (lo + hi),
    }
}

/// Minimizer of the cubic matching values and slopes at both ends.
fn cubic_min(x1: f64, f1: f64, g1: f64, x2: f64, f2: f64, g2: f64) -> Option<f64> {
    let d1 = g1 + g2 - 3.0 * (f1 - f2) / (x1 - x2);
    let disc = d1 * d1 - g1 * g2;
    if disc < 0.0 {
        return None;
    }
    let d2 = (x2 - x1).signum() * disc.sqrt();
    let denom = g2 - g1 + 2.0 * d2;
    if denom == 0.0 {
        return None;
    }
    Some(x2 - (x2 - x1) * (g2 + d2 - d1) / denom)
}

/// Minimizer of the quadratic through `(x1, f1)` with slope `g1` and `(x2, f2)`.
fn quadratic_min(x1: f64, f1: f64, g1: f64, x2: f64, f2: f64) -> Option<f64> {
    let dx = x2 - x1;
    let c = (f2 - f1 - g1 * dx) / (dx * dx);
    if !(c > 0.0) {
        return None;
    }
    Some(x1 - g1 / (2.0 * c))
}

/// Strong Wolfe search along a ray. `dphi(0)` is evaluated first and must be
/// negative; nothing else is evaluated otherwise.
///
/// If the iteration budget runs out, the best sufficient-decrease step seen
/// is returned with `curvature = false`; if none was found, `alpha = 0` with
/// both flags false.
pub fn strong_wolfe(
    phi: impl FnMut(f64) -> f64,
    dphi: impl FnMut(f64) -> f64,
    params: WolfeParams,
) -> Result<LineSearchResult> {
    params.validate()?;
    let mut s = Search {
        phi,
        dphi,
        params,
        phi0: 0.0,
        dphi0: 0.0,
        evals: 0,
        iters: 0,
        best: None,
    };
    let dphi0 = s.eval_dphi(0.0);
    if !(dphi0 < 0.0) {
        return Err(Error::NotDescentDirection(dphi0));
    }
    s.dphi0 = dphi0;
    s.phi0 = s.eval_phi(0.0);
    Ok(s.bracket())
}

/// Central difference of `phi` at `alpha` with step `1e-4·(1 + α)`.
pub fn central_difference(mut phi: impl FnMut(f64) -> f64, alpha: f64) -> f64 {
    let h = 1e-4 * (1.0 + alpha.abs());
    (phi(alpha + h) - phi(alpha - h)) / (2.0 * h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::cell::Cell;

    fn holds(params: &WolfeParams, phi: impl Fn(f64) -> f64, dphi: impl Fn(f64) -> f64, a: f64) -> (bool, bool) {
        let armijo = phi(a) <= phi(0.0) + params.c1 * a * dphi(0.0);
        let curv = dphi(a).abs() <= params.c2 * dphi(0.0).abs();
        (armijo, curv)
    }

    #[test]
    fn quadratic() {
        let p = WolfeParams::default();
        let phi = |a: f64| (a - 1.0).powi(2);
        let dphi = |a: f64| 2.0 * (a - 1.0);
        let r = strong_wolfe(phi, dphi, p).unwrap();
        assert!(r.armijo && r.curvature);
        assert!(phi(r.alpha) <= 1.0 - 2e-4 * r.alpha);
        assert!((2.0 * (r.alpha - 1.0)).abs() <= 1.8);
        assert!((0.1..=1.9).contains(&r.alpha));
    }

    #[test]
    fn constant_slope_runs_to_alpha_max() {
        let p = WolfeParams::default();
        let r = strong_wolfe(|a| -a, |_| -1.0, p).unwrap();
        assert!(r.armijo);
        assert!(!r.curvature);
        assert_eq!(r.alpha, p.alpha_max);
        assert!(r.evals <= p.eval_budget());
    }

    #[test]
    fn ascent_direction_is_rejected_before_evaluating_phi() {
        let calls = Cell::new(0);
        let err = strong_wolfe(
            |a| {
                calls.set(calls.get() + 1);
                a
            },
            |_| 1.0,
            WolfeParams::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::NotDescentDirection(_)));
        assert_eq!(calls.get(), 0);
    }

    #[test]
    fn unimodal_against_grid() {
        let phi = |a: f64| -a / (a * a + 2.0);
        let dphi = |a: f64| -(2.0 - a * a) / (a * a + 2.0).powi(2);
        for c2 in [0.9, 0.5, 0.1, 0.01] {
            let p = WolfeParams {
                c2,
                ..Default::default()
            };
            let r = strong_wolfe(phi, dphi, p).unwrap();
            assert!(r.armijo && r.curvature, "c2={c2}");
            assert_eq!(holds(&p, phi, dphi, r.alpha), (true, true));
            let grid_step = 10.0 / 10_000.0;
            let near_admissible = (0..=10_000).map(|i| i as f64 * grid_step).any(|a| {
                holds(&p, phi, dphi, a) == (true, true) && (a - r.alpha).abs() <= grid_step
            });
            assert!(near_admissible, "c2={c2} alpha={}", r.alpha);
        }
    }

    #[test]
    fn budget_exhaustion_returns_best_armijo() {
        // curvature can only be met very close to the minimizer at 3.7
        let phi = |a: f64| (a - 3.7).powi(2);
        let dphi = |a: f64| 2.0 * (a - 3.7);
        let p = WolfeParams {
            c2: 1e-9 + 1e-4,
            max_iters: 3,
            ..Default::default()
        };
        let r = strong_wolfe(phi, dphi, p).unwrap();
        assert!(r.evals <= p.eval_budget());
        if !r.curvature {
            assert!(r.armijo);
            assert!(phi(r.alpha) < phi(0.0));
        }
    }

    #[test]
    fn no_decrease_point_gives_zero_step() {
        // φ jumps up immediately after 0 despite a negative slope at 0
        let p = WolfeParams {
            max_iters: 4,
            ..Default::default()
        };
        let r = strong_wolfe(|a| if a == 0.0 { 0.0 } else { 1.0 }, |_| -1.0, p).unwrap();
        assert_eq!(r.alpha, 0.0);
        assert!(!r.armijo && !r.curvature);
        assert_eq!(r.phi_alpha, 0.0);
    }

    #[test]
    fn central_difference_on_cubic() {
        let d = central_difference(|a| a * a * a, 2.0);
        assert!((d - 12.0).abs() < 1e-6);
    }

    proptest! {
        #[test]
        fn random_quartics_give_certified_steps(
            a in 0.05f64..5.0, b in -2.0f64..2.0, c in 0.01f64..3.0, m in 0.1f64..20.0,
        ) {
            // φ(α) = c(α − m)² + a(α − m)⁴ + b, minimized at α = m > 0
            let phi = move |x: f64| c * (x - m).powi(2) + a * (x - m).powi(4) + b;
            let dphi = move |x: f64| 2.0 * c * (x - m) + 4.0 * a * (x - m).powi(3);
            let p = WolfeParams::default();
            let r = strong_wolfe(phi, dphi, p).unwrap();
            prop_assert!(r.evals <= p.eval_budget());
            prop_assert!(r.armijo);
            prop_assert!(r.alpha > 0.0);
            prop_assert!(phi(r.alpha) < phi(0.0));
            prop_assert!(phi(r.alpha) <= phi(0.0) + p.c1 * r.alpha * dphi(0.0));
            if r.curvature {
                prop_assert!(dphi(r.alpha).abs() <= p.c2 * dphi(0.0).abs());
            }
        }
    }
}
