//! Method of moving asymptotes for one inequality constraint `g(x) <= 0`.
//!
//! Each update builds the separable convex approximation around the current
//! iterate and solves it through its one-dimensional dual, which is concave
//! and monotone in the multiplier, so bisection suffices.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MmaSettings {
    /// Initial asymptote distance as a fraction of the variable range.
    pub asy_init: f64,
    pub asy_incr: f64,
    pub asy_decr: f64,
    /// Largest step as a fraction of the variable range.
    pub move_limit: f64,
}

impl Default for MmaSettings {
    fn default() -> Self {
        Self {
            asy_init: 0.5,
            asy_incr: 1.2,
            asy_decr: 0.7,
            move_limit: 0.15,
        }
    }
}

impl MmaSettings {
    pub fn validate(&self) -> Result<()> {
        let ok = self.asy_init > 0.0
            && self.asy_init <= 1.0
            && self.asy_incr >= 1.0
            && self.asy_decr > 0.0
            && self.asy_decr <= 1.0
            && self.move_limit > 0.0
            && self.move_limit <= 1.0;
        if !ok {
            return Err(Error::Config(
                "mma needs 0 < asy_init <= 1, asy_incr >= 1, 0 < asy_decr <= 1, 0 < move_limit <= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Asymptotes and iterate history.
#[derive(Debug, Clone, PartialEq)]
pub struct MmaState {
    pub settings: MmaSettings,
    pub low: Vec<f64>,
    pub upp: Vec<f64>,
    pub xold1: Vec<f64>,
    pub xold2: Vec<f64>,
    pub iteration: usize,
}

impl MmaState {
    pub fn new(n: usize, settings: MmaSettings) -> Self {
        Self {
            settings,
            low: vec![0.0; n],
            upp: vec![1.0; n],
            xold1: vec![0.0; n],
            xold2: vec![0.0; n],
            iteration: 0,
        }
    }
}

/// Result of one update.
#[derive(Debug, Clone, PartialEq)]
pub struct MmaStep {
    pub x: Vec<f64>,
    /// Multiplier of the constraint in the subproblem.
    pub lambda: f64,
    /// The approximated constraint could not be satisfied inside the move
    /// limits; the returned point is the best effort.
    pub infeasible: bool,
}

const RAA0: f64 = 1e-5;

/// One MMA update of `x` within `[xmin, xmax]`.
#[allow(clippy::too_many_arguments)]
pub fn mma_update(
    x: &[f64],
    df: &[f64],
    g: f64,
    dg: &[f64],
    state: &mut MmaState,
    xmin: &[f64],
    xmax: &[f64],
) -> Result<MmaStep> {
    let n = x.len();
    for len in [df.len(), dg.len(), xmin.len(), xmax.len(), state.low.len()] {
        if len != n {
            return Err(Error::SizeMismatch {
                expected: n,
                got: len,
            });
        }
    }
    if !g.is_finite() || df.iter().chain(dg).any(|v| !v.is_finite()) {
        return Err(Error::OutOfRange(
            "mma: non-finite objective or constraint data".into(),
        ));
    }
    for j in 0..n {
        if !(xmax[j] > xmin[j]) || x[j] < xmin[j] || x[j] > xmax[j] {
            return Err(Error::OutOfRange(format!(
                "mma: variable {j} outside its bounds"
            )));
        }
    }
    let s = state.settings;
    state.iteration += 1;

    // Asymptotes.
    for j in 0..n {
        let range = xmax[j] - xmin[j];
        if state.iteration <= 2 {
            state.low[j] = x[j] - s.asy_init * range;
            state.upp[j] = x[j] + s.asy_init * range;
        } else {
            let trend = (x[j] - state.xold1[j]) * (state.xold1[j] - state.xold2[j]);
            let f = if trend < 0.0 {
                s.asy_decr
            } else if trend > 0.0 {
                s.asy_incr
            } else {
                1.0
            };
            let lo = x[j] - f * (state.xold1[j] - state.low[j]);
            let up = x[j] + f * (state.upp[j] - state.xold1[j]);
            state.low[j] = lo.clamp(x[j] - 10.0 * range, x[j] - 0.01 * range);
            state.upp[j] = up.clamp(x[j] + 0.01 * range, x[j] + 10.0 * range);
        }
    }

    // Subproblem data.
    let mut lo_b = vec![0.0; n];
    let mut up_b = vec![0.0; n];
    let mut p0 = vec![0.0; n];
    let mut q0 = vec![0.0; n];
    let mut p1 = vec![0.0; n];
    let mut q1 = vec![0.0; n];
    let mut r = g;
    for j in 0..n {
        let (l, u) = (state.low[j], state.upp[j]);
        let range = xmax[j] - xmin[j];
        lo_b[j] = xmin[j]
            .max(l + 0.1 * (x[j] - l))
            .max(x[j] - s.move_limit * range);
        up_b[j] = xmax[j]
            .min(u - 0.1 * (u - x[j]))
            .min(x[j] + s.move_limit * range);
        let (ux, xl) = ((u - x[j]).powi(2), (x[j] - l).powi(2));
        let reg = RAA0 / range;
        p0[j] = ux * (1.001 * df[j].max(0.0) + 0.001 * (-df[j]).max(0.0) + reg);
        q0[j] = xl * (0.001 * df[j].max(0.0) + 1.001 * (-df[j]).max(0.0) + reg);
        p1[j] = ux * (1.001 * dg[j].max(0.0) + 0.001 * (-dg[j]).max(0.0) + reg);
        q1[j] = xl * (0.001 * dg[j].max(0.0) + 1.001 * (-dg[j]).max(0.0) + reg);
        r -= p1[j] / (u - x[j]) + q1[j] / (x[j] - l);
    }

    let primal = |lam: f64| -> Vec<f64> {
        (0..n)
            .map(|j| {
                let sp = (p0[j] + lam * p1[j]).sqrt();
                let sq = (q0[j] + lam * q1[j]).sqrt();
                let xj = (sp * state.low[j] + sq * state.upp[j]) / (sp + sq);
                xj.clamp(lo_b[j], up_b[j])
            })
            .collect()
    };
    let constraint = |y: &[f64]| -> f64 {
        r + (0..n)
            .map(|j| p1[j] / (state.upp[j] - y[j]) + q1[j] / (y[j] - state.low[j]))
            .sum::<f64>()
    };

    let mut y = primal(0.0);
    let mut lambda = 0.0;
    let mut infeasible = false;
    if constraint(&y) > 0.0 {
        let mut hi = 1.0;
        let mut yh = primal(hi);
        while constraint(&yh) > 0.0 && hi < 1e15 {
            hi *= 10.0;
            yh = primal(hi);
        }
        if constraint(&yh) > 0.0 {
            log::warn!("mma: subproblem infeasible within the move limits");
            infeasible = true;
            y = yh;
            lambda = hi;
        } else {
            let mut lo = 0.0;
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if constraint(&primal(mid)) > 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
                if hi - lo <= 1e-14 * hi {
                    break;
                }
            }
            lambda = hi;
            y = primal(hi);
        }
    }
    for j in 0..n {
        y[j] = y[j].clamp(xmin[j], xmax[j]);
    }
    state.xold2 = std::mem::replace(&mut state.xold1, x.to_vec());
    Ok(MmaStep {
        x: y,
        lambda,
        infeasible,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn quadratic(x: &[f64]) -> (Vec<f64>, f64, Vec<f64>) {
        let n = x.len() as f64;
        let df = x.iter().map(|v| 2.0 * (v - 0.3)).collect();
        let g = n / 2.0 - x.iter().sum::<f64>();
        (df, g, vec![-1.0; x.len()])
    }

    fn solve(mut x: Vec<f64>, iters: usize) -> (Vec<f64>, f64) {
        let n = x.len();
        let mut st = MmaState::new(n, MmaSettings::default());
        let (lo, hi) = (vec![0.0; n], vec![1.0; n]);
        let mut lam = 0.0;
        for _ in 0..iters {
            let (df, g, dg) = quadratic(&x);
            let step = mma_update(&x, &df, g, &dg, &mut st, &lo, &hi).unwrap();
            x = step.x;
            lam = step.lambda;
        }
        (x, lam)
    }

    #[test]
    fn constrained_quadratic_reaches_kkt_point() {
        // KKT: 2 (x - 0.3) = lambda, sum x = 4 with n = 8 -> x = 0.5, lambda = 0.4.
        for start in [
            vec![0.5; 8],
            vec![0.9; 8],
            vec![0.05, 0.9, 0.2, 0.7, 0.4, 0.1, 1.0, 0.0],
        ] {
            let (x, lam) = solve(start, 50);
            for v in &x {
                assert!((v - 0.5).abs() < 1e-4, "{x:?}");
            }
            assert!((lam - 0.4).abs() < 1e-3, "{lam}");
        }
    }

    #[test]
    fn zero_gradient_keeps_the_iterate() {
        let x = vec![0.2, 0.5, 0.9];
        let mut st = MmaState::new(3, MmaSettings::default());
        for _ in 0..4 {
            let step = mma_update(
                &x, &[0.0; 3], -1.0, &[0.0; 3], &mut st, &[0.0; 3], &[1.0; 3],
            )
            .unwrap();
            for (a, b) in step.x.iter().zip(&x) {
                assert!((a - b).abs() < 1e-14);
            }
            assert_eq!(step.lambda, 0.0);
        }
    }

    #[test]
    fn steps_respect_bounds_and_move_limit() {
        let x = vec![0.05, 0.95, 0.5];
        let mut st = MmaState::new(3, MmaSettings::default());
        let step = mma_update(
            &x,
            &[1e3, -1e3, 1e3],
            -1.0,
            &[0.0; 3],
            &mut st,
            &[0.0; 3],
            &[1.0; 3],
        )
        .unwrap();
        assert_eq!(step.x[0], 0.0);
        assert_eq!(step.x[1], 1.0);
        assert!((step.x[2] - 0.35).abs() < 1e-12);
    }

    #[test]
    fn infeasible_subproblem_is_reported() {
        let x = vec![0.5; 2];
        let mut st = MmaState::new(2, MmaSettings::default());
        // Needs sum x >= 10 with x <= 1.
        let step = mma_update(
            &x, &[0.0; 2], 9.0, &[-1.0; 2], &mut st, &[0.0; 2], &[1.0; 2],
        )
        .unwrap();
        assert!(step.infeasible);
        assert!(step.x.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    proptest! {
        #[test]
        fn iterates_stay_in_bounds(
            x in proptest::collection::vec(0.0f64..=1.0, 5),
            df in proptest::collection::vec(-100.0f64..100.0, 5),
            dg in proptest::collection::vec(-10.0f64..10.0, 5),
            g in -5.0f64..5.0,
        ) {
            let mut st = MmaState::new(5, MmaSettings::default());
            let step = mma_update(&x, &df, g, &dg, &mut st, &[0.0; 5], &[1.0; 5]).unwrap();
            for (a, b) in step.x.iter().zip(&x) {
                prop_assert!((0.0..=1.0).contains(a));
                prop_assert!((a - b).abs() <= 0.15 + 1e-12);
            }
        }
    }
}
