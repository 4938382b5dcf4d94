//! Design loop: evaluate, differentiate, MMA update, with continuation of
//! the interpolation parameters.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::OptimizationConfig;
use crate::error::{Error, Result};
use crate::flow::FlowSolveSettings;
use crate::metrics::mnd;
use crate::mma::{mma_update, MmaState};
use crate::model::{write_design_csv, DesignField};
use crate::sensitivity::{volume_constraint, write_gradient_csv, Evaluation, Pipeline};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerSettings {
    /// Design iterations.
    pub iterations: usize,
    /// Write the design every this many iterations (0 = never).
    pub checkpoint_every: usize,
    /// Record wall time in the history; off keeps histories reproducible.
    pub record_timing: bool,
    /// Write per-iteration gradient CSVs.
    pub gradient_dump: bool,
    /// Factor applied to the projection steepness at each stage switch
    /// (1 keeps it fixed).
    pub beta_growth: f64,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        Self {
            iterations: 200,
            checkpoint_every: 0,
            record_timing: false,
            gradient_dump: false,
            beta_growth: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistoryRow {
    pub iter: usize,
    /// Objective, K.
    pub k: f64,
    /// Volume constraint, m^2.
    pub g: f64,
    /// Non-discreteness of `gamma1`, percent.
    pub mnd: f64,
    pub q_k: f64,
    pub q_f: f64,
    pub seconds: f64,
}

/// Per-iteration history of a run.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunRecord {
    pub rows: Vec<HistoryRow>,
}

impl RunRecord {
    /// Write `iter,K,g,Mnd,qk,qf,seconds`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::parse(path, e.to_string()))?;
        w.write_record(["iter", "K", "g", "Mnd", "qk", "qf", "seconds"])
            .map_err(|e| Error::parse(path, e.to_string()))?;
        for r in &self.rows {
            w.serialize((r.iter, r.k, r.g, r.mnd, r.q_k, r.q_f, r.seconds))
                .map_err(|e| Error::parse(path, e.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Fraction of iterations inside each stage (boundaries excluded) where
    /// the objective did not increase.
    pub fn monotone_fraction(&self) -> f64 {
        let pairs: Vec<bool> = self
            .rows
            .windows(2)
            .filter(|w| w[0].q_k == w[1].q_k && w[0].q_f == w[1].q_f)
            .map(|w| w[1].k <= w[0].k)
            .collect();
        if pairs.is_empty() {
            return 1.0;
        }
        pairs.iter().filter(|b| **b).count() as f64 / pairs.len() as f64
    }
}

/// Forward solve; on a numerical failure retry once from rest with halved
/// under-relaxation, then dump the design and give up.
fn evaluate_robust(
    pipe: &Pipeline,
    d: &DesignField,
    q_k: f64,
    q_f: f64,
    warm: Option<&[f64]>,
    out: Option<&Path>,
) -> Result<Evaluation> {
    match pipe.evaluate(d, q_k, q_f, warm) {
        Ok(ev) => Ok(ev),
        Err(e) if e.is_numerical() => {
            log::warn!("forward solve failed ({e}); retrying with halved relaxation");
            let s = FlowSolveSettings {
                under_relaxation: 0.5 * pipe.flow_settings.under_relaxation,
                ..pipe.flow_settings
            };
            pipe.evaluate_with(d, q_k, q_f, None, &s).inspect_err(|e| {
                log::error!("forward solve failed again: {e}");
                if let Some(dir) = out {
                    let path = dir.join("failed_design.csv");
                    match write_design_csv(&path, d, &pipe.grid) {
                        Ok(()) => log::error!("design written to {}", path.display()),
                        Err(w) => log::error!("could not write the failed design: {w}"),
                    }
                }
            })
        }
        Err(e) => Err(e),
    }
}

/// Run the design loop on a prepared problem. `out` receives checkpoints,
/// gradient dumps and failure dumps.
pub fn optimize(
    pipe: &mut Pipeline,
    config: &OptimizationConfig,
    out: Option<&Path>,
) -> Result<(DesignField, RunRecord)> {
    let settings = config.optimizer;
    let n = pipe.grid.n_cells();
    let mut design = DesignField::uniform(n, 0.0, 0.0);
    let mut mma = MmaState::new(2 * n, config.mma);
    let (xmin, xmax) = (vec![0.0; 2 * n], vec![1.0; 2 * n]);
    let area = pipe.grid.design_area();
    let f = pipe.objective.volume_fraction;
    let beta0 = pipe.projection.beta;
    let mut record = RunRecord::default();
    let mut warm: Option<Vec<f64>> = None;
    let mut scale = None;
    let start = Instant::now();

    for it in 0..settings.iterations {
        let (q_k, q_f) = config.continuation.params(it);
        let stage = config.continuation.stage(it);
        pipe.projection.beta = beta0 * settings.beta_growth.powi(stage as i32);
        let ev = evaluate_robust(pipe, &design, q_k, q_f, warm.as_deref(), out)?;
        let (dk1, dk2) = pipe.gradients(&ev)?;
        let (g, dg1, dg2) =
            volume_constraint(&design, &pipe.table, &pipe.grid, f, &pipe.projection)?;
        let s = *scale.get_or_insert(ev.objective.max(f64::MIN_POSITIVE));
        record.rows.push(HistoryRow {
            iter: it,
            k: ev.objective,
            g,
            mnd: mnd(&design.gamma1)?,
            q_k,
            q_f,
            seconds: if settings.record_timing {
                start.elapsed().as_secs_f64()
            } else {
                0.0
            },
        });
        log::info!(
            "iter {it:4} K {:.5e} g {:.3e} Mnd {:.3}% q ({q_k}, {q_f})",
            ev.objective,
            g,
            record.rows[it].mnd
        );
        if let Some(dir) = out {
            if settings.gradient_dump {
                write_gradient_csv(
                    &dir.join(format!("gradient_{it:04}.csv")),
                    &pipe.grid,
                    &dk1,
                    &dk2,
                )?;
            }
            if settings.checkpoint_every > 0 && it % settings.checkpoint_every == 0 {
                write_design_csv(
                    &dir.join(format!("checkpoint_{it:04}.csv")),
                    &design,
                    &pipe.grid,
                )?;
            }
        }

        let x = design.to_vec();
        let df: Vec<f64> = dk1.iter().chain(&dk2).map(|v| v / s).collect();
        let dg: Vec<f64> = dg1.iter().chain(&dg2).map(|v| v / area).collect();
        let step = mma_update(&x, &df, g / area, &dg, &mut mma, &xmin, &xmax)?;
        if step.infeasible {
            log::warn!("iteration {it}: volume constraint not reachable within the move limit");
        }
        design = DesignField::from_slice(&step.x);
        warm = Some(ev.flow.x);
    }
    pipe.projection.beta = beta0;
    Ok((design, record))
}

/// Build the problem from `config` and run the design loop.
pub fn run_optimization(
    config: &OptimizationConfig,
    out: Option<&Path>,
) -> Result<(DesignField, RunRecord)> {
    config.validate()?;
    let mut pipe = config.pipeline(config.boundary.p_in)?;
    optimize(&mut pipe, config, out)
}
