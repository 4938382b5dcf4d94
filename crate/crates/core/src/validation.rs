//! Random binary designs for checking the two-layer model against external
//! (for instance lattice-resolved) results.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::SamplingSettings;
use crate::error::{Error, Result};
use crate::metrics::{
    pearson_correlation, report, write_metrics_csv, MetricsReport, MetricsSettings,
};
use crate::model::{write_design_csv, DesignField};
use crate::sensitivity::Pipeline;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// Probability of a cell being void.
    pub void_probability: f64,
    pub design: DesignField,
}

/// Draw `settings.n` designs of `n_cells` cells. Each sample draws its void
/// probability (unless fixed), then every cell is void with that
/// probability and gets a uniform `gamma2`.
pub fn generate_samples(n_cells: usize, settings: &SamplingSettings, seed: u64) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..settings.n)
        .map(|_| {
            let u = settings
                .void_probability
                .unwrap_or_else(|| rng.gen_range(settings.void_min..=settings.void_max));
            let mut g1 = Vec::with_capacity(n_cells);
            let mut g2 = Vec::with_capacity(n_cells);
            for _ in 0..n_cells {
                g1.push(if rng.gen::<f64>() < u { 1.0 } else { 0.0 });
                g2.push(rng.gen::<f64>());
            }
            Sample {
                void_probability: u,
                design: DesignField {
                    gamma1: g1,
                    gamma2: g2,
                },
            }
        })
        .collect()
}

/// Evaluate every sample at the interpolation parameters `(q_k, q_f)`. With
/// `out`, each design goes to `sample_NNN.csv` and the metrics to
/// `metrics.csv`.
pub fn evaluate_samples(
    pipe: &Pipeline,
    samples: &[Sample],
    q: (f64, f64),
    settings: &MetricsSettings,
    out: Option<&Path>,
) -> Result<Vec<MetricsReport>> {
    let mut reports = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let ev = pipe.evaluate(&s.design, q.0, q.1, None)?;
        let m = report(pipe, &s.design, &ev, settings)?;
        log::info!(
            "sample {i}: void {:.3} Nu_obj {:.4} u_in {:.4e}",
            s.void_probability,
            m.nusselt.nu_obj,
            m.u_in
        );
        if let Some(dir) = out {
            write_design_csv(
                &dir.join(format!("sample_{i:03}.csv")),
                &s.design,
                &pipe.grid,
            )?;
        }
        reports.push(m);
    }
    if let Some(dir) = out {
        let rows: Vec<(Vec<String>, MetricsReport)> = samples
            .iter()
            .zip(&reports)
            .enumerate()
            .map(|(i, (s, m))| (vec![i.to_string(), format!("{:e}", s.void_probability)], *m))
            .collect();
        write_metrics_csv(
            &dir.join("metrics.csv"),
            &["sample", "void_probability"],
            &rows,
        )?;
    }
    Ok(reports)
}

/// Pearson coefficient of every metric column present in the external CSV
/// (header names as in the metrics CSV, one row per sample in order).
/// Columns without variance on either side give `None`.
pub fn correlate_with(
    reports: &[MetricsReport],
    path: &Path,
) -> Result<Vec<(String, Option<f64>)>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::parse(path, e.to_string()))?;
    let header = rdr
        .headers()
        .map_err(|e| Error::parse(path, e.to_string()))?
        .clone();
    let columns: Vec<(usize, usize)> = header
        .iter()
        .enumerate()
        .filter_map(|(c, name)| {
            MetricsReport::CSV_HEADER
                .iter()
                .position(|m| *m == name)
                .map(|k| (c, k))
        })
        .collect();
    if columns.is_empty() {
        return Err(Error::parse(path, "no metric columns"));
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::parse(path, e.to_string()))?;
        let vals = columns
            .iter()
            .map(|&(c, _)| {
                rec.get(c)
                    .unwrap_or("")
                    .parse::<f64>()
                    .map_err(|e| Error::parse(path, format!("row {}: {e}", rows.len() + 1)))
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(vals);
    }
    if rows.len() != reports.len() {
        return Err(Error::SizeMismatch {
            expected: reports.len(),
            got: rows.len(),
        });
    }
    columns
        .iter()
        .enumerate()
        .map(|(j, &(_, k))| {
            let pairs: Vec<(f64, f64)> = reports
                .iter()
                .zip(&rows)
                .map(|(m, r)| (m.values()[k], r[j]))
                .collect();
            let r = match pearson_correlation(&pairs) {
                Ok(r) => Some(r),
                Err(Error::Degenerate(_)) if pairs.len() >= 3 => None,
                Err(e) => return Err(e),
            };
            Ok((MetricsReport::CSV_HEADER[k].to_string(), r))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn samples_are_reproducible_and_binary() {
        let s = SamplingSettings::default();
        let a = generate_samples(200, &s, 7);
        let b = generate_samples(200, &s, 7);
        assert_eq!(a, b);
        assert_ne!(a, generate_samples(200, &s, 8));
        assert_eq!(a.len(), 30);
        for smp in &a {
            assert!((0.2..=0.8).contains(&smp.void_probability));
            assert!(smp.design.gamma1.iter().all(|v| *v == 0.0 || *v == 1.0));
            assert!(smp.design.gamma2.iter().all(|v| (0.0..1.0).contains(v)));
            let void = smp.design.gamma1.iter().sum::<f64>() / 200.0;
            // Binomial standard deviation is below 0.036 at n = 200.
            assert!((void - smp.void_probability).abs() < 0.15);
        }
    }

    #[test]
    fn forced_zero_void_probability_gives_all_lattice() {
        let s = SamplingSettings {
            n: 1,
            void_probability: Some(0.0),
            ..Default::default()
        };
        let a = generate_samples(50, &s, 3);
        assert!(a[0].design.gamma1.iter().all(|v| *v == 0.0));
    }
}
