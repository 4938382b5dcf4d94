//! Post-processing: Nusselt numbers, binarization, centre-plane fields and
//! solid fraction.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::inlet_mean_velocity;
use crate::materials::{ProjectionParams, PropertyTable};
use crate::model::{DesignField, FlowState, Mesh, PhysicalParams, ThermalState, UnitGrid};
use crate::sensitivity::{volume_constraint, Evaluation, Pipeline};
use crate::thermal::energy_balance_residual;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsSettings {
    /// Add the half-plate conduction drop so that temperatures refer to the
    /// bottom surface rather than the base centre plane.
    pub bottom_offset: bool,
}

impl Default for MetricsSettings {
    fn default() -> Self {
        Self {
            bottom_offset: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Nusselt {
    pub nu_max: f64,
    pub nu_obj: f64,
    pub nu_ave: f64,
}

/// Nusselt numbers from the maximum, p-norm and mean base temperature rise
/// over the heated footprint, based on the inlet width.
pub fn nusselt_metrics(
    t: &ThermalState,
    mesh: &Mesh,
    params: &PhysicalParams,
    p: f64,
    offset: bool,
) -> Result<Nusselt> {
    if !(params.q_s > 0.0) {
        return Err(Error::OutOfRange(
            "Nusselt numbers need a positive heat flux".into(),
        ));
    }
    let off = if offset { params.base_offset() } else { 0.0 };
    let rises: Vec<f64> = (0..mesh.n_elements())
        .filter(|e| mesh.heated[*e])
        .map(|e| t.tb0[e] - params.t_in + off)
        .collect();
    if rises.is_empty() {
        return Err(Error::Dimension("no heated elements".into()));
    }
    let n = rises.len() as f64;
    let max = rises.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v));
    let ave = rises.iter().sum::<f64>() / n;
    let obj = (rises.iter().map(|r| r.max(0.0).powf(p)).sum::<f64>() / n).powf(1.0 / p);
    if !(max > 0.0) || !(ave > 0.0) || !(obj > 0.0) {
        return Err(Error::Degenerate(
            "base temperature does not exceed the inlet temperature".into(),
        ));
    }
    let nu = |dt: f64| params.q_s / dt * params.l_in / params.k_f;
    Ok(Nusselt {
        nu_max: nu(max),
        nu_obj: nu(obj),
        nu_ave: nu(ave),
    })
}

/// Measure of non-discreteness in percent.
pub fn mnd(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Degenerate("empty design field".into()));
    }
    Ok(values.iter().map(|g| 4.0 * g * (1.0 - g)).sum::<f64>() / values.len() as f64 * 100.0)
}

/// Fluid temperature on the layer's centre plane from the bulk and wall
/// temperatures.
pub fn center_temperature(t_wall: f64, t_bulk: f64) -> f64 {
    -39.0 / 416.0 * t_wall + 455.0 / 416.0 * t_bulk
}

/// Centre-plane velocity (`1.5` times the Darcy velocity) and temperature
/// per element. Inactive elements hold zero velocity and the inlet
/// temperature.
pub fn center_plane_fields(
    mesh: &Mesh,
    flow: &FlowState,
    t: &ThermalState,
    params: &PhysicalParams,
) -> (Vec<[f64; 2]>, Vec<f64>) {
    let n = mesh.n_elements();
    let mut v0 = vec![[0.0; 2]; n];
    let mut tc = vec![params.t_in; n];
    for e in (0..n).filter(|e| mesh.active[*e]) {
        let v = flow.element_velocity(mesh, e);
        v0[e] = [1.5 * v[0], 1.5 * v[1]];
        tc[e] = center_temperature(t.tb0[e] - params.base_offset(), t.t0[e]);
    }
    (v0, tc)
}

/// Solid volume fraction of the design domain.
pub fn solid_fraction(
    d: &DesignField,
    table: &PropertyTable<f64>,
    grid: &UnitGrid,
    projection: &ProjectionParams,
) -> Result<f64> {
    let (g, _, _) = volume_constraint(d, table, grid, 0.0, projection)?;
    Ok(g / grid.design_area())
}

/// Pearson correlation coefficient.
pub fn pearson_correlation(pairs: &[(f64, f64)]) -> Result<f64> {
    if pairs.len() < 3 {
        return Err(Error::Degenerate(
            "correlation needs at least three pairs".into(),
        ));
    }
    let n = pairs.len() as f64;
    let (mx, my) = pairs
        .iter()
        .fold((0.0, 0.0), |(a, b), (x, y)| (a + x, b + y));
    let (mx, my) = (mx / n, my / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in pairs {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Degenerate("zero variance".into()));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Summary of one evaluated design.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsReport {
    /// Nusselt numbers with the configured temperature reference.
    pub nusselt: Nusselt,
    /// Nusselt numbers from the base centre-plane temperature.
    pub nusselt_center: Nusselt,
    pub u_in: f64,
    pub mnd: f64,
    pub solid_fraction: f64,
    /// p-norm base temperature rise, K.
    pub objective: f64,
    pub energy_residual: f64,
}

impl MetricsReport {
    pub const CSV_HEADER: [&'static str; 11] = [
        "nu_max",
        "nu_obj",
        "nu_ave",
        "nu_max_center",
        "nu_obj_center",
        "nu_ave_center",
        "u_in",
        "mnd",
        "solid_fraction",
        "K",
        "energy_residual",
    ];

    pub fn values(&self) -> [f64; 11] {
        [
            self.nusselt.nu_max,
            self.nusselt.nu_obj,
            self.nusselt.nu_ave,
            self.nusselt_center.nu_max,
            self.nusselt_center.nu_obj,
            self.nusselt_center.nu_ave,
            self.u_in,
            self.mnd,
            self.solid_fraction,
            self.objective,
            self.energy_residual,
        ]
    }

    /// `key = value` lines.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in Self::CSV_HEADER.iter().zip(self.values()) {
            let _ = writeln!(s, "{k} = {v:e}");
        }
        s
    }

    pub fn write_text(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

/// Metrics of an evaluated design.
pub fn report(
    pipe: &Pipeline,
    d: &DesignField,
    ev: &Evaluation,
    settings: &MetricsSettings,
) -> Result<MetricsReport> {
    let t = &ev.thermal.state;
    let p = pipe.objective.p_norm;
    Ok(MetricsReport {
        nusselt: nusselt_metrics(t, &pipe.mesh, &pipe.params, p, settings.bottom_offset)?,
        nusselt_center: nusselt_metrics(t, &pipe.mesh, &pipe.params, p, false)?,
        u_in: inlet_mean_velocity(&pipe.mesh, &ev.flow.state, &pipe.bc),
        mnd: mnd(&d.gamma1)?,
        solid_fraction: solid_fraction(d, &pipe.table, &pipe.grid, &pipe.projection)?,
        objective: ev.objective,
        energy_residual: energy_balance_residual(&pipe.mesh, &ev.flow.state, t, &pipe.params),
    })
}

/// Write metrics rows with leading label columns as a CSV.
pub fn write_metrics_csv(
    path: &Path,
    labels: &[&str],
    rows: &[(Vec<String>, MetricsReport)],
) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::parse(path, e.to_string()))?;
    let header: Vec<&str> = labels
        .iter()
        .copied()
        .chain(MetricsReport::CSV_HEADER)
        .collect();
    w.write_record(&header)
        .map_err(|e| Error::parse(path, e.to_string()))?;
    for (lab, m) in rows {
        let rec: Vec<String> = lab
            .iter()
            .cloned()
            .chain(m.values().iter().map(|v| format!("{v:e}")))
            .collect();
        w.write_record(&rec)
            .map_err(|e| Error::parse(path, e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::materials::{heaviside_project, DiameterRange, SyntheticBcc};
    use crate::model::{build_domain, DomainSettings};
    use proptest::prelude::*;

    fn mesh() -> (UnitGrid, Mesh, PhysicalParams) {
        let params = PhysicalParams {
            l_x: 0.01,
            l_y: 0.01,
            ..Default::default()
        };
        let (grid, _, mesh) = build_domain(&params, &DomainSettings::default(), 1.0).unwrap();
        (grid, mesh, params)
    }

    #[test]
    fn nusselt_arithmetic() {
        let (_, mesh, params) = mesh();
        let n = mesh.n_elements();
        let t = ThermalState {
            t0: vec![params.t_in; n],
            tb0: vec![params.t_in + 120.0; n],
        };
        let nu = nusselt_metrics(&t, &mesh, &params, 10.0, false).unwrap();
        let oracle: f64 = 1e5 / 120.0 * 5e-3 / 0.598;
        assert!((oracle - 6.97).abs() < 5e-3);
        for v in [nu.nu_max, nu.nu_obj, nu.nu_ave] {
            assert!((v - oracle).abs() < 1e-10);
        }
        let off = nusselt_metrics(&t, &mesh, &params, 10.0, true).unwrap();
        assert!((off.nu_max - 1e5 / 120.5 * 5e-3 / 0.598).abs() < 1e-10);
    }

    #[test]
    fn nusselt_ordering_on_varied_field() {
        let (_, mesh, params) = mesh();
        let n = mesh.n_elements();
        let tb0 = (0..n)
            .map(|e| params.t_in + 5.0 + (e % 17) as f64)
            .collect();
        let t = ThermalState {
            t0: vec![params.t_in; n],
            tb0,
        };
        let nu = nusselt_metrics(&t, &mesh, &params, 10.0, true).unwrap();
        assert!(nu.nu_ave >= nu.nu_obj && nu.nu_obj >= nu.nu_max);
        let flat = ThermalState {
            t0: vec![params.t_in; n],
            tb0: vec![params.t_in; n],
        };
        assert!(nusselt_metrics(&flat, &mesh, &params, 10.0, false).is_err());
    }

    #[test]
    fn mnd_values() {
        assert_eq!(mnd(&[0.0, 1.0, 0.0]).unwrap(), 0.0);
        assert!((mnd(&[0.5; 4]).unwrap() - 100.0).abs() < 1e-12);
        assert!(mnd(&[]).is_err());
    }

    #[test]
    fn center_plane_values() {
        assert!((center_temperature(300.0, 300.0) - 300.0).abs() < 1e-12);
        let oracle: f64 = (-39.0 * 330.0 + 455.0 * 300.0) / 416.0;
        assert!((center_temperature(330.0, 300.0) - oracle).abs() < 1e-12);
        assert!((oracle - 297.1875).abs() < 1e-9);
        assert!((-39.0f64 / 416.0 + 455.0 / 416.0 - 1.0).abs() < 1e-12);
        let (_, mesh, params) = mesh();
        let mut flow = FlowState::zeros(&mesh);
        flow.u.iter_mut().for_each(|u| *u = 0.02);
        let n = mesh.n_elements();
        let t = ThermalState {
            t0: vec![300.0; n],
            tb0: vec![300.0 + params.base_offset(); n],
        };
        let (v0, tc) = center_plane_fields(&mesh, &flow, &t, &params);
        let e = mesh.elem(mesh.nx / 2, 0);
        assert!((v0[e][0] - 0.03).abs() < 1e-15);
        assert!((tc[e] - 300.0).abs() < 1e-9);
    }

    #[test]
    fn solid_fraction_values() {
        let (grid, _, params) = mesh();
        let syn = SyntheticBcc {
            mu_f: params.mu_f,
            rho_f: params.rho_f,
            k_f: params.k_f,
            k_s: params.k_s,
        };
        let table = syn
            .table(2.5e-3, DiameterRange::new(0.3e-3, 1.3e-3).unwrap(), 11)
            .unwrap();
        let proj = ProjectionParams::default();
        let n = grid.n_cells();
        assert!(
            solid_fraction(&DesignField::uniform(n, 1.0, 0.7), &table, &grid, &proj)
                .unwrap()
                .abs()
                < 1e-15
        );
        let eps = table.eval(0.4).eps;
        let s = solid_fraction(&DesignField::uniform(n, 0.0, 0.4), &table, &grid, &proj).unwrap();
        assert!((s - (1.0 - eps)).abs() < 1e-12);
        // Mixed design against a direct cell sum.
        let g1: Vec<f64> = (0..n).map(|c| (c % 3) as f64 / 2.0).collect();
        let g2: Vec<f64> = (0..n).map(|c| (c % 5) as f64 / 4.0).collect();
        let d = DesignField::new(g1.clone(), g2.clone()).unwrap();
        let mut sum = 0.0;
        for c in 0..n {
            let gh = heaviside_project(g1[c], 1.0, 0.5).0;
            sum += (1.0 - table.eval(g2[c]).eps) * (1.0 - gh);
        }
        assert!((solid_fraction(&d, &table, &grid, &proj).unwrap() - sum / n as f64).abs() < 1e-12);
    }

    #[test]
    fn pearson_values() {
        let lin: Vec<(f64, f64)> = (0..6).map(|i| (i as f64, 3.0 * i as f64 - 1.0)).collect();
        assert!((pearson_correlation(&lin).unwrap() - 1.0).abs() < 1e-12);
        let anti: Vec<(f64, f64)> = lin.iter().map(|(x, y)| (*x, -y)).collect();
        assert!((pearson_correlation(&anti).unwrap() + 1.0).abs() < 1e-12);
        // x = 1..5, y = 2, 4, 5, 4, 5: sxy = 6, sxx = 10, syy = 6.
        let pts = [(1.0, 2.0), (2.0, 4.0), (3.0, 5.0), (4.0, 4.0), (5.0, 5.0)];
        let oracle = 6.0 / (10.0f64 * 6.0).sqrt();
        assert!((pearson_correlation(&pts).unwrap() - oracle).abs() < 1e-12);
        assert!(pearson_correlation(&[(1.0, 1.0), (1.0, 2.0), (1.0, 3.0)]).is_err());
    }

    proptest! {
        #[test]
        fn mnd_is_symmetric(v in proptest::collection::vec(0.0f64..=1.0, 1..40)) {
            let flipped: Vec<f64> = v.iter().map(|g| 1.0 - g).collect();
            let (a, b) = (mnd(&v).unwrap(), mnd(&flipped).unwrap());
            prop_assert!((a - b).abs() < 1e-9);
            prop_assert!((0.0..=100.0 + 1e-9).contains(&a));
        }
    }
}
