//! Objective, volume constraint and adjoint design gradients.
//!
//! The forward chain is design -> projection -> property blend -> flow ->
//! temperatures -> p-norm of the base temperature rise. The flow feeds the
//! energy equations one way, so the thermal adjoint is solved first and its
//! velocity sensitivities drive the flow adjoint.

use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{FlowSolution, FlowSolveSettings, FlowSolver};
use crate::materials::{
    dh_dk, heat_transfer_coefficients, heaviside_project, interpolate_properties, FluidLimit,
    ProjectionParams, PropertyTable,
};
use crate::model::{
    build_domain, distribute_design, reduce_sensitivity, BoundarySpec, DesignField, DomainSettings,
    Mesh, PhysicalParams, ThermalState, UnitGrid,
};
use crate::thermal::{ThermalLayout, ThermalSolution};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveSettings {
    /// Exponent of the p-norm.
    pub p_norm: f64,
    /// Upper bound on the solid volume as a fraction of the design area.
    pub volume_fraction: f64,
}

impl Default for ObjectiveSettings {
    fn default() -> Self {
        Self {
            p_norm: 10.0,
            volume_fraction: 1.0,
        }
    }
}

impl ObjectiveSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.p_norm >= 2.0) || !(self.volume_fraction > 0.0 && self.volume_fraction <= 1.0) {
            return Err(Error::Config(
                "objective needs p_norm >= 2 and volume_fraction in (0, 1]".into(),
            ));
        }
        Ok(())
    }
}

static CLAMP_WARNED: AtomicBool = AtomicBool::new(false);

/// p-norm of the base temperature rise over the heated design domain and its
/// derivative with respect to every element's `Tb0`.
pub fn objective_with_gradient(
    t: &ThermalState,
    mesh: &Mesh,
    t_in: f64,
    p: f64,
) -> (f64, Vec<f64>) {
    let w = mesh.element_area();
    let area = w * mesh.heated.iter().filter(|x| **x).count() as f64;
    let mut sum = 0.0;
    let mut clamped = false;
    for (e, hot) in mesh.heated.iter().enumerate() {
        if *hot {
            let d = t.tb0[e] - t_in;
            clamped |= d < 0.0;
            sum += w * d.max(0.0).powf(p);
        }
    }
    if clamped && !CLAMP_WARNED.swap(true, Ordering::Relaxed) {
        log::warn!("base temperature below the inlet temperature; clamped in the objective");
    }
    let k = (sum / area).powf(1.0 / p);
    let mut grad = vec![0.0; mesh.n_elements()];
    if k > 0.0 {
        let c = k.powf(1.0 - p) / area;
        for (e, hot) in mesh.heated.iter().enumerate() {
            if *hot {
                grad[e] = c * w * (t.tb0[e] - t_in).max(0.0).powf(p - 1.0);
            }
        }
    }
    (k, grad)
}

/// p-norm of the base temperature rise over the heated design domain.
pub fn objective(t: &ThermalState, mesh: &Mesh, t_in: f64, settings: &ObjectiveSettings) -> f64 {
    objective_with_gradient(t, mesh, t_in, settings.p_norm).0
}

/// Solid volume constraint `g = sum (1 - eps) A_cell - f A` and its per-cell
/// gradients with respect to `gamma1` and `gamma2`.
pub fn volume_constraint(
    d: &DesignField,
    table: &PropertyTable<f64>,
    grid: &UnitGrid,
    f: f64,
    projection: &ProjectionParams,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    d.check_grid(grid)?;
    let a = grid.cell_area();
    let mut g = -f * grid.design_area();
    let mut dg1 = Vec::with_capacity(d.len());
    let mut dg2 = Vec::with_capacity(d.len());
    for (g1, g2) in d.gamma1.iter().zip(&d.gamma2) {
        let (gh, dp) = heaviside_project(*g1, projection.beta, projection.eta);
        let lat = table.eval(*g2);
        let eps = 1.0 + (lat.eps - 1.0) * (1.0 - gh);
        g += a * (1.0 - eps);
        dg1.push(-a * (1.0 - lat.eps) * dp);
        dg2.push(-a * lat.d_eps * (1.0 - gh));
    }
    Ok((g, dg1, dg2))
}

/// Effective properties of every element with their design derivatives
/// (already including the projection slope).
#[derive(Debug, Clone)]
pub struct ElementProperties {
    pub eps: Vec<f64>,
    pub k: Vec<f64>,
    pub h: Vec<f64>,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    /// `d/dgamma1` of `(k, alpha, beta)`.
    pub d1: Vec<[f64; 3]>,
    /// `d/dgamma2` of `(k, alpha, beta)`.
    pub d2: Vec<[f64; 3]>,
    pub dh_dk: Vec<f64>,
}

/// Forward state of one design.
pub struct Evaluation {
    pub props: ElementProperties,
    pub flow: FlowSolution,
    pub thermal: ThermalSolution,
    /// Objective value, K.
    pub objective: f64,
    dk_dtb: Vec<f64>,
}

/// Mesh, solvers and material data of one optimization problem.
pub struct Pipeline {
    pub params: PhysicalParams,
    pub grid: UnitGrid,
    pub bc: BoundarySpec,
    pub mesh: Mesh,
    pub table: PropertyTable<f64>,
    pub fluid: FluidLimit<f64>,
    pub projection: ProjectionParams,
    pub objective: ObjectiveSettings,
    pub flow_settings: FlowSolveSettings,
    pub flow: FlowSolver,
    pub thermal: ThermalLayout,
}

impl Pipeline {
    pub fn new(
        params: &PhysicalParams,
        domain: &DomainSettings,
        p_in: f64,
        table: PropertyTable<f64>,
        projection: ProjectionParams,
        objective: ObjectiveSettings,
        flow_settings: FlowSolveSettings,
    ) -> Result<Self> {
        projection.validate()?;
        objective.validate()?;
        let (grid, bc, mesh) = build_domain(params, domain, p_in)?;
        let flow = FlowSolver::new(&mesh, &bc, params, &flow_settings)?;
        let thermal = ThermalLayout::new(&mesh, params, flow_settings.velocity_regularization)?;
        Ok(Self {
            params: *params,
            grid,
            bc,
            mesh,
            table,
            fluid: params.fluid_limit(),
            projection,
            objective,
            flow_settings,
            flow,
            thermal,
        })
    }

    pub fn element_properties(
        &self,
        d: &DesignField,
        q_k: f64,
        q_f: f64,
    ) -> Result<ElementProperties> {
        let (g1, g2) = distribute_design(d, &self.grid)?;
        let n = self.mesh.n_elements();
        let p = &self.params;
        let (_, _, h_fluid) = heat_transfer_coefficients(self.fluid.k_f, p.h_t, p.k_s, p.h_b);
        let mut out = ElementProperties {
            eps: vec![1.0; n],
            k: vec![self.fluid.k_f; n],
            h: vec![h_fluid; n],
            alpha: vec![self.fluid.alpha_f; n],
            beta: vec![self.fluid.beta_f; n],
            d1: vec![[0.0; 3]; n],
            d2: vec![[0.0; 3]; n],
            dh_dk: vec![dh_dk(self.fluid.k_f, p.h_t, p.k_s, p.h_b); n],
        };
        for e in 0..n {
            if self.grid.cell_of_element[e].is_none() {
                continue;
            }
            let (gh, dp) = heaviside_project(g1[e], self.projection.beta, self.projection.eta);
            let lat = self.table.eval(g2[e]);
            let b = interpolate_properties(gh, &lat, q_k, q_f, &self.fluid);
            out.eps[e] = b.eps;
            out.k[e] = b.k;
            out.alpha[e] = b.alpha;
            out.beta[e] = b.beta;
            out.h[e] = heat_transfer_coefficients(b.k, p.h_t, p.k_s, p.h_b).2;
            out.dh_dk[e] = dh_dk(b.k, p.h_t, p.k_s, p.h_b);
            out.d1[e] = [b.dk_dg1 * dp, b.dalpha_dg1 * dp, b.dbeta_dg1 * dp];
            out.d2[e] = [b.dk_dg2, b.dalpha_dg2, b.dbeta_dg2];
        }
        Ok(out)
    }

    /// Forward solve. `warm` is a flow unknown vector to start from.
    pub fn evaluate_with(
        &self,
        d: &DesignField,
        q_k: f64,
        q_f: f64,
        warm: Option<&[f64]>,
        settings: &FlowSolveSettings,
    ) -> Result<Evaluation> {
        let props = self.element_properties(d, q_k, q_f)?;
        let flow = self
            .flow
            .solve(&self.mesh, &props.alpha, &props.beta, settings, warm)?;
        let thermal = self
            .thermal
            .solve(&flow.state, &props.k, &props.h, self.params.t_in)?;
        let (objective, dk_dtb) = objective_with_gradient(
            &thermal.state,
            &self.mesh,
            self.params.t_in,
            self.objective.p_norm,
        );
        Ok(Evaluation {
            props,
            flow,
            thermal,
            objective,
            dk_dtb,
        })
    }

    pub fn evaluate(
        &self,
        d: &DesignField,
        q_k: f64,
        q_f: f64,
        warm: Option<&[f64]>,
    ) -> Result<Evaluation> {
        self.evaluate_with(d, q_k, q_f, warm, &self.flow_settings)
    }

    /// Per-cell `(dK/dgamma1, dK/dgamma2)` by the discrete adjoint.
    pub fn gradients(&self, ev: &Evaluation) -> Result<(Vec<f64>, Vec<f64>)> {
        let n_el = self.mesh.n_elements();
        let th = &self.thermal;
        let props = &ev.props;

        // Thermal adjoint.
        let mut lam_t = vec![0.0; 2 * th.n];
        for (k, e) in th.elems.iter().enumerate() {
            lam_t[th.n + k] = -ev.dk_dtb[*e];
        }
        ev.thermal.lu.solve_transpose(&mut lam_t)?;
        let asm = th.assemble(&ev.thermal.theta, &ev.flow.state, &props.k, &props.h, true);
        let inputs = asm.inputs.expect("input derivatives requested");
        let mut dk = vec![0.0; n_el];
        let mut dh = vec![0.0; n_el];
        for (r, e, v) in &inputs.k {
            dk[*e] += lam_t[*r] * v;
        }
        for (r, e, v) in &inputs.h {
            dh[*e] += lam_t[*r] * v;
        }

        // Flow adjoint driven by the velocity dependence of the energy rows.
        let lay = &self.flow.layout;
        let mut lam_f = vec![0.0; lay.n_unknowns()];
        for (r, id, v) in &inputs.velocity {
            let (is_u, f) = th.split_face_id(*id);
            let idx = if is_u { lay.u_index[f] } else { lay.v_index[f] };
            if let Some(i) = idx {
                lam_f[i] -= lam_t[*r] * v;
            }
        }
        let mut da = vec![0.0; n_el];
        let mut db = vec![0.0; n_el];
        if lam_f.iter().any(|v| *v != 0.0) {
            let (lu, fasm) = self
                .flow
                .exact_jacobian(&ev.flow.x, &props.alpha, &props.beta)?;
            lu.solve_transpose(&mut lam_f)?;
            let cj = fasm
                .coefficients
                .expect("coefficient derivatives requested");
            for (r, e, v) in &cj.alpha {
                da[*e] += lam_f[*r] * v;
            }
            for (r, e, v) in &cj.beta {
                db[*e] += lam_f[*r] * v;
            }
        }

        let mut g1 = vec![0.0; n_el];
        let mut g2 = vec![0.0; n_el];
        for e in 0..n_el {
            if self.grid.cell_of_element[e].is_none() {
                continue;
            }
            let dkt = dk[e] + dh[e] * props.dh_dk[e];
            let [k1, a1, b1] = props.d1[e];
            let [k2, a2, b2] = props.d2[e];
            g1[e] = dkt * k1 + da[e] * a1 + db[e] * b1;
            g2[e] = dkt * k2 + da[e] * a2 + db[e] * b2;
        }
        Ok((
            reduce_sensitivity(&g1, &self.grid)?,
            reduce_sensitivity(&g2, &self.grid)?,
        ))
    }
}

/// Write `ix,iy,dK_dg1,dK_dg2`.
pub fn write_gradient_csv(path: &Path, grid: &UnitGrid, dg1: &[f64], dg2: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::parse(path, e.to_string()))?;
    w.write_record(["ix", "iy", "dK_dg1", "dK_dg2"])
        .map_err(|e| Error::parse(path, e.to_string()))?;
    for c in 0..grid.n_cells() {
        let (ix, iy) = grid.cell_coords(c);
        w.serialize((ix, iy, dg1[c], dg2[c]))
            .map_err(|e| Error::parse(path, e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
