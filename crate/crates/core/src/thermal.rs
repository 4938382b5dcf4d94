//! Two-layer energy balance: bulk fluid temperature `T0` and base-plate
//! centre temperature `Tb0`, both stored as rises `theta = T - T_in` over the
//! active elements.
//!
//! Rows are integrated over an element and scaled by the layer thickness so
//! that every term is a heat rate per element (W). Convection uses a smoothed
//! upwind flux, diffusion a harmonic-mean face conductivity. The system is
//! linear in the temperatures; its Jacobian is exact and reused for the
//! adjoint.

use crate::error::{Error, Result};
use crate::flow::sabs;
use crate::model::{FaceKind, FlowState, Mesh, PhysicalParams, ThermalState};
use crate::scalar::{Jet, Scalar};
use crate::sparse::{Factorization, Pattern};

const NF: usize = 16;
const NB: usize = 7;

// Fluid row slots.
const F_T: usize = 0;
const F_NB: usize = 1;
const F_TB: usize = 5;
const F_VEL: usize = 6;
const F_K: usize = 10;
const F_KNB: usize = 11;
const F_H: usize = 15;

// Base row slots.
const B_T: usize = 0;
const B_NB: usize = 1;
const B_T0: usize = 5;
const B_H: usize = 6;

/// Side of an element as seen by the energy equations.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Side {
    /// Shared with another active element (local index).
    Interior(usize),
    /// Inlet: fixed temperature.
    Inlet,
    /// Outlet: zero diffusive flux.
    Outlet,
    /// Wall or symmetry line.
    Closed,
}

#[derive(Debug, Clone)]
struct Row {
    elem: usize,
    /// East, west, north, south.
    sides: [Side; 4],
    /// Velocity face id (see [`ThermalLayout::face_id`]) and outward sign.
    faces: [Option<(usize, f64)>; 4],
    heated: bool,
}

/// Derivatives of the thermal residual rows with respect to flow and
/// property inputs, as `(row, id, value)` triplets.
#[derive(Debug, Clone, Default)]
pub struct ThermalInputJacobian {
    /// `id` is a velocity face id.
    pub velocity: Vec<(usize, usize, f64)>,
    /// `id` is an element.
    pub k: Vec<(usize, usize, f64)>,
    pub h: Vec<(usize, usize, f64)>,
}

pub struct ThermalAssembly {
    pub residual: Vec<f64>,
    pub jacobian: Vec<f64>,
    pub inputs: Option<ThermalInputJacobian>,
}

/// Unknown numbering and stencils of the thermal system. Unknown `k` is the
/// fluid rise of the `k`-th active element, `n + k` its base rise.
#[derive(Debug)]
pub struct ThermalLayout {
    pub n: usize,
    pub index: Vec<Option<usize>>,
    pub elems: Vec<usize>,
    rows: Vec<Row>,
    n_u_faces: usize,
    pub pattern: Pattern,
    h: f64,
    rho_c: f64,
    two_ht: f64,
    two_hb_ks: f64,
    q_s: f64,
    eps_f: f64,
}

impl ThermalLayout {
    pub fn new(mesh: &Mesh, params: &PhysicalParams, eps_v: f64) -> Result<Self> {
        let (nx, ny) = (mesh.nx, mesh.ny);
        let mut index = vec![None; nx * ny];
        let mut elems = Vec::new();
        for (e, a) in mesh.active.iter().enumerate() {
            if *a {
                index[e] = Some(elems.len());
                elems.push(e);
            }
        }
        let n = elems.len();
        if n == 0 {
            return Err(Error::Dimension("mesh has no active elements".into()));
        }
        let n_u_faces = (nx + 1) * ny;
        let side_of = |kind: FaceKind, nb: Option<usize>| match kind {
            FaceKind::Interior => {
                Side::Interior(index[nb.expect("interior face has a neighbour")].unwrap())
            }
            FaceKind::Inlet => Side::Inlet,
            FaceKind::Outlet => Side::Outlet,
            _ => Side::Closed,
        };
        let mut rows = Vec::with_capacity(n);
        for &e in &elems {
            let (i, j) = (e % nx, e / nx);
            let fe = mesh.u_face(i + 1, j);
            let fw = mesh.u_face(i, j);
            let fn_ = mesh.v_face(i, j + 1);
            let fs = mesh.v_face(i, j);
            let sides = [
                side_of(mesh.u_kind[fe], (i + 1 < nx).then(|| mesh.elem(i + 1, j))),
                side_of(mesh.u_kind[fw], (i > 0).then(|| mesh.elem(i - 1, j))),
                side_of(mesh.v_kind[fn_], (j + 1 < ny).then(|| mesh.elem(i, j + 1))),
                side_of(mesh.v_kind[fs], (j > 0).then(|| mesh.elem(i, j - 1))),
            ];
            let moving = |s: Side| s != Side::Closed;
            let faces = [
                moving(sides[0]).then_some((fe, 1.0)),
                moving(sides[1]).then_some((fw, -1.0)),
                moving(sides[2]).then_some((n_u_faces + fn_, 1.0)),
                moving(sides[3]).then_some((n_u_faces + fs, -1.0)),
            ];
            rows.push(Row {
                elem: e,
                sides,
                faces,
                heated: mesh.heated[e],
            });
        }

        let mut entries = Vec::new();
        for (k, row) in rows.iter().enumerate() {
            // Fluid row: own, neighbours, base.
            entries.push((k, k));
            for s in &row.sides {
                if let Side::Interior(m) = s {
                    entries.push((k, *m));
                }
            }
            entries.push((k, n + k));
        }
        for (k, row) in rows.iter().enumerate() {
            entries.push((n + k, n + k));
            for s in &row.sides {
                if let Side::Interior(m) = s {
                    entries.push((n + k, n + m));
                }
            }
            entries.push((n + k, k));
        }
        let pattern = Pattern::new(2 * n, &entries)?;
        Ok(Self {
            n,
            index,
            elems,
            rows,
            n_u_faces,
            pattern,
            h: mesh.h,
            rho_c: params.rho_f * params.c_pf,
            two_ht: 2.0 * params.h_t,
            two_hb_ks: 2.0 * params.h_b * params.k_s,
            q_s: params.q_s,
            eps_f: eps_v * mesh.h,
        })
    }

    /// Velocity face id: x-normal faces first, then y-normal faces.
    pub fn face_id(&self, is_u: bool, face: usize) -> usize {
        if is_u {
            face
        } else {
            self.n_u_faces + face
        }
    }

    /// Inverse of [`Self::face_id`]: `(is_u, face)`.
    pub fn split_face_id(&self, id: usize) -> (bool, usize) {
        if id < self.n_u_faces {
            (true, id)
        } else {
            (false, id - self.n_u_faces)
        }
    }

    fn velocity(&self, flow: &FlowState, id: usize) -> f64 {
        if id < self.n_u_faces {
            flow.u[id]
        } else {
            flow.v[id - self.n_u_faces]
        }
    }

    fn gather_fluid<T: Scalar + Seed>(
        &self,
        row: &Row,
        k: usize,
        theta: &[f64],
        flow: &FlowState,
        kf: &[f64],
        hf: &[f64],
    ) -> [T; NF] {
        let mut x = [T::zero(); NF];
        x[F_T] = T::seed(theta[k], F_T);
        x[F_TB] = T::seed(theta[self.n + k], F_TB);
        x[F_K] = T::seed(kf[row.elem], F_K);
        x[F_H] = T::seed(hf[row.elem], F_H);
        for s in 0..4 {
            if let Side::Interior(m) = row.sides[s] {
                x[F_NB + s] = T::seed(theta[m], F_NB + s);
                x[F_KNB + s] = T::seed(kf[self.elems[m]], F_KNB + s);
            }
            if let Some((id, _)) = row.faces[s] {
                x[F_VEL + s] = T::seed(self.velocity(flow, id), F_VEL + s);
            }
        }
        x
    }

    fn gather_base<T: Scalar + Seed>(
        &self,
        row: &Row,
        k: usize,
        theta: &[f64],
        hf: &[f64],
    ) -> [T; NB] {
        let mut x = [T::zero(); NB];
        x[B_T] = T::seed(theta[self.n + k], B_T);
        x[B_T0] = T::seed(theta[k], B_T0);
        x[B_H] = T::seed(hf[row.elem], B_H);
        for s in 0..4 {
            if let Side::Interior(m) = row.sides[s] {
                x[B_NB + s] = T::seed(theta[self.n + m], B_NB + s);
            }
        }
        x
    }

    fn fluid_kernel<T: Scalar>(&self, x: &[T; NF], row: &Row) -> T {
        let half = T::c(0.5);
        let h = T::c(self.h);
        let p = x[F_T];
        let kp = x[F_K];
        let mut conv = T::zero();
        let mut diff = T::zero();
        for s in 0..4 {
            let flux = match row.faces[s] {
                Some((_, sign)) => x[F_VEL + s] * T::c(sign) * h,
                None => continue,
            };
            let a = sabs(flux, self.eps_f);
            match row.sides[s] {
                Side::Interior(_) => {
                    let nb = x[F_NB + s];
                    let kn = x[F_KNB + s];
                    conv = conv + flux * (p + nb) * half + a * (p - nb) * half;
                    diff = diff + T::c(2.0) * kp * kn / (kp + kn) * (nb - p);
                }
                Side::Inlet => {
                    conv = conv + (flux + a) * p * half;
                    diff = diff - T::c(2.0) * kp * p;
                }
                Side::Outlet => conv = conv + flux * p,
                Side::Closed => {}
            }
        }
        T::c(self.two_ht * self.rho_c) * conv
            - T::c(self.two_ht) * diff
            - h * h * x[F_H] * (x[F_TB] - p)
    }

    fn base_kernel<T: Scalar>(&self, x: &[T; NB], row: &Row) -> T {
        let h = T::c(self.h);
        let mut diff = T::zero();
        for s in 0..4 {
            if let Side::Interior(_) = row.sides[s] {
                diff = diff + x[B_NB + s] - x[B_T];
            }
        }
        let q = if row.heated { self.q_s } else { 0.0 };
        -T::c(self.two_hb_ks) * diff + h * h * x[B_H] * (x[B_T] - x[B_T0])
            - T::c(q * self.h * self.h)
    }

    /// Residual, Jacobian in pattern order and, on request, the input
    /// derivatives.
    pub fn assemble(
        &self,
        theta: &[f64],
        flow: &FlowState,
        k: &[f64],
        h: &[f64],
        inputs: bool,
    ) -> ThermalAssembly {
        let n = self.n;
        let mut residual = vec![0.0; 2 * n];
        let mut jacobian = Vec::with_capacity(self.pattern.len());
        let mut ij = ThermalInputJacobian::default();
        for (r, row) in self.rows.iter().enumerate() {
            let x: [Jet<NF>; NF] = self.gather_fluid(row, r, theta, flow, k, h);
            let res = self.fluid_kernel(&x, row);
            residual[r] = res.v;
            jacobian.push(res.d[F_T]);
            for s in 0..4 {
                if let Side::Interior(_) = row.sides[s] {
                    jacobian.push(res.d[F_NB + s]);
                }
            }
            jacobian.push(res.d[F_TB]);
            if inputs {
                for s in 0..4 {
                    if let Some((id, _)) = row.faces[s] {
                        ij.velocity.push((r, id, res.d[F_VEL + s]));
                    }
                    if let Side::Interior(m) = row.sides[s] {
                        ij.k.push((r, self.elems[m], res.d[F_KNB + s]));
                    }
                }
                ij.k.push((r, row.elem, res.d[F_K]));
                ij.h.push((r, row.elem, res.d[F_H]));
            }
        }
        for (r, row) in self.rows.iter().enumerate() {
            let x: [Jet<NB>; NB] = self.gather_base(row, r, theta, h);
            let res = self.base_kernel(&x, row);
            residual[n + r] = res.v;
            jacobian.push(res.d[B_T]);
            for s in 0..4 {
                if let Side::Interior(_) = row.sides[s] {
                    jacobian.push(res.d[B_NB + s]);
                }
            }
            jacobian.push(res.d[B_T0]);
            if inputs {
                ij.h.push((n + r, row.elem, res.d[B_H]));
            }
        }
        ThermalAssembly {
            residual,
            jacobian,
            inputs: inputs.then_some(ij),
        }
    }

    /// Residual only.
    pub fn residual(&self, theta: &[f64], flow: &FlowState, k: &[f64], h: &[f64]) -> Vec<f64> {
        let mut r = Vec::with_capacity(2 * self.n);
        for (i, row) in self.rows.iter().enumerate() {
            let x: [f64; NF] = self.gather_fluid(row, i, theta, flow, k, h);
            r.push(self.fluid_kernel(&x, row));
        }
        for (i, row) in self.rows.iter().enumerate() {
            let x: [f64; NB] = self.gather_base(row, i, theta, h);
            r.push(self.base_kernel(&x, row));
        }
        r
    }

    pub fn to_state(&self, theta: &[f64], t_in: f64) -> ThermalState {
        let ne = self.index.len();
        let mut t0 = vec![t_in; ne];
        let mut tb0 = vec![t_in; ne];
        for (k, e) in self.elems.iter().enumerate() {
            t0[*e] = t_in + theta[k];
            tb0[*e] = t_in + theta[self.n + k];
        }
        ThermalState { t0, tb0 }
    }
}

/// Seeding of a stencil input: plain value for `f64`, unit derivative for jets.
pub(crate) trait Seed {
    fn seed(v: f64, slot: usize) -> Self;
}

impl Seed for f64 {
    fn seed(v: f64, _: usize) -> f64 {
        v
    }
}

impl<const N: usize> Seed for Jet<N> {
    fn seed(v: f64, slot: usize) -> Self {
        Jet::var(v, slot)
    }
}

/// Solved temperatures with the factorization of the (linear) system.
pub struct ThermalSolution {
    pub state: ThermalState,
    /// Temperature rises in layout order.
    pub theta: Vec<f64>,
    pub lu: Factorization,
}

impl std::fmt::Debug for ThermalSolution {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ThermalSolution")
            .field("state", &self.state)
            .finish()
    }
}

impl ThermalLayout {
    pub fn solve(
        &self,
        flow: &FlowState,
        k: &[f64],
        h: &[f64],
        t_in: f64,
    ) -> Result<ThermalSolution> {
        let ne = self.index.len();
        if k.len() != ne || h.len() != ne {
            return Err(Error::SizeMismatch {
                expected: ne,
                got: k.len().min(h.len()),
            });
        }
        for e in &self.elems {
            if !(k[*e] > 0.0) || !(h[*e] > 0.0) {
                return Err(Error::OutOfRange(format!(
                    "element {e}: k and h must be positive"
                )));
            }
        }
        let zero = vec![0.0; 2 * self.n];
        let asm = self.assemble(&zero, flow, k, h, false);
        let lu = self.pattern.factor(&asm.jacobian)?;
        let mut theta: Vec<f64> = asm.residual.iter().map(|r| -r).collect();
        lu.solve(&mut theta)?;
        Ok(ThermalSolution {
            state: self.to_state(&theta, t_in),
            theta,
            lu,
        })
    }
}

/// One-shot thermal solve.
pub fn solve_thermal(
    mesh: &Mesh,
    flow: &FlowState,
    k: &[f64],
    h: &[f64],
    params: &PhysicalParams,
) -> Result<ThermalState> {
    let lay = ThermalLayout::new(mesh, params, 1e-10)?;
    Ok(lay.solve(flow, k, h, params.t_in)?.state)
}

/// Relative mismatch between the heat input and the heat carried out through
/// the open boundaries by the flow. Zero when there is no heat input.
pub fn energy_balance_residual(
    mesh: &Mesh,
    flow: &FlowState,
    t: &ThermalState,
    params: &PhysicalParams,
) -> f64 {
    let q_in = params.q_s * mesh.heated.iter().filter(|x| **x).count() as f64 * mesh.element_area();
    if q_in == 0.0 {
        return 0.0;
    }
    let mut carried = 0.0;
    for j in 0..mesh.ny {
        for (i, side, e) in [(0, -1.0, 0), (mesh.nx, 1.0, mesh.nx - 1)] {
            let f = mesh.u_face(i, j);
            let kind = mesh.u_kind[f];
            if !matches!(kind, FaceKind::Inlet | FaceKind::Outlet) {
                continue;
            }
            let flux = side * flow.u[f] * mesh.h;
            let theta = t.t0[mesh.elem(e, j)] - params.t_in;
            // Inflow carries the inlet temperature.
            if flux > 0.0 || kind == FaceKind::Outlet {
                carried += flux * theta;
            }
        }
    }
    let out = params.rho_f * params.c_pf * 2.0 * params.h_t * carried;
    ((q_in - out) / q_in).abs()
}

/// Normalised through-thickness temperature profile
/// `(T_w - T(z)) / (T_w - T0)` of the fluid layer, `zeta = z / H_t`.
pub fn profile(zeta: f64) -> f64 {
    35.0 / 416.0 * (13.0 + 8.0 * zeta - 6.0 * zeta * zeta + zeta.powi(4))
}

/// Weight of the velocity profile used for the bulk average, `zeta = z / H_t`.
pub fn bulk_weight(zeta: f64) -> f64 {
    1.5 * (1.0 - zeta * zeta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{FlowSolveSettings, FlowSolver};
    use crate::model::{build_domain, DomainSettings, WallCondition};
    use rand::{Rng, SeedableRng};

    fn props(mesh: &Mesh, params: &PhysicalParams, k: f64) -> (Vec<f64>, Vec<f64>) {
        let (_, _, h) =
            crate::materials::heat_transfer_coefficients(k, params.h_t, params.k_s, params.h_b);
        (vec![k; mesh.n_elements()], vec![h; mesh.n_elements()])
    }

    fn small(p_in: f64) -> (Mesh, PhysicalParams, FlowState) {
        let params = PhysicalParams {
            l_x: 0.02,
            l_y: 0.02,
            l_in: 5e-3,
            ..Default::default()
        };
        let dom = DomainSettings::default();
        let (_, bc, mesh) = build_domain(&params, &dom, p_in).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let a: Vec<f64> = (0..mesh.n_elements())
            .map(|_| 500.0 + rng.gen::<f64>() * 3e4)
            .collect();
        let b: Vec<f64> = (0..mesh.n_elements())
            .map(|_| rng.gen::<f64>() * 2e5)
            .collect();
        let settings = FlowSolveSettings {
            nonlinear_tol: 1e-10,
            ..Default::default()
        };
        let solver = FlowSolver::new(&mesh, &bc, &params, &settings).unwrap();
        let flow = solver.solve(&mesh, &a, &b, &settings, None).unwrap().state;
        (mesh, params, flow)
    }

    #[test]
    fn no_heat_no_rise() {
        let (mesh, mut params, flow) = small(10.0);
        params.q_s = 0.0;
        let (k, h) = props(&mesh, &params, 5.0);
        let t = solve_thermal(&mesh, &flow, &k, &h, &params).unwrap();
        assert!(t
            .t0
            .iter()
            .chain(&t.tb0)
            .all(|v| (v - params.t_in).abs() < 1e-12));
        assert_eq!(energy_balance_residual(&mesh, &flow, &t, &params), 0.0);
    }

    #[test]
    fn rise_scales_with_heat_flux() {
        let (mesh, params, flow) = small(10.0);
        let (k, h) = props(&mesh, &params, 5.0);
        let t1 = solve_thermal(&mesh, &flow, &k, &h, &params).unwrap();
        let p2 = PhysicalParams {
            q_s: 2.0 * params.q_s,
            ..params
        };
        let t2 = solve_thermal(&mesh, &flow, &k, &h, &p2).unwrap();
        for e in 0..mesh.n_elements() {
            let (a, b) = (t1.tb0[e] - params.t_in, t2.tb0[e] - params.t_in);
            assert!((b - 2.0 * a).abs() <= 1e-9 * b.abs().max(1e-12));
            let (a, b) = (t1.t0[e] - params.t_in, t2.t0[e] - params.t_in);
            assert!((b - 2.0 * a).abs() <= 1e-9 * b.abs().max(1e-12));
        }
    }

    #[test]
    fn energy_is_conserved_and_heat_flows_upward() {
        let (mesh, params, flow) = small(10.0);
        let (k, h) = props(&mesh, &params, 8.0);
        let t = solve_thermal(&mesh, &flow, &k, &h, &params).unwrap();
        let r = energy_balance_residual(&mesh, &flow, &t, &params);
        assert!(r < 0.01, "energy residual {r}");
        let tol = 1e-9;
        for e in 0..mesh.n_elements() {
            if mesh.active[e] {
                assert!(t.t0[e] >= params.t_in - tol);
            }
            if mesh.heated[e] {
                assert!(t.tb0[e] >= t.t0[e] - tol);
            }
        }
    }

    #[test]
    fn uniform_strip_outlet_temperature() {
        // Plain channel with slip walls: every element row is a 1-D strip.
        let params = PhysicalParams {
            l_in: 0.05,
            ..Default::default()
        };
        let dom = DomainSettings {
            plenum_cells: 0,
            side_walls: WallCondition::Slip,
            ..Default::default()
        };
        let (_, bc, mesh) = build_domain(&params, &dom, 10.0).unwrap();
        let fl = params.fluid_limit();
        let settings = FlowSolveSettings::default();
        let flow = FlowSolver::new(&mesh, &bc, &params, &settings)
            .unwrap()
            .solve(
                &mesh,
                &vec![fl.alpha_f; mesh.n_elements()],
                &vec![0.0; mesh.n_elements()],
                &settings,
                None,
            )
            .unwrap()
            .state;
        let (k, h) = props(&mesh, &params, params.k_f);
        let t = solve_thermal(&mesh, &flow, &k, &h, &params).unwrap();
        let v = flow.u[mesh.u_face(0, 0)];
        let oracle = params.q_s * params.l_x / (params.rho_f * params.c_pf * 2.0 * params.h_t * v);
        for j in 0..mesh.ny {
            let rise = t.t0[mesh.elem(mesh.nx - 1, j)] - params.t_in;
            assert!(
                ((rise - oracle) / oracle).abs() < 0.01,
                "row {j}: {rise} vs {oracle}"
            );
        }
    }

    #[test]
    fn unconverged_flow_still_reports_a_balance() {
        let params = PhysicalParams {
            l_x: 0.02,
            l_y: 0.02,
            l_in: 5e-3,
            ..Default::default()
        };
        let (_, bc, mesh) = build_domain(&params, &DomainSettings::default(), 10.0).unwrap();
        let lay = crate::flow::FlowLayout::new(&mesh, &bc, &params, 1e-10).unwrap();
        let a = vec![3e4; mesh.n_elements()];
        let b = vec![2e5; mesh.n_elements()];
        // One Picard step from rest.
        let x0 = vec![0.0; lay.n_unknowns()];
        let asm = lay.assemble(&x0, &a, &b, crate::flow::Linearization::Picard, false);
        let lu = lay.pattern.factor(&asm.jacobian).unwrap();
        let mut dx: Vec<f64> = asm.residual.iter().map(|r| -r).collect();
        lu.solve(&mut dx).unwrap();
        let dx: Vec<f64> = dx.iter().map(|d| 0.3 * d).collect();
        let flow = lay.to_state(&mesh, &dx);
        let (k, h) = props(&mesh, &params, 5.0);
        let t = solve_thermal(&mesh, &flow, &k, &h, &params).unwrap();
        let r = energy_balance_residual(&mesh, &flow, &t, &params);
        assert!(r.is_finite());
    }

    #[test]
    fn jacobian_and_input_derivatives_match_differences() {
        let (mesh, params, flow) = small(10.0);
        let lay = ThermalLayout::new(&mesh, &params, 1e-10).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let k: Vec<f64> = (0..mesh.n_elements())
            .map(|_| 1.0 + 20.0 * rng.gen::<f64>())
            .collect();
        let h: Vec<f64> = (0..mesh.n_elements())
            .map(|_| 500.0 + 5e3 * rng.gen::<f64>())
            .collect();
        let theta: Vec<f64> = (0..2 * lay.n).map(|_| 30.0 * rng.gen::<f64>()).collect();
        let asm = lay.assemble(&theta, &flow, &k, &h, true);
        // Linear in theta: residual = J theta + r(0).
        let r0 = lay.residual(&vec![0.0; 2 * lay.n], &flow, &k, &h);
        let jt = lay.pattern.mul(&asm.jacobian, &theta);
        for i in 0..2 * lay.n {
            let lin = jt[i] + r0[i];
            assert!((lin - asm.residual[i]).abs() <= 1e-9 * asm.residual[i].abs().max(1.0));
        }
        let ij = asm.inputs.unwrap();
        let check = |trip: &[(usize, usize, f64)],
                     perturb: &dyn Fn(usize, f64) -> Vec<f64>,
                     id: usize,
                     step: f64| {
            let rp = perturb(id, step);
            let rm = perturb(id, -step);
            let mut an = vec![0.0; 2 * lay.n];
            for (r, i, v) in trip {
                if *i == id {
                    an[*r] += v;
                }
            }
            for r in 0..2 * lay.n {
                let fd = (rp[r] - rm[r]) / (2.0 * step);
                assert!(
                    (fd - an[r]).abs() <= 1e-6 * fd.abs().max(an[r].abs()).max(1e-9),
                    "row {r}: {fd} vs {}",
                    an[r]
                );
            }
        };
        for e in lay.elems.iter().step_by(7) {
            let pk = |e: usize, d: f64| {
                let mut kk = k.clone();
                kk[e] += d;
                lay.residual(&theta, &flow, &kk, &h)
            };
            check(&ij.k, &pk, *e, 1e-4);
            let ph = |e: usize, d: f64| {
                let mut hh = h.clone();
                hh[e] += d;
                lay.residual(&theta, &flow, &k, &hh)
            };
            check(&ij.h, &ph, *e, 1e-2);
        }
        let ids: Vec<usize> = ij.velocity.iter().map(|t| t.1).step_by(11).collect();
        for id in ids {
            let pv = |id: usize, d: f64| {
                let mut f = flow.clone();
                if id < lay.n_u_faces {
                    f.u[id] += d;
                } else {
                    f.v[id - lay.n_u_faces] += d;
                }
                lay.residual(&theta, &f, &k, &h)
            };
            check(&ij.velocity, &pv, id, 1e-6);
        }
    }

    #[test]
    fn profile_identities() {
        // Five-point Gauss-Legendre is exact for the degree-6 integrand.
        let nodes = [
            (0.0, 128.0 / 225.0),
            (
                -(5.0 - 2.0 * (10.0f64 / 7.0).sqrt()).sqrt() / 3.0,
                (322.0 + 13.0 * 70f64.sqrt()) / 900.0,
            ),
            (
                (5.0 - 2.0 * (10.0f64 / 7.0).sqrt()).sqrt() / 3.0,
                (322.0 + 13.0 * 70f64.sqrt()) / 900.0,
            ),
            (
                -(5.0 + 2.0 * (10.0f64 / 7.0).sqrt()).sqrt() / 3.0,
                (322.0 - 13.0 * 70f64.sqrt()) / 900.0,
            ),
            (
                (5.0 + 2.0 * (10.0f64 / 7.0).sqrt()).sqrt() / 3.0,
                (322.0 - 13.0 * 70f64.sqrt()) / 900.0,
            ),
        ];
        let mean: f64 = nodes
            .iter()
            .map(|(z, w)| w * bulk_weight(*z) * profile(*z))
            .sum::<f64>()
            / 2.0;
        assert!((mean - 1.0).abs() < 1e-12, "{mean}");
        assert!(profile(-1.0).abs() < 1e-12);
        assert!((profile(0.0) - 455.0 / 416.0).abs() < 1e-12);
        let wsum: f64 = nodes.iter().map(|(z, w)| w * bulk_weight(*z)).sum::<f64>() / 2.0;
        assert!((wsum - 1.0).abs() < 1e-12);
    }
}
