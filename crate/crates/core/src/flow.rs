//! Depth-averaged Darcy-Forchheimer flow on the staggered grid.
//!
//! Unknowns are the x-velocities on x-normal faces, the y-velocities on
//! y-normal faces and one pressure per active element, ordered in that
//! sequence. Each momentum row is evaluated by one generic kernel over a
//! fifteen-slot local stencil; running it on [`Jet`]s yields the row of the
//! Jacobian (and, for the adjoint, the derivatives with respect to the drag
//! coefficients of the adjacent elements).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BoundarySpec, FaceKind, FlowState, Mesh, PhysicalParams, WallCondition};
use crate::scalar::{Jet, Scalar};
use crate::sparse::{Factorization, Pattern};

/// Nonlinear solver controls.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowSolveSettings {
    /// Relative momentum and mass residual for convergence.
    pub nonlinear_tol: f64,
    /// Cap on the total number of nonlinear iterations.
    pub max_picard_iters: usize,
    /// Relaxation of Picard updates.
    pub under_relaxation: f64,
    /// Smoothing velocity inside `|v|`, m/s.
    pub velocity_regularization: f64,
    /// Relative momentum residual below which Newton steps replace Picard.
    pub newton_switch: f64,
}

impl Default for FlowSolveSettings {
    fn default() -> Self {
        Self {
            nonlinear_tol: 1e-6,
            max_picard_iters: 200,
            under_relaxation: 0.7,
            velocity_regularization: 1e-10,
            newton_switch: 1e-2,
        }
    }
}

impl FlowSolveSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.nonlinear_tol > 0.0) || self.max_picard_iters == 0 {
            return Err(Error::Config(
                "flow: nonlinear_tol > 0 and max_picard_iters >= 1 required".into(),
            ));
        }
        if !(self.under_relaxation > 0.0 && self.under_relaxation <= 1.0) {
            return Err(Error::Config(
                "flow: under_relaxation must lie in (0, 1]".into(),
            ));
        }
        if !(self.velocity_regularization > 0.0) || !(self.newton_switch >= 0.0) {
            return Err(Error::Config(
                "flow: velocity_regularization must be positive".into(),
            ));
        }
        Ok(())
    }
}

pub(crate) const NS: usize = 15;
pub(crate) type FJet = Jet<NS>;
const NONE: u8 = u8::MAX;

// Slot layout of a momentum stencil.
const S_P: usize = 0;
const S_AP: usize = 1;
const S_AM: usize = 2;
const S_CP: usize = 3;
const S_CM: usize = 4;
const S_T: usize = 5;
const S_PP: usize = 9;
const S_PM: usize = 10;
const S_ALPHA: usize = 11;
const S_BETA: usize = 13;

/// Affine reference `coef * x[slot] + off` to a stencil slot.
#[derive(Debug, Clone, Copy)]
struct Ref {
    slot: u8,
    coef: f64,
    off: f64,
}

impl Ref {
    fn var(slot: usize) -> Self {
        Self {
            slot: slot as u8,
            coef: 1.0,
            off: 0.0,
        }
    }
    fn fixed(v: f64) -> Self {
        Self {
            slot: NONE,
            coef: 0.0,
            off: v,
        }
    }
    fn ghost(slot: usize, coef: f64, off: f64) -> Self {
        Self {
            slot: slot as u8,
            coef,
            off,
        }
    }
    #[inline]
    fn get<T: Scalar>(&self, x: &[T; NS]) -> T {
        if self.slot == NONE {
            T::c(self.off)
        } else if self.coef == 1.0 && self.off == 0.0 {
            x[self.slot as usize]
        } else {
            x[self.slot as usize] * T::c(self.coef) + T::c(self.off)
        }
    }
}

#[derive(Debug, Clone)]
struct MomRow {
    /// Global unknown feeding each state slot (0..11).
    src: [Option<usize>; 11],
    /// Along-axis `+`, along-axis `-`, cross-axis `+`, cross-axis `-`.
    nb: [Ref; 4],
    /// Transverse velocities `[c-a-, c-a+, c+a-, c+a+]`.
    trans: [Ref; 4],
    p_plus: Ref,
    p_minus: Ref,
    elems: [usize; 2],
    n_elems: usize,
}

/// Physical constants entering the momentum kernel.
#[derive(Debug, Clone, Copy)]
pub(crate) struct MomConsts {
    pub rho6: f64,
    pub mu: f64,
    pub h: f64,
    pub eps_v: f64,
}

#[inline]
fn lag<T: Scalar>(v: T, picard: bool) -> T {
    if picard {
        T::c(v.re())
    } else {
        v
    }
}

/// Smoothed absolute value.
#[inline]
pub(crate) fn sabs<T: Scalar>(f: T, eps: f64) -> T {
    (f * f + T::c(eps * eps)).sqrt()
}

/// Momentum residual of one velocity face (area scaled).
fn momentum_kernel<T: Scalar>(x: &[T; NS], row: &MomRow, c: &MomConsts, picard: bool) -> T {
    let half = T::c(0.5);
    let h = T::c(c.h);
    let wp = x[S_P];
    let ap = row.nb[0].get(x);
    let am = row.nb[1].get(x);
    let cp = row.nb[2].get(x);
    let cm = row.nb[3].get(x);
    let t = [
        row.trans[0].get(x),
        row.trans[1].get(x),
        row.trans[2].get(x),
        row.trans[3].get(x),
    ];

    // Outward face fluxes of the control volume (per unit depth).
    let f_ap = lag((wp + ap) * half * h, picard);
    let f_am = lag(-(am + wp) * half * h, picard);
    let f_cp = lag((t[2] + t[3]) * half * h, picard);
    let f_cm = lag(-(t[0] + t[1]) * half * h, picard);
    let eps_f = c.eps_v * c.h;
    let mut conv = T::zero();
    for (f, nb) in [(f_ap, ap), (f_am, am), (f_cp, cp), (f_cm, cm)] {
        conv = conv + f * (wp + nb) * half + sabs(f, eps_f) * (wp - nb) * half;
    }
    let visc = T::c(c.mu) * (T::c(4.0) * wp - ap - am - cp - cm);
    let press = (row.p_plus.get(x) - row.p_minus.get(x)) * h;

    let (alpha, beta) = if row.n_elems == 2 {
        (
            (x[S_ALPHA] + x[S_ALPHA + 1]) * half,
            (x[S_BETA] + x[S_BETA + 1]) * half,
        )
    } else {
        (x[S_ALPHA], x[S_BETA])
    };
    let tm = (t[0] + t[1] + t[2] + t[3]) * T::c(0.25);
    let speed = lag((wp * wp + tm * tm + T::c(c.eps_v * c.eps_v)).sqrt(), picard);
    let drag = h * h * (alpha * wp + beta * speed * wp);
    T::c(c.rho6) * conv + visc + press + drag
}

/// Evaluation mode of an assembly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Linearization {
    /// Advecting velocity and drag speed lagged at the current iterate.
    Picard,
    /// Exact Jacobian.
    Newton,
}

/// Derivatives of the residual rows with respect to element coefficients,
/// as `(row, element, value)` triplets.
#[derive(Debug, Clone, Default)]
pub struct CoefficientJacobian {
    pub alpha: Vec<(usize, usize, f64)>,
    pub beta: Vec<(usize, usize, f64)>,
}

/// Residual and Jacobian values in pattern order.
pub struct Assembly {
    pub residual: Vec<f64>,
    pub jacobian: Vec<f64>,
    pub coefficients: Option<CoefficientJacobian>,
}

/// Unknown numbering and stencils of a mesh.
#[derive(Debug)]
pub struct FlowLayout {
    pub n_u: usize,
    pub n_v: usize,
    pub n_p: usize,
    /// Unknown index of every x-normal face.
    pub u_index: Vec<Option<usize>>,
    /// Unknown index of every y-normal face.
    pub v_index: Vec<Option<usize>>,
    /// Unknown index of every element's pressure.
    pub p_index: Vec<Option<usize>>,
    u_faces: Vec<usize>,
    v_faces: Vec<usize>,
    p_elems: Vec<usize>,
    rows: Vec<MomRow>,
    /// Continuity stencils: `(unknown, sign)` for up to four faces.
    cont: Vec<[(Option<usize>, f64); 4]>,
    /// Pattern position of each momentum row's own unknown.
    diag_pos: Vec<usize>,
    pub pattern: Pattern,
    consts: MomConsts,
    p_in: f64,
    p_out: f64,
}

impl FlowLayout {
    pub fn new(
        mesh: &Mesh,
        bc: &BoundarySpec,
        params: &PhysicalParams,
        eps_v: f64,
    ) -> Result<Self> {
        let (nx, ny) = (mesh.nx, mesh.ny);
        let mut u_index = vec![None; (nx + 1) * ny];
        let mut u_faces = Vec::new();
        for (f, k) in mesh.u_kind.iter().enumerate() {
            if matches!(k, FaceKind::Interior | FaceKind::Inlet | FaceKind::Outlet) {
                u_index[f] = Some(u_faces.len());
                u_faces.push(f);
            }
        }
        let n_u = u_faces.len();
        let mut v_index = vec![None; nx * (ny + 1)];
        let mut v_faces = Vec::new();
        for (f, k) in mesh.v_kind.iter().enumerate() {
            if *k == FaceKind::Interior {
                v_index[f] = Some(n_u + v_faces.len());
                v_faces.push(f);
            }
        }
        let n_v = v_faces.len();
        let mut p_index = vec![None; nx * ny];
        let mut p_elems = Vec::new();
        for (e, a) in mesh.active.iter().enumerate() {
            if *a {
                p_index[e] = Some(n_u + n_v + p_elems.len());
                p_elems.push(e);
            }
        }
        let n_p = p_elems.len();
        let wall = match bc.walls {
            WallCondition::NoSlip => -1.0,
            WallCondition::Slip => 1.0,
        };

        let mut rows = Vec::with_capacity(n_u + n_v);
        for &f in &u_faces {
            rows.push(u_row(mesh, &u_index, &v_index, &p_index, f, wall, bc));
        }
        for &f in &v_faces {
            rows.push(v_row(mesh, &u_index, &v_index, &p_index, f, wall));
        }

        let h = mesh.h;
        let mut cont = Vec::with_capacity(n_p);
        for &e in &p_elems {
            let (i, j) = (e % nx, e / nx);
            cont.push([
                (u_index[mesh.u_face(i + 1, j)], h),
                (u_index[mesh.u_face(i, j)], -h),
                (v_index[mesh.v_face(i, j + 1)], h),
                (v_index[mesh.v_face(i, j)], -h),
            ]);
        }

        let mut entries = Vec::new();
        let mut diag_pos = Vec::with_capacity(rows.len());
        for (r, row) in rows.iter().enumerate() {
            diag_pos.push(entries.len());
            for s in row.src.iter().flatten() {
                entries.push((r, *s));
            }
        }
        for (k, c) in cont.iter().enumerate() {
            for (s, _) in c {
                if let Some(s) = s {
                    entries.push((n_u + n_v + k, *s));
                }
            }
        }
        let pattern = Pattern::new(n_u + n_v + n_p, &entries)?;
        Ok(Self {
            n_u,
            n_v,
            n_p,
            u_index,
            v_index,
            p_index,
            u_faces,
            v_faces,
            p_elems,
            rows,
            cont,
            diag_pos,
            pattern,
            consts: MomConsts {
                rho6: 1.2 * params.rho_f,
                mu: params.mu_f,
                h,
                eps_v,
            },
            p_in: bc.p_in,
            p_out: bc.p_out,
        })
    }

    pub fn n_unknowns(&self) -> usize {
        self.n_u + self.n_v + self.n_p
    }

    pub fn n_momentum(&self) -> usize {
        self.n_u + self.n_v
    }

    pub fn to_state(&self, mesh: &Mesh, x: &[f64]) -> FlowState {
        let mut s = FlowState::zeros(mesh);
        for (k, f) in self.u_faces.iter().enumerate() {
            s.u[*f] = x[k];
        }
        for (k, f) in self.v_faces.iter().enumerate() {
            s.v[*f] = x[self.n_u + k];
        }
        for (k, e) in self.p_elems.iter().enumerate() {
            s.p[*e] = x[self.n_u + self.n_v + k];
        }
        s
    }

    pub fn from_state(&self, s: &FlowState) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.n_unknowns());
        x.extend(self.u_faces.iter().map(|f| s.u[*f]));
        x.extend(self.v_faces.iter().map(|f| s.v[*f]));
        x.extend(self.p_elems.iter().map(|e| s.p[*e]));
        x
    }

    fn gather<T: Scalar>(
        &self,
        row: &MomRow,
        x: &[f64],
        alpha: &[f64],
        beta: &[f64],
        seed: bool,
    ) -> [T; NS]
    where
        T: From<LocalSeed>,
    {
        let mut out = [T::zero(); NS];
        for (k, s) in row.src.iter().enumerate() {
            let v = s.map_or(0.0, |s| x[s]);
            out[k] = <T as From<LocalSeed>>::from(LocalSeed { v, slot: k, seed });
        }
        for m in 0..2 {
            let e = row.elems[m.min(row.n_elems - 1)];
            out[S_ALPHA + m] = <T as From<LocalSeed>>::from(LocalSeed {
                v: alpha[e],
                slot: S_ALPHA + m,
                seed,
            });
            out[S_BETA + m] = <T as From<LocalSeed>>::from(LocalSeed {
                v: beta[e],
                slot: S_BETA + m,
                seed,
            });
        }
        out
    }

    /// Residual only.
    pub fn residual(&self, x: &[f64], alpha: &[f64], beta: &[f64]) -> Vec<f64> {
        let mut r = Vec::with_capacity(self.n_unknowns());
        for row in &self.rows {
            let loc: [f64; NS] = self.gather(row, x, alpha, beta, false);
            r.push(momentum_kernel(&loc, row, &self.consts, false));
        }
        for c in &self.cont {
            r.push(c.iter().map(|(s, w)| s.map_or(0.0, |s| w * x[s])).sum());
        }
        r
    }

    /// Residual, Jacobian in pattern order and, on request, coefficient
    /// derivatives.
    pub fn assemble(
        &self,
        x: &[f64],
        alpha: &[f64],
        beta: &[f64],
        mode: Linearization,
        coefficients: bool,
    ) -> Assembly {
        let picard = mode == Linearization::Picard;
        let mut residual = Vec::with_capacity(self.n_unknowns());
        let mut jacobian = Vec::with_capacity(self.pattern.len());
        let mut cj = CoefficientJacobian::default();
        for (r, row) in self.rows.iter().enumerate() {
            let loc: [FJet; NS] = self.gather(row, x, alpha, beta, true);
            let res = momentum_kernel(&loc, row, &self.consts, picard);
            residual.push(res.v);
            for (k, s) in row.src.iter().enumerate() {
                if s.is_some() {
                    jacobian.push(res.d[k]);
                }
            }
            if coefficients {
                for m in 0..row.n_elems {
                    let e = row.elems[m];
                    cj.alpha.push((r, e, res.d[S_ALPHA + m]));
                    cj.beta.push((r, e, res.d[S_BETA + m]));
                }
            }
        }
        for c in &self.cont {
            residual.push(c.iter().map(|(s, w)| s.map_or(0.0, |s| w * x[s])).sum());
            for (s, w) in c {
                if s.is_some() {
                    jacobian.push(*w);
                }
            }
        }
        Assembly {
            residual,
            jacobian,
            coefficients: coefficients.then_some(cj),
        }
    }

    /// Flow rate through the inlet faces of the meshed domain, m^2/s.
    pub fn inlet_flux(&self, mesh: &Mesh, s: &FlowState) -> f64 {
        (0..mesh.ny)
            .filter(|j| mesh.u_kind[mesh.u_face(0, *j)] == FaceKind::Inlet)
            .map(|j| s.u[mesh.u_face(0, j)] * mesh.h)
            .sum()
    }

    pub fn outlet_flux(&self, mesh: &Mesh, s: &FlowState) -> f64 {
        (0..mesh.ny)
            .filter(|j| mesh.u_kind[mesh.u_face(mesh.nx, *j)] == FaceKind::Outlet)
            .map(|j| s.u[mesh.u_face(mesh.nx, j)] * mesh.h)
            .sum()
    }

    fn norms(&self, r: &[f64], x: &[f64]) -> (f64, f64) {
        let nm = self.n_momentum();
        let mom: f64 = r[..nm].iter().map(|v| v * v).sum::<f64>().sqrt();
        let mass: f64 = r[nm..].iter().map(|v| v * v).sum::<f64>().sqrt();
        // Pressure force scale of the momentum rows.
        let mut ps = 0.0;
        for row in &self.rows {
            let mut loc = [0.0; NS];
            for (k, s) in row.src.iter().enumerate() {
                loc[k] = s.map_or(0.0, |s| x[s]);
            }
            let d = (row.p_plus.get(&loc) - row.p_minus.get(&loc)) * self.consts.h;
            ps += d * d;
        }
        let vel: f64 = x[..nm].iter().map(|v| v * v).sum::<f64>().sqrt() * self.consts.h;
        let tiny = 1e-300;
        (mom / ps.sqrt().max(tiny), mass / vel.max(tiny))
    }
}

/// Scalar wrapper used by `gather` to build either plain values or seeded jets.
pub(crate) struct LocalSeed {
    v: f64,
    slot: usize,
    seed: bool,
}

impl From<LocalSeed> for f64 {
    fn from(s: LocalSeed) -> f64 {
        s.v
    }
}

impl From<LocalSeed> for FJet {
    fn from(s: LocalSeed) -> FJet {
        if s.seed {
            FJet::var(s.v, s.slot)
        } else {
            FJet::constant(s.v)
        }
    }
}

fn known_u(kind: FaceKind) -> bool {
    matches!(
        kind,
        FaceKind::Interior | FaceKind::Inlet | FaceKind::Outlet
    )
}

fn u_row(
    mesh: &Mesh,
    u_index: &[Option<usize>],
    v_index: &[Option<usize>],
    p_index: &[Option<usize>],
    f: usize,
    wall: f64,
    bc: &BoundarySpec,
) -> MomRow {
    let (nx, ny) = (mesh.nx, mesh.ny);
    let (i, j) = (f % (nx + 1), f / (nx + 1));
    let mut src = [None; 11];
    src[S_P] = u_index[f];

    let along = |slot: usize, ii: Option<usize>, src: &mut [Option<usize>; 11]| -> Ref {
        match ii {
            Some(ii) => {
                let g = mesh.u_face(ii, j);
                if known_u(mesh.u_kind[g]) {
                    src[slot] = u_index[g];
                    Ref::var(slot)
                } else {
                    Ref::fixed(0.0)
                }
            }
            // Pressure boundary: zero normal gradient.
            None => Ref::ghost(S_P, 1.0, 0.0),
        }
    };
    let ap = along(S_AP, (i < nx).then(|| i + 1), &mut src);
    let am = along(S_AM, (i > 0).then(|| i - 1), &mut src);

    let cross =
        |slot: usize, jj: Option<usize>, edge_coef: f64, src: &mut [Option<usize>; 11]| -> Ref {
            match jj {
                Some(jj) => {
                    let g = mesh.u_face(i, jj);
                    match mesh.u_kind[g] {
                        k if known_u(k) => {
                            src[slot] = u_index[g];
                            Ref::var(slot)
                        }
                        FaceKind::Wall => Ref::fixed(0.0),
                        _ => Ref::ghost(S_P, wall, 0.0),
                    }
                }
                None => Ref::ghost(S_P, edge_coef, 0.0),
            }
        };
    let cp = cross(S_CP, (j + 1 < ny).then(|| j + 1), wall, &mut src);
    let bottom = if mesh.symmetry { 1.0 } else { wall };
    let cm = cross(S_CM, (j > 0).then(|| j - 1), bottom, &mut src);

    let tv = |slot: usize, ii: usize, jj: usize, src: &mut [Option<usize>; 11]| -> Ref {
        let g = mesh.v_face(ii, jj);
        if mesh.v_kind[g] == FaceKind::Interior {
            src[slot] = v_index[g];
            Ref::var(slot)
        } else {
            Ref::fixed(0.0)
        }
    };
    let mut trans = [Ref::fixed(0.0); 4];
    if i > 0 {
        trans[0] = tv(S_T, i - 1, j, &mut src);
        trans[2] = tv(S_T + 2, i - 1, j + 1, &mut src);
    }
    if i < nx {
        trans[1] = tv(S_T + 1, i, j, &mut src);
        trans[3] = tv(S_T + 3, i, j + 1, &mut src);
    }
    if i == 0 {
        trans[0] = trans[1];
        trans[2] = trans[3];
    }
    if i == nx {
        trans[1] = trans[0];
        trans[3] = trans[2];
    }

    let mut elems = [0usize; 2];
    let mut n_elems = 0;
    let (p_plus, p_minus);
    if i < nx {
        let e = mesh.elem(i, j);
        src[S_PP] = p_index[e];
        p_plus = Ref::var(S_PP);
        elems[n_elems] = e;
        n_elems += 1;
    } else {
        p_plus = Ref::ghost(S_PM, -1.0, 2.0 * bc.p_out);
    }
    if i > 0 {
        let e = mesh.elem(i - 1, j);
        src[S_PM] = p_index[e];
        p_minus = Ref::var(S_PM);
        elems[n_elems] = e;
        n_elems += 1;
    } else {
        p_minus = Ref::ghost(S_PP, -1.0, 2.0 * bc.p_in);
    }
    if n_elems == 1 {
        elems[1] = elems[0];
    }
    MomRow {
        src,
        nb: [ap, am, cp, cm],
        trans,
        p_plus,
        p_minus,
        elems,
        n_elems,
    }
}

fn v_row(
    mesh: &Mesh,
    u_index: &[Option<usize>],
    v_index: &[Option<usize>],
    p_index: &[Option<usize>],
    f: usize,
    wall: f64,
) -> MomRow {
    let nx = mesh.nx;
    let (i, j) = (f % nx, f / nx);
    let mut src = [None; 11];
    src[S_P] = v_index[f];

    let along = |slot: usize, jj: usize, src: &mut [Option<usize>; 11]| -> Ref {
        let g = mesh.v_face(i, jj);
        if mesh.v_kind[g] == FaceKind::Interior {
            src[slot] = v_index[g];
            Ref::var(slot)
        } else {
            Ref::fixed(0.0)
        }
    };
    let ap = along(S_AP, j + 1, &mut src);
    let am = along(S_AM, j - 1, &mut src);

    // Beyond the first or last column the boundary is either a pressure
    // segment (zero gradient) or a wall.
    let edge = |col: usize| -> f64 {
        let k0 = mesh.u_kind[mesh.u_face(col, j - 1)];
        let k1 = mesh.u_kind[mesh.u_face(col, j)];
        let open = |k: FaceKind| matches!(k, FaceKind::Inlet | FaceKind::Outlet);
        if open(k0) && open(k1) {
            1.0
        } else {
            wall
        }
    };
    let cross =
        |slot: usize, ii: Option<usize>, edge_coef: f64, src: &mut [Option<usize>; 11]| -> Ref {
            match ii {
                Some(ii) => {
                    let g = mesh.v_face(ii, j);
                    match mesh.v_kind[g] {
                        FaceKind::Interior => {
                            src[slot] = v_index[g];
                            Ref::var(slot)
                        }
                        FaceKind::Wall | FaceKind::Symmetry => Ref::fixed(0.0),
                        _ => Ref::ghost(S_P, wall, 0.0),
                    }
                }
                None => Ref::ghost(S_P, edge_coef, 0.0),
            }
        };
    let cp = cross(S_CP, (i + 1 < nx).then(|| i + 1), edge(nx), &mut src);
    let cm = cross(S_CM, (i > 0).then(|| i - 1), edge(0), &mut src);

    let tu = |slot: usize, ii: usize, jj: usize, src: &mut [Option<usize>; 11]| -> Ref {
        let g = mesh.u_face(ii, jj);
        if known_u(mesh.u_kind[g]) {
            src[slot] = u_index[g];
            Ref::var(slot)
        } else {
            Ref::fixed(0.0)
        }
    };
    let trans = [
        tu(S_T, i, j - 1, &mut src),
        tu(S_T + 1, i, j, &mut src),
        tu(S_T + 2, i + 1, j - 1, &mut src),
        tu(S_T + 3, i + 1, j, &mut src),
    ];
    let (eu, el) = (mesh.elem(i, j), mesh.elem(i, j - 1));
    src[S_PP] = p_index[eu];
    src[S_PM] = p_index[el];
    MomRow {
        src,
        nb: [ap, am, cp, cm],
        trans,
        p_plus: Ref::var(S_PP),
        p_minus: Ref::var(S_PM),
        elems: [el, eu],
        n_elems: 2,
    }
}

/// Picard iterations tried before switching to pseudo-time Newton.
const PICARD_BUDGET: usize = 30;

#[derive(Debug, Clone, Copy)]
enum Phase {
    Picard,
    Newton,
    Pseudo { dt: f64, prev: f64 },
}

/// Converged flow field with solver diagnostics.
#[derive(Debug, Clone)]
pub struct FlowSolution {
    pub state: FlowState,
    /// Unknown vector in layout order.
    pub x: Vec<f64>,
    pub iterations: usize,
    pub residual_mom: f64,
    pub residual_mass: f64,
    /// `(iteration, momentum residual, mass residual)` per iteration.
    pub history: Vec<(usize, f64, f64)>,
}

/// Flow solver bound to one mesh and boundary layout.
#[derive(Debug)]
pub struct FlowSolver {
    pub layout: FlowLayout,
}

impl FlowSolver {
    pub fn new(
        mesh: &Mesh,
        bc: &BoundarySpec,
        params: &PhysicalParams,
        settings: &FlowSolveSettings,
    ) -> Result<Self> {
        settings.validate()?;
        Ok(Self {
            layout: FlowLayout::new(mesh, bc, params, settings.velocity_regularization)?,
        })
    }

    /// Solve for the flow given per-element drag coefficients. `warm` is an
    /// optional starting unknown vector.
    pub fn solve(
        &self,
        mesh: &Mesh,
        alpha: &[f64],
        beta: &[f64],
        settings: &FlowSolveSettings,
        warm: Option<&[f64]>,
    ) -> Result<FlowSolution> {
        let lay = &self.layout;
        let n = lay.n_unknowns();
        if alpha.len() != mesh.n_elements() || beta.len() != mesh.n_elements() {
            return Err(Error::SizeMismatch {
                expected: mesh.n_elements(),
                got: alpha.len().min(beta.len()),
            });
        }
        if mesh
            .active
            .iter()
            .zip(alpha.iter().zip(beta))
            .any(|(a, (al, be))| *a && (!(*al > 0.0) || !(*be >= 0.0)))
        {
            return Err(Error::OutOfRange(
                "drag coefficients must satisfy alpha > 0, beta >= 0".into(),
            ));
        }
        let mut x = match warm {
            Some(w) if w.len() == n => w.to_vec(),
            _ => vec![0.0; n],
        };
        let mut history = Vec::new();
        if lay.p_in == lay.p_out && warm.is_none() {
            let r = lay.residual(&x, alpha, beta);
            if r.iter().all(|v| *v == 0.0) {
                return Ok(FlowSolution {
                    state: lay.to_state(mesh, &x),
                    x,
                    iterations: 0,
                    residual_mom: 0.0,
                    residual_mass: 0.0,
                    history,
                });
            }
        }

        // Picard steps are robust for drag-dominated fields and Newton finishes
        // quadratically. Inertia-dominated fields that make Picard cycle fall
        // back to Newton with a pseudo-time shift on the momentum rows, grown
        // as the residual drops (switched evolution relaxation).
        let mut phase = Phase::Picard;
        let mut picard_steps = 0;
        let mut last = (f64::INFINITY, f64::INFINITY);
        let mut best = (f64::INFINITY, x.clone());
        let mass = self.layout.consts.rho6 * self.layout.consts.h * self.layout.consts.h;
        for it in 0..=settings.max_picard_iters {
            let mode = match phase {
                Phase::Picard => Linearization::Picard,
                _ => Linearization::Newton,
            };
            let mut asm = lay.assemble(&x, alpha, beta, mode, false);
            let (rm, rc) = lay.norms(&asm.residual, &x);
            history.push((it, rm, rc));
            log::trace!("flow {it} {phase:?}: momentum {rm:.3e} mass {rc:.3e}");
            if rm < settings.nonlinear_tol && rc < settings.nonlinear_tol {
                return Ok(FlowSolution {
                    state: lay.to_state(mesh, &x),
                    x,
                    iterations: it,
                    residual_mom: rm,
                    residual_mass: rc,
                    history,
                });
            }
            if it == settings.max_picard_iters {
                last = (rm, rc);
                break;
            }
            let r = rm.max(rc);
            if r.is_finite() && r < best.0 {
                best = (r, x.clone());
            }

            match phase {
                Phase::Picard => {
                    picard_steps += 1;
                    if !r.is_finite() || picard_steps > PICARD_BUDGET {
                        phase = Phase::Pseudo {
                            dt: 0.0,
                            prev: f64::INFINITY,
                        };
                        x = best.1.clone();
                        last = (rm, rc);
                        continue;
                    }
                }
                Phase::Pseudo {
                    ref mut dt,
                    ref mut prev,
                } => {
                    if !r.is_finite() || r > 1e3 * best.0 {
                        x = best.1.clone();
                        *dt *= 0.1;
                        *prev = f64::INFINITY;
                        last = (rm, rc);
                        continue;
                    }
                    if *dt == 0.0 {
                        let diag: f64 = lay
                            .diag_pos
                            .iter()
                            .map(|p| asm.jacobian[*p].abs())
                            .sum::<f64>()
                            / lay.diag_pos.len().max(1) as f64;
                        *dt = mass / diag.max(1e-300);
                    } else if r < *prev {
                        *dt *= 2.0;
                    } else {
                        *dt *= 0.5;
                    }
                    *prev = r;
                    for p in &lay.diag_pos {
                        asm.jacobian[*p] += mass / *dt;
                    }
                }
                Phase::Newton => {}
            }
            last = (rm, rc);

            let lu = lay.pattern.factor(&asm.jacobian)?;
            let mut dx: Vec<f64> = asm.residual.iter().map(|r| -r).collect();
            lu.solve(&mut dx)?;
            match phase {
                Phase::Picard => {
                    for (xi, d) in x.iter_mut().zip(&dx) {
                        *xi += settings.under_relaxation * d;
                    }
                    if rm < settings.newton_switch {
                        phase = Phase::Newton;
                    }
                }
                Phase::Pseudo { .. } => {
                    for (xi, d) in x.iter_mut().zip(&dx) {
                        *xi += d;
                    }
                }
                Phase::Newton => {
                    // Backtracking on the scaled residual norm.
                    let merit = |r: &[f64], x: &[f64]| {
                        let (a, b) = lay.norms(r, x);
                        a * a + b * b
                    };
                    let m0 = merit(&asm.residual, &x);
                    let mut step = 1.0;
                    let mut accepted = false;
                    for _ in 0..10 {
                        let trial: Vec<f64> =
                            x.iter().zip(&dx).map(|(a, d)| a + step * d).collect();
                        let rt = lay.residual(&trial, alpha, beta);
                        if merit(&rt, &trial) < (1.0 - 1e-4 * step) * m0 {
                            x = trial;
                            accepted = true;
                            break;
                        }
                        step *= 0.5;
                    }
                    if !accepted {
                        log::debug!("flow: Newton line search failed at iteration {it}");
                        phase = Phase::Pseudo {
                            dt: 0.0,
                            prev: f64::INFINITY,
                        };
                    }
                }
            }
        }
        Err(Error::NotConverged {
            iterations: settings.max_picard_iters,
            residual: last.0.max(last.1),
        })
    }

    /// Factorization of the exact Jacobian at `x`, with coefficient
    /// derivatives.
    pub fn exact_jacobian(
        &self,
        x: &[f64],
        alpha: &[f64],
        beta: &[f64],
    ) -> Result<(Factorization, Assembly)> {
        let asm = self
            .layout
            .assemble(x, alpha, beta, Linearization::Newton, true);
        let lu = self.layout.pattern.factor(&asm.jacobian)?;
        Ok((lu, asm))
    }
}

/// One-shot flow solve.
pub fn solve_flow(
    mesh: &Mesh,
    alpha: &[f64],
    beta: &[f64],
    bc: &BoundarySpec,
    params: &PhysicalParams,
    settings: &FlowSolveSettings,
) -> Result<FlowState> {
    let solver = FlowSolver::new(mesh, bc, params, settings)?;
    Ok(solver.solve(mesh, alpha, beta, settings, None)?.state)
}

/// Area-averaged inlet velocity over the full inlet width.
pub fn inlet_mean_velocity(mesh: &Mesh, s: &FlowState, bc: &BoundarySpec) -> f64 {
    let flux: f64 = (0..mesh.ny)
        .filter(|j| mesh.u_kind[mesh.u_face(0, *j)] == FaceKind::Inlet)
        .map(|j| s.u[mesh.u_face(0, j)] * mesh.h)
        .sum();
    flux / bc.inlet.length()
}

/// Write `iter,residual_mom,residual_mass`.
pub fn write_residual_log(path: &Path, history: &[(usize, f64, f64)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::parse(path, e.to_string()))?;
    w.write_record(["iter", "residual_mom", "residual_mass"])
        .map_err(|e| Error::parse(path, e.to_string()))?;
    for r in history {
        w.serialize(r)
            .map_err(|e| Error::parse(path, e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
