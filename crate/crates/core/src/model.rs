//! Domain discretization, field containers and the design-to-mesh mapping.
//!
//! The mesh is a uniform Cartesian grid over the bounding box of the design
//! domain plus the inlet and outlet ducts. Elements outside the fluid region
//! are flagged inactive. With `symmetry` on only the upper half (`y >= 0`) is
//! meshed and `y = 0` is the inlet-outlet centerline.

use std::io::Write;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::materials::FluidLimit;

/// Material constants and dimensions of the heat sink (SI units).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhysicalParams {
    /// Fluid viscosity, Pa s.
    pub mu_f: f64,
    /// Fluid density, kg/m^3.
    pub rho_f: f64,
    /// Fluid conductivity, W/(m K).
    pub k_f: f64,
    /// Fluid heat capacity, J/(kg K).
    pub c_pf: f64,
    /// Solid conductivity (lattice and base plate), W/(m K).
    pub k_s: f64,
    /// Solid density, kg/m^3. Unused by the steady model.
    pub rho_s: f64,
    /// Solid heat capacity, J/(kg K). Unused by the steady model.
    pub c_ps: f64,
    /// Heat flux into the base plate, W/m^2.
    pub q_s: f64,
    /// Inlet temperature, K.
    pub t_in: f64,
    /// Half-thickness of the fluid/lattice layer, m.
    pub h_t: f64,
    /// Half-thickness of the base plate, m.
    pub h_b: f64,
    /// Design-domain length along the flow, m.
    pub l_x: f64,
    /// Design-domain width, m.
    pub l_y: f64,
    /// Inlet and outlet width, m.
    pub l_in: f64,
}

impl Default for PhysicalParams {
    fn default() -> Self {
        Self {
            mu_f: 1.004e-3,
            rho_f: 998.0,
            k_f: 0.598,
            c_pf: 4180.0,
            k_s: 100.0,
            rho_s: 2000.0,
            c_ps: 900.0,
            q_s: 1.0e5,
            t_in: 293.15,
            h_t: 2.5e-3,
            h_b: 0.5e-3,
            l_x: 0.05,
            l_y: 0.05,
            l_in: 5.0e-3,
        }
    }
}

impl PhysicalParams {
    pub fn validate(&self) -> Result<()> {
        let named = [
            ("mu_f", self.mu_f),
            ("rho_f", self.rho_f),
            ("k_f", self.k_f),
            ("c_pf", self.c_pf),
            ("k_s", self.k_s),
            ("rho_s", self.rho_s),
            ("c_ps", self.c_ps),
            ("t_in", self.t_in),
            ("h_t", self.h_t),
            ("h_b", self.h_b),
            ("l_x", self.l_x),
            ("l_y", self.l_y),
            ("l_in", self.l_in),
        ];
        for (name, v) in named {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!(
                    "physics.{name} must be positive (got {v})"
                )));
            }
        }
        if !(self.q_s >= 0.0 && self.q_s.is_finite()) {
            return Err(Error::Config(format!(
                "physics.q_s must be non-negative (got {})",
                self.q_s
            )));
        }
        Ok(())
    }

    pub fn fluid_limit(&self) -> FluidLimit<f64> {
        FluidLimit::new(self.mu_f, self.k_f, self.h_t)
    }

    /// Temperature drop across the lower half of the base plate.
    pub fn base_offset(&self) -> f64 {
        self.q_s * self.h_b / self.k_s
    }
}

/// Velocity condition on impermeable walls.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WallCondition {
    NoSlip,
    Slip,
}

/// Discretization settings of the domain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DomainSettings {
    /// Lattice unit cell edge, m.
    pub cell_size: f64,
    /// Elements per unit-cell edge.
    pub mesh_refinement: usize,
    /// Depth of the inlet and outlet ducts, in unit cells.
    pub plenum_cells: usize,
    /// Mesh only the upper half about the inlet-outlet centerline.
    pub symmetry: bool,
    pub side_walls: WallCondition,
}

impl Default for DomainSettings {
    fn default() -> Self {
        Self {
            cell_size: 2.5e-3,
            mesh_refinement: 4,
            plenum_cells: 1,
            symmetry: true,
            side_walls: WallCondition::NoSlip,
        }
    }
}

/// Unit cells of the design domain and their element membership.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitGrid {
    pub cell_size: f64,
    pub n_cells_x: usize,
    /// Rows of unit cells actually meshed (half the width with symmetry on).
    pub n_cells_y: usize,
    pub mesh_refinement: usize,
    pub symmetry: bool,
    /// Unit cell of every mesh element, `None` outside the design domain.
    pub cell_of_element: Vec<Option<usize>>,
}

impl UnitGrid {
    pub fn n_cells(&self) -> usize {
        self.n_cells_x * self.n_cells_y
    }

    pub fn cell_area(&self) -> f64 {
        self.cell_size * self.cell_size
    }

    /// Area of the meshed design domain.
    pub fn design_area(&self) -> f64 {
        self.n_cells() as f64 * self.cell_area()
    }

    pub fn elements_per_cell(&self) -> usize {
        self.mesh_refinement * self.mesh_refinement
    }

    pub fn cell_index(&self, ix: usize, iy: usize) -> usize {
        iy * self.n_cells_x + ix
    }

    pub fn cell_coords(&self, c: usize) -> (usize, usize) {
        (c % self.n_cells_x, c / self.n_cells_x)
    }

    /// Cell whose position is mirrored about the domain centerline. Only
    /// meaningful for full-width grids.
    pub fn mirror_cell(&self, c: usize) -> usize {
        let (ix, iy) = self.cell_coords(c);
        self.cell_index(ix, self.n_cells_y - 1 - iy)
    }
}

/// Kind of a velocity face of the staggered grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaceKind {
    /// Between two active elements.
    Interior,
    /// On the inlet segment (pressure prescribed).
    Inlet,
    /// On the outlet segment (pressure prescribed).
    Outlet,
    /// Impermeable wall.
    Wall,
    /// Centerline of a half-domain mesh.
    Symmetry,
    /// Not adjacent to any active element.
    Outside,
}

/// Straight boundary segment at constant `x`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    pub x: f64,
    pub y0: f64,
    pub y1: f64,
}

impl Segment {
    pub fn length(&self) -> f64 {
        self.y1 - self.y0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundarySpec {
    /// Inlet pressure, Pa (outlet is at 0 Pa).
    pub p_in: f64,
    pub p_out: f64,
    pub t_in: f64,
    pub inlet: Segment,
    pub outlet: Segment,
    pub walls: WallCondition,
    pub symmetry: bool,
    /// Full inlet width, m (twice the meshed inlet with symmetry on).
    pub inlet_width: f64,
}

/// Structured mesh over the bounding box of the fluid region.
#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    pub nx: usize,
    pub ny: usize,
    /// Element edge, m.
    pub h: f64,
    /// Lower-left corner of the bounding box.
    pub x0: f64,
    pub y0: f64,
    pub active: Vec<bool>,
    /// Elements that belong to the heated design domain.
    pub heated: Vec<bool>,
    pub inlet_rows: Range<usize>,
    /// Element columns occupied by the design domain.
    pub design_cols: Range<usize>,
    /// Kinds of x-normal faces, `(nx + 1) * ny`, index `j * (nx + 1) + i`.
    pub u_kind: Vec<FaceKind>,
    /// Kinds of y-normal faces, `nx * (ny + 1)`, index `j * nx + i`.
    pub v_kind: Vec<FaceKind>,
    pub walls: WallCondition,
    pub symmetry: bool,
}

impl Mesh {
    pub fn n_elements(&self) -> usize {
        self.nx * self.ny
    }

    #[inline]
    pub fn elem(&self, i: usize, j: usize) -> usize {
        j * self.nx + i
    }

    #[inline]
    pub fn u_face(&self, i: usize, j: usize) -> usize {
        j * (self.nx + 1) + i
    }

    #[inline]
    pub fn v_face(&self, i: usize, j: usize) -> usize {
        j * self.nx + i
    }

    #[inline]
    pub fn is_active(&self, i: isize, j: isize) -> bool {
        i >= 0
            && j >= 0
            && (i as usize) < self.nx
            && (j as usize) < self.ny
            && self.active[self.elem(i as usize, j as usize)]
    }

    pub fn element_area(&self) -> f64 {
        self.h * self.h
    }

    pub fn centre(&self, e: usize) -> (f64, f64) {
        let (i, j) = (e % self.nx, e / self.nx);
        (
            self.x0 + (i as f64 + 0.5) * self.h,
            self.y0 + (j as f64 + 0.5) * self.h,
        )
    }

    pub fn n_active(&self) -> usize {
        self.active.iter().filter(|a| **a).count()
    }
}

fn whole_multiple(len: f64, unit: f64, what: &str) -> Result<usize> {
    let n = len / unit;
    let r = n.round();
    if r < 1.0 || (n - r).abs() > 1e-9 * n.max(1.0) {
        return Err(Error::Dimension(format!(
            "{what}: {len} m is not a whole multiple of {unit} m"
        )));
    }
    Ok(r as usize)
}

/// Build the unit grid, boundary layout and mesh.
pub fn build_domain(
    params: &PhysicalParams,
    dom: &DomainSettings,
    p_in: f64,
) -> Result<(UnitGrid, BoundarySpec, Mesh)> {
    params.validate()?;
    if !(dom.cell_size > 0.0) || dom.mesh_refinement == 0 {
        return Err(Error::Config(
            "cell_size must be positive and mesh_refinement >= 1".into(),
        ));
    }
    if !p_in.is_finite() || p_in < 0.0 {
        return Err(Error::Config(format!(
            "inlet pressure must be non-negative (got {p_in})"
        )));
    }
    if params.l_in > params.l_y * (1.0 + 1e-12) {
        return Err(Error::Dimension(format!(
            "inlet width {} m exceeds the domain edge {} m",
            params.l_in, params.l_y
        )));
    }
    let ncx = whole_multiple(params.l_x, dom.cell_size, "domain length")?;
    let ncy_full = whole_multiple(params.l_y, dom.cell_size, "domain width")?;
    let r = dom.mesh_refinement;
    let h = dom.cell_size / r as f64;
    let n_in_full = whole_multiple(params.l_in, h, "inlet width")?;
    let ny_full = ncy_full * r;
    if (ny_full - n_in_full) % 2 != 0 {
        return Err(Error::Dimension(
            "inlet cannot be centred on the element grid".into(),
        ));
    }
    let (ncy, ny, inlet_rows) = if dom.symmetry {
        if ncy_full % 2 != 0 {
            return Err(Error::Dimension(format!(
                "symmetry needs an even number of cell rows (got {ncy_full})"
            )));
        }
        if n_in_full % 2 != 0 {
            return Err(Error::Dimension(
                "half inlet is not aligned with the element grid".into(),
            ));
        }
        (ncy_full / 2, ny_full / 2, 0..n_in_full / 2)
    } else {
        let lo = (ny_full - n_in_full) / 2;
        (ncy_full, ny_full, lo..lo + n_in_full)
    };

    let np = dom.plenum_cells * r;
    let ndx = ncx * r;
    let nx = ndx + 2 * np;
    let design_cols = np..np + ndx;
    let x0 = -(np as f64) * h;
    let y0 = if dom.symmetry { 0.0 } else { -params.l_y / 2.0 };

    let mut active = vec![false; nx * ny];
    let mut heated = vec![false; nx * ny];
    let mut cell_of_element = vec![None; nx * ny];
    for j in 0..ny {
        for i in 0..nx {
            let e = j * nx + i;
            if design_cols.contains(&i) {
                active[e] = true;
                heated[e] = true;
                let (cx, cy) = ((i - np) / r, j / r);
                cell_of_element[e] = Some(cy * ncx + cx);
            } else if inlet_rows.contains(&j) {
                active[e] = true;
            }
        }
    }

    let mut mesh = Mesh {
        nx,
        ny,
        h,
        x0,
        y0,
        active,
        heated,
        inlet_rows: inlet_rows.clone(),
        design_cols,
        u_kind: Vec::new(),
        v_kind: Vec::new(),
        walls: dom.side_walls,
        symmetry: dom.symmetry,
    };
    let mut u_kind = vec![FaceKind::Outside; (nx + 1) * ny];
    for j in 0..ny {
        for i in 0..=nx {
            let left = mesh.is_active(i as isize - 1, j as isize);
            let right = mesh.is_active(i as isize, j as isize);
            u_kind[j * (nx + 1) + i] = match (left, right) {
                (true, true) => FaceKind::Interior,
                (false, true) if i == 0 && inlet_rows.contains(&j) => FaceKind::Inlet,
                (true, false) if i == nx && inlet_rows.contains(&j) => FaceKind::Outlet,
                (false, false) => FaceKind::Outside,
                _ => FaceKind::Wall,
            };
        }
    }
    let mut v_kind = vec![FaceKind::Outside; nx * (ny + 1)];
    for j in 0..=ny {
        for i in 0..nx {
            let below = mesh.is_active(i as isize, j as isize - 1);
            let above = mesh.is_active(i as isize, j as isize);
            v_kind[j * nx + i] = match (below, above) {
                (true, true) => FaceKind::Interior,
                (false, true) if j == 0 && dom.symmetry => FaceKind::Symmetry,
                (false, false) => FaceKind::Outside,
                _ => FaceKind::Wall,
            };
        }
    }
    mesh.u_kind = u_kind;
    mesh.v_kind = v_kind;

    let seg_y0 = y0 + inlet_rows.start as f64 * h;
    let seg_y1 = y0 + inlet_rows.end as f64 * h;
    let bc = BoundarySpec {
        p_in,
        p_out: 0.0,
        t_in: params.t_in,
        inlet: Segment {
            x: x0,
            y0: seg_y0,
            y1: seg_y1,
        },
        outlet: Segment {
            x: x0 + nx as f64 * h,
            y0: seg_y0,
            y1: seg_y1,
        },
        walls: dom.side_walls,
        symmetry: dom.symmetry,
        inlet_width: params.l_in,
    };
    let grid = UnitGrid {
        cell_size: dom.cell_size,
        n_cells_x: ncx,
        n_cells_y: ncy,
        mesh_refinement: r,
        symmetry: dom.symmetry,
        cell_of_element,
    };
    Ok((grid, bc, mesh))
}

/// Per-cell design variables.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignField {
    /// 1 = void (plain fluid), 0 = lattice.
    pub gamma1: Vec<f64>,
    /// Normalized beam diameter.
    pub gamma2: Vec<f64>,
}

impl DesignField {
    pub fn new(gamma1: Vec<f64>, gamma2: Vec<f64>) -> Result<Self> {
        if gamma1.len() != gamma2.len() {
            return Err(Error::SizeMismatch {
                expected: gamma1.len(),
                got: gamma2.len(),
            });
        }
        let d = Self { gamma1, gamma2 };
        d.check_bounds()?;
        Ok(d)
    }

    pub fn uniform(n: usize, gamma1: f64, gamma2: f64) -> Self {
        Self {
            gamma1: vec![gamma1; n],
            gamma2: vec![gamma2; n],
        }
    }

    pub fn len(&self) -> usize {
        self.gamma1.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gamma1.is_empty()
    }

    fn check_bounds(&self) -> Result<()> {
        for (c, (a, b)) in self.gamma1.iter().zip(&self.gamma2).enumerate() {
            if !(0.0..=1.0).contains(a) || !(0.0..=1.0).contains(b) {
                return Err(Error::OutOfRange(format!(
                    "design variables of cell {c} outside [0, 1]: ({a}, {b})"
                )));
            }
        }
        Ok(())
    }

    pub fn check_grid(&self, grid: &UnitGrid) -> Result<()> {
        if self.len() != grid.n_cells() || self.gamma2.len() != grid.n_cells() {
            return Err(Error::SizeMismatch {
                expected: grid.n_cells(),
                got: self.len(),
            });
        }
        self.check_bounds()
    }

    /// Flattened `[gamma1..., gamma2...]`.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut x = self.gamma1.clone();
        x.extend_from_slice(&self.gamma2);
        x
    }

    pub fn from_slice(x: &[f64]) -> Self {
        let n = x.len() / 2;
        Self {
            gamma1: x[..n].to_vec(),
            gamma2: x[n..].to_vec(),
        }
    }
}

/// Per-element `(gamma1, gamma2)`; elements outside the design domain get
/// `(1, 0)`.
pub fn distribute_design(d: &DesignField, grid: &UnitGrid) -> Result<(Vec<f64>, Vec<f64>)> {
    d.check_grid(grid)?;
    let mut g1 = vec![1.0; grid.cell_of_element.len()];
    let mut g2 = vec![0.0; grid.cell_of_element.len()];
    for (e, c) in grid.cell_of_element.iter().enumerate() {
        if let Some(c) = c {
            g1[e] = d.gamma1[*c];
            g2[e] = d.gamma2[*c];
        }
    }
    Ok((g1, g2))
}

/// Sum element sensitivities over the members of each unit cell.
pub fn reduce_sensitivity(per_element: &[f64], grid: &UnitGrid) -> Result<Vec<f64>> {
    if per_element.len() != grid.cell_of_element.len() {
        return Err(Error::SizeMismatch {
            expected: grid.cell_of_element.len(),
            got: per_element.len(),
        });
    }
    let mut out = vec![0.0; grid.n_cells()];
    for (s, c) in per_element.iter().zip(&grid.cell_of_element) {
        if let Some(c) = c {
            out[*c] += s;
        }
    }
    Ok(out)
}

/// Darcy velocity on the staggered faces and pressure in the elements.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowState {
    /// x-velocity on x-normal faces, `(nx + 1) * ny`.
    pub u: Vec<f64>,
    /// y-velocity on y-normal faces, `nx * (ny + 1)`.
    pub v: Vec<f64>,
    /// Pressure per element, Pa.
    pub p: Vec<f64>,
}

impl FlowState {
    pub fn zeros(mesh: &Mesh) -> Self {
        Self {
            u: vec![0.0; (mesh.nx + 1) * mesh.ny],
            v: vec![0.0; mesh.nx * (mesh.ny + 1)],
            p: vec![0.0; mesh.nx * mesh.ny],
        }
    }

    /// Element-centred Darcy velocity.
    pub fn element_velocity(&self, mesh: &Mesh, e: usize) -> [f64; 2] {
        let (i, j) = (e % mesh.nx, e / mesh.nx);
        [
            0.5 * (self.u[mesh.u_face(i, j)] + self.u[mesh.u_face(i + 1, j)]),
            0.5 * (self.v[mesh.v_face(i, j)] + self.v[mesh.v_face(i, j + 1)]),
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.u
            .iter()
            .chain(&self.v)
            .chain(&self.p)
            .all(|x| x.is_finite())
    }
}

/// Bulk fluid and base-plate temperatures per element, K. Inactive elements
/// hold the inlet temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct ThermalState {
    pub t0: Vec<f64>,
    pub tb0: Vec<f64>,
}

/// Write a design CSV `ix,iy,gamma1,gamma2`.
pub fn write_design_csv(path: &Path, d: &DesignField, grid: &UnitGrid) -> Result<()> {
    d.check_grid(grid)?;
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::parse(path, e.to_string()))?;
    w.write_record(["ix", "iy", "gamma1", "gamma2"])
        .map_err(|e| Error::parse(path, e.to_string()))?;
    for c in 0..grid.n_cells() {
        let (ix, iy) = grid.cell_coords(c);
        w.serialize((ix, iy, d.gamma1[c], d.gamma2[c]))
            .map_err(|e| Error::parse(path, e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Read a design CSV; every cell of `grid` must appear exactly once.
pub fn read_design_csv(path: &Path, grid: &UnitGrid) -> Result<DesignField> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::parse(path, e.to_string()))?;
    let mut g1 = vec![f64::NAN; grid.n_cells()];
    let mut g2 = vec![f64::NAN; grid.n_cells()];
    let mut seen = 0;
    for rec in rdr.deserialize::<(usize, usize, f64, f64)>() {
        let (ix, iy, a, b) = rec.map_err(|e| Error::parse(path, e.to_string()))?;
        if ix >= grid.n_cells_x || iy >= grid.n_cells_y {
            return Err(Error::parse(
                path,
                format!("cell ({ix}, {iy}) outside the grid"),
            ));
        }
        let c = grid.cell_index(ix, iy);
        if !g1[c].is_nan() {
            return Err(Error::parse(
                path,
                format!("cell ({ix}, {iy}) listed twice"),
            ));
        }
        g1[c] = a;
        g2[c] = b;
        seen += 1;
    }
    if seen != grid.n_cells() {
        return Err(Error::SizeMismatch {
            expected: grid.n_cells(),
            got: seen,
        });
    }
    DesignField::new(g1, g2)
}

/// Field attached to the elements of a VTK export.
pub enum CellField<'a> {
    Scalar(&'a str, &'a [f64]),
    Vector(&'a str, &'a [[f64; 2]]),
}

/// Legacy ASCII VTK `STRUCTURED_POINTS` file with one value per element.
/// Inactive elements are written as zero and flagged by an `active` field.
pub fn write_vtk(path: &Path, mesh: &Mesh, fields: &[CellField<'_>]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let n = mesh.n_elements();
    let mut out = || -> std::io::Result<()> {
        writeln!(w, "# vtk DataFile Version 3.0")?;
        writeln!(w, "two-layer heat sink fields")?;
        writeln!(w, "ASCII")?;
        writeln!(w, "DATASET STRUCTURED_POINTS")?;
        writeln!(w, "DIMENSIONS {} {} 2", mesh.nx + 1, mesh.ny + 1)?;
        writeln!(w, "ORIGIN {:e} {:e} 0", mesh.x0, mesh.y0)?;
        writeln!(w, "SPACING {:e} {:e} {:e}", mesh.h, mesh.h, mesh.h)?;
        writeln!(w, "CELL_DATA {n}")?;
        writeln!(w, "SCALARS active int 1")?;
        writeln!(w, "LOOKUP_TABLE default")?;
        for a in &mesh.active {
            writeln!(w, "{}", u8::from(*a))?;
        }
        for f in fields {
            match f {
                CellField::Scalar(name, vals) => {
                    writeln!(w, "SCALARS {name} double 1")?;
                    writeln!(w, "LOOKUP_TABLE default")?;
                    for (e, v) in vals.iter().enumerate() {
                        writeln!(w, "{:e}", if mesh.active[e] { *v } else { 0.0 })?;
                    }
                }
                CellField::Vector(name, vals) => {
                    writeln!(w, "VECTORS {name} double")?;
                    for (e, v) in vals.iter().enumerate() {
                        let v = if mesh.active[e] { *v } else { [0.0, 0.0] };
                        writeln!(w, "{:e} {:e} 0", v[0], v[1])?;
                    }
                }
            }
        }
        w.flush()
    };
    out().map_err(|e| Error::io(path, e))?;
    for f in fields {
        let len = match f {
            CellField::Scalar(_, v) => v.len(),
            CellField::Vector(_, v) => v.len(),
        };
        if len != n {
            return Err(Error::SizeMismatch {
                expected: n,
                got: len,
            });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn default_domain() -> (UnitGrid, BoundarySpec, Mesh) {
        build_domain(&PhysicalParams::default(), &DomainSettings::default(), 10.0).unwrap()
    }

    #[test]
    fn default_domain_counts() {
        let (g, bc, m) = default_domain();
        assert_eq!((g.n_cells_x, g.n_cells_y), (20, 10));
        assert_eq!(g.n_cells(), 200);
        assert_eq!((m.nx, m.ny), (88, 40));
        assert_eq!(m.inlet_rows, 0..4);
        assert!((bc.inlet.length() - 2.5e-3).abs() < 1e-15);
        assert!((bc.inlet.x + 2.5e-3).abs() < 1e-15);
        assert!((bc.outlet.x - 0.0525).abs() < 1e-15);

        let full = DomainSettings {
            symmetry: false,
            ..Default::default()
        };
        let (g, bc, m) = build_domain(&PhysicalParams::default(), &full, 10.0).unwrap();
        assert_eq!(g.n_cells(), 400);
        assert_eq!(m.inlet_rows, 36..44);
        assert!((bc.inlet.y0 + 2.5e-3).abs() < 1e-15);
    }

    #[test]
    fn miniaturized_cells() {
        let dom = DomainSettings {
            cell_size: 1.25e-3,
            symmetry: false,
            ..Default::default()
        };
        let (g, _, _) = build_domain(&PhysicalParams::default(), &dom, 10.0).unwrap();
        assert_eq!((g.n_cells_x, g.n_cells_y), (40, 40));
    }

    #[test]
    fn dimension_errors() {
        let dom = DomainSettings {
            cell_size: 3e-3,
            ..Default::default()
        };
        assert!(matches!(
            build_domain(&PhysicalParams::default(), &dom, 10.0),
            Err(Error::Dimension(_))
        ));
        let wide = PhysicalParams {
            l_in: 0.06,
            ..Default::default()
        };
        assert!(matches!(
            build_domain(&wide, &DomainSettings::default(), 10.0),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn face_kinds_of_the_ducts() {
        let (_, _, m) = default_domain();
        assert_eq!(m.u_kind[m.u_face(0, 0)], FaceKind::Inlet);
        assert_eq!(m.u_kind[m.u_face(0, 4)], FaceKind::Outside);
        assert_eq!(m.u_kind[m.u_face(4, 4)], FaceKind::Wall);
        assert_eq!(m.u_kind[m.u_face(m.nx, 3)], FaceKind::Outlet);
        assert_eq!(m.v_kind[m.v_face(0, 0)], FaceKind::Symmetry);
        assert_eq!(m.v_kind[m.v_face(0, 4)], FaceKind::Wall);
        assert_eq!(m.v_kind[m.v_face(10, m.ny)], FaceKind::Wall);
        assert_eq!(m.v_kind[m.v_face(10, 5)], FaceKind::Interior);
    }

    #[test]
    fn uniform_design_is_distributed_everywhere() {
        let (g, _, _) = default_domain();
        let d = DesignField::uniform(g.n_cells(), 0.3, 0.7);
        let (g1, g2) = distribute_design(&d, &g).unwrap();
        for (e, c) in g.cell_of_element.iter().enumerate() {
            if c.is_some() {
                assert_eq!((g1[e], g2[e]), (0.3, 0.7));
            } else {
                assert_eq!((g1[e], g2[e]), (1.0, 0.0));
            }
        }
    }

    #[test]
    fn single_cell_reaches_its_sixteen_elements() {
        let (g, _, _) = default_domain();
        let mut d = DesignField::uniform(g.n_cells(), 0.0, 0.5);
        let c = g.cell_index(3, 2);
        d.gamma1[c] = 1.0;
        d.gamma2[c] = 0.0;
        let (g1, g2) = distribute_design(&d, &g).unwrap();
        let hits: Vec<usize> = (0..g1.len())
            .filter(|e| g1[*e] == 1.0 && g2[*e] == 0.0 && g.cell_of_element[*e].is_some())
            .collect();
        assert_eq!(hits.len(), 16);
        assert!(hits.iter().all(|e| g.cell_of_element[*e] == Some(c)));
    }

    #[test]
    fn checkerboard_matches_element_loop() {
        let (g, _, m) = default_domain();
        let n = g.n_cells();
        let gamma1: Vec<f64> = (0..n)
            .map(|c| ((c % g.n_cells_x + c / g.n_cells_x) % 2) as f64)
            .collect();
        let d = DesignField::new(gamma1, vec![0.25; n]).unwrap();
        let (g1, _) = distribute_design(&d, &g).unwrap();
        let r = g.mesh_refinement;
        for j in 0..m.ny {
            for i in 0..m.nx {
                let e = m.elem(i, j);
                let expect = if m.design_cols.contains(&i) {
                    let (cx, cy) = ((i - m.design_cols.start) / r, j / r);
                    ((cx + cy) % 2) as f64
                } else {
                    1.0
                };
                assert_eq!(g1[e], expect);
            }
        }
    }

    #[test]
    fn reduce_sums_members() {
        let (g, _, _) = default_domain();
        let ones = vec![1.0; g.cell_of_element.len()];
        assert!(reduce_sensitivity(&ones, &g)
            .unwrap()
            .iter()
            .all(|s| *s == 16.0));
        let zeros = vec![0.0; g.cell_of_element.len()];
        assert!(reduce_sensitivity(&zeros, &g)
            .unwrap()
            .iter()
            .all(|s| *s == 0.0));

        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let s: Vec<f64> = (0..ones.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let red = reduce_sensitivity(&s, &g).unwrap();
        for c in 0..g.n_cells() {
            let brute: f64 = (0..s.len())
                .filter(|e| g.cell_of_element[*e] == Some(c))
                .map(|e| s[e])
                .sum();
            assert!((red[c] - brute).abs() < 1e-12);
        }
        assert!(reduce_sensitivity(&s[1..], &g).is_err());
    }

    #[test]
    fn chain_rule_through_reduction() {
        let (g, _, _) = default_domain();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let d = DesignField::new(
            (0..g.n_cells()).map(|_| rng.gen_range(0.1..0.9)).collect(),
            vec![0.5; g.n_cells()],
        )
        .unwrap();
        let f = |d: &DesignField| -> f64 {
            let (g1, _) = distribute_design(d, &g).unwrap();
            g1.iter()
                .zip(&g.cell_of_element)
                .filter(|(_, c)| c.is_some())
                .map(|(x, _)| x.sin() * x)
                .sum()
        };
        let (g1, _) = distribute_design(&d, &g).unwrap();
        let de: Vec<f64> = g1.iter().map(|x| x.cos() * x + x.sin()).collect();
        let dc = reduce_sensitivity(&de, &g).unwrap();
        for c in [0, 17, 101, 199] {
            let mut p = d.clone();
            let mut m = d.clone();
            p.gamma1[c] += 1e-6;
            m.gamma1[c] -= 1e-6;
            let fd = (f(&p) - f(&m)) / 2e-6;
            assert!(
                ((fd - dc[c]) / dc[c]).abs() < 1e-6,
                "cell {c}: {fd} vs {}",
                dc[c]
            );
        }
    }

    #[test]
    fn design_csv_round_trip() {
        let (g, _, _) = default_domain();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let d = DesignField::new(
            (0..g.n_cells()).map(|_| rng.gen()).collect(),
            (0..g.n_cells()).map(|_| rng.gen()).collect(),
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("design.csv");
        write_design_csv(&p, &d, &g).unwrap();
        assert_eq!(read_design_csv(&p, &g).unwrap(), d);
    }

    #[test]
    fn vtk_has_expected_blocks() {
        let (_, _, m) = default_domain();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.vtk");
        let s = vec![1.5; m.n_elements()];
        let v = vec![[0.1, 0.2]; m.n_elements()];
        write_vtk(
            &p,
            &m,
            &[CellField::Scalar("T0", &s), CellField::Vector("vbar", &v)],
        )
        .unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.contains("DIMENSIONS 89 41 2"));
        assert!(text.contains(&format!("CELL_DATA {}", m.n_elements())));
        assert!(text.contains("SCALARS T0 double 1"));
        assert!(text.contains("VECTORS vbar double"));
    }

    proptest! {
        #[test]
        fn distribute_then_average_recovers_design(seed in 0u64..1000) {
            let (g, _, _) = default_domain();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let d = DesignField::new(
                (0..g.n_cells()).map(|_| rng.gen()).collect(),
                (0..g.n_cells()).map(|_| rng.gen()).collect(),
            ).unwrap();
            let (g1, g2) = distribute_design(&d, &g).unwrap();
            let k = g.elements_per_cell() as f64;
            let a1 = reduce_sensitivity(&g1, &g).unwrap();
            let a2 = reduce_sensitivity(&g2, &g).unwrap();
            for c in 0..g.n_cells() {
                // Sixteen equal addends: exact up to rounding of the sum.
                prop_assert!((a1[c] / k - d.gamma1[c]).abs() <= 4.0 * f64::EPSILON);
                prop_assert!((a2[c] / k - d.gamma2[c]).abs() <= 4.0 * f64::EPSILON);
            }
        }

        #[test]
        fn reduction_is_linear(seed in 0u64..1000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let (g, _, _) = default_domain();
            let n = g.cell_of_element.len();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let s1: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let s2: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mix: Vec<f64> = s1.iter().zip(&s2).map(|(x, y)| a * x + b * y).collect();
            let r = reduce_sensitivity(&mix, &g).unwrap();
            let r1 = reduce_sensitivity(&s1, &g).unwrap();
            let r2 = reduce_sensitivity(&s2, &g).unwrap();
            for c in 0..g.n_cells() {
                prop_assert!((r[c] - (a * r1[c] + b * r2[c])).abs() < 1e-10);
            }
        }
    }
}
