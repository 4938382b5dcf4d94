//! Full-scale BCC lattice reconstruction from a design, with beam CSV and
//! binary STL export.

use std::collections::HashMap;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::materials::{heaviside_project, DiameterRange, ProjectionParams};
use crate::model::{DesignField, UnitGrid};

/// Nodes closer than this are merged, m.
pub const MERGE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Strut {
    pub a: usize,
    pub b: usize,
    /// Diameter, m.
    pub d: f64,
}

/// Beam model of a lattice: nodes in m, struts between them.
#[derive(Debug, Clone, Default)]
pub struct BeamGraph {
    pub nodes: Vec<[f64; 3]>,
    pub struts: Vec<Strut>,
    /// Full-width unit cell `(ix, iy, iz)` each strut came from; `None` for
    /// imported struts.
    pub cells: Vec<Option<[usize; 3]>>,
    lookup: HashMap<[i64; 3], usize>,
}

impl PartialEq for BeamGraph {
    fn eq(&self, other: &Self) -> bool {
        self.nodes == other.nodes && self.struts == other.struts
    }
}

fn key(p: &[f64; 3]) -> [i64; 3] {
    p.map(|v| (v / MERGE_TOLERANCE).round() as i64)
}

impl BeamGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.struts.is_empty()
    }

    /// Index of the node at `p`, creating it if no node lies within the
    /// merge tolerance.
    pub fn add_node(&mut self, p: [f64; 3]) -> usize {
        let k = key(&p);
        if let Some(&i) = self.lookup.get(&k) {
            return i;
        }
        self.nodes.push(p);
        self.lookup.insert(k, self.nodes.len() - 1);
        self.nodes.len() - 1
    }

    pub fn add_strut(&mut self, a: [f64; 3], b: [f64; 3], d: f64, cell: Option<[usize; 3]>) {
        let a = self.add_node(a);
        let b = self.add_node(b);
        self.struts.push(Strut { a, b, d });
        self.cells.push(cell);
    }

    /// Axis-aligned bounds of the nodes.
    pub fn bounds(&self) -> Option<([f64; 3], [f64; 3])> {
        let mut it = self.nodes.iter();
        let first = *it.next()?;
        Some(it.fold((first, first), |(lo, hi), p| {
            (
                std::array::from_fn(|k| lo[k].min(p[k])),
                std::array::from_fn(|k| hi[k].max(p[k])),
            )
        }))
    }

    /// Check the structural invariants.
    pub fn validate(&self, range: &DiameterRange<f64>) -> Result<()> {
        let tol = 1e-12 * range.d_max;
        for (i, s) in self.struts.iter().enumerate() {
            if s.a >= self.nodes.len() || s.b >= self.nodes.len() || s.a == s.b {
                return Err(Error::OutOfRange(format!(
                    "strut {i} has invalid endpoints"
                )));
            }
            if s.d < range.d_min - tol || s.d > range.d_max + tol {
                return Err(Error::OutOfRange(format!(
                    "strut {i} diameter {} outside the range",
                    s.d
                )));
            }
        }
        Ok(())
    }
}

/// Lattice options for reconstruction.
#[derive(Debug, Clone, Copy)]
pub struct LatticeLayout {
    pub range: DiameterRange<f64>,
    pub n_layers_z: usize,
    /// Cells with projected indicator below this are built.
    pub threshold: f64,
    pub projection: ProjectionParams,
}

/// Build the BCC beam graph of `d`. Cell `(ix, iy)` of the full-width
/// domain spans `x in [ix L, (ix+1) L]`, `y` is measured from the centerline
/// and `z` from the top of the base plate; each built cell carries its 8
/// centre-to-corner struts in each of the stacked layers. Half-domain
/// designs are mirrored to the full width.
pub fn reconstruct_lattice(
    d: &DesignField,
    grid: &UnitGrid,
    layout: &LatticeLayout,
) -> Result<BeamGraph> {
    d.check_grid(grid)?;
    let l = grid.cell_size;
    let rows = if grid.symmetry {
        2 * grid.n_cells_y
    } else {
        grid.n_cells_y
    };
    let half_width = 0.5 * rows as f64 * l;
    let mut g = BeamGraph::new();
    for jy in 0..rows {
        let iy = match grid.symmetry {
            true if jy >= grid.n_cells_y => jy - grid.n_cells_y,
            true => grid.n_cells_y - 1 - jy,
            false => jy,
        };
        for ix in 0..grid.n_cells_x {
            let c = grid.cell_index(ix, iy);
            let (gh, _) =
                heaviside_project(d.gamma1[c], layout.projection.beta, layout.projection.eta);
            if gh >= layout.threshold {
                continue;
            }
            let dia = layout.range.diameter_from_gamma2(d.gamma2[c])?;
            for iz in 0..layout.n_layers_z {
                let lo = [ix as f64 * l, jy as f64 * l - half_width, iz as f64 * l];
                let centre = lo.map(|v| v + 0.5 * l);
                for corner in 0..8 {
                    let p = [
                        lo[0] + (corner & 1) as f64 * l,
                        lo[1] + ((corner >> 1) & 1) as f64 * l,
                        lo[2] + ((corner >> 2) & 1) as f64 * l,
                    ];
                    g.add_strut(centre, p, dia, Some([ix, jy, iz]));
                }
            }
        }
    }
    if g.is_empty() {
        log::warn!("design has no lattice cells; the beam graph is empty");
    }
    Ok(g)
}

/// Write the beam CSV `xa,ya,za,xb,yb,zb,d`.
pub fn export_beams(g: &BeamGraph, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::parse(path, e.to_string()))?;
    w.write_record(["xa", "ya", "za", "xb", "yb", "zb", "d"])
        .map_err(|e| Error::parse(path, e.to_string()))?;
    for s in &g.struts {
        let (a, b) = (g.nodes[s.a], g.nodes[s.b]);
        w.serialize((a[0], a[1], a[2], b[0], b[1], b[2], s.d))
            .map_err(|e| Error::parse(path, e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Read a beam CSV written by [`export_beams`].
pub fn import_beams(path: &Path) -> Result<BeamGraph> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::parse(path, e.to_string()))?;
    let mut g = BeamGraph::new();
    for rec in rdr.deserialize::<(f64, f64, f64, f64, f64, f64, f64)>() {
        let (xa, ya, za, xb, yb, zb, d) = rec.map_err(|e| Error::parse(path, e.to_string()))?;
        if !(d > 0.0) {
            return Err(Error::parse(path, format!("non-positive diameter {d}")));
        }
        g.add_strut([xa, ya, za], [xb, yb, zb], d, None);
    }
    Ok(g)
}

/// Triangles of one capped prism with `sides` facets.
pub fn triangles_per_strut(sides: usize) -> usize {
    2 * sides + 2 * (sides - 2)
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn normalize(a: [f64; 3]) -> [f64; 3] {
    let n = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
    if n > 0.0 {
        a.map(|v| v / n)
    } else {
        [0.0; 3]
    }
}

/// Triangles of the prism around segment `a`-`b`, outward oriented.
fn prism(a: [f64; 3], b: [f64; 3], radius: f64, sides: usize) -> Vec<[[f64; 3]; 3]> {
    let axis = normalize(sub(b, a));
    let helper = if axis[0].abs() < 0.9 {
        [1.0, 0.0, 0.0]
    } else {
        [0.0, 1.0, 0.0]
    };
    let e1 = normalize(cross(axis, helper));
    let e2 = cross(axis, e1);
    let ring = |c: [f64; 3]| -> Vec<[f64; 3]> {
        (0..sides)
            .map(|i| {
                let t = std::f64::consts::TAU * i as f64 / sides as f64;
                let (s, co) = t.sin_cos();
                std::array::from_fn(|k| c[k] + radius * (co * e1[k] + s * e2[k]))
            })
            .collect()
    };
    let (ra, rb) = (ring(a), ring(b));
    let mut tris = Vec::with_capacity(triangles_per_strut(sides));
    for i in 0..sides {
        let j = (i + 1) % sides;
        tris.push([ra[i], ra[j], rb[j]]);
        tris.push([ra[i], rb[j], rb[i]]);
    }
    for i in 1..sides - 1 {
        tris.push([ra[0], ra[i + 1], ra[i]]);
        tris.push([rb[0], rb[i], rb[i + 1]]);
    }
    tris
}

/// Binary little-endian STL with every strut as a capped prism.
pub fn export_stl(g: &BeamGraph, sides: usize, path: &Path) -> Result<()> {
    if g.is_empty() {
        return Err(Error::Degenerate(
            "cannot write an STL of an empty lattice".into(),
        ));
    }
    if sides < 3 {
        return Err(Error::Config(format!(
            "STL prisms need at least 3 sides (got {sides})"
        )));
    }
    let count = g.struts.len() * triangles_per_strut(sides);
    let count =
        u32::try_from(count).map_err(|_| Error::OutOfRange("too many STL triangles".into()))?;
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut header = [0u8; 80];
    let text = b"voidlattice BCC lattice";
    header[..text.len()].copy_from_slice(text);
    let mut put = |bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::io(path, e));
    put(&header)?;
    put(&count.to_le_bytes())?;
    for s in &g.struts {
        for t in prism(g.nodes[s.a], g.nodes[s.b], 0.5 * s.d, sides) {
            let n = normalize(cross(sub(t[1], t[0]), sub(t[2], t[0])));
            for v in std::iter::once(n).chain(t) {
                for c in v {
                    put(&(c as f32).to_le_bytes())?;
                }
            }
            put(&[0, 0])?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_domain, DomainSettings, PhysicalParams};
    use proptest::prelude::*;

    fn layout(n_layers_z: usize) -> LatticeLayout {
        LatticeLayout {
            range: DiameterRange::new(0.3e-3, 1.3e-3).unwrap(),
            n_layers_z,
            threshold: 0.5,
            projection: ProjectionParams::default(),
        }
    }

    fn grid(symmetry: bool) -> UnitGrid {
        let dom = DomainSettings {
            symmetry,
            mesh_refinement: 1,
            ..Default::default()
        };
        build_domain(&PhysicalParams::default(), &dom, 1.0)
            .unwrap()
            .0
    }

    fn one_row_grid(nx: usize) -> UnitGrid {
        UnitGrid {
            cell_size: 2.5e-3,
            n_cells_x: nx,
            n_cells_y: 1,
            mesh_refinement: 1,
            symmetry: false,
            cell_of_element: Vec::new(),
        }
    }

    #[test]
    fn single_cell_topology() {
        let g = reconstruct_lattice(
            &DesignField::uniform(1, 0.0, 0.0),
            &one_row_grid(1),
            &layout(1),
        )
        .unwrap();
        assert_eq!((g.nodes.len(), g.struts.len()), (9, 8));
    }

    #[test]
    fn neighbouring_cells_share_a_face() {
        // Two cubes sharing a face: 8 + 8 - 4 corners plus 2 centres.
        let g = reconstruct_lattice(
            &DesignField::uniform(2, 0.0, 0.0),
            &one_row_grid(2),
            &layout(1),
        )
        .unwrap();
        assert_eq!((g.nodes.len(), g.struts.len()), (14, 16));
        // Two layers: 3 x 2 x 3 corners plus 4 centres.
        let g = reconstruct_lattice(
            &DesignField::uniform(2, 0.0, 0.0),
            &one_row_grid(2),
            &layout(2),
        )
        .unwrap();
        assert_eq!((g.nodes.len(), g.struts.len()), (22, 32));
    }

    #[test]
    fn full_domain_counts_and_bounds() {
        let gr = grid(false);
        let d = DesignField::uniform(gr.n_cells(), 0.0, 1.0);
        let lay = layout(2);
        let g = reconstruct_lattice(&d, &gr, &lay).unwrap();
        assert_eq!(gr.n_cells(), 400);
        assert_eq!(g.struts.len(), 6400);
        // Corners 21 x 21 x 3 plus 800 centres.
        assert_eq!(g.nodes.len(), 21 * 21 * 3 + 800);
        g.validate(&lay.range).unwrap();
        let (lo, hi) = g.bounds().unwrap();
        let pad = 0.5 * lay.range.d_max;
        assert!(lo[0] >= -pad && hi[0] <= 0.05 + pad);
        assert!(lo[1] >= -0.025 - pad && hi[1] <= 0.025 + pad);
        assert!(lo[2] >= -pad && hi[2] <= 5e-3 + pad);
        assert!(g.struts.iter().all(|s| (s.d - 1.3e-3).abs() < 1e-15));
    }

    #[test]
    fn void_design_is_empty() {
        let gr = grid(true);
        let g = reconstruct_lattice(
            &DesignField::uniform(gr.n_cells(), 1.0, 0.5),
            &gr,
            &layout(2),
        )
        .unwrap();
        assert!(g.is_empty());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.csv");
        export_beams(&g, &p).unwrap();
        assert_eq!(
            std::fs::read_to_string(&p).unwrap().trim(),
            "xa,ya,za,xb,yb,zb,d"
        );
        assert!(export_stl(&g, 16, &dir.path().join("b.stl")).is_err());
    }

    #[test]
    fn stl_triangle_count() {
        let g = reconstruct_lattice(
            &DesignField::uniform(1, 0.0, 0.3),
            &one_row_grid(1),
            &layout(1),
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.stl");
        export_stl(&g, 16, &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        let n = u32::from_le_bytes(bytes[80..84].try_into().unwrap()) as usize;
        assert_eq!(n, 8 * (2 * 16 + 2 * (16 - 2)));
        assert_eq!(bytes.len(), 84 + 50 * n);
    }

    #[test]
    fn prism_is_closed_and_outward() {
        // Divergence theorem: sum of (centroid . n) area / 3 over faces is the volume.
        let (r, len, s) = (0.4, 2.0, 16);
        let tris = prism([0.1, 0.2, 0.3], [0.1 + len, 0.2, 0.3], r, s);
        let vol: f64 = tris
            .iter()
            .map(|t| {
                let c = cross(sub(t[1], t[0]), sub(t[2], t[0]));
                (t[0][0] * c[0] + t[0][1] * c[1] + t[0][2] * c[2]) / 6.0
            })
            .sum();
        let oracle = 0.5 * s as f64 * r * r * (std::f64::consts::TAU / s as f64).sin() * len;
        assert!((vol - oracle).abs() < 1e-12, "{vol} vs {oracle}");
    }

    #[test]
    fn mirrored_half_design_is_symmetric() {
        let gr = grid(true);
        let n = gr.n_cells();
        let d = DesignField::new(
            (0..n).map(|c| if c % 3 == 0 { 1.0 } else { 0.1 }).collect(),
            (0..n).map(|c| (c % 7) as f64 / 6.0).collect(),
        )
        .unwrap();
        let g = reconstruct_lattice(&d, &gr, &layout(2)).unwrap();
        let set: std::collections::HashSet<[i64; 3]> = g.nodes.iter().map(key).collect();
        for p in &g.nodes {
            assert!(set.contains(&key(&[p[0], -p[1], p[2]])));
        }
        let built = d.gamma1.iter().filter(|v| **v < 0.5).count();
        assert_eq!(g.struts.len(), 8 * 2 * 2 * built);
    }

    proptest! {
        #[test]
        fn csv_round_trip_is_exact(
            g1 in proptest::collection::vec(0.0f64..=1.0, 6),
            g2 in proptest::collection::vec(0.0f64..=1.0, 6),
        ) {
            let gr = UnitGrid { n_cells_y: 2, ..one_row_grid(3) };
            let d = DesignField::new(g1, g2).unwrap();
            let lay = layout(2);
            let g = reconstruct_lattice(&d, &gr, &lay).unwrap();
            g.validate(&lay.range).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("r.csv");
            export_beams(&g, &p).unwrap();
            let back = import_beams(&p).unwrap();
            prop_assert_eq!(&back, &g);
            let built = d.gamma1.iter().filter(|v| heaviside_project(**v, 1.0, 0.5).0 < 0.5).count();
            prop_assert_eq!(g.struts.len(), 8 * 2 * built);
        }
    }
}
