use voidlattice::geometry::{export_beams, import_beams, reconstruct_lattice};
use voidlattice::materials::ContinuationSchedule;
use voidlattice::metrics::report;
use voidlattice::model::{read_design_csv, write_design_csv};
use voidlattice::{run_optimization, OptimizationConfig};

fn small() -> OptimizationConfig {
    let mut c = OptimizationConfig::default();
    c.physics.l_x = 0.02;
    c.physics.l_y = 0.02;
    c.domain.mesh_refinement = 2;
    c.optimizer.iterations = 12;
    c.continuation = ContinuationSchedule {
        stage_length: 3,
        ..Default::default()
    };
    c
}

#[test]
fn optimize_evaluate_and_rebuild() {
    let c = small();
    let dir = tempfile::tempdir().unwrap();
    let (d, rec) = run_optimization(&c, Some(dir.path())).unwrap();
    assert_eq!(rec.rows.len(), 12);
    assert!(
        rec.rows.last().unwrap().k < rec.rows[0].k,
        "objective should improve"
    );

    let pipe = c.pipeline(c.boundary.p_in).unwrap();
    let path = dir.path().join("design.csv");
    write_design_csv(&path, &d, &pipe.grid).unwrap();
    let back = read_design_csv(&path, &pipe.grid).unwrap();
    assert_eq!(back, d);

    let (q_k, q_f) = c.continuation.last();
    let ev = pipe.evaluate(&d, q_k, q_f, None).unwrap();
    let m = report(&pipe, &d, &ev, &c.metrics).unwrap();
    assert!(m.energy_residual < 0.01);
    assert!(m.nusselt.nu_obj > 0.0 && m.u_in > 0.0);
    assert!((0.0..=1.0).contains(&m.solid_fraction));

    let g = reconstruct_lattice(&d, &pipe.grid, &c.lattice_layout().unwrap()).unwrap();
    let beams = dir.path().join("beams.csv");
    export_beams(&g, &beams).unwrap();
    assert_eq!(import_beams(&beams).unwrap(), g);
}

#[test]
fn config_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.toml");
    let c = small();
    std::fs::write(&path, c.to_toml_string().unwrap()).unwrap();
    assert_eq!(OptimizationConfig::load(&path).unwrap(), c);
}
