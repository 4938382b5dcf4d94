use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use log::{info, warn};

use voidlattice::config::OptimizationConfig;
use voidlattice::geometry::{export_beams, export_stl, reconstruct_lattice};
use voidlattice::materials::{check_table, fit_property_rows, read_rve_csv, write_property_csv};
use voidlattice::metrics::{center_plane_fields, report, write_metrics_csv};
use voidlattice::model::{
    distribute_design, read_design_csv, write_design_csv, write_vtk, CellField,
};
use voidlattice::optimizer::optimize;
use voidlattice::validation::{correlate_with, evaluate_samples, generate_samples};

#[derive(Parser)]
#[command(
    name = "voidlattice",
    version,
    about = "Two-field topology optimization of lattice heat sinks"
)]
struct Cli {
    /// TOML configuration; defaults apply to every missing key.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides run.output_dir).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Random seed (overrides run.seed).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Reduce cell-level samples to a lattice property table.
    FitProps {
        /// CSV `gamma2,eps_por,q,length,delta_t,vbar,neg_dpdx`.
        samples: PathBuf,
        /// Table to write (default: <out>/properties.csv).
        #[arg(long)]
        table: Option<PathBuf>,
    },
    /// Run the design optimization.
    Optimize {
        /// Inlet pressure, Pa (overrides boundary.p_in).
        #[arg(long)]
        p_in: Option<f64>,
    },
    /// Evaluate a design and export its fields.
    Evaluate {
        design: PathBuf,
        /// Inlet pressure, Pa (overrides boundary.p_in).
        #[arg(long)]
        p_in: Option<f64>,
    },
    /// Evaluate random binary designs.
    RandomSamples {
        /// Number of samples (overrides sampling.n).
        #[arg(long)]
        n: Option<usize>,
        /// Externally computed metrics to correlate against.
        #[arg(long)]
        external: Option<PathBuf>,
    },
    /// Write the full-scale lattice of a design as beam CSV and STL.
    ExportGeometry { design: PathBuf },
}

/// Usage-type failure: bad arguments, configuration or input files.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn load_config(cli: &Cli) -> Result<OptimizationConfig> {
    let mut c = match &cli.config {
        Some(p) => OptimizationConfig::load(p)?,
        None => OptimizationConfig::default(),
    };
    if let Some(o) = &cli.out {
        c.run.output_dir = o.clone();
    }
    if let Some(s) = cli.seed {
        c.run.seed = s;
    }
    Ok(c)
}

fn out_dir(c: &OptimizationConfig) -> Result<&Path> {
    let d = c.run.output_dir.as_path();
    fs::create_dir_all(d).with_context(|| format!("creating {}", d.display()))?;
    Ok(d)
}

fn with_p_in(mut c: OptimizationConfig, p_in: Option<f64>) -> Result<OptimizationConfig> {
    if let Some(p) = p_in {
        c.boundary.p_in = p;
        c.validate()?;
    }
    Ok(c)
}

fn fit_props(c: &OptimizationConfig, samples: &Path, table: Option<PathBuf>) -> Result<()> {
    let rows = read_rve_csv(samples)?;
    let fitted = fit_property_rows(&rows, c.physics.k_f, c.physics.k_s)?;
    let path = match table {
        Some(p) => p,
        None => out_dir(c)?.join("properties.csv"),
    };
    write_property_csv(&path, &fitted)?;
    for r in &fitted {
        info!(
            "gamma2 {:.4}: eps {:.4} k {:.4} alpha {:.6e} beta {:.6e}",
            r.gamma2, r.eps_por, r.k_por, r.alpha_por, r.beta_por
        );
    }
    check_table(&fitted, false).with_context(|| {
        format!(
            "fitted table written to {} fails the table checks",
            path.display()
        )
    })?;
    println!("wrote {} rows to {}", fitted.len(), path.display());
    Ok(())
}

fn run_optimize(c: &OptimizationConfig) -> Result<()> {
    let dir = out_dir(c)?;
    fs::write(dir.join("config.toml"), c.to_toml_string()?)?;
    let mut pipe = c.pipeline(c.boundary.p_in)?;
    let (design, record) = optimize(&mut pipe, c, Some(dir))?;
    write_design_csv(&dir.join("design.csv"), &design, &pipe.grid)?;
    record.write_csv(&dir.join("history.csv"))?;
    let (q_k, q_f) = c.continuation.last();
    let ev = pipe.evaluate(&design, q_k, q_f, None)?;
    let m = report(&pipe, &design, &ev, &c.metrics)?;
    m.write_text(&dir.join("metrics.txt"))?;
    write_metrics_csv(
        &dir.join("metrics.csv"),
        &["p_in"],
        &[(vec![format!("{:e}", c.boundary.p_in)], m)],
    )?;
    print!("{}", m.to_text());
    Ok(())
}

fn evaluate(c: &OptimizationConfig, design: &Path) -> Result<()> {
    let dir = out_dir(c)?;
    let pipe = c.pipeline(c.boundary.p_in)?;
    let d = read_design_csv(design, &pipe.grid)?;
    let (q_k, q_f) = c.continuation.last();
    let ev = pipe.evaluate(&d, q_k, q_f, None)?;
    let m = report(&pipe, &d, &ev, &c.metrics)?;
    m.write_text(&dir.join("metrics.txt"))?;
    write_metrics_csv(
        &dir.join("metrics.csv"),
        &["p_in"],
        &[(vec![format!("{:e}", c.boundary.p_in)], m)],
    )?;
    let (g1, g2) = distribute_design(&d, &pipe.grid)?;
    let (v0, tc) = center_plane_fields(&pipe.mesh, &ev.flow.state, &ev.thermal.state, &pipe.params);
    let vbar: Vec<[f64; 2]> = (0..pipe.mesh.n_elements())
        .map(|e| ev.flow.state.element_velocity(&pipe.mesh, e))
        .collect();
    write_vtk(
        &dir.join("fields.vtk"),
        &pipe.mesh,
        &[
            CellField::Scalar("gamma1", &g1),
            CellField::Scalar("gamma2", &g2),
            CellField::Vector("velocity_mean", &vbar),
            CellField::Vector("velocity_center", &v0),
            CellField::Scalar("T0", &ev.thermal.state.t0),
            CellField::Scalar("Tb0", &ev.thermal.state.tb0),
            CellField::Scalar("T_center", &tc),
            CellField::Scalar("k", &ev.props.k),
            CellField::Scalar("alpha", &ev.props.alpha),
        ],
    )?;
    if m.energy_residual > 0.01 {
        warn!(
            "energy balance residual {:.3e} exceeds 1%",
            m.energy_residual
        );
    }
    print!("{}", m.to_text());
    Ok(())
}

fn random_samples(
    c: &OptimizationConfig,
    n: Option<usize>,
    external: Option<PathBuf>,
) -> Result<()> {
    let mut s = c.sampling.clone();
    if let Some(n) = n {
        if n == 0 {
            return Err(Usage("--n must be at least 1".into()).into());
        }
        s.n = n;
    }
    let dir = out_dir(c)?;
    let pipe = c.pipeline(c.boundary.p_in)?;
    let samples = generate_samples(pipe.grid.n_cells(), &s, c.run.seed);
    let reports = evaluate_samples(
        &pipe,
        &samples,
        c.continuation.last(),
        &c.metrics,
        Some(dir),
    )?;
    println!("evaluated {} samples into {}", reports.len(), dir.display());
    if let Some(path) = external.or(s.external_results) {
        let r = correlate_with(&reports, &path)?;
        let mut w = String::from("metric,pearson_r\n");
        for (name, v) in &r {
            match v {
                Some(v) => {
                    println!("{name}: r = {v:.4}");
                    w.push_str(&format!("{name},{v:e}\n"));
                }
                None => {
                    println!("{name}: no variance");
                    w.push_str(&format!("{name},\n"));
                }
            }
        }
        fs::write(dir.join("correlation.csv"), w)?;
    }
    Ok(())
}

fn export_geometry(c: &OptimizationConfig, design: &Path) -> Result<()> {
    let dir = out_dir(c)?;
    let pipe = c.pipeline(c.boundary.p_in)?;
    let d = read_design_csv(design, &pipe.grid)?;
    let g = reconstruct_lattice(&d, &pipe.grid, &c.lattice_layout()?)?;
    export_beams(&g, &dir.join("beams.csv"))?;
    if g.is_empty() {
        warn!("no lattice cells; wrote a header-only beam CSV and no STL");
        return Ok(());
    }
    export_stl(&g, c.lattice.stl_sides, &dir.join("lattice.stl"))?;
    println!(
        "{} nodes, {} struts written to {}",
        g.nodes.len(),
        g.struts.len(),
        dir.display()
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let c = load_config(&cli)?;
    match cli.command {
        Command::FitProps { samples, table } => fit_props(&c, &samples, table),
        Command::Optimize { p_in } => run_optimize(&with_p_in(c, p_in)?),
        Command::Evaluate { design, p_in } => evaluate(&with_p_in(c, p_in)?, &design),
        Command::RandomSamples { n, external } => random_samples(&c, n, external),
        Command::ExportGeometry { design } => export_geometry(&c, &design),
    }
}

/// 1 for numerical failures, 2 for everything the user can fix.
fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<voidlattice::Error>() {
        Some(err) if err.is_numerical() => 1,
        Some(voidlattice::Error::Degenerate(_)) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
