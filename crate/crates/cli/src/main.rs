//! `wsestencil`: run the reference or distributed solver, compare fields, and
//! print performance and roofline reports.
//!
//! Exit codes: 0 success, 1 comparison beyond tolerance, 2 bad config or
//! usage, 3 numerical instability, 4 fabric protocol error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, ValueEnum};
use serde_json::{json, Value};

use stencil_core::config::RunConfig;
use stencil_core::perf::{self, InstructionMix, MachineSpec, Resource};
use stencil_core::reference::{self, make_coefficients, SimConfig, Wavefield};
use stencil_core::snapshot::{compare, Snapshot};
use stencil_core::wse::DistributedSolver;
use stencil_core::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    Reference,
    WseSim,
    Compare,
    Perf,
    Roofline,
}

#[derive(Debug, Parser)]
#[command(name = "wsestencil", version, about = "25-point stencil solver on a simulated wafer-scale fabric")]
struct Args {
    #[arg(long, value_enum)]
    mode: Mode,
    /// JSON run description.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory, created if missing.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    steps_override: Option<usize>,
    /// Max relative error accepted by compare mode.
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    /// Write the fabric event trace (wse-sim only).
    #[arg(long)]
    trace: bool,
    /// Overrides the seed of a random velocity model.
    #[arg(long)]
    seed: Option<u64>,
    /// Write a snapshot every N steps in addition to the final one.
    #[arg(long, default_value_t = 0)]
    snapshot_every: usize,
    /// Field compared in compare mode (the one under test).
    #[arg(long, requires = "field_b")]
    field_a: Option<PathBuf>,
    /// Field compared against.
    #[arg(long, requires = "field_a")]
    field_b: Option<PathBuf>,
}

enum Failure {
    Tolerance(String),
    Usage(String),
    Instability(String),
    Fabric(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Tolerance(_) => 1,
            Failure::Usage(_) => 2,
            Failure::Instability(_) => 3,
            Failure::Fabric(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Tolerance(m) | Failure::Usage(m) | Failure::Instability(m) | Failure::Fabric(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Instability { .. } => Failure::Instability(e.to_string()),
            Error::Fabric(_) => Failure::Fabric(e.to_string()),
            _ => Failure::Usage(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Usage(e.to_string())
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args = Args::parse();
    match dispatch(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("wsestencil: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

fn dispatch(args: &Args) -> Outcome {
    fs::create_dir_all(&args.out)?;
    match args.mode {
        Mode::Reference => {
            let cfg = load(args)?;
            run_reference(args, &cfg).map(|_| ())
        }
        Mode::WseSim => {
            let cfg = load(args)?;
            run_wse(args, &cfg).map(|_| ())
        }
        Mode::Compare => run_compare(args),
        Mode::Perf => run_perf(args),
        Mode::Roofline => run_roofline(args),
    }
}

fn load(args: &Args) -> Result<RunConfig, Failure> {
    let path = args
        .config
        .as_ref()
        .ok_or_else(|| Failure::Usage("--config is required for this mode".into()))?;
    let mut cfg = RunConfig::load(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    if let Some(steps) = args.steps_override {
        cfg.time.steps = steps;
    }
    Ok(cfg)
}

fn load_optional(args: &Args) -> Result<Option<RunConfig>, Failure> {
    args.config.as_ref().map(|_| load(args)).transpose()
}

fn write_json(path: &Path, value: &Value) -> Outcome {
    fs::write(path, serde_json::to_string_pretty(value).expect("json") + "\n")?;
    Ok(())
}

fn snapshot_path(out: &Path, engine: &str, step: Option<usize>) -> PathBuf {
    match step {
        Some(n) => out.join(format!("{engine}_step{n:06}.wsf")),
        None => out.join(format!("{engine}.wsf")),
    }
}

fn write_snapshot(out: &Path, engine: &str, step: Option<usize>, wf: &Wavefield) -> Outcome {
    Snapshot::new(&wf.grid, wf.curr.clone())?.write(&snapshot_path(out, engine, step))?;
    Ok(())
}

fn summary(engine: &str, sim: &SimConfig, wf: &Wavefield, seconds: f64) -> Value {
    let g = sim.grid;
    json!({
        "engine": engine,
        "grid": { "nx": g.nx, "ny": g.ny, "nz": g.nz, "dx_m": g.dx, "dy_m": g.dy, "dz_m": g.dz },
        "steps": sim.steps,
        "dt_s": sim.dt,
        "courant_number": sim.courant_number(),
        "field_max_abs": wf.max_abs(),
        "field_energy": wf.energy(),
        "timing": {
            "wall_time_s": seconds,
            "throughput_gcell_per_s": perf::throughput(g.nx as u64, g.ny as u64, g.nz as u64, sim.steps as u64, seconds.max(1e-12)),
        },
    })
}

fn run_reference(args: &Args, cfg: &RunConfig) -> Result<Wavefield, Failure> {
    let sim = cfg.sim_config(args.seed)?;
    let coeffs = make_coefficients(&sim.grid, 8)?;
    let courant = sim.courant_number();
    if courant > sim.courant_warning {
        log::warn!("Courant number {courant:.3} exceeds {:.3}; the run may be unstable", sim.courant_warning);
    }
    let start = Instant::now();
    let mut wf = Wavefield::zeros(&sim.grid);
    for n in 1..=sim.steps {
        wf = reference::step(&wf, &sim, &coeffs, n)?;
        if args.snapshot_every > 0 && n % args.snapshot_every == 0 {
            write_snapshot(&args.out, "reference", Some(n), &wf)?;
        }
    }
    let seconds = start.elapsed().as_secs_f64();
    write_snapshot(&args.out, "reference", None, &wf)?;
    write_json(&args.out.join("reference_summary.json"), &summary("reference", &sim, &wf, seconds))?;
    Ok(wf)
}

fn run_wse(args: &Args, cfg: &RunConfig) -> Result<Wavefield, Failure> {
    let sim = cfg.sim_config(args.seed)?;
    let courant = sim.courant_number();
    if courant > sim.courant_warning {
        log::warn!("Courant number {courant:.3} exceeds {:.3}; the run may be unstable", sim.courant_warning);
    }
    let mut solver = DistributedSolver::with_memory(sim.clone(), cfg.fabric()?, cfg.memory()?, cfg.fabric.blocks)?;
    if args.trace {
        solver.fabric_mut().enable_trace();
    }
    let start = Instant::now();
    for _ in 0..sim.steps {
        let n = solver.step()?;
        if args.snapshot_every > 0 && n % args.snapshot_every == 0 {
            write_snapshot(&args.out, "wse", Some(n), &solver.wavefield())?;
        }
    }
    let seconds = start.elapsed().as_secs_f64();
    let wf = solver.wavefield();
    write_snapshot(&args.out, "wse", None, &wf)?;
    let plan = solver.plan();
    let mut s = summary("wse-sim", &sim, &wf, seconds);
    s["block_plan"] = json!({ "b_cells": plan.b, "k_blocks": plan.k });
    s["communication"] = serde_json::to_value(solver.stats()).expect("json");
    write_json(&args.out.join("wse_summary.json"), &s)?;
    write_json(&args.out.join("traffic.json"), &solver.fabric().traffic_report())?;
    if args.trace {
        let mut csv = String::from(stencil_core::fabric::TraceRecord::CSV_HEADER);
        csv.push('\n');
        for r in solver.fabric_mut().take_trace() {
            csv += &r.to_csv();
            csv.push('\n');
        }
        fs::write(args.out.join("trace.csv"), csv)?;
    }
    Ok(wf)
}

fn run_compare(args: &Args) -> Outcome {
    let (actual, expected) = match (&args.field_a, &args.field_b) {
        (Some(a), Some(b)) => (Snapshot::read(a)?, Snapshot::read(b)?),
        _ => {
            let cfg = load(args)?;
            let expected = run_reference(args, &cfg)?;
            let actual = run_wse(args, &cfg)?;
            (
                Snapshot::new(&actual.grid, actual.curr)?,
                Snapshot::new(&expected.grid, expected.curr)?,
            )
        }
    };
    let c = compare(&actual, &expected)?;
    let report = json!({
        "max_rel_error": c.max_rel_error,
        "mean_rel_error": c.mean_rel_error,
        "worst_cell": { "i": c.worst_cell.0, "j": c.worst_cell.1, "k": c.worst_cell.2 },
        "actual_at_worst": c.actual_at_worst,
        "expected_at_worst": c.expected_at_worst,
        "normalization_max_abs": c.scale,
        "tolerance": args.tolerance,
        "pass": c.within(args.tolerance),
    });
    write_json(&args.out.join("compare.json"), &report)?;
    println!("{}", serde_json::to_string_pretty(&report).expect("json"));
    if c.within(args.tolerance) {
        Ok(())
    } else {
        Err(Failure::Tolerance(format!(
            "max relative error {:.3e} exceeds tolerance {:.3e} at cell {:?}",
            c.max_rel_error, args.tolerance, c.worst_cell
        )))
    }
}

fn perf_inputs(args: &Args) -> Result<(MachineSpec, Vec<perf::RunRow>, usize), Failure> {
    let section = load_optional(args)?.map(|c| c.perf).unwrap_or_default();
    Ok((section.machine()?, section.rows(), section.reference_row))
}

fn run_perf(args: &Args) -> Outcome {
    let (spec, rows, reference) = perf_inputs(args)?;
    let report = perf::perf_report(&spec, &rows, reference)?;
    let value = serde_json::to_value(&report).expect("json");
    write_json(&args.out.join("perf_report.json"), &value)?;
    let mut csv = String::from("label,time_s,gcell_per_s,gcell_per_s_listed,weak_scaling_efficiency\n");
    for r in &report.weak_scaling {
        let listed = r.gcells_per_s_listed.map(|v| format!("{v:.2}")).unwrap_or_default();
        csv += &format!("{},{},{:.2},{},{:.4}\n", r.label, r.time_s, r.gcells_per_s, listed, r.extra);
    }
    fs::write(args.out.join("throughput.csv"), &csv)?;
    print!("{csv}");
    println!(
        "flop rate: {:.1} TFLOP/s total, {:.1} MFLOP/s per PE",
        report.total_tflop_per_s, report.per_pe_mflop_per_s
    );
    Ok(())
}

fn run_roofline(args: &Args) -> Outcome {
    let (spec, rows, reference) = perf_inputs(args)?;
    let report = perf::perf_report(&spec, &rows, reference)?;
    let csv = perf::points_csv(&report.points);
    fs::write(args.out.join("roofline.csv"), &csv)?;
    for r in [Resource::Memory, Resource::Fabric] {
        fs::write(
            args.out.join(format!("roofline_{}.dat", r.name())),
            perf::roofline_dat(&spec, r, &report.points),
        )?;
    }
    let mix = InstructionMix::wse2();
    let value = json!({
        "machine": spec,
        "points": report.points,
        "ridge_ai_memory_flop_per_byte": spec.ridge(Resource::Memory),
        "ridge_ai_fabric_flop_per_byte": spec.ridge(Resource::Fabric),
        "memory_words_per_cell": mix.memory_words(f64::INFINITY),
        "memory_words_per_cell_table": InstructionMix::table().memory_words(f64::INFINITY),
        "fabric_words_per_cell": mix.fabric_words(),
    });
    write_json(&args.out.join("roofline.json"), &value)?;
    print!("{csv}");
    Ok(())
}
