use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;
use switchgrad::export::{field_csv, paths_csv};
use switchgrad::grid::sample_subsolution;
use switchgrad::limits::{
    default_tol_hjb, default_tol_switch, diagnostics_bounds, extract_regions, hjb_residual,
    run_eps_limit_observed, ConvergenceTable, StageRecord,
};
use switchgrad::simulate::{
    estimate_value, martingale_check, sample_paths, tolerance_sensitivity, ControlPolicy,
    FeedbackPolicy, SimConfig, StartPoint,
};
use switchgrad::{
    validate as validate_spec, Error, FieldKind, FieldMatrix, Grid, Instance, Method, NpdsConfig,
    NpdsSolver, RegionMap,
};

use crate::manifest::RunManifest;
use crate::{ExportArgs, LimitArgs, MethodArg, RegionsArgs, SimulateArgs, SolveArgs};

const MIN_NODES: usize = 11;
const FEW_PATHS: usize = 100;

#[derive(Debug)]
pub enum CliError {
    Core(Error),
    /// Bad flags or inputs: exit 2.
    Usage(String),
    /// Assumption or domain failure: exit 1.
    Domain(String),
    /// Solver did not converge: exit 3.
    Numerical(String),
    MissingArtifact {
        path: PathBuf,
        command: &'static str,
    },
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(Error::Io(e))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(Error::Json(e))
    }
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Domain(_) => 1,
            CliError::Usage(_) | CliError::MissingArtifact { .. } => 2,
            CliError::Numerical(_) => 3,
            CliError::Core(e) => match e {
                Error::InvalidModel(_) | Error::NonElliptic { .. } | Error::OutOfDomain { .. } => 1,
                Error::Parse(_)
                | Error::InvalidConfig(_)
                | Error::InvalidGrid(_)
                | Error::InvalidEpsilon(_)
                | Error::Io(_)
                | Error::Json(_) => 2,
                Error::MonotonicityLoss { .. }
                | Error::LinearSolveFailure { .. }
                | Error::StalledContinuation { .. }
                | Error::StepExplosion { .. }
                | Error::NotPositiveDefinite { .. } => 3,
            },
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

struct Run {
    instance: Instance,
    manifest: RunManifest,
    out: PathBuf,
}

impl Run {
    fn open(command: &str, path: &Path, out: &Path, threads: usize) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let instance = switchgrad::parse_instance(&text)?;
        let report = validate_spec(&instance.spec);
        if !report.passed() {
            eprint!("{report}");
            return Err(CliError::Domain(
                "instance violates the model assumptions".into(),
            ));
        }
        fs::create_dir_all(out)?;
        Ok(Self {
            instance,
            manifest: RunManifest::new(command, path, &text, out, threads),
            out: out.to_path_buf(),
        })
    }

    fn write(&mut self, name: &str, contents: &str) -> Result<()> {
        fs::write(self.out.join(name), contents)?;
        self.manifest.artifacts.push(name.to_string());
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut s = serde_json::to_string_pretty(value)?;
        s.push('\n');
        self.write(name, &s)
    }

    fn finish(mut self) -> Result<()> {
        let name = self.manifest.file_name();
        self.manifest.artifacts.push(name.clone());
        let mut s = serde_json::to_string_pretty(&self.manifest)?;
        s.push('\n');
        fs::write(self.out.join(name), s)?;
        Ok(())
    }

    fn grid(&self, nodes: usize) -> Result<Grid> {
        if nodes < MIN_NODES {
            return Err(CliError::Usage(format!(
                "grid of {nodes} nodes per axis refused: at least {MIN_NODES} are required"
            )));
        }
        Ok(Grid::uniform(&self.instance.spec.domain, nodes)?)
    }
}

pub fn validate(path: &Path) -> Result<()> {
    let inst = switchgrad::load_instance(path)?;
    let report = validate_spec(&inst.spec);
    print!("{report}");
    let s = &inst.spec;
    println!(
        "dim {}, {} regime(s), {} chain state(s), estimated ellipticity {:.6}",
        s.dim(),
        s.idx.m,
        s.idx.n,
        s.theta_ellipticity
    );
    if report.passed() {
        println!("all assumptions hold");
        Ok(())
    } else {
        Err(CliError::Domain(format!(
            "{} assumption check(s) failed",
            report.failures().count()
        )))
    }
}

pub fn solve(a: &SolveArgs, threads: usize) -> Result<()> {
    let mut run = Run::open("solve", &a.instance, &a.out, threads)?;
    let mut solver_cfg = run.instance.solver.clone();
    if let Some(v) = a.eps {
        solver_cfg.eps = v;
    }
    if let Some(v) = a.delta {
        solver_cfg.delta = v;
    }
    if let Some(v) = a.grid {
        solver_cfg.grid = v;
    }
    if let Some(m) = a.method {
        solver_cfg.method = match m {
            MethodArg::Newton => Method::Newton,
            MethodArg::Picard => Method::Picard,
        };
    }
    if let Some(v) = a.tol {
        solver_cfg.tol_residual = v;
    }
    let grid = run.grid(solver_cfg.grid)?;
    let mut cfg = NpdsConfig::new(solver_cfg.eps, solver_cfg.delta).with_method(solver_cfg.method);
    cfg.tol_residual = solver_cfg.tol_residual;
    cfg.max_outer = solver_cfg.max_outer;
    cfg.damping = solver_cfg.damping;
    cfg.check()?;
    run.manifest.config = json!({ "solver": solver_cfg, "npds": cfg });
    let spec = run.instance.spec.clone();
    let solver = run
        .manifest
        .time("assemble", || NpdsSolver::new(&spec, &grid))?;
    let (u, report) = run.manifest.time("solve", || solver.solve(&cfg))?;
    run.write_json("field.json", &u)?;
    run.write("field.csv", &field_csv(&grid, &u))?;
    run.write_json("solve_report.json", &report)?;
    if let Some(sub) = sample_subsolution(&spec, &grid) {
        let cmp = solver.check_comparison(&sub, &u, &cfg)?;
        run.write_json("comparison.json", &cmp)?;
        if !cmp.passed {
            eprintln!(
                "warning: the supplied sub-solution exceeds the solution by {:.3e}",
                cmp.max_violation
            );
        }
    }
    println!(
        "converged {} after {} outer iterations ({} Newton, {} Picard); residual {:.3e} (tolerance {:.3e})",
        report.converged,
        report.outer_iterations,
        report.newton_steps,
        report.picard_steps,
        report.final_residual_sup,
        report.tolerance
    );
    if !report.bound_violations.is_empty() {
        eprintln!(
            "warning: {} node(s) outside [0, upper bound]",
            report.bound_violations.len()
        );
    }
    let converged = report.converged;
    run.finish()?;
    if converged {
        Ok(())
    } else {
        Err(CliError::Numerical(
            "penalized solve did not converge".into(),
        ))
    }
}

#[derive(Serialize)]
struct LimitSummary<'a> {
    eps: f64,
    tol_hjb: f64,
    tol_switch: f64,
    table: &'a ConvergenceTable,
    pc1: Vec<&'a switchgrad::limits::Pc1Report>,
    tail_gaps: Vec<Option<f64>>,
    switch_nodes: usize,
    gradient_active_nodes: usize,
    optim1_violations: usize,
    ordering_excess: f64,
}

pub fn limit(a: &LimitArgs, threads: usize) -> Result<()> {
    let mut run = Run::open("limit", &a.instance, &a.out, threads)?;
    let mut solver_cfg = run.instance.solver.clone();
    if let Some(v) = a.grid {
        solver_cfg.grid = v;
    }
    if let Some(v) = &a.epsilons {
        solver_cfg.epsilons = v.clone();
    }
    if let Some(v) = &a.deltas {
        solver_cfg.deltas = v.clone();
    }
    if a.no_exact_switching {
        solver_cfg.exact_switching = false;
    }
    if a.tol_hjb.is_some() {
        solver_cfg.tol_hjb = a.tol_hjb;
    }
    if a.tol_switch.is_some() {
        solver_cfg.tol_switch = a.tol_switch;
    }
    let grid = run.grid(solver_cfg.grid)?;
    let schedule = solver_cfg.schedule();
    schedule.check()?;
    let spec = run.instance.spec.clone();
    let solver = run
        .manifest
        .time("assemble", || NpdsSolver::new(&spec, &grid))?;
    let tol_hjb = solver_cfg
        .tol_hjb
        .unwrap_or_else(|| default_tol_hjb(&solver.disc));
    run.manifest.config = json!({ "solver": solver_cfg, "schedule": schedule, "tol_hjb": tol_hjb });

    let mut partial: Vec<(StageRecord, FieldMatrix)> = Vec::new();
    let outcome = run.manifest.time("continuation", || {
        run_eps_limit_observed(&solver, &schedule, &mut |rec, u| {
            partial.push((rec.clone(), u.clone()))
        })
    });
    let lim = match outcome {
        Ok(l) => l,
        Err(e) => {
            let table = ConvergenceTable {
                stages: partial.iter().map(|(r, _)| r.clone()).collect(),
                eps_gaps: Vec::new(),
            };
            run.write("convergence.partial.csv", &table.to_csv())?;
            if let Some((_, u)) = partial.last() {
                run.write_json("field.partial.json", u)?;
            }
            run.manifest.config["error"] = json!(e.to_string());
            run.finish()?;
            return Err(e.into());
        }
    };
    let sweep = lim.last_sweep();
    let u = &sweep.u_eps;
    let hjb = hjb_residual(&solver.disc, &lim.u, tol_hjb)?;
    let tol_switch = solver_cfg
        .tol_switch
        .unwrap_or_else(|| default_tol_switch(u));
    let regions = extract_regions(&solver.disc, u, tol_switch);
    let fields: Vec<&FieldMatrix> = lim.sweeps.iter().map(|s| &s.u_eps).collect();
    let bounds = diagnostics_bounds(&solver.disc, &fields)?;

    run.write_json("u_eps.json", u)?;
    run.write("u_eps.csv", &field_csv(&grid, u))?;
    run.write("convergence.csv", &lim.table.to_csv())?;
    run.write_json("hjb_report.json", &hjb)?;
    run.write_json("regions.json", &regions)?;
    run.write("regions.csv", &regions.to_csv(&solver.disc))?;
    run.write_json("bounds.json", &bounds)?;
    let eps = *schedule.epsilons.last().expect("checked schedule");
    let summary = LimitSummary {
        eps,
        tol_hjb,
        tol_switch,
        table: &lim.table,
        pc1: lim.sweeps.iter().map(|s| &s.pc1).collect(),
        tail_gaps: lim.sweeps.iter().map(|s| s.tail_gap).collect(),
        switch_nodes: regions.switch_count(),
        gradient_active_nodes: regions
            .count(|l| matches!(l, switchgrad::RegionLabel::GradientActive)),
        optim1_violations: regions.optim1_violations.len(),
        ordering_excess: lim.ordering_excess,
    };
    if !lim.ordered(tol_hjb) {
        eprintln!(
            "warning: the limit exceeds a coarser u^eps by {:.3e} somewhere",
            lim.ordering_excess
        );
    }
    run.write_json("limit_report.json", &summary)?;
    println!("eps gaps {:?}", lim.table.eps_gaps);
    println!(
        "HJB at tol {:.3e}: {} violation(s), max positive branch {:.3e}, max gradient excess {:.3e}",
        tol_hjb, hjb.violations, hjb.max_positive, hjb.max_gradient_excess
    );
    println!(
        "regions: {} switch, {} gradient-active rows; {} consistency violation(s)",
        summary.switch_nodes, summary.gradient_active_nodes, summary.optim1_violations
    );
    run.finish()
}

fn load_field(out: &Path, name: &str, command: &'static str) -> Result<FieldMatrix> {
    let path = out.join(name);
    if !path.exists() {
        return Err(CliError::MissingArtifact { path, command });
    }
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

fn load_regions(out: &Path) -> Result<RegionMap> {
    let path = out.join("regions.json");
    if !path.exists() {
        return Err(CliError::MissingArtifact {
            path,
            command: "limit",
        });
    }
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

fn field_eps(u: &FieldMatrix) -> Result<f64> {
    match u.kind {
        FieldKind::EpsLimit { eps } | FieldKind::Penalized { eps, .. } => Ok(eps),
        _ => Err(CliError::Usage(
            "stored field carries no penalty parameter".into(),
        )),
    }
}

fn solver_for(run: &Run, u: &FieldMatrix) -> Result<NpdsSolver> {
    let grid = Grid::from_meta(&u.grid)?;
    let s = &run.instance.spec;
    u.check_shape(s.idx.m, s.idx.n, &grid)
        .map_err(|_| CliError::Usage("stored field does not match the instance".into()))?;
    Ok(NpdsSolver::new(s, &grid)?)
}

pub fn regions(a: &RegionsArgs, threads: usize) -> Result<()> {
    let mut run = Run::open("regions", &a.instance, &a.out, threads)?;
    let u = load_field(&a.out, "u_eps.json", "limit")?;
    let solver = solver_for(&run, &u)?;
    let tol = a
        .tol_switch
        .or(run.instance.solver.tol_switch)
        .unwrap_or_else(|| default_tol_switch(&u));
    run.manifest.config = json!({ "tol_switch": tol });
    let map = run
        .manifest
        .time("extract", || extract_regions(&solver.disc, &u, tol));
    run.write_json("regions.json", &map)?;
    run.write("regions.csv", &map.to_csv(&solver.disc))?;
    println!(
        "{} switch rows, {} consistency violation(s) at tol_switch {:.3e}",
        map.switch_count(),
        map.optim1_violations.len(),
        tol
    );
    run.finish()
}

#[derive(Serialize)]
struct StartRecord {
    x: Vec<f64>,
    regime: usize,
    state: usize,
}

pub fn simulate(a: &SimulateArgs, threads: usize) -> Result<()> {
    let mut run = Run::open("simulate", &a.instance, &a.out, threads)?;
    let mut sim = run.instance.simulation.clone();
    if let Some(v) = a.paths {
        sim.paths = v;
    }
    if let Some(v) = a.dt {
        sim.dt = v;
    }
    if let Some(v) = a.seed {
        sim.seed = v;
    }
    if let Some(v) = &a.x0 {
        sim.x0 = Some(v.clone());
    }
    if let Some(v) = a.l0 {
        sim.regime = v;
    }
    if let Some(v) = a.i0 {
        sim.state = v;
    }
    if let Some(v) = a.probe_time {
        sim.probe_time = v;
    }
    if let Some(v) = a.dump_paths {
        sim.dump_paths = v;
    }
    let spec = run.instance.spec.clone();
    if sim.regime == 0 || sim.regime > spec.idx.m || sim.state == 0 || sim.state > spec.idx.n {
        return Err(CliError::Usage(format!(
            "start regime/state must lie in 1..={} / 1..={}",
            spec.idx.m, spec.idx.n
        )));
    }
    run.instance.simulation = sim.clone();
    let start: StartPoint = run.instance.start_point();
    if start.x[..spec.dim()].len() != spec.dim()
        || sim.x0.as_ref().is_some_and(|x| x.len() != spec.dim())
    {
        return Err(CliError::Usage(format!(
            "--x0 needs {} coordinate(s)",
            spec.dim()
        )));
    }

    let (u, regions) = if a.inline {
        let lim_args = LimitArgs {
            instance: a.instance.clone(),
            grid: None,
            epsilons: None,
            deltas: None,
            no_exact_switching: false,
            tol_hjb: None,
            tol_switch: None,
            out: a.out.clone(),
        };
        limit(&lim_args, threads)?;
        (
            load_field(&a.out, "u_eps.json", "limit")?,
            load_regions(&a.out)?,
        )
    } else {
        (
            load_field(&a.out, "u_eps.json", "limit")?,
            load_regions(&a.out)?,
        )
    };
    let eps = field_eps(&u)?;
    let solver = solver_for(&run, &u)?;
    let policy = FeedbackPolicy::new(&solver.disc, &u, &regions, eps)?;

    let mut cfg = SimConfig::new(sim.dt, sim.paths, sim.seed, eps);
    cfg.horizon_cap = sim.horizon_cap;
    cfg.bridge_exit = sim.bridge_exit;
    cfg.check()?;
    let mut probe_cfg = cfg.clone();
    probe_cfg.dt = a.probe_dt.unwrap_or(cfg.dt);
    run.manifest.config = json!({
        "simulation": sim,
        "sim_config": cfg,
        "probe_config": probe_cfg,
        "eps": eps,
        "tol_switch": policy.tol_switch(),
        "zeta_cap": policy.zeta_cap(),
        "horizon": cfg.horizon(&spec),
    });
    if sim.paths < FEW_PATHS {
        eprintln!(
            "warning: only {} path(s); the standard error will be large",
            sim.paths
        );
    }

    let target = policy
        .continuation_value(&start.x, start.regime, start.state)
        .expect("feedback policies carry a value");
    let estimate = run
        .manifest
        .time("estimate", || estimate_value(&spec, &policy, &cfg, &start))?;
    if estimate.heavy_censoring {
        eprintln!(
            "warning: {:.2}% of paths were censored at the horizon",
            100.0 * estimate.censored_fraction
        );
    }
    let start_record = StartRecord {
        x: start.x[..spec.dim()].to_vec(),
        regime: start.regime + 1,
        state: start.state + 1,
    };
    run.write_json(
        "estimate.json",
        &json!({
            "start": start_record,
            "value_at_start": target,
            "difference": estimate.mean - target,
            "estimate": estimate,
        }),
    )?;
    let mart = run.manifest.time("martingale", || {
        martingale_check(&spec, &policy, &probe_cfg, &start, sim.probe_time)
    })?;
    run.write_json("martingale.json", &mart)?;
    if a.sensitivity {
        let sens = run.manifest.time("sensitivity", || {
            tolerance_sensitivity(&spec, &policy, &cfg, &start)
        })?;
        run.write_json("sensitivity.json", &sens)?;
        println!(
            "switching tolerance x100 changes the estimate by {:.3e} (combined standard error {:.3e})",
            sens.difference, sens.combined_std_error
        );
    }
    if sim.dump_paths > 0 {
        let paths = sample_paths(&spec, &policy, &cfg, &start, sim.dump_paths)?;
        run.write("paths.csv", &paths_csv(&paths))?;
    }
    println!(
        "u^eps(x0) = {:.6}; Monte Carlo {:.6} +- {:.2e} over {} paths (difference {:+.3e})",
        target,
        estimate.mean,
        estimate.std_error,
        estimate.n_paths,
        estimate.mean - target
    );
    println!(
        "martingale check at t = {}: z = {:.3}",
        mart.probe_time, mart.z_score
    );
    run.finish()
}

pub fn export(a: &ExportArgs, threads: usize) -> Result<()> {
    let mut run = Run::open("export", &a.instance, &a.out, threads)?;
    let mut written = 0;
    for (json_name, csv_name) in [
        ("field.json", "field.csv"),
        ("u_eps.json", "u_eps.csv"),
        ("field.partial.json", "field.partial.csv"),
    ] {
        if !a.out.join(json_name).exists() {
            continue;
        }
        let u = load_field(&a.out, json_name, "solve")?;
        let grid = Grid::from_meta(&u.grid)?;
        run.write(csv_name, &field_csv(&grid, &u))?;
        written += 1;
    }
    if a.out.join("regions.json").exists() && a.out.join("u_eps.json").exists() {
        let u = load_field(&a.out, "u_eps.json", "limit")?;
        let solver = solver_for(&run, &u)?;
        let map = load_regions(&a.out)?;
        run.write("regions.csv", &map.to_csv(&solver.disc))?;
        written += 1;
    }
    if written == 0 {
        return Err(CliError::MissingArtifact {
            path: a.out.join("field.json"),
            command: "solve",
        });
    }
    println!("exported {written} artifact(s) to {}", a.out.display());
    run.finish()
}
