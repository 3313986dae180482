//! `qland`: landscapes, stationary densities and training runs from the
//! command line.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use qland_core::dynamics::{analyze_crossings, run_schedule, CrossingReport, Model, Phase, Schedule, Trajectory};
use qland_core::envs::{
    build_example1, build_gridworld, enumerate_minibatches, gridworld_batch, parse_state_list, EmbeddingTable,
    EnvironmentDocument, Mdp, MiniBatch, DEFAULT_GRIDWORLD_SUBSET, GRIDWORLD_EMBED_SEED, GRIDWORLD_INIT_SEED,
};
use qland_core::fpe::io::{write_grid_file, GridHeader};
use qland_core::fpe::{
    classify_critical_point, decompose_force, direct_loss_grid, sample_force_field, steady_state, CriticalPoint,
    FpeConfig, Grid2D, SolverMode,
};
use qland_core::nn::{Mlp, MlpDocument, MlpInit, SMALL_NET_DIMS, GRIDWORLD_HIDDEN};
use qland_core::qlinear::{SolutionPair, Theta, TwoSampleBatch};
use qland_core::{fmt_f64, verify, Error, GradMode};

#[derive(Parser)]
#[command(name = "qland", version, about = "Effective loss landscapes of semi-gradient Q-learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Closed-form solutions of a two-sample batch, or the table for all batches.
    Solutions(RunArgs),
    /// Bellman loss on a grid (CSV).
    Landscape(RunArgs),
    /// Stationary density, effective loss, flux and force decomposition (CSV).
    Effective(RunArgs),
    /// Residual/semi descent on the linear model (trajectory CSV, crossings JSON).
    Dynamics(RunArgs),
    /// Residual/semi descent on a network (trajectory CSV, crossings JSON, final net).
    NnDynamics(RunArgs),
    /// Run the built-in numeric checks.
    Verify(VerifyArgs),
}

#[derive(Args, Default)]
struct RunArgs {
    /// JSON config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `example1`, `gridworld`, or an environment JSON file.
    #[arg(long)]
    env: Option<String>,
    /// Transitions such as `s1a1s2,s1a2s3`.
    #[arg(long)]
    batch: Option<String>,
    /// Process every two-sample batch of the environment.
    #[arg(long)]
    all_batches: bool,
    /// Grid-world states to sample, e.g. `s1-s11`.
    #[arg(long)]
    subset: Option<String>,
    /// `semi` or `residual`; for dynamics a comma list, one per phase.
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    sigma: Option<f64>,
    /// `x_min,x_max,y_min,y_max`.
    #[arg(long, allow_hyphen_values = true)]
    extent: Option<String>,
    #[arg(long)]
    resolution: Option<f64>,
    /// `nullspace` or `propagate`.
    #[arg(long)]
    solver: Option<String>,
    #[arg(long)]
    propagation_time: Option<f64>,
    #[arg(long)]
    time_step: Option<f64>,
    #[arg(long)]
    steady_tolerance: Option<f64>,
    /// Steps per phase, comma separated.
    #[arg(long)]
    steps: Option<String>,
    /// Learning rate per phase (one value applies to all).
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    momentum: Option<String>,
    #[arg(long)]
    damping: Option<String>,
    /// Linear starting point `a1,a2`.
    #[arg(long, allow_hyphen_values = true)]
    start: Option<String>,
    /// Hidden layer widths, comma separated.
    #[arg(long)]
    hidden: Option<String>,
    #[arg(long)]
    seed_embed: Option<u64>,
    /// Seed of the network initialization (otherwise the fixed one-input
    /// initialization on the chain environment).
    #[arg(long)]
    seed_init: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for independent jobs.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long)]
    jobs: Option<usize>,
}

/// Every setting a run can take, as read from a config file.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Settings {
    env: Option<String>,
    batch: Option<String>,
    all_batches: Option<bool>,
    subset: Option<String>,
    method: Option<Vec<GradMode>>,
    sigma: Option<f64>,
    extent: Option<[f64; 4]>,
    resolution: Option<f64>,
    solver: Option<SolverMode>,
    propagation_time: Option<f64>,
    time_step: Option<f64>,
    steady_tolerance: Option<f64>,
    steps: Option<Vec<usize>>,
    lr: Option<Vec<f64>>,
    momentum: Option<Vec<f64>>,
    damping: Option<Vec<f64>>,
    start: Option<[f64; 2]>,
    hidden: Option<Vec<usize>>,
    seed_embed: Option<u64>,
    seed_init: Option<u64>,
    out: Option<PathBuf>,
    jobs: Option<usize>,
}

fn parse_list<T: std::str::FromStr>(flag: &str, text: &str) -> Result<Vec<T>, Error> {
    text.split(',')
        .map(|x| x.trim().parse().map_err(|_| Error::Parse(format!("--{flag}: cannot parse `{}`", x.trim()))))
        .collect()
}

fn parse_array<const N: usize>(flag: &str, text: &str) -> Result<[f64; N], Error> {
    let v: Vec<f64> = parse_list(flag, text)?;
    v.try_into().map_err(|_| Error::Parse(format!("--{flag} needs {N} comma-separated numbers")))
}

impl Settings {
    fn from_flags(a: &RunArgs) -> Result<Self, Error> {
        Ok(Settings {
            env: a.env.clone(),
            batch: a.batch.clone(),
            all_batches: a.all_batches.then_some(true),
            subset: a.subset.clone(),
            method: a.method.as_deref().map(|m| parse_list("method", m)).transpose()?,
            sigma: a.sigma,
            extent: a.extent.as_deref().map(|e| parse_array("extent", e)).transpose()?,
            resolution: a.resolution,
            solver: a.solver.as_deref().map(str::parse).transpose()?,
            propagation_time: a.propagation_time,
            time_step: a.time_step,
            steady_tolerance: a.steady_tolerance,
            steps: a.steps.as_deref().map(|s| parse_list("steps", s)).transpose()?,
            lr: a.lr.as_deref().map(|s| parse_list("lr", s)).transpose()?,
            momentum: a.momentum.as_deref().map(|s| parse_list("momentum", s)).transpose()?,
            damping: a.damping.as_deref().map(|s| parse_list("damping", s)).transpose()?,
            start: a.start.as_deref().map(|s| parse_array("start", s)).transpose()?,
            hidden: a.hidden.as_deref().map(|s| parse_list("hidden", s)).transpose()?,
            seed_embed: a.seed_embed,
            seed_init: a.seed_init,
            out: a.out.clone(),
            jobs: a.jobs,
        })
    }

    /// Flags first, then the config file.
    fn merge(self, file: Settings) -> Settings {
        macro_rules! pick {
            ($($f:ident),*) => { Settings { $($f: self.$f.or(file.$f)),* } };
        }
        pick!(
            env, batch, all_batches, subset, method, sigma, extent, resolution, solver, propagation_time, time_step,
            steady_tolerance, steps, lr, momentum, damping, start, hidden, seed_embed, seed_init, out, jobs
        )
    }

    fn load(args: &RunArgs) -> anyhow::Result<Settings> {
        let flags = Settings::from_flags(args)?;
        let file = match &args.config {
            Some(path) => {
                let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                serde_json::from_str(&text)
                    .map_err(|e| Error::Parse(format!("config {}: {e}", path.display())))?
            }
            None => Settings::default(),
        };
        let s = flags.merge(file);
        if let Some(n) = s.jobs {
            init_pool(n)?;
        }
        Ok(s)
    }

    fn out_dir(&self) -> anyhow::Result<PathBuf> {
        let dir = self.out.clone().unwrap_or_else(|| PathBuf::from("out"));
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(dir)
    }

    fn environment(&self) -> anyhow::Result<(Mdp, EmbeddingTable)> {
        let name = self.env.as_deref().unwrap_or("example1");
        Ok(match name {
            "example1" => build_example1(),
            "gridworld" => build_gridworld(self.seed_embed.unwrap_or(GRIDWORLD_EMBED_SEED)),
            path if path.ends_with(".json") => {
                let text = fs::read_to_string(path).with_context(|| format!("reading {path}"))?;
                let doc: EnvironmentDocument =
                    serde_json::from_str(&text).map_err(|e| Error::Parse(format!("environment {path}: {e}")))?;
                doc.into_parts()?
            }
            other => return Err(Error::Parse(format!("unknown environment `{other}`")).into()),
        })
    }

    /// The selected two-sample batches: all of them, or the one named.
    fn batches(&self, mdp: &Mdp) -> anyhow::Result<Vec<MiniBatch>> {
        if self.all_batches == Some(true) {
            return Ok(enumerate_minibatches(mdp)?);
        }
        Ok(vec![MiniBatch::parse(self.batch.as_deref().unwrap_or("s1a1s2,s1a2s3"), mdp)?])
    }

    fn single_method(&self) -> anyhow::Result<GradMode> {
        match self.method.as_deref() {
            None => Ok(GradMode::Semi),
            Some([m]) => Ok(*m),
            Some(_) => Err(Error::precondition("expected a single --method").into()),
        }
    }

    fn fpe_config(&self) -> FpeConfig {
        let d = FpeConfig::default();
        FpeConfig {
            sigma: self.sigma.unwrap_or(d.sigma),
            propagation_time: self.propagation_time.unwrap_or(d.propagation_time),
            time_step: self.time_step.unwrap_or(d.time_step),
            solver_mode: self.solver.unwrap_or(d.solver_mode),
            steady_tolerance: self.steady_tolerance.unwrap_or(d.steady_tolerance),
        }
    }

    fn grid(&self, sols: &SolutionPair) -> anyhow::Result<Grid2D> {
        Ok(match (self.extent, self.resolution) {
            (Some(e), r) => Grid2D::from_extent(e, r.unwrap_or(qland_core::fpe::DEFAULT_RESOLUTION))?,
            (None, Some(r)) => {
                let center = sols.center().ok_or_else(|| Error::precondition("batch has no solution"))?;
                Grid2D::centered(center, qland_core::fpe::DEFAULT_CELLS, r)?
            }
            (None, None) => Grid2D::default_for(sols)?,
        })
    }

    /// Phases from the flags, filling gaps from `base`. Lists of length one
    /// apply to every phase.
    fn schedule(&self, base: Schedule) -> anyhow::Result<Schedule> {
        let n = [
            self.method.as_ref().map(Vec::len),
            self.steps.as_ref().map(Vec::len),
            self.lr.as_ref().map(Vec::len),
            self.momentum.as_ref().map(Vec::len),
            self.damping.as_ref().map(Vec::len),
        ]
        .into_iter()
        .flatten()
        .fold(base.phases.len(), usize::max);
        fn pick<T: Copy>(name: &str, list: &Option<Vec<T>>, k: usize, n: usize, fallback: Option<T>) -> anyhow::Result<T> {
            match list.as_deref() {
                Some([one]) => Ok(*one),
                Some(v) if v.len() == n => Ok(v[k]),
                Some(v) => Err(Error::precondition(format!("--{name} has {} values for {n} phases", v.len())).into()),
                None => fallback.ok_or_else(|| Error::precondition(format!("--{name} is needed for phase {}", k + 1)).into()),
            }
        }
        let mut phases = Vec::with_capacity(n);
        for k in 0..n {
            let b = base.phases.get(k).copied();
            phases.push(Phase {
                method: pick("method", &self.method, k, n, b.map(|p| p.method))?,
                steps: pick("steps", &self.steps, k, n, b.map(|p| p.steps))?,
                lr: pick("lr", &self.lr, k, n, b.map(|p| p.lr))?,
                momentum: pick("momentum", &self.momentum, k, n, Some(b.map_or(0.0, |p| p.momentum)))?,
                damping: pick("damping", &self.damping, k, n, Some(b.map_or(0.0, |p| p.damping)))?,
            });
        }
        Ok(Schedule::new(phases)?)
    }
}

fn init_pool(n: usize) -> anyhow::Result<()> {
    if n == 0 {
        return Err(Error::precondition("--jobs must be at least 1").into());
    }
    // A second initialization in the same process is harmless.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn theta_text(t: Option<Theta>) -> String {
    t.map_or_else(|| "-".to_string(), |t| format!("({}, {})", fmt_f64(t.a1), fmt_f64(t.a2)))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn cmd_solutions(s: &Settings) -> anyhow::Result<()> {
    let (mdp, emb) = s.environment()?;
    let batches = if s.batch.is_none() { enumerate_minibatches(&mdp)? } else { s.batches(&mdp)? };
    let mut counts = [0usize; 3];
    let mut rows = Vec::new();
    println!("{:<16} {:>9}  {:<52} {:<52}", "batch", "solutions", "theta_pi1", "theta_pi2");
    for b in &batches {
        let sols = TwoSampleBatch::new(b, &emb, mdp.gamma())?.solutions()?;
        counts[sols.count()] += 1;
        let note = if sols.coincident { "  (coincident)" } else { "" };
        println!(
            "{:<16} {:>9}  {:<52} {:<52}{note}",
            b.label(),
            sols.count(),
            theta_text(sols.theta_pi1),
            theta_text(sols.theta_pi2)
        );
        rows.push(serde_json::json!({ "batch": b.label(), "count": sols.count(), "solutions": sols }));
    }
    if batches.len() > 1 {
        println!("one-solution batches: {}", counts[1]);
        println!("two-solution batches: {}", counts[2]);
    }
    if s.out.is_some() {
        write_json(&s.out_dir()?.join("solutions.json"), &rows)?;
    }
    Ok(())
}

fn cmd_landscape(s: &Settings) -> anyhow::Result<()> {
    let (mdp, emb) = s.environment()?;
    let dir = s.out_dir()?;
    let batches = s.batches(&mdp)?;
    batches.par_iter().try_for_each(|b| -> anyhow::Result<()> {
        let sols = TwoSampleBatch::new(b, &emb, mdp.gamma())?.solutions()?;
        let grid = s.grid(&sols)?;
        let loss = direct_loss_grid(b, &emb, mdp.gamma(), grid)?;
        let path = dir.join(format!("landscape_{}.csv", b.label()));
        loss.write_csv(&path, 0.0)?;
        println!("{}", path.display());
        Ok(())
    })
}

#[derive(Serialize)]
struct EffectiveSummary {
    batch: String,
    method: GradMode,
    grid: Grid2D,
    fpe: FpeConfig,
    residual_norm: f64,
    tolerance: f64,
    masked_cells: Vec<usize>,
    solutions: SolutionPair,
    critical_pi1: Option<CriticalPoint>,
    critical_pi2: Option<CriticalPoint>,
}

fn effective_one(s: &Settings, b: &MiniBatch, emb: &EmbeddingTable, gamma: f64, dir: &Path) -> anyhow::Result<String> {
    let method = s.single_method()?;
    let cfg = s.fpe_config();
    let two = TwoSampleBatch::new(b, emb, gamma)?;
    let sols = two.solutions()?;
    let grid = s.grid(&sols)?;
    let field = sample_force_field(|t| two.force(method, t), grid)?;
    let r = steady_state(&field, &cfg)?;
    let d = decompose_force(&field, &r)?;
    let stem = format!("effective_{}_{}", b.label(), method);
    let header = GridHeader::new(grid, cfg.sigma);
    let files: [(&str, &[f64]); 10] = [
        ("rho", &r.rho),
        ("u_eff", &r.u_eff),
        ("flux_x", &r.flux_x),
        ("flux_y", &r.flux_y),
        ("force_x", &field.fx),
        ("force_y", &field.fy),
        ("gradient_x", &d.gradient.fx),
        ("gradient_y", &d.gradient.fy),
        ("flux_field_x", &d.flux.fx),
        ("flux_field_y", &d.flux.fy),
    ];
    for (name, values) in files {
        write_grid_file(&dir.join(format!("{stem}_{name}.csv")), &header, values)?;
    }
    let u = r.u_eff_grid();
    let classify = |t: Option<Theta>| t.and_then(|t| classify_critical_point(&u, t, 1).ok());
    let summary = EffectiveSummary {
        batch: b.label(),
        method,
        grid,
        fpe: cfg,
        residual_norm: r.residual_norm,
        tolerance: r.tolerance,
        masked_cells: d.masked,
        solutions: sols,
        critical_pi1: classify(sols.theta_pi1),
        critical_pi2: classify(sols.theta_pi2),
    };
    write_json(&dir.join(format!("{stem}_summary.json")), &summary)?;
    let kind = |c: Option<CriticalPoint>| c.map_or("-".to_string(), |c| format!("{:?}", c.kind).to_lowercase());
    Ok(format!(
        "{stem}: residual {:.3e} (tolerance {:.3e}); theta_pi1 {}; theta_pi2 {}",
        r.residual_norm,
        r.tolerance,
        kind(summary.critical_pi1),
        kind(summary.critical_pi2)
    ))
}

fn cmd_effective(s: &Settings) -> anyhow::Result<()> {
    let (mdp, emb) = s.environment()?;
    let dir = s.out_dir()?;
    let lines = s
        .batches(&mdp)?
        .par_iter()
        .map(|b| effective_one(s, b, &emb, mdp.gamma(), &dir))
        .collect::<anyhow::Result<Vec<String>>>()?;
    for l in lines {
        println!("{l}");
    }
    Ok(())
}

fn write_run(dir: &Path, stem: &str, traj: &Trajectory) -> anyhow::Result<CrossingReport> {
    let path = dir.join(format!("{stem}.csv"));
    let file = fs::File::create(&path).with_context(|| format!("writing {}", path.display()))?;
    traj.write_csv(std::io::BufWriter::new(file))?;
    let report = analyze_crossings(traj);
    write_json(&dir.join(format!("{stem}_crossings.json")), &report)?;
    println!("{}", path.display());
    Ok(report)
}

fn print_report(report: &CrossingReport) {
    println!(
        "semi-phase crossing steps {:?}; loss peak at {:?}; coincidence gap {:?}",
        report.semi_crossing_steps(),
        report.loss_peak_step,
        report.coincidence_gap
    );
}

fn cmd_dynamics(s: &Settings) -> anyhow::Result<()> {
    let (mdp, emb) = s.environment()?;
    let dir = s.out_dir()?;
    let schedule = s.schedule(Schedule::linear_default())?;
    let start = Theta::from_array(s.start.unwrap_or([-2.0, 1.0]));
    let runs = s.batches(&mdp)?;
    let results = runs
        .par_iter()
        .map(|b| -> anyhow::Result<(String, Theta, CrossingReport, SolutionPair)> {
            let sols = TwoSampleBatch::new(b, &emb, mdp.gamma())?.solutions()?;
            let traj = run_schedule(Model::Linear(start), b, &emb, mdp.gamma(), &schedule)?;
            let report = write_run(&dir, &format!("dynamics_{}", b.label()), &traj)?;
            Ok((b.label(), traj.final_theta().expect("linear run"), report, sols))
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    for (label, end, report, sols) in results {
        let dist = |t: Option<Theta>| t.map_or("-".into(), |t| format!("{:.3e}", end.distance(t)));
        println!(
            "{label}: final theta {}; distance to theta_pi1 {}, theta_pi2 {}",
            theta_text(Some(end)),
            dist(sols.theta_pi1),
            dist(sols.theta_pi2)
        );
        print_report(&report);
    }
    Ok(())
}

fn cmd_nn_dynamics(s: &Settings) -> anyhow::Result<()> {
    let (mdp, emb) = s.environment()?;
    let dir = s.out_dir()?;
    let gridworld = s.env.as_deref() == Some("gridworld");
    let (batch, net, base, stem) = if gridworld {
        let subset = match &s.subset {
            Some(text) => parse_state_list(text)?,
            None => DEFAULT_GRIDWORLD_SUBSET.to_vec(),
        };
        let mut dims = vec![emb.dim()];
        dims.extend(s.hidden.as_deref().unwrap_or(&GRIDWORLD_HIDDEN));
        dims.push(mdp.n_actions());
        let net = Mlp::new(&dims, MlpInit::Seeded(s.seed_init.unwrap_or(GRIDWORLD_INIT_SEED)))?;
        write_json(&dir.join("environment.json"), &EnvironmentDocument::new(&mdp, &emb))?;
        (gridworld_batch(&mdp, &subset)?, net, Schedule::gridworld_default(), "nn_dynamics_gridworld".to_string())
    } else {
        let batch = match (&s.batch, s.all_batches) {
            (_, Some(true)) => bail!(Error::precondition("nn-dynamics runs a single batch")),
            _ => s.batches(&mdp)?.remove(0),
        };
        let net = match (s.seed_init, &s.hidden) {
            (None, None) => Mlp::new(&SMALL_NET_DIMS, MlpInit::Deterministic)?,
            (seed, hidden) => {
                let mut dims = vec![emb.dim()];
                dims.extend(hidden.as_deref().unwrap_or(&SMALL_NET_DIMS[1..2]));
                dims.push(mdp.n_actions());
                Mlp::new(&dims, MlpInit::Seeded(seed.unwrap_or(GRIDWORLD_INIT_SEED)))?
            }
        };
        let stem = format!("nn_dynamics_{}", batch.label());
        (batch, net, Schedule::small_net_default(), stem)
    };
    let schedule = s.schedule(base)?;
    let traj = run_schedule(Model::Net(net), &batch, &emb, mdp.gamma(), &schedule)?;
    let report = write_run(&dir, &stem, &traj)?;
    if let Model::Net(net) = &traj.final_model {
        write_json(&dir.join(format!("{stem}_net.json")), &MlpDocument::from(net))?;
    }
    let last = traj.records.last().expect("non-empty trajectory");
    println!("final loss {}", fmt_f64(last.loss));
    print_report(&report);
    Ok(())
}

fn cmd_verify(args: &VerifyArgs) -> anyhow::Result<bool> {
    if let Some(n) = args.jobs {
        init_pool(n)?;
    }
    let checks = verify::run_all();
    for c in &checks {
        println!("{c}");
    }
    Ok(checks.iter().all(|c| c.passed))
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::NotConverged { .. } | Error::Diverged { .. }) => 3,
        Some(Error::Io(_)) | None => 1,
        Some(_) => 2,
    }
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    let settings = |a: &RunArgs| Settings::load(a);
    match &cli.command {
        Command::Solutions(a) => cmd_solutions(&settings(a)?)?,
        Command::Landscape(a) => cmd_landscape(&settings(a)?)?,
        Command::Effective(a) => cmd_effective(&settings(a)?)?,
        Command::Dynamics(a) => cmd_dynamics(&settings(a)?)?,
        Command::NnDynamics(a) => cmd_nn_dynamics(&settings(a)?)?,
        Command::Verify(a) => return cmd_verify(a),
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
