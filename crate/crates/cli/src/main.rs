mod config;
mod output;
mod reproduce;

use clap::{Args, Parser, Subcommand};
use ndcn::dynamics::{
    default_initial_state, sample_times, simulate_truth, trajectory_csv, DynamicsSpec, Law,
    Sampling,
};
use ndcn::graphgen::{
    edgelist_string, gen_barabasi_albert, gen_erdos_renyi, gen_newman_watts, gen_random_partition,
    read_edgelist, write_edgelist, Family, Graph,
};
use ndcn::models::{load_checkpoint, save_checkpoint, Variant};
use ndcn::training::{
    build_network, classify_bundle, evaluate_classifier, evaluate_dynamics, prepare_dynamics,
    run_plan, ExperimentPlan, RunResult, Task,
};
use ndcn::{Error, Matrix, Result};
use output::{write_file_atomic, Staged};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "ndcn",
    version,
    about = "Learn continuous-time dynamics on complex networks"
)]
struct Cli {
    /// More log output; repeat for debug detail.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic network as an edge list.
    Generate(GenerateArgs),
    /// Simulate ground-truth dynamics and dump trajectories and frames.
    Simulate(SimulateArgs),
    /// Train a model under one experiment plan.
    Train(TrainArgs),
    /// Recompute test metrics of a saved checkpoint.
    Eval(EvalArgs),
    /// Run a table-shaped suite of experiments.
    Reproduce(reproduce::ReproduceArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    family: Family,
    #[arg(long, default_value_t = 400)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Edge probability (random) or shortcut probability (small-world).
    #[arg(long)]
    p: Option<f64>,
    /// Attachments per new node (power-law).
    #[arg(long)]
    m: Option<usize>,
    /// Ring degree (small-world).
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    law: Law,
    #[arg(long, default_value = "grid")]
    family: Family,
    #[arg(long, default_value_t = 400)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Use this edge list instead of generating a network.
    #[arg(long)]
    graph: Option<PathBuf>,
    /// Initial state, one value per line; defaults to the three-block pattern.
    #[arg(long)]
    x0: Option<PathBuf>,
    #[arg(long)]
    horizon: Option<f64>,
    #[arg(long, default_value_t = 120)]
    snapshots: usize,
    #[arg(long, default_value = "irregular")]
    sampling: Sampling,
    /// Also write one matrix per snapshot under frames/.
    #[arg(long)]
    frames: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, default_value = "continuous")]
    task: Task,
    #[arg(long, default_value = "heat")]
    law: Law,
    #[arg(long, default_value = "grid")]
    family: Family,
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    horizon: Option<f64>,
    /// Classification bundle directory (synthetic partition when absent).
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Fix the classifier's terminal time instead of searching.
    #[arg(long)]
    t_end: Option<f64>,
    /// Fix the classifier's alpha instead of searching.
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    row_normalize: bool,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, env = "NDCN_JOBS", default_value_t = 1)]
    jobs: usize,
}

#[derive(Args)]
struct EvalArgs {
    /// Output directory of a previous `train`.
    #[arg(long)]
    dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    run: usize,
    /// Checkpoint to evaluate instead of the run's own.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Also write the metrics JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidArgument(_) => 2,
        Error::NotFound(_)
        | Error::Format(_)
        | Error::DegenerateInput(_)
        | Error::Io(_)
        | Error::Json(_) => 3,
        Error::Stiffness { .. } | Error::Numeric(_) => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .parse_default_env()
        .init();
    let outcome = match cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Reproduce(a) => reproduce::cmd_reproduce(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn cmd_generate(a: GenerateArgs) -> Result<()> {
    let g = match (a.family, a.p, a.m, a.k) {
        (Family::Random, Some(p), _, _) => gen_erdos_renyi(a.n, p, a.seed)?,
        (Family::PowerLaw, _, Some(m), _) => gen_barabasi_albert(a.n, m, a.seed)?,
        (Family::SmallWorld, p, _, k) if p.is_some() || k.is_some() => {
            gen_newman_watts(a.n, k.unwrap_or(5), p.unwrap_or(0.5), a.seed)?
        }
        (Family::Community, Some(p), _, _) => gen_random_partition(
            &ndcn::graphgen::default_partition_sizes(a.n)?,
            p,
            0.01,
            a.seed,
        )?,
        (family, ..) => family.generate(a.n, a.seed)?,
    };
    write_file_atomic(&a.out, edgelist_string(&g))?;
    log::info!(
        "wrote {} nodes and {} edges to {}",
        g.n(),
        g.edge_count(),
        a.out.display()
    );
    Ok(())
}

fn read_column(path: &Path) -> Result<Matrix> {
    let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::NotFound(path.display().to_string()),
        _ => Error::Io(e),
    })?;
    let vals = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.trim()
                .parse::<f64>()
                .map_err(|_| Error::Format(format!("bad value '{l}' in {}", path.display())))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Matrix::column(&vals))
}

/// Row-major frame: `side x side` when the node count is a square, else one row.
pub fn frame_csv(state: &Matrix) -> String {
    let n = state.rows();
    let side = (n as f64).sqrt().round() as usize;
    let width = if side * side == n { side } else { n };
    let mut out = String::new();
    for row in state.as_slice().chunks(width.max(1)) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        let _ = writeln!(out, "{}", cells.join(","));
    }
    out
}

fn cmd_simulate(a: SimulateArgs) -> Result<()> {
    let g: Graph = match &a.graph {
        Some(p) => read_edgelist(p)?,
        None => build_network(a.family, a.n, a.seed)?,
    };
    let x0 = match &a.x0 {
        Some(p) => read_column(p)?,
        None => {
            let side = (g.n() as f64).sqrt().round() as usize;
            if side * side != g.n() {
                return Err(Error::InvalidArgument(format!(
                    "the default initial state needs a square node count, got {}; pass --x0",
                    g.n()
                )));
            }
            default_initial_state(side)
        }
    };
    if x0.rows() != g.n() {
        return Err(Error::InvalidArgument(format!(
            "initial state has {} values for {} nodes",
            x0.rows(),
            g.n()
        )));
    }
    let horizon = a.horizon.unwrap_or_else(|| a.law.default_horizon(a.family));
    let mut times = vec![0.0];
    times.extend(sample_times(a.sampling, a.snapshots, horizon, a.seed)?);
    let traj = simulate_truth(&g, &DynamicsSpec::default_for(a.law), &x0, &times)?;

    let mut out = Staged::new(&a.out)?;
    let echo = serde_json::json!({
        "law": a.law,
        "family": a.family,
        "n": g.n(),
        "seed": a.seed,
        "graph": a.graph,
        "horizon": horizon,
        "snapshots": a.snapshots,
        "sampling": a.sampling,
    });
    out.write("config.json", serde_json::to_string_pretty(&echo)?)?;
    write_edgelist(&g, &out.path("graph.edgelist"))?;
    out.write("trajectory.csv", trajectory_csv(&traj))?;
    if a.frames {
        let mut index = String::from("frame,t\n");
        for (k, (t, x)) in traj.times.iter().zip(&traj.states).enumerate() {
            out.write(&format!("frames/frame-{k:05}.csv"), frame_csv(x))?;
            let _ = writeln!(index, "{k},{t:?}");
        }
        out.write("frames/index.csv", index)?;
    }
    out.note(format!(
        "simulated {} on {} nodes at {} times",
        a.law,
        g.n(),
        traj.len()
    ));
    out.commit()?;
    Ok(())
}

fn plan_from_train_args(a: &TrainArgs, file: &config::FileConfig) -> Result<ExperimentPlan> {
    let variant = a.variant.unwrap_or(match a.task {
        Task::Classify => Variant::NdcnClassify,
        _ => Variant::Ndcn,
    });
    let mut plan = match a.task {
        Task::Continuous => ExperimentPlan::continuous(a.law, a.family, variant),
        Task::Regular => ExperimentPlan::regular(a.law, a.family, variant),
        Task::Classify => ExperimentPlan::classify(a.dataset.clone()),
    };
    plan.runs = 1;
    if let Some(v) = a.n {
        plan.n = v;
    }
    if let Some(v) = a.seed {
        plan.seed = v;
    }
    if let Some(v) = a.runs {
        plan.runs = v;
    }
    if let Some(v) = a.epochs {
        plan.epochs = v;
    }
    if let Some(v) = a.lr {
        plan.lr = v;
    }
    if a.weight_decay.is_some() {
        plan.weight_decay = a.weight_decay;
    }
    if let Some(v) = a.hidden {
        plan.hidden = v;
    }
    if a.horizon.is_some() {
        plan.horizon = a.horizon;
    }
    if let Some(t) = a.t_end {
        plan.t_grid = vec![t];
    }
    if let Some(al) = a.alpha {
        plan.alpha_grid = vec![al];
    }
    plan.row_normalize |= a.row_normalize;
    let plan = config::apply(&plan, &file.plan)?;
    plan.validate()?;
    Ok(plan)
}

fn default_out(plan: &ExperimentPlan) -> PathBuf {
    let name = match plan.task {
        Task::Classify => format!("runs/classify-{}-s{}", plan.variant, plan.seed),
        _ => format!(
            "runs/{}-{}-{}-{}-s{}",
            plan.task, plan.law, plan.family, plan.variant, plan.seed
        ),
    };
    PathBuf::from(name)
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let file = match &a.config {
        Some(p) => config::load(p)?,
        None => config::FileConfig::default(),
    };
    let plan = plan_from_train_args(&a, &file)?;
    let jobs = file.jobs.unwrap_or(a.jobs).max(1);
    let target = file
        .out
        .clone()
        .or_else(|| a.out.clone())
        .unwrap_or_else(|| default_out(&plan));
    if plan.task == Task::Classify {
        if let Some(dir) = &plan.dataset {
            if !dir.is_dir() {
                return Err(Error::NotFound(format!("dataset bundle {}", dir.display())));
            }
        }
    }

    let output = run_plan(&plan, jobs)?;
    let mut out = Staged::new(&target)?;
    out.write("plan.json", serde_json::to_string_pretty(&plan)?)?;
    out.write("results.json", output.result.to_json()?)?;
    out.write("results.csv", output.result.to_csv())?;
    out.write("timing.json", output.timing_json()?)?;
    for o in &output.outcomes {
        if let Some(params) = &o.params {
            std::fs::create_dir_all(out.path("checkpoints"))?;
            save_checkpoint(
                &out.path(&format!("checkpoints/run-{}.ckpt", o.record.run)),
                params,
            )?;
        }
    }
    out.note(format!(
        "{} {} runs, {} failed",
        plan.task, plan.runs, output.result.failures
    ));
    for (k, s) in &output.result.aggregate {
        out.note(format!(
            "{k}: {:.6} +- {:.6} ({} runs)",
            s.mean, s.std, s.count
        ));
    }
    let path = out.commit()?;
    println!("{}", path.display());
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let read = |name: &str| -> Result<String> {
        let p = a.dir.join(name);
        std::fs::read_to_string(&p).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::NotFound(p.display().to_string()),
            _ => Error::Io(e),
        })
    };
    let plan: ExperimentPlan = serde_json::from_str(&read("plan.json")?)
        .map_err(|e| Error::Format(format!("plan.json: {e}")))?;
    let result = RunResult::from_json(&read("results.json")?)?;
    let record = result.runs.iter().find(|r| r.run == a.run).ok_or_else(|| {
        Error::InvalidArgument(format!("no run {} in {}", a.run, a.dir.display()))
    })?;
    let ckpt = a
        .checkpoint
        .clone()
        .unwrap_or_else(|| a.dir.join(format!("checkpoints/run-{}.ckpt", a.run)));
    let params = load_checkpoint(&ckpt)?;
    let metrics = match plan.task {
        Task::Classify => {
            let get = |k: &str| {
                record
                    .metrics
                    .get(k)
                    .copied()
                    .ok_or_else(|| Error::Format(format!("run {} has no {k}", a.run)))
            };
            let bundle = classify_bundle(&plan, record.seed)?;
            let (val, test) =
                evaluate_classifier(&plan, &bundle, &params, get("T")?, get("alpha")?)?;
            let mut m = std::collections::BTreeMap::new();
            m.insert("T".to_string(), get("T")?);
            m.insert("alpha".to_string(), get("alpha")?);
            m.insert("val_accuracy".to_string(), val);
            m.insert("test_accuracy".to_string(), test);
            m
        }
        _ => {
            let data = prepare_dynamics(&plan, record.seed)?;
            evaluate_dynamics(&plan, &data, &params)?
        }
    };
    let doc = serde_json::to_string_pretty(&serde_json::json!({
        "run": a.run,
        "seed": record.seed,
        "metrics": metrics,
    }))?;
    if let Some(p) = &a.out {
        write_file_atomic(p, &doc)?;
    }
    println!("{doc}");
    Ok(())
}
