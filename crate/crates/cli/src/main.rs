mod scenario;

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use dtsim::dispatch::Mode;
use dtsim::engine::DType;
use dtsim::plan::Plan;
use dtsim::report::{cost_table, write_files, Report, RngCheck};
use dtsim::sweep::{run_sweep, sweep_csv, SweepConfig};
use dtsim::train::{self, plans, DistConfig, TrainConfig};

use scenario::{parse_mesh, Scenario};

#[derive(Debug, Parser)]
#[command(name = "dtsim", about = "Deterministic eager-SPMD distributed tensor simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a scenario and write report.json, losses.csv and ledger.csv
    Run(RunArgs),
    /// Compare distributed random ops with single-device generation
    RngSweep(SweepArgs),
    /// Max loss difference of distributed MLP runs against one device
    Consistency(ConsistencyArgs),
    /// Modeled vanilla vs fused gradient reduce times
    Cost(CostArgs),
    /// Record a dynamic run as a static plan and replay it
    RecordPlan(RunArgs),
}

#[derive(Debug, Args)]
struct Overrides {
    /// dynamic, static or record
    #[arg(long)]
    mode: Option<Mode>,
    /// `[name=]dim:size,...`
    #[arg(long)]
    mesh: Option<String>,
    #[arg(long)]
    plan: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Global virtual thread count of the generator
    #[arg(long)]
    theta: Option<u64>,
    #[arg(long)]
    bucket_bytes: Option<usize>,
    /// Report directory
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct RunArgs {
    /// Scenario file; defaults apply without one
    scenario: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[arg(long, default_value_t = 2024)]
    seed: u64,
    #[arg(long, default_value_t = dtsim::rng::DEFAULT_THETA)]
    theta: u64,
    /// Simulated threads per device
    #[arg(long, value_delimiter = ',', default_value = "1")]
    threads: Vec<usize>,
    /// Tensor ranks
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
    dims: Vec<usize>,
    /// Element counts (powers of two)
    #[arg(long, value_delimiter = ',', default_value = "65536,1048576")]
    sizes: Vec<usize>,
    /// Device counts
    #[arg(long = "mesh", value_delimiter = ',', default_value = "1,2,4,8")]
    mesh_sizes: Vec<usize>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ConsistencyArgs {
    #[arg(long, default_value_t = 50)]
    steps: usize,
    #[arg(long, default_value_t = 2024)]
    seed: u64,
    /// f64, or i64 for the exact-integer regime
    #[arg(long, default_value = "f64")]
    dtype: DType,
    /// Extra meshes to compare, `[name=]dim:size,...` with dims from DP and TP
    #[arg(long)]
    mesh: Vec<String>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct CostArgs {
    /// Mesh shapes such as `2x2`; defaults to 2x2 and 8x8
    #[arg(long = "mesh")]
    meshes: Vec<String>,
    /// Payload bytes times transfer time per byte
    #[arg(long, default_value_t = 1.0)]
    sb: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn load(args: &RunArgs) -> Result<(Scenario, Plan)> {
    let mut s = match &args.scenario {
        Some(p) => Scenario::load(p)?,
        None => Scenario::default(),
    };
    let o = &args.overrides;
    if let Some(m) = o.mode {
        s.mode = m;
    }
    if let Some(m) = &o.mesh {
        s.mesh = parse_mesh(m)?;
    }
    if let Some(p) = &o.plan {
        s.plan = Some(p.clone());
    }
    if let Some(v) = o.steps {
        s.train.steps = v;
    }
    if let Some(v) = o.seed {
        s.train.seed = v;
    }
    if let Some(v) = o.theta {
        s.train.theta = v;
    }
    if let Some(v) = o.bucket_bytes {
        s.bucket_bytes = v;
    }
    if let Some(v) = &o.out {
        s.out = v.clone();
    }
    let text = s.plan_text()?;
    let plan = Plan::parse(&text).with_context(|| match &s.plan {
        Some(p) => format!("plan {}", p.display()),
        None => "inline plan".to_string(),
    })?;
    Ok((s, plan))
}

fn print_written(paths: &[PathBuf]) {
    for p in paths {
        println!("wrote {}", p.display());
    }
}

fn run(args: &RunArgs) -> Result<()> {
    let (s, plan) = load(args)?;
    let dist = s.dist(plan);
    let init = train::init_check(&s.train, &dist)?;
    let out = train::train_dist(&s.train, &dist)?.result;
    let report = Report::from_run(&out, vec![init]);
    let c = &report.dispatch_counters;
    println!(
        "steps={} final_loss={:e} digest={} inferences={} hits={} collectives={}",
        report.losses.len(),
        report.losses.last().copied().unwrap_or(f64::NAN),
        report.weight_digest,
        c.inferences,
        c.hits,
        report.ledger.len()
    );
    print_written(&report.write(&s.out)?);
    Ok(())
}

fn record_plan(args: &RunArgs) -> Result<()> {
    let (s, plan) = load(args)?;
    let replay = train::record_and_replay(&s.train, &s.dist(plan))?;
    let same = train::weights_bit_eq(&replay.recorded.weights, &replay.replayed.weights);
    println!(
        "directives={} replay_bitwise={} static_inferences={}",
        replay.directives.len(),
        same,
        replay.replayed.counters.inferences
    );
    let mut recorded = replay.directives.join("\n");
    recorded.push('\n');
    let mut files = vec![("recorded.plan", recorded), ("static.plan", replay.plan.to_string())];
    files.push(("report.json", Report::from_run(&replay.replayed, Vec::new()).to_json()));
    print_written(&write_files(&s.out, &files)?);
    if !same {
        bail!("static replay diverged from the recorded run");
    }
    Ok(())
}

fn rng_sweep(a: &SweepArgs) -> Result<()> {
    let cfg = SweepConfig {
        ndims: a.dims.clone(),
        sizes: a.sizes.clone(),
        mesh_sizes: a.mesh_sizes.clone(),
        threads: a.threads.clone(),
        seed: a.seed,
        theta: a.theta,
        ..SweepConfig::default()
    };
    let cells = run_sweep(&cfg)?;
    let check = RngCheck {
        name: "sweep".into(),
        cells: cells.len(),
        matched: cells.iter().filter(|c| c.matched).count(),
    };
    println!("cells={} matched={}", check.cells, check.matched);
    let report = Report {
        rng_checks: vec![check.clone()],
        ..Report::default()
    };
    print_written(&write_files(&a.out, &[("sweep.csv", sweep_csv(&cells)), ("report.json", report.to_json())])?);
    if !check.ok() {
        bail!("{} sweep cells mismatched", check.cells - check.matched);
    }
    Ok(())
}

fn consistency_plan(mesh: &dtsim::mesh::DeviceMesh) -> Result<Plan> {
    let mut text = String::new();
    for d in mesh.dims() {
        match d.name.as_str() {
            "DP" => text.push_str(&plans::data_parallel("DP")),
            "TP" => text.push_str(&plans::megatron("TP")),
            other => bail!("consistency meshes use dims DP and TP, got `{other}`"),
        }
    }
    Ok(Plan::parse(&text)?)
}

fn consistency(a: &ConsistencyArgs) -> Result<()> {
    let base = match a.dtype {
        DType::I64 => TrainConfig::mlp_exact(),
        DType::F64 => TrainConfig::mlp_f64(),
        other => bail!("consistency runs f64 or i64, got {other}"),
    };
    let cfg = TrainConfig {
        steps: a.steps,
        seed: a.seed,
        ..base
    };
    let mut meshes = vec!["M=DP:1,TP:1".to_string(), "M=DP:2,TP:2".to_string()];
    meshes.extend(a.mesh.iter().cloned());
    let local = train::train_local(&cfg)?;
    let mut csv = String::from("mesh,steps,max_loss_diff,weights_bitwise\n");
    for m in &meshes {
        let mesh = parse_mesh(m)?;
        let run = train::train_dist(&cfg, &DistConfig::new(mesh.clone(), consistency_plan(&mesh)?))?.result;
        let diff = train::max_abs_diff(&local.losses, &run.losses);
        let bit = train::weights_bit_eq(&local.weights, &run.weights);
        let shape = mesh.shape().iter().map(|x| x.to_string()).collect::<Vec<_>>().join("x");
        println!("mesh={shape} max_loss_diff={diff:e} weights_bitwise={bit}");
        csv.push_str(&format!("{shape},{},{diff:e},{bit}\n", cfg.steps));
    }
    print_written(&write_files(&a.out, &[("consistency.csv", csv)])?);
    Ok(())
}

fn parse_shape(s: &str) -> Result<Vec<usize>> {
    s.split('x').map(|p| p.parse().with_context(|| format!("bad mesh shape `{s}`"))).collect()
}

fn cost(a: &CostArgs) -> Result<()> {
    let meshes: Vec<Vec<usize>> = if a.meshes.is_empty() {
        vec![vec![2, 2], vec![8, 8]]
    } else {
        a.meshes.iter().map(|m| parse_shape(m)).collect::<Result<_>>()?
    };
    let table = cost_table(&meshes, a.sb);
    print!("{table}");
    if let Some(dir) = &a.out {
        print_written(&write_files(dir, &[("cost.csv", table)])?);
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::init();
    let cli = Cli::parse();
    match &cli.command {
        Command::Run(a) => run(a),
        Command::RngSweep(a) => rng_sweep(a),
        Command::Consistency(a) => consistency(a),
        Command::Cost(a) => cost(a),
        Command::RecordPlan(a) => record_plan(a),
    }
}
