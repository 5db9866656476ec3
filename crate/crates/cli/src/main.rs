//! `darc`: generate planted datasets, train base models, compress them and
//! inspect the results.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use darc::candidates::CandidateKind;
use darc::cost::{measure_latency, CostKind, LatencyStat};
use darc::engine::{
    darc_compress, fit, init_darc, min_feasible_cost, relax, select_submodel, DarcSchedule, Outcome, Phase,
};
use darc::harness::config::SnapshotRecord;
use darc::harness::{
    evaluate, gen_planted_dataset, load_dataset, load_model, save_dataset, save_model, EvalOptions,
    PlantedSpec, RunConfig, RunDir, Split,
};
use darc::theory::{rademacher_estimate, FiniteClass, SignSample};
use darc::{DarcError, Model64};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

#[derive(Parser)]
#[command(name = "darc", version, about = "Differentiable architecture compression")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset labelled by a random planted teacher network.
    Gen(GenArgs),
    /// Train an uncompressed base model on a dataset.
    Init(InitArgs),
    /// Compress a trained model into a sequence of cheaper snapshots.
    Compress(CompressArgs),
    /// Copy a snapshot (or the concrete selection of a mixture model) out of a run.
    Export(ExportArgs),
    /// Evaluate a model on a dataset split.
    Eval(EvalArgs),
    /// Measure forward latency of a model.
    Bench(BenchArgs),
    /// Estimate the Rademacher complexity of a built-in finite class.
    Rademacher(RademacherArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Kind of the planted compressible layers.
    #[arg(long, default_value = "ds3x3")]
    teacher: CandidateKind,
    #[arg(long, default_value_t = 6000)]
    n: usize,
    /// Label flip probability.
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 8)]
    width: usize,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    /// Per-sample input shape C,H,W.
    #[arg(long, value_delimiter = ',', default_values_t = [3, 6, 6])]
    input: Vec<usize>,
    /// Minimum lead of the top teacher logit, in standard deviations of the
    /// logit spread within an input.
    #[arg(long, default_value_t = 1.0)]
    min_margin: f64,
    #[arg(long, default_value_t = 0.25)]
    test_fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory; receives `dataset.darcd`, `teacher.model` and `config`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct InitArgs {
    #[arg(long)]
    data: PathBuf,
    /// Kind of each compressible body layer.
    #[arg(long, value_delimiter = ',', default_values_t = [CandidateKind::FullConv { k: 3 }, CandidateKind::FullConv { k: 3 }])]
    body: Vec<CandidateKind>,
    #[arg(long, default_value_t = 8)]
    width: usize,
    #[arg(long, default_value_t = 40)]
    epochs: usize,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Run directory; receives `model`, `config` and `log.jsonl`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum CostArg {
    Params,
    Flops,
    Latency,
    Synthetic,
}

#[derive(Args)]
struct CompressArgs {
    /// JSON run configuration; replaces every schedule flag below.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, required_unless_present = "config")]
    model: Option<PathBuf>,
    #[arg(long, required_unless_present = "config")]
    data: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "params")]
    cost: CostArg,
    /// Cost budget for the mixture layers, or `min` for the cheapest reachable cost.
    #[arg(long, default_value = "min")]
    budget: String,
    #[arg(long, default_value_t = 2)]
    block_epochs: usize,
    #[arg(long, default_value_t = 20)]
    fine_tune_epochs: usize,
    /// Initial penalty weight; derived from the initial loss when omitted.
    #[arg(long)]
    lambda0: Option<f64>,
    #[arg(long, default_value_t = 2.0)]
    lambda_growth: f64,
    #[arg(long, default_value_t = 0.01)]
    eta0: f64,
    #[arg(long, default_value_t = 0.5)]
    eta_decay: f64,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    /// Stand-ins tried next to the original layer.
    #[arg(long, value_delimiter = ',', default_values_t = CandidateKind::default_conv_replacements())]
    candidates: Vec<CandidateKind>,
    #[arg(long, default_value_t = 200)]
    mimic_steps: usize,
    #[arg(long, default_value_t = 0.1)]
    mimic_step_size: f64,
    /// Per-kind costs for `--cost synthetic`, as `kind=value` pairs.
    #[arg(long, value_delimiter = ',')]
    synthetic_costs: Vec<String>,
    #[arg(long, default_value_t = 1)]
    latency_batch: usize,
    #[arg(long, default_value_t = 5)]
    latency_reps: usize,
    #[arg(long)]
    allow_revival: bool,
    /// Overridden by the DARC_SEED environment variable.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    run: PathBuf,
}

#[derive(Args)]
struct ExportArgs {
    /// Run directory written by `compress`.
    #[arg(long, conflicts_with = "model")]
    run: Option<PathBuf>,
    /// Snapshot block; the last one when omitted.
    #[arg(long, requires = "run")]
    block: Option<usize>,
    /// A model file; mixtures are reduced to one candidate per layer.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    /// Also measure latency with this many repetitions.
    #[arg(long)]
    latency_reps: Option<usize>,
    #[arg(long, default_value_t = 1)]
    latency_batch: usize,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = 100)]
    bench_reps: usize,
    #[arg(long, default_value_t = 1)]
    batch: usize,
    /// Report the mean instead of the median.
    #[arg(long)]
    mean: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Fixture {
    /// Eight uniform ±1 tables.
    Tables,
    /// The constants +1 and -1.
    Constants,
    /// The zero function.
    Zero,
}

#[derive(Args)]
struct RademacherArgs {
    #[arg(long, value_enum, default_value = "tables")]
    fixture: Fixture,
    #[arg(long, default_value_t = 6)]
    n: usize,
    #[arg(long, default_value_t = 2000)]
    draws: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(a) => gen(a),
        Command::Init(a) => init(a),
        Command::Compress(a) => compress(a),
        Command::Export(a) => export(a),
        Command::Eval(a) => eval(a),
        Command::Bench(a) => bench(a),
        Command::Rademacher(a) => rademacher(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                DarcError::Config(_) => 3,
                DarcError::Divergence(_) => 4,
                _ => 1,
            })
        }
    }
}

type CliResult = darc::Result<ExitCode>;

fn seed_override(seed: u64) -> darc::Result<u64> {
    match std::env::var("DARC_SEED") {
        Ok(s) => s
            .trim()
            .parse()
            .map_err(|_| DarcError::Config(format!("DARC_SEED={s:?} is not an unsigned integer"))),
        Err(_) => Ok(seed),
    }
}

fn print_json(value: &serde_json::Value) {
    println!(
        "{}",
        serde_json::to_string_pretty(value).expect("JSON values serialize")
    );
}

fn gen(a: GenArgs) -> CliResult {
    let [c, h, w] = a.input[..] else {
        return Err(DarcError::Config("--input takes C,H,W".into()));
    };
    let spec = PlantedSpec {
        teacher_kind: a.teacher,
        input_shape: [c, h, w],
        width: a.width,
        planted_layers: a.layers,
        num_classes: a.classes,
        n: a.n,
        noise: a.noise,
        test_fraction: a.test_fraction,
        min_margin: a.min_margin,
    };
    let seed = seed_override(a.seed)?;
    let (data, teacher) = gen_planted_dataset::<f64>(&spec, seed)?;
    let mut run = RunDir::create(&a.out, &json!({ "planted": spec, "seed": seed }))?;
    save_dataset(&data, a.out.join("dataset.darcd"))?;
    save_model(&teacher, a.out.join("teacher.model"))?;
    let metrics = evaluate(
        &teacher,
        &data,
        &(0..data.len()).collect::<Vec<_>>(),
        &EvalOptions::default(),
    )?;
    run.append(&json!({ "teacher": metrics }))?;
    print_json(&json!({ "samples": data.len(), "teacher": metrics }));
    Ok(ExitCode::SUCCESS)
}

fn init(a: InitArgs) -> CliResult {
    let seed = seed_override(a.seed)?;
    let data = load_dataset::<f64>(&a.data)?;
    let [c, h, w] = data.sample_shape()[..] else {
        return Err(DarcError::Config("init expects C×H×W samples".into()));
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Model64::conv_classifier([c, h, w], a.width, &a.body, data.num_classes, &mut rng)?;
    let config = json!({
        "data": a.data, "body": a.body, "width": a.width, "epochs": a.epochs, "lr": a.lr,
        "momentum": a.momentum, "batch_size": a.batch_size, "seed": seed,
    });
    let mut run = RunDir::create(&a.out, &config)?;
    let train = data.indices(Split::Train);
    fit(
        &mut model,
        &data,
        &train,
        a.epochs,
        a.lr,
        a.momentum,
        a.batch_size,
        Phase::Train,
        &mut rng,
        &mut run,
    )?;
    model.round_to_f32();
    let path = a.out.join("model");
    save_model(&model, &path)?;
    let test = data.indices(Split::Test);
    let metrics = evaluate(
        &model,
        &data,
        if test.is_empty() { &train } else { &test },
        &EvalOptions::default(),
    )?;
    run.append(&json!({ "model": path, "metrics": metrics }))?;
    print_json(&json!({ "model": path, "metrics": metrics }));
    Ok(ExitCode::SUCCESS)
}

fn parse_synthetic(pairs: &[String]) -> darc::Result<BTreeMap<CandidateKind, f64>> {
    pairs
        .iter()
        .map(|p| {
            let (k, v) = p
                .split_once('=')
                .ok_or_else(|| DarcError::Config(format!("synthetic cost {p:?} is not kind=value")))?;
            let v = v
                .parse()
                .map_err(|_| DarcError::Config(format!("synthetic cost {v:?} is not a number")))?;
            Ok((k.parse()?, v))
        })
        .collect()
}

fn run_config(a: &CompressArgs) -> darc::Result<RunConfig> {
    if let Some(path) = &a.config {
        let mut cfg = RunConfig::load(path)?;
        cfg.seed = seed_override(cfg.seed)?;
        return Ok(cfg);
    }
    let cost = match a.cost {
        CostArg::Params => CostKind::ParamCount,
        CostArg::Flops => CostKind::Flops,
        CostArg::Latency => CostKind::MeasuredLatency {
            batch_size: a.latency_batch,
            reps: a.latency_reps,
        },
        CostArg::Synthetic => CostKind::Synthetic,
    };
    let budget = match a.budget.as_str() {
        "min" => -1.0,
        b => b
            .parse()
            .map_err(|_| DarcError::Config(format!("budget {b:?} is neither a number nor `min`")))?,
    };
    let schedule = DarcSchedule {
        lambda0: a.lambda0,
        lambda_growth: a.lambda_growth,
        eta0: a.eta0,
        eta_decay: a.eta_decay,
        block_epochs: a.block_epochs,
        fine_tune_epochs: a.fine_tune_epochs,
        budget,
        cost,
        batch_size: a.batch_size,
        momentum: a.momentum,
        allow_revival: a.allow_revival,
        ..DarcSchedule::default()
    };
    let mut cfg = RunConfig::new(
        a.model.clone().expect("required by clap"),
        a.data.clone().expect("required by clap"),
        schedule,
        seed_override(a.seed)?,
    );
    cfg.candidates = a.candidates.clone();
    cfg.mimic_steps = a.mimic_steps;
    cfg.mimic_step_size = a.mimic_step_size;
    cfg.synthetic_costs = parse_synthetic(&a.synthetic_costs)?;
    for p in [&cfg.model, &cfg.data] {
        if !p.exists() {
            return Err(DarcError::Config(format!("{} does not exist", p.display())));
        }
    }
    Ok(cfg)
}

fn compress(a: CompressArgs) -> CliResult {
    let mut cfg = run_config(&a)?;
    let base = load_model::<f64>(&cfg.model)?;
    let data = load_dataset::<f64>(&cfg.data)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = relax(&base, &cfg.candidates, &mut rng)?;
    let train = data.indices(Split::Train);
    let sample = train
        .chunks(cfg.schedule.batch_size.max(1))
        .take(cfg.mimic_batches)
        .map(|c| data.batch(c).map(|b| b.0))
        .collect::<darc::Result<Vec<_>>>()?;
    init_darc(&mut model, &sample, &cfg.init_options())?;
    if cfg.schedule.budget < 0.0 {
        cfg.schedule.budget = min_feasible_cost(&model);
    }
    cfg.validate()?;

    let mut run = RunDir::create(&a.run, &cfg)?;
    let report = darc_compress(&mut model, &data, &cfg.schedule, &mut rng, &mut run)?;
    let summary = json!({
        "outcome": report.outcome,
        "lambda0": report.lambda0,
        "blocks": report.blocks,
        "retries": report.retries,
        "budget": cfg.schedule.budget,
        "snapshots": report.snapshots.iter().map(SnapshotRecord::from).collect::<Vec<_>>(),
    });
    run.append(&json!({ "outcome": report.outcome, "blocks": report.blocks, "retries": report.retries }))?;
    print_json(&summary);
    Ok(match report.outcome {
        Outcome::Diverged => {
            eprintln!("error: training diverged after {} retries", report.retries);
            ExitCode::from(4)
        }
        _ => ExitCode::SUCCESS,
    })
}

fn last_block(run: &Path) -> darc::Result<usize> {
    fs::read_dir(run.join("snapshots"))?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            name.strip_suffix(".model")?.parse().ok()
        })
        .max()
        .ok_or_else(|| DarcError::Config(format!("{} holds no snapshots", run.display())))
}

fn export(a: ExportArgs) -> CliResult {
    let model = match (&a.run, &a.model) {
        (Some(run), _) => {
            let block = match a.block {
                Some(b) => b,
                None => last_block(run)?,
            };
            load_model::<f64>(run.join("snapshots").join(format!("{block}.model")))?
        }
        (None, Some(path)) => select_submodel(&load_model::<f64>(path)?)?,
        (None, None) => return Err(DarcError::Config("export needs --run or --model".into())),
    };
    save_model(&model, &a.out)?;
    print_json(&json!({ "out": a.out, "params": model.param_count() }));
    Ok(ExitCode::SUCCESS)
}

fn eval(a: EvalArgs) -> CliResult {
    let model = load_model::<f64>(&a.model)?;
    let data = load_dataset::<f64>(&a.data)?;
    let split = match a.split {
        SplitArg::Train => Split::Train,
        SplitArg::Val => Split::Val,
        SplitArg::Test => Split::Test,
    };
    let opts = EvalOptions {
        latency: a.latency_reps.map(|r| (a.latency_batch, r)),
        ..EvalOptions::default()
    };
    let metrics = evaluate(&model, &data, &data.indices(split), &opts)?;
    print_json(&serde_json::to_value(&metrics)?);
    Ok(ExitCode::SUCCESS)
}

fn bench(a: BenchArgs) -> CliResult {
    let model = load_model::<f64>(&a.model)?;
    let stat = if a.mean {
        LatencyStat::Mean
    } else {
        LatencyStat::Median
    };
    let secs = measure_latency(&model, &model.input_shape, a.batch, a.bench_reps, stat)?;
    let name = if a.mean { "mean" } else { "median" };
    println!(
        "{name} {secs:.9} s/batch (batch {}, {} reps)",
        a.batch, a.bench_reps
    );
    Ok(ExitCode::SUCCESS)
}

fn rademacher(a: RademacherArgs) -> CliResult {
    let seed = seed_override(a.seed)?;
    if a.n == 0 || a.draws == 0 {
        return Err(DarcError::Config("--n and --draws must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let class = match a.fixture {
        Fixture::Tables => FiniteClass::<f64>::random_signs(8, a.n, &mut rng)?,
        Fixture::Constants => FiniteClass::new("constants", vec![vec![1.0; a.n], vec![-1.0; a.n]])?,
        Fixture::Zero => FiniteClass::new("zero", vec![vec![0.0; a.n]])?,
    };
    let sigmas = SignSample::draw(a.n, a.draws, seed.wrapping_add(1));
    let est = rademacher_estimate(&class, &sigmas)?;
    println!(
        "class={:?} n={} draws={} estimate={:.6} stderr={:.6}",
        class.label, a.n, a.draws, est.mean, est.stderr
    );
    Ok(ExitCode::SUCCESS)
}
