mod error;
mod queries;

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dspp::data::{parse_interactions, remap, write_interactions, IdMap, ParseOptions, TemporalNetwork};
use dspp::model::Model;
use dspp::synth::{simulate, HawkesSpec};
use dspp::train_eval::{evaluate, read_checkpoint, train, write_checkpoint, Prepared, Scorer, StopReason, TrainConfig};
use serde_json::json;

use error::CliError;
use queries::{read_item_queries, read_time_queries};

#[derive(Parser)]
#[command(
    name = "dspp",
    version,
    about = "Train and query a structural temporal point process on interaction logs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a multivariate Hawkes interaction log as CSV.
    Generate(GenerateArgs),
    /// Train a model; writes a checkpoint and prints one JSON line per epoch.
    Train(TrainArgs),
    /// Sequential next-item (and optionally next-time) evaluation.
    Evaluate(EvaluateArgs),
    /// Rank all items for each `user,timestamp` query.
    PredictItem(PredictArgs),
    /// Expected next interaction time for each `user,item[,timestamp]` query.
    PredictTime(PredictArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Hawkes specification (`key = value` lines); the built-in toy spec if omitted.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Interaction log: `user,item,timestamp[,label,features…]`.
    #[arg(long)]
    data: PathBuf,
    /// Flat `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration key (repeatable), e.g. `--set dim=32`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Valid,
    Test,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    model: PathBuf,
    /// The full interaction log the model was trained on.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: Split,
    /// Also predict interaction times and report RMSE in hours.
    #[arg(long)]
    time: bool,
    /// Include the per-interaction ranks in the report.
    #[arg(long)]
    ranks: bool,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    /// Interaction history preceding the queries.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    queries: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(a) => generate(a),
        Command::Train(a) => run_train(a),
        Command::Evaluate(a) => run_evaluate(a),
        Command::PredictItem(a) => predict_item(a),
        Command::PredictTime(a) => predict_time(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("dspp: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn read_text(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::io(path, e))
}

fn read_log(path: &Path) -> Result<dspp::data::ParsedLog, CliError> {
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    parse_interactions(BufReader::new(file), ParseOptions::default()).map_err(|e| CliError::input(path, e))
}

fn load_model(path: &Path) -> Result<Model, CliError> {
    read_checkpoint(path).map_err(|e| CliError::checkpoint(path, e))
}

/// The log re-indexed onto the model's ids.
fn history_for(model: &Model, path: &Path) -> Result<TemporalNetwork, CliError> {
    let log = read_log(path)?;
    remap(&log, &model.ids).map_err(|e| CliError::input(path, e))
}

fn generate(args: GenerateArgs) -> Result<(), CliError> {
    let spec = match &args.spec {
        Some(path) => HawkesSpec::from_text(&read_text(path)?).map_err(|e| CliError::input(path, e))?,
        None => HawkesSpec::toy(),
    };
    eprint!("# hawkes spec (seed {})\n{}", args.seed, spec.to_text());
    let net = simulate(&spec, args.seed)?;
    let mut out = create(&args.out)?;
    write_interactions(&net, &IdMap::identity(spec.users, spec.items), &mut out)?;
    out.flush().map_err(|e| CliError::io(&args.out, e))?;
    eprintln!("# wrote {} interactions to {}", net.len(), args.out.display());
    Ok(())
}

fn resolve_config(args: &TrainArgs) -> Result<TrainConfig, CliError> {
    let mut config = TrainConfig::default();
    if let Some(path) = &args.config {
        config
            .apply_text(&read_text(path)?)
            .map_err(|e| CliError::input(path, e))?;
    }
    for pair in &args.overrides {
        let (key, value) = pair
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got {pair:?}")))?;
        config.set(key, value)?;
    }
    if let Some(epochs) = args.epochs {
        config.epochs = epochs;
    }
    if let Some(workers) = args.workers {
        config.workers = workers;
    }
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    config.validate()?;
    Ok(config)
}

fn run_train(args: TrainArgs) -> Result<(), CliError> {
    let config = resolve_config(&args)?;
    eprint!("# resolved configuration\n{}", config.to_text());
    let log = read_log(&args.data)?;
    let stdout = std::io::stdout();
    let mut lines = stdout.lock();
    let mut write_err = None;
    let outcome = train(&log.network, log.ids, &config, &mut |record| {
        let line = serde_json::to_string(record).expect("epoch record serializes");
        if let Err(e) = writeln!(lines, "{line}") {
            write_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(CliError::io(Path::new("<stdout>"), e));
    }
    write_checkpoint(&outcome.model, &args.out)?;
    match outcome.stop {
        StopReason::Completed => eprintln!("# completed {} epochs", outcome.trace.len()),
        StopReason::EarlyStopped { best_epoch } => eprintln!("# early stop, best epoch {best_epoch}"),
        StopReason::Diverged { epoch, detail } => return Err(CliError::Diverged { epoch, detail }),
    }
    Ok(())
}

fn run_evaluate(args: EvaluateArgs) -> Result<(), CliError> {
    let model = load_model(&args.model)?;
    eprint!("# model configuration\n{}", model.config.to_text());
    let net = history_for(&model, &args.data)?;
    let prepared = Prepared::for_model(&net, &model).map_err(|e| CliError::input(&args.data, e))?;
    let range = match args.split {
        Split::Train => prepared.splits.train_range(),
        Split::Valid => prepared.splits.valid_range(),
        Split::Test => prepared.splits.test_range(),
    };
    let mut report = evaluate(&model, &prepared.stream, range, args.time)?;
    if !args.ranks {
        report.ranks.clear();
    }
    println!("{}", serde_json::to_string(&report).expect("report serializes"));
    Ok(())
}

fn predict_item(args: PredictArgs) -> Result<(), CliError> {
    let model = load_model(&args.model)?;
    eprint!("# model configuration\n{}", model.config.to_text());
    let history = history_for(&model, &args.data)?.rescaled(model.time_scale)?;
    let queries = read_item_queries(&read_text(&args.queries)?, &model.ids, model.time_scale)
        .map_err(|e| CliError::input(&args.queries, e))?;
    let horizon = queries.iter().map(|q| q.time).fold(history.horizon(), f64::max);
    let mut scorer = Scorer::new(&model, &history, horizon)?;
    let mut out = std::io::stdout().lock();
    for q in queries {
        scorer.advance_before(q.time)?;
        let scores = scorer.intensities(q.user, q.time)?;
        let order = dspp::train_eval::ranking(&scores);
        let line = json!({
            "user": model.ids.users[q.user],
            "time": q.time * model.time_scale,
            "items": order.iter().map(|&j| &model.ids.items[j]).collect::<Vec<_>>(),
            "intensities": order.iter().map(|&j| scores[j] / model.time_scale).collect::<Vec<_>>(),
        });
        writeln!(out, "{line}").map_err(|e| CliError::io(Path::new("<stdout>"), e))?;
    }
    Ok(())
}

fn predict_time(args: PredictArgs) -> Result<(), CliError> {
    let model = load_model(&args.model)?;
    eprint!("# model configuration\n{}", model.config.to_text());
    let history = history_for(&model, &args.data)?.rescaled(model.time_scale)?;
    let queries = read_time_queries(&read_text(&args.queries)?, &model.ids, model.time_scale)
        .map_err(|e| CliError::input(&args.queries, e))?;
    let horizon = queries.iter().filter_map(|q| q.time).fold(history.horizon(), f64::max);
    let mut scorer = Scorer::new(&model, &history, horizon)?;
    let quad = model.config.quadrature();
    let mut out = std::io::stdout().lock();
    for q in queries {
        // without a timestamp the query follows the whole history
        scorer.advance_before(q.time.unwrap_or(f64::INFINITY))?;
        let origin = match q.time {
            Some(t) => t,
            None => [dspp::embedding::Node::User(q.user), dspp::embedding::Node::Item(q.item)]
                .iter()
                .filter_map(|&n| scorer.state().get(n).map(|d| d.updated_at))
                .reduce(f64::max)
                .unwrap_or(history.horizon()),
        };
        let p = scorer.predict_time(q.user, q.item, origin, &quad)?;
        let line = json!({
            "user": model.ids.users[q.user],
            "item": model.ids.items[q.item],
            "from": origin * model.time_scale,
            "expected_interval": p.expected * model.time_scale,
            "expected_time": (origin + p.expected) * model.time_scale,
            "truncated": p.truncated,
        });
        writeln!(out, "{line}").map_err(|e| CliError::io(Path::new("<stdout>"), e))?;
    }
    Ok(())
}
