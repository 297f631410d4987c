//! `lp`: generate data, train, synthesize and evaluate.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use latent_programmer::dsl::{render_program, Dialect};
use latent_programmer::eval::{self, Accuracy, Searcher};
use latent_programmer::search::{two_level_synthesize, Ranking, SearchConfig, SearchError};
use latent_programmer::taskgen::{generate_dataset, read_dataset, write_dataset, GenConfig, GenError, TaskRecord, RESERVED};
use latent_programmer::train::{load_checkpoint, train, CheckpointError, TrainConfig, TrainError, TrainIo, Trainer};

#[derive(Parser)]
#[command(name = "lp", version, about = "Program synthesis from input/output examples with discrete latent codes")]
struct Cli {
    /// Threads for search and evaluation.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a dataset of tasks as JSON lines.
    GenData(GenArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Search for a program that solves one task.
    Synth(SynthArgs),
    /// Write evaluation reports for a dataset.
    Eval(EvalArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum DialectArg {
    Full,
    Toy,
}

#[derive(clap::Args)]
struct GenArgs {
    #[arg(long, value_enum)]
    dialect: DialectArg,
    #[arg(long)]
    n_tasks: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    n_examples: usize,
    #[arg(long, default_value_t = 10)]
    max_expressions: usize,
}

#[derive(clap::Args)]
struct TrainArgs {
    /// JSON training config; missing fields take their defaults.
    #[arg(long)]
    config: PathBuf,
    /// Training set; overrides the config's `train_data`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Held-out set; overrides the config's `eval_data`.
    #[arg(long)]
    eval: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Metrics CSV; defaults to `metrics.csv` next to the checkpoint.
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Continue from the checkpoint at `--out`.
    #[arg(long)]
    resume: bool,
}

#[derive(clap::Args)]
struct SearchArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value_t = 10)]
    beam: usize,
    #[arg(long, default_value_t = 3)]
    latent_beams: usize,
    #[arg(long, value_enum, default_value_t = RankingArg::Joint)]
    ranking: RankingArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum RankingArg {
    Joint,
    Program,
}

#[derive(clap::Args)]
struct SynthArgs {
    #[command(flatten)]
    search: SearchArgs,
    /// One task as a JSON object; `program` is optional.
    #[arg(long)]
    task: PathBuf,
    #[arg(long)]
    show_latents: bool,
}

#[derive(clap::Args)]
struct EvalArgs {
    #[command(flatten)]
    search: SearchArgs,
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated: accuracy, lengths, diversity, cooccurrence.
    #[arg(long, default_value = "accuracy")]
    report: String,
    /// Directory for the CSV reports.
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

/// Failure with its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(code: u8, message: impl ToString) -> Self {
        Failure { code, message: message.to_string() }
    }

    fn usage(message: impl ToString) -> Self {
        Failure::new(2, message)
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        let code = match e {
            TrainError::Divergence { .. } => 3,
            TrainError::Config(_) | TrainError::Dataset(_) => 4,
            _ => 1,
        };
        Failure::new(code, e)
    }
}

impl From<CheckpointError> for Failure {
    fn from(e: CheckpointError) -> Self {
        Failure::new(1, e)
    }
}

impl From<SearchError> for Failure {
    fn from(e: SearchError) -> Self {
        let code = if matches!(e, SearchError::Config(_)) { 2 } else { 1 };
        Failure::new(code, e)
    }
}

fn io_failure(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure::new(1, format!("{}: {e}", path.display()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("LP_LOG", "warn")).format_timestamp(None).init();
    let cli = Cli::parse();
    let workers = cli.workers.max(1);
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a, workers),
        Command::Synth(a) => synth(a),
        Command::Eval(a) => eval_cmd(a, workers),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn gen_data(a: GenArgs) -> Result<(), Failure> {
    let dialect = match a.dialect {
        DialectArg::Full => Dialect::Full,
        DialectArg::Toy => Dialect::Toy,
    };
    let cfg = GenConfig { dialect, n_examples: a.n_examples, max_expressions: a.max_expressions, seed: a.seed, ..GenConfig::default() };
    let tasks = generate_dataset(&cfg, a.n_tasks).map_err(|e| match e {
        GenError::GenerationExhausted { .. } => Failure::new(3, e),
        GenError::Config(_) => Failure::usage(e),
    })?;
    write_dataset(&tasks, &a.out).map_err(|e| io_failure(&a.out, e))?;
    let mut hist: BTreeMap<usize, usize> = BTreeMap::new();
    for t in &tasks {
        *hist.entry(t.program.as_ref().map_or(0, |p| p.len())).or_default() += 1;
    }
    println!("wrote {} tasks to {}", tasks.len(), a.out.display());
    for (len, n) in hist {
        println!("  {len:>2} expressions: {n}");
    }
    Ok(())
}

fn read_config(path: &Path) -> Result<TrainConfig, Failure> {
    let text = fs::read_to_string(path).map_err(|e| io_failure(path, e))?;
    serde_json::from_str(&text).map_err(|e| Failure::new(4, format!("{}: {e}", path.display())))
}

fn train_cmd(a: TrainArgs, workers: usize) -> Result<(), Failure> {
    let mut config = read_config(&a.config)?;
    if let Some(p) = a.data {
        config.train_data = Some(p);
    }
    if let Some(p) = a.eval {
        config.eval_data = Some(p);
    }
    let train_path = config.train_data.clone().ok_or_else(|| Failure::usage("no training data: pass --data or set train_data"))?;
    let train_set = read_dataset(&train_path).map_err(|e| io_failure(&train_path, e))?;
    let eval_set = match &config.eval_data {
        Some(p) => read_dataset(p).map_err(|e| io_failure(p, e))?,
        None => vec![],
    };
    let mut trainer = if a.resume && a.out.exists() {
        let t: Trainer<f32> = load_checkpoint(&a.out)?;
        if t.config.model != config.model {
            return Err(Failure::new(4, "model config differs from the checkpoint being resumed"));
        }
        log::info!("resuming from step {}", t.step);
        Trainer { config: TrainConfig { train_data: config.train_data.clone(), eval_data: config.eval_data.clone(), ..config.clone() }, ..t }
    } else {
        Trainer::new(config)?
    };
    let metrics_path = a.metrics.unwrap_or_else(|| a.out.with_file_name("metrics.csv"));
    let append = a.resume && metrics_path.exists();
    let file = fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(&metrics_path)
        .map_err(|e| io_failure(&metrics_path, e))?;
    let mut writer = csv::WriterBuilder::new().has_headers(!append).from_writer(file);
    let already_done = trainer.step >= trainer.config.steps;
    let log = train(&mut trainer, &train_set, &eval_set, TrainIo { metrics: Some(&mut writer), checkpoint: Some(&a.out), workers })?;
    if already_done {
        println!("checkpoint already at step {}; nothing to do", trainer.step);
    } else if let Some(last) = log.last() {
        println!("trained to step {} (loss {:.4}); checkpoint {}", trainer.step, last.total, a.out.display());
        if let Some(acc) = last.eval_accuracy {
            println!("held-out accuracy {acc:.3}");
        }
    }
    Ok(())
}

fn load_search(s: &SearchArgs) -> Result<(Trainer<f32>, SearchConfig), Failure> {
    let trainer: Trainer<f32> = load_checkpoint(&s.ckpt)?;
    let mut config = SearchConfig::for_model(&trainer.model, s.beam, s.latent_beams);
    config.ranking = match s.ranking {
        RankingArg::Joint => Ranking::Joint,
        RankingArg::Program => Ranking::Program,
    };
    config.validate()?;
    Ok((trainer, config))
}

fn latent_text(latent: &[usize]) -> String {
    latent.iter().map(|id| format!("TOK_{}", id - RESERVED)).collect::<Vec<_>>().join(" | ")
}

fn synth(a: SynthArgs) -> Result<(), Failure> {
    let (trainer, config) = load_search(&a.search)?;
    let text = fs::read_to_string(&a.task).map_err(|e| io_failure(&a.task, e))?;
    let task = TaskRecord::parse_task(text.trim(), 1).map_err(|e| Failure::new(1, format!("{}: {e}", a.task.display())))?;
    let candidates = match two_level_synthesize(&trainer.model, &task, &config) {
        Err(SearchError::EmptyBeam) => return Err(Failure::new(5, "no consistent program found: no candidate finished")),
        other => other?,
    };
    let consistent = candidates.iter().position(|c| c.program.as_ref().is_some_and(|p| latent_programmer::dsl::is_consistent(p, &task)));
    for (i, c) in candidates.iter().enumerate() {
        let mark = if Some(i) == consistent { "*" } else { " " };
        let program = c.text().unwrap_or_else(|| format!("<invalid {:?}>", c.tokens));
        println!("{mark} {:>3}  {:>9.4}  {program}", i + 1, c.score);
        if a.show_latents && !trainer.model.config.baseline {
            println!("        latent: {}", latent_text(&c.latent));
        }
    }
    match consistent {
        Some(i) => {
            println!("consistent: {}", render_program(candidates[i].program.as_ref().expect("consistent programs parse")));
            Ok(())
        }
        None => Err(Failure::new(5, "no consistent program found")),
    }
}

const REPORTS: [&str; 4] = ["accuracy", "lengths", "diversity", "cooccurrence"];

fn eval_cmd(a: EvalArgs, workers: usize) -> Result<(), Failure> {
    let reports: Vec<&str> = a.report.split(',').map(str::trim).filter(|r| !r.is_empty()).collect();
    if let Some(bad) = reports.iter().find(|r| !REPORTS.contains(r)) {
        return Err(Failure::usage(format!("unknown report `{bad}` (expected one of {})", REPORTS.join(", "))));
    }
    let (trainer, config) = load_search(&a.search)?;
    let model = &trainer.model;
    let tasks = read_dataset(&a.data).map_err(|e| io_failure(&a.data, e))?;
    latent_programmer::train::check_dataset(model, &tasks, false)?;
    fs::create_dir_all(&a.out_dir).map_err(|e| io_failure(&a.out_dir, e))?;
    let outcomes = eval::run(&Searcher { model, config }, &tasks, workers);
    let write = |name: &str, body: String| -> Result<(), Failure> {
        let path = a.out_dir.join(name);
        fs::write(&path, body).map_err(|e| io_failure(&path, e))?;
        println!("wrote {}", path.display());
        Ok(())
    };
    for r in reports {
        match r {
            "accuracy" => {
                let acc = Accuracy::of(&outcomes);
                println!(
                    "accuracy@{}: {:.3} ({}/{}), 95% interval [{:.3}, {:.3}]",
                    config.beam, acc.estimate, acc.solved, acc.total, acc.low, acc.high
                );
                write("accuracy.csv", eval::accuracy_csv(&acc))?;
            }
            "lengths" => {
                let rows = eval::length_buckets(&tasks, &outcomes);
                print!("{}", eval::buckets_text(&rows));
                write("lengths.csv", eval::buckets_csv(&rows))?;
            }
            "diversity" => {
                let rows: Vec<(usize, f64)> = (1..=4).map(|n| (n, eval::mean_diversity(&outcomes, n))).collect();
                let mut body = String::from("n,distinct\n");
                for (n, d) in &rows {
                    println!("distinct-{n}: {d:.4}");
                    body.push_str(&format!("{n},{d}\n"));
                }
                write("diversity.csv", body)?;
            }
            "cooccurrence" => {
                if model.config.dialect == Dialect::Full {
                    log::warn!("co-occurrence on the full dialect is harder to interpret than on the toy dialect");
                }
                let m = eval::cooccurrence_from(&outcomes, model.config.dialect, model.config.compression, model.config.codes);
                print!("{}", eval::cooccurrence_text(&m));
                write("cooccurrence.csv", eval::cooccurrence_csv(&m))?;
            }
            _ => unreachable!("checked above"),
        }
    }
    Ok(())
}
