use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::OnceLock;

use clap::{Args, Parser, Subcommand};
use damamba::bench::{
    partner_scaling_benchmark, run_scaling_benchmark, single_threaded, to_csv, CountingAlloc, PartnerConfig,
    ScalingConfig,
};
use damamba::config::{Config, KEY_TABLE};
use damamba::pipeline::{load_sessions, write_synthetic_corpus, SessionBatch, SyntheticOptions};
use damamba::train::{evaluate_checkpoint, split_sessions, train, TrainOptions};
use damamba::Error;

#[global_allocator]
static ALLOC: CountingAlloc = CountingAlloc;

fn key_table() -> &'static str {
    static TABLE: OnceLock<String> = OnceLock::new();
    TABLE.get_or_init(|| {
        let width = KEY_TABLE.iter().map(|(k, _, _)| k.len()).max().unwrap_or(0);
        let mut s = String::from("Config keys (dotted, usable with --override; default, note):\n");
        for (key, default, note) in KEY_TABLE {
            s.push_str(&format!("  {key:<width$}  {default:<8} {note}\n"));
        }
        s
    })
}

#[derive(Parser)]
#[command(
    name = "damamba",
    version,
    about = "Dialogue-aware engagement estimation: generate data, train, evaluate, benchmark",
    after_help = key_table()
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dialogue corpus.
    Generate(GenerateArgs),
    /// Train a model on a directory of sessions.
    #[command(after_help = key_table())]
    Train(TrainArgs),
    /// Score a checkpoint on labelled sessions.
    Eval(EvalArgs),
    /// Time and memory scaling of the hybrid block against full attention.
    Bench(BenchArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 2)]
    participants: usize,
    /// High-rate frames per session.
    #[arg(long, default_value_t = 192)]
    frames: usize,
    #[arg(long, default_value_t = 10)]
    sessions: usize,
    /// Standard deviation of the feature noise.
    #[arg(long, default_value_t = 1.0)]
    noise: f64,
    #[arg(long)]
    out: PathBuf,
    /// Write into a non-empty directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// TOML config; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `key=value`, repeatable; applied after the config file.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Sets train.seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory of session directories; the last `train.val_sessions` are held out.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Continue from the state saved in --out.
    #[arg(long)]
    resume: bool,
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Directory of session directories.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Individual session directories.
    sessions: Vec<PathBuf>,
    /// Also write the report CSV here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_values_t = [256usize, 512, 1024, 2048, 4096])]
    lengths: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = [String::from("hybrid"), String::from("full-attention")])]
    variants: Vec<String>,
    /// Rows whose peak allocation would exceed this many bytes are reported as OOM.
    #[arg(long)]
    cap_bytes: Option<u64>,
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also run the partner-count benchmark at these dialogue sizes.
    #[arg(long, value_delimiter = ',')]
    participants: Vec<usize>,
    /// Write the scaling CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Usage(_) => 2,
        Error::Data(_) | Error::Alignment(_) | Error::Io { .. } => 3,
        Error::Config(_) | Error::Dimension(_) | Error::Validation(_) => 4,
        Error::Divergence { .. } | Error::NonFinite(_) => 5,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(a) => generate(a),
        Command::Train(a) => run_train(a),
        Command::Eval(a) => eval(a),
        Command::Bench(a) => bench(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn is_non_empty_dir(p: &Path) -> bool {
    std::fs::read_dir(p).map(|mut d| d.next().is_some()).unwrap_or(false)
}

fn generate(a: GenerateArgs) -> damamba::Result<()> {
    if is_non_empty_dir(&a.out) && !a.force {
        return Err(Error::Usage(format!(
            "{} is not empty; pass --force to write into it",
            a.out.display()
        )));
    }
    if a.sessions == 0 {
        return Err(Error::Config("--sessions must be at least 1".into()));
    }
    let opts = SyntheticOptions {
        noise: a.noise,
        ..SyntheticOptions::default()
    };
    let sessions = write_synthetic_corpus(&a.out, a.seed, a.participants, a.frames, a.sessions, &opts)?;
    println!("session,participants,frames,label_mean,label_std,label_min,label_max");
    for s in &sessions {
        let y = s.labels.data();
        let mean = y.iter().sum::<f64>() / y.len() as f64;
        let std = (y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / y.len() as f64).sqrt();
        let (lo, hi) = y.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        println!(
            "{},{},{},{mean:.4},{std:.4},{lo:.4},{hi:.4}",
            s.id,
            s.participants(),
            s.frames()
        );
    }
    Ok(())
}

fn load_config(path: Option<&Path>, overrides: &[String], seed: Option<u64>) -> damamba::Result<Config> {
    let base = match path {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    let mut all = overrides.to_vec();
    if let Some(s) = seed {
        all.push(format!("train.seed={s}"));
    }
    base.with_overrides(&all)
}

fn run_train(a: TrainArgs) -> damamba::Result<()> {
    let cfg = load_config(a.config.as_deref(), &a.overrides, a.seed)?;
    let sessions = load_sessions(&a.data)?;
    let (train_set, val) = split_sessions(sessions, cfg.train.val_sessions)?;
    let opts = TrainOptions {
        resume: a.resume,
        verbose: !a.quiet,
        stop_after: None,
    };
    let out = train(&cfg, &train_set, &val, &a.out, &opts)?;
    println!(
        "final val CCC {:.4} (best {:.4}) after {} epochs, step {}; checkpoint {}",
        out.metrics.last().map_or(f64::NAN, |m| m.val_ccc),
        out.best_val_ccc,
        out.epochs_run,
        out.final_step,
        out.checkpoint.display()
    );
    Ok(())
}

fn eval(a: EvalArgs) -> damamba::Result<()> {
    let mut sessions: Vec<SessionBatch> = match &a.data {
        Some(root) => load_sessions(root)?,
        None => Vec::new(),
    };
    for dir in &a.sessions {
        sessions.push(SessionBatch::load(dir)?);
    }
    if sessions.is_empty() {
        return Err(Error::Usage("no sessions to evaluate; pass --data or session directories".into()));
    }
    let report = evaluate_checkpoint(&a.checkpoint, &sessions)?;
    let csv = report.to_csv()?;
    print!("{csv}");
    if let Some(path) = &a.out {
        std::fs::write(path, &csv).map_err(|e| Error::Io {
            path: path.clone(),
            source: e,
        })?;
    }
    Ok(())
}

fn bench(a: BenchArgs) -> damamba::Result<()> {
    let cfg = ScalingConfig {
        lengths: a.lengths,
        variants: a.variants,
        cap_bytes: a.cap_bytes,
        repeats: a.repeats,
        seed: a.seed,
        ..ScalingConfig::default()
    };
    let rows = single_threaded(|| run_scaling_benchmark(&cfg))??;
    let csv = to_csv(&rows)?;
    match &a.out {
        Some(path) => std::fs::write(path, &csv).map_err(|e| Error::Io {
            path: path.clone(),
            source: e,
        })?,
        None => print!("{csv}"),
    }
    let oom = rows.iter().filter(|r| r.oom).count();
    if oom > 0 {
        eprintln!("{oom} row(s) exceeded the allocation cap and were not run");
    }
    if !a.participants.is_empty() {
        let pc = PartnerConfig {
            participants: a.participants,
            repeats: a.repeats,
            seed: a.seed,
            ..PartnerConfig::default()
        };
        let rows = single_threaded(|| partner_scaling_benchmark(&pc))??;
        print!("{}", to_csv(&rows)?);
    }
    Ok(())
}
