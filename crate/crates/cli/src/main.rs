//! `logmilp` command-line front end.
//!
//! Exit codes: 0 success, 1 other failure, 2 configuration error, 3 missing
//! artifact, 4 numeric failure.

use clap::{Args, Parser, Subcommand};
use logmilp::bagging::write_bag_cache;
use logmilp::config::RunConfig;
use logmilp::eval::{append_metrics_csv, read_metrics_csv, summarize};
use logmilp::ingest::{ingest_file, write_embeddings};
use logmilp::pipeline::{eval_run, ingest_options, load_dataset, localization_report, train_run};
use logmilp::synthgen::{generate, write_corpus};
use logmilp::Error;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "logmilp", version, about = "Multi-instance log anomaly detection and localization")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Flat key=value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Extra `key=value` overrides, applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labeled synthetic corpus.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        lines: Option<usize>,
        #[arg(long)]
        anomaly_rate: Option<f64>,
        /// Log file to write; labels go to `<out>.labels`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Parse a log and write its embedding cache.
    Ingest {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        format: Option<String>,
        /// Base path of the embedding cache.
        #[arg(long)]
        out: PathBuf,
    },
    /// Bag a log or embedding cache into a bag cache.
    Bag {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and write checkpoint, training log and effective config.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Disable the counterfactual consistency loss.
        #[arg(long)]
        no_consistency: bool,
        /// Run directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint and append a metrics row.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Metrics CSV to append to; printed to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the localization report for positive test bags.
    Localize {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Mean and sample standard deviation of a metrics CSV.
    Summary {
        #[arg(long)]
        input: PathBuf,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_)
        | Error::InvalidSpec(_)
        | Error::InvalidWindow { .. }
        | Error::InvalidRatios(_)
        | Error::InvalidDimension(_) => 2,
        Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => 3,
        Error::NonFiniteLoss { .. } | Error::DegenerateVector(_) => 4,
        _ => 1,
    }
}

fn build_config(common: &Common, overrides: &[(&str, Option<String>)]) -> logmilp::Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) if !p.exists() => {
            return Err(Error::Io(std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!("config {} not found", p.display()),
            )))
        }
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for kv in &common.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = common.seed {
        cfg.set("seed", &seed.to_string())?;
    }
    for (k, v) in overrides {
        if let Some(v) = v {
            cfg.set(k, v)?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn path_str(p: &Option<PathBuf>) -> Option<String> {
    p.as_ref().map(|p| p.display().to_string())
}

fn write_or_print(out: &Option<PathBuf>, text: &str) -> logmilp::Result<()> {
    match out {
        Some(p) => std::fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn run(cli: Cli) -> logmilp::Result<()> {
    match cli.cmd {
        Command::Synth {
            common,
            lines,
            anomaly_rate,
            out,
        } => {
            let cfg = build_config(
                &common,
                &[
                    ("lines", lines.map(|v| v.to_string())),
                    ("anomaly_rate", anomaly_rate.map(|v| v.to_string())),
                ],
            )?;
            let corpus = generate(&cfg.synth)?;
            write_corpus(&out, &corpus)?;
            let anomalous = corpus.labels.iter().filter(|&&y| y == 1).count();
            eprintln!("wrote {} lines ({anomalous} anomalous) to {}", corpus.labels.len(), out.display());
        }
        Command::Ingest {
            common,
            input,
            format,
            out,
        } => {
            let cfg = build_config(&common, &[("input", path_str(&input)), ("format", format)])?;
            let input = cfg.input.clone().ok_or_else(|| Error::Config("ingest needs --input".into()))?;
            let corpus = ingest_file(&input, &ingest_options(&cfg))?;
            write_embeddings(&out, &corpus.embeddings, corpus.d, &corpus.labels())?;
            eprintln!(
                "{} records, {} templates, {} skipped lines",
                corpus.len(),
                corpus.templates.len(),
                corpus.skipped
            );
        }
        Command::Bag { common, input, out } => {
            let cfg = build_config(&common, &[("input", path_str(&input))])?;
            let input = cfg.input.clone().ok_or_else(|| Error::Config("bag needs --input".into()))?;
            let ds = load_dataset(&cfg, &input)?;
            write_bag_cache(&out, &ds)?;
            eprintln!("{} bags ({} positive)", ds.len(), ds.positives());
        }
        Command::Train {
            common,
            input,
            epochs,
            no_consistency,
            out,
        } => {
            let cfg = build_config(
                &common,
                &[
                    ("input", path_str(&input)),
                    ("epochs", epochs.map(|v| v.to_string())),
                    ("use_consistency", no_consistency.then(|| "false".to_string())),
                ],
            )?;
            let outcome = train_run(&cfg, &out)?;
            eprint!("{}", outcome.log);
            eprintln!(
                "best epoch {} (val F1 {}), checkpoint {}",
                outcome.fit.best_epoch,
                outcome.fit.best_val_f1.map(|f| format!("{f:.6}")).unwrap_or_else(|| "n/a".into()),
                outcome.checkpoint.display()
            );
        }
        Command::Eval {
            common,
            input,
            checkpoint,
            out,
        } => {
            let cfg = build_config(&common, &[("input", path_str(&input)), ("checkpoint", path_str(&checkpoint))])?;
            let (report, _) = eval_run(&cfg)?;
            match out.as_deref().or(cfg.metrics.as_deref()) {
                Some(p) => append_metrics_csv(p, &report)?,
                None => println!("{}\n{}", logmilp::eval::METRICS_HEADER, report.csv_row()),
            }
        }
        Command::Localize {
            common,
            input,
            checkpoint,
            k,
            out,
        } => {
            let cfg = build_config(
                &common,
                &[
                    ("input", path_str(&input)),
                    ("checkpoint", path_str(&checkpoint)),
                    ("k", k.map(|v| v.to_string())),
                ],
            )?;
            let (_, loc) = eval_run(&cfg)?;
            write_or_print(&out, &localization_report(&loc))?;
        }
        Command::Summary { input } => {
            let reports = read_metrics_csv(Path::new(&input))?;
            print!("{}", summarize(&reports));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
