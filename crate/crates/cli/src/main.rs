//! `perceptlab` command-line front end.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use perceptlab::config::ExperimentConfig;
use perceptlab::corpus::PromptMode;
use perceptlab::model::ComponentMask;
use perceptlab::{pipeline, Error, Result};

#[derive(Parser)]
#[command(name = "perceptlab", version, about = "Distortion perception experiments on a tiny multimodal model")]
struct Cli {
    /// Root that every relative path is resolved against.
    #[arg(long, global = true, default_value = ".")]
    workdir: PathBuf,

    /// Experiment configuration (JSON). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Prompt {
    Finetune,
    BaselineOptions,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a class-balanced distorted corpus.
    Synth {
        #[arg(long)]
        out: PathBuf,
    },
    /// Split or import datasets.
    Dataset {
        #[command(subcommand)]
        action: DatasetAction,
    },
    /// Write a freshly initialized checkpoint.
    Init {
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune the components named by the activation mask.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        /// Comma-separated subset of encoder, projector, lm, lm-partial.
        #[arg(long)]
        activate: Option<String>,
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Classify the test split and write accuracy and confusion matrix.
    Eval {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        prompt: Option<Prompt>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Measure similarity and label-probability shifts between two checkpoints.
    Probe {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        init: PathBuf,
        #[arg(long)]
        tuned: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train, evaluate and probe every activation arm from one init.
    Sweep {
        /// Existing split corpus; synthesized under OUT when omitted.
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare analytic gradients with central differences.
    Gradcheck {
        #[arg(long, default_value_t = 200)]
        probes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Use the small built-in model instead of the configured one.
        #[arg(long)]
        tiny: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render the markdown summary of a sweep directory.
    Report {
        #[arg(long)]
        sweep: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum DatasetAction {
    /// Assign train/test splits in place.
    Split {
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Import an external `image,distortion` CSV.
    Import {
        #[arg(long)]
        csv: PathBuf,
        /// JSON object mapping external distortion names to class words or "skip".
        #[arg(long)]
        label_map: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<String> {
    let root = cli.workdir;
    let at = |p: &Path| root.join(p);
    let cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(&at(p))?,
        None => ExperimentConfig::default(),
    };
    let digest = cfg.digest();
    let line = match cli.command {
        Command::Synth { out } => {
            let m = pipeline::synth(&cfg, &at(&out))?;
            format!("command=synth samples={}", m.records.len())
        }
        Command::Dataset {
            action: DatasetAction::Split { corpus },
        } => {
            let m = pipeline::split(&cfg, &at(&corpus))?;
            let train = m.split(perceptlab::corpus::Split::Train).records.len();
            format!("command=dataset-split train={train} test={}", m.records.len() - train)
        }
        Command::Dataset {
            action: DatasetAction::Import { csv, label_map, out },
        } => {
            let m = pipeline::import(&cfg, &at(&csv), &at(&label_map), &at(&out))?;
            format!("command=dataset-import samples={}", m.records.len())
        }
        Command::Init { out } => {
            let p = pipeline::init(&cfg, &at(&out))?;
            format!("command=init scalars={}", p.scalar_count())
        }
        Command::Train {
            corpus,
            activate,
            init,
            out,
        } => {
            let mask = activate.as_deref().map(ComponentMask::parse).transpose()?;
            pipeline::train(&cfg, &at(&corpus), mask, init.as_deref().map(at).as_deref(), &at(&out))?;
            format!("command=train mask={}", mask.unwrap_or(cfg.train.mask))
        }
        Command::Eval {
            corpus,
            checkpoint,
            prompt,
            out,
        } => {
            let mode = prompt.map(|p| match p {
                Prompt::Finetune => PromptMode::Finetune,
                Prompt::BaselineOptions => PromptMode::BaselineOptions,
            });
            let r = pipeline::eval(&cfg, &at(&corpus), &at(&checkpoint), mode, &at(&out))?;
            format!("command=eval accuracy={:.6} unparseable={}", r.accuracy, r.unparseable)
        }
        Command::Probe { corpus, init, tuned, out } => {
            let r = pipeline::probe(&cfg, &at(&corpus), &at(&init), &at(&tuned), &at(&out))?;
            format!(
                "command=probe records={} excluded={} similarity_shift={:.6} logit_shift={:.6}",
                r.records.len(),
                r.aggregate.excluded,
                r.aggregate.overall.mean_similarity_shift,
                r.aggregate.overall.mean_logit_shift
            )
        }
        Command::Sweep { corpus, out } => {
            let s = pipeline::sweep(&cfg, corpus.as_deref().map(at).as_deref(), &at(&out))?;
            let failed = s.rows.iter().filter(|r| r.error.is_some()).count();
            if failed == s.rows.len() {
                return Err(Error::Training {
                    step: 0,
                    message: "every sweep arm failed".into(),
                });
            }
            format!("command=sweep arms={} failed={failed}", s.rows.len())
        }
        Command::Gradcheck { probes, seed, tiny, out } => {
            let r = pipeline::gradcheck(&cfg, tiny, probes, seed, &at(&out))?;
            format!("command=gradcheck probes={} max_rel_error={:.3e}", r.probes.len(), r.max_rel_error)
        }
        Command::Report { sweep, out } => {
            pipeline::report(&at(&sweep), &at(&out))?;
            "command=report".to_string()
        }
    };
    Ok(format!("status=ok {line} config_digest={digest}"))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(line) => {
            println!("{line}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            let message = e.to_string().replace(['\n', '\r'], " ");
            eprintln!("status=error kind={} code={} message={message:?}", e.kind(), e.exit_code());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
