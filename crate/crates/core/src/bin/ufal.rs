use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use ufal::experiment::ExperimentConfig;
use ufal::layout::LayoutMode;
use ufal::model::ModelBundle;
use ufal::report::{filtering_curve, project_features, run_ablation, write_series_csv, AblationRow};
use ufal::trainer::{adapt, evaluate, train_source, AdaptationTrace, Metric};

#[derive(Parser)]
#[command(name = "ufal", version, about = "Unsupervised domain adaptation with uncertain feature alignment")]
struct Cli {
    /// Metric output format on stdout.
    #[arg(long, value_enum, global = true, default_value = "human")]
    format: Format,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Human,
    Jsonl,
}

#[derive(Subcommand)]
enum Command {
    /// Supervised training on the labeled source domain.
    TrainSource {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to write.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        source_epochs: Option<usize>,
    },
    /// Adapt a source-trained checkpoint to the target domain.
    Adapt {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Line-delimited trace of steps, refreshes and the final evaluation.
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long)]
        adapt_steps: Option<usize>,
        #[arg(long, value_parser = parse_layout)]
        layout: Option<LayoutMode>,
        #[arg(long)]
        phi: Option<f64>,
        #[arg(long)]
        no_ufl: bool,
        #[arg(long)]
        no_ubf: bool,
    },
    /// Score a checkpoint on the labeled target domain.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Run the ablation table over several seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated row ids, e.g. `source_only,bis_random,ufal`; default all rows.
        #[arg(long, value_delimiter = ',')]
        rows: Vec<String>,
        /// Comma-separated seeds; default from the config file.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long)]
        adapt_steps: Option<usize>,
        /// Table CSV to write.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Derived artifacts: filtering curve from a trace, feature projection from a checkpoint.
    Report {
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Filtering-rate series CSV (needs `--trace`).
        #[arg(long)]
        filtering_csv: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Projection of target features CSV (needs `--config` and `--checkpoint`).
        #[arg(long)]
        projection_csv: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Args)]
struct Common {
    /// TOML experiment configuration; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

fn parse_layout(s: &str) -> std::result::Result<LayoutMode, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|_| {
        format!("unknown layout {s:?}; expected sbl, source_first, target_first, random or sbl_random_order")
    })
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut config = match path {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("reading config {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = seed {
        config.train.seed = seed;
    }
    Ok(config)
}

fn emit(format: Format, human: String, record: serde_json::Value) {
    match format {
        Format::Human => println!("{human}"),
        Format::Jsonl => println!("{record}"),
    }
}

fn run(cli: Cli) -> Result<bool> {
    let format = cli.format;
    match cli.command {
        Command::TrainSource {
            common,
            out,
            source_epochs,
        } => {
            let mut config = load_config(common.config.as_deref(), common.seed)?;
            if let Some(e) = source_epochs {
                config.train.source_epochs = e;
            }
            let (source, target) = config.datasets()?;
            let mut model = config.new_model(&source)?;
            let losses = train_source(&mut model, &source, &config.train)?;
            model.save(&out)?;
            let source_acc = evaluate(&model, &source, Metric::Accuracy)?;
            let target_acc = evaluate(&model, &target, Metric::Accuracy)?;
            emit(
                format,
                format!(
                    "source accuracy {source_acc:.4}  target accuracy {target_acc:.4}  final loss {:.6}",
                    losses.last().copied().unwrap_or(f64::NAN)
                ),
                json!({
                    "command": "train_source",
                    "seed": config.train.seed,
                    "source_accuracy": source_acc,
                    "target_accuracy": target_acc,
                    "epoch_losses": losses,
                }),
            );
        }
        Command::Adapt {
            common,
            checkpoint,
            out,
            trace,
            adapt_steps,
            layout,
            phi,
            no_ufl,
            no_ubf,
        } => {
            let mut config = load_config(common.config.as_deref(), common.seed)?;
            if let Some(n) = adapt_steps {
                config.train.adapt_steps = n;
            }
            if let Some(l) = layout {
                config.train.layout_mode = l;
            }
            if let Some(p) = phi {
                config.train.phi = p;
            }
            config.train.components.ufl &= !no_ufl;
            config.train.components.ubf &= !no_ubf;
            config.train.validate()?;
            let (source, target) = config.datasets()?;
            let mut model = ModelBundle::load(&checkpoint)
                .with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
            let adapt_trace = adapt(&mut model, &source, &target.unlabeled(), &config.train, Some(&target))?;
            model.save(&out)?;
            if let Some(path) = trace {
                adapt_trace.write_jsonl(&path)?;
            }
            let acc = evaluate(&model, &target, Metric::Accuracy)?;
            let mca = evaluate(&model, &target, Metric::MeanClassAccuracy)?;
            let last = adapt_trace.steps.last();
            emit(
                format,
                format!(
                    "target accuracy {acc:.4}  mean class accuracy {mca:.4}  steps {}  final loss {:.6}",
                    adapt_trace.steps.len(),
                    last.map_or(f64::NAN, |s| s.total_loss)
                ),
                json!({
                    "command": "adapt",
                    "seed": config.train.seed,
                    "accuracy": acc,
                    "mean_class_accuracy": mca,
                    "steps": adapt_trace.steps.len(),
                    "final_loss": last.map(|s| s.total_loss),
                }),
            );
        }
        Command::Evaluate { common, checkpoint } => {
            let config = load_config(common.config.as_deref(), common.seed)?;
            let (_, target) = config.datasets()?;
            let model = ModelBundle::load(&checkpoint)
                .with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
            let acc = evaluate(&model, &target, Metric::Accuracy)?;
            let mca = evaluate(&model, &target, Metric::MeanClassAccuracy)?;
            emit(
                format,
                format!("target accuracy {acc:.4}  mean class accuracy {mca:.4}"),
                json!({"command": "evaluate", "accuracy": acc, "mean_class_accuracy": mca}),
            );
        }
        Command::Ablate {
            common,
            rows,
            seeds,
            adapt_steps,
            out,
        } => {
            let mut config = load_config(common.config.as_deref(), common.seed)?;
            if let Some(n) = adapt_steps {
                config.train.adapt_steps = n;
            }
            let ids = if rows.is_empty() { config.ablation.rows.clone() } else { rows };
            let rows: Vec<AblationRow> = if ids.is_empty() {
                AblationRow::ALL.to_vec()
            } else {
                ids.iter().map(|id| AblationRow::from_id(id)).collect::<ufal::Result<_>>()?
            };
            let seeds = if seeds.is_empty() { config.ablation.seeds.clone() } else { seeds };
            if seeds.is_empty() {
                bail!("no seeds given");
            }
            let table = run_ablation(&config, &rows, &seeds)?;
            if let Some(path) = out {
                table.write_csv(&path)?;
            }
            match format {
                Format::Human => print!("{}", table.render()),
                Format::Jsonl => {
                    for r in &table.results {
                        println!(
                            "{}",
                            json!({
                                "command": "ablate",
                                "row": r.row.id(),
                                "name": r.row.name(),
                                "seeds": table.seeds,
                                "accuracies": r.accuracies,
                                "mean_accuracy": r.mean_accuracy(),
                            })
                        );
                    }
                }
            }
            if table.any_failed() {
                log::error!("at least one ablation run failed");
                return Ok(false);
            }
        }
        Command::Report {
            trace,
            filtering_csv,
            config,
            checkpoint,
            projection_csv,
            seed,
        } => {
            if filtering_csv.is_none() && projection_csv.is_none() {
                bail!("nothing to report; pass --filtering-csv and/or --projection-csv");
            }
            if let Some(path) = filtering_csv {
                let Some(trace) = trace else { bail!("--filtering-csv needs --trace") };
                let series = filtering_curve(&AdaptationTrace::read_jsonl(&trace)?);
                write_series_csv(&path, ["step", "filtered_fraction"], &series)?;
                emit(
                    format,
                    format!("wrote {} filtering points to {}", series.len(), path.display()),
                    json!({"command": "report", "filtering_points": series.len()}),
                );
            }
            if let Some(path) = projection_csv {
                let Some(checkpoint) = checkpoint else { bail!("--projection-csv needs --checkpoint") };
                let config = load_config(config.as_deref(), seed)?;
                let (_, target) = config.datasets()?;
                let model = ModelBundle::load(&checkpoint)?;
                let features = model.features_eval(target.inputs.view())?;
                let projection = project_features(features.view(), &target.labels)?;
                projection.write_csv(&path)?;
                emit(
                    format,
                    format!("wrote {} projected points to {}", target.len(), path.display()),
                    json!({"command": "report", "projected_points": target.len()}),
                );
            }
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
