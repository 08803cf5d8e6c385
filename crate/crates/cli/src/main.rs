use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use efm_core::abgd;
use efm_core::ingest::{self, LoadOptions, SchemaSpec, UnseenPolicy};
use efm_core::lps::{self, SyntheticConfig};
use efm_core::metrics;
use efm_core::model::ModelFile;
use efm_core::pipeline::{self, Mode, PipelineConfig, SelectionTrace};
use efm_core::schema::{partition_kfold, Dataset};
use efm_core::selection;
use efm_core::EfmError;

#[derive(Parser)]
#[command(name = "efm", version, about = "Exponential factorization machines for positive responses")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load a CSV, report its schema and write it in normalized form.
    Ingest {
        #[arg(long)]
        schema: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Normalized CSV output.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Run feature selection on the training set.
    Select {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long)]
        output: PathBuf,
    },
    /// Fit a model with the selected features and regularization.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        selection: PathBuf,
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long)]
        output: PathBuf,
        /// Loss curve CSV.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Forecast a dataset with a saved model.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        schema: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Score unseen levels as the missing level instead of failing.
        #[arg(long)]
        remap_unseen: bool,
    },
    /// Score a forecasts CSV.
    Evaluate {
        #[arg(long)]
        forecasts: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Select, refit, forecast and evaluate in one run.
    Pipeline {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        output_dir: Option<PathBuf>,
        /// Train a plain factorization machine on log responses instead.
        #[arg(long)]
        logfm: bool,
        #[arg(long)]
        remap_unseen: bool,
    },
    /// Compare least squares and least percentage squares on noisy lines.
    LpsSweep {
        #[arg(long, default_value_t = 1.0)]
        sigma_min: f64,
        #[arg(long, default_value_t = 200.0)]
        sigma_max: f64,
        #[arg(long, default_value_t = 200)]
        steps: usize,
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Check the ES/PES minimizer bounds on a small dataset.
    BoundsCheck {
        #[arg(long)]
        schema: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Attributes to include; at most two with two levels each.
        #[arg(long, value_delimiter = ',')]
        attributes: Vec<String>,
        #[arg(long, default_value_t = 1e-9)]
        tolerance: f64,
    },
    /// Fractions of responses in the four quarters of their range.
    Distribution {
        #[arg(long)]
        schema: PathBuf,
        #[arg(long, required = true)]
        input: Vec<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 4 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            let code = err.chain().find_map(|e| e.downcast_ref::<EfmError>()).map_or(2, EfmError::exit_code);
            ExitCode::from(code as u8)
        }
    }
}

fn load_config(path: &Path) -> anyhow::Result<PipelineConfig> {
    Ok(PipelineConfig::from_json_file(path)?)
}

fn load_training(cfg: &PipelineConfig, override_path: Option<PathBuf>) -> anyhow::Result<Dataset> {
    let data = cfg.data.as_ref().ok_or(EfmError::Config("config has no data section".into()))?;
    let path = override_path.unwrap_or_else(|| data.train.clone());
    let set = ingest::load_csv(&path, &data.schema, &LoadOptions::training())
        .with_context(|| format!("loading {}", path.display()))?;
    Ok(set)
}

fn write_or_print(text: &str, output: Option<&Path>) -> anyhow::Result<()> {
    match output {
        Some(path) => fs::write(path, text).with_context(|| format!("writing {}", path.display()))?,
        None => print!("{text}"),
    }
    Ok(())
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Ingest { schema, input, output } => {
            let spec = SchemaSpec::from_json_file(&schema)?;
            let data = ingest::load_csv(&input, &spec, &LoadOptions::training())?;
            println!("rows: {}", data.len());
            for attr in data.schema().attributes() {
                println!("{}: {} levels", attr.name, attr.num_levels());
            }
            if let Some(path) = output {
                ingest::write_csv(&data, fs::File::create(&path)?)?;
            }
        }
        Command::Select { config, train, output } => {
            let cfg = load_config(&config)?;
            let run = cfg.resolve()?;
            let data = load_training(&cfg, train)?;
            let partition = partition_kfold(&data, run.selection.k, run.selection.partition_seed)?;
            let outcome = selection::gfsfs(&data, &partition, cfg.loss, &run.selection, &run.selection_train)?;
            let trace = SelectionTrace::new(data.schema(), &outcome);
            println!("attributes: {:?}", trace.attributes);
            println!("interactions: {:?}", trace.interactions);
            pipeline::write_json(&trace, &output)?;
        }
        Command::Train {
            config,
            selection,
            train,
            output,
            trace,
        } => {
            let cfg = load_config(&config)?;
            if cfg.mode != Mode::Efm {
                bail!(EfmError::Config("train fits EFM models only; use pipeline for the log mode".into()));
            }
            let train_cfg = cfg.resolve()?.refit;
            let data = load_training(&cfg, train)?;
            let chosen: SelectionTrace = serde_json::from_str(&fs::read_to_string(&selection)?)?;
            let features = chosen.features(data.schema())?;
            let report = abgd::train(&data, &features, cfg.loss, &train_cfg)?;
            ModelFile::from_parts(data.schema(), &features, &report.final_params, "exp")?.write(&output)?;
            if let Some(path) = trace {
                fs::write(path, report.trace_csv())?;
            }
        }
        Command::Predict {
            model,
            schema,
            input,
            output,
            remap_unseen,
        } => {
            let model = ModelFile::read(&model)?;
            let spec = SchemaSpec::from_json_file(&schema)?;
            let policy = if remap_unseen { UnseenPolicy::RemapToMissing } else { UnseenPolicy::Error };
            let base = std::sync::Arc::new(model.schema.clone());
            let data = ingest::load_csv(&input, &spec, &LoadOptions::test(base, policy))?;
            pipeline::write_forecasts_csv(&pipeline::forecast_dataset(&model, &data)?, &output)?;
        }
        Command::Evaluate { forecasts, output } => {
            let rows = pipeline::read_forecasts_csv(&forecasts)?;
            let report = pipeline::evaluate_forecasts(&rows)?;
            let text = format!("{}\n", serde_json::to_string_pretty(&report)?);
            write_or_print(&text, output.as_deref())?;
        }
        Command::Pipeline {
            config,
            output_dir,
            logfm,
            remap_unseen,
        } => {
            let mut cfg = load_config(&config)?;
            if logfm {
                cfg.mode = Mode::Logfm;
            }
            if remap_unseen {
                if let Some(data) = cfg.data.as_mut() {
                    data.unseen = UnseenPolicy::RemapToMissing;
                }
            }
            let dir = output_dir
                .or_else(|| cfg.output_dir.clone())
                .ok_or(EfmError::Config("no output directory given".into()))?;
            let artifacts = pipeline::run_pipeline(&cfg)?;
            pipeline::write_artifacts(&artifacts, &dir)?;
            let eval = &artifacts.evaluation.model;
            println!("{}", metrics::EvaluationReport::CSV_HEADER);
            println!("{}", eval.csv_row());
        }
        Command::LpsSweep {
            sigma_min,
            sigma_max,
            steps,
            n,
            seed,
            output,
        } => {
            if steps == 0 || !(sigma_max >= sigma_min) {
                bail!(EfmError::Config("need steps >= 1 and sigma_max >= sigma_min".into()));
            }
            let sigmas: Vec<f64> = (0..steps)
                .map(|i| match steps {
                    1 => sigma_min,
                    _ => sigma_min + (sigma_max - sigma_min) * i as f64 / (steps - 1) as f64,
                })
                .collect();
            let base = SyntheticConfig {
                n,
                seed,
                ..SyntheticConfig::default()
            };
            let rows = lps::sweep_sigma(&sigmas, &base)?;
            write_or_print(&lps::sweep_csv(&rows), output.as_deref())?;
        }
        Command::BoundsCheck {
            schema,
            input,
            attributes,
            tolerance,
        } => {
            let spec = SchemaSpec::from_json_file(&schema)?;
            let data = ingest::load_csv(&input, &spec, &LoadOptions::training())?;
            let features = pipeline::features_from_names(data.schema(), &attributes, &[])?;
            let report = metrics::verify_minimizer_bounds(&data, &features, tolerance)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            if !(report.es_bounds_hold && report.pes_bounds_hold) {
                bail!("bounds violated");
            }
        }
        Command::Distribution { schema, input } => {
            let spec = SchemaSpec::from_json_file(&schema)?;
            let mut values = Vec::new();
            for path in &input {
                values.extend(ingest::load_csv(path, &spec, &LoadOptions::training())?.responses());
            }
            let fractions = metrics::response_distribution(&values)?;
            println!("[0,0.25max)\t[0.25max,0.5max)\t[0.5max,0.75max)\t[0.75max,max]");
            println!(
                "{}",
                fractions.map(|f| format!("{:.2}%", 100.0 * f)).join("\t")
            );
        }
    }
    Ok(())
}
