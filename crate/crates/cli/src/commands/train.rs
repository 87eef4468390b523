use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use gep_core::experiments::task_splits;
use gep_core::linalg::{gaussian_noise, RandomStream};
use gep_core::models::{Dataset, ModelKind, ModelSpec};
use gep_core::trainer::{calibrate, dp_train, Method};

use super::{emit, parse_named};
use crate::config::{DataSection, ModelSection, RunConfig};
use crate::error::{CliError, Result};
use crate::ingest::{ingest_csv, Normalize, Standardizer};
use crate::metrics::{summarize, summary_tables, summary_tsv, MetricsRecord, MetricsWriter, RunInfo, SummaryRow};

pub const METRICS_FILE: &str = "metrics.ndjson";
pub const SUMMARY_FILE: &str = "summary.tsv";

const INIT_STREAM: u64 = 0x1417;
const ANCHOR_STREAM: u64 = 0xa7c4;

#[derive(Debug, Clone, clap::Args)]
pub struct TrainArgs {
    /// Run configuration (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Replace the configured seed list with this single seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (overrides `run.out`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Run only this method.
    #[arg(long, value_parser = parse_named::<Method>)]
    pub method: Option<Method>,
}

pub struct TrainResult {
    pub out_dir: PathBuf,
    pub summary: Vec<SummaryRow>,
}

#[derive(Clone)]
struct Splits {
    private: Dataset,
    aux: Dataset,
    eval: Dataset,
}

pub fn run(args: &TrainArgs, out: &mut dyn Write) -> Result<TrainResult> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.run.seeds = vec![seed];
    }
    if let Some(method) = args.method {
        cfg.run.methods = vec![method];
    }
    if let Some(dir) = &args.out {
        cfg.run.out = dir.clone();
    }
    cfg.check_inputs()?;
    let dir = cfg.run.out.clone();
    std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    // Absolute paths keep the copy loadable from the output directory.
    let mut copy = cfg.clone();
    let cwd = std::env::current_dir().map_err(|e| CliError::io(".", e))?;
    copy.resolve_paths(&cwd);
    let config_copy = dir.join("config.toml");
    std::fs::write(&config_copy, copy.to_toml()?).map_err(|e| CliError::io(&config_copy, e))?;

    let metrics_path = dir.join(METRICS_FILE);
    let file = File::create(&metrics_path).map_err(|e| CliError::io(&metrics_path, e))?;
    let mut writer = MetricsWriter::new(BufWriter::new(file)).map_err(|e| CliError::io(&metrics_path, e))?;
    let mut records = Vec::new();

    let csv_splits = match &cfg.data {
        DataSection::Csv { .. } => Some(load_csv(&cfg)?),
        DataSection::Synth { .. } => None,
    };
    for &seed in &cfg.run.seeds {
        let splits = match &csv_splits {
            Some(s) => s.clone(),
            None => synth_splits(&cfg, seed)?,
        };
        let init = build_model(&cfg, &splits.private, seed)?;
        for &method in &cfg.run.methods {
            for &epsilon in &cfg.run.epsilons {
                for &k in &cfg.ks() {
                    for &m in &cfg.ms() {
                        let mut tc = cfg.train_config(method, epsilon, k, m, seed)?;
                        tc.gep.sigma = match cfg.run.sigma {
                            Some(s) if method != Method::NonPrivate => s,
                            _ => calibrate(&tc, cfg.run.calibration).map_err(|e| budget_error(&tc, e))?,
                        };
                        let outcome = dp_train(&tc, &init, &splits.private, &splits.aux, &splits.eval)?;
                        let info = RunInfo {
                            run_id: format!("{}/{method}/eps={epsilon}/k={k}/m={m}/seed={seed}", cfg.run.name),
                            method,
                            seed,
                            epsilon,
                            delta: cfg.run.delta,
                            k,
                            m,
                            sigma: outcome.sigma,
                        };
                        for step in &outcome.metrics {
                            let rec = MetricsRecord::new(&info, step);
                            writer.write(&rec).map_err(|e| CliError::io(&metrics_path, e))?;
                            records.push(rec);
                        }
                        let last = outcome.metrics.last().map_or(f64::NAN, |s| s.eval_accuracy);
                        emit(out, &format!("{}: sigma {:.4} final accuracy {:.4}\n", info.run_id, info.sigma, last))?;
                    }
                }
            }
        }
    }
    writer
        .into_inner()
        .flush()
        .map_err(|e| CliError::io(&metrics_path, e))?;

    let summary = summarize(&records);
    let tsv_path = dir.join(SUMMARY_FILE);
    std::fs::write(&tsv_path, summary_tsv(&summary)).map_err(|e| CliError::io(&tsv_path, e))?;
    emit(out, &format!("\n{}", summary_tables(&summary)))?;
    emit(out, &format!("metrics: {}\n", metrics_path.display()))?;
    Ok(TrainResult { out_dir: dir, summary })
}

fn budget_error(tc: &gep_core::trainer::TrainConfig, e: gep_core::Error) -> CliError {
    CliError::Check(format!(
        "cannot calibrate noise for epsilon = {}, delta = {}, steps = {}, sampling rate = {}: {e}",
        tc.budget.epsilon(),
        tc.budget.delta(),
        tc.steps,
        tc.batch.sampling_rate()
    ))
}

fn synth_splits(cfg: &RunConfig, seed: u64) -> Result<Splits> {
    let DataSection::Synth { task, n_private, n_aux, n_eval } = &cfg.data else {
        unreachable!("called for synthetic data only");
    };
    let (private, aux, eval) = task_splits(task, *n_private, *n_aux, *n_eval, seed)?;
    Ok(Splits { private, aux, eval })
}

fn load_csv(cfg: &RunConfig) -> Result<Splits> {
    let DataSection::Csv { train, eval, aux, holdout, label, normalize } = &cfg.data else {
        unreachable!("called for CSV data only");
    };
    let mut private = ingest_csv(train, label)?;
    let mut aux_data = match aux {
        Some(p) => Some(ingest_csv(p, label)?),
        None if *holdout > 0 => {
            if *holdout >= private.len() {
                return Err(CliError::Config(format!(
                    "data.holdout = {holdout} leaves no training rows out of {}",
                    private.len()
                )));
            }
            let (kept, held) = private.split_at(private.len() - holdout);
            private = kept;
            Some(held)
        }
        None => None,
    };
    let mut eval_data = match eval {
        Some(p) => ingest_csv(p, label)?,
        None => private.clone(),
    };
    for other in aux_data.iter().chain(std::iter::once(&eval_data)) {
        check_width(train, &private, other)?;
    }
    if *normalize == Normalize::Standardize {
        let s = Standardizer::fit(&private);
        private = s.apply(&private)?;
        eval_data = s.apply(&eval_data)?;
        if let Some(a) = &aux_data {
            aux_data = Some(s.apply(a)?);
        }
    }
    let aux_data = match aux_data {
        Some(a) => a,
        None => {
            // Gaussian anchor features; labels are redrawn by the trainer.
            let rows = cfg.ms().into_iter().max().unwrap_or(1);
            let x = gaussian_noise(rows, private.dim(), 1.0, &RandomStream::new(0, ANCHOR_STREAM))?;
            Dataset::new(x, vec![0.0; rows], "gaussian-anchors")?
        }
    };
    Ok(Splits {
        private,
        aux: aux_data,
        eval: eval_data,
    })
}

fn check_width(train: &Path, private: &Dataset, other: &Dataset) -> Result<()> {
    if other.dim() != private.dim() {
        return Err(CliError::Config(format!(
            "{} has {} feature columns but {} has {}",
            train.display(),
            private.dim(),
            other.name,
            other.dim()
        )));
    }
    Ok(())
}

fn build_model(cfg: &RunConfig, private: &Dataset, seed: u64) -> Result<ModelSpec> {
    let ModelSection { kind, hidden, classes } = &cfg.model;
    let d = private.dim();
    let classes = match (classes, &cfg.data) {
        (Some(c), _) => *c,
        (None, DataSection::Synth { task, .. }) => task.classes(),
        (None, DataSection::Csv { .. }) => private.labels.iter().fold(0.0f64, |a, &b| a.max(b)) as usize + 1,
    };
    Ok(match kind {
        ModelKind::Linear => ModelSpec::linear(d),
        ModelKind::Logistic => ModelSpec::logistic(d, classes)?,
        ModelKind::Mlp => ModelSpec::mlp(d, hidden, classes)?.init_random(&RandomStream::new(seed, INIT_STREAM))?,
    })
}
