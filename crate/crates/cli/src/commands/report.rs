use std::io::Write;
use std::path::PathBuf;

use super::emit;
use super::train::SUMMARY_FILE;
use crate::error::{CliError, Result};
use crate::metrics::{read_metrics, summarize, summary_tables, summary_tsv, SummaryRow};

#[derive(Debug, Clone, clap::Args)]
pub struct ReportArgs {
    /// Metrics files written by `gep train`.
    #[arg(required = true)]
    pub metrics: Vec<PathBuf>,
    /// Also write summary.tsv into this directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn run(args: &ReportArgs, out: &mut dyn Write) -> Result<Vec<SummaryRow>> {
    let mut records = Vec::new();
    for path in &args.metrics {
        records.extend(read_metrics(path)?);
    }
    let summary = summarize(&records);
    emit(out, &summary_tables(&summary))?;
    if let Some(dir) = &args.out {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        let path = dir.join(SUMMARY_FILE);
        std::fs::write(&path, summary_tsv(&summary)).map_err(|e| CliError::io(&path, e))?;
    }
    Ok(summary)
}
