//! Newline-delimited JSON metrics: a schema header line, then one record per
//! training step. Keys appear in declaration order; non-finite values are
//! written as `null`.

use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::path::Path;

use gep_core::trainer::{Method, StepMetrics};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const SCHEMA: &str = "gep-metrics";
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    schema: String,
    version: u32,
}

/// Identity of one training run inside a metrics stream.
#[derive(Debug, Clone, PartialEq)]
pub struct RunInfo {
    pub run_id: String,
    pub method: Method,
    pub seed: u64,
    pub epsilon: f64,
    pub delta: f64,
    pub k: usize,
    pub m: usize,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsRecord {
    pub run_id: String,
    pub method: Method,
    pub seed: u64,
    pub epsilon_target: f64,
    pub delta: f64,
    pub k: usize,
    pub m: usize,
    pub sigma: f64,
    pub step: usize,
    pub batch_size: usize,
    pub train_loss: Option<f64>,
    pub eval_loss: Option<f64>,
    pub eval_accuracy: Option<f64>,
    pub projection_error_rate: Option<f64>,
    pub stable_rank_g: Option<f64>,
    pub stable_rank_r: Option<f64>,
    pub k_effective: usize,
    pub clip_fraction_embedding: Option<f64>,
    pub clip_fraction_residual: Option<f64>,
    pub epsilon_spent: Option<f64>,
}

fn finite(x: f64) -> Option<f64> {
    x.is_finite().then_some(x)
}

impl MetricsRecord {
    pub fn new(run: &RunInfo, s: &StepMetrics) -> Self {
        Self {
            run_id: run.run_id.clone(),
            method: run.method,
            seed: run.seed,
            epsilon_target: run.epsilon,
            delta: run.delta,
            k: run.k,
            m: run.m,
            sigma: run.sigma,
            step: s.step,
            batch_size: s.batch_size,
            train_loss: finite(s.train_loss),
            eval_loss: finite(s.eval_loss),
            eval_accuracy: finite(s.eval_accuracy),
            projection_error_rate: finite(s.projection_error_rate),
            stable_rank_g: finite(s.stable_rank_g),
            stable_rank_r: finite(s.stable_rank_r),
            k_effective: s.k_effective,
            clip_fraction_embedding: finite(s.clip_fraction_embedding),
            clip_fraction_residual: finite(s.clip_fraction_residual),
            epsilon_spent: finite(s.epsilon_spent),
        }
    }
}

pub struct MetricsWriter<W: Write> {
    out: W,
}

impl<W: Write> MetricsWriter<W> {
    pub fn new(mut out: W) -> std::io::Result<Self> {
        let header = Header {
            schema: SCHEMA.into(),
            version: SCHEMA_VERSION,
        };
        serde_json::to_writer(&mut out, &header)?;
        out.write_all(b"\n")?;
        Ok(Self { out })
    }

    pub fn write(&mut self, record: &MetricsRecord) -> std::io::Result<()> {
        serde_json::to_writer(&mut self.out, record)?;
        self.out.write_all(b"\n")
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

pub fn parse_metrics(text: impl BufRead, path: &Path) -> Result<Vec<MetricsRecord>> {
    let err = |row: usize, message: String| CliError::Parse {
        path: path.to_path_buf(),
        row,
        column: "-".into(),
        message,
    };
    let mut lines = text.lines().enumerate();
    let header_line = match lines.next() {
        Some((_, line)) => line.map_err(|e| CliError::io(path, e))?,
        None => return Err(err(1, "empty metrics stream".into())),
    };
    let header: Header = serde_json::from_str(&header_line).map_err(|e| err(1, format!("bad header: {e}")))?;
    if header.schema != SCHEMA || header.version != SCHEMA_VERSION {
        return Err(err(
            1,
            format!("unsupported schema {} v{}", header.schema, header.version),
        ));
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        let line = line.map_err(|e| CliError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| err(i + 1, e.to_string()))?);
    }
    Ok(out)
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let file = std::fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    parse_metrics(std::io::BufReader::new(file), path)
}

/// Final accuracy of every run sharing (method, ε, k, m).
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub method: Method,
    pub epsilon: f64,
    pub k: usize,
    pub m: usize,
    pub runs: usize,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
}

/// Groups the last record of each run, in order of first appearance.
pub fn summarize(records: &[MetricsRecord]) -> Vec<SummaryRow> {
    let mut finals: Vec<&MetricsRecord> = Vec::new();
    for r in records {
        match finals.iter_mut().find(|f| f.run_id == r.run_id) {
            Some(f) if r.step >= f.step => *f = r,
            Some(_) => {}
            None => finals.push(r),
        }
    }
    let mut groups: Vec<(Method, f64, usize, usize, Vec<f64>)> = Vec::new();
    for f in finals {
        let acc = f.eval_accuracy.unwrap_or(f64::NAN);
        match groups
            .iter_mut()
            .find(|g| g.0 == f.method && g.1 == f.epsilon_target && g.2 == f.k && g.3 == f.m)
        {
            Some(g) => g.4.push(acc),
            None => groups.push((f.method, f.epsilon_target, f.k, f.m, vec![acc])),
        }
    }
    groups
        .into_iter()
        .map(|(method, epsilon, k, m, acc)| {
            let n = acc.len() as f64;
            let mean = acc.iter().sum::<f64>() / n;
            let std = if acc.len() > 1 {
                (acc.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            } else {
                0.0
            };
            SummaryRow {
                method,
                epsilon,
                k,
                m,
                runs: acc.len(),
                mean_accuracy: mean,
                std_accuracy: std,
            }
        })
        .collect()
}

/// Tab-separated long table, one line per summary row.
pub fn summary_tsv(rows: &[SummaryRow]) -> String {
    let mut s = String::from("method\tepsilon\tk\tm\truns\tmean_accuracy\tstd_accuracy\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{}\t{}\t{:.6}\t{:.6}",
            r.method, r.epsilon, r.k, r.m, r.runs, r.mean_accuracy, r.std_accuracy
        );
    }
    s
}

fn distinct<T: PartialEq + Copy>(items: impl Iterator<Item = T>) -> Vec<T> {
    let mut out = Vec::new();
    for x in items {
        if !out.contains(&x) {
            out.push(x);
        }
    }
    out
}

fn cell(rows: &[&SummaryRow], pick: impl Fn(&SummaryRow) -> bool) -> String {
    match rows.iter().find(|r| pick(r)) {
        Some(r) => format!("{:.2} ± {:.2}", 100.0 * r.mean_accuracy, 100.0 * r.std_accuracy),
        None => "-".into(),
    }
}

/// Accuracy (%) tables: methods against ε for each (k, m), and methods
/// against k for each (ε, m) when more than one k was run.
pub fn summary_tables(rows: &[SummaryRow]) -> String {
    let mut s = String::new();
    let methods = distinct(rows.iter().map(|r| r.method));
    let epsilons = distinct(rows.iter().map(|r| r.epsilon.to_bits()));
    let ks = distinct(rows.iter().map(|r| r.k));
    let ms = distinct(rows.iter().map(|r| r.m));
    for &m in &ms {
        for &k in &ks {
            let block: Vec<&SummaryRow> = rows.iter().filter(|r| r.k == k && r.m == m).collect();
            if block.is_empty() {
                continue;
            }
            let _ = writeln!(s, "accuracy (%) by epsilon, k = {k}, m = {m}");
            let _ = write!(s, "{:<18}", "method");
            for e in &epsilons {
                let _ = write!(s, "{:>18}", format!("eps={}", f64::from_bits(*e)));
            }
            s.push('\n');
            for &method in &methods {
                let _ = write!(s, "{:<18}", method.name());
                for &e in &epsilons {
                    let _ = write!(s, "{:>18}", cell(&block, |r| r.method == method && r.epsilon.to_bits() == e));
                }
                s.push('\n');
            }
            s.push('\n');
        }
    }
    if ks.len() > 1 {
        for &m in &ms {
            for &e in &epsilons {
                let block: Vec<&SummaryRow> =
                    rows.iter().filter(|r| r.m == m && r.epsilon.to_bits() == e).collect();
                let _ = writeln!(s, "accuracy (%) by k, eps = {}, m = {m}", f64::from_bits(e));
                let _ = write!(s, "{:<18}", "method");
                for k in &ks {
                    let _ = write!(s, "{:>18}", format!("k={k}"));
                }
                s.push('\n');
                for &method in &methods {
                    let _ = write!(s, "{:<18}", method.name());
                    for &k in &ks {
                        let _ = write!(s, "{:>18}", cell(&block, |r| r.method == method && r.k == k));
                    }
                    s.push('\n');
                }
                s.push('\n');
            }
        }
    }
    s
}
