use std::io::Write;
use std::path::PathBuf;

use gep_core::experiments::{projection_sweep, reference, AuxSource, SweepPoint};
use gep_core::linalg::RandomStream;
use gep_core::mechanism::BasisMode;

use super::{emit, parse_named};
use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Task {
    /// Approximately low-rank linear regression (p = 200).
    Lowrank,
    /// One-hidden-layer MLP on a Gaussian mixture (p = 771).
    Mlp,
}

#[derive(Debug, Clone, clap::Args)]
pub struct ProjectErrorArgs {
    #[arg(long, value_enum, default_value_t = Task::Lowrank)]
    pub task: Task,
    #[arg(long, value_delimiter = ',', default_values_t = vec![5usize, 10, 20, 40, 80])]
    pub k: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = vec![50usize, 100, 200])]
    pub m: Vec<usize>,
    /// Number of seeds, counted from `--seed`.
    #[arg(long, default_value_t = 10)]
    pub seeds: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_delimiter = ',', value_parser = parse_named::<BasisMode>, default_value = "power,random")]
    pub basis: Vec<BasisMode>,
    #[arg(long, value_delimiter = ',', value_parser = parse_named::<AuxSource>, default_value = "random-label")]
    pub aux: Vec<AuxSource>,
    /// Power iterations.
    #[arg(long, default_value_t = 1)]
    pub iters: usize,
    #[arg(long, default_value_t = 500)]
    pub n_private: usize,
    /// Write the table as TSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorRow {
    pub aux: AuxSource,
    pub basis: BasisMode,
    pub k: usize,
    pub m: usize,
    pub mean: f64,
    pub std: f64,
}

fn basis_name(b: BasisMode) -> &'static str {
    match b {
        BasisMode::Power => "power",
        BasisMode::Random => "random",
    }
}

pub fn run(args: &ProjectErrorArgs, out: &mut dyn Write) -> Result<Vec<ErrorRow>> {
    if args.k.is_empty() || args.m.is_empty() || args.basis.is_empty() || args.aux.is_empty() || args.seeds == 0 {
        return Err(CliError::Config("--k, --m, --basis, --aux and --seeds must be non-empty".into()));
    }
    let (task, model) = match args.task {
        Task::Lowrank => (reference::lowrank_task(), reference::lowrank_model()),
        Task::Mlp => (
            reference::mlp_task(),
            reference::mlp_model().init_random(&RandomStream::new(args.seed, 0x1417))?,
        ),
    };
    let pairs: Vec<(usize, usize)> = args.k.iter().flat_map(|&k| args.m.iter().map(move |&m| (k, m))).collect();
    let seeds: Vec<u64> = (args.seed..args.seed + args.seeds).collect();
    let mut rows = Vec::new();
    for &aux in &args.aux {
        let points = projection_sweep(&task, &model, args.n_private, &pairs, &args.basis, args.iters, aux, &seeds)?;
        for &basis in &args.basis {
            for &(k, m) in &pairs {
                let errors: Vec<f64> = points
                    .iter()
                    .filter(|p: &&SweepPoint| p.k == k && p.m == m && p.basis == basis)
                    .map(|p| p.error)
                    .collect();
                let (mean, std) = mean_std(&errors);
                rows.push(ErrorRow { aux, basis, k, m, mean, std });
            }
        }
    }
    let table = render(&rows);
    emit(out, &table)?;
    if let Some(path) = &args.out {
        std::fs::write(path, &table).map_err(|e| CliError::io(path, e))?;
    }
    Ok(rows)
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn render(rows: &[ErrorRow]) -> String {
    let mut s = String::from("aux\tbasis\tk\tm\tmean\tstd\n");
    for r in rows {
        s.push_str(&format!(
            "{}\t{}\t{}\t{}\t{:.6}\t{:.6}\n",
            r.aux.name(),
            basis_name(r.basis),
            r.k,
            r.m,
            r.mean,
            r.std
        ));
    }
    s
}
