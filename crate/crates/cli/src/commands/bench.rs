use std::io::Write;

use gep_core::linalg::{flops, gaussian_noise, RandomStream};
use gep_core::mechanism::{build_anchor_basis, GepConfig};
use gep_core::models::GroupLayout;

use super::emit;
use crate::error::{CliError, Result};

/// Accepted range of measured/model flop ratios.
pub const RATIO_RANGE: (f64, f64) = (0.9, 1.5);

#[derive(Debug, Clone, clap::Args)]
pub struct BenchArgs {
    /// Anchor gradients.
    #[arg(long, default_value_t = 100)]
    pub m: usize,
    /// Total basis size.
    #[arg(long, default_value_t = 20)]
    pub k: usize,
    /// Parameter count.
    #[arg(long, default_value_t = 1000)]
    pub p: usize,
    #[arg(long, value_delimiter = ',', default_values_t = vec![1usize, 2, 5])]
    pub groups: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchRow {
    pub groups: usize,
    pub measured: u64,
    pub model: f64,
    pub ratio: f64,
}

/// Leading-order multiply-adds of one power iteration over `g` groups.
pub fn cost_model(m: usize, k: usize, p: usize, g: usize) -> f64 {
    let (m, k, p, g) = (m as f64, k as f64, p as f64, g as f64);
    2.0 * m * k * p / g + p * k * k / (g * g)
}

pub fn run(args: &BenchArgs, out: &mut dyn Write) -> Result<Vec<BenchRow>> {
    if args.groups.is_empty() {
        return Err(CliError::Config("--groups is empty".into()));
    }
    let anchors = gaussian_noise(args.m, args.p, 1.0, &RandomStream::new(args.seed, 0))?;
    let cfg = GepConfig {
        k: args.k,
        m: args.m,
        power_iters: 1,
        ..GepConfig::default()
    };
    let mut rows = Vec::new();
    emit(out, "groups\tmeasured\tmodel\tratio\n")?;
    for &g in &args.groups {
        let layout = GroupLayout::even(args.p, g, args.k).map_err(|e| CliError::Config(e.to_string()))?;
        flops::reset();
        build_anchor_basis(&anchors, &layout, &cfg, &RandomStream::new(args.seed, 1))?;
        let measured = flops::count();
        let model = cost_model(args.m, args.k, args.p, g);
        let row = BenchRow {
            groups: g,
            measured,
            model,
            ratio: measured as f64 / model,
        };
        emit(out, &format!("{g}\t{measured}\t{model:.0}\t{:.3}\n", row.ratio))?;
        rows.push(row);
    }
    let bad: Vec<String> = rows
        .iter()
        .filter(|r| !(RATIO_RANGE.0..=RATIO_RANGE.1).contains(&r.ratio))
        .map(|r| format!("g={} ratio {:.3}", r.groups, r.ratio))
        .collect();
    if !bad.is_empty() {
        return Err(CliError::Check(format!(
            "flop ratio outside [{}, {}]: {}",
            RATIO_RANGE.0,
            RATIO_RANGE.1,
            bad.join(", ")
        )));
    }
    Ok(rows)
}
