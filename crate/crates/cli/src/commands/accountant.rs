use std::io::Write;

use gep_core::accountant::{
    analytic_order, calibrate_sigma_closed_form, calibrate_sigma_search, default_orders, epsilon_spent, rdp_gaussian,
    DpBudget,
};
use gep_core::Error;

use super::emit;
use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Mode {
    /// `2·sqrt(2T·log(1/δ))/ε`, full batch only.
    Closed,
    /// Bisection over the RDP bound.
    Search,
}

#[derive(Debug, Clone, clap::Args)]
pub struct AccountantArgs {
    #[arg(long)]
    pub eps: f64,
    #[arg(long, default_value_t = 1e-5)]
    pub delta: f64,
    #[arg(long)]
    pub steps: usize,
    /// Poisson sampling rate.
    #[arg(long, default_value_t = 1.0)]
    pub q: f64,
    #[arg(long, value_enum, default_value_t = Mode::Search)]
    pub mode: Mode,
}

/// `sigma` is the multiplier of each of the two per-step releases (the
/// closed form's convention); `unit_sigma = sigma/√2` is the single
/// unit-sensitivity release of the same cost that the trainer uses.
#[derive(Debug, Clone, PartialEq)]
pub struct Certificate {
    pub sigma: f64,
    pub unit_sigma: f64,
    pub order: f64,
    pub epsilon: f64,
}

pub fn run(args: &AccountantArgs, out: &mut dyn Write) -> Result<Certificate> {
    let budget = DpBudget::new(args.eps, args.delta).map_err(|e| CliError::Config(e.to_string()))?;
    if args.steps == 0 {
        return Err(CliError::Config("--steps must be >= 1".into()));
    }
    if !(args.q > 0.0 && args.q <= 1.0) {
        return Err(CliError::Config(format!("--q must lie in (0, 1], got {}", args.q)));
    }
    let orders = default_orders(args.q, Some(&budget));
    let cert = match args.mode {
        Mode::Closed => {
            if args.q < 1.0 {
                return Err(CliError::Config(
                    "the closed form assumes full-batch steps (q = 1); use --mode search".into(),
                ));
            }
            let sigma = calibrate_sigma_closed_form(&budget, args.steps).map_err(|e| match e {
                Error::OutOfRegime { .. } => CliError::Config(format!("{e} (--mode search)")),
                other => other.into(),
            })?;
            // Two unit-sensitivity releases per step at multiplier σ.
            let order = analytic_order(&budget);
            let cost = 2.0 * args.steps as f64 * rdp_gaussian(order, 1.0, sigma);
            Certificate {
                sigma,
                unit_sigma: sigma / std::f64::consts::SQRT_2,
                order,
                epsilon: cost + budget.log_inv_delta() / (order - 1.0),
            }
        }
        Mode::Search => {
            let unit_sigma = calibrate_sigma_search(&budget, args.q, args.steps, &orders)?;
            let (epsilon, order) = epsilon_spent(unit_sigma, args.q, args.steps, args.delta, &orders)?;
            Certificate {
                sigma: unit_sigma * std::f64::consts::SQRT_2,
                unit_sigma,
                order,
                epsilon,
            }
        }
    };
    let (verify, _) = epsilon_spent(cert.unit_sigma, args.q, args.steps, args.delta, &orders)?;
    let ok = verify <= args.eps * (1.0 + 1e-9);
    let mode = match args.mode {
        Mode::Closed => "closed",
        Mode::Search => "search",
    };
    emit(
        out,
        &format!(
            "mode = {mode}\nsigma = {}\nunit_sigma = {}\norder = {}\nepsilon = {}\nverify: epsilon over {} orders = {verify} ({})\n",
            cert.sigma,
            cert.unit_sigma,
            cert.order,
            cert.epsilon,
            orders.len(),
            if ok { "within budget" } else { "OVER BUDGET" }
        ),
    )?;
    if !ok {
        return Err(CliError::Check(format!("recomputed epsilon {verify} exceeds {}", args.eps)));
    }
    Ok(cert)
}
