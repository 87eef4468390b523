//! Rényi-DP accounting for Gaussian releases.
//!
//! Costs are in nats. Curves are evaluated on a fixed grid of orders;
//! composition is pointwise addition and conversion to (ε, δ) takes the
//! minimum of `γ(λ) + log(1/δ)/(λ − 1)` over the grid.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Lower and upper edge of the noise-multiplier search bracket.
pub const SIGMA_BRACKET: (f64, f64) = (1e-2, 1e4);
/// Relative width at which bisection stops.
pub const SIGMA_REL_TOL: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpBudget {
    epsilon: f64,
    delta: f64,
}

impl DpBudget {
    pub fn new(epsilon: f64, delta: f64) -> Result<Self> {
        if !(epsilon > 0.0) || !epsilon.is_finite() {
            return Err(invalid(format!("epsilon must be positive and finite, got {epsilon}")));
        }
        if !(delta > 0.0 && delta < 1.0) {
            return Err(invalid(format!("delta must lie in (0, 1), got {delta}")));
        }
        Ok(Self { epsilon, delta })
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn log_inv_delta(&self) -> f64 {
        -self.delta.ln()
    }
}

/// RDP costs over an ascending grid of orders.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RdpCurve {
    orders: Vec<f64>,
    costs: Vec<f64>,
}

impl RdpCurve {
    pub fn new(orders: Vec<f64>, costs: Vec<f64>) -> Result<Self> {
        if orders.len() != costs.len() {
            return Err(invalid("orders and costs differ in length"));
        }
        if orders.iter().any(|&o| !(o > 1.0) || !o.is_finite()) {
            return Err(invalid("Renyi orders must be finite and > 1"));
        }
        if orders.windows(2).any(|w| w[0] >= w[1]) {
            return Err(invalid("Renyi orders must be strictly ascending"));
        }
        // +inf is allowed: it is the sentinel for a noiseless release.
        if costs.iter().any(|&c| !(c >= 0.0)) {
            return Err(invalid("RDP costs must be non-negative"));
        }
        Ok(Self { orders, costs })
    }

    pub fn zeros(orders: Vec<f64>) -> Result<Self> {
        let costs = vec![0.0; orders.len()];
        Self::new(orders, costs)
    }

    /// Evaluates `cost` at every order of `orders`.
    pub fn from_fn(orders: &[f64], mut cost: impl FnMut(f64) -> Result<f64>) -> Result<Self> {
        let costs = orders.iter().map(|&o| cost(o)).collect::<Result<Vec<_>>>()?;
        Self::new(orders.to_vec(), costs)
    }

    pub fn orders(&self) -> &[f64] {
        &self.orders
    }

    pub fn costs(&self) -> &[f64] {
        &self.costs
    }

    pub fn is_empty(&self) -> bool {
        self.orders.is_empty()
    }

    /// Cost of `times` independent repetitions.
    pub fn scaled(&self, times: f64) -> Self {
        Self {
            orders: self.orders.clone(),
            costs: self.costs.iter().map(|c| c * times).collect(),
        }
    }
}

/// Noise parameters of one (possibly subsampled) Gaussian release repeated
/// `steps` times.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MechanismSpec {
    pub sensitivity: f64,
    pub sigma: f64,
    pub sampling_rate: f64,
    pub steps: usize,
}

impl MechanismSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.sampling_rate) {
            return Err(invalid(format!("sampling rate {} outside [0, 1]", self.sampling_rate)));
        }
        if self.steps == 0 {
            return Err(invalid("mechanism must run at least one step"));
        }
        if !(self.sensitivity >= 0.0) || !(self.sigma >= 0.0) {
            return Err(invalid("sensitivity and sigma must be non-negative"));
        }
        Ok(())
    }

    /// Total RDP curve after `steps` invocations. `sigma` is the standard
    /// deviation of the added noise; the subsampled bound is applied to the
    /// noise multiplier `sigma / sensitivity`.
    pub fn curve(&self, orders: &[f64]) -> Result<RdpCurve> {
        self.validate()?;
        let per_step = if self.sampling_rate >= 1.0 {
            RdpCurve::from_fn(orders, |o| Ok(rdp_gaussian(o, self.sensitivity, self.sigma)))?
        } else if self.sensitivity == 0.0 || self.sampling_rate == 0.0 {
            RdpCurve::zeros(orders.to_vec())?
        } else {
            let multiplier = self.sigma / self.sensitivity;
            RdpCurve::from_fn(orders, |o| {
                rdp_subsampled_gaussian(o, self.sampling_rate, multiplier)
            })?
        };
        Ok(per_step.scaled(self.steps as f64))
    }
}

/// RDP of the Gaussian mechanism: `order · S² / (2σ²)`.
///
/// Returns `+inf` when `sigma = 0` and `S > 0`.
pub fn rdp_gaussian(order: f64, sensitivity: f64, sigma: f64) -> f64 {
    if sensitivity == 0.0 {
        return 0.0;
    }
    if sigma == 0.0 {
        return f64::INFINITY;
    }
    order * sensitivity * sensitivity / (2.0 * sigma * sigma)
}

/// Pointwise sum of curves sharing one order grid.
pub fn rdp_compose(curves: &[RdpCurve]) -> Result<RdpCurve> {
    let first = curves.first().ok_or_else(|| invalid("nothing to compose"))?;
    let mut costs = vec![0.0; first.orders.len()];
    for c in curves {
        if c.orders != first.orders {
            return Err(invalid("cannot compose RDP curves on different order grids"));
        }
        for (acc, v) in costs.iter_mut().zip(&c.costs) {
            *acc += v;
        }
    }
    RdpCurve::new(first.orders.clone(), costs)
}

/// Best (ε, order) from `γ(λ) + log(1/δ)/(λ − 1)` over the curve's grid.
pub fn rdp_to_dp(curve: &RdpCurve, delta: f64) -> Result<(f64, f64)> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(invalid(format!("delta must lie in (0, 1), got {delta}")));
    }
    if curve.is_empty() {
        return Err(invalid("empty RDP curve"));
    }
    let log_inv_delta = -delta.ln();
    let mut best = (f64::INFINITY, curve.orders[0]);
    for (&order, &cost) in curve.orders.iter().zip(&curve.costs) {
        let eps = cost + log_inv_delta / (order - 1.0);
        if eps < best.0 {
            best = (eps, order);
        }
    }
    Ok(best)
}

/// Upper bound on the RDP of the Poisson-subsampled Gaussian mechanism
/// with unit sensitivity at integer `order`:
///
/// `(1/(α−1)) · log Σ_{j=0}^{α} C(α,j) (1−q)^{α−j} q^j exp(j(j−1)/(2σ²))`
///
/// The binomial weights sum to one, so the sum equals
/// `1 + Σ_{j≥2} C(α,j) (1−q)^{α−j} q^j (exp(j(j−1)/(2σ²)) − 1)`; the excess
/// is accumulated in log space and added back with `log1p`, which avoids
/// both overflow at large orders and cancellation at small `q`.
pub fn rdp_subsampled_gaussian(order: f64, q: f64, sigma: f64) -> Result<f64> {
    if order.fract() != 0.0 || order < 2.0 || !order.is_finite() {
        return Err(Error::UnsupportedOrder(order));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(invalid(format!("sampling rate {q} outside [0, 1]")));
    }
    if !(sigma > 0.0) {
        return Err(invalid(format!("noise multiplier must be positive, got {sigma}")));
    }
    if q == 0.0 {
        return Ok(0.0);
    }
    let alpha = order as u64;
    let log_q = q.ln();
    let log_1mq = (-q).ln_1p();
    let inv_two_var = 1.0 / (2.0 * sigma * sigma);
    let mut log_binom = (alpha as f64).ln();
    let mut terms = Vec::with_capacity(alpha as usize);
    for j in 2..=alpha {
        log_binom += ((alpha - j + 1) as f64).ln() - (j as f64).ln();
        let jf = j as f64;
        let mut term = log_binom + jf * log_q + log_expm1(jf * (jf - 1.0) * inv_two_var);
        if alpha > j {
            term += (alpha - j) as f64 * log_1mq;
        }
        terms.push(term);
    }
    let log_excess = log_sum_exp(&terms);
    // log(1 + e^x) without overflow
    let total = log_excess.max(0.0) + (-log_excess.abs()).exp().ln_1p();
    Ok(total / (order - 1.0))
}

/// `log(e^x − 1)` for `x > 0`.
fn log_expm1(x: f64) -> f64 {
    if x > 30.0 {
        x + (-(-x).exp()).ln_1p()
    } else {
        x.exp_m1().ln()
    }
}

fn log_sum_exp(terms: &[f64]) -> f64 {
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
}

/// Order achieving the closed-form bound: `1 + 2·log(1/δ)/ε`.
pub fn analytic_order(budget: &DpBudget) -> f64 {
    1.0 + 2.0 * budget.log_inv_delta() / budget.epsilon()
}

/// Integer orders `2..=256`, plus the analytic order when there is no
/// subsampling.
pub fn default_orders(q: f64, budget: Option<&DpBudget>) -> Vec<f64> {
    let mut orders: Vec<f64> = (2..=256).map(f64::from).collect();
    if q >= 1.0 {
        if let Some(b) = budget {
            let extra = analytic_order(b);
            if extra.is_finite() && extra > 1.0 && !orders.contains(&extra) {
                orders.push(extra);
                orders.sort_by(f64::total_cmp);
            }
        }
    }
    orders
}

/// Noise multiplier `2·sqrt(2T·log(1/δ))/ε`.
///
/// This multiplier covers a per-step release of cost `λ/σ²`, i.e. two
/// unit-sensitivity Gaussian releases at multiplier σ each.
pub fn calibrate_sigma_closed_form(budget: &DpBudget, steps: usize) -> Result<f64> {
    if steps == 0 {
        return Err(invalid("steps must be >= 1"));
    }
    let limit = 2.0 * budget.log_inv_delta();
    if budget.epsilon() > limit {
        return Err(Error::OutOfRegime {
            epsilon: budget.epsilon(),
            limit,
        });
    }
    Ok(2.0 * (2.0 * steps as f64 * budget.log_inv_delta()).sqrt() / budget.epsilon())
}

/// ε after `steps` unit-sensitivity Gaussian releases at multiplier `sigma`,
/// each on a Poisson sample of rate `q`. Returns (ε, best order).
pub fn epsilon_spent(
    sigma: f64,
    q: f64,
    steps: usize,
    delta: f64,
    orders: &[f64],
) -> Result<(f64, f64)> {
    if steps == 0 {
        return Ok((0.0, orders.first().copied().unwrap_or(2.0)));
    }
    let spec = MechanismSpec {
        sensitivity: 1.0,
        sigma,
        sampling_rate: q,
        steps,
    };
    rdp_to_dp(&spec.curve(orders)?, delta)
}

/// Smallest multiplier σ in [`SIGMA_BRACKET`] (to relative tolerance
/// [`SIGMA_REL_TOL`]) such that `steps` unit-sensitivity Gaussian releases
/// on Poisson samples of rate `q` stay within `budget`.
pub fn calibrate_sigma_search(
    budget: &DpBudget,
    q: f64,
    steps: usize,
    orders: &[f64],
) -> Result<f64> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(invalid(format!("sampling rate must lie in (0, 1], got {q}")));
    }
    if orders.is_empty() {
        return Err(invalid("empty order grid"));
    }
    if steps == 0 {
        return Err(invalid("steps must be >= 1"));
    }
    let eps_at = |sigma: f64| epsilon_spent(sigma, q, steps, budget.delta(), orders).map(|r| r.0);
    let (mut lo, mut hi) = SIGMA_BRACKET;
    if eps_at(hi)? > budget.epsilon() {
        return Err(Error::Calibration(format!(
            "epsilon {} at delta {} is unreachable for {steps} steps at q = {q} even with sigma = {hi}",
            budget.epsilon(),
            budget.delta()
        )));
    }
    if eps_at(lo)? <= budget.epsilon() {
        return Ok(lo);
    }
    while hi / lo > 1.0 + SIGMA_REL_TOL {
        let mid = (lo * hi).sqrt();
        if eps_at(mid)? <= budget.epsilon() {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}
