//! Private training loop.
//!
//! Each step draws a batch, estimates the anchor subspace from auxiliary
//! gradients, releases a private gradient estimate and applies SGD with
//! momentum. Only the released estimate reaches the optimizer.

use serde::{Deserialize, Serialize};

use crate::accountant::{
    calibrate_sigma_closed_form, calibrate_sigma_search, default_orders, rdp_to_dp, DpBudget,
    MechanismSpec, RdpCurve,
};
use crate::error::{invalid, Error, Result};
use crate::linalg::{norm, stable_rank, RandomStream};
use crate::mechanism::{
    bgep_release, build_anchor_basis, gep_release, gp_release_counted, AnchorBasis, BasisMode,
    GepConfig,
};
use crate::models::{make_group_layout, Dataset, ModelSpec};
use crate::synth::random_labels;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Gep,
    Bgep,
    Gp,
    RandomBasisGep,
    /// Plain gradient descent on the exact mean gradient; no privacy.
    NonPrivate,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Gep => "gep",
            Self::Bgep => "bgep",
            Self::Gp => "gp",
            Self::RandomBasisGep => "random-basis-gep",
            Self::NonPrivate => "non-private",
        }
    }

    /// Whether the method projects onto an anchor or random basis.
    pub fn uses_basis(&self) -> bool {
        matches!(self, Self::Gep | Self::Bgep | Self::RandomBasisGep)
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "lowercase")]
pub enum BatchRule {
    Full,
    /// Each private sample joins the batch independently with probability `rate`.
    Poisson { rate: f64 },
}

impl BatchRule {
    pub fn sampling_rate(&self) -> f64 {
        match self {
            Self::Full => 1.0,
            Self::Poisson { rate } => *rate,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AuxLabelMode {
    /// Fresh uniform labels for the anchor samples at every rebuild.
    #[default]
    RandomEachStep,
    /// Use the auxiliary dataset's own labels.
    Fixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdParams {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdParams {
    fn default() -> Self {
        Self {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub method: Method,
    pub gep: GepConfig,
    /// Clipping threshold of plain gradient perturbation.
    pub gp_clip: f64,
    pub budget: DpBudget,
    pub steps: usize,
    pub batch: BatchRule,
    pub sgd: SgdParams,
    /// Divide the learning rate by 10 from step `steps / 2` on.
    pub lr_decay: bool,
    pub seed: u64,
    pub aux_labels: AuxLabelMode,
    /// Rebuild the anchor basis every this many steps.
    pub rebuild_every: usize,
    /// Compute the stable ranks of G and R every this many steps (0: never).
    pub diagnostics_every: usize,
}

impl TrainConfig {
    pub fn new(method: Method, budget: DpBudget, steps: usize) -> Self {
        Self {
            method,
            gep: GepConfig::default(),
            gp_clip: 10.0,
            budget,
            steps,
            batch: BatchRule::Full,
            sgd: SgdParams::default(),
            lr_decay: true,
            seed: 0,
            aux_labels: AuxLabelMode::RandomEachStep,
            rebuild_every: 1,
            diagnostics_every: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.gep.validate()?;
        let SgdParams { lr, momentum, weight_decay } = self.sgd;
        if !(lr > 0.0) || !lr.is_finite() {
            return Err(invalid(format!("learning rate must be positive, got {lr}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(invalid(format!("momentum must lie in [0, 1), got {momentum}")));
        }
        if !(weight_decay >= 0.0) {
            return Err(invalid("weight decay must be non-negative"));
        }
        if !(self.gp_clip > 0.0) {
            return Err(invalid("gp clipping threshold must be positive"));
        }
        if self.rebuild_every == 0 {
            return Err(invalid("rebuild_every must be >= 1"));
        }
        let q = self.batch.sampling_rate();
        if !(q > 0.0 && q <= 1.0) {
            return Err(invalid(format!("sampling rate must lie in (0, 1], got {q}")));
        }
        Ok(())
    }

    fn orders(&self) -> Vec<f64> {
        default_orders(self.batch.sampling_rate(), Some(&self.budget))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Calibration {
    /// Bisection over the RDP bound of the subsampled mechanism.
    Search,
    /// `2·sqrt(2T·log(1/δ))/ε`, full batch only.
    ClosedForm,
}

/// Noise multiplier for `cfg`'s budget, steps and sampling rate.
///
/// The closed form covers a per-step cost of `λ/σ²` (two releases at
/// multiplier σ); the equivalent single unit-sensitivity release has
/// multiplier `σ/√2`, which is what is returned.
pub fn calibrate(cfg: &TrainConfig, mode: Calibration) -> Result<f64> {
    if cfg.method == Method::NonPrivate {
        return Ok(0.0);
    }
    let q = cfg.batch.sampling_rate();
    match mode {
        Calibration::Search => calibrate_sigma_search(&cfg.budget, q, cfg.steps, &cfg.orders()),
        Calibration::ClosedForm => {
            if q < 1.0 {
                return Err(Error::Calibration(
                    "closed-form calibration assumes full-batch steps; use search".into(),
                ));
            }
            Ok(calibrate_sigma_closed_form(&cfg.budget, cfg.steps)? / std::f64::consts::SQRT_2)
        }
    }
}

/// ε spent after `steps` releases at multiplier `sigma` (∞ for a noiseless
/// or non-private run).
pub struct PrivacyLedger {
    per_step: Option<RdpCurve>,
    delta: f64,
}

impl PrivacyLedger {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        let per_step = if cfg.method == Method::NonPrivate || cfg.gep.sigma == 0.0 {
            None
        } else {
            Some(
                MechanismSpec {
                    sensitivity: 1.0,
                    sigma: cfg.gep.sigma,
                    sampling_rate: cfg.batch.sampling_rate(),
                    steps: 1,
                }
                .curve(&cfg.orders())?,
            )
        };
        Ok(Self {
            per_step,
            delta: cfg.budget.delta(),
        })
    }

    pub fn epsilon_after(&self, steps: usize) -> Result<f64> {
        if steps == 0 {
            return Ok(0.0);
        }
        match &self.per_step {
            None => Ok(f64::INFINITY),
            Some(c) => rdp_to_dp(&c.scaled(steps as f64), self.delta).map(|r| r.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub batch_size: usize,
    pub train_loss: f64,
    pub eval_loss: f64,
    pub eval_accuracy: f64,
    pub projection_error_rate: f64,
    pub stable_rank_g: f64,
    pub stable_rank_r: f64,
    pub k_effective: usize,
    pub clip_fraction_embedding: f64,
    pub clip_fraction_residual: f64,
    pub epsilon_spent: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ModelSpec,
    /// Mean of the iterates θ_1..θ_T (the initial model when T = 0).
    pub averaged: ModelSpec,
    pub metrics: Vec<StepMetrics>,
    pub sigma: f64,
}

/// One SGD-with-momentum update:
/// `d = v + wd·θ; u ← μ·u + d; θ ← θ − η·u`.
pub fn optimizer_step(
    params: &mut [f64],
    velocity: &mut [f64],
    grad: &[f64],
    sgd: &SgdParams,
) -> Result<()> {
    if params.len() != velocity.len() || params.len() != grad.len() {
        return Err(invalid("optimizer state and gradient differ in length"));
    }
    for ((theta, u), g) in params.iter_mut().zip(velocity.iter_mut()).zip(grad) {
        let d = g + sgd.weight_decay * *theta;
        *u = sgd.momentum * *u + d;
        *theta -= sgd.lr * *u;
    }
    if params.iter().chain(velocity.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Divergence {
            step: 0,
            detail: format!(
                "non-finite update; |grad| = {:e}, lr = {}, momentum = {}",
                norm(grad),
                sgd.lr,
                sgd.momentum
            ),
        });
    }
    Ok(())
}

// Purpose labels for per-step random substreams.
const BATCH: u64 = 0;
const AUX_LABELS: u64 = 1;
const BASIS: u64 = 2;
const RELEASE: u64 = 3;

fn step_stream(seed: u64, step: usize, purpose: u64) -> RandomStream {
    RandomStream::new(seed, ((step as u64) << 8) | purpose)
}

fn poisson_batch(n: usize, rate: f64, stream: &RandomStream) -> Vec<usize> {
    use rand::Rng;
    let mut rng = stream.rng();
    (0..n).filter(|_| rng.random::<f64>() < rate).collect()
}

/// Runs `cfg.steps` private updates starting from `init`.
///
/// `cfg.gep.sigma` must already be calibrated (see [`calibrate`]). The first
/// `cfg.gep.m` rows of `auxiliary` provide the anchor gradients.
pub fn dp_train(
    cfg: &TrainConfig,
    init: &ModelSpec,
    private: &Dataset,
    auxiliary: &Dataset,
    eval: &Dataset,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if private.is_empty() {
        return Err(invalid("private dataset is empty"));
    }
    if cfg.method.uses_basis() && cfg.gep.basis == BasisMode::Power && auxiliary.is_empty() {
        return Err(invalid("anchor subspace needs auxiliary data"));
    }
    let ledger = PrivacyLedger::new(cfg)?;
    let mut model = init.clone();
    let p = model.num_params();
    let mut velocity = vec![0.0; p];
    let mut avg = vec![0.0; p];
    let mut metrics = Vec::with_capacity(cfg.steps);

    let m = cfg.gep.m.min(auxiliary.len());
    let anchors = auxiliary.subset(&(0..m).collect::<Vec<_>>());
    let mut gep_cfg = cfg.gep;
    if cfg.method == Method::RandomBasisGep {
        gep_cfg.basis = BasisMode::Random;
    }
    let mut basis: Option<AnchorBasis> = None;
    let all: Vec<usize> = (0..private.len()).collect();

    for step in 0..cfg.steps {
        let mut sgd = cfg.sgd;
        if cfg.lr_decay && step >= cfg.steps / 2 {
            sgd.lr /= 10.0;
        }
        let batch_idx = match cfg.batch {
            BatchRule::Full => all.clone(),
            BatchRule::Poisson { rate } => poisson_batch(private.len(), rate, &step_stream(cfg.seed, step, BATCH)),
        };

        if cfg.method.uses_basis() && step % cfg.rebuild_every == 0 {
            let layout = make_group_layout(&model, gep_cfg.k, m.max(1))?;
            let anchor_grads = if gep_cfg.basis == BasisMode::Power {
                let labelled = match cfg.aux_labels {
                    AuxLabelMode::Fixed => anchors.clone(),
                    AuxLabelMode::RandomEachStep => anchors.with_labels(random_labels(
                        m,
                        model.classes(),
                        &step_stream(cfg.seed, step, AUX_LABELS),
                    ))?,
                };
                model.per_sample_gradients(&labelled)?
            } else {
                crate::linalg::DenseMatrix::with_cols(p)
            };
            basis = Some(build_anchor_basis(
                &anchor_grads,
                &layout,
                &gep_cfg,
                &step_stream(cfg.seed, step, BASIS),
            )?);
        }

        let mut record = StepMetrics {
            step,
            batch_size: batch_idx.len(),
            train_loss: f64::NAN,
            eval_loss: f64::NAN,
            eval_accuracy: f64::NAN,
            projection_error_rate: f64::NAN,
            stable_rank_g: f64::NAN,
            stable_rank_r: f64::NAN,
            k_effective: basis.as_ref().map_or(0, AnchorBasis::k_effective),
            clip_fraction_embedding: f64::NAN,
            clip_fraction_residual: f64::NAN,
            epsilon_spent: ledger.epsilon_after(step + 1)?,
        };

        if !batch_idx.is_empty() {
            let batch = if batch_idx.len() == private.len() {
                private.clone()
            } else {
                private.subset(&batch_idx)
            };
            let g = model.per_sample_gradients(&batch)?;
            let release_stream = step_stream(cfg.seed, step, RELEASE);
            let update = match cfg.method {
                Method::NonPrivate => g.row_mean(),
                Method::Gp => {
                    let (v, frac) = gp_release_counted(&g, cfg.gp_clip, gep_cfg.sigma, &release_stream)?;
                    record.clip_fraction_embedding = frac;
                    v
                }
                Method::Gep | Method::Bgep | Method::RandomBasisGep => {
                    let b = basis.as_ref().expect("basis built on first step");
                    let rel = if cfg.method == Method::Bgep {
                        bgep_release(&g, b, &gep_cfg, &release_stream)?
                    } else {
                        gep_release(&g, b, &gep_cfg, &release_stream)?
                    };
                    record.projection_error_rate = rel.projection_error_rate;
                    record.clip_fraction_embedding = rel.clip_fractions.0;
                    record.clip_fraction_residual = rel.clip_fractions.1;
                    rel.v_tilde
                }
            };
            if cfg.diagnostics_every > 0 && step % cfg.diagnostics_every == 0 {
                record.stable_rank_g = stable_rank(&g).unwrap_or(f64::NAN);
                if let Some(b) = &basis {
                    let (_, r) = b.split(&g)?;
                    record.stable_rank_r = stable_rank(&r).unwrap_or(f64::NAN);
                }
            }
            optimizer_step(model.params_mut(), &mut velocity, &update, &sgd).map_err(|e| match e {
                Error::Divergence { detail, .. } => Error::Divergence { step, detail },
                other => other,
            })?;
        }
        for (a, t) in avg.iter_mut().zip(model.params()) {
            *a += t;
        }
        record.train_loss = model.loss(private)?;
        if !eval.is_empty() {
            let e = model.evaluate(eval)?;
            record.eval_loss = e.loss;
            record.eval_accuracy = e.accuracy;
        }
        metrics.push(record);
    }

    let averaged = if cfg.steps == 0 {
        init.clone()
    } else {
        let t = cfg.steps as f64;
        model.with_params(avg.into_iter().map(|a| a / t).collect())?
    };
    Ok(TrainOutcome {
        model,
        averaged,
        metrics,
        sigma: gep_cfg.sigma,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::DenseMatrix;

    fn budget() -> DpBudget {
        DpBudget::new(8.0, 1e-5).unwrap()
    }

    #[test]
    fn optimizer_plain_step() {
        let mut theta = vec![1.0, -2.0];
        let mut vel = vec![0.0; 2];
        let sgd = SgdParams { lr: 0.5, momentum: 0.0, weight_decay: 0.0 };
        optimizer_step(&mut theta, &mut vel, &[2.0, 2.0], &sgd).unwrap();
        assert_eq!(theta, vec![0.0, -3.0]);
    }

    #[test]
    fn optimizer_velocity_decays_geometrically() {
        let mut theta = vec![0.0; 3];
        let mut vel = vec![1.0, 2.0, -4.0];
        let sgd = SgdParams { lr: 0.1, momentum: 0.5, weight_decay: 0.0 };
        for _ in 0..3 {
            optimizer_step(&mut theta, &mut vel, &[0.0; 3], &sgd).unwrap();
        }
        assert_eq!(vel, vec![0.125, 0.25, -0.5]);
    }

    #[test]
    fn optimizer_two_momentum_steps_match_recurrence() {
        let sgd = SgdParams { lr: 0.1, momentum: 0.9, weight_decay: 0.01 };
        let g1 = [1.0, -1.0, 0.5];
        let g2 = [0.2, 0.4, -0.6];
        let mut theta = vec![1.0, 2.0, 3.0];
        let mut vel = vec![0.0; 3];
        optimizer_step(&mut theta, &mut vel, &g1, &sgd).unwrap();
        optimizer_step(&mut theta, &mut vel, &g2, &sgd).unwrap();
        let t0 = [1.0, 2.0, 3.0];
        for i in 0..3 {
            let u1 = g1[i] + 0.01 * t0[i];
            let t1 = t0[i] - 0.1 * u1;
            let u2 = 0.9 * u1 + g2[i] + 0.01 * t1;
            let t2 = t1 - 0.1 * u2;
            assert_eq!(vel[i], u2);
            assert_eq!(theta[i], t2);
        }
    }

    #[test]
    fn optimizer_reports_divergence() {
        let mut theta = vec![1.0];
        let mut vel = vec![0.0];
        let err = optimizer_step(&mut theta, &mut vel, &[f64::INFINITY], &SgdParams::default());
        assert!(matches!(err, Err(Error::Divergence { .. })));
    }

    fn toy_data() -> Dataset {
        let x = DenseMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]).unwrap();
        Dataset::new(x, vec![1.0, 2.0, 3.0], "toy").unwrap()
    }

    #[test]
    fn zero_steps_returns_initial_model() {
        let cfg = TrainConfig::new(Method::Gp, budget(), 0);
        let model = ModelSpec::linear(2);
        let out = dp_train(&cfg, &model, &toy_data(), &toy_data(), &toy_data()).unwrap();
        assert_eq!(out.model, model);
        assert!(out.metrics.is_empty());
    }

    #[test]
    fn epsilon_spent_is_monotone_and_within_budget() {
        let mut cfg = TrainConfig::new(Method::Gep, budget(), 20);
        cfg.gep.k = 2;
        cfg.gep.m = 3;
        cfg.sgd.lr = 0.05;
        cfg.gep.sigma = calibrate(&cfg, Calibration::Search).unwrap();
        let out = dp_train(&cfg, &ModelSpec::linear(2), &toy_data(), &toy_data(), &toy_data()).unwrap();
        let eps: Vec<f64> = out.metrics.iter().map(|m| m.epsilon_spent).collect();
        assert!(eps.windows(2).all(|w| w[0] <= w[1]));
        assert!(*eps.last().unwrap() <= 8.0);
    }

    #[test]
    fn closed_form_calibration_requires_full_batch() {
        let mut cfg = TrainConfig::new(Method::Gep, budget(), 10);
        let closed = calibrate(&cfg, Calibration::ClosedForm).unwrap();
        let searched = calibrate(&cfg, Calibration::Search).unwrap();
        assert!(searched <= closed);
        cfg.batch = BatchRule::Poisson { rate: 0.1 };
        assert!(calibrate(&cfg, Calibration::ClosedForm).is_err());
    }

    #[test]
    fn empty_poisson_batch_skips_update() {
        let mut cfg = TrainConfig::new(Method::Gp, budget(), 5);
        cfg.batch = BatchRule::Poisson { rate: 1e-9 };
        cfg.gep.sigma = 1.0;
        let model = ModelSpec::linear(2);
        let out = dp_train(&cfg, &model, &toy_data(), &toy_data(), &toy_data()).unwrap();
        assert_eq!(out.model, model);
        assert!(out.metrics.iter().all(|m| m.batch_size == 0));
        assert!(out.metrics[4].epsilon_spent > out.metrics[0].epsilon_spent);
    }

    #[test]
    fn invalid_config_rejected() {
        let mut cfg = TrainConfig::new(Method::Gp, budget(), 1);
        cfg.sgd.momentum = 1.0;
        assert!(cfg.validate().is_err());
        cfg.sgd.momentum = 0.9;
        cfg.gep.sigma = -1.0;
        assert!(cfg.validate().is_err());
    }
}
