//! Utility comparison of the private methods on convex problems.
//!
//! Every run trains from zero on a synthetic task and reports accuracy and
//! the excess objective `F(θ̄) − F(θ*)` of the averaged iterate, where
//! `F(θ) = L(θ) + (λ/2)‖θ‖²` is the empirical loss plus the optimizer's weight
//! decay and `θ*` is its minimizer found by damped Newton iterations.

use serde::{Deserialize, Serialize};

use crate::accountant::DpBudget;
use crate::error::{invalid, Result};
use crate::linalg::{dot, gaussian_noise, stable_rank, DenseMatrix, RandomStream};
use crate::mechanism::{build_anchor_basis, projection_error_rate, BasisMode, GepConfig};
use crate::models::{make_group_layout, Dataset, ModelKind, ModelSpec};
use crate::synth::{random_labels, synth_dataset, SynthSpec};
use crate::trainer::{calibrate, dp_train, Calibration, Method, TrainConfig};

const NEWTON_MAX_ITERS: usize = 100;
const NEWTON_GRAD_TOL: f64 = 1e-12;

/// In-place Cholesky solve of `a · x = b` for symmetric positive definite `a`.
fn cholesky_solve(mut a: DenseMatrix, b: &[f64]) -> Result<Vec<f64>> {
    let n = a.rows();
    for j in 0..n {
        let mut d = a.get(j, j);
        for k in 0..j {
            d -= a.get(j, k) * a.get(j, k);
        }
        if !(d > 0.0) {
            return Err(invalid("matrix is not positive definite"));
        }
        let d = d.sqrt();
        a.set(j, j, d);
        for i in j + 1..n {
            let mut s = a.get(i, j);
            for k in 0..j {
                s -= a.get(i, k) * a.get(j, k);
            }
            a.set(i, j, s / d);
        }
    }
    let mut y = b.to_vec();
    for i in 0..n {
        for k in 0..i {
            y[i] -= a.get(i, k) * y[k];
        }
        y[i] /= a.get(i, i);
    }
    for i in (0..n).rev() {
        for k in i + 1..n {
            y[i] -= a.get(k, i) * y[k];
        }
        y[i] /= a.get(i, i);
    }
    Ok(y)
}

/// Mean loss plus `(l2/2)‖θ‖²`.
pub fn objective(model: &ModelSpec, data: &Dataset, l2: f64) -> Result<f64> {
    let p = model.params();
    Ok(model.loss(data)? + 0.5 * l2 * dot(p, p))
}

/// Minimizer of [`objective`] for a linear or binary logistic model.
///
/// Linear regression is solved from its normal equations; binary logistic
/// regression by Newton steps with backtracking until the gradient norm
/// drops below 1e-12 (or stalls).
pub fn fit_optimum(model: &ModelSpec, data: &Dataset, l2: f64) -> Result<ModelSpec> {
    if !(l2 >= 0.0) {
        return Err(invalid(format!("l2 weight must be non-negative, got {l2}")));
    }
    let binary = model.kind() == ModelKind::Logistic && model.classes() == 2;
    if model.kind() != ModelKind::Linear && !binary {
        return Err(invalid("optimum solver supports linear and binary logistic models"));
    }
    let d = model.input_dim();
    let p = d + 1;
    let n = data.len() as f64;
    let augmented = |i: usize| -> Vec<f64> {
        let mut x = data.features.row(i).to_vec();
        x.push(1.0);
        x
    };
    let mut current = model.clone();
    for _ in 0..NEWTON_MAX_ITERS {
        let mut grad = current.per_sample_gradients(data)?.row_mean();
        for (g, w) in grad.iter_mut().zip(current.params()) {
            *g += l2 * w;
        }
        if crate::linalg::norm(&grad) < NEWTON_GRAD_TOL {
            break;
        }
        let mut hess = DenseMatrix::zeros(p, p);
        for i in 0..data.len() {
            let x = augmented(i);
            let weight = if binary {
                let z = dot(current.params(), &x);
                let s = 1.0 / (1.0 + (-z).exp());
                s * (1.0 - s)
            } else {
                1.0
            };
            for a in 0..p {
                let wa = weight * x[a] / n;
                if wa == 0.0 {
                    continue;
                }
                let row = hess.row_mut(a);
                for b in 0..=a {
                    row[b] += wa * x[b];
                }
            }
        }
        let scale = (0..p).map(|i| hess.get(i, i)).fold(0.0, f64::max);
        for a in 0..p {
            for b in 0..a {
                let v = hess.get(a, b);
                hess.set(b, a, v);
            }
            let v = hess.get(a, a);
            hess.set(a, a, v + l2 + 1e-12 * scale.max(1.0));
        }
        let step = cholesky_solve(hess, &grad)?;
        let before = objective(&current, data, l2)?;
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let cand: Vec<f64> = current
                .params()
                .iter()
                .zip(&step)
                .map(|(w, s)| w - t * s)
                .collect();
            let next = current.with_params(cand)?;
            if objective(&next, data, l2)? <= before {
                current = next;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted || !binary {
            break;
        }
    }
    Ok(current)
}

/// A grid of private runs on one synthetic task family.
#[derive(Debug, Clone)]
pub struct UtilityGrid {
    pub task: SynthSpec,
    pub n_private: usize,
    pub n_aux: usize,
    pub n_eval: usize,
    pub methods: Vec<Method>,
    pub epsilons: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Template for every run; method, budget, seed and σ are overwritten.
    pub base: TrainConfig,
    pub calibration: Calibration,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UtilityRow {
    pub method: Method,
    pub epsilon: f64,
    pub seed: u64,
    pub sigma: f64,
    pub final_accuracy: f64,
    /// Excess training objective of the averaged iterate.
    pub excess_loss: f64,
    /// Excess training objective of the last iterate.
    pub final_excess_loss: f64,
    /// Projection error rate of the initial private gradients under the
    /// first anchor basis (NaN for methods without a basis).
    pub projection_error: f64,
}

#[derive(Debug, Clone, Default)]
pub struct UtilityReport {
    pub rows: Vec<UtilityRow>,
}

impl UtilityReport {
    fn select(&self, method: Method, epsilon: f64) -> impl Iterator<Item = &UtilityRow> {
        self.rows
            .iter()
            .filter(move |r| r.method == method && r.epsilon == epsilon)
    }

    fn mean_of(&self, method: Method, epsilon: f64, f: impl Fn(&UtilityRow) -> f64) -> f64 {
        let vals: Vec<f64> = self.select(method, epsilon).map(f).collect();
        vals.iter().sum::<f64>() / vals.len() as f64
    }

    pub fn mean_accuracy(&self, method: Method, epsilon: f64) -> f64 {
        self.mean_of(method, epsilon, |r| r.final_accuracy)
    }

    pub fn mean_excess_loss(&self, method: Method, epsilon: f64) -> f64 {
        self.mean_of(method, epsilon, |r| r.excess_loss)
    }

    pub fn mean_projection_error(&self, method: Method, epsilon: f64) -> f64 {
        self.mean_of(method, epsilon, |r| r.projection_error)
    }
}

/// Private, auxiliary and evaluation splits of one seeded task draw.
pub fn task_splits(
    task: &SynthSpec,
    n_private: usize,
    n_aux: usize,
    n_eval: usize,
    seed: u64,
) -> Result<(Dataset, Dataset, Dataset)> {
    let total = n_private + n_aux + n_eval;
    let data = synth_dataset(&task.with_n(total), &RandomStream::new(seed, 0xda7a))?;
    let (private, rest) = data.split_at(n_private);
    let (aux, eval) = rest.split_at(n_aux);
    Ok((private, aux, eval))
}

fn initial_model(task: &SynthSpec) -> Result<ModelSpec> {
    match task.classes() {
        1 => Ok(ModelSpec::linear(task.dim())),
        c => ModelSpec::logistic(task.dim(), c),
    }
}

/// Trains every (method, ε, seed) combination of `grid`.
pub fn convex_utility_experiment(grid: &UtilityGrid) -> Result<UtilityReport> {
    let init = initial_model(&grid.task)?;
    let mut report = UtilityReport::default();
    for &seed in &grid.seeds {
        let (private, aux, eval) = task_splits(&grid.task, grid.n_private, grid.n_aux, grid.n_eval, seed)?;
        let l2 = grid.base.sgd.weight_decay;
        let optimum = fit_optimum(&init, &private, l2)?;
        let best = objective(&optimum, &private, l2)?;
        let mut probes: [Option<f64>; 2] = [None, None];
        for &epsilon in &grid.epsilons {
            for &method in &grid.methods {
                let mut cfg = grid.base.clone();
                cfg.method = method;
                cfg.seed = seed;
                cfg.budget = DpBudget::new(epsilon, grid.base.budget.delta())?;
                cfg.gep.sigma = calibrate(&cfg, grid.calibration)?;
                let out = dp_train(&cfg, &init, &private, &aux, &eval)?;
                let projection_error = if method.uses_basis() {
                    let slot = &mut probes[usize::from(method == Method::RandomBasisGep)];
                    match *slot {
                        Some(v) => v,
                        None => *slot.insert(first_step_projection_error(&cfg, &init, &private, &aux)?),
                    }
                } else {
                    f64::NAN
                };
                report.rows.push(UtilityRow {
                    method,
                    epsilon,
                    seed,
                    sigma: out.sigma,
                    final_accuracy: out.model.evaluate(&eval)?.accuracy,
                    excess_loss: objective(&out.averaged, &private, l2)? - best,
                    final_excess_loss: objective(&out.model, &private, l2)? - best,
                    projection_error,
                });
            }
        }
    }
    Ok(report)
}

fn first_step_projection_error(
    cfg: &TrainConfig,
    init: &ModelSpec,
    private: &Dataset,
    aux: &Dataset,
) -> Result<f64> {
    let mut probe = cfg.clone();
    probe.steps = 1;
    probe.gep.sigma = 0.0;
    let out = dp_train(&probe, init, private, aux, private)?;
    Ok(out.metrics[0].projection_error_rate)
}

/// Where anchor samples come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AuxSource {
    /// Held-out task samples with fresh uniform labels.
    #[default]
    RandomLabel,
    /// Held-out task samples with their own labels.
    CorrectLabel,
    /// Standard Gaussian features with uniform labels.
    Synthetic,
}

impl AuxSource {
    pub const ALL: [AuxSource; 3] = [Self::RandomLabel, Self::CorrectLabel, Self::Synthetic];

    pub fn name(&self) -> &'static str {
        match self {
            Self::RandomLabel => "random-label",
            Self::CorrectLabel => "correct-label",
            Self::Synthetic => "synthetic",
        }
    }
}

/// Per-sample gradients of the private split and of `m` anchor samples
/// drawn per `source`, both at `model`.
pub fn gradient_pair(
    model: &ModelSpec,
    private: &Dataset,
    aux: &Dataset,
    m: usize,
    source: AuxSource,
    stream: &RandomStream,
) -> Result<(DenseMatrix, DenseMatrix)> {
    let anchors = match source {
        AuxSource::Synthetic => {
            let x = gaussian_noise(m, private.dim(), 1.0, &stream.substream(1))?;
            Dataset::new(x, random_labels(m, model.classes(), stream), "synthetic-anchors")?
        }
        AuxSource::RandomLabel | AuxSource::CorrectLabel => {
            let m = m.min(aux.len());
            let held_out = aux.subset(&(0..m).collect::<Vec<_>>());
            if source == AuxSource::RandomLabel {
                held_out.with_labels(random_labels(m, model.classes(), stream))?
            } else {
                held_out
            }
        }
    };
    Ok((model.per_sample_gradients(private)?, model.per_sample_gradients(&anchors)?))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepPoint {
    pub k: usize,
    pub m: usize,
    pub basis: BasisMode,
    pub seed: u64,
    pub error: f64,
}

/// Projection error rate of the private gradients at `model` for every
/// `(k, m)` pair, seed and basis mode.
///
/// Each seed draws one task; the anchor gradients of a given `m` are the
/// first `m` auxiliary rows, so bases for growing `m` see nested anchor sets.
#[allow(clippy::too_many_arguments)]
pub fn projection_sweep(
    task: &SynthSpec,
    model: &ModelSpec,
    n_private: usize,
    pairs: &[(usize, usize)],
    modes: &[BasisMode],
    power_iters: usize,
    source: AuxSource,
    seeds: &[u64],
) -> Result<Vec<SweepPoint>> {
    let max_m = pairs.iter().map(|&(_, m)| m).max().unwrap_or(0);
    let mut out = Vec::with_capacity(pairs.len() * modes.len() * seeds.len());
    for &seed in seeds {
        let (private, aux, _) = task_splits(task, n_private, max_m, 0, seed)?;
        let stream = RandomStream::new(seed, 0xba5e);
        let (g, all_anchors) = gradient_pair(model, &private, &aux, max_m, source, &stream.substream(0))?;
        for &(k, m) in pairs {
            let anchors = all_anchors.select_rows(&(0..m).collect::<Vec<_>>());
            for &basis in modes {
                let cfg = GepConfig { k, m, power_iters, basis, ..GepConfig::default() };
                let layout = make_group_layout(model, k, m)?;
                let sub = stream.substream(1 + k as u64 * 1_000_003 + m as u64);
                let b = build_anchor_basis(&anchors, &layout, &cfg, &sub)?;
                out.push(SweepPoint { k, m, basis, seed, error: projection_error_rate(&g, &b)? });
            }
        }
    }
    Ok(out)
}

/// Mean error over seeds at one sweep point.
pub fn sweep_mean(points: &[SweepPoint], k: usize, m: usize, basis: BasisMode) -> f64 {
    let sel: Vec<f64> = points
        .iter()
        .filter(|p| p.k == k && p.m == m && p.basis == basis)
        .map(|p| p.error)
        .collect();
    sel.iter().sum::<f64>() / sel.len() as f64
}

/// Stable ranks of the private gradient matrix and of its residual after
/// projecting onto a power basis of size `k` built from `m` anchors.
pub fn residual_stable_ranks(
    model: &ModelSpec,
    private: &Dataset,
    aux: &Dataset,
    k: usize,
    m: usize,
    stream: &RandomStream,
) -> Result<(f64, f64)> {
    let (g, anchors) = gradient_pair(model, private, aux, m, AuxSource::RandomLabel, &stream.substream(0))?;
    let cfg = GepConfig { k, m, ..GepConfig::default() };
    let layout = make_group_layout(model, k, anchors.rows())?;
    let b = build_anchor_basis(&anchors, &layout, &cfg, &stream.substream(1))?;
    let (_, r) = b.split(&g)?;
    Ok((stable_rank(&g)?, stable_rank(&r)?))
}

/// Reference tasks and configurations shared by tests, benchmarks and the CLI.
pub mod reference {
    use super::UtilityGrid;
    use crate::accountant::DpBudget;
    use crate::models::ModelSpec;
    use crate::synth::{LabelKind, LowRankParams, MixtureParams, SynthSpec};
    use crate::trainer::{Calibration, Method, TrainConfig};

    /// Approximately low-rank regression task: 4 signal directions plus a
    /// decaying tail, p = 200 with the bias.
    pub fn lowrank_task() -> SynthSpec {
        SynthSpec::LowRank(LowRankParams {
            n: 500,
            dim: 199,
            rank: 5,
            signal_scale: 1.0,
            tail_scale: 0.5,
            tail_decay: 1.0,
            label: LabelKind::Regression,
            label_tail_weight: 0.0,
            label_noise: 0.1,
        })
    }

    pub fn lowrank_model() -> ModelSpec {
        ModelSpec::linear(199)
    }

    /// Three well separated Gaussian clusters in 20 dimensions.
    pub fn mlp_task() -> SynthSpec {
        SynthSpec::GaussianMixture(MixtureParams {
            n: 500,
            dim: 20,
            classes: 3,
            spread: 3.0,
            noise: 1.0,
        })
    }

    /// Uninitialized one-hidden-layer MLP for [`mlp_task`] (p = 771).
    pub fn mlp_model() -> ModelSpec {
        ModelSpec::mlp(20, &[32], 3).expect("valid shape")
    }

    fn convex_task(rank: usize, label_tail_weight: f64, label_noise: f64) -> SynthSpec {
        SynthSpec::LowRank(LowRankParams {
            n: 2000,
            dim: 399,
            rank,
            signal_scale: 1.0,
            tail_scale: 0.15,
            tail_decay: 0.0,
            label: LabelKind::Binary,
            label_tail_weight,
            label_noise,
        })
    }

    /// Binary task whose features carry a large label-free tail.
    pub fn convex_nuisance_task() -> SynthSpec {
        convex_task(2, 0.0, 0.1)
    }

    /// Binary task whose label depends on directions outside the anchor
    /// subspace.
    pub fn convex_residual_task() -> SynthSpec {
        convex_task(10, 0.5, 1.0)
    }

    /// Full-batch logistic regression run shared by the convex comparisons.
    pub fn convex_config(clip_residual: f64) -> TrainConfig {
        let mut cfg = TrainConfig::new(Method::Gep, DpBudget::new(8.0, 1e-5).expect("valid budget"), 100);
        cfg.gep.k = 20;
        cfg.gep.m = 200;
        cfg.gep.clip_embedding = 5.0;
        cfg.gep.clip_residual = clip_residual;
        cfg.gp_clip = 5.0;
        cfg.sgd.lr = 0.5;
        cfg.sgd.weight_decay = 0.02;
        cfg.lr_decay = false;
        cfg
    }

    pub fn convex_grid(task: SynthSpec, clip_residual: f64, methods: Vec<Method>, epsilons: Vec<f64>, seeds: Vec<u64>) -> UtilityGrid {
        UtilityGrid {
            task,
            n_private: 2000,
            n_aux: 200,
            n_eval: 2000,
            methods,
            epsilons,
            seeds,
            base: convex_config(clip_residual),
            calibration: Calibration::Search,
        }
    }
}
