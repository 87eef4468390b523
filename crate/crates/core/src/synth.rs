//! Seeded synthetic datasets.
//!
//! * `LowRank`: augmented features `[x; 1]` lie in an exact `rank`-dimensional
//!   subspace, optionally plus a decaying isotropic tail. For linear and
//!   binary logistic models every per-sample gradient is a scalar multiple of
//!   the augmented feature vector, so gradients inherit the subspace.
//! * `GaussianMixture`: `classes` Gaussian clusters with uniform labels.
//! * `Separable`: binary labels split by a hyperplane through the origin with
//!   a guaranteed margin.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::linalg::{
    axpy, dot, gaussian_noise, gaussian_vector, norm, orthonormalize_rows, DenseMatrix,
    RandomStream, ORTHO_TOL,
};
use crate::models::Dataset;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelKind {
    /// Real-valued target `⟨θ*, x̃⟩ + noise`.
    #[default]
    Regression,
    /// `1[⟨θ*, x̃⟩ + noise > 0]`.
    Binary,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LowRankParams {
    pub n: usize,
    pub dim: usize,
    pub rank: usize,
    /// Standard deviation of the coordinates along the signal directions.
    #[serde(default = "one")]
    pub signal_scale: f64,
    /// Tail direction `i` (1-based) has standard deviation
    /// `tail_scale · i^(−tail_decay)`. Zero gives an exact low-rank task.
    #[serde(default)]
    pub tail_scale: f64,
    #[serde(default = "one")]
    pub tail_decay: f64,
    #[serde(default)]
    pub label: LabelKind,
    /// Share of the label direction placed in the tail (0: labels depend on
    /// the signal subspace only).
    #[serde(default)]
    pub label_tail_weight: f64,
    #[serde(default)]
    pub label_noise: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureParams {
    pub n: usize,
    pub dim: usize,
    pub classes: usize,
    /// Standard deviation of the cluster centres.
    #[serde(default = "one")]
    pub spread: f64,
    /// Within-cluster standard deviation.
    #[serde(default = "one")]
    pub noise: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeparableParams {
    pub n: usize,
    pub dim: usize,
    #[serde(default = "one")]
    pub margin: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SynthSpec {
    #[serde(rename = "lowrank-gradient-task")]
    LowRank(LowRankParams),
    GaussianMixture(MixtureParams),
    Separable(SeparableParams),
}

impl SynthSpec {
    pub fn n(&self) -> usize {
        match self {
            Self::LowRank(p) => p.n,
            Self::GaussianMixture(p) => p.n,
            Self::Separable(p) => p.n,
        }
    }

    pub fn with_n(mut self, n: usize) -> Self {
        match &mut self {
            Self::LowRank(p) => p.n = n,
            Self::GaussianMixture(p) => p.n = n,
            Self::Separable(p) => p.n = n,
        }
        self
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::LowRank(p) => p.dim,
            Self::GaussianMixture(p) => p.dim,
            Self::Separable(p) => p.dim,
        }
    }

    /// Number of classes, or 1 for regression targets.
    pub fn classes(&self) -> usize {
        match self {
            Self::LowRank(p) if p.label == LabelKind::Regression => 1,
            Self::LowRank(_) | Self::Separable(_) => 2,
            Self::GaussianMixture(p) => p.classes,
        }
    }
}

const STRUCTURE: u64 = 0;
const SAMPLES: u64 = 1;
const LABELS: u64 = 2;

pub fn synth_dataset(spec: &SynthSpec, stream: &RandomStream) -> Result<Dataset> {
    match spec {
        SynthSpec::LowRank(p) => lowrank(p, stream),
        SynthSpec::GaussianMixture(p) => mixture(p, stream),
        SynthSpec::Separable(p) => separable(p, stream),
    }
}

fn random_orthonormal(rows: usize, cols: usize, stream: &RandomStream) -> Result<DenseMatrix> {
    let (q, rank) = orthonormalize_rows(&gaussian_noise(rows, cols, 1.0, stream)?, ORTHO_TOL)?;
    if rank < rows {
        return Err(invalid("random basis came out rank deficient"));
    }
    Ok(q)
}

fn lowrank(p: &LowRankParams, stream: &RandomStream) -> Result<Dataset> {
    if p.rank == 0 || p.rank > p.dim + 1 || p.dim == 0 {
        return Err(invalid(format!("rank {} must lie in 1..={}", p.rank, p.dim + 1)));
    }
    if p.n == 0 || p.tail_scale < 0.0 || p.signal_scale < 0.0 || p.label_noise < 0.0 {
        return Err(invalid("lowrank task needs n >= 1 and non-negative scales"));
    }
    if !(0.0..=1.0).contains(&p.label_tail_weight) {
        return Err(invalid("label_tail_weight must lie in [0, 1]"));
    }
    let d = p.dim;
    let structure = stream.substream(STRUCTURE);
    // Rows 0..rank-1 span the varying signal directions, the rest the tail.
    let dirs = random_orthonormal(d, d, &structure.substream(0))?;
    let center = gaussian_vector(d, 1.0 / (d as f64).sqrt(), &structure.substream(1))?;
    let signal_dirs = p.rank - 1;
    let tail_dirs = d - signal_dirs;

    let mut x = DenseMatrix::zeros(p.n, d);
    let z = gaussian_noise(p.n, d, 1.0, &stream.substream(SAMPLES))?;
    for i in 0..p.n {
        let row = x.row_mut(i);
        row.copy_from_slice(&center);
        let zi = z.row(i);
        for j in 0..signal_dirs {
            axpy(p.signal_scale * zi[j], dirs.row(j), row);
        }
        if p.tail_scale > 0.0 {
            for t in 0..tail_dirs {
                let s = p.tail_scale * ((t + 1) as f64).powf(-p.tail_decay);
                axpy(s * zi[signal_dirs + t], dirs.row(signal_dirs + t), row);
            }
        }
    }

    // Label direction: random in the signal span, optionally mixed with the
    // leading tail directions (where the tail carries most variance). Each
    // part is scaled so its score has unit spread.
    let mix = gaussian_vector(d, 1.0, &structure.substream(2))?;
    let mut sig = vec![0.0; d];
    for j in 0..signal_dirs {
        axpy(mix[j], dirs.row(j), &mut sig);
    }
    let mut tail = vec![0.0; d];
    for t in 0..tail_dirs.min(8) {
        axpy(mix[signal_dirs + t], dirs.row(signal_dirs + t), &mut tail);
    }
    let mut theta = vec![0.0; d];
    let (sn, tn) = (norm(&sig), norm(&tail));
    if sn > 0.0 && p.signal_scale > 0.0 {
        axpy((1.0 - p.label_tail_weight).sqrt() / (sn * p.signal_scale), &sig, &mut theta);
    }
    if tn > 0.0 && p.tail_scale > 0.0 {
        axpy(p.label_tail_weight.sqrt() / (tn * p.tail_scale), &tail, &mut theta);
    }
    let offset = -dot(&theta, &center);
    let noise = gaussian_vector(p.n, p.label_noise, &stream.substream(LABELS))?;
    let labels = (0..p.n)
        .map(|i| {
            let score = dot(&theta, x.row(i)) + offset + noise[i];
            match p.label {
                LabelKind::Regression => score,
                LabelKind::Binary => f64::from(u8::from(score > 0.0)),
            }
        })
        .collect();
    Dataset::new(x, labels, "lowrank-gradient-task")
}

fn mixture(p: &MixtureParams, stream: &RandomStream) -> Result<Dataset> {
    if p.classes < 2 || p.n == 0 || p.dim == 0 || p.spread < 0.0 || p.noise < 0.0 {
        return Err(invalid("gaussian mixture needs >= 2 classes, n, dim >= 1, non-negative scales"));
    }
    let means = gaussian_noise(p.classes, p.dim, p.spread, &stream.substream(STRUCTURE))?;
    let mut rng = stream.substream(LABELS).rng();
    let labels: Vec<usize> = (0..p.n).map(|_| rng.random_range(0..p.classes)).collect();
    let mut x = gaussian_noise(p.n, p.dim, p.noise, &stream.substream(SAMPLES))?;
    for (i, &c) in labels.iter().enumerate() {
        for (v, m) in x.row_mut(i).iter_mut().zip(means.row(c)) {
            *v += m;
        }
    }
    Dataset::new(x, labels.into_iter().map(|c| c as f64).collect(), "gaussian-mixture")
}

fn separable(p: &SeparableParams, stream: &RandomStream) -> Result<Dataset> {
    if p.n == 0 || p.dim == 0 || !(p.margin >= 0.0) {
        return Err(invalid("separable task needs n, dim >= 1 and margin >= 0"));
    }
    let mut w = gaussian_vector(p.dim, 1.0, &stream.substream(STRUCTURE))?;
    let wn = norm(&w);
    w.iter_mut().for_each(|v| *v /= wn);
    let mut x = gaussian_noise(p.n, p.dim, 1.0, &stream.substream(SAMPLES))?;
    let mut labels = Vec::with_capacity(p.n);
    for i in 0..p.n {
        let row = x.row_mut(i);
        let s = dot(&w, row);
        let side = if s >= 0.0 { 1.0 } else { -1.0 };
        if s.abs() < p.margin {
            axpy(side * (p.margin - s.abs()), &w, row);
        }
        labels.push(if side > 0.0 { 1.0 } else { 0.0 });
    }
    Dataset::new(x, labels, "separable")
}

/// Uniform class labels (or standard normal targets when `classes == 1`).
pub fn random_labels(n: usize, classes: usize, stream: &RandomStream) -> Vec<f64> {
    if classes <= 1 {
        return gaussian_vector(n, 1.0, stream).expect("unit scale is valid");
    }
    let mut rng = stream.rng();
    (0..n).map(|_| rng.random_range(0..classes) as f64).collect()
}
