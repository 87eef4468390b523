//! Small models with hand-written per-sample gradients: least-squares linear
//! regression, logistic / softmax regression and a tanh MLP. Parameters are
//! one flat vector; [`ModelSpec::blocks`] describes its natural layer
//! blocks.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::linalg::{gaussian_vector, DenseMatrix, RandomStream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Linear,
    Logistic,
    Mlp,
}

/// Architecture plus flat parameters.
///
/// `output_dim` is 1 for linear regression and for binary (sigmoid)
/// logistic regression, and the number of classes for softmax models.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    kind: ModelKind,
    input_dim: usize,
    output_dim: usize,
    hidden: Vec<usize>,
    params: Vec<f64>,
}

/// Contiguous parameter block: one layer's weights followed by its bias.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: DenseMatrix,
    pub labels: Vec<f64>,
    pub name: String,
}

impl Dataset {
    pub fn new(features: DenseMatrix, labels: Vec<f64>, name: impl Into<String>) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(invalid(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if labels.iter().any(|l| !l.is_finite()) {
            return Err(invalid("non-finite label"));
        }
        Ok(Self {
            features,
            labels,
            name: name.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            features: self.features.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            name: self.name.clone(),
        }
    }

    /// First `n` rows and the rest.
    pub fn split_at(&self, n: usize) -> (Self, Self) {
        let n = n.min(self.len());
        let head: Vec<usize> = (0..n).collect();
        let tail: Vec<usize> = (n..self.len()).collect();
        (self.subset(&head), self.subset(&tail))
    }

    pub fn with_labels(&self, labels: Vec<f64>) -> Result<Self> {
        Self::new(self.features.clone(), labels, self.name.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    /// NaN for regression, where accuracy does not apply.
    pub accuracy: f64,
}

impl ModelSpec {
    pub fn linear(input_dim: usize) -> Self {
        Self::build(ModelKind::Linear, input_dim, 1, Vec::new())
    }

    /// `classes == 2` gives a single-logit sigmoid model; more classes give
    /// softmax regression.
    pub fn logistic(input_dim: usize, classes: usize) -> Result<Self> {
        if classes < 2 {
            return Err(invalid("logistic regression needs at least two classes"));
        }
        let out = if classes == 2 { 1 } else { classes };
        Ok(Self::build(ModelKind::Logistic, input_dim, out, Vec::new()))
    }

    /// tanh MLP with one or more hidden layers and a softmax output.
    pub fn mlp(input_dim: usize, hidden: &[usize], classes: usize) -> Result<Self> {
        if hidden.is_empty() || hidden.contains(&0) {
            return Err(invalid("mlp needs at least one non-empty hidden layer"));
        }
        if classes < 2 {
            return Err(invalid("mlp classifier needs at least two classes"));
        }
        Ok(Self::build(ModelKind::Mlp, input_dim, classes, hidden.to_vec()))
    }

    fn build(kind: ModelKind, input_dim: usize, output_dim: usize, hidden: Vec<usize>) -> Self {
        let mut spec = Self {
            kind,
            input_dim,
            output_dim,
            hidden,
            params: Vec::new(),
        };
        spec.params = vec![0.0; spec.layer_shapes().iter().map(|(o, i)| o * (i + 1)).sum()];
        spec
    }

    /// Gaussian weights scaled by `1/sqrt(fan_in)`, zero biases.
    pub fn init_random(mut self, stream: &RandomStream) -> Result<Self> {
        let shapes = self.layer_shapes();
        let mut offset = 0;
        for (l, (out, inp)) in shapes.into_iter().enumerate() {
            let w = gaussian_vector(out * inp, 1.0 / (inp as f64).sqrt(), &stream.substream(l as u64))?;
            self.params[offset..offset + out * inp].copy_from_slice(&w);
            offset += out * (inp + 1);
        }
        Ok(self)
    }

    pub fn with_params(&self, params: Vec<f64>) -> Result<Self> {
        if params.len() != self.params.len() {
            return Err(invalid(format!(
                "expected {} parameters, got {}",
                self.params.len(),
                params.len()
            )));
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(invalid("non-finite parameter"));
        }
        Ok(Self {
            params,
            ..self.clone()
        })
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden(&self) -> &[usize] {
        &self.hidden
    }

    /// Number of classes for classifiers, 1 for regression.
    pub fn classes(&self) -> usize {
        match (self.kind, self.output_dim) {
            (ModelKind::Linear, _) => 1,
            (_, 1) => 2,
            (_, c) => c,
        }
    }

    pub fn is_classifier(&self) -> bool {
        self.kind != ModelKind::Linear
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// (out, in) of every affine layer; each layer also carries `out` biases.
    fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut shapes = Vec::new();
        let mut inp = self.input_dim;
        for &h in &self.hidden {
            shapes.push((h, inp));
            inp = h;
        }
        shapes.push((self.output_dim, inp));
        shapes
    }

    pub fn blocks(&self) -> Vec<Block> {
        let mut offset = 0;
        self.layer_shapes()
            .into_iter()
            .enumerate()
            .map(|(l, (out, inp))| {
                let len = out * (inp + 1);
                let block = Block {
                    name: format!("layer{l}"),
                    offset,
                    len,
                };
                offset += len;
                block
            })
            .collect()
    }

    fn check_data(&self, data: &Dataset) -> Result<()> {
        if data.dim() != self.input_dim {
            return Err(invalid(format!(
                "model expects {} features, data has {}",
                self.input_dim,
                data.dim()
            )));
        }
        if self.is_classifier() {
            let c = self.classes() as f64;
            if let Some(bad) = data
                .labels
                .iter()
                .find(|&&l| l < 0.0 || l >= c || l.fract() != 0.0)
            {
                return Err(invalid(format!("label {bad} is not a class index below {c}")));
            }
        }
        Ok(())
    }

    /// Loss of one sample and its gradient written into `grad`.
    fn sample_loss_grad(&self, x: &[f64], y: f64, grad: Option<&mut [f64]>) -> (f64, usize) {
        match self.kind {
            ModelKind::Linear | ModelKind::Logistic => self.affine_loss_grad(x, y, grad),
            ModelKind::Mlp => self.mlp_loss_grad(x, y, grad),
        }
    }

    fn affine_loss_grad(&self, x: &[f64], y: f64, grad: Option<&mut [f64]>) -> (f64, usize) {
        let d = self.input_dim;
        let logits: Vec<f64> = self
            .params
            .chunks_exact(d + 1)
            .map(|w| affine(w, x))
            .collect();
        let (loss, delta, pred) = output_loss(self.kind, &logits, y);
        if let Some(g) = grad {
            for (gw, dc) in g.chunks_exact_mut(d + 1).zip(&delta) {
                for (gj, xj) in gw[..d].iter_mut().zip(x) {
                    *gj = dc * xj;
                }
                gw[d] = *dc;
            }
        }
        (loss, pred)
    }

    fn mlp_loss_grad(&self, x: &[f64], y: f64, grad: Option<&mut [f64]>) -> (f64, usize) {
        let shapes = self.layer_shapes();
        let mut activations: Vec<Vec<f64>> = vec![x.to_vec()];
        let mut offset = 0;
        let mut offsets = Vec::with_capacity(shapes.len());
        for (l, &(out, inp)) in shapes.iter().enumerate() {
            offsets.push(offset);
            let w = &self.params[offset..offset + out * inp];
            let b = &self.params[offset + out * inp..offset + out * (inp + 1)];
            let h = &activations[l];
            let mut a: Vec<f64> = (0..out)
                .map(|o| {
                    let row = &w[o * inp..(o + 1) * inp];
                    row.iter().zip(h).map(|(wi, hi)| wi * hi).sum::<f64>() + b[o]
                })
                .collect();
            if l + 1 < shapes.len() {
                a.iter_mut().for_each(|v| *v = v.tanh());
            }
            activations.push(a);
            offset += out * (inp + 1);
        }
        let logits = activations.last().expect("output layer");
        let (loss, mut delta, pred) = output_loss(ModelKind::Mlp, logits, y);
        if let Some(g) = grad {
            for l in (0..shapes.len()).rev() {
                let (out, inp) = shapes[l];
                let off = offsets[l];
                let h = &activations[l];
                for o in 0..out {
                    let gw = &mut g[off + o * inp..off + (o + 1) * inp];
                    for (gi, hi) in gw.iter_mut().zip(h) {
                        *gi = delta[o] * hi;
                    }
                    g[off + out * inp + o] = delta[o];
                }
                if l > 0 {
                    let w = &self.params[off..off + out * inp];
                    let mut back = vec![0.0; inp];
                    for o in 0..out {
                        let row = &w[o * inp..(o + 1) * inp];
                        for (bi, wi) in back.iter_mut().zip(row) {
                            *bi += delta[o] * wi;
                        }
                    }
                    for (bi, hi) in back.iter_mut().zip(h) {
                        *bi *= 1.0 - hi * hi;
                    }
                    delta = back;
                }
            }
        }
        (loss, pred)
    }

    /// Per-sample loss gradients, one row per sample.
    pub fn per_sample_gradients(&self, batch: &Dataset) -> Result<DenseMatrix> {
        if batch.is_empty() {
            return Err(invalid("empty batch"));
        }
        self.check_data(batch)?;
        let p = self.num_params();
        let mut out = DenseMatrix::zeros(batch.len(), p);
        for i in 0..batch.len() {
            self.sample_loss_grad(batch.features.row(i), batch.labels[i], Some(out.row_mut(i)));
        }
        Ok(out)
    }

    /// Mean loss and, for classifiers, argmax accuracy.
    pub fn evaluate(&self, data: &Dataset) -> Result<Evaluation> {
        if data.is_empty() {
            return Err(invalid("cannot evaluate on empty data"));
        }
        self.check_data(data)?;
        let mut total = 0.0;
        let mut correct = 0usize;
        for i in 0..data.len() {
            let (loss, pred) = self.sample_loss_grad(data.features.row(i), data.labels[i], None);
            total += loss;
            if self.is_classifier() && pred == data.labels[i] as usize {
                correct += 1;
            }
        }
        let n = data.len() as f64;
        Ok(Evaluation {
            loss: total / n,
            accuracy: if self.is_classifier() {
                correct as f64 / n
            } else {
                f64::NAN
            },
        })
    }

    pub fn loss(&self, data: &Dataset) -> Result<f64> {
        self.evaluate(data).map(|e| e.loss)
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        self.sample_loss_grad(x, 0.0, None).1
    }
}

fn affine(w: &[f64], x: &[f64]) -> f64 {
    let d = x.len();
    w[..d].iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + w[d]
}

/// Loss, d loss / d logits, predicted class.
fn output_loss(kind: ModelKind, logits: &[f64], y: f64) -> (f64, Vec<f64>, usize) {
    match (kind, logits.len()) {
        (ModelKind::Linear, _) => {
            let r = logits[0] - y;
            (0.5 * r * r, vec![r], 0)
        }
        (_, 1) => {
            let z = logits[0];
            // log(1 + e^z) - y z, evaluated without overflow
            let softplus = z.max(0.0) + (-z.abs()).exp().ln_1p();
            let prob = 1.0 / (1.0 + (-z).exp());
            (softplus - y * z, vec![prob - y], usize::from(z > 0.0))
        }
        _ => {
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = logits.iter().map(|z| (z - max).exp()).sum();
            let lse = max + sum.ln();
            let label = y as usize;
            let delta = logits
                .iter()
                .enumerate()
                .map(|(c, z)| (z - lse).exp() - if c == label { 1.0 } else { 0.0 })
                .collect();
            let pred = logits
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (c, &z)| if z > best.1 { (c, z) } else { best })
                .0;
            (lse - logits[label], delta, pred)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Group {
    pub name: String,
    pub offset: usize,
    pub len: usize,
    pub k: usize,
}

/// Partition of the flat parameter vector into groups, each with its own
/// basis size.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupLayout {
    pub groups: Vec<Group>,
}

impl GroupLayout {
    pub fn single(p: usize, k: usize) -> Self {
        Self {
            groups: vec![Group {
                name: "all".into(),
                offset: 0,
                len: p,
                k,
            }],
        }
    }

    /// `g` contiguous groups of (nearly) equal size sharing `k` evenly.
    pub fn even(p: usize, g: usize, k: usize) -> Result<Self> {
        if g == 0 || g > p || k < g {
            return Err(invalid(format!("cannot split p={p}, k={k} into {g} groups")));
        }
        let mut groups = Vec::with_capacity(g);
        let mut offset = 0;
        for i in 0..g {
            let len = p / g + usize::from(i < p % g);
            let kg = k / g + usize::from(i < k % g);
            groups.push(Group {
                name: format!("group{i}"),
                offset,
                len,
                k: kg,
            });
            offset += len;
        }
        Ok(Self { groups })
    }

    pub fn total_k(&self) -> usize {
        self.groups.iter().map(|g| g.k).sum()
    }

    pub fn num_params(&self) -> usize {
        self.groups.iter().map(|g| g.len).sum()
    }
}

/// Splits `k` basis vectors over the model's layer blocks in proportion to
/// `sqrt(block length)` by largest remainder, keeping every block at >= 1
/// and at most `min(m, length)` vectors.
pub fn make_group_layout(model: &ModelSpec, k: usize, m: usize) -> Result<GroupLayout> {
    let blocks = model.blocks();
    if k < blocks.len() {
        return Err(invalid(format!(
            "k = {k} is smaller than the number of parameter groups ({})",
            blocks.len()
        )));
    }
    let lens: Vec<usize> = blocks.iter().map(|b| b.len).collect();
    let alloc = allocate_sqrt(&lens, k, m);
    Ok(GroupLayout {
        groups: blocks
            .into_iter()
            .zip(alloc)
            .map(|(b, k)| Group {
                name: b.name,
                offset: b.offset,
                len: b.len,
                k,
            })
            .collect(),
    })
}

pub(crate) fn allocate_sqrt(lens: &[usize], k: usize, m: usize) -> Vec<usize> {
    let weights: Vec<f64> = lens.iter().map(|&l| (l as f64).sqrt()).collect();
    let total: f64 = weights.iter().sum();
    let quotas: Vec<f64> = weights.iter().map(|w| k as f64 * w / total).collect();
    let mut alloc: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut order: Vec<usize> = (0..lens.len()).collect();
    // Largest remainder first; ties broken by block order.
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let mut left = k - alloc.iter().sum::<usize>();
    for &i in order.iter().cycle().take(left) {
        alloc[i] += 1;
        left -= 1;
    }
    debug_assert_eq!(left, 0);
    // Lift empty groups by taking from the largest allocation.
    while let Some(z) = alloc.iter().position(|&a| a == 0) {
        let donor = (0..alloc.len())
            .max_by(|&a, &b| alloc[a].cmp(&alloc[b]).then(b.cmp(&a)))
            .expect("non-empty");
        if alloc[donor] <= 1 {
            break;
        }
        alloc[donor] -= 1;
        alloc[z] += 1;
    }
    // Clamp to capacity and hand the surplus to groups with headroom.
    let caps: Vec<usize> = lens.iter().map(|&l| l.min(m).max(1)).collect();
    let mut surplus = 0;
    for (a, &c) in alloc.iter_mut().zip(&caps) {
        if *a > c {
            surplus += *a - c;
            *a = c;
        }
    }
    for &i in order.iter().cycle().take(lens.len() * (surplus + 1)) {
        if surplus == 0 {
            break;
        }
        if alloc[i] < caps[i] {
            alloc[i] += 1;
            surplus -= 1;
        }
    }
    alloc
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn toy(rows: &[Vec<f64>], labels: Vec<f64>) -> Dataset {
        Dataset::new(DenseMatrix::from_rows(rows).unwrap(), labels, "toy").unwrap()
    }

    #[test]
    fn linear_gradient_at_origin() {
        let model = ModelSpec::linear(3);
        let data = toy(&[vec![1.0, -2.0, 0.5]], vec![3.0]);
        let g = model.per_sample_gradients(&data).unwrap();
        assert_eq!(g.row(0), &[-3.0, 6.0, -1.5, -3.0]);
    }

    #[test]
    fn duplicated_sample_gives_identical_rows() {
        let model = ModelSpec::mlp(2, &[3], 3)
            .unwrap()
            .init_random(&RandomStream::new(1, 0))
            .unwrap();
        let data = toy(&[vec![0.3, -0.1], vec![0.3, -0.1]], vec![2.0, 2.0]);
        let g = model.per_sample_gradients(&data).unwrap();
        assert_eq!(g.row(0), g.row(1));
    }

    #[test]
    fn dimension_and_label_checks() {
        let model = ModelSpec::logistic(2, 3).unwrap();
        assert!(model.per_sample_gradients(&toy(&[vec![1.0]], vec![0.0])).is_err());
        assert!(model.per_sample_gradients(&toy(&[vec![1.0, 2.0]], vec![3.0])).is_err());
        assert!(model.per_sample_gradients(&toy(&[vec![1.0, 2.0]], vec![0.5])).is_err());
        let empty = Dataset::new(DenseMatrix::with_cols(2), vec![], "e").unwrap();
        assert!(model.per_sample_gradients(&empty).is_err());
        assert!(model.evaluate(&empty).is_err());
    }

    #[test]
    fn binary_logistic_at_origin_has_log2_loss() {
        let model = ModelSpec::logistic(2, 2).unwrap();
        let data = toy(&[vec![1.0, 2.0], vec![-1.0, 0.5]], vec![0.0, 1.0]);
        let eval = model.evaluate(&data).unwrap();
        assert_relative_eq!(eval.loss, 2f64.ln(), epsilon = 1e-15);
        let softmax = ModelSpec::logistic(2, 3).unwrap();
        let data3 = toy(&[vec![1.0, 2.0]], vec![2.0]);
        assert_relative_eq!(softmax.loss(&data3).unwrap(), 3f64.ln(), epsilon = 1e-15);
    }

    #[test]
    fn linear_accuracy_is_not_applicable() {
        let model = ModelSpec::linear(1);
        let eval = model.evaluate(&toy(&[vec![1.0]], vec![1.0])).unwrap();
        assert!(eval.accuracy.is_nan());
        assert_relative_eq!(eval.loss, 0.5);
    }

    #[test]
    fn fitted_logistic_separates_toy_set() {
        let model = ModelSpec::logistic(1, 2).unwrap().with_params(vec![5.0, 0.0]).unwrap();
        let data = toy(&[vec![-2.0], vec![-1.0], vec![1.0], vec![3.0]], vec![0.0, 0.0, 1.0, 1.0]);
        assert_eq!(model.evaluate(&data).unwrap().accuracy, 1.0);
    }

    #[test]
    fn layout_examples() {
        let single = ModelSpec::logistic(9, 2).unwrap();
        let l = make_group_layout(&single, 7, 100).unwrap();
        assert_eq!(l.groups.len(), 1);
        assert_eq!(l.groups[0].k, 7);

        assert_eq!(allocate_sqrt(&[400, 100], 3, 1000), vec![2, 1]);

        let mlp = ModelSpec::mlp(10, &[16, 8], 4).unwrap();
        let l = make_group_layout(&mlp, 30, 1000).unwrap();
        assert_eq!(l.groups.len(), 3);
        assert_eq!(l.total_k(), 30);
        assert_eq!(l.num_params(), mlp.num_params());
        assert!(l.groups.iter().all(|g| g.k >= 1));

        assert!(make_group_layout(&mlp, 2, 1000).is_err());
    }

    #[test]
    fn layout_clamps_to_anchor_count_and_group_size() {
        // group sizes 3 and 1000, k = 20: the small group caps at 3
        let alloc = allocate_sqrt(&[3, 1000], 20, 1000);
        assert_eq!(alloc.iter().sum::<usize>(), 20);
        assert!(alloc[0] <= 3);
        // m caps every group
        let alloc = allocate_sqrt(&[500, 500], 20, 4);
        assert_eq!(alloc, vec![4, 4]);
    }

    #[test]
    fn even_layout() {
        let l = GroupLayout::even(1000, 2, 20).unwrap();
        assert_eq!(l.groups[0].len, 500);
        assert_eq!(l.groups[1].offset, 500);
        assert_eq!(l.total_k(), 20);
        assert!(GroupLayout::even(10, 3, 2).is_err());
    }
}
