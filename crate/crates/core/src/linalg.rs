//! Dense row-major kernels: subspace (power) iteration, Gram–Schmidt,
//! projection onto a row basis, per-row clipping, stable rank and seeded
//! Gaussian sampling.
//!
//! Every reduction runs sequentially in index order so results are
//! bit-reproducible. The multiply-add counter in [`flops`] is updated by the
//! kernels used in power iteration and orthonormalization.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{invalid, Error, Result};

/// Default tolerance for orthogonality and rank decisions.
pub const ORTHO_TOL: f64 = 1e-10;
/// Default relative tolerance of the spectral-norm power iteration.
pub const SPECTRAL_TOL: f64 = 1e-6;

const SPECTRAL_MAX_ITERS: usize = 20_000;

/// Multiply-add counters for the cost model.
///
/// Counts are thread-local, so concurrent tests do not interfere.
pub mod flops {
    use std::cell::Cell;

    thread_local! {
        static COUNT: Cell<u64> = const { Cell::new(0) };
    }

    pub fn reset() {
        COUNT.with(|c| c.set(0));
    }

    pub fn count() -> u64 {
        COUNT.with(|c| c.get())
    }

    pub(crate) fn add(n: usize) {
        COUNT.with(|c| c.set(c.get() + n as u64));
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    /// Builds a matrix from row-major data, rejecting length mismatches and
    /// non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(invalid(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(invalid(format!(
                "non-finite entry at ({}, {})",
                pos / cols.max(1),
                pos % cols.max(1)
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(invalid("ragged rows"));
        }
        let data = rows.iter().flatten().copied().collect();
        Self::new(rows.len(), cols, data)
    }

    /// Empty matrix with a fixed column count, ready for [`Self::push_row`].
    pub fn with_cols(cols: usize) -> Self {
        Self::zeros(0, cols)
    }

    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(rows * cols, data.len());
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0 || self.cols == 0
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> + '_ {
        (0..self.rows).map(move |i| self.row(i))
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn push_row(&mut self, row: &[f64]) -> Result<()> {
        if row.len() != self.cols {
            return Err(invalid(format!(
                "row of length {} pushed into matrix with {} columns",
                row.len(),
                self.cols
            )));
        }
        self.data.extend_from_slice(row);
        self.rows += 1;
        Ok(())
    }

    /// Rows selected by index, in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self::from_raw(indices.len(), self.cols, data)
    }

    /// Copy of columns `offset..offset + len`.
    pub fn column_block(&self, offset: usize, len: usize) -> Self {
        assert!(offset + len <= self.cols, "column block out of range");
        let mut data = Vec::with_capacity(self.rows * len);
        for r in self.row_iter() {
            data.extend_from_slice(&r[offset..offset + len]);
        }
        Self::from_raw(self.rows, len, data)
    }

    /// Writes `block` into columns starting at `offset`.
    pub fn set_column_block(&mut self, offset: usize, block: &DenseMatrix) {
        assert_eq!(block.rows, self.rows);
        assert!(offset + block.cols <= self.cols, "column block out of range");
        for i in 0..self.rows {
            let cols = block.cols;
            self.row_mut(i)[offset..offset + cols].copy_from_slice(block.row(i));
        }
    }

    pub fn frobenius_norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.frobenius_norm_sq().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// `self · otherᵀ`; both operands are stored by rows.
    pub fn mul_transpose(&self, other: &DenseMatrix) -> Result<Self> {
        if self.cols != other.cols {
            return Err(invalid(format!(
                "cannot multiply {}x{} by transpose of {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut data = Vec::with_capacity(self.rows * other.rows);
        for a in self.row_iter() {
            for b in other.row_iter() {
                data.push(dot(a, b));
            }
        }
        flops::add(self.rows * other.rows * self.cols);
        Ok(Self::from_raw(self.rows, other.rows, data))
    }

    /// `selfᵀ · other`, accumulated row by row of the shared dimension.
    pub fn transpose_mul(&self, other: &DenseMatrix) -> Result<Self> {
        if self.rows != other.rows {
            return Err(invalid(format!(
                "cannot multiply transpose of {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Self::zeros(self.cols, other.cols);
        for i in 0..self.rows {
            let a = self.row(i);
            let b = other.row(i);
            for (r, &coef) in a.iter().enumerate() {
                axpy(coef, b, out.row_mut(r));
            }
        }
        flops::add(self.rows * self.cols * other.cols);
        Ok(out)
    }

    /// `self · other` for a right operand stored by rows.
    pub fn matmul(&self, other: &DenseMatrix) -> Result<Self> {
        if self.cols != other.rows {
            return Err(invalid(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for (j, &coef) in self.row(i).iter().enumerate() {
                let src = other.row(j);
                axpy(coef, src, out.row_mut(i));
            }
        }
        Ok(out)
    }

    /// Sum of rows, accumulated in row order.
    pub fn row_sum(&self) -> Vec<f64> {
        let mut acc = vec![0.0; self.cols];
        for r in self.row_iter() {
            for (a, v) in acc.iter_mut().zip(r) {
                *a += v;
            }
        }
        acc
    }

    /// Mean of rows; sum in row order, then one division per coordinate.
    pub fn row_mean(&self) -> Vec<f64> {
        let n = self.rows as f64;
        self.row_sum().into_iter().map(|v| v / n).collect()
    }
}

/// Inner product with four interleaved partial sums combined in a fixed
/// order, so the result depends only on the inputs.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += alpha · x`
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Seed plus stream label. Each (seed, stream) pair names an independent,
/// reproducible sequence of draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RandomStream {
    seed: u64,
    stream: u64,
}

impl RandomStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        Self { seed, stream }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Child stream identified by `label`; distinct labels give distinct
    /// streams, and the derivation is a pure function of (stream, label).
    pub fn substream(&self, label: u64) -> Self {
        Self {
            seed: self.seed,
            stream: splitmix64(self.stream ^ splitmix64(label.wrapping_add(0x9e37_79b9))),
        }
    }

    pub fn rng(&self) -> ChaCha12Rng {
        let mut rng = ChaCha12Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// i.i.d. `N(0, sigma²)` entries. `sigma = 0` yields exact zeros.
pub fn gaussian_noise(
    rows: usize,
    cols: usize,
    sigma: f64,
    stream: &RandomStream,
) -> Result<DenseMatrix> {
    Ok(DenseMatrix::from_raw(
        rows,
        cols,
        gaussian_vector(rows * cols, sigma, stream)?,
    ))
}

pub fn gaussian_vector(len: usize, sigma: f64, stream: &RandomStream) -> Result<Vec<f64>> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(invalid(format!("noise scale must be finite and >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(vec![0.0; len]);
    }
    let mut rng = stream.rng();
    Ok((0..len)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            sigma * z
        })
        .collect())
}

/// Modified Gram–Schmidt with a second re-orthogonalization pass.
///
/// A row whose norm after elimination is at most `tol` times its original
/// norm is treated as dependent and dropped; the surviving count is the
/// effective rank.
pub fn orthonormalize_rows(m: &DenseMatrix, tol: f64) -> Result<(DenseMatrix, usize)> {
    if !(tol > 0.0) {
        return Err(invalid(format!("tolerance must be positive, got {tol}")));
    }
    if m.data.iter().any(|v| !v.is_finite()) {
        return Err(invalid("non-finite entry in matrix to orthonormalize"));
    }
    let p = m.cols;
    let mut basis = DenseMatrix::with_cols(p);
    let mut v = vec![0.0; p];
    for row in m.row_iter() {
        v.copy_from_slice(row);
        let original = norm(&v);
        flops::add(p);
        if original == 0.0 {
            continue;
        }
        for _pass in 0..2 {
            for q in basis.row_iter() {
                let c = dot(&v, q);
                axpy(-c, q, &mut v);
            }
            flops::add(2 * p * basis.rows);
        }
        let remaining = norm(&v);
        flops::add(2 * p);
        if remaining <= tol * original {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= remaining);
        basis.push_row(&v)?;
    }
    let rank = basis.rows;
    Ok((basis, rank))
}

/// Orthonormal rows produced by subspace iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerBasis {
    pub vectors: DenseMatrix,
    /// Requested dimension when it exceeded `min(m, p)` and was clamped.
    pub clamped_from: Option<usize>,
}

impl PowerBasis {
    pub fn k_effective(&self) -> usize {
        self.vectors.rows()
    }
}

/// Subspace iteration on `anchor`: starting from a Gaussian `k × p` block,
/// each round forms `A = anchor · Bᵀ`, then `B = Aᵀ · anchor`, then
/// re-orthonormalizes the rows of `B`.
pub fn power_iteration_basis(
    anchor: &DenseMatrix,
    k: usize,
    iterations: usize,
    stream: &RandomStream,
    tol: f64,
) -> Result<PowerBasis> {
    if k == 0 || iterations == 0 {
        return Err(invalid("power iteration needs k >= 1 and at least one iteration"));
    }
    let (m, p) = anchor.shape();
    let limit = m.min(p);
    let mut clamped_from = None;
    let mut k = k;
    if k > limit {
        log::warn!("requested {k} basis vectors but anchor matrix is {m}x{p}; clamping to {limit}");
        clamped_from = Some(k);
        k = limit;
    }
    if k == 0 || anchor.data.iter().all(|&v| v == 0.0) {
        return Ok(PowerBasis {
            vectors: DenseMatrix::with_cols(p),
            clamped_from,
        });
    }
    let mut basis = gaussian_noise(k, p, 1.0, stream)?;
    for _ in 0..iterations {
        let coords = anchor.mul_transpose(&basis)?;
        let expanded = coords.transpose_mul(anchor)?;
        basis = orthonormalize_rows(&expanded, tol)?.0;
        if basis.rows() == 0 {
            break;
        }
    }
    Ok(PowerBasis {
        vectors: basis,
        clamped_from,
    })
}

/// Splits `g` into embedding coordinates `W = G·Bᵀ` and residual
/// `R = G − W·B`, where `basis` holds orthonormal rows.
pub fn project_split(g: &DenseMatrix, basis: &DenseMatrix) -> Result<(DenseMatrix, DenseMatrix)> {
    if g.cols != basis.cols {
        return Err(invalid(format!(
            "gradient width {} does not match basis width {}",
            g.cols, basis.cols
        )));
    }
    let w = g.mul_transpose(basis)?;
    let mut r = g.clone();
    for i in 0..g.rows {
        let coords = w.row(i);
        let out = r.row_mut(i);
        for (c, b) in coords.iter().zip(basis.row_iter()) {
            axpy(-c, b, out);
        }
    }
    Ok((w, r))
}

/// Rescales every row to norm at most `threshold`.
pub fn clip_rows(m: &DenseMatrix, threshold: f64) -> Result<DenseMatrix> {
    clip_rows_counted(m, threshold).map(|(out, _)| out)
}

/// As [`clip_rows`], also returning how many rows were rescaled.
pub fn clip_rows_counted(m: &DenseMatrix, threshold: f64) -> Result<(DenseMatrix, usize)> {
    if !(threshold > 0.0) {
        return Err(invalid(format!("clipping threshold must be positive, got {threshold}")));
    }
    let mut out = m.clone();
    let mut clipped = 0;
    for i in 0..out.rows {
        let row = out.row_mut(i);
        let n = norm(row);
        if n > threshold {
            let scale = threshold / n;
            row.iter_mut().for_each(|v| *v *= scale);
            clipped += 1;
        }
    }
    Ok((out, clipped))
}

/// Gram matrix of the smaller side: `M·Mᵀ` when rows ≤ cols, else `Mᵀ·M`.
fn small_gram(m: &DenseMatrix) -> DenseMatrix {
    let (r, c) = m.shape();
    let mut gram;
    if r <= c {
        gram = DenseMatrix::zeros(r, r);
        for i in 0..r {
            for j in 0..=i {
                let v = dot(m.row(i), m.row(j));
                gram.set(i, j, v);
                gram.set(j, i, v);
            }
        }
    } else {
        gram = DenseMatrix::zeros(c, c);
        for row in m.row_iter() {
            for i in 0..c {
                let ri = row[i];
                if ri == 0.0 {
                    continue;
                }
                let dst = gram.row_mut(i);
                for j in 0..=i {
                    dst[j] += ri * row[j];
                }
            }
        }
        for i in 0..c {
            for j in 0..i {
                let v = gram.get(i, j);
                gram.set(j, i, v);
            }
        }
    }
    gram
}

/// Largest eigenvalue of the smaller Gram matrix, i.e. `‖M‖₂²`, by power
/// iteration with a Rayleigh-quotient stopping rule at relative tolerance
/// `tol`.
pub fn spectral_norm_sq(m: &DenseMatrix, tol: f64) -> Result<f64> {
    if m.is_empty() || m.data.iter().all(|&v| v == 0.0) {
        return Err(Error::Undefined("spectral norm of a zero matrix".into()));
    }
    let gram = small_gram(m);
    let s = gram.rows();
    let mut x = gaussian_vector(s, 1.0, &RandomStream::new(0x5eed_cafe, 0x5e))?;
    let nx = norm(&x);
    x.iter_mut().for_each(|v| *v /= nx);
    let mut y = vec![0.0; s];
    let mut estimate = 0.0_f64;
    for _ in 0..SPECTRAL_MAX_ITERS {
        for (i, yi) in y.iter_mut().enumerate() {
            *yi = dot(gram.row(i), &x);
        }
        let rayleigh = dot(&x, &y);
        let ny = norm(&y);
        if ny == 0.0 {
            break;
        }
        let converged = (rayleigh - estimate).abs() <= tol * rayleigh.abs();
        estimate = rayleigh;
        if converged {
            break;
        }
        for (xi, yi) in x.iter_mut().zip(&y) {
            *xi = yi / ny;
        }
    }
    Ok(estimate)
}

pub fn spectral_norm(m: &DenseMatrix) -> Result<f64> {
    spectral_norm_sq(m, SPECTRAL_TOL).map(f64::sqrt)
}

/// `‖M‖_F² / ‖M‖₂²`, clamped into `[1, min(rows, cols)]` to absorb the
/// iteration's tolerance.
pub fn stable_rank(m: &DenseMatrix) -> Result<f64> {
    let top = spectral_norm_sq(m, SPECTRAL_TOL * 1e-4)?;
    let ratio = m.frobenius_norm_sq() / top;
    Ok(ratio.clamp(1.0, m.rows.min(m.cols) as f64))
}
