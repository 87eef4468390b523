//! Gradient embedding perturbation.
//!
//! A release proceeds in three stages:
//!
//! 1. an orthonormal basis per parameter group is estimated from anchor
//!    gradients (non-sensitive data) by subspace iteration;
//! 2. private per-sample gradients are split into embeddings `W = G·Bᵀ` and
//!    residuals `R = G − W·B`, and each is clipped row-wise (`S1`, `S2`);
//! 3. the summed embedding and summed residual are perturbed with Gaussian
//!    noise and recombined as `ṽ = (w̃ᵀB + r̃)/n`.
//!
//! `sigma` in [`GepConfig`] is the noise multiplier of a unit-sensitivity
//! Gaussian release, which is what the accountant calibrates. GEP releases
//! two blocks whose normalized concatenation has sensitivity √2, so each
//! block receives standard deviation `sigma·√2` times its own threshold.
//! The biased variant (B-GEP) and plain gradient perturbation (GP) release a
//! single block at `sigma` times their threshold.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg::{
    axpy, clip_rows_counted, gaussian_noise, gaussian_vector, norm, orthonormalize_rows,
    power_iteration_basis, project_split, DenseMatrix, RandomStream, ORTHO_TOL,
};
use crate::models::GroupLayout;

const EMBEDDING_NOISE: u64 = 1;
const RESIDUAL_NOISE: u64 = 2;
const JOINT_NOISE: u64 = 3;
const GP_NOISE: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReleaseMode {
    /// Two independent Gaussian releases, one per block.
    Separate,
    /// One release of the normalized concatenation `[w/S1; r/S2]`.
    #[default]
    Joint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BasisMode {
    #[default]
    Power,
    /// Orthonormalized Gaussian directions, independent of the anchors.
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GepConfig {
    pub k: usize,
    pub m: usize,
    pub power_iters: usize,
    pub clip_embedding: f64,
    pub clip_residual: f64,
    pub release: ReleaseMode,
    pub basis: BasisMode,
    pub sigma: f64,
}

impl Default for GepConfig {
    fn default() -> Self {
        Self {
            k: 20,
            m: 200,
            power_iters: 1,
            clip_embedding: 10.0,
            clip_residual: 2.0,
            release: ReleaseMode::Joint,
            basis: BasisMode::Power,
            sigma: 0.0,
        }
    }
}

impl GepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.m == 0 || self.power_iters == 0 {
            return Err(invalid("k, m and power_iters must all be >= 1"));
        }
        if !(self.clip_embedding > 0.0) || !(self.clip_residual > 0.0) {
            return Err(invalid("clipping thresholds must be positive"));
        }
        check_sigma(self.sigma)
    }
}

fn check_sigma(sigma: f64) -> Result<()> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(invalid(format!("noise multiplier must be calibrated (finite, >= 0), got {sigma}")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupBasis {
    pub offset: usize,
    pub len: usize,
    /// Orthonormal rows over the group's `len` coordinates.
    pub vectors: DenseMatrix,
}

/// Block-diagonal orthonormal basis: each group's rows act only on that
/// group's slice of the parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorBasis {
    p: usize,
    groups: Vec<GroupBasis>,
}

impl AnchorBasis {
    pub fn empty(p: usize) -> Self {
        Self {
            p,
            groups: vec![GroupBasis {
                offset: 0,
                len: p,
                vectors: DenseMatrix::with_cols(p),
            }],
        }
    }

    /// Single-group basis from orthonormal rows.
    pub fn from_rows(vectors: DenseMatrix) -> Self {
        let p = vectors.cols();
        Self {
            p,
            groups: vec![GroupBasis {
                offset: 0,
                len: p,
                vectors,
            }],
        }
    }

    pub fn dim(&self) -> usize {
        self.p
    }

    pub fn groups(&self) -> &[GroupBasis] {
        &self.groups
    }

    pub fn k_effective(&self) -> usize {
        self.groups.iter().map(|g| g.vectors.rows()).sum()
    }

    /// Rows embedded in the full `p` coordinates (zero outside their group).
    pub fn to_dense(&self) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(self.k_effective(), self.p);
        let mut r = 0;
        for g in &self.groups {
            for row in g.vectors.row_iter() {
                out.row_mut(r)[g.offset..g.offset + g.len].copy_from_slice(row);
                r += 1;
            }
        }
        out
    }

    /// Embeddings `W` (n × k') and residuals `R = G − W·B` (n × p).
    pub fn split(&self, g: &DenseMatrix) -> Result<(DenseMatrix, DenseMatrix)> {
        if g.cols() != self.p {
            return Err(invalid(format!(
                "gradient width {} does not match basis width {}",
                g.cols(),
                self.p
            )));
        }
        if let [single] = self.groups.as_slice() {
            return project_split(g, &single.vectors);
        }
        let n = g.rows();
        let mut w = DenseMatrix::zeros(n, self.k_effective());
        let mut r = g.clone();
        let mut col = 0;
        for grp in &self.groups {
            let block = g.column_block(grp.offset, grp.len);
            let (wg, rg) = project_split(&block, &grp.vectors)?;
            w.set_column_block(col, &wg);
            r.set_column_block(grp.offset, &rg);
            col += wg.cols();
        }
        Ok((w, r))
    }

    /// `coordsᵀ · B` as a length-p vector.
    pub fn reconstruct(&self, coords: &[f64]) -> Result<Vec<f64>> {
        if coords.len() != self.k_effective() {
            return Err(invalid(format!(
                "{} embedding coordinates for a basis of {} vectors",
                coords.len(),
                self.k_effective()
            )));
        }
        let mut out = vec![0.0; self.p];
        let mut idx = 0;
        for grp in &self.groups {
            let dst = &mut out[grp.offset..grp.offset + grp.len];
            for row in grp.vectors.row_iter() {
                axpy(coords[idx], row, dst);
                idx += 1;
            }
        }
        Ok(out)
    }
}

/// Per-group basis from anchor gradients (or random directions when
/// `cfg.basis` is [`BasisMode::Random`]). The anchor matrix is only read.
pub fn build_anchor_basis(
    anchor_grads: &DenseMatrix,
    layout: &GroupLayout,
    cfg: &GepConfig,
    stream: &RandomStream,
) -> Result<AnchorBasis> {
    let p = layout.num_params();
    if anchor_grads.cols() != p {
        return Err(invalid(format!(
            "anchor gradients have {} columns, layout covers {p}",
            anchor_grads.cols()
        )));
    }
    let max_k = layout.groups.iter().map(|g| g.k).max().unwrap_or(0);
    if cfg.basis == BasisMode::Power && anchor_grads.rows() < max_k {
        log::warn!(
            "only {} anchor gradients for a group basis of size {max_k}",
            anchor_grads.rows()
        );
    }
    let mut groups = Vec::with_capacity(layout.groups.len());
    for (gi, grp) in layout.groups.iter().enumerate() {
        let sub = stream.substream(gi as u64);
        let vectors = match cfg.basis {
            BasisMode::Power => {
                let block = anchor_grads.column_block(grp.offset, grp.len);
                power_iteration_basis(&block, grp.k, cfg.power_iters, &sub, ORTHO_TOL)?.vectors
            }
            BasisMode::Random => {
                let k = grp.k.min(grp.len);
                orthonormalize_rows(&gaussian_noise(k, grp.len, 1.0, &sub)?, ORTHO_TOL)?.0
            }
        };
        groups.push(GroupBasis {
            offset: grp.offset,
            len: grp.len,
            vectors,
        });
    }
    Ok(AnchorBasis { p, groups })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrivateRelease {
    /// Gradient estimate handed to the optimizer.
    pub v_tilde: Vec<f64>,
    pub w_tilde: Vec<f64>,
    /// Empty for releases that drop the residual.
    pub r_tilde: Vec<f64>,
    pub k_effective: usize,
    /// Shares of rows clipped at the embedding and residual thresholds.
    pub clip_fractions: (f64, f64),
    /// Non-private diagnostic `‖r/n‖ / ‖g‖` from unclipped residuals; NaN
    /// when the mean gradient is zero.
    pub projection_error_rate: f64,
}

fn mean_norm(sum: &[f64], n: f64) -> f64 {
    norm(sum) / n
}

fn diagnostic_error_rate(g: &DenseMatrix, r: &DenseMatrix) -> f64 {
    let n = g.rows() as f64;
    let gn = mean_norm(&g.row_sum(), n);
    if gn == 0.0 {
        f64::NAN
    } else {
        mean_norm(&r.row_sum(), n) / gn
    }
}

fn add_scaled(dst: &mut [f64], noise: &[f64], scale: f64) {
    for (d, z) in dst.iter_mut().zip(noise) {
        *d += scale * z;
    }
}

/// Unbiased release: perturbed embedding sum plus perturbed residual sum.
pub fn gep_release(
    g: &DenseMatrix,
    basis: &AnchorBasis,
    cfg: &GepConfig,
    stream: &RandomStream,
) -> Result<PrivateRelease> {
    check_sigma(cfg.sigma)?;
    if g.rows() == 0 {
        return Err(invalid("no private gradients to release"));
    }
    let n = g.rows() as f64;
    let (w_full, r_full) = basis.split(g)?;
    let error_rate = diagnostic_error_rate(g, &r_full);
    let (w_hat, clipped_w) = clip_rows_counted(&w_full, cfg.clip_embedding)?;
    let (r_hat, clipped_r) = clip_rows_counted(&r_full, cfg.clip_residual)?;
    let mut w = w_hat.row_sum();
    let mut r = r_hat.row_sum();
    let k = w.len();
    let scale = cfg.sigma * std::f64::consts::SQRT_2;
    if scale > 0.0 {
        match cfg.release {
            ReleaseMode::Separate => {
                let z1 = gaussian_vector(k, scale * cfg.clip_embedding, &stream.substream(EMBEDDING_NOISE))?;
                let z2 = gaussian_vector(r.len(), scale * cfg.clip_residual, &stream.substream(RESIDUAL_NOISE))?;
                add_scaled(&mut w, &z1, 1.0);
                add_scaled(&mut r, &z2, 1.0);
            }
            ReleaseMode::Joint => {
                let z = gaussian_vector(k + r.len(), scale, &stream.substream(JOINT_NOISE))?;
                add_scaled(&mut w, &z[..k], cfg.clip_embedding);
                add_scaled(&mut r, &z[k..], cfg.clip_residual);
            }
        }
    }
    let mut v = basis.reconstruct(&w)?;
    for (vi, ri) in v.iter_mut().zip(&r) {
        *vi = (*vi + ri) / n;
    }
    Ok(PrivateRelease {
        v_tilde: v,
        w_tilde: w,
        r_tilde: r,
        k_effective: k,
        clip_fractions: (clipped_w as f64 / n, clipped_r as f64 / n),
        projection_error_rate: error_rate,
    })
}

/// Biased release: only the perturbed embedding, `ũ = w̃ᵀB/n`.
pub fn bgep_release(
    g: &DenseMatrix,
    basis: &AnchorBasis,
    cfg: &GepConfig,
    stream: &RandomStream,
) -> Result<PrivateRelease> {
    check_sigma(cfg.sigma)?;
    if g.rows() == 0 {
        return Err(invalid("no private gradients to release"));
    }
    let n = g.rows() as f64;
    let (w_full, r_full) = basis.split(g)?;
    let error_rate = diagnostic_error_rate(g, &r_full);
    let (w_hat, clipped_w) = clip_rows_counted(&w_full, cfg.clip_embedding)?;
    let mut w = w_hat.row_sum();
    if cfg.sigma > 0.0 {
        let z = gaussian_vector(w.len(), cfg.sigma * cfg.clip_embedding, &stream.substream(EMBEDDING_NOISE))?;
        add_scaled(&mut w, &z, 1.0);
    }
    let mut u = basis.reconstruct(&w)?;
    u.iter_mut().for_each(|v| *v /= n);
    Ok(PrivateRelease {
        v_tilde: u,
        k_effective: w.len(),
        w_tilde: w,
        r_tilde: Vec::new(),
        clip_fractions: (clipped_w as f64 / n, 0.0),
        projection_error_rate: error_rate,
    })
}

/// Plain gradient perturbation: clip rows at `clip`, sum, add
/// `N(0, (sigma·clip)² I)`, divide by n.
pub fn gp_release(g: &DenseMatrix, clip: f64, sigma: f64, stream: &RandomStream) -> Result<Vec<f64>> {
    gp_release_counted(g, clip, sigma, stream).map(|(v, _)| v)
}

/// As [`gp_release`], also returning the share of clipped rows.
pub fn gp_release_counted(
    g: &DenseMatrix,
    clip: f64,
    sigma: f64,
    stream: &RandomStream,
) -> Result<(Vec<f64>, f64)> {
    check_sigma(sigma)?;
    if g.rows() == 0 {
        return Err(invalid("no private gradients to release"));
    }
    let n = g.rows() as f64;
    let (clipped, count) = clip_rows_counted(g, clip)?;
    let mut sum = clipped.row_sum();
    if sigma > 0.0 {
        let z = gaussian_vector(sum.len(), sigma * clip, &stream.substream(GP_NOISE))?;
        add_scaled(&mut sum, &z, 1.0);
    }
    sum.iter_mut().for_each(|v| *v /= n);
    Ok((sum, count as f64 / n))
}

/// `‖(1/n) Σ R_i‖ / ‖(1/n) Σ G_i‖` with unclipped residuals.
pub fn projection_error_rate(g: &DenseMatrix, basis: &AnchorBasis) -> Result<f64> {
    if g.rows() == 0 {
        return Err(invalid("no gradients"));
    }
    let (_, r) = basis.split(g)?;
    let rate = diagnostic_error_rate(g, &r);
    if rate.is_nan() {
        return Err(Error::Undefined("projection error of a zero mean gradient".into()));
    }
    Ok(rate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::GroupLayout;

    fn noiseless(k: usize) -> GepConfig {
        GepConfig {
            k,
            m: 10,
            clip_embedding: 1e9,
            clip_residual: 1e9,
            ..GepConfig::default()
        }
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol * (1.0 + y.abs()), "{x} vs {y}");
        }
    }

    fn random(rows: usize, cols: usize, seed: u64) -> DenseMatrix {
        gaussian_noise(rows, cols, 1.0, &RandomStream::new(seed, 0)).unwrap()
    }

    #[test]
    fn noiseless_release_recovers_mean_gradient() {
        let g = random(6, 12, 1);
        let anchors = random(8, 12, 2);
        let cfg = noiseless(3);
        let basis = build_anchor_basis(&anchors, &GroupLayout::single(12, 3), &cfg, &RandomStream::new(0, 0)).unwrap();
        let rel = gep_release(&g, &basis, &cfg, &RandomStream::new(0, 1)).unwrap();
        assert_close(&rel.v_tilde, &g.row_mean(), 1e-12);
        assert_eq!(rel.clip_fractions, (0.0, 0.0));

        let empty = AnchorBasis::empty(12);
        let rel = gep_release(&g, &empty, &cfg, &RandomStream::new(0, 1)).unwrap();
        assert_eq!(rel.v_tilde, g.row_mean());
        assert_eq!(rel.k_effective, 0);
    }

    #[test]
    fn bgep_drops_residual() {
        let g = random(5, 10, 3);
        let anchors = random(4, 10, 4);
        let cfg = noiseless(2);
        let basis = build_anchor_basis(&anchors, &GroupLayout::single(10, 2), &cfg, &RandomStream::new(0, 0)).unwrap();
        let (_, r) = basis.split(&g).unwrap();
        let expected: Vec<f64> = g
            .row_mean()
            .iter()
            .zip(r.row_mean())
            .map(|(gi, ri)| gi - ri)
            .collect();
        let rel = bgep_release(&g, &basis, &cfg, &RandomStream::new(0, 1)).unwrap();
        assert_close(&rel.v_tilde, &expected, 1e-12);
        assert!(rel.r_tilde.is_empty());

        // rows inside the span: nothing is lost
        let coeffs = random(3, 2, 5);
        let in_span = coeffs.matmul(&basis.to_dense()).unwrap();
        let rel = bgep_release(&in_span, &basis, &cfg, &RandomStream::new(0, 1)).unwrap();
        assert_close(&rel.v_tilde, &in_span.row_mean(), 1e-12);
    }

    #[test]
    fn gp_cases() {
        let g = random(4, 6, 6);
        let out = gp_release(&g, 1e9, 0.0, &RandomStream::new(0, 0)).unwrap();
        assert_eq!(out, g.row_mean());

        let one = random(1, 6, 7);
        let (out, frac) = gp_release_counted(&one, 0.5, 0.0, &RandomStream::new(0, 0)).unwrap();
        assert!((norm(&out) - 0.5).abs() < 1e-12);
        assert_eq!(frac, 1.0);
        assert!(gp_release(&g, 1.0, -1.0, &RandomStream::new(0, 0)).is_err());
        assert!(gp_release(&g, 0.0, 1.0, &RandomStream::new(0, 0)).is_err());
    }

    #[test]
    fn negative_sigma_is_rejected() {
        let g = random(2, 3, 8);
        let cfg = GepConfig { sigma: -1.0, ..noiseless(1) };
        let b = AnchorBasis::empty(3);
        assert!(matches!(gep_release(&g, &b, &cfg, &RandomStream::new(0, 0)), Err(Error::InvalidInput(_))));
        assert!(bgep_release(&g, &b, &cfg, &RandomStream::new(0, 0)).is_err());
    }

    #[test]
    fn projection_error_edge_cases() {
        let g = random(5, 8, 9);
        assert!((projection_error_rate(&g, &AnchorBasis::empty(8)).unwrap() - 1.0).abs() < 1e-15);
        let (basis, _) = orthonormalize_rows(&g, ORTHO_TOL).unwrap();
        let b = AnchorBasis::from_rows(basis);
        assert!(projection_error_rate(&g, &b).unwrap() < 1e-12);
        let zero = DenseMatrix::zeros(3, 8);
        assert!(matches!(projection_error_rate(&zero, &b), Err(Error::Undefined(_))));
    }

    #[test]
    fn grouped_basis_is_block_diagonal() {
        let anchors = random(12, 10, 10);
        let layout = GroupLayout::even(10, 2, 4).unwrap();
        let cfg = GepConfig { k: 4, ..GepConfig::default() };
        let basis = build_anchor_basis(&anchors, &layout, &cfg, &RandomStream::new(1, 1)).unwrap();
        let dense = basis.to_dense();
        for (i, row) in dense.row_iter().enumerate() {
            let (lo, hi) = if i < 2 { (5, 10) } else { (0, 5) };
            assert!(row[lo..hi].iter().all(|&v| v == 0.0));
        }
        // grouped split agrees with projecting on the dense block-diagonal rows
        let g = random(3, 10, 11);
        let (w1, r1) = basis.split(&g).unwrap();
        let (w2, r2) = project_split(&g, &dense).unwrap();
        assert_close(w1.data(), w2.data(), 1e-12);
        assert_close(r1.data(), r2.data(), 1e-12);
    }

    #[test]
    fn random_basis_is_orthonormal_and_anchor_free() {
        let anchors = DenseMatrix::zeros(3, 20);
        let cfg = GepConfig { basis: BasisMode::Random, k: 5, ..GepConfig::default() };
        let basis = build_anchor_basis(&anchors, &GroupLayout::single(20, 5), &cfg, &RandomStream::new(2, 0)).unwrap();
        assert_eq!(basis.k_effective(), 5);
        let b = basis.to_dense();
        let gram = b.mul_transpose(&b).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let target = if i == j { 1.0 } else { 0.0 };
                assert!((gram.get(i, j) - target).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn release_modes_are_deterministic_and_distinct() {
        let g = random(4, 9, 12);
        let anchors = random(6, 9, 13);
        let mut cfg = GepConfig { k: 2, sigma: 1.0, ..GepConfig::default() };
        let basis = build_anchor_basis(&anchors, &GroupLayout::single(9, 2), &cfg, &RandomStream::new(0, 0)).unwrap();
        let s = RandomStream::new(5, 5);
        let joint = gep_release(&g, &basis, &cfg, &s).unwrap();
        assert_eq!(joint, gep_release(&g, &basis, &cfg, &s).unwrap());
        cfg.release = ReleaseMode::Separate;
        let sep = gep_release(&g, &basis, &cfg, &s).unwrap();
        assert_ne!(joint.v_tilde, sep.v_tilde);
        // v = (wᵀB + r)/n exactly as composed
        let mut recon = basis.reconstruct(&sep.w_tilde).unwrap();
        for (v, r) in recon.iter_mut().zip(&sep.r_tilde) {
            *v = (*v + r) / 4.0;
        }
        assert_eq!(recon, sep.v_tilde);
    }
}
