use gep_core::linalg::{gaussian_noise, norm, DenseMatrix, RandomStream};
use gep_core::mechanism::{
    bgep_release, build_anchor_basis, gep_release, gp_release, projection_error_rate, AnchorBasis, BasisMode,
    GepConfig, ReleaseMode,
};
use gep_core::models::GroupLayout;
use proptest::prelude::*;

/// Rows drawn from a fixed `rank`-dimensional subspace of R^p.
fn subspace_rows(n: usize, p: usize, rank: usize, span: &DenseMatrix, seed: u64) -> DenseMatrix {
    let coeffs = gaussian_noise(n, rank, 1.0, &RandomStream::new(seed, 7)).unwrap();
    let out = coeffs.matmul(span).unwrap();
    assert_eq!(out.cols(), p);
    out
}

fn basis_for(anchors: &DenseMatrix, k: usize, cfg: &GepConfig, seed: u64) -> AnchorBasis {
    build_anchor_basis(anchors, &GroupLayout::single(anchors.cols(), k), cfg, &RandomStream::new(seed, 8)).unwrap()
}

fn no_clip(k: usize, sigma: f64) -> GepConfig {
    GepConfig {
        k,
        clip_embedding: 1e12,
        clip_residual: 1e12,
        sigma,
        ..GepConfig::default()
    }
}

/// Per-coordinate sample mean and standard error over the draws.
fn mean_and_se(draws: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let n = draws.len() as f64;
    let p = draws[0].len();
    let mut mean = vec![0.0; p];
    for d in draws {
        for (m, x) in mean.iter_mut().zip(d) {
            *m += x / n;
        }
    }
    let mut var = vec![0.0; p];
    for d in draws {
        for ((v, x), m) in var.iter_mut().zip(d).zip(&mean) {
            *v += (x - m).powi(2) / (n - 1.0);
        }
    }
    (mean, var.iter().map(|v| (v / n).sqrt()).collect())
}

#[test]
fn releases_are_centred_on_their_targets() {
    let (n, p, k, draws) = (20, 60, 6, 2000);
    let g = gaussian_noise(n, p, 1.0, &RandomStream::new(1, 1)).unwrap();
    let anchors = gaussian_noise(30, p, 1.0, &RandomStream::new(1, 2)).unwrap();
    // Thresholds above every row norm: no clipping, finite noise.
    let cfg = GepConfig {
        clip_embedding: 20.0,
        clip_residual: 20.0,
        ..no_clip(k, 0.5)
    };
    let basis = basis_for(&anchors, k, &cfg, 1);
    let target = g.row_mean();
    let (_, r) = basis.split(&g).unwrap();
    let biased_target: Vec<f64> = target.iter().zip(r.row_mean()).map(|(a, b)| a - b).collect();

    let stream = RandomStream::new(1, 3);
    let v: Vec<_> = (0..draws).map(|i| gep_release(&g, &basis, &cfg, &stream.substream(i)).unwrap().v_tilde).collect();
    let u: Vec<_> = (0..draws).map(|i| bgep_release(&g, &basis, &cfg, &stream.substream(i)).unwrap().v_tilde).collect();
    let (mv, sv) = mean_and_se(&v);
    let (mu, su) = mean_and_se(&u);
    assert_eq!(rel_clip(&g, &basis, &cfg), (0.0, 0.0));
    for j in 0..p {
        assert!((mv[j] - target[j]).abs() <= 4.0 * sv[j], "ṽ coordinate {j}");
        assert!((mu[j] - biased_target[j]).abs() <= 4.0 * su[j], "ũ coordinate {j}");
    }
    let gap: Vec<f64> = mu.iter().zip(&target).map(|(a, b)| a - b).collect();
    assert!(norm(&gap) > 10.0 * norm(&su));
}

fn rel_clip(g: &DenseMatrix, basis: &AnchorBasis, cfg: &GepConfig) -> (f64, f64) {
    gep_release(g, basis, cfg, &RandomStream::new(0, 0)).unwrap().clip_fractions
}

#[test]
fn gp_noise_energy_matches_chi_square_mean() {
    let (n, p, clip, sigma) = (5, 200, 3.0, 1.5);
    let g = DenseMatrix::zeros(n, p);
    let stream = RandomStream::new(2, 0);
    let draws = 1000;
    let mean: f64 = (0..draws)
        .map(|i| norm(&gp_release(&g, clip, sigma, &stream.substream(i)).unwrap()).powi(2))
        .sum::<f64>()
        / draws as f64;
    let expected = p as f64 * (sigma * clip / n as f64).powi(2);
    assert!((mean / expected - 1.0).abs() <= 0.05, "{mean} vs {expected}");
}

#[test]
fn gep_noise_is_smaller_than_gp_noise() {
    let (n, p) = (10, 200);
    let k = p / 20;
    let cfg = GepConfig {
        k,
        clip_embedding: 10.0,
        clip_residual: 2.0,
        sigma: 1.0,
        basis: BasisMode::Random,
        ..GepConfig::default()
    };
    let basis = basis_for(&DenseMatrix::zeros(1, p), k, &cfg, 3);
    let g = DenseMatrix::zeros(n, p);
    let stream = RandomStream::new(3, 0);
    let draws = 300;
    let (mut gep, mut gp) = (0.0, 0.0);
    for i in 0..draws {
        let s = stream.substream(i);
        gep += norm(&gep_release(&g, &basis, &cfg, &s).unwrap().v_tilde).powi(2);
        gp += norm(&gp_release(&g, 10.0, 1.0, &s).unwrap()).powi(2);
    }
    assert!(gep < gp, "GEP {gep} GP {gp}");
}

#[test]
fn exact_subspace_is_recovered() {
    let (p, rank) = (100, 5);
    for seed in 0..10 {
        let span = gaussian_noise(rank, p, 1.0, &RandomStream::new(seed, 4)).unwrap();
        let anchors = subspace_rows(10, p, rank, &span, seed);
        let g = subspace_rows(40, p, rank, &span, seed + 1000);
        let cfg = GepConfig {
            power_iters: 10,
            ..no_clip(rank, 0.0)
        };
        let basis = basis_for(&anchors, rank, &cfg, seed);
        assert_eq!(basis.k_effective(), rank);
        assert!(projection_error_rate(&g, &basis).unwrap() <= 1e-6);
    }
}

#[test]
fn error_shrinks_as_the_basis_grows_to_the_true_rank() {
    let (p, rank) = (80, 8);
    for seed in 0..5 {
        let span = gaussian_noise(rank, p, 1.0, &RandomStream::new(seed, 5)).unwrap();
        let anchors = subspace_rows(2 * rank, p, rank, &span, seed);
        let g = subspace_rows(50, p, rank, &span, seed + 500);
        let errors: Vec<f64> = (1..=rank)
            .map(|k| {
                let cfg = GepConfig {
                    power_iters: 10,
                    ..no_clip(k, 0.0)
                };
                projection_error_rate(&g, &basis_for(&anchors, k, &cfg, seed)).unwrap()
            })
            .collect();
        assert!(errors[rank - 1] <= 1e-6, "seed {seed}: {errors:?}");
        assert!(errors[rank - 1] < errors[0], "seed {seed}: {errors:?}");
    }
}

fn sums(g: &DenseMatrix, basis: &AnchorBasis, cfg: &GepConfig) -> (Vec<f64>, Vec<f64>) {
    let rel = gep_release(g, basis, cfg, &RandomStream::new(0, 0)).unwrap();
    (rel.w_tilde, rel.r_tilde)
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn removing_a_row_moves_each_sum_by_at_most_its_threshold(
        seed in 0u64..1000,
        n in 2usize..12,
        scale in 0.1f64..20.0,
        s1 in 0.1f64..5.0,
        s2 in 0.1f64..5.0,
        separate in any::<bool>(),
    ) {
        let p = 30;
        let g = gaussian_noise(n, p, scale, &RandomStream::new(seed, 1)).unwrap();
        let anchors = gaussian_noise(8, p, 1.0, &RandomStream::new(seed, 2)).unwrap();
        let cfg = GepConfig {
            k: 4,
            clip_embedding: s1,
            clip_residual: s2,
            sigma: 0.0,
            release: if separate { ReleaseMode::Separate } else { ReleaseMode::Joint },
            ..GepConfig::default()
        };
        let basis = basis_for(&anchors, 4, &cfg, seed);
        let (w, r) = sums(&g, &basis, &cfg);
        for drop in 0..n {
            let keep: Vec<usize> = (0..n).filter(|&i| i != drop).collect();
            let (w2, r2) = sums(&g.select_rows(&keep), &basis, &cfg);
            prop_assert!(distance(&w, &w2) <= s1 * (1.0 + 1e-12));
            prop_assert!(distance(&r, &r2) <= s2 * (1.0 + 1e-12));
        }
    }

    #[test]
    fn release_composes_as_documented(seed in 0u64..1000, sigma in 0.0f64..3.0) {
        let (n, p) = (6, 25);
        let g = gaussian_noise(n, p, 2.0, &RandomStream::new(seed, 1)).unwrap();
        let anchors = gaussian_noise(8, p, 1.0, &RandomStream::new(seed, 2)).unwrap();
        let cfg = GepConfig { k: 3, sigma, clip_embedding: 1.5, clip_residual: 0.7, ..GepConfig::default() };
        let basis = basis_for(&anchors, 3, &cfg, seed);
        let rel = gep_release(&g, &basis, &cfg, &RandomStream::new(seed, 3)).unwrap();
        let embed = basis.reconstruct(&rel.w_tilde).unwrap();
        for j in 0..p {
            let expect = (embed[j] + rel.r_tilde[j]) / n as f64;
            prop_assert_eq!(rel.v_tilde[j], expect);
        }
    }
}
