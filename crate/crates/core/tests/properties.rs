use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use relfeat::canonical::{
    canonical_directions, covariances, loss, projector_overlap, relevance, stable_inverse, CovarianceTriple,
    FeatureBatch, InverseMode,
};
use relfeat::datasets::gen_discrete_joint;
use relfeat::discrete::{apply_channel, channel_svd, chi2, fisher_inner, Direction, JointDistribution, ProbVector};
use relfeat::inference::{InferenceModel, Target};

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.random::<f64>() * 2.0 - 1.0)
}

/// Identity plus a small perturbation: invertible with bounded condition number.
fn mixing(rng: &mut ChaCha8Rng, k: usize) -> DMatrix<f64> {
    DMatrix::identity(k, k) + gaussian_matrix(rng, k, k) * (0.4 / k as f64)
}

/// Two correlated feature batches on a shared sample.
fn feature_pair(seed: u64, n: usize, kf: usize, kg: usize) -> (FeatureBatch, FeatureBatch) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let latent = gaussian_matrix(&mut rng, n, 2);
    let f = &latent * gaussian_matrix(&mut rng, 2, kf) + gaussian_matrix(&mut rng, n, kf) * 0.5;
    let g = (&latent * gaussian_matrix(&mut rng, 2, kg)).map(f64::tanh) + gaussian_matrix(&mut rng, n, kg) * 0.5;
    (FeatureBatch::new(f).unwrap(), FeatureBatch::new(g).unwrap())
}

fn random_vector(rng: &mut ChaCha8Rng, n: usize, signed: bool) -> ProbVector {
    let v: Vec<f64> =
        (0..n).map(|_| if signed { rng.random::<f64>() - 0.5 } else { rng.random::<f64>() + 0.05 }).collect();
    if signed {
        ProbVector::new(v).unwrap()
    } else {
        let s: f64 = v.iter().sum();
        ProbVector::new(v.iter().map(|x| x / s).collect()).unwrap()
    }
}

fn joint(seed: u64, nx: usize, ny: usize) -> JointDistribution {
    gen_discrete_joint(nx, ny, seed, 1.0).unwrap()
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pseudo_inverse_satisfies_penrose_conditions(seed in any::<u64>(), n in 1usize..7, rank in 0usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = rank.min(n);
        let b = gaussian_matrix(&mut rng, n, r);
        let m = &b * b.transpose();
        let p = stable_inverse(&m, InverseMode::default()).unwrap();
        let scale = 1.0 + m.norm() * p.norm();
        prop_assert!((&m * &p * &m - &m).norm() <= 1e-8 * scale * (1.0 + m.norm()));
        prop_assert!((&p * &m * &p - &p).norm() <= 1e-8 * scale * (1.0 + p.norm()));
        prop_assert!((&m * &p - (&m * &p).transpose()).norm() <= 1e-8 * scale);
        prop_assert!((&p * &m - (&p * &m).transpose()).norm() <= 1e-8 * scale);
    }

    #[test]
    fn relevance_is_invariant_to_invertible_mixing(seed in any::<u64>(), kf in 1usize..5, kg in 1usize..5) {
        let (f, g) = feature_pair(seed, 80, kf, kg);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let base = relevance(&covariances(&f, &g).unwrap(), InverseMode::default()).unwrap();
        let f2 = f.mixed(&mixing(&mut rng, kf)).unwrap();
        let g2 = g.mixed(&mixing(&mut rng, kg)).unwrap();
        let mixed = relevance(&covariances(&f2, &g2).unwrap(), InverseMode::default()).unwrap();
        prop_assert!(close(base, mixed, 1e-8), "{base} vs {mixed}");
    }

    #[test]
    fn relevance_equals_projector_overlap(seed in any::<u64>(), kf in 1usize..5, kg in 1usize..5) {
        let (f, g) = feature_pair(seed, 60, kf, kg);
        let r = relevance(&covariances(&f, &g).unwrap(), InverseMode::default()).unwrap();
        let overlap = projector_overlap(&f, &g).unwrap();
        prop_assert!(close(r, overlap, 1e-8), "{r} vs {overlap}");
    }

    #[test]
    fn loss_and_singular_values_are_bounded(seed in any::<u64>(), k0 in 1usize..5) {
        let (f, g) = feature_pair(seed, 50, k0, k0);
        let t = covariances(&f, &g).unwrap();
        let l = loss(&t, k0, InverseMode::default()).unwrap();
        prop_assert!(l >= -1e-9 && l <= k0 as f64 + 1e-9, "loss {l}");
        let dirs = canonical_directions(&t, InverseMode::default()).unwrap();
        for &eta in dirs.etas.iter() {
            prop_assert!((-1e-12..=1.0 + 1e-9).contains(&eta), "eta {eta}");
        }
        prop_assert!(close(dirs.relevances().sum(), k0 as f64 - l, 1e-8));
    }

    #[test]
    fn canonical_variables_are_orthonormal(seed in any::<u64>(), k in 1usize..5) {
        let (f, g) = feature_pair(seed, 70, k, k);
        let t = covariances(&f, &g).unwrap();
        let d = canonical_directions(&t, InverseMode::default()).unwrap();
        let eye = DMatrix::<f64>::identity(k, k);
        prop_assert!((d.w_f.transpose() * &t.k * &d.w_f - &eye).norm() < 1e-7);
        prop_assert!((d.w_g.transpose() * &t.l * &d.w_g - &eye).norm() < 1e-7);
        let cross = d.w_g.transpose() * &t.a * &d.w_f;
        prop_assert!((cross - DMatrix::from_diagonal(&d.etas)).norm() < 1e-7);
    }

    #[test]
    fn channel_is_adjoint_under_fisher_products(seed in any::<u64>(), nx in 2usize..8, ny in 2usize..8) {
        let j = joint(seed, nx, ny);
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
        let mu = random_vector(&mut rng, nx, true);
        let nu = random_vector(&mut rng, ny, true);
        let lhs = fisher_inner(&apply_channel(&j, &mu, Direction::XToY).unwrap(), &nu, j.p_y()).unwrap();
        let rhs = fisher_inner(&mu, &apply_channel(&j, &nu, Direction::YToX).unwrap(), j.p_x()).unwrap();
        prop_assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn channel_contracts_chi2(seed in any::<u64>(), nx in 2usize..8, ny in 2usize..8) {
        let j = joint(seed, nx, ny);
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(2));
        let q = random_vector(&mut rng, nx, false);
        let out = apply_channel(&j, &q, Direction::XToY).unwrap();
        let before = chi2(&q, j.p_x()).unwrap();
        let after = chi2(&out, j.p_y()).unwrap();
        prop_assert!(after <= before + 1e-12, "{after} > {before}");
        let d = channel_svd(&j);
        let second = d.etas.get(1).copied().unwrap_or(0.0);
        prop_assert!(after <= second * second * before + 1e-10);
    }

    #[test]
    fn channel_spectrum_matches_frobenius_norm(seed in any::<u64>(), nx in 2usize..8, ny in 2usize..8) {
        let j = joint(seed, nx, ny);
        let d = channel_svd(&j);
        prop_assert!((d.etas[0] - 1.0).abs() < 1e-10);
        for &eta in d.etas.iter() {
            prop_assert!((-1e-12..=1.0 + 1e-10).contains(&eta));
        }
        let s = j.whitened();
        prop_assert!((d.relevances().sum() - s.norm_squared()).abs() < 1e-9);
    }

    #[test]
    fn inference_is_marginally_consistent(seed in any::<u64>(), nx in 2usize..8, ny in 2usize..8) {
        let j = joint(seed, nx, ny);
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(3));
        let theta: Vec<f64> = (0..nx).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
        let inf = InferenceModel::from_joint(
            &j,
            &DMatrix::identity(nx, nx),
            &DMatrix::identity(ny, ny),
            &DMatrix::from_column_slice(nx, 1, &theta),
            vec![Target::Custom("theta".into())],
            InverseMode::default(),
        ).unwrap();
        let mut averaged = 0.0;
        for y in 0..ny {
            let mut g = vec![0.0; ny];
            g[y] = 1.0;
            averaged += j.p_y().as_slice()[y] * inf.infer_features(&g).unwrap().expectations[0];
        }
        let prior: f64 = theta.iter().zip(j.p_x().as_slice()).map(|(t, p)| t * p).sum();
        prop_assert!((averaged - prior).abs() < 1e-10, "{averaged} vs {prior}");
    }

    #[test]
    fn joint_triple_relevance_is_span_invariant(seed in any::<u64>(), nx in 3usize..8, ny in 3usize..8) {
        let j = joint(seed, nx, ny);
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(4));
        let fx = gaussian_matrix(&mut rng, nx, 2);
        let gy = gaussian_matrix(&mut rng, ny, 2);
        let base = relevance(&CovarianceTriple::from_joint(&j, &fx, &gy).unwrap(), InverseMode::default()).unwrap();
        let fx2 = &fx * mixing(&mut rng, 2);
        let gy2 = &gy * mixing(&mut rng, 2);
        let mixed = relevance(&CovarianceTriple::from_joint(&j, &fx2, &gy2).unwrap(), InverseMode::default()).unwrap();
        prop_assert!(close(base, mixed, 1e-8));
        prop_assert!(base <= channel_svd(&j).relevances().sum() + 1e-9);
    }
}
