//! Closed forms for the one-dimensional Gaussian pair `x ~ N(0, τ²)`,
//! `y = x + N(0, σ²)`.
//!
//! For this family the `k` most relevant variables on each side span the
//! monomials `1, x, …, x^{k−1}` (resp. `y`), the relevances are
//! `1, γ, γ², …` with `γ = τ² / (σ² + τ²)`, and inference of the first
//! `k − 1` posterior moments from those monomials is exact.

use nalgebra::DMatrix;

use crate::canonical::CovarianceTriple;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianPair {
    tau: f64,
    sigma: f64,
}

impl GaussianPair {
    pub fn new(tau: f64, sigma: f64) -> Result<Self> {
        if !(tau > 0.0 && sigma > 0.0 && tau.is_finite() && sigma.is_finite()) {
            return Err(Error::InvalidParameter(format!("gaussian pair τ = {tau}, σ = {sigma}")));
        }
        Ok(Self { tau, sigma })
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// `γ = τ² / (σ² + τ²)`.
    pub fn gamma(&self) -> f64 {
        let t2 = self.tau * self.tau;
        t2 / (self.sigma * self.sigma + t2)
    }
}

/// `E[z^m]` for `z ~ N(0, s²)`.
fn normal_moment(s: f64, m: usize) -> f64 {
    if m % 2 == 1 {
        return 0.0;
    }
    let double_factorial: f64 = (1..m).step_by(2).map(|v| v as f64).product();
    s.powi(m as i32) * double_factorial
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Exact second moments of the monomial features `x^j`, `y^i`, `j, i < k0`.
///
/// `A_ij = E[y^i x^j]` is expanded with `y = x + e` into Gaussian moments.
pub fn exact_moment_triple(gp: &GaussianPair, k0: usize) -> Result<CovarianceTriple> {
    if k0 == 0 {
        return Err(Error::InvalidParameter("k0 must be ≥ 1".into()));
    }
    let tau = gp.tau;
    let s_y = (gp.tau * gp.tau + gp.sigma * gp.sigma).sqrt();
    let k = DMatrix::from_fn(k0, k0, |i, j| normal_moment(tau, i + j));
    let l = DMatrix::from_fn(k0, k0, |i, j| normal_moment(s_y, i + j));
    let a = DMatrix::from_fn(k0, k0, |i, j| {
        (0..=i).map(|c| binomial(i, c) * normal_moment(tau, c + j) * normal_moment(gp.sigma, i - c)).sum()
    });
    CovarianceTriple::new(k, l, a, 0)
}

/// The three correlators of the monomial basis `1, x, x²` (and `1, y, y²`)
/// written out in closed form.
pub fn exact_kla(gp: &GaussianPair) -> CovarianceTriple {
    let t2 = gp.tau * gp.tau;
    let s2 = gp.sigma * gp.sigma;
    let v = t2 + s2;
    let k = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, t2, 0.0, t2, 0.0, t2, 0.0, 3.0 * t2 * t2]);
    let l = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, v, 0.0, v, 0.0, v, 0.0, 3.0 * v * v]);
    let a = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, t2, 0.0, t2, 0.0, v, 0.0, t2 * (s2 + 3.0 * t2)]);
    CovarianceTriple { k, l, a, n_samples: 0 }
}

/// Relevances `(1, γ, …, γ^{k0−1})`: the eigenvalues of `K⁻¹AᵀL⁻¹A` for the
/// monomial basis. Singular values are their square roots.
pub fn exact_spectrum(gp: &GaussianPair, k0: usize) -> Vec<f64> {
    let g = gp.gamma();
    (0..k0).map(|n| g.powi(n as i32)).collect()
}

/// Exact posterior mean and second moment of `x` given `y`:
/// `E[x|y] = γ y`, `E[x²|y] = γ² y² + (1 − γ) τ²`.
pub fn exact_posterior_moments(gp: &GaussianPair, y: f64) -> (f64, f64) {
    let g = gp.gamma();
    (g * y, g * g * y * y + (1.0 - g) * gp.tau * gp.tau)
}

/// Monomial feature table: column `j` holds `v^j`.
pub fn monomial_features(values: &[f64], k0: usize) -> DMatrix<f64> {
    DMatrix::from_fn(values.len(), k0, |n, j| values[n].powi(j as i32))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::canonical::{relevance, relevance_matrix, InverseMode};
    use crate::datasets::gen_gaussian_pair;
    use crate::linalg::max_abs_diff;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    const PSEUDO: InverseMode = InverseMode::Pseudo { tol: 1e-14 };

    #[test]
    fn gamma_is_in_unit_interval_and_monotone() {
        let a = GaussianPair::new(0.5, 1.0).unwrap().gamma();
        let b = GaussianPair::new(1.0, 1.0).unwrap().gamma();
        let c = GaussianPair::new(2.0, 1.0).unwrap().gamma();
        assert!(0.0 < a && a < b && b < c && c < 1.0);
        assert_eq!(b, 0.5);
        assert!(GaussianPair::new(1.0, 0.0).is_err());
        assert!(GaussianPair::new(-1.0, 1.0).is_err());
    }

    #[test]
    fn correlators_at_unit_parameters() {
        let t = exact_kla(&GaussianPair::new(1.0, 1.0).unwrap());
        assert_eq!(t.k, DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 3.0]));
        assert_eq!(t.l, DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 2.0, 0.0, 2.0, 0.0, 2.0, 0.0, 12.0]));
        assert_eq!(t.a, DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 2.0, 0.0, 4.0]));
    }

    #[test]
    fn closed_form_matches_moment_expansion() {
        for (tau, sigma) in [(1.0, 1.0), (0.7, 1.3), (2.0, 0.4)] {
            let gp = GaussianPair::new(tau, sigma).unwrap();
            let closed = exact_kla(&gp);
            let expanded = exact_moment_triple(&gp, 3).unwrap();
            assert!(max_abs_diff(&closed.k, &expanded.k) < 1e-12);
            assert!(max_abs_diff(&closed.l, &expanded.l) < 1e-12);
            assert!(max_abs_diff(&closed.a, &expanded.a) < 1e-12);
        }
    }

    #[test]
    fn correlators_match_monte_carlo() {
        let gp = GaussianPair::new(0.8, 0.6).unwrap();
        let n = 1_000_000;
        let d = gen_gaussian_pair(n, gp.tau(), gp.sigma(), 21).unwrap();
        let t = exact_kla(&gp);
        let x = d.x.as_slice();
        let y = d.y.as_slice();
        let check = |f: &dyn Fn(f64, f64) -> f64, exact: f64| {
            let vals: Vec<f64> = x.iter().zip(y).map(|(&a, &b)| f(a, b)).collect();
            let m = vals.iter().sum::<f64>() / n as f64;
            let var = vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1) as f64;
            let se = (var / n as f64).sqrt();
            assert!((m - exact).abs() < 5.0 * se.max(1e-15), "{m} vs {exact} (se {se})");
        };
        for i in 0..3 {
            for j in 0..3 {
                check(&|a, _| a.powi(i as i32) * a.powi(j as i32), t.k[(i, j)]);
                check(&|_, b| b.powi(i as i32) * b.powi(j as i32), t.l[(i, j)]);
                check(&|a, b| b.powi(i as i32) * a.powi(j as i32), t.a[(i, j)]);
            }
        }
    }

    #[test]
    fn spectrum_examples() {
        let gp = GaussianPair::new(1.0, 1.0).unwrap();
        assert_eq!(exact_spectrum(&gp, 3), vec![1.0, 0.5, 0.25]);
        let nearly_noiseless = GaussianPair::new(1.0, 1e-6).unwrap();
        assert!(exact_spectrum(&nearly_noiseless, 4).iter().all(|&v| (v - 1.0).abs() < 1e-10));
        let s = exact_spectrum(&GaussianPair::new(0.9, 1.1).unwrap(), 5);
        assert!(s.windows(2).all(|w| w[1] < w[0]) && s.iter().all(|&v| v > 0.0 && v <= 1.0));
    }

    #[test]
    fn relevance_matrix_is_upper_triangular_with_gamma_powers() {
        for (tau, sigma) in [(1.0, 1.0), (1.5, 0.5)] {
            let gp = GaussianPair::new(tau, sigma).unwrap();
            let g = gp.gamma();
            let m = relevance_matrix(&exact_kla(&gp), PSEUDO).unwrap();
            let t2 = tau * tau;
            let expected = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, t2 * (1.0 - g * g), 0.0, g, 0.0, 0.0, 0.0, g * g]);
            assert!(max_abs_diff(&m, &expected) < 1e-12, "{m}");
            // eigenvectors (1,0,0), (0,1,0), (−τ²,0,1)
            let v2 = nalgebra::DVector::from_vec(vec![-t2, 0.0, 1.0]);
            assert!((&m * &v2 - &v2 * (g * g)).norm() < 1e-12);
            let v1 = nalgebra::DVector::from_vec(vec![0.0, 1.0, 0.0]);
            assert!((&m * &v1 - &v1 * g).norm() < 1e-12);
            assert_abs_diff_eq!(relevance(&exact_kla(&gp), PSEUDO).unwrap(), 1.0 + g + g * g, epsilon = 1e-12);
        }
    }

    #[test]
    fn higher_order_spectrum_from_moment_expansion() {
        let gp = GaussianPair::new(1.0, 0.8).unwrap();
        let t = exact_moment_triple(&gp, 5).unwrap();
        let m = relevance_matrix(&t, PSEUDO).unwrap();
        let mut eig: Vec<f64> = m.complex_eigenvalues().iter().map(|c| c.re).collect();
        eig.sort_by(|a, b| b.total_cmp(a));
        for (got, want) in eig.iter().zip(exact_spectrum(&gp, 5)) {
            assert_abs_diff_eq!(*got, want, epsilon = 1e-8);
        }
    }

    #[test]
    fn posterior_moment_examples() {
        let gp = GaussianPair::new(1.0, 1.0).unwrap();
        assert_eq!(exact_posterior_moments(&gp, 2.0), (1.0, 1.5));
        let (m, s) = exact_posterior_moments(&gp, 0.0);
        assert_eq!(m, 0.0);
        assert_eq!(s, 0.5);
    }

    #[test]
    fn posterior_moments_match_rejection_sampling() {
        let gp = GaussianPair::new(1.0, 1.0).unwrap();
        let y = 1.3;
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let mut samples = Vec::with_capacity(100_000);
        while samples.len() < 100_000 {
            let x: f64 = gp.tau() * rng.sample::<f64, _>(StandardNormal);
            let accept = (-(y - x).powi(2) / (2.0 * gp.sigma().powi(2))).exp();
            if rng.random::<f64>() < accept {
                samples.push(x);
            }
        }
        let n = samples.len() as f64;
        let (mean, second) = exact_posterior_moments(&gp, y);
        let m1 = samples.iter().sum::<f64>() / n;
        let m2 = samples.iter().map(|x| x * x).sum::<f64>() / n;
        let var = second - mean * mean;
        // Var(x²) for x ~ N(μ, v) is 2v² + 4μ²v
        let se1 = (var / n).sqrt();
        let se2 = ((2.0 * var * var + 4.0 * mean * mean * var) / n).sqrt();
        assert!((m1 - mean).abs() < 3.0 * se1, "{m1} vs {mean}");
        assert!((m2 - second).abs() < 3.0 * se2, "{m2} vs {second}");
    }

    #[test]
    fn monomials() {
        let m = monomial_features(&[2.0, -1.0], 3);
        assert_eq!(m, DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 4.0, 1.0, -1.0, 1.0]));
    }
}
