//! Sample-based covariance machinery.
//!
//! Given feature evaluations `F` (`N × k_f`, row `n` is `f(x_n)`) and `G`
//! (`N × k_g`) on the same samples, the raw second moments
//!
//! ```text
//! K = FᵀF / N,   L = GᵀG / N,   A = GᵀF / N
//! ```
//!
//! represent the Fisher inner products on the two feature spans and the
//! channel between them. `Tr(K⁺ Aᵀ L⁺ A)` is the sum of the squared singular
//! values of the channel restricted to those spans (the relevance), and the
//! training loss is `k0` minus that.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::discrete::JointDistribution;
use crate::linalg::{max_abs_diff, svd_desc, sym_eigen_desc, symmetrize};
use crate::{Error, Result};

pub const DEFAULT_PINV_TOL: f64 = 1e-10;
pub const DEFAULT_RIDGE_EPS: f64 = 1e-6;

/// Feature values on a batch: `values[(n, j)] = f_j(x_n)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBatch {
    values: DMatrix<f64>,
}

impl FeatureBatch {
    pub fn new(values: DMatrix<f64>) -> Result<Self> {
        if values.nrows() == 0 {
            return Err(Error::Dimension("feature batch has no samples".into()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "feature batch entry ({}, {})",
                i % values.nrows(),
                i / values.nrows()
            )));
        }
        Ok(Self { values })
    }

    pub fn from_row_slice(rows: usize, cols: usize, data: &[f64]) -> Result<Self> {
        Self::new(DMatrix::from_row_slice(rows, cols, data))
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn into_values(self) -> DMatrix<f64> {
        self.values
    }

    pub fn n_samples(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_features(&self) -> usize {
        self.values.ncols()
    }

    /// Features recombined linearly: `F · M`.
    pub fn mixed(&self, m: &DMatrix<f64>) -> Result<Self> {
        if m.nrows() != self.n_features() {
            return Err(Error::Dimension(format!(
                "mixing matrix has {} rows for {} features",
                m.nrows(),
                self.n_features()
            )));
        }
        Self::new(&self.values * m)
    }
}

/// How `K⁻¹` and `L⁻¹` are stabilized.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum InverseMode {
    /// Moore–Penrose pseudo-inverse; eigenvalues below `tol · λ_max` are dropped.
    Pseudo { tol: f64 },
    /// `(M + ε I)⁻¹`.
    Ridge { eps: f64 },
}

impl Default for InverseMode {
    fn default() -> Self {
        InverseMode::Pseudo { tol: DEFAULT_PINV_TOL }
    }
}

/// Second moments of two feature families on a common sample.
///
/// `k` is `k_f × k_f`, `l` is `k_g × k_g` and `a` is `k_g × k_f`
/// (rows index `g`, columns index `f`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovarianceTriple {
    #[serde(with = "crate::linalg::matrix_serde")]
    pub k: DMatrix<f64>,
    #[serde(with = "crate::linalg::matrix_serde")]
    pub l: DMatrix<f64>,
    #[serde(with = "crate::linalg::matrix_serde")]
    pub a: DMatrix<f64>,
    pub n_samples: usize,
}

impl CovarianceTriple {
    pub fn new(k: DMatrix<f64>, l: DMatrix<f64>, a: DMatrix<f64>, n_samples: usize) -> Result<Self> {
        if !k.is_square() || !l.is_square() || a.nrows() != l.nrows() || a.ncols() != k.nrows() {
            return Err(Error::Dimension(format!(
                "covariance shapes K {:?}, L {:?}, A {:?}",
                k.shape(),
                l.shape(),
                a.shape()
            )));
        }
        Ok(Self { k, l, a, n_samples })
    }

    pub fn k_f(&self) -> usize {
        self.k.nrows()
    }

    pub fn k_g(&self) -> usize {
        self.l.nrows()
    }

    /// Exchanges the roles of the two variables (`K ↔ L`, `A ↔ Aᵀ`).
    pub fn swapped(&self) -> Self {
        Self { k: self.l.clone(), l: self.k.clone(), a: self.a.transpose(), n_samples: self.n_samples }
    }

    /// Exact expectations of feature products under a finite joint.
    ///
    /// `f_vals` is `n_x × k_f` (`f_vals[(x, j)] = f_j(x)`) and `g_vals` is `n_y × k_g`.
    pub fn from_joint(j: &JointDistribution, f_vals: &DMatrix<f64>, g_vals: &DMatrix<f64>) -> Result<Self> {
        if f_vals.nrows() != j.n_x() || g_vals.nrows() != j.n_y() {
            return Err(Error::Dimension(format!(
                "feature tables {:?} / {:?} for a {}×{} joint",
                f_vals.shape(),
                g_vals.shape(),
                j.n_x(),
                j.n_y()
            )));
        }
        let px = DMatrix::from_diagonal(j.p_x().as_vector());
        let py = DMatrix::from_diagonal(j.p_y().as_vector());
        let k = symmetrize(&(f_vals.transpose() * px * f_vals));
        let l = symmetrize(&(g_vals.transpose() * py * g_vals));
        let a = g_vals.transpose() * j.table().transpose() * f_vals;
        Self::new(k, l, a, 0)
    }
}

/// Raw (uncentered) second moments of two feature batches.
pub fn covariances(f: &FeatureBatch, g: &FeatureBatch) -> Result<CovarianceTriple> {
    if f.n_samples() != g.n_samples() {
        return Err(Error::Dimension(format!("feature batches have {} and {} samples", f.n_samples(), g.n_samples())));
    }
    let n = f.n_samples() as f64;
    let fv = f.values();
    let gv = g.values();
    let k = symmetrize(&fv.tr_mul(fv)) / n;
    let l = symmetrize(&gv.tr_mul(gv)) / n;
    let a = gv.tr_mul(fv) / n;
    CovarianceTriple::new(k, l, a, f.n_samples())
}

fn check_symmetric(m: &DMatrix<f64>) -> Result<()> {
    if !m.is_square() {
        return Err(Error::Dimension(format!("expected a square matrix, got {:?}", m.shape())));
    }
    let scale = m.amax().max(1.0);
    if max_abs_diff(m, &m.transpose()) > 1e-8 * scale {
        return Err(Error::InvalidParameter("matrix is not symmetric".into()));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("matrix to invert".into()));
    }
    Ok(())
}

/// Applies `h` to the spectrum of a symmetric matrix, mapping eigenvalues
/// below the pseudo-inverse cutoff to zero.
fn spectral_map(m: &DMatrix<f64>, tol: f64, h: impl Fn(f64) -> f64) -> DMatrix<f64> {
    let (vals, vecs) = sym_eigen_desc(m);
    let n = vals.len();
    let lmax = vals.iter().copied().fold(0.0, f64::max);
    if lmax <= 0.0 {
        return DMatrix::zeros(n, n);
    }
    let cutoff = tol * lmax;
    let mapped = DVector::from_iterator(n, vals.iter().map(|&v| if v > cutoff { h(v) } else { 0.0 }));
    symmetrize(&(&vecs * DMatrix::from_diagonal(&mapped) * vecs.transpose()))
}

/// Stabilized inverse of a symmetric (positive semidefinite) matrix.
pub fn stable_inverse(m: &DMatrix<f64>, mode: InverseMode) -> Result<DMatrix<f64>> {
    check_symmetric(m)?;
    match mode {
        InverseMode::Pseudo { tol } => {
            if !(tol >= 0.0) {
                return Err(Error::InvalidParameter(format!("pseudo-inverse tolerance {tol}")));
            }
            Ok(spectral_map(m, tol, |v| 1.0 / v))
        }
        InverseMode::Ridge { eps } => {
            let shifted = m + DMatrix::identity(m.nrows(), m.ncols()) * eps;
            if eps > 0.0 {
                if let Some(ch) = shifted.clone().cholesky() {
                    return Ok(symmetrize(&ch.inverse()));
                }
            }
            match shifted.try_inverse() {
                Some(inv) if inv.iter().all(|v| v.is_finite()) => Ok(symmetrize(&inv)),
                _ => Err(Error::Singular(format!("ridge inverse with ε = {eps}"))),
            }
        }
    }
}

/// Stabilized inverse square root, consistent with [`stable_inverse`]:
/// `S · S = stable_inverse(M)`.
pub fn stable_inverse_sqrt(m: &DMatrix<f64>, mode: InverseMode) -> Result<DMatrix<f64>> {
    check_symmetric(m)?;
    match mode {
        InverseMode::Pseudo { tol } => Ok(spectral_map(m, tol, |v| 1.0 / v.sqrt())),
        InverseMode::Ridge { eps } => {
            let shifted = m + DMatrix::identity(m.nrows(), m.ncols()) * eps;
            let (vals, vecs) = sym_eigen_desc(&shifted);
            if vals.iter().any(|&v| v <= 0.0) {
                return Err(Error::Singular(format!("ridge inverse square root with ε = {eps}")));
            }
            let mapped = vals.map(|v| 1.0 / v.sqrt());
            Ok(symmetrize(&(&vecs * DMatrix::from_diagonal(&mapped) * vecs.transpose())))
        }
    }
}

/// `N*N = K⁺ Aᵀ L⁺ A`, the matrix whose eigenvalues are the relevances of
/// the canonical directions within the two spans.
pub fn relevance_matrix(t: &CovarianceTriple, mode: InverseMode) -> Result<DMatrix<f64>> {
    let k_inv = stable_inverse(&t.k, mode)?;
    let l_inv = stable_inverse(&t.l, mode)?;
    Ok(k_inv * t.a.transpose() * l_inv * &t.a)
}

/// `Tr(K⁺ Aᵀ L⁺ A)`: the sum of squared singular values of the channel
/// restricted to the two feature spans.
pub fn relevance(t: &CovarianceTriple, mode: InverseMode) -> Result<f64> {
    let k_inv = stable_inverse(&t.k, mode)?;
    let l_inv = stable_inverse(&t.l, mode)?;
    let left = k_inv * t.a.transpose();
    let right = l_inv * &t.a;
    // Tr(XY) = Σ X ⊙ Yᵀ
    let tr = left.component_mul(&right.transpose()).sum();
    if !tr.is_finite() {
        return Err(Error::NonFinite("relevance".into()));
    }
    Ok(tr)
}

/// The training loss `k0 − relevance`; zero at the optimum.
pub fn loss(t: &CovarianceTriple, k0: usize, mode: InverseMode) -> Result<f64> {
    if k0 == 0 || k0 != t.k_f() || k0 != t.k_g() {
        return Err(Error::Dimension(format!("k0 = {k0} for a triple with {} / {} features", t.k_f(), t.k_g())));
    }
    Ok(k0 as f64 - relevance(t, mode)?)
}

/// Orthonormal basis of the column range of `m`, dropping directions whose
/// squared singular value is below `tol` times the largest.
fn range_basis(m: &DMatrix<f64>, tol: f64) -> DMatrix<f64> {
    let (u, s, _) = svd_desc(m);
    let smax = s.iter().copied().fold(0.0, f64::max);
    let rank = s.iter().filter(|&&v| smax > 0.0 && v * v > tol * smax * smax).count();
    u.columns(0, rank).into_owned()
}

/// `Tr(P Q)` for the orthogonal projectors `P`, `Q` onto the column ranges
/// of `F` and `G`, computed from orthonormal range bases as `‖U_Fᵀ U_G‖²`.
pub fn projector_overlap(f: &FeatureBatch, g: &FeatureBatch) -> Result<f64> {
    if f.n_samples() != g.n_samples() {
        return Err(Error::Dimension(format!("feature batches have {} and {} samples", f.n_samples(), g.n_samples())));
    }
    let uf = range_basis(f.values(), DEFAULT_PINV_TOL);
    let ug = range_basis(g.values(), DEFAULT_PINV_TOL);
    if uf.ncols() == 0 || ug.ncols() == 0 {
        return Ok(0.0);
    }
    Ok(uf.tr_mul(&ug).norm_squared())
}

/// Canonical directions within two feature spans.
///
/// `etas` are the singular values (descending); column `i` of `w_f` maps raw
/// `f` features to the `i`-th canonical variable on the X side, and likewise
/// `w_g` on the Y side. The canonical variables `F·w_f` are orthonormal under
/// the sample (or exact) second moments.
#[derive(Debug, Clone, PartialEq)]
pub struct CanonicalDirections {
    pub etas: DVector<f64>,
    pub w_f: DMatrix<f64>,
    pub w_g: DMatrix<f64>,
}

impl CanonicalDirections {
    pub fn relevances(&self) -> DVector<f64> {
        self.etas.map(|e| e * e)
    }
}

/// Diagonalizes the channel restricted to the two spans by an SVD of the
/// whitened cross moment `L^{-1/2} A K^{-1/2}`.
pub fn canonical_directions(t: &CovarianceTriple, mode: InverseMode) -> Result<CanonicalDirections> {
    let k_is = stable_inverse_sqrt(&t.k, mode)?;
    let l_is = stable_inverse_sqrt(&t.l, mode)?;
    let s = &l_is * &t.a * &k_is;
    let (u, etas, v) = svd_desc(&s);
    let mut w_f = k_is * v;
    let mut w_g = l_is * u;
    for i in 0..etas.len() {
        if let Some(first) = w_f.column(i).iter().find(|v| v.abs() > 1e-9) {
            if *first < 0.0 {
                w_f.column_mut(i).neg_mut();
                w_g.column_mut(i).neg_mut();
            }
        }
    }
    Ok(CanonicalDirections { etas, w_f, w_g })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::discrete::channel_svd;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_batch(n: usize, k: usize, rng: &mut ChaCha8Rng) -> FeatureBatch {
        FeatureBatch::new(DMatrix::from_fn(n, k, |_, _| rng.random::<f64>() * 2.0 - 1.0)).unwrap()
    }

    const PSEUDO: InverseMode = InverseMode::Pseudo { tol: DEFAULT_PINV_TOL };

    #[test]
    fn constant_feature_covariances() {
        let ones = FeatureBatch::new(DMatrix::from_element(10, 1, 1.0)).unwrap();
        let t = covariances(&ones, &ones).unwrap();
        assert_eq!(t.k[(0, 0)], 1.0);
        assert_eq!(t.l[(0, 0)], 1.0);
        assert_eq!(t.a[(0, 0)], 1.0);
        assert_eq!(t.n_samples, 10);
        assert_abs_diff_eq!(relevance(&t, PSEUDO).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn covariances_match_direct_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let f = random_batch(50, 3, &mut rng);
        let g = random_batch(50, 3, &mut rng);
        let t = covariances(&f, &g).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let mut k = 0.0;
                let mut l = 0.0;
                let mut a = 0.0;
                for n in 0..50 {
                    k += f.values()[(n, i)] * f.values()[(n, j)];
                    l += g.values()[(n, i)] * g.values()[(n, j)];
                    a += g.values()[(n, i)] * f.values()[(n, j)];
                }
                assert_abs_diff_eq!(t.k[(i, j)], k / 50.0, epsilon = 1e-12);
                assert_abs_diff_eq!(t.l[(i, j)], l / 50.0, epsilon = 1e-12);
                assert_abs_diff_eq!(t.a[(i, j)], a / 50.0, epsilon = 1e-12);
            }
        }
        let same = covariances(&f, &f).unwrap();
        assert_eq!(same.k, same.l);
        assert!(max_abs_diff(&same.k, &same.a) < 1e-15);
        assert!(covariances(&f, &random_batch(49, 3, &mut rng)).is_err());
    }

    #[test]
    fn inverse_examples() {
        let id = DMatrix::<f64>::identity(3, 3);
        assert!(max_abs_diff(&stable_inverse(&id, PSEUDO).unwrap(), &id) < 1e-14);
        assert!(max_abs_diff(&stable_inverse(&id, InverseMode::Ridge { eps: 0.0 }).unwrap(), &id) < 1e-14);
        let proj = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        assert!(max_abs_diff(&stable_inverse(&proj, PSEUDO).unwrap(), &proj) < 1e-14);
        assert!(matches!(stable_inverse(&proj, InverseMode::Ridge { eps: 0.0 }), Err(Error::Singular(_))));
        let ridge = stable_inverse(&proj, InverseMode::Ridge { eps: 0.5 }).unwrap();
        assert_abs_diff_eq!(ridge[(0, 0)], 1.0 / 1.5, epsilon = 1e-14);
        assert_abs_diff_eq!(ridge[(1, 1)], 2.0, epsilon = 1e-14);
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 0.0, 1.0]);
        assert!(stable_inverse(&asym, PSEUDO).is_err());
    }

    #[test]
    fn penrose_conditions_on_rank_deficient_gram() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let b = DMatrix::from_fn(5, 3, |_, _| rng.random::<f64>() - 0.5);
        let m = symmetrize(&(&b * b.transpose()));
        let p = stable_inverse(&m, PSEUDO).unwrap();
        assert!(max_abs_diff(&(&m * &p * &m), &m) < 1e-9);
        assert!(max_abs_diff(&(&p * &m * &p), &p) < 1e-9);
        let mp = &m * &p;
        assert!(max_abs_diff(&mp, &mp.transpose()) < 1e-9);
    }

    #[test]
    fn inverse_sqrt_squares_to_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let b = DMatrix::from_fn(4, 4, |_, _| rng.random::<f64>() - 0.5);
        let m = symmetrize(&(&b * b.transpose()));
        for mode in [PSEUDO, InverseMode::Ridge { eps: 1e-3 }] {
            let s = stable_inverse_sqrt(&m, mode).unwrap();
            assert!(max_abs_diff(&(&s * &s), &stable_inverse(&m, mode).unwrap()) < 1e-8);
        }
    }

    #[test]
    fn identical_full_rank_features_are_fully_relevant() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let f = random_batch(40, 3, &mut rng);
        let t = covariances(&f, &f).unwrap();
        assert_abs_diff_eq!(relevance(&t, PSEUDO).unwrap(), 3.0, epsilon = 1e-10);
        assert_abs_diff_eq!(loss(&t, 3, PSEUDO).unwrap(), 0.0, epsilon = 1e-10);
        assert!(loss(&t, 2, PSEUDO).is_err());
    }

    #[test]
    fn duplicated_constants_leave_one_unit_of_relevance() {
        let k0 = 4;
        let ones = FeatureBatch::new(DMatrix::from_element(30, k0, 1.0)).unwrap();
        let t = covariances(&ones, &ones).unwrap();
        assert_abs_diff_eq!(loss(&t, k0, PSEUDO).unwrap(), (k0 - 1) as f64, epsilon = 1e-10);
    }

    #[test]
    fn indicator_basis_on_small_joint() {
        let j = JointDistribution::new(DMatrix::from_row_slice(2, 2, &[0.4, 0.1, 0.1, 0.4])).unwrap();
        let id = DMatrix::identity(2, 2);
        let t = CovarianceTriple::from_joint(&j, &id, &id).unwrap();
        assert_abs_diff_eq!(relevance(&t, PSEUDO).unwrap(), 1.36, epsilon = 1e-12);
        assert_abs_diff_eq!(loss(&t, 2, PSEUDO).unwrap(), 0.64, epsilon = 1e-12);
        let dirs = canonical_directions(&t, PSEUDO).unwrap();
        assert_abs_diff_eq!(dirs.etas[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(dirs.etas[1], 0.6, epsilon = 1e-12);
        let d = channel_svd(&j);
        assert_abs_diff_eq!(d.relevances().sum(), 1.36, epsilon = 1e-12);
    }

    #[test]
    fn projector_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let f = random_batch(30, 3, &mut rng);
        assert_abs_diff_eq!(projector_overlap(&f, &f).unwrap(), 3.0, epsilon = 1e-10);

        // disjoint sample blocks
        let mut fv = DMatrix::zeros(20, 2);
        let mut gv = DMatrix::zeros(20, 2);
        for n in 0..10 {
            fv[(n, 0)] = rng.random::<f64>();
            fv[(n, 1)] = rng.random::<f64>();
            gv[(n + 10, 0)] = rng.random::<f64>();
            gv[(n + 10, 1)] = rng.random::<f64>();
        }
        let f = FeatureBatch::new(fv).unwrap();
        let g = FeatureBatch::new(gv).unwrap();
        assert_abs_diff_eq!(projector_overlap(&f, &g).unwrap(), 0.0, epsilon = 1e-12);
        let t = covariances(&f, &g).unwrap();
        assert_abs_diff_eq!(relevance(&t, PSEUDO).unwrap(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn projector_overlap_matches_relevance() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        for _ in 0..10 {
            let f = random_batch(60, 4, &mut rng);
            let g = random_batch(60, 4, &mut rng);
            let t = covariances(&f, &g).unwrap();
            assert_abs_diff_eq!(projector_overlap(&f, &g).unwrap(), relevance(&t, PSEUDO).unwrap(), epsilon = 1e-8);
        }
    }

    #[test]
    fn canonical_directions_are_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let f = random_batch(80, 3, &mut rng);
        let noise = random_batch(80, 3, &mut rng);
        let g = FeatureBatch::new(f.values() + noise.values() * 0.5).unwrap();
        let t = covariances(&f, &g).unwrap();
        let dirs = canonical_directions(&t, PSEUDO).unwrap();
        let a = f.values() * &dirs.w_f;
        let b = g.values() * &dirs.w_g;
        let n = 80.0;
        assert!(max_abs_diff(&(a.tr_mul(&a) / n), &DMatrix::identity(3, 3)) < 1e-10);
        assert!(max_abs_diff(&(b.tr_mul(&b) / n), &DMatrix::identity(3, 3)) < 1e-10);
        let cross = b.tr_mul(&a) / n;
        for i in 0..3 {
            assert_abs_diff_eq!(cross[(i, i)], dirs.etas[i], epsilon = 1e-10);
        }
        assert_abs_diff_eq!(dirs.relevances().sum(), relevance(&t, PSEUDO).unwrap(), epsilon = 1e-10);
    }

    #[test]
    fn triple_json_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let f = random_batch(10, 2, &mut rng);
        let g = random_batch(10, 3, &mut rng);
        let t = covariances(&f, &g).unwrap();
        let s = serde_json::to_string(&t).unwrap();
        let back: CovarianceTriple = serde_json::from_str(&s).unwrap();
        assert_eq!(back, t);
    }
}
