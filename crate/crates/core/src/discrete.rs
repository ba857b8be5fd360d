//! Exact machinery on finite probability spaces.
//!
//! Elements of the linear span of probability vectors over a variable are
//! equipped with the Fisher inner product at that variable's marginal,
//! `⟨μ, μ'⟩ = Σ μ(x) μ'(x) / p(x)`. Under these inner products the stochastic
//! channel `N` (kernel `p(y|x)`) and its reverse `N*` (kernel `p(x|y)`) are
//! adjoint, and the singular value decomposition of `N` gives the canonical
//! variables of the joint distribution.
//!
//! Everything here is exact up to floating point and serves as the ground
//! truth for the sample-based pipeline.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::linalg::{orthogonal_complement, svd_desc};
use crate::{Error, Result};

/// Tolerance on normalization and marginal consistency of a joint table.
pub const NORMALIZATION_TOL: f64 = 1e-12;

/// Components whose magnitude is below this are skipped when fixing signs.
const SIGN_EPS: f64 = 1e-9;

/// An element of the linear space spanned by probability distributions over
/// one variable. Not necessarily normalized or nonnegative.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector(DVector<f64>);

impl ProbVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("probability vector entry {i}")));
        }
        Ok(Self(DVector::from_vec(values)))
    }

    pub fn from_vector(values: DVector<f64>) -> Result<Self> {
        Self::new(values.as_slice().to_vec())
    }

    /// Point mass on state `i` of an `n`-state variable.
    pub fn delta(n: usize, i: usize) -> Self {
        let mut v = DVector::zeros(n);
        v[i] = 1.0;
        Self(v)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice()
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn sum(&self) -> f64 {
        self.0.sum()
    }

    /// `μ = p·f`: the vector represented by the variable `f` relative to `p`.
    pub fn from_variable(p: &ProbVector, f: &[f64]) -> Result<Self> {
        check_len(p.len(), f.len(), "variable")?;
        Self::new(p.0.iter().zip(f).map(|(a, b)| a * b).collect())
    }

    /// `f = μ / p`: the variable representing this vector relative to `p`.
    pub fn to_variable(&self, p: &ProbVector) -> Result<Vec<f64>> {
        check_len(p.len(), self.len(), "variable")?;
        check_positive(p)?;
        Ok(self.0.iter().zip(p.0.iter()).map(|(m, q)| m / q).collect())
    }
}

impl std::ops::Sub for &ProbVector {
    type Output = ProbVector;

    fn sub(self, rhs: &ProbVector) -> ProbVector {
        ProbVector(&self.0 - &rhs.0)
    }
}

/// Which way a channel is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum Direction {
    /// `N`: a vector over X is mapped to a vector over Y with kernel `p(y|x)`.
    XToY,
    /// `N*`: a vector over Y is mapped to a vector over X with kernel `p(x|y)`.
    YToX,
}

fn check_len(expected: usize, got: usize, what: &str) -> Result<()> {
    if expected != got {
        return Err(Error::Dimension(format!("{what}: expected length {expected}, got {got}")));
    }
    Ok(())
}

fn check_positive(p: &ProbVector) -> Result<()> {
    match p.0.iter().position(|&v| v <= 0.0) {
        Some(index) => Err(Error::ZeroProbability { index, value: p.0[index] }),
        None => Ok(()),
    }
}

/// Fisher inner product `Σ μ(x) μ'(x) / p(x)` at the point `p`.
pub fn fisher_inner(mu: &ProbVector, mu2: &ProbVector, p: &ProbVector) -> Result<f64> {
    check_len(p.len(), mu.len(), "fisher_inner first argument")?;
    check_len(p.len(), mu2.len(), "fisher_inner second argument")?;
    check_positive(p)?;
    Ok(mu.0.iter().zip(mu2.0.iter()).zip(p.0.iter()).map(|((a, b), q)| a * b / q).sum())
}

/// χ² divergence of `q` from `p`, i.e. the squared Fisher norm of `q − p`.
pub fn chi2(q: &ProbVector, p: &ProbVector) -> Result<f64> {
    check_len(p.len(), q.len(), "chi2")?;
    let d = q - p;
    fisher_inner(&d, &d, p)
}

/// Exact finite joint distribution `p(x, y)` with cached marginals.
///
/// The table is `n_x × n_y`; both marginals are required to have full support.
#[derive(Debug, Clone, PartialEq)]
pub struct JointDistribution {
    table: DMatrix<f64>,
    p_x: ProbVector,
    p_y: ProbVector,
}

impl JointDistribution {
    /// Validates and wraps a normalized table with full-support marginals.
    pub fn new(table: DMatrix<f64>) -> Result<Self> {
        if table.nrows() == 0 || table.ncols() == 0 {
            return Err(Error::InvalidJoint("empty table".into()));
        }
        for x in 0..table.nrows() {
            for y in 0..table.ncols() {
                let v = table[(x, y)];
                if !v.is_finite() || v < 0.0 {
                    return Err(Error::InvalidJoint(format!("entry ({x},{y}) = {v}")));
                }
            }
        }
        let total = table.sum();
        if (total - 1.0).abs() > NORMALIZATION_TOL {
            return Err(Error::InvalidJoint(format!("table sums to {total}, not 1")));
        }
        let p_x = ProbVector(table.column_sum());
        let p_y = ProbVector(table.row_sum().transpose());
        if let Some(i) = p_x.0.iter().position(|&v| v <= 0.0) {
            return Err(Error::InvalidJoint(format!("marginal p_x has zero entry at {i}")));
        }
        if let Some(i) = p_y.0.iter().position(|&v| v <= 0.0) {
            return Err(Error::InvalidJoint(format!("marginal p_y has zero entry at {i}")));
        }
        Ok(Self { table, p_x, p_y })
    }

    /// Normalizes a nonnegative weight table and validates it.
    pub fn from_weights(weights: DMatrix<f64>) -> Result<Self> {
        let total = weights.sum();
        if !(total.is_finite() && total > 0.0) {
            return Err(Error::InvalidJoint(format!("weights sum to {total}")));
        }
        Self::new(weights / total)
    }

    /// Product distribution `p_x ⊗ p_y`.
    pub fn independent(p_x: &[f64], p_y: &[f64]) -> Result<Self> {
        let px = DVector::from_column_slice(p_x);
        let py = DVector::from_column_slice(p_y);
        Self::from_weights(&px * py.transpose())
    }

    pub fn table(&self) -> &DMatrix<f64> {
        &self.table
    }

    pub fn p_x(&self) -> &ProbVector {
        &self.p_x
    }

    pub fn p_y(&self) -> &ProbVector {
        &self.p_y
    }

    pub fn n_x(&self) -> usize {
        self.table.nrows()
    }

    pub fn n_y(&self) -> usize {
        self.table.ncols()
    }

    /// Whitened table `S(y, x) = p(x, y) / √(p_x(x) p_y(y))`, shape `n_y × n_x`.
    pub fn whitened(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n_y(), self.n_x(), |y, x| self.table[(x, y)] / (self.p_x.0[x] * self.p_y.0[y]).sqrt())
    }

    /// Exact `E[Θ(x) | y]` for every state `y`.
    pub fn conditional_expectation_given_y(&self, theta: &[f64]) -> Result<Vec<f64>> {
        check_len(self.n_x(), theta.len(), "target over X")?;
        Ok((0..self.n_y())
            .map(|y| (0..self.n_x()).map(|x| self.table[(x, y)] * theta[x]).sum::<f64>() / self.p_y.0[y])
            .collect())
    }

    /// Exact `E[Θ(y) | x]` for every state `x`.
    pub fn conditional_expectation_given_x(&self, theta: &[f64]) -> Result<Vec<f64>> {
        check_len(self.n_y(), theta.len(), "target over Y")?;
        Ok((0..self.n_x())
            .map(|x| (0..self.n_y()).map(|y| self.table[(x, y)] * theta[y]).sum::<f64>() / self.p_x.0[x])
            .collect())
    }

    /// Draws `n` i.i.d. `(x, y)` index pairs by inverse-CDF over the
    /// row-major flattened table.
    pub fn sample_pairs<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<(usize, usize)> {
        let ny = self.n_y();
        let mut cdf = Vec::with_capacity(self.table.len());
        let mut acc = 0.0;
        for x in 0..self.n_x() {
            for y in 0..ny {
                acc += self.table[(x, y)];
                cdf.push(acc);
            }
        }
        (0..n)
            .map(|_| {
                let u: f64 = rng.random::<f64>() * acc;
                let idx = cdf.partition_point(|&c| c <= u).min(cdf.len() - 1);
                (idx / ny, idx % ny)
            })
            .collect()
    }

    /// Writes the table as CSV: header `y0,y1,…`, one row per x state.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record((0..self.n_y()).map(|y| format!("y{y}")))?;
        for x in 0..self.n_x() {
            wtr.write_record(self.table.row(x).iter().map(|v| format!("{v:?}")))?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let header = rdr.headers()?.clone();
        for (i, h) in header.iter().enumerate() {
            if h.trim() != format!("y{i}") {
                return Err(Error::Parse(format!("joint CSV header column {i} is {h:?}, expected y{i}")));
            }
        }
        let n_y = header.len();
        let mut data = Vec::new();
        let mut n_x = 0;
        for rec in rdr.records() {
            let rec = rec?;
            if rec.len() != n_y {
                return Err(Error::Parse(format!("joint CSV row {n_x} has {} fields", rec.len())));
            }
            for field in rec.iter() {
                let v: f64 = field.trim().parse().map_err(|_| Error::Parse(format!("joint CSV value {field:?}")))?;
                data.push(v);
            }
            n_x += 1;
        }
        Self::new(DMatrix::from_row_slice(n_x, n_y, &data))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?)
    }
}

/// Applies the channel (`N` for [`Direction::XToY`], `N*` for [`Direction::YToX`]).
pub fn apply_channel(j: &JointDistribution, mu: &ProbVector, direction: Direction) -> Result<ProbVector> {
    let t = &j.table;
    match direction {
        Direction::XToY => {
            check_len(j.n_x(), mu.len(), "channel input over X")?;
            let out = (0..j.n_y()).map(|y| (0..j.n_x()).map(|x| t[(x, y)] / j.p_x.0[x] * mu.0[x]).sum()).collect();
            ProbVector::new(out)
        }
        Direction::YToX => {
            check_len(j.n_y(), mu.len(), "channel input over Y")?;
            let out = (0..j.n_x()).map(|x| (0..j.n_y()).map(|y| t[(x, y)] / j.p_y.0[y] * mu.0[y]).sum()).collect();
            ProbVector::new(out)
        }
    }
}

/// Full singular value decomposition of the channel in canonical-variable form.
///
/// Column `i` of `left_vars` holds `a_i(x)` and column `i` of `right_vars`
/// holds `b_i(y)`, so that `N(p_x a_i) = η_i p_y b_i`. Both families are
/// orthonormal under their marginal and the first pair is the constant one.
#[derive(Debug, Clone, PartialEq)]
pub struct CanonicalDecomposition {
    pub etas: DVector<f64>,
    pub left_vars: DMatrix<f64>,
    pub right_vars: DMatrix<f64>,
    pub p_x: ProbVector,
    pub p_y: ProbVector,
}

impl CanonicalDecomposition {
    pub fn rank(&self) -> usize {
        self.etas.len()
    }

    /// Squared singular values.
    pub fn relevances(&self) -> DVector<f64> {
        self.etas.map(|e| e * e)
    }

    /// `u_i = p_x · a_i` as a vector over X.
    pub fn left_vector(&self, i: usize) -> ProbVector {
        ProbVector(self.left_vars.column(i).component_mul(&self.p_x.0))
    }

    /// `v_i = p_y · b_i` as a vector over Y.
    pub fn right_vector(&self, i: usize) -> ProbVector {
        ProbVector(self.right_vars.column(i).component_mul(&self.p_y.0))
    }
}

/// Computes the channel SVD by whitening the joint table and running a dense
/// Euclidean SVD.
///
/// The constant pair (η = 1) is split off explicitly and the remaining
/// singular triplets are computed on the orthogonal complement of the
/// whitened marginals, so `a_0 ≡ 1` and `b_0 ≡ 1` hold even when other
/// singular values are also 1.
pub fn channel_svd(j: &JointDistribution) -> CanonicalDecomposition {
    let (n_x, n_y) = (j.n_x(), j.n_y());
    let r = n_x.min(n_y);
    let sqrt_px = j.p_x.0.map(f64::sqrt);
    let sqrt_py = j.p_y.0.map(f64::sqrt);
    let s = j.whitened();

    let mut etas = DVector::zeros(r);
    let mut left = DMatrix::zeros(n_x, r);
    let mut right = DMatrix::zeros(n_y, r);
    etas[0] = 1.0;
    left.column_mut(0).fill(1.0);
    right.column_mut(0).fill(1.0);

    if r > 1 {
        let qx = orthogonal_complement(&sqrt_px);
        let qy = orthogonal_complement(&sqrt_py);
        let reduced = qy.transpose() * &s * &qx;
        let (u, sv, v) = svd_desc(&reduced);
        let u_full = &qy * u;
        let v_full = &qx * v;
        for i in 0..(r - 1) {
            let mut a: DVector<f64> = v_full.column(i).component_div(&sqrt_px);
            let mut b: DVector<f64> = u_full.column(i).component_div(&sqrt_py);
            if let Some(first) = a.iter().find(|v| v.abs() > SIGN_EPS) {
                if *first < 0.0 {
                    a.neg_mut();
                    b.neg_mut();
                }
            }
            etas[i + 1] = sv[i];
            left.set_column(i + 1, &a);
            right.set_column(i + 1, &b);
        }
    }

    CanonicalDecomposition { etas, left_vars: left, right_vars: right, p_x: j.p_x.clone(), p_y: j.p_y.clone() }
}

/// Rank-`k0` truncation `q(x,y) = p_x(x) p_y(y) Σ_{i<k0} η_i a_i(x) b_i(y)`.
pub fn truncated_joint(d: &CanonicalDecomposition, k0: usize) -> Result<DMatrix<f64>> {
    if k0 == 0 || k0 > d.rank() {
        return Err(Error::InvalidParameter(format!("k0 = {k0} outside 1..={}", d.rank())));
    }
    let a = d.left_vars.columns(0, k0);
    let b = d.right_vars.columns(0, k0);
    let eta = DMatrix::from_diagonal(&d.etas.rows(0, k0).into_owned());
    let core = a * eta * b.transpose();
    Ok(DMatrix::from_fn(core.nrows(), core.ncols(), |x, y| d.p_x.0[x] * d.p_y.0[y] * core[(x, y)]))
}

/// Average squared Fisher distance `Σ (q − p)² / (p_x p_y)` between the
/// channel implied by `q` and the true one.
pub fn frobenius_distance(j: &JointDistribution, q: &DMatrix<f64>) -> Result<f64> {
    if q.shape() != j.table.shape() {
        return Err(Error::Dimension(format!(
            "frobenius_distance: table is {:?}, candidate is {:?}",
            j.table.shape(),
            q.shape()
        )));
    }
    let mut total = 0.0;
    for x in 0..j.n_x() {
        for y in 0..j.n_y() {
            let d = q[(x, y)] - j.table[(x, y)];
            total += d * d / (j.p_x.0[x] * j.p_y.0[y]);
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_normalized(n: usize, rng: &mut ChaCha8Rng) -> ProbVector {
        let v: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + 0.05).collect();
        let s: f64 = v.iter().sum();
        ProbVector::new(v.into_iter().map(|x| x / s).collect()).unwrap()
    }

    fn random_joint(nx: usize, ny: usize, rng: &mut ChaCha8Rng) -> JointDistribution {
        JointDistribution::from_weights(DMatrix::from_fn(nx, ny, |_, _| rng.random::<f64>() + 0.01)).unwrap()
    }

    fn pv(v: &[f64]) -> ProbVector {
        ProbVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn fisher_inner_of_marginal_with_itself_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = random_normalized(7, &mut rng);
        assert_abs_diff_eq!(fisher_inner(&p, &p, &p).unwrap(), 1.0, epsilon = 1e-14);
    }

    #[test]
    fn constant_and_sign_variables_are_orthogonal() {
        let p = pv(&[0.5, 0.5]);
        assert_eq!(fisher_inner(&pv(&[0.5, 0.5]), &pv(&[0.5, -0.5]), &p).unwrap(), 0.0);
    }

    #[test]
    fn fisher_inner_matches_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = random_normalized(5, &mut rng);
        let mu = pv(&(0..5).map(|_| rng.random::<f64>() - 0.5).collect::<Vec<_>>());
        let mu2 = pv(&(0..5).map(|_| rng.random::<f64>() - 0.5).collect::<Vec<_>>());
        let mut expected = 0.0;
        for i in 0..5 {
            expected += mu.as_slice()[i] * mu2.as_slice()[i] / p.as_slice()[i];
        }
        assert_abs_diff_eq!(fisher_inner(&mu, &mu2, &p).unwrap(), expected, epsilon = 1e-12);
    }

    #[test]
    fn fisher_inner_errors() {
        let p = pv(&[0.5, 0.0, 0.5]);
        let mu = pv(&[1.0, 1.0, 1.0]);
        assert!(matches!(fisher_inner(&mu, &mu, &p), Err(Error::ZeroProbability { index: 1, .. })));
        assert!(matches!(fisher_inner(&pv(&[1.0]), &mu, &pv(&[0.2, 0.3, 0.5])), Err(Error::Dimension(_))));
    }

    #[test]
    fn chi2_examples() {
        let p = pv(&[0.5, 0.5]);
        assert_eq!(chi2(&p, &p).unwrap(), 0.0);
        assert_abs_diff_eq!(chi2(&pv(&[0.75, 0.25]), &p).unwrap(), 0.25, epsilon = 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = random_normalized(6, &mut rng);
        let q = random_normalized(6, &mut rng);
        let mut expected = 0.0;
        for i in 0..6 {
            let d = q.as_slice()[i] - p.as_slice()[i];
            expected += d * d / p.as_slice()[i];
        }
        assert_abs_diff_eq!(chi2(&q, &p).unwrap(), expected, epsilon = 1e-12);
    }

    #[test]
    fn joint_validation() {
        assert!(JointDistribution::new(DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.0, 0.6])).is_err());
        assert!(JointDistribution::new(DMatrix::from_row_slice(2, 2, &[0.5, 0.5, 0.0, 0.0])).is_err());
        assert!(JointDistribution::new(DMatrix::from_row_slice(2, 2, &[0.6, -0.1, 0.1, 0.4])).is_err());
        let j = JointDistribution::new(DMatrix::from_row_slice(2, 2, &[0.4, 0.1, 0.1, 0.4])).unwrap();
        assert_eq!(j.p_x().as_slice(), &[0.5, 0.5]);
    }

    #[test]
    fn channel_maps_marginal_to_marginal() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let j = random_joint(3, 4, &mut rng);
        let out = apply_channel(&j, j.p_x(), Direction::XToY).unwrap();
        for (a, b) in out.as_slice().iter().zip(j.p_y().as_slice()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-15);
        }
        let back = apply_channel(&j, j.p_y(), Direction::YToX).unwrap();
        for (a, b) in back.as_slice().iter().zip(j.p_x().as_slice()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-15);
        }
    }

    #[test]
    fn independent_channel_forgets_input() {
        let j = JointDistribution::independent(&[0.2, 0.3, 0.5], &[0.6, 0.4]).unwrap();
        let mu = pv(&[0.3, -1.0, 2.0]);
        let out = apply_channel(&j, &mu, Direction::XToY).unwrap();
        let mass = mu.sum();
        for (a, b) in out.as_slice().iter().zip(j.p_y().as_slice()) {
            assert_abs_diff_eq!(*a, b * mass, epsilon = 1e-14);
        }
    }

    #[test]
    fn channel_matches_kernel_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let j = random_joint(3, 4, &mut rng);
        let mu = pv(&[0.7, -0.2, 0.4]);
        let out = apply_channel(&j, &mu, Direction::XToY).unwrap();
        for y in 0..4 {
            let mut expected = 0.0;
            for x in 0..3 {
                let p_y_given_x = j.table()[(x, y)] / j.table().row(x).sum();
                expected += p_y_given_x * mu.as_slice()[x];
            }
            assert_abs_diff_eq!(out.as_slice()[y], expected, epsilon = 1e-12);
        }
        assert!(apply_channel(&j, &pv(&[1.0, 2.0]), Direction::XToY).is_err());
    }

    #[test]
    fn svd_of_independent_joint() {
        let j = JointDistribution::independent(&[0.2, 0.3, 0.5], &[0.1, 0.6, 0.3]).unwrap();
        let d = channel_svd(&j);
        assert_abs_diff_eq!(d.etas[0], 1.0);
        assert!(d.etas.iter().skip(1).all(|e| e.abs() < 1e-12));
    }

    #[test]
    fn svd_of_identity_channel() {
        let j = JointDistribution::new(DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.0, 0.5])).unwrap();
        let d = channel_svd(&j);
        assert_abs_diff_eq!(d.etas[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(d.etas[1], 1.0, epsilon = 1e-12);
        assert!(d.left_vars.column(0).iter().all(|&v| v == 1.0));
    }

    #[test]
    fn svd_of_symmetric_two_by_two() {
        let j = JointDistribution::new(DMatrix::from_row_slice(2, 2, &[0.4, 0.1, 0.1, 0.4])).unwrap();
        let d = channel_svd(&j);
        assert_abs_diff_eq!(d.etas[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(d.etas[1], 0.6, epsilon = 1e-12);
        // sign convention: first component positive
        assert!(d.left_vars[(0, 1)] > 0.0);
    }

    #[test]
    fn svd_satisfies_channel_relations_and_orthonormality() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for (nx, ny) in [(4, 4), (3, 6), (7, 2), (5, 5)] {
            let j = random_joint(nx, ny, &mut rng);
            let d = channel_svd(&j);
            for i in 0..d.rank() {
                assert!(d.etas[i] <= 1.0 + 1e-10);
                if i > 0 {
                    assert!(d.etas[i] <= d.etas[i - 1] + 1e-12);
                }
                let fwd = apply_channel(&j, &d.left_vector(i), Direction::XToY).unwrap();
                let bwd = apply_channel(&j, &d.right_vector(i), Direction::YToX).unwrap();
                let v = d.right_vector(i);
                let u = d.left_vector(i);
                for y in 0..ny {
                    assert_abs_diff_eq!(fwd.as_slice()[y], d.etas[i] * v.as_slice()[y], epsilon = 1e-9);
                }
                for x in 0..nx {
                    assert_abs_diff_eq!(bwd.as_slice()[x], d.etas[i] * u.as_slice()[x], epsilon = 1e-9);
                }
                for k in 0..d.rank() {
                    let expected = if i == k { 1.0 } else { 0.0 };
                    let ea: f64 =
                        (0..nx).map(|x| j.p_x().as_slice()[x] * d.left_vars[(x, i)] * d.left_vars[(x, k)]).sum();
                    let eb: f64 =
                        (0..ny).map(|y| j.p_y().as_slice()[y] * d.right_vars[(y, i)] * d.right_vars[(y, k)]).sum();
                    assert_abs_diff_eq!(ea, expected, epsilon = 1e-10);
                    assert_abs_diff_eq!(eb, expected, epsilon = 1e-10);
                }
            }
        }
    }

    #[test]
    fn truncation_examples() {
        let j = JointDistribution::new(DMatrix::from_row_slice(2, 2, &[0.4, 0.1, 0.1, 0.4])).unwrap();
        let d = channel_svd(&j);
        let q1 = truncated_joint(&d, 1).unwrap();
        assert!(q1.iter().all(|v| (v - 0.25).abs() < 1e-12));
        let q2 = truncated_joint(&d, 2).unwrap();
        assert!(crate::linalg::max_abs_diff(&q2, j.table()) < 1e-10);
        assert!(truncated_joint(&d, 0).is_err());
        assert!(truncated_joint(&d, 3).is_err());
    }

    #[test]
    fn truncation_keeps_marginals_and_distance_is_tail_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let j = random_joint(5, 6, &mut rng);
        let d = channel_svd(&j);
        for k0 in 1..=d.rank() {
            let q = truncated_joint(&d, k0).unwrap();
            for x in 0..5 {
                assert_abs_diff_eq!(q.row(x).sum(), j.p_x().as_slice()[x], epsilon = 1e-10);
            }
            for y in 0..6 {
                assert_abs_diff_eq!(q.column(y).sum(), j.p_y().as_slice()[y], epsilon = 1e-10);
            }
            let tail: f64 = d.etas.iter().skip(k0).map(|e| e * e).sum();
            assert_abs_diff_eq!(frobenius_distance(&j, &q).unwrap(), tail, epsilon = 1e-10);
        }
        assert_eq!(frobenius_distance(&j, j.table()).unwrap(), 0.0);
        assert!(frobenius_distance(&j, &DMatrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn csv_round_trip_and_validation() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let j = random_joint(3, 4, &mut rng);
        let mut buf = Vec::new();
        j.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("y0,y1,y2,y3\n"));
        let back = JointDistribution::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back, j);

        assert!(JointDistribution::read_csv("a,b\n0.5,0.5\n".as_bytes()).is_err());
        assert!(JointDistribution::read_csv("y0,y1\n0.5,0.6\n".as_bytes()).is_err());
        assert!(JointDistribution::read_csv("y0,y1\n0.5,zz\n".as_bytes()).is_err());
    }

    #[test]
    fn sampling_frequencies_follow_table() {
        let j = JointDistribution::new(DMatrix::from_row_slice(2, 2, &[0.4, 0.1, 0.2, 0.3])).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 200_000;
        let mut counts = [[0usize; 2]; 2];
        for (x, y) in j.sample_pairs(n, &mut rng) {
            counts[x][y] += 1;
        }
        for x in 0..2 {
            for y in 0..2 {
                let p = j.table()[(x, y)];
                let se = (p * (1.0 - p) / n as f64).sqrt();
                assert!((counts[x][y] as f64 / n as f64 - p).abs() < 5.0 * se);
            }
        }
    }
}
