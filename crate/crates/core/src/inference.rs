//! Conditional expectations from learned features.
//!
//! For every target function Θ of the inferred variable the training pass
//! stores `Θ_j = mean Θ(x_n) f_j(x_n)`. Given a new observation `y`,
//!
//! ```text
//! Θ̄(y) = Σ_ij Θ_j (K⁺ Aᵀ L⁺)_ji g_i(y)
//! ```
//!
//! and the reverse direction exchanges `K ↔ L`, `A ↔ Aᵀ`, `f ↔ g`.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::canonical::{covariances, stable_inverse, CovarianceTriple, FeatureBatch, InverseMode};
use crate::datasets::PairDataset;
use crate::discrete::{Direction, JointDistribution};
use crate::linalg::{max_abs_diff, sym_eigen_desc};
use crate::neural::FeatureNetwork;
use crate::trainer::TrainedModel;
use crate::{Error, Result};

/// A named function of the inferred variable.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Target {
    Constant,
    Coord(usize),
    Product(usize, usize),
    Power(usize, u32),
    /// Values supplied by the caller; cannot be evaluated from raw rows.
    Custom(String),
}

impl Target {
    /// Evaluates on one row of raw values.
    pub fn eval(&self, row: &[f64]) -> Result<f64> {
        let get = |i: usize| {
            row.get(i).copied().ok_or_else(|| {
                Error::Dimension(format!("target {self} reads coordinate {i} of a {}-dim row", row.len()))
            })
        };
        Ok(match self {
            Target::Constant => 1.0,
            Target::Coord(i) => get(*i)?,
            Target::Product(i, j) => get(*i)? * get(*j)?,
            Target::Power(i, p) => get(*i)?.powi(*p as i32),
            Target::Custom(name) => {
                return Err(Error::InvalidParameter(format!("custom target {name} needs precomputed values")))
            }
        })
    }

    /// Same function in canonical form (`v_i^2` → `v_i*v_i`, ordered products).
    fn normalized(&self) -> Target {
        match *self {
            Target::Power(i, 2) => Target::Product(i, i),
            Target::Power(i, 1) => Target::Coord(i),
            Target::Power(_, 0) => Target::Constant,
            Target::Product(i, j) if i > j => Target::Product(j, i),
            ref t => t.clone(),
        }
    }

    /// All coordinates followed by all products `v_i v_j`, `i ≤ j`.
    pub fn moment_set(dim: usize) -> Vec<Target> {
        let mut out: Vec<Target> = (0..dim).map(Target::Coord).collect();
        for i in 0..dim {
            for j in i..dim {
                out.push(if i == j { Target::Power(i, 2) } else { Target::Product(i, j) });
            }
        }
        out
    }

    /// Parses a comma-separated list such as `1,x0,x0^2,x0*x1`.
    pub fn parse_list(s: &str) -> Result<Vec<Target>> {
        s.split(',').map(str::trim).filter(|t| !t.is_empty()).map(str::parse).collect()
    }
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Target::Constant => write!(f, "1"),
            Target::Coord(i) => write!(f, "v{i}"),
            Target::Product(i, j) => write!(f, "v{i}*v{j}"),
            Target::Power(i, p) => write!(f, "v{i}^{p}"),
            Target::Custom(name) => write!(f, "{name}"),
        }
    }
}

fn parse_coord(s: &str) -> Option<usize> {
    let mut chars = s.chars();
    let first = chars.next()?;
    if !first.is_ascii_alphabetic() {
        return None;
    }
    let rest = chars.as_str().trim_start_matches('_');
    rest.parse().ok()
}

impl FromStr for Target {
    type Err = Error;

    /// Accepts `1`, `x0`, `x0*x1`, `x0^3` (any single-letter prefix, optional `_`).
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || Error::Parse(format!("unrecognized target {s:?}"));
        if s == "1" {
            return Ok(Target::Constant);
        }
        if let Some((a, b)) = s.split_once('*') {
            return Ok(Target::Product(parse_coord(a).ok_or_else(bad)?, parse_coord(b).ok_or_else(bad)?));
        }
        if let Some((a, p)) = s.split_once('^') {
            return Ok(Target::Power(parse_coord(a).ok_or_else(bad)?, p.parse().map_err(|_| bad())?));
        }
        if let Some(stripped) = s.strip_prefix("custom:") {
            return Ok(Target::Custom(stripped.to_string()));
        }
        parse_coord(s).map(Target::Coord).ok_or_else(bad)
    }
}

impl Serialize for Target {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Target::Custom(name) => s.serialize_str(&format!("custom:{name}")),
            t => s.collect_str(t),
        }
    }
}

impl<'de> Deserialize<'de> for Target {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

/// Conditional expectations of the registered targets for one observation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Posterior {
    pub targets: Vec<Target>,
    pub expectations: Vec<f64>,
    /// Standard deviation of each coordinate target whose square was also
    /// registered; `None` elsewhere.
    pub std: Vec<Option<f64>>,
    /// Set when some estimated variance came out negative and was clamped to 0.
    pub clamped: bool,
}

impl Posterior {
    /// Expectation of a registered target.
    pub fn get(&self, t: &Target) -> Option<f64> {
        let want = t.normalized();
        self.targets.iter().position(|s| s.normalized() == want).map(|i| self.expectations[i])
    }
}

/// Frozen covariances plus per-target statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceModel {
    /// `K`, `L`, `A` of the X/Y features over the full training set.
    pub triple: CovarianceTriple,
    /// `targets × features-of-the-inferred-side`.
    #[serde(with = "crate::linalg::matrix_serde")]
    pub theta: DMatrix<f64>,
    pub targets: Vec<Target>,
    /// `YToX`: observe y, infer functions of x. `XToY`: the reverse.
    pub direction: Direction,
    pub inverse_mode: InverseMode,
    /// Network of the observed side, re-attached after loading.
    #[serde(skip)]
    pub net: Option<FeatureNetwork>,
}

/// Oriented pieces: `k` over inferred features, `l` over observed ones,
/// `a` is `observed × inferred`.
fn oriented(triple: &CovarianceTriple, direction: Direction) -> CovarianceTriple {
    match direction {
        Direction::YToX => triple.clone(),
        Direction::XToY => triple.swapped(),
    }
}

impl InferenceModel {
    /// Builds a model from precomputed pieces.
    pub fn from_parts(
        triple: CovarianceTriple,
        theta: DMatrix<f64>,
        targets: Vec<Target>,
        direction: Direction,
        inverse_mode: InverseMode,
    ) -> Result<Self> {
        let inferred = oriented(&triple, direction).k_f();
        if theta.ncols() != inferred || theta.nrows() != targets.len() {
            return Err(Error::Dimension(format!(
                "theta is {:?}; expected {} × {}",
                theta.shape(),
                targets.len(),
                inferred
            )));
        }
        if !crate::linalg::all_finite(&theta) {
            return Err(Error::NonFinite("theta statistics".into()));
        }
        Ok(Self { triple, theta, targets, direction, inverse_mode, net: None })
    }

    /// Fits from feature values and target values on the same samples.
    ///
    /// `target_values` is `N × m`, one column per target, evaluated on the
    /// inferred side.
    pub fn fit_from_features(
        f: &FeatureBatch,
        g: &FeatureBatch,
        target_values: &DMatrix<f64>,
        targets: Vec<Target>,
        direction: Direction,
        inverse_mode: InverseMode,
    ) -> Result<Self> {
        let triple = covariances(f, g)?;
        let feats = match direction {
            Direction::YToX => f.values(),
            Direction::XToY => g.values(),
        };
        if target_values.nrows() != feats.nrows() {
            return Err(Error::Dimension(format!(
                "{} target rows for {} samples",
                target_values.nrows(),
                feats.nrows()
            )));
        }
        if !crate::linalg::all_finite(target_values) {
            return Err(Error::NonFinite("target values".into()));
        }
        let theta = target_values.transpose() * feats / feats.nrows() as f64;
        Self::from_parts(triple, theta, targets, direction, inverse_mode)
    }

    /// Exact statistics under a finite joint, inferring functions of x from y.
    ///
    /// `f_vals` is `n_x × k_f`, `g_vals` is `n_y × k_g` and `target_values`
    /// is `n_x × m`.
    pub fn from_joint(
        j: &JointDistribution,
        f_vals: &DMatrix<f64>,
        g_vals: &DMatrix<f64>,
        target_values: &DMatrix<f64>,
        targets: Vec<Target>,
        inverse_mode: InverseMode,
    ) -> Result<Self> {
        let triple = CovarianceTriple::from_joint(j, f_vals, g_vals)?;
        if target_values.nrows() != j.n_x() {
            return Err(Error::Dimension(format!(
                "target table has {} rows for {} states",
                target_values.nrows(),
                j.n_x()
            )));
        }
        let px = DMatrix::from_diagonal(j.p_x().as_vector());
        let theta = target_values.transpose() * px * f_vals;
        Self::from_parts(triple, theta, targets, Direction::YToX, inverse_mode)
    }

    /// Sets the observed-side network from a trained model.
    pub fn attach(mut self, model: &TrainedModel) -> Result<Self> {
        let net = match self.direction {
            Direction::YToX => model.net_g.clone(),
            Direction::XToY => model.net_f.clone(),
        };
        let observed = oriented(&self.triple, self.direction).k_g();
        if net.output_dim() != observed {
            return Err(Error::Dimension(format!(
                "network emits {} features; statistics expect {observed}",
                net.output_dim()
            )));
        }
        self.net = Some(net);
        Ok(self)
    }

    /// Number of features on the observed side.
    pub fn observed_features(&self) -> usize {
        oriented(&self.triple, self.direction).k_g()
    }

    /// Linear map from observed features to target expectations
    /// (`targets × observed features`).
    ///
    /// Both groupings `K⁺(AᵀL⁺)` and `(K⁺Aᵀ)L⁺` are evaluated and required to
    /// agree.
    pub fn coefficient_matrix(&self) -> Result<DMatrix<f64>> {
        let t = oriented(&self.triple, self.direction);
        let k_inv = stable_inverse(&t.k, self.inverse_mode)?;
        let l_inv = stable_inverse(&t.l, self.inverse_mode)?;
        let at = t.a.transpose();
        let grouped_right = &k_inv * (&at * &l_inv);
        let grouped_left = (&k_inv * &at) * &l_inv;
        let scale = 1.0 + grouped_right.amax();
        let gap = max_abs_diff(&grouped_right, &grouped_left);
        if !(gap <= 1e-8 * scale) {
            return Err(Error::NonFinite(format!("inference coefficient forms disagree by {gap:e}")));
        }
        Ok(&self.theta * grouped_left)
    }

    /// Target expectations for each row of observed feature values
    /// (`N × observed features` in, `N × targets` out).
    pub fn expectations_from_features(&self, feats: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if feats.ncols() != self.observed_features() {
            return Err(Error::Dimension(format!(
                "{} observed features, model expects {}",
                feats.ncols(),
                self.observed_features()
            )));
        }
        let out = feats * self.coefficient_matrix()?.transpose();
        if !crate::linalg::all_finite(&out) {
            return Err(Error::NonFinite("inferred expectations".into()));
        }
        Ok(out)
    }

    /// Target expectations for raw observations (one per row).
    pub fn expectations(&self, obs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let net = self
            .net
            .as_ref()
            .ok_or_else(|| Error::InvalidParameter("inference model has no feature network attached".into()))?;
        if obs.ncols() != net.input_dim() {
            return Err(Error::Dimension(format!(
                "observation has {} columns, network takes {}",
                obs.ncols(),
                net.input_dim()
            )));
        }
        self.expectations_from_features(net.forward(obs)?.values())
    }

    /// Posterior for one raw observation.
    pub fn infer(&self, observation: &[f64]) -> Result<Posterior> {
        let e = self.expectations(&DMatrix::from_row_slice(1, observation.len(), observation))?;
        Ok(self.posterior(e.row(0).iter().copied().collect()))
    }

    /// Posterior for one row of observed feature values.
    pub fn infer_features(&self, feats: &[f64]) -> Result<Posterior> {
        let e = self.expectations_from_features(&DMatrix::from_row_slice(1, feats.len(), feats))?;
        Ok(self.posterior(e.row(0).iter().copied().collect()))
    }

    fn posterior(&self, expectations: Vec<f64>) -> Posterior {
        let normalized: Vec<Target> = self.targets.iter().map(Target::normalized).collect();
        let mut clamped = false;
        let std = normalized
            .iter()
            .enumerate()
            .map(|(k, t)| {
                let Target::Coord(i) = *t else { return None };
                let sq = normalized.iter().position(|s| *s == Target::Product(i, i))?;
                let var = expectations[sq] - expectations[k] * expectations[k];
                if var < 0.0 {
                    clamped = true;
                }
                Some(var.max(0.0).sqrt())
            })
            .collect();
        Posterior { targets: self.targets.clone(), expectations, std, clamped }
    }

    fn check_one_hot_targets(&self) -> Result<()> {
        let ok = self.targets.iter().enumerate().all(|(c, t)| t.normalized() == Target::Coord(c));
        if !ok || self.targets.is_empty() {
            return Err(Error::InvalidParameter(
                "classification needs the label coordinates 0..m as targets, in order".into(),
            ));
        }
        Ok(())
    }

    /// Most likely label and the inferred one-hot expectations.
    pub fn classify(&self, observation: &[f64]) -> Result<(usize, Vec<f64>)> {
        self.check_one_hot_targets()?;
        let p = self.infer(observation)?;
        Ok((argmax(&p.expectations), p.expectations))
    }

    /// Labels for every row of `obs`.
    pub fn classify_batch(&self, obs: &DMatrix<f64>) -> Result<Vec<usize>> {
        self.check_one_hot_targets()?;
        let e = self.expectations(obs)?;
        Ok((0..e.nrows()).map(|r| argmax(&e.row(r).iter().copied().collect::<Vec<_>>())).collect())
    }

    /// Mean vector and principal deviation (top eigenvector of the inferred
    /// covariance scaled by the square root of its eigenvalue).
    pub fn posterior_direction_of_max_variance(&self, observation: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let p = self.infer(observation)?;
        principal_deviation(&p)
    }
}

/// Index of the largest score; ties go to the lowest index.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Mean and principal deviation from a posterior carrying all first and
/// second moments of coordinates `0..d`.
pub fn principal_deviation(p: &Posterior) -> Result<(Vec<f64>, Vec<f64>)> {
    let dim = p.targets.iter().filter(|t| matches!(t.normalized(), Target::Coord(_))).count();
    if dim == 0 {
        return Err(Error::MissingTarget("no coordinate targets".into()));
    }
    let need = |t: Target| p.get(&t).ok_or_else(|| Error::MissingTarget(format!("{t}")));
    let mean = (0..dim).map(|i| need(Target::Coord(i))).collect::<Result<Vec<_>>>()?;
    let mut cov = DMatrix::zeros(dim, dim);
    for i in 0..dim {
        for j in i..dim {
            let c = need(Target::Product(i, j))? - mean[i] * mean[j];
            cov[(i, j)] = c;
            cov[(j, i)] = c;
        }
    }
    let (vals, vecs) = sym_eigen_desc(&cov);
    let top = vals[0].max(0.0).sqrt();
    let dev: DVector<f64> = vecs.column(0) * top;
    Ok((mean, dev.iter().copied().collect()))
}

/// Evaluates targets on every row (`N × m`).
pub fn target_table(targets: &[Target], rows: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let mut out = DMatrix::zeros(rows.nrows(), targets.len());
    let mut row = vec![0.0; rows.ncols()];
    for r in 0..rows.nrows() {
        for (c, v) in row.iter_mut().enumerate() {
            *v = rows[(r, c)];
        }
        for (t, target) in targets.iter().enumerate() {
            out[(r, t)] = target.eval(&row)?;
        }
    }
    if !crate::linalg::all_finite(&out) {
        return Err(Error::NonFinite("target values".into()));
    }
    Ok(out)
}

/// Training pass over the full training set: covariances of the learned
/// features and `Θ_j` for each target.
pub fn fit_statistics(
    model: &TrainedModel,
    pairs: &PairDataset,
    targets: &[Target],
    direction: Direction,
) -> Result<InferenceModel> {
    let rows = match direction {
        Direction::YToX => &pairs.x,
        Direction::XToY => &pairs.y,
    };
    let values = target_table(targets, rows)?;
    fit_statistics_with_values(model, pairs, &values, targets.to_vec(), direction)
}

/// As [`fit_statistics`], with target values supplied per sample.
pub fn fit_statistics_with_values(
    model: &TrainedModel,
    pairs: &PairDataset,
    target_values: &DMatrix<f64>,
    targets: Vec<Target>,
    direction: Direction,
) -> Result<InferenceModel> {
    if pairs.is_empty() {
        return Err(Error::InvalidParameter("empty training set".into()));
    }
    if target_values.ncols() != targets.len() {
        return Err(Error::Dimension(format!("{} value columns for {} targets", target_values.ncols(), targets.len())));
    }
    let (f, g) = model.features(pairs)?;
    InferenceModel::fit_from_features(&f, &g, target_values, targets, direction, model.config.inverse_mode)?
        .attach(model)
}
