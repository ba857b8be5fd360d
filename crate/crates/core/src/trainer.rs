//! Training of the two feature networks against the relevance loss.
//!
//! Each epoch draws a fresh permutation of the training rows from the run
//! seed, walks it in mini-batches, and applies one optimizer step per batch.
//! After every epoch the loss is evaluated on the full training set and on
//! the test set; the test set is only ever read in that monitoring phase,
//! which [`AuditReport`] records.

use std::cell::Cell;
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::canonical::{canonical_directions, covariances, loss, CovarianceTriple, InverseMode};
use crate::datasets::PairDataset;
use crate::inference::InferenceModel;
use crate::neural::{loss_and_feature_grads, Activation, FeatureNetwork, NetworkSpec};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Optimizer {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    GradientDescent,
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// How the Y-side features are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum YFeatures {
    /// A trainable network, like the X side.
    Network,
    /// The raw Y columns, frozen (e.g. one-hot labels as a complete basis).
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub k0: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    pub inverse_mode: InverseMode,
    pub optimizer: Optimizer,
    pub hidden: Vec<usize>,
    pub init_gain: f64,
    pub y_features: YFeatures,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            k0: 3,
            batch_size: 512,
            learning_rate: 0.001,
            epochs: 100,
            seed: 0,
            inverse_mode: InverseMode::default(),
            optimizer: Optimizer::default(),
            hidden: vec![64, 64],
            init_gain: 1.0,
            y_features: YFeatures::Network,
        }
    }
}

impl TrainConfig {
    /// Rejects invalid settings; returns non-fatal warnings.
    pub fn validate(&self) -> Result<Vec<String>> {
        if self.k0 == 0 {
            return Err(Error::InvalidParameter("k0 must be ≥ 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidParameter("batch size must be ≥ 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidParameter(format!("learning rate {}", self.learning_rate)));
        }
        let mut warnings = Vec::new();
        if self.batch_size < 10 * self.k0 {
            warnings.push(format!(
                "batch size {} is below 10·k0 = {}; learned features may not generalize to larger batches",
                self.batch_size,
                10 * self.k0
            ));
        }
        Ok(warnings)
    }

    fn network_spec(&self, input_dim: usize) -> NetworkSpec {
        NetworkSpec {
            input_dim,
            hidden: self.hidden.clone(),
            output_dim: self.k0,
            hidden_activation: Activation::Tanh,
            output_activation: Activation::Tanh,
            init_gain: self.init_gain,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_loss: f64,
}

/// Accounting of reads from the test set, split by training phase.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditReport {
    pub test_bytes_read_during_updates: u64,
    pub test_bytes_read_during_monitoring: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Update,
    Monitor,
}

/// Gatekeeper for the test set: every read goes through it and is charged to
/// the current phase.
struct TestSetGuard<'a> {
    data: &'a PairDataset,
    phase: Cell<Phase>,
    update_bytes: Cell<u64>,
    monitor_bytes: Cell<u64>,
}

impl<'a> TestSetGuard<'a> {
    fn new(data: &'a PairDataset) -> Self {
        Self { data, phase: Cell::new(Phase::Update), update_bytes: Cell::new(0), monitor_bytes: Cell::new(0) }
    }

    fn read(&self) -> &'a PairDataset {
        let bytes = ((self.data.x.len() + self.data.y.len()) * std::mem::size_of::<f64>()) as u64;
        match self.phase.get() {
            Phase::Update => self.update_bytes.set(self.update_bytes.get() + bytes),
            Phase::Monitor => self.monitor_bytes.set(self.monitor_bytes.get() + bytes),
        }
        self.data
    }

    fn report(&self) -> AuditReport {
        AuditReport {
            test_bytes_read_during_updates: self.update_bytes.get(),
            test_bytes_read_during_monitoring: self.monitor_bytes.get(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub net_f: FeatureNetwork,
    pub net_g: FeatureNetwork,
    pub config: TrainConfig,
    pub history: Vec<EpochRecord>,
    pub audit: AuditReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inference: Option<InferenceModel>,
}

impl TrainedModel {
    /// Feature values of both networks on a dataset.
    pub fn features(
        &self,
        pairs: &PairDataset,
    ) -> Result<(crate::canonical::FeatureBatch, crate::canonical::FeatureBatch)> {
        Ok((self.net_f.forward(&pairs.x)?, self.net_g.forward(&pairs.y)?))
    }

    /// Covariance triple of the learned features over a whole dataset.
    pub fn covariances(&self, pairs: &PairDataset) -> Result<CovarianceTriple> {
        let (f, g) = self.features(pairs)?;
        covariances(&f, &g)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&ModelFileRef { format: MODEL_FORMAT, version: MODEL_VERSION, model: self })?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(s)?;
        if file.format != MODEL_FORMAT {
            return Err(Error::Parse(format!("not a model file (format {:?})", file.format)));
        }
        if file.version != MODEL_VERSION {
            return Err(Error::Parse(format!("unsupported model version {}", file.version)));
        }
        let mut model = file.model;
        model.net_f.validate()?;
        model.net_g.validate()?;
        if model.net_f.output_dim() != model.config.k0 || model.net_g.output_dim() != model.config.k0 {
            return Err(Error::Dimension(format!(
                "networks produce {} / {} features for k0 = {}",
                model.net_f.output_dim(),
                model.net_g.output_dim(),
                model.config.k0
            )));
        }
        if let Some(inf) = model.inference.take() {
            model.inference = Some(inf.attach(&model)?);
        }
        Ok(model)
    }

    /// Writes the model JSON via a temporary file and rename.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, self.to_json()?)?;
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

const MODEL_FORMAT: &str = "relfeat-model";
const MODEL_VERSION: u32 = 1;

#[derive(Serialize)]
struct ModelFileRef<'a> {
    format: &'a str,
    version: u32,
    #[serde(flatten)]
    model: &'a TrainedModel,
}

#[derive(Deserialize)]
struct ModelFile {
    format: String,
    version: u32,
    #[serde(flatten)]
    model: TrainedModel,
}

/// First and second moment estimates for one network's parameters.
struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl AdamState {
    fn new(net: &FeatureNetwork) -> Self {
        let shapes: Vec<usize> = net.params().map(<[f64]>::len).collect();
        Self {
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }
}

fn apply_update(
    net: &mut FeatureNetwork,
    grads: &crate::neural::GradientSet,
    state: &mut AdamState,
    optimizer: Optimizer,
    lr: f64,
) {
    match optimizer {
        Optimizer::GradientDescent => {
            for (p, g) in net.params_mut().zip(grads.slices()) {
                for (pi, gi) in p.iter_mut().zip(g) {
                    *pi -= lr * gi;
                }
            }
        }
        Optimizer::Adam { beta1, beta2, eps } => {
            state.t += 1;
            let c1 = 1.0 - beta1.powi(state.t);
            let c2 = 1.0 - beta2.powi(state.t);
            for (((p, g), m), v) in net.params_mut().zip(grads.slices()).zip(&mut state.m).zip(&mut state.v) {
                for i in 0..p.len() {
                    m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                    v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                    let m_hat = m[i] / c1;
                    let v_hat = v[i] / c2;
                    p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
    }
}

fn dataset_loss(net_f: &FeatureNetwork, net_g: &FeatureNetwork, pairs: &PairDataset, cfg: &TrainConfig) -> Result<f64> {
    let f = net_f.forward(&pairs.x)?;
    let g = net_g.forward(&pairs.y)?;
    loss(&covariances(&f, &g)?, cfg.k0, cfg.inverse_mode)
}

/// Trains both feature networks. The test set is used only for the per-epoch
/// test loss.
pub fn train(pairs: &PairDataset, test_pairs: &PairDataset, cfg: &TrainConfig) -> Result<TrainedModel> {
    for w in cfg.validate()? {
        log::warn!("{w}");
    }
    if pairs.is_empty() || test_pairs.is_empty() {
        return Err(Error::InvalidParameter("training and test sets must be non-empty".into()));
    }
    if pairs.x_dim() != test_pairs.x_dim() || pairs.y_dim() != test_pairs.y_dim() {
        return Err(Error::Dimension("training and test sets have different column counts".into()));
    }
    if cfg.y_features == YFeatures::Identity && pairs.y_dim() != cfg.k0 {
        return Err(Error::Dimension(format!(
            "identity Y features need y_dim = k0, got {} and {}",
            pairs.y_dim(),
            cfg.k0
        )));
    }

    let mut init_f = ChaCha8Rng::seed_from_u64(cfg.seed);
    init_f.set_stream(0);
    let mut init_g = ChaCha8Rng::seed_from_u64(cfg.seed);
    init_g.set_stream(1);
    let mut shuffle = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle.set_stream(2);

    let mut net_f = FeatureNetwork::init(&cfg.network_spec(pairs.x_dim()), &mut init_f)?;
    let mut net_g = match cfg.y_features {
        YFeatures::Network => FeatureNetwork::init(&cfg.network_spec(pairs.y_dim()), &mut init_g)?,
        YFeatures::Identity => FeatureNetwork::identity(pairs.y_dim()),
    };
    let mut adam_f = AdamState::new(&net_f);
    let mut adam_g = AdamState::new(&net_g);

    let guard = TestSetGuard::new(test_pairs);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let batch_size = cfg.batch_size.min(pairs.len());

    for epoch in 0..cfg.epochs {
        guard.phase.set(Phase::Update);
        order.shuffle(&mut shuffle);
        for (b, rows) in order.chunks(batch_size).enumerate() {
            if rows.len() < batch_size && rows.len() < cfg.k0 {
                continue;
            }
            let (xb, yb) = pairs.gather(rows);
            let trace_f = net_f.forward_trace(&xb)?;
            let trace_g = net_g.forward_trace(&yb)?;
            let f = crate::canonical::FeatureBatch::new(trace_f.output().clone())
                .map_err(|e| Error::NonFinite(format!("epoch {epoch} batch {b}: X features: {e}")))?;
            let g = crate::canonical::FeatureBatch::new(trace_g.output().clone())
                .map_err(|e| Error::NonFinite(format!("epoch {epoch} batch {b}: Y features: {e}")))?;
            let (batch_loss, df, dg) = loss_and_feature_grads(&f, &g, cfg.k0, cfg.inverse_mode)?;
            if !batch_loss.is_finite() || !crate::linalg::all_finite(&df) || !crate::linalg::all_finite(&dg) {
                return Err(Error::NonFinite(format!("epoch {epoch} batch {b}: loss {batch_loss}")));
            }
            let grad_f = net_f.backprop_trace(&trace_f, &df)?;
            apply_update(&mut net_f, &grad_f, &mut adam_f, cfg.optimizer, cfg.learning_rate);
            if cfg.y_features == YFeatures::Network {
                let grad_g = net_g.backprop_trace(&trace_g, &dg)?;
                apply_update(&mut net_g, &grad_g, &mut adam_g, cfg.optimizer, cfg.learning_rate);
            }
        }

        guard.phase.set(Phase::Monitor);
        let train_loss = dataset_loss(&net_f, &net_g, pairs, cfg)?;
        let test_loss = dataset_loss(&net_f, &net_g, guard.read(), cfg)?;
        if !train_loss.is_finite() || !test_loss.is_finite() {
            return Err(Error::NonFinite(format!("epoch {epoch}: train {train_loss}, test {test_loss}")));
        }
        log::debug!("epoch {epoch}: train loss {train_loss:.6}, test loss {test_loss:.6}");
        history.push(EpochRecord { epoch, train_loss, test_loss });
    }

    Ok(TrainedModel { net_f, net_g, config: cfg.clone(), history, audit: guard.report(), inference: None })
}

/// Loss of the learned features over the covariances of a whole dataset.
pub fn eval_loss(model: &TrainedModel, pairs: &PairDataset) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::InvalidParameter("empty dataset".into()));
    }
    dataset_loss(&model.net_f, &model.net_g, pairs, &model.config)
}

/// Learned spectrum and the maps from raw features to orthonormal canonical
/// variables (`F · w_f`, `G · w_g`).
#[derive(Debug, Clone, PartialEq)]
pub struct LearnedSpectrum {
    /// Singular values, descending.
    pub etas: Vec<f64>,
    pub w_f: DMatrix<f64>,
    pub w_g: DMatrix<f64>,
}

impl LearnedSpectrum {
    /// Squared singular values (relevances).
    pub fn relevances(&self) -> Vec<f64> {
        self.etas.iter().map(|e| e * e).collect()
    }

    /// Canonical X-variables on the rows of `x`.
    pub fn x_variables(&self, model: &TrainedModel, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Ok(model.net_f.forward(x)?.values() * &self.w_f)
    }

    /// Canonical Y-variables on the rows of `y`.
    pub fn y_variables(&self, model: &TrainedModel, y: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Ok(model.net_g.forward(y)?.values() * &self.w_g)
    }
}

/// Diagonalizes `K⁺AᵀL⁺A` on the dataset covariances and keeps the leading
/// `k_report` canonical pairs.
pub fn extract_canonical(model: &TrainedModel, pairs: &PairDataset, k_report: usize) -> Result<LearnedSpectrum> {
    let k0 = model.config.k0;
    if pairs.len() < 10 * k0 {
        return Err(Error::InvalidParameter(format!(
            "need at least 10·k0 = {} samples for a stable spectrum, got {}",
            10 * k0,
            pairs.len()
        )));
    }
    if k_report == 0 || k_report > k0 {
        return Err(Error::InvalidParameter(format!("k_report = {k_report} outside 1..={k0}")));
    }
    let t = model.covariances(pairs)?;
    let dirs = canonical_directions(&t, model.config.inverse_mode)?;
    Ok(LearnedSpectrum {
        etas: dirs.etas.iter().take(k_report).copied().collect(),
        w_f: dirs.w_f.columns(0, k_report).into_owned(),
        w_g: dirs.w_g.columns(0, k_report).into_owned(),
    })
}
