//! Feedforward feature networks with exact backpropagation, and the analytic
//! gradient of the loss with respect to the feature batches.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::canonical::{stable_inverse, FeatureBatch, InverseMode};
use crate::linalg::{matrix_serde, vector_serde};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, z: &mut DMatrix<f64>) {
        if self == Activation::Tanh {
            z.apply(|v| *v = v.tanh());
        }
    }
}

/// One affine layer `z = h W + b` followed by an activation. `weights` is
/// `in × out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    #[serde(with = "matrix_serde")]
    pub weights: DMatrix<f64>,
    #[serde(with = "vector_serde")]
    pub bias: DVector<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn input_dim(&self) -> usize {
        self.weights.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.ncols()
    }

    fn forward(&self, h: &DMatrix<f64>) -> DMatrix<f64> {
        let mut z = h * &self.weights;
        for (j, b) in self.bias.iter().enumerate() {
            z.column_mut(j).add_scalar_mut(*b);
        }
        self.activation.apply(&mut z);
        z
    }
}

/// Shape and initialization of a feature network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    pub hidden_activation: Activation,
    pub output_activation: Activation,
    /// Multiplier on the Glorot bound `√(6 / (fan_in + fan_out))`.
    pub init_gain: f64,
}

impl NetworkSpec {
    /// Two tanh hidden layers of width 64 and a tanh output layer.
    pub fn standard(input_dim: usize, output_dim: usize) -> Self {
        Self {
            input_dim,
            hidden: vec![64, 64],
            output_dim,
            hidden_activation: Activation::Tanh,
            output_activation: Activation::Tanh,
            init_gain: 1.0,
        }
    }
}

/// Maps raw data rows to `k0` real features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureNetwork {
    layers: Vec<Layer>,
}

/// Per-layer parameter gradients, shaped like the owning network.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub layers: Vec<LayerGradient>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradient {
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl GradientSet {
    /// Parameter gradients in the same order as [`FeatureNetwork::params_mut`].
    pub fn slices(&self) -> impl Iterator<Item = &[f64]> {
        self.layers.iter().flat_map(|l| [l.weights.as_slice(), l.bias.as_slice()])
    }

    pub fn max_abs(&self) -> f64 {
        self.slices().flat_map(|s| s.iter()).fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Layer inputs recorded by a forward pass; `activations[0]` is the batch and
/// `activations[i + 1]` is the output of layer `i`.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    activations: Vec<DMatrix<f64>>,
}

impl ForwardTrace {
    pub fn output(&self) -> &DMatrix<f64> {
        self.activations.last().expect("trace holds the input at least")
    }
}

impl FeatureNetwork {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        let net = Self { layers };
        net.validate()?;
        Ok(net)
    }

    /// Checks layer shape compatibility; used after deserialization.
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Dimension("network has no layers".into()));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.bias.len() != l.output_dim() {
                return Err(Error::Dimension(format!(
                    "layer {i}: bias has {} entries for {} outputs",
                    l.bias.len(),
                    l.output_dim()
                )));
            }
            if i > 0 && self.layers[i - 1].output_dim() != l.input_dim() {
                return Err(Error::Dimension(format!(
                    "layer {i} expects {} inputs but layer {} produces {}",
                    l.input_dim(),
                    i - 1,
                    self.layers[i - 1].output_dim()
                )));
            }
        }
        Ok(())
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init<R: Rng + ?Sized>(spec: &NetworkSpec, rng: &mut R) -> Result<Self> {
        if spec.input_dim == 0 || spec.output_dim == 0 || spec.hidden.contains(&0) {
            return Err(Error::InvalidParameter("network dimensions must be positive".into()));
        }
        let mut dims = vec![spec.input_dim];
        dims.extend(&spec.hidden);
        dims.push(spec.output_dim);
        let n_layers = dims.len() - 1;
        let layers = (0..n_layers)
            .map(|i| {
                let (fan_in, fan_out) = (dims[i], dims[i + 1]);
                let bound = spec.init_gain * (6.0 / (fan_in + fan_out) as f64).sqrt();
                // row-major fill keeps the draw order independent of storage layout
                let data: Vec<f64> = (0..fan_in * fan_out).map(|_| rng.random_range(-1.0..=1.0) * bound).collect();
                Layer {
                    weights: DMatrix::from_row_slice(fan_in, fan_out, &data),
                    bias: DVector::zeros(fan_out),
                    activation: if i + 1 == n_layers { spec.output_activation } else { spec.hidden_activation },
                }
            })
            .collect();
        Self::new(layers)
    }

    /// A single identity layer: features are the raw inputs.
    pub fn identity(dim: usize) -> Self {
        Self {
            layers: vec![Layer {
                weights: DMatrix::identity(dim, dim),
                bias: DVector::zeros(dim),
                activation: Activation::Identity,
            }],
        }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(Layer::output_dim).unwrap_or(0)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Mutable parameter slices: weights then bias, layer by layer.
    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut [f64]> {
        self.layers.iter_mut().flat_map(|l| [l.weights.as_mut_slice(), l.bias.as_mut_slice()])
    }

    pub fn params(&self) -> impl Iterator<Item = &[f64]> {
        self.layers.iter().flat_map(|l| [l.weights.as_slice(), l.bias.as_slice()])
    }

    fn check_input(&self, batch: &DMatrix<f64>) -> Result<()> {
        if batch.ncols() != self.input_dim() {
            return Err(Error::Dimension(format!(
                "batch has {} columns, network expects {}",
                batch.ncols(),
                self.input_dim()
            )));
        }
        if batch.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("network input".into()));
        }
        Ok(())
    }

    pub fn forward_trace(&self, batch: &DMatrix<f64>) -> Result<ForwardTrace> {
        self.check_input(batch)?;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(batch.clone());
        for layer in &self.layers {
            let next = layer.forward(activations.last().unwrap());
            activations.push(next);
        }
        Ok(ForwardTrace { activations })
    }

    /// Features of every row of `batch` (`N × input_dim`).
    pub fn forward(&self, batch: &DMatrix<f64>) -> Result<FeatureBatch> {
        self.check_input(batch)?;
        let mut h = batch.clone();
        for layer in &self.layers {
            h = layer.forward(&h);
        }
        FeatureBatch::new(h)
    }

    /// Gradients of a scalar loss with respect to every parameter, given the
    /// gradient `upstream` of that loss with respect to the output features.
    pub fn backprop(&self, batch: &DMatrix<f64>, upstream: &DMatrix<f64>) -> Result<GradientSet> {
        let trace = self.forward_trace(batch)?;
        self.backprop_trace(&trace, upstream)
    }

    pub fn backprop_trace(&self, trace: &ForwardTrace, upstream: &DMatrix<f64>) -> Result<GradientSet> {
        let out = trace.output();
        if upstream.shape() != out.shape() {
            return Err(Error::Dimension(format!(
                "upstream gradient is {:?}, features are {:?}",
                upstream.shape(),
                out.shape()
            )));
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut delta = upstream.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let output = &trace.activations[i + 1];
            if layer.activation == Activation::Tanh {
                delta.zip_apply(output, |d, a| *d *= 1.0 - a * a);
            }
            let input = &trace.activations[i];
            let weights = input.tr_mul(&delta);
            let bias = delta.row_sum().transpose();
            if i > 0 {
                delta = &delta * layer.weights.transpose();
            }
            grads.push(LayerGradient { weights, bias });
        }
        grads.reverse();
        Ok(GradientSet { layers: grads })
    }
}

/// Loss `k0 − Tr(K⁺AᵀL⁺A)` of two feature batches together with its
/// gradients with respect to every entry of `F` and `G`.
///
/// With `T = L⁺ A K⁺` the gradients are
///
/// ```text
/// ∂C/∂F = −(2/N) (G T − F K⁺ Aᵀ T)
/// ∂C/∂G = −(2/N) (F Tᵀ − G T Aᵀ L⁺)
/// ```
///
/// using the same stabilized inverses as the loss value.
pub fn loss_and_feature_grads(
    f: &FeatureBatch,
    g: &FeatureBatch,
    k0: usize,
    mode: InverseMode,
) -> Result<(f64, DMatrix<f64>, DMatrix<f64>)> {
    let t = crate::canonical::covariances(f, g)?;
    if k0 == 0 || t.k_f() != k0 || t.k_g() != k0 {
        return Err(Error::Dimension(format!("k0 = {k0} for {} / {} features", t.k_f(), t.k_g())));
    }
    let k_inv = stable_inverse(&t.k, mode)?;
    let l_inv = stable_inverse(&t.l, mode)?;
    let n = f.n_samples() as f64;
    let ka = &k_inv * t.a.transpose(); // K⁺Aᵀ
    let la = &l_inv * &t.a; // L⁺A
    let relevance = ka.component_mul(&la.transpose()).sum();
    let loss = k0 as f64 - relevance;
    if !loss.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    let tm = &la * &k_inv; // L⁺AK⁺
    let fv = f.values();
    let gv = g.values();
    let scale = -2.0 / n;
    let df = (gv * &tm - fv * (&ka * &tm)) * scale;
    let dg = (fv * tm.transpose() - gv * (&tm * t.a.transpose() * &l_inv)) * scale;
    Ok((loss, df, dg))
}
