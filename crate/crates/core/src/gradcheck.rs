//! Finite-difference checks of the analytic gradients.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::canonical::{covariances, loss, FeatureBatch, InverseMode};
use crate::neural::{loss_and_feature_grads, Activation, FeatureNetwork, NetworkSpec};
use crate::Result;

/// Initial step of the extrapolation tableau.
pub const FD_STEP: f64 = 1e-3;
/// Gradient entries smaller than this are compared absolutely.
pub const REL_FLOOR: f64 = 1e-5;

/// Ridders' extrapolation of central differences: the step shrinks by 1.4
/// per column of a Neville tableau and the estimate with the smallest
/// internal error is kept. Returns `(derivative, error estimate)`.
pub fn ridders<E>(
    mut eval: impl FnMut(f64) -> std::result::Result<f64, E>,
    h0: f64,
) -> std::result::Result<(f64, f64), E> {
    const SHRINK: f64 = 1.4;
    const SHRINK2: f64 = SHRINK * SHRINK;
    const N: usize = 10;
    let mut table = [[0.0f64; N]; N];
    let mut h = h0;
    table[0][0] = (eval(h)? - eval(-h)?) / (2.0 * h);
    let mut best = table[0][0];
    let mut err = f64::INFINITY;
    for i in 1..N {
        h /= SHRINK;
        table[0][i] = (eval(h)? - eval(-h)?) / (2.0 * h);
        let mut fac = SHRINK2;
        for j in 1..=i {
            table[j][i] = (table[j - 1][i] * fac - table[j - 1][i - 1]) / (fac - 1.0);
            fac *= SHRINK2;
            let e = (table[j][i] - table[j - 1][i]).abs().max((table[j][i] - table[j - 1][i - 1]).abs());
            if e <= err {
                err = e;
                best = table[j][i];
            }
        }
        if (table[i][i] - table[i - 1][i - 1]).abs() >= 2.0 * err {
            break;
        }
    }
    Ok((best, err))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradCheck {
    pub seed: u64,
    pub n_params: usize,
    /// Ill-conditioned draws skipped before this instance.
    pub rejected: usize,
    pub loss: f64,
    /// Worst relative error over all network parameters.
    pub max_rel_params: f64,
    /// Worst relative error of the loss-vs-feature gradient.
    pub max_rel_features: f64,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Largest condition number of `K` or `L` accepted for a check instance.
/// Beyond it central differences lose too many digits to serve as an oracle.
pub const MAX_CONDITION: f64 = 1e3;

fn condition(m: &DMatrix<f64>) -> f64 {
    let (vals, _) = crate::linalg::sym_eigen_desc(m);
    vals[0] / vals[vals.len() - 1].max(f64::MIN_POSITIVE)
}

/// A random pair of small networks with a correlated batch. Draws whose
/// feature covariances are too ill-conditioned are skipped; the number of
/// skipped draws is returned last.
pub fn random_instance(
    seed: u64,
) -> Result<(FeatureNetwork, FeatureNetwork, DMatrix<f64>, DMatrix<f64>, usize, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rejected = 0;
    loop {
        let k0 = rng.random_range(1..=3);
        let dx = rng.random_range(k0..=k0 + 2);
        let dy = rng.random_range(k0..=k0 + 2);
        let n = rng.random_range(10 * k0..=10 * k0 + 20);
        let hidden: Vec<usize> = (0..rng.random_range(1..=2)).map(|_| rng.random_range(k0.max(3)..=8)).collect();
        let spec = |input_dim| NetworkSpec {
            input_dim,
            hidden: hidden.clone(),
            output_dim: k0,
            hidden_activation: Activation::Tanh,
            output_activation: Activation::Tanh,
            init_gain: 1.0,
        };
        let net_f = FeatureNetwork::init(&spec(dx), &mut rng)?;
        let net_g = FeatureNetwork::init(&spec(dy), &mut rng)?;
        let x = DMatrix::from_fn(n, dx, |_, _| rng.random::<f64>() * 2.0 - 1.0);
        let mix = DMatrix::from_fn(dx, dy, |_, _| rng.random::<f64>() * 2.0 - 1.0);
        let noise = DMatrix::from_fn(n, dy, |_, _| 0.3 * (rng.random::<f64>() - 0.5));
        let y = &x * mix + noise;
        let t = covariances(&net_f.forward(&x)?, &net_g.forward(&y)?)?;
        if condition(&t.k) <= MAX_CONDITION && condition(&t.l) <= MAX_CONDITION {
            return Ok((net_f, net_g, x, y, k0, rejected));
        }
        rejected += 1;
    }
}

fn batch_loss(
    net_f: &FeatureNetwork,
    net_g: &FeatureNetwork,
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    k0: usize,
    mode: InverseMode,
) -> Result<f64> {
    loss(&covariances(&net_f.forward(x)?, &net_g.forward(y)?)?, k0, mode)
}

fn perturbed(net: &FeatureNetwork, slot: usize, idx: usize, delta: f64) -> FeatureNetwork {
    let mut out = net.clone();
    out.params_mut().nth(slot).expect("slot")[idx] += delta;
    out
}

/// Compares backpropagated and finite-difference gradients on one random
/// instance.
pub fn check_instance(seed: u64, mode: InverseMode) -> Result<GradCheck> {
    let (net_f, net_g, x, y, k0, rejected) = random_instance(seed)?;
    let f = net_f.forward(&x)?;
    let g = net_g.forward(&y)?;
    let (l0, df, dg) = loss_and_feature_grads(&f, &g, k0, mode)?;

    let mut max_feat: f64 = 0.0;
    for (which, grad) in [(0, &df), (1, &dg)] {
        for r in 0..grad.nrows() {
            for c in 0..grad.ncols() {
                let eval = |d: f64| -> Result<f64> {
                    let (mut fv, mut gv) = (f.values().clone(), g.values().clone());
                    if which == 0 {
                        fv[(r, c)] += d;
                    } else {
                        gv[(r, c)] += d;
                    }
                    loss(&covariances(&FeatureBatch::new(fv)?, &FeatureBatch::new(gv)?)?, k0, mode)
                };
                let numeric = ridders(eval, FD_STEP)?.0;
                max_feat = max_feat.max(relative_error(grad[(r, c)], numeric));
            }
        }
    }

    let grad_f = net_f.backprop(&x, &df)?;
    let grad_g = net_g.backprop(&y, &dg)?;
    let mut max_param: f64 = 0.0;
    for (side, grads) in [(0, &grad_f), (1, &grad_g)] {
        for (slot, analytic) in grads.slices().enumerate() {
            for (idx, &a) in analytic.iter().enumerate() {
                let eval = |d: f64| {
                    if side == 0 {
                        batch_loss(&perturbed(&net_f, slot, idx, d), &net_g, &x, &y, k0, mode)
                    } else {
                        batch_loss(&net_f, &perturbed(&net_g, slot, idx, d), &x, &y, k0, mode)
                    }
                };
                let numeric = ridders(eval, FD_STEP)?.0;
                max_param = max_param.max(relative_error(a, numeric));
            }
        }
    }

    Ok(GradCheck {
        seed,
        n_params: net_f.param_count() + net_g.param_count(),
        rejected,
        loss: l0,
        max_rel_params: max_param,
        max_rel_features: max_feat,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_instances_pass() {
        for seed in 0..20 {
            let r = check_instance(seed, InverseMode::default()).unwrap();
            assert!(r.max_rel_params < 1e-4, "{r:?}");
            assert!(r.max_rel_features < 1e-5, "{r:?}");
        }
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!((relative_error(0.0, 1e-7) - 1e-2).abs() < 1e-12);
    }
}
