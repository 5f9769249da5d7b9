//! Finite-difference verification of analytic gradients.
//!
//! Central differences at double precision: with step `h = 1e-5` the
//! truncation and roundoff error of the numeric gradient sit far below the
//! 1e-3 relative-error budget, so any disagreement flags a real backward-pass
//! bug rather than numerics. Intended for small networks; cost grows with
//! the number of perturbed components.

use crate::error::Result;
use crate::network::{ce_loss_and_seed, DifferentiableClassifier, Network};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Relative error with a floor, so near-zero pairs (e.g. gradients behind a
/// dead relu) compare on absolute terms instead of dividing by zero.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-4)
}

/// Largest componentwise relative error between two gradient vectors.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| rel_err(*a, *n))
        .fold(0.0, f64::max)
}

/// Mean cross-entropy loss only (no gradients).
pub fn loss_only(
    clf: &dyn DifferentiableClassifier<f64>,
    batch: &Tensor<f64>,
    labels: &[usize],
) -> Result<f64> {
    let (probs, logits) = clf.probs_and_logits(batch)?;
    Ok(ce_loss_and_seed(&logits, &probs, labels)?.0)
}

/// Scalar objective `sum(seed * logits)`, the quantity whose input gradient
/// `input_grad_from_logit_seed` computes.
pub fn seed_objective(
    clf: &dyn DifferentiableClassifier<f64>,
    batch: &Tensor<f64>,
    seed: &Tensor<f64>,
) -> Result<f64> {
    let (_, logits) = clf.probs_and_logits(batch)?;
    Ok(logits
        .data()
        .iter()
        .zip(seed.data())
        .map(|(z, s)| z * s)
        .sum())
}

/// Checks the loss gradient with respect to the input batch.
///
/// Returns the max componentwise relative error between the analytic input
/// gradient and central finite differences.
pub fn check_loss_input_grad(
    clf: &dyn DifferentiableClassifier<f64>,
    batch: &Tensor<f64>,
    labels: &[usize],
    h: f64,
) -> Result<f64> {
    let (_, grad) = clf.loss_and_input_grad(batch, labels)?;
    let analytic: Vec<f64> = grad.data().to_vec();
    let mut numeric = Vec::with_capacity(analytic.len());
    let mut probe = batch.clone();
    for i in 0..probe.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = loss_only(clf, &probe, labels)?;
        probe.data_mut()[i] = orig - h;
        let down = loss_only(clf, &probe, labels)?;
        probe.data_mut()[i] = orig;
        numeric.push((up - down) / (2.0 * h));
    }
    Ok(max_rel_err(&analytic, &numeric))
}

/// Checks loss gradients with respect to every weight and bias.
///
/// Parameters are perturbed in place and restored exactly; returns the max
/// relative error across all parameter tensors.
pub fn check_loss_param_grads(
    net: &mut Network<f64>,
    batch: &Tensor<f64>,
    labels: &[usize],
    h: f64,
) -> Result<f64> {
    fn select(p: &mut crate::network::LayerParams<f64>, which: usize) -> &mut [f64] {
        if which == 0 {
            p.weights.data_mut()
        } else {
            p.bias.data_mut()
        }
    }
    let (_, grads) = net.backward(batch, labels)?;
    let mut worst = 0.0f64;
    for layer in 0..net.layers().len() {
        let Some(g) = grads.layers[layer].as_ref() else {
            continue;
        };
        for which in 0..2 {
            let analytic = if which == 0 {
                g.weights.data().to_vec()
            } else {
                g.bias.data().to_vec()
            };
            for i in 0..analytic.len() {
                let p = net.layer_params_mut(layer).expect("grads imply params");
                let orig = select(p, which)[i];
                select(p, which)[i] = orig + h;
                let up = loss_only(net, batch, labels)?;
                let p = net.layer_params_mut(layer).expect("grads imply params");
                select(p, which)[i] = orig - h;
                let down = loss_only(net, batch, labels)?;
                let p = net.layer_params_mut(layer).expect("grads imply params");
                select(p, which)[i] = orig;
                worst = worst.max(rel_err(analytic[i], (up - down) / (2.0 * h)));
            }
        }
    }
    Ok(worst)
}

/// Checks `input_grad_from_logit_seed` against finite differences of
/// `sum(seed * logits)`.
pub fn check_seed_input_grad(
    clf: &dyn DifferentiableClassifier<f64>,
    batch: &Tensor<f64>,
    seed: &Tensor<f64>,
    h: f64,
) -> Result<f64> {
    let analytic = clf.input_grad_from_logit_seed(batch, seed)?;
    let analytic: Vec<f64> = analytic.data().to_vec();
    let mut numeric = Vec::with_capacity(analytic.len());
    let mut probe = batch.clone();
    for i in 0..probe.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = seed_objective(clf, &probe, seed)?;
        probe.data_mut()[i] = orig - h;
        let down = seed_objective(clf, &probe, seed)?;
        probe.data_mut()[i] = orig;
        numeric.push((up - down) / (2.0 * h));
    }
    Ok(max_rel_err(&analytic, &numeric))
}
