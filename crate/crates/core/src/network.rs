//! Feed-forward network: construction, forward/backward passes, and the
//! classifier trait shared with the merged-model attack surface.
//!
//! Mode semantics: the public `forward` / `backward` / input-gradient entry
//! points run in evaluation mode, where dropout is the identity, so results
//! are deterministic and exactly differentiable (attacks and gradient checks
//! rely on this). Training activates dropout through a crate-internal path.
//!
//! The cross-entropy loss is fused with the terminal softmax: the loss is
//! computed from logits via log-sum-exp and the backward pass is seeded at
//! the logits with `(probs - onehot) / batch`, which is both faster and
//! numerically safer than differentiating through softmax explicitly.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::layer::{self, ConvDims, LayerSpec, PoolDims};
use crate::rng;
use crate::tensor::{Scalar, Tensor};

/// Weight/bias pair for one parameterized layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<F: Scalar = f32> {
    pub weights: Tensor<F>,
    pub bias: Tensor<F>,
}

/// Parameter gradients for one layer, shapes matching [`LayerParams`].
#[derive(Clone, Debug)]
pub struct LayerGrads<F: Scalar = f32> {
    pub weights: Tensor<F>,
    pub bias: Tensor<F>,
}

/// Full gradient bundle from a backward pass.
///
/// `layers` is parallel to the network's layers; entries are `None` for
/// parameterless layers. `input` is the loss gradient with respect to the
/// input batch, which is what the attacks consume.
#[derive(Clone, Debug)]
pub struct Gradients<F: Scalar = f32> {
    pub input: Tensor<F>,
    pub layers: Vec<Option<LayerGrads<F>>>,
}

enum Aux<F> {
    None,
    PoolIdx(Vec<u32>),
    DropMask(Vec<F>),
}

/// Activations and per-layer bookkeeping from one forward pass.
pub(crate) struct Trace<F: Scalar> {
    /// `acts[0]` is the input; `acts[i + 1]` is the output of layer `i`.
    pub(crate) acts: Vec<Tensor<F>>,
    aux: Vec<Aux<F>>,
}

/// A feed-forward classifier built from a layer list.
///
/// Construction validates every layer against the propagated per-example
/// shape and initializes weights with fan-in-scaled uniform values
/// (`U(-sqrt(6/fan_in), sqrt(6/fan_in))`, biases zero) from the given seed.
#[derive(Clone, Debug)]
pub struct Network<F: Scalar = f32> {
    id: String,
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
    params: Vec<Option<LayerParams<F>>>,
    /// Per-example output shape of each layer.
    shapes: Vec<Vec<usize>>,
    num_classes: usize,
    /// Index into a trace's `acts` where the logits live (before a terminal
    /// softmax when present, the final activation otherwise).
    logits_act: usize,
}

impl<F: Scalar> Network<F> {
    pub fn new(
        id: impl Into<String>,
        input_shape: Vec<usize>,
        layers: Vec<LayerSpec>,
        seed: u64,
    ) -> Result<Self> {
        let id = id.into();
        if input_shape.is_empty() || input_shape.iter().any(|d| *d == 0) {
            return Err(Error::config(
                format!("network {id}"),
                format!("input shape {input_shape:?} must be non-empty with positive dims"),
            ));
        }
        if layers.is_empty() {
            return Err(Error::config(
                format!("network {id}"),
                "at least one layer is required",
            ));
        }
        let mut shapes = Vec::with_capacity(layers.len());
        let mut cur = input_shape.clone();
        for (i, spec) in layers.iter().enumerate() {
            let context = format!("network {id}, layer {i} ({})", spec.kind_name());
            spec.validate(&context)?;
            if matches!(spec, LayerSpec::Softmax) && i != layers.len() - 1 {
                return Err(Error::config(
                    context,
                    "softmax is only valid as the last layer",
                ));
            }
            cur = spec.output_shape(&cur, &context)?;
            shapes.push(cur.clone());
        }
        if cur.len() != 1 || cur[0] < 2 {
            return Err(Error::config(
                format!("network {id}"),
                format!("final layer must emit at least 2 class scores, got shape {cur:?}"),
            ));
        }
        let num_classes = cur[0];
        let logits_act = if matches!(layers.last(), Some(LayerSpec::Softmax)) {
            layers.len() - 1
        } else {
            layers.len()
        };

        let mut init_rng = rng::seeded(seed, "weight-init");
        let params = layers
            .iter()
            .map(|spec| {
                spec.param_shapes().map(|(w_shape, b_shape)| {
                    let fan_in = spec.fan_in().expect("parameterized layer has fan-in") as f64;
                    let limit = (6.0 / fan_in).sqrt();
                    let weights =
                        Tensor::from_fn(w_shape, || F::from_f64(init_rng.gen_range(-limit..limit)));
                    LayerParams {
                        weights,
                        bias: Tensor::zeros(b_shape),
                    }
                })
            })
            .collect();

        Ok(Network {
            id,
            input_shape,
            layers,
            params,
            shapes,
            num_classes,
            logits_act,
        })
    }

    /// Same architecture, freshly initialized parameters, new identity.
    pub fn with_fresh_params(&self, id: impl Into<String>, seed: u64) -> Network<F> {
        Network::new(id, self.input_shape.clone(), self.layers.clone(), seed)
            .expect("architecture already validated")
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn set_id(&mut self, id: impl Into<String>) {
        self.id = id.into();
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    /// Parameters of layer `i`, if it has any. Exposed for optimizers,
    /// serialization, and gradient-check tests.
    pub fn layer_params(&self, i: usize) -> Option<&LayerParams<F>> {
        self.params[i].as_ref()
    }

    pub fn layer_params_mut(&mut self, i: usize) -> Option<&mut LayerParams<F>> {
        self.params[i].as_mut()
    }

    pub fn param_count(&self) -> usize {
        self.params
            .iter()
            .flatten()
            .map(|p| p.weights.len() + p.bias.len())
            .sum()
    }

    /// Converts parameters to another float width (e.g. `f32` to `f64` for
    /// finite-difference gradient checks).
    pub fn convert<G: Scalar>(&self) -> Network<G> {
        Network {
            id: self.id.clone(),
            input_shape: self.input_shape.clone(),
            layers: self.layers.clone(),
            params: self
                .params
                .iter()
                .map(|p| {
                    p.as_ref().map(|p| LayerParams {
                        weights: p.weights.convert(),
                        bias: p.bias.convert(),
                    })
                })
                .collect(),
            shapes: self.shapes.clone(),
            num_classes: self.num_classes,
            logits_act: self.logits_act,
        }
    }

    fn check_batch(&self, batch: &Tensor<F>) -> Result<usize> {
        let shape = batch.shape();
        if shape.len() != self.input_shape.len() + 1 || shape[1..] != self.input_shape[..] {
            return Err(Error::shape(
                format!("network {}", self.id),
                format!(
                    "batch shape {:?} does not match input shape [n, {:?}]",
                    shape, self.input_shape
                ),
            ));
        }
        let n = shape[0];
        if n == 0 {
            return Err(Error::EmptyDataset {
                context: format!("network {} forward", self.id),
            });
        }
        Ok(n)
    }

    /// Runs all layers, recording activations. `dropout_rng` enables
    /// training-mode dropout; `None` is deterministic evaluation mode.
    pub(crate) fn forward_trace(
        &self,
        batch: &Tensor<F>,
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Trace<F>> {
        let n = self.check_batch(batch)?;
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        let mut aux = Vec::with_capacity(self.layers.len());
        acts.push(batch.clone());
        for (i, spec) in self.layers.iter().enumerate() {
            let x = acts.last().expect("at least the input activation");
            let mut batched_shape = Vec::with_capacity(self.shapes[i].len() + 1);
            batched_shape.push(n);
            batched_shape.extend_from_slice(&self.shapes[i]);
            let mut y = Tensor::zeros(batched_shape);
            let mut this_aux = Aux::None;
            match spec {
                LayerSpec::Dense {
                    inputs, outputs, ..
                } => {
                    let p = self.params[i].as_ref().expect("dense has params");
                    layer::dense_forward(
                        x.data(),
                        n,
                        *inputs,
                        *outputs,
                        p.weights.data(),
                        p.bias.data(),
                        y.data_mut(),
                    );
                }
                LayerSpec::Conv2d { .. } => {
                    let p = self.params[i].as_ref().expect("conv has params");
                    let d = self.conv_dims(i, n);
                    layer::conv2d_forward(
                        x.data(),
                        p.weights.data(),
                        p.bias.data(),
                        y.data_mut(),
                        &d,
                    );
                }
                LayerSpec::Relu => layer::relu_forward(x.data(), y.data_mut()),
                LayerSpec::MaxPool2d { .. } => {
                    let d = self.pool_dims(i, n);
                    let mut idx = vec![0u32; y.len()];
                    layer::maxpool_forward(x.data(), y.data_mut(), &mut idx, &d);
                    this_aux = Aux::PoolIdx(idx);
                }
                LayerSpec::Dropout { keep } => match dropout_rng.as_deref_mut() {
                    Some(rng) => {
                        let mut mask = vec![F::zero(); y.len()];
                        layer::dropout_forward_train(x.data(), *keep, rng, y.data_mut(), &mut mask);
                        this_aux = Aux::DropMask(mask);
                    }
                    None => y.data_mut().copy_from_slice(x.data()),
                },
                LayerSpec::Flatten => y.data_mut().copy_from_slice(x.data()),
                LayerSpec::Softmax => {
                    layer::softmax_forward(x.data(), n, self.num_classes, y.data_mut())
                }
            }
            y.ensure_finite(&format!(
                "network {}, layer {i} ({}) forward",
                self.id,
                spec.kind_name()
            ))?;
            acts.push(y);
            aux.push(this_aux);
        }
        Ok(Trace { acts, aux })
    }

    fn conv_dims(&self, i: usize, n: usize) -> ConvDims {
        let LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        } = self.layers[i]
        else {
            unreachable!("conv_dims called on non-conv layer");
        };
        let in_shape = if i == 0 {
            &self.input_shape
        } else {
            &self.shapes[i - 1]
        };
        ConvDims {
            n,
            h: in_shape[0],
            w: in_shape[1],
            c_in: in_channels,
            c_out: out_channels,
            kernel,
            stride,
            padding,
            oh: self.shapes[i][0],
            ow: self.shapes[i][1],
        }
    }

    fn pool_dims(&self, i: usize, n: usize) -> PoolDims {
        let LayerSpec::MaxPool2d { window, stride } = self.layers[i] else {
            unreachable!("pool_dims called on non-pool layer");
        };
        let in_shape = if i == 0 {
            &self.input_shape
        } else {
            &self.shapes[i - 1]
        };
        PoolDims {
            n,
            h: in_shape[0],
            w: in_shape[1],
            c: in_shape[2],
            window,
            stride,
            oh: self.shapes[i][0],
            ow: self.shapes[i][1],
        }
    }

    /// Backpropagates `seed` from the logits down to the input.
    ///
    /// Returns the input gradient; fills `param_grads` with per-layer
    /// parameter gradients when provided.
    pub(crate) fn backprop(
        &self,
        trace: &Trace<F>,
        seed: Tensor<F>,
        mut param_grads: Option<&mut Vec<Option<LayerGrads<F>>>>,
    ) -> Result<Tensor<F>> {
        let n = trace.acts[0].rows();
        let last = if self.logits_act == self.layers.len() {
            self.layers.len()
        } else {
            // Terminal softmax is fused with the loss seed; skip its kernel.
            self.layers.len() - 1
        };
        let mut dy = seed;
        for i in (0..last).rev() {
            let x = &trace.acts[i];
            let mut dx = Tensor::zeros(x.shape().to_vec());
            let mut grads_here = None;
            match &self.layers[i] {
                LayerSpec::Dense {
                    inputs, outputs, ..
                } => {
                    let p = self.params[i].as_ref().expect("dense has params");
                    let mut g = param_grads.as_ref().map(|_| LayerGrads {
                        weights: Tensor::zeros(p.weights.shape().to_vec()),
                        bias: Tensor::zeros(p.bias.shape().to_vec()),
                    });
                    layer::dense_backward(
                        x.data(),
                        dy.data(),
                        n,
                        *inputs,
                        *outputs,
                        p.weights.data(),
                        dx.data_mut(),
                        g.as_mut()
                            .map(|g| (g.weights.data_mut(), g.bias.data_mut())),
                    );
                    grads_here = g;
                }
                LayerSpec::Conv2d { .. } => {
                    let p = self.params[i].as_ref().expect("conv has params");
                    let d = self.conv_dims(i, n);
                    let mut g = param_grads.as_ref().map(|_| LayerGrads {
                        weights: Tensor::zeros(p.weights.shape().to_vec()),
                        bias: Tensor::zeros(p.bias.shape().to_vec()),
                    });
                    layer::conv2d_backward(
                        x.data(),
                        dy.data(),
                        p.weights.data(),
                        dx.data_mut(),
                        g.as_mut()
                            .map(|g| (g.weights.data_mut(), g.bias.data_mut())),
                        &d,
                    );
                    grads_here = g;
                }
                LayerSpec::Relu => layer::relu_backward(x.data(), dy.data(), dx.data_mut()),
                LayerSpec::MaxPool2d { .. } => {
                    let d = self.pool_dims(i, n);
                    let Aux::PoolIdx(idx) = &trace.aux[i] else {
                        unreachable!("pool layer recorded no indices");
                    };
                    layer::maxpool_backward(dy.data(), idx, dx.data_mut(), &d);
                }
                LayerSpec::Dropout { .. } => match &trace.aux[i] {
                    Aux::DropMask(mask) => {
                        layer::dropout_backward_train(dy.data(), mask, dx.data_mut())
                    }
                    _ => dx.data_mut().copy_from_slice(dy.data()),
                },
                LayerSpec::Flatten => dx.data_mut().copy_from_slice(dy.data()),
                LayerSpec::Softmax => {
                    unreachable!("softmax only occurs terminally and is fused with the loss")
                }
            }
            dx.ensure_finite(&format!(
                "network {}, layer {i} ({}) backward",
                self.id,
                self.layers[i].kind_name()
            ))?;
            if let Some(grads) = param_grads.as_mut() {
                grads[i] = grads_here;
            }
            dy = dx;
        }
        Ok(dy)
    }

    pub(crate) fn logits_from_trace<'a>(&self, trace: &'a Trace<F>) -> &'a Tensor<F> {
        &trace.acts[self.logits_act]
    }

    pub(crate) fn probs_from_trace(&self, trace: &Trace<F>) -> Tensor<F> {
        if self.logits_act == self.layers.len() {
            // No terminal softmax layer; compute probabilities on the side.
            let logits = &trace.acts[self.logits_act];
            let n = logits.rows();
            let mut probs = Tensor::zeros(logits.shape().to_vec());
            layer::softmax_forward(logits.data(), n, self.num_classes, probs.data_mut());
            probs
        } else {
            trace.acts[self.layers.len()].clone()
        }
    }

    /// Evaluation-mode forward pass.
    ///
    /// Returns `(probs, logits)`: rows of `probs` are the terminal softmax
    /// output (computed on the side if the architecture omits an explicit
    /// softmax layer), `logits` the pre-softmax scores.
    pub fn forward(&self, batch: &Tensor<F>) -> Result<(Tensor<F>, Tensor<F>)> {
        let trace = self.forward_trace(batch, None)?;
        let probs = self.probs_from_trace(&trace);
        let logits = trace.acts[self.logits_act].clone();
        Ok((probs, logits))
    }

    /// Evaluation-mode backward pass under mean cross-entropy loss.
    ///
    /// Returns the scalar loss and gradients for every parameter tensor plus
    /// the input batch. Dropout acts as identity here; the training loop uses
    /// a separate path with live masks.
    pub fn backward(&self, batch: &Tensor<F>, labels: &[usize]) -> Result<(f64, Gradients<F>)> {
        let trace = self.forward_trace(batch, None)?;
        self.backward_from_trace(&trace, labels)
    }

    /// Training-mode backward pass: dropout masks drawn from `rng`.
    pub(crate) fn backward_train(
        &self,
        batch: &Tensor<F>,
        labels: &[usize],
        rng: &mut ChaCha8Rng,
    ) -> Result<(f64, Gradients<F>)> {
        let trace = self.forward_trace(batch, Some(rng))?;
        self.backward_from_trace(&trace, labels)
    }

    fn backward_from_trace(
        &self,
        trace: &Trace<F>,
        labels: &[usize],
    ) -> Result<(f64, Gradients<F>)> {
        let logits = &trace.acts[self.logits_act];
        let probs = self.probs_from_trace(trace);
        let (loss, seed) = ce_loss_and_seed(logits, &probs, labels)?;
        let mut param_grads = vec![None; self.layers.len()];
        let input = self.backprop(trace, seed, Some(&mut param_grads))?;
        Ok((
            loss,
            Gradients {
                input,
                layers: param_grads,
            },
        ))
    }

    /// Smallest distance along the evaluation trace from a piecewise-linear
    /// switching boundary: a relu input near zero, or a pool window whose
    /// maximum nearly ties its runner-up. Infinite when no such layer exists.
    ///
    /// Finite-difference gradient checks are only meaningful at points that
    /// clear this margin by well more than the probe step, so those harnesses
    /// re-draw instances that sit too close to a boundary.
    pub fn switch_margin(&self, batch: &Tensor<F>) -> Result<f64> {
        let trace = self.forward_trace(batch, None)?;
        let n = batch.rows();
        let mut margin = f64::INFINITY;
        for (i, spec) in self.layers.iter().enumerate() {
            match spec {
                LayerSpec::Relu => {
                    for v in trace.acts[i].data() {
                        margin = margin.min(v.as_f64().abs());
                    }
                }
                LayerSpec::MaxPool2d { .. } => {
                    let d = self.pool_dims(i, n);
                    margin = margin.min(layer::maxpool_tie_margin(trace.acts[i].data(), &d));
                }
                _ => {}
            }
        }
        Ok(margin)
    }

    /// Predicted labels with lowest-index argmax tie-breaking.
    pub fn predict_labels(&self, batch: &Tensor<F>) -> Result<Vec<usize>> {
        let trace = self.forward_trace(batch, None)?;
        let logits = &trace.acts[self.logits_act];
        Ok((0..logits.rows())
            .map(|i| argmax_row(logits.row(i)))
            .collect())
    }
}

/// First index of the row maximum; ties resolve to the lowest index.
pub fn argmax_row<F: Scalar>(row: &[F]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate().skip(1) {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Mean cross-entropy from logits plus the backward seed at the logits.
///
/// Loss for one example is `logsumexp(z) - z[y]`; the seed is
/// `(probs - onehot) / n`, the exact gradient of the mean loss.
pub(crate) fn ce_loss_and_seed<F: Scalar>(
    logits: &Tensor<F>,
    probs: &Tensor<F>,
    labels: &[usize],
) -> Result<(f64, Tensor<F>)> {
    let n = logits.rows();
    let k = logits.row_len();
    if labels.len() != n {
        return Err(Error::shape(
            "cross-entropy",
            format!("{} labels for a batch of {n}", labels.len()),
        ));
    }
    let mut loss = 0.0f64;
    let mut seed = Tensor::zeros(logits.shape().to_vec());
    let inv_n = 1.0 / n as f64;
    for i in 0..n {
        let y = labels[i];
        if y >= k {
            return Err(Error::LabelOutOfRange {
                index: i,
                label: y,
                num_classes: k,
            });
        }
        let zi = logits.row(i);
        let m = zi.iter().copied().fold(F::neg_infinity(), F::max).as_f64();
        let sum_exp: f64 = zi.iter().map(|z| (z.as_f64() - m).exp()).sum();
        loss += m + sum_exp.ln() - zi[y].as_f64();
        let pi = probs.row(i);
        let si = seed.row_mut(i);
        for c in 0..k {
            let onehot = if c == y { 1.0 } else { 0.0 };
            si[c] = F::from_f64((pi[c].as_f64() - onehot) * inv_n);
        }
    }
    Ok((loss * inv_n, seed))
}

/// Anything attacks can differentiate through: a single network or the
/// merged view of a model family.
///
/// `forward_with_seed_grad` is the workhorse: one forward pass, a caller
/// chosen seed at the logits, one input-gradient backward pass. Iterative
/// attacks build their update directions through it without re-running
/// forward twice per step.
pub trait DifferentiableClassifier<F: Scalar>: Send + Sync {
    fn model_id(&self) -> &str;
    fn input_shape(&self) -> &[usize];
    fn num_classes(&self) -> usize;

    /// Evaluation-mode forward pass returning `(probs, logits)`.
    fn probs_and_logits(&self, batch: &Tensor<F>) -> Result<(Tensor<F>, Tensor<F>)>;

    /// Forward pass, then backward from a seed built by `make_seed(probs,
    /// logits)`. Returns `(probs, logits, input_grad)`.
    fn forward_with_seed_grad(
        &self,
        batch: &Tensor<F>,
        make_seed: &mut dyn FnMut(&Tensor<F>, &Tensor<F>) -> Result<Tensor<F>>,
    ) -> Result<(Tensor<F>, Tensor<F>, Tensor<F>)>;

    /// Gradient of `sum(seed * logits)` with respect to the input batch.
    fn input_grad_from_logit_seed(&self, batch: &Tensor<F>, seed: &Tensor<F>) -> Result<Tensor<F>> {
        let expected = {
            let n = batch.shape().first().copied().unwrap_or(0);
            [n, self.num_classes()]
        };
        if seed.shape() != expected {
            return Err(Error::shape(
                format!("classifier {}", self.model_id()),
                format!(
                    "logit seed shape {:?}, expected {:?}",
                    seed.shape(),
                    expected
                ),
            ));
        }
        let (_, _, grad) = self.forward_with_seed_grad(batch, &mut |_, _| Ok(seed.clone()))?;
        Ok(grad)
    }

    /// Mean cross-entropy loss and its gradient with respect to the input.
    fn loss_and_input_grad(&self, batch: &Tensor<F>, labels: &[usize]) -> Result<(f64, Tensor<F>)> {
        let mut loss = 0.0f64;
        let (_, _, grad) = self.forward_with_seed_grad(batch, &mut |probs, logits| {
            let (l, seed) = ce_loss_and_seed(logits, probs, labels)?;
            loss = l;
            Ok(seed)
        })?;
        Ok((loss, grad))
    }

    /// Predicted labels, lowest-index tie-breaking.
    fn predict(&self, batch: &Tensor<F>) -> Result<Vec<usize>> {
        let (_, logits) = self.probs_and_logits(batch)?;
        Ok((0..logits.rows())
            .map(|i| argmax_row(logits.row(i)))
            .collect())
    }
}

/// Evaluation chunk size for dataset-level passes; bounds activation memory
/// without affecting results.
pub(crate) const EVAL_CHUNK: usize = 256;

/// Per-example correctness flags for a whole dataset, evaluated in chunks.
pub fn correct_flags(clf: &dyn DifferentiableClassifier<f32>, set: &Dataset) -> Result<Vec<bool>> {
    if set.is_empty() {
        return Err(Error::EmptyDataset {
            context: format!("accuracy of {}", clf.model_id()),
        });
    }
    let indices: Vec<usize> = (0..set.len()).collect();
    let mut flags = Vec::with_capacity(set.len());
    for chunk in indices.chunks(EVAL_CHUNK) {
        let (batch, labels) = set.batch(chunk);
        let preds = clf.predict(&batch)?;
        flags.extend(preds.iter().zip(&labels).map(|(p, l)| p == l));
    }
    Ok(flags)
}

/// Fraction of the dataset classified correctly (argmax with lowest-index
/// tie-breaking).
pub fn accuracy(clf: &dyn DifferentiableClassifier<f32>, set: &Dataset) -> Result<f64> {
    let flags = correct_flags(clf, set)?;
    Ok(flags.iter().filter(|c| **c).count() as f64 / flags.len() as f64)
}

impl<F: Scalar> DifferentiableClassifier<F> for Network<F> {
    fn model_id(&self) -> &str {
        &self.id
    }

    fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn probs_and_logits(&self, batch: &Tensor<F>) -> Result<(Tensor<F>, Tensor<F>)> {
        self.forward(batch)
    }

    fn forward_with_seed_grad(
        &self,
        batch: &Tensor<F>,
        make_seed: &mut dyn FnMut(&Tensor<F>, &Tensor<F>) -> Result<Tensor<F>>,
    ) -> Result<(Tensor<F>, Tensor<F>, Tensor<F>)> {
        let trace = self.forward_trace(batch, None)?;
        let probs = self.probs_from_trace(&trace);
        let logits = trace.acts[self.logits_act].clone();
        let seed = make_seed(&probs, &logits)?;
        if seed.shape() != logits.shape() {
            return Err(Error::shape(
                format!("network {}", self.id),
                format!(
                    "logit seed shape {:?}, expected {:?}",
                    seed.shape(),
                    logits.shape()
                ),
            ));
        }
        let grad = self.backprop(&trace, seed, None)?;
        Ok((probs, logits, grad))
    }
}
