//! Iterative minimal-L2 attack.
//!
//! Optimizes, per example, `||adv - src||^2 + c * hinge` where the hinge is
//! `max(z_true - max_other + confidence, 0)` on the logits: zero exactly when
//! the runner-up class beats the true class by at least `confidence`. Pixels
//! are parameterized as `clip_min + range * (tanh(w) + 1) / 2`, which keeps
//! every iterate strictly inside the clip box with no projection step. The
//! tradeoff constant `c` is tuned per example by binary search: failures
//! raise it tenfold until a ceiling is found, successes bisect downward.
//!
//! Every iterate is screened, and the smallest successful perturbation over
//! all rounds is kept. Examples that never succeed keep their source pixels
//! and are flagged, so downstream accuracy numbers count them as clean.

use crate::attack::{
    check_compat, feature_len, split_examples, AdversarialSet, AttackConfig, CwConfig, Scenario,
    ATTACK_CHUNK,
};
use crate::data::Dataset;
use crate::error::Result;
use crate::network::DifferentiableClassifier;
use crate::tensor::Tensor;

/// Adam moments for the latent variable; reset at each binary-search round
/// so every value of `c` gets a fresh, well-scaled descent.
struct LatentAdam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    lr: f64,
}

impl LatentAdam {
    fn new(len: usize, lr: f64) -> Self {
        LatentAdam {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
            lr,
        }
    }

    fn step(&mut self, w: &mut [f32], grad: &[f64]) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.t += 1;
        let bc1 = 1.0 - B1.powi(self.t as i32);
        let bc2 = 1.0 - B2.powi(self.t as i32);
        for i in 0..w.len() {
            self.m[i] = B1 * self.m[i] + (1.0 - B1) * grad[i];
            self.v[i] = B2 * self.v[i] + (1.0 - B2) * grad[i] * grad[i];
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            w[i] -= (self.lr * mhat / (vhat.sqrt() + EPS)) as f32;
        }
    }
}

/// Per-example search state across binary-search rounds.
struct SearchState {
    c: f32,
    lo: f32,
    hi: Option<f32>,
    best_l2: f64,
    best_pixels: Option<Vec<f32>>,
}

/// Evaluates one iterate: recomputes hinges, marks successes, and keeps the
/// smallest successful perturbation seen so far per example.
#[allow(clippy::too_many_arguments)]
fn screen_iterate(
    logits: &Tensor<f32>,
    adv: &Tensor<f32>,
    source: &Tensor<f32>,
    labels: &[usize],
    confidence: f32,
    row: usize,
    hinges: &mut [f32],
    round_success: &mut [bool],
    states: &mut [SearchState],
) {
    for i in 0..labels.len() {
        let z = logits.row(i);
        let y = labels[i];
        let mut other = f32::NEG_INFINITY;
        for (j, &v) in z.iter().enumerate() {
            if j != y && v > other {
                other = v;
            }
        }
        hinges[i] = (z[y] - other + confidence).max(0.0);
        if hinges[i] <= 0.0 {
            round_success[i] = true;
            let a = &adv.data()[i * row..(i + 1) * row];
            let s = &source.data()[i * row..(i + 1) * row];
            let mut l2 = 0.0f64;
            for p in 0..row {
                let d = (a[p] - s[p]) as f64;
                l2 += d * d;
            }
            if l2 < states[i].best_l2 {
                states[i].best_l2 = l2;
                states[i].best_pixels = Some(a.to_vec());
            }
        }
    }
}

/// Crafts one adversarial example per dataset example, in source order.
pub fn carlini_wagner(
    model: &dyn DifferentiableClassifier<f32>,
    data: &Dataset,
    cfg: &CwConfig,
) -> Result<AdversarialSet> {
    cfg.validate()?;
    check_compat(model, data, "carlini-wagner")?;
    let shape = data.feature_shape().to_vec();
    let row = feature_len(&shape);
    let range = cfg.clip_max - cfg.clip_min;
    let k = model.num_classes();

    let to_pixels = |w: f32| cfg.clip_min + range * (w.tanh() + 1.0) * 0.5;
    let to_latent = |x: f32| {
        let unit = (2.0 * (x - cfg.clip_min) / range - 1.0).clamp(-1.0 + 1e-6, 1.0 - 1e-6);
        unit.atanh()
    };

    let mut examples = Vec::with_capacity(data.len());
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(ATTACK_CHUNK) {
        let (source, labels) = data.batch(chunk);
        let n = labels.len();
        let mut states: Vec<SearchState> = (0..n)
            .map(|_| SearchState {
                c: cfg.c_init,
                lo: 0.0,
                hi: None,
                best_l2: f64::INFINITY,
                best_pixels: None,
            })
            .collect();

        for _round in 0..cfg.binary_search_steps {
            let mut latent: Vec<f32> = source.data().iter().map(|&x| to_latent(x)).collect();
            let mut adam = LatentAdam::new(latent.len(), cfg.step_size as f64);
            let mut round_success = vec![false; n];
            for iter in 0..=cfg.max_iterations {
                let mut batch_shape = vec![n];
                batch_shape.extend_from_slice(&shape);
                let adv = Tensor::new(batch_shape, latent.iter().map(|&w| to_pixels(w)).collect())
                    .expect("latent length matches batch shape");

                // The final iterate is screened as a candidate but not
                // stepped from.
                if iter == cfg.max_iterations {
                    let (_, logits) = model.probs_and_logits(&adv)?;
                    let mut hinges = vec![0.0f32; n];
                    screen_iterate(
                        &logits,
                        &adv,
                        &source,
                        &labels,
                        cfg.confidence,
                        row,
                        &mut hinges,
                        &mut round_success,
                        &mut states,
                    );
                    break;
                }

                let mut hinges = vec![0.0f32; n];
                let (_, _, grad) = model.forward_with_seed_grad(&adv, &mut |_, logits| {
                    screen_iterate(
                        logits,
                        &adv,
                        &source,
                        &labels,
                        cfg.confidence,
                        row,
                        &mut hinges,
                        &mut round_success,
                        &mut states,
                    );
                    // Hinge gradient at the logits: +c on the true class, -c
                    // on the current runner-up, zero once the hinge is slack.
                    let mut seed = Tensor::zeros(vec![n, k]);
                    for i in 0..n {
                        if hinges[i] > 0.0 {
                            let z = logits.row(i);
                            let y = labels[i];
                            let mut runner = 0;
                            let mut best = f32::NEG_INFINITY;
                            for (j, &v) in z.iter().enumerate() {
                                if j != y && v > best {
                                    best = v;
                                    runner = j;
                                }
                            }
                            let s = seed.row_mut(i);
                            s[y] = states[i].c;
                            s[runner] = -states[i].c;
                        }
                    }
                    Ok(seed)
                })?;

                // Full objective gradient in latent space: hinge pullback
                // plus the distance term, both chained through tanh.
                let g = grad.data();
                let a = adv.data();
                let s = source.data();
                let mut latent_grad = vec![0.0f64; latent.len()];
                for i in 0..latent.len() {
                    let dx = g[i] as f64 + 2.0 * (a[i] as f64 - s[i] as f64);
                    let t = latent[i].tanh() as f64;
                    latent_grad[i] = dx * (range as f64) * 0.5 * (1.0 - t * t);
                }
                adam.step(&mut latent, &latent_grad);
            }

            // Binary search on c: success bisects down, failure multiplies
            // up until a successful ceiling exists.
            for (i, st) in states.iter_mut().enumerate() {
                if round_success[i] {
                    st.hi = Some(match st.hi {
                        Some(h) => h.min(st.c),
                        None => st.c,
                    });
                } else {
                    st.lo = st.lo.max(st.c);
                }
                st.c = match st.hi {
                    Some(h) => (st.lo + h) * 0.5,
                    None => st.c * 10.0,
                };
            }
        }

        let mut adv = source.clone();
        let mut failed = vec![false; n];
        for (i, st) in states.iter().enumerate() {
            match &st.best_pixels {
                Some(p) => adv.data_mut()[i * row..(i + 1) * row].copy_from_slice(p),
                None => failed[i] = true,
            }
        }
        examples.extend(split_examples(&adv, &labels, chunk, &failed, &shape));
    }

    Ok(AdversarialSet {
        source_model_id: model.model_id().to_string(),
        attack: AttackConfig::Cw(cfg.clone()),
        scenario: Scenario::WhiteBox,
        seed: 0,
        oracle_queries: 0,
        input_shape: shape,
        num_classes: data.num_classes(),
        examples,
    })
}
