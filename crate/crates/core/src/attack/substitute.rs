//! Black-box attack via substitute-model training.
//!
//! The attacker can only query the target for predicted labels. A small
//! holdout of inputs is labeled by the target, a substitute network is
//! trained on it, and the set is grown by Jacobian-based augmentation: each
//! point steps `lambda` along the sign of the substitute's gradient of its
//! labeled class, the new points are labeled by another round of queries,
//! and the substitute is retrained. Each augmentation epoch doubles the set.
//! The final substitute is then attacked white-box; its adversarial examples
//! are the black-box attack on the target.

use crate::attack::{carlini_wagner, fgsm, AdversarialSet, AttackConfig, Scenario, ATTACK_CHUNK};
use crate::data::{Dataset, Example};
use crate::error::{Error, Result};
use crate::layer::LayerSpec;
use crate::network::{DifferentiableClassifier, Network};
use crate::rng;
use crate::tensor::Tensor;
use crate::train::{train, TrainConfig, TrainReport};

/// Label-only access to the attacked model. This is the entire interface the
/// black-box attacker gets; implementations wrap a plain network or a full
/// randomized defense.
pub trait LabelOracle {
    fn label_batch(&mut self, batch: &Tensor<f32>) -> Result<Vec<usize>>;
}

impl<F: FnMut(&Tensor<f32>) -> Result<Vec<usize>>> LabelOracle for F {
    fn label_batch(&mut self, batch: &Tensor<f32>) -> Result<Vec<usize>> {
        self(batch)
    }
}

/// Substitute-training pipeline parameters.
#[derive(Clone, Debug)]
pub struct BlackBoxConfig {
    /// Augmentation rounds; each doubles the substitute's training set.
    pub augmentation_epochs: usize,
    /// Step size of the Jacobian augmentation.
    pub lambda: f32,
    /// Architecture of the substitute network.
    pub substitute_layers: Vec<LayerSpec>,
    pub train: TrainConfig,
    /// White-box attack to run against the finished substitute.
    pub attack: AttackConfig,
    pub seed: u64,
}

impl BlackBoxConfig {
    /// Standard pipeline shape: five doubling rounds at step 0.1.
    pub fn new(
        substitute_layers: Vec<LayerSpec>,
        train: TrainConfig,
        attack: AttackConfig,
    ) -> Self {
        BlackBoxConfig {
            augmentation_epochs: 5,
            lambda: 0.1,
            substitute_layers,
            train,
            attack,
            seed: 0,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.substitute_layers.is_empty() {
            return Err(Error::config(
                "black-box attack",
                "substitute has no layers",
            ));
        }
        if !(self.lambda > 0.0) || !self.lambda.is_finite() {
            return Err(Error::config(
                "black-box attack",
                format!("lambda {} not positive", self.lambda),
            ));
        }
        Ok(())
    }
}

/// Everything the pipeline produced, for inspection beyond the set itself.
pub struct BlackBoxOutcome {
    pub set: AdversarialSet,
    pub substitute: Network<f32>,
    /// Size of the final substitute training set
    /// (`holdout * 2^augmentation_epochs`).
    pub substitute_training_size: usize,
    pub oracle_queries: u64,
    /// Report of the final substitute training run.
    pub final_training: TrainReport,
}

/// Runs the full pipeline: label `holdout` via the oracle, grow it by
/// Jacobian augmentation, train the substitute, then craft adversarial
/// examples from `attack_on` against the substitute.
///
/// Query accounting covers every labeled point (initial holdout plus each
/// round's new points); crafting uses `attack_on`'s own labels and costs no
/// queries.
pub fn blackbox_attack(
    oracle: &mut dyn LabelOracle,
    holdout: &Dataset,
    attack_on: &Dataset,
    cfg: &BlackBoxConfig,
) -> Result<BlackBoxOutcome> {
    cfg.validate()?;
    if holdout.is_empty() {
        return Err(Error::EmptyDataset {
            context: "black-box holdout".to_string(),
        });
    }
    if holdout.feature_shape() != attack_on.feature_shape()
        || holdout.num_classes() != attack_on.num_classes()
    {
        return Err(Error::shape(
            "black-box attack",
            format!(
                "holdout {:?}/{} classes vs attack set {:?}/{} classes",
                holdout.feature_shape(),
                holdout.num_classes(),
                attack_on.feature_shape(),
                attack_on.num_classes()
            ),
        ));
    }
    let (clip_min, clip_max) = match &cfg.attack {
        AttackConfig::Fgsm(a) => (a.clip_min, a.clip_max),
        AttackConfig::Cw(a) => (a.clip_min, a.clip_max),
    };
    let shape = holdout.feature_shape().to_vec();
    let k = holdout.num_classes();

    // Working pool: attacker-held pixels with oracle-assigned labels.
    let mut pool: Vec<Tensor<f32>> = holdout
        .examples()
        .iter()
        .map(|e| e.pixels.clone())
        .collect();
    let mut pool_labels = label_all(oracle, &pool, &shape)?;
    let mut queries = pool.len() as u64;

    let substitute_id = format!("substitute-{}", cfg.seed);
    let mut substitute = fresh_substitute(cfg, &shape, k, 0, &substitute_id)?;
    let mut report = None;
    for epoch in 0..=cfg.augmentation_epochs {
        let set = pool_dataset(&pool, &pool_labels, k, epoch)?;
        let mut train_cfg = cfg.train.clone();
        train_cfg.seed = rng::derive(cfg.seed, &format!("substitute-train-{epoch}"));
        substitute = fresh_substitute(cfg, &shape, k, epoch, &substitute_id)?;
        report = Some(train(&mut substitute, &set, &train_cfg)?);
        if epoch == cfg.augmentation_epochs {
            break;
        }
        // Jacobian augmentation: step each point along the sign of the
        // substitute's gradient for its labeled class, then query labels for
        // the new points.
        let mut new_points = Vec::with_capacity(pool.len());
        let idx: Vec<usize> = (0..pool.len()).collect();
        for chunk in idx.chunks(ATTACK_CHUNK) {
            let batch = stack(&pool, chunk, &shape);
            let mut seed = Tensor::zeros(vec![chunk.len(), k]);
            for (r, &i) in chunk.iter().enumerate() {
                seed.row_mut(r)[pool_labels[i]] = 1.0;
            }
            let grad = substitute.input_grad_from_logit_seed(&batch, &seed)?;
            for (r, &i) in chunk.iter().enumerate() {
                let mut pixels = pool[i].data().to_vec();
                let g = &grad.data()[r * pixels.len()..(r + 1) * pixels.len()];
                for (p, gv) in pixels.iter_mut().zip(g) {
                    let sign = if *gv > 0.0 {
                        1.0
                    } else if *gv < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    *p = (*p + cfg.lambda * sign).clamp(clip_min, clip_max);
                }
                new_points.push(Tensor::new(shape.clone(), pixels).expect("shape preserved"));
            }
        }
        let new_labels = label_all(oracle, &new_points, &shape)?;
        queries += new_points.len() as u64;
        pool.extend(new_points);
        pool_labels.extend(new_labels);
    }

    let mut set = match &cfg.attack {
        AttackConfig::Fgsm(a) => fgsm(&substitute, attack_on, a)?,
        AttackConfig::Cw(a) => carlini_wagner(&substitute, attack_on, a)?,
    };
    set.scenario = Scenario::BlackBox;
    set.seed = cfg.seed;
    set.oracle_queries = queries;

    Ok(BlackBoxOutcome {
        set,
        substitute,
        substitute_training_size: pool.len(),
        oracle_queries: queries,
        final_training: report.expect("at least one training epoch ran"),
    })
}

fn fresh_substitute(
    cfg: &BlackBoxConfig,
    shape: &[usize],
    k: usize,
    epoch: usize,
    id: &str,
) -> Result<Network<f32>> {
    let net = Network::new(
        id,
        shape.to_vec(),
        cfg.substitute_layers.clone(),
        rng::derive(cfg.seed, &format!("substitute-init-{epoch}")),
    )?;
    if net.num_classes() != k {
        return Err(Error::config(
            "black-box attack",
            format!(
                "substitute architecture yields {} classes, oracle domain has {k}",
                net.num_classes()
            ),
        ));
    }
    Ok(net)
}

fn stack(pool: &[Tensor<f32>], indices: &[usize], shape: &[usize]) -> Tensor<f32> {
    let row: usize = shape.iter().product();
    let mut data = Vec::with_capacity(indices.len() * row);
    for &i in indices {
        data.extend_from_slice(pool[i].data());
    }
    let mut full = vec![indices.len()];
    full.extend_from_slice(shape);
    Tensor::new(full, data).expect("pool rows share the feature shape")
}

fn label_all(
    oracle: &mut dyn LabelOracle,
    points: &[Tensor<f32>],
    shape: &[usize],
) -> Result<Vec<usize>> {
    let mut labels = Vec::with_capacity(points.len());
    let idx: Vec<usize> = (0..points.len()).collect();
    for chunk in idx.chunks(ATTACK_CHUNK) {
        let batch = stack(points, chunk, shape);
        let got = oracle.label_batch(&batch)?;
        if got.len() != chunk.len() {
            return Err(Error::shape(
                "black-box oracle",
                format!("{} labels for a batch of {}", got.len(), chunk.len()),
            ));
        }
        labels.extend(got);
    }
    Ok(labels)
}

fn pool_dataset(pool: &[Tensor<f32>], labels: &[usize], k: usize, epoch: usize) -> Result<Dataset> {
    Dataset::new(
        format!("substitute-pool-{epoch}"),
        k,
        pool.iter()
            .zip(labels)
            .map(|(pixels, &label)| Example {
                pixels: pixels.clone(),
                label,
            })
            .collect(),
    )
}
