//! The randomized multi-model defense and its merged single-model view.
//!
//! A family starts from one trained network and grows by adversarial
//! retraining: attack the newest member on a sample of the training set,
//! fold the resulting examples into the next member's training data, repeat.
//! At classification time a member is selected uniformly at random per
//! query, so an attacker never knows which parameters produced the answer.
//! The merged model averages the whole family into one differentiable
//! classifier, which is how an adaptive attacker targets the defense.
//!
//! Determinism: all generation randomness (member initialization, training
//! shuffles, attack-sample draws) derives from `GeneratorConfig::rng_seed`,
//! and runtime selection from `(selection_seed, draw_index)`, so families
//! and classifications replay exactly.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::attack::{
    craft_white_box, fmt_attack, load_set, parse_attack, save_set, AdversarialSet, AttackConfig,
    LabelOracle, Scenario,
};
use crate::data::{sample_subset, Dataset};
use crate::error::{Error, Result};
use crate::layer;
use crate::model_file::{load_model, save_model};
use crate::network::{accuracy, DifferentiableClassifier, Network, Trace};
use crate::rng;
use crate::tensor::{Scalar, Tensor};
use crate::train::{train, Optimizer, TrainConfig};

/// How each new member's training set is augmented.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SolutionKind {
    /// Original training set plus the newest adversarial set only.
    Solution1,
    /// Original training set plus every adversarial set generated so far.
    Solution2,
}

impl SolutionKind {
    pub fn name(self) -> &'static str {
        match self {
            SolutionKind::Solution1 => "solution1",
            SolutionKind::Solution2 => "solution2",
        }
    }

    fn parse(path: &Path, s: &str) -> Result<SolutionKind> {
        match s {
            "solution1" => Ok(SolutionKind::Solution1),
            "solution2" => Ok(SolutionKind::Solution2),
            other => Err(Error::format(path, format!("unknown solution {other:?}"))),
        }
    }
}

/// Optional early stop for family growth: once the defense's expected
/// accuracy on the newest adversarial set moves by less than `min_delta`
/// between rounds, further members are judged not worth training.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConvergenceStop {
    pub enabled: bool,
    pub min_delta: f64,
}

impl Default for ConvergenceStop {
    fn default() -> Self {
        ConvergenceStop {
            enabled: false,
            min_delta: 0.005,
        }
    }
}

/// Parameters of family generation.
///
/// `train.seed` is overridden per member (derived from `rng_seed` and the
/// member index), so a single `rng_seed` reproduces the whole family.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorConfig {
    /// Number of members trained beyond the seed model.
    pub num_additional: usize,
    pub solution: SolutionKind,
    /// Adversarial examples crafted per source model, as a fraction of the
    /// original training-set size; must round to at least one example.
    pub aug_fraction: f64,
    /// The attack being defended against; also the attack run against each
    /// new member to produce its adversarial set.
    pub attack: AttackConfig,
    pub train: TrainConfig,
    pub rng_seed: u64,
    pub convergence_stop: ConvergenceStop,
    /// Fresh random initialization per member when true (the default);
    /// false warm-starts every member from the seed model's parameters.
    pub fresh_init: bool,
}

impl GeneratorConfig {
    pub fn new(
        num_additional: usize,
        solution: SolutionKind,
        aug_fraction: f64,
        attack: AttackConfig,
    ) -> GeneratorConfig {
        GeneratorConfig {
            num_additional,
            solution,
            aug_fraction,
            attack,
            train: TrainConfig::default(),
            rng_seed: 0,
            convergence_stop: ConvergenceStop::default(),
            fresh_init: true,
        }
    }

    /// Examples per adversarial set for a training set of `train_len`.
    pub fn adv_set_size(&self, train_len: usize) -> usize {
        (self.aug_fraction * train_len as f64).round() as usize
    }

    pub fn validate(&self, train_len: usize) -> Result<()> {
        if !(self.aug_fraction > 0.0 && self.aug_fraction <= 1.0) {
            return Err(Error::config(
                "family generator",
                format!("aug_fraction {} outside (0, 1]", self.aug_fraction),
            ));
        }
        if self.adv_set_size(train_len) < 1 {
            return Err(Error::config(
                "family generator",
                format!(
                    "aug_fraction {} of {train_len} training examples rounds to zero",
                    self.aug_fraction
                ),
            ));
        }
        if self.convergence_stop.enabled
            && !(self.convergence_stop.min_delta > 0.0
                && self.convergence_stop.min_delta.is_finite())
        {
            return Err(Error::config(
                "family generator",
                format!(
                    "convergence min_delta {} must be positive",
                    self.convergence_stop.min_delta
                ),
            ));
        }
        match &self.attack {
            AttackConfig::Fgsm(c) => c.validate(),
            AttackConfig::Cw(c) => c.validate(),
        }
    }
}

/// The generated family: models in construction order (seed model first)
/// with each model's adversarial set at the matching index.
#[derive(Clone, Debug)]
pub struct ModelFamily {
    pub models: Vec<Network<f32>>,
    pub adv_sets: Vec<AdversarialSet>,
    pub generator: GeneratorConfig,
}

impl ModelFamily {
    /// Checks the structural invariants: at least one model, one white-box
    /// adversarial set per model sourced from that model, and every member
    /// sharing the seed model's architecture.
    pub fn validate(&self) -> Result<()> {
        let t = self
            .models
            .first()
            .ok_or_else(|| Error::config("model family", "family has no models"))?;
        if self.adv_sets.len() != self.models.len() {
            return Err(Error::config(
                "model family",
                format!(
                    "{} models but {} adversarial sets",
                    self.models.len(),
                    self.adv_sets.len()
                ),
            ));
        }
        if self.models.len() > self.generator.num_additional + 1 {
            return Err(Error::config(
                "model family",
                format!(
                    "{} models exceed the configured maximum of {}",
                    self.models.len(),
                    self.generator.num_additional + 1
                ),
            ));
        }
        for (i, m) in self.models.iter().enumerate() {
            if m.input_shape() != t.input_shape()
                || m.num_classes() != t.num_classes()
                || m.layers() != t.layers()
            {
                return Err(Error::config(
                    "model family",
                    format!(
                        "member {i} ({}) does not share the seed model's architecture",
                        m.id()
                    ),
                ));
            }
        }
        for (i, s) in self.adv_sets.iter().enumerate() {
            if s.source_model_id != self.models[i].id() {
                return Err(Error::config(
                    "model family",
                    format!(
                        "adversarial set {i} sourced from {:?}, expected {:?}",
                        s.source_model_id,
                        self.models[i].id()
                    ),
                ));
            }
            if s.scenario != Scenario::WhiteBox {
                return Err(Error::config(
                    "model family",
                    format!("adversarial set {i} is not white-box"),
                ));
            }
            if s.input_shape != t.input_shape() || s.num_classes != t.num_classes() {
                return Err(Error::shape(
                    "model family",
                    format!(
                        "adversarial set {i} has input {:?} / {} classes, models have {:?} / {}",
                        s.input_shape,
                        s.num_classes,
                        t.input_shape(),
                        t.num_classes()
                    ),
                ));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }
}

fn family_error(completed_models: usize, completed_sets: usize, e: Error) -> Error {
    Error::FamilyGeneration {
        completed_models,
        completed_sets,
        detail: e.to_string(),
    }
}

fn mean_member_accuracy(models: &[Network<f32>], set: &Dataset) -> Result<f64> {
    let mut sum = 0.0;
    for m in models {
        sum += accuracy(m, set)?;
    }
    Ok(sum / models.len() as f64)
}

/// Grows a model family from a trained seed model.
///
/// Round i (1-based) merges the training set with adversarial data per
/// `cfg.solution`, trains member i on it, then attacks that member on a
/// fresh seeded sample of the training set to produce its adversarial set.
/// The seed model's own set is generated first so round 1 has data to
/// train on. Training or attack failure aborts with the counts of
/// completed models and sets in the error.
///
/// Adversarial sets are always drawn from the training set; held-out test
/// data never influences family construction.
pub fn generate_family(
    seed_model: &Network<f32>,
    train_set: &Dataset,
    cfg: &GeneratorConfig,
) -> Result<ModelFamily> {
    cfg.validate(train_set.len())?;
    crate::attack::check_compat(seed_model, train_set, "generate_family")?;
    let adv_count = cfg.adv_set_size(train_set.len());

    let mut models: Vec<Network<f32>> = vec![seed_model.clone()];
    let mut adv_sets: Vec<AdversarialSet> = Vec::new();
    // The same sets as datasets, kept for training-set composition.
    let mut adv_data: Vec<Dataset> = Vec::new();

    let craft_for =
        |models: &[Network<f32>], sets: usize, index: usize| -> Result<(AdversarialSet, Dataset)> {
            let sample_seed = rng::derive(cfg.rng_seed, &format!("adv-sample-{index}"));
            let subset = sample_subset(train_set, adv_count, sample_seed)?;
            let model = &models[index];
            let set = craft_white_box(model, &subset, &cfg.attack, sample_seed)
                .map_err(|e| family_error(models.len(), sets, e))?;
            let data = set.to_dataset(format!("adv-{}", model.id()))?;
            Ok((set, data))
        };

    let (set, data) = craft_for(&models, 0, 0)?;
    adv_sets.push(set);
    adv_data.push(data);

    let mut prev_acc: Option<f64> = None;
    for i in 1..=cfg.num_additional {
        let mut parts: Vec<&Dataset> = vec![train_set];
        match cfg.solution {
            SolutionKind::Solution1 => parts.push(adv_data.last().expect("adv set per model")),
            SolutionKind::Solution2 => parts.extend(adv_data.iter()),
        }
        let augmented = Dataset::merged(format!("{}-aug-{i}", train_set.name()), &parts)?;

        let id = format!("{}-m{i}", seed_model.id());
        let mut member = if cfg.fresh_init {
            seed_model
                .with_fresh_params(&id, rng::derive(cfg.rng_seed, &format!("member-init-{i}")))
        } else {
            let mut m = seed_model.clone();
            m.set_id(&id);
            m
        };
        let mut tc = cfg.train.clone();
        tc.seed = rng::derive(cfg.rng_seed, &format!("member-train-{i}"));
        train(&mut member, &augmented, &tc)
            .map_err(|e| family_error(models.len(), adv_sets.len(), e))?;
        models.push(member);

        let (set, data) = craft_for(&models, adv_sets.len(), i)?;
        adv_sets.push(set);
        adv_data.push(data);

        if cfg.convergence_stop.enabled {
            let acc = mean_member_accuracy(&models, adv_data.last().expect("just pushed"))?;
            if let Some(prev) = prev_acc {
                if (acc - prev).abs() < cfg.convergence_stop.min_delta {
                    break;
                }
            }
            prev_acc = Some(acc);
        }
    }

    let family = ModelFamily {
        models,
        adv_sets,
        generator: cfg.clone(),
    };
    family.validate()?;
    Ok(family)
}

// ---------------------------------------------------------------------------
// Runtime selection
// ---------------------------------------------------------------------------

/// The deployed defense: a model family plus a selection seed. Immutable
/// after construction; callers supply draw indices, so concurrent use just
/// needs disjoint index ranges.
#[derive(Clone, Debug)]
pub struct MuldefClassifier {
    family: ModelFamily,
    selection_seed: u64,
}

impl MuldefClassifier {
    pub fn new(family: ModelFamily, selection_seed: u64) -> Result<MuldefClassifier> {
        family.validate()?;
        Ok(MuldefClassifier {
            family,
            selection_seed,
        })
    }

    pub fn family(&self) -> &ModelFamily {
        &self.family
    }

    pub fn selection_seed(&self) -> u64 {
        self.selection_seed
    }

    pub fn num_models(&self) -> usize {
        self.family.models.len()
    }

    /// Uniform member choice, a pure function of `(selection_seed,
    /// draw_index)`: replaying a pair always selects the same member.
    pub fn select_model(&self, draw_index: u64) -> usize {
        rng::bounded(
            rng::mix(self.selection_seed, draw_index),
            self.family.models.len(),
        )
    }

    /// Classifies a single example (feature shape, no batch dimension) with
    /// the member selected by `draw_index`.
    pub fn classify(&self, x: &Tensor<f32>, draw_index: u64) -> Result<usize> {
        let model = &self.family.models[self.select_model(draw_index)];
        if x.shape() != model.input_shape() {
            return Err(Error::shape(
                "muldef classify",
                format!(
                    "example shape {:?}, expected {:?}",
                    x.shape(),
                    model.input_shape()
                ),
            ));
        }
        let mut shape = Vec::with_capacity(x.shape().len() + 1);
        shape.push(1);
        shape.extend_from_slice(x.shape());
        let batch = Tensor::new(shape, x.data().to_vec())?;
        Ok(model.predict_labels(&batch)?[0])
    }

    /// Classifies a batch; row `r` uses draw index `first_draw + r`, i.e.
    /// every example gets an independent member selection. Rows are grouped
    /// by selected member so each member runs one forward pass.
    pub fn classify_batch(&self, batch: &Tensor<f32>, first_draw: u64) -> Result<Vec<usize>> {
        let n = batch.rows();
        if n == 0 {
            return Ok(Vec::new());
        }
        let mut by_member: Vec<Vec<usize>> = vec![Vec::new(); self.num_models()];
        for row in 0..n {
            by_member[self.select_model(first_draw + row as u64)].push(row);
        }
        let row_len = batch.row_len();
        let mut labels = vec![0usize; n];
        for (m, rows) in by_member.iter().enumerate() {
            if rows.is_empty() {
                continue;
            }
            let mut data = Vec::with_capacity(rows.len() * row_len);
            for &r in rows {
                data.extend_from_slice(batch.row(r));
            }
            let mut shape = batch.shape().to_vec();
            shape[0] = rows.len();
            let sub = Tensor::new(shape, data)?;
            let preds = self.family.models[m].predict_labels(&sub)?;
            for (&r, p) in rows.iter().zip(preds) {
                labels[r] = p;
            }
        }
        Ok(labels)
    }

    /// Exact accuracy of the defense on `set` under uniform selection: the
    /// mean of per-member accuracies (law of total expectation; no sampling
    /// involved).
    pub fn expected_accuracy(&self, set: &Dataset) -> Result<f64> {
        mean_member_accuracy(&self.family.models, set)
    }

    /// Label oracle that answers the way the deployed defense would: each
    /// queried example consumes one draw index, starting at `first_draw`.
    pub fn oracle(&self, first_draw: u64) -> DefenseOracle<'_> {
        DefenseOracle {
            clf: self,
            next_draw: first_draw,
        }
    }
}

/// Adapter exposing a [`MuldefClassifier`] as a black-box label oracle.
pub struct DefenseOracle<'a> {
    clf: &'a MuldefClassifier,
    next_draw: u64,
}

impl DefenseOracle<'_> {
    /// The draw index the next query will consume.
    pub fn next_draw(&self) -> u64 {
        self.next_draw
    }
}

impl LabelOracle for DefenseOracle<'_> {
    fn label_batch(&mut self, batch: &Tensor<f32>) -> Result<Vec<usize>> {
        let labels = self.clf.classify_batch(batch, self.next_draw)?;
        self.next_draw += labels.len() as u64;
        Ok(labels)
    }
}

// ---------------------------------------------------------------------------
// Merged model
// ---------------------------------------------------------------------------

/// How the merged model combines its members.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum MergeRule {
    /// Probabilities are the arithmetic mean of member probabilities;
    /// surrogate logits are the elementwise log of that mean (floored to
    /// keep the log finite).
    #[default]
    MeanProbs,
    /// Logits are the arithmetic mean of member logits; probabilities are
    /// the softmax of that mean.
    MeanLogits,
}

/// Probabilities below this floor are clamped before taking logs; gradients
/// are zero in the clamped region. Well above the smallest f32 normal so the
/// log and its downstream products stay comfortably finite.
const PROB_FLOOR: f64 = 1e-30;

/// A whole family viewed as one differentiable classifier: the target an
/// adaptive attacker differentiates through when attacking the defense
/// directly. Gradients flow through every member and sum at the input.
pub struct MergedModel<'a, F: Scalar = f32> {
    members: Vec<&'a Network<F>>,
    rule: MergeRule,
    id: String,
}

impl<'a, F: Scalar> MergedModel<'a, F> {
    pub fn new(members: Vec<&'a Network<F>>, rule: MergeRule) -> Result<MergedModel<'a, F>> {
        let first = *members
            .first()
            .ok_or_else(|| Error::config("merged model", "no members"))?;
        for m in &members[1..] {
            if m.input_shape() != first.input_shape() || m.num_classes() != first.num_classes() {
                return Err(Error::shape(
                    "merged model",
                    format!(
                        "member {} has input {:?} / {} classes, member {} has {:?} / {}",
                        m.id(),
                        m.input_shape(),
                        m.num_classes(),
                        first.id(),
                        first.input_shape(),
                        first.num_classes()
                    ),
                ));
            }
        }
        let ids: Vec<&str> = members.iter().map(|m| m.id()).collect();
        let id = format!("merged({})", ids.join("+"));
        Ok(MergedModel { members, rule, id })
    }

    pub fn rule(&self) -> MergeRule {
        self.rule
    }

    pub fn num_members(&self) -> usize {
        self.members.len()
    }

    fn member_traces(&self, batch: &Tensor<F>) -> Result<Vec<Trace<F>>> {
        self.members
            .iter()
            .map(|m| m.forward_trace(batch, None))
            .collect()
    }

    /// Merged `(probs, logits)` from per-member traces. Probabilities are
    /// reported unclamped; the floor only guards the log.
    fn merge(&self, traces: &[Trace<F>]) -> (Tensor<F>, Tensor<F>) {
        let inv_m = F::from_f64(1.0 / self.members.len() as f64);
        match self.rule {
            MergeRule::MeanProbs => {
                let mut probs: Option<Tensor<F>> = None;
                for (m, t) in self.members.iter().zip(traces) {
                    let p = m.probs_from_trace(t);
                    match &mut probs {
                        None => probs = Some(p),
                        Some(acc) => {
                            for (a, v) in acc.data_mut().iter_mut().zip(p.data()) {
                                *a += *v;
                            }
                        }
                    }
                }
                let mut probs = probs.expect("validated nonempty");
                for v in probs.data_mut() {
                    *v *= inv_m;
                }
                let floor = F::from_f64(PROB_FLOOR);
                let logits = probs.map(|p| p.max(floor).ln());
                (probs, logits)
            }
            MergeRule::MeanLogits => {
                let mut logits: Option<Tensor<F>> = None;
                for (m, t) in self.members.iter().zip(traces) {
                    let z = m.logits_from_trace(t);
                    match &mut logits {
                        None => logits = Some(z.clone()),
                        Some(acc) => {
                            for (a, v) in acc.data_mut().iter_mut().zip(z.data()) {
                                *a += *v;
                            }
                        }
                    }
                }
                let mut logits = logits.expect("validated nonempty");
                for v in logits.data_mut() {
                    *v *= inv_m;
                }
                let mut probs = Tensor::zeros(logits.shape().to_vec());
                layer::softmax_forward(
                    logits.data(),
                    logits.rows(),
                    self.num_classes(),
                    probs.data_mut(),
                );
                (probs, logits)
            }
        }
    }
}

impl<F: Scalar> DifferentiableClassifier<F> for MergedModel<'_, F> {
    fn model_id(&self) -> &str {
        &self.id
    }

    fn input_shape(&self) -> &[usize] {
        self.members[0].input_shape()
    }

    fn num_classes(&self) -> usize {
        self.members[0].num_classes()
    }

    fn probs_and_logits(&self, batch: &Tensor<F>) -> Result<(Tensor<F>, Tensor<F>)> {
        let traces = self.member_traces(batch)?;
        Ok(self.merge(&traces))
    }

    fn forward_with_seed_grad(
        &self,
        batch: &Tensor<F>,
        make_seed: &mut dyn FnMut(&Tensor<F>, &Tensor<F>) -> Result<Tensor<F>>,
    ) -> Result<(Tensor<F>, Tensor<F>, Tensor<F>)> {
        let traces = self.member_traces(batch)?;
        let (probs, logits) = self.merge(&traces);
        let seed = make_seed(&probs, &logits)?;
        if seed.shape() != logits.shape() {
            return Err(Error::shape(
                format!("classifier {}", self.id),
                format!(
                    "logit seed shape {:?}, expected {:?}",
                    seed.shape(),
                    logits.shape()
                ),
            ));
        }
        let inv_m = F::from_f64(1.0 / self.members.len() as f64);
        let mut total = Tensor::zeros(batch.shape().to_vec());
        match self.rule {
            MergeRule::MeanProbs => {
                // Objective sum(seed * ln(mean prob)): the slope through the
                // mean is seed / (members * mean), zero where the floor
                // clamps; each member then gets its own softmax transpose.
                let floor = F::from_f64(PROB_FLOOR);
                let mut g_bar = Tensor::zeros(seed.shape().to_vec());
                for ((g, s), p) in g_bar
                    .data_mut()
                    .iter_mut()
                    .zip(seed.data())
                    .zip(probs.data())
                {
                    if *p >= floor {
                        *g = *s * inv_m / *p;
                    }
                }
                let n = batch.rows();
                let k = self.num_classes();
                for (m, t) in self.members.iter().zip(&traces) {
                    let p = m.probs_from_trace(t);
                    let mut dz = Tensor::zeros(seed.shape().to_vec());
                    layer::softmax_vjp(p.data(), g_bar.data(), n, k, dz.data_mut());
                    let dx = m.backprop(t, dz, None)?;
                    for (a, v) in total.data_mut().iter_mut().zip(dx.data()) {
                        *a += *v;
                    }
                }
            }
            MergeRule::MeanLogits => {
                let member_seed = seed.map(|s| s * inv_m);
                for (m, t) in self.members.iter().zip(&traces) {
                    let dx = m.backprop(t, member_seed.clone(), None)?;
                    for (a, v) in total.data_mut().iter_mut().zip(dx.data()) {
                        *a += *v;
                    }
                }
            }
        }
        total.ensure_finite(&format!("classifier {} input gradient", self.id))?;
        Ok((probs, logits, total))
    }
}

/// Merged view over every model in a family.
pub fn merged_model(family: &ModelFamily, rule: MergeRule) -> Result<MergedModel<'_, f32>> {
    family.validate()?;
    MergedModel::new(family.models.iter().collect(), rule)
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

const MANIFEST_MAGIC: &str = "muldef-family";
const MANIFEST_VERSION: u32 = 1;

fn fmt_train(cfg: &TrainConfig) -> String {
    let opt = match cfg.optimizer {
        Optimizer::Sgd { learning_rate } => format!("optimizer=sgd learning_rate={learning_rate}"),
        Optimizer::Adam {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } => format!(
            "optimizer=adam learning_rate={learning_rate} beta1={beta1} beta2={beta2} epsilon={epsilon}"
        ),
    };
    format!(
        "{opt} batch_size={} max_epochs={} early_stop_min_delta={} early_stop_patience={} validation_fraction={} seed={}",
        cfg.batch_size,
        cfg.max_epochs,
        cfg.early_stop_min_delta,
        cfg.early_stop_patience,
        cfg.validation_fraction,
        cfg.seed
    )
}

fn parse_pairs(
    path: &Path,
    context: &str,
    rest: &str,
) -> Result<std::collections::BTreeMap<String, String>> {
    let mut pairs = std::collections::BTreeMap::new();
    for w in rest.split_whitespace() {
        let (k, v) = w
            .split_once('=')
            .ok_or_else(|| Error::format(path, format!("malformed {context} field {w:?}")))?;
        pairs.insert(k.to_string(), v.to_string());
    }
    Ok(pairs)
}

fn take_pair(
    path: &Path,
    context: &str,
    pairs: &mut std::collections::BTreeMap<String, String>,
    key: &str,
) -> Result<String> {
    pairs
        .remove(key)
        .ok_or_else(|| Error::format(path, format!("{context} line missing {key}")))
}

fn parse_num<T: std::str::FromStr>(path: &Path, key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::format(path, format!("field {key}={v} not a number")))
}

fn parse_bool(path: &Path, key: &str, v: &str) -> Result<bool> {
    v.parse()
        .map_err(|_| Error::format(path, format!("field {key}={v} not a boolean")))
}

fn parse_train(path: &Path, rest: &str) -> Result<TrainConfig> {
    let mut pairs = parse_pairs(path, "train", rest)?;
    let mut take = |key: &str| take_pair(path, "train", &mut pairs, key);
    let optimizer = match take("optimizer")?.as_str() {
        "sgd" => Optimizer::Sgd {
            learning_rate: parse_num(path, "learning_rate", &take("learning_rate")?)?,
        },
        "adam" => Optimizer::Adam {
            learning_rate: parse_num(path, "learning_rate", &take("learning_rate")?)?,
            beta1: parse_num(path, "beta1", &take("beta1")?)?,
            beta2: parse_num(path, "beta2", &take("beta2")?)?,
            epsilon: parse_num(path, "epsilon", &take("epsilon")?)?,
        },
        other => {
            return Err(Error::format(path, format!("unknown optimizer {other:?}")));
        }
    };
    let cfg = TrainConfig {
        optimizer,
        batch_size: parse_num(path, "batch_size", &take("batch_size")?)?,
        max_epochs: parse_num(path, "max_epochs", &take("max_epochs")?)?,
        early_stop_min_delta: parse_num(
            path,
            "early_stop_min_delta",
            &take("early_stop_min_delta")?,
        )?,
        early_stop_patience: parse_num(path, "early_stop_patience", &take("early_stop_patience")?)?,
        validation_fraction: parse_num(path, "validation_fraction", &take("validation_fraction")?)?,
        seed: parse_num(path, "seed", &take("seed")?)?,
    };
    if let Some(extra) = pairs.keys().next() {
        return Err(Error::format(
            path,
            format!("unknown train field {extra:?}"),
        ));
    }
    Ok(cfg)
}

fn model_file_name(i: usize) -> String {
    format!("model-{i}.mnet")
}

fn advset_file_name(i: usize) -> String {
    format!("advset-{i}.advset")
}

/// Writes a family to `dir`: one model file and one adversarial-set file
/// per member plus a `manifest.txt` recording the generator configuration
/// and construction order.
pub fn save_family(family: &ModelFamily, dir: impl AsRef<Path>) -> Result<()> {
    family.validate()?;
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, m) in family.models.iter().enumerate() {
        save_model(m, dir.join(model_file_name(i)))?;
    }
    for (i, s) in family.adv_sets.iter().enumerate() {
        save_set(s, dir.join(advset_file_name(i)))?;
    }
    let path = dir.join("manifest.txt");
    let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| Error::io(&path, e);
    let g = &family.generator;
    writeln!(w, "{MANIFEST_MAGIC} v{MANIFEST_VERSION}").map_err(io_err)?;
    writeln!(w, "members {}", family.models.len()).map_err(io_err)?;
    writeln!(w, "requested_additional {}", g.num_additional).map_err(io_err)?;
    writeln!(w, "solution {}", g.solution.name()).map_err(io_err)?;
    writeln!(w, "aug_fraction {}", g.aug_fraction).map_err(io_err)?;
    writeln!(w, "rng_seed {}", g.rng_seed).map_err(io_err)?;
    writeln!(w, "fresh_init {}", g.fresh_init).map_err(io_err)?;
    writeln!(
        w,
        "convergence enabled={} min_delta={}",
        g.convergence_stop.enabled, g.convergence_stop.min_delta
    )
    .map_err(io_err)?;
    writeln!(w, "attack {}", fmt_attack(&g.attack)).map_err(io_err)?;
    writeln!(w, "train {}", fmt_train(&g.train)).map_err(io_err)?;
    for (i, m) in family.models.iter().enumerate() {
        // id last: it may contain spaces, everything before it may not.
        writeln!(
            w,
            "member {i} model={} advset={} id={}",
            model_file_name(i),
            advset_file_name(i),
            m.id()
        )
        .map_err(io_err)?;
    }
    writeln!(w, "end").map_err(io_err)?;
    w.flush().map_err(io_err)
}

struct ManifestLines {
    lines: Vec<String>,
    next: usize,
}

impl ManifestLines {
    fn field(&mut self, path: &Path, key: &str) -> Result<String> {
        let line = self
            .lines
            .get(self.next)
            .ok_or_else(|| Error::format(path, format!("missing {key} line")))?;
        self.next += 1;
        match line.split_once(' ') {
            Some((k, rest)) if k == key => Ok(rest.to_string()),
            _ => Err(Error::format(
                path,
                format!("expected {key} line, found {line:?}"),
            )),
        }
    }

    fn exact(&mut self, path: &Path, expected: &str) -> Result<()> {
        let line = self
            .lines
            .get(self.next)
            .ok_or_else(|| Error::format(path, format!("missing {expected:?} line")))?;
        self.next += 1;
        if line != expected {
            return Err(Error::format(
                path,
                format!("expected {expected:?} line, found {line:?}"),
            ));
        }
        Ok(())
    }
}

/// Loads a family saved by [`save_family`], validating the manifest against
/// the loaded models and sets.
pub fn load_family(dir: impl AsRef<Path>) -> Result<ModelFamily> {
    let dir = dir.as_ref();
    let path = dir.join("manifest.txt");
    let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut lines = Vec::new();
    for line in BufReader::new(file).lines() {
        lines.push(line.map_err(|e| Error::io(&path, e))?);
    }
    let mut m = ManifestLines { lines, next: 0 };

    let header = m.lines.first().cloned().unwrap_or_default();
    if header != format!("{MANIFEST_MAGIC} v{MANIFEST_VERSION}") {
        return Err(Error::format(
            &path,
            format!("bad header {header:?}, expected {MANIFEST_MAGIC:?} v{MANIFEST_VERSION}"),
        ));
    }
    m.next = 1;

    let members: usize = {
        let v = m.field(&path, "members")?;
        parse_num(&path, "members", &v)?
    };
    if members == 0 {
        return Err(Error::format(&path, "family has no members"));
    }
    let requested: usize = {
        let v = m.field(&path, "requested_additional")?;
        parse_num(&path, "requested_additional", &v)?
    };
    let solution = SolutionKind::parse(&path, &m.field(&path, "solution")?)?;
    let aug_fraction: f64 = {
        let v = m.field(&path, "aug_fraction")?;
        parse_num(&path, "aug_fraction", &v)?
    };
    let rng_seed: u64 = {
        let v = m.field(&path, "rng_seed")?;
        parse_num(&path, "rng_seed", &v)?
    };
    let fresh_init = parse_bool(&path, "fresh_init", &m.field(&path, "fresh_init")?)?;
    let convergence_stop = {
        let rest = m.field(&path, "convergence")?;
        let mut pairs = parse_pairs(&path, "convergence", &rest)?;
        let stop = ConvergenceStop {
            enabled: parse_bool(
                &path,
                "enabled",
                &take_pair(&path, "convergence", &mut pairs, "enabled")?,
            )?,
            min_delta: parse_num(
                &path,
                "min_delta",
                &take_pair(&path, "convergence", &mut pairs, "min_delta")?,
            )?,
        };
        if let Some(extra) = pairs.keys().next() {
            return Err(Error::format(
                &path,
                format!("unknown convergence field {extra:?}"),
            ));
        }
        stop
    };
    let attack = parse_attack(&path, &m.field(&path, "attack")?)?;
    let train = parse_train(&path, &m.field(&path, "train")?)?;

    let mut models = Vec::with_capacity(members);
    let mut adv_sets = Vec::with_capacity(members);
    for i in 0..members {
        let rest = m.field(&path, "member")?;
        let mut words = rest.splitn(4, ' ');
        let index: usize = {
            let v = words.next().unwrap_or_default();
            parse_num(&path, "member index", v)?
        };
        if index != i {
            return Err(Error::format(
                &path,
                format!("member line index {index}, expected {i}"),
            ));
        }
        let model_file = words
            .next()
            .and_then(|w| w.strip_prefix("model="))
            .ok_or_else(|| Error::format(&path, format!("member {i} line missing model=")))?;
        let advset_file = words
            .next()
            .and_then(|w| w.strip_prefix("advset="))
            .ok_or_else(|| Error::format(&path, format!("member {i} line missing advset=")))?;
        let id = words
            .next()
            .and_then(|w| w.strip_prefix("id="))
            .ok_or_else(|| Error::format(&path, format!("member {i} line missing id=")))?;
        let model = load_model(dir.join(model_file))?;
        if model.id() != id {
            return Err(Error::format(
                &path,
                format!(
                    "member {i} manifest id {id:?} does not match model file id {:?}",
                    model.id()
                ),
            ));
        }
        let set = load_set(dir.join(advset_file))?;
        models.push(model);
        adv_sets.push(set);
    }
    m.exact(&path, "end")?;

    let family = ModelFamily {
        models,
        adv_sets,
        generator: GeneratorConfig {
            num_additional: requested,
            solution,
            aug_fraction,
            attack,
            train,
            rng_seed,
            convergence_stop,
            fresh_init,
        },
    };
    family.validate()?;
    Ok(family)
}
