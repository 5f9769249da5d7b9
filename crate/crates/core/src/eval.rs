//! Evaluation harness: accuracy estimation for randomized defenses,
//! attack scenarios against a model family, parameter sweeps, and report
//! emission.
//!
//! Leakage rule: adversarial sets used for *evaluation* are always crafted
//! from test examples, never from the training examples the family was
//! built on. Nothing in this module mutates a model or dataset; everything
//! is borrowed immutably and fresh models trained inside sweeps are local.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use crate::attack::{carlini_wagner, craft_white_box, AdversarialSet, AttackConfig, CwConfig};
use crate::data::{sample_subset, Dataset};
use crate::defense::{
    generate_family, merged_model, GeneratorConfig, MergeRule, ModelFamily, MuldefClassifier,
};
use crate::error::{Error, Result};
use crate::network::{accuracy, correct_flags, DifferentiableClassifier, Network};
use crate::rng;
use crate::train::{train, TrainConfig};

/// Classifier label for the defense's exact expected accuracy
/// (mean of member accuracies; no sampling error).
pub const DEFENSE_EXACT: &str = "defense-exact";
/// Classifier label for the defense's Monte-Carlo accuracy estimate.
pub const DEFENSE_MC: &str = "defense-mc";
/// Classifier label for the merged (averaged) model.
pub const MERGED: &str = "merged";
/// `adv_source`/`attack`/`scenario` values for clean test-set rows.
pub const CLEAN: &str = "clean";
pub const NO_ATTACK: &str = "none";

/// Accuracy of a classifier on one example set.
///
/// For a randomized defense `monte_carlo` resamples the member selection
/// per (example, draw) and `exact_expectation` is the closed form (the
/// mean of per-member accuracies). For a deterministic model the Monte
/// Carlo value is the plain accuracy and the expectation field is absent.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AccuracyEstimate {
    pub monte_carlo: f64,
    pub exact_expectation: Option<f64>,
    /// Examples in the evaluated set.
    pub n: usize,
    /// Monte-Carlo rounds (each example classified this many times).
    pub draws: u64,
}

impl AccuracyEstimate {
    /// The value to quote: the exact expectation when available.
    pub fn value(&self) -> f64 {
        self.exact_expectation.unwrap_or(self.monte_carlo)
    }
}

/// Shared knobs for the evaluation operations.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOptions {
    /// Monte-Carlo rounds for defense accuracy estimates.
    pub draws: u64,
    /// Seed for everything the harness randomizes: eval-subset sampling,
    /// Monte-Carlo member draws, and fresh inits inside sweeps.
    pub seed: u64,
    /// Craft evaluation adversarial sets from this many test examples
    /// (`None` = the whole test set). Keeps iterative attacks affordable.
    pub eval_subset: Option<usize>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            draws: 100,
            seed: 0,
            eval_subset: None,
        }
    }
}

impl EvalOptions {
    pub fn validate(&self) -> Result<()> {
        if self.draws == 0 {
            return Err(Error::config("draws", "must be at least 1"));
        }
        if self.eval_subset == Some(0) {
            return Err(Error::config("eval_subset", "must be at least 1 when set"));
        }
        Ok(())
    }
}

/// One accuracy measurement.
///
/// Seed column convention: rows whose value is deterministic given the set
/// carry the set's sampling seed (0 for clean test-set rows); `defense-mc`
/// rows carry the Monte-Carlo stream seed.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub classifier: String,
    /// Id of the model the adversarial set was crafted against, or `clean`.
    pub adv_source: String,
    /// Attack kind (`fgsm`, `cw`) or `none`.
    pub attack: String,
    /// `white_box`, `black_box`, or `clean`.
    pub scenario: String,
    pub seed: u64,
    pub accuracy: f64,
    /// Examples behind this measurement.
    pub n: usize,
}

/// Collected evaluation results plus provenance for the summary file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
    /// Free-form provenance lines (configs, digests) for the summary file.
    pub context: Vec<String>,
    /// Wall-clock stage timings. Written to a separate file so the CSV and
    /// summary stay byte-identical across reruns with the same seeds.
    pub timings: Vec<(String, Duration)>,
}

impl EvalReport {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(
        &mut self,
        classifier: impl Into<String>,
        adv_source: impl Into<String>,
        attack: impl Into<String>,
        scenario: impl Into<String>,
        seed: u64,
        accuracy: f64,
        n: usize,
    ) {
        self.rows.push(ReportRow {
            classifier: classifier.into(),
            adv_source: adv_source.into(),
            attack: attack.into(),
            scenario: scenario.into(),
            seed,
            accuracy,
            n,
        });
    }

    /// Absorbs another report's rows, context, and timings.
    pub fn merge(&mut self, other: EvalReport) {
        self.rows.extend(other.rows);
        self.context.extend(other.context);
        self.timings.extend(other.timings);
    }

    pub fn validate(&self) -> Result<()> {
        for (i, row) in self.rows.iter().enumerate() {
            if !row.accuracy.is_finite() || !(0.0..=1.0).contains(&row.accuracy) {
                return Err(Error::config(
                    "report",
                    format!("row {i}: accuracy {} outside [0, 1]", row.accuracy),
                ));
            }
            if row.n == 0 {
                return Err(Error::config("report", format!("row {i}: empty sample")));
            }
            for (field, value) in [
                ("classifier", &row.classifier),
                ("adv_source", &row.adv_source),
                ("attack", &row.attack),
                ("scenario", &row.scenario),
            ] {
                if value.is_empty() {
                    return Err(Error::config("report", format!("row {i}: empty {field}")));
                }
                if value.contains([',', '"', '\n', '\r']) {
                    return Err(Error::config(
                        "report",
                        format!("row {i}: {field} {value:?} breaks the CSV layout"),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Plain accuracy of one deterministic classifier on an adversarial set,
/// shaped like the randomized estimates for uniform reporting.
pub fn model_set_accuracy(
    model: &dyn DifferentiableClassifier<f32>,
    set: &AdversarialSet,
) -> Result<AccuracyEstimate> {
    let data = set.to_dataset("eval")?;
    let acc = accuracy(model, &data)?;
    Ok(AccuracyEstimate {
        monte_carlo: acc,
        exact_expectation: None,
        n: data.len(),
        draws: 1,
    })
}

/// Accuracy of the randomized defense on a dataset: Monte-Carlo estimate
/// over `draws` rounds plus the exact expectation.
///
/// Each member is evaluated once; the Monte-Carlo rounds then only replay
/// member selection against the cached per-example correctness.
pub fn defense_accuracy(
    defense: &MuldefClassifier,
    data: &Dataset,
    draws: u64,
    seed: u64,
) -> Result<AccuracyEstimate> {
    let flags = member_flags(&defense.family().models, data)?;
    estimate_from_flags(&flags, defense, draws, seed)
}

/// [`defense_accuracy`] over an adversarial set (original labels).
pub fn defense_set_accuracy(
    defense: &MuldefClassifier,
    set: &AdversarialSet,
    draws: u64,
    seed: u64,
) -> Result<AccuracyEstimate> {
    defense_accuracy(defense, &set.to_dataset("eval")?, draws, seed)
}

/// Per-member correctness on a dataset, member-major.
fn member_flags(models: &[Network<f32>], data: &Dataset) -> Result<Vec<Vec<bool>>> {
    models.iter().map(|m| correct_flags(m, data)).collect()
}

fn mean(flags: &[bool]) -> f64 {
    flags.iter().filter(|&&hit| hit).count() as f64 / flags.len() as f64
}

fn estimate_from_flags(
    flags: &[Vec<bool>],
    defense: &MuldefClassifier,
    draws: u64,
    seed: u64,
) -> Result<AccuracyEstimate> {
    if draws == 0 {
        return Err(Error::config("draws", "must be at least 1"));
    }
    debug_assert_eq!(flags.len(), defense.num_models());
    let n = flags[0].len();
    let exact = flags.iter().map(|row| mean(row)).sum::<f64>() / flags.len() as f64;
    let mut hits = 0u64;
    let mut counter = 0u64;
    for _ in 0..draws {
        for i in 0..n {
            let member = defense.select_model(rng::mix(seed, counter));
            counter += 1;
            if flags[member][i] {
                hits += 1;
            }
        }
    }
    Ok(AccuracyEstimate {
        monte_carlo: hits as f64 / (draws * n as u64) as f64,
        exact_expectation: Some(exact),
        n,
        draws,
    })
}

/// Draws the evaluation subset (or clones the whole test set) and returns
/// it with the sampling seed recorded on crafted sets.
fn eval_examples(test_set: &Dataset, opts: &EvalOptions) -> Result<(Dataset, u64)> {
    let sample_seed = rng::derive(opts.seed, "eval-sample");
    match opts.eval_subset {
        Some(k) => Ok((sample_subset(test_set, k, sample_seed)?, sample_seed)),
        None => Ok((test_set.clone(), sample_seed)),
    }
}

/// Clean test-set rows: every member plus the defense.
fn push_clean_rows(
    report: &mut EvalReport,
    defense: &MuldefClassifier,
    test_set: &Dataset,
    opts: &EvalOptions,
) -> Result<()> {
    let flags = member_flags(&defense.family().models, test_set)?;
    for (model, model_flags) in defense.family().models.iter().zip(&flags) {
        report.push(
            model.id(),
            CLEAN,
            NO_ATTACK,
            CLEAN,
            0,
            mean(model_flags),
            test_set.len(),
        );
    }
    let est = estimate_from_flags(
        &flags,
        defense,
        opts.draws,
        rng::derive(opts.seed, "mc-clean"),
    )?;
    let exact = est
        .exact_expectation
        .expect("defense estimate carries the expectation");
    report.push(DEFENSE_EXACT, CLEAN, NO_ATTACK, CLEAN, 0, exact, est.n);
    report.push(
        DEFENSE_MC,
        CLEAN,
        NO_ATTACK,
        CLEAN,
        opts.seed,
        est.monte_carlo,
        est.n,
    );
    Ok(())
}

/// Rows for one adversarial set: every member, then the defense.
/// Returns the defense estimate.
fn push_set_rows(
    report: &mut EvalReport,
    defense: &MuldefClassifier,
    set: &AdversarialSet,
    mc_tag: &str,
    opts: &EvalOptions,
) -> Result<AccuracyEstimate> {
    let data = set.to_dataset("eval")?;
    let attack = set.attack.kind_name();
    let scenario = set.scenario.to_string();
    let flags = member_flags(&defense.family().models, &data)?;
    for (model, model_flags) in defense.family().models.iter().zip(&flags) {
        report.push(
            model.id(),
            &set.source_model_id,
            attack,
            scenario.as_str(),
            set.seed,
            mean(model_flags),
            data.len(),
        );
    }
    let est = estimate_from_flags(&flags, defense, opts.draws, rng::derive(opts.seed, mc_tag))?;
    let exact = est
        .exact_expectation
        .expect("defense estimate carries the expectation");
    report.push(
        DEFENSE_EXACT,
        &set.source_model_id,
        attack,
        scenario.as_str(),
        set.seed,
        exact,
        est.n,
    );
    report.push(
        DEFENSE_MC,
        &set.source_model_id,
        attack,
        scenario,
        opts.seed,
        est.monte_carlo,
        est.n,
    );
    Ok(est)
}

/// Result of the per-member (indirect) attack scenario.
#[derive(Clone, Debug)]
pub struct IndirectEval {
    /// Clean rows plus the full member x set accuracy matrix.
    pub report: EvalReport,
    /// One evaluation set per family member, all crafted from the same
    /// test examples.
    pub eval_sets: Vec<AdversarialSet>,
    /// Defense expected accuracy on its worst evaluation set: the number
    /// an attacker who can pick the luckiest member gets to quote.
    pub min_exact: f64,
    /// Monte-Carlo counterpart of `min_exact` (minimum taken per set).
    pub min_mc: f64,
}

/// Indirect attack: craft one white-box set per family member from test
/// examples and measure the whole family plus the defense on each.
///
/// With a single-member family this reduces to a plain white-box attack
/// on the seed model.
pub fn indirect_attack_eval(
    defense: &MuldefClassifier,
    attack: &AttackConfig,
    test_set: &Dataset,
    opts: &EvalOptions,
) -> Result<IndirectEval> {
    opts.validate()?;
    let started = Instant::now();
    let mut report = EvalReport::new();
    push_clean_rows(&mut report, defense, test_set, opts)?;

    let (examples, sample_seed) = eval_examples(test_set, opts)?;
    let mut eval_sets = Vec::with_capacity(defense.num_models());
    for model in &defense.family().models {
        eval_sets.push(craft_white_box(model, &examples, attack, sample_seed)?);
    }

    let mut min_exact = f64::INFINITY;
    let mut min_mc = f64::INFINITY;
    for (i, set) in eval_sets.iter().enumerate() {
        let est = push_set_rows(&mut report, defense, set, &format!("mc-indirect-{i}"), opts)?;
        min_exact = min_exact.min(est.value());
        min_mc = min_mc.min(est.monte_carlo);
    }

    report.context.push(format!(
        "indirect attack: {} members, {} eval examples each, attack {}",
        defense.num_models(),
        examples.len(),
        attack.kind_name()
    ));
    report
        .context
        .push(format!("eval seed {} draws {}", opts.seed, opts.draws));
    report
        .timings
        .push(("indirect-attack-eval".into(), started.elapsed()));
    Ok(IndirectEval {
        report,
        eval_sets,
        min_exact,
        min_mc,
    })
}

/// Cross-attack scenario: a family built with one attack evaluated under
/// another. Identical evaluation to [`indirect_attack_eval`]; the report
/// additionally records which attack built the family. With
/// `attacked_by` equal to the generator's attack this is the standard
/// evaluation.
pub fn cross_attack_eval(
    defense: &MuldefClassifier,
    attacked_by: &AttackConfig,
    test_set: &Dataset,
    opts: &EvalOptions,
) -> Result<IndirectEval> {
    let mut out = indirect_attack_eval(defense, attacked_by, test_set, opts)?;
    out.report.context.push(format!(
        "cross attack: family hardened against {}, evaluated under {}",
        defense.family().generator.attack.kind_name(),
        attacked_by.kind_name()
    ));
    Ok(out)
}

/// Result of the merged-model (direct) attack scenario.
#[derive(Clone, Debug)]
pub struct DirectEval {
    pub report: EvalReport,
    /// The set crafted against the merged model.
    pub eval_set: AdversarialSet,
    /// Defense expected accuracy on that set.
    pub exact: f64,
    pub monte_carlo: f64,
    /// The merged model's own accuracy on the set it was attacked with.
    pub merged_self_accuracy: f64,
}

/// Direct attack: an adaptive adversary averages the family into one
/// differentiable model and attacks that. Gradient-free one-shot attacks
/// gain nothing from the merge, so only the iterative optimizer attack is
/// accepted here; the type makes that mistake unrepresentable.
pub fn direct_attack_eval(
    defense: &MuldefClassifier,
    attack: &CwConfig,
    rule: MergeRule,
    test_set: &Dataset,
    opts: &EvalOptions,
) -> Result<DirectEval> {
    opts.validate()?;
    let started = Instant::now();
    let mut report = EvalReport::new();
    push_clean_rows(&mut report, defense, test_set, opts)?;

    let merged = merged_model(defense.family(), rule)?;
    let (examples, sample_seed) = eval_examples(test_set, opts)?;
    let mut eval_set = carlini_wagner(&merged, &examples, attack)?;
    eval_set.seed = sample_seed;

    let est = push_set_rows(&mut report, defense, &eval_set, "mc-direct", opts)?;
    let merged_self_accuracy = model_set_accuracy(&merged, &eval_set)?.monte_carlo;
    report.push(
        MERGED,
        &eval_set.source_model_id,
        eval_set.attack.kind_name(),
        eval_set.scenario.to_string(),
        eval_set.seed,
        merged_self_accuracy,
        eval_set.examples.len(),
    );

    report.context.push(format!(
        "direct attack: merged {} members ({rule:?} rule), {} eval examples",
        defense.num_models(),
        examples.len()
    ));
    report
        .context
        .push(format!("eval seed {} draws {}", opts.seed, opts.draws));
    report
        .timings
        .push(("direct-attack-eval".into(), started.elapsed()));
    Ok(DirectEval {
        report,
        eval_set,
        exact: est
            .exact_expectation
            .expect("defense estimate carries the expectation"),
        monte_carlo: est.monte_carlo,
        merged_self_accuracy,
    })
}

/// One point on the adversarial-augmentation sweep.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentationPoint {
    /// Adversarial examples added, as a fraction of the training set.
    pub fraction: f64,
    /// Adversarial training examples actually appended.
    pub adv_examples: usize,
    /// Clean test accuracy of the model retrained on the augmented data.
    pub retrained_test_accuracy: f64,
    /// White-box adversarial accuracy of the retrained target when the
    /// attacker re-attacks the retrained weights (augmentation alone).
    pub retrained_self_accuracy: f64,
    /// Accuracy of a separately trained model on a fixed adversarial set
    /// crafted against the *original* target from test examples: how well
    /// augmentation transfers when the attacker aims at the old weights.
    pub separate_model_accuracy: f64,
}

/// Sweeps the adversarial-augmentation fraction.
///
/// Per fraction `f`: craft a white-box set against `target` from
/// `round(f * train)` training examples; (a) retrain the target itself on
/// the augmented data (warm start) and re-attack the result; (b) train a
/// fresh model on the same augmented data and measure it on one fixed
/// adversarial set crafted against the original target from test
/// examples. At fraction 0 both models train on the plain training set.
///
/// Per-point seeds are derived from the point index, so runs whose
/// fraction lists share a prefix produce identical points for the prefix.
pub fn sweep_augmentation(
    target: &Network<f32>,
    train_set: &Dataset,
    test_set: &Dataset,
    attack: &AttackConfig,
    fractions: &[f64],
    train_cfg: &TrainConfig,
    opts: &EvalOptions,
) -> Result<Vec<AugmentationPoint>> {
    opts.validate()?;
    if fractions.is_empty() {
        return Err(Error::config("fractions", "need at least one sweep point"));
    }
    for &f in fractions {
        if !f.is_finite() || !(0.0..=1.0).contains(&f) {
            return Err(Error::config(
                "fractions",
                format!("fraction {f} outside [0, 1]"),
            ));
        }
    }

    // Fixed yardstick for curve (b): attack the original target weights.
    let (examples, sample_seed) = eval_examples(test_set, opts)?;
    let reference = craft_white_box(target, &examples, attack, sample_seed)?.to_dataset("ref")?;

    let mut points = Vec::with_capacity(fractions.len());
    for (i, &fraction) in fractions.iter().enumerate() {
        let adv_count = (fraction * train_set.len() as f64).round() as usize;
        let augmented = if adv_count == 0 {
            train_set.clone()
        } else {
            let subset_seed = rng::derive(opts.seed, &format!("aug-sample-{i}"));
            let subset = sample_subset(train_set, adv_count, subset_seed)?;
            let adv = craft_white_box(target, &subset, attack, subset_seed)?;
            Dataset::merged(
                format!("{}-aug-{i}", train_set.name()),
                &[train_set, &adv.to_dataset("aug")?],
            )?
        };

        let mut tc = train_cfg.clone();

        // (a) Retrain the target itself (warm start) and re-attack it.
        let mut retrained = target.clone();
        retrained.set_id(format!("{}-retrain-{i}", target.id()));
        tc.seed = rng::derive(opts.seed, &format!("retrain-{i}"));
        train(&mut retrained, &augmented, &tc)?;
        let self_set = craft_white_box(&retrained, &examples, attack, sample_seed)?;
        let retrained_self_accuracy = model_set_accuracy(&retrained, &self_set)?.monte_carlo;
        let retrained_test_accuracy = accuracy(&retrained, test_set)?;

        // (b) Fresh model on the same data, measured on the fixed set.
        let mut separate = target.with_fresh_params(
            format!("{}-separate-{i}", target.id()),
            rng::derive(opts.seed, &format!("separate-init-{i}")),
        );
        tc.seed = rng::derive(opts.seed, &format!("separate-{i}"));
        train(&mut separate, &augmented, &tc)?;
        let separate_model_accuracy = accuracy(&separate, &reference)?;

        points.push(AugmentationPoint {
            fraction,
            adv_examples: adv_count,
            retrained_test_accuracy,
            retrained_self_accuracy,
            separate_model_accuracy,
        });
    }
    Ok(points)
}

/// One point on the family-size sweep.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FamilySizePoint {
    /// Total models in the family (1 = undefended seed model).
    pub size: usize,
    /// Worst-set defense expected accuracy under the indirect attack.
    pub indirect_min_exact: f64,
    pub indirect_min_mc: f64,
    /// Defense expected accuracy under the merged-model attack, when a
    /// direct-attack config was supplied.
    pub direct_exact: Option<f64>,
    pub direct_mc: Option<f64>,
}

/// Result of the family-size sweep, including the generated artifacts so
/// callers can audit the numbers independently.
#[derive(Clone, Debug)]
pub struct FamilySweep {
    pub points: Vec<FamilySizePoint>,
    /// The largest family generated; smaller sizes are its prefixes.
    pub family: ModelFamily,
    /// Evaluation sets, one per member of the largest family.
    pub eval_sets: Vec<AdversarialSet>,
    pub report: EvalReport,
}

/// Prefix of a family: the first `size` members with their sets.
/// Generation is prefix-stable (round `i` depends only on earlier rounds
/// and seeds derived from `i`), so this equals generating a smaller family.
fn family_prefix(family: &ModelFamily, size: usize) -> ModelFamily {
    let mut generator = family.generator.clone();
    generator.num_additional = size - 1;
    ModelFamily {
        models: family.models[..size].to_vec(),
        adv_sets: family.adv_sets[..size].to_vec(),
        generator,
    }
}

/// Sweeps the family size: generates one family at the largest requested
/// size, then evaluates each requested size as a prefix of it.
///
/// Per size: the indirect worst-set accuracy over that prefix's members
/// (evaluation sets are crafted once, against members of the largest
/// family, from one shared test subset), plus the merged-model attack
/// when `direct` is given. Size 1 is the undefended baseline.
/// `cfg.num_additional` is overridden by the largest requested size and
/// the convergence stop is disabled so every prefix exists.
pub fn sweep_family_size(
    seed_model: &Network<f32>,
    train_set: &Dataset,
    test_set: &Dataset,
    cfg: &GeneratorConfig,
    sizes: &[usize],
    direct: Option<(&CwConfig, MergeRule)>,
    opts: &EvalOptions,
) -> Result<FamilySweep> {
    opts.validate()?;
    let &max_size = sizes
        .iter()
        .max()
        .ok_or_else(|| Error::config("sizes", "need at least one sweep point"))?;
    if sizes.contains(&0) {
        return Err(Error::config("sizes", "family size 0 is meaningless"));
    }

    let started = Instant::now();
    let mut gcfg = cfg.clone();
    gcfg.num_additional = max_size - 1;
    gcfg.convergence_stop.enabled = false;
    let family = generate_family(seed_model, train_set, &gcfg)?;

    let (examples, sample_seed) = eval_examples(test_set, opts)?;
    let mut eval_sets = Vec::with_capacity(family.len());
    for model in &family.models {
        eval_sets.push(craft_white_box(
            model,
            &examples,
            &gcfg.attack,
            sample_seed,
        )?);
    }
    let flags_per_set: Vec<Vec<Vec<bool>>> = eval_sets
        .iter()
        .map(|set| member_flags(&family.models, &set.to_dataset("eval")?))
        .collect::<Result<_>>()?;

    let mut report = EvalReport::new();
    let mut points = Vec::with_capacity(sizes.len());
    for &size in sizes {
        let prefix = family_prefix(&family, size);
        let defense =
            MuldefClassifier::new(prefix, rng::derive(opts.seed, &format!("selection-{size}")))?;

        let mut min_exact = f64::INFINITY;
        let mut min_mc = f64::INFINITY;
        for (set, flags) in eval_sets[..size].iter().zip(&flags_per_set) {
            let member_view: Vec<Vec<bool>> = flags[..size].to_vec();
            let est = estimate_from_flags(
                &member_view,
                &defense,
                opts.draws,
                rng::derive(
                    opts.seed,
                    &format!("mc-size-{size}-{}", set.source_model_id),
                ),
            )?;
            min_exact = min_exact.min(est.value());
            min_mc = min_mc.min(est.monte_carlo);
            report.push(
                DEFENSE_EXACT,
                format!("{}@p{size}", set.source_model_id),
                set.attack.kind_name(),
                set.scenario.to_string(),
                set.seed,
                est.value(),
                est.n,
            );
        }

        let (direct_exact, direct_mc) = match direct {
            Some((cw, rule)) => {
                let d = direct_attack_eval(&defense, cw, rule, test_set, opts)?;
                report.push(
                    DEFENSE_EXACT,
                    format!("{}@p{size}", d.eval_set.source_model_id),
                    d.eval_set.attack.kind_name(),
                    d.eval_set.scenario.to_string(),
                    d.eval_set.seed,
                    d.exact,
                    d.eval_set.examples.len(),
                );
                (Some(d.exact), Some(d.monte_carlo))
            }
            None => (None, None),
        };

        points.push(FamilySizePoint {
            size,
            indirect_min_exact: min_exact,
            indirect_min_mc: min_mc,
            direct_exact,
            direct_mc,
        });
    }

    report.context.push(format!(
        "family-size sweep: sizes {:?}, largest family {} members, {} eval examples",
        sizes,
        family.len(),
        examples.len()
    ));
    report
        .timings
        .push(("sweep-family-size".into(), started.elapsed()));
    Ok(FamilySweep {
        points,
        family,
        eval_sets,
        report,
    })
}

/// Exact CSV header, also enforced on parse.
pub const CSV_HEADER: &str = "classifier,adv_source,attack,scenario,seed,accuracy,n";

/// Sibling path `<stem><suffix>.txt` next to the CSV.
fn sibling(csv_path: &Path, suffix: &str) -> Result<PathBuf> {
    let stem = csv_path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::config("report", "CSV path needs a UTF-8 file name"))?;
    Ok(csv_path.with_file_name(format!("{stem}{suffix}.txt")))
}

/// Writes the report: `<path>` gets the flat CSV, `<stem>-summary.txt`
/// the provenance lines, `<stem>-timings.txt` the stage timings.
///
/// Accuracies are printed with shortest round-trip formatting, so parsing
/// the CSV recovers the in-memory values exactly; CSV and summary bytes
/// are deterministic under fixed seeds (timings deliberately live in
/// their own file).
pub fn emit_report(report: &EvalReport, csv_path: impl AsRef<Path>) -> Result<()> {
    let csv_path = csv_path.as_ref();
    report.validate()?;

    let mut csv = String::with_capacity(64 * (report.rows.len() + 1));
    csv.push_str(CSV_HEADER);
    csv.push('\n');
    for row in &report.rows {
        writeln!(
            csv,
            "{},{},{},{},{},{},{}",
            row.classifier, row.adv_source, row.attack, row.scenario, row.seed, row.accuracy, row.n
        )
        .expect("string writes are infallible");
    }

    if let Some(dir) = csv_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(csv_path, csv).map_err(|e| Error::io(csv_path, e))?;

    let mut summary = String::new();
    writeln!(
        summary,
        "evaluation summary: {} measurements",
        report.rows.len()
    )
    .unwrap();
    for line in &report.context {
        writeln!(summary, "{line}").unwrap();
    }
    let summary_path = sibling(csv_path, "-summary")?;
    std::fs::write(&summary_path, summary).map_err(|e| Error::io(&summary_path, e))?;

    let mut timings = String::new();
    for (stage, took) in &report.timings {
        writeln!(timings, "{stage}: {:.3}s", took.as_secs_f64()).unwrap();
    }
    let timings_path = sibling(csv_path, "-timings")?;
    std::fs::write(&timings_path, timings).map_err(|e| Error::io(&timings_path, e))?;
    Ok(())
}

/// Parses a CSV written by [`emit_report`]. Strict: exact header, exactly
/// seven fields per row.
pub fn parse_report_csv(path: impl AsRef<Path>) -> Result<Vec<ReportRow>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(header) if header == CSV_HEADER => {}
        other => {
            return Err(Error::config(
                "report",
                format!(
                    "bad CSV header {:?}, expected {CSV_HEADER:?}",
                    other.unwrap_or("")
                ),
            ))
        }
    }
    let mut rows = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            return Err(Error::config(
                "report",
                format!(
                    "line {}: expected 7 fields, got {}",
                    lineno + 2,
                    fields.len()
                ),
            ));
        }
        let num = |what: &str, s: &str| -> Result<f64> {
            s.parse::<f64>().map_err(|_| {
                Error::config("report", format!("line {}: bad {what} {s:?}", lineno + 2))
            })
        };
        rows.push(ReportRow {
            classifier: fields[0].to_string(),
            adv_source: fields[1].to_string(),
            attack: fields[2].to_string(),
            scenario: fields[3].to_string(),
            seed: fields[4].parse::<u64>().map_err(|_| {
                Error::config(
                    "report",
                    format!("line {}: bad seed {:?}", lineno + 2, fields[4]),
                )
            })?,
            accuracy: num("accuracy", fields[5])?,
            n: fields[6].parse::<usize>().map_err(|_| {
                Error::config(
                    "report",
                    format!("line {}: bad n {:?}", lineno + 2, fields[6]),
                )
            })?,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(classifier: &str, accuracy: f64) -> ReportRow {
        ReportRow {
            classifier: classifier.to_string(),
            adv_source: "t".to_string(),
            attack: "fgsm".to_string(),
            scenario: "white-box".to_string(),
            seed: 7,
            accuracy,
            n: 10,
        }
    }

    #[test]
    fn report_validation_rejects_broken_rows() {
        let ok = EvalReport {
            rows: vec![row("m", 0.5)],
            ..Default::default()
        };
        ok.validate().unwrap();

        let bad_acc = EvalReport {
            rows: vec![row("m", 1.5)],
            ..Default::default()
        };
        assert!(bad_acc.validate().is_err());

        let comma = EvalReport {
            rows: vec![row("a,b", 0.5)],
            ..Default::default()
        };
        assert!(comma.validate().is_err());

        let mut empty_n = row("m", 0.5);
        empty_n.n = 0;
        let report = EvalReport {
            rows: vec![empty_n],
            ..Default::default()
        };
        assert!(report.validate().is_err());
    }

    #[test]
    fn eval_options_validation() {
        EvalOptions::default().validate().unwrap();
        assert!(EvalOptions {
            draws: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(EvalOptions {
            eval_subset: Some(0),
            ..Default::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn csv_header_matches_row_shape() {
        assert_eq!(CSV_HEADER.split(',').count(), 7);
    }
}
