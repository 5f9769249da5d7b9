//! The command pipeline: train the target, craft attack sets, generate the
//! defense family, evaluate, or replay all four stages from one config.
//!
//! Every command runs inside a `Session`: the resolved config is written to
//! (or checked against) `resolved-config.toml` in the output directory, so
//! artifacts from different configs can never silently mix, and a finished
//! directory documents exactly what produced it.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use sha2::{Digest, Sha256};

use muldef_core::attack::{
    blackbox_attack, carlini_wagner, fgsm, load_set, save_set, AdversarialSet, AttackConfig,
};
use muldef_core::data::{sample_subset, split_subset, Dataset};
use muldef_core::defense::{generate_family, load_family, save_family, MuldefClassifier};
use muldef_core::eval::{
    cross_attack_eval, defense_set_accuracy, direct_attack_eval, emit_report, indirect_attack_eval,
    model_set_accuracy, parse_report_csv, sweep_augmentation, sweep_family_size, AugmentationPoint,
    EvalOptions, EvalReport, FamilySizePoint,
};
use muldef_core::model_file::{load_model, save_model};
use muldef_core::network::{accuracy, Network};
use muldef_core::rng;
use muldef_core::train::train;

use crate::config::{load_data, ConfigFile, EvalScenario, Experiment};

pub const RESOLVED_CONFIG: &str = "resolved-config.toml";
pub const TARGET_MODEL: &str = "target.mnet";
pub const WHITE_BOX_SET: &str = "adv-white-box.mset";
pub const BLACK_BOX_SET: &str = "adv-black-box.mset";
pub const FAMILY_DIR: &str = "family";
pub const EVAL_CSV: &str = "eval.csv";

/// Attack scenario selector for `cmd_attack`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttackScenario {
    WhiteBox,
    BlackBox,
}

impl std::str::FromStr for AttackScenario {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "white-box" => Ok(AttackScenario::WhiteBox),
            "black-box" => Ok(AttackScenario::BlackBox),
            other => bail!("unknown scenario {other:?}, expected white-box or black-box"),
        }
    }
}

/// Shared state of one command invocation: resolved config, output
/// directory, and the loaded dataset with the black-box holdout carved off.
pub struct Session {
    pub resolved: ConfigFile,
    pub exp: Experiment,
    pub out: PathBuf,
    pub train_set: Dataset,
    /// Test split with the holdout removed (when a blackbox section exists).
    pub test_set: Dataset,
    pub holdout: Option<Dataset>,
    pub config_digest: String,
}

impl Session {
    /// Resolves the config, loads data, and claims the output directory.
    ///
    /// The resolved config is written on first use; a later command in the
    /// same directory must resolve to byte-identical TOML or it is refused.
    pub fn prepare(cfg: &ConfigFile, out: &Path) -> Result<Session> {
        let resolved = cfg.resolved()?;
        let exp = resolved.build()?;
        let toml = resolved.to_toml()?;
        let config_digest = hex_digest(toml.as_bytes());

        std::fs::create_dir_all(out)
            .with_context(|| format!("creating output directory {}", out.display()))?;
        let cfg_path = out.join(RESOLVED_CONFIG);
        if cfg_path.exists() {
            let existing = std::fs::read_to_string(&cfg_path)
                .with_context(|| format!("reading {}", cfg_path.display()))?;
            if existing != toml {
                bail!(
                    "{} holds artifacts from a different config; use a fresh \
                     --out directory or delete it",
                    out.display()
                );
            }
        } else {
            std::fs::write(&cfg_path, &toml)
                .with_context(|| format!("writing {}", cfg_path.display()))?;
        }

        let data = load_data(&exp.dataset)?;
        println!(
            "dataset: {} (train {}, test {})",
            data.source,
            data.train.len(),
            data.test.len()
        );
        let (test_set, holdout) = if resolved.blackbox.is_some() {
            let seed = rng::derive(exp.dataset.seed, "holdout");
            let (holdout, rest) = split_subset(&data.test, exp.dataset.holdout_size, seed)?;
            (rest, Some(holdout))
        } else {
            (data.test, None)
        };

        Ok(Session {
            resolved,
            exp,
            out: out.to_path_buf(),
            train_set: data.train,
            test_set,
            holdout,
            config_digest,
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn eval_options(&self, seed: u64) -> EvalOptions {
        EvalOptions {
            draws: self.exp.eval.draws,
            seed,
            eval_subset: self.exp.eval.eval_subset,
        }
    }

    /// The examples an attack set is crafted from: the configured eval
    /// subset of the test split, or the whole split.
    fn attack_examples(&self, tag: &str) -> Result<Dataset> {
        match self.exp.eval.eval_subset {
            Some(n) if n < self.test_set.len() => Ok(sample_subset(
                &self.test_set,
                n,
                rng::derive(self.exp.eval.seed, tag),
            )?),
            _ => Ok(self.test_set.clone()),
        }
    }

    /// Loads the trained target if this directory has one, else trains and
    /// saves it.
    fn ensure_target(&self) -> Result<Network<f32>> {
        let path = self.path(TARGET_MODEL);
        if path.exists() {
            return load_model(&path).map_err(Into::into);
        }
        cmd_train(self)
    }

    /// Loads the defense family if this directory has one, else generates
    /// and saves it.
    fn ensure_family(&self) -> Result<MuldefClassifier> {
        let dir = self.path(FAMILY_DIR);
        let family = if dir.join("manifest.txt").exists() {
            load_family(&dir)?
        } else {
            cmd_defend(self)?
        };
        MuldefClassifier::new(family, self.exp.eval.selection_seed).map_err(Into::into)
    }
}

fn hex_digest(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let out = hasher.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}

fn fresh_network(session: &Session) -> Result<Network<f32>> {
    let arch = &session.exp.architecture;
    if session.train_set.feature_shape() != arch.input_shape.as_slice() {
        bail!(
            "architecture {} expects input shape {:?} but the dataset provides {:?}",
            arch.name,
            arch.input_shape,
            session.train_set.feature_shape()
        );
    }
    Network::new(
        session.exp.model_id.clone(),
        arch.input_shape.clone(),
        arch.layers.clone(),
        session.exp.init_seed,
    )
    .map_err(Into::into)
}

/// Trains the target model and saves it to `target.mnet`. Reruns with the
/// same config produce byte-identical files.
pub fn cmd_train(session: &Session) -> Result<Network<f32>> {
    let started = Instant::now();
    let mut net = fresh_network(session)?;
    let report = train(&mut net, &session.train_set, &session.exp.train)?;
    let test_acc = accuracy(&net, &session.test_set)?;
    let path = session.path(TARGET_MODEL);
    save_model(&net, &path)?;
    // Reload to prove the artifact is usable, not just present.
    load_model(&path).context("verifying saved model")?;
    println!(
        "trained {}: {} epochs ({:?}), test accuracy {:.4}, {:.1}s -> {}",
        net.id(),
        report.epochs_run(),
        report.stop,
        test_acc,
        started.elapsed().as_secs_f64(),
        path.display()
    );
    Ok(net)
}

fn craft(model: &Network<f32>, data: &Dataset, attack: &AttackConfig) -> Result<AdversarialSet> {
    match attack {
        AttackConfig::Fgsm(a) => fgsm(model, data, a).map_err(Into::into),
        AttackConfig::Cw(a) => carlini_wagner(model, data, a).map_err(Into::into),
    }
}

/// Crafts an adversarial set against the trained target and saves it.
///
/// White-box crafts directly from the target's gradients; black-box trains
/// a substitute against the target as a label oracle first (requires a
/// `[blackbox]` config section).
pub fn cmd_attack(session: &Session, scenario: AttackScenario) -> Result<AdversarialSet> {
    let started = Instant::now();
    let target = session.ensure_target()?;
    let (set, file) = match scenario {
        AttackScenario::WhiteBox => {
            let examples = session.attack_examples("attack-sample")?;
            (
                craft(&target, &examples, &session.exp.attack)?,
                WHITE_BOX_SET,
            )
        }
        AttackScenario::BlackBox => {
            let plan = session.exp.blackbox.as_ref().ok_or_else(|| {
                anyhow::anyhow!("black-box attack needs a [blackbox] config section")
            })?;
            let holdout = session
                .holdout
                .as_ref()
                .expect("holdout split with blackbox");
            let examples = session.attack_examples("attack-sample")?;
            let cfg = plan.to_config(session.exp.train.clone(), session.exp.attack.clone());
            let mut oracle =
                |batch: &muldef_core::tensor::Tensor<f32>| target.predict_labels(batch);
            let outcome = blackbox_attack(&mut oracle, holdout, &examples, &cfg)?;
            println!(
                "substitute: trained on {} examples, {} oracle queries",
                outcome.substitute_training_size, outcome.oracle_queries
            );
            (outcome.set, BLACK_BOX_SET)
        }
    };
    let path = session.path(file);
    save_set(&set, &path)?;
    load_set(&path).context("verifying saved adversarial set")?;
    println!(
        "attack {} ({}): {} examples, failure rate {:.4}, {:.1}s -> {}",
        session.exp.attack.kind_name(),
        set.scenario,
        set.examples.len(),
        set.failure_rate(),
        started.elapsed().as_secs_f64(),
        path.display()
    );
    Ok(set)
}

/// Generates the defense family from the trained target and saves it.
pub fn cmd_defend(session: &Session) -> Result<muldef_core::defense::ModelFamily> {
    let started = Instant::now();
    let target = session.ensure_target()?;
    let family = generate_family(&target, &session.train_set, &session.exp.generator)?;
    let dir = session.path(FAMILY_DIR);
    save_family(&family, &dir)?;
    load_family(&dir).context("verifying saved family")?;
    println!(
        "family: {} models, {} adversarial sets, {:.1}s -> {}",
        family.models.len(),
        family.adv_sets.len(),
        started.elapsed().as_secs_f64(),
        dir.display()
    );
    Ok(family)
}

/// Runs every scenario in the eval plan `repeats` times with derived
/// per-repeat seeds, merges the rows, and writes `eval.csv` plus its
/// summary and timing siblings.
pub fn cmd_eval(session: &Session) -> Result<EvalReport> {
    let started = Instant::now();
    let target = session.ensure_target()?;
    let defense = session.ensure_family()?;

    let mut report = EvalReport::new();
    report
        .context
        .push(format!("config sha256 {}", session.config_digest));
    report.context.push(format!(
        "dataset {} train {} test {}",
        session.train_set.name(),
        session.train_set.len(),
        session.test_set.len()
    ));

    for repeat in 0..session.exp.eval.repeats {
        let seed = rng::derive(session.exp.eval.seed, &format!("repeat-{repeat}"));
        let opts = session.eval_options(seed);
        for scenario in &session.exp.eval.plan {
            run_scenario(
                session,
                &target,
                &defense,
                *scenario,
                &opts,
                repeat,
                &mut report,
            )?;
        }
    }

    let csv = session.path(EVAL_CSV);
    emit_report(&report, &csv)?;
    let rows = parse_report_csv(&csv).context("verifying emitted report")?;
    println!(
        "eval: {} rows ({} scenarios x {} repeats), {:.1}s -> {}",
        rows.len(),
        session.exp.eval.plan.len(),
        session.exp.eval.repeats,
        started.elapsed().as_secs_f64(),
        csv.display()
    );
    Ok(report)
}

fn run_scenario(
    session: &Session,
    target: &Network<f32>,
    defense: &MuldefClassifier,
    scenario: EvalScenario,
    opts: &EvalOptions,
    repeat: usize,
    report: &mut EvalReport,
) -> Result<()> {
    let exp = &session.exp;
    match scenario {
        EvalScenario::Indirect => {
            let out = indirect_attack_eval(defense, &exp.attack, &session.test_set, opts)?;
            note_minima(report, scenario, repeat, out.min_exact, out.min_mc);
            report.merge(out.report);
        }
        EvalScenario::Direct => {
            let cw = match &exp.attack {
                AttackConfig::Cw(c) => c.clone(),
                // The direct (merged-model) attack is gradient-descent
                // based; FGSM configs map onto it only via CW defaults.
                AttackConfig::Fgsm(_) => {
                    bail!("eval.plan: \"direct\" needs a cw attack section")
                }
            };
            let out = direct_attack_eval(defense, &cw, exp.merge_rule, &session.test_set, opts)?;
            report.context.push(format!(
                "direct repeat {repeat}: merged acc {:.4}, defense exact {:.4}",
                out.merged_self_accuracy, out.exact
            ));
            report.merge(out.report);
        }
        EvalScenario::Cross => {
            let cross = exp.cross_attack.clone().expect("validated at build time");
            let out = cross_attack_eval(defense, &cross, &session.test_set, opts)?;
            note_minima(report, scenario, repeat, out.min_exact, out.min_mc);
            report.merge(out.report);
        }
        EvalScenario::Blackbox => {
            let out = blackbox_eval(session, target, defense, opts, repeat)?;
            report.merge(out);
        }
        EvalScenario::SweepAugmentation => {
            let points = sweep_augmentation(
                target,
                &session.train_set,
                &session.test_set,
                &exp.attack,
                &exp.eval.sweep_fractions,
                &exp.train,
                opts,
            )?;
            let path = session.path(&format!("sweep-augmentation-r{repeat}.csv"));
            write_augmentation_csv(&points, &path)?;
            report.context.push(format!(
                "augmentation sweep repeat {repeat} -> {}",
                path.display()
            ));
        }
        EvalScenario::SweepFamilySize => {
            let direct = match &exp.attack {
                AttackConfig::Cw(c) => Some((c, exp.merge_rule)),
                AttackConfig::Fgsm(_) => None,
            };
            let direct = direct.map(|(c, r)| (c.clone(), r));
            let out = sweep_family_size(
                target,
                &session.train_set,
                &session.test_set,
                &exp.generator,
                &exp.eval.sweep_sizes,
                direct.as_ref().map(|(c, r)| (c, *r)),
                opts,
            )?;
            let path = session.path(&format!("sweep-family-size-r{repeat}.csv"));
            write_family_csv(&out.points, &path)?;
            report.context.push(format!(
                "family-size sweep repeat {repeat} -> {}",
                path.display()
            ));
            report.merge(out.report);
        }
    }
    Ok(())
}

fn note_minima(
    report: &mut EvalReport,
    scenario: EvalScenario,
    repeat: usize,
    min_exact: f64,
    min_mc: f64,
) {
    report.context.push(format!(
        "{} repeat {repeat}: worst-set defense exact {min_exact:.4}, mc {min_mc:.4}",
        scenario.name()
    ));
}

/// Black-box evaluation: a substitute is trained against the undefended
/// target and another against the defense (each oracle query answered by a
/// freshly selected member), and both transfer sets are scored against
/// their oracle.
fn blackbox_eval(
    session: &Session,
    target: &Network<f32>,
    defense: &MuldefClassifier,
    opts: &EvalOptions,
    repeat: usize,
) -> Result<EvalReport> {
    let started = Instant::now();
    let exp = &session.exp;
    let plan = exp.blackbox.as_ref().expect("validated at build time");
    let holdout = session
        .holdout
        .as_ref()
        .expect("holdout split with blackbox");
    let examples = match opts.eval_subset {
        Some(n) if n < session.test_set.len() => {
            sample_subset(&session.test_set, n, rng::derive(opts.seed, "bb-sample"))?
        }
        _ => session.test_set.clone(),
    };
    let cfg = plan.to_config(exp.train.clone(), exp.attack.clone());
    let mut report = EvalReport::new();
    let attack_name = exp.attack.kind_name();

    // Substitute trained against the bare target.
    let mut target_oracle = |batch: &muldef_core::tensor::Tensor<f32>| target.predict_labels(batch);
    let vs_target = blackbox_attack(&mut target_oracle, holdout, &examples, &cfg)?;
    let target_acc = model_set_accuracy(target, &vs_target.set)?;
    report.rows.push(row(
        target.id(),
        &vs_target.set.source_model_id,
        attack_name,
        &vs_target.set.scenario.to_string(),
        vs_target.set.seed,
        target_acc.monte_carlo,
        target_acc.n,
    ));
    report.context.push(format!(
        "blackbox repeat {repeat} vs target: substitute trained on {} examples, \
         {} oracle queries, target acc {:.4}",
        vs_target.substitute_training_size, vs_target.oracle_queries, target_acc.monte_carlo
    ));

    // Substitute trained against the randomized defense. Oracle draws come
    // from a dedicated stream so they never alias evaluation draws.
    let oracle_seed = rng::derive(opts.seed, "bb-oracle");
    let mut next_draw = 0u64;
    let mut defense_oracle = |batch: &muldef_core::tensor::Tensor<f32>| {
        let first = rng::mix(oracle_seed, next_draw);
        next_draw += batch.rows() as u64;
        defense.classify_batch(batch, first)
    };
    let vs_defense = blackbox_attack(&mut defense_oracle, holdout, &examples, &cfg)?;
    let est = defense_set_accuracy(
        defense,
        &vs_defense.set,
        opts.draws,
        rng::derive(opts.seed, "mc-blackbox"),
    )?;
    let exact = est.exact_expectation.expect("defense estimate is exact");
    let scenario = vs_defense.set.scenario.to_string();
    report.rows.push(row(
        muldef_core::eval::DEFENSE_EXACT,
        &vs_defense.set.source_model_id,
        attack_name,
        &scenario,
        vs_defense.set.seed,
        exact,
        est.n,
    ));
    report.rows.push(row(
        muldef_core::eval::DEFENSE_MC,
        &vs_defense.set.source_model_id,
        attack_name,
        &scenario,
        rng::derive(opts.seed, "mc-blackbox"),
        est.monte_carlo,
        est.n,
    ));
    report.context.push(format!(
        "blackbox repeat {repeat} vs defense: substitute trained on {} examples, \
         {} oracle queries, defense exact {:.4}",
        vs_defense.substitute_training_size, vs_defense.oracle_queries, exact
    ));
    report
        .timings
        .push(("blackbox-eval".to_string(), started.elapsed()));
    Ok(report)
}

fn row(
    classifier: &str,
    adv_source: &str,
    attack: &str,
    scenario: &str,
    seed: u64,
    accuracy: f64,
    n: usize,
) -> muldef_core::eval::ReportRow {
    muldef_core::eval::ReportRow {
        classifier: classifier.to_string(),
        adv_source: adv_source.to_string(),
        attack: attack.to_string(),
        scenario: scenario.to_string(),
        seed,
        accuracy,
        n,
    }
}

fn write_augmentation_csv(points: &[AugmentationPoint], path: &Path) -> Result<()> {
    let mut text = String::from(
        "fraction,adv_examples,retrained_test_accuracy,retrained_self_accuracy,separate_model_accuracy\n",
    );
    for p in points {
        text.push_str(&format!(
            "{},{},{},{},{}\n",
            p.fraction,
            p.adv_examples,
            p.retrained_test_accuracy,
            p.retrained_self_accuracy,
            p.separate_model_accuracy
        ));
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_family_csv(points: &[FamilySizePoint], path: &Path) -> Result<()> {
    let mut text = String::from("size,indirect_min_exact,indirect_min_mc,direct_exact,direct_mc\n");
    let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
    for p in points {
        text.push_str(&format!(
            "{},{},{},{},{}\n",
            p.size,
            p.indirect_min_exact,
            p.indirect_min_mc,
            opt(p.direct_exact),
            opt(p.direct_mc)
        ));
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Replays the whole experiment: train, attack (both scenarios the config
/// supports), defend, eval. Identical configs and seeds reproduce every
/// artifact byte for byte (timing files aside).
pub fn cmd_repro(session: &Session) -> Result<()> {
    cmd_train(session)?;
    cmd_attack(session, AttackScenario::WhiteBox)?;
    if session.resolved.blackbox.is_some() {
        cmd_attack(session, AttackScenario::BlackBox)?;
    }
    cmd_defend(session)?;
    cmd_eval(session)?;
    println!("repro complete -> {}", session.out.display());
    Ok(())
}
