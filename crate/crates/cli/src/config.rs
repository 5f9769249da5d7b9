//! Experiment configuration: a TOML file with every knob optional, resolved
//! into fully explicit settings before anything runs. The resolved form is
//! written next to the outputs so a run can be replayed from its artifacts
//! alone.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};

use muldef_core::attack::{AttackConfig, BlackBoxConfig, CwConfig, FgsmConfig};
use muldef_core::data::{load_cifar_binary, load_idx, sample_subset, synth_digits, Dataset};
use muldef_core::defense::{ConvergenceStop, GeneratorConfig, MergeRule, SolutionKind};
use muldef_core::layer::LayerSpec;
use muldef_core::rng;
use muldef_core::train::{Optimizer, TrainConfig};

/// Experiment scale: `full` uses paper-sized settings and real datasets,
/// `desk` shrinks everything to run on one CPU core in minutes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scale {
    Desk,
    Full,
}

/// Derives a stage seed that stays within TOML's integer range (i64), so
/// resolved configs always serialize.
pub fn config_seed(seed: u64, tag: &str) -> u64 {
    rng::derive(seed, tag) & (i64::MAX as u64)
}

impl std::str::FromStr for Scale {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Scale::Desk),
            "full" => Ok(Scale::Full),
            other => bail!("unknown scale {other:?}, expected desk or full"),
        }
    }
}

// ---------------------------------------------------------------------------
// File schema
// ---------------------------------------------------------------------------

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    #[serde(default)]
    pub dataset: DatasetSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub attack: AttackSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cross_attack: Option<AttackSection>,
    #[serde(default)]
    pub defense: DefenseSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub blackbox: Option<BlackboxSection>,
    #[serde(default)]
    pub eval: EvalSection,
}

impl Default for ConfigFile {
    fn default() -> Self {
        ConfigFile {
            dataset: DatasetSection::default(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            attack: AttackSection::default(),
            cross_attack: None,
            defense: DefenseSection::default(),
            blackbox: None,
            eval: EvalSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    /// `auto` | `mnist` | `cifar10` | `synthetic`. `auto` uses the IDX
    /// files when the data directory has them, else the procedural digits.
    pub source: String,
    /// Subset sizes; omitted = the full split. Subsets are class-balanced.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_size: Option<usize>,
    pub seed: u64,
    /// Where the dataset files live; falls back to `MULDEF_DATA_DIR`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data_dir: Option<PathBuf>,
    /// Examples carved off the test split as the black-box attacker's
    /// labeled holdout.
    pub holdout_size: usize,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            source: "auto".to_string(),
            train_size: None,
            test_size: None,
            seed: 7,
            data_dir: None,
            holdout_size: 150,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub id: String,
    /// Named architecture, or `inline` with `input_shape` + `layers`.
    pub architecture: String,
    pub init_seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input_shape: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub layers: Vec<LayerEntry>,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            id: "target".to_string(),
            architecture: "mnist-cnn".to_string(),
            init_seed: 5,
            input_shape: None,
            layers: Vec::new(),
        }
    }
}

/// Serializable mirror of the engine's layer specification.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum LayerEntry {
    Dense {
        inputs: usize,
        outputs: usize,
        #[serde(default)]
        l2: f64,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        #[serde(default)]
        padding: usize,
    },
    Relu,
    MaxPool2d {
        window: usize,
        stride: usize,
    },
    Dropout {
        keep: f64,
    },
    Flatten,
    Softmax,
}

impl LayerEntry {
    fn to_spec(&self) -> LayerSpec {
        match *self {
            LayerEntry::Dense {
                inputs,
                outputs,
                l2,
            } => LayerSpec::Dense {
                inputs,
                outputs,
                l2,
            },
            LayerEntry::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            },
            LayerEntry::Relu => LayerSpec::Relu,
            LayerEntry::MaxPool2d { window, stride } => LayerSpec::MaxPool2d { window, stride },
            LayerEntry::Dropout { keep } => LayerSpec::Dropout { keep },
            LayerEntry::Flatten => LayerSpec::Flatten,
            LayerEntry::Softmax => LayerSpec::Softmax,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    /// `adam` or `sgd`.
    pub optimizer: String,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stop_min_delta: f64,
    pub early_stop_patience: usize,
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let tc = TrainConfig::default();
        TrainSection {
            optimizer: "adam".to_string(),
            learning_rate: match tc.optimizer {
                Optimizer::Adam { learning_rate, .. } => learning_rate,
                Optimizer::Sgd { learning_rate } => learning_rate,
            },
            batch_size: tc.batch_size,
            max_epochs: tc.max_epochs,
            early_stop_min_delta: tc.early_stop_min_delta,
            early_stop_patience: tc.early_stop_patience,
            validation_fraction: tc.validation_fraction,
            seed: tc.seed,
        }
    }
}

impl TrainSection {
    pub fn to_config(&self) -> Result<TrainConfig> {
        let optimizer = match self.optimizer.as_str() {
            "adam" => Optimizer::adam(self.learning_rate),
            "sgd" => Optimizer::Sgd {
                learning_rate: self.learning_rate,
            },
            other => bail!("train.optimizer: unknown optimizer {other:?}"),
        };
        Ok(TrainConfig {
            optimizer,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            early_stop_min_delta: self.early_stop_min_delta,
            early_stop_patience: self.early_stop_patience,
            validation_fraction: self.validation_fraction,
            seed: self.seed,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum AttackSection {
    Fgsm {
        eps: f32,
        clip_min: f32,
        clip_max: f32,
        iterations: usize,
    },
    Cw {
        confidence: f32,
        max_iterations: usize,
        c_init: f32,
        binary_search_steps: usize,
        step_size: f32,
        clip_min: f32,
        clip_max: f32,
    },
}

impl Default for AttackSection {
    fn default() -> Self {
        AttackSection::from_config(&AttackConfig::Fgsm(FgsmConfig::default()))
    }
}

impl AttackSection {
    /// Early, field-naming checks; the engine re-validates at run time.
    fn validate(&self, section: &str) -> Result<()> {
        match *self {
            AttackSection::Fgsm {
                eps,
                clip_min,
                clip_max,
                iterations,
            } => {
                if !(eps > 0.0 && eps.is_finite()) {
                    bail!("{section}.eps: must be positive and finite (got {eps})");
                }
                if !(clip_min < clip_max) {
                    bail!(
                        "{section}.clip_min: must be below clip_max (got {clip_min}..{clip_max})"
                    );
                }
                if iterations == 0 {
                    bail!("{section}.iterations: must be at least 1");
                }
            }
            AttackSection::Cw {
                confidence,
                max_iterations,
                binary_search_steps,
                step_size,
                clip_min,
                clip_max,
                ..
            } => {
                if !(confidence >= 0.0 && confidence.is_finite()) {
                    bail!("{section}.confidence: must be non-negative (got {confidence})");
                }
                if max_iterations == 0 {
                    bail!("{section}.max_iterations: must be at least 1");
                }
                if binary_search_steps == 0 {
                    bail!("{section}.binary_search_steps: must be at least 1");
                }
                if !(step_size > 0.0 && step_size.is_finite()) {
                    bail!("{section}.step_size: must be positive (got {step_size})");
                }
                if !(clip_min < clip_max) {
                    bail!(
                        "{section}.clip_min: must be below clip_max (got {clip_min}..{clip_max})"
                    );
                }
            }
        }
        Ok(())
    }

    pub fn from_config(cfg: &AttackConfig) -> Self {
        match cfg {
            AttackConfig::Fgsm(a) => AttackSection::Fgsm {
                eps: a.eps,
                clip_min: a.clip_min,
                clip_max: a.clip_max,
                iterations: a.iterations,
            },
            AttackConfig::Cw(a) => AttackSection::Cw {
                confidence: a.confidence,
                max_iterations: a.max_iterations,
                c_init: a.c_init,
                binary_search_steps: a.binary_search_steps,
                step_size: a.step_size,
                clip_min: a.clip_min,
                clip_max: a.clip_max,
            },
        }
    }

    pub fn to_config(&self) -> AttackConfig {
        match *self {
            AttackSection::Fgsm {
                eps,
                clip_min,
                clip_max,
                iterations,
            } => AttackConfig::Fgsm(FgsmConfig {
                eps,
                clip_min,
                clip_max,
                iterations,
            }),
            AttackSection::Cw {
                confidence,
                max_iterations,
                c_init,
                binary_search_steps,
                step_size,
                clip_min,
                clip_max,
            } => AttackConfig::Cw(CwConfig {
                confidence,
                max_iterations,
                c_init,
                binary_search_steps,
                step_size,
                clip_min,
                clip_max,
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DefenseSection {
    pub num_additional: usize,
    /// `solution1` (newest adversarial set only) or `solution2` (all).
    pub solution: String,
    pub aug_fraction: f64,
    pub rng_seed: u64,
    #[serde(default = "default_true")]
    pub fresh_init: bool,
    pub convergence_enabled: bool,
    pub convergence_min_delta: f64,
}

impl Default for DefenseSection {
    fn default() -> Self {
        let stop = ConvergenceStop::default();
        DefenseSection {
            num_additional: 4,
            solution: "solution2".to_string(),
            aug_fraction: 0.15,
            rng_seed: 11,
            fresh_init: true,
            convergence_enabled: stop.enabled,
            convergence_min_delta: stop.min_delta,
        }
    }
}

impl DefenseSection {
    pub fn to_generator(
        &self,
        attack: AttackConfig,
        train: TrainConfig,
    ) -> Result<GeneratorConfig> {
        let solution = match self.solution.as_str() {
            "solution1" => SolutionKind::Solution1,
            "solution2" => SolutionKind::Solution2,
            other => bail!("defense.solution: unknown solution {other:?}"),
        };
        let mut cfg =
            GeneratorConfig::new(self.num_additional, solution, self.aug_fraction, attack);
        cfg.train = train;
        cfg.rng_seed = self.rng_seed;
        cfg.fresh_init = self.fresh_init;
        cfg.convergence_stop = ConvergenceStop {
            enabled: self.convergence_enabled,
            min_delta: self.convergence_min_delta,
        };
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BlackboxSection {
    pub augmentation_epochs: usize,
    pub lambda: f32,
    /// Named architecture of the substitute model.
    pub architecture: String,
    pub seed: u64,
}

impl Default for BlackboxSection {
    fn default() -> Self {
        BlackboxSection {
            augmentation_epochs: 5,
            lambda: 0.1,
            architecture: "substitute-mlp".to_string(),
            seed: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Which scenarios `cmd_eval`/`cmd_repro` run.
    pub plan: Vec<EvalScenario>,
    pub draws: u64,
    pub seed: u64,
    /// Examples per evaluation adversarial set; omitted = full test split.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_subset: Option<usize>,
    pub repeats: usize,
    pub selection_seed: u64,
    /// `mean-probs` or `mean-logits` for the merged-model attack.
    pub merge_rule: String,
    pub sweep_fractions: Vec<f64>,
    pub sweep_sizes: Vec<usize>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            plan: vec![EvalScenario::Indirect],
            draws: 100,
            seed: 0,
            eval_subset: None,
            repeats: 3,
            selection_seed: 17,
            merge_rule: "mean-probs".to_string(),
            sweep_fractions: vec![0.0, 0.05, 0.1, 0.15, 0.25, 0.5],
            sweep_sizes: vec![1, 2, 3, 4, 5],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalScenario {
    Indirect,
    Direct,
    Blackbox,
    Cross,
    SweepAugmentation,
    SweepFamilySize,
}

impl EvalScenario {
    pub fn name(&self) -> &'static str {
        match self {
            EvalScenario::Indirect => "indirect",
            EvalScenario::Direct => "direct",
            EvalScenario::Blackbox => "blackbox",
            EvalScenario::Cross => "cross",
            EvalScenario::SweepAugmentation => "sweep-augmentation",
            EvalScenario::SweepFamilySize => "sweep-family-size",
        }
    }
}

// ---------------------------------------------------------------------------
// Loading, overrides, resolution
// ---------------------------------------------------------------------------

impl ConfigFile {
    /// Parses a TOML config; unknown keys and type errors come back with
    /// the line and column from the TOML parser.
    pub fn from_toml(text: &str) -> Result<ConfigFile> {
        toml::from_str(text).map_err(|e| anyhow!("{e}"))
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<ConfigFile> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).context("serializing resolved config")
    }

    /// Replaces every seed with one derived from `seed`, so a single flag
    /// reseeds the entire experiment deterministically.
    pub fn override_seeds(&mut self, seed: u64) {
        self.dataset.seed = config_seed(seed, "dataset");
        self.model.init_seed = config_seed(seed, "init");
        self.train.seed = config_seed(seed, "train");
        self.defense.rng_seed = config_seed(seed, "defense");
        self.eval.seed = config_seed(seed, "eval");
        self.eval.selection_seed = config_seed(seed, "selection");
        if let Some(bb) = &mut self.blackbox {
            bb.seed = config_seed(seed, "blackbox");
        }
    }

    /// Shrinks the experiment to desk scale: the small conv net, subset
    /// corpus sizes, shorter training, capped optimizer-attack iterations,
    /// and bounded evaluation sets. `Full` leaves the config untouched.
    pub fn apply_scale(&mut self, scale: Scale) {
        if scale == Scale::Full {
            return;
        }
        self.dataset.train_size = Some(self.dataset.train_size.unwrap_or(12_000).min(12_000));
        self.dataset.test_size = Some(self.dataset.test_size.unwrap_or(2_000).min(2_000));
        if self.model.architecture != "inline" {
            self.model.architecture = "desk-cnn".to_string();
        }
        self.train.max_epochs = self.train.max_epochs.min(6);
        for attack in [Some(&mut self.attack), self.cross_attack.as_mut()]
            .into_iter()
            .flatten()
        {
            if let AttackSection::Cw {
                max_iterations,
                binary_search_steps,
                ..
            } = attack
            {
                *max_iterations = (*max_iterations).min(60);
                *binary_search_steps = (*binary_search_steps).min(2);
            }
        }
        let cap = if matches!(self.attack, AttackSection::Cw { .. }) {
            96
        } else {
            512
        };
        self.eval.eval_subset = Some(self.eval.eval_subset.unwrap_or(cap).min(cap));
    }

    /// Materializes defaults. The schema already fills every omitted field
    /// at parse time, so resolution is cloning plus cross-field checks;
    /// the result serializes with every knob explicit.
    pub fn resolved(&self) -> Result<ConfigFile> {
        let resolved = self.clone();
        resolved.build()?;
        Ok(resolved)
    }

    /// Validates and converts to engine types.
    pub fn build(&self) -> Result<Experiment> {
        let train = self.train.to_config()?;
        self.attack.validate("attack")?;
        if let Some(cross) = &self.cross_attack {
            cross.validate("cross_attack")?;
        }
        let attack = self.attack.to_config();
        let generator = self.defense.to_generator(attack.clone(), train.clone())?;
        let architecture = resolve_architecture(&self.model)?;
        let merge_rule = match self.eval.merge_rule.as_str() {
            "mean-probs" => MergeRule::MeanProbs,
            "mean-logits" => MergeRule::MeanLogits,
            other => bail!("eval.merge_rule: unknown rule {other:?}"),
        };
        if self.eval.repeats == 0 {
            bail!("eval.repeats: must be at least 1");
        }
        if self.eval.draws == 0 {
            bail!("eval.draws: must be at least 1");
        }
        if self.eval.plan.contains(&EvalScenario::Direct)
            && !matches!(self.attack, AttackSection::Cw { .. })
        {
            bail!("eval.plan: \"direct\" (merged-model) evaluation needs a cw [attack] section");
        }
        if self.eval.plan.contains(&EvalScenario::Cross) && self.cross_attack.is_none() {
            bail!("eval.plan: contains \"cross\" but no [cross_attack] section is present");
        }
        if self.eval.plan.contains(&EvalScenario::Blackbox) && self.blackbox.is_none() {
            bail!("eval.plan: contains \"blackbox\" but no [blackbox] section is present");
        }
        let blackbox = match &self.blackbox {
            Some(bb) => {
                let sub_arch = named_architecture(&bb.architecture).ok_or_else(|| {
                    anyhow!(
                        "blackbox.architecture: unknown architecture {:?}",
                        bb.architecture
                    )
                })?;
                Some(BlackboxPlan {
                    augmentation_epochs: bb.augmentation_epochs,
                    lambda: bb.lambda,
                    substitute: sub_arch,
                    seed: bb.seed,
                })
            }
            None => None,
        };

        Ok(Experiment {
            dataset: self.dataset.clone(),
            model_id: self.model.id.clone(),
            init_seed: self.model.init_seed,
            architecture,
            train,
            attack,
            cross_attack: self.cross_attack.as_ref().map(|a| a.to_config()),
            generator,
            blackbox,
            eval: self.eval.clone(),
            merge_rule,
        })
    }
}

/// Fully resolved experiment, in engine types.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub dataset: DatasetSection,
    pub model_id: String,
    pub init_seed: u64,
    pub architecture: Architecture,
    pub train: TrainConfig,
    pub attack: AttackConfig,
    pub cross_attack: Option<AttackConfig>,
    pub generator: GeneratorConfig,
    pub blackbox: Option<BlackboxPlan>,
    pub eval: EvalSection,
    pub merge_rule: MergeRule,
}

#[derive(Clone, Debug)]
pub struct BlackboxPlan {
    pub augmentation_epochs: usize,
    pub lambda: f32,
    pub substitute: Architecture,
    pub seed: u64,
}

impl BlackboxPlan {
    pub fn to_config(&self, train: TrainConfig, attack: AttackConfig) -> BlackBoxConfig {
        let mut cfg = BlackBoxConfig::new(self.substitute.layers.clone(), train, attack);
        cfg.augmentation_epochs = self.augmentation_epochs;
        cfg.lambda = self.lambda;
        cfg.seed = self.seed;
        cfg
    }
}

// ---------------------------------------------------------------------------
// Architectures
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct Architecture {
    pub name: String,
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

/// The named architectures: the desk-scale net the acceptance settings
/// call for, the two full-scale nets (three conv-64 layers for the digit
/// task, the heavier four-conv stack for CIFAR-10), and a small dense
/// substitute for black-box attackers.
pub fn named_architecture(name: &str) -> Option<Architecture> {
    let (input_shape, layers): (Vec<usize>, Vec<LayerSpec>) = match name {
        "desk-cnn" => (
            vec![28, 28, 1],
            vec![
                LayerSpec::Conv2d {
                    in_channels: 1,
                    out_channels: 16,
                    kernel: 3,
                    stride: 2,
                    padding: 1,
                },
                LayerSpec::Relu,
                LayerSpec::Conv2d {
                    in_channels: 16,
                    out_channels: 16,
                    kernel: 3,
                    stride: 2,
                    padding: 1,
                },
                LayerSpec::Relu,
                LayerSpec::Flatten,
                LayerSpec::Dense {
                    inputs: 16 * 7 * 7,
                    outputs: 64,
                    l2: 0.0,
                },
                LayerSpec::Relu,
                LayerSpec::Dense {
                    inputs: 64,
                    outputs: 10,
                    l2: 0.0,
                },
                LayerSpec::Softmax,
            ],
        ),
        "mnist-cnn" => (
            vec![28, 28, 1],
            vec![
                LayerSpec::Conv2d {
                    in_channels: 1,
                    out_channels: 64,
                    kernel: 5,
                    stride: 2,
                    padding: 2,
                },
                LayerSpec::Relu,
                LayerSpec::Conv2d {
                    in_channels: 64,
                    out_channels: 64,
                    kernel: 3,
                    stride: 2,
                    padding: 1,
                },
                LayerSpec::Relu,
                LayerSpec::Conv2d {
                    in_channels: 64,
                    out_channels: 64,
                    kernel: 3,
                    stride: 2,
                    padding: 1,
                },
                LayerSpec::Relu,
                LayerSpec::Flatten,
                LayerSpec::Dense {
                    inputs: 64 * 4 * 4,
                    outputs: 10,
                    l2: 0.0,
                },
                LayerSpec::Softmax,
            ],
        ),
        "cifar-cnn" => (
            vec![32, 32, 3],
            vec![
                LayerSpec::Conv2d {
                    in_channels: 3,
                    out_channels: 64,
                    kernel: 3,
                    stride: 1,
                    padding: 1,
                },
                LayerSpec::Relu,
                LayerSpec::Conv2d {
                    in_channels: 64,
                    out_channels: 64,
                    kernel: 3,
                    stride: 2,
                    padding: 1,
                },
                LayerSpec::Relu,
                LayerSpec::Conv2d {
                    in_channels: 64,
                    out_channels: 128,
                    kernel: 3,
                    stride: 2,
                    padding: 1,
                },
                LayerSpec::Relu,
                LayerSpec::Conv2d {
                    in_channels: 128,
                    out_channels: 128,
                    kernel: 3,
                    stride: 2,
                    padding: 1,
                },
                LayerSpec::Relu,
                LayerSpec::Flatten,
                LayerSpec::Dropout { keep: 0.5 },
                LayerSpec::Dense {
                    inputs: 128 * 4 * 4,
                    outputs: 256,
                    l2: 1e-4,
                },
                LayerSpec::Relu,
                LayerSpec::Dropout { keep: 0.5 },
                LayerSpec::Dense {
                    inputs: 256,
                    outputs: 256,
                    l2: 1e-4,
                },
                LayerSpec::Relu,
                LayerSpec::Dense {
                    inputs: 256,
                    outputs: 10,
                    l2: 0.0,
                },
                LayerSpec::Softmax,
            ],
        ),
        "substitute-mlp" => (
            vec![28, 28, 1],
            vec![
                LayerSpec::Flatten,
                LayerSpec::Dense {
                    inputs: 28 * 28,
                    outputs: 200,
                    l2: 0.0,
                },
                LayerSpec::Relu,
                LayerSpec::Dense {
                    inputs: 200,
                    outputs: 200,
                    l2: 0.0,
                },
                LayerSpec::Relu,
                LayerSpec::Dense {
                    inputs: 200,
                    outputs: 10,
                    l2: 0.0,
                },
                LayerSpec::Softmax,
            ],
        ),
        _ => return None,
    };
    Some(Architecture {
        name: name.to_string(),
        input_shape,
        layers,
    })
}

fn resolve_architecture(model: &ModelSection) -> Result<Architecture> {
    if model.architecture == "inline" {
        let input_shape = model
            .input_shape
            .clone()
            .ok_or_else(|| anyhow!("model.input_shape: required for inline architectures"))?;
        if model.layers.is_empty() {
            bail!("model.layers: inline architecture has no layers");
        }
        return Ok(Architecture {
            name: "inline".to_string(),
            input_shape,
            layers: model.layers.iter().map(LayerEntry::to_spec).collect(),
        });
    }
    if model.input_shape.is_some() || !model.layers.is_empty() {
        bail!(
            "model: input_shape/layers are only valid with architecture = \"inline\", \
             not {:?}",
            model.architecture
        );
    }
    named_architecture(&model.architecture).ok_or_else(|| {
        anyhow!(
            "model.architecture: unknown architecture {:?}",
            model.architecture
        )
    })
}

// ---------------------------------------------------------------------------
// Dataset loading
// ---------------------------------------------------------------------------

pub struct LoadedData {
    pub train: Dataset,
    pub test: Dataset,
    /// Which source actually provided the data (`auto` resolves).
    pub source: String,
}

fn data_dir(section: &DatasetSection) -> Option<PathBuf> {
    section
        .data_dir
        .clone()
        .or_else(|| std::env::var_os("MULDEF_DATA_DIR").map(PathBuf::from))
}

fn idx_pair(dir: &Path, stem: &str) -> Option<(PathBuf, PathBuf)> {
    let images = ["idx3-ubyte", "idx3-ubyte.gz"]
        .iter()
        .map(|ext| dir.join(format!("{stem}-images-{ext}")))
        .find(|p| p.exists())?;
    let labels = ["idx1-ubyte", "idx1-ubyte.gz"]
        .iter()
        .map(|ext| dir.join(format!("{stem}-labels-{ext}")))
        .find(|p| p.exists())?;
    Some((images, labels))
}

fn mnist_files(dir: &Path) -> Option<[(PathBuf, PathBuf); 2]> {
    Some([idx_pair(dir, "train")?, idx_pair(dir, "t10k")?])
}

/// Loads the configured dataset and cuts the class-balanced subsets.
pub fn load_data(section: &DatasetSection) -> Result<LoadedData> {
    let dir = data_dir(section);
    let (mut train, mut test, source) = match section.source.as_str() {
        "mnist" => {
            let dir = dir.ok_or_else(|| {
                anyhow!("dataset: source \"mnist\" needs data_dir or MULDEF_DATA_DIR")
            })?;
            let files = mnist_files(&dir).ok_or_else(|| {
                anyhow!(
                    "dataset: no IDX files (train-*/t10k-*) under {}",
                    dir.display()
                )
            })?;
            load_mnist(&files)?
        }
        "cifar10" => {
            let dir = dir.ok_or_else(|| {
                anyhow!("dataset: source \"cifar10\" needs data_dir or MULDEF_DATA_DIR")
            })?;
            let train_paths: Vec<PathBuf> = (1..=5)
                .map(|i| dir.join(format!("data_batch_{i}.bin")))
                .collect();
            let train = load_cifar_binary(&train_paths)?;
            let test = load_cifar_binary(&[dir.join("test_batch.bin")])?;
            (train, test, "cifar10".to_string())
        }
        "synthetic" => synthetic_digits(section),
        "auto" => match dir.as_deref().and_then(mnist_files) {
            Some(files) => load_mnist(&files)?,
            None => synthetic_digits(section),
        },
        other => bail!("dataset.source: unknown source {other:?}"),
    };

    if let Some(n) = section.train_size {
        if n < train.len() {
            train = sample_subset(&train, n, rng::derive(section.seed, "train-subset"))?;
        }
    }
    if let Some(n) = section.test_size {
        if n < test.len() {
            test = sample_subset(&test, n, rng::derive(section.seed, "test-subset"))?;
        }
    }
    Ok(LoadedData {
        train,
        test,
        source,
    })
}

fn load_mnist(files: &[(PathBuf, PathBuf); 2]) -> Result<(Dataset, Dataset, String)> {
    let train = load_idx(&files[0].0, &files[0].1)?;
    let test = load_idx(&files[1].0, &files[1].1)?;
    Ok((train, test, "mnist".to_string()))
}

fn synthetic_digits(section: &DatasetSection) -> (Dataset, Dataset, String) {
    // Generate just enough per class for the requested subset sizes, with
    // disjoint seeds for the two splits.
    let train_n = section.train_size.unwrap_or(12_000);
    let test_n = section.test_size.unwrap_or(2_000);
    let train = synth_digits(
        train_n.div_ceil(10),
        rng::derive(section.seed, "synth-train"),
    );
    let test = synth_digits(test_n.div_ceil(10), rng::derive(section.seed, "synth-test"));
    (train, test, "synthetic".to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_resolves_with_defaults() {
        let cfg = ConfigFile::from_toml("").expect("empty config parses");
        assert_eq!(cfg, ConfigFile::default());
        let resolved = cfg.resolved().expect("defaults are valid");
        let text = resolved.to_toml().expect("serializes");
        // Every materialized knob survives a round trip.
        assert_eq!(ConfigFile::from_toml(&text).expect("reparses"), resolved);
    }

    #[test]
    fn unknown_keys_are_rejected_with_position() {
        let err = ConfigFile::from_toml("[train]\nbanana = 1\n").unwrap_err();
        let msg = format!("{err:#}");
        assert!(msg.contains("banana"), "{msg}");
        assert!(msg.contains("line 2"), "{msg}");
    }

    #[test]
    fn partial_sections_fill_missing_fields_from_defaults() {
        let cfg =
            ConfigFile::from_toml("[dataset]\nsource = \"synthetic\"\n[train]\nmax_epochs = 3\n")
                .expect("partial sections parse");
        assert_eq!(cfg.dataset.source, "synthetic");
        assert_eq!(cfg.dataset.seed, DatasetSection::default().seed);
        assert_eq!(cfg.train.max_epochs, 3);
        assert_eq!(cfg.train.batch_size, TrainSection::default().batch_size);
    }

    #[test]
    fn invalid_attack_parameters_name_the_field() {
        let cfg = ConfigFile::from_toml(
            "[attack]\nkind = \"fgsm\"\neps = -0.1\nclip_min = 0.0\nclip_max = 1.0\niterations = 1\n",
        )
        .expect("schema-valid config parses");
        let err = cfg.build().unwrap_err();
        assert!(err.to_string().contains("attack.eps"), "{err}");

        let cfg = ConfigFile::from_toml(concat!(
            "[attack]\nkind = \"cw\"\nconfidence = 0.01\nmax_iterations = 0\nc_init = 1.0\n",
            "binary_search_steps = 3\nstep_size = 0.01\nclip_min = 0.0\nclip_max = 1.0\n",
        ))
        .expect("schema-valid config parses");
        let err = cfg.build().unwrap_err();
        assert!(err.to_string().contains("attack.max_iterations"), "{err}");
    }

    #[test]
    fn seed_override_changes_every_stage() {
        let mut cfg = ConfigFile::default();
        cfg.blackbox = Some(BlackboxSection::default());
        let before = cfg.clone();
        cfg.override_seeds(123);
        assert_ne!(cfg.dataset.seed, before.dataset.seed);
        assert_ne!(cfg.model.init_seed, before.model.init_seed);
        assert_ne!(cfg.train.seed, before.train.seed);
        assert_ne!(cfg.defense.rng_seed, before.defense.rng_seed);
        assert_ne!(cfg.eval.seed, before.eval.seed);
        assert_ne!(cfg.eval.selection_seed, before.eval.selection_seed);
        assert_ne!(cfg.blackbox.unwrap().seed, before.blackbox.unwrap().seed);
    }

    #[test]
    fn desk_scale_caps_the_expensive_knobs() {
        let mut cfg = ConfigFile::default();
        cfg.attack = AttackSection::from_config(&AttackConfig::Cw(CwConfig::default()));
        cfg.apply_scale(Scale::Desk);
        assert_eq!(cfg.dataset.train_size, Some(12_000));
        assert_eq!(cfg.dataset.test_size, Some(2_000));
        assert_eq!(cfg.model.architecture, "desk-cnn");
        match cfg.attack {
            AttackSection::Cw {
                max_iterations,
                binary_search_steps,
                ..
            } => {
                assert!(max_iterations <= 60);
                assert!(binary_search_steps <= 2);
            }
            _ => unreachable!(),
        }
        assert_eq!(cfg.eval.eval_subset, Some(96));

        let mut untouched = ConfigFile::default();
        let snapshot = untouched.clone();
        untouched.apply_scale(Scale::Full);
        assert_eq!(untouched, snapshot);
    }

    #[test]
    fn named_architectures_build_networks() {
        for name in ["desk-cnn", "mnist-cnn", "cifar-cnn", "substitute-mlp"] {
            let arch = named_architecture(name).expect("known architecture");
            muldef_core::network::Network::<f32>::new(
                "probe",
                arch.input_shape.clone(),
                arch.layers.clone(),
                0,
            )
            .unwrap_or_else(|e| panic!("{name} does not assemble: {e}"));
        }
        assert!(named_architecture("nonsense").is_none());
    }

    #[test]
    fn synthetic_loader_honors_subset_sizes() {
        let section = DatasetSection {
            source: "synthetic".to_string(),
            train_size: Some(100),
            test_size: Some(40),
            seed: 3,
            data_dir: None,
            holdout_size: 10,
        };
        let data = load_data(&section).expect("synthetic data loads");
        assert_eq!(data.train.len(), 100);
        assert_eq!(data.test.len(), 40);
        assert_eq!(data.source, "synthetic");
        let counts = data.train.class_counts();
        assert!(
            counts.iter().all(|&c| c == 10),
            "balanced subset: {counts:?}"
        );
    }
}
