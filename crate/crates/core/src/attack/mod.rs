//! Adversarial example construction against differentiable classifiers.
//!
//! Two gradient attacks (a fast sign-step attack and an iterative
//! minimal-distortion attack) plus a black-box pipeline that trains a
//! substitute model from label queries and attacks that instead. All attacks
//! consume a [`Dataset`] and produce an [`AdversarialSet`]: the perturbed
//! pixels paired with the original labels and provenance, so the result can
//! be evaluated as-is or folded back into training data.

mod cw;
mod fgsm;
mod substitute;

pub use cw::carlini_wagner;
pub use fgsm::fgsm;
pub use substitute::{blackbox_attack, BlackBoxConfig, BlackBoxOutcome, LabelOracle};

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::data::{Dataset, Example};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Fast gradient sign attack parameters.
///
/// One step of `eps * sign(input gradient)` by default; with more
/// `iterations` the budget is split into equal steps and the iterate is
/// re-projected onto the L-infinity ball of radius `eps` around the source,
/// so the overall bound holds regardless.
#[derive(Clone, Debug, PartialEq)]
pub struct FgsmConfig {
    pub eps: f32,
    pub clip_min: f32,
    pub clip_max: f32,
    pub iterations: usize,
}

impl Default for FgsmConfig {
    fn default() -> Self {
        FgsmConfig {
            eps: 0.3,
            clip_min: 0.0,
            clip_max: 1.0,
            iterations: 1,
        }
    }
}

impl FgsmConfig {
    pub(crate) fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0) || !self.eps.is_finite() {
            return Err(Error::config(
                "fgsm",
                format!("eps {} not positive", self.eps),
            ));
        }
        if !(self.clip_min < self.clip_max) {
            return Err(Error::config(
                "fgsm",
                format!("clip range [{}, {}] is empty", self.clip_min, self.clip_max),
            ));
        }
        if self.iterations == 0 {
            return Err(Error::config("fgsm", "iterations must be at least 1"));
        }
        Ok(())
    }
}

/// Minimal-L2 iterative attack parameters.
///
/// The attack searches, per example, for the smallest L2 perturbation that
/// makes the runner-up logit beat the true-class logit by at least
/// `confidence`. The tradeoff constant between distance and misclassification
/// starts at `c_init` and is tuned per example by `binary_search_steps`
/// rounds of doubling/bisection; each round runs `max_iterations` gradient
/// steps of size `step_size` in a change of variables that keeps pixels
/// inside the clip box.
#[derive(Clone, Debug, PartialEq)]
pub struct CwConfig {
    pub confidence: f32,
    pub max_iterations: usize,
    pub c_init: f32,
    pub binary_search_steps: usize,
    pub step_size: f32,
    pub clip_min: f32,
    pub clip_max: f32,
}

impl Default for CwConfig {
    fn default() -> Self {
        CwConfig {
            confidence: 0.01,
            max_iterations: 300,
            c_init: 1.0,
            binary_search_steps: 3,
            step_size: 0.01,
            clip_min: 0.0,
            clip_max: 1.0,
        }
    }
}

impl CwConfig {
    pub(crate) fn validate(&self) -> Result<()> {
        if self.confidence < 0.0 || !self.confidence.is_finite() {
            return Err(Error::config(
                "carlini-wagner",
                format!("confidence {} negative", self.confidence),
            ));
        }
        if self.max_iterations == 0 || self.binary_search_steps == 0 {
            return Err(Error::config(
                "carlini-wagner",
                "max_iterations and binary_search_steps must be at least 1",
            ));
        }
        if !(self.c_init > 0.0) || !(self.step_size > 0.0) {
            return Err(Error::config(
                "carlini-wagner",
                "c_init and step_size must be positive",
            ));
        }
        if !(self.clip_min < self.clip_max) {
            return Err(Error::config(
                "carlini-wagner",
                format!("clip range [{}, {}] is empty", self.clip_min, self.clip_max),
            ));
        }
        Ok(())
    }
}

/// Which attack produced a set, with its full parameters for provenance.
#[derive(Clone, Debug, PartialEq)]
pub enum AttackConfig {
    Fgsm(FgsmConfig),
    Cw(CwConfig),
}

impl AttackConfig {
    pub fn kind_name(&self) -> &'static str {
        match self {
            AttackConfig::Fgsm(_) => "fgsm",
            AttackConfig::Cw(_) => "cw",
        }
    }
}

/// Whether the attacker had gradient access to the attacked model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scenario {
    WhiteBox,
    BlackBox,
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scenario::WhiteBox => "white_box",
            Scenario::BlackBox => "black_box",
        })
    }
}

/// One crafted example: perturbed pixels plus the source's true label.
///
/// `attack_failed` marks examples the attack could not perturb successfully
/// (only the iterative attack can fail); those keep their original pixels so
/// downstream accuracy numbers stay honest.
#[derive(Clone, Debug, PartialEq)]
pub struct AdvExample {
    pub pixels: Tensor<f32>,
    pub label: usize,
    pub source_index: usize,
    pub attack_failed: bool,
}

/// A batch of adversarial examples with full provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct AdversarialSet {
    /// Id of the model the gradients came from (the substitute's id for
    /// black-box sets).
    pub source_model_id: String,
    pub attack: AttackConfig,
    pub scenario: Scenario,
    /// Seed of any randomized stage (substitute training); pure gradient
    /// attacks are deterministic and record the seed for provenance only.
    pub seed: u64,
    /// Number of label queries made to the attacked model; zero for
    /// white-box sets.
    pub oracle_queries: u64,
    pub input_shape: Vec<usize>,
    pub num_classes: usize,
    pub examples: Vec<AdvExample>,
}

impl AdversarialSet {
    /// Repackages the set as a dataset (pixels with true labels), ready for
    /// evaluation or adversarial training.
    pub fn to_dataset(&self, name: impl Into<String>) -> Result<Dataset> {
        Dataset::new(
            name,
            self.num_classes,
            self.examples
                .iter()
                .map(|e| Example {
                    pixels: e.pixels.clone(),
                    label: e.label,
                })
                .collect(),
        )
    }

    /// Fraction of examples the attack failed to perturb.
    pub fn failure_rate(&self) -> f64 {
        if self.examples.is_empty() {
            return 0.0;
        }
        let failed = self.examples.iter().filter(|e| e.attack_failed).count();
        failed as f64 / self.examples.len() as f64
    }
}

// ---------------------------------------------------------------------------
// Attack-side helpers shared by the implementations
// ---------------------------------------------------------------------------

/// Chunk size for per-batch attack passes; bounds memory, not results.
pub(crate) const ATTACK_CHUNK: usize = 256;

pub(crate) fn check_compat(
    model: &dyn crate::network::DifferentiableClassifier<f32>,
    data: &Dataset,
    context: &str,
) -> Result<()> {
    if model.input_shape() != data.feature_shape() {
        return Err(Error::shape(
            context,
            format!(
                "model {} expects input {:?}, dataset {} has {:?}",
                model.model_id(),
                model.input_shape(),
                data.name(),
                data.feature_shape()
            ),
        ));
    }
    if model.num_classes() != data.num_classes() {
        return Err(Error::shape(
            context,
            format!(
                "model {} has {} classes, dataset {} has {}",
                model.model_id(),
                model.num_classes(),
                data.name(),
                data.num_classes()
            ),
        ));
    }
    if data.is_empty() {
        return Err(Error::EmptyDataset {
            context: format!("{context} on dataset {}", data.name()),
        });
    }
    Ok(())
}

/// Runs one white-box attack dispatching on the config. `sample_seed` (the
/// seed that drew the attacked subset) is recorded on the set for
/// provenance; the gradient attacks themselves are deterministic.
pub(crate) fn craft_white_box(
    model: &dyn crate::network::DifferentiableClassifier<f32>,
    data: &Dataset,
    attack: &AttackConfig,
    sample_seed: u64,
) -> Result<AdversarialSet> {
    let mut set = match attack {
        AttackConfig::Fgsm(c) => fgsm(model, data, c)?,
        AttackConfig::Cw(c) => carlini_wagner(model, data, c)?,
    };
    set.seed = sample_seed;
    Ok(set)
}

pub(crate) fn feature_len(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Splits a flat perturbed batch back into per-example tensors.
pub(crate) fn split_examples(
    batch: &Tensor<f32>,
    labels: &[usize],
    indices: &[usize],
    failed: &[bool],
    feature_shape: &[usize],
) -> Vec<AdvExample> {
    let row = feature_len(feature_shape);
    (0..labels.len())
        .map(|i| AdvExample {
            pixels: Tensor::new(
                feature_shape.to_vec(),
                batch.data()[i * row..(i + 1) * row].to_vec(),
            )
            .expect("row length matches feature shape"),
            label: labels[i],
            source_index: indices[i],
            attack_failed: failed[i],
        })
        .collect()
}

// ---------------------------------------------------------------------------
// On-disk format
// ---------------------------------------------------------------------------

const MAGIC: &str = "muldef-advset";
const VERSION: u32 = 1;

pub(crate) fn fmt_attack(attack: &AttackConfig) -> String {
    match attack {
        AttackConfig::Fgsm(c) => format!(
            "fgsm eps={} clip_min={} clip_max={} iterations={}",
            c.eps, c.clip_min, c.clip_max, c.iterations
        ),
        AttackConfig::Cw(c) => format!(
            "cw confidence={} max_iterations={} c_init={} binary_search_steps={} step_size={} clip_min={} clip_max={}",
            c.confidence,
            c.max_iterations,
            c.c_init,
            c.binary_search_steps,
            c.step_size,
            c.clip_min,
            c.clip_max
        ),
    }
}

pub(crate) fn parse_attack(path: &Path, rest: &str) -> Result<AttackConfig> {
    let mut words = rest.split_whitespace();
    let kind = words
        .next()
        .ok_or_else(|| Error::format(path, "attack line missing kind"))?;
    let mut pairs = std::collections::BTreeMap::new();
    for w in words {
        let (k, v) = w
            .split_once('=')
            .ok_or_else(|| Error::format(path, format!("malformed attack field {w:?}")))?;
        pairs.insert(k.to_string(), v.to_string());
    }
    let mut take = |key: &str| -> Result<String> {
        pairs
            .remove(key)
            .ok_or_else(|| Error::format(path, format!("attack line missing {key}")))
    };
    fn num<T: std::str::FromStr>(path: &Path, key: &str, v: &str) -> Result<T> {
        v.parse()
            .map_err(|_| Error::format(path, format!("attack field {key}={v} not a number")))
    }
    let attack = match kind {
        "fgsm" => AttackConfig::Fgsm(FgsmConfig {
            eps: num(path, "eps", &take("eps")?)?,
            clip_min: num(path, "clip_min", &take("clip_min")?)?,
            clip_max: num(path, "clip_max", &take("clip_max")?)?,
            iterations: num(path, "iterations", &take("iterations")?)?,
        }),
        "cw" => AttackConfig::Cw(CwConfig {
            confidence: num(path, "confidence", &take("confidence")?)?,
            max_iterations: num(path, "max_iterations", &take("max_iterations")?)?,
            c_init: num(path, "c_init", &take("c_init")?)?,
            binary_search_steps: num(path, "binary_search_steps", &take("binary_search_steps")?)?,
            step_size: num(path, "step_size", &take("step_size")?)?,
            clip_min: num(path, "clip_min", &take("clip_min")?)?,
            clip_max: num(path, "clip_max", &take("clip_max")?)?,
        }),
        other => {
            return Err(Error::format(
                path,
                format!("unknown attack kind {other:?}"),
            ));
        }
    };
    if let Some(extra) = pairs.keys().next() {
        return Err(Error::format(
            path,
            format!("unknown attack field {extra:?}"),
        ));
    }
    Ok(attack)
}

/// Writes a set to disk: a text header describing provenance, then per
/// example a little-endian record of label, source index, failure flag, and
/// raw f32 pixels.
pub fn save_set(set: &AdversarialSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| Error::io(path, e);
    writeln!(w, "{MAGIC} v{VERSION}").map_err(io_err)?;
    writeln!(w, "source_model {}", set.source_model_id).map_err(io_err)?;
    writeln!(w, "attack {}", fmt_attack(&set.attack)).map_err(io_err)?;
    writeln!(w, "scenario {}", set.scenario).map_err(io_err)?;
    writeln!(w, "seed {}", set.seed).map_err(io_err)?;
    writeln!(w, "oracle_queries {}", set.oracle_queries).map_err(io_err)?;
    let dims: Vec<String> = set.input_shape.iter().map(|d| d.to_string()).collect();
    writeln!(w, "input {}", dims.join(" ")).map_err(io_err)?;
    writeln!(w, "classes {}", set.num_classes).map_err(io_err)?;
    writeln!(w, "examples {}", set.examples.len()).map_err(io_err)?;
    writeln!(w, "end").map_err(io_err)?;
    let row = feature_len(&set.input_shape);
    for e in &set.examples {
        if e.pixels.len() != row {
            return Err(Error::shape(
                "save_set",
                format!(
                    "example has {} pixels, set shape implies {row}",
                    e.pixels.len()
                ),
            ));
        }
        w.write_all(&(e.label as u32).to_le_bytes())
            .map_err(io_err)?;
        w.write_all(&(e.source_index as u32).to_le_bytes())
            .map_err(io_err)?;
        w.write_all(&[e.attack_failed as u8]).map_err(io_err)?;
        for v in e.pixels.data() {
            w.write_all(&v.to_le_bytes()).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)
}

/// Reads a set written by [`save_set`], validating the header against the
/// payload length.
pub fn load_set(path: impl AsRef<Path>) -> Result<AdversarialSet> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut line = String::new();
    let mut read_line = |r: &mut BufReader<File>| -> Result<String> {
        line.clear();
        let n = r.read_line(&mut line).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            return Err(Error::format(path, "unexpected end of header"));
        }
        Ok(line.trim_end().to_string())
    };
    let first = read_line(&mut r)?;
    if first != format!("{MAGIC} v{VERSION}") {
        return Err(Error::format(
            path,
            format!("bad magic line {first:?}, expected {MAGIC:?} v{VERSION}"),
        ));
    }
    let mut source_model_id = None;
    let mut attack = None;
    let mut scenario = None;
    let mut seed = None;
    let mut oracle_queries = None;
    let mut input_shape: Option<Vec<usize>> = None;
    let mut num_classes = None;
    let mut count = None;
    loop {
        let l = read_line(&mut r)?;
        if l == "end" {
            break;
        }
        let (key, rest) = l
            .split_once(' ')
            .ok_or_else(|| Error::format(path, format!("malformed header line {l:?}")))?;
        match key {
            "source_model" => source_model_id = Some(rest.to_string()),
            "attack" => attack = Some(parse_attack(path, rest)?),
            "scenario" => {
                scenario = Some(match rest {
                    "white_box" => Scenario::WhiteBox,
                    "black_box" => Scenario::BlackBox,
                    other => {
                        return Err(Error::format(path, format!("unknown scenario {other:?}")));
                    }
                })
            }
            "seed" => {
                seed =
                    Some(rest.parse::<u64>().map_err(|_| {
                        Error::format(path, format!("seed {rest:?} not an integer"))
                    })?)
            }
            "oracle_queries" => {
                oracle_queries = Some(rest.parse::<u64>().map_err(|_| {
                    Error::format(path, format!("oracle_queries {rest:?} not an integer"))
                })?)
            }
            "input" => {
                let dims = rest
                    .split_whitespace()
                    .map(|d| {
                        d.parse::<usize>().map_err(|_| {
                            Error::format(path, format!("input dim {d:?} not an integer"))
                        })
                    })
                    .collect::<Result<Vec<usize>>>()?;
                if dims.is_empty() || dims.iter().any(|&d| d == 0) {
                    return Err(Error::format(path, "input shape must be nonzero dims"));
                }
                input_shape = Some(dims);
            }
            "classes" => {
                num_classes =
                    Some(rest.parse::<usize>().map_err(|_| {
                        Error::format(path, format!("classes {rest:?} not an integer"))
                    })?)
            }
            "examples" => {
                count = Some(rest.parse::<usize>().map_err(|_| {
                    Error::format(path, format!("examples {rest:?} not an integer"))
                })?)
            }
            other => {
                return Err(Error::format(path, format!("unknown header key {other:?}")));
            }
        }
    }
    let missing = |what: &str| Error::format(path, format!("header missing {what}"));
    let source_model_id = source_model_id.ok_or_else(|| missing("source_model"))?;
    let attack = attack.ok_or_else(|| missing("attack"))?;
    let scenario = scenario.ok_or_else(|| missing("scenario"))?;
    let seed = seed.ok_or_else(|| missing("seed"))?;
    let oracle_queries = oracle_queries.ok_or_else(|| missing("oracle_queries"))?;
    let input_shape = input_shape.ok_or_else(|| missing("input"))?;
    let num_classes = num_classes.ok_or_else(|| missing("classes"))?;
    let count = count.ok_or_else(|| missing("examples"))?;

    let row = feature_len(&input_shape);
    let record = 4 + 4 + 1 + 4 * row;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)
        .map_err(|e| Error::io(path, e))?;
    if payload.len() != count * record {
        return Err(Error::format(
            path,
            format!(
                "payload is {} bytes, header implies {} ({} examples of {} bytes)",
                payload.len(),
                count * record,
                count,
                record
            ),
        ));
    }
    let mut examples = Vec::with_capacity(count);
    for i in 0..count {
        let rec = &payload[i * record..(i + 1) * record];
        let label = u32::from_le_bytes(rec[0..4].try_into().expect("4 bytes")) as usize;
        let source_index = u32::from_le_bytes(rec[4..8].try_into().expect("4 bytes")) as usize;
        let attack_failed = match rec[8] {
            0 => false,
            1 => true,
            other => {
                return Err(Error::format(
                    path,
                    format!("example {i} has invalid failure flag {other}"),
                ));
            }
        };
        if label >= num_classes {
            return Err(Error::format(
                path,
                format!("example {i} label {label} out of range for {num_classes} classes"),
            ));
        }
        let mut pixels = Vec::with_capacity(row);
        for p in 0..row {
            let off = 9 + 4 * p;
            pixels.push(f32::from_le_bytes(
                rec[off..off + 4].try_into().expect("4 bytes"),
            ));
        }
        examples.push(AdvExample {
            pixels: Tensor::new(input_shape.clone(), pixels).expect("row length matches shape"),
            label,
            source_index,
            attack_failed,
        });
    }
    Ok(AdversarialSet {
        source_model_id,
        attack,
        scenario,
        seed,
        oracle_queries,
        input_shape,
        num_classes,
        examples,
    })
}
