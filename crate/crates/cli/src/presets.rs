//! Named experiment presets covering the standard white-box and black-box
//! scenarios on the two image benchmarks. Values are the full-scale
//! settings; pass `--scale desk` to shrink a preset for a laptop-class run.

use anyhow::{bail, Result};

use crate::config::{AttackSection, BlackboxSection, ConfigFile, DatasetSection, EvalScenario};

pub const PRESET_NAMES: [&str; 6] = [
    "mnist-fgsm-wb",
    "mnist-cw-wb",
    "cifar-fgsm-wb",
    "cifar-cw-wb",
    "mnist-fgsm-bb",
    "mnist-cw-bb",
];

fn fgsm(eps: f32) -> AttackSection {
    AttackSection::Fgsm {
        eps,
        clip_min: 0.0,
        clip_max: 1.0,
        iterations: 1,
    }
}

fn cw(confidence: f32, max_iterations: usize) -> AttackSection {
    AttackSection::Cw {
        confidence,
        max_iterations,
        c_init: 1.0,
        binary_search_steps: 3,
        step_size: 0.01,
        clip_min: 0.0,
        clip_max: 1.0,
    }
}

/// MNIST base: `auto` source so runs fall back to the procedural digits
/// when no IDX files are installed, three-conv net, 10 epochs, 15%
/// adversarial augmentation, five-model family.
fn mnist_base() -> ConfigFile {
    let mut cfg = ConfigFile::default();
    cfg.dataset = DatasetSection {
        source: "auto".to_string(),
        train_size: None,
        test_size: None,
        seed: 7,
        data_dir: None,
        holdout_size: 150,
    };
    cfg.model.architecture = "mnist-cnn".to_string();
    cfg.train.max_epochs = 10;
    cfg.defense.aug_fraction = 0.15;
    cfg.defense.num_additional = 4;
    cfg
}

/// CIFAR-10 base: requires the binary batches on disk (no synthetic
/// stand-in exists for 32x32x3), heavier net, 50 epochs, 25% augmentation.
fn cifar_base() -> ConfigFile {
    let mut cfg = ConfigFile::default();
    cfg.dataset = DatasetSection {
        source: "cifar10".to_string(),
        train_size: None,
        test_size: None,
        seed: 7,
        data_dir: None,
        holdout_size: 150,
    };
    cfg.model.architecture = "cifar-cnn".to_string();
    cfg.train.max_epochs = 50;
    cfg.defense.aug_fraction = 0.25;
    cfg.defense.num_additional = 4;
    cfg
}

pub fn preset(name: &str) -> Result<ConfigFile> {
    let mut cfg = match name {
        "mnist-fgsm-wb" => {
            let mut cfg = mnist_base();
            cfg.attack = fgsm(0.3);
            cfg.eval.plan = vec![EvalScenario::Indirect];
            cfg
        }
        "mnist-cw-wb" => {
            let mut cfg = mnist_base();
            cfg.attack = cw(0.01, 300);
            cfg.eval.plan = vec![EvalScenario::Indirect, EvalScenario::Direct];
            cfg
        }
        "cifar-fgsm-wb" => {
            let mut cfg = cifar_base();
            cfg.attack = fgsm(0.05);
            cfg.eval.plan = vec![EvalScenario::Indirect];
            cfg
        }
        "cifar-cw-wb" => {
            let mut cfg = cifar_base();
            cfg.attack = cw(0.01, 100);
            cfg.eval.plan = vec![EvalScenario::Indirect, EvalScenario::Direct];
            cfg
        }
        "mnist-fgsm-bb" => {
            let mut cfg = mnist_base();
            cfg.attack = fgsm(0.3);
            cfg.blackbox = Some(BlackboxSection::default());
            cfg.eval.plan = vec![EvalScenario::Indirect, EvalScenario::Blackbox];
            cfg
        }
        "mnist-cw-bb" => {
            let mut cfg = mnist_base();
            // Transfer attacks need high-confidence examples to survive the
            // model switch.
            cfg.attack = cw(10.0, 300);
            cfg.blackbox = Some(BlackboxSection::default());
            cfg.eval.plan = vec![EvalScenario::Indirect, EvalScenario::Blackbox];
            cfg
        }
        other => bail!(
            "unknown preset {other:?}, expected one of: {}",
            PRESET_NAMES.join(", ")
        ),
    };
    // Presets carry distinct eval stream seeds so their reports never alias.
    cfg.eval.seed = crate::config::config_seed(0xC0FFEE, name);
    Ok(cfg)
}
