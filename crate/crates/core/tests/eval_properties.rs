//! Evaluation-harness invariants: the Monte-Carlo estimator against its
//! binomial error bound and the closed-form expectation, degenerate cases
//! that reduce to plain attacks, matrix completeness, non-mutation, exact
//! CSV round trips, and sweep anchor points.

use muldef_core::attack::{
    carlini_wagner, AdvExample, AdversarialSet, AttackConfig, CwConfig, FgsmConfig, Scenario,
};
use muldef_core::data::{synth_blobs, BlobsConfig, Dataset, Example};
use muldef_core::defense::{
    generate_family, GeneratorConfig, MergeRule, ModelFamily, MuldefClassifier, SolutionKind,
};
use muldef_core::eval::{
    defense_accuracy, direct_attack_eval, emit_report, indirect_attack_eval, model_set_accuracy,
    parse_report_csv, sweep_augmentation, sweep_family_size, EvalOptions, EvalReport, ReportRow,
    CSV_HEADER, DEFENSE_EXACT, DEFENSE_MC, MERGED,
};
use muldef_core::layer::LayerSpec;
use muldef_core::network::{accuracy, Network};
use muldef_core::tensor::Tensor;
use muldef_core::train::{Optimizer, TrainConfig};

fn dense_layers(dim: usize, hidden: usize, k: usize) -> Vec<LayerSpec> {
    vec![
        LayerSpec::Dense {
            inputs: dim,
            outputs: hidden,
            l2: 0.0,
        },
        LayerSpec::Relu,
        LayerSpec::Dense {
            inputs: hidden,
            outputs: k,
            l2: 0.0,
        },
        LayerSpec::Softmax,
    ]
}

fn linear_softmax(id: &str, dim: usize, k: usize, seed: u64) -> Network<f32> {
    Network::new(
        id,
        vec![dim],
        vec![
            LayerSpec::Dense {
                inputs: dim,
                outputs: k,
                l2: 0.0,
            },
            LayerSpec::Softmax,
        ],
        seed,
    )
    .expect("valid architecture")
}

/// Linear two-class net that assigns every input with positive first
/// coordinate to `class`.
fn committed_net(id: &str, class: usize) -> Network<f32> {
    let mut net = linear_softmax(id, 2, 2, 1);
    let p = net.layer_params_mut(0).expect("dense layer has params");
    p.weights.data_mut().fill(0.0);
    p.bias.data_mut().fill(0.0);
    p.weights.data_mut()[class] = 4.0;
    net
}

fn dummy_set(source: &str, dim: usize, k: usize) -> AdversarialSet {
    AdversarialSet {
        source_model_id: source.to_string(),
        attack: AttackConfig::Fgsm(FgsmConfig::default()),
        scenario: Scenario::WhiteBox,
        seed: 0,
        oracle_queries: 0,
        input_shape: vec![dim],
        num_classes: k,
        examples: vec![AdvExample {
            pixels: Tensor::new(vec![dim], vec![0.25; dim]).expect("shape matches"),
            label: 0,
            source_index: 0,
            attack_failed: false,
        }],
    }
}

fn toy_family(models: Vec<Network<f32>>) -> ModelFamily {
    let dim = models[0].input_shape()[0];
    let k = models[0].num_classes();
    let adv_sets = models.iter().map(|m| dummy_set(m.id(), dim, k)).collect();
    let generator = GeneratorConfig::new(
        models.len() - 1,
        SolutionKind::Solution2,
        0.25,
        AttackConfig::Fgsm(FgsmConfig::default()),
    );
    ModelFamily {
        models,
        adv_sets,
        generator,
    }
}

fn quick_train() -> TrainConfig {
    TrainConfig {
        optimizer: Optimizer::adam(0.01),
        batch_size: 8,
        max_epochs: 6,
        validation_fraction: 0.2,
        early_stop_patience: 0,
        ..TrainConfig::default()
    }
}

fn blobs(seed: u64, per_class: usize) -> Dataset {
    synth_blobs(&BlobsConfig {
        num_classes: 3,
        per_class,
        dim: 6,
        spread: 0.06,
        seed,
    })
}

fn fgsm_attack(eps: f32) -> AttackConfig {
    AttackConfig::Fgsm(FgsmConfig {
        eps,
        ..FgsmConfig::default()
    })
}

fn small_cw() -> CwConfig {
    CwConfig {
        max_iterations: 25,
        binary_search_steps: 2,
        step_size: 0.05,
        ..CwConfig::default()
    }
}

/// Trained seed model plus its generated family.
fn trained_family(num_additional: usize, rng_seed: u64) -> (Dataset, Dataset, MuldefClassifier) {
    let train_set = blobs(11, 20);
    let test_set = blobs(12, 8);
    let mut t = Network::new("t", vec![6], dense_layers(6, 12, 3), 5).expect("valid");
    muldef_core::train::train(&mut t, &train_set, &quick_train()).expect("training converges");
    let mut cfg = GeneratorConfig::new(
        num_additional,
        SolutionKind::Solution2,
        0.25,
        fgsm_attack(0.12),
    );
    cfg.train = quick_train();
    cfg.rng_seed = rng_seed;
    let family = generate_family(&t, &train_set, &cfg).expect("family generates");
    let defense = MuldefClassifier::new(family, 99).expect("valid family");
    (train_set, test_set, defense)
}

fn params_equal(a: &Network<f32>, b: &Network<f32>) -> bool {
    a.layers() == b.layers()
        && (0..a.layers().len()).all(|i| a.layer_params(i) == b.layer_params(i))
}

fn dataset_checksum(set: &Dataset) -> (usize, f64, usize) {
    let pixels: f64 = set
        .examples()
        .iter()
        .flat_map(|e| e.pixels.data())
        .map(|&v| v as f64)
        .sum();
    let labels: usize = set.examples().iter().map(|e| e.label).sum();
    (set.len(), pixels, labels)
}

// ---------------------------------------------------------------------------
// Accuracy estimation
// ---------------------------------------------------------------------------

#[test]
fn monte_carlo_tracks_exact_expectation_within_binomial_error() {
    // Three voters that always answer a fixed class: per-example hit
    // probabilities are 2/3 (label 0) and 1/3 (label 1), so the exact
    // expected accuracy over 40 + 20 examples is 5/9.
    let members = vec![
        committed_net("a", 0),
        committed_net("b", 0),
        committed_net("c", 1),
    ];
    let examples: Vec<Example> = (0..60)
        .map(|i| Example {
            pixels: Tensor::new(vec![2], vec![1.0, 0.0]).expect("shape matches"),
            label: usize::from(i >= 40),
        })
        .collect();
    let data = Dataset::new("fixed", 2, examples).expect("valid dataset");
    let defense = MuldefClassifier::new(toy_family(members), 4242).expect("valid family");

    let draws = 300u64;
    let est = defense_accuracy(&defense, &data, draws, 7).expect("estimate");
    let exact = est
        .exact_expectation
        .expect("defense carries the expectation");
    assert!((exact - 5.0 / 9.0).abs() < 1e-12, "exact {exact}");
    assert_eq!(est.n, 60);
    assert_eq!(est.draws, draws);

    let bound = 3.0 * (exact * (1.0 - exact) / (draws as f64 * est.n as f64)).sqrt();
    assert!(
        (est.monte_carlo - exact).abs() <= bound,
        "monte carlo {} vs exact {exact}, 3 sigma bound {bound}",
        est.monte_carlo
    );
}

#[test]
fn single_member_family_reduces_to_a_plain_white_box_attack() {
    let (_train, test_set, defense) = trained_family(0, 3);
    let opts = EvalOptions {
        draws: 40,
        seed: 5,
        eval_subset: None,
    };
    let out =
        indirect_attack_eval(&defense, &fgsm_attack(0.12), &test_set, &opts).expect("eval runs");

    assert_eq!(out.eval_sets.len(), 1);
    assert_eq!(out.eval_sets[0].source_model_id, "t");
    assert_eq!(out.eval_sets[0].examples.len(), test_set.len());

    // One member: the defense IS the model, with zero selection variance.
    let plain =
        model_set_accuracy(&defense.family().models[0], &out.eval_sets[0]).expect("plain accuracy");
    assert_eq!(out.min_exact, plain.monte_carlo);
    assert_eq!(out.min_mc, out.min_exact);

    // Clean block (1 member + 2 defense rows) plus one set block.
    assert_eq!(out.report.rows.len(), 6);
}

#[test]
fn indirect_matrix_covers_every_member_and_set() {
    let (_train, test_set, defense) = trained_family(2, 17);
    let m = defense.num_models();
    assert_eq!(m, 3);
    let opts = EvalOptions {
        draws: 25,
        seed: 2,
        eval_subset: Some(12),
    };
    let out =
        indirect_attack_eval(&defense, &fgsm_attack(0.12), &test_set, &opts).expect("eval runs");
    out.report.validate().expect("well-formed report");

    assert_eq!(out.eval_sets.len(), m);
    assert_eq!(out.report.rows.len(), (m + 2) * (m + 1));

    let models = &defense.family().models;
    let mut defense_exact_rows = Vec::new();
    for set in &out.eval_sets {
        let data = set.to_dataset("check").expect("set converts");
        assert_eq!(data.len(), 12);
        for model in models {
            let row = find_row(&out.report.rows, model.id(), &set.source_model_id);
            assert_eq!(row.accuracy, accuracy(model, &data).expect("accuracy"));
            assert_eq!(row.n, 12);
            assert_eq!(row.scenario, "white_box");
            assert_eq!(row.attack, "fgsm");
        }
        let exact_row = find_row(&out.report.rows, DEFENSE_EXACT, &set.source_model_id);
        let member_mean = models
            .iter()
            .map(|model| find_row(&out.report.rows, model.id(), &set.source_model_id).accuracy)
            .sum::<f64>()
            / m as f64;
        assert_eq!(exact_row.accuracy, member_mean);
        defense_exact_rows.push(exact_row.accuracy);

        let mc_row = find_row(&out.report.rows, DEFENSE_MC, &set.source_model_id);
        assert!((mc_row.accuracy - exact_row.accuracy).abs() < 0.35);
    }
    let min_from_rows = defense_exact_rows
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    assert_eq!(out.min_exact, min_from_rows);
}

fn find_row<'a>(rows: &'a [ReportRow], classifier: &str, adv_source: &str) -> &'a ReportRow {
    rows.iter()
        .find(|r| r.classifier == classifier && r.adv_source == adv_source)
        .unwrap_or_else(|| panic!("no row for {classifier} on {adv_source}"))
}

#[test]
fn evaluation_mutates_neither_models_nor_data() {
    let (_train, test_set, defense) = trained_family(1, 23);
    let before: Vec<Network<f32>> = defense.family().models.clone();
    let test_before = dataset_checksum(&test_set);

    let opts = EvalOptions {
        draws: 10,
        seed: 1,
        eval_subset: Some(6),
    };
    indirect_attack_eval(&defense, &fgsm_attack(0.12), &test_set, &opts).expect("indirect");
    direct_attack_eval(
        &defense,
        &small_cw(),
        MergeRule::MeanProbs,
        &test_set,
        &opts,
    )
    .expect("direct");

    for (a, b) in before.iter().zip(&defense.family().models) {
        assert!(
            params_equal(a, b),
            "evaluation changed parameters of {}",
            b.id()
        );
    }
    assert_eq!(dataset_checksum(&test_set), test_before);
}

// ---------------------------------------------------------------------------
// Direct (merged-model) attack
// ---------------------------------------------------------------------------

#[test]
fn direct_attack_reports_the_merged_model_and_the_defense() {
    let (_train, test_set, defense) = trained_family(1, 29);
    let opts = EvalOptions {
        draws: 30,
        seed: 8,
        eval_subset: Some(10),
    };
    let out = direct_attack_eval(
        &defense,
        &small_cw(),
        MergeRule::MeanProbs,
        &test_set,
        &opts,
    )
    .expect("direct eval runs");
    out.report.validate().expect("well-formed report");

    assert_eq!(out.eval_set.source_model_id, "merged(t+t-m1)");
    assert_eq!(out.eval_set.scenario, Scenario::WhiteBox);
    assert_eq!(out.eval_set.examples.len(), 10);

    let merged_row = find_row(&out.report.rows, MERGED, "merged(t+t-m1)");
    assert_eq!(merged_row.accuracy, out.merged_self_accuracy);

    // The defense expectation is still the mean of member accuracies.
    let data = out.eval_set.to_dataset("check").expect("set converts");
    let member_mean = defense
        .family()
        .models
        .iter()
        .map(|model| accuracy(model, &data).expect("accuracy"))
        .sum::<f64>()
        / defense.num_models() as f64;
    assert_eq!(out.exact, member_mean);
}

#[test]
fn twin_family_direct_attack_behaves_like_attacking_one_model() {
    let train_set = blobs(41, 20);
    let test_set = blobs(42, 8);
    let mut t = Network::new("t", vec![6], dense_layers(6, 12, 3), 5).expect("valid");
    muldef_core::train::train(&mut t, &train_set, &quick_train()).expect("training converges");
    let mut twin = t.clone();
    twin.set_id("t-twin");

    let defense =
        MuldefClassifier::new(toy_family(vec![t.clone(), twin]), 7).expect("valid family");
    let opts = EvalOptions {
        draws: 60,
        seed: 4,
        eval_subset: None,
    };
    let cw = small_cw();
    let out = direct_attack_eval(&defense, &cw, MergeRule::MeanProbs, &test_set, &opts)
        .expect("direct eval runs");

    // Identical members: the expectation equals the single model's accuracy
    // on the merged-model set, exactly.
    let merged_data = out.eval_set.to_dataset("merged").expect("set converts");
    assert_eq!(out.exact, accuracy(&t, &merged_data).expect("accuracy"));

    // Averaging twins is the single model up to rounding, so attacking the
    // merge must be about as effective as attacking the model directly.
    let single = carlini_wagner(&t, &test_set, &cw).expect("attack runs");
    let single_data = single.to_dataset("single").expect("set converts");
    let acc_on_merged_set = accuracy(&t, &merged_data).expect("accuracy");
    let acc_on_single_set = accuracy(&t, &single_data).expect("accuracy");
    assert!(
        (acc_on_merged_set - acc_on_single_set).abs() <= 0.15,
        "twin merge {acc_on_merged_set} vs single model {acc_on_single_set}"
    );
}

// ---------------------------------------------------------------------------
// Report emission
// ---------------------------------------------------------------------------

#[test]
fn csv_round_trips_exactly_and_is_byte_deterministic() {
    let mut report = EvalReport::new();
    report.context.push("synthetic report".to_string());
    let awkward = [
        0.1f64 + 0.2,
        1.0 / 3.0,
        0.721_485_929_312_344_6,
        0.0,
        1.0,
        f64::MIN_POSITIVE,
    ];
    for (i, &accuracy) in awkward.iter().enumerate() {
        report.rows.push(ReportRow {
            classifier: format!("m{i}"),
            adv_source: "t".to_string(),
            attack: "cw".to_string(),
            scenario: "white_box".to_string(),
            seed: u64::MAX - i as u64,
            accuracy,
            n: 12_000 + i,
        });
    }
    report
        .timings
        .push(("stage".to_string(), std::time::Duration::from_millis(123)));

    let dir = tempfile::tempdir().expect("tempdir");
    let csv_path = dir.path().join("eval.csv");
    emit_report(&report, &csv_path).expect("report writes");

    let text = std::fs::read_to_string(&csv_path).expect("csv readable");
    assert!(text.starts_with(&format!("{CSV_HEADER}\n")));
    let parsed = parse_report_csv(&csv_path).expect("csv parses");
    assert_eq!(
        parsed, report.rows,
        "parsed rows differ from the in-memory report"
    );

    // Re-emitting with different timings leaves CSV and summary bytes
    // untouched; only the timings file may differ.
    let mut rerun = report.clone();
    rerun.timings = vec![("stage".to_string(), std::time::Duration::from_millis(9876))];
    let dir2 = tempfile::tempdir().expect("tempdir");
    let csv2 = dir2.path().join("eval.csv");
    emit_report(&rerun, &csv2).expect("report writes");
    assert_eq!(
        std::fs::read(&csv_path).expect("bytes"),
        std::fs::read(&csv2).expect("bytes"),
        "CSV bytes changed between identical runs"
    );
    assert_eq!(
        std::fs::read(dir.path().join("eval-summary.txt")).expect("bytes"),
        std::fs::read(dir2.path().join("eval-summary.txt")).expect("bytes"),
        "summary bytes changed between identical runs"
    );
    assert!(dir.path().join("eval-timings.txt").exists());
}

// ---------------------------------------------------------------------------
// Sweeps
// ---------------------------------------------------------------------------

#[test]
fn augmentation_sweep_anchors_at_zero_and_is_prefix_stable() {
    let train_set = blobs(61, 14);
    let test_set = blobs(62, 6);
    let mut t = Network::new("t", vec![6], dense_layers(6, 10, 3), 5).expect("valid");
    muldef_core::train::train(&mut t, &train_set, &quick_train()).expect("training converges");

    let opts = EvalOptions {
        draws: 10,
        seed: 3,
        eval_subset: Some(9),
    };
    let attack = fgsm_attack(0.12);
    let tc = quick_train();
    let curve = sweep_augmentation(&t, &train_set, &test_set, &attack, &[0.0, 0.2], &tc, &opts)
        .expect("sweep runs");

    assert_eq!(curve.len(), 2);
    assert_eq!(
        curve[0].adv_examples, 0,
        "fraction 0 adds no adversarial data"
    );
    assert_eq!(
        curve[1].adv_examples,
        (0.2f64 * train_set.len() as f64).round() as usize
    );
    for point in &curve {
        for value in [
            point.retrained_test_accuracy,
            point.retrained_self_accuracy,
            point.separate_model_accuracy,
        ] {
            assert!(
                (0.0..=1.0).contains(&value),
                "accuracy {value} out of range"
            );
        }
    }

    // Same options and a fraction list sharing the prefix: identical point.
    let prefix = sweep_augmentation(&t, &train_set, &test_set, &attack, &[0.0], &tc, &opts)
        .expect("sweep runs");
    assert_eq!(prefix[0], curve[0]);
}

#[test]
fn family_size_sweep_starts_at_the_undefended_baseline() {
    let train_set = blobs(71, 20);
    let test_set = blobs(72, 8);
    let mut t = Network::new("t", vec![6], dense_layers(6, 12, 3), 5).expect("valid");
    muldef_core::train::train(&mut t, &train_set, &quick_train()).expect("training converges");

    let mut cfg = GeneratorConfig::new(1, SolutionKind::Solution2, 0.25, fgsm_attack(0.12));
    cfg.train = quick_train();
    cfg.rng_seed = 13;
    let opts = EvalOptions {
        draws: 20,
        seed: 6,
        eval_subset: Some(10),
    };
    let sweep = sweep_family_size(
        &t,
        &train_set,
        &test_set,
        &cfg,
        &[1, 2],
        Some((&small_cw(), MergeRule::MeanProbs)),
        &opts,
    )
    .expect("sweep runs");
    sweep.report.validate().expect("well-formed report");

    assert_eq!(sweep.family.len(), 2);
    assert_eq!(sweep.eval_sets.len(), 2);
    assert_eq!(sweep.points.len(), 2);

    // Size 1 is the plain white-box attack on the seed model.
    let baseline = &sweep.points[0];
    assert_eq!(baseline.size, 1);
    let plain =
        model_set_accuracy(&sweep.family.models[0], &sweep.eval_sets[0]).expect("plain accuracy");
    assert_eq!(baseline.indirect_min_exact, plain.monte_carlo);
    assert_eq!(baseline.indirect_min_mc, baseline.indirect_min_exact);
    assert!(baseline.direct_exact.is_some());

    let grown = &sweep.points[1];
    assert_eq!(grown.size, 2);
    assert!(grown.direct_exact.is_some() && grown.direct_mc.is_some());
}

#[test]
fn family_generation_is_prefix_stable() {
    // The size sweep evaluates smaller families as prefixes of the largest
    // one; that is only sound if generating with a larger budget leaves
    // earlier rounds untouched.
    let train_set = blobs(81, 14);
    let mut t = Network::new("t", vec![6], dense_layers(6, 10, 3), 5).expect("valid");
    muldef_core::train::train(&mut t, &train_set, &quick_train()).expect("training converges");

    let mut cfg = GeneratorConfig::new(2, SolutionKind::Solution2, 0.25, fgsm_attack(0.12));
    cfg.train = quick_train();
    cfg.rng_seed = 55;
    let large = generate_family(&t, &train_set, &cfg).expect("family generates");

    let mut small_cfg = cfg.clone();
    small_cfg.num_additional = 1;
    let small = generate_family(&t, &train_set, &small_cfg).expect("family generates");

    assert_eq!(small.len(), 2);
    for i in 0..small.len() {
        assert!(
            params_equal(&large.models[i], &small.models[i]),
            "member {i} differs between budgets"
        );
        assert_eq!(
            large.adv_sets[i], small.adv_sets[i],
            "set {i} differs between budgets"
        );
    }
}
