//! Defense-level invariants, each checked against an independent oracle:
//! chi-square bounds for selection uniformity, the law-of-total-expectation
//! accuracy identity, closed-form merged-model cases, finite differences for
//! the merged gradient, and bit-exact member reproduction for the
//! training-set composition rules.

use muldef_core::attack::LabelOracle;
use muldef_core::attack::{AdvExample, AdversarialSet, AttackConfig, FgsmConfig, Scenario};
use muldef_core::data::{synth_blobs, BlobsConfig, Dataset};
use muldef_core::defense::{
    generate_family, merged_model, ConvergenceStop, GeneratorConfig, MergeRule, MergedModel,
    ModelFamily, MuldefClassifier, SolutionKind,
};
use muldef_core::error::Error;
use muldef_core::gradcheck::{check_loss_input_grad, check_seed_input_grad, DEFAULT_STEP};
use muldef_core::layer::LayerSpec;
use muldef_core::network::{accuracy, DifferentiableClassifier, Network};
use muldef_core::rng;
use muldef_core::tensor::Tensor;
use muldef_core::train::{train, Optimizer, TrainConfig};
use rand::Rng;

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

/// Family of structurally identical two-class linear nets with dummy
/// provenance sets, for selection and classification tests that need no
/// training.
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
        max_epochs: 8,
        validation_fraction: 0.2,
        early_stop_patience: 0,
        ..TrainConfig::default()
    }
}

fn training_blobs(seed: u64) -> Dataset {
    synth_blobs(&BlobsConfig {
        num_classes: 3,
        per_class: 20,
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

/// Linear two-class net whose prediction on `[1, 0]` is the given class,
/// with the winning logit at `gain`.
fn committed_net(id: &str, class: usize, gain: f32) -> Network<f32> {
    let mut net = linear_softmax(id, 2, 2, 1);
    let p = net.layer_params_mut(0).expect("dense layer has params");
    p.weights.data_mut().fill(0.0);
    p.bias.data_mut().fill(0.0);
    // w[input 0][output class] = gain, so x = [1, 0] scores `gain` there.
    p.weights.data_mut()[class] = gain;
    net
}

fn params_equal(a: &Network<f32>, b: &Network<f32>) -> bool {
    a.layers() == b.layers()
        && (0..a.layers().len()).all(|i| a.layer_params(i) == b.layer_params(i))
}

// ---------------------------------------------------------------------------
// Selection
// ---------------------------------------------------------------------------

#[test]
fn size_one_family_always_selects_the_seed_model() {
    let clf = MuldefClassifier::new(toy_family(vec![linear_softmax("t", 2, 2, 3)]), 17)
        .expect("valid family");
    for draw in 0..512u64 {
        assert_eq!(clf.select_model(draw), 0);
    }
}

#[test]
fn selection_frequencies_pass_chi_square_uniformity() {
    // Critical value of the chi-square distribution with 4 degrees of
    // freedom at significance 0.01; a biased selector blows far past it.
    const CHI2_CRIT_DF4_P01: f64 = 13.2767;
    const DRAWS: u64 = 100_000;

    let t = linear_softmax("t", 2, 2, 1);
    let models: Vec<Network<f32>> = std::iter::once(t.clone())
        .chain((1..5).map(|i| t.with_fresh_params(format!("t-m{i}"), 1 + i as u64)))
        .collect();
    let family = toy_family(models);

    for selection_seed in [2024u64, 31337] {
        let clf = MuldefClassifier::new(family.clone(), selection_seed).expect("valid family");
        let mut counts = [0u64; 5];
        for draw in 0..DRAWS {
            counts[clf.select_model(draw)] += 1;
        }
        let expected = DRAWS as f64 / 5.0;
        let mut chi2 = 0.0;
        for (i, &c) in counts.iter().enumerate() {
            let freq = c as f64 / DRAWS as f64;
            assert!(
                (freq - 0.2).abs() <= 0.01,
                "seed {selection_seed}: model {i} frequency {freq} outside 0.2 +- 0.01"
            );
            chi2 += (c as f64 - expected).powi(2) / expected;
        }
        assert!(
            chi2 < CHI2_CRIT_DF4_P01,
            "seed {selection_seed}: chi-square statistic {chi2} rejects uniformity (counts {counts:?})"
        );
    }
}

// ---------------------------------------------------------------------------
// Classification
// ---------------------------------------------------------------------------

#[test]
fn consensus_family_classifies_identically_for_every_draw() {
    let t = committed_net("t", 0, 5.0);
    let mut twin = t.clone();
    twin.set_id("t-m1");
    let clf = MuldefClassifier::new(toy_family(vec![t.clone(), twin]), 5).expect("valid family");

    let x = Tensor::new(vec![2], vec![1.0, 0.0]).expect("shape matches");
    let batch = Tensor::new(vec![1, 2], vec![1.0, 0.0]).expect("shape matches");
    let want = t.predict_labels(&batch).expect("forward succeeds")[0];
    for draw in 0..64u64 {
        assert_eq!(clf.classify(&x, draw).expect("classify succeeds"), want);
    }
}

#[test]
fn disagreeing_pair_splits_decisions_evenly() {
    const DRAWS: u64 = 20_000;
    let a = committed_net("t", 0, 5.0);
    let b = committed_net("t-m1", 1, 5.0);
    let clf = MuldefClassifier::new(toy_family(vec![a, b]), 404).expect("valid family");

    let x = Tensor::new(vec![2], vec![1.0, 0.0]).expect("shape matches");
    let mut zeros = 0u64;
    for draw in 0..DRAWS {
        if clf.classify(&x, draw).expect("classify succeeds") == 0 {
            zeros += 1;
        }
    }
    let p = zeros as f64 / DRAWS as f64;
    // 3 sigma for a fair coin over 20k draws is ~0.0106; allow 4.
    assert!(
        (p - 0.5).abs() <= 0.015,
        "class-0 fraction {p} too far from 0.5"
    );
}

#[test]
fn monte_carlo_accuracy_matches_exact_expectation() {
    let set = training_blobs(21);
    let t = Network::new("t", vec![6], dense_layers(6, 10, 3), 100).expect("valid architecture");
    let models: Vec<Network<f32>> = std::iter::once(t.clone())
        .chain((1..3).map(|i| t.with_fresh_params(format!("t-m{i}"), 100 + i as u64)))
        .collect();
    // Untrained members disagree a lot, which is exactly what makes the
    // identity worth checking.
    let clf = MuldefClassifier::new(toy_family(models), 9).expect("valid family");

    let exact = clf.expected_accuracy(&set).expect("evaluation succeeds");
    let by_hand: f64 = clf
        .family()
        .models
        .iter()
        .map(|m| accuracy(m, &set).expect("evaluation succeeds"))
        .sum::<f64>()
        / clf.num_models() as f64;
    assert!(
        (exact - by_hand).abs() < 1e-12,
        "exact expectation {exact} != mean of member accuracies {by_hand}"
    );

    const ROUNDS: u64 = 200;
    let n = set.len();
    let indices: Vec<usize> = (0..n).collect();
    let (batch, labels) = set.batch(&indices);
    let mut correct_per_example = vec![0u64; n];
    for round in 0..ROUNDS {
        let preds = clf
            .classify_batch(&batch, round * n as u64)
            .expect("classification succeeds");
        for (i, (p, want)) in preds.iter().zip(&labels).enumerate() {
            if p == want {
                correct_per_example[i] += 1;
            }
        }
    }
    let total: u64 = correct_per_example.iter().sum();
    let mc = total as f64 / (n as u64 * ROUNDS) as f64;
    // Standard error of the estimator from the per-example hit rates.
    let var: f64 = correct_per_example
        .iter()
        .map(|&c| {
            let q = c as f64 / ROUNDS as f64;
            q * (1.0 - q)
        })
        .sum::<f64>()
        / (n as f64 * n as f64 * ROUNDS as f64);
    let se = var.sqrt();
    assert!(
        (mc - exact).abs() <= 3.0 * se + 1e-9,
        "Monte-Carlo accuracy {mc} vs exact {exact} exceeds 3 standard errors ({se})"
    );
}

#[test]
fn defense_oracle_consumes_one_draw_per_query() {
    let t = linear_softmax("t", 2, 2, 1);
    let models = vec![t.clone(), t.with_fresh_params("t-m1", 2)];
    let clf = MuldefClassifier::new(toy_family(models), 77).expect("valid family");

    let batch = Tensor::from_fn(vec![10, 2], || 0.5f32);
    let mut oracle = clf.oracle(0);
    let first = oracle.label_batch(&batch).expect("labeling succeeds");
    assert_eq!(oracle.next_draw(), 10);
    let second = oracle.label_batch(&batch).expect("labeling succeeds");
    assert_eq!(oracle.next_draw(), 20);

    assert_eq!(
        first,
        clf.classify_batch(&batch, 0)
            .expect("classification succeeds")
    );
    assert_eq!(
        second,
        clf.classify_batch(&batch, 10)
            .expect("classification succeeds")
    );
}

// ---------------------------------------------------------------------------
// Merged model
// ---------------------------------------------------------------------------

#[test]
fn merged_family_of_identical_models_matches_the_single_model() {
    let t = Network::new("t", vec![6], dense_layers(6, 10, 3), 5).expect("valid architecture");
    let mut twin = t.clone();
    twin.set_id("t-twin");
    let batch = Tensor::from_fn(vec![4, 6], {
        let mut r = rng::seeded(8, "merged-identical");
        move || r.gen_range(0.0..1.0f32)
    });
    let (want_probs, want_logits) = t.probs_and_logits(&batch).expect("forward succeeds");

    let mean_probs =
        MergedModel::new(vec![&t, &twin], MergeRule::MeanProbs).expect("members compatible");
    let (probs, _) = mean_probs
        .probs_and_logits(&batch)
        .expect("forward succeeds");
    for (got, want) in probs.data().iter().zip(want_probs.data()) {
        assert!(
            (got - want).abs() < 1e-6,
            "merged prob {got} vs single {want}"
        );
    }
    assert_eq!(
        mean_probs.predict(&batch).expect("predict succeeds"),
        t.predict(&batch).expect("predict succeeds")
    );

    let mean_logits =
        MergedModel::new(vec![&t, &twin], MergeRule::MeanLogits).expect("members compatible");
    let (probs, logits) = mean_logits
        .probs_and_logits(&batch)
        .expect("forward succeeds");
    for (got, want) in logits.data().iter().zip(want_logits.data()) {
        assert!(
            (got - want).abs() < 1e-6,
            "merged logit {got} vs single {want}"
        );
    }
    for (got, want) in probs.data().iter().zip(want_probs.data()) {
        assert!(
            (got - want).abs() < 1e-6,
            "merged prob {got} vs single {want}"
        );
    }
}

#[test]
fn merged_probabilities_average_opposing_certainties() {
    // Logit gaps of 40 make each member's softmax saturate, so the merged
    // distribution must sit at [0.5, 0.5] up to f32 noise.
    let a = committed_net("a", 0, 40.0);
    let b = committed_net("b", 1, 40.0);
    let merged = MergedModel::new(vec![&a, &b], MergeRule::MeanProbs).expect("members compatible");
    let batch = Tensor::new(vec![1, 2], vec![1.0, 0.0]).expect("shape matches");
    let (probs, _) = merged.probs_and_logits(&batch).expect("forward succeeds");
    assert!(
        (probs.data()[0] - 0.5).abs() < 1e-6,
        "got {:?}",
        probs.data()
    );
    assert!(
        (probs.data()[1] - 0.5).abs() < 1e-6,
        "got {:?}",
        probs.data()
    );
}

#[test]
fn merged_input_gradient_matches_finite_differences() {
    const TOL: f64 = 1e-3;
    // Keep relu preactivations away from their switching boundary so the
    // central differences measure the same one-sided slopes backprop uses.
    const SWITCH_MARGIN: f64 = 1e-3;

    let a: Network<f64> =
        Network::new("a", vec![4], dense_layers(4, 6, 3), 50).expect("valid architecture");
    let b: Network<f64> =
        Network::new("b", vec![4], dense_layers(4, 6, 3), 51).expect("valid architecture");

    let mut r = rng::seeded(52, "merged-fd");
    let (batch, labels) = loop {
        let batch = Tensor::from_fn(vec![3, 4], || r.gen_range(0.05..0.95));
        let margin = a
            .switch_margin(&batch)
            .expect("forward succeeds")
            .min(b.switch_margin(&batch).expect("forward succeeds"));
        if margin > SWITCH_MARGIN {
            let labels: Vec<usize> = (0..3).map(|_| r.gen_range(0..3)).collect();
            break (batch, labels);
        }
    };
    let seed = Tensor::from_fn(vec![3, 3], || r.gen_range(-1.0..1.0));

    for rule in [MergeRule::MeanProbs, MergeRule::MeanLogits] {
        let merged = MergedModel::new(vec![&a, &b], rule).expect("members compatible");
        let loss_err = check_loss_input_grad(&merged, &batch, &labels, DEFAULT_STEP)
            .expect("finite differences succeed");
        assert!(
            loss_err < TOL,
            "{rule:?}: loss input-gradient relative error {loss_err}"
        );
        let seed_err = check_seed_input_grad(&merged, &batch, &seed, DEFAULT_STEP)
            .expect("finite differences succeed");
        assert!(
            seed_err < TOL,
            "{rule:?}: seeded input-gradient relative error {seed_err}"
        );
    }
}

// ---------------------------------------------------------------------------
// Family generation
// ---------------------------------------------------------------------------

#[test]
fn zero_additional_members_yield_seed_model_and_its_set() {
    let set = training_blobs(31);
    let mut t =
        Network::new("t", vec![6], dense_layers(6, 10, 3), 300).expect("valid architecture");
    train(&mut t, &set, &quick_train()).expect("training succeeds");

    let mut cfg = GeneratorConfig::new(0, SolutionKind::Solution1, 0.25, fgsm_attack(0.15));
    cfg.train = quick_train();
    cfg.rng_seed = 3;
    let family = generate_family(&t, &set, &cfg).expect("generation succeeds");

    assert_eq!(family.models.len(), 1);
    assert_eq!(family.adv_sets.len(), 1);
    assert!(params_equal(&family.models[0], &t), "seed model unchanged");
    assert_eq!(family.adv_sets[0].source_model_id, "t");
    assert_eq!(
        family.adv_sets[0].examples.len(),
        cfg.adv_set_size(set.len())
    );
    assert_eq!(family.adv_sets[0].scenario, Scenario::WhiteBox);
}

#[test]
fn solution2_composition_reproduces_members_bit_for_bit() {
    let set = training_blobs(32);
    let mut t =
        Network::new("t", vec![6], dense_layers(6, 10, 3), 301).expect("valid architecture");
    train(&mut t, &set, &quick_train()).expect("training succeeds");

    let mut cfg = GeneratorConfig::new(3, SolutionKind::Solution2, 0.25, fgsm_attack(0.15));
    cfg.train = quick_train();
    cfg.rng_seed = 7;
    let family = generate_family(&t, &set, &cfg).expect("generation succeeds");

    let adv_per_set = cfg.adv_set_size(set.len());
    assert_eq!(family.models.len(), 4);
    assert_eq!(family.adv_sets.len(), 4);
    let ids: Vec<&str> = family.models.iter().map(|m| m.id()).collect();
    assert_eq!(ids, ["t", "t-m1", "t-m2", "t-m3"]);
    for (i, s) in family.adv_sets.iter().enumerate() {
        assert_eq!(s.source_model_id, family.models[i].id());
        assert_eq!(s.examples.len(), adv_per_set);
        assert_eq!(s.scenario, Scenario::WhiteBox);
    }

    // Same seed, same family, bit for bit.
    let again = generate_family(&t, &set, &cfg).expect("generation succeeds");
    for (m1, m2) in family.models.iter().zip(&again.models) {
        assert!(params_equal(m1, m2), "regeneration differs at {}", m1.id());
    }
    assert_eq!(family.adv_sets, again.adv_sets);

    // Independent reproduction of the last member: train a fresh net on the
    // original set merged with ALL three earlier adversarial sets, in
    // construction order, using the same derived seeds. Any deviation in the
    // composition (sets used, their order, or sizes) changes the shuffled
    // batches and therefore the parameters.
    let adv_data: Vec<Dataset> = family.adv_sets[..3]
        .iter()
        .zip(&family.models)
        .map(|(s, m)| {
            s.to_dataset(format!("adv-{}", m.id()))
                .expect("set converts to dataset")
        })
        .collect();
    let mut parts: Vec<&Dataset> = vec![&set];
    parts.extend(adv_data.iter());
    let composed = Dataset::merged("rebuild", &parts).expect("parts are compatible");
    assert_eq!(
        composed.len(),
        set.len() + 3 * adv_per_set,
        "solution-2 training set grows by one adversarial block per prior model"
    );

    let mut rebuilt = t.with_fresh_params("t-m3", rng::derive(cfg.rng_seed, "member-init-3"));
    let mut tc = quick_train();
    tc.seed = rng::derive(cfg.rng_seed, "member-train-3");
    train(&mut rebuilt, &composed, &tc).expect("training succeeds");
    assert!(
        params_equal(&rebuilt, &family.models[3]),
        "member 3 was not trained on train set + all prior adversarial sets"
    );
}

#[test]
fn solution1_trains_on_newest_adversarial_set_only() {
    let set = training_blobs(33);
    let mut t =
        Network::new("t", vec![6], dense_layers(6, 10, 3), 302).expect("valid architecture");
    train(&mut t, &set, &quick_train()).expect("training succeeds");

    let mut cfg = GeneratorConfig::new(2, SolutionKind::Solution1, 0.25, fgsm_attack(0.15));
    cfg.train = quick_train();
    cfg.rng_seed = 11;
    let family = generate_family(&t, &set, &cfg).expect("generation succeeds");
    assert_eq!(family.models.len(), 3);

    // Member 2's training set is the original merged with M_1's set alone.
    let newest = family.adv_sets[1]
        .to_dataset(format!("adv-{}", family.models[1].id()))
        .expect("set converts to dataset");
    let composed = Dataset::merged("rebuild", &[&set, &newest]).expect("parts are compatible");
    assert_eq!(composed.len(), set.len() + cfg.adv_set_size(set.len()));

    let mut rebuilt = t.with_fresh_params("t-m2", rng::derive(cfg.rng_seed, "member-init-2"));
    let mut tc = quick_train();
    tc.seed = rng::derive(cfg.rng_seed, "member-train-2");
    train(&mut rebuilt, &composed, &tc).expect("training succeeds");
    assert!(
        params_equal(&rebuilt, &family.models[2]),
        "member 2 was not trained on train set + newest adversarial set"
    );

    // The two solutions genuinely diverge at the same seeds once history
    // matters (round 2 onward).
    let mut cfg2 = cfg.clone();
    cfg2.solution = SolutionKind::Solution2;
    let family2 = generate_family(&t, &set, &cfg2).expect("generation succeeds");
    assert!(
        !params_equal(&family.models[2], &family2.models[2]),
        "solution 1 and 2 trained identical members"
    );
}

#[test]
fn training_failure_reports_partial_progress() {
    let set = training_blobs(34);
    let t = Network::new("t", vec![6], dense_layers(6, 10, 3), 303).expect("valid architecture");

    let mut cfg = GeneratorConfig::new(1, SolutionKind::Solution1, 0.25, fgsm_attack(0.15));
    cfg.train = TrainConfig {
        // Larger than round 1's composed training split, so member training
        // fails after the seed model's adversarial set exists.
        batch_size: 1000,
        ..quick_train()
    };
    let err = generate_family(&t, &set, &cfg).expect_err("training must fail");
    match err {
        Error::FamilyGeneration {
            completed_models,
            completed_sets,
            detail,
        } => {
            assert_eq!(completed_models, 1, "seed model was in place");
            assert_eq!(completed_sets, 1, "seed model's set was in place");
            assert!(
                detail.contains("batch"),
                "detail should carry the cause: {detail}"
            );
        }
        other => panic!("expected FamilyGeneration error, got {other:?}"),
    }
}

#[test]
fn convergence_stop_halts_family_growth() {
    let set = training_blobs(35);
    let mut t =
        Network::new("t", vec![6], dense_layers(6, 10, 3), 304).expect("valid architecture");
    train(&mut t, &set, &quick_train()).expect("training succeeds");

    let mut cfg = GeneratorConfig::new(5, SolutionKind::Solution1, 0.25, fgsm_attack(0.15));
    cfg.train = quick_train();
    cfg.rng_seed = 13;
    // Accuracies live in [0, 1], so consecutive rounds always move by less
    // than 1.1: the stop must trigger at the first comparison, after round 2.
    cfg.convergence_stop = ConvergenceStop {
        enabled: true,
        min_delta: 1.1,
    };
    let family = generate_family(&t, &set, &cfg).expect("generation succeeds");
    assert_eq!(family.models.len(), 3, "stopped after the first comparison");
    assert_eq!(family.adv_sets.len(), 3);
    family
        .validate()
        .expect("stopped family is still consistent");

    // A single round has nothing to compare against, so p = 1 is unaffected.
    let mut cfg1 = cfg.clone();
    cfg1.num_additional = 1;
    let family1 = generate_family(&t, &set, &cfg1).expect("generation succeeds");
    assert_eq!(family1.models.len(), 2);
}

#[test]
fn merged_model_over_generated_family_is_evaluable() {
    let set = training_blobs(36);
    let mut t =
        Network::new("t", vec![6], dense_layers(6, 10, 3), 305).expect("valid architecture");
    train(&mut t, &set, &quick_train()).expect("training succeeds");

    let mut cfg = GeneratorConfig::new(1, SolutionKind::Solution1, 0.25, fgsm_attack(0.15));
    cfg.train = quick_train();
    cfg.rng_seed = 17;
    let family = generate_family(&t, &set, &cfg).expect("generation succeeds");

    let merged = merged_model(&family, MergeRule::MeanProbs).expect("family is valid");
    assert_eq!(merged.num_members(), 2);
    let acc = accuracy(&merged, &set).expect("evaluation succeeds");
    assert!((0.0..=1.0).contains(&acc));
}
