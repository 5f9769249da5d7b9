//! Fast gradient sign attack.
//!
//! A single step along the sign of the loss gradient moves every pixel to
//! the edge of the attacker's L-infinity budget in the direction that
//! increases the loss the most under a linear approximation. The iterated
//! variant splits the budget into equal steps and re-projects after each,
//! so `|adv - src| <= eps` holds per pixel in every configuration.

use crate::attack::{
    check_compat, feature_len, split_examples, AdversarialSet, AttackConfig, FgsmConfig, Scenario,
    ATTACK_CHUNK,
};
use crate::data::Dataset;
use crate::error::Result;
use crate::network::DifferentiableClassifier;

/// Crafts one adversarial example per dataset example, in source order.
pub fn fgsm(
    model: &dyn DifferentiableClassifier<f32>,
    data: &Dataset,
    cfg: &FgsmConfig,
) -> Result<AdversarialSet> {
    cfg.validate()?;
    check_compat(model, data, "fgsm")?;
    let row = feature_len(data.feature_shape());
    let step = cfg.eps / cfg.iterations as f32;
    let mut examples = Vec::with_capacity(data.len());
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(ATTACK_CHUNK) {
        let (source, labels) = data.batch(chunk);
        let mut adv = source.clone();
        for _ in 0..cfg.iterations {
            let (_, grad) = model.loss_and_input_grad(&adv, &labels)?;
            let a = adv.data_mut();
            let g = grad.data();
            let s = source.data();
            for i in 0..a.len() {
                let sign = if g[i] > 0.0 {
                    1.0
                } else if g[i] < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                let moved = a[i] + step * sign;
                // Project onto the eps ball around the source, then the box.
                let bounded = moved.clamp(s[i] - cfg.eps, s[i] + cfg.eps);
                a[i] = bounded.clamp(cfg.clip_min, cfg.clip_max);
            }
        }
        let failed = vec![false; labels.len()];
        examples.extend(split_examples(
            &adv,
            &labels,
            chunk,
            &failed,
            data.feature_shape(),
        ));
        debug_assert_eq!(adv.len(), labels.len() * row);
    }
    Ok(AdversarialSet {
        source_model_id: model.model_id().to_string(),
        attack: AttackConfig::Fgsm(cfg.clone()),
        scenario: Scenario::WhiteBox,
        seed: 0,
        oracle_queries: 0,
        input_shape: data.feature_shape().to_vec(),
        num_classes: data.num_classes(),
        examples,
    })
}
