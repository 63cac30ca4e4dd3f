//! Fine-tuning baselines that train only the top fraction of encoder
//! layers, plus the freeze arithmetic for 24- and 12-layer encoders.

use hidac::backbone::{load_encoder, EncoderSpec};
use hidac::model::BaselineModel;
use hidac::relsdata::{OrderingStrategy, UnifiedLabel};
use hidac::synthetic::separable_dataset;
use hidac::trainer::{evaluate_classifier, fit_baseline, TrainConfig, TrainMode};

fn main() -> hidac::error::Result<()> {
    for layers in [24, 12] {
        let mut enc = load_encoder(&EncoderSpec::toy(layers, 8, 1))?;
        let counts = [0.0, 0.25, 0.5, 0.75, 1.0]
            .iter()
            .map(|&r| enc.set_trainable(r).map(|rep| rep.trainable_layer_indices.len()))
            .collect::<Result<Vec<_>, _>>()?;
        println!("{layers} layers: trainable top layers for 0/.25/.5/.75/1 = {counts:?}");
    }

    let labels = [UnifiedLabel::Attribution, UnifiedLabel::Condition, UnifiedLabel::Purpose];
    let data = separable_dataset(48, &labels, 7);
    for ratio in [0.0, 0.5, 1.0] {
        let enc = load_encoder(&EncoderSpec::toy(4, 16, 42))?;
        let model = BaselineModel::new(enc, ratio, OrderingStrategy::RelationDirected, 42)?;
        let cfg = TrainConfig {
            lr_peak: 2e-3,
            max_steps: Some(60),
            unfreeze_ratio: ratio,
            ..TrainConfig::toy(TrainMode::BaselineUnfreeze)
        };
        fit_baseline(&model, &cfg, &data, &[], None)?;
        let (acc, loss) = evaluate_classifier(&model, &data, 16)?;
        let rep = model.freeze_report();
        println!(
            "unfreeze {ratio:<4} layers {:?}: {} trainable encoder params, accuracy {acc:.3}, loss {loss:.3}",
            rep.trainable_layer_indices, rep.trainable_param_count
        );
    }
    Ok(())
}
