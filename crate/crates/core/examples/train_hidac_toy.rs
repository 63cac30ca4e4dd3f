//! Trains HiDAC with strict gradient routing on a toy encoder and a
//! separable synthetic set, then checks the frozen base and the routing.

use hidac::backbone::{load_encoder, EncoderSpec};
use hidac::losses::LossWeights;
use hidac::model::{HidacConfig, HidacModel};
use hidac::relsdata::{RelationInstance, UnifiedLabel};
use hidac::synthetic::separable_dataset;
use hidac::trainer::{evaluate_classifier, fit_hidac, gradient_probe, ProbeLoss, TrainConfig, TrainMode};

fn main() -> hidac::error::Result<()> {
    let labels = [UnifiedLabel::Elaboration, UnifiedLabel::Causal, UnifiedLabel::Contrast, UnifiedLabel::Temporal];
    let data = separable_dataset(64, &labels, 42);

    let encoder = load_encoder(&EncoderSpec::toy(4, 16, 42))?;
    let model = HidacModel::new(encoder, HidacConfig::toy(4))?;
    let base = model.encoder().base_checksum()?;
    println!(
        "tap layer {}, {} trainable of {} base parameters",
        model.tap_layer(),
        model.trainable_param_count(),
        model.encoder().param_count()
    );

    let (before, _) = evaluate_classifier(&model, &data, 32)?;
    let history = fit_hidac(&model, &TrainConfig::toy(TrainMode::HidacLabelCentered), &data, &data, None)?;
    let (after, _) = evaluate_classifier(&model, &data, 32)?;
    for e in history.epochs.iter().step_by(4) {
        println!("epoch {:>2}  ce {:.3}  lcl {:.3}  lr {:.2e}", e.epoch, e.l_ce, e.l_lcl, e.lr);
    }
    println!("accuracy {before:.3} -> {after:.3} in {} steps", history.steps.len());
    println!("base unchanged: {}", model.encoder().base_checksum()? == base);

    let batch: Vec<&RelationInstance> = data.iter().take(16).collect();
    let w = LossWeights::default();
    let ce = gradient_probe(&model, &batch, ProbeLoss::CrossEntropy, &w)?;
    let lcl = gradient_probe(&model, &batch, ProbeLoss::LabelCentered, &w)?;
    println!("|dCE/d lower|^2 = {}   |dCE/d upper|^2 = {:.3e}", ce.lower, ce.upper);
    println!("|dLCL/d upper|^2 = {}  |dLCL/d lower|^2 = {:.3e}", lcl.upper, lcl.lower);
    Ok(())
}
