//! Saves a briefly trained model, reloads it and compares logits; loading
//! against a different base encoder is refused.

use hidac::backbone::{load_encoder, EncoderSpec};
use hidac::model::{HidacConfig, HidacModel, RelationClassifier};
use hidac::relsdata::{RelationInstance, UnifiedLabel};
use hidac::synthetic::separable_dataset;
use hidac::tensor::Mode;
use hidac::trainer::{fit_hidac, load_checkpoint, load_checkpoint_with, read_manifest, save_checkpoint, TrainConfig, TrainMode};

fn main() -> hidac::error::Result<()> {
    let data = separable_dataset(32, &[UnifiedLabel::Causal, UnifiedLabel::Contrast], 3);
    let model = HidacModel::new(load_encoder(&EncoderSpec::toy(4, 16, 42))?, HidacConfig::toy(4))?;
    let cfg = TrainConfig {
        max_steps: Some(20),
        ..TrainConfig::toy(TrainMode::HidacLabelCentered)
    };
    fit_hidac(&model, &cfg, &data, &[], None)?;

    let dir = std::env::temp_dir().join("hidac-checkpoint-example");
    save_checkpoint(&model, &dir)?;
    let manifest = read_manifest(&dir)?;
    println!("saved {} tensors to {} (base {})", manifest.tensors.len(), dir.display(), &manifest.base_hash[..16]);

    let loaded = load_checkpoint(&dir)?;
    let refs: Vec<&RelationInstance> = data.iter().collect();
    let a = model.logits(&refs, Mode::Eval)?;
    let b = loaded.classifier().logits(&refs, Mode::Eval)?;
    let diff = (a - b)?.abs()?.max_all()?.to_scalar::<f64>()?;
    println!("max |logit difference| after reload: {diff:e}");

    let other = load_encoder(&EncoderSpec::toy(4, 16, 7))?;
    match load_checkpoint_with(&dir, other) {
        Err(e) => println!("different base refused: {e}"),
        Ok(_) => println!("unexpected: mismatched base accepted"),
    }
    std::fs::remove_dir_all(&dir).ok();
    Ok(())
}
