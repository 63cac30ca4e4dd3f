use hidac::backbone::{load_encoder, EncoderSpec};
use hidac::error::Error;
use hidac::losses::LossWeights;
use hidac::model::{BaselineModel, HidacConfig, HidacModel, RelationClassifier};
use hidac::relsdata::{OrderingStrategy, RelationInstance, UnifiedLabel};
use hidac::synthetic::separable_dataset;
use hidac::tensor::Mode;
use hidac::trainer::{
    evaluate_classifier, fit_baseline, fit_hidac, gradient_probe, load_checkpoint, load_checkpoint_with,
    save_checkpoint, ProbeLoss, TrainConfig, TrainMode,
};

const LABELS: [UnifiedLabel; 4] = [
    UnifiedLabel::Elaboration,
    UnifiedLabel::Causal,
    UnifiedLabel::Contrast,
    UnifiedLabel::Temporal,
];

fn toy_model(seed: u64) -> HidacModel {
    let enc = load_encoder(&EncoderSpec::toy(4, 16, seed)).unwrap();
    HidacModel::new(enc, HidacConfig::toy(4)).unwrap()
}

fn short(mode: TrainMode, steps: usize) -> TrainConfig {
    TrainConfig {
        max_steps: Some(steps),
        ..TrainConfig::toy(mode)
    }
}

#[test]
fn overfits_separable_set() {
    let data = separable_dataset(64, &LABELS, 42);
    let model = toy_model(42);
    let history = fit_hidac(&model, &TrainConfig::toy(TrainMode::HidacLabelCentered), &data, &data, None).unwrap();
    assert!(history.steps.len() <= 200);
    let (acc, _) = evaluate_classifier(&model, &data, 32).unwrap();
    assert!(acc >= 0.95, "accuracy {acc}");
}

#[test]
fn identical_seeds_give_identical_histories() {
    let data = separable_dataset(32, &LABELS, 7);
    let run = || {
        let model = toy_model(42);
        fit_hidac(&model, &short(TrainMode::HidacLabelCentered, 12), &data, &data, None).unwrap()
    };
    assert_eq!(run(), run());
}

#[test]
fn strict_routing_separates_losses() {
    let data = separable_dataset(8, &LABELS, 1);
    let batch: Vec<&RelationInstance> = data.iter().collect();
    let model = toy_model(3);
    // Move B off zero so both blocks carry signal.
    fit_hidac(&model, &short(TrainMode::HidacLabelCentered, 4), &data, &[], None).unwrap();
    let w = LossWeights::default();
    let ce = gradient_probe(&model, &batch, ProbeLoss::CrossEntropy, &w).unwrap();
    let lcl = gradient_probe(&model, &batch, ProbeLoss::LabelCentered, &w).unwrap();
    assert_eq!(ce.lower, 0.0);
    assert_eq!(ce.prototypes, 0.0);
    assert!(ce.upper > 0.0 && ce.head > 0.0);
    assert_eq!(lcl.upper, 0.0);
    assert_eq!(lcl.head, 0.0);
    assert!(lcl.lower > 0.0 && lcl.prototypes > 0.0);
}

#[test]
fn base_weights_never_move_and_clipping_holds() {
    let data = separable_dataset(32, &LABELS, 2);
    let model = toy_model(5);
    let before = model.encoder().base_checksum().unwrap();
    let cfg = TrainConfig {
        clip_norm: 0.05,
        ..short(TrainMode::HidacLabelCentered, 10)
    };
    let history = fit_hidac(&model, &cfg, &data, &[], None).unwrap();
    assert_eq!(model.encoder().base_checksum().unwrap(), before);
    assert_eq!(model.base_hash(), before);
    assert!(history.steps.iter().any(|s| s.grad_norm > 0.05));
    for s in &history.steps {
        assert!(s.clipped_norm <= 0.05 + 1e-6, "step {} norm {}", s.step, s.clipped_norm);
    }
}

#[test]
fn best_epoch_weights_are_restored() {
    let train = separable_dataset(32, &LABELS, 11);
    let dev = separable_dataset(16, &LABELS, 12);
    let model = toy_model(13);
    let cfg = TrainConfig {
        max_epochs: 6,
        max_steps: None,
        ..TrainConfig::toy(TrainMode::HidacLabelCentered)
    };
    let history = fit_hidac(&model, &cfg, &train, &dev, None).unwrap();
    let best = history.dev_accuracies().into_iter().fold(f64::MIN, f64::max);
    let (acc, _) = evaluate_classifier(&model, &dev, 16).unwrap();
    assert_eq!(acc, best);
    let be = history.best_epoch.unwrap();
    assert_eq!(history.epochs[be - 1].dev_accuracy, Some(best));
}

#[test]
fn instance_mode_trains() {
    let data = separable_dataset(32, &LABELS, 4);
    let model = toy_model(6);
    let history = fit_hidac(&model, &short(TrainMode::HidacInstance, 8), &data, &data, None).unwrap();
    assert_eq!(history.steps.len(), 8);
    assert!(history.epochs.iter().all(|e| e.l_lcl.is_finite() && e.l_lcl > 0.0));
}

#[test]
fn baseline_updates_only_unfrozen_layers() {
    let data = separable_dataset(32, &LABELS, 8);
    let enc = load_encoder(&EncoderSpec::toy(4, 16, 9)).unwrap();
    let model = BaselineModel::new(enc, 0.5, OrderingStrategy::Natural, 42).unwrap();
    assert_eq!(model.freeze_report().trainable_layer_indices, vec![3, 4]);
    let snapshot = |prefixes: &[&str]| -> Vec<Vec<f64>> {
        model
            .encoder()
            .named_params()
            .iter()
            .filter(|(n, _)| prefixes.iter().any(|p| n.starts_with(p)))
            .map(|(_, v)| v.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap())
            .collect()
    };
    let frozen = ["encoder.layer.0.", "encoder.layer.1.", "embeddings."];
    let open = ["encoder.layer.2.", "encoder.layer.3."];
    let (frozen_before, open_before) = (snapshot(&frozen), snapshot(&open));
    assert!(!frozen_before.is_empty() && !open_before.is_empty());
    let cfg = TrainConfig {
        lr_peak: 1e-3,
        ..short(TrainMode::BaselineUnfreeze, 6)
    };
    let h = fit_baseline(&model, &cfg, &data, &data, None).unwrap();
    assert_eq!(h.steps.len(), 6);
    assert_eq!(snapshot(&frozen), frozen_before);
    assert_ne!(snapshot(&open), open_before);
}

#[test]
fn checkpoint_round_trip_and_mismatch() {
    let data = separable_dataset(16, &LABELS, 21);
    let model = toy_model(22);
    fit_hidac(&model, &short(TrainMode::HidacLabelCentered, 5), &data, &[], None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt");
    save_checkpoint(&model, &path).unwrap();
    // Saving twice replaces the directory atomically.
    save_checkpoint(&model, &path).unwrap();

    let loaded = load_checkpoint(&path).unwrap();
    let refs: Vec<&RelationInstance> = data.iter().collect();
    let a = model.logits(&refs, Mode::Eval).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
    let b = loaded
        .classifier()
        .logits(&refs, Mode::Eval)
        .unwrap()
        .flatten_all()
        .unwrap()
        .to_vec1::<f64>()
        .unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() < 1e-6);
    }

    let other = load_encoder(&EncoderSpec::toy(4, 16, 999)).unwrap();
    assert!(matches!(load_checkpoint_with(&path, other), Err(Error::Load(_))));
}
