//! The three training losses on hand-made inputs: label-smoothed
//! cross-entropy, the label-centered contrastive loss against 17 prototypes,
//! and the instance-level InfoNCE against a queue of negatives.

use candle_core::Tensor;
use hidac::losses::{cross_entropy, instance_scl, label_centered_scl, LabelPrototypes, NegativeQueue};
use hidac::relsdata::{UnifiedLabel, NUM_LABELS};
use hidac::tensor::{device, to_scalar, DTYPE};

fn main() -> hidac::error::Result<()> {
    let dev = device();
    let logits = Tensor::new(&[[2.0f64, 0.0, 0.0]], &dev)?;
    for eps in [0.0, 0.1] {
        println!("CE(target 0, eps {eps}) = {:.6}", to_scalar(&cross_entropy(&logits, &[0], eps)?)?);
    }

    // With every prototype identical, each label is equally likely.
    let protos = LabelPrototypes::from_tensor(&Tensor::ones((NUM_LABELS, 8), DTYPE, &dev)?)?;
    let h = Tensor::randn(0.0, 1.0, (4, 8), &dev)?.to_dtype(DTYPE)?;
    let labels = [UnifiedLabel::Causal; 4];
    let uniform = to_scalar(&label_centered_scl(&h, &protos, &labels, 0.1)?)?;
    println!("label-centered, uniform similarities = {uniform:.4} (ln 17 = {:.4})", (NUM_LABELS as f64).ln());

    let protos = LabelPrototypes::new(8, 42)?;
    for tau in [0.05, 0.1, 0.5] {
        println!("label-centered, random prototypes, tau {tau}: {:.4}", to_scalar(&label_centered_scl(&h, &protos, &labels, tau)?)?);
    }

    let mut queue = NegativeQueue::new(16, 8)?;
    let negatives = Tensor::randn(0.0, 1.0, (16, 8), &dev)?.to_dtype(DTYPE)?;
    queue.push(&negatives, None)?;
    let noise = (Tensor::randn(0.0, 0.05, (4, 8), &dev)?.to_dtype(DTYPE)? + &h)?;
    println!("instance InfoNCE, near-identical views: {:.4}", to_scalar(&instance_scl(&h, &noise, &queue, 0.1, None)?)?);
    let unrelated = Tensor::randn(0.0, 1.0, (4, 8), &dev)?.to_dtype(DTYPE)?;
    println!("instance InfoNCE, unrelated views:      {:.4}", to_scalar(&instance_scl(&h, &unrelated, &queue, 0.1, None)?)?);
    Ok(())
}
