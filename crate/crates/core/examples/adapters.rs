//! LoRA and mixture-of-LoRA adapters on their own, then attached to a toy
//! encoder: a fresh stack changes nothing, and the parameter budget of the
//! full-scale placement stays under a tenth of the base model.

use candle_core::Tensor;
use hidac::adapters::{AdapterPlacement, AdapterStack, LoraLayer, MoeLoraLayer};
use hidac::backbone::ArchConfig;
use hidac::tensor::{device, seeded_rng, DTYPE};

fn main() -> hidac::error::Result<()> {
    let mut rng = seeded_rng(42);
    let x = Tensor::randn(0.0, 1.0, (10, 8), &device())?.to_dtype(DTYPE)?;
    let base = Tensor::zeros((10, 8), DTYPE, &device())?;

    let lora = LoraLayer::new(8, 8, 4, 8.0, &mut rng)?;
    let y = lora.forward(&x, &base)?;
    println!("LoRA r={} scaling={} params={}", lora.rank(), lora.scaling(), lora.param_count());
    println!("  fresh delta max |y| = {}", y.abs()?.max_all()?.to_scalar::<f64>()?);

    let moe = MoeLoraLayer::new(8, 8, 4, 4, 8.0, &mut rng)?;
    let (_, gates) = moe.forward(&x, &base)?;
    let row_sums = gates.sum(1)?.flatten_all()?.to_vec1::<f64>()?;
    println!("MoE experts={} params={} gate rows sum to {:?}", moe.n_experts(), moe.param_count(), &row_sums[..3]);

    let arch = ArchConfig::known("xlm-roberta-large").expect("known architecture");
    let placement = AdapterPlacement::default();
    let enumerated: usize = placement
        .param_shapes(&arch)
        .iter()
        .map(|(_, s)| s.iter().product::<usize>())
        .sum();
    println!(
        "\nfull-scale placement: {} adapter parameters ({} closed form), {:.2}% of {} base",
        enumerated,
        placement.closed_form_param_count(&arch),
        100.0 * enumerated as f64 / arch.base_param_count() as f64,
        arch.base_param_count()
    );

    let toy = ArchConfig::toy(4, 16);
    let stack = AdapterStack::new(&toy, &AdapterPlacement::scaled(4, 4, 8.0), 42)?;
    println!("toy stack: {} tensors, checksum {}", stack.named_vars().len(), &stack.checksum()?[..16]);
    Ok(())
}
