//! Freshly attached adapters (B = 0) leave the model's outputs bit-identical;
//! one nudge to B changes them.

use iqvic::params::ParamSet;
use iqvic::transformer::{forward_embeddings, TransformerConfig, TransformerModel};
use iqvic::{AttentionMask, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> iqvic::Result<()> {
    let cfg = TransformerConfig {
        vocab_size: 40,
        max_positions: 16,
        ..Default::default()
    };
    let base = TransformerModel::new(cfg, 1)?.without_lora();
    let mut adapted = base.adapted(8, 16.0, 0.05, 2)?;
    let x = Tensor::uniform(&[10, 64], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(3));

    let y0 = forward_embeddings(&base, &x, AttentionMask::Causal)?;
    let y1 = forward_embeddings(&adapted, &x, AttentionMask::Causal)?;
    println!("identical at init: {}", y0 == y1);

    let mut adapters = 0;
    adapted.visit_params_mut(&mut |name, t| {
        if iqvic::transformer::is_adapter_param(name) {
            adapters += t.len();
        }
        if name == "layers.0.lora_v.b" {
            t.data_mut()[0] = 0.5;
        }
    });
    let y2 = forward_embeddings(&adapted, &x, AttentionMask::Causal)?;
    let moved = y0.data().iter().zip(y2.data()).filter(|(a, b)| a != b).count();
    println!("{adapters} adapter weights; after one edit {moved}/{} outputs differ", y0.len());
    Ok(())
}
