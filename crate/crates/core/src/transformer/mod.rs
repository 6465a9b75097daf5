//! The shared transformer stack, its low-rank adapters, and greedy decoding.

mod config;
mod decode;
mod lora;
mod model;

pub use config::{TransformerConfig, LAYER_NORM_EPS};
pub use decode::{argmax, greedy_decode};
pub use lora::apply_lora;
pub use model::{
    embed_tokens, forward_embeddings, BoundTransformer, Dropout, Layer, LoraPair, TransformerModel,
};
pub use model::is_adapter_param;

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::{AttentionMask, Graph};
    use crate::error::Error;
    use crate::params::ParamSet;
    use crate::tensor::Tensor;

    fn small() -> TransformerConfig {
        TransformerConfig {
            d_model: 16,
            n_heads: 2,
            n_layers: 2,
            d_ff: 32,
            vocab_size: 12,
            max_positions: 24,
            lora_rank: 2,
            lora_alpha: 4.0,
            lora_dropout: 0.0,
        }
    }

    #[test]
    fn embed_tokens_rows_and_errors() {
        let mut m = TransformerModel::new(small(), 1).unwrap();
        for v in m.token_embedding.data_mut()[..16].iter_mut() {
            *v = 0.0;
        }
        let e = embed_tokens(&m, &[0]).unwrap();
        assert_eq!(e.shape(), &[1, 16]);
        assert!(e.data().iter().all(|&v| v == 0.0));
        let e = embed_tokens(&m, &[3, 3]).unwrap();
        assert_eq!(e.row(0), e.row(1));
        assert_eq!(embed_tokens(&m, &[1; 8]).unwrap().shape(), &[8, 16]);
        assert!(matches!(embed_tokens(&m, &[12]), Err(Error::Index { .. })));
        assert!(matches!(embed_tokens(&m, &[]), Err(Error::Contract(_))));
    }

    #[test]
    fn forward_shapes_capacity_and_finiteness() {
        let m = TransformerModel::new(small(), 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::randn(&[1, 16], 1.0, &mut rng);
        assert_eq!(forward_embeddings(&m, &x, AttentionMask::Causal).unwrap().shape(), &[1, 16]);
        let too_long = Tensor::zeros(&[25, 16]);
        assert!(matches!(
            forward_embeddings(&m, &too_long, AttentionMask::Causal),
            Err(Error::Capacity { needed: 25, max: 24 })
        ));

        let mut zero = m.clone();
        zero.visit_params_mut(&mut |_, t| t.data_mut().iter_mut().for_each(|v| *v = 0.0));
        let out = forward_embeddings(&zero, &Tensor::randn(&[6, 16], 1.0, &mut rng), AttentionMask::Causal).unwrap();
        assert!(out.is_finite());
        assert!(out.norm() < 1e3);
    }

    #[test]
    fn perturbing_a_row_leaves_earlier_rows_bit_identical() {
        let m = TransformerModel::new(small(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::randn(&[9, 16], 1.0, &mut rng);
        let base = forward_embeddings(&m, &x, AttentionMask::Causal).unwrap();
        for j in 0..9 {
            let mut y = x.clone();
            for v in &mut y.data_mut()[j * 16..(j + 1) * 16] {
                *v += 0.5;
            }
            let out = forward_embeddings(&m, &y, AttentionMask::Causal).unwrap();
            assert_eq!(&out.data()[..j * 16], &base.data()[..j * 16]);
            assert_ne!(&out.data()[j * 16..(j + 1) * 16], &base.data()[j * 16..(j + 1) * 16]);
        }
    }

    #[test]
    fn fresh_adapters_do_not_change_outputs() {
        let m = TransformerModel::new(small(), 4).unwrap();
        let base = m.without_lora();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Tensor::randn(&[7, 16], 1.0, &mut rng);
        let a = forward_embeddings(&m, &x, AttentionMask::Causal).unwrap();
        let b = forward_embeddings(&base, &x, AttentionMask::Causal).unwrap();
        assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn frozen_base_only_exposes_adapter_gradients() {
        let mut m = TransformerModel::new(small(), 7).unwrap();
        m.frozen_base = true;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x0 = Tensor::randn(&[5, 16], 1.0, &mut rng);
        let mut g = Graph::new();
        let b = m.bind(&mut g, true);
        let x = g.leaf(x0, false);
        let h = b.forward_embeddings(&mut g, x, AttentionMask::Causal, None).unwrap();
        let logits = b.logits(&mut g, h).unwrap();
        let loss = g.cross_entropy(logits, &[1, 2, 3, 4, 5], &[true; 5]).unwrap();
        let grads = g.backward(loss).unwrap();
        let named = b.collect_grads(&g, &grads);
        assert!(!named.is_empty());
        assert!(named.keys().all(|k| is_adapter_param(k)), "{:?}", named.keys());
        // B starts at zero, so only B receives signal on the first step.
        assert!(named.iter().any(|(k, t)| k.ends_with(".b") && t.norm() > 0.0));
    }

    #[test]
    fn decode_budget_zero_and_immediate_stop() {
        let mut m = TransformerModel::new(small(), 9).unwrap();
        let prefix = Tensor::zeros(&[3, 16]);
        assert!(greedy_decode(&m, &prefix, 0, 1).unwrap().is_empty());
        // Make token 5 dominate every logit row.
        m.final_norm_bias = Tensor::full(&[16], 1.0);
        m.final_norm_gain = Tensor::zeros(&[16]);
        for row in 0..16 {
            m.lm_head.data_mut()[row * 12 + 5] = 10.0;
        }
        assert!(greedy_decode(&m, &prefix, 4, 5).unwrap().is_empty());
        assert_eq!(greedy_decode(&m, &prefix, 4, 0).unwrap(), vec![5, 5, 5, 5]);
        assert!(matches!(greedy_decode(&m, &prefix, 22, 5), Err(Error::Capacity { .. })));
    }

    #[test]
    fn argmax_prefers_first_on_ties() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0]), 0);
    }
}
