//! Reverse-mode gradients of a small attention block against central
//! differences.

use iqvic::{AttentionMask, Graph, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn loss(x: &Tensor, w: &Tensor) -> f64 {
    let mut g = Graph::new();
    let (x, w) = (g.leaf(x.clone(), false), g.leaf(w.clone(), false));
    let q = g.matmul(x, w).unwrap();
    let a = g.attention(q, x, x, 2, AttentionMask::Causal).unwrap();
    let y = g.gelu(a).unwrap();
    let s = g.sum(y).unwrap();
    g.value(s).item()
}

fn main() -> iqvic::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = Tensor::uniform(&[5, 4], -1.0, 1.0, &mut rng);
    let w = Tensor::uniform(&[4, 4], -1.0, 1.0, &mut rng);

    let mut g = Graph::new();
    let (xv, wv) = (g.leaf(x.clone(), false), g.leaf(w.clone(), true));
    let q = g.matmul(xv, wv)?;
    let a = g.attention(q, xv, xv, 2, AttentionMask::Causal)?;
    let y = g.gelu(a)?;
    let s = g.sum(y)?;
    let grads = g.backward(s)?;
    let analytic = grads.wrt(&g, wv);

    let h = 1e-5;
    let mut worst = 0.0f64;
    for i in 0..w.len() {
        let (mut plus, mut minus) = (w.clone(), w.clone());
        plus.data_mut()[i] += h;
        minus.data_mut()[i] -= h;
        let fd = (loss(&x, &plus) - loss(&x, &minus)) / (2.0 * h);
        let an = analytic.data()[i];
        let rel = (an - fd).abs() / (an.abs() + fd.abs()).max(1e-8);
        println!("w[{i:>2}] analytic {an:+.8} numeric {fd:+.8} rel {rel:.1e}");
        worst = worst.max(rel);
    }
    println!("max relative error {worst:.2e}");
    Ok(())
}
