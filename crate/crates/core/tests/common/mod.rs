#![allow(dead_code)]

/// Brute-force replay of the merge rule on plain vectors: keep every entry,
/// and whenever the list is one over capacity, recompute all adjacent cosines
/// from scratch and average the first most-similar pair.
pub fn replay_merges(stream: &[Vec<f64>], capacity: usize) -> Vec<Vec<f64>> {
    let mut mem: Vec<Vec<f64>> = Vec::new();
    for e in stream {
        mem.push(e.clone());
        if mem.len() <= capacity {
            continue;
        }
        let cos = |a: &[f64], b: &[f64]| {
            let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            if na < 1e-12 || nb < 1e-12 {
                0.0
            } else {
                a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
            }
        };
        let sims: Vec<f64> = (0..mem.len() - 1).map(|i| cos(&mem[i], &mem[i + 1])).collect();
        let best = sims.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let k = sims.iter().position(|&s| s == best).unwrap();
        let b = mem.remove(k + 1);
        mem[k] = mem[k].iter().zip(&b).map(|(x, y)| (x + y) / 2.0).collect();
    }
    mem
}
