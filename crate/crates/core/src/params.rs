//! Named-parameter traversal shared by the optimizer and checkpoint codec.

use std::collections::BTreeMap;

use crate::tensor::Tensor;

/// Anything that owns named trainable arrays.
pub trait ParamSet {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor));
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor));

    /// Snapshot of every parameter, keyed by name.
    fn param_map(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        self.visit_params(&mut |name, t| {
            out.insert(name.to_string(), t.clone());
        });
        out
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, t| n += t.len());
        n
    }
}

/// Gradients keyed by parameter name. Missing names mean zero gradient.
pub type GradMap = BTreeMap<String, Tensor>;

/// `dst += scale · src`, inserting missing entries.
pub fn accumulate(dst: &mut GradMap, src: &GradMap, scale: f64) {
    for (name, g) in src {
        match dst.get_mut(name) {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += scale * b;
                }
            }
            None => {
                let mut t = g.clone();
                if scale != 1.0 {
                    for v in t.data_mut() {
                        *v *= scale;
                    }
                }
                dst.insert(name.clone(), t);
            }
        }
    }
}

pub fn scale_grads(grads: &mut GradMap, s: f64) {
    for g in grads.values_mut() {
        for v in g.data_mut() {
            *v *= s;
        }
    }
}

pub fn global_norm(grads: &GradMap) -> f64 {
    grads
        .values()
        .flat_map(|g| g.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Adds `prefix.` to every key.
pub fn prefixed(prefix: &str, grads: GradMap) -> GradMap {
    grads.into_iter().map(|(k, v)| (format!("{prefix}.{k}"), v)).collect()
}

/// Entries of `grads` whose key starts with `prefix.`, with the prefix removed.
pub fn strip_prefix(prefix: &str, grads: &GradMap) -> GradMap {
    let p = format!("{prefix}.");
    grads
        .iter()
        .filter_map(|(k, v)| k.strip_prefix(&p).map(|rest| (rest.to_string(), v.clone())))
        .collect()
}
