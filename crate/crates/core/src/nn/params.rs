//! Named-tensor visitation: one trait every network implements so the
//! optimizer, checkpointing, and invariance checks can walk parameters and
//! gradient buffers without knowing the architecture.

/// Walks all parameter tensors in a fixed order. `f` receives the tensor
/// name (prefixed by the caller), the parameter slice, its gradient slice,
/// and the shape.
pub trait Params {
    fn visit(
        &mut self,
        prefix: &str,
        f: &mut dyn FnMut(&str, &mut [f64], &mut [f64], &[usize]),
    );

    fn zero_grads(&mut self) {
        self.visit("", &mut |_, _, g, _| g.fill(0.0));
    }

    fn n_params(&mut self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, p, _, _| n += p.len());
        n
    }

    /// Snapshot of (name, values) pairs, e.g. for frozen-parameter checks.
    fn snapshot(&mut self) -> Vec<(String, Vec<f64>)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, p, _, _| out.push((name.to_string(), p.to_vec())));
        out
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
