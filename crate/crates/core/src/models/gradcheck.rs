//! Central finite-difference check of analytic parameter gradients.

use remission_nn::{Graph, Tensor};

use super::Network;

/// Relative error used throughout: `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[derive(Debug, Clone)]
pub struct GradCheck {
    pub checked: usize,
    pub max_rel_error: f64,
    /// `(parameter name, flat index)` of the worst entry.
    pub worst: (String, usize),
}

fn loss(net: &Network<f64>, batch: &Tensor<f64>, labels: &[usize]) -> f64 {
    let mut g = Graph::new(&net.params);
    let x = g.input(batch.clone());
    let y = net.logits(&mut g, x);
    let l = g.cross_entropy(y, labels);
    g.value(l).item()
}

/// Compare the cross-entropy gradient of every scalar parameter against
/// `(L(θ+ε) - L(θ-ε)) / 2ε`.
pub fn check(net: &Network<f64>, batch: &Tensor<f64>, labels: &[usize], eps: f64) -> GradCheck {
    let analytic = {
        let mut g = Graph::new(&net.params);
        let x = g.input(batch.clone());
        let y = net.logits(&mut g, x);
        let l = g.cross_entropy(y, labels);
        g.backward(l).param_grads(&net.params)
    };
    let mut probe = net.clone();
    let mut out = GradCheck { checked: 0, max_rel_error: 0.0, worst: (String::new(), 0) };
    for p in 0..net.params.len() {
        let id = remission_nn::ParamId(p);
        for i in 0..net.params.get(id).numel() {
            let orig = probe.params.get(id).data()[i];
            probe.params.get_mut(id).data_mut()[i] = orig + eps;
            let up = loss(&probe, batch, labels);
            probe.params.get_mut(id).data_mut()[i] = orig - eps;
            let down = loss(&probe, batch, labels);
            probe.params.get_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let err = relative_error(analytic[p].data()[i], numeric, 1e-6);
            out.checked += 1;
            if err > out.max_rel_error {
                out.max_rel_error = err;
                out.worst = (net.params.name(id).to_string(), i);
            }
        }
    }
    out
}
