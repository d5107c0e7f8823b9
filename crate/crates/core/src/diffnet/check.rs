//! Finite-difference gradient checking.
//!
//! Central differences in `f64` give a model-free oracle for every analytic
//! gradient in the crate. The helpers poke one scalar at a time, so they are
//! only meant for small test networks.

use super::network::Network;
use super::tensor::Tensor;

/// Central-difference gradients of `loss(net(x))` with respect to every
/// parameter scalar, grouped per parameter tensor.
pub fn fd_param_grads(
    net: &mut Network<f64>,
    x: &Tensor<f64>,
    loss: &dyn Fn(&Tensor<f64>) -> f64,
    h: f64,
) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(net.params().len());
    for pi in 0..net.params().len() {
        let len = net.params()[pi].len();
        let mut grads = vec![0.0; len];
        for i in 0..len {
            let orig = net.params()[pi].values[i];
            net.params_mut()[pi].values[i] = orig + h;
            let up = loss(&net.forward(x).expect("forward failed"));
            net.params_mut()[pi].values[i] = orig - h;
            let down = loss(&net.forward(x).expect("forward failed"));
            net.params_mut()[pi].values[i] = orig;
            grads[i] = (up - down) / (2.0 * h);
        }
        out.push(grads);
    }
    out
}

/// Central-difference gradient of `loss(net(x))` with respect to `x`.
pub fn fd_input_grad(
    net: &Network<f64>,
    x: &Tensor<f64>,
    loss: &dyn Fn(&Tensor<f64>) -> f64,
    h: f64,
) -> Vec<f64> {
    let mut grads = vec![0.0; x.len()];
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = loss(&net.forward(&probe).expect("forward failed"));
        probe.data_mut()[i] = orig - h;
        let down = loss(&net.forward(&probe).expect("forward failed"));
        probe.data_mut()[i] = orig;
        grads[i] = (up - down) / (2.0 * h);
    }
    grads
}

/// `|a - b| / max(1, |a|, |b|)`, the relative error measure used by the
/// gradient-check tests.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1.0f64.max(a.abs()).max(b.abs())
}

/// Largest [`rel_err`] over two flat gradient collections.
pub fn max_rel_err(analytic: &[Vec<f64>], numeric: &[Vec<f64>]) -> f64 {
    let mut worst = 0.0f64;
    for (a, n) in analytic.iter().zip(numeric) {
        assert_eq!(a.len(), n.len(), "gradient layouts differ");
        for (&av, &nv) in a.iter().zip(n) {
            worst = worst.max(rel_err(av, nv));
        }
    }
    worst
}
