use crate::{Error, Result};

use super::network::Network;
use super::Real;

/// Plain stochastic gradient descent.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
}

impl Sgd {
    pub fn new(lr: f64) -> Self {
        Sgd { lr }
    }

    /// Applies accumulated gradients and clears them.
    pub fn step<T: Real>(&self, net: &mut Network<T>) -> Result<()> {
        let lr = T::from_f64(self.lr);
        for p in net.params_mut() {
            for (v, g) in p.values.iter_mut().zip(&p.grad) {
                if !g.is_finite() {
                    return Err(Error::Training(format!("non-finite gradient in {}", p.name)));
                }
                *v = *v - lr * *g;
            }
            p.zero_grad();
        }
        Ok(())
    }
}

/// Adam with the usual default moment decays (0.9, 0.999) and bias correction.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: Vec::new(), v: Vec::new() }
    }

    /// Applies accumulated gradients and clears them. Moment buffers are
    /// allocated on first use and tied to the network's parameter layout.
    pub fn step(&mut self, net: &mut Network<T>) -> Result<()> {
        if self.m.is_empty() {
            self.m = net.params().iter().map(|p| vec![T::zero(); p.len()]).collect();
            self.v = self.m.clone();
        } else if self.m.len() != net.params().len()
            || self.m.iter().zip(net.params()).any(|(m, p)| m.len() != p.len())
        {
            return Err(Error::Usage("optimizer state does not match network layout".to_string()));
        }

        self.t += 1;
        let b1 = T::from_f64(self.beta1);
        let b2 = T::from_f64(self.beta2);
        let one = T::one();
        let bc1 = T::from_f64(1.0 - self.beta1.powi(self.t as i32));
        let bc2 = T::from_f64(1.0 - self.beta2.powi(self.t as i32));
        let lr = T::from_f64(self.lr);
        let eps = T::from_f64(self.eps);

        for (pi, p) in net.params_mut().iter_mut().enumerate() {
            let m = &mut self.m[pi];
            let v = &mut self.v[pi];
            for i in 0..p.values.len() {
                let g = p.grad[i];
                if !g.is_finite() {
                    return Err(Error::Training(format!("non-finite gradient in {}", p.name)));
                }
                m[i] = b1 * m[i] + (one - b1) * g;
                v[i] = b2 * v[i] + (one - b2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p.values[i] = p.values[i] - lr * mhat / (vhat.sqrt() + eps);
                if !p.values[i].is_finite() {
                    return Err(Error::Training(format!("non-finite parameter in {}", p.name)));
                }
            }
            p.zero_grad();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::super::network::{LayerSpec, Network, NetworkSpec};
    use super::*;
    use crate::rng;

    fn scalar_net() -> Network<f64> {
        let spec = NetworkSpec::new(&[1]).layer(LayerSpec::dense(1));
        Network::new(spec, &mut rng::stream(1, "optim-test")).unwrap()
    }

    #[test]
    fn sgd_applies_lr_times_grad() {
        let mut net = scalar_net();
        let before = net.params()[0].values[0];
        net.params_mut()[0].grad[0] = 2.0;
        Sgd::new(0.1).step(&mut net).unwrap();
        let after = net.params()[0].values[0];
        assert!((after - (before - 0.2)).abs() < 1e-12);
        assert_eq!(net.params()[0].grad[0], 0.0);
    }

    #[test]
    fn adam_first_step_is_lr_sized() {
        // With bias correction, the first update is lr * g / (|g| + eps').
        let mut net = scalar_net();
        let before = net.params()[0].values[0];
        net.params_mut()[0].grad[0] = 3.0;
        let mut adam = Adam::new(1e-3);
        adam.step(&mut net).unwrap();
        let delta = net.params()[0].values[0] - before;
        assert!((delta + 1e-3).abs() < 1e-6, "delta {delta}");
    }

    #[test]
    fn adam_minimises_quadratic() {
        let mut net = scalar_net();
        let mut adam = Adam::new(0.05);
        for _ in 0..800 {
            // d/dp of (p - 3)^2 / 2.
            let p = net.params()[0].values[0];
            net.params_mut()[0].grad[0] = p - 3.0;
            adam.step(&mut net).unwrap();
        }
        let p = net.params()[0].values[0];
        assert!((p - 3.0).abs() < 0.02, "p {p}");
    }

    #[test]
    fn optimizers_reject_non_finite_grads() {
        let mut net = scalar_net();
        net.params_mut()[0].grad[0] = f64::NAN;
        assert!(Sgd::new(0.1).step(&mut net).is_err());
        net.params_mut()[0].grad[0] = f64::INFINITY;
        assert!(Adam::new(0.1).step(&mut net).is_err());
    }
}
