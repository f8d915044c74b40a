//! Per-agent Gaussian policy squashed into the normalized action box.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{check_len, Result};
use crate::nn::{Activation, DenseNet};
use crate::EpiRng;

/// Hidden widths of the policy network.
pub const POLICY_HIDDEN: [usize; 3] = [128, 128, 64];

/// `u = tanh(mu(obs, dt) + sigma eps)` in `[-1, 1]^a`; the state-independent
/// `log_std` is learned alongside the network.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPolicy {
    pub net: DenseNet,
    pub log_std: Vec<f64>,
}

/// Gradients for [`GaussianPolicy`].
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyGrads {
    pub net: Vec<f64>,
    pub log_std: Vec<f64>,
}

impl PolicyGrads {
    pub fn zeros(p: &GaussianPolicy) -> Self {
        Self {
            net: vec![0.0; p.net.params().len()],
            log_std: vec![0.0; p.log_std.len()],
        }
    }
}

impl GaussianPolicy {
    /// `input_dim` counts the observation plus the `dt` feature.
    pub fn new(input_dim: usize, action_dim: usize, init_log_std: f64, rng: &mut EpiRng) -> Result<Self> {
        let mut widths = vec![input_dim];
        widths.extend(POLICY_HIDDEN);
        widths.push(action_dim);
        let mut net = DenseNet::new(&widths, Activation::Relu)?;
        net.init_uniform(rng);
        net.scale_output_layer(0.1);
        Ok(Self {
            net,
            log_std: vec![init_log_std; action_dim],
        })
    }

    pub fn action_dim(&self) -> usize {
        self.log_std.len()
    }

    /// Pre-squash mean.
    pub fn mean(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.net.forward(input)
    }

    /// `tanh(mu)`.
    pub fn act_deterministic(&self, input: &[f64]) -> Result<Vec<f64>> {
        Ok(self.mean(input)?.into_iter().map(f64::tanh).collect())
    }

    /// Squashed action for explicit standard-normal noise.
    pub fn act_with_noise(&self, input: &[f64], eps: &[f64]) -> Result<Vec<f64>> {
        check_len("policy noise", self.action_dim(), eps.len())?;
        Ok(self
            .mean(input)?
            .iter()
            .zip(&self.log_std)
            .zip(eps)
            .map(|((m, s), e)| (m + s.exp() * e).tanh())
            .collect())
    }

    pub fn sample_noise(&self, rng: &mut EpiRng) -> Vec<f64> {
        (0..self.action_dim()).map(|_| rng.sample(StandardNormal)).collect()
    }

    pub fn sample(&self, input: &[f64], rng: &mut EpiRng) -> Result<Vec<f64>> {
        let eps = self.sample_noise(rng);
        self.act_with_noise(input, &eps)
    }

    /// Accumulate the parameter gradient of `dl_du . u(input, eps)` into `grads`.
    pub fn accumulate_grad(&self, input: &[f64], eps: &[f64], dl_du: &[f64], grads: &mut PolicyGrads) -> Result<()> {
        check_len("action gradient", self.action_dim(), dl_du.len())?;
        let mean = self.mean(input)?;
        let mut d_mean = vec![0.0; mean.len()];
        for i in 0..mean.len() {
            let sigma = self.log_std[i].exp();
            let u = (mean[i] + sigma * eps[i]).tanh();
            let d_pre = dl_du[i] * (1.0 - u * u);
            d_mean[i] = d_pre;
            grads.log_std[i] += d_pre * sigma * eps[i];
        }
        let g = self.net.backward(input, &d_mean)?;
        grads.net.iter_mut().zip(&g.d_params).for_each(|(a, b)| *a += b);
        Ok(())
    }
}
