//! A small dense-network engine with hand-written reverse-mode gradients.
//!
//! Besides plain backpropagation, [`DenseNet::directional_backward`] returns
//! parameter gradients of `a . y(x) + b . (J(x) d)`, where `J` is the input
//! Jacobian. Losses that involve `grad_x V` (HJB residual, value-gradient
//! recursion) are linear in such directional derivatives, so this covers
//! every mixed second-order term the critic needs.

mod adam;
mod checkpoint;

pub use adam::{clip_global_norm, Adam, AdamStep};
pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, NamedNet};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::EpiRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Linear,
    /// Rectifier; the derivative at exactly zero is taken to be zero.
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Linear => z,
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// First and second derivative, given the pre-activation and its image.
    #[inline]
    fn derivs(self, z: f64, a: f64) -> (f64, f64) {
        match self {
            Activation::Linear => (1.0, 0.0),
            Activation::Relu => (if z > 0.0 { 1.0 } else { 0.0 }, 0.0),
            Activation::Tanh => {
                let d = 1.0 - a * a;
                (d, -2.0 * a * d)
            }
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            Activation::Linear => 0,
            Activation::Relu => 1,
            Activation::Tanh => 2,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Activation::Linear),
            1 => Some(Activation::Relu),
            2 => Some(Activation::Tanh),
            _ => None,
        }
    }
}

/// Gradients with respect to the flat parameter vector and the input.
#[derive(Debug, Clone, PartialEq)]
pub struct GradBundle {
    pub d_params: Vec<f64>,
    pub d_input: Vec<f64>,
}

/// Fully connected network. Parameters are one flat vector holding, for each
/// layer in order, the row-major weight matrix (`out x in`) then the bias.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet {
    widths: Vec<usize>,
    activations: Vec<Activation>,
    params: Vec<f64>,
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    /// `acts[0]` is the input; `acts[l + 1]` is the output of layer `l`.
    acts: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        self.acts.last().expect("trace has at least the input")
    }
}

impl DenseNet {
    /// Zero-initialized network with `hidden` activations and a linear output.
    pub fn new(widths: &[usize], hidden: Activation) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::InvalidArgument("a network needs at least input and output widths".into()));
        }
        let mut activations = vec![hidden; widths.len() - 2];
        activations.push(Activation::Linear);
        Self::with_activations(widths, &activations)
    }

    pub fn with_activations(widths: &[usize], activations: &[Activation]) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::InvalidArgument(format!("invalid layer widths {widths:?}")));
        }
        check_len("activations", widths.len() - 1, activations.len())?;
        Ok(Self {
            widths: widths.to_vec(),
            activations: activations.to_vec(),
            params: vec![0.0; Self::param_count_for(widths)],
        })
    }

    /// `sum (fan_in + 1) * fan_out` over layers.
    pub fn param_count_for(widths: &[usize]) -> usize {
        widths.windows(2).map(|w| (w[0] + 1) * w[1]).sum()
    }

    /// Uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` for weights and biases.
    pub fn init_uniform(&mut self, rng: &mut EpiRng) {
        let mut offset = 0;
        for w in self.widths.clone().windows(2) {
            let bound = 1.0 / (w[0] as f64).sqrt();
            let n = (w[0] + 1) * w[1];
            for p in &mut self.params[offset..offset + n] {
                *p = rng.random_range(-bound..=bound);
            }
            offset += n;
        }
    }

    /// Multiply the last layer's parameters by `factor`.
    pub fn scale_output_layer(&mut self, factor: f64) {
        let w = &self.widths[self.widths.len() - 2..];
        let n = (w[0] + 1) * w[1];
        let len = self.params.len();
        for p in &mut self.params[len - n..] {
            *p *= factor;
        }
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn activations(&self) -> &[Activation] {
        &self.activations
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        check_len("parameters", self.params.len(), params.len())?;
        self.params.copy_from_slice(params);
        Ok(())
    }

    fn layers(&self) -> impl Iterator<Item = (usize, usize, usize, Activation)> + '_ {
        let mut offset = 0;
        self.widths.windows(2).zip(&self.activations).map(move |(w, &act)| {
            let start = offset;
            offset += (w[0] + 1) * w[1];
            (start, w[0], w[1], act)
        })
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_len("network input", self.input_dim(), x.len())?;
        let mut a = x.to_vec();
        for (off, n_in, n_out, act) in self.layers() {
            let (w, b) = self.params[off..off + (n_in + 1) * n_out].split_at(n_in * n_out);
            a = (0..n_out)
                .map(|o| act.apply(dot(&w[o * n_in..(o + 1) * n_in], &a) + b[o]))
                .collect();
        }
        Ok(a)
    }

    pub fn forward_trace(&self, x: &[f64]) -> Result<Trace> {
        check_len("network input", self.input_dim(), x.len())?;
        let mut acts = Vec::with_capacity(self.widths.len());
        let mut pre = Vec::with_capacity(self.widths.len() - 1);
        acts.push(x.to_vec());
        for (off, n_in, n_out, act) in self.layers() {
            let (w, b) = self.params[off..off + (n_in + 1) * n_out].split_at(n_in * n_out);
            let prev = acts.last().unwrap();
            let z: Vec<f64> = (0..n_out).map(|o| dot(&w[o * n_in..(o + 1) * n_in], prev) + b[o]).collect();
            acts.push(z.iter().map(|&zi| act.apply(zi)).collect());
            pre.push(z);
        }
        Ok(Trace { acts, pre })
    }

    /// Exact gradients of `upstream . y(x)` with respect to parameters and input.
    pub fn backward(&self, x: &[f64], upstream: &[f64]) -> Result<GradBundle> {
        let trace = self.forward_trace(x)?;
        self.backward_trace(&trace, upstream)
    }

    pub fn backward_trace(&self, trace: &Trace, upstream: &[f64]) -> Result<GradBundle> {
        check_len("upstream gradient", self.output_dim(), upstream.len())?;
        let layers: Vec<_> = self.layers().collect();
        let mut d_params = vec![0.0; self.params.len()];
        let mut adj = upstream.to_vec();
        for (l, &(off, n_in, n_out, act)) in layers.iter().enumerate().rev() {
            let z = &trace.pre[l];
            let a = &trace.acts[l + 1];
            let prev = &trace.acts[l];
            let dz: Vec<f64> = (0..n_out).map(|o| act.derivs(z[o], a[o]).0 * adj[o]).collect();
            let w = &self.params[off..off + n_in * n_out];
            let (gw, gb) = d_params[off..off + (n_in + 1) * n_out].split_at_mut(n_in * n_out);
            let mut next = vec![0.0; n_in];
            for o in 0..n_out {
                let g = dz[o];
                gb[o] += g;
                if g == 0.0 {
                    continue;
                }
                let row = &w[o * n_in..(o + 1) * n_in];
                let grow = &mut gw[o * n_in..(o + 1) * n_in];
                for i in 0..n_in {
                    grow[i] += g * prev[i];
                    next[i] += g * row[i];
                }
            }
            adj = next;
        }
        Ok(GradBundle {
            d_params,
            d_input: adj,
        })
    }

    /// Output and its directional derivative `J(x) dir`.
    pub fn directional(&self, x: &[f64], dir: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let (trace, tangents) = self.tangent_trace(x, dir)?;
        Ok((trace.output().to_vec(), tangents.last().unwrap().clone()))
    }

    fn tangent_trace(&self, x: &[f64], dir: &[f64]) -> Result<(Trace, Vec<Vec<f64>>)> {
        check_len("direction", self.input_dim(), dir.len())?;
        let trace = self.forward_trace(x)?;
        let mut tangents = Vec::with_capacity(self.widths.len());
        tangents.push(dir.to_vec());
        for (l, (off, n_in, n_out, act)) in self.layers().enumerate() {
            let w = &self.params[off..off + n_in * n_out];
            let prev = tangents.last().unwrap();
            let z = &trace.pre[l];
            let a = &trace.acts[l + 1];
            let t: Vec<f64> = (0..n_out)
                .map(|o| act.derivs(z[o], a[o]).0 * dot(&w[o * n_in..(o + 1) * n_in], prev))
                .collect();
            tangents.push(t);
        }
        Ok((trace, tangents))
    }

    /// Gradients of `up_value . y(x) + up_tangent . (J(x) dir)` with respect to
    /// parameters and `x`; `dir` is held fixed.
    pub fn directional_backward(
        &self,
        x: &[f64],
        dir: &[f64],
        up_value: &[f64],
        up_tangent: &[f64],
    ) -> Result<GradBundle> {
        check_len("upstream value gradient", self.output_dim(), up_value.len())?;
        check_len("upstream tangent gradient", self.output_dim(), up_tangent.len())?;
        let (trace, tangents) = self.tangent_trace(x, dir)?;
        let layers: Vec<_> = self.layers().collect();
        let mut d_params = vec![0.0; self.params.len()];
        let mut adj = up_value.to_vec();
        let mut adj_t = up_tangent.to_vec();
        for (l, &(off, n_in, n_out, act)) in layers.iter().enumerate().rev() {
            let z = &trace.pre[l];
            let a = &trace.acts[l + 1];
            let prev = &trace.acts[l];
            let prev_t = &tangents[l];
            let w = &self.params[off..off + n_in * n_out];
            let mut dz = vec![0.0; n_out];
            let mut dzt = vec![0.0; n_out];
            for o in 0..n_out {
                let (d1, d2) = act.derivs(z[o], a[o]);
                let zt = dot(&w[o * n_in..(o + 1) * n_in], prev_t);
                dzt[o] = d1 * adj_t[o];
                dz[o] = d1 * adj[o] + d2 * zt * adj_t[o];
            }
            let (gw, gb) = d_params[off..off + (n_in + 1) * n_out].split_at_mut(n_in * n_out);
            let mut next = vec![0.0; n_in];
            let mut next_t = vec![0.0; n_in];
            for o in 0..n_out {
                gb[o] += dz[o];
                let row = &w[o * n_in..(o + 1) * n_in];
                let grow = &mut gw[o * n_in..(o + 1) * n_in];
                for i in 0..n_in {
                    grow[i] += dz[o] * prev[i] + dzt[o] * prev_t[i];
                    next[i] += dz[o] * row[i];
                    next_t[i] += dzt[o] * row[i];
                }
            }
            adj = next;
            adj_t = next_t;
        }
        Ok(GradBundle {
            d_params,
            d_input: adj,
        })
    }

    /// Input Jacobian, one row per output, via repeated backward passes.
    pub fn input_jacobian(&self, x: &[f64]) -> Result<Vec<Vec<f64>>> {
        let trace = self.forward_trace(x)?;
        (0..self.output_dim())
            .map(|o| {
                let mut e = vec![0.0; self.output_dim()];
                e[o] = 1.0;
                self.backward_trace(&trace, &e).map(|g| g.d_input)
            })
            .collect()
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
