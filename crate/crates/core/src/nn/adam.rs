use crate::error::{check_len, Result};

/// Adaptive moment estimation with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

/// Whether an optimizer step was applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdamStep {
    Applied,
    /// A gradient entry was non-finite; parameters and moments are untouched.
    SkippedNonFinite,
}

impl Adam {
    pub fn new(n_params: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<AdamStep> {
        check_len("optimizer parameters", self.m.len(), params.len())?;
        check_len("optimizer gradients", self.m.len(), grads.len())?;
        if grads.iter().any(|g| !g.is_finite()) {
            return Ok(AdamStep::SkippedNonFinite);
        }
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(AdamStep::Applied)
    }
}

/// Rescale a set of gradient vectors so their joint Euclidean norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [&mut [f64]], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if norm.is_finite() && norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.iter_mut() {
                *v *= s;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut opt = Adam::new(3);
        let mut p = vec![1.0, -2.0, 0.5];
        opt.step(&mut p, &[0.0; 3], 1e-3).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn constant_gradient_step_tends_to_lr() {
        let mut opt = Adam::new(2);
        let mut p = vec![0.0, 0.0];
        let lr = 1e-3;
        let mut last = p.clone();
        for _ in 0..5000 {
            opt.step(&mut p, &[0.3, -7.0], lr).unwrap();
            let d0 = (p[0] - last[0]).abs();
            let d1 = (p[1] - last[1]).abs();
            assert!(d0 <= lr * 1.0001 && d1 <= lr * 1.0001);
            last = p.clone();
        }
        let mut q = p.clone();
        opt.step(&mut q, &[0.3, -7.0], lr).unwrap();
        assert!(((q[0] - p[0]).abs() - lr).abs() < 1e-9);
        assert!(q[0] < p[0] && q[1] > p[1]);
    }

    #[test]
    fn deterministic_given_same_inputs() {
        let run = || {
            let mut opt = Adam::new(2);
            let mut p = vec![0.1, 0.2];
            for k in 0..50 {
                let g = [(k as f64).sin(), (k as f64 * 0.3).cos()];
                opt.step(&mut p, &g, 1e-2).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn non_finite_gradient_is_skipped() {
        let mut opt = Adam::new(2);
        let mut p = vec![1.0, 1.0];
        let r = opt.step(&mut p, &[f64::NAN, 0.0], 1e-3).unwrap();
        assert_eq!(r, AdamStep::SkippedNonFinite);
        assert_eq!(p, vec![1.0, 1.0]);
        assert_eq!(opt.steps_taken(), 0);
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut a = vec![3.0, 0.0];
        let mut b = vec![0.0, 4.0];
        let n = clip_global_norm(&mut [&mut a, &mut b], 1.0);
        assert_eq!(n, 5.0);
        let after = (a[0] * a[0] + b[1] * b[1]).sqrt();
        assert!((after - 1.0).abs() < 1e-12);
    }
}
