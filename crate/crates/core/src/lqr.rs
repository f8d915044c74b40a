//! Analytic reference controller for the coupled oscillator: Riccati
//! solution, LQR gain, barrier half-space and its closed-form projection.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::env::{Oscillator, SystemModel};
use crate::error::{Error, Result};

/// `xdot = A x + B u` with quadratic cost `x'Qx + u'Ru`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearQuadratic {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
}

impl LinearQuadratic {
    pub fn oscillator(env: &Oscillator) -> Self {
        let (k, b) = (env.spring, env.damping);
        let lc = env.coupling;
        #[rustfmt::skip]
        let a = DMatrix::from_row_slice(4, 4, &[
            0.0, 1.0, 0.0, 0.0,
            -k,  -b,  0.0, 0.0,
            0.0, 0.0, 0.0, 1.0,
            0.0, 0.0, -k,  -b,
        ]);
        #[rustfmt::skip]
        let bm = DMatrix::from_row_slice(4, 2, &[
            0.0, 0.0,
            1.0, 0.0,
            0.0, 0.0,
            0.0, 1.0,
        ]);
        #[rustfmt::skip]
        let q = DMatrix::from_row_slice(4, 4, &[
            1.0 + lc, 0.0, -lc,      0.0,
            0.0,      0.0, 0.0,      0.0,
            -lc,      0.0, 1.0 + lc, 0.0,
            0.0,      0.0, 0.0,      0.0,
        ]);
        let r = DMatrix::identity(2, 2) * env.control_penalty;
        Self { a, b: bm, q, r }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CareSolution {
    pub p: DMatrix<f64>,
    pub k: DMatrix<f64>,
    pub residual_norm: f64,
    pub iterations: usize,
}

impl CareSolution {
    /// `u = -K x`.
    pub fn feedback(&self, x: &[f64]) -> Vec<f64> {
        let u = -(&self.k * DVector::from_column_slice(x));
        u.iter().copied().collect()
    }
}

/// Largest real part over the spectrum.
pub fn spectral_abscissa(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues().iter().map(|c| c.re).fold(f64::NEG_INFINITY, f64::max)
}

/// Frobenius norm of `A'P + PA - P B R^-1 B' P + Q`.
pub fn care_residual(sys: &LinearQuadratic, p: &DMatrix<f64>) -> Result<f64> {
    let r_inv = sys.r.clone().try_inverse().ok_or_else(|| Error::Riccati("R is singular".into()))?;
    let res = sys.a.transpose() * p + p * &sys.a - p * &sys.b * r_inv * sys.b.transpose() * p + &sys.q;
    Ok(res.norm())
}

/// Solve `L X + X R = C` through the Kronecker-vectorized linear system.
fn solve_sylvester(l: &DMatrix<f64>, r: &DMatrix<f64>, c: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = l.nrows();
    let eye = DMatrix::<f64>::identity(n, n);
    let op = eye.kronecker(l) + r.transpose().kronecker(&eye);
    let rhs = DVector::from_column_slice(c.as_slice());
    let sol = op
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Riccati("singular Lyapunov operator".into()))?;
    Ok(DMatrix::from_column_slice(n, n, sol.as_slice()))
}

/// Solve `A' X + X A + C = 0` for symmetric `X`.
pub fn solve_lyapunov(a: &DMatrix<f64>, c: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let x = solve_sylvester(&a.transpose(), a, &(-c))?;
    Ok((&x + x.transpose()) * 0.5)
}

fn initial_gain(sys: &LinearQuadratic) -> Result<DMatrix<f64>> {
    let (n, m) = (sys.a.nrows(), sys.b.ncols());
    if spectral_abscissa(&sys.a) < 0.0 {
        return Ok(DMatrix::zeros(m, n));
    }
    // Bass: with A + beta I anti-stable, K = B' X^-1 from
    // (A + beta I) X + X (A + beta I)' = 2 B B' is stabilizing.
    let beta = sys.a.norm() + 1.0;
    let shifted = &sys.a + DMatrix::<f64>::identity(n, n) * beta;
    let rhs = &sys.b * sys.b.transpose() * 2.0;
    let x = solve_sylvester(&shifted, &shifted.transpose(), &rhs)?;
    let x_inv = x
        .try_inverse()
        .ok_or_else(|| Error::Riccati("no stabilizing initial gain: pair (A, B) is not controllable".into()))?;
    let k = sys.b.transpose() * x_inv;
    if spectral_abscissa(&(&sys.a - &sys.b * &k)) < 0.0 {
        Ok(k)
    } else {
        Err(Error::Riccati("no stabilizing initial gain found".into()))
    }
}

/// Newton-Kleinman iteration for the continuous-time algebraic Riccati equation.
pub fn solve_care(sys: &LinearQuadratic, tol: f64) -> Result<CareSolution> {
    const MAX_ITERS: usize = 100;
    let r_inv = sys.r.clone().try_inverse().ok_or_else(|| Error::Riccati("R is singular".into()))?;
    let mut k = initial_gain(sys)?;
    let mut p = DMatrix::zeros(sys.a.nrows(), sys.a.nrows());
    let mut residual = f64::INFINITY;
    for it in 1..=MAX_ITERS {
        let closed = &sys.a - &sys.b * &k;
        let rhs = &sys.q + k.transpose() * &sys.r * &k;
        p = solve_lyapunov(&closed, &rhs)?;
        k = &r_inv * sys.b.transpose() * &p;
        residual = care_residual(sys, &p)?;
        if residual <= tol {
            return Ok(CareSolution {
                p,
                k,
                residual_norm: residual,
                iterations: it,
            });
        }
    }
    let _ = p;
    Err(Error::Riccati(format!(
        "no convergence after {MAX_ITERS} iterations (residual {residual:e})"
    )))
}

/// Barrier description for the ordering constraint `h(x) = margin + grad_h . x >= 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct CbfSpec {
    pub grad_h: DVector<f64>,
    pub alpha: f64,
    pub margin: f64,
    /// Metric of the projection; the control cost `R` by default.
    pub w: DMatrix<f64>,
}

impl CbfSpec {
    pub fn oscillator(env: &Oscillator, alpha: f64) -> Result<Self> {
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(Error::InvalidArgument(format!("barrier slope must be positive, got {alpha}")));
        }
        Ok(Self {
            grad_h: DVector::from_column_slice(&[-1.0, 0.0, 1.0, 0.0]),
            alpha,
            margin: env.margin,
            w: DMatrix::identity(2, 2) * env.control_penalty,
        })
    }

    pub fn with_metric(mut self, w: DMatrix<f64>) -> Self {
        self.w = w;
        self
    }

    pub fn h(&self, x: &[f64]) -> f64 {
        self.margin + self.grad_h.dot(&DVector::from_column_slice(x))
    }
}

/// Half-space `a . u >= b` together with the barrier value at the state.
#[derive(Debug, Clone, PartialEq)]
pub struct CbfTerms {
    pub a: Vec<f64>,
    pub b: f64,
    pub h: f64,
}

/// Barrier half-space at `x`.
///
/// When `B' grad_h` vanishes (positions do not depend on the input directly,
/// as for the oscillator) the first-order condition carries no control
/// authority. The condition is then imposed on `psi = hdot + alpha h`, i.e.
/// `psidot >= -alpha psi`, whose input direction is `B' (A' grad_h + alpha grad_h)`.
pub fn cbf_terms(spec: &CbfSpec, a_mat: &DMatrix<f64>, b_mat: &DMatrix<f64>, x: &[f64]) -> CbfTerms {
    let xv = DVector::from_column_slice(x);
    let h = spec.h(x);
    let ax = a_mat * &xv;
    let first = b_mat.transpose() * &spec.grad_h;
    let (grad, value) = if first.norm() > 1e-12 {
        (spec.grad_h.clone(), h)
    } else {
        let grad_psi = a_mat.transpose() * &spec.grad_h + &spec.grad_h * spec.alpha;
        let psi = spec.grad_h.dot(&ax) + spec.alpha * h;
        (grad_psi, psi)
    };
    let a = b_mat.transpose() * &grad;
    CbfTerms {
        a: a.iter().copied().collect(),
        b: -grad.dot(&ax) - spec.alpha * value,
        h,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub u: Vec<f64>,
    /// Whether the reference action violated the half-space.
    pub active: bool,
}

/// `argmin_u (u - u_ref)' W (u - u_ref) / 2` subject to `a . u >= b`.
pub fn safe_project(w: &DMatrix<f64>, u_ref: &[f64], a: &[f64], b: f64) -> Result<Projection> {
    let av = DVector::from_column_slice(a);
    let uv = DVector::from_column_slice(u_ref);
    let lhs = av.dot(&uv);
    if lhs >= b {
        return Ok(Projection {
            u: u_ref.to_vec(),
            active: false,
        });
    }
    let w_inv = w
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::InvalidArgument("projection metric is singular".into()))?;
    let w_inv_a = &w_inv * &av;
    let denom = av.dot(&w_inv_a);
    if denom <= 0.0 {
        return Err(Error::DegenerateHalfSpace { lhs, rhs: b });
    }
    let tau = (b - lhs) / denom;
    Ok(Projection {
        u: (uv + w_inv_a * tau).iter().copied().collect(),
        active: true,
    })
}

/// One row of a reference rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct GtStep {
    pub t: f64,
    pub x: Vec<f64>,
    pub u: Vec<f64>,
    pub h: f64,
    pub cost: f64,
    pub value_to_go: f64,
}

/// Clipped, barrier-filtered LQR controller for the oscillator.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub env: Oscillator,
    pub system: LinearQuadratic,
    pub care: CareSolution,
    pub cbf: CbfSpec,
}

/// Default barrier slope of the reference controller.
pub const DEFAULT_ALPHA: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GtConfig {
    pub alpha: f64,
    pub care_tol: f64,
}

impl Default for GtConfig {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            care_tol: 1e-10,
        }
    }
}

impl GroundTruth {
    pub fn new(env: &Oscillator, cfg: GtConfig) -> Result<Self> {
        let system = LinearQuadratic::oscillator(env);
        let care = solve_care(&system, cfg.care_tol)?;
        let cbf = CbfSpec::oscillator(env, cfg.alpha)?;
        Ok(Self {
            env: env.clone(),
            system,
            care,
            cbf,
        })
    }

    /// Projected action before saturation.
    pub fn projected_action(&self, x: &[f64]) -> Result<Projection> {
        let terms = cbf_terms(&self.cbf, &self.system.a, &self.system.b, x);
        safe_project(&self.cbf.w, &self.care.feedback(x), &terms.a, terms.b)
    }

    pub fn action(&self, x: &[f64]) -> Result<Vec<f64>> {
        let u_max = self.env.u_max;
        Ok(self
            .projected_action(x)?
            .u
            .into_iter()
            .map(|u| u.clamp(-u_max, u_max))
            .collect())
    }

    /// Reference rollout; the value-to-go column is the discounted left
    /// Riemann sum of the remaining stage costs within the rollout.
    pub fn rollout(&self, x0: &[f64], dt: f64, steps: usize, gamma: f64) -> Result<Vec<GtStep>> {
        let mut rows = Vec::with_capacity(steps);
        let mut x = x0.to_vec();
        for k in 0..steps {
            let u = self.action(&x)?;
            let cost = self.env.stage_cost(&x, &u);
            let next = crate::env::step_continuous(&self.env, &x, &u, dt)?.next_state;
            rows.push(GtStep {
                t: k as f64 * dt,
                h: self.cbf.h(&x),
                x: std::mem::replace(&mut x, next),
                u,
                cost,
                value_to_go: 0.0,
            });
        }
        let discount = gamma.powf(dt);
        let mut acc = 0.0;
        for row in rows.iter_mut().rev() {
            acc = row.cost * dt + discount * acc;
            row.value_to_go = acc;
        }
        Ok(rows)
    }

    /// Discounted cost of following the reference controller from `x0` for `steps` intervals.
    pub fn discounted_cost(&self, x0: &[f64], dt: f64, steps: usize, gamma: f64) -> Result<f64> {
        Ok(self.rollout(x0, dt, steps, gamma)?.first().map_or(0.0, |r| r.value_to_go))
    }
}
