//! Tabular epigraph-Bellman value iteration on an `(x, z)` lattice.
//!
//! Only systems with at most two state dimensions are supported. Tables are
//! stored with `z` varying fastest.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{step_continuous, SystemModel};
use crate::epigraph::{ZIntegrator, ZStepper};
use crate::env::ToyDoubleIntegrator;
use crate::error::{check_len, Error, Result};

const MAX_DIMS: usize = 2;
const CORNERS: usize = 1 << MAX_DIMS;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum BellmanOperator {
    /// `(1 - g) c + g min_u max{c, V(x', z')}` with `g = gamma^dt`.
    #[default]
    #[serde(rename = "averaged")]
    Averaged,
    /// `min_u max{c, g V(x', z')}`.
    #[serde(rename = "discounted")]
    Discounted,
    /// `min_u max{c, g V(x', z')^+ + V(x', z')^-}`: discounts only the
    /// positive part, so the constraint term is the undiscounted running
    /// maximum of `c` and the feasible plateau sits at `max_t c < 0` instead
    /// of at exactly zero. Same zero sublevel set as the other forms; the
    /// fixed point is reached from below, e.g. starting at `V = c(x)`.
    #[serde(rename = "sign_preserving")]
    SignPreserving,
}

/// Treatment of budget successors that leave the `z` axis.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZBoundary {
    /// Clamp on both ends.
    Clamp,
    /// Clamp above; below `z_min` continue with slope `-1`, the exact
    /// behaviour of `V_ret - z` where the return term is active.
    #[default]
    Extrapolate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleSettings {
    pub operator: BellmanOperator,
    pub z_boundary: ZBoundary,
    pub z_integrator: ZIntegrator,
}

impl Default for OracleSettings {
    fn default() -> Self {
        Self {
            operator: BellmanOperator::Averaged,
            z_boundary: ZBoundary::Extrapolate,
            z_integrator: ZIntegrator::Exponential,
        }
    }
}

/// `n` evenly spaced points on `[lo, hi]`.
pub fn uniform_axis(lo: f64, hi: f64, n: usize) -> Result<Vec<f64>> {
    if n < 2 || !(lo < hi) {
        return Err(Error::InvalidArgument(format!("axis needs n >= 2 and lo < hi, got [{lo}, {hi}] x {n}")));
    }
    Ok((0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect())
}

/// Cartesian product of `per_dim` evenly spaced values in each action interval.
pub fn action_grid(low: &[f64], high: &[f64], per_dim: usize) -> Result<Vec<Vec<f64>>> {
    let axes = low
        .iter()
        .zip(high)
        .map(|(&l, &h)| if per_dim == 1 { Ok(vec![0.5 * (l + h)]) } else { uniform_axis(l, h, per_dim) })
        .collect::<Result<Vec<_>>>()?;
    let mut out = vec![Vec::new()];
    for axis in &axes {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                axis.iter().map(move |&a| {
                    let mut p = prefix.clone();
                    p.push(a);
                    p
                })
            })
            .collect();
    }
    Ok(out)
}

fn check_axis(axis: &[f64], what: &'static str) -> Result<()> {
    if axis.len() < 2 {
        return Err(Error::InvalidArgument(format!("{what} needs at least two points")));
    }
    if axis.iter().any(|v| !v.is_finite()) || axis.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument(format!("{what} must be finite and strictly increasing")));
    }
    Ok(())
}

/// Bracketing segment and weight of the upper point, clamped to the axis.
#[inline]
fn locate(axis: &[f64], v: f64) -> (usize, f64) {
    let n = axis.len();
    if v <= axis[0] {
        return (0, 0.0);
    }
    if v >= axis[n - 1] {
        return (n - 2, 1.0);
    }
    let i = axis.partition_point(|&p| p <= v) - 1;
    (i, (v - axis[i]) / (axis[i + 1] - axis[i]))
}

/// Position lookup on the `z` axis with an O(1) path for uniform axes.
#[derive(Debug, Clone, Copy)]
struct ZLocator<'a> {
    axis: &'a [f64],
    inv_step: Option<f64>,
}

impl<'a> ZLocator<'a> {
    fn new(axis: &'a [f64]) -> Self {
        let n = axis.len();
        let step = (axis[n - 1] - axis[0]) / (n - 1) as f64;
        let uniform = axis
            .iter()
            .enumerate()
            .all(|(i, &z)| (z - (axis[0] + step * i as f64)).abs() <= 1e-12 * (1.0 + z.abs()));
        Self {
            axis,
            inv_step: uniform.then(|| 1.0 / step),
        }
    }

    /// `(segment, weight, additive shift)`; the shift carries the slope `-1`
    /// continuation below the axis.
    #[inline]
    fn locate(&self, z: f64, boundary: ZBoundary) -> (usize, f64, f64) {
        let axis = self.axis;
        let n = axis.len();
        if z <= axis[0] {
            let shift = if boundary == ZBoundary::Extrapolate { axis[0] - z } else { 0.0 };
            return (0, 0.0, shift);
        }
        if z >= axis[n - 1] {
            return (n - 2, 1.0, 0.0);
        }
        match self.inv_step {
            Some(inv) => {
                let u = (z - axis[0]) * inv;
                let k = (u as usize).min(n - 2);
                (k, u - k as f64, 0.0)
            }
            None => {
                let (k, t) = locate(axis, z);
                (k, t, 0.0)
            }
        }
    }
}

/// Multilinear stencil over the state lattice.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Stencil {
    idx: [usize; CORNERS],
    w: [f64; CORNERS],
    n: usize,
}

fn x_stencil(axes: &[Vec<f64>], x: &[f64]) -> Stencil {
    let mut st = Stencil {
        idx: [0; CORNERS],
        w: [0.0; CORNERS],
        n: 1,
    };
    st.w[0] = 1.0;
    for (axis, &v) in axes.iter().zip(x) {
        let (i, t) = locate(axis, v);
        let n = st.n;
        for c in 0..n {
            let base = st.idx[c] * axis.len();
            let w = st.w[c];
            st.idx[c] = base + i;
            st.w[c] = w * (1.0 - t);
            st.idx[c + n] = base + i + 1;
            st.w[c + n] = w * t;
        }
        st.n = 2 * n;
    }
    st
}

/// Value table over the `(x, z)` lattice.
#[derive(Debug, Clone, PartialEq)]
pub struct GridValue {
    pub x_axes: Vec<Vec<f64>>,
    pub z_axis: Vec<f64>,
    pub values: Vec<f64>,
    pub gamma: f64,
    pub dt: f64,
    pub z_boundary: ZBoundary,
}

impl GridValue {
    pub fn filled(x_axes: Vec<Vec<f64>>, z_axis: Vec<f64>, gamma: f64, dt: f64, value: f64) -> Result<Self> {
        if x_axes.is_empty() || x_axes.len() > MAX_DIMS {
            return Err(Error::InvalidArgument(format!(
                "grid oracle supports 1..={MAX_DIMS} state dimensions, got {}",
                x_axes.len()
            )));
        }
        for axis in &x_axes {
            check_axis(axis, "state axis")?;
        }
        check_axis(&z_axis, "z axis")?;
        if !(gamma > 0.0 && gamma <= 1.0) {
            return Err(Error::InvalidDiscount(gamma));
        }
        if !(dt.is_finite() && dt > 0.0) {
            return Err(Error::InvalidTimeStep(dt));
        }
        let n = x_axes.iter().map(Vec::len).product::<usize>() * z_axis.len();
        Ok(Self {
            x_axes,
            z_axis,
            values: vec![value; n],
            gamma,
            dt,
            z_boundary: ZBoundary::default(),
        })
    }

    /// Table initialised from `f(x, z)` at every lattice point.
    pub fn from_fn(
        x_axes: Vec<Vec<f64>>,
        z_axis: Vec<f64>,
        gamma: f64,
        dt: f64,
        f: impl Fn(&[f64], f64) -> f64,
    ) -> Result<Self> {
        let mut g = Self::filled(x_axes, z_axis, gamma, dt, 0.0)?;
        let nz = g.z_axis.len();
        for i in 0..g.n_states() {
            let x = g.state(i);
            for k in 0..nz {
                g.values[i * nz + k] = f(&x, g.z_axis[k]);
            }
        }
        Ok(g)
    }

    /// `V(x, z) = c(x)`, a lower bound on every fixed point.
    pub fn constraint_floor(
        x_axes: Vec<Vec<f64>>,
        z_axis: Vec<f64>,
        gamma: f64,
        dt: f64,
        model: &dyn SystemModel,
    ) -> Result<Self> {
        Self::from_fn(x_axes, z_axis, gamma, dt, |x, _| model.constraint(x))
    }

    pub fn with_z_boundary(mut self, b: ZBoundary) -> Self {
        self.z_boundary = b;
        self
    }

    pub fn state_dim(&self) -> usize {
        self.x_axes.len()
    }

    /// Number of state lattice points.
    pub fn n_states(&self) -> usize {
        self.x_axes.iter().map(Vec::len).product()
    }

    /// Coordinates of state lattice point `i` (last axis fastest).
    pub fn state(&self, mut i: usize) -> Vec<f64> {
        let mut x = vec![0.0; self.x_axes.len()];
        for (d, axis) in self.x_axes.iter().enumerate().rev() {
            x[d] = axis[i % axis.len()];
            i /= axis.len();
        }
        x
    }

    pub fn discount(&self) -> f64 {
        self.gamma.powf(self.dt)
    }

    pub fn column(&self, i: usize) -> &[f64] {
        let nz = self.z_axis.len();
        &self.values[i * nz..(i + 1) * nz]
    }

    #[inline]
    fn interp_stencil(&self, st: &Stencil, z: f64) -> f64 {
        self.interp_located(st, ZLocator::new(&self.z_axis).locate(z, self.z_boundary))
    }

    #[inline]
    fn interp_located(&self, st: &Stencil, (k, t, shift): (usize, f64, f64)) -> f64 {
        let nz = self.z_axis.len();
        let mut acc = 0.0;
        for c in 0..st.n {
            let w = st.w[c];
            if w != 0.0 {
                let base = st.idx[c] * nz + k;
                let (a, b) = (self.values[base], self.values[base + 1]);
                acc += w * (a + t * (b - a));
            }
        }
        acc + shift
    }

    /// Multilinear interpolation; off-lattice queries clamp (see [`ZBoundary`] for `z`).
    pub fn interpolate(&self, x: &[f64], z: f64) -> Result<f64> {
        crate::error::check_len("grid state", self.state_dim(), x.len())?;
        Ok(self.interp_stencil(&x_stencil(&self.x_axes, x), z))
    }

    fn same_lattice(&self, other: &GridValue) -> Result<()> {
        if self.x_axes != other.x_axes || self.z_axis != other.z_axis {
            return Err(Error::InvalidArgument("tables live on different lattices".into()));
        }
        Ok(())
    }

    /// `max |self - other|` over the lattice.
    pub fn sup_distance(&self, other: &GridValue) -> Result<f64> {
        self.same_lattice(other)?;
        Ok(sup_distance(&self.values, &other.values))
    }

    /// Write `x..., z, V` rows.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header: Vec<String> = (0..self.state_dim()).map(|d| format!("x{d}")).collect();
        header.extend(["z".to_string(), "V".to_string()]);
        w.write_record(&header)?;
        let nz = self.z_axis.len();
        for i in 0..self.n_states() {
            let x = self.state(i);
            for k in 0..nz {
                let mut row: Vec<String> = x.iter().map(|v| v.to_string()).collect();
                row.push(self.z_axis[k].to_string());
                row.push(self.values[i * nz + k].to_string());
                w.write_record(&row)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

fn sup_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| {
        let d = if x == y { 0.0 } else { (x - y).abs() };
        if d.is_nan() {
            f64::INFINITY
        } else {
            m.max(d)
        }
    })
}

/// Per-(state, action) successor data, independent of the table values.
#[derive(Debug, Clone)]
pub struct Transitions {
    n_actions: usize,
    constraint: Vec<f64>,
    stage_cost: Vec<f64>,
    successor_constraint: Vec<f64>,
    stencils: Vec<Stencil>,
}

impl Transitions {
    pub fn build(model: &dyn SystemModel, x_axes: &[Vec<f64>], actions: &[Vec<f64>], dt: f64) -> Result<Self> {
        if actions.is_empty() {
            return Err(Error::Empty("action set"));
        }
        crate::error::check_len("grid state dimension", model.state_dim(), x_axes.len())?;
        let proto = GridValue::filled(x_axes.to_vec(), vec![0.0, 1.0], 1.0, dt, 0.0)?;
        let n_states = proto.n_states();
        let n_actions = actions.len();
        let mut t = Self {
            n_actions,
            constraint: Vec::with_capacity(n_states),
            stage_cost: Vec::with_capacity(n_states * n_actions),
            successor_constraint: Vec::with_capacity(n_states * n_actions),
            stencils: Vec::with_capacity(n_states * n_actions),
        };
        for i in 0..n_states {
            let x = proto.state(i);
            t.constraint.push(model.constraint(&x));
            for u in actions {
                let r = step_continuous(model, &x, u, dt)?;
                t.stage_cost.push(r.stage_cost);
                t.successor_constraint.push(r.constraint_value);
                t.stencils.push(x_stencil(x_axes, &r.next_state));
            }
        }
        Ok(t)
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }
}

fn sweep(v: &GridValue, trans: &Transitions, stepper: &ZStepper, op: BellmanOperator) -> GridValue {
    let nz = v.z_axis.len();
    let na = trans.n_actions;
    let g = v.discount();
    let zloc = ZLocator::new(&v.z_axis);
    let mut out = v.clone();
    out.values.par_chunks_mut(nz).enumerate().for_each(|(i, col)| {
        // min over actions of V(x', z'); every form is monotone in it
        col.fill(f64::INFINITY);
        for a in 0..na {
            let j = i * na + a;
            let (st, l) = (&trans.stencils[j], trans.stage_cost[j]);
            for (slot, &z) in col.iter_mut().zip(&v.z_axis) {
                let next = v.interp_located(st, zloc.locate(stepper.step(z, l), v.z_boundary));
                *slot = slot.min(next);
            }
        }
        let c = trans.constraint[i];
        for slot in col.iter_mut() {
            let best = *slot;
            *slot = match op {
                BellmanOperator::Averaged => (1.0 - g) * c + g * c.max(best),
                BellmanOperator::Discounted => c.max(g * best),
                BellmanOperator::SignPreserving => c.max(if best > 0.0 { g * best } else { best }),
            };
        }
    });
    out
}

/// One synchronous sweep of the operator.
pub fn bellman_apply(
    grid: &GridValue,
    model: &dyn SystemModel,
    actions: &[Vec<f64>],
    settings: OracleSettings,
) -> Result<GridValue> {
    let trans = Transitions::build(model, &grid.x_axes, actions, grid.dt)?;
    bellman_apply_with(grid, &trans, settings)
}

/// [`bellman_apply`] with precomputed transitions.
pub fn bellman_apply_with(grid: &GridValue, trans: &Transitions, settings: OracleSettings) -> Result<GridValue> {
    if trans.constraint.len() != grid.n_states() {
        return Err(Error::DimensionMismatch {
            what: "transition table",
            expected: grid.n_states(),
            got: trans.constraint.len(),
        });
    }
    let stepper = ZStepper::new(grid.gamma, grid.dt, settings.z_integrator)?;
    let mut src = grid.clone();
    src.z_boundary = settings.z_boundary;
    let mut out = sweep(&src, trans, &stepper, settings.operator);
    out.z_boundary = settings.z_boundary;
    Ok(out)
}

/// Outcome of an iteration loop.
#[derive(Debug, Clone, PartialEq)]
pub struct Convergence {
    pub iterations: usize,
    pub final_delta: f64,
    pub converged: bool,
    /// `delta_{k+1} / delta_k` for consecutive sweeps.
    pub ratios: Vec<f64>,
}

fn push_ratio(ratios: &mut Vec<f64>, prev: f64, delta: f64) {
    if prev > 0.0 && prev.is_finite() && delta.is_finite() {
        ratios.push(delta / prev);
    }
}

/// Iterate the operator until the sup-norm change drops below `tol`.
pub fn value_iterate(
    grid: GridValue,
    model: &dyn SystemModel,
    actions: &[Vec<f64>],
    settings: OracleSettings,
    tol: f64,
    max_iters: usize,
) -> Result<(GridValue, Convergence)> {
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument(format!("tolerance must be positive, got {tol}")));
    }
    let trans = Transitions::build(model, &grid.x_axes, actions, grid.dt)?;
    let mut v = grid;
    let mut conv = Convergence {
        iterations: 0,
        final_delta: f64::INFINITY,
        converged: false,
        ratios: Vec::new(),
    };
    while conv.iterations < max_iters {
        let next = bellman_apply_with(&v, &trans, settings)?;
        let delta = sup_distance(&next.values, &v.values);
        push_ratio(&mut conv.ratios, conv.final_delta, delta);
        conv.final_delta = delta;
        conv.iterations += 1;
        v = next;
        if delta < tol {
            conv.converged = true;
            break;
        }
    }
    Ok((v, conv))
}

/// Result of recovering the constrained value from an epigraph table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ConstrainedValue {
    Feasible(f64),
    Infeasible,
}

impl ConstrainedValue {
    pub fn value(self) -> Option<f64> {
        match self {
            ConstrainedValue::Feasible(v) => Some(v),
            ConstrainedValue::Infeasible => None,
        }
    }
}

/// Smallest `z` with `V(x, z) <= 0`: a scan over the `z` axis followed by bisection.
pub fn extract_constrained_value(grid: &GridValue, x: &[f64]) -> Result<ConstrainedValue> {
    crate::error::check_len("grid state", grid.state_dim(), x.len())?;
    let st = x_stencil(&grid.x_axes, x);
    let at = |z: f64| grid.interp_stencil(&st, z);
    let zs = &grid.z_axis;
    let Some(k) = zs.iter().position(|&z| at(z) <= 0.0) else {
        return Ok(ConstrainedValue::Infeasible);
    };
    if k == 0 {
        return Ok(ConstrainedValue::Feasible(zs[0]));
    }
    let (mut lo, mut hi) = (zs[k - 1], zs[k]);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if at(mid) <= 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(ConstrainedValue::Feasible(hi))
}

/// Discounted optimal cost on the state lattice with `+inf` marking infeasibility.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstrainedTable {
    pub x_axes: Vec<Vec<f64>>,
    pub values: Vec<f64>,
}

impl ConstrainedTable {
    pub fn interpolate(&self, x: &[f64]) -> Result<ConstrainedValue> {
        crate::error::check_len("grid state", self.x_axes.len(), x.len())?;
        let v = interp_masked(&self.values, &x_stencil(&self.x_axes, x));
        Ok(if v.is_finite() {
            ConstrainedValue::Feasible(v)
        } else {
            ConstrainedValue::Infeasible
        })
    }
}

/// Interpolation that is infinite whenever any contributing corner is.
#[inline]
fn interp_masked(values: &[f64], st: &Stencil) -> f64 {
    let mut acc = 0.0;
    for c in 0..st.n {
        if st.w[c] > 1e-12 {
            let v = values[st.idx[c]];
            if v.is_infinite() {
                return f64::INFINITY;
            }
            acc += st.w[c] * v;
        }
    }
    acc
}

/// Direct constrained value iteration on the state lattice, used as an
/// independent reference for the epigraph table.
///
/// Lattice points with `c > 0`, and successors with `c > 0`, are infeasible.
/// The stage cost enters with the same one-interval weight and discount as
/// the budget update so both tables discretize the same sum.
pub fn constrained_vi_oracle(
    model: &dyn SystemModel,
    x_axes: &[Vec<f64>],
    actions: &[Vec<f64>],
    gamma: f64,
    dt: f64,
    z_integrator: ZIntegrator,
    tol: f64,
    max_iters: usize,
) -> Result<(ConstrainedTable, Convergence)> {
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument(format!("tolerance must be positive, got {tol}")));
    }
    let trans = Transitions::build(model, x_axes, actions, dt)?;
    let stepper = ZStepper::new(gamma, dt, z_integrator)?;
    let (disc, w) = (stepper.discount(), stepper.cost_weight());
    let na = trans.n_actions;
    let mut v: Vec<f64> = trans.constraint.iter().map(|&c| if c > 0.0 { f64::INFINITY } else { 0.0 }).collect();
    let mut conv = Convergence {
        iterations: 0,
        final_delta: f64::INFINITY,
        converged: false,
        ratios: Vec::new(),
    };
    while conv.iterations < max_iters {
        let next: Vec<f64> = (0..v.len())
            .into_par_iter()
            .map(|i| {
                if trans.constraint[i] > 0.0 {
                    return f64::INFINITY;
                }
                (0..na)
                    .map(|a| {
                        let j = i * na + a;
                        if trans.successor_constraint[j] > 0.0 {
                            f64::INFINITY
                        } else {
                            w * trans.stage_cost[j] + disc * interp_masked(&v, &trans.stencils[j])
                        }
                    })
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let delta = sup_distance(&next, &v);
        push_ratio(&mut conv.ratios, conv.final_delta, delta);
        conv.final_delta = delta;
        conv.iterations += 1;
        v = next;
        if delta < tol {
            conv.converged = true;
            break;
        }
    }
    Ok((
        ConstrainedTable {
            x_axes: x_axes.to_vec(),
            values: v,
        },
        conv,
    ))
}

/// One probe of the epigraph extraction against the direct table.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeComparison {
    pub x: Vec<f64>,
    pub epigraph: ConstrainedValue,
    pub direct: ConstrainedValue,
}

impl ProbeComparison {
    /// Absolute gap when both sides are feasible.
    pub fn gap(&self) -> Option<f64> {
        Some((self.epigraph.value()? - self.direct.value()?).abs())
    }
}

pub fn compare_probes(grid: &GridValue, direct: &ConstrainedTable, probes: &[Vec<f64>]) -> Result<Vec<ProbeComparison>> {
    probes
        .iter()
        .map(|x| {
            Ok(ProbeComparison {
                x: x.clone(),
                epigraph: extract_constrained_value(grid, x)?,
                direct: direct.interpolate(x)?,
            })
        })
        .collect()
}

/// Write `x..., v_epigraph, v_direct, abs_gap`; infeasible entries are `inf`.
pub fn write_probe_csv(path: &Path, rows: &[ProbeComparison]) -> Result<()> {
    let dim = rows.first().map_or(0, |r| r.x.len());
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    let mut header: Vec<String> = (0..dim).map(|d| format!("x{d}")).collect();
    header.extend(["v_epigraph", "v_direct", "abs_gap"].map(String::from));
    writeln!(f, "{}", header.join(","))?;
    let fmt = |v: ConstrainedValue| v.value().map_or("inf".to_string(), |x| x.to_string());
    for r in rows {
        let mut row: Vec<String> = r.x.iter().map(|v| v.to_string()).collect();
        row.push(fmt(r.epigraph));
        row.push(fmt(r.direct));
        row.push(r.gap().map_or("nan".to_string(), |g| g.to_string()));
        writeln!(f, "{}", row.join(","))?;
    }
    f.flush()?;
    Ok(())
}

/// One oracle run on the double-integrator toy: epigraph table plus the
/// direct constrained table, compared at `probes`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleConfig {
    pub toy: ToyDoubleIntegrator,
    pub x_low: Vec<f64>,
    pub x_high: Vec<f64>,
    /// Lattice points per state axis.
    pub nx: usize,
    pub z_min: f64,
    pub z_max: f64,
    pub nz: usize,
    /// Actions per dimension.
    pub n_actions: usize,
    pub gamma: f64,
    pub dt: f64,
    pub settings: OracleSettings,
    pub tol: f64,
    pub max_iters: usize,
    pub probes: Vec<Vec<f64>>,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            toy: ToyDoubleIntegrator::default(),
            x_low: vec![-1.2, -1.5],
            x_high: vec![1.0, 1.5],
            nx: 41,
            z_min: -0.5,
            z_max: 3.0,
            nz: 21,
            n_actions: 9,
            gamma: 0.9,
            dt: 0.1,
            settings: OracleSettings {
                operator: BellmanOperator::SignPreserving,
                ..Default::default()
            },
            tol: 1e-6,
            max_iters: 50_000,
            probes: vec![vec![-0.3, 0.0], vec![0.3, 0.0], vec![-0.5, 0.25], vec![-0.8, 0.5], vec![0.0, -0.5]],
        }
    }
}

#[derive(Debug, Clone)]
pub struct OracleRun {
    pub table: GridValue,
    pub convergence: Convergence,
    pub direct: ConstrainedTable,
    pub direct_convergence: Convergence,
    pub probes: Vec<ProbeComparison>,
}

pub fn run_oracle(cfg: &OracleConfig) -> Result<OracleRun> {
    let model = &cfg.toy;
    check_len("oracle lower corner", model.state_dim(), cfg.x_low.len())?;
    check_len("oracle upper corner", model.state_dim(), cfg.x_high.len())?;
    let axes = cfg
        .x_low
        .iter()
        .zip(&cfg.x_high)
        .map(|(&lo, &hi)| uniform_axis(lo, hi, cfg.nx))
        .collect::<Result<Vec<_>>>()?;
    let z = uniform_axis(cfg.z_min, cfg.z_max, cfg.nz)?;
    let actions = action_grid(&model.action_low(), &model.action_high(), cfg.n_actions)?;
    let (direct, direct_convergence) = constrained_vi_oracle(
        model,
        &axes,
        &actions,
        cfg.gamma,
        cfg.dt,
        cfg.settings.z_integrator,
        cfg.tol,
        cfg.max_iters,
    )?;
    let start = match cfg.settings.operator {
        BellmanOperator::SignPreserving => GridValue::constraint_floor(axes, z, cfg.gamma, cfg.dt, model)?,
        _ => GridValue::filled(axes, z, cfg.gamma, cfg.dt, 0.0)?,
    };
    let (table, convergence) = value_iterate(start, model, &actions, cfg.settings, cfg.tol, cfg.max_iters)?;
    let probes = compare_probes(&table, &direct, &cfg.probes)?;
    Ok(OracleRun {
        table,
        convergence,
        direct,
        direct_convergence,
        probes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{ToyConstraint, ToySingleIntegrator};
    use crate::EpiRng;
    use rand::{Rng, SeedableRng};

    fn toy1_grid(gamma: f64, value: f64) -> GridValue {
        GridValue::filled(
            vec![uniform_axis(-1.0, 1.0, 41).unwrap()],
            uniform_axis(0.0, 2.0, 21).unwrap(),
            gamma,
            0.1,
            value,
        )
        .unwrap()
    }

    fn actions1() -> Vec<Vec<f64>> {
        action_grid(&[-1.0], &[1.0], 9).unwrap()
    }

    #[test]
    fn action_grid_is_cartesian() {
        let a = action_grid(&[-1.0, 0.0], &[1.0, 2.0], 3).unwrap();
        assert_eq!(a.len(), 9);
        assert_eq!(a[0], vec![-1.0, 0.0]);
        assert_eq!(a[5], vec![0.0, 2.0]);
        assert_eq!(actions1().len(), 9);
    }

    #[test]
    fn interpolation_reproduces_affine_functions() {
        let g = GridValue::from_fn(
            vec![uniform_axis(-1.0, 1.0, 5).unwrap(), uniform_axis(0.0, 2.0, 7).unwrap()],
            uniform_axis(0.0, 1.0, 4).unwrap(),
            0.9,
            0.1,
            |x, z| 1.0 + 2.0 * x[0] - x[1] + 3.0 * z,
        )
        .unwrap();
        let v = g.interpolate(&[0.33, 1.21], 0.47).unwrap();
        assert!((v - (1.0 + 0.66 - 1.21 + 1.41)).abs() < 1e-12);
        // clamped in x
        let v = g.interpolate(&[5.0, 1.0], 0.5).unwrap();
        assert!((v - (1.0 + 2.0 - 1.0 + 1.5)).abs() < 1e-12);
    }

    #[test]
    fn z_boundary_modes() {
        let g = toy1_grid(0.9, 0.25);
        assert_eq!(g.clone().with_z_boundary(ZBoundary::Clamp).interpolate(&[0.0], -1.0).unwrap(), 0.25);
        assert_eq!(g.clone().with_z_boundary(ZBoundary::Extrapolate).interpolate(&[0.0], -1.0).unwrap(), 1.25);
        assert_eq!(g.interpolate(&[0.0], 9.0).unwrap(), 0.25);
    }

    #[test]
    fn empty_action_set_errors() {
        let env = ToySingleIntegrator::default();
        let r = bellman_apply(&toy1_grid(0.9, 0.0), &env, &[], OracleSettings::default());
        assert!(matches!(r, Err(Error::Empty(_))));
    }

    #[test]
    fn zero_system_has_zero_fixed_point() {
        let env = ToySingleIntegrator {
            state_weight: 0.0,
            constraint: ToyConstraint::Constant { value: 0.0 },
            ..Default::default()
        };
        for operator in [BellmanOperator::Averaged, BellmanOperator::Discounted] {
            let s = OracleSettings {
                operator,
                ..Default::default()
            };
            let g = toy1_grid(0.99, 0.0);
            assert_eq!(bellman_apply(&g, &env, &actions1(), s).unwrap().values, g.values);
            let (_, conv) = value_iterate(g, &env, &actions1(), s, 1e-9, 10).unwrap();
            assert_eq!(conv.iterations, 1);
            assert!(conv.converged);
        }
    }

    #[test]
    fn constant_tables_differ_by_discount() {
        let env = ToySingleIntegrator {
            constraint: ToyConstraint::Constant { value: -0.3 },
            ..Default::default()
        };
        for operator in [BellmanOperator::Averaged, BellmanOperator::Discounted] {
            let s = OracleSettings {
                operator,
                ..Default::default()
            };
            let tv = bellman_apply(&toy1_grid(0.99, 1.0), &env, &actions1(), s).unwrap();
            let tw = bellman_apply(&toy1_grid(0.99, 0.0), &env, &actions1(), s).unwrap();
            let d = tv.sup_distance(&tw).unwrap();
            assert!((d - 0.99f64.powf(0.1)).abs() < 1e-12, "{operator:?}: {d}");
        }
    }

    fn random_table(rng: &mut EpiRng, gamma: f64) -> GridValue {
        let mut g = toy1_grid(gamma, 0.0);
        g.values.iter_mut().for_each(|v| *v = rng.random_range(-2.0..2.0));
        g
    }

    #[test]
    fn monotone_and_contractive_on_random_pairs() {
        let env = ToySingleIntegrator::default();
        let acts = actions1();
        let trans = Transitions::build(&env, &toy1_grid(0.99, 0.0).x_axes, &acts, 0.1).unwrap();
        let mut rng = EpiRng::seed_from_u64(21);
        let bound = 0.99f64.powf(0.1) + 1e-9;
        for operator in [BellmanOperator::Averaged, BellmanOperator::Discounted] {
            for z_boundary in [ZBoundary::Clamp, ZBoundary::Extrapolate] {
                let s = OracleSettings {
                    operator,
                    z_boundary,
                    ..Default::default()
                };
                for _ in 0..10 {
                    let v = random_table(&mut rng, 0.99);
                    let w = random_table(&mut rng, 0.99);
                    let (tv, tw) = (bellman_apply_with(&v, &trans, s).unwrap(), bellman_apply_with(&w, &trans, s).unwrap());
                    let ratio = tv.sup_distance(&tw).unwrap() / v.sup_distance(&w).unwrap();
                    assert!(ratio <= bound, "{ratio}");
                    // W >= V pointwise
                    let mut hi = v.clone();
                    hi.values.iter_mut().for_each(|x| *x += rng.random_range(0.0..1.0));
                    let thi = bellman_apply_with(&hi, &trans, s).unwrap();
                    assert!(tv.values.iter().zip(&thi.values).all(|(a, b)| a <= b));
                }
            }
        }
    }

    #[test]
    fn fixed_point_residual_within_tolerance() {
        let env = ToySingleIntegrator::default();
        let s = OracleSettings::default();
        let (v, conv) = value_iterate(toy1_grid(0.9, 0.0), &env, &actions1(), s, 1e-8, 10_000).unwrap();
        assert!(conv.converged);
        let tv = bellman_apply(&v, &env, &actions1(), s).unwrap();
        assert!(tv.sup_distance(&v).unwrap() <= 1e-8);
        let g = 0.9f64.powf(0.1);
        assert!(conv.ratios.iter().all(|&r| r <= g + 1e-9));
    }

    #[test]
    fn extraction_trivial_cases() {
        let g = toy1_grid(0.9, -1.0);
        assert_eq!(extract_constrained_value(&g, &[0.2]).unwrap(), ConstrainedValue::Feasible(0.0));
        let g = toy1_grid(0.9, 1.0);
        assert_eq!(extract_constrained_value(&g, &[0.2]).unwrap(), ConstrainedValue::Infeasible);
        let g = GridValue::from_fn(
            vec![uniform_axis(-1.0, 1.0, 3).unwrap()],
            uniform_axis(0.0, 2.0, 5).unwrap(),
            0.9,
            0.1,
            |_, z| 0.7 - z,
        )
        .unwrap();
        let v = extract_constrained_value(&g, &[0.0]).unwrap().value().unwrap();
        assert!((v - 0.7).abs() < 1e-12);
    }

    #[test]
    fn direct_oracle_trivial_cases() {
        let acts = actions1();
        let axes = vec![uniform_axis(-1.0, 1.0, 21).unwrap()];
        let bad = ToySingleIntegrator {
            constraint: ToyConstraint::Constant { value: 1.0 },
            ..Default::default()
        };
        let (t, _) = constrained_vi_oracle(&bad, &axes, &acts, 0.9, 0.1, ZIntegrator::Exponential, 1e-9, 100).unwrap();
        assert!(t.values.iter().all(|v| v.is_infinite()));
        let free = ToySingleIntegrator {
            state_weight: 0.0,
            constraint: ToyConstraint::Constant { value: -1.0 },
            ..Default::default()
        };
        let (t, conv) = constrained_vi_oracle(&free, &axes, &acts, 0.9, 0.1, ZIntegrator::Exponential, 1e-9, 100).unwrap();
        assert!(t.values.iter().all(|&v| v == 0.0));
        assert_eq!(conv.iterations, 1);
    }

    #[test]
    fn operator_names_round_trip() {
        #[derive(Deserialize)]
        struct W {
            operator: BellmanOperator,
        }
        let w: W = toml::from_str("operator = \"discounted\"").unwrap();
        assert_eq!(w.operator, BellmanOperator::Discounted);
        let w: W = toml::from_str("operator = \"averaged\"").unwrap();
        assert_eq!(w.operator, BellmanOperator::Averaged);
    }

    #[test]
    fn oracle_run_from_config() {
        let cfg = OracleConfig {
            nx: 15,
            nz: 9,
            tol: 1e-4,
            ..OracleConfig::default()
        };
        let run = run_oracle(&cfg).unwrap();
        assert!(run.convergence.converged && run.direct_convergence.converged);
        assert_eq!(run.probes.len(), cfg.probes.len());
        let bad = OracleConfig {
            x_low: vec![0.0],
            ..OracleConfig::default()
        };
        assert!(run_oracle(&bad).is_err());
    }
}
