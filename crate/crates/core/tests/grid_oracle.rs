//! Grid oracle against an exhaustive dynamic program on the exactly
//! reachable lattice of the double-integrator toy.

use epi_core::env::{SystemModel, ToyDoubleIntegrator};
use epi_core::epigraph::{ZIntegrator, ZStepper};
use epi_core::grid::{
    action_grid, compare_probes, constrained_vi_oracle, uniform_axis, value_iterate, BellmanOperator, GridValue,
    OracleSettings,
};

const DT: f64 = 0.1;
const GAMMA: f64 = 0.9;
// 9 accelerations in [-1, 1] change v by multiples of DV and p by multiples of DP.
const DV: f64 = 0.025;
const DP: f64 = DV * DT;

/// Finite-horizon DP over every lattice state in a box; leaving the box or
/// entering `c > 0` is infeasible.
struct BruteForce {
    p_range: (i64, i64),
    v_range: (i64, i64),
    values: Vec<f64>,
}

impl BruteForce {
    fn solve(env: &ToyDoubleIntegrator, horizon: usize) -> Self {
        let p_range = ((-1.2 / DP).round() as i64, (0.6 / DP).round() as i64);
        let v_range = ((-1.5 / DV).round() as i64, (1.5 / DV).round() as i64);
        let np = (p_range.1 - p_range.0 + 1) as usize;
        let nv = (v_range.1 - v_range.0 + 1) as usize;
        let stepper = ZStepper::new(GAMMA, DT, ZIntegrator::Exponential).unwrap();
        let (w, disc) = (stepper.cost_weight(), stepper.discount());
        let mut values = vec![0.0; np * nv];
        for (ip, m) in (p_range.0..=p_range.1).enumerate() {
            if env.constraint(&[m as f64 * DP, 0.0]) > 0.0 {
                for iv in 0..nv {
                    values[ip * nv + iv] = f64::INFINITY;
                }
            }
        }
        for _ in 0..horizon {
            let mut next = values.clone();
            for (ip, m) in (p_range.0..=p_range.1).enumerate() {
                for (iv, j) in (v_range.0..=v_range.1).enumerate() {
                    let x = [m as f64 * DP, j as f64 * DV];
                    if env.constraint(&x) > 0.0 {
                        continue;
                    }
                    let mut best = f64::INFINITY;
                    for k in -4i64..=4 {
                        let j2 = j + k;
                        let m2 = m + j2;
                        if j2 < v_range.0 || j2 > v_range.1 || m2 < p_range.0 || m2 > p_range.1 {
                            continue;
                        }
                        let u = [k as f64 / 4.0];
                        let succ = values[(m2 - p_range.0) as usize * nv + (j2 - v_range.0) as usize];
                        best = best.min(w * env.stage_cost(&x, &u) + disc * succ);
                    }
                    next[ip * nv + iv] = best;
                }
            }
            values = next;
        }
        Self { p_range, v_range, values }
    }

    fn value(&self, p: f64, v: f64) -> f64 {
        let (m, j) = ((p / DP).round() as i64, (v / DV).round() as i64);
        assert!((m as f64 * DP - p).abs() < 1e-12 && (j as f64 * DV - v).abs() < 1e-12);
        let nv = (self.v_range.1 - self.v_range.0 + 1) as usize;
        self.values[(m - self.p_range.0) as usize * nv + (j - self.v_range.0) as usize]
    }
}

fn probes() -> Vec<Vec<f64>> {
    vec![vec![-0.3, 0.0], vec![0.3, 0.0], vec![-0.5, 0.25]]
}

#[test]
fn brute_force_transitions_match_the_model() {
    let env = ToyDoubleIntegrator::default();
    let x = [-40.0 * DP, 3.0 * DV];
    let next = env.integrate(&x, &[0.75], DT);
    assert!((next[1] - 6.0 * DV).abs() < 1e-12);
    assert!((next[0] - (-40.0 + 6.0) * DP).abs() < 1e-12);
}

#[test]
fn lattice_tables_track_exhaustive_dp() {
    let env = ToyDoubleIntegrator::default();
    let brute = BruteForce::solve(&env, 500);
    let axes = vec![uniform_axis(-1.2, 1.0, 41).unwrap(), uniform_axis(-1.5, 1.5, 41).unwrap()];
    let z = uniform_axis(-0.5, 3.0, 21).unwrap();
    let dz = z[1] - z[0];
    let acts = action_grid(&[-1.0], &[1.0], 9).unwrap();
    let (direct, _) =
        constrained_vi_oracle(&env, &axes, &acts, GAMMA, DT, ZIntegrator::Exponential, 1e-8, 10_000).unwrap();
    let s = OracleSettings {
        operator: BellmanOperator::SignPreserving,
        ..Default::default()
    };
    let g = GridValue::constraint_floor(axes, z, GAMMA, DT, &env).unwrap();
    let (v, conv) = value_iterate(g, &env, &acts, s, 1e-6, 50_000).unwrap();
    assert!(conv.converged);
    for r in compare_probes(&v, &direct, &probes()).unwrap() {
        let exact = brute.value(r.x[0], r.x[1]);
        let d = r.direct.value().unwrap();
        let e = r.epigraph.value().unwrap();
        assert!((d - exact).abs() <= 0.25 * exact, "{:?}: direct {d} exact {exact}", r.x);
        assert!((e - exact).abs() <= 2.0 * dz, "{:?}: epigraph {e} exact {exact}", r.x);
    }
}
