//! Exact transportation solver for small instances, used as ground truth for
//! the transport routes. Dense successive-shortest-paths with Johnson
//! potentials; optimality certified by the returned duals.
//!
//! Instances are capped at 64 support points per side; this is a validation
//! oracle, not a production path.

use crate::error::{CoreError, Result};
use crate::grid::{ksum, BcRole, DensityField, ScalarField, VectorField};

use super::{Method, Segment, TransportResult, MASS_FLOOR};

/// Hard cap on oracle size.
pub const MAX_SUPPORT: usize = 64;

/// Exact solution of `min sum c_ij f_ij` over couplings of `supply`/`demand`.
#[derive(Clone, Debug)]
pub struct LpSolution {
    pub cost: f64,
    /// dense plan, row-major `[i * m + j]`
    pub plan: Vec<f64>,
    /// duals: `u_i + v_j <= c_ij`, tight where `plan > 0`
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

/// Solves the dense transportation problem by successive shortest paths.
pub fn solve_transportation(cost: &[f64], supply: &[f64], demand: &[f64]) -> Result<LpSolution> {
    let n = supply.len();
    let m = demand.len();
    if n == 0 || m == 0 || n > MAX_SUPPORT || m > MAX_SUPPORT {
        return Err(CoreError::InvalidConfig(format!(
            "oracle supports 1..={MAX_SUPPORT} points, got {n} x {m}"
        )));
    }
    if cost.len() != n * m {
        return Err(CoreError::InvalidConfig("cost matrix shape mismatch".into()));
    }
    let total_s = ksum(supply.iter().cloned());
    let total_d = ksum(demand.iter().cloned());
    if (total_s - total_d).abs() > 1e-9 * total_s.max(total_d) {
        return Err(CoreError::MassMismatch(total_s, total_d));
    }

    // node layout: 0..n sources, n..n+m sinks
    let nv = n + m;
    let mut rem_s: Vec<f64> = supply.to_vec();
    let mut rem_d: Vec<f64> = demand.iter().map(|d| d * total_s / total_d).collect();
    let mut flow = vec![0.0; n * m];
    let mut pot = vec![0.0; nv];
    let tol = 1e-14 * total_s.max(1.0);

    let max_rounds = 50 * (n + m);
    for _round in 0..max_rounds {
        if rem_s.iter().all(|&s| s <= tol) {
            break;
        }
        // Dijkstra over reduced costs from all active sources
        let mut dist = vec![f64::INFINITY; nv];
        let mut prev = vec![usize::MAX; nv];
        let mut done = vec![false; nv];
        for i in 0..n {
            if rem_s[i] > tol {
                dist[i] = 0.0;
            }
        }
        loop {
            let mut best = usize::MAX;
            let mut bd = f64::INFINITY;
            for v in 0..nv {
                if !done[v] && dist[v] < bd {
                    bd = dist[v];
                    best = v;
                }
            }
            if best == usize::MAX {
                break;
            }
            done[best] = true;
            if best < n {
                let i = best;
                for j in 0..m {
                    let rc = cost[i * m + j] + pot[i] - pot[n + j];
                    let nd = dist[i] + rc.max(0.0);
                    if nd < dist[n + j] {
                        dist[n + j] = nd;
                        prev[n + j] = i;
                    }
                }
            } else {
                let j = best - n;
                for i in 0..n {
                    if flow[i * m + j] > 0.0 {
                        let rc = -cost[i * m + j] + pot[n + j] - pot[i];
                        let nd = dist[n + j] + rc.max(0.0);
                        if nd < dist[i] {
                            dist[i] = nd;
                            prev[i] = n + j;
                        }
                    }
                }
            }
        }
        // nearest sink with remaining demand
        let mut target = usize::MAX;
        let mut td = f64::INFINITY;
        for j in 0..m {
            if rem_d[j] > tol && dist[n + j] < td {
                td = dist[n + j];
                target = n + j;
            }
        }
        if target == usize::MAX {
            return Err(CoreError::NonConvergence {
                solver: "lp oracle",
                residual: rem_s.iter().cloned().fold(0.0, f64::max),
                iterations: _round,
            });
        }
        // bottleneck along the path
        let mut push = rem_d[target - n];
        let mut node = target;
        while prev[node] != usize::MAX {
            let p = prev[node];
            if p >= n {
                // backward arc (sink p-n) -> source node
                push = push.min(flow[node * m + (p - n)]);
            }
            node = p;
        }
        push = push.min(rem_s[node]);
        // apply
        let mut cur = target;
        while prev[cur] != usize::MAX {
            let p = prev[cur];
            if cur >= n {
                flow[p * m + (cur - n)] += push;
            } else {
                flow[cur * m + (p - n)] -= push;
            }
            cur = p;
        }
        rem_s[cur] -= push;
        rem_d[target - n] -= push;
        for v in 0..nv {
            if dist[v].is_finite() {
                pot[v] += dist[v].min(td);
            }
        }
    }
    if rem_s.iter().any(|&s| s > 1e-9 * total_s.max(1.0)) {
        return Err(CoreError::NonConvergence {
            solver: "lp oracle",
            residual: rem_s.iter().cloned().fold(0.0, f64::max),
            iterations: max_rounds,
        });
    }

    let cost_value = ksum((0..n * m).map(|k| flow[k] * cost[k]));
    // duals: u_i = -pot_i shifted, v_j = pot_{n+j}; feasibility u+v <= c
    let u: Vec<f64> = (0..n).map(|i| -pot[i]).collect();
    let v: Vec<f64> = (0..m).map(|j| pot[n + j]).collect();
    // u_i + v_j = pot_j - pot_i <= c_ij since rc >= 0 at the end
    Ok(LpSolution {
        cost: cost_value,
        plan: flow,
        u,
        v,
    })
}

/// Oracle transport between two small densities (any dimension).
pub fn w2_lp(rho_from: &DensityField, rho_to: &DensityField) -> Result<TransportResult> {
    super::check_equal_mass(rho_from, rho_to)?;
    let g = rho_from.grid;
    let vol = g.cell_volume();
    let mut src = Vec::new();
    let mut dst = Vec::new();
    for i in 0..g.cells() {
        if rho_from.values[i] * vol > MASS_FLOOR {
            src.push(i);
        }
        if rho_to.values[i] * vol > MASS_FLOOR {
            dst.push(i);
        }
    }
    let pos = |i: usize| (g.x(i % g.nx()), g.y(i / g.nx()));
    let mut cost = Vec::with_capacity(src.len() * dst.len());
    for &i in &src {
        let (xi, yi) = pos(i);
        for &j in &dst {
            let (xj, yj) = pos(j);
            cost.push((xi - xj).powi(2) + (yi - yj).powi(2));
        }
    }
    let supply: Vec<f64> = src.iter().map(|&i| rho_from.values[i] * vol).collect();
    let demand: Vec<f64> = dst.iter().map(|&j| rho_to.values[j] * vol).collect();
    let sol = solve_transportation(&cost, &supply, &demand)?;

    let mut segments = Vec::new();
    let mut disp = VectorField::zeros(g);
    for (a, &i) in src.iter().enumerate() {
        let (xi, yi) = pos(i);
        let (mut mx, mut my, mut mm) = (0.0, 0.0, 0.0);
        for (b, &j) in dst.iter().enumerate() {
            let f = sol.plan[a * dst.len() + b];
            if f > MASS_FLOOR {
                segments.push(Segment {
                    from: i,
                    to: j,
                    mass: f,
                });
                let (xj, yj) = pos(j);
                mx += f * xj;
                my += f * yj;
                mm += f;
            }
        }
        if mm > 0.0 {
            disp.x[i] = xi - mx / mm;
            disp.y[i] = if g.dimension() == 2 { yi - my / mm } else { 0.0 };
        }
    }
    // half-cost potential on the support, c-transform extension elsewhere
    let mut psi = vec![f64::NAN; g.cells()];
    for (a, &i) in src.iter().enumerate() {
        psi[i] = 0.5 * sol.u[a];
    }
    for (idx, val) in psi.iter_mut().enumerate() {
        if val.is_nan() {
            let (x, y) = pos(idx);
            let mut best = f64::INFINITY;
            for (b, &j) in dst.iter().enumerate() {
                let (xj, yj) = pos(j);
                let h = 0.5 * ((x - xj).powi(2) + (y - yj).powi(2));
                best = best.min(h - 0.5 * sol.v[b]);
            }
            *val = if best.is_finite() { best } else { 0.0 };
        }
    }
    let anchor = psi[0];
    for v in psi.iter_mut() {
        *v -= anchor;
    }
    Ok(TransportResult {
        cost: sol.cost,
        potential_psi: ScalarField::new(g, psi, BcRole::Free)?,
        displacement: disp,
        method: Method::LpOracle,
        segments: Some(segments),
        iterations: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_instance_by_hand() {
        // two sources, two sinks, cheap diagonal
        let cost = vec![0.0, 5.0, 5.0, 0.0];
        let sol = solve_transportation(&cost, &[0.4, 0.6], &[0.4, 0.6]).unwrap();
        assert!(sol.cost.abs() < 1e-14);
        assert!((sol.plan[0] - 0.4).abs() < 1e-14);
        assert!((sol.plan[3] - 0.6).abs() < 1e-14);
    }

    #[test]
    fn crossing_is_never_optimal() {
        // 1D points: monotone matching beats the cross
        let cost = vec![
            0.0, 1.0, // x=0 -> y=0, y=1
            1.0, 0.0, // x=1
        ];
        let sol = solve_transportation(&cost, &[0.5, 0.5], &[0.5, 0.5]).unwrap();
        assert!(sol.cost.abs() < 1e-14);
    }

    #[test]
    fn duals_are_feasible_and_tight() {
        let n = 6;
        let mut cost = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                cost[i * n + j] = ((i as f64) - 1.4 * (j as f64)).powi(2);
            }
        }
        let supply: Vec<f64> = (0..n).map(|i| 1.0 + (i % 3) as f64).collect();
        let mut demand = supply.clone();
        demand.rotate_left(2);
        let sol = solve_transportation(&cost, &supply, &demand).unwrap();
        let mut dual_value = 0.0;
        for i in 0..n {
            dual_value += sol.u[i] * supply[i];
        }
        for j in 0..n {
            dual_value += sol.v[j] * demand[j];
        }
        for i in 0..n {
            for j in 0..n {
                let slack = cost[i * n + j] - sol.u[i] - sol.v[j];
                assert!(slack >= -1e-9, "infeasible dual at ({i},{j}): {slack}");
                if sol.plan[i * n + j] > 1e-12 {
                    assert!(slack <= 1e-9, "slack {slack} on a basic arc");
                }
            }
        }
        assert!(
            (dual_value - sol.cost).abs() <= 1e-9 * sol.cost.max(1.0),
            "strong duality: {dual_value} vs {}",
            sol.cost
        );
    }
}
