//! Obstacle problem for the congestion pressure on the saturated set.
//!
//! The pressure level `q` minimizes `(1/2) int |grad q - grad phi|^2` over
//! the cone `{q >= 0, q (1 - rho) = 0}`: zero on unsaturated cells, free and
//! nonnegative where the density sits at the ceiling. Discretely this is a
//! linear complementarity problem for the zero-flux Laplacian, solved by
//! projected SOR with red-black sweeps. The first unsaturated cell ring acts
//! as homogeneous Dirichlet data; domain-boundary faces carry the natural
//! condition `(grad phi - grad q) . n = 0`.

use crate::error::{CoreError, Result};
use crate::grid::{laplacian, ksum, BcRole, DensityField, Grid, ScalarField};

/// Options for the projected SOR solver.
#[derive(Clone, Copy, Debug)]
pub struct ObstacleOptions {
    /// over-relaxation factor in (1, 2)
    pub omega: f64,
    /// bound on the estimated solution error (sup-norm): the cellwise
    /// update scaled by the observed contraction rate
    pub tol_psor: f64,
    pub max_sweeps: usize,
    /// cells with `rho >= 1 - delta_sat` count as saturated
    pub delta_sat: f64,
}

impl Default for ObstacleOptions {
    fn default() -> Self {
        ObstacleOptions {
            omega: 1.7,
            tol_psor: 1e-12,
            max_sweeps: 400_000,
            delta_sat: 1e-3,
        }
    }
}

/// Converged obstacle solve.
#[derive(Clone, Debug)]
pub struct ObstacleSolve {
    pub q: ScalarField,
    /// `q > 0`
    pub active_set: Vec<bool>,
    /// `rho >= 1 - delta_sat`
    pub saturated_set: Vec<bool>,
    /// `sum |q (lap q - lap phi)| vol` over interior saturated cells
    pub complementarity_residual: f64,
    pub psor_iterations: usize,
    /// saturated set had no interior cell: the constraint is not enforced
    /// discretely and `q` degenerates to zero
    pub degenerate: bool,
}

struct Stencil {
    grid: Grid,
    inv_hx2: f64,
    inv_hy2: f64,
}

impl Stencil {
    fn new(grid: Grid) -> Self {
        Stencil {
            grid,
            inv_hx2: 1.0 / (grid.hx() * grid.hx()),
            inv_hy2: if grid.dimension() == 2 {
                1.0 / (grid.hy() * grid.hy())
            } else {
                0.0
            },
        }
    }

    /// Row of `A = -lap` with the zero-flux closure: diagonal and the sum of
    /// off-diagonal couplings times the neighbor values of `v`.
    fn row(&self, v: &[f64], ix: usize, iy: usize) -> (f64, f64) {
        let g = &self.grid;
        let mut diag = 0.0;
        let mut off = 0.0;
        if ix > 0 {
            diag += self.inv_hx2;
            off -= self.inv_hx2 * v[g.idx(ix - 1, iy)];
        }
        if ix + 1 < g.nx() {
            diag += self.inv_hx2;
            off -= self.inv_hx2 * v[g.idx(ix + 1, iy)];
        }
        if g.dimension() == 2 {
            if iy > 0 {
                diag += self.inv_hy2;
                off -= self.inv_hy2 * v[g.idx(ix, iy - 1)];
            }
            if iy + 1 < g.ny() {
                diag += self.inv_hy2;
                off -= self.inv_hy2 * v[g.idx(ix, iy + 1)];
            }
        }
        (diag, off)
    }
}

/// Solves the pressure obstacle problem for a density and its potential.
///
/// `phi` should be the solved potential of `rho` when the drive is on; pass
/// a zero field to recover `q = 0` (no drive, no pressure).
pub fn solve_obstacle(
    rho: &DensityField,
    phi: &ScalarField,
    opts: &ObstacleOptions,
) -> Result<ObstacleSolve> {
    solve_obstacle_from(rho, phi, opts, None)
}

/// As [`solve_obstacle`] with an explicit starting guess (used by the
/// uniqueness audit; the converged answer must not depend on it).
pub fn solve_obstacle_from(
    rho: &DensityField,
    phi: &ScalarField,
    opts: &ObstacleOptions,
    start: Option<&[f64]>,
) -> Result<ObstacleSolve> {
    if rho.grid != phi.grid {
        return Err(CoreError::GridMismatch("obstacle solve"));
    }
    let grid = rho.grid;
    let n = grid.cells();
    let saturated: Vec<bool> = rho.values.iter().map(|&r| r >= 1.0 - opts.delta_sat).collect();
    let sat_cells: Vec<usize> = (0..n).filter(|&i| saturated[i]).collect();
    let stencil = Stencil::new(grid);

    let mut q = vec![0.0; n];
    if let Some(s) = start {
        for &i in &sat_cells {
            q[i] = s[i].max(0.0);
        }
    }
    if sat_cells.is_empty() {
        return Ok(ObstacleSolve {
            q: ScalarField::new(grid, q, BcRole::ZeroFlux)?,
            active_set: vec![false; n],
            saturated_set: saturated,
            complementarity_residual: 0.0,
            psor_iterations: 0,
            degenerate: true,
        });
    }

    // b = A phi with the same zero-flux closure
    let mut b = vec![0.0; n];
    for &i in &sat_cells {
        let (ix, iy) = (i % grid.nx(), i / grid.nx());
        let (diag, off) = stencil.row(&phi.values, ix, iy);
        b[i] = diag * phi.values[i] + off;
    }

    // red-black projected SOR; the error estimate scales the sweep update
    // by the contraction rate observed over a window of sweeps
    let mut sweeps = 0usize;
    let mut history = std::collections::VecDeque::with_capacity(12);
    loop {
        sweeps += 1;
        let mut max_update: f64 = 0.0;
        for color in 0..2usize {
            for &i in &sat_cells {
                let (ix, iy) = (i % grid.nx(), i / grid.nx());
                if (ix + iy) % 2 != color {
                    continue;
                }
                let (diag, off) = stencil.row(&q, ix, iy);
                if diag == 0.0 {
                    continue;
                }
                let residual = b[i] - (diag * q[i] + off);
                let new_q = (q[i] + opts.omega * residual / diag).max(0.0);
                max_update = max_update.max((new_q - q[i]).abs());
                q[i] = new_q;
            }
        }
        history.push_back(max_update.max(f64::MIN_POSITIVE));
        if history.len() > 10 {
            history.pop_front();
        }
        let rate = if history.len() >= 10 {
            (history.back().unwrap() / history.front().unwrap())
                .powf(1.0 / (history.len() - 1) as f64)
                .clamp(0.0, 1.0 - 1e-9)
        } else {
            1.0 - 1e-9
        };
        let err_estimate = max_update * rate / (1.0 - rate);
        if max_update <= opts.tol_psor || (sweeps > 10 && err_estimate <= opts.tol_psor) {
            break;
        }
        if sweeps >= opts.max_sweeps {
            return Err(CoreError::NonConvergence {
                solver: "projected SOR",
                residual: max_update,
                iterations: sweeps,
            });
        }
    }

    let active: Vec<bool> = q.iter().map(|&v| v > 0.0).collect();
    let q_field = ScalarField::new(grid, q, BcRole::ZeroFlux)?;
    let comp = complementarity_residual(&q_field, phi, rho, opts.delta_sat);
    Ok(ObstacleSolve {
        q: q_field,
        active_set: active,
        saturated_set: saturated,
        complementarity_residual: comp,
        psor_iterations: sweeps,
        degenerate: false,
    })
}

fn neighbors_saturated(saturated: &[bool], grid: &Grid, i: usize) -> bool {
    let (ix, iy) = (i % grid.nx(), i / grid.nx());
    let mut ok = saturated[i];
    if ix > 0 {
        ok &= saturated[grid.idx(ix - 1, iy)];
    }
    if ix + 1 < grid.nx() {
        ok &= saturated[grid.idx(ix + 1, iy)];
    }
    if grid.dimension() == 2 {
        if iy > 0 {
            ok &= saturated[grid.idx(ix, iy - 1)];
        }
        if iy + 1 < grid.ny() {
            ok &= saturated[grid.idx(ix, iy + 1)];
        }
    }
    ok
}

/// Pointwise complementarity defect `sum |p (lap p - lap phi)| vol` over
/// saturated cells whose whole stencil is saturated.
pub fn complementarity_residual(
    p: &ScalarField,
    phi: &ScalarField,
    rho: &DensityField,
    delta_sat: f64,
) -> f64 {
    let grid = p.grid;
    let saturated: Vec<bool> = rho.values.iter().map(|&r| r >= 1.0 - delta_sat).collect();
    let lap_p = laplacian(&ScalarField {
        grid,
        values: p.values.clone(),
        bc: BcRole::ZeroFlux,
    });
    let lap_phi = laplacian(&ScalarField {
        grid,
        values: phi.values.clone(),
        bc: BcRole::ZeroFlux,
    });
    let vol = grid.cell_volume();
    let terms: Vec<f64> = (0..grid.cells())
        .filter(|&i| neighbors_saturated(&saturated, &grid, i))
        .map(|i| (p.values[i] * (lap_p.values[i] - lap_phi.values[i])).abs() * vol)
        .collect();
    ksum(terms)
}

/// Largest violation of the ordering `p <= q` between the two pressure
/// routes (positive value = violation).
pub fn check_subsolution_order(p_f: &ScalarField, q: &ScalarField) -> f64 {
    p_f.values
        .iter()
        .zip(&q.values)
        .map(|(&a, &b)| a - b)
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Distributional free-boundary measure of one obstacle solve, cellwise:
/// `mu = (lap q - lap phi chi_{q>0}) vol`.
pub fn free_boundary_measure(q: &ScalarField, phi: &ScalarField) -> ScalarField {
    let grid = q.grid;
    let lap_q = laplacian(&ScalarField {
        grid,
        values: q.values.clone(),
        bc: BcRole::ZeroFlux,
    });
    let lap_phi = laplacian(&ScalarField {
        grid,
        values: phi.values.clone(),
        bc: BcRole::ZeroFlux,
    });
    let vol = grid.cell_volume();
    let values: Vec<f64> = (0..grid.cells())
        .map(|i| {
            let chi = if q.values[i] > 0.0 { 1.0 } else { 0.0 };
            (lap_q.values[i] - chi * lap_phi.values[i]) * vol
        })
        .collect();
    ScalarField {
        grid,
        values,
        bc: BcRole::Free,
    }
}

/// Summary of the free-boundary measure: `(negative-part mass, interior
/// support mass)`. The interior excludes a 2-cell ring around the boundary
/// of the active set.
pub fn free_boundary_measure_checks(q: &ScalarField, phi: &ScalarField) -> (f64, f64) {
    let grid = q.grid;
    let mu = free_boundary_measure(q, phi);
    let active: Vec<bool> = q.values.iter().map(|&v| v > 0.0).collect();
    let mut neg = 0.0;
    let mut interior = Vec::new();
    for i in 0..grid.cells() {
        if mu.values[i] < 0.0 {
            neg -= mu.values[i];
        }
        let (ix, iy) = (i % grid.nx(), i / grid.nx());
        let mut same = true;
        let r = 2i64;
        for dy in -r..=r {
            for dx in -r..=r {
                if grid.dimension() == 1 && dy != 0 {
                    continue;
                }
                let jx = ix as i64 + dx;
                let jy = iy as i64 + dy;
                if jx < 0 || jy < 0 || jx >= grid.nx() as i64 || jy >= grid.ny() as i64 {
                    continue;
                }
                if active[grid.idx(jx as usize, jy as usize)] != active[i] {
                    same = false;
                }
            }
        }
        if same {
            interior.push(mu.values[i].abs());
        }
    }
    (neg, ksum(interior))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{grad_inner, l2_norm_grad};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    /// rho = 1 on [a, b], vacuum elsewhere; the interval carries unit mass.
    fn saturated_interval(n: usize, l: f64, a: f64, b: f64) -> (Grid, DensityField) {
        let g = Grid::line(n, l, 0.0, 1.0).unwrap();
        let vals: Vec<f64> = (0..n)
            .map(|i| {
                let x = g.x(i);
                if x > a && x < b {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        (g, DensityField::project(g, vals).unwrap())
    }

    #[test]
    fn empty_saturated_set_gives_zero() {
        let g = Grid::line(32, 2.0, 0.0, 1.0).unwrap();
        let rho = DensityField::new(g, vec![0.5; 32]).unwrap();
        let phi = ScalarField::from_fn(g, BcRole::ZeroFlux, |x, _| -x * x);
        let sol = solve_obstacle(&rho, &phi, &ObstacleOptions::default()).unwrap();
        assert!(sol.degenerate);
        assert!(sol.q.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn interval_matches_closed_form() {
        // concave synthetic potential: q = phi - affine through the Dirichlet
        // anchor cells, exact for quadratics
        let n = 512;
        let (g, rho) = saturated_interval(n, 2.0, 0.5, 1.5);
        let phi = ScalarField::from_fn(g, BcRole::ZeroFlux, |x, _| 1.0 - (x - 1.0) * (x - 1.0));
        let opts = ObstacleOptions::default();
        let sol = solve_obstacle(&rho, &phi, &opts).unwrap();

        // anchors: centers of the outermost unsaturated cells
        let sat: Vec<usize> = (0..n).filter(|&i| sol.saturated_set[i]).collect();
        let (lo, hi) = (sat[0] - 1, sat[sat.len() - 1] + 1);
        let (x0, x1) = (g.x(lo), g.x(hi));
        let phi_at = |x: f64| 1.0 - (x - 1.0) * (x - 1.0);
        let affine =
            |x: f64| phi_at(x0) + (phi_at(x1) - phi_at(x0)) * (x - x0) / (x1 - x0);
        let mut err: f64 = 0.0;
        for i in 0..n {
            let x = g.x(i);
            let expect = if i > lo && i < hi {
                (phi_at(x) - affine(x)).max(0.0)
            } else {
                0.0
            };
            err = err.max((sol.q.values[i] - expect).abs());
        }
        assert!(err <= 1e-6, "max deviation {err}");
        assert!(sol.q.values.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn variational_inequality_on_random_feasible_fields() {
        let (g, rho) = saturated_interval(256, 2.0, 0.6, 1.6);
        let phi = ScalarField::from_fn(g, BcRole::ZeroFlux, |x, _| {
            0.8 - 0.5 * (x - 1.1) * (x - 1.1)
        });
        let sol = solve_obstacle(&rho, &phi, &ObstacleOptions::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..50 {
            // random feasible zeta: nonnegative, zero off the saturated set
            let vals: Vec<f64> = (0..256)
                .map(|i| {
                    if sol.saturated_set[i] {
                        rng.gen_range(0.0..0.5)
                    } else {
                        0.0
                    }
                })
                .collect();
            let zeta = ScalarField::new(g, vals, BcRole::ZeroFlux).unwrap();
            // <grad q - grad phi, grad q - grad zeta> <= 0
            let qq = grad_inner(&sol.q, &sol.q).unwrap();
            let qphi = grad_inner(&sol.q, &phi).unwrap();
            let qz = grad_inner(&sol.q, &zeta).unwrap();
            let phiz = grad_inner(&phi, &zeta).unwrap();
            let form = qq - qphi - qz + phiz;
            assert!(form <= 1e-8, "VI violated: {form}");
        }
    }

    #[test]
    fn complementarity_residual_detects_perturbation() {
        let (g, rho) = saturated_interval(256, 2.0, 0.5, 1.5);
        let phi = ScalarField::from_fn(g, BcRole::ZeroFlux, |x, _| 1.0 - (x - 1.0) * (x - 1.0));
        let opts = ObstacleOptions::default();
        let sol = solve_obstacle(&rho, &phi, &opts).unwrap();
        assert!(
            sol.complementarity_residual <= 1e-8,
            "residual {}",
            sol.complementarity_residual
        );
        // zero pressure has zero residual
        let zero = ScalarField::constant(g, 0.0, BcRole::ZeroFlux);
        assert_eq!(complementarity_residual(&zero, &phi, &rho, 1e-3), 0.0);
        // pushing the solution up inside the active region is detected
        let mut bad = sol.q.clone();
        for v in bad.values.iter_mut() {
            if *v > 0.0 {
                *v += 0.1;
            }
        }
        let r = complementarity_residual(&bad, &phi, &rho, 1e-3);
        assert!(r > 0.01, "perturbation not detected: {r}");
    }

    #[test]
    fn subsolution_order_detector() {
        let g = Grid::line(16, 2.0, 0.0, 1.0).unwrap();
        let zero = ScalarField::constant(g, 0.0, BcRole::Free);
        let one = ScalarField::constant(g, 1.0, BcRole::Free);
        assert!(check_subsolution_order(&zero, &one) <= 0.0);
        assert!(check_subsolution_order(&one, &zero) == 1.0);
    }

    #[test]
    fn free_boundary_measure_concentrates_at_endpoints() {
        let n = 512;
        let (g, rho) = saturated_interval(n, 2.0, 0.5, 1.5);
        let phi = ScalarField::from_fn(g, BcRole::ZeroFlux, |x, _| 1.0 - (x - 1.0) * (x - 1.0));
        let sol = solve_obstacle(&rho, &phi, &ObstacleOptions::default()).unwrap();
        let (neg, interior) = free_boundary_measure_checks(&sol.q, &phi);
        assert!(neg <= 1e-6, "negative part {neg}");
        assert!(interior <= 1e-6, "interior mass {interior}");
        // endpoint weights approximate the kink of the one-sided slopes
        let mu = free_boundary_measure(&sol.q, &phi);
        let first_active = (0..n).find(|&i| sol.q.values[i] > 0.0).unwrap();
        // phi' jump at the contact point: phi'(a) - affine slope;
        // q = (phi - affine)_+ so the kink weight is positive
        assert!(mu.values[first_active - 1] + mu.values[first_active] > 0.0);
    }

    #[test]
    fn psor_energy_monotone_and_start_independent() {
        let (g, rho) = saturated_interval(128, 2.0, 0.55, 1.55);
        let phi = ScalarField::from_fn(g, BcRole::ZeroFlux, |x, _| {
            0.9 - 0.6 * (x - 1.05) * (x - 1.05)
        });
        let opts = ObstacleOptions::default();
        let base = solve_obstacle(&rho, &phi, &opts).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..2 {
            let start: Vec<f64> = (0..128).map(|_| rng.gen_range(0.0..1.0)).collect();
            let other = solve_obstacle_from(&rho, &phi, &opts, Some(&start)).unwrap();
            let diff: f64 = base
                .q
                .values
                .iter()
                .zip(&other.q.values)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(diff <= 10.0 * opts.tol_psor, "starts disagree by {diff}");
        }
    }

    #[test]
    fn gradient_bound_against_potential() {
        let (g, rho) = saturated_interval(256, 2.0, 0.5, 1.5);
        let phi_solve = crate::elliptic::solve_potential(&rho, &g).unwrap();
        let sol = solve_obstacle(&rho, &phi_solve.phi, &ObstacleOptions::default()).unwrap();
        let gq = l2_norm_grad(&sol.q);
        let gphi = l2_norm_grad(&phi_solve.phi);
        assert!(gq <= gphi + 1e-10, "{gq} vs {gphi}");
        assert!(gphi <= 1.0 + 1e-6);
    }
}
