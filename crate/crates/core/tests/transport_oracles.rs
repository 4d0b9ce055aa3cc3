//! Cross-validation of the transport routes: the exact 1D quantile route,
//! the entropic route and the linear-program oracle must price the same
//! measures consistently.

use ccflow::grid::{DensityField, Grid};
use ccflow::transport::{
    displacement_velocity, entropic_anneal_trace, lp, w2_entropic, w2_exact_1d, SinkhornOpts,
};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

fn random_density(grid: Grid, rng: &mut impl Rng) -> DensityField {
    let raw: Vec<f64> = (0..grid.cells()).map(|_| rng.gen_range(0.0..1.0)).collect();
    DensityField::project(grid, raw).unwrap()
}

/// Random coherent bump centered inside `range` (fractions of the box).
fn random_blob(grid: Grid, rng: &mut impl Rng, range: (f64, f64)) -> DensityField {
    let lx = grid.nx() as f64 * grid.hx();
    let ly = grid.ny() as f64 * grid.hy();
    let cx = rng.gen_range(range.0 * lx..range.1 * lx);
    let cy = if grid.dimension() == 2 {
        rng.gen_range(range.0 * ly..range.1 * ly)
    } else {
        0.5
    };
    let sigma = rng.gen_range(0.08 * lx..0.15 * lx);
    let mut vals = Vec::with_capacity(grid.cells());
    for iy in 0..grid.ny() {
        for ix in 0..grid.nx() {
            let d2 = (grid.x(ix) - cx).powi(2)
                + if grid.dimension() == 2 {
                    (grid.y(iy) - cy).powi(2)
                } else {
                    0.0
                };
            vals.push((-d2 / (2.0 * sigma * sigma)).exp());
        }
    }
    DensityField::project(grid, vals).unwrap()
}

/// Well-separated coherent pair: what consecutive minimizing-movement
/// states look like, scaled up so the relative tolerance is meaningful.
fn blob_pair(grid: Grid, rng: &mut impl Rng) -> (DensityField, DensityField) {
    (
        random_blob(grid, rng, (0.2, 0.35)),
        random_blob(grid, rng, (0.65, 0.8)),
    )
}

#[test]
fn exact_1d_matches_lp_on_random_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(1001);
    let g = Grid::line(16, 2.0, 0.0, 1.0).unwrap();
    for draw in 0..100 {
        let a = random_density(g, &mut rng);
        let b = random_density(g, &mut rng);
        let exact = w2_exact_1d(&a, &b).unwrap();
        let oracle = lp::w2_lp(&a, &b).unwrap();
        assert!(
            (exact.cost - oracle.cost).abs() <= 1e-8,
            "draw {draw}: exact {} vs lp {}",
            exact.cost,
            oracle.cost
        );
    }
}

#[test]
fn exact_1d_symmetry_and_triangle() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let g = Grid::line(24, 2.0, 0.0, 1.0).unwrap();
    for _ in 0..25 {
        let a = random_density(g, &mut rng);
        let b = random_density(g, &mut rng);
        let c = random_density(g, &mut rng);
        let dab = w2_exact_1d(&a, &b).unwrap().cost.sqrt();
        let dba = w2_exact_1d(&b, &a).unwrap().cost.sqrt();
        assert!((dab - dba).abs() <= 1e-8, "{dab} vs {dba}");
        let dac = w2_exact_1d(&a, &c).unwrap().cost.sqrt();
        let dcb = w2_exact_1d(&c, &b).unwrap().cost.sqrt();
        assert!(dab <= dac + dcb + 1e-8);
    }
}

#[test]
fn velocity_identity_from_plan() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let g = Grid::line(32, 2.0, 0.0, 1.0).unwrap();
    let a = random_density(g, &mut rng);
    let b = random_density(g, &mut rng);
    let tr = w2_exact_1d(&a, &b).unwrap();
    let tau = 0.1;
    let v = displacement_velocity(&tr, tau);
    assert!(v.x.iter().any(|x| x.abs() > 0.0));
    let kin = tr.kinetic_energy(&a, tau);
    assert!((kin * tau * tau - tr.cost).abs() <= 1e-8 * tr.cost);
}

#[test]
fn entropic_identical_densities_cost_vanishes() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let g = Grid::line(32, 2.0, 0.0, 1.0).unwrap();
    let a = random_density(g, &mut rng);
    let eps = g.hx() * g.hx();
    let tr = w2_entropic(&a, &a, eps, &SinkhornOpts::default()).unwrap();
    assert!(tr.cost <= 1e-8, "self cost {}", tr.cost);
}

#[test]
fn entropic_1d_matches_exact_within_one_percent() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let g = Grid::line(64, 2.0, 0.0, 1.0).unwrap();
    let eps = g.hx() * g.hx();
    for draw in 0..5 {
        let (a, b) = blob_pair(g, &mut rng);
        let exact = w2_exact_1d(&a, &b).unwrap();
        let ent = w2_entropic(&a, &b, eps, &SinkhornOpts::default()).unwrap();
        let rel = (ent.cost - exact.cost).abs() / exact.cost;
        assert!(
            rel <= 0.01,
            "draw {draw}: entropic {} vs exact {} (rel {rel})",
            ent.cost,
            exact.cost
        );
    }
}

#[test]
fn entropic_2d_matches_lp_within_one_percent() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let l = 1.6;
    let g = Grid::rect(8, 8, l, l, 0.0, 1.0).unwrap();
    let eps = 1e-3 * l * l;
    for draw in 0..3 {
        let (a, b) = blob_pair(g, &mut rng);
        let oracle = lp::w2_lp(&a, &b).unwrap();
        let ent = w2_entropic(&a, &b, eps, &SinkhornOpts::default()).unwrap();
        let rel = (ent.cost - oracle.cost).abs() / oracle.cost;
        assert!(
            rel <= 0.01,
            "draw {draw}: entropic {} vs lp {} (rel {rel})",
            ent.cost,
            oracle.cost
        );
    }
}

#[test]
fn entropic_anneal_cost_decreases_toward_lp() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let g = Grid::line(16, 2.0, 0.0, 1.0).unwrap();
    let (a, b) = blob_pair(g, &mut rng);
    let lp_cost = lp::w2_lp(&a, &b).unwrap().cost;
    let eps = g.hx() * g.hx();
    let trace = entropic_anneal_trace(&a, &b, eps, &SinkhornOpts::default()).unwrap();
    for w in trace.windows(2) {
        assert!(
            (w[1] - lp_cost).abs() <= (w[0] - lp_cost).abs() + 1e-9 * lp_cost,
            "anneal trace not approaching the oracle: {trace:?} vs {lp_cost}"
        );
    }
    let last = *trace.last().unwrap();
    assert!((last - lp_cost).abs() / lp_cost <= 0.01);
}

#[test]
fn entropic_dual_gap_small_on_oracle_instances() {
    // primal plan cost (raw, biased) must dominate the dual value; the
    // debiased cost must sit within tolerance of the oracle
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let g = Grid::line(12, 2.0, 0.0, 1.0).unwrap();
    let (a, b) = blob_pair(g, &mut rng);
    let oracle = lp::w2_lp(&a, &b).unwrap();
    let eps = 0.25 * g.hx() * g.hx();
    let ent = w2_entropic(&a, &b, eps, &SinkhornOpts::default()).unwrap();
    assert!((ent.cost - oracle.cost).abs() / oracle.cost <= 0.01);
}

#[test]
fn eps_below_floor_rejected() {
    let g = Grid::line(16, 2.0, 0.0, 1.0).unwrap();
    let vals = vec![0.5; 16];
    let a = DensityField::new(g, vals).unwrap();
    assert!(w2_entropic(&a, &a, 1e-12, &SinkhornOpts::default()).is_err());
}

#[test]
fn lp_dual_feasibility_slack_on_oracle_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let g = Grid::line(16, 2.0, 0.0, 1.0).unwrap();
    for _ in 0..20 {
        let a = random_density(g, &mut rng);
        let b = random_density(g, &mut rng);
        let tr = w2_exact_1d(&a, &b).unwrap();
        // psi + psi^c <= half cost over all cell pairs, slack >= -1e-8
        let psi = &tr.potential_psi.values;
        for j in 0..16 {
            let y = g.x(j);
            let mut psi_c = f64::INFINITY;
            for i in 0..16 {
                psi_c = psi_c.min(0.5 * (g.x(i) - y).powi(2) - psi[i]);
            }
            for i in 0..16 {
                let slack = 0.5 * (g.x(i) - y).powi(2) - psi[i] - psi_c;
                assert!(slack >= -1e-8);
            }
        }
    }
}
