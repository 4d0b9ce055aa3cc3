//! Wasserstein-2 distances, optimal maps and Kantorovich potentials between
//! grid densities.
//!
//! A density field is treated as the atomic measure carrying each cell's mass
//! at its center; this is the discrete measure every solver layer moves
//! around, and it is what the linear-program oracle prices, so the exact-1D
//! route and the oracle agree to rounding rather than to grid resolution.
//!
//! Potentials follow the half-cost convention of the dual problem
//! `psi(x) + psi^c(y) <= |x - y|^2 / 2`, anchored so `psi` vanishes at the
//! first cell. Reported `cost` is the full squared distance `W2^2`.

pub(crate) mod entropic;
mod exact1d;
pub mod lp;

pub use entropic::{entropic_anneal_trace, w2_entropic, SinkhornOpts};
pub use exact1d::{geodesic_interpolate_1d, w2_exact_1d, w2_sq_atoms, Atoms1d};

use crate::error::{CoreError, Result};
use crate::grid::{ksum, DensityField, Grid, ScalarField, VectorField};

/// Mass below which a cell is treated as vacuum.
pub const MASS_FLOOR: f64 = 1e-15;

/// How a transport result was produced.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Method {
    Exact1d,
    Entropic(f64),
    LpOracle,
}

/// One monotone-coupling segment: `mass` moved from cell `from` to cell `to`.
#[derive(Clone, Copy, Debug)]
pub struct Segment {
    pub from: usize,
    pub to: usize,
    pub mass: f64,
}

/// Wasserstein transport between two densities.
#[derive(Clone, Debug)]
pub struct TransportResult {
    /// Squared distance `W2^2` (debiased for the entropic method).
    pub cost: f64,
    /// Kantorovich potential from `rho_from` to `rho_to`, half-cost
    /// convention, anchored to zero at the first cell.
    pub potential_psi: ScalarField,
    /// Cell-wise displacement `x - T(x)` (barycentric where the plan splits
    /// an atom), zero on vacuum cells.
    pub displacement: VectorField,
    pub method: Method,
    /// Explicit plan for plan-based methods (exact 1D, oracle).
    pub segments: Option<Vec<Segment>>,
    /// Convergence telemetry for iterative methods.
    pub iterations: usize,
}

impl TransportResult {
    /// Kinetic energy `int rho |v|^2` of the step velocity `v = disp / tau`.
    ///
    /// Plan-based results integrate over the plan itself, so that
    /// `kinetic * tau^2 = cost` holds to rounding even when an atom splits;
    /// potential-based results quadrature the stored displacement field.
    pub fn kinetic_energy(&self, rho_from: &DensityField, tau: f64) -> f64 {
        let g = &rho_from.grid;
        let vol = g.cell_volume();
        match &self.segments {
            Some(segs) => {
                let terms: Vec<f64> = segs
                    .iter()
                    .map(|s| {
                        let (fx, fy) = (g.x(s.from % g.nx()), g.y(s.from / g.nx()));
                        let (tx, ty) = (g.x(s.to % g.nx()), g.y(s.to / g.nx()));
                        s.mass * ((fx - tx).powi(2) + (fy - ty).powi(2))
                    })
                    .collect();
                ksum(terms) / (tau * tau)
            }
            None => {
                let terms: Vec<f64> = (0..g.cells())
                    .map(|i| {
                        rho_from.values[i]
                            * vol
                            * (self.displacement.x[i].powi(2) + self.displacement.y[i].powi(2))
                    })
                    .collect();
                ksum(terms) / (tau * tau)
            }
        }
    }
}

/// Step velocity `v = (x - T(x)) / tau` on the support of the source.
pub fn displacement_velocity(tr: &TransportResult, tau: f64) -> VectorField {
    let mut v = tr.displacement.clone();
    for val in v.x.iter_mut().chain(v.y.iter_mut()) {
        *val /= tau;
    }
    v
}

pub(crate) fn check_equal_mass(a: &DensityField, b: &DensityField) -> Result<()> {
    if a.grid != b.grid {
        return Err(CoreError::GridMismatch("transport pair"));
    }
    let ma = crate::grid::mass(a);
    let mb = crate::grid::mass(b);
    if (ma - mb).abs() > 1e-12 {
        return Err(CoreError::MassMismatch(ma, mb));
    }
    if ma <= MASS_FLOOR {
        return Err(CoreError::InvalidField("zero-mass input".into()));
    }
    Ok(())
}

/// Fixed battery of smooth test functions: tensor polynomials up to degree
/// two and the lowest cosine modes. Returns `(name, value, gradient,
/// sup-norm of the Hessian)` evaluators.
pub struct TestFunction {
    pub name: &'static str,
    pub eval: Box<dyn Fn(f64, f64) -> f64>,
    pub grad: Box<dyn Fn(f64, f64) -> (f64, f64)>,
    pub d2_norm: f64,
}

pub fn test_battery(grid: &Grid) -> Vec<TestFunction> {
    let lx = grid.nx() as f64 * grid.hx();
    let ly = grid.ny() as f64 * grid.hy();
    let pi = std::f64::consts::PI;
    let kx = pi / lx;
    let mut fns: Vec<TestFunction> = vec![
        TestFunction {
            name: "one",
            eval: Box::new(|_, _| 1.0),
            grad: Box::new(|_, _| (0.0, 0.0)),
            d2_norm: 0.0,
        },
        TestFunction {
            name: "x",
            eval: Box::new(|x, _| x),
            grad: Box::new(|_, _| (1.0, 0.0)),
            d2_norm: 0.0,
        },
        TestFunction {
            name: "x2",
            eval: Box::new(|x, _| x * x),
            grad: Box::new(|x, _| (2.0 * x, 0.0)),
            d2_norm: 2.0,
        },
        TestFunction {
            name: "cos_x",
            eval: Box::new(move |x, _| (kx * x).cos()),
            grad: Box::new(move |x, _| (-kx * (kx * x).sin(), 0.0)),
            d2_norm: kx * kx,
        },
    ];
    if grid.dimension() == 2 {
        let ky = pi / ly;
        fns.push(TestFunction {
            name: "y",
            eval: Box::new(|_, y| y),
            grad: Box::new(|_, _| (0.0, 1.0)),
            d2_norm: 0.0,
        });
        fns.push(TestFunction {
            name: "y2",
            eval: Box::new(|_, y| y * y),
            grad: Box::new(|_, y| (0.0, 2.0 * y)),
            d2_norm: 2.0,
        });
        fns.push(TestFunction {
            name: "xy",
            eval: Box::new(|x, y| x * y),
            grad: Box::new(|x, y| (y, x)),
            d2_norm: 1.0,
        });
        fns.push(TestFunction {
            name: "cos_y",
            eval: Box::new(move |_, y| (ky * y).cos()),
            grad: Box::new(move |_, y| (0.0, -ky * (ky * y).sin())),
            d2_norm: ky * ky,
        });
        fns.push(TestFunction {
            name: "cos_xy",
            eval: Box::new(move |x, y| (kx * x).cos() * (ky * y).cos()),
            grad: Box::new(move |x, y| {
                (
                    -kx * (kx * x).sin() * (ky * y).cos(),
                    -ky * (kx * x).cos() * (ky * y).sin(),
                )
            }),
            d2_norm: kx * kx + ky * ky,
        });
    }
    fns
}

/// Worst continuity-equation residual over the test battery:
/// `|tau <rho_from v, grad zeta> - <rho_from - rho_to, zeta>|`.
pub fn continuity_residual(
    rho_from: &DensityField,
    rho_to: &DensityField,
    v: &VectorField,
    tau: f64,
) -> Result<f64> {
    Ok(continuity_residual_battery(rho_from, rho_to, v, tau)?
        .into_iter()
        .map(|(_, r, _)| r)
        .fold(0.0, f64::max))
}

/// Per-test-function continuity residuals: `(name, residual, ||D2 zeta||)`.
pub fn continuity_residual_battery(
    rho_from: &DensityField,
    rho_to: &DensityField,
    v: &VectorField,
    tau: f64,
) -> Result<Vec<(&'static str, f64, f64)>> {
    check_equal_mass(rho_from, rho_to)?;
    if v.grid != rho_from.grid {
        return Err(CoreError::GridMismatch("continuity residual"));
    }
    let g = &rho_from.grid;
    let vol = g.cell_volume();
    let mut out = Vec::new();
    for tf in test_battery(g) {
        let mut flux_terms = Vec::with_capacity(g.cells());
        let mut diff_terms = Vec::with_capacity(g.cells());
        for iy in 0..g.ny() {
            for ix in 0..g.nx() {
                let i = g.idx(ix, iy);
                let (gx, gy) = (tf.grad)(g.x(ix), g.y(iy));
                flux_terms.push(rho_from.values[i] * (v.x[i] * gx + v.y[i] * gy) * vol);
                let z = (tf.eval)(g.x(ix), g.y(iy));
                diff_terms.push((rho_from.values[i] - rho_to.values[i]) * z * vol);
            }
        }
        let res = (tau * ksum(flux_terms) - ksum(diff_terms)).abs();
        out.push((tf.name, res, tf.d2_norm));
    }
    Ok(out)
}
