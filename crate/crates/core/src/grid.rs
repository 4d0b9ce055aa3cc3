//! Uniform cell-centered Cartesian grids (1D and 2D) and the discrete
//! calculus used by every solver layer.
//!
//! Gradients live on faces and are averaged back to cells; divergence uses
//! face-averaged normal values with vanishing normal flux at the boundary.
//! With this pairing the summation-by-parts identity
//! `<grad f, v> + <f, div v> = 0` holds exactly (up to rounding) whenever `f`
//! carries a zero-flux closure, and `laplacian = div . grad` at interior
//! cells.

use crate::error::{CoreError, Result};

/// Neumaier-compensated sum. Mass and inner-product accounting must stay at
/// machine precision even over 1e5 cells.
pub fn ksum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Boundary-condition role attached to a scalar field.
///
/// `Robin` reads the grid's `(alpha, beta)` pair; `ZeroFlux` reflects the
/// ghost cell; `Free` is for fields whose boundary behaviour is irrelevant
/// (treated as zero-flux by the difference operators).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BcRole {
    Robin,
    ZeroFlux,
    Free,
}

/// Uniform Cartesian grid over the box `[0, Lx] x [0, Ly]`.
///
/// 1D grids are stored as `ny == 1` with a unit transverse measure so that
/// volumes, masses and norms use the same formulas in both dimensions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Grid {
    nx: usize,
    ny: usize,
    hx: f64,
    hy: f64,
    alpha: f64,
    beta: f64,
    two_d: bool,
}

impl Grid {
    /// 1D grid with `n` cells on `[0, length]`.
    pub fn line(n: usize, length: f64, alpha: f64, beta: f64) -> Result<Self> {
        Self::build(n, 1, length, 1.0, alpha, beta, false)
    }

    /// 2D grid with `nx * ny` cells on `[0, lx] x [0, ly]`.
    pub fn rect(nx: usize, ny: usize, lx: f64, ly: f64, alpha: f64, beta: f64) -> Result<Self> {
        Self::build(nx, ny, lx, ly, alpha, beta, true)
    }

    fn build(
        nx: usize,
        ny: usize,
        lx: f64,
        ly: f64,
        alpha: f64,
        beta: f64,
        two_d: bool,
    ) -> Result<Self> {
        if nx == 0 || ny == 0 {
            return Err(CoreError::InvalidConfig("cell counts must be positive".into()));
        }
        if !(lx > 0.0) || !(ly > 0.0) {
            return Err(CoreError::InvalidConfig("domain lengths must be positive".into()));
        }
        if alpha < 0.0 || beta < 0.0 || alpha + beta <= 0.0 {
            return Err(CoreError::InvalidConfig(
                "boundary parameters need alpha >= 0, beta >= 0, alpha + beta > 0".into(),
            ));
        }
        Ok(Grid {
            nx,
            ny,
            hx: lx / nx as f64,
            hy: if two_d { ly / ny as f64 } else { 1.0 },
            alpha,
            beta,
            two_d,
        })
    }

    pub fn dimension(&self) -> usize {
        if self.two_d {
            2
        } else {
            1
        }
    }
    pub fn nx(&self) -> usize {
        self.nx
    }
    pub fn ny(&self) -> usize {
        self.ny
    }
    pub fn hx(&self) -> f64 {
        self.hx
    }
    pub fn hy(&self) -> f64 {
        self.hy
    }
    pub fn alpha(&self) -> f64 {
        self.alpha
    }
    pub fn beta(&self) -> f64 {
        self.beta
    }
    pub fn cells(&self) -> usize {
        self.nx * self.ny
    }
    pub fn cell_volume(&self) -> f64 {
        self.hx * self.hy
    }
    pub fn total_volume(&self) -> f64 {
        self.cell_volume() * self.cells() as f64
    }
    /// Cell-center coordinate along x.
    pub fn x(&self, ix: usize) -> f64 {
        (ix as f64 + 0.5) * self.hx
    }
    /// Cell-center coordinate along y (0.5 for 1D grids).
    pub fn y(&self, iy: usize) -> f64 {
        (iy as f64 + 0.5) * self.hy
    }
    #[inline]
    pub fn idx(&self, ix: usize, iy: usize) -> usize {
        iy * self.nx + ix
    }

    /// Ghost-cell factor for the Robin closure along an axis with spacing `h`:
    /// the eliminated ghost value is `gamma * (adjacent interior value)`.
    fn robin_gamma(&self, h: f64) -> f64 {
        (self.beta / h - 0.5 * self.alpha) / (self.beta / h + 0.5 * self.alpha)
    }

    /// Outward-axis gradient closure at a boundary face: the face gradient is
    /// `coef * f_cell / h` with the sign of the inward axis direction handled
    /// by the caller.
    fn boundary_face_grad_coef(&self, bc: BcRole, h: f64) -> f64 {
        match bc {
            BcRole::ZeroFlux | BcRole::Free => 0.0,
            BcRole::Robin => 1.0 - self.robin_gamma(h),
        }
    }
}

/// Scalar grid function: one value per cell plus a boundary-condition role.
#[derive(Clone, Debug)]
pub struct ScalarField {
    pub grid: Grid,
    pub values: Vec<f64>,
    pub bc: BcRole,
}

impl ScalarField {
    pub fn new(grid: Grid, values: Vec<f64>, bc: BcRole) -> Result<Self> {
        if values.len() != grid.cells() {
            return Err(CoreError::InvalidField(format!(
                "value count {} != cell count {}",
                values.len(),
                grid.cells()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::InvalidField("non-finite value".into()));
        }
        Ok(ScalarField { grid, values, bc })
    }

    pub fn constant(grid: Grid, c: f64, bc: BcRole) -> Self {
        ScalarField {
            grid,
            values: vec![c; grid.cells()],
            bc,
        }
    }

    pub fn from_fn(grid: Grid, bc: BcRole, mut f: impl FnMut(f64, f64) -> f64) -> Self {
        let mut values = Vec::with_capacity(grid.cells());
        for iy in 0..grid.ny() {
            for ix in 0..grid.nx() {
                values.push(f(grid.x(ix), grid.y(iy)));
            }
        }
        ScalarField { grid, values, bc }
    }

    pub fn zeros(grid: Grid) -> Self {
        Self::constant(grid, 0.0, BcRole::Free)
    }

    pub fn max_value(&self) -> f64 {
        self.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min_value(&self) -> f64 {
        self.values.iter().cloned().fold(f64::INFINITY, f64::min)
    }
}

/// Cell-averaged density with `0 <= rho <= 1` and unit mass.
#[derive(Clone, Debug)]
pub struct DensityField {
    pub grid: Grid,
    pub values: Vec<f64>,
}

/// Slack allowed above the ceiling `rho = 1` after projection.
pub const TOL_CONSTRAINT: f64 = 1e-9;
/// Slack allowed on the unit-mass constraint.
pub const TOL_MASS: f64 = 1e-12;

impl DensityField {
    /// Validating constructor: enforces the ceiling and the unit mass.
    pub fn new(grid: Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.cells() {
            return Err(CoreError::InvalidField(format!(
                "value count {} != cell count {}",
                values.len(),
                grid.cells()
            )));
        }
        for &v in &values {
            if !v.is_finite() || v < -TOL_CONSTRAINT || v > 1.0 + TOL_CONSTRAINT {
                return Err(CoreError::InvalidField(format!(
                    "density value {v} outside [0, 1]"
                )));
            }
        }
        let m = ksum(values.iter().cloned()) * grid.cell_volume();
        if (m - 1.0).abs() > TOL_MASS {
            return Err(CoreError::InvalidField(format!("mass {m} != 1")));
        }
        Ok(DensityField { grid, values })
    }

    /// Projects raw nonnegative data into the admissible set: clip to
    /// `[0, 1]`, then rescale the unsaturated cells until the mass is one.
    pub fn project(grid: Grid, mut values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.cells() {
            return Err(CoreError::InvalidField("value count mismatch".into()));
        }
        let vol = grid.cell_volume();
        for v in values.iter_mut() {
            *v = v.clamp(0.0, 1.0);
        }
        for _ in 0..64 {
            let mass = ksum(values.iter().cloned()) * vol;
            if (mass - 1.0).abs() <= 0.5 * TOL_MASS {
                break;
            }
            let sat: f64 = ksum(values.iter().filter(|&&v| v >= 1.0).cloned()) * vol;
            let unsat = mass - sat;
            if unsat <= 0.0 {
                return Err(CoreError::InvalidField(
                    "cannot restore unit mass: no unsaturated cells".into(),
                ));
            }
            let c = (1.0 - sat) / unsat;
            if !(c > 0.0) || !c.is_finite() {
                return Err(CoreError::InvalidField(
                    "cannot restore unit mass within the ceiling".into(),
                ));
            }
            for v in values.iter_mut() {
                if *v < 1.0 {
                    *v = (*v * c).min(1.0);
                }
            }
        }
        Self::new(grid, values)
    }

    pub fn as_scalar(&self, bc: BcRole) -> ScalarField {
        ScalarField {
            grid: self.grid,
            values: self.values.clone(),
            bc,
        }
    }

    pub fn max_value(&self) -> f64 {
        self.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Cell-centered vector field (per-axis components).
#[derive(Clone, Debug)]
pub struct VectorField {
    pub grid: Grid,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

impl VectorField {
    pub fn zeros(grid: Grid) -> Self {
        let n = grid.cells();
        VectorField {
            grid,
            x: vec![0.0; n],
            y: vec![0.0; n],
        }
    }
}

fn check_same_grid(a: &Grid, b: &Grid, what: &'static str) -> Result<()> {
    if a != b {
        return Err(CoreError::GridMismatch(what));
    }
    Ok(())
}

/// Face gradients of `f` along one axis, boundary faces closed by `f.bc`.
///
/// Returns, for each 1D row of cells along the axis, `n + 1` face values of
/// the axis derivative. Used by `gradient`, `laplacian` and the norm
/// quadratures so the three stay mutually consistent.
fn face_grads_axis(f: &ScalarField, axis: usize) -> Vec<f64> {
    let g = &f.grid;
    let (n_axis, n_perp, h) = if axis == 0 {
        (g.nx(), g.ny(), g.hx())
    } else {
        (g.ny(), g.nx(), g.hy())
    };
    let coef = g.boundary_face_grad_coef(f.bc, h);
    let mut out = vec![0.0; n_perp * (n_axis + 1)];
    for p in 0..n_perp {
        let at = |i: usize| -> f64 {
            if axis == 0 {
                f.values[g.idx(i, p)]
            } else {
                f.values[g.idx(p, i)]
            }
        };
        let row = &mut out[p * (n_axis + 1)..(p + 1) * (n_axis + 1)];
        // low boundary face: inward direction is +axis
        row[0] = coef * at(0) / h;
        for i in 1..n_axis {
            row[i] = (at(i) - at(i - 1)) / h;
        }
        row[n_axis] = -coef * at(n_axis - 1) / h;
    }
    out
}

/// Discrete Laplacian with the ghost-cell closure selected by `f.bc`.
///
/// Second-order central stencil; rejects nothing except grid mismatch at the
/// call sites that pair fields.
pub fn laplacian(f: &ScalarField) -> ScalarField {
    let g = &f.grid;
    let mut out = vec![0.0; g.cells()];
    for axis in 0..g.dimension() {
        let (n_axis, n_perp, h) = if axis == 0 {
            (g.nx(), g.ny(), g.hx())
        } else {
            (g.ny(), g.nx(), g.hy())
        };
        let fg = face_grads_axis(f, axis);
        for p in 0..n_perp {
            let row = &fg[p * (n_axis + 1)..(p + 1) * (n_axis + 1)];
            for i in 0..n_axis {
                let idx = if axis == 0 { g.idx(i, p) } else { g.idx(p, i) };
                out[idx] += (row[i + 1] - row[i]) / h;
            }
        }
    }
    ScalarField {
        grid: *g,
        values: out,
        bc: BcRole::Free,
    }
}

/// Discrete gradient: cell `i` carries the gradient of its upper face along
/// each axis (the conjugate pairing that makes `divergence` its exact
/// negative transpose and `div . grad` the compact Laplacian).
///
/// Fields that need a symmetric second-order sample (velocities for output)
/// should use [`gradient_centered`] instead.
pub fn gradient(f: &ScalarField) -> VectorField {
    let g = &f.grid;
    let mut out = VectorField::zeros(*g);
    for axis in 0..g.dimension() {
        let (n_axis, n_perp) = if axis == 0 {
            (g.nx(), g.ny())
        } else {
            (g.ny(), g.nx())
        };
        let fg = face_grads_axis(f, axis);
        for p in 0..n_perp {
            let row = &fg[p * (n_axis + 1)..(p + 1) * (n_axis + 1)];
            for i in 0..n_axis {
                let idx = if axis == 0 { g.idx(i, p) } else { g.idx(p, i) };
                if axis == 0 {
                    out.x[idx] = row[i + 1];
                } else {
                    out.y[idx] = row[i + 1];
                }
            }
        }
    }
    out
}

/// Cell-centered second-order gradient (average of adjacent face gradients).
pub fn gradient_centered(f: &ScalarField) -> VectorField {
    let g = &f.grid;
    let mut out = VectorField::zeros(*g);
    for axis in 0..g.dimension() {
        let (n_axis, n_perp) = if axis == 0 {
            (g.nx(), g.ny())
        } else {
            (g.ny(), g.nx())
        };
        let fg = face_grads_axis(f, axis);
        for p in 0..n_perp {
            let row = &fg[p * (n_axis + 1)..(p + 1) * (n_axis + 1)];
            for i in 0..n_axis {
                let idx = if axis == 0 { g.idx(i, p) } else { g.idx(p, i) };
                let v = 0.5 * (row[i] + row[i + 1]);
                if axis == 0 {
                    out.x[idx] = v;
                } else {
                    out.y[idx] = v;
                }
            }
        }
    }
    out
}

/// Discrete divergence: exact negative transpose of [`gradient`], so the
/// summation-by-parts identity `<grad f, v> + <f, div v> = 0` holds to
/// rounding for every `v` when `f` carries a zero-flux closure.
pub fn divergence(v: &VectorField) -> ScalarField {
    let g = &v.grid;
    let mut out = vec![0.0; g.cells()];
    for axis in 0..g.dimension() {
        let (n_axis, n_perp, h) = if axis == 0 {
            (g.nx(), g.ny(), g.hx())
        } else {
            (g.ny(), g.nx(), g.hy())
        };
        let comp = if axis == 0 { &v.x } else { &v.y };
        for p in 0..n_perp {
            let at = |i: usize| -> f64 {
                if axis == 0 {
                    comp[g.idx(i, p)]
                } else {
                    comp[g.idx(p, i)]
                }
            };
            for i in 0..n_axis {
                // interior faces only: the row of `gradient` for the last
                // cell is the boundary face, which is not paired here
                let lo = if i == 0 { 0.0 } else { at(i - 1) };
                let hi = if i + 1 == n_axis { 0.0 } else { at(i) };
                let idx = if axis == 0 { g.idx(i, p) } else { g.idx(p, i) };
                out[idx] += (hi - lo) / h;
            }
        }
    }
    ScalarField {
        grid: *g,
        values: out,
        bc: BcRole::Free,
    }
}

/// Total mass by cell-volume quadrature.
pub fn mass(rho: &DensityField) -> f64 {
    ksum(rho.values.iter().cloned()) * rho.grid.cell_volume()
}

/// `L2(Omega)` norm by cell quadrature.
pub fn l2_norm(f: &ScalarField) -> f64 {
    (ksum(f.values.iter().map(|v| v * v)) * f.grid.cell_volume()).sqrt()
}

/// `L2` norm of the gradient by interior-face quadrature.
///
/// Matches the quadratic form of the assembled Laplacian for zero-flux
/// fields, which is what the potential energy estimate needs.
pub fn l2_norm_grad(f: &ScalarField) -> f64 {
    let g = &f.grid;
    let vol = g.cell_volume();
    let mut acc = 0.0;
    for axis in 0..g.dimension() {
        let n_axis = if axis == 0 { g.nx() } else { g.ny() };
        let n_perp = if axis == 0 { g.ny() } else { g.nx() };
        let fg = face_grads_axis(f, axis);
        let mut terms = Vec::with_capacity(n_perp * (n_axis - 1).max(0));
        for p in 0..n_perp {
            let row = &fg[p * (n_axis + 1)..(p + 1) * (n_axis + 1)];
            for i in 1..n_axis {
                terms.push(row[i] * row[i]);
            }
        }
        acc += ksum(terms) * vol;
    }
    acc.sqrt()
}

/// Dirichlet form `int grad f . grad g` by interior-face quadrature, both
/// fields read with their own boundary closures.
pub fn grad_inner(f: &ScalarField, g: &ScalarField) -> Result<f64> {
    check_same_grid(&f.grid, &g.grid, "dirichlet form")?;
    let gr = &f.grid;
    let vol = gr.cell_volume();
    let mut acc = 0.0;
    for axis in 0..gr.dimension() {
        let n_axis = if axis == 0 { gr.nx() } else { gr.ny() };
        let n_perp = if axis == 0 { gr.ny() } else { gr.nx() };
        let ff = face_grads_axis(f, axis);
        let gg = face_grads_axis(g, axis);
        let mut terms = Vec::with_capacity(n_perp * (n_axis.saturating_sub(1)));
        for p in 0..n_perp {
            let rf = &ff[p * (n_axis + 1)..(p + 1) * (n_axis + 1)];
            let rg = &gg[p * (n_axis + 1)..(p + 1) * (n_axis + 1)];
            for i in 1..n_axis {
                terms.push(rf[i] * rg[i]);
            }
        }
        acc += ksum(terms) * vol;
    }
    Ok(acc)
}

/// `L2(Omega)` inner product of two scalar fields.
pub fn inner(f: &ScalarField, g: &ScalarField) -> Result<f64> {
    check_same_grid(&f.grid, &g.grid, "inner product")?;
    Ok(ksum(f.values.iter().zip(&g.values).map(|(a, b)| a * b)) * f.grid.cell_volume())
}

/// `L2(Omega)` inner product of two vector fields.
pub fn inner_vec(u: &VectorField, v: &VectorField) -> Result<f64> {
    check_same_grid(&u.grid, &v.grid, "vector inner product")?;
    let dot = ksum(
        u.x.iter()
            .zip(&v.x)
            .map(|(a, b)| a * b)
            .chain(u.y.iter().zip(&v.y).map(|(a, b)| a * b)),
    );
    Ok(dot * u.grid.cell_volume())
}
