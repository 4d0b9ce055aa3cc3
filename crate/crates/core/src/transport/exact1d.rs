//! Exact 1D optimal transport via the monotone rearrangement.
//!
//! Both measures are walked through their cumulative masses; each merge
//! segment moves one parcel wholesale, so the plan cost is exact and the
//! dual potentials follow from complementary slackness along the chain of
//! segments (consecutive segments always share a source or a target atom).

use crate::error::{CoreError, Result};
use crate::grid::{ksum, BcRole, DensityField, ScalarField, VectorField};

use super::{check_equal_mass, Method, Segment, TransportResult, MASS_FLOOR};

/// Atomic 1D measure: sorted positions with positive masses.
#[derive(Clone, Debug)]
pub struct Atoms1d {
    pub xs: Vec<f64>,
    pub ms: Vec<f64>,
}

impl Atoms1d {
    pub fn from_density(rho: &DensityField) -> Self {
        let g = &rho.grid;
        let vol = g.cell_volume();
        let mut xs = Vec::new();
        let mut ms = Vec::new();
        for i in 0..g.cells() {
            let m = rho.values[i] * vol;
            if m > MASS_FLOOR {
                xs.push(g.x(i));
                ms.push(m);
            }
        }
        Atoms1d { xs, ms }
    }

    pub fn total_mass(&self) -> f64 {
        ksum(self.ms.iter().cloned())
    }
}

/// Raw merge output over atom indices.
struct Merge {
    /// `(source atom, target atom, mass)`
    segments: Vec<(usize, usize, f64)>,
    /// full-cost plan value `sum m (x - y)^2`
    cost: f64,
}

fn monotone_merge(a: &Atoms1d, b: &Atoms1d) -> Merge {
    let mut cum_a = Vec::with_capacity(a.ms.len());
    let mut s = 0.0;
    for &m in &a.ms {
        s += m;
        cum_a.push(s);
    }
    let total_a = s;
    s = 0.0;
    let mut cum_b = Vec::with_capacity(b.ms.len());
    for &m in &b.ms {
        s += m;
        cum_b.push(s);
    }
    // walk both on a common mass scale so rounding cannot desynchronize them
    let scale = total_a / s;
    for c in cum_b.iter_mut() {
        *c *= scale;
    }

    let mut segments = Vec::new();
    let mut cost_terms = Vec::new();
    let (mut i, mut j) = (0usize, 0usize);
    let mut w = 0.0;
    while i < cum_a.len() && j < cum_b.len() {
        let (ca, cb) = (cum_a[i], cum_b[j]);
        let next = ca.min(cb);
        let m = next - w;
        if m > MASS_FLOOR {
            segments.push((i, j, m));
            let d = a.xs[i] - b.xs[j];
            cost_terms.push(m * d * d);
        }
        w = next;
        if ca <= cb {
            i += 1;
        }
        if cb <= ca {
            j += 1;
        }
    }
    Merge {
        segments,
        cost: ksum(cost_terms),
    }
}

/// Squared Wasserstein distance between two atomic 1D measures.
pub fn w2_sq_atoms(a: &Atoms1d, b: &Atoms1d) -> f64 {
    monotone_merge(a, b).cost
}

/// Dual potentials (half-cost convention) by chain propagation over the
/// monotone plan. Returns `(psi on source atoms, psi^c on target atoms)`.
fn chain_potentials(a: &Atoms1d, b: &Atoms1d, segments: &[(usize, usize, f64)]) -> (Vec<f64>, Vec<f64>) {
    let h = |i: usize, j: usize| 0.5 * (a.xs[i] - b.xs[j]).powi(2);
    let mut psi = vec![f64::NAN; a.xs.len()];
    let mut psi_c = vec![f64::NAN; b.xs.len()];
    if segments.is_empty() {
        return (psi, psi_c);
    }
    psi[segments[0].0] = 0.0;
    let mut prev_j = segments[0].1;
    for &(i, j, _) in segments {
        if psi[i].is_nan() {
            if psi_c[j].is_nan() {
                // cumulative masses tied: the chain jumps to a fresh pair, so
                // bridge through the previous target atom (the constraint
                // that becomes binding in the monotone geometry)
                psi[i] = h(i, prev_j) - psi_c[prev_j];
            } else {
                psi[i] = h(i, j) - psi_c[j];
            }
        }
        if psi_c[j].is_nan() {
            psi_c[j] = h(i, j) - psi[i];
        }
        prev_j = j;
    }
    (psi, psi_c)
}

/// Exact 1D transport from `rho_from` to `rho_to`.
pub fn w2_exact_1d(rho_from: &DensityField, rho_to: &DensityField) -> Result<TransportResult> {
    if rho_from.grid.dimension() != 1 {
        return Err(CoreError::GridMismatch("w2_exact_1d needs a 1D grid"));
    }
    check_equal_mass(rho_from, rho_to)?;
    let g = rho_from.grid;
    let a = Atoms1d::from_density(rho_from);
    let b = Atoms1d::from_density(rho_to);
    let merge = monotone_merge(&a, &b);
    let (psi_atoms, psi_c) = chain_potentials(&a, &b, &merge.segments);

    // cell indices of the participating atoms
    let cell_of = |x: f64| -> usize { ((x / g.hx()) as usize).min(g.nx() - 1) };
    let a_cells: Vec<usize> = a.xs.iter().map(|&x| cell_of(x)).collect();
    let b_cells: Vec<usize> = b.xs.iter().map(|&x| cell_of(x)).collect();

    // potential on the whole grid: chain values on the support, c-transform
    // of psi^c elsewhere
    let mut psi_vals = vec![0.0; g.cells()];
    let mut have = vec![false; g.cells()];
    for (k, &c) in a_cells.iter().enumerate() {
        if !psi_atoms[k].is_nan() {
            psi_vals[c] = psi_atoms[k];
            have[c] = true;
        }
    }
    for i in 0..g.cells() {
        if !have[i] {
            let x = g.x(i);
            let mut best = f64::INFINITY;
            for (j, &y) in b.xs.iter().enumerate() {
                if !psi_c[j].is_nan() {
                    best = best.min(0.5 * (x - y) * (x - y) - psi_c[j]);
                }
            }
            psi_vals[i] = if best.is_finite() { best } else { 0.0 };
        }
    }
    let anchor = psi_vals[0];
    for v in psi_vals.iter_mut() {
        *v -= anchor;
    }

    // barycentric displacement per source cell
    let mut disp = VectorField::zeros(g);
    let mut tmass = vec![0.0; a.xs.len()];
    let mut tmean = vec![0.0; a.xs.len()];
    for &(i, j, m) in &merge.segments {
        tmass[i] += m;
        tmean[i] += m * b.xs[j];
    }
    for (k, &c) in a_cells.iter().enumerate() {
        if tmass[k] > 0.0 {
            disp.x[c] = a.xs[k] - tmean[k] / tmass[k];
        }
    }

    let segments = merge
        .segments
        .iter()
        .map(|&(i, j, m)| Segment {
            from: a_cells[i],
            to: b_cells[j],
            mass: m,
        })
        .collect();

    Ok(TransportResult {
        cost: merge.cost,
        potential_psi: ScalarField::new(g, psi_vals, BcRole::Free)?,
        displacement: disp,
        method: Method::Exact1d,
        segments: Some(segments),
        iterations: 0,
    })
}

/// Constant-speed geodesic between two 1D densities at parameter
/// `theta in [0, 1]`, as an atomic measure (atoms may sit off-grid).
pub fn geodesic_interpolate_1d(
    rho_from: &DensityField,
    rho_to: &DensityField,
    theta: f64,
) -> Result<Atoms1d> {
    check_equal_mass(rho_from, rho_to)?;
    let a = Atoms1d::from_density(rho_from);
    let b = Atoms1d::from_density(rho_to);
    let merge = monotone_merge(&a, &b);
    let mut xs = Vec::with_capacity(merge.segments.len());
    let mut ms = Vec::with_capacity(merge.segments.len());
    for &(i, j, m) in &merge.segments {
        xs.push((1.0 - theta) * a.xs[i] + theta * b.xs[j]);
        ms.push(m);
    }
    // keep atoms sorted (monotone interpolation preserves order, but merge
    // ties can produce equal positions)
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&p, &q| xs[p].partial_cmp(&xs[q]).unwrap());
    Ok(Atoms1d {
        xs: order.iter().map(|&k| xs[k]).collect(),
        ms: order.iter().map(|&k| ms[k]).collect(),
    })
}
