//! Discrete kinetic energy (Fisher information), interaction energy and the
//! IMS localization split.
//!
//! The kinetic energy is evaluated on `sqrt(P)` with forward differences and a
//! replicate (zero-flux) boundary:
//!
//! ```text
//! E_kin(P) = 4 * sum_axes sum_nodes |D sqrt(P)|^2 * h^(dN)
//! ```
//!
//! Each edge term is computed as `(P' - P)^2 / (sqrt(P') + sqrt(P))^2`, which
//! equals `(sqrt(P') - sqrt(P))^2` without the cancellation of subtracting
//! nearby square roots, and makes 1-homogeneity hold to rounding.

use serde::{Deserialize, Serialize};

use crate::cost::CostSpec;
use crate::error::{Error, Result};
use crate::grid::{Field, Grid};
use crate::sum::Compensated;

#[inline]
fn sqrt_diff2(p: f64, q: f64) -> f64 {
    let s = p.sqrt() + q.sqrt();
    if s == 0.0 {
        0.0
    } else {
        let t = (q - p) / s;
        t * t
    }
}

/// Visit every forward edge `(flat, flat + stride)` of the grid.
pub(crate) fn for_each_edge(grid: &Grid, mut f: impl FnMut(usize, usize)) {
    let axes = grid.axes();
    let m = grid.m();
    grid.for_each_node(|flat, idx| {
        for ax in 0..axes {
            if idx[ax] + 1 < m {
                f(flat, flat + grid.stride(ax));
            }
        }
    });
}

/// Discrete Fisher information `integral |grad P|^2 / P`. Accepts unnormalized
/// nonnegative fields.
pub fn fisher_information(field: &Field) -> f64 {
    fisher_values(field.grid(), field.values())
}

pub(crate) fn fisher_values(grid: &Grid, v: &[f64]) -> f64 {
    let mut acc = Compensated::new();
    for_each_edge(grid, |i, j| acc.add(sqrt_diff2(v[i], v[j])));
    let h = grid.h();
    4.0 * acc.value() * grid.cell_volume() / (h * h)
}

/// How `P` is sampled on a forward edge in cutoff terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CutoffWeighting {
    /// `P` at the base node of the edge.
    Node,
    /// `sqrt(P P')` across the edge. With this weight the localization
    /// identity holds exactly on the grid.
    EdgeGeometric,
}

/// `integral |grad eta|^2 / eta * P`, computed as `4 |D sqrt(eta)|^2 P` with
/// `P` taken at the base node of each forward edge.
pub fn cutoff_energy(p: &Field, eta: &Field) -> Result<f64> {
    cutoff_energy_weighted(p, eta, CutoffWeighting::Node)
}

pub fn cutoff_energy_weighted(p: &Field, eta: &Field, weighting: CutoffWeighting) -> Result<f64> {
    p.grid().ensure_same(eta.grid(), "cutoff energy")?;
    let grid = p.grid();
    let (pv, ev) = (p.values(), eta.values());
    let mut acc = Compensated::new();
    for_each_edge(grid, |i, j| {
        let w = match weighting {
            CutoffWeighting::Node => pv[i],
            CutoffWeighting::EdgeGeometric => (pv[i] * pv[j]).sqrt(),
        };
        if w != 0.0 {
            acc.add(w * sqrt_diff2(ev[i], ev[j]));
        }
    });
    let h = grid.h();
    Ok(4.0 * acc.value() * grid.cell_volume() / (h * h))
}

/// Pair interaction potential on the N-body grid, with a check that no mass
/// sits on an uncapped coincidence.
pub fn interaction_energy_with(p: &Field, potential: &[f64]) -> Result<f64> {
    let mut acc = Compensated::new();
    let mut bad = 0.0;
    for (&w, &v) in p.values().iter().zip(potential) {
        if w == 0.0 {
            continue;
        }
        if v.is_infinite() {
            bad += w;
        } else {
            acc.add(w * v);
        }
    }
    if bad > 0.0 {
        return Err(Error::CoincidenceCap {
            mass: bad * p.grid().cell_volume(),
        });
    }
    Ok(acc.value() * p.grid().cell_volume())
}

/// `v_ee(P) = integral P(x) sum_{i<j} c(x_i, x_j) dx`.
pub fn interaction_energy(p: &Field, cost: &CostSpec) -> Result<f64> {
    interaction_energy_with(p, &cost.pair_potential(p.grid()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyBreakdown {
    pub kinetic: f64,
    pub interaction: f64,
    pub eps: f64,
    /// Value used at coincident nodes, recorded with every energy.
    pub coincidence_cap: Option<f64>,
}

impl EnergyBreakdown {
    pub fn total_at(&self, eps: f64) -> f64 {
        eps * self.kinetic + self.interaction
    }

    pub fn total(&self) -> f64 {
        self.total_at(self.eps)
    }
}

/// `eps * E_kin(P) + v_ee(P)`, itemized.
pub fn levy_lieb_energy(p: &Field, eps: f64, cost: &CostSpec) -> Result<EnergyBreakdown> {
    if !(eps > 0.0) {
        return Err(Error::Domain(format!("eps must be positive, got {eps}")));
    }
    Ok(EnergyBreakdown {
        kinetic: fisher_information(p),
        interaction: interaction_energy(p, cost)?,
        eps,
        coincidence_cap: cost.coincidence_value(p.grid().h()),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImsSplit {
    /// `sum_i E_kin(P eta_i)`.
    pub left: f64,
    /// `E_kin(P) + sum_i integral |grad eta_i|^2 / eta_i P`.
    pub right: f64,
    pub defect: f64,
}

/// Check that fields form a partition of unity with values in [0, 1].
pub fn check_partition(etas: &[&Field], tol: f64) -> Result<()> {
    let first = etas
        .first()
        .ok_or_else(|| Error::Constraint("empty partition".into()))?;
    for e in etas {
        first.grid().ensure_same(e.grid(), "partition")?;
    }
    for k in 0..first.values().len() {
        let mut s = 0.0;
        for e in etas {
            let v = e.values()[k];
            if !(-tol..=1.0 + tol).contains(&v) {
                return Err(Error::Constraint(format!(
                    "cutoff value {v} outside [0, 1] at node {k}"
                )));
            }
            s += v;
        }
        if (s - 1.0).abs() > tol {
            return Err(Error::Constraint(format!("partition sums to {s} at node {k}")));
        }
    }
    Ok(())
}

/// Both sides of the IMS localization identity for a three-piece partition of
/// unity. The defect is the discrete Leibniz-rule error, O(h) for smooth data.
pub fn ims_split(p: &Field, etas: [&Field; 3]) -> Result<ImsSplit> {
    ims_split_weighted(p, etas, CutoffWeighting::Node)
}

pub fn ims_split_weighted(p: &Field, etas: [&Field; 3], weighting: CutoffWeighting) -> Result<ImsSplit> {
    check_partition(&etas, 1e-12)?;
    p.grid().ensure_same(etas[0].grid(), "IMS split")?;
    let mut left = 0.0;
    let mut right = fisher_information(p);
    for eta in etas {
        left += fisher_information(&p.product(eta)?);
        right += cutoff_energy_weighted(p, eta, weighting)?;
    }
    Ok(ImsSplit {
        left,
        right,
        defect: left - right,
    })
}
