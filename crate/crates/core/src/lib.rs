//! Grid laboratory for the Fisher-information-regularized Levy-Lieb
//! functional: densities on tensor grids, energies, a convex solver with a
//! dual certificate, the marginal-swap competitor, and diagonal-decay checks.

pub mod analysis;
pub mod competitor;
pub mod cost;
pub mod eigen;
pub mod error;
pub mod functionals;
pub mod grid;
pub mod solver;
pub mod sum;

pub use cost::{CostFamily, CostSpec};
pub use error::{Error, Result};
pub use functionals::{fisher_information, interaction_energy, levy_lieb_energy, EnergyBreakdown};
pub use grid::{Field, Grid, IndexSet, NBodyDensity, OneBodyDensity};
