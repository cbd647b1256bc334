//! Tensor grids over (R^d)^N, densities living on them, and the geometric
//! queries used throughout: marginals, ball masses, the enlarged diagonal,
//! the concentration function and set erosion.
//!
//! Conventions: densities are stored as probabilities (a one-body density is
//! rho/N), integrals are node sums times `h^(dN)`, and a node belongs to a
//! ball or to the enlarged diagonal iff its center does.

use std::fmt::Write as _;
use std::ops::Deref;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sum::{self, Compensated};

/// Default cap on the number of grid states `M^(dN)`.
pub const DEFAULT_STATE_BUDGET: usize = 10_000_000;

/// Relative slack on closed-ball membership tests, so that nodes sitting
/// exactly on a sphere are not lost to rounding in `k * h`.
const MEMBERSHIP_SLACK: f64 = 1e-12;

/// Isotropic tensor grid: `m` points per axis on `[a, b]`, `d` axes per
/// particle, `n` particles. Flat indices are row-major with the last axis of
/// the last particle fastest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    d: usize,
    n: usize,
    a: f64,
    b: f64,
    m: usize,
}

impl Grid {
    pub fn new(d: usize, n: usize, a: f64, b: f64, m: usize) -> Result<Self> {
        Self::with_budget(d, n, a, b, m, DEFAULT_STATE_BUDGET)
    }

    pub fn with_budget(d: usize, n: usize, a: f64, b: f64, m: usize, budget: usize) -> Result<Self> {
        if d == 0 {
            return Err(Error::InvalidGrid("spatial dimension must be positive".into()));
        }
        if n == 0 {
            return Err(Error::InvalidGrid("particle count must be positive".into()));
        }
        if m < 2 {
            return Err(Error::InvalidGrid(format!("need at least 2 points per axis, got {m}")));
        }
        if !(a.is_finite() && b.is_finite() && b > a) {
            return Err(Error::InvalidGrid(format!(
                "box [{a}, {b}] must be a finite nonempty interval"
            )));
        }
        let states = (m as u128).checked_pow((d * n) as u32).unwrap_or(u128::MAX);
        if states > budget as u128 {
            return Err(Error::Budget { states, budget });
        }
        Ok(Self { d, n, a, b, m })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn a(&self) -> f64 {
        self.a
    }

    pub fn b(&self) -> f64 {
        self.b
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn h(&self) -> f64 {
        (self.b - self.a) / (self.m - 1) as f64
    }

    /// Number of axes, `d * n`.
    pub fn axes(&self) -> usize {
        self.d * self.n
    }

    pub fn states(&self) -> usize {
        self.m.pow(self.axes() as u32)
    }

    /// Quadrature weight of one node, `h^(dN)`.
    pub fn cell_volume(&self) -> f64 {
        self.h().powi(self.axes() as i32)
    }

    /// Euclidean diameter of the box in R^(dN).
    pub fn diameter(&self) -> f64 {
        (self.b - self.a) * (self.axes() as f64).sqrt()
    }

    pub fn coord(&self, k: usize) -> f64 {
        self.a + k as f64 * self.h()
    }

    /// Same box and resolution with a different particle count.
    pub fn with_particles(&self, n: usize) -> Result<Grid> {
        Grid::new(self.d, n, self.a, self.b, self.m)
    }

    pub fn one_body(&self) -> Grid {
        Grid { n: 1, ..self.clone() }
    }

    pub fn stride(&self, axis: usize) -> usize {
        self.m.pow((self.axes() - 1 - axis) as u32)
    }

    pub fn unravel(&self, mut flat: usize, out: &mut [usize]) {
        debug_assert_eq!(out.len(), self.axes());
        for k in out.iter_mut().rev() {
            *k = flat % self.m;
            flat /= self.m;
        }
    }

    pub fn ravel(&self, idx: &[usize]) -> usize {
        idx.iter().fold(0, |acc, &k| acc * self.m + k)
    }

    /// Coordinates in R^(dN) of a node.
    pub fn point(&self, flat: usize) -> Vec<f64> {
        let mut idx = vec![0; self.axes()];
        self.unravel(flat, &mut idx);
        idx.iter().map(|&k| self.coord(k)).collect()
    }

    /// Nearest node to an arbitrary point (clamped to the box).
    pub fn nearest_node(&self, point: &[f64]) -> usize {
        let h = self.h();
        let idx: Vec<usize> = point
            .iter()
            .map(|&x| (((x - self.a) / h).round().max(0.0) as usize).min(self.m - 1))
            .collect();
        self.ravel(&idx)
    }

    pub fn same_space(&self, other: &Grid) -> bool {
        self == other
    }

    pub(crate) fn ensure_same(&self, other: &Grid, what: &str) -> Result<()> {
        if self.same_space(other) {
            Ok(())
        } else {
            Err(Error::GridMismatch(format!("{what}: {self:?} vs {other:?}")))
        }
    }

    /// Visit every node in flat order with its multi-index.
    pub fn for_each_node(&self, mut f: impl FnMut(usize, &[usize])) {
        let axes = self.axes();
        let mut idx = vec![0usize; axes];
        for flat in 0..self.states() {
            f(flat, &idx);
            for ax in (0..axes).rev() {
                idx[ax] += 1;
                if idx[ax] < self.m {
                    break;
                }
                idx[ax] = 0;
            }
        }
    }
}

/// A real field on a grid. Densities wrap this; intermediate objects such as
/// `eta * P` are plain fields.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    grid: Grid,
    values: Vec<f64>,
}

impl Field {
    pub fn new(grid: Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.states() {
            return Err(Error::GridMismatch(format!(
                "{} values for a grid with {} states",
                values.len(),
                grid.states()
            )));
        }
        Ok(Self { grid, values })
    }

    pub fn zeros(grid: Grid) -> Self {
        let values = vec![0.0; grid.states()];
        Self { grid, values }
    }

    pub fn from_fn(grid: Grid, mut f: impl FnMut(&[f64]) -> f64) -> Self {
        let mut values = Vec::with_capacity(grid.states());
        let mut x = vec![0.0; grid.axes()];
        grid.for_each_node(|_, idx| {
            for (xi, &k) in x.iter_mut().zip(idx) {
                *xi = grid.coord(k);
            }
            values.push(f(&x));
        });
        Self { grid, values }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn integral(&self) -> f64 {
        sum::sum(self.values.iter().copied()) * self.grid.cell_volume()
    }

    pub fn scaled(&self, factor: f64) -> Field {
        Field {
            grid: self.grid.clone(),
            values: self.values.iter().map(|v| v * factor).collect(),
        }
    }

    /// Nodewise product with another field on the same grid.
    pub fn product(&self, other: &Field) -> Result<Field> {
        self.grid.ensure_same(&other.grid, "field product")?;
        Ok(Field {
            grid: self.grid.clone(),
            values: self.values.iter().zip(&other.values).map(|(a, b)| a * b).collect(),
        })
    }

    pub fn check_nonnegative(&self) -> Result<()> {
        match self.values.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
            Some(index) => Err(Error::Negative {
                index,
                value: self.values[index],
            }),
            None => Ok(()),
        }
    }
}

/// Joint probability density on grid^(dN).
#[derive(Debug, Clone, PartialEq)]
pub struct NBodyDensity {
    field: Field,
    symmetric: bool,
}

impl NBodyDensity {
    pub const NORMALIZATION_TOL: f64 = 1e-10;

    /// Validates nonnegativity and unit mass.
    pub fn new(field: Field) -> Result<Self> {
        field.check_nonnegative()?;
        let integral = field.integral();
        if (integral - 1.0).abs() > Self::NORMALIZATION_TOL {
            return Err(Error::Normalization {
                integral,
                tol: Self::NORMALIZATION_TOL,
            });
        }
        Ok(Self {
            field,
            symmetric: false,
        })
    }

    pub fn from_unnormalized(mut field: Field) -> Result<Self> {
        field.check_nonnegative()?;
        let integral = field.integral();
        if !(integral > 0.0) {
            return Err(Error::Degenerate("field has zero mass".into()));
        }
        for v in field.values_mut() {
            *v /= integral;
        }
        Self::new(field)
    }

    /// Tensor product `mu_1 (x) ... (x) mu_N`.
    pub fn product(factors: &[&OneBodyDensity]) -> Result<Self> {
        let first = factors
            .first()
            .ok_or_else(|| Error::Constraint("product of zero factors".into()))?;
        for f in factors {
            first.grid().ensure_same(f.grid(), "product factors")?;
        }
        let grid = first.grid().with_particles(factors.len())?;
        let d = grid.d();
        let one = first.grid().clone();
        let mut values = Vec::with_capacity(grid.states());
        grid.for_each_node(|_, idx| {
            let mut v = 1.0;
            for (p, f) in factors.iter().enumerate() {
                v *= f.values()[one.ravel(&idx[p * d..(p + 1) * d])];
            }
            values.push(v);
        });
        let mut out = Self::new(Field::new(grid, values)?)?;
        out.symmetric = factors.iter().all(|f| f.values() == first.values());
        Ok(out)
    }

    /// `mu^(x)N`, the product coupling.
    pub fn product_coupling(mu: &OneBodyDensity, n: usize) -> Result<Self> {
        let factors = vec![mu; n];
        Self::product(&factors)
    }

    pub fn field(&self) -> &Field {
        &self.field
    }

    pub fn into_field(self) -> Field {
        self.field
    }

    /// Whether the density was constructed or certified as invariant under
    /// particle permutations.
    pub fn symmetric_flag(&self) -> bool {
        self.symmetric
    }

    /// Average over all particle permutations. Marginals stay in Pi_N(mu) when
    /// all one-body marginals agree.
    pub fn symmetrized(&self) -> NBodyDensity {
        let values = symmetrize_values(self.grid(), self.values());
        NBodyDensity {
            field: Field {
                grid: self.grid().clone(),
                values,
            },
            symmetric: true,
        }
    }

    /// Mark as symmetric after checking `samples` random index tuples.
    pub fn certify_symmetric(mut self, samples: usize, seed: u64) -> Result<Self> {
        if !self.verify_symmetry(samples, seed) {
            return Err(Error::Constraint("density is not permutation invariant".into()));
        }
        self.symmetric = true;
        Ok(self)
    }

    /// Sample random nodes and random block permutations; compare values to
    /// 1e-12 relative.
    pub fn verify_symmetry(&self, samples: usize, seed: u64) -> bool {
        let grid = self.grid();
        let (d, n, axes) = (grid.d(), grid.n(), grid.axes());
        if n == 1 {
            return true;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = vec![0; axes];
        let mut permuted = vec![0; axes];
        let mut perm: Vec<usize> = (0..n).collect();
        for _ in 0..samples.max(100) {
            for k in idx.iter_mut() {
                *k = rng.gen_range(0..grid.m());
            }
            perm.shuffle(&mut rng);
            for (dst, &src) in perm.iter().enumerate() {
                permuted[dst * d..(dst + 1) * d].copy_from_slice(&idx[src * d..(src + 1) * d]);
            }
            let a = self.values()[grid.ravel(&idx)];
            let b = self.values()[grid.ravel(&permuted)];
            if (a - b).abs() > 1e-12 * a.abs().max(b.abs()) {
                return false;
            }
        }
        true
    }

    pub(crate) fn from_parts(field: Field, symmetric: bool) -> Self {
        Self { field, symmetric }
    }
}

impl Deref for NBodyDensity {
    type Target = Field;

    fn deref(&self) -> &Field {
        &self.field
    }
}

pub(crate) fn permutations(n: usize) -> Vec<Vec<usize>> {
    fn rec(prefix: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if prefix.len() == used.len() {
            out.push(prefix.clone());
            return;
        }
        for i in 0..used.len() {
            if !used[i] {
                used[i] = true;
                prefix.push(i);
                rec(prefix, used, out);
                prefix.pop();
                used[i] = false;
            }
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::new(), &mut vec![false; n], &mut out);
    out
}

/// Average of `values` over all particle-block permutations.
pub(crate) fn symmetrize_values(grid: &Grid, values: &[f64]) -> Vec<f64> {
    let (d, n) = (grid.d(), grid.n());
    if n == 1 {
        return values.to_vec();
    }
    let perms = permutations(n);
    let mut permuted = vec![0; grid.axes()];
    let mut out = vec![0.0; values.len()];
    let scale = 1.0 / perms.len() as f64;
    grid.for_each_node(|flat, idx| {
        let mut acc = Compensated::new();
        for perm in &perms {
            for (dst, &src) in perm.iter().enumerate() {
                permuted[dst * d..(dst + 1) * d].copy_from_slice(&idx[src * d..(src + 1) * d]);
            }
            acc.add(values[grid.ravel(&permuted)]);
        }
        out[flat] = acc.value() * scale;
    });
    out
}

/// Normalized one-body density `mu = rho / N` on grid^d.
#[derive(Debug, Clone, PartialEq)]
pub struct OneBodyDensity(Field);

impl OneBodyDensity {
    pub const NORMALIZATION_TOL: f64 = 1e-12;

    pub fn new(field: Field) -> Result<Self> {
        if field.grid().n() != 1 {
            return Err(Error::GridMismatch(
                "one-body density needs a single-particle grid".into(),
            ));
        }
        field.check_nonnegative()?;
        let integral = field.integral();
        if (integral - 1.0).abs() > Self::NORMALIZATION_TOL {
            return Err(Error::Normalization {
                integral,
                tol: Self::NORMALIZATION_TOL,
            });
        }
        Ok(Self(field))
    }

    pub fn from_unnormalized(mut field: Field) -> Result<Self> {
        field.check_nonnegative()?;
        let integral = field.integral();
        if !(integral > 0.0) {
            return Err(Error::Degenerate("one-body field has zero mass".into()));
        }
        for v in field.values_mut() {
            *v /= integral;
        }
        Self::new(field)
    }

    pub fn uniform(grid: &Grid) -> Result<Self> {
        let g = grid.one_body();
        Self::from_unnormalized(Field::from_fn(g, |_| 1.0))
    }

    /// Isotropic Gaussian centered at `center`, truncated to the box.
    pub fn gaussian(grid: &Grid, center: &[f64], sigma: f64) -> Result<Self> {
        if !(sigma > 0.0) {
            return Err(Error::Domain(format!("gaussian width must be positive, got {sigma}")));
        }
        if center.len() != grid.d() {
            return Err(Error::Domain("gaussian center has wrong dimension".into()));
        }
        let g = grid.one_body();
        Self::from_unnormalized(Field::from_fn(g, |x| {
            let r2: f64 = x.iter().zip(center).map(|(a, c)| (a - c) * (a - c)).sum();
            (-r2 / (2.0 * sigma * sigma)).exp()
        }))
    }

    /// Single-particle view as an N=1 joint density.
    pub fn as_nbody(&self) -> NBodyDensity {
        NBodyDensity::from_parts(self.0.clone(), true)
    }

    pub fn field(&self) -> &Field {
        &self.0
    }
}

impl Deref for OneBodyDensity {
    type Target = Field;

    fn deref(&self) -> &Field {
        &self.0
    }
}

/// Nonempty strictly increasing subset of particle indices `{0, .., N-1}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexSet {
    members: Vec<usize>,
}

impl IndexSet {
    pub fn new(members: &[usize], n: usize) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::Constraint("index set must be nonempty".into()));
        }
        if members.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Constraint(format!(
                "index set {members:?} is not strictly increasing"
            )));
        }
        if members.iter().any(|&i| i >= n) {
            return Err(Error::Constraint(format!(
                "index set {members:?} exceeds particle count {n}"
            )));
        }
        Ok(Self {
            members: members.to_vec(),
        })
    }

    pub fn single(i: usize, n: usize) -> Result<Self> {
        Self::new(&[i], n)
    }

    pub fn members(&self) -> &[usize] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// The complementary set, `None` when `self` is everything.
    pub fn complement(&self, n: usize) -> Option<IndexSet> {
        let rest: Vec<usize> = (0..n).filter(|i| !self.members.contains(i)).collect();
        if rest.is_empty() {
            None
        } else {
            Some(IndexSet { members: rest })
        }
    }
}

/// Pushforward of `field` onto the particles in `set`: sum over the other
/// particles' axes times `h^(d |I^c|)`.
pub fn marginal(field: &Field, set: &IndexSet) -> Result<Field> {
    let grid = field.grid();
    let (d, n) = (grid.d(), grid.n());
    if set.members().iter().any(|&i| i >= n) {
        return Err(Error::Constraint(format!(
            "index set {:?} invalid for N = {n}",
            set.members()
        )));
    }
    let out_grid = grid.with_particles(set.len())?;
    let mut weight = vec![0usize; grid.axes()];
    for (pos, &p) in set.members().iter().enumerate() {
        for c in 0..d {
            weight[p * d + c] = out_grid.stride(pos * d + c);
        }
    }
    let mut bins = vec![Compensated::new(); out_grid.states()];
    let values = field.values();
    grid.for_each_node(|flat, idx| {
        let out: usize = idx.iter().zip(&weight).map(|(k, w)| k * w).sum();
        bins[out].add(values[flat]);
    });
    let scale = grid.h().powi((d * (n - set.len())) as i32);
    let values = bins.iter().map(|b| b.value() * scale).collect();
    Field::new(out_grid, values)
}

/// One-body marginal of particle `i` (0-based).
pub fn one_body_marginal(field: &Field, i: usize) -> Result<Field> {
    marginal(field, &IndexSet::single(i, field.grid().n())?)
}

/// Total-variation distance `1/2 * integral |f - g|` of two fields on one grid.
pub fn total_variation(f: &Field, g: &Field) -> Result<f64> {
    f.grid().ensure_same(g.grid(), "total variation")?;
    let s = sum::sum(f.values().iter().zip(g.values()).map(|(a, b)| (a - b).abs()));
    Ok(0.5 * s * f.grid().cell_volume())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalReport {
    /// TV distance of each one-body marginal to mu.
    pub per_particle: Vec<f64>,
    pub residual: f64,
    pub tol: f64,
    pub pass: bool,
}

/// Distance of `p` from the coupling set Pi_N(mu): the largest one-body
/// total-variation residual.
pub fn check_in_pi_n(p: &Field, mu: &OneBodyDensity, tol: f64) -> Result<MarginalReport> {
    let grid = p.grid();
    if grid.one_body() != *mu.grid() {
        return Err(Error::GridMismatch(format!(
            "coupling grid {:?} incompatible with marginal grid {:?}",
            grid,
            mu.grid()
        )));
    }
    let per_particle = (0..grid.n())
        .map(|i| total_variation(&one_body_marginal(p, i)?, mu))
        .collect::<Result<Vec<_>>>()?;
    let residual = per_particle.iter().copied().fold(0.0, f64::max);
    Ok(MarginalReport {
        per_particle,
        residual,
        tol,
        pass: residual <= tol,
    })
}

/// Integer offsets of lattice points inside a closed ball, measured in
/// grid units.
#[derive(Debug, Clone)]
pub struct BallStencil {
    axes: usize,
    offsets: Vec<isize>,
    reach: usize,
}

impl BallStencil {
    /// `clamp` limits the reach to `m - 1`, which loses nothing for mass
    /// queries but must be off for erosion (off-grid offsets matter there).
    fn build(grid: &Grid, r: f64, clamp: bool) -> Self {
        let h = grid.h();
        let axes = grid.axes();
        let limit = (r / h) * (1.0 + MEMBERSHIP_SLACK);
        let mut reach = limit.floor() as usize;
        if clamp {
            reach = reach.min(grid.m() - 1);
        }
        let r2 = limit * limit;
        let side = 2 * reach + 1;
        let mut offsets = Vec::new();
        let mut cur = vec![0isize; axes];
        let total = side.pow(axes as u32);
        for mut code in 0..total {
            let mut n2 = 0.0;
            for c in cur.iter_mut().rev() {
                *c = (code % side) as isize - reach as isize;
                code /= side;
                n2 += (*c * *c) as f64;
            }
            if n2 <= r2 {
                offsets.extend_from_slice(&cur);
            }
        }
        Self { axes, offsets, reach }
    }

    pub fn new(grid: &Grid, r: f64) -> Self {
        Self::build(grid, r, true)
    }

    pub fn len(&self) -> usize {
        self.offsets.len() / self.axes
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &[isize]> {
        self.offsets.chunks_exact(self.axes)
    }

    /// Sum of `values` over in-grid nodes of the ball centered at node `idx`.
    pub fn sum_at(&self, grid: &Grid, values: &[f64], idx: &[usize]) -> f64 {
        let m = grid.m() as isize;
        let interior = idx.iter().all(|&k| k >= self.reach && k + self.reach < grid.m());
        let base = grid.ravel(idx) as isize;
        let mut acc = Compensated::new();
        if interior {
            for off in self.iter() {
                let delta: isize = off
                    .iter()
                    .enumerate()
                    .map(|(ax, &o)| o * grid.stride(ax) as isize)
                    .sum();
                acc.add(values[(base + delta) as usize]);
            }
        } else {
            'offs: for off in self.iter() {
                let mut flat = 0isize;
                for (ax, (&k, &o)) in idx.iter().zip(off).enumerate() {
                    let j = k as isize + o;
                    if j < 0 || j >= m {
                        continue 'offs;
                    }
                    flat += j * grid.stride(ax) as isize;
                }
                acc.add(values[flat as usize]);
            }
        }
        acc.value()
    }
}

/// Largest mu-mass of a closed radius-`r` ball centered at a grid node. `mu`
/// is already divided by N, so this is the probability-normalized
/// concentration function.
pub fn kappa(mu: &OneBodyDensity, r: f64) -> Result<f64> {
    if !(r > 0.0) {
        return Err(Error::Domain(format!("kappa radius must be positive, got {r}")));
    }
    let grid = mu.grid();
    let stencil = BallStencil::new(grid, r);
    let mut best = 0.0f64;
    grid.for_each_node(|_, idx| {
        best = best.max(stencil.sum_at(grid, mu.values(), idx));
    });
    Ok(best * grid.cell_volume())
}

/// Mass of `field` in the closed ball `B(center, r)`, for any center in R^(dN).
pub fn ball_mass(field: &Field, center: &[f64], r: f64) -> Result<f64> {
    let grid = field.grid();
    if !(r > 0.0) {
        return Err(Error::Domain(format!("ball radius must be positive, got {r}")));
    }
    if center.len() != grid.axes() {
        return Err(Error::Domain(format!(
            "center has {} coordinates, grid has {} axes",
            center.len(),
            grid.axes()
        )));
    }
    let h = grid.h();
    let m = grid.m() as isize;
    let mut lo = Vec::with_capacity(center.len());
    let mut hi = Vec::with_capacity(center.len());
    for &y in center {
        let l = (((y - grid.a() - r) / h) - 1e-9).ceil() as isize;
        let u = (((y - grid.a() + r) / h) + 1e-9).floor() as isize;
        let (l, u) = (l.max(0), u.min(m - 1));
        if l > u {
            return Ok(0.0);
        }
        lo.push(l as usize);
        hi.push(u as usize);
    }
    let r2 = r * r * (1.0 + MEMBERSHIP_SLACK).powi(2);
    let mut idx = lo.clone();
    let mut acc = Compensated::new();
    loop {
        let d2: f64 = idx
            .iter()
            .zip(center)
            .map(|(&k, &y)| {
                let t = grid.coord(k) - y;
                t * t
            })
            .sum();
        if d2 <= r2 {
            acc.add(field.values()[grid.ravel(&idx)]);
        }
        let mut ax = idx.len();
        loop {
            if ax == 0 {
                return Ok(acc.value() * grid.cell_volume());
            }
            ax -= 1;
            idx[ax] += 1;
            if idx[ax] <= hi[ax] {
                break;
            }
            idx[ax] = lo[ax];
        }
    }
}

/// Smallest pairwise particle distance at a node, in grid units squared.
fn min_pair_dist2_units(d: usize, n: usize, idx: &[usize]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for i in 0..n {
        for j in (i + 1)..n {
            let s: usize = (0..d)
                .map(|c| {
                    let t = idx[i * d + c].abs_diff(idx[j * d + c]);
                    t * t
                })
                .sum();
            best = Some(best.map_or(s, |b| b.min(s)));
        }
    }
    best
}

/// Indicator of the enlarged diagonal `D_alpha`: some pair `i != j` with
/// `|x_i - x_j| <= alpha`.
pub fn diagonal_indicator(grid: &Grid, alpha: f64) -> Vec<bool> {
    let (d, n) = (grid.d(), grid.n());
    let limit = (alpha / grid.h()) * (1.0 + MEMBERSHIP_SLACK);
    let limit2 = limit * limit;
    let mut out = Vec::with_capacity(grid.states());
    grid.for_each_node(|_, idx| {
        out.push(min_pair_dist2_units(d, n, idx).is_some_and(|s| s as f64 <= limit2));
    });
    out
}

/// Mass of `field` on the enlarged diagonal `D_alpha`.
pub fn diagonal_mass(field: &Field, alpha: f64) -> Result<f64> {
    if !(alpha > 0.0) {
        return Err(Error::Domain(format!("alpha must be positive, got {alpha}")));
    }
    let inside = diagonal_indicator(field.grid(), alpha);
    let s = sum::sum(field.values().iter().zip(&inside).filter(|(_, &m)| m).map(|(v, _)| *v));
    Ok(s * field.grid().cell_volume())
}

/// Erosion `Omega_{-r}`: nodes whose whole closed r-ball of lattice nodes lies
/// in `omega`. Lattice points outside the box count as outside `omega`.
pub fn erode(grid: &Grid, omega: &[bool], r: f64) -> Result<Vec<bool>> {
    if !(r >= 0.0) {
        return Err(Error::Domain(format!("erosion radius must be nonnegative, got {r}")));
    }
    if omega.len() != grid.states() {
        return Err(Error::GridMismatch("indicator length differs from grid states".into()));
    }
    if (r / grid.h()).floor() as usize >= grid.m() {
        return Ok(vec![false; grid.states()]);
    }
    let stencil = BallStencil::build(grid, r, false);
    let m = grid.m() as isize;
    let mut out = vec![false; grid.states()];
    grid.for_each_node(|flat, idx| {
        if !omega[flat] {
            return;
        }
        out[flat] = stencil.iter().all(|off| {
            let mut nb = 0isize;
            for (ax, (&k, &o)) in idx.iter().zip(off).enumerate() {
                let j = k as isize + o;
                if j < 0 || j >= m {
                    return false;
                }
                nb += j * grid.stride(ax) as isize;
            }
            omega[nb as usize]
        });
    });
    Ok(out)
}

/// Erosion of a set given by a predicate on R^(dN). Lattice points in the ball
/// are tested with the predicate even when they fall outside the box.
pub fn erode_where(grid: &Grid, r: f64, inside: impl Fn(&[f64]) -> bool) -> Result<Vec<bool>> {
    if !(r >= 0.0) {
        return Err(Error::Domain(format!("erosion radius must be nonnegative, got {r}")));
    }
    let stencil = BallStencil::build(grid, r, false);
    let h = grid.h();
    let mut out = vec![false; grid.states()];
    let mut x = vec![0.0; grid.axes()];
    grid.for_each_node(|flat, idx| {
        out[flat] = stencil.iter().all(|off| {
            for (xi, (&k, &o)) in x.iter_mut().zip(idx.iter().zip(off)) {
                *xi = grid.a() + (k as isize + o) as f64 * h;
            }
            inside(&x)
        });
    });
    Ok(out)
}

/// Mass of `field` on the nodes flagged by `set`.
pub fn mass_on(field: &Field, set: &[bool]) -> f64 {
    sum::sum(field.values().iter().zip(set).filter(|(_, &s)| s).map(|(v, _)| *v)) * field.grid().cell_volume()
}

/// Random strictly positive density with i.i.d. uniform node weights.
pub fn random_density(grid: &Grid, rng: &mut impl Rng) -> NBodyDensity {
    let values = (0..grid.states()).map(|_| rng.gen_range(0.05..1.0)).collect();
    let field = Field {
        grid: grid.clone(),
        values,
    };
    NBodyDensity::from_unnormalized(field).expect("positive random field normalizes")
}

/// Serialize in the `llgrid v1` text format: a header line
/// `llgrid v1 d N M a b` followed by one value per line, row-major.
pub fn write_density_text(field: &Field) -> String {
    let g = field.grid();
    let mut out = String::with_capacity(24 * field.values().len() + 64);
    let _ = writeln!(out, "llgrid v1 {} {} {} {} {}", g.d(), g.n(), g.m(), g.a(), g.b());
    for v in field.values() {
        let _ = writeln!(out, "{v:e}");
    }
    out
}

/// Lines starting with `#` are ignored.
pub fn parse_density_text(text: &str) -> Result<NBodyDensity> {
    let mut tokens = text
        .lines()
        .filter(|l| !l.trim_start().starts_with('#'))
        .flat_map(str::split_whitespace);
    let mut next = |what: &str| tokens.next().ok_or_else(|| Error::Parse(format!("missing {what}")));
    if next("magic")? != "llgrid" || next("version")? != "v1" {
        return Err(Error::Parse("expected header `llgrid v1 d N M a b`".into()));
    }
    fn num<T: std::str::FromStr>(s: &str, what: &str) -> Result<T> {
        s.parse().map_err(|_| Error::Parse(format!("bad {what}: {s:?}")))
    }
    let d: usize = num(next("d")?, "d")?;
    let n: usize = num(next("N")?, "N")?;
    let m: usize = num(next("M")?, "M")?;
    let a: f64 = num(next("a")?, "a")?;
    let b: f64 = num(next("b")?, "b")?;
    let grid = Grid::new(d, n, a, b, m)?;
    let values = tokens.map(|t| num::<f64>(t, "value")).collect::<Result<Vec<_>>>()?;
    if values.len() != grid.states() {
        return Err(Error::Parse(format!(
            "expected {} values, found {}",
            grid.states(),
            values.len()
        )));
    }
    NBodyDensity::new(Field::new(grid, values)?)
}

pub fn read_density(path: &Path) -> Result<NBodyDensity> {
    parse_density_text(&std::fs::read_to_string(path)?)
}
