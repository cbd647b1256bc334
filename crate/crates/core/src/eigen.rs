//! Lowest eigenpair of `H = kappa * L + diag(w)` on the N-body grid, where `L`
//! is the Neumann graph Laplacian (`x^T L x = sum over forward edges of
//! (x' - x)^2`).
//!
//! Single-vector LOBPCG with a separable DCT preconditioner. When the
//! diagonal is permutation invariant the iteration can be restricted to the
//! symmetric subspace, which removes the nearly degenerate antisymmetric
//! partner of the ground state (its splitting shrinks exponentially as the
//! particles separate).

use nalgebra::{Matrix3, SymmetricEigen};

use crate::error::{Error, Result};
use crate::grid::{symmetrize_values, Grid};
use crate::sum::dot;

/// `out = kappa * L x`.
pub fn laplacian_apply(grid: &Grid, kappa: f64, x: &[f64], out: &mut [f64]) {
    out.iter_mut().for_each(|o| *o = 0.0);
    let m = grid.m();
    for ax in 0..grid.axes() {
        let s = grid.stride(ax);
        for i in 0..x.len() {
            if (i / s) % m + 1 < m {
                let j = i + s;
                let diff = kappa * (x[i] - x[j]);
                out[i] += diff;
                out[j] -= diff;
            }
        }
    }
}

pub struct Hamiltonian<'a> {
    grid: &'a Grid,
    kappa: f64,
    diag: Vec<f64>,
}

impl<'a> Hamiltonian<'a> {
    pub fn new(grid: &'a Grid, kappa: f64, diag: Vec<f64>) -> Result<Self> {
        if diag.len() != grid.states() {
            return Err(Error::GridMismatch("potential length differs from state count".into()));
        }
        if let Some(i) = diag.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("non-finite potential at flat index {i}")));
        }
        if !(kappa >= 0.0) {
            return Err(Error::Domain(format!(
                "kinetic weight must be nonnegative, got {kappa}"
            )));
        }
        Ok(Self { grid, kappa, diag })
    }

    pub fn grid(&self) -> &Grid {
        self.grid
    }

    pub fn diag(&self) -> &[f64] {
        &self.diag
    }

    pub fn apply(&self, x: &[f64], out: &mut [f64]) {
        laplacian_apply(self.grid, self.kappa, x, out);
        for ((o, &xi), &w) in out.iter_mut().zip(x).zip(&self.diag) {
            *o += w * xi;
        }
    }

    /// Rayleigh quotient numerator `x^T H x` for an arbitrary vector.
    pub fn quadratic_form(&self, x: &[f64]) -> f64 {
        let mut hx = vec![0.0; x.len()];
        self.apply(x, &mut hx);
        dot(x, &hx)
    }

    /// Gershgorin-type bound on the spectral radius.
    fn norm_bound(&self) -> f64 {
        let lap = 4.0 * self.kappa * self.grid.axes() as f64;
        lap + self.diag.iter().fold(0.0f64, |a, &b| a.max(b.abs()))
    }
}

/// `(kappa L + shift)^{-1}` applied through the cosine basis of the path graph
/// along every axis.
struct DctPreconditioner {
    m: usize,
    basis: Vec<f64>,
    denom: Vec<f64>,
}

impl DctPreconditioner {
    fn new(grid: &Grid, kappa: f64, shift: f64) -> Self {
        let m = grid.m();
        let mut basis = vec![0.0; m * m];
        let mut eig = vec![0.0; m];
        for k in 0..m {
            let s = if k == 0 {
                (1.0 / m as f64).sqrt()
            } else {
                (2.0 / m as f64).sqrt()
            };
            for j in 0..m {
                basis[k * m + j] = s * (std::f64::consts::PI * k as f64 * (j as f64 + 0.5) / m as f64).cos();
            }
            eig[k] = 4.0 * (std::f64::consts::PI * k as f64 / (2.0 * m as f64)).sin().powi(2);
        }
        let mut denom = vec![0.0; grid.states()];
        grid.for_each_node(|flat, idx| {
            denom[flat] = 1.0 / (kappa * idx.iter().map(|&k| eig[k]).sum::<f64>() + shift);
        });
        Self { m, basis, denom }
    }

    fn transform(&self, v: &mut [f64], axes: usize, inverse: bool) {
        let m = self.m;
        let mut line = vec![0.0; m];
        let mut out = vec![0.0; m];
        for ax in 0..axes {
            let stride = m.pow((axes - 1 - ax) as u32);
            let block = stride * m;
            for start in (0..v.len()).step_by(block) {
                for off in 0..stride {
                    let base = start + off;
                    for j in 0..m {
                        line[j] = v[base + j * stride];
                    }
                    for k in 0..m {
                        let mut acc = 0.0;
                        if inverse {
                            for j in 0..m {
                                acc += self.basis[j * m + k] * line[j];
                            }
                        } else {
                            let row = &self.basis[k * m..(k + 1) * m];
                            for j in 0..m {
                                acc += row[j] * line[j];
                            }
                        }
                        out[k] = acc;
                    }
                    for k in 0..m {
                        v[base + k * stride] = out[k];
                    }
                }
            }
        }
    }

    fn apply(&self, v: &mut [f64], axes: usize) {
        self.transform(v, axes, false);
        for (x, d) in v.iter_mut().zip(&self.denom) {
            *x *= d;
        }
        self.transform(v, axes, true);
    }
}

/// Cholesky factor of `kappa L + diag(w) - shift` in band storage. The band
/// half-width is the largest grid stride, so fill stays inside the band.
pub struct BandedCholesky {
    n: usize,
    b: usize,
    /// Row `i` holds columns `i - b ..= i` (entries left of column 0 unused).
    rows: Vec<f64>,
    shift: f64,
}

/// Largest band storage (in entries) that [`BandedCholesky::factor`] accepts.
pub const BANDED_LIMIT: usize = 8_000_000;

impl BandedCholesky {
    /// Whether a factorization of this grid fits the storage limit.
    pub fn fits(grid: &Grid) -> bool {
        let b = grid.stride(0);
        grid.states().saturating_mul(b + 1) <= BANDED_LIMIT
    }

    /// Factor `H - shift`. Fails with `Degenerate` unless the shifted operator
    /// is positive definite, i.e. unless `shift < lambda_min(H)`.
    pub fn factor(h: &Hamiltonian, shift: f64) -> Result<Self> {
        let grid = h.grid();
        let n = grid.states();
        let b = grid.stride(0);
        if !Self::fits(grid) {
            return Err(Error::Budget {
                states: (n as u128) * (b as u128 + 1),
                budget: BANDED_LIMIT,
            });
        }
        let w = b + 1;
        let m = grid.m();
        let mut rows = vec![0.0; n * w];
        // Assemble the lower band: diagonal and the -kappa couplings to i - s.
        for i in 0..n {
            let mut deg = 0.0;
            for ax in 0..grid.axes() {
                let s = grid.stride(ax);
                let k = (i / s) % m;
                if k + 1 < m {
                    deg += 1.0;
                }
                if k > 0 {
                    deg += 1.0;
                    rows[i * w + b - s] = -h.kappa;
                }
            }
            rows[i * w + b] = h.kappa * deg + h.diag[i] - shift;
        }
        for i in 0..n {
            let lo = i.saturating_sub(b);
            for j in lo..=i {
                let klo = lo.max(j.saturating_sub(b));
                let mut acc = rows[i * w + b + j - i];
                let ri = &rows[i * w + b + klo - i..i * w + b + j - i];
                let rj = &rows[j * w + b + klo - j..j * w + b];
                for (a, c) in ri.iter().zip(rj) {
                    acc -= a * c;
                }
                if j == i {
                    if !(acc > 0.0) {
                        return Err(Error::Degenerate(format!(
                            "shifted operator not positive definite at row {i}"
                        )));
                    }
                    rows[i * w + b] = acc.sqrt();
                } else {
                    rows[i * w + b + j - i] = acc / rows[j * w + b];
                }
            }
        }
        Ok(Self { n, b, rows, shift })
    }

    pub fn shift(&self) -> f64 {
        self.shift
    }

    /// Solve `(H - shift) x = v` in place.
    pub fn solve(&self, v: &mut [f64]) {
        let (n, b, w) = (self.n, self.b, self.b + 1);
        for i in 0..n {
            let lo = i.saturating_sub(b);
            let row = &self.rows[i * w + b + lo - i..i * w + b];
            let mut acc = v[i];
            for (a, x) in row.iter().zip(&v[lo..i]) {
                acc -= a * x;
            }
            v[i] = acc / self.rows[i * w + b];
        }
        for i in (0..n).rev() {
            v[i] /= self.rows[i * w + b];
            let lo = i.saturating_sub(b);
            let xi = v[i];
            let row = &self.rows[i * w + b + lo - i..i * w + b];
            for (a, x) in row.iter().zip(&mut v[lo..i]) {
                *x -= a * xi;
            }
        }
    }
}

/// Projection onto permutation-symmetric functions.
pub(crate) struct Symmetrizer {
    maps: Option<Vec<Vec<u32>>>,
    grid: Grid,
}

const SYMMETRIZER_TABLE_LIMIT: usize = 50_000_000;

impl Symmetrizer {
    pub(crate) fn new(grid: &Grid) -> Self {
        let n = grid.n();
        let perms: usize = (1..=n).product();
        if n == 1 || grid.states().saturating_mul(perms) > SYMMETRIZER_TABLE_LIMIT || grid.states() > u32::MAX as usize
        {
            return Self {
                maps: None,
                grid: grid.clone(),
            };
        }
        let d = grid.d();
        let mut maps = Vec::new();
        let mut permuted = vec![0; grid.axes()];
        for perm in crate::grid::permutations(n).into_iter().skip(1) {
            let mut map = vec![0u32; grid.states()];
            grid.for_each_node(|flat, idx| {
                for (dst, &src) in perm.iter().enumerate() {
                    permuted[dst * d..(dst + 1) * d].copy_from_slice(&idx[src * d..(src + 1) * d]);
                }
                map[flat] = grid.ravel(&permuted) as u32;
            });
            maps.push(map);
        }
        Self {
            maps: Some(maps),
            grid: grid.clone(),
        }
    }

    pub(crate) fn apply(&self, v: &mut [f64]) {
        if self.grid.n() == 1 {
            return;
        }
        match &self.maps {
            Some(maps) => {
                let scale = 1.0 / (maps.len() + 1) as f64;
                let src = v.to_vec();
                for (i, x) in v.iter_mut().enumerate() {
                    let mut acc = src[i];
                    for map in maps {
                        acc += src[map[i] as usize];
                    }
                    *x = acc * scale;
                }
            }
            None => {
                let out = symmetrize_values(&self.grid, v);
                v.copy_from_slice(&out);
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EigenOptions {
    /// Stop when `|H x - lambda x| <= tol * ||H||`.
    pub tol: f64,
    pub max_iters: usize,
    pub symmetric: bool,
    pub precondition: bool,
}

impl Default for EigenOptions {
    fn default() -> Self {
        Self {
            tol: 1e-11,
            max_iters: 5000,
            symmetric: true,
            precondition: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EigenPair {
    pub value: f64,
    /// Unit vector with nonnegative sum.
    pub vector: Vec<f64>,
    /// Absolute residual norm `|H x - value x|`.
    pub residual: f64,
    pub iterations: usize,
}

impl EigenPair {
    /// Lower bound on the eigenvalue nearest the Rayleigh quotient.
    pub fn lower_bound(&self) -> f64 {
        self.value - self.residual
    }
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Orthogonalize `(v, hv)` against orthonormal `(b, hb)` pairs, twice.
fn orthogonalize(v: &mut [f64], hv: &mut [f64], against: &[(&[f64], &[f64])]) {
    for _ in 0..2 {
        for (b, hb) in against {
            let c = dot(b, v);
            axpy(-c, b, v);
            axpy(-c, hb, hv);
        }
    }
}

/// Lowest eigenpair of `h`, optionally warm started.
pub fn ground_state(h: &Hamiltonian, start: Option<&[f64]>, opts: &EigenOptions) -> Result<EigenPair> {
    let sym = if opts.symmetric {
        Some(Symmetrizer::new(h.grid()))
    } else {
        None
    };
    ground_state_with(h, start, opts, sym.as_ref(), None)
}

/// As [`ground_state`] with a prebuilt symmetrizer and an optional
/// shift-invert preconditioner, which replaces the DCT one when given.
pub(crate) fn ground_state_with(
    h: &Hamiltonian,
    start: Option<&[f64]>,
    opts: &EigenOptions,
    sym: Option<&Symmetrizer>,
    chol: Option<&BandedCholesky>,
) -> Result<EigenPair> {
    let grid = h.grid();
    let n = grid.states();
    let mut x = match start {
        Some(s) if s.len() == n => s.to_vec(),
        _ => vec![1.0; n],
    };
    if let Some(s) = sym {
        s.apply(&mut x);
    }
    if normalize(&mut x) == 0.0 {
        x = vec![1.0; n];
        normalize(&mut x);
    }
    let scale = h.norm_bound().max(f64::MIN_POSITIVE);
    let mut hx = vec![0.0; n];
    h.apply(&x, &mut hx);
    let mut lambda = dot(&x, &hx);

    let precond = if opts.precondition && n > 1 && chol.is_none() {
        let mean = h.diag().iter().sum::<f64>() / n as f64;
        let shift = (mean - lambda).max(1e-3 * scale);
        Some(DctPreconditioner::new(grid, h.kappa, shift))
    } else {
        None
    };

    let mut p: Option<(Vec<f64>, Vec<f64>)> = None;
    let mut r = vec![0.0; n];
    let mut w = vec![0.0; n];
    let mut hw = vec![0.0; n];
    let mut best_res = f64::INFINITY;
    let mut since_best = 0usize;
    for it in 0..opts.max_iters {
        for i in 0..n {
            r[i] = hx[i] - lambda * x[i];
        }
        let mut rn = dot(&r, &r).sqrt();
        if rn <= opts.tol * scale {
            // Confirm against an exact product before accepting.
            h.apply(&x, &mut hx);
            lambda = dot(&x, &hx);
            for i in 0..n {
                r[i] = hx[i] - lambda * x[i];
            }
            rn = dot(&r, &r).sqrt();
            if rn <= opts.tol * scale {
                if x.iter().sum::<f64>() < 0.0 {
                    x.iter_mut().for_each(|v| *v = -*v);
                }
                return Ok(EigenPair {
                    value: lambda,
                    vector: x,
                    residual: rn,
                    iterations: it,
                });
            }
        }
        if rn < 0.5 * best_res {
            best_res = rn;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best > 500 {
                return Err(Error::EigenStagnation {
                    iterations: it,
                    residual: rn / scale,
                });
            }
        }

        w.copy_from_slice(&r);
        if let Some(t) = &precond {
            t.apply(&mut w, grid.axes());
        }
        if let Some(c) = chol {
            c.solve(&mut w);
        }
        if let Some(s) = sym {
            s.apply(&mut w);
        }
        // hw is not yet known; orthogonalize w, then apply H.
        for _ in 0..2 {
            let c = dot(&x, &w);
            axpy(-c, &x, &mut w);
            if let Some((pv, _)) = &p {
                let c = dot(pv, &w);
                axpy(-c, pv, &mut w);
            }
        }
        let wn = normalize(&mut w);
        let have_w = wn > 0.0 && w.iter().all(|v| v.is_finite());
        if have_w {
            h.apply(&w, &mut hw);
        }

        let mut basis: Vec<(&[f64], &[f64])> = vec![(&x, &hx)];
        if have_w {
            basis.push((&w, &hw));
        }
        let pk = p.as_ref().map(|(pv, hp)| (pv.as_slice(), hp.as_slice()));
        if let Some(pk) = pk {
            basis.push(pk);
        }
        let k = basis.len();
        let mut a = Matrix3::<f64>::zeros();
        for i in 0..k {
            for j in i..k {
                let v = 0.5 * (dot(basis[i].0, basis[j].1) + dot(basis[j].0, basis[i].1));
                a[(i, j)] = v;
                a[(j, i)] = v;
            }
        }
        if k == 1 {
            break;
        }
        let eig = SymmetricEigen::new(a.view((0, 0), (k, k)).into_owned());
        let c = eig.eigenvectors.column(eig.eigenvalues.imin()).into_owned();
        let mut new_p = vec![0.0; n];
        let mut new_hp = vec![0.0; n];
        for (idx, (b, hb)) in basis.iter().enumerate().skip(1) {
            axpy(c[idx], b, &mut new_p);
            axpy(c[idx], hb, &mut new_hp);
        }
        for i in 0..n {
            x[i] = c[0] * x[i] + new_p[i];
            hx[i] = c[0] * hx[i] + new_hp[i];
        }
        let xn = normalize(&mut x);
        hx.iter_mut().for_each(|v| *v /= xn);
        if it % 25 == 24 {
            h.apply(&x, &mut hx);
        }
        lambda = dot(&x, &hx);

        // Keep the search direction orthonormal to the new iterate.
        orthogonalize(&mut new_p, &mut new_hp, &[(&x, &hx)]);
        let pn = normalize(&mut new_p);
        if pn > 1e-300 {
            new_hp.iter_mut().for_each(|v| *v /= pn);
            p = Some((new_p, new_hp));
        } else {
            p = None;
        }
    }
    let rn = {
        h.apply(&x, &mut hx);
        let lam = dot(&x, &hx);
        (0..n).map(|i| (hx[i] - lam * x[i]).powi(2)).sum::<f64>().sqrt()
    };
    Err(Error::EigenStagnation {
        iterations: opts.max_iters,
        residual: rn / scale,
    })
}
