//! Minimization of `eps * E_kin(P) + v_ee(P)` over the couplings `Pi_N(mu)`.
//!
//! The default method works on the dual. For a one-body potential `u` let
//!
//! ```text
//! D(u) = lambda_min(kappa L + v_ee - sum_i u(x_i)) + N * sum_x u(x) mu(x) h^d,
//! kappa = 4 eps / h^2,
//! ```
//!
//! which is a concave lower bound on the primal minimum (weak duality). `D` is
//! maximized by L-BFGS; its gradient is `h^d (N mu - sum_i rho_i)` where
//! `rho_i` are the marginals of the squared ground state. Each dual iterate
//! also yields a primal candidate: the squared ground state, repaired onto
//! `Pi_N(mu)` by iterative proportional fitting. The primal iterate moves
//! toward the candidate by an exact line search along the segment, so primal
//! energies never increase and iterates stay feasible.
//!
//! A projected-gradient method on `P` is available as an independent check.

use std::cell::RefCell;
use std::collections::VecDeque;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cost::CostSpec;
use crate::eigen::{ground_state_with, laplacian_apply, BandedCholesky, EigenOptions, Hamiltonian, Symmetrizer};
use crate::error::{Error, Result};
use crate::functionals::{fisher_values, levy_lieb_energy, EnergyBreakdown};
use crate::grid::{check_in_pi_n, Field, Grid, NBodyDensity, OneBodyDensity};
use crate::sum::{dot, Compensated};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRule {
    pub initial: f64,
    pub shrink: f64,
    pub sufficient_decrease: f64,
    pub max_backtracks: usize,
}

impl Default for StepRule {
    fn default() -> Self {
        Self {
            initial: 1.0,
            shrink: 0.5,
            sufficient_decrease: 1e-4,
            max_backtracks: 40,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolverMethod {
    DualAscent,
    ProjectedGradient,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub particles: usize,
    pub eps: f64,
    pub max_outer_iters: usize,
    pub step_rule: StepRule,
    pub tol_marginal: f64,
    pub tol_energy: f64,
    /// Relative duality gap accepted as converged.
    pub tol_gap: f64,
    pub symmetrize_each_iter: bool,
    pub seed: u64,
    pub method: SolverMethod,
    /// Relative residual target for ground-state solves.
    pub eigen_tol: f64,
}

impl SolverConfig {
    pub fn new(particles: usize, eps: f64) -> Self {
        Self {
            particles,
            eps,
            max_outer_iters: Self::default_max_outer_iters(eps),
            step_rule: StepRule::default(),
            tol_marginal: 1e-8,
            tol_energy: 1e-10,
            tol_gap: 1e-9,
            symmetrize_each_iter: true,
            seed: 0,
            method: SolverMethod::DualAscent,
            eigen_tol: 1e-11,
        }
    }

    /// `100 * ceil(1 / sqrt(eps))`.
    pub fn default_max_outer_iters(eps: f64) -> usize {
        if eps > 0.0 {
            100 * (1.0 / eps.sqrt()).ceil().max(1.0) as usize
        } else {
            100
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.particles == 0 {
            return Err(Error::Domain("particle count must be positive".into()));
        }
        if !(self.eps > 0.0) || !self.eps.is_finite() {
            return Err(Error::Domain(format!("eps must be positive, got {}", self.eps)));
        }
        for (name, v) in [
            ("tol_marginal", self.tol_marginal),
            ("tol_energy", self.tol_energy),
            ("tol_gap", self.tol_gap),
            ("eigen_tol", self.eigen_tol),
            ("step_rule.initial", self.step_rule.initial),
            ("step_rule.sufficient_decrease", self.step_rule.sufficient_decrease),
        ] {
            if !(v > 0.0) {
                return Err(Error::Domain(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.step_rule.shrink > 0.0 && self.step_rule.shrink < 1.0) {
            return Err(Error::Domain(format!(
                "step_rule.shrink must lie in (0, 1), got {}",
                self.step_rule.shrink
            )));
        }
        Ok(())
    }
}

/// Lagrange multiplier of the marginal constraint, a function on grid^d.
#[derive(Debug, Clone, PartialEq)]
pub struct OneBodyPotential {
    grid: Grid,
    values: Vec<f64>,
}

impl OneBodyPotential {
    pub fn new(grid: &Grid, values: Vec<f64>) -> Result<Self> {
        let grid = grid.one_body();
        if values.len() != grid.states() {
            return Err(Error::GridMismatch(format!(
                "potential has {} values, grid needs {}",
                values.len(),
                grid.states()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("potential is not finite at index {i}")));
        }
        Ok(Self { grid, values })
    }

    pub fn zeros(grid: &Grid) -> Self {
        let grid = grid.one_body();
        let values = vec![0.0; grid.states()];
        Self { grid, values }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolveReport {
    pub energy: EnergyBreakdown,
    pub marginal_residual: f64,
    pub iterations: usize,
    pub dual_lower_bound: Option<f64>,
    pub duality_gap: Option<f64>,
    pub wall_time: f64,
    pub converged: bool,
    pub method: SolverMethod,
    /// Primal energy after every outer iteration, starting with the initial
    /// coupling.
    pub energy_trace: Vec<f64>,
    #[serde(skip)]
    pub potential: Option<OneBodyPotential>,
}

/// Starting point for a resumed solve.
#[derive(Debug, Clone)]
pub struct SolveStart {
    pub density: Option<NBodyDensity>,
    pub potential: Option<OneBodyPotential>,
}

/// Precomputed pieces of one problem instance.
struct Problem {
    grid: Grid,
    mu: Vec<f64>,
    v: Vec<f64>,
    kappa: f64,
    n: usize,
    /// `M^d`, the number of one-body cells.
    cells: usize,
    cell: f64,
    hd: f64,
    sym: Option<Symmetrizer>,
    /// Shift-invert preconditioner from a recent potential, refreshed when
    /// eigen solves slow down.
    chol: RefCell<Option<BandedCholesky>>,
}

impl Problem {
    fn new(mu: &OneBodyDensity, cost: &CostSpec, n: usize, eps: f64, symmetric: bool) -> Result<Self> {
        let grid = mu.grid().with_particles(n)?;
        let v = cost.pair_potential(&grid);
        let h = grid.h();
        let hd = mu.grid().cell_volume();
        let cells = mu.grid().states();
        let mut p = Self {
            kappa: 4.0 * eps / (h * h),
            cell: grid.cell_volume(),
            sym: if symmetric && n > 1 {
                Some(Symmetrizer::new(&grid))
            } else {
                None
            },
            grid,
            mu: mu.values().to_vec(),
            v,
            n,
            cells,
            hd,
            chol: RefCell::new(None),
        };
        if p.v.iter().any(|x| x.is_infinite()) {
            let prod = p.product();
            let mass: f64 = prod
                .iter()
                .zip(&p.v)
                .filter(|(_, v)| v.is_infinite())
                .map(|(w, _)| w)
                .sum::<f64>()
                * p.cell;
            return Err(Error::CoincidenceCap { mass });
        }
        if n == 1 {
            p.v.iter_mut().for_each(|x| *x = 0.0);
        }
        Ok(p)
    }

    #[inline]
    fn cell_of(&self, flat: usize, i: usize) -> usize {
        (flat / self.cells.pow((self.n - 1 - i) as u32)) % self.cells
    }

    fn product(&self) -> Vec<f64> {
        (0..self.grid.states())
            .map(|k| (0..self.n).map(|i| self.mu[self.cell_of(k, i)]).product())
            .collect()
    }

    /// One-body marginal densities of all particles.
    fn marginals(&self, p: &[f64]) -> Vec<Vec<f64>> {
        let mut out = vec![vec![0.0; self.cells]; self.n];
        let scale = self.cell / self.hd;
        for (k, &w) in p.iter().enumerate() {
            for (i, m) in out.iter_mut().enumerate() {
                m[self.cell_of(k, i)] += w;
            }
        }
        out.iter_mut().for_each(|m| m.iter_mut().for_each(|x| *x *= scale));
        out
    }

    fn residual(&self, p: &[f64]) -> f64 {
        self.marginals(p)
            .iter()
            .map(|m| 0.5 * self.hd * m.iter().zip(&self.mu).map(|(a, b)| (a - b).abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    fn energy(&self, eps: f64, p: &[f64]) -> f64 {
        let kin = fisher_values(&self.grid, p);
        let mut acc = Compensated::new();
        for (w, v) in p.iter().zip(&self.v) {
            acc.add(w * v);
        }
        eps * kin + acc.value() * self.cell
    }

    fn symmetrize(&self, p: &mut [f64]) {
        if let Some(s) = &self.sym {
            s.apply(p);
        }
    }

    /// Cyclic axis rescaling onto the marginal constraints.
    fn ipfp(&self, p: &mut [f64], tol: f64) -> f64 {
        let mut res = self.residual(p);
        for _ in 0..20_000 {
            if res <= tol {
                break;
            }
            for i in 0..self.n {
                let rho = &self.marginals(p)[i];
                let factor: Vec<f64> = rho
                    .iter()
                    .zip(&self.mu)
                    .map(|(&r, &m)| if r > 0.0 { m / r } else { 0.0 })
                    .collect();
                for (k, w) in p.iter_mut().enumerate() {
                    *w *= factor[self.cell_of(k, i)];
                }
            }
            self.symmetrize(p);
            let next = self.residual(p);
            if !(next < res) && next > tol {
                res = next;
                break;
            }
            res = next;
        }
        res
    }

    fn diag(&self, u: &[f64]) -> Vec<f64> {
        (0..self.grid.states())
            .map(|k| self.v[k] - (0..self.n).map(|i| u[self.cell_of(k, i)]).sum::<f64>())
            .collect()
    }

    fn dual_eval(&self, u: &[f64], warm: Option<&[f64]>, opts: &EigenOptions) -> Result<DualPoint> {
        let h = Hamiltonian::new(&self.grid, self.kappa, self.diag(u))?;
        let sym = if opts.symmetric { self.sym.as_ref() } else { None };
        let banded = BandedCholesky::fits(&self.grid);
        if banded && self.chol.borrow().is_none() {
            // Below the spectrum: lambda_min >= min(diag) since L is PSD.
            let floor = h.diag().iter().copied().fold(f64::INFINITY, f64::min);
            *self.chol.borrow_mut() = BandedCholesky::factor(&h, floor - 1e-3 * (1.0 + floor.abs())).ok();
        }
        let gs = ground_state_with(&h, warm, opts, sym, self.chol.borrow().as_ref())?;
        if banded && gs.iterations > 8 {
            let delta = 1e-3 * (self.kappa + gs.value.abs());
            if let Ok(c) = BandedCholesky::factor(&h, gs.value - gs.residual - delta) {
                *self.chol.borrow_mut() = Some(c);
            }
        }
        let lin = self.n as f64 * self.hd * dot(u, &self.mu);
        let mut grad: Vec<f64> = self.mu.iter().map(|m| self.n as f64 * m * self.hd).collect();
        for (k, &x) in gs.vector.iter().enumerate() {
            for i in 0..self.n {
                grad[self.cell_of(k, i)] -= x * x;
            }
        }
        Ok(DualPoint {
            u: u.to_vec(),
            value: gs.value + lin,
            lower: gs.lower_bound() + lin,
            grad,
            phi: gs.vector,
        })
    }

    /// `G = kappa (L sqrt P) / sqrt P + v`, the nodal gradient of the energy
    /// divided by `h^(dN)`.
    fn gradient(&self, p: &[f64]) -> Vec<f64> {
        let psi: Vec<f64> = p.iter().map(|x| x.max(0.0).sqrt()).collect();
        let mut lpsi = vec![0.0; psi.len()];
        laplacian_apply(&self.grid, self.kappa, &psi, &mut lpsi);
        lpsi.iter()
            .zip(&psi)
            .zip(&self.v)
            .map(|((l, s), v)| if *s > 0.0 { l / s + v } else { f64::NEG_INFINITY })
            .collect()
    }

    /// Orthogonal projection onto fields whose one-body marginals all vanish:
    /// subtract the additive (main-effect) part.
    fn project_tangent(&self, g: &mut [f64]) {
        let n = self.n;
        let per = (self.grid.states() / self.cells) as f64;
        let mean = g.iter().sum::<f64>() / g.len() as f64;
        let mut means = vec![vec![0.0; self.cells]; n];
        for (k, &x) in g.iter().enumerate() {
            for (i, m) in means.iter_mut().enumerate() {
                m[self.cell_of(k, i)] += x;
            }
        }
        means.iter_mut().for_each(|m| m.iter_mut().for_each(|x| *x /= per));
        for (k, x) in g.iter_mut().enumerate() {
            let add: f64 = (0..n).map(|i| means[i][self.cell_of(k, i)]).sum();
            *x -= add - (n as f64 - 1.0) * mean;
        }
    }
}

struct DualPoint {
    u: Vec<f64>,
    value: f64,
    lower: f64,
    grad: Vec<f64>,
    phi: Vec<f64>,
}

/// Minimize the convex function `t -> f((1-t) a + t b)` on [0, 1].
fn segment_search(a: &[f64], b: &[f64], f: impl Fn(&[f64]) -> f64) -> (f64, f64, Vec<f64>) {
    let point = |t: f64| -> Vec<f64> { a.iter().zip(b).map(|(x, y)| (1.0 - t) * x + t * y).collect() };
    let eval = |t: f64| f(&point(t));
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let (mut lo, mut hi) = (0.0, 1.0);
    let mut x1 = hi - g * (hi - lo);
    let mut x2 = lo + g * (hi - lo);
    let (mut f1, mut f2) = (eval(x1), eval(x2));
    for _ in 0..60 {
        if hi - lo < 1e-10 {
            break;
        }
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - g * (hi - lo);
            f1 = eval(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + g * (hi - lo);
            f2 = eval(x2);
        }
    }
    let mut best = if f1 <= f2 { (x1, f1) } else { (x2, f2) };
    let f_end = eval(1.0);
    if f_end <= best.1 {
        best = (1.0, f_end);
    }
    (best.0, best.1, point(best.0))
}

/// Minimize the grid Levy-Lieb functional over `Pi_N(mu)`.
pub fn minimize_levy_lieb(
    mu: &OneBodyDensity,
    cost: &CostSpec,
    cfg: &SolverConfig,
) -> Result<(NBodyDensity, SolveReport)> {
    minimize_levy_lieb_from(mu, cost, cfg, None)
}

/// As [`minimize_levy_lieb`], resuming from a checkpointed coupling and/or
/// potential.
pub fn minimize_levy_lieb_from(
    mu: &OneBodyDensity,
    cost: &CostSpec,
    cfg: &SolverConfig,
    start: Option<&SolveStart>,
) -> Result<(NBodyDensity, SolveReport)> {
    cfg.validate()?;
    let clock = Instant::now();
    let prob = Problem::new(mu, cost, cfg.particles, cfg.eps, cfg.symmetrize_each_iter)?;

    if cfg.particles == 1 {
        return single_particle(mu, &prob, cfg, clock);
    }

    let mut p = match start.and_then(|s| s.density.as_ref()) {
        Some(d) => {
            if !d.grid().same_space(&prob.grid) {
                return Err(Error::GridMismatch("checkpoint density lives on another grid".into()));
            }
            let mut p = d.values().to_vec();
            prob.symmetrize(&mut p);
            prob.ipfp(&mut p, 0.1 * cfg.tol_marginal);
            p
        }
        None => prob.product(),
    };
    let mut f = prob.energy(cfg.eps, &p);
    let mut trace = vec![f];

    let (p, outcome) = match cfg.method {
        SolverMethod::DualAscent => {
            let u0 = match start.and_then(|s| s.potential.as_ref()) {
                Some(u) if u.values().len() == prob.cells => u.values().to_vec(),
                Some(_) => return Err(Error::GridMismatch("checkpoint potential has wrong length".into())),
                None => vec![0.0; prob.cells],
            };
            let out = dual_ascent(&prob, cfg, &mut p, &mut f, &mut trace, u0)?;
            (p, out)
        }
        SolverMethod::ProjectedGradient => {
            let out = projected_gradient(&prob, cfg, &mut p, &mut f, &mut trace);
            (p, out)
        }
    };

    finish(mu, cost, cfg, &prob, p, trace, outcome, clock)
}

struct Outcome {
    iterations: usize,
    converged: bool,
    lower: Option<f64>,
    potential: Option<Vec<f64>>,
}

#[allow(clippy::too_many_arguments)]
fn finish(
    mu: &OneBodyDensity,
    cost: &CostSpec,
    cfg: &SolverConfig,
    prob: &Problem,
    mut p: Vec<f64>,
    trace: Vec<f64>,
    outcome: Outcome,
    clock: Instant,
) -> Result<(NBodyDensity, SolveReport)> {
    p.iter_mut().for_each(|x| *x = x.max(0.0));
    let field = Field::new(prob.grid.clone(), p)?;
    let density = match NBodyDensity::new(field.clone()) {
        Ok(d) => d,
        Err(_) => NBodyDensity::from_unnormalized(field)?,
    };
    let density = if cfg.symmetrize_each_iter {
        NBodyDensity::from_parts(density.into_field(), true)
    } else {
        density
    };
    let energy = levy_lieb_energy(&density, cfg.eps, cost)?;
    let residual = check_in_pi_n(&density, mu, cfg.tol_marginal)?.residual;
    let gap = outcome.lower.map(|l| energy.total() - l);
    let potential = match outcome.potential {
        Some(u) => Some(OneBodyPotential::new(mu.grid(), u)?),
        None => None,
    };
    let report = SolveReport {
        energy,
        marginal_residual: residual,
        iterations: outcome.iterations,
        dual_lower_bound: outcome.lower,
        duality_gap: gap,
        wall_time: clock.elapsed().as_secs_f64(),
        converged: outcome.converged && residual <= cfg.tol_marginal,
        method: cfg.method,
        energy_trace: trace,
        potential,
    };
    Ok((density, report))
}

fn single_particle(
    mu: &OneBodyDensity,
    prob: &Problem,
    cfg: &SolverConfig,
    clock: Instant,
) -> Result<(NBodyDensity, SolveReport)> {
    // Pi_1(mu) = {mu}. When mu > 0 the potential u = kappa L phi / phi makes
    // phi = sqrt(mu h^d) an exact ground state, closing the gap.
    let phi: Vec<f64> = mu.values().iter().map(|m| (m * prob.hd).sqrt()).collect();
    let (lower, potential) = if phi.iter().all(|&x| x > 0.0) {
        let mut lphi = vec![0.0; phi.len()];
        laplacian_apply(&prob.grid, prob.kappa, &phi, &mut lphi);
        let u: Vec<f64> = lphi.iter().zip(&phi).map(|(l, x)| l / x).collect();
        (Some(prob.hd * dot(&u, mu.values())), Some(u))
    } else {
        (None, None)
    };
    let f = prob.energy(cfg.eps, mu.values());
    let outcome = Outcome {
        iterations: 0,
        converged: true,
        lower,
        potential,
    };
    finish(
        mu,
        &CostSpec::zero(),
        cfg,
        prob,
        mu.values().to_vec(),
        vec![f],
        outcome,
        clock,
    )
}

fn dual_ascent(
    prob: &Problem,
    cfg: &SolverConfig,
    p: &mut Vec<f64>,
    f: &mut f64,
    trace: &mut Vec<f64>,
    u0: Vec<f64>,
) -> Result<Outcome> {
    let opts = EigenOptions {
        tol: cfg.eigen_tol,
        symmetric: cfg.symmetrize_each_iter,
        ..EigenOptions::default()
    };
    let rule = cfg.step_rule;
    let mut state = prob.dual_eval(&u0, None, &opts)?;
    let mut best_lower = state.lower;
    let mut best_u = state.u.clone();
    let mut memory: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut gamma: Option<f64> = None;
    let mut converged = false;
    let mut iterations = 0;
    let mut stalls = 0;

    for it in 1..=cfg.max_outer_iters {
        iterations = it;
        // Primal candidate from the current ground state.
        let mut q: Vec<f64> = state.phi.iter().map(|x| x * x / prob.cell).collect();
        prob.symmetrize(&mut q);
        let qres = prob.ipfp(&mut q, 0.1 * cfg.tol_marginal);
        let before = *f;
        if qres <= cfg.tol_marginal {
            let (_, fq, next) = segment_search(p, &q, |x| prob.energy(cfg.eps, x));
            if fq < *f {
                *p = next;
                *f = fq;
            }
        }
        trace.push(*f);

        let gap = *f - best_lower;
        let scale = f.abs().max(f64::MIN_POSITIVE);
        if gap <= cfg.tol_gap * scale && prob.residual(p) <= cfg.tol_marginal {
            converged = true;
            break;
        }

        // L-BFGS ascent direction.
        let g = &state.grad;
        let mut dir = g.clone();
        let mut alphas = Vec::with_capacity(memory.len());
        for (s, y, rho) in memory.iter().rev() {
            let a = rho * dot(s, &dir);
            for (d, yi) in dir.iter_mut().zip(y) {
                *d -= a * yi;
            }
            alphas.push(a);
        }
        let g0 = match (memory.back(), gamma) {
            (Some((s, y, _)), _) => dot(s, y) / dot(y, y),
            (None, Some(gm)) => gm,
            (None, None) => {
                let gmax = g.iter().fold(0.0f64, |a, b| a.max(b.abs())).max(f64::MIN_POSITIVE);
                rule.initial * 0.1 * (prob.kappa + state.value.abs()) / gmax
            }
        };
        dir.iter_mut().for_each(|d| *d *= g0);
        for ((s, y, rho), a) in memory.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &dir);
            for (d, si) in dir.iter_mut().zip(s) {
                *d += (a - b) * si;
            }
        }
        let mut slope = dot(g, &dir);
        if !(slope > 0.0) {
            memory.clear();
            dir = g.iter().map(|x| x * g0.abs()).collect();
            slope = dot(g, &dir);
        }

        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..rule.max_backtracks {
            let trial_u: Vec<f64> = state.u.iter().zip(&dir).map(|(u, d)| u + t * d).collect();
            if let Ok(trial) = prob.dual_eval(&trial_u, Some(&state.phi), &opts) {
                if trial.value >= state.value + rule.sufficient_decrease * t * slope {
                    accepted = Some(trial);
                    break;
                }
            }
            t *= rule.shrink;
        }
        match accepted {
            Some(next) => {
                let s: Vec<f64> = next.u.iter().zip(&state.u).map(|(a, b)| a - b).collect();
                let y: Vec<f64> = state.grad.iter().zip(&next.grad).map(|(a, b)| a - b).collect();
                let sy = dot(&s, &y);
                if sy > 1e-14 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() && sy > 0.0 {
                    gamma = Some(sy / dot(&y, &y));
                    memory.push_back((s, y, 1.0 / sy));
                    if memory.len() > 8 {
                        memory.pop_front();
                    }
                }
                state = next;
                if state.lower > best_lower {
                    best_lower = state.lower;
                    best_u = state.u.clone();
                }
                stalls = 0;
            }
            None => {
                memory.clear();
                stalls += 1;
                let decrease = (before - *f).abs() / scale;
                if stalls >= 3 && decrease <= cfg.tol_energy {
                    converged = prob.residual(p) <= cfg.tol_marginal && gap <= 1e-6 * scale;
                    break;
                }
            }
        }
    }
    Ok(Outcome {
        iterations,
        converged,
        lower: Some(best_lower),
        potential: Some(best_u),
    })
}

fn projected_gradient(
    prob: &Problem,
    cfg: &SolverConfig,
    p: &mut Vec<f64>,
    f: &mut f64,
    trace: &mut Vec<f64>,
) -> Outcome {
    let rule = cfg.step_rule;
    let mut prev: Option<(Vec<f64>, Vec<f64>)> = None;
    let mut converged = false;
    let mut iterations = 0;
    for it in 1..=cfg.max_outer_iters {
        iterations = it;
        let mut g = prob.gradient(p);
        if g.iter().any(|x| !x.is_finite()) {
            break;
        }
        prob.project_tangent(&mut g);
        let dir: Vec<f64> = g.iter().map(|x| -x).collect();
        let slope = prob.cell * dot(&g, &dir);
        if -slope <= cfg.tol_energy * f.abs() {
            converged = true;
            break;
        }
        let mut t = match &prev {
            Some((pp, pd)) => {
                let s: Vec<f64> = p.iter().zip(pp).map(|(a, b)| a - b).collect();
                let y: Vec<f64> = pd.iter().zip(&dir).map(|(a, b)| a - b).collect();
                let sy = dot(&s, &y);
                if sy > 0.0 {
                    dot(&s, &s) / sy
                } else {
                    rule.initial
                }
            }
            None => {
                let pmax = p.iter().fold(0.0f64, |a, &b| a.max(b));
                let dmax = dir.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
                rule.initial * 0.1 * pmax / dmax
            }
        };
        let boundary = p
            .iter()
            .zip(&dir)
            .filter(|(_, d)| **d < 0.0)
            .map(|(x, d)| 0.9 * x / -d)
            .fold(f64::INFINITY, f64::min);
        t = t.min(boundary);
        let mut accepted = None;
        for _ in 0..rule.max_backtracks {
            let trial: Vec<f64> = p.iter().zip(&dir).map(|(x, d)| x + t * d).collect();
            let ft = prob.energy(cfg.eps, &trial);
            if ft <= *f + rule.sufficient_decrease * t * slope {
                accepted = Some((trial, ft));
                break;
            }
            t *= rule.shrink;
        }
        match accepted {
            Some((trial, ft)) => {
                prev = Some((std::mem::replace(p, trial), dir));
                *f = ft;
                trace.push(ft);
            }
            None => break,
        }
    }
    Outcome {
        iterations,
        converged,
        lower: None,
        potential: None,
    }
}

/// `lambda_min(kappa L + v_ee - sum_i u(x_i)) + N sum u mu h^d`, a lower
/// bound on the minimum over `Pi_N(mu)` for every finite `u`. The eigenvalue
/// is lowered by the final residual norm so the bound survives the
/// eigensolver's truncation.
pub fn dual_lower_bound(
    mu: &OneBodyDensity,
    particles: usize,
    u: &OneBodyPotential,
    eps: f64,
    cost: &CostSpec,
) -> Result<f64> {
    if !(eps > 0.0) {
        return Err(Error::Domain(format!("eps must be positive, got {eps}")));
    }
    if u.grid() != mu.grid() {
        return Err(Error::GridMismatch("potential and marginal grids differ".into()));
    }
    let prob = Problem::new(mu, cost, particles, eps, true)?;
    Ok(prob.dual_eval(u.values(), None, &EigenOptions::default())?.lower)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StationarityReport {
    pub marginal_residual: f64,
    /// Most negative first-order change over the sampled directions.
    pub best_descent: f64,
    pub threshold: f64,
    pub directions: usize,
    pub energy: f64,
    pub product_energy: f64,
    pub pass: bool,
}

/// First-order stationarity over random feasible directions `Q - P`, where
/// each `Q` is a random positive reweighting of `P` fitted back onto
/// `Pi_N(mu)`.
pub fn validate_minimizer(
    p: &NBodyDensity,
    mu: &OneBodyDensity,
    eps: f64,
    cost: &CostSpec,
    directions: usize,
    seed: u64,
) -> Result<StationarityReport> {
    let n = p.grid().n();
    let prob = Problem::new(mu, cost, n, eps, false)?;
    p.grid().ensure_same(&prob.grid, "validate_minimizer")?;
    let residual = prob.residual(p.values());
    let energy = prob.energy(eps, p.values());
    let product_energy = prob.energy(eps, &prob.product());
    let threshold = -1e-4 * energy.abs();
    if n == 1 {
        return Ok(StationarityReport {
            marginal_residual: residual,
            best_descent: 0.0,
            threshold,
            directions: 0,
            energy,
            product_energy,
            pass: true,
        });
    }
    let g = prob.gradient(p.values());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best = f64::INFINITY;
    let axes = prob.grid.axes();
    let mut idx = vec![0; axes];
    for k in 0..directions {
        let weights: Vec<f64> = if k % 2 == 0 {
            // Low-frequency cosine modes across all axes.
            let modes: Vec<(Vec<f64>, f64, f64)> = (0..3)
                .map(|_| {
                    let freq = (0..axes).map(|_| rng.gen_range(0..4) as f64).collect();
                    (
                        freq,
                        rng.gen_range(0.0..std::f64::consts::TAU),
                        rng.gen_range(-1.0..1.0),
                    )
                })
                .collect();
            let m = prob.grid.m() as f64;
            let mut w = vec![0.0; prob.grid.states()];
            for (flat, x) in w.iter_mut().enumerate() {
                prob.grid.unravel(flat, &mut idx);
                let s: f64 = modes
                    .iter()
                    .map(|(fr, ph, amp)| {
                        let arg: f64 = fr.iter().zip(&idx).map(|(f, &i)| f * i as f64 / m).sum();
                        amp * (std::f64::consts::PI * arg + ph).cos()
                    })
                    .sum();
                *x = s.exp();
            }
            w
        } else {
            (0..prob.grid.states())
                .map(|_| rng.gen_range(-1.0f64..1.0).exp())
                .collect()
        };
        let mut q: Vec<f64> = p.values().iter().zip(&weights).map(|(a, b)| a * b).collect();
        prob.ipfp(&mut q, 1e-13);
        let delta: Vec<f64> = q.iter().zip(p.values()).map(|(a, b)| a - b).collect();
        let finite = g.iter().zip(&delta).all(|(gi, di)| gi.is_finite() || *di == 0.0);
        let deriv = if finite {
            prob.cell
                * dot(
                    &g.iter()
                        .map(|x| if x.is_finite() { *x } else { 0.0 })
                        .collect::<Vec<_>>(),
                    &delta,
                )
        } else {
            let t = 1e-7;
            let trial: Vec<f64> = p.values().iter().zip(&delta).map(|(a, d)| a + t * d).collect();
            (prob.energy(eps, &trial) - energy) / t
        };
        best = best.min(deriv);
    }
    Ok(StationarityReport {
        marginal_residual: residual,
        best_descent: best,
        threshold,
        directions,
        energy,
        product_energy,
        pass: best >= threshold,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::functionals::fisher_information;

    fn uniform(m: usize) -> OneBodyDensity {
        let g = Grid::new(1, 1, 0.0, 1.0, m).unwrap();
        OneBodyDensity::uniform(&g).unwrap()
    }

    #[test]
    fn single_particle_returns_mu() {
        let g = Grid::new(1, 1, 0.0, 1.0, 32).unwrap();
        let mu = OneBodyDensity::gaussian(&g, &[0.4], 0.15).unwrap();
        let cfg = SolverConfig::new(1, 0.02);
        let (p, rep) = minimize_levy_lieb(&mu, &CostSpec::coulomb(), &cfg).unwrap();
        assert_eq!(p.values(), mu.values());
        let expect = 0.02 * fisher_information(&mu);
        assert!((rep.energy.total() - expect).abs() < 1e-14 * expect);
        assert!(rep.duality_gap.unwrap().abs() < 1e-10 * expect);
    }

    #[test]
    fn zero_cost_gives_product() {
        let g = Grid::new(1, 1, 0.0, 1.0, 10).unwrap();
        let mu = OneBodyDensity::gaussian(&g, &[0.5], 0.25).unwrap();
        let cfg = SolverConfig::new(2, 0.1);
        let (p, rep) = minimize_levy_lieb(&mu, &CostSpec::zero(), &cfg).unwrap();
        let prod = NBodyDensity::product_coupling(&mu, 2).unwrap();
        let diff = p
            .values()
            .iter()
            .zip(prod.values())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-6, "{diff}");
        assert!(rep.converged);
    }

    #[test]
    fn coulomb_solve_is_monotone_feasible_and_certified() {
        let mu = uniform(12);
        let cfg = SolverConfig::new(2, 0.02);
        let (p, rep) = minimize_levy_lieb(&mu, &CostSpec::coulomb(), &cfg).unwrap();
        assert!(rep.converged, "{rep:?}");
        assert!(rep.marginal_residual <= 1e-8);
        assert!(rep.energy_trace.windows(2).all(|w| w[1] <= w[0] + 1e-12));
        assert!(rep.dual_lower_bound.unwrap() <= rep.energy.total() + 1e-9);
        assert!(rep.duality_gap.unwrap() <= 1e-6 * rep.energy.total());
        assert!(p.verify_symmetry(200, 1));
        let prod = NBodyDensity::product_coupling(&mu, 2).unwrap();
        let base = levy_lieb_energy(&prod, 0.02, &CostSpec::coulomb()).unwrap().total();
        assert!(rep.energy.total() < base);
        let stat = validate_minimizer(&p, &mu, 0.02, &CostSpec::coulomb(), 200, 5).unwrap();
        assert!(stat.pass, "{stat:?}");
        let prod_stat = validate_minimizer(&prod, &mu, 0.02, &CostSpec::coulomb(), 200, 5).unwrap();
        assert!(!prod_stat.pass);
    }

    #[test]
    fn projected_gradient_agrees_with_dual() {
        let mu = uniform(8);
        let mut cfg = SolverConfig::new(2, 0.05);
        let (_, dual) = minimize_levy_lieb(&mu, &CostSpec::coulomb(), &cfg).unwrap();
        cfg.method = SolverMethod::ProjectedGradient;
        cfg.max_outer_iters = 20_000;
        cfg.tol_energy = 1e-12;
        let (_, pg) = minimize_levy_lieb(&mu, &CostSpec::coulomb(), &cfg).unwrap();
        let (a, b) = (dual.energy.total(), pg.energy.total());
        assert!((a - b).abs() <= 1e-6 * a, "{a} vs {b}");
        assert!(pg.energy_trace.windows(2).all(|w| w[1] <= w[0] + 1e-12));
    }

    #[test]
    fn tangent_projection_kills_marginals() {
        let g = Grid::new(1, 3, 0.0, 1.0, 4).unwrap();
        let mu = OneBodyDensity::uniform(&g).unwrap();
        let prob = Problem::new(&mu, &CostSpec::coulomb(), 3, 0.1, false).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut x: Vec<f64> = (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let orig = x.clone();
        prob.project_tangent(&mut x);
        for m in prob.marginals(&x) {
            assert!(m.iter().all(|v| v.abs() < 1e-14));
        }
        // Idempotent and orthogonal.
        let mut again = x.clone();
        prob.project_tangent(&mut again);
        assert!(again.iter().zip(&x).all(|(a, b)| (a - b).abs() < 1e-14));
        let resid: Vec<f64> = orig.iter().zip(&x).map(|(a, b)| a - b).collect();
        assert!(dot(&resid, &x).abs() < 1e-12);
    }

    #[test]
    fn weak_duality_on_random_potentials() {
        let mu = uniform(6);
        let cost = CostSpec::coulomb();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let g = mu.grid().with_particles(2).unwrap();
        for _ in 0..10 {
            let u: Vec<f64> = (0..6).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let u = OneBodyPotential::new(mu.grid(), u).unwrap();
            let bound = dual_lower_bound(&mu, 2, &u, 0.05, &cost).unwrap();
            let p = crate::grid::random_density(&g, &mut rng);
            let prob = Problem::new(&mu, &cost, 2, 0.05, false).unwrap();
            let mut q = p.values().to_vec();
            prob.ipfp(&mut q, 1e-13);
            let e = prob.energy(0.05, &q);
            assert!(bound <= e + 1e-9, "{bound} > {e}");
        }
    }

    #[test]
    fn uncapped_cost_is_rejected() {
        let mu = uniform(5);
        let cfg = SolverConfig::new(2, 0.1);
        let err = minimize_levy_lieb(&mu, &CostSpec::coulomb().with_cap_scale(None), &cfg).unwrap_err();
        assert!(matches!(err, Error::CoincidenceCap { .. }));
    }

    #[test]
    fn resume_from_checkpoint_is_immediate() {
        let mu = uniform(10);
        let cfg = SolverConfig::new(2, 0.03);
        let (p, rep) = minimize_levy_lieb(&mu, &CostSpec::coulomb(), &cfg).unwrap();
        let start = SolveStart {
            density: Some(p),
            potential: rep.potential.clone(),
        };
        let (_, again) = minimize_levy_lieb_from(&mu, &CostSpec::coulomb(), &cfg, Some(&start)).unwrap();
        assert!(again.converged);
        assert!(again.iterations <= 2, "{}", again.iterations);
        assert!((again.energy.total() - rep.energy.total()).abs() <= 1e-9 * rep.energy.total());
    }
}
