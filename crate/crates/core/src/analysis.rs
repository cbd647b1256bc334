//! Doubling points, one-step decay and the localization verdicts for
//! computed minimizers.

use serde::{Deserialize, Serialize};

use crate::competitor::{make_bumps, swap_competitor, BumpProfile, SwapSummary};
use crate::cost::CostSpec;
use crate::error::{Error, Result};
use crate::grid::{
    ball_mass, diagonal_indicator, diagonal_mass, erode, erode_where, kappa, mass_on, BallStencil, Field, Grid,
    NBodyDensity, OneBodyDensity,
};
use crate::sum::Compensated;

const E2: f64 = std::f64::consts::E * std::f64::consts::E;

/// `C(delta) = (1+delta)^2 (2 (1+delta)^(dN) - 1) / delta^2`.
pub fn c_delta(delta: f64, d: usize, n: usize) -> Result<f64> {
    if !(delta > 0.0) || !delta.is_finite() {
        return Err(Error::Domain(format!("delta must be positive, got {delta}")));
    }
    let g = 1.0 + delta;
    Ok(g * g * (2.0 * g.powi((d * n) as i32) - 1.0) / (delta * delta))
}

/// Right-hand side `8 max{(N-1) M(beta/2), 850 eps N^2 / beta^2}` that
/// `m(2 alpha_0)` has to reach.
pub fn alpha0_target(beta: f64, eps: f64, n: usize, cost: &CostSpec) -> Result<f64> {
    if !(beta > 0.0) {
        return Err(Error::Domain(format!("beta must be positive, got {beta}")));
    }
    if !(eps > 0.0) {
        return Err(Error::Domain(format!("eps must be positive, got {eps}")));
    }
    if n < 2 {
        return Err(Error::Domain("alpha_0 needs at least two particles".into()));
    }
    let n = n as f64;
    let pair = (n - 1.0) * cost.upper_envelope(beta / 2.0);
    let kinetic = 850.0 * eps * n * n / (beta * beta);
    Ok(8.0 * pair.max(kinetic))
}

/// Largest `alpha` with `m(2 alpha) >= target`, by bisection on `ln t`.
pub fn alpha0_threshold(beta: f64, eps: f64, n: usize, cost: &CostSpec) -> Result<f64> {
    let target = alpha0_target(beta, eps, n, cost)?;
    if !cost.envelope_diverges() {
        return Err(Error::Hypothesis(
            "the lower envelope m does not blow up at zero separation".into(),
        ));
    }
    let m = |t: f64| cost.lower_envelope(t);
    let mut lo = 1.0;
    while m(lo) < target {
        lo *= 0.5;
        if lo < 1e-300 {
            return Err(Error::Hypothesis(format!("m never reaches {target:e}")));
        }
    }
    let mut hi = lo;
    while m(hi) >= target {
        hi *= 2.0;
        if hi > 1e300 {
            return Err(Error::Hypothesis(format!("m stays above {target:e}")));
        }
    }
    for _ in 0..200 {
        let mid = (lo * hi).sqrt();
        if mid <= lo || mid >= hi {
            break;
        }
        if m(mid) >= target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo / 2.0)
}

/// Localization hypotheses, with the raw numbers kept.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HypothesisCheck {
    pub d: usize,
    pub n: usize,
    pub beta: f64,
    pub kappa_value: f64,
    pub alpha: f64,
    pub eps: f64,
    /// Meaning of `<<`: `a << b` is read as `a <= smallness_factor * b`.
    pub smallness_factor: f64,
    pub coulomb: bool,
    /// `m(2 alpha)`.
    pub m_2alpha: f64,
    /// `M(beta / 2)`.
    pub upper_half_beta: f64,
    pub kappa_ok: bool,
    /// `alpha <= beta / (32 N)` (Coulomb only).
    pub alpha_coulomb_ok: Option<bool>,
    /// `m(2 alpha) >= 8 (N-1) M(beta/2)`.
    pub alpha_general_ok: bool,
    /// `eps N^2 <= s alpha / 16` (Coulomb only).
    pub eps_coulomb_ok: Option<bool>,
    /// `eps N^2 <= s alpha^2 m(2 alpha)`.
    pub eps_general_ok: bool,
    pub holds: bool,
    pub label: String,
}

impl HypothesisCheck {
    pub const DEFAULT_SMALLNESS: f64 = 0.01;

    /// Evaluate with `kappa(mu, beta)` measured on the grid.
    pub fn evaluate(
        mu: &OneBodyDensity,
        n: usize,
        beta: f64,
        alpha: f64,
        eps: f64,
        cost: &CostSpec,
        smallness_factor: f64,
    ) -> Result<Self> {
        let k = kappa(mu, beta)?;
        Self::from_values(mu.grid().d(), n, beta, k, alpha, eps, cost, smallness_factor)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn from_values(
        d: usize,
        n: usize,
        beta: f64,
        kappa_value: f64,
        alpha: f64,
        eps: f64,
        cost: &CostSpec,
        smallness_factor: f64,
    ) -> Result<Self> {
        if n < 2 {
            return Err(Error::Domain("hypotheses need at least two particles".into()));
        }
        for (name, v) in [
            ("beta", beta),
            ("alpha", alpha),
            ("eps", eps),
            ("smallness_factor", smallness_factor),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Domain(format!("{name} must be positive, got {v}")));
            }
        }
        let nf = n as f64;
        let m_2alpha = cost.lower_envelope(2.0 * alpha);
        let upper_half_beta = cost.upper_envelope(beta / 2.0);
        let kappa_ok = kappa_value <= 1.0 / (4.0 * (nf - 1.0));
        let alpha_general_ok = m_2alpha >= 8.0 * (nf - 1.0) * upper_half_beta;
        let eps_general_ok = eps * nf * nf <= smallness_factor * alpha * alpha * m_2alpha;
        let coulomb = cost.is_coulomb();
        let (alpha_coulomb_ok, eps_coulomb_ok) = if coulomb {
            (
                Some(alpha <= beta / (32.0 * nf)),
                Some(eps * nf * nf <= smallness_factor * alpha / 16.0),
            )
        } else {
            (None, None)
        };
        let holds =
            kappa_ok && alpha_coulomb_ok.unwrap_or(alpha_general_ok) && eps_coulomb_ok.unwrap_or(eps_general_ok);
        let label = if d == 3 { "d=3 constants" } else { "dN-generalized" }.to_string();
        Ok(Self {
            d,
            n,
            beta,
            kappa_value,
            alpha,
            eps,
            smallness_factor,
            coulomb,
            m_2alpha,
            upper_half_beta,
            kappa_ok,
            alpha_coulomb_ok,
            alpha_general_ok,
            eps_coulomb_ok,
            eps_general_ok,
            holds,
            label,
        })
    }

    /// Names of the failed inequalities.
    pub fn failures(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        if !self.kappa_ok {
            out.push("kappa(mu, beta) <= 1/(4(N-1))");
        }
        match self.alpha_coulomb_ok {
            Some(false) => out.push("alpha <= beta/(32N)"),
            None if !self.alpha_general_ok => out.push("m(2 alpha) >= 8(N-1) M(beta/2)"),
            _ => {}
        }
        match self.eps_coulomb_ok {
            Some(false) => out.push("eps N^2 << alpha/16"),
            None if !self.eps_general_ok => out.push("eps N^2 << alpha^2 m(2 alpha)"),
            _ => {}
        }
        out
    }
}

/// Point found by the doubling scan.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DoublingPoint {
    pub flat: usize,
    pub point: Vec<f64>,
    /// `P(B(y, (1+delta) r)) / P(B(y, r))`.
    pub ratio: f64,
    /// `(1+delta)^(dN) / C_{delta r}`.
    pub bound: f64,
    /// `C_{delta r}`.
    pub eroded_mass: f64,
}

/// Exhaustive scan over `omega` for the node with the smallest doubling
/// ratio at scale `r`.
pub fn find_doubling_point(p: &Field, omega: &[bool], r: f64, delta: f64) -> Result<DoublingPoint> {
    let grid = p.grid();
    if !(delta > 0.0) || !(r > 0.0) {
        return Err(Error::Domain(format!(
            "need r > 0 and delta > 0, got r = {r}, delta = {delta}"
        )));
    }
    let eroded = erode(grid, omega, delta * r)?;
    doubling_scan(p, omega, &eroded, r, delta)
}

fn doubling_scan(p: &Field, omega: &[bool], eroded: &[bool], r: f64, delta: f64) -> Result<DoublingPoint> {
    let grid = p.grid();
    let c = mass_on(p, eroded);
    if !(c > 0.0) {
        return Err(Error::Precondition(format!(
            "P has no mass on the {}-erosion of the set",
            delta * r
        )));
    }
    let bound = (1.0 + delta).powi(grid.axes() as i32) / c;
    let inner = BallStencil::new(grid, r);
    let outer = BallStencil::new(grid, (1.0 + delta) * r);
    let mut best: Option<(usize, f64)> = None;
    grid.for_each_node(|flat, idx| {
        if !omega[flat] {
            return;
        }
        let small = inner.sum_at(grid, p.values(), idx);
        if !(small > 0.0) {
            return;
        }
        let ratio = outer.sum_at(grid, p.values(), idx) / small;
        if best.map_or(true, |(_, b)| ratio < b) {
            best = Some((flat, ratio));
        }
    });
    match best {
        Some((flat, ratio)) if ratio <= bound * (1.0 + 1e-12) => Ok(DoublingPoint {
            flat,
            point: grid.point(flat),
            ratio,
            bound,
            eroded_mass: c,
        }),
        Some((_, ratio)) => Err(Error::NotFound(format!(
            "smallest doubling ratio {ratio} exceeds {bound}"
        ))),
        None => Err(Error::NotFound("no node of the set carries mass at this scale".into())),
    }
}

/// Output of the doubling-point search next to a swap.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExDoubling {
    pub z: Vec<f64>,
    pub kappa_value: f64,
    /// `P` on the eroded admissible set.
    pub eroded_mass: f64,
    /// `1 - 2 (N-1) kappa`.
    pub mass_floor: f64,
    pub mass_floor_holds: bool,
    /// `P(B(z, r2)) / P(B(z, r2/(1+delta)))`.
    pub doubling_ratio: f64,
    /// `2 (1+delta)^(dN)`.
    pub doubling_constant: f64,
    /// `integral C_1 (P1 + P2)`.
    pub c1_integral: f64,
    /// `2 (N-1) M(beta - r1 - 2 r2) m`.
    pub c1_bound: f64,
    pub c1_holds: bool,
    pub swap: SwapSummary,
}

/// Doubling point `z` at scale `r2`, far from the near-diagonal point `y`,
/// and the interaction bound of the swap built on `(y, z)`.
#[allow(clippy::too_many_arguments)]
pub fn exdoubling_near_swap(
    p: &NBodyDensity,
    mu: &OneBodyDensity,
    y: &[f64],
    beta: f64,
    r1: f64,
    r2: f64,
    delta: f64,
    cost: &CostSpec,
) -> Result<ExDoubling> {
    let grid = p.grid();
    let (d, n) = (grid.d(), grid.n());
    if n < 2 {
        return Err(Error::Precondition("the swap needs at least two particles".into()));
    }
    if y.len() != grid.axes() {
        return Err(Error::Domain(format!(
            "y has {} coordinates, grid has {} axes",
            y.len(),
            grid.axes()
        )));
    }
    if !(r1 > 0.0 && r2 > 0.0 && delta > 0.0) {
        return Err(Error::Domain("r1, r2 and delta must be positive".into()));
    }
    let k = kappa(mu, beta)?;
    let nf = n as f64;
    if k > 1.0 / (4.0 * (nf - 1.0)) {
        return Err(Error::Hypothesis(format!("kappa(mu, beta) = {k} exceeds 1/(4(N-1))")));
    }
    if r1 + 2.0 * r2 >= beta {
        return Err(Error::Hypothesis(format!(
            "r1 + 2 r2 = {} is not below beta = {beta}",
            r1 + 2.0 * r2
        )));
    }
    let shrink = delta * r2 / (1.0 + delta);
    let reach = beta - shrink;
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(s, t)| (s - t) * (s - t)).sum::<f64>().sqrt();
    let admissible = |x: &[f64]| {
        (1..n).all(|i| {
            let (xi, yi) = (&x[i * d..(i + 1) * d], &y[i * d..(i + 1) * d]);
            dist(&x[..d], yi) >= reach && dist(&y[..d], xi) >= reach
        })
    };
    let mut omega = Vec::with_capacity(grid.states());
    grid.for_each_node(|flat, _| omega.push(admissible(&grid.point(flat))));
    let eroded = erode_where(grid, shrink, admissible)?;
    let scale = r2 / (1.0 + delta);
    let found = doubling_scan(p, &omega, &eroded, scale, delta)?;
    let mass_floor = 1.0 - 2.0 * (nf - 1.0) * k;
    let doubling_constant = 2.0 * (1.0 + delta).powi(grid.axes() as i32);

    let profile = BumpProfile::prop_decay(delta.min(1.0))?;
    let state = make_bumps(p, y, &found.point, r1, r2, profile)?;
    let parts = swap_competitor(&state, p)?;
    let c1 = cost.first_particle_potential(grid);
    let mut acc = Compensated::new();
    for (k, &c) in c1.iter().enumerate() {
        let w = parts.p1.values()[k] + parts.p2.values()[k];
        if w > 0.0 {
            acc.add(c * w);
        }
    }
    let c1_integral = acc.value() * grid.cell_volume();
    let c1_bound = 2.0 * (nf - 1.0) * cost.upper_envelope(beta - r1 - 2.0 * r2) * state.m;
    Ok(ExDoubling {
        z: found.point,
        kappa_value: k,
        eroded_mass: found.eroded_mass,
        mass_floor,
        mass_floor_holds: found.eroded_mass >= mass_floor - 1e-12,
        doubling_ratio: found.ratio,
        doubling_constant,
        c1_integral,
        c1_bound,
        c1_holds: c1_integral <= c1_bound * (1.0 + 1e-12),
        swap: state.summary(),
    })
}

/// One evaluation of the one-step decay inequality.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecayCheck {
    pub y: Vec<f64>,
    /// `P(B(y, r1/(1+delta)))`.
    pub lhs: f64,
    /// `factor * P(B(y, r1))`.
    pub rhs: f64,
    pub factor: f64,
    pub tol: f64,
    pub pass: bool,
}

fn min_pair_distance(y: &[f64], d: usize, n: usize) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..n {
        for j in (i + 1)..n {
            let s: f64 = (0..d).map(|c| (y[i * d + c] - y[j * d + c]).powi(2)).sum();
            best = best.min(s.sqrt());
        }
    }
    best
}

/// Compare `P(B(y, r1/(1+delta)))` with
/// `P(B(y, r1)) / (delta^2 r1^2 m(2 alpha) / (2 (1+delta)^2 eps) + 1)`.
#[allow(clippy::too_many_arguments)]
pub fn one_step_decay_check(
    p: &Field,
    eps: f64,
    alpha: f64,
    beta: f64,
    delta: f64,
    r1: f64,
    cost: &CostSpec,
    y: &[f64],
    tol: f64,
) -> Result<DecayCheck> {
    let grid = p.grid();
    if !(eps > 0.0 && alpha > 0.0 && beta > 0.0 && r1 > 0.0) {
        return Err(Error::Domain("eps, alpha, beta and r1 must be positive".into()));
    }
    let c = c_delta(delta, grid.d(), grid.n())?;
    if min_pair_distance(y, grid.d(), grid.n()) > alpha * (1.0 + 1e-9) {
        return Err(Error::Precondition("y is not in D_alpha".into()));
    }
    if r1 > alpha / 2.0 * (1.0 + 1e-12) {
        return Err(Error::Precondition(format!(
            "r1 = {r1} exceeds alpha/2 = {}",
            alpha / 2.0
        )));
    }
    let m2a = cost.lower_envelope(2.0 * alpha);
    if !(m2a > 256.0 * eps * c / (beta * beta)) {
        return Err(Error::Precondition(format!(
            "m(2 alpha) = {m2a} is not above 256 eps C(delta)/beta^2 = {}",
            256.0 * eps * c / (beta * beta)
        )));
    }
    let g = 1.0 + delta;
    let factor = 1.0 / (delta * delta * r1 * r1 * m2a / (2.0 * g * g * eps) + 1.0);
    let lhs = ball_mass(p, y, r1 / g)?;
    let rhs = factor * ball_mass(p, y, r1)?;
    Ok(DecayCheck {
        y: y.to_vec(),
        lhs,
        rhs,
        factor,
        tol,
        pass: lhs <= rhs * (1.0 + tol),
    })
}

/// One level of the decay iteration, averaged over `y` in `D_alpha`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecayLevel {
    pub k: usize,
    pub alpha_k: f64,
    /// `sum_y P(B(y, alpha_{k+1})) / sum_y P(B(y, alpha_k))`.
    pub measured: f64,
    /// `(1+delta)^(2k+2) / e^2`.
    pub allowed: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecayReport {
    #[serde(rename = "A")]
    pub a: f64,
    pub delta_used: f64,
    pub k0: usize,
    pub levels: Vec<DecayLevel>,
    /// `P(D_{alpha/2})`.
    pub inner_mass: f64,
    /// `P(D_{2 alpha})`.
    pub outer_mass: f64,
    pub measured_ratio: f64,
    /// `exp(-sqrt(A)/6)`.
    pub bound: f64,
    /// `exp(-sqrt(alpha/eps)/24)` for Coulomb.
    pub coulomb_bound: Option<f64>,
    pub levels_pass: bool,
    pub final_pass: bool,
}

/// `A = alpha^2 m(2 alpha) / (8 eps)`.
pub fn decay_exponent_base(alpha: f64, eps: f64, cost: &CostSpec) -> f64 {
    alpha * alpha * cost.lower_envelope(2.0 * alpha) / (8.0 * eps)
}

/// Largest `k0` with `(1+delta)^(2 k0 + 2) <= e^2`; `None` when even `k0 = 0`
/// fails.
pub fn k0_bracket(delta: f64) -> Option<usize> {
    let l = (1.0 + delta).ln();
    let top = 2.0 / l - 2.0;
    if top < -1e-12 {
        return None;
    }
    Some(((top / 2.0) + 1e-12).floor().max(0.0) as usize)
}

/// Run the levels `alpha_k = (alpha/2)(1+delta)^(-k)`, `k = 0..=k0`, with
/// `delta^2 A = e^2`. Requires `A >= a_floor N^2`.
pub fn iterate_decay(p: &Field, eps: f64, alpha: f64, cost: &CostSpec, a_floor: f64) -> Result<DecayReport> {
    let grid = p.grid();
    if !(eps > 0.0 && alpha > 0.0) {
        return Err(Error::Domain("eps and alpha must be positive".into()));
    }
    let nf = grid.n() as f64;
    let a = decay_exponent_base(alpha, eps, cost);
    if !(a >= a_floor * nf * nf) {
        return Err(Error::Hypothesis(format!("A = {a} is below {a_floor} N^2")));
    }
    let delta = (E2 / a).sqrt();
    let k0 = k0_bracket(delta)
        .ok_or_else(|| Error::Hypothesis(format!("A = {a} gives delta = {delta}, so no level fits below e^2")))?;
    let diag = diagonal_indicator(grid, alpha);
    let g = 1.0 + delta;
    let averaged = |radius: f64| -> f64 {
        let stencil = BallStencil::new(grid, radius);
        let mut acc = Compensated::new();
        grid.for_each_node(|flat, idx| {
            if diag[flat] {
                acc.add(stencil.sum_at(grid, p.values(), idx));
            }
        });
        acc.value()
    };
    let radii: Vec<f64> = (0..=k0 + 1).map(|k| alpha / 2.0 * g.powi(-(k as i32))).collect();
    let sums: Vec<f64> = radii.iter().map(|&r| averaged(r)).collect();
    let levels: Vec<DecayLevel> = (0..=k0)
        .map(|k| {
            let measured = if sums[k] > 0.0 { sums[k + 1] / sums[k] } else { 0.0 };
            let allowed = g.powi(2 * k as i32 + 2) / E2;
            DecayLevel {
                k,
                alpha_k: radii[k],
                measured,
                allowed,
                pass: measured <= allowed * (1.0 + 1e-12),
            }
        })
        .collect();
    let inner_mass = diagonal_mass(p, alpha / 2.0)?;
    let outer_mass = diagonal_mass(p, 2.0 * alpha)?;
    let measured_ratio = if outer_mass > 0.0 { inner_mass / outer_mass } else { 0.0 };
    let bound = (-a.sqrt() / 6.0).exp();
    let coulomb_bound = cost.is_coulomb().then(|| (-(alpha / eps).sqrt() / 24.0).exp());
    Ok(DecayReport {
        a,
        delta_used: delta,
        k0,
        levels_pass: levels.iter().all(|l| l.pass),
        levels,
        inner_mass,
        outer_mass,
        measured_ratio,
        bound,
        coulomb_bound,
        final_pass: measured_ratio <= bound,
    })
}

/// Diagonal mass against the boxed bound.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Verdict {
    pub hypotheses: HypothesisCheck,
    pub diag_mass: f64,
    /// Coulomb form when available, otherwise `exp(-sqrt(A)/6)`.
    pub bound: f64,
    pub general_bound: f64,
    #[serde(rename = "A")]
    pub a: f64,
    pub in_regime: bool,
    pub pass: bool,
    pub status: String,
}

/// Always fills in both sides; `status` says whether the hypotheses hold.
pub fn theorem_verdict(
    mu: &OneBodyDensity,
    eps: f64,
    alpha: f64,
    beta: f64,
    cost: &CostSpec,
    p: &NBodyDensity,
    smallness_factor: f64,
) -> Result<Verdict> {
    let grid: &Grid = p.grid();
    let hypotheses = HypothesisCheck::evaluate(mu, grid.n(), beta, alpha, eps, cost, smallness_factor)?;
    let diag_mass = diagonal_mass(p, alpha)?;
    let a = decay_exponent_base(alpha, eps, cost);
    let general_bound = (-a.sqrt() / 6.0).exp();
    let bound = if cost.is_coulomb() {
        (-(alpha / eps).sqrt() / 24.0).exp()
    } else {
        general_bound
    };
    let in_regime = hypotheses.holds;
    let pass = diag_mass <= bound;
    let status = match (in_regime, pass) {
        (true, true) => "pass",
        (true, false) => "fail",
        (false, _) => "out of regime",
    }
    .to_string();
    Ok(Verdict {
        hypotheses,
        diag_mass,
        bound,
        general_bound,
        a,
        in_regime,
        pass,
        status,
    })
}
