//! Marginal-swap competitor: two bumps around `y` and `z` in grid^(dN), the
//! first particle's marginal exchanged between them, and the energy
//! comparison for the resulting coupling
//!
//! ```text
//! P_bar = P - eta1 P - eta2 P + P1 + P2,
//! P1 = rho_1^2 (x) rhohat_1^1 / m,   P2 = rho_1^1 (x) rhohat_1^2 / m.
//! ```

use serde::{Deserialize, Serialize};

use crate::cost::CostSpec;
use crate::error::{Error, Result};
use crate::functionals::{
    cutoff_energy_weighted, fisher_information, interaction_energy, interaction_energy_with, CutoffWeighting,
};
use crate::grid::{marginal, Field, IndexSet, NBodyDensity};
use crate::sum::Compensated;

/// Radial bump `eta(s)`, `s = |x| / r`, supported in the closed unit ball.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "kebab-case")]
pub enum BumpProfile {
    /// `min{(1 + delta)(1 - s)_+ / delta, 1}^2`: equal to 1 up to
    /// `s = 1/(1+delta)`, then `sqrt(eta)` falls linearly with slope
    /// `(1 + delta)/delta`.
    PropDecay { delta: f64 },
    /// Cubic hat `1 - 3 s^2 + 2 s^3` on `s <= 1`.
    SmoothC1,
}

impl BumpProfile {
    pub fn prop_decay(delta: f64) -> Result<Self> {
        if !(delta > 0.0 && delta <= 1.0) {
            return Err(Error::Domain(format!("bump delta must lie in (0, 1], got {delta}")));
        }
        Ok(Self::PropDecay { delta })
    }

    pub fn eval(&self, s: f64) -> f64 {
        let s = s.abs();
        match *self {
            Self::PropDecay { delta } => {
                let t = ((1.0 + delta) * (1.0 - s).max(0.0) / delta).min(1.0);
                t * t
            }
            Self::SmoothC1 => {
                if s >= 1.0 {
                    0.0
                } else {
                    1.0 - 3.0 * s * s + 2.0 * s * s * s
                }
            }
        }
    }

    /// `|d sqrt(eta) / ds|`.
    pub fn sqrt_slope(&self, s: f64) -> f64 {
        let s = s.abs();
        match *self {
            Self::PropDecay { delta } => {
                if s > 1.0 / (1.0 + delta) && s < 1.0 {
                    (1.0 + delta) / delta
                } else {
                    0.0
                }
            }
            Self::SmoothC1 => {
                if s >= 1.0 || s == 0.0 {
                    0.0
                } else {
                    let e = self.eval(s);
                    (6.0 * s - 6.0 * s * s) / (2.0 * e.sqrt())
                }
            }
        }
    }
}

/// Bumps around `y` and `z` with equal `P`-mass `m`.
#[derive(Debug, Clone)]
pub struct SwapState {
    pub y: Vec<f64>,
    pub z: Vec<f64>,
    pub r1: f64,
    pub r2: f64,
    pub profile: BumpProfile,
    pub lambda1: f64,
    pub lambda2: f64,
    /// `integral eta((x - y)/r1) P` before scaling.
    pub raw_mass1: f64,
    pub raw_mass2: f64,
    pub m: f64,
    pub eta1: Field,
    pub eta2: Field,
}

/// Scalar summary of a swap, for reports.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SwapSummary {
    pub y: Vec<f64>,
    pub z: Vec<f64>,
    pub r1: f64,
    pub r2: f64,
    pub profile: BumpProfile,
    pub lambda1: f64,
    pub lambda2: f64,
    pub raw_mass1: f64,
    pub raw_mass2: f64,
    pub m: f64,
}

impl SwapState {
    pub fn summary(&self) -> SwapSummary {
        SwapSummary {
            y: self.y.clone(),
            z: self.z.clone(),
            r1: self.r1,
            r2: self.r2,
            profile: self.profile,
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            raw_mass1: self.raw_mass1,
            raw_mass2: self.raw_mass2,
            m: self.m,
        }
    }

    /// `1 - eta1 - eta2`.
    pub fn eta3(&self) -> Field {
        let mut out = self.eta1.clone();
        for (o, b) in out.values_mut().iter_mut().zip(self.eta2.values()) {
            *o = 1.0 - *o - b;
        }
        out
    }
}

fn bump_field(p: &NBodyDensity, center: &[f64], r: f64, profile: BumpProfile) -> Field {
    Field::from_fn(p.grid().clone(), |x| {
        let d2: f64 = x.iter().zip(center).map(|(a, b)| (a - b) * (a - b)).sum();
        profile.eval(d2.sqrt() / r)
    })
}

fn weighted_mass(p: &Field, eta: &Field) -> f64 {
    let mut acc = Compensated::new();
    for (a, b) in p.values().iter().zip(eta.values()) {
        acc.add(a * b);
    }
    acc.value() * p.grid().cell_volume()
}

/// Build `eta1, eta2` with `lambda <= 1`.
pub fn make_bumps(p: &NBodyDensity, y: &[f64], z: &[f64], r1: f64, r2: f64, profile: BumpProfile) -> Result<SwapState> {
    make_bumps_capped(p, y, z, r1, r2, profile, 1.0)
}

/// Build `eta1, eta2` with both scale factors at most `lambda_max`. The larger
/// raw mass is scaled down to match the smaller one.
pub fn make_bumps_capped(
    p: &NBodyDensity,
    y: &[f64],
    z: &[f64],
    r1: f64,
    r2: f64,
    profile: BumpProfile,
    lambda_max: f64,
) -> Result<SwapState> {
    let axes = p.grid().axes();
    if p.grid().n() < 2 {
        return Err(Error::Precondition("the swap needs at least two particles".into()));
    }
    if y.len() != axes || z.len() != axes {
        return Err(Error::Domain(format!("bump centers must have {axes} coordinates")));
    }
    if !(r1 > 0.0 && r2 > 0.0) {
        return Err(Error::Domain(format!("bump radii must be positive, got {r1}, {r2}")));
    }
    if !(lambda_max > 0.0 && lambda_max <= 1.0) {
        return Err(Error::Domain(format!(
            "lambda cap must lie in (0, 1], got {lambda_max}"
        )));
    }
    let dist = y.iter().zip(z).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    if r1 + r2 >= dist {
        return Err(Error::Precondition(format!(
            "bump supports overlap: r1 + r2 = {} >= |y - z| = {dist}",
            r1 + r2
        )));
    }
    let raw1 = bump_field(p, y, r1, profile);
    let raw2 = bump_field(p, z, r2, profile);
    let w1 = weighted_mass(p, &raw1);
    let w2 = weighted_mass(p, &raw2);
    if !(w1 > 0.0) {
        return Err(Error::Degenerate(format!(
            "ball B(y, {r1}) around y = {y:?} carries no mass"
        )));
    }
    if !(w2 > 0.0) {
        return Err(Error::Degenerate(format!(
            "ball B(z, {r2}) around z = {z:?} carries no mass"
        )));
    }
    let lambda1 = lambda_max * (w2 / w1).min(1.0);
    let lambda2 = lambda1 * w1 / w2;
    let eta1 = raw1.scaled(lambda1);
    let eta2 = raw2.scaled(lambda2);
    let m1 = weighted_mass(p, &eta1);
    let m2 = weighted_mass(p, &eta2);
    if (m1 - m2).abs() > 1e-12 * m1.max(m2).max(1e-300) {
        return Err(Error::Degenerate(format!(
            "bump masses {m1} and {m2} could not be equalized"
        )));
    }
    Ok(SwapState {
        y: y.to_vec(),
        z: z.to_vec(),
        r1,
        r2,
        profile,
        lambda1,
        lambda2,
        raw_mass1: w1,
        raw_mass2: w2,
        m: 0.5 * (m1 + m2),
        eta1,
        eta2,
    })
}

/// Everything produced by the swap.
#[derive(Debug, Clone)]
pub struct SwapParts {
    /// First-particle marginals of `eta_i P`.
    pub rho1: [Field; 2],
    /// Marginals of `eta_i P` on particles `2..N`.
    pub rhohat: [Field; 2],
    pub p1: Field,
    pub p2: Field,
    pub pbar: NBodyDensity,
}

/// `P_bar = P - eta1 P - eta2 P + P1 + P2`.
pub fn swap_competitor(state: &SwapState, p: &NBodyDensity) -> Result<SwapParts> {
    let grid = p.grid();
    grid.ensure_same(state.eta1.grid(), "swap competitor")?;
    if !(state.m > 0.0) {
        return Err(Error::Degenerate("swap mass m is zero".into()));
    }
    let n = grid.n();
    let first = IndexSet::single(0, n)?;
    let rest = first
        .complement(n)
        .ok_or_else(|| Error::Precondition("the swap needs at least two particles".into()))?;
    let e1p = p.product(&state.eta1)?;
    let e2p = p.product(&state.eta2)?;
    let rho1 = [marginal(&e1p, &first)?, marginal(&e2p, &first)?];
    let rhohat = [marginal(&e1p, &rest)?, marginal(&e2p, &rest)?];
    let inner = rhohat[0].values().len();
    let combine = |a: &Field, b: &Field| -> Field {
        let mut out = Field::zeros(grid.clone());
        for (k, v) in out.values_mut().iter_mut().enumerate() {
            *v = a.values()[k / inner] * b.values()[k % inner] / state.m;
        }
        out
    };
    let p1 = combine(&rho1[1], &rhohat[0]);
    let p2 = combine(&rho1[0], &rhohat[1]);
    let mut values = Vec::with_capacity(grid.states());
    for k in 0..grid.states() {
        let base = p.values()[k];
        let kept = base - base * state.eta1.values()[k] - base * state.eta2.values()[k];
        values.push(kept + p1.values()[k] + p2.values()[k]);
    }
    let field = Field::new(grid.clone(), values)?;
    let integral = field.integral();
    if (integral - 1.0).abs() > NBodyDensity::NORMALIZATION_TOL {
        return Err(Error::Normalization {
            integral,
            tol: NBodyDensity::NORMALIZATION_TOL,
        });
    }
    if let Some(i) = field.values().iter().position(|&v| v < -1e-15) {
        return Err(Error::Negative {
            index: i,
            value: field.values()[i],
        });
    }
    let clamped = Field::new(grid.clone(), field.values().iter().map(|v| v.max(0.0)).collect())?;
    Ok(SwapParts {
        rho1,
        rhohat,
        p1,
        p2,
        pbar: NBodyDensity::from_parts(clamped, false),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ContiReport {
    pub kinetic_lhs: f64,
    pub kinetic_rhs: f64,
    /// `kinetic_rhs - kinetic_lhs`; the lemma predicts a nonnegative value.
    pub kinetic_slack: f64,
    /// The three cutoff integrals for `eta1`, `eta2`, `1 - eta1 - eta2`.
    pub cutoff_terms: [f64; 3],
    pub vee_lhs: f64,
    pub vee_rhs: f64,
    pub vee_relative_error: f64,
    pub vee_identity_holds: bool,
    pub energy_p: f64,
    pub energy_pbar: f64,
    pub eps: f64,
    pub weighting: CutoffWeighting,
}

fn check_cutoff_degeneracy(p: &NBodyDensity, eta3: &Field) -> Result<()> {
    let grid = p.grid();
    let (pv, ev) = (p.values(), eta3.values());
    let mut bad = None;
    crate::functionals::for_each_edge(grid, |i, j| {
        if bad.is_some() || ev[i] == ev[j] {
            return;
        }
        for k in [i, j] {
            if ev[k] <= 0.0 && pv[k] > 0.0 {
                bad = Some(k);
            }
        }
    });
    match bad {
        Some(index) => Err(Error::CutoffDegeneracy { index }),
        None => Ok(()),
    }
}

/// Both energy comparisons of the swap lemma, with cutoff terms weighted by
/// the geometric mean of `P` across each edge.
pub fn lemma_conti_check(p: &NBodyDensity, state: &SwapState, eps: f64, cost: &CostSpec) -> Result<ContiReport> {
    lemma_conti_check_with(p, state, eps, cost, CutoffWeighting::EdgeGeometric)
}

pub fn lemma_conti_check_with(
    p: &NBodyDensity,
    state: &SwapState,
    eps: f64,
    cost: &CostSpec,
    weighting: CutoffWeighting,
) -> Result<ContiReport> {
    if !(eps > 0.0) {
        return Err(Error::Domain(format!("eps must be positive, got {eps}")));
    }
    let eta3 = state.eta3();
    check_cutoff_degeneracy(p, &eta3)?;
    let parts = swap_competitor(state, p)?;
    let kinetic_lhs = fisher_information(&parts.pbar);
    let cutoff_terms = [
        cutoff_energy_weighted(p, &state.eta1, weighting)?,
        cutoff_energy_weighted(p, &state.eta2, weighting)?,
        cutoff_energy_weighted(p, &eta3, weighting)?,
    ];
    let kinetic_p = fisher_information(p);
    let kinetic_rhs = kinetic_p + cutoff_terms.iter().sum::<f64>();

    let c1 = cost.first_particle_potential(p.grid());
    let vee_p = interaction_energy(p, cost)?;
    let vee_lhs = interaction_energy(&parts.pbar, cost)?;
    let mut both = state.eta1.clone();
    for (a, b) in both.values_mut().iter_mut().zip(state.eta2.values()) {
        *a += b;
    }
    let removed = interaction_energy_with(&p.product(&both)?, &c1)?;
    let mut swapped = parts.p1.clone();
    for (a, b) in swapped.values_mut().iter_mut().zip(parts.p2.values()) {
        *a += b;
    }
    let added = interaction_energy_with(&swapped, &c1)?;
    let vee_rhs = vee_p - removed + added;
    let denom = vee_lhs.abs().max(vee_rhs.abs()).max(f64::MIN_POSITIVE);
    let vee_relative_error = (vee_lhs - vee_rhs).abs() / denom;
    Ok(ContiReport {
        kinetic_lhs,
        kinetic_rhs,
        kinetic_slack: kinetic_rhs - kinetic_lhs,
        cutoff_terms,
        vee_lhs,
        vee_rhs,
        vee_relative_error,
        vee_identity_holds: vee_relative_error <= 1e-10,
        energy_p: eps * kinetic_p + vee_p,
        energy_pbar: eps * kinetic_lhs + vee_lhs,
        eps,
        weighting,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{check_in_pi_n, random_density, Grid, OneBodyDensity};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn profile_shapes() {
        let b = BumpProfile::prop_decay(0.5).unwrap();
        assert_eq!(b.eval(0.0), 1.0);
        assert_eq!(b.eval(1.0 / 1.5), 1.0);
        assert_eq!(b.eval(1.0), 0.0);
        assert_eq!(b.eval(1.5), 0.0);
        // sqrt(eta) is linear on the annulus with slope (1+delta)/delta.
        let (s0, s1) = (0.7, 0.9);
        let slope = (b.eval(s0).sqrt() - b.eval(s1).sqrt()) / (s1 - s0);
        assert!((slope - 3.0).abs() < 1e-12);
        assert_eq!(b.sqrt_slope(0.8), 3.0);
        assert!(BumpProfile::prop_decay(0.0).is_err());
        assert!(BumpProfile::prop_decay(1.5).is_err());
        let c = BumpProfile::SmoothC1;
        assert_eq!(c.eval(0.0), 1.0);
        assert_eq!(c.eval(1.0), 0.0);
        assert!((c.eval(0.5) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn zero_lambda_is_identity_and_two_by_two_matches_algebra() {
        let g = Grid::new(1, 2, 0.0, 1.0, 2).unwrap();
        // Hand-chosen P on the four states (0,0), (0,1), (1,0), (1,1).
        let vals = [0.1, 0.4, 0.3, 0.2];
        let p = NBodyDensity::new(Field::new(g.clone(), vals.to_vec()).unwrap()).unwrap();
        let (y, z) = ([0.0, 1.0], [1.0, 0.0]);
        let st = make_bumps(&p, &y, &z, 0.5, 0.5, BumpProfile::prop_decay(1.0).unwrap()).unwrap();
        // eta1 = lambda1 at (0,1), eta2 = lambda2 at (1,0).
        assert_eq!(st.raw_mass1, 0.4);
        assert_eq!(st.raw_mass2, 0.3);
        assert!((st.lambda1 - 0.75).abs() < 1e-15 && st.lambda2 == 1.0);
        let m = st.m;
        assert!((m - 0.3).abs() < 1e-15);
        let parts = swap_competitor(&st, &p).unwrap();
        // P1 = rho_1^2(x1) rhohat^1(x2) / m is a point mass at (1, 1);
        // P2 = rho_1^1(x1) rhohat^2(x2) / m at (0, 0).
        let expect = [0.1 + 0.3, 0.4 - 0.3, 0.3 - 0.3, 0.2 + 0.3];
        for (a, b) in parts.pbar.values().iter().zip(expect) {
            assert!((a - b).abs() < 1e-15, "{:?}", parts.pbar.values());
        }

        let mut zero = st.clone();
        zero.eta1 = zero.eta1.scaled(0.0);
        zero.eta2 = zero.eta2.scaled(0.0);
        zero.m = 1.0;
        let same = swap_competitor(&zero, &p).unwrap();
        assert_eq!(same.pbar.values(), p.values());
    }

    #[test]
    fn mass_ratio_sets_lambda() {
        let g = Grid::new(1, 2, 0.0, 1.0, 8).unwrap();
        let mut vals = vec![1.0; 64];
        // Node near z carries twice the weight of the node near y.
        let y = [g.coord(1), g.coord(6)];
        let z = [g.coord(6), g.coord(1)];
        vals[g.ravel(&[6, 1])] = 2.0;
        let p = NBodyDensity::from_unnormalized(Field::new(g.clone(), vals).unwrap()).unwrap();
        let r = 0.5 * g.h();
        let st = make_bumps(&p, &y, &z, r, r, BumpProfile::prop_decay(0.5).unwrap()).unwrap();
        assert_eq!(st.lambda1, 1.0);
        assert!((st.lambda2 - 0.5).abs() < 1e-12);
        assert!(st.m <= st.raw_mass1.min(st.raw_mass2));
    }

    #[test]
    fn overlap_and_empty_balls_are_rejected() {
        let g = Grid::new(1, 2, 0.0, 1.0, 8).unwrap();
        let mu = OneBodyDensity::uniform(&g).unwrap();
        let p = NBodyDensity::product_coupling(&mu, 2).unwrap();
        let prof = BumpProfile::SmoothC1;
        let err = make_bumps(&p, &[0.2, 0.2], &[0.3, 0.3], 0.1, 0.1, prof).unwrap_err();
        assert!(matches!(err, Error::Precondition(_)));
        let mut vals = vec![1.0; 64];
        vals[0] = 0.0;
        let q = NBodyDensity::from_unnormalized(Field::new(g.clone(), vals).unwrap()).unwrap();
        let err = make_bumps(&q, &[0.0, 0.0], &[1.0, 1.0], 0.05, 0.05, prof).unwrap_err();
        assert!(err.to_string().contains("B(y"), "{err}");
    }

    #[test]
    fn random_swaps_preserve_marginals_and_vee_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for n in [2usize, 3] {
            let g = Grid::new(1, n, 0.0, 1.0, 8).unwrap();
            let mu_grid = g.one_body();
            let mut done = 0;
            while done < 20 {
                let p = random_density(&g, &mut rng);
                let y: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
                let z: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
                let dist = y.iter().zip(&z).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
                let r1 = rng.gen_range(0.1..0.6) * dist;
                let r2 = rng.gen_range(0.1..0.9) * (dist - r1);
                let Ok(st) = make_bumps(&p, &y, &z, r1, r2, BumpProfile::SmoothC1) else {
                    continue;
                };
                let parts = swap_competitor(&st, &p).unwrap();
                for i in 0..n {
                    let a = crate::grid::one_body_marginal(&parts.pbar, i).unwrap();
                    let b = crate::grid::one_body_marginal(&p, i).unwrap();
                    let tv = crate::grid::total_variation(&a, &b).unwrap();
                    assert!(tv <= 1e-12, "{tv}");
                }
                let rep = lemma_conti_check(&p, &st, 0.1, &CostSpec::coulomb()).unwrap();
                assert!(rep.vee_relative_error <= 1e-12, "{}", rep.vee_relative_error);
                assert!(rep.kinetic_slack >= -1e-12 * rep.kinetic_rhs, "{rep:?}");
                assert_eq!(mu_grid, g.one_body());
                done += 1;
            }
        }
    }

    #[test]
    fn full_cutoff_is_degenerate() {
        let g = Grid::new(1, 2, 0.0, 1.0, 16).unwrap();
        let mu = OneBodyDensity::uniform(&g).unwrap();
        let p = NBodyDensity::product_coupling(&mu, 2).unwrap();
        let prof = BumpProfile::prop_decay(0.5).unwrap();
        let st = make_bumps(&p, &[0.3, 0.7], &[0.7, 0.3], 0.2, 0.2, prof).unwrap();
        assert_eq!(st.lambda1, 1.0);
        let err = lemma_conti_check(&p, &st, 0.1, &CostSpec::coulomb()).unwrap_err();
        assert!(matches!(err, Error::CutoffDegeneracy { .. }));
        let capped = make_bumps_capped(&p, &[0.3, 0.7], &[0.7, 0.3], 0.2, 0.2, prof, 0.5).unwrap();
        let rep = lemma_conti_check(&p, &capped, 0.1, &CostSpec::coulomb()).unwrap();
        assert!(rep.kinetic_slack >= 0.0);
        let res = check_in_pi_n(&swap_competitor(&capped, &p).unwrap().pbar, &mu, 1e-12).unwrap();
        assert!(res.pass);
    }
}
