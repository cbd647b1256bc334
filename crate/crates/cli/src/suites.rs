//! Property suites run by `llgrid verify`.

use llgrid_core::analysis::{alpha0_target, alpha0_threshold, c_delta, decay_exponent_base, find_doubling_point};
use llgrid_core::competitor::{lemma_conti_check, make_bumps_capped, swap_competitor, BumpProfile};
use llgrid_core::functionals::{ims_split, levy_lieb_energy};
use llgrid_core::grid::{marginal, one_body_marginal, random_density, total_variation};
use llgrid_core::solver::{dual_lower_bound, OneBodyPotential};
use llgrid_core::{CostSpec, Field, Grid, IndexSet, NBodyDensity, OneBodyDensity};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub pass: bool,
    pub detail: String,
    /// Offending density, written next to the report on failure.
    #[serde(skip)]
    pub replay: Option<Field>,
    pub replay_path: Option<String>,
}

impl CheckResult {
    pub fn new(name: &str, pass: bool, detail: String) -> Self {
        Self {
            name: name.into(),
            pass,
            detail,
            replay: None,
            replay_path: None,
        }
    }

    fn with_replay(mut self, f: Option<Field>) -> Self {
        if !self.pass {
            self.replay = f;
        }
        self
    }
}

pub type Kernel<'a> = &'a dyn Fn(&Field) -> f64;

/// All suites; `kernel` stands in for the Fisher information in the
/// kinetic checks.
pub fn run_all(seed: u64, kernel: Kernel) -> Vec<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    vec![
        fisher_gaussian(kernel),
        homogeneity(&mut rng, kernel),
        subadditivity(&mut rng, kernel),
        marginal_split(&mut rng, kernel),
        product_equality(&mut rng, kernel),
        ims_refinement(),
        competitor_exactness(&mut rng),
        doubling_points(&mut rng),
        segment_convexity(&mut rng),
        weak_duality(&mut rng),
        constants(),
    ]
}

pub fn fisher_gaussian(kernel: Kernel) -> CheckResult {
    let g = Grid::new(1, 1, 0.0, 1.0, 256).unwrap();
    let p = OneBodyDensity::gaussian(&g, &[0.5], 0.1).unwrap();
    let v = kernel(&p) * 0.01;
    CheckResult::new(
        "fisher-gaussian",
        (0.99..=1.01).contains(&v),
        format!("I sigma^2 = {v}"),
    )
}

pub fn homogeneity(rng: &mut ChaCha8Rng, kernel: Kernel) -> CheckResult {
    let mut worst = 0.0f64;
    let mut bad = None;
    for k in 0..40 {
        let g = Grid::new(1, 2, 0.0, 1.0, 4 + k % 8).unwrap();
        let p = random_density(&g, rng);
        let lambda = rng.gen_range(0.1..10.0);
        let base = kernel(&p);
        let err = (kernel(&p.scaled(lambda)) - lambda * base).abs() / (lambda * base).abs().max(f64::MIN_POSITIVE);
        if err > worst {
            worst = err;
            bad = Some(p.field().clone());
        }
    }
    CheckResult::new("homogeneity", worst <= 1e-15, format!("worst relative error {worst:e}")).with_replay(bad)
}

fn plus(p: &Field, q: &Field) -> Field {
    let v = p.values().iter().zip(q.values()).map(|(a, b)| a + b).collect();
    Field::new(p.grid().clone(), v).unwrap()
}

pub fn subadditivity(rng: &mut ChaCha8Rng, kernel: Kernel) -> CheckResult {
    let mut worst = f64::INFINITY;
    let mut bad = None;
    for k in 0..40 {
        let g = Grid::new(1, 2, 0.0, 1.0, 4 + k % 8).unwrap();
        let p = random_density(&g, rng);
        let q = random_density(&g, rng);
        let (a, b) = (kernel(&p), kernel(&q));
        let slack = (a + b - kernel(&plus(&p, &q))) / (a + b).abs().max(1.0);
        if slack < worst {
            worst = slack;
            bad = Some(p.field().clone());
        }
    }
    CheckResult::new(
        "subadditivity",
        worst >= -1e-12,
        format!("worst relative slack {worst:e}"),
    )
    .with_replay(bad)
}

pub fn marginal_split(rng: &mut ChaCha8Rng, kernel: Kernel) -> CheckResult {
    let mut worst = f64::INFINITY;
    let mut bad = None;
    for k in 0..40 {
        let g = Grid::new(1, 2, 0.0, 1.0, 4 + k % 8).unwrap();
        let p = random_density(&g, rng);
        let i = IndexSet::single(0, 2).unwrap();
        let j = IndexSet::single(1, 2).unwrap();
        let full = kernel(&p);
        let slack =
            (full - kernel(&marginal(&p, &i).unwrap()) - kernel(&marginal(&p, &j).unwrap())) / full.abs().max(1.0);
        if slack < worst {
            worst = slack;
            bad = Some(p.field().clone());
        }
    }
    CheckResult::new(
        "marginal-split",
        worst >= -1e-12,
        format!("worst relative slack {worst:e}"),
    )
    .with_replay(bad)
}

pub fn product_equality(rng: &mut ChaCha8Rng, kernel: Kernel) -> CheckResult {
    let mut worst = 0.0f64;
    for k in 0..40 {
        let g = Grid::new(1, 1, 0.0, 1.0, 4 + k % 8).unwrap();
        let a = OneBodyDensity::new(random_density(&g, rng).into_field()).unwrap();
        let b = OneBodyDensity::new(random_density(&g, rng).into_field()).unwrap();
        let p = NBodyDensity::product(&[&a, &b]).unwrap();
        let sum = kernel(&a) + kernel(&b);
        worst = worst.max((kernel(&p) - sum).abs() / sum.abs().max(1.0));
    }
    CheckResult::new(
        "product-equality",
        worst <= 1e-12,
        format!("worst relative error {worst:e}"),
    )
}

fn ims_defect(m: usize) -> (f64, f64) {
    let g = Grid::new(1, 1, 0.0, 1.0, m).unwrap();
    let p = OneBodyDensity::gaussian(&g, &[0.5], 0.1).unwrap();
    let phi = |x: f64, c: f64| (-(x - c).powi(2) / 0.045).exp();
    let centers = [0.3, 0.5, 0.7];
    let eta = |k: usize| {
        Field::from_fn(g.clone(), |x| {
            phi(x[0], centers[k]) / centers.iter().map(|&c| phi(x[0], c)).sum::<f64>()
        })
    };
    let (a, b, c) = (eta(0), eta(1), eta(2));
    let s = ims_split(&p, [&a, &b, &c]).unwrap();
    (s.defect.abs(), s.left)
}

pub fn ims_refinement() -> CheckResult {
    let (d64, left) = ims_defect(64);
    let mut prev = d64;
    let mut min_ratio = f64::INFINITY;
    for m in [128, 256] {
        let (d, _) = ims_defect(m);
        min_ratio = min_ratio.min(prev / d);
        prev = d;
    }
    let rel = d64 / left;
    CheckResult::new(
        "ims-refinement",
        rel <= 0.05 && min_ratio >= 1.8,
        format!("relative defect {rel:e} at M=64, smallest refinement ratio {min_ratio}"),
    )
}

pub fn competitor_exactness(rng: &mut ChaCha8Rng) -> CheckResult {
    let cost = CostSpec::coulomb();
    let (mut tv, mut vee) = (0.0f64, 0.0f64);
    let mut bad = None;
    for n in [2usize, 3] {
        let g = Grid::new(1, n, 0.0, 1.0, 6).unwrap();
        let mut done = 0;
        while done < 10 {
            let p = random_density(&g, rng);
            let y: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
            let z: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
            let dist = y.iter().zip(&z).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            let r1 = rng.gen_range(0.1..0.6) * dist;
            let r2 = rng.gen_range(0.1..0.9) * (dist - r1);
            let Ok(st) = make_bumps_capped(&p, &y, &z, r1, r2, BumpProfile::SmoothC1, 0.5) else {
                continue;
            };
            let parts = match swap_competitor(&st, &p) {
                Ok(parts) => parts,
                Err(e) => {
                    return CheckResult::new("competitor-exactness", false, e.to_string())
                        .with_replay(Some(p.into_field()))
                }
            };
            for i in 0..n {
                let a = one_body_marginal(&parts.pbar, i).unwrap();
                let b = one_body_marginal(&p, i).unwrap();
                let e = total_variation(&a, &b).unwrap();
                if e > tv {
                    tv = e;
                    bad = Some(p.field().clone());
                }
            }
            if let Ok(rep) = lemma_conti_check(&p, &st, 0.1, &cost) {
                vee = vee.max(rep.vee_relative_error);
            }
            done += 1;
        }
    }
    CheckResult::new(
        "competitor-exactness",
        tv <= 1e-12 && vee <= 1e-10,
        format!("marginal TV {tv:e}, v_ee identity error {vee:e}"),
    )
    .with_replay(bad)
}

pub fn doubling_points(rng: &mut ChaCha8Rng) -> CheckResult {
    let g = Grid::new(1, 2, 0.0, 1.0, 8).unwrap();
    let omega = vec![true; g.states()];
    for _ in 0..30 {
        let p = random_density(&g, rng);
        if let Err(e) = find_doubling_point(&p, &omega, 3.0 * g.h(), 0.2) {
            return CheckResult::new("doubling-points", false, e.to_string()).with_replay(Some(p.into_field()));
        }
    }
    CheckResult::new(
        "doubling-points",
        true,
        "30 random densities on 8^2, delta 0.2, r = 3h".into(),
    )
}

pub fn segment_convexity(rng: &mut ChaCha8Rng) -> CheckResult {
    let g = Grid::new(1, 2, 0.0, 1.0, 8).unwrap();
    let cost = CostSpec::coulomb();
    let mut worst = f64::INFINITY;
    for _ in 0..30 {
        let p = random_density(&g, rng);
        let q = random_density(&g, rng);
        let t = rng.gen_range(0.0..1.0);
        let mix: Vec<f64> = p
            .values()
            .iter()
            .zip(q.values())
            .map(|(a, b)| (1.0 - t) * a + t * b)
            .collect();
        let mix = Field::new(g.clone(), mix).unwrap();
        let f = |x: &Field| levy_lieb_energy(x, 0.05, &cost).unwrap().total();
        let chord = (1.0 - t) * f(&p) + t * f(&q);
        worst = worst.min((chord - f(&mix)) / chord.abs().max(1.0));
    }
    CheckResult::new(
        "segment-convexity",
        worst >= -1e-10,
        format!("worst relative slack {worst:e}"),
    )
}

pub fn weak_duality(rng: &mut ChaCha8Rng) -> CheckResult {
    let g = Grid::new(1, 1, 0.0, 1.0, 6).unwrap();
    let mu = OneBodyDensity::uniform(&g).unwrap();
    let cost = CostSpec::coulomb();
    let product = NBodyDensity::product_coupling(&mu, 2).unwrap();
    let primal = levy_lieb_energy(&product, 0.05, &cost).unwrap().total();
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..10 {
        let u: Vec<f64> = (0..6).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let u = OneBodyPotential::new(&g, u).unwrap();
        let lb = dual_lower_bound(&mu, 2, &u, 0.05, &cost).unwrap();
        worst = worst.max(lb - primal);
    }
    CheckResult::new(
        "weak-duality",
        worst <= 0.0,
        format!("largest dual minus primal {worst:e}"),
    )
}

pub fn constants() -> CheckResult {
    let cost = CostSpec::coulomb();
    let c1 = c_delta(1.0, 3, 1).unwrap();
    let (alpha, eps) = (0.05, 1e-3);
    let general = decay_exponent_base(alpha, eps, &cost).sqrt() / 6.0;
    let coulomb = (alpha / eps).sqrt() / 24.0;
    let id = (general - coulomb).abs() / coulomb;
    let target = alpha0_target(0.125, 1e-5, 2, &cost).unwrap();
    let a0 = alpha0_threshold(0.125, 1e-5, 2, &cost).unwrap();
    let a0_err = (a0 - 1.0 / (2.0 * target)).abs() * 2.0 * target;
    CheckResult::new(
        "constants",
        c1 == 60.0 && id <= 1e-14 && a0_err <= 1e-12,
        format!("C(1)={c1}, exponent identity {id:e}, alpha_0 error {a0_err:e}"),
    )
}
