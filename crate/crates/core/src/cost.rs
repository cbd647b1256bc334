//! Pairwise repulsive costs `c(x, y)` with radial envelopes `m <= c <= M`.
//!
//! All shipped families are radial, so `m = M = c` as functions of `|x - y|`.
//! Coincident grid nodes (`x_i == x_j`) are valued at `m(scale * h)` when a
//! coincidence cap is configured.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum CostFamily {
    /// `c = 0`. Not a valid interaction for the localization results (its
    /// envelope does not blow up) but useful as a control.
    Zero,
    /// `c = 1 / |x - y|`.
    Coulomb,
    /// `c = |x - y|^(-s)`.
    InversePower { s: f64 },
    /// Samples `(t, c)` interpolated linearly in `(ln t, ln c)`.
    Tabulated { samples: Vec<(f64, f64)> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostSpec {
    family: CostFamily,
    cap_scale: Option<f64>,
}

pub const DEFAULT_CAP_SCALE: f64 = 0.5;

impl CostSpec {
    pub fn coulomb() -> Self {
        Self {
            family: CostFamily::Coulomb,
            cap_scale: Some(DEFAULT_CAP_SCALE),
        }
    }

    pub fn zero() -> Self {
        Self {
            family: CostFamily::Zero,
            cap_scale: Some(DEFAULT_CAP_SCALE),
        }
    }

    pub fn inverse_power(s: f64) -> Result<Self> {
        if !(s > 0.0 && s.is_finite()) {
            return Err(Error::Domain(format!(
                "inverse-power exponent must be positive, got {s}"
            )));
        }
        Ok(Self {
            family: CostFamily::InversePower { s },
            cap_scale: Some(DEFAULT_CAP_SCALE),
        })
    }

    pub fn tabulated(mut samples: Vec<(f64, f64)>) -> Result<Self> {
        if samples.len() < 2 {
            return Err(Error::Domain("cost table needs at least two samples".into()));
        }
        samples.sort_by(|a, b| a.0.total_cmp(&b.0));
        for w in samples.windows(2) {
            if w[0].0 == w[1].0 {
                return Err(Error::Domain(format!("duplicate table abscissa {}", w[0].0)));
            }
        }
        if samples
            .iter()
            .any(|&(t, c)| !(t > 0.0 && c > 0.0 && t.is_finite() && c.is_finite()))
        {
            return Err(Error::Domain("cost table entries must be positive and finite".into()));
        }
        Ok(Self {
            family: CostFamily::Tabulated { samples },
            cap_scale: Some(DEFAULT_CAP_SCALE),
        })
    }

    /// Two whitespace-separated columns `t c`; `#` starts a comment.
    pub fn read_table(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut samples = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split_whitespace().collect();
            let parse = |s: &str| {
                s.parse::<f64>()
                    .map_err(|_| Error::Parse(format!("{}:{}: bad number {s:?}", path.display(), lineno + 1)))
            };
            if cols.len() != 2 {
                return Err(Error::Parse(format!(
                    "{}:{}: expected two columns",
                    path.display(),
                    lineno + 1
                )));
            }
            samples.push((parse(cols[0])?, parse(cols[1])?));
        }
        Self::tabulated(samples)
    }

    pub fn with_cap_scale(mut self, scale: Option<f64>) -> Self {
        self.cap_scale = scale;
        self
    }

    pub fn family(&self) -> &CostFamily {
        &self.family
    }

    pub fn cap_scale(&self) -> Option<f64> {
        self.cap_scale
    }

    pub fn is_coulomb(&self) -> bool {
        matches!(self.family, CostFamily::Coulomb)
    }

    /// Cost as a function of separation `t > 0`.
    pub fn radial(&self, t: f64) -> f64 {
        match &self.family {
            CostFamily::Zero => 0.0,
            CostFamily::Coulomb => 1.0 / t,
            CostFamily::InversePower { s } => t.powf(-s),
            CostFamily::Tabulated { samples } => log_log_interp(samples, t),
        }
    }

    /// Lower envelope `m(t)`.
    pub fn lower_envelope(&self, t: f64) -> f64 {
        self.radial(t)
    }

    /// Upper envelope `M(t)`.
    pub fn upper_envelope(&self, t: f64) -> f64 {
        self.radial(t)
    }

    /// `c(x, y)`; `+inf` at coincidence.
    pub fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        let t = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        if t == 0.0 {
            match self.family {
                CostFamily::Zero => 0.0,
                _ => f64::INFINITY,
            }
        } else {
            self.radial(t)
        }
    }

    /// Value substituted at coincident nodes, `m(scale * h)`.
    pub fn coincidence_value(&self, h: f64) -> Option<f64> {
        match self.family {
            CostFamily::Zero => Some(0.0),
            _ => self.cap_scale.map(|s| self.lower_envelope(s * h)),
        }
    }

    /// Whether `m(t) -> inf` as `t -> 0+`.
    pub fn envelope_diverges(&self) -> bool {
        match &self.family {
            CostFamily::Zero => false,
            CostFamily::Coulomb | CostFamily::InversePower { .. } => true,
            CostFamily::Tabulated { samples } => {
                let (t0, c0) = samples[0];
                let (t1, c1) = samples[1];
                (c1.ln() - c0.ln()) / (t1.ln() - t0.ln()) < 0.0
            }
        }
    }

    /// Sample `count` random pairs in the box and check `m <= c <= M`, plus
    /// monotonicity of the envelopes on a log-spaced set.
    pub fn check_envelopes(&self, d: usize, a: f64, b: f64, count: usize, rng: &mut impl Rng) -> Result<()> {
        let mut x = vec![0.0; d];
        let mut y = vec![0.0; d];
        for _ in 0..count {
            for (xi, yi) in x.iter_mut().zip(y.iter_mut()) {
                *xi = rng.gen_range(a..b);
                *yi = rng.gen_range(a..b);
            }
            let t = x.iter().zip(&y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
            if t == 0.0 {
                continue;
            }
            let c = self.eval(&x, &y);
            let (lo, hi) = (self.lower_envelope(t), self.upper_envelope(t));
            if !(lo <= c * (1.0 + 1e-14) && c <= hi * (1.0 + 1e-14)) {
                return Err(Error::Constraint(format!(
                    "envelope violated at t = {t}: {lo} <= {c} <= {hi}"
                )));
            }
        }
        let ts: Vec<f64> = (0..200).map(|k| 1e-4 * 10f64.powf(k as f64 * 8.0 / 199.0)).collect();
        for w in ts.windows(2) {
            if self.lower_envelope(w[1]) > self.lower_envelope(w[0]) * (1.0 + 1e-14)
                || self.upper_envelope(w[1]) > self.upper_envelope(w[0]) * (1.0 + 1e-14)
            {
                return Err(Error::Constraint(format!(
                    "envelope increases between {} and {}",
                    w[0], w[1]
                )));
            }
        }
        Ok(())
    }

    /// Matrix of `c` between every pair of one-body nodes; coincident entries
    /// hold the cap, or `+inf` without one.
    pub fn pair_table(&self, grid: &Grid) -> Vec<f64> {
        let g1 = grid.one_body();
        let s = g1.states();
        let points: Vec<Vec<f64>> = (0..s).map(|k| g1.point(k)).collect();
        let cap = self.coincidence_value(grid.h()).unwrap_or(f64::INFINITY);
        let mut table = vec![0.0; s * s];
        for i in 0..s {
            for j in 0..s {
                table[i * s + j] = if i == j { cap } else { self.eval(&points[i], &points[j]) };
            }
        }
        table
    }

    /// `v_ee(x) = sum_{i<j} c(x_i, x_j)` at every node of the N-body grid.
    pub fn pair_potential(&self, grid: &Grid) -> Vec<f64> {
        let (d, n) = (grid.d(), grid.n());
        let g1 = grid.one_body();
        let s = g1.states();
        let table = self.pair_table(grid);
        let mut out = Vec::with_capacity(grid.states());
        let mut sites = vec![0usize; n];
        grid.for_each_node(|_, idx| {
            for (p, site) in sites.iter_mut().enumerate() {
                *site = g1.ravel(&idx[p * d..(p + 1) * d]);
            }
            let mut v = 0.0;
            for i in 0..n {
                for j in (i + 1)..n {
                    v += table[sites[i] * s + sites[j]];
                }
            }
            out.push(v);
        });
        out
    }

    /// `C_1(x) = sum_{i >= 2} c(x_1, x_i)` at every node.
    pub fn first_particle_potential(&self, grid: &Grid) -> Vec<f64> {
        let (d, n) = (grid.d(), grid.n());
        let g1 = grid.one_body();
        let s = g1.states();
        let table = self.pair_table(grid);
        let mut out = Vec::with_capacity(grid.states());
        grid.for_each_node(|_, idx| {
            let first = g1.ravel(&idx[..d]);
            let v: f64 = (1..n)
                .map(|j| table[first * s + g1.ravel(&idx[j * d..(j + 1) * d])])
                .sum();
            out.push(v);
        });
        out
    }

    /// Flat `key=value` lines in the experiment-config vocabulary.
    pub fn to_config_lines(&self, table_path: Option<&str>) -> Vec<String> {
        let mut lines = Vec::new();
        match &self.family {
            CostFamily::Zero => lines.push("cost.family=zero".to_string()),
            CostFamily::Coulomb => lines.push("cost.family=coulomb".to_string()),
            CostFamily::InversePower { s } => {
                lines.push("cost.family=power".to_string());
                lines.push(format!("cost.power.s={s}"));
            }
            CostFamily::Tabulated { .. } => {
                lines.push("cost.family=table".to_string());
                if let Some(p) = table_path {
                    lines.push(format!("cost.table.path={p}"));
                }
            }
        }
        match self.cap_scale {
            Some(s) => lines.push(format!("cost.cap.scale={s}")),
            None => lines.push("cost.cap.scale=none".to_string()),
        }
        lines
    }
}

fn log_log_interp(samples: &[(f64, f64)], t: f64) -> f64 {
    let k = samples.partition_point(|&(s, _)| s <= t);
    let i = k.clamp(1, samples.len() - 1) - 1;
    let (t0, c0) = samples[i];
    let (t1, c1) = samples[i + 1];
    let slope = (c1.ln() - c0.ln()) / (t1.ln() - t0.ln());
    (c0.ln() + slope * (t.ln() - t0.ln())).exp()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn coulomb_envelopes() {
        let c = CostSpec::coulomb();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        c.check_envelopes(3, -1.0, 1.0, 10_000, &mut rng).unwrap();
        let h = 0.01;
        assert!(c.lower_envelope(h / 10.0) > 10.0 * c.lower_envelope(h) * 0.999);
        assert_eq!(c.eval(&[0.0], &[1.0]), 1.0);
        assert_eq!(c.eval(&[0.5], &[0.5]), f64::INFINITY);
        assert_eq!(c.coincidence_value(h), Some(2.0 / h));
        assert!(c.envelope_diverges());
    }

    #[test]
    fn power_and_table_families() {
        let p = CostSpec::inverse_power(2.0).unwrap();
        assert!((p.radial(0.5) - 4.0).abs() < 1e-15);
        assert!(p.lower_envelope(1e-3) > 10.0 * p.lower_envelope(1e-2));
        assert!(CostSpec::inverse_power(-1.0).is_err());

        let samples: Vec<(f64, f64)> = [0.01, 0.1, 1.0, 10.0].iter().map(|&t| (t, 1.0 / t)).collect();
        let t = CostSpec::tabulated(samples).unwrap();
        for x in [0.003, 0.05, 0.7, 3.0, 40.0] {
            assert!((t.radial(x) * x - 1.0).abs() < 1e-12);
        }
        assert!(t.envelope_diverges());
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        t.check_envelopes(1, 0.0, 1.0, 10_000, &mut rng).unwrap();
        assert!(!CostSpec::zero().envelope_diverges());
    }

    #[test]
    fn pair_potential_sums_pairs() {
        let g = Grid::new(1, 3, 0.0, 3.0, 4).unwrap();
        let v = CostSpec::coulomb().pair_potential(&g);
        // Node (0, 1, 3) -> 1 + 1/3 + 1/2.
        let flat = g.ravel(&[0, 1, 3]);
        assert!((v[flat] - 11.0 / 6.0).abs() < 1e-15);
        let c1 = CostSpec::coulomb().first_particle_potential(&g);
        assert!((c1[flat] - (1.0 + 1.0 / 3.0)).abs() < 1e-15);
        let uncapped = CostSpec::coulomb().with_cap_scale(None).pair_potential(&g);
        assert!(uncapped[g.ravel(&[1, 1, 3])].is_infinite());
    }
}
