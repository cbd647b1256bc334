//! Flat `key=value` experiment configuration.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use llgrid_core::grid::read_density;
use llgrid_core::solver::{SolverConfig, SolverMethod};
use llgrid_core::{CostSpec, Grid, OneBodyDensity};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};
use crate::output::num;

#[derive(Debug, Clone, PartialEq)]
pub enum MarginalSpec {
    Uniform,
    Gaussian {
        center: Vec<f64>,
        sigma: f64,
    },
    /// One-body density file in the `llgrid v1` format.
    Table {
        path: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverSettings {
    pub method: SolverMethod,
    pub max_outer_iters: Option<usize>,
    pub tol_marginal: f64,
    pub tol_energy: f64,
    pub tol_gap: f64,
    pub eigen_tol: f64,
    pub symmetrize: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompetitorSettings {
    pub y: Option<Vec<f64>>,
    pub z: Option<Vec<f64>>,
    pub r1: f64,
    pub r2: f64,
    pub delta: f64,
    pub lambda_max: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub d: usize,
    pub n: usize,
    pub a: f64,
    pub b: f64,
    pub m: usize,
    pub marginal: MarginalSpec,
    pub cost: CostSpec,
    pub cost_table: Option<PathBuf>,
    pub eps: Vec<f64>,
    pub alpha: f64,
    pub beta: f64,
    pub smallness: f64,
    /// `beta` used in the one-step decay precondition.
    pub decay_beta: f64,
    pub decay_delta: f64,
    pub solver: SolverSettings,
    pub competitor: CompetitorSettings,
    pub out_dir: PathBuf,
    pub seed: u64,
    /// SHA-256 of the canonical text plus referenced file contents.
    pub hash: String,
}

const KEYS: &[&str] = &[
    "grid.d",
    "grid.n",
    "grid.a",
    "grid.b",
    "grid.m",
    "marginal",
    "marginal.center",
    "marginal.sigma",
    "marginal.path",
    "cost.family",
    "cost.power.s",
    "cost.cap.scale",
    "cost.table.path",
    "eps",
    "alpha",
    "beta",
    "smallness",
    "decay.beta",
    "decay.delta",
    "solver.method",
    "solver.max_outer_iters",
    "solver.tol_marginal",
    "solver.tol_energy",
    "solver.tol_gap",
    "solver.eigen_tol",
    "solver.symmetrize",
    "competitor.y",
    "competitor.z",
    "competitor.r1",
    "competitor.r2",
    "competitor.delta",
    "competitor.lambda_max",
    "output.dir",
    "seed",
];

/// Parse `key=value` lines; `#` starts a comment line.
pub fn parse_pairs(text: &str) -> CliResult<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("line {}: expected key=value, got {line:?}", no + 1)))?;
        let (k, v) = (k.trim().to_string(), v.trim().to_string());
        if out.insert(k.clone(), v).is_some() {
            return Err(CliError::Config(format!("line {}: duplicate key {k}", no + 1)));
        }
    }
    Ok(out)
}

struct Reader {
    map: BTreeMap<String, String>,
}

impl Reader {
    fn raw(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(String::as_str)
    }

    fn parse<T: std::str::FromStr>(&self, key: &str, default: T) -> CliResult<T> {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| CliError::Config(format!("{key}: cannot parse {v:?}"))),
        }
    }

    fn required<T: std::str::FromStr>(&self, key: &str) -> CliResult<T> {
        let v = self
            .raw(key)
            .ok_or_else(|| CliError::Config(format!("missing key {key}")))?;
        v.parse()
            .map_err(|_| CliError::Config(format!("{key}: cannot parse {v:?}")))
    }

    fn list(&self, key: &str) -> CliResult<Option<Vec<f64>>> {
        let Some(v) = self.raw(key) else { return Ok(None) };
        if v.is_empty() {
            return Ok(Some(Vec::new()));
        }
        v.split(',')
            .map(|s| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|_| CliError::Config(format!("{key}: cannot parse {s:?}")))
            })
            .collect::<CliResult<Vec<_>>>()
            .map(Some)
    }
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = PathBuf::from(p);
    if p.is_absolute() {
        p
    } else {
        base.join(p)
    }
}

fn join(xs: &[f64]) -> String {
    xs.iter().map(|&x| num(x)).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    pub fn load(path: &Path, overrides: &[String]) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_text(&text, &base, overrides)
    }

    /// Relative paths are resolved against `base`.
    pub fn from_text(text: &str, base: &Path, overrides: &[String]) -> CliResult<Self> {
        let mut map = parse_pairs(text)?;
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("--set expects key=value, got {o:?}")))?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        if let Some(bad) = map.keys().find(|k| !KEYS.contains(&k.as_str())) {
            return Err(CliError::Config(format!("unknown key {bad}")));
        }
        let r = Reader { map };
        let d: usize = r.parse("grid.d", 1)?;
        let n: usize = r.parse("grid.n", 2)?;
        let a: f64 = r.parse("grid.a", 0.0)?;
        let b: f64 = r.parse("grid.b", 1.0)?;
        let m: usize = r.required("grid.m")?;

        let marginal = match r.raw("marginal").unwrap_or("uniform") {
            "uniform" => MarginalSpec::Uniform,
            "gaussian" => {
                let center = r.list("marginal.center")?.unwrap_or_else(|| vec![(a + b) / 2.0; d]);
                if center.len() != d {
                    return Err(CliError::Config(format!("marginal.center needs {d} coordinates")));
                }
                MarginalSpec::Gaussian {
                    center,
                    sigma: r.required("marginal.sigma")?,
                }
            }
            "table" => {
                let p: String = r.required("marginal.path")?;
                MarginalSpec::Table {
                    path: resolve(base, &p),
                }
            }
            other => return Err(CliError::Config(format!("marginal: unknown kind {other:?}"))),
        };

        let mut cost_table = None;
        let cost = match r.raw("cost.family").unwrap_or("coulomb") {
            "coulomb" => CostSpec::coulomb(),
            "zero" => CostSpec::zero(),
            "power" => CostSpec::inverse_power(r.required("cost.power.s")?)?,
            "table" => {
                let p: String = r.required("cost.table.path")?;
                let p = resolve(base, &p);
                let c = CostSpec::read_table(&p)
                    .map_err(|e| CliError::Config(format!("cost.table.path {}: {e}", p.display())))?;
                cost_table = Some(p);
                c
            }
            other => return Err(CliError::Config(format!("cost.family: unknown family {other:?}"))),
        };
        let cost = match r.raw("cost.cap.scale") {
            None => cost,
            Some("none") => cost.with_cap_scale(None),
            Some(v) => {
                let s: f64 = v
                    .parse()
                    .map_err(|_| CliError::Config(format!("cost.cap.scale: cannot parse {v:?}")))?;
                if !(s > 0.0) {
                    return Err(CliError::Config("cost.cap.scale must be positive".into()));
                }
                cost.with_cap_scale(Some(s))
            }
        };

        let eps = r.list("eps")?.unwrap_or_default();
        if let Some(e) = eps.iter().find(|e| !(**e > 0.0) || !e.is_finite()) {
            return Err(CliError::Config(format!("eps values must be positive, got {e}")));
        }
        let method = match r.raw("solver.method").unwrap_or("dual-ascent") {
            "dual-ascent" => SolverMethod::DualAscent,
            "projected-gradient" => SolverMethod::ProjectedGradient,
            other => return Err(CliError::Config(format!("solver.method: unknown method {other:?}"))),
        };
        let defaults = SolverConfig::new(n.max(1), 1.0);
        let solver = SolverSettings {
            method,
            max_outer_iters: r
                .raw("solver.max_outer_iters")
                .map(|_| r.required("solver.max_outer_iters"))
                .transpose()?,
            tol_marginal: r.parse("solver.tol_marginal", defaults.tol_marginal)?,
            tol_energy: r.parse("solver.tol_energy", defaults.tol_energy)?,
            tol_gap: r.parse("solver.tol_gap", defaults.tol_gap)?,
            eigen_tol: r.parse("solver.eigen_tol", defaults.eigen_tol)?,
            symmetrize: r.parse("solver.symmetrize", defaults.symmetrize_each_iter)?,
        };
        let competitor = CompetitorSettings {
            y: r.list("competitor.y")?,
            z: r.list("competitor.z")?,
            r1: r.parse("competitor.r1", 0.15 * (b - a))?,
            r2: r.parse("competitor.r2", 0.15 * (b - a))?,
            delta: r.parse("competitor.delta", 0.5)?,
            lambda_max: r.parse("competitor.lambda_max", 0.5)?,
        };
        let out: String = r.parse("output.dir", "out".to_string())?;
        let mut cfg = Self {
            d,
            n,
            a,
            b,
            m,
            marginal,
            cost,
            cost_table,
            eps,
            alpha: r.parse("alpha", 0.05)?,
            beta: r.parse("beta", 0.12)?,
            smallness: r.parse("smallness", 0.01)?,
            decay_beta: r.parse("decay.beta", 3.0)?,
            decay_delta: r.parse("decay.delta", 0.5)?,
            solver,
            competitor,
            out_dir: resolve(base, &out),
            seed: r.parse("seed", 0)?,
            hash: String::new(),
        };
        cfg.grid()?;
        cfg.hash = cfg.compute_hash()?;
        Ok(cfg)
    }

    /// Every key with its effective value, in a fixed order.
    pub fn canonical(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "grid.d={}", self.d);
        let _ = writeln!(s, "grid.n={}", self.n);
        let _ = writeln!(s, "grid.a={}", num(self.a));
        let _ = writeln!(s, "grid.b={}", num(self.b));
        let _ = writeln!(s, "grid.m={}", self.m);
        match &self.marginal {
            MarginalSpec::Uniform => s.push_str("marginal=uniform\n"),
            MarginalSpec::Gaussian { center, sigma } => {
                let _ = writeln!(
                    s,
                    "marginal=gaussian\nmarginal.center={}\nmarginal.sigma={}",
                    join(center),
                    num(*sigma)
                );
            }
            MarginalSpec::Table { path } => {
                let _ = writeln!(s, "marginal=table\nmarginal.path={}", path.display());
            }
        }
        let table = self.cost_table.as_ref().map(|p| p.display().to_string());
        for line in self.cost.to_config_lines(table.as_deref()) {
            let _ = writeln!(s, "{line}");
        }
        let _ = writeln!(s, "eps={}", join(&self.eps));
        let _ = writeln!(s, "alpha={}", num(self.alpha));
        let _ = writeln!(s, "beta={}", num(self.beta));
        let _ = writeln!(s, "smallness={}", num(self.smallness));
        let _ = writeln!(s, "decay.beta={}", num(self.decay_beta));
        let _ = writeln!(s, "decay.delta={}", num(self.decay_delta));
        let method = match self.solver.method {
            SolverMethod::DualAscent => "dual-ascent",
            SolverMethod::ProjectedGradient => "projected-gradient",
        };
        let _ = writeln!(s, "solver.method={method}");
        if let Some(k) = self.solver.max_outer_iters {
            let _ = writeln!(s, "solver.max_outer_iters={k}");
        }
        let _ = writeln!(s, "solver.tol_marginal={}", num(self.solver.tol_marginal));
        let _ = writeln!(s, "solver.tol_energy={}", num(self.solver.tol_energy));
        let _ = writeln!(s, "solver.tol_gap={}", num(self.solver.tol_gap));
        let _ = writeln!(s, "solver.eigen_tol={}", num(self.solver.eigen_tol));
        let _ = writeln!(s, "solver.symmetrize={}", self.solver.symmetrize);
        let c = &self.competitor;
        if let Some(y) = &c.y {
            let _ = writeln!(s, "competitor.y={}", join(y));
        }
        if let Some(z) = &c.z {
            let _ = writeln!(s, "competitor.z={}", join(z));
        }
        let _ = writeln!(s, "competitor.r1={}", num(c.r1));
        let _ = writeln!(s, "competitor.r2={}", num(c.r2));
        let _ = writeln!(s, "competitor.delta={}", num(c.delta));
        let _ = writeln!(s, "competitor.lambda_max={}", num(c.lambda_max));
        let _ = writeln!(s, "seed={}", self.seed);
        s
    }

    fn compute_hash(&self) -> CliResult<String> {
        let mut h = Sha256::new();
        h.update(self.canonical().as_bytes());
        let files = [
            match &self.marginal {
                MarginalSpec::Table { path } => Some(path.clone()),
                _ => None,
            },
            self.cost_table.clone(),
        ];
        for p in files.into_iter().flatten() {
            let bytes = std::fs::read(&p).map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display())))?;
            h.update(b"\0file\0");
            h.update(&bytes);
        }
        Ok(format!("{:x}", h.finalize()))
    }

    pub fn grid(&self) -> CliResult<Grid> {
        Ok(Grid::new(self.d, self.n, self.a, self.b, self.m)?)
    }

    pub fn marginal_density(&self) -> CliResult<OneBodyDensity> {
        let g1 = self.grid()?.one_body();
        match &self.marginal {
            MarginalSpec::Uniform => Ok(OneBodyDensity::uniform(&g1)?),
            MarginalSpec::Gaussian { center, sigma } => Ok(OneBodyDensity::gaussian(&g1, center, *sigma)?),
            MarginalSpec::Table { path } => {
                let p = read_density(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
                if p.grid() != &g1 {
                    return Err(CliError::Config(format!(
                        "{} is not on the configured one-body grid",
                        path.display()
                    )));
                }
                Ok(OneBodyDensity::new(p.into_field())?)
            }
        }
    }

    pub fn solver_config(&self, eps: f64) -> SolverConfig {
        let mut c = SolverConfig::new(self.n, eps);
        c.method = self.solver.method;
        if let Some(k) = self.solver.max_outer_iters {
            c.max_outer_iters = k;
        }
        c.tol_marginal = self.solver.tol_marginal;
        c.tol_energy = self.solver.tol_energy;
        c.tol_gap = self.solver.tol_gap;
        c.eigen_tol = self.solver.eigen_tol;
        c.symmetrize_each_iter = self.solver.symmetrize;
        c.seed = self.seed;
        c
    }

    pub fn short_hash(&self) -> &str {
        &self.hash[..12]
    }
}
