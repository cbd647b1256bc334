//! The subcommands. Each writes its artifacts atomically under the output
//! directory and records a step in `manifest.json`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use llgrid_core::analysis::{theorem_verdict, Verdict};
use llgrid_core::competitor::{
    lemma_conti_check, make_bumps_capped, swap_competitor, BumpProfile, ContiReport, SwapSummary,
};
use llgrid_core::grid::{
    check_in_pi_n, diagonal_mass, one_body_marginal, read_density, total_variation, write_density_text,
};
use llgrid_core::solver::{minimize_levy_lieb_from, validate_minimizer, OneBodyPotential, SolveReport, SolveStart};
use llgrid_core::{fisher_information, Field, NBodyDensity};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};
use crate::output::{eps_tag, linear_fit, num, svg_chart, write_atomic, write_json};
use crate::suites::{self, CheckResult};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Step {
    pub name: String,
    pub artifacts: Vec<String>,
    pub wall_time: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub tool_version: String,
    pub steps: Vec<Step>,
    pub pass: bool,
}

/// Append `step` to `manifest.json` in the output directory, replacing any
/// earlier step of the same name. A manifest from another config is
/// discarded.
pub fn record_step(cfg: &ExperimentConfig, step: Step) -> CliResult<()> {
    let path = cfg.out_dir.join("manifest.json");
    let mut manifest = std::fs::read_to_string(&path)
        .ok()
        .and_then(|t| serde_json::from_str::<RunManifest>(&t).ok())
        .filter(|m| m.config_hash == cfg.hash)
        .unwrap_or_else(|| RunManifest {
            config_hash: cfg.hash.clone(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            steps: Vec::new(),
            pass: true,
        });
    manifest.steps.retain(|s| s.name != step.name);
    manifest.steps.push(step);
    manifest.pass = manifest.steps.iter().all(|s| s.pass);
    write_json(&path, &manifest)
}

fn stamp(cfg: &ExperimentConfig) -> String {
    format!("config_hash={}", cfg.hash)
}

fn write_resolved_config(cfg: &ExperimentConfig) -> CliResult<String> {
    let path = cfg.out_dir.join("config.resolved.txt");
    let text = format!("# {}\n{}", stamp(cfg), cfg.canonical());
    write_atomic(&path, text.as_bytes())?;
    Ok(rel(cfg, &path))
}

fn rel(cfg: &ExperimentConfig, p: &Path) -> String {
    p.strip_prefix(&cfg.out_dir).unwrap_or(p).display().to_string()
}

/// JSON sidecar of a solver checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config_hash: String,
    pub eps: f64,
    pub iterations: usize,
    pub energy: f64,
    pub kinetic: f64,
    pub interaction: f64,
    pub marginal_residual: f64,
    pub duality_gap: Option<f64>,
    pub dual_lower_bound: Option<f64>,
    pub converged: bool,
    pub potential: Option<Vec<f64>>,
}

fn density_path(cfg: &ExperimentConfig, eps: f64) -> PathBuf {
    cfg.out_dir.join(format!("solve_eps{}.density", eps_tag(eps)))
}

fn sidecar_path(cfg: &ExperimentConfig, eps: f64) -> PathBuf {
    cfg.out_dir.join(format!("solve_eps{}.json", eps_tag(eps)))
}

fn load_checkpoint(cfg: &ExperimentConfig, eps: f64) -> Option<SolveStart> {
    let text = std::fs::read_to_string(sidecar_path(cfg, eps)).ok()?;
    let side: Checkpoint = serde_json::from_str(&text).ok()?;
    if side.config_hash != cfg.hash || side.eps != eps {
        return None;
    }
    let density = read_density(&density_path(cfg, eps)).ok()?;
    let grid = cfg.grid().ok()?;
    let potential = side.potential.and_then(|u| OneBodyPotential::new(&grid, u).ok());
    Some(SolveStart {
        density: Some(density),
        potential,
    })
}

fn density_text(cfg: &ExperimentConfig, f: &Field) -> String {
    format!("# {}\n{}", stamp(cfg), write_density_text(f))
}

pub struct Solved {
    pub eps: f64,
    pub density: NBodyDensity,
    pub report: SolveReport,
}

fn solve_one(cfg: &ExperimentConfig, eps: f64, resume: bool) -> CliResult<Solved> {
    let mu = cfg.marginal_density()?;
    let start = if resume { load_checkpoint(cfg, eps) } else { None };
    let (density, report) = minimize_levy_lieb_from(&mu, &cfg.cost, &cfg.solver_config(eps), start.as_ref())?;
    Ok(Solved { eps, density, report })
}

fn write_checkpoint(cfg: &ExperimentConfig, s: &Solved) -> CliResult<Vec<String>> {
    let dp = density_path(cfg, s.eps);
    write_atomic(&dp, density_text(cfg, &s.density).as_bytes())?;
    let r = &s.report;
    let side = Checkpoint {
        config_hash: cfg.hash.clone(),
        eps: s.eps,
        iterations: r.iterations,
        energy: r.energy.total(),
        kinetic: r.energy.kinetic,
        interaction: r.energy.interaction,
        marginal_residual: r.marginal_residual,
        duality_gap: r.duality_gap,
        dual_lower_bound: r.dual_lower_bound,
        converged: r.converged,
        potential: r.potential.as_ref().map(|u| u.values().to_vec()),
    };
    let sp = sidecar_path(cfg, s.eps);
    write_json(&sp, &side)?;
    Ok(vec![rel(cfg, &dp), rel(cfg, &sp)])
}

fn opt(x: Option<f64>) -> String {
    x.map(num).unwrap_or_default()
}

pub fn cmd_solve(cfg: &ExperimentConfig, resume: bool) -> CliResult<()> {
    if cfg.eps.is_empty() {
        return Err(CliError::Usage("eps list is empty".into()));
    }
    let t = Instant::now();
    let mut artifacts = vec![write_resolved_config(cfg)?];
    let mut csv = format!(
        "# {}\neps,energy,kinetic,interaction,marginal_residual,duality_gap,iterations,converged\n",
        stamp(cfg)
    );
    #[derive(Serialize)]
    struct Report<'a> {
        config_hash: &'a str,
        runs: Vec<&'a SolveReport>,
    }
    let mut solved = Vec::new();
    for &eps in &cfg.eps {
        let s = solve_one(cfg, eps, resume)?;
        artifacts.extend(write_checkpoint(cfg, &s)?);
        let r = &s.report;
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{}",
            num(eps),
            num(r.energy.total()),
            num(r.energy.kinetic),
            num(r.energy.interaction),
            num(r.marginal_residual),
            opt(r.duality_gap),
            r.iterations,
            r.converged
        );
        println!(
            "eps={}: energy {} (gap {}), residual {:e}, {} iterations, converged {}",
            num(eps),
            num(r.energy.total()),
            opt(r.duality_gap),
            r.marginal_residual,
            r.iterations,
            r.converged
        );
        solved.push(s);
    }
    let cp = cfg.out_dir.join("solve.csv");
    write_atomic(&cp, csv.as_bytes())?;
    let jp = cfg.out_dir.join("solve_report.json");
    write_json(
        &jp,
        &Report {
            config_hash: &cfg.hash,
            runs: solved.iter().map(|s| &s.report).collect(),
        },
    )?;
    artifacts.push(rel(cfg, &cp));
    artifacts.push(rel(cfg, &jp));
    let pass = solved.iter().all(|s| s.report.converged);
    record_step(
        cfg,
        Step {
            name: "solve".into(),
            artifacts,
            wall_time: t.elapsed().as_secs_f64(),
            pass,
        },
    )?;
    if !pass {
        let bad: Vec<String> = solved
            .iter()
            .filter(|s| !s.report.converged)
            .map(|s| num(s.eps))
            .collect();
        return Err(CliError::NonConvergence(format!("eps = {}", bad.join(", "))));
    }
    Ok(())
}

fn density_checks(cfg: &ExperimentConfig, path: &Path) -> Vec<CheckResult> {
    let p = match read_density(path) {
        Ok(p) => p,
        Err(e) => {
            return vec![CheckResult::new(
                "density-load",
                false,
                format!("{}: {e}", path.display()),
            )]
        }
    };
    let mut out = vec![CheckResult::new(
        "density-load",
        true,
        format!("{} parsed and normalized", path.display()),
    )];
    let mu = match cfg.marginal_density() {
        Ok(mu) => mu,
        Err(e) => {
            out.push(CheckResult::new("density-marginals", false, e.to_string()));
            return out;
        }
    };
    match check_in_pi_n(&p, &mu, cfg.solver.tol_marginal.max(1e-8)) {
        Ok(r) => out.push(CheckResult::new(
            "density-marginals",
            r.pass,
            format!("marginal residual {:e}", r.residual),
        )),
        Err(e) => {
            out.push(CheckResult::new("density-marginals", false, e.to_string()));
            return out;
        }
    }
    if let Some(&eps) = cfg.eps.first() {
        match validate_minimizer(&p, &mu, eps, &cfg.cost, 100, cfg.seed) {
            Ok(r) => out.push(CheckResult::new(
                "density-stationarity",
                r.pass,
                format!(
                    "best descent {:e} against threshold {:e} at eps {eps}",
                    r.best_descent, r.threshold
                ),
            )),
            Err(e) => out.push(CheckResult::new("density-stationarity", false, e.to_string())),
        }
    }
    out
}

pub fn cmd_verify(cfg: &ExperimentConfig, density: Option<&Path>) -> CliResult<()> {
    let t = Instant::now();
    let mut checks = suites::run_all(cfg.seed, &|f: &Field| fisher_information(f));
    if let Some(p) = density {
        checks.extend(density_checks(cfg, p));
    }
    let mut artifacts = vec![write_resolved_config(cfg)?];
    for c in checks.iter_mut() {
        if let Some(f) = c.replay.take() {
            let p = cfg.out_dir.join(format!("verify_replay_{}.density", c.name));
            write_atomic(&p, density_text(cfg, &f).as_bytes())?;
            c.replay_path = Some(rel(cfg, &p));
            artifacts.push(rel(cfg, &p));
        }
        println!("{} {}: {}", if c.pass { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    let pass = checks.iter().all(|c| c.pass);
    #[derive(Serialize)]
    struct Report<'a> {
        config_hash: &'a str,
        pass: bool,
        checks: &'a [CheckResult],
    }
    let jp = cfg.out_dir.join("verify.json");
    write_json(
        &jp,
        &Report {
            config_hash: &cfg.hash,
            pass,
            checks: &checks,
        },
    )?;
    artifacts.push(rel(cfg, &jp));
    record_step(
        cfg,
        Step {
            name: "verify".into(),
            artifacts,
            wall_time: t.elapsed().as_secs_f64(),
            pass,
        },
    )?;
    if !pass {
        let first = checks.iter().find(|c| !c.pass).unwrap();
        return Err(CliError::Verification(format!("{}: {}", first.name, first.detail)));
    }
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct CompetitorReport {
    pub config_hash: String,
    pub swap: SwapSummary,
    pub kinetic_lhs: f64,
    pub kinetic_rhs: f64,
    pub vee_lhs: f64,
    pub vee_rhs: f64,
    pub lemma: ContiReport,
    pub marginal_tv: f64,
    pub min_value: f64,
}

fn default_points(cfg: &ExperimentConfig) -> (Vec<f64>, Vec<f64>) {
    let at = |t: f64| cfg.a + t * (cfg.b - cfg.a);
    let mut y = Vec::with_capacity(cfg.d * cfg.n);
    let mut z = Vec::with_capacity(cfg.d * cfg.n);
    for i in 0..cfg.n {
        for _ in 0..cfg.d {
            y.push(at(if i == 0 { 0.3 } else { 0.35 }));
            z.push(at(if i == 0 { 0.7 } else { 0.2 }));
        }
    }
    (y, z)
}

pub fn cmd_competitor(cfg: &ExperimentConfig, density: Option<&Path>) -> CliResult<()> {
    let t = Instant::now();
    let p = match density {
        Some(path) => read_density(path)?,
        None => NBodyDensity::product_coupling(&cfg.marginal_density()?, cfg.n)?,
    };
    let (dy, dz) = default_points(cfg);
    let c = &cfg.competitor;
    let y = c.y.clone().unwrap_or(dy);
    let z = c.z.clone().unwrap_or(dz);
    let profile = BumpProfile::prop_decay(c.delta)?;
    let state = make_bumps_capped(&p, &y, &z, c.r1, c.r2, profile, c.lambda_max)?;
    let parts = swap_competitor(&state, &p)?;
    let eps = cfg.eps.first().copied().unwrap_or(0.1);
    let lemma = lemma_conti_check(&p, &state, eps, &cfg.cost)?;
    let mut tv = 0.0f64;
    for i in 0..p.grid().n() {
        tv = tv.max(total_variation(
            &one_body_marginal(&parts.pbar, i)?,
            &one_body_marginal(&p, i)?,
        )?);
    }
    let mut min_value = f64::INFINITY;
    for k in 0..p.grid().states() {
        let base = p.values()[k];
        let raw = base - base * state.eta1.values()[k] - base * state.eta2.values()[k]
            + parts.p1.values()[k]
            + parts.p2.values()[k];
        min_value = min_value.min(raw);
    }
    let report = CompetitorReport {
        config_hash: cfg.hash.clone(),
        swap: state.summary(),
        kinetic_lhs: lemma.kinetic_lhs,
        kinetic_rhs: lemma.kinetic_rhs,
        vee_lhs: lemma.vee_lhs,
        vee_rhs: lemma.vee_rhs,
        lemma,
        marginal_tv: tv,
        min_value,
    };
    println!(
        "kinetic {} <= {} (slack {}), v_ee {} = {} (relative error {:e}), marginal TV {:e}",
        report.kinetic_lhs,
        report.kinetic_rhs,
        report.lemma.kinetic_slack,
        report.vee_lhs,
        report.vee_rhs,
        report.lemma.vee_relative_error,
        tv
    );
    let jp = cfg.out_dir.join("competitor.json");
    write_json(&jp, &report)?;
    let pass = report.lemma.kinetic_slack >= -1e-8 && report.lemma.vee_identity_holds && tv <= 1e-12;
    let artifacts = vec![write_resolved_config(cfg)?, rel(cfg, &jp)];
    record_step(
        cfg,
        Step {
            name: "competitor".into(),
            artifacts,
            wall_time: t.elapsed().as_secs_f64(),
            pass,
        },
    )?;
    if !pass {
        return Err(CliError::Verification("swap lemma comparison failed".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub eps: f64,
    pub alpha: f64,
    pub beta: f64,
    pub diag_mass: Option<f64>,
    pub bound: Option<f64>,
    #[serde(rename = "A")]
    pub a: Option<f64>,
    pub verdict: String,
    pub energy: Option<f64>,
    pub duality_gap: Option<f64>,
    pub converged: bool,
    pub detail: Option<Verdict>,
    pub error: Option<String>,
}

fn sweep_row(cfg: &ExperimentConfig, eps: f64) -> SweepRow {
    let mut row = SweepRow {
        eps,
        alpha: cfg.alpha,
        beta: cfg.beta,
        diag_mass: None,
        bound: None,
        a: None,
        verdict: "error".into(),
        energy: None,
        duality_gap: None,
        converged: false,
        detail: None,
        error: None,
    };
    let solved = match solve_one(cfg, eps, false) {
        Ok(s) => s,
        Err(e) => {
            row.error = Some(e.to_string());
            return row;
        }
    };
    row.energy = Some(solved.report.energy.total());
    row.duality_gap = solved.report.duality_gap;
    row.converged = solved.report.converged;
    let verdict = cfg.marginal_density().and_then(|mu| {
        Ok(theorem_verdict(
            &mu,
            eps,
            cfg.alpha,
            cfg.beta,
            &cfg.cost,
            &solved.density,
            cfg.smallness,
        )?)
    });
    match verdict {
        Ok(v) => {
            row.diag_mass = Some(v.diag_mass);
            row.bound = Some(v.bound);
            row.a = Some(v.a);
            row.verdict = if row.converged {
                v.status.clone()
            } else {
                "not converged".into()
            };
            row.detail = Some(v);
        }
        Err(e) => {
            row.diag_mass = diagonal_mass(&solved.density, cfg.alpha).ok();
            row.error = Some(e.to_string());
        }
    }
    row
}

fn cell(x: Option<f64>) -> String {
    x.map(num).unwrap_or_default()
}

pub fn sweep_csv(cfg: &ExperimentConfig, rows: &[SweepRow]) -> String {
    let mut s = format!("# {}\neps,alpha,beta,diag_mass,bound,A,verdict\n", stamp(cfg));
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            num(r.eps),
            num(r.alpha),
            num(r.beta),
            cell(r.diag_mass),
            cell(r.bound),
            cell(r.a),
            r.verdict
        );
    }
    s
}

/// Points `(sqrt(alpha/eps), ln diag_mass)` with positive mass.
pub fn plot_points(rows: &[(f64, f64, f64)]) -> (Vec<f64>, Vec<f64>) {
    rows.iter()
        .filter(|(_, _, m)| *m > 0.0 && m.is_finite())
        .map(|&(eps, alpha, m)| ((alpha / eps).sqrt(), m.ln()))
        .unzip()
}

const PLOT_NOTE: &str = "Coulomb bound slope -1/24";

pub fn cmd_sweep(cfg: &ExperimentConfig) -> CliResult<()> {
    if cfg.eps.is_empty() {
        return Err(CliError::Usage("eps list is empty".into()));
    }
    let t = Instant::now();
    let rows: Vec<SweepRow> = std::thread::scope(|scope| {
        let handles: Vec<_> = cfg
            .eps
            .iter()
            .map(|&eps| scope.spawn(move || sweep_row(cfg, eps)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("sweep worker panicked"))
            .collect()
    });
    for r in &rows {
        println!(
            "eps={}: diag_mass {} bound {} A {} -> {}{}",
            num(r.eps),
            cell(r.diag_mass),
            cell(r.bound),
            cell(r.a),
            r.verdict,
            r.error.as_ref().map(|e| format!(" ({e})")).unwrap_or_default()
        );
    }
    let mut artifacts = vec![write_resolved_config(cfg)?];
    let cp = cfg.out_dir.join("sweep.csv");
    write_atomic(&cp, sweep_csv(cfg, &rows).as_bytes())?;
    let triples: Vec<(f64, f64, f64)> = rows
        .iter()
        .filter_map(|r| r.diag_mass.map(|m| (r.eps, r.alpha, m)))
        .collect();
    let (xs, ys) = plot_points(&triples);
    let fit = linear_fit(&xs, &ys);
    #[derive(Serialize)]
    struct Report<'a> {
        config_hash: &'a str,
        rows: &'a [SweepRow],
        fitted_slope: Option<f64>,
        fitted_r2: Option<f64>,
    }
    let jp = cfg.out_dir.join("sweep.json");
    write_json(
        &jp,
        &Report {
            config_hash: &cfg.hash,
            rows: &rows,
            fitted_slope: fit.map(|f| f.0),
            fitted_r2: fit.map(|f| f.2),
        },
    )?;
    let sp = cfg.out_dir.join("sweep.svg");
    let svg = svg_chart(&xs, &ys, "sqrt(alpha/eps)", "ln diag_mass", PLOT_NOTE, &stamp(cfg));
    write_atomic(&sp, svg.as_bytes())?;
    artifacts.extend([rel(cfg, &cp), rel(cfg, &jp), rel(cfg, &sp)]);
    let failed = rows.iter().any(|r| r.verdict == "fail");
    let unconverged = rows.iter().any(|r| !r.converged || r.error.is_some());
    record_step(
        cfg,
        Step {
            name: "sweep".into(),
            artifacts,
            wall_time: t.elapsed().as_secs_f64(),
            pass: !failed && !unconverged,
        },
    )?;
    if failed {
        return Err(CliError::Verification(
            "diagonal mass exceeds the bound at an in-regime eps".into(),
        ));
    }
    if unconverged {
        return Err(CliError::NonConvergence(
            "at least one sweep point did not converge".into(),
        ));
    }
    Ok(())
}

/// Read `eps, alpha, diag_mass` columns and the hash comment from a sweep CSV.
pub fn read_sweep_csv(text: &str) -> CliResult<(Vec<(f64, f64, f64)>, String)> {
    let mut stamp = String::new();
    let mut header: Option<Vec<String>> = None;
    let mut rows = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(c) = line.strip_prefix('#') {
            if stamp.is_empty() {
                stamp = c.trim().to_string();
            }
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        let Some(h) = &header else {
            header = Some(cells.iter().map(|s| s.trim().to_string()).collect());
            continue;
        };
        let col = |name: &str| -> CliResult<Option<f64>> {
            let i = h
                .iter()
                .position(|c| c == name)
                .ok_or_else(|| CliError::Usage(format!("sweep CSV has no {name} column")))?;
            let v = cells.get(i).map(|s| s.trim()).unwrap_or("");
            if v.is_empty() {
                return Ok(None);
            }
            v.parse()
                .map(Some)
                .map_err(|_| CliError::Usage(format!("bad {name} value {v:?}")))
        };
        if let (Some(eps), Some(alpha), Some(m)) = (col("eps")?, col("alpha")?, col("diag_mass")?) {
            rows.push((eps, alpha, m));
        }
    }
    if header.is_none() {
        return Err(CliError::Usage("sweep CSV has no header".into()));
    }
    Ok((rows, stamp))
}

pub fn cmd_plot(input: &Path, output: &Path) -> CliResult<()> {
    let text =
        std::fs::read_to_string(input).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", input.display())))?;
    let (rows, stamp) = read_sweep_csv(&text)?;
    let (xs, ys) = plot_points(&rows);
    if xs.is_empty() {
        return Err(CliError::Usage("no rows with positive diag_mass to plot".into()));
    }
    write_atomic(
        output,
        svg_chart(&xs, &ys, "sqrt(alpha/eps)", "ln diag_mass", PLOT_NOTE, &stamp).as_bytes(),
    )?;
    if let Some((slope, _, r2)) = linear_fit(&xs, &ys) {
        println!(
            "fitted slope {slope} (R^2 {r2}) over {} points -> {}",
            xs.len(),
            output.display()
        );
    }
    Ok(())
}
