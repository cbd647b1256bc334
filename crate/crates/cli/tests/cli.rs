use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use llgrid::config::ExperimentConfig;
use llgrid::output::{linear_fit, write_atomic};
use llgrid::suites;
use llgrid_core::{fisher_information, Field, Grid, OneBodyDensity};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_llgrid"))
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let p = dir.join("exp.cfg");
    std::fs::write(&p, body).unwrap();
    p
}

fn run(cfg: &Path, args: &[&str]) -> Output {
    bin().arg("--config").arg(cfg).args(args).output().unwrap()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn single_particle_energy_is_eps_times_fisher() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "grid.n=1\ngrid.m=32\nmarginal=gaussian\nmarginal.sigma=0.15\neps=0.02\noutput.dir=out\n",
    );
    let out = run(&cfg, &["solve"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let side = json(&dir.path().join("out/solve_eps2e-2.json"));
    let g = Grid::new(1, 1, 0.0, 1.0, 32).unwrap();
    let mu = OneBodyDensity::gaussian(&g, &[0.5], 0.15).unwrap();
    let expect = 0.02 * fisher_information(&mu);
    let got = side["energy"].as_f64().unwrap();
    assert!((got - expect).abs() <= 1e-12 * expect, "{got} vs {expect}");
}

/// Two sites, two particles: couplings of the uniform marginal form the
/// family `q00 = q11 = t`, `q01 = q10 = 1/2 - t`, so the optimum is a
/// one-dimensional minimization done here independently.
#[test]
fn two_site_solve_matches_coupling_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let eps = 0.05;
    let cfg = write_config(dir.path(), &format!("grid.m=2\neps={eps}\noutput.dir=out\n"));
    let out = run(&cfg, &["solve"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let side = json(&dir.path().join("out/solve_eps5e-2.json"));
    let got = side["energy"].as_f64().unwrap();

    // Nodes sit on both ends, so h = 1 and densities equal node masses.
    // Coincident pairs cost m(h/2) = 2, separated pairs 1/h = 1.
    // Fisher: four edges, each joining a diagonal and an off-diagonal node.
    let energy = |t: f64| {
        let s = t.sqrt() - (0.5 - t).sqrt();
        eps * 16.0 * s * s + 2.0 * 2.0 * t + 2.0 * (0.5 - t)
    };
    let (mut lo, mut hi) = (0.0f64, 0.5f64);
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..200 {
        let a = hi - phi * (hi - lo);
        let b = lo + phi * (hi - lo);
        if energy(a) < energy(b) {
            hi = b;
        } else {
            lo = a;
        }
    }
    let oracle = energy(0.5 * (lo + hi));
    assert!((got - oracle).abs() <= 1e-9 * oracle, "{got} vs {oracle}");
}

#[test]
fn rerun_is_bitwise_identical_and_resume_is_immediate() {
    let dir = tempfile::tempdir().unwrap();
    let body = "grid.m=12\neps=1e-2,3e-3\n";
    let cfg = write_config(dir.path(), body);
    for sub in ["a", "b"] {
        let out = bin()
            .arg("--config")
            .arg(&cfg)
            .arg("--out-dir")
            .arg(dir.path().join(sub))
            .arg("solve")
            .output()
            .unwrap();
        assert!(out.status.success());
    }
    let read = |s: &str, f: &str| std::fs::read(dir.path().join(s).join(f)).unwrap();
    assert_eq!(read("a", "solve.csv"), read("b", "solve.csv"));
    assert_eq!(read("a", "solve_eps3e-3.density"), read("b", "solve_eps3e-3.density"));

    let before = json(&dir.path().join("a/solve_eps3e-3.json"));
    let out = bin()
        .arg("--config")
        .arg(&cfg)
        .arg("--out-dir")
        .arg(dir.path().join("a"))
        .args(["solve", "--resume"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let after = json(&dir.path().join("a/solve_eps3e-3.json"));
    assert!(after["iterations"].as_u64().unwrap() <= 2);
    let (e0, e1) = (before["energy"].as_f64().unwrap(), after["energy"].as_f64().unwrap());
    assert!((e0 - e1).abs() <= 1e-12 * e0, "{e0} vs {e1}");
}

#[test]
fn manifest_artifacts_exist_and_carry_the_hash() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "grid.m=12\neps=1e-2,3e-3,1e-3\noutput.dir=out\n");
    assert!(run(&cfg, &["solve"]).status.success());
    let out = run(&cfg, &["sweep"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let manifest = json(&dir.path().join("out/manifest.json"));
    let hash = manifest["config_hash"].as_str().unwrap().to_string();
    assert_eq!(hash.len(), 64);
    let steps = manifest["steps"].as_array().unwrap();
    assert_eq!(steps.len(), 2);
    for step in steps {
        for a in step["artifacts"].as_array().unwrap() {
            let text = std::fs::read_to_string(dir.path().join("out").join(a.as_str().unwrap())).unwrap();
            assert!(text.contains(&hash), "{a} lacks the config hash");
        }
    }
    let leftovers: Vec<_> = std::fs::read_dir(dir.path().join("out"))
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name().to_string_lossy().contains(".tmp-"))
        .collect();
    assert!(leftovers.is_empty());
}

#[test]
fn sweep_rows_plot_and_columns() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "grid.m=16\noutput.dir=out\n");
    let out = run(
        &cfg,
        &[
            "sweep",
            "--eps-list",
            "1e-2,3e-3,1e-3",
            "--alpha",
            "0.1",
            "--beta",
            "0.12",
        ],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("out/sweep.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(lines[0], "eps,alpha,beta,diag_mass,bound,A,verdict");
    let mass: Vec<f64> = lines[1..]
        .iter()
        .map(|l| l.split(',').nth(3).unwrap().parse().unwrap())
        .collect();
    assert_eq!(mass.len(), 3);
    assert!(mass.windows(2).all(|w| w[1] < w[0]), "{mass:?}");
    let svg = std::fs::read_to_string(dir.path().join("out/sweep.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.contains("fitted slope") && svg.contains("<polyline"));

    let plot = bin()
        .args(["plot", "--input"])
        .arg(dir.path().join("out/sweep.csv"))
        .arg("--output")
        .arg(dir.path().join("replot.svg"))
        .output()
        .unwrap();
    assert!(plot.status.success());
    assert!(std::fs::read_to_string(dir.path().join("replot.svg"))
        .unwrap()
        .contains("</svg>"));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "grid.m=8\nbogus.key=1\n");
    assert_eq!(run(&cfg, &["solve"]).status.code(), Some(2));
    let cfg = write_config(dir.path(), "grid.m=8\noutput.dir=out\n");
    assert_eq!(run(&cfg, &["sweep"]).status.code(), Some(2));
    assert_eq!(run(&cfg, &["sweep", "--eps-list", ""]).status.code(), Some(2));
    let cfg = write_config(
        dir.path(),
        "grid.m=12\neps=1e-3\nsolver.max_outer_iters=1\noutput.dir=out\n",
    );
    assert_eq!(run(&cfg, &["solve"]).status.code(), Some(3));
    let cfg = write_config(dir.path(), "grid.n=3\ngrid.m=1000\neps=1e-2\n");
    assert_eq!(run(&cfg, &["solve"]).status.code(), Some(2));
    assert_eq!(bin().arg("frobnicate").output().unwrap().status.code(), Some(2));
}

#[test]
fn verify_passes_and_rejects_a_tampered_density() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "grid.m=10\neps=2e-2\noutput.dir=out\n");
    assert!(run(&cfg, &["solve"]).status.success());
    let good = dir.path().join("out/solve_eps2e-2.density");
    let out = run(&cfg, &["verify", "--density", good.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    assert!(json(&dir.path().join("out/verify.json"))["pass"].as_bool().unwrap());

    let text = std::fs::read_to_string(&good).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    let v: f64 = lines[5].parse().unwrap();
    lines[5] = format!("{:e}", v * 3.0);
    let bad = dir.path().join("tampered.density");
    std::fs::write(&bad, lines.join("\n")).unwrap();
    let out = run(&cfg, &["verify", "--density", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("FAIL density-load"), "{stdout}");
}

#[test]
fn competitor_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "grid.m=16\nmarginal=gaussian\nmarginal.sigma=0.25\neps=0.05\noutput.dir=out\n",
    );
    let out = run(&cfg, &["competitor"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rep = json(&dir.path().join("out/competitor.json"));
    for key in ["kinetic_lhs", "kinetic_rhs", "vee_lhs", "vee_rhs"] {
        assert!(rep[key].as_f64().unwrap().is_finite(), "{key}");
    }
    assert!(rep["kinetic_lhs"].as_f64().unwrap() <= rep["kinetic_rhs"].as_f64().unwrap());
    assert!(rep["marginal_tv"].as_f64().unwrap() <= 1e-12);
    assert!(rep["swap"]["lambda1"].as_f64().unwrap() <= 0.5);
}

#[test]
fn canonical_text_reparses_to_the_same_hash() {
    let dir = tempfile::tempdir().unwrap();
    let a = ExperimentConfig::from_text(
        "grid.m=20\nmarginal=gaussian\nmarginal.sigma=0.2\ncost.family=power\ncost.power.s=2\neps=0.01,0.001\n",
        dir.path(),
        &["alpha=0.07".into()],
    )
    .unwrap();
    let b = ExperimentConfig::from_text(&a.canonical(), dir.path(), &[]).unwrap();
    assert_eq!(a.hash, b.hash);
    assert_eq!(a.alpha, 0.07);
    let c = ExperimentConfig::from_text(&a.canonical(), dir.path(), &["seed=5".into()]).unwrap();
    assert_ne!(a.hash, c.hash);
}

#[test]
fn broken_fisher_kernel_fails_homogeneity() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let fine = suites::homogeneity(&mut rng, &|f: &Field| fisher_information(f));
    assert!(fine.pass);
    // Squared differences without the division by the density: 2-homogeneous.
    let broken = |f: &Field| {
        let v = f.values();
        v.windows(2).map(|w| (w[1] - w[0]).powi(2)).sum::<f64>()
    };
    let out = suites::homogeneity(&mut rng, &broken);
    assert!(!out.pass);
    assert!(out.replay.is_some());
}

#[test]
fn atomic_write_leaves_nothing_on_failure() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, "x").unwrap();
    assert!(write_atomic(&blocker.join("child.csv"), b"data").is_err());
    let target = dir.path().join("sub/out.csv");
    write_atomic(&target, b"one").unwrap();
    write_atomic(&target, b"two").unwrap();
    assert_eq!(std::fs::read(&target).unwrap(), b"two");
    assert_eq!(std::fs::read_dir(dir.path().join("sub")).unwrap().count(), 1);
}

#[test]
fn fit_recovers_a_line() {
    let xs = [1.0, 2.0, 3.0, 4.0];
    let ys: Vec<f64> = xs.iter().map(|x| -0.5 * x + 2.0).collect();
    let (slope, icpt, r2) = linear_fit(&xs, &ys).unwrap();
    assert!((slope + 0.5).abs() < 1e-14 && (icpt - 2.0).abs() < 1e-14 && (r2 - 1.0).abs() < 1e-14);
}
