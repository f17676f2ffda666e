use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use asep_spde::io::{read_field_frames, Manifest, Table};
use asep_spde::Environment;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_asep-spde")).current_dir(dir).args(args).output().expect("binary runs")
}

fn table(path: &Path) -> Table {
    Table::from_csv(&fs::read_to_string(path).unwrap()).unwrap()
}

fn floats(t: &Table, col: &str) -> Vec<f64> {
    t.column(col).unwrap().iter().map(|v| v.parse().unwrap()).collect()
}

#[test]
fn alternating_env_prefix_sums() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["env", "--kind", "alternating", "--n", "64", "--delta", "1", "--out", "a"]);
    assert!(out.status.success());
    let env = Environment::load(&dir.path().join("a/env.csv")).unwrap();
    assert_eq!(env.size(), 64);
    for (x, &r) in env.r_values().iter().enumerate() {
        let expected = if x % 2 == 0 { 0.0 } else { 1.0 / 128.0 };
        assert_eq!(r, expected, "site {x}");
    }
}

#[test]
fn env_is_deterministic_in_seed() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["one", "two"] {
        assert!(run(dir.path(), &["env", "--kind", "iid", "--n", "128", "--seed", "7", "--out", name]).status.success());
    }
    let a = fs::read(dir.path().join("one/env.csv")).unwrap();
    let b = fs::read(dir.path().join("two/env.csv")).unwrap();
    assert_eq!(a, b);
    assert!(run(dir.path(), &["env", "--kind", "iid", "--n", "128", "--seed", "8", "--out", "three"]).status.success());
    assert_ne!(a, fs::read(dir.path().join("three/env.csv")).unwrap());
}

#[test]
fn invalid_hurst_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["env", "--kind", "fbm", "--hurst", "1.5", "--out", "f"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!dir.path().join("f").exists(), "nothing is written on validation failure");
}

#[test]
fn unknown_flag_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(dir.path(), &["env", "--bogus"]).status.code(), Some(2));
}

#[test]
fn bounds_report_has_eleven_rows() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["kernel", "--check-bounds", "--n", "64", "--out", "k"]);
    assert!(out.status.success());
    let t = table(&dir.path().join("k/bounds_report.csv"));
    assert_eq!(t.header, ["bound_id", "N", "measured_lambda"]);
    assert_eq!(t.rows.len(), 11);
    // Homogeneous walk: the remainder bounds h–k vanish identically.
    let lam = floats(&t, "measured_lambda");
    assert!(lam[7..].iter().all(|&v| v == 0.0));
}

#[test]
fn kernel_dump_rows_are_stochastic() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["kernel", "--kind", "iid", "--n", "16", "--times", "0.1", "--out", "k", "--assert"]);
    assert!(out.status.success());
    let t = table(&dir.path().join("k/kernel.csv"));
    assert_eq!(t.rows.len(), 256);
    let v = floats(&t, "value");
    for row in v.chunks(16) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
    let frames = asep_spde::io::read_matrix_frames(fs::File::open(dir.path().join("k/kernel.bin")).unwrap()).unwrap();
    assert_eq!(frames[0].1[(3, 5)], v[3 * 16 + 5]);
}

#[test]
fn she_noise_off_matches_spectral_evolution() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["she", "--m", "128", "--t", "0.5", "--noise-off", "--assert", "--out", "s"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    // Independent check: for R̄ ≡ 0 the cosine mode decays like e^{-2π² t}.
    let t = table(&dir.path().join("s/path.csv"));
    let times = floats(&t, "t_macro");
    let xs = floats(&t, "x_macro");
    let z = floats(&t, "Z");
    let decay = (-2.0 * std::f64::consts::PI.powi(2) * 0.5).exp();
    let mut checked = 0;
    for k in 0..z.len() {
        if times[k] == 0.5 {
            let exact = 1.0 + 0.5 * decay * (2.0 * std::f64::consts::PI * xs[k]).cos();
            // Grid Laplacian versus continuum: O(M^{-2}) eigenvalue error.
            assert!((z[k] - exact).abs() < 1e-4);
            checked += 1;
        }
    }
    assert_eq!(checked, 128);
}

#[test]
fn coarse_she_step_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["she", "--m", "64", "--dt", "0.01", "--out", "s"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn failed_gate_exits_three_only_with_assert() {
    let dir = tempfile::tempdir().unwrap();
    // β at N = 8 and 256 differ by far more than 1%.
    let args = ["diagnose", "--check", "beta", "--sizes", "8,256", "--out", "b"];
    assert_eq!(run(dir.path(), &args).status.code(), Some(0));
    let mut strict = args.to_vec();
    strict.push("--assert");
    assert_eq!(run(dir.path(), &strict).status.code(), Some(3));
}

#[test]
fn manifest_replays_bit_identically() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["simulate", "--kind", "iid", "--n", "32", "--t", "0.02", "--frames", "3", "--binary", "--seed", "5", "--out", "a"]);
    assert!(out.status.success());
    let m = Manifest::load(&dir.path().join("a")).unwrap();
    assert_eq!(m.command, "simulate");
    assert_eq!(m.seeds, [5]);
    assert!(run(dir.path(), &["--config", "a/manifest.json", "--out", "b", "--threads", "2"]).status.success());
    for f in ["path.csv", "path.bin"] {
        assert_eq!(fs::read(dir.path().join("a").join(f)).unwrap(), fs::read(dir.path().join("b").join(f)).unwrap());
    }
    let replay = Manifest::load(&dir.path().join("b")).unwrap();
    assert_eq!(replay.outputs, m.outputs);
    let path = read_field_frames(fs::File::open(dir.path().join("a/path.bin")).unwrap()).unwrap();
    assert_eq!(path.times.len(), 4);
    assert_eq!(path.n, 32);
}

#[test]
fn json_config_with_flag_override() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("cfg.json"), r#"{"kind": "iid", "n": 32, "seed": 3}"#).unwrap();
    assert!(run(dir.path(), &["env", "--config", "cfg.json", "--n", "16", "--out", "e"]).status.success());
    let env = Environment::load(&dir.path().join("e/env.csv")).unwrap();
    assert_eq!(env.size(), 16);
    assert_eq!(env.seed, 3);
}

#[test]
fn env_file_is_hashed_into_manifest() {
    let dir = tempfile::tempdir().unwrap();
    assert!(run(dir.path(), &["env", "--kind", "iid", "--n", "32", "--out", "e"]).status.success());
    assert!(run(dir.path(), &["semigroup", "--env-file", "e/env.csv", "--m", "32", "--out", "s", "--assert"]).status.success());
    let m = Manifest::load(&dir.path().join("s")).unwrap();
    let hash = asep_spde::io::file_hash(&dir.path().join("e/env.csv")).unwrap();
    assert_eq!(m.inputs.values().next(), Some(&hash));
    let spectrum = table(&dir.path().join("s/spectrum.csv"));
    let lam = floats(&spectrum, "lambda");
    assert!(lam.windows(2).all(|w| w[1] <= w[0]));
}

#[test]
fn small_converge_run_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(
        dir.path(),
        &[
            "converge", "--env", "iid", "--ladder", "16,32", "--trials", "20", "--replicates", "2", "--reference-grid", "64",
            "--she-trials", "20", "--she-grid", "32", "--points", "4", "--slices", "8", "--svg", "--out", "c",
        ],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let t = table(&dir.path().join("c/convergence.csv"));
    assert_eq!(t.rows.len(), 4);
    assert!(floats(&t, "gap").iter().all(|g| g.is_finite() && *g >= 0.0));
    assert!(dir.path().join("c/convergence.svg").exists());
    assert_eq!(table(&dir.path().join("c/ks.csv")).rows.len(), 2);
}
