use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

/// Entries listed in the README fixture table.
const DOCUMENTED_FIXTURES: usize = 28;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_anisoflow"))
}

fn config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p
}

fn run(cfg: &Path, extra: &[&str]) -> Output {
    bin().arg("run").arg(cfg).args(extra).output().unwrap()
}

fn text(o: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
}

#[test]
fn catalog_is_sorted_stable_and_complete() {
    let a = bin().arg("list-fixtures").output().unwrap();
    let b = bin().arg("list-fixtures").output().unwrap();
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
    let s = String::from_utf8(a.stdout).unwrap();
    let lines: Vec<&str> = s.lines().collect();
    assert!(lines.windows(2).all(|w| w[0] <= w[1]));
    assert_eq!(lines.len(), DOCUMENTED_FIXTURES);
    for name in ["hilbert", "rotation", "vlasov"] {
        assert!(lines.iter().any(|l| l.split('\t').nth(1) == Some(name)), "{name}");
    }
}

#[test]
fn empty_config_is_a_schema_error() {
    let d = TempDir::new().unwrap();
    let cfg = config(d.path(), "empty.toml", "");
    assert_eq!(run(&cfg, &[]).status.code(), Some(2));
    assert_eq!(bin().arg("validate").arg(&cfg).output().unwrap().status.code(), Some(2));
}

#[test]
fn validate_rejects_typos_and_unknown_names() {
    let d = TempDir::new().unwrap();
    let grid = "grid = { n1 = 1, n2 = 1, half_width = 4.0, points = 32 }\n";
    let good = config(d.path(), "good.toml", &format!("kind = \"flow\"\n{grid}params = {{ field = \"rotation\" }}\n"));
    let o = bin().arg("validate").arg(&good).output().unwrap();
    assert!(o.status.success(), "{}", text(&o));
    for (name, body) in [
        ("kind.toml", format!("kind = \"nope\"\n{grid}")),
        ("field.toml", format!("kind = \"flow\"\n{grid}params = {{ field = \"nope\" }}\n")),
        ("typo.toml", format!("kind = \"flow\"\n{grid}params = {{ field = \"rotation\", sede_density = 3 }}\n")),
        ("cfl.toml", format!("kind = \"flow\"\n{grid}params = {{ field = \"rotation\", dt = 1.0 }}\n")),
        ("sweep.toml", format!("kind = \"flow\"\n{grid}params = {{ field = \"rotation\" }}\nsweep = {{ dt = [] }}\n")),
    ] {
        let o = bin().arg("validate").arg(config(d.path(), name, &body)).output().unwrap();
        assert_eq!(o.status.code(), Some(2), "{name}: {}", text(&o));
    }
}

#[test]
fn norms_on_inverse_square_root() {
    let d = TempDir::new().unwrap();
    let cfg = config(
        d.path(),
        "norms.toml",
        r#"
kind = "norms"
grid = { n1 = 1, half_width = 1.0, points = 8192 }
[params]
function = "fixture:inv_sqrt"
region = { lo = [0.0], hi = [1.0] }
expected_l1 = 2.0
"#,
    );
    let o = run(&cfg, &[]);
    assert!(o.status.success(), "{}", text(&o));
    let csv = fs::read_to_string(d.path().join("out/point_000/norms.csv")).unwrap();
    let header: Vec<&str> = csv.lines().next().unwrap().split(',').collect();
    let row: Vec<&str> = csv.lines().nth(1).unwrap().split(',').collect();
    let col = |n: &str| row[header.iter().position(|h| *h == n).unwrap()];
    let (lhs, rhs): (f64, f64) = (col("lhs").parse().unwrap(), col("rhs").parse().unwrap());
    assert!((lhs - 2.0).abs() < 0.04 && (rhs - 2.0).abs() < 0.04);
    assert_eq!(col("holds"), "true");
    let summary = fs::read_to_string(d.path().join("out/summary.csv")).unwrap();
    assert!(summary.lines().skip(1).all(|l| l.contains(",pass,")));
}

#[test]
fn rotation_flow_preserves_measure() {
    let d = TempDir::new().unwrap();
    let cfg = config(
        d.path(),
        "flow.toml",
        r#"
kind = "flow"
grid = { n1 = 1, n2 = 1, half_width = 4.0, points = 128 }
[params]
field = "rotation"
seed_radius = 1.5
seed_density = 64
"#,
    );
    let o = run(&cfg, &[]);
    assert!(o.status.success(), "{}", text(&o));
    let p = d.path().join("out/point_000");
    assert!(fs::read_to_string(p.join("trajectories.csv")).unwrap().starts_with("seed_id,time,x1,x2"));
    let flow = fs::read_to_string(p.join("flow.csv")).unwrap();
    let l: f64 = flow.lines().nth(1).unwrap().rsplit(',').next().unwrap().parse().unwrap();
    assert!((l - 1.0).abs() <= 0.05, "{l}");
    assert!(p.join("decay.svg").exists());
}

#[test]
fn failed_invariant_exits_one_and_names_the_check() {
    let d = TempDir::new().unwrap();
    let cfg = config(
        d.path(),
        "bad.toml",
        r#"
kind = "norms"
grid = { n1 = 1, half_width = 1.0, points = 1024 }
params = { function = "fixture:inv_sqrt", region = { lo = [0.0], hi = [1.0] }, expected_l1 = 3.0 }
"#,
    );
    let o = run(&cfg, &["--no-plots"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(text(&o).contains("expected_l1"));
    assert!(!d.path().join("out/point_000/distribution.svg").exists());
}

#[test]
fn identical_config_gives_identical_csvs() {
    let body = r#"
kind = "diffquot"
seed = 11
grid = { n1 = 1, n2 = 1, half_width = 3.141592653589793, points = 32 }
params = { pairs = 500, direction_samples = 8 }
sweep = { delta1 = [1.0, 0.2] }
"#;
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    let ca = config(a.path(), "c.toml", body);
    let cb = config(b.path(), "c.toml", body);
    assert!(run(&ca, &["--workers", "1"]).status.success());
    assert!(run(&cb, &["--workers", "3"]).status.success());
    for f in ["summary.csv", "point_000/diffquot.csv", "point_001/diffquot.csv"] {
        assert_eq!(fs::read(a.path().join("out").join(f)).unwrap(), fs::read(b.path().join("out").join(f)).unwrap(), "{f}");
    }
}

#[test]
fn worker_cap_comes_from_the_environment() {
    let d = TempDir::new().unwrap();
    let cfg = config(
        d.path(),
        "s.toml",
        "kind = \"singint\"\ngrid = { n1 = 1, half_width = 8.0, points = 256 }\nparams = { kernel = \"hilbert\", measure = \"dirac\", measure_params = { location = [0.01] } }\n",
    );
    let o = bin().arg("run").arg(&cfg).env("ANISOFLOW_WORKERS", "1").output().unwrap();
    assert!(o.status.success(), "{}", text(&o));
    assert!(d.path().join("out/point_000/singint.csv").exists());
}

#[test]
fn certificate_from_a_run_drives_stability() {
    let d = TempDir::new().unwrap();
    let common = r#"
grid = { n1 = 1, n2 = 1, half_width = 3.141592653589793, points = 64 }
[params]
field = "sin_cos"
field_params = { amplitude = 0.5 }
field_bar_params = { amplitude = 0.5, phase = 0.05 }
seed_density = 16
times = 6
l1_samples = 1024
"#;
    let c = config(d.path(), "cert.toml", &format!("kind = \"certificate\"\noutput = \"cert\"\n{common}"));
    let o = run(&c, &[]);
    assert!(o.status.success(), "{}", text(&o));
    fs::copy(d.path().join("cert/point_000/certificate.toml"), d.path().join("stored.toml")).unwrap();
    let s = config(
        d.path(),
        "stab.toml",
        &format!("kind = \"stability\"\noutput = \"stab\"\nmanifests = {{ certificate = \"stored.toml\" }}\n{common}"),
    );
    let o = run(&s, &[]);
    assert!(o.status.success(), "{}", text(&o));
    let report = fs::read_to_string(d.path().join("stab/point_000/report.csv")).unwrap();
    assert!(report.starts_with("time,phi,superlevel_measure,rhs"));
    assert_eq!(report.lines().count(), 7);
}
