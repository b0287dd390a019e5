use std::fs;
use std::path::{Path, PathBuf};

use mingraph::criteria::BoundaryData;
use mingraph::domain::{DomainSpec, Discretization};
use mingraph::analytic::{ExprField, SharedField};
use mingraph_cli::dump::{dump_field, load, DumpError, FieldDump};
use mingraph_cli::run_cli;
use serde_json::Value;
use std::sync::Arc;

const GOLDEN: &str = r#"
mode = "conditions"
h = 0.05
[domain]
kind = "ball"
dim = 2
radius = 1.0
[data]
components = ["0", "0"]
[geometry]
lambda_minus = 1.1111
"#;

const AFFINE: &str = r#"
h = 0.1
[domain]
kind = "ball"
dim = 2
radius = 1.0
[data]
components = ["0.3*x - 0.2*y + 0.1", "0.1*x + 0.4*y"]
"#;

fn run(dir: &Path, cmd: &str, config: &str, extra: &[&str]) -> (i32, PathBuf) {
    let cfg = dir.join(format!("{cmd}.toml"));
    fs::write(&cfg, config).unwrap();
    let out = dir.join(format!("out-{cmd}-{}", extra.join("")));
    let mut argv = vec!["mingraph".to_string(), cmd.into(), "--config".into(), cfg.display().to_string()];
    argv.extend(["--out".into(), out.display().to_string()]);
    argv.extend(extra.iter().map(|s| s.to_string()));
    (run_cli(argv), out)
}

fn report(out: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap()
}

#[test]
fn golden_disk_constants_are_exact() {
    let dir = tempfile::tempdir().unwrap();
    let (code, out) = run(dir.path(), "check-conditions", GOLDEN, &[]);
    assert_eq!(code, 0);
    let r = report(&out);
    let c = &r["result"]["conditions"]["constants"];
    assert_eq!(c["nu"].as_f64(), Some(32.0));
    assert_eq!(c["kappa"].as_f64(), Some(1.0));
    assert_eq!(c["d0"].as_f64(), Some(1.0 / 128.0));
    assert_eq!(c["psi"].as_f64(), Some(32.0));
    // resolved defaults are echoed
    assert_eq!(r["config"]["flow"]["sigma"].as_f64(), Some(0.9));
    assert_eq!(r["config"]["conditions"]["beta0"].as_f64(), Some(4.0));
    assert!(out.join("metadata.json").exists());
}

#[test]
fn lemma_reports_are_byte_identical_for_one_seed() {
    let cfg = "[lemmas]\ntrials = 2000\n";
    let dir = tempfile::tempdir().unwrap();
    let (c1, o1) = run(dir.path(), "verify-lemmas", cfg, &["--seed", "42"]);
    let dir2 = tempfile::tempdir().unwrap();
    let (c2, o2) = run(dir2.path(), "verify-lemmas", cfg, &["--seed", "42", "--threads", "2"]);
    assert_eq!((c1, c2), (0, 0));
    let a = fs::read(o1.join("report.json")).unwrap();
    let b = fs::read(o2.join("report.json")).unwrap();
    assert!(a == b, "reports differ");
    assert_eq!(report(&o1)["config"]["seed"].as_u64(), Some(42));
}

#[test]
fn affine_flow_takes_no_step() {
    let dir = tempfile::tempdir().unwrap();
    let (code, out) = run(dir.path(), "solve-flow", AFFINE, &[]);
    assert_eq!(code, 0);
    let r = report(&out);
    assert_eq!(r["result"]["flow"]["outcome"], "converged");
    assert_eq!(r["result"]["flow"]["steps"].as_u64(), Some(0));
    let csv = fs::read_to_string(out.join("monitors.csv")).unwrap();
    assert!(csv.starts_with("step,t,sup_v2"));
}

#[test]
fn affine_continuation_and_stability_report() {
    let cfg = format!("{AFFINE}\n[stability]\nlambda_star = true\nmargin_samples = 10\nuniqueness_trials = 2\n");
    let dir = tempfile::tempdir().unwrap();
    let (code, out) = run(dir.path(), "solve-continuation", &cfg, &[]);
    assert_eq!(code, 0);
    let r = report(&out);
    assert_eq!(r["result"]["continuation"]["reached_t"].as_f64(), Some(1.0));
    assert!(r["result"]["stability"]["lambda_star"]["value"].as_f64().unwrap() > 0.0);
    assert!(r["result"]["stability"]["stability_margin"].as_f64().unwrap() > 0.0);
    assert_eq!(r["result"]["stability"]["uniqueness"]["reconverged"], true);
}

#[test]
fn config_errors_exit_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let bad_key = GOLDEN.replace("radius = 1.0", "radius = 1.0\nradios = 2.0");
    assert_eq!(run(dir.path(), "check-conditions", &bad_key, &[]).0, 3);
    // mode in the file disagrees with the subcommand
    assert_eq!(run(dir.path(), "solve-flow", GOLDEN, &[]).0, 3);
    let bad_expr = GOLDEN.replace("[\"0\", \"0\"]", "[\"0\", \"sin(\"]");
    assert_eq!(run(dir.path(), "check-conditions", &bad_expr, &[]).0, 3);
    let missing = vec!["mingraph", "check-conditions", "--config", "/nonexistent/x.toml"];
    assert_eq!(run_cli(missing), 3);
    assert_eq!(run_cli(["mingraph", "no-such-mode"]), 3);
}

#[test]
fn diagnostic_names_the_offending_line() {
    let bad = GOLDEN.replace("radius = 1.0", "radius = \"one\"");
    let e = mingraph_cli::config::RunConfig::parse(&bad).unwrap_err();
    let want = bad.lines().position(|l| l.starts_with("radius")).unwrap() + 1;
    assert_eq!(e.line, Some(want), "{e}");
}

fn disk_field() -> mingraph::jetcalc::VectorField {
    let disc = Discretization::new(DomainSpec::ball(2, 1.0).unwrap(), 2.0 / 32.0).unwrap();
    let comps: Vec<SharedField> = ["x*y", "exp(x) - y"]
        .iter()
        .map(|s| Arc::new(ExprField::parse(s, 2).unwrap()) as SharedField)
        .collect();
    let bd = BoundaryData::measure(comps, &disc.spec, &disc.grid, None, 0.1);
    bd.sample(disc.grid.clone())
}

#[test]
fn dump_round_trip_is_bitwise() {
    let f = disk_field();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("f.bin");
    dump_field(&f, &p).unwrap();
    let d = load(&p).unwrap();
    assert_eq!(d, FieldDump::from_field(&f));
    let mut g = f.clone();
    g.inside_values_mut().iter_mut().for_each(|v| *v = 0.0);
    d.restore_into(&mut g).unwrap();
    let same = f.values.iter().zip(&g.values).all(|(a, b)| a.to_bits() == b.to_bits());
    assert!(same);
}

#[test]
fn dump_header_accounting() {
    let f = disk_field();
    let d = FieldDump::from_field(&f);
    let bytes = d.to_bytes();
    let nodes: usize = d.dims.iter().product();
    assert_eq!(FieldDump::header_len(2), 16 + 4 + 4 + 4 + 16 + 8 + 16);
    assert_eq!(bytes.len(), 68 + nodes + 8 * 2 * nodes);
    let dims: Vec<u64> = (0..2).map(|k| u64::from_le_bytes(bytes[28 + 8 * k..36 + 8 * k].try_into().unwrap())).collect();
    assert_eq!(dims, d.dims.iter().map(|x| *x as u64).collect::<Vec<_>>());
}

#[test]
fn corrupted_magic_is_rejected() {
    let mut bytes = FieldDump::from_field(&disk_field()).to_bytes();
    bytes[3] ^= 0xff;
    assert!(matches!(FieldDump::from_bytes(&bytes), Err(DumpError::Format(_))));
}

#[test]
fn field_dump_and_csv_from_a_run() {
    let cfg = format!("{AFFINE}\n[output]\ndump_field = true\nfield_csv = true\n");
    let dir = tempfile::tempdir().unwrap();
    let (code, out) = run(dir.path(), "solve-flow", &cfg, &[]);
    assert_eq!(code, 0);
    let d = load(&out.join("field.bin")).unwrap();
    assert_eq!((d.n, d.m), (2, 2));
    let csv = fs::read_to_string(out.join("field.csv")).unwrap();
    assert!(csv.starts_with("x,y,class,u1,u2"));
    let inside = d.classes.iter().filter(|c| **c != 2).count();
    assert_eq!(csv.lines().count(), inside + 1);
}

#[test]
fn capped_flow_reports_nonconvergence() {
    let cfg = r#"
h = 0.1
[domain]
kind = "ball"
dim = 2
radius = 1.0
[data]
components = ["0.2*x*y", "0.1*x*x"]
[flow]
max_steps = 3
"#;
    let dir = tempfile::tempdir().unwrap();
    let (code, out) = run(dir.path(), "solve-flow", cfg, &[]);
    assert_eq!(code, 2);
    assert_eq!(report(&out)["result"]["flow"]["outcome"], "max_steps");
}
