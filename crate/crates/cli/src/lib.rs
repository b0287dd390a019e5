//! Batch front end: parses a TOML config, runs one mode and writes
//! `report.json`, `metadata.json` and the CSV time series into the output
//! directory.

pub mod config;
pub mod dump;

use std::ffi::OsString;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};
use mingraph::barriers::make_nonexistence_data;
use mingraph::continuation::{
    continuation_run, estimate_lambda_star, stability_margin, uniqueness_probe, ContinuationError,
    ContinuationOptions, PathPoint,
};
use mingraph::criteria::{condition_report, kappa_nu_d0, BoundaryData, ConditionReport};
use mingraph::domain::{distance_field, geometry_summary, Discretization, GeometrySummary};
use mingraph::flow::{self, FlowConfig, FlowResult, FlowState, MonitorRecord, Outcome};
use mingraph::jetcalc::VectorField;
use mingraph::lemma_lab::{tightness_search, verify_du1a, verify_small_t, verify_sssss, LemmaId};
use serde_json::{json, Value};

use config::{find_line, ConfigError, Mode, RunConfig};
use dump::FieldDump;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_NO_CONVERGENCE: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "mingraph", version, about = "Minimal graphs of arbitrary codimension: solvers and checks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory, created if missing.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Overrides the seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; falls back to MINGRAPH_THREADS, then to all cores.
    #[arg(long, global = true, env = "MINGRAPH_THREADS")]
    threads: Option<usize>,
}

#[derive(Subcommand, Debug, Clone)]
enum Command {
    /// Mean curvature flow to the stationary graph.
    SolveFlow {
        /// Start from a field dump on the same grid instead of the data.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Newton continuation from the zero data.
    SolveContinuation,
    /// Constants and smallness verdicts only.
    CheckConditions,
    /// Randomized checks of the pointwise matrix inequalities.
    VerifyLemmas,
    /// Flow on the catenoid-neck non-existence data and its contrast run.
    NonexistenceDemo,
}

impl Command {
    fn mode(&self) -> Mode {
        match self {
            Self::SolveFlow { .. } => Mode::Flow,
            Self::SolveContinuation => Mode::Continuation,
            Self::CheckConditions => Mode::Conditions,
            Self::VerifyLemmas => Mode::Lemmas,
            Self::NonexistenceDemo => Mode::Nonexistence,
        }
    }
}

enum Failure {
    Config(ConfigError),
    Io(io::Error),
    Other(String),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Self::Config(e)
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Self::Io(e)
    }
}

/// What a mode hands back: the report body and the exit code it earned.
struct Finished {
    report: Value,
    code: i32,
}

/// Parses `argv` (program name first), runs the mode and returns the exit code.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(code) => code,
        Err(Failure::Config(e)) => {
            eprintln!("{e}");
            EXIT_CONFIG
        }
        Err(Failure::Io(e)) => {
            eprintln!("i/o failure: {e}");
            EXIT_FAILURE
        }
        Err(Failure::Other(e)) => {
            eprintln!("error: {e}");
            EXIT_FAILURE
        }
    }
}

fn execute(cli: &Cli) -> Result<i32, Failure> {
    let path = cli.config.as_ref().ok_or(ConfigError { line: None, message: "--config PATH is required".into() })?;
    let src = fs::read_to_string(path)
        .map_err(|e| ConfigError { line: None, message: format!("cannot read {}: {e}", path.display()) })?;
    let mut cfg = RunConfig::parse(&src)?;
    let mode = cli.command.mode();
    if let Some(m) = cfg.mode {
        if m != mode {
            return Err(ConfigError {
                line: find_line(&src, "mode"),
                message: format!("config is for mode {m:?} but the subcommand runs {mode:?}"),
            }
            .into());
        }
    }
    cfg.mode = Some(mode);
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let threads = cli.threads.unwrap_or(0);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Failure::Other(format!("thread pool: {e}")))?;
    fs::create_dir_all(&cli.out)?;
    let started = Instant::now();
    let out = cli.out.as_path();
    let done = pool.install(|| match &cli.command {
        Command::SolveFlow { resume } => solve_flow(&cfg, &src, out, resume.as_deref()),
        Command::SolveContinuation => solve_continuation(&cfg, &src, out),
        Command::CheckConditions => check_conditions(&cfg, &src),
        Command::VerifyLemmas => verify_lemmas(&cfg),
        Command::NonexistenceDemo => nonexistence_demo(&cfg, &src, out),
    })?;
    let report = json!({
        "mode": mode,
        "exit_code": done.code,
        "config": serde_json::to_value(&cfg).map_err(|e| Failure::Other(e.to_string()))?,
        "result": done.report,
    });
    write_json(&out.join("report.json"), &report)?;
    let meta = json!({
        "wall_clock_s": started.elapsed().as_secs_f64(),
        "finished_unix_s": SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
        "threads": pool.current_num_threads(),
        "version": env!("CARGO_PKG_VERSION"),
    });
    write_json(&out.join("metadata.json"), &meta)?;
    Ok(done.code)
}

fn write_json(path: &Path, v: &Value) -> io::Result<()> {
    let mut s = serde_json::to_string_pretty(v).map_err(io::Error::other)?;
    s.push('\n');
    fs::write(path, s)
}

fn to_json<T: serde::Serialize>(v: &T) -> Value {
    serde_json::to_value(v).unwrap_or(Value::Null)
}

// ---------------------------------------------------------------------------
// shared setup

struct Setup {
    disc: Discretization,
    geo: GeometrySummary,
    bd: BoundaryData,
}

fn setup(cfg: &RunConfig, src: &str) -> Result<Setup, Failure> {
    let (spec, h) = cfg.require_domain(src)?;
    let components = cfg.require_data(src, spec.dim)?;
    let disc = Discretization::new(spec, h)
        .map_err(|e| ConfigError { line: find_line(src, "h ="), message: e.to_string() })?;
    let band = cfg.geometry.band_width;
    let dist = distance_field(&disc.spec, &disc.grid);
    let mut geo = geometry_summary(&disc.spec, &disc.grid, &dist, band);
    if let Some(l) = cfg.geometry.lambda_minus {
        geo.lambda_minus = l;
    }
    let bd = BoundaryData::measure(components, &disc.spec, &disc.grid, Some(&dist), band);
    Ok(Setup { disc, geo, bd })
}

fn conditions_json(s: &Setup, cfg: &RunConfig) -> (ConditionReport, Value) {
    let r = condition_report(&s.bd, &s.geo, cfg.conditions.beta0, cfg.conditions.safety);
    let v = json!({
        "geometry": to_json(&s.geo),
        "norms": {
            "components": to_json(&s.bd.norms),
            "stacked_grad_sup": s.bd.stacked_grad_sup,
            "stacked_hess_sup": s.bd.stacked_hess_sup,
            "stacked_boundary_grad_sup": s.bd.stacked_boundary_grad_sup,
            "lambda_plus": s.bd.lambda_plus,
        },
        "conditions": to_json(&r),
    });
    (r, v)
}

fn write_csv<W: Write>(mut w: W, header: &[&str], rows: impl Iterator<Item = Vec<String>>) -> io::Result<()> {
    writeln!(w, "{}", header.join(","))?;
    for r in rows {
        writeln!(w, "{}", r.join(","))?;
    }
    Ok(())
}

fn num(x: f64) -> String {
    format!("{x:e}")
}

fn write_monitors(path: &Path, recs: &[MonitorRecord]) -> io::Result<()> {
    let header = [
        "step",
        "t",
        "sup_v2",
        "min_theta_interior",
        "min_theta_boundary",
        "min_theta_parabolic",
        "max_wedge2",
        "sup_residual",
        "boundary_grad",
    ];
    let rows = recs.iter().map(|r| {
        vec![
            r.step.to_string(),
            num(r.t),
            num(r.sup_v2),
            num(r.min_theta_interior),
            num(r.min_theta_boundary),
            num(r.min_theta_parabolic),
            num(r.max_wedge2),
            num(r.sup_residual),
            num(r.boundary_grad),
        ]
    });
    write_csv(io::BufWriter::new(fs::File::create(path)?), &header, rows)
}

fn write_path(path: &Path, pts: &[PathPoint]) -> io::Result<()> {
    let header = ["t", "sup_v2", "min_theta", "max_wedge2", "sup_residual", "newton_iters", "lambda_star"];
    let rows = pts.iter().map(|p| {
        vec![
            num(p.t),
            num(p.sup_v2),
            num(p.min_theta),
            num(p.max_wedge2),
            num(p.sup_residual),
            p.newton_iters.to_string(),
            p.lambda_star.map(num).unwrap_or_default(),
        ]
    });
    write_csv(io::BufWriter::new(fs::File::create(path)?), &header, rows)
}

fn dump_outputs(cfg: &RunConfig, out: &Path, f: &VectorField) -> Result<(), Failure> {
    if cfg.output.dump_field || cfg.output.field_csv {
        let d = FieldDump::from_field(f);
        if cfg.output.dump_field {
            fs::write(out.join("field.bin"), d.to_bytes())?;
        }
        if cfg.output.field_csv {
            d.write_csv(io::BufWriter::new(fs::File::create(out.join("field.csv"))?))?;
        }
    }
    Ok(())
}

/// λ*, the stability margin and the uniqueness probe, as configured.
fn stability_json(cfg: &RunConfig, u: &VectorField, bd: &BoundaryData) -> Value {
    let st = &cfg.stability;
    let mut v = serde_json::Map::new();
    if st.lambda_star {
        v.insert(
            "lambda_star".into(),
            match estimate_lambda_star(u) {
                Ok(l) => to_json(&l),
                Err(e) => json!({ "error": e.to_string() }),
            },
        );
    }
    if st.margin_samples > 0 {
        v.insert(
            "stability_margin".into(),
            match stability_margin(u, st.margin_samples, cfg.seed) {
                Ok(x) => json!(x),
                Err(e) => json!({ "error": e.to_string() }),
            },
        );
    }
    if st.uniqueness_trials > 0 {
        let scale = st.uniqueness_scale * u.sup_norm();
        let r = uniqueness_probe(u, bd, scale, st.uniqueness_trials, cfg.seed, &cfg.newton);
        v.insert("uniqueness".into(), to_json(&r));
    }
    Value::Object(v)
}

// ---------------------------------------------------------------------------
// modes

fn check_conditions(cfg: &RunConfig, src: &str) -> Result<Finished, Failure> {
    let s = setup(cfg, src)?;
    let (_, v) = conditions_json(&s, cfg);
    Ok(Finished { report: v, code: EXIT_OK })
}

fn flow_summary(r: &FlowResult) -> Value {
    let max_bgrad = r.state.monitors.iter().map(|m| m.boundary_grad).fold(0.0, f64::max);
    json!({
        "outcome": r.outcome,
        "steps": r.steps(),
        "t": r.state.t,
        "trip": r.trip,
        "verdict": to_json(&r.verdict),
        "final": r.state.monitors.last().map(to_json),
        "max_boundary_grad": max_bgrad,
        "records": r.state.monitors.len(),
    })
}

fn solve_flow(cfg: &RunConfig, src: &str, out: &Path, resume: Option<&Path>) -> Result<Finished, Failure> {
    let s = setup(cfg, src)?;
    let (cond, mut report) = conditions_json(&s, cfg);
    let convex_ok = cond.convex.as_ref().is_some_and(|v| v.pass);
    let mut fc: FlowConfig = cfg.flow.clone();
    // arm the β₀ monitor when the convex condition promises sup det g < β₀
    if convex_ok && fc.beta0.is_none() {
        fc.beta0 = Some(cfg.conditions.beta0);
    }
    let mut f = s.bd.sample(s.disc.grid.clone());
    if let Some(p) = resume {
        let d = dump::load(p).map_err(|e| Failure::Other(format!("resume from {}: {e}", p.display())))?;
        d.restore_into(&mut f).map_err(|e| Failure::Other(e.to_string()))?;
    }
    let ckpt = out.join("checkpoint.bin");
    let mut ckpt_err: Option<io::Error> = None;
    let mut on_ckpt = |st: &FlowState| {
        if let Err(e) = fs::write(&ckpt, FieldDump::from_field(&st.f).to_bytes()) {
            ckpt_err.get_or_insert(e);
        }
    };
    let r = flow::run_from(FlowState::new(f, fc.sigma), &fc, &mut on_ckpt);
    if let Some(e) = ckpt_err {
        return Err(e.into());
    }
    write_monitors(&out.join("monitors.csv"), &r.state.monitors)?;
    dump_outputs(cfg, out, &r.state.f)?;
    let converged = r.outcome == Outcome::Converged;
    let final_v2 = r.state.monitors.last().map(|m| m.sup_v2).unwrap_or(f64::NAN);
    let beta0 = cfg.conditions.beta0;
    let certificate = (convex_ok && converged && final_v2 < beta0)
        .then(|| json!({ "beta0": beta0, "final_sup_v2": final_v2 }));
    let obj = report.as_object_mut().unwrap();
    obj.insert("effective_flow".into(), to_json(&fc));
    obj.insert("flow".into(), flow_summary(&r));
    obj.insert("beta0_certificate".into(), certificate.unwrap_or(Value::Null));
    if converged {
        obj.insert("stability".into(), stability_json(cfg, &r.state.f, &s.bd));
    }
    Ok(Finished { report, code: if converged { EXIT_OK } else { EXIT_NO_CONVERGENCE } })
}

fn solve_continuation(cfg: &RunConfig, src: &str, out: &Path) -> Result<Finished, Failure> {
    let s = setup(cfg, src)?;
    if s.bd.m() != 2 {
        return Err(ConfigError {
            line: find_line(src, "components"),
            message: format!("continuation needs two data components, got {}", s.bd.m()),
        }
        .into());
    }
    let (_, mut report) = conditions_json(&s, cfg);
    let c = kappa_nu_d0(&s.bd, &s.geo);
    let opts = ContinuationOptions {
        steps: cfg.continuation.steps,
        psi: cfg.continuation.psi_monitor.then_some(c.psi),
        t_min_step: cfg.continuation.t_min_step,
        newton: cfg.newton,
        track_lambda_star: cfg.continuation.track_lambda_star,
    };
    let obj = report.as_object_mut().unwrap();
    obj.insert("effective_continuation".into(), to_json(&opts));
    let code = match continuation_run(&s.bd, s.disc.grid.clone(), &opts) {
        Ok(st) => {
            write_path(&out.join("monitors.csv"), &st.path)?;
            dump_outputs(cfg, out, &st.u)?;
            obj.insert(
                "continuation".into(),
                json!({
                    "reached_t": st.t,
                    "points": st.path.len(),
                    "path": to_json(&st.path),
                    "lambda_star": st.lambda_star.map(|l| to_json(&l)),
                }),
            );
            obj.insert("stability".into(), stability_json(cfg, &st.u, &s.bd));
            EXIT_OK
        }
        Err(ContinuationError::PathStuck { last_t, path }) => {
            write_path(&out.join("monitors.csv"), &path)?;
            obj.insert(
                "continuation".into(),
                json!({ "reached_t": last_t, "points": path.len(), "path": to_json(&path), "error": "path stuck" }),
            );
            EXIT_NO_CONVERGENCE
        }
        Err(e @ ContinuationError::NoConvergence { .. }) => {
            obj.insert("continuation".into(), json!({ "error": e.to_string() }));
            EXIT_NO_CONVERGENCE
        }
        Err(e) => return Err(Failure::Other(e.to_string())),
    };
    Ok(Finished { report, code })
}

fn verify_lemmas(cfg: &RunConfig) -> Result<Finished, Failure> {
    let l = &cfg.lemmas;
    let mut cases = Vec::new();
    let mut all_pass = true;
    for &n in &l.n {
        for &m in &l.m {
            for id in [LemmaId::SmallT, LemmaId::Sssss, LemmaId::Du1a] {
                let r = match id {
                    LemmaId::SmallT => verify_small_t(n, m, l.trials, cfg.seed),
                    LemmaId::Sssss => verify_sssss(n, m, l.trials, cfg.seed),
                    LemmaId::Du1a => verify_du1a(n, m, l.k, l.trials, cfg.seed),
                };
                let mut case = match r {
                    Ok(rep) => {
                        all_pass &= rep.passed();
                        json!({ "passed": rep.passed(), "report": to_json(&rep) })
                    }
                    // some (n, m) admit no sample under the hypotheses
                    Err(e) => json!({ "lemma": id, "n": n, "m": m, "skipped": e.to_string() }),
                };
                if l.tightness_budget > 0 {
                    if let Ok(t) = tightness_search(id, n, m, l.k, l.tightness_budget, cfg.seed) {
                        case.as_object_mut().unwrap().insert("tightness".into(), to_json(&t));
                    }
                }
                cases.push(case);
            }
        }
    }
    let report = json!({ "all_passed": all_pass, "tolerance": mingraph::lemma_lab::TOLERANCE, "cases": cases });
    Ok(Finished { report, code: if all_pass { EXIT_OK } else { EXIT_FAILURE } })
}

fn nonexistence_demo(cfg: &RunConfig, src: &str, out: &Path) -> Result<Finished, Failure> {
    let (spec, h) = cfg.require_domain(src)?;
    let ne = &cfg.nonexistence;
    let mut nd = make_nonexistence_data(&spec, ne.eps, ne.margin, h)
        .map_err(|e| ConfigError { line: find_line(src, "[domain]"), message: e.to_string() })?;
    if let Some(k) = ne.peak_scale {
        nd = nd.with_peak(k * nd.threshold);
    }
    let disc = Discretization::new(spec, h)
        .map_err(|e| ConfigError { line: find_line(src, "h ="), message: e.to_string() })?;
    let data_json = |d: &mingraph::barriers::NonexistenceData| {
        json!({
            "eps": d.eps,
            "a": d.a,
            "q": to_json(&d.q[..3].to_vec()),
            "tangent": to_json(&d.tangent[..3].to_vec()),
            "threshold": d.threshold,
            "sup_term": d.sup_term,
            "peak": d.peak,
            "inconclusive": d.inconclusive,
            "d11_certificate": to_json(&d.d11_certificate),
            "laplacian_certificate": to_json(&d.laplacian_certificate),
            "sampled_points": d.sampled_points,
        })
    };
    let main = flow::run(&nd.data, &disc, &cfg.flow);
    write_monitors(&out.join("monitors.csv"), &main.state.monitors)?;
    dump_outputs(cfg, out, &main.state.f)?;
    let blew_up = matches!(main.outcome, Outcome::Blowup | Outcome::InvariantViolated);
    let mut report = json!({
        "data": data_json(&nd),
        "flow": flow_summary(&main),
    });
    if ne.contrast {
        let weak = nd.with_peak(0.1 * nd.threshold);
        let c = flow::run(&weak.data, &disc, &cfg.flow);
        write_monitors(&out.join("monitors_contrast.csv"), &c.state.monitors)?;
        let obj = report.as_object_mut().unwrap();
        obj.insert("contrast_data".into(), data_json(&weak));
        obj.insert("contrast_flow".into(), flow_summary(&c));
        obj.insert("contrast_observed".into(), json!(blew_up && c.outcome == Outcome::Converged));
    }
    report.as_object_mut().unwrap().insert("nonexistence_observed".into(), json!(blew_up));
    Ok(Finished { report, code: EXIT_OK })
}
