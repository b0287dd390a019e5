//! Brute-force checks of the singular-value inequalities on conditioned
//! random matrices.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{det, singular_values, Mat, MAX_DIM, ZERO};
use crate::sampling::{haar_orthogonal, with_singular_values};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LemmaError {
    #[error("cannot sample under the hypotheses: {0}")]
    BadCondition(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LemmaId {
    /// `s₁ ≥ √(n−1)`, `s_i s_j ≤ 1` ⇒ `det(I + SSᵀ) ≤ 1 + (Σ_α |S^α|)²`.
    SmallT,
    /// `Π(1 + s_i²) ≤ 9` ⇒ the same inequality.
    Sssss,
    /// Gradient split hypotheses ⇒ `λ_iλ_j ≤ 2K`.
    Du1a,
}

impl std::str::FromStr for LemmaId {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "smallt" | "small_t" => Ok(Self::SmallT),
            "sssss" => Ok(Self::Sssss),
            "du1a" => Ok(Self::Du1a),
            other => Err(format!("unknown lemma '{other}'")),
        }
    }
}

/// An `n × m` matrix `S[i][α]` with its singular values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixSample {
    pub n: usize,
    pub m: usize,
    /// Row-major `n × m`.
    pub entries: Vec<f64>,
    /// Descending, length `n`, zero beyond `min(n, m)`.
    pub singular_values: Vec<f64>,
    pub seed: u64,
    pub trial: u64,
}

impl MatrixSample {
    fn new(s: &Mat, n: usize, m: usize, sv: &[f64], seed: u64, trial: u64) -> Self {
        let mut entries = Vec::with_capacity(n * m);
        for row in s.iter().take(n) {
            entries.extend_from_slice(&row[..m]);
        }
        let mut singular_values = sv.to_vec();
        singular_values.resize(n, 0.0);
        Self { n, m, entries, singular_values, seed, trial }
    }

    pub fn matrix(&self) -> Mat {
        let mut s = ZERO;
        for i in 0..self.n {
            for a in 0..self.m {
                s[i][a] = self.entries[i * self.m + a];
            }
        }
        s
    }

    /// Stored singular values agree with recomputed ones.
    pub fn consistent(&self, tol: f64) -> bool {
        let sv = singular_values(&self.matrix(), self.n, self.m);
        self.singular_values.iter().enumerate().all(|(k, v)| (sv[k] - v).abs() <= tol * (1.0 + v.abs()))
    }
}

/// `det(δ_ij + Σ_α S^α_i S^α_j)`.
pub fn det_lhs(s: &Mat, n: usize, m: usize) -> f64 {
    let mut g = ZERO;
    for i in 0..n {
        for j in 0..n {
            g[i][j] = f64::from(i == j) + (0..m).map(|a| s[i][a] * s[j][a]).sum::<f64>();
        }
    }
    det(&g, n)
}

/// `Σ_α |S^α|` with `|S^α|` the norm of column α.
pub fn column_norm_sum(s: &Mat, n: usize, m: usize) -> f64 {
    (0..m).map(|a| (0..n).map(|i| s[i][a] * s[i][a]).sum::<f64>().sqrt()).sum()
}

pub fn norm_rhs(s: &Mat, n: usize, m: usize) -> f64 {
    1.0 + column_norm_sum(s, n, m).powi(2)
}

/// Largest `λ_iλ_j`, `i ≠ j`.
pub fn max_pair_product(s: &Mat, n: usize, m: usize) -> f64 {
    let sv = singular_values(s, n, m);
    sv[0] * sv[1]
}

/// Hypotheses of a lemma for one matrix, given its singular values.
fn admissible(id: LemmaId, s: &Mat, sv: &[f64], n: usize, m: usize, k: f64, tol: f64) -> bool {
    match id {
        LemmaId::SmallT => {
            let r = n.min(m);
            sv[0] >= ((n - 1) as f64).sqrt() * (1.0 - tol)
                && (0..r).all(|i| (i + 1..r).all(|j| sv[i] * sv[j] <= 1.0 + tol))
        }
        LemmaId::Sssss => sv.iter().take(n).map(|x| 1.0 + x * x).product::<f64>() <= 9.0 * (1.0 + tol),
        LemmaId::Du1a => {
            let a: f64 = (0..n).map(|i| s[i][0] * s[i][0]).sum();
            let b: f64 = (1..m).flat_map(|c| (0..n).map(move |i| (i, c))).map(|(i, c)| s[i][c] * s[i][c]).sum();
            a * b <= k * k * (1.0 + tol) && b <= k * (1.0 + tol)
        }
    }
}

/// Relative slack of the conclusion; negative means violated.
fn slack(id: LemmaId, s: &Mat, n: usize, m: usize, k: f64) -> f64 {
    match id {
        LemmaId::SmallT | LemmaId::Sssss => {
            let rhs = norm_rhs(s, n, m);
            (rhs - det_lhs(s, n, m)) / rhs
        }
        LemmaId::Du1a => (2.0 * k - max_pair_product(s, n, m)) / (2.0 * k),
    }
}

fn check_shape(id: LemmaId, n: usize, m: usize, k: f64) -> Result<(), LemmaError> {
    if !(2..=MAX_DIM).contains(&n) {
        return Err(LemmaError::BadCondition(format!("n = {n} must lie in 2..={MAX_DIM}")));
    }
    if !(1..=MAX_DIM).contains(&m) {
        return Err(LemmaError::BadCondition(format!("m = {m} must lie in 1..={MAX_DIM}")));
    }
    if id == LemmaId::Du1a && (m < 2 || !(k > 0.0)) {
        return Err(LemmaError::BadCondition(format!("needs m >= 2 and K > 0 (m = {m}, K = {k})")));
    }
    Ok(())
}

fn trial_rng(seed: u64, trial: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(trial);
    r
}

/// One conditioned sample: singular values drawn uniformly from the
/// admissible region by rejection, then Haar rotations on both sides. For
/// `Du1a` the split of the gradient is drawn directly.
fn draw(id: LemmaId, n: usize, m: usize, k: f64, rng: &mut ChaCha8Rng) -> (Mat, Vec<f64>) {
    let r = n.min(m);
    match id {
        LemmaId::SmallT => {
            let lo = ((n - 1) as f64).sqrt();
            loop {
                let s1 = rng.gen_range(lo..lo + 3.0);
                let mut rest: Vec<f64> = (1..r).map(|_| rng.gen_range(0.0..1.0 / lo)).collect();
                if rest.iter().any(|x| s1 * x > 1.0) {
                    continue;
                }
                rest.sort_by(|a, b| b.partial_cmp(a).unwrap());
                let mut sv = vec![s1];
                sv.extend(rest);
                return (with_singular_values(n, m, &sv, rng), sv);
            }
        }
        LemmaId::Sssss => loop {
            let mut sv: Vec<f64> = (0..r).map(|_| rng.gen_range(0.0..8f64.sqrt())).collect();
            if sv.iter().map(|x| 1.0 + x * x).product::<f64>() > 9.0 {
                continue;
            }
            sv.sort_by(|a, b| b.partial_cmp(a).unwrap());
            return (with_singular_values(n, m, &sv, rng), sv);
        },
        LemmaId::Du1a => {
            // b = Σ_{α≥2}|Du^α|² ∈ (0, K], |Du¹| ≤ K/√b
            let b = k * (1.0 - rng.gen::<f64>());
            let tmax = (k / b.sqrt()).min(1e3 * k.sqrt().max(1.0));
            let t = tmax * rng.gen::<f64>().sqrt();
            let q = haar_orthogonal(n, rng);
            let mut s = ZERO;
            for i in 0..n {
                s[i][0] = t * q[i][0];
            }
            let mut fro = 0.0;
            for row in s.iter_mut().take(n) {
                for x in row.iter_mut().take(m).skip(1) {
                    *x = rng.sample(StandardNormal);
                    fro += *x * *x;
                }
            }
            let scale = (b / fro).sqrt();
            for row in s.iter_mut().take(n) {
                for x in row.iter_mut().take(m).skip(1) {
                    *x *= scale;
                }
            }
            let sv = singular_values(&s, n, m);
            (s, sv[..n].to_vec())
        }
    }
}

/// Summary of a fuzzing run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LemmaReport {
    pub lemma: LemmaId,
    pub n: usize,
    pub m: usize,
    pub k: Option<f64>,
    pub trials: u64,
    pub seed: u64,
    pub tolerance: f64,
    /// Trials whose relative slack is below `−tolerance`.
    pub violations: u64,
    /// Samples failing the post-hoc hypothesis or singular-value recheck.
    pub invalid_samples: u64,
    pub min_slack: f64,
    pub worst: Option<MatrixSample>,
    /// Determinant lemma under `det ≤ 9`: trials with `Σ|S^α| > 2√2`, and
    /// among them those where the bound does not follow from `det ≤ 9 < RHS`.
    pub norm_sum_exceeded: Option<u64>,
    pub internal_step_failures: Option<u64>,
}

impl LemmaReport {
    pub fn passed(&self) -> bool {
        self.violations == 0 && self.invalid_samples == 0 && self.internal_step_failures.unwrap_or(0) == 0
    }
}

#[derive(Clone, Copy)]
struct Acc {
    violations: u64,
    invalid: u64,
    exceeded: u64,
    step_fail: u64,
    min_slack: f64,
    worst_trial: u64,
}

impl Acc {
    fn merge(self, o: Acc) -> Acc {
        let (min_slack, worst_trial) = if (o.min_slack, o.worst_trial) < (self.min_slack, self.worst_trial) {
            (o.min_slack, o.worst_trial)
        } else {
            (self.min_slack, self.worst_trial)
        };
        Acc {
            violations: self.violations + o.violations,
            invalid: self.invalid + o.invalid,
            exceeded: self.exceeded + o.exceeded,
            step_fail: self.step_fail + o.step_fail,
            min_slack,
            worst_trial,
        }
    }
}

const EMPTY: Acc =
    Acc { violations: 0, invalid: 0, exceeded: 0, step_fail: 0, min_slack: f64::INFINITY, worst_trial: u64::MAX };

pub const TOLERANCE: f64 = 1e-9;

fn run(id: LemmaId, n: usize, m: usize, k: f64, trials: u64, seed: u64) -> Result<LemmaReport, LemmaError> {
    check_shape(id, n, m, k)?;
    if trials == 0 {
        return Err(LemmaError::BadCondition("trials must be positive".into()));
    }
    let acc = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = trial_rng(seed, t);
            let (s, sv) = draw(id, n, m, k, &mut rng);
            let sample = MatrixSample::new(&s, n, m, &sv, seed, t);
            let recomputed = singular_values(&s, n, m);
            let valid = sample.consistent(1e-10) && admissible(id, &s, &recomputed[..n], n, m, k, 1e-12);
            let sl = slack(id, &s, n, m, k);
            let mut a = Acc { min_slack: sl, worst_trial: t, ..EMPTY };
            a.violations = u64::from(sl < -TOLERANCE);
            a.invalid = u64::from(!valid);
            if id == LemmaId::Sssss && column_norm_sum(&s, n, m) > 2.0 * 2f64.sqrt() {
                a.exceeded = 1;
                // the proof's shortcut: the bound then follows from det ≤ 9
                let lhs = det_lhs(&s, n, m);
                a.step_fail = u64::from(!(lhs <= 9.0 * (1.0 + TOLERANCE) && norm_rhs(&s, n, m) > 9.0));
            }
            a
        })
        .reduce(|| EMPTY, Acc::merge);
    let worst = (acc.worst_trial != u64::MAX).then(|| {
        let mut rng = trial_rng(seed, acc.worst_trial);
        let (s, sv) = draw(id, n, m, k, &mut rng);
        MatrixSample::new(&s, n, m, &sv, seed, acc.worst_trial)
    });
    let sssss = id == LemmaId::Sssss;
    Ok(LemmaReport {
        lemma: id,
        n,
        m,
        k: (id == LemmaId::Du1a).then_some(k),
        trials,
        seed,
        tolerance: TOLERANCE,
        violations: acc.violations,
        invalid_samples: acc.invalid,
        min_slack: acc.min_slack,
        worst,
        norm_sum_exceeded: sssss.then_some(acc.exceeded),
        internal_step_failures: sssss.then_some(acc.step_fail),
    })
}

pub fn verify_small_t(n: usize, m: usize, trials: u64, seed: u64) -> Result<LemmaReport, LemmaError> {
    run(LemmaId::SmallT, n, m, 1.0, trials, seed)
}

pub fn verify_sssss(n: usize, m: usize, trials: u64, seed: u64) -> Result<LemmaReport, LemmaError> {
    run(LemmaId::Sssss, n, m, 1.0, trials, seed)
}

pub fn verify_du1a(n: usize, m: usize, k: f64, trials: u64, seed: u64) -> Result<LemmaReport, LemmaError> {
    run(LemmaId::Du1a, n, m, k, trials, seed)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TightnessResult {
    pub lemma: LemmaId,
    pub worst: MatrixSample,
    pub slack: f64,
    /// `λ₁λ₂` for the gradient lemma, `det(I + SSᵀ)` otherwise.
    pub lhs: f64,
    pub evaluations: u64,
}

fn givens(q: &mut Mat, k: usize, rng: &mut ChaCha8Rng, step: f64) {
    if k < 2 {
        return;
    }
    let a = rng.gen_range(0..k);
    let mut b = rng.gen_range(0..k - 1);
    if b >= a {
        b += 1;
    }
    let th = step * rng.sample::<f64, _>(StandardNormal);
    let (c, s) = (th.cos(), th.sin());
    for row in q.iter_mut().take(k) {
        let (x, y) = (row[a], row[b]);
        row[a] = c * x - s * y;
        row[b] = s * x + c * y;
    }
}

fn compose(u: &Mat, v: &Mat, sv: &[f64], n: usize, m: usize) -> Mat {
    let mut s = ZERO;
    for i in 0..n {
        for a in 0..m {
            s[i][a] = sv.iter().enumerate().map(|(k, x)| u[i][k] * x * v[a][k]).sum();
        }
    }
    s
}

/// Random-restart hill climb towards the smallest slack under the
/// hypotheses. `budget` counts slack evaluations.
pub fn tightness_search(
    id: LemmaId,
    n: usize,
    m: usize,
    k: f64,
    budget: u64,
    seed: u64,
) -> Result<TightnessResult, LemmaError> {
    check_shape(id, n, m, k)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = n.min(m);
    let restarts = 8u64.min(budget.max(1));
    let per = (budget / restarts).max(1);
    let mut best: Option<(f64, Mat)> = None;
    let mut evaluations = 0;
    for _ in 0..restarts {
        let (mut s, mut sv) = draw(id, n, m, k, &mut rng);
        sv.truncate(r);
        let mut u = haar_orthogonal(n, &mut rng);
        let mut v = haar_orthogonal(m, &mut rng);
        if id != LemmaId::Du1a {
            s = compose(&u, &v, &sv, n, m);
        }
        let mut cur = slack(id, &s, n, m, k);
        let mut step = 0.3;
        for _ in 0..per {
            evaluations += 1;
            let cand = if id == LemmaId::Du1a {
                let mut c = s;
                for row in c.iter_mut().take(n) {
                    for x in row.iter_mut().take(m) {
                        *x += step * rng.sample::<f64, _>(StandardNormal) * x.abs().max(0.1);
                    }
                }
                (c, None)
            } else {
                let mut sv2 = sv.clone();
                for x in sv2.iter_mut() {
                    *x = (*x + step * rng.sample::<f64, _>(StandardNormal)).max(0.0);
                }
                sv2.sort_by(|a, b| b.partial_cmp(a).unwrap());
                let (mut u2, mut v2) = (u, v);
                givens(&mut u2, n, &mut rng, step);
                givens(&mut v2, m, &mut rng, step);
                (compose(&u2, &v2, &sv2, n, m), Some((sv2, u2, v2)))
            };
            let csv = singular_values(&cand.0, n, m);
            if !admissible(id, &cand.0, &csv[..n], n, m, k, 0.0) {
                step = (step * 0.9).max(1e-6);
                continue;
            }
            let sl = slack(id, &cand.0, n, m, k);
            if sl < cur {
                cur = sl;
                s = cand.0;
                if let Some((a, b, c)) = cand.1 {
                    sv = a;
                    u = b;
                    v = c;
                }
                step = (step * 1.2).min(1.0);
            } else {
                step = (step * 0.95).max(1e-6);
            }
        }
        if best.as_ref().map_or(true, |b| cur < b.0) {
            best = Some((cur, s));
        }
    }
    let (sl, s) = best.expect("at least one restart");
    let sv = singular_values(&s, n, m);
    let lhs = if id == LemmaId::Du1a { max_pair_product(&s, n, m) } else { det_lhs(&s, n, m) };
    Ok(TightnessResult { lemma: id, worst: MatrixSample::new(&s, n, m, &sv[..n], seed, 0), slack: sl, lhs, evaluations })
}
