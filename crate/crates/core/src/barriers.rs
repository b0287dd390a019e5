//! Barrier functions, the boundary gradient bound, the elliptic action
//! inequality as a fuzzable check, and the non-existence construction on a
//! catenoid neck.

use std::io::{self, Write};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analytic::{Affine, Bump, SharedField};
use crate::criteria::{BoundaryData, ComponentNorms};
use crate::domain::{boundary_sample, distance_jet, DomainKind, DomainSpec, GeometrySummary};
use crate::linalg::{det, singular_values, spd_inverse, sym_eigen, Mat, Vector, MAX_DIM, ZERO};
use crate::sampling::{haar_orthogonal, unit_vector, with_singular_values};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BarrierError {
    #[error("phi(d0) = {phi_d0} is below |Dphi|_0 l = {needed}; kappa was not built from the data")]
    InconsistentConstants { phi_d0: f64, needed: f64 },
    #[error("epsilon = {0} is outside (0, 1]")]
    BadEpsilon(f64),
    #[error("radius a = {a} must satisfy 0 < a < l = {l}")]
    BadRadius { a: f64, l: f64 },
    #[error("geometry unsuitable: {0}")]
    GeometryUnsuitable(String),
    #[error("cannot condition sample: {0}")]
    BadCondition(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BarrierKind {
    ExteriorSphere,
    LogDistance,
    SqrtNeck,
    LogIntegral,
}

/// One-variable barrier profile with its first two derivatives.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Barrier {
    /// `(Θ/θ)(1 − e^{−θρ})` in the distance `ρ` to the exterior sphere.
    ExteriorSphere { theta: f64, big_theta: f64 },
    /// `(1/ν) log(1 + κ d / d₀)`.
    LogDistance { nu: f64, kappa: f64, d0: f64 },
    /// `χ(t − δ)` with `χ(t) = 2√(1+ε²)/(√a ε) · (√(2a) − √t)`.
    SqrtNeck { eps: f64, a: f64, delta: f64 },
    /// `∫_ρ^l (log(t/a))^{-1/2} dt` on `(a, l]`.
    LogIntegral { a: f64, l: f64 },
}

impl Barrier {
    pub fn kind(&self) -> BarrierKind {
        match self {
            Barrier::ExteriorSphere { .. } => BarrierKind::ExteriorSphere,
            Barrier::LogDistance { .. } => BarrierKind::LogDistance,
            Barrier::SqrtNeck { .. } => BarrierKind::SqrtNeck,
            Barrier::LogIntegral { .. } => BarrierKind::LogIntegral,
        }
    }

    /// Interval of definition. The left end is open for kinds with a pole.
    pub fn interval(&self) -> (f64, f64) {
        match *self {
            Barrier::ExteriorSphere { theta, .. } => (0.0, 10.0 / theta),
            Barrier::LogDistance { d0, .. } => (0.0, d0),
            Barrier::SqrtNeck { a, delta, .. } => (delta, a),
            Barrier::LogIntegral { a, l } => (a, l),
        }
    }

    /// Whether the first derivative is −∞ at the left endpoint.
    pub fn left_pole(&self) -> bool {
        matches!(self, Barrier::SqrtNeck { .. } | Barrier::LogIntegral { .. })
    }

    fn neck_scale(eps: f64, a: f64) -> f64 {
        2.0 * (1.0 + eps * eps).sqrt() / (a.sqrt() * eps)
    }

    pub fn value(&self, x: f64) -> f64 {
        match *self {
            Barrier::ExteriorSphere { theta, big_theta } => big_theta / theta * (-(-theta * x).exp_m1()),
            Barrier::LogDistance { nu, kappa, d0 } => (kappa * x / d0).ln_1p() / nu,
            Barrier::SqrtNeck { eps, a, delta } => {
                Self::neck_scale(eps, a) * ((2.0 * a).sqrt() - (x - delta).sqrt())
            }
            Barrier::LogIntegral { a, l } => log_integral(a, x, l),
        }
    }

    pub fn d1(&self, x: f64) -> f64 {
        match *self {
            Barrier::ExteriorSphere { theta, big_theta } => big_theta * (-theta * x).exp(),
            Barrier::LogDistance { nu, kappa, d0 } => kappa / (nu * (d0 + kappa * x)),
            Barrier::SqrtNeck { eps, a, delta } => {
                if x <= delta {
                    f64::NEG_INFINITY
                } else {
                    -0.5 * Self::neck_scale(eps, a) / (x - delta).sqrt()
                }
            }
            Barrier::LogIntegral { a, .. } => {
                if x <= a {
                    f64::NEG_INFINITY
                } else {
                    -(x / a).ln().powf(-0.5)
                }
            }
        }
    }

    pub fn d2(&self, x: f64) -> f64 {
        match *self {
            Barrier::ExteriorSphere { theta, big_theta } => -theta * big_theta * (-theta * x).exp(),
            Barrier::LogDistance { nu, kappa, d0 } => -kappa * kappa / (nu * (d0 + kappa * x).powi(2)),
            Barrier::SqrtNeck { eps, a, delta } => 0.25 * Self::neck_scale(eps, a) / (x - delta).powf(1.5),
            Barrier::LogIntegral { a, .. } => 0.5 * (x / a).ln().powf(-1.5) / x,
        }
    }

    /// Writes `x,value,d1,d2` rows at `samples` points spread over the
    /// interval, skipping the left endpoint when it is a pole.
    pub fn write_csv<W: Write>(&self, samples: usize, mut w: W) -> io::Result<()> {
        let (lo, hi) = self.interval();
        writeln!(w, "x,value,d1,d2")?;
        let k = samples.max(2);
        for i in 0..k {
            let mut t = i as f64 / (k - 1) as f64;
            if self.left_pole() && i == 0 {
                t = 0.5 / (k - 1) as f64;
            }
            let x = lo + t * (hi - lo);
            writeln!(w, "{x:.17e},{:.17e},{:.17e},{:.17e}", self.value(x), self.d1(x), self.d2(x))?;
        }
        Ok(())
    }
}

fn nl_factor(geo: &GeometrySummary, v2_cap: f64) -> f64 {
    let nl = geo.dim as f64 * geo.diameter * v2_cap;
    let expo = match geo.exterior_radius {
        Some(r) => 1.0 + nl / r,
        None => 1.0,
    };
    nl * expo.exp()
}

/// Boundary gradient bound `nl[f] e^{1 + nl[f]/r_Ω} sup|D²ψ^α| + sup|Dψ^α|`
/// with `v2_cap` standing in for `[f]`.
pub fn exterior_sphere_bound(bd: &BoundaryData, geo: &GeometrySummary, v2_cap: f64, alpha: usize) -> f64 {
    let c = &bd.norms[alpha];
    nl_factor(geo, v2_cap) * c.hess_sup + c.grad_sup
}

/// The exterior-sphere barrier profile behind [`exterior_sphere_bound`].
pub fn exterior_sphere_barrier(bd: &BoundaryData, geo: &GeometrySummary, v2_cap: f64, alpha: usize) -> Barrier {
    let n = geo.dim as f64;
    let theta = 1.0 / geo.diameter + geo.exterior_radius.map_or(0.0, |r| n * v2_cap / r);
    Barrier::ExteriorSphere { theta, big_theta: nl_factor(geo, v2_cap) * bd.norms[alpha].hess_sup }
}

/// Log-distance barrier, after checking `φ(d₀) ≥ |Dφ|₀ l`.
pub fn log_distance_barrier(
    nu: f64,
    kappa: f64,
    d0: f64,
    phi_grad_sup: f64,
    diameter: f64,
) -> Result<Barrier, BarrierError> {
    let b = Barrier::LogDistance { nu, kappa, d0 };
    let phi_d0 = b.value(d0);
    let needed = phi_grad_sup * diameter;
    // κ = e^{ν|Dφ|₀l} gives equality, so only round-off is tolerated
    if phi_d0 < needed * (1.0 - 1e-12) {
        return Err(BarrierError::InconsistentConstants { phi_d0, needed });
    }
    Ok(b)
}

// ---------------------------------------------------------------------------
// elliptic action inequality

/// One admissible configuration at a point of the band.
#[derive(Clone, Copy, Debug)]
pub struct ActionSample {
    pub n: usize,
    pub m: usize,
    pub dd: Vector,
    pub hess_d: Mat,
    pub lambda_minus: f64,
    /// `φ'` and `φ''` of the profile.
    pub p1: f64,
    pub p2: f64,
    /// Gradient and Hessian of the data `φ`.
    pub dphi: Vector,
    pub hess_phi: Mat,
    /// Rows `0..m-1`: gradients of the other components.
    pub dw: Mat,
}

impl ActionSample {
    fn tilde_grad(&self) -> Vector {
        let mut g = [0.0; MAX_DIM];
        for i in 0..self.n {
            g[i] = self.p1 * self.dd[i] + self.dphi[i];
        }
        g
    }

    /// Columns `(Dφ̃, Dw¹, …)` as an `n × m` block.
    fn columns(&self) -> Mat {
        let g = self.tilde_grad();
        let mut c = ZERO;
        for i in 0..self.n {
            c[i][0] = g[i];
            for a in 0..self.m - 1 {
                c[i][a + 1] = self.dw[a][i];
            }
        }
        c
    }

    pub fn singular_values(&self) -> Vector {
        singular_values(&self.columns(), self.n, self.m)
    }

    /// Pairwise singular-value products at most one, profile monotone and
    /// concave, distance Hessian admissible.
    pub fn admissible(&self, tol: f64) -> bool {
        let n = self.n;
        let mu = self.singular_values();
        if mu[0] * mu[1] > 1.0 + tol || self.p1 < 0.0 || self.p2 > 0.0 {
            return false;
        }
        let mut radial = 0.0;
        let mut lap = 0.0;
        for i in 0..n {
            lap += self.hess_d[i][i];
            for j in 0..n {
                radial += self.hess_d[i][j] * self.dd[j] * self.dd[i];
            }
        }
        let lmin = sym_eigen(&self.hess_d, n).values[n - 1];
        radial.abs() <= tol && lap <= tol && lmin >= -self.lambda_minus - tol
    }

    /// Left side `a^{ij} φ̃_ij` and the right side of the bound.
    pub fn sides(&self) -> (f64, f64) {
        let n = self.n;
        let c = self.columns();
        let mut a = ZERO;
        for i in 0..n {
            for j in 0..n {
                let mut s = if i == j { 1.0 } else { 0.0 };
                for k in 0..self.m {
                    s += c[i][k] * c[j][k];
                }
                a[i][j] = s;
            }
        }
        let ainv = spd_inverse(&a, n).expect("a ≥ I");
        let mut lhs = 0.0;
        for i in 0..n {
            for j in 0..n {
                let t = self.p1 * self.hess_d[i][j] + self.p2 * self.dd[i] * self.dd[j] + self.hess_phi[i][j];
                lhs += ainv[i][j] * t;
            }
        }
        let mu1 = self.singular_values()[0];
        let dphi2: f64 = self.dphi[..n].iter().map(|v| v * v).sum();
        let nf = n as f64;
        let curv = if self.lambda_minus == 0.0 {
            0.0
        } else if mu1 == 0.0 || self.p1 == 0.0 {
            f64::INFINITY
        } else {
            self.p1
                * self.lambda_minus
                * (2.0 / (self.p1 * self.p1) * (dphi2 + (nf - 1.0) / (mu1 * mu1)) + (nf - 1.0) / (1.0 + mu1 * mu1))
        };
        let lam_plus = sym_eigen(&self.hess_phi, n).values[0].max(0.0);
        let rhs = curv + self.p2 / det(&a, n) + nf * lam_plus;
        (lhs, rhs)
    }
}

fn sample_action<R: Rng>(n: usize, m: usize, rng: &mut R) -> ActionSample {
    let dd = unit_vector(n, rng);
    // tangential frame completing Dd
    let q = haar_orthogonal(n, rng);
    let mut basis: Vec<Vector> = Vec::with_capacity(n - 1);
    for c in 0..n {
        let mut v = [0.0; MAX_DIM];
        for r in 0..n {
            v[r] = q[r][c];
        }
        for b in std::iter::once(&dd).chain(basis.iter()) {
            let dot: f64 = (0..n).map(|r| v[r] * b[r]).sum();
            for r in 0..n {
                v[r] -= dot * b[r];
            }
        }
        let nrm = v[..n].iter().map(|x| x * x).sum::<f64>().sqrt();
        if nrm > 1e-6 && basis.len() < n - 1 {
            for x in v.iter_mut().take(n) {
                *x /= nrm;
            }
            basis.push(v);
        }
    }
    let lambda_minus = rng.gen_range(0.0..2.0);
    // tangential curvatures ≥ −λ₋ with non-positive sum
    let mut t = vec![0.0; n - 1];
    loop {
        for v in t.iter_mut() {
            *v = rng.gen_range(-lambda_minus..=2.0);
        }
        if t.iter().sum::<f64>() <= 0.0 {
            break;
        }
    }
    let mut hess_d = ZERO;
    for (k, b) in basis.iter().enumerate() {
        for i in 0..n {
            for j in 0..n {
                hess_d[i][j] += t[k] * b[i] * b[j];
            }
        }
    }
    let p1 = rng.gen_range(1e-3..5.0);
    let p2 = -rng.gen_range(0.0..5.0);
    // singular values with s₁ s₂ ≤ 1, then (Dφ̃, Dw) = U Σ Vᵀ
    let k = n.min(m);
    let mut sv = vec![0.0f64; k];
    sv[0] = rng.gen_range(0.0..4.0);
    if k > 1 {
        sv[1] = rng.gen_range(0.0..=sv[0].min(1.0 / sv[0].max(1e-12)));
        for i in 2..k {
            sv[i] = rng.gen_range(0.0..=sv[i - 1]);
        }
    }
    let cols = with_singular_values(n, m, &sv, rng);
    let mut dphi = [0.0; MAX_DIM];
    let mut dw = ZERO;
    for i in 0..n {
        dphi[i] = cols[i][0] - p1 * dd[i];
        for a in 0..m - 1 {
            dw[a][i] = cols[i][a + 1];
        }
    }
    let mut hess_phi = ZERO;
    for i in 0..n {
        for j in i..n {
            let v = rng.gen_range(-2.0..2.0);
            hess_phi[i][j] = v;
            hess_phi[j][i] = v;
        }
    }
    ActionSample { n, m, dd, hess_d, lambda_minus, p1, p2, dphi, hess_phi, dw }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionReport {
    pub n: usize,
    pub m: usize,
    pub trials: usize,
    pub seed: u64,
    pub violations: usize,
    /// Samples failing the post-hoc admissibility recheck.
    pub inadmissible: usize,
    /// Smallest `(rhs − lhs)/(1 + |rhs|)`.
    pub min_relative_slack: f64,
}

/// Fuzzes `a^{ij}φ̃_ij ≤ RHS` over conditioned random configurations.
pub fn elliptic_action_bound_check(n: usize, m: usize, trials: usize, seed: u64) -> Result<ActionReport, BarrierError> {
    if !(2..=MAX_DIM).contains(&n) || !(1..=MAX_DIM).contains(&m) {
        return Err(BarrierError::BadCondition(format!("n = {n}, m = {m} outside supported range")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut violations = 0;
    let mut inadmissible = 0;
    let mut worst = f64::INFINITY;
    for _ in 0..trials {
        let s = sample_action(n, m, &mut rng);
        if !s.admissible(1e-9) {
            inadmissible += 1;
            continue;
        }
        let (lhs, rhs) = s.sides();
        let slack = (rhs - lhs) / (1.0 + rhs.abs());
        if rhs.is_finite() {
            worst = worst.min(slack);
        }
        if slack < -1e-9 {
            violations += 1;
        }
    }
    Ok(ActionReport { n, m, trials, seed, violations, inadmissible, min_relative_slack: worst })
}

// ---------------------------------------------------------------------------
// non-existence threshold

fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm);
    let frm = f(rm);
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        return left + right + delta / 15.0;
    }
    simpson(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1) + simpson(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
}

/// Adaptive Simpson quadrature.
pub fn integrate(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    if a == b {
        return 0.0;
    }
    let fa = f(a);
    let fb = f(b);
    let fm = f(0.5 * (a + b));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    simpson(f, a, b, fa, fm, fb, whole, tol, 50)
}

/// `∫_ρ^l (log(t/a))^{-1/2} dt` through `t = a e^{s²}`, which turns it into
/// `2a ∫ e^{s²} ds` over `[√log(ρ/a), √log(l/a)]`.
pub fn log_integral(a: f64, rho: f64, l: f64) -> f64 {
    let s0 = (rho / a).ln().max(0.0).sqrt();
    let s1 = (l / a).ln().max(0.0).sqrt();
    2.0 * a * integrate(&|s: f64| (s * s).exp(), s0, s1, 1e-13)
}

/// Same integral from the power series of `∫ e^{s²} ds`.
pub fn log_integral_series(a: f64, rho: f64, l: f64) -> f64 {
    let prim = |s: f64| {
        let mut term = s; // s^{2k+1}/k!
        let mut sum = 0.0;
        for k in 0..400 {
            let add = term / (2 * k + 1) as f64;
            sum += add;
            if add.abs() < 1e-18 * sum.abs() {
                break;
            }
            term *= s * s / (k + 1) as f64;
        }
        sum
    };
    let s0 = (rho / a).ln().max(0.0).sqrt();
    let s1 = (l / a).ln().max(0.0).sqrt();
    2.0 * a * (prim(s1) - prim(s0))
}

/// `2√(2(1+ε²))/ε + φ(a⁺)`; the data-dependent sup term is added by callers.
pub fn nonexistence_threshold(eps: f64, a: f64, l: f64) -> Result<f64, BarrierError> {
    if !(eps > 0.0 && eps <= 1.0) {
        return Err(BarrierError::BadEpsilon(eps));
    }
    if !(a > 0.0 && a < l) {
        return Err(BarrierError::BadRadius { a, l });
    }
    Ok(2.0 * (2.0 * (1.0 + eps * eps)).sqrt() / eps + log_integral(a, a, l))
}

// ---------------------------------------------------------------------------
// non-existence data

/// Worst sampled point for one of the two curvature inequalities.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub point: Vector,
    pub value: f64,
    pub bound: f64,
}

#[derive(Clone, Debug)]
pub struct NonexistenceData {
    pub data: BoundaryData,
    pub eps: f64,
    /// Curvature constant and radius of the neighbourhood of `q`.
    pub a: f64,
    pub q: Vector,
    pub tangent: Vector,
    pub threshold: f64,
    /// `sup φ` over the boundary away from `B_a(q)`.
    pub sup_term: f64,
    pub peak: f64,
    /// Set when the peak does not strictly exceed the threshold.
    pub inconclusive: bool,
    pub d11_certificate: Certificate,
    pub laplacian_certificate: Certificate,
    pub sampled_points: usize,
}

struct NeckSample {
    point: Vector,
    dist_to_q: f64,
    d11: f64,
    lap: f64,
}

/// Closed-form sup-norms of the bump over all of ℝⁿ.
fn bump_norms(peak: f64, r: f64, n: usize) -> (ComponentNorms, f64) {
    let mut g: f64 = 0.0;
    let mut h: f64 = 0.0;
    let mut lam: f64 = 0.0;
    let k = 20000;
    for i in 0..=k {
        let s = i as f64 / k as f64;
        let one = 1.0 - s;
        g = g.max(8.0 * peak * one.powi(3) * s.sqrt() / r);
        let radial = 8.0 * peak * one * one * (7.0 * s - 1.0) / (r * r);
        let tang = -8.0 * peak * one.powi(3) / (r * r);
        h = h.max((radial * radial + (n as f64 - 1.0) * tang * tang).sqrt());
        lam = lam.max(radial).max(tang);
    }
    // the grid above misses the maxima by O(1/k²); pad generously
    let pad = 1.0 + 1e-6;
    (ComponentNorms { grad_sup: g * pad, hess_sup: h * pad, boundary_grad_sup: g * pad }, lam * pad)
}

impl NonexistenceData {
    /// Rebuilds the data with a different bump peak.
    pub fn with_peak(&self, peak: f64) -> Self {
        let n = self.q.len().min(3);
        let mut out = self.clone();
        out.peak = peak;
        out.inconclusive = peak <= self.threshold + self.sup_term;
        out.data = build_data(self.eps, &self.tangent, &self.q, self.a, peak, n);
        out
    }
}

fn build_data(eps: f64, tangent: &Vector, q: &Vector, a: f64, peak: f64, n: usize) -> BoundaryData {
    let slope: Vec<f64> = tangent[..n].iter().map(|t| eps * t).collect();
    let psi1: SharedField = Arc::new(Affine::new(slope, 0.0));
    let psi2: SharedField = Arc::new(Bump { center: q[..n].to_vec(), radius: a, peak });
    let n1 = ComponentNorms { grad_sup: eps, hess_sup: 0.0, boundary_grad_sup: eps };
    let (n2, lam) = bump_norms(peak, a, n);
    BoundaryData::with_norms(vec![psi1, psi2], vec![n1, n2], lam)
}

/// Non-existence data on a catenoid neck: `ψ¹` linear with slope `ε` along
/// the convex tangent at the neck point `q`, `ψ²` a bump at `q` of radius `a`
/// whose peak exceeds the threshold by `margin`. The constant `a` is the
/// largest value for which `d₁₁ < −a` and `Δd ≥ −aε²/(2(1+ε²))` hold at every
/// sampled point of `B_a(q) ∩ Ω`; it must exceed `4h`.
pub fn make_nonexistence_data(
    spec: &DomainSpec,
    eps: f64,
    margin: f64,
    h: f64,
) -> Result<NonexistenceData, BarrierError> {
    if spec.kind != DomainKind::CatenoidNeck {
        return Err(BarrierError::GeometryUnsuitable("construction needs a catenoid neck".into()));
    }
    if !(eps > 0.0 && eps <= 1.0) {
        return Err(BarrierError::BadEpsilon(eps));
    }
    let n = spec.dim;
    let c = spec.params[0];
    let l = spec.diameter().unwrap_or(f64::INFINITY);
    let mut q = [0.0; MAX_DIM];
    q[0] = c;
    // at q the outward normal is e_x; the circle direction e_y is convex,
    // the meridian e_z is not
    let mut tangent = [0.0; MAX_DIM];
    tangent[1] = 1.0;
    let bs = boundary_sample(spec, &q);
    if bs.min_curvature >= 0.0 || bs.mean_curvature.abs() > 1e-6 {
        return Err(BarrierError::GeometryUnsuitable(format!(
            "neck point has H = {}, min curvature {}",
            bs.mean_curvature, bs.min_curvature
        )));
    }
    let a_max = bs.max_curvature.min(0.5 * l);
    let k = 14usize;
    let step = a_max / k as f64;
    let fd = (step * 0.25).min(h / 8.0);
    let mut samples = Vec::new();
    let span = k as i64;
    for i in -span..=0 {
        for j in -span..=span {
            for z in -span..=span {
                let off = [i as f64 * step, j as f64 * step, z as f64 * step];
                let r = (off[0] * off[0] + off[1] * off[1] + off[2] * off[2]).sqrt();
                if r > a_max {
                    continue;
                }
                let mut x = q;
                for t in 0..3 {
                    x[t] += off[t];
                }
                if spec.level(&x[..n]) >= 0.0 {
                    continue;
                }
                if let Ok(jt) = distance_jet(spec, &x, fd) {
                    if jt.d <= 2.0 * fd {
                        continue;
                    }
                    let lap: f64 = (0..n).map(|t| jt.hess[t][t]).sum();
                    samples.push(NeckSample { point: x, dist_to_q: r, d11: jt.hess[1][1], lap });
                }
            }
        }
    }
    let ratio = eps * eps / (2.0 * (1.0 + eps * eps));
    let passes = |a: f64| samples.iter().filter(|s| s.dist_to_q < a).all(|s| s.d11 < -a && s.lap >= -a * ratio);
    let mut a = a_max;
    while a > 4.0 * h && !passes(a) {
        a *= 0.98;
    }
    if a <= 4.0 * h {
        return Err(BarrierError::GeometryUnsuitable(format!(
            "no curvature constant a > 4h = {} (largest candidate {a_max})",
            4.0 * h
        )));
    }
    let inside: Vec<&NeckSample> = samples.iter().filter(|s| s.dist_to_q < a).collect();
    let d11_worst = inside.iter().max_by(|x, y| x.d11.total_cmp(&y.d11)).expect("samples near q");
    let lap_worst = inside.iter().min_by(|x, y| x.lap.total_cmp(&y.lap)).expect("samples near q");
    let threshold = nonexistence_threshold(eps, a, l)?;
    // the bump vanishes on the boundary outside B_a(q)
    let sup_term = 0.0;
    let peak = threshold + sup_term + margin;
    Ok(NonexistenceData {
        data: build_data(eps, &tangent, &q, a, peak, n),
        eps,
        a,
        q,
        tangent,
        threshold,
        sup_term,
        peak,
        inconclusive: margin <= 0.0,
        d11_certificate: Certificate { point: d11_worst.point, value: d11_worst.d11, bound: -a },
        laplacian_certificate: Certificate { point: lap_worst.point, value: lap_worst.lap, bound: -a * ratio },
        sampled_points: inside.len(),
    })
}
