//! Boundary data norms and the explicit solvability constants and conditions.

use std::f64::consts::{E, SQRT_2};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analytic::{Scaled, SharedField};
use crate::domain::{DistanceField, DomainSpec, GeometrySummary, Grid};
use crate::jetcalc::VectorField;
use crate::linalg::{sym_eigen, Mat, MAX_DIM};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CriteriaError {
    #[error("condition not applicable: {0}")]
    NotApplicable(String),
    #[error("beta_0 = {0} is outside (1, 9]")]
    BadBeta(f64),
    #[error("d0 = {d0} is below 4h = {}; the grid cannot resolve the band", 4.0 * h)]
    DegenerateBand { d0: f64, h: f64 },
    #[error("safety factor {0} is outside (0, 1]")]
    BadSafety(f64),
}

/// Sup-norms of one component over the closure of Ω.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ComponentNorms {
    pub grad_sup: f64,
    pub hess_sup: f64,
    /// Sup of `|Dψ^α|` over sampled boundary points.
    pub boundary_grad_sup: f64,
}

/// The `m` boundary functions; the last one is the distinguished `φ`.
#[derive(Clone, Debug)]
pub struct BoundaryData {
    pub components: Vec<SharedField>,
    pub norms: Vec<ComponentNorms>,
    /// Euclidean norms of the stacked arrays `(Dψ^α)_α`, `(D²ψ^α)_α`.
    pub stacked_grad_sup: f64,
    pub stacked_hess_sup: f64,
    pub stacked_boundary_grad_sup: f64,
    /// `max{0, sup λ_max(Hess φ)}` over the band.
    pub lambda_plus: f64,
}

fn frob(h: &Mat, n: usize) -> f64 {
    let mut s = 0.0;
    for row in h.iter().take(n) {
        for v in row.iter().take(n) {
            s += v * v;
        }
    }
    s.sqrt()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Pointwise quantities whose sups make up the cached norms.
fn quantities(components: &[SharedField], x: &[f64], n: usize) -> Vec<f64> {
    let m = components.len();
    let mut q = Vec::with_capacity(2 * m + 3);
    let mut sg = 0.0;
    let mut sh = 0.0;
    let mut g = [0.0; MAX_DIM];
    let mut lam = 0.0;
    for (a, c) in components.iter().enumerate() {
        c.gradient(x, &mut g[..n]);
        let h = c.hessian(x);
        let gn = norm(&g[..n]);
        let hn = frob(&h, n);
        sg += gn * gn;
        sh += hn * hn;
        q.push(gn);
        q.push(hn);
        if a == m - 1 {
            lam = sym_eigen(&h, n).values[0];
        }
    }
    q.push(sg.sqrt());
    q.push(sh.sqrt());
    q.push(lam);
    q
}

impl BoundaryData {
    /// Norms measured by sampling every inside node and cut point, polishing
    /// around each maximizer, and padding by the largest change between
    /// adjacent samples. `λ₊` is taken over nodes with `d ≤ band_width`
    /// (all samples when no distance field is given) and the cut points.
    pub fn measure(
        components: Vec<SharedField>,
        spec: &DomainSpec,
        grid: &Grid,
        dist: Option<&DistanceField>,
        band_width: f64,
    ) -> Self {
        let n = grid.dim;
        let m = components.len();
        assert!(m >= 1, "need at least one component");
        let count = grid.num_sources();
        let width = 2 * m + 3;
        let mut vals = Vec::with_capacity(count * width);
        for s in 0..count {
            let x = grid.source_position(s);
            vals.extend(quantities(&components, &x[..n], n));
        }
        let in_band = |s: usize| -> bool {
            if grid.is_cut_source(s) {
                return true;
            }
            dist.map_or(true, |d| d.d[s] <= band_width)
        };
        let mut best = vec![f64::NEG_INFINITY; width];
        let mut arg = vec![0usize; width];
        let mut bgrad = vec![0.0f64; m + 1];
        for s in 0..count {
            for k in 0..width {
                if k == width - 1 && !in_band(s) {
                    continue;
                }
                if vals[s * width + k] > best[k] {
                    best[k] = vals[s * width + k];
                    arg[k] = s;
                }
            }
            if grid.is_cut_source(s) {
                for a in 0..m {
                    bgrad[a] = bgrad[a].max(vals[s * width + 2 * a]);
                }
                bgrad[m] = bgrad[m].max(vals[s * width + 2 * m]);
            }
        }
        // polish on a fine local lattice around each maximizer
        let step = grid.h / 4.0;
        let reach = 2i64;
        let span = (2 * reach + 1) as usize;
        let lattice = span.pow(n as u32);
        for k in 0..width {
            let centre = grid.source_position(arg[k]);
            for code in 0..lattice {
                let mut y = centre;
                let mut c = code;
                for item in y.iter_mut().take(n) {
                    *item += ((c % span) as i64 - reach) as f64 * step;
                    c /= span;
                }
                if spec.level(&y[..n]) > 0.0 {
                    continue;
                }
                let q = quantities(&components, &y[..n], n);
                best[k] = best[k].max(q[k]);
            }
        }
        // pad by the largest jump between adjacent samples
        let mut jump = vec![0.0f64; width];
        for i in 0..grid.num_inside() {
            for axis in 0..n {
                let (s, _) = grid.neighbor(i, axis, 1);
                for k in 0..width {
                    let d = (vals[i * width + k] - vals[s * width + k]).abs();
                    jump[k] = jump[k].max(d);
                }
            }
        }
        let pad = 0.5 * (n as f64).sqrt();
        let up = |k: usize| best[k] + pad * jump[k];
        let norms = (0..m)
            .map(|a| ComponentNorms {
                grad_sup: up(2 * a),
                hess_sup: up(2 * a + 1),
                boundary_grad_sup: bgrad[a] + pad * jump[2 * a],
            })
            .collect();
        Self {
            norms,
            stacked_grad_sup: up(2 * m),
            stacked_hess_sup: up(2 * m + 1),
            stacked_boundary_grad_sup: bgrad[m] + pad * jump[2 * m],
            lambda_plus: up(2 * m + 2).max(0.0),
            components,
        }
    }

    /// Data with norms supplied by the caller (closed-form norms).
    pub fn with_norms(components: Vec<SharedField>, norms: Vec<ComponentNorms>, lambda_plus: f64) -> Self {
        let stacked = |f: fn(&ComponentNorms) -> f64| norms.iter().map(|c| f(c).powi(2)).sum::<f64>().sqrt();
        Self {
            stacked_grad_sup: stacked(|c| c.grad_sup),
            stacked_hess_sup: stacked(|c| c.hess_sup),
            stacked_boundary_grad_sup: stacked(|c| c.boundary_grad_sup),
            lambda_plus: lambda_plus.max(0.0),
            components,
            norms,
        }
    }

    pub fn m(&self) -> usize {
        self.components.len()
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }

    /// `|Dφ|₀`.
    pub fn phi_grad_sup(&self) -> f64 {
        self.norms[self.m() - 1].grad_sup
    }

    pub fn evaluate(&self, x: &[f64], out: &mut [f64]) {
        for (o, c) in out.iter_mut().zip(&self.components) {
            *o = c.value(x);
        }
    }

    /// The data sampled at every inside node and cut point.
    pub fn sample(&self, grid: Arc<Grid>) -> VectorField {
        VectorField::from_fn(grid, self.m(), |x, out| self.evaluate(x, out))
    }

    /// `t · ψ` with norms scaled exactly.
    pub fn scaled(&self, t: f64) -> Self {
        let components = self
            .components
            .iter()
            .map(|c| Arc::new(Scaled { inner: c.clone(), factor: t }) as SharedField)
            .collect();
        let s = t.abs();
        let norms = self
            .norms
            .iter()
            .map(|c| ComponentNorms {
                grad_sup: s * c.grad_sup,
                hess_sup: s * c.hess_sup,
                boundary_grad_sup: s * c.boundary_grad_sup,
            })
            .collect();
        // λ₊ of tφ is not a multiple of λ₊(φ) for t < 0; t ∈ [0, 1] in practice
        Self {
            components,
            norms,
            stacked_grad_sup: s * self.stacked_grad_sup,
            stacked_hess_sup: s * self.stacked_hess_sup,
            stacked_boundary_grad_sup: s * self.stacked_boundary_grad_sup,
            lambda_plus: if t >= 0.0 { t * self.lambda_plus } else { f64::NAN },
        }
    }
}

/// The constants ν, κ, d₀, Ψ.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Constants {
    pub nu: f64,
    pub kappa: f64,
    pub d0: f64,
    pub psi: f64,
    /// `1/max{…}` before clamping by the regularity band.
    pub d0_formula: f64,
    pub d0_clamped: bool,
}

pub fn kappa_nu_d0(bd: &BoundaryData, geo: &GeometrySummary) -> Constants {
    let n = geo.dim as f64;
    let p = bd.phi_grad_sup();
    let nu = 16.0 * n * (bd.lambda_plus + 1.0);
    let kappa = (nu * p * geo.diameter).exp();
    let a = (64.0 * (1.0 + p).powi(2) * kappa * kappa + 8.0 * n) * geo.lambda_minus;
    let b = 2.0 * n * nu * (1.0 + p);
    let d0_formula = 1.0 / a.max(b);
    let d0 = d0_formula.min(geo.d0_regularity);
    let psi = 2.0 * kappa * kappa / (d0 * d0 * nu * nu);
    Constants { nu, kappa, d0, psi, d0_formula, d0_clamped: d0 < d0_formula }
}

/// Rejects bands thinner than four grid spacings.
pub fn check_band_resolution(c: &Constants, h: f64) -> Result<(), CriteriaError> {
    if c.d0 < 4.0 * h {
        Err(CriteriaError::DegenerateBand { d0: c.d0, h })
    } else {
        Ok(())
    }
}

/// Outcome of one inequality, with its slack.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub name: String,
    pub lhs: f64,
    pub rhs: f64,
    /// `rhs − lhs`.
    pub margin: f64,
    pub pass: bool,
    pub notes: Vec<String>,
}

impl Verdict {
    fn new(name: &str, lhs: f64, rhs: f64, pass: bool) -> Self {
        Self { name: name.into(), lhs, rhs, margin: rhs - lhs, pass, notes: Vec::new() }
    }
}

pub fn check_wang(bd: &BoundaryData, geo: &GeometrySummary) -> Result<Verdict, CriteriaError> {
    if !geo.convex {
        return Err(CriteriaError::NotApplicable("domain is not convex".into()));
    }
    let n = geo.dim as f64;
    let lhs = 8.0 * n * geo.diameter * bd.stacked_hess_sup + SQRT_2 * bd.stacked_boundary_grad_sup;
    Ok(Verdict::new("wang", lhs, 1.0, lhs < 1.0))
}

pub fn check_convex_condition(bd: &BoundaryData, geo: &GeometrySummary, beta0: f64) -> Result<Verdict, CriteriaError> {
    if !(beta0 > 1.0 && beta0 <= 9.0) {
        return Err(CriteriaError::BadBeta(beta0));
    }
    if !geo.convex {
        return Err(CriteriaError::NotApplicable("domain is not convex".into()));
    }
    let n = geo.dim as f64;
    let lhs: f64 = bd
        .norms
        .iter()
        .map(|c| E * n * geo.diameter * beta0 * c.hess_sup + c.grad_sup)
        .sum();
    let rhs = (beta0 - 1.0).sqrt();
    Ok(Verdict::new("convex", lhs, rhs, lhs < rhs))
}

/// ε₁, ε₂ before and after the safety factor.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmallnessConstants {
    pub eps1_raw: f64,
    pub eps2_raw: f64,
    pub eps1: f64,
    pub eps2: f64,
    pub safety: f64,
}

fn eps1_formula(c: &Constants, geo: &GeometrySummary) -> f64 {
    let nl = geo.dim as f64 * geo.diameter;
    let expo = match geo.exterior_radius {
        Some(r) => 1.0 + nl / (r * c.psi),
        None => 1.0,
    };
    (c.psi / nl * expo.exp()).min(1.0)
}

const EPS1_NOTE: &str = "eps1 also depends on a non-constructive curvature-estimate constant; the safety factor stands in for it";
const EXP_NOTE: &str = "the exponential factor in eps1 grows with Psi; taken as written";

fn check_preconditions(geo: &GeometrySummary, safety: f64) -> Result<(), CriteriaError> {
    if !(safety > 0.0 && safety <= 1.0) {
        return Err(CriteriaError::BadSafety(safety));
    }
    if !geo.mean_convex {
        return Err(CriteriaError::NotApplicable("domain is not mean convex".into()));
    }
    Ok(())
}

pub fn check_main_condition(
    bd: &BoundaryData,
    geo: &GeometrySummary,
    safety: f64,
) -> Result<(Verdict, SmallnessConstants), CriteriaError> {
    check_preconditions(geo, safety)?;
    let m = bd.m();
    if m == 1 {
        return Err(CriteriaError::NotApplicable(
            "codimension one: mean convexity alone decides solvability".into(),
        ));
    }
    let c = kappa_nu_d0(bd, geo);
    let eps2_raw = (c.d0 * c.nu / (5.0 * c.kappa)).powi(2) / (m - 1) as f64;
    let eps1_raw = eps1_formula(&c, geo);
    let (eps1, eps2) = (safety * eps1_raw, safety * eps2_raw);
    let lhs: f64 = bd.norms[..m - 1]
        .iter()
        .map(|n| (n.hess_sup / eps1 + n.grad_sup).powi(2))
        .sum();
    let mut v = Verdict::new("main", lhs, eps2, lhs <= eps2);
    v.notes.push(EPS1_NOTE.into());
    v.notes.push(EXP_NOTE.into());
    Ok((v, SmallnessConstants { eps1_raw, eps2_raw, eps1, eps2, safety }))
}

pub fn check_continuation_condition(
    bd: &BoundaryData,
    geo: &GeometrySummary,
    safety: f64,
) -> Result<(Verdict, SmallnessConstants), CriteriaError> {
    if bd.m() != 2 {
        return Err(CriteriaError::NotApplicable("continuation needs codimension two".into()));
    }
    check_preconditions(geo, safety)?;
    let c = kappa_nu_d0(bd, geo);
    let d2_raw = c.d0 * c.nu / (5.0 * c.kappa);
    let d1_raw = eps1_formula(&c, geo);
    let (d1, d2) = (safety * d1_raw, safety * d2_raw);
    let psi = &bd.norms[0];
    let lhs = psi.hess_sup / d1 + psi.grad_sup;
    let mut v = Verdict::new("continuation", lhs, d2, lhs <= d2);
    v.notes.push(EPS1_NOTE.into());
    Ok((v, SmallnessConstants { eps1_raw: d1_raw, eps2_raw: d2_raw, eps1: d1, eps2: d2, safety }))
}

/// Every constant and verdict for one configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub constants: Constants,
    pub band_resolved: bool,
    pub mean_convex: bool,
    pub wang: Option<Verdict>,
    pub convex: Option<Verdict>,
    pub main: Option<Verdict>,
    pub main_constants: Option<SmallnessConstants>,
    pub continuation: Option<Verdict>,
    pub continuation_constants: Option<SmallnessConstants>,
    pub notes: Vec<String>,
}

pub fn condition_report(bd: &BoundaryData, geo: &GeometrySummary, beta0: f64, safety: f64) -> ConditionReport {
    let constants = kappa_nu_d0(bd, geo);
    let mut notes = Vec::new();
    let mut keep = |r: Result<Verdict, CriteriaError>| match r {
        Ok(v) => Some(v),
        Err(e) => {
            notes.push(e.to_string());
            None
        }
    };
    let wang = keep(check_wang(bd, geo));
    let convex = keep(check_convex_condition(bd, geo, beta0));
    let (main, main_constants) = match check_main_condition(bd, geo, safety) {
        Ok((v, c)) => (Some(v), Some(c)),
        Err(e) => {
            notes.push(e.to_string());
            (None, None)
        }
    };
    let (continuation, continuation_constants) = match check_continuation_condition(bd, geo, safety) {
        Ok((v, c)) => (Some(v), Some(c)),
        Err(e) => {
            notes.push(e.to_string());
            (None, None)
        }
    };
    let band_resolved = check_band_resolution(&constants, geo.h).is_ok();
    if !band_resolved {
        notes.push(format!("d0 = {} is not resolved by h = {}", constants.d0, geo.h));
    }
    if constants.d0_clamped {
        notes.push("d0 clamped by the regularity band of the distance function".into());
    }
    ConditionReport {
        constants,
        band_resolved,
        mean_convex: geo.mean_convex,
        wang,
        convex,
        main,
        main_constants,
        continuation,
        continuation_constants,
        notes,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analytic::{Affine, ExprField};
    use crate::domain::{build_grid, distance_field, geometry_summary};

    fn disk_geo(lambda_minus: f64) -> GeometrySummary {
        GeometrySummary {
            dim: 2,
            diameter: 2.0,
            exterior_radius: None,
            lambda_minus,
            band_width: 0.1,
            d0_regularity: 1.0,
            mean_convex: true,
            convex: true,
            min_mean_curvature: 1.0,
            min_principal_curvature: 1.0,
            max_band_eikonal_error: 0.0,
            max_band_laplacian: -1.0,
            boundary_samples: 100,
            coarse_sampling: false,
            h: 0.05,
        }
    }

    fn affine_data(slopes: &[f64]) -> BoundaryData {
        let comps: Vec<SharedField> =
            slopes.iter().map(|s| Arc::new(Affine::new(vec![*s, 0.0], 0.0)) as SharedField).collect();
        let norms = slopes
            .iter()
            .map(|s| ComponentNorms { grad_sup: s.abs(), hess_sup: 0.0, boundary_grad_sup: s.abs() })
            .collect();
        BoundaryData::with_norms(comps, norms, 0.0)
    }

    #[test]
    fn unit_disk_constants() {
        let c = kappa_nu_d0(&affine_data(&[0.0, 0.0]), &disk_geo(1.1111));
        assert_eq!(c.nu, 32.0);
        assert_eq!(c.kappa, 1.0);
        assert_eq!(c.d0, 1.0 / 128.0);
        assert_eq!(c.psi, 32.0);
        assert!(check_band_resolution(&c, 0.05).is_err());
    }

    #[test]
    fn wang_examples() {
        let geo = disk_geo(1.1111);
        assert!(check_wang(&affine_data(&[0.0]), &geo).unwrap().pass);
        let v = check_wang(&affine_data(&[0.5]), &geo).unwrap();
        assert!(v.pass && (v.lhs - 0.5 * SQRT_2).abs() < 1e-15);
        assert!(!check_wang(&affine_data(&[1.0]), &geo).unwrap().pass);
    }

    #[test]
    fn convex_condition_examples() {
        let geo = disk_geo(1.1111);
        assert!(check_convex_condition(&affine_data(&[1.0, 1.0]), &geo, 9.0).unwrap().pass);
        assert!(!check_convex_condition(&affine_data(&[1.5, 1.5]), &geo, 9.0).unwrap().pass);
        assert_eq!(check_convex_condition(&affine_data(&[0.0]), &geo, 1.0), Err(CriteriaError::BadBeta(1.0)));
    }

    #[test]
    fn main_and_continuation_examples() {
        let geo = disk_geo(1.1111);
        let (v, eps) = check_main_condition(&affine_data(&[0.0, 0.0]), &geo, 1.0).unwrap();
        assert!(v.pass);
        assert!((eps.eps2 - 0.0025).abs() < 1e-15);
        let (v, _) = check_main_condition(&affine_data(&[0.06, 0.0]), &geo, 1.0).unwrap();
        assert!(!v.pass && (v.lhs - 0.0036).abs() < 1e-15);
        assert!(check_main_condition(&affine_data(&[0.0]), &geo, 1.0).is_err());
        let (v, c) = check_continuation_condition(&affine_data(&[0.04, 0.0]), &geo, 1.0).unwrap();
        assert!(v.pass && (c.eps2 - 0.05).abs() < 1e-15);
        assert!(!check_continuation_condition(&affine_data(&[0.06, 0.0]), &geo, 1.0).unwrap().0.pass);
        assert!(check_continuation_condition(&affine_data(&[0.0, 0.0]), &geo, 1.0).unwrap().0.pass);
    }

    #[test]
    fn measured_norms_bound_refined_samples() {
        let spec = DomainSpec::ball(2, 1.0).unwrap();
        let comps: Vec<SharedField> = vec![
            Arc::new(ExprField::parse("0.1*sin(2*x)*y", 2).unwrap()),
            Arc::new(ExprField::parse("0.3*x^2 - 0.2*x*y + exp(y)/10", 2).unwrap()),
        ];
        let coarse = build_grid(&spec, 0.1).unwrap();
        let dist = distance_field(&spec, &coarse);
        let bd = BoundaryData::measure(comps.clone(), &spec, &coarse, Some(&dist), 0.1);
        let fine = build_grid(&spec, 0.05).unwrap();
        let fine_bd = BoundaryData::measure(comps, &spec, &fine, None, 0.1);
        for (a, b) in bd.norms.iter().zip(&fine_bd.norms) {
            assert!(b.grad_sup <= a.grad_sup + 1e-6);
            assert!(b.hess_sup <= a.hess_sup + 1e-6);
        }
        assert!(fine_bd.stacked_grad_sup <= bd.stacked_grad_sup + 1e-6);
        let geo = geometry_summary(&spec, &coarse, &dist, 0.1);
        let c = kappa_nu_d0(&bd, &geo);
        assert!((c.nu - 32.0 * (bd.lambda_plus + 1.0)).abs() < 1e-12);
        assert!(c.kappa >= 1.0 && c.psi > 0.0);
    }

    #[test]
    fn affine_norms_are_exact() {
        let spec = DomainSpec::ball(3, 1.0).unwrap();
        let grid = build_grid(&spec, 0.1).unwrap();
        let comps: Vec<SharedField> = vec![Arc::new(Affine::new(vec![0.3, 0.4, 0.0], 1.0))];
        let bd = BoundaryData::measure(comps, &spec, &grid, None, 0.1);
        assert!((bd.norms[0].grad_sup - 0.5).abs() < 1e-15);
        assert_eq!(bd.norms[0].hess_sup, 0.0);
        assert_eq!(bd.lambda_plus, 0.0);
        let c = kappa_nu_d0(&bd, &disk_geo(0.0));
        assert_eq!(c.nu, 32.0);
    }
}
