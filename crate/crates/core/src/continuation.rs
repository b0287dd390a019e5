//! Elliptic route: damped Newton on the discrete system, continuation in the
//! data scale, the second variation of area and its first eigenvalue.

use std::sync::Arc;

use faer::linalg::solvers::Solve;
use faer::sparse::{SparseColMat, Triplet};
use faer::Side;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::criteria::BoundaryData;
use crate::domain::Grid;
use crate::jetcalc::{jet, metric_state, residual, sup_abs, VectorField};
use crate::linalg::{sym_eigen, Mat, MAX_DIM, ZERO};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ContinuationError {
    #[error("Newton did not converge after {iters} iterations (sup residual {residual:e})")]
    NoConvergence { iters: usize, residual: f64 },
    #[error("sparse factorization failed: {0}")]
    LinearSolve(String),
    #[error("continuation stuck: last accepted t = {last_t}")]
    PathStuck { last_t: f64, path: Vec<PathPoint> },
    #[error("variation is nonzero on the boundary band")]
    UnsupportedVariation,
    #[error("max |wedge^2 du| = {wedge} exceeds the bound {bound}")]
    PreconditionFailed { wedge: f64, bound: f64 },
    #[error("{0}")]
    BadInput(String),
}

// ---------------------------------------------------------------- sparse

/// Row-compressed matrix, duplicates merged, columns sorted.
#[derive(Clone, Debug, Default)]
pub struct Csr {
    pub nrows: usize,
    offsets: Vec<usize>,
    cols: Vec<u32>,
    vals: Vec<f64>,
}

impl Csr {
    pub fn from_rows(rows: Vec<Vec<(u32, f64)>>) -> Self {
        let mut out = Csr { nrows: rows.len(), offsets: vec![0], ..Default::default() };
        for mut r in rows {
            r.sort_by_key(|e| e.0);
            let mut k = 0;
            while k < r.len() {
                let c = r[k].0;
                let mut acc = 0.0;
                while k < r.len() && r[k].0 == c {
                    acc += r[k].1;
                    k += 1;
                }
                out.cols.push(c);
                out.vals.push(acc);
            }
            out.offsets.push(out.cols.len());
        }
        out
    }

    /// Gathers triplets into rows.
    pub fn from_triplets(nrows: usize, t: &[(u32, u32, f64)]) -> Self {
        let mut rows = vec![Vec::new(); nrows];
        for &(r, c, v) in t {
            rows[r as usize].push((c, v));
        }
        Self::from_rows(rows)
    }

    pub fn row(&self, r: usize) -> (&[u32], &[f64]) {
        let (a, b) = (self.offsets[r], self.offsets[r + 1]);
        (&self.cols[a..b], &self.vals[a..b])
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let (cols, vals) = self.row(r);
        cols.binary_search(&(c as u32)).map(|k| vals[k]).unwrap_or(0.0)
    }

    pub fn nnz(&self) -> usize {
        self.cols.len()
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.nrows)
            .map(|r| {
                let (c, v) = self.row(r);
                c.iter().zip(v).map(|(c, v)| v * x[*c as usize]).sum()
            })
            .collect()
    }

    /// `xᵀ A x`.
    pub fn quad(&self, x: &[f64]) -> f64 {
        self.matvec(x).iter().zip(x).map(|(a, b)| a * b).sum()
    }

    /// Largest `|a_rc − a_cr|`.
    pub fn max_asymmetry(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for r in 0..self.nrows {
            let (c, v) = self.row(r);
            for (c, v) in c.iter().zip(v) {
                worst = worst.max((v - self.get(*c as usize, r)).abs());
            }
        }
        worst
    }

    fn with_diagonal_shift(&self, d: &[f64], s: f64) -> Self {
        let rows = (0..self.nrows)
            .map(|r| {
                let (c, v) = self.row(r);
                let mut row: Vec<(u32, f64)> = c.iter().copied().zip(v.iter().copied()).collect();
                row.push((r as u32, s * d[r]));
                row
            })
            .collect();
        Self::from_rows(rows)
    }

    fn to_faer(&self) -> Result<SparseColMat<usize, f64>, ContinuationError> {
        let mut t = Vec::with_capacity(self.nnz());
        for r in 0..self.nrows {
            let (c, v) = self.row(r);
            t.extend(c.iter().zip(v).map(|(c, v)| Triplet::new(r, *c as usize, *v)));
        }
        SparseColMat::try_new_from_triplets(self.nrows, self.nrows, &t)
            .map_err(|e| ContinuationError::LinearSolve(format!("{e:?}")))
    }
}

fn to_col(x: &[f64]) -> faer::Mat<f64> {
    faer::Mat::from_fn(x.len(), 1, |i, _| x[i])
}

fn from_col(x: &faer::Mat<f64>) -> Vec<f64> {
    (0..x.nrows()).map(|i| x[(i, 0)]).collect()
}

pub fn lu_solve(a: &Csr, rhs: &[f64]) -> Result<Vec<f64>, ContinuationError> {
    let lu = a.to_faer()?.sp_lu().map_err(|e| ContinuationError::LinearSolve(format!("{e:?}")))?;
    let x = from_col(&lu.solve(&to_col(rhs)));
    if x.iter().all(|v| v.is_finite()) {
        Ok(x)
    } else {
        Err(ContinuationError::LinearSolve("singular Jacobian".into()))
    }
}

// ---------------------------------------------------------------- Newton

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NewtonOptions {
    /// Target sup residual.
    pub tol: f64,
    pub max_iters: usize,
    /// Central-difference Jacobian instead of the analytic one (slow).
    pub fd_jacobian: bool,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self { tol: 1e-10, max_iters: 50, fd_jacobian: false }
    }
}

#[derive(Clone, Debug)]
pub struct NewtonResult {
    pub u: VectorField,
    pub iterations: usize,
    pub residual: f64,
    /// Sup residual before each iteration and at the end.
    pub history: Vec<f64>,
}

/// Overwrites the values at cut points with the data.
pub fn impose_boundary(u: &mut VectorField, bd: &BoundaryData) {
    let grid = u.grid.clone();
    let m = u.m;
    let mut buf = vec![0.0; m];
    for s in grid.num_inside()..grid.num_sources() {
        let x = grid.source_position(s);
        bd.evaluate(&x[..grid.dim], &mut buf);
        u.values[s * m..(s + 1) * m].copy_from_slice(&buf);
    }
}

/// Linearization of `gⁱʲ(Du) ∂_ij u^α` over the inside values.
///
/// With `S^β = g⁻¹ Du^β` and `H^α` the Hessian of `u^α`, the derivative of
/// `gⁱʲ` contributes the first-order term `−2 (g⁻¹ H^α S^β)_r ∂_r` to the
/// `(α, β)` block.
pub fn jacobian(u: &VectorField) -> Csr {
    let grid = u.grid.clone();
    let n = grid.dim;
    let m = u.m;
    let count = grid.num_inside();
    let st = grid.stencils();
    let rows: Vec<Vec<Vec<(u32, f64)>>> = (0..count)
        .into_par_iter()
        .map(|i| {
            let jt = jet(u, i);
            let gi = metric_state(&jt).g_inv;
            let mut s = [[0.0; MAX_DIM]; MAX_DIM];
            for b in 0..m {
                for p in 0..n {
                    s[b][p] = (0..n).map(|q| gi[p][q] * jt.df[b][q]).sum();
                }
            }
            let mut buf = Vec::with_capacity(64);
            let mut out = vec![Vec::new(); m];
            for (a, row) in out.iter_mut().enumerate() {
                buf.clear();
                st.operator_row(i, &gi, None, n, &mut buf);
                row.extend(buf.iter().filter(|e| (e.0 as usize) < count).map(|e| (e.0 * m as u32 + a as u32, e.1)));
                // g⁻¹ H^α
                let h = &jt.d2f[a];
                let mut gh = ZERO;
                for r in 0..n {
                    for q in 0..n {
                        gh[r][q] = (0..n).map(|p| gi[r][p] * h[p][q]).sum();
                    }
                }
                for b in 0..m {
                    let mut coef = [0.0; MAX_DIM];
                    for r in 0..n {
                        coef[r] = -2.0 * (0..n).map(|q| gh[r][q] * s[b][q]).sum::<f64>();
                    }
                    buf.clear();
                    st.operator_row(i, &ZERO, Some(&coef), n, &mut buf);
                    row.extend(
                        buf.iter().filter(|e| (e.0 as usize) < count).map(|e| (e.0 * m as u32 + b as u32, e.1)),
                    );
                }
            }
            out
        })
        .collect();
    Csr::from_rows(rows.into_iter().flatten().collect())
}

/// Central-difference Jacobian, one residual pair per column.
pub fn fd_jacobian(u: &VectorField) -> Csr {
    let k = u.grid.num_inside() * u.m;
    let mut rows = vec![Vec::new(); k];
    let mut w = u.clone();
    for c in 0..k {
        let x = u.values[c];
        let eps = 1e-6 * x.abs().max(1.0);
        w.values[c] = x + eps;
        let rp = residual(&w);
        w.values[c] = x - eps;
        let rm = residual(&w);
        w.values[c] = x;
        for r in 0..k {
            let d = (rp[r] - rm[r]) / (2.0 * eps);
            if d != 0.0 {
                rows[r].push((c as u32, d));
            }
        }
    }
    Csr::from_rows(rows)
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Damped Newton from `initial` with cut values taken from `bd`.
pub fn newton_solve(
    initial: &VectorField,
    bd: &BoundaryData,
    opts: &NewtonOptions,
) -> Result<NewtonResult, ContinuationError> {
    if bd.m() != initial.m {
        return Err(ContinuationError::BadInput("codimension of data and field differ".into()));
    }
    let mut u = initial.clone();
    impose_boundary(&mut u, bd);
    let k = u.grid.num_inside() * u.m;
    let mut r = residual(&u);
    let mut history = vec![sup_abs(&r)];
    for it in 0..=opts.max_iters {
        let sup = *history.last().unwrap();
        if sup <= opts.tol {
            return Ok(NewtonResult { u, iterations: it, residual: sup, history });
        }
        if it == opts.max_iters || !sup.is_finite() {
            break;
        }
        let jac = if opts.fd_jacobian { fd_jacobian(&u) } else { jacobian(&u) };
        let rhs: Vec<f64> = r.iter().map(|v| -v).collect();
        let delta = lu_solve(&jac, &rhs)?;
        let norm0 = l2(&r);
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let mut trial = u.clone();
            for (v, d) in trial.values[..k].iter_mut().zip(&delta) {
                *v += step * d;
            }
            let rt = residual(&trial);
            if l2(&rt) < norm0 {
                accepted = Some((trial, rt));
                break;
            }
            step *= 0.5;
        }
        let Some((next, rn)) = accepted else { break };
        u = next;
        r = rn;
        history.push(sup_abs(&r));
    }
    Err(ContinuationError::NoConvergence { iters: history.len() - 1, residual: *history.last().unwrap() })
}

// ---------------------------------------------------------------- monitors

/// `(sup det g, min Θ, max μ₁μ₂)` over inside nodes.
pub fn field_monitors(u: &VectorField) -> (f64, f64, f64) {
    let mut out = (0.0f64, f64::INFINITY, 0.0f64);
    for i in 0..u.grid.num_inside() {
        let ms = metric_state(&jet(u, i));
        out.0 = out.0.max(ms.v2);
        out.1 = out.1.min(ms.theta);
        out.2 = out.2.max(ms.wedge2);
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathPoint {
    pub t: f64,
    pub sup_v2: f64,
    pub min_theta: f64,
    pub max_wedge2: f64,
    pub sup_residual: f64,
    pub newton_iters: usize,
    pub lambda_star: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContinuationOptions {
    pub steps: usize,
    /// Ψ for the monitors `min Θ > 1/Ψ`, `sup det g < Ψ`; unchecked if absent.
    pub psi: Option<f64>,
    pub t_min_step: f64,
    pub newton: NewtonOptions,
    /// λ* at every accepted t rather than only at the end.
    pub track_lambda_star: bool,
}

impl Default for ContinuationOptions {
    fn default() -> Self {
        Self { steps: 10, psi: None, t_min_step: 1.0 / 1024.0, newton: NewtonOptions::default(), track_lambda_star: false }
    }
}

#[derive(Clone, Debug)]
pub struct ContinuationState {
    pub t: f64,
    pub u: VectorField,
    pub lambda_star: Option<LambdaStar>,
    pub path: Vec<PathPoint>,
}

/// Follows `t ↦ t·data` from the zero solution to `t = 1`.
pub fn continuation_run(
    bd: &BoundaryData,
    grid: Arc<Grid>,
    opts: &ContinuationOptions,
) -> Result<ContinuationState, ContinuationError> {
    if bd.m() != 2 {
        return Err(ContinuationError::BadInput("continuation runs in codimension two".into()));
    }
    if opts.steps == 0 {
        return Err(ContinuationError::BadInput("steps must be positive".into()));
    }
    let in_j = |p: &PathPoint| match opts.psi {
        Some(psi) => p.min_theta > 1.0 / psi && p.sup_v2 < psi,
        None => true,
    };
    let point = |t: f64, u: &VectorField, iters: usize, res: f64| {
        let (sup_v2, min_theta, max_wedge2) = field_monitors(u);
        let lambda_star =
            if opts.track_lambda_star { estimate_lambda_star(u).ok().map(|l| l.value) } else { None };
        PathPoint { t, sup_v2, min_theta, max_wedge2, sup_residual: res, newton_iters: iters, lambda_star }
    };
    let mut u = VectorField::zeros(grid, 2);
    let first = point(0.0, &u, 0, 0.0);
    let mut path = vec![first];
    // t counted in integer ticks so that t = k/steps lands exactly
    const SUB: u64 = 1 << 20;
    let total = opts.steps as u64 * SUB;
    let tick = |k: u64| k as f64 / total as f64;
    let mut dt = SUB;
    let mut k = 0u64;
    while k < total {
        let target = (k + dt).min(total);
        let attempt = newton_solve(&u, &bd.scaled(tick(target)), &opts.newton);
        let ok = match attempt {
            Ok(res) => {
                let p = point(tick(target), &res.u, res.iterations, res.residual);
                if in_j(&p) {
                    u = res.u;
                    path.push(p);
                    k = target;
                    dt = (2 * dt).min(SUB);
                    true
                } else {
                    false
                }
            }
            Err(_) => false,
        };
        if !ok {
            dt /= 2;
            if dt == 0 || tick(dt) < opts.t_min_step {
                return Err(ContinuationError::PathStuck { last_t: tick(k), path });
            }
        }
    }
    let t = tick(k);
    let lambda_star = estimate_lambda_star(&u).ok();
    Ok(ContinuationState { t, u, lambda_star, path })
}

// ---------------------------------------------------------------- second variation

/// `m` values per inside node; zero away from interior nodes.
#[derive(Clone, Debug)]
pub struct VariationField {
    pub grid: Arc<Grid>,
    pub m: usize,
    pub values: Vec<f64>,
}

impl VariationField {
    pub fn zeros(grid: Arc<Grid>, m: usize) -> Self {
        let len = grid.num_inside() * m;
        Self { grid, m, values: vec![0.0; len] }
    }

    /// Samples `f` at interior nodes, zero on the boundary band.
    pub fn from_fn(grid: Arc<Grid>, m: usize, mut f: impl FnMut(&[f64], &mut [f64])) -> Self {
        let mut out = Self::zeros(grid.clone(), m);
        for i in 0..grid.num_inside() {
            if grid.is_interior(i) {
                let x = grid.position(i);
                f(&x[..grid.dim], &mut out.values[i * m..(i + 1) * m]);
            }
        }
        out
    }

    pub fn supported_inside(&self) -> bool {
        (0..self.grid.num_inside())
            .filter(|&i| !self.grid.is_interior(i))
            .all(|i| self.values[i * self.m..(i + 1) * self.m].iter().all(|v| *v == 0.0))
    }

    /// As a field over all sources, zero at cut points.
    pub fn to_field(&self) -> VectorField {
        let mut f = VectorField::zeros(self.grid.clone(), self.m);
        f.values[..self.values.len()].copy_from_slice(&self.values);
        f
    }

    pub fn sup_norm(&self) -> f64 {
        sup_abs(&self.values)
    }
}

/// Singular values of `Du` (stored `df[α][i]`) with orthonormal frames:
/// `Du = U Σ Vᵀ`, `v[i][k]` and `u[α][k]`.
pub fn singular_frames(df: &Mat, n: usize, m: usize) -> (Mat, Mat, [f64; MAX_DIM]) {
    let mut ata = ZERO;
    for i in 0..n {
        for j in 0..n {
            ata[i][j] = (0..m).map(|a| df[a][i] * df[a][j]).sum();
        }
    }
    let e = sym_eigen(&ata, n);
    let v = e.vectors;
    let r = n.min(m);
    let mut lam = [0.0; MAX_DIM];
    let mut u = ZERO;
    let mut filled = 0;
    let floor = 1e-12 * (1.0 + e.values[0].max(0.0).sqrt());
    for k in 0..r {
        let l = e.values[k].max(0.0).sqrt();
        if l <= floor {
            break;
        }
        lam[k] = l;
        for a in 0..m {
            u[a][k] = (0..n).map(|i| df[a][i] * v[i][k]).sum::<f64>() / l;
        }
        filled = k + 1;
    }
    // complete U by Gram-Schmidt on the coordinate axes
    let mut axis = 0;
    while filled < m && axis < m {
        let mut c = [0.0; MAX_DIM];
        c[axis] = 1.0;
        for k in 0..filled {
            let d: f64 = (0..m).map(|a| c[a] * u[a][k]).sum();
            for a in 0..m {
                c[a] -= d * u[a][k];
            }
        }
        let nrm = (0..m).map(|a| c[a] * c[a]).sum::<f64>().sqrt();
        if nrm > 1e-6 {
            for a in 0..m {
                u[a][filled] = c[a] / nrm;
            }
            filled += 1;
        }
        axis += 1;
    }
    (u, v, lam)
}

/// Integrand of the second variation (without `√det g`) evaluated in the
/// singular frames of `Du`, with `φ^a_k` the rotated `Dφ`.
pub fn integrand_in_frame(df: &Mat, dphi: &Mat, n: usize, m: usize) -> f64 {
    let (u, v, lam) = singular_frames(df, n, m);
    let mut p = ZERO;
    for a in 0..m {
        for k in 0..n {
            let mut s = 0.0;
            for b in 0..m {
                for i in 0..n {
                    s += u[b][a] * dphi[b][i] * v[i][k];
                }
            }
            p[a][k] = s;
        }
    }
    let w = |k: usize| 1.0 / (1.0 + lam[k] * lam[k]);
    let mut q = 0.0;
    for a in 0..m {
        for k in 0..n {
            q += p[a][k] * p[a][k] * w(k);
        }
    }
    let r = n.min(m);
    for i in 0..r {
        for j in 0..r {
            let c = lam[i] * lam[j] * w(i) * w(j);
            if c != 0.0 {
                // φ_i^j: target index j, domain index i
                q += c * (-2.0 * p[j][i] * p[i][j] + p[i][i] * p[j][j]);
            }
        }
    }
    q
}

/// Which pointwise form is assembled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FormKind {
    /// The stability form of the minimal graph.
    SecondVariation,
    /// Exact second derivative of `√det g` along `u + sφ`.
    AreaHessian,
    /// `Σ_α |Dφ^α|²`.
    Dirichlet,
}

/// Symmetric `nm × nm` matrix of the pointwise form, index `α·n + a`.
pub fn form_matrix(kind: FormKind, df: &Mat, n: usize, m: usize) -> Vec<f64> {
    let d = n * m;
    let mut k = vec![0.0; d * d];
    if kind == FormKind::Dirichlet {
        for x in 0..d {
            k[x * d + x] = 1.0;
        }
        return k;
    }
    let gi = metric_state(&crate::jetcalc::Jet { n, m, df: *df, d2f: [ZERO; MAX_DIM] }).g_inv;
    // S^α = g⁻¹ Du^α
    let mut s = ZERO;
    for a in 0..m {
        for p in 0..n {
            s[a][p] = (0..n).map(|q| gi[p][q] * df[a][q]).sum();
        }
    }
    for a in 0..m {
        for p in 0..n {
            for b in 0..m {
                for q in 0..n {
                    let mut v = s[a][p] * s[b][q];
                    if a == b {
                        v += gi[p][q];
                    }
                    match kind {
                        FormKind::SecondVariation => v -= 2.0 * s[a][q] * s[b][p],
                        _ => {
                            let uu: f64 = (0..n).map(|i| df[a][i] * s[b][i]).sum();
                            v -= s[a][q] * s[b][p] + uu * gi[p][q];
                        }
                    }
                    k[(a * n + p) * d + b * n + q] = v;
                }
            }
        }
    }
    for x in 0..d {
        for y in x + 1..d {
            let avg = 0.5 * (k[x * d + y] + k[y * d + x]);
            k[x * d + y] = avg;
            k[y * d + x] = avg;
        }
    }
    k
}

/// A pointwise form integrated over the grid. At each inside node the
/// gradient of φ is taken by one-sided differences, averaged over the `2ⁿ`
/// sign patterns, which keeps the standard compact Dirichlet energy free of
/// checkerboard null modes; the node weight is `√det g · hⁿ`.
#[derive(Clone, Debug)]
pub struct QuadraticForm {
    pub grid: Arc<Grid>,
    pub m: usize,
    pub kind: FormKind,
    /// `√det g · hⁿ` per inside node.
    pub weights: Vec<f64>,
    forms: Vec<Vec<f64>>,
}

impl QuadraticForm {
    pub fn new(kind: FormKind, u: &VectorField) -> Self {
        let grid = u.grid.clone();
        let (n, m) = (grid.dim, u.m);
        let hn = grid.h.powi(n as i32);
        let per_node: Vec<(f64, Vec<f64>)> = (0..grid.num_inside())
            .into_par_iter()
            .map(|i| {
                let jt = jet(u, i);
                let w = metric_state(&jt).v2.max(0.0).sqrt() * hn;
                (w, form_matrix(kind, &jt.df, n, m))
            })
            .collect();
        let (weights, forms) = per_node.into_iter().unzip();
        Self { grid, m, kind, weights, forms }
    }

    fn neighbours(&self, i: usize) -> [[Option<usize>; 2]; MAX_DIM] {
        let mut out = [[None; 2]; MAX_DIM];
        for (k, o) in out.iter_mut().enumerate().take(self.grid.dim) {
            for (d, dir) in [-1, 1].into_iter().enumerate() {
                let (s, _) = self.grid.neighbor(i, k, dir);
                o[d] = (!self.grid.is_cut_source(s)).then_some(s);
            }
        }
        out
    }

    /// `Q(φ)`.
    pub fn eval(&self, phi: &VariationField) -> Result<f64, ContinuationError> {
        if phi.m != self.m || phi.values.len() != self.weights.len() * self.m {
            return Err(ContinuationError::BadInput("variation does not match the field".into()));
        }
        if !phi.supported_inside() {
            return Err(ContinuationError::UnsupportedVariation);
        }
        let (n, m) = (self.grid.dim, self.m);
        let d = n * m;
        let h = self.grid.h;
        let val = |s: Option<usize>, a: usize| s.map_or(0.0, |s| phi.values[s * m + a]);
        let total: f64 = (0..self.weights.len())
            .into_par_iter()
            .map(|i| {
                let nb = self.neighbours(i);
                let k = &self.forms[i];
                let mut acc = 0.0;
                let mut g = vec![0.0; d];
                for sigma in 0..(1usize << n) {
                    for a in 0..m {
                        for p in 0..n {
                            let up = (sigma >> p) & 1;
                            let sgn = if up == 1 { 1.0 } else { -1.0 };
                            g[a * n + p] = sgn * (val(nb[p][up], a) - phi.values[i * m + a]) / h;
                        }
                    }
                    for x in 0..d {
                        for y in 0..d {
                            acc += g[x] * k[x * d + y] * g[y];
                        }
                    }
                }
                acc * self.weights[i] / (1 << n) as f64
            })
            .collect::<Vec<_>>()
            .iter()
            .sum();
        Ok(total)
    }

    /// Interior nodes carrying unknowns, in order.
    pub fn unknown_nodes(&self) -> Vec<usize> {
        (0..self.weights.len()).filter(|&i| self.grid.is_interior(i)).collect()
    }

    /// Matrix of the form over the unknowns `(node, α)` of
    /// [`Self::unknown_nodes`], and the lumped mass `√det g · hⁿ`.
    pub fn matrix(&self) -> (Csr, Vec<f64>) {
        let (n, m) = (self.grid.dim, self.m);
        let d = n * m;
        let h2 = self.grid.h * self.grid.h;
        let nodes = self.unknown_nodes();
        let mut index = vec![u32::MAX; self.weights.len()];
        for (k, &i) in nodes.iter().enumerate() {
            index[i] = k as u32;
        }
        let local: Vec<Vec<(u32, u32, f64)>> = (0..self.weights.len())
            .into_par_iter()
            .map(|i| {
                let nb = self.neighbours(i);
                let k = &self.forms[i];
                let scale = self.weights[i] / ((1 << n) as f64 * h2);
                let col = |s: Option<usize>| s.map(|s| index[s]).filter(|c| *c != u32::MAX);
                let me = col(Some(i));
                let mut out = Vec::new();
                for sigma in 0..(1usize << n) {
                    // entries (unknown, coefficient) of each gradient slot
                    let slot = |p: usize| {
                        let up = (sigma >> p) & 1;
                        let sgn = if up == 1 { 1.0 } else { -1.0 };
                        [(col(nb[p][up]), sgn), (me, -sgn)]
                    };
                    for a in 0..m {
                        for p in 0..n {
                            let x = a * n + p;
                            for b in 0..m {
                                for q in 0..n {
                                    let kv = k[x * d + b * n + q];
                                    if kv == 0.0 {
                                        continue;
                                    }
                                    for (r, sr) in slot(p) {
                                        let Some(r) = r else { continue };
                                        for (c, sc) in slot(q) {
                                            let Some(c) = c else { continue };
                                            out.push((
                                                r * m as u32 + a as u32,
                                                c * m as u32 + b as u32,
                                                scale * kv * sr * sc,
                                            ));
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                out
            })
            .collect();
        let mut rows = vec![Vec::new(); nodes.len() * m];
        for t in local.into_iter().flatten() {
            rows[t.0 as usize].push((t.1, t.2));
        }
        let mass = nodes.iter().flat_map(|&i| std::iter::repeat(self.weights[i]).take(m)).collect();
        (Csr::from_rows(rows), mass)
    }
}

/// `Q(φ)` for the stability form at `u`.
pub fn second_variation_form(u: &VectorField, phi: &VariationField) -> Result<f64, ContinuationError> {
    QuadraticForm::new(FormKind::SecondVariation, u).eval(phi)
}

/// Discrete area `Σ √det g · hⁿ` over inside nodes.
pub fn discrete_area(u: &VectorField) -> f64 {
    let hn = u.grid.h.powi(u.grid.dim as i32);
    (0..u.grid.num_inside()).map(|i| metric_state(&jet(u, i)).v2.sqrt() * hn).sum()
}

/// Derivative of [`discrete_area`] along φ.
pub fn first_variation(u: &VectorField, phi: &VariationField) -> f64 {
    let n = u.grid.dim;
    let hn = u.grid.h.powi(n as i32);
    let pf = phi.to_field();
    (0..u.grid.num_inside())
        .map(|i| {
            let ju = jet(u, i);
            let jp = jet(&pf, i);
            let ms = metric_state(&ju);
            let mut s = 0.0;
            for a in 0..u.m {
                for p in 0..n {
                    for q in 0..n {
                        s += ms.g_inv[p][q] * ju.df[a][p] * jp.df[a][q];
                    }
                }
            }
            s * ms.v2.sqrt() * hn
        })
        .sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaStar {
    pub value: f64,
    /// The form takes negative values.
    pub indefinite: bool,
    pub iterations: usize,
    /// Spectral shift that made the pencil definite.
    pub shift: f64,
    pub unknowns: usize,
}

/// Smallest eigenvalue of `Q x = λ M x` by shifted inverse iteration.
pub fn estimate_lambda_star(u: &VectorField) -> Result<LambdaStar, ContinuationError> {
    lowest_eigenvalue(&QuadraticForm::new(FormKind::SecondVariation, u))
}

pub fn lowest_eigenvalue(form: &QuadraticForm) -> Result<LambdaStar, ContinuationError> {
    let (q, mass) = form.matrix();
    let k = mass.len();
    if k == 0 {
        return Err(ContinuationError::BadInput("no interior nodes".into()));
    }
    // reference scale for shifts: the largest diagonal Rayleigh quotient
    let scale = (0..k).map(|r| q.get(r, r) / mass[r]).fold(0.0, f64::max).max(1e-300);
    let mut shift = 0.0;
    let mut llt = None;
    for attempt in 0..60 {
        let a = if shift == 0.0 { q.clone() } else { q.with_diagonal_shift(&mass, -shift) };
        if let Ok(f) = a.to_faer()?.sp_cholesky(Side::Lower) {
            llt = Some(f);
            break;
        }
        shift = -scale * 1e-6 * 4f64.powi(attempt);
    }
    let llt = llt.ok_or_else(|| ContinuationError::LinearSolve("no definite shift found".into()))?;
    let mut x = vec![1.0; k];
    let mut lam_old = f64::NAN;
    let mut lam = f64::NAN;
    let mut iterations = 0;
    for it in 1..=2000 {
        let mx: Vec<f64> = x.iter().zip(&mass).map(|(a, b)| a * b).collect();
        let y = from_col(&llt.solve(&to_col(&mx)));
        let nm = y.iter().zip(&mass).map(|(a, b)| a * a * b).sum::<f64>().sqrt();
        x = y.iter().map(|v| v / nm).collect();
        lam = q.quad(&x);
        iterations = it;
        if it > 2 && (lam - lam_old).abs() <= 1e-6 * lam.abs().max(1e-12 * scale) {
            break;
        }
        lam_old = lam;
    }
    Ok(LambdaStar { value: lam, indefinite: lam < 0.0, iterations, shift, unknowns: k })
}

/// Richardson extrapolation of `coarse` (step `r·h`) and `fine` (step `h`)
/// for an error of order `p`.
pub fn richardson(coarse: f64, fine: f64, ratio: f64, order: f64) -> f64 {
    fine + (fine - coarse) / (ratio.powf(order) - 1.0)
}

/// Random variation: even samples are white noise, odd ones a few random
/// plane waves.
fn random_variation(grid: &Arc<Grid>, m: usize, sample: usize, rng: &mut ChaCha8Rng) -> VariationField {
    let n = grid.dim;
    if sample % 2 == 0 {
        let mut v = VariationField::zeros(grid.clone(), m);
        for i in 0..grid.num_inside() {
            if grid.is_interior(i) {
                for a in 0..m {
                    v.values[i * m + a] = rng.sample(StandardNormal);
                }
            }
        }
        v
    } else {
        let waves: Vec<(usize, [f64; MAX_DIM], f64, f64)> = (0..3 * m)
            .map(|k| {
                let mut w = [0.0; MAX_DIM];
                for x in w.iter_mut().take(n) {
                    *x = 4.0 * rng.sample::<f64, _>(StandardNormal) / grid.diameter.max(1e-12);
                }
                (k % m, w, rng.gen_range(0.0..std::f64::consts::TAU), rng.sample(StandardNormal))
            })
            .collect();
        VariationField::from_fn(grid.clone(), m, |x, out| {
            out.fill(0.0);
            for (a, w, c, amp) in &waves {
                let arg: f64 = (0..n).map(|k| w[k] * x[k]).sum::<f64>() + c;
                out[*a] += amp * arg.cos();
            }
        })
    }
}

/// `min Q(φ) / Σ_α ∫|Dφ^α|² dμ` over random variations.
pub fn stability_margin(u: &VectorField, samples: usize, seed: u64) -> Result<f64, ContinuationError> {
    let (n, m) = (u.grid.dim, u.m);
    let (_, _, wedge) = field_monitors(u);
    let r = n.min(m);
    let bound = if r <= 1 { f64::INFINITY } else { 1.0 / ((r - 1) as f64).sqrt() };
    if wedge > bound {
        return Err(ContinuationError::PreconditionFailed { wedge, bound });
    }
    let q = QuadraticForm::new(FormKind::SecondVariation, u);
    let e = QuadraticForm::new(FormKind::Dirichlet, u);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = f64::INFINITY;
    for s in 0..samples {
        let phi = random_variation(&u.grid, m, s, &mut rng);
        let den = e.eval(&phi)?;
        if den > 0.0 {
            worst = worst.min(q.eval(&phi)? / den);
        }
    }
    Ok(worst)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UniquenessReport {
    pub reconverged: bool,
    pub trials: usize,
    /// Sup distance of each restart's limit from `u`; `None` when Newton failed.
    pub distances: Vec<Option<f64>>,
    pub threshold: f64,
}

/// Restarts Newton from smooth compactly supported perturbations of `u`
/// of sup-norm `scale` and checks that every restart comes back.
pub fn uniqueness_probe(
    u: &VectorField,
    bd: &BoundaryData,
    scale: f64,
    trials: usize,
    seed: u64,
    opts: &NewtonOptions,
) -> UniquenessReport {
    let threshold = 10.0 * opts.tol;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut distances = Vec::with_capacity(trials);
    for _ in 0..trials {
        let mut start = u.clone();
        if scale > 0.0 {
            let p = random_variation(&u.grid, u.m, 1, &mut rng);
            let s = p.sup_norm();
            if s > 0.0 {
                for (v, d) in start.values.iter_mut().zip(&p.values) {
                    *v += scale * d / s;
                }
            }
        }
        distances.push(newton_solve(&start, bd, opts).ok().map(|r| r.u.sup_distance(u)));
    }
    let reconverged = distances.iter().all(|d| d.is_some_and(|d| d <= threshold));
    UniquenessReport { reconverged, trials, distances, threshold }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analytic::{Affine, ExprField, SharedField};
    use crate::criteria::ComponentNorms;
    use crate::domain::{Discretization, DomainSpec};
    use crate::sampling::haar_orthogonal;

    fn data(exprs: &[&str]) -> BoundaryData {
        let comps: Vec<SharedField> =
            exprs.iter().map(|e| Arc::new(ExprField::parse(e, 2).unwrap()) as SharedField).collect();
        let norms = vec![ComponentNorms::default(); comps.len()];
        BoundaryData::with_norms(comps, norms, 0.0)
    }

    fn disk(h: f64) -> Arc<Grid> {
        Discretization::new(DomainSpec::ball(2, 1.0).unwrap(), h).unwrap().grid
    }

    #[test]
    fn affine_data_takes_no_newton_steps() {
        let a: SharedField = Arc::new(Affine::new(vec![0.3, -0.2], 0.1));
        let b: SharedField = Arc::new(Affine::new(vec![0.1, 0.4], -0.5));
        let bd = BoundaryData::with_norms(vec![a, b], vec![ComponentNorms::default(); 2], 0.0);
        let grid = disk(0.1);
        let res = newton_solve(&bd.sample(grid), &bd, &NewtonOptions::default()).unwrap();
        assert_eq!(res.iterations, 0);
    }

    #[test]
    fn analytic_jacobian_matches_finite_differences() {
        let grid = disk(0.2);
        let bd = data(&["0.4*x*y + 0.3*x", "0.5*sin(x) - 0.2*y*y"]);
        let mut u = bd.sample(grid.clone());
        // generic interior values
        for (k, v) in u.values[..grid.num_inside() * 2].iter_mut().enumerate() {
            *v += 0.05 * ((k as f64) * 0.7).sin();
        }
        let a = jacobian(&u);
        let f = fd_jacobian(&u);
        let mut worst: f64 = 0.0;
        let mut big: f64 = 0.0;
        for r in 0..a.nrows {
            for c in 0..a.nrows {
                worst = worst.max((a.get(r, c) - f.get(r, c)).abs());
                big = big.max(a.get(r, c).abs());
            }
        }
        assert!(worst < 1e-6 * big, "{worst} vs {big}");
    }

    #[test]
    fn newton_converges_quadratically_on_codimension_two_data() {
        let grid = disk(0.1);
        let bd = data(&["0.3*x*y", "0.2*(x*x - y*y)"]);
        let res = newton_solve(&bd.sample(grid), &bd, &NewtonOptions::default()).unwrap();
        assert!(res.residual <= 1e-10);
        assert!(res.iterations <= 6, "{:?}", res.history);
    }

    #[test]
    fn zero_data_path_stays_flat_and_stable() {
        let bd = data(&["0", "0"]);
        let st = continuation_run(
            &bd,
            disk(0.1),
            &ContinuationOptions { steps: 4, psi: Some(2.0), track_lambda_star: true, ..Default::default() },
        )
        .unwrap();
        assert_eq!(st.path.len(), 5);
        assert!(st.u.sup_norm() == 0.0);
        assert!(st.path.iter().all(|p| p.lambda_star.unwrap() > 0.0));
    }

    #[test]
    fn continuation_reaches_one_for_small_data() {
        let bd = data(&["0.1*x*y", "0.1*(x*x - y*y)"]);
        let grid = disk(0.1);
        let st = continuation_run(&bd, grid.clone(), &ContinuationOptions::default()).unwrap();
        assert_eq!(st.t, 1.0);
        assert_eq!(st.path.len(), 11, "{:#?}", st.path);
        let direct = newton_solve(&VectorField::zeros(grid, 2), &bd, &NewtonOptions::default()).unwrap();
        assert!(st.u.sup_distance(&direct.u) < 1e-9);
        assert!(st.lambda_star.unwrap().value > 0.0);
    }

    #[test]
    fn frame_integrand_matches_coordinate_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(n, m) in &[(2, 1), (2, 2), (3, 2), (2, 3), (4, 3), (3, 3)] {
            for _ in 0..20 {
                let mut df = ZERO;
                let mut dp = ZERO;
                for a in 0..m {
                    for i in 0..n {
                        df[a][i] = rng.sample::<f64, _>(StandardNormal);
                        dp[a][i] = rng.sample::<f64, _>(StandardNormal);
                    }
                }
                let k = form_matrix(FormKind::SecondVariation, &df, n, m);
                let d = n * m;
                let mut q = 0.0;
                for x in 0..d {
                    for y in 0..d {
                        q += dp[x / n][x % n] * k[x * d + y] * dp[y / n][y % n];
                    }
                }
                let f = integrand_in_frame(&df, &dp, n, m);
                assert!((q - f).abs() < 1e-10 * (1.0 + f.abs()), "{n} {m}: {q} {f}");
                // rotating the domain leaves the integrand unchanged
                let r = haar_orthogonal(n, &mut rng);
                let rot = |x: &Mat| {
                    let mut o = ZERO;
                    for a in 0..m {
                        for i in 0..n {
                            o[a][i] = (0..n).map(|j| x[a][j] * r[j][i]).sum();
                        }
                    }
                    o
                };
                let g = integrand_in_frame(&rot(&df), &rot(&dp), n, m);
                assert!((g - f).abs() < 1e-10 * (1.0 + f.abs()));
            }
        }
    }

    #[test]
    fn area_hessian_is_second_derivative_of_sqrt_det() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (n, m) = (3, 2);
        let mut df = ZERO;
        let mut dp = ZERO;
        for a in 0..m {
            for i in 0..n {
                df[a][i] = 0.7 * rng.sample::<f64, _>(StandardNormal);
                dp[a][i] = rng.sample::<f64, _>(StandardNormal);
            }
        }
        let area = |s: f64| {
            let mut w = ZERO;
            for a in 0..m {
                for i in 0..n {
                    w[a][i] = df[a][i] + s * dp[a][i];
                }
            }
            metric_state(&crate::jetcalc::Jet { n, m, df: w, d2f: [ZERO; MAX_DIM] }).v2.sqrt()
        };
        let e = 1e-4;
        let fd = (area(e) - 2.0 * area(0.0) + area(-e)) / (e * e);
        let k = form_matrix(FormKind::AreaHessian, &df, n, m);
        let d = n * m;
        let mut q = 0.0;
        for x in 0..d {
            for y in 0..d {
                q += dp[x / n][x % n] * k[x * d + y] * dp[y / n][y % n];
            }
        }
        assert!((q * area(0.0) - fd).abs() < 1e-5 * fd.abs().max(1.0), "{} {fd}", q * area(0.0));
    }

    #[test]
    fn closed_form_at_diagonal_gradient() {
        // Du = diag(a, 0), Dφ = [[p, q], [r, s]] in the same frame
        let (a, p, q, r, s) = (1.5, 0.3, -0.7, 0.4, 1.1);
        let mut df = ZERO;
        df[0][0] = a;
        let mut dp = ZERO;
        dp[0][0] = p;
        dp[0][1] = q;
        dp[1][0] = r;
        dp[1][1] = s;
        let w = 1.0 / (1.0 + a * a);
        let expect = (p * p + r * r) * w + q * q + s * s + a * a * w * w * (-2.0 * p * p + p * p);
        assert!((integrand_in_frame(&df, &dp, 2, 2) - expect).abs() < 1e-13);
    }

    #[test]
    fn flat_form_is_dirichlet_energy_and_quadratic() {
        let grid = disk(0.1);
        let u = VectorField::zeros(grid.clone(), 2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let phi = random_variation(&grid, 2, 0, &mut rng);
        let q = QuadraticForm::new(FormKind::SecondVariation, &u);
        let e = QuadraticForm::new(FormKind::Dirichlet, &u);
        assert_eq!(q.eval(&phi).unwrap(), e.eval(&phi).unwrap());
        let bd = data(&["0.3*x*y", "0.2*(x*x - y*y)"]);
        let sol = newton_solve(&u, &bd, &NewtonOptions::default()).unwrap().u;
        let q0 = second_variation_form(&sol, &phi).unwrap();
        for c in [-2.0, 0.5] {
            let mut p2 = phi.clone();
            p2.values.iter_mut().for_each(|v| *v *= c);
            let qc = second_variation_form(&sol, &p2).unwrap();
            assert!((qc - c * c * q0).abs() < 1e-12 * q0.abs());
        }
        // matrix form agrees and is symmetric
        let (mat, _) = QuadraticForm::new(FormKind::SecondVariation, &sol).matrix();
        assert!(mat.max_asymmetry() <= 1e-12);
        let x: Vec<f64> = q
            .unknown_nodes()
            .iter()
            .flat_map(|&i| [phi.values[i * 2], phi.values[i * 2 + 1]])
            .collect();
        assert!((mat.quad(&x) - q0).abs() < 1e-10 * q0.abs());
        let mut bad = phi.clone();
        let edge = (0..grid.num_inside()).find(|&i| !grid.is_interior(i)).unwrap();
        bad.values[edge * 2] = 1.0;
        assert_eq!(second_variation_form(&sol, &bad), Err(ContinuationError::UnsupportedVariation));
    }

    #[test]
    fn flat_margin_is_one() {
        let u = VectorField::zeros(disk(0.1), 2);
        assert_eq!(stability_margin(&u, 6, 9).unwrap(), 1.0);
    }

    #[test]
    fn margin_refuses_large_wedge() {
        let grid = disk(0.1);
        let u = VectorField::from_fn(grid, 2, |x, o| {
            o[0] = 1.2 * x[0];
            o[1] = x[1];
        });
        assert!(matches!(stability_margin(&u, 4, 0), Err(ContinuationError::PreconditionFailed { .. })));
    }

    #[test]
    fn probe_with_zero_scale_is_trivial() {
        let bd = data(&["0.2*x", "0.1*y"]);
        let u = bd.sample(disk(0.1));
        let rep = uniqueness_probe(&u, &bd, 0.0, 2, 4, &NewtonOptions::default());
        assert!(rep.reconverged);
        let rep = uniqueness_probe(&u, &bd, 0.5, 3, 4, &NewtonOptions::default());
        assert!(rep.reconverged, "{rep:?}");
    }
}
