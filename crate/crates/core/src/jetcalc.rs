//! Finite-difference jets of vector-valued graphs and the pointwise geometry of
//! their induced metric.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::Grid;
use crate::linalg::{det, spd_inverse, sym_eigen, Mat, Vector, MAX_DIM, ZERO};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum JetError {
    #[error("node is outside the domain")]
    OutsideDomain,
}

/// Number of stencil slots: n first derivatives then the upper triangle of the
/// Hessian.
pub fn slot_count(n: usize) -> usize {
    n + n * (n + 1) / 2
}

/// Slot of `∂_a ∂_b` for `a ≤ b`.
pub fn pair_slot(n: usize, a: usize, b: usize) -> usize {
    let (a, b) = if a <= b { (a, b) } else { (b, a) };
    n + a * n - a * (a + 1) / 2 + b
}

/// Precomputed derivative weights per inside node, in CSR layout over
/// `(node, slot)`.
#[derive(Debug, Default, Clone)]
pub struct Stencils {
    slots: usize,
    offsets: Vec<u32>,
    src: Vec<u32>,
    w: Vec<f64>,
    diag: Vec<f64>,
}

impl Stencils {
    pub fn build(grid: &Grid) -> Self {
        let n = grid.dim;
        let slots = slot_count(n);
        let count = grid.num_inside();
        let mut offsets = Vec::with_capacity(count * slots + 1);
        let mut src = Vec::new();
        let mut w = Vec::new();
        offsets.push(0u32);
        let mut buf: Vec<(u32, f64)> = Vec::with_capacity(64);
        for i in 0..count {
            for s in 0..slots {
                buf.clear();
                if s < n {
                    first_weights(grid, i, s, 1.0, &mut buf);
                } else {
                    let (a, b) = slot_pair(n, s);
                    if a == b {
                        second_weights(grid, i, a, &mut buf);
                    } else {
                        let ab = mixed_weights(grid, i, a, b);
                        let ba = mixed_weights(grid, i, b, a);
                        match (ab, ba) {
                            (Some(x), Some(y)) => {
                                buf.extend(x.into_iter().map(|(s, v)| (s, 0.5 * v)));
                                buf.extend(y.into_iter().map(|(s, v)| (s, 0.5 * v)));
                            }
                            (Some(x), None) | (None, Some(x)) => buf.extend(x),
                            (None, None) => {}
                        }
                    }
                }
                buf.sort_by_key(|e| e.0);
                let mut k = 0;
                while k < buf.len() {
                    let s0 = buf[k].0;
                    let mut acc = 0.0;
                    while k < buf.len() && buf[k].0 == s0 {
                        acc += buf[k].1;
                        k += 1;
                    }
                    if acc != 0.0 {
                        src.push(s0);
                        w.push(acc);
                    }
                }
                offsets.push(src.len() as u32);
            }
        }
        let mut out = Self { slots, offsets, src, w, diag: Vec::new() };
        out.diag = (0..count * slots).map(|k| out.self_weight_uncached(k / slots, k % slots)).collect();
        out
    }

    /// `(sources, weights)` of slot `s` at inside node `i`.
    #[inline]
    pub fn entries(&self, i: usize, s: usize) -> (&[u32], &[f64]) {
        let a = self.offsets[i * self.slots + s] as usize;
        let b = self.offsets[i * self.slots + s + 1] as usize;
        (&self.src[a..b], &self.w[a..b])
    }

    /// Weight of node `i` itself in slot `s`.
    #[inline]
    pub fn self_weight(&self, i: usize, s: usize) -> f64 {
        self.diag[i * self.slots + s]
    }

    fn self_weight_uncached(&self, i: usize, s: usize) -> f64 {
        let (src, w) = self.entries(i, s);
        src.iter().zip(w).filter(|(x, _)| **x as usize == i).map(|(_, v)| *v).sum()
    }

    pub fn slots(&self) -> usize {
        self.slots
    }

    /// Self weight of `Σ_{pq} c_pq ∂_p∂_q` at node `i` for symmetric `c`.
    pub fn operator_diag(&self, i: usize, c: &Mat, n: usize) -> f64 {
        let mut d = 0.0;
        for p in 0..n {
            for q in p..n {
                let f = if p == q { c[p][p] } else { 2.0 * c[p][q] };
                d += f * self.self_weight(i, pair_slot(n, p, q));
            }
        }
        d
    }

    /// Appends the stencil of `Σ_{pq} c_pq ∂_p∂_q + Σ_p b_p ∂_p` at node `i`
    /// (duplicates not merged).
    pub fn operator_row(&self, i: usize, c: &Mat, b: Option<&Vector>, n: usize, out: &mut Vec<(u32, f64)>) {
        for p in 0..n {
            if let Some(b) = b {
                if b[p] != 0.0 {
                    let (src, w) = self.entries(i, p);
                    out.extend(src.iter().zip(w).map(|(s, v)| (*s, b[p] * v)));
                }
            }
            for q in p..n {
                let f = if p == q { c[p][p] } else { 2.0 * c[p][q] };
                if f != 0.0 {
                    let (src, w) = self.entries(i, pair_slot(n, p, q));
                    out.extend(src.iter().zip(w).map(|(s, v)| (*s, f * v)));
                }
            }
        }
    }
}

/// Inverse of [`pair_slot`].
pub fn slot_pair(n: usize, s: usize) -> (usize, usize) {
    for a in 0..n {
        for b in a..n {
            if pair_slot(n, a, b) == s {
                return (a, b);
            }
        }
    }
    unreachable!("slot out of range")
}

/// Nonuniform three-point first derivative along `axis`, scaled by `scale`.
fn first_weights(grid: &Grid, i: usize, axis: usize, scale: f64, out: &mut Vec<(u32, f64)>) {
    let (sm, hm) = grid.neighbor(i, axis, -1);
    let (sp, hp) = grid.neighbor(i, axis, 1);
    let den = hm * hp * (hm + hp);
    out.push((sp as u32, scale * hm * hm / den));
    out.push((sm as u32, -scale * hp * hp / den));
    out.push((i as u32, scale * (hp * hp - hm * hm) / den));
}

fn second_weights(grid: &Grid, i: usize, axis: usize, out: &mut Vec<(u32, f64)>) {
    let (sm, hm) = grid.neighbor(i, axis, -1);
    let (sp, hp) = grid.neighbor(i, axis, 1);
    let den = hm * hp * (hm + hp);
    out.push((sp as u32, 2.0 * hm / den));
    out.push((sm as u32, 2.0 * hp / den));
    out.push((i as u32, -2.0 * (hm + hp) / den));
}

/// `∂_k` applied to the neighbours' `∂_l` stencils: central when both
/// neighbours along `k` are nodes, one-sided when only one is.
fn mixed_weights(grid: &Grid, i: usize, k: usize, l: usize) -> Option<Vec<(u32, f64)>> {
    let (sm, _) = grid.neighbor(i, k, -1);
    let (sp, _) = grid.neighbor(i, k, 1);
    let h = grid.h;
    let m_ok = !grid.is_cut_source(sm);
    let p_ok = !grid.is_cut_source(sp);
    let mut out = Vec::with_capacity(12);
    match (m_ok, p_ok) {
        (true, true) => {
            first_weights(grid, sp, l, 1.0 / (2.0 * h), &mut out);
            first_weights(grid, sm, l, -1.0 / (2.0 * h), &mut out);
        }
        (false, true) => {
            first_weights(grid, sp, l, 1.0 / h, &mut out);
            first_weights(grid, i, l, -1.0 / h, &mut out);
        }
        (true, false) => {
            first_weights(grid, i, l, 1.0 / h, &mut out);
            first_weights(grid, sm, l, -1.0 / h, &mut out);
        }
        (false, false) => return None,
    }
    Some(out)
}

/// `m` values per source (inside nodes, then cut points), node-major.
#[derive(Clone, Debug)]
pub struct VectorField {
    pub grid: Arc<Grid>,
    pub m: usize,
    pub values: Vec<f64>,
}

impl VectorField {
    pub fn zeros(grid: Arc<Grid>, m: usize) -> Self {
        let len = grid.num_sources() * m;
        Self { grid, m, values: vec![0.0; len] }
    }

    /// Sample `f(x, out)` at every source.
    pub fn from_fn(grid: Arc<Grid>, m: usize, mut f: impl FnMut(&[f64], &mut [f64])) -> Self {
        let mut out = Self::zeros(grid.clone(), m);
        for s in 0..grid.num_sources() {
            let x = grid.source_position(s);
            f(&x[..grid.dim], &mut out.values[s * m..(s + 1) * m]);
        }
        out
    }

    #[inline]
    pub fn get(&self, s: usize, alpha: usize) -> f64 {
        self.values[s * self.m + alpha]
    }

    #[inline]
    pub fn set(&mut self, s: usize, alpha: usize, v: f64) {
        self.values[s * self.m + alpha] = v;
    }

    /// Values at inside nodes only.
    pub fn inside_values(&self) -> &[f64] {
        &self.values[..self.grid.num_inside() * self.m]
    }

    pub fn inside_values_mut(&mut self) -> &mut [f64] {
        let k = self.grid.num_inside() * self.m;
        &mut self.values[..k]
    }

    /// Sup-norm distance over inside nodes.
    pub fn sup_distance(&self, other: &VectorField) -> f64 {
        self.inside_values()
            .iter()
            .zip(other.inside_values())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn sup_norm(&self) -> f64 {
        self.inside_values().iter().map(|v| v.abs()).fold(0.0, f64::max)
    }
}

/// First and second derivatives of an `m`-vector field at a node.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Jet {
    pub n: usize,
    pub m: usize,
    /// `df[α][i] = ∂_i f^α`.
    pub df: Mat,
    /// `d2f[α][i][j] = ∂_i ∂_j f^α`.
    pub d2f: [Mat; MAX_DIM],
}

/// Jet at inside node `i`.
pub fn jet(field: &VectorField, i: usize) -> Jet {
    let grid = &field.grid;
    let n = grid.dim;
    let m = field.m;
    let st = grid.stencils();
    let mut out = Jet { n, m, df: ZERO, d2f: [ZERO; MAX_DIM] };
    for s in 0..st.slots() {
        let (src, w) = st.entries(i, s);
        let mut acc = [0.0; MAX_DIM];
        for (&sx, &wx) in src.iter().zip(w) {
            let base = sx as usize * m;
            for (a, v) in acc.iter_mut().enumerate().take(m) {
                *v += wx * field.values[base + a];
            }
        }
        if s < n {
            for a in 0..m {
                out.df[a][s] = acc[a];
            }
        } else {
            let (p, q) = slot_pair(n, s);
            for a in 0..m {
                out.d2f[a][p][q] = acc[a];
                out.d2f[a][q][p] = acc[a];
            }
        }
    }
    out
}

/// Jet at an array index; exterior nodes are rejected.
pub fn jet_at_grid_index(field: &VectorField, grid_index: usize) -> Result<Jet, JetError> {
    field
        .grid
        .inside_index(grid_index)
        .map(|i| jet(field, i))
        .ok_or(JetError::OutsideDomain)
}

/// Induced metric and its singular-value invariants.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricState {
    pub n: usize,
    pub g: Mat,
    pub g_inv: Mat,
    /// `det g`.
    pub v2: f64,
    /// Singular values of `Df`, descending, zero-padded to `n`.
    pub mu: Vector,
    pub theta: f64,
    /// `max_{i<j} μ_i μ_j`.
    pub wedge2: f64,
}

pub fn metric_from_gradient(df: &Mat, n: usize, m: usize) -> MetricState {
    let mut g = ZERO;
    for i in 0..n {
        for j in i..n {
            let mut s = if i == j { 1.0 } else { 0.0 };
            for a in 0..m {
                s += df[a][i] * df[a][j];
            }
            g[i][j] = s;
            g[j][i] = s;
        }
    }
    let v2 = det(&g, n);
    let mut gram = g;
    for (i, row) in gram.iter_mut().enumerate().take(n) {
        row[i] -= 1.0;
    }
    let e = sym_eigen(&gram, n);
    // Cholesky loses the pivot once g is badly conditioned; the spectral form
    // of (I + DfᵀDf)⁻¹ does not
    let g_inv = spd_inverse(&g, n).unwrap_or_else(|| {
        let mut inv = ZERO;
        for i in 0..n {
            for j in 0..n {
                inv[i][j] = (0..n).map(|k| e.vectors[i][k] * e.vectors[j][k] / (1.0 + e.values[k].max(0.0))).sum();
            }
        }
        inv
    });
    let mut mu = [0.0; MAX_DIM];
    for i in 0..n.min(m) {
        mu[i] = e.values[i].max(0.0).sqrt();
    }
    let (a2, b2) = (mu[0] * mu[0], mu[1] * mu[1]);
    let theta = 2.0 * (1.0 - a2 * b2) / ((1.0 + a2) * (1.0 + b2));
    MetricState { n, g, g_inv, v2, mu, theta, wedge2: mu[0] * mu[1] }
}

pub fn metric_state(j: &Jet) -> MetricState {
    metric_from_gradient(&j.df, j.n, j.m)
}

/// `gⁱʲ ∂_ij f^α` at every inside node, node-major.
pub fn residual(field: &VectorField) -> Vec<f64> {
    let grid = &field.grid;
    let n = grid.dim;
    let m = field.m;
    let mut out = vec![0.0; grid.num_inside() * m];
    for i in 0..grid.num_inside() {
        let jt = jet(field, i);
        let ms = metric_state(&jt);
        for a in 0..m {
            out[i * m + a] = contract(&ms.g_inv, &jt.d2f[a], n);
        }
    }
    out
}

#[inline]
pub fn contract(a: &Mat, b: &Mat, n: usize) -> f64 {
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            s += a[i][j] * b[i][j];
        }
    }
    s
}

pub fn sup_abs(v: &[f64]) -> f64 {
    v.iter().map(|x| x.abs()).fold(0.0, f64::max)
}

/// Divergence form: `∂_i(√det g gⁱʲ)` (n entries) and `∂_i(√det g gⁱʲ ∂_j f^α)`
/// (m entries) per inside node. Only nodes whose neighbours are all nodes are
/// evaluated; boundary-adjacent entries are zero.
pub fn divergence_residual(field: &VectorField) -> Vec<f64> {
    let grid = &field.grid;
    let n = grid.dim;
    let m = field.m;
    let width = n + m;
    let count = grid.num_inside();
    // flux tensors at every inside node
    let mut a_flux = vec![ZERO; count];
    let mut b_flux = vec![ZERO; count];
    for i in 0..count {
        let jt = jet(field, i);
        let ms = metric_state(&jt);
        let sq = ms.v2.sqrt();
        for p in 0..n {
            for q in 0..n {
                a_flux[i][p][q] = sq * ms.g_inv[p][q];
            }
        }
        for a in 0..m {
            for p in 0..n {
                let mut s = 0.0;
                for q in 0..n {
                    s += ms.g_inv[p][q] * jt.df[a][q];
                }
                b_flux[i][a][p] = sq * s;
            }
        }
    }
    let mut out = vec![0.0; count * width];
    let h = grid.h;
    for i in 0..count {
        if !grid.is_interior(i) {
            continue;
        }
        for p in 0..n {
            let (sm, _) = grid.neighbor(i, p, -1);
            let (sp, _) = grid.neighbor(i, p, 1);
            for q in 0..n {
                out[i * width + q] += (a_flux[sp][p][q] - a_flux[sm][p][q]) / (2.0 * h);
            }
            for a in 0..m {
                out[i * width + n + a] += (b_flux[sp][a][p] - b_flux[sm][a][p]) / (2.0 * h);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{build_grid, DomainSpec};

    fn disk(h: f64) -> Arc<Grid> {
        Arc::new(build_grid(&DomainSpec::ball(2, 1.0).unwrap(), h).unwrap())
    }

    #[test]
    fn slots_cover_upper_triangle() {
        for n in 2..=4 {
            let mut seen = vec![false; slot_count(n)];
            for a in 0..n {
                for b in a..n {
                    let s = pair_slot(n, a, b);
                    assert!(!seen[s]);
                    seen[s] = true;
                    assert_eq!(slot_pair(n, s), (a, b));
                }
            }
            assert!(seen[n..].iter().all(|x| *x));
        }
    }

    #[test]
    fn quadratics_are_differentiated_exactly_everywhere() {
        let specs = [
            DomainSpec::ball(2, 1.0).unwrap(),
            DomainSpec::catenoid_neck(0.5, 1.0).unwrap(),
            DomainSpec::rounded_box(&[0.6, 0.5, 0.4], 0.1).unwrap(),
        ];
        for spec in specs {
            let n = spec.dim;
            let grid = Arc::new(build_grid(&spec, 0.07).unwrap());
            let q = |x: &[f64]| {
                let mut s = 0.3 + x[0] - 0.5 * x[1];
                for i in 0..n {
                    for j in 0..n {
                        s += 0.1 * (1 + i + 2 * j) as f64 * x[i] * x[j];
                    }
                }
                s
            };
            let f = VectorField::from_fn(grid.clone(), 1, |x, o| o[0] = q(x));
            for i in 0..grid.num_inside() {
                let jt = jet(&f, i);
                let x = grid.position(i);
                for a in 0..n {
                    let mut d = if a == 0 { 1.0 } else if a == 1 { -0.5 } else { 0.0 };
                    for j in 0..n {
                        d += 0.1 * ((1 + a + 2 * j) + (1 + j + 2 * a)) as f64 * x[j];
                    }
                    assert!((jt.df[0][a] - d).abs() < 1e-8, "{:?}", spec.kind);
                    for b in 0..n {
                        let e = 0.1 * ((1 + a + 2 * b) + (1 + b + 2 * a)) as f64;
                        let got = jt.d2f[0][a][b];
                        // both neighbours along both axes cut is the only inexact case
                        if (got - e).abs() > 1e-6 {
                            assert!(a != b);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn metric_examples() {
        let ms = metric_from_gradient(&ZERO, 2, 2);
        assert_eq!(ms.v2, 1.0);
        assert_eq!(ms.theta, 2.0);
        assert_eq!(ms.wedge2, 0.0);
        let mut df = ZERO;
        df[0][0] = 2.0;
        df[1][1] = 0.3;
        let ms = metric_from_gradient(&df, 2, 2);
        assert!((ms.mu[0] - 2.0).abs() < 1e-14 && (ms.mu[1] - 0.3).abs() < 1e-14);
        assert!((ms.v2 - 5.45).abs() < 1e-13);
        assert!((ms.theta - 2.0 * 0.64 / 5.45).abs() < 1e-13);
        assert!((ms.wedge2 - 0.6).abs() < 1e-14);
        let mut df = ZERO;
        df[0][0] = 1.0;
        let ms = metric_from_gradient(&df, 2, 1);
        assert!((ms.g_inv[0][0] - 0.5).abs() < 1e-15 && (ms.g_inv[1][1] - 1.0).abs() < 1e-15);
        assert!((ms.v2 - 2.0).abs() < 1e-15);
    }

    #[test]
    fn affine_residuals_vanish() {
        let grid = disk(0.1);
        let f = VectorField::from_fn(grid, 2, |x, o| {
            o[0] = 0.4 * x[0] - 1.3 * x[1] + 2.0;
            o[1] = -2.0 * x[0] + 0.1 * x[1];
        });
        assert!(sup_abs(&residual(&f)) < 1e-10);
        assert!(sup_abs(&divergence_residual(&f)) < 1e-10);
    }

    #[test]
    fn x_squared_residual_at_origin_is_two() {
        let grid = disk(0.1);
        let f = VectorField::from_fn(grid.clone(), 1, |x, o| o[0] = x[0] * x[0]);
        let r = residual(&f);
        let origin = (0..grid.num_inside())
            .find(|&i| grid.position(i)[..2].iter().all(|v| v.abs() < 1e-12))
            .unwrap();
        assert!((r[origin] - 2.0).abs() < 1e-12);
        let jt = jet(&f, origin);
        assert!((jt.d2f[0][0][0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn outside_nodes_have_no_jet() {
        let grid = disk(0.1);
        let f = VectorField::zeros(grid.clone(), 1);
        assert_eq!(jet_at_grid_index(&f, 0), Err(JetError::OutsideDomain));
    }
}
