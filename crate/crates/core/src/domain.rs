//! Base domains as analytic level sets, their Cartesian discretization, and the
//! distance-function geometry consumed by the solvability constants.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analytic::SharedField;
use crate::jetcalc::Stencils;
use crate::linalg::{sym_eigen, Mat, Vector, MAX_DIM, ZERO};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DomainError {
    #[error("invalid domain parameters: {0}")]
    InvalidParams(String),
    #[error("grid has no interior node")]
    EmptyDomain,
    #[error("grid too coarse: {0}")]
    TooCoarse(String),
    #[error("projection onto the boundary failed to converge at {0:?}")]
    ProjectionFailure(Vec<f64>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DomainKind {
    Ball,
    RoundedBox,
    Ellipsoid,
    CatenoidNeck,
    CustomLevelSet,
}

/// Analytic description of Ω through a level-set function `F` (negative
/// inside).
///
/// Parameters by kind:
/// * ball: `[radius]`
/// * rounded box: `[half_width_1, …, half_width_n, corner_radius]`
/// * ellipsoid: `[a_1, …, a_n]`
/// * catenoid neck (n = 3): `[neck_radius, half_length]`; the lateral profile is
///   `x² + y² = c² + z² − β z⁸` with `β` closing the surface at `|z| = half_length`
/// * custom: `[bbox_half_width]` plus the level-set field
#[derive(Clone, Debug)]
pub struct DomainSpec {
    pub kind: DomainKind,
    pub dim: usize,
    pub params: Vec<f64>,
    pub custom: Option<SharedField>,
}

const CATENOID_POWER: i32 = 8;

impl DomainSpec {
    pub fn new(
        kind: DomainKind,
        dim: usize,
        params: Vec<f64>,
        custom: Option<SharedField>,
    ) -> Result<Self, DomainError> {
        let bad = |s: &str| Err(DomainError::InvalidParams(s.to_string()));
        if !(2..=MAX_DIM).contains(&dim) {
            return bad("dimension must lie in 2..=4");
        }
        if params.iter().any(|p| !p.is_finite() || *p <= 0.0) {
            if !(kind == DomainKind::RoundedBox && params.last() == Some(&0.0)) {
                return bad("parameters must be positive and finite");
            }
        }
        match kind {
            DomainKind::Ball if params.len() != 1 => return bad("ball takes [radius]"),
            DomainKind::RoundedBox => {
                if params.len() != dim + 1 {
                    return bad("rounded box takes n half-widths and a corner radius");
                }
                let r = params[dim];
                if r <= 0.0 {
                    return bad("box corners must be rounded (corner radius > 0)");
                }
                if params[..dim].iter().any(|a| *a <= r) {
                    return bad("corner radius must be smaller than every half-width");
                }
            }
            DomainKind::Ellipsoid if params.len() != dim => return bad("ellipsoid takes n semi-axes"),
            DomainKind::CatenoidNeck => {
                if dim != 3 {
                    return bad("catenoid neck is defined for n = 3");
                }
                if params.len() != 2 {
                    return bad("catenoid neck takes [neck_radius, half_length]");
                }
            }
            DomainKind::CustomLevelSet => {
                if params.len() != 1 {
                    return bad("custom level set takes [bbox_half_width]");
                }
                match &custom {
                    Some(f) if f.dim() == dim => {}
                    _ => return bad("custom level set needs a field of matching dimension"),
                }
            }
            _ => {}
        }
        Ok(Self { kind, dim, params, custom })
    }

    pub fn ball(dim: usize, radius: f64) -> Result<Self, DomainError> {
        Self::new(DomainKind::Ball, dim, vec![radius], None)
    }

    pub fn rounded_box(half_widths: &[f64], corner: f64) -> Result<Self, DomainError> {
        let mut p = half_widths.to_vec();
        p.push(corner);
        Self::new(DomainKind::RoundedBox, half_widths.len(), p, None)
    }

    pub fn ellipsoid(axes: &[f64]) -> Result<Self, DomainError> {
        Self::new(DomainKind::Ellipsoid, axes.len(), axes.to_vec(), None)
    }

    pub fn catenoid_neck(neck_radius: f64, half_length: f64) -> Result<Self, DomainError> {
        Self::new(DomainKind::CatenoidNeck, 3, vec![neck_radius, half_length], None)
    }

    pub fn custom(field: SharedField, bbox_half_width: f64) -> Result<Self, DomainError> {
        let dim = field.dim();
        Self::new(DomainKind::CustomLevelSet, dim, vec![bbox_half_width], Some(field))
    }

    fn catenoid_beta(&self) -> f64 {
        let (c, z) = (self.params[0], self.params[1]);
        (c * c + z * z) / z.powi(CATENOID_POWER)
    }

    /// Squared lateral radius `S(z)` of the catenoid-neck profile and its
    /// first two derivatives.
    pub fn catenoid_profile(&self, z: f64) -> (f64, f64, f64) {
        let c = self.params[0];
        let b = self.catenoid_beta();
        let k = CATENOID_POWER;
        let s = c * c + z * z - b * z.powi(k);
        let s1 = 2.0 * z - b * k as f64 * z.powi(k - 1);
        let s2 = 2.0 - b * (k * (k - 1)) as f64 * z.powi(k - 2);
        (s, s1, s2)
    }

    /// Level-set value `F(x)`.
    pub fn level(&self, x: &[f64]) -> f64 {
        let n = self.dim;
        match self.kind {
            DomainKind::Ball => x[..n].iter().map(|v| v * v).sum::<f64>().sqrt() - self.params[0],
            DomainKind::RoundedBox => {
                let r = self.params[n];
                let mut out2 = 0.0;
                let mut inner = f64::NEG_INFINITY;
                for i in 0..n {
                    let q = x[i].abs() - (self.params[i] - r);
                    if q > 0.0 {
                        out2 += q * q;
                    }
                    inner = inner.max(q);
                }
                if out2 > 0.0 {
                    out2.sqrt() - r
                } else {
                    inner - r
                }
            }
            DomainKind::Ellipsoid => {
                (0..n).map(|i| x[i] * x[i] / (self.params[i] * self.params[i])).sum::<f64>() - 1.0
            }
            DomainKind::CatenoidNeck => x[0] * x[0] + x[1] * x[1] - self.catenoid_profile(x[2]).0,
            DomainKind::CustomLevelSet => self.custom.as_ref().expect("validated").value(x),
        }
    }

    /// Gradient and Hessian of the level-set function.
    pub fn level_derivatives(&self, x: &[f64]) -> (Vector, Mat) {
        let n = self.dim;
        let mut g = [0.0; MAX_DIM];
        let mut h = ZERO;
        match self.kind {
            DomainKind::Ball => {
                let r = x[..n].iter().map(|v| v * v).sum::<f64>().sqrt();
                if r > 0.0 {
                    for i in 0..n {
                        g[i] = x[i] / r;
                    }
                    for i in 0..n {
                        for j in 0..n {
                            h[i][j] = (if i == j { 1.0 } else { 0.0 } - g[i] * g[j]) / r;
                        }
                    }
                }
            }
            DomainKind::RoundedBox => {
                let r = self.params[n];
                let mut q = [0.0; MAX_DIM];
                let mut sgn = [1.0; MAX_DIM];
                let mut out2 = 0.0;
                let mut arg = 0;
                for i in 0..n {
                    q[i] = x[i].abs() - (self.params[i] - r);
                    if x[i] < 0.0 {
                        sgn[i] = -1.0;
                    }
                    if q[i] > 0.0 {
                        out2 += q[i] * q[i];
                    }
                    if q[i] > q[arg] {
                        arg = i;
                    }
                }
                if out2 > 0.0 {
                    let len = out2.sqrt();
                    let mut u = [0.0; MAX_DIM];
                    for i in 0..n {
                        if q[i] > 0.0 {
                            u[i] = q[i] / len;
                            g[i] = sgn[i] * u[i];
                        }
                    }
                    for i in 0..n {
                        for j in 0..n {
                            if q[i] > 0.0 && q[j] > 0.0 {
                                let d = if i == j { 1.0 } else { 0.0 };
                                h[i][j] = sgn[i] * sgn[j] * (d - u[i] * u[j]) / len;
                            }
                        }
                    }
                } else {
                    g[arg] = sgn[arg];
                }
            }
            DomainKind::Ellipsoid => {
                for i in 0..n {
                    let a2 = self.params[i] * self.params[i];
                    g[i] = 2.0 * x[i] / a2;
                    h[i][i] = 2.0 / a2;
                }
            }
            DomainKind::CatenoidNeck => {
                let (_, s1, s2) = self.catenoid_profile(x[2]);
                g[0] = 2.0 * x[0];
                g[1] = 2.0 * x[1];
                g[2] = -s1;
                h[0][0] = 2.0;
                h[1][1] = 2.0;
                h[2][2] = -s2;
            }
            DomainKind::CustomLevelSet => {
                let f = self.custom.as_ref().expect("validated");
                f.gradient(x, &mut g[..n]);
                h = f.hessian(x);
            }
        }
        (g, h)
    }

    /// Axis-aligned box containing the closure of Ω.
    pub fn bounding_box(&self) -> (Vector, Vector) {
        let n = self.dim;
        let mut lo = [0.0; MAX_DIM];
        let mut hi = [0.0; MAX_DIM];
        for i in 0..n {
            let w = match self.kind {
                DomainKind::Ball | DomainKind::CustomLevelSet => self.params[0],
                DomainKind::RoundedBox | DomainKind::Ellipsoid => self.params[i],
                DomainKind::CatenoidNeck => {
                    if i == 2 {
                        self.params[1]
                    } else {
                        self.catenoid_max_radius()
                    }
                }
            };
            lo[i] = -w;
            hi[i] = w;
        }
        (lo, hi)
    }

    fn catenoid_max_radius(&self) -> f64 {
        let z_max = self.params[1];
        let mut best: f64 = 0.0;
        let samples = 4000;
        for k in 0..=samples {
            let z = -z_max + 2.0 * z_max * k as f64 / samples as f64;
            best = best.max(self.catenoid_profile(z).0);
        }
        // small outward pad so the sampled maximum cannot undershoot
        best.max(0.0).sqrt() * (1.0 + 1e-3)
    }

    /// Diameter `l` of Ω. Custom domains return `None`; their diameter is
    /// measured on the built grid.
    pub fn diameter(&self) -> Option<f64> {
        let n = self.dim;
        match self.kind {
            DomainKind::Ball => Some(2.0 * self.params[0]),
            DomainKind::RoundedBox => {
                let r = self.params[n];
                let core: f64 = (0..n).map(|i| (self.params[i] - r).powi(2)).sum::<f64>().sqrt();
                Some(2.0 * (core + r))
            }
            DomainKind::Ellipsoid => Some(2.0 * self.params.iter().cloned().fold(0.0, f64::max)),
            DomainKind::CatenoidNeck => Some(self.catenoid_diameter()),
            DomainKind::CustomLevelSet => None,
        }
    }

    fn catenoid_diameter(&self) -> f64 {
        // farthest pair lies in a meridian plane on opposite sides of the axis
        let zm = self.params[1];
        let radius = |z: f64| self.catenoid_profile(z).0.max(0.0).sqrt();
        let dist = |a: f64, b: f64| ((radius(a) + radius(b)).powi(2) + (a - b).powi(2)).sqrt();
        let k = 200;
        let mut best = (0.0, -zm, zm);
        for i in 0..=k {
            for j in 0..=k {
                let a = -zm + 2.0 * zm * i as f64 / k as f64;
                let b = -zm + 2.0 * zm * j as f64 / k as f64;
                let d = dist(a, b);
                if d > best.0 {
                    best = (d, a, b);
                }
            }
        }
        let mut step = 2.0 * zm / k as f64;
        for _ in 0..60 {
            let (_, a0, b0) = best;
            for da in [-1.0, 0.0, 1.0] {
                for db in [-1.0, 0.0, 1.0] {
                    let a = (a0 + da * step).clamp(-zm, zm);
                    let b = (b0 + db * step).clamp(-zm, zm);
                    let d = dist(a, b);
                    if d > best.0 {
                        best = (d, a, b);
                    }
                }
            }
            step *= 0.7;
        }
        best.0
    }

    /// True when convexity is known from the kind alone.
    pub fn convex_by_construction(&self) -> Option<bool> {
        match self.kind {
            DomainKind::Ball | DomainKind::RoundedBox | DomainKind::Ellipsoid => Some(true),
            DomainKind::CatenoidNeck => Some(false),
            DomainKind::CustomLevelSet => None,
        }
    }

    /// Closest boundary point to `x` by Newton iteration on the Lagrange
    /// system `p − x + μ∇F(p) = 0`, `F(p) = 0`.
    pub fn project(&self, x: &[f64]) -> Result<Projection, DomainError> {
        let n = self.dim;
        let fail = || DomainError::ProjectionFailure(x[..n].to_vec());
        let mut p = [0.0; MAX_DIM];
        p[..n].copy_from_slice(&x[..n]);
        // gradient steps onto the level set for a starting point
        for _ in 0..8 {
            let f = self.level(&p);
            let (g, _) = self.level_derivatives(&p);
            let g2: f64 = g[..n].iter().map(|v| v * v).sum();
            if g2 == 0.0 || !f.is_finite() {
                return Err(fail());
            }
            for i in 0..n {
                p[i] -= f * g[i] / g2;
            }
            if f.abs() < 1e-14 * g2.sqrt() {
                break;
            }
        }
        let (g, _) = self.level_derivatives(&p);
        let g2: f64 = g[..n].iter().map(|v| v * v).sum();
        let mut mu = -(0..n).map(|i| (p[i] - x[i]) * g[i]).sum::<f64>() / g2;
        let scale = 1.0 + x[..n].iter().map(|v| v.abs()).fold(0.0, f64::max);
        let tol = 1e-12 * scale;
        let mut converged = false;
        for _ in 0..50 {
            let f = self.level(&p);
            let (g, hess) = self.level_derivatives(&p);
            let gn = g[..n].iter().map(|v| v * v).sum::<f64>().sqrt();
            let mut r = [0.0; MAX_DIM + 1];
            for i in 0..n {
                r[i] = p[i] - x[i] + mu * g[i];
            }
            r[n] = f;
            let rn = r[..n].iter().map(|v| v * v).sum::<f64>().sqrt();
            if rn < tol && f.abs() < tol * gn {
                converged = true;
                break;
            }
            let mut a = [[0.0; MAX_DIM + 2]; MAX_DIM + 1];
            for i in 0..n {
                for j in 0..n {
                    a[i][j] = mu * hess[i][j] + if i == j { 1.0 } else { 0.0 };
                }
                a[i][n] = g[i];
                a[n][i] = g[i];
                a[i][n + 1] = -r[i];
            }
            a[n][n + 1] = -r[n];
            let delta = solve_augmented(&mut a, n + 1).ok_or_else(fail)?;
            for i in 0..n {
                p[i] += delta[i];
            }
            mu += delta[n];
            if !p[..n].iter().all(|v| v.is_finite()) {
                return Err(fail());
            }
        }
        if !converged {
            return Err(fail());
        }
        let (g, _) = self.level_derivatives(&p);
        let gn = g[..n].iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut normal = [0.0; MAX_DIM];
        for i in 0..n {
            normal[i] = g[i] / gn;
        }
        let dist = (0..n).map(|i| (x[i] - p[i]).powi(2)).sum::<f64>().sqrt();
        let fx = self.level(x);
        // the offset must point along the normal, inward for inside points
        let along: f64 = (0..n).map(|i| (x[i] - p[i]) * normal[i]).sum();
        if dist > 1e-9 * scale && (along.abs() < 0.999 * dist || along * fx < 0.0) {
            return Err(fail());
        }
        let signed = if fx < 0.0 { dist } else { -dist };
        Ok(Projection { point: p, normal, signed_distance: signed })
    }
}

/// Solve the `k × k` system stored with its right-hand side in column `k`.
fn solve_augmented(a: &mut [[f64; MAX_DIM + 2]; MAX_DIM + 1], k: usize) -> Option<[f64; MAX_DIM + 1]> {
    for col in 0..k {
        let mut piv = col;
        for r in col + 1..k {
            if a[r][col].abs() > a[piv][col].abs() {
                piv = r;
            }
        }
        if a[piv][col].abs() < 1e-300 {
            return None;
        }
        a.swap(piv, col);
        for r in col + 1..k {
            let f = a[r][col] / a[col][col];
            for c in col..=k {
                a[r][c] -= f * a[col][c];
            }
        }
    }
    let mut x = [0.0; MAX_DIM + 1];
    for r in (0..k).rev() {
        let mut s = a[r][k];
        for c in r + 1..k {
            s -= a[r][c] * x[c];
        }
        x[r] = s / a[r][r];
    }
    Some(x)
}

#[derive(Clone, Copy, Debug)]
pub struct Projection {
    pub point: Vector,
    /// Outward unit normal at `point`.
    pub normal: Vector,
    /// Positive inside Ω.
    pub signed_distance: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[repr(u8)]
pub enum NodeClass {
    Interior = 0,
    BoundaryAdjacent = 1,
    Exterior = 2,
}

/// Intersection of a grid segment with ∂Ω, seen from the inside node `node`.
#[derive(Clone, Copy, Debug)]
pub struct Cut {
    pub node: u32,
    pub axis: u8,
    pub dir: i8,
    /// Cut distance as a fraction of `h`, in (0, 1].
    pub theta: f64,
    pub point: Vector,
}

/// Cartesian discretization of Ω.
///
/// Unknowns live at the inside nodes (interior and boundary-adjacent); Dirichlet
/// data lives at the cut points. Field values are stored in one array indexed
/// by *source*: inside nodes first, then cut points.
#[derive(Debug)]
pub struct Grid {
    pub dim: usize,
    pub h: f64,
    pub origin: Vector,
    pub shape: [usize; MAX_DIM],
    strides: [usize; MAX_DIM],
    class: Vec<NodeClass>,
    compact: Vec<u32>,
    nodes: Vec<usize>,
    interior: Vec<bool>,
    /// Per inside node, the source index of the neighbour at slot `2k` (−e_k)
    /// and `2k+1` (+e_k).
    neighbors: Vec<[u32; 2 * MAX_DIM]>,
    spacing: Vec<[f64; 2 * MAX_DIM]>,
    cuts: Vec<Cut>,
    pub diameter: f64,
    pub(crate) stencils: Stencils,
}

const NO_NODE: u32 = u32::MAX;

impl Grid {
    pub fn num_inside(&self) -> usize {
        self.nodes.len()
    }

    pub fn num_cuts(&self) -> usize {
        self.cuts.len()
    }

    /// Length of a source-indexed value array (per component).
    pub fn num_sources(&self) -> usize {
        self.nodes.len() + self.cuts.len()
    }

    pub fn total_nodes(&self) -> usize {
        self.class.len()
    }

    pub fn node_classes(&self) -> &[NodeClass] {
        &self.class
    }

    pub fn cuts(&self) -> &[Cut] {
        &self.cuts
    }

    pub fn is_interior(&self, i: usize) -> bool {
        self.interior[i]
    }

    pub fn class_of(&self, i: usize) -> NodeClass {
        if self.interior[i] {
            NodeClass::Interior
        } else {
            NodeClass::BoundaryAdjacent
        }
    }

    /// Grid (array) index of inside node `i`.
    pub fn grid_index(&self, i: usize) -> usize {
        self.nodes[i]
    }

    /// Inside index of an array index, if the node is inside.
    pub fn inside_index(&self, grid_index: usize) -> Option<usize> {
        match self.compact[grid_index] {
            NO_NODE => None,
            v => Some(v as usize),
        }
    }

    pub fn multi_index(&self, grid_index: usize) -> [usize; MAX_DIM] {
        let mut idx = [0; MAX_DIM];
        for k in 0..self.dim {
            idx[k] = (grid_index / self.strides[k]) % self.shape[k];
        }
        idx
    }

    pub fn array_position(&self, grid_index: usize) -> Vector {
        let idx = self.multi_index(grid_index);
        let mut x = [0.0; MAX_DIM];
        for k in 0..self.dim {
            x[k] = self.origin[k] + idx[k] as f64 * self.h;
        }
        x
    }

    pub fn position(&self, i: usize) -> Vector {
        self.array_position(self.nodes[i])
    }

    /// Position of a source (inside node or cut point).
    pub fn source_position(&self, s: usize) -> Vector {
        if s < self.nodes.len() {
            self.position(s)
        } else {
            self.cuts[s - self.nodes.len()].point
        }
    }

    /// Source index and distance of the neighbour of inside node `i` along
    /// `axis` in direction `dir` (±1).
    pub fn neighbor(&self, i: usize, axis: usize, dir: i32) -> (usize, f64) {
        let slot = 2 * axis + usize::from(dir > 0);
        (self.neighbors[i][slot] as usize, self.spacing[i][slot])
    }

    pub fn is_cut_source(&self, s: usize) -> bool {
        s >= self.nodes.len()
    }

    pub fn stencils(&self) -> &Stencils {
        &self.stencils
    }
}

/// Build the Cartesian grid of Ω with spacing `h`.
pub fn build_grid(spec: &DomainSpec, h: f64) -> Result<Grid, DomainError> {
    let n = spec.dim;
    if !(h.is_finite() && h > 0.0) {
        return Err(DomainError::TooCoarse(format!("spacing {h} is not positive")));
    }
    let (lo, hi) = spec.bounding_box();
    let l_guess = spec
        .diameter()
        .unwrap_or_else(|| (0..n).map(|k| (hi[k] - lo[k]).powi(2)).sum::<f64>().sqrt());
    if h >= l_guess / 8.0 {
        return Err(DomainError::TooCoarse(format!("h = {h} is not below l/8 = {}", l_guess / 8.0)));
    }
    let mut shape = [1usize; MAX_DIM];
    let mut strides = [0usize; MAX_DIM];
    let mut total = 1usize;
    for k in (0..n).rev() {
        let ext = hi[k] - lo[k];
        let mut s = (ext / h + 1e-9).floor() as usize + 1;
        if lo[k] + (s - 1) as f64 * h < hi[k] - 1e-12 {
            s += 1;
        }
        shape[k] = s;
        strides[k] = total;
        total = total
            .checked_mul(s)
            .filter(|t| *t < u32::MAX as usize / 2)
            .ok_or_else(|| DomainError::TooCoarse("grid too large".into()))?;
    }
    let mut origin = [0.0; MAX_DIM];
    origin[..n].copy_from_slice(&lo[..n]);

    let pos = |gi: usize| {
        let mut x = [0.0; MAX_DIM];
        for k in 0..n {
            x[k] = origin[k] + ((gi / strides[k]) % shape[k]) as f64 * h;
        }
        x
    };
    // inside test with a tiny snap so nodes numerically on ∂Ω count as outside
    let inside_at = |x: &[f64]| {
        let f = spec.level(x);
        if f >= 0.0 {
            return false;
        }
        let (g, _) = spec.level_derivatives(x);
        let gn = g[..n].iter().map(|v| v * v).sum::<f64>().sqrt();
        -f > 1e-9 * h * gn.max(f64::MIN_POSITIVE)
    };

    let mut inside = vec![false; total];
    for (gi, flag) in inside.iter_mut().enumerate() {
        *flag = inside_at(&pos(gi));
    }
    let mut compact = vec![NO_NODE; total];
    let mut nodes = Vec::new();
    for gi in 0..total {
        if inside[gi] {
            compact[gi] = nodes.len() as u32;
            nodes.push(gi);
        }
    }
    let num_inside = nodes.len();
    let mut neighbors = vec![[0u32; 2 * MAX_DIM]; num_inside];
    let mut spacing = vec![[0.0; 2 * MAX_DIM]; num_inside];
    let mut interior = vec![true; num_inside];
    let mut cuts = Vec::new();
    for (i, &gi) in nodes.iter().enumerate() {
        let x = pos(gi);
        for k in 0..n {
            let ik = (gi / strides[k]) % shape[k];
            for (side, dir) in [(0usize, -1i32), (1, 1)] {
                let nb = if dir < 0 {
                    (ik > 0).then(|| gi - strides[k])
                } else {
                    (ik + 1 < shape[k]).then(|| gi + strides[k])
                };
                let slot = 2 * k + side;
                match nb {
                    Some(nb) if inside[nb] => {
                        neighbors[i][slot] = compact[nb];
                        spacing[i][slot] = h;
                    }
                    _ => {
                        interior[i] = false;
                        let theta = cut_fraction(spec, &x, k, dir as f64, h);
                        let mut point = x;
                        point[k] += dir as f64 * theta * h;
                        neighbors[i][slot] = (num_inside + cuts.len()) as u32;
                        spacing[i][slot] = theta * h;
                        cuts.push(Cut { node: i as u32, axis: k as u8, dir: dir as i8, theta, point });
                    }
                }
            }
        }
    }
    if !interior.iter().any(|b| *b) {
        return Err(DomainError::EmptyDomain);
    }
    for k in 0..n {
        let mut seen = vec![false; shape[k]];
        for (i, &gi) in nodes.iter().enumerate() {
            if interior[i] {
                seen[(gi / strides[k]) % shape[k]] = true;
            }
        }
        let count = seen.iter().filter(|s| **s).count();
        if count < 5 {
            return Err(DomainError::TooCoarse(format!("only {count} interior nodes along axis {k}")));
        }
    }
    let mut class = vec![NodeClass::Exterior; total];
    for (i, &gi) in nodes.iter().enumerate() {
        class[gi] = if interior[i] { NodeClass::Interior } else { NodeClass::BoundaryAdjacent };
    }
    let diameter = match spec.diameter() {
        Some(l) => l,
        None => sampled_diameter(&cuts, n),
    };
    let mut grid = Grid {
        dim: n,
        h,
        origin,
        shape,
        strides,
        class,
        compact,
        nodes,
        interior,
        neighbors,
        spacing,
        cuts,
        diameter,
        stencils: Stencils::default(),
    };
    grid.stencils = Stencils::build(&grid);
    Ok(grid)
}

/// Bisection for the boundary crossing on the segment from `x` along `±e_axis`.
fn cut_fraction(spec: &DomainSpec, x: &Vector, axis: usize, dir: f64, h: f64) -> f64 {
    let at = |t: f64| {
        let mut y = *x;
        y[axis] += dir * t * h;
        spec.level(&y)
    };
    if at(1.0) < 0.0 {
        // neighbour snapped onto ∂Ω
        return 1.0;
    }
    let (mut a, mut b) = (0.0f64, 1.0f64);
    while b - a > 1e-10 * b.max(1e-300) && b - a > 1e-300 {
        let mid = 0.5 * (a + b);
        if at(mid) < 0.0 {
            a = mid;
        } else {
            b = mid;
        }
        if b < 1e-14 {
            break;
        }
    }
    (0.5 * (a + b)).clamp(f64::MIN_POSITIVE, 1.0)
}

fn sampled_diameter(cuts: &[Cut], n: usize) -> f64 {
    let stride = (cuts.len() / 1500).max(1);
    let pts: Vec<&Cut> = cuts.iter().step_by(stride).collect();
    let mut best: f64 = 0.0;
    for (a, p) in pts.iter().enumerate() {
        for q in &pts[a + 1..] {
            let d: f64 = (0..n).map(|k| (p.point[k] - q.point[k]).powi(2)).sum::<f64>();
            best = best.max(d);
        }
    }
    best.sqrt()
}

/// Curvature data at a sampled boundary point.
#[derive(Clone, Copy, Debug)]
pub struct BoundarySample {
    pub point: Vector,
    pub normal: Vector,
    /// Sum of principal curvatures, positive for convex boundaries.
    pub mean_curvature: f64,
    pub min_curvature: f64,
    pub max_curvature: f64,
}

/// Signed distance and its derivatives at every inside node.
#[derive(Debug, Clone)]
pub struct DistanceField {
    pub d: Vec<f64>,
    pub grad: Vec<Vector>,
    pub hess: Vec<Mat>,
    /// Smallest eigenvalue of `Hess d`.
    pub lambda_min: Vec<f64>,
    /// `| |Dd| − 1 |` from central differences of `d`.
    pub eikonal_error: Vec<f64>,
    /// False where a projection failed; such nodes carry the level-set
    /// estimate of `d` and no derivative data.
    pub ok: Vec<bool>,
    pub boundary: Vec<BoundarySample>,
    pub fd_step: f64,
}

impl DistanceField {
    pub fn laplacian(&self, i: usize, n: usize) -> f64 {
        (0..n).map(|k| self.hess[i][k][k]).sum()
    }
}

/// Compute `d`, `Dd`, `Hess d` at all inside nodes and curvature samples at
/// all cut points.
/// Distance to the boundary at a point with its gradient and a
/// finite-difference Hessian (step `delta`).
#[derive(Clone, Copy, Debug)]
pub struct DistanceJet {
    pub d: f64,
    pub grad: Vector,
    pub hess: Mat,
    pub eikonal_error: f64,
}

/// `Err(None)` when the centre projection fails; `Err(Some(d))` when only a
/// neighbouring projection fails.
pub fn distance_jet(spec: &DomainSpec, x: &Vector, delta: f64) -> Result<DistanceJet, Option<f64>> {
    let n = spec.dim;
    let center = spec.project(x).map_err(|_| None)?;
    let mut grad = [0.0; MAX_DIM];
    for k in 0..n {
        grad[k] = -center.normal[k];
    }
    let mut fd_grad = [0.0; MAX_DIM];
    let mut h = ZERO;
    for k in 0..n {
        let mut side = [(0.0, [0.0; MAX_DIM]); 2];
        for (s, sign) in [(0usize, -1.0), (1, 1.0)] {
            let mut y = *x;
            y[k] += sign * delta;
            let p = spec.project(&y).map_err(|_| Some(center.signed_distance))?;
            let mut g = [0.0; MAX_DIM];
            for j in 0..n {
                g[j] = -p.normal[j];
            }
            side[s] = (p.signed_distance, g);
        }
        fd_grad[k] = (side[1].0 - side[0].0) / (2.0 * delta);
        for j in 0..n {
            h[k][j] = (side[1].1[j] - side[0].1[j]) / (2.0 * delta);
        }
    }
    for a in 0..n {
        for b in a + 1..n {
            let s = 0.5 * (h[a][b] + h[b][a]);
            h[a][b] = s;
            h[b][a] = s;
        }
    }
    let eikonal_error = (fd_grad[..n].iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs();
    Ok(DistanceJet { d: center.signed_distance, grad, hess: h, eikonal_error })
}

fn j_grad_fallback(spec: &DomainSpec, x: &Vector) -> Vector {
    spec.project(x).map(|p| {
        let mut g = [0.0; MAX_DIM];
        for k in 0..spec.dim {
            g[k] = -p.normal[k];
        }
        g
    }).unwrap_or([0.0; MAX_DIM])
}

pub fn distance_field(spec: &DomainSpec, grid: &Grid) -> DistanceField {
    let n = spec.dim;
    let delta = grid.h / 8.0;
    let count = grid.num_inside();
    let mut out = DistanceField {
        d: vec![0.0; count],
        grad: vec![[0.0; MAX_DIM]; count],
        hess: vec![ZERO; count],
        lambda_min: vec![0.0; count],
        eikonal_error: vec![0.0; count],
        ok: vec![true; count],
        boundary: Vec::with_capacity(grid.num_cuts()),
        fd_step: delta,
    };
    for i in 0..count {
        let x = grid.position(i);
        match distance_jet(spec, &x, delta) {
            Ok(j) => {
                out.d[i] = j.d;
                out.grad[i] = j.grad;
                out.hess[i] = j.hess;
                out.lambda_min[i] = sym_eigen(&j.hess, n).values[n - 1];
                out.eikonal_error[i] = j.eikonal_error;
            }
            Err(Some(d)) => {
                out.ok[i] = false;
                out.d[i] = d;
                out.grad[i] = j_grad_fallback(spec, &x);
            }
            Err(None) => {
                out.ok[i] = false;
                out.d[i] = level_distance_estimate(spec, &x);
            }
        }
    }
    for c in grid.cuts() {
        out.boundary.push(boundary_sample(spec, &c.point));
    }
    out
}

fn level_distance_estimate(spec: &DomainSpec, x: &[f64]) -> f64 {
    let n = spec.dim;
    let (g, _) = spec.level_derivatives(x);
    let gn = g[..n].iter().map(|v| v * v).sum::<f64>().sqrt();
    -spec.level(x) / gn.max(1e-300)
}

/// Principal curvatures from the shape operator `P Hess F P / |∇F|`.
pub fn boundary_sample(spec: &DomainSpec, p: &Vector) -> BoundarySample {
    let n = spec.dim;
    let (g, hf) = spec.level_derivatives(p);
    let gn = g[..n].iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut nrm = [0.0; MAX_DIM];
    for i in 0..n {
        nrm[i] = g[i] / gn;
    }
    let mut proj = ZERO;
    for i in 0..n {
        for j in 0..n {
            proj[i][j] = if i == j { 1.0 } else { 0.0 } - nrm[i] * nrm[j];
        }
    }
    let mut w = ZERO;
    for i in 0..n {
        for j in 0..n {
            let mut s = 0.0;
            for a in 0..n {
                for b in 0..n {
                    s += proj[i][a] * hf[a][b] * proj[b][j];
                }
            }
            w[i][j] = s / gn;
        }
    }
    let e = sym_eigen(&w, n);
    // drop the eigenvalue belonging to the normal direction
    let mut normal_slot = 0;
    let mut best = -1.0;
    for c in 0..n {
        let dot: f64 = (0..n).map(|r| e.vectors[r][c] * nrm[r]).sum::<f64>().abs();
        if dot > best {
            best = dot;
            normal_slot = c;
        }
    }
    let mut kmin = f64::INFINITY;
    let mut kmax = f64::NEG_INFINITY;
    let mut sum = 0.0;
    for c in 0..n {
        if c != normal_slot {
            kmin = kmin.min(e.values[c]);
            kmax = kmax.max(e.values[c]);
            sum += e.values[c];
        }
    }
    BoundarySample { point: *p, normal: nrm, mean_curvature: sum, min_curvature: kmin, max_curvature: kmax }
}

/// Scalar geometry consumed by the solvability constants.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct GeometrySummary {
    pub dim: usize,
    pub diameter: f64,
    /// `None` encodes r_Ω = ∞.
    pub exterior_radius: Option<f64>,
    pub lambda_minus: f64,
    pub band_width: f64,
    pub d0_regularity: f64,
    pub mean_convex: bool,
    pub convex: bool,
    pub min_mean_curvature: f64,
    pub min_principal_curvature: f64,
    pub max_band_eikonal_error: f64,
    /// Largest Δd over band nodes; ≤ 0 up to discretization on mean convex domains.
    pub max_band_laplacian: f64,
    pub boundary_samples: usize,
    /// Set when sampling is too sparse for the reported scalars to be trusted.
    pub coarse_sampling: bool,
    pub h: f64,
}

/// Geometry summary over the band `0 < d ≤ band_width`.
pub fn geometry_summary(spec: &DomainSpec, grid: &Grid, dist: &DistanceField, band_width: f64) -> GeometrySummary {
    let n = spec.dim;
    let tol_eik = 10.0 * grid.h;
    let mut lam_min = f64::INFINITY;
    let mut max_eik: f64 = 0.0;
    let mut max_lap = f64::NEG_INFINITY;
    let mut first_fail = f64::INFINITY;
    let mut max_d: f64 = 0.0;
    let mut band_nodes = 0usize;
    for i in 0..grid.num_inside() {
        let d = dist.d[i];
        max_d = max_d.max(d);
        if !dist.ok[i] || dist.eikonal_error[i] > tol_eik {
            first_fail = first_fail.min(d);
            continue;
        }
        if d <= band_width {
            band_nodes += 1;
            lam_min = lam_min.min(dist.lambda_min[i]);
            max_eik = max_eik.max(dist.eikonal_error[i]);
            max_lap = max_lap.max(dist.laplacian(i, n));
        }
    }
    let d0_regularity = if first_fail.is_finite() { first_fail } else { max_d };
    let lambda_minus = if lam_min.is_finite() { (-lam_min).max(0.0) } else { 0.0 };
    let min_h = dist.boundary.iter().map(|b| b.mean_curvature).fold(f64::INFINITY, f64::min);
    let min_k = dist.boundary.iter().map(|b| b.min_curvature).fold(f64::INFINITY, f64::min);
    let convex = spec.convex_by_construction().unwrap_or(min_k >= -1e-6);
    let exterior_radius = if convex || min_k >= 0.0 { None } else { Some(1.0 / (-min_k)) };
    GeometrySummary {
        dim: n,
        diameter: grid.diameter,
        exterior_radius,
        lambda_minus,
        band_width,
        d0_regularity,
        mean_convex: min_h >= -1e-6,
        convex,
        min_mean_curvature: min_h,
        min_principal_curvature: min_k,
        max_band_eikonal_error: max_eik,
        max_band_laplacian: if max_lap.is_finite() { max_lap } else { 0.0 },
        boundary_samples: dist.boundary.len(),
        coarse_sampling: band_nodes < 8 || dist.boundary.len() < 16,
        h: grid.h,
    }
}

/// A domain together with its grid and distance field, shared by the solvers.
#[derive(Debug, Clone)]
pub struct Discretization {
    pub spec: DomainSpec,
    pub grid: Arc<Grid>,
}

impl Discretization {
    pub fn new(spec: DomainSpec, h: f64) -> Result<Self, DomainError> {
        let grid = Arc::new(build_grid(&spec, h)?);
        Ok(Self { spec, grid })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analytic::ExprField;

    #[test]
    fn unit_disk_grid_counts_nodes_inside() {
        let spec = DomainSpec::ball(2, 1.0).unwrap();
        let g = build_grid(&spec, 0.1).unwrap();
        let mut expected = 0;
        for i in -10i32..=10 {
            for j in -10i32..=10 {
                let (x, y) = (i as f64 * 0.1, j as f64 * 0.1);
                if x * x + y * y < 1.0 - 1e-9 {
                    expected += 1;
                }
            }
        }
        assert_eq!(g.num_inside(), expected);
        let area = std::f64::consts::PI / 0.01;
        assert!((expected as f64 - area).abs() < 4.0 * 2.0 * std::f64::consts::PI / 0.1);
        for c in g.cuts() {
            assert!(c.theta > 0.0 && c.theta <= 1.0);
            assert!(spec.level(&c.point).abs() < 1e-9);
        }
    }

    #[test]
    fn coarse_and_sharp_inputs_are_rejected() {
        let spec = DomainSpec::ball(2, 1.0).unwrap();
        assert!(matches!(build_grid(&spec, 2.5), Err(DomainError::TooCoarse(_))));
        assert!(DomainSpec::rounded_box(&[1.0, 1.0], 0.0).is_err());
        assert!(DomainSpec::catenoid_neck(0.5, 1.0).is_ok());
        assert!(DomainSpec::new(DomainKind::CatenoidNeck, 2, vec![0.5, 1.0], None).is_err());
    }

    #[test]
    fn interior_neighbours_are_inside() {
        let spec = DomainSpec::ellipsoid(&[1.0, 0.6, 0.8]).unwrap();
        let g = build_grid(&spec, 0.08).unwrap();
        for i in 0..g.num_inside() {
            if g.is_interior(i) {
                for k in 0..3 {
                    for dir in [-1, 1] {
                        let (s, sp) = g.neighbor(i, k, dir);
                        assert!(!g.is_cut_source(s));
                        assert_eq!(sp, g.h);
                    }
                }
            }
        }
    }

    #[test]
    fn level_set_derivatives_match_differences() {
        let specs = vec![
            DomainSpec::rounded_box(&[1.0, 0.7], 0.2).unwrap(),
            DomainSpec::catenoid_neck(0.5, 1.0).unwrap(),
            DomainSpec::ellipsoid(&[1.0, 0.5, 0.7]).unwrap(),
        ];
        let pts: [[f64; 4]; 3] = [[0.95, 0.62, 0.0, 0.0], [0.3, 0.2, 0.4, 0.0], [0.2, -0.3, 0.1, 0.0]];
        for (spec, x) in specs.iter().zip(pts) {
            let n = spec.dim;
            let (g, hs) = spec.level_derivatives(&x);
            let e = 1e-6;
            for k in 0..n {
                let mut a = x;
                let mut b = x;
                a[k] += e;
                b[k] -= e;
                let fd = (spec.level(&a) - spec.level(&b)) / (2.0 * e);
                assert!((fd - g[k]).abs() < 1e-6, "{:?} {k}", spec.kind);
                let (ga, _) = spec.level_derivatives(&a);
                let (gb, _) = spec.level_derivatives(&b);
                for j in 0..n {
                    assert!(((ga[j] - gb[j]) / (2.0 * e) - hs[k][j]).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn ball_distance_is_radial() {
        let spec = DomainSpec::ball(3, 1.0).unwrap();
        let g = build_grid(&spec, 0.1).unwrap();
        let dist = distance_field(&spec, &g);
        for i in 0..g.num_inside() {
            let x = g.position(i);
            let r = (x[0] * x[0] + x[1] * x[1] + x[2] * x[2]).sqrt();
            if r > 0.3 {
                assert!(dist.ok[i]);
                assert!((dist.d[i] - (1.0 - r)).abs() < 1e-10);
                // second-order differences with step h/8
                assert!((dist.lambda_min[i] + 1.0 / r).abs() < 2.0 * dist.fd_step.powi(2) / r.powi(3));
            }
        }
        let geo = geometry_summary(&spec, &g, &dist, 0.1);
        assert!(geo.convex && geo.mean_convex && geo.exterior_radius.is_none());
        assert!((geo.lambda_minus - 1.0 / 0.9).abs() < 0.01);
        assert_eq!(geo.diameter, 2.0);
    }

    #[test]
    fn catenoid_neck_is_mean_convex_but_not_convex() {
        let spec = DomainSpec::catenoid_neck(0.5, 1.0).unwrap();
        let g = build_grid(&spec, 0.05).unwrap();
        for c in g.cuts() {
            assert!(c.theta > 0.0 && c.theta <= 1.0);
        }
        let dist = distance_field(&spec, &g);
        let geo = geometry_summary(&spec, &g, &dist, 0.1);
        assert!(geo.mean_convex);
        assert!(!geo.convex);
        assert!(geo.min_mean_curvature.abs() < 5e-3, "{}", geo.min_mean_curvature);
        let eq = boundary_sample(&spec, &[0.5, 0.0, 0.0, 0.0]);
        assert!(eq.mean_curvature.abs() < 1e-12);
        assert!((eq.min_curvature + 2.0).abs() < 1e-12);
    }

    #[test]
    fn custom_level_set_matches_ball() {
        let f: SharedField = Arc::new(ExprField::parse("x^2 + y^2 - 1", 2).unwrap());
        let spec = DomainSpec::custom(f, 1.0).unwrap();
        let g = build_grid(&spec, 0.05).unwrap();
        let ball = build_grid(&DomainSpec::ball(2, 1.0).unwrap(), 0.05).unwrap();
        assert_eq!(g.num_inside(), ball.num_inside());
        assert!((g.diameter - 2.0).abs() < 0.01);
        let dist = distance_field(&spec, &g);
        let geo = geometry_summary(&spec, &g, &dist, 0.1);
        assert!(geo.convex);
    }
}
