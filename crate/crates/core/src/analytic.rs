//! Closed-form scalar functions on ℝⁿ with exact first and second derivatives.

use std::fmt::Debug;
use std::sync::Arc;

use crate::expr::{CompiledExpr, ExprError};
use crate::linalg::{Mat, MAX_DIM, ZERO};

/// A C² scalar function with analytic gradient and Hessian.
pub trait Analytic: Debug + Send + Sync {
    fn dim(&self) -> usize;
    fn value(&self, x: &[f64]) -> f64;
    fn gradient(&self, x: &[f64], out: &mut [f64]);
    fn hessian(&self, x: &[f64]) -> Mat;
    /// Human-readable description, echoed into reports.
    fn describe(&self) -> String;
}

pub type SharedField = Arc<dyn Analytic>;

/// Function given by the expression grammar.
#[derive(Clone, Debug)]
pub struct ExprField(CompiledExpr);

impl ExprField {
    pub fn parse(src: &str, dim: usize) -> Result<Self, ExprError> {
        Ok(Self(CompiledExpr::new(src, dim)?))
    }
}

impl Analytic for ExprField {
    fn dim(&self) -> usize {
        self.0.dim
    }

    fn value(&self, x: &[f64]) -> f64 {
        self.0.value(x)
    }

    fn gradient(&self, x: &[f64], out: &mut [f64]) {
        self.0.gradient(x, out)
    }

    fn hessian(&self, x: &[f64]) -> Mat {
        let mut h = ZERO;
        for i in 0..self.0.dim {
            for j in i..self.0.dim {
                let v = self.0.hessian_entry(x, i, j);
                h[i][j] = v;
                h[j][i] = v;
            }
        }
        h
    }

    fn describe(&self) -> String {
        self.0.source.clone()
    }
}

/// `a · x + b`.
#[derive(Clone, Debug)]
pub struct Affine {
    pub slope: Vec<f64>,
    pub offset: f64,
}

impl Affine {
    pub fn new(slope: Vec<f64>, offset: f64) -> Self {
        Self { slope, offset }
    }

    pub fn zero(dim: usize) -> Self {
        Self { slope: vec![0.0; dim], offset: 0.0 }
    }
}

impl Analytic for Affine {
    fn dim(&self) -> usize {
        self.slope.len()
    }

    fn value(&self, x: &[f64]) -> f64 {
        self.offset + self.slope.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
    }

    fn gradient(&self, _x: &[f64], out: &mut [f64]) {
        out[..self.slope.len()].copy_from_slice(&self.slope);
    }

    fn hessian(&self, _x: &[f64]) -> Mat {
        ZERO
    }

    fn describe(&self) -> String {
        let terms: Vec<String> = self
            .slope
            .iter()
            .enumerate()
            .map(|(i, a)| format!("{a}*x{}", i + 1))
            .collect();
        format!("{} + {}", terms.join(" + "), self.offset)
    }
}

/// Compactly supported polynomial bump `peak · (1 − |x−c|²/r²)⁴`, C² across
/// the support boundary.
#[derive(Clone, Debug)]
pub struct Bump {
    pub center: Vec<f64>,
    pub radius: f64,
    pub peak: f64,
}

impl Bump {
    fn s(&self, x: &[f64]) -> f64 {
        self.center
            .iter()
            .zip(x)
            .map(|(c, v)| (v - c) * (v - c))
            .sum::<f64>()
            / (self.radius * self.radius)
    }
}

impl Analytic for Bump {
    fn dim(&self) -> usize {
        self.center.len()
    }

    fn value(&self, x: &[f64]) -> f64 {
        let s = self.s(x);
        if s >= 1.0 {
            0.0
        } else {
            self.peak * (1.0 - s).powi(4)
        }
    }

    fn gradient(&self, x: &[f64], out: &mut [f64]) {
        let s = self.s(x);
        let r2 = self.radius * self.radius;
        for (i, o) in out.iter_mut().enumerate().take(self.dim()) {
            *o = if s >= 1.0 {
                0.0
            } else {
                -8.0 * self.peak * (1.0 - s).powi(3) * (x[i] - self.center[i]) / r2
            };
        }
    }

    fn hessian(&self, x: &[f64]) -> Mat {
        let s = self.s(x);
        let mut h = ZERO;
        if s >= 1.0 {
            return h;
        }
        let r2 = self.radius * self.radius;
        let n = self.dim();
        for i in 0..n {
            for j in 0..n {
                let di = x[i] - self.center[i];
                let dj = x[j] - self.center[j];
                let mut v = 48.0 * self.peak * (1.0 - s).powi(2) * di * dj / (r2 * r2);
                if i == j {
                    v -= 8.0 * self.peak * (1.0 - s).powi(3) / r2;
                }
                h[i][j] = v;
            }
        }
        h
    }

    fn describe(&self) -> String {
        format!("bump(center={:?}, radius={}, peak={})", self.center, self.radius, self.peak)
    }
}

/// `factor · inner`.
#[derive(Clone, Debug)]
pub struct Scaled {
    pub inner: SharedField,
    pub factor: f64,
}

impl Analytic for Scaled {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn value(&self, x: &[f64]) -> f64 {
        self.factor * self.inner.value(x)
    }

    fn gradient(&self, x: &[f64], out: &mut [f64]) {
        self.inner.gradient(x, out);
        for o in out.iter_mut().take(self.dim()) {
            *o *= self.factor;
        }
    }

    fn hessian(&self, x: &[f64]) -> Mat {
        let mut h = self.inner.hessian(x);
        for row in h.iter_mut() {
            for v in row.iter_mut() {
                *v *= self.factor;
            }
        }
        h
    }

    fn describe(&self) -> String {
        format!("{} * ({})", self.factor, self.inner.describe())
    }
}

/// Sum of fields.
#[derive(Clone, Debug)]
pub struct Sum(pub Vec<SharedField>);

impl Analytic for Sum {
    fn dim(&self) -> usize {
        self.0[0].dim()
    }

    fn value(&self, x: &[f64]) -> f64 {
        self.0.iter().map(|f| f.value(x)).sum()
    }

    fn gradient(&self, x: &[f64], out: &mut [f64]) {
        let n = self.dim();
        let mut acc = [0.0; MAX_DIM];
        let mut tmp = [0.0; MAX_DIM];
        for f in &self.0 {
            f.gradient(x, &mut tmp[..n]);
            for i in 0..n {
                acc[i] += tmp[i];
            }
        }
        out[..n].copy_from_slice(&acc[..n]);
    }

    fn hessian(&self, x: &[f64]) -> Mat {
        let mut h = ZERO;
        for f in &self.0 {
            let g = f.hessian(x);
            for i in 0..MAX_DIM {
                for j in 0..MAX_DIM {
                    h[i][j] += g[i][j];
                }
            }
        }
        h
    }

    fn describe(&self) -> String {
        self.0.iter().map(|f| f.describe()).collect::<Vec<_>>().join(" + ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn check_derivatives(f: &dyn Analytic, x: &[f64]) {
        let n = f.dim();
        let h = 1e-5;
        let mut g = vec![0.0; n];
        f.gradient(x, &mut g);
        let hess = f.hessian(x);
        for k in 0..n {
            let mut a = x.to_vec();
            let mut b = x.to_vec();
            a[k] += h;
            b[k] -= h;
            let fd = (f.value(&a) - f.value(&b)) / (2.0 * h);
            assert!((fd - g[k]).abs() < 1e-7 * (1.0 + g[k].abs()), "{fd} vs {}", g[k]);
            let mut ga = vec![0.0; n];
            let mut gb = vec![0.0; n];
            f.gradient(&a, &mut ga);
            f.gradient(&b, &mut gb);
            for j in 0..n {
                let fd2 = (ga[j] - gb[j]) / (2.0 * h);
                assert!((fd2 - hess[k][j]).abs() < 1e-6 * (1.0 + hess[k][j].abs()));
            }
        }
    }

    #[test]
    fn bump_derivatives() {
        let b = Bump { center: vec![0.1, 0.2, 0.0], radius: 0.5, peak: 3.0 };
        check_derivatives(&b, &[0.2, 0.35, -0.1]);
        assert_eq!(b.value(&[2.0, 0.0, 0.0]), 0.0);
        assert!((b.value(&[0.1, 0.2, 0.0]) - 3.0).abs() < 1e-15);
    }

    #[test]
    fn composite_fields() {
        let e: SharedField = Arc::new(ExprField::parse("x*y + sin(y)", 2).unwrap());
        let a: SharedField = Arc::new(Affine::new(vec![0.5, -1.0], 2.0));
        let s = Sum(vec![e.clone(), Arc::new(Scaled { inner: a, factor: 3.0 })]);
        check_derivatives(&s, &[0.3, -0.4]);
        check_derivatives(e.as_ref(), &[0.3, -0.4]);
    }
}
