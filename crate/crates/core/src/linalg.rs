//! Fixed-capacity dense kernels for the per-point geometry.
//!
//! Every matrix handled pointwise in this crate is at most `MAX_DIM × MAX_DIM`
//! (domain dimension and codimension are both capped), so the kernels work on
//! stack arrays with a runtime size `k ≤ MAX_DIM`.

/// Largest supported domain dimension and codimension.
pub const MAX_DIM: usize = 4;

pub type Mat = [[f64; MAX_DIM]; MAX_DIM];
pub type Vector = [f64; MAX_DIM];

pub const ZERO: Mat = [[0.0; MAX_DIM]; MAX_DIM];

pub fn identity(k: usize) -> Mat {
    let mut a = ZERO;
    for (i, row) in a.iter_mut().enumerate().take(k) {
        row[i] = 1.0;
    }
    a
}

pub fn matmul(a: &Mat, b: &Mat, k: usize) -> Mat {
    let mut c = ZERO;
    for i in 0..k {
        for j in 0..k {
            let mut s = 0.0;
            for l in 0..k {
                s += a[i][l] * b[l][j];
            }
            c[i][j] = s;
        }
    }
    c
}

pub fn transpose(a: &Mat) -> Mat {
    let mut t = ZERO;
    for i in 0..MAX_DIM {
        for j in 0..MAX_DIM {
            t[j][i] = a[i][j];
        }
    }
    t
}

/// `a a^T` for an `rows × cols` block stored in the top-left corner.
pub fn gram_rows(a: &Mat, rows: usize, cols: usize) -> Mat {
    let mut g = ZERO;
    for i in 0..rows {
        for j in i..rows {
            let mut s = 0.0;
            for c in 0..cols {
                s += a[i][c] * a[j][c];
            }
            g[i][j] = s;
            g[j][i] = s;
        }
    }
    g
}

/// Determinant by Gaussian elimination with partial pivoting.
pub fn det(a: &Mat, k: usize) -> f64 {
    let mut m = *a;
    let mut d = 1.0;
    for col in 0..k {
        let mut piv = col;
        for r in col + 1..k {
            if m[r][col].abs() > m[piv][col].abs() {
                piv = r;
            }
        }
        if m[piv][col] == 0.0 {
            return 0.0;
        }
        if piv != col {
            m.swap(piv, col);
            d = -d;
        }
        d *= m[col][col];
        for r in col + 1..k {
            let f = m[r][col] / m[col][col];
            for c in col..k {
                m[r][c] -= f * m[col][c];
            }
        }
    }
    d
}

/// Inverse by Gauss-Jordan elimination. Returns `None` for a singular input.
pub fn inverse(a: &Mat, k: usize) -> Option<Mat> {
    let mut m = *a;
    let mut inv = identity(k);
    for col in 0..k {
        let mut piv = col;
        for r in col + 1..k {
            if m[r][col].abs() > m[piv][col].abs() {
                piv = r;
            }
        }
        if m[piv][col] == 0.0 || !m[piv][col].is_finite() {
            return None;
        }
        m.swap(piv, col);
        inv.swap(piv, col);
        let p = 1.0 / m[col][col];
        for c in 0..k {
            m[col][c] *= p;
            inv[col][c] *= p;
        }
        for r in 0..k {
            if r != col {
                let f = m[r][col];
                if f != 0.0 {
                    for c in 0..k {
                        m[r][c] -= f * m[col][c];
                        inv[r][c] -= f * inv[col][c];
                    }
                }
            }
        }
    }
    Some(inv)
}

/// Inverse of a symmetric positive definite matrix via Cholesky.
///
/// Used on the hot path for metrics `g ≥ I`, which are always SPD.
pub fn spd_inverse(a: &Mat, k: usize) -> Option<Mat> {
    let mut l = ZERO;
    for i in 0..k {
        for j in 0..=i {
            let mut s = a[i][j];
            for p in 0..j {
                s -= l[i][p] * l[j][p];
            }
            if i == j {
                if s <= 0.0 || !s.is_finite() {
                    return None;
                }
                l[i][i] = s.sqrt();
            } else {
                l[i][j] = s / l[j][j];
            }
        }
    }
    // inverse of L (lower triangular)
    let mut li = ZERO;
    for i in 0..k {
        li[i][i] = 1.0 / l[i][i];
        for j in 0..i {
            let mut s = 0.0;
            for p in j..i {
                s -= l[i][p] * li[p][j];
            }
            li[i][j] = s / l[i][i];
        }
    }
    let mut inv = ZERO;
    for i in 0..k {
        for j in 0..=i {
            let mut s = 0.0;
            for p in i..k {
                s += li[p][i] * li[p][j];
            }
            inv[i][j] = s;
            inv[j][i] = s;
        }
    }
    Some(inv)
}

/// Symmetric eigen-decomposition by cyclic Jacobi rotations.
#[derive(Clone, Copy, Debug)]
pub struct SymEigen {
    /// Eigenvalues sorted descending.
    pub values: Vector,
    /// Column `c` of `vectors` is the unit eigenvector of `values[c]`.
    pub vectors: Mat,
}

pub fn sym_eigen(a: &Mat, k: usize) -> SymEigen {
    let mut m = *a;
    let mut v = identity(k);
    let scale: f64 = (0..k)
        .flat_map(|i| (0..k).map(move |j| (i, j)))
        .map(|(i, j)| a[i][j] * a[i][j])
        .sum::<f64>()
        .sqrt();
    let tol = 1e-15 * scale.max(f64::MIN_POSITIVE);
    for _sweep in 0..64 {
        let off: f64 = (0..k)
            .flat_map(|i| (i + 1..k).map(move |j| (i, j)))
            .map(|(i, j)| m[i][j] * m[i][j])
            .sum::<f64>()
            .sqrt();
        if off <= tol {
            break;
        }
        for p in 0..k {
            for q in p + 1..k {
                let apq = m[p][q];
                if apq.abs() <= f64::MIN_POSITIVE {
                    continue;
                }
                let theta = (m[q][q] - m[p][p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for r in 0..k {
                    let mrp = m[r][p];
                    let mrq = m[r][q];
                    m[r][p] = c * mrp - s * mrq;
                    m[r][q] = s * mrp + c * mrq;
                }
                for r in 0..k {
                    let mpr = m[p][r];
                    let mqr = m[q][r];
                    m[p][r] = c * mpr - s * mqr;
                    m[q][r] = s * mpr + c * mqr;
                }
                for r in 0..k {
                    let vrp = v[r][p];
                    let vrq = v[r][q];
                    v[r][p] = c * vrp - s * vrq;
                    v[r][q] = s * vrp + c * vrq;
                }
            }
        }
    }
    let mut order: [usize; MAX_DIM] = [0, 1, 2, 3];
    order[..k].sort_by(|&x, &y| m[y][y].partial_cmp(&m[x][x]).unwrap_or(std::cmp::Ordering::Equal));
    let mut values = [0.0; MAX_DIM];
    let mut vectors = ZERO;
    for (c, &o) in order.iter().enumerate().take(k) {
        values[c] = m[o][o];
        for r in 0..k {
            vectors[r][c] = v[r][o];
        }
    }
    SymEigen { values, vectors }
}

/// Singular values of an `rows × cols` block, from the `rows × rows` Gram
/// matrix. Returns `rows` values sorted descending, zero-padded past
/// `min(rows, cols)`.
pub fn singular_values(a: &Mat, rows: usize, cols: usize) -> Vector {
    let e = sym_eigen(&gram_rows(a, rows, cols), rows);
    let mut s = [0.0; MAX_DIM];
    for i in 0..rows {
        s[i] = if i < cols { e.values[i].max(0.0).sqrt() } else { 0.0 };
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn from_rows(rows: &[&[f64]]) -> Mat {
        let mut a = ZERO;
        for (i, r) in rows.iter().enumerate() {
            for (j, v) in r.iter().enumerate() {
                a[i][j] = *v;
            }
        }
        a
    }

    #[test]
    fn det_and_inverse_agree() {
        let a = from_rows(&[&[4.0, 1.0, 0.5], &[1.0, 3.0, 0.2], &[0.5, 0.2, 2.0]]);
        let d = det(&a, 3);
        let inv = inverse(&a, 3).unwrap();
        let p = matmul(&a, &inv, 3);
        for i in 0..3 {
            for j in 0..3 {
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((p[i][j] - e).abs() < 1e-14);
            }
        }
        let chol = spd_inverse(&a, 3).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert!((chol[i][j] - inv[i][j]).abs() < 1e-14);
            }
        }
        assert!((d * det(&inv, 3) - 1.0).abs() < 1e-13);
    }

    #[test]
    fn jacobi_recovers_diagonal_and_rotations() {
        let a = from_rows(&[&[2.0, 1.0], &[1.0, 2.0]]);
        let e = sym_eigen(&a, 2);
        assert!((e.values[0] - 3.0).abs() < 1e-14);
        assert!((e.values[1] - 1.0).abs() < 1e-14);
        let v0 = [e.vectors[0][0], e.vectors[1][0]];
        assert!((v0[0].abs() - v0[1].abs()).abs() < 1e-14);
    }

    #[test]
    fn singular_values_of_rectangular_block() {
        // 2 × 1 column (1, 0): single nonzero singular value 1
        let a = from_rows(&[&[1.0], &[0.0]]);
        let s = singular_values(&a, 2, 1);
        assert_eq!(s[1], 0.0);
        assert!((s[0] - 1.0).abs() < 1e-15);
        let b = from_rows(&[&[2.0, 0.0], &[0.0, 0.3]]);
        let s = singular_values(&b, 2, 2);
        assert!((s[0] - 2.0).abs() < 1e-14 && (s[1] - 0.3).abs() < 1e-14);
    }

    #[test]
    fn spd_inverse_rejects_indefinite() {
        let a = from_rows(&[&[1.0, 2.0], &[2.0, 1.0]]);
        assert!(spd_inverse(&a, 2).is_none());
    }
}
