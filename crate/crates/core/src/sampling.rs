//! Random matrices with prescribed singular values.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::linalg::{Mat, Vector, MAX_DIM, ZERO};

/// Haar-distributed `k × k` orthogonal matrix: Gram-Schmidt on a Gaussian
/// matrix, which matches QR with the sign of `diag R` fixed positive.
pub fn haar_orthogonal<R: Rng>(k: usize, rng: &mut R) -> Mat {
    loop {
        let mut q = ZERO;
        for c in 0..k {
            for r in 0..k {
                q[r][c] = rng.sample::<f64, _>(StandardNormal);
            }
        }
        let mut ok = true;
        for c in 0..k {
            for p in 0..c {
                let dot: f64 = (0..k).map(|r| q[r][c] * q[r][p]).sum();
                for r in 0..k {
                    q[r][c] -= dot * q[r][p];
                }
            }
            let nrm = (0..k).map(|r| q[r][c] * q[r][c]).sum::<f64>().sqrt();
            if nrm < 1e-8 {
                ok = false;
                break;
            }
            for r in 0..k {
                q[r][c] /= nrm;
            }
        }
        if ok {
            return q;
        }
    }
}

pub fn unit_vector<R: Rng>(k: usize, rng: &mut R) -> Vector {
    let q = haar_orthogonal(k, rng);
    let mut v = [0.0; MAX_DIM];
    for r in 0..k {
        v[r] = q[r][0];
    }
    v
}

/// `n × m` matrix `U Σ Vᵀ` stored as `out[i][α]`, with the first
/// `min(n, m)` singular values taken from `sv`.
pub fn with_singular_values<R: Rng>(n: usize, m: usize, sv: &[f64], rng: &mut R) -> Mat {
    let u = haar_orthogonal(n, rng);
    let v = haar_orthogonal(m, rng);
    let mut out = ZERO;
    for i in 0..n {
        for a in 0..m {
            let mut s = 0.0;
            for (k, &sk) in sv.iter().enumerate().take(n.min(m)) {
                s += u[i][k] * sk * v[a][k];
            }
            out[i][a] = s;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::singular_values;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn orthogonal_and_singular_values_reproduced() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let q = haar_orthogonal(4, &mut rng);
        for a in 0..4 {
            for b in 0..4 {
                let d: f64 = (0..4).map(|r| q[r][a] * q[r][b]).sum();
                assert!((d - if a == b { 1.0 } else { 0.0 }).abs() < 1e-13);
            }
        }
        let s = with_singular_values(3, 2, &[2.5, 0.3], &mut rng);
        let sv = singular_values(&s, 3, 2);
        assert!((sv[0] - 2.5).abs() < 1e-12 && (sv[1] - 0.3).abs() < 1e-12 && sv[2] == 0.0);
    }
}
