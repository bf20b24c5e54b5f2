//! Small dense kernels: Cholesky with rank termination, triangular inverse and
//! SPD solves. Matrices are row-major `Vec<f64>` of size `n * n`.

/// Outcome of a Cholesky factorization that stops at the first pivot whose
/// residual falls under the rank threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct Cholesky {
    pub n: usize,
    /// Row-major lower factor; only the leading `rank x rank` block is valid.
    pub lower: Vec<f64>,
    pub rank: usize,
    /// Residual at the terminating pivot (if the factorization stopped early).
    pub stop_residual: Option<f64>,
}

/// Factorizes the symmetric matrix `a` (row-major, `n x n`).
///
/// Pivot `k` is accepted when its residual is at least `tol * scale(k)`,
/// where `scale(k)` is supplied by the caller. The first pivot below that
/// threshold ends the factorization and fixes `rank = k`.
pub fn cholesky_until<S: Fn(usize) -> f64>(a: &[f64], n: usize, tol: f64, scale: S) -> Cholesky {
    assert_eq!(a.len(), n * n);
    let mut l = vec![0.0; n * n];
    for k in 0..n {
        let mut d = a[k * n + k];
        for j in 0..k {
            d -= l[k * n + j] * l[k * n + j];
        }
        if !(d >= tol * scale(k)) {
            return Cholesky {
                n,
                lower: l,
                rank: k,
                stop_residual: Some(d),
            };
        }
        let dk = d.sqrt();
        l[k * n + k] = dk;
        for i in (k + 1)..n {
            let mut s = a[i * n + k];
            for j in 0..k {
                s -= l[i * n + j] * l[k * n + j];
            }
            l[i * n + k] = s / dk;
        }
    }
    Cholesky {
        n,
        lower: l,
        rank: n,
        stop_residual: None,
    }
}

impl Cholesky {
    /// Inverse of the leading `rank x rank` lower factor, row-major.
    pub fn lower_inverse(&self) -> Vec<f64> {
        let (n, r) = (self.n, self.rank);
        let mut inv = vec![0.0; r * r];
        for i in 0..r {
            inv[i * r + i] = 1.0 / self.lower[i * n + i];
            for j in 0..i {
                let mut s = 0.0;
                for k in j..i {
                    s += self.lower[i * n + k] * inv[k * r + j];
                }
                inv[i * r + j] = -s / self.lower[i * n + i];
            }
        }
        inv
    }

    /// Solves `A x = b` with the leading `rank x rank` block.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let (n, r) = (self.n, self.rank);
        let mut y = vec![0.0; r];
        for i in 0..r {
            let mut s = b[i];
            for j in 0..i {
                s -= self.lower[i * n + j] * y[j];
            }
            y[i] = s / self.lower[i * n + i];
        }
        for i in (0..r).rev() {
            let mut s = y[i];
            for j in (i + 1)..r {
                s -= self.lower[j * n + i] * y[j];
            }
            y[i] = s / self.lower[i * n + i];
        }
        y
    }
}
