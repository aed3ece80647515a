//! Dense symmetric matrices and their eigenvalues.
//!
//! The solver is the cyclic Jacobi rotation method: sweep all off-diagonal
//! pairs (p, q), each time applying the 2x2 rotation that zeroes a_pq, until
//! the total off-diagonal mass falls under a tolerance. Convergence is
//! quadratic once the matrix is near-diagonal, so the sweep budget is
//! generous in practice. Only eigenvalues are produced; the spectral
//! diagnostics downstream never need eigenvectors, and skipping their
//! accumulation keeps the inner loop tight.

use thiserror::Error;

/// Default off-diagonal convergence tolerance, relative to the Frobenius
/// norm of the input (floored at 1). Close to the double-precision floor —
/// downstream identity checks (eigenvalue variance vs. trace formulas) need
/// eigenvalues accurate to ~1e-9 absolute even on matrices with norms in the
/// hundreds.
pub const DEFAULT_EIGEN_TOL: f64 = 1e-13;

/// Hard cap on Jacobi sweeps before reporting failure.
pub const MAX_SWEEPS: usize = 100;

#[derive(Debug, Error)]
pub enum EigenError {
    #[error("matrix rows are ragged: row {row} has {found} entries, expected {expected}")]
    Ragged {
        row: usize,
        found: usize,
        expected: usize,
    },
    #[error("matrix entry ({i}, {j}) is not finite")]
    NonFinite { i: usize, j: usize },
    #[error("tolerance must be positive, got {0}")]
    BadTolerance(f64),
    #[error("Jacobi sweep budget exhausted after {sweeps} sweeps (off-diagonal mass {off:e})")]
    NoConvergence { sweeps: usize, off: f64 },
}

/// Dense symmetric matrix, stored row-major with both triangles populated.
///
/// Construction mirrors the lower triangle onto the upper one, so symmetry
/// holds exactly (bit-for-bit) no matter what the caller supplies.
#[derive(Debug, Clone, PartialEq)]
pub struct SymmetricMatrix {
    n: usize,
    data: Vec<f64>,
}

impl SymmetricMatrix {
    /// Build from full rows. Entries above the diagonal are ignored and
    /// replaced by their mirrored lower-triangle counterparts.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, EigenError> {
        let n = rows.len();
        for (i, row) in rows.iter().enumerate() {
            if row.len() != n {
                return Err(EigenError::Ragged {
                    row: i,
                    found: row.len(),
                    expected: n,
                });
            }
        }
        let mut m = SymmetricMatrix {
            n,
            data: vec![0.0; n * n],
        };
        for i in 0..n {
            for j in 0..=i {
                let v = rows[i][j];
                if !v.is_finite() {
                    return Err(EigenError::NonFinite { i, j });
                }
                m.data[i * n + j] = v;
                m.data[j * n + i] = v;
            }
        }
        Ok(m)
    }

    /// Build by evaluating `f(i, j)` on the lower triangle (i >= j).
    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self, EigenError> {
        let mut m = SymmetricMatrix {
            n,
            data: vec![0.0; n * n],
        };
        for i in 0..n {
            for j in 0..=i {
                let v = f(i, j);
                if !v.is_finite() {
                    return Err(EigenError::NonFinite { i, j });
                }
                m.data[i * n + j] = v;
                m.data[j * n + i] = v;
            }
        }
        Ok(m)
    }

    /// Gram matrix `Z Z^T` of a stack of row vectors.
    pub fn gram(rows: &[Vec<f64>]) -> Result<Self, EigenError> {
        let n = rows.len();
        if n > 0 {
            let d = rows[0].len();
            for (i, row) in rows.iter().enumerate() {
                if row.len() != d {
                    return Err(EigenError::Ragged {
                        row: i,
                        found: row.len(),
                        expected: d,
                    });
                }
            }
        }
        Self::from_fn(n, |i, j| crate::vecmath::dot(&rows[i], &rows[j]))
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn trace(&self) -> f64 {
        (0..self.n).map(|i| self.get(i, i)).sum()
    }

    /// Squared Frobenius norm, `sum of all entries squared`.
    pub fn frobenius_sq(&self) -> f64 {
        crate::vecmath::l2_norm_sq(&self.data)
    }
}

/// All eigenvalues of a symmetric matrix, sorted ascending.
///
/// `tol` is the off-diagonal convergence threshold; it is scaled by
/// `max(1, ||m||_F)` so the stopping rule is invariant under rescaling the
/// matrix. Use [`DEFAULT_EIGEN_TOL`] unless there is a reason not to.
pub fn symmetric_eigenvalues(m: &SymmetricMatrix, tol: f64) -> Result<Vec<f64>, EigenError> {
    if !(tol > 0.0) {
        return Err(EigenError::BadTolerance(tol));
    }
    let n = m.n;
    if n == 0 {
        return Ok(Vec::new());
    }
    if n == 1 {
        return Ok(vec![m.data[0]]);
    }

    let mut a = m.data.clone();
    let scale = m.frobenius_sq().sqrt().max(1.0);
    let threshold = tol * scale;
    // Convergence is judged on the *squared* off-diagonal Frobenius mass:
    // each rotation provably decreases it, and its rounding-noise floor
    // (~n^2 * (eps*scale)^2) sits far below threshold^2 even for n in the
    // hundreds, where an absolute-value sum would stall above tolerance.
    let threshold_sq = threshold * threshold;
    // Elements at or below `skip` are not worth a rotation: all of them
    // together contribute at most (n^2/2)*(threshold/n)^2 = threshold^2/2,
    // so skipping them cannot stall convergence.
    let skip = threshold / n as f64;

    let mut off_sq = off_diagonal_mass_sq(&a, n);
    // After the threshold is met, one more sweep runs: Jacobi converges
    // quadratically near the end, so the polish sweep pushes the remaining
    // off-diagonal mass toward the double-precision floor almost for free.
    let mut polish = false;
    for _sweep in 0..MAX_SWEEPS {
        if off_sq <= threshold_sq {
            if polish {
                let mut eig: Vec<f64> = (0..n).map(|i| a[i * n + i]).collect();
                eig.sort_by(|x, y| x.total_cmp(y));
                return Ok(eig);
            }
            polish = true;
        }
        for p in 0..n - 1 {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq.abs() <= skip {
                    continue;
                }
                // Rotation angle from the classic two-sided Jacobi formulas.
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = if theta.abs() > 1e150 {
                    // theta^2 would overflow; use the asymptotic 1/(2 theta).
                    0.5 / theta
                } else {
                    let sign = if theta >= 0.0 { 1.0 } else { -1.0 };
                    sign / (theta.abs() + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                let tau = s / (1.0 + c);

                a[p * n + p] -= t * apq;
                a[q * n + q] += t * apq;
                a[p * n + q] = 0.0;
                a[q * n + p] = 0.0;
                for i in 0..n {
                    if i == p || i == q {
                        continue;
                    }
                    let aip = a[i * n + p];
                    let aiq = a[i * n + q];
                    let new_ip = aip - s * (aiq + tau * aip);
                    let new_iq = aiq + s * (aip - tau * aiq);
                    a[i * n + p] = new_ip;
                    a[p * n + i] = new_ip;
                    a[i * n + q] = new_iq;
                    a[q * n + i] = new_iq;
                }
            }
        }
        off_sq = off_diagonal_mass_sq(&a, n);
    }
    Err(EigenError::NoConvergence {
        sweeps: MAX_SWEEPS,
        off: off_sq.sqrt(),
    })
}

fn off_diagonal_mass_sq(a: &[f64], n: usize) -> f64 {
    let mut sum = 0.0;
    for p in 0..n - 1 {
        for q in p + 1..n {
            let v = a[p * n + q];
            sum += v * v;
        }
    }
    sum
}
