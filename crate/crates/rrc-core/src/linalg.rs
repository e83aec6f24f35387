//! Thin wrappers around the sparse direct solver so the rest of the crate
//! never touches solver internals directly.

use std::cell::Cell;
use std::sync::Once;

use faer::prelude::*;
use faer::sparse::{SparseColMat, Triplet};

use crate::error::{Error, Result};

pub use faer::Mat;

static SOLVER_INIT: Once = Once::new();

thread_local! {
    /// The factorization below contains the backend's zero-pivot panic;
    /// while it is armed, the panic hook stays quiet for this thread.
    static SUPPRESS_PANIC_OUTPUT: Cell<bool> = const { Cell::new(false) };
}

/// Force the backend to run sequentially (parallelism in this crate happens
/// across destinations; a single-threaded factorization keeps results
/// byte-stable regardless of thread count) and install a panic hook that
/// stays silent for panics we contain.
fn init_solver() {
    SOLVER_INIT.call_once(|| {
        faer::set_global_parallelism(faer::Par::Seq);
        let prev = std::panic::take_hook();
        std::panic::set_hook(Box::new(move |info| {
            if !SUPPRESS_PANIC_OUTPUT.with(|s| s.get()) {
                prev(info);
            }
        }));
    });
}

/// Square sparse matrix in triplet form. Duplicate entries are not allowed.
#[derive(Debug, Clone)]
pub struct Coo {
    pub n: usize,
    pub entries: Vec<(usize, usize, f64)>,
}

impl Coo {
    pub fn new(n: usize) -> Self {
        Coo {
            n,
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, row: usize, col: usize, value: f64) {
        debug_assert!(row < self.n && col < self.n);
        self.entries.push((row, col, value));
    }

    /// y = A x
    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        for &(r, c, v) in &self.entries {
            y[r] += v * x[c];
        }
        y
    }

    /// Y = A X for a dense block of right-hand sides.
    pub fn mul_mat(&self, x: &Mat<f64>) -> Mat<f64> {
        let mut y = Mat::zeros(self.n, x.ncols());
        for &(r, c, v) in &self.entries {
            for j in 0..x.ncols() {
                y[(r, j)] += v * x[(c, j)];
            }
        }
        y
    }
}

/// LU factorization of `I - Q` for a sparse `Q`, reusable over many
/// right-hand sides.
pub struct SparseLu {
    n: usize,
    lu: faer::sparse::linalg::solvers::Lu<usize, f64>,
}

impl SparseLu {
    /// Factorizes `I - q`. Fails when the matrix is singular (e.g. the
    /// transition weights admit a recurrent class).
    pub fn identity_minus(q: &Coo) -> Result<SparseLu> {
        init_solver();
        let n = q.n;
        let mut triplets: Vec<Triplet<usize, usize, f64>> = Vec::with_capacity(q.entries.len() + n);
        for i in 0..n {
            triplets.push(Triplet::new(i, i, 1.0));
        }
        // Duplicate triplets are summed, so diagonal entries of Q simply
        // fold into the identity part.
        for &(r, c, v) in &q.entries {
            triplets.push(Triplet::new(r, c, -v));
        }
        let mat = SparseColMat::<usize, f64>::try_new_from_triplets(n, n, &triplets)
            .map_err(|e| Error::LinearSolve(format!("building sparse matrix: {e:?}")))?;
        // The backend signals an exactly-zero pivot by panicking rather than
        // returning its singularity error; contain it quietly.
        SUPPRESS_PANIC_OUTPUT.with(|s| s.set(true));
        let factored = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| mat.sp_lu()));
        SUPPRESS_PANIC_OUTPUT.with(|s| s.set(false));
        let lu = factored
            .map_err(|_| Error::LinearSolve("LU factorization failed: zero pivot (singular)".into()))?
            .map_err(|e| Error::LinearSolve(format!("LU factorization failed: {e:?}")))?;
        Ok(SparseLu { n, lu })
    }

    pub fn solve_vec(&self, b: &[f64]) -> Vec<f64> {
        let mut rhs = Mat::zeros(self.n, 1);
        for (i, &bi) in b.iter().enumerate() {
            rhs[(i, 0)] = bi;
        }
        let x = self.lu.solve(&rhs);
        (0..self.n).map(|i| x[(i, 0)]).collect()
    }

    pub fn solve_mat(&self, b: &Mat<f64>) -> Mat<f64> {
        self.lu.solve(b)
    }
}

/// Inverts a small dense symmetric matrix (row-major) by Gauss-Jordan with
/// partial pivoting. Returns `None` when the matrix is numerically singular.
/// Used for the standard-error diagnostic only.
pub fn invert_small(a: &[f64], n: usize) -> Option<Vec<f64>> {
    assert_eq!(a.len(), n * n);
    let mut m = a.to_vec();
    let mut inv = vec![0.0; n * n];
    for i in 0..n {
        inv[i * n + i] = 1.0;
    }
    for col in 0..n {
        let mut piv = col;
        for r in col + 1..n {
            if m[r * n + col].abs() > m[piv * n + col].abs() {
                piv = r;
            }
        }
        if m[piv * n + col].abs() < 1e-300 {
            return None;
        }
        if piv != col {
            for j in 0..n {
                m.swap(col * n + j, piv * n + j);
                inv.swap(col * n + j, piv * n + j);
            }
        }
        let d = m[col * n + col];
        for j in 0..n {
            m[col * n + j] /= d;
            inv[col * n + j] /= d;
        }
        for r in 0..n {
            if r == col {
                continue;
            }
            let f = m[r * n + col];
            if f == 0.0 {
                continue;
            }
            for j in 0..n {
                m[r * n + j] -= f * m[col * n + j];
                inv[r * n + j] -= f * inv[col * n + j];
            }
        }
    }
    Some(inv)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lu_solves_small_system() {
        // I - Q with Q = [[0, .5], [0, 0]]
        let mut q = Coo::new(2);
        q.push(0, 1, 0.5);
        let lu = SparseLu::identity_minus(&q).unwrap();
        let x = lu.solve_vec(&[0.0, 1.0]);
        assert!((x[0] - 0.5).abs() < 1e-14);
        assert!((x[1] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn singular_matrix_is_rejected_or_detected() {
        // Q = permutation cycle of size 2 => I - Q singular.
        let mut q = Coo::new(2);
        q.push(0, 1, 1.0);
        q.push(1, 0, 1.0);
        match SparseLu::identity_minus(&q) {
            Err(_) => {}
            Ok(lu) => {
                // Some pivoting implementations factor singular matrices;
                // the residual must then expose the failure.
                let x = lu.solve_vec(&[1.0, 0.0]);
                let r0 = x[0] - x[1] - 1.0;
                let r1 = x[1] - x[0];
                assert!(
                    !(r0.abs() < 1e-8 && r1.abs() < 1e-8) || x.iter().any(|v| !v.is_finite())
                );
            }
        }
    }

    #[test]
    fn invert_small_roundtrip() {
        let a = vec![2.0, 1.0, 1.0, 3.0];
        let inv = invert_small(&a, 2).unwrap();
        // A * A^-1 = I
        let prod = [
            a[0] * inv[0] + a[1] * inv[2],
            a[0] * inv[1] + a[1] * inv[3],
            a[2] * inv[0] + a[3] * inv[2],
            a[2] * inv[1] + a[3] * inv[3],
        ];
        assert!((prod[0] - 1.0).abs() < 1e-12);
        assert!(prod[1].abs() < 1e-12);
        assert!(prod[2].abs() < 1e-12);
        assert!((prod[3] - 1.0).abs() < 1e-12);
    }
}
