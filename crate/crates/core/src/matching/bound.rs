//! Low-rank similarity bounds for pruned top-K retrieval.
//!
//! Template descriptors are projected onto an orthonormal basis `B` of their
//! dominant subspace. For any query row `q` and template row `t`,
//! `<q, t> <= <B'q, B't> + |q - BB'q| |t - BB't|`, so projected scores plus
//! residual norms bound every exact patch score from above.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Slack added to every bounded patch score. Covers f32 rounding in both the
/// projected and the exact GEMM.
pub(crate) const BOUND_SLACK: f32 = 1e-4;
const POWER_ITERATIONS: usize = 2;
const BASIS_SEED: u64 = 0x6770_6f73;

/// Row-major `m x k` operand, optionally read as the transpose of a stored
/// `k x m` matrix.
#[derive(Clone, Copy)]
pub(crate) struct Operand<'a> {
    data: &'a [f32],
    transposed: bool,
}

impl<'a> Operand<'a> {
    pub fn plain(data: &'a [f32]) -> Self {
        Self { data, transposed: false }
    }

    pub fn transposed(data: &'a [f32]) -> Self {
        Self { data, transposed: true }
    }

    fn strides(&self, rows: usize, cols: usize) -> (isize, isize) {
        if self.transposed {
            (1, rows as isize)
        } else {
            (cols as isize, 1)
        }
    }
}

/// `out (m x n) = a (m x k) * b (k x n)`, `out` row-major.
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: Operand, b: Operand, out: &mut [f32]) {
    assert!(a.data.len() == m * k && b.data.len() == k * n && out.len() == m * n);
    let (rsa, csa) = a.strides(m, k);
    let (rsb, csb) = b.strides(k, n);
    // SAFETY: every operand holds exactly rows x cols elements (checked
    // above) and the strides address it row-major or as a transpose.
    unsafe {
        matrixmultiply::sgemm(m, k, n, 1.0, a.data.as_ptr(), rsa, csa, b.data.as_ptr(), rsb, csb, 0.0, out.as_mut_ptr(), n as isize, 1);
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Projection {
    pub rank: usize,
    /// `rank x dim`, rows orthonormal.
    pub basis: Vec<f32>,
    /// Projected template rows, `rows x rank`.
    pub packed: Vec<f32>,
    /// Residual norm of every template row.
    pub residual: Vec<f32>,
}

/// Orthonormalized columns of a `dim x rank` row-major matrix, row-major.
fn orthonormal_columns(z: &[f32], dim: usize, rank: usize) -> Vec<f32> {
    let q = DMatrix::from_fn(dim, rank, |r, c| z[r * rank + c] as f64).qr().q();
    (0..dim * rank).map(|i| q[(i / rank, i % rank)] as f32).collect()
}

impl Projection {
    /// Randomized range finder over the packed `rows x dim` matrix.
    pub fn fit(packed: &[f32], rows: usize, dim: usize, rank: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(BASIS_SEED);
        let mut z: Vec<f32> = (0..dim * rank).map(|_| StandardNormal.sample(&mut rng)).collect();
        let mut y = vec![0f32; rows * rank];
        for _ in 0..POWER_ITERATIONS {
            let q = orthonormal_columns(&z, dim, rank);
            gemm(rows, dim, rank, Operand::plain(packed), Operand::plain(&q), &mut y);
            gemm(dim, rows, rank, Operand::transposed(packed), Operand::plain(&y), &mut z);
        }
        // stored transposed: rank x dim
        let basis_t = orthonormal_columns(&z, dim, rank);
        let basis: Vec<f32> = (0..rank * dim).map(|i| basis_t[(i % dim) * rank + i / dim]).collect();
        let (projected, residual) = project_rows(&basis, rank, packed, dim);
        Self {
            rank,
            basis,
            packed: projected,
            residual,
        }
    }

    /// Projected rows and residual norms of query descriptors.
    pub fn project(&self, rows: &[f32], dim: usize) -> (Vec<f32>, Vec<f32>) {
        project_rows(&self.basis, self.rank, rows, dim)
    }
}

const CHUNK_ROWS: usize = 256;

fn project_rows(basis: &[f32], rank: usize, rows: &[f32], dim: usize) -> (Vec<f32>, Vec<f32>) {
    let m = rows.len() / dim;
    let mut projected = vec![0f32; m * rank];
    gemm(m, dim, rank, Operand::plain(rows), Operand::transposed(basis), &mut projected);
    let mut residual = Vec::with_capacity(m);
    let mut recon = vec![0f32; CHUNK_ROWS * dim];
    for start in (0..m).step_by(CHUNK_ROWS) {
        let c = CHUNK_ROWS.min(m - start);
        let recon = &mut recon[..c * dim];
        gemm(c, rank, dim, Operand::plain(&projected[start * rank..(start + c) * rank]), Operand::plain(basis), recon);
        for (x, r) in rows[start * dim..(start + c) * dim].chunks_exact(dim).zip(recon.chunks_exact(dim)) {
            let sq: f64 = x.iter().zip(r).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum();
            residual.push(sq.sqrt() as f32);
        }
    }
    (projected, residual)
}
