//! Largest eigenpairs of a symmetric operator by Lanczos iteration with full
//! reorthogonalization.

use faer::Mat;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg;

/// Converged top eigenpairs, eigenvalues descending.
#[derive(Debug, Clone)]
pub struct TopEigen {
    pub values: Vec<f64>,
    /// `n × k`, column `i` belongs to `values[i]`.
    pub vectors: Mat<f64>,
    pub iterations: usize,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Computes the `k` largest eigenpairs of the `n × n` symmetric operator
/// `apply(x, y)` (which must write `A x` into `y`) to relative residual `tol`.
pub fn top_eigenpairs<F>(apply: F, n: usize, k: usize, tol: f64, seed: u64) -> Result<TopEigen>
where
    F: Fn(&[f64], &mut [f64]),
{
    if k == 0 || k > n {
        return Err(Error::domain(format!("cannot extract {k} eigenpairs from dimension {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut q: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    let norm = dot(&q, &q).sqrt();
    q.iter_mut().for_each(|v| *v /= norm);

    let mut basis: Vec<Vec<f64>> = vec![q];
    let mut alphas: Vec<f64> = Vec::new();
    let mut betas: Vec<f64> = Vec::new();
    let mut w = vec![0.0; n];
    let mut next_check = (2 * k + 20).min(n);

    loop {
        let j = basis.len() - 1;
        apply(&basis[j], &mut w);
        let a = dot(&w, &basis[j]);
        alphas.push(a);
        // Two passes of classical Gram-Schmidt against the whole basis.
        for _ in 0..2 {
            for b in &basis {
                let c = dot(&w, b);
                w.iter_mut().zip(b).for_each(|(x, y)| *x -= c * y);
            }
        }
        let beta = dot(&w, &w).sqrt();
        let m = alphas.len();

        let exhausted = m == n || beta <= 1e-14 * alphas.iter().map(|x| x.abs()).fold(0.0, f64::max).max(1e-300);
        if m >= next_check || exhausted {
            let t = Mat::from_fn(m, m, |i, jj| {
                if i == jj {
                    alphas[i]
                } else if i + 1 == jj {
                    betas[i]
                } else if jj + 1 == i {
                    betas[jj]
                } else {
                    0.0
                }
            });
            let (theta, s) = linalg::sym_eigen(t.as_ref())?;
            let kk = k.min(m);
            let scale = theta[0].abs().max(1e-300);
            let converged = (0..kk).all(|i| (beta * s[(m - 1, i)]).abs() <= tol * scale);
            if (converged && kk == k) || exhausted {
                if kk < k {
                    return Err(Error::Eigensolver(format!(
                        "Krylov space exhausted after {m} steps with {kk} of {k} eigenpairs"
                    )));
                }
                let vectors = Mat::from_fn(n, k, |r, i| (0..m).map(|c| basis[c][r] * s[(c, i)]).sum());
                return Ok(TopEigen { values: theta[..k].to_vec(), vectors, iterations: m });
            }
            next_check = (next_check + k + 20).min(n);
        }
        betas.push(beta);
        let next: Vec<f64> = w.iter().map(|x| x / beta).collect();
        basis.push(next);
    }
}

/// Top `k` eigenpairs of a dense symmetric matrix.
pub fn top_eigenpairs_dense(m: &Mat<f64>, k: usize, tol: f64, seed: u64) -> Result<TopEigen> {
    let n = m.nrows();
    top_eigenpairs(
        |x, y| {
            y.iter_mut().for_each(|v| *v = 0.0);
            for (j, xj) in x.iter().enumerate() {
                if *xj != 0.0 {
                    y.iter_mut().zip(m.col_as_slice(j)).for_each(|(yi, mij)| *yi += mij * xj);
                }
            }
        },
        n,
        k,
        tol,
        seed,
    )
}
