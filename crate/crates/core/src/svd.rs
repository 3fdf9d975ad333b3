//! Truncated SVD through a symmetric eigen-decomposition of the smaller Gram
//! matrix (`V Vᵀ` when `n <= m`, otherwise `Vᵀ V`), solved with cyclic
//! Jacobi rotations.

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Sweep cap for the Jacobi solver.
pub const MAX_SWEEPS: usize = 100;

/// Eigenvalues (descending) and unit eigenvectors (as columns) of a
/// symmetric matrix.
pub fn symmetric_eigen(a: &Matrix) -> Result<(Vec<f64>, Matrix)> {
    let n = a.rows();
    debug_assert_eq!(n, a.cols());
    let mut a = a.clone();
    let mut vecs = Matrix::identity(n);
    let scale = a.as_slice().iter().map(|x| x * x).sum::<f64>().sqrt();

    let mut converged = n < 2 || scale == 0.0;
    for _ in 0..MAX_SWEEPS {
        if converged {
            break;
        }
        let off: f64 = (0..n)
            .flat_map(|p| (0..n).filter(move |&q| q != p).map(move |q| (p, q)))
            .map(|(p, q)| a.get(p, q) * a.get(p, q))
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * scale {
            converged = true;
            break;
        }
        for p in 0..n - 1 {
            for q in p + 1..n {
                let apq = a.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let theta = (a.get(q, q) - a.get(p, p)) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                rotate(&mut a, &mut vecs, p, q, c, s);
            }
        }
    }
    if !converged {
        return Err(Error::SvdNotConverged { cap: MAX_SWEEPS });
    }

    let mut idx: Vec<usize> = (0..n).collect();
    // stable: equal eigenvalues keep their index order
    idx.sort_by(|&i, &j| a.get(j, j).total_cmp(&a.get(i, i)));
    let values = idx.iter().map(|&i| a.get(i, i)).collect();
    let mut sorted = Matrix::zeros(n, n);
    for (k, &i) in idx.iter().enumerate() {
        for r in 0..n {
            sorted.set(r, k, vecs.get(r, i));
        }
    }
    Ok((values, sorted))
}

fn rotate(a: &mut Matrix, v: &mut Matrix, p: usize, q: usize, c: f64, s: f64) {
    let n = a.rows();
    for k in 0..n {
        let akp = a.get(k, p);
        let akq = a.get(k, q);
        a.set(k, p, c * akp - s * akq);
        a.set(k, q, s * akp + c * akq);
    }
    for k in 0..n {
        let apk = a.get(p, k);
        let aqk = a.get(q, k);
        a.set(p, k, c * apk - s * aqk);
        a.set(q, k, s * apk + c * aqk);
    }
    for k in 0..n {
        let vkp = v.get(k, p);
        let vkq = v.get(k, q);
        v.set(k, p, c * vkp - s * vkq);
        v.set(k, q, s * vkp + c * vkq);
    }
}

/// `U_r Σ_r` for the top `rank` singular triplets of `v`, columns ordered by
/// non-increasing singular value. Each column is signed so that its
/// largest-magnitude entry (earliest on ties) is nonnegative.
pub fn left_embeddings(v: &Matrix, rank: usize) -> Result<Matrix> {
    let (n, m) = v.shape();
    if rank == 0 || rank > n.min(m) {
        return Err(Error::invalid(format!(
            "rank {rank} outside 1..={} for a {n}x{m} profile",
            n.min(m)
        )));
    }
    let mut emb = Matrix::zeros(n, rank);
    if n <= m {
        let gram = v.matmul(&v.transpose());
        let (vals, vecs) = symmetric_eigen(&gram)?;
        for k in 0..rank {
            let sigma = vals[k].max(0.0).sqrt();
            for i in 0..n {
                emb.set(i, k, vecs.get(i, k) * sigma);
            }
        }
    } else {
        let gram = v.transpose().matmul(v);
        let (_, vecs) = symmetric_eigen(&gram)?;
        let mut right = Matrix::zeros(m, rank);
        for k in 0..rank {
            for j in 0..m {
                right.set(j, k, vecs.get(j, k));
            }
        }
        emb = v.matmul(&right);
    }
    for k in 0..rank {
        let mut lead = 0;
        for i in 1..n {
            if emb.get(i, k).abs() > emb.get(lead, k).abs() {
                lead = i;
            }
        }
        if emb.get(lead, k) < 0.0 {
            for i in 0..n {
                emb.set(i, k, -emb.get(i, k));
            }
        }
    }
    Ok(emb)
}
