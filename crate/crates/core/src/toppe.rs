//! Topology-aware positional encoding from the normalized Laplacian of the fused
//! connectivity.

use crate::diffengine::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Degrees below this mark an isolated node.
pub const DEGREE_GUARD: f64 = 1e-12;
pub const DEFAULT_ZERO_THRESHOLD: f64 = 1e-8;
const SIGN_TOLERANCE: f64 = 1e-8;
const MAX_SWEEPS: usize = 100;
const OFF_DIAGONAL_TOLERANCE: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct LaplacianPE {
    /// `[N, d_pe]`, zero-padded when fewer nonzero eigenvalues exist.
    pub coordinates: Tensor,
    /// Selected eigenvalues, ascending (at most `d_pe`).
    pub eigenvalues: Vec<f64>,
}

fn square_dim(a: &Tensor) -> Result<usize> {
    match a.shape() {
        [n, m] if n == m => Ok(*n),
        s => Err(Error::Shape(format!("expected a square matrix, got {s:?}"))),
    }
}

pub fn degree_matrix(a: &Tensor) -> Result<Vec<f64>> {
    let n = square_dim(a)?;
    Ok((0..n).map(|i| a.row(i).iter().sum()).collect())
}

/// `I - D^{-1/2} A D^{-1/2}`; isolated nodes get `L_ii = 1`.
pub fn normalized_laplacian(a: &Tensor) -> Result<Tensor> {
    let n = square_dim(a)?;
    let inv_sqrt: Vec<f64> = degree_matrix(a)?
        .into_iter()
        .map(|d| if d < DEGREE_GUARD { 0.0 } else { 1.0 / d.sqrt() })
        .collect();
    let mut l = Tensor::identity(n);
    for i in 0..n {
        for j in 0..n {
            let v = l.at(&[i, j]) - inv_sqrt[i] * a.at(&[i, j]) * inv_sqrt[j];
            l.set(&[i, j], v);
        }
    }
    // exact symmetry regardless of rounding
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (l.at(&[i, j]) + l.at(&[j, i]));
            l.set(&[i, j], v);
            l.set(&[j, i], v);
        }
    }
    Ok(l)
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
///
/// Returns eigenvalues ascending and the matching unit eigenvectors as columns.
pub fn eig_symmetric(l: &Tensor) -> Result<(Vec<f64>, Tensor)> {
    let n = square_dim(l)?;
    for i in 0..n {
        for j in 0..i {
            if (l.at(&[i, j]) - l.at(&[j, i])).abs() > 1e-10 {
                return Err(Error::Contract(format!("matrix is not symmetric at ({i}, {j})")));
            }
        }
    }
    let mut a: Vec<f64> = l.data().to_vec();
    let mut v = Tensor::identity(n).into_data();
    let idx = |i: usize, j: usize| i * n + j;
    let off_norm = |a: &[f64]| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += a[idx(i, j)].powi(2);
                }
            }
        }
        s.sqrt()
    };

    let mut converged = off_norm(&a) < OFF_DIAGONAL_TOLERANCE;
    let mut sweeps = 0;
    while !converged {
        if sweeps == MAX_SWEEPS {
            return Err(Error::Numerical(format!(
                "Jacobi did not converge in {MAX_SWEEPS} sweeps"
            )));
        }
        sweeps += 1;
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[idx(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let (app, aqq) = (a[idx(p, p)], a[idx(q, q)]);
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[idx(k, p)], a[idx(k, q)]);
                    a[idx(k, p)] = c * akp - s * akq;
                    a[idx(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[idx(p, k)], a[idx(q, k)]);
                    a[idx(p, k)] = c * apk - s * aqk;
                    a[idx(q, k)] = s * apk + c * aqk;
                }
                a[idx(p, q)] = 0.0;
                a[idx(q, p)] = 0.0;
                for k in 0..n {
                    let (vkp, vkq) = (v[idx(k, p)], v[idx(k, q)]);
                    v[idx(k, p)] = c * vkp - s * vkq;
                    v[idx(k, q)] = s * vkp + c * vkq;
                }
            }
        }
        converged = off_norm(&a) < OFF_DIAGONAL_TOLERANCE;
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| a[idx(x, x)].total_cmp(&a[idx(y, y)]));
    let values = order.iter().map(|&k| a[idx(k, k)]).collect();
    let mut vectors = Tensor::zeros(&[n, n]);
    for (col, &k) in order.iter().enumerate() {
        for r in 0..n {
            vectors.set(&[r, col], v[idx(r, k)]);
        }
    }
    Ok((values, vectors))
}

/// Sign that makes the orientation of `u` independent of node ordering: the sign of
/// `sum(u_i^3)`, falling back to the largest-magnitude entry, then to the first
/// significant entry when the vector is symmetric under negation.
fn orientation(u: &[f64]) -> f64 {
    let skew: f64 = u.iter().map(|x| x.powi(3)).sum();
    if skew.abs() > SIGN_TOLERANCE {
        return skew.signum();
    }
    let max = u.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let big: Vec<f64> = u.iter().copied().filter(|x| (x.abs() - max).abs() <= SIGN_TOLERANCE).collect();
    if big.iter().all(|&x| x > 0.0) || big.iter().all(|&x| x < 0.0) {
        return big[0].signum();
    }
    u.iter()
        .find(|x| x.abs() > SIGN_TOLERANCE)
        .map_or(1.0, |x| x.signum())
}

/// Eigenvectors of the `d_pe` smallest eigenvalues above `zero_threshold`.
///
/// Every near-zero eigenvalue is skipped (one per connected component), and missing
/// columns are zero-padded.
pub fn laplacian_pe(l: &Tensor, d_pe: usize, zero_threshold: f64) -> Result<LaplacianPE> {
    let n = square_dim(l)?;
    let (values, vectors) = eig_symmetric(l)?;
    let chosen: Vec<usize> = (0..n).filter(|&k| values[k] > zero_threshold).take(d_pe).collect();
    let mut coordinates = Tensor::zeros(&[n, d_pe]);
    for (col, &k) in chosen.iter().enumerate() {
        let u: Vec<f64> = (0..n).map(|r| vectors.at(&[r, k])).collect();
        let sign = orientation(&u);
        for (r, x) in u.iter().enumerate() {
            coordinates.set(&[r, col], sign * x);
        }
    }
    Ok(LaplacianPE {
        coordinates,
        eigenvalues: chosen.iter().map(|&k| values[k]).collect(),
    })
}

/// `[H̄ ‖ P]`; `P` enters as a constant, so no gradient flows through the eigensolver.
pub fn concat_pe(tape: &mut Tape, h: Var, pe: &Tensor) -> Result<Var> {
    let rows = tape.shape(h)[0];
    if pe.rank() != 2 || pe.shape()[0] != rows {
        return Err(Error::Shape(format!(
            "positional encoding {:?} does not match {rows} node rows",
            pe.shape()
        )));
    }
    if pe.shape()[1] == 0 {
        return Ok(h);
    }
    let p = tape.constant(pe.clone());
    tape.concat(&[h, p], 1)
}
