use crate::error::{dim_err, Result};

use super::Tensor;

/// Relative threshold on `|R_ii|` (against the Frobenius norm) below which a
/// QR diagonal entry counts as zero.
pub const RANK_TOLERANCE: f64 = 1e-8;

struct Reflector {
    /// Householder vector, indexed from the reflector's first row.
    v: Vec<f64>,
    /// `2 / vᵀv`; zero means identity.
    beta: f64,
}

/// In-place Householder triangularization of a row-major `rows×cols` matrix.
/// With `pivot`, columns are swapped so the largest remaining column leads;
/// the permutation is returned.
fn triangularize(a: &mut [f64], rows: usize, cols: usize, pivot: bool) -> (Vec<Reflector>, Vec<usize>) {
    let steps = rows.min(cols);
    let mut reflectors = Vec::with_capacity(steps);
    let mut perm: Vec<usize> = (0..cols).collect();
    for j in 0..steps {
        if pivot {
            let col_norm = |a: &[f64], c: usize| (j..rows).map(|i| a[i * cols + c].powi(2)).sum::<f64>();
            let best = (j..cols)
                .max_by(|&x, &y| col_norm(a, x).total_cmp(&col_norm(a, y)))
                .unwrap();
            if best != j {
                for i in 0..rows {
                    a.swap(i * cols + j, i * cols + best);
                }
                perm.swap(j, best);
            }
        }
        let x0 = a[j * cols + j];
        let tail: f64 = (j + 1..rows).map(|i| a[i * cols + j].powi(2)).sum();
        if tail == 0.0 {
            reflectors.push(Reflector { v: Vec::new(), beta: 0.0 });
            continue;
        }
        let norm = (x0 * x0 + tail).sqrt();
        let alpha = if x0 >= 0.0 { -norm } else { norm };
        let mut v: Vec<f64> = (j..rows).map(|i| a[i * cols + j]).collect();
        v[0] -= alpha;
        let vtv = v[0] * v[0] + tail;
        let beta = 2.0 / vtv;
        for c in j..cols {
            let dot: f64 = (j..rows).map(|i| v[i - j] * a[i * cols + c]).sum();
            let f = beta * dot;
            for i in j..rows {
                a[i * cols + c] -= f * v[i - j];
            }
        }
        reflectors.push(Reflector { v, beta });
    }
    (reflectors, perm)
}

/// Thin Householder QR of a `d×r` matrix with `d ≥ r`.
///
/// Signs are chosen so that `rr` has a non-negative diagonal. Rank-deficient
/// input is accepted; inspect the diagonal of `rr`.
pub fn qr(m: &Tensor) -> Result<(Tensor, Tensor)> {
    if m.shape().len() != 2 || m.shape()[0] < m.shape()[1] {
        return Err(dim_err("qr", format!("need a tall matrix, got {:?}", m.shape())));
    }
    let (d, r) = (m.shape()[0], m.shape()[1]);
    let mut a = m.data().to_vec();
    let (reflectors, _) = triangularize(&mut a, d, r, false);

    let mut rr = vec![0.0; r * r];
    for i in 0..r {
        for j in i..r {
            rr[i * r + j] = a[i * r + j];
        }
    }
    // Q = H_0 H_1 … H_{r-1} [I_r; 0]
    let mut q = vec![0.0; d * r];
    for i in 0..r {
        q[i * r + i] = 1.0;
    }
    for (j, h) in reflectors.iter().enumerate().rev() {
        if h.beta == 0.0 {
            continue;
        }
        for c in 0..r {
            let dot: f64 = (j..d).map(|i| h.v[i - j] * q[i * r + c]).sum();
            let f = h.beta * dot;
            for i in j..d {
                q[i * r + c] -= f * h.v[i - j];
            }
        }
    }
    for i in 0..r {
        if rr[i * r + i] < 0.0 {
            for j in i..r {
                rr[i * r + j] = -rr[i * r + j];
            }
            for row in 0..d {
                q[row * r + i] = -q[row * r + i];
            }
        }
    }
    Ok((
        Tensor::from_op("qr", vec![d, r], q, m.precision())?,
        Tensor::from_op("qr", vec![r, r], rr, m.precision())?,
    ))
}

/// Number of column-pivoted QR diagonal entries with `|R_ii| > rel_tol·‖m‖_F`.
/// Wide matrices are factored through their transpose. A zero matrix has rank 0.
pub fn numerical_rank(m: &Tensor, rel_tol: f64) -> Result<usize> {
    let m = if m.shape().len() != 2 {
        m.as_matrix()
    } else {
        m.clone()
    };
    let m = if m.shape()[0] < m.shape()[1] {
        m.transpose()?
    } else {
        m
    };
    let norm = m.frobenius();
    if norm == 0.0 {
        return Ok(0);
    }
    let (rows, cols) = (m.shape()[0], m.shape()[1]);
    let mut a = m.data().to_vec();
    triangularize(&mut a, rows, cols, true);
    Ok((0..cols)
        .filter(|&i| a[i * cols + i].abs() > rel_tol * norm)
        .count())
}
