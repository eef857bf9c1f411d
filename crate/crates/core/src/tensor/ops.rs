use crate::error::{dim_err, Error, Result};

use super::Tensor;

/// Strided read-only matrix view used by [`gemm`].
#[derive(Clone, Copy)]
struct View<'a> {
    data: &'a [f64],
    offset: usize,
    row_stride: usize,
    col_stride: usize,
}

impl<'a> View<'a> {
    fn rows(data: &'a [f64], offset: usize, cols: usize) -> Self {
        Self {
            data,
            offset,
            row_stride: cols,
            col_stride: 1,
        }
    }

    /// Row-major storage read as its transpose.
    fn transposed(data: &'a [f64], offset: usize, stored_cols: usize) -> Self {
        Self {
            data,
            offset,
            row_stride: 1,
            col_stride: stored_cols,
        }
    }

    fn with_row_stride(mut self, row_stride: usize) -> Self {
        self.row_stride = row_stride;
        self
    }

    fn last_index(&self, rows: usize, cols: usize) -> usize {
        self.offset + (rows - 1) * self.row_stride + (cols - 1) * self.col_stride
    }
}

/// `c = alpha * a·b + beta * c` for an `m×k` view `a`, a `k×n` view `b`, and
/// `c` written with the given offset and row stride (unit column stride).
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: View<'_>,
    b: View<'_>,
    beta: f64,
    c: &mut [f64],
    c_offset: usize,
    c_row_stride: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let slot = &mut c[c_offset + i * c_row_stride + j];
                *slot *= beta;
            }
        }
        return;
    }
    assert!(a.last_index(m, k) < a.data.len(), "gemm: lhs view out of bounds");
    assert!(b.last_index(k, n) < b.data.len(), "gemm: rhs view out of bounds");
    assert!(
        c_offset + (m - 1) * c_row_stride + n - 1 < c.len(),
        "gemm: output view out of bounds"
    );
    // SAFETY: every view was bounds-checked above against its backing slice,
    // and `c` is exclusively borrowed, so it cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr().add(a.offset),
            a.row_stride as isize,
            a.col_stride as isize,
            b.data.as_ptr().add(b.offset),
            b.row_stride as isize,
            b.col_stride as isize,
            beta,
            c.as_mut_ptr().add(c_offset),
            c_row_stride as isize,
            1,
        );
    }
}

/// Matrix product over the last two axes.
///
/// `b` may be a plain matrix (shared across every leading index of `a`) or
/// carry the same leading batch dimensions as `a`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let precision = a.precision.join(b.precision);
    if b.shape.len() == 2 {
        let (k, n) = (b.shape[0], b.shape[1]);
        if a.cols() != k {
            return Err(dim_err(
                "matmul",
                format!("inner extents differ: {:?} x {:?}", a.shape, b.shape),
            ));
        }
        let m = a.rows();
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            1.0,
            View::rows(a.data(), 0, k),
            View::rows(b.data(), 0, n),
            0.0,
            &mut out,
            0,
            n,
        );
        let mut shape = a.shape.clone();
        *shape.last_mut().unwrap() = n;
        return Tensor::from_op("matmul", shape, out, precision);
    }

    let ra = a.shape.len();
    let rb = b.shape.len();
    if ra != rb || ra < 3 || a.shape[..ra - 2] != b.shape[..rb - 2] {
        return Err(dim_err(
            "matmul",
            format!("batch dimensions differ: {:?} x {:?}", a.shape, b.shape),
        ));
    }
    let (m, k) = (a.shape[ra - 2], a.shape[ra - 1]);
    let (kb, n) = (b.shape[rb - 2], b.shape[rb - 1]);
    if k != kb {
        return Err(dim_err(
            "matmul",
            format!("inner extents differ: {:?} x {:?}", a.shape, b.shape),
        ));
    }
    let batch: usize = a.shape[..ra - 2].iter().product();
    let mut out = vec![0.0; batch * m * n];
    for bi in 0..batch {
        gemm(
            m,
            k,
            n,
            1.0,
            View::rows(a.data(), bi * m * k, k),
            View::rows(b.data(), bi * k * n, n),
            0.0,
            &mut out,
            bi * m * n,
            n,
        );
    }
    let mut shape = a.shape.clone();
    shape[ra - 1] = n;
    Tensor::from_op("matmul", shape, out, precision)
}

/// `aᵀ·b` with the leading dimensions of both operands folded into rows:
/// `[.., p]ᵀ × [.., q] -> [p, q]`. This is the weight-gradient contraction.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rows() != b.rows() {
        return Err(dim_err(
            "matmul_tn",
            format!("row counts differ: {:?} vs {:?}", a.shape, b.shape),
        ));
    }
    let (rows, p, q) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; p * q];
    gemm(
        p,
        rows,
        q,
        1.0,
        View::transposed(a.data(), 0, p),
        View::rows(b.data(), 0, q),
        0.0,
        &mut out,
        0,
        q,
    );
    Tensor::from_op("matmul_tn", vec![p, q], out, a.precision.join(b.precision))
}

/// `a·bᵀ` for a matrix `b` of shape `[n, k]`: `[.., k] -> [.., n]`.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if b.shape.len() != 2 || a.cols() != b.shape[1] {
        return Err(dim_err(
            "matmul_nt",
            format!("{:?} x {:?}ᵀ", a.shape, b.shape),
        ));
    }
    let (m, k, n) = (a.rows(), a.cols(), b.shape[0]);
    let mut out = vec![0.0; m * n];
    gemm(
        m,
        k,
        n,
        1.0,
        View::rows(a.data(), 0, k),
        View::transposed(b.data(), 0, k),
        0.0,
        &mut out,
        0,
        n,
    );
    let mut shape = a.shape.clone();
    *shape.last_mut().unwrap() = n;
    Tensor::from_op("matmul_nt", shape, out, a.precision.join(b.precision))
}

/// Elementwise sum. `b` may also be broadcast over the leading axes of `a`
/// when its shape equals a suffix of `a`'s shape.
pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if !a.shape.ends_with(&b.shape) {
        return Err(dim_err("add", format!("{:?} + {:?}", a.shape, b.shape)));
    }
    let bd = b.data();
    let period = bd.len();
    let data = a
        .data()
        .iter()
        .enumerate()
        .map(|(i, &x)| x + bd[i % period])
        .collect();
    Tensor::from_op("add", a.shape.clone(), data, a.precision.join(b.precision))
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.check_same_shape("sub", b)?;
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| x - y)
        .collect();
    Tensor::from_op("sub", a.shape.clone(), data, a.precision.join(b.precision))
}

pub fn scale(a: &Tensor, factor: f64) -> Result<Tensor> {
    a.map("scale", |x| factor * x)
}

const GELU_C: f64 = 0.044_715;
// sqrt(2/pi)
const GELU_K: f64 = 0.797_884_560_802_865_4;

/// GeLU, tanh approximation.
pub fn gelu(x: &Tensor) -> Result<Tensor> {
    x.map("gelu", |v| 0.5 * v * (1.0 + (GELU_K * (v + GELU_C * v * v * v)).tanh()))
}

/// Pointwise derivative of [`gelu`].
pub fn gelu_grad(v: f64) -> f64 {
    let t = (GELU_K * (v + GELU_C * v * v * v)).tanh();
    0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * v * v)
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Softmax over the last axis, with the row maximum subtracted first.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let cols = x.cols();
    let mut data = x.data().to_vec();
    data.chunks_mut(cols).for_each(softmax_in_place);
    Tensor::from_op("softmax_rows", x.shape.clone(), data, x.precision)
}

/// Result of [`layer_norm`]: the output plus what its backward rule needs.
#[derive(Clone, Debug)]
pub struct LayerNormOutput {
    pub output: Tensor,
    /// `(x - mean) * inv_std`, before the affine map.
    pub normalized: Tensor,
    /// One entry per row.
    pub inv_std: Tensor,
}

/// Row-wise layer normalization (population variance) followed by `gamma * x̂ + beta`.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<LayerNormOutput> {
    if eps <= 0.0 {
        return Err(Error::Parameter(format!("layer_norm eps must be positive, got {eps}")));
    }
    let n = x.cols();
    if gamma.shape != [n] || beta.shape != [n] {
        return Err(dim_err(
            "layer_norm",
            format!("x {:?}, gamma {:?}, beta {:?}", x.shape, gamma.shape, beta.shape),
        ));
    }
    let rows = x.rows();
    let mut normalized = vec![0.0; x.numel()];
    let mut output = vec![0.0; x.numel()];
    let mut inv_std = vec![0.0; rows];
    let (g, b) = (gamma.data(), beta.data());
    for (r, row) in x.data().chunks(n).enumerate() {
        let mean = row.iter().sum::<f64>() / n as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let rstd = 1.0 / (var + eps).sqrt();
        inv_std[r] = rstd;
        for j in 0..n {
            let xh = (row[j] - mean) * rstd;
            normalized[r * n + j] = xh;
            output[r * n + j] = g[j] * xh + b[j];
        }
    }
    let precision = x.precision.join(gamma.precision).join(beta.precision);
    Ok(LayerNormOutput {
        output: Tensor::from_op("layer_norm", x.shape.clone(), output, precision)?,
        normalized: Tensor::from_op("layer_norm", x.shape.clone(), normalized, precision)?,
        inv_std: Tensor::from_op("layer_norm", vec![rows], inv_std, precision)?,
    })
}

pub(crate) fn layer_norm_backward(
    normalized: &Tensor,
    inv_std: &Tensor,
    gamma: &Tensor,
    upstream: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    normalized.check_same_shape("layer_norm_backward", upstream)?;
    let n = normalized.cols();
    let rows = normalized.rows();
    let (xh, g, up, rstd) = (normalized.data(), gamma.data(), upstream.data(), inv_std.data());
    let mut dx = vec![0.0; xh.len()];
    let mut dgamma = vec![0.0; n];
    let mut dbeta = vec![0.0; n];
    let mut dxh = vec![0.0; n];
    for r in 0..rows {
        let base = r * n;
        let mut mean_dxh = 0.0;
        let mut mean_dxh_xh = 0.0;
        for j in 0..n {
            let u = up[base + j];
            dgamma[j] += u * xh[base + j];
            dbeta[j] += u;
            dxh[j] = u * g[j];
            mean_dxh += dxh[j];
            mean_dxh_xh += dxh[j] * xh[base + j];
        }
        mean_dxh /= n as f64;
        mean_dxh_xh /= n as f64;
        for j in 0..n {
            dx[base + j] = rstd[r] * (dxh[j] - mean_dxh - xh[base + j] * mean_dxh_xh);
        }
    }
    let precision = normalized.precision.join(upstream.precision);
    Ok((
        Tensor::from_op("layer_norm_backward", normalized.shape.clone(), dx, precision)?,
        Tensor::from_op("layer_norm_backward", vec![n], dgamma, precision)?,
        Tensor::from_op("layer_norm_backward", vec![n], dbeta, precision)?,
    ))
}

fn attention_dims(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Result<(usize, usize, usize, usize)> {
    if q.shape.len() != 3 || q.shape != k.shape || q.shape != v.shape {
        return Err(dim_err(
            "causal_attention",
            format!("q {:?}, k {:?}, v {:?} must be equal [b, s, d]", q.shape, k.shape, v.shape),
        ));
    }
    let (b, s, d) = (q.shape[0], q.shape[1], q.shape[2]);
    if heads == 0 || d % heads != 0 {
        return Err(Error::Parameter(format!("{heads} heads do not divide width {d}")));
    }
    Ok((b, s, d, d / heads))
}

/// Multi-head scaled dot-product attention with a causal mask.
///
/// Inputs are `[b, s, d]` with heads laid out as contiguous column blocks of
/// width `d / heads`. Returns the output and the attention probabilities
/// `[b, heads, s, s]`.
pub fn causal_attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Result<(Tensor, Tensor)> {
    let (b, s, d, dh) = attention_dims(q, k, v, heads)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; b * s * d];
    let mut probs = vec![0.0; b * heads * s * s];
    for bi in 0..b {
        for h in 0..heads {
            let off = bi * s * d + h * dh;
            let p_off = (bi * heads + h) * s * s;
            gemm(
                s,
                dh,
                s,
                scale,
                View::rows(q.data(), off, dh).with_row_stride(d),
                View::transposed(k.data(), off, d),
                0.0,
                &mut probs,
                p_off,
                s,
            );
            for i in 0..s {
                let row = &mut probs[p_off + i * s..p_off + (i + 1) * s];
                row[i + 1..].iter_mut().for_each(|x| *x = f64::NEG_INFINITY);
                softmax_in_place(row);
            }
            gemm(
                s,
                s,
                dh,
                1.0,
                View::rows(&probs, p_off, s),
                View::rows(v.data(), off, dh).with_row_stride(d),
                0.0,
                &mut out,
                off,
                d,
            );
        }
    }
    let precision = q.precision.join(k.precision).join(v.precision);
    Ok((
        Tensor::from_op("causal_attention", q.shape.clone(), out, precision)?,
        Tensor::from_op("causal_attention", vec![b, heads, s, s], probs, precision)?,
    ))
}

pub(crate) fn causal_attention_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    probs: &Tensor,
    heads: usize,
    upstream: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (b, s, d, dh) = attention_dims(q, k, v, heads)?;
    q.check_same_shape("causal_attention_backward", upstream)?;
    if probs.shape != [b, heads, s, s] {
        return Err(dim_err("causal_attention_backward", format!("probs {:?}", probs.shape)));
    }
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = vec![0.0; b * s * d];
    let mut dk = vec![0.0; b * s * d];
    let mut dv = vec![0.0; b * s * d];
    let mut dscores = vec![0.0; s * s];
    let p = probs.data();
    for bi in 0..b {
        for h in 0..heads {
            let off = bi * s * d + h * dh;
            let p_off = (bi * heads + h) * s * s;
            // dP = dO·Vᵀ
            gemm(
                s,
                dh,
                s,
                1.0,
                View::rows(upstream.data(), off, dh).with_row_stride(d),
                View::transposed(v.data(), off, d),
                0.0,
                &mut dscores,
                0,
                s,
            );
            // dV = Pᵀ·dO
            gemm(
                s,
                s,
                dh,
                1.0,
                View::transposed(p, p_off, s),
                View::rows(upstream.data(), off, dh).with_row_stride(d),
                0.0,
                &mut dv,
                off,
                d,
            );
            for i in 0..s {
                let prow = &p[p_off + i * s..p_off + (i + 1) * s];
                let drow = &mut dscores[i * s..(i + 1) * s];
                let dot: f64 = prow.iter().zip(drow.iter()).map(|(a, b)| a * b).sum();
                for (dv, &pv) in drow.iter_mut().zip(prow) {
                    *dv = pv * (*dv - dot);
                }
            }
            gemm(
                s,
                s,
                dh,
                scale,
                View::rows(&dscores, 0, s),
                View::rows(k.data(), off, dh).with_row_stride(d),
                0.0,
                &mut dq,
                off,
                d,
            );
            gemm(
                s,
                s,
                dh,
                scale,
                View::transposed(&dscores, 0, s),
                View::rows(q.data(), off, dh).with_row_stride(d),
                0.0,
                &mut dk,
                off,
                d,
            );
        }
    }
    let precision = q.precision.join(upstream.precision);
    let shape = q.shape.clone();
    Ok((
        Tensor::from_op("causal_attention_backward", shape.clone(), dq, precision)?,
        Tensor::from_op("causal_attention_backward", shape.clone(), dk, precision)?,
        Tensor::from_op("causal_attention_backward", shape, dv, precision)?,
    ))
}

fn check_targets(logits: &Tensor, targets: &[Option<usize>]) -> Result<usize> {
    if targets.len() != logits.rows() {
        return Err(dim_err(
            "cross_entropy",
            format!("{} targets for {} rows", targets.len(), logits.rows()),
        ));
    }
    let vocab = logits.cols();
    if let Some(bad) = targets.iter().flatten().find(|&&t| t >= vocab) {
        return Err(Error::Data(format!("target id {bad} outside vocabulary of {vocab}")));
    }
    let counted = targets.iter().flatten().count();
    if counted == 0 {
        return Err(Error::Data("no scored positions".into()));
    }
    Ok(counted)
}

/// Mean cross-entropy over rows with a target; `None` rows are not scored.
/// Returns the loss and the row softmax of `logits`.
pub fn cross_entropy(logits: &Tensor, targets: &[Option<usize>]) -> Result<(f64, Tensor)> {
    let counted = check_targets(logits, targets)?;
    let vocab = logits.cols();
    let mut probs = logits.data().to_vec();
    let mut total = 0.0;
    for (row, (chunk, target)) in logits
        .data()
        .chunks(vocab)
        .zip(targets)
        .enumerate()
    {
        let out = &mut probs[row * vocab..(row + 1) * vocab];
        softmax_in_place(out);
        if let Some(t) = target {
            let max = chunk.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + chunk.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - chunk[*t];
        }
    }
    let loss = total / counted as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite("cross_entropy"));
    }
    let probs = Tensor::from_op("cross_entropy", logits.shape.clone(), probs, logits.precision)?;
    Ok((loss, probs))
}

/// Gradient of [`cross_entropy`] with respect to the logits.
pub fn cross_entropy_backward(probs: &Tensor, targets: &[Option<usize>]) -> Result<Tensor> {
    let counted = check_targets(probs, targets)? as f64;
    let vocab = probs.cols();
    let mut grad = vec![0.0; probs.numel()];
    for (row, target) in targets.iter().enumerate() {
        if let Some(t) = target {
            let base = row * vocab;
            for j in 0..vocab {
                grad[base + j] = probs.data()[base + j] / counted;
            }
            grad[base + t] -= 1.0 / counted;
        }
    }
    Tensor::from_op("cross_entropy_backward", probs.shape.clone(), grad, probs.precision)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Precision;

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_by_hand() {
        let c = matmul(&t(&[&[1., 2.], &[3., 4.]]), &t(&[&[5., 6.], &[7., 8.]])).unwrap();
        assert_eq!(c.data(), &[19., 22., 43., 50.]);
    }

    #[test]
    fn matmul_identity_and_zero() {
        let x = t(&[&[1.5, -2.0, 3.0], &[0.25, 4.0, -1.0]]);
        assert!(matmul(&x, &Tensor::eye(3).unwrap()).unwrap().bitwise_eq(&x));
        let z = matmul(&x, &Tensor::zeros(&[3, 2]).unwrap()).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_mismatch() {
        let err = matmul(&Tensor::zeros(&[2, 3]).unwrap(), &Tensor::zeros(&[2, 3]).unwrap());
        assert!(matches!(err, Err(Error::Dimension { .. })));
    }

    #[test]
    fn matmul_folds_leading_dims_and_batches() {
        let x = Tensor::new(vec![2, 1, 2], vec![1., 2., 3., 4.]).unwrap();
        let w = t(&[&[5., 6.], &[7., 8.]]);
        let y = matmul(&x, &w).unwrap();
        assert_eq!(y.shape(), &[2, 1, 2]);
        assert_eq!(y.data(), &[19., 22., 43., 50.]);

        let wb = Tensor::new(vec![2, 2, 1], vec![1., 1., 2., 0.]).unwrap();
        let yb = matmul(&x, &wb).unwrap();
        assert_eq!(yb.shape(), &[2, 1, 1]);
        assert_eq!(yb.data(), &[3., 6.]);
    }

    #[test]
    fn transposed_products_agree_with_explicit_transpose() {
        let a = t(&[&[1., 2., 3.], &[4., 5., 6.]]);
        let b = t(&[&[1., -1.], &[2., 0.5]]);
        let tn = matmul_tn(&a, &b).unwrap();
        let expect = matmul(&a.transpose().unwrap(), &b).unwrap();
        assert!(tn.bitwise_eq(&expect));
        let c = t(&[&[1., 0., 2.], &[0., 1., 1.]]);
        let nt = matmul_nt(&a, &c).unwrap();
        assert!(nt.bitwise_eq(&matmul(&a, &c.transpose().unwrap()).unwrap()));
    }

    #[test]
    fn elementwise_basics() {
        let a = Tensor::new(vec![2], vec![1., 2.]).unwrap();
        let b = Tensor::new(vec![2], vec![3., 4.]).unwrap();
        assert_eq!(add(&a, &b).unwrap().data(), &[4., 6.]);
        assert_eq!(scale(&a, -0.5).unwrap().data(), &[-0.5, -1.0]);
        let g = gelu(&Tensor::new(vec![2], vec![0.0, 10.0]).unwrap()).unwrap();
        assert_eq!(g.data()[0], 0.0);
        assert!((g.data()[1] - 10.0).abs() < 1e-6);
        assert!(add(&a, &Tensor::zeros(&[3]).unwrap()).is_err());
    }

    #[test]
    fn add_broadcasts_suffix() {
        let a = Tensor::zeros(&[2, 2]).unwrap();
        let b = Tensor::new(vec![2], vec![1., 2.]).unwrap();
        assert_eq!(add(&a, &b).unwrap().data(), &[1., 2., 1., 2.]);
    }

    #[test]
    fn softmax_cases() {
        let s = softmax_rows(&t(&[&[0., 0.]])).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax_rows(&t(&[&[std::f64::consts::LN_2, 0.]])).unwrap();
        assert!((s.data()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((s.data()[1] - 1.0 / 3.0).abs() < 1e-15);
        let big = softmax_rows(&t(&[&[1000., 999.]])).unwrap();
        assert!((big.sum() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let x = t(&[&[1., 1., 1.]]);
        let ln = layer_norm(
            &x,
            &Tensor::full(&[3], 1.0).unwrap(),
            &Tensor::zeros(&[3]).unwrap(),
            1e-5,
        )
        .unwrap();
        assert_eq!(ln.output.data(), &[0., 0., 0.]);
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let x = t(&[&[1., 2., 3., 10.], &[-4., 0.5, 2., 2.]]);
        let ln = layer_norm(
            &x,
            &Tensor::full(&[4], 1.0).unwrap(),
            &Tensor::zeros(&[4]).unwrap(),
            1e-12,
        )
        .unwrap();
        for row in ln.output.data().chunks(4) {
            let mean = row.iter().sum::<f64>() / 4.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-9);
        }
        assert!(layer_norm(&x, &Tensor::full(&[4], 1.0).unwrap(), &Tensor::zeros(&[4]).unwrap(), 0.0).is_err());
    }

    #[test]
    fn attention_first_position_copies_first_value() {
        let q = Tensor::new(vec![1, 2, 2], vec![1., 0., 0., 1.]).unwrap();
        let v = Tensor::new(vec![1, 2, 2], vec![3., 4., 5., 6.]).unwrap();
        let (out, probs) = causal_attention(&q, &q, &v, 1).unwrap();
        assert_eq!(&out.data()[..2], &[3., 4.]);
        assert_eq!(probs.at(&[0, 0, 0, 1]), 0.0);
        assert!((probs.at(&[0, 0, 1, 0]) + probs.at(&[0, 0, 1, 1]) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn uniform_logits_give_log_vocab() {
        let logits = Tensor::zeros(&[3, 7]).unwrap();
        let (loss, _) = cross_entropy(&logits, &[Some(1), None, Some(6)]).unwrap();
        assert!((loss - 7f64.ln()).abs() < 1e-15);
        assert!(matches!(
            cross_entropy(&logits, &[Some(7), None, None]),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn f32_outputs_are_rounded() {
        let a = Tensor::new(vec![1], vec![0.1]).unwrap().with_precision(Precision::F32);
        let s = scale(&a, 3.0).unwrap();
        assert_eq!(s.precision(), Precision::F32);
        assert_eq!(s.data()[0], (0.1f32 as f64 * 3.0) as f32 as f64);
    }
}
