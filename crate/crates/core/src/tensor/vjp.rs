//! Reverse-mode rules for the primitive ops.
//!
//! [`forward`] runs an op and returns everything its backward rule could
//! need. Callers drop slots they do not want to keep; [`vjp`] then fails with
//! a retention-policy error if a requested gradient depends on a dropped slot.

use crate::error::{dim_err, Error, Result};

use super::ops::{
    add, causal_attention, causal_attention_backward, gelu, gelu_grad, layer_norm,
    layer_norm_backward, matmul, matmul_nt, matmul_tn, scale, softmax_rows,
};
use super::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    MatMul,
    Add,
    Scale(f64),
    Gelu,
    SoftmaxRows,
    LayerNorm { eps: f64 },
    CausalAttention { heads: usize },
}

impl OpKind {
    pub fn arity(&self) -> usize {
        match self {
            OpKind::MatMul | OpKind::Add => 2,
            OpKind::Scale(_) | OpKind::Gelu | OpKind::SoftmaxRows => 1,
            OpKind::LayerNorm { .. } | OpKind::CausalAttention { .. } => 3,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Scale(_) => "scale",
            OpKind::Gelu => "gelu",
            OpKind::SoftmaxRows => "softmax_rows",
            OpKind::LayerNorm { .. } => "layer_norm",
            OpKind::CausalAttention { .. } => "causal_attention",
        }
    }
}

/// Named tensors a forward call can keep for its backward rule.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Slot {
    Lhs,
    Rhs,
    Input,
    Output,
    Normalized,
    InvStd,
    Gamma,
    Query,
    Key,
    Value,
    Probs,
}

/// Tensors retained by one forward call, plus the input shapes (which are
/// metadata and always kept).
#[derive(Clone, Debug, Default)]
pub struct Saved {
    input_shapes: Vec<Vec<usize>>,
    slots: Vec<(Slot, Tensor)>,
}

impl Saved {
    fn new(inputs: &[&Tensor]) -> Self {
        Self {
            input_shapes: inputs.iter().map(|t| t.shape().to_vec()).collect(),
            slots: Vec::new(),
        }
    }

    fn keep(mut self, slot: Slot, t: &Tensor) -> Self {
        self.slots.push((slot, t.clone()));
        self
    }

    pub fn get(&self, slot: Slot) -> Result<&Tensor> {
        self.slots
            .iter()
            .find(|(s, _)| *s == slot)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::RetentionPolicy(format!("{slot:?} was not retained")))
    }

    pub fn contains(&self, slot: Slot) -> bool {
        self.slots.iter().any(|(s, _)| *s == slot)
    }

    /// Drops a slot so it is no longer retained.
    pub fn without(mut self, slot: Slot) -> Self {
        self.slots.retain(|(s, _)| *s != slot);
        self
    }

    pub fn tensors(&self) -> impl Iterator<Item = (Slot, &Tensor)> {
        self.slots.iter().map(|(s, t)| (*s, t))
    }

    pub fn input_shape(&self, i: usize) -> &[usize] {
        &self.input_shapes[i]
    }
}

fn check_arity(kind: &OpKind, n: usize) -> Result<()> {
    if n != kind.arity() {
        return Err(dim_err(
            "forward",
            format!("{} takes {} inputs, got {n}", kind.name(), kind.arity()),
        ));
    }
    Ok(())
}

/// Runs `kind` on `inputs`, returning the output and every tensor its
/// backward rule may use.
pub fn forward(kind: &OpKind, inputs: &[&Tensor]) -> Result<(Tensor, Saved)> {
    check_arity(kind, inputs.len())?;
    let saved = Saved::new(inputs);
    Ok(match kind {
        OpKind::MatMul => (
            matmul(inputs[0], inputs[1])?,
            saved.keep(Slot::Lhs, inputs[0]).keep(Slot::Rhs, inputs[1]),
        ),
        OpKind::Add => (add(inputs[0], inputs[1])?, saved),
        OpKind::Scale(c) => (scale(inputs[0], *c)?, saved),
        OpKind::Gelu => (gelu(inputs[0])?, saved.keep(Slot::Input, inputs[0])),
        OpKind::SoftmaxRows => {
            let y = softmax_rows(inputs[0])?;
            let saved = saved.keep(Slot::Output, &y);
            (y, saved)
        }
        OpKind::LayerNorm { eps } => {
            let ln = layer_norm(inputs[0], inputs[1], inputs[2], *eps)?;
            let saved = saved
                .keep(Slot::Normalized, &ln.normalized)
                .keep(Slot::InvStd, &ln.inv_std)
                .keep(Slot::Gamma, inputs[1]);
            (ln.output, saved)
        }
        OpKind::CausalAttention { heads } => {
            let (out, probs) = causal_attention(inputs[0], inputs[1], inputs[2], *heads)?;
            let saved = saved
                .keep(Slot::Query, inputs[0])
                .keep(Slot::Key, inputs[1])
                .keep(Slot::Value, inputs[2])
                .keep(Slot::Probs, &probs);
            (out, saved)
        }
    })
}

/// Swaps the last two axes.
fn transpose_last2(t: &Tensor) -> Result<Tensor> {
    let r = t.shape().len();
    let (m, n) = (t.shape()[r - 2], t.shape()[r - 1]);
    let batch = t.numel() / (m * n);
    let mut out = vec![0.0; t.numel()];
    let d = t.data();
    for b in 0..batch {
        let base = b * m * n;
        for i in 0..m {
            for j in 0..n {
                out[base + j * m + i] = d[base + i * n + j];
            }
        }
    }
    let mut shape = t.shape().to_vec();
    shape.swap(r - 2, r - 1);
    Tensor::from_op("transpose", shape, out, t.precision())
}

/// Gradients of a scalar loss with respect to each input of `kind`, given
/// the gradient `upstream` at its output. Only inputs flagged in `wants` are
/// computed; the rest come back as `None`.
pub fn vjp(kind: &OpKind, saved: &Saved, upstream: &Tensor, wants: &[bool]) -> Result<Vec<Option<Tensor>>> {
    check_arity(kind, wants.len())?;
    let want = |i: usize| wants[i];
    let mut grads: Vec<Option<Tensor>> = vec![None; wants.len()];
    match kind {
        OpKind::MatMul => {
            let batched = saved.input_shape(1).len() > 2;
            if want(0) {
                let b = saved.get(Slot::Rhs)?;
                grads[0] = Some(if batched {
                    matmul(upstream, &transpose_last2(b)?)?
                } else {
                    matmul_nt(upstream, b)?
                });
            }
            if want(1) {
                let a = saved.get(Slot::Lhs)?;
                grads[1] = Some(if batched {
                    matmul(&transpose_last2(a)?, upstream)?
                } else {
                    matmul_tn(a, upstream)?
                });
            }
        }
        OpKind::Add => {
            if want(0) {
                grads[0] = Some(upstream.clone());
            }
            if want(1) {
                let shape = saved.input_shape(1).to_vec();
                let period: usize = shape.iter().product();
                let mut acc = vec![0.0; period];
                for chunk in upstream.data().chunks(period) {
                    acc.iter_mut().zip(chunk).for_each(|(a, u)| *a += u);
                }
                grads[1] = Some(Tensor::from_op("add_vjp", shape, acc, upstream.precision())?);
            }
        }
        OpKind::Scale(c) => {
            if want(0) {
                grads[0] = Some(scale(upstream, *c)?);
            }
        }
        OpKind::Gelu => {
            if want(0) {
                let x = saved.get(Slot::Input)?;
                upstream.check_same_shape("gelu_vjp", x)?;
                let data = x
                    .data()
                    .iter()
                    .zip(upstream.data())
                    .map(|(&v, &u)| u * gelu_grad(v))
                    .collect();
                grads[0] = Some(Tensor::from_op("gelu_vjp", x.shape().to_vec(), data, upstream.precision())?);
            }
        }
        OpKind::SoftmaxRows => {
            if want(0) {
                let y = saved.get(Slot::Output)?;
                upstream.check_same_shape("softmax_vjp", y)?;
                let n = y.cols();
                let mut data = vec![0.0; y.numel()];
                for ((out, yr), ur) in data
                    .chunks_mut(n)
                    .zip(y.data().chunks(n))
                    .zip(upstream.data().chunks(n))
                {
                    let dot: f64 = yr.iter().zip(ur).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        out[j] = yr[j] * (ur[j] - dot);
                    }
                }
                grads[0] = Some(Tensor::from_op("softmax_vjp", y.shape().to_vec(), data, upstream.precision())?);
            }
        }
        OpKind::LayerNorm { .. } => {
            if wants.iter().any(|&w| w) {
                let (dx, dgamma, dbeta) = layer_norm_backward(
                    saved.get(Slot::Normalized)?,
                    saved.get(Slot::InvStd)?,
                    saved.get(Slot::Gamma)?,
                    upstream,
                )?;
                for (i, g) in [dx, dgamma, dbeta].into_iter().enumerate() {
                    if want(i) {
                        grads[i] = Some(g);
                    }
                }
            }
        }
        OpKind::CausalAttention { heads } => {
            if wants.iter().any(|&w| w) {
                let (dq, dk, dv) = causal_attention_backward(
                    saved.get(Slot::Query)?,
                    saved.get(Slot::Key)?,
                    saved.get(Slot::Value)?,
                    saved.get(Slot::Probs)?,
                    *heads,
                    upstream,
                )?;
                for (i, g) in [dq, dk, dv].into_iter().enumerate() {
                    if want(i) {
                        grads[i] = Some(g);
                    }
                }
            }
        }
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_vjp_with_identity_upstream_gives_transposes() {
        let a = Tensor::from_rows(&[[1., 2.], [3., 4.]]).unwrap();
        let b = Tensor::from_rows(&[[5., 6.], [7., 8.]]).unwrap();
        let (_, saved) = forward(&OpKind::MatMul, &[&a, &b]).unwrap();
        let g = vjp(&OpKind::MatMul, &saved, &Tensor::eye(2).unwrap(), &[true, true]).unwrap();
        assert!(g[0].as_ref().unwrap().bitwise_eq(&b.transpose().unwrap()));
        assert!(g[1].as_ref().unwrap().bitwise_eq(&a.transpose().unwrap()));
    }

    #[test]
    fn dropped_slot_is_a_retention_error() {
        let a = Tensor::from_rows(&[[1., 2.]]).unwrap();
        let b = Tensor::from_rows(&[[1.], [1.]]).unwrap();
        let (_, saved) = forward(&OpKind::MatMul, &[&a, &b]).unwrap();
        let saved = saved.without(Slot::Lhs);
        let up = Tensor::from_rows(&[[1.]]).unwrap();
        // input gradient needs only the weight
        assert!(vjp(&OpKind::MatMul, &saved, &up, &[true, false]).is_ok());
        let err = vjp(&OpKind::MatMul, &saved, &up, &[false, true]).unwrap_err();
        assert!(matches!(err, Error::RetentionPolicy(_)));
    }

    #[test]
    fn gelu_vjp_at_zero_is_half() {
        let x = Tensor::zeros(&[3]).unwrap();
        let (_, saved) = forward(&OpKind::Gelu, &[&x]).unwrap();
        let up = Tensor::new(vec![3], vec![1.0, -2.0, 4.0]).unwrap();
        let g = vjp(&OpKind::Gelu, &saved, &up, &[true]).unwrap();
        assert_eq!(g[0].as_ref().unwrap().data(), &[0.5, -1.0, 2.0]);
    }

    #[test]
    fn arity_checked() {
        let x = Tensor::zeros(&[3]).unwrap();
        assert!(forward(&OpKind::MatMul, &[&x]).is_err());
    }
}
