//! Central finite-difference checks of analytic gradients.

use serde::{Deserialize, Serialize};

use crate::adapters::{AdaptedLinear, LayerParam};
use crate::error::{dim_err, Result};
use crate::model::{TokenBatch, TransformerModel};
use crate::optim::ParamStore;
use crate::tensor::{cross_entropy, cross_entropy_backward, forward, randn, vjp, OpKind, RngState, Tensor};

/// Relative step: `h = STEP·max(1, |x|)`.
pub const STEP: f64 = 1e-6;

/// `‖a − n‖ / max(‖a‖, ‖n‖)`; the plain difference norm when both are below `1e-12`.
pub fn relative_error(analytic: &Tensor, numeric: &Tensor) -> Result<f64> {
    analytic.check_same_shape("relative_error", numeric)?;
    let diff: f64 = analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let scale = analytic.frobenius().max(numeric.frobenius());
    Ok(if scale < 1e-12 { diff } else { diff / scale })
}

/// Central differences of a scalar function at `x`.
pub fn numeric_gradient(mut f: impl FnMut(&Tensor) -> Result<f64>, x: &Tensor) -> Result<Tensor> {
    let mut probe = x.clone();
    let mut grad = vec![0.0; x.numel()];
    for (i, g) in grad.iter_mut().enumerate() {
        let x0 = x.data()[i];
        let h = STEP * x0.abs().max(1.0);
        probe.data_mut()[i] = x0 + h;
        let up = f(&probe)?;
        probe.data_mut()[i] = x0 - h;
        let down = f(&probe)?;
        probe.data_mut()[i] = x0;
        *g = (up - down) / (2.0 * h);
    }
    Tensor::new(x.shape().to_vec(), grad)
}

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub relative_error: f64,
    pub elements: usize,
}

/// Checks every input of a primitive op against finite differences of
/// `⟨probe, op(inputs)⟩` for a random probe.
pub fn check_op(kind: &OpKind, inputs: &[Tensor], rng: &mut RngState) -> Result<Vec<CheckResult>> {
    let refs: Vec<&Tensor> = inputs.iter().collect();
    let (out, saved) = forward(kind, &refs)?;
    let probe = randn(out.shape(), rng, 1.0)?;
    let grads = vjp(kind, &saved, &probe, &vec![true; inputs.len()])?;
    let mut results = Vec::new();
    for (i, g) in grads.into_iter().enumerate() {
        let g = g.ok_or_else(|| dim_err("check_op", "gradient not produced"))?;
        let numeric = numeric_gradient(
            |xi| {
                let mut args = refs.clone();
                args[i] = xi;
                Ok(dot(&probe, &forward(kind, &args)?.0))
            },
            &inputs[i],
        )?;
        results.push(CheckResult {
            name: format!("{}[{i}]", kind.name()),
            relative_error: relative_error(&g, &numeric)?,
            elements: numeric.numel(),
        });
    }
    Ok(results)
}

/// Checks `dX` and the trainable parameters of one layer.
pub fn check_layer(layer: &AdaptedLinear, x: &Tensor, rng: &mut RngState) -> Result<Vec<CheckResult>> {
    let (y, kept) = layer.forward(x)?;
    let probe = randn(y.shape(), rng, 1.0)?;
    let (dx, grads) = layer.backward(&kept, &probe)?;
    let mut results = vec![CheckResult {
        name: format!("{}.input", layer.mode()),
        relative_error: relative_error(
            &dx,
            &numeric_gradient(|xi| Ok(dot(&probe, &layer.forward(xi)?.0)), x)?,
        )?,
        elements: x.numel(),
    }];
    let grads = grads.into_map();
    for key in layer.trainable_keys() {
        let analytic = grads
            .get(&key)
            .ok_or_else(|| dim_err("check_layer", format!("no gradient for {key:?}")))?;
        let current = layer.param(&key).expect("trainable key exists").clone();
        let numeric = numeric_gradient(
            |p| {
                let mut probe_layer = layer.clone();
                *probe_layer.param_mut(&key).expect("trainable") = p.clone();
                Ok(dot(&probe, &probe_layer.forward(x)?.0))
            },
            &current,
        )?;
        results.push(CheckResult {
            name: format!("{}.{}", layer.mode(), layer_param_name(key)),
            relative_error: relative_error(analytic, &numeric)?,
            elements: numeric.numel(),
        });
    }
    Ok(results)
}

fn layer_param_name(p: LayerParam) -> &'static str {
    match p {
        LayerParam::Weight => "weight",
        LayerParam::Down => "down",
        LayerParam::Up => "up",
    }
}

/// Checks every trainable parameter of a model on one batch.
pub fn check_model(model: &TransformerModel, batch: &TokenBatch) -> Result<Vec<CheckResult>> {
    let (_, tape) = model.forward_loss(batch)?;
    let grads = model.backward(&tape)?;
    let mut probe = model.clone();
    let mut results = Vec::new();
    for key in model.trainable_keys() {
        let analytic = grads
            .get(&key)
            .ok_or_else(|| dim_err("check_model", format!("no gradient for {key}")))?;
        let current = model.param(&key).expect("trainable key exists").clone();
        let numeric = numeric_gradient(
            |p| {
                *probe.param_mut(&key).expect("trainable") = p.clone();
                Ok(probe.forward_loss(batch)?.0)
            },
            &current,
        )?;
        *probe.param_mut(&key).expect("trainable") = current;
        results.push(CheckResult {
            name: key.to_string(),
            relative_error: relative_error(analytic, &numeric)?,
            elements: numeric.numel(),
        });
    }
    Ok(results)
}

/// Gives every adapter a random `B` so adapter gradients are non-trivial.
pub fn randomize_adapters(model: &mut TransformerModel, std: f64, rng: &mut RngState) -> Result<()> {
    let keys: Vec<_> = model.linear_layers().map(|(b, s, _)| (b, s)).collect();
    for (b, s) in keys {
        let layer = model.layer_mut(b, s).expect("listed layer");
        if let Some(up) = layer.up() {
            let fresh = randn(up.shape(), rng, std)?;
            layer.set_up(fresh)?;
        }
    }
    Ok(())
}

/// Tolerance for primitive ops and single layers.
pub const OP_TOLERANCE: f64 = 1e-5;
/// Tolerance for the whole-model check.
pub const MODEL_TOLERANCE: f64 = 1e-4;

fn dim(rng: &mut RngState, max: usize) -> usize {
    1 + rng.below(max)
}

/// Every primitive op, the loss head, and the adapted layer in every mode,
/// each on `shapes` random shapes.
pub fn random_shape_suite(shapes: usize, seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = RngState::with_stream(seed, 31);
    let mut out = Vec::new();
    for _ in 0..shapes {
        let (m, k, n) = (dim(&mut rng, 6), dim(&mut rng, 6), dim(&mut rng, 6));
        let batch = dim(&mut rng, 3);
        let r = &mut rng;
        out.extend(check_op(&OpKind::MatMul, &[randn(&[m, k], r, 1.0)?, randn(&[k, n], r, 1.0)?], r)?);
        out.extend(check_op(
            &OpKind::MatMul,
            &[randn(&[batch, m, k], r, 1.0)?, randn(&[batch, k, n], r, 1.0)?],
            r,
        )?);
        out.extend(check_op(&OpKind::Add, &[randn(&[m, n], r, 1.0)?, randn(&[n], r, 1.0)?], r)?);
        out.extend(check_op(&OpKind::Scale(0.5 + r.uniform()), &[randn(&[m, n], r, 1.0)?], r)?);
        out.extend(check_op(&OpKind::Gelu, &[randn(&[m, n], r, 1.5)?], r)?);
        out.extend(check_op(&OpKind::SoftmaxRows, &[randn(&[m, n], r, 1.0)?], r)?);
        // width 2 normalizes to ±1 and leaves an O(eps) gradient below difference noise
        let width = 3 + r.below(6);
        out.extend(check_op(
            &OpKind::LayerNorm { eps: 1e-5 },
            &[randn(&[m, width], r, 1.0)?, randn(&[width], r, 1.0)?, randn(&[width], r, 1.0)?],
            r,
        )?);
        let heads = 1 + r.below(2);
        let dh = dim(r, 3);
        let seq = dim(r, 5);
        let shape = [batch, seq, heads * dh];
        out.extend(check_op(
            &OpKind::CausalAttention { heads },
            &[randn(&shape, r, 1.0)?, randn(&shape, r, 1.0)?, randn(&shape, r, 1.0)?],
            r,
        )?);
        out.push(check_cross_entropy(m, n + 1, r)?);
        for mode in crate::adapters::AdaptationMode::ALL {
            let (d_in, d_out) = (dim(r, 6), dim(r, 6));
            let rank = 1 + r.below(d_in.min(d_out));
            let mut layer = AdaptedLinear::init(d_in, d_out, mode, crate::adapters::AdapterInit::new(rank), r)?;
            if let Some(up) = layer.up() {
                let fresh = randn(up.shape(), r, 1.0)?;
                layer.set_up(fresh)?;
            }
            let x = randn(&[batch, m, d_in], r, 1.0)?;
            out.extend(check_layer(&layer, &x, r)?);
        }
    }
    Ok(out)
}

fn check_cross_entropy(rows: usize, vocab: usize, rng: &mut RngState) -> Result<CheckResult> {
    let logits = randn(&[rows, vocab], rng, 1.0)?;
    let mut targets: Vec<Option<usize>> = (0..rows).map(|_| Some(rng.below(vocab))).collect();
    if rows > 1 {
        targets[0] = None;
    }
    let (_, probs) = cross_entropy(&logits, &targets)?;
    let analytic = cross_entropy_backward(&probs, &targets)?;
    let numeric = numeric_gradient(|l| Ok(cross_entropy(l, &targets)?.0), &logits)?;
    Ok(CheckResult {
        name: "cross_entropy".into(),
        relative_error: relative_error(&analytic, &numeric)?,
        elements: logits.numel(),
    })
}

/// Whole-model check at `d=8, L=1, vocab=11` for each training mode, with
/// random adapters so their gradients are non-trivial.
pub fn tiny_model_suite(seed: u64) -> Result<Vec<CheckResult>> {
    use crate::adapters::{AdaptationMode, AdapterInit};
    use crate::model::{build_model, ModelConfig};

    let c = ModelConfig::new(8, 1, 2, 11, 5, 2);
    let mut rng = RngState::with_stream(seed, 32);
    let n = c.batch * c.seq_len;
    let tokens = (0..n).map(|_| rng.below(c.vocab)).collect();
    let targets = (0..n).map(|i| (i % 4 != 0).then(|| rng.below(c.vocab))).collect();
    let batch = TokenBatch::new(tokens, targets, c.batch, c.seq_len)?;
    let mut out = Vec::new();
    for mode in [AdaptationMode::Ft, AdaptationMode::Lora, AdaptationMode::LoraFa] {
        let mut m = build_model(c, mode, AdapterInit::new(2), seed)?;
        randomize_adapters(&mut m, 0.5, &mut rng)?;
        out.extend(check_model(&m, &batch)?.into_iter().map(|mut r| {
            r.name = format!("{mode}:{}", r.name);
            r
        }));
    }
    Ok(out)
}

pub fn max_error(results: &[CheckResult]) -> f64 {
    results.iter().map(|r| r.relative_error).fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::{AdaptationMode, AdapterInit};
    use crate::model::{build_model, ModelConfig};

    #[test]
    fn numeric_gradient_of_a_quadratic() {
        let x = Tensor::from_rows(&[[1.0, -2.0, 3.0]]).unwrap();
        let g = numeric_gradient(|t| Ok(t.data().iter().map(|v| v * v).sum()), &x).unwrap();
        let expect = Tensor::from_rows(&[[2.0, -4.0, 6.0]]).unwrap();
        assert!(g.max_abs_diff(&expect).unwrap() < 1e-8);
    }

    #[test]
    fn relative_error_handles_zero() {
        let z = Tensor::zeros(&[3]).unwrap();
        assert_eq!(relative_error(&z, &z).unwrap(), 0.0);
    }

    #[test]
    fn gelu_and_layer_norm_pass() {
        let mut rng = RngState::new(4);
        let x = randn(&[3, 5], &mut rng, 1.0).unwrap();
        let r = check_op(&OpKind::Gelu, std::slice::from_ref(&x), &mut rng).unwrap();
        assert!(max_error(&r) < 1e-6);
        let g = randn(&[5], &mut rng, 1.0).unwrap();
        let b = randn(&[5], &mut rng, 1.0).unwrap();
        let r = check_op(&OpKind::LayerNorm { eps: 1e-5 }, &[x, g, b], &mut rng).unwrap();
        assert!(max_error(&r) < 1e-5, "{r:?}");
    }

    #[test]
    fn suite_on_a_few_shapes() {
        let r = random_shape_suite(2, 9).unwrap();
        assert!(max_error(&r) < OP_TOLERANCE, "{:?}", r.iter().max_by(|a, b| a.relative_error.total_cmp(&b.relative_error)));
    }

    #[test]
    fn tiny_lora_fa_model() {
        let c = ModelConfig::new(8, 1, 2, 11, 4, 2);
        let mut m = build_model(c, AdaptationMode::LoraFa, AdapterInit::new(2), 3).unwrap();
        let mut rng = RngState::new(1);
        randomize_adapters(&mut m, 0.5, &mut rng).unwrap();
        let n = c.batch * c.seq_len;
        let tokens = (0..n).map(|_| rng.below(11)).collect();
        let targets = (0..n).map(|_| Some(rng.below(11))).collect();
        let batch = TokenBatch::new(tokens, targets, c.batch, c.seq_len).unwrap();
        let r = check_model(&m, &batch).unwrap();
        assert_eq!(r.len(), 6);
        assert!(max_error(&r) < 1e-4, "{r:?}");
    }
}
