//! Numerical checks that a frozen-`A` adapter step is a compressed gradient step.
//!
//! With `A` frozen, one SGD step on `B` moves the merged weight by
//! `−η·α²·A·Aᵀ·dW`, where `dW = XᵀdY` is the full-weight gradient. Every
//! update therefore stays inside the column space of `A`, and because
//! `E[A·Aᵀ] = r·I` for unit-normal `A` the projected gradient is unbiased up
//! to the factor `r`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapters::{AdaptationMode, AdaptedLinear, LayerParam};
use crate::error::{dim_err, Error, Result};
use crate::optim::{sgd_step, Grads, SgdConfig};
use crate::tensor::{matmul, matmul_nt, matmul_tn, numerical_rank, qr, randn, scale, sub, RngState, Tensor, RANK_TOLERANCE};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompressionTranscript {
    pub dw: Tensor,
    /// `Aᵀ·dW`, `r×d_out`.
    pub compressed: Tensor,
    /// `A·Aᵀ·dW`, `d_in×d_out`.
    pub decompressed: Tensor,
}

pub fn compress_decompress(a: &Tensor, dw: &Tensor) -> Result<CompressionTranscript> {
    if a.shape().len() != 2 || dw.shape().len() != 2 || a.shape()[0] != dw.shape()[0] {
        return Err(dim_err(
            "compress_decompress",
            format!("A {:?} against dW {:?}", a.shape(), dw.shape()),
        ));
    }
    let compressed = matmul_tn(a, dw)?;
    let decompressed = matmul(a, &compressed)?;
    Ok(CompressionTranscript {
        dw: dw.clone(),
        compressed,
        decompressed,
    })
}

/// Takes one SGD step of size `eta` on a LoRA-FA layer and returns the
/// largest absolute gap between the observed merged-weight change and
/// `−η·α²·A·Aᵀ·XᵀdY`.
pub fn verify_sgd_equivalence(layer: &AdaptedLinear, x: &Tensor, dy: &Tensor, eta: f64) -> Result<f64> {
    Ok(sgd_equivalence_terms(layer, x, dy, eta)?.discrepancy)
}

/// Both sides of the SGD identity, for inspection.
#[derive(Clone, Debug)]
pub struct SgdEquivalence {
    pub observed: Tensor,
    pub predicted: Tensor,
    pub discrepancy: f64,
}

pub fn sgd_equivalence_terms(layer: &AdaptedLinear, x: &Tensor, dy: &Tensor, eta: f64) -> Result<SgdEquivalence> {
    if layer.mode() != AdaptationMode::LoraFa {
        return Err(Error::Mode(format!("SGD equivalence needs a lora-fa layer, got {}", layer.mode())));
    }
    let before = layer.merge()?;
    let (_, kept) = layer.forward(x)?;
    let (_, grads) = layer.backward(&kept, dy)?;
    let mut stepped = layer.clone();
    let grads: Grads<LayerParam> = grads.into_map();
    if eta < 0.0 || !eta.is_finite() {
        return Err(Error::Parameter(format!("learning rate must be finite and >= 0, got {eta}")));
    }
    if eta > 0.0 {
        sgd_step(&mut stepped, &grads, &SgdConfig { lr: eta })?;
    }
    let observed = sub(&stepped.merge()?, &before)?;

    let a = layer.down().expect("lora-fa layers carry A");
    let dw = matmul_tn(x, dy)?;
    let alpha = layer.alpha();
    let predicted = scale(&compress_decompress(a, &dw)?.decompressed, -eta * alpha * alpha)?;
    let discrepancy = observed.max_abs_diff(&predicted)?;
    Ok(SgdEquivalence {
        observed,
        predicted,
        discrepancy,
    })
}

/// Samples per worker chunk; fixes the split so results do not depend on the
/// thread count.
const CHUNK: usize = 4096;

/// Monte-Carlo estimate of `‖mean(A·Aᵀ) − r·I‖_F / ‖r·I‖_F` over
/// `num_samples` unit-normal `d×r` matrices.
pub fn estimate_unbiasedness(d: usize, r: usize, num_samples: usize, rng: &RngState) -> Result<f64> {
    if d == 0 || r == 0 || num_samples == 0 {
        return Err(Error::Parameter("d, r and num_samples must be positive".into()));
    }
    let chunks = num_samples.div_ceil(CHUNK);
    let sums: Vec<Vec<f64>> = (0..chunks)
        .into_par_iter()
        .map(|c| -> Result<Vec<f64>> {
            let mut local = RngState::with_stream(rng.seed(), rng.stream().wrapping_add(1 + c as u64));
            let n = CHUNK.min(num_samples - c * CHUNK);
            let mut acc = vec![0.0; d * d];
            for _ in 0..n {
                let a = randn(&[d, r], &mut local, 1.0)?;
                let aat = matmul_nt(&a, &a)?;
                acc.iter_mut().zip(aat.data()).for_each(|(s, v)| *s += v);
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    let mut mean = vec![0.0; d * d];
    for s in &sums {
        mean.iter_mut().zip(s).for_each(|(m, v)| *m += v);
    }
    let n = num_samples as f64;
    let mut err = 0.0;
    for i in 0..d {
        for j in 0..d {
            let target = if i == j { r as f64 } else { 0.0 };
            let diff = mean[i * d + j] / n - target;
            err += diff * diff;
        }
    }
    Ok(err.sqrt() / (r as f64 * (d as f64).sqrt()))
}

/// Error decay of the unbiasedness estimate with sample count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecayFit {
    pub samples: Vec<usize>,
    /// Root-mean-square error over the repeats at each sample count.
    pub errors: Vec<f64>,
    /// Least-squares slope of `ln error` against `ln samples`; `−0.5` at the Monte-Carlo rate.
    pub slope: f64,
}

/// Runs [`estimate_unbiasedness`] at `base·4^k` samples for `k < points`,
/// `repeats` independent times each, and fits the log-log slope.
pub fn unbiasedness_decay(
    d: usize,
    r: usize,
    base: usize,
    points: usize,
    repeats: usize,
    rng: &RngState,
) -> Result<DecayFit> {
    if points < 2 || repeats == 0 {
        return Err(Error::Parameter("need at least two points and one repeat".into()));
    }
    let mut samples = Vec::with_capacity(points);
    let mut errors = Vec::with_capacity(points);
    for k in 0..points {
        let n = base * 4usize.pow(k as u32);
        let mut sq = 0.0;
        for rep in 0..repeats {
            // disjoint stream ranges per (point, repeat)
            let stream = rng.stream().wrapping_add(((k * repeats + rep) as u64 + 1) << 32);
            let e = estimate_unbiasedness(d, r, n, &RngState::with_stream(rng.seed(), stream))?;
            sq += e * e;
        }
        samples.push(n);
        errors.push((sq / repeats as f64).sqrt());
    }
    let xs: Vec<f64> = samples.iter().map(|&n| (n as f64).ln()).collect();
    let ys: Vec<f64> = errors.iter().map(|e| e.ln()).collect();
    let (mx, my) = (xs.iter().sum::<f64>() / points as f64, ys.iter().sum::<f64>() / points as f64);
    let cov: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    Ok(DecayFit {
        samples,
        errors,
        slope: cov / var,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubspaceReport {
    /// Orthonormal basis of `col(A)`.
    pub q: Tensor,
    /// `R` from `A = Q·R`; `B̄ = R·B` expresses the update in the basis `Q`.
    pub r: Tensor,
    pub residual: f64,
    pub numerical_rank: usize,
}

impl SubspaceReport {
    pub fn rbar(&self, up: &Tensor) -> Result<Tensor> {
        matmul(&self.r, up)
    }
}

/// Relative Frobenius residual of `ΔW` off the column space of `A`.
pub fn subspace_check(a: &Tensor, delta_w: &Tensor) -> Result<SubspaceReport> {
    if a.shape().len() != 2 || delta_w.shape().len() != 2 || a.shape()[0] != delta_w.shape()[0] {
        return Err(dim_err(
            "subspace_check",
            format!("A {:?} against dW {:?}", a.shape(), delta_w.shape()),
        ));
    }
    let (q, r) = qr(a)?;
    let norm = delta_w.frobenius();
    let (residual, numerical_rank) = if norm == 0.0 {
        (0.0, 0)
    } else {
        let projected = matmul(&q, &matmul_tn(&q, delta_w)?)?;
        let off = sub(delta_w, &projected)?;
        (off.frobenius() / norm, numerical_rank(delta_w, RANK_TOLERANCE)?)
    };
    Ok(SubspaceReport {
        q,
        r,
        residual,
        numerical_rank,
    })
}
