//! The adapted linear layer `y = x·W + α·(x·A)·B`.
//!
//! `A` (`d_in×r`) projects inputs down to rank `r`; `B` (`r×d_out`) projects
//! back up. The [`AdaptationMode`] fixes which of `W`, `A`, `B` train and,
//! through that, which forward tensors the layer keeps for its backward pass:
//!
//! | mode     | trains  | keeps              |
//! |----------|---------|--------------------|
//! | `ft`     | W       | x                  |
//! | `lora`   | A, B    | x and x·A          |
//! | `lora-fa`| B       | x·A                |
//! | `frozen` | nothing | nothing            |
//!
//! In `lora-fa` mode the full-width input is never stored: the gradient of `B`
//! is `α·(x·A)ᵀ·dY`, which needs only the rank-`r` product.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::optim::ParamStore;
use crate::tensor::{add, matmul, matmul_nt, matmul_tn, randn, scale, RngState, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AdaptationMode {
    /// Full fine-tuning: `W` trains, no adapter.
    #[serde(rename = "ft")]
    Ft,
    /// `W` frozen; `A` and `B` train.
    #[serde(rename = "lora")]
    Lora,
    /// `W` and `A` frozen; only `B` trains.
    #[serde(rename = "lora-fa")]
    LoraFa,
    #[serde(rename = "frozen")]
    Frozen,
}

impl AdaptationMode {
    pub const ALL: [AdaptationMode; 4] = [
        AdaptationMode::Ft,
        AdaptationMode::Lora,
        AdaptationMode::LoraFa,
        AdaptationMode::Frozen,
    ];

    pub fn has_adapter(self) -> bool {
        matches!(self, AdaptationMode::Lora | AdaptationMode::LoraFa)
    }

    /// Whether the layer must keep its full-width input for backward.
    pub fn keeps_full_input(self) -> bool {
        matches!(self, AdaptationMode::Ft | AdaptationMode::Lora)
    }

    pub fn trains_anything(self) -> bool {
        self != AdaptationMode::Frozen
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AdaptationMode::Ft => "ft",
            AdaptationMode::Lora => "lora",
            AdaptationMode::LoraFa => "lora-fa",
            AdaptationMode::Frozen => "frozen",
        }
    }
}

impl fmt::Display for AdaptationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AdaptationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ft" | "full" => Ok(AdaptationMode::Ft),
            "lora" => Ok(AdaptationMode::Lora),
            "lora-fa" | "lorafa" | "lora_fa" => Ok(AdaptationMode::LoraFa),
            "frozen" => Ok(AdaptationMode::Frozen),
            other => Err(Error::Parameter(format!("unknown adaptation mode {other:?}"))),
        }
    }
}

/// Adapter hyper-parameters shared by every layer of a model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterInit {
    pub rank: usize,
    /// Defaults to `1 / rank`.
    pub alpha: Option<f64>,
    /// Standard deviation of the entries of `A`. Unit variance makes
    /// `E[A·Aᵀ] = r·I` hold exactly.
    pub a_std: f64,
}

impl AdapterInit {
    pub fn new(rank: usize) -> Self {
        Self {
            rank,
            alpha: None,
            a_std: 1.0,
        }
    }

    pub fn alpha(&self) -> f64 {
        self.alpha.unwrap_or(1.0 / self.rank.max(1) as f64)
    }
}

/// Forward tensors a layer keeps for its backward pass. Only
/// [`AdaptedLinear::forward`] can build one, and in `lora-fa` mode it never
/// holds the full-width input.
#[derive(Clone, Debug, Default)]
pub struct RetainedActivations {
    full: Option<Tensor>,
    low: Option<Tensor>,
}

impl RetainedActivations {
    pub fn full_input(&self) -> Result<&Tensor> {
        self.full.as_ref().ok_or_else(|| {
            Error::RetentionPolicy("full-width layer input was not retained".into())
        })
    }

    pub fn low_rank_input(&self) -> Result<&Tensor> {
        self.low.as_ref().ok_or_else(|| {
            Error::RetentionPolicy("low-rank layer input x·A was not retained".into())
        })
    }

    pub fn has_full_input(&self) -> bool {
        self.full.is_some()
    }

    pub fn has_low_rank_input(&self) -> bool {
        self.low.is_some()
    }

    /// Total elements held, counting a shared buffer once per holder.
    pub fn elements(&self) -> usize {
        self.full.as_ref().map_or(0, Tensor::numel) + self.low.as_ref().map_or(0, Tensor::numel)
    }
}

/// Gradients a layer emits; frozen parameters get no entry at all.
#[derive(Clone, Debug, Default)]
pub struct LayerGrads {
    pub weight: Option<Tensor>,
    pub down: Option<Tensor>,
    pub up: Option<Tensor>,
}

impl LayerGrads {
    pub fn len(&self) -> usize {
        [&self.weight, &self.down, &self.up]
            .iter()
            .filter(|g| g.is_some())
            .count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Linear layer `W` (`d_in×d_out`) with an optional rank-`r` adapter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptedLinear {
    weight: Tensor,
    /// `A`, projection-down, `d_in×r`.
    down: Option<Tensor>,
    /// `B`, projection-up, `r×d_out`.
    up: Option<Tensor>,
    rank: usize,
    alpha: f64,
    mode: AdaptationMode,
}

/// Stand-in for a pretrained weight: i.i.d. normal with std `1/√d_in`.
pub fn sample_weight(d_in: usize, d_out: usize, rng: &mut RngState) -> Result<Tensor> {
    randn(&[d_in, d_out], rng, 1.0 / (d_in as f64).sqrt())
}

impl AdaptedLinear {
    /// Wraps `weight` in a layer of the given mode. Adapter modes draw `A`
    /// from `rng` and start `B` at zero, so the layer initially computes
    /// exactly `x·W`.
    pub fn new(weight: Tensor, mode: AdaptationMode, init: AdapterInit, rng: &mut RngState) -> Result<Self> {
        if weight.shape().len() != 2 {
            return Err(dim_err("AdaptedLinear::new", format!("weight must be a matrix, got {:?}", weight.shape())));
        }
        let (d_in, d_out) = (weight.shape()[0], weight.shape()[1]);
        if !mode.has_adapter() {
            return Ok(Self {
                weight,
                down: None,
                up: None,
                rank: 0,
                alpha: 0.0,
                mode,
            });
        }
        let r = init.rank;
        if r == 0 || r > d_in.min(d_out) {
            return Err(Error::Parameter(format!(
                "rank {r} must be in 1..={} for a {d_in}x{d_out} layer",
                d_in.min(d_out)
            )));
        }
        let alpha = init.alpha();
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::Parameter(format!("alpha must be positive, got {alpha}")));
        }
        let down = randn(&[d_in, r], rng, init.a_std)?.with_precision(weight.precision());
        let up = Tensor::zeros(&[r, d_out])?.with_precision(weight.precision());
        Ok(Self {
            weight,
            down: Some(down),
            up: Some(up),
            rank: r,
            alpha,
            mode,
        })
    }

    /// Samples `W` as well; see [`sample_weight`].
    pub fn init(
        d_in: usize,
        d_out: usize,
        mode: AdaptationMode,
        init: AdapterInit,
        rng: &mut RngState,
    ) -> Result<Self> {
        let w = sample_weight(d_in, d_out, rng)?;
        Self::new(w, mode, init, rng)
    }

    /// Layer from explicit matrices.
    pub fn from_parts(
        weight: Tensor,
        down: Option<Tensor>,
        up: Option<Tensor>,
        alpha: f64,
        mode: AdaptationMode,
    ) -> Result<Self> {
        let rank = down.as_ref().map_or(0, Tensor::cols);
        let layer = Self {
            weight,
            down,
            up,
            rank,
            alpha,
            mode,
        };
        layer.validate()?;
        Ok(layer)
    }

    /// Checks the structural invariants; used after deserialization.
    pub fn validate(&self) -> Result<()> {
        let s = self.weight.shape();
        if s.len() != 2 {
            return Err(dim_err("AdaptedLinear", "weight must be a matrix"));
        }
        let (d_in, d_out) = (s[0], s[1]);
        match (self.mode.has_adapter(), &self.down, &self.up) {
            (false, None, None) => Ok(()),
            (false, _, _) => Err(Error::Mode(format!("{} layers carry no adapter", self.mode))),
            (true, Some(a), Some(b)) => {
                let r = self.rank;
                if r == 0 || r > d_in.min(d_out) {
                    return Err(Error::Parameter(format!("rank {r} invalid for {d_in}x{d_out}")));
                }
                if a.shape() != [d_in, r] || b.shape() != [r, d_out] {
                    return Err(dim_err(
                        "AdaptedLinear",
                        format!("A {:?}, B {:?} for W {:?}", a.shape(), b.shape(), s),
                    ));
                }
                if !(self.alpha > 0.0 && self.alpha.is_finite()) {
                    return Err(Error::Parameter(format!("alpha must be positive, got {}", self.alpha)));
                }
                Ok(())
            }
            (true, _, _) => Err(Error::Mode(format!("{} layers need both A and B", self.mode))),
        }
    }

    pub fn mode(&self) -> AdaptationMode {
        self.mode
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn d_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn down(&self) -> Option<&Tensor> {
        self.down.as_ref()
    }

    pub fn up(&self) -> Option<&Tensor> {
        self.up.as_ref()
    }

    /// Replaces `B`, keeping its shape. For tests and checkpoint tooling.
    pub fn set_up(&mut self, up: Tensor) -> Result<()> {
        match &self.up {
            Some(old) => {
                old.check_same_shape("set_up", &up)?;
                self.up = Some(up);
                Ok(())
            }
            None => Err(Error::Mode(format!("{} layers have no B", self.mode))),
        }
    }

    fn adapter(&self) -> Result<(&Tensor, &Tensor)> {
        match (&self.down, &self.up) {
            (Some(a), Some(b)) => Ok((a, b)),
            _ => Err(Error::Mode(format!("{} layers have no adapter", self.mode))),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, RetainedActivations)> {
        if x.cols() != self.d_in() {
            return Err(dim_err(
                "AdaptedLinear::forward",
                format!("input {:?} for d_in {}", x.shape(), self.d_in()),
            ));
        }
        let base = matmul(x, &self.weight)?;
        match self.mode {
            AdaptationMode::Frozen => Ok((base, RetainedActivations::default())),
            AdaptationMode::Ft => Ok((
                base,
                RetainedActivations {
                    full: Some(x.clone()),
                    low: None,
                },
            )),
            AdaptationMode::Lora | AdaptationMode::LoraFa => {
                let (a, b) = self.adapter()?;
                let low = matmul(x, a)?;
                let y = add(&base, &scale(&matmul(&low, b)?, self.alpha)?)?;
                let full = (self.mode == AdaptationMode::Lora).then(|| x.clone());
                Ok((y, RetainedActivations { full, low: Some(low) }))
            }
        }
    }

    /// Returns `dX` and the gradients of the mode's trainable parameters.
    /// Batch and sequence axes are folded into rows; nothing is averaged.
    pub fn backward(&self, kept: &RetainedActivations, dy: &Tensor) -> Result<(Tensor, LayerGrads)> {
        if dy.cols() != self.d_out() {
            return Err(dim_err(
                "AdaptedLinear::backward",
                format!("upstream {:?} for d_out {}", dy.shape(), self.d_out()),
            ));
        }
        let mut dx = matmul_nt(dy, &self.weight)?;
        let mut grads = LayerGrads::default();
        match self.mode {
            AdaptationMode::Frozen => {}
            AdaptationMode::Ft => {
                grads.weight = Some(matmul_tn(kept.full_input()?, dy)?);
            }
            AdaptationMode::Lora | AdaptationMode::LoraFa => {
                let (a, b) = self.adapter()?;
                let dlow = matmul_nt(dy, b)?;
                dx = add(&dx, &scale(&matmul_nt(&dlow, a)?, self.alpha)?)?;
                if self.mode == AdaptationMode::Lora {
                    grads.down = Some(scale(&matmul_tn(kept.full_input()?, &dlow)?, self.alpha)?);
                }
                grads.up = Some(scale(&matmul_tn(kept.low_rank_input()?, dy)?, self.alpha)?);
            }
        }
        Ok((dx, grads))
    }

    /// Dense weight `W + α·A·B` for inference.
    pub fn merge(&self) -> Result<Tensor> {
        let (a, b) = self.adapter()?;
        add(&self.weight, &scale(&matmul(a, b)?, self.alpha)?)
    }

    /// Activation elements this layer keeps for a `b×s` batch, before any
    /// sharing of inputs between layers.
    pub fn retained_elements(&self, b: usize, s: usize) -> usize {
        let tokens = b * s;
        let full = if self.mode.keeps_full_input() { tokens * self.d_in() } else { 0 };
        let low = if self.mode.has_adapter() { tokens * self.rank } else { 0 };
        full + low
    }

    pub fn trainable_count(&self) -> usize {
        match self.mode {
            AdaptationMode::Ft => self.d_in() * self.d_out(),
            AdaptationMode::Lora => (self.d_in() + self.d_out()) * self.rank,
            AdaptationMode::LoraFa => self.rank * self.d_out(),
            AdaptationMode::Frozen => 0,
        }
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let layer: Self = serde_json::from_slice(&std::fs::read(path)?)?;
        layer.validate()?;
        Ok(layer)
    }
}

/// Parameters of a single layer, as seen by the optimizers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum LayerParam {
    Weight,
    Down,
    Up,
}

impl LayerGrads {
    pub fn into_map(self) -> std::collections::BTreeMap<LayerParam, Tensor> {
        [
            (LayerParam::Weight, self.weight),
            (LayerParam::Down, self.down),
            (LayerParam::Up, self.up),
        ]
        .into_iter()
        .filter_map(|(k, g)| g.map(|g| (k, g)))
        .collect()
    }
}

impl ParamStore for AdaptedLinear {
    type Key = LayerParam;

    fn trainable_keys(&self) -> Vec<LayerParam> {
        match self.mode {
            AdaptationMode::Ft => vec![LayerParam::Weight],
            AdaptationMode::Lora => vec![LayerParam::Down, LayerParam::Up],
            AdaptationMode::LoraFa => vec![LayerParam::Up],
            AdaptationMode::Frozen => vec![],
        }
    }

    fn param(&self, key: &LayerParam) -> Option<&Tensor> {
        match key {
            LayerParam::Weight => Some(&self.weight),
            LayerParam::Down => self.down.as_ref(),
            LayerParam::Up => self.up.as_ref(),
        }
    }

    fn param_mut(&mut self, key: &LayerParam) -> Option<&mut Tensor> {
        if !self.trainable_keys().contains(key) {
            return None;
        }
        match key {
            LayerParam::Weight => Some(&mut self.weight),
            LayerParam::Down => self.down.as_mut(),
            LayerParam::Up => self.up.as_mut(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{numerical_rank, RANK_TOLERANCE};

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    fn worked_layer(mode: AdaptationMode) -> AdaptedLinear {
        AdaptedLinear::from_parts(
            Tensor::eye(2).unwrap(),
            Some(m(&[&[1.], &[0.]])),
            Some(m(&[&[2., 3.]])),
            1.0,
            mode,
        )
        .unwrap()
    }

    #[test]
    fn worked_forward() {
        let (y, kept) = worked_layer(AdaptationMode::LoraFa).forward(&m(&[&[1., 0.]])).unwrap();
        assert_eq!(y.data(), &[3., 3.]);
        assert!(!kept.has_full_input());
        assert_eq!(kept.low_rank_input().unwrap().data(), &[1.]);
    }

    #[test]
    fn worked_backward_up_gradient() {
        let x = m(&[&[1., 0.]]);
        let dy = m(&[&[2., 3.]]);
        for mode in [AdaptationMode::Lora, AdaptationMode::LoraFa] {
            let layer = worked_layer(mode);
            let (_, kept) = layer.forward(&x).unwrap();
            let (_, g) = layer.backward(&kept, &dy).unwrap();
            assert_eq!(g.up.unwrap().data(), &[2., 3.]);
            assert_eq!(g.down.is_some(), mode == AdaptationMode::Lora);
            assert!(g.weight.is_none());
        }
    }

    #[test]
    fn lora_fa_cannot_produce_a_gradient_for_down() {
        // Even a LoRA-mode backward fails when handed LoRA-FA retention.
        let x = m(&[&[1., 0.]]);
        let (_, kept) = worked_layer(AdaptationMode::LoraFa).forward(&x).unwrap();
        let err = worked_layer(AdaptationMode::Lora)
            .backward(&kept, &m(&[&[2., 3.]]))
            .unwrap_err();
        assert!(matches!(err, Error::RetentionPolicy(_)));
    }

    #[test]
    fn fresh_adapter_is_transparent() {
        let mut rng = RngState::new(1);
        let w = sample_weight(6, 5, &mut rng).unwrap();
        let x = randn(&[2, 3, 6], &mut rng, 1.0).unwrap();
        let plain = matmul(&x, &w).unwrap();
        for mode in [AdaptationMode::Lora, AdaptationMode::LoraFa] {
            let layer = AdaptedLinear::new(w.clone(), mode, AdapterInit::new(3), &mut rng).unwrap();
            assert!(layer.up().unwrap().data().iter().all(|&v| v == 0.0));
            let (y, _) = layer.forward(&x).unwrap();
            assert!(y.bitwise_eq(&plain));
            assert!(layer.merge().unwrap().bitwise_eq(&w));
        }
    }

    #[test]
    fn rank_validation() {
        let mut rng = RngState::new(0);
        let err = AdaptedLinear::init(4, 16, AdaptationMode::Lora, AdapterInit::new(5), &mut rng);
        assert!(matches!(err, Err(Error::Parameter(_))));
        let err = AdaptedLinear::init(4, 16, AdaptationMode::Lora, AdapterInit::new(0), &mut rng);
        assert!(matches!(err, Err(Error::Parameter(_))));
        assert!(AdaptedLinear::init(4, 16, AdaptationMode::LoraFa, AdapterInit::new(4), &mut rng).is_ok());
        let ft = AdaptedLinear::init(4, 16, AdaptationMode::Ft, AdapterInit::new(99), &mut rng).unwrap();
        assert!(ft.down().is_none() && ft.up().is_none());
    }

    #[test]
    fn default_alpha_is_inverse_rank() {
        let layer = AdaptedLinear::init(8, 8, AdaptationMode::Lora, AdapterInit::new(4), &mut RngState::new(2)).unwrap();
        assert_eq!(layer.alpha(), 0.25);
    }

    #[test]
    fn down_projection_has_full_rank_across_seeds() {
        for seed in 0..100 {
            let layer = AdaptedLinear::init(64, 64, AdaptationMode::LoraFa, AdapterInit::new(8), &mut RngState::new(seed)).unwrap();
            assert_eq!(numerical_rank(layer.down().unwrap(), RANK_TOLERANCE).unwrap(), 8);
        }
    }

    #[test]
    fn merge_requires_adapter_and_is_pure() {
        let mut rng = RngState::new(3);
        let ft = AdaptedLinear::init(3, 3, AdaptationMode::Ft, AdapterInit::new(1), &mut rng).unwrap();
        assert!(matches!(ft.merge(), Err(Error::Mode(_))));
        let mut layer = AdaptedLinear::init(5, 3, AdaptationMode::Lora, AdapterInit::new(2), &mut rng).unwrap();
        layer.set_up(randn(&[2, 3], &mut rng, 1.0).unwrap()).unwrap();
        assert!(layer.merge().unwrap().bitwise_eq(&layer.merge().unwrap()));
        let x = randn(&[4, 5], &mut rng, 1.0).unwrap();
        let merged = matmul(&x, &layer.merge().unwrap()).unwrap();
        let (y, _) = layer.forward(&x).unwrap();
        assert!(merged.max_abs_diff(&y).unwrap() < 1e-12);
    }

    #[test]
    fn retained_element_counts() {
        let mut rng = RngState::new(0);
        let fa = AdaptedLinear::init(8, 8, AdaptationMode::LoraFa, AdapterInit::new(4), &mut rng).unwrap();
        assert_eq!(fa.retained_elements(1, 1), 4);
        let ft = AdaptedLinear::init(8, 8, AdaptationMode::Ft, AdapterInit::new(4), &mut rng).unwrap();
        assert_eq!(ft.retained_elements(2, 3), 48);
        let frozen = AdaptedLinear::init(8, 8, AdaptationMode::Frozen, AdapterInit::new(4), &mut rng).unwrap();
        assert_eq!(frozen.retained_elements(5, 5), 0);

        // measured against what forward actually keeps
        let x = randn(&[2, 3, 8], &mut rng, 1.0).unwrap();
        for layer in [&fa, &ft, &frozen] {
            let (_, kept) = layer.forward(&x).unwrap();
            assert_eq!(kept.elements(), layer.retained_elements(2, 3));
        }
    }

    #[test]
    fn frozen_and_lora_fa_keys() {
        let mut rng = RngState::new(0);
        let mut fa = AdaptedLinear::init(4, 4, AdaptationMode::LoraFa, AdapterInit::new(2), &mut rng).unwrap();
        assert!(fa.param_mut(&LayerParam::Down).is_none());
        assert!(fa.param_mut(&LayerParam::Weight).is_none());
        assert!(fa.param_mut(&LayerParam::Up).is_some());
    }

    #[test]
    fn snapshot_round_trip() {
        let mut rng = RngState::new(8);
        let mut layer = AdaptedLinear::init(4, 3, AdaptationMode::LoraFa, AdapterInit::new(2), &mut rng).unwrap();
        layer.set_up(randn(&[2, 3], &mut rng, 0.3).unwrap()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("layer.json");
        layer.save_json(&path).unwrap();
        assert_eq!(AdaptedLinear::load_json(&path).unwrap(), layer);
    }
}
