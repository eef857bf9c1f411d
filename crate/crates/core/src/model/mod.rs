//! GPT-style decoder assembled from [`AdaptedLinear`] layers.
//!
//! Each block is pre-norm: `h += Out(Attn(Q,K,V)(LN₁ h))`, then
//! `h += Down(GeLU(Up(LN₂ h)))`. Token and position embeddings feed the
//! first block and the token embedding doubles as the output head.
//! In adapter modes every one of the six linear layers per block carries an
//! adapter, and embeddings and norms are frozen.

mod forward;

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapters::{AdaptationMode, AdaptedLinear, AdapterInit, LayerParam};
use crate::error::{dim_err, Error, Result};
use crate::optim::ParamStore;
use crate::tensor::{randn, RngState, Tensor};

pub use forward::{BlockTape, Category, RetainedTensor, Tape, TokenBatch};

pub const LAYER_NORM_EPS: f64 = 1e-5;
/// Expected Euclidean norm of an embedding row; entries have std `EMBEDDING_NORM/√d`.
pub const EMBEDDING_NORM: f64 = 2.0;
pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

const BASE_STREAM: u64 = 0;
const ADAPTER_STREAM: u64 = 1;

/// Transformer geometry. Also drives the analytic memory formulas.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Hidden width `d`.
    pub d: usize,
    /// Number of blocks `L`.
    pub layers: usize,
    pub heads: usize,
    /// FFN expansion width; `4d` unless set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_ff: Option<usize>,
    pub vocab: usize,
    /// Maximum sequence length `s`.
    pub seq_len: usize,
    /// Batch size `b`.
    pub batch: usize,
}

impl ModelConfig {
    pub fn new(d: usize, layers: usize, heads: usize, vocab: usize, seq_len: usize, batch: usize) -> Self {
        Self {
            d,
            layers,
            heads,
            d_ff: None,
            vocab,
            seq_len,
            batch,
        }
    }

    pub fn d_ff(&self) -> usize {
        self.d_ff.unwrap_or(4 * self.d)
    }

    pub fn validate(&self) -> Result<()> {
        let extents = [self.d, self.layers, self.heads, self.d_ff(), self.vocab, self.seq_len, self.batch];
        if extents.contains(&0) {
            return Err(Error::Parameter(format!("all extents must be >= 1: {self:?}")));
        }
        if !self.d.is_multiple_of(self.heads) {
            return Err(Error::Parameter(format!(
                "width {} is not divisible by {} heads",
                self.d, self.heads
            )));
        }
        Ok(())
    }

    /// `(d_in, d_out)` of each linear layer in a block, in [`LinearSlot::ALL`] order.
    pub fn linear_shapes(&self) -> [(LinearSlot, usize, usize); 6] {
        let (d, f) = (self.d, self.d_ff());
        [
            (LinearSlot::Query, d, d),
            (LinearSlot::Key, d, d),
            (LinearSlot::Value, d, d),
            (LinearSlot::Output, d, d),
            (LinearSlot::FfnUp, d, f),
            (LinearSlot::FfnDown, f, d),
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinearSlot {
    Query,
    Key,
    Value,
    Output,
    FfnUp,
    FfnDown,
}

impl LinearSlot {
    pub const ALL: [LinearSlot; 6] = [
        LinearSlot::Query,
        LinearSlot::Key,
        LinearSlot::Value,
        LinearSlot::Output,
        LinearSlot::FfnUp,
        LinearSlot::FfnDown,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LinearSlot::Query => "query",
            LinearSlot::Key => "key",
            LinearSlot::Value => "value",
            LinearSlot::Output => "output",
            LinearSlot::FfnUp => "ffn_up",
            LinearSlot::FfnDown => "ffn_down",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum NormSite {
    Attention(usize),
    Ffn(usize),
    Final,
}

/// Every parameter tensor in the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ParamId {
    TokenEmbedding,
    PositionEmbedding,
    NormGain(NormSite),
    NormBias(NormSite),
    Linear(usize, LinearSlot, LayerParam),
}

impl fmt::Display for ParamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let site = |s: &NormSite| match s {
            NormSite::Attention(b) => format!("block{b}.norm_attn"),
            NormSite::Ffn(b) => format!("block{b}.norm_ffn"),
            NormSite::Final => "norm_final".to_string(),
        };
        match self {
            ParamId::TokenEmbedding => f.write_str("token_embedding"),
            ParamId::PositionEmbedding => f.write_str("position_embedding"),
            ParamId::NormGain(s) => write!(f, "{}.gain", site(s)),
            ParamId::NormBias(s) => write!(f, "{}.bias", site(s)),
            ParamId::Linear(b, slot, p) => {
                let p = match p {
                    LayerParam::Weight => "weight",
                    LayerParam::Down => "down",
                    LayerParam::Up => "up",
                };
                write!(f, "block{b}.{}.{p}", slot.as_str())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Norm {
    pub gain: Tensor,
    pub bias: Tensor,
}

impl Norm {
    fn identity(d: usize) -> Result<Self> {
        Ok(Self {
            gain: Tensor::full(&[d], 1.0)?,
            bias: Tensor::zeros(&[d])?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub norm_attn: Norm,
    pub query: AdaptedLinear,
    pub key: AdaptedLinear,
    pub value: AdaptedLinear,
    pub output: AdaptedLinear,
    pub norm_ffn: Norm,
    pub ffn_up: AdaptedLinear,
    pub ffn_down: AdaptedLinear,
}

impl Block {
    pub fn linear(&self, slot: LinearSlot) -> &AdaptedLinear {
        match slot {
            LinearSlot::Query => &self.query,
            LinearSlot::Key => &self.key,
            LinearSlot::Value => &self.value,
            LinearSlot::Output => &self.output,
            LinearSlot::FfnUp => &self.ffn_up,
            LinearSlot::FfnDown => &self.ffn_down,
        }
    }

    fn linear_mut(&mut self, slot: LinearSlot) -> &mut AdaptedLinear {
        match slot {
            LinearSlot::Query => &mut self.query,
            LinearSlot::Key => &mut self.key,
            LinearSlot::Value => &mut self.value,
            LinearSlot::Output => &mut self.output,
            LinearSlot::FfnUp => &mut self.ffn_up,
            LinearSlot::FfnDown => &mut self.ffn_down,
        }
    }
}

/// Trainable-parameter totals: linear layers only, and everything.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainableCounts {
    pub linear: usize,
    pub full: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformerModel {
    config: ModelConfig,
    mode: AdaptationMode,
    adapter: AdapterInit,
    token_embedding: Tensor,
    position_embedding: Tensor,
    blocks: Vec<Block>,
    norm_final: Norm,
}

/// Builds a model. The base weights (embeddings and every `W`) come from one
/// random stream and the adapters from another, so models of different modes
/// built from the same seed share identical base weights.
pub fn build_model(config: ModelConfig, mode: AdaptationMode, adapter: AdapterInit, seed: u64) -> Result<TransformerModel> {
    config.validate()?;
    if mode.has_adapter() && adapter.rank > config.d {
        return Err(Error::Parameter(format!(
            "rank {} exceeds hidden width {}",
            adapter.rank, config.d
        )));
    }
    let mut base = RngState::with_stream(seed, BASE_STREAM);
    let mut adapters = RngState::with_stream(seed, ADAPTER_STREAM);
    let emb_std = EMBEDDING_NORM / (config.d as f64).sqrt();
    let token_embedding = randn(&[config.vocab, config.d], &mut base, emb_std)?;
    let position_embedding = randn(&[config.seq_len, config.d], &mut base, emb_std)?;
    let mut blocks = Vec::with_capacity(config.layers);
    for _ in 0..config.layers {
        let mut make = |d_in: usize, d_out: usize| -> Result<AdaptedLinear> {
            let w = crate::adapters::sample_weight(d_in, d_out, &mut base)?;
            AdaptedLinear::new(w, mode, adapter, &mut adapters)
        };
        let [q, k, v, o, up, down] = config.linear_shapes();
        blocks.push(Block {
            norm_attn: Norm::identity(config.d)?,
            query: make(q.1, q.2)?,
            key: make(k.1, k.2)?,
            value: make(v.1, v.2)?,
            output: make(o.1, o.2)?,
            norm_ffn: Norm::identity(config.d)?,
            ffn_up: make(up.1, up.2)?,
            ffn_down: make(down.1, down.2)?,
        });
    }
    Ok(TransformerModel {
        config,
        mode,
        adapter,
        token_embedding,
        position_embedding,
        blocks,
        norm_final: Norm::identity(config.d)?,
    })
}

/// Closed-form trainable linear-layer parameter count for a GPT-style model
/// with `d_ff = 4d`: `12d²L` (ft), `18drL` (lora), `9drL` (lora-fa), 0 (frozen).
pub fn count_trainable_formula(config: &ModelConfig, mode: AdaptationMode, rank: usize) -> Result<usize> {
    if config.d_ff() != 4 * config.d {
        return Err(Error::Parameter(format!(
            "closed form assumes d_ff = 4d, got d_ff = {} for d = {}",
            config.d_ff(),
            config.d
        )));
    }
    let (d, l) = (config.d, config.layers);
    Ok(match mode {
        AdaptationMode::Ft => 12 * d * d * l,
        AdaptationMode::Lora => 18 * d * rank * l,
        AdaptationMode::LoraFa => 9 * d * rank * l,
        AdaptationMode::Frozen => 0,
    })
}

/// Serialized model: a header plus every tensor.
#[derive(Serialize, Deserialize)]
struct Checkpoint {
    schema_version: u32,
    config: ModelConfig,
    mode: AdaptationMode,
    model: TransformerModel,
}

impl TransformerModel {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn mode(&self) -> AdaptationMode {
        self.mode
    }

    pub fn adapter(&self) -> &AdapterInit {
        &self.adapter
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn token_embedding(&self) -> &Tensor {
        &self.token_embedding
    }

    /// Every adapted linear layer, in block then [`LinearSlot::ALL`] order.
    pub fn linear_layers(&self) -> impl Iterator<Item = (usize, LinearSlot, &AdaptedLinear)> {
        self.blocks
            .iter()
            .enumerate()
            .flat_map(|(i, b)| LinearSlot::ALL.into_iter().map(move |s| (i, s, b.linear(s))))
    }

    pub fn layer(&self, block: usize, slot: LinearSlot) -> Option<&AdaptedLinear> {
        self.blocks.get(block).map(|b| b.linear(slot))
    }

    pub fn layer_mut(&mut self, block: usize, slot: LinearSlot) -> Option<&mut AdaptedLinear> {
        self.blocks.get_mut(block).map(|b| b.linear_mut(slot))
    }

    /// Enumerated trainable counts.
    pub fn count_trainable(&self) -> TrainableCounts {
        let linear = self.linear_layers().map(|(_, _, l)| l.trainable_count()).sum();
        let full = self
            .trainable_keys()
            .iter()
            .map(|k| self.param(k).map_or(0, Tensor::numel))
            .sum();
        TrainableCounts { linear, full }
    }

    fn norm(&self, site: NormSite) -> Option<&Norm> {
        match site {
            NormSite::Attention(b) => self.blocks.get(b).map(|b| &b.norm_attn),
            NormSite::Ffn(b) => self.blocks.get(b).map(|b| &b.norm_ffn),
            NormSite::Final => Some(&self.norm_final),
        }
    }

    fn norm_mut(&mut self, site: NormSite) -> Option<&mut Norm> {
        match site {
            NormSite::Attention(b) => self.blocks.get_mut(b).map(|b| &mut b.norm_attn),
            NormSite::Ffn(b) => self.blocks.get_mut(b).map(|b| &mut b.norm_ffn),
            NormSite::Final => Some(&mut self.norm_final),
        }
    }

    /// Every parameter id, trainable or not.
    pub fn all_keys(&self) -> Vec<ParamId> {
        let mut keys = vec![ParamId::TokenEmbedding, ParamId::PositionEmbedding];
        let mut sites: Vec<NormSite> = (0..self.blocks.len())
            .flat_map(|b| [NormSite::Attention(b), NormSite::Ffn(b)])
            .collect();
        sites.push(NormSite::Final);
        for s in sites {
            keys.push(ParamId::NormGain(s));
            keys.push(ParamId::NormBias(s));
        }
        for (b, slot, layer) in self.linear_layers() {
            keys.push(ParamId::Linear(b, slot, LayerParam::Weight));
            if layer.mode().has_adapter() {
                keys.push(ParamId::Linear(b, slot, LayerParam::Down));
                keys.push(ParamId::Linear(b, slot, LayerParam::Up));
            }
        }
        keys
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        let ckpt = Checkpoint {
            schema_version: CHECKPOINT_SCHEMA_VERSION,
            config: self.config,
            mode: self.mode,
            model: self.clone(),
        };
        std::fs::write(path, serde_json::to_vec(&ckpt)?)?;
        Ok(())
    }

    pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_slice(&std::fs::read(path)?)?;
        if ckpt.schema_version != CHECKPOINT_SCHEMA_VERSION {
            return Err(Error::Data(format!("unsupported checkpoint schema {}", ckpt.schema_version)));
        }
        let model = ckpt.model;
        if model.config != ckpt.config || model.mode != ckpt.mode {
            return Err(Error::Data("checkpoint header disagrees with body".into()));
        }
        model.validate()?;
        Ok(model)
    }

    fn validate(&self) -> Result<()> {
        let c = &self.config;
        c.validate()?;
        if self.blocks.len() != c.layers
            || self.token_embedding.shape() != [c.vocab, c.d]
            || self.position_embedding.shape() != [c.seq_len, c.d]
        {
            return Err(dim_err("TransformerModel", "tensor shapes disagree with config"));
        }
        for block in &self.blocks {
            for (slot, d_in, d_out) in c.linear_shapes() {
                let layer = block.linear(slot);
                layer.validate()?;
                if layer.mode() != self.mode || layer.d_in() != d_in || layer.d_out() != d_out {
                    return Err(dim_err("TransformerModel", format!("layer {slot:?} disagrees with config")));
                }
            }
        }
        Ok(())
    }
}

impl ParamStore for TransformerModel {
    type Key = ParamId;

    fn trainable_keys(&self) -> Vec<ParamId> {
        match self.mode {
            AdaptationMode::Frozen => Vec::new(),
            AdaptationMode::Ft => self.all_keys(),
            AdaptationMode::Lora | AdaptationMode::LoraFa => self
                .linear_layers()
                .flat_map(|(b, slot, layer)| {
                    layer
                        .trainable_keys()
                        .into_iter()
                        .map(move |p| ParamId::Linear(b, slot, p))
                })
                .collect(),
        }
    }

    fn param(&self, key: &ParamId) -> Option<&Tensor> {
        match *key {
            ParamId::TokenEmbedding => Some(&self.token_embedding),
            ParamId::PositionEmbedding => Some(&self.position_embedding),
            ParamId::NormGain(s) => self.norm(s).map(|n| &n.gain),
            ParamId::NormBias(s) => self.norm(s).map(|n| &n.bias),
            ParamId::Linear(b, slot, p) => self.layer(b, slot).and_then(|l| l.param(&p)),
        }
    }

    fn param_mut(&mut self, key: &ParamId) -> Option<&mut Tensor> {
        if self.mode != AdaptationMode::Ft {
            // adapter modes: only adapter tensors, and only those the layer trains
            return match *key {
                ParamId::Linear(b, slot, p) => self.layer_mut(b, slot).and_then(|l| l.param_mut(&p)),
                _ => None,
            };
        }
        match *key {
            ParamId::TokenEmbedding => Some(&mut self.token_embedding),
            ParamId::PositionEmbedding => Some(&mut self.position_embedding),
            ParamId::NormGain(s) => self.norm_mut(s).map(|n| &mut n.gain),
            ParamId::NormBias(s) => self.norm_mut(s).map(|n| &mut n.bias),
            ParamId::Linear(b, slot, p) => self.layer_mut(b, slot).and_then(|l| l.param_mut(&p)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(d: usize, layers: usize) -> ModelConfig {
        ModelConfig::new(d, layers, 1, 11, 6, 2)
    }

    #[test]
    fn six_adapted_layers_per_block() {
        let m = build_model(cfg(8, 3), AdaptationMode::LoraFa, AdapterInit::new(2), 0).unwrap();
        assert_eq!(m.linear_layers().count(), 18);
        assert!(m.linear_layers().all(|(_, _, l)| l.up().is_some()));
    }

    #[test]
    fn worked_counts() {
        let c = cfg(4, 1);
        let ft = build_model(c, AdaptationMode::Ft, AdapterInit::new(2), 0).unwrap();
        assert_eq!(ft.count_trainable().linear, 192);
        let lora = build_model(c, AdaptationMode::Lora, AdapterInit::new(2), 0).unwrap();
        assert_eq!(lora.count_trainable().linear, 144);
        let fa = build_model(c, AdaptationMode::LoraFa, AdapterInit::new(2), 0).unwrap();
        assert_eq!(fa.count_trainable().linear, 72);
        let frozen = build_model(c, AdaptationMode::Frozen, AdapterInit::new(2), 0).unwrap();
        assert_eq!(frozen.count_trainable(), TrainableCounts { linear: 0, full: 0 });
        assert_eq!(fa.count_trainable().full, 72);
        // embeddings (11 + 6 rows of 4) and three norms of 2x4
        assert_eq!(ft.count_trainable().full, 192 + 17 * 4 + 3 * 8);
    }

    #[test]
    fn formula_rejects_nonstandard_ffn() {
        let mut c = cfg(4, 1);
        c.d_ff = Some(12);
        assert!(count_trainable_formula(&c, AdaptationMode::Ft, 1).is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = cfg(6, 1);
        c.heads = 4;
        assert!(matches!(c.validate(), Err(Error::Parameter(_))));
        assert!(build_model(cfg(4, 1), AdaptationMode::Lora, AdapterInit::new(5), 0).is_err());
    }

    #[test]
    fn base_weights_shared_across_modes() {
        let a = build_model(cfg(8, 2), AdaptationMode::Frozen, AdapterInit::new(2), 7).unwrap();
        let b = build_model(cfg(8, 2), AdaptationMode::Lora, AdapterInit::new(2), 7).unwrap();
        for ((_, _, la), (_, _, lb)) in a.linear_layers().zip(b.linear_layers()) {
            assert!(la.weight().bitwise_eq(lb.weight()));
        }
        assert!(a.token_embedding().bitwise_eq(b.token_embedding()));
    }

    #[test]
    fn frozen_params_are_not_mutable() {
        let mut m = build_model(cfg(8, 1), AdaptationMode::LoraFa, AdapterInit::new(2), 0).unwrap();
        assert!(m.param_mut(&ParamId::TokenEmbedding).is_none());
        assert!(m.param_mut(&ParamId::Linear(0, LinearSlot::Query, LayerParam::Weight)).is_none());
        assert!(m.param_mut(&ParamId::Linear(0, LinearSlot::Query, LayerParam::Down)).is_none());
        assert!(m.param_mut(&ParamId::Linear(0, LinearSlot::Query, LayerParam::Up)).is_some());
        assert_eq!(m.trainable_keys().len(), 6);
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = build_model(cfg(8, 1), AdaptationMode::Lora, AdapterInit::new(2), 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        m.save_checkpoint(&path).unwrap();
        assert_eq!(TransformerModel::load_checkpoint(&path).unwrap(), m);
    }

    #[test]
    fn param_ids_display() {
        assert_eq!(
            ParamId::Linear(1, LinearSlot::FfnUp, LayerParam::Up).to_string(),
            "block1.ffn_up.up"
        );
        assert_eq!(ParamId::NormGain(NormSite::Final).to_string(), "norm_final.gain");
    }
}
