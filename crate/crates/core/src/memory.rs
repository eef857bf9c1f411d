//! Training-memory arithmetic and the retained-activation meter.
//!
//! The analytic side prices a (config, mode, rank, batch) at two bytes per
//! element: frozen weights, trainable state (weights, gradients, optimizer
//! moments and master copies) and the inputs linear layers keep for their
//! backward pass. The measured side walks a forward [`Tape`] and counts the
//! tensors it actually holds.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::adapters::AdaptationMode;
use crate::error::{Error, Result};
use crate::model::{Category, LinearSlot, ModelConfig, Tape};
use crate::tensor::Precision;

/// Bytes per element assumed by the analytic model (16-bit training).
pub const ACCOUNTING_BYTES: u64 = 2;
/// Trainable-state bytes per trainable parameter under full fine-tuning
/// (gradient, two fp32 moments, fp32 master copy; the weight is priced separately).
pub const FT_STATE_BYTES: u64 = 14;
/// Trainable-state bytes per adapter parameter (weight included).
pub const ADAPTER_STATE_BYTES: u64 = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Modifiers {
    pub weight_bits: u32,
    pub num_shards: u32,
    pub full_recompute: bool,
}

impl Default for Modifiers {
    fn default() -> Self {
        Self {
            weight_bits: 16,
            num_shards: 1,
            full_recompute: false,
        }
    }
}

impl Modifiers {
    pub fn validate(&self) -> Result<()> {
        if ![16, 8, 4].contains(&self.weight_bits) {
            return Err(Error::Parameter(format!(
                "weight_bits must be 16, 8 or 4, got {}",
                self.weight_bits
            )));
        }
        if self.num_shards == 0 {
            return Err(Error::Parameter("num_shards must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationModel {
    /// Closed forms: 7bsdL elements for full inputs, 4bsrL for low-rank ones.
    PaperConstant,
    /// Layer-by-layer enumeration with query/key/value sharing one input.
    PerLayerCount,
}

impl std::str::FromStr for ActivationModel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper_constant" | "paper-constant" => Ok(Self::PaperConstant),
            "per_layer_count" | "per-layer-count" => Ok(Self::PerLayerCount),
            _ => Err(Error::Parameter(format!("unknown activation model {s:?}"))),
        }
    }
}

/// Linear-input elements kept by one layer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerActivations {
    pub full: u64,
    pub low_rank: u64,
}

impl LayerActivations {
    pub fn total(&self) -> u64 {
        self.full + self.low_rank
    }
}

pub type LayerKey = (usize, LinearSlot);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryBreakdown {
    pub mode: AdaptationMode,
    pub rank: usize,
    pub activation_model: ActivationModel,
    pub modifiers: Modifiers,
    pub accounting_bytes_per_element: u64,
    pub compute_precision: Precision,
    pub weight_bytes: f64,
    pub trainable_state_bytes: u64,
    pub activation_elements_linear_full: u64,
    pub activation_elements_linear_lowrank: u64,
    pub activation_bytes_linear: u64,
    pub activation_bytes_other: u64,
    pub total_bytes: f64,
    /// Set when activations are recomputed in backward instead of stored.
    pub recompute_flops: bool,
}

/// Linear weight count `Σ d_in·d_out` over all blocks; `12d²L` when `d_ff = 4d`.
pub fn base_weight_count(config: &ModelConfig) -> u64 {
    let per_block: usize = config.linear_shapes().iter().map(|&(_, i, o)| i * o).sum();
    (per_block * config.layers) as u64
}

/// Trainable linear-layer parameters by enumeration of layer shapes.
pub fn trainable_linear_count(config: &ModelConfig, mode: AdaptationMode, rank: usize) -> u64 {
    let per_block: usize = config
        .linear_shapes()
        .iter()
        .map(|&(_, i, o)| match mode {
            AdaptationMode::Ft => i * o,
            AdaptationMode::Lora => rank * (i + o),
            AdaptationMode::LoraFa => rank * o,
            AdaptationMode::Frozen => 0,
        })
        .sum();
    (per_block * config.layers) as u64
}

/// Per-layer retained linear-input elements for a `b×s` batch. Key and value
/// read the same stored tensor as query, so their full input counts as zero.
pub fn per_layer_activations(
    config: &ModelConfig,
    mode: AdaptationMode,
    rank: usize,
    b: usize,
    s: usize,
) -> BTreeMap<LayerKey, LayerActivations> {
    let tokens = (b * s) as u64;
    let mut out = BTreeMap::new();
    for block in 0..config.layers {
        for (slot, d_in, _) in config.linear_shapes() {
            let shared = matches!(slot, LinearSlot::Key | LinearSlot::Value);
            let full = if mode.keeps_full_input() && !shared {
                tokens * d_in as u64
            } else {
                0
            };
            let low_rank = if mode.has_adapter() { tokens * rank as u64 } else { 0 };
            out.insert((block, slot), LayerActivations { full, low_rank });
        }
    }
    out
}

fn paper_constant_elements(config: &ModelConfig, mode: AdaptationMode, rank: usize, b: usize, s: usize) -> (u64, u64) {
    let bsl = (b * s * config.layers) as u64;
    let full = 7 * bsl * config.d as u64;
    let low = 4 * bsl * rank as u64;
    match mode {
        AdaptationMode::Ft => (full, 0),
        AdaptationMode::Lora => (full, low),
        AdaptationMode::LoraFa => (0, low),
        AdaptationMode::Frozen => (0, 0),
    }
}

pub fn analytic_report(
    config: &ModelConfig,
    mode: AdaptationMode,
    rank: usize,
    b: usize,
    s: usize,
    modifiers: Modifiers,
    activation_model: ActivationModel,
) -> Result<MemoryBreakdown> {
    config.validate()?;
    modifiers.validate()?;
    if b == 0 || s == 0 {
        return Err(Error::Parameter("batch and sequence length must be positive".into()));
    }
    let rank = if mode.has_adapter() { rank } else { 0 };
    if mode.has_adapter() && rank == 0 {
        return Err(Error::Parameter("adapter rank must be positive".into()));
    }
    let n = base_weight_count(config);
    let weight_bytes = (ACCOUNTING_BYTES * n) as f64 * (modifiers.weight_bits as f64 / 16.0)
        / modifiers.num_shards as f64;
    let trainable = trainable_linear_count(config, mode, rank);
    let trainable_state_bytes = match mode {
        AdaptationMode::Ft => FT_STATE_BYTES * trainable,
        _ => ADAPTER_STATE_BYTES * trainable,
    };
    let (full, low) = match activation_model {
        ActivationModel::PaperConstant => paper_constant_elements(config, mode, rank, b, s),
        ActivationModel::PerLayerCount => per_layer_activations(config, mode, rank, b, s)
            .values()
            .fold((0, 0), |(f, l), a| (f + a.full, l + a.low_rank)),
    };
    let (full, low) = if modifiers.full_recompute { (0, 0) } else { (full, low) };
    let activation_bytes_linear = ACCOUNTING_BYTES * (full + low);
    Ok(MemoryBreakdown {
        mode,
        rank,
        activation_model,
        modifiers,
        accounting_bytes_per_element: ACCOUNTING_BYTES,
        compute_precision: Precision::F64,
        weight_bytes,
        trainable_state_bytes,
        activation_elements_linear_full: full,
        activation_elements_linear_lowrank: low,
        activation_bytes_linear,
        activation_bytes_other: 0,
        total_bytes: weight_bytes + trainable_state_bytes as f64 + activation_bytes_linear as f64,
        recompute_flops: modifiers.full_recompute,
    })
}

/// Element counts of every distinct tensor a tape retains.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeasuredActivations {
    pub linear_full: u64,
    pub linear_lowrank: u64,
    pub other: u64,
    #[serde(with = "layer_map")]
    pub per_layer: BTreeMap<LayerKey, LayerActivations>,
}

impl MeasuredActivations {
    pub fn linear_total(&self) -> u64 {
        self.linear_full + self.linear_lowrank
    }
}

/// Counts a tape's retained elements by category. A buffer held by several
/// layers is charged once, to the first holder in forward order; linear
/// inputs take precedence over other saves of the same buffer.
pub fn measured_activation_elements(tape: &Tape) -> MeasuredActivations {
    let retained = tape.retained();
    let mut seen = HashSet::new();
    let mut out = MeasuredActivations::default();
    for r in retained.iter().filter(|r| r.category != Category::Other) {
        let key = r.layer.expect("linear tensors carry their layer");
        let entry = out.per_layer.entry(key).or_default();
        if !seen.insert(r.tensor.buffer_id()) {
            continue;
        }
        let n = r.tensor.numel() as u64;
        match r.category {
            Category::LinearFull => {
                out.linear_full += n;
                entry.full += n;
            }
            Category::LinearLowRank => {
                out.linear_lowrank += n;
                entry.low_rank += n;
            }
            Category::Other => unreachable!(),
        }
    }
    for r in retained.iter().filter(|r| r.category == Category::Other) {
        if seen.insert(r.tensor.buffer_id()) {
            out.other += r.tensor.numel() as u64;
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerDiff {
    pub block: usize,
    pub slot: LinearSlot,
    pub analytic: LayerActivations,
    pub measured: LayerActivations,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconcileReport {
    pub mode: AdaptationMode,
    pub analytic_linear_elements: u64,
    pub measured_linear_elements: u64,
    pub measured_other_elements: u64,
    pub paper_constant_linear_elements: u64,
    /// `per_layer_count / paper_constant` for the low-rank term; absent when
    /// either is zero.
    pub lowrank_enumeration_over_paper: Option<f64>,
    pub full_enumeration_over_paper: Option<f64>,
}

/// Checks that per-layer analytic counts equal measured counts exactly and
/// reports how the closed forms compare.
pub fn reconcile(
    config: &ModelConfig,
    mode: AdaptationMode,
    rank: usize,
    b: usize,
    s: usize,
    measured: &MeasuredActivations,
) -> Result<ReconcileReport> {
    let analytic = per_layer_activations(config, mode, rank, b, s);
    let mut diffs = Vec::new();
    let keys: std::collections::BTreeSet<LayerKey> =
        analytic.keys().chain(measured.per_layer.keys()).copied().collect();
    for key in keys {
        let a = analytic.get(&key).copied().unwrap_or_default();
        let m = measured.per_layer.get(&key).copied().unwrap_or_default();
        if a != m {
            diffs.push(LayerDiff {
                block: key.0,
                slot: key.1,
                analytic: a,
                measured: m,
            });
        }
    }
    if !diffs.is_empty() {
        let lines: Vec<String> = diffs
            .iter()
            .map(|d| {
                format!(
                    "block {} {}: analytic {}+{}, measured {}+{}",
                    d.block,
                    d.slot.as_str(),
                    d.analytic.full,
                    d.analytic.low_rank,
                    d.measured.full,
                    d.measured.low_rank
                )
            })
            .collect();
        return Err(Error::Reconciliation(lines.join("; ")));
    }
    let (pf, pl) = paper_constant_elements(config, mode, if mode.has_adapter() { rank } else { 0 }, b, s);
    let ratio = |num: u64, den: u64| (num > 0 && den > 0).then(|| num as f64 / den as f64);
    let analytic_total: u64 = analytic.values().map(LayerActivations::total).sum();
    Ok(ReconcileReport {
        mode,
        analytic_linear_elements: analytic_total,
        measured_linear_elements: measured.linear_total(),
        measured_other_elements: measured.other,
        paper_constant_linear_elements: pf + pl,
        lowrank_enumeration_over_paper: ratio(measured.linear_lowrank, pl),
        full_enumeration_over_paper: ratio(measured.linear_full, pf),
    })
}

mod layer_map {
    use std::collections::BTreeMap;

    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use super::{LayerActivations, LayerKey};
    use crate::model::LinearSlot;

    #[derive(Serialize, Deserialize)]
    struct Entry {
        block: usize,
        slot: LinearSlot,
        #[serde(flatten)]
        counts: LayerActivations,
    }

    pub fn serialize<S: Serializer>(map: &BTreeMap<LayerKey, LayerActivations>, s: S) -> Result<S::Ok, S::Error> {
        let entries: Vec<Entry> = map
            .iter()
            .map(|(&(block, slot), &counts)| Entry { block, slot, counts })
            .collect();
        entries.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<LayerKey, LayerActivations>, D::Error> {
        let entries = Vec::<Entry>::deserialize(d)?;
        Ok(entries.into_iter().map(|e| ((e.block, e.slot), e.counts)).collect())
    }
}
