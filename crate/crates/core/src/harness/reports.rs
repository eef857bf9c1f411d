use serde::{Deserialize, Serialize};

use super::run::{RunConfig, Trainer, REPORT_SCHEMA_VERSION, SUBSPACE_TOLERANCE};
use super::tasks::TaskKind;
use crate::adapters::{AdaptationMode, AdaptedLinear, AdapterInit};
use crate::equivalence::{estimate_unbiasedness, unbiasedness_decay, verify_sgd_equivalence};
use crate::error::Result;
use crate::memory::{
    analytic_report, measured_activation_elements, reconcile, ActivationModel, MeasuredActivations,
    MemoryBreakdown, Modifiers, ReconcileReport,
};
use crate::model::{build_model, ModelConfig, TokenBatch};
use crate::optim::{AdamWConfig, OptimizerConfig};
use crate::tensor::{randn, RngState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemReportRequest {
    pub model: ModelConfig,
    pub modes: Vec<AdaptationMode>,
    pub rank: usize,
    pub modifiers: Modifiers,
    /// Also build the model and meter one forward pass.
    pub probe: bool,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemReportEntry {
    pub mode: AdaptationMode,
    pub paper_constant: MemoryBreakdown,
    pub per_layer_count: MemoryBreakdown,
    pub measured: Option<MeasuredActivations>,
    pub reconcile: Option<ReconcileReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemReport {
    pub schema_version: u32,
    pub model: ModelConfig,
    pub rank: usize,
    pub entries: Vec<MemReportEntry>,
}

fn random_batch(config: &ModelConfig, rng: &mut RngState) -> Result<TokenBatch> {
    let n = config.batch * config.seq_len;
    let tokens = (0..n).map(|_| rng.below(config.vocab)).collect();
    let targets = (0..n).map(|_| Some(rng.below(config.vocab))).collect();
    TokenBatch::new(tokens, targets, config.batch, config.seq_len)
}

/// Analytic breakdowns under both activation models, plus an optional
/// metered forward pass reconciled against the per-layer count.
pub fn memreport(req: &MemReportRequest) -> Result<MemReport> {
    let c = &req.model;
    let mut entries = Vec::with_capacity(req.modes.len());
    for &mode in &req.modes {
        let report = |am| analytic_report(c, mode, req.rank, c.batch, c.seq_len, req.modifiers, am);
        let (measured, rec) = if req.probe {
            let model = build_model(*c, mode, AdapterInit::new(req.rank), req.seed)?;
            let batch = random_batch(c, &mut RngState::with_stream(req.seed, 7))?;
            let (_, tape) = model.forward_loss(&batch)?;
            let measured = measured_activation_elements(&tape);
            let rec = reconcile(c, mode, req.rank, c.batch, c.seq_len, &measured)?;
            (Some(measured), Some(rec))
        } else {
            (None, None)
        };
        entries.push(MemReportEntry {
            mode,
            paper_constant: report(ActivationModel::PaperConstant)?,
            per_layer_count: report(ActivationModel::PerLayerCount)?,
            measured,
            reconcile: rec,
        });
    }
    Ok(MemReport {
        schema_version: REPORT_SCHEMA_VERSION,
        model: *c,
        rank: req.rank,
        entries,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckVerdict {
    pub check: String,
    pub value: f64,
    pub threshold: f64,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EquivOptions {
    pub seed: u64,
    /// Random layers for the SGD identity.
    pub layers: usize,
    /// Monte-Carlo samples for the unbiasedness estimate.
    pub samples: usize,
    /// AdamW steps before the subspace check.
    pub train_steps: usize,
}

impl Default for EquivOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            layers: 100,
            samples: 100_000,
            train_steps: 100,
        }
    }
}

pub const SGD_TOLERANCE: f64 = 1e-10;
pub const UNBIASED_TOLERANCE: f64 = 0.02;
/// Allowed relative deviation of the decay slope from `−0.5`.
pub const SLOPE_TOLERANCE: f64 = 0.3;

/// Worst SGD-identity discrepancy over `count` random LoRA-FA layers with
/// mixed shapes and ranks in `{1, 4, min(d_in, d_out)}`.
pub fn sgd_identity_sweep(count: usize, seed: u64) -> Result<(f64, usize)> {
    let mut rng = RngState::with_stream(seed, 21);
    let mut worst = 0.0_f64;
    for i in 0..count {
        let d_in = 1 + rng.below(24);
        let d_out = 1 + rng.below(24);
        let full = d_in.min(d_out);
        let rank = [1, 4.min(full), full][i % 3];
        let mut layer = AdaptedLinear::init(d_in, d_out, AdaptationMode::LoraFa, AdapterInit::new(rank), &mut rng)?;
        layer.set_up(randn(&[rank, d_out], &mut rng, 1.0)?)?;
        let rows = 1 + rng.below(6);
        let x = randn(&[rows, d_in], &mut rng, 1.0)?;
        let dy = randn(&[rows, d_out], &mut rng, 1.0)?;
        let eta = 0.001 + 0.1 * rng.uniform();
        worst = worst.max(verify_sgd_equivalence(&layer, &x, &dy, eta)?);
    }
    Ok((worst, count))
}

/// Worst subspace residual and numerical rank after `steps` AdamW LoRA-FA
/// steps on the copy task at `d=64, L=2, r=8`.
pub fn subspace_after_training(steps: usize, seed: u64) -> Result<(f64, usize, usize)> {
    let mut cfg = RunConfig::new(AdaptationMode::LoraFa, TaskKind::Copy);
    cfg.seed = seed;
    cfg.steps = steps;
    cfg.optimizer = OptimizerConfig::AdamW(AdamWConfig::new(1e-2));
    cfg.eval_examples = 1;
    let rank = cfg.rank;
    let mut trainer = Trainer::new(cfg)?;
    for _ in 0..steps {
        trainer.step()?;
    }
    let (residual, numerical_rank) = trainer.subspace_residual()?.expect("lora-fa run");
    Ok((residual, numerical_rank, rank))
}

/// The equivalence checks, one verdict each.
pub fn equivalence_suite(opts: &EquivOptions) -> Result<Vec<CheckVerdict>> {
    let mut out = Vec::new();
    let (worst, n) = sgd_identity_sweep(opts.layers, opts.seed)?;
    out.push(CheckVerdict {
        check: "sgd_equivalence".into(),
        value: worst,
        threshold: SGD_TOLERANCE,
        passed: worst < SGD_TOLERANCE,
        detail: format!("max |ΔW_observed − (−η·α²·A·Aᵀ·dW)| over {n} random layers"),
    });
    let rng = RngState::with_stream(opts.seed, 22);
    let err = estimate_unbiasedness(8, 4, opts.samples, &rng)?;
    out.push(CheckVerdict {
        check: "unbiasedness".into(),
        value: err,
        threshold: UNBIASED_TOLERANCE,
        passed: err < UNBIASED_TOLERANCE,
        detail: format!("‖mean(AAᵀ) − rI‖_F/‖rI‖_F at d=8, r=4, {} samples", opts.samples),
    });
    let fit = unbiasedness_decay(8, 4, 1000, 3, 4, &RngState::with_stream(opts.seed, 23))?;
    let dev = (fit.slope + 0.5).abs() / 0.5;
    out.push(CheckVerdict {
        check: "unbiasedness_decay".into(),
        value: fit.slope,
        threshold: SLOPE_TOLERANCE,
        passed: dev <= SLOPE_TOLERANCE,
        detail: format!("log-log slope over samples {:?}, errors {:?}", fit.samples, fit.errors),
    });
    let (residual, num_rank, rank) = subspace_after_training(opts.train_steps, opts.seed)?;
    out.push(CheckVerdict {
        check: "subspace_residual".into(),
        value: residual,
        threshold: SUBSPACE_TOLERANCE,
        passed: residual < SUBSPACE_TOLERANCE,
        detail: format!("worst layer after {} AdamW steps, copy task", opts.train_steps),
    });
    out.push(CheckVerdict {
        check: "subspace_rank".into(),
        value: num_rank as f64,
        threshold: rank as f64,
        passed: num_rank <= rank,
        detail: "largest numerical rank of a layer's merged-weight change".into(),
    });
    Ok(out)
}
