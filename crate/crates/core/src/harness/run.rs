use std::path::PathBuf;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::tasks::{Dataset, TaskKind, TaskStream};
use crate::adapters::{AdaptationMode, AdapterInit};
use crate::equivalence::subspace_check;
use crate::error::{Error, Result};
use crate::memory::{
    analytic_report, measured_activation_elements, reconcile, ActivationModel, MeasuredActivations,
    MemoryBreakdown, Modifiers, ReconcileReport,
};
use crate::model::{build_model, ModelConfig, TrainableCounts, TransformerModel};
use crate::optim::{AdamWConfig, Optimizer, OptimizerConfig};
use crate::tensor::sub;

pub const REPORT_SCHEMA_VERSION: u32 = 1;
/// Residual above which the subspace verdict fails.
pub const SUBSPACE_TOLERANCE: f64 = 1e-10;

const TRAIN_STREAM: u64 = 10;
const EVAL_STREAM: u64 = 11;

fn default_a_std() -> f64 {
    1.0
}

fn default_eval_examples() -> usize {
    256
}

/// Everything that determines a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub mode: AdaptationMode,
    pub rank: usize,
    /// Adapter scale; `1/rank` when absent.
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default = "default_a_std")]
    pub a_std: f64,
    pub optimizer: OptimizerConfig,
    pub steps: usize,
    pub seed: u64,
    pub task: TaskKind,
    #[serde(default = "default_eval_examples")]
    pub eval_examples: usize,
    /// Linear warmup length; 0 keeps the rate constant.
    #[serde(default)]
    pub warmup_steps: usize,
    /// Run the equivalence checks every this many steps.
    #[serde(default)]
    pub equiv_every: Option<usize>,
    #[serde(default)]
    pub report: Option<PathBuf>,
}

impl RunConfig {
    /// The desk-scale defaults: `d=64, L=2, vocab=32, s=16, b=16`, AdamW.
    pub fn new(mode: AdaptationMode, task: TaskKind) -> Self {
        Self {
            model: ModelConfig::new(64, 2, 4, 32, 16, 16),
            mode,
            rank: 8,
            alpha: None,
            a_std: 1.0,
            optimizer: OptimizerConfig::AdamW(AdamWConfig::new(1e-3)),
            steps: 500,
            seed: 0,
            task,
            eval_examples: default_eval_examples(),
            warmup_steps: 0,
            equiv_every: None,
            report: None,
        }
    }

    pub fn adapter_init(&self) -> AdapterInit {
        AdapterInit {
            rank: self.rank,
            alpha: self.alpha,
            a_std: self.a_std,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optimizer.validate()?;
        if self.mode.has_adapter() {
            if self.rank == 0 || self.rank > self.model.d {
                return Err(Error::Parameter(format!(
                    "rank must be in 1..={}, got {}",
                    self.model.d, self.rank
                )));
            }
            if !(self.a_std > 0.0 && self.a_std.is_finite()) {
                return Err(Error::Parameter("a_std must be positive".into()));
            }
            if let Some(a) = self.alpha {
                if !a.is_finite() {
                    return Err(Error::Parameter("alpha must be finite".into()));
                }
            }
        }
        if self.eval_examples == 0 {
            return Err(Error::Parameter("eval_examples must be positive".into()));
        }
        if self.equiv_every == Some(0) {
            return Err(Error::Parameter("equiv_every must be positive".into()));
        }
        // surfaces vocab and sequence-length errors before any work
        TaskStream::new(self.task, self.model.vocab, self.model.seq_len, self.seed, 0)?;
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    Diverged { step: usize, message: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: usize,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemorySection {
    pub analytic_per_layer_count: MemoryBreakdown,
    pub analytic_paper_constant: MemoryBreakdown,
    pub measured: Option<MeasuredActivations>,
    pub reconcile: Option<ReconcileReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceVerdict {
    pub step: usize,
    pub check: String,
    pub value: f64,
    pub threshold: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub config: RunConfig,
    pub status: RunStatus,
    /// Training-batch loss before each update.
    pub loss_curve: Vec<LossPoint>,
    /// Held-out loss before training.
    pub initial_loss: f64,
    /// Held-out loss after the last step; absent if the run diverged.
    pub final_loss: Option<f64>,
    pub trainable: TrainableCounts,
    pub optimizer_state_elements: usize,
    pub memory: MemorySection,
    pub wall_clock_secs: f64,
    pub equivalence: Vec<EquivalenceVerdict>,
}

impl RunReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn diverged(&self) -> bool {
        matches!(self.status, RunStatus::Diverged { .. })
    }
}

/// A model, its optimizer and its data streams.
#[derive(Clone, Debug)]
pub struct Trainer {
    config: RunConfig,
    model: TransformerModel,
    initial: TransformerModel,
    optimizer: Optimizer<crate::model::ParamId>,
    train: TaskStream,
    eval: Dataset,
    step: usize,
}

impl Trainer {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let model = build_model(config.model, config.mode, config.adapter_init(), config.seed)?;
        let optimizer = Optimizer::new(config.optimizer, &model)?;
        let m = &config.model;
        let train = TaskStream::new(config.task, m.vocab, m.seq_len, config.seed, TRAIN_STREAM)?;
        let mut eval_stream = TaskStream::new(config.task, m.vocab, m.seq_len, config.seed, EVAL_STREAM)?;
        let eval = Dataset {
            kind: config.task,
            vocab: m.vocab,
            seq_len: m.seq_len,
            examples: (0..config.eval_examples).map(|_| eval_stream.next_example()).collect(),
        };
        Ok(Self {
            initial: model.clone(),
            config,
            model,
            optimizer,
            train,
            eval,
            step: 0,
        })
    }

    pub fn model(&self) -> &TransformerModel {
        &self.model
    }

    pub fn initial_model(&self) -> &TransformerModel {
        &self.initial
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn optimizer_state_elements(&self) -> usize {
        self.optimizer.state_elements()
    }

    /// One update on a fresh batch; returns the batch loss before the update.
    pub fn step(&mut self) -> Result<f64> {
        let batch = self.train.next_batch(self.config.model.batch)?;
        let (loss, tape) = self.model.forward_loss(&batch)?;
        let grads = self.model.backward(&tape)?;
        let warm = self.config.warmup_steps;
        let scale = if warm == 0 { 1.0 } else { ((self.step + 1) as f64 / warm as f64).min(1.0) };
        self.optimizer.step(&mut self.model, &grads, scale)?;
        self.step += 1;
        Ok(loss)
    }

    /// Mean held-out loss, weighted by scored positions.
    pub fn eval_loss(&self) -> Result<f64> {
        let b = self.config.model.batch;
        let n = self.eval.examples.len();
        let (mut total, mut count) = (0.0, 0usize);
        let mut start = 0;
        while start < n {
            let end = (start + b).min(n);
            let batch = self.eval.batch(start..end)?;
            let scored = batch.targets.iter().flatten().count();
            let (loss, _) = self.model.forward_loss(&batch)?;
            total += loss * scored as f64;
            count += scored;
            start = end;
        }
        Ok(total / count as f64)
    }

    /// Activation meter on one training-shaped batch, reconciled against
    /// the per-layer analytic count.
    pub fn measure(&self) -> Result<(MeasuredActivations, ReconcileReport)> {
        let m = &self.config.model;
        let mut probe = TaskStream::new(self.config.task, m.vocab, m.seq_len, self.config.seed, TRAIN_STREAM)?;
        let batch = probe.next_batch(m.batch)?;
        let (_, tape) = self.model.forward_loss(&batch)?;
        let measured = measured_activation_elements(&tape);
        let rec = reconcile(m, self.config.mode, self.config.rank, m.batch, m.seq_len, &measured)?;
        Ok((measured, rec))
    }

    /// Largest per-layer residual of the merged-weight change off `col(A)`,
    /// and the largest numerical rank of those changes. LoRA-FA only.
    pub fn subspace_residual(&self) -> Result<Option<(f64, usize)>> {
        if self.config.mode != AdaptationMode::LoraFa {
            return Ok(None);
        }
        let mut worst = (0.0_f64, 0usize);
        for ((_, _, now), (_, _, before)) in self.model.linear_layers().zip(self.initial.linear_layers()) {
            let delta = sub(&now.merge()?, &before.merge()?)?;
            let rep = subspace_check(now.down().expect("lora-fa layers carry A"), &delta)?;
            worst = (worst.0.max(rep.residual), worst.1.max(rep.numerical_rank));
        }
        Ok(Some(worst))
    }
}

fn memory_section(cfg: &RunConfig, measured: Option<(MeasuredActivations, ReconcileReport)>) -> Result<MemorySection> {
    let m = &cfg.model;
    let report = |model| analytic_report(m, cfg.mode, cfg.rank, m.batch, m.seq_len, Modifiers::default(), model);
    let (measured, reconcile) = match measured {
        Some((a, b)) => (Some(a), Some(b)),
        None => (None, None),
    };
    Ok(MemorySection {
        analytic_per_layer_count: report(ActivationModel::PerLayerCount)?,
        analytic_paper_constant: report(ActivationModel::PaperConstant)?,
        measured,
        reconcile,
    })
}

fn is_divergence(e: &Error) -> bool {
    matches!(e, Error::NonFinite(_))
}

/// Trains per `cfg` and reports. Divergence is recorded in the report's
/// status rather than returned as an error; reconciliation failures and
/// configuration problems are errors.
pub fn train_run(cfg: &RunConfig) -> Result<RunReport> {
    let started = Instant::now();
    let mut trainer = Trainer::new(cfg.clone())?;
    let initial_loss = trainer.eval_loss()?;
    // the meter replays the first training batch through the untrained model
    let measured = Some(trainer.measure()?);
    let mut curve = Vec::with_capacity(cfg.steps);
    let mut equivalence = Vec::new();
    let mut status = RunStatus::Completed;
    for step in 0..cfg.steps {
        match trainer.step() {
            Ok(loss) => curve.push(LossPoint { step, loss }),
            Err(e) if is_divergence(&e) => {
                status = RunStatus::Diverged {
                    step,
                    message: e.to_string(),
                };
                break;
            }
            Err(e) => return Err(e),
        }
        if let Some(k) = cfg.equiv_every {
            if (step + 1) % k == 0 {
                if let Some((residual, rank)) = trainer.subspace_residual()? {
                    equivalence.push(EquivalenceVerdict {
                        step: step + 1,
                        check: "subspace_residual".into(),
                        value: residual,
                        threshold: SUBSPACE_TOLERANCE,
                        passed: residual < SUBSPACE_TOLERANCE,
                    });
                    equivalence.push(EquivalenceVerdict {
                        step: step + 1,
                        check: "numerical_rank".into(),
                        value: rank as f64,
                        threshold: cfg.rank as f64,
                        passed: rank <= cfg.rank,
                    });
                }
            }
        }
    }
    let final_loss = match status {
        RunStatus::Completed => match trainer.eval_loss() {
            Ok(l) => Some(l),
            Err(e) if is_divergence(&e) => {
                status = RunStatus::Diverged {
                    step: cfg.steps,
                    message: e.to_string(),
                };
                None
            }
            Err(e) => return Err(e),
        },
        RunStatus::Diverged { .. } => None,
    };
    Ok(RunReport {
        schema_version: REPORT_SCHEMA_VERSION,
        config: cfg.clone(),
        status,
        loss_curve: curve,
        initial_loss,
        final_loss,
        trainable: trainer.model().count_trainable(),
        optimizer_state_elements: trainer.optimizer_state_elements(),
        memory: memory_section(cfg, measured)?,
        wall_clock_secs: started.elapsed().as_secs_f64(),
        equivalence,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(mode: AdaptationMode) -> RunConfig {
        let mut c = RunConfig::new(mode, TaskKind::Copy);
        c.model = ModelConfig::new(16, 1, 2, 12, 8, 4);
        c.rank = 2;
        c.steps = 5;
        c.eval_examples = 8;
        c
    }

    #[test]
    fn zero_steps_reports_frozen_loss() {
        let mut c = small(AdaptationMode::LoraFa);
        c.steps = 0;
        let r = train_run(&c).unwrap();
        c.mode = AdaptationMode::Frozen;
        let frozen = train_run(&c).unwrap();
        assert_eq!(r.initial_loss.to_bits(), frozen.initial_loss.to_bits());
        assert_eq!(r.final_loss.unwrap().to_bits(), r.initial_loss.to_bits());
        assert!(r.loss_curve.is_empty());
        assert!(r.memory.measured.is_some());
    }

    #[test]
    fn report_round_trips_byte_exactly() {
        let mut c = small(AdaptationMode::LoraFa);
        c.equiv_every = Some(2);
        let r = train_run(&c).unwrap();
        let text = r.to_json().unwrap();
        let back = RunReport::from_json(&text).unwrap();
        assert_eq!(back, r);
        assert_eq!(back.to_json().unwrap(), text);
        assert_eq!(r.equivalence.len(), 4);
        assert!(r.equivalence.iter().all(|v| v.passed));
    }

    #[test]
    fn optimizer_state_is_twice_trainable() {
        for mode in [AdaptationMode::Ft, AdaptationMode::Lora, AdaptationMode::LoraFa] {
            let r = train_run(&small(mode)).unwrap();
            assert_eq!(r.optimizer_state_elements, 2 * r.trainable.full);
        }
    }

    #[test]
    fn config_validation() {
        let mut c = small(AdaptationMode::Lora);
        c.rank = 17;
        assert!(matches!(c.validate(), Err(Error::Parameter(_))));
        let text = serde_json::to_string(&small(AdaptationMode::Lora)).unwrap();
        assert_eq!(RunConfig::from_json(&text).unwrap(), small(AdaptationMode::Lora));
        assert!(RunConfig::from_json(&text.replacen("{", "{\"bogus\":1,", 1)).is_err());
    }

    #[test]
    fn huge_learning_rate_is_recorded_as_divergence() {
        let mut c = small(AdaptationMode::Ft);
        c.optimizer = OptimizerConfig::Sgd(crate::optim::SgdConfig { lr: 1e300 });
        let r = train_run(&c).unwrap();
        assert!(r.diverged(), "{:?}", r.status);
        assert!(r.final_loss.is_none());
    }
}
