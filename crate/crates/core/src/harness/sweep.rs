use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::run::{train_run, RunConfig, RunStatus, REPORT_SCHEMA_VERSION};
use crate::error::{Error, Result};

/// Rank × learning-rate grid over a base configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub base: RunConfig,
    pub ranks: Vec<usize>,
    pub lrs: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellStatus {
    Ok,
    Diverged,
    Error,
}

impl CellStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            CellStatus::Ok => "ok",
            CellStatus::Diverged => "diverged",
            CellStatus::Error => "error",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub rank: usize,
    pub lr: f64,
    pub seed: u64,
    pub status: CellStatus,
    pub final_loss: Option<f64>,
    /// Measured low-rank linear-input elements at step 1.
    pub lowrank_elements: Option<u64>,
    pub message: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub schema_version: u32,
    pub ranks: Vec<usize>,
    pub lrs: Vec<f64>,
    pub cells: Vec<SweepCell>,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Per-cell seed, a hash of the base seed, the rank and the learning rate.
pub fn cell_seed(seed: u64, rank: usize, lr: f64) -> u64 {
    splitmix64(splitmix64(splitmix64(seed) ^ rank as u64) ^ lr.to_bits())
}

impl SweepSpec {
    /// The configuration a cell runs.
    pub fn cell_config(&self, rank: usize, lr: f64) -> RunConfig {
        let mut cfg = self.base.clone();
        cfg.rank = rank;
        cfg.optimizer = cfg.optimizer.with_lr(lr);
        cfg.seed = cell_seed(self.base.seed, rank, lr);
        cfg.report = None;
        cfg
    }
}

fn run_cell(spec: &SweepSpec, rank: usize, lr: f64) -> SweepCell {
    let cfg = spec.cell_config(rank, lr);
    let mut cell = SweepCell {
        rank,
        lr,
        seed: cfg.seed,
        status: CellStatus::Error,
        final_loss: None,
        lowrank_elements: None,
        message: None,
    };
    match train_run(&cfg) {
        Ok(report) => {
            cell.final_loss = report.final_loss;
            cell.lowrank_elements = report.memory.measured.as_ref().map(|m| m.linear_lowrank);
            match report.status {
                RunStatus::Completed => cell.status = CellStatus::Ok,
                RunStatus::Diverged { message, .. } => {
                    cell.status = CellStatus::Diverged;
                    cell.message = Some(message);
                }
            }
        }
        Err(e) => cell.message = Some(e.to_string()),
    }
    cell
}

/// Runs every cell in parallel. Cell failures are recorded, not returned.
pub fn sweep(spec: &SweepSpec) -> Result<SweepGrid> {
    if spec.ranks.is_empty() || spec.lrs.is_empty() {
        return Err(Error::Parameter("sweep axes must be non-empty".into()));
    }
    let pairs: Vec<(usize, f64)> = spec
        .ranks
        .iter()
        .flat_map(|&r| spec.lrs.iter().map(move |&lr| (r, lr)))
        .collect();
    let cells = pairs.par_iter().map(|&(r, lr)| run_cell(spec, r, lr)).collect();
    Ok(SweepGrid {
        schema_version: REPORT_SCHEMA_VERSION,
        ranks: spec.ranks.clone(),
        lrs: spec.lrs.clone(),
        cells,
    })
}

impl SweepGrid {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["rank", "lr", "final_loss", "status"])?;
        for c in &self.cells {
            w.write_record([
                c.rank.to_string(),
                c.lr.to_string(),
                c.final_loss.map(|l| l.to_string()).unwrap_or_default(),
                c.status.as_str().to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save(&self, json_path: impl AsRef<Path>, csv_path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(json_path, serde_json::to_string_pretty(self)?)?;
        self.write_csv(std::fs::File::create(csv_path)?)
    }

    /// Lowest final loss among successful cells.
    pub fn best(&self) -> Option<&SweepCell> {
        self.cells
            .iter()
            .filter(|c| c.status == CellStatus::Ok)
            .filter(|c| c.final_loss.is_some())
            .min_by(|a, b| a.final_loss.partial_cmp(&b.final_loss).expect("finite losses"))
    }
}
