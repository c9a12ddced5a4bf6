//! Synthetic 2-D point-mass reaching tasks.
//!
//! A task places a start and a target uniformly in the square workspace.
//! The scripted expert moves in a straight line using `H` equal deltas; the
//! remaining action dimensions (rotation and gripper) stay at zero so the
//! chunk layout keeps `D_act` columns. Policies observe only a handful of
//! context tokens: the quantized displacement from start to target, i.e. the
//! target in the start's frame, optionally preceded by the quantized absolute
//! target and start coordinates.

mod dataset;
mod eval;
mod recipe;

pub use dataset::{generate_dataset, Dataset, EpisodeRecord, DATASET_FORMAT_VERSION};
pub use eval::{
    evaluate, fingerprint, random_chunk_baseline, run_ablation, write_reports_csv, AblationGrid, EpisodeOutcome,
    EvalReport, ExpertPolicy, REPORT_COLUMNS,
};
pub use recipe::{train_policy, TrainingRecipe};

use serde::{Deserialize, Serialize};

use crate::codec::TokenId;
use crate::rng::{derive_seed, seeded};
use crate::{Error, Result};
use rand::Rng as _;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub horizon: usize,
    pub action_dims: usize,
    pub success_radius: f64,
    /// Uniform bins per coordinate for the context tokens. Positions are
    /// binned over the workspace, displacements over twice its width.
    pub context_bins: usize,
    pub num_bins: usize,
    pub workspace_lo: f64,
    pub workspace_hi: f64,
    pub held_out_fraction: f64,
    /// Prefix the context with absolute target and start tokens.
    pub absolute_context: bool,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            horizon: 8,
            action_dims: 7,
            success_radius: 0.05,
            context_bins: 64,
            num_bins: 256,
            workspace_lo: 0.0,
            workspace_hi: 1.0,
            held_out_fraction: 0.1,
            absolute_context: false,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::Config("horizon must be at least 1".into()));
        }
        if self.action_dims < 3 {
            return Err(Error::Config("action_dims must leave room for x, y and the gripper".into()));
        }
        if !(self.success_radius > 0.0 && self.success_radius.is_finite()) {
            return Err(Error::Config("success_radius must be positive".into()));
        }
        if self.context_bins < 2 || self.num_bins < 2 {
            return Err(Error::Config("context_bins and num_bins must be at least 2".into()));
        }
        if !(self.workspace_lo < self.workspace_hi) {
            return Err(Error::Config("workspace bounds are empty".into()));
        }
        if !(0.0..1.0).contains(&self.held_out_fraction) {
            return Err(Error::Config("held_out_fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn chunk_len(&self) -> usize {
        self.horizon * self.action_dims
    }

    pub fn gripper_dim(&self) -> usize {
        self.action_dims - 1
    }

    /// Context tokens per task: `[tx, ty, sx, sy]` when `absolute_context`
    /// is set, then displacement x and y.
    pub fn context_len(&self) -> usize {
        if self.absolute_context {
            6
        } else {
            2
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: u64,
    pub seed: u64,
    pub start: [f64; 2],
    pub target: [f64; 2],
}

impl TaskSpec {
    /// Task `task_id` of the family rooted at `root_seed`.
    pub fn sample(task_id: u64, root_seed: u64, config: &BenchConfig) -> Self {
        let seed = derive_seed(root_seed, &format!("task/{task_id}"));
        let mut rng = seeded(seed);
        let (lo, hi) = (config.workspace_lo, config.workspace_hi);
        let mut point = || [rng.random_range(lo..hi), rng.random_range(lo..hi)];
        let start = point();
        let target = point();
        Self {
            task_id,
            seed,
            start,
            target,
        }
    }

    /// Deterministic split by task seed: roughly `fraction` of tasks.
    pub fn is_held_out(&self, fraction: f64) -> bool {
        (self.seed % 10_000) < (fraction * 10_000.0).round() as u64
    }

    pub fn context_tokens(&self, config: &BenchConfig) -> Vec<TokenId> {
        let (lo, hi) = (config.workspace_lo, config.workspace_hi);
        let width = hi - lo;
        let mut ctx: Vec<TokenId> = Vec::with_capacity(config.context_len());
        if config.absolute_context {
            for v in [self.target[0], self.target[1], self.start[0], self.start[1]] {
                ctx.push(quantize(v, lo, hi, config.context_bins));
            }
        }
        for d in 0..2 {
            ctx.push(quantize(self.target[d] - self.start[d], -width, width, config.context_bins));
        }
        ctx
    }

    /// Straight-line expert: `H` rows of `[dx, dy, 0, ..., 0]`.
    pub fn expert_chunk(&self, config: &BenchConfig) -> Vec<Vec<f64>> {
        let h = config.horizon as f64;
        let step = [(self.target[0] - self.start[0]) / h, (self.target[1] - self.start[1]) / h];
        (0..config.horizon)
            .map(|_| {
                let mut row = vec![0.0; config.action_dims];
                row[0] = step[0];
                row[1] = step[1];
                row
            })
            .collect()
    }

    /// Integrates `position += delta` over the chunk's rows.
    pub fn rollout(&self, rows: &[Vec<f64>]) -> [f64; 2] {
        rows.iter().fold(self.start, |p, r| [p[0] + r[0], p[1] + r[1]])
    }

    pub fn final_distance(&self, rows: &[Vec<f64>]) -> f64 {
        let end = self.rollout(rows);
        (end[0] - self.target[0]).hypot(end[1] - self.target[1])
    }
}

fn quantize(value: f64, lo: f64, hi: f64, bins: usize) -> TokenId {
    let bin = ((value - lo) / (hi - lo) * bins as f64).floor();
    bin.clamp(0.0, (bins - 1) as f64) as TokenId
}
