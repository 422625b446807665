//! Token-based CTR ranker with swappable candidate-side fusion.
//!
//! The model scores one impression from up to four 32-d tokens in a fixed
//! slot order — `[user, candidate/item-ID, slice, room]` — concatenated
//! into a 2-layer tanh network. Which slots are populated, and what the
//! candidate slot contains, is the *fusion architecture*:
//!
//! * **Early fusion** merges the item-ID embedding `g` and the slice-code
//!   embedding `s` into a single candidate token before the backbone:
//!   direct replacement (`s`), concatenation (`W[g‖s]`), or a gate
//!   (`αβg + (1−α)s` with `α = σ(f(u))`).
//! * **Late fusion** presents `βg` and `s` as independent tokens and lets
//!   the backbone learn their interaction; the aligned variant adds a
//!   stop-gradient pull of `s` toward `g`.
//! * **Fluid** retires the candidate-side item ID entirely: tokens are the
//!   room code embedding `r` and the slice embedding `s`, and the item-ID
//!   table is structurally outside the forward graph.
//!
//! Inactive slots are zero vectors, so every architecture shares one
//! parameter shape — a warmup recipe can swap architectures mid-stream
//! while checkpoints stay bit-compatible. `β ∈ [0,1]` scales `g`
//! multiplicatively and is the phase-out control of the staged recipe.
//!
//! Parameters are stored as `f32`; every forward, gradient, and update is
//! computed in `f64` before rounding back — gradients are verified against
//! central finite differences in the tests.

mod checkpoint;
mod model;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use model::{
    ModelParams, Pass, RecordInputs, TokenSet, NUM_SLOTS, SLOT_CAND, SLOT_ROOM, SLOT_SLICE,
    SLOT_USER,
};

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::lucid::TableScheme;
use crate::synthgen::EncodedRecord;
use crate::{Error, Result};

/// The seven candidate-side fusion variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionVariant {
    /// Candidate token = `s` (the slice embedding replaces the item ID).
    EarlyReplace,
    /// Candidate token = `W[g‖s]`.
    EarlyConcat,
    /// Candidate token = `αβg + (1−α)s`, `α = σ(f(g))` — the gate input is
    /// the item-ID embedding itself.
    EarlyGateLearnable,
    /// Same gate, but `α = σ(f(u))` for a scalar side feature `u`.
    EarlyGateFeature,
    /// Independent tokens `{βg, s}`.
    LateIndependent,
    /// `LateIndependent` plus `λ‖s − stopgrad(g)‖²` on the loss.
    LateAligned,
    /// Tokens `{r, s}`; no item-ID token exists.
    Fluid,
}

/// Scalar side feature feeding the rule-based gate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateFeature {
    /// L2 norm of the item-ID embedding (differentiated through).
    IdEmbeddingNorm,
    /// `ln(1 + exposure)` — a pure input with no parameter path.
    ExposureCount,
}

/// A fusion variant plus its variant-specific knobs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionConfig {
    pub variant: FusionVariant,
    /// Alignment weight λ ≥ 0 (LateAligned only).
    #[serde(default = "default_lambda")]
    pub alignment_weight: f64,
    /// Gate input (EarlyGateFeature only).
    #[serde(default = "default_gate_feature")]
    pub gate_feature: GateFeature,
}

fn default_lambda() -> f64 {
    0.1
}

fn default_gate_feature() -> GateFeature {
    GateFeature::IdEmbeddingNorm
}

impl FusionConfig {
    pub fn new(variant: FusionVariant) -> Self {
        FusionConfig {
            variant,
            alignment_weight: default_lambda(),
            gate_feature: default_gate_feature(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alignment_weight >= 0.0) {
            return Err(Error::Config("alignment_weight must be ≥ 0".into()));
        }
        Ok(())
    }
}

/// Candidate-side architecture: the fusion variants plus the reference
/// arrangements the ablation tables compare against.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateArch {
    /// No candidate-side token at all (ID removal without a replacement).
    UserOnly,
    /// Classic baseline: user + item-ID token.
    IdOnly,
    /// One of the seven fusion variants.
    Fusion(FusionConfig),
    /// Naive joint setup: user + {βg, s, r} trained together.
    IdSliceRoom,
}

impl CandidateArch {
    /// Shorthand constructor for a plain fusion variant.
    pub fn fusion(variant: FusionVariant) -> Self {
        CandidateArch::Fusion(FusionConfig::new(variant))
    }

    /// Whether the forward graph reads the item-ID embedding.
    pub fn uses_item_id(&self) -> bool {
        match self {
            CandidateArch::UserOnly => false,
            CandidateArch::IdOnly | CandidateArch::IdSliceRoom => true,
            CandidateArch::Fusion(f) => !matches!(
                f.variant,
                FusionVariant::EarlyReplace | FusionVariant::Fluid
            ),
        }
    }

    /// Whether the forward graph reads slice-code embeddings.
    pub fn uses_slice(&self) -> bool {
        match self {
            CandidateArch::UserOnly | CandidateArch::IdOnly => false,
            CandidateArch::Fusion(_) | CandidateArch::IdSliceRoom => true,
        }
    }

    /// Whether the forward graph reads room-code embeddings.
    pub fn uses_room(&self) -> bool {
        matches!(
            self,
            CandidateArch::Fusion(FusionConfig { variant: FusionVariant::Fluid, .. })
                | CandidateArch::IdSliceRoom
        )
    }
}

/// Model geometry and initialization parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    /// Width of every token (user, candidate, slice, room).
    pub token_dim: usize,
    /// Hidden width of the 2-layer backbone.
    pub hidden_dim: usize,
    /// Hashed user-table rows.
    pub user_rows: usize,
    /// Hashed item-ID-table rows.
    pub item_rows: usize,
    /// Code levels L (must divide token_dim).
    pub levels: usize,
    /// Codebook size N.
    pub codebook_size: u32,
    /// Slice/room table indexing scheme.
    pub table_scheme: TableScheme,
    /// Row cap per prefix table level.
    pub max_rows: usize,
    /// When true, slice and room lookups share one table set.
    pub shared_tables: bool,
    /// Embedding tables initialize i.i.d. uniform in ±init_scale.
    pub init_scale: f32,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            token_dim: 32,
            hidden_dim: 64,
            user_rows: 4096,
            item_rows: 16384,
            levels: 4,
            codebook_size: 16,
            table_scheme: TableScheme::PrefixNgram,
            max_rows: 1 << 20,
            shared_tables: false,
            init_scale: 0.1,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.token_dim == 0
            || self.hidden_dim == 0
            || self.user_rows == 0
            || self.item_rows == 0
            || self.levels == 0
            || self.codebook_size == 0
            || self.max_rows == 0
        {
            return Err(Error::Config("model dimensions must all be positive".into()));
        }
        if self.token_dim % self.levels != 0 {
            return Err(Error::Config(format!(
                "token_dim {} must be divisible by levels {}",
                self.token_dim, self.levels
            )));
        }
        if !(self.init_scale > 0.0) || !self.init_scale.is_finite() {
            return Err(Error::Config("init_scale must be positive".into()));
        }
        Ok(())
    }

    /// Per-level embedding width of the code tables.
    pub fn per_level_dim(&self) -> usize {
        self.token_dim / self.levels
    }
}

/// Multiplicative schedule for the item-ID scale β.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaSchedule {
    Constant(f64),
    /// β = 1 before `from_step`, linear down to 0 at `to_step`, 0 after.
    Linear { from_step: u64, to_step: u64 },
}

impl BetaSchedule {
    /// β at a global step; always in [0, 1], piecewise linear.
    pub fn value(&self, step: u64) -> f64 {
        match *self {
            BetaSchedule::Constant(b) => b.clamp(0.0, 1.0),
            BetaSchedule::Linear { from_step, to_step } => {
                if step <= from_step {
                    1.0
                } else if step >= to_step {
                    0.0
                } else {
                    (to_step - step) as f64 / (to_step - from_step) as f64
                }
            }
        }
    }
}

/// Optimizer and evaluation-window settings for one training segment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Plain SGD step size.
    pub learning_rate: f64,
    pub beta: BetaSchedule,
    /// Apply no updates to the item-ID table during this run (gradients
    /// still flow through βg into the backbone; only the table is pinned).
    pub freeze_id: bool,
    /// Trailing progressive-validation window (records).
    pub eval_window: usize,
    /// Emit a metric-trace row every this many steps.
    pub trace_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.05,
            beta: BetaSchedule::Constant(1.0),
            freeze_id: false,
            eval_window: 50_000,
            trace_every: 10_000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::Config("learning_rate must be finite and ≥ 0".into()));
        }
        if self.eval_window == 0 || self.trace_every == 0 {
            return Err(Error::Config("eval_window and trace_every must be positive".into()));
        }
        Ok(())
    }
}

/// One metric-trace row; serialized as CSV `step, window_auc,
/// window_logloss, beta`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: u64,
    pub window_auc: f64,
    pub window_logloss: f64,
    pub beta: f64,
}

/// CSV for a metric trace (header `step,window_auc,window_logloss,beta`).
pub fn trace_csv(rows: &[TraceRow]) -> String {
    let mut out = String::from("step,window_auc,window_logloss,beta\n");
    for r in rows {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6}\n",
            r.step, r.window_auc, r.window_logloss, r.beta
        ));
    }
    out
}

/// One progressive-validation entry: the prediction made *before* the
/// record's update was applied.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowEntry {
    pub pred: f64,
    pub label: u8,
    pub exposure: u64,
    pub item_id: u64,
}

/// Output of [`train_stream`]: final state, metric trace, and the raw
/// trailing window for segment-level evaluation.
#[derive(Debug, Clone)]
pub struct TrainResult {
    pub checkpoint: Checkpoint,
    pub trace: Vec<TraceRow>,
    pub final_window: Vec<WindowEntry>,
}

/// Single-pass streaming SGD over a tick-ordered encoded log.
///
/// Per record: predict (progressive validation), compute gradients, apply
/// the update, advance the step counter. The trailing window keeps the
/// last `eval_window` predictions; every `trace_every` steps its AUC and
/// logloss become one trace row (skipped while the window is still
/// single-class). Deterministic: the result is a pure function of
/// `(records, start, arch, config)`.
pub fn train_stream(
    records: &[EncodedRecord],
    start: Checkpoint,
    arch: CandidateArch,
    config: &TrainConfig,
) -> Result<TrainResult> {
    config.validate()?;
    if let CandidateArch::Fusion(f) = &arch {
        f.validate()?;
    }
    let mut params = start.params;
    let mut step = start.step;
    let mut pass = Pass::new(&params);
    let mut window: VecDeque<WindowEntry> = VecDeque::with_capacity(config.eval_window);
    let mut trace = Vec::new();
    let mut beta = config.beta.value(step);

    for record in records {
        beta = config.beta.value(step);
        let inputs = RecordInputs::from_encoded(record);
        let loss = params.backward_into(&arch, &inputs, beta, &mut pass)?;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss at step {step}")));
        }
        if window.len() == config.eval_window {
            window.pop_front();
        }
        window.push_back(WindowEntry {
            pred: pass.p,
            label: record.label,
            exposure: record.exposure,
            item_id: record.item_id,
        });
        params.apply_sgd(&pass, config.learning_rate, config.freeze_id);
        step += 1;
        if step % config.trace_every as u64 == 0 {
            if let Some(row) = window_metrics(&window, step, beta) {
                trace.push(row);
            }
        }
    }

    Ok(TrainResult {
        checkpoint: Checkpoint {
            params,
            arch,
            step,
            beta,
            learning_rate: config.learning_rate,
        },
        trace,
        final_window: window.into_iter().collect(),
    })
}

/// AUC/logloss of the current window, or None while it is single-class.
fn window_metrics(window: &VecDeque<WindowEntry>, step: u64, beta: f64) -> Option<TraceRow> {
    let preds: Vec<f64> = window.iter().map(|e| e.pred).collect();
    let labels: Vec<u8> = window.iter().map(|e| e.label).collect();
    let window_auc = crate::eval::auc(&preds, &labels).ok()?;
    let window_logloss = crate::eval::logloss(&preds, &labels).ok()?;
    Some(TraceRow { step, window_auc, window_logloss, beta })
}
