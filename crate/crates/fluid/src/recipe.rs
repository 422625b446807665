//! Staged ID-to-code warmup and the ablation protocol.
//!
//! A model that has served traffic with item-ID embeddings cannot simply
//! have its candidate side swapped for semantic-code tokens — the backbone
//! would face an input distribution it has never seen. The warmup recipe
//! migrates in three stages over one continuous stream, each stage
//! consuming the next segment of records with the step counter carried
//! through:
//!
//! 1. **Attach** — late fusion (`{βg, s}`, β = 1): the slice tables train
//!    inside the warm network while the ID path keeps serving.
//! 2. **Phase out** — β decays linearly to 0 over the first part of the
//!    segment, then training continues with the ID token silenced.
//! 3. **Swap** — the room tables are seeded with a bitwise copy of the
//!    warm slice tables and the architecture switches to the ID-free
//!    arrangement (`{r, s}`).
//!
//! [`run_ablation`] branches one warm ID-only base into every fusion
//! variant (plus reference arrangements) on an identical record segment,
//! across several parameter-init seeds, and reports per-seed and median
//! trailing-window metrics with cold/warm splits.

use serde::{Deserialize, Serialize};

use crate::eval::{auc, logloss, median};
use crate::lucid::{splitmix64, TableScheme};
use crate::ranker::{
    train_stream, ArchConfig, BetaSchedule, CandidateArch, Checkpoint, FusionVariant,
    ModelParams, TraceRow, TrainConfig, TrainResult, WindowEntry,
};
use crate::synthgen::EncodedRecord;
use crate::{Error, Result};

/// Stage lengths and phase-out shape for [`run_recipe`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RecipeConfig {
    /// Records consumed by stage 1 (late-fusion attach).
    pub stage1_records: usize,
    /// Records consumed by stage 2 (β phase-out).
    pub stage2_records: usize,
    /// Records consumed by stage 3 (ID-free swap).
    pub stage3_records: usize,
    /// Fraction of stage 2 over which β decays 1 → 0 (the rest of the
    /// stage trains at β = 0).
    pub phaseout_fraction: f64,
    /// Freeze the item-ID table while β < 1.
    pub freeze_id_during_phaseout: bool,
    pub train: TrainConfig,
}

impl Default for RecipeConfig {
    fn default() -> Self {
        RecipeConfig {
            stage1_records: 50_000,
            stage2_records: 50_000,
            stage3_records: 50_000,
            phaseout_fraction: 0.2,
            freeze_id_during_phaseout: false,
            train: TrainConfig::default(),
        }
    }
}

impl RecipeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage1_records == 0 || self.stage2_records == 0 || self.stage3_records == 0 {
            return Err(Error::Config("every recipe stage needs at least one record".into()));
        }
        if !(0.0 < self.phaseout_fraction && self.phaseout_fraction <= 1.0) {
            return Err(Error::Config("phaseout_fraction must lie in (0, 1]".into()));
        }
        self.train.validate()
    }

    pub fn total_records(&self) -> usize {
        self.stage1_records + self.stage2_records + self.stage3_records
    }
}

/// Outcome of one warmup stage.
#[derive(Debug, Clone)]
pub struct StageResult {
    pub name: &'static str,
    pub arch: CandidateArch,
    pub start_step: u64,
    pub end_step: u64,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Metric trace rows emitted during the stage.
    pub trace: Vec<TraceRow>,
    /// Trailing-window metrics at stage end (NaN while undefined).
    pub window_auc: f64,
    pub window_logloss: f64,
    /// Parameter components whose bits changed during the stage.
    pub component_diffs: Vec<&'static str>,
}

/// Outcome of the full three-stage warmup.
#[derive(Debug, Clone)]
pub struct RecipeResult {
    pub checkpoint: Checkpoint,
    pub stages: Vec<StageResult>,
    /// End-of-stage checkpoints, one per stage (the last one equals
    /// [`RecipeResult::checkpoint`]).
    pub stage_checkpoints: Vec<Checkpoint>,
    /// Trailing evaluation window at the end of stage 3.
    pub final_window: Vec<WindowEntry>,
    /// Whether the stage-3 room tables were bitwise equal to the warm
    /// slice tables at the hand-off (trivially true under shared tables).
    pub room_seeded_from_slice: bool,
}

/// Runs the three-stage warmup over the next `total_records()` records of
/// `records`, starting from a warm (typically ID-only) checkpoint. The
/// global step counter continues across stages, so β schedules and traces
/// stay on one axis.
pub fn run_recipe(
    records: &[EncodedRecord],
    start: Checkpoint,
    config: &RecipeConfig,
) -> Result<RecipeResult> {
    config.validate()?;
    if records.len() < config.total_records() {
        return Err(Error::Config(format!(
            "recipe needs {} records, stream has {}",
            config.total_records(),
            records.len()
        )));
    }
    let late = CandidateArch::fusion(FusionVariant::LateIndependent);
    let fluid = CandidateArch::fusion(FusionVariant::Fluid);
    let mut stages = Vec::with_capacity(3);

    // Stage 1: attach slice tables under late fusion, β = 1.
    let seg1 = &records[..config.stage1_records];
    let stage1_cfg =
        TrainConfig { beta: BetaSchedule::Constant(1.0), freeze_id: false, ..config.train };
    let before = start.params.clone();
    let start_step = start.step;
    let result1 = train_stream(seg1, start, late, &stage1_cfg)?;
    stages.push(stage_result(
        "stage1_late_attach",
        late,
        start_step,
        &before,
        &result1,
    ));
    let mut stage_checkpoints = vec![result1.checkpoint.clone()];

    // Stage 2: β decays 1 → 0 over the first `phaseout_fraction` of the
    // segment, then keeps training at 0.
    let seg2 = &records[config.stage1_records..config.stage1_records + config.stage2_records];
    let decay_steps =
        ((config.stage2_records as f64) * config.phaseout_fraction).round().max(1.0) as u64;
    let stage2_start = result1.checkpoint.step;
    let stage2_cfg = TrainConfig {
        beta: BetaSchedule::Linear {
            from_step: stage2_start,
            to_step: stage2_start + decay_steps,
        },
        freeze_id: config.freeze_id_during_phaseout,
        ..config.train
    };
    let before = result1.checkpoint.params.clone();
    let result2 = train_stream(seg2, result1.checkpoint, late, &stage2_cfg)?;
    stages.push(stage_result(
        "stage2_phase_out",
        late,
        stage2_start,
        &before,
        &result2,
    ));
    stage_checkpoints.push(result2.checkpoint.clone());

    // Stage 3: seed room tables from the warm slice tables, swap to the
    // ID-free architecture.
    let mut checkpoint = result2.checkpoint;
    if !checkpoint.params.room_tables_are_shared() {
        checkpoint.params.copy_slice_to_room()?;
    }
    let room_seeded_from_slice = (0..checkpoint.params.arch_config().levels).all(|l| {
        let slice = checkpoint.params.slice_table_set().table(l);
        let room = checkpoint.params.room_table_set().table(l);
        slice.len() == room.len()
            && slice.iter().zip(room).all(|(a, b)| a.to_bits() == b.to_bits())
    });
    let seg3 = &records[config.stage1_records + config.stage2_records..config.total_records()];
    let stage3_cfg =
        TrainConfig { beta: BetaSchedule::Constant(0.0), freeze_id: false, ..config.train };
    let stage3_start = checkpoint.step;
    let before = checkpoint.params.clone();
    let result3 = train_stream(seg3, checkpoint, fluid, &stage3_cfg)?;
    stages.push(stage_result(
        "stage3_fluid_swap",
        fluid,
        stage3_start,
        &before,
        &result3,
    ));

    stage_checkpoints.push(result3.checkpoint.clone());
    Ok(RecipeResult {
        checkpoint: result3.checkpoint,
        stages,
        stage_checkpoints,
        final_window: result3.final_window,
        room_seeded_from_slice,
    })
}

fn stage_result(
    name: &'static str,
    arch: CandidateArch,
    start_step: u64,
    before: &ModelParams,
    result: &TrainResult,
) -> StageResult {
    let preds: Vec<f64> = result.final_window.iter().map(|e| e.pred).collect();
    let labels: Vec<u8> = result.final_window.iter().map(|e| e.label).collect();
    StageResult {
        name,
        arch,
        start_step,
        end_step: result.checkpoint.step,
        beta_start: result.trace.first().map_or(result.checkpoint.beta, |r| r.beta),
        beta_end: result.checkpoint.beta,
        trace: result.trace.clone(),
        window_auc: auc(&preds, &labels).unwrap_or(f64::NAN),
        window_logloss: logloss(&preds, &labels).unwrap_or(f64::NAN),
        component_diffs: result.checkpoint.params.diff_components(before),
    }
}

/// Whether the windowed AUC has plateaued: over the trace rows in the last
/// `last_fraction` of steps, max − min < `tol` (needs ≥ 2 rows there).
pub fn auc_plateaued(trace: &[TraceRow], last_fraction: f64, tol: f64) -> bool {
    let Some(last) = trace.last() else { return false };
    let cutoff = last.step as f64 * (1.0 - last_fraction);
    let tail: Vec<f64> = trace
        .iter()
        .filter(|r| r.step as f64 >= cutoff)
        .map(|r| r.window_auc)
        .collect();
    if tail.len() < 2 {
        return false;
    }
    let max = tail.iter().cloned().fold(f64::MIN, f64::max);
    let min = tail.iter().cloned().fold(f64::MAX, f64::min);
    max - min < tol
}

/// Configuration of the full ablation matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    /// Records for the shared warm ID-only base.
    pub base_records: usize,
    /// Records for each branch (every row gets the same segment).
    pub branch_records: usize,
    /// Parameter-init seeds; the record stream is identical across seeds.
    pub seeds: Vec<u64>,
    /// Items with fewer prior impressions than this count as cold.
    pub cold_threshold: u64,
    pub arch: ArchConfig,
    pub train: TrainConfig,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            base_records: 300_000,
            branch_records: 150_000,
            seeds: vec![101, 102, 103, 104, 105],
            cold_threshold: 50,
            arch: ArchConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl AblationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_records == 0 || self.branch_records == 0 {
            return Err(Error::Config("base and branch segments need records".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("ablation needs at least one seed".into()));
        }
        self.arch.validate()?;
        self.train.validate()
    }

    pub fn total_records(&self) -> usize {
        self.base_records + self.branch_records
    }
}

/// Trailing-window metrics of one branch under one seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeedMetrics {
    pub seed: u64,
    pub auc: f64,
    pub logloss: f64,
    pub cold_auc: f64,
    pub warm_auc: f64,
}

/// One ablation row: a named branch with per-seed and median metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub per_seed: Vec<SeedMetrics>,
    pub median_auc: f64,
    pub median_logloss: f64,
    pub median_cold_auc: f64,
    pub median_warm_auc: f64,
    /// Relative AUC delta vs. the ID-only baseline row's median.
    pub delta_auc_vs_baseline: f64,
}

/// The complete ablation matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    pub baseline_name: String,
}

/// Branch names in report order.
pub const ABLATION_ROWS: [&str; 12] = [
    "id_baseline",
    "user_only",
    "early_replace",
    "early_concat",
    "early_gate_learnable",
    "early_gate_feature",
    "late_independent",
    "late_aligned",
    "fluid_staged",
    "naive_joint",
    "fluid_levelwise",
    "fluid_shared",
];

impl AblationReport {
    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    /// Long-format CSV: one line per (branch, seed).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("name,seed,auc,logloss,cold_auc,warm_auc\n");
        for row in &self.rows {
            for m in &row.per_seed {
                out.push_str(&format!(
                    "{},{},{:.6},{:.6},{:.6},{:.6}\n",
                    row.name, m.seed, m.auc, m.logloss, m.cold_auc, m.warm_auc
                ));
            }
        }
        out
    }

    /// Aligned text table of the medians.
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<22} {:>10} {:>9} {:>10} {:>10} {:>10}\n",
            "branch", "auc", "Δauc%", "logloss", "cold_auc", "warm_auc"
        ));
        for row in &self.rows {
            out.push_str(&format!(
                "{:<22} {:>10.4} {:>8.2}% {:>10.4} {:>10.4} {:>10.4}\n",
                row.name,
                row.median_auc,
                100.0 * row.delta_auc_vs_baseline,
                row.median_logloss,
                row.median_cold_auc,
                row.median_warm_auc
            ));
        }
        out
    }
}

/// Trailing-window metrics with a cold/warm split by prior exposure.
fn window_metrics(entries: &[WindowEntry], cold_threshold: u64, seed: u64) -> SeedMetrics {
    let metrics = |subset: Vec<&WindowEntry>| -> (f64, f64) {
        let preds: Vec<f64> = subset.iter().map(|e| e.pred).collect();
        let labels: Vec<u8> = subset.iter().map(|e| e.label).collect();
        (
            auc(&preds, &labels).unwrap_or(f64::NAN),
            logloss(&preds, &labels).unwrap_or(f64::NAN),
        )
    };
    let (overall_auc, overall_logloss) = metrics(entries.iter().collect());
    let (cold_auc, _) = metrics(entries.iter().filter(|e| e.exposure < cold_threshold).collect());
    let (warm_auc, _) = metrics(entries.iter().filter(|e| e.exposure >= cold_threshold).collect());
    SeedMetrics { seed, auc: overall_auc, logloss: overall_logloss, cold_auc, warm_auc }
}

fn median_finite(values: &[f64]) -> f64 {
    let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    if finite.is_empty() {
        f64::NAN
    } else {
        median(&finite)
    }
}

/// Runs the full ablation matrix. For each seed: train the warm ID-only
/// base on the first segment, then branch every row onto the same
/// follow-up segment. Seeds vary only parameter initialization.
pub fn run_ablation(records: &[EncodedRecord], config: &AblationConfig) -> Result<AblationReport> {
    config.validate()?;
    if records.len() < config.total_records() {
        return Err(Error::Config(format!(
            "ablation needs {} records, stream has {}",
            config.total_records(),
            records.len()
        )));
    }
    let base_seg = &records[..config.base_records];
    let branch_seg = &records[config.base_records..config.total_records()];
    let full_seg = &records[..config.total_records()];
    let branch_train =
        TrainConfig { beta: BetaSchedule::Constant(1.0), freeze_id: false, ..config.train };
    // Staged warmup inside the branch budget: 20% attach, 20% phase-out,
    // 60% ID-free. The final architecture gets the longest run — the room
    // tables start fresh at stage 3 (seeded from the slice tables) and need
    // the bulk of the budget to catch up with an ID table that has trained
    // since the first record.
    let staged = |branch: usize| -> RecipeConfig {
        let s1 = (branch as f64 * 0.2).round() as usize;
        let s2 = (branch as f64 * 0.2).round() as usize;
        RecipeConfig {
            stage1_records: s1.max(1),
            stage2_records: s2.max(1),
            stage3_records: branch - s1 - s2,
            phaseout_fraction: 0.2,
            freeze_id_during_phaseout: false,
            train: config.train,
        }
    };

    let mut per_seed: Vec<Vec<SeedMetrics>> = vec![Vec::new(); ABLATION_ROWS.len()];
    for &seed in &config.seeds {
        let base_params = ModelParams::new(config.arch, seed)?;
        let base = train_stream(
            base_seg,
            Checkpoint::fresh(base_params, CandidateArch::IdOnly),
            CandidateArch::IdOnly,
            &branch_train,
        )?;

        let mut results: Vec<(usize, Vec<WindowEntry>)> = Vec::new();
        let branch = |arch: CandidateArch| -> Result<Vec<WindowEntry>> {
            let r = train_stream(branch_seg, base.checkpoint.clone(), arch, &branch_train)?;
            Ok(r.final_window)
        };

        results.push((0, branch(CandidateArch::IdOnly)?));
        results.push((1, branch(CandidateArch::UserOnly)?));
        results.push((2, branch(CandidateArch::fusion(FusionVariant::EarlyReplace))?));
        results.push((3, branch(CandidateArch::fusion(FusionVariant::EarlyConcat))?));
        results.push((4, branch(CandidateArch::fusion(FusionVariant::EarlyGateLearnable))?));
        results.push((5, branch(CandidateArch::fusion(FusionVariant::EarlyGateFeature))?));
        results.push((6, branch(CandidateArch::fusion(FusionVariant::LateIndependent))?));
        results.push((7, branch(CandidateArch::fusion(FusionVariant::LateAligned))?));

        // Staged FLUID warmup.
        let recipe = run_recipe(branch_seg, base.checkpoint.clone(), &staged(branch_seg.len()))?;
        results.push((8, recipe.final_window));

        // Naive joint: everything reinitialized, trained on the full
        // stream up to the branch end.
        let naive_params = ModelParams::new(config.arch, splitmix64(seed ^ 0x6A0E))?;
        let naive = train_stream(
            full_seg,
            Checkpoint::fresh(naive_params, CandidateArch::IdSliceRoom),
            CandidateArch::IdSliceRoom,
            &branch_train,
        )?;
        results.push((9, naive.final_window));

        // Scheme ablations: warm backbone adopted into fresh geometry.
        let mut levelwise_arch = config.arch;
        levelwise_arch.table_scheme = TableScheme::LevelWise;
        let mut levelwise_params = ModelParams::new(levelwise_arch, seed)?;
        levelwise_params.adopt_non_code_components(&base.checkpoint.params)?;
        let levelwise = run_recipe(
            branch_seg,
            Checkpoint {
                params: levelwise_params,
                arch: CandidateArch::IdOnly,
                step: base.checkpoint.step,
                beta: 1.0,
                learning_rate: config.train.learning_rate,
            },
            &staged(branch_seg.len()),
        )?;
        results.push((10, levelwise.final_window));

        let mut shared_arch = config.arch;
        shared_arch.shared_tables = true;
        let mut shared_params = ModelParams::new(shared_arch, seed)?;
        shared_params.adopt_non_code_components(&base.checkpoint.params)?;
        let shared = run_recipe(
            branch_seg,
            Checkpoint {
                params: shared_params,
                arch: CandidateArch::IdOnly,
                step: base.checkpoint.step,
                beta: 1.0,
                learning_rate: config.train.learning_rate,
            },
            &staged(branch_seg.len()),
        )?;
        results.push((11, shared.final_window));

        for (row_idx, window) in results {
            per_seed[row_idx].push(window_metrics(&window, config.cold_threshold, seed));
        }
    }

    let mut rows: Vec<AblationRow> = ABLATION_ROWS
        .iter()
        .zip(per_seed)
        .map(|(&name, per_seed)| {
            let aucs: Vec<f64> = per_seed.iter().map(|m| m.auc).collect();
            let loglosses: Vec<f64> = per_seed.iter().map(|m| m.logloss).collect();
            let colds: Vec<f64> = per_seed.iter().map(|m| m.cold_auc).collect();
            let warms: Vec<f64> = per_seed.iter().map(|m| m.warm_auc).collect();
            AblationRow {
                name: name.to_string(),
                per_seed,
                median_auc: median_finite(&aucs),
                median_logloss: median_finite(&loglosses),
                median_cold_auc: median_finite(&colds),
                median_warm_auc: median_finite(&warms),
                delta_auc_vs_baseline: 0.0,
            }
        })
        .collect();
    let baseline_auc = rows[0].median_auc;
    for row in rows.iter_mut() {
        row.delta_auc_vs_baseline = (row.median_auc - baseline_auc) / baseline_auc;
    }
    Ok(AblationReport { rows, baseline_name: ABLATION_ROWS[0].to_string() })
}
