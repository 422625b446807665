//! Run configuration: one declarative document covering the whole pipeline.
//!
//! A [`RunConfig`] holds every knob the CLI commands read — world
//! generation, codebook fitting, table geometry, the candidate
//! architecture, training, the warmup recipe, the ablation matrix, and
//! evaluation. Configs load from TOML with unknown keys rejected at every
//! level; missing keys take the committed defaults. Precedence is
//! flag > file > default: the file overlays the defaults, then CLI flags
//! overlay the file. Every command writes its fully resolved config next
//! to its outputs, so a run can be reproduced from its artifacts alone.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::eval::BucketStat;
use crate::ranker::{ArchConfig, CandidateArch, TrainConfig};
use crate::recipe::{AblationConfig, RecipeConfig};
use crate::synthgen::WorldConfig;
use crate::{Error, Result};

/// Residual-quantization fitting parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CodebookConfig {
    /// Quantization levels L.
    pub levels: usize,
    /// Codewords per level N.
    pub clusters: u32,
    /// Lloyd iteration cap per level.
    pub max_iters: usize,
    /// Relative SSE improvement below which a level stops early.
    pub tol: f64,
    /// Number of training vectors taken from the head of the log
    /// (0 = use every record).
    pub sample: usize,
    pub seed: u64,
}

impl Default for CodebookConfig {
    fn default() -> Self {
        CodebookConfig {
            levels: 4,
            clusters: 16,
            max_iters: 50,
            tol: 1e-6,
            sample: 100_000,
            seed: 29,
        }
    }
}

impl CodebookConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return Err(Error::Config("codebook levels must be ≥ 1".into()));
        }
        if self.clusters < 2 {
            return Err(Error::Config("codebook clusters must be ≥ 2".into()));
        }
        if self.max_iters == 0 {
            return Err(Error::Config("codebook max_iters must be ≥ 1".into()));
        }
        if !(self.tol.is_finite() && self.tol >= 0.0) {
            return Err(Error::Config("codebook tol must be finite and ≥ 0".into()));
        }
        Ok(())
    }
}

/// Stage lengths for the CLI `recipe` command, including the warm base
/// segment trained before the recipe starts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RecipeSection {
    /// Records used to train the warm ID-only base (ignored when the
    /// command resumes from an existing checkpoint).
    pub base_records: usize,
    pub stage1_records: usize,
    pub stage2_records: usize,
    pub stage3_records: usize,
    /// Fraction of stage 2 over which β decays 1 → 0.
    pub phaseout_fraction: f64,
    pub freeze_id_during_phaseout: bool,
}

impl Default for RecipeSection {
    fn default() -> Self {
        RecipeSection {
            base_records: 150_000,
            stage1_records: 100_000,
            stage2_records: 100_000,
            stage3_records: 150_000,
            phaseout_fraction: 0.2,
            freeze_id_during_phaseout: false,
        }
    }
}

impl RecipeSection {
    /// The library-level recipe plan, with the shared training settings
    /// attached.
    pub fn to_recipe_config(&self, train: TrainConfig) -> RecipeConfig {
        RecipeConfig {
            stage1_records: self.stage1_records,
            stage2_records: self.stage2_records,
            stage3_records: self.stage3_records,
            phaseout_fraction: self.phaseout_fraction,
            freeze_id_during_phaseout: self.freeze_id_during_phaseout,
            train,
        }
    }
}

/// Segment sizes and seeds for the CLI `ablate` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSection {
    pub base_records: usize,
    pub branch_records: usize,
    pub seeds: Vec<u64>,
}

impl Default for AblationSection {
    fn default() -> Self {
        AblationSection {
            base_records: 300_000,
            branch_records: 150_000,
            seeds: vec![101, 102, 103, 104, 105],
        }
    }
}

/// Evaluation and diagnostics parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Impressions with fewer prior item views than this count as cold.
    pub cold_threshold: u64,
    /// Age bucket width (ticks) for the norm-vs-age curve.
    pub bucket_ticks: u64,
    /// Mean or median aggregation inside each age bucket.
    pub bucket_stat: BucketStat,
    /// Slice counts at which vote recovery is measured.
    pub vote_slice_counts: Vec<usize>,
    pub vote_seeds: Vec<u64>,
    /// Simulated rooms per seed.
    pub vote_rooms: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            cold_threshold: 50,
            bucket_ticks: 5,
            bucket_stat: BucketStat::Mean,
            vote_slice_counts: vec![1, 5, 25],
            vote_seeds: vec![1, 2, 3, 4, 5],
            vote_rooms: 200,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.cold_threshold == 0 {
            return Err(Error::Config("cold_threshold must be ≥ 1".into()));
        }
        if self.bucket_ticks == 0 {
            return Err(Error::Config("bucket_ticks must be ≥ 1".into()));
        }
        if self.vote_slice_counts.is_empty() || self.vote_slice_counts.contains(&0) {
            return Err(Error::Config("vote_slice_counts must be non-empty, all ≥ 1".into()));
        }
        if self.vote_seeds.is_empty() || self.vote_rooms == 0 {
            return Err(Error::Config("vote_seeds and vote_rooms must be non-empty".into()));
        }
        Ok(())
    }
}

/// The complete pipeline configuration.
///
/// Scalar fields come first so the TOML form stays valid (values precede
/// tables).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Model parameter-initialization seed (world and codebook seeds live
    /// in their own sections).
    pub seed: u64,
    /// Candidate-side architecture trained by the `train` command.
    pub candidate: CandidateArch,
    pub world: WorldConfig,
    pub codebook: CodebookConfig,
    pub arch: ArchConfig,
    pub train: TrainConfig,
    pub recipe: RecipeSection,
    pub ablation: AblationSection,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 11,
            candidate: CandidateArch::IdOnly,
            world: WorldConfig::default(),
            codebook: CodebookConfig::default(),
            arch: ArchConfig::default(),
            train: TrainConfig::default(),
            recipe: RecipeSection::default(),
            ablation: AblationSection::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parses and fully validates a TOML config file.
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let config: RunConfig = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    /// The file config when given, the defaults otherwise.
    pub fn from_file_or_default(path: Option<&Path>) -> Result<RunConfig> {
        match path {
            Some(p) => RunConfig::load(p),
            None => Ok(RunConfig::default()),
        }
    }

    /// Validates every section and their cross-field consistency.
    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.codebook.validate()?;
        self.arch.validate()?;
        self.train.validate()?;
        self.recipe.to_recipe_config(self.train).validate()?;
        self.ablation_config().validate()?;
        self.eval.validate()?;
        if self.arch.levels != self.codebook.levels {
            return Err(Error::Config(format!(
                "arch.levels ({}) must equal codebook.levels ({}): the table set \
                 indexes one table per quantization level",
                self.arch.levels, self.codebook.levels
            )));
        }
        if self.arch.codebook_size != self.codebook.clusters {
            return Err(Error::Config(format!(
                "arch.codebook_size ({}) must equal codebook.clusters ({}): row \
                 indexing assumes the fitted codeword range",
                self.arch.codebook_size, self.codebook.clusters
            )));
        }
        Ok(())
    }

    /// The library-level ablation configuration assembled from the
    /// relevant sections.
    pub fn ablation_config(&self) -> AblationConfig {
        AblationConfig {
            base_records: self.ablation.base_records,
            branch_records: self.ablation.branch_records,
            seeds: self.ablation.seeds.clone(),
            cold_threshold: self.eval.cold_threshold,
            arch: self.arch,
            train: self.train,
        }
    }

    /// The resolved document written next to every command's outputs.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("config serialization: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ranker::{FusionConfig, FusionVariant, GateFeature};

    #[test]
    fn defaults_validate_and_round_trip_through_toml() {
        let config = RunConfig::default();
        config.validate().unwrap();
        let text = config.to_toml().unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(config, back);
    }

    #[test]
    fn fusion_candidate_round_trips_with_defaults_filled() {
        let mut config = RunConfig::default();
        config.candidate = CandidateArch::Fusion(FusionConfig {
            variant: FusionVariant::LateAligned,
            alignment_weight: 0.25,
            gate_feature: GateFeature::IdEmbeddingNorm,
        });
        let text = config.to_toml().unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(config, back);
        // A hand-written fusion section picks up the default λ.
        let parsed: RunConfig = toml::from_str(
            "[candidate.fusion]\nvariant = \"late_aligned\"\n",
        )
        .unwrap();
        match parsed.candidate {
            CandidateArch::Fusion(f) => {
                assert_eq!(f.variant, FusionVariant::LateAligned);
                assert_eq!(f.alignment_weight, 0.1);
            }
            other => panic!("expected fusion, got {other:?}"),
        }
    }

    #[test]
    fn unknown_keys_are_rejected_at_every_level() {
        assert!(toml::from_str::<RunConfig>("mystery = 3\n").is_err());
        assert!(toml::from_str::<RunConfig>("[world]\nmystery = 3\n").is_err());
        assert!(toml::from_str::<RunConfig>("[train]\nmystery = 3\n").is_err());
        assert!(toml::from_str::<RunConfig>(
            "[candidate.fusion]\nvariant = \"fluid\"\nmystery = 3\n"
        )
        .is_err());
    }

    #[test]
    fn partial_files_overlay_the_defaults() {
        let parsed: RunConfig =
            toml::from_str("seed = 999\n[world]\nticks = 123\n").unwrap();
        assert_eq!(parsed.seed, 999);
        assert_eq!(parsed.world.ticks, 123);
        // Everything else keeps its default.
        assert_eq!(parsed.world.n_users, WorldConfig::default().n_users);
        assert_eq!(parsed.train, TrainConfig::default());
    }

    #[test]
    fn cross_field_mismatches_are_config_errors() {
        let mut config = RunConfig::default();
        config.codebook.levels = 3;
        assert!(matches!(config.validate(), Err(Error::Config(_))));
        let mut config = RunConfig::default();
        config.codebook.clusters = 8;
        assert!(matches!(config.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn file_loading_reports_actionable_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        assert!(matches!(RunConfig::load(&path), Err(Error::Config(_))));
        std::fs::write(&path, "not = valid").unwrap();
        assert!(matches!(RunConfig::load(&path), Err(Error::Config(_))));
        std::fs::write(&path, "seed = 4\n").unwrap();
        assert_eq!(RunConfig::load(&path).unwrap().seed, 4);
        assert_eq!(
            RunConfig::from_file_or_default(None).unwrap(),
            RunConfig::default()
        );
    }
}
