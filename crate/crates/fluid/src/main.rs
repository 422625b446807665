//! Pipeline command-line entry point.
//!
//! Subcommands compose through files: `synth` writes a dataset directory,
//! `fit-codebook` and `encode` derive artifacts from it, and `train` /
//! `recipe` / `ablate` / `diagnose` consume the encoded log. Every command
//! validates its configuration up front, never mutates its inputs, writes
//! the fully resolved config plus the tool version next to its outputs,
//! and produces byte-identical files when re-run with identical inputs.
//! Exit codes: 0 success, 2 configuration error, 3 missing or malformed
//! data, 4 numeric failure. Set `FLUID_LOG=quiet|info|debug` to control
//! stderr verbosity (default `info`).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use fluid::config::RunConfig;
use fluid::eval::{gate_inversion, norm_age_csv, norm_vs_age, vote_recovery};
use fluid::ranker::{
    trace_csv, CandidateArch, Checkpoint, FusionVariant, ModelParams, TraceRow,
};
use fluid::recipe::{run_ablation, run_recipe, StageResult};
use fluid::rqkmeans::Codebook;
use fluid::synthgen::{
    encode_log, read_log, write_log, EncodedRecord, InteractionRecord, World,
};
use fluid::{Error, Result};

#[derive(Parser)]
#[command(
    name = "fluid",
    version,
    about = "Semantic-code CTR ranking pipeline: synthetic data, residual \
             quantization, fusion training, warmup recipes, and diagnostics"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand.
#[derive(Args)]
struct Common {
    /// TOML run configuration; committed defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the seed this command's randomness derives from (synth:
    /// world seed; fit-codebook: k-means seed; train/recipe: parameter
    /// init; ablate/diagnose: no effect — their seed lists come from the
    /// config file).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; created if missing.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic world and its interaction log.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Fit a residual-quantization codebook on a dataset's slice vectors.
    FitCodebook {
        #[command(flatten)]
        common: Common,
        /// Dataset directory produced by `synth`.
        #[arg(long)]
        data: PathBuf,
    },
    /// Attach slice codes and cumulative room codes to a log.
    Encode {
        #[command(flatten)]
        common: Common,
        /// Dataset directory produced by `synth`.
        #[arg(long)]
        data: PathBuf,
        /// Codebook file produced by `fit-codebook`.
        #[arg(long)]
        codebook: PathBuf,
    },
    /// Stream-train the configured candidate architecture on an encoded log.
    Train {
        #[command(flatten)]
        common: Common,
        /// Encoded log produced by `encode`.
        #[arg(long)]
        data: PathBuf,
        /// Resume from a checkpoint instead of fresh parameters.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Run the three-stage ID-to-code warmup.
    Recipe {
        #[command(flatten)]
        common: Common,
        /// Encoded log produced by `encode`.
        #[arg(long)]
        data: PathBuf,
        /// Warm starting checkpoint; when omitted, an ID-only base is
        /// trained on the first `recipe.base_records` records.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run the fusion-variant ablation matrix.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Encoded log produced by `encode`.
        #[arg(long)]
        data: PathBuf,
    },
    /// Emit diagnostic curves for a trained checkpoint.
    Diagnose {
        #[command(flatten)]
        common: Common,
        /// Dataset directory produced by `synth` (for the world document).
        #[arg(long)]
        data: PathBuf,
        /// Encoded log produced by `encode`.
        #[arg(long)]
        encoded: PathBuf,
        /// Codebook file produced by `fit-codebook`.
        #[arg(long)]
        codebook: PathBuf,
        /// Checkpoint produced by `train` or `recipe`.
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

/// Stderr verbosity from `FLUID_LOG`: 0 quiet, 1 info (default), 2 debug.
fn verbosity() -> u8 {
    match std::env::var("FLUID_LOG").as_deref() {
        Ok("quiet") | Ok("0") => 0,
        Ok("debug") | Ok("2") => 2,
        _ => 1,
    }
}

macro_rules! info {
    ($($arg:tt)*) => {
        if verbosity() >= 1 {
            eprintln!($($arg)*);
        }
    };
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(command: Command) -> Result<()> {
    let started = Instant::now();
    match command {
        Command::Synth { common } => {
            let (config, out) = prepare(&common, |cfg, seed| cfg.world.seed = seed)?;
            cmd_synth(&config, &out)?;
        }
        Command::FitCodebook { common, data } => {
            let (config, out) = prepare(&common, |cfg, seed| cfg.codebook.seed = seed)?;
            cmd_fit_codebook(&config, &data, &out)?;
        }
        Command::Encode { common, data, codebook } => {
            let (config, out) = prepare(&common, |_, _| {})?;
            cmd_encode(&config, &data, &codebook, &out)?;
        }
        Command::Train { common, data, resume } => {
            let (config, out) = prepare(&common, |cfg, seed| cfg.seed = seed)?;
            cmd_train(&config, &data, resume.as_deref(), &out)?;
        }
        Command::Recipe { common, data, checkpoint } => {
            let (config, out) = prepare(&common, |cfg, seed| cfg.seed = seed)?;
            cmd_recipe(&config, &data, checkpoint.as_deref(), &out)?;
        }
        Command::Ablate { common, data } => {
            let (config, out) = prepare(&common, |_, _| {})?;
            cmd_ablate(&config, &data, &out)?;
        }
        Command::Diagnose { common, data, encoded, codebook, checkpoint } => {
            let (config, out) = prepare(&common, |_, _| {})?;
            cmd_diagnose(&config, &data, &encoded, &codebook, &checkpoint, &out)?;
        }
    }
    info!("done in {:.1}s", started.elapsed().as_secs_f64());
    Ok(())
}

/// Loads the config (flag > file > default), applies the `--seed`
/// override, validates, creates the output directory, and writes the
/// resolved config plus the tool version into it.
fn prepare(
    common: &Common,
    apply_seed: impl FnOnce(&mut RunConfig, u64),
) -> Result<(RunConfig, PathBuf)> {
    let mut config = RunConfig::from_file_or_default(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        apply_seed(&mut config, seed);
    }
    config.validate()?;
    fs::create_dir_all(&common.out)?;
    fs::write(common.out.join("resolved_config.toml"), config.to_toml()?)?;
    fs::write(
        common.out.join("VERSION"),
        format!("{} {}\n", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION")),
    )?;
    Ok((config, common.out.clone()))
}

fn cmd_synth(config: &RunConfig, out: &Path) -> Result<()> {
    let world = World::build(&config.world)?;
    let log = world.generate_log();
    world.save(&out.join("world.json"))?;
    write_log(&out.join("log.jsonl"), &log)?;
    info!(
        "synth: {} items, {} users, {} records -> {}",
        world.items.len(),
        world.users.len(),
        log.len(),
        out.display()
    );
    Ok(())
}

fn cmd_fit_codebook(config: &RunConfig, data: &Path, out: &Path) -> Result<()> {
    let log: Vec<InteractionRecord> = read_log(&data.join("log.jsonl"))?;
    if log.is_empty() {
        return Err(Error::Data(format!("{}: empty log", data.display())));
    }
    let dim = log[0].slice_vec.len();
    let take = match config.codebook.sample {
        0 => log.len(),
        n => n.min(log.len()),
    };
    let mut vectors = Vec::with_capacity(take * dim);
    for r in &log[..take] {
        vectors.extend_from_slice(&r.slice_vec);
    }
    let cb = &config.codebook;
    let (codebook, report) = Codebook::fit(
        &vectors,
        dim,
        cb.levels,
        cb.clusters as usize,
        cb.max_iters,
        cb.tol,
        cb.seed,
    )?;
    codebook.save(&out.join("codebook.bin"))?;
    fs::write(
        out.join("fit_report.json"),
        serde_json::to_string_pretty(&report).map_err(Error::Json)? + "\n",
    )?;
    info!(
        "fit-codebook: {} levels x {} clusters on {} vectors (dim {}); \
         residual energy {:.4} -> {:.4}",
        cb.levels,
        cb.clusters,
        take,
        dim,
        report.input_mean_square,
        report.mean_squared_residual.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn cmd_encode(config: &RunConfig, data: &Path, codebook: &Path, out: &Path) -> Result<()> {
    let log: Vec<InteractionRecord> = read_log(&data.join("log.jsonl"))?;
    let codebook = Codebook::load(codebook)?;
    if codebook.levels() != config.arch.levels {
        return Err(Error::Config(format!(
            "codebook has {} levels but arch.levels is {}; refit or fix the config",
            codebook.levels(),
            config.arch.levels
        )));
    }
    let encoded = encode_log(&log, &codebook)?;
    write_log(&out.join("encoded.jsonl"), &encoded)?;
    info!("encode: {} records -> {}", encoded.len(), out.join("encoded.jsonl").display());
    Ok(())
}

fn cmd_train(config: &RunConfig, data: &Path, resume: Option<&Path>, out: &Path) -> Result<()> {
    let records: Vec<EncodedRecord> = read_log(data)?;
    let start = match resume {
        Some(path) => {
            let checkpoint = Checkpoint::load(path)?;
            if *checkpoint.params.arch_config() != config.arch {
                return Err(Error::Config(format!(
                    "{}: checkpoint geometry differs from the configured arch; \
                     adjust the config or resume a matching checkpoint",
                    path.display()
                )));
            }
            checkpoint
        }
        None => Checkpoint::fresh(ModelParams::new(config.arch, config.seed)?, config.candidate),
    };
    let result = fluid::ranker::train_stream(&records, start, config.candidate, &config.train)?;
    result.checkpoint.save(&out.join("checkpoint.flck"))?;
    fs::write(out.join("trace.csv"), trace_csv(&result.trace))?;
    let (auc, logloss) = window_summary(&result.final_window);
    fs::write(
        out.join("train_report.json"),
        serde_json::to_string_pretty(&serde_json::json!({
            "records": records.len(),
            "final_step": result.checkpoint.step,
            "window_auc": auc,
            "window_logloss": logloss,
        }))
        .map_err(Error::Json)?
            + "\n",
    )?;
    info!(
        "train: {} records, final step {}, window auc {:.4}, logloss {:.4}",
        records.len(),
        result.checkpoint.step,
        auc,
        logloss
    );
    Ok(())
}

fn window_summary(window: &[fluid::ranker::WindowEntry]) -> (f64, f64) {
    let preds: Vec<f64> = window.iter().map(|e| e.pred).collect();
    let labels: Vec<u8> = window.iter().map(|e| e.label).collect();
    (
        fluid::eval::auc(&preds, &labels).unwrap_or(f64::NAN),
        fluid::eval::logloss(&preds, &labels).unwrap_or(f64::NAN),
    )
}

fn cmd_recipe(
    config: &RunConfig,
    data: &Path,
    checkpoint: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let records: Vec<EncodedRecord> = read_log(data)?;
    let recipe_config = config.recipe.to_recipe_config(config.train);
    let (base, rest) = match checkpoint {
        Some(path) => (Checkpoint::load(path)?, &records[..]),
        None => {
            let base_len = config.recipe.base_records;
            if records.len() < base_len + recipe_config.total_records() {
                return Err(Error::Config(format!(
                    "recipe needs {} base + {} staged records, log has {}",
                    base_len,
                    recipe_config.total_records(),
                    records.len()
                )));
            }
            info!("recipe: training ID-only base on {base_len} records");
            let params = ModelParams::new(config.arch, config.seed)?;
            let result = fluid::ranker::train_stream(
                &records[..base_len],
                Checkpoint::fresh(params, CandidateArch::IdOnly),
                CandidateArch::IdOnly,
                &config.train,
            )?;
            (result.checkpoint, &records[base_len..])
        }
    };
    let result = run_recipe(rest, base, &recipe_config)?;
    for (i, checkpoint) in result.stage_checkpoints.iter().enumerate() {
        checkpoint.save(&out.join(format!("stage{}.flck", i + 1)))?;
    }
    result.checkpoint.save(&out.join("checkpoint.flck"))?;
    let mut trace: Vec<TraceRow> = Vec::new();
    for stage in &result.stages {
        trace.extend_from_slice(&stage.trace);
    }
    fs::write(out.join("trace.csv"), trace_csv(&trace))?;
    fs::write(out.join("recipe_report.json"), recipe_report(&result)? + "\n")?;
    for stage in &result.stages {
        info!(
            "recipe: {} steps {}..{} auc {:.4} logloss {:.4} (moved: {})",
            stage.name,
            stage.start_step,
            stage.end_step,
            stage.window_auc,
            stage.window_logloss,
            stage.component_diffs.join(", ")
        );
    }
    Ok(())
}

fn recipe_report(result: &fluid::recipe::RecipeResult) -> Result<String> {
    let stages: Vec<serde_json::Value> = result
        .stages
        .iter()
        .map(|s: &StageResult| {
            serde_json::json!({
                "name": s.name,
                "start_step": s.start_step,
                "end_step": s.end_step,
                "beta_start": s.beta_start,
                "beta_end": s.beta_end,
                "window_auc": s.window_auc,
                "window_logloss": s.window_logloss,
                "components_changed": s.component_diffs,
            })
        })
        .collect();
    serde_json::to_string_pretty(&serde_json::json!({
        "stages": stages,
        "room_seeded_from_slice": result.room_seeded_from_slice,
        "final_step": result.checkpoint.step,
    }))
    .map_err(Error::Json)
}

fn cmd_ablate(config: &RunConfig, data: &Path, out: &Path) -> Result<()> {
    let records: Vec<EncodedRecord> = read_log(data)?;
    let ablation = config.ablation_config();
    info!(
        "ablate: {} rows x {} seeds on {}+{} records",
        fluid::recipe::ABLATION_ROWS.len(),
        ablation.seeds.len(),
        ablation.base_records,
        ablation.branch_records
    );
    let report = run_ablation(&records, &ablation)?;
    fs::write(out.join("ablation.csv"), report.to_csv())?;
    fs::write(out.join("ablation.txt"), report.render())?;
    fs::write(
        out.join("ablation.json"),
        serde_json::to_string_pretty(&report).map_err(Error::Json)? + "\n",
    )?;
    if verbosity() >= 1 {
        eprint!("{}", report.render());
    }
    Ok(())
}

fn cmd_diagnose(
    config: &RunConfig,
    data: &Path,
    encoded: &Path,
    codebook: &Path,
    checkpoint: &Path,
    out: &Path,
) -> Result<()> {
    let checkpoint = Checkpoint::load(checkpoint)?;
    let records: Vec<EncodedRecord> = read_log(encoded)?;
    if records.is_empty() {
        return Err(Error::Data(format!("{}: empty encoded log", encoded.display())));
    }
    let buckets = norm_vs_age(
        &checkpoint.params,
        &records,
        config.eval.bucket_ticks,
        config.eval.bucket_stat,
    )?;
    fs::write(out.join("norm_age.csv"), norm_age_csv(&buckets))?;
    info!("diagnose: norm-vs-age over {} buckets", buckets.len());

    let gated = matches!(
        checkpoint.arch,
        CandidateArch::Fusion(f) if matches!(
            f.variant,
            FusionVariant::EarlyGateLearnable | FusionVariant::EarlyGateFeature
        )
    );
    if gated {
        let report = gate_inversion(&checkpoint.params, &checkpoint.arch, &records)?;
        fs::write(out.join("gate_inversion.csv"), report.to_csv())?;
        info!(
            "diagnose: gate inversion decile correlation {:?}",
            report.decile_spearman()
        );
    } else {
        info!("diagnose: checkpoint architecture has no gate; skipping gate_inversion.csv");
    }

    let world = World::load(&data.join("world.json"))?;
    let codebook = Codebook::load(codebook)?;
    let rows = vote_recovery(
        &codebook,
        &world.tree,
        world.config.sigma_drift,
        world.config.sigma_obs,
        &config.eval.vote_slice_counts,
        &config.eval.vote_seeds,
        config.eval.vote_rooms,
    )?;
    let mut csv = String::from("slice_count,seed,rate,median_rate\n");
    for row in &rows {
        for (seed, rate) in config.eval.vote_seeds.iter().zip(&row.rate_per_seed) {
            csv.push_str(&format!(
                "{},{},{:.6},{:.6}\n",
                row.slice_count, seed, rate, row.median_rate
            ));
        }
    }
    fs::write(out.join("vote_recovery.csv"), csv)?;
    info!("diagnose: vote recovery at {} slice counts", rows.len());
    Ok(())
}
