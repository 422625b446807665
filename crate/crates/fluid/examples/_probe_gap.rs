//! Scratch probe: 3-arm (late vs gates) median final-window AUC under a
//! configurable backbone. Not a curated example; delete before release.

use fluid::eval;
use fluid::ranker::{
    train_stream, ArchConfig, BetaSchedule, CandidateArch, Checkpoint, FusionConfig,
    FusionVariant, ModelParams, TrainConfig,
};
use fluid::synthgen::{read_log, EncodedRecord};

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    v[v.len() / 2]
}

fn main() -> fluid::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let path = std::path::PathBuf::from(&args[1]);
    let base_n: usize = args[2].parse().expect("base");
    let branch_n: usize = args[3].parse().expect("branch");
    let hidden: usize = args[4].parse().expect("hidden");
    let token: usize = args[5].parse().expect("token");
    let lr: f64 = args[6].parse().expect("lr");
    let n_codes: u32 = args.get(7).map(|s| s.parse().expect("codebook")).unwrap_or(16);
    let init_scale: f32 = args.get(8).map(|s| s.parse().expect("init")).unwrap_or(0.1);
    let item_rows: usize = args.get(9).map(|s| s.parse().expect("rows")).unwrap_or(16384);
    let records: Vec<EncodedRecord> = read_log(&path)?;

    let arch = ArchConfig {
        token_dim: token,
        hidden_dim: hidden,
        codebook_size: n_codes,
        init_scale,
        item_rows,
        ..ArchConfig::default()
    };
    let train = TrainConfig {
        beta: BetaSchedule::Constant(1.0),
        freeze_id: false,
        learning_rate: lr,
        ..TrainConfig::default()
    };

    let variants: Vec<(&str, CandidateArch)> = vec![
        ("id_baseline", CandidateArch::IdOnly),
        (
            "late_independent",
            CandidateArch::Fusion(FusionConfig::new(FusionVariant::LateIndependent)),
        ),
        (
            "early_replace",
            CandidateArch::Fusion(FusionConfig::new(FusionVariant::EarlyReplace)),
        ),
        (
            "early_gate_learnable",
            CandidateArch::Fusion(FusionConfig::new(FusionVariant::EarlyGateLearnable)),
        ),
        (
            "early_gate_feature",
            CandidateArch::Fusion(FusionConfig::new(FusionVariant::EarlyGateFeature)),
        ),
        ("early_concat", CandidateArch::Fusion(FusionConfig::new(FusionVariant::EarlyConcat))),
    ];

    let mut per_arm: Vec<Vec<f64>> = vec![Vec::new(); variants.len()];
    for seed in [101u64, 102, 103, 104, 105] {
        let base = train_stream(
            &records[..base_n],
            Checkpoint::fresh(ModelParams::new(arch, seed)?, CandidateArch::IdOnly),
            CandidateArch::IdOnly,
            &train,
        )?;
        for (i, (name, cand)) in variants.iter().enumerate() {
            let ck = Checkpoint { arch: *cand, ..base.checkpoint.clone() };
            let r = train_stream(&records[base_n..base_n + branch_n], ck, *cand, &train)?;
            let preds: Vec<f64> = r.final_window.iter().map(|w| w.pred).collect();
            let labels: Vec<u8> = r.final_window.iter().map(|w| w.label).collect();
            per_arm[i].push(eval::auc(&preds, &labels).unwrap_or(f64::NAN));
            if seed == 101 && name.starts_with("early_gate") {
                let tail = &records[base_n + branch_n - 50_000..base_n + branch_n];
                if let Ok(rep) = eval::gate_inversion(&r.checkpoint.params, cand, tail) {
                    let curve: Vec<String> = rep
                        .deciles
                        .iter()
                        .map(|d| format!("{:.3}@{:.2}", d.mean_alpha, d.mean_id_norm))
                        .collect();
                    eprintln!(
                        "  [{name}] alpha by ‖g‖ decile: {}  (decile spearman {:?})",
                        curve.join(" "),
                        rep.decile_spearman()
                    );
                }
            }
        }
    }

    println!("hidden={hidden} token={token} lr={lr}");
    let late = median(per_arm[1].clone());
    for (i, (name, _)) in variants.iter().enumerate() {
        let m = median(per_arm[i].clone());
        let mark = if i != 1 && late > m { "  late wins" } else if i != 1 { "  LATE LOSES" } else { "" };
        println!(
            "  {name:<22} median {m:.4}  seeds {}{}",
            per_arm[i].iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(" "),
            mark
        );
    }
    Ok(())
}
