//! Metrics and diagnostic curves: AUC, logloss, segment analysis,
//! vote-recovery, and (once a checkpoint exists) norm-vs-age and
//! gate-inversion curves.
//!
//! The AUC here is the rank statistic — the probability that a uniformly
//! random positive outranks a uniformly random negative, ties counting
//! one half. Both the rank form and the O(n²) pairwise reference compute
//! the same half-integer numerator and divide by the same denominator, so
//! they agree bitwise, not just approximately; tests exploit that.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::lucid::{majority_vote, SliceHistory};
use crate::ranker::{ArchConfig, CandidateArch, FusionVariant, ModelParams, Pass, RecordInputs};
use crate::rqkmeans::Codebook;
use crate::synthgen::{EncodedRecord, ItemSpec, LifetimeClass, SemanticTree};
use crate::{Error, Result};

/// Record segment for cold/warm and lifetime-class breakdowns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Segment {
    All,
    /// Impressions whose item had fewer prior impressions than the cold
    /// threshold.
    ColdItems,
    WarmItems,
    EphemeralLive,
    PersistentVideo,
}

/// A segment plus the exposure threshold that splits cold from warm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentSpec {
    pub segment: Segment,
    /// Exposure count below which an impression counts as cold.
    pub cold_threshold: u64,
}

impl SegmentSpec {
    /// Whether an impression with `exposure` prior views of an item of
    /// `class` falls in this segment. Cold and Warm partition records for
    /// a fixed threshold.
    pub fn matches(&self, exposure: u64, class: LifetimeClass) -> bool {
        match self.segment {
            Segment::All => true,
            Segment::ColdItems => exposure < self.cold_threshold,
            Segment::WarmItems => exposure >= self.cold_threshold,
            Segment::EphemeralLive => class == LifetimeClass::EphemeralLive,
            Segment::PersistentVideo => class == LifetimeClass::PersistentVideo,
        }
    }
}

fn check_binary_inputs(predictions: &[f64], labels: &[u8]) -> Result<(u64, u64)> {
    if predictions.len() != labels.len() {
        return Err(Error::Config(format!(
            "{} predictions vs {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let positives = labels.iter().filter(|&&y| y == 1).count() as u64;
    let negatives = labels.iter().filter(|&&y| y == 0).count() as u64;
    if positives + negatives != labels.len() as u64 {
        return Err(Error::Data("labels must be 0 or 1".into()));
    }
    if positives == 0 || negatives == 0 {
        return Err(Error::Data(
            "AUC undefined: need at least one positive and one negative".into(),
        ));
    }
    Ok((positives, negatives))
}

/// Area under the ROC curve by rank statistics.
///
/// Sorts once, assigns tied predictions the average rank of their tied
/// block, and evaluates `(Σ positive ranks − n₊(n₊+1)/2) / (n₊·n₋)`. All
/// intermediate values are half-integers represented exactly in `f64`, so
/// the result is bitwise equal to [`auc_pairwise`].
pub fn auc(predictions: &[f64], labels: &[u8]) -> Result<f64> {
    let (positives, negatives) = check_binary_inputs(predictions, labels)?;
    if predictions.iter().any(|p| p.is_nan()) {
        return Err(Error::Numeric("NaN prediction in AUC input".into()));
    }
    let mut order: Vec<usize> = (0..predictions.len()).collect();
    order.sort_by(|&a, &b| {
        predictions[a].partial_cmp(&predictions[b]).expect("NaN was rejected above")
    });
    // Sum of 1-based ranks of the positives, averaging ranks across ties.
    let mut rank_sum = 0.0f64;
    let mut i = 0usize;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && predictions[order[j + 1]] == predictions[order[i]] {
            j += 1;
        }
        // Ranks i+1 ..= j+1 share this prediction; their average is a
        // half-integer, exact in f64.
        let avg_rank = (i + 1 + j + 1) as f64 / 2.0;
        let tied_positives = order[i..=j].iter().filter(|&&k| labels[k] == 1).count();
        rank_sum += avg_rank * tied_positives as f64;
        i = j + 1;
    }
    let numerator = rank_sum - (positives * (positives + 1)) as f64 / 2.0;
    Ok(numerator / (positives as f64 * negatives as f64))
}

/// O(n²) pairwise AUC: wins count 1, ties count ½. The oracle reference
/// for [`auc`]; use only on small inputs.
pub fn auc_pairwise(predictions: &[f64], labels: &[u8]) -> Result<f64> {
    let (positives, negatives) = check_binary_inputs(predictions, labels)?;
    let mut twice_wins: u64 = 0; // accumulate in half-units to stay integral
    for (i, &yi) in labels.iter().enumerate() {
        if yi != 1 {
            continue;
        }
        for (j, &yj) in labels.iter().enumerate() {
            if yj != 0 {
                continue;
            }
            if predictions[i] > predictions[j] {
                twice_wins += 2;
            } else if predictions[i] == predictions[j] {
                twice_wins += 1;
            }
        }
    }
    Ok((twice_wins as f64 / 2.0) / (positives as f64 * negatives as f64))
}

/// Mean binary cross-entropy, predictions clipped to `[1e-7, 1−1e-7]`.
pub fn logloss(predictions: &[f64], labels: &[u8]) -> Result<f64> {
    if predictions.len() != labels.len() || predictions.is_empty() {
        return Err(Error::Config("logloss needs equal-length non-empty inputs".into()));
    }
    let mut total = 0.0f64;
    for (&p, &y) in predictions.iter().zip(labels) {
        let p = p.clamp(1e-7, 1.0 - 1e-7);
        total += match y {
            1 => -p.ln(),
            0 => -(1.0 - p).ln(),
            _ => return Err(Error::Data("labels must be 0 or 1".into())),
        };
    }
    Ok(total / predictions.len() as f64)
}

/// Median of a sample (average of the two middle values for even sizes).
pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of empty sample");
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("median of NaN"));
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    }
}

/// Ranks with ties averaged (the transform behind Spearman correlation).
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).expect("rank of NaN"));
    let mut ranks = vec![0.0f64; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + 1 + j + 1) as f64 / 2.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation: Pearson correlation of the rank transforms.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::Config("spearman needs two equal-length samples of ≥ 2".into()));
    }
    let rx = average_ranks(xs);
    let ry = average_ranks(ys);
    let n = xs.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        cov += (a - mx) * (b - my);
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
    }
    if vx == 0.0 || vy == 0.0 {
        return Err(Error::Numeric("spearman undefined: a sample is constant".into()));
    }
    Ok(cov / (vx * vy).sqrt())
}

/// Recovery rate of room-level voting at one slice count.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VoteRecoveryRow {
    pub slice_count: usize,
    /// Fraction of rooms whose vote equals the encoding of their noiseless
    /// content mean, one entry per seed.
    pub rate_per_seed: Vec<f64>,
    pub median_rate: f64,
}

/// Measures how reliably cumulative majority voting recovers the code of
/// an item's noiseless content mean as slices accumulate.
///
/// For each seed, `rooms` random paths are simulated; each room emits
/// slices under the given noise, every slice is encoded, and at each
/// requested slice count the room's majority vote is compared against
/// `encode(path sum)`. Rows report the per-seed recovery fractions.
pub fn vote_recovery(
    codebook: &Codebook,
    tree: &SemanticTree,
    sigma_drift: f32,
    sigma_obs: f32,
    slice_counts: &[usize],
    seeds: &[u64],
    rooms: usize,
) -> Result<Vec<VoteRecoveryRow>> {
    if slice_counts.is_empty() || seeds.is_empty() || rooms == 0 {
        return Err(Error::Config("vote_recovery needs slice counts, seeds, and rooms".into()));
    }
    let mut counts = slice_counts.to_vec();
    counts.sort_unstable();
    counts.dedup();
    let max_count = *counts.last().expect("non-empty");
    let mut hits = vec![vec![0usize; seeds.len()]; counts.len()];
    for (s, &seed) in seeds.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for room in 0..rooms {
            let path: Vec<u32> =
                (0..tree.depth).map(|_| rng.random_range(0..tree.branching)).collect();
            // A synthetic room: slice noise keys off (tree seed, item_id,
            // slice_index) exactly as generated logs do.
            let item = ItemSpec {
                item_id: crate::lucid::splitmix64(seed ^ ((room as u64) << 20)),
                true_path: path.clone(),
                offset: Vec::new(),
                lifetime_class: LifetimeClass::EphemeralLive,
                birth_time: 0,
                lifetime_ticks: max_count as u64,
            };
            let clean: Vec<f32> = tree.path_sum(&path).into_iter().map(|v| v as f32).collect();
            let target = codebook.encode(&clean)?;
            let mut history = SliceHistory::new(codebook.levels());
            let mut next_check = 0usize;
            for slice_index in 0..max_count {
                let z = tree.slice_embedding(&item, slice_index as u64, sigma_drift, sigma_obs);
                history.push(codebook.encode(&z)?)?;
                while next_check < counts.len() && counts[next_check] == slice_index + 1 {
                    let vote = majority_vote(&history)?;
                    if vote.codewords == target.codewords {
                        hits[next_check][s] += 1;
                    }
                    next_check += 1;
                }
            }
        }
    }
    Ok(counts
        .into_iter()
        .enumerate()
        .map(|(i, slice_count)| {
            let rate_per_seed: Vec<f64> =
                hits[i].iter().map(|&h| h as f64 / rooms as f64).collect();
            let median_rate = median(&rate_per_seed);
            VoteRecoveryRow { slice_count, rate_per_seed, median_rate }
        })
        .collect())
}

/// Aggregation statistic for bucketed curves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BucketStat {
    Mean,
    Median,
}

/// One bucket of the norm-vs-age curve: items whose observed training span
/// falls in `[age_lo, age_hi)` ticks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormAgeBucket {
    pub age_lo: u64,
    pub age_hi: u64,
    pub items: usize,
    /// Mean (or median) L2 norm of the items' ID-embedding rows.
    pub norm: f64,
}

/// The L2 norm a freshly initialized embedding row has in expectation:
/// entries are i.i.d. uniform `±init_scale`, so `E‖row‖² = d·init_scale²/3`.
pub fn expected_init_norm(arch: &ArchConfig) -> f64 {
    arch.init_scale as f64 * (arch.token_dim as f64 / 3.0).sqrt()
}

/// The staleness curve: item-ID embedding norm as a function of how long
/// the item has been training.
///
/// Each item's age is the tick span between its first and last impression
/// in `records` — the window over which its row received updates. Ages are
/// bucketed with width `bucket_ticks`; each bucket reports the mean (or
/// median) row norm. Items that hash to the same row each contribute that
/// shared row's norm. On an untrained model the curve is flat near
/// [`expected_init_norm`]; training lifts the long-lived buckets and
/// leaves the youngest near initialization — the freshness handicap the
/// ID-free candidate side removes.
pub fn norm_vs_age(
    params: &ModelParams,
    records: &[EncodedRecord],
    bucket_ticks: u64,
    stat: BucketStat,
) -> Result<Vec<NormAgeBucket>> {
    if records.is_empty() {
        return Err(Error::Config("norm_vs_age needs a non-empty log".into()));
    }
    if bucket_ticks == 0 {
        return Err(Error::Config("bucket_ticks must be positive".into()));
    }
    let mut spans: BTreeMap<u64, (u64, u64)> = BTreeMap::new();
    for r in records {
        let e = spans.entry(r.item_id).or_insert((r.tick, r.tick));
        e.0 = e.0.min(r.tick);
        e.1 = e.1.max(r.tick);
    }
    let mut buckets: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
    for (&item_id, &(first, last)) in &spans {
        let row = params.item_row(params.item_row_index(item_id));
        let norm = row.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt();
        buckets.entry((last - first) / bucket_ticks).or_default().push(norm);
    }
    Ok(buckets
        .into_iter()
        .map(|(b, norms)| NormAgeBucket {
            age_lo: b * bucket_ticks,
            age_hi: (b + 1) * bucket_ticks,
            items: norms.len(),
            norm: match stat {
                BucketStat::Mean => norms.iter().sum::<f64>() / norms.len() as f64,
                BucketStat::Median => median(&norms),
            },
        })
        .collect())
}

/// CSV for a norm-vs-age curve.
pub fn norm_age_csv(buckets: &[NormAgeBucket]) -> String {
    let mut out = String::from("age_lo,age_hi,items,norm\n");
    for b in buckets {
        out.push_str(&format!("{},{},{},{:.6}\n", b.age_lo, b.age_hi, b.items, b.norm));
    }
    out
}

/// One decile of the gate-inversion curve: records whose item-ID embedding
/// norm falls in the decile's rank range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateDecileRow {
    /// 0 = smallest norms, 9 = largest.
    pub decile: usize,
    pub records: usize,
    pub mean_id_norm: f64,
    pub mean_alpha: f64,
}

/// The gate-inversion diagnostic: how the learned mix weight α varies with
/// the item-ID embedding norm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateInversionReport {
    pub deciles: Vec<GateDecileRow>,
    /// Spearman correlation between per-record ID norm and α; `None` when
    /// either side is constant (e.g. a freshly initialized gate fixes
    /// α = ½ everywhere).
    pub spearman_norm_alpha: Option<f64>,
}

impl GateInversionReport {
    /// Spearman correlation of (mean norm, mean α) across the deciles —
    /// the curve-level direction statistic. `None` when a side is constant.
    pub fn decile_spearman(&self) -> Option<f64> {
        let norms: Vec<f64> = self.deciles.iter().map(|d| d.mean_id_norm).collect();
        let alphas: Vec<f64> = self.deciles.iter().map(|d| d.mean_alpha).collect();
        spearman(&norms, &alphas).ok()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("decile,records,mean_id_norm,mean_alpha\n");
        for d in &self.deciles {
            out.push_str(&format!(
                "{},{},{:.6},{:.6}\n",
                d.decile, d.records, d.mean_id_norm, d.mean_alpha
            ));
        }
        out
    }
}

/// Measures gate inversion for a gated fusion variant: runs a forward pass
/// per record, pairs the item-ID embedding norm with the gate's α, and
/// reports mean α per norm decile plus the rank correlation over all
/// records.
///
/// A positive correlation means the gate up-weights the ID path exactly
/// where the ID embedding is well-trained — and therefore starves fresh
/// items, which sit in the low-norm deciles. Architectures without a gate
/// are rejected.
pub fn gate_inversion(
    params: &ModelParams,
    arch: &CandidateArch,
    records: &[EncodedRecord],
) -> Result<GateInversionReport> {
    let gated = matches!(
        arch,
        CandidateArch::Fusion(f) if matches!(
            f.variant,
            FusionVariant::EarlyGateLearnable | FusionVariant::EarlyGateFeature
        )
    );
    if !gated {
        return Err(Error::Config(
            "gate_inversion needs a gated fusion variant (the architecture has no α)".into(),
        ));
    }
    if records.len() < 10 {
        return Err(Error::Config("gate_inversion needs at least 10 records".into()));
    }
    let mut pass = Pass::new(params);
    let mut norms = Vec::with_capacity(records.len());
    let mut alphas = Vec::with_capacity(records.len());
    for r in records {
        params.forward_into(arch, &RecordInputs::from_encoded(r), 1.0, &mut pass)?;
        let g = pass.item_embedding();
        norms.push(g.iter().map(|&v| v * v).sum::<f64>().sqrt());
        alphas.push(pass.alpha);
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by(|&a, &b| norms[a].partial_cmp(&norms[b]).expect("finite norms"));
    let n = order.len();
    let deciles = (0..10)
        .map(|d| {
            let slice = &order[d * n / 10..(d + 1) * n / 10];
            let count = slice.len().max(1) as f64;
            GateDecileRow {
                decile: d,
                records: slice.len(),
                mean_id_norm: slice.iter().map(|&i| norms[i]).sum::<f64>() / count,
                mean_alpha: slice.iter().map(|&i| alphas[i]).sum::<f64>() / count,
            }
        })
        .collect();
    Ok(GateInversionReport {
        deciles,
        spearman_norm_alpha: spearman(&norms, &alphas).ok(),
    })
}
