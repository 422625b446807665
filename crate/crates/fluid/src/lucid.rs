//! LUCID code manipulation: prefix n-gram indexing, room-level majority
//! voting, and embedding table sets.
//!
//! A LUCID code ("Live Universal Content IDentifier") is an `L`-tuple of
//! codewords `[c_1, …, c_L]`, each in `[0, N)`, produced by residual
//! quantization of a content embedding (see [`crate::rqkmeans`]). Codes
//! exist at two granularities: *slice* codes describe one content slice,
//! and *room* codes summarize a whole broadcast by per-level majority
//! vote over the slice codes seen so far.
//!
//! Because codewords are hierarchical, the raw level-`l` codeword is
//! ambiguous: codeword 2 under parent 0 and codeword 2 under parent 3 name
//! different content. The *prefix n-gram* composite index resolves this by
//! folding the whole prefix into one integer,
//!
//! ```text
//! c̄_l = Σ_{k=1..l} c_k · N^(l−k)   (equivalently c̄_l = c̄_{l−1}·N + c_l)
//! ```
//!
//! which uniquely identifies the path from the root. [`EmbeddingTableSet`]
//! uses these indices (scheme [`TableScheme::PrefixNgram`]) or the raw
//! codewords (scheme [`TableScheme::LevelWise`], the baseline) to select
//! one row per level and concatenates the rows into a single embedding.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Granularity of a LUCID code: one content slice, or a whole room.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Granularity {
    /// Code of a single content slice.
    Slice,
    /// Per-level majority vote over a room's cumulative slice codes.
    Room,
}

/// An `L`-level codeword tuple, each entry in `[0, N)`.
///
/// `N` is not stored here; operations that need it take it as a parameter
/// and validate the entries against it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LucidCode {
    /// Codewords `c_1..c_L`, outermost (coarsest) level first.
    pub codewords: Vec<u32>,
    /// Whether this tuple describes a slice or a room.
    pub granularity: Granularity,
}

impl LucidCode {
    /// A slice-granularity code from raw codewords.
    pub fn slice(codewords: Vec<u32>) -> Self {
        LucidCode { codewords, granularity: Granularity::Slice }
    }

    /// A room-granularity code from raw codewords.
    pub fn room(codewords: Vec<u32>) -> Self {
        LucidCode { codewords, granularity: Granularity::Room }
    }

    /// Number of levels in the tuple.
    pub fn levels(&self) -> usize {
        self.codewords.len()
    }

    /// Checks every codeword lies in `[0, n)`.
    pub fn validate(&self, n: u32) -> Result<()> {
        for (l, &c) in self.codewords.iter().enumerate() {
            if c >= n {
                return Err(Error::Config(format!(
                    "codeword {c} at level {} out of range for N={n}",
                    l + 1
                )));
            }
        }
        Ok(())
    }
}

/// Fixed 64-bit mixing function (the splitmix64 finalizer).
///
/// Used wherever a deterministic, seedless hash is needed: capped
/// embedding-table rows and ID-to-row bucketing. Not cryptographic.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Composite prefix indices `(c̄_1, …, c̄_L)` for a code under base `N`.
///
/// `c̄_l = Σ_{k=1..l} c_k·N^(l−k)`, computed by the recurrence
/// `c̄_l = c̄_{l−1}·N + c_l` in overflow-checked integer arithmetic; an
/// index that would exceed the 64-bit range is rejected rather than
/// wrapped. `c̄_l` uniquely identifies the length-`l` prefix, so two codes
/// that share a codeword but not its ancestry map to different indices.
pub fn prefix_indices(code: &LucidCode, n: u32) -> Result<Vec<u64>> {
    if n == 0 {
        return Err(Error::Config("codebook size N must be positive".into()));
    }
    let mut indices = Vec::with_capacity(code.codewords.len());
    let mut acc: u64 = 0;
    for (l, &c) in code.codewords.iter().enumerate() {
        if c >= n {
            return Err(Error::Config(format!(
                "codeword {c} at level {} out of range for N={n}",
                l + 1
            )));
        }
        acc = acc
            .checked_mul(u64::from(n))
            .and_then(|v| v.checked_add(u64::from(c)))
            .ok_or_else(|| {
                Error::Config(format!(
                    "prefix index overflows u64 at level {} with N={n}",
                    l + 1
                ))
            })?;
        indices.push(acc);
    }
    Ok(indices)
}

/// Ordered slice codes of one live-room session, with per-level codeword
/// frequency counters maintained incrementally.
///
/// Append-only within a session; the counters always equal a recount of
/// the stored list, so [`majority_vote`] over the incremental counters
/// matches a from-scratch recount at every step. Serializes as JSON
/// (counters plus slice list) for session checkpointing.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SliceHistory {
    levels: usize,
    slices: Vec<LucidCode>,
    counts: Vec<BTreeMap<u32, u64>>,
}

impl SliceHistory {
    /// Empty history for codes with `levels` levels.
    pub fn new(levels: usize) -> Self {
        SliceHistory { levels, slices: Vec::new(), counts: vec![BTreeMap::new(); levels] }
    }

    /// Appends one slice code, updating the per-level counters.
    ///
    /// Rejects room-granularity codes and level-count mismatches.
    pub fn push(&mut self, code: LucidCode) -> Result<()> {
        if code.granularity != Granularity::Slice {
            return Err(Error::Config(
                "only slice-granularity codes can be appended to a slice history".into(),
            ));
        }
        if code.levels() != self.levels {
            return Err(Error::Config(format!(
                "slice code has {} levels, history expects {}",
                code.levels(),
                self.levels
            )));
        }
        for (l, &c) in code.codewords.iter().enumerate() {
            *self.counts[l].entry(c).or_insert(0) += 1;
        }
        self.slices.push(code);
        Ok(())
    }

    /// Number of slices observed so far.
    pub fn len(&self) -> usize {
        self.slices.len()
    }

    /// True when no slices have been observed.
    pub fn is_empty(&self) -> bool {
        self.slices.is_empty()
    }

    /// The ordered slice codes observed so far.
    pub fn slices(&self) -> &[LucidCode] {
        &self.slices
    }
}

/// Room code by per-level majority vote over a session's cumulative slices.
///
/// For each level independently, the most frequent codeword among all
/// slices seen so far wins; ties break to the smallest codeword value, so
/// the result is deterministic and independent of arrival order. Voting is
/// cumulative over the whole session, not windowed.
pub fn majority_vote(history: &SliceHistory) -> Result<LucidCode> {
    if history.is_empty() {
        return Err(Error::Config("majority vote requires a non-empty slice history".into()));
    }
    let mut codewords = Vec::with_capacity(history.levels);
    for level_counts in &history.counts {
        let mut best_code = 0u32;
        let mut best_count = 0u64;
        // BTreeMap iterates codewords in ascending order, so keeping the
        // first strict maximum implements the smallest-codeword tie rule.
        for (&code, &count) in level_counts {
            if count > best_count {
                best_code = code;
                best_count = count;
            }
        }
        codewords.push(best_code);
    }
    Ok(LucidCode::room(codewords))
}

/// Row-indexing scheme of an [`EmbeddingTableSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TableScheme {
    /// Level-`l` rows are addressed by the composite prefix index `c̄_l`,
    /// so identical codewords under different parents read different rows.
    PrefixNgram,
    /// Baseline: level-`l` rows are addressed by the raw codeword `c_l`,
    /// ignoring ancestry.
    LevelWise,
}

/// Per-level embedding tables `E_1..E_L` with a code-to-row policy.
///
/// Under [`TableScheme::PrefixNgram`] the level-`l` table has
/// `min(N^l, max_rows)` rows; when the cap applies, the prefix index is
/// mapped to a row by [`splitmix64`] modulo the row count (pure and
/// seedless, collisions accepted). Under [`TableScheme::LevelWise`] every
/// level has exactly `N` rows. A lookup concatenates one row per level
/// into a vector of dimension `L·d` where `d` is the per-level dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingTableSet {
    scheme: TableScheme,
    levels: usize,
    codebook_size: u32,
    per_level_dim: usize,
    max_rows: usize,
    /// Per level: row count actually allocated.
    rows: Vec<usize>,
    /// Per level: whether the row cap (and therefore hashing) applies.
    hashed: Vec<bool>,
    /// Per level: `rows[l] × per_level_dim` matrix, row-major.
    tables: Vec<Vec<f32>>,
}

/// Row count and hashing flag for one level under a scheme.
fn level_geometry(
    scheme: TableScheme,
    level: usize, // 1-based
    n: u32,
    max_rows: usize,
) -> (usize, bool) {
    match scheme {
        TableScheme::LevelWise => (n as usize, false),
        TableScheme::PrefixNgram => {
            let full = (n as u128).pow(level as u32);
            if full > max_rows as u128 {
                (max_rows, true)
            } else {
                (full as usize, false)
            }
        }
    }
}

impl EmbeddingTableSet {
    /// Builds a table set with rows initialized i.i.d. uniform in
    /// `[−init_scale, init_scale]` from a seeded generator. The same
    /// arguments and seed produce bit-identical tables.
    pub fn make_tables(
        scheme: TableScheme,
        levels: usize,
        codebook_size: u32,
        per_level_dim: usize,
        max_rows: usize,
        init_scale: f32,
        seed: u64,
    ) -> Result<Self> {
        if levels == 0 || codebook_size == 0 || per_level_dim == 0 || max_rows == 0 {
            return Err(Error::Config(
                "embedding table dimensions must all be positive".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = Vec::with_capacity(levels);
        let mut hashed = Vec::with_capacity(levels);
        let mut tables = Vec::with_capacity(levels);
        for level in 1..=levels {
            let (n_rows, capped) = level_geometry(scheme, level, codebook_size, max_rows);
            let mut table = vec![0.0f32; n_rows * per_level_dim];
            for w in table.iter_mut() {
                *w = (rng.random::<f32>() * 2.0 - 1.0) * init_scale;
            }
            rows.push(n_rows);
            hashed.push(capped);
            tables.push(table);
        }
        Ok(EmbeddingTableSet {
            scheme,
            levels,
            codebook_size,
            per_level_dim,
            max_rows,
            rows,
            hashed,
            tables,
        })
    }

    /// Reassembles a table set from externally stored tables (checkpoint
    /// load), revalidating the geometry against the declared config.
    pub fn from_parts(
        scheme: TableScheme,
        levels: usize,
        codebook_size: u32,
        per_level_dim: usize,
        max_rows: usize,
        tables: Vec<Vec<f32>>,
    ) -> Result<Self> {
        if tables.len() != levels {
            return Err(Error::Data(format!(
                "table set has {} levels, expected {levels}",
                tables.len()
            )));
        }
        let mut rows = Vec::with_capacity(levels);
        let mut hashed = Vec::with_capacity(levels);
        for (i, table) in tables.iter().enumerate() {
            let (n_rows, capped) = level_geometry(scheme, i + 1, codebook_size, max_rows);
            if table.len() != n_rows * per_level_dim {
                return Err(Error::Data(format!(
                    "level-{} table has {} entries, expected {}",
                    i + 1,
                    table.len(),
                    n_rows * per_level_dim
                )));
            }
            rows.push(n_rows);
            hashed.push(capped);
        }
        Ok(EmbeddingTableSet {
            scheme,
            levels,
            codebook_size,
            per_level_dim,
            max_rows,
            rows,
            hashed,
            tables,
        })
    }

    pub fn scheme(&self) -> TableScheme {
        self.scheme
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn codebook_size(&self) -> u32 {
        self.codebook_size
    }

    pub fn per_level_dim(&self) -> usize {
        self.per_level_dim
    }

    pub fn max_rows(&self) -> usize {
        self.max_rows
    }

    /// Dimension of a lookup result: `levels · per_level_dim`.
    pub fn output_dim(&self) -> usize {
        self.levels * self.per_level_dim
    }

    /// Rows allocated for a level (0-based).
    pub fn level_rows(&self, level: usize) -> usize {
        self.rows[level]
    }

    /// Whether the row cap (modulo hashing) applies at a level (0-based).
    pub fn level_hashed(&self, level: usize) -> bool {
        self.hashed[level]
    }

    /// Raw storage of one level's table, row-major (0-based level).
    pub fn table(&self, level: usize) -> &[f32] {
        &self.tables[level]
    }

    /// One row of one level's table (0-based level).
    pub fn row(&self, level: usize, row: usize) -> &[f32] {
        let d = self.per_level_dim;
        &self.tables[level][row * d..(row + 1) * d]
    }

    /// Mutable row access for parameter updates (0-based level).
    pub fn row_mut(&mut self, level: usize, row: usize) -> &mut [f32] {
        let d = self.per_level_dim;
        &mut self.tables[level][row * d..(row + 1) * d]
    }

    /// Mutable raw storage of one level's table (0-based level).
    pub fn table_mut(&mut self, level: usize) -> &mut [f32] {
        &mut self.tables[level]
    }

    /// Resolves a code to one row index per level.
    ///
    /// Prefix scheme: row = `c̄_l`, or `splitmix64(c̄_l) mod rows` when the
    /// level is capped. Level-wise scheme: row = `c_l`.
    pub fn rows_for(&self, code: &LucidCode) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(self.levels);
        self.rows_for_codewords(&code.codewords, &mut out)?;
        Ok(out)
    }

    /// Allocation-free form of [`rows_for`] over raw codewords, for callers
    /// resolving codes in a hot loop. Clears and fills `out`.
    pub fn rows_for_codewords(&self, codewords: &[u32], out: &mut Vec<usize>) -> Result<()> {
        out.clear();
        if codewords.len() != self.levels {
            return Err(Error::Config(format!(
                "code has {} levels, table set expects {}",
                codewords.len(),
                self.levels
            )));
        }
        let n = self.codebook_size;
        match self.scheme {
            TableScheme::LevelWise => {
                for (l, &c) in codewords.iter().enumerate() {
                    if c >= n {
                        return Err(Error::Config(format!(
                            "codeword {c} at level {} out of range for N={n}",
                            l + 1
                        )));
                    }
                    out.push(c as usize);
                }
            }
            TableScheme::PrefixNgram => {
                // Same checked recurrence as [`prefix_indices`], inlined to
                // avoid the intermediate vector.
                let mut acc: u64 = 0;
                for (l, &c) in codewords.iter().enumerate() {
                    if c >= n {
                        return Err(Error::Config(format!(
                            "codeword {c} at level {} out of range for N={n}",
                            l + 1
                        )));
                    }
                    acc = acc
                        .checked_mul(u64::from(n))
                        .and_then(|v| v.checked_add(u64::from(c)))
                        .ok_or_else(|| {
                            Error::Config(format!(
                                "prefix index overflows u64 at level {} with N={n}",
                                l + 1
                            ))
                        })?;
                    out.push(if self.hashed[l] {
                        (splitmix64(acc) % self.rows[l] as u64) as usize
                    } else {
                        acc as usize
                    });
                }
            }
        }
        Ok(())
    }

    /// Embedding of a code: concatenation of the selected row per level.
    pub fn lookup(&self, code: &LucidCode) -> Result<Vec<f32>> {
        let rows = self.rows_for(code)?;
        let mut out = Vec::with_capacity(self.output_dim());
        for (level, row) in rows.into_iter().enumerate() {
            out.extend_from_slice(self.row(level, row));
        }
        Ok(out)
    }

    /// Consumes the set, returning the per-level raw tables (checkpoint save).
    pub fn into_tables(self) -> Vec<Vec<f32>> {
        self.tables
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    fn slice(codewords: &[u32]) -> LucidCode {
        LucidCode::slice(codewords.to_vec())
    }

    #[test]
    fn prefix_worked_example_base4() {
        // With N=4: [0,2] folds to 0·4+2 = 2, while [3,2] folds to 3·4+2 = 14,
        // so the shared level-2 codeword maps to distinct composite indices.
        assert_eq!(prefix_indices(&slice(&[0, 2]), 4).unwrap(), vec![0, 2]);
        assert_eq!(prefix_indices(&slice(&[3, 2]), 4).unwrap(), vec![3, 14]);
    }

    #[test]
    fn prefix_base64_tuple() {
        let idx = prefix_indices(&slice(&[33, 42, 63, 3]), 64).unwrap();
        assert_eq!(idx, vec![33, 2154, 137_919, 8_826_819]);
    }

    #[test]
    fn prefix_all_zero_code() {
        for n in [2u32, 4, 64] {
            let idx = prefix_indices(&slice(&[0, 0, 0, 0]), n).unwrap();
            assert_eq!(idx, vec![0, 0, 0, 0]);
        }
    }

    #[test]
    fn prefix_rejects_out_of_range_codeword() {
        assert!(prefix_indices(&slice(&[4, 0]), 4).is_err());
        assert!(prefix_indices(&slice(&[0, 0]), 0).is_err());
    }

    #[test]
    fn prefix_rejects_u64_overflow() {
        // 65536^5 = 2^80 exceeds u64: the fold must reject, not wrap.
        let code = slice(&[65_535; 5]);
        let err = prefix_indices(&code, 65_536).unwrap_err();
        assert!(err.to_string().contains("overflow"), "unexpected error: {err}");
    }

    #[test]
    fn prefix_injective_and_recurrent_small_bases() {
        // Exhaustive over all codes with N ≤ 8, L ≤ 3: per-level injectivity
        // of the composite index, and the fold recurrence c̄_l = c̄_{l−1}·N + c_l.
        for n in 2..=8u32 {
            let l_max = 3usize;
            let mut seen: Vec<std::collections::BTreeMap<u64, Vec<u32>>> =
                vec![BTreeMap::new(); l_max];
            let total = (n as u64).pow(l_max as u32);
            for mut x in 0..total {
                let mut codewords = vec![0u32; l_max];
                for l in (0..l_max).rev() {
                    codewords[l] = (x % u64::from(n)) as u32;
                    x /= u64::from(n);
                }
                let code = slice(&codewords);
                let idx = prefix_indices(&code, n).unwrap();
                assert_eq!(idx[0], u64::from(codewords[0]));
                for l in 1..l_max {
                    assert_eq!(idx[l], idx[l - 1] * u64::from(n) + u64::from(codewords[l]));
                }
                for l in 0..l_max {
                    let prefix = codewords[..=l].to_vec();
                    if let Some(prev) = seen[l].insert(idx[l], prefix.clone()) {
                        assert_eq!(prev, prefix, "collision at level {} base {}", l + 1, n);
                    }
                }
            }
            for (l, map) in seen.iter().enumerate() {
                assert_eq!(map.len() as u64, (n as u64).pow(l as u32 + 1));
            }
        }
    }

    #[test]
    fn vote_of_one_returns_the_slice() {
        let mut h = SliceHistory::new(4);
        h.push(slice(&[5, 1, 2, 7])).unwrap();
        let room = majority_vote(&h).unwrap();
        assert_eq!(room.codewords, vec![5, 1, 2, 7]);
        assert_eq!(room.granularity, Granularity::Room);
    }

    #[test]
    fn vote_counts_levels_independently() {
        let mut h = SliceHistory::new(2);
        for cw in [[1, 2], [1, 3], [2, 3], [1, 3]] {
            h.push(slice(&cw)).unwrap();
        }
        // Level 1: {1:3, 2:1} → 1. Level 2: {2:1, 3:3} → 3.
        assert_eq!(majority_vote(&h).unwrap().codewords, vec![1, 3]);
    }

    #[test]
    fn vote_tie_breaks_to_smallest_codeword() {
        let mut h = SliceHistory::new(2);
        h.push(slice(&[1, 2])).unwrap();
        h.push(slice(&[2, 3])).unwrap();
        assert_eq!(majority_vote(&h).unwrap().codewords, vec![1, 2]);
    }

    #[test]
    fn vote_rejects_empty_history() {
        assert!(majority_vote(&SliceHistory::new(3)).is_err());
    }

    #[test]
    fn history_rejects_room_codes_and_level_mismatch() {
        let mut h = SliceHistory::new(2);
        assert!(h.push(LucidCode::room(vec![0, 1])).is_err());
        assert!(h.push(slice(&[0, 1, 2])).is_err());
    }

    /// From-scratch recount, used as the voting oracle.
    fn batch_vote(slices: &[Vec<u32>], levels: usize) -> Vec<u32> {
        (0..levels)
            .map(|l| {
                let mut counts: BTreeMap<u32, u64> = BTreeMap::new();
                for s in slices {
                    *counts.entry(s[l]).or_insert(0) += 1;
                }
                let mut best = (0u32, 0u64);
                for (&code, &count) in &counts {
                    if count > best.1 {
                        best = (code, count);
                    }
                }
                best.0
            })
            .collect()
    }

    #[test]
    fn incremental_vote_equals_batch_recount() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..1000 {
            let levels = 1 + (rng.next_u32() % 4) as usize;
            let n = 2 + rng.next_u32() % 6;
            let len = 1 + (rng.next_u32() % 40) as usize;
            let mut h = SliceHistory::new(levels);
            let mut seen: Vec<Vec<u32>> = Vec::new();
            for _ in 0..len {
                let cw: Vec<u32> = (0..levels).map(|_| rng.next_u32() % n).collect();
                seen.push(cw.clone());
                h.push(slice(&cw)).unwrap();
                assert_eq!(
                    majority_vote(&h).unwrap().codewords,
                    batch_vote(&seen, levels),
                    "incremental vote diverged from recount after {} slices",
                    seen.len()
                );
            }
        }
    }

    #[test]
    fn vote_counters_survive_json_round_trip() {
        let mut h = SliceHistory::new(3);
        for cw in [[1, 2, 3], [1, 2, 4], [2, 2, 4]] {
            h.push(slice(&cw)).unwrap();
        }
        let json = serde_json::to_string(&h).unwrap();
        let back: SliceHistory = serde_json::from_str(&json).unwrap();
        assert_eq!(back.slices(), h.slices());
        assert_eq!(majority_vote(&back).unwrap(), majority_vote(&h).unwrap());
    }

    #[test]
    fn tables_depth_one_schemes_coincide() {
        let a =
            EmbeddingTableSet::make_tables(TableScheme::PrefixNgram, 1, 16, 8, 1 << 20, 0.1, 9)
                .unwrap();
        let b =
            EmbeddingTableSet::make_tables(TableScheme::LevelWise, 1, 16, 8, 1 << 20, 0.1, 9)
                .unwrap();
        assert_eq!(a.level_rows(0), b.level_rows(0));
        assert!(!a.level_hashed(0));
    }

    #[test]
    fn tables_cap_applies_only_past_max_rows() {
        // 64^4 = 16,777,216 exceeds the 2^20 cap; lower levels fit exactly.
        let t =
            EmbeddingTableSet::make_tables(TableScheme::PrefixNgram, 4, 64, 8, 1 << 20, 0.1, 9)
                .unwrap();
        assert_eq!(t.level_rows(0), 64);
        assert_eq!(t.level_rows(1), 4096);
        assert_eq!(t.level_rows(2), 262_144);
        assert_eq!(t.level_rows(3), 1 << 20);
        assert_eq!(
            (0..4).map(|l| t.level_hashed(l)).collect::<Vec<_>>(),
            vec![false, false, false, true]
        );
    }

    #[test]
    fn tables_same_seed_bit_identical() {
        let mk = || {
            EmbeddingTableSet::make_tables(TableScheme::PrefixNgram, 3, 8, 8, 1 << 12, 0.1, 77)
                .unwrap()
        };
        let (a, b) = (mk(), mk());
        for l in 0..3 {
            assert_eq!(a.table(l), b.table(l));
        }
    }

    #[test]
    fn lookup_distinguishes_prefixes_levelwise_does_not() {
        let prefix =
            EmbeddingTableSet::make_tables(TableScheme::PrefixNgram, 2, 4, 8, 1 << 20, 0.1, 3)
                .unwrap();
        let level =
            EmbeddingTableSet::make_tables(TableScheme::LevelWise, 2, 4, 8, 1 << 20, 0.1, 3)
                .unwrap();
        let a = slice(&[0, 2]);
        let b = slice(&[3, 2]);
        assert_eq!(prefix.rows_for(&a).unwrap(), vec![0, 2]);
        assert_eq!(prefix.rows_for(&b).unwrap(), vec![3, 14]);
        assert_eq!(level.rows_for(&a).unwrap()[1], level.rows_for(&b).unwrap()[1]);
    }

    #[test]
    fn lookup_matches_index_then_concat_reference() {
        // Give every row a distinct constant value, then check lookup equals
        // a brute-force "resolve rows, concatenate" reference over all codes.
        let (n, levels, d) = (4u32, 3usize, 4usize);
        for scheme in [TableScheme::PrefixNgram, TableScheme::LevelWise] {
            let mut t =
                EmbeddingTableSet::make_tables(scheme, levels, n, d, 1 << 20, 0.1, 5).unwrap();
            for l in 0..levels {
                for r in 0..t.level_rows(l) {
                    let v = (l * 10_000 + r) as f32;
                    t.row_mut(l, r).fill(v);
                }
            }
            for x in 0..n.pow(levels as u32) {
                let mut cw = vec![0u32; levels];
                let mut rem = x;
                for l in (0..levels).rev() {
                    cw[l] = rem % n;
                    rem /= n;
                }
                let code = slice(&cw);
                let rows = t.rows_for(&code).unwrap();
                let mut expect = Vec::new();
                for (l, &r) in rows.iter().enumerate() {
                    expect.extend(std::iter::repeat((l * 10_000 + r) as f32).take(d));
                }
                assert_eq!(t.lookup(&code).unwrap(), expect);
                assert_eq!(t.lookup(&code).unwrap().len(), t.output_dim());
            }
        }
    }

    #[test]
    fn from_parts_round_trip_and_shape_check() {
        let t = EmbeddingTableSet::make_tables(TableScheme::PrefixNgram, 3, 8, 8, 64, 0.1, 11)
            .unwrap();
        let scheme = t.scheme();
        let tables = t.clone().into_tables();
        let back = EmbeddingTableSet::from_parts(scheme, 3, 8, 8, 64, tables).unwrap();
        assert_eq!(back, t);
        // Wrong geometry is rejected.
        let bad = vec![vec![0.0f32; 8]; 3];
        assert!(EmbeddingTableSet::from_parts(scheme, 3, 8, 8, 64, bad).is_err());
    }
}
