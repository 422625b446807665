//! Synthetic ephemeral-item world with checkable ground truth.
//!
//! The generator builds a semantic tree whose node prototypes decay in
//! magnitude with depth (coarse-to-fine, ratio `rho` per level), a
//! population of users with preference vectors, and a population of items,
//! each owning a true path through the tree. Items are either
//! `EphemeralLive` — born mid-stream with a log-normal lifetime whose
//! median is far below the stream length — or `PersistentVideo`, which
//! lives for the whole stream. Every impression observes the item's
//! current content slice: the sum of its path prototypes plus per-slice
//! drift and observation noise, a pure function of `(tree seed, item_id,
//! slice_index)`.
//!
//! Labels are drawn Bernoulli with probability
//! `sigmoid(label_scale·⟨affinity, item content mean⟩ + user bias)` — the
//! *noiseless* content mean, not the noisy slice, carries the label signal,
//! so slice embeddings are an imperfect observation of what drives
//! engagement. An item's content mean is its path-prototype sum plus a
//! per-item idiosyncratic offset (`sigma_item`): the part of what an item
//! is that its semantic neighborhood does not explain. Quantized codes can
//! only ever capture the neighborhood, so the offset is exactly the signal
//! a per-item memorized table learns and a shared semantic table cannot.
//! [`oracle_label_prob`] exposes the label probability exactly, which gives
//! every downstream ranking claim a Bayes-optimal reference.
//!
//! Everything here is a pure function of the config and its seed: the same
//! inputs reproduce the same tree, populations, and record stream bit for
//! bit.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write as IoWrite};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::lucid::splitmix64;
use crate::{Error, Result};

/// Current world-document format version.
const WORLD_FORMAT_VERSION: u32 = 1;

/// Full generator configuration; [`WorldConfig::default`] is the tuned
/// desk-scale setup (~500k records).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    // Semantic tree.
    /// Tree depth = number of quantization levels L.
    pub depth: usize,
    /// Branching factor B per level.
    pub branching: u32,
    /// Embedding dimension d.
    pub dim: usize,
    /// Mean prototype norm at level 1.
    pub base_scale: f32,
    /// Geometric norm decay per level; level l targets base_scale·rho^(l−1).
    pub rho: f32,
    /// When true (default), every node gets its own prototype, so a level's
    /// residual structure depends on the parent prefix. When false, all
    /// siblings at a level share one offset set per sibling index, making
    /// tree data exactly representable by a matching (L, N=B) codebook.
    pub prefix_dependent: bool,

    // Populations.
    pub n_users: usize,
    pub n_items: usize,
    /// Fraction of items that are EphemeralLive.
    pub live_fraction: f64,
    /// Number of underlying streamer identities the EphemeralLive items
    /// (broadcasts) are drawn from. Each broadcast is a fresh item — new id,
    /// new lifetime — but a returning streamer reuses their path and
    /// idiosyncratic offset, so the *content* identity persists across
    /// broadcasts while the *id* never does. 0 means every broadcast is a
    /// one-off identity.
    pub n_streamers: usize,
    /// Fraction of EphemeralLive items that are broadcasts by pool
    /// streamers; the rest are one-off identities that never return.
    pub streamer_share: f64,
    /// Weight of the shared "popular" direction mixed into every user's
    /// affinity vector (0 = fully idiosyncratic preferences).
    pub affinity_popular_strength: f64,
    /// Hard cap on the affinity norm.
    pub affinity_max_norm: f64,
    /// Mean and std of the per-user logit bias.
    pub bias_mean: f64,
    pub bias_std: f64,
    /// Multiplier on ⟨affinity, content⟩ inside the label logit.
    pub label_scale: f64,

    // Stream.
    pub ticks: u64,
    pub records_per_tick: u32,
    /// Content slices an item emits per tick; impressions within a tick
    /// sample uniformly among that tick's slices.
    pub slices_per_tick: u32,
    /// Fraction of impressions routed to currently-alive live items.
    pub live_record_share: f64,
    /// Entrywise std of per-slice content drift.
    pub sigma_drift: f32,
    /// Entrywise std of per-slice observation noise.
    pub sigma_obs: f32,
    /// Entrywise std of each item's idiosyncratic content offset — content
    /// signal its semantic neighborhood (and hence any quantized code)
    /// cannot explain.
    pub sigma_item: f32,
    /// Median of the log-normal EphemeralLive lifetime, in ticks.
    pub lifetime_median_ticks: f64,
    /// Log-space sigma of the lifetime distribution.
    pub lifetime_log_sigma: f64,

    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            depth: 4,
            branching: 8,
            dim: 32,
            base_scale: 1.0,
            rho: 0.5,
            prefix_dependent: true,
            n_users: 2000,
            n_items: 8000,
            live_fraction: 0.7,
            n_streamers: 700,
            streamer_share: 0.5,
            affinity_popular_strength: 0.6,
            affinity_max_norm: 2.5,
            bias_mean: -1.2,
            bias_std: 0.5,
            label_scale: 6.0,
            ticks: 10_000,
            records_per_tick: 50,
            slices_per_tick: 1,
            live_record_share: 0.4,
            sigma_drift: 0.1,
            sigma_obs: 0.05,
            sigma_item: 0.12,
            lifetime_median_ticks: 40.0,
            lifetime_log_sigma: 0.8,
            seed: 17,
        }
    }
}

impl WorldConfig {
    /// Validates every field before any generation work.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(format!("world config: {msg}")));
        if self.depth < 1 {
            return bad("depth must be ≥ 1");
        }
        if self.branching < 2 {
            return bad("branching must be ≥ 2");
        }
        if self.dim < 2 {
            return bad("dim must be ≥ 2");
        }
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return bad("rho must lie in (0, 1)");
        }
        if !(self.base_scale > 0.0) {
            return bad("base_scale must be positive");
        }
        if self.n_users == 0 || self.n_items == 0 {
            return bad("n_users and n_items must be positive");
        }
        if !(0.0..=1.0).contains(&self.live_fraction) {
            return bad("live_fraction must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.live_record_share) {
            return bad("live_record_share must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.streamer_share) {
            return bad("streamer_share must lie in [0, 1]");
        }
        if self.ticks == 0 || self.records_per_tick == 0 || self.slices_per_tick == 0 {
            return bad("ticks, records_per_tick, slices_per_tick must be positive");
        }
        if self.sigma_drift < 0.0 || self.sigma_obs < 0.0 || self.sigma_item < 0.0 {
            return bad("noise sigmas must be non-negative");
        }
        if !(self.lifetime_median_ticks > 0.0) || !(self.lifetime_log_sigma >= 0.0) {
            return bad("lifetime parameters must be positive");
        }
        if !self.label_scale.is_finite()
            || !self.bias_mean.is_finite()
            || !(self.bias_std >= 0.0)
            || !(self.affinity_max_norm > 0.0)
            || !(self.affinity_popular_strength >= 0.0)
        {
            return bad("label model parameters out of range");
        }
        Ok(())
    }
}

/// Hierarchical prototype tree: level-`l` nodes carry vectors whose mean
/// norm is `base_scale·rho^(l−1)`; each sibling group is centered around
/// zero so deeper levels are genuine residuals of their parents.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SemanticTree {
    pub depth: usize,
    pub branching: u32,
    pub dim: usize,
    pub base_scale: f32,
    pub rho: f32,
    pub prefix_dependent: bool,
    /// Seed the tree (and all slice noise) derives from.
    pub seed: u64,
    /// Per level: node prototypes, flat `nodes × dim`. With
    /// `prefix_dependent` the level-`l` table has `B^l` rows addressed by
    /// the base-B fold of the path prefix; otherwise `B` rows addressed by
    /// the sibling index alone.
    prototypes: Vec<Vec<f32>>,
}

/// Folds a path prefix into a base-B node index.
fn path_fold(path: &[u32], branching: u32) -> usize {
    let mut acc = 0usize;
    for &p in path {
        acc = acc * branching as usize + p as usize;
    }
    acc
}

impl SemanticTree {
    /// Builds the tree: per sibling group, i.i.d. standard normal vectors
    /// are centered (group mean subtracted) and commonly rescaled so the
    /// group's mean norm equals the level target exactly.
    pub fn build(
        depth: usize,
        branching: u32,
        dim: usize,
        base_scale: f32,
        rho: f32,
        prefix_dependent: bool,
        seed: u64,
    ) -> Result<SemanticTree> {
        if depth < 1 || branching < 2 || dim < 2 || !(rho > 0.0 && rho < 1.0) {
            return Err(Error::Config(
                "tree requires depth ≥ 1, branching ≥ 2, dim ≥ 2, rho in (0,1)".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = branching as usize;
        let mut prototypes = Vec::with_capacity(depth);
        for level in 0..depth {
            let groups = if prefix_dependent { b.pow(level as u32) } else { 1 };
            let target = f64::from(base_scale) * f64::from(rho).powi(level as i32);
            let mut table = vec![0.0f32; groups * b * dim];
            for g in 0..groups {
                // Sample the group, center it, then scale the group so the
                // mean sibling norm hits the level target.
                let mut group = vec![0.0f64; b * dim];
                for v in group.iter_mut() {
                    *v = StandardNormal.sample(&mut rng);
                }
                for j in 0..dim {
                    let mean = (0..b).map(|i| group[i * dim + j]).sum::<f64>() / b as f64;
                    for i in 0..b {
                        group[i * dim + j] -= mean;
                    }
                }
                let mean_norm = (0..b)
                    .map(|i| {
                        group[i * dim..(i + 1) * dim].iter().map(|v| v * v).sum::<f64>().sqrt()
                    })
                    .sum::<f64>()
                    / b as f64;
                let factor = if mean_norm > 0.0 { target / mean_norm } else { 0.0 };
                for (t, v) in table[g * b * dim..(g + 1) * b * dim].iter_mut().zip(&group) {
                    *t = (v * factor) as f32;
                }
            }
            prototypes.push(table);
        }
        Ok(SemanticTree {
            depth,
            branching,
            dim,
            base_scale,
            rho,
            prefix_dependent,
            seed,
            prototypes,
        })
    }

    /// Number of distinct prototype rows stored at a level (0-based).
    pub fn level_nodes(&self, level: usize) -> usize {
        self.prototypes[level].len() / self.dim
    }

    /// Prototype of the node a path prefix selects at `level` (0-based;
    /// uses `path[..=level]`).
    pub fn prototype(&self, path: &[u32], level: usize) -> &[f32] {
        let idx = if self.prefix_dependent {
            path_fold(&path[..=level], self.branching)
        } else {
            path[level] as usize
        };
        &self.prototypes[level][idx * self.dim..(idx + 1) * self.dim]
    }

    /// Noiseless content mean of a path: the sum of its prototypes along
    /// every level, accumulated in f64.
    pub fn path_sum(&self, path: &[u32]) -> Vec<f64> {
        let mut out = vec![0.0f64; self.dim];
        for level in 0..self.depth {
            for (o, w) in out.iter_mut().zip(self.prototype(path, level)) {
                *o += f64::from(*w);
            }
        }
        out
    }

    /// The slice embedding an item emits at `slice_index`: the item's
    /// content mean plus per-slice drift plus observation noise, each entry
    /// `f32`. Pure function of `(self.seed, item_id, slice_index)`.
    pub fn slice_embedding(
        &self,
        item: &ItemSpec,
        slice_index: u64,
        sigma_drift: f32,
        sigma_obs: f32,
    ) -> Vec<f32> {
        let content = self.content_mean(item);
        let noise_seed = splitmix64(splitmix64(self.seed ^ splitmix64(item.item_id)) ^ slice_index);
        let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
        let mut out = Vec::with_capacity(self.dim);
        for &c in &content {
            let drift: f64 = StandardNormal.sample(&mut rng);
            let obs: f64 = StandardNormal.sample(&mut rng);
            out.push((c + drift * f64::from(sigma_drift) + obs * f64::from(sigma_obs)) as f32);
        }
        out
    }

    /// The item's noiseless content mean: its path-prototype sum plus its
    /// idiosyncratic offset. This is the label-relevant signal; every slice
    /// is a noisy observation of it.
    pub fn content_mean(&self, item: &ItemSpec) -> Vec<f64> {
        let mut content = self.path_sum(&item.true_path);
        for (c, o) in content.iter_mut().zip(&item.offset) {
            *c += f64::from(*o);
        }
        content
    }
}

/// Whether an item is a short-lived live room or a persistent video.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LifetimeClass {
    EphemeralLive,
    PersistentVideo,
}

/// One item: identity, ground-truth path, and lifetime window.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ItemSpec {
    pub item_id: u64,
    /// Ground-truth node choice per level, each in `[0, B)`.
    pub true_path: Vec<u32>,
    /// Idiosyncratic content offset, entrywise N(0, `sigma_item`²): the part
    /// of the item's content mean its path prototypes don't explain. Empty
    /// means all-zero.
    #[serde(default)]
    pub offset: Vec<f32>,
    pub lifetime_class: LifetimeClass,
    pub birth_time: u64,
    pub lifetime_ticks: u64,
}

impl ItemSpec {
    /// First tick at which the item no longer serves impressions.
    pub fn death_time(&self) -> u64 {
        self.birth_time.saturating_add(self.lifetime_ticks)
    }
}

/// One user: preference vector and logit bias.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct UserProfile {
    pub user_id: u64,
    pub affinity: Vec<f32>,
    pub bias: f64,
}

/// One impression. Serialized as JSON Lines with exactly these field
/// names: `user_id, item_id, slice_vec, slice_index, tick, label, exposure`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct InteractionRecord {
    pub user_id: u64,
    pub item_id: u64,
    /// The observed content slice (noisy).
    pub slice_vec: Vec<f32>,
    pub slice_index: u64,
    pub tick: u64,
    /// Click label, 0 or 1.
    pub label: u8,
    /// Impressions this item had received strictly before this one.
    pub exposure: u64,
}

/// An [`InteractionRecord`] augmented with its quantized codes: the slice
/// code of `slice_vec` and the room code (cumulative per-level majority
/// vote over the item's slices seen so far, including this one).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct EncodedRecord {
    pub user_id: u64,
    pub item_id: u64,
    pub slice_vec: Vec<f32>,
    pub slice_index: u64,
    pub tick: u64,
    pub label: u8,
    pub exposure: u64,
    pub slice_code: Vec<u32>,
    pub room_code: Vec<u32>,
}

/// The generated world: tree plus item and user populations.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct World {
    pub config: WorldConfig,
    pub tree: SemanticTree,
    pub items: Vec<ItemSpec>,
    pub users: Vec<UserProfile>,
}

/// Derives an independent sub-seed from a base seed and a role tag.
fn derive_seed(seed: u64, tag: u64) -> u64 {
    splitmix64(seed ^ splitmix64(tag))
}

impl World {
    /// Builds the tree and both populations from the config.
    pub fn build(config: &WorldConfig) -> Result<World> {
        config.validate()?;
        let tree = SemanticTree::build(
            config.depth,
            config.branching,
            config.dim,
            config.base_scale,
            config.rho,
            config.prefix_dependent,
            derive_seed(config.seed, 1),
        )?;

        // Users: affinity = popular direction · strength + idiosyncratic
        // N(0, I/d) part, capped in norm; bias ~ N(bias_mean, bias_std²).
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 2));
        let mut popular = vec![0.0f64; config.dim];
        for v in popular.iter_mut() {
            *v = StandardNormal.sample(&mut rng);
        }
        let pop_norm = popular.iter().map(|v| v * v).sum::<f64>().sqrt();
        for v in popular.iter_mut() {
            *v /= pop_norm;
        }
        let idio_std = 1.0 / (config.dim as f64).sqrt();
        let mut users = Vec::with_capacity(config.n_users);
        for u in 0..config.n_users {
            let mut affinity = vec![0.0f64; config.dim];
            for (a, p) in affinity.iter_mut().zip(&popular) {
                let xi: f64 = StandardNormal.sample(&mut rng);
                *a = config.affinity_popular_strength * p + xi * idio_std;
            }
            let norm = affinity.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > config.affinity_max_norm {
                let f = config.affinity_max_norm / norm;
                for a in affinity.iter_mut() {
                    *a *= f;
                }
            }
            let bias_draw: f64 = StandardNormal.sample(&mut rng);
            users.push(UserProfile {
                user_id: splitmix64(derive_seed(config.seed, 2) ^ (u as u64).wrapping_add(1)),
                affinity: affinity.into_iter().map(|v| v as f32).collect(),
                bias: config.bias_mean + bias_draw * config.bias_std,
            });
        }

        // Items: class split, births and lifetimes. EphemeralLive items are
        // broadcasts drawn from a smaller pool of streamer identities: the
        // path and offset belong to the streamer and recur across their
        // broadcasts, while the item id and lifetime belong to the single
        // broadcast. PersistentVideo items each own their identity.
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 3));
        let n_live = (config.live_fraction * config.n_items as f64).round() as usize;
        let lifetime = LogNormal::new(config.lifetime_median_ticks.ln(), config.lifetime_log_sigma)
            .map_err(|e| Error::Config(format!("lifetime distribution: {e}")))?;
        let draw_identity = |rng: &mut ChaCha8Rng| -> (Vec<u32>, Vec<f32>) {
            let path: Vec<u32> =
                (0..config.depth).map(|_| rng.random_range(0..config.branching)).collect();
            let offset: Vec<f32> = (0..config.dim)
                .map(|_| {
                    let xi: f64 = StandardNormal.sample(rng);
                    (xi * f64::from(config.sigma_item)) as f32
                })
                .collect();
            (path, offset)
        };
        let streamers: Vec<(Vec<u32>, Vec<f32>)> =
            (0..config.n_streamers).map(|_| draw_identity(&mut rng)).collect();
        let mut items = Vec::with_capacity(config.n_items);
        for i in 0..config.n_items {
            let live = i < n_live;
            let recurs = live && !streamers.is_empty() && rng.random::<f64>() < config.streamer_share;
            let (true_path, offset) = if recurs {
                streamers[rng.random_range(0..streamers.len())].clone()
            } else {
                draw_identity(&mut rng)
            };
            let (birth_time, lifetime_ticks) = if live {
                let birth = rng.random_range(0..config.ticks);
                let life = lifetime.sample(&mut rng).round().max(1.0) as u64;
                (birth, life)
            } else {
                (0, config.ticks)
            };
            items.push(ItemSpec {
                item_id: splitmix64(derive_seed(config.seed, 3) ^ (i as u64).wrapping_add(1)),
                true_path,
                offset,
                lifetime_class: if live {
                    LifetimeClass::EphemeralLive
                } else {
                    LifetimeClass::PersistentVideo
                },
                birth_time,
                lifetime_ticks,
            });
        }

        Ok(World { config: config.clone(), tree, items, users })
    }

    /// Exact click probability of a (user, item) pair:
    /// `sigmoid(label_scale·⟨affinity, content mean⟩ + bias)`.
    pub fn oracle_label_prob(&self, user: &UserProfile, item: &ItemSpec) -> f64 {
        oracle_label_prob(user, item, &self.tree, self.config.label_scale)
    }

    /// Generates the full tick-ordered impression stream.
    ///
    /// Per tick: expired live items leave, newborn live items join, then
    /// `records_per_tick` impressions are drawn — a uniform user, an item
    /// (live pool with probability `live_record_share` when non-empty,
    /// else persistent), the slice the item is currently emitting, and a
    /// Bernoulli label from the oracle probability.
    pub fn generate_log(&self) -> Vec<InteractionRecord> {
        let config = &self.config;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 4));

        let persistent: Vec<usize> = (0..self.items.len())
            .filter(|&i| self.items[i].lifetime_class == LifetimeClass::PersistentVideo)
            .collect();
        let mut births: Vec<usize> = (0..self.items.len())
            .filter(|&i| self.items[i].lifetime_class == LifetimeClass::EphemeralLive)
            .collect();
        births.sort_by_key(|&i| (self.items[i].birth_time, i));
        let mut next_birth = 0usize;
        let mut alive: Vec<usize> = Vec::new();

        let mut exposure = vec![0u64; self.items.len()];
        let total = config.ticks as usize * config.records_per_tick as usize;
        let mut log = Vec::with_capacity(total);
        for tick in 0..config.ticks {
            alive.retain(|&i| self.items[i].death_time() > tick);
            while next_birth < births.len() && self.items[births[next_birth]].birth_time == tick {
                alive.push(births[next_birth]);
                next_birth += 1;
            }
            for _ in 0..config.records_per_tick {
                let user_idx = rng.random_range(0..self.users.len());
                let want_live = rng.random::<f64>() < config.live_record_share;
                let item_idx = if want_live && !alive.is_empty() {
                    alive[rng.random_range(0..alive.len())]
                } else if !persistent.is_empty() {
                    persistent[rng.random_range(0..persistent.len())]
                } else if !alive.is_empty() {
                    alive[rng.random_range(0..alive.len())]
                } else {
                    continue; // no servable item this tick
                };
                let item = &self.items[item_idx];
                let age = tick - item.birth_time;
                let sub = rng.random_range(0..config.slices_per_tick) as u64;
                let slice_index = age * u64::from(config.slices_per_tick) + sub;
                let slice_vec = self.tree.slice_embedding(
                    item,
                    slice_index,
                    config.sigma_drift,
                    config.sigma_obs,
                );
                let p = self.oracle_label_prob(&self.users[user_idx], item);
                let label = u8::from(rng.random::<f64>() < p);
                log.push(InteractionRecord {
                    user_id: self.users[user_idx].user_id,
                    item_id: item.item_id,
                    slice_vec,
                    slice_index,
                    tick,
                    label,
                    exposure: exposure[item_idx],
                });
                exposure[item_idx] += 1;
            }
        }
        log
    }

    /// Writes the world document (config + tree + populations) as JSON.
    pub fn save(&self, path: &Path) -> Result<()> {
        #[derive(Serialize)]
        struct Doc<'a> {
            format_version: u32,
            config: &'a WorldConfig,
            tree: &'a SemanticTree,
            items: &'a Vec<ItemSpec>,
            users: &'a Vec<UserProfile>,
        }
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer(
            &mut w,
            &Doc {
                format_version: WORLD_FORMAT_VERSION,
                config: &self.config,
                tree: &self.tree,
                items: &self.items,
                users: &self.users,
            },
        )?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }

    /// Loads a world document, checking the format version.
    pub fn load(path: &Path) -> Result<World> {
        #[derive(Deserialize)]
        struct Doc {
            format_version: u32,
            config: WorldConfig,
            tree: SemanticTree,
            items: Vec<ItemSpec>,
            users: Vec<UserProfile>,
        }
        let doc: Doc = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        if doc.format_version != WORLD_FORMAT_VERSION {
            return Err(Error::Data(format!(
                "{}: unsupported world format version {} (expected {WORLD_FORMAT_VERSION})",
                path.display(),
                doc.format_version
            )));
        }
        Ok(World { config: doc.config, tree: doc.tree, items: doc.items, users: doc.users })
    }

    /// Item lookup by opaque id.
    pub fn item_index(&self) -> BTreeMap<u64, usize> {
        self.items.iter().enumerate().map(|(i, it)| (it.item_id, i)).collect()
    }

    /// User lookup by opaque id.
    pub fn user_index(&self) -> BTreeMap<u64, usize> {
        self.users.iter().enumerate().map(|(i, u)| (u.user_id, i)).collect()
    }
}

/// Exact click probability:
/// `sigmoid(label_scale·⟨affinity, content mean⟩ + bias)`, where the content
/// mean is the item's path-prototype sum plus its idiosyncratic offset
/// ([`SemanticTree::content_mean`]). Per-slice noise never enters the label.
pub fn oracle_label_prob(
    user: &UserProfile,
    item: &ItemSpec,
    tree: &SemanticTree,
    label_scale: f64,
) -> f64 {
    let content = tree.content_mean(item);
    let dot: f64 =
        user.affinity.iter().zip(&content).map(|(a, c)| f64::from(*a) * c).sum();
    sigmoid(label_scale * dot + user.bias)
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Writes records as JSON Lines.
pub fn write_log<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a JSON Lines file of records, reporting the offending line on
/// parse failure.
pub fn read_log<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| {
            Error::Data(format!("{}:{}: malformed record: {e}", path.display(), i + 1))
        })?;
        out.push(rec);
    }
    Ok(out)
}

/// Quantizes a log against a codebook: per record, the slice code of its
/// `slice_vec`, and the room code as the cumulative per-level majority
/// vote over the item's slices seen so far (including this one).
pub fn encode_log(
    records: &[InteractionRecord],
    codebook: &crate::rqkmeans::Codebook,
) -> Result<Vec<EncodedRecord>> {
    let mut histories: BTreeMap<u64, crate::lucid::SliceHistory> = BTreeMap::new();
    let mut out = Vec::with_capacity(records.len());
    for r in records {
        let slice_code = codebook.encode(&r.slice_vec)?;
        let history = histories
            .entry(r.item_id)
            .or_insert_with(|| crate::lucid::SliceHistory::new(codebook.levels()));
        history.push(slice_code.clone())?;
        let room_code = crate::lucid::majority_vote(history)?;
        out.push(EncodedRecord {
            user_id: r.user_id,
            item_id: r.item_id,
            slice_vec: r.slice_vec.clone(),
            slice_index: r.slice_index,
            tick: r.tick,
            label: r.label,
            exposure: r.exposure,
            slice_code: slice_code.codewords,
            room_code: room_code.codewords,
        });
    }
    Ok(out)
}
