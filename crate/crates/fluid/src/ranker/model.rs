//! Parameters, forward pass, and exact gradients for the token ranker.
//!
//! Storage is `f32`; every dot product, loss, gradient, and update step is
//! computed in `f64` and rounded back to `f32` only when a parameter is
//! written. The gradient code materializes a compact [`Pass`] (activations
//! plus per-group gradient vectors); the dense-matrix gradients (`W1`,
//! `W_concat`) are defined by outer products over those vectors, so the
//! fused SGD update and the dense gradient export share one formula per
//! scalar and agree bitwise.

use crate::lucid::{splitmix64, EmbeddingTableSet};
use crate::synthgen::{sigmoid, EncodedRecord};
use crate::{Error, Result};

use super::{ArchConfig, CandidateArch, FusionVariant, GateFeature};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Slot order of the concatenated input: user, candidate/item-ID, slice,
/// room. Inactive slots are zero vectors.
pub const SLOT_USER: usize = 0;
pub const SLOT_CAND: usize = 1;
pub const SLOT_SLICE: usize = 2;
pub const SLOT_ROOM: usize = 3;
pub const NUM_SLOTS: usize = 4;

/// Prediction clip bounds for the cross-entropy loss.
const P_MIN: f64 = 1e-7;
const P_MAX: f64 = 1.0 - 1e-7;

/// Component tags for per-component init seeds.
const SEED_USER: u64 = 11;
const SEED_ITEM: u64 = 12;
const SEED_SLICE: u64 = 13;
const SEED_ROOM: u64 = 14;
const SEED_CONCAT: u64 = 15;
const SEED_BACKBONE: u64 = 16;

fn sub_seed(seed: u64, tag: u64) -> u64 {
    splitmix64(seed ^ splitmix64(tag))
}

fn fill_uniform(slice: &mut [f32], scale: f32, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for w in slice.iter_mut() {
        *w = (rng.random::<f32>() * 2.0 - 1.0) * scale;
    }
}

/// Clipped binary cross entropy and its logit gradient.
///
/// Inside the clip range the gradient is exactly `p − y`; once the
/// prediction is clipped the loss is locally constant, so the (almost
/// everywhere) derivative is 0.
fn bce_loss_grad(p: f64, y: f64) -> (f64, f64) {
    let pc = p.clamp(P_MIN, P_MAX);
    let loss = -(y * pc.ln() + (1.0 - y) * (1.0 - pc).ln());
    let dlogit = if p < P_MIN || p > P_MAX { 0.0 } else { p - y };
    (loss, dlogit)
}

/// One impression, borrowed from the encoded log (or built ad hoc).
#[derive(Debug, Clone, Copy)]
pub struct RecordInputs<'a> {
    pub user_id: u64,
    pub item_id: u64,
    pub slice_code: &'a [u32],
    pub room_code: Option<&'a [u32]>,
    pub exposure: u64,
    pub label: u8,
}

impl<'a> RecordInputs<'a> {
    pub fn from_encoded(record: &'a EncodedRecord) -> Self {
        RecordInputs {
            user_id: record.user_id,
            item_id: record.item_id,
            slice_code: &record.slice_code,
            room_code: Some(&record.room_code),
            exposure: record.exposure,
            label: record.label,
        }
    }
}

/// The assembled model input: named tokens in their fixed slots.
#[derive(Debug, Clone)]
pub struct TokenSet {
    /// Concatenated input, `NUM_SLOTS · token_dim`; inactive slots zero.
    pub x: Vec<f64>,
    pub active: [bool; NUM_SLOTS],
    pub beta: f64,
    token_dim: usize,
    names: [Option<&'static str>; NUM_SLOTS],
}

impl TokenSet {
    /// Active tokens in slot order as `(name, values)`.
    pub fn tokens(&self) -> Vec<(&'static str, &[f64])> {
        let d = self.token_dim;
        (0..NUM_SLOTS)
            .filter_map(|slot| {
                self.names[slot]
                    .filter(|_| self.active[slot])
                    .map(|name| (name, &self.x[slot * d..(slot + 1) * d]))
            })
            .collect()
    }

    /// The named token's values, if that token is active.
    pub fn token(&self, name: &str) -> Option<&[f64]> {
        self.tokens().into_iter().find(|(n, _)| *n == name).map(|(_, v)| v)
    }
}

/// Scratch state for one forward/backward pass, reusable across records so
/// the training loop allocates nothing per step.
#[derive(Debug, Clone)]
pub struct Pass {
    // Forward state.
    pub x: Vec<f64>,
    pub active: [bool; NUM_SLOTS],
    pub h: Vec<f64>,
    pub logit: f64,
    pub p: f64,
    pub loss: f64,
    pub beta: f64,
    /// Gate mix weight α (0.0 when the architecture has no gate).
    pub alpha: f64,
    pub(crate) gate_u: f64,
    pub(crate) g: Vec<f64>,
    pub(crate) s: Vec<f64>,
    pub(crate) r: Vec<f64>,
    pub(crate) user_row: usize,
    pub(crate) item_row: usize,
    pub(crate) slice_rows: Vec<usize>,
    pub(crate) room_rows: Vec<usize>,
    pub(crate) has_g: bool,
    pub(crate) has_s: bool,
    pub(crate) has_r: bool,
    pub(crate) has_gate: bool,
    pub(crate) has_concat: bool,
    // Gradient state.
    pub(crate) dlogit: f64,
    pub(crate) d_w2: Vec<f64>,
    pub(crate) d_b2: f64,
    pub(crate) dz1: Vec<f64>,
    pub(crate) dx: Vec<f64>,
    pub(crate) d_g: Vec<f64>,
    pub(crate) d_s: Vec<f64>,
    pub(crate) d_r: Vec<f64>,
    pub(crate) d_cand: Vec<f64>,
    pub(crate) gs: Vec<f64>,
    pub(crate) d_gate_w: Vec<f64>,
    pub(crate) d_gate_b: f64,
}

impl Pass {
    pub fn new(params: &ModelParams) -> Self {
        let d = params.arch.token_dim;
        let h = params.arch.hidden_dim;
        let x = NUM_SLOTS * d;
        Pass {
            x: vec![0.0; x],
            active: [false; NUM_SLOTS],
            h: vec![0.0; h],
            logit: 0.0,
            p: 0.0,
            loss: 0.0,
            beta: 0.0,
            alpha: 0.0,
            gate_u: 0.0,
            g: vec![0.0; d],
            s: vec![0.0; d],
            r: vec![0.0; d],
            user_row: 0,
            item_row: 0,
            slice_rows: Vec::with_capacity(params.arch.levels),
            room_rows: Vec::with_capacity(params.arch.levels),
            has_g: false,
            has_s: false,
            has_r: false,
            has_gate: false,
            has_concat: false,
            dlogit: 0.0,
            d_w2: vec![0.0; h],
            d_b2: 0.0,
            dz1: vec![0.0; h],
            dx: vec![0.0; x],
            d_g: vec![0.0; d],
            d_s: vec![0.0; d],
            d_r: vec![0.0; d],
            d_cand: vec![0.0; d],
            gs: vec![0.0; 2 * d],
            d_gate_w: vec![0.0; d],
            d_gate_b: 0.0,
        }
    }

    /// The item-ID embedding `g` resolved by the last forward pass (zeros
    /// when the architecture does not read it). The pre-step value is the
    /// detached alignment target of the aligned late-fusion variant.
    pub fn item_embedding(&self) -> &[f64] {
        &self.g
    }

    fn reset(&mut self) {
        self.x.iter_mut().for_each(|v| *v = 0.0);
        self.dx.iter_mut().for_each(|v| *v = 0.0);
        self.d_g.iter_mut().for_each(|v| *v = 0.0);
        self.d_s.iter_mut().for_each(|v| *v = 0.0);
        self.d_r.iter_mut().for_each(|v| *v = 0.0);
        self.d_gate_w.iter_mut().for_each(|v| *v = 0.0);
        self.active = [false; NUM_SLOTS];
        self.alpha = 0.0;
        self.gate_u = 0.0;
        self.has_g = false;
        self.has_s = false;
        self.has_r = false;
        self.has_gate = false;
        self.has_concat = false;
        self.dlogit = 0.0;
        self.d_b2 = 0.0;
        self.d_gate_b = 0.0;
        self.loss = 0.0;
    }
}

/// Parameter segments in canonical (flat-index) order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Seg {
    User,
    Item,
    Slice(usize),
    Room(usize),
    GateW,
    GateB,
    WConcat,
    W1,
    B1,
    W2,
    B2,
}

/// All trainable parameters of the ranker.
///
/// One parameter shape serves every candidate architecture: components an
/// architecture does not read (item table under Fluid, gate outside the
/// gated variants, `W_concat` outside concat) simply keep their values, so
/// checkpoints stay interchangeable across warmup stages.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub(crate) arch: ArchConfig,
    pub(crate) user_table: Vec<f32>,
    pub(crate) item_table: Vec<f32>,
    pub(crate) slice_tables: EmbeddingTableSet,
    /// `None` under the shared-table ablation: room lookups then read (and
    /// train) the slice tables through the same storage.
    pub(crate) room_tables: Option<EmbeddingTableSet>,
    pub(crate) gate_w: Vec<f32>,
    pub(crate) gate_b: f32,
    /// `token_dim × 2·token_dim`, row-major; maps `[g‖s]` to one token.
    pub(crate) w_concat: Vec<f32>,
    /// `hidden_dim × 4·token_dim`, row-major.
    pub(crate) w1: Vec<f32>,
    pub(crate) b1: Vec<f32>,
    pub(crate) w2: Vec<f32>,
    pub(crate) b2: f32,
}

impl ModelParams {
    /// Fresh parameters: embedding tables i.i.d. uniform `±init_scale`,
    /// dense layers uniform `±1/√fan_in`, gate and biases zero (a zero
    /// gate means α = ½ exactly at initialization). Each component draws
    /// from its own derived seed, so geometry changes in one component
    /// leave the others' values untouched.
    pub fn new(arch: ArchConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let d = arch.token_dim;
        let x = NUM_SLOTS * d;
        let h = arch.hidden_dim;

        let mut user_table = vec![0.0f32; arch.user_rows * d];
        fill_uniform(&mut user_table, arch.init_scale, sub_seed(seed, SEED_USER));
        let mut item_table = vec![0.0f32; arch.item_rows * d];
        fill_uniform(&mut item_table, arch.init_scale, sub_seed(seed, SEED_ITEM));

        let slice_tables = EmbeddingTableSet::make_tables(
            arch.table_scheme,
            arch.levels,
            arch.codebook_size,
            arch.per_level_dim(),
            arch.max_rows,
            arch.init_scale,
            sub_seed(seed, SEED_SLICE),
        )?;
        let room_tables = if arch.shared_tables {
            None
        } else {
            Some(EmbeddingTableSet::make_tables(
                arch.table_scheme,
                arch.levels,
                arch.codebook_size,
                arch.per_level_dim(),
                arch.max_rows,
                arch.init_scale,
                sub_seed(seed, SEED_ROOM),
            )?)
        };

        let mut w_concat = vec![0.0f32; d * 2 * d];
        fill_uniform(
            &mut w_concat,
            1.0 / ((2 * d) as f32).sqrt(),
            sub_seed(seed, SEED_CONCAT),
        );

        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, SEED_BACKBONE));
        let mut w1 = vec![0.0f32; h * x];
        let s1 = 1.0 / (x as f32).sqrt();
        for w in w1.iter_mut() {
            *w = (rng.random::<f32>() * 2.0 - 1.0) * s1;
        }
        let mut w2 = vec![0.0f32; h];
        let s2 = 1.0 / (h as f32).sqrt();
        for w in w2.iter_mut() {
            *w = (rng.random::<f32>() * 2.0 - 1.0) * s2;
        }

        Ok(ModelParams {
            arch,
            user_table,
            item_table,
            slice_tables,
            room_tables,
            gate_w: vec![0.0; d],
            gate_b: 0.0,
            w_concat,
            w1,
            b1: vec![0.0; h],
            w2,
            b2: 0.0,
        })
    }

    pub fn arch_config(&self) -> &ArchConfig {
        &self.arch
    }

    /// Hashed row of a user ID.
    pub fn user_row_index(&self, user_id: u64) -> usize {
        (splitmix64(user_id) % self.arch.user_rows as u64) as usize
    }

    /// Hashed row of an item ID.
    pub fn item_row_index(&self, item_id: u64) -> usize {
        (splitmix64(item_id) % self.arch.item_rows as u64) as usize
    }

    pub fn user_table(&self) -> &[f32] {
        &self.user_table
    }

    pub fn item_table(&self) -> &[f32] {
        &self.item_table
    }

    /// Mutable item-ID table (e.g. to warm-start from an external source).
    pub fn item_table_mut(&mut self) -> &mut [f32] {
        &mut self.item_table
    }

    /// One row of the item-ID table.
    pub fn item_row(&self, row: usize) -> &[f32] {
        let d = self.arch.token_dim;
        &self.item_table[row * d..(row + 1) * d]
    }

    pub fn slice_table_set(&self) -> &EmbeddingTableSet {
        &self.slice_tables
    }

    /// The table set answering room lookups (the slice set when shared).
    pub fn room_table_set(&self) -> &EmbeddingTableSet {
        self.room_tables.as_ref().unwrap_or(&self.slice_tables)
    }

    pub fn room_tables_are_shared(&self) -> bool {
        self.room_tables.is_none()
    }

    /// Copies every component except the slice/room code tables from
    /// another model: user and item tables, gate, concat projection, and
    /// backbone. Used to rebuild a warm model under a different code-table
    /// scheme. The copied components' geometry must match.
    pub fn adopt_non_code_components(&mut self, other: &ModelParams) -> Result<()> {
        if self.arch.token_dim != other.arch.token_dim
            || self.arch.hidden_dim != other.arch.hidden_dim
            || self.arch.user_rows != other.arch.user_rows
            || self.arch.item_rows != other.arch.item_rows
        {
            return Err(Error::Config(
                "component adoption requires matching token, hidden, and ID-table geometry"
                    .into(),
            ));
        }
        self.user_table.copy_from_slice(&other.user_table);
        self.item_table.copy_from_slice(&other.item_table);
        self.gate_w.copy_from_slice(&other.gate_w);
        self.gate_b = other.gate_b;
        self.w_concat.copy_from_slice(&other.w_concat);
        self.w1.copy_from_slice(&other.w1);
        self.b1.copy_from_slice(&other.b1);
        self.w2.copy_from_slice(&other.w2);
        self.b2 = other.b2;
        Ok(())
    }

    /// Overwrites the room tables with a bitwise copy of the slice tables
    /// (the warm hand-off between late-fusion and room-token training).
    pub fn copy_slice_to_room(&mut self) -> Result<()> {
        match &mut self.room_tables {
            None => Err(Error::Config(
                "shared-table configuration has no separate room tables to copy into".into(),
            )),
            Some(rt) => {
                for l in 0..self.arch.levels {
                    rt.table_mut(l).copy_from_slice(self.slice_tables.table(l));
                }
                Ok(())
            }
        }
    }

    /// Assembles the named token set for one record (the model input
    /// before the backbone).
    pub fn assemble_tokens(
        &self,
        arch: &CandidateArch,
        inputs: &RecordInputs,
        beta: f64,
    ) -> Result<TokenSet> {
        let mut pass = Pass::new(self);
        self.forward_into(arch, inputs, beta, &mut pass)?;
        let cand_name = match arch {
            CandidateArch::UserOnly => None,
            CandidateArch::IdOnly | CandidateArch::IdSliceRoom => Some("item_id"),
            CandidateArch::Fusion(f) => match f.variant {
                FusionVariant::LateIndependent | FusionVariant::LateAligned => Some("item_id"),
                FusionVariant::Fluid => None,
                _ => Some("candidate"),
            },
        };
        Ok(TokenSet {
            x: pass.x.clone(),
            active: pass.active,
            beta,
            token_dim: self.arch.token_dim,
            names: [Some("user"), cand_name, Some("slice"), Some("room")],
        })
    }

    /// Pure backbone evaluation of an assembled token set.
    pub fn forward(&self, tokens: &TokenSet) -> f64 {
        let d = self.arch.token_dim;
        let x_dim = NUM_SLOTS * d;
        let mut logit = f64::from(self.b2);
        for j in 0..self.arch.hidden_dim {
            let mut acc = f64::from(self.b1[j]);
            let w_row = &self.w1[j * x_dim..(j + 1) * x_dim];
            for slot in 0..NUM_SLOTS {
                if tokens.active[slot] {
                    for i in slot * d..(slot + 1) * d {
                        acc += f64::from(w_row[i]) * tokens.x[i];
                    }
                }
            }
            logit += f64::from(self.w2[j]) * acc.tanh();
        }
        sigmoid(logit)
    }

    /// Predicted click probability for one record.
    pub fn predict(&self, arch: &CandidateArch, inputs: &RecordInputs, beta: f64) -> Result<f64> {
        let mut pass = Pass::new(self);
        self.forward_into(arch, inputs, beta, &mut pass)?;
        Ok(pass.p)
    }

    /// Forward pass into reusable scratch: token assembly, hidden layer,
    /// prediction. Fills activations only; gradient fields are untouched
    /// apart from being cleared.
    pub fn forward_into(
        &self,
        arch: &CandidateArch,
        inputs: &RecordInputs,
        beta: f64,
        pass: &mut Pass,
    ) -> Result<()> {
        if !(0.0..=1.0).contains(&beta) {
            return Err(Error::Config(format!("beta must lie in [0, 1], got {beta}")));
        }
        if inputs.label > 1 {
            return Err(Error::Data(format!("label must be 0 or 1, got {}", inputs.label)));
        }
        let d = self.arch.token_dim;
        pass.reset();
        pass.beta = beta;

        // User token (always present).
        pass.user_row = self.user_row_index(inputs.user_id);
        let u_row = &self.user_table[pass.user_row * d..(pass.user_row + 1) * d];
        for (i, &v) in u_row.iter().enumerate() {
            pass.x[SLOT_USER * d + i] = f64::from(v);
        }
        pass.active[SLOT_USER] = true;

        // Resolve the embeddings this architecture reads.
        if arch.uses_item_id() {
            pass.item_row = self.item_row_index(inputs.item_id);
            let row = self.item_row(pass.item_row);
            for (i, &v) in row.iter().enumerate() {
                pass.g[i] = f64::from(v);
            }
            pass.has_g = true;
        }
        if arch.uses_slice() {
            self.slice_tables
                .rows_for_codewords(inputs.slice_code, &mut pass.slice_rows)?;
            gather_rows(&self.slice_tables, &pass.slice_rows, &mut pass.s);
            pass.has_s = true;
        }
        if arch.uses_room() {
            let code = inputs.room_code.ok_or_else(|| {
                Error::Data("architecture requires a room code but the record carries none".into())
            })?;
            let tables = self.room_table_set();
            tables.rows_for_codewords(code, &mut pass.room_rows)?;
            gather_rows(tables, &pass.room_rows, &mut pass.r);
            pass.has_r = true;
        }

        // Candidate-side slots.
        match arch {
            CandidateArch::UserOnly => {}
            CandidateArch::IdOnly => {
                for i in 0..d {
                    pass.x[SLOT_CAND * d + i] = beta * pass.g[i];
                }
                pass.active[SLOT_CAND] = true;
            }
            CandidateArch::IdSliceRoom => {
                for i in 0..d {
                    pass.x[SLOT_CAND * d + i] = beta * pass.g[i];
                    pass.x[SLOT_SLICE * d + i] = pass.s[i];
                    pass.x[SLOT_ROOM * d + i] = pass.r[i];
                }
                pass.active[SLOT_CAND] = true;
                pass.active[SLOT_SLICE] = true;
                pass.active[SLOT_ROOM] = true;
            }
            CandidateArch::Fusion(f) => match f.variant {
                FusionVariant::EarlyReplace => {
                    for i in 0..d {
                        pass.x[SLOT_CAND * d + i] = pass.s[i];
                    }
                    pass.active[SLOT_CAND] = true;
                }
                FusionVariant::EarlyConcat => {
                    pass.has_concat = true;
                    for i in 0..d {
                        pass.gs[i] = pass.g[i];
                        pass.gs[d + i] = pass.s[i];
                    }
                    for k in 0..d {
                        let w_row = &self.w_concat[k * 2 * d..(k + 1) * 2 * d];
                        let mut acc = 0.0;
                        for i in 0..2 * d {
                            acc += f64::from(w_row[i]) * pass.gs[i];
                        }
                        pass.x[SLOT_CAND * d + k] = acc;
                    }
                    pass.active[SLOT_CAND] = true;
                }
                FusionVariant::EarlyGateLearnable | FusionVariant::EarlyGateFeature => {
                    pass.has_gate = true;
                    let pre = if f.variant == FusionVariant::EarlyGateLearnable {
                        let mut acc = f64::from(self.gate_b);
                        for i in 0..d {
                            acc += f64::from(self.gate_w[i]) * pass.g[i];
                        }
                        acc
                    } else {
                        let u = match f.gate_feature {
                            GateFeature::IdEmbeddingNorm => {
                                pass.g.iter().map(|v| v * v).sum::<f64>().sqrt()
                            }
                            GateFeature::ExposureCount => (inputs.exposure as f64).ln_1p(),
                        };
                        pass.gate_u = u;
                        f64::from(self.gate_b) + f64::from(self.gate_w[0]) * u
                    };
                    pass.alpha = sigmoid(pre);
                    for i in 0..d {
                        pass.x[SLOT_CAND * d + i] =
                            pass.alpha * beta * pass.g[i] + (1.0 - pass.alpha) * pass.s[i];
                    }
                    pass.active[SLOT_CAND] = true;
                }
                FusionVariant::LateIndependent | FusionVariant::LateAligned => {
                    for i in 0..d {
                        pass.x[SLOT_CAND * d + i] = beta * pass.g[i];
                        pass.x[SLOT_SLICE * d + i] = pass.s[i];
                    }
                    pass.active[SLOT_CAND] = true;
                    pass.active[SLOT_SLICE] = true;
                }
                FusionVariant::Fluid => {
                    for i in 0..d {
                        pass.x[SLOT_SLICE * d + i] = pass.s[i];
                        pass.x[SLOT_ROOM * d + i] = pass.r[i];
                    }
                    pass.active[SLOT_SLICE] = true;
                    pass.active[SLOT_ROOM] = true;
                }
            },
        }

        // Backbone: skip inactive slots — their inputs are exactly zero,
        // so the result is identical, just cheaper.
        let x_dim = NUM_SLOTS * d;
        for j in 0..self.arch.hidden_dim {
            let mut acc = f64::from(self.b1[j]);
            let w_row = &self.w1[j * x_dim..(j + 1) * x_dim];
            for slot in 0..NUM_SLOTS {
                if pass.active[slot] {
                    for i in slot * d..(slot + 1) * d {
                        acc += f64::from(w_row[i]) * pass.x[i];
                    }
                }
            }
            pass.h[j] = acc.tanh();
        }
        let mut logit = f64::from(self.b2);
        for j in 0..self.arch.hidden_dim {
            logit += f64::from(self.w2[j]) * pass.h[j];
        }
        pass.logit = logit;
        pass.p = sigmoid(logit);
        Ok(())
    }

    /// Forward pass plus the training loss (no gradients).
    ///
    /// `align_target`: detached target for the alignment penalty. The
    /// aligned variant's penalty is `λ‖s − stopgrad(g)‖²` — its training
    /// step differentiates the loss with the target held constant at the
    /// pre-step value of `g`. Passing that captured value makes this
    /// function exactly the one whose gradient the update takes (which is
    /// what a finite-difference probe must difference); passing `None`
    /// reads the live `g`, which changes nothing about the loss *value*,
    /// only its dependence on the item table.
    pub fn loss_into(
        &self,
        arch: &CandidateArch,
        inputs: &RecordInputs,
        beta: f64,
        align_target: Option<&[f64]>,
        pass: &mut Pass,
    ) -> Result<f64> {
        self.forward_into(arch, inputs, beta, pass)?;
        let (bce, _) = bce_loss_grad(pass.p, f64::from(inputs.label));
        pass.loss = bce + self.alignment_loss(arch, pass, align_target);
        Ok(pass.loss)
    }

    fn alignment_loss(
        &self,
        arch: &CandidateArch,
        pass: &Pass,
        align_target: Option<&[f64]>,
    ) -> f64 {
        if let CandidateArch::Fusion(f) = arch {
            if f.variant == FusionVariant::LateAligned {
                let target = align_target.unwrap_or(&pass.g);
                let mut acc = 0.0;
                for i in 0..self.arch.token_dim {
                    let diff = pass.s[i] - target[i];
                    acc += diff * diff;
                }
                return f.alignment_weight * acc;
            }
        }
        0.0
    }

    /// Forward plus exact gradients for every parameter on the active
    /// path, left in `pass`. Returns the training loss.
    pub fn backward_into(
        &self,
        arch: &CandidateArch,
        inputs: &RecordInputs,
        beta: f64,
        pass: &mut Pass,
    ) -> Result<f64> {
        self.forward_into(arch, inputs, beta, pass)?;
        let d = self.arch.token_dim;
        let x_dim = NUM_SLOTS * d;
        let y = f64::from(inputs.label);
        let (bce, dlogit) = bce_loss_grad(pass.p, y);
        pass.loss = bce + self.alignment_loss(arch, pass, None);
        pass.dlogit = dlogit;

        // Output layer.
        pass.d_b2 = dlogit;
        for j in 0..self.arch.hidden_dim {
            pass.d_w2[j] = dlogit * pass.h[j];
            pass.dz1[j] = dlogit * f64::from(self.w2[j]) * (1.0 - pass.h[j] * pass.h[j]);
        }

        // Input gradient over active slots (dW1 and db1 are implied by
        // dz1 ⊗ x and dz1; see `for_each_w1_grad`).
        for j in 0..self.arch.hidden_dim {
            let dz = pass.dz1[j];
            let w_row = &self.w1[j * x_dim..(j + 1) * x_dim];
            for slot in 0..NUM_SLOTS {
                if pass.active[slot] {
                    for i in slot * d..(slot + 1) * d {
                        pass.dx[i] += dz * f64::from(w_row[i]);
                    }
                }
            }
        }

        // Candidate-side chain rule.
        match arch {
            CandidateArch::UserOnly => {}
            CandidateArch::IdOnly => {
                for i in 0..d {
                    pass.d_g[i] += beta * pass.dx[SLOT_CAND * d + i];
                }
            }
            CandidateArch::IdSliceRoom => {
                for i in 0..d {
                    pass.d_g[i] += beta * pass.dx[SLOT_CAND * d + i];
                }
            }
            CandidateArch::Fusion(f) => match f.variant {
                FusionVariant::EarlyReplace => {
                    for i in 0..d {
                        pass.d_s[i] += pass.dx[SLOT_CAND * d + i];
                    }
                }
                FusionVariant::EarlyConcat => {
                    for k in 0..d {
                        pass.d_cand[k] = pass.dx[SLOT_CAND * d + k];
                    }
                    for i in 0..2 * d {
                        let mut acc = 0.0;
                        for k in 0..d {
                            acc += pass.d_cand[k] * f64::from(self.w_concat[k * 2 * d + i]);
                        }
                        if i < d {
                            pass.d_g[i] += acc;
                        } else {
                            pass.d_s[i - d] += acc;
                        }
                    }
                }
                FusionVariant::EarlyGateLearnable | FusionVariant::EarlyGateFeature => {
                    let alpha = pass.alpha;
                    let mut d_alpha = 0.0;
                    for i in 0..d {
                        let dc = pass.dx[SLOT_CAND * d + i];
                        d_alpha += dc * (beta * pass.g[i] - pass.s[i]);
                        pass.d_g[i] += alpha * beta * dc;
                        pass.d_s[i] += (1.0 - alpha) * dc;
                    }
                    let d_pre = d_alpha * alpha * (1.0 - alpha);
                    pass.d_gate_b = d_pre;
                    if f.variant == FusionVariant::EarlyGateLearnable {
                        for i in 0..d {
                            pass.d_gate_w[i] = d_pre * pass.g[i];
                            pass.d_g[i] += d_pre * f64::from(self.gate_w[i]);
                        }
                    } else {
                        pass.d_gate_w[0] = d_pre * pass.gate_u;
                        if f.gate_feature == GateFeature::IdEmbeddingNorm && pass.gate_u > 0.0 {
                            let coeff = d_pre * f64::from(self.gate_w[0]) / pass.gate_u;
                            for i in 0..d {
                                pass.d_g[i] += coeff * pass.g[i];
                            }
                        }
                    }
                }
                FusionVariant::LateIndependent | FusionVariant::LateAligned => {
                    for i in 0..d {
                        pass.d_g[i] += beta * pass.dx[SLOT_CAND * d + i];
                    }
                }
                FusionVariant::Fluid => {}
            },
        }
        if pass.active[SLOT_SLICE] {
            for i in 0..d {
                pass.d_s[i] += pass.dx[SLOT_SLICE * d + i];
            }
        }
        if pass.active[SLOT_ROOM] {
            for i in 0..d {
                pass.d_r[i] += pass.dx[SLOT_ROOM * d + i];
            }
        }
        // Alignment pulls s toward a detached copy of g: gradient reaches
        // s only.
        if let CandidateArch::Fusion(f) = arch {
            if f.variant == FusionVariant::LateAligned {
                for i in 0..d {
                    pass.d_s[i] += 2.0 * f.alignment_weight * (pass.s[i] - pass.g[i]);
                }
            }
        }
        Ok(pass.loss)
    }

    /// One plain-SGD step from a completed backward pass. `freeze_id`
    /// skips the item-ID table update (β phase-out with a frozen ID
    /// tower). Every write computes `f32((f64)w − lr·grad)` with the same
    /// per-scalar gradient value as [`dense_gradient`], so a fused step
    /// and a dense step agree bitwise.
    pub fn apply_sgd(&mut self, pass: &Pass, lr: f64, freeze_id: bool) {
        let d = self.arch.token_dim;
        let dl = self.arch.per_level_dim();
        let x_dim = NUM_SLOTS * d;

        let u_row = &mut self.user_table[pass.user_row * d..(pass.user_row + 1) * d];
        update_row(u_row, &pass.dx[SLOT_USER * d..(SLOT_USER + 1) * d], lr);

        if pass.has_g && !freeze_id {
            let row = &mut self.item_table[pass.item_row * d..(pass.item_row + 1) * d];
            update_row(row, &pass.d_g, lr);
        }

        let shared = self.room_tables.is_none();
        for l in 0..self.arch.levels {
            let collide = pass.has_s
                && pass.has_r
                && shared
                && pass.slice_rows[l] == pass.room_rows[l];
            if collide {
                // The slice and room lookups hit one storage row; fold the
                // two gradients into a single update so the step matches
                // the summed dense gradient exactly.
                let row = self.slice_tables.row_mut(l, pass.slice_rows[l]);
                for (k, w) in row.iter_mut().enumerate() {
                    let grad = pass.d_s[l * dl + k] + pass.d_r[l * dl + k];
                    *w = (f64::from(*w) - lr * grad) as f32;
                }
                continue;
            }
            if pass.has_s {
                let row = self.slice_tables.row_mut(l, pass.slice_rows[l]);
                update_row(row, &pass.d_s[l * dl..(l + 1) * dl], lr);
            }
            if pass.has_r {
                let tables = match &mut self.room_tables {
                    Some(t) => t,
                    None => &mut self.slice_tables,
                };
                let row = tables.row_mut(l, pass.room_rows[l]);
                update_row(row, &pass.d_r[l * dl..(l + 1) * dl], lr);
            }
        }

        if pass.has_gate {
            update_row(&mut self.gate_w, &pass.d_gate_w, lr);
            self.gate_b = (f64::from(self.gate_b) - lr * pass.d_gate_b) as f32;
        }
        if pass.has_concat {
            for k in 0..d {
                let w_row = &mut self.w_concat[k * 2 * d..(k + 1) * 2 * d];
                for i in 0..2 * d {
                    let grad = pass.d_cand[k] * pass.gs[i];
                    w_row[i] = (f64::from(w_row[i]) - lr * grad) as f32;
                }
            }
        }

        for j in 0..self.arch.hidden_dim {
            let dz = pass.dz1[j];
            let w_row = &mut self.w1[j * x_dim..(j + 1) * x_dim];
            for slot in 0..NUM_SLOTS {
                if pass.active[slot] {
                    for i in slot * d..(slot + 1) * d {
                        let grad = dz * pass.x[i];
                        w_row[i] = (f64::from(w_row[i]) - lr * grad) as f32;
                    }
                }
            }
            self.b1[j] = (f64::from(self.b1[j]) - lr * dz) as f32;
            self.w2[j] = (f64::from(self.w2[j]) - lr * pass.d_w2[j]) as f32;
        }
        self.b2 = (f64::from(self.b2) - lr * pass.d_b2) as f32;
    }

    /// Parameter segments in flat-index order, with lengths.
    fn segments(&self) -> Vec<(Seg, usize)> {
        let d = self.arch.token_dim;
        let mut v = vec![
            (Seg::User, self.user_table.len()),
            (Seg::Item, self.item_table.len()),
        ];
        for l in 0..self.arch.levels {
            v.push((Seg::Slice(l), self.slice_tables.table(l).len()));
        }
        if let Some(rt) = &self.room_tables {
            for l in 0..self.arch.levels {
                v.push((Seg::Room(l), rt.table(l).len()));
            }
        }
        v.push((Seg::GateW, d));
        v.push((Seg::GateB, 1));
        v.push((Seg::WConcat, self.w_concat.len()));
        v.push((Seg::W1, self.w1.len()));
        v.push((Seg::B1, self.b1.len()));
        v.push((Seg::W2, self.w2.len()));
        v.push((Seg::B2, 1));
        v
    }

    /// Total number of trainable scalars.
    pub fn param_len(&self) -> usize {
        self.segments().iter().map(|(_, len)| len).sum()
    }

    /// Parameter at a flat index (canonical segment order).
    pub fn param(&self, mut idx: usize) -> f32 {
        for (seg, len) in self.segments() {
            if idx < len {
                return match seg {
                    Seg::User => self.user_table[idx],
                    Seg::Item => self.item_table[idx],
                    Seg::Slice(l) => self.slice_tables.table(l)[idx],
                    Seg::Room(l) => self.room_tables.as_ref().unwrap().table(l)[idx],
                    Seg::GateW => self.gate_w[idx],
                    Seg::GateB => self.gate_b,
                    Seg::WConcat => self.w_concat[idx],
                    Seg::W1 => self.w1[idx],
                    Seg::B1 => self.b1[idx],
                    Seg::W2 => self.w2[idx],
                    Seg::B2 => self.b2,
                };
            }
            idx -= len;
        }
        panic!("parameter index out of range");
    }

    /// Overwrites the parameter at a flat index.
    pub fn set_param(&mut self, mut idx: usize, value: f32) {
        for (seg, len) in self.segments() {
            if idx < len {
                match seg {
                    Seg::User => self.user_table[idx] = value,
                    Seg::Item => self.item_table[idx] = value,
                    Seg::Slice(l) => self.slice_tables.table_mut(l)[idx] = value,
                    Seg::Room(l) => self.room_tables.as_mut().unwrap().table_mut(l)[idx] = value,
                    Seg::GateW => self.gate_w[idx] = value,
                    Seg::GateB => self.gate_b = value,
                    Seg::WConcat => self.w_concat[idx] = value,
                    Seg::W1 => self.w1[idx] = value,
                    Seg::B1 => self.b1[idx] = value,
                    Seg::W2 => self.w2[idx] = value,
                    Seg::B2 => self.b2 = value,
                }
                return;
            }
            idx -= len;
        }
        panic!("parameter index out of range");
    }

    /// Expands a completed backward pass into the full flat gradient
    /// vector (zeros off the active path), aligned with [`Self::param`].
    pub fn dense_gradient(&self, pass: &Pass) -> Vec<f64> {
        let d = self.arch.token_dim;
        let dl = self.arch.per_level_dim();
        let x_dim = NUM_SLOTS * d;
        let shared = self.room_tables.is_none();
        let mut grad = vec![0.0f64; self.param_len()];
        let mut off = 0;
        for (seg, len) in self.segments() {
            match seg {
                Seg::User => {
                    let base = off + pass.user_row * d;
                    for i in 0..d {
                        grad[base + i] += pass.dx[SLOT_USER * d + i];
                    }
                }
                Seg::Item => {
                    if pass.has_g {
                        let base = off + pass.item_row * d;
                        for i in 0..d {
                            grad[base + i] += pass.d_g[i];
                        }
                    }
                }
                Seg::Slice(l) => {
                    if pass.has_s {
                        let base = off + pass.slice_rows[l] * dl;
                        for k in 0..dl {
                            grad[base + k] += pass.d_s[l * dl + k];
                        }
                    }
                    if pass.has_r && shared {
                        let base = off + pass.room_rows[l] * dl;
                        for k in 0..dl {
                            grad[base + k] += pass.d_r[l * dl + k];
                        }
                    }
                }
                Seg::Room(l) => {
                    if pass.has_r {
                        let base = off + pass.room_rows[l] * dl;
                        for k in 0..dl {
                            grad[base + k] += pass.d_r[l * dl + k];
                        }
                    }
                }
                Seg::GateW => {
                    if pass.has_gate {
                        for i in 0..d {
                            grad[off + i] += pass.d_gate_w[i];
                        }
                    }
                }
                Seg::GateB => {
                    if pass.has_gate {
                        grad[off] += pass.d_gate_b;
                    }
                }
                Seg::WConcat => {
                    if pass.has_concat {
                        for k in 0..d {
                            for i in 0..2 * d {
                                grad[off + k * 2 * d + i] += pass.d_cand[k] * pass.gs[i];
                            }
                        }
                    }
                }
                Seg::W1 => {
                    for j in 0..self.arch.hidden_dim {
                        let dz = pass.dz1[j];
                        for slot in 0..NUM_SLOTS {
                            if pass.active[slot] {
                                for i in slot * d..(slot + 1) * d {
                                    grad[off + j * x_dim + i] += dz * pass.x[i];
                                }
                            }
                        }
                    }
                }
                Seg::B1 => {
                    for j in 0..self.arch.hidden_dim {
                        grad[off + j] += pass.dz1[j];
                    }
                }
                Seg::W2 => {
                    for j in 0..self.arch.hidden_dim {
                        grad[off + j] += pass.d_w2[j];
                    }
                }
                Seg::B2 => {
                    grad[off] += pass.d_b2;
                }
            }
            off += len;
        }
        grad
    }

    /// Names of parameter components whose stored bits differ between two
    /// models of identical geometry: any of `user_table`, `item_table`,
    /// `slice_tables`, `room_tables`, `gate`, `w_concat`, `backbone`.
    pub fn diff_components(&self, other: &ModelParams) -> Vec<&'static str> {
        let mut out = Vec::new();
        if !bits_eq(&self.user_table, &other.user_table) {
            out.push("user_table");
        }
        if !bits_eq(&self.item_table, &other.item_table) {
            out.push("item_table");
        }
        let slice_eq = (0..self.arch.levels.min(other.arch.levels))
            .all(|l| bits_eq(self.slice_tables.table(l), other.slice_tables.table(l)))
            && self.arch.levels == other.arch.levels;
        if !slice_eq {
            out.push("slice_tables");
        }
        let room_eq = match (&self.room_tables, &other.room_tables) {
            (None, None) => true,
            (Some(a), Some(b)) => (0..self.arch.levels.min(other.arch.levels))
                .all(|l| bits_eq(a.table(l), b.table(l)))
                && self.arch.levels == other.arch.levels,
            _ => false,
        };
        if !room_eq {
            out.push("room_tables");
        }
        if !bits_eq(&self.gate_w, &other.gate_w)
            || self.gate_b.to_bits() != other.gate_b.to_bits()
        {
            out.push("gate");
        }
        if !bits_eq(&self.w_concat, &other.w_concat) {
            out.push("w_concat");
        }
        if !bits_eq(&self.w1, &other.w1)
            || !bits_eq(&self.b1, &other.b1)
            || !bits_eq(&self.w2, &other.w2)
            || self.b2.to_bits() != other.b2.to_bits()
        {
            out.push("backbone");
        }
        out
    }
}

fn bits_eq(a: &[f32], b: &[f32]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn update_row(weights: &mut [f32], grad: &[f64], lr: f64) {
    for (w, &gi) in weights.iter_mut().zip(grad) {
        *w = (f64::from(*w) - lr * gi) as f32;
    }
}

fn gather_rows(tables: &EmbeddingTableSet, rows: &[usize], out: &mut [f64]) {
    let dl = tables.per_level_dim();
    for (l, &row) in rows.iter().enumerate() {
        let src = tables.row(l, row);
        for (k, &v) in src.iter().enumerate() {
            out[l * dl + k] = f64::from(v);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lucid::TableScheme;
    use crate::ranker::FusionConfig;
    use rand::RngCore;

    /// Small geometry for gradient checks: every table level row-counted
    /// small, top prefix levels capped so the hashed path is exercised.
    fn small_arch(shared: bool) -> ArchConfig {
        ArchConfig {
            token_dim: 16,
            hidden_dim: 16,
            user_rows: 8,
            item_rows: 8,
            levels: 4,
            codebook_size: 4,
            table_scheme: TableScheme::PrefixNgram,
            max_rows: 32,
            shared_tables: shared,
            init_scale: 0.1,
        }
    }

    fn all_archs() -> Vec<CandidateArch> {
        let mut v = vec![
            CandidateArch::UserOnly,
            CandidateArch::IdOnly,
            CandidateArch::IdSliceRoom,
        ];
        for variant in [
            FusionVariant::EarlyReplace,
            FusionVariant::EarlyConcat,
            FusionVariant::EarlyGateLearnable,
            FusionVariant::EarlyGateFeature,
            FusionVariant::LateIndependent,
            FusionVariant::LateAligned,
            FusionVariant::Fluid,
        ] {
            v.push(CandidateArch::fusion(variant));
        }
        // Cover the exposure-count gate too.
        v.push(CandidateArch::Fusion(FusionConfig {
            variant: FusionVariant::EarlyGateFeature,
            alignment_weight: 0.1,
            gate_feature: GateFeature::ExposureCount,
        }));
        v
    }

    fn random_params(arch: ArchConfig, rng: &mut ChaCha8Rng, scale: f32) -> ModelParams {
        let mut p = ModelParams::new(arch, rng.next_u64()).unwrap();
        for i in 0..p.param_len() {
            p.set_param(i, (rng.random::<f32>() * 2.0 - 1.0) * scale);
        }
        p
    }

    fn random_code(rng: &mut ChaCha8Rng, levels: usize, n: u32) -> Vec<u32> {
        (0..levels).map(|_| rng.next_u32() % n).collect()
    }

    struct OwnedInputs {
        user_id: u64,
        item_id: u64,
        slice_code: Vec<u32>,
        room_code: Vec<u32>,
        exposure: u64,
        label: u8,
    }

    impl OwnedInputs {
        fn random(rng: &mut ChaCha8Rng, levels: usize, n: u32) -> Self {
            OwnedInputs {
                user_id: rng.next_u64(),
                item_id: rng.next_u64(),
                slice_code: random_code(rng, levels, n),
                room_code: random_code(rng, levels, n),
                exposure: rng.next_u64() % 500,
                label: (rng.next_u32() % 2) as u8,
            }
        }

        fn borrow(&self) -> RecordInputs<'_> {
            RecordInputs {
                user_id: self.user_id,
                item_id: self.item_id,
                slice_code: &self.slice_code,
                room_code: Some(&self.room_code),
                exposure: self.exposure,
                label: self.label,
            }
        }
    }

    /// Central finite difference over every parameter, with the achieved
    /// f32 step in the denominator. Returns the worst relative error.
    ///
    /// The aligned variant's penalty uses a stop-gradient target, so the
    /// function being differenced is the surrogate with the target pinned
    /// to the unperturbed `g` — the exact function whose gradient the
    /// training step applies.
    fn fd_max_rel_err(
        params: &ModelParams,
        arch: &CandidateArch,
        inputs: &RecordInputs,
        beta: f64,
    ) -> f64 {
        let mut pass = Pass::new(params);
        params.backward_into(arch, inputs, beta, &mut pass).unwrap();
        let analytic = params.dense_gradient(&pass);
        let target = pass.item_embedding().to_vec();
        let mut probe = params.clone();
        let mut scratch = Pass::new(params);
        let mut worst = 0.0f64;
        for idx in 0..probe.param_len() {
            let orig = probe.param(idx);
            let plus = orig + 1e-4;
            let minus = orig - 1e-4;
            probe.set_param(idx, plus);
            let loss_plus = probe
                .loss_into(arch, inputs, beta, Some(&target), &mut scratch)
                .unwrap();
            probe.set_param(idx, minus);
            let loss_minus = probe
                .loss_into(arch, inputs, beta, Some(&target), &mut scratch)
                .unwrap();
            probe.set_param(idx, orig);
            let step = f64::from(plus) - f64::from(minus);
            let fd = (loss_plus - loss_minus) / step;
            let a = analytic[idx];
            let rel = (fd - a).abs() / (fd.abs() + a.abs()).max(1e-8);
            if rel > worst {
                worst = rel;
            }
        }
        worst
    }

    #[test]
    fn gradients_match_finite_differences_all_architectures() {
        let mut rng = ChaCha8Rng::seed_from_u64(90);
        let betas = [1.0, 0.37, 0.0];
        for (case, arch) in all_archs().iter().enumerate() {
            for (j, &beta) in betas.iter().enumerate() {
                let shared = (case + j) % 3 == 0;
                let cfg = small_arch(shared);
                let params = random_params(cfg, &mut rng, 0.4);
                let owned = OwnedInputs::random(&mut rng, cfg.levels, cfg.codebook_size);
                let worst = fd_max_rel_err(&params, arch, &owned.borrow(), beta);
                assert!(
                    worst < 1e-4,
                    "arch {arch:?} beta {beta}: worst relative gradient error {worst:.3e}"
                );
            }
        }
    }

    #[test]
    fn fused_sgd_step_matches_dense_gradient_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(91);
        for shared in [false, true] {
            for arch in all_archs() {
                let cfg = small_arch(shared);
                let params = random_params(cfg, &mut rng, 0.4);
                let mut owned = OwnedInputs::random(&mut rng, cfg.levels, cfg.codebook_size);
                // Force slice/room row collisions under sharing.
                owned.room_code = owned.slice_code.clone();
                let inputs = owned.borrow();
                let mut pass = Pass::new(&params);
                params.backward_into(&arch, &inputs, 0.7, &mut pass).unwrap();

                let mut fused = params.clone();
                fused.apply_sgd(&pass, 0.37, false);

                let dense = params.dense_gradient(&pass);
                let mut manual = params.clone();
                for (idx, &g) in dense.iter().enumerate() {
                    let w = manual.param(idx);
                    manual.set_param(idx, (f64::from(w) - 0.37 * g) as f32);
                }
                assert!(
                    fused.diff_components(&manual).is_empty(),
                    "fused and dense updates diverged for {arch:?} shared={shared}"
                );
            }
        }
    }

    #[test]
    fn freeze_id_skips_item_table_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(92);
        let cfg = small_arch(false);
        let params = random_params(cfg, &mut rng, 0.4);
        let owned = OwnedInputs::random(&mut rng, cfg.levels, cfg.codebook_size);
        let arch = CandidateArch::fusion(FusionVariant::LateIndependent);
        let mut pass = Pass::new(&params);
        params.backward_into(&arch, &owned.borrow(), 0.5, &mut pass).unwrap();
        let mut frozen = params.clone();
        frozen.apply_sgd(&pass, 0.1, true);
        assert!(bits_eq(&frozen.item_table, &params.item_table));
        let mut thawed = params.clone();
        thawed.apply_sgd(&pass, 0.1, false);
        assert!(!bits_eq(&thawed.item_table, &params.item_table));
    }

    #[test]
    fn zero_initialized_gate_mixes_evenly() {
        let cfg = small_arch(false);
        let params = ModelParams::new(cfg, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(93);
        let owned = OwnedInputs::random(&mut rng, cfg.levels, cfg.codebook_size);
        let arch = CandidateArch::fusion(FusionVariant::EarlyGateLearnable);
        let mut pass = Pass::new(&params);
        params.forward_into(&arch, &owned.borrow(), 1.0, &mut pass).unwrap();
        assert_eq!(pass.alpha, 0.5);
        let d = cfg.token_dim;
        for i in 0..d {
            let expect = 0.5 * pass.g[i] + 0.5 * pass.s[i];
            assert_eq!(pass.x[SLOT_CAND * d + i], expect);
        }
    }

    #[test]
    fn token_slot_contents_follow_variant_formulas() {
        let mut rng = ChaCha8Rng::seed_from_u64(94);
        let cfg = small_arch(false);
        let params = random_params(cfg, &mut rng, 0.3);
        let owned = OwnedInputs::random(&mut rng, cfg.levels, cfg.codebook_size);
        let inputs = owned.borrow();
        let d = cfg.token_dim;
        let beta = 0.6;

        // Resolve g and s straight from the tables.
        let g_row = params.item_row(params.item_row_index(inputs.item_id));
        let mut slice_rows = Vec::new();
        params
            .slice_table_set()
            .rows_for_codewords(inputs.slice_code, &mut slice_rows)
            .unwrap();
        let mut s = vec![0.0f64; d];
        gather_rows(params.slice_table_set(), &slice_rows, &mut s);
        let mut room_rows = Vec::new();
        params
            .room_table_set()
            .rows_for_codewords(inputs.room_code.unwrap(), &mut room_rows)
            .unwrap();
        let mut r = vec![0.0f64; d];
        gather_rows(params.room_table_set(), &room_rows, &mut r);

        let late = params
            .assemble_tokens(&CandidateArch::fusion(FusionVariant::LateIndependent), &inputs, beta)
            .unwrap();
        for i in 0..d {
            assert_eq!(late.x[SLOT_CAND * d + i], beta * f64::from(g_row[i]));
            assert_eq!(late.x[SLOT_SLICE * d + i], s[i]);
            assert_eq!(late.x[SLOT_ROOM * d + i], 0.0);
        }
        assert_eq!(
            late.tokens().iter().map(|(n, _)| *n).collect::<Vec<_>>(),
            vec!["user", "item_id", "slice"]
        );

        let replace = params
            .assemble_tokens(&CandidateArch::fusion(FusionVariant::EarlyReplace), &inputs, beta)
            .unwrap();
        for i in 0..d {
            assert_eq!(replace.x[SLOT_CAND * d + i], s[i]);
        }
        assert_eq!(
            replace.tokens().iter().map(|(n, _)| *n).collect::<Vec<_>>(),
            vec!["user", "candidate"]
        );

        let fluid = params
            .assemble_tokens(&CandidateArch::fusion(FusionVariant::Fluid), &inputs, beta)
            .unwrap();
        for i in 0..d {
            assert_eq!(fluid.x[SLOT_CAND * d + i], 0.0, "item slot must stay empty");
            assert_eq!(fluid.x[SLOT_SLICE * d + i], s[i]);
            assert_eq!(fluid.x[SLOT_ROOM * d + i], r[i]);
        }
        let fluid_names: Vec<_> = fluid.tokens().iter().map(|(n, _)| *n).collect();
        assert_eq!(fluid_names, vec!["user", "slice", "room"]);
        assert!(fluid.token("item_id").is_none());
        assert!(fluid.token("candidate").is_none());

        let concat = params
            .assemble_tokens(&CandidateArch::fusion(FusionVariant::EarlyConcat), &inputs, beta)
            .unwrap();
        let mut gs = vec![0.0f64; 2 * d];
        for i in 0..d {
            gs[i] = f64::from(g_row[i]);
            gs[d + i] = s[i];
        }
        for k in 0..d {
            let mut acc = 0.0;
            for (i, &v) in gs.iter().enumerate() {
                acc += f64::from(params.w_concat[k * 2 * d + i]) * v;
            }
            assert_eq!(concat.x[SLOT_CAND * d + k], acc);
        }

        let naive = params.assemble_tokens(&CandidateArch::IdSliceRoom, &inputs, beta).unwrap();
        assert_eq!(
            naive.tokens().iter().map(|(n, _)| *n).collect::<Vec<_>>(),
            vec!["user", "item_id", "slice", "room"]
        );
    }

    #[test]
    fn backbone_matches_reference_matrix_arithmetic() {
        let mut rng = ChaCha8Rng::seed_from_u64(95);
        let cfg = small_arch(false);
        let params = random_params(cfg, &mut rng, 0.3);
        let owned = OwnedInputs::random(&mut rng, cfg.levels, cfg.codebook_size);
        let inputs = owned.borrow();
        let arch = CandidateArch::IdSliceRoom; // all slots active
        let tokens = params.assemble_tokens(&arch, &inputs, 1.0).unwrap();

        // Independent reference: dense matrix-vector products over the
        // full concatenated input, no slot skipping.
        let d = cfg.token_dim;
        let x_dim = NUM_SLOTS * d;
        let mut logit = f64::from(params.b2);
        for j in 0..cfg.hidden_dim {
            let mut acc = f64::from(params.b1[j]);
            for i in 0..x_dim {
                acc += f64::from(params.w1[j * x_dim + i]) * tokens.x[i];
            }
            logit += f64::from(params.w2[j]) * acc.tanh();
        }
        let expect = sigmoid(logit);
        assert_eq!(params.forward(&tokens), expect);
        assert_eq!(params.predict(&arch, &inputs, 1.0).unwrap(), expect);
    }

    #[test]
    fn id_free_variants_ignore_the_item_table() {
        let mut rng = ChaCha8Rng::seed_from_u64(96);
        let cfg = small_arch(false);
        let params = random_params(cfg, &mut rng, 0.3);
        let owned = OwnedInputs::random(&mut rng, cfg.levels, cfg.codebook_size);
        let inputs = owned.borrow();
        let mut scrambled = params.clone();
        for w in scrambled.item_table_mut() {
            *w = rng.random::<f32>() * 9.0 - 4.5;
        }
        for arch in [
            CandidateArch::fusion(FusionVariant::Fluid),
            CandidateArch::fusion(FusionVariant::EarlyReplace),
            CandidateArch::UserOnly,
        ] {
            let a = params.predict(&arch, &inputs, 1.0).unwrap();
            let b = scrambled.predict(&arch, &inputs, 1.0).unwrap();
            assert_eq!(a.to_bits(), b.to_bits(), "{arch:?} must not read item rows");
        }
        // Control: an ID-bearing architecture must notice the scramble.
        let a = params.predict(&CandidateArch::IdOnly, &inputs, 1.0).unwrap();
        let b = scrambled.predict(&CandidateArch::IdOnly, &inputs, 1.0).unwrap();
        assert_ne!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn beta_zero_makes_the_id_row_irrelevant() {
        let mut rng = ChaCha8Rng::seed_from_u64(97);
        let cfg = small_arch(false);
        let params = random_params(cfg, &mut rng, 0.3);
        let owned = OwnedInputs::random(&mut rng, cfg.levels, cfg.codebook_size);
        let inputs = owned.borrow();
        let mut scrambled = params.clone();
        for w in scrambled.item_table_mut() {
            *w = rng.random::<f32>() * 9.0 - 4.5;
        }
        let late = CandidateArch::fusion(FusionVariant::LateIndependent);
        let a = params.predict(&late, &inputs, 0.0).unwrap();
        let b = scrambled.predict(&late, &inputs, 0.0).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
        // At β = 1 the same scramble changes the prediction.
        let a1 = params.predict(&late, &inputs, 1.0).unwrap();
        let b1 = scrambled.predict(&late, &inputs, 1.0).unwrap();
        assert_ne!(a1.to_bits(), b1.to_bits());
    }

    #[test]
    fn room_requiring_architectures_reject_missing_room_codes() {
        let cfg = small_arch(false);
        let params = ModelParams::new(cfg, 5).unwrap();
        let owned_code = vec![0u32, 1, 2, 3];
        let inputs = RecordInputs {
            user_id: 1,
            item_id: 2,
            slice_code: &owned_code,
            room_code: None,
            exposure: 0,
            label: 0,
        };
        let fluid = CandidateArch::fusion(FusionVariant::Fluid);
        assert!(matches!(
            params.predict(&fluid, &inputs, 1.0),
            Err(Error::Data(_))
        ));
        assert!(params.predict(&CandidateArch::IdSliceRoom, &inputs, 1.0).is_err());
        // Slice-only architectures accept the same inputs.
        let late = CandidateArch::fusion(FusionVariant::LateIndependent);
        assert!(params.predict(&late, &inputs, 1.0).is_ok());
    }

    #[test]
    fn shared_tables_serve_room_lookups_through_slice_storage() {
        let mut rng = ChaCha8Rng::seed_from_u64(98);
        let cfg = small_arch(true);
        let mut params = random_params(cfg, &mut rng, 0.3);
        assert!(params.room_tables_are_shared());
        let owned = OwnedInputs::random(&mut rng, cfg.levels, cfg.codebook_size);
        let inputs = owned.borrow();
        let fluid = CandidateArch::fusion(FusionVariant::Fluid);
        let before = params.predict(&fluid, &inputs, 1.0).unwrap();
        // Writing through the slice handle must change room lookups.
        let mut rows = Vec::new();
        params
            .room_table_set()
            .rows_for_codewords(inputs.room_code.unwrap(), &mut rows)
            .unwrap();
        params.slice_tables.row_mut(0, rows[0])[0] += 1.0;
        let after = params.predict(&fluid, &inputs, 1.0).unwrap();
        assert_ne!(before.to_bits(), after.to_bits());
        // And the copy hand-off is meaningless when shared.
        assert!(params.copy_slice_to_room().is_err());
    }

    #[test]
    fn copy_slice_to_room_is_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let cfg = small_arch(false);
        let mut params = random_params(cfg, &mut rng, 0.3);
        assert!(!params.diff_components(&params.clone()).iter().any(|_| true));
        params.copy_slice_to_room().unwrap();
        for l in 0..cfg.levels {
            assert!(bits_eq(
                params.slice_table_set().table(l),
                params.room_table_set().table(l)
            ));
        }
    }

    #[test]
    fn untrained_prediction_is_half_with_zero_output_layer() {
        // w2 is random but b1 = b2 = 0 and gate = 0; zero the output
        // weights and every architecture must emit exactly 0.5.
        let cfg = small_arch(false);
        let mut params = ModelParams::new(cfg, 7).unwrap();
        for w in params.w2.iter_mut() {
            *w = 0.0;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(100);
        let owned = OwnedInputs::random(&mut rng, cfg.levels, cfg.codebook_size);
        let inputs = owned.borrow();
        for arch in all_archs() {
            assert_eq!(params.predict(&arch, &inputs, 1.0).unwrap(), 0.5);
        }
    }

    #[test]
    fn loss_at_half_is_ln_two() {
        let cfg = small_arch(false);
        let mut params = ModelParams::new(cfg, 7).unwrap();
        for w in params.w2.iter_mut() {
            *w = 0.0;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(101);
        let owned = OwnedInputs::random(&mut rng, cfg.levels, cfg.codebook_size);
        let mut pass = Pass::new(&params);
        let loss = params
            .loss_into(&CandidateArch::IdOnly, &owned.borrow(), 1.0, None, &mut pass)
            .unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(102);
        let cfg = small_arch(false);
        let params = random_params(cfg, &mut rng, 0.3);
        let owned = OwnedInputs::random(&mut rng, cfg.levels, cfg.codebook_size);
        let mut pass = Pass::new(&params);
        params
            .backward_into(
                &CandidateArch::fusion(FusionVariant::Fluid),
                &owned.borrow(),
                1.0,
                &mut pass,
            )
            .unwrap();
        let mut stepped = params.clone();
        stepped.apply_sgd(&pass, 0.0, false);
        assert!(stepped.diff_components(&params).is_empty());
    }

    #[test]
    fn beta_outside_unit_interval_is_rejected() {
        let cfg = small_arch(false);
        let params = ModelParams::new(cfg, 7).unwrap();
        let code = vec![0u32, 1, 2, 3];
        let inputs = RecordInputs {
            user_id: 1,
            item_id: 2,
            slice_code: &code,
            room_code: Some(&code),
            exposure: 0,
            label: 1,
        };
        assert!(params.predict(&CandidateArch::IdOnly, &inputs, 1.5).is_err());
        assert!(params.predict(&CandidateArch::IdOnly, &inputs, -0.1).is_err());
    }
}
