//! Binary checkpoint serialization for the ranker.
//!
//! Little-endian, magic `FLCK`, explicit format version, then the training
//! state (step, β, learning rate, candidate architecture), the model
//! geometry, and every parameter section with a length prefix. Loading
//! revalidates geometry, section lengths, flag consistency, and finiteness
//! of every value; a round trip restores every `f32` bit-for-bit.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::lucid::{EmbeddingTableSet, TableScheme};
use crate::{Error, Result};

use super::{
    ArchConfig, CandidateArch, FusionConfig, FusionVariant, GateFeature, ModelParams,
};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FLCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// A complete training state: parameters plus the bookkeeping needed to
/// resume or hand off between warmup stages.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    /// Architecture that produced (or will consume) these parameters.
    pub arch: CandidateArch,
    /// Global step count; schedules keep counting across stages.
    pub step: u64,
    /// β in effect when the checkpoint was written.
    pub beta: f64,
    /// Learning rate of the writing run (informational).
    pub learning_rate: f64,
}

impl Checkpoint {
    /// A step-zero checkpoint around freshly initialized parameters.
    pub fn fresh(params: ModelParams, arch: CandidateArch) -> Self {
        Checkpoint { params, arch, step: 0, beta: 1.0, learning_rate: 0.0 }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let ckpt = Self::read_from(&mut r)?;
        let mut probe = [0u8; 1];
        if r.read(&mut probe)? != 0 {
            return Err(Error::Data("checkpoint has trailing bytes".into()));
        }
        Ok(ckpt)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
        w.write_u64::<LittleEndian>(self.step)?;
        w.write_f64::<LittleEndian>(self.beta)?;
        w.write_f64::<LittleEndian>(self.learning_rate)?;
        write_arch(w, &self.arch)?;
        write_geometry(w, &self.params.arch)?;

        write_vec(w, &self.params.user_table)?;
        write_vec(w, &self.params.item_table)?;
        for l in 0..self.params.arch.levels {
            write_vec(w, self.params.slice_tables.table(l))?;
        }
        match &self.params.room_tables {
            Some(rt) => {
                w.write_u8(1)?;
                for l in 0..self.params.arch.levels {
                    write_vec(w, rt.table(l))?;
                }
            }
            None => w.write_u8(0)?,
        }
        write_vec(w, &self.params.gate_w)?;
        w.write_f32::<LittleEndian>(self.params.gate_b)?;
        write_vec(w, &self.params.w_concat)?;
        write_vec(w, &self.params.w1)?;
        write_vec(w, &self.params.b1)?;
        write_vec(w, &self.params.w2)?;
        w.write_f32::<LittleEndian>(self.params.b2)?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Data(format!(
                "bad checkpoint magic {magic:02x?}, expected {CHECKPOINT_MAGIC:02x?}"
            )));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Data(format!(
                "unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}"
            )));
        }
        let step = r.read_u64::<LittleEndian>()?;
        let beta = r.read_f64::<LittleEndian>()?;
        if !(0.0..=1.0).contains(&beta) {
            return Err(Error::Data(format!("checkpoint beta {beta} outside [0, 1]")));
        }
        let learning_rate = r.read_f64::<LittleEndian>()?;
        if !learning_rate.is_finite() || learning_rate < 0.0 {
            return Err(Error::Data("checkpoint learning rate must be finite and ≥ 0".into()));
        }
        let arch = read_arch(r)?;
        let geometry = read_geometry(r)?;
        geometry.validate()?;
        let d = geometry.token_dim;

        let user_table = read_vec(r, Some(geometry.user_rows * d), "user table")?;
        let item_table = read_vec(r, Some(geometry.item_rows * d), "item table")?;
        let per_level_cap =
            geometry.max_rows.max(geometry.codebook_size as usize) * geometry.per_level_dim();
        let mut slice_raw = Vec::with_capacity(geometry.levels);
        for l in 0..geometry.levels {
            let table = read_vec(r, None, "slice table level")?;
            if table.len() > per_level_cap {
                return Err(Error::Data(format!(
                    "slice table level {} exceeds the geometry cap",
                    l + 1
                )));
            }
            slice_raw.push(table);
        }
        let slice_tables = EmbeddingTableSet::from_parts(
            geometry.table_scheme,
            geometry.levels,
            geometry.codebook_size,
            geometry.per_level_dim(),
            geometry.max_rows,
            slice_raw,
        )?;
        let room_present = r.read_u8()?;
        let room_tables = match room_present {
            0 => None,
            1 => {
                let mut room_raw = Vec::with_capacity(geometry.levels);
                for l in 0..geometry.levels {
                    let table = read_vec(r, None, "room table level")?;
                    if table.len() > per_level_cap {
                        return Err(Error::Data(format!(
                            "room table level {} exceeds the geometry cap",
                            l + 1
                        )));
                    }
                    room_raw.push(table);
                }
                Some(EmbeddingTableSet::from_parts(
                    geometry.table_scheme,
                    geometry.levels,
                    geometry.codebook_size,
                    geometry.per_level_dim(),
                    geometry.max_rows,
                    room_raw,
                )?)
            }
            other => {
                return Err(Error::Data(format!("invalid room-table flag {other}")));
            }
        };
        if geometry.shared_tables != room_tables.is_none() {
            return Err(Error::Data(
                "shared-table flag disagrees with the stored room tables".into(),
            ));
        }
        let gate_w = read_vec(r, Some(d), "gate weights")?;
        let gate_b = read_finite_f32(r, "gate bias")?;
        let w_concat = read_vec(r, Some(d * 2 * d), "concat projection")?;
        let x_dim = super::model::NUM_SLOTS * d;
        let w1 = read_vec(r, Some(geometry.hidden_dim * x_dim), "first layer")?;
        let b1 = read_vec(r, Some(geometry.hidden_dim), "first bias")?;
        let w2 = read_vec(r, Some(geometry.hidden_dim), "output weights")?;
        let b2 = read_finite_f32(r, "output bias")?;

        Ok(Checkpoint {
            params: ModelParams {
                arch: geometry,
                user_table,
                item_table,
                slice_tables,
                room_tables,
                gate_w,
                gate_b,
                w_concat,
                w1,
                b1,
                w2,
                b2,
            },
            arch,
            step,
            beta,
            learning_rate,
        })
    }
}

fn write_arch<W: Write>(w: &mut W, arch: &CandidateArch) -> Result<()> {
    match arch {
        CandidateArch::UserOnly => w.write_u8(0)?,
        CandidateArch::IdOnly => w.write_u8(1)?,
        CandidateArch::IdSliceRoom => w.write_u8(2)?,
        CandidateArch::Fusion(f) => {
            w.write_u8(3)?;
            let variant = match f.variant {
                FusionVariant::EarlyReplace => 0u8,
                FusionVariant::EarlyConcat => 1,
                FusionVariant::EarlyGateLearnable => 2,
                FusionVariant::EarlyGateFeature => 3,
                FusionVariant::LateIndependent => 4,
                FusionVariant::LateAligned => 5,
                FusionVariant::Fluid => 6,
            };
            w.write_u8(variant)?;
            w.write_f64::<LittleEndian>(f.alignment_weight)?;
            w.write_u8(match f.gate_feature {
                GateFeature::IdEmbeddingNorm => 0,
                GateFeature::ExposureCount => 1,
            })?;
        }
    }
    Ok(())
}

fn read_arch<R: Read>(r: &mut R) -> Result<CandidateArch> {
    let tag = r.read_u8()?;
    Ok(match tag {
        0 => CandidateArch::UserOnly,
        1 => CandidateArch::IdOnly,
        2 => CandidateArch::IdSliceRoom,
        3 => {
            let variant = match r.read_u8()? {
                0 => FusionVariant::EarlyReplace,
                1 => FusionVariant::EarlyConcat,
                2 => FusionVariant::EarlyGateLearnable,
                3 => FusionVariant::EarlyGateFeature,
                4 => FusionVariant::LateIndependent,
                5 => FusionVariant::LateAligned,
                6 => FusionVariant::Fluid,
                other => {
                    return Err(Error::Data(format!("invalid fusion variant tag {other}")));
                }
            };
            let alignment_weight = r.read_f64::<LittleEndian>()?;
            if !alignment_weight.is_finite() || alignment_weight < 0.0 {
                return Err(Error::Data("alignment weight must be finite and ≥ 0".into()));
            }
            let gate_feature = match r.read_u8()? {
                0 => GateFeature::IdEmbeddingNorm,
                1 => GateFeature::ExposureCount,
                other => {
                    return Err(Error::Data(format!("invalid gate feature tag {other}")));
                }
            };
            CandidateArch::Fusion(FusionConfig { variant, alignment_weight, gate_feature })
        }
        other => return Err(Error::Data(format!("invalid architecture tag {other}"))),
    })
}

fn write_geometry<W: Write>(w: &mut W, a: &ArchConfig) -> Result<()> {
    w.write_u32::<LittleEndian>(a.token_dim as u32)?;
    w.write_u32::<LittleEndian>(a.hidden_dim as u32)?;
    w.write_u64::<LittleEndian>(a.user_rows as u64)?;
    w.write_u64::<LittleEndian>(a.item_rows as u64)?;
    w.write_u32::<LittleEndian>(a.levels as u32)?;
    w.write_u32::<LittleEndian>(a.codebook_size)?;
    w.write_u8(match a.table_scheme {
        TableScheme::PrefixNgram => 0,
        TableScheme::LevelWise => 1,
    })?;
    w.write_u64::<LittleEndian>(a.max_rows as u64)?;
    w.write_u8(u8::from(a.shared_tables))?;
    w.write_f32::<LittleEndian>(a.init_scale)?;
    Ok(())
}

fn read_geometry<R: Read>(r: &mut R) -> Result<ArchConfig> {
    let token_dim = r.read_u32::<LittleEndian>()? as usize;
    let hidden_dim = r.read_u32::<LittleEndian>()? as usize;
    let user_rows = r.read_u64::<LittleEndian>()? as usize;
    let item_rows = r.read_u64::<LittleEndian>()? as usize;
    let levels = r.read_u32::<LittleEndian>()? as usize;
    let codebook_size = r.read_u32::<LittleEndian>()?;
    let table_scheme = match r.read_u8()? {
        0 => TableScheme::PrefixNgram,
        1 => TableScheme::LevelWise,
        other => return Err(Error::Data(format!("invalid table scheme tag {other}"))),
    };
    let max_rows = r.read_u64::<LittleEndian>()? as usize;
    let shared_tables = match r.read_u8()? {
        0 => false,
        1 => true,
        other => return Err(Error::Data(format!("invalid shared-table flag {other}"))),
    };
    let init_scale = r.read_f32::<LittleEndian>()?;
    Ok(ArchConfig {
        token_dim,
        hidden_dim,
        user_rows,
        item_rows,
        levels,
        codebook_size,
        table_scheme,
        max_rows,
        shared_tables,
        init_scale,
    })
}

fn write_vec<W: Write>(w: &mut W, values: &[f32]) -> Result<()> {
    w.write_u64::<LittleEndian>(values.len() as u64)?;
    for &v in values {
        w.write_f32::<LittleEndian>(v)?;
    }
    Ok(())
}

/// Reads a length-prefixed f32 vector; enforces the expected length when
/// known and rejects non-finite entries.
fn read_vec<R: Read>(r: &mut R, expected: Option<usize>, what: &str) -> Result<Vec<f32>> {
    let len = r.read_u64::<LittleEndian>()?;
    if let Some(expect) = expected {
        if len != expect as u64 {
            return Err(Error::Data(format!(
                "{what} has {len} entries, expected {expect}"
            )));
        }
    } else if len > (1u64 << 32) {
        return Err(Error::Data(format!("{what} declares an implausible length {len}")));
    }
    let mut out = vec![0.0f32; len as usize];
    for v in out.iter_mut() {
        *v = r.read_f32::<LittleEndian>()?;
        if !v.is_finite() {
            return Err(Error::Data(format!("{what} contains a non-finite value")));
        }
    }
    Ok(out)
}

fn read_finite_f32<R: Read>(r: &mut R, what: &str) -> Result<f32> {
    let v = r.read_f32::<LittleEndian>()?;
    if !v.is_finite() {
        return Err(Error::Data(format!("{what} is non-finite")));
    }
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, RngCore, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn arch_cfg(shared: bool) -> ArchConfig {
        ArchConfig {
            token_dim: 16,
            hidden_dim: 8,
            user_rows: 8,
            item_rows: 16,
            levels: 4,
            codebook_size: 4,
            table_scheme: TableScheme::PrefixNgram,
            max_rows: 32,
            shared_tables: shared,
            init_scale: 0.1,
        }
    }

    fn sample_checkpoint(shared: bool, arch: CandidateArch) -> Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let mut params = ModelParams::new(arch_cfg(shared), 17).unwrap();
        for i in 0..params.param_len() {
            params.set_param(i, rng.random::<f32>() * 2.0 - 1.0);
        }
        Checkpoint { params, arch, step: 123_456, beta: 0.625, learning_rate: 0.05 }
    }

    fn to_bytes(ckpt: &Checkpoint) -> Vec<u8> {
        let mut buf = Vec::new();
        ckpt.write_to(&mut buf).unwrap();
        buf
    }

    #[test]
    fn round_trip_is_bit_identical() {
        for shared in [false, true] {
            let ckpt = sample_checkpoint(
                shared,
                CandidateArch::fusion(FusionVariant::LateAligned),
            );
            let bytes = to_bytes(&ckpt);
            let back = Checkpoint::read_from(&mut bytes.as_slice()).unwrap();
            assert!(back.params.diff_components(&ckpt.params).is_empty());
            assert_eq!(back.step, ckpt.step);
            assert_eq!(back.beta.to_bits(), ckpt.beta.to_bits());
            assert_eq!(back.learning_rate.to_bits(), ckpt.learning_rate.to_bits());
            assert_eq!(back.arch, ckpt.arch);
            assert_eq!(back.params.arch_config(), ckpt.params.arch_config());
            // Serialization itself is deterministic.
            assert_eq!(to_bytes(&back), bytes);
        }
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.flck");
        let ckpt = sample_checkpoint(false, CandidateArch::IdOnly);
        ckpt.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert!(back.params.diff_components(&ckpt.params).is_empty());
        assert_eq!(back.arch, ckpt.arch);
    }

    #[test]
    fn every_architecture_tag_round_trips() {
        let mut archs = vec![
            CandidateArch::UserOnly,
            CandidateArch::IdOnly,
            CandidateArch::IdSliceRoom,
        ];
        for v in [
            FusionVariant::EarlyReplace,
            FusionVariant::EarlyConcat,
            FusionVariant::EarlyGateLearnable,
            FusionVariant::EarlyGateFeature,
            FusionVariant::LateIndependent,
            FusionVariant::LateAligned,
            FusionVariant::Fluid,
        ] {
            archs.push(CandidateArch::Fusion(FusionConfig {
                variant: v,
                alignment_weight: 0.25,
                gate_feature: GateFeature::ExposureCount,
            }));
        }
        for arch in archs {
            let ckpt = sample_checkpoint(false, arch);
            let bytes = to_bytes(&ckpt);
            let back = Checkpoint::read_from(&mut bytes.as_slice()).unwrap();
            assert_eq!(back.arch, arch);
        }
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let ckpt = sample_checkpoint(false, CandidateArch::IdOnly);
        let bytes = to_bytes(&ckpt);

        // Magic.
        let mut bad = bytes.clone();
        bad[0] ^= 0xFF;
        assert!(Checkpoint::read_from(&mut bad.as_slice()).is_err());

        // Version.
        let mut bad = bytes.clone();
        bad[4] = 99;
        assert!(Checkpoint::read_from(&mut bad.as_slice()).is_err());

        // Truncation.
        let truncated = &bytes[..bytes.len() - 3];
        assert!(Checkpoint::read_from(&mut &truncated[..]).is_err());

        // Trailing bytes (via file load).
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("padded.flck");
        let mut padded = bytes.clone();
        padded.extend_from_slice(&[0u8; 7]);
        std::fs::write(&path, &padded).unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::Data(_))));

        // Non-finite parameter.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut nan_ckpt = sample_checkpoint(false, CandidateArch::IdOnly);
        let idx = (rng.next_u64() % nan_ckpt.params.param_len() as u64) as usize;
        nan_ckpt.params.set_param(idx, f32::NAN);
        let nan_bytes = to_bytes(&nan_ckpt);
        assert!(Checkpoint::read_from(&mut nan_bytes.as_slice()).is_err());
    }

    #[test]
    fn shared_flag_must_match_room_section() {
        let ckpt = sample_checkpoint(true, CandidateArch::fusion(FusionVariant::Fluid));
        let mut bytes = Vec::new();
        ckpt.write_to(&mut bytes).unwrap();
        // Flip the stored shared flag (last byte of the geometry block is
        // init_scale f32; shared flag sits 5 bytes before the end of it).
        // Locate it robustly: geometry starts right after the arch block.
        // magic(4) version(4) step(8) beta(8) lr(8) arch_tag(1) = 33 for
        // non-fusion; fusion adds 10. IdOnly-style offsets don't apply
        // here (Fluid is a fusion arch): 4+4+8+8+8 + 1+1+8+1 = 43; then
        // geometry: 4+4+8+8+4+4+1+8 = 41 bytes before the shared flag.
        let shared_off = 43 + 41;
        assert_eq!(bytes[shared_off], 1, "expected the shared flag here");
        bytes[shared_off] = 0;
        assert!(Checkpoint::read_from(&mut bytes.as_slice()).is_err());
    }
}
