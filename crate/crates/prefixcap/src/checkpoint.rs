//! Binary checkpoint format.
//!
//! Layout: magic "PFXC", format version (u32 LE), section count (u32 LE);
//! then sections ordered lexicographically by name. Each section: name
//! length (u16 LE), UTF-8 name, rank (u8), dims (u32 LE each), raw f32 LE
//! data. A "meta" section carries the model configuration; integer metadata
//! values are stored as f32 bit patterns (u64 seeds split into two u32
//! halves) so the round trip is exact.

use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::encoder::EncoderConfig;
use crate::lm::{Lm, LmConfig};
use crate::mapper::{Mapper, MapperConfig, MapperKind};
use crate::param::Module;
use crate::train::ModelBundle;

pub const MAGIC: &[u8; 4] = b"PFXC";
pub const VERSION: u32 = 1;
pub const META_SECTION: &str = "meta";
const META_LEN: usize = 16;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic bytes; not a checkpoint file")]
    BadMagic,
    #[error("unsupported checkpoint version {0} (expected {VERSION})")]
    BadVersion(u32),
    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),
    #[error("refusing to save a checkpoint with no sections")]
    Empty,
    #[error("checkpoint missing section {0:?}")]
    MissingSection(String),
    #[error("section {name:?}: dims {dims:?} do not match expected {expected:?}")]
    DimensionMismatch {
        name: String,
        dims: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("section {0:?} is not valid for this model")]
    UnknownSection(String),
    #[error("meta section malformed")]
    BadMeta,
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Section {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

pub fn write_sections(path: &Path, mut sections: Vec<Section>) -> Result<(), CheckpointError> {
    if sections.is_empty() {
        return Err(CheckpointError::Empty);
    }
    sections.sort_by(|a, b| a.name.cmp(&b.name));
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(MAGIC)?;
    f.write_all(&VERSION.to_le_bytes())?;
    f.write_all(&(sections.len() as u32).to_le_bytes())?;
    for s in &sections {
        f.write_all(&(s.name.len() as u16).to_le_bytes())?;
        f.write_all(s.name.as_bytes())?;
        f.write_all(&[s.dims.len() as u8])?;
        for &d in &s.dims {
            f.write_all(&(d as u32).to_le_bytes())?;
        }
        let expected: usize = s.dims.iter().product();
        assert_eq!(expected, s.data.len(), "section data/dims mismatch");
        for &v in &s.data {
            f.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_sections(path: &Path) -> Result<Vec<Section>, CheckpointError> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic)
        .map_err(|_| CheckpointError::Truncated("magic"))?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = read_u32(&mut f, "version")?;
    if version != VERSION {
        return Err(CheckpointError::BadVersion(version));
    }
    let count = read_u32(&mut f, "section count")? as usize;
    let mut sections = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = {
            let mut b = [0u8; 2];
            f.read_exact(&mut b)
                .map_err(|_| CheckpointError::Truncated("section name length"))?;
            u16::from_le_bytes(b) as usize
        };
        let mut name_bytes = vec![0u8; name_len];
        f.read_exact(&mut name_bytes)
            .map_err(|_| CheckpointError::Truncated("section name"))?;
        let name = String::from_utf8(name_bytes).map_err(|_| CheckpointError::BadMeta)?;
        let rank = {
            let mut b = [0u8; 1];
            f.read_exact(&mut b)
                .map_err(|_| CheckpointError::Truncated("rank"))?;
            b[0] as usize
        };
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(read_u32(&mut f, "dims")? as usize);
        }
        let numel: usize = dims.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            let mut b = [0u8; 4];
            f.read_exact(&mut b)
                .map_err(|_| CheckpointError::Truncated("tensor data"))?;
            data.push(f32::from_le_bytes(b));
        }
        sections.push(Section { name, dims, data });
    }
    Ok(sections)
}

fn read_u32(f: &mut impl Read, what: &'static str) -> Result<u32, CheckpointError> {
    let mut b = [0u8; 4];
    f.read_exact(&mut b)
        .map_err(|_| CheckpointError::Truncated(what))?;
    Ok(u32::from_le_bytes(b))
}

fn meta_section(bundle: &ModelBundle<f32>, seed: u64) -> Section {
    let m = bundle.mapper.cfg();
    let l = &bundle.lm.cfg;
    let vals: [u32; META_LEN] = [
        m.k as u32,
        m.d_clip as u32,
        m.d_lm as u32,
        l.vocab_size as u32,
        bundle.freeze_lm as u32,
        (seed & 0xffff_ffff) as u32,
        (seed >> 32) as u32,
        match m.kind {
            MapperKind::Mlp => 0,
            MapperKind::Transformer => 1,
        },
        m.layers as u32,
        m.heads as u32,
        m.hidden_mult as u32,
        l.layers as u32,
        l.heads as u32,
        l.max_positions as u32,
        (bundle.encoder.seed & 0xffff_ffff) as u32,
        (bundle.encoder.seed >> 32) as u32,
    ];
    Section {
        name: META_SECTION.to_string(),
        dims: vec![META_LEN],
        data: vals.iter().map(|&v| f32::from_bits(v)).collect(),
    }
}

pub fn save_checkpoint(
    path: &Path,
    bundle: &ModelBundle<f32>,
    seed: u64,
) -> Result<(), CheckpointError> {
    let mut sections = vec![meta_section(bundle, seed)];
    bundle.visit("", &mut |name, p| {
        sections.push(Section {
            name: name.to_string(),
            dims: p.shape.clone(),
            data: p.data.clone(),
        });
    });
    write_sections(path, sections)
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelBundle<f32>, u64), CheckpointError> {
    let sections = read_sections(path)?;
    let meta = sections
        .iter()
        .find(|s| s.name == META_SECTION)
        .ok_or_else(|| CheckpointError::MissingSection(META_SECTION.to_string()))?;
    if meta.data.len() != META_LEN {
        return Err(CheckpointError::BadMeta);
    }
    let v: Vec<u32> = meta.data.iter().map(|f| f.to_bits()).collect();
    let mapper_cfg = MapperConfig {
        kind: match v[7] {
            0 => MapperKind::Mlp,
            1 => MapperKind::Transformer,
            _ => return Err(CheckpointError::BadMeta),
        },
        k: v[0] as usize,
        d_clip: v[1] as usize,
        d_lm: v[2] as usize,
        layers: v[8] as usize,
        heads: v[9] as usize,
        hidden_mult: v[10] as usize,
    };
    let lm_cfg = LmConfig {
        vocab_size: v[3] as usize,
        d_lm: v[2] as usize,
        layers: v[11] as usize,
        heads: v[12] as usize,
        max_positions: v[13] as usize,
    };
    let freeze_lm = v[4] != 0;
    let seed = v[5] as u64 | ((v[6] as u64) << 32);
    let encoder = EncoderConfig {
        d_clip: v[1] as usize,
        seed: v[14] as u64 | ((v[15] as u64) << 32),
    };

    // Build the skeleton, then overwrite every parameter from its section.
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    use rand::SeedableRng;
    let mapper = Mapper::new(mapper_cfg, &mut rng);
    let lm = Lm::new(lm_cfg, &mut rng);
    let mut bundle = ModelBundle::new(encoder, mapper, lm, freeze_lm);

    let mut result = Ok(());
    let mut used = 1usize; // meta
    bundle.visit_mut("", &mut |name, p| {
        if result.is_err() {
            return;
        }
        match sections.iter().find(|s| s.name == name) {
            Some(s) => {
                if s.dims != p.shape {
                    result = Err(CheckpointError::DimensionMismatch {
                        name: name.to_string(),
                        dims: s.dims.clone(),
                        expected: p.shape.clone(),
                    });
                    return;
                }
                p.data = s.data.clone();
                used += 1;
            }
            None => result = Err(CheckpointError::MissingSection(name.to_string())),
        }
    });
    result?;
    if used != sections.len() {
        let known: Vec<String> = {
            let mut names = vec![META_SECTION.to_string()];
            bundle.visit("", &mut |name, _| names.push(name.to_string()));
            names
        };
        let extra = sections
            .iter()
            .find(|s| !known.contains(&s.name))
            .map(|s| s.name.clone())
            .unwrap_or_default();
        return Err(CheckpointError::UnknownSection(extra));
    }
    Ok((bundle, seed))
}
