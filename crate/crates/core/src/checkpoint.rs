//! Model checkpoint container (`SMPC`).
//!
//! Shares the mask container's conventions: 4-byte magic, `u16` version,
//! flags byte, `u64` config fingerprint, little-endian everywhere and
//! `u16`-prefixed UTF-8 names.
//!
//! ```text
//! magic "SMPC" | version u16 | flags u8 | fingerprint u64 | config (8 × u32)
//! tensor count u32
//!   name | rank u8 | dims u32 × rank | f64 LE payload
//! index-map count u32
//!   name | len u32 | u32 × len
//! ```

use std::path::Path;

use crate::data::write_atomic;
use crate::error::{Error, FormatError, Result};
use crate::model::{EncoderModel, ModelConfig};
use crate::tensor::Tensor;
use crate::util::{put_name, ByteReader};

pub const MAGIC: [u8; 4] = *b"SMPC";
pub const VERSION: u16 = 1;

pub const LABEL_IDS_MAP: &str = "head.label_token_ids";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub tensors: Vec<(String, Tensor)>,
    /// Integer side tables (label word ids, compaction index maps).
    pub index_maps: Vec<(String, Vec<u32>)>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| FormatError::Malformed(format!("checkpoint lacks tensor {name}")).into())
    }

    pub fn index_map(&self, name: &str) -> Option<&[u32]> {
        self.index_maps
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_slice())
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(0);
        out.extend_from_slice(&self.config.fingerprint().to_le_bytes());
        out.extend_from_slice(&self.config.canonical_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            put_name(&mut out, name)?;
            let rank = u8::try_from(t.shape().len())
                .map_err(|_| FormatError::Malformed(format!("tensor {name} rank too high")))?;
            out.push(rank);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&(self.index_maps.len() as u32).to_le_bytes());
        for (name, values) in &self.index_maps {
            put_name(&mut out, name)?;
            out.extend_from_slice(&(values.len() as u32).to_le_bytes());
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        let magic: [u8; 4] = r.array("magic")?;
        if magic != MAGIC {
            return Err(FormatError::BadMagic {
                expected: MAGIC,
                found: magic,
            }
            .into());
        }
        let version = r.u16("version")?;
        if version != VERSION {
            return Err(FormatError::UnknownVersion(version).into());
        }
        let _flags = r.u8("flags")?;
        let fingerprint = r.u64("fingerprint")?;
        let config =
            ModelConfig::from_canonical_bytes(r.take(32, "config")?).expect("32-byte config block");
        if config.fingerprint() != fingerprint {
            return Err(FormatError::FingerprintMismatch {
                file: fingerprint,
                model: config.fingerprint(),
            }
            .into());
        }
        let count = r.u32("tensor count")?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let name = r.name()?;
            let rank = r.u8("rank")? as usize;
            let shape = (0..rank)
                .map(|_| r.u32("dims").map(|d| d as usize))
                .collect::<Result<Vec<_>, _>>()?;
            let numel: usize = shape.iter().product();
            if numel.checked_mul(8).is_none_or(|b| b > r.remaining()) {
                return Err(FormatError::Truncated("tensor payload").into());
            }
            let data = (0..numel)
                .map(|_| r.f64("tensor payload"))
                .collect::<Result<Vec<_>, _>>()?;
            let t = Tensor::new(shape, data)
                .map_err(|_| FormatError::Malformed(format!("tensor {name} has a bad shape")))?;
            tensors.push((name, t));
        }
        let maps = r.u32("index map count")?;
        let mut index_maps = Vec::new();
        for _ in 0..maps {
            let name = r.name()?;
            let len = r.u32("index map length")? as usize;
            if len.checked_mul(4).is_none_or(|b| b > r.remaining()) {
                return Err(FormatError::Truncated("index map").into());
            }
            let values = (0..len)
                .map(|_| r.u32("index map"))
                .collect::<Result<Vec<_>, _>>()?;
            index_maps.push((name, values));
        }
        if r.remaining() != 0 {
            return Err(FormatError::Malformed(format!("{} trailing bytes", r.remaining())).into());
        }
        Ok(Checkpoint {
            config,
            tensors,
            index_maps,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

/// Every weight, bias, norm, embedding, score and the head of `model`.
pub fn model_to_checkpoint(model: &EncoderModel) -> Checkpoint {
    let mut tensors: Vec<(String, Tensor)> = model
        .frozen_tensors()
        .into_iter()
        .map(|(n, t)| (n, t.clone()))
        .collect();
    for id in model.matrix_ids() {
        tensors.push((
            format!("{}.scores", id.name()),
            model.matrix(id).scores.clone(),
        ));
    }
    Checkpoint {
        config: model.config,
        tensors,
        index_maps: vec![(
            LABEL_IDS_MAP.to_string(),
            model
                .head
                .label_token_ids
                .iter()
                .map(|&v| v as u32)
                .collect(),
        )],
    }
}

/// Rebuilds a model from a full checkpoint. Masks come back all-ones.
pub fn checkpoint_to_model(ckpt: &Checkpoint) -> Result<EncoderModel> {
    let mut model = EncoderModel::build(ckpt.config, 0)?;
    let fill = |dst: &mut Tensor, name: &str| -> Result<()> {
        let src = ckpt.tensor(name)?;
        if src.shape() != dst.shape() {
            return Err(Error::shape("checkpoint", &[dst.shape(), src.shape()]));
        }
        *dst = src.clone();
        Ok(())
    };
    fill(&mut model.token_embeddings, "token_embeddings")?;
    fill(&mut model.position_embeddings, "position_embeddings")?;
    for id in model.matrix_ids() {
        let name = id.name();
        let m = model.matrix_mut(id);
        fill(&mut m.weight, &format!("{name}.weight"))?;
        fill(&mut m.bias, &format!("{name}.bias"))?;
        fill(&mut m.scores, &format!("{name}.scores"))?;
    }
    for (l, layer) in model.layers.iter_mut().enumerate() {
        fill(
            &mut layer.attn_norm.gamma,
            &format!("layer{l}.attn_norm.gamma"),
        )?;
        fill(
            &mut layer.attn_norm.beta,
            &format!("layer{l}.attn_norm.beta"),
        )?;
        fill(
            &mut layer.ffn_norm.gamma,
            &format!("layer{l}.ffn_norm.gamma"),
        )?;
        fill(&mut layer.ffn_norm.beta, &format!("layer{l}.ffn_norm.beta"))?;
    }
    fill(&mut model.head.rows, "head")?;
    if let Some(ids) = ckpt.index_map(LABEL_IDS_MAP) {
        model.head.label_token_ids = ids.iter().map(|&v| v as usize).collect();
    }
    Ok(model)
}
