//! The `SMPM` mask container: the only per-task artifact a static-pruning
//! run produces.
//!
//! ```text
//! magic       "SMPM"                        4 bytes
//! version     u16 LE                        2 bytes
//! flags       u8 (bit 0: run-length coded)  1 byte
//! fingerprint u64 LE (FNV-1a of config)     8 bytes
//! count       u32 LE                        4 bytes
//! record*     name_len u16 | name | rows u32 | cols u32 | payload
//! [rle]       byte_len u32 | LEB128 runs    (only when flags bit 0 is set)
//! ```
//!
//! Uncompressed payloads pack the mask row-major, LSB-first within each
//! byte, zero-padded to a byte boundary. In a compressed file the records
//! carry no payload; instead one trailing block holds the concatenated bits
//! of every record as alternating run lengths, starting with a run of
//! zeros (possibly of length 0), each length an unsigned LEB128 integer.

use crate::error::{Error, FormatError, Result};
use crate::mask::Mask;
use crate::model::ModelConfig;
use crate::util::{put_name, ByteReader};

pub const MAGIC: [u8; 4] = *b"SMPM";
pub const VERSION: u16 = 1;
pub const FLAG_RLE: u8 = 0x01;
pub const HEADER_LEN: usize = 4 + 2 + 1 + 8 + 4;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskRecord {
    pub name: String,
    pub mask: Mask,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskArtifact {
    pub fingerprint: u64,
    pub records: Vec<MaskRecord>,
    pub compressed: bool,
}

/// Packs bits row-major, LSB-first, zero-padded to whole bytes.
pub fn pack_bits(bits: &[bool]) -> Vec<u8> {
    let mut out = vec![0u8; bits.len().div_ceil(8)];
    for (i, _) in bits.iter().enumerate().filter(|(_, &b)| b) {
        out[i / 8] |= 1 << (i % 8);
    }
    out
}

pub fn unpack_bits(bytes: &[u8], n: usize) -> Result<Vec<bool>, FormatError> {
    if bytes.len() != n.div_ceil(8) {
        return Err(FormatError::Truncated("bit payload"));
    }
    let bits: Vec<bool> = (0..n).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect();
    if !n.is_multiple_of(8) && bytes[n / 8] >> (n % 8) != 0 {
        return Err(FormatError::Malformed("nonzero padding bits".into()));
    }
    Ok(bits)
}

fn put_leb128(out: &mut Vec<u8>, mut v: u64) {
    loop {
        let byte = (v & 0x7f) as u8;
        v >>= 7;
        if v == 0 {
            out.push(byte);
            return;
        }
        out.push(byte | 0x80);
    }
}

fn get_leb128(r: &mut ByteReader<'_>) -> Result<u64, FormatError> {
    let mut v = 0u64;
    for shift in (0..64).step_by(7) {
        let byte = r.u8("run length")?;
        v |= u64::from(byte & 0x7f) << shift;
        if byte & 0x80 == 0 {
            return Ok(v);
        }
    }
    Err(FormatError::Malformed("run length overflows u64".into()))
}

/// Alternating run lengths (zeros first) as LEB128.
pub fn rle_encode(bits: &[bool]) -> Vec<u8> {
    let mut out = Vec::new();
    let mut current = false;
    let mut run = 0u64;
    for &b in bits {
        if b == current {
            run += 1;
        } else {
            put_leb128(&mut out, run);
            current = b;
            run = 1;
        }
    }
    if run > 0 || bits.is_empty() {
        put_leb128(&mut out, run);
    }
    out
}

pub fn rle_decode(bytes: &[u8], n: usize) -> Result<Vec<bool>, FormatError> {
    let mut r = ByteReader::new(bytes);
    let mut bits = Vec::with_capacity(n);
    let mut current = false;
    let mut first = true;
    while first || bits.len() < n {
        let run = get_leb128(&mut r)? as usize;
        if run == 0 && !first {
            return Err(FormatError::Malformed("empty run after the first".into()));
        }
        if bits.len() + run > n {
            return Err(FormatError::Malformed(
                "runs exceed the record bit count".into(),
            ));
        }
        bits.extend(std::iter::repeat_n(current, run));
        current = !current;
        first = false;
    }
    if r.remaining() != 0 {
        return Err(FormatError::Malformed(
            "trailing bytes after run-length block".into(),
        ));
    }
    Ok(bits)
}

impl MaskArtifact {
    /// Artifact for a model's masks, named in [`ModelConfig::matrix_ids`] order.
    pub fn from_masks(config: &ModelConfig, masks: &[Mask], compressed: bool) -> Result<Self> {
        let ids = config.matrix_ids();
        if ids.len() != masks.len() {
            return Err(Error::Contract(format!(
                "expected {} masks, got {}",
                ids.len(),
                masks.len()
            )));
        }
        let mut records = Vec::with_capacity(ids.len());
        for (id, mask) in ids.iter().zip(masks) {
            let (r, c) = config.matrix_shape(id.kind);
            if mask.shape() != (r, c) {
                return Err(Error::shape(
                    "mask artifact",
                    &[&[r, c], &[mask.rows(), mask.cols()]],
                ));
            }
            records.push(MaskRecord {
                name: id.name(),
                mask: mask.clone(),
            });
        }
        Ok(MaskArtifact {
            fingerprint: config.fingerprint(),
            records,
            compressed,
        })
    }

    pub fn serialize(&self) -> Result<Vec<u8>> {
        let mut out =
            Vec::with_capacity(HEADER_LEN + self.payload_bits() / 8 + 16 * self.records.len());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(if self.compressed { FLAG_RLE } else { 0 });
        out.extend_from_slice(&self.fingerprint.to_le_bytes());
        let count = u32::try_from(self.records.len())
            .map_err(|_| FormatError::Malformed("too many records".into()))?;
        out.extend_from_slice(&count.to_le_bytes());
        for rec in &self.records {
            put_name(&mut out, &rec.name)?;
            let dims = [rec.mask.rows(), rec.mask.cols()].map(|d| {
                u32::try_from(d)
                    .map_err(|_| FormatError::Malformed(format!("extent {d} exceeds u32")))
            });
            for d in dims {
                out.extend_from_slice(&d?.to_le_bytes());
            }
            if !self.compressed {
                out.extend_from_slice(&pack_bits(rec.mask.bits()));
            }
        }
        if self.compressed {
            let all: Vec<bool> = self
                .records
                .iter()
                .flat_map(|r| r.mask.bits().iter().copied())
                .collect();
            let block = rle_encode(&all);
            let len = u32::try_from(block.len())
                .map_err(|_| FormatError::Malformed("run-length block exceeds u32".into()))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(&block);
        }
        Ok(out)
    }

    /// Decodes without checking the fingerprint against a model.
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
        let flags = r.u8("flags")?;
        if flags & !FLAG_RLE != 0 {
            return Err(FormatError::Malformed(format!("unknown flags {flags:#04x}")).into());
        }
        let compressed = flags & FLAG_RLE != 0;
        let fingerprint = r.u64("fingerprint")?;
        let count = r.u32("record count")? as usize;
        let mut shapes = Vec::with_capacity(count.min(1 << 16));
        let mut payloads = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = r.name()?;
            let rows = r.u32("rows")? as usize;
            let cols = r.u32("cols")? as usize;
            if rows == 0 || cols == 0 {
                return Err(
                    FormatError::Malformed(format!("record {name} has a zero extent")).into(),
                );
            }
            let n = rows
                .checked_mul(cols)
                .ok_or_else(|| FormatError::Malformed("record too large".into()))?;
            if !compressed {
                let raw = r.take(n.div_ceil(8), "bit payload")?;
                payloads.push(unpack_bits(raw, n)?);
            }
            shapes.push((name, rows, cols));
        }
        if compressed {
            let len = r.u32("run-length block length")? as usize;
            let block = r.take(len, "run-length block")?;
            let total: usize = shapes.iter().map(|(_, rr, cc)| rr * cc).sum();
            let mut all = rle_decode(block, total)?.into_iter();
            for (_, rows, cols) in &shapes {
                payloads.push(all.by_ref().take(rows * cols).collect());
            }
        }
        if r.remaining() != 0 {
            return Err(FormatError::Malformed(format!("{} trailing bytes", r.remaining())).into());
        }
        let records = shapes
            .into_iter()
            .zip(payloads)
            .map(|((name, rows, cols), bits)| {
                Ok(MaskRecord {
                    name,
                    mask: Mask::new(rows, cols, bits)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(MaskArtifact {
            fingerprint,
            records,
            compressed,
        })
    }

    /// Decodes and checks that the artifact was produced for `config`.
    pub fn deserialize(bytes: &[u8], config: &ModelConfig) -> Result<Self> {
        let art = Self::decode(bytes)?;
        let model = config.fingerprint();
        if art.fingerprint != model {
            return Err(FormatError::FingerprintMismatch {
                file: art.fingerprint,
                model,
            }
            .into());
        }
        Ok(art)
    }

    /// Masks in [`ModelConfig::matrix_ids`] order.
    pub fn masks_for(&self, config: &ModelConfig) -> Result<Vec<Mask>> {
        config
            .matrix_ids()
            .iter()
            .map(|id| {
                let name = id.name();
                let rec = self
                    .records
                    .iter()
                    .find(|r| r.name == name)
                    .ok_or_else(|| FormatError::Malformed(format!("missing record {name}")))?;
                let (r, c) = config.matrix_shape(id.kind);
                if rec.mask.shape() != (r, c) {
                    return Err(Error::shape(
                        "mask artifact",
                        &[&[r, c], &[rec.mask.rows(), rec.mask.cols()]],
                    ));
                }
                Ok(rec.mask.clone())
            })
            .collect()
    }

    pub fn payload_bits(&self) -> usize {
        self.records.iter().map(|r| r.mask.len()).sum()
    }

    pub fn density(&self) -> f64 {
        let kept: usize = self.records.iter().map(|r| r.mask.count_ones()).sum();
        kept as f64 / self.payload_bits().max(1) as f64
    }

    /// Size of the uncompressed encoding without building it.
    pub fn uncompressed_len(&self) -> usize {
        HEADER_LEN
            + self
                .records
                .iter()
                .map(|r| 10 + r.name.len() + r.mask.len().div_ceil(8))
                .sum::<usize>()
    }
}

/// Serializes a model's masks.
pub fn serialize(masks: &[Mask], config: &ModelConfig, compressed: bool) -> Result<Vec<u8>> {
    MaskArtifact::from_masks(config, masks, compressed)?.serialize()
}

/// Inverse of [`serialize`]; fails on a fingerprint mismatch.
pub fn deserialize(bytes: &[u8], config: &ModelConfig) -> Result<Vec<Mask>> {
    MaskArtifact::deserialize(bytes, config)?.masks_for(config)
}
