//! Packed `.g3dq` checkpoints: integer codes of every quantized attribute,
//! storage accounting, zero-order entropy and gzip headroom.
//!
//! Layout (little-endian): `"G3DQ"`, u32 version, u32 K, u8 SH degree,
//! u8 attribute count (6), then per attribute `{u8 bits, f64 range}`, then
//! one payload block per attribute. A block holds the `K * d` codes in row
//! order as `bits`-wide two's-complement integers, least significant bit
//! first, zero-padded to a whole byte.

use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::quantizer::{grid_scale, QuantizerBank, MIN_RANGE};
use crate::scene::{row_dim, AttributeClass, GaussianScene, MAX_SH_DEGREE};

pub const MAGIC: &[u8; 4] = b"G3DQ";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 4 + 4 + 4 + 1 + 1 + 6 * 9;
pub const MAX_BITS: u32 = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedCheckpoint {
    pub sh_degree: usize,
    pub k: usize,
    pub bits: [u32; 6],
    pub ranges: [f64; 6],
    /// Signed grid codes per attribute class, row-major.
    pub codes: [Vec<i64>; 6],
}

/// Payload bytes of one attribute block.
pub fn block_len(k: usize, d: usize, bits: u32) -> usize {
    (k * d * bits as usize).div_ceil(8)
}

/// Exact file size for `k` Gaussians at the given per-class bit-widths.
pub fn file_len(k: usize, sh_degree: usize, bits: &[u32; 6]) -> usize {
    HEADER_LEN
        + AttributeClass::ALL.iter().map(|a| block_len(k, a.dim(sh_degree), bits[a.index()])).sum::<usize>()
}

/// `mean_bits * D / 8`, the per-Gaussian storage before block padding.
pub fn bytes_per_gaussian(mean_bits: f64, sh_degree: usize) -> f64 {
    mean_bits * row_dim(sh_degree) as f64 / 8.0
}

/// Dimension-weighted mean bit-width.
pub fn mean_bits(bits: &[u32; 6], sh_degree: usize) -> f64 {
    let total: usize = AttributeClass::ALL.iter().map(|a| a.dim(sh_degree) * bits[a.index()] as usize).sum();
    total as f64 / row_dim(sh_degree) as f64
}

/// Size of the same Gaussians stored as f32.
pub fn vanilla_bytes(k: usize, sh_degree: usize) -> usize {
    k * row_dim(sh_degree) * 4
}

fn check_bits(bits: u32) -> Result<()> {
    if !(2..=MAX_BITS).contains(&bits) {
        return Err(Error::UnsupportedBitWidth(bits));
    }
    Ok(())
}

impl QuantizedCheckpoint {
    /// Codes of the alive rows of `scene` under the bank's current grids.
    pub fn from_scene(scene: &GaussianScene, bank: &QuantizerBank) -> Result<Self> {
        let scene = scene.compact();
        let bits = bank.grid_bits();
        let mut ranges = [0.0; 6];
        let mut codes: [Vec<i64>; 6] = Default::default();
        for st in &bank.states {
            let a = st.attribute.index();
            check_bits(bits[a])?;
            // Empty blocks (SH AC at degree 0) never see a batch.
            let empty = st.attribute.dim(scene.sh_degree) == 0 || scene.is_empty();
            let r = match st.range {
                Some(r) => r,
                None if empty => MIN_RANGE,
                None => {
                    return Err(Error::InvalidArgument(format!(
                        "quantizer for {} has no clip range yet",
                        st.attribute.name()
                    )))
                }
            };
            let s = grid_scale(bits[a] as f64, r);
            ranges[a] = r;
            codes[a] = scene.gather(st.attribute).iter().map(|x| (s * x.clamp(-r, r)).round() as i64).collect();
        }
        Ok(Self { sh_degree: scene.sh_degree, k: scene.len(), bits, ranges, codes })
    }

    pub fn mean_bits(&self) -> f64 {
        mean_bits(&self.bits, self.sh_degree)
    }

    pub fn file_len(&self) -> usize {
        file_len(self.k, self.sh_degree, &self.bits)
    }

    /// Dequantized scene; equals the bank's fake-quantized scene bitwise.
    pub fn to_scene(&self) -> Result<GaussianScene> {
        let mut scene = GaussianScene::empty(self.sh_degree);
        scene.means = vec![[0.0; 3]; self.k];
        scene.log_scales = vec![[0.0; 3]; self.k];
        scene.quats = vec![[0.0; 4]; self.k];
        scene.opacity_logits = vec![0.0; self.k];
        scene.sh_coeffs = vec![0.0; self.k * scene.sh_stride()];
        scene.alive = vec![true; self.k];
        for attr in AttributeClass::ALL {
            let a = attr.index();
            let s = grid_scale(self.bits[a] as f64, self.ranges[a]);
            let values: Vec<f64> = self.codes[a].iter().map(|c| *c as f64 / s).collect();
            scene.scatter(attr, &values);
        }
        scene.validate()?;
        Ok(scene)
    }

    /// Concatenated payload blocks.
    pub fn payload(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for attr in AttributeClass::ALL {
            let a = attr.index();
            out.extend(pack_codes(&self.codes[a], self.bits[a]));
        }
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(self.file_len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let k = u32::try_from(self.k).map_err(|_| Error::InvalidArgument(format!("{} gaussians", self.k)))?;
        out.extend_from_slice(&k.to_le_bytes());
        out.push(self.sh_degree as u8);
        out.push(6);
        for a in 0..6 {
            check_bits(self.bits[a])?;
            out.push(self.bits[a] as u8);
            out.extend_from_slice(&self.ranges[a].to_le_bytes());
        }
        out.extend(self.payload());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Truncated { needed: HEADER_LEN, found: bytes.len() });
        }
        let found: [u8; 4] = bytes[0..4].try_into().expect("four bytes");
        if &found != MAGIC {
            return Err(Error::BadMagic { expected: *MAGIC, found });
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("four bytes"));
        let version = u32_at(4);
        if version != VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let k = u32_at(8) as usize;
        let sh_degree = bytes[12] as usize;
        if sh_degree > MAX_SH_DEGREE {
            return Err(Error::DimensionMismatch(format!("sh degree {sh_degree}")));
        }
        if bytes[13] != 6 {
            return Err(Error::DimensionMismatch(format!("{} attribute classes, expected 6", bytes[13])));
        }
        let mut bits = [0u32; 6];
        let mut ranges = [0.0; 6];
        for a in 0..6 {
            let o = 14 + 9 * a;
            bits[a] = bytes[o] as u32;
            check_bits(bits[a])?;
            ranges[a] = f64::from_le_bytes(bytes[o + 1..o + 9].try_into().expect("eight bytes"));
        }
        let expected = file_len(k, sh_degree, &bits);
        if bytes.len() < expected {
            return Err(Error::Truncated { needed: expected, found: bytes.len() });
        }
        if bytes.len() > expected {
            return Err(Error::TrailingBytes { expected, found: bytes.len() });
        }
        let mut codes: [Vec<i64>; 6] = Default::default();
        let mut offset = HEADER_LEN;
        for attr in AttributeClass::ALL {
            let a = attr.index();
            let count = k * attr.dim(sh_degree);
            let len = block_len(k, attr.dim(sh_degree), bits[a]);
            codes[a] = unpack_codes(&bytes[offset..offset + len], count, bits[a]);
            offset += len;
        }
        Ok(Self { sh_degree, k, bits, ranges, codes })
    }
}

/// Two's-complement, LSB-first packing of `codes` at `bits` each.
pub fn pack_codes(codes: &[i64], bits: u32) -> Vec<u8> {
    let mut out = vec![0u8; (codes.len() * bits as usize).div_ceil(8)];
    let mask = (1u64 << bits) - 1;
    let mut pos = 0usize;
    for &c in codes {
        let v = (c as u64) & mask;
        for k in 0..bits as usize {
            if v >> k & 1 == 1 {
                out[(pos + k) / 8] |= 1 << ((pos + k) % 8);
            }
        }
        pos += bits as usize;
    }
    out
}

pub fn unpack_codes(bytes: &[u8], count: usize, bits: u32) -> Vec<i64> {
    let b = bits as usize;
    (0..count)
        .map(|i| {
            let mut v = 0u64;
            for k in 0..b {
                let p = i * b + k;
                v |= ((bytes[p / 8] >> (p % 8)) as u64 & 1) << k;
            }
            // Sign-extend from `bits`.
            ((v << (64 - b)) as i64) >> (64 - b)
        })
        .collect()
}

/// Writes the checkpoint for the alive rows of `scene`; returns its size.
pub fn encode(scene: &GaussianScene, bank: &QuantizerBank, path: impl AsRef<Path>) -> Result<usize> {
    let bytes = QuantizedCheckpoint::from_scene(scene, bank)?.to_bytes()?;
    std::fs::write(path, &bytes)?;
    Ok(bytes.len())
}

pub fn decode(path: impl AsRef<Path>) -> Result<(GaussianScene, QuantizedCheckpoint)> {
    let ckpt = QuantizedCheckpoint::from_bytes(&std::fs::read(path)?)?;
    Ok((ckpt.to_scene()?, ckpt))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttributeEntropy {
    pub attribute: &'static str,
    pub d: usize,
    pub bits: u32,
    pub entropy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EntropyReport {
    pub attributes: Vec<AttributeEntropy>,
    pub mean_bits: f64,
    /// Dimension-weighted bits per scalar.
    pub entropy: f64,
    pub headroom_pct: f64,
}

/// Empirical entropy in bits of a symbol stream.
pub fn symbol_entropy(codes: &[i64]) -> f64 {
    if codes.is_empty() {
        return 0.0;
    }
    let mut sorted = codes.to_vec();
    sorted.sort_unstable();
    let n = codes.len() as f64;
    let mut h = 0.0;
    for run in sorted.chunk_by(|a, b| a == b) {
        let p = run.len() as f64 / n;
        h -= p * p.log2();
    }
    h.max(0.0)
}

pub fn shannon_entropy(ckpt: &QuantizedCheckpoint) -> Result<EntropyReport> {
    if ckpt.k == 0 {
        return Err(Error::InvalidArgument("entropy of an empty payload".into()));
    }
    let mut attributes = Vec::new();
    let (mut weighted, mut dims) = (0.0, 0usize);
    for attr in AttributeClass::ALL {
        let d = attr.dim(ckpt.sh_degree);
        if d == 0 {
            continue;
        }
        let entropy = symbol_entropy(&ckpt.codes[attr.index()]);
        weighted += d as f64 * entropy;
        dims += d;
        attributes.push(AttributeEntropy { attribute: attr.name(), d, bits: ckpt.bits[attr.index()], entropy });
    }
    let entropy = weighted / dims as f64;
    let mean_bits = ckpt.mean_bits();
    Ok(EntropyReport { attributes, mean_bits, entropy, headroom_pct: 100.0 * (mean_bits - entropy) / mean_bits })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GzipReport {
    pub raw_bytes: usize,
    pub compressed_bytes: usize,
    pub reduction_pct: f64,
}

/// Gzip size reduction of the packed payload, verified to round-trip.
pub fn lossless_headroom(ckpt: &QuantizedCheckpoint) -> Result<GzipReport> {
    let payload = ckpt.payload();
    if payload.is_empty() {
        return Err(Error::InvalidArgument("lossless headroom of an empty payload".into()));
    }
    let mut enc = GzEncoder::new(Vec::new(), Compression::best());
    enc.write_all(&payload)?;
    let compressed = enc.finish()?;
    let mut back = Vec::with_capacity(payload.len());
    GzDecoder::new(compressed.as_slice()).read_to_end(&mut back)?;
    if back != payload {
        return Err(Error::InvalidArgument("gzip round trip changed the payload".into()));
    }
    Ok(GzipReport {
        raw_bytes: payload.len(),
        compressed_bytes: compressed.len(),
        reduction_pct: 100.0 * (1.0 - compressed.len() as f64 / payload.len() as f64),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_is_sixty_eight_bytes() {
        assert_eq!(HEADER_LEN, 68);
    }

    #[test]
    fn pack_round_trips_extreme_codes() {
        for bits in 2..=16u32 {
            let m = (1i64 << (bits - 1)) - 1;
            let codes = vec![-m, m, 0, -1, 1, m - 1];
            let packed = pack_codes(&codes, bits);
            assert_eq!(packed.len(), (6 * bits as usize).div_ceil(8));
            assert_eq!(unpack_codes(&packed, codes.len(), bits), codes);
        }
    }

    #[test]
    fn low_bits_come_first() {
        assert_eq!(pack_codes(&[1, -1], 4), vec![0xF1]);
    }

    #[test]
    fn entropy_extremes() {
        assert_eq!(symbol_entropy(&[3; 100]), 0.0);
        let uniform: Vec<i64> = (0..256).collect();
        assert!((symbol_entropy(&uniform) - 8.0).abs() < 1e-12);
    }

    #[test]
    fn storage_constant() {
        assert!((bytes_per_gaussian(8.64, 3) - 63.72).abs() < 1e-12);
    }
}
