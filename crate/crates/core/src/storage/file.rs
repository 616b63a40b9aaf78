//! The `.ec2t` model container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "EC2TMODL" (8 bytes)
//! version u8 (= 1)
//! layer count u16
//! per layer:
//!   name length u16, UTF-8 name bytes
//!   kind u8 (0 = fully-connected, 1 = conv2d)
//!   dims 4 × u32; conv (M, N, K, K), fc (M, N, 1, 1)
//!   w_n u16, w_p u16 (IEEE half bit patterns)
//!   location mask byte length u32, packed bytes (LSB-first, zero-padded)
//!   sign mask byte length u32, packed bytes
//!   batch-norm flag u8; if 1: M_eff × u16 half-precision biases
//! trailer: CRC-32 (IEEE) u32 over everything above
//! ```
//!
//! The trailer makes any single-bit corruption of the payload detectable,
//! which structural checks alone cannot guarantee (a flipped sign bit is a
//! different but well-formed model).

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::storage::{BitMask, LayerDims, TernaryLayer};

/// Magic bytes of the `.ec2t` container.
pub const MODEL_MAGIC: &[u8; 8] = b"EC2TMODL";
const MODEL_VERSION: u8 = 1;

const KIND_FC: u8 = 0;
const KIND_CONV: u8 = 1;

/// One stored layer: a name, the ternary masks/centroids, and optionally one
/// half-precision batch-norm bias per effective output channel.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedLayer {
    pub name: String,
    pub layer: TernaryLayer,
    pub bn_bias: Option<Vec<u16>>,
}

/// A full `.ec2t` model.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelFile {
    pub layers: Vec<NamedLayer>,
}

impl ModelFile {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MODEL_MAGIC);
        out.push(MODEL_VERSION);
        if self.layers.len() > u16::MAX as usize {
            return Err(Error::Format("too many layers for a u16 count".into()));
        }
        out.extend_from_slice(&(self.layers.len() as u16).to_le_bytes());
        for named in &self.layers {
            let name = named.name.as_bytes();
            if name.len() > u16::MAX as usize {
                return Err(Error::Format(format!("layer name too long: {}", named.name)));
            }
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name);
            let (kind, dims) = match named.layer.dims {
                LayerDims::Fc {
                    out_features,
                    in_features,
                } => (KIND_FC, [out_features, in_features, 1, 1]),
                LayerDims::Conv {
                    out_channels,
                    in_channels,
                    kernel,
                } => (KIND_CONV, [out_channels, in_channels, kernel, kernel]),
            };
            out.push(kind);
            for d in dims {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            out.extend_from_slice(&named.layer.w_n_bits().to_le_bytes());
            out.extend_from_slice(&named.layer.w_p_bits().to_le_bytes());
            for mask in [&named.layer.location, &named.layer.sign] {
                out.extend_from_slice(&(mask.bytes().len() as u32).to_le_bytes());
                out.extend_from_slice(mask.bytes());
            }
            match &named.bn_bias {
                Some(biases) => {
                    if biases.len() != named.layer.eff_out {
                        return Err(Error::Format(format!(
                            "layer {} has {} batch-norm biases, effective output channels are {}",
                            named.name,
                            biases.len(),
                            named.layer.eff_out
                        )));
                    }
                    out.push(1);
                    for b in biases {
                        out.extend_from_slice(&b.to_le_bytes());
                    }
                }
                None => out.push(0),
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MODEL_MAGIC.len() + 3 + 4 {
            return Err(Error::Format("model file too short".into()));
        }
        let (payload, trailer) = bytes.split_at(bytes.len() - 4);
        let stored_crc = u32::from_le_bytes([trailer[0], trailer[1], trailer[2], trailer[3]]);
        let actual_crc = crc32fast::hash(payload);
        if stored_crc != actual_crc {
            return Err(Error::Format(format!(
                "checksum mismatch: stored {stored_crc:#010x}, computed {actual_crc:#010x}"
            )));
        }

        let mut cursor = Cursor { buf: payload, pos: 0 };
        let magic = cursor.take(8)?;
        if magic != MODEL_MAGIC {
            return Err(Error::Format("bad model magic".into()));
        }
        let version = cursor.u8()?;
        if version != MODEL_VERSION {
            return Err(Error::Format(format!("unsupported model version {version}")));
        }
        let count = cursor.u16()? as usize;
        let mut layers = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = cursor.u16()? as usize;
            let name = String::from_utf8(cursor.take(name_len)?.to_vec())
                .map_err(|_| Error::Format("layer name is not valid UTF-8".into()))?;
            let kind = cursor.u8()?;
            let d = [cursor.u32()?, cursor.u32()?, cursor.u32()?, cursor.u32()?];
            let dims = match kind {
                KIND_FC => LayerDims::Fc {
                    out_features: d[0] as usize,
                    in_features: d[1] as usize,
                },
                KIND_CONV => {
                    if d[2] != d[3] {
                        return Err(Error::Format(format!(
                            "conv kernel dims differ: {} vs {}",
                            d[2], d[3]
                        )));
                    }
                    LayerDims::Conv {
                        out_channels: d[0] as usize,
                        in_channels: d[1] as usize,
                        kernel: d[2] as usize,
                    }
                }
                other => return Err(Error::Format(format!("unknown layer kind {other}"))),
            };
            let w_n_bits = cursor.u16()?;
            let w_p_bits = cursor.u16()?;

            let loc_len = cursor.u32()? as usize;
            let loc_bytes = cursor.take(loc_len)?.to_vec();
            let location = BitMask::from_bytes(loc_bytes, dims.total())?;

            let sign_len = cursor.u32()? as usize;
            let sign_bytes = cursor.take(sign_len)?.to_vec();
            let sign = BitMask::from_bytes(sign_bytes, location.count_ones())?;

            let layer = TernaryLayer::from_parts(dims, location, sign, w_n_bits, w_p_bits)?;

            let bn_flag = cursor.u8()?;
            let bn_bias = match bn_flag {
                0 => None,
                1 => {
                    let mut biases = Vec::with_capacity(layer.eff_out);
                    for _ in 0..layer.eff_out {
                        biases.push(cursor.u16()?);
                    }
                    Some(biases)
                }
                other => return Err(Error::Format(format!("bad batch-norm flag {other}"))),
            };
            layers.push(NamedLayer { name, layer, bn_bias });
        }
        if cursor.pos != payload.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after last layer",
                payload.len() - cursor.pos
            )));
        }
        Ok(ModelFile { layers })
    }

    pub fn write_file<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read_file<P: AsRef<Path>>(path: P) -> Result<Self> {
        let bytes = fs::read(path)?;
        ModelFile::from_bytes(&bytes)
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format("model file truncated".into()));
        }
        let slice = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::{AssignmentMatrix, CentroidSet, Label};
    use crate::rng::Rng;
    use crate::storage::encode_ternary_layer;

    fn sample_model(seed: u64, layers: usize) -> ModelFile {
        let mut rng = Rng::new(seed);
        let mut model = ModelFile::default();
        for i in 0..layers {
            let dims = if i % 2 == 0 {
                LayerDims::Conv {
                    out_channels: 1 + rng.below(5),
                    in_channels: 1 + rng.below(4),
                    kernel: 3,
                }
            } else {
                LayerDims::Fc {
                    out_features: 1 + rng.below(8),
                    in_features: 1 + rng.below(8),
                }
            };
            let ls: Vec<Label> = (0..dims.total())
                .map(|_| match rng.below(3) {
                    0 => Label::Neg,
                    1 => Label::Zero,
                    _ => Label::Pos,
                })
                .collect();
            let c = CentroidSet::new(
                rng.uniform(-2.0, -0.1) as f32,
                rng.uniform(0.1, 2.0) as f32,
            )
            .unwrap();
            let layer = encode_ternary_layer(&AssignmentMatrix::new(ls), &c, dims).unwrap();
            let bn_bias = if i % 2 == 0 {
                Some((0..layer.eff_out).map(|_| rng.next_u64() as u16).collect())
            } else {
                None
            };
            model.layers.push(NamedLayer {
                name: format!("layer{i}"),
                layer,
                bn_bias,
            });
        }
        model
    }

    #[test]
    fn byte_round_trip_is_identity() {
        for seed in 0..5 {
            let model = sample_model(seed, 4);
            let bytes = model.to_bytes().unwrap();
            let back = ModelFile::from_bytes(&bytes).unwrap();
            assert_eq!(back, model);
            // Re-serialization is bitwise stable.
            assert_eq!(back.to_bytes().unwrap(), bytes);
        }
    }

    #[test]
    fn file_round_trip_is_bitwise_identical() {
        let dir = std::env::temp_dir().join("ec2t-model-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("m.ec2t");
        let model = sample_model(9, 3);
        model.write_file(&path).unwrap();
        let on_disk = std::fs::read(&path).unwrap();
        assert_eq!(on_disk, model.to_bytes().unwrap());
        assert_eq!(ModelFile::read_file(&path).unwrap(), model);
    }

    #[test]
    fn any_single_bit_flip_fails_the_checksum() {
        let model = sample_model(3, 2);
        let bytes = model.to_bytes().unwrap();
        // Exhaustive over the payload; the trailer itself is covered because
        // a flipped trailer no longer matches the payload CRC.
        for byte in 0..bytes.len() {
            for bit in 0..8 {
                let mut corrupted = bytes.clone();
                corrupted[byte] ^= 1 << bit;
                assert!(
                    ModelFile::from_bytes(&corrupted).is_err(),
                    "flip at byte {byte} bit {bit} went unnoticed"
                );
            }
        }
    }

    #[test]
    fn rejects_truncation_and_bad_magic() {
        let model = sample_model(4, 2);
        let bytes = model.to_bytes().unwrap();
        assert!(ModelFile::from_bytes(&bytes[..bytes.len() - 5]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(ModelFile::from_bytes(&bad).is_err());
        assert!(ModelFile::from_bytes(b"tiny").is_err());
    }

    #[test]
    fn bn_bias_length_is_enforced_on_write() {
        let mut model = sample_model(5, 1);
        model.layers[0].bn_bias = Some(vec![0u16; model.layers[0].layer.eff_out + 1]);
        assert!(model.to_bytes().is_err());
    }
}
