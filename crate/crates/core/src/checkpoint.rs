//! Binary checkpoints.
//!
//! Little-endian throughout:
//!
//! ```text
//! "RGCK" | u32 version = 1 | u32 config_len | config text (UTF-8)
//! u32 tensor_count
//! per tensor: u16 name_len | name | u8 dtype (0 = f32, 1 = f64) | u8 rank
//!             | rank × u32 dims | u8 exempt | raw values
//! ```
//!
//! The config text is the `key = value` form of [`ModelConfig`]. The
//! architecture is not stored separately: a global-attention baseline is
//! recognised by an attention block at position 0.

use std::fs;
use std::path::Path;

use crate::config::{Arch, Dtype, ModelConfig};
use crate::error::{Error, Result};
use crate::layers::params::check_dtype;
use crate::layers::ModelParams;
use crate::numerics::{Scalar, Tensor};
use crate::state::Reader;
use crate::training::DecayMask;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"RGCK";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn checkpoint_bytes<F: Scalar>(params: &ModelParams<F>, mask: &DecayMask) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let text = params.config.to_text();
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    let tensors = params.named_tensors();
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        let len = u16::try_from(name.len())
            .map_err(|_| Error::Domain(format!("tensor name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(F::DTYPE.tag());
        out.push(t.dims().len() as u8);
        for &d in t.dims() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.push(u8::from(mask.is_exempt(&name)));
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    Ok(out)
}

pub fn save_checkpoint<F: Scalar>(
    path: &Path,
    params: &ModelParams<F>,
    mask: &DecayMask,
) -> Result<()> {
    fs::write(path, checkpoint_bytes(params, mask)?)?;
    Ok(())
}

/// Reads just the header and config, e.g. to pick the runtime dtype.
pub fn peek_config(bytes: &[u8]) -> Result<ModelConfig> {
    let mut r = Reader::new(bytes);
    read_header(&mut r)
}

fn read_header(r: &mut Reader<'_>) -> Result<ModelConfig> {
    let magic = r.take(4)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            expected: CHECKPOINT_MAGIC,
            found: magic.to_vec(),
        });
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version(version));
    }
    let len = r.u32()? as usize;
    let at = r.pos;
    let text = std::str::from_utf8(r.take(len)?).map_err(|_| Error::Malformed {
        offset: at,
        msg: "config block is not UTF-8".into(),
    })?;
    ModelConfig::from_text(text)
}

pub fn checkpoint_from_bytes<F: Scalar>(bytes: &[u8]) -> Result<(ModelParams<F>, DecayMask)> {
    let mut r = Reader::new(bytes);
    let config = read_header(&mut r)?;
    check_dtype::<F>(&config)?;
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count.min(4096));
    let mut flags = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let at = r.pos;
        let name_len = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes")) as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Malformed {
                offset: at + 2,
                msg: "tensor name is not UTF-8".into(),
            })?
            .to_string();
        let at = r.pos;
        let tag = r.u8()?;
        if Dtype::from_tag(tag) != Some(F::DTYPE) {
            return Err(Error::Malformed {
                offset: at,
                msg: format!(
                    "tensor `{name}` has dtype tag {tag}, config says {}",
                    F::DTYPE.name()
                ),
            });
        }
        let rank = r.u8()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32()? as usize);
        }
        let at = r.pos;
        let exempt = match r.u8()? {
            0 => false,
            1 => true,
            other => {
                return Err(Error::Malformed {
                    offset: at,
                    msg: format!("exempt flag {other}"),
                })
            }
        };
        let n: usize = dims.iter().product();
        let data = r.floats::<F>(n)?;
        flags.push((name.clone(), exempt));
        tensors.push((name, Tensor::from_vec(&dims, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::Malformed {
            offset: r.pos,
            msg: "trailing bytes".into(),
        });
    }
    let arch = if tensors.iter().any(|(n, _)| n.starts_with("blocks.0.attn.")) {
        Arch::GlobalBaseline
    } else {
        Arch::Recurrent
    };
    let params = ModelParams::from_named(&config, arch, tensors)?;
    Ok((params, DecayMask::from_flags(flags)))
}

pub fn load_checkpoint<F: Scalar>(path: &Path) -> Result<(ModelParams<F>, DecayMask)> {
    checkpoint_from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Preset;

    fn desk() -> (ModelParams<f32>, DecayMask) {
        let p = ModelParams::init(&ModelConfig::preset(Preset::Desk), Arch::Recurrent, 4).unwrap();
        let m = DecayMask::for_params(&p);
        (p, m)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (p, m) = desk();
        let bytes = checkpoint_bytes(&p, &m).unwrap();
        let (q, n) = checkpoint_from_bytes::<f32>(&bytes).unwrap();
        assert_eq!(m, n);
        for ((_, a), (_, b)) in p.named_tensors().iter().zip(q.named_tensors()) {
            let abits: Vec<u32> = a.data().iter().map(|v| v.to_bits()).collect();
            let bbits: Vec<u32> = b.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(abits, bbits);
        }
        assert_eq!(checkpoint_bytes(&q, &n).unwrap(), bytes);
    }

    #[test]
    fn baseline_arch_recovered() {
        let cfg = ModelConfig::preset(Preset::Desk);
        let p = ModelParams::<f32>::init(&cfg, Arch::GlobalBaseline, 1).unwrap();
        let bytes = checkpoint_bytes(&p, &DecayMask::for_params(&p)).unwrap();
        let (q, _) = checkpoint_from_bytes::<f32>(&bytes).unwrap();
        assert_eq!(q.arch, Arch::GlobalBaseline);
    }

    #[test]
    fn distinct_errors() {
        let (p, m) = desk();
        let bytes = checkpoint_bytes(&p, &m).unwrap();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            checkpoint_from_bytes::<f32>(&bad),
            Err(Error::BadMagic { .. })
        ));

        let cut = &bytes[..bytes.len() - 3];
        assert!(matches!(
            checkpoint_from_bytes::<f32>(cut),
            Err(Error::Truncated { .. })
        ));

        // Swap the first tensor's leading dim (vocab) for another value.
        let cfg_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let first = 12 + cfg_len + 4;
        let name_len = u16::from_le_bytes(bytes[first..first + 2].try_into().unwrap()) as usize;
        let dim0 = first + 2 + name_len + 2;
        let mut shaped = bytes.clone();
        shaped[dim0..dim0 + 4].copy_from_slice(&64u32.to_le_bytes());
        shaped[dim0 + 4..dim0 + 8].copy_from_slice(&259u32.to_le_bytes());
        assert!(matches!(
            checkpoint_from_bytes::<f32>(&shaped),
            Err(Error::TensorShape { .. })
        ));

        assert!(matches!(
            checkpoint_from_bytes::<f64>(&bytes),
            Err(Error::Dtype { .. })
        ));
    }
}
