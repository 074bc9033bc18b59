//! Per-sequence inference state.
//!
//! For the recurrent architecture the state is a fixed-size object: one hidden
//! vector and one convolution tail per recurrent block, and one key/value ring
//! buffer of `attention_window` slots per attention block. Its serialized size
//! depends only on the config. The global-attention baseline uses the same
//! types with unbounded buffers, which is what makes its cache grow.

use crate::config::{Arch, LayerKind, ModelConfig};
use crate::error::{Error, Result};
use crate::layers::params::check_dtype;
use crate::numerics::{Scalar, Tensor};

pub const STATE_MAGIC: [u8; 4] = *b"RGST";
pub const STATE_VERSION: u32 = 1;

/// Key/value cache of a single shared (multi-query) head.
///
/// With a capacity the buffer is a ring: slot storage is allocated up front and
/// writes wrap around, keeping the newest `capacity` entries. Without one it
/// grows without bound. Keys are stored after rotary encoding, so the absolute
/// position counter is all that is needed to resume decoding.
#[derive(Debug, Clone, PartialEq)]
pub struct KvRing<F> {
    head_dim: usize,
    capacity: Option<usize>,
    keys: Vec<F>,
    values: Vec<F>,
    len: usize,
    cursor: usize,
    position: u64,
}

impl<F: Scalar> KvRing<F> {
    pub fn new(head_dim: usize, capacity: Option<usize>) -> Self {
        let slots = capacity.unwrap_or(0);
        KvRing {
            head_dim,
            capacity,
            keys: vec![F::zero(); slots * head_dim],
            values: vec![F::zero(); slots * head_dim],
            len: 0,
            cursor: 0,
            position: 0,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn capacity(&self) -> Option<usize> {
        self.capacity
    }

    /// Number of live entries: `min(tokens written, capacity)`.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Absolute position the next pushed entry will occupy.
    pub fn position(&self) -> u64 {
        self.position
    }

    pub fn push(&mut self, key: &[F], value: &[F]) {
        debug_assert_eq!(key.len(), self.head_dim);
        debug_assert_eq!(value.len(), self.head_dim);
        match self.capacity {
            Some(cap) => {
                let at = self.cursor * self.head_dim;
                self.keys[at..at + self.head_dim].copy_from_slice(key);
                self.values[at..at + self.head_dim].copy_from_slice(value);
                self.cursor = (self.cursor + 1) % cap;
                self.len = (self.len + 1).min(cap);
            }
            None => {
                self.keys.extend_from_slice(key);
                self.values.extend_from_slice(value);
                self.len += 1;
            }
        }
        self.position += 1;
    }

    /// Slot indices of live entries, oldest first.
    fn slots(&self) -> impl Iterator<Item = usize> + '_ {
        let (start, modulo) = match self.capacity {
            Some(cap) if self.len == cap => (self.cursor, cap),
            Some(cap) => (0, cap),
            None => (0, self.len.max(1)),
        };
        (0..self.len).map(move |i| (start + i) % modulo)
    }

    /// Live `(key, value)` pairs, oldest first.
    pub fn entries(&self) -> impl Iterator<Item = (&[F], &[F])> + '_ {
        let hd = self.head_dim;
        self.slots().map(move |s| {
            (
                &self.keys[s * hd..(s + 1) * hd],
                &self.values[s * hd..(s + 1) * hd],
            )
        })
    }

    /// Keys and values as contiguous `(len, head_dim)` slices, when storage
    /// is already oldest-first (always for unbounded buffers).
    pub fn in_order(&self) -> Option<(&[F], &[F])> {
        let ordered = match self.capacity {
            None => true,
            Some(cap) => self.len < cap || self.cursor == 0,
        };
        let n = self.len * self.head_dim;
        ordered.then(|| (&self.keys[..n], &self.values[..n]))
    }

    /// Live keys and values copied out as `(len, head_dim)` matrices, oldest first.
    pub fn to_matrices(&self) -> (Tensor<F>, Tensor<F>) {
        let mut k = Vec::with_capacity(self.len * self.head_dim);
        let mut v = Vec::with_capacity(self.len * self.head_dim);
        for (kr, vr) in self.entries() {
            k.extend_from_slice(kr);
            v.extend_from_slice(vr);
        }
        (
            Tensor::from_vec(&[self.len, self.head_dim], k).expect("len * head_dim"),
            Tensor::from_vec(&[self.len, self.head_dim], v).expect("len * head_dim"),
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerState<F> {
    Recurrent {
        h: Vec<F>,
        /// The last `conv_kernel - 1` conv inputs, oldest first.
        conv_tail: Tensor<F>,
    },
    Attention(KvRing<F>),
}

impl<F: Scalar> LayerState<F> {
    pub fn kind(&self) -> LayerKind {
        match self {
            LayerState::Recurrent { .. } => LayerKind::Recurrent,
            LayerState::Attention(_) => LayerKind::LocalAttention,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferenceState<F> {
    config_hash: u64,
    arch: Arch,
    pub layers: Vec<LayerState<F>>,
    pub tokens_processed: u64,
}

impl<F: Scalar> InferenceState<F> {
    pub fn fresh(config: &ModelConfig, arch: Arch) -> Result<Self> {
        check_dtype::<F>(config)?;
        config.validate()?;
        let span = arch.attention_span(config);
        let layers = arch
            .layer_kinds(config)
            .into_iter()
            .map(|kind| match kind {
                LayerKind::Recurrent => LayerState::Recurrent {
                    h: vec![F::zero(); config.rnn_width],
                    conv_tail: Tensor::zeros(&[config.conv_kernel - 1, config.rnn_width]),
                },
                LayerKind::LocalAttention => {
                    LayerState::Attention(KvRing::new(config.head_dim(), span))
                }
            })
            .collect();
        Ok(InferenceState {
            config_hash: config.hash(),
            arch,
            layers,
            tokens_processed: 0,
        })
    }

    pub fn arch(&self) -> Arch {
        self.arch
    }

    pub fn config_hash(&self) -> u64 {
        self.config_hash
    }

    /// Bytes of live state, counted the same way as [`state_bytes`].
    pub fn logical_bytes(&self) -> usize {
        let b = F::DTYPE.size_bytes();
        let mut total = TOKEN_COUNTER_BYTES;
        for layer in &self.layers {
            total += match layer {
                LayerState::Recurrent { h, conv_tail } => (h.len() + conv_tail.len()) * b,
                LayerState::Attention(ring) => {
                    2 * ring.len() * ring.head_dim() * b + RING_COUNTER_BYTES
                }
            };
        }
        total
    }

    pub fn serialize(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&STATE_MAGIC);
        out.extend_from_slice(&STATE_VERSION.to_le_bytes());
        out.extend_from_slice(&self.config_hash.to_le_bytes());
        out.extend_from_slice(&self.tokens_processed.to_le_bytes());
        for layer in &self.layers {
            let mut sec = Vec::new();
            match layer {
                LayerState::Recurrent { h, conv_tail } => {
                    sec.push(SECTION_RECURRENT);
                    sec.extend_from_slice(&(h.len() as u32).to_le_bytes());
                    sec.extend_from_slice(&(conv_tail.rows() as u32).to_le_bytes());
                    for &v in h.iter().chain(conv_tail.data()) {
                        v.write_le(&mut sec);
                    }
                }
                LayerState::Attention(ring) => {
                    sec.push(SECTION_ATTENTION);
                    sec.extend_from_slice(&(ring.head_dim as u32).to_le_bytes());
                    // 0 marks an unbounded buffer
                    sec.extend_from_slice(&(ring.capacity.unwrap_or(0) as u32).to_le_bytes());
                    sec.extend_from_slice(&(ring.len as u32).to_le_bytes());
                    sec.extend_from_slice(&(ring.cursor as u32).to_le_bytes());
                    sec.extend_from_slice(&ring.position.to_le_bytes());
                    // Bounded rings write every slot, live or not.
                    for &v in ring.keys.iter().chain(&ring.values) {
                        v.write_le(&mut sec);
                    }
                }
            }
            out.extend_from_slice(&(sec.len() as u32).to_le_bytes());
            out.extend_from_slice(&sec);
        }
        out
    }

    /// Decodes a blob written by [`InferenceState::serialize`] for the given
    /// config and architecture.
    pub fn deserialize(bytes: &[u8], config: &ModelConfig, arch: Arch) -> Result<Self> {
        check_dtype::<F>(config)?;
        let mut r = Reader::new(bytes);
        let magic = r.take(4)?;
        if magic != STATE_MAGIC {
            return Err(Error::BadMagic {
                expected: STATE_MAGIC,
                found: magic.to_vec(),
            });
        }
        let version = r.u32()?;
        if version != STATE_VERSION {
            return Err(Error::Version(version));
        }
        let hash = r.u64()?;
        if hash != config.hash() {
            return Err(Error::ConfigHash {
                expected: config.hash(),
                found: hash,
            });
        }
        let tokens_processed = r.u64()?;
        let template = Self::fresh(config, arch)?;
        let mut layers = Vec::with_capacity(template.layers.len());
        for expected in &template.layers {
            let sec_len = r.u32()? as usize;
            let sec_start = r.pos;
            let tag_at = r.pos;
            let tag = r.u8()?;
            let layer = match (tag, expected) {
                (SECTION_RECURRENT, LayerState::Recurrent { h, conv_tail }) => {
                    let width = r.u32()? as usize;
                    let tail_rows = r.u32()? as usize;
                    if width != h.len() || tail_rows != conv_tail.rows() {
                        return Err(Error::Malformed {
                            offset: tag_at,
                            msg: format!(
                                "recurrent section shaped ({width}, {tail_rows}), expected ({}, {})",
                                h.len(),
                                conv_tail.rows()
                            ),
                        });
                    }
                    let h = r.floats::<F>(width)?;
                    let tail = r.floats::<F>(tail_rows * width)?;
                    LayerState::Recurrent {
                        h,
                        conv_tail: Tensor::from_vec(&[tail_rows, width], tail)?,
                    }
                }
                (SECTION_ATTENTION, LayerState::Attention(ring)) => {
                    let head_dim = r.u32()? as usize;
                    let cap_raw = r.u32()? as usize;
                    let len = r.u32()? as usize;
                    let cursor = r.u32()? as usize;
                    let position = r.u64()?;
                    let capacity = (cap_raw != 0).then_some(cap_raw);
                    let consistent = match capacity {
                        Some(cap) => len <= cap && cursor < cap && len as u64 <= position,
                        None => cursor == 0 && len as u64 == position,
                    };
                    if head_dim != ring.head_dim || capacity != ring.capacity || !consistent {
                        return Err(Error::Malformed {
                            offset: tag_at,
                            msg: "attention section does not match config".into(),
                        });
                    }
                    let slots = capacity.unwrap_or(len);
                    let keys = r.floats::<F>(slots * head_dim)?;
                    let values = r.floats::<F>(slots * head_dim)?;
                    LayerState::Attention(KvRing {
                        head_dim,
                        capacity,
                        keys,
                        values,
                        len,
                        cursor,
                        position,
                    })
                }
                _ => {
                    return Err(Error::Malformed {
                        offset: tag_at,
                        msg: format!("unexpected section tag {tag}"),
                    })
                }
            };
            if r.pos - sec_start != sec_len {
                return Err(Error::Malformed {
                    offset: sec_start,
                    msg: format!("section length {sec_len} disagrees with contents"),
                });
            }
            layers.push(layer);
        }
        if r.pos != bytes.len() {
            return Err(Error::Malformed {
                offset: r.pos,
                msg: "trailing bytes".into(),
            });
        }
        Ok(InferenceState {
            config_hash: hash,
            arch,
            layers,
            tokens_processed,
        })
    }
}

const SECTION_RECURRENT: u8 = 0;
const SECTION_ATTENTION: u8 = 1;
const TOKEN_COUNTER_BYTES: usize = 8;
/// Write cursor plus absolute position counter.
const RING_COUNTER_BYTES: usize = 16;

/// Closed-form live state size after `tokens_processed` tokens:
///
/// `Σ_recurrent (rnn_width + (conv_kernel-1)·rnn_width)·b
///  + Σ_attention (2·min(t, window)·head_dim·b + 16) + 8`
///
/// with `b` the dtype width. For [`Arch::GlobalBaseline`] every block is
/// attention and `min(t, window)` becomes `t`.
pub fn state_bytes(config: &ModelConfig, arch: Arch, tokens_processed: u64) -> u64 {
    let b = config.dtype.size_bytes() as u64;
    let rec = ((config.rnn_width + (config.conv_kernel - 1) * config.rnn_width) as u64) * b;
    let held = match arch.attention_span(config) {
        Some(w) => tokens_processed.min(w as u64),
        None => tokens_processed,
    };
    let attn = 2 * held * config.head_dim() as u64 * b + RING_COUNTER_BYTES as u64;
    arch.layer_kinds(config)
        .into_iter()
        .map(|k| match k {
            LayerKind::Recurrent => rec,
            LayerKind::LocalAttention => attn,
        })
        .sum::<u64>()
        + TOKEN_COUNTER_BYTES as u64
}

pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pub(crate) pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let avail = self.bytes.len() - self.pos;
        if avail < n {
            return Err(Error::Truncated {
                offset: self.pos,
                needed: n - avail,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    pub(crate) fn floats<F: Scalar>(&mut self, n: usize) -> Result<Vec<F>> {
        let w = F::DTYPE.size_bytes();
        let raw = self.take(n * w)?;
        Ok(raw.chunks(w).map(F::read_le).collect())
    }
}
