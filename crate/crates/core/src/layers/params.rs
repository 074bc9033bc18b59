//! Parameter layout.
//!
//! Every layer struct is generic over its leaf type `P`. The same skeleton is
//! instantiated with [`TensorSpec`] (shapes only, nothing allocated), with
//! [`Tensor`] (real weights) and with tape [`Var`](crate::numerics::Var)s
//! during training, so the naming and ordering of tensors lives in exactly one
//! place: the `map` implementations below.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::config::{Arch, LayerKind, ModelConfig};
use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

type Visitor<'v, 'a, P, Q> = &'v mut dyn FnMut(&str, &'a P) -> Q;
type VisitorMut<'a, P> = &'a mut dyn FnMut(&str, &mut P);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub dims: Vec<usize>,
    /// Excluded from weight decay.
    pub exempt: bool,
}

impl TensorSpec {
    pub fn numel(&self) -> usize {
        self.dims.iter().product()
    }
}

/// Only the RG-LRU's own gate weights, gate biases and Λ are decay-exempt.
pub fn is_decay_exempt(name: &str) -> bool {
    name.contains(".rglru.")
}

/// `x · weight + bias`, with `weight` stored `(in, out)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<P> {
    pub weight: P,
    pub bias: Option<P>,
}

impl<P> Linear<P> {
    fn map<'a, Q>(&'a self, prefix: &str, f: Visitor<'_, 'a, P, Q>) -> Linear<Q> {
        Linear {
            weight: f(&format!("{prefix}.weight"), &self.weight),
            bias: self.bias.as_ref().map(|b| f(&format!("{prefix}.bias"), b)),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: VisitorMut<'_, P>) {
        f(&format!("{prefix}.weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&format!("{prefix}.bias"), b);
        }
    }
}

/// Token embedding shared between input lookup and output logits.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable<P> {
    /// `(vocab_size, model_width)`
    pub table: P,
    /// Input multiplier, `√model_width`. Never applied on the output side.
    pub scale: f64,
}

/// Real-gated linear recurrent unit.
#[derive(Debug, Clone, PartialEq)]
pub struct RgLru<P> {
    /// Recurrence gate `r_t`.
    pub gate_a: Linear<P>,
    /// Input gate `i_t`.
    pub gate_x: Linear<P>,
    /// Per-channel Λ; the base decay is `σ(Λ)`.
    pub log_lambda: P,
    pub power_c: f64,
}

/// Causal depthwise temporal convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvTail<P> {
    /// `(conv_kernel, rnn_width)`; the last row multiplies the current input.
    pub kernel: P,
    pub bias: P,
}

/// Recurrent temporal-mixing block: `out(gelu(branch_gelu x) ⊙ rglru(conv(branch_rnn x)))`.
#[derive(Debug, Clone, PartialEq)]
pub struct RecurrentMix<P> {
    pub branch_gelu: Linear<P>,
    pub branch_rnn: Linear<P>,
    pub conv: ConvTail<P>,
    pub rglru: RgLru<P>,
    pub out: Linear<P>,
}

/// Multi-query attention: `num_heads` query heads share one key/value head.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalAttention<P> {
    pub q: Linear<P>,
    pub k: Linear<P>,
    pub v: Linear<P>,
    pub out: Linear<P>,
    pub num_heads: usize,
    pub head_dim: usize,
    /// Attention span in tokens (self included); `None` is unbounded.
    pub window: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GatedMlp<P> {
    pub gate: Linear<P>,
    pub up: Linear<P>,
    pub down: Linear<P>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TemporalMix<P> {
    Recurrent(RecurrentMix<P>),
    Attention(LocalAttention<P>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBlock<P> {
    pub temporal_norm: P,
    pub mix: TemporalMix<P>,
    pub mlp_norm: P,
    pub mlp: GatedMlp<P>,
}

impl<P> ResidualBlock<P> {
    pub fn kind(&self) -> LayerKind {
        match self.mix {
            TemporalMix::Recurrent(_) => LayerKind::Recurrent,
            TemporalMix::Attention(_) => LayerKind::LocalAttention,
        }
    }
}

/// Full parameter set of one model.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters<P> {
    pub config: ModelConfig,
    pub arch: Arch,
    pub embed: EmbeddingTable<P>,
    pub blocks: Vec<ResidualBlock<P>>,
    pub final_norm: P,
}

/// Parameters holding real weights.
pub type ModelParams<F> = Parameters<Tensor<F>>;

impl<P> Parameters<P> {
    /// Rebuilds the same structure with every tensor passed through `f`,
    /// visiting tensors in canonical order.
    pub fn map<'a, Q>(&'a self, f: &mut dyn FnMut(&str, &'a P) -> Q) -> Parameters<Q> {
        let embed = EmbeddingTable {
            table: f("embed.table", &self.embed.table),
            scale: self.embed.scale,
        };
        let blocks = self
            .blocks
            .iter()
            .enumerate()
            .map(|(i, b)| {
                let p = format!("blocks.{i}");
                let temporal_norm = f(&format!("{p}.temporal_norm.scale"), &b.temporal_norm);
                let mix = match &b.mix {
                    TemporalMix::Recurrent(r) => {
                        let q = format!("{p}.rec");
                        TemporalMix::Recurrent(RecurrentMix {
                            branch_gelu: r.branch_gelu.map(&format!("{q}.branch_gelu"), f),
                            branch_rnn: r.branch_rnn.map(&format!("{q}.branch_rnn"), f),
                            conv: ConvTail {
                                kernel: f(&format!("{q}.conv.kernel"), &r.conv.kernel),
                                bias: f(&format!("{q}.conv.bias"), &r.conv.bias),
                            },
                            rglru: RgLru {
                                gate_a: r.rglru.gate_a.map(&format!("{q}.rglru.gate_a"), f),
                                gate_x: r.rglru.gate_x.map(&format!("{q}.rglru.gate_x"), f),
                                log_lambda: f(
                                    &format!("{q}.rglru.log_lambda"),
                                    &r.rglru.log_lambda,
                                ),
                                power_c: r.rglru.power_c,
                            },
                            out: r.out.map(&format!("{q}.out"), f),
                        })
                    }
                    TemporalMix::Attention(a) => {
                        let q = format!("{p}.attn");
                        TemporalMix::Attention(LocalAttention {
                            q: a.q.map(&format!("{q}.q"), f),
                            k: a.k.map(&format!("{q}.k"), f),
                            v: a.v.map(&format!("{q}.v"), f),
                            out: a.out.map(&format!("{q}.out"), f),
                            num_heads: a.num_heads,
                            head_dim: a.head_dim,
                            window: a.window,
                        })
                    }
                };
                let mlp_norm = f(&format!("{p}.mlp_norm.scale"), &b.mlp_norm);
                let mlp = GatedMlp {
                    gate: b.mlp.gate.map(&format!("{p}.mlp.gate"), f),
                    up: b.mlp.up.map(&format!("{p}.mlp.up"), f),
                    down: b.mlp.down.map(&format!("{p}.mlp.down"), f),
                };
                ResidualBlock {
                    temporal_norm,
                    mix,
                    mlp_norm,
                    mlp,
                }
            })
            .collect();
        let final_norm = f("final_norm.scale", &self.final_norm);
        Parameters {
            config: self.config.clone(),
            arch: self.arch,
            embed,
            blocks,
            final_norm,
        }
    }

    /// Mutable traversal in the same order as [`Parameters::map`].
    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut P)) {
        f("embed.table", &mut self.embed.table);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let p = format!("blocks.{i}");
            f(&format!("{p}.temporal_norm.scale"), &mut b.temporal_norm);
            match &mut b.mix {
                TemporalMix::Recurrent(r) => {
                    let q = format!("{p}.rec");
                    r.branch_gelu.visit_mut(&format!("{q}.branch_gelu"), f);
                    r.branch_rnn.visit_mut(&format!("{q}.branch_rnn"), f);
                    f(&format!("{q}.conv.kernel"), &mut r.conv.kernel);
                    f(&format!("{q}.conv.bias"), &mut r.conv.bias);
                    r.rglru.gate_a.visit_mut(&format!("{q}.rglru.gate_a"), f);
                    r.rglru.gate_x.visit_mut(&format!("{q}.rglru.gate_x"), f);
                    f(&format!("{q}.rglru.log_lambda"), &mut r.rglru.log_lambda);
                    r.out.visit_mut(&format!("{q}.out"), f);
                }
                TemporalMix::Attention(a) => {
                    let q = format!("{p}.attn");
                    a.q.visit_mut(&format!("{q}.q"), f);
                    a.k.visit_mut(&format!("{q}.k"), f);
                    a.v.visit_mut(&format!("{q}.v"), f);
                    a.out.visit_mut(&format!("{q}.out"), f);
                }
            }
            f(&format!("{p}.mlp_norm.scale"), &mut b.mlp_norm);
            b.mlp.gate.visit_mut(&format!("{p}.mlp.gate"), f);
            b.mlp.up.visit_mut(&format!("{p}.mlp.up"), f);
            b.mlp.down.visit_mut(&format!("{p}.mlp.down"), f);
        }
        f("final_norm.scale", &mut self.final_norm);
    }

    pub fn names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.map(&mut |n, _| names.push(n.to_string()));
        names
    }
}

fn spec(dims: &[usize]) -> TensorSpec {
    // Names are filled in by `tensor_specs`.
    TensorSpec {
        name: String::new(),
        dims: dims.to_vec(),
        exempt: false,
    }
}

fn linear_spec(inp: usize, out: usize, bias: bool) -> Linear<TensorSpec> {
    Linear {
        weight: spec(&[inp, out]),
        bias: bias.then(|| spec(&[out])),
    }
}

/// Shape skeleton of the model for `config` and `arch`. Allocates no weights.
pub fn layout(config: &ModelConfig, arch: Arch) -> Parameters<TensorSpec> {
    let d = config.model_width;
    let rnn = config.rnn_width;
    let hd = config.head_dim();
    let blocks = arch
        .layer_kinds(config)
        .into_iter()
        .map(|kind| {
            let mix = match kind {
                LayerKind::Recurrent => TemporalMix::Recurrent(RecurrentMix {
                    branch_gelu: linear_spec(d, rnn, true),
                    branch_rnn: linear_spec(d, rnn, true),
                    conv: ConvTail {
                        kernel: spec(&[config.conv_kernel, rnn]),
                        bias: spec(&[rnn]),
                    },
                    rglru: RgLru {
                        gate_a: linear_spec(rnn, rnn, true),
                        gate_x: linear_spec(rnn, rnn, true),
                        log_lambda: spec(&[rnn]),
                        power_c: config.rglru_power_c,
                    },
                    out: linear_spec(rnn, d, true),
                }),
                LayerKind::LocalAttention => TemporalMix::Attention(LocalAttention {
                    q: linear_spec(d, d, false),
                    k: linear_spec(d, hd, false),
                    v: linear_spec(d, hd, false),
                    out: linear_spec(d, d, true),
                    num_heads: config.num_heads,
                    head_dim: hd,
                    window: arch.attention_span(config),
                }),
            };
            ResidualBlock {
                temporal_norm: spec(&[d]),
                mix,
                mlp_norm: spec(&[d]),
                mlp: GatedMlp {
                    gate: linear_spec(d, config.mlp_width(), true),
                    up: linear_spec(d, config.mlp_width(), true),
                    down: linear_spec(config.mlp_width(), d, true),
                },
            }
        })
        .collect();
    let skeleton = Parameters {
        config: config.clone(),
        arch,
        embed: EmbeddingTable {
            table: spec(&[config.vocab_size, d]),
            scale: (d as f64).sqrt(),
        },
        blocks,
        final_norm: spec(&[d]),
    };
    skeleton.map(&mut |name, s| TensorSpec {
        name: name.to_string(),
        dims: s.dims.clone(),
        exempt: is_decay_exempt(name),
    })
}

/// Every tensor of the model in canonical order.
pub fn tensor_specs(config: &ModelConfig, arch: Arch) -> Vec<TensorSpec> {
    let mut out = Vec::new();
    layout(config, arch).map(&mut |_, s| out.push(s.clone()));
    out
}

impl<F: Scalar> Parameters<Tensor<F>> {
    pub fn zeros(config: &ModelConfig, arch: Arch) -> Result<Self> {
        check_dtype::<F>(config)?;
        config.validate()?;
        Ok(layout(config, arch).map(&mut |_, s| Tensor::zeros(&s.dims)))
    }

    /// Random initialisation:
    /// * linear and conv weights `~ N(0, 1/fan_in)`, embedding rows `~ N(0, 1/d)`;
    /// * biases zero, norm scales one;
    /// * Λ chosen so `σ(Λ)^c` is uniform on `[0.9, 0.999]` per channel.
    pub fn init(config: &ModelConfig, arch: Arch, seed: u64) -> Result<Self> {
        check_dtype::<F>(config)?;
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = config.rglru_power_c;
        let decay = Uniform::new_inclusive(0.9f64, 0.999).expect("valid range");
        let params = layout(config, arch).map(&mut |name, s| {
            let n = s.numel();
            let data: Vec<f64> = if name.ends_with(".log_lambda") {
                (0..n)
                    .map(|_| {
                        let a = decay.sample(&mut rng).powf(1.0 / c);
                        (a / (1.0 - a)).ln()
                    })
                    .collect()
            } else if name.ends_with(".scale") {
                vec![1.0; n]
            } else if name.ends_with(".bias") {
                vec![0.0; n]
            } else {
                let fan_in = if name == "embed.table" {
                    s.dims[1]
                } else {
                    s.dims[0]
                };
                let normal = Normal::new(0.0, (1.0 / fan_in as f64).sqrt()).expect("finite std");
                (0..n).map(|_| normal.sample(&mut rng)).collect()
            };
            Tensor::from_f64(&s.dims, &data).expect("layout dims")
        });
        Ok(params)
    }

    /// Assembles parameters from tensors in canonical order, checking every
    /// name and shape against the layout for `config`.
    pub fn from_named(
        config: &ModelConfig,
        arch: Arch,
        tensors: Vec<(String, Tensor<F>)>,
    ) -> Result<Self> {
        check_dtype::<F>(config)?;
        config.validate()?;
        let specs = tensor_specs(config, arch);
        if specs.len() != tensors.len() {
            return Err(Error::InvalidConfig(format!(
                "expected {} tensors for this config, found {}",
                specs.len(),
                tensors.len()
            )));
        }
        for (s, (name, t)) in specs.iter().zip(&tensors) {
            if &s.name != name || s.dims != t.dims() {
                return Err(Error::TensorShape {
                    name: name.clone(),
                    expected: s.dims.clone(),
                    found: t.dims().to_vec(),
                });
            }
        }
        let mut it = tensors.into_iter().map(|(_, t)| t);
        Ok(layout(config, arch).map(&mut |_, _| it.next().expect("length checked")))
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor<F>)> {
        let mut out = Vec::new();
        self.map(&mut |n, t| out.push((n.to_string(), t)));
        out
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.map(&mut |_, t| n += t.len());
        n
    }

    pub fn cast<G: Scalar>(&self) -> Parameters<Tensor<G>> {
        let mut out = self.map(&mut |_, t| t.cast::<G>());
        out.config.dtype = G::DTYPE;
        out
    }
}

pub(crate) fn check_dtype<F: Scalar>(config: &ModelConfig) -> Result<()> {
    if config.dtype != F::DTYPE {
        return Err(Error::Dtype {
            config: config.dtype.name(),
            runtime: F::DTYPE.name(),
        });
    }
    Ok(())
}
