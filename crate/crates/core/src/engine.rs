//! Prompt processing and autoregressive decoding.
//!
//! A prompt is ingested in one pass: projections, norms and the MLP run over
//! all rows at once, the RG-LRU runs as an associative scan and attention uses
//! a banded mask. Decoding then advances the state one token at a time. Both
//! paths go through [`prefill`], which handles any number of sequences, each
//! contributing a run of rows.

use std::fmt;
use std::str::FromStr;

use crate::chatfmt::{encode_with_control, format_dialogue, Dialogue, TokenStream, BOS};
use crate::error::{Error, Result};
use crate::layers::{embed, forward_blocks, unembed, ModelParams, Segment};
use crate::numerics::{Scalar, Tensor};
use crate::state::InferenceState;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplerMode {
    Greedy,
    Temperature,
    TopK,
}

/// How the next token is chosen from logits.
///
/// Random draws come from a counter-based generator keyed by `(seed,
/// position)`, so a sequence samples the same tokens whichever batch it runs
/// in.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerSpec {
    pub mode: SamplerMode,
    pub temperature: f64,
    pub k: usize,
    pub seed: u64,
}

impl Default for SamplerSpec {
    fn default() -> Self {
        Self::greedy()
    }
}

impl SamplerSpec {
    pub fn greedy() -> Self {
        SamplerSpec {
            mode: SamplerMode::Greedy,
            temperature: 1.0,
            k: 1,
            seed: 0,
        }
    }

    pub fn temperature(temperature: f64, seed: u64) -> Self {
        SamplerSpec {
            mode: SamplerMode::Temperature,
            temperature,
            k: 1,
            seed,
        }
    }

    pub fn top_k(k: usize, temperature: f64, seed: u64) -> Self {
        SamplerSpec {
            mode: SamplerMode::TopK,
            temperature,
            k,
            seed,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        match self.mode {
            SamplerMode::Greedy => Ok(()),
            _ if !(self.temperature > 0.0 && self.temperature.is_finite()) => {
                Err(Error::Domain(format!(
                    "sampler temperature must be positive, got {}",
                    self.temperature
                )))
            }
            SamplerMode::TopK if self.k == 0 => Err(Error::Domain("top-k needs k >= 1".into())),
            _ => Ok(()),
        }
    }

    /// Picks a token for sequence position `position`.
    pub fn sample<F: Scalar>(&self, logits: &[F], position: u64) -> u32 {
        match self.mode {
            SamplerMode::Greedy => argmax(logits),
            SamplerMode::Temperature => {
                let idx: Vec<usize> = (0..logits.len()).collect();
                self.draw(logits, &idx, position)
            }
            SamplerMode::TopK => {
                let mut idx: Vec<usize> = (0..logits.len()).collect();
                // Highest first; ties keep the lower id, matching argmax.
                idx.sort_by(|&a, &b| {
                    logits[b]
                        .partial_cmp(&logits[a])
                        .unwrap_or(std::cmp::Ordering::Equal)
                        .then(a.cmp(&b))
                });
                idx.truncate(self.k.min(logits.len()));
                if idx.len() == 1 {
                    return idx[0] as u32;
                }
                self.draw(logits, &idx, position)
            }
        }
    }

    fn draw<F: Scalar>(&self, logits: &[F], idx: &[usize], position: u64) -> u32 {
        let t = self.temperature;
        let m = idx
            .iter()
            .map(|&i| logits[i].as_f64())
            .fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = idx
            .iter()
            .map(|&i| ((logits[i].as_f64() - m) / t).exp())
            .collect();
        let total: f64 = weights.iter().sum();
        let mut u = uniform(self.seed, position) * total;
        for (&i, &w) in idx.iter().zip(&weights) {
            if u < w {
                return i as u32;
            }
            u -= w;
        }
        *idx.last().expect("non-empty support") as u32
    }
}

impl fmt::Display for SamplerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.mode {
            SamplerMode::Greedy => write!(f, "greedy"),
            SamplerMode::Temperature => write!(f, "temperature:{}", self.temperature),
            SamplerMode::TopK => write!(f, "top_k:{}:{}", self.k, self.temperature),
        }
    }
}

/// Parses `greedy`, `temperature:T`, `top_k:K` or `top_k:K:T`. The seed is
/// left at zero.
impl FromStr for SamplerSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Domain(format!("cannot parse sampler `{s}`"));
        let parts: Vec<&str> = s.split(':').collect();
        let spec = match parts.as_slice() {
            ["greedy"] => Self::greedy(),
            ["temperature", t] => Self::temperature(t.parse().map_err(|_| bad())?, 0),
            ["top_k", k] => Self::top_k(k.parse().map_err(|_| bad())?, 1.0, 0),
            ["top_k", k, t] => Self::top_k(
                k.parse().map_err(|_| bad())?,
                t.parse().map_err(|_| bad())?,
                0,
            ),
            _ => return Err(bad()),
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Index of the largest logit; the lowest index wins ties.
pub fn argmax<F: Scalar>(logits: &[F]) -> u32 {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best as u32
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Uniform draw in `[0, 1)` that depends only on `(seed, position)`.
pub fn uniform(seed: u64, position: u64) -> f64 {
    let bits = splitmix64(seed ^ splitmix64(position));
    (bits >> 11) as f64 / (1u64 << 53) as f64
}

/// One generation job.
#[derive(Debug, Clone)]
pub struct GenerationRequest<F> {
    pub prompt: TokenStream,
    pub max_new_tokens: usize,
    pub sampler: SamplerSpec,
    pub stop_ids: Vec<u32>,
    /// Continue from this state instead of a fresh one; the prompt is fed on
    /// top of it.
    pub resume: Option<InferenceState<F>>,
}

impl<F: Scalar> GenerationRequest<F> {
    pub fn new(prompt: TokenStream, max_new_tokens: usize) -> Self {
        GenerationRequest {
            prompt,
            max_new_tokens,
            sampler: SamplerSpec::greedy(),
            stop_ids: Vec::new(),
            resume: None,
        }
    }

    pub fn sampler(mut self, sampler: SamplerSpec) -> Self {
        self.sampler = sampler;
        self
    }

    pub fn stop_ids(mut self, ids: Vec<u32>) -> Self {
        self.stop_ids = ids;
        self
    }

    pub fn resume(mut self, state: InferenceState<F>) -> Self {
        self.resume = Some(state);
        self
    }
}

fn check_state<F: Scalar>(params: &ModelParams<F>, state: &InferenceState<F>) -> Result<()> {
    let expected = params.config.hash();
    if state.config_hash() != expected {
        return Err(Error::ConfigHash {
            expected,
            found: state.config_hash(),
        });
    }
    if state.arch() != params.arch {
        return Err(Error::Domain(format!(
            "state is for the {} architecture, parameters are {}",
            state.arch().name(),
            params.arch.name()
        )));
    }
    Ok(())
}

/// Feeds `chunks[i]` into `states[i]` for every lane in one pass and returns
/// the logits at each chunk's last position, one row per lane.
pub fn prefill<F: Scalar>(
    params: &ModelParams<F>,
    states: &mut [&mut InferenceState<F>],
    chunks: &[&[u32]],
) -> Result<Tensor<F>> {
    if states.len() != chunks.len() {
        return Err(crate::error::shape_err("prefill", "one chunk per state"));
    }
    if chunks.iter().any(|c| c.is_empty()) {
        return Err(Error::Empty("prompt"));
    }
    for s in states.iter() {
        check_state(params, s)?;
    }
    let tokens: Vec<u32> = chunks.concat();
    // Token ids are validated here, before any state is touched.
    let x = embed(&tokens, &params.embed)?;
    let lens: Vec<usize> = chunks.iter().map(|c| c.len()).collect();
    let segments = Segment::tile(&lens);
    let hidden = forward_blocks(params, x, &segments, states)?;
    let d = hidden.cols();
    let mut last = Vec::with_capacity(segments.len() * d);
    for seg in &segments {
        last.extend_from_slice(hidden.row(seg.start + seg.len - 1));
    }
    unembed(
        &Tensor::from_vec(&[segments.len(), d], last)?,
        &params.embed,
    )
}

/// Builds a state from `prompt` and returns it with the final position's
/// logits.
pub fn process_prompt<F: Scalar>(
    params: &ModelParams<F>,
    prompt: &[u32],
) -> Result<(InferenceState<F>, Vec<F>)> {
    let mut out = process_prompts(params, &[prompt])?;
    Ok(out.pop().expect("one lane"))
}

/// Tokens per lane fed through the stack at once when processing prompts.
/// Every position inside a tile is computed in parallel; tiles keep the
/// activations small enough to stay in cache.
pub const PROMPT_TILE: usize = 32;

/// [`prefill`] in tiles of [`PROMPT_TILE`] tokens per lane. Chunks may have
/// different lengths; the result still holds each lane's last-position logits.
pub fn prefill_tiled<F: Scalar>(
    params: &ModelParams<F>,
    states: &mut [&mut InferenceState<F>],
    chunks: &[&[u32]],
) -> Result<Tensor<F>> {
    if states.len() != chunks.len() {
        return Err(crate::error::shape_err("prefill", "one chunk per state"));
    }
    let vocab = params.config.vocab_size;
    for c in chunks {
        if c.is_empty() {
            return Err(Error::Empty("prompt"));
        }
        if let Some(&id) = c.iter().find(|&&id| id as usize >= vocab) {
            return Err(Error::TokenOutOfRange { id, vocab });
        }
    }
    let mut last = Tensor::zeros(&[chunks.len(), vocab]);
    let longest = chunks.iter().map(|c| c.len()).max().unwrap_or(0);
    for t0 in (0..longest).step_by(PROMPT_TILE) {
        let lanes: Vec<usize> = (0..chunks.len())
            .filter(|&i| chunks[i].len() > t0)
            .collect();
        let tiles: Vec<&[u32]> = lanes
            .iter()
            .map(|&i| &chunks[i][t0..chunks[i].len().min(t0 + PROMPT_TILE)])
            .collect();
        let logits = {
            let mut refs: Vec<&mut InferenceState<F>> = select_mut(states, &lanes)
                .into_iter()
                .map(|s| &mut **s)
                .collect();
            prefill(params, &mut refs, &tiles)?
        };
        for (row, &i) in lanes.iter().enumerate() {
            if chunks[i].len() <= t0 + PROMPT_TILE {
                last.row_mut(i).copy_from_slice(logits.row(row));
            }
        }
    }
    Ok(last)
}

/// [`process_prompt`] for several prompts processed together.
pub fn process_prompts<F: Scalar>(
    params: &ModelParams<F>,
    prompts: &[&[u32]],
) -> Result<Vec<(InferenceState<F>, Vec<F>)>> {
    let mut states = (0..prompts.len())
        .map(|_| InferenceState::fresh(&params.config, params.arch))
        .collect::<Result<Vec<_>>>()?;
    let logits = {
        let mut refs: Vec<&mut InferenceState<F>> = states.iter_mut().collect();
        prefill_tiled(params, &mut refs, prompts)?
    };
    Ok(states
        .into_iter()
        .enumerate()
        .map(|(i, s)| (s, logits.row(i).to_vec()))
        .collect())
}

/// Advances `state` by one token and returns the next-token logits.
pub fn decode_step<F: Scalar>(
    params: &ModelParams<F>,
    state: &mut InferenceState<F>,
    token: u32,
) -> Result<Vec<F>> {
    Ok(prefill(params, &mut [state], &[&[token]])?.into_data())
}

/// One decode step for a batch of sequences; row `i` of the result holds
/// lane `i`'s logits.
pub fn decode_batch<F: Scalar>(
    params: &ModelParams<F>,
    states: &mut [&mut InferenceState<F>],
    tokens: &[u32],
) -> Result<Tensor<F>> {
    let chunks: Vec<[u32; 1]> = tokens.iter().map(|&t| [t]).collect();
    let chunks: Vec<&[u32]> = chunks.iter().map(|c| c.as_slice()).collect();
    prefill(params, states, &chunks)
}

/// Runs one request and returns the continuation (without the prompt). A
/// sampled stop id is included as the final token.
pub fn generate<F: Scalar>(
    params: &ModelParams<F>,
    request: GenerationRequest<F>,
) -> Result<TokenStream> {
    Ok(generate_batch(params, vec![request])?
        .pop()
        .expect("one lane"))
}

/// Runs requests together. Each lane produces exactly what [`generate`] would
/// produce for it alone; finished lanes are left idle while others continue.
pub fn generate_batch<F: Scalar>(
    params: &ModelParams<F>,
    requests: Vec<GenerationRequest<F>>,
) -> Result<Vec<TokenStream>> {
    let mut hashes = requests
        .iter()
        .filter_map(|r| r.resume.as_ref().map(|s| s.config_hash()));
    if let Some(first) = hashes.next() {
        if hashes.any(|h| h != first) {
            return Err(Error::MixedConfigs);
        }
    }
    let vocab = params.config.vocab_size;
    for r in &requests {
        r.sampler.validate()?;
        if r.prompt.is_empty() {
            return Err(Error::Empty("prompt"));
        }
        if let Some(&id) = r.prompt.iter().find(|&&id| id as usize >= vocab) {
            return Err(Error::TokenOutOfRange { id, vocab });
        }
    }

    let mut outputs: Vec<TokenStream> = vec![Vec::new(); requests.len()];
    let mut lanes: Vec<usize> = (0..requests.len())
        .filter(|&i| requests[i].max_new_tokens > 0)
        .collect();
    if lanes.is_empty() {
        return Ok(outputs);
    }
    let mut states: Vec<InferenceState<F>> = Vec::with_capacity(requests.len());
    for r in &requests {
        states.push(match &r.resume {
            Some(s) => s.clone(),
            None => InferenceState::fresh(&params.config, params.arch)?,
        });
    }

    let mut logits = {
        let chunks: Vec<&[u32]> = lanes
            .iter()
            .map(|&i| requests[i].prompt.as_slice())
            .collect();
        let mut refs = select_mut(&mut states, &lanes);
        prefill_tiled(params, &mut refs, &chunks)?
    };
    loop {
        let mut next_lanes = Vec::with_capacity(lanes.len());
        let mut next_tokens = Vec::with_capacity(lanes.len());
        for (row, &i) in lanes.iter().enumerate() {
            let r = &requests[i];
            let tok = r
                .sampler
                .sample(logits.row(row), states[i].tokens_processed);
            outputs[i].push(tok);
            if !r.stop_ids.contains(&tok) && outputs[i].len() < r.max_new_tokens {
                next_lanes.push(i);
                next_tokens.push(tok);
            }
        }
        if next_lanes.is_empty() {
            return Ok(outputs);
        }
        lanes = next_lanes;
        let mut refs = select_mut(&mut states, &lanes);
        logits = decode_batch(params, &mut refs, &next_tokens)?;
    }
}

/// Mutable references to `items[idx[0]], items[idx[1]], ...` for strictly
/// increasing `idx`.
fn select_mut<'a, T>(items: &'a mut [T], idx: &[usize]) -> Vec<&'a mut T> {
    let mut out = Vec::with_capacity(idx.len());
    let mut want = idx.iter().peekable();
    for (i, item) in items.iter_mut().enumerate() {
        if want.peek() == Some(&&i) {
            out.push(item);
            want.next();
        }
    }
    out
}

/// Prompt for a chat continuation: BOS, then the formatted dialogue with
/// control strings mapped to control ids.
pub fn chat_prompt(dialogue: &Dialogue) -> Result<TokenStream> {
    let mut ids = vec![BOS];
    ids.extend(encode_with_control(&format_dialogue(dialogue)?));
    Ok(ids)
}
