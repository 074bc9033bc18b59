mod common;

use common::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rgdesk::checkpoint::{
    checkpoint_bytes, checkpoint_from_bytes, load_checkpoint, save_checkpoint,
};
use rgdesk::config::{Arch, Dtype, ModelConfig};
use rgdesk::engine::{generate, process_prompt, GenerationRequest, SamplerSpec};
use rgdesk::error::Error;
use rgdesk::layers::ModelParams;
use rgdesk::state::{state_bytes, InferenceState};
use rgdesk::training::DecayMask;

fn serialized_len_after(p: &ModelParams<f32>, tokens: usize) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(tokens as u64);
    let prompt = random_tokens(&mut rng, tokens, 259);
    let (s, _) = process_prompt(p, &prompt).unwrap();
    let bytes = s.serialize();
    assert_eq!(
        s.logical_bytes() as u64,
        state_bytes(&p.config, p.arch, tokens as u64)
    );
    bytes.len()
}

#[test]
fn recurrent_state_is_bounded() {
    let p = ModelParams::<f32>::init(&desk(), Arch::Recurrent, 1).unwrap();
    let lens: Vec<usize> = [10, 100, 10_000]
        .iter()
        .map(|&n| serialized_len_after(&p, n))
        .collect();
    assert!(lens.windows(2).all(|w| w[0] == w[1]), "{lens:?}");
}

#[test]
fn baseline_state_grows() {
    let p = ModelParams::<f32>::init(&desk(), Arch::GlobalBaseline, 1).unwrap();
    let lens: Vec<usize> = [10, 100, 1000]
        .iter()
        .map(|&n| serialized_len_after(&p, n))
        .collect();
    assert!(lens.windows(2).all(|w| w[0] < w[1]), "{lens:?}");
    assert!(state_bytes(&p.config, p.arch, 10_000) > state_bytes(&p.config, p.arch, 1000));
}

#[test]
fn state_round_trip_is_bit_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for arch in [Arch::Recurrent, Arch::GlobalBaseline] {
        let p = ModelParams::<f32>::init(&desk(), arch, 2).unwrap();
        for len in [1, 5, 50] {
            let (s, _) = process_prompt(&p, &random_tokens(&mut rng, len, 259)).unwrap();
            let bytes = s.serialize();
            let back = InferenceState::<f32>::deserialize(&bytes, &p.config, arch).unwrap();
            assert_eq!(back.serialize(), bytes);
            let a: Vec<u64> = state_values(&s).iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = state_values(&back).iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b);
            assert_eq!(back.tokens_processed, s.tokens_processed);
        }
    }
}

#[test]
fn resumed_generation_matches_twin() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for arch in [Arch::Recurrent, Arch::GlobalBaseline] {
        let p = ModelParams::<f32>::init(&desk(), arch, 3).unwrap();
        let prompt = random_tokens(&mut rng, 30, 259);
        let (s, _) = process_prompt(&p, &prompt[..20]).unwrap();
        let restored = InferenceState::deserialize(&s.serialize(), &p.config, arch).unwrap();
        let req = |state| {
            GenerationRequest::new(prompt[20..].to_vec(), 40)
                .sampler(SamplerSpec::top_k(20, 0.9, 5))
                .resume(state)
        };
        let twin = generate(&p, req(s)).unwrap();
        let resumed = generate(&p, req(restored)).unwrap();
        assert_eq!(twin, resumed);
        // And both equal a run over the whole prompt from scratch.
        let fresh = generate(
            &p,
            GenerationRequest::new(prompt.clone(), 40).sampler(SamplerSpec::top_k(20, 0.9, 5)),
        )
        .unwrap();
        assert_eq!(fresh, twin);
    }
}

#[test]
fn state_rejects_wrong_model() {
    let p = ModelParams::<f32>::init(&desk(), Arch::Recurrent, 1).unwrap();
    let (s, _) = process_prompt(&p, &[1, 2, 3]).unwrap();
    let bytes = s.serialize();
    let other = ModelConfig {
        attention_window: 16,
        ..desk()
    };
    assert!(matches!(
        InferenceState::<f32>::deserialize(&bytes, &other, Arch::Recurrent),
        Err(Error::ConfigHash { .. })
    ));
    assert!(InferenceState::<f32>::deserialize(&bytes, &desk(), Arch::GlobalBaseline).is_err());
    assert!(matches!(
        InferenceState::<f32>::deserialize(&bytes[..bytes.len() - 1], &desk(), Arch::Recurrent),
        Err(Error::Truncated { .. })
    ));
}

fn sample_run<F: rgdesk::numerics::Scalar>(p: &ModelParams<F>) -> Vec<u32> {
    let req =
        GenerationRequest::new(vec![256, 104, 105], 30).sampler(SamplerSpec::temperature(0.7, 2));
    generate(p, req).unwrap()
}

#[test]
fn checkpoint_round_trip_then_generate() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.rgck");
    let p = ModelParams::<f32>::init(&desk(), Arch::Recurrent, 8).unwrap();
    let mask = DecayMask::for_params(&p);
    save_checkpoint(&path, &p, &mask).unwrap();
    let (q, m) = load_checkpoint::<f32>(&path).unwrap();
    assert_eq!(m, mask);
    assert_eq!(
        checkpoint_bytes(&q, &m).unwrap(),
        std::fs::read(&path).unwrap()
    );
    assert_eq!(sample_run(&p), sample_run(&q));

    let cfg = ModelConfig {
        dtype: Dtype::F64,
        ..desk()
    };
    let p = ModelParams::<f64>::init(&cfg, Arch::GlobalBaseline, 8).unwrap();
    let bytes = checkpoint_bytes(&p, &DecayMask::for_params(&p)).unwrap();
    let (q, _) = checkpoint_from_bytes::<f64>(&bytes).unwrap();
    assert_eq!(q, p);
    assert_eq!(sample_run(&p), sample_run(&q));
}
