//! Completeness, superposition and attribution oracles on a desk-scale model.

use std::time::Instant;

use bcos_diffusion::diffusion::{DiffusionSchedule, SamplerConfig, ScheduleConfig};
use bcos_diffusion::interpret::record_frozen_run;
use bcos_diffusion::model::{Model, UNetConfig};
use bcos_diffusion::prompt::{Prompt, Vocab, EOS};
use bcos_diffusion::rng::{normal_tensor, Stream};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn desk() -> (Model, DiffusionSchedule) {
    (
        Model::new(UNetConfig::desk(), Vocab::default(), 7).unwrap(),
        DiffusionSchedule::new(ScheduleConfig::default()).unwrap(),
    )
}

fn det(steps: usize, seed: u64) -> SamplerConfig {
    SamplerConfig { steps, seed, eta: 0.0 }
}

#[test]
fn completeness_and_superposition() {
    let start = Instant::now();
    let (model, s) = desk();
    let p = model.parse_prompt("a small magenta triangle on the stock photo").unwrap();
    let run = record_frozen_run(&model, &s, &p, det(4, 21)).unwrap();
    let x = run.embedding().clone();
    let full = run.replay(&x).unwrap();
    let bias = run.bias_term().unwrap();
    let recon = run.reconstruction(&x).unwrap();
    assert!(full.bit_eq(&run.sample()));
    let parts = run.decompose(&x).unwrap();
    assert!(parts.bias.bit_eq(&bias));
    assert!(parts.reconstruction.bit_eq(&recon));
    assert!(parts.recompose().bit_eq(&run.sample()));
    // Without the residual the round trip is only exact up to rounding.
    let naive = recon.add(&bias).unwrap();
    assert!(naive.max_abs_diff(&full) <= 4.0 * f64::EPSILON * full.max_abs());

    let x2 = normal_tensor(5, Stream::Custom(0), x.shape()).scale(0.3);
    let (a, b) = (1.7, -0.6);
    let combo = x.scale(a).add(&x2.scale(b)).unwrap();
    let lhs = run.reconstruction(&combo).unwrap();
    let rhs = recon.scale(a).add(&run.reconstruction(&x2).unwrap().scale(b)).unwrap();
    let rel = lhs.sub(&rhs).unwrap().norm() / rhs.norm();
    assert!(rel < 1e-8, "superposition error {rel:.3e}");
    let doubled = run.reconstruction(&x.scale(2.0)).unwrap();
    assert!(doubled.sub(&recon.scale(2.0)).unwrap().norm() / recon.norm() < 1e-8);
    assert!(start.elapsed().as_secs_f64() < 30.0);
}

fn random_prompt(rng: &mut ChaCha8Rng, vocab: &Vocab, max_tokens: usize) -> Prompt {
    let len = rng.gen_range(1..=max_tokens - 2);
    let ids: Vec<usize> = (0..len).map(|_| rng.gen_range(EOS + 1..vocab.len())).collect();
    Prompt::from_word_ids(&ids, max_tokens).unwrap()
}

#[test]
fn fused_relevance_matches_per_token_replay() {
    let start = Instant::now();
    let (model, s) = desk();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for k in 0..20 {
        let p = random_prompt(&mut rng, &model.vocab, model.config.max_tokens);
        let run = record_frozen_run(&model, &s, &p, det(4, k)).unwrap();
        let fused = run.relevance(&model.vocab).unwrap();
        let oracle = run.relevance_by_replay(&model.vocab).unwrap();
        let mut total = 0.0;
        for (f, o) in fused.tokens.iter().zip(&oracle.tokens) {
            assert!((f.score - o.score).abs() < 1e-6, "prompt {k}: {f:?} vs {o:?}");
            if f.masked {
                assert_eq!(f.score.to_bits(), 0.0f64.to_bits());
            } else {
                total += f.score;
            }
        }
        assert!((total - 1.0).abs() < 1e-6);
    }
    assert!(start.elapsed().as_secs_f64() < 120.0);
}

#[test]
fn token_maps_are_additive() {
    let (model, s) = desk();
    let p = model.parse_prompt("the large green cross with a photo").unwrap();
    let run = record_frozen_run(&model, &s, &p, det(4, 1)).unwrap();
    let total = bcos_diffusion::interpret::channel_sum(&run.reconstruction(run.embedding()).unwrap());
    let mut acc = bcos_diffusion::Tensor::zeros(total.shape());
    for i in p.content_positions() {
        acc.accumulate(&run.token_attribution_map(i).unwrap()).unwrap();
    }
    assert!(acc.sub(&total).unwrap().norm() / total.norm() < 1e-8);
    for i in (0..p.len()).filter(|&i| !p.mask()[i]) {
        assert!(run.token_attribution_map(i).is_err());
    }
}

#[test]
fn tape_memory_grows_linearly_with_steps() {
    let model = Model::new(UNetConfig::tiny(), Vocab::default(), 3).unwrap();
    let s = DiffusionSchedule::new(ScheduleConfig::default()).unwrap();
    let p = model.parse_prompt("a red ring").unwrap();
    let sizes: Vec<usize> = (1..=4)
        .map(|k| record_frozen_run(&model, &s, &p, det(k, 0)).unwrap().stored_elements())
        .collect();
    let per_step = sizes[1] - sizes[0];
    for w in sizes.windows(2) {
        assert_eq!(w[1] - w[0], per_step);
    }
}

#[test]
fn attention_sink_keeps_the_run_linear() {
    let config = UNetConfig { attention_sink: true, ..UNetConfig::tiny() };
    let model = Model::new(config, Vocab::default(), 4).unwrap();
    let s = DiffusionSchedule::new(ScheduleConfig::default()).unwrap();
    let p = model.parse_prompt("the small blue ring on a photo").unwrap();
    let run = record_frozen_run(&model, &s, &p, det(3, 2)).unwrap();
    let x = run.embedding().clone();
    assert!(run.decompose(&x).unwrap().recompose().bit_eq(&run.sample()));
    let doubled = run.reconstruction(&x.scale(2.0)).unwrap();
    let recon = run.reconstruction(&x).unwrap();
    assert!(doubled.sub(&recon.scale(2.0)).unwrap().norm() / recon.norm() < 1e-8);
    let fused = run.relevance(&model.vocab).unwrap();
    let oracle = run.relevance_by_replay(&model.vocab).unwrap();
    for (f, o) in fused.tokens.iter().zip(&oracle.tokens) {
        assert!((f.score - o.score).abs() < 1e-6);
    }
}
