//! Batched DDIM generation.

use crate::diffusion::{initial_noise, sample_loop, DiffusionSchedule, SamplerConfig};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::Ctx;
use crate::prompt::{batch_keep, Prompt};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Encoded samples `[6, H, W]`, one per `(prompt, seed)` pair.
///
/// Each item's starting noise comes from its own seed, so results do not
/// depend on how items are grouped. `config.seed` is only used for the fresh
/// noise of `η > 0` steps.
pub fn generate(
    model: &Model,
    schedule: &DiffusionSchedule,
    items: &[(Prompt, u64)],
    config: SamplerConfig,
) -> Result<Vec<Tensor>> {
    if items.is_empty() {
        return Ok(Vec::new());
    }
    let prompts: Vec<Prompt> = items.iter().map(|(p, _)| p.clone()).collect();
    let one = model.image_shape(1);
    let noise: Vec<Tensor> = items.iter().map(|&(_, seed)| initial_noise(schedule, seed, &one)).collect();
    let refs: Vec<&Tensor> = noise.iter().collect();
    let x_init = Tensor::concat(&refs, 0)?;
    let y = model.embedder.embed(&model.store, &prompts)?;
    let keep = batch_keep(&prompts);
    let mut tape = Tape::new();
    let mut ctx = Ctx::new(&mut tape, &model.store, false, false);
    let x = ctx.tape.constant(x_init);
    let y = ctx.tape.constant(y);
    let n = items.len();
    let traj = sample_loop(&mut ctx, schedule, x, config, model.config.prediction, |ctx, x, t| {
        model.denoise(ctx, x, &vec![t; n], y, &keep)
    })?;
    let out = ctx.tape.value(*traj.last().expect("trajectory is nonempty")).clone();
    if !out.is_finite() {
        return Err(Error::Degenerate("sampler produced non-finite values".into()));
    }
    let per = out.len() / n;
    let shape = &one[1..];
    out.data()
        .chunks(per)
        .map(|c| Tensor::new(shape, c.to_vec()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::ScheduleConfig;
    use crate::model::UNetConfig;
    use crate::prompt::Vocab;

    #[test]
    fn single_step_returns_prediction_at_t() {
        let model = Model::new(UNetConfig::tiny(), Vocab::default(), 2).unwrap();
        let s = DiffusionSchedule::new(ScheduleConfig::default()).unwrap();
        let p = model.parse_prompt("a blue ring").unwrap();
        let cfg = SamplerConfig {
            steps: 1,
            seed: 0,
            eta: 0.0,
        };
        let out = generate(&model, &s, &[(p.clone(), 5)], cfg).unwrap();
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &model.store, false, false);
        let x = ctx.tape.constant(initial_noise(&s, 5, &model.image_shape(1)));
        let y = ctx.tape.constant(model.embedder.embed(&model.store, std::slice::from_ref(&p)).unwrap());
        let pred = model.denoise(&mut ctx, x, &[1000], y, &batch_keep(&[p])).unwrap();
        let pred = ctx.tape.value(pred).reshape(out[0].shape()).unwrap();
        assert!(out[0].bit_eq(&pred));
    }

    #[test]
    fn seeds_are_per_item() {
        let model = Model::new(UNetConfig::tiny(), Vocab::default(), 2).unwrap();
        let s = DiffusionSchedule::new(ScheduleConfig::default()).unwrap();
        let p = model.parse_prompt("a blue ring").unwrap();
        let q = model.parse_prompt("the red cross").unwrap();
        let cfg = SamplerConfig {
            steps: 2,
            seed: 0,
            eta: 0.0,
        };
        let a = generate(&model, &s, &[(p.clone(), 5)], cfg).unwrap();
        let b = generate(&model, &s, &[(p, 5)], cfg).unwrap();
        assert!(a[0].bit_eq(&b[0]));
        let both = generate(&model, &s, &[(q, 9), (model.parse_prompt("a blue ring").unwrap(), 5)], cfg).unwrap();
        assert!(both[1].max_abs_diff(&a[0]) < 1e-12);
    }
}
