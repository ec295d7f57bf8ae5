//! Explanations of a complete sampling run.
//!
//! A [`FrozenRun`] records a deterministic DDIM run on one tape with every
//! dynamic coefficient frozen: cosine factors, attention matrices and
//! normalization scales. With those fixed, the map from prompt embedding to
//! final sample is affine. Its constant part comes from the starting noise,
//! the timestep features and the μ offsets of the sampler; its linear part
//! is the dynamic-linear summary `W(x)`, which is never materialized:
//!
//! * reconstruction `W(x)·x = replay(x) − replay(0)`,
//! * relevance from one vector-Jacobian product with an all-ones cotangent.

use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::diffusion::{initial_noise, sample_loop, DiffusionSchedule, SamplerConfig};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::{BcosProbe, Ctx};
use crate::prompt::{batch_keep, Prompt, Vocab};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Denominators of the normalized reconstruction below this are undefined.
pub const DEFAULT_DIV_EPS: f64 = 1e-6;

pub struct FrozenRun {
    tape: Tape,
    y: NodeId,
    output: NodeId,
    trajectory: Vec<NodeId>,
    probes: Vec<BcosProbe>,
    prompt: Prompt,
    embedding: Tensor,
    pub config: SamplerConfig,
}

/// Run deterministic DDIM for `prompt` with every dynamic coefficient frozen.
pub fn record_frozen_run(
    model: &Model,
    schedule: &DiffusionSchedule,
    prompt: &Prompt,
    config: SamplerConfig,
) -> Result<FrozenRun> {
    if config.eta != 0.0 {
        return Err(Error::Config(format!(
            "explanations need deterministic sampling (eta = 0), got eta = {}",
            config.eta
        )));
    }
    let prompts = std::slice::from_ref(prompt);
    let embedding = model.embedder.embed(&model.store, prompts)?;
    let keep = batch_keep(prompts);
    let mut tape = Tape::new();
    let (y, trajectory, probes) = {
        let mut ctx = Ctx::new(&mut tape, &model.store, false, true).with_probes();
        let y = ctx.tape.input(embedding.clone());
        let x = ctx.tape.constant(initial_noise(schedule, config.seed, &model.image_shape(1)));
        let traj = sample_loop(&mut ctx, schedule, x, config, model.config.prediction, |ctx, x, t| {
            model.denoise(ctx, x, &[t], y, &keep)
        })?;
        (y, traj, ctx.take_probes())
    };
    let output = *trajectory.last().expect("trajectory is nonempty");
    Ok(FrozenRun {
        tape,
        y,
        output,
        trajectory,
        probes,
        prompt: prompt.clone(),
        embedding,
        config,
    })
}

/// Normalized reconstruction: per-channel ratio image plus the pixels where it is undefined.
#[derive(Debug, Clone)]
pub struct NormalizedReconstruction {
    /// `[3, H, W]`; NaN where undefined, otherwise clamped to `[0, 1]`.
    pub image: Tensor,
    /// Flat indices into `image` whose denominator was below the threshold.
    pub undefined: Vec<usize>,
}

impl NormalizedReconstruction {
    /// Mean squared error against `reference` over defined entries only.
    pub fn mse(&self, reference: &Tensor) -> Result<f64> {
        if reference.shape() != self.image.shape() {
            return Err(Error::shape(
                "normalized_reconstruction",
                format!("{:?} vs {:?}", reference.shape(), self.image.shape()),
            ));
        }
        let (mut sum, mut n) = (0.0, 0usize);
        for (a, b) in self.image.data().iter().zip(reference.data()) {
            if a.is_finite() {
                sum += (a - b) * (a - b);
                n += 1;
            }
        }
        if n == 0 {
            return Err(Error::Degenerate("normalized reconstruction is undefined everywhere".into()));
        }
        Ok(sum / n as f64)
    }

    /// Copy for display: undefined entries shown as 0.
    pub fn display(&self) -> Tensor {
        self.image.map(|v| if v.is_finite() { v } else { 0.0 })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenScore {
    pub position: usize,
    pub id: usize,
    pub word: String,
    pub masked: bool,
    /// `Σ_k g_k·x_k` for this token.
    pub contribution: f64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelevanceReport {
    pub tokens: Vec<TokenScore>,
    pub prompt_text: String,
    pub seed: u64,
}

impl RelevanceReport {
    pub fn unmasked(&self) -> impl Iterator<Item = &TokenScore> {
        self.tokens.iter().filter(|t| !t.masked)
    }

    /// Unmasked tokens scoring below `threshold`.
    pub fn low_relevance(&self, threshold: f64) -> Vec<&TokenScore> {
        self.unmasked().filter(|t| t.score < threshold).collect()
    }

    pub fn table(&self, threshold: f64) -> String {
        let mut out = format!("# prompt: {}\n# seed: {}\nposition\ttoken\tid\tscore\tflag\n", self.prompt_text, self.seed);
        for t in self.unmasked() {
            let flag = if t.score < threshold { "low" } else { "" };
            out.push_str(&format!("{}\t{}\t{}\t{:.6}\t{flag}\n", t.position, t.word, t.id, t.score));
        }
        out
    }
}

/// Scores `|c_i| / Σ_j |c_j|` over unmasked positions; masked positions get exactly 0.
pub fn normalize_contributions(contributions: &[f64], mask: &[bool]) -> Result<Vec<f64>> {
    let total: f64 = contributions.iter().zip(mask).filter(|(_, &m)| m).map(|(c, _)| c.abs()).sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(Error::Degenerate(
            "all token contributions are zero; relevance is undefined".into(),
        ));
    }
    Ok(contributions
        .iter()
        .zip(mask)
        .map(|(c, &m)| if m { c.abs() / total } else { 0.0 })
        .collect())
}

impl FrozenRun {
    pub fn prompt(&self) -> &Prompt {
        &self.prompt
    }

    /// The recorded prompt embedding `[1, L, d_c]`.
    pub fn embedding(&self) -> &Tensor {
        &self.embedding
    }

    /// The generated encoded sample `[6, H, W]`.
    pub fn sample(&self) -> Tensor {
        let v = self.tape.value(self.output);
        v.reshape(&v.shape()[1..]).expect("batch of one")
    }

    /// Every state from `x_T` to the final sample, each `[1, 6, H, W]`.
    pub fn trajectory(&self) -> Vec<Tensor> {
        self.trajectory.iter().map(|&id| self.tape.value(id).clone()).collect()
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    /// Values stored on the tape; grows with steps × activations per step.
    pub fn stored_elements(&self) -> usize {
        self.tape.stored_elements()
    }

    /// Evaluate the frozen map at prompt embedding `x` `[1, L, d_c]`; returns `[6, H, W]`.
    pub fn replay(&self, x: &Tensor) -> Result<Tensor> {
        if x.shape() != self.embedding.shape() {
            return Err(Error::shape(
                "replay",
                format!("embedding {:?}, run expects {:?}", x.shape(), self.embedding.shape()),
            ));
        }
        let out = self.tape.replay(&[(self.y, x)], &[self.output])?.remove(0);
        out.reshape(&out.shape()[1..])
    }

    /// `replay(0)`: everything the summary does not attribute to the prompt.
    pub fn bias_term(&self) -> Result<Tensor> {
        self.replay(&Tensor::zeros(self.embedding.shape()))
    }

    /// `W(x)·x = replay(x) − replay(0)`, `[6, H, W]`.
    pub fn reconstruction(&self, x: &Tensor) -> Result<Tensor> {
        let bias = self.bias_term()?;
        self.replay(x)?.sub(&bias)
    }

    /// Split the output at `x` into reconstruction and bias, keeping the subtraction's rounding error.
    pub fn decompose(&self, x: &Tensor) -> Result<Decomposition> {
        Decomposition::new(&self.replay(x)?, self.bias_term()?)
    }

    /// Normalized reconstruction of `x`: `R_rgb / (R_rgb + R_comp)` per channel.
    pub fn normalized_reconstruction(&self, x: &Tensor, div_eps: f64) -> Result<NormalizedReconstruction> {
        normalize_reconstruction(&self.reconstruction(x)?, div_eps)
    }

    /// The embedding with every row except `position` zeroed.
    pub fn isolate(&self, position: usize) -> Result<Tensor> {
        let (l, d) = (self.embedding.shape()[1], self.embedding.shape()[2]);
        if position >= l {
            return Err(Error::Config(format!("token index {position} outside prompt of length {l}")));
        }
        let src = self.embedding.data();
        Ok(Tensor::from_fn(self.embedding.shape(), |i| {
            if i / d == position {
                src[i]
            } else {
                0.0
            }
        }))
    }

    /// Per-token contributions `Σ_k g_k·x_k` from one backward pass with an all-ones cotangent.
    pub fn contributions(&self) -> Result<Vec<f64>> {
        let cot = Tensor::ones(self.tape.shape(self.output));
        let mut grads = self.tape.vjp(self.output, cot)?;
        let g = grads
            .take(self.y)
            .unwrap_or_else(|| Tensor::zeros(self.embedding.shape()));
        let d = self.embedding.shape()[2];
        Ok(g.data()
            .chunks(d)
            .zip(self.embedding.data().chunks(d))
            .map(|(gr, xr)| gr.iter().zip(xr).map(|(a, b)| a * b).sum())
            .collect())
    }

    /// Relevance score of every token, from one backward pass.
    pub fn relevance(&self, vocab: &Vocab) -> Result<RelevanceReport> {
        let c = self.contributions()?;
        self.report(vocab, &c)
    }

    /// The same scores from one replay per token (slow reference path).
    pub fn relevance_by_replay(&self, vocab: &Vocab) -> Result<RelevanceReport> {
        let bias = self.bias_term()?;
        let mut c = vec![0.0; self.prompt.len()];
        for i in self.prompt.content_positions() {
            c[i] = self.replay(&self.isolate(i)?)?.sub(&bias)?.sum();
        }
        self.report(vocab, &c)
    }

    fn report(&self, vocab: &Vocab, contributions: &[f64]) -> Result<RelevanceReport> {
        let mask = self.prompt.mask();
        let scores = normalize_contributions(contributions, mask)?;
        let tokens = self
            .prompt
            .ids()
            .iter()
            .enumerate()
            .map(|(i, &id)| TokenScore {
                position: i,
                id,
                word: vocab.word(id).unwrap_or("<?>").to_string(),
                masked: !mask[i],
                contribution: if mask[i] { contributions[i] } else { 0.0 },
                score: scores[i],
            })
            .collect();
        Ok(RelevanceReport {
            tokens,
            prompt_text: self.prompt.text(vocab),
            seed: self.config.seed,
        })
    }

    /// Channel-summed contribution `[H, W]` of the token at `position`.
    pub fn token_attribution_map(&self, position: usize) -> Result<Tensor> {
        if position >= self.prompt.len() || !self.prompt.mask()[position] {
            return Err(Error::Config(format!(
                "token {position} is masked and has no attribution"
            )));
        }
        let contrib = self.replay(&self.isolate(position)?)?.sub(&self.bias_term()?)?;
        Ok(channel_sum(&contrib))
    }

    /// `(|cos|, |output|)` for every B-cos unit evaluation, grouped by layer.
    pub fn alignment_samples(&self) -> Vec<(String, Vec<(f64, f64)>)> {
        self.probes
            .iter()
            .map(|p| {
                let lin = self.tape.value(p.lin);
                let norm = self.tape.value(p.norm);
                let out = self.tape.value(p.out);
                let ns = norm.shape();
                let inner: usize = ns[p.axis + 1..].iter().product();
                let width = lin.shape()[p.axis];
                let pairs = (0..lin.len())
                    .filter_map(|i| {
                        let j = (i / (inner * width)) * inner + i % inner;
                        let n = norm.data()[j];
                        (n > 0.0).then(|| ((lin.data()[i] / n).abs(), out.data()[i].abs()))
                    })
                    .collect();
                (p.layer.clone(), pairs)
            })
            .collect()
    }
}

/// `a + b = s + e` exactly, with `s = fl(a + b)`.
pub fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

/// `output = reconstruction + residual + bias` in exact arithmetic.
///
/// `reconstruction` is the rounded `output − bias`; `residual` holds the
/// rounding error of that subtraction, so [`Decomposition::recompose`]
/// returns the original output bit for bit.
#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition {
    pub reconstruction: Tensor,
    pub residual: Tensor,
    pub bias: Tensor,
}

impl Decomposition {
    pub fn new(output: &Tensor, bias: Tensor) -> Result<Self> {
        if output.shape() != bias.shape() {
            return Err(Error::shape("decompose", format!("{:?} vs {:?}", output.shape(), bias.shape())));
        }
        let (mut hi, mut lo) = (Vec::with_capacity(output.len()), Vec::with_capacity(output.len()));
        for (&a, &b) in output.data().iter().zip(bias.data()) {
            let (s, e) = two_sum(a, -b);
            hi.push(s);
            // A zero output keeps its sign in the residual.
            lo.push(if a == 0.0 { a } else { e });
        }
        Ok(Decomposition {
            reconstruction: Tensor::new(output.shape(), hi)?,
            residual: Tensor::new(output.shape(), lo)?,
            bias,
        })
    }

    /// `bias + reconstruction`, with the stored residual folded back in.
    pub fn recompose(&self) -> Tensor {
        let (r, e, b) = (self.reconstruction.data(), self.residual.data(), self.bias.data());
        Tensor::from_fn(self.bias.shape(), |i| {
            let (s, err) = two_sum(b[i], r[i]);
            let v = s + (err + e[i]);
            if v == 0.0 {
                e[i]
            } else {
                v
            }
        })
    }
}

/// Sum a `[C, H, W]` tensor over channels.
pub fn channel_sum(t: &Tensor) -> Tensor {
    let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    Tensor::from_fn(&[h, w], |p| (0..c).map(|k| t.data()[k * h * w + p]).sum())
}

/// Normalize a `[6, H, W]` reconstruction.
pub fn normalize_reconstruction(r: &Tensor, div_eps: f64) -> Result<NormalizedReconstruction> {
    if r.rank() != 3 || r.shape()[0] != 6 {
        return Err(Error::shape("normalized_reconstruction", format!("{:?}", r.shape())));
    }
    let plane = r.shape()[1] * r.shape()[2];
    let d = r.data();
    let mut undefined = Vec::new();
    let mut out = vec![0.0; 3 * plane];
    for (i, o) in out.iter_mut().enumerate() {
        let (a, b) = (d[i], d[3 * plane + i]);
        let den = a + b;
        if den.abs() < div_eps {
            undefined.push(i);
            *o = f64::NAN;
        } else {
            *o = (a / den).clamp(0.0, 1.0);
        }
    }
    Ok(NormalizedReconstruction {
        image: Tensor::new(&[3, r.shape()[1], r.shape()[2]], out)?,
        undefined,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentAudit {
    /// Mean |cos| per |output| decile (0 = smallest outputs), pooled over layers.
    pub decile_means: Vec<f64>,
    pub top_mean: f64,
    pub bottom_mean: f64,
    /// `top_mean − bottom_mean`.
    pub effect: f64,
    pub t_statistic: f64,
    /// One-sided p-value of Welch's test for `top > bottom`.
    pub p_value: f64,
    pub units: usize,
    /// Mean |cos| over all sampled units.
    pub overall_mean: f64,
}

/// Stratify `(|cos|, |out|)` pairs by output-magnitude decile within each layer and pool.
pub fn alignment_audit(layers: &[(String, Vec<(f64, f64)>)]) -> Result<AlignmentAudit> {
    let mut by_decile: Vec<Vec<f64>> = vec![Vec::new(); 10];
    for (_, pairs) in layers {
        if pairs.len() < 10 {
            continue;
        }
        let mut sorted = pairs.clone();
        sorted.sort_by(|a, b| a.1.total_cmp(&b.1));
        let n = sorted.len();
        for (rank, &(cos, _)) in sorted.iter().enumerate() {
            by_decile[rank * 10 / n].push(cos);
        }
    }
    let units: usize = by_decile.iter().map(Vec::len).sum();
    if by_decile[0].len() < 2 || by_decile[9].len() < 2 {
        return Err(Error::Degenerate("too few B-cos units to audit".into()));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let var = |v: &[f64], m: f64| v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64;
    let decile_means: Vec<f64> = by_decile.iter().map(|v| if v.is_empty() { f64::NAN } else { mean(v) }).collect();
    let (top, bottom) = (&by_decile[9], &by_decile[0]);
    let (mt, mb) = (mean(top), mean(bottom));
    let (vt, vb) = (var(top, mt) / top.len() as f64, var(bottom, mb) / bottom.len() as f64);
    let se = (vt + vb).sqrt();
    let t = if se > 0.0 { (mt - mb) / se } else { f64::INFINITY * (mt - mb).signum() };
    let dof = (vt + vb).powi(2)
        / (vt * vt / (top.len() - 1) as f64 + vb * vb / (bottom.len() - 1) as f64);
    let p_value = if t.is_finite() && dof.is_finite() && dof > 0.0 {
        let dist = StudentsT::new(0.0, 1.0, dof).map_err(|e| Error::Degenerate(e.to_string()))?;
        1.0 - dist.cdf(t)
    } else if t > 0.0 {
        0.0
    } else {
        1.0
    };
    let overall_mean = by_decile.iter().flatten().sum::<f64>() / units as f64;
    Ok(AlignmentAudit {
        decile_means,
        top_mean: mt,
        bottom_mean: mb,
        effect: mt - mb,
        t_statistic: t,
        p_value,
        units,
        overall_mean,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::ScheduleConfig;
    use crate::model::UNetConfig;

    fn run(steps: usize) -> (Model, FrozenRun) {
        let model = Model::new(UNetConfig::tiny(), Vocab::default(), 4).unwrap();
        let s = DiffusionSchedule::new(ScheduleConfig::default()).unwrap();
        let p = model.parse_prompt("a red circle with the photo").unwrap();
        let cfg = SamplerConfig { steps, seed: 3, eta: 0.0 };
        let r = record_frozen_run(&model, &s, &p, cfg).unwrap();
        (model, r)
    }

    #[test]
    fn replay_reproduces_sample() {
        let (_, r) = run(2);
        assert!(r.replay(r.embedding()).unwrap().bit_eq(&r.sample()));
        assert_eq!(r.reconstruction(&Tensor::zeros(r.embedding().shape())).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn stochastic_runs_refused() {
        let model = Model::new(UNetConfig::tiny(), Vocab::default(), 4).unwrap();
        let s = DiffusionSchedule::new(ScheduleConfig::default()).unwrap();
        let p = model.parse_prompt("a red circle").unwrap();
        let cfg = SamplerConfig { steps: 2, seed: 3, eta: 0.5 };
        assert!(matches!(record_frozen_run(&model, &s, &p, cfg), Err(Error::Config(_))));
    }

    #[test]
    fn fused_scores_match_replay() {
        let (m, r) = run(2);
        let fused = r.relevance(&m.vocab).unwrap();
        let slow = r.relevance_by_replay(&m.vocab).unwrap();
        for (a, b) in fused.tokens.iter().zip(&slow.tokens) {
            assert!((a.score - b.score).abs() < 1e-6, "{a:?} vs {b:?}");
            if a.masked {
                assert_eq!(a.score, 0.0);
            }
        }
        let total: f64 = fused.unmasked().map(|t| t.score).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_token_scores_one() {
        let model = Model::new(UNetConfig::tiny(), Vocab::default(), 4).unwrap();
        let s = DiffusionSchedule::new(ScheduleConfig::default()).unwrap();
        let p = model.parse_prompt("circle").unwrap();
        let r = record_frozen_run(&model, &s, &p, SamplerConfig { steps: 1, seed: 1, eta: 0.0 }).unwrap();
        let rep = r.relevance(&model.vocab).unwrap();
        assert_eq!(rep.unmasked().count(), 1);
        assert_eq!(rep.unmasked().next().unwrap().score, 1.0);
    }

    #[test]
    fn maps_add_up_to_reconstruction() {
        let (_, r) = run(2);
        let total = channel_sum(&r.reconstruction(r.embedding()).unwrap());
        let mut acc = Tensor::zeros(total.shape());
        for i in r.prompt().content_positions() {
            acc.accumulate(&r.token_attribution_map(i).unwrap()).unwrap();
        }
        assert!(acc.max_abs_diff(&total) < 1e-8 * total.max_abs().max(1.0));
        assert!(r.token_attribution_map(0).is_err());
    }

    proptest::proptest! {
        #[test]
        fn recompose_is_exact(
            a in proptest::num::f64::NORMAL | proptest::num::f64::ZERO,
            b in proptest::num::f64::NORMAL | proptest::num::f64::ZERO,
            scale in -300i32..300,
        ) {
            let a = a * 2f64.powi(scale / 2);
            let (a, b) = (a.clamp(-1e300, 1e300), b.clamp(-1e300, 1e300));
            let d = Decomposition::new(&Tensor::scalar(a), Tensor::scalar(b)).unwrap();
            proptest::prop_assert_eq!(d.recompose().item().to_bits(), a.to_bits());
        }
    }

    #[test]
    fn recompose_on_near_cancellation() {
        let cases = [(1e-20, 1.0), (1.0, 1.0 - 1e-16), (3.0, -1e17), (0.1 + 0.2, 0.3), (-0.0, 0.0), (5e-324, 1.0)];
        for (a, b) in cases {
            let d = Decomposition::new(&Tensor::scalar(a), Tensor::scalar(b)).unwrap();
            assert_eq!(d.recompose().item().to_bits(), a.to_bits(), "{a} {b}");
        }
    }

    #[test]
    fn normalization_cancels_scale() {
        let sample = Tensor::from_fn(&[3, 2, 2], |i| 0.1 + 0.07 * i as f64);
        let comp = sample.map(|v| 1.0 - v);
        let r = Tensor::concat(&[&sample.scale(0.25), &comp.scale(0.25)], 0).unwrap();
        let n = normalize_reconstruction(&r, DEFAULT_DIV_EPS).unwrap();
        assert!(n.undefined.is_empty());
        assert!(n.image.max_abs_diff(&sample) < 1e-15);
        let n2 = normalize_reconstruction(&r.scale(7.0), DEFAULT_DIV_EPS).unwrap();
        assert!(n2.image.max_abs_diff(&n.image) < 1e-15);
        let mut z = r.clone();
        z.data_mut()[0] = 0.0;
        z.data_mut()[12] = 0.0;
        let n3 = normalize_reconstruction(&z, DEFAULT_DIV_EPS).unwrap();
        assert_eq!(n3.undefined, vec![0]);
        assert!(n3.image.data()[0].is_nan());
    }

    #[test]
    fn zero_contributions_are_degenerate() {
        assert!(matches!(
            normalize_contributions(&[0.0, 0.0], &[true, true]),
            Err(Error::Degenerate(_))
        ));
        let s = normalize_contributions(&[2.0, -6.0, 9.0], &[true, true, false]).unwrap();
        assert_eq!(s, vec![0.25, 0.75, 0.0]);
    }

    #[test]
    fn audit_detects_stratification() {
        let pairs: Vec<(f64, f64)> = (0..1000).map(|i| {
            let c = (i % 100) as f64 / 100.0;
            (c, c * c)
        }).collect();
        let a = alignment_audit(&[("l".into(), pairs)]).unwrap();
        assert!(a.effect > 0.5 && a.p_value < 1e-6);
        let flat: Vec<(f64, f64)> = (0..1000).map(|i| (0.5, i as f64)).collect();
        let b = alignment_audit(&[("l".into(), flat)]).unwrap();
        assert_eq!(b.effect, 0.0);
    }
}
