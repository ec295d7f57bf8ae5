//! Quantitative checks on a trained model.

use std::collections::BTreeMap;

use crate::data::{dominant_color, Color, Example};
use crate::diffusion::{DiffusionSchedule, SamplerConfig};
use crate::error::{Error, Result};
use crate::interpret::{alignment_audit, record_frozen_run, AlignmentAudit, DEFAULT_DIV_EPS};
use crate::model::Model;
use crate::nn::decode_image;
use crate::prompt::{Prompt, TokenClass};
use crate::sampler::generate;

/// Samples generated per forward batch during evaluation.
pub const EVAL_BATCH: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct ColorAccuracy {
    pub correct: usize,
    pub total: usize,
    /// Samples where no foreground could be found.
    pub blank: usize,
    pub per_color: BTreeMap<String, (usize, usize)>,
}

impl ColorAccuracy {
    pub fn fraction(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }
}

/// Fraction of samples whose dominant foreground color matches the prompt's color.
///
/// Example `i` is sampled with seed `seed + i`.
pub fn eval_color_accuracy(
    model: &Model,
    schedule: &DiffusionSchedule,
    examples: &[Example],
    steps: usize,
    seed: u64,
) -> Result<ColorAccuracy> {
    let mut acc = ColorAccuracy {
        correct: 0,
        total: 0,
        blank: 0,
        per_color: BTreeMap::new(),
    };
    let cfg = SamplerConfig { steps, seed, eta: 0.0 };
    for (b, chunk) in examples.chunks(EVAL_BATCH).enumerate() {
        let items: Vec<(Prompt, u64)> = chunk
            .iter()
            .enumerate()
            .map(|(i, e)| (e.prompt.clone(), seed + (b * EVAL_BATCH + i) as u64))
            .collect();
        for (ex, enc) in chunk.iter().zip(generate(model, schedule, &items, cfg)?) {
            let got = dominant_color(&decode_image(&enc)?);
            let hit = got == Some(ex.spec.color);
            let entry = acc.per_color.entry(ex.spec.color.word().to_string()).or_default();
            entry.1 += 1;
            if hit {
                entry.0 += 1;
                acc.correct += 1;
            }
            if got.is_none() {
                acc.blank += 1;
            }
            acc.total += 1;
        }
    }
    Ok(acc)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct WordRelevance {
    pub class: Option<TokenClass>,
    pub count: usize,
    pub total: f64,
}

impl WordRelevance {
    pub fn mean(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.total / self.count as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelevanceSummary {
    pub prompts: usize,
    pub words: BTreeMap<String, WordRelevance>,
    pub content_mean: f64,
    pub filler_mean: f64,
    /// Pearson correlation between a word's occurrence count and its mean score.
    pub frequency_correlation: f64,
    /// Prompts whose relevance was undefined (all contributions zero).
    pub degenerate: usize,
}

impl RelevanceSummary {
    pub fn ratio(&self) -> f64 {
        self.content_mean / self.filler_mean
    }

    pub fn table(&self) -> String {
        let mut rows: Vec<_> = self.words.iter().collect();
        rows.sort_by(|a, b| b.1.mean().total_cmp(&a.1.mean()));
        let mut out = String::from("token\tclass\tcount\tmean_score\n");
        for (w, r) in rows {
            let class = r.class.map(|c| format!("{c:?}").to_lowercase()).unwrap_or_default();
            out.push_str(&format!("{w}\t{class}\t{}\t{:.6}\n", r.count, r.mean()));
        }
        out.push_str(&format!(
            "# content mean {:.6}, filler mean {:.6}, ratio {:.3}, frequency correlation {:.3}\n",
            self.content_mean,
            self.filler_mean,
            self.ratio(),
            self.frequency_correlation
        ));
        out
    }
}

/// Sample Pearson correlation; NaN when either side is constant.
pub fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len().min(ys.len()) as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    sxy / (sxx * syy).sqrt()
}

/// Token relevance aggregated by word and by class over `prompts`; prompt `i` uses seed `seed + i`.
pub fn eval_relevance(
    model: &Model,
    schedule: &DiffusionSchedule,
    prompts: &[Prompt],
    steps: usize,
    seed: u64,
) -> Result<RelevanceSummary> {
    let mut words: BTreeMap<String, WordRelevance> = BTreeMap::new();
    let (mut content, mut filler) = ((0.0, 0usize), (0.0, 0usize));
    let mut degenerate = 0;
    for (i, p) in prompts.iter().enumerate() {
        let cfg = SamplerConfig { steps, seed: seed + i as u64, eta: 0.0 };
        let run = record_frozen_run(model, schedule, p, cfg)?;
        let report = match run.relevance(&model.vocab) {
            Ok(r) => r,
            Err(Error::Degenerate(_)) => {
                degenerate += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        for t in report.unmasked() {
            let class = model.vocab.class(t.id);
            let w = words.entry(t.word.clone()).or_default();
            w.class = Some(class);
            w.count += 1;
            w.total += t.score;
            let bucket = if class.is_content() { &mut content } else { &mut filler };
            bucket.0 += t.score;
            bucket.1 += 1;
        }
    }
    let mean = |(s, n): (f64, usize)| if n == 0 { f64::NAN } else { s / n as f64 };
    let counts: Vec<f64> = words.values().map(|w| w.count as f64).collect();
    let means: Vec<f64> = words.values().map(WordRelevance::mean).collect();
    Ok(RelevanceSummary {
        prompts: prompts.len(),
        words,
        content_mean: mean(content),
        filler_mean: mean(filler),
        frequency_correlation: pearson(&counts, &means),
        degenerate,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fidelity {
    /// Per-sample MSE of the normalized reconstruction against the decoded sample.
    pub mse: Vec<f64>,
    /// Per-sample `‖replay(0)‖ / ‖sample‖`.
    pub bias_ratio: Vec<f64>,
    /// Total undefined pixels across all samples.
    pub undefined: usize,
}

impl Fidelity {
    pub fn mean_mse(&self) -> f64 {
        self.mse.iter().sum::<f64>() / self.mse.len() as f64
    }

    pub fn mean_bias_ratio(&self) -> f64 {
        self.bias_ratio.iter().sum::<f64>() / self.bias_ratio.len() as f64
    }
}

/// Normalized-reconstruction error and completeness ledger over `prompts`.
pub fn eval_fidelity(
    model: &Model,
    schedule: &DiffusionSchedule,
    prompts: &[Prompt],
    steps: usize,
    seed: u64,
) -> Result<Fidelity> {
    let mut f = Fidelity {
        mse: Vec::new(),
        bias_ratio: Vec::new(),
        undefined: 0,
    };
    for (i, p) in prompts.iter().enumerate() {
        let run = record_frozen_run(model, schedule, p, SamplerConfig { steps, seed: seed + i as u64, eta: 0.0 })?;
        let sample = run.sample();
        let norm = run.normalized_reconstruction(run.embedding(), DEFAULT_DIV_EPS)?;
        f.mse.push(norm.mse(&decode_image(&sample)?)?);
        f.undefined += norm.undefined.len();
        f.bias_ratio.push(run.bias_term()?.norm() / sample.norm());
    }
    Ok(f)
}

/// Pool B-cos unit statistics from frozen runs over `prompts` and audit them.
pub fn eval_alignment(
    model: &Model,
    schedule: &DiffusionSchedule,
    prompts: &[Prompt],
    steps: usize,
    seed: u64,
) -> Result<AlignmentAudit> {
    let mut layers: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for (i, p) in prompts.iter().enumerate() {
        let run = record_frozen_run(model, schedule, p, SamplerConfig { steps, seed: seed + i as u64, eta: 0.0 })?;
        for (name, pairs) in run.alignment_samples() {
            layers.entry(name).or_default().extend(pairs);
        }
    }
    let layers: Vec<(String, Vec<(f64, f64)>)> = layers.into_iter().collect();
    alignment_audit(&layers)
}

/// The palette color named in `prompt`, if any.
pub fn prompt_color(prompt: &Prompt, model: &Model) -> Option<Color> {
    prompt.tokens(&model.vocab).iter().find_map(|w| Color::from_word(w))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Dataset, Split};
    use crate::diffusion::ScheduleConfig;
    use crate::model::UNetConfig;
    use crate::prompt::Vocab;

    #[test]
    fn pearson_known_values() {
        assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]) - 1.0).abs() < 1e-15);
        assert!((pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-15);
        assert!(pearson(&[1.0, 1.0], &[0.0, 1.0]).is_nan());
    }

    #[test]
    fn evaluation_runs_on_untrained_model() {
        let model = Model::new(UNetConfig::tiny(), Vocab::default(), 1).unwrap();
        let s = DiffusionSchedule::new(ScheduleConfig::default()).unwrap();
        let data = Dataset::standard(Split::Eval, &model.vocab, 8, 12);
        // Eight-pixel scenes are too small to render; evaluation only needs prompts.
        assert!(data.is_err());
        let data = Dataset::standard(Split::Eval, &model.vocab, 16, 12).unwrap();
        let ex: Vec<Example> = data.examples().unwrap().into_iter().take(3).collect();
        let acc = eval_color_accuracy(&model, &s, &ex, 2, 0).unwrap();
        assert_eq!(acc.total, 3);
        let prompts: Vec<Prompt> = ex.iter().map(|e| e.prompt.clone()).collect();
        let rel = eval_relevance(&model, &s, &prompts, 2, 0).unwrap();
        assert!(rel.content_mean.is_finite() && rel.filler_mean.is_finite());
        let fid = eval_fidelity(&model, &s, &prompts[..1], 2, 0).unwrap();
        assert!(fid.mean_mse().is_finite());
        assert_eq!(prompt_color(&prompts[0], &model), Some(ex[0].spec.color));
    }
}
