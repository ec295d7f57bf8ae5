//! One function per subcommand.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use bcos_diffusion::checkpoint::Checkpoint;
use bcos_diffusion::data::{render_scene, Dataset, Split};
use bcos_diffusion::diffusion::{BetaShape, DiffusionSchedule, Prediction, SamplerConfig, ScheduleConfig};
use bcos_diffusion::eval::{eval_alignment, eval_color_accuracy, eval_fidelity, eval_relevance};
use bcos_diffusion::image::{heatmap, write_ppm};
use bcos_diffusion::interpret::{record_frozen_run, DEFAULT_DIV_EPS};
use bcos_diffusion::model::{Model, UNetConfig};
use bcos_diffusion::nn::decode_image;
use bcos_diffusion::prompt::Vocab;
use bcos_diffusion::sampler::generate;
use bcos_diffusion::train::{TrainConfig, Trainer};
use bcos_diffusion::{Error, Result, Tensor};

use crate::settings::Settings;

/// Relevance below this is flagged in explanation reports.
pub const DEFAULT_THRESHOLD: f64 = 0.02;

fn presets(name: &str) -> Result<(UNetConfig, TrainConfig)> {
    match name {
        "desk" => Ok((UNetConfig::desk(), TrainConfig::desk())),
        "tiny" => Ok((UNetConfig { image_size: 16, ..UNetConfig::tiny() }, TrainConfig::tiny())),
        "full" => Ok((UNetConfig::full(), TrainConfig::full())),
        other => Err(Error::Config(format!("unknown preset '{other}' (expected desk, tiny or full)"))),
    }
}

fn schedule_from(s: &mut Settings) -> Result<DiffusionSchedule> {
    let d = ScheduleConfig::default();
    let shape: String = s.get("beta_shape", d.shape.as_str().to_string())?;
    DiffusionSchedule::new(ScheduleConfig {
        steps: s.get("T", d.steps)?,
        beta_start: s.get("beta_start", d.beta_start)?,
        beta_end: s.get("beta_end", d.beta_end)?,
        mu: s.get("mu", d.mu)?,
        sigma: s.get("sigma", d.sigma)?,
        shape: BetaShape::parse(&shape)?,
    })
}

fn load_checkpoint(s: &mut Settings) -> Result<Checkpoint> {
    let path = PathBuf::from(s.require("checkpoint")?);
    Checkpoint::load(&path)
}

fn finish(s: &Settings, dir: &Path) -> Result<()> {
    for k in s.unused() {
        eprintln!("warning: setting '{k}' does not apply to this command");
    }
    s.write_manifest(dir)
}

pub fn train(s: &mut Settings) -> Result<()> {
    let preset: String = s.get("preset", "desk".to_string())?;
    let (mut unet, mut tc) = presets(&preset)?;
    if preset == "full" && !s.flag("yes")? {
        return Err(Error::Config(
            "the full preset trains a 64px model for a million steps, far beyond a single CPU; pass --yes to start anyway"
                .into(),
        ));
    }
    unet.exponent = s.get("exponent", unet.exponent)?;
    unet.attention_sink = s.get("attention_sink", unet.attention_sink)?;
    unet.image_size = s.get("image_size", unet.image_size)?;
    let pred: String = s.get("prediction", "x0".to_string())?;
    unet.prediction = Prediction::parse(&pred)?;
    tc.steps = s.get("steps", tc.steps)?;
    tc.seed = s.get("seed", tc.seed)?;
    tc.batch = s.get("batch", tc.batch)?;
    tc.lr = s.get("lr", tc.lr)?;
    tc.weight_decay = s.get("weight_decay", tc.weight_decay)?;
    tc.checkpoint_every = s.get("checkpoint_every", tc.checkpoint_every)?;
    tc.flip = s.get("flip", tc.flip)?;
    let log_every: u64 = s.get("log_every", 100)?;
    let resume: Option<String> = s.get_opt("resume")?;
    let schedule = schedule_from(s)?;
    let dir = s.out_dir()?;
    finish(s, &dir)?;

    let mut trainer = match resume {
        Some(path) => {
            let ck = Checkpoint::load(Path::new(&path))?;
            let mut state = ck
                .training
                .ok_or_else(|| Error::Checkpoint(format!("{path} has no optimizer state to resume from")))?;
            state.config.steps = tc.steps;
            Trainer::resume(ck.model, ck.schedule, state)?
        }
        None => Trainer::new(Model::new(unet, Vocab::default(), tc.seed)?, schedule, tc)?,
    };
    let cfg = trainer.model.config.clone();
    let data = Dataset::standard(Split::Train, &trainer.model.vocab, cfg.image_size, cfg.max_tokens)?;
    let mut log = OpenOptions::new()
        .create(true)
        .append(trainer.step_index() > 0)
        .write(true)
        .truncate(trainer.step_index() == 0)
        .open(dir.join("loss.txt"))?;
    let start = Instant::now();
    let first = trainer.step_index();
    let until = trainer.state.config.steps;
    let every = trainer.state.config.checkpoint_every;
    eprintln!(
        "training {} parameters, B = {}, steps {first}..{until}",
        trainer.model.store.element_count(),
        cfg.exponent
    );
    trainer.run(&data, until, |t, loss| {
        let step = t.step_index();
        writeln!(log, "{}\t{loss:.17e}", step - 1)?;
        if step % log_every == 0 {
            let rate = start.elapsed().as_secs_f64() / (step - first) as f64;
            eprintln!("step {step}\tloss {loss:.5}\t{rate:.3} s/step");
        }
        if step % every == 0 || step == until {
            let ck = Checkpoint {
                model: t.model.clone(),
                schedule: t.schedule.clone(),
                training: Some(t.state.clone()),
            };
            ck.save(&dir.join(format!("ckpt_{step:07}.bcos")))?;
            if step == until {
                ck.save(&dir.join("final.bcos"))?;
            }
        }
        Ok(())
    })?;
    log.flush()?;
    println!("wrote {}", dir.join("final.bcos").display());
    Ok(())
}

pub fn sample(s: &mut Settings) -> Result<()> {
    let ck = load_checkpoint(s)?;
    let text = s.require("prompt")?;
    let seed: u64 = s.get("seed", 0)?;
    let steps: usize = s.get("steps", 25)?;
    let count: u64 = s.get("count", 1)?;
    let upscale: usize = s.get("upscale", 1)?;
    let dir = s.out_dir()?;
    let prompt = ck.model.parse_prompt(&text)?;
    let slug = prompt.slug(&ck.model.vocab);
    let items: Vec<_> = (0..count).map(|i| (prompt.clone(), seed + i)).collect();
    let cfg = SamplerConfig { steps, seed, eta: 0.0 };
    finish(s, &dir)?;
    for ((_, sd), enc) in items.iter().zip(generate(&ck.model, &ck.schedule, &items, cfg)?) {
        let path = dir.join(format!("{slug}_{sd}.ppm"));
        write_ppm(&path, &decode_image(&enc)?, upscale)?;
        println!("{}", path.display());
    }
    Ok(())
}

pub fn explain(s: &mut Settings) -> Result<()> {
    let ck = load_checkpoint(s)?;
    let text = s.require("prompt")?;
    let seed: u64 = s.get("seed", 0)?;
    let steps: usize = s.get("steps", 4)?;
    let threshold: f64 = s.get("threshold", DEFAULT_THRESHOLD)?;
    let upscale: usize = s.get("upscale", 8)?;
    let dir = s.out_dir()?;
    finish(s, &dir)?;
    let model = &ck.model;
    let prompt = model.parse_prompt(&text)?;
    let run = record_frozen_run(model, &ck.schedule, &prompt, SamplerConfig { steps, seed, eta: 0.0 })?;
    let stem = format!("{}_{seed}", prompt.slug(&model.vocab));
    let sample = run.sample();
    let decoded = decode_image(&sample)?;
    write_ppm(&dir.join(format!("{stem}_sample.ppm")), &decoded, upscale)?;

    // Raw reconstruction: the RGB half of W(x)·x, scaled by its largest magnitude.
    let parts = run.decompose(run.embedding())?;
    let exact = parts.recompose().bit_eq(&sample);
    let recon = &parts.reconstruction;
    let plane = recon.len() / 2;
    let rgb = Tensor::new(&[3, recon.shape()[1], recon.shape()[2]], recon.data()[..plane].to_vec())?;
    let peak = rgb.max_abs();
    let shown = if peak > 0.0 { rgb.scale(1.0 / peak) } else { rgb };
    write_ppm(&dir.join(format!("{stem}_reconstruction.ppm")), &shown, upscale)?;
    let norm = run.normalized_reconstruction(run.embedding(), DEFAULT_DIV_EPS)?;
    write_ppm(&dir.join(format!("{stem}_normalized.ppm")), &norm.display(), upscale)?;

    let report = run.relevance(&model.vocab)?;
    let mut records = String::new();
    for t in report.unmasked() {
        let map = run.token_attribution_map(t.position)?;
        let name = format!("{stem}_token{:02}_{}.ppm", t.position, t.word.replace('.', "period"));
        write_ppm(&dir.join(&name), &heatmap(&map)?, upscale)?;
        let rec = serde_json::json!({"token": t.word, "position": t.position, "score": t.score, "map_path": name});
        records.push_str(&format!("{rec}\n"));
    }
    fs::write(dir.join(format!("{stem}_relevance.jsonl")), records)?;
    let bias_ratio = parts.bias.norm() / sample.norm();
    let mse = norm.mse(&decoded)?;
    let mut table = report.table(threshold);
    table.push_str(&format!(
        "# bias_ratio\t{bias_ratio:.6e}\n# normalized_mse\t{mse:.6e}\n# undefined_pixels\t{}\n# exact_completeness\t{exact}\n",
        norm.undefined.len()
    ));
    fs::write(dir.join(format!("{stem}_relevance.tsv")), &table)?;
    print!("{table}");
    for t in report.low_relevance(threshold) {
        println!("low relevance: '{}' at position {} ({:.2}%), consider regenerating", t.word, t.position, 100.0 * t.score);
    }
    Ok(())
}

pub fn eval(s: &mut Settings) -> Result<()> {
    let ck = load_checkpoint(s)?;
    let seed: u64 = s.get("seed", 0)?;
    let steps: usize = s.get("steps", 4)?;
    let color_steps: usize = s.get("color_steps", 25)?;
    let limit: usize = s.get("prompts", usize::MAX)?;
    let fidelity_prompts: usize = s.get("fidelity_prompts", 20)?;
    let align_prompts: usize = s.get("align_prompts", 5)?;
    let dir = s.out_dir()?;
    finish(s, &dir)?;
    let model = &ck.model;
    let cfg = &model.config;
    let data = Dataset::standard(Split::Eval, &model.vocab, cfg.image_size, cfg.max_tokens)?;
    let examples: Vec<_> = data.examples()?.into_iter().take(limit).collect();
    let prompts: Vec<_> = examples.iter().map(|e| e.prompt.clone()).collect();

    let acc = eval_color_accuracy(model, &ck.schedule, &examples, color_steps, seed)?;
    let rel = eval_relevance(model, &ck.schedule, &prompts, steps, seed)?;
    let fid = eval_fidelity(model, &ck.schedule, &prompts[..fidelity_prompts.min(prompts.len())], steps, seed)?;
    let align = eval_alignment(model, &ck.schedule, &prompts[..align_prompts.min(prompts.len())], steps, seed)?;

    let mut text = format!(
        "# color accuracy {}/{} = {:.4} ({} blank) over {} held-out prompts at {color_steps} steps\n",
        acc.correct,
        acc.total,
        acc.fraction(),
        acc.blank,
        examples.len()
    );
    for (c, (k, n)) in &acc.per_color {
        text.push_str(&format!("# color {c}: {k}/{n}\n"));
    }
    text.push_str(&format!("# relevance over {} prompts at {steps} steps\n", rel.prompts));
    text.push_str(&rel.table());
    text.push_str(&format!(
        "# normalized reconstruction mse {:.6e} over {} samples, mean bias ratio {:.6e}, undefined pixels {}\n",
        fid.mean_mse(),
        fid.mse.len(),
        fid.mean_bias_ratio(),
        fid.undefined
    ));
    text.push_str(&format!(
        "# alignment: |cos| top decile {:.4}, bottom decile {:.4}, effect {:.4}, t {:.2}, p {:.3e}, units {}, overall {:.4}\n",
        align.top_mean, align.bottom_mean, align.effect, align.t_statistic, align.p_value, align.units, align.overall_mean
    ));
    fs::write(dir.join("eval.txt"), &text)?;
    let words: serde_json::Map<String, serde_json::Value> = rel
        .words
        .iter()
        .map(|(w, r)| (w.clone(), serde_json::json!({"count": r.count, "mean": r.mean()})))
        .collect();
    let json = serde_json::json!({
        "color_accuracy": {"correct": acc.correct, "total": acc.total, "fraction": acc.fraction(), "blank": acc.blank},
        "relevance": {
            "prompts": rel.prompts,
            "content_mean": rel.content_mean,
            "filler_mean": rel.filler_mean,
            "ratio": rel.ratio(),
            "frequency_correlation": rel.frequency_correlation,
            "degenerate": rel.degenerate,
            "words": words,
        },
        "fidelity": {"mean_mse": fid.mean_mse(), "mse": fid.mse, "mean_bias_ratio": fid.mean_bias_ratio(), "undefined": fid.undefined},
        "alignment": {
            "top_mean": align.top_mean,
            "bottom_mean": align.bottom_mean,
            "effect": align.effect,
            "t": align.t_statistic,
            "p": align.p_value,
            "units": align.units,
            "overall_mean": align.overall_mean,
            "deciles": align.decile_means,
        },
    });
    fs::write(dir.join("eval.json"), serde_json::to_string_pretty(&json).expect("json values are finite or null"))?;
    print!("{text}");
    Ok(())
}

pub fn schedule(s: &mut Settings) -> Result<()> {
    let sched = schedule_from(s)?;
    let dir = s.out_dir()?;
    finish(s, &dir)?;
    let table = sched.table();
    fs::write(dir.join("schedule.txt"), &table)?;
    print!("{table}");
    Ok(())
}

pub fn dataset(s: &mut Settings) -> Result<()> {
    let split = match s.get("split", "train".to_string())?.as_str() {
        "train" => Split::Train,
        "eval" => Split::Eval,
        other => return Err(Error::Config(format!("unknown split '{other}' (expected train or eval)"))),
    };
    let size: usize = s.get("image_size", 16)?;
    let max_tokens: usize = s.get("max_tokens", 16)?;
    let preview: usize = s.get("preview", 0)?;
    let dir = s.out_dir()?;
    finish(s, &dir)?;
    let data = Dataset::standard(split, &Vocab::default(), size, max_tokens)?;
    let mut f = fs::File::create(dir.join("dataset.jsonl"))?;
    data.write_manifest(&mut f)?;
    for ex in data.examples()?.iter().take(preview) {
        let img = render_scene(&ex.spec, size, size)?;
        let name = format!("{}_t{}.ppm", ex.prompt.slug(&data.vocab), ex.template);
        write_ppm(&dir.join(name), &img, 4)?;
    }
    println!("{} examples", data.len());
    Ok(())
}
