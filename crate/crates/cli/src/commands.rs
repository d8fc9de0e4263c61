use std::path::{Path, PathBuf};

use priorseg::contrastive::{ContrastiveConfig, Pretrainer};
use priorseg::fewshot::{
    episode_eval, episode_train, eval_episode, make_folds, run_episode, summarize, Decoder, EpisodeRecord,
    FewShotModel, FoldSplit, Phase,
};
use priorseg::image::synth_dataset;
use priorseg::io::{encode_mask_png, write_atomic};
use priorseg::nn::Encoder;
use priorseg::patch::{felz_segment, slic_segment};

use crate::config::{self, EpisodeRunConfig, PatchesConfig, SynthConfig};
use crate::dataset;
use crate::error::{CliError, CliResult};

pub const PRIOR_FILE: &str = "prior.qgn";
pub const STATE_FILE: &str = "state.qgn";
pub const EXTRACTOR_FILE: &str = "extractor.qgn";
pub const DECODER_FILE: &str = "decoder.qgn";

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Method {
    Slic,
    Felz,
}

fn echo_config<T: serde::Serialize>(out: &Path, config: &T, seed: u64) -> CliResult<()> {
    write_atomic(&out.join("config.json"), &config::to_json(config))?;
    write_atomic(&out.join("run.json"), &config::to_json(&serde_json::json!({ "seed": seed })))?;
    Ok(())
}

pub fn synth(config: &SynthConfig, seed: u64, out: &Path) -> CliResult<()> {
    let samples = synth_dataset(config.count, config.classes, config.size, seed)?;
    dataset::write(out, &samples)?;
    echo_config(out, config, seed)
}

pub fn patches(config: &PatchesConfig, method: Method, inputs: &[PathBuf], seed: u64, out: &Path) -> CliResult<()> {
    let files = dataset::expand_inputs(inputs)?;
    // Decode and segment everything before the first write.
    let mut results = Vec::with_capacity(files.len());
    for file in &files {
        let img = priorseg::io::read_rgb_png(file)?;
        let (seg, params) = match method {
            Method::Slic => (slic_segment(&img.to_lab(), &config.slic)?, serde_json::json!({ "slic": config.slic })),
            Method::Felz => (felz_segment(&img, &config.felz)?, serde_json::json!({ "felz": config.felz })),
        };
        let stem = file.file_stem().map_or_else(|| "image".into(), |s| s.to_string_lossy().into_owned());
        results.push((stem, seg, params));
    }
    for (stem, seg, params) in results {
        seg.save(out, &stem, params)?;
    }
    echo_config(out, config, seed)
}

pub struct PretrainOptions {
    pub resume: bool,
    /// Stop once this many epochs are complete (the run can be resumed).
    pub stop_after: Option<usize>,
}

pub fn pretrain(config: &ContrastiveConfig, data: &Path, seed: u64, out: &Path, opts: &PretrainOptions) -> CliResult<()> {
    config::validate_pretrain(config)?;
    let images = dataset::read_images(data)?;
    if images.is_empty() {
        return Err(CliError::Data(format!("{}: dataset is empty", data.display())));
    }
    let state_path = out.join(STATE_FILE);
    let mut trainer = if opts.resume && state_path.exists() {
        let bytes = std::fs::read(&state_path).map_err(|e| CliError::Data(format!("{}: {e}", state_path.display())))?;
        Pretrainer::from_state_bytes(&bytes, config, seed).map_err(|e| CliError::Usage(format!("cannot resume: {e}")))?
    } else {
        Pretrainer::new(config.clone(), seed)?
    };
    echo_config(out, config, seed)?;
    let target = opts.stop_after.map_or(config.epochs, |s| s.min(config.epochs));
    save_pretrain(&trainer, out)?;
    while trainer.epoch() < target {
        let s = trainer.run_epoch(&images)?;
        eprintln!("epoch {}: loss {:.4} (global {:.4}, local {:.4})", s.epoch, s.l_total, s.l_global, s.l_local);
        save_pretrain(&trainer, out)?;
    }
    Ok(())
}

fn save_pretrain(trainer: &Pretrainer, out: &Path) -> CliResult<()> {
    write_atomic(&out.join(STATE_FILE), &trainer.to_state_bytes())?;
    write_atomic(&out.join("stats.csv"), trainer.stats().to_csv().as_bytes())?;
    trainer.query_encoder().save(&out.join(PRIOR_FILE))?;
    Ok(())
}

fn split_of(config: &EpisodeRunConfig, data: &[priorseg::image::Sample]) -> CliResult<FoldSplit> {
    let classes = data.iter().map(|s| s.class).max().map_or(0, |c| c + 1);
    let folds = make_folds(classes, config.folds)
        .map_err(|e| CliError::Data(format!("dataset has {classes} classes: {e}")))?;
    Ok(folds[config.fold].clone())
}

fn load_prior(path: &Path) -> CliResult<Encoder<f32>> {
    Encoder::load(path).map_err(|e| match e {
        priorseg::Error::Format { .. } => CliError::Usage(e.to_string()),
        other => other.into(),
    })
}

fn load_model(dir: &Path, prior: &Encoder<f32>) -> CliResult<FewShotModel> {
    let extractor = load_prior(&dir.join(EXTRACTOR_FILE))?;
    let decoder = Decoder::load(&dir.join(DECODER_FILE)).map_err(|e| CliError::Usage(e.to_string()))?;
    let model = FewShotModel { extractor, decoder };
    model.check(prior)?;
    Ok(model)
}

pub fn train(config: &EpisodeRunConfig, data: &Path, prior: &Path, seed: u64, out: &Path) -> CliResult<()> {
    config.validate()?;
    let prior = load_prior(prior)?;
    let samples = dataset::read_labelled(data)?;
    let split = split_of(config, &samples)?;
    let (model, stats) = episode_train(&samples, &split, &prior, &config.episode, seed)?;
    echo_config(out, config, seed)?;
    model.extractor.save(&out.join(EXTRACTOR_FILE))?;
    model.decoder.save(&out.join(DECODER_FILE))?;
    let mut csv = String::from("episode,class,loss\n");
    for (i, (l, c)) in stats.losses.iter().zip(&stats.classes).enumerate() {
        csv.push_str(&format!("{i},{c},{l}\n"));
    }
    write_atomic(&out.join("train.csv"), csv.as_bytes())?;
    Ok(())
}

pub struct EvalInputs<'a> {
    pub data: &'a Path,
    pub prior: &'a Path,
    pub model: &'a Path,
}

pub fn maps(config: &EpisodeRunConfig, inputs: &EvalInputs, seed: u64, out: &Path) -> CliResult<()> {
    config.validate()?;
    let prior = load_prior(inputs.prior)?;
    let model = load_model(inputs.model, &prior)?;
    let samples = dataset::read_labelled(inputs.data)?;
    let split = split_of(config, &samples)?;
    let stride = model.extractor.arch().stride();
    let mut files = Vec::new();
    let mut outcomes = Vec::new();
    for i in 0..config.map_episodes {
        let ep = eval_episode(&samples, &split, Phase::Test, &config.episode, stride, seed, i)?;
        let (class, query_index) = (ep.class, ep.query_index);
        let o = run_episode(ep, &prior, &model, &config.episode)?;
        let name = format!("episode_{i:04}");
        files.push((out.join(format!("{name}_prior.png")), o.maps.prior.to_png()));
        files.push((out.join(format!("{name}_guided.png")), o.maps.guided.to_png()));
        files.push((out.join(format!("{name}_pred.png")), encode_mask_png(&o.prediction)));
        files.push((out.join(format!("{name}_prior.qgn")), o.maps.prior.to_tensor_bytes()));
        files.push((out.join(format!("{name}_guided.qgn")), o.maps.guided.to_tensor_bytes()));
        let record = EpisodeRecord { episode: i, class, query_index, counts: o.counts, iou: o.counts.iou() };
        outcomes.push((record, o.recall));
    }
    let report = summarize(split.fold, Phase::Test, &config.episode.alphas, outcomes)?;
    echo_config(out, config, seed)?;
    for (path, bytes) in files {
        write_atomic(&path, &bytes)?;
    }
    write_atomic(&out.join("metrics.csv"), report.metrics_csv().as_bytes())?;
    write_atomic(&out.join("episodes.csv"), report.episodes_csv().as_bytes())?;
    Ok(())
}

pub fn eval(config: &EpisodeRunConfig, inputs: &EvalInputs, seed: u64, alpha_sweep: bool, out: &Path) -> CliResult<()> {
    config.validate()?;
    let prior = load_prior(inputs.prior)?;
    let model = load_model(inputs.model, &prior)?;
    let samples = dataset::read_labelled(inputs.data)?;
    let split = split_of(config, &samples)?;
    let report = episode_eval(&samples, &split, Phase::Test, &prior, &model, &config.episode, seed)?;
    echo_config(out, config, seed)?;
    write_atomic(&out.join("metrics.csv"), report.metrics_csv().as_bytes())?;
    write_atomic(&out.join("episodes.csv"), report.episodes_csv().as_bytes())?;
    write_atomic(&out.join("summary.json"), report.summary_json().as_bytes())?;
    if alpha_sweep {
        write_atomic(&out.join("recall.csv"), report.recall_csv().as_bytes())?;
    }
    println!("fold {} mIoU {:.4} FBIoU {:.4}", report.fold, report.miou, report.fbiou);
    Ok(())
}
