//! Command implementations. Every artifact written here embeds the config
//! hash and seed of the run that produced it.

use anyhow::{bail, Context, Result};
use maestro_core::audio::{extract_descriptor, read_wav, DESCRIPTOR_BLOCKS, FPS, MUSIC_DIM};
use maestro_core::checkpoint::{config_hash, load_checkpoint, save_checkpoint};
use maestro_core::data::{
    load_dataset, save_clip, save_dataset, split_dataset, validate_clip, ClipMeta, ClipPair,
    QcThresholds, SynthConfig,
};
use maestro_core::generator::{GeneratorConfig, GeneratorModel};
use maestro_core::losses::LossWeights;
use maestro_core::metrics::{diversity, fid, m_dist, mm_dist, EmbeddingSet, EmbeddingTag, MetricReport};
use maestro_core::retrieval::{RetrievalConfig, RetrievalModel};
use maestro_core::tensor::Tensor;
use maestro_core::train::{
    retrieval_top1_accuracy, start_pose, train_generator, train_retrieval, GeneratorTrainConfig,
    RetrievalTrainConfig, TrainReport,
};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Read;
use std::path::{Path, PathBuf};

/// Key-value config file; flags override file values, file values override
/// built-in defaults.
#[derive(Clone, Debug, Default)]
pub struct KvConfig(BTreeMap<String, String>);

impl KvConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut map = BTreeMap::new();
        if let Some(p) = path {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("cannot read config {}", p.display()))?;
            for (lineno, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (k, v) = line
                    .split_once('=')
                    .with_context(|| format!("{}:{}: expected key = value", p.display(), lineno + 1))?;
                map.insert(k.trim().to_string(), v.trim().to_string());
            }
        }
        Ok(KvConfig(map))
    }

    pub fn get<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.0.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| anyhow::anyhow!("config key {key}: cannot parse {v:?}")),
        }
    }
}

fn retrieval_config(cfg: &KvConfig) -> Result<RetrievalConfig> {
    let d = RetrievalConfig::default();
    Ok(RetrievalConfig {
        blocks: cfg.get("retrieval.blocks", d.blocks)?,
        heads: cfg.get("retrieval.heads", d.heads)?,
        hidden: cfg.get("retrieval.hidden", d.hidden)?,
        embed_dim: cfg.get("retrieval.embed_dim", d.embed_dim)?,
        ffn: cfg.get("retrieval.ffn", d.ffn)?,
        dropout: cfg.get("retrieval.dropout", d.dropout)?,
        temperature: cfg.get("retrieval.temperature", d.temperature)?,
        max_t: cfg.get("retrieval.max_t", d.max_t)?,
        ..d
    })
}

fn generator_config(cfg: &KvConfig) -> Result<GeneratorConfig> {
    let d = GeneratorConfig::default();
    Ok(GeneratorConfig {
        layers: cfg.get("generator.layers", d.layers)?,
        heads: cfg.get("generator.heads", d.heads)?,
        hidden: cfg.get("generator.hidden", d.hidden)?,
        ffn: cfg.get("generator.ffn", d.ffn)?,
        dropout: cfg.get("generator.dropout", d.dropout)?,
        max_t: cfg.get("generator.max_t", d.max_t)?,
        ..d
    })
}

fn qc_thresholds(cfg: &KvConfig) -> Result<QcThresholds> {
    let d = QcThresholds::default();
    Ok(QcThresholds {
        translation_box: cfg.get("qc.translation_box", d.translation_box)?,
        max_joint_velocity: cfg.get("qc.max_joint_velocity", d.max_joint_velocity)?,
        frozen_eps: cfg.get("qc.frozen_eps", d.frozen_eps)?,
        frozen_seconds: cfg.get("qc.frozen_seconds", d.frozen_seconds)?,
        max_shift: cfg.get("qc.max_shift", d.max_shift)?,
        max_failure_ratio: cfg.get("qc.max_failure_ratio", d.max_failure_ratio)?,
    })
}

fn artifact_header(hash: &str, seed: u64) -> String {
    format!("# config_hash = {hash}\n# seed = {seed}\n")
}

fn load_ids(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read id list {}", path.display()))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(String::from)
        .collect())
}

fn select_clips(dataset: &Path, ids: Option<&Path>) -> Result<Vec<ClipPair>> {
    let mut clips = load_dataset(dataset)?;
    if let Some(p) = ids {
        let keep = load_ids(p)?;
        let set: std::collections::BTreeSet<&String> = keep.iter().collect();
        clips.retain(|c| set.contains(&c.id));
        if clips.len() != keep.len() {
            bail!("id list names {} clips but {} were found", keep.len(), clips.len());
        }
    }
    clips.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(clips)
}

fn write_loss_curve(path: &Path, report: &TrainReport, hash: &str, seed: u64) -> Result<()> {
    let mut text = artifact_header(hash, seed);
    for (epoch, loss) in report.loss_curve.iter().enumerate() {
        text.push_str(&format!("{epoch} {loss:.10}\n"));
    }
    std::fs::write(path, text)?;
    Ok(())
}

// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct SynthRun {
    n: usize,
    seed: u64,
    synth: SynthConfig,
}

pub fn cmd_synth(n: usize, seed: u64, out: &Path, cfg: &KvConfig) -> Result<()> {
    if n == 0 {
        bail!("--n must be at least 1");
    }
    let d = SynthConfig::default();
    let synth = SynthConfig {
        seconds: cfg.get("synth.seconds", d.seconds)?,
        min_bpm: cfg.get("synth.min_bpm", d.min_bpm)?,
        max_bpm: cfg.get("synth.max_bpm", d.max_bpm)?,
    };
    let clips = maestro_core::data::synth_dataset(n, seed, &synth)?;
    let thresholds = qc_thresholds(cfg)?;
    let accepted = clips
        .iter()
        .map(|c| validate_clip(c, &thresholds))
        .collect::<maestro_core::Result<Vec<_>>>()?
        .iter()
        .filter(|r| r.accept)
        .count();
    save_dataset(out, &clips)?;
    let hash = config_hash(&SynthRun { n, seed, synth })?;
    std::fs::write(out.join("dataset.meta"), artifact_header(&hash, seed))?;
    println!("wrote {} clips to {} ({accepted} accepted by QC)", clips.len(), out.display());
    Ok(())
}

// ---------------------------------------------------------------------------

pub fn cmd_extract(wav: &Path, seed: u64, out: &Path) -> Result<()> {
    let clip = read_wav(wav)?;
    let desc = extract_descriptor(&clip)?;
    std::fs::create_dir_all(out)?;
    let mut bytes = Vec::with_capacity(desc.frames.len() * 4);
    for &v in desc.frames.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(out.join("music.f32"), bytes)?;
    let hash = config_hash(&(wav.to_string_lossy().into_owned(), MUSIC_DIM))?;
    let blocks = DESCRIPTOR_BLOCKS
        .iter()
        .map(|(n, l)| format!("{n}:{l}"))
        .collect::<Vec<_>>()
        .join(",");
    std::fs::write(
        out.join("desc.meta"),
        format!(
            "{}t = {}\nfps = {}\nmusic_dim = {}\nblocks = {}\n",
            artifact_header(&hash, seed),
            desc.frames.rows(),
            FPS,
            MUSIC_DIM,
            blocks
        ),
    )?;
    println!("extracted {} frames x {} descriptors", desc.frames.rows(), MUSIC_DIM);
    Ok(())
}

fn load_descriptor(dir: &Path) -> Result<Tensor<f32>> {
    // accepts both descriptor-only dirs and full clip dirs
    let meta_path = if dir.join("desc.meta").exists() {
        dir.join("desc.meta")
    } else {
        dir.join("clip.meta")
    };
    let text = std::fs::read_to_string(&meta_path)
        .with_context(|| format!("no descriptor metadata in {}", dir.display()))?;
    let mut t = None;
    for line in text.lines() {
        if let Some((k, v)) = line.split_once('=') {
            if k.trim() == "t" {
                t = Some(v.trim().parse::<usize>().context("bad frame count")?);
            }
        }
    }
    let t = t.context("descriptor metadata lacks a frame count")?;
    let mut bytes = Vec::new();
    std::fs::File::open(dir.join("music.f32"))?.read_to_end(&mut bytes)?;
    if bytes.len() != t * MUSIC_DIM * 4 {
        bail!(
            "music.f32 holds {} bytes, expected {} for {t} frames x {MUSIC_DIM}",
            bytes.len(),
            t * MUSIC_DIM * 4
        );
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Tensor::from_vec(t, MUSIC_DIM, data)?)
}

// ---------------------------------------------------------------------------

pub fn cmd_validate(dataset: &Path, cfg: &KvConfig) -> Result<()> {
    let clips = select_clips(dataset, None)?;
    let thresholds = qc_thresholds(cfg)?;
    let mut accepted = 0usize;
    for clip in &clips {
        let report = validate_clip(clip, &thresholds)?;
        if report.accept {
            accepted += 1;
            println!("{}: accept ({} frames, {} flagged)", clip.id, report.total_frames, report.flagged_frames);
        } else {
            println!("{}: reject ({})", clip.id, report.reasons().join(", "));
        }
    }
    println!("{accepted}/{} clips accepted", clips.len());
    Ok(())
}

// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct SplitRun {
    ratio: f64,
    seed: u64,
}

pub fn cmd_split(dataset: &Path, ratio: f64, seed: u64, out: &Path, cfg: &KvConfig) -> Result<()> {
    let ratio = if ratio == 0.0 {
        cfg.get("split.ratio", 0.7)?
    } else {
        ratio
    };
    if !(0.0..1.0).contains(&ratio) || ratio <= 0.0 {
        bail!("split ratio {ratio} must be in (0, 1)");
    }
    let ids: Vec<String> = load_ids(&dataset.join("index.txt"))?;
    let (train, test) = split_dataset(&ids, ratio, seed)?;
    std::fs::create_dir_all(out)?;
    let hash = config_hash(&SplitRun { ratio, seed })?;
    for (name, list) in [("train.txt", &train), ("test.txt", &test)] {
        let mut text = artifact_header(&hash, seed);
        for id in list {
            text.push_str(id);
            text.push('\n');
        }
        std::fs::write(out.join(name), text)?;
    }
    println!("split {} clips into {} train / {} test", ids.len(), train.len(), test.len());
    Ok(())
}

// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
pub struct RetrievalCkptMeta {
    pub model: RetrievalConfig,
    pub train: RetrievalTrainConfig,
}

pub fn cmd_train_retrieval(
    dataset: &Path,
    ids: Option<&Path>,
    eval_ids: Option<&Path>,
    epochs: Option<usize>,
    seed: u64,
    out: &Path,
    cfg: &KvConfig,
) -> Result<()> {
    let clips = select_clips(dataset, ids)?;
    let model_cfg = retrieval_config(cfg)?;
    let d = RetrievalTrainConfig::default();
    let train_cfg = RetrievalTrainConfig {
        epochs: epochs.unwrap_or(cfg.get("retrieval.epochs", 30)?),
        batch_size: cfg.get("retrieval.batch_size", d.batch_size)?,
        lr: cfg.get("retrieval.lr", d.lr)?,
        beta1: cfg.get("retrieval.beta1", d.beta1)?,
        beta2: cfg.get("retrieval.beta2", d.beta2)?,
        crop_frames: cfg.get("retrieval.crop_frames", d.crop_frames)?,
        weight_decay: cfg.get("retrieval.weight_decay", d.weight_decay)?,
        input_noise: cfg.get("retrieval.input_noise", d.input_noise)?,
        windows_per_clip: cfg.get("retrieval.windows_per_clip", d.windows_per_clip)?,
        seed,
    };
    let mut model = RetrievalModel::<f32>::new(model_cfg.clone(), seed)?;
    let report = train_retrieval(&mut model, &clips, &train_cfg)?;
    let meta = RetrievalCkptMeta {
        model: model_cfg,
        train: train_cfg,
    };
    std::fs::create_dir_all(out)?;
    save_checkpoint(&out.join("retrieval.ckpt"), &meta, &model.params)?;
    let hash = config_hash(&meta)?;
    write_loss_curve(&out.join("retrieval_loss.txt"), &report, &hash, seed)?;
    let acc = retrieval_top1_accuracy(&model, &clips)?;
    println!(
        "trained retrieval: loss {:.4} -> {:.4}, train top-1 {:.3}",
        report.loss_curve[0],
        report.loss_curve.last().unwrap(),
        acc
    );
    if let Some(p) = eval_ids {
        let held_out = select_clips(dataset, Some(p))?;
        let acc = retrieval_top1_accuracy(&model, &held_out)?;
        println!("held-out top-1 {:.3} over {} candidates", acc, held_out.len());
    }
    Ok(())
}

// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
pub struct GeneratorCkptMeta {
    pub model: GeneratorConfig,
    pub train: GeneratorTrainConfig,
}

pub fn load_retrieval_model(path: &Path) -> Result<RetrievalModel<f32>> {
    let (meta, params): (RetrievalCkptMeta, _) = load_checkpoint(path)?;
    Ok(RetrievalModel {
        config: meta.model,
        params,
    })
}

pub fn load_generator_model(path: &Path) -> Result<(GeneratorModel<f32>, GeneratorCkptMeta)> {
    let (meta, params): (GeneratorCkptMeta, _) = load_checkpoint::<f32, GeneratorCkptMeta>(path)?;
    let model = GeneratorModel {
        config: meta.model.clone(),
        params,
    };
    Ok((model, meta))
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_train_generator(
    dataset: &Path,
    ids: Option<&Path>,
    epochs: Option<usize>,
    lambda: Option<f64>,
    retrieval_ckpt: Option<&Path>,
    seed: u64,
    out: &Path,
    cfg: &KvConfig,
) -> Result<()> {
    let clips = select_clips(dataset, ids)?;
    let model_cfg = generator_config(cfg)?;
    let dw = LossWeights::default();
    let weights = LossWeights {
        lambda_align: lambda.unwrap_or(cfg.get("loss.lambda_align", dw.lambda_align)?),
        align_start_epoch: cfg.get("loss.align_start_epoch", dw.align_start_epoch)?,
    };
    let d = GeneratorTrainConfig::default();
    let epochs = epochs.unwrap_or(cfg.get("generator.epochs", 50)?);
    let base_lr = cfg.get("generator.base_lr", d.base_lr)?;
    let train_cfg = GeneratorTrainConfig {
        epochs,
        batch_size: cfg.get("generator.batch_size", d.batch_size)?,
        base_lr,
        min_lr: cfg.get("generator.min_lr", base_lr / 100.0)?,
        weight_decay: cfg.get("generator.weight_decay", d.weight_decay)?,
        weights: weights.clone(),
        seed,
    };
    let align_needed = weights.align_active(epochs.saturating_sub(1));
    let retrieval = match (align_needed, retrieval_ckpt) {
        (true, None) => bail!(
            "lambda_align {} becomes active at epoch {} but no --retrieval checkpoint was given; \
             train the retrieval model first (warm-up dependency)",
            weights.lambda_align,
            weights.align_start_epoch
        ),
        (_, Some(p)) => Some(load_retrieval_model(p)?),
        (false, None) => None,
    };
    let mut model = GeneratorModel::<f32>::new(model_cfg.clone(), seed)?;
    let report = train_generator(&mut model, &clips, &train_cfg, retrieval.as_ref())?;
    let meta = GeneratorCkptMeta {
        model: model_cfg,
        train: train_cfg,
    };
    std::fs::create_dir_all(out)?;
    save_checkpoint(&out.join("generator.ckpt"), &meta, &model.params)?;
    let hash = config_hash(&meta)?;
    write_loss_curve(&out.join("generator_loss.txt"), &report, &hash, seed)?;
    // epochs = 0 is allowed: it saves the freshly initialised model, which
    // is useful as an untrained baseline for metric comparisons
    match (report.loss_curve.first(), report.loss_curve.last()) {
        (Some(first), Some(last)) => {
            println!("trained generator: loss {first:.4} -> {last:.4}")
        }
        _ => println!("saved untrained generator"),
    }
    Ok(())
}

// ---------------------------------------------------------------------------

pub fn cmd_generate(
    checkpoint: &Path,
    wav: Option<&Path>,
    descriptor: Option<&Path>,
    seed: u64,
    out: &Path,
) -> Result<()> {
    let music = match (wav, descriptor) {
        (Some(w), None) => extract_descriptor(&read_wav(w)?)?.frames,
        (None, Some(d)) => load_descriptor(d)?,
        _ => bail!("give exactly one of --wav or --descriptor"),
    };
    let (model, meta) = load_generator_model(checkpoint)?;
    let g0 = start_pose();
    let gesture = model.generate_sequence(&music, &g0)?;
    let t = gesture.rows();
    let clip = ClipPair::new(
        "generated".to_string(),
        music,
        gesture,
        ClipMeta::default(),
    )?;
    save_clip(out, &clip)?;
    let hash = config_hash(&(config_hash(&meta)?, seed))?;
    std::fs::write(out.join("run.meta"), artifact_header(&hash, seed))?;
    println!("generated {t} frames ({:.2} s) to {}", t as f64 / FPS as f64, out.display());
    Ok(())
}

// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct EvalRun {
    generator_hash: String,
    retrieval_hash: String,
    ground_truth: bool,
    seed: u64,
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_evaluate(
    generator_ckpt: Option<&Path>,
    retrieval_ckpt: &Path,
    dataset: &Path,
    ids: Option<&Path>,
    ground_truth: bool,
    seed: u64,
    out: &Path,
) -> Result<MetricReport> {
    let clips = select_clips(dataset, ids)?;
    if clips.is_empty() {
        bail!("test set is empty");
    }
    let encoder = load_retrieval_model(retrieval_ckpt)?;
    let (generator, gen_hash) = match (ground_truth, generator_ckpt) {
        (true, _) => (None, "ground-truth".to_string()),
        (false, Some(p)) => {
            let (m, meta) = load_generator_model(p)?;
            (Some(m), config_hash(&meta)?)
        }
        (false, None) => bail!("--generator checkpoint required unless --ground-truth is set"),
    };

    let g0 = start_pose();
    use rayon::prelude::*;
    let generated: Vec<Tensor<f32>> = clips
        .par_iter()
        .map(|clip| -> maestro_core::Result<Tensor<f32>> {
            match &generator {
                None => Ok(clip.gesture.clone()),
                Some(m) => m.generate_sequence(&clip.music, &g0),
            }
        })
        .collect::<maestro_core::Result<_>>()?;

    let dim = encoder.config.embed_dim;
    let mut gen_emb = Tensor::<f64>::zeros(clips.len(), dim);
    let mut real_emb = gen_emb.clone();
    let mut music_emb = gen_emb.clone();
    let rows: Vec<maestro_core::Result<(Vec<f32>, Vec<f32>, Vec<f32>)>> = clips
        .par_iter()
        .zip(&generated)
        .map(|(clip, gen)| {
            Ok((
                encoder.embed_gesture(gen)?.row(0).to_vec(),
                encoder.embed_gesture(&clip.gesture)?.row(0).to_vec(),
                encoder.embed_music(&clip.music)?.row(0).to_vec(),
            ))
        })
        .collect();
    for (i, r) in rows.into_iter().enumerate() {
        let (g, re, m) = r?;
        for c in 0..dim {
            gen_emb.set(i, c, g[c] as f64);
            real_emb.set(i, c, re[c] as f64);
            music_emb.set(i, c, m[c] as f64);
        }
    }
    let gen_set = EmbeddingSet::new(gen_emb, EmbeddingTag::Generated)?;
    let real_set = EmbeddingSet::new(real_emb, EmbeddingTag::Real)?;
    let music_set = EmbeddingSet::new(music_emb, EmbeddingTag::Music)?;

    let run = EvalRun {
        generator_hash: gen_hash,
        retrieval_hash: config_hash(&encoder.config)?,
        ground_truth,
        seed,
    };
    let report = MetricReport {
        fid: fid(&gen_set, &real_set)?,
        m_dist: m_dist(&gen_set, &real_set, None)?,
        mm_dist: mm_dist(&gen_set, &music_set, None)?,
        div: diversity(&gen_set)?,
        n_generated: gen_set.len(),
        n_real: real_set.len(),
        n_music: music_set.len(),
        config_hash: config_hash(&run)?,
        seed,
    };
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("report.txt"), report.to_kv_text())?;
    print!("{}", report.table());
    Ok(report)
}

// re-exported for integration tests
pub use maestro_core::data::load_clip;

pub fn default_out(out: Option<PathBuf>) -> Result<PathBuf> {
    out.ok_or_else(|| anyhow::anyhow!("--out directory is required for this command"))
}
