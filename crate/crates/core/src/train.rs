//! Training loops: contrastive pre-training of the retrieval encoders, then
//! the gesture generator with teacher forcing and an optional alignment term
//! in the frozen retrieval space.

use crate::data::ClipPair;
use crate::error::{Error, Result};
use crate::generator::GeneratorModel;
use crate::losses::{total_loss_on_tape, LossWeights};
use crate::nn::{ParamSet, ParamVars};
use crate::optim::{cosine_lr, AdamWConfig, OptimizerState};
use crate::pose::{pack_pose, PoseFrame};
use crate::retrieval::{clip_loss_on_tape, similarity_matrix, Branch, RetrievalModel};
use crate::tape::Tape;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RetrievalTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// random temporal crop length in frames, 0 to train on full clips.
    /// Music and gesture share the crop offset, so temporally aligned
    /// structure stays a matching signal while absolute position does not.
    pub crop_frames: usize,
    pub weight_decay: f64,
    /// gaussian input noise scale, in units of each dimension's training-set
    /// standard deviation; 0 disables it. One offset is drawn per dimension
    /// per window and held constant over the frames, so it shifts the pooled
    /// statistics of every training view and discourages the encoders from
    /// memorising individual clips. Noise is drawn independently per branch.
    pub input_noise: f64,
    /// number of crop windows drawn per clip within one batch. With more
    /// than one, windows of the same clip appear as mutual negatives, so
    /// clip identity alone cannot separate a batch and the encoders must
    /// pick up window-level structure. Requires crop_frames > 0.
    pub windows_per_clip: usize,
    pub seed: u64,
}

impl Default for RetrievalTrainConfig {
    fn default() -> Self {
        RetrievalTrainConfig {
            epochs: 150,
            batch_size: 8,
            lr: 1e-3,
            beta1: 0.5,
            beta2: 0.99,
            crop_frames: 150,
            weight_decay: 0.0,
            input_noise: 0.1,
            windows_per_clip: 2,
            seed: 0,
        }
    }
}

fn random_crop_pair(
    clip: &ClipPair,
    crop: usize,
    rng: &mut ChaCha20Rng,
) -> (crate::tensor::Tensor<f32>, crate::tensor::Tensor<f32>) {
    let t = clip.frames();
    if crop == 0 || t <= crop {
        return (clip.music.clone(), clip.gesture.clone());
    }
    use rand::Rng;
    let start = rng.gen_range(0..=t - crop);
    (
        clip.music.slice_rows(start, crop),
        clip.gesture.slice_rows(start, crop),
    )
}

/// Add one N(0, std_d^2) offset per column, held constant over all rows of
/// the window. Per-frame noise would average out to almost nothing under the
/// mean pooling (it shrinks by 1/sqrt(frames)), so it cannot stop the
/// encoder from memorising pooled clip fingerprints; a shared offset shifts
/// the pooled vector by the full noise scale and blurs exactly the
/// statistics that identify an individual training clip.
fn add_gaussian_noise(
    x: &mut crate::tensor::Tensor<f32>,
    col_std: &[f32],
    rng: &mut ChaCha20Rng,
) {
    use rand::Rng;
    let cols = x.cols();
    let mut offsets = vec![0.0f32; cols];
    for (c, o) in offsets.iter_mut().enumerate() {
        // Box-Muller from two uniform draws
        let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        let z = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
        *o = col_std[c] * z as f32;
    }
    for (i, v) in x.data_mut().iter_mut().enumerate() {
        *v += offsets[i % cols];
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainReport {
    /// mean loss per epoch
    pub loss_curve: Vec<f64>,
}

/// Symmetric contrastive training over paired clips. With few clips the
/// contrastive objective memorizes quickly, so weight decay matters more
/// here than for the generator.
pub fn train_retrieval(
    model: &mut RetrievalModel<f32>,
    clips: &[ClipPair],
    cfg: &RetrievalTrainConfig,
) -> Result<TrainReport> {
    if clips.len() < 2 {
        return Err(Error::InvalidArgument(
            "contrastive training needs at least 2 clips".into(),
        ));
    }
    let batch = cfg.batch_size.min(clips.len());
    if batch < cfg.batch_size {
        eprintln!(
            "warning: batch size {} clamped to dataset size {}",
            cfg.batch_size,
            clips.len()
        );
    }
    let music_refs: Vec<&crate::tensor::Tensor<f32>> = clips.iter().map(|c| &c.music).collect();
    let gesture_refs: Vec<&crate::tensor::Tensor<f32>> = clips.iter().map(|c| &c.gesture).collect();
    model.fit_input_norm(Branch::Music, &music_refs)?;
    model.fit_input_norm(Branch::Gesture, &gesture_refs)?;
    let mut opt = OptimizerState::new(
        &model.params,
        AdamWConfig {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            weight_decay: cfg.weight_decay,
            ..AdamWConfig::default()
        },
    );
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..clips.len()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    let tau = model.config.temperature;
    // per-dimension noise std in raw input units (the fitted affine maps
    // them back to unit scale, so the noise level is uniform after it)
    let noise_stds: Option<(Vec<f32>, Vec<f32>)> = (cfg.input_noise > 0.0).then(|| {
        let inv = |name: &str| -> Vec<f32> {
            model
                .params
                .get(name)
                .data()
                .iter()
                .map(|&s| cfg.input_noise as f32 / s.max(1e-12))
                .collect()
        };
        (inv("m.norm.scale"), inv("g.norm.scale"))
    });
    for _epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut n_batches = 0usize;
        for chunk in order.chunks(batch) {
            if chunk.len() < 2 {
                continue; // a 1-clip contrastive batch has no negatives
            }
            let mut tape = Tape::<f32>::new();
            // the input affine is a fitted preprocessor, not a trainable
            // parameter; training it lets the optimizer collapse the inputs
            let vars = ParamVars::register_with(&mut tape, &model.params, |n| !n.contains(".norm."));
            let wpc = cfg.windows_per_clip.max(1);
            let mut music_rows = Vec::with_capacity(chunk.len() * wpc);
            let mut gesture_rows = Vec::with_capacity(chunk.len() * wpc);
            for &i in chunk {
                for _ in 0..wpc {
                    let (mut mc, mut gc) = random_crop_pair(&clips[i], cfg.crop_frames, &mut rng);
                    if let Some((ms, gs)) = &noise_stds {
                        add_gaussian_noise(&mut mc, ms, &mut rng);
                        add_gaussian_noise(&mut gc, gs, &mut rng);
                    }
                    let m = tape.constant(mc);
                    let g = tape.constant(gc);
                    music_rows.push(model.embed_on_tape(&mut tape, &vars, Branch::Music, m, Some(&mut rng))?);
                    gesture_rows.push(model.embed_on_tape(
                        &mut tape,
                        &vars,
                        Branch::Gesture,
                        g,
                        Some(&mut rng),
                    )?);
                }
            }
            let u = tape.concat_rows(&music_rows)?;
            let v = tape.concat_rows(&gesture_rows)?;
            let vt = tape.transpose(v);
            let s_raw = tape.matmul(u, vt)?;
            let s = tape.scale(s_raw, 1.0 / tau as f32);
            let loss = clip_loss_on_tape(&mut tape, s)?;
            let grads = tape.backward(loss)?;
            let grad_set = vars.collect_grads(&model.params, &grads);
            opt.step(&mut model.params, &grad_set, None)?;
            epoch_loss += tape.value(loss).get(0, 0) as f64;
            n_batches += 1;
        }
        if n_batches == 0 {
            return Err(Error::InvalidArgument("no usable batches".into()));
        }
        curve.push(epoch_loss / n_batches as f64);
    }
    Ok(TrainReport { loss_curve: curve })
}

/// Fraction of clips whose music embedding is closest to its own gesture
/// embedding (music-to-gesture top-1).
pub fn retrieval_top1_accuracy(model: &RetrievalModel<f32>, clips: &[ClipPair]) -> Result<f64> {
    if clips.is_empty() {
        return Err(Error::InvalidArgument("no clips".into()));
    }
    let mut u = crate::tensor::Tensor::zeros(clips.len(), model.config.embed_dim);
    let mut v = u.clone();
    for (i, clip) in clips.iter().enumerate() {
        u.row_mut(i).copy_from_slice(model.embed_music(&clip.music)?.row(0));
        v.row_mut(i).copy_from_slice(model.embed_gesture(&clip.gesture)?.row(0));
    }
    let s = similarity_matrix(&u, &v, 1.0)?;
    let mut hits = 0usize;
    for i in 0..clips.len() {
        let row = s.row(i);
        let best = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        if best == i {
            hits += 1;
        }
    }
    Ok(hits as f64 / clips.len() as f64)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GeneratorTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub min_lr: f64,
    pub weight_decay: f64,
    pub weights: LossWeights,
    pub seed: u64,
}

impl Default for GeneratorTrainConfig {
    fn default() -> Self {
        GeneratorTrainConfig {
            epochs: 100,
            batch_size: 16,
            base_lr: 4e-3,
            min_lr: 4e-5,
            weight_decay: 0.01,
            weights: LossWeights::default(),
            seed: 0,
        }
    }
}

/// Start-of-sequence pose fed to decoder position 0.
pub fn start_pose() -> Vec<f32> {
    pack_pose(&PoseFrame::rest()).iter().map(|&v| v as f32).collect()
}

fn clip_loss_and_grads(
    model: &GeneratorModel<f32>,
    clip: &ClipPair,
    weights: &LossWeights,
    epoch: usize,
    align: Option<(&RetrievalModel<f32>, &crate::tensor::Tensor<f32>)>,
    dropout_seed: u64,
) -> Result<(f64, ParamSet<f32>)> {
    let mut tape = Tape::<f32>::new();
    let vars = ParamVars::register(&mut tape, &model.params, true);
    let frozen = align.map(|(enc, _)| ParamVars::register(&mut tape, &enc.params, false));
    let g0 = start_pose();
    let dec_in = model.shifted_decoder_input(&clip.gesture, &g0)?;
    let m = tape.constant(clip.music.clone());
    let d = tape.constant(dec_in);
    let gt = tape.constant(clip.gesture.clone());
    let mut rng = ChaCha20Rng::seed_from_u64(dropout_seed);
    let pred = model.teacher_forced_on_tape(&mut tape, &vars, m, d, Some(&mut rng))?;
    let align_ctx = match (align, &frozen) {
        (Some((enc, emb)), Some(fv)) => Some((enc, fv, emb)),
        _ => None,
    };
    let loss = total_loss_on_tape(&mut tape, pred, gt, weights, epoch, align_ctx)?;
    let grads = tape.backward(loss)?;
    let grad_set = vars.collect_grads(&model.params, &grads);
    Ok((tape.value(loss).get(0, 0) as f64, grad_set))
}

/// AdamW with cosine decay over all steps. Once the alignment term becomes
/// active the frozen retrieval encoder must be supplied.
pub fn train_generator(
    model: &mut GeneratorModel<f32>,
    clips: &[ClipPair],
    cfg: &GeneratorTrainConfig,
    retrieval: Option<&RetrievalModel<f32>>,
) -> Result<TrainReport> {
    if clips.is_empty() {
        return Err(Error::InvalidArgument("no training clips".into()));
    }
    cfg.weights.validate()?;
    if cfg.weights.align_active(cfg.epochs.saturating_sub(1)) && retrieval.is_none() {
        return Err(Error::InvalidArgument(
            "alignment loss becomes active but no retrieval encoder was given".into(),
        ));
    }
    let batch = cfg.batch_size.min(clips.len());
    if batch < cfg.batch_size {
        eprintln!(
            "warning: batch size {} clamped to dataset size {}",
            cfg.batch_size,
            clips.len()
        );
    }
    // ground-truth embeddings are constants; compute them once
    let gt_embeddings: Option<Vec<crate::tensor::Tensor<f32>>> = match retrieval {
        Some(enc) => Some(
            clips
                .iter()
                .map(|c| enc.embed_gesture(&c.gesture))
                .collect::<Result<_>>()?,
        ),
        None => None,
    };
    let mut opt = OptimizerState::new(
        &model.params,
        AdamWConfig {
            lr: cfg.base_lr,
            weight_decay: cfg.weight_decay,
            ..AdamWConfig::default()
        },
    );
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..clips.len()).collect();
    let n_batches_per_epoch = clips.len().div_ceil(batch);
    let total_steps = (cfg.epochs * n_batches_per_epoch) as u64;
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let align_now = cfg.weights.align_active(epoch);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(batch) {
            // per-clip gradients in parallel, summed in clip order
            let results: Vec<Result<(f64, ParamSet<f32>)>> = chunk
                .par_iter()
                .map(|&i| {
                    let align = if align_now {
                        retrieval.map(|enc| (enc, &gt_embeddings.as_ref().unwrap()[i]))
                    } else {
                        None
                    };
                    let dropout_seed = cfg
                        .seed
                        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                        .wrapping_add((epoch * clips.len() + i) as u64);
                    clip_loss_and_grads(model, &clips[i], &cfg.weights, epoch, align, dropout_seed)
                })
                .collect();
            let mut grad_sum = model.params.zeros_like();
            let mut batch_loss = 0.0;
            let n = results.len();
            for r in results {
                let (l, g) = r?;
                batch_loss += l;
                for (name, acc) in grad_sum.iter_mut() {
                    acc.add_assign(g.get(name))?;
                }
            }
            let scale = 1.0 / n as f32;
            for (_, g) in grad_sum.iter_mut() {
                for v in g.data_mut() {
                    *v *= scale;
                }
            }
            let lr = cosine_lr(opt.step_count(), total_steps, cfg.base_lr, cfg.min_lr);
            opt.step(&mut model.params, &grad_sum, Some(lr))?;
            epoch_loss += batch_loss / n as f64;
        }
        curve.push(epoch_loss / n_batches_per_epoch as f64);
    }
    Ok(TrainReport { loss_curve: curve })
}
