//! Clip containers, quality-control filters, dataset splitting, windowing,
//! and the synthetic beat-locked dataset used in place of real recordings.
//!
//! Container layout: one directory per clip holding `clip.meta` (UTF-8
//! key-value text), `music.f32` and `gesture.f32` (little-endian float32,
//! row-major). A dataset index is a newline-delimited list of clip
//! directories.

use crate::audio::{extract_descriptor, AudioClip, DESCRIPTOR_BLOCKS, FPS, INTERNAL_RATE, MUSIC_DIM};
use crate::error::{Error, Result};
use crate::pose::{
    axis_angle_to_rotmat, pack_pose, rotation_angle_between, rotmat_to_sixd, sixd_to_rotmat_at,
    Mat3, PoseFrame, NUM_JOINTS, POSE_DIM,
};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct ClipMeta {
    pub emotion: Option<String>,
    pub conducting_type: Option<String>,
    pub tempo_bpm: Option<f64>,
    /// continuous style factors of synthetic clips, as "key:value,..."
    pub style: Option<String>,
    /// parent clip id and frame offset for windows cut from longer clips
    pub parent: Option<(String, usize)>,
}

/// Temporally aligned music/gesture pair at 30 fps.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipPair {
    pub id: String,
    pub fps: usize,
    pub music: Tensor<f32>,
    pub gesture: Tensor<f32>,
    pub meta: ClipMeta,
}

impl ClipPair {
    pub fn new(id: String, music: Tensor<f32>, gesture: Tensor<f32>, meta: ClipMeta) -> Result<Self> {
        if music.rows() != gesture.rows() {
            return Err(Error::MalformedContainer(format!(
                "clip {id}: music has {} frames, gesture {}",
                music.rows(),
                gesture.rows()
            )));
        }
        if music.cols() != MUSIC_DIM || gesture.cols() != POSE_DIM {
            return Err(Error::MalformedContainer(format!(
                "clip {id}: dims {}x{} (expected {MUSIC_DIM}/{POSE_DIM})",
                music.cols(),
                gesture.cols()
            )));
        }
        Ok(ClipPair {
            id,
            fps: FPS,
            music,
            gesture,
            meta,
        })
    }

    pub fn frames(&self) -> usize {
        self.music.rows()
    }
}

// ---------------------------------------------------------------------------
// Container I/O

fn write_f32_file(path: &Path, t: &Tensor<f32>) -> Result<()> {
    let mut bytes = Vec::with_capacity(t.len() * 4);
    for &v in t.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::File::create(path)?.write_all(&bytes)?;
    Ok(())
}

fn read_f32_file(path: &Path, rows: usize, cols: usize) -> Result<Tensor<f32>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() != rows * cols * 4 {
        return Err(Error::MalformedContainer(format!(
            "{}: expected {} bytes, found {}",
            path.display(),
            rows * cols * 4,
            bytes.len()
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::from_vec(rows, cols, data)
}

fn block_layout_string() -> String {
    DESCRIPTOR_BLOCKS
        .iter()
        .map(|(n, l)| format!("{n}:{l}"))
        .collect::<Vec<_>>()
        .join(",")
}

pub fn save_clip(dir: &Path, clip: &ClipPair) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut meta = String::new();
    meta.push_str(&format!("id = {}\n", clip.id));
    meta.push_str(&format!("fps = {}\n", clip.fps));
    meta.push_str(&format!("t = {}\n", clip.frames()));
    meta.push_str(&format!("music_dim = {}\n", MUSIC_DIM));
    meta.push_str(&format!("pose_dim = {}\n", POSE_DIM));
    meta.push_str(&format!("blocks = {}\n", block_layout_string()));
    meta.push_str("joint_order = smpl\n");
    if let Some(e) = &clip.meta.emotion {
        meta.push_str(&format!("emotion = {e}\n"));
    }
    if let Some(t) = &clip.meta.conducting_type {
        meta.push_str(&format!("type = {t}\n"));
    }
    if let Some(b) = clip.meta.tempo_bpm {
        meta.push_str(&format!("tempo_bpm = {b}\n"));
    }
    if let Some(s) = &clip.meta.style {
        meta.push_str(&format!("style = {s}\n"));
    }
    if let Some((p, off)) = &clip.meta.parent {
        meta.push_str(&format!("parent = {p}:{off}\n"));
    }
    std::fs::write(dir.join("clip.meta"), meta)?;
    write_f32_file(&dir.join("music.f32"), &clip.music)?;
    write_f32_file(&dir.join("gesture.f32"), &clip.gesture)?;
    Ok(())
}

fn parse_kv(text: &str) -> BTreeMap<String, String> {
    let mut map = BTreeMap::new();
    for line in text.lines() {
        if let Some((k, v)) = line.split_once('=') {
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
    }
    map
}

pub fn load_clip(dir: &Path) -> Result<ClipPair> {
    let meta_path = dir.join("clip.meta");
    let text = std::fs::read_to_string(&meta_path)
        .map_err(|e| Error::MalformedContainer(format!("{}: {e}", meta_path.display())))?;
    let kv = parse_kv(&text);
    let field = |k: &str| {
        kv.get(k)
            .ok_or_else(|| Error::MalformedContainer(format!("missing {k} in clip.meta")))
    };
    let id = field("id")?.clone();
    let t: usize = field("t")?
        .parse()
        .map_err(|_| Error::MalformedContainer("bad t".into()))?;
    let fps: usize = field("fps")?
        .parse()
        .map_err(|_| Error::MalformedContainer("bad fps".into()))?;
    if fps != FPS {
        return Err(Error::MalformedContainer(format!("fps {fps}, expected {FPS}")));
    }
    let music = read_f32_file(&dir.join("music.f32"), t, MUSIC_DIM)?;
    let gesture = read_f32_file(&dir.join("gesture.f32"), t, POSE_DIM)?;
    let meta = ClipMeta {
        emotion: kv.get("emotion").cloned(),
        conducting_type: kv.get("type").cloned(),
        tempo_bpm: kv.get("tempo_bpm").and_then(|v| v.parse().ok()),
        style: kv.get("style").cloned(),
        parent: kv.get("parent").and_then(|v| {
            let (p, off) = v.rsplit_once(':')?;
            Some((p.to_string(), off.parse().ok()?))
        }),
    };
    ClipPair::new(id, music, gesture, meta)
}

/// Writes every clip into `root/<id>/` plus `root/index.txt`.
pub fn save_dataset(root: &Path, clips: &[ClipPair]) -> Result<()> {
    std::fs::create_dir_all(root)?;
    let mut index = String::new();
    for clip in clips {
        save_clip(&root.join(&clip.id), clip)?;
        index.push_str(&clip.id);
        index.push('\n');
    }
    std::fs::write(root.join("index.txt"), index)?;
    Ok(())
}

pub fn load_dataset(root: &Path) -> Result<Vec<ClipPair>> {
    let index = std::fs::read_to_string(root.join("index.txt"))
        .map_err(|e| Error::MalformedContainer(format!("missing index.txt: {e}")))?;
    index
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|id| load_clip(&root.join(id.trim())))
        .collect()
}

// ---------------------------------------------------------------------------
// Quality control

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct QcThresholds {
    /// root translation box half-width, meters
    pub translation_box: f64,
    /// per-joint rotational velocity limit, rad/s
    pub max_joint_velocity: f64,
    /// L∞ pose change below this counts as frozen
    pub frozen_eps: f64,
    /// frozen runs longer than this are rejected, seconds
    pub frozen_seconds: f64,
    /// root translation jump between adjacent frames, meters
    pub max_shift: f64,
    /// flagged-frame ratio above this rejects the clip
    pub max_failure_ratio: f64,
}

impl Default for QcThresholds {
    fn default() -> Self {
        QcThresholds {
            translation_box: 5.0,
            max_joint_velocity: 30.0,
            frozen_eps: 1e-4,
            frozen_seconds: 2.0,
            max_shift: 0.5,
            max_failure_ratio: 0.05,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FrameFlag {
    NonFinite,
    RotationInvalid,
    TranslationOutlier,
    VelocityJump,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SequenceFlag {
    FrozenInterval,
    GlobalShift,
    FailureRatio,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct QcReport {
    pub frame_flags: Vec<(usize, FrameFlag)>,
    pub sequence_flags: Vec<SequenceFlag>,
    pub flagged_frames: usize,
    pub total_frames: usize,
    pub accept: bool,
}

impl QcReport {
    pub fn reasons(&self) -> Vec<String> {
        let mut out: Vec<String> = self.sequence_flags.iter().map(|f| format!("{f:?}")).collect();
        if out.is_empty() && !self.accept {
            out.push("FailureRatio".into());
        }
        out
    }
}

fn frame_rotations(gesture: &Tensor<f32>, t: usize) -> Vec<Option<Mat3>> {
    let row = gesture.row(t);
    (0..NUM_JOINTS)
        .map(|j| {
            let mut six = [0.0f64; 6];
            for (k, s) in six.iter_mut().enumerate() {
                *s = row[3 + j * 6 + k] as f64;
            }
            sixd_to_rotmat_at(&six, t, j).ok()
        })
        .collect()
}

/// Frame- and sequence-level checks; a reject always carries at least one
/// reason. All checks are monotone in their thresholds.
pub fn validate_clip(clip: &ClipPair, thresholds: &QcThresholds) -> Result<QcReport> {
    let t_total = clip.frames();
    if t_total == 0 {
        return Err(Error::MalformedContainer(format!("clip {}: empty", clip.id)));
    }
    let mut frame_flags = Vec::new();
    let mut flagged = vec![false; t_total];
    let flag = |flags: &mut Vec<(usize, FrameFlag)>, flagged: &mut [bool], t: usize, f: FrameFlag| {
        flags.push((t, f));
        flagged[t] = true;
    };

    let mut rotations: Vec<Vec<Option<Mat3>>> = Vec::with_capacity(t_total);
    for t in 0..t_total {
        let g_row = clip.gesture.row(t);
        let m_row = clip.music.row(t);
        if g_row.iter().any(|v| !v.is_finite()) || m_row.iter().any(|v| !v.is_finite()) {
            flag(&mut frame_flags, &mut flagged, t, FrameFlag::NonFinite);
            rotations.push(vec![None; NUM_JOINTS]);
            continue;
        }
        let rots = frame_rotations(&clip.gesture, t);
        if rots.iter().any(Option::is_none) {
            flag(&mut frame_flags, &mut flagged, t, FrameFlag::RotationInvalid);
        }
        let trans_bad = (0..3).any(|i| (g_row[i] as f64).abs() > thresholds.translation_box);
        if trans_bad {
            flag(&mut frame_flags, &mut flagged, t, FrameFlag::TranslationOutlier);
        }
        rotations.push(rots);
    }
    for t in 1..t_total {
        let mut worst: f64 = 0.0;
        for j in 0..NUM_JOINTS {
            if let (Some(a), Some(b)) = (&rotations[t - 1][j], &rotations[t][j]) {
                worst = worst.max(rotation_angle_between(a, b) * clip.fps as f64);
            }
        }
        if worst > thresholds.max_joint_velocity {
            flag(&mut frame_flags, &mut flagged, t, FrameFlag::VelocityJump);
        }
    }

    let mut sequence_flags = Vec::new();
    // frozen interval: max L∞ pose change below eps for more than frozen_seconds
    let frozen_limit = (thresholds.frozen_seconds * clip.fps as f64) as usize;
    let mut run = 0usize;
    let mut frozen = false;
    for t in 1..t_total {
        let delta = clip
            .gesture
            .row(t)
            .iter()
            .zip(clip.gesture.row(t - 1))
            .map(|(a, b)| (a - b).abs() as f64)
            .fold(0.0, f64::max);
        if delta < thresholds.frozen_eps {
            run += 1;
            if run > frozen_limit {
                frozen = true;
            }
        } else {
            run = 0;
        }
    }
    if frozen {
        sequence_flags.push(SequenceFlag::FrozenInterval);
    }
    // global shift: root translation jump between adjacent frames
    let shift = (1..t_total).any(|t| {
        let a = clip.gesture.row(t);
        let b = clip.gesture.row(t - 1);
        let d2: f64 = (0..3).map(|i| ((a[i] - b[i]) as f64).powi(2)).sum();
        a[..3].iter().chain(&b[..3]).all(|v| v.is_finite()) && d2.sqrt() > thresholds.max_shift
    });
    if shift {
        sequence_flags.push(SequenceFlag::GlobalShift);
    }
    let flagged_frames = flagged.iter().filter(|&&f| f).count();
    let ratio = flagged_frames as f64 / t_total as f64;
    if ratio > thresholds.max_failure_ratio {
        sequence_flags.push(SequenceFlag::FailureRatio);
    }
    let accept = sequence_flags.is_empty();
    Ok(QcReport {
        frame_flags,
        sequence_flags,
        flagged_frames,
        total_frames: t_total,
        accept,
    })
}

// ---------------------------------------------------------------------------
// Splitting and windowing

/// Deterministic disjoint/exhaustive split; train size = round(ratio·N).
pub fn split_dataset(ids: &[String], ratio: f64, seed: u64) -> Result<(Vec<String>, Vec<String>)> {
    if ids.len() < 2 {
        return Err(Error::InvalidArgument("split needs at least 2 clips".into()));
    }
    let mut shuffled: Vec<String> = ids.to_vec();
    shuffled.sort(); // order independent of input order
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    use rand::seq::SliceRandom;
    shuffled.shuffle(&mut rng);
    let n_train = (ratio * ids.len() as f64).round() as usize;
    let (train, test) = shuffled.split_at(n_train.min(ids.len()));
    Ok((train.to_vec(), test.to_vec()))
}

/// Cut fixed-length windows; clips shorter than the window give an empty
/// list with a warning.
pub fn window_clips(clip: &ClipPair, seconds: f64, stride_seconds: f64) -> Vec<ClipPair> {
    let win = (seconds * clip.fps as f64).round() as usize;
    let stride = ((stride_seconds * clip.fps as f64).round() as usize).max(1);
    if clip.frames() < win {
        eprintln!(
            "warning: clip {} has {} frames, shorter than the {win}-frame window",
            clip.id,
            clip.frames()
        );
        return Vec::new();
    }
    let mut out = Vec::new();
    let mut start = 0;
    while start + win <= clip.frames() {
        let mut meta = clip.meta.clone();
        meta.parent = Some((clip.id.clone(), start));
        out.push(
            ClipPair::new(
                format!("{}_w{}", clip.id, start),
                clip.music.slice_rows(start, win),
                clip.gesture.slice_rows(start, win),
                meta,
            )
            .expect("window of a valid clip"),
        );
        start += stride;
    }
    out
}

// ---------------------------------------------------------------------------
// Synthetic dataset

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seconds: f64,
    pub min_bpm: f64,
    pub max_bpm: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seconds: 10.0,
            min_bpm: 40.0,
            max_bpm: 180.0,
        }
    }
}

const ARCHETYPES: [(&str, f64, [f64; 3]); 4] = [
    // name, gesture amplitude, tone chord (Hz)
    ("lyrical", 0.12, [220.0, 277.2, 329.6]),
    ("energetic", 0.25, [261.6, 329.6, 392.0]),
    ("solemn", 0.08, [196.0, 246.9, 293.7]),
    ("joyful", 0.2, [293.7, 370.0, 440.0]),
];

/// joint oscillation weights: arms strong, spine moderate, rest subtle
fn joint_weight(j: usize) -> f64 {
    match j {
        16 | 17 | 18 | 19 | 20 | 21 => 1.0, // shoulders, elbows, wrists
        3 | 6 | 9 | 12 | 15 => 0.3,         // spine and neck chain
        _ => 0.1,
    }
}

/// Wrist-proxy joint used by tests that recover the beat from motion.
pub const WRIST_JOINT: usize = 20;

struct ClipPlan {
    bpm: f64,
    meter: usize,
    archetype: usize,
    voicing: f64,
    bass: f64,
    treble: f64,
    env_amp: [f64; 2],
    env_period: [f64; 2],
    env_phase: [f64; 2],
    joint_phase: [f64; NUM_JOINTS],
    joint_axis: [[f64; 3]; NUM_JOINTS],
    noise_freq: [f64; NUM_JOINTS],
    noise_phase: [f64; NUM_JOINTS],
    conducting_type: &'static str,
}

/// Golden-ratio fraction used for low-discrepancy tempo spacing.
const GOLDEN: f64 = 0.618_033_988_749_895;

impl ClipPlan {
    /// Stratified corpus design: tempo follows a low-discrepancy sequence
    /// over the clip index and the discrete factors cycle, so every pair of
    /// clips in a dataset is well separated in at least one factor. The
    /// remaining latents are drawn from the per-clip rng.
    fn sample(rng: &mut ChaCha20Rng, cfg: &SynthConfig, seed: u64, index: usize) -> Self {
        let mut joint_phase = [0.0; NUM_JOINTS];
        let mut joint_axis = [[0.0; 3]; NUM_JOINTS];
        let mut noise_freq = [0.0; NUM_JOINTS];
        let mut noise_phase = [0.0; NUM_JOINTS];
        let shift = ((seed % 4096) as f64 * GOLDEN).fract();
        let tempo_frac = (index as f64 * GOLDEN + shift).fract();
        let sd = seed as usize % 4096;
        let archetype = (index + sd) % ARCHETYPES.len();
        // phases and axes depend only on joint index and archetype, so the
        // gesture style is fully determined by the shared clip latents and
        // carries no clip-specific fingerprint
        for j in 0..NUM_JOINTS {
            let jf = j as f64;
            joint_phase[j] =
                std::f64::consts::TAU * ((jf * 0.618).fract()) + 0.7 * archetype as f64;
            let axis = [(jf * 1.7 + 1.0).sin(), (jf * 0.9).cos(), (jf * 2.3 + 0.5).sin()];
            let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2])
                .sqrt()
                .max(1e-6);
            joint_axis[j] = [axis[0] / n, axis[1] / n, axis[2] / n];
            noise_freq[j] = 0.1 + 0.4 * (jf * 0.317).fract();
            noise_phase[j] = std::f64::consts::TAU * (jf * 0.777).fract();
        }
        ClipPlan {
            bpm: cfg.min_bpm + (cfg.max_bpm - cfg.min_bpm) * tempo_frac,
            meter: [2usize, 3, 4][(index / 4 + sd) % 3],
            archetype,
            voicing: rng.gen_range(0.0..1.0),
            bass: rng.gen_range(0.0..1.0),
            treble: rng.gen_range(0.0..1.0),
            env_amp: [rng.gen_range(0.1..0.3), rng.gen_range(0.05..0.2)],
            env_period: [rng.gen_range(2.0..8.0), rng.gen_range(2.0..8.0)],
            env_phase: [
                rng.gen_range(0.0..std::f64::consts::TAU),
                rng.gen_range(0.0..std::f64::consts::TAU),
            ],
            joint_phase,
            joint_axis,
            noise_freq,
            noise_phase,
            conducting_type: if (index / 12 + sd) % 2 == 0 { "choral" } else { "solo" },
        }
    }

    /// Shared amplitude envelope, bounded away from zero.
    fn envelope(&self, t: f64) -> f64 {
        let mut e = 1.0;
        for k in 0..2 {
            e += self.env_amp[k]
                * (std::f64::consts::TAU * t / self.env_period[k] + self.env_phase[k]).sin();
        }
        e.max(0.3)
    }

    fn beat_phase(&self, t: f64) -> f64 {
        std::f64::consts::TAU * t * self.bpm / 60.0
    }
}

fn synth_audio(plan: &ClipPlan, seconds: f64, tempo_frac: f64) -> AudioClip {
    let rate = INTERNAL_RATE as usize;
    let n = (seconds * rate as f64) as usize;
    let mut samples = vec![0.0f64; n];
    let chord = ARCHETYPES[plan.archetype].2;
    let drone = plan.conducting_type == "choral";
    // the voicing latent trades energy between the bottom and top chord tones
    let tone_gain = [
        1.4 - 0.8 * plan.voicing,
        1.0,
        0.6 + 0.8 * plan.voicing,
    ];
    // a level between 0 and 1 is encoded as the amplitude of a steady sine;
    // the square root makes the band *power* — which is what the pooled
    // spectral features average — a linear function of the level
    let level_amp = |x: f64| 0.12 * (0.1 + 0.9 * x).sqrt();
    // each coded tone sits on a pitch class no chord uses (the chords cover
    // A, B, C, C#, D, E, F# and G), so its chroma bin stays clean; the tones
    // are kept above ~600 Hz because the 1024-point FFT resolves only about
    // 21.5 Hz per bin and lower tones would leak into neighbouring pitch
    // classes:
    //   G#5 = 830.61 Hz -> bass level     D#5 = 622.25 Hz -> voicing
    //   F7 = 2793.8 Hz  -> treble level   A#2 = 116.54 Hz -> choral drone
    // tempo, archetype and meter tones sit above the chroma fold range and
    // are read from the mel bands instead
    let bass_amp = level_amp(plan.bass);
    let voicing_amp = level_amp(plan.voicing);
    let treble_amp = level_amp(plan.treble);
    let tempo_amp = level_amp(tempo_frac);
    let arch_amp = 0.05 + 0.05 * plan.archetype as f64;
    let meter_amp = 0.08 * (plan.meter as f64 - 1.5);
    for (i, s) in samples.iter_mut().enumerate() {
        let t = i as f64 / rate as f64;
        let env = plan.envelope(t);
        for (&f, &gain) in chord.iter().zip(&tone_gain) {
            *s += 0.1 * gain * env * (std::f64::consts::TAU * f * t).sin();
        }
        if drone {
            *s += 0.1 * (std::f64::consts::TAU * 116.54 * t).sin();
        }
        *s += bass_amp * (std::f64::consts::TAU * 830.61 * t).sin();
        *s += voicing_amp * (std::f64::consts::TAU * 622.25 * t).sin();
        *s += treble_amp * (std::f64::consts::TAU * 2793.8 * t).sin();
        *s += tempo_amp * (std::f64::consts::TAU * 4700.0 * t).sin();
        *s += arch_amp * (std::f64::consts::TAU * 5400.0 * t).sin();
        *s += meter_amp * (std::f64::consts::TAU * 6200.0 * t).sin();
    }
    // click train with downbeat accents
    let beat_period = 60.0 / plan.bpm;
    let mut beat = 0usize;
    loop {
        let t0 = beat as f64 * beat_period;
        let start = (t0 * rate as f64) as usize;
        if start >= n {
            break;
        }
        let accent = if beat % plan.meter == 0 { 1.5 } else { 1.0 };
        let decay = rate / 200; // 5 ms
        for k in 0..decay.min(n - start) {
            let x = k as f64 / decay as f64;
            samples[start + k] +=
                0.5 * accent * (1.0 - x) * (std::f64::consts::TAU * 1500.0 * k as f64 / rate as f64).sin();
        }
        beat += 1;
    }
    for s in samples.iter_mut() {
        *s = s.clamp(-1.0, 1.0);
    }
    AudioClip::new(samples, INTERNAL_RATE).expect("synth audio is finite")
}

fn synth_gesture(plan: &ClipPlan, frames: usize, fps: usize, cfg: &SynthConfig) -> Tensor<f32> {
    let base_amp = ARCHETYPES[plan.archetype].1;
    let tempo_frac = (plan.bpm - cfg.min_bpm) / (cfg.max_bpm - cfg.min_bpm).max(1e-9);
    // a fixed baseline keeps the joint angles positive; tempo is carried by
    // the stance, the oscillation frequency, and the audio brightness, not
    // by the baseline, so it does not dominate the pooled pose statistics
    let offset = 0.55;
    let choral = plan.conducting_type == "choral";
    let mut out = Tensor::zeros(frames, POSE_DIM);
    for t in 0..frames {
        let time = t as f64 / fps as f64;
        let env = plan.envelope(time);
        let phase = plan.beat_phase(time);
        let bar = phase / plan.meter as f64;
        // impulse after each beat, mirroring the onset flux the clicks
        // produce on the music side
        let beat_pos = (phase / std::f64::consts::TAU).fract();
        let beat_kick = (-10.0 * beat_pos).exp();
        let mut frame = PoseFrame::rest();
        // faster pieces are conducted from a slightly more forward stance;
        // the mean translation makes tempo linearly readable from the pose
        frame.translation = [
            0.02 * (bar).sin() + 0.1 * tempo_frac,
            0.01 * (phase).sin() + if choral { 0.05 } else { 0.0 } + 0.08 * plan.treble,
            0.02 * (bar + 1.0).cos() + 0.08 * plan.bass,
        ];
        for j in 0..NUM_JOINTS {
            let jf = j as f64;
            // static per-joint posture code for archetype and meter; unlike
            // the oscillation phases it survives temporal averaging, which is
            // what makes these latents recoverable from pooled pose features
            let posture = 0.12 * (jf * 0.37 + 1.3 * plan.archetype as f64).sin()
                + 0.10 * (jf * 0.53 + 0.9 * plan.meter as f64).sin()
                + 0.15 * (plan.voicing - 0.5) * (jf * 0.71 + 0.3).sin()
                + 0.10 * (plan.bass - 0.5) * (jf * 0.91 + 1.1).sin()
                + 0.10 * (plan.treble - 0.5) * (jf * 1.37 + 0.4).sin()
                + if choral { 0.06 * (jf * 1.13).sin() } else { 0.0 };
            // conductors lean into louder passages: the shared loudness
            // envelope also shifts the mean posture, not just the swing size
            let baseline = (offset + posture + 0.15 * (env - 1.0)).max(0.03);
            // keep the swing well below the baseline: the mean posture is
            // the strongest cross-modal cue and a wide swing would bury it
            // in windowed averages
            let amp = (base_amp * joint_weight(j) * env).min(0.5 * baseline);
            // baseline keeps the rotation angle positive so the oscillation
            // period survives the angle-magnitude readout
            let angle = baseline
                + 0.15 * joint_weight(j) * beat_kick
                + amp * (phase + plan.joint_phase[j]).sin()
                + 0.005 * (std::f64::consts::TAU * plan.noise_freq[j] * time + plan.noise_phase[j]).sin()
                + 0.05 * amp * (bar).cos();
            let rot = axis_angle_to_rotmat(&plan.joint_axis[j], angle);
            frame.rotations[j] = rotmat_to_sixd(&rot).expect("constructed rotation");
        }
        let packed = pack_pose(&frame);
        for (c, &v) in packed.iter().enumerate() {
            out.set(t, c, v as f32);
        }
    }
    out
}

fn clip_rng(seed: u64, index: usize) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(
        seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(index as u64),
    )
}

/// One synthetic clip plus the raw audio it was extracted from.
pub fn synth_clip(seed: u64, index: usize, cfg: &SynthConfig) -> Result<(ClipPair, AudioClip)> {
    let mut rng = clip_rng(seed, index);
    let plan = ClipPlan::sample(&mut rng, cfg, seed, index);
    let tempo_frac = (plan.bpm - cfg.min_bpm) / (cfg.max_bpm - cfg.min_bpm).max(1e-9);
    let audio = synth_audio(&plan, cfg.seconds, tempo_frac);
    let descriptor = extract_descriptor(&audio)?;
    let frames = descriptor.frames.rows();
    let gesture = synth_gesture(&plan, frames, FPS, cfg);
    let meta = ClipMeta {
        emotion: Some(ARCHETYPES[plan.archetype].0.to_string()),
        conducting_type: Some(plan.conducting_type.to_string()),
        tempo_bpm: Some(plan.bpm),
        style: Some(format!(
            "meter:{},voicing:{:.4},bass:{:.4},treble:{:.4}",
            plan.meter, plan.voicing, plan.bass, plan.treble
        )),
        parent: None,
    };
    let clip = ClipPair::new(format!("clip{index:04}"), descriptor.frames, gesture, meta)?;
    Ok((clip, audio))
}

/// Beat-locked synthetic dataset: gesture amplitude, phase, and audio share
/// tempo, meter, and a per-clip amplitude envelope.
pub fn synth_dataset(n_clips: usize, seed: u64, cfg: &SynthConfig) -> Result<Vec<ClipPair>> {
    if n_clips == 0 {
        return Err(Error::InvalidArgument("n_clips must be at least 1".into()));
    }
    use rayon::prelude::*;
    (0..n_clips)
        .into_par_iter()
        .map(|i| synth_clip(seed, i, cfg).map(|(c, _)| c))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> SynthConfig {
        SynthConfig {
            seconds: 4.0,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn synth_deterministic_and_valid() {
        let a = synth_dataset(3, 7, &small_cfg()).unwrap();
        let b = synth_dataset(3, 7, &small_cfg()).unwrap();
        assert_eq!(a, b);
        for clip in &a {
            let report = validate_clip(clip, &QcThresholds::default()).unwrap();
            assert!(report.accept, "clip {} flags {:?}", clip.id, report.sequence_flags);
            assert_eq!(report.flagged_frames, 0);
        }
    }

    #[test]
    fn synth_gesture_period_matches_bpm() {
        let (clip, _) = synth_clip(11, 0, &SynthConfig::default()).unwrap();
        let bpm = clip.meta.tempo_bpm.unwrap();
        let expected = 30.0 * 60.0 / bpm; // frames per beat
        // wrist rotation angle over time
        let angles: Vec<f64> = (0..clip.frames())
            .map(|t| {
                let row = clip.gesture.row(t);
                let mut six = [0.0f64; 6];
                for (k, s) in six.iter_mut().enumerate() {
                    *s = row[3 + WRIST_JOINT * 6 + k] as f64;
                }
                let rot = sixd_to_rotmat_at(&six, t, WRIST_JOINT).unwrap();
                rotation_angle_between(&rot, &axis_angle_to_rotmat(&[1.0, 0.0, 0.0], 0.0))
            })
            .collect();
        let mean = angles.iter().sum::<f64>() / angles.len() as f64;
        let centered: Vec<f64> = angles.iter().map(|a| a - mean).collect();
        // autocorrelation peak near the beat period; skip the small lags
        // where any smooth signal correlates with itself
        let lag_lo = ((expected * 0.5) as usize).max(3);
        let mut best_lag = 0;
        let mut best = f64::MIN;
        for lag in lag_lo..(expected * 1.5) as usize {
            let ac: f64 = (0..centered.len() - lag)
                .map(|t| centered[t] * centered[t + lag])
                .sum();
            if ac > best {
                best = ac;
                best_lag = lag;
            }
        }
        assert!(
            (best_lag as f64 - expected).abs() <= 1.0,
            "period {best_lag} frames vs expected {expected:.2} (bpm {bpm:.1})"
        );
    }

    #[test]
    fn clip_roundtrip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let (clip, _) = synth_clip(3, 1, &small_cfg()).unwrap();
        save_clip(&dir.path().join(&clip.id), &clip).unwrap();
        let loaded = load_clip(&dir.path().join(&clip.id)).unwrap();
        assert_eq!(clip, loaded);
    }

    #[test]
    fn dataset_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let clips = synth_dataset(3, 5, &small_cfg()).unwrap();
        save_dataset(dir.path(), &clips).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(clips, loaded);
    }

    #[test]
    fn frozen_clip_rejected_with_reason() {
        let (mut clip, _) = synth_clip(9, 0, &SynthConfig::default()).unwrap();
        let first = clip.gesture.row(0).to_vec();
        for t in 0..clip.frames() {
            clip.gesture.row_mut(t).copy_from_slice(&first);
        }
        let report = validate_clip(&clip, &QcThresholds::default()).unwrap();
        assert!(!report.accept);
        assert!(report.sequence_flags.contains(&SequenceFlag::FrozenInterval));
    }

    #[test]
    fn sparse_nan_flags_frame_but_accepts_clip() {
        let (mut clip, _) = synth_clip(10, 0, &SynthConfig::default()).unwrap();
        let t = clip.frames() / 2;
        clip.gesture.set(t, 5, f32::NAN);
        let report = validate_clip(&clip, &QcThresholds::default()).unwrap();
        assert!(report
            .frame_flags
            .iter()
            .any(|&(ft, f)| ft == t && f == FrameFlag::NonFinite));
        // one flagged frame out of 300 is under the 5% ratio;
        // the NaN frame also breaks velocity adjacency, still far below 5%
        assert!(report.accept, "flags: {:?}", report.sequence_flags);
    }

    #[test]
    fn translation_jump_rejected() {
        let (mut clip, _) = synth_clip(12, 0, &SynthConfig::default()).unwrap();
        let t = clip.frames() / 2;
        clip.gesture.set(t, 0, clip.gesture.get(t, 0) + 2.0);
        let report = validate_clip(&clip, &QcThresholds::default()).unwrap();
        assert!(!report.accept);
        assert!(report.sequence_flags.contains(&SequenceFlag::GlobalShift));
    }

    #[test]
    fn qc_monotone_in_thresholds() {
        let (clip, _) = synth_clip(13, 0, &small_cfg()).unwrap();
        let tight = QcThresholds {
            translation_box: 0.005,
            max_joint_velocity: 0.5,
            frozen_eps: 1e-2,
            frozen_seconds: 0.2,
            max_shift: 0.001,
            max_failure_ratio: 0.0,
        };
        let loose = QcThresholds::default();
        let r_tight = validate_clip(&clip, &tight).unwrap();
        let r_loose = validate_clip(&clip, &loose).unwrap();
        // loosening every threshold never converts accept -> reject
        if r_tight.accept {
            assert!(r_loose.accept);
        }
        assert!(r_loose.flagged_frames <= r_tight.flagged_frames);
    }

    #[test]
    fn split_is_deterministic_disjoint_exhaustive() {
        let ids: Vec<String> = (0..10).map(|i| format!("c{i}")).collect();
        let (tr1, te1) = split_dataset(&ids, 0.7, 42).unwrap();
        let (tr2, te2) = split_dataset(&ids, 0.7, 42).unwrap();
        assert_eq!((tr1.clone(), te1.clone()), (tr2, te2));
        assert_eq!(tr1.len(), 7);
        assert_eq!(te1.len(), 3);
        let mut all: Vec<String> = tr1.iter().chain(&te1).cloned().collect();
        all.sort();
        let mut expect = ids.clone();
        expect.sort();
        assert_eq!(all, expect);
    }

    #[test]
    fn windowing_counts_and_exact_frames() {
        let (clip, _) = synth_clip(14, 0, &SynthConfig { seconds: 30.0, ..SynthConfig::default() })
            .unwrap();
        let windows = window_clips(&clip, 10.0, 10.0);
        assert_eq!(windows.len(), 3);
        for (w, win) in windows.iter().enumerate() {
            assert_eq!(win.frames(), 300);
            let off = w * 300;
            assert_eq!(win.meta.parent, Some((clip.id.clone(), off)));
            for t in 0..win.frames() {
                assert_eq!(win.gesture.row(t), clip.gesture.row(off + t));
                assert_eq!(win.music.row(t), clip.music.row(off + t));
            }
        }
        let exactly_one = window_clips(
            &synth_clip(15, 0, &SynthConfig::default()).unwrap().0,
            10.0,
            10.0,
        );
        assert_eq!(exactly_one.len(), 1);
        assert_eq!(exactly_one[0].frames(), 300);
        let nine_sec = synth_clip(16, 0, &SynthConfig { seconds: 9.0, ..SynthConfig::default() })
            .unwrap()
            .0;
        assert!(window_clips(&nine_sec, 10.0, 10.0).is_empty());
    }
}
