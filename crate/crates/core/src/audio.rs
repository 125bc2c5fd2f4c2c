//! Audio descriptor extraction: 438 values per frame at 30 fps.
//!
//! Layout: mfcc 20 | mfcc deltas 20 | chroma 12 | tempogram 384 | onset 1 |
//! rms 1. Frames are centered at sample round(t * sr / 30); the STFT uses a
//! 1024-point Hann window so audio frames stay aligned with pose frames.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rustfft::{num_complex::Complex, FftPlanner};
use std::io::{Read, Write};
use std::path::Path;

pub const FPS: usize = 30;
pub const INTERNAL_RATE: u32 = 22050;
pub const FFT_SIZE: usize = 1024;
pub const N_MELS: usize = 40;
pub const N_MFCC: usize = 20;
pub const N_CHROMA: usize = 12;
pub const TEMPOGRAM_LAGS: usize = 384;
pub const MUSIC_DIM: usize = 438;

pub const DESCRIPTOR_BLOCKS: [(&str, usize); 6] = [
    ("mfcc", N_MFCC),
    ("mfcc_delta", N_MFCC),
    ("chroma", N_CHROMA),
    ("tempogram", TEMPOGRAM_LAGS),
    ("onset", 1),
    ("rms", 1),
];

const _: () = {
    let mut sum = 0;
    let mut i = 0;
    while i < DESCRIPTOR_BLOCKS.len() {
        sum += DESCRIPTOR_BLOCKS[i].1;
        i += 1;
    }
    assert!(sum == MUSIC_DIM);
};

const LOG_EPS: f64 = 1e-10;

#[derive(Clone, Debug)]
pub struct AudioClip {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidArgument("empty audio".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::NonFinite {
                index: i,
                context: "audio samples".into(),
            });
        }
        Ok(AudioClip { samples, sample_rate })
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Linear resampling to the internal rate.
    pub fn resampled(&self, target_rate: u32) -> AudioClip {
        if self.sample_rate == target_rate {
            return self.clone();
        }
        let ratio = self.sample_rate as f64 / target_rate as f64;
        let out_len = ((self.samples.len() as f64) / ratio).floor() as usize;
        let mut out = Vec::with_capacity(out_len.max(1));
        for i in 0..out_len.max(1) {
            let pos = i as f64 * ratio;
            let lo = pos.floor() as usize;
            let frac = pos - lo as f64;
            let a = self.samples[lo.min(self.samples.len() - 1)];
            let b = self.samples[(lo + 1).min(self.samples.len() - 1)];
            out.push(a * (1.0 - frac) + b * frac);
        }
        AudioClip {
            samples: out,
            sample_rate: target_rate,
        }
    }
}

/// Per-frame descriptor matrix plus its named block layout.
#[derive(Clone, Debug)]
pub struct MusicDescriptor {
    pub frames: Tensor<f32>,
    pub fps: usize,
}

impl MusicDescriptor {
    pub fn block_range(name: &str) -> Option<std::ops::Range<usize>> {
        let mut start = 0;
        for (n, len) in DESCRIPTOR_BLOCKS {
            if n == name {
                return Some(start..start + len);
            }
            start += len;
        }
        None
    }
}

struct Stft {
    /// magnitude spectra, one row per frame, FFT_SIZE/2+1 bins
    mags: Vec<Vec<f64>>,
    rms: Vec<f64>,
}

fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

fn stft_frames(clip: &AudioClip, n_frames: usize) -> Stft {
    let window = hann(FFT_SIZE);
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(FFT_SIZE);
    let sr = clip.sample_rate as f64;
    let mut mags = Vec::with_capacity(n_frames);
    let mut rms = Vec::with_capacity(n_frames);
    let half = FFT_SIZE as isize / 2;
    for t in 0..n_frames {
        let center = (t as f64 * sr / FPS as f64).round() as isize;
        let mut buf: Vec<Complex<f64>> = Vec::with_capacity(FFT_SIZE);
        let mut energy = 0.0;
        let mut count = 0usize;
        for i in 0..FFT_SIZE as isize {
            let idx = center - half + i;
            let s = if idx >= 0 && (idx as usize) < clip.samples.len() {
                clip.samples[idx as usize]
            } else {
                0.0
            };
            energy += s * s;
            count += 1;
            buf.push(Complex::new(s * window[i as usize], 0.0));
        }
        fft.process(&mut buf);
        mags.push(buf[..FFT_SIZE / 2 + 1].iter().map(|c| c.norm()).collect());
        rms.push((energy / count as f64).sqrt());
    }
    Stft { mags, rms }
}

fn mel_scale(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_inv(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular mel filterbank over the magnitude spectrum bins.
fn mel_filterbank(sr: f64) -> Vec<Vec<(usize, f64)>> {
    let n_bins = FFT_SIZE / 2 + 1;
    let fmax = sr / 2.0;
    let m_lo = mel_scale(0.0);
    let m_hi = mel_scale(fmax);
    let centers: Vec<f64> = (0..N_MELS + 2)
        .map(|i| mel_inv(m_lo + (m_hi - m_lo) * i as f64 / (N_MELS + 1) as f64))
        .collect();
    let bin_freq = |k: usize| k as f64 * sr / FFT_SIZE as f64;
    let mut banks = Vec::with_capacity(N_MELS);
    for m in 0..N_MELS {
        let (lo, mid, hi) = (centers[m], centers[m + 1], centers[m + 2]);
        let mut taps = Vec::new();
        for k in 0..n_bins {
            let f = bin_freq(k);
            let w = if f >= lo && f <= mid && mid > lo {
                (f - lo) / (mid - lo)
            } else if f > mid && f <= hi && hi > mid {
                (hi - f) / (hi - mid)
            } else {
                0.0
            };
            if w > 0.0 {
                taps.push((k, w));
            }
        }
        banks.push(taps);
    }
    banks
}

fn log_mel_rows(stft: &Stft, banks: &[Vec<(usize, f64)>]) -> Vec<Vec<f64>> {
    stft.mags
        .iter()
        .map(|mag| {
            banks
                .iter()
                .map(|taps| {
                    let e: f64 = taps.iter().map(|&(k, w)| mag[k] * w).sum();
                    (e + LOG_EPS).ln()
                })
                .collect()
        })
        .collect()
}

/// Orthonormal DCT-II, first `N_MFCC` coefficients.
fn dct_mfcc(logmel: &[f64]) -> Vec<f64> {
    let n = logmel.len() as f64;
    (0..N_MFCC)
        .map(|k| {
            let scale = if k == 0 {
                (1.0 / n).sqrt()
            } else {
                (2.0 / n).sqrt()
            };
            scale
                * logmel
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| {
                        v * (std::f64::consts::PI * k as f64 * (i as f64 + 0.5) / n).cos()
                    })
                    .sum::<f64>()
        })
        .collect()
}

/// Centered 9-frame regression deltas, edges replicated.
fn deltas(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let half = 4i64;
    let denom: f64 = 2.0 * (1..=half).map(|n| (n * n) as f64).sum::<f64>();
    let t_max = rows.len() as i64;
    (0..t_max)
        .map(|t| {
            (0..rows[0].len())
                .map(|c| {
                    let mut acc = 0.0;
                    for n in 1..=half {
                        let fwd = rows[(t + n).clamp(0, t_max - 1) as usize][c];
                        let bwd = rows[(t - n).clamp(0, t_max - 1) as usize][c];
                        acc += n as f64 * (fwd - bwd);
                    }
                    acc / denom
                })
                .collect()
        })
        .collect()
}

/// Fold magnitude spectrum into 12 pitch classes (A = class 9).
fn chroma_row(mag: &[f64], sr: f64) -> [f64; N_CHROMA] {
    let mut out = [0.0; N_CHROMA];
    for (k, &m) in mag.iter().enumerate().skip(1) {
        let f = k as f64 * sr / FFT_SIZE as f64;
        if f < 27.5 || f > 4200.0 {
            continue;
        }
        let midi = 69.0 + 12.0 * (f / 440.0).log2();
        let pc = (midi.round() as i64).rem_euclid(12) as usize;
        out[pc] += m;
    }
    out
}

/// Half-wave-rectified spectral flux of the log-mel spectrogram.
pub fn onset_envelope(clip: &AudioClip) -> Result<Vec<f64>> {
    let clip = prepare(clip)?;
    let n_frames = frame_count(&clip);
    let stft = stft_frames(&clip, n_frames);
    let banks = mel_filterbank(clip.sample_rate as f64);
    let logmel = log_mel_rows(&stft, &banks);
    Ok(onset_from_logmel(&logmel))
}

fn onset_from_logmel(logmel: &[Vec<f64>]) -> Vec<f64> {
    let mut env = vec![0.0; logmel.len()];
    for t in 1..logmel.len() {
        env[t] = logmel[t]
            .iter()
            .zip(&logmel[t - 1])
            .map(|(a, b)| (a - b).max(0.0))
            .sum();
    }
    env
}

/// Windowed autocorrelation of the onset envelope at lags 0..TEMPOGRAM_LAGS-1,
/// window centered on the frame and zero-padded at the edges. Lag 0 is
/// normalized to 1 whenever the window has energy.
pub fn tempogram(onset: &[f64]) -> Tensor<f64> {
    let t_len = onset.len();
    let win = TEMPOGRAM_LAGS;
    let mut out = Tensor::zeros(t_len, TEMPOGRAM_LAGS);
    let mut window = vec![0.0; win];
    for t in 0..t_len {
        let start = t as isize - (win as isize / 2);
        for (i, w) in window.iter_mut().enumerate() {
            let idx = start + i as isize;
            *w = if idx >= 0 && (idx as usize) < t_len {
                onset[idx as usize]
            } else {
                0.0
            };
        }
        let e0: f64 = window.iter().map(|v| v * v).sum();
        if e0 <= 0.0 {
            continue;
        }
        for lag in 0..TEMPOGRAM_LAGS {
            let mut ac = 0.0;
            for i in 0..win - lag {
                ac += window[i] * window[i + lag];
            }
            out.set(t, lag, ac / e0);
        }
    }
    out
}

fn prepare(clip: &AudioClip) -> Result<AudioClip> {
    if clip.samples.is_empty() {
        return Err(Error::InvalidArgument("empty audio".into()));
    }
    if let Some(i) = clip.samples.iter().position(|s| !s.is_finite()) {
        return Err(Error::NonFinite {
            index: i,
            context: "audio samples".into(),
        });
    }
    Ok(clip.resampled(INTERNAL_RATE))
}

fn frame_count(clip: &AudioClip) -> usize {
    clip.samples.len() * FPS / clip.sample_rate as usize
}

/// Full 438-d per-frame descriptor at 30 fps.
pub fn extract_descriptor(clip: &AudioClip) -> Result<MusicDescriptor> {
    let clip = prepare(clip)?;
    let n_frames = frame_count(&clip);
    if n_frames == 0 {
        return Err(Error::InvalidArgument(
            "clip shorter than one frame at 30 fps".into(),
        ));
    }
    let sr = clip.sample_rate as f64;
    let stft = stft_frames(&clip, n_frames);
    let banks = mel_filterbank(sr);
    let logmel = log_mel_rows(&stft, &banks);
    let mfcc: Vec<Vec<f64>> = logmel.iter().map(|r| dct_mfcc(r)).collect();
    let dmfcc = deltas(&mfcc);
    let onset = onset_from_logmel(&logmel);
    let tgram = tempogram(&onset);

    let mut frames = Tensor::<f32>::zeros(n_frames, MUSIC_DIM);
    for t in 0..n_frames {
        let row = frames.row_mut(t);
        let mut pos = 0;
        for &v in &mfcc[t] {
            row[pos] = v as f32;
            pos += 1;
        }
        for &v in &dmfcc[t] {
            row[pos] = v as f32;
            pos += 1;
        }
        for v in chroma_row(&stft.mags[t], sr) {
            row[pos] = v as f32;
            pos += 1;
        }
        for lag in 0..TEMPOGRAM_LAGS {
            row[pos] = tgram.get(t, lag) as f32;
            pos += 1;
        }
        row[pos] = onset[t] as f32;
        row[pos + 1] = stft.rms[t] as f32;
    }
    frames.check_finite("descriptor")?;
    Ok(MusicDescriptor { frames, fps: FPS })
}

// ---------------------------------------------------------------------------
// WAV I/O: PCM 16-bit and float32, mono or downmixed stereo.

pub fn read_wav(path: &Path) -> Result<AudioClip> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    parse_wav(&bytes)
}

fn parse_wav(bytes: &[u8]) -> Result<AudioClip> {
    let bad = |msg: &str| Error::MalformedContainer(format!("wav: {msg}"));
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(bad("missing RIFF/WAVE header"));
    }
    let mut pos = 12;
    let mut fmt: Option<(u16, u16, u32, u16)> = None;
    let mut data: Option<&[u8]> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap()) as usize;
        let body_end = (pos + 8 + size).min(bytes.len());
        let body = &bytes[pos + 8..body_end];
        match id {
            b"fmt " => {
                if body.len() < 16 {
                    return Err(bad("short fmt chunk"));
                }
                fmt = Some((
                    u16::from_le_bytes(body[0..2].try_into().unwrap()),
                    u16::from_le_bytes(body[2..4].try_into().unwrap()),
                    u32::from_le_bytes(body[4..8].try_into().unwrap()),
                    u16::from_le_bytes(body[14..16].try_into().unwrap()),
                ));
            }
            b"data" => data = Some(body),
            _ => {}
        }
        pos += 8 + size + (size % 2);
    }
    let (format, channels, rate, bits) = fmt.ok_or_else(|| bad("missing fmt chunk"))?;
    let data = data.ok_or_else(|| bad("missing data chunk"))?;
    if channels == 0 {
        return Err(bad("zero channels"));
    }
    let nch = channels as usize;
    let interleaved: Vec<f64> = match (format, bits) {
        (1, 16) => data
            .chunks_exact(2)
            .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64 / 32768.0)
            .collect(),
        (3, 32) => data
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect(),
        _ => return Err(bad(&format!("unsupported format {format}/{bits}-bit"))),
    };
    let mono: Vec<f64> = interleaved
        .chunks_exact(nch)
        .map(|frame| frame.iter().sum::<f64>() / nch as f64)
        .collect();
    AudioClip::new(mono, rate)
}

pub fn write_wav_mono16(path: &Path, samples: &[f64], rate: u32) -> Result<()> {
    let data_len = samples.len() * 2;
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&((36 + data_len) as u32).to_le_bytes());
    out.extend_from_slice(b"WAVEfmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // PCM
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&rate.to_le_bytes());
    out.extend_from_slice(&(rate * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    for &s in samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        out.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::File::create(path)?.write_all(&out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(freq: f64, seconds: f64, rate: u32) -> AudioClip {
        let n = (seconds * rate as f64) as usize;
        let samples = (0..n)
            .map(|i| 0.5 * (2.0 * std::f64::consts::PI * freq * i as f64 / rate as f64).sin())
            .collect();
        AudioClip::new(samples, rate).unwrap()
    }

    #[test]
    fn ten_second_clip_gives_300x438() {
        let clip = sine(220.0, 10.0, INTERNAL_RATE);
        let d = extract_descriptor(&clip).unwrap();
        assert_eq!(d.frames.shape(), (300, MUSIC_DIM));
    }

    #[test]
    fn silence_has_zero_onset_rms_and_constant_mfcc() {
        let clip = AudioClip::new(vec![0.0; INTERNAL_RATE as usize * 2], INTERNAL_RATE).unwrap();
        let d = extract_descriptor(&clip).unwrap();
        let onset = MusicDescriptor::block_range("onset").unwrap();
        let rms = MusicDescriptor::block_range("rms").unwrap();
        let mfcc = MusicDescriptor::block_range("mfcc").unwrap();
        let first_mfcc: Vec<f32> = d.frames.row(0)[mfcc.clone()].to_vec();
        for t in 0..d.frames.rows() {
            assert_eq!(d.frames.row(t)[onset.start], 0.0);
            assert_eq!(d.frames.row(t)[rms.start], 0.0);
            for (a, b) in d.frames.row(t)[mfcc.clone()].iter().zip(&first_mfcc) {
                assert!((a - b).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn a440_sine_peaks_at_pitch_class_9() {
        let clip = sine(440.0, 3.0, INTERNAL_RATE);
        let d = extract_descriptor(&clip).unwrap();
        let range = MusicDescriptor::block_range("chroma").unwrap();
        let mut avg = [0.0f64; N_CHROMA];
        for t in 0..d.frames.rows() {
            for (i, &v) in d.frames.row(t)[range.clone()].iter().enumerate() {
                avg[i] += v as f64;
            }
        }
        let argmax = avg
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert_eq!(argmax, 9);
    }

    #[test]
    fn click_peaks_onset_within_one_frame() {
        let rate = INTERNAL_RATE as usize;
        let mut samples = vec![0.0; rate * 2];
        // click at t = 1.0 s -> frame 30
        for (i, s) in samples.iter_mut().skip(rate).take(64).enumerate() {
            *s = 0.9 * (1.0 - i as f64 / 64.0);
        }
        let clip = AudioClip::new(samples, INTERNAL_RATE).unwrap();
        let env = onset_envelope(&clip).unwrap();
        let argmax = env
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0 as i64;
        assert!((argmax - 30).abs() <= 1, "onset peak at frame {argmax}");
    }

    #[test]
    fn steady_sine_has_near_zero_onset_after_attack() {
        let clip = sine(330.0, 2.0, INTERNAL_RATE);
        let env = onset_envelope(&clip).unwrap();
        let peak = env.iter().cloned().fold(0.0, f64::max);
        for (t, &v) in env.iter().enumerate().skip(3) {
            assert!(
                v < 0.05 * peak + 1e-9,
                "flux {v} at steady frame {t} (peak {peak})"
            );
        }
    }

    #[test]
    fn tempogram_zero_onset_is_zero_and_lag0_normalized() {
        let zeros = tempogram(&vec![0.0; 50]);
        assert!(zeros.data().iter().all(|&v| v == 0.0));
        let mut onset = vec![0.0; 100];
        for v in onset.iter_mut() {
            *v = 0.1;
        }
        let t = tempogram(&onset);
        for r in 0..t.rows() {
            assert!((t.get(r, 0) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn tempogram_periodic_train_peaks_at_period() {
        let period = 15usize;
        let mut onset = vec![0.0; 400];
        for i in (0..400).step_by(period) {
            onset[i] = 1.0;
        }
        let t = tempogram(&onset);
        let row = t.row(200);
        // local max at the period lag
        assert!(row[period] > row[period - 2] && row[period] > row[period + 2]);
        assert!(row[period] > 0.5);
    }

    #[test]
    fn descriptor_deterministic() {
        let clip = sine(261.6, 1.5, INTERNAL_RATE);
        let a = extract_descriptor(&clip).unwrap();
        let b = extract_descriptor(&clip).unwrap();
        assert_eq!(a.frames, b.frames);
    }

    #[test]
    fn time_shift_by_whole_frames_shifts_onset() {
        let rate = INTERNAL_RATE as usize;
        let hop = rate / FPS;
        let mut base = vec![0.0; rate * 2];
        for (i, s) in base.iter_mut().skip(rate / 2).take(64).enumerate() {
            *s = 0.9 * (1.0 - i as f64 / 64.0);
        }
        let shift_frames = 6;
        let mut shifted = vec![0.0; shift_frames * hop];
        shifted.extend_from_slice(&base[..base.len() - shift_frames * hop]);
        let e1 = onset_envelope(&AudioClip::new(base, INTERNAL_RATE).unwrap()).unwrap();
        let e2 = onset_envelope(&AudioClip::new(shifted, INTERNAL_RATE).unwrap()).unwrap();
        for t in 10..e1.len() - shift_frames - 10 {
            assert!(
                (e1[t] - e2[t + shift_frames]).abs() < 1e-4,
                "frame {t}: {} vs {}",
                e1[t],
                e2[t + shift_frames]
            );
        }
    }

    #[test]
    fn wav_roundtrip_pcm16() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.wav");
        let samples: Vec<f64> = (0..1000).map(|i| (i as f64 * 0.01).sin() * 0.4).collect();
        write_wav_mono16(&path, &samples, INTERNAL_RATE).unwrap();
        let clip = read_wav(&path).unwrap();
        assert_eq!(clip.sample_rate, INTERNAL_RATE);
        assert_eq!(clip.samples.len(), 1000);
        for (a, b) in clip.samples.iter().zip(&samples) {
            assert!((a - b).abs() < 1e-3);
        }
    }

    #[test]
    fn empty_and_nonfinite_audio_rejected() {
        assert!(AudioClip::new(vec![], 22050).is_err());
        assert!(AudioClip::new(vec![0.0, f64::NAN], 22050).is_err());
    }
}
