//! Acoustic frames at the 50 Hz encoder rate, the k-frame stacking
//! downsampler, synthetic toy utterances, and the external-feature file
//! format.
//!
//! The log-mel frontend is an explicit stand-in for a frozen pretrained
//! speech encoder: the toolkit's claims concern the connector mechanism and
//! the evaluation harness, not any particular encoder. Real encoder outputs
//! can be supplied per utterance through the feature-file ingestion path.

use crate::audio::Waveform;
use crate::error::{Error, Result};
use crate::rng::substream;
use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rustfft::{num_complex::Complex64, FftPlanner};

/// A matrix of `n_frames x d_enc` encoder features at `frame_rate` Hz.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence {
    pub frames: Array2<f64>,
    pub frame_rate: f64,
}

impl FrameSequence {
    pub fn n_frames(&self) -> usize {
        self.frames.nrows()
    }

    pub fn d_enc(&self) -> usize {
        self.frames.ncols()
    }

    pub fn duration_s(&self) -> f64 {
        self.n_frames() as f64 / self.frame_rate
    }
}

/// Stacked k-frame features at the speech-token rate.
#[derive(Debug, Clone, PartialEq)]
pub struct DownsampledFeatures {
    pub features: Array2<f64>,
    pub k: usize,
    pub token_rate: f64,
}

/// Log-mel frontend settings. Defaults give 25 ms windows with a 20 ms hop,
/// i.e. 50 frames per second at 16 kHz.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogMelConfig {
    pub sample_rate: u32,
    pub n_mels: usize,
    pub win_ms: f64,
    pub hop_ms: f64,
}

impl Default for LogMelConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16000,
            n_mels: 40,
            win_ms: 25.0,
            hop_ms: 20.0,
        }
    }
}

pub const LOG_ENERGY_FLOOR: f64 = 1e-10;

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular mel filterbank over FFT bins 0..=n_fft/2.
fn mel_filterbank(n_mels: usize, n_fft: usize, sample_rate: f64) -> Array2<f64> {
    let n_bins = n_fft / 2 + 1;
    let mel_lo = hz_to_mel(0.0);
    let mel_hi = hz_to_mel(sample_rate / 2.0);
    let points: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (n_mels + 1) as f64))
        .collect();
    let mut fb = Array2::zeros((n_mels, n_bins));
    for m in 0..n_mels {
        let (f_lo, f_c, f_hi) = (points[m], points[m + 1], points[m + 2]);
        for b in 0..n_bins {
            let f = b as f64 * sample_rate / n_fft as f64;
            let w = if f >= f_lo && f <= f_c && f_c > f_lo {
                (f - f_lo) / (f_c - f_lo)
            } else if f > f_c && f <= f_hi && f_hi > f_c {
                (f_hi - f) / (f_hi - f_c)
            } else {
                0.0
            };
            fb[[m, b]] = w;
        }
    }
    fb
}

/// Log-mel filterbank frames. Audio shorter than one analysis window yields
/// an empty sequence.
pub fn logmel_frontend(w: &Waveform, config: &LogMelConfig) -> Result<FrameSequence> {
    if !w.is_mono() {
        return Err(Error::Precondition("logmel_frontend requires mono input".into()));
    }
    if w.sample_rate != config.sample_rate {
        return Err(Error::Precondition(format!(
            "logmel_frontend expects {} Hz input, got {} Hz (resample first)",
            config.sample_rate, w.sample_rate
        )));
    }
    let win = (config.win_ms * config.sample_rate as f64 / 1000.0).round() as usize;
    let hop = (config.hop_ms * config.sample_rate as f64 / 1000.0).round() as usize;
    let frame_rate = config.sample_rate as f64 / hop as f64;
    let n = w.samples.len();
    if n < win {
        return Ok(FrameSequence {
            frames: Array2::zeros((0, config.n_mels)),
            frame_rate,
        });
    }
    let n_frames = n / hop;
    let n_fft = win.next_power_of_two();
    let window: Vec<f64> = (0..win)
        .map(|i| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * i as f64 / win as f64).cos()))
        .collect();
    let fb = mel_filterbank(config.n_mels, n_fft, config.sample_rate as f64);
    let fft = FftPlanner::new().plan_fft_forward(n_fft);

    let mut frames = Array2::zeros((n_frames, config.n_mels));
    let mut buf = vec![Complex64::new(0.0, 0.0); n_fft];
    for t in 0..n_frames {
        let start = t * hop;
        for (i, slot) in buf.iter_mut().enumerate() {
            let s = if i < win && start + i < n {
                w.samples[start + i] * window[i]
            } else {
                0.0
            };
            *slot = Complex64::new(s, 0.0);
        }
        fft.process(&mut buf);
        for m in 0..config.n_mels {
            let mut energy = 0.0;
            for b in 0..n_fft / 2 + 1 {
                let w_mb = fb[[m, b]];
                if w_mb != 0.0 {
                    energy += w_mb * buf[b].norm_sqr();
                }
            }
            frames[[t, m]] = energy.max(LOG_ENERGY_FLOOR).ln();
        }
    }
    Ok(FrameSequence { frames, frame_rate })
}

/// Concatenate every `k` consecutive frames in the feature dimension;
/// trailing remainder frames are dropped.
pub fn downsample_stack(f: &FrameSequence, k: usize) -> Result<DownsampledFeatures> {
    if k == 0 {
        return Err(Error::Precondition("stacking factor k must be >= 1".into()));
    }
    let n = f.n_frames() / k;
    let d = f.d_enc();
    let mut features = Array2::zeros((n, k * d));
    for i in 0..n {
        for j in 0..k {
            let src = f.frames.row(i * k + j);
            features
                .row_mut(i)
                .slice_mut(ndarray::s![j * d..(j + 1) * d])
                .assign(&src);
        }
    }
    Ok(DownsampledFeatures {
        features,
        k,
        token_rate: f.frame_rate / k as f64,
    })
}

/// Frames-per-token distribution for synthetic utterances: uniform over the
/// integer range [round(mean - spread), round(mean + spread)].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateDist {
    pub mean: f64,
    pub spread: f64,
}

impl RateDist {
    pub fn bounds(&self) -> Result<(usize, usize)> {
        if self.spread >= self.mean {
            return Err(Error::Precondition(format!(
                "frames-per-token spread {} must be below mean {}",
                self.spread, self.mean
            )));
        }
        if self.mean < 1.0 {
            return Err(Error::Precondition("frames-per-token mean must be >= 1".into()));
        }
        let lo = ((self.mean - self.spread).round() as usize).max(1);
        let hi = ((self.mean + self.spread).round() as usize).max(lo);
        Ok((lo, hi))
    }
}

/// A synthetic paired utterance: token-signature frames plus the reference
/// token sequence that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyUtterance {
    pub frames: FrameSequence,
    pub reference_tokens: Vec<u32>,
    pub frames_per_token: Vec<usize>,
    pub seed: u64,
}

/// Fixed per-corpus random map from LM embedding space to encoder-feature
/// space. Entries are N(0, 1/sqrt(d_llm)) so feature magnitudes stay O(1).
pub fn signature_matrix(d_enc: usize, d_llm: usize, seed: u64) -> Array2<f64> {
    let mut rng = substream(seed, "signature");
    let normal = Normal::new(0.0, 1.0 / (d_llm as f64).sqrt()).unwrap();
    Array2::from_shape_fn((d_enc, d_llm), |_| normal.sample(&mut rng))
}

/// Generate one toy utterance. Token `t` contributes `m_t` frames, each
/// `signature . embed(t) + noise`; fully deterministic for a fixed seed.
pub fn synth_utterance(
    embed: ArrayView2<f64>,
    content_tokens: &[u32],
    signature: &Array2<f64>,
    length: usize,
    rate: RateDist,
    noise_sigma: f64,
    seed: u64,
) -> Result<ToyUtterance> {
    if length == 0 {
        return Err(Error::Precondition("utterance length must be >= 1".into()));
    }
    if content_tokens.is_empty() {
        return Err(Error::Precondition("content token subset is empty".into()));
    }
    let (lo, hi) = rate.bounds()?;
    let d_enc = signature.nrows();
    if signature.ncols() != embed.ncols() {
        return Err(Error::ShapeMismatch(format!(
            "signature is {}x{} but embeddings have width {}",
            d_enc,
            signature.ncols(),
            embed.ncols()
        )));
    }

    let mut token_rng = substream(seed, "tokens");
    let reference_tokens: Vec<u32> = (0..length)
        .map(|_| content_tokens[token_rng.gen_range(0..content_tokens.len())])
        .collect();

    let mut rate_rng = substream(seed, "rates");
    let frames_per_token: Vec<usize> = (0..length)
        .map(|_| rate_rng.gen_range(lo..=hi))
        .collect();

    let n_frames: usize = frames_per_token.iter().sum();
    let mut frames = Array2::zeros((n_frames, d_enc));
    let mut noise_rng = substream(seed, "frame-noise");
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut row = 0;
    for (&t, &m) in reference_tokens.iter().zip(&frames_per_token) {
        let base = signature.dot(&embed.row(t as usize));
        for _ in 0..m {
            for (j, v) in base.iter().enumerate() {
                let eps = if noise_sigma > 0.0 {
                    noise_sigma * normal.sample(&mut noise_rng)
                } else {
                    0.0
                };
                frames[[row, j]] = v + eps;
            }
            row += 1;
        }
    }

    Ok(ToyUtterance {
        frames: FrameSequence {
            frames,
            frame_rate: 50.0,
        },
        reference_tokens,
        frames_per_token,
        seed,
    })
}

pub const FEATURE_FILE_MAGIC: &[u8; 4] = b"FTR1";

/// Serialize frames to the flat binary feature format: magic, n_frames,
/// d_enc, frame_rate (all little-endian 32-bit), then row-major f32 data.
pub fn write_features(f: &FrameSequence) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + f.frames.len() * 4);
    out.extend_from_slice(FEATURE_FILE_MAGIC);
    out.extend_from_slice(&(f.n_frames() as u32).to_le_bytes());
    out.extend_from_slice(&(f.d_enc() as u32).to_le_bytes());
    out.extend_from_slice(&(f.frame_rate as f32).to_le_bytes());
    for v in f.frames.iter() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

/// Parse the flat binary feature format.
pub fn read_features(bytes: &[u8]) -> Result<FrameSequence> {
    if bytes.len() < 16 {
        return Err(Error::Format("feature file shorter than header".into()));
    }
    if &bytes[0..4] != FEATURE_FILE_MAGIC {
        return Err(Error::Format("bad feature-file magic".into()));
    }
    let n_frames = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let d_enc = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let frame_rate = f32::from_le_bytes(bytes[12..16].try_into().unwrap()) as f64;
    let need = 16 + n_frames * d_enc * 4;
    if bytes.len() < need {
        return Err(Error::Format(format!(
            "feature file truncated: header promises {need} bytes, got {}",
            bytes.len()
        )));
    }
    if !(frame_rate > 0.0) {
        return Err(Error::Format("feature file declares non-positive frame rate".into()));
    }
    let mut frames = Array2::zeros((n_frames, d_enc));
    for i in 0..n_frames * d_enc {
        let at = 16 + i * 4;
        frames[[i / d_enc.max(1), i % d_enc.max(1)]] =
            f32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as f64;
    }
    Ok(FrameSequence { frames, frame_rate })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::sine_tone;
    use ndarray::Array2;

    #[test]
    fn one_second_gives_fifty_frames() {
        let w = sine_tone(440.0, 16000, 16000, 0.5);
        let f = logmel_frontend(&w, &LogMelConfig::default()).unwrap();
        assert_eq!(f.n_frames(), 50);
        assert_eq!(f.d_enc(), 40);
        assert_eq!(f.frame_rate, 50.0);
    }

    #[test]
    fn silence_hits_the_log_floor() {
        let w = Waveform::new(vec![0.0; 16000], 16000, 1).unwrap();
        let f = logmel_frontend(&w, &LogMelConfig::default()).unwrap();
        let want = LOG_ENERGY_FLOOR.ln();
        for v in f.frames.iter() {
            assert!((v - want).abs() < 1e-6, "{v} vs {want}");
        }
    }

    #[test]
    fn short_audio_yields_empty_sequence() {
        let w = Waveform::new(vec![0.1; 200], 16000, 1).unwrap();
        let f = logmel_frontend(&w, &LogMelConfig::default()).unwrap();
        assert_eq!(f.n_frames(), 0);
    }

    #[test]
    fn tone_peaks_in_constant_mel_band() {
        let w = sine_tone(1000.0, 16000, 16000, 0.5);
        let f = logmel_frontend(&w, &LogMelConfig::default()).unwrap();
        let argmax = |row: ndarray::ArrayView1<f64>| {
            row.iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0
        };
        let first = argmax(f.frames.row(0));
        for t in 0..f.n_frames() {
            assert_eq!(argmax(f.frames.row(t)), first, "frame {t}");
        }
    }

    #[test]
    fn frontend_is_pure() {
        let w = sine_tone(440.0, 16000, 8000, 0.5);
        let a = logmel_frontend(&w, &LogMelConfig::default()).unwrap();
        let b = logmel_frontend(&w, &LogMelConfig::default()).unwrap();
        assert_eq!(a, b);
    }

    fn arange_frames(n: usize, d: usize) -> FrameSequence {
        FrameSequence {
            frames: Array2::from_shape_fn((n, d), |(i, j)| (i * d + j) as f64),
            frame_rate: 50.0,
        }
    }

    #[test]
    fn stack_fifty_frames_k5() {
        let f = arange_frames(50, 4);
        let z = downsample_stack(&f, 5).unwrap();
        assert_eq!(z.features.nrows(), 10);
        assert_eq!(z.features.ncols(), 20);
        assert_eq!(z.token_rate, 10.0);
    }

    #[test]
    fn stack_drops_remainder() {
        let f = arange_frames(52, 4);
        let z = downsample_stack(&f, 5).unwrap();
        assert_eq!(z.features.nrows(), 10);
    }

    #[test]
    fn stack_k1_is_identity() {
        let f = arange_frames(7, 3);
        let z = downsample_stack(&f, 1).unwrap();
        assert_eq!(z.features, f.frames);
    }

    #[test]
    fn stack_rows_recover_source_frames() {
        let f = arange_frames(12, 3);
        let k = 4;
        let z = downsample_stack(&f, k).unwrap();
        for i in 0..z.features.nrows() {
            for j in 0..k {
                let piece = z.features.row(i);
                let piece = piece.slice(ndarray::s![j * 3..(j + 1) * 3]);
                assert_eq!(piece, f.frames.row(i * k + j));
            }
            assert!(z.features.nrows() * k <= f.n_frames());
        }
    }

    fn toy_embed(v: usize, d: usize) -> Array2<f64> {
        Array2::from_shape_fn((v, d), |(i, j)| ((i * 31 + j * 7) % 13) as f64 / 13.0 - 0.5)
    }

    #[test]
    fn synth_zero_spread_is_exact() {
        let embed = toy_embed(8, 6);
        let sig = signature_matrix(4, 6, 1);
        let u = synth_utterance(
            embed.view(),
            &[2, 3, 4, 5],
            &sig,
            3,
            RateDist { mean: 5.0, spread: 0.0 },
            0.1,
            9,
        )
        .unwrap();
        assert_eq!(u.frames.n_frames(), 15);
        assert_eq!(u.frames_per_token, vec![5, 5, 5]);
        assert_eq!(u.reference_tokens.len(), 3);
    }

    #[test]
    fn synth_zero_noise_repeats_signature() {
        let embed = toy_embed(8, 6);
        let sig = signature_matrix(4, 6, 1);
        let u = synth_utterance(
            embed.view(),
            &[2],
            &sig,
            1,
            RateDist { mean: 3.0, spread: 0.0 },
            0.0,
            9,
        )
        .unwrap();
        for r in 1..u.frames.n_frames() {
            assert_eq!(u.frames.frames.row(r), u.frames.frames.row(0));
        }
    }

    #[test]
    fn synth_same_seed_is_bit_identical() {
        let embed = toy_embed(8, 6);
        let sig = signature_matrix(4, 6, 1);
        let mk = || {
            synth_utterance(
                embed.view(),
                &[2, 3, 4],
                &sig,
                5,
                RateDist { mean: 5.0, spread: 1.0 },
                0.1,
                1234,
            )
            .unwrap()
        };
        assert_eq!(mk(), mk());
    }

    #[test]
    fn synth_doubled_mean_doubles_frames_within_spread() {
        let embed = toy_embed(8, 6);
        let sig = signature_matrix(4, 6, 1);
        let len = 20;
        let base = synth_utterance(
            embed.view(), &[2, 3], &sig, len,
            RateDist { mean: 5.0, spread: 1.0 }, 0.0, 7,
        )
        .unwrap();
        let doubled = synth_utterance(
            embed.view(), &[2, 3], &sig, len,
            RateDist { mean: 10.0, spread: 1.0 }, 0.0, 7,
        )
        .unwrap();
        let lo = len * 9;
        let hi = len * 11;
        assert!(doubled.frames.n_frames() >= lo && doubled.frames.n_frames() <= hi);
        assert!(doubled.frames.n_frames() >= base.frames.n_frames());
    }

    #[test]
    fn synth_rejects_spread_at_or_above_mean() {
        let embed = toy_embed(8, 6);
        let sig = signature_matrix(4, 6, 1);
        assert!(synth_utterance(
            embed.view(),
            &[2],
            &sig,
            3,
            RateDist { mean: 2.0, spread: 2.0 },
            0.0,
            1,
        )
        .is_err());
    }

    #[test]
    fn feature_file_roundtrip() {
        let f = arange_frames(9, 5);
        let bytes = write_features(&f);
        let back = read_features(&bytes).unwrap();
        assert_eq!(back.n_frames(), 9);
        assert_eq!(back.d_enc(), 5);
        assert_eq!(back.frame_rate, 50.0);
        // values survive the f32 round trip exactly for small integers
        assert_eq!(back.frames, f.frames);
    }

    #[test]
    fn feature_file_rejects_garbage() {
        assert!(read_features(b"nope").is_err());
        let f = arange_frames(4, 2);
        let mut bytes = write_features(&f);
        bytes.truncate(20);
        assert!(read_features(&bytes).is_err());
    }
}
