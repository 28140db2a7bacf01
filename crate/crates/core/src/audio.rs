//! Audio sample container, RIFF/WAVE codec, resampling and signal power.
//!
//! Samples are kept as `f64` in nominal unit range [-1, 1]. PCM16 scaling
//! follows the asymmetric convention: divide by 32768 on read, scale by
//! 32768 with saturation at +32767 on write, which makes the PCM16
//! round-trip bit-exact for in-range quantized samples.

use crate::error::{Error, Result};
use rustfft::{num_complex::Complex64, FftPlanner};

/// Time-domain audio. Interleaved when `channels > 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
    pub channels: u16,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32, channels: u16) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Precondition("sample_rate must be > 0".into()));
        }
        if channels == 0 {
            return Err(Error::Precondition("channel_count must be > 0".into()));
        }
        if samples.len() % channels as usize != 0 {
            return Err(Error::Precondition(format!(
                "sample count {} is not a multiple of channel count {}",
                samples.len(),
                channels
            )));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::Precondition(format!(
                "non-finite sample at index {i}"
            )));
        }
        Ok(Self {
            samples,
            sample_rate,
            channels,
        })
    }

    /// Mono waveform without validation scans; used internally where
    /// finiteness holds by construction.
    pub(crate) fn mono_unchecked(samples: Vec<f64>, sample_rate: u32) -> Self {
        Self {
            samples,
            sample_rate,
            channels: 1,
        }
    }

    pub fn is_mono(&self) -> bool {
        self.channels == 1
    }

    /// Number of frames (samples per channel).
    pub fn frame_count(&self) -> usize {
        self.samples.len() / self.channels as usize
    }

    pub fn duration_s(&self) -> f64 {
        self.frame_count() as f64 / self.sample_rate as f64
    }
}

/// Average all channels into one.
pub fn downmix(w: &Waveform) -> Waveform {
    if w.is_mono() {
        return w.clone();
    }
    let ch = w.channels as usize;
    let samples = w
        .samples
        .chunks_exact(ch)
        .map(|frame| frame.iter().sum::<f64>() / ch as f64)
        .collect();
    Waveform::mono_unchecked(samples, w.sample_rate)
}

/// Mean of squared samples.
pub fn mean_power(w: &Waveform) -> Result<f64> {
    if w.samples.is_empty() {
        return Err(Error::Precondition("mean_power of empty waveform".into()));
    }
    Ok(w.samples.iter().map(|s| s * s).sum::<f64>() / w.samples.len() as f64)
}

/// Sample encodings supported by the WAV codec.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WavEncoding {
    Pcm16,
    Float32,
}

const FORMAT_PCM: u16 = 1;
const FORMAT_IEEE_FLOAT: u16 = 3;

fn read_u16(bytes: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([bytes[at], bytes[at + 1]])
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]])
}

/// Parse a RIFF/WAVE byte sequence. Only `fmt ` and `data` chunks are
/// interpreted; unknown chunks are skipped (word-aligned).
pub fn read_wav(bytes: &[u8]) -> Result<Waveform> {
    if bytes.len() < 12 {
        return Err(Error::Format("missing RIFF header".into()));
    }
    if &bytes[0..4] != b"RIFF" {
        return Err(Error::Format("missing RIFF magic".into()));
    }
    if &bytes[8..12] != b"WAVE" {
        return Err(Error::Format("missing WAVE marker".into()));
    }

    let mut fmt: Option<(u16, u16, u32, u16)> = None; // (format, channels, rate, bits)
    let mut data: Option<&[u8]> = None;
    let mut pos = 12;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = read_u32(bytes, pos + 4) as usize;
        let body_start = pos + 8;
        if body_start + size > bytes.len() {
            return Err(Error::Format(format!(
                "chunk '{}' overruns file",
                String::from_utf8_lossy(id)
            )));
        }
        let body = &bytes[body_start..body_start + size];
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(Error::Format("fmt chunk truncated".into()));
                }
                fmt = Some((
                    read_u16(body, 0),
                    read_u16(body, 2),
                    read_u32(body, 4),
                    read_u16(body, 14),
                ));
            }
            b"data" => data = Some(body),
            _ => {}
        }
        // chunks are word-aligned
        pos = body_start + size + (size & 1);
    }

    let (format, channels, rate, bits) = fmt.ok_or_else(|| Error::Format("missing fmt chunk".into()))?;
    let data = data.ok_or_else(|| Error::Format("missing data chunk".into()))?;
    if channels == 0 {
        return Err(Error::Format("fmt chunk declares zero channels".into()));
    }
    if rate == 0 {
        return Err(Error::Format("fmt chunk declares zero sample rate".into()));
    }

    let samples = match (format, bits) {
        (FORMAT_PCM, 16) => data
            .chunks_exact(2)
            .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64 / 32768.0)
            .collect::<Vec<_>>(),
        (FORMAT_IEEE_FLOAT, 32) => data
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect::<Vec<_>>(),
        _ => {
            return Err(Error::Unsupported(format!(
                "WAV codec tag {format} with {bits} bits per sample (supported: PCM16, float32)"
            )))
        }
    };

    // drop a trailing partial frame rather than failing
    let whole = samples.len() - samples.len() % channels as usize;
    let mut samples = samples;
    samples.truncate(whole);
    Waveform::new(samples, rate, channels)
}

/// Encoded WAV bytes plus the number of samples that saturated on write.
pub struct EncodedWav {
    pub bytes: Vec<u8>,
    pub saturated: usize,
}

/// Serialize to a canonical 44-byte-header RIFF/WAVE file.
pub fn write_wav(w: &Waveform, encoding: WavEncoding) -> EncodedWav {
    let (format_tag, bits): (u16, u16) = match encoding {
        WavEncoding::Pcm16 => (FORMAT_PCM, 16),
        WavEncoding::Float32 => (FORMAT_IEEE_FLOAT, 32),
    };
    let bytes_per_sample = bits as usize / 8;
    let data_len = w.samples.len() * bytes_per_sample;
    let mut out = Vec::with_capacity(44 + data_len);
    let block_align = w.channels as usize * bytes_per_sample;

    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&((36 + data_len) as u32).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&format_tag.to_le_bytes());
    out.extend_from_slice(&w.channels.to_le_bytes());
    out.extend_from_slice(&w.sample_rate.to_le_bytes());
    out.extend_from_slice(&((w.sample_rate as usize * block_align) as u32).to_le_bytes());
    out.extend_from_slice(&(block_align as u16).to_le_bytes());
    out.extend_from_slice(&bits.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());

    let mut saturated = 0usize;
    match encoding {
        WavEncoding::Pcm16 => {
            for &s in &w.samples {
                let scaled = (s * 32768.0).round();
                let clamped = if scaled > 32767.0 {
                    saturated += 1;
                    32767
                } else if scaled < -32768.0 {
                    saturated += 1;
                    -32768
                } else {
                    scaled as i16 as i32
                };
                out.extend_from_slice(&(clamped as i16).to_le_bytes());
            }
        }
        WavEncoding::Float32 => {
            for &s in &w.samples {
                out.extend_from_slice(&(s as f32).to_le_bytes());
            }
        }
    }
    EncodedWav {
        bytes: out,
        saturated,
    }
}

const RESAMPLE_HALF_TAPS: isize = 16; // 32-tap Hann-windowed sinc

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

/// Band-limited sample-rate conversion (windowed sinc). Mono only; the
/// identity rate is a bit-exact bypass.
pub fn resample(w: &Waveform, target_rate: u32) -> Result<Waveform> {
    if !w.is_mono() {
        return Err(Error::Precondition(
            "resample requires mono input; downmix first".into(),
        ));
    }
    if target_rate == 0 {
        return Err(Error::Precondition("target_rate must be > 0".into()));
    }
    if target_rate == w.sample_rate {
        return Ok(w.clone());
    }

    let in_len = w.samples.len();
    let out_len =
        ((in_len as f64) * target_rate as f64 / w.sample_rate as f64).round() as usize;
    let ratio = target_rate as f64 / w.sample_rate as f64;
    // cutoff at the lower of the two Nyquist frequencies, in input units
    let fc = ratio.min(1.0);
    let half = RESAMPLE_HALF_TAPS;

    let mut out = Vec::with_capacity(out_len);
    for i in 0..out_len {
        let center = i as f64 / ratio;
        let j0 = center.floor() as isize - half + 1;
        let mut acc = 0.0;
        for j in j0..j0 + 2 * half {
            if j < 0 || j as usize >= in_len {
                continue;
            }
            let x = center - j as f64;
            // Hann window over [-half, half]
            let win = 0.5 * (1.0 + (std::f64::consts::PI * x / half as f64).cos());
            acc += w.samples[j as usize] * fc * sinc(fc * x) * win;
        }
        out.push(acc);
    }
    Ok(Waveform::mono_unchecked(out, target_rate))
}

/// Frequency (Hz) of the dominant DFT magnitude peak, ignoring DC.
/// Used by the perturbation contracts (pitch preservation checks).
pub fn dominant_frequency(w: &Waveform) -> Result<f64> {
    if !w.is_mono() || w.samples.len() < 4 {
        return Err(Error::Precondition(
            "dominant_frequency needs a mono waveform of at least 4 samples".into(),
        ));
    }
    let n = w.samples.len();
    let mut buf: Vec<Complex64> = w
        .samples
        .iter()
        .map(|&s| Complex64::new(s, 0.0))
        .collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    let half = n / 2;
    let mut best = 1usize;
    let mut best_mag = 0.0;
    for (k, c) in buf.iter().enumerate().take(half + 1).skip(1) {
        let m = c.norm_sqr();
        if m > best_mag {
            best_mag = m;
            best = k;
        }
    }
    Ok(best as f64 * w.sample_rate as f64 / n as f64)
}

/// DFT bin width in Hz for a signal of this length.
pub fn bin_width_hz(w: &Waveform) -> f64 {
    w.sample_rate as f64 / w.samples.len() as f64
}

/// A seeded sine tone, handy for perturbation contracts and smoke tests.
pub fn sine_tone(freq_hz: f64, sample_rate: u32, n_samples: usize, amplitude: f64) -> Waveform {
    let samples = (0..n_samples)
        .map(|i| amplitude * (2.0 * std::f64::consts::PI * freq_hz * i as f64 / sample_rate as f64).sin())
        .collect();
    Waveform::mono_unchecked(samples, sample_rate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn canonical_header(rate: u32, channels: u16, data_len: u32) -> Vec<u8> {
        let mut h = Vec::new();
        h.extend_from_slice(b"RIFF");
        h.extend_from_slice(&(36 + data_len).to_le_bytes());
        h.extend_from_slice(b"WAVE");
        h.extend_from_slice(b"fmt ");
        h.extend_from_slice(&16u32.to_le_bytes());
        h.extend_from_slice(&1u16.to_le_bytes());
        h.extend_from_slice(&channels.to_le_bytes());
        h.extend_from_slice(&rate.to_le_bytes());
        h.extend_from_slice(&(rate * channels as u32 * 2).to_le_bytes());
        h.extend_from_slice(&(channels * 2).to_le_bytes());
        h.extend_from_slice(&16u16.to_le_bytes());
        h.extend_from_slice(b"data");
        h.extend_from_slice(&data_len.to_le_bytes());
        h
    }

    #[test]
    fn reads_canonical_pcm16_header() {
        let mut bytes = canonical_header(16000, 1, 4);
        bytes.extend_from_slice(&[0, 0, 0, 0]);
        let w = read_wav(&bytes).unwrap();
        assert_eq!(w.samples, vec![0.0, 0.0]);
        assert_eq!(w.sample_rate, 16000);
        assert_eq!(w.channels, 1);
    }

    #[test]
    fn empty_bytes_is_format_error() {
        match read_wav(&[]) {
            Err(Error::Format(_)) => {}
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn pcm16_min_reads_as_minus_one() {
        let mut bytes = canonical_header(8000, 1, 2);
        bytes.extend_from_slice(&(-32768i16).to_le_bytes());
        let w = read_wav(&bytes).unwrap();
        assert_eq!(w.samples, vec![-1.0]);
    }

    #[test]
    fn unsupported_codec_names_tag() {
        let mut bytes = canonical_header(8000, 1, 0);
        bytes[20] = 7; // mu-law tag
        match read_wav(&bytes) {
            Err(Error::Unsupported(msg)) => assert!(msg.contains('7'), "{msg}"),
            other => panic!("expected unsupported-format error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_chunks_are_skipped() {
        let w = Waveform::new(vec![0.25, -0.25], 16000, 1).unwrap();
        let enc = write_wav(&w, WavEncoding::Pcm16);
        // splice a LIST chunk between header and data
        let mut bytes = enc.bytes[..12].to_vec();
        bytes.extend_from_slice(b"LIST");
        bytes.extend_from_slice(&3u32.to_le_bytes());
        bytes.extend_from_slice(&[1, 2, 3, 0]); // padded to word boundary
        bytes.extend_from_slice(&enc.bytes[12..]);
        let back = read_wav(&bytes).unwrap();
        assert_eq!(back.samples, w.samples);
    }

    #[test]
    fn write_zero_sample() {
        let w = Waveform::new(vec![0.0], 16000, 1).unwrap();
        let enc = write_wav(&w, WavEncoding::Pcm16);
        assert_eq!(&enc.bytes[24..28], &16000u32.to_le_bytes());
        assert_eq!(&enc.bytes[44..46], &[0, 0]);
        assert_eq!(enc.saturated, 0);
    }

    #[test]
    fn write_saturates_out_of_range() {
        let w = Waveform::new(vec![1.5], 16000, 1).unwrap();
        let enc = write_wav(&w, WavEncoding::Pcm16);
        assert_eq!(i16::from_le_bytes([enc.bytes[44], enc.bytes[45]]), 32767);
        assert_eq!(enc.saturated, 1);
    }

    #[test]
    fn pcm16_roundtrip_is_bit_exact() {
        let mut rng = crate::rng::substream(11, "wav-roundtrip");
        let samples: Vec<f64> = (0..100)
            .map(|_| rng.gen_range(-32768i32..=32767) as f64 / 32768.0)
            .collect();
        let w = Waveform::new(samples.clone(), 16000, 1).unwrap();
        let enc = write_wav(&w, WavEncoding::Pcm16);
        assert_eq!(enc.saturated, 0);
        let back = read_wav(&enc.bytes).unwrap();
        assert_eq!(back.samples, samples);
        assert_eq!(back.sample_rate, 16000);
    }

    #[test]
    fn float32_roundtrip_preserves_f32_values() {
        let samples = vec![0.125, -0.5, 0.90625];
        let w = Waveform::new(samples.clone(), 44100, 1).unwrap();
        let back = read_wav(&write_wav(&w, WavEncoding::Float32).bytes).unwrap();
        assert_eq!(back.samples, samples);
    }

    #[test]
    fn resample_identity_rate_is_bypass() {
        let w = sine_tone(440.0, 16000, 1600, 0.5);
        let r = resample(&w, 16000).unwrap();
        assert_eq!(r.samples, w.samples);
    }

    #[test]
    fn resample_length_follows_definition() {
        let w = Waveform::new(vec![0.0; 4000], 8000, 1).unwrap();
        let r = resample(&w, 16000).unwrap();
        assert_eq!(r.samples.len(), 8000);
        assert_eq!(r.sample_rate, 16000);
    }

    #[test]
    fn resample_rejects_multichannel() {
        let w = Waveform::new(vec![0.0; 4], 8000, 2).unwrap();
        assert!(matches!(resample(&w, 16000), Err(Error::Precondition(_))));
    }

    #[test]
    fn upsampled_tone_keeps_peak_frequency() {
        let w = sine_tone(440.0, 8000, 4000, 0.8);
        let r = resample(&w, 16000).unwrap();
        let peak = dominant_frequency(&r).unwrap();
        assert!((peak - 440.0).abs() <= bin_width_hz(&r) + 1e-9, "peak {peak}");
    }

    #[test]
    fn upsampling_preserves_energy_within_5_percent() {
        let w = sine_tone(440.0, 8000, 4000, 0.8);
        let r = resample(&w, 16000).unwrap();
        let p0 = mean_power(&w).unwrap();
        let p1 = mean_power(&r).unwrap();
        assert!((p1 - p0).abs() / p0 < 0.05, "p0={p0} p1={p1}");
    }

    #[test]
    fn resample_preserves_duration_within_one_sample() {
        let w = Waveform::new(vec![0.1; 4410], 44100, 1).unwrap();
        let r = resample(&w, 16000).unwrap();
        let want = w.duration_s();
        let got = r.duration_s();
        assert!((want - got).abs() <= 1.0 / 16000.0 + 1e-12);
    }

    #[test]
    fn mean_power_basics() {
        let zeros = Waveform::new(vec![0.0; 8], 8000, 1).unwrap();
        assert_eq!(mean_power(&zeros).unwrap(), 0.0);
        let half = Waveform::new(vec![0.5; 8], 8000, 1).unwrap();
        assert_eq!(mean_power(&half).unwrap(), 0.25);
        let alt = Waveform::new(vec![1.0, -1.0, 1.0, -1.0], 8000, 1).unwrap();
        assert_eq!(mean_power(&alt).unwrap(), 1.0);
    }

    #[test]
    fn mean_power_empty_is_error() {
        let w = Waveform::new(vec![], 8000, 1).unwrap();
        assert!(matches!(mean_power(&w), Err(Error::Precondition(_))));
    }

    #[test]
    fn mean_power_sign_flip_invariant() {
        let mut rng = crate::rng::substream(3, "power-flip");
        let samples: Vec<f64> = (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let flipped: Vec<f64> = samples.iter().map(|s| -s).collect();
        let a = mean_power(&Waveform::new(samples, 8000, 1).unwrap()).unwrap();
        let b = mean_power(&Waveform::new(flipped, 8000, 1).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn downmix_averages_channels() {
        let w = Waveform::new(vec![1.0, 0.0, 0.0, 1.0], 8000, 2).unwrap();
        let m = downmix(&w);
        assert_eq!(m.samples, vec![0.5, 0.5]);
        assert!(m.is_mono());
    }

    #[test]
    fn waveform_rejects_non_finite() {
        assert!(Waveform::new(vec![f64::NAN], 8000, 1).is_err());
        assert!(Waveform::new(vec![0.0, 0.1, 0.2], 8000, 2).is_err());
    }
}
