//! Speech perturbations: pitch-preserving time-scale modification (WSOLA),
//! SNR-calibrated additive noise, and sweep-grid construction.

use crate::audio::{mean_power, Waveform};
use crate::error::{Error, Result};
use crate::rng::{splitmix64, substream};
use rand::Rng;

/// Noise material for the additive-noise ablation. Babble and music read
/// user-supplied files; synthetic is a seeded pink-noise generator so the
/// ablation runs with no external corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseClass {
    Babble,
    Music,
    Synthetic,
}

impl NoiseClass {
    pub fn as_str(&self) -> &'static str {
        match self {
            NoiseClass::Babble => "babble",
            NoiseClass::Music => "music",
            NoiseClass::Synthetic => "synthetic",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "babble" => Ok(NoiseClass::Babble),
            "music" => Ok(NoiseClass::Music),
            "synthetic" => Ok(NoiseClass::Synthetic),
            other => Err(Error::Validation(format!("unknown noise class '{other}'"))),
        }
    }
}

/// One point of a perturbation sweep.
#[derive(Debug, Clone, PartialEq)]
pub enum PerturbCondition {
    /// Speaking-rate multiplier; ratio < 1 slows down (lengthens) the signal.
    Tempo { ratio: f64 },
    /// Additive noise at a target signal-to-noise ratio.
    Noise {
        snr_db: f64,
        class: NoiseClass,
        seed: u64,
    },
}

impl PerturbCondition {
    pub fn validate(&self) -> Result<()> {
        match self {
            PerturbCondition::Tempo { ratio } => {
                if !(ratio.is_finite() && *ratio > 0.0) {
                    return Err(Error::Precondition(format!("tempo ratio {ratio} invalid")));
                }
            }
            PerturbCondition::Noise { snr_db, .. } => {
                if !snr_db.is_finite() {
                    return Err(Error::Precondition("noise snr_db must be finite".into()));
                }
            }
        }
        Ok(())
    }

    /// Compact stable label used in CSV output and file names.
    pub fn label(&self) -> String {
        match self {
            PerturbCondition::Tempo { ratio } => format!("tempo:{ratio}"),
            PerturbCondition::Noise { snr_db, class, .. } => {
                format!("noise:{}dB:{}", snr_db, class.as_str())
            }
        }
    }
}

pub const TSM_FRAME_LEN: usize = 1024;
pub const TSM_SYNTH_HOP: usize = 512;
pub const TSM_SEARCH_TOL: isize = 512;

fn hann_window(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos()))
        .collect()
}

/// Normalized cross-correlation between two equal-length slices.
fn ncc(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb).sqrt()
    }
}

/// Waveform-similarity overlap-add time-scale modification.
///
/// `ratio` is the speaking-rate multiplier: output duration is input
/// duration divided by `ratio`, pitch unchanged. `ratio == 1.0` is a
/// bit-exact bypass.
pub fn time_scale(w: &Waveform, ratio: f64) -> Result<Waveform> {
    if !w.is_mono() {
        return Err(Error::Precondition("time_scale requires mono input".into()));
    }
    if !(0.25..=4.0).contains(&ratio) {
        return Err(Error::Precondition(format!(
            "tempo ratio {ratio} outside [0.25, 4]"
        )));
    }
    if ratio == 1.0 {
        return Ok(w.clone());
    }
    let in_len = w.samples.len();
    let out_len = (in_len as f64 / ratio).round() as usize;
    if in_len == 0 || out_len == 0 {
        return Ok(Waveform::mono_unchecked(vec![], w.sample_rate));
    }

    let n = TSM_FRAME_LEN;
    let hop = TSM_SYNTH_HOP;
    let tol = TSM_SEARCH_TOL;
    let window = hann_window(n);
    let overlap = hop;

    // zero-pad the input so candidate segments near the tail stay in range
    let mut x = w.samples.clone();
    x.extend(std::iter::repeat(0.0).take(n + tol as usize + hop));

    let n_frames = out_len / hop + 2;
    let mut acc = vec![0.0f64; n_frames * hop + n];
    let mut wsum = vec![0.0f64; acc.len()];

    let mut prev_start: usize = 0;
    for k in 0..n_frames {
        let analysis = (k as f64 * hop as f64 * ratio).round() as isize;
        let start = if k == 0 {
            0usize
        } else {
            // the natural continuation of the previous frame
            let natural = prev_start + hop;
            let mut best_d: isize = 0;
            let mut best_score = f64::NEG_INFINITY;
            for d in -tol..=tol {
                let cand = analysis + d;
                if cand < 0 || cand as usize + n > x.len() || natural + overlap > x.len() {
                    continue;
                }
                let score = ncc(
                    &x[natural..natural + overlap],
                    &x[cand as usize..cand as usize + overlap],
                );
                if score > best_score {
                    best_score = score;
                    best_d = d;
                }
            }
            (analysis + best_d).max(0) as usize
        };
        let out_pos = k * hop;
        for i in 0..n {
            acc[out_pos + i] += x[start + i] * window[i];
            wsum[out_pos + i] += window[i];
        }
        prev_start = start;
    }

    let mut out = Vec::with_capacity(out_len);
    for i in 0..out_len {
        let s = if wsum[i] > 1e-8 { acc[i] / wsum[i] } else { acc[i] };
        out.push(s);
    }
    Ok(Waveform::mono_unchecked(out, w.sample_rate))
}

/// Noise gain for a target SNR given signal and noise powers.
pub fn snr_gain(signal_power: f64, noise_power: f64, snr_db: f64) -> f64 {
    (signal_power / (noise_power * 10f64.powf(snr_db / 10.0))).sqrt()
}

/// Add `noise` to `signal` scaled so the mixed-in component sits exactly at
/// `snr_db`. The noise is looped cyclically from a seed-derived offset and
/// truncated to the signal length; the gain is computed against the power of
/// that looped segment, so the target SNR holds by construction.
pub fn mix_noise(signal: &Waveform, noise: &Waveform, snr_db: f64, seed: u64) -> Result<Waveform> {
    if !signal.is_mono() || !noise.is_mono() {
        return Err(Error::Precondition("mix_noise requires mono inputs".into()));
    }
    if signal.sample_rate != noise.sample_rate {
        return Err(Error::Precondition(format!(
            "sample-rate mismatch: signal {} Hz, noise {} Hz",
            signal.sample_rate, noise.sample_rate
        )));
    }
    if noise.samples.is_empty() {
        return Err(Error::Precondition("noise waveform is empty".into()));
    }
    let offset = noise_offset(seed, noise.samples.len());
    let looped: Vec<f64> = (0..signal.samples.len())
        .map(|i| noise.samples[(offset + i) % noise.samples.len()])
        .collect();
    let looped_w = Waveform::mono_unchecked(looped, signal.sample_rate);

    let p_noise = mean_power(&looped_w)?;
    if p_noise == 0.0 {
        return Err(Error::Precondition("noise segment has zero power".into()));
    }
    let p_signal = mean_power(signal)?;
    let g = snr_gain(p_signal, p_noise, snr_db);

    let samples = signal
        .samples
        .iter()
        .zip(&looped_w.samples)
        .map(|(&s, &n)| s + g * n)
        .collect();
    Ok(Waveform::mono_unchecked(samples, signal.sample_rate))
}

/// Seed-derived start offset used when looping noise.
pub fn noise_offset(seed: u64, noise_len: usize) -> usize {
    (splitmix64(seed) % noise_len as u64) as usize
}

/// Inclusive arithmetic sweep bounds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub start: f64,
    pub stop: f64,
    pub step: f64,
}

/// The tempo-ratio sweep used throughout: 0.5..=1.5 step 0.1 (11 points).
pub fn default_tempo_grid() -> GridSpec {
    GridSpec {
        start: 0.5,
        stop: 1.5,
        step: 0.1,
    }
}

/// The noise sweep used throughout: 0..=30 dB step 5 (7 points).
pub fn default_noise_grid() -> GridSpec {
    GridSpec {
        start: 0.0,
        stop: 30.0,
        step: 5.0,
    }
}

fn grid_values(spec: GridSpec) -> Result<Vec<f64>> {
    if !(spec.step > 0.0) {
        return Err(Error::Precondition(format!(
            "grid step must be positive, got {}",
            spec.step
        )));
    }
    if spec.stop < spec.start {
        return Err(Error::Precondition("grid stop below start".into()));
    }
    let count = ((spec.stop - spec.start) / spec.step + 1e-9).floor() as usize + 1;
    Ok((0..count)
        // snap accumulated rounding so grid points print cleanly
        .map(|i| ((spec.start + i as f64 * spec.step) * 1e9).round() / 1e9)
        .collect())
}

/// What the grid sweeps over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridKind {
    Tempo,
    Noise,
}

/// Build the inclusive sweep grid. Noise conditions get per-point seeds
/// derived from `base_seed`.
pub fn make_grid(
    kind: GridKind,
    spec: GridSpec,
    noise_class: NoiseClass,
    base_seed: u64,
) -> Result<Vec<PerturbCondition>> {
    let values = grid_values(spec)?;
    Ok(match kind {
        GridKind::Tempo => values
            .into_iter()
            .map(|ratio| PerturbCondition::Tempo { ratio })
            .collect(),
        GridKind::Noise => values
            .into_iter()
            .enumerate()
            .map(|(i, snr_db)| PerturbCondition::Noise {
                snr_db,
                class: noise_class,
                seed: crate::rng::derive_seed_indexed(base_seed, "noise-grid", i as u64),
            })
            .collect(),
    })
}

/// Deterministic pink noise (Paul Kellet's filter over seeded white noise),
/// normalized to unit RMS.
pub fn pink_noise(n_samples: usize, sample_rate: u32, seed: u64) -> Waveform {
    let mut rng = substream(seed, "pink-noise");
    let mut b = [0.0f64; 7];
    let mut samples = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let white: f64 = rng.gen_range(-1.0..1.0);
        b[0] = 0.99886 * b[0] + white * 0.0555179;
        b[1] = 0.99332 * b[1] + white * 0.0750759;
        b[2] = 0.96900 * b[2] + white * 0.1538520;
        b[3] = 0.86650 * b[3] + white * 0.3104856;
        b[4] = 0.55000 * b[4] + white * 0.5329522;
        b[5] = -0.7616 * b[5] - white * 0.0168980;
        let pink = b[0] + b[1] + b[2] + b[3] + b[4] + b[5] + b[6] + white * 0.5362;
        b[6] = white * 0.115926;
        samples.push(pink);
    }
    let rms = (samples.iter().map(|s| s * s).sum::<f64>() / samples.len().max(1) as f64).sqrt();
    if rms > 0.0 {
        for s in &mut samples {
            *s /= rms * 4.0; // keep comfortably inside unit range
        }
    }
    Waveform::mono_unchecked(samples, sample_rate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::{bin_width_hz, dominant_frequency, sine_tone};

    #[test]
    fn tempo_identity_is_bit_exact() {
        let w = sine_tone(220.0, 16000, 16000, 0.6);
        let out = time_scale(&w, 1.0).unwrap();
        assert_eq!(out.samples, w.samples);
    }

    #[test]
    fn tempo_half_rate_doubles_length() {
        let w = sine_tone(220.0, 16000, 16000, 0.6);
        let out = time_scale(&w, 0.5).unwrap();
        assert!((out.samples.len() as isize - 32000).unsigned_abs() <= 512,
            "len {}", out.samples.len());
    }

    #[test]
    fn tempo_fast_rate_shortens() {
        let w = sine_tone(220.0, 16000, 16000, 0.6);
        let out = time_scale(&w, 1.5).unwrap();
        assert!((out.samples.len() as isize - 10667).unsigned_abs() <= 512,
            "len {}", out.samples.len());
    }

    #[test]
    fn tempo_out_of_range_rejected() {
        let w = sine_tone(220.0, 16000, 1000, 0.6);
        assert!(time_scale(&w, 0.1).is_err());
        assert!(time_scale(&w, 5.0).is_err());
    }

    #[test]
    fn tempo_preserves_pitch_across_grid() {
        let w = sine_tone(220.0, 16000, 16000, 0.6);
        for cond in make_grid(
            GridKind::Tempo,
            default_tempo_grid(),
            NoiseClass::Synthetic,
            0,
        )
        .unwrap()
        {
            let ratio = match cond {
                PerturbCondition::Tempo { ratio } => ratio,
                _ => unreachable!(),
            };
            let out = time_scale(&w, ratio).unwrap();
            let peak = dominant_frequency(&out).unwrap();
            assert!(
                (peak - 220.0).abs() <= bin_width_hz(&out) + 1e-9,
                "ratio {ratio}: peak {peak}"
            );
        }
    }

    #[test]
    fn mix_gain_equal_power_at_0db() {
        assert_eq!(snr_gain(0.3, 0.3, 0.0), 1.0);
    }

    #[test]
    fn mix_gain_formula() {
        let g = snr_gain(1.0, 1.0, 10.0);
        assert!((g - 10f64.powf(-0.5)).abs() < 1e-15, "g={g}");
        assert!((g - 0.31623).abs() < 1e-5);
    }

    #[test]
    fn mix_noise_hits_target_snr_exactly() {
        let signal = sine_tone(300.0, 16000, 8000, 0.5);
        let noise = pink_noise(5000, 16000, 9);
        for snr_db in [0.0, 5.0, 10.0, 20.0, 30.0] {
            let mixed = mix_noise(&signal, &noise, snr_db, 77).unwrap();
            let component: Vec<f64> = mixed
                .samples
                .iter()
                .zip(&signal.samples)
                .map(|(m, s)| m - s)
                .collect();
            let p_sig = mean_power(&signal).unwrap();
            let p_noise = component.iter().map(|x| x * x).sum::<f64>() / component.len() as f64;
            let measured = 10.0 * (p_sig / p_noise).log10();
            assert!((measured - snr_db).abs() < 1e-9, "snr {snr_db}: {measured}");
        }
    }

    #[test]
    fn mix_noise_huge_snr_is_identity_within_tolerance() {
        let signal = sine_tone(300.0, 16000, 4000, 0.5);
        let noise = pink_noise(4000, 16000, 9);
        let mixed = mix_noise(&signal, &noise, 300.0, 1).unwrap();
        for (m, s) in mixed.samples.iter().zip(&signal.samples) {
            assert!((m - s).abs() < 1e-12);
        }
    }

    #[test]
    fn mix_noise_deterministic_per_seed() {
        let signal = sine_tone(300.0, 16000, 4000, 0.5);
        let noise = pink_noise(3000, 16000, 9);
        let a = mix_noise(&signal, &noise, 10.0, 5).unwrap();
        let b = mix_noise(&signal, &noise, 10.0, 5).unwrap();
        assert_eq!(a.samples, b.samples);
        let c = mix_noise(&signal, &noise, 10.0, 6).unwrap();
        assert_ne!(a.samples, c.samples);
    }

    #[test]
    fn distinct_seeds_give_distinct_offsets() {
        let len = 100_000;
        let offsets: Vec<usize> = (0..10u64).map(|s| noise_offset(s, len)).collect();
        let mut seen = std::collections::HashSet::new();
        for o in offsets {
            assert!(seen.insert(o), "offset collision");
        }
    }

    #[test]
    fn mix_noise_rejects_zero_power_and_rate_mismatch() {
        let signal = sine_tone(300.0, 16000, 1000, 0.5);
        let silence = Waveform::new(vec![0.0; 500], 16000, 1).unwrap();
        assert!(mix_noise(&signal, &silence, 10.0, 0).is_err());
        let wrong_rate = pink_noise(500, 8000, 1);
        assert!(mix_noise(&signal, &wrong_rate, 10.0, 0).is_err());
    }

    #[test]
    fn default_grids_match_contract() {
        let tempo = make_grid(
            GridKind::Tempo,
            default_tempo_grid(),
            NoiseClass::Synthetic,
            0,
        )
        .unwrap();
        assert_eq!(tempo.len(), 11);
        assert_eq!(tempo[0], PerturbCondition::Tempo { ratio: 0.5 });
        assert_eq!(tempo[10], PerturbCondition::Tempo { ratio: 1.5 });

        let noise = make_grid(
            GridKind::Noise,
            default_noise_grid(),
            NoiseClass::Synthetic,
            0,
        )
        .unwrap();
        assert_eq!(noise.len(), 7);
        match (&noise[0], &noise[6]) {
            (
                PerturbCondition::Noise { snr_db: a, .. },
                PerturbCondition::Noise { snr_db: b, .. },
            ) => {
                assert_eq!(*a, 0.0);
                assert_eq!(*b, 30.0);
            }
            _ => panic!("wrong kinds"),
        }
    }

    #[test]
    fn single_point_grid() {
        let grid = make_grid(
            GridKind::Tempo,
            GridSpec {
                start: 1.0,
                stop: 1.0,
                step: 0.1,
            },
            NoiseClass::Synthetic,
            0,
        )
        .unwrap();
        assert_eq!(grid, vec![PerturbCondition::Tempo { ratio: 1.0 }]);
    }

    #[test]
    fn zero_step_rejected() {
        assert!(make_grid(
            GridKind::Tempo,
            GridSpec {
                start: 0.5,
                stop: 1.5,
                step: 0.0
            },
            NoiseClass::Synthetic,
            0,
        )
        .is_err());
    }

    #[test]
    fn pink_noise_is_seeded_and_in_range() {
        let a = pink_noise(4000, 16000, 3);
        let b = pink_noise(4000, 16000, 3);
        assert_eq!(a.samples, b.samples);
        assert!(a.samples.iter().all(|s| s.abs() <= 1.0));
        assert!(mean_power(&a).unwrap() > 0.0);
    }
}
