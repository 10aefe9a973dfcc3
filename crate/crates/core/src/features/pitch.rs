//! Fallback pitch tracker: normalized autocorrelation over the same center
//! padded frames as the spectrogram, with a periodicity threshold for the
//! voicing decision. An external estimator can replace it through the
//! process-level adapter seam.

use crate::config::SystemConfig;
use crate::error::{Error, Result};
use crate::io::Waveform;
use crate::scalar::{resample_nearest, Scalar};
use serde::Deserialize;
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub struct PitchTrack<F: Scalar> {
    /// Hz before normalization, Hz offsets from the voiced mean after.
    pub pitch: Vec<F>,
    /// 1 = voiced, 0 = unvoiced.
    pub voicing: Vec<u8>,
    pub normalized: bool,
    /// Subtracted voiced-frame mean, set once normalized.
    pub mean_f0: Option<F>,
}

impl<F: Scalar> PitchTrack<F> {
    pub fn len(&self) -> usize {
        self.pitch.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pitch.is_empty()
    }
}

/// Track pitch with the internal autocorrelation tracker. One value per
/// analysis hop, aligned with the mel frames.
pub fn estimate_pitch<F: Scalar>(wav: &Waveform<F>, cfg: &SystemConfig) -> Result<PitchTrack<F>> {
    if wav.samples.len() < cfg.window_samples {
        return Err(Error::TooShort {
            got: wav.samples.len(),
            need: cfg.window_samples,
        });
    }
    let window = cfg.window_samples;
    let hop = cfg.hop_samples;
    let n_frames = wav.samples.len() / hop;
    let pad = window / 2;
    let mut padded = vec![0.0f64; wav.samples.len() + window];
    for (i, &s) in wav.samples.iter().enumerate() {
        padded[pad + i] = s.f64();
    }

    let rate = cfg.sample_rate as f64;
    let lag_min = (rate / cfg.pitch_fmax).floor().max(2.0) as usize;
    let lag_max = ((rate / cfg.pitch_fmin).ceil() as usize).min(window / 2);

    let mut pitch = Vec::with_capacity(n_frames);
    let mut voicing = Vec::with_capacity(n_frames);
    for n in 0..n_frames {
        let frame = &padded[n * hop..n * hop + window];
        let (f0, periodicity) = best_period(frame, lag_min, lag_max, rate);
        if periodicity > cfg.pitch_threshold && f0 >= cfg.pitch_fmin && f0 <= cfg.pitch_fmax {
            pitch.push(F::cast(f0));
            voicing.push(1);
        } else {
            pitch.push(F::zero());
            voicing.push(0);
        }
    }
    Ok(PitchTrack {
        pitch,
        voicing,
        normalized: false,
        mean_f0: None,
    })
}

/// Normalized autocorrelation peak over the lag range, with parabolic
/// refinement of the winning lag. Returns (f0 Hz, periodicity in [0, 1]).
fn best_period(frame: &[f64], lag_min: usize, lag_max: usize, rate: f64) -> (f64, f64) {
    let w = frame.len();
    let energy: f64 = frame.iter().map(|x| x * x).sum();
    if energy < 1e-10 {
        return (0.0, 0.0);
    }
    let mut scores = vec![0.0f64; lag_max + 1];
    for lag in lag_min..=lag_max {
        let m = w - lag;
        let mut num = 0.0;
        let mut e0 = 0.0;
        let mut e1 = 0.0;
        for i in 0..m {
            num += frame[i] * frame[i + lag];
            e0 += frame[i] * frame[i];
            e1 += frame[i + lag] * frame[i + lag];
        }
        let denom = (e0 * e1).sqrt();
        scores[lag] = if denom > 1e-12 { num / denom } else { 0.0 };
    }
    let best = scores
        .iter()
        .enumerate()
        .skip(lag_min)
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .map(|(lag, &s)| (lag, s))
        .unwrap_or((lag_min, 0.0));
    // prefer the shortest lag whose score is close to the maximum, so the
    // fundamental wins over its own multiples
    let mut lag = best.0;
    for l in lag_min..best.0 {
        if scores[l] >= 0.9 * best.1 && scores[l] > 0.0 {
            lag = l;
            break;
        }
    }
    // climb to the nearest local peak (the scan may land on a shoulder)
    while lag + 1 <= lag_max && scores[lag + 1] > scores[lag] {
        lag += 1;
    }
    while lag > lag_min && scores[lag - 1] > scores[lag] {
        lag -= 1;
    }
    let score = scores[lag];
    // parabolic refinement, clamped to half a lag on either side
    let refined = if lag > lag_min && lag < lag_max {
        let (a, b, c) = (scores[lag - 1], scores[lag], scores[lag + 1]);
        let denom = a - 2.0 * b + c;
        if denom.abs() > 1e-9 {
            lag as f64 + (0.5 * (a - c) / denom).clamp(-0.5, 0.5)
        } else {
            lag as f64
        }
    } else {
        lag as f64
    };
    (rate / refined, score)
}

/// Subtract the voiced-frame mean; unvoiced frames are set to zero. A fully
/// unvoiced track gets the configured default mean so normalization stays
/// defined.
pub fn mean_normalize_pitch<F: Scalar>(pt: &PitchTrack<F>, default_mean_f0: F) -> PitchTrack<F> {
    let voiced: Vec<F> = pt
        .pitch
        .iter()
        .zip(&pt.voicing)
        .filter(|(_, &v)| v == 1)
        .map(|(&p, _)| p)
        .collect();
    let mean = if voiced.is_empty() {
        default_mean_f0
    } else {
        voiced.iter().copied().sum::<F>() / F::cast_usize(voiced.len())
    };
    let pitch = pt
        .pitch
        .iter()
        .zip(&pt.voicing)
        .map(|(&p, &v)| if v == 1 { p - mean } else { F::zero() })
        .collect();
    PitchTrack {
        pitch,
        voicing: pt.voicing.clone(),
        normalized: true,
        mean_f0: Some(mean),
    }
}

#[derive(Debug, Deserialize)]
struct AdapterOutput {
    hop_seconds: f64,
    pitch: Vec<f64>,
    voicing: Vec<u8>,
}

/// Run an external pitch estimator: `cmd <wav_path>` must print JSON
/// `{"hop_seconds": .., "pitch": [..], "voicing": [..]}` on stdout. The
/// result is nearest-neighbor aligned to `target_frames`.
pub fn estimate_pitch_adapter<F: Scalar>(
    cmd: &str,
    wav_path: &Path,
    target_frames: usize,
) -> Result<PitchTrack<F>> {
    let mut parts = cmd.split_whitespace();
    let program = parts
        .next()
        .ok_or_else(|| Error::Adapter("empty pitch adapter command".into()))?;
    let output = std::process::Command::new(program)
        .args(parts)
        .arg(wav_path)
        .output()
        .map_err(|e| Error::Adapter(format!("pitch adapter spawn: {e}")))?;
    if !output.status.success() {
        return Err(Error::Adapter(format!(
            "pitch adapter exited with {}",
            output.status
        )));
    }
    let parsed: AdapterOutput = serde_json::from_slice(&output.stdout)
        .map_err(|e| Error::Adapter(format!("pitch adapter output: {e}")))?;
    if parsed.pitch.len() != parsed.voicing.len() || parsed.pitch.is_empty() {
        return Err(Error::Adapter(
            "pitch adapter returned mismatched or empty sequences".into(),
        ));
    }
    if parsed.hop_seconds <= 0.0 {
        return Err(Error::Adapter("pitch adapter hop must be positive".into()));
    }
    let pitch: Vec<F> = resample_nearest(&parsed.pitch, target_frames)
        .into_iter()
        .map(F::cast)
        .collect();
    let voicing = resample_nearest(&parsed.voicing, target_frames);
    Ok(PitchTrack {
        pitch,
        voicing,
        normalized: false,
        mean_f0: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn cfg() -> SystemConfig {
        SystemConfig::default()
    }

    fn sawtooth(rate: u32, seconds: f64, hz: f64) -> Waveform<f64> {
        let n = (rate as f64 * seconds) as usize;
        let samples = (0..n)
            .map(|i| {
                let phase = (i as f64 * hz / rate as f64).fract();
                0.6 * (2.0 * phase - 1.0)
            })
            .collect();
        Waveform::new(samples, rate)
    }

    #[test]
    fn sawtooth_200hz_is_tracked() {
        let wav = sawtooth(16_000, 1.0, 200.0);
        let pt = estimate_pitch(&wav, &cfg()).unwrap();
        assert_eq!(pt.len(), 50);
        let voiced: Vec<f64> = pt
            .pitch
            .iter()
            .zip(&pt.voicing)
            .filter(|(_, &v)| v == 1)
            .map(|(&p, _)| p)
            .collect();
        let frac_voiced = voiced.len() as f64 / pt.len() as f64;
        assert!(frac_voiced >= 0.9, "only {frac_voiced} voiced");
        let close = voiced.iter().filter(|&&p| (p - 200.0).abs() <= 5.0).count();
        assert!(
            close as f64 / voiced.len() as f64 >= 0.9,
            "only {close}/{} within 5 Hz",
            voiced.len()
        );
    }

    #[test]
    fn white_noise_is_mostly_unvoiced() {
        let mut rng = StdRng::seed_from_u64(11);
        let samples: Vec<f64> = (0..16_000).map(|_| rng.random_range(-0.5..0.5)).collect();
        let wav = Waveform::new(samples, 16_000);
        let pt = estimate_pitch(&wav, &cfg()).unwrap();
        let unvoiced = pt.voicing.iter().filter(|&&v| v == 0).count();
        let frac = unvoiced as f64 / pt.len() as f64;
        assert!(frac >= 0.8, "only {frac} unvoiced");
    }

    #[test]
    fn silence_is_fully_unvoiced() {
        let wav = Waveform::new(vec![0.0f64; 16_000], 16_000);
        let pt = estimate_pitch(&wav, &cfg()).unwrap();
        assert!(pt.voicing.iter().all(|&v| v == 0));
        assert!(pt.pitch.iter().all(|&p| p == 0.0));
    }

    #[test]
    fn mean_normalization_arithmetic() {
        let pt = PitchTrack {
            pitch: vec![100.0f64, 200.0],
            voicing: vec![1, 1],
            normalized: false,
            mean_f0: None,
        };
        let out = mean_normalize_pitch(&pt, 120.0);
        assert_eq!(out.pitch, vec![-50.0, 50.0]);
        assert_eq!(out.mean_f0, Some(150.0));
    }

    #[test]
    fn voiced_only_mean_skips_unvoiced_frames() {
        let pt = PitchTrack {
            pitch: vec![100.0f64, 0.0, 300.0],
            voicing: vec![1, 0, 1],
            normalized: false,
            mean_f0: None,
        };
        let out = mean_normalize_pitch(&pt, 120.0);
        assert_eq!(out.pitch, vec![-100.0, 0.0, 100.0]);
        assert_eq!(out.mean_f0, Some(200.0));
    }

    #[test]
    fn normalization_is_idempotent_on_output() {
        let pt = PitchTrack {
            pitch: vec![100.0f64, 0.0, 300.0],
            voicing: vec![1, 0, 1],
            normalized: false,
            mean_f0: None,
        };
        let once = mean_normalize_pitch(&pt, 120.0);
        let twice = mean_normalize_pitch(&once, 120.0);
        assert_eq!(once.pitch, twice.pitch);
        assert_eq!(twice.mean_f0, Some(0.0));
    }

    #[test]
    fn all_unvoiced_uses_default_mean() {
        let pt = PitchTrack {
            pitch: vec![0.0f64; 4],
            voicing: vec![0; 4],
            normalized: false,
            mean_f0: None,
        };
        let out = mean_normalize_pitch(&pt, 120.0);
        assert_eq!(out.mean_f0, Some(120.0));
        assert!(out.pitch.iter().all(|&p| p == 0.0));
    }
}
