//! Deterministic waveform-level feature extraction: log mel-spectrogram,
//! linear-spectrogram energy, pitch and voicing, and pitch mean
//! normalization. All lengths are aligned by construction: energy and pitch
//! run at the same hop as the mel frames.

pub mod pitch;
pub mod stft;

pub use pitch::{estimate_pitch, estimate_pitch_adapter, mean_normalize_pitch, PitchTrack};

use crate::config::SystemConfig;
use crate::error::{Error, Result};
use crate::io::Waveform;
use crate::scalar::Scalar;
use ndarray::Array2;

#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram<F: Scalar> {
    /// `frames x mel_bands`, log scale.
    pub frames: Array2<F>,
    pub hop_seconds: f64,
}

impl<F: Scalar> MelSpectrogram<F> {
    pub fn n_frames(&self) -> usize {
        self.frames.nrows()
    }

    pub fn bands(&self) -> usize {
        self.frames.ncols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnergyContour<F: Scalar> {
    pub energy: Vec<F>,
}

impl<F: Scalar> EnergyContour<F> {
    pub fn len(&self) -> usize {
        self.energy.len()
    }

    pub fn is_empty(&self) -> bool {
        self.energy.is_empty()
    }
}

/// Log mel-spectrogram with `floor(T / hop)` center-padded frames.
pub fn mel_spectrogram<F: Scalar>(
    wav: &Waveform<F>,
    cfg: &SystemConfig,
) -> Result<MelSpectrogram<F>> {
    let mags = stft::magnitude_frames(&wav.samples, cfg.window_samples, cfg.hop_samples)?;
    let fb = stft::mel_filterbank(
        cfg.mel_bands,
        cfg.window_samples,
        cfg.sample_rate,
        cfg.mel_fmin,
        cfg.mel_fmax,
    );
    let fb_f: Array2<F> = fb.mapv(F::cast);
    let power = mags.mapv(|m| m * m);
    let mel = power.dot(&fb_f.t());
    let eps = F::cast(cfg.log_epsilon);
    let frames = mel.mapv(|v| (v + eps).ln());
    Ok(MelSpectrogram {
        frames,
        hop_seconds: cfg.hop_seconds(),
    })
}

/// Frame-wise L2 norm of the linear magnitude spectrogram, same framing as
/// the mel-spectrogram.
pub fn energy_contour<F: Scalar>(wav: &Waveform<F>, cfg: &SystemConfig) -> Result<EnergyContour<F>> {
    let mags = stft::magnitude_frames(&wav.samples, cfg.window_samples, cfg.hop_samples)?;
    let energy = mags
        .rows()
        .into_iter()
        .map(|row| row.iter().map(|&m| m * m).sum::<F>().sqrt())
        .collect();
    Ok(EnergyContour { energy })
}

/// Mel frames, energy, and normalized pitch for one utterance, with the
/// length invariants checked.
pub struct FrameFeatures<F: Scalar> {
    pub mel: MelSpectrogram<F>,
    pub energy: EnergyContour<F>,
    pub pitch: PitchTrack<F>,
}

pub fn extract_frame_features<F: Scalar>(
    wav: &Waveform<F>,
    cfg: &SystemConfig,
    wav_path: Option<&std::path::Path>,
) -> Result<FrameFeatures<F>> {
    let mel = mel_spectrogram(wav, cfg)?;
    let energy = energy_contour(wav, cfg)?;
    let raw_pitch = if cfg.pitch_adapter_cmd.is_empty() {
        estimate_pitch(wav, cfg)?
    } else {
        let path = wav_path.ok_or_else(|| {
            Error::Adapter("pitch adapter requires a source file path".into())
        })?;
        estimate_pitch_adapter(&cfg.pitch_adapter_cmd, path, mel.n_frames())?
    };
    let pitch = mean_normalize_pitch(&raw_pitch, F::cast(cfg.default_mean_f0));
    if energy.len() != mel.n_frames() || pitch.len() != mel.n_frames() {
        return Err(Error::Shape(format!(
            "feature length mismatch: mel {}, energy {}, pitch {}",
            mel.n_frames(),
            energy.len(),
            pitch.len()
        )));
    }
    Ok(FrameFeatures { mel, energy, pitch })
}
