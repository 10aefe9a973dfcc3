//! WAV ingestion and emission. Reads PCM (8/16/24/32-bit) and float32 files,
//! averages stereo to mono, and resamples to the system rate.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use std::path::Path;

#[derive(Debug, Clone)]
pub struct Waveform<F: Scalar> {
    pub samples: Vec<F>,
    pub sample_rate: u32,
}

impl<F: Scalar> Waveform<F> {
    pub fn new(samples: Vec<F>, sample_rate: u32) -> Self {
        Waveform {
            samples,
            sample_rate,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Linear-interpolation resampler. Output length is `round(n * to / from)`.
pub fn resample_linear<F: Scalar>(samples: &[F], from: u32, to: u32) -> Vec<F> {
    if from == to || samples.is_empty() {
        return samples.to_vec();
    }
    let n = samples.len();
    let out_len = ((n as f64) * (to as f64) / (from as f64)).round() as usize;
    let ratio = from as f64 / to as f64;
    (0..out_len.max(1))
        .map(|i| {
            let pos = i as f64 * ratio;
            let i0 = pos.floor() as usize;
            let frac = F::cast(pos - pos.floor());
            let a = samples[i0.min(n - 1)];
            let b = samples[(i0 + 1).min(n - 1)];
            a + (b - a) * frac
        })
        .collect()
}

/// Load a WAV file as mono audio at `target_rate`.
pub fn load_waveform<F: Scalar>(path: &Path, target_rate: u32) -> Result<Waveform<F>> {
    let mut reader = hound::WavReader::open(path).map_err(|e| Error::Wav {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 {
        return Err(Error::Wav {
            path: path.to_path_buf(),
            message: "zero channels".into(),
        });
    }

    let interleaved: Vec<f64> = match spec.sample_format {
        hound::SampleFormat::Float => {
            if spec.bits_per_sample != 32 {
                return Err(Error::Wav {
                    path: path.to_path_buf(),
                    message: format!("unsupported float width {}", spec.bits_per_sample),
                });
            }
            reader
                .samples::<f32>()
                .map(|s| s.map(|v| v as f64))
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Wav {
                    path: path.to_path_buf(),
                    message: e.to_string(),
                })?
        }
        hound::SampleFormat::Int => {
            let scale = (1i64 << (spec.bits_per_sample - 1)) as f64;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f64 / scale))
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Wav {
                    path: path.to_path_buf(),
                    message: e.to_string(),
                })?
        }
    };

    if interleaved.is_empty() {
        return Err(Error::EmptyAudio(path.to_path_buf()));
    }

    let frames = interleaved.len() / channels;
    let mono: Vec<F> = (0..frames)
        .map(|i| {
            let sum: f64 = (0..channels).map(|c| interleaved[i * channels + c]).sum();
            F::cast(sum / channels as f64)
        })
        .collect();

    let samples = resample_linear(&mono, spec.sample_rate, target_rate);
    for s in &samples {
        if !s.is_finite() {
            return Err(Error::Wav {
                path: path.to_path_buf(),
                message: "non-finite sample".into(),
            });
        }
    }
    Ok(Waveform::new(samples, target_rate))
}

/// Write mono 16-bit PCM.
pub fn write_waveform<F: Scalar>(path: &Path, wav: &Waveform<F>) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: wav.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| Error::Wav {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    for &s in &wav.samples {
        let v = (s.f64().clamp(-1.0, 1.0) * i16::MAX as f64) as i16;
        writer.write_sample(v).map_err(|e| Error::Wav {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
    }
    writer.finalize().map_err(|e| Error::Wav {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    Ok(())
}
