//! System configuration: one flat key-value structure that pins every
//! constant in the pipeline. A stable fingerprint of the config travels with
//! caches and checkpoints so mismatched artifacts are rejected instead of
//! silently combined.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SystemConfig {
    // -- waveform / spectrogram --
    pub sample_rate: u32,
    pub hop_samples: usize,
    pub window_samples: usize,
    pub mel_bands: usize,
    pub mel_fmin: f64,
    pub mel_fmax: f64,
    pub log_epsilon: f64,

    // -- pitch tracker --
    pub pitch_fmin: f64,
    pub pitch_fmax: f64,
    pub pitch_threshold: f64,
    pub default_mean_f0: f64,

    // -- prosody bin grids --
    pub pitch_bin_min: f64,
    pub pitch_bin_width: f64,
    pub pitch_bin_count: usize,
    pub pitch_bin_sigma: f64,
    pub energy_bin_min: f64,
    pub energy_bin_width: f64,
    pub energy_bin_count: usize,
    pub energy_bin_sigma: f64,

    // -- discrete units --
    pub unit_vocab_size: usize,
    pub kmeans_iters: usize,
    pub kmeans_seed: u64,

    // -- model dimensions --
    pub attr_dim: usize,
    pub embed_dim: usize,
    pub model_width: usize,
    pub kernel_size: usize,
    pub filter_blocks: usize,
    pub source_blocks: usize,
    pub energy_blocks: usize,
    pub duration_blocks: usize,
    pub pitch_energy_blocks: usize,
    pub filter_interp_block: usize,
    pub encoder_width: usize,
    pub encoder_heads: usize,
    pub encoder_external_dim: usize,
    pub disc_base_channels: usize,
    pub disc_min_frames: usize,
    pub max_duration: usize,

    // -- training --
    pub batch_size: usize,
    pub max_steps: u64,
    pub checkpoint_interval: u64,
    pub lr_gen: f64,
    pub lr_disc: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub grad_clip: f64,
    pub train_seed: u64,
    pub joint_optimization: bool,
    pub mix_coefficient: f64,
    pub weight_recon_l1: f64,
    pub weight_adv: f64,
    pub weight_voicing_bce: f64,
    pub weight_duration_mse: f64,
    pub weight_pitch_bin_bce: f64,
    pub weight_energy_bin_bce: f64,
    pub weight_pitch_consistency: f64,
    pub weight_energy_consistency: f64,

    // -- inference --
    pub voicing_threshold: f64,
    pub griffin_lim_iters: usize,
    pub inference_seed: u64,

    // -- external adapter seams (empty string = internal fallback) --
    pub pitch_adapter_cmd: String,
    pub unit_adapter_dir: String,
    pub vocoder_adapter_cmd: String,
}

impl Default for SystemConfig {
    fn default() -> Self {
        SystemConfig {
            sample_rate: 16_000,
            hop_samples: 320,
            window_samples: 1024,
            mel_bands: 80,
            mel_fmin: 0.0,
            mel_fmax: 8000.0,
            log_epsilon: 1e-5,

            pitch_fmin: 60.0,
            pitch_fmax: 400.0,
            pitch_threshold: 0.3,
            default_mean_f0: 120.0,

            pitch_bin_min: -250.0,
            pitch_bin_width: 2.5,
            pitch_bin_count: 200,
            pitch_bin_sigma: 4.0,
            energy_bin_min: 0.0,
            energy_bin_width: 1.0,
            energy_bin_count: 200,
            energy_bin_sigma: 4.0,

            unit_vocab_size: 200,
            kmeans_iters: 50,
            kmeans_seed: 42,

            attr_dim: 128,
            embed_dim: 128,
            model_width: 256,
            kernel_size: 5,
            filter_blocks: 16,
            source_blocks: 16,
            energy_blocks: 4,
            duration_blocks: 2,
            pitch_energy_blocks: 6,
            filter_interp_block: 8,
            encoder_width: 256,
            encoder_heads: 4,
            encoder_external_dim: 0,
            disc_base_channels: 16,
            disc_min_frames: 16,
            max_duration: 100,

            batch_size: 4,
            max_steps: 1000,
            checkpoint_interval: 200,
            lr_gen: 2e-4,
            lr_disc: 2e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: 5.0,
            train_seed: 1234,
            joint_optimization: true,
            mix_coefficient: 0.5,
            weight_recon_l1: 1.0,
            weight_adv: 0.1,
            weight_voicing_bce: 1.0,
            weight_duration_mse: 1.0,
            weight_pitch_bin_bce: 1.0,
            weight_energy_bin_bce: 1.0,
            weight_pitch_consistency: 1.0,
            weight_energy_consistency: 1.0,

            voicing_threshold: 0.5,
            griffin_lim_iters: 60,
            inference_seed: 7,

            pitch_adapter_cmd: String::new(),
            unit_adapter_dir: String::new(),
            vocoder_adapter_cmd: String::new(),
        }
    }
}

/// Keys whose change invalidates extracted feature caches. Training
/// hyper-parameters are deliberately excluded: re-tuning a learning rate must
/// not force re-extraction of a corpus.
const FEATURE_KEYS: &[&str] = &[
    "sample_rate",
    "hop_samples",
    "window_samples",
    "mel_bands",
    "mel_fmin",
    "mel_fmax",
    "log_epsilon",
    "pitch_fmin",
    "pitch_fmax",
    "pitch_threshold",
    "default_mean_f0",
    "unit_vocab_size",
    "kmeans_iters",
    "kmeans_seed",
    "pitch_adapter_cmd",
    "unit_adapter_dir",
];

impl SystemConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: SystemConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.hop_samples == 0 || self.window_samples < self.hop_samples {
            return Err(Error::Config("window must be >= hop > 0".into()));
        }
        if self.pitch_bin_count < 2 || self.energy_bin_count < 2 {
            return Err(Error::Config("bin counts must be >= 2".into()));
        }
        if self.pitch_bin_width <= 0.0 || self.energy_bin_width <= 0.0 {
            return Err(Error::Config("bin widths must be positive".into()));
        }
        if self.pitch_bin_sigma <= 0.0 || self.energy_bin_sigma <= 0.0 {
            return Err(Error::Config("bin sigmas must be positive".into()));
        }
        if self.unit_vocab_size < 2 {
            return Err(Error::Config("unit vocabulary size must be >= 2".into()));
        }
        if self.filter_interp_block == 0 || self.filter_interp_block > self.filter_blocks {
            return Err(Error::Config(
                "filter_interp_block must be in 1..=filter_blocks".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.mix_coefficient) {
            return Err(Error::Config("mix_coefficient must be in [0, 1]".into()));
        }
        for (name, w) in [
            ("weight_recon_l1", self.weight_recon_l1),
            ("weight_adv", self.weight_adv),
            ("weight_voicing_bce", self.weight_voicing_bce),
            ("weight_duration_mse", self.weight_duration_mse),
            ("weight_pitch_bin_bce", self.weight_pitch_bin_bce),
            ("weight_energy_bin_bce", self.weight_energy_bin_bce),
            ("weight_pitch_consistency", self.weight_pitch_consistency),
            ("weight_energy_consistency", self.weight_energy_consistency),
        ] {
            if w < 0.0 {
                return Err(Error::Config(format!("{name} must be >= 0")));
            }
        }
        if self.encoder_width % self.encoder_heads != 0 {
            return Err(Error::Config(
                "encoder_width must be divisible by encoder_heads".into(),
            ));
        }
        Ok(())
    }

    fn key_value_pairs(&self) -> Vec<(String, String)> {
        let value = serde_json::to_value(self).expect("config serializes");
        let map = value.as_object().expect("config is a flat object");
        map.iter().map(|(k, v)| (k.clone(), v.to_string())).collect()
    }

    fn hash_pairs(pairs: &[(String, String)]) -> String {
        let mut sorted: Vec<&(String, String)> = pairs.iter().collect();
        sorted.sort_by(|a, b| a.0.cmp(&b.0));
        let mut hasher = Sha256::new();
        for (k, v) in sorted {
            hasher.update(k.as_bytes());
            hasher.update(b"=");
            hasher.update(v.as_bytes());
            hasher.update(b"\n");
        }
        let digest = hasher.finalize();
        digest[..16].iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Stable hash over every field. Embedded in checkpoints.
    pub fn fingerprint(&self) -> String {
        Self::hash_pairs(&self.key_value_pairs())
    }

    /// Stable hash over the fields that determine extracted features.
    /// Embedded in feature-cache records.
    pub fn feature_fingerprint(&self) -> String {
        let pairs: Vec<(String, String)> = self
            .key_value_pairs()
            .into_iter()
            .filter(|(k, _)| FEATURE_KEYS.contains(&k.as_str()))
            .collect();
        Self::hash_pairs(&pairs)
    }

    pub fn hop_seconds(&self) -> f64 {
        self.hop_samples as f64 / self.sample_rate as f64
    }

    /// Commented TOML of every key at its current value.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        let value = serde_json::to_value(self).expect("config serializes");
        let map = value.as_object().expect("flat object");
        for (key, v) in map {
            if let Some(doc) = key_doc(key) {
                out.push_str(&format!("# {doc}\n"));
            }
            let rendered = match v {
                serde_json::Value::String(s) => format!("{key} = {:?}\n", s),
                other => format!("{key} = {other}\n"),
            };
            out.push_str(&rendered);
        }
        out
    }
}

fn key_doc(key: &str) -> Option<&'static str> {
    Some(match key {
        "sample_rate" => "system sample rate in Hz; inputs are resampled to this",
        "hop_samples" => "analysis hop in samples (20 ms at 16 kHz aligns mel and unit frames)",
        "window_samples" => "analysis window length in samples",
        "mel_bands" => "number of mel bands d_x",
        "mel_fmin" => "mel filterbank lower edge in Hz",
        "mel_fmax" => "mel filterbank upper edge in Hz",
        "log_epsilon" => "epsilon added before the log compression of mel power",
        "pitch_fmin" => "lowest trackable f0 in Hz",
        "pitch_fmax" => "highest trackable f0 in Hz",
        "pitch_threshold" => "normalized-autocorrelation periodicity threshold for voicing",
        "default_mean_f0" => "mean f0 assumed for fully unvoiced utterances",
        "pitch_bin_min" => "minimum of the pitch bin grid (mean-normalized Hz)",
        "pitch_bin_width" => "pitch bin width",
        "pitch_bin_count" => "number of pitch bins",
        "pitch_bin_sigma" => "Gaussian blur sigma for pitch bin weights",
        "energy_bin_min" => "minimum of the energy bin grid",
        "energy_bin_width" => "energy bin width",
        "energy_bin_count" => "number of energy bins",
        "energy_bin_sigma" => "Gaussian blur sigma for energy bin weights",
        "unit_vocab_size" => "number of discrete speech units",
        "kmeans_iters" => "maximum Lloyd iterations when fitting the unit vocabulary",
        "kmeans_seed" => "seed for k-means++ initialization",
        "attr_dim" => "dimension d_a of attribute vectors",
        "embed_dim" => "dimension d_e of unit and bin embeddings",
        "model_width" => "channel width of residual stacks",
        "kernel_size" => "1-d convolution kernel size inside residual blocks",
        "filter_blocks" => "residual blocks in the filter network",
        "source_blocks" => "residual blocks in the source network",
        "energy_blocks" => "residual blocks in the energy network",
        "duration_blocks" => "residual blocks in the duration network",
        "pitch_energy_blocks" => "residual blocks in the pitch-energy network",
        "filter_interp_block" => "block after which the filter network interpolates to mel length",
        "encoder_width" => "channel width of the attribute-encoder backbone",
        "encoder_heads" => "attention heads in the attribute-encoder backbone",
        "encoder_external_dim" => "dimension of externally supplied backbone features (0 = internal backbone)",
        "disc_base_channels" => "base channel count of the discriminator",
        "disc_min_frames" => "minimum mel frames accepted by the discriminator",
        "max_duration" => "clamp ceiling for decoded unit durations in frames",
        "batch_size" => "utterances per training step",
        "max_steps" => "total training steps",
        "checkpoint_interval" => "steps between checkpoints",
        "lr_gen" => "generator-side learning rate",
        "lr_disc" => "discriminator learning rate",
        "adam_beta1" => "Adam beta1",
        "adam_beta2" => "Adam beta2",
        "adam_eps" => "Adam epsilon",
        "grad_clip" => "global gradient-norm clip per side",
        "train_seed" => "seed for parameter init and data order",
        "joint_optimization" => "mix predicted bin weights into the synthesizer and add consistency losses",
        "mix_coefficient" => "ground-truth share when mixing bin weights (0.5 = even)",
        "weight_recon_l1" => "weight of the mel reconstruction L1 loss",
        "weight_adv" => "weight of the adversarial loss on the generator side",
        "weight_voicing_bce" => "weight of the voicing BCE loss",
        "weight_duration_mse" => "weight of the log-duration MSE loss",
        "weight_pitch_bin_bce" => "weight of the pitch bin-weight BCE loss",
        "weight_energy_bin_bce" => "weight of the energy bin-weight BCE loss",
        "weight_pitch_consistency" => "weight of the encoded-pitch consistency MSE",
        "weight_energy_consistency" => "weight of the encoded-energy consistency MSE",
        "voicing_threshold" => "sigmoid cut for the predicted voicing decision",
        "griffin_lim_iters" => "iterations of the fallback phase-reconstruction inversion",
        "inference_seed" => "seed for inference-side randomness",
        "pitch_adapter_cmd" => "external pitch estimator command (empty = internal tracker)",
        "unit_adapter_dir" => "directory of externally computed unit records (empty = internal quantizer)",
        "vocoder_adapter_cmd" => "external vocoder command (empty = internal inversion)",
        _ => return None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fingerprint_is_stable_and_sensitive() {
        let a = SystemConfig::default();
        let b = SystemConfig::default();
        assert_eq!(a.fingerprint(), b.fingerprint());
        let mut c = SystemConfig::default();
        c.attr_dim = 64;
        assert_ne!(a.fingerprint(), c.fingerprint());
    }

    #[test]
    fn feature_fingerprint_ignores_training_keys() {
        let a = SystemConfig::default();
        let mut b = SystemConfig::default();
        b.lr_gen = 1e-3;
        b.batch_size = 2;
        assert_eq!(a.feature_fingerprint(), b.feature_fingerprint());
        assert_ne!(a.fingerprint(), b.fingerprint());
        let mut c = SystemConfig::default();
        c.hop_samples = 160;
        assert_ne!(a.feature_fingerprint(), c.feature_fingerprint());
    }

    #[test]
    fn dump_round_trips_through_toml() {
        let cfg = SystemConfig::default();
        let text = cfg.dump();
        let parsed = SystemConfig::from_toml_str(&text).unwrap();
        assert_eq!(cfg, parsed);
        assert_eq!(cfg.fingerprint(), parsed.fingerprint());
    }

    #[test]
    fn dump_documents_every_key() {
        let value = serde_json::to_value(SystemConfig::default()).unwrap();
        for key in value.as_object().unwrap().keys() {
            assert!(key_doc(key).is_some(), "missing doc for config key {key}");
        }
    }

    #[test]
    fn defaults_match_stated_constants() {
        let cfg = SystemConfig::default();
        assert_eq!(cfg.pitch_bin_count, 200);
        assert_eq!(cfg.pitch_bin_width, 2.5);
        assert_eq!(cfg.pitch_bin_min, -250.0);
        assert_eq!(cfg.pitch_bin_sigma, 4.0);
        assert_eq!(cfg.energy_bin_min, 0.0);
        assert_eq!(cfg.energy_bin_width, 1.0);
        assert_eq!(cfg.unit_vocab_size, 200);
        assert_eq!(
            (
                cfg.filter_blocks,
                cfg.source_blocks,
                cfg.energy_blocks,
                cfg.duration_blocks,
                cfg.pitch_energy_blocks
            ),
            (16, 16, 4, 2, 6)
        );
    }

    #[test]
    fn partial_toml_uses_defaults() {
        let cfg = SystemConfig::from_toml_str("model_width = 64\n").unwrap();
        assert_eq!(cfg.model_width, 64);
        assert_eq!(cfg.sample_rate, 16_000);
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(SystemConfig::from_toml_str("mix_coefficient = 1.5\n").is_err());
        assert!(SystemConfig::from_toml_str("pitch_bin_count = 1\n").is_err());
        assert!(SystemConfig::from_toml_str("weight_adv = -1.0\n").is_err());
    }
}
