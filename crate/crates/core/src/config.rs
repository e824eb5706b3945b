//! Configuration types: model architecture, frontend, training, search,
//! and the top-level run config loaded from a TOML document.
//!
//! Two architecture presets are built in (`ver1`, `ver2`), plus desk-scale
//! variants (`ver1-small`, `ver2-small`) used by the toy-corpus workflows.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Acoustic frontend parameters. Defaults give 80 log-mel bins at
/// 100 frames/s for 16 kHz input (25 ms window, 10 ms hop).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FrontendConfig {
    pub sample_rate: u32,
    pub window_ms: f64,
    pub hop_ms: f64,
    pub num_mel_bins: usize,
    pub fmin_hz: f64,
    pub fmax_hz: f64,
    pub log_floor: f64,
    /// Apply time masking during training.
    pub specaugment: bool,
    pub num_time_masks: usize,
    pub max_mask_width: usize,
    /// `"zero"` or `"mean"` (per-utterance, per-bin mean).
    pub mask_fill: String,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        FrontendConfig {
            sample_rate: 16000,
            window_ms: 25.0,
            hop_ms: 10.0,
            num_mel_bins: 80,
            fmin_hz: 0.0,
            fmax_hz: 8000.0,
            log_floor: 1e-10,
            specaugment: true,
            num_time_masks: 2,
            max_mask_width: 20,
            mask_fill: "zero".to_string(),
        }
    }
}

impl FrontendConfig {
    pub fn window_len(&self) -> usize {
        (self.sample_rate as f64 * self.window_ms / 1000.0).round() as usize
    }

    pub fn hop_len(&self) -> usize {
        (self.sample_rate as f64 * self.hop_ms / 1000.0).round() as usize
    }

    /// Output frame rate in frames per second.
    pub fn frame_rate(&self) -> f64 {
        self.sample_rate as f64 / self.hop_len() as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 {
            return Err(Error::config("sample_rate must be positive"));
        }
        if self.window_len() == 0 || self.hop_len() == 0 {
            return Err(Error::config("window/hop must be at least one sample"));
        }
        if self.num_mel_bins == 0 {
            return Err(Error::config("num_mel_bins must be positive"));
        }
        if !(self.fmax_hz > self.fmin_hz) {
            return Err(Error::config("fmax_hz must exceed fmin_hz"));
        }
        if self.mask_fill != "zero" && self.mask_fill != "mean" {
            return Err(Error::config(format!(
                "mask_fill must be \"zero\" or \"mean\", got {:?}",
                self.mask_fill
            )));
        }
        Ok(())
    }
}

/// Selective-SSM block hyperparameters shared by encoder and decoder blocks.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SsmConfig {
    /// State size N per channel.
    pub d_state: usize,
    /// d_inner = expand * d_model.
    pub expand: usize,
    /// Width of the causal depthwise conv inside each block.
    pub conv_kernel: usize,
}

impl Default for SsmConfig {
    fn default() -> Self {
        SsmConfig {
            d_state: 16,
            expand: 2,
            conv_kernel: 4,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub d_model: usize,
    pub d_ff: usize,
    /// Depthwise kernel width of the convolution module.
    pub conv_kernel: usize,
    /// Fixed at 4: two stride-2 stages, 100 Hz features -> 25 Hz frames.
    pub subsample_factor: usize,
    pub dropout: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub dropout: f64,
    /// Add sinusoidal positions to token embeddings (off by default; the
    /// recurrence already encodes order).
    pub sinusoidal_positions: bool,
    /// Tie the output projection to the token embedding.
    pub tie_embeddings: bool,
}

/// Full architecture description. `vocab_size` is resolved from the
/// training data (or the checkpoint) before the model is built.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub ssm: SsmConfig,
    pub vocab_size: usize,
    /// Scan kernel used for full-sequence passes: "parallel" or "sequential".
    pub scan_kernel: String,
}

impl ModelConfig {
    /// Named architecture preset. `ver1`/`ver2` are the full-size
    /// configurations; `ver1-small`/`ver2-small` are desk-scale variants
    /// with the same structure.
    pub fn preset(name: &str) -> Result<ModelConfig> {
        let (enc_layers, dec_layers, heads, d_model) = match name.to_ascii_lowercase().as_str() {
            "ver1" => (12, 4, 4, 256),
            "ver2" => (12, 6, 8, 256),
            "ver1-small" => (2, 2, 4, 144),
            "ver2-small" => (2, 3, 8, 144),
            other => {
                return Err(Error::config(format!(
                    "unknown preset {other:?} (expected ver1, ver2, ver1-small, ver2-small)"
                )))
            }
        };
        Ok(ModelConfig {
            encoder: EncoderConfig {
                num_layers: enc_layers,
                d_model,
                d_ff: 4 * d_model,
                conv_kernel: 31,
                subsample_factor: 4,
                dropout: 0.1,
            },
            decoder: DecoderConfig {
                num_layers: dec_layers,
                num_heads: heads,
                d_model,
                d_ff: 4 * d_model,
                dropout: 0.1,
                sinusoidal_positions: false,
                tie_embeddings: true,
            },
            ssm: SsmConfig::default(),
            vocab_size: 0,
            scan_kernel: "parallel".to_string(),
        })
    }

    pub fn d_inner(&self) -> usize {
        self.ssm.expand * self.encoder.d_model
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder.d_model != self.decoder.d_model {
            return Err(Error::config("encoder and decoder d_model must match"));
        }
        if self.encoder.num_layers == 0 || self.decoder.num_layers == 0 {
            return Err(Error::config("layer counts must be at least 1"));
        }
        if self.encoder.subsample_factor != 4 {
            return Err(Error::config("subsample_factor is fixed at 4"));
        }
        if self.decoder.d_model % self.decoder.num_heads != 0 {
            return Err(Error::config("d_model must be divisible by num_heads"));
        }
        if self.encoder.conv_kernel % 2 == 0 {
            return Err(Error::config("encoder conv_kernel must be odd"));
        }
        if self.ssm.d_state == 0 || self.ssm.expand == 0 || self.ssm.conv_kernel == 0 {
            return Err(Error::config("ssm dimensions must be positive"));
        }
        if self.vocab_size > 0 && self.vocab_size <= crate::tokenizer::NUM_SPECIALS {
            return Err(Error::config("vocab_size must exceed the special symbols"));
        }
        if self.scan_kernel != "parallel" && self.scan_kernel != "sequential" {
            return Err(Error::config(format!(
                "unknown scan kernel {:?}",
                self.scan_kernel
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub label_smoothing: f64,
    pub grad_clip_norm: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 8,
            peak_lr: 1.5e-3,
            warmup_steps: 1000,
            weight_decay: 0.01,
            label_smoothing: 0.1,
            grad_clip_norm: 5.0,
            seed: 17,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch_size must be positive"));
        }
        if !(self.peak_lr > 0.0) {
            return Err(Error::config("peak_lr must be positive"));
        }
        if self.warmup_steps == 0 {
            return Err(Error::config("warmup_steps must be positive"));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::config("label_smoothing must be in [0, 1)"));
        }
        if !(self.grad_clip_norm > 0.0) {
            return Err(Error::config("grad_clip_norm must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchParams {
    pub beam_size: usize,
    /// GNMT length-penalty exponent: score / ((5+len)/6)^alpha.
    pub length_penalty: f64,
    pub max_len: usize,
}

impl Default for SearchParams {
    fn default() -> Self {
        SearchParams {
            beam_size: 8,
            length_penalty: 0.6,
            max_len: 200,
        }
    }
}

impl SearchParams {
    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 {
            return Err(Error::config("beam_size must be at least 1"));
        }
        if self.max_len == 0 {
            return Err(Error::config("max_len must be at least 1"));
        }
        Ok(())
    }
}

/// `[model]` section of the run config: a preset name plus a few overrides.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub preset: String,
    #[serde(default)]
    pub scan_kernel: Option<String>,
    #[serde(default)]
    pub dropout: Option<f64>,
    #[serde(default)]
    pub sinusoidal_positions: Option<bool>,
    #[serde(default)]
    pub tie_embeddings: Option<bool>,
}

impl ModelSection {
    pub fn resolve(&self) -> Result<ModelConfig> {
        let mut cfg = ModelConfig::preset(&self.preset)?;
        if let Some(kernel) = &self.scan_kernel {
            cfg.scan_kernel = kernel.clone();
        }
        if let Some(p) = self.dropout {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::config("dropout must be in [0, 1)"));
            }
            cfg.encoder.dropout = p;
            cfg.decoder.dropout = p;
        }
        if let Some(s) = self.sinusoidal_positions {
            cfg.decoder.sinusoidal_positions = s;
        }
        if let Some(t) = self.tie_embeddings {
            cfg.decoder.tie_embeddings = t;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub train_manifest: String,
    pub eval_manifest: String,
}

/// Top-level run configuration, bound to a TOML document. Unknown keys are
/// rejected so a typo cannot silently fall back to a default.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    #[serde(default)]
    pub frontend: FrontendConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub search: SearchParams,
    pub data: DataSection,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::config(format!("invalid run config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.resolve()?;
        self.frontend.validate()?;
        self.train.validate()?;
        self.search.validate()?;
        Ok(())
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("run config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_match_published_layout() {
        let v1 = ModelConfig::preset("ver1").unwrap();
        assert_eq!(v1.encoder.num_layers, 12);
        assert_eq!(v1.decoder.num_layers, 4);
        assert_eq!(v1.decoder.num_heads, 4);
        let v2 = ModelConfig::preset("ver2").unwrap();
        assert_eq!(v2.decoder.num_layers, 6);
        assert_eq!(v2.decoder.num_heads, 8);
        assert_eq!(v2.encoder.num_layers, v1.encoder.num_layers);
    }

    #[test]
    fn unknown_preset_rejected() {
        assert!(ModelConfig::preset("ver3").is_err());
    }

    #[test]
    fn run_config_rejects_unknown_keys() {
        let text = r#"
[model]
preset = "ver1-small"
typo_key = 1

[data]
train_manifest = "a.tsv"
eval_manifest = "b.tsv"
"#;
        let err = RunConfig::from_toml_str(text).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn run_config_roundtrip() {
        let text = r#"
[model]
preset = "ver1-small"

[train]
epochs = 3
seed = 9

[data]
train_manifest = "train.tsv"
eval_manifest = "eval.tsv"
"#;
        let cfg = RunConfig::from_toml_str(text).unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.batch_size, 8);
        let again = RunConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(again.train.seed, 9);
    }

    #[test]
    fn frame_rate_defaults() {
        let f = FrontendConfig::default();
        assert_eq!(f.window_len(), 400);
        assert_eq!(f.hop_len(), 160);
        assert_eq!(f.frame_rate(), 100.0);
    }
}
