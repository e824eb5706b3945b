//! Full encoder-decoder model bound to one parameter set, plus the
//! `describe` report (parameter counts per module and the frame-rate
//! chain).

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{FrontendConfig, ModelConfig};
use crate::decoder::{Decoder, DecoderCache};
use crate::encoder::{EncodedSequence, Encoder, EncoderCache};
use crate::error::{Error, Result};
use crate::nn::Phase;
use crate::params::{GradStore, ParamSet};
use crate::ssm::scan::{kernel, ScanKernel};
use crate::tokenizer::NUM_SPECIALS;

pub struct Model {
    pub cfg: ModelConfig,
    pub num_mel_bins: usize,
    pub params: ParamSet,
    pub encoder: Encoder,
    pub decoder: Decoder,
    scan: Box<dyn ScanKernel>,
}

impl Model {
    /// Build with fresh parameters drawn from `seed`.
    pub fn new(cfg: ModelConfig, num_mel_bins: usize, seed: u64) -> Result<Model> {
        cfg.validate()?;
        if cfg.vocab_size <= NUM_SPECIALS {
            return Err(Error::config(
                "vocab_size must be set (build the vocab first)",
            ));
        }
        let scan = kernel(&cfg.scan_kernel)
            .ok_or_else(|| Error::config(format!("unknown scan kernel {:?}", cfg.scan_kernel)))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let encoder = Encoder::new(&mut params, &cfg.encoder, &cfg.ssm, num_mel_bins, &mut rng);
        let decoder = Decoder::new(&mut params, &cfg.decoder, &cfg.ssm, cfg.vocab_size, &mut rng);
        Ok(Model {
            cfg,
            num_mel_bins,
            params,
            encoder,
            decoder,
            scan,
        })
    }

    pub fn scan_kernel(&self) -> &dyn ScanKernel {
        self.scan.as_ref()
    }

    pub fn num_params(&self) -> usize {
        self.params.num_values()
    }

    /// Encode one utterance of normalized features at `feat_rate` Hz.
    pub fn encode(
        &self,
        feats: &Array2<f64>,
        feat_rate: f64,
        phase: &mut Phase,
        want_cache: bool,
    ) -> Result<(EncodedSequence, Option<EncoderCache>)> {
        self.encoder
            .forward(&self.params, feats, feat_rate, self.scan.as_ref(), phase, want_cache)
    }

    /// Teacher-forced decoder pass over BOS-prefixed tokens.
    pub fn forward_teacher_forced(
        &self,
        tokens: &[u32],
        enc: &EncodedSequence,
        phase: &mut Phase,
        want_cache: bool,
    ) -> Result<(Array2<f64>, Option<DecoderCache>)> {
        self.decoder.forward_teacher_forced(
            &self.params,
            tokens,
            &enc.frames,
            enc.frames.nrows(),
            self.scan.as_ref(),
            phase,
            want_cache,
        )
    }

    /// Backward through decoder then encoder, accumulating into `g`.
    pub fn backward(
        &self,
        enc: &EncodedSequence,
        enc_cache: &EncoderCache,
        dec_cache: &DecoderCache,
        dlogits: &Array2<f64>,
        g: &mut GradStore,
    ) {
        let denc = self
            .decoder
            .backward(&self.params, &enc.frames, dec_cache, dlogits, g);
        self.encoder.backward(&self.params, enc_cache, &denc, g);
    }
}

/// Static architecture summary: dimensions, parameter counts per module,
/// and the frame-rate chain.
#[derive(Debug, Clone)]
pub struct DescribeReport {
    pub preset: String,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub num_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub d_state: usize,
    pub d_inner: usize,
    pub vocab_size: usize,
    pub vocab_assumed: bool,
    pub groups: Vec<(String, usize)>,
    pub total_params: usize,
    pub sample_rate: u32,
    pub feat_rate: f64,
    pub encoder_rate: f64,
}

impl DescribeReport {
    pub fn group(&self, name: &str) -> usize {
        self.groups
            .iter()
            .find(|(g, _)| g == name)
            .map(|(_, n)| *n)
            .unwrap_or(0)
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("preset: {}\n", self.preset));
        s.push_str(&format!(
            "encoder: {} layers, d_model {}, d_ff {}, d_inner {}, d_state {}\n",
            self.encoder_layers, self.d_model, self.d_ff, self.d_inner, self.d_state
        ));
        s.push_str(&format!(
            "decoder: {} layers, {} cross-attention heads\n",
            self.decoder_layers, self.num_heads
        ));
        s.push_str(&format!(
            "vocab: {}{}\n",
            self.vocab_size,
            if self.vocab_assumed { " (assumed)" } else { "" }
        ));
        s.push_str(&format!(
            "frame rates: {} Hz audio -> {} feat/s -> {} enc frames/s\n",
            self.sample_rate, self.feat_rate, self.encoder_rate
        ));
        s.push_str("parameters:\n");
        for (g, n) in &self.groups {
            s.push_str(&format!("  {g}: {n}\n"));
        }
        s.push_str(&format!("  total: {}\n", self.total_params));
        s
    }
}

/// Parameter counts are a pure function of the config: building the same
/// config twice yields identical counts.
pub fn describe(
    preset: &str,
    cfg: &ModelConfig,
    frontend: &FrontendConfig,
) -> Result<DescribeReport> {
    let mut cfg = cfg.clone();
    let vocab_assumed = cfg.vocab_size == 0;
    if vocab_assumed {
        // Placeholder inventory so counts can be reported before a vocab
        // exists; specials + 26 letters + space + apostrophe + 12 digits-ish.
        cfg.vocab_size = 40;
    }
    let model = Model::new(cfg.clone(), frontend.num_mel_bins, 0)?;
    Ok(DescribeReport {
        preset: preset.to_string(),
        encoder_layers: cfg.encoder.num_layers,
        decoder_layers: cfg.decoder.num_layers,
        num_heads: cfg.decoder.num_heads,
        d_model: cfg.encoder.d_model,
        d_ff: cfg.encoder.d_ff,
        d_state: cfg.ssm.d_state,
        d_inner: cfg.d_inner(),
        vocab_size: cfg.vocab_size,
        vocab_assumed,
        groups: model.params.counts_by_group(),
        total_params: model.params.num_values(),
        sample_rate: frontend.sample_rate,
        feat_rate: frontend.frame_rate(),
        encoder_rate: frontend.frame_rate() / cfg.encoder.subsample_factor as f64,
    })
}
