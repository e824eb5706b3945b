//! Decoding strategies behind a common trait, selected by name.
//!
//! A [`StepModel`] is anything that can consume one token and return
//! log-probabilities over the next: the real model bound to one encoded
//! utterance, or a hand-specified table model in tests. Strategies are
//! registered by name (`greedy`, `beam`) and picked at runtime from the
//! CLI / config.

pub mod beam;
pub mod greedy;

use std::any::Any;

use crate::config::SearchParams;
use crate::decoder::DecoderState;
use crate::encoder::EncodedSequence;
use crate::error::Result;
use crate::model::Model;
use crate::tokenizer::{BOS, EOS};

/// Opaque, clonable decoding state owned by one hypothesis.
pub trait DecodeState: Send {
    fn clone_box(&self) -> Box<dyn DecodeState>;
    fn as_any(&self) -> &dyn Any;
}

impl Clone for Box<dyn DecodeState> {
    fn clone(&self) -> Self {
        self.clone_box()
    }
}

impl DecodeState for DecoderState {
    fn clone_box(&self) -> Box<dyn DecodeState> {
        Box::new(self.clone())
    }
    fn as_any(&self) -> &dyn Any {
        self
    }
}

/// One-token-at-a-time interface the searches run against.
pub trait StepModel {
    fn vocab_size(&self) -> usize;
    fn bos_id(&self) -> u32;
    fn eos_id(&self) -> u32;
    fn init_state(&self) -> Box<dyn DecodeState>;
    /// Consume `token` in `state`, returning normalized log-probabilities
    /// over the next token and the advanced state.
    fn step(&self, state: &dyn DecodeState, token: u32) -> Result<(Vec<f64>, Box<dyn DecodeState>)>;
}

/// A partial or complete decode. `tokens` is BOS-prefixed; a finished
/// hypothesis ends with EOS. `log_prob` is the accumulated natural-log
/// probability of the generated tokens.
pub struct Hypothesis {
    pub tokens: Vec<u32>,
    pub log_prob: f64,
    pub finished: bool,
    /// Set when the search hit max_len with nothing finished.
    pub truncated: bool,
    pub state: Option<Box<dyn DecodeState>>,
}

impl Clone for Hypothesis {
    fn clone(&self) -> Self {
        Hypothesis {
            tokens: self.tokens.clone(),
            log_prob: self.log_prob,
            finished: self.finished,
            truncated: self.truncated,
            state: self.state.clone(),
        }
    }
}

impl std::fmt::Debug for Hypothesis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Hypothesis")
            .field("tokens", &self.tokens)
            .field("log_prob", &self.log_prob)
            .field("finished", &self.finished)
            .field("truncated", &self.truncated)
            .finish()
    }
}

impl Hypothesis {
    /// Generated length (excluding the BOS prefix).
    pub fn gen_len(&self) -> usize {
        self.tokens.len().saturating_sub(1)
    }

    /// GNMT-style length-normalized score: log_prob / ((5+len)/6)^alpha.
    pub fn normalized_score(&self, alpha: f64) -> f64 {
        let len = self.gen_len().max(1) as f64;
        self.log_prob / ((5.0 + len) / 6.0).powf(alpha)
    }
}

/// Search strategy registry.
pub trait SearchStrategy: Send + Sync {
    fn name(&self) -> &'static str;
    /// Run the search; hypotheses come back sorted best-first.
    fn search(&self, model: &dyn StepModel, params: &SearchParams) -> Result<Vec<Hypothesis>>;
}

pub fn strategy(name: &str) -> Option<Box<dyn SearchStrategy>> {
    match name {
        "greedy" => Some(Box::new(greedy::Greedy)),
        "beam" => Some(Box::new(beam::Beam)),
        _ => None,
    }
}

pub fn strategy_names() -> &'static [&'static str] {
    &["greedy", "beam"]
}

/// The real model bound to one encoded utterance.
pub struct ModelSession<'a> {
    model: &'a Model,
    enc: &'a EncodedSequence,
}

impl<'a> ModelSession<'a> {
    pub fn new(model: &'a Model, enc: &'a EncodedSequence) -> ModelSession<'a> {
        ModelSession { model, enc }
    }
}

impl StepModel for ModelSession<'_> {
    fn vocab_size(&self) -> usize {
        self.model.cfg.vocab_size
    }

    fn bos_id(&self) -> u32 {
        BOS
    }

    fn eos_id(&self) -> u32 {
        EOS
    }

    fn init_state(&self) -> Box<dyn DecodeState> {
        Box::new(self.model.decoder.init_state(
            &self.model.params,
            &self.enc.frames,
            self.enc.frames.nrows(),
        ))
    }

    fn step(&self, state: &dyn DecodeState, token: u32) -> Result<(Vec<f64>, Box<dyn DecodeState>)> {
        let st = state
            .as_any()
            .downcast_ref::<DecoderState>()
            .expect("state belongs to this session");
        let mut next = st.clone();
        let logits = self
            .model
            .decoder
            .decode_step(&self.model.params, &mut next, token)?;
        Ok((log_probs(&logits), Box::new(next)))
    }
}

/// Normalize raw logits into log-probabilities.
pub fn log_probs(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    logits.iter().map(|v| v - lse).collect()
}

/// Argmax with ties broken by the lowest token id.
pub fn argmax_token(log_probs: &[f64]) -> u32 {
    let mut best = 0usize;
    for (i, &v) in log_probs.iter().enumerate().skip(1) {
        if v > log_probs[best] {
            best = i;
        }
    }
    best as u32
}
