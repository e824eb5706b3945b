//! Unidirectional Mamba decoder with multi-head cross-attention over the
//! encoder output. Each layer is pre-norm and residual:
//!
//! ```text
//! y + uniMamba(LN(y)) -> + crossAttn(LN(.), enc) -> + FFN(LN(.))
//! ```
//!
//! followed by one final LayerNorm before the output projection. The
//! output projection is tied to the token embedding unless configured
//! otherwise. [`DecoderState`] makes the same stack consumable one token
//! at a time for autoregressive decoding.

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

use crate::config::{DecoderConfig, SsmConfig};
use crate::error::{Error, Result};
use crate::nn::attention::{AttentionCache, CrossAttention, KvCache};
use crate::nn::embedding::{sinusoidal_positions, Embedding};
use crate::nn::ffn::{Ffn, FfnCache};
use crate::nn::linear::Linear;
use crate::nn::norm::{LayerNorm, LayerNormCache};
use crate::nn::{apply_mask, Phase};
use crate::params::{GradStore, ParamSet};
use crate::ssm::block::{MambaBlock, MambaBlockCache, ScanState};
use crate::ssm::block::Direction;
use crate::ssm::scan::{ScanKernel, SequentialScan};

struct DecoderLayer {
    ln_mamba: LayerNorm,
    mamba: MambaBlock,
    ln_attn: LayerNorm,
    attn: CrossAttention,
    ln_ffn: LayerNorm,
    ffn: Ffn,
    dropout: f64,
}

struct DecoderLayerCache {
    ln_m: LayerNormCache,
    mamba: MambaBlockCache,
    m_mamba: Option<Array2<f64>>,
    ln_a: LayerNormCache,
    ln_a_out: Array2<f64>,
    attn: AttentionCache,
    m_attn: Option<Array2<f64>>,
    ln_f: LayerNormCache,
    ffn: FfnCache,
    m_ffn: Option<Array2<f64>>,
}

impl DecoderLayer {
    fn new(
        ps: &mut ParamSet,
        name: &str,
        cfg: &DecoderConfig,
        ssm: &SsmConfig,
        rng: &mut ChaCha8Rng,
    ) -> DecoderLayer {
        let d = cfg.d_model;
        DecoderLayer {
            ln_mamba: LayerNorm::new(ps, &format!("{name}.ln_mamba"), d),
            mamba: MambaBlock::new(
                ps,
                &format!("{name}.mamba"),
                d,
                ssm.expand * d,
                ssm.d_state,
                ssm.conv_kernel,
                rng,
            ),
            ln_attn: LayerNorm::new(ps, &format!("{name}.ln_attn"), d),
            attn: CrossAttention::new(ps, &format!("{name}.attn"), d, cfg.num_heads, rng),
            ln_ffn: LayerNorm::new(ps, &format!("{name}.ln_ffn"), d),
            ffn: Ffn::new(ps, &format!("{name}.ffn"), d, cfg.d_ff, rng),
            dropout: cfg.dropout,
        }
    }

    fn forward(
        &self,
        ps: &ParamSet,
        x0: &Array2<f64>,
        enc: &Array2<f64>,
        enc_len: usize,
        kernel: &dyn ScanKernel,
        phase: &mut Phase,
        want_cache: bool,
    ) -> Result<(Array2<f64>, Option<DecoderLayerCache>)> {
        let (t_len, d) = x0.dim();
        let (ln_m_out, ln_m) = self.ln_mamba.forward(ps, x0);
        let (mut ym, mamba_cache) =
            self.mamba
                .forward(ps, &ln_m_out, Direction::Forward, kernel, want_cache)?;
        let m_mamba = phase.dropout_mask(self.dropout, t_len, d);
        apply_mask(&mut ym, &m_mamba);
        let x1 = x0 + &ym;

        let (ln_a_out, ln_a) = self.ln_attn.forward(ps, &x1);
        let (mut ya, attn_cache) = self.attn.forward(ps, &ln_a_out, enc, enc_len)?;
        let m_attn = phase.dropout_mask(self.dropout, t_len, d);
        apply_mask(&mut ya, &m_attn);
        let x2 = &x1 + &ya;

        let (ln_f_out, ln_f) = self.ln_ffn.forward(ps, &x2);
        let (mut yf, ffn_cache) = self.ffn.forward(ps, &ln_f_out, self.dropout, phase);
        let m_ffn = phase.dropout_mask(self.dropout, t_len, d);
        apply_mask(&mut yf, &m_ffn);
        let y = &x2 + &yf;

        let cache = want_cache.then(|| DecoderLayerCache {
            ln_m,
            mamba: mamba_cache.unwrap(),
            m_mamba,
            ln_a,
            ln_a_out,
            attn: attn_cache,
            m_attn,
            ln_f,
            ffn: ffn_cache,
            m_ffn,
        });
        Ok((y, cache))
    }

    /// Returns (dx0, denc).
    fn backward(
        &self,
        ps: &ParamSet,
        enc: &Array2<f64>,
        cache: &DecoderLayerCache,
        dy: &Array2<f64>,
        g: &mut GradStore,
    ) -> (Array2<f64>, Array2<f64>) {
        // FFN sublayer.
        let mut dyf = dy.clone();
        apply_mask(&mut dyf, &cache.m_ffn);
        let dln_f = self.ffn.backward(ps, &cache.ffn, &dyf, g);
        let mut dx2 = dy.clone();
        dx2 += &self.ln_ffn.backward(ps, &cache.ln_f, &dln_f, g);

        // Cross-attention sublayer.
        let mut dya = dx2.clone();
        apply_mask(&mut dya, &cache.m_attn);
        let (dln_a, denc) = self
            .attn
            .backward(ps, &cache.ln_a_out, enc, &cache.attn, &dya, g);
        let mut dx1 = dx2;
        dx1 += &self.ln_attn.backward(ps, &cache.ln_a, &dln_a, g);

        // Mamba sublayer.
        let mut dym = dx1.clone();
        apply_mask(&mut dym, &cache.m_mamba);
        let dln_m = self.mamba.backward(ps, &cache.mamba, &dym, g);
        let mut dx0 = dx1;
        dx0 += &self.ln_mamba.backward(ps, &cache.ln_m, &dln_m, g);
        (dx0, denc)
    }
}

pub struct Decoder {
    pub embed: Embedding,
    layers: Vec<DecoderLayer>,
    ln_final: LayerNorm,
    /// Present only when embeddings are untied.
    out_proj: Option<Linear>,
    pub cfg: DecoderConfig,
    ssm: SsmConfig,
}

pub struct DecoderCache {
    tokens: Vec<u32>,
    layer_caches: Vec<DecoderLayerCache>,
    ln_fin: LayerNormCache,
    h_final: Array2<f64>,
}

/// Carried decoding state: one scan state per layer plus the fixed
/// encoder projections, and the number of tokens consumed so far. The
/// projections are shared: cloning a state (one clone per live search
/// hypothesis) copies only the per-layer scan states.
#[derive(Clone)]
pub struct DecoderState {
    layer_states: Vec<ScanState>,
    kv: std::sync::Arc<Vec<KvCache>>,
    pub pos: usize,
}

impl Decoder {
    pub fn new(
        ps: &mut ParamSet,
        cfg: &DecoderConfig,
        ssm: &SsmConfig,
        vocab_size: usize,
        rng: &mut ChaCha8Rng,
    ) -> Decoder {
        let embed = Embedding::new(ps, "decoder.embed", vocab_size, cfg.d_model, rng);
        let layers = (0..cfg.num_layers)
            .map(|i| DecoderLayer::new(ps, &format!("decoder.layer{i}"), cfg, ssm, rng))
            .collect();
        let ln_final = LayerNorm::new(ps, "decoder.ln_final", cfg.d_model);
        let out_proj = (!cfg.tie_embeddings).then(|| {
            Linear::new(ps, "decoder.out_proj", cfg.d_model, vocab_size, true, rng)
        });
        Decoder {
            embed,
            layers,
            ln_final,
            out_proj,
            cfg: cfg.clone(),
            ssm: ssm.clone(),
        }
    }

    fn validate_tokens(&self, tokens: &[u32]) -> Result<()> {
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= self.embed.vocab) {
            return Err(Error::data(format!("token id {bad} out of vocab")));
        }
        Ok(())
    }

    fn embed_tokens(&self, ps: &ParamSet, tokens: &[u32], pos0: usize) -> Array2<f64> {
        let mut emb = self.embed.forward(ps, tokens);
        if self.cfg.sinusoidal_positions {
            emb += &sinusoidal_positions(pos0, tokens.len(), self.cfg.d_model);
        }
        emb
    }

    fn project_out(&self, ps: &ParamSet, h: &Array2<f64>) -> Array2<f64> {
        match &self.out_proj {
            Some(lin) => lin.forward(ps, h),
            None => self.embed.logits(ps, h),
        }
    }

    /// Teacher-forced pass over a BOS-prefixed token sequence; logits row
    /// t is the distribution over token t+1.
    pub fn forward_teacher_forced(
        &self,
        ps: &ParamSet,
        tokens: &[u32],
        enc: &Array2<f64>,
        enc_len: usize,
        kernel: &dyn ScanKernel,
        phase: &mut Phase,
        want_cache: bool,
    ) -> Result<(Array2<f64>, Option<DecoderCache>)> {
        self.validate_tokens(tokens)?;
        let mut x = self.embed_tokens(ps, tokens, 0);
        let mut layer_caches = Vec::new();
        for layer in &self.layers {
            let (y, c) = layer.forward(ps, &x, enc, enc_len, kernel, phase, want_cache)?;
            if let Some(c) = c {
                layer_caches.push(c);
            }
            x = y;
        }
        let (h_final, ln_fin) = self.ln_final.forward(ps, &x);
        let logits = self.project_out(ps, &h_final);
        let cache = want_cache.then(|| DecoderCache {
            tokens: tokens.to_vec(),
            layer_caches,
            ln_fin,
            h_final,
        });
        Ok((logits, cache))
    }

    /// Backward from dlogits; accumulates parameter grads and returns the
    /// gradient w.r.t. the encoder frames.
    pub fn backward(
        &self,
        ps: &ParamSet,
        enc: &Array2<f64>,
        cache: &DecoderCache,
        dlogits: &Array2<f64>,
        g: &mut GradStore,
    ) -> Array2<f64> {
        let dh = match &self.out_proj {
            Some(lin) => lin.backward(ps, &cache.h_final, dlogits, g),
            None => self.embed.logits_backward(ps, &cache.h_final, dlogits, g),
        };
        let mut dx = self.ln_final.backward(ps, &cache.ln_fin, &dh, g);
        let mut denc_total = Array2::zeros(enc.raw_dim());
        for (layer, lcache) in self.layers.iter().zip(&cache.layer_caches).rev() {
            let (dx0, denc) = layer.backward(ps, enc, lcache, &dx, g);
            dx = dx0;
            denc_total += &denc;
        }
        // dx is now the gradient at the embedding output.
        self.embed.backward(ps, &cache.tokens, &dx, g);
        denc_total
    }

    /// Fresh state for decoding against a fixed encoder output.
    pub fn init_state(&self, ps: &ParamSet, enc: &Array2<f64>, enc_len: usize) -> DecoderState {
        let d_inner = self.ssm.expand * self.cfg.d_model;
        DecoderState {
            layer_states: (0..self.layers.len())
                .map(|_| ScanState::zeros(d_inner, self.ssm.d_state, self.ssm.conv_kernel))
                .collect(),
            kv: std::sync::Arc::new(
                self.layers
                    .iter()
                    .map(|l| l.attn.precompute_kv(ps, enc, enc_len))
                    .collect(),
            ),
            pos: 0,
        }
    }

    /// Consume one token, returning the logits over the next token.
    pub fn decode_step(
        &self,
        ps: &ParamSet,
        state: &mut DecoderState,
        token: u32,
    ) -> Result<Vec<f64>> {
        self.validate_tokens(&[token])?;
        let mut x = self.embed_tokens(ps, &[token], state.pos);
        let kv_shared = state.kv.clone();
        for (layer, (st, kv)) in self
            .layers
            .iter()
            .zip(state.layer_states.iter_mut().zip(kv_shared.iter()))
        {
            let (ln_m_out, _) = layer.ln_mamba.forward(ps, &x);
            let ym = layer.mamba.step(ps, &ln_m_out, st)?;
            let x1 = &x + &ym;
            let (ln_a_out, _) = layer.ln_attn.forward(ps, &x1);
            let ya = layer.attn.forward_with_kv(ps, &ln_a_out, kv);
            let x2 = &x1 + &ya;
            let (ln_f_out, _) = layer.ln_ffn.forward(ps, &x2);
            let (yf, _) = layer.ffn.forward(ps, &ln_f_out, 0.0, &mut Phase::Eval);
            x = &x2 + &yf;
        }
        let (h, _) = self.ln_final.forward(ps, &x);
        let logits = self.project_out(ps, &h);
        state.pos += 1;
        Ok(logits.row(0).to_vec())
    }
}

impl DecoderState {
    /// Serialize to bytes (little-endian f64 payloads) so a decoding
    /// session can be suspended and resumed exactly.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let push_arr = |out: &mut Vec<u8>, a: &Array2<f64>| {
            out.extend_from_slice(&(a.nrows() as u64).to_le_bytes());
            out.extend_from_slice(&(a.ncols() as u64).to_le_bytes());
            for v in a.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        };
        out.extend_from_slice(&(self.layer_states.len() as u64).to_le_bytes());
        out.extend_from_slice(&(self.pos as u64).to_le_bytes());
        for (st, kv) in self.layer_states.iter().zip(self.kv.iter()) {
            push_arr(&mut out, &st.h);
            push_arr(&mut out, &st.conv_cache);
            push_arr(&mut out, &kv.k);
            push_arr(&mut out, &kv.v);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<DecoderState> {
        let mut pos = 0usize;
        let take_u64 = |pos: &mut usize| -> Result<u64> {
            if *pos + 8 > bytes.len() {
                return Err(Error::data("truncated decoder state"));
            }
            let v = u64::from_le_bytes(bytes[*pos..*pos + 8].try_into().unwrap());
            *pos += 8;
            Ok(v)
        };
        let n_layers = take_u64(&mut pos)? as usize;
        let token_pos = take_u64(&mut pos)? as usize;
        let read_arr = |pos: &mut usize| -> Result<Array2<f64>> {
            let rows = {
                if *pos + 16 > bytes.len() {
                    return Err(Error::data("truncated decoder state"));
                }
                let r = u64::from_le_bytes(bytes[*pos..*pos + 8].try_into().unwrap()) as usize;
                *pos += 8;
                r
            };
            let cols = {
                let c = u64::from_le_bytes(bytes[*pos..*pos + 8].try_into().unwrap()) as usize;
                *pos += 8;
                c
            };
            let need = rows * cols * 8;
            if *pos + need > bytes.len() {
                return Err(Error::data("truncated decoder state"));
            }
            let mut data = Vec::with_capacity(rows * cols);
            for chunk in bytes[*pos..*pos + need].chunks_exact(8) {
                data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
            }
            *pos += need;
            Array2::from_shape_vec((rows, cols), data)
                .map_err(|_| Error::data("bad decoder state shape"))
        };
        let mut layer_states = Vec::with_capacity(n_layers);
        let mut kv = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let h = read_arr(&mut pos)?;
            let conv_cache = read_arr(&mut pos)?;
            let k = read_arr(&mut pos)?;
            let v = read_arr(&mut pos)?;
            layer_states.push(ScanState { h, conv_cache });
            kv.push(KvCache::from_parts(k, v));
        }
        Ok(DecoderState {
            layer_states,
            kv: std::sync::Arc::new(kv),
            pos: token_pos,
        })
    }
}

/// Sequential kernel instance for decode paths.
pub fn decode_kernel() -> SequentialScan {
    SequentialScan
}
