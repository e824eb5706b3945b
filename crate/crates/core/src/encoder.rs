//! ConMamba encoder: two stride-2 conv stages take 100 Hz features to
//! 25 frames/s, then a stack of Conformer-style layers whose attention
//! slot is a bidirectional Mamba block (sum of two independently
//! parameterized directional blocks).
//!
//! Layer layout (Macaron, pre-norm, all residual):
//!
//! ```text
//! x + 1/2 FFN(LN(x)) -> + biMamba(LN(.)) -> + ConvModule(LN(.))
//!   -> + 1/2 FFN(LN(.)) -> final LN
//! ```
//!
//! ConvModule = pointwise(d -> 2d) -> GLU -> depthwise(conv_kernel)
//! -> LayerNorm -> SiLU -> pointwise(d -> d).

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

use crate::config::{EncoderConfig, SsmConfig};
use crate::error::{Error, Result};
use crate::nn::conv::{subsample_len, SameDepthwiseConv, StridedConv1d};
use crate::nn::ffn::{Ffn, FfnCache};
use crate::nn::linear::Linear;
use crate::nn::norm::{LayerNorm, LayerNormCache};
use crate::nn::{apply_mask, sigmoid, silu, silu_grad, Phase};
use crate::params::{GradStore, ParamSet};
use crate::ssm::block::{Direction, MambaBlock, MambaBlockCache};
use crate::ssm::scan::ScanKernel;

/// Encoder output for one utterance.
#[derive(Debug, Clone)]
pub struct EncodedSequence {
    /// `[T', d_model]`.
    pub frames: Array2<f64>,
    /// Frames per second after subsampling.
    pub frame_rate: f64,
}

/// Output frame count for an input of `t` feature frames: two stride-2
/// stages, each mapping T -> floor(T/2).
pub fn encoded_len(t: usize) -> usize {
    subsample_len(subsample_len(t))
}

struct ConvModule {
    pw1: Linear,
    dw: SameDepthwiseConv,
    norm: LayerNorm,
    pw2: Linear,
    d_model: usize,
}

struct ConvModuleCache {
    x: Array2<f64>,
    p: Array2<f64>,
    glu_out: Array2<f64>,
    norm_cache: LayerNormCache,
    norm_out: Array2<f64>,
    sw: Array2<f64>,
}

impl ConvModule {
    fn new(
        ps: &mut ParamSet,
        name: &str,
        d_model: usize,
        kernel: usize,
        rng: &mut ChaCha8Rng,
    ) -> ConvModule {
        ConvModule {
            pw1: Linear::new(ps, &format!("{name}.pw1"), d_model, 2 * d_model, true, rng),
            dw: SameDepthwiseConv::new(ps, &format!("{name}.dw"), d_model, kernel, rng),
            norm: LayerNorm::new(ps, &format!("{name}.norm"), d_model),
            pw2: Linear::new(ps, &format!("{name}.pw2"), d_model, d_model, true, rng),
            d_model,
        }
    }

    fn forward(&self, ps: &ParamSet, x: &Array2<f64>) -> (Array2<f64>, ConvModuleCache) {
        let d = self.d_model;
        let p = self.pw1.forward(ps, x);
        let mut glu_out = Array2::zeros((x.nrows(), d));
        for t in 0..x.nrows() {
            for j in 0..d {
                glu_out[[t, j]] = p[[t, j]] * sigmoid(p[[t, d + j]]);
            }
        }
        let dw_out = self.dw.forward(ps, &glu_out);
        let (norm_out, norm_cache) = self.norm.forward(ps, &dw_out);
        let sw = norm_out.mapv(silu);
        let y = self.pw2.forward(ps, &sw);
        (
            y,
            ConvModuleCache {
                x: x.clone(),
                p,
                glu_out,
                norm_cache,
                norm_out,
                sw,
            },
        )
    }

    fn backward(
        &self,
        ps: &ParamSet,
        cache: &ConvModuleCache,
        dy: &Array2<f64>,
        g: &mut GradStore,
    ) -> Array2<f64> {
        let d = self.d_model;
        let mut dsw = self.pw2.backward(ps, &cache.sw, dy, g);
        ndarray::Zip::from(&mut dsw)
            .and(&cache.norm_out)
            .for_each(|v, &pre| *v *= silu_grad(pre));
        let ddw_out = self.norm.backward(ps, &cache.norm_cache, &dsw, g);
        let dglu = self.dw.backward(ps, &cache.glu_out, &ddw_out, g);
        let mut dp = Array2::zeros(cache.p.raw_dim());
        for t in 0..dglu.nrows() {
            for j in 0..d {
                let a = cache.p[[t, j]];
                let b = cache.p[[t, d + j]];
                let sb = sigmoid(b);
                dp[[t, j]] = dglu[[t, j]] * sb;
                dp[[t, d + j]] = dglu[[t, j]] * a * sb * (1.0 - sb);
            }
        }
        self.pw1.backward(ps, &cache.x, &dp, g)
    }
}

struct EncoderLayer {
    ln_ffn1: LayerNorm,
    ffn1: Ffn,
    ln_mamba: LayerNorm,
    mamba_fwd: MambaBlock,
    mamba_bwd: MambaBlock,
    ln_conv: LayerNorm,
    conv: ConvModule,
    ln_ffn2: LayerNorm,
    ffn2: Ffn,
    ln_final: LayerNorm,
    dropout: f64,
}

struct EncoderLayerCache {
    ln1: LayerNormCache,
    ffn1: FfnCache,
    m_ffn1: Option<Array2<f64>>,
    ln_m: LayerNormCache,
    mamba_fwd: MambaBlockCache,
    mamba_bwd: MambaBlockCache,
    m_mamba: Option<Array2<f64>>,
    ln_c: LayerNormCache,
    conv: ConvModuleCache,
    m_conv: Option<Array2<f64>>,
    ln2: LayerNormCache,
    ffn2: FfnCache,
    m_ffn2: Option<Array2<f64>>,
    ln_fin: LayerNormCache,
}

impl EncoderLayer {
    fn new(
        ps: &mut ParamSet,
        name: &str,
        cfg: &EncoderConfig,
        ssm: &SsmConfig,
        rng: &mut ChaCha8Rng,
    ) -> EncoderLayer {
        let d = cfg.d_model;
        let d_inner = ssm.expand * d;
        EncoderLayer {
            ln_ffn1: LayerNorm::new(ps, &format!("{name}.ln_ffn1"), d),
            ffn1: Ffn::new(ps, &format!("{name}.ffn1"), d, cfg.d_ff, rng),
            ln_mamba: LayerNorm::new(ps, &format!("{name}.ln_mamba"), d),
            mamba_fwd: MambaBlock::new(
                ps,
                &format!("{name}.mamba_fwd"),
                d,
                d_inner,
                ssm.d_state,
                ssm.conv_kernel,
                rng,
            ),
            mamba_bwd: MambaBlock::new(
                ps,
                &format!("{name}.mamba_bwd"),
                d,
                d_inner,
                ssm.d_state,
                ssm.conv_kernel,
                rng,
            ),
            ln_conv: LayerNorm::new(ps, &format!("{name}.ln_conv"), d),
            conv: ConvModule::new(ps, &format!("{name}.conv"), d, cfg.conv_kernel, rng),
            ln_ffn2: LayerNorm::new(ps, &format!("{name}.ln_ffn2"), d),
            ffn2: Ffn::new(ps, &format!("{name}.ffn2"), d, cfg.d_ff, rng),
            ln_final: LayerNorm::new(ps, &format!("{name}.ln_final"), d),
            dropout: cfg.dropout,
        }
    }

    fn forward(
        &self,
        ps: &ParamSet,
        x0: &Array2<f64>,
        kernel: &dyn ScanKernel,
        phase: &mut Phase,
        want_cache: bool,
    ) -> Result<(Array2<f64>, Option<EncoderLayerCache>)> {
        let (t_len, d) = x0.dim();
        // Half-step FFN.
        let (ln1_out, ln1) = self.ln_ffn1.forward(ps, x0);
        let (mut f1, ffn1) = self.ffn1.forward(ps, &ln1_out, self.dropout, phase);
        let m_ffn1 = phase.dropout_mask(self.dropout, t_len, d);
        apply_mask(&mut f1, &m_ffn1);
        let x1 = x0 + &(0.5 * &f1);

        // Bidirectional Mamba.
        let (ln_m_out, ln_m) = self.ln_mamba.forward(ps, &x1);
        let (yf, cf) = self
            .mamba_fwd
            .forward(ps, &ln_m_out, Direction::Forward, kernel, want_cache)?;
        let (yb, cb) = self
            .mamba_bwd
            .forward(ps, &ln_m_out, Direction::Backward, kernel, want_cache)?;
        let mut ym = yf + yb;
        let m_mamba = phase.dropout_mask(self.dropout, t_len, d);
        apply_mask(&mut ym, &m_mamba);
        let x2 = &x1 + &ym;

        // Convolution module.
        let (ln_c_out, ln_c) = self.ln_conv.forward(ps, &x2);
        let (mut yc, conv) = self.conv.forward(ps, &ln_c_out);
        let m_conv = phase.dropout_mask(self.dropout, t_len, d);
        apply_mask(&mut yc, &m_conv);
        let x3 = &x2 + &yc;

        // Second half-step FFN.
        let (ln2_out, ln2) = self.ln_ffn2.forward(ps, &x3);
        let (mut f2, ffn2) = self.ffn2.forward(ps, &ln2_out, self.dropout, phase);
        let m_ffn2 = phase.dropout_mask(self.dropout, t_len, d);
        apply_mask(&mut f2, &m_ffn2);
        let x4 = &x3 + &(0.5 * &f2);

        let (y, ln_fin) = self.ln_final.forward(ps, &x4);
        let cache = want_cache.then(|| EncoderLayerCache {
            ln1,
            ffn1,
            m_ffn1,
            ln_m,
            mamba_fwd: cf.unwrap(),
            mamba_bwd: cb.unwrap(),
            m_mamba,
            ln_c,
            conv,
            m_conv,
            ln2,
            ffn2,
            m_ffn2,
            ln_fin,
        });
        Ok((y, cache))
    }

    fn backward(
        &self,
        ps: &ParamSet,
        cache: &EncoderLayerCache,
        dy: &Array2<f64>,
        g: &mut GradStore,
    ) -> Array2<f64> {
        let mut dx4 = self.ln_final.backward(ps, &cache.ln_fin, dy, g);

        // FFN2 half-step.
        let mut df2 = dx4.mapv(|v| 0.5 * v);
        apply_mask(&mut df2, &cache.m_ffn2);
        let dln2 = self.ffn2.backward(ps, &cache.ffn2, &df2, g);
        dx4 += &self.ln_ffn2.backward(ps, &cache.ln2, &dln2, g);
        let mut dx3 = dx4;

        // Conv module.
        let mut dyc = dx3.clone();
        apply_mask(&mut dyc, &cache.m_conv);
        let dln_c = self.conv.backward(ps, &cache.conv, &dyc, g);
        dx3 += &self.ln_conv.backward(ps, &cache.ln_c, &dln_c, g);
        let mut dx2 = dx3;

        // Bidirectional Mamba.
        let mut dym = dx2.clone();
        apply_mask(&mut dym, &cache.m_mamba);
        let dln_f = self.mamba_fwd.backward(ps, &cache.mamba_fwd, &dym, g);
        let dln_b = self.mamba_bwd.backward(ps, &cache.mamba_bwd, &dym, g);
        let dln_m = dln_f + dln_b;
        dx2 += &self.ln_mamba.backward(ps, &cache.ln_m, &dln_m, g);
        let mut dx1 = dx2;

        // FFN1 half-step.
        let mut df1 = dx1.mapv(|v| 0.5 * v);
        apply_mask(&mut df1, &cache.m_ffn1);
        let dln1 = self.ffn1.backward(ps, &cache.ffn1, &df1, g);
        dx1 += &self.ln_ffn1.backward(ps, &cache.ln1, &dln1, g);
        dx1
    }
}

pub struct Encoder {
    sub1: StridedConv1d,
    sub2: StridedConv1d,
    sub_lin: Linear,
    layers: Vec<EncoderLayer>,
    pub cfg: EncoderConfig,
}

pub struct EncoderCache {
    feats: Array2<f64>,
    sub1_out: Array2<f64>,
    sub2_in: Array2<f64>,
    sub2_out: Array2<f64>,
    sub_lin_in: Array2<f64>,
    layers: Vec<EncoderLayerCache>,
}

impl Encoder {
    pub fn new(
        ps: &mut ParamSet,
        cfg: &EncoderConfig,
        ssm: &SsmConfig,
        num_mel_bins: usize,
        rng: &mut ChaCha8Rng,
    ) -> Encoder {
        let d = cfg.d_model;
        let sub1 = StridedConv1d::new(ps, "encoder.sub1", num_mel_bins, d, rng);
        let sub2 = StridedConv1d::new(ps, "encoder.sub2", d, d, rng);
        let sub_lin = Linear::new(ps, "encoder.sub_lin", d, d, true, rng);
        let layers = (0..cfg.num_layers)
            .map(|i| EncoderLayer::new(ps, &format!("encoder.layer{i}"), cfg, ssm, rng))
            .collect();
        Encoder {
            sub1,
            sub2,
            sub_lin,
            layers,
            cfg: cfg.clone(),
        }
    }

    /// Encode one utterance of `[T, num_mel_bins]` features at 100 Hz.
    pub fn forward(
        &self,
        ps: &ParamSet,
        feats: &Array2<f64>,
        feat_rate: f64,
        kernel: &dyn ScanKernel,
        phase: &mut Phase,
        want_cache: bool,
    ) -> Result<(EncodedSequence, Option<EncoderCache>)> {
        if encoded_len(feats.nrows()) == 0 {
            return Err(Error::data(format!(
                "utterance too short: {} feature frames subsample to none",
                feats.nrows()
            )));
        }
        let sub1_out = self.sub1.forward(ps, feats);
        let sub2_in = sub1_out.mapv(silu);
        let sub2_out = self.sub2.forward(ps, &sub2_in);
        let sub_lin_in = sub2_out.mapv(silu);
        let mut x = self.sub_lin.forward(ps, &sub_lin_in);

        let mut layer_caches = Vec::new();
        for layer in &self.layers {
            let (y, cache) = layer.forward(ps, &x, kernel, phase, want_cache)?;
            if let Some(c) = cache {
                layer_caches.push(c);
            }
            x = y;
        }
        let encoded = EncodedSequence {
            frames: x,
            frame_rate: feat_rate / self.cfg.subsample_factor as f64,
        };
        let cache = want_cache.then(|| EncoderCache {
            feats: feats.clone(),
            sub1_out,
            sub2_in,
            sub2_out,
            sub_lin_in,
            layers: layer_caches,
        });
        Ok((encoded, cache))
    }

    /// Returns d feats (rarely useful, but keeps the chain checkable).
    pub fn backward(
        &self,
        ps: &ParamSet,
        cache: &EncoderCache,
        denc: &Array2<f64>,
        g: &mut GradStore,
    ) -> Array2<f64> {
        let mut dx = denc.clone();
        for (layer, lcache) in self.layers.iter().zip(&cache.layers).rev() {
            dx = layer.backward(ps, lcache, &dx, g);
        }
        let dsub_lin_in = self.sub_lin.backward(ps, &cache.sub_lin_in, &dx, g);
        let mut dsub2_out = dsub_lin_in;
        ndarray::Zip::from(&mut dsub2_out)
            .and(&cache.sub2_out)
            .for_each(|v, &pre| *v *= silu_grad(pre));
        let dsub2_in = self.sub2.backward(ps, &cache.sub2_in, &dsub2_out, g);
        let mut dsub1_out = dsub2_in;
        ndarray::Zip::from(&mut dsub1_out)
            .and(&cache.sub1_out)
            .for_each(|v, &pre| *v *= silu_grad(pre));
        self.sub1.backward(ps, &cache.feats, &dsub1_out, g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::ssm::scan::kernel;
    use rand::{Rng, SeedableRng};

    fn tiny_encoder(seed: u64) -> (ParamSet, Encoder) {
        let mut cfg = ModelConfig::preset("ver1-small").unwrap();
        cfg.encoder.num_layers = 1;
        cfg.encoder.d_model = 8;
        cfg.encoder.d_ff = 16;
        cfg.encoder.conv_kernel = 5;
        cfg.encoder.dropout = 0.0;
        cfg.ssm.d_state = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let enc = Encoder::new(&mut ps, &cfg.encoder, &cfg.ssm, 6, &mut rng);
        (ps, enc)
    }

    #[test]
    fn frame_rate_chain_matches_length_formula() {
        assert_eq!(encoded_len(98), 24);
        assert_eq!(encoded_len(398), 99);
        assert_eq!(encoded_len(4), 1);
        assert_eq!(encoded_len(3), 0);
    }

    #[test]
    fn forward_shapes_and_rate() {
        let (ps, enc) = tiny_encoder(1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let feats = Array2::from_shape_fn((98, 6), |_| rng.gen_range(-1.0..1.0));
        let k = kernel("sequential").unwrap();
        let (out, _) = enc
            .forward(&ps, &feats, 100.0, k.as_ref(), &mut Phase::Eval, false)
            .unwrap();
        assert_eq!(out.frames.dim(), (24, 8));
        assert_eq!(out.frame_rate, 25.0);
    }

    #[test]
    fn too_short_input_is_error() {
        let (ps, enc) = tiny_encoder(3);
        let feats = Array2::zeros((3, 6));
        let k = kernel("sequential").unwrap();
        let err = match enc.forward(&ps, &feats, 100.0, k.as_ref(), &mut Phase::Eval, false) {
            Err(e) => e,
            Ok(_) => panic!("expected too-short error"),
        };
        assert!(err.to_string().contains("too short"));
    }

    #[test]
    fn end_to_start_sensitivity_exists() {
        let (ps, enc) = tiny_encoder(4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let feats = Array2::from_shape_fn((40, 6), |_| rng.gen_range(-1.0..1.0));
        let mut feats2 = feats.clone();
        feats2[[39, 0]] += 1.0;
        let k = kernel("sequential").unwrap();
        let (a, _) = enc
            .forward(&ps, &feats, 100.0, k.as_ref(), &mut Phase::Eval, false)
            .unwrap();
        let (b, _) = enc
            .forward(&ps, &feats2, 100.0, k.as_ref(), &mut Phase::Eval, false)
            .unwrap();
        // Perturbing the last frames changes the first encoded frame: the
        // backward Mamba branch carries information against time.
        let diff: f64 = (&a.frames.row(0) - &b.frames.row(0))
            .iter()
            .map(|v| v.abs())
            .sum();
        assert!(diff > 0.0, "no anti-causal sensitivity");
    }

    #[test]
    fn eval_mode_is_deterministic() {
        let (ps, enc) = tiny_encoder(6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let feats = Array2::from_shape_fn((30, 6), |_| rng.gen_range(-1.0..1.0));
        let k = kernel("parallel").unwrap();
        let (a, _) = enc
            .forward(&ps, &feats, 100.0, k.as_ref(), &mut Phase::Eval, false)
            .unwrap();
        let (b, _) = enc
            .forward(&ps, &feats, 100.0, k.as_ref(), &mut Phase::Eval, false)
            .unwrap();
        assert_eq!(a.frames, b.frames);
    }

    #[test]
    fn gradients_match_finite_differences() {
        use crate::train::gradcheck::grad_check;
        let (mut ps, enc) = tiny_encoder(8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let feats = Array2::from_shape_fn((8, 6), |_| rng.gen_range(-1.0..1.0));
        let k = kernel("sequential").unwrap();
        let report = grad_check(
            &mut ps,
            &feats,
            1e-4,
            |ps, x| {
                enc.forward(ps, x, 100.0, k.as_ref(), &mut Phase::Eval, false)
                    .unwrap()
                    .0
                    .frames
                    .sum()
            },
            |ps, x| {
                let (out, cache) = enc
                    .forward(ps, x, 100.0, k.as_ref(), &mut Phase::Eval, true)
                    .unwrap();
                let dy = Array2::ones(out.frames.raw_dim());
                let mut g = GradStore::zeros_like(ps);
                let dx = enc.backward(ps, cache.as_ref().unwrap(), &dy, &mut g);
                (g, dx)
            },
        );
        assert!(report.max_rel < 1e-3, "{report}");
    }
}
