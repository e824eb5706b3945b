use ndarray::{s, Array2, Axis};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::linear::Linear;
use crate::nn::softmax_slice;
use crate::params::{GradStore, ParamSet};

/// Multi-head scaled dot-product cross-attention. Queries come from the
/// decoder stream, keys/values from encoder frames; only the first
/// `enc_len` encoder frames participate, the rest get exactly zero weight.
#[derive(Debug, Clone)]
pub struct CrossAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub num_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
}

pub struct AttentionCache {
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// Per-head attention weights, each `[Tq, enc_len]`.
    pub attn: Vec<Array2<f64>>,
    ctx: Array2<f64>,
    enc_len: usize,
}

/// Encoder projections fixed for a decoding session.
#[derive(Debug, Clone)]
pub struct KvCache {
    pub(crate) k: Array2<f64>,
    pub(crate) v: Array2<f64>,
}

impl KvCache {
    pub fn from_parts(k: Array2<f64>, v: Array2<f64>) -> KvCache {
        KvCache { k, v }
    }
}

impl CrossAttention {
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        d_model: usize,
        num_heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> CrossAttention {
        assert!(d_model % num_heads == 0);
        CrossAttention {
            wq: Linear::new(ps, &format!("{name}.wq"), d_model, d_model, true, rng),
            wk: Linear::new(ps, &format!("{name}.wk"), d_model, d_model, true, rng),
            wv: Linear::new(ps, &format!("{name}.wv"), d_model, d_model, true, rng),
            wo: Linear::new(ps, &format!("{name}.wo"), d_model, d_model, true, rng),
            num_heads,
            d_model,
            d_head: d_model / num_heads,
        }
    }

    pub fn forward(
        &self,
        ps: &ParamSet,
        x_q: &Array2<f64>,
        enc: &Array2<f64>,
        enc_len: usize,
    ) -> Result<(Array2<f64>, AttentionCache)> {
        if enc_len == 0 || enc_len > enc.nrows() {
            return Err(Error::data(format!(
                "cross-attention needs 1..=T_enc valid frames, got {enc_len} of {}",
                enc.nrows()
            )));
        }
        let enc_valid = enc.slice(s![..enc_len, ..]).to_owned();
        let q = self.wq.forward(ps, x_q);
        let k = self.wk.forward(ps, &enc_valid);
        let v = self.wv.forward(ps, &enc_valid);
        let (ctx, attn) = self.attend(&q, &k, &v);
        let y = self.wo.forward(ps, &ctx);
        Ok((
            y,
            AttentionCache {
                q,
                k,
                v,
                attn,
                ctx,
                enc_len,
            },
        ))
    }

    fn attend(
        &self,
        q: &Array2<f64>,
        k: &Array2<f64>,
        v: &Array2<f64>,
    ) -> (Array2<f64>, Vec<Array2<f64>>) {
        let tq = q.nrows();
        let scale = 1.0 / (self.d_head as f64).sqrt();
        let mut ctx = Array2::zeros((tq, self.d_model));
        let mut attn_heads = Vec::with_capacity(self.num_heads);
        for h in 0..self.num_heads {
            let cols = h * self.d_head..(h + 1) * self.d_head;
            let qh = q.slice(s![.., cols.clone()]);
            let kh = k.slice(s![.., cols.clone()]);
            let vh = v.slice(s![.., cols.clone()]);
            let mut scores = qh.dot(&kh.t());
            scores *= scale;
            for mut row in scores.rows_mut() {
                softmax_slice(row.as_slice_mut().unwrap());
            }
            let ctx_h = scores.dot(&vh);
            ctx.slice_mut(s![.., cols]).assign(&ctx_h);
            attn_heads.push(scores);
        }
        (ctx, attn_heads)
    }

    /// Returns (dx_q, denc); denc rows past `enc_len` are zero.
    pub fn backward(
        &self,
        ps: &ParamSet,
        x_q: &Array2<f64>,
        enc: &Array2<f64>,
        cache: &AttentionCache,
        dy: &Array2<f64>,
        g: &mut GradStore,
    ) -> (Array2<f64>, Array2<f64>) {
        let scale = 1.0 / (self.d_head as f64).sqrt();
        let enc_len = cache.enc_len;
        let enc_valid = enc.slice(s![..enc_len, ..]).to_owned();

        let dctx = self.wo.backward(ps, &cache.ctx, dy, g);
        let mut dq = Array2::zeros(cache.q.raw_dim());
        let mut dk = Array2::zeros(cache.k.raw_dim());
        let mut dv = Array2::zeros(cache.v.raw_dim());
        for h in 0..self.num_heads {
            let cols = h * self.d_head..(h + 1) * self.d_head;
            let attn = &cache.attn[h];
            let dctx_h = dctx.slice(s![.., cols.clone()]);
            let vh = cache.v.slice(s![.., cols.clone()]);
            let kh = cache.k.slice(s![.., cols.clone()]);
            let qh = cache.q.slice(s![.., cols.clone()]);

            let dattn = dctx_h.dot(&vh.t());
            dv.slice_mut(s![.., cols.clone()])
                .assign(&attn.t().dot(&dctx_h));

            // softmax backward per row
            let row_dot = (&dattn * attn).sum_axis(Axis(1));
            let mut dscores = dattn.clone();
            for (i, mut row) in dscores.rows_mut().into_iter().enumerate() {
                for (j, val) in row.iter_mut().enumerate() {
                    *val = attn[[i, j]] * (*val - row_dot[i]);
                }
            }
            dscores *= scale;
            dq.slice_mut(s![.., cols.clone()]).assign(&dscores.dot(&kh));
            dk.slice_mut(s![.., cols]).assign(&dscores.t().dot(&qh));
        }
        let dx_q = self.wq.backward(ps, x_q, &dq, g);
        let denc_k = self.wk.backward(ps, &enc_valid, &dk, g);
        let denc_v = self.wv.backward(ps, &enc_valid, &dv, g);
        let mut denc = Array2::zeros(enc.raw_dim());
        {
            let mut valid = denc.slice_mut(s![..enc_len, ..]);
            valid += &denc_k;
            valid += &denc_v;
        }
        (dx_q, denc)
    }

    pub fn precompute_kv(&self, ps: &ParamSet, enc: &Array2<f64>, enc_len: usize) -> KvCache {
        let enc_valid = enc.slice(s![..enc_len, ..]).to_owned();
        KvCache {
            k: self.wk.forward(ps, &enc_valid),
            v: self.wv.forward(ps, &enc_valid),
        }
    }

    /// Forward with fixed encoder projections (decode path; no grads).
    pub fn forward_with_kv(&self, ps: &ParamSet, x_q: &Array2<f64>, kv: &KvCache) -> Array2<f64> {
        let q = self.wq.forward(ps, x_q);
        let (ctx, _) = self.attend(&q, &kv.k, &kv.v);
        self.wo.forward(ps, &ctx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn make(
        d_model: usize,
        heads: usize,
    ) -> (ParamSet, CrossAttention, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut ps = ParamSet::new();
        let attn = CrossAttention::new(&mut ps, "xa", d_model, heads, &mut rng);
        (ps, attn, rng)
    }

    #[test]
    fn rows_sum_to_one_and_mask_is_exact() {
        let (ps, attn, _) = make(8, 2);
        let xq = Array2::from_shape_fn((3, 8), |(i, j)| ((i * 7 + j) as f64).sin());
        let enc = Array2::from_shape_fn((5, 8), |(i, j)| ((i + j * 3) as f64).cos());
        let (_, cache) = attn.forward(&ps, &xq, &enc, 4).unwrap();
        for head in &cache.attn {
            assert_eq!(head.ncols(), 4); // masked frame never participates
            for row in head.rows() {
                let s: f64 = row.sum();
                assert!((s - 1.0).abs() < 1e-6);
                assert!(row.iter().all(|w| *w >= 0.0));
            }
        }
    }

    #[test]
    fn single_frame_weights_are_one() {
        let (ps, attn, _) = make(8, 4);
        let xq = Array2::from_shape_fn((2, 8), |(i, j)| (i + j) as f64 * 0.1);
        let enc = Array2::from_shape_fn((1, 8), |(_, j)| j as f64 * 0.2 - 0.5);
        let (y, cache) = attn.forward(&ps, &xq, &enc, 1).unwrap();
        for head in &cache.attn {
            assert!(head.iter().all(|w| (*w - 1.0).abs() < 1e-12));
        }
        // Output equals wo(wv(enc frame)) repeated for each query.
        let v = attn.wv.forward(&ps, &enc);
        let expect = attn.wo.forward(&ps, &v);
        for i in 0..2 {
            for j in 0..8 {
                assert!((y[[i, j]] - expect[[0, j]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_query_gives_uniform_weights() {
        let (mut ps, attn, _) = make(8, 2);
        // Zero the query projection entirely: logits constant per row.
        ps.fill(attn.wq.w, 0.0);
        ps.fill(attn.wq.b.unwrap(), 0.0);
        let xq = Array2::from_shape_fn((2, 8), |(i, j)| (i * j) as f64);
        let enc = Array2::from_shape_fn((5, 8), |(i, j)| ((i * 3 + j) as f64).sin());
        let (_, cache) = attn.forward(&ps, &xq, &enc, 5).unwrap();
        for head in &cache.attn {
            for w in head.iter() {
                assert!((w - 0.2).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn all_masked_is_error() {
        let (ps, attn, _) = make(8, 2);
        let xq = Array2::zeros((1, 8));
        let enc = Array2::zeros((4, 8));
        assert!(attn.forward(&ps, &xq, &enc, 0).is_err());
    }

    #[test]
    fn kv_path_matches_full_forward() {
        let (ps, attn, _) = make(8, 2);
        let xq = Array2::from_shape_fn((1, 8), |(_, j)| (j as f64).sin());
        let enc = Array2::from_shape_fn((6, 8), |(i, j)| ((i * 5 + j) as f64).cos());
        let (y, _) = attn.forward(&ps, &xq, &enc, 6).unwrap();
        let kv = attn.precompute_kv(&ps, &enc, 6);
        let y2 = attn.forward_with_kv(&ps, &xq, &kv);
        assert_eq!(y, y2);
    }
}
