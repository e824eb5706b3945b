//! Time-axis convolutions used by the blocks: a short causal depthwise conv
//! (inside each SSM block), a centered depthwise conv (encoder convolution
//! module), and strided full convolutions (frame-rate subsampling).
//!
//! All operate on `[T, channels]` matrices; padding is implicit zeros.

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

use crate::params::{GradStore, ParamId, ParamSet};

/// Depthwise causal convolution: output at t sees inputs (t-k+1 ..= t).
/// A `history` of the last k-1 frames lets incremental decoding continue
/// a sequence exactly.
#[derive(Debug, Clone)]
pub struct CausalDepthwiseConv {
    pub w: ParamId,
    pub b: ParamId,
    pub channels: usize,
    pub kernel: usize,
}

impl CausalDepthwiseConv {
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        channels: usize,
        kernel: usize,
        rng: &mut ChaCha8Rng,
    ) -> CausalDepthwiseConv {
        let w = ps.alloc(format!("{name}.w"), &[channels, kernel]);
        let b = ps.alloc(format!("{name}.b"), &[channels]);
        ps.init_uniform(w, rng, 1.0 / (kernel as f64).sqrt());
        CausalDepthwiseConv {
            w,
            b,
            channels,
            kernel,
        }
    }

    /// `history`: the k-1 frames preceding x (zeros when absent).
    pub fn forward(
        &self,
        ps: &ParamSet,
        x: &Array2<f64>,
        history: Option<&Array2<f64>>,
    ) -> Array2<f64> {
        let (t_len, c) = x.dim();
        debug_assert_eq!(c, self.channels);
        let k = self.kernel;
        if let Some(h) = history {
            debug_assert_eq!(h.dim(), (k - 1, c));
        }
        let w = ps.view2(self.w);
        let b = ps.view1(self.b);
        let mut y = Array2::zeros((t_len, c));
        for t in 0..t_len {
            for d in 0..c {
                let mut acc = b[d];
                for j in 0..k {
                    let src = t as isize - (k as isize - 1) + j as isize;
                    let v = if src >= 0 {
                        x[[src as usize, d]]
                    } else if let Some(h) = history {
                        h[[(src + (k as isize - 1)) as usize, d]]
                    } else {
                        0.0
                    };
                    acc += w[[d, j]] * v;
                }
                y[[t, d]] = acc;
            }
        }
        y
    }

    /// Gradients w.r.t. x only (history treated as constant).
    pub fn backward(
        &self,
        ps: &ParamSet,
        x: &Array2<f64>,
        history: Option<&Array2<f64>>,
        dy: &Array2<f64>,
        g: &mut GradStore,
    ) -> Array2<f64> {
        let (t_len, c) = x.dim();
        let k = self.kernel;
        let w = ps.view2(self.w);
        let mut dx = Array2::zeros((t_len, c));
        let mut dw = Array2::zeros((c, k));
        let mut db = vec![0.0; c];
        for t in 0..t_len {
            for d in 0..c {
                let go = dy[[t, d]];
                db[d] += go;
                for j in 0..k {
                    let src = t as isize - (k as isize - 1) + j as isize;
                    if src >= 0 {
                        dx[[src as usize, d]] += w[[d, j]] * go;
                        dw[[d, j]] += x[[src as usize, d]] * go;
                    } else if let Some(h) = history {
                        dw[[d, j]] += h[[(src + (k as isize - 1)) as usize, d]] * go;
                    }
                }
            }
        }
        {
            let mut gw = g.view2_mut(ps, self.w);
            gw += &dw;
        }
        let mut gb = g.view1_mut(ps, self.b);
        for (d, v) in db.iter().enumerate() {
            gb[d] += v;
        }
        dx
    }

    /// Trailing k-1 frames of (history ++ x), for carrying decode state.
    pub fn next_history(&self, x: &Array2<f64>, history: Option<&Array2<f64>>) -> Array2<f64> {
        let k1 = self.kernel - 1;
        let c = self.channels;
        let mut out = Array2::zeros((k1, c));
        let t_len = x.nrows();
        for i in 0..k1 {
            // Frame index relative to the end of x.
            let src = t_len as isize - k1 as isize + i as isize;
            for d in 0..c {
                out[[i, d]] = if src >= 0 {
                    x[[src as usize, d]]
                } else if let Some(h) = history {
                    let hsrc = h.nrows() as isize + src;
                    if hsrc >= 0 {
                        h[[hsrc as usize, d]]
                    } else {
                        0.0
                    }
                } else {
                    0.0
                };
            }
        }
        out
    }
}

/// Depthwise convolution with centered (same) zero padding; kernel odd.
#[derive(Debug, Clone)]
pub struct SameDepthwiseConv {
    pub w: ParamId,
    pub b: ParamId,
    pub channels: usize,
    pub kernel: usize,
}

impl SameDepthwiseConv {
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        channels: usize,
        kernel: usize,
        rng: &mut ChaCha8Rng,
    ) -> SameDepthwiseConv {
        assert!(kernel % 2 == 1, "centered depthwise conv needs odd kernel");
        let w = ps.alloc(format!("{name}.w"), &[channels, kernel]);
        let b = ps.alloc(format!("{name}.b"), &[channels]);
        ps.init_uniform(w, rng, 1.0 / (kernel as f64).sqrt());
        SameDepthwiseConv {
            w,
            b,
            channels,
            kernel,
        }
    }

    pub fn forward(&self, ps: &ParamSet, x: &Array2<f64>) -> Array2<f64> {
        let (t_len, c) = x.dim();
        let k = self.kernel;
        let pad = (k - 1) / 2;
        let w = ps.view2(self.w);
        let b = ps.view1(self.b);
        let mut y = Array2::zeros((t_len, c));
        for t in 0..t_len {
            for d in 0..c {
                let mut acc = b[d];
                for j in 0..k {
                    let src = t as isize - pad as isize + j as isize;
                    if src >= 0 && (src as usize) < t_len {
                        acc += w[[d, j]] * x[[src as usize, d]];
                    }
                }
                y[[t, d]] = acc;
            }
        }
        y
    }

    pub fn backward(
        &self,
        ps: &ParamSet,
        x: &Array2<f64>,
        dy: &Array2<f64>,
        g: &mut GradStore,
    ) -> Array2<f64> {
        let (t_len, c) = x.dim();
        let k = self.kernel;
        let pad = (k - 1) / 2;
        let w = ps.view2(self.w);
        let mut dx = Array2::zeros((t_len, c));
        let mut dw = Array2::zeros((c, k));
        let mut db = vec![0.0; c];
        for t in 0..t_len {
            for d in 0..c {
                let go = dy[[t, d]];
                db[d] += go;
                for j in 0..k {
                    let src = t as isize - pad as isize + j as isize;
                    if src >= 0 && (src as usize) < t_len {
                        dx[[src as usize, d]] += w[[d, j]] * go;
                        dw[[d, j]] += x[[src as usize, d]] * go;
                    }
                }
            }
        }
        {
            let mut gw = g.view2_mut(ps, self.w);
            gw += &dw;
        }
        let mut gb = g.view1_mut(ps, self.b);
        for (d, v) in db.iter().enumerate() {
            gb[d] += v;
        }
        dx
    }
}

/// Full (cross-channel) 1-D convolution, stride 2, kernel 3, one leading
/// zero-pad frame, so the output length is exactly floor(T/2).
/// Implemented by materializing the input windows and using one matmul.
#[derive(Debug, Clone)]
pub struct StridedConv1d {
    pub w: ParamId,
    pub b: ParamId,
    pub c_in: usize,
    pub c_out: usize,
}

pub const STRIDE: usize = 2;
pub const KERNEL: usize = 3;
const PAD_LEFT: usize = 1;

/// Output length of one stride-2 stage: floor(t / 2); zero when t < 2.
pub fn subsample_len(t: usize) -> usize {
    t / 2
}

impl StridedConv1d {
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        c_in: usize,
        c_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> StridedConv1d {
        let w = ps.alloc(format!("{name}.w"), &[c_out, c_in, KERNEL]);
        let b = ps.alloc(format!("{name}.b"), &[c_out]);
        ps.init_uniform(w, rng, 1.0 / ((c_in * KERNEL) as f64).sqrt());
        StridedConv1d { w, b, c_in, c_out }
    }

    fn windows(&self, x: &Array2<f64>) -> Array2<f64> {
        let t_out = subsample_len(x.nrows());
        let mut cols = Array2::zeros((t_out, self.c_in * KERNEL));
        for t in 0..t_out {
            for j in 0..KERNEL {
                let src = (STRIDE * t + j) as isize - PAD_LEFT as isize;
                if src >= 0 && (src as usize) < x.nrows() {
                    for d in 0..self.c_in {
                        cols[[t, d * KERNEL + j]] = x[[src as usize, d]];
                    }
                }
            }
        }
        cols
    }

    /// x: `[T, c_in]` -> `[floor(T/2), c_out]`.
    pub fn forward(&self, ps: &ParamSet, x: &Array2<f64>) -> Array2<f64> {
        let cols = self.windows(x);
        let w = ps.view_as2(self.w, self.c_out, self.c_in * KERNEL);
        let mut y = cols.dot(&w.t());
        y += &ps.view1(self.b);
        y
    }

    pub fn backward(
        &self,
        ps: &ParamSet,
        x: &Array2<f64>,
        dy: &Array2<f64>,
        g: &mut GradStore,
    ) -> Array2<f64> {
        let cols = self.windows(x);
        {
            let dw = dy.t().dot(&cols);
            let mut gw = g.view_as2_mut(ps, self.w, self.c_out, self.c_in * KERNEL);
            gw += &dw;
            let db = dy.sum_axis(ndarray::Axis(0));
            let mut gb = g.view1_mut(ps, self.b);
            gb += &db;
        }
        let w = ps.view_as2(self.w, self.c_out, self.c_in * KERNEL);
        let dcols = dy.dot(&w);
        let mut dx = Array2::zeros(x.raw_dim());
        let t_out = dy.nrows();
        for t in 0..t_out {
            for j in 0..KERNEL {
                let src = (STRIDE * t + j) as isize - PAD_LEFT as isize;
                if src >= 0 && (src as usize) < x.nrows() {
                    for d in 0..self.c_in {
                        dx[[src as usize, d]] += dcols[[t, d * KERNEL + j]];
                    }
                }
            }
        }
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;

    #[test]
    fn causal_conv_only_sees_past() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut ps = ParamSet::new();
        let conv = CausalDepthwiseConv::new(&mut ps, "c", 1, 4, &mut rng);
        let x0 = array![[1.0], [2.0], [3.0], [4.0], [5.0]];
        let mut x1 = x0.clone();
        x1[[4, 0]] = 99.0;
        let y0 = conv.forward(&ps, &x0, None);
        let y1 = conv.forward(&ps, &x1, None);
        for t in 0..4 {
            assert_eq!(y0[[t, 0]], y1[[t, 0]]);
        }
        assert_ne!(y0[[4, 0]], y1[[4, 0]]);
    }

    #[test]
    fn causal_conv_history_matches_full_sequence() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut ps = ParamSet::new();
        let conv = CausalDepthwiseConv::new(&mut ps, "c", 2, 4, &mut rng);
        let x = Array2::from_shape_fn((6, 2), |(t, d)| (t * 2 + d) as f64 * 0.3 - 1.0);
        let full = conv.forward(&ps, &x, None);

        let first = x.slice(ndarray::s![..4, ..]).to_owned();
        let rest = x.slice(ndarray::s![4.., ..]).to_owned();
        let y1 = conv.forward(&ps, &first, None);
        let hist = conv.next_history(&first, None);
        let y2 = conv.forward(&ps, &rest, Some(&hist));
        for t in 0..4 {
            for d in 0..2 {
                assert_eq!(full[[t, d]], y1[[t, d]]);
            }
        }
        for t in 0..2 {
            for d in 0..2 {
                assert_eq!(full[[4 + t, d]], y2[[t, d]]);
            }
        }
    }

    #[test]
    fn strided_lengths_follow_floor_halving() {
        assert_eq!(subsample_len(98), 49);
        assert_eq!(subsample_len(49), 24);
        assert_eq!(subsample_len(398), 199);
        assert_eq!(subsample_len(199), 99);
        assert_eq!(subsample_len(1), 0);
    }

    #[test]
    fn strided_conv_zero_input_zero_bias_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut ps = ParamSet::new();
        let conv = StridedConv1d::new(&mut ps, "s", 3, 2, &mut rng);
        let x = Array2::zeros((10, 3));
        let y = conv.forward(&ps, &x);
        assert_eq!(y.dim(), (5, 2));
        assert!(y.iter().all(|v| *v == 0.0));
    }
}
