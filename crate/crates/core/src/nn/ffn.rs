use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

use crate::nn::linear::Linear;
use crate::nn::{apply_mask, silu, silu_grad, Phase};
use crate::params::{GradStore, ParamSet};

/// Position-wise feedforward: lin2(dropout(silu(lin1(x)))).
#[derive(Debug, Clone)]
pub struct Ffn {
    pub lin1: Linear,
    pub lin2: Linear,
}

pub struct FfnCache {
    x: Array2<f64>,
    h_pre: Array2<f64>,
    a_dropped: Array2<f64>,
    mask_inner: Option<Array2<f64>>,
}

impl Ffn {
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        d_model: usize,
        d_ff: usize,
        rng: &mut ChaCha8Rng,
    ) -> Ffn {
        Ffn {
            lin1: Linear::new(ps, &format!("{name}.lin1"), d_model, d_ff, true, rng),
            lin2: Linear::new(ps, &format!("{name}.lin2"), d_ff, d_model, true, rng),
        }
    }

    pub fn forward(
        &self,
        ps: &ParamSet,
        x: &Array2<f64>,
        dropout: f64,
        phase: &mut Phase,
    ) -> (Array2<f64>, FfnCache) {
        let h_pre = self.lin1.forward(ps, x);
        let mut a = h_pre.mapv(silu);
        let mask_inner = phase.dropout_mask(dropout, a.nrows(), a.ncols());
        apply_mask(&mut a, &mask_inner);
        let y = self.lin2.forward(ps, &a);
        (
            y,
            FfnCache {
                x: x.clone(),
                h_pre,
                a_dropped: a,
                mask_inner,
            },
        )
    }

    pub fn backward(
        &self,
        ps: &ParamSet,
        cache: &FfnCache,
        dy: &Array2<f64>,
        g: &mut GradStore,
    ) -> Array2<f64> {
        let mut da = self.lin2.backward(ps, &cache.a_dropped, dy, g);
        apply_mask(&mut da, &cache.mask_inner);
        ndarray::Zip::from(&mut da)
            .and(&cache.h_pre)
            .for_each(|v, &pre| *v *= silu_grad(pre));
        self.lin1.backward(ps, &cache.x, &da, g)
    }
}
