use ndarray::{Array1, Array2, Axis};

use crate::params::{GradStore, ParamId, ParamSet};

const EPS: f64 = 1e-5;

/// Per-frame layer normalization over the feature dimension, with learned
/// gain and bias.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub dim: usize,
}

pub struct LayerNormCache {
    /// Normalized activations before gain/bias, `[T, d]`.
    pub xhat: Array2<f64>,
    /// 1 / sqrt(var + eps) per frame.
    pub inv_std: Array1<f64>,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamSet, name: &str, dim: usize) -> LayerNorm {
        let gain = ps.alloc(format!("{name}.gain"), &[dim]);
        let bias = ps.alloc(format!("{name}.bias"), &[dim]);
        ps.fill(gain, 1.0);
        LayerNorm { gain, bias, dim }
    }

    pub fn forward(&self, ps: &ParamSet, x: &Array2<f64>) -> (Array2<f64>, LayerNormCache) {
        let t = x.nrows();
        let d = x.ncols() as f64;
        let mut xhat = Array2::zeros(x.raw_dim());
        let mut inv_std = Array1::zeros(t);
        for (i, row) in x.rows().into_iter().enumerate() {
            let mean = row.sum() / d;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
            let is = 1.0 / (var + EPS).sqrt();
            inv_std[i] = is;
            for (j, v) in row.iter().enumerate() {
                xhat[[i, j]] = (v - mean) * is;
            }
        }
        let mut y = xhat.clone();
        y *= &ps.view1(self.gain);
        y += &ps.view1(self.bias);
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(
        &self,
        ps: &ParamSet,
        cache: &LayerNormCache,
        dy: &Array2<f64>,
        g: &mut GradStore,
    ) -> Array2<f64> {
        let d = dy.ncols() as f64;
        {
            let dgain = (dy * &cache.xhat).sum_axis(Axis(0));
            let mut gg = g.view1_mut(ps, self.gain);
            gg += &dgain;
            let dbias = dy.sum_axis(Axis(0));
            let mut gb = g.view1_mut(ps, self.bias);
            gb += &dbias;
        }
        let gain = ps.view1(self.gain);
        let mut dx = Array2::zeros(dy.raw_dim());
        for i in 0..dy.nrows() {
            // dxhat = dy * gain; dx = inv_std * (dxhat - mean(dxhat) - xhat * mean(dxhat*xhat))
            let mut m1 = 0.0;
            let mut m2 = 0.0;
            for j in 0..dy.ncols() {
                let dxh = dy[[i, j]] * gain[j];
                m1 += dxh;
                m2 += dxh * cache.xhat[[i, j]];
            }
            m1 /= d;
            m2 /= d;
            for j in 0..dy.ncols() {
                let dxh = dy[[i, j]] * gain[j];
                dx[[i, j]] = cache.inv_std[i] * (dxh - m1 - cache.xhat[[i, j]] * m2);
            }
        }
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn output_has_zero_mean_unit_variance_before_affine() {
        let mut ps = ParamSet::new();
        let ln = LayerNorm::new(&mut ps, "ln", 4);
        let x = array![[1.0, 2.0, 3.0, 4.0], [-5.0, 0.0, 5.0, 10.0]];
        let (_, cache) = ln.forward(&ps, &x);
        for row in cache.xhat.rows() {
            let mean = row.sum() / 4.0;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn identity_params_pass_through_normalized() {
        let mut ps = ParamSet::new();
        let ln = LayerNorm::new(&mut ps, "ln", 3);
        let x = array![[2.0, 2.0, 2.0]];
        let (y, _) = ln.forward(&ps, &x);
        // Constant row normalizes to zeros.
        for v in y.iter() {
            assert!(v.abs() < 1e-9);
        }
    }
}
