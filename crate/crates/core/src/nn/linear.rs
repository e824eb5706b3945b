use ndarray::{Array2, Axis};
use rand_chacha::ChaCha8Rng;

use crate::params::{GradStore, ParamId, ParamSet};

/// Affine map y = x W^T + b with weight shape `[d_out, d_in]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Linear {
        let w = ps.alloc(format!("{name}.w"), &[d_out, d_in]);
        ps.init_uniform(w, rng, 1.0 / (d_in as f64).sqrt());
        let b = bias.then(|| ps.alloc(format!("{name}.b"), &[d_out]));
        Linear { w, b, d_in, d_out }
    }

    /// x: `[T, d_in]` -> `[T, d_out]`.
    pub fn forward(&self, ps: &ParamSet, x: &Array2<f64>) -> Array2<f64> {
        debug_assert_eq!(x.ncols(), self.d_in);
        let mut y = x.dot(&ps.view2(self.w).t());
        if let Some(b) = self.b {
            y += &ps.view1(b);
        }
        y
    }

    /// dy: `[T, d_out]`; returns dx `[T, d_in]` and accumulates parameter grads.
    pub fn backward(
        &self,
        ps: &ParamSet,
        x: &Array2<f64>,
        dy: &Array2<f64>,
        g: &mut GradStore,
    ) -> Array2<f64> {
        let dw = dy.t().dot(x);
        let mut gw = g.view2_mut(ps, self.w);
        gw += &dw;
        if let Some(b) = self.b {
            let db = dy.sum_axis(Axis(0));
            let mut gb = g.view1_mut(ps, b);
            gb += &db;
        }
        dy.dot(&ps.view2(self.w))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;

    #[test]
    fn forward_matches_hand_computation() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ps = ParamSet::new();
        let lin = Linear::new(&mut ps, "l", 2, 3, true, &mut rng);
        // Override with known values.
        ps.slice_mut(lin.w).copy_from_slice(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        ps.slice_mut(lin.b.unwrap()).copy_from_slice(&[0.1, 0.2, 0.3]);
        let x = array![[1.0, 1.0]];
        let y = lin.forward(&ps, &x);
        assert_eq!(y, array![[3.1, 7.2, 11.3]]);
    }

    #[test]
    fn backward_shapes_and_bias_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ps = ParamSet::new();
        let lin = Linear::new(&mut ps, "l", 3, 2, true, &mut rng);
        let x = array![[1.0, 0.0, -1.0], [2.0, 1.0, 0.5]];
        let dy = array![[1.0, 1.0], [1.0, -1.0]];
        let mut g = GradStore::zeros_like(&ps);
        let dx = lin.backward(&ps, &x, &dy, &mut g);
        assert_eq!(dx.dim(), (2, 3));
        assert_eq!(g.slice(&ps, lin.b.unwrap()), &[2.0, 0.0]);
    }
}
