//! Hand-written neural-net primitives: forward passes paired with explicit
//! backward passes over the flat parameter store. No autodiff — every
//! backward here is derived by hand and gated by finite-difference checks.

pub mod attention;
pub mod ffn;
pub mod conv;
pub mod embedding;
pub mod linear;
pub mod norm;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Forward-pass mode. Training mode owns an RNG for dropout masks so that
/// a run is reproducible from its seed alone.
pub enum Phase<'a> {
    Eval,
    Train { rng: &'a mut ChaCha8Rng },
}

impl Phase<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Phase::Train { .. })
    }

    /// Inverted-scale dropout mask (entries 0 or 1/(1-rate)), or `None`
    /// when inactive. Draws from the RNG even only in training mode, so
    /// eval passes are RNG-free.
    pub fn dropout_mask(&mut self, rate: f64, rows: usize, cols: usize) -> Option<Array2<f64>> {
        match self {
            Phase::Eval => None,
            Phase::Train { rng } => {
                if rate <= 0.0 {
                    return None;
                }
                let keep = 1.0 - rate;
                let scale = 1.0 / keep;
                Some(Array2::from_shape_fn((rows, cols), |_| {
                    if rng.gen::<f64>() < keep {
                        scale
                    } else {
                        0.0
                    }
                }))
            }
        }
    }
}

/// Apply a dropout mask produced by [`Phase::dropout_mask`].
pub fn apply_mask(x: &mut Array2<f64>, mask: &Option<Array2<f64>>) {
    if let Some(m) = mask {
        *x *= m;
    }
}

// ---- activations -------------------------------------------------------

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// SiLU / Swish: x * sigmoid(x).
pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

/// d/dx SiLU(x) = s(x) * (1 + x * (1 - s(x))).
pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// Numerically stable ln(1 + e^x).
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of softplus, y > 0: x = ln(e^y - 1).
pub fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        (y.exp() - 1.0).ln()
    }
}

/// Log-softmax along each row.
pub fn log_softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
        row.mapv_inplace(|v| v - lse);
    }
    out
}

/// In-place softmax of one slice.
pub fn softmax_slice(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn silu_zero_is_zero() {
        assert_eq!(silu(0.0), 0.0);
    }

    #[test]
    fn silu_grad_matches_finite_difference() {
        let eps = 1e-6;
        for &x in &[-3.0, -0.5, 0.0, 0.7, 4.0] {
            let fd = (silu(x + eps) - silu(x - eps)) / (2.0 * eps);
            assert_relative_eq!(silu_grad(x), fd, max_relative = 1e-6);
        }
    }

    #[test]
    fn softplus_is_stable_and_positive() {
        assert!(softplus(-800.0) >= 0.0);
        assert_eq!(softplus(1000.0), 1000.0);
        assert_relative_eq!(softplus(0.0), 2.0f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn softplus_inv_roundtrip() {
        for &y in &[1e-4, 0.01, 0.5, 3.0, 50.0] {
            assert_relative_eq!(softplus(softplus_inv(y)), y, max_relative = 1e-9);
        }
    }

    #[test]
    fn log_softmax_rows_normalizes() {
        let x = ndarray::array![[1.0, 2.0, 3.0], [0.0, 0.0, 0.0]];
        let ls = log_softmax_rows(&x);
        for row in ls.rows() {
            let total: f64 = row.iter().map(|v| v.exp()).sum();
            assert_relative_eq!(total, 1.0, epsilon = 1e-12);
        }
        assert_relative_eq!(ls[[1, 0]], -(3.0f64.ln()), epsilon = 1e-12);
    }
}
