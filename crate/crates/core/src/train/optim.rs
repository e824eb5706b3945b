//! AdamW with decoupled weight decay.

use crate::params::{GradStore, ParamSet};

pub struct AdamW {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Steps skipped because the gradient was non-finite.
    pub skipped_steps: usize,
}

impl AdamW {
    pub fn new(num_values: usize) -> AdamW {
        AdamW {
            m: vec![0.0; num_values],
            v: vec![0.0; num_values],
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            skipped_steps: 0,
        }
    }

    /// One update: p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + wd * p).
    /// Decay is decoupled from the moments. Returns false (and leaves all
    /// state untouched) when the gradient contains non-finite values.
    pub fn apply(
        &mut self,
        params: &mut ParamSet,
        grads: &GradStore,
        lr: f64,
        weight_decay: f64,
    ) -> bool {
        if !grads.is_finite() {
            self.skipped_steps += 1;
            log::warn!(
                "skipping optimizer step {}: non-finite gradient",
                self.step + 1
            );
            return false;
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.data.len() {
            let gv = grads.data[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * gv;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * gv * gv;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            let p = params.data[i];
            params.data[i] = p - lr * (m_hat / (v_hat.sqrt() + self.eps) + weight_decay * p);
        }
        true
    }
}

/// Noam-shaped schedule: linear warmup to `peak_lr`, then inverse-sqrt
/// decay; continuous at `step == warmup`. Step 0 is treated as 1.
pub fn lr_at(step: usize, peak_lr: f64, warmup_steps: usize) -> f64 {
    let s = step.max(1) as f64;
    let w = warmup_steps.max(1) as f64;
    peak_lr * (s / w).min((w / s).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_param(value: f64) -> (ParamSet, GradStore) {
        let mut ps = ParamSet::new();
        let id = ps.alloc("p", &[1]);
        ps.fill(id, value);
        let g = GradStore::zeros_like(&ps);
        (ps, g)
    }

    #[test]
    fn one_step_hand_computed() {
        let (mut ps, mut g) = single_param(1.0);
        g.data[0] = 0.5;
        let mut opt = AdamW::new(1);
        assert!(opt.apply(&mut ps, &g, 0.1, 0.0));
        // m_hat = 0.5, v_hat = 0.25 after bias correction.
        let want = 1.0 - 0.1 * (0.5 / (0.25f64.sqrt() + 1e-8));
        assert!((ps.data[0] - want).abs() < 1e-12);
        assert!((ps.data[0] - 0.9).abs() < 1e-7);
    }

    #[test]
    fn zero_grad_zero_decay_leaves_params() {
        let (mut ps, g) = single_param(2.0);
        let mut opt = AdamW::new(1);
        for _ in 0..5 {
            opt.apply(&mut ps, &g, 0.1, 0.0);
        }
        assert_eq!(ps.data[0], 2.0);
    }

    #[test]
    fn moments_decay_toward_zero_on_zero_grad() {
        let (mut ps, g) = single_param(2.0);
        let mut opt = AdamW::new(1);
        opt.m[0] = 0.3;
        opt.v[0] = 0.2;
        for _ in 0..5 {
            opt.apply(&mut ps, &g, 0.1, 0.0);
        }
        assert!(opt.m[0] < 0.3 && opt.m[0] > 0.0);
        assert!(opt.v[0] < 0.2 && opt.v[0] > 0.0);
    }

    #[test]
    fn decoupled_decay_is_exact_multiplier() {
        let (mut ps, g) = single_param(3.0);
        let mut opt = AdamW::new(1);
        opt.apply(&mut ps, &g, 0.1, 0.01);
        assert_eq!(ps.data[0], 3.0 * (1.0 - 0.1 * 0.01));
    }

    #[test]
    fn non_finite_grad_skips_step() {
        let (mut ps, mut g) = single_param(1.0);
        g.data[0] = f64::NAN;
        let mut opt = AdamW::new(1);
        assert!(!opt.apply(&mut ps, &g, 0.1, 0.0));
        assert_eq!(ps.data[0], 1.0);
        assert_eq!(opt.step, 0);
        assert_eq!(opt.skipped_steps, 1);
    }

    #[test]
    fn schedule_shape() {
        let peak = 2e-3;
        let w = 100;
        assert_eq!(lr_at(w, peak, w), peak);
        assert!((lr_at(w / 2, peak, w) - peak / 2.0).abs() < 1e-15);
        assert!((lr_at(4 * w, peak, w) - peak / 2.0).abs() < 1e-15);
        assert_eq!(lr_at(0, peak, w), lr_at(1, peak, w));
        // Monotone up before warmup, monotone down after.
        assert!(lr_at(10, peak, w) < lr_at(50, peak, w));
        assert!(lr_at(300, peak, w) > lr_at(900, peak, w));
    }
}
