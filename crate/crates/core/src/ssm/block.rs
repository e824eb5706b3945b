//! One Mamba block: in_proj -> split (x, z) -> causal depthwise conv ->
//! SiLU -> selective scan -> gate by SiLU(z) -> out_proj.
//!
//! The forward direction is strictly causal. The backward direction
//! time-reverses the input before the causal pipeline and the output
//! after it. A [`ScanState`] carries both the recurrent state and the
//! conv history so decoding can consume one frame at a time.

use ndarray::{s, Array2};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::nn::conv::CausalDepthwiseConv;
use crate::nn::linear::Linear;
use crate::nn::{silu, silu_grad};
use crate::params::{GradStore, ParamSet};
use crate::ssm::scan::{ScanKernel, SequentialScan};
use crate::ssm::{scan_backward, ScanPrep, ScanRun, SsmParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

/// Carried state for incremental processing: recurrent state plus the last
/// k-1 pre-conv inputs per channel.
#[derive(Debug, Clone)]
pub struct ScanState {
    /// `[d_inner, n]`.
    pub h: Array2<f64>,
    /// `[k-1, d_inner]`.
    pub conv_cache: Array2<f64>,
}

impl ScanState {
    pub fn zeros(d_inner: usize, n: usize, conv_kernel: usize) -> ScanState {
        ScanState {
            h: Array2::zeros((d_inner, n)),
            conv_cache: Array2::zeros((conv_kernel - 1, d_inner)),
        }
    }
}

#[derive(Debug, Clone)]
pub struct MambaBlock {
    pub in_proj: Linear,
    pub conv: CausalDepthwiseConv,
    pub ssm: SsmParams,
    pub out_proj: Linear,
    pub d_model: usize,
    pub d_inner: usize,
}

/// Forward intermediates kept for the backward pass. All tensors are in
/// pipeline time order (already reversed for Direction::Backward).
pub struct MambaBlockCache {
    u_dir: Array2<f64>,
    xz: Array2<f64>,
    conv_pre: Array2<f64>,
    x_act: Array2<f64>,
    prep: ScanPrep,
    run: ScanRun,
    y_gated: Array2<f64>,
    direction: Direction,
}

impl MambaBlock {
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        d_model: usize,
        d_inner: usize,
        n: usize,
        conv_kernel: usize,
        rng: &mut ChaCha8Rng,
    ) -> MambaBlock {
        MambaBlock {
            in_proj: Linear::new(ps, &format!("{name}.in_proj"), d_model, 2 * d_inner, true, rng),
            conv: CausalDepthwiseConv::new(ps, &format!("{name}.conv"), d_inner, conv_kernel, rng),
            ssm: SsmParams::new(ps, &format!("{name}.ssm"), d_inner, n, rng),
            out_proj: Linear::new(ps, &format!("{name}.out_proj"), d_inner, d_model, true, rng),
            d_model,
            d_inner,
        }
    }

    /// Full-sequence pass. `want_cache` retains intermediates for
    /// [`MambaBlock::backward`].
    pub fn forward(
        &self,
        ps: &ParamSet,
        u: &Array2<f64>,
        direction: Direction,
        kernel: &dyn ScanKernel,
        want_cache: bool,
    ) -> Result<(Array2<f64>, Option<MambaBlockCache>)> {
        let u_dir = match direction {
            Direction::Forward => u.clone(),
            Direction::Backward => reverse_rows(u),
        };
        let (y_dir, cache) = self.forward_causal(ps, &u_dir, None, kernel, want_cache, direction)?;
        let y = match direction {
            Direction::Forward => y_dir,
            Direction::Backward => reverse_rows(&y_dir),
        };
        Ok((y, cache))
    }

    /// Incremental causal pass continuing from `state` (forward direction
    /// only). Updates the state in place.
    pub fn step(
        &self,
        ps: &ParamSet,
        u: &Array2<f64>,
        state: &mut ScanState,
    ) -> Result<Array2<f64>> {
        let xz = self.in_proj.forward(ps, u);
        let x_in = xz.slice(s![.., ..self.d_inner]).to_owned();
        let z = xz.slice(s![.., self.d_inner..]).to_owned();
        let conv_pre = self.conv.forward(ps, &x_in, Some(&state.conv_cache));
        let next_cache = self.conv.next_history(&x_in, Some(&state.conv_cache));
        let x_act = conv_pre.mapv(silu);
        let prep = self.ssm.prepare(ps, &x_act);
        let run = SequentialScan.scan(&prep, &x_act, Some(&state.h), false)?;
        state.h = run.h_final;
        state.conv_cache = next_cache;
        let mut y_gated = run.y;
        ndarray::Zip::from(&mut y_gated)
            .and(&z)
            .for_each(|y, &zv| *y *= silu(zv));
        Ok(self.out_proj.forward(ps, &y_gated))
    }

    fn forward_causal(
        &self,
        ps: &ParamSet,
        u_dir: &Array2<f64>,
        state: Option<&ScanState>,
        kernel: &dyn ScanKernel,
        want_cache: bool,
        direction: Direction,
    ) -> Result<(Array2<f64>, Option<MambaBlockCache>)> {
        let xz = self.in_proj.forward(ps, u_dir);
        let x_in = xz.slice(s![.., ..self.d_inner]).to_owned();
        let z = xz.slice(s![.., self.d_inner..]);
        let conv_pre = self
            .conv
            .forward(ps, &x_in, state.map(|st| &st.conv_cache));
        let x_act = conv_pre.mapv(silu);
        let prep = self.ssm.prepare(ps, &x_act);
        let run = kernel.scan(&prep, &x_act, state.map(|st| &st.h), want_cache)?;
        let mut y_gated = run.y.clone();
        ndarray::Zip::from(&mut y_gated)
            .and(&z)
            .for_each(|y, &zv| *y *= silu(zv));
        let y = self.out_proj.forward(ps, &y_gated);
        let cache = want_cache.then(|| MambaBlockCache {
            u_dir: u_dir.clone(),
            xz,
            conv_pre,
            x_act,
            prep,
            run,
            y_gated,
            direction,
        });
        Ok((y, cache))
    }

    /// Backward through the whole block; returns du and accumulates
    /// parameter gradients.
    pub fn backward(
        &self,
        ps: &ParamSet,
        cache: &MambaBlockCache,
        dy: &Array2<f64>,
        g: &mut GradStore,
    ) -> Array2<f64> {
        let dy_dir = match cache.direction {
            Direction::Forward => dy.clone(),
            Direction::Backward => reverse_rows(dy),
        };
        let z = cache.xz.slice(s![.., self.d_inner..]);

        let dy_gated = self.out_proj.backward(ps, &cache.y_gated, &dy_dir, g);
        // y_gated = y_scan ⊙ silu(z)
        let mut dy_scan = dy_gated.clone();
        ndarray::Zip::from(&mut dy_scan)
            .and(&z)
            .for_each(|v, &zv| *v *= silu(zv));
        let mut dz = dy_gated;
        ndarray::Zip::from(&mut dz)
            .and(&cache.run.y)
            .and(&z)
            .for_each(|v, &ys, &zv| *v *= ys * silu_grad(zv));

        let mut dx_act = scan_backward(
            ps,
            &self.ssm,
            &cache.x_act,
            &cache.prep,
            &cache.run,
            None,
            &dy_scan,
            g,
        );
        ndarray::Zip::from(&mut dx_act)
            .and(&cache.conv_pre)
            .for_each(|v, &pre| *v *= silu_grad(pre));

        let x_in = cache.xz.slice(s![.., ..self.d_inner]).to_owned();
        let dx_in = self.conv.backward(ps, &x_in, None, &dx_act, g);

        let t_len = cache.u_dir.nrows();
        let mut dxz = Array2::zeros((t_len, 2 * self.d_inner));
        dxz.slice_mut(s![.., ..self.d_inner]).assign(&dx_in);
        dxz.slice_mut(s![.., self.d_inner..]).assign(&dz);
        let du_dir = self.in_proj.backward(ps, &cache.u_dir, &dxz, g);
        match cache.direction {
            Direction::Forward => du_dir,
            Direction::Backward => reverse_rows(&du_dir),
        }
    }
}

pub fn reverse_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(x.raw_dim());
    let t_len = x.nrows();
    for t in 0..t_len {
        out.row_mut(t).assign(&x.row(t_len - 1 - t));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ssm::scan::kernel;
    use rand::{Rng, SeedableRng};

    fn block(seed: u64, d_model: usize, d_inner: usize, n: usize) -> (ParamSet, MambaBlock) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let b = MambaBlock::new(&mut ps, "blk", d_model, d_inner, n, 4, &mut rng);
        (ps, b)
    }

    fn random_input(seed: u64, t: usize, d: usize) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((t, d), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn zero_input_zero_biases_gives_zero_output() {
        let (mut ps, b) = block(1, 6, 12, 4);
        ps.fill(b.in_proj.b.unwrap(), 0.0);
        ps.fill(b.out_proj.b.unwrap(), 0.0);
        ps.fill(b.conv.b, 0.0);
        let u = Array2::zeros((5, 6));
        let k = kernel("sequential").unwrap();
        let (y, _) = b.forward(&ps, &u, Direction::Forward, k.as_ref(), false).unwrap();
        assert!(y.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn forward_direction_is_strictly_causal() {
        let (ps, b) = block(2, 4, 8, 4);
        let u = random_input(3, 10, 4);
        let mut u2 = u.clone();
        u2[[7, 2]] += 5.0;
        let k = kernel("sequential").unwrap();
        let (y1, _) = b.forward(&ps, &u, Direction::Forward, k.as_ref(), false).unwrap();
        let (y2, _) = b.forward(&ps, &u2, Direction::Forward, k.as_ref(), false).unwrap();
        for t in 0..7 {
            for d in 0..4 {
                assert_eq!(y1[[t, d]], y2[[t, d]], "causality broken at t={t}");
            }
        }
        assert_ne!(y1.row(7), y2.row(7));
    }

    #[test]
    fn backward_direction_is_reversal_identity() {
        let (ps, b) = block(4, 4, 8, 4);
        let v = random_input(5, 9, 4);
        let k = kernel("sequential").unwrap();
        let (bwd, _) = b.forward(&ps, &v, Direction::Backward, k.as_ref(), false).unwrap();
        let (fwd_rev, _) = b
            .forward(&ps, &reverse_rows(&v), Direction::Forward, k.as_ref(), false)
            .unwrap();
        let want = reverse_rows(&fwd_rev);
        assert_eq!(bwd, want);
    }

    #[test]
    fn stepwise_matches_full_pass() {
        let (ps, b) = block(6, 4, 8, 4);
        let u = random_input(7, 6, 4);
        let k = kernel("sequential").unwrap();
        let (full, _) = b.forward(&ps, &u, Direction::Forward, k.as_ref(), false).unwrap();
        let mut state = ScanState::zeros(8, 4, 4);
        for t in 0..6 {
            let row = u.slice(s![t..t + 1, ..]).to_owned();
            let y = b.step(&ps, &row, &mut state).unwrap();
            for d in 0..4 {
                let a = full[[t, d]];
                let bval = y[[0, d]];
                assert!(
                    (a - bval).abs() < 1e-10,
                    "step/full mismatch at t={t}: {a} vs {bval}"
                );
            }
        }
    }
}
