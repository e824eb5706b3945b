//! Selective state-space core.
//!
//! Per channel d and state index n the scan computes
//!
//! ```text
//! h_t[d,n] = exp(delta_t[d] * A[d,n]) * h_{t-1}[d,n] + delta_t[d] * B_t[n] * x_t[d]
//! y_t[d]   = sum_n C_t[n] * h_t[d,n] + D[d] * x_t[d]
//! ```
//!
//! with input-dependent delta = softplus(W_dt x + b_dt), B = W_b x,
//! C = W_c x, and A = -exp(a_log) diagonal per (channel, state). Two scan
//! kernels share this module's preparation and backward pass; see
//! [`scan`] for the kernel registry.

pub mod block;
pub mod scan;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::nn::linear::Linear;
use crate::nn::{sigmoid, softplus, softplus_inv};
use crate::params::{GradStore, ParamId, ParamSet};

/// Learnable parameters of one selective scan.
#[derive(Debug, Clone)]
pub struct SsmParams {
    /// `[d_inner, n]`, effective state matrix A = -exp(a_log).
    pub a_log: ParamId,
    /// `[d_inner]` skip weights.
    pub d_skip: ParamId,
    /// d_inner -> d_inner projection producing the step size (pre-softplus).
    pub dt_proj: Linear,
    /// d_inner -> n input projection for B.
    pub b_proj: Linear,
    /// d_inner -> n input projection for C.
    pub c_proj: Linear,
    pub d_inner: usize,
    pub n: usize,
}

impl SsmParams {
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        d_inner: usize,
        n: usize,
        rng: &mut ChaCha8Rng,
    ) -> SsmParams {
        let a_log = ps.alloc(format!("{name}.a_log"), &[d_inner, n]);
        // -A spans 1..n per channel.
        ps.set_from_fn(a_log, |i| (((i % n) + 1) as f64).ln());
        let d_skip = ps.alloc(format!("{name}.d_skip"), &[d_inner]);
        ps.fill(d_skip, 1.0);
        let dt_proj = Linear::new(ps, &format!("{name}.dt"), d_inner, d_inner, true, rng);
        // Bias chosen so softplus(bias) lands log-uniformly in [1e-3, 1e-1].
        let bias = dt_proj.b.expect("dt projection has a bias");
        ps.set_from_fn(bias, |_| {
            let u: f64 = rng.gen();
            let dt = (1e-3f64).ln() + u * ((1e-1f64).ln() - (1e-3f64).ln());
            softplus_inv(dt.exp())
        });
        let b_proj = Linear::new(ps, &format!("{name}.b"), d_inner, n, false, rng);
        let c_proj = Linear::new(ps, &format!("{name}.c"), d_inner, n, false, rng);
        SsmParams {
            a_log,
            d_skip,
            dt_proj,
            b_proj,
            c_proj,
            d_inner,
            n,
        }
    }

    /// Effective state matrix A = -exp(a_log), strictly negative for finite
    /// a_log entries.
    pub fn effective_a(&self, ps: &ParamSet) -> Array2<f64> {
        ps.view2(self.a_log).mapv(|v| -v.exp())
    }

    /// Input-dependent quantities shared by every kernel.
    pub fn prepare(&self, ps: &ParamSet, x: &Array2<f64>) -> ScanPrep {
        let dt_pre = self.dt_proj.forward(ps, x);
        let delta = dt_pre.mapv(softplus);
        let b_in = self.b_proj.forward(ps, x);
        let c_in = self.c_proj.forward(ps, x);
        ScanPrep {
            dt_pre,
            delta,
            b_in,
            c_in,
            a: self.effective_a(ps),
            d_skip: ps.view1(self.d_skip).to_owned(),
        }
    }
}

/// Per-timestep scan inputs derived from x.
#[derive(Debug)]
pub struct ScanPrep {
    /// `[T, d_inner]` pre-softplus step sizes.
    pub dt_pre: Array2<f64>,
    /// `[T, d_inner]` positive step sizes.
    pub delta: Array2<f64>,
    /// `[T, n]`.
    pub b_in: Array2<f64>,
    /// `[T, n]`.
    pub c_in: Array2<f64>,
    /// `[d_inner, n]` effective A.
    pub a: Array2<f64>,
    /// `[d_inner]` skip weights (materialized so kernels need no ParamSet).
    pub d_skip: ndarray::Array1<f64>,
}

/// Kernel output. `states` holds h after every step when requested
/// (required by the backward pass).
#[derive(Debug)]
pub struct ScanRun {
    pub y: Array2<f64>,
    pub h_final: Array2<f64>,
    pub states: Option<Vec<Array2<f64>>>,
}

/// Shared backward pass for both kernels. Consumes the stored per-step
/// states; gradients for delta/B/C are pushed back through their input
/// projections, so `dx` collects every path through which x enters the
/// scan. Returns dx.
pub fn scan_backward(
    ps: &ParamSet,
    params: &SsmParams,
    x: &Array2<f64>,
    prep: &ScanPrep,
    run: &ScanRun,
    h0: Option<&Array2<f64>>,
    dy: &Array2<f64>,
    g: &mut GradStore,
) -> Array2<f64> {
    let (t_len, di) = x.dim();
    let n = params.n;
    let states = run
        .states
        .as_ref()
        .expect("scan_backward needs a run with stored states");
    debug_assert_eq!(states.len(), t_len);

    let d_skip = ps.view1(params.d_skip);
    let mut dx = Array2::zeros((t_len, di));
    let mut ddelta = Array2::zeros((t_len, di));
    let mut db_in = Array2::zeros((t_len, n));
    let mut dc_in = Array2::zeros((t_len, n));
    let mut da: Array2<f64> = Array2::zeros((di, n));
    let mut dd_skip = vec![0.0; di];

    // Gradient flowing into h_t from steps after t.
    let mut gh: Array2<f64> = Array2::zeros((di, n));
    let zero_h: Array2<f64> = Array2::zeros((di, n));
    for t in (0..t_len).rev() {
        let h_prev = if t == 0 {
            h0.unwrap_or(&zero_h)
        } else {
            &states[t - 1]
        };
        let h_t = &states[t];
        for d in 0..di {
            let dyv = dy[[t, d]];
            let xv = x[[t, d]];
            let dt = prep.delta[[t, d]];
            dd_skip[d] += dyv * xv;
            dx[[t, d]] += d_skip[d] * dyv;
            let mut ddelta_acc = 0.0;
            let mut dx_acc = 0.0;
            for j in 0..n {
                // Readout y_t = sum_n c * h_t (+ skip).
                let ghv = gh[[d, j]] + dyv * prep.c_in[[t, j]];
                dc_in[[t, j]] += dyv * h_t[[d, j]];
                // Transition h_t = a ⊙ h_{t-1} + delta * b * x.
                let a_t = (dt * prep.a[[d, j]]).exp();
                let da_t = ghv * h_prev[[d, j]];
                ddelta_acc += da_t * prep.a[[d, j]] * a_t;
                da[[d, j]] += da_t * dt * a_t;
                // Drive term.
                let b = prep.b_in[[t, j]];
                ddelta_acc += ghv * b * xv;
                db_in[[t, j]] += ghv * dt * xv;
                dx_acc += ghv * dt * b;
                gh[[d, j]] = ghv * a_t;
            }
            ddelta[[t, d]] += ddelta_acc;
            dx[[t, d]] += dx_acc;
        }
    }

    // a_log: dA/da_log = -exp(a_log) = A.
    {
        let mut ga = g.view2_mut(ps, params.a_log);
        for d in 0..di {
            for j in 0..n {
                ga[[d, j]] += da[[d, j]] * prep.a[[d, j]];
            }
        }
        let mut gd = g.view1_mut(ps, params.d_skip);
        for d in 0..di {
            gd[d] += dd_skip[d];
        }
    }

    // delta = softplus(dt_pre).
    let mut ddt_pre = ddelta;
    ndarray::Zip::from(&mut ddt_pre)
        .and(&prep.dt_pre)
        .for_each(|gd, &pre| *gd *= sigmoid(pre));

    dx += &params.dt_proj.backward(ps, x, &ddt_pre, g);
    dx += &params.b_proj.backward(ps, x, &db_in, g);
    dx += &params.c_proj.backward(ps, x, &dc_in, g);
    dx
}
