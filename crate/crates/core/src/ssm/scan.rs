//! Scan kernels behind a common trait, selected by name at runtime.
//!
//! `sequential` is the plain left-to-right recurrence: the correctness
//! oracle and the incremental-decoding path. `parallel` realizes the same
//! recurrence through the associative segment operator
//! `(a1,b1) ⊕ (a2,b2) = (a2⊙a1, a2⊙b1 + b2)` over fixed-size chunks, with
//! chunk interiors processed in parallel. Both are O(T) work and agree to
//! rounding; chunk boundaries are fixed so results do not depend on the
//! worker count.

use ndarray::Array2;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::ssm::{ScanPrep, ScanRun, SsmParams};

pub trait ScanKernel: Send + Sync {
    fn name(&self) -> &'static str;

    /// Run the selective scan over `x` given precomputed per-step inputs.
    /// `h0` is the carried state (zeros when absent); `want_states` stores
    /// h after every step for a later backward pass.
    fn scan(
        &self,
        prep: &ScanPrep,
        x: &Array2<f64>,
        h0: Option<&Array2<f64>>,
        want_states: bool,
    ) -> Result<ScanRun>;
}

/// Instantiate a kernel by registry name.
pub fn kernel(name: &str) -> Option<Box<dyn ScanKernel>> {
    match name {
        "sequential" => Some(Box::new(SequentialScan)),
        "parallel" => Some(Box::new(ParallelScan::default())),
        _ => None,
    }
}

pub fn kernel_names() -> &'static [&'static str] {
    &["sequential", "parallel"]
}

/// Convenience wrapper: prepare inputs from x, then run `k`.
pub fn selective_scan(
    k: &dyn ScanKernel,
    ps: &ParamSet,
    params: &SsmParams,
    x: &Array2<f64>,
    h0: Option<&Array2<f64>>,
    want_states: bool,
) -> Result<(ScanPrep, ScanRun)> {
    let prep = params.prepare(ps, x);
    let run = k.scan(&prep, x, h0, want_states)?;
    Ok((prep, run))
}

/// Scan a contiguous span of global timesteps starting from `h`, writing
/// y rows at `t - y_offset` and optionally recording the state after each
/// step. Factored out so both kernels run the exact same per-step
/// arithmetic.
fn scan_span(
    prep: &ScanPrep,
    x: &Array2<f64>,
    range: std::ops::Range<usize>,
    y_offset: usize,
    h: &mut Array2<f64>,
    y: &mut Array2<f64>,
    mut states: Option<&mut Vec<Array2<f64>>>,
) -> Result<()> {
    let di = x.ncols();
    let n = prep.a.ncols();
    for t in range {
        let mut row_finite = true;
        for d in 0..di {
            let dt = prep.delta[[t, d]];
            let xv = x[[t, d]];
            let drive = dt * xv;
            let mut acc = 0.0;
            for j in 0..n {
                let a_t = (dt * prep.a[[d, j]]).exp();
                let hv = a_t * h[[d, j]] + drive * prep.b_in[[t, j]];
                h[[d, j]] = hv;
                acc += prep.c_in[[t, j]] * hv;
            }
            let out = acc + prep.d_skip[d] * xv;
            row_finite &= out.is_finite();
            y[[t - y_offset, d]] = out;
        }
        if !row_finite {
            return Err(Error::numeric(format!(
                "selective scan produced a non-finite value at timestep {t}"
            )));
        }
        if let Some(buf) = states.as_deref_mut() {
            buf.push(h.clone());
        }
    }
    Ok(())
}

pub struct SequentialScan;

impl ScanKernel for SequentialScan {
    fn name(&self) -> &'static str {
        "sequential"
    }

    fn scan(
        &self,
        prep: &ScanPrep,
        x: &Array2<f64>,
        h0: Option<&Array2<f64>>,
        want_states: bool,
    ) -> Result<ScanRun> {
        let (t_len, di) = x.dim();
        let n = prep.a.ncols();
        let mut h = match h0 {
            Some(h0) => h0.clone(),
            None => Array2::zeros((di, n)),
        };
        let mut y = Array2::zeros((t_len, di));
        let mut states = want_states.then(|| Vec::with_capacity(t_len));
        scan_span(prep, x, 0..t_len, 0, &mut h, &mut y, states.as_mut())?;
        Ok(ScanRun {
            y,
            h_final: h,
            states,
        })
    }
}

/// Chunked associative scan. Pass 1 composes each chunk into a single
/// segment (A_c, B_c); pass 2 folds the segments left to right to obtain
/// each chunk's entry state; pass 3 replays chunk interiors from those
/// states. Passes 1 and 3 run chunk-parallel.
pub struct ParallelScan {
    pub chunk: usize,
}

impl Default for ParallelScan {
    fn default() -> Self {
        ParallelScan { chunk: 128 }
    }
}

impl ScanKernel for ParallelScan {
    fn name(&self) -> &'static str {
        "parallel"
    }

    fn scan(
        &self,
        prep: &ScanPrep,
        x: &Array2<f64>,
        h0: Option<&Array2<f64>>,
        want_states: bool,
    ) -> Result<ScanRun> {
        let (t_len, di) = x.dim();
        let n = prep.a.ncols();
        if t_len == 0 {
            return Ok(ScanRun {
                y: Array2::zeros((0, di)),
                h_final: h0.cloned().unwrap_or_else(|| Array2::zeros((di, n))),
                states: want_states.then(Vec::new),
            });
        }
        let chunk = self.chunk.max(1);
        let ranges: Vec<std::ops::Range<usize>> = (0..t_len)
            .step_by(chunk)
            .map(|s| s..(s + chunk).min(t_len))
            .collect();

        // Pass 1: compose each chunk into (A_c, B_c).
        let composed: Vec<(Array2<f64>, Array2<f64>)> = ranges
            .par_iter()
            .map(|r| {
                let mut a_c = Array2::ones((di, n));
                let mut b_c = Array2::zeros((di, n));
                for t in r.clone() {
                    for d in 0..di {
                        let dt = prep.delta[[t, d]];
                        let drive = dt * x[[t, d]];
                        for j in 0..n {
                            let a_t = (dt * prep.a[[d, j]]).exp();
                            a_c[[d, j]] *= a_t;
                            b_c[[d, j]] = a_t * b_c[[d, j]] + drive * prep.b_in[[t, j]];
                        }
                    }
                }
                (a_c, b_c)
            })
            .collect();

        // Pass 2: entry state per chunk.
        let mut entry = Vec::with_capacity(ranges.len());
        let mut h_run = h0.cloned().unwrap_or_else(|| Array2::zeros((di, n)));
        for (a_c, b_c) in &composed {
            entry.push(h_run.clone());
            let mut next = b_c.clone();
            next += &(a_c * &h_run);
            h_run = next;
        }

        // Pass 3: replay interiors.
        struct Piece {
            y: Array2<f64>,
            h_final: Array2<f64>,
            states: Option<Vec<Array2<f64>>>,
        }
        let pieces: Vec<Result<Piece>> = ranges
            .par_iter()
            .zip(entry.into_par_iter())
            .map(|(r, mut h)| {
                let mut y = Array2::zeros((r.len(), di));
                let mut states = want_states.then(|| Vec::with_capacity(r.len()));
                scan_span(prep, x, r.clone(), r.start, &mut h, &mut y, states.as_mut())?;
                Ok(Piece {
                    y,
                    h_final: h,
                    states,
                })
            })
            .collect();

        let mut y = Array2::zeros((t_len, di));
        let mut states = want_states.then(|| Vec::with_capacity(t_len));
        let mut h_final = Array2::zeros((di, n));
        for (r, piece) in ranges.iter().zip(pieces) {
            let piece = piece?;
            y.slice_mut(ndarray::s![r.clone(), ..]).assign(&piece.y);
            if let (Some(all), Some(part)) = (states.as_mut(), piece.states) {
                all.extend(part);
            }
            h_final = piece.h_final;
        }
        Ok(ScanRun {
            y,
            h_final,
            states,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ssm::SsmParams;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_case(
        seed: u64,
        t_len: usize,
        di: usize,
        n: usize,
    ) -> (ParamSet, SsmParams, Array2<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let p = SsmParams::new(&mut ps, "ssm", di, n, &mut rng);
        let x = Array2::from_shape_fn((t_len, di), |_| rng.gen_range(-2.0..2.0));
        (ps, p, x)
    }

    #[test]
    fn registry_knows_both_kernels() {
        for name in kernel_names() {
            assert_eq!(kernel(name).unwrap().name(), *name);
        }
        assert!(kernel("quadratic").is_none());
    }

    #[test]
    fn parallel_matches_sequential_t1() {
        let (ps, p, x) = random_case(5, 1, 4, 8);
        let (_, seq) = selective_scan(&SequentialScan, &ps, &p, &x, None, false).unwrap();
        let (_, par) =
            selective_scan(&ParallelScan::default(), &ps, &p, &x, None, false).unwrap();
        assert_eq!(seq.y, par.y);
        assert_eq!(seq.h_final, par.h_final);
    }

    #[test]
    fn two_step_combine_matches_hand_expansion() {
        let (ps, p, x) = random_case(6, 2, 3, 4);
        let prep = p.prepare(&ps, &x);
        let (_, run) = selective_scan(&ParallelScan { chunk: 1 }, &ps, &p, &x, None, true).unwrap();
        // h_2 = a_2 ⊙ (a_1 ⊙ h_0 + b_1) + b_2 with h_0 = 0.
        for d in 0..3 {
            for j in 0..4 {
                let a1 = (prep.delta[[0, d]] * prep.a[[d, j]]).exp();
                let b1 = prep.delta[[0, d]] * prep.b_in[[0, j]] * x[[0, d]];
                let a2 = (prep.delta[[1, d]] * prep.a[[d, j]]).exp();
                let b2 = prep.delta[[1, d]] * prep.b_in[[1, j]] * x[[1, d]];
                let want = a2 * (a1 * 0.0 + b1) + b2;
                let got = run.states.as_ref().unwrap()[1][[d, j]];
                assert!((got - want).abs() < 1e-12, "({d},{j}): {got} vs {want}");
            }
        }
    }

    #[test]
    fn parallel_matches_sequential_long_random() {
        let (ps, p, x) = random_case(7, 256, 8, 16);
        let (_, seq) = selective_scan(&SequentialScan, &ps, &p, &x, None, false).unwrap();
        let (_, par) =
            selective_scan(&ParallelScan { chunk: 32 }, &ps, &p, &x, None, false).unwrap();
        let mut max_rel = 0.0f64;
        for (a, b) in seq.y.iter().zip(par.y.iter()) {
            let rel = (a - b).abs() / a.abs().max(b.abs()).max(1e-9);
            max_rel = max_rel.max(rel);
        }
        assert!(max_rel < 1e-5, "max relative diff {max_rel}");
    }

    #[test]
    fn chaining_matches_single_scan() {
        let (ps, p, x) = random_case(8, 48, 4, 8);
        let full = selective_scan(&SequentialScan, &ps, &p, &x, None, false)
            .unwrap()
            .1;
        let first = x.slice(ndarray::s![..20, ..]).to_owned();
        let rest = x.slice(ndarray::s![20.., ..]).to_owned();
        let r1 = selective_scan(&SequentialScan, &ps, &p, &first, None, false)
            .unwrap()
            .1;
        let r2 = selective_scan(&SequentialScan, &ps, &p, &rest, Some(&r1.h_final), false)
            .unwrap()
            .1;
        // Sequential chaining is exact.
        for t in 0..20 {
            for d in 0..4 {
                assert_eq!(full.y[[t, d]], r1.y[[t, d]]);
            }
        }
        for t in 0..28 {
            for d in 0..4 {
                assert_eq!(full.y[[20 + t, d]], r2.y[[t, d]]);
            }
        }

        // Parallel chaining agrees within tolerance.
        let pk = ParallelScan { chunk: 16 };
        let p1 = selective_scan(&pk, &ps, &p, &first, None, false).unwrap().1;
        let p2 = selective_scan(&pk, &ps, &p, &rest, Some(&p1.h_final), false)
            .unwrap()
            .1;
        for t in 0..28 {
            for d in 0..4 {
                let a = full.y[[20 + t, d]];
                let b = p2.y[[t, d]];
                assert!((a - b).abs() <= 1e-6 * a.abs().max(b.abs()).max(1.0));
            }
        }
    }

    #[test]
    fn non_finite_input_reports_timestep() {
        let (ps, p, mut x) = random_case(9, 8, 2, 4);
        x[[5, 1]] = f64::NAN;
        let err = selective_scan(&SequentialScan, &ps, &p, &x, None, false).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("timestep 5"), "message was {msg}");
    }
}
