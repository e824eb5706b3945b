//! Independent reference implementations used for verification.
//!
//! Everything here deliberately avoids the production code paths it
//! checks: the scan reference re-reads raw parameters and evaluates the
//! recurrence in double-double (~31 significant digits) arithmetic; the
//! edit-distance oracle is a plain exponential recursion; the table model
//! and exhaustive enumeration validate the searches on spaces small
//! enough to brute-force.

use std::collections::HashMap;

use ndarray::Array2;

use crate::config::SearchParams;
use crate::error::Result;
use crate::params::ParamSet;
use crate::search::{DecodeState, Hypothesis, StepModel};
use crate::ssm::SsmParams;

// ---- double-double arithmetic -------------------------------------------

/// Unevaluated sum hi + lo with |lo| <= ulp(hi)/2.
#[derive(Debug, Clone, Copy)]
pub struct Dd {
    pub hi: f64,
    pub lo: f64,
}

impl Dd {
    pub const ZERO: Dd = Dd { hi: 0.0, lo: 0.0 };

    pub fn from_f64(v: f64) -> Dd {
        Dd { hi: v, lo: 0.0 }
    }

    pub fn value(self) -> f64 {
        self.hi + self.lo
    }
}

fn two_sum(a: f64, b: f64) -> Dd {
    let s = a + b;
    let bb = s - a;
    let err = (a - (s - bb)) + (b - bb);
    Dd { hi: s, lo: err }
}

fn two_prod(a: f64, b: f64) -> Dd {
    let p = a * b;
    let e = a.mul_add(b, -p);
    Dd { hi: p, lo: e }
}

pub fn dd_add(x: Dd, y: Dd) -> Dd {
    let s = two_sum(x.hi, y.hi);
    let lo = s.lo + x.lo + y.lo;
    let r = two_sum(s.hi, lo);
    Dd { hi: r.hi, lo: r.lo }
}

pub fn dd_add_f64(x: Dd, v: f64) -> Dd {
    dd_add(x, Dd::from_f64(v))
}

pub fn dd_mul_f64(x: Dd, v: f64) -> Dd {
    let p = two_prod(x.hi, v);
    let lo = p.lo + x.lo * v;
    let r = two_sum(p.hi, lo);
    Dd { hi: r.hi, lo: r.lo }
}

/// Compensated dot product of a weight row with x, plus an optional bias.
fn dd_dot(w_row: &[f64], x: &[f64], bias: f64) -> Dd {
    let mut acc = Dd::from_f64(bias);
    for (&w, &xv) in w_row.iter().zip(x) {
        acc = dd_add(acc, two_prod(w, xv));
    }
    acc
}

// ---- extended-precision selective scan ----------------------------------

/// Brute-force re-evaluation of the selective-scan recurrence with
/// double-double state accumulation. Transcendentals (exp, softplus) run
/// in f64; the accumulation paths that drift over long sequences are the
/// compensated ones.
pub fn scan_reference(
    ps: &ParamSet,
    params: &SsmParams,
    x: &Array2<f64>,
    h0: Option<&Array2<f64>>,
) -> Array2<f64> {
    let (t_len, di) = x.dim();
    let n = params.n;
    let w_dt = ps.view2(params.dt_proj.w);
    let b_dt = params.dt_proj.b.map(|b| ps.view1(b));
    let w_b = ps.view2(params.b_proj.w);
    let w_c = ps.view2(params.c_proj.w);
    let a_log = ps.view2(params.a_log);
    let d_skip = ps.view1(params.d_skip);

    let mut h: Vec<Dd> = match h0 {
        Some(h0) => h0.iter().map(|&v| Dd::from_f64(v)).collect(),
        None => vec![Dd::ZERO; di * n],
    };
    let mut y = Array2::zeros((t_len, di));
    for t in 0..t_len {
        let x_t: Vec<f64> = x.row(t).to_vec();
        let delta: Vec<f64> = (0..di)
            .map(|d| {
                let bias = b_dt.as_ref().map(|b| b[d]).unwrap_or(0.0);
                softplus_f64(dd_dot(w_dt.row(d).to_slice().unwrap(), &x_t, bias).value())
            })
            .collect();
        let b_in: Vec<f64> = (0..n)
            .map(|j| dd_dot(w_b.row(j).to_slice().unwrap(), &x_t, 0.0).value())
            .collect();
        let c_in: Vec<f64> = (0..n)
            .map(|j| dd_dot(w_c.row(j).to_slice().unwrap(), &x_t, 0.0).value())
            .collect();
        for d in 0..di {
            let drive = delta[d] * x_t[d];
            let mut acc = Dd::ZERO;
            for j in 0..n {
                let a = -a_log[[d, j]].exp();
                let decay = (delta[d] * a).exp();
                let idx = d * n + j;
                h[idx] = dd_add_f64(dd_mul_f64(h[idx], decay), drive * b_in[j]);
                acc = dd_add(acc, dd_mul_f64(h[idx], c_in[j]));
            }
            y[[t, d]] = dd_add_f64(acc, d_skip[d] * x_t[d]).value();
        }
    }
    y
}

fn softplus_f64(v: f64) -> f64 {
    if v > 30.0 {
        v
    } else if v < -30.0 {
        v.exp()
    } else {
        v.exp().ln_1p()
    }
}

// ---- brute-force edit distance ------------------------------------------

/// Plain recursive Levenshtein distance over token slices. Exponential;
/// only for short sequences.
pub fn edit_distance_slow<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    if b.is_empty() {
        return a.len();
    }
    let sub_cost = usize::from(a[a.len() - 1] != b[b.len() - 1]);
    let sub = edit_distance_slow(&a[..a.len() - 1], &b[..b.len() - 1]) + sub_cost;
    let ins = edit_distance_slow(a, &b[..b.len() - 1]) + 1;
    let del = edit_distance_slow(&a[..a.len() - 1], b) + 1;
    sub.min(ins).min(del)
}

// ---- hand-specified step model and exhaustive search --------------------

/// Step model defined by literal probability tables keyed on the
/// generated prefix. Unlisted prefixes use the default row.
pub struct TableModel {
    vocab: usize,
    eos: u32,
    bos: u32,
    rows: HashMap<Vec<u32>, Vec<f64>>,
    default: Vec<f64>,
}

#[derive(Clone)]
struct PrefixState(Vec<u32>);

impl DecodeState for PrefixState {
    fn clone_box(&self) -> Box<dyn DecodeState> {
        Box::new(self.clone())
    }
    fn as_any(&self) -> &dyn std::any::Any {
        self
    }
}

impl TableModel {
    /// `rows` maps a generated prefix to raw probabilities over the vocab
    /// (normalized here).
    pub fn new(
        vocab: usize,
        eos: u32,
        rows: Vec<(Vec<u32>, Vec<f64>)>,
        default: Vec<f64>,
    ) -> TableModel {
        let norm = |v: &[f64]| -> Vec<f64> {
            let s: f64 = v.iter().sum();
            v.iter().map(|p| (p / s).ln()).collect()
        };
        TableModel {
            vocab,
            eos,
            bos: vocab as u32, // outside the output inventory
            rows: rows.into_iter().map(|(k, v)| (k, norm(&v))).collect(),
            default: norm(&default),
        }
    }

    /// Probability one on EOS everywhere.
    pub fn certain_eos(vocab: usize) -> TableModel {
        let mut probs = vec![0.0; vocab];
        probs[0] = 1.0;
        TableModel::new(vocab, 0, vec![], probs)
    }

    /// EOS is vanishingly unlikely; decoding must hit max_len.
    pub fn never_eos(vocab: usize) -> TableModel {
        let mut probs = vec![1.0; vocab];
        probs[0] = 1e-12;
        TableModel::new(vocab, 0, vec![], probs)
    }

    /// Three tokens {EOS, A, B}, tables chosen so greedy is suboptimal:
    /// greedy follows A (p .58) but the best finished sequence is B, EOS.
    pub fn three_step_example() -> TableModel {
        let (eos, a, b) = (0u32, 1u32, 2u32);
        TableModel::new(
            3,
            eos,
            vec![
                (vec![], vec![0.02, 0.58, 0.40]),
                (vec![a], vec![0.10, 0.20, 0.70]),
                (vec![b], vec![0.90, 0.05, 0.05]),
                (vec![a, b], vec![0.80, 0.15, 0.05]),
            ],
            vec![0.80, 0.10, 0.10],
        )
    }
}

impl StepModel for TableModel {
    fn vocab_size(&self) -> usize {
        self.vocab
    }
    fn bos_id(&self) -> u32 {
        self.bos
    }
    fn eos_id(&self) -> u32 {
        self.eos
    }
    fn init_state(&self) -> Box<dyn DecodeState> {
        Box::new(PrefixState(Vec::new()))
    }

    fn step(&self, state: &dyn DecodeState, token: u32) -> Result<(Vec<f64>, Box<dyn DecodeState>)> {
        let prefix = &state
            .as_any()
            .downcast_ref::<PrefixState>()
            .expect("table-model state")
            .0;
        let mut next = prefix.clone();
        if token != self.bos {
            next.push(token);
        }
        let lp = self.rows.get(&next).unwrap_or(&self.default).clone();
        Ok((lp, Box::new(PrefixState(next))))
    }
}

/// Exhaustively enumerate every decode of up to `max_len` generated
/// tokens and return the best finished hypothesis under the same
/// normalized score and tie-break the beam uses (best truncated one when
/// nothing finishes).
pub fn enumerate_best(model: &dyn StepModel, params: &SearchParams) -> Result<Hypothesis> {
    fn recurse(
        model: &dyn StepModel,
        state: &dyn DecodeState,
        last: u32,
        tokens: &mut Vec<u32>,
        log_prob: f64,
        depth_left: usize,
        out: &mut Vec<Hypothesis>,
    ) -> Result<()> {
        if depth_left == 0 {
            out.push(Hypothesis {
                tokens: tokens.clone(),
                log_prob,
                finished: false,
                truncated: true,
                state: None,
            });
            return Ok(());
        }
        let (lp, next) = model.step(state, last)?;
        for tok in 0..model.vocab_size() as u32 {
            tokens.push(tok);
            let score = log_prob + lp[tok as usize];
            if tok == model.eos_id() {
                out.push(Hypothesis {
                    tokens: tokens.clone(),
                    log_prob: score,
                    finished: true,
                    truncated: false,
                    state: None,
                });
            } else {
                recurse(model, next.as_ref(), tok, tokens, score, depth_left - 1, out)?;
            }
            tokens.pop();
        }
        Ok(())
    }

    let mut all = Vec::new();
    let mut tokens = vec![model.bos_id()];
    let state = model.init_state();
    recurse(
        model,
        state.as_ref(),
        model.bos_id(),
        &mut tokens,
        0.0,
        params.max_len,
        &mut all,
    )?;
    let finished: Vec<&Hypothesis> = all.iter().filter(|h| h.finished).collect();
    let pool: Vec<&Hypothesis> = if finished.is_empty() {
        all.iter().collect()
    } else {
        finished
    };
    let alpha = params.length_penalty;
    let best = pool
        .into_iter()
        .max_by(|x, y| {
            x.normalized_score(alpha)
                .total_cmp(&y.normalized_score(alpha))
                .then_with(|| y.tokens.cmp(&x.tokens))
        })
        .expect("non-empty enumeration");
    Ok(best.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn dd_recovers_cancellation() {
        // (1e16 + 1) - 1e16 == 1 exactly in double-double.
        let a = dd_add_f64(Dd::from_f64(1e16), 1.0);
        let b = dd_add_f64(a, -1e16);
        assert_eq!(b.value(), 1.0);
    }

    #[test]
    fn scan_reference_matches_sequential_tightly() {
        use crate::ssm::scan::{kernel, selective_scan};
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut ps = ParamSet::new();
        let p = SsmParams::new(&mut ps, "ssm", 4, 8, &mut rng);
        let x = Array2::from_shape_fn((32, 4), |_| rng.gen_range(-2.0..2.0));
        let k = kernel("sequential").unwrap();
        let (_, run) = selective_scan(k.as_ref(), &ps, &p, &x, None, false).unwrap();
        let want = scan_reference(&ps, &p, &x, None);
        let max_abs = run
            .y
            .iter()
            .zip(want.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_abs < 1e-10, "max abs diff {max_abs}");
    }

    #[test]
    fn slow_edit_distance_basics() {
        let a = ["a", "b", "c"];
        assert_eq!(edit_distance_slow(&a, &a), 0);
        assert_eq!(edit_distance_slow(&a, &["a", "x", "c"]), 1);
        assert_eq!(edit_distance_slow(&a, &[]), 3);
        assert_eq!(edit_distance_slow::<&str>(&[], &[]), 0);
    }
}
