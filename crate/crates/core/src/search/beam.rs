//! Beam search with GNMT length normalization.
//!
//! Each step expands every live hypothesis over the full vocabulary,
//! scans the candidates best-first (ties toward lower token id, then the
//! older hypothesis), moves EOS candidates to a completed pool, and keeps
//! the best `beam_size` unfinished ones. With beam_size 1 this is
//! token-identical to greedy decoding, including tie-breaking.

use crate::config::SearchParams;
use crate::error::Result;
use crate::search::{Hypothesis, SearchStrategy, StepModel};

pub struct Beam;

struct Live {
    tokens: Vec<u32>,
    log_prob: f64,
    state: Box<dyn crate::search::DecodeState>,
    last: u32,
}

impl SearchStrategy for Beam {
    fn name(&self) -> &'static str {
        "beam"
    }

    fn search(&self, model: &dyn StepModel, params: &SearchParams) -> Result<Vec<Hypothesis>> {
        let eos = model.eos_id();
        let beam = params.beam_size;
        let mut live = vec![Live {
            tokens: vec![model.bos_id()],
            log_prob: 0.0,
            state: model.init_state(),
            last: model.bos_id(),
        }];
        let mut completed: Vec<Hypothesis> = Vec::new();

        for _ in 0..params.max_len {
            if live.is_empty() {
                break;
            }
            // Expand: one step per live hypothesis, then rank all
            // (hypothesis, token) continuations.
            let mut stepped = Vec::with_capacity(live.len());
            for hyp in &live {
                stepped.push(model.step(hyp.state.as_ref(), hyp.last)?);
            }
            let mut candidates: Vec<(f64, usize, u32)> = Vec::new();
            for (hi, (lp, _)) in stepped.iter().enumerate() {
                for (tok, &l) in lp.iter().enumerate() {
                    candidates.push((live[hi].log_prob + l, hi, tok as u32));
                }
            }
            candidates.sort_by(|a, b| {
                b.0.total_cmp(&a.0)
                    .then_with(|| a.2.cmp(&b.2))
                    .then_with(|| a.1.cmp(&b.1))
            });

            let mut next_live: Vec<Live> = Vec::with_capacity(beam);
            for (score, hi, tok) in candidates {
                if next_live.len() >= beam {
                    break;
                }
                let mut tokens = live[hi].tokens.clone();
                tokens.push(tok);
                if tok == eos {
                    completed.push(Hypothesis {
                        tokens,
                        log_prob: score,
                        finished: true,
                        truncated: false,
                        state: Some(stepped[hi].1.clone()),
                    });
                } else {
                    next_live.push(Live {
                        tokens,
                        log_prob: score,
                        state: stepped[hi].1.clone(),
                        last: tok,
                    });
                }
            }
            live = next_live;
        }

        let mut out = completed;
        if out.is_empty() {
            // Nothing finished within max_len: surface the best partials,
            // flagged as truncated.
            out = live
                .into_iter()
                .map(|h| Hypothesis {
                    tokens: h.tokens,
                    log_prob: h.log_prob,
                    finished: false,
                    truncated: true,
                    state: Some(h.state),
                })
                .collect();
        }
        let alpha = params.length_penalty;
        out.sort_by(|a, b| {
            b.normalized_score(alpha)
                .total_cmp(&a.normalized_score(alpha))
                .then_with(|| a.tokens.cmp(&b.tokens))
        });
        out.truncate(params.beam_size);
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::TableModel;
    use crate::search::strategy;

    fn params(beam: usize, max_len: usize) -> SearchParams {
        SearchParams {
            beam_size: beam,
            length_penalty: 0.6,
            max_len,
        }
    }

    #[test]
    fn instant_eos_gives_empty_transcript_logprob_zero() {
        // Probability one on EOS from the start.
        let model = TableModel::certain_eos(4);
        let greedy = strategy("greedy").unwrap();
        let hyps = greedy.search(&model, &params(1, 10)).unwrap();
        assert_eq!(hyps[0].tokens, vec![model.bos_id(), model.eos_id()]);
        assert!(hyps[0].finished);
        assert_eq!(hyps[0].log_prob, 0.0);
    }

    #[test]
    fn beam_one_equals_greedy_tokens() {
        let model = TableModel::three_step_example();
        let g = strategy("greedy").unwrap().search(&model, &params(1, 8)).unwrap();
        let b = strategy("beam").unwrap().search(&model, &params(1, 8)).unwrap();
        assert_eq!(g[0].tokens, b[0].tokens);
        assert_eq!(g[0].log_prob, b[0].log_prob);
    }

    #[test]
    fn beam_score_monotone_in_width() {
        let model = TableModel::three_step_example();
        let mut prev_best = f64::NEG_INFINITY;
        for beam in [1, 2, 4, 8, 27] {
            let hyps = strategy("beam")
                .unwrap()
                .search(&model, &params(beam, 3))
                .unwrap();
            let best = hyps
                .iter()
                .map(|h| h.log_prob)
                .fold(f64::NEG_INFINITY, f64::max);
            assert!(
                best >= prev_best - 1e-12,
                "beam {beam} best {best} < previous {prev_best}"
            );
            prev_best = prev_best.max(best);
        }
    }

    #[test]
    fn full_width_beam_matches_exhaustive_enumeration() {
        use crate::oracle::enumerate_best;
        let model = TableModel::three_step_example();
        let p = params(27, 3); // |vocab|^max_len = 3^3
        let hyps = strategy("beam").unwrap().search(&model, &p).unwrap();
        let best = enumerate_best(&model, &p).unwrap();
        assert_eq!(hyps[0].tokens, best.tokens);
        assert!((hyps[0].log_prob - best.log_prob).abs() < 1e-12);
    }

    #[test]
    fn unfinishable_model_returns_truncated() {
        // EOS has probability ~0 everywhere.
        let model = TableModel::never_eos(3);
        let hyps = strategy("beam").unwrap().search(&model, &params(2, 5)).unwrap();
        assert!(!hyps.is_empty());
        assert!(hyps.iter().all(|h| h.truncated && !h.finished));
        assert!(hyps.iter().all(|h| h.gen_len() == 5));
    }
}
