use crate::config::SearchParams;
use crate::error::Result;
use crate::search::{argmax_token, Hypothesis, SearchStrategy, StepModel};

/// Argmax decoding; ties break toward the lowest token id. Stops at EOS
/// or after max_len generated tokens.
pub struct Greedy;

impl SearchStrategy for Greedy {
    fn name(&self) -> &'static str {
        "greedy"
    }

    fn search(&self, model: &dyn StepModel, params: &SearchParams) -> Result<Vec<Hypothesis>> {
        let eos = model.eos_id();
        let mut state = model.init_state();
        let mut tokens = vec![model.bos_id()];
        let mut log_prob = 0.0;
        let mut finished = false;
        let mut last = model.bos_id();
        for _ in 0..params.max_len {
            let (lp, next) = model.step(state.as_ref(), last)?;
            let tok = argmax_token(&lp);
            log_prob += lp[tok as usize];
            tokens.push(tok);
            state = next;
            last = tok;
            if tok == eos {
                finished = true;
                break;
            }
        }
        Ok(vec![Hypothesis {
            tokens,
            log_prob,
            finished,
            truncated: !finished,
            state: Some(state),
        }])
    }
}
