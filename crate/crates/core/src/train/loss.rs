//! Label-smoothed cross-entropy over decoder logits. Positions whose
//! target is PAD are excluded from the average; the smoothing mass is
//! spread uniformly over the non-pad symbols (gold included).

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::nn::log_softmax_rows;

pub struct LossOut {
    pub loss: f64,
    /// d loss / d logits, already averaged over non-pad positions.
    pub dlogits: Array2<f64>,
    pub n_positions: usize,
}

pub fn label_smoothed_ce(
    logits: &Array2<f64>,
    targets: &[u32],
    smoothing: f64,
    pad_id: u32,
) -> Result<LossOut> {
    let (t_len, vocab) = logits.dim();
    assert_eq!(t_len, targets.len(), "one target per logit row");
    let active: Vec<usize> = (0..t_len).filter(|&t| targets[t] != pad_id).collect();
    if active.is_empty() {
        return Err(Error::data("all target positions are padding"));
    }
    let m = active.len() as f64;
    let uniform = smoothing / (vocab as f64 - 1.0);
    let logp = log_softmax_rows(logits);

    let mut loss = 0.0;
    let mut dlogits = Array2::zeros((t_len, vocab));
    for &t in &active {
        let gold = targets[t] as usize;
        debug_assert!(gold < vocab, "target id within vocab");
        let mut row_loss = -(1.0 - smoothing) * logp[[t, gold]];
        if smoothing > 0.0 {
            for j in 0..vocab {
                if j as u32 != pad_id {
                    row_loss -= uniform * logp[[t, j]];
                }
            }
        }
        loss += row_loss;
        for j in 0..vocab {
            let q = if j as u32 == pad_id {
                0.0
            } else {
                uniform + if j == gold { 1.0 - smoothing } else { 0.0 }
            };
            dlogits[[t, j]] = (logp[[t, j]].exp() - q) / m;
        }
    }
    Ok(LossOut {
        loss: loss / m,
        dlogits,
        n_positions: active.len(),
    })
}
