use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

use crate::params::{GradStore, ParamId, ParamSet};

/// Token embedding table, scaled by sqrt(d_model) at lookup. The same table
/// doubles as the (tied) output projection.
#[derive(Debug, Clone)]
pub struct Embedding {
    pub table: ParamId,
    pub vocab: usize,
    pub d_model: usize,
    scale: f64,
}

impl Embedding {
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        vocab: usize,
        d_model: usize,
        rng: &mut ChaCha8Rng,
    ) -> Embedding {
        let table = ps.alloc(format!("{name}.table"), &[vocab, d_model]);
        ps.init_normal(table, rng, 1.0 / (d_model as f64).sqrt());
        Embedding {
            table,
            vocab,
            d_model,
            scale: (d_model as f64).sqrt(),
        }
    }

    pub fn forward(&self, ps: &ParamSet, ids: &[u32]) -> Array2<f64> {
        let table = ps.view2(self.table);
        let mut out = Array2::zeros((ids.len(), self.d_model));
        for (i, &id) in ids.iter().enumerate() {
            let row = table.row(id as usize);
            for j in 0..self.d_model {
                out[[i, j]] = row[j] * self.scale;
            }
        }
        out
    }

    pub fn backward(&self, ps: &ParamSet, ids: &[u32], dy: &Array2<f64>, g: &mut GradStore) {
        let mut gt = g.view2_mut(ps, self.table);
        for (i, &id) in ids.iter().enumerate() {
            for j in 0..self.d_model {
                gt[[id as usize, j]] += dy[[i, j]] * self.scale;
            }
        }
    }

    /// Tied output projection: logits = h . table^T .
    pub fn logits(&self, ps: &ParamSet, h: &Array2<f64>) -> Array2<f64> {
        h.dot(&ps.view2(self.table).t())
    }

    pub fn logits_backward(
        &self,
        ps: &ParamSet,
        h: &Array2<f64>,
        dlogits: &Array2<f64>,
        g: &mut GradStore,
    ) -> Array2<f64> {
        {
            let dt = dlogits.t().dot(h);
            let mut gt = g.view2_mut(ps, self.table);
            gt += &dt;
        }
        dlogits.dot(&ps.view2(self.table))
    }
}

/// Standard sinusoidal position encoding rows `[len, d]` starting at
/// position `t0` (used only when the config enables it).
pub fn sinusoidal_positions(t0: usize, len: usize, d: usize) -> Array2<f64> {
    let mut out = Array2::zeros((len, d));
    for i in 0..len {
        let pos = (t0 + i) as f64;
        for j in 0..d {
            let rate = 10000f64.powf(-((2 * (j / 2)) as f64) / d as f64);
            out[[i, j]] = if j % 2 == 0 {
                (pos * rate).sin()
            } else {
                (pos * rate).cos()
            };
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn lookup_is_scaled_table_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut ps = ParamSet::new();
        let emb = Embedding::new(&mut ps, "emb", 5, 4, &mut rng);
        let x = emb.forward(&ps, &[2, 2, 0]);
        let table = ps.view2(emb.table);
        for j in 0..4 {
            assert_eq!(x[[0, j]], table[[2, j]] * 2.0);
            assert_eq!(x[[1, j]], x[[0, j]]);
        }
    }

    #[test]
    fn sinusoidal_offset_matches_slice() {
        let a = sinusoidal_positions(0, 8, 6);
        let b = sinusoidal_positions(3, 2, 6);
        for i in 0..2 {
            for j in 0..6 {
                assert_eq!(a[[3 + i, j]], b[[i, j]]);
            }
        }
    }
}
