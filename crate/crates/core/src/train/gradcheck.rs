//! Central finite-difference verification of the hand-written backward
//! passes. Every module's backward is checked against this before it is
//! trusted by the training loop.

use ndarray::Array2;

use crate::params::{GradStore, ParamSet};

/// Per-parameter-group worst relative error, plus the input gradient
/// under the group name `"input"`.
#[derive(Debug)]
pub struct GradReport {
    pub groups: Vec<(String, f64)>,
    pub max_rel: f64,
}

impl GradReport {
    pub fn worst_group(&self) -> &str {
        self.groups
            .iter()
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(n, _)| n.as_str())
            .unwrap_or("-")
    }
}

impl std::fmt::Display for GradReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "max relative error {:.3e}", self.max_rel)?;
        for (name, err) in &self.groups {
            writeln!(f, "  {name}: {err:.3e}")?;
        }
        Ok(())
    }
}

// Relative error with an absolute guard: finite differences carry ~1e-10
// absolute noise in f64, so gradients below the guard compare absolutely.
fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Compare analytic gradients of a scalar loss against central finite
/// differences, perturbing every parameter value and every input cell.
///
/// `loss` must be a pure function of (params, input). `analytic` returns
/// the parameter gradients and the input gradient at the unperturbed
/// point.
pub fn grad_check(
    ps: &mut ParamSet,
    input: &Array2<f64>,
    epsilon: f64,
    mut loss: impl FnMut(&ParamSet, &Array2<f64>) -> f64,
    analytic: impl FnOnce(&ParamSet, &Array2<f64>) -> (GradStore, Array2<f64>),
) -> GradReport {
    assert!((1e-5..=1e-3).contains(&epsilon), "epsilon out of range");
    let (g, dx) = analytic(ps, input);

    let mut groups: Vec<(String, f64)> = Vec::new();
    for id in ps.ids().collect::<Vec<_>>() {
        let name = ps.name(id).to_string();
        let range = ps.range(id);
        let mut worst = 0.0f64;
        for i in range {
            let v = ps.data[i];
            let eps = epsilon * v.abs().max(1.0);
            ps.data[i] = v + eps;
            let up = loss(ps, input);
            ps.data[i] = v - eps;
            let down = loss(ps, input);
            ps.data[i] = v;
            let fd = (up - down) / (2.0 * eps);
            worst = worst.max(rel_err(g.data[i], fd));
        }
        groups.push((name, worst));
    }

    let mut x = input.clone();
    let mut worst_input = 0.0f64;
    for idx in 0..x.len() {
        let flat = x.as_slice_mut().unwrap();
        let v = flat[idx];
        let eps = epsilon * v.abs().max(1.0);
        flat[idx] = v + eps;
        let up = loss(ps, &x);
        let flat = x.as_slice_mut().unwrap();
        flat[idx] = v - eps;
        let down = loss(ps, &x);
        let flat = x.as_slice_mut().unwrap();
        flat[idx] = v;
        let fd = (up - down) / (2.0 * eps);
        worst_input = worst_input.max(rel_err(dx.as_slice().unwrap()[idx], fd));
    }
    groups.push(("input".to_string(), worst_input));

    let max_rel = groups.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    GradReport { groups, max_rel }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::linear::Linear;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_projection_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut ps = ParamSet::new();
        let lin = Linear::new(&mut ps, "lin", 4, 3, true, &mut rng);
        let x = Array2::from_shape_fn((5, 4), |_| rng.gen_range(-1.0..1.0));
        let report = grad_check(
            &mut ps,
            &x,
            1e-4,
            |ps, x| lin.forward(ps, x).sum(),
            |ps, x| {
                let y = lin.forward(ps, x);
                let dy = Array2::ones(y.raw_dim());
                let mut g = GradStore::zeros_like(ps);
                let dx = lin.backward(ps, x, &dy, &mut g);
                (g, dx)
            },
        );
        assert!(report.max_rel < 1e-6, "{report}");
    }

    #[test]
    fn scan_gradient_matches_finite_differences() {
        use crate::ssm::scan::{kernel, selective_scan};
        use crate::ssm::{scan_backward, SsmParams};

        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let mut ps = ParamSet::new();
        let p = SsmParams::new(&mut ps, "ssm", 2, 4, &mut rng);
        let x = Array2::from_shape_fn((8, 2), |_| rng.gen_range(-1.5..1.5));
        let k = kernel("sequential").unwrap();
        let report = grad_check(
            &mut ps,
            &x,
            1e-4,
            |ps, x| {
                selective_scan(k.as_ref(), ps, &p, x, None, false)
                    .unwrap()
                    .1
                    .y
                    .sum()
            },
            |ps, x| {
                let (prep, run) = selective_scan(k.as_ref(), ps, &p, x, None, true).unwrap();
                let dy = Array2::ones(run.y.raw_dim());
                let mut g = GradStore::zeros_like(ps);
                let dx = scan_backward(ps, &p, x, &prep, &run, None, &dy, &mut g);
                (g, dx)
            },
        );
        assert!(report.max_rel < 1e-4, "{report}");
    }

    #[test]
    fn mamba_block_gradient_matches_finite_differences() {
        use crate::ssm::block::{Direction, MambaBlock};
        use crate::ssm::scan::kernel;

        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut ps = ParamSet::new();
        let blk = MambaBlock::new(&mut ps, "blk", 3, 6, 4, 4, &mut rng);
        let x = Array2::from_shape_fn((8, 3), |_| rng.gen_range(-1.0..1.0));
        let k = kernel("sequential").unwrap();
        for direction in [Direction::Forward, Direction::Backward] {
            let report = grad_check(
                &mut ps,
                &x,
                1e-4,
                |ps, x| {
                    blk.forward(ps, x, direction, k.as_ref(), false)
                        .unwrap()
                        .0
                        .sum()
                },
                |ps, x| {
                    let (y, cache) = blk.forward(ps, x, direction, k.as_ref(), true).unwrap();
                    let dy = Array2::ones(y.raw_dim());
                    let mut g = GradStore::zeros_like(ps);
                    let dx = blk.backward(ps, cache.as_ref().unwrap(), &dy, &mut g);
                    (g, dx)
                },
            );
            assert!(report.max_rel < 1e-3, "{direction:?}: {report}");
        }
    }
}
