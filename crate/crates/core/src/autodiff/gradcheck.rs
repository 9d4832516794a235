//! Central finite-difference verification of reverse-mode gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, NodeId};
use crate::error::Result;
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;

/// `|a - b| / max(1e-8, |a| + |b|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `(input index, flat coordinate)` of the worst coordinate.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    /// [`Graph::kink_margin`] of the unperturbed forward pass.
    pub kink_margin: f64,
    pub coords_checked: usize,
    /// Probed coordinates whose `±eps` evaluations left the smooth piece of
    /// the unperturbed pass; their errors are excluded from `max_rel_err`.
    pub kink_crossings: usize,
}

/// Which coordinates of each input to probe.
#[derive(Clone, Copy, Debug)]
pub enum Coords {
    All,
    /// Up to `count` coordinates per input, drawn without replacement.
    Sample {
        count: usize,
        seed: u64,
    },
}

fn evaluate<F>(f: &F, inputs: &[Tensor]) -> Result<(f64, Vec<usize>)>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &ids)?;
    Ok((g.value(out).item(), g.branch_pattern()))
}

/// Compares the gradient of the scalar `f(inputs)` against central
/// differences with step `eps`, returning the worst relative error over the
/// coordinates whose probes stay on one smooth piece.
pub fn check_gradients<F>(
    f: F,
    inputs: &[Tensor],
    eps: f64,
    coords: Coords,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = f(&mut g, &ids)?;
    let kink_margin = g.kink_margin();
    let pattern = g.branch_pattern();
    let grads = g.backward(out)?;

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        kink_margin,
        coords_checked: 0,
        kink_crossings: 0,
    };
    let mut probe = inputs.to_vec();
    for (which, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(ids[which])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(input.shape()));
        let picks: Vec<usize> = match coords {
            Coords::All => (0..input.len()).collect(),
            Coords::Sample { count, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (which as u64).wrapping_mul(0x9e37));
                let mut v = sample(&mut rng, input.len(), count.min(input.len())).into_vec();
                v.sort_unstable();
                v
            }
        };
        for k in picks {
            let orig = input.data()[k];
            probe[which].data_mut()[k] = orig + eps;
            let (plus, pp) = evaluate(&f, &probe)?;
            probe[which].data_mut()[k] = orig - eps;
            let (minus, pm) = evaluate(&f, &probe)?;
            probe[which].data_mut()[k] = orig;
            if pp != pattern || pm != pattern {
                report.kink_crossings += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.data()[k];
            let err = relative_error(a, numeric);
            report.coords_checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = (which, k);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

/// Single-input form: worst relative error of `f` at `x` over every
/// coordinate.
pub fn check_gradient<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    let report = check_gradients(
        |g, ids| f(g, ids[0]),
        std::slice::from_ref(x),
        eps,
        Coords::All,
    )?;
    Ok(report.max_rel_err)
}
