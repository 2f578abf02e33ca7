//! Finite-difference verification of analytic gradients.
//!
//! Central differences in f64: truncation error is O(eps^2) and rounding
//! error O(machine_eps / eps), so eps near 1e-5 keeps both around 1e-10 for
//! losses of order one.

use super::graph::{Graph, NodeId, ParamSet};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct FdReport {
    /// Worst relative error seen: |analytic - fd| / max(|analytic| + |fd|, 1e-4).
    pub worst_rel: f64,
    pub worst_param: String,
    pub worst_coord: usize,
    pub coords_checked: usize,
}

/// Nudges every parameter by uniform noise in [-scale, scale]. Gradient
/// checks need a generic point: zero-initialized biases over zero inputs
/// park relu pre-activations exactly on their kink, where the loss is not
/// differentiable and central differences measure the subgradient midpoint
/// instead of the one-sided derivative backprop reports.
pub fn jitter_params(ps: &mut ParamSet, seed: u64, scale: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in 0..ps.len() {
        for v in ps.value_mut(p).iter_mut() {
            *v += (rng.random::<f64>() * 2.0 - 1.0) * scale;
        }
    }
}

/// Compares `backward` gradients against central differences.
///
/// `build` must construct the same scalar loss each call; any randomness
/// inside it has to be frozen (fixed dropout masks, fixed noise) or the
/// comparison is meaningless. `max_coords_per_param = 0` checks every
/// coordinate; a positive value samples that many per parameter using
/// `coord_seed`, keeping large models tractable.
pub fn finite_difference_report(
    build: &dyn Fn(&mut Graph, &ParamSet) -> NodeId,
    ps: &mut ParamSet,
    eps: f64,
    max_coords_per_param: usize,
    coord_seed: u64,
) -> FdReport {
    finite_difference_report_filtered(build, ps, eps, max_coords_per_param, coord_seed, &|_| false)
}

/// Like [`finite_difference_report`] but skips parameters for which `skip`
/// returns true. Needed when the loss contains a stop-gradient: central
/// differences measure the true total derivative, including paths the graph
/// deliberately cuts, so parameters upstream of a detach have to be verified
/// with a loss in which the detached branch carries zero weight.
pub fn finite_difference_report_filtered(
    build: &dyn Fn(&mut Graph, &ParamSet) -> NodeId,
    ps: &mut ParamSet,
    eps: f64,
    max_coords_per_param: usize,
    coord_seed: u64,
    skip: &dyn Fn(usize) -> bool,
) -> FdReport {
    let mut graph = Graph::new();
    let loss = build(&mut graph, ps);
    let grads = graph.backward(loss);

    let mut rng = ChaCha8Rng::seed_from_u64(coord_seed);
    let mut report = FdReport {
        worst_rel: 0.0,
        worst_param: String::new(),
        worst_coord: 0,
        coords_checked: 0,
    };
    for p in 0..ps.len() {
        if skip(p) {
            continue;
        }
        let n = ps.value(p).len();
        let coords: Vec<usize> = if max_coords_per_param == 0 || n <= max_coords_per_param {
            (0..n).collect()
        } else {
            (0..max_coords_per_param)
                .map(|_| rng.random_range(0..n))
                .collect()
        };
        for i in coords {
            let orig = ps.value(p).as_slice().unwrap()[i];
            ps.value_mut(p).as_slice_mut().unwrap()[i] = orig + eps;
            let mut gp = Graph::new();
            let lp = {
                let node = build(&mut gp, ps);
                gp.scalar(node)
            };
            ps.value_mut(p).as_slice_mut().unwrap()[i] = orig - eps;
            let mut gm = Graph::new();
            let lm = {
                let node = build(&mut gm, ps);
                gm.scalar(node)
            };
            ps.value_mut(p).as_slice_mut().unwrap()[i] = orig;
            let fd = (lp - lm) / (2.0 * eps);
            let an = grads.param(p).map(|g| g.as_slice().unwrap()[i]).unwrap_or(0.0);
            let rel = (an - fd).abs() / (an.abs() + fd.abs()).max(1e-4);
            report.coords_checked += 1;
            if rel > report.worst_rel {
                report.worst_rel = rel;
                report.worst_param = ps.name(p).to_string();
                report.worst_coord = i;
            }
        }
    }
    report
}
