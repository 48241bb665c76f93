use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DiffError, Graph, NodeId, ParamStore, Tensor};

/// Worst coordinate found by [`grad_check`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub param: String,
    pub coordinate: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates_checked: usize,
    /// Coordinates whose step was shrunk because the one-sided differences
    /// disagreed (a ReLU or max-pool kink inside the step).
    pub refined: usize,
}

/// Which coordinates of each parameter tensor [`grad_check_sampled`] visits.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Sampling {
    /// Random coordinates per tensor, on top of the largest-gradient one.
    /// Tensors with at most this many values are checked exhaustively.
    pub per_param: usize,
    pub seed: u64,
}

/// Compares the tape gradient of the loss built by `build` against central
/// differences over every parameter coordinate.
///
/// The error for one coordinate is `|a - n| / max(1, |a|, |n|)`. When the
/// forward and backward differences disagree by more than [`KINK_TOLERANCE`]
/// the step is divided by 10, at most [`MAX_REFINE`] times, so that a kink
/// lying within `epsilon` of the evaluation point does not count as an error.
pub fn grad_check<F>(params: &ParamStore, epsilon: f64, build: F) -> Result<GradCheckReport, DiffError>
where
    F: Fn(&mut Graph<'_>) -> Result<NodeId, DiffError>,
{
    check_coordinates(params, epsilon, build, |_, g| (0..g.len()).collect())
}

/// Like [`grad_check`], but visits every parameter tensor at a subset of its
/// coordinates: the one with the largest analytic gradient magnitude plus
/// `per_param` drawn uniformly without replacement.
pub fn grad_check_sampled<F>(
    params: &ParamStore,
    epsilon: f64,
    sampling: Sampling,
    build: F,
) -> Result<GradCheckReport, DiffError>
where
    F: Fn(&mut Graph<'_>) -> Result<NodeId, DiffError>,
{
    check_coordinates(params, epsilon, build, |pidx, g| {
        let n = g.len();
        if n <= sampling.per_param + 1 {
            return (0..n).collect();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(sampling.seed);
        rng.set_stream(pidx as u64);
        let mut coords = rand::seq::index::sample(&mut rng, n, sampling.per_param).into_vec();
        let peak = (0..n)
            .max_by(|&a, &b| g.data()[a].abs().total_cmp(&g.data()[b].abs()))
            .unwrap_or(0);
        if !coords.contains(&peak) {
            coords.push(peak);
        }
        coords.sort_unstable();
        coords
    })
}

/// Relative disagreement of the one-sided differences that triggers a smaller step.
pub const KINK_TOLERANCE: f64 = 1e-4;
/// How many times the step may be divided by 10.
pub const MAX_REFINE: usize = 3;

fn check_coordinates<F, S>(params: &ParamStore, epsilon: f64, build: F, select: S) -> Result<GradCheckReport, DiffError>
where
    F: Fn(&mut Graph<'_>) -> Result<NodeId, DiffError>,
    S: Fn(usize, &Tensor) -> Vec<usize>,
{
    if !(epsilon > 0.0 && epsilon <= 1e-2) {
        return Err(DiffError::InvalidShape(format!("epsilon {epsilon} outside (0, 1e-2]")));
    }
    let analytic = {
        let mut g = Graph::new(params);
        let loss = build(&mut g)?;
        g.backward(loss)?
    };
    let eval = |p: &ParamStore| -> Result<f64, DiffError> {
        let mut g = Graph::new(p);
        let loss = build(&mut g)?;
        Ok(g.value(loss).data()[0])
    };

    let base = eval(params)?;
    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        param: String::new(),
        coordinate: 0,
        analytic: 0.0,
        numeric: 0.0,
        coordinates_checked: 0,
        refined: 0,
    };
    for pidx in 0..params.len() {
        for c in select(pidx, analytic.by_index(pidx)) {
            let orig = params.by_index(pidx).data()[c];
            let mut step = epsilon;
            let mut numeric;
            let mut shrunk = 0;
            loop {
                work.by_index_mut(pidx).data_mut()[c] = orig + step;
                let plus = eval(&work)?;
                work.by_index_mut(pidx).data_mut()[c] = orig - step;
                let minus = eval(&work)?;
                work.by_index_mut(pidx).data_mut()[c] = orig;
                numeric = (plus - minus) / (2.0 * step);
                let (fwd, bwd) = ((plus - base) / step, (base - minus) / step);
                let gap = (fwd - bwd).abs() / 1f64.max(fwd.abs()).max(bwd.abs());
                if gap <= KINK_TOLERANCE || shrunk == MAX_REFINE {
                    break;
                }
                step /= 10.0;
                shrunk += 1;
            }
            if shrunk > 0 {
                report.refined += 1;
            }
            let a = analytic.by_index(pidx).data()[c];
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            report.coordinates_checked += 1;
            if err > report.max_rel_error || report.param.is_empty() {
                report.max_rel_error = err;
                report.param = params.name(pidx).to_string();
                report.coordinate = c;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
