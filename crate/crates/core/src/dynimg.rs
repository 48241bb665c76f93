//! Dynamic images by rank pooling.
//!
//! A window of `K` frames is turned into prefix means `V_1..V_K` and the
//! dynamic image is the unique minimizer of
//!
//! ```text
//! f(d) = ½‖d‖² + δ · Σ_{i>j} max(0, 1 − d·(V_i − V_j)),   δ = 2 / (K(K−1))
//! ```
//!
//! with the slack variables eliminated. The minimizer lies in the span of the
//! pairwise differences, so the solver works on coefficients `c` with
//! `d = Σ_p c_p D_p` and only touches full-size tensors to build the Gram
//! matrix and the final image.

use rayon::prelude::*;
use thiserror::Error;

use crate::diffcore::Tensor;
use crate::modality::Modality;

#[derive(Debug, Error, PartialEq)]
pub enum RankPoolError {
    #[error("empty frame sequence")]
    Empty,
    #[error("window needs at least 2 frames, got {0}")]
    TooShort(usize),
    #[error("frame {index} has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        index: usize,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("non-finite values in frame {0}")]
    NonFinite(usize),
    #[error("frame index {index} out of range for a video of {len} frames")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("oracle supports at most 2 dimensions, got {0}")]
    OracleDimension(usize),
    #[error("invalid rank-pool config: {0}")]
    Config(String),
}

/// Ordered frames of one modality clip.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSequence {
    pub frames: Vec<Tensor>,
    pub modality: Modality,
    /// Index of `frames[0]` in the source video.
    pub origin: usize,
}

impl FrameSequence {
    pub fn new(frames: Vec<Tensor>, modality: Modality) -> Self {
        Self {
            frames,
            modality,
            origin: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankPoolConfig {
    window: usize,
    pub max_iters: usize,
    /// A step improving the objective by less than this tightens the
    /// subgradient enlargement; the solver stops once that bottoms out.
    pub tolerance: f64,
    /// First trial step of each backtracking search.
    pub initial_step: f64,
}

impl RankPoolConfig {
    pub fn new(window: usize) -> Result<Self, RankPoolError> {
        if window < 2 {
            return Err(RankPoolError::TooShort(window));
        }
        Ok(Self {
            window,
            max_iters: 500,
            tolerance: 1e-14,
            initial_step: 1.0,
        })
    }

    pub fn window(&self) -> usize {
        self.window
    }

    /// `2 / (K(K−1))`.
    pub fn delta(&self) -> f64 {
        delta_for(self.window)
    }

    fn validate(&self) -> Result<(), RankPoolError> {
        if !(self.tolerance > 0.0) {
            return Err(RankPoolError::Config(format!("tolerance {} must be > 0", self.tolerance)));
        }
        if !(self.initial_step > 0.0) || self.max_iters == 0 {
            return Err(RankPoolError::Config("step and iteration budget must be positive".into()));
        }
        Ok(())
    }
}

impl Default for RankPoolConfig {
    fn default() -> Self {
        Self::new(7).expect("K=7 is valid")
    }
}

pub fn delta_for(window: usize) -> f64 {
    2.0 / (window as f64 * (window as f64 - 1.0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct DynamicImage {
    pub d: Tensor,
    /// Source-video frame indices of the pooled window.
    pub window: Vec<usize>,
    pub objective: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Objective after every accepted step, starting with `f(0)`.
    pub history: Vec<f64>,
}

fn check_frames(frames: &[Tensor]) -> Result<(), RankPoolError> {
    let first = frames.first().ok_or(RankPoolError::Empty)?;
    for (i, f) in frames.iter().enumerate() {
        if f.shape() != first.shape() {
            return Err(RankPoolError::ShapeMismatch {
                index: i,
                expected: first.shape().to_vec(),
                found: f.shape().to_vec(),
            });
        }
        if !f.is_finite() {
            return Err(RankPoolError::NonFinite(i));
        }
    }
    Ok(())
}

/// Running means `V_i = (1/i) Σ_{j≤i} frame_j`.
///
/// Uses the incremental form `V_i = V_{i−1} + (x_i − V_{i−1}) / i`, which
/// reproduces constant sequences exactly.
pub fn prefix_mean(frames: &[Tensor]) -> Result<Vec<Tensor>, RankPoolError> {
    check_frames(frames)?;
    if frames.len() < 2 {
        return Err(RankPoolError::TooShort(frames.len()));
    }
    let mut out = Vec::with_capacity(frames.len());
    let mut acc = frames[0].clone();
    out.push(acc.clone());
    for (i, f) in frames.iter().enumerate().skip(1) {
        let n = (i + 1) as f64;
        for (a, x) in acc.data_mut().iter_mut().zip(f.data()) {
            *a += (x - *a) / n;
        }
        out.push(acc.clone());
    }
    Ok(out)
}

/// Objective of the slack-eliminated ranking problem at `d`.
pub fn objective(v: &[Tensor], d: &Tensor, delta: f64) -> f64 {
    let mut hinge = 0.0;
    for i in 1..v.len() {
        for j in 0..i {
            let margin: f64 = d
                .data()
                .iter()
                .zip(v[i].data().iter().zip(v[j].data()))
                .map(|(dv, (a, b))| dv * (a - b))
                .sum();
            hinge += (1.0 - margin).max(0.0);
        }
    }
    0.5 * d.dot(d) + delta * hinge
}

struct PairSystem {
    diffs: Vec<Tensor>,
    gram: Vec<f64>,
    n: usize,
}

impl PairSystem {
    fn new(v: &[Tensor]) -> Self {
        let mut diffs = Vec::new();
        for i in 1..v.len() {
            for j in 0..i {
                let data = v[i].data().iter().zip(v[j].data()).map(|(a, b)| a - b).collect();
                diffs.push(Tensor::new(v[i].shape().to_vec(), data).expect("same shape"));
            }
        }
        let n = diffs.len();
        let mut gram = vec![0.0; n * n];
        for p in 0..n {
            for q in p..n {
                let g = diffs[p].dot(&diffs[q]);
                gram[p * n + q] = g;
                gram[q * n + p] = g;
            }
        }
        Self { diffs, gram, n }
    }

    fn gram_times(&self, c: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|p| self.gram[p * self.n..(p + 1) * self.n].iter().zip(c).map(|(g, x)| g * x).sum())
            .collect()
    }

    fn quad(&self, c: &[f64]) -> f64 {
        c.iter().zip(self.gram_times(c)).map(|(a, b)| a * b).sum()
    }

    fn objective(&self, c: &[f64], delta: f64) -> (f64, Vec<f64>) {
        let margins = self.gram_times(c);
        let quad: f64 = c.iter().zip(&margins).map(|(a, b)| a * b).sum();
        let hinge: f64 = margins.iter().map(|m| (1.0 - m).max(0.0)).sum();
        (0.5 * quad + delta * hinge, margins)
    }

    /// Minimum-`G`-norm element of `r − α` over `α_q ∈ [0, δ]` for `q ∈ near`,
    /// by cyclic coordinate descent.
    fn min_norm(&self, r: &[f64], near: &[usize], delta: f64) -> Vec<f64> {
        let mut g = r.to_vec();
        if near.is_empty() {
            return g;
        }
        let mut alpha = vec![0.0; near.len()];
        let mut gg = self.gram_times(&g);
        for _ in 0..200 {
            let mut moved = 0.0_f64;
            for (k, &q) in near.iter().enumerate() {
                let gqq = self.gram[q * self.n + q];
                if gqq <= 0.0 {
                    continue;
                }
                let new = (alpha[k] + gg[q] / gqq).clamp(0.0, delta);
                let step = new - alpha[k];
                if step != 0.0 {
                    alpha[k] = new;
                    g[q] -= step;
                    for p in 0..self.n {
                        gg[p] -= step * self.gram[p * self.n + q];
                    }
                    moved = moved.max(step.abs());
                }
            }
            if moved <= 1e-15 * delta {
                break;
            }
        }
        g
    }

    /// Exact minimizer for a guessed split of pairs into active (`c_p = δ`),
    /// kinked (`margin = 1`) and inactive (`c_p = 0`) sets. The kink
    /// coefficients solve the Gram system on a maximal independent subset;
    /// the caller keeps the result only if it lowers the objective.
    fn polish(&self, margins: &[f64], delta: f64, tau: f64) -> Vec<f64> {
        let mut c = vec![0.0; self.n];
        let mut kinks = Vec::new();
        for (p, &m) in margins.iter().enumerate() {
            let slack = 1.0 - m;
            if slack > tau {
                c[p] = delta;
            } else if slack >= -tau {
                kinks.push(p);
            }
        }
        if kinks.is_empty() {
            return c;
        }
        let base = self.gram_times(&c);
        let rhs: Vec<f64> = kinks.iter().map(|&k| 1.0 - base[k]).collect();
        let g = |a: usize, b: usize| self.gram[kinks[a] * self.n + kinks[b]];

        // pivoted Cholesky picks an independent subset of the kink directions
        let m = kinks.len();
        let scale = (0..m).map(|a| g(a, a)).fold(0.0, f64::max);
        let mut chosen: Vec<usize> = Vec::new();
        let mut l: Vec<Vec<f64>> = Vec::new();
        let mut resid: Vec<f64> = (0..m).map(|a| g(a, a)).collect();
        loop {
            let pick = (0..m)
                .filter(|a| !chosen.contains(a))
                .max_by(|&a, &b| resid[a].total_cmp(&resid[b]));
            let Some(j) = pick else { break };
            if resid[j] <= 1e-12 * scale {
                break;
            }
            let pivot = resid[j].sqrt();
            let col: Vec<f64> = (0..m)
                .map(|a| {
                    let dot: f64 = l.iter().map(|lc| lc[a] * lc[j]).sum();
                    (g(a, j) - dot) / pivot
                })
                .collect();
            for a in 0..m {
                resid[a] -= col[a] * col[a];
            }
            chosen.push(j);
            l.push(col);
        }
        // solve L_S L_Sᵀ β = rhs_S on the chosen rows
        let r = chosen.len();
        let mut y = vec![0.0; r];
        for i in 0..r {
            let dot: f64 = (0..i).map(|k| l[k][chosen[i]] * y[k]).sum();
            y[i] = (rhs[chosen[i]] - dot) / l[i][chosen[i]];
        }
        let mut beta = vec![0.0; r];
        for i in (0..r).rev() {
            let dot: f64 = (i + 1..r).map(|k| l[i][chosen[k]] * beta[k]).sum();
            beta[i] = (y[i] - dot) / l[i][chosen[i]];
        }
        for (i, &a) in chosen.iter().enumerate() {
            c[kinks[a]] = beta[i];
        }
        c
    }

    fn image(&self, c: &[f64], shape: &[usize]) -> Tensor {
        let mut d = Tensor::zeros(shape);
        for (coef, diff) in c.iter().zip(&self.diffs) {
            if *coef == 0.0 {
                continue;
            }
            for (a, x) in d.data_mut().iter_mut().zip(diff.data()) {
                *a += coef * x;
            }
        }
        d
    }
}

/// Solves the rank-pooling problem on prefix means `v`.
///
/// Descent along the negated minimum-norm element of the ε-enlarged
/// subdifferential, with backtracking; ε shrinks whenever no step along the
/// current direction decreases the objective. Every recorded objective is no
/// larger than the one before it.
pub fn rank_pool_fit(v: &[Tensor], cfg: &RankPoolConfig) -> Result<DynamicImage, RankPoolError> {
    cfg.validate()?;
    check_frames(v)?;
    if v.len() < 2 {
        return Err(RankPoolError::TooShort(v.len()));
    }
    let delta = delta_for(v.len());
    let sys = PairSystem::new(v);
    let mut c = vec![0.0; sys.n];
    let (mut f, mut margins) = sys.objective(&c, delta);
    let mut history = vec![f];
    let mut eps = 1e-3;
    let mut converged = false;
    let mut iterations = 0;

    while iterations < cfg.max_iters {
        iterations += 1;
        let mut r = c.clone();
        let mut near = Vec::new();
        for (p, &m) in margins.iter().enumerate() {
            let slack = 1.0 - m;
            if slack > eps {
                r[p] -= delta;
            } else if slack >= -eps {
                near.push(p);
            }
        }
        let g = sys.min_norm(&r, &near, delta);
        let gnorm2 = sys.quad(&g);
        if gnorm2 <= 1e-30 {
            if eps <= 1e-15 || near.is_empty() {
                converged = true;
                break;
            }
            eps /= 10.0;
            continue;
        }

        let mut step = cfg.initial_step;
        let mut accepted = None;
        for _ in 0..60 {
            let trial: Vec<f64> = c.iter().zip(&g).map(|(ci, gi)| ci - step * gi).collect();
            let (ft, mt) = sys.objective(&trial, delta);
            if ft < f {
                accepted = Some((trial, ft, mt));
                break;
            }
            step *= 0.5;
        }
        match accepted {
            Some((trial, ft, mt)) => {
                let improvement = f - ft;
                c = trial;
                f = ft;
                margins = mt;
                history.push(f);
                if improvement < cfg.tolerance {
                    if eps <= 1e-15 {
                        converged = true;
                        break;
                    }
                    eps /= 10.0;
                }
            }
            None => {
                if eps <= 1e-15 {
                    converged = true;
                    break;
                }
                eps /= 10.0;
            }
        }
    }

    // descent stalls a little short of kinks; land on them exactly
    for tau in [1e-2, 1e-3, 1e-4, 1e-6, 1e-8] {
        let trial = sys.polish(&margins, delta, tau);
        let (ft, mt) = sys.objective(&trial, delta);
        if ft <= f {
            if ft < f {
                history.push(ft);
            }
            c = trial;
            f = ft;
            margins = mt;
        }
    }

    let d = sys.image(&c, v[0].shape());
    let objective = objective(v, &d, delta);
    Ok(DynamicImage {
        d,
        window: (0..v.len()).collect(),
        objective,
        converged,
        iterations,
        history,
    })
}

/// Brute-force minimizer for scalar or two-element frames only.
///
/// Candidates are the best point of a refined square grid, the best point of
/// a refined 1-D grid along every kink line `d·(V_i − V_j) = 1`, and every
/// intersection of two kink lines. The line searches matter because a square
/// grid resolves a slanted kink ridge only to about the square root of its
/// step. The search box is `[−B, B]^n` with `B` bounded by the largest
/// pairwise difference norm (the minimizer satisfies `‖d‖ ≤ max‖V_i − V_j‖`).
pub fn rank_pool_oracle_with_step(v: &[Tensor], final_step: f64) -> Result<DynamicImage, RankPoolError> {
    check_frames(v)?;
    if v.len() < 2 {
        return Err(RankPoolError::TooShort(v.len()));
    }
    let dim = v[0].len();
    if dim > 2 {
        return Err(RankPoolError::OracleDimension(dim));
    }
    let delta = delta_for(v.len());
    let mut diffs: Vec<[f64; 2]> = Vec::new();
    for i in 1..v.len() {
        for j in 0..i {
            let mut p = [0.0; 2];
            for (k, slot) in p.iter_mut().enumerate().take(dim) {
                *slot = v[i].data()[k] - v[j].data()[k];
            }
            diffs.push(p);
        }
    }
    let f = |x: [f64; 2]| -> f64 {
        let hinge: f64 = diffs.iter().map(|p| (1.0 - (x[0] * p[0] + x[1] * p[1])).max(0.0)).sum();
        0.5 * (x[0] * x[0] + x[1] * x[1]) + delta * hinge
    };
    let bound = diffs
        .iter()
        .map(|p| (p[0] * p[0] + p[1] * p[1]).sqrt())
        .fold(1.0_f64, f64::max)
        * 1.05;

    let mut best = grid_search(dim, bound, final_step, &f);
    let mut consider = |x: [f64; 2]| {
        let fx = f(x);
        if fx < best.0 {
            best = (fx, x);
        }
    };
    let nonzero: Vec<[f64; 2]> = diffs.iter().copied().filter(|p| p[0] * p[0] + p[1] * p[1] > 0.0).collect();
    for (k, p) in nonzero.iter().enumerate() {
        let n2 = p[0] * p[0] + p[1] * p[1];
        let foot = [p[0] / n2, p[1] / n2];
        if dim == 1 {
            consider(foot);
            continue;
        }
        let n = n2.sqrt();
        let u = [-p[1] / n, p[0] / n];
        let along = |t: f64| [foot[0] + t * u[0], foot[1] + t * u[1]];
        let (_, t) = grid_search(1, bound, final_step, &|x: [f64; 2]| f(along(x[0])));
        consider(along(t[0]));
        for q in &nonzero[k + 1..] {
            let det = p[0] * q[1] - p[1] * q[0];
            if det.abs() > 1e-12 * n2.max(q[0] * q[0] + q[1] * q[1]) {
                consider([(q[1] - p[1]) / det, (p[0] - q[0]) / det]);
            }
        }
    }

    let d = Tensor::new(v[0].shape().to_vec(), best.1[..dim].to_vec()).expect("oracle shape");
    Ok(DynamicImage {
        objective: objective(v, &d, delta),
        d,
        window: (0..v.len()).collect(),
        converged: true,
        iterations: 0,
        history: Vec::new(),
    })
}

/// Grid minimization over `[−bound, bound]^dim` (`dim` ≤ 2, unused axes held
/// at 0). Each level re-centres on the best point and shrinks the step
/// tenfold, down to `final_step`.
fn grid_search(dim: usize, bound: f64, final_step: f64, f: &dyn Fn([f64; 2]) -> f64) -> (f64, [f64; 2]) {
    let mut center = [0.0; 2];
    let mut radius = bound;
    let mut step = bound / 100.0;
    let mut best = (f(center), center);
    loop {
        // re-centre while the best point sits on the box boundary
        loop {
            let n = (radius / step).round() as i64;
            let mut local = (f64::INFINITY, center);
            let mut on_edge = false;
            let ys: Vec<i64> = if dim == 2 { (-n..=n).collect() } else { vec![0] };
            for &iy in &ys {
                for ix in -n..=n {
                    let x = [center[0] + ix as f64 * step, center[1] + iy as f64 * step];
                    let fx = f(x);
                    if fx < local.0 {
                        local = (fx, x);
                        on_edge = ix.abs() == n || (dim == 2 && iy.abs() == n);
                    }
                }
            }
            let improved = local.0 < best.0;
            if improved {
                best = local;
            }
            center = best.1;
            if !on_edge || !improved || radius >= bound {
                break;
            }
        }
        if step <= final_step * (1.0 + 1e-9) {
            break;
        }
        radius = 10.0 * step;
        step = (step / 10.0).max(final_step);
    }
    best
}

/// [`rank_pool_oracle_with_step`] refined down to a `1e-6` grid.
pub fn rank_pool_oracle(v: &[Tensor]) -> Result<DynamicImage, RankPoolError> {
    rank_pool_oracle_with_step(v, 1e-6)
}

/// Indices of the trailing `K` window ending at `index`, padding with frame 0
/// at the start of the video.
pub fn trailing_window(index: usize, window: usize) -> Vec<usize> {
    (0..window)
        .map(|j| (index + j + 1).saturating_sub(window))
        .collect()
}

/// Dynamic image of the trailing window ending at frame `index`.
pub fn dynamic_image_at(
    video: &FrameSequence,
    index: usize,
    cfg: &RankPoolConfig,
) -> Result<DynamicImage, RankPoolError> {
    if video.frames.is_empty() {
        return Err(RankPoolError::Empty);
    }
    if index >= video.frames.len() {
        return Err(RankPoolError::IndexOutOfRange {
            index,
            len: video.frames.len(),
        });
    }
    let idx = trailing_window(index, cfg.window());
    let frames: Vec<Tensor> = idx.iter().map(|&i| video.frames[i].clone()).collect();
    let v = prefix_mean(&frames)?;
    let mut out = rank_pool_fit(&v, cfg)?;
    out.window = idx.into_iter().map(|i| i + video.origin).collect();
    Ok(out)
}

/// Dynamic images for several indices; results do not depend on scheduling.
pub fn dynamic_images(
    video: &FrameSequence,
    indices: &[usize],
    cfg: &RankPoolConfig,
) -> Result<Vec<DynamicImage>, RankPoolError> {
    indices
        .par_iter()
        .map(|&i| dynamic_image_at(video, i, cfg))
        .collect()
}

/// Min–max normalization to `0..=255` with round-half-up; constant images
/// map to 128.
pub fn to_display(d: &Tensor) -> Vec<u8> {
    let (lo, hi) = d
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if !(hi > lo) {
        return vec![128; d.len()];
    }
    d.data()
        .iter()
        .map(|&v| (255.0 * (v - lo) / (hi - lo) + 0.5).floor().clamp(0.0, 255.0) as u8)
        .collect()
}
