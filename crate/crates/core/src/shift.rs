//! Model-shift estimation and the event-triggered training rule.
//!
//! Coverage of the replay buffer is measured as the area of the convex hull
//! of its states after projecting them onto their two leading principal
//! directions. Each estimation multiplies the coverage growth ratio by the
//! ensemble's one-step error on the fresh slice, and the trigger accumulates
//! `log(ratio · error + β)` until it crosses `α`, subject to minimal and
//! maximal interevent times.

use std::cmp::Ordering;
use std::io::{Read, Write};

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Result of [`pca_project`].
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub points: Vec<Vec<f64>>,
    /// Orthonormal directions, one per output coordinate.
    pub basis: Vec<Vec<f64>>,
    /// Sample-covariance eigenvalue of each direction.
    pub explained_variance: Vec<f64>,
}

/// Projects mean-centered points onto the top `dims` eigenvectors of their
/// sample covariance, in descending eigenvalue order. Each direction's sign
/// is fixed so its first nonzero coordinate is positive.
pub fn pca_project(points: &[Vec<f64>], dims: usize) -> Result<Projection> {
    if points.len() < 2 {
        return Err(Error::invalid("pca", "needs at least two points"));
    }
    let d = points[0].len();
    if points.iter().any(|p| p.len() != d) {
        return Err(Error::Shape("points have differing dimensions".into()));
    }
    if dims == 0 || d < dims {
        return Err(Error::Shape(format!("cannot project {d}-D points onto {dims} components")));
    }
    if points.iter().any(|p| p.iter().any(|x| !x.is_finite())) {
        return Err(Error::NumericalFailure("pca input".into()));
    }
    if points.iter().all(|p| p == &points[0]) {
        return Err(Error::DegenerateCloud);
    }
    let n = points.len() as f64;
    let mut mean = vec![0.0; d];
    for p in points {
        mean.iter_mut().zip(p).for_each(|(m, x)| *m += x / n);
    }
    let mut cov = DMatrix::<f64>::zeros(d, d);
    for p in points {
        for i in 0..d {
            let ci = p[i] - mean[i];
            for j in i..d {
                cov[(i, j)] += ci * (p[j] - mean[j]);
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let v = cov[(i, j)] / (n - 1.0);
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut basis = Vec::with_capacity(dims);
    let mut explained = Vec::with_capacity(dims);
    for &k in order.iter().take(dims) {
        let mut v: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        if let Some(first) = v.iter().find(|x| x.abs() > 1e-12) {
            if *first < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
        }
        basis.push(v);
        explained.push(eig.eigenvalues[k].max(0.0));
    }
    let projected = points
        .iter()
        .map(|p| {
            basis
                .iter()
                .map(|b| b.iter().zip(p.iter().zip(&mean)).map(|(bi, (x, m))| bi * (x - m)).sum())
                .collect()
        })
        .collect();
    Ok(Projection {
        points: projected,
        basis,
        explained_variance: explained,
    })
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Hull vertices in counter-clockwise order by Graham scan. Collinear
/// boundary points are dropped; fewer than three vertices means the hull
/// is degenerate.
pub fn convex_hull(points: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let Some(&pivot) = points
        .iter()
        .min_by(|a, b| a[1].total_cmp(&b[1]).then(a[0].total_cmp(&b[0])))
    else {
        return Vec::new();
    };
    let dist2 = |p: &[f64; 2]| (p[0] - pivot[0]).powi(2) + (p[1] - pivot[1]).powi(2);
    let mut rest: Vec<([f64; 2], f64, f64)> = points
        .iter()
        .filter(|p| **p != pivot)
        .map(|p| (*p, (p[1] - pivot[1]).atan2(p[0] - pivot[0]), dist2(p)))
        .collect();
    rest.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.2.total_cmp(&b.2)));
    let mut hull = vec![pivot];
    for (p, _, _) in rest {
        while hull.len() >= 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        if hull.last() != Some(&p) {
            hull.push(p);
        }
    }
    hull
}

/// Shoelace area of a simple polygon given in order.
pub fn polygon_area(vertices: &[[f64; 2]]) -> f64 {
    if vertices.len() < 3 {
        return 0.0;
    }
    let twice: f64 = vertices
        .iter()
        .zip(vertices.iter().cycle().skip(1))
        .map(|(a, b)| a[0] * b[1] - a[1] * b[0])
        .sum();
    0.5 * twice.abs()
}

/// Area of the convex hull; degenerate sets give 0.
pub fn convex_hull_area(points: &[[f64; 2]]) -> f64 {
    polygon_area(&convex_hull(points))
}

/// Coverage estimate of a state buffer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HullEstimate {
    pub volume: f64,
    pub n_points: usize,
    pub pca_basis: Vec<Vec<f64>>,
    /// The cloud (or its projection) was degenerate and `volume` is 0.
    pub degenerate: bool,
}

impl HullEstimate {
    fn degenerate(n_points: usize) -> Self {
        Self {
            volume: 0.0,
            n_points,
            pca_basis: Vec::new(),
            degenerate: true,
        }
    }
}

/// Hull area of at most `sample_size` states drawn without replacement from
/// `states`, after a 2-D PCA projection. When the buffer is no larger than
/// the sample every state is used and `rng` is left untouched.
pub fn coverage_volume(states: &[Vec<f64>], sample_size: usize, rng: &mut Rng) -> Result<HullEstimate> {
    if states.is_empty() {
        return Err(Error::Empty("state buffer"));
    }
    if sample_size == 0 {
        return Err(Error::invalid("hull sample size", "must be >= 1"));
    }
    let sample: Vec<Vec<f64>> = if states.len() <= sample_size {
        states.to_vec()
    } else {
        let mut idx = index::sample(rng, states.len(), sample_size).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| states[i].clone()).collect()
    };
    let n = sample.len();
    if n < 3 || sample[0].len() < 2 {
        return Ok(HullEstimate::degenerate(n));
    }
    let proj = match pca_project(&sample, 2) {
        Ok(p) => p,
        Err(Error::DegenerateCloud) => return Ok(HullEstimate::degenerate(n)),
        Err(e) => return Err(e),
    };
    let pts: Vec<[f64; 2]> = proj.points.iter().map(|p| [p[0], p[1]]).collect();
    let volume = convex_hull_area(&pts);
    Ok(HullEstimate {
        volume,
        n_points: n,
        degenerate: volume == 0.0,
        pca_basis: proj.basis,
    })
}

/// `(vol_new / vol_base) · pred_error`, the product form of the trigger
/// condition.
pub fn raw_condition(vol_new: f64, vol_base: f64, pred_error: f64) -> Result<f64> {
    if !(vol_base > 0.0) {
        return Err(Error::DegenerateBase);
    }
    Ok(vol_new / vol_base * pred_error)
}

/// Parameters of the event trigger.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TriggerConfig {
    pub alpha: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
    pub check_frequency: usize,
    pub t_min: usize,
    pub t_max: usize,
    #[serde(default = "default_hull_sample")]
    pub hull_sample_size: usize,
}

fn default_beta() -> f64 {
    1.0
}

fn default_hull_sample() -> usize {
    1000
}

impl TriggerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::invalid("trigger", "alpha must be positive"));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::invalid("trigger", "beta must be non-negative"));
        }
        if self.check_frequency == 0 || self.hull_sample_size == 0 {
            return Err(Error::invalid("trigger", "check_frequency and hull_sample_size must be >= 1"));
        }
        if self.t_min == 0 || self.t_min > self.t_max {
            return Err(Error::invalid("trigger", "need 1 <= t_min <= t_max"));
        }
        Ok(())
    }

    /// A schedule that trains exactly every `k` steps.
    pub fn fixed_interval(k: usize) -> Self {
        Self {
            alpha: 1.0,
            beta: default_beta(),
            check_frequency: k.max(1),
            t_min: k,
            t_max: k,
            hull_sample_size: default_hull_sample(),
        }
    }

    /// Whether an estimation is scheduled `steps` steps after the last
    /// training: every `check_frequency` steps, and always at `t_max`.
    pub fn estimation_due(&self, steps: usize) -> bool {
        steps > 0 && (steps.is_multiple_of(self.check_frequency) || steps == self.t_max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decision {
    Hold,
    Train,
}

/// Inputs of one estimation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShiftEstimate {
    /// Coverage of the buffer including the fresh slice.
    pub volume: f64,
    /// One-step prediction error on the fresh slice.
    pub pred_error: f64,
}

/// One row of the trigger trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateRecord {
    pub step: u64,
    pub ratio: f64,
    pub pred_error: f64,
    pub term: f64,
    pub accumulator: f64,
    pub decision: Decision,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TriggerState {
    pub accumulator: f64,
    pub steps_since_training: usize,
    pub base_hull_volume: f64,
    pub estimates_log: Vec<EstimateRecord>,
    /// Estimations whose inputs were unusable and contributed 0.
    pub failures: usize,
}

impl TriggerState {
    pub fn new(base_hull_volume: f64) -> Self {
        Self {
            accumulator: 0.0,
            steps_since_training: 0,
            base_hull_volume,
            estimates_log: Vec::new(),
            failures: 0,
        }
    }

    /// Resets the counters after a training and re-anchors the base volume.
    pub fn reset(&mut self, base_hull_volume: f64) {
        self.accumulator = 0.0;
        self.steps_since_training = 0;
        self.base_hull_volume = base_hull_volume;
    }
}

/// Folds one estimation into the accumulator and decides whether to train.
/// `step` is the global environment step recorded in the trace. An `Err`
/// estimate, or one yielding a non-finite term, counts as a zero term.
pub fn trigger_step(
    state: &mut TriggerState,
    config: &TriggerConfig,
    step: u64,
    estimate: Result<ShiftEstimate>,
) -> Decision {
    let (ratio, pred_error, term) = match estimate {
        Ok(e) => {
            let ratio = if e.volume > 0.0 && state.base_hull_volume > 0.0 {
                e.volume / state.base_hull_volume
            } else {
                1.0
            };
            let term = (ratio * e.pred_error + config.beta).ln();
            if term.is_finite() {
                (ratio, e.pred_error, term)
            } else {
                state.failures += 1;
                (ratio, e.pred_error, 0.0)
            }
        }
        Err(_) => {
            state.failures += 1;
            (f64::NAN, f64::NAN, 0.0)
        }
    };
    state.accumulator += term;
    let steps = state.steps_since_training;
    let decision = if (state.accumulator >= config.alpha && steps >= config.t_min) || steps >= config.t_max {
        Decision::Train
    } else {
        Decision::Hold
    };
    state.estimates_log.push(EstimateRecord {
        step,
        ratio,
        pred_error,
        term,
        accumulator: state.accumulator,
        decision,
    });
    if decision == Decision::Train {
        let anchor = match estimate {
            Ok(e) if e.volume > 0.0 => e.volume,
            _ => state.base_hull_volume,
        };
        state.reset(anchor);
    }
    decision
}

pub const TRACE_CSV_HEADER: [&str; 6] = ["step", "ratio", "pred_error", "term", "accumulator", "decision"];

pub fn write_trace_csv<W: Write>(writer: W, records: &[EstimateRecord]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
    w.write_record(TRACE_CSV_HEADER)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trace_csv<R: Read>(reader: R) -> Result<Vec<EstimateRecord>> {
    let mut r = csv::Reader::from_reader(reader);
    if r.headers()?.iter().ne(TRACE_CSV_HEADER) {
        return Err(Error::invalid("trace csv", "unexpected header"));
    }
    let rows = r.deserialize().collect::<std::result::Result<Vec<EstimateRecord>, _>>()?;
    if rows.windows(2).any(|w| w[1].step.cmp(&w[0].step) == Ordering::Less) {
        return Err(Error::invalid("trace csv", "steps must be non-decreasing"));
    }
    Ok(rows)
}
