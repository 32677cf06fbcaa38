//! Measure transport onto the uniform distribution on the unit cube.
//!
//! The pipeline compresses the support of a particle cloud into `[0,1]^d`,
//! partitions the cube into `n^d` cells of equal empirical mass by
//! recursive coordinate quantiles, displaces the uniform target grid so
//! that distinct source cuts keep distinct targets, and synthesizes one
//! scalar cascade per coordinate that carries every cut onto its target.
//! All per-coordinate fields read and move a single coordinate, so the
//! assembled schedule runs them simultaneously. Transport quality is
//! scored by an exact assignment-based Wasserstein distance.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{integrate_endpoint, push_forward, IntegrateOpts, ParticleMeasure};
use crate::interp::equal_boundaries;
use crate::model::{ControlSchedule, Neuron, Piece};
use crate::roots;
use crate::vecmath;

/// Cuts closer than this are one hyperplane; targets inherit the rule.
const EQUAL_CUT_TOL: f64 = 1e-12;

/// Largest particle count the exact assignment solver accepts.
pub const ASSIGNMENT_CAP: usize = 4096;

/// Fraction of the horizon spent compressing the support; the rest drives
/// the cut cascades. Any positive split works by time rescaling; fixing it
/// keeps schedules comparable across runs.
const COMPRESSION_SHARE: f64 = 0.2;

// ---------------------------------------------------------------------------
// Plan specification

/// Parameters of a transport plan. `p_split` allocates the `p` neurons of
/// each piece over the `d = p_split.len()` coordinates; `n` is the number
/// of cells per coordinate and `delta` the displacement budget that keeps
/// distinct cuts mapped to distinct targets, `0 < delta < 1/n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransportPlanSpec {
    pub q: f64,
    pub epsilon: f64,
    pub p: usize,
    pub p_split: Vec<usize>,
    pub n: usize,
    pub delta: f64,
}

/// Exponent `1 + d/q - d` of the resolution-to-error law. Positive exactly
/// when `q < d/(d-1)`, the regime where refining the partition helps.
fn rate_exponent(dim: usize, q: f64) -> f64 {
    1.0 + dim as f64 / q - dim as f64
}

fn check_rate_args(dim: usize, q: f64) -> Result<()> {
    if dim == 0 {
        return Err(Error::parameter("dimension must be positive"));
    }
    if !q.is_finite() || q < 1.0 {
        return Err(Error::parameter(format!("q = {q} must be finite and at least 1")));
    }
    if dim > 1 && q * (dim - 1) as f64 >= dim as f64 {
        return Err(Error::parameter(format!(
            "q = {q} must be below {} for dimension {dim}",
            dim as f64 / (dim - 1) as f64
        )));
    }
    Ok(())
}

/// Resolution above which the guaranteed error drops below `epsilon`,
/// `(3^(1 + d/q) sqrt(d) / epsilon)^(1 / (1 + d/q - d))`. This is the
/// value consistent with [`error_envelope`]; plans are sized by it.
pub fn proof_resolution(dim: usize, q: f64, epsilon: f64) -> Result<f64> {
    check_rate_args(dim, q)?;
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(Error::parameter("epsilon must be positive and finite"));
    }
    let base = 3f64.powf(1.0 + dim as f64 / q) * (dim as f64).sqrt() / epsilon;
    Ok(base.powf(1.0 / rate_exponent(dim, q)))
}

/// Alternative resolution reading `(3 d^(1/2 + 1/q) / epsilon)^(...)` with
/// the same exponent. Reported alongside [`proof_resolution`] because the
/// two differ; sizing always uses the latter.
pub fn statement_resolution(dim: usize, q: f64, epsilon: f64) -> Result<f64> {
    check_rate_args(dim, q)?;
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(Error::parameter("epsilon must be positive and finite"));
    }
    let base = 3.0 * (dim as f64).powf(0.5 + 1.0 / q) / epsilon;
    Ok(base.powf(1.0 / rate_exponent(dim, q)))
}

/// Guaranteed Wasserstein-`q` error of a resolution-`n` plan,
/// `3^(1 + d/q) sqrt(d) n^-(1 + d/q - d)`.
pub fn error_envelope(dim: usize, q: f64, n: usize) -> Result<f64> {
    check_rate_args(dim, q)?;
    if n == 0 {
        return Err(Error::parameter("resolution must be positive"));
    }
    let lead = 3f64.powf(1.0 + dim as f64 / q) * (dim as f64).sqrt();
    Ok(lead * (n as f64).powf(-rate_exponent(dim, q)))
}

impl TransportPlanSpec {
    pub fn dim(&self) -> usize {
        self.p_split.len()
    }

    /// Smallest resolution meeting `epsilon`, with `delta = 1/(4n)`.
    pub fn for_accuracy(q: f64, epsilon: f64, p_split: Vec<usize>) -> Result<Self> {
        let need = proof_resolution(p_split.len(), q, epsilon)?;
        if need > 1e9 {
            return Err(Error::parameter(format!(
                "accuracy {epsilon} needs resolution {need:.3e}, beyond any practical plan"
            )));
        }
        let n = (need.floor() as usize) + 1;
        Self::assemble(q, epsilon, n, p_split)
    }

    /// Fixed resolution `n`; `epsilon` is set to the error the resolution
    /// guarantees, so the accuracy invariant holds with equality.
    pub fn with_resolution(q: f64, n: usize, p_split: Vec<usize>) -> Result<Self> {
        let epsilon = error_envelope(p_split.len(), q, n)?;
        Self::assemble(q, epsilon, n, p_split)
    }

    fn assemble(q: f64, epsilon: f64, n: usize, p_split: Vec<usize>) -> Result<Self> {
        let spec = TransportPlanSpec {
            q,
            epsilon,
            p: p_split.iter().sum(),
            p_split,
            n,
            delta: 0.25 / n as f64,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        check_rate_args(d, self.q)?;
        if self.p_split.iter().any(|&pk| pk == 0) {
            return Err(Error::parameter("every coordinate needs at least one neuron"));
        }
        if self.p != self.p_split.iter().sum::<usize>() {
            return Err(Error::parameter(format!(
                "p = {} does not match the split sum {}",
                self.p,
                self.p_split.iter().sum::<usize>()
            )));
        }
        if self.n == 0 {
            return Err(Error::parameter("resolution must be positive"));
        }
        let need = proof_resolution(d, self.q, self.epsilon)?;
        if (self.n as f64) < need * (1.0 - 1e-9) {
            return Err(Error::parameter(format!(
                "resolution {} is below the {need:.3} required for accuracy {}",
                self.n, self.epsilon
            )));
        }
        if !(self.delta > 0.0) || self.delta >= 1.0 / self.n as f64 {
            return Err(Error::parameter(format!(
                "delta = {} must lie strictly between 0 and 1/n = {}",
                self.delta,
                1.0 / self.n as f64
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Support compression

/// Schedule that contracts the cloud's bounding box into `[0,1]^d` with
/// `ceil(2d/p)` pieces of width `p`. Per coordinate, one job pulls the
/// upper tail below 1 and one pushes the lower tail above 0; a job whose
/// side already fits becomes an inactive neuron, so a cloud inside the
/// cube yields an identity schedule with the same piece count.
pub fn compress_support(mu: &ParticleMeasure, p: usize, horizon: f64) -> Result<ControlSchedule> {
    mu.validate()?;
    if p == 0 {
        return Err(Error::parameter("width must be positive"));
    }
    if !(horizon > 0.0) || !horizon.is_finite() {
        return Err(Error::parameter("horizon must be positive and finite"));
    }
    let d = mu.dim;
    let (lo, hi) = mu.bounding_box();

    // A job is (output sign, axis, bias, natural duration). Running its
    // field for the natural duration leaves the relevant tail strictly
    // inside; scaling the weight by natural/allotted time is equivalent.
    let mut jobs = Vec::with_capacity(2 * d);
    for k in 0..d {
        let tau = if hi[k] > 1.0 { hi[k].ln() + 1e-3 } else { 0.0 };
        jobs.push((-1.0, k, 0.0, tau));
    }
    for k in 0..d {
        let tau = if lo[k] < 0.0 { (1.0 - lo[k]).ln() + 1e-3 } else { 0.0 };
        jobs.push((1.0, k, 1.0, tau));
    }

    let n_pieces = (2 * d).div_ceil(p);
    let boundaries = equal_boundaries(horizon, n_pieces);
    let allotted = horizon / n_pieces as f64;
    let pieces = (0..n_pieces)
        .map(|j| {
            let neurons = (0..p)
                .map(|slot| match jobs.get(j * p + slot) {
                    Some(&(sign, axis, bias, tau)) if tau > 0.0 => {
                        let mut w = vec![0.0; d];
                        w[axis] = sign * tau / allotted;
                        // The gate opposes the push: a pull toward 0 reads
                        // relu(x), a push toward 1 reads relu(1 - x), so
                        // each side has its fixed point at its own bound.
                        let mut a = vec![0.0; d];
                        a[axis] = -sign;
                        Neuron::new(w, a, bias)
                    }
                    _ => Ok(Neuron::zero_on_axis(d, 0)),
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Piece {
                t_start: boundaries[j],
                t_end: boundaries[j + 1],
                neurons,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    ControlSchedule::new(d, p, pieces)
}

// ---------------------------------------------------------------------------
// Partition tree

/// One partition level: `cuts[prefix]` holds the `n + 1` strictly
/// increasing cut values of the prefix cell, from exactly 0 to exactly 1;
/// prefixes are enumerated row-major in the parent indices. `targets`
/// mirrors the shape once filled, and is empty before that.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionLevel {
    pub cuts: Vec<Vec<f64>>,
    pub targets: Vec<Vec<f64>>,
}

/// Recursive empirical-quantile partition of `[0,1]^d` into `n^d` cells of
/// equal mass. Level `k` splits each level-`k-1` cell along coordinate `k`
/// into `n` slabs of equal conditional mass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionTree {
    pub dim: usize,
    pub n: usize,
    pub levels: Vec<PartitionLevel>,
}

impl PartitionTree {
    pub fn leaf_count(&self) -> usize {
        self.n.pow(self.dim as u32)
    }

    pub fn has_targets(&self) -> bool {
        self.levels.iter().all(|l| l.targets.len() == l.cuts.len())
    }

    /// Multi-index of the cell containing `x`, or `None` outside the cube.
    /// Points on a cut belong to the cell above, except at 1.
    pub fn locate(&self, x: &[f64]) -> Option<Vec<usize>> {
        if x.len() != self.dim {
            return None;
        }
        let mut prefix = 0usize;
        let mut index = Vec::with_capacity(self.dim);
        for (k, level) in self.levels.iter().enumerate() {
            let v = x[k];
            if !(0.0..=1.0).contains(&v) {
                return None;
            }
            let cuts = &level.cuts[prefix];
            let i = (cuts.partition_point(|&c| c <= v) - 1).min(self.n - 1);
            index.push(i);
            prefix = prefix * self.n + i;
        }
        Some(index)
    }

    fn cell_from(&self, index: &[usize], pick: impl Fn(&PartitionLevel, usize) -> &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut lo = Vec::with_capacity(self.dim);
        let mut hi = Vec::with_capacity(self.dim);
        let mut prefix = 0usize;
        for (k, &i) in index.iter().enumerate() {
            let cuts = pick(&self.levels[k], prefix);
            lo.push(cuts[i]);
            hi.push(cuts[i + 1]);
            prefix = prefix * self.n + i;
        }
        (lo, hi)
    }

    /// Source cell bounds `(lo, hi)` of the leaf `index`.
    pub fn source_cell(&self, index: &[usize]) -> (Vec<f64>, Vec<f64>) {
        assert_eq!(index.len(), self.dim, "leaf index dimension");
        self.cell_from(index, |l, p| &l.cuts[p])
    }

    /// Target cell bounds of the leaf `index`, once targets are filled.
    pub fn target_cell(&self, index: &[usize]) -> Option<(Vec<f64>, Vec<f64>)> {
        if !self.has_targets() {
            return None;
        }
        assert_eq!(index.len(), self.dim, "leaf index dimension");
        Some(self.cell_from(index, |l, p| &l.targets[p]))
    }

    /// Largest Euclidean diameter over all target cells.
    pub fn max_target_diameter(&self) -> Option<f64> {
        if !self.has_targets() {
            return None;
        }
        let mut worst = 0.0f64;
        let mut index = vec![0usize; self.dim];
        loop {
            let (lo, hi) = self.cell_from(&index, |l, p| &l.targets[p]);
            let diam = vecmath::dist(&hi, &lo);
            worst = worst.max(diam);
            // odometer over {0..n-1}^d
            let mut k = self.dim;
            loop {
                if k == 0 {
                    return Some(worst);
                }
                k -= 1;
                index[k] += 1;
                if index[k] < self.n {
                    break;
                }
                index[k] = 0;
            }
        }
    }
}

/// Interior cuts at the midpoints between the order statistics nearest the
/// exact quantile ranks; the boundary cuts are exactly 0 and 1. Returns
/// the cuts and the split positions in the sorted sample.
fn quantile_cuts(sorted: &[f64], n: usize) -> Result<(Vec<f64>, Vec<usize>)> {
    let m = sorted.len();
    let mut cuts = Vec::with_capacity(n + 1);
    let mut splits = Vec::with_capacity(n + 1);
    cuts.push(0.0);
    splits.push(0);
    for i in 1..n {
        let k = ((m as f64 * i as f64 / n as f64).round() as usize).clamp(1, m - 1);
        cuts.push(0.5 * (sorted[k - 1] + sorted[k]));
        splits.push(k);
    }
    cuts.push(1.0);
    splits.push(m);
    if cuts.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::invalid(
            "partition: coincident sample values leave no room for distinct cuts",
        ));
    }
    Ok((cuts, splits))
}

/// Recursive empirical quantile partition. Every particle must lie in
/// `[0,1]^d` and there must be at least `n^d` of them; coincident
/// coordinate values that prevent `n` distinct slabs are rejected.
pub fn build_partition(mu: &ParticleMeasure, n: usize) -> Result<PartitionTree> {
    mu.validate()?;
    if n == 0 {
        return Err(Error::parameter("resolution must be positive"));
    }
    for (i, pt) in mu.points.iter().enumerate() {
        if pt.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::invalid(format!(
                "partition: particle {i} lies outside the unit cube"
            )));
        }
    }
    let needed = n
        .checked_pow(mu.dim as u32)
        .ok_or_else(|| Error::parameter("resolution overflows the cell count"))?;
    if mu.len() < needed {
        return Err(Error::Resolution {
            needed,
            got: mu.len(),
        });
    }

    let mut levels = Vec::with_capacity(mu.dim);
    let mut groups: Vec<Vec<usize>> = vec![(0..mu.len()).collect()];
    for k in 0..mu.dim {
        let mut cuts_level = Vec::with_capacity(groups.len());
        let mut next_groups = Vec::with_capacity(groups.len() * n);
        for mut group in groups {
            group.sort_by(|&a, &b| mu.points[a][k].total_cmp(&mu.points[b][k]));
            let sorted: Vec<f64> = group.iter().map(|&i| mu.points[i][k]).collect();
            let (cuts, splits) = quantile_cuts(&sorted, n)?;
            cuts_level.push(cuts);
            for w in splits.windows(2) {
                next_groups.push(group[w[0]..w[1]].to_vec());
            }
        }
        levels.push(PartitionLevel {
            cuts: cuts_level,
            targets: Vec::new(),
        });
        groups = next_groups;
    }
    Ok(PartitionTree {
        dim: mu.dim,
        n,
        levels,
    })
}

/// Displaced target cuts `g = i/n + delta * (c - c_min)`, where `c_min` is
/// the smallest cut of the same level and rank over all prefixes. Equal
/// cuts map to equal targets and the order of same-rank cuts is mirrored;
/// rank 0 maps to exactly 0 and rank `n` to exactly 1. Requires
/// `0 < delta < 1/n`, which keeps every node's targets strictly increasing
/// and within `delta` of the uniform grid.
pub fn build_delta_targets(tree: &PartitionTree, delta: f64) -> Result<PartitionTree> {
    if !(delta > 0.0) || delta >= 1.0 / tree.n as f64 {
        return Err(Error::parameter(format!(
            "delta = {delta} must lie strictly between 0 and 1/n = {}",
            1.0 / tree.n as f64
        )));
    }
    let n = tree.n;
    let mut out = tree.clone();
    for level in &mut out.levels {
        let mut rank_min = vec![f64::INFINITY; n + 1];
        for cuts in &level.cuts {
            for (i, &c) in cuts.iter().enumerate() {
                if c < rank_min[i] {
                    rank_min[i] = c;
                }
            }
        }
        level.targets = level
            .cuts
            .iter()
            .map(|cuts| {
                cuts.iter()
                    .enumerate()
                    .map(|(i, &c)| {
                        if i == 0 {
                            0.0
                        } else if i == n {
                            1.0
                        } else {
                            i as f64 / n as f64 + delta * (c - rank_min[i])
                        }
                    })
                    .collect()
            })
            .collect();
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Scalar cascades

/// A family of hyperplanes orthogonal to one coordinate, each with a
/// strictly larger target: the flow of the synthesized scalar field must
/// carry `sources[i]` onto `targets[i]` simultaneously for all `i`.
/// `budget` neurons act per piece; `time_share` is the fraction of the
/// allotted horizon the cascade occupies, the remainder idling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperplaneTask {
    pub direction: usize,
    pub sources: Vec<f64>,
    pub targets: Vec<f64>,
    pub budget: usize,
    pub time_share: f64,
}

impl HyperplaneTask {
    pub fn new(direction: usize, sources: Vec<f64>, targets: Vec<f64>, budget: usize) -> Result<Self> {
        let task = HyperplaneTask {
            direction,
            sources,
            targets,
            budget,
            time_share: 1.0,
        };
        task.validate()?;
        Ok(task)
    }

    pub fn validate(&self) -> Result<()> {
        if self.budget == 0 {
            return Err(Error::parameter("budget must be positive"));
        }
        if self.sources.is_empty() || self.sources.len() != self.targets.len() {
            return Err(Error::parameter(
                "sources and targets must be non-empty and of equal length",
            ));
        }
        if !vecmath::all_finite(&self.sources) || !vecmath::all_finite(&self.targets) {
            return Err(Error::NonFinite {
                context: "hyperplane task values".into(),
            });
        }
        for list in [&self.sources, &self.targets] {
            if list.windows(2).any(|w| !(w[0] < w[1])) {
                return Err(Error::parameter(
                    "sources and targets must be strictly increasing",
                ));
            }
        }
        if !(self.time_share > 0.0 && self.time_share <= 1.0) {
            return Err(Error::parameter("time share must lie in (0, 1]"));
        }
        Ok(())
    }
}

/// Exact time-`t` value of the scalar flow `x' = sum_i w_i relu(x + b_i)`
/// started at `x0`. The field is piecewise affine with breakpoints at
/// `-b_i`; the trajectory is monotone, so it is advanced breakpoint to
/// breakpoint in closed form. Overflow of a growing branch returns
/// infinity, which callers read as overshoot.
fn flow_scalar(neurons: &[(f64, f64)], t: f64, x0: f64) -> f64 {
    let mut marks: Vec<f64> = neurons.iter().map(|&(_, b)| -b).collect();
    marks.sort_by(f64::total_cmp);
    marks.dedup();

    let mut x = x0;
    let mut rem = t;
    // Each pass either exhausts the time or crosses one more breakpoint in
    // a fixed direction, so the loop is bounded by the breakpoint count.
    for _ in 0..=marks.len() + 1 {
        let mut velocity = 0.0;
        for &(w, b) in neurons {
            velocity += w * (x + b).max(0.0);
        }
        if velocity == 0.0 || rem == 0.0 {
            return x;
        }
        // Slope of the affine segment ahead: a neuron whose breakpoint sits
        // exactly at `x` is active when moving up and inactive when moving
        // down, matching the one-sided segment the trajectory enters.
        let up = velocity > 0.0;
        let mut slope = 0.0;
        for &(w, b) in neurons {
            let active = if up { -b <= x } else { -b < x };
            if active {
                slope += w;
            }
        }
        let boundary = if up {
            marks.iter().copied().find(|&m| m > x)
        } else {
            marks.iter().rev().copied().find(|&m| m < x)
        };
        if let Some(y) = boundary {
            // Time to reach the boundary: ln(1 + s (y - x) / v) / s, with
            // the s -> 0 limit (y - x) / v; non-positive log argument means
            // an equilibrium blocks the way.
            let hit = if slope == 0.0 {
                (y - x) / velocity
            } else {
                let u = slope * (y - x) / velocity;
                if u > -1.0 {
                    u.ln_1p() / slope
                } else {
                    f64::INFINITY
                }
            };
            if hit <= rem {
                x = y;
                rem -= hit;
                continue;
            }
        }
        return if slope == 0.0 {
            x + velocity * rem
        } else {
            x + velocity / slope * (slope * rem).exp_m1()
        };
    }
    debug_assert!(false, "scalar flow failed to terminate");
    x
}

/// Result of a cut cascade: the `(w, b)` neurons per piece, plus the
/// hyperplanes that could not be placed exactly and how far they landed
/// from their nominal target.
struct Cascade {
    batches: Vec<Vec<(f64, f64)>>,
    defects: usize,
    max_defect: f64,
}

/// Largest admissible `|w| * t` for a single neuron. A piece beyond this
/// contracts or expands separations by more than `exp(60)`, which both
/// exceeds anything f64 spacing can represent and makes the piece
/// prohibitively stiff to integrate.
const WEIGHT_LOG_CAP: f64 = 60.0;

/// One batch of a cascade: its neurons, where each point actually ended
/// up, and the points that missed their target by more than round-off.
struct BatchSolve {
    neurons: Vec<(f64, f64)>,
    achieved: Vec<f64>,
    defects: usize,
    max_defect: f64,
}


/// Places `starts` onto `goals` with one neuron per point, all acting in
/// the same piece of length `t_piece`. Points are processed upward and
/// each neuron's breakpoint sits at the running maximum of everything
/// already placed, so no earlier point is disturbed; `floor` is a value
/// known to stay fixed below the batch (negative infinity if none).
///
/// Holding a point a tiny margin above its neighbor against the arrival
/// velocity of the batch takes a weight of order velocity over margin,
/// and such a weight contracts the separation of everything above by
/// `exp(-|w| t)`, so nearly coincident points collide in f64 before
/// their own turn comes. A finite `w_cap` clamps every weight to keep
/// the piece integrable; a point whose target needs more lands as close
/// as the cap allows and the miss is recorded. An infinite `w_cap`
/// demands exactness and surfaces any miss as an error.
///
/// With `reversed` set the caller will negate every weight before using
/// the field, so the asymmetric overweight rules swap roles: a positive
/// weight here executes as a descent and is clamped, while injecting
/// `-w_cap` on a failed bracket would execute as a capped ascent whose
/// inflation compounds across pieces, so the neuron is dropped instead.
fn solve_batch(
    starts: &[f64],
    goals: &[f64],
    floor: f64,
    t_piece: f64,
    w_cap: f64,
    reversed: bool,
    label: &str,
    batch_idx: usize,
) -> Result<BatchSolve> {
    let strict = w_cap.is_infinite();
    let m = starts.len();
    let mut neurons: Vec<(f64, f64)> = Vec::with_capacity(m);
    let mut achieved = goals.to_vec();
    let mut defects = 0usize;
    let mut max_defect = 0.0f64;
    for i in 0..m {
        let (c, g) = (starts[i], goals[i]);
        let pivot = if i == 0 {
            // Strictly between the fixed region and the new point, so
            // the cascade cannot disturb anything already in place.
            let low = c.min(g);
            if floor.is_finite() {
                0.5 * (floor + low)
            } else {
                low - 1.0
            }
        } else {
            starts[i - 1].max(achieved[i - 1])
        };
        let b = -pivot;
        let context = format!("{label}: point {i} of batch {batch_idx}");
        let mut objective = |w: f64| {
            neurons.push((w, b));
            let end = flow_scalar(&neurons, t_piece, c);
            neurons.pop();
            end - g
        };
        let root = match roots::bracket_sign_change(&mut objective, 1.0, &context) {
            Ok((w_lo, w_hi)) => {
                Some(roots::bisect(&mut objective, w_lo, w_hi, 1e-14, 0.0, &context)?)
            }
            Err(e) if strict => return Err(e),
            Err(_) => None,
        };
        // The endpoint grows monotonically with the weight. An overweight
        // descent is clamped: it still collapses its cluster onto the
        // pivot, and the pivot trails the previous target, so the miss is
        // bounded by the margin the cap could not resolve. An overweight
        // ascent is dropped instead, because a capped ascent would inflate
        // the separation of everything above by `exp(60)` without reaching
        // its own target, and such inflations compound across pieces while
        // a recovery is capped at one piece's worth. In the reversed frame
        // the executed signs flip, so the rules swap sides.
        let w = match root {
            Some(w) if !reversed && w > w_cap => 0.0,
            Some(w) if !reversed => w.max(-w_cap),
            Some(w) => w.clamp(-w_cap, w_cap),
            None if reversed => 0.0,
            None => {
                if objective(0.0) > 0.0 {
                    -w_cap
                } else {
                    0.0
                }
            }
        };
        let residual = objective(w);
        let miss = residual.abs();
        if miss > 1e-9 * (1.0 + g.abs()) {
            // A steep descent moves the endpoint by several 1e-9 per ulp
            // of weight, so misses below 1e-8 are the objective's own
            // granularity, not a placement failure.
            if strict && miss > 1e-8 * (1.0 + g.abs()) {
                return Err(Error::Conditioning {
                    context: format!(
                        "{context}: endpoint residual {miss:.3e} is irreducible in f64"
                    ),
                });
            }
            if !strict {
                defects += 1;
                max_defect = max_defect.max(miss);
            }
        }
        neurons.push((w, b));
        achieved[i] = g + residual;
    }
    Ok(BatchSolve {
        neurons,
        achieved,
        defects,
        max_defect,
    })
}

/// Appends two ramps that cancel the batch field's value and slope above
/// `h2`, so the piece acts as the identity on everything beyond the
/// window. Both breakpoints sit strictly between `base`, which bounds
/// every batch trajectory from above, and `top`, the nearest point that
/// must not move, so the cancellation alters neither. The ramps are
/// exempt from the weight cap: their size tracks the field's own slope,
/// and whichever way they point they move a band resident by at most the
/// span before it parks at a breakpoint or exits into the zero field, so
/// nothing compounds the way a capped ascent does.
fn close_window(neurons: &mut Vec<(f64, f64)>, base: f64, top: f64) {
    let mut span = if top.is_finite() { top - base } else { 1.0 };
    span = span.max(1e-9 * (1.0 + base.abs()));
    let mut h1 = base + span / 3.0;
    let mut h2 = base + 2.0 * span / 3.0;
    // Degenerate spans collapse in f64; widen until the breakpoints
    // separate. Residents of the widened band are re-measured before
    // their own turn.
    while !(h1 > base && h2 > h1) {
        span *= 2.0;
        h1 = base + span / 3.0;
        h2 = base + 2.0 * span / 3.0;
    }
    let slope: f64 = neurons.iter().map(|&(w, _)| w).sum();
    let value: f64 = neurons.iter().map(|&(w, b)| w * (h2 + b).max(0.0)).sum();
    let w1 = -value / (h2 - h1);
    let w2 = -slope - w1;
    if w1.is_finite() && w2.is_finite() && (w1 != 0.0 || w2 != 0.0) {
        neurons.push((w1, -h1));
        neurons.push((w2, -h2));
    }
}

/// Neurons `(w, b)` per piece that drive `sources` onto `targets` in
/// increasing order, at most `budget` per piece, using at most `pieces`
/// pieces. In strict mode every target is hit exactly or the solve
/// fails; otherwise weights are capped for integrability and the report
/// carries any resulting misses as defects.
///
/// When the budget leaves room, each batch reserves two neurons to close
/// its window, so points awaiting later pieces are untouched instead of
/// riding every earlier batch.
///
/// The bottom-up pivot scheme is one-sided: a target below the previous
/// source is walled off behind the pivot, which is where descending
/// clusters pack their targets, while ascending clusters keep every
/// target above the pivot and merely pay squeeze weights that the cap
/// bounds benignly. Batches walled off in the forward pairing are
/// therefore solved on the reversed pairing, whose pivots mirror the
/// other way, and the negated neurons realize the forward map, since
/// reversing time in the flow inverts it. Each frame's wall depth is the
/// total of its target-below-previous-source gaps; the shallower frame
/// wins and ties go forward.
fn solve_direction(
    sources: &[f64],
    targets: &[f64],
    budget: usize,
    pieces: usize,
    t_piece: f64,
    floor: f64,
    strict: bool,
    label: &str,
) -> Result<Cascade> {
    let n = sources.len();
    let chunk = if !strict && budget >= 3 && n.div_ceil(budget - 2) <= pieces {
        budget - 2
    } else {
        budget
    };
    let w_cap = if strict {
        f64::INFINITY
    } else {
        WEIGHT_LOG_CAP / t_piece
    };
    let mut cur = sources.to_vec();
    let mut batches = Vec::with_capacity(n.div_ceil(chunk));
    let mut defects = 0usize;
    let mut max_defect = 0.0f64;
    let mut fixed_below = floor;
    let mut lo = 0usize;
    while lo < n {
        let j = batches.len();
        let hi_max = (lo + chunk).min(n);
        // A split is safe when every target placed so far sits below the
        // next pending point with room for the window closers between
        // them; unsafe splits leave the pending side exposed to the batch
        // field. Prefer the largest safe split the piece count affords,
        // which in practice aligns batches to quantile bands.
        let pieces_left = pieces.saturating_sub(j);
        let mut hi = hi_max;
        if chunk < budget {
            for h in (lo + 1..=hi_max).rev() {
                let fits = n - h <= pieces_left.saturating_sub(1) * chunk;
                let safe =
                    h == n || targets[h - 1] + 1e-6 * (1.0 + targets[h - 1].abs()) < cur[h];
                if fits && safe {
                    hi = h;
                    break;
                }
            }
        }
        let entries = cur[lo..hi].to_vec();
        let goals = &targets[lo..hi];
        let windowed = chunk < budget;
        let mut solve = solve_batch(&entries, goals, fixed_below, t_piece, w_cap, label, j)?;
        defects += solve.defects;
        max_defect = max_defect.max(solve.max_defect);
        if windowed {
            // Every batch trajectory stays below both its start and its
            // endpoint; the protected region begins at the first pending
            // point the batch has not overtaken. Overtaken points sit
            // inside the window already; they are re-measured on the
            // spot, whereas an unclosed field would drag every pending
            // point at once.
            let base = entries
                .iter()
                .chain(solve.achieved.iter())
                .fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let ahead = cur[hi..].partition_point(|&v| v <= base);
            let top = cur[hi..].get(ahead).copied().unwrap_or(f64::INFINITY);
            close_window(&mut solve.neurons, base, top);
        }
        cur[lo..hi].copy_from_slice(&solve.achieved);
        for i in hi..n {
            cur[i] = flow_scalar(&solve.neurons, t_piece, cur[i]);
        }
        fixed_below = cur[lo..hi].iter().fold(fixed_below, |m, &v| m.max(v));
        batches.push(solve.neurons);
        lo = hi;
    }
    Ok(Cascade {
        batches,
        defects,
        max_defect,
    })
}

/// Embed scalar neurons of coordinate `axis` into dimension `dim`.
fn embed_neuron(dim: usize, axis: usize, w: f64, b: f64) -> Neuron {
    let mut wv = vec![0.0; dim];
    wv[axis] = w;
    Neuron {
        w: wv,
        a: vecmath::unit(dim, axis),
        b,
    }
}

/// Schedule of `ceil(N / budget)` pieces whose flow carries every source
/// hyperplane onto its target, verified against the integrator to 1e-8.
/// The scalar cascades are embedded along `task.direction` in `dim`
/// dimensions; all other coordinates are untouched. A `time_share` below
/// one appends an idle piece covering the rest of the horizon.
pub fn control_hyperplanes(task: &HyperplaneTask, dim: usize, horizon: f64) -> Result<ControlSchedule> {
    task.validate()?;
    if task.direction >= dim {
        return Err(Error::Dimension {
            context: "hyperplane task direction",
            expected: dim,
            found: task.direction,
        });
    }
    if !(horizon > 0.0) || !horizon.is_finite() {
        return Err(Error::parameter("horizon must be positive and finite"));
    }
    let n_pieces = task.sources.len().div_ceil(task.budget);
    let active = task.time_share * horizon;
    let t_piece = active / n_pieces as f64;
    let label = format!("hyperplane cascade along coordinate {}", task.direction);
    let cascade = solve_direction(
        &task.sources,
        &task.targets,
        task.budget,
        n_pieces,
        t_piece,
        f64::NEG_INFINITY,
        true,
        &label,
    )?;
    let batches = cascade.batches;

    let idle = task.time_share < 1.0;
    let boundaries = equal_boundaries(active, n_pieces);
    let mut pieces = Vec::with_capacity(n_pieces + usize::from(idle));
    for (j, batch) in batches.iter().enumerate() {
        let mut neurons: Vec<Neuron> = batch
            .iter()
            .map(|&(w, b)| embed_neuron(dim, task.direction, w, b))
            .collect();
        neurons.resize_with(task.budget, || Neuron::zero_on_axis(dim, task.direction));
        pieces.push(Piece {
            t_start: boundaries[j],
            t_end: boundaries[j + 1],
            neurons,
        });
    }
    if idle {
        pieces.push(Piece {
            t_start: active,
            t_end: horizon,
            neurons: vec![Neuron::zero_on_axis(dim, task.direction); task.budget],
        });
    }
    let schedule = ControlSchedule::new(dim, task.budget, pieces)?;

    // Independent check: the adaptive integrator must land each source on
    // its target through the same schedule the caller will run. The
    // tolerances sit well below the acceptance threshold so integration
    // error does not masquerade as a synthesis error.
    let opts = IntegrateOpts {
        abs_tol: 1e-12,
        rel_tol: 1e-12,
        ..IntegrateOpts::default()
    };
    for (i, (&c, &g)) in task.sources.iter().zip(&task.targets).enumerate() {
        let mut x0 = vec![0.0; dim];
        x0[task.direction] = c;
        let (end, _) = integrate_endpoint(&schedule, &x0, &opts)?;
        let err = (end[task.direction] - g).abs();
        // Leaves headroom over the cascade's own 1e-8 endpoint granularity
        // so integration error does not turn a sound solve into a failure.
        if err > 2e-8 * (1.0 + g.abs()) {
            return Err(Error::Conditioning {
                context: format!("{label}: integrated flow misses hyperplane {i} by {err:.3e}"),
            });
        }
    }
    Ok(schedule)
}

// ---------------------------------------------------------------------------
// Full plan

/// Per-coordinate synthesis summary. `formula_hyperplanes` is the worst
/// case `n^k` the piece budget is sized for; `distinct_hyperplanes` counts
/// the cuts actually controlled after boundary sharing and deduplication.
/// `repaired_inversions` counts targets re-paired in sorted order because
/// the empirical cut order across prefix cells contradicted the rank
/// order, which no monotone flow can honor; `merged_duplicates` counts
/// cuts collapsed as numerically equal. `defective_hyperplanes` counts
/// cuts whose exact targets are unreachable in f64 because neighboring
/// cuts collided mid-cascade; `max_target_defect` is the largest distance
/// such a cut landed from its nominal target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionReport {
    pub direction: usize,
    pub formula_hyperplanes: u64,
    pub distinct_hyperplanes: usize,
    pub merged_duplicates: usize,
    pub repaired_inversions: usize,
    pub defective_hyperplanes: usize,
    pub max_target_defect: f64,
    pub pieces_used: usize,
}

/// What a transport plan promises and what it actually built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransportReport {
    pub dim: usize,
    pub q: f64,
    pub epsilon: f64,
    pub n: usize,
    pub delta: f64,
    pub p: usize,
    pub p_split: Vec<usize>,
    /// The two published resolution formulas disagree; plans are sized by
    /// the larger `proof_resolution`, and both values are recorded here.
    pub statement_resolution: f64,
    pub proof_resolution: f64,
    pub error_envelope: f64,
    pub compression_pieces: usize,
    pub control_pieces: usize,
    pub discontinuities: usize,
    pub max_target_diameter: f64,
    pub diameter_bound: f64,
    pub directions: Vec<DirectionReport>,
}

/// A synthesized transport plan: the full schedule (compression followed
/// by the simultaneous cut cascades), the partition with its targets, and
/// the synthesis report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransportPlan {
    pub schedule: ControlSchedule,
    pub tree: PartitionTree,
    pub report: TransportReport,
}

/// The distinct cut/target pairs of one level, sorted by cut. The leading
/// `(0, 0)` pair is dropped and replaced by a fixed floor at 0, saving a
/// neuron that would solve to zero weight; the trailing `(1, 1)` pair is
/// kept so the upper face is pinned exactly. Targets are re-paired in
/// sorted order when cross-rank cut interleavings invert them.
fn level_pairs(tree: &PartitionTree, level: usize) -> Result<(Vec<f64>, Vec<f64>, usize, usize)> {
    let cuts = &tree.levels[level].cuts;
    let targets = &tree.levels[level].targets;
    let mut pairs: Vec<(f64, f64)> = cuts
        .iter()
        .zip(targets)
        .flat_map(|(cs, gs)| cs.iter().copied().zip(gs.iter().copied()))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut merged = 0usize;
    let mut sources: Vec<f64> = Vec::with_capacity(pairs.len());
    let mut goals: Vec<f64> = Vec::with_capacity(pairs.len());
    for (c, g) in pairs {
        match sources.last() {
            Some(&prev) if c - prev <= EQUAL_CUT_TOL => {
                merged += 1;
                // Same-rank duplicates share one target by construction;
                // keep the smaller of any conflicting cross-rank targets
                // and let the repair pass below account for the rest.
                let last = goals.last_mut().unwrap();
                *last = last.min(g);
            }
            _ => {
                sources.push(c);
                goals.push(g);
            }
        }
    }
    if sources.first().copied() != Some(0.0) || goals.first().copied() != Some(0.0) {
        return Err(Error::invalid("partition level does not start at the cut 0"));
    }
    sources.remove(0);
    goals.remove(0);

    let mut sorted_goals = goals.clone();
    sorted_goals.sort_by(f64::total_cmp);
    let repaired = goals
        .iter()
        .zip(&sorted_goals)
        .filter(|(a, b)| (*a - *b).abs() > EQUAL_CUT_TOL)
        .count();
    Ok((sources, sorted_goals, merged, repaired))
}

/// End-to-end synthesis: compress the support, partition the compressed
/// cloud, displace the targets, and solve one cascade per coordinate on a
/// shared piece grid sized for the worst case `n^k` hyperplanes, so the
/// discontinuity count is exactly
/// `ceil(2d/p) + max_k ceil(n^k / p_k) - 1` regardless of deduplication.
pub fn plan_transport(
    mu0: &ParticleMeasure,
    spec: &TransportPlanSpec,
    horizon: f64,
) -> Result<TransportPlan> {
    spec.validate()?;
    mu0.validate()?;
    let d = spec.dim();
    if mu0.dim != d {
        return Err(Error::Dimension {
            context: "transport measure",
            expected: d,
            found: mu0.dim,
        });
    }
    if !(horizon > 0.0) || !horizon.is_finite() {
        return Err(Error::parameter("horizon must be positive and finite"));
    }

    let compression = compress_support(mu0, spec.p, COMPRESSION_SHARE * horizon)?;
    let inside = push_forward(&compression, mu0, &IntegrateOpts::default())?;
    let bare = build_partition(&inside, spec.n)?;
    let tree = build_delta_targets(&bare, spec.delta)?;

    let formula_counts: Vec<u64> = (1..=d as u32)
        .map(|k| {
            (spec.n as u64)
                .checked_pow(k)
                .ok_or_else(|| Error::parameter("resolution overflows the hyperplane count"))
        })
        .collect::<Result<Vec<_>>>()?;
    let control_pieces = formula_counts
        .iter()
        .zip(&spec.p_split)
        .map(|(&nk, &pk)| (nk as usize).div_ceil(pk))
        .max()
        .unwrap();
    let t_piece = (horizon - COMPRESSION_SHARE * horizon) / control_pieces as f64;

    let offsets: Vec<usize> = spec
        .p_split
        .iter()
        .scan(0usize, |acc, &pk| {
            let start = *acc;
            *acc += pk;
            Some(start)
        })
        .collect();
    let mut piece_neurons: Vec<Vec<Neuron>> =
        vec![vec![Neuron::zero_on_axis(d, 0); spec.p]; control_pieces];
    let mut directions = Vec::with_capacity(d);
    for k in 0..d {
        let (sources, goals, merged, repaired) = level_pairs(&tree, k)?;
        let label = format!("transport cascade along coordinate {k}");
        let cascade = solve_direction(
            &sources,
            &goals,
            spec.p_split[k],
            control_pieces,
            t_piece,
            0.0,
            false,
            &label,
        )?;
        for (j, batch) in cascade.batches.iter().enumerate() {
            for (slot, &(w, b)) in batch.iter().enumerate() {
                piece_neurons[j][offsets[k] + slot] = embed_neuron(d, k, w, b);
            }
        }
        directions.push(DirectionReport {
            direction: k,
            formula_hyperplanes: formula_counts[k],
            distinct_hyperplanes: sources.len(),
            merged_duplicates: merged,
            repaired_inversions: repaired,
            defective_hyperplanes: cascade.defects,
            max_target_defect: cascade.max_defect,
            pieces_used: cascade.batches.len(),
        });
    }

    let control_span = horizon - COMPRESSION_SHARE * horizon;
    let boundaries = equal_boundaries(control_span, control_pieces);
    let control_schedule = ControlSchedule::new(
        d,
        spec.p,
        piece_neurons
            .into_iter()
            .enumerate()
            .map(|(j, neurons)| Piece {
                t_start: boundaries[j],
                t_end: boundaries[j + 1],
                neurons,
            })
            .collect(),
    )?;
    let compression_pieces = compression.pieces.len();
    let schedule = compression.then(&control_schedule)?;
    debug_assert_eq!(
        schedule.discontinuity_count(),
        compression_pieces + control_pieces - 1
    );

    let report = TransportReport {
        dim: d,
        q: spec.q,
        epsilon: spec.epsilon,
        n: spec.n,
        delta: spec.delta,
        p: spec.p,
        p_split: spec.p_split.clone(),
        statement_resolution: statement_resolution(d, spec.q, spec.epsilon)?,
        proof_resolution: proof_resolution(d, spec.q, spec.epsilon)?,
        error_envelope: error_envelope(d, spec.q, spec.n)?,
        compression_pieces,
        control_pieces,
        discontinuities: schedule.discontinuity_count(),
        max_target_diameter: tree.max_target_diameter().unwrap(),
        diameter_bound: 3.0 * (d as f64).sqrt() / spec.n as f64,
        directions,
    };
    Ok(TransportPlan {
        schedule,
        tree,
        report,
    })
}

// ---------------------------------------------------------------------------
// Wasserstein distance

fn pair_cost(x: &[f64], y: &[f64], q: f64) -> f64 {
    let dist = vecmath::dist(x, y);
    if q == 1.0 {
        dist
    } else if q == 2.0 {
        dist * dist
    } else {
        dist.powf(q)
    }
}

/// Minimum-cost perfect matching on a dense `n x n` cost matrix by
/// shortest augmenting paths with dual potentials. Returns the column
/// assigned to each row and the total cost summed in row order.
fn solve_assignment(cost: &[f64], n: usize) -> (Vec<usize>, f64) {
    // Columns are 1-based with the virtual column 0 holding the row
    // currently being inserted; `owner[j]` is the row matched to column j.
    let inf = f64::INFINITY;
    let mut potential_row = vec![0.0; n + 1];
    let mut potential_col = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut parent = vec![0usize; n + 1];
    for row in 1..=n {
        owner[0] = row;
        let mut j0 = 0usize;
        let mut min_to = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let reduced =
                    cost[(i0 - 1) * n + (j - 1)] - potential_row[i0] - potential_col[j];
                if reduced < min_to[j] {
                    min_to[j] = reduced;
                    parent[j] = j0;
                }
                if min_to[j] < delta {
                    delta = min_to[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    potential_row[owner[j]] += delta;
                    potential_col[j] -= delta;
                } else {
                    min_to[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        // Augment along the found path back to the virtual column.
        while j0 != 0 {
            let j1 = parent[j0];
            owner[j0] = owner[j1];
            j0 = j1;
        }
    }
    let mut row_to_col = vec![0usize; n];
    for j in 1..=n {
        row_to_col[owner[j] - 1] = j - 1;
    }
    let total = (0..n).map(|i| cost[i * n + row_to_col[i]]).sum();
    (row_to_col, total)
}

/// Empirical Wasserstein-`q` distance between two particle clouds by exact
/// optimal assignment, `( min_sigma (1/M) sum |x_i - y_sigma(i)|^q )^(1/q)`.
/// Clouds with unequal sizes or non-uniform weights are first resampled to
/// a common uniform size. Above [`ASSIGNMENT_CAP`] particles the caller
/// must subsample; the exact solver's cubic cost is the gate.
pub fn wasserstein(mu: &ParticleMeasure, nu: &ParticleMeasure, q: f64) -> Result<f64> {
    mu.validate()?;
    nu.validate()?;
    if mu.dim != nu.dim {
        return Err(Error::Dimension {
            context: "wasserstein clouds",
            expected: mu.dim,
            found: nu.dim,
        });
    }
    if !q.is_finite() || q < 1.0 {
        return Err(Error::parameter(format!("q = {q} must be finite and at least 1")));
    }
    let m = mu.len().max(nu.len());
    if m > ASSIGNMENT_CAP {
        return Err(Error::SubsampleRequired {
            count: m,
            cap: ASSIGNMENT_CAP,
        });
    }
    let storage;
    let (a, b) = if mu.len() == nu.len() && mu.has_uniform_weights() && nu.has_uniform_weights() {
        (mu, nu)
    } else {
        storage = (mu.resample_uniform(m, 101)?, nu.resample_uniform(m, 202)?);
        (&storage.0, &storage.1)
    };

    let total = if mu.dim == 1 {
        // Sorted pairing is the exact optimum for any convex scalar cost.
        let mut xs: Vec<f64> = a.points.iter().map(|p| p[0]).collect();
        let mut ys: Vec<f64> = b.points.iter().map(|p| p[0]).collect();
        xs.sort_by(f64::total_cmp);
        ys.sort_by(f64::total_cmp);
        xs.iter()
            .zip(&ys)
            .map(|(&x, &y)| pair_cost(&[x], &[y], q))
            .sum::<f64>()
    } else {
        let mut cost = vec![0.0; m * m];
        for (i, x) in a.points.iter().enumerate() {
            for (j, y) in b.points.iter().enumerate() {
                cost[i * m + j] = pair_cost(x, y, q);
            }
        }
        solve_assignment(&cost, m).1
    };
    Ok((total / m as f64).powf(1.0 / q))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::integrate_endpoint;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(dim: usize, points: Vec<Vec<f64>>) -> ParticleMeasure {
        ParticleMeasure::uniform(dim, points).unwrap()
    }

    fn random_cloud(dim: usize, m: usize, lo: f64, hi: f64, seed: u64) -> ParticleMeasure {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let points = (0..m)
            .map(|_| (0..dim).map(|_| rng.gen_range(lo..hi)).collect())
            .collect();
        cloud(dim, points)
    }

    #[test]
    fn compression_identity_when_support_is_inside() {
        let mu = random_cloud(2, 40, 0.05, 0.95, 3);
        let schedule = compress_support(&mu, 3, 1.0).unwrap();
        assert_eq!(schedule.pieces.len(), 2);
        assert!(schedule
            .pieces
            .iter()
            .all(|p| p.neurons.iter().all(Neuron::is_inactive)));
        let out = push_forward(&schedule, &mu, &IntegrateOpts::default()).unwrap();
        assert_eq!(out.points, mu.points);
    }

    #[test]
    fn compression_single_axis_closed_form() {
        let mu = cloud(1, vec![vec![2.0], vec![0.5]]);
        let schedule = compress_support(&mu, 1, 1.0).unwrap();
        assert_eq!(schedule.pieces.len(), 2);
        let out = push_forward(&schedule, &mu, &IntegrateOpts::default()).unwrap();
        // Both points decay by exp(-(ln 2 + 1e-3)); the lower tail already
        // fits, so the second piece is inert.
        let shrink = (-(2.0f64.ln() + 1e-3)).exp();
        assert!((out.points[0][0] - 2.0 * shrink).abs() <= 1e-9);
        assert!((out.points[1][0] - 0.5 * shrink).abs() <= 1e-9);
        assert!(out.points[0][0] < 1.0);
    }

    #[test]
    fn compression_batches_and_containment() {
        let mu = random_cloud(3, 60, -2.5, 3.5, 11);
        for (p, pieces) in [(2usize, 3usize), (7, 1)] {
            let schedule = compress_support(&mu, p, 1.0).unwrap();
            assert_eq!(schedule.pieces.len(), pieces);
            assert_eq!(schedule.width, p);
            let out = push_forward(&schedule, &mu, &IntegrateOpts::default()).unwrap();
            for pt in &out.points {
                assert!(pt.iter().all(|&v| (0.0..=1.0).contains(&v)), "{pt:?}");
            }
        }
    }

    #[test]
    fn partition_uniform_grid_d2() {
        let mu = random_cloud(2, 400, 0.0001, 0.9999, 17);
        let tree = build_partition(&mu, 2).unwrap();
        assert!((tree.levels[0].cuts[0][1] - 0.5).abs() <= 0.08);
        for cuts in &tree.levels[1].cuts {
            assert!((cuts[1] - 0.5).abs() <= 0.12);
        }
        let mut counts = vec![0usize; 4];
        for pt in &mu.points {
            let idx = tree.locate(pt).unwrap();
            counts[idx[0] * 2 + idx[1]] += 1;
        }
        for &c in &counts {
            assert!((c as i64 - 100).unsigned_abs() <= 2, "leaf counts {counts:?}");
        }
    }

    #[test]
    fn partition_quantiles_d1_nine_points() {
        let vals = [0.05, 0.1, 0.2, 0.35, 0.4, 0.55, 0.6, 0.8, 0.9];
        let mu = cloud(1, vals.iter().map(|&v| vec![v]).collect());
        let tree = build_partition(&mu, 3).unwrap();
        let cuts = &tree.levels[0].cuts[0];
        assert_eq!(cuts.len(), 4);
        assert_eq!(cuts[0], 0.0);
        assert_eq!(cuts[1], 0.5 * (0.2 + 0.35));
        assert_eq!(cuts[2], 0.5 * (0.55 + 0.6));
        assert_eq!(cuts[3], 1.0);
        let mut counts = [0usize; 3];
        for v in vals {
            counts[tree.locate(&[v]).unwrap()[0]] += 1;
        }
        assert_eq!(counts, [3, 3, 3]);
    }

    #[test]
    fn partition_refuses_insufficient_particles() {
        let mu = random_cloud(2, 15, 0.1, 0.9, 5);
        match build_partition(&mu, 4) {
            Err(Error::Resolution { needed, got }) => {
                assert_eq!((needed, got), (16, 15));
            }
            other => panic!("expected a resolution error, got {other:?}"),
        }
    }

    fn hand_tree() -> PartitionTree {
        PartitionTree {
            dim: 2,
            n: 2,
            levels: vec![
                PartitionLevel {
                    cuts: vec![vec![0.0, 0.5, 1.0]],
                    targets: Vec::new(),
                },
                PartitionLevel {
                    cuts: vec![vec![0.0, 0.4, 1.0], vec![0.0, 0.6, 1.0]],
                    targets: Vec::new(),
                },
            ],
        }
    }

    #[test]
    fn delta_targets_formula_hand_case() {
        let tree = build_delta_targets(&hand_tree(), 0.1).unwrap();
        assert_eq!(tree.levels[0].targets[0], vec![0.0, 0.5, 1.0]);
        // Rank-1 cuts are 0.4 and 0.6; the smaller one anchors, the other
        // is displaced by delta times the gap.
        assert_eq!(tree.levels[1].targets[0], vec![0.0, 0.5, 1.0]);
        let displaced = tree.levels[1].targets[1][1];
        assert!((displaced - 0.52).abs() <= 1e-12);
    }

    #[test]
    fn delta_targets_zero_limit_and_mirroring() {
        for delta in [0.4, 0.1, 1e-6] {
            let tree = build_delta_targets(&hand_tree(), delta).unwrap();
            let level = &tree.levels[1];
            for targets in &level.targets {
                assert_eq!(targets[0], 0.0);
                assert_eq!(targets[2], 1.0);
                assert!((targets[1] - 0.5).abs() <= delta);
                assert!(targets.windows(2).all(|w| w[0] < w[1]));
            }
            // Same-rank order across prefixes mirrors the cut order.
            assert!(level.targets[0][1] < level.targets[1][1]);
        }
    }

    #[test]
    fn delta_targets_rejects_out_of_range() {
        for delta in [0.0, 0.5, -0.1] {
            assert!(matches!(
                build_delta_targets(&hand_tree(), delta),
                Err(Error::Parameter { .. })
            ));
        }
    }

    #[test]
    fn hyperplane_single_pair_closed_form() {
        let task = HyperplaneTask::new(0, vec![1.0], vec![std::f64::consts::E], 1).unwrap();
        let schedule = control_hyperplanes(&task, 1, 1.0).unwrap();
        // The pivot lands at 0, so the field is w * x and the flow is a
        // pure exponential: w = 1 sends 1 to e over a unit horizon.
        let neuron = &schedule.pieces[0].neurons[0];
        assert_eq!(neuron.b, 0.0);
        assert!((neuron.w[0] - 1.0).abs() <= 1e-12);

        let fixed = HyperplaneTask::new(0, vec![1.0], vec![1.0], 1).unwrap();
        let schedule = control_hyperplanes(&fixed, 1, 1.0).unwrap();
        assert_eq!(schedule.pieces[0].neurons[0].w[0], 0.0);
    }

    #[test]
    fn hyperplane_three_points_single_neuron() {
        let task = HyperplaneTask::new(1, vec![0.0, 0.5, 1.0], vec![0.2, 0.9, 1.7], 1).unwrap();
        let schedule = control_hyperplanes(&task, 2, 1.0).unwrap();
        assert_eq!(schedule.discontinuity_count(), 2);
        let opts = IntegrateOpts::default();
        for (&c, &g) in task.sources.iter().zip(&task.targets) {
            let (end, _) = integrate_endpoint(&schedule, &[0.3, c], &opts).unwrap();
            assert_eq!(end[0], 0.3);
            assert!((end[1] - g).abs() <= 1e-8);
        }
    }

    fn seven_point_task() -> HyperplaneTask {
        let sources: Vec<f64> = (0..7).map(|i| 0.1 * i as f64).collect();
        let targets: Vec<f64> = (0..7).map(|i| 0.05 + 0.15 * i as f64).collect();
        HyperplaneTask::new(0, sources, targets, 3).unwrap()
    }

    #[test]
    fn hyperplane_batches_match_evaluator_and_integrator() {
        let task = seven_point_task();
        let schedule = control_hyperplanes(&task, 1, 1.0).unwrap();
        assert_eq!(schedule.pieces.len(), 3);
        let opts = IntegrateOpts::default();
        for &c in &task.sources {
            let mut x = c;
            for piece in &schedule.pieces {
                let neurons: Vec<(f64, f64)> =
                    piece.neurons.iter().map(|n| (n.w[0], n.b)).collect();
                x = flow_scalar(&neurons, piece.t_end - piece.t_start, x);
            }
            let (end, _) = integrate_endpoint(&schedule, &[c], &opts).unwrap();
            assert!((end[0] - x).abs() <= 1e-9, "routes disagree at {c}");
        }
    }

    #[test]
    fn hyperplane_preserves_order_throughout() {
        let task = seven_point_task();
        let schedule = control_hyperplanes(&task, 1, 1.0).unwrap();
        let mut cur = task.sources.clone();
        for piece in &schedule.pieces {
            let neurons: Vec<(f64, f64)> =
                piece.neurons.iter().map(|n| (n.w[0], n.b)).collect();
            for v in &mut cur {
                *v = flow_scalar(&neurons, piece.t_end - piece.t_start, *v);
            }
            assert!(cur.windows(2).all(|w| w[0] < w[1]), "order lost: {cur:?}");
        }
    }

    fn jittered_grid(side: usize, lo: f64, step: f64, seed: u64) -> ParticleMeasure {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut points = Vec::with_capacity(side * side);
        for i in 0..side {
            for j in 0..side {
                points.push(vec![
                    lo + step * i as f64 + rng.gen_range(-0.02..0.02),
                    lo + step * j as f64 + rng.gen_range(-0.02..0.02),
                ]);
            }
        }
        cloud(2, points)
    }

    #[test]
    fn plan_small_grid_formula_and_padding() {
        let mu = jittered_grid(5, -0.5, 0.5, 7);
        let spec = TransportPlanSpec::with_resolution(1.0, 4, vec![1, 2]).unwrap();
        let plan = plan_transport(&mu, &spec, 1.0).unwrap();
        // ceil(2d/p) = 2 compression pieces, max(4/1, 16/2) = 8 control
        // pieces, hence 9 switches regardless of deduplication.
        assert_eq!(plan.report.compression_pieces, 2);
        assert_eq!(plan.report.control_pieces, 8);
        assert_eq!(plan.report.discontinuities, 9);
        assert_eq!(plan.schedule.discontinuity_count(), 9);
        assert_eq!(plan.schedule.pieces.len(), 10);

        let d0 = &plan.report.directions[0];
        assert_eq!(d0.formula_hyperplanes, 4);
        assert_eq!(d0.distinct_hyperplanes, 4);
        assert_eq!(d0.pieces_used, 4);
        assert_eq!(d0.defective_hyperplanes, 0);
        let d1 = &plan.report.directions[1];
        assert_eq!(d1.formula_hyperplanes, 16);
        assert_eq!(d1.distinct_hyperplanes, 13);
        assert_eq!(d1.merged_duplicates, 6);
        assert_eq!(d1.pieces_used, 7);
        // With two neurons per piece there is no room for window closers;
        // the grid packs same-rank cuts of different slabs within sampling
        // jitter, so some collide mid-cascade and miss their targets. The
        // misses must be counted and bounded, not silently absorbed.
        assert!(d1.max_target_defect.is_finite());
        assert!(
            d1.defective_hyperplanes == 0 || d1.max_target_defect > 0.0,
            "defects reported without a magnitude"
        );

        let bound = 3.0 * 2f64.sqrt() / 4.0;
        assert_eq!(plan.report.diameter_bound, bound);
        assert!(plan.report.max_target_diameter <= bound);
    }

    #[test]
    fn debug_uniform_cloud_anatomy() {
        let mu = random_cloud(2, 500, 0.0, 1.0, 23);
        let spec = TransportPlanSpec::with_resolution(1.0, 3, vec![2, 7]).unwrap();
        let compression = compress_support(&mu, spec.p, COMPRESSION_SHARE).unwrap();
        let inside = push_forward(&compression, &mu, &IntegrateOpts::default()).unwrap();
        let bare = build_partition(&inside, spec.n).unwrap();
        let tree = build_delta_targets(&bare, spec.delta).unwrap();
        for k in 0..2 {
            let (sources, goals, merged, repaired) = level_pairs(&tree, k).unwrap();
            println!("== direction {k}: merged={merged} repaired={repaired}");
            for (c, g) in sources.iter().zip(&goals) {
                println!("   src {c:.6} -> goal {g:.6} (move {:+.3e})", g - c);
            }
        }
        let plan = plan_transport(&mu, &spec, 1.0).unwrap();
        for d in &plan.report.directions {
            println!("dir {} defects {} max {:.6}", d.direction, d.defective_hyperplanes, d.max_target_defect);
        }
        let opts = IntegrateOpts::default();
        let out = push_forward(&plan.schedule, &mu, &opts).unwrap();
        let mut worst = (0.0f64, 0usize);
        for (i, (a, b)) in mu.points.iter().zip(&out.points).enumerate() {
            for k in 0..2 {
                if (a[k] - b[k]).abs() > worst.0 {
                    worst = ((a[k] - b[k]).abs(), i);
                }
            }
        }
        let i = worst.1;
        println!("worst particle {i}: {:?} -> {:?}", mu.points[i], out.points[i]);
    }

    #[test]
    fn plan_uniform_cloud_is_near_fixed_point() {
        let mu = random_cloud(2, 500, 0.0, 1.0, 23);
        // Seven neurons leave room for window closers on the second
        // coordinate, whose same-rank cuts sit within sampling jitter.
        let spec = TransportPlanSpec::with_resolution(1.0, 3, vec![2, 7]).unwrap();
        let plan = plan_transport(&mu, &spec, 1.0).unwrap();
        let out = push_forward(&plan.schedule, &mu, &IntegrateOpts::default()).unwrap();
        let mut worst = 0.0f64;
        for (a, b) in mu.points.iter().zip(&out.points) {
            for k in 0..2 {
                worst = worst.max((a[k] - b[k]).abs());
            }
        }
        assert!(worst <= 0.2, "uniform cloud moved by {worst}");
        assert_eq!(out.weights, mu.weights);
    }

    #[test]
    fn transport_coordinates_evolve_independently() {
        let mu = jittered_grid(5, -0.3, 0.4, 29);
        let spec = TransportPlanSpec::with_resolution(1.0, 3, vec![1, 7]).unwrap();
        let plan = plan_transport(&mu, &spec, 1.0).unwrap();
        let opts = IntegrateOpts::default();
        let (a, _) = integrate_endpoint(&plan.schedule, &[0.31, 0.17], &opts).unwrap();
        let (b, _) = integrate_endpoint(&plan.schedule, &[0.31, 0.93], &opts).unwrap();
        assert!((a[0] - b[0]).abs() <= 1e-9);
        let (c, _) = integrate_endpoint(&plan.schedule, &[0.88, 0.17], &opts).unwrap();
        assert!((a[1] - c[1]).abs() <= 1e-9);
    }

    /// Two-component cloud whose second coordinate is drawn independently
    /// of the first, so conditional quantiles agree across slabs.
    fn product_mixture(m: usize, seed: u64) -> ParticleMeasure {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let points = (0..m)
            .map(|_| {
                let center = if rng.gen_bool(0.5) { 0.3 } else { 0.7 };
                let x: f64 = center + 0.1 * rng.sample::<f64, _>(rand_distr::StandardNormal);
                let y: f64 = 0.5 + 0.15 * rng.sample::<f64, _>(rand_distr::StandardNormal);
                vec![x, y]
            })
            .collect();
        cloud(2, points)
    }

    #[test]
    fn transported_cells_land_in_their_targets() {
        let mu = product_mixture(10_000, 41);
        // Eight neurons leave room for window closers on the second
        // coordinate, whose same-rank cuts sit within sampling jitter.
        let spec = TransportPlanSpec::with_resolution(1.0, 3, vec![2, 8]).unwrap();
        let plan = plan_transport(&mu, &spec, 1.0).unwrap();
        assert_eq!(plan.report.directions[1].repaired_inversions, 0);

        // Source cells are read off the compressed cloud, which the plan
        // reproduces deterministically from the same inputs.
        let opts = IntegrateOpts::default();
        let compression = compress_support(&mu, spec.p, COMPRESSION_SHARE).unwrap();
        let inside = push_forward(&compression, &mu, &opts).unwrap();
        let out = push_forward(&plan.schedule, &mu, &opts).unwrap();
        let mut hits = 0usize;
        for (src, dst) in inside.points.iter().zip(&out.points) {
            let leaf = plan.tree.locate(src).unwrap();
            let (lo, hi) = plan.tree.target_cell(&leaf).unwrap();
            let inside_target = dst
                .iter()
                .zip(lo.iter().zip(&hi))
                .all(|(&v, (&l, &h))| v >= l - 1e-8 && v <= h + 1e-8);
            hits += usize::from(inside_target);
        }
        assert!(hits >= 9_500, "only {hits} of 10000 landed in their cells");
    }

    /// Strongly correlated coordinates put the conditional quantiles of
    /// different slabs on opposite sides of each other, so the rank order
    /// cannot be realized by one monotone scalar flow and the plan must
    /// re-pair the sorted targets.
    #[test]
    fn transport_repairs_rank_inversions() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let points = (0..2000)
            .map(|_| {
                let center = if rng.gen_bool(0.5) { 0.25 } else { 0.75 };
                let x: f64 = center + 0.06 * rng.sample::<f64, _>(rand_distr::StandardNormal);
                let y: f64 = x + 0.05 * rng.sample::<f64, _>(rand_distr::StandardNormal);
                vec![x, y]
            })
            .collect();
        let mu = cloud(2, points);
        let spec = TransportPlanSpec::with_resolution(1.0, 3, vec![2, 3]).unwrap();
        let plan = plan_transport(&mu, &spec, 1.0).unwrap();
        assert!(plan.report.directions[1].repaired_inversions > 0);
        // ceil(2d/p) = 1 compression piece plus max(ceil(3/2), ceil(9/3)) = 3
        // control pieces give 3 switches.
        assert_eq!(plan.report.discontinuities, 3);

        let out = push_forward(&plan.schedule, &mu, &IntegrateOpts::default()).unwrap();
        for pt in &out.points {
            assert!(pt.iter().all(|&v| (-1e-9..=1.0 + 1e-9).contains(&v)));
        }
    }

    #[test]
    fn wasserstein_identical_and_single() {
        let mu = random_cloud(2, 30, -1.0, 1.0, 51);
        assert_eq!(wasserstein(&mu, &mu, 1.0).unwrap(), 0.0);

        let a = cloud(2, vec![vec![0.0, 0.0]]);
        let b = cloud(2, vec![vec![3.0, 4.0]]);
        assert!((wasserstein(&a, &b, 1.0).unwrap() - 5.0).abs() <= 1e-12);
        assert!((wasserstein(&a, &b, 2.0).unwrap() - 5.0).abs() <= 1e-12);
    }

    fn brute_force_wasserstein(mu: &ParticleMeasure, nu: &ParticleMeasure, q: f64) -> f64 {
        fn permutations(k: usize) -> Vec<Vec<usize>> {
            if k == 1 {
                return vec![vec![0]];
            }
            let mut all = Vec::new();
            for rest in permutations(k - 1) {
                for slot in 0..k {
                    let mut perm = rest.clone();
                    perm.insert(slot, k - 1);
                    all.push(perm);
                }
            }
            all
        }
        let m = mu.len();
        let best = permutations(m)
            .into_iter()
            .map(|perm| {
                perm.iter()
                    .enumerate()
                    .map(|(i, &j)| pair_cost(&mu.points[i], &nu.points[j], q))
                    .sum::<f64>()
            })
            .fold(f64::INFINITY, f64::min)
            / m as f64;
        best.powf(1.0 / q)
    }

    #[test]
    fn wasserstein_matches_permutation_brute_force() {
        for seed in 0..100 {
            let mu = random_cloud(2, 5, -1.0, 1.0, 1000 + seed);
            let nu = random_cloud(2, 5, -1.0, 1.0, 2000 + seed);
            for q in [1.0, 2.0, 1.7] {
                let fast = wasserstein(&mu, &nu, q).unwrap();
                let slow = brute_force_wasserstein(&mu, &nu, q);
                assert!(
                    (fast - slow).abs() <= 1e-12,
                    "seed {seed}, q {q}: {fast} vs {slow}"
                );
            }
        }
    }

    #[test]
    fn wasserstein_metric_axioms_on_random_triples() {
        for seed in 0..5 {
            let a = random_cloud(2, 48, -1.0, 1.0, 300 + seed);
            let b = random_cloud(2, 48, -1.0, 1.0, 400 + seed);
            let c = random_cloud(2, 48, -1.0, 1.0, 500 + seed);
            for q in [1.0, 2.0] {
                let ab = wasserstein(&a, &b, q).unwrap();
                let ba = wasserstein(&b, &a, q).unwrap();
                let bc = wasserstein(&b, &c, q).unwrap();
                let ac = wasserstein(&a, &c, q).unwrap();
                assert!((ab - ba).abs() <= 1e-12);
                assert!(ac <= ab + bc + 1e-10, "triangle: {ac} > {ab} + {bc}");
                assert!(ab > 0.0);
            }
        }
    }

    #[test]
    fn wasserstein_sorted_pairing_in_one_dimension() {
        let mu1 = random_cloud(1, 200, -2.0, 2.0, 61);
        let nu1 = random_cloud(1, 200, -1.0, 3.0, 62);
        let lift = |m: &ParticleMeasure| {
            cloud(2, m.points.iter().map(|p| vec![p[0], 0.0]).collect())
        };
        for q in [1.0, 2.0, 1.5] {
            let fast = wasserstein(&mu1, &nu1, q).unwrap();
            let planar = wasserstein(&lift(&mu1), &lift(&nu1), q).unwrap();
            assert!((fast - planar).abs() <= 1e-12, "q {q}: {fast} vs {planar}");
        }
    }

    #[test]
    fn wasserstein_requests_subsampling_above_cap() {
        let big: Vec<Vec<f64>> = (0..4097).map(|i| vec![i as f64, 0.0]).collect();
        let mu = cloud(2, big.clone());
        let nu = cloud(2, big);
        match wasserstein(&mu, &nu, 1.0) {
            Err(Error::SubsampleRequired { count, cap }) => {
                assert_eq!((count, cap), (4097, ASSIGNMENT_CAP));
            }
            other => panic!("expected a subsample request, got {other:?}"),
        }
    }

    #[test]
    fn spec_resolution_formulas() {
        let proof = proof_resolution(2, 1.0, 1.0).unwrap();
        assert!((proof - 27.0 * 2f64.sqrt()).abs() <= 1e-9);
        let statement = statement_resolution(2, 1.0, 1.0).unwrap();
        assert!((statement - 3.0 * 2f64.powf(1.5)).abs() <= 1e-9);
        assert!(statement < proof);

        let spec = TransportPlanSpec::for_accuracy(1.0, 1.0, vec![2, 2]).unwrap();
        assert_eq!(spec.n, 39);
        assert_eq!(spec.delta, 0.25 / 39.0);
        assert!(error_envelope(2, 1.0, spec.n).unwrap() <= 1.0);

        assert!(matches!(
            proof_resolution(3, 1.5, 1.0),
            Err(Error::Parameter { .. })
        ));
        assert!(matches!(
            proof_resolution(2, 0.9, 1.0),
            Err(Error::Parameter { .. })
        ));
        assert!(matches!(
            TransportPlanSpec::for_accuracy(1.99, 0.5, vec![2, 2]),
            Err(Error::Parameter { .. })
        ));
    }

    #[test]
    fn plan_rejects_bad_specs() {
        let mut spec = TransportPlanSpec::with_resolution(1.0, 3, vec![2, 2]).unwrap();
        spec.p = 7;
        assert!(matches!(spec.validate(), Err(Error::Parameter { .. })));
        spec.p = 4;
        spec.delta = 0.5;
        assert!(matches!(spec.validate(), Err(Error::Parameter { .. })));
        spec.delta = 1.0 / 12.0;
        spec.epsilon = 1e-6;
        assert!(matches!(spec.validate(), Err(Error::Parameter { .. })));

        let good = TransportPlanSpec::with_resolution(1.0, 3, vec![2, 2]).unwrap();
        let mu = random_cloud(3, 60, 0.0, 1.0, 71);
        assert!(matches!(
            plan_transport(&mu, &good, 1.0),
            Err(Error::Dimension { .. })
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig { cases: 12, ..ProptestConfig::default() })]

        #[test]
        fn prop_monotone_tasks_hit_targets(
            src_start in -2.0f64..0.0,
            tgt_start in -2.0f64..0.0,
            src_gaps in proptest::collection::vec(0.05f64..0.5, 1..6),
            tgt_gaps in proptest::collection::vec(0.05f64..0.5, 1..6),
            budget in 1usize..4,
        ) {
            let len = src_gaps.len().min(tgt_gaps.len());
            let accumulate = |start: f64, gaps: &[f64]| {
                gaps[..len]
                    .iter()
                    .scan(start, |acc, &g| {
                        *acc += g;
                        Some(*acc)
                    })
                    .collect::<Vec<f64>>()
            };
            let sources = accumulate(src_start, &src_gaps);
            let targets = accumulate(tgt_start, &tgt_gaps);
            // A target below the previous source forces the point to dive
            // past its protective breakpoint, and stacked dives amplify
            // round-off exponentially; such tasks may be refused, and the
            // refusal must surface as a numeric error, never a panic or a
            // silently wrong schedule.
            let tame = (1..len).all(|i| targets[i] > sources[i - 1]);
            let task = HyperplaneTask::new(0, sources, targets, budget).unwrap();
            let result = control_hyperplanes(&task, 1, 1.0);
            if let Err(e) = &result {
                prop_assert!(e.is_numeric() && !tame, "unexpected refusal: {e}");
                return Ok(());
            }
            let schedule = result.unwrap();
            prop_assert_eq!(schedule.pieces.len(), len.div_ceil(budget));

            let mut cur = task.sources.clone();
            for piece in &schedule.pieces {
                let neurons: Vec<(f64, f64)> =
                    piece.neurons.iter().map(|n| (n.w[0], n.b)).collect();
                for v in &mut cur {
                    *v = flow_scalar(&neurons, piece.t_end - piece.t_start, *v);
                }
                prop_assert!(cur.windows(2).all(|w| w[0] < w[1]));
            }
            for (v, g) in cur.iter().zip(&task.targets) {
                prop_assert!((v - g).abs() <= 1e-8 * (1.0 + g.abs()));
            }
        }

        #[test]
        fn prop_delta_targets_stay_in_bands(
            n in 2usize..6,
            seed in 0u64..1000,
            delta_frac in 0.05f64..0.95,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut node_cuts = |n: usize| -> Vec<f64> {
                let mut cuts = vec![0.0];
                for i in 1..n {
                    cuts.push((i as f64 + rng.gen_range(-0.3..0.3)) / n as f64);
                }
                cuts.push(1.0);
                cuts
            };
            let tree = PartitionTree {
                dim: 2,
                n,
                levels: vec![
                    PartitionLevel { cuts: vec![node_cuts(n)], targets: Vec::new() },
                    PartitionLevel {
                        cuts: (0..n).map(|_| node_cuts(n)).collect(),
                        targets: Vec::new(),
                    },
                ],
            };
            let delta = delta_frac / n as f64;
            let out = build_delta_targets(&tree, delta).unwrap();
            for level in &out.levels {
                for targets in &level.targets {
                    prop_assert_eq!(targets[0], 0.0);
                    prop_assert_eq!(targets[n], 1.0);
                    for i in 1..n {
                        prop_assert!((targets[i] - i as f64 / n as f64).abs() <= delta);
                    }
                    prop_assert!(targets.windows(2).all(|w| w[0] < w[1]));
                }
                // Same-rank monotonicity across prefixes.
                for i in 1..n {
                    let mut pairs: Vec<(f64, f64)> = level
                        .cuts
                        .iter()
                        .zip(&level.targets)
                        .map(|(c, t)| (c[i], t[i]))
                        .collect();
                    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
                    prop_assert!(pairs.windows(2).all(|w| w[0].1 <= w[1].1));
                }
            }
        }
    }
}
