//! Exact interpolation of finite datasets by piecewise-constant controls.
//!
//! The planner works in an adapted orthonormal basis in which the first
//! coordinates of the inputs are pairwise distinct (and, for the two-stage
//! plan, the second coordinates of the targets as well). Each piece then
//! freezes the sorting coordinate, so every trajectory moves along straight
//! lines and the neuron weights solve a triangular linear system in closed
//! form. No numerical integration is involved in planning; integration is
//! only used downstream to verify the schedules.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{ControlSchedule, Dataset, Neuron, Piece};
use crate::vecmath;

/// How the adapted basis was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BasisProvenance {
    /// The canonical basis already separates the data.
    Identity,
    /// A rotation chosen so the relevant projections are pairwise distinct.
    SeparatingRotation,
    /// First basis vector orthogonal to every displacement `x_n - y_n`, so
    /// the first coordinate of each input already equals its target's.
    MatchedFirstCoordinate,
}

impl BasisProvenance {
    pub fn as_str(self) -> &'static str {
        match self {
            BasisProvenance::Identity => "identity",
            BasisProvenance::SeparatingRotation => "separating_rotation",
            BasisProvenance::MatchedFirstCoordinate => "matched_first_coordinate",
        }
    }
}

/// An orthonormal change of coordinates. `columns[i]` is the i-th new basis
/// vector expressed in the original coordinates.
#[derive(Debug, Clone)]
pub struct BasisChange {
    columns: Vec<Vec<f64>>,
    pub provenance: BasisProvenance,
}

impl BasisChange {
    pub fn identity(dim: usize) -> Self {
        BasisChange {
            columns: (0..dim).map(|k| vecmath::unit(dim, k)).collect(),
            provenance: BasisProvenance::Identity,
        }
    }

    /// Wraps explicit basis vectors, enforcing orthonormality to 1e-12.
    pub fn from_columns(columns: Vec<Vec<f64>>, provenance: BasisProvenance) -> Result<Self> {
        let dim = columns.len();
        for (i, ci) in columns.iter().enumerate() {
            if ci.len() != dim {
                return Err(Error::Dimension {
                    context: "basis column",
                    expected: dim,
                    found: ci.len(),
                });
            }
            for (j, cj) in columns.iter().enumerate() {
                let want = if i == j { 1.0 } else { 0.0 };
                if (vecmath::dot(ci, cj) - want).abs() > 1e-12 {
                    return Err(Error::Conditioning {
                        context: "basis columns are not orthonormal".into(),
                    });
                }
            }
        }
        Ok(BasisChange {
            columns,
            provenance,
        })
    }

    pub fn dim(&self) -> usize {
        self.columns.len()
    }

    pub fn column(&self, i: usize) -> &[f64] {
        &self.columns[i]
    }

    pub fn is_identity(&self) -> bool {
        self.columns
            .iter()
            .enumerate()
            .all(|(k, c)| c == &vecmath::unit(self.dim(), k))
    }

    /// Coordinates of `x` in the new basis.
    pub fn to_new(&self, x: &[f64]) -> Vec<f64> {
        self.columns.iter().map(|u| vecmath::dot(u, x)).collect()
    }

    /// Original coordinates of a point given in the new basis.
    pub fn to_old(&self, xp: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        for (c, u) in xp.iter().zip(&self.columns) {
            vecmath::axpy(*c, u, &mut out);
        }
        out
    }

    /// Maps a neuron written in the new coordinates back to the original
    /// ones. Both the output weight and the input direction rotate; the bias
    /// is invariant because `a'·x' = (Ua')·x`.
    pub fn neuron_to_old(&self, n: &Neuron) -> Result<Neuron> {
        Neuron::new(self.to_old(&n.w), self.to_old(&n.a), n.b)
    }

    pub fn max_orthonormality_defect(&self) -> f64 {
        let mut worst = 0.0f64;
        for (i, ci) in self.columns.iter().enumerate() {
            for (j, cj) in self.columns.iter().enumerate() {
                let want = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((vecmath::dot(ci, cj) - want).abs());
            }
        }
        worst
    }
}

/// A synthesized schedule together with the basis it was planned in and the
/// batch bookkeeping (dataset indices grouped per piece-owning batch).
#[derive(Debug, Clone)]
pub struct InterpolationPlan {
    pub basis: BasisChange,
    pub schedule: ControlSchedule,
    pub claimed_discontinuities: usize,
    pub stage_one_batches: Vec<Vec<usize>>,
    pub stage_two_batches: Vec<Vec<usize>>,
}

/// Smallest gap between consecutive sorted projections of `points` onto `u`.
/// Returns +inf for fewer than two points.
fn min_projection_gap(points: &[&[f64]], u: &[f64]) -> f64 {
    let mut proj: Vec<f64> = points.iter().map(|x| vecmath::dot(u, x)).collect();
    proj.sort_by(|a, b| a.partial_cmp(b).unwrap());
    proj.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min)
}

fn diameter(points: &[&[f64]]) -> f64 {
    let mut d = 0.0f64;
    for (i, a) in points.iter().enumerate() {
        for b in &points[i + 1..] {
            d = d.max(vecmath::dist(a, b));
        }
    }
    d
}

const SEPARATION_RETRIES: usize = 32;

/// Finds an orthonormal basis whose first vector separates the inputs and
/// whose second vector separates the targets, in the sense of pairwise
/// distinct projections. Canonical axes are tried before random rotations,
/// so already-separated data keeps the identity basis.
pub fn coordinate_change(data: &Dataset, seed: u64) -> Result<BasisChange> {
    let d = data.dim;
    if d < 2 {
        return Err(Error::Unsupported {
            context: "adapted basis needs dimension at least 2".into(),
        });
    }
    let xs: Vec<&[f64]> = data.inputs().map(|v| v.as_slice()).collect();
    let ys: Vec<&[f64]> = data.targets().map(|v| v.as_slice()).collect();
    // Single pairs are separated by any direction.
    let tol_x = 1e-9 * diameter(&xs).max(f64::MIN_POSITIVE);
    let tol_y = 1e-9 * diameter(&ys).max(f64::MIN_POSITIVE);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let random_unit = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        loop {
            let mut v: Vec<f64> =
                (0..d).map(|_| rng.sample(rand_distr::StandardNormal)).collect();
            if vecmath::normalize(&mut v) > 1e-6 {
                return v;
            }
        }
    };

    let mut u1: Option<Vec<f64>> = None;
    for k in 0..d {
        let cand = vecmath::unit(d, k);
        if min_projection_gap(&xs, &cand) > tol_x {
            u1 = Some(cand);
            break;
        }
    }
    for _ in 0..SEPARATION_RETRIES {
        if u1.is_some() {
            break;
        }
        let cand = random_unit(&mut rng);
        if min_projection_gap(&xs, &cand) > tol_x {
            u1 = Some(cand);
        }
    }
    let u1 = u1.ok_or_else(|| Error::Conditioning {
        context: "no direction separates the inputs".into(),
    })?;

    // Second vector: orthogonalize candidates against u1, demand separated
    // target projections.
    let mut u2: Option<Vec<f64>> = None;
    let try_u2 = |cand: &[f64], u1: &[f64]| -> Option<Vec<f64>> {
        let mut v = cand.to_vec();
        let c = vecmath::dot(&v, u1);
        vecmath::axpy(-c, u1, &mut v);
        if vecmath::normalize(&mut v) < 1e-8 {
            return None;
        }
        if min_projection_gap(&ys, &v) > tol_y {
            Some(v)
        } else {
            None
        }
    };
    for k in 0..d {
        if let Some(v) = try_u2(&vecmath::unit(d, k), &u1) {
            u2 = Some(v);
            break;
        }
    }
    for _ in 0..SEPARATION_RETRIES {
        if u2.is_some() {
            break;
        }
        let cand = random_unit(&mut rng);
        u2 = try_u2(&cand, &u1);
    }
    let u2 = u2.ok_or_else(|| Error::Conditioning {
        context: "no direction orthogonal to the input-separating one separates the targets".into(),
    })?;

    if u1 == vecmath::unit(d, 0) && u2 == vecmath::unit(d, 1) {
        return Ok(BasisChange::identity(d));
    }
    let columns = linalg::orthonormal_complete(&[u1, u2], d);
    BasisChange::from_columns(columns, BasisProvenance::SeparatingRotation)
}

/// Finds an orthonormal basis whose first vector is orthogonal to every
/// displacement `x_n - y_n`, so the first coordinate needs no control at
/// all, while still separating the inputs. Requires more dimensions than
/// data pairs.
pub fn basis_matched_first_coordinate(data: &Dataset, seed: u64) -> Result<BasisChange> {
    let d = data.dim;
    let n = data.len();
    if d <= n {
        return Err(Error::Unsupported {
            context: format!(
                "matched first coordinate needs dim > n_pairs, got dim {d} with {n} pairs"
            ),
        });
    }
    let rows: Vec<Vec<f64>> = data
        .pairs
        .iter()
        .map(|(x, y)| vecmath::sub(x, y))
        .collect();
    let xs: Vec<&[f64]> = data.inputs().map(|v| v.as_slice()).collect();
    let tol_x = 1e-9 * diameter(&xs).max(f64::MIN_POSITIVE);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen: Option<Vec<f64>> = None;
    for attempt in 0..SEPARATION_RETRIES {
        let cand = linalg::null_space_unit(&rows, d, &mut rng, attempt > 0).ok_or_else(|| {
            Error::Conditioning {
                context: "displacements span the whole space".into(),
            }
        })?;
        if min_projection_gap(&xs, &cand) > tol_x {
            chosen = Some(cand);
            break;
        }
    }
    let u1 = chosen.ok_or_else(|| Error::Conditioning {
        context: "no displacement-orthogonal direction separates the inputs".into(),
    })?;
    let columns = linalg::orthonormal_complete(&[u1], d);
    BasisChange::from_columns(columns, BasisProvenance::MatchedFirstCoordinate)
}

/// Thresholds for the sorted pivot values `sorted_vals`: each sits at the
/// midpoint below its point, the lowest one half a minimal gap below
/// everything. Guarantees 0 < v_r - theta_r and theta monotone increasing.
fn midpoint_thresholds(sorted_vals: &[f64]) -> Vec<f64> {
    let mut g = f64::INFINITY;
    for w in sorted_vals.windows(2) {
        g = g.min(w[1] - w[0]);
    }
    if !g.is_finite() {
        g = 1.0;
    }
    let mut th = Vec::with_capacity(sorted_vals.len());
    for (r, &v) in sorted_vals.iter().enumerate() {
        if r == 0 {
            th.push(v - 0.5 * g);
        } else {
            th.push(0.5 * (sorted_vals[r - 1] + v));
        }
    }
    th
}

/// Synthesizes one constant piece that moves the coordinates `move_coords`
/// of the points ranked `batch_lo..batch_hi` (in `order`) to `targets`,
/// leaving every pivot coordinate unchanged. `positions` is advanced in
/// place: batch points snap to their targets, points ranked above the batch
/// accrue the induced linear drift, points below are untouched because
/// their pivot value sits under every threshold.
#[allow(clippy::too_many_arguments)]
fn sweep_piece(
    positions: &mut [Vec<f64>],
    order: &[usize],
    batch_lo: usize,
    batch_hi: usize,
    thresholds: &[f64],
    pivot: usize,
    move_coords: &[usize],
    targets: &[Vec<f64>],
    duration: f64,
    width: usize,
) -> Result<Vec<Neuron>> {
    let dim = positions[0].len();
    let count = batch_hi - batch_lo;
    debug_assert!(count <= width);

    // Triangular solve: within the batch, the point ranked r is driven by
    // its own neuron plus every lower-threshold neuron of the same batch.
    let mut weights = vec![vec![0.0; dim]; count];
    for (slot, r) in (batch_lo..batch_hi).enumerate() {
        let i = order[r];
        let own_act = positions[i][pivot] - thresholds[r];
        if own_act.abs() < 1e-12 || own_act < 0.0 {
            return Err(Error::Conditioning {
                context: format!("cascade activation too small: {own_act:.3e}"),
            });
        }
        for &k in move_coords {
            let mut reached = positions[i][k];
            for (lower, wl) in weights.iter().take(slot).enumerate() {
                let act = positions[i][pivot] - thresholds[batch_lo + lower];
                reached += duration * wl[k] * act;
            }
            weights[slot][k] = (targets[i][k] - reached) / (duration * own_act);
        }
    }

    // Drift of points ranked above the batch: their pivot value exceeds all
    // batch thresholds, so every batch neuron is active on them.
    for &i in &order[batch_hi..] {
        for (slot, s) in (batch_lo..batch_hi).enumerate() {
            let act = positions[i][pivot] - thresholds[s];
            debug_assert!(act > 0.0);
            for &k in move_coords {
                positions[i][k] += duration * weights[slot][k] * act;
            }
        }
    }
    for &i in &order[batch_lo..batch_hi] {
        for &k in move_coords {
            positions[i][k] = targets[i][k];
        }
    }

    let mut neurons = Vec::with_capacity(width);
    for (slot, r) in (batch_lo..batch_hi).enumerate() {
        neurons.push(Neuron::new(
            std::mem::take(&mut weights[slot]),
            vecmath::unit(dim, pivot),
            -thresholds[r],
        )?);
    }
    while neurons.len() < width {
        neurons.push(Neuron::zero_on_axis(dim, pivot));
    }
    Ok(neurons)
}

fn sorted_order_by_coord(points: &[Vec<f64>], coord: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| points[a][coord].partial_cmp(&points[b][coord]).unwrap());
    order
}

fn check_plan_args(data: &Dataset, width: usize, horizon: f64) -> Result<()> {
    data.validate()?;
    if width == 0 {
        return Err(Error::parameter("width must be at least 1"));
    }
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(Error::parameter("horizon must be positive and finite"));
    }
    Ok(())
}

/// Piece boundaries that tile `[0, horizon]` exactly with `n` near-equal
/// pieces; the endpoints are bitwise 0 and `horizon`.
pub(crate) fn equal_boundaries(horizon: f64, n: usize) -> Vec<f64> {
    (0..=n).map(|k| horizon * (k as f64) / (n as f64)).collect()
}

/// Plans exact interpolation with `2 * ceil(N / width)` pieces: a first
/// stage places all coordinates but the first, batch by batch in order of
/// increasing first coordinate, then a second stage places the first
/// coordinate pivoting on the (now distinct) second coordinates. Claims
/// `2 * ceil(N / width) - 1` discontinuities.
pub fn plan_two_stage(
    data: &Dataset,
    width: usize,
    horizon: f64,
    seed: u64,
) -> Result<InterpolationPlan> {
    check_plan_args(data, width, horizon)?;
    if data.dim < 2 {
        return Err(Error::Unsupported {
            context: "two-stage planning needs dimension at least 2".into(),
        });
    }
    let mut last_err = None;
    for attempt in 0..SEPARATION_RETRIES as u64 {
        let basis = coordinate_change(data, seed.wrapping_add(attempt))?;
        match plan_two_stage_in_basis(data, width, horizon, &basis) {
            Ok(plan) => return Ok(plan),
            Err(e @ Error::Conditioning { .. }) => last_err = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last_err.unwrap_or_else(|| Error::Conditioning {
        context: "interpolation planning failed".into(),
    }))
}

fn plan_two_stage_in_basis(
    data: &Dataset,
    width: usize,
    horizon: f64,
    basis: &BasisChange,
) -> Result<InterpolationPlan> {
    let d = data.dim;
    let n = data.len();
    let n_batches = n.div_ceil(width);
    let n_pieces = 2 * n_batches;
    let boundaries = equal_boundaries(horizon, n_pieces);

    let mut positions: Vec<Vec<f64>> = data.inputs().map(|x| basis.to_new(x)).collect();
    let targets: Vec<Vec<f64>> = data.targets().map(|y| basis.to_new(y)).collect();
    let move_rest: Vec<usize> = (1..d).collect();

    let mut pieces: Vec<Piece> = Vec::with_capacity(n_pieces);
    let mut stage_one_batches = Vec::with_capacity(n_batches);
    let mut stage_two_batches = Vec::with_capacity(n_batches);

    // Stage one: pivot on the first coordinate, which no piece moves.
    let order = sorted_order_by_coord(&positions, 0);
    let sorted_vals: Vec<f64> = order.iter().map(|&i| positions[i][0]).collect();
    let thresholds = midpoint_thresholds(&sorted_vals);
    for j in 0..n_batches {
        let lo = j * width;
        let hi = (lo + width).min(n);
        let duration = boundaries[j + 1] - boundaries[j];
        let neurons = sweep_piece(
            &mut positions,
            &order,
            lo,
            hi,
            &thresholds,
            0,
            &move_rest,
            &targets,
            duration,
            width,
        )?;
        pieces.push(Piece {
            t_start: boundaries[j],
            t_end: boundaries[j + 1],
            neurons: neurons
                .iter()
                .map(|nr| basis.neuron_to_old(nr))
                .collect::<Result<_>>()?,
        });
        stage_one_batches.push(order[lo..hi].to_vec());
    }

    // Stage two: every point now has its target second coordinate, which
    // the adapted basis made pairwise distinct; verify rather than assume.
    let order2 = sorted_order_by_coord(&positions, 1);
    let sorted_vals2: Vec<f64> = order2.iter().map(|&i| positions[i][1]).collect();
    if sorted_vals2.windows(2).any(|w| w[1] - w[0] <= 0.0) {
        return Err(Error::Conditioning {
            context: "intermediate second coordinates collide".into(),
        });
    }
    let thresholds2 = midpoint_thresholds(&sorted_vals2);
    for j in 0..n_batches {
        let lo = j * width;
        let hi = (lo + width).min(n);
        let piece_idx = n_batches + j;
        let duration = boundaries[piece_idx + 1] - boundaries[piece_idx];
        let neurons = sweep_piece(
            &mut positions,
            &order2,
            lo,
            hi,
            &thresholds2,
            1,
            &[0],
            &targets,
            duration,
            width,
        )?;
        pieces.push(Piece {
            t_start: boundaries[piece_idx],
            t_end: boundaries[piece_idx + 1],
            neurons: neurons
                .iter()
                .map(|nr| basis.neuron_to_old(nr))
                .collect::<Result<_>>()?,
        });
        stage_two_batches.push(order2[lo..hi].to_vec());
    }

    let schedule = ControlSchedule::new(d, width, pieces)?;
    let claimed = 2 * n_batches - 1;
    debug_assert_eq!(schedule.discontinuity_count(), claimed);
    Ok(InterpolationPlan {
        basis: basis.clone(),
        schedule,
        claimed_discontinuities: claimed,
        stage_one_batches,
        stage_two_batches,
    })
}

/// Plans interpolation for wide data (more dimensions than pairs) in a basis
/// whose first coordinate already matches its target, so only one stage is
/// needed. Each batch but the last is stretched over two pieces so the
/// schedule has exactly `2 * (ceil(N / width) - 1)` discontinuities; with
/// `width >= N` this is a single autonomous piece.
pub fn plan_matched_pivot(
    data: &Dataset,
    width: usize,
    horizon: f64,
    seed: u64,
) -> Result<InterpolationPlan> {
    check_plan_args(data, width, horizon)?;
    let mut last_err = None;
    for attempt in 0..SEPARATION_RETRIES as u64 {
        let basis = basis_matched_first_coordinate(data, seed.wrapping_add(attempt))?;
        match plan_matched_pivot_in_basis(data, width, horizon, &basis) {
            Ok(plan) => return Ok(plan),
            Err(e @ Error::Conditioning { .. }) => last_err = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last_err.unwrap_or_else(|| Error::Conditioning {
        context: "matched-pivot planning failed".into(),
    }))
}

fn plan_matched_pivot_in_basis(
    data: &Dataset,
    width: usize,
    horizon: f64,
    basis: &BasisChange,
) -> Result<InterpolationPlan> {
    let d = data.dim;
    let n = data.len();
    let n_batches = n.div_ceil(width);
    let n_pieces = 2 * n_batches - 1;
    let boundaries = equal_boundaries(horizon, n_pieces);

    let mut positions: Vec<Vec<f64>> = data.inputs().map(|x| basis.to_new(x)).collect();
    let targets: Vec<Vec<f64>> = data.targets().map(|y| basis.to_new(y)).collect();
    let move_rest: Vec<usize> = (1..d).collect();

    let order = sorted_order_by_coord(&positions, 0);
    let sorted_vals: Vec<f64> = order.iter().map(|&i| positions[i][0]).collect();
    let thresholds = midpoint_thresholds(&sorted_vals);

    let mut pieces: Vec<Piece> = Vec::with_capacity(n_pieces);
    let mut stage_one_batches = Vec::with_capacity(n_batches);
    let emit = |positions: &mut [Vec<f64>],
                    piece_idx: usize,
                    lo: usize,
                    hi: usize,
                    targets: &[Vec<f64>]|
     -> Result<Piece> {
        let duration = boundaries[piece_idx + 1] - boundaries[piece_idx];
        let neurons = sweep_piece(
            positions, &order, lo, hi, &thresholds, 0, &move_rest, targets, duration, width,
        )?;
        Ok(Piece {
            t_start: boundaries[piece_idx],
            t_end: boundaries[piece_idx + 1],
            neurons: neurons
                .iter()
                .map(|nr| basis.neuron_to_old(nr))
                .collect::<Result<_>>()?,
        })
    };

    for j in 0..n_batches {
        let lo = j * width;
        let hi = (lo + width).min(n);
        stage_one_batches.push(order[lo..hi].to_vec());
        if j + 1 < n_batches {
            // Stretched batch: first piece covers a third of the remaining
            // displacement, the second the rest, so the two pieces carry
            // genuinely different fields.
            let midway: Vec<Vec<f64>> = positions
                .iter()
                .enumerate()
                .map(|(i, pos)| {
                    let mut t = pos.clone();
                    for &k in &move_rest {
                        t[k] = pos[k] + (targets[i][k] - pos[k]) / 3.0;
                    }
                    t
                })
                .collect();
            pieces.push(emit(&mut positions, 2 * j, lo, hi, &midway)?);
            pieces.push(emit(&mut positions, 2 * j + 1, lo, hi, &targets)?);
        } else {
            pieces.push(emit(&mut positions, 2 * j, lo, hi, &targets)?);
        }
    }

    let schedule = ControlSchedule::new(d, width, pieces)?;
    let claimed = 2 * (n_batches - 1);
    debug_assert_eq!(schedule.discontinuity_count(), claimed);
    Ok(InterpolationPlan {
        basis: basis.clone(),
        schedule,
        claimed_discontinuities: claimed,
        stage_one_batches,
        stage_two_batches: Vec::new(),
    })
}
