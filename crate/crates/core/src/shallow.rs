//! Autonomous interpolation: a single constant piece with one neuron per
//! data pair, valid when some direction splits the pairs into disjoint
//! strips. Neurons are solved inductively in increasing strip order; each
//! new neuron's threshold sits above every earlier trajectory, so earlier
//! points never feel it, while the new point feels all earlier neurons as
//! an affine drift that the solve accounts for in closed form.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::interp::{BasisChange, BasisProvenance};
use crate::linalg;
use crate::model::{ControlSchedule, Dataset, Neuron, Piece};
use crate::roots;
use crate::vecmath;

/// Witness that a direction separates every pair into its own strip:
/// projections of `x_n` and `y_n` onto `direction` both lie strictly
/// between consecutive thresholds `-biases[n]` and `-biases[n + 1]`.
/// `order[n]` is the dataset index owning the n-th strip from below.
#[derive(Debug, Clone)]
pub struct SeparabilityCertificate {
    pub direction: Vec<f64>,
    /// Strictly decreasing, length `n_pairs + 1`; outermost entries are
    /// sentinels one unit beyond the data.
    pub biases: Vec<f64>,
    pub order: Vec<usize>,
}

impl SeparabilityCertificate {
    pub fn validate(&self, data: &Dataset) -> Result<()> {
        let n = data.len();
        if self.order.len() != n || self.biases.len() != n + 1 {
            return Err(Error::invalid("certificate size does not match dataset"));
        }
        if (vecmath::norm(&self.direction) - 1.0).abs() > 1e-12 {
            return Err(Error::invalid("certificate direction is not a unit vector"));
        }
        if self.biases.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::invalid("certificate biases are not strictly decreasing"));
        }
        let mut seen = vec![false; n];
        for (slot, &i) in self.order.iter().enumerate() {
            if i >= n || seen[i] {
                return Err(Error::invalid("certificate order is not a permutation"));
            }
            seen[i] = true;
            let (x, y) = &data.pairs[i];
            let lo = -self.biases[slot];
            let hi = -self.biases[slot + 1];
            for p in [vecmath::dot(&self.direction, x), vecmath::dot(&self.direction, y)] {
                if !(lo < p && p < hi) {
                    return Err(Error::invalid("projection escapes its strip"));
                }
            }
        }
        Ok(())
    }
}

/// Per-pair projection interval onto a direction.
fn projection_intervals(data: &Dataset, a: &[f64]) -> Vec<(f64, f64)> {
    data.pairs
        .iter()
        .map(|(x, y)| {
            let px = vecmath::dot(a, x);
            let py = vecmath::dot(a, y);
            (px.min(py), px.max(py))
        })
        .collect()
}

/// Sorts intervals and returns the order if consecutive ones are strictly
/// disjoint.
fn disjoint_order(intervals: &[(f64, f64)]) -> Option<Vec<usize>> {
    let mut order: Vec<usize> = (0..intervals.len()).collect();
    order.sort_by(|&i, &j| intervals[i].0.partial_cmp(&intervals[j].0).unwrap());
    for w in order.windows(2) {
        if intervals[w[0]].1 >= intervals[w[1]].0 {
            return None;
        }
    }
    Some(order)
}

fn certificate_from_direction(data: &Dataset, a: &[f64]) -> Option<SeparabilityCertificate> {
    let intervals = projection_intervals(data, a);
    let order = disjoint_order(&intervals)?;
    let n = order.len();
    // Thresholds at gap midpoints, padded one unit beyond the data.
    let mut thresholds = Vec::with_capacity(n + 1);
    thresholds.push(intervals[order[0]].0 - 1.0);
    for w in order.windows(2) {
        thresholds.push(0.5 * (intervals[w[0]].1 + intervals[w[1]].0));
    }
    thresholds.push(intervals[order[n - 1]].1 + 1.0);
    Some(SeparabilityCertificate {
        direction: a.to_vec(),
        biases: thresholds.iter().map(|t| -t).collect(),
        order,
    })
}

pub const DIRECTION_CANDIDATES: usize = 256;

/// Searches canonical axes and then `DIRECTION_CANDIDATES` seeded random
/// unit vectors for a direction whose projection intervals are pairwise
/// disjoint. `None` means no tested direction works, not that none exists.
pub fn find_separating_strips(data: &Dataset, seed: u64) -> Option<SeparabilityCertificate> {
    let d = data.dim;
    for k in 0..d {
        if let Some(c) = certificate_from_direction(data, &vecmath::unit(d, k)) {
            return Some(c);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..DIRECTION_CANDIDATES {
        let mut a: Vec<f64> = (0..d).map(|_| rng.sample(rand_distr::StandardNormal)).collect();
        if vecmath::normalize(&mut a) < 1e-6 {
            continue;
        }
        if let Some(c) = certificate_from_direction(data, &a) {
            return Some(c);
        }
    }
    None
}

/// Cumulative drift coefficients after placing the neuron for one pair.
/// Inside that pair's strip, the drift of all earlier neurons is the affine
/// field `s x^(1) + c` (coordinates of the certificate frame).
#[derive(Debug, Clone)]
pub struct DriftRecord {
    /// Dataset index controlled at this step.
    pub index: usize,
    /// Bias of this step's neuron.
    pub bias: f64,
    /// Sum of the weights placed so far.
    pub s: Vec<f64>,
    /// Sum of weight * bias placed so far.
    pub c: Vec<f64>,
}

/// A single-piece schedule with one neuron per pair, plus the frame it was
/// solved in and the drift bookkeeping for auditing.
#[derive(Debug, Clone)]
pub struct ShallowControl {
    pub basis: BasisChange,
    /// Original coordinates, in strip order.
    pub neurons: Vec<Neuron>,
    pub horizon: f64,
    pub drift_trace: Vec<DriftRecord>,
}

impl ShallowControl {
    pub fn schedule(&self) -> Result<ControlSchedule> {
        ControlSchedule::new(
            self.neurons[0].dim(),
            self.neurons.len(),
            vec![Piece {
                t_start: 0.0,
                t_end: self.horizon,
                neurons: self.neurons.clone(),
            }],
        )
    }
}

/// `(e^{ut} - 1) / u`, stable through u = 0.
fn phi1(u: f64, t: f64) -> f64 {
    let ut = u * t;
    if ut.abs() < 1e-5 {
        t * (1.0 + ut * (0.5 + ut * (1.0 / 6.0 + ut / 24.0)))
    } else {
        ut.exp_m1() / u
    }
}

/// `(e^{ut} - 1 - ut) / u^2`, stable through u = 0.
fn phi2(u: f64, t: f64) -> f64 {
    let ut = u * t;
    if ut.abs() < 1e-4 {
        t * t * (0.5 + ut * (1.0 / 6.0 + ut * (1.0 / 24.0 + ut / 120.0)))
    } else {
        (ut.exp_m1() - ut) / (u * u)
    }
}

const SLOPE_FLOOR: f64 = 1e-10;
const PERTURB_ATTEMPTS: usize = 16;

/// Solves for the constant control of one pair against the accumulated
/// drift `(s, c)`: first the longitudinal weight as the root of the exact
/// endpoint expression, then each transverse weight from an affine equation
/// whose slope is the time integral of the active ReLU argument.
struct StepSolution {
    weight: Vec<f64>,
    bias: f64,
}

#[allow(clippy::too_many_arguments)]
fn solve_step(
    x: &[f64],
    y: &[f64],
    s: &[f64],
    c: &[f64],
    strip_floor: f64,
    horizon: f64,
    step_label: usize,
) -> Result<StepSolution> {
    let x1 = x[0];
    let y1 = y[0];
    let min_xy = x1.min(y1);
    let mut threshold = 0.5 * (strip_floor + min_xy);
    let delta = 1e-6 * (1.0 + threshold.abs());

    for _ in 0..PERTURB_ATTEMPTS {
        let b = -threshold;
        debug_assert!(x1 + b > 0.0 && y1 + b > 0.0);

        // Longitudinal weight z: endpoint of x^(1) under drift s1 x + c1
        // plus the new term z (x + b) must equal y1.
        let s1 = s[0];
        let c1 = c[0];
        let z = if s1 == 0.0 && c1 == 0.0 {
            ((y1 + b) / (x1 + b)).ln() / horizon
        } else {
            let mut f = |z: f64| {
                let u = s1 + z;
                (z * b + c1) * phi1(u, horizon) + x1 * (u * horizon).exp() - y1
            };
            let start = 1.0 + s1.abs();
            let label = format!("longitudinal weight, step {step_label}");
            let (lo, hi) = roots::bracket_sign_change(&mut f, start, &label)?;
            let root = roots::bisect(&mut f, lo, hi, 1e-12, 0.0, &label)?;
            // When the accumulated drift exponent (s1 + z) T is large, the
            // exact root sits between adjacent floats whose endpoint values
            // differ by e^{(s1+z)T} ulps; no returned z can then meet the
            // tolerance and the instance must fail rather than pass garbage
            // downstream.
            let residual = f(root).abs();
            if residual > 1e-9 * (1.0 + y1.abs()) {
                return Err(Error::Conditioning {
                    context: format!(
                        "endpoint residual {residual:.3e} at step {step_label} is irreducible in f64"
                    ),
                });
            }
            root
        };

        // With z fixed, x^(1)(t) is known; every transverse equation is
        // affine in its weight with slope int_0^T (x^(1)(t) + b) dt. The
        // trajectory stays where the neuron is active, so the slope is
        // positive in exact arithmetic; the perturbation branch guards the
        // degenerate float case.
        let s1_new = s1 + z;
        let c1_new = z * b + c1;
        let drift_integral = x1 * phi1(s1_new, horizon) + c1_new * phi2(s1_new, horizon);
        let slope = drift_integral + b * horizon;
        if slope.abs() < SLOPE_FLOOR {
            threshold -= delta;
            if threshold <= strip_floor {
                break;
            }
            continue;
        }

        let mut weight = vec![0.0; x.len()];
        weight[0] = z;
        for j in 1..x.len() {
            weight[j] = (y[j] - x[j] - s[j] * drift_integral - c[j] * horizon) / slope;
        }
        return Ok(StepSolution { weight, bias: b });
    }
    Err(Error::Conditioning {
        context: format!("transverse slope stayed below {SLOPE_FLOOR:.0e} at step {step_label}"),
    })
}

/// Builds the autonomous control for a dataset with a valid strip
/// certificate: one neuron per pair, all sharing the certificate direction,
/// solved in increasing strip order. The flow of the returned single-piece
/// schedule maps every `x_n` to `y_n`.
pub fn solve_autonomous(
    data: &Dataset,
    cert: &SeparabilityCertificate,
    horizon: f64,
) -> Result<ShallowControl> {
    data.validate()?;
    cert.validate(data)?;
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(Error::parameter("horizon must be positive and finite"));
    }
    let d = data.dim;
    let basis = if cert.direction == vecmath::unit(d, 0) {
        BasisChange::identity(d)
    } else {
        BasisChange::from_columns(
            linalg::orthonormal_complete(std::slice::from_ref(&cert.direction), d),
            BasisProvenance::SeparatingRotation,
        )?
    };

    let mut s = vec![0.0; d];
    let mut c = vec![0.0; d];
    let mut neurons = Vec::with_capacity(data.len());
    let mut drift_trace = Vec::with_capacity(data.len());
    for (slot, &i) in cert.order.iter().enumerate() {
        let x = basis.to_new(&data.pairs[i].0);
        let y = basis.to_new(&data.pairs[i].1);
        let strip_floor = -cert.biases[slot];
        let sol = solve_step(&x, &y, &s, &c, strip_floor, horizon, slot)?;
        vecmath::axpy(1.0, &sol.weight, &mut s);
        vecmath::axpy(sol.bias, &sol.weight, &mut c);
        neurons.push(basis.neuron_to_old(&Neuron::new(
            sol.weight,
            vecmath::unit(d, 0),
            sol.bias,
        )?)?);
        drift_trace.push(DriftRecord {
            index: i,
            bias: sol.bias,
            s: s.clone(),
            c: c.clone(),
        });
    }
    Ok(ShallowControl {
        basis,
        neurons,
        horizon,
        drift_trace,
    })
}

/// Product form of `n! 2^n / (2n)!`: the probability that one coordinate of
/// i.i.d. uniform pairs yields pairwise disjoint projection intervals.
pub fn exact_axis_probability(n_pairs: usize) -> f64 {
    (1..=n_pairs).map(|k| 2.0 / (n_pairs + k) as f64).product()
}

/// Probability that at least one of `dim` independent coordinates separates
/// `n_pairs` i.i.d. uniform pairs.
pub fn exact_any_axis_probability(dim: usize, n_pairs: usize) -> f64 {
    1.0 - (1.0 - exact_axis_probability(n_pairs)).powi(dim as i32)
}

#[derive(Debug, Clone, Copy)]
pub struct SeparabilityEstimate {
    pub trials: u64,
    pub successes: u64,
    pub estimate: f64,
    pub wilson_low: f64,
    pub wilson_high: f64,
}

fn wilson_interval(successes: u64, trials: u64) -> (f64, f64) {
    let n = trials as f64;
    let p = successes as f64 / n;
    let z = 1.959963984540054; // 95% two-sided
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    ((center - half).max(0.0), (center + half).min(1.0))
}

/// True when some canonical axis gives pairwise disjoint projection
/// intervals for the given per-pair coordinate values.
fn any_axis_separates(pairs: &[(Vec<f64>, Vec<f64>)], dim: usize) -> bool {
    (0..dim).any(|k| {
        let intervals: Vec<(f64, f64)> = pairs
            .iter()
            .map(|(x, y)| (x[k].min(y[k]), x[k].max(y[k])))
            .collect();
        disjoint_order(&intervals).is_some()
    })
}

/// Monte Carlo estimate of the probability that `n_pairs` pairs drawn
/// i.i.d. uniform on the unit cube are separated by some canonical axis.
/// Each trial uses its own counter-derived stream, so the estimate is
/// deterministic in `seed` and independent of thread scheduling.
pub fn estimate_separability_probability(
    dim: usize,
    n_pairs: usize,
    trials: u64,
    seed: u64,
) -> Result<SeparabilityEstimate> {
    if dim == 0 || n_pairs == 0 {
        return Err(Error::parameter("dimension and pair count must be positive"));
    }
    if trials < 1000 {
        return Err(Error::parameter("use at least 1000 trials"));
    }
    let successes: u64 = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(t);
            let pairs: Vec<(Vec<f64>, Vec<f64>)> = (0..n_pairs)
                .map(|_| {
                    let x = (0..dim).map(|_| rng.gen::<f64>()).collect();
                    let y = (0..dim).map(|_| rng.gen::<f64>()).collect();
                    (x, y)
                })
                .collect();
            u64::from(any_axis_separates(&pairs, dim))
        })
        .sum();
    let (wilson_low, wilson_high) = wilson_interval(successes, trials);
    Ok(SeparabilityEstimate {
        trials,
        successes,
        estimate: successes as f64 / trials as f64,
        wilson_low,
        wilson_high,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{integrate, integrate_endpoint, IntegrateOpts};
    use std::f64::consts::E;

    /// Pairs with disjoint intervals along the first axis and arbitrary
    /// remaining coordinates; always separable by construction.
    ///
    /// Each solved neuron leaves behind an affine drift whose slope is
    /// re-cancelled by the next neuron across the full strip spacing, so the
    /// longitudinal weights grow geometrically in the pair count with base
    /// roughly (spacing / lever arm). Keeping `pivot_disp` small keeps the
    /// accumulated exponent s^(1) T in the comfortably representable range;
    /// transverse displacements enter only linearly and may stay large.
    fn staircase_dataset(dim: usize, n: usize, seed: u64, pivot_disp: f64, trans_disp: f64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pairs = Vec::with_capacity(n);
        for i in 0..n {
            let base = 3.0 * i as f64;
            let mut x = vec![base - pivot_disp * rng.gen_range(0.4..1.0)];
            let mut y = vec![base + pivot_disp * rng.gen_range(0.4..1.0)];
            for _ in 1..dim {
                let anchor = rng.gen_range(-2.0..2.0);
                x.push(anchor);
                y.push(anchor + trans_disp * rng.gen_range(-1.0..1.0));
            }
            if rng.gen::<bool>() {
                std::mem::swap(&mut x[0], &mut y[0]);
            }
            pairs.push((x, y));
        }
        Dataset::new(dim, pairs).unwrap()
    }

    fn max_endpoint_error(ctl: &ShallowControl, data: &Dataset) -> f64 {
        let schedule = ctl.schedule().unwrap();
        let opts = IntegrateOpts::default();
        let mut worst = 0.0f64;
        for (x, y) in &data.pairs {
            let (end, _) = integrate_endpoint(&schedule, x, &opts).unwrap();
            worst = worst.max(vecmath::dist(&end, y));
        }
        worst
    }

    #[test]
    fn single_pair_is_always_separable() {
        let data = Dataset::new(3, vec![(vec![0.4, -1.0, 2.0], vec![-0.3, 0.5, 1.0])]).unwrap();
        let cert = find_separating_strips(&data, 1).unwrap();
        cert.validate(&data).unwrap();
    }

    #[test]
    fn staircase_data_separates_along_first_axis() {
        let data = staircase_dataset(2, 4, 7, 0.5, 1.0);
        let cert = find_separating_strips(&data, 7).unwrap();
        cert.validate(&data).unwrap();
        assert_eq!(cert.direction, vec![1.0, 0.0]);
        // Strips must be ordered by the first coordinate.
        let mut mins: Vec<f64> = cert.order.iter().map(|&i| data.pairs[i].0[0].min(data.pairs[i].1[0])).collect();
        let sorted = mins.clone();
        mins.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(mins, sorted);
    }

    #[test]
    fn nested_diagonal_pairs_are_never_separable() {
        // Both pairs sit on the same diagonal line with one projection
        // interval nested inside the other for every direction.
        let data = Dataset::new(
            2,
            vec![
                (vec![0.0, 0.0], vec![3.0, 3.0]),
                (vec![1.0, 1.0], vec![2.0, 2.0]),
            ],
        )
        .unwrap();
        assert!(find_separating_strips(&data, 123).is_none());
    }

    #[test]
    fn base_step_matches_logarithm_closed_form() {
        // Single pair: chosen threshold is the midpoint of the sentinel
        // (min - 1) and the interval minimum, so b is known in advance and
        // the longitudinal weight must equal ln((y+b)/(x+b)) / T.
        let data = Dataset::new(2, vec![(vec![1.0, 0.0], vec![E, 2.0])]).unwrap();
        let cert = find_separating_strips(&data, 1).unwrap();
        let ctl = solve_autonomous(&data, &cert, 1.0).unwrap();
        let b = ctl.neurons[0].b;
        assert!((b - (-0.5)).abs() < 1e-12);
        let expected = ((E + b) / (1.0 + b)).ln();
        assert!((ctl.neurons[0].w[0] - expected).abs() < 1e-12);
        assert!(max_endpoint_error(&ctl, &data) <= 1e-8);
    }

    #[test]
    fn equal_first_coordinates_move_transversally_only() {
        // x^(1) = y^(1) = 1, T = 2: the bias rule gives x^(1) + b = 0.5, so
        // (x^(1)+b) T = 1 and the transverse weight equals the displacement.
        let data = Dataset::new(2, vec![(vec![1.0, 0.0], vec![1.0, 1.0])]).unwrap();
        let cert = find_separating_strips(&data, 1).unwrap();
        let ctl = solve_autonomous(&data, &cert, 2.0).unwrap();
        assert!(ctl.neurons[0].w[0].abs() < 1e-12);
        assert!((ctl.neurons[0].w[1] - 1.0).abs() < 1e-12);
        assert!(max_endpoint_error(&ctl, &data) <= 1e-8);
    }

    #[test]
    fn three_pairs_interpolate_by_integration() {
        let data = staircase_dataset(3, 3, 21, 0.1, 1.0);
        let cert = find_separating_strips(&data, 21).unwrap();
        let ctl = solve_autonomous(&data, &cert, 1.0).unwrap();
        assert_eq!(ctl.neurons.len(), 3);
        assert!(max_endpoint_error(&ctl, &data) <= 1e-6);
    }

    #[test]
    fn rotated_certificate_still_solves() {
        // Staircase rotated off-axis: the separating direction need not be
        // canonical and the control must map back to original coordinates.
        let base = staircase_dataset(2, 2, 33, 0.3, 1.0);
        let (s, c) = (0.6f64, 0.8f64);
        let rot = |v: &[f64]| vec![c * v[0] - s * v[1], s * v[0] + c * v[1]];
        let data = Dataset::new(
            2,
            base.pairs.iter().map(|(x, y)| (rot(x), rot(y))).collect(),
        )
        .unwrap();
        let cert = find_separating_strips(&data, 5).unwrap();
        cert.validate(&data).unwrap();
        let ctl = solve_autonomous(&data, &cert, 1.0).unwrap();
        assert!(max_endpoint_error(&ctl, &data) <= 1e-6);
    }

    #[test]
    fn first_coordinate_is_monotone_and_confined() {
        let data = staircase_dataset(2, 4, 55, 0.05, 1.0);
        let cert = find_separating_strips(&data, 55).unwrap();
        let ctl = solve_autonomous(&data, &cert, 1.0).unwrap();
        let schedule = ctl.schedule().unwrap();
        let opts = IntegrateOpts {
            samples_per_piece: 400,
            ..IntegrateOpts::default()
        };
        for (x, y) in &data.pairs {
            let traj = integrate(&schedule, x, &opts).unwrap();
            let p0 = vecmath::dot(&cert.direction, x);
            let p1 = vecmath::dot(&cert.direction, y);
            let (lo, hi) = (p0.min(p1) - 1e-8, p0.max(p1) + 1e-8);
            let projs: Vec<f64> = traj
                .states
                .iter()
                .map(|st| vecmath::dot(&cert.direction, st))
                .collect();
            assert!(projs.iter().all(|&p| lo <= p && p <= hi));
            let increasing = p1 >= p0;
            for w in projs.windows(2) {
                if increasing {
                    assert!(w[1] >= w[0] - 1e-9);
                } else {
                    assert!(w[1] <= w[0] + 1e-9);
                }
            }
        }
    }

    #[test]
    fn drift_trace_matches_reevaluated_field() {
        let data = staircase_dataset(3, 4, 77, 0.05, 1.0);
        let cert = find_separating_strips(&data, 77).unwrap();
        let ctl = solve_autonomous(&data, &cert, 1.0).unwrap();
        // At each controlled point, the drift of the earlier neurons must
        // agree with the affine form s x^(1) + c from the trace.
        for (slot, rec) in ctl.drift_trace.iter().enumerate().skip(1) {
            let prev = &ctl.drift_trace[slot - 1];
            let x = &data.pairs[rec.index].0;
            let drift = crate::model::eval_field(&ctl.neurons[..slot], x).unwrap();
            let xp = ctl.basis.to_new(x);
            for k in 0..data.dim {
                let expected = prev.s[k] * xp[0] + prev.c[k];
                let drift_new = vecmath::dot(ctl.basis.column(k), &drift);
                assert!(
                    (drift_new - expected).abs() <= 1e-10,
                    "drift mismatch at slot {slot} coord {k}"
                );
            }
        }
    }

    #[test]
    fn prefix_of_neurons_already_controls_prefix_of_pairs() {
        let data = staircase_dataset(2, 4, 91, 0.04, 0.8);
        let cert = find_separating_strips(&data, 91).unwrap();
        let ctl = solve_autonomous(&data, &cert, 1.0).unwrap();
        let opts = IntegrateOpts::default();
        for m in 1..=ctl.neurons.len() {
            let prefix = ControlSchedule::new(
                data.dim,
                m,
                vec![Piece {
                    t_start: 0.0,
                    t_end: ctl.horizon,
                    neurons: ctl.neurons[..m].to_vec(),
                }],
            )
            .unwrap();
            for rec in &ctl.drift_trace[..m] {
                let (x, y) = &data.pairs[rec.index];
                let (end, _) = integrate_endpoint(&prefix, x, &opts).unwrap();
                assert!(vecmath::dist(&end, y) <= 1e-6, "prefix {m} broke pair {}", rec.index);
            }
        }
    }

    /// Brute force over all orderings of 2n i.i.d. draws on a line: the
    /// probability that the n pairs occupy disjoint intervals.
    fn brute_force_axis_probability(n: usize) -> f64 {
        fn permutations(items: &mut Vec<usize>, chosen: &mut Vec<usize>, hits: &mut (u64, u64)) {
            if items.is_empty() {
                // Positions of each pair's two draws must form a contiguous
                // run relative to other pairs, i.e. intervals must not
                // interleave.
                let n = chosen.len() / 2;
                let mut lo = vec![usize::MAX; n];
                let mut hi = vec![0usize; n];
                for (pos, &item) in chosen.iter().enumerate() {
                    let pair = item / 2;
                    lo[pair] = lo[pair].min(pos);
                    hi[pair] = hi[pair].max(pos);
                }
                let mut pairs: Vec<usize> = (0..n).collect();
                pairs.sort_by_key(|&p| lo[p]);
                let disjoint = pairs.windows(2).all(|w| hi[w[0]] < lo[w[1]]);
                hits.0 += u64::from(disjoint);
                hits.1 += 1;
                return;
            }
            for i in 0..items.len() {
                let item = items.remove(i);
                chosen.push(item);
                permutations(items, chosen, hits);
                chosen.pop();
                items.insert(i, item);
            }
        }
        let mut items: Vec<usize> = (0..2 * n).collect();
        let mut hits = (0u64, 0u64);
        permutations(&mut items, &mut Vec::new(), &mut hits);
        hits.0 as f64 / hits.1 as f64
    }

    #[test]
    fn exact_axis_probability_matches_brute_force() {
        for n in 1..=3 {
            let exact = exact_axis_probability(n);
            let brute = brute_force_axis_probability(n);
            assert!(
                (exact - brute).abs() < 1e-15,
                "n={n}: {exact} vs {brute}"
            );
        }
        assert!((exact_axis_probability(2) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn single_pair_probability_is_one() {
        let est = estimate_separability_probability(3, 1, 2000, 9).unwrap();
        assert_eq!(est.successes, est.trials);
        assert_eq!(est.estimate, 1.0);
    }

    #[test]
    fn monte_carlo_agrees_with_line_formula() {
        let trials = 20_000;
        let est = estimate_separability_probability(1, 2, trials, 4242).unwrap();
        let p = 1.0 / 3.0;
        let sigma = (p * (1.0 - p) / trials as f64).sqrt();
        assert!((est.estimate - p).abs() <= 3.0 * sigma, "{} vs {}", est.estimate, p);
        assert!(est.wilson_low <= p && p <= est.wilson_high);
    }

    #[test]
    fn monte_carlo_agrees_with_independent_axis_formula() {
        let trials = 20_000;
        for dim in [5usize, 30] {
            let est = estimate_separability_probability(dim, 2, trials, 97).unwrap();
            let p = exact_any_axis_probability(dim, 2);
            let sigma = (p * (1.0 - p) / trials as f64).sqrt().max(1e-6);
            assert!(
                (est.estimate - p).abs() <= 3.0 * sigma + 1e-4,
                "dim {dim}: {} vs {p}",
                est.estimate
            );
        }
    }

    #[test]
    fn estimate_is_deterministic_across_runs() {
        let a = estimate_separability_probability(2, 3, 5000, 7).unwrap();
        let b = estimate_separability_probability(2, 3, 5000, 7).unwrap();
        assert_eq!(a.successes, b.successes);
    }
}

