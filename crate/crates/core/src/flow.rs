//! Numerical flow of a piecewise-constant neural field.
//!
//! The integrator is an embedded Dormand-Prince 5(4) pair with proportional
//! step control. Integration restarts at every piece boundary, so the field
//! seen within one step is always smooth except for ReLU kinks, which the
//! error estimator resolves by shrinking the step. This module is the
//! verification path for every synthesized schedule; it shares no code with
//! the closed forms used during synthesis. [`integrate_field`] runs the same
//! stepper on an arbitrary autonomous field closure.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{ControlSchedule, Neuron};
use crate::vecmath;

#[derive(Debug, Clone, Copy)]
pub struct IntegrateOpts {
    pub abs_tol: f64,
    pub rel_tol: f64,
    /// Dense output resolution of [`integrate`]; endpoints of every piece are
    /// always included.
    pub samples_per_piece: usize,
    pub max_steps_per_piece: usize,
}

impl Default for IntegrateOpts {
    fn default() -> Self {
        IntegrateOpts {
            abs_tol: 1e-10,
            rel_tol: 1e-10,
            samples_per_piece: 200,
            max_steps_per_piece: 20_000_000,
        }
    }
}

impl IntegrateOpts {
    fn validate(&self) -> Result<()> {
        if !(self.abs_tol > 0.0) || !(self.rel_tol > 0.0) {
            return Err(Error::parameter(
                "integrator tolerances must be strictly positive",
            ));
        }
        Ok(())
    }
}

/// A sampled solution path. Times are strictly increasing, start at 0 and
/// end at the schedule horizon; `states[0]` is the initial condition.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    /// Sum of accepted local error norms; a conservative scale for the global
    /// endpoint error.
    pub error_estimate: f64,
}

impl Trajectory {
    pub fn endpoint(&self) -> &[f64] {
        self.states.last().expect("trajectory is never empty")
    }
}

/// Integrate `x0` through the whole schedule with dense output.
pub fn integrate(
    schedule: &ControlSchedule,
    x0: &[f64],
    opts: &IntegrateOpts,
) -> Result<Trajectory> {
    opts.validate()?;
    check_state(schedule, x0)?;
    let mut times = Vec::with_capacity(schedule.pieces.len() * (opts.samples_per_piece.max(1) + 1));
    let mut states = Vec::with_capacity(times.capacity());
    times.push(0.0);
    states.push(x0.to_vec());
    let mut y = x0.to_vec();
    let mut err_acc = 0.0;
    let mut scratch = Scratch::new(schedule.dim);
    for piece in &schedule.pieces {
        let active = active_neurons(&piece.neurons);
        let mut field = |x: &[f64], out: &mut [f64]| eval(&active, x, out);
        let samples = opts.samples_per_piece.max(1);
        let targets: Vec<f64> = (1..=samples)
            .map(|j| {
                if j == samples {
                    piece.t_end
                } else {
                    piece.t_start + (piece.t_end - piece.t_start) * j as f64 / samples as f64
                }
            })
            .collect();
        run_piece(
            &mut field,
            piece.t_start,
            &targets,
            &mut y,
            opts,
            &mut err_acc,
            &mut scratch,
            |t, state| {
                times.push(t);
                states.push(state.to_vec());
            },
        )?;
    }
    Ok(Trajectory {
        times,
        states,
        error_estimate: err_acc,
    })
}

/// Endpoint of the flow without dense storage. Returns the final state and
/// the accumulated local error estimate.
pub fn integrate_endpoint(
    schedule: &ControlSchedule,
    x0: &[f64],
    opts: &IntegrateOpts,
) -> Result<(Vec<f64>, f64)> {
    opts.validate()?;
    check_state(schedule, x0)?;
    let mut y = x0.to_vec();
    let mut err_acc = 0.0;
    let mut scratch = Scratch::new(schedule.dim);
    for piece in &schedule.pieces {
        let active = active_neurons(&piece.neurons);
        let mut field = |x: &[f64], out: &mut [f64]| eval(&active, x, out);
        run_piece(
            &mut field,
            piece.t_start,
            &[piece.t_end],
            &mut y,
            opts,
            &mut err_acc,
            &mut scratch,
            |_, _| {},
        )?;
    }
    Ok((y, err_acc))
}

/// Integrate an arbitrary autonomous field over `[0, horizon]` with dense
/// output. The closure writes the velocity at `x` into its output slice.
/// Shares the stepper with the schedule paths, so tolerances and error
/// accounting behave identically.
pub fn integrate_field<F>(
    mut field: F,
    x0: &[f64],
    horizon: f64,
    opts: &IntegrateOpts,
) -> Result<Trajectory>
where
    F: FnMut(&[f64], &mut [f64]),
{
    opts.validate()?;
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(Error::parameter("field horizon must be positive and finite"));
    }
    if !vecmath::all_finite(x0) {
        return Err(Error::NonFinite {
            context: "integrate initial state".into(),
        });
    }
    let samples = opts.samples_per_piece.max(1);
    let targets: Vec<f64> = (1..=samples)
        .map(|j| {
            if j == samples {
                horizon
            } else {
                horizon * j as f64 / samples as f64
            }
        })
        .collect();
    let mut times = Vec::with_capacity(samples + 1);
    let mut states = Vec::with_capacity(samples + 1);
    times.push(0.0);
    states.push(x0.to_vec());
    let mut y = x0.to_vec();
    let mut err_acc = 0.0;
    let mut scratch = Scratch::new(x0.len());
    run_piece(
        &mut field,
        0.0,
        &targets,
        &mut y,
        opts,
        &mut err_acc,
        &mut scratch,
        |t, state| {
            times.push(t);
            states.push(state.to_vec());
        },
    )?;
    Ok(Trajectory {
        times,
        states,
        error_estimate: err_acc,
    })
}

fn check_state(schedule: &ControlSchedule, x0: &[f64]) -> Result<()> {
    schedule.validate()?;
    if x0.len() != schedule.dim {
        return Err(Error::Dimension {
            context: "integrate initial state",
            expected: schedule.dim,
            found: x0.len(),
        });
    }
    if !vecmath::all_finite(x0) {
        return Err(Error::NonFinite {
            context: "integrate initial state".into(),
        });
    }
    Ok(())
}

/// Padding neurons with zero output weight cannot move the state; skipping
/// them keeps wide transport schedules cheap.
fn active_neurons(neurons: &[Neuron]) -> Vec<&Neuron> {
    neurons.iter().filter(|n| !n.is_inactive()).collect()
}

fn eval(active: &[&Neuron], x: &[f64], out: &mut [f64]) {
    out.fill(0.0);
    for n in active {
        let pre = vecmath::dot(&n.a, x) + n.b;
        if pre > 0.0 {
            vecmath::axpy(pre, &n.w, out);
        }
    }
}

struct Scratch {
    k: [Vec<f64>; 7],
    y_stage: Vec<f64>,
    y_new: Vec<f64>,
}

impl Scratch {
    fn new(dim: usize) -> Self {
        Scratch {
            k: std::array::from_fn(|_| vec![0.0; dim]),
            y_stage: vec![0.0; dim],
            y_new: vec![0.0; dim],
        }
    }
}

// Dormand-Prince 5(4) tableau.
const A: [[f64; 6]; 6] = [
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];
const B5: [f64; 7] = [
    35.0 / 384.0,
    0.0,
    500.0 / 1113.0,
    125.0 / 192.0,
    -2187.0 / 6784.0,
    11.0 / 84.0,
    0.0,
];
const B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

/// Advance `y` from the piece start through every target time in order.
/// `targets` must be increasing and end at the piece end; `on_sample` fires
/// once per target.
#[allow(clippy::too_many_arguments)]
fn run_piece<F: FnMut(&[f64], &mut [f64])>(
    field: &mut F,
    t_start: f64,
    targets: &[f64],
    y: &mut Vec<f64>,
    opts: &IntegrateOpts,
    err_acc: &mut f64,
    s: &mut Scratch,
    mut on_sample: impl FnMut(f64, &[f64]),
) -> Result<()> {
    let dim = y.len();
    let duration = targets.last().unwrap() - t_start;
    let mut t = t_start;
    let mut steps: usize = 0;

    // First stage; refreshed by FSAL after each accepted step.
    let (k, y_stage, y_new) = (&mut s.k, &mut s.y_stage, &mut s.y_new);
    field(y, &mut k[0]);

    // Conservative first step from the local velocity scale.
    let f_norm = vecmath::norm(&k[0]);
    let y_scale = opts.abs_tol + opts.rel_tol * vecmath::norm(y);
    let mut h = if f_norm > 0.0 {
        (0.1 * (vecmath::norm(y) + y_scale) / f_norm).min(duration)
    } else {
        duration
    };

    for &target in targets {
        while t < target {
            steps += 1;
            if steps > opts.max_steps_per_piece {
                return Err(Error::StepLimit { t });
            }
            let remaining = target - t;
            let hitting = h >= remaining;
            let h_try = if hitting { remaining } else { h };

            // Seven stages; stage 7 is the derivative at the candidate state.
            for stage in 1..7 {
                y_stage.copy_from_slice(y);
                for (j, kj) in k.iter().enumerate().take(stage) {
                    let c = A[stage - 1][j];
                    if c != 0.0 {
                        vecmath::axpy(c * h_try, kj, y_stage);
                    }
                }
                if stage < 6 {
                    let (head, tail) = k.split_at_mut(stage);
                    let _ = head;
                    field(y_stage, &mut tail[0]);
                } else {
                    // Stage 6 accumulation above already used B5 rows, so
                    // y_stage is the 5th-order candidate.
                    y_new.copy_from_slice(y_stage);
                    field(y_new, &mut k[6]);
                }
            }

            // Scaled error norm of the embedded difference.
            let mut err_sq = 0.0;
            let mut raw = 0.0;
            for i in 0..dim {
                let mut e = 0.0;
                for j in 0..7 {
                    e += (B5[j] - B4[j]) * k[j][i];
                }
                e *= h_try;
                let sc = opts.abs_tol + opts.rel_tol * y[i].abs().max(y_new[i].abs());
                err_sq += (e / sc) * (e / sc);
                raw += e * e;
            }
            let err = (err_sq / dim as f64).sqrt();

            if err.is_finite() && err <= 1.0 {
                t = if hitting { target } else { t + h_try };
                std::mem::swap(y, y_new);
                if !vecmath::all_finite(y) {
                    return Err(Error::Diverged { t, particle: None });
                }
                *err_acc += raw.sqrt();
                k.swap(0, 6); // FSAL
                let factor = if err == 0.0 {
                    5.0
                } else {
                    (0.9 * err.powf(-0.2)).clamp(0.2, 5.0)
                };
                h = (h_try * factor).min(duration);
            } else {
                let factor = if err.is_finite() {
                    (0.9 * err.powf(-0.2)).clamp(0.1, 0.9)
                } else {
                    0.1
                };
                h = h_try * factor;
                if !(h > 0.0) || h < duration * 1e-18 {
                    return Err(Error::StepLimit { t });
                }
            }
        }
        on_sample(target, y);
    }
    Ok(())
}

/// A weighted particle cloud. Weights are nonnegative and sum to one within
/// 1e-12; all particles share the ambient dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleMeasure {
    pub dim: usize,
    pub points: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
}

impl ParticleMeasure {
    pub fn new(dim: usize, points: Vec<Vec<f64>>, weights: Vec<f64>) -> Result<Self> {
        let m = ParticleMeasure {
            dim,
            points,
            weights,
        };
        m.validate()?;
        Ok(m)
    }

    /// Equal weights `1/M`.
    pub fn uniform(dim: usize, points: Vec<Vec<f64>>) -> Result<Self> {
        let w = vec![1.0 / points.len().max(1) as f64; points.len()];
        ParticleMeasure::new(dim, points, w)
    }

    pub fn validate(&self) -> Result<()> {
        if self.points.is_empty() {
            return Err(Error::invalid("particle measure: no particles"));
        }
        if self.points.len() != self.weights.len() {
            return Err(Error::invalid(
                "particle measure: weight count differs from particle count",
            ));
        }
        for (i, p) in self.points.iter().enumerate() {
            if p.len() != self.dim {
                return Err(Error::Dimension {
                    context: "particle",
                    expected: self.dim,
                    found: p.len(),
                });
            }
            if !vecmath::all_finite(p) {
                return Err(Error::NonFinite {
                    context: format!("particle {i}"),
                });
            }
        }
        let mut sum = 0.0;
        for (i, &w) in self.weights.iter().enumerate() {
            if !w.is_finite() || w < 0.0 {
                return Err(Error::invalid(format!("weight {i} is negative or non-finite")));
            }
            sum += w;
        }
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::invalid(format!(
                "weights sum to {sum}, expected 1 within 1e-12"
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn has_uniform_weights(&self) -> bool {
        let w0 = 1.0 / self.len() as f64;
        self.weights.iter().all(|&w| (w - w0).abs() <= 1e-12)
    }

    /// Componentwise bounding box `(min, max)`.
    pub fn bounding_box(&self) -> (Vec<f64>, Vec<f64>) {
        let mut lo = vec![f64::INFINITY; self.dim];
        let mut hi = vec![f64::NEG_INFINITY; self.dim];
        for p in &self.points {
            for k in 0..self.dim {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        (lo, hi)
    }

    /// Draw `m` particles with uniform output weights by systematic
    /// resampling over the weight distribution. Deterministic per seed.
    pub fn resample_uniform(&self, m: usize, seed: u64) -> Result<ParticleMeasure> {
        use rand::{Rng, SeedableRng};
        if m == 0 {
            return Err(Error::parameter("resample size must be positive"));
        }
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let offset: f64 = rng.gen::<f64>();
        let mut points = Vec::with_capacity(m);
        let mut cum = 0.0;
        let mut next = offset / m as f64;
        let step = 1.0 / m as f64;
        for (p, &w) in self.points.iter().zip(&self.weights) {
            cum += w;
            while next < cum && points.len() < m {
                points.push(p.clone());
                next += step;
            }
        }
        while points.len() < m {
            points.push(self.points.last().unwrap().clone());
        }
        ParticleMeasure::uniform(self.dim, points)
    }
}

/// Push every particle through the schedule. Weights are copied bit-exactly;
/// a failed particle reports its index.
pub fn push_forward(
    schedule: &ControlSchedule,
    measure: &ParticleMeasure,
    opts: &IntegrateOpts,
) -> Result<ParticleMeasure> {
    opts.validate()?;
    measure.validate()?;
    schedule.validate()?;
    if measure.dim != schedule.dim {
        return Err(Error::Dimension {
            context: "push_forward measure",
            expected: schedule.dim,
            found: measure.dim,
        });
    }
    let points: Vec<Vec<f64>> = measure
        .points
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            integrate_endpoint(schedule, p, opts)
                .map(|(y, _)| y)
                .map_err(|e| match e {
                    Error::Diverged { t, .. } => Error::Diverged {
                        t,
                        particle: Some(i),
                    },
                    other => other,
                })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ParticleMeasure {
        dim: measure.dim,
        points,
        weights: measure.weights.clone(),
    })
}
