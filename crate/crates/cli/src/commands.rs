//! One function per subcommand. Every run resolves its configuration,
//! writes `manifest.json`, produces its artifacts, and returns whether all
//! verification gates passed; hard failures bubble up as [`CliError`] and
//! the caller turns them into a diagnostic report and exit code.

use std::path::{Path, PathBuf};

use clap::Args;
use serde::Serialize;

use nodectl_core::field_approx::{self, GridSpec};
use nodectl_core::flow::{self, IntegrateOpts, Trajectory};
use nodectl_core::interp::{self, InterpolationPlan};
use nodectl_core::model::{minimal_complexity_flag, MinimalComplexityFlag};
use nodectl_core::shallow;
use nodectl_core::transport::{self, TransportPlanSpec, TransportReport};
use nodectl_core::{complexity, ControlSchedule, Dataset};

use crate::io::{self, PresetKind};
use crate::plot::{self, PlotData};
use crate::report::{self, Diagnostic};
use crate::CliError;

/// Slack for replayed inequalities that are exact in the constructions but
/// pass through the integrator once more during verification.
const REPLAY_SLACK: f64 = 1e-8;

fn prepare(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::parse(format!("{}: {e}", dir.display())))
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn kappa_of(schedule: &ControlSchedule) -> u64 {
    complexity(&schedule.architecture())
}

/// Integrates every dataset input and measures the endpoint distance to its
/// target.
fn integrate_dataset(
    schedule: &ControlSchedule,
    data: &Dataset,
    opts: &IntegrateOpts,
) -> Result<(Vec<Trajectory>, Vec<f64>), CliError> {
    let mut trajectories = Vec::with_capacity(data.len());
    let mut errors = Vec::with_capacity(data.len());
    for (x, y) in &data.pairs {
        let traj = flow::integrate(schedule, x, opts)?;
        errors.push(euclid(traj.endpoint(), y));
        trajectories.push(traj);
    }
    Ok((trajectories, errors))
}

/// Planar projection: coordinates (1, 2) when available, else (t, x).
fn trajectory_lines(trajectories: &[Trajectory], dim: usize) -> Vec<Vec<(f64, f64)>> {
    trajectories
        .iter()
        .map(|traj| {
            traj.times
                .iter()
                .zip(&traj.states)
                .map(|(&t, s)| if dim >= 2 { (s[0], s[1]) } else { (t, s[0]) })
                .collect()
        })
        .collect()
}

fn point_markers(points: &[Vec<f64>], dim: usize, time: f64) -> Vec<(f64, f64)> {
    points
        .iter()
        .map(|p| if dim >= 2 { (p[0], p[1]) } else { (time, p[0]) })
        .collect()
}

fn axis_labels(dim: usize) -> (&'static str, &'static str) {
    if dim >= 2 {
        ("x_1", "x_2")
    } else {
        ("t", "x_1")
    }
}

fn write_flow_artifacts(
    out: &Path,
    schedule: &ControlSchedule,
    trajectories: &[Trajectory],
    data: &Dataset,
) -> Result<(), CliError> {
    io::save_schedule(&out.join("schedule.json"), schedule)?;
    let ids: Vec<usize> = (0..trajectories.len()).collect();
    io::write_trajectories_csv(&out.join("trajectories.csv"), &ids, trajectories)?;
    let (x_label, y_label) = axis_labels(data.dim);
    let inputs: Vec<Vec<f64>> = data.inputs().cloned().collect();
    let targets: Vec<Vec<f64>> = data.targets().cloned().collect();
    plot::render(
        &out.join("plot.svg"),
        &PlotData {
            lines: trajectory_lines(trajectories, data.dim),
            solid: point_markers(&inputs, data.dim, 0.0),
            hollow: point_markers(&targets, data.dim, schedule.horizon),
            x_label,
            y_label,
        },
    )
}

// ---------------------------------------------------------------------------
// interpolate / basis
// ---------------------------------------------------------------------------

#[derive(Args, Serialize, Debug)]
pub struct InterpolateArgs {
    /// Dataset JSON: {"dim": d, "pairs": [{"x": [...], "y": [...]}]}.
    #[arg(long)]
    pub data: PathBuf,
    /// Neurons active per piece.
    #[arg(long, default_value_t = 1)]
    pub p: usize,
    /// Time horizon.
    #[arg(long = "T", default_value_t = 1.0)]
    pub horizon: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Endpoint acceptance tolerance.
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
    /// Directory receiving schedule.json, trajectories.csv, report.json, plot.svg.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Args, Serialize, Debug)]
pub struct BasisArgs {
    /// Dataset JSON; requires more dimensions than pairs.
    #[arg(long)]
    pub data: PathBuf,
    /// Neurons active per piece.
    #[arg(long, default_value_t = 1)]
    pub p: usize,
    /// Time horizon.
    #[arg(long = "T", default_value_t = 1.0)]
    pub horizon: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Endpoint acceptance tolerance.
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Serialize)]
struct PlanBody {
    dim: usize,
    n_pairs: usize,
    width: usize,
    horizon: f64,
    seed: u64,
    basis: &'static str,
    #[serde(rename = "claimed_L")]
    claimed_l: usize,
    #[serde(rename = "achieved_L")]
    achieved_l: usize,
    #[serde(rename = "formula_L")]
    formula_l: usize,
    kappa: u64,
    endpoint_errors: Vec<f64>,
    max_endpoint_error: f64,
    tolerance: f64,
    /// Worst projection of a displacement onto the matched basis vector;
    /// only meaningful for matched-pivot plans.
    #[serde(skip_serializing_if = "Option::is_none")]
    matched_first_coordinate_deviation: Option<f64>,
    minimal_complexity: MinimalComplexityFlag,
}

fn finish_plan(
    command: &'static str,
    out: &Path,
    data: &Dataset,
    plan: &InterpolationPlan,
    formula_l: usize,
    args_width: usize,
    args_seed: u64,
    tol: f64,
    matched_deviation: Option<f64>,
) -> Result<bool, CliError> {
    let schedule = &plan.schedule;
    let (trajectories, endpoint_errors) =
        integrate_dataset(schedule, data, &IntegrateOpts::default())?;
    let max_endpoint_error = endpoint_errors.iter().fold(0.0f64, |m, &e| m.max(e));
    let achieved_l = schedule.discontinuity_count();
    let passed = achieved_l == plan.claimed_discontinuities
        && achieved_l == formula_l
        && max_endpoint_error <= tol;
    write_flow_artifacts(out, schedule, &trajectories, data)?;
    let body = PlanBody {
        dim: data.dim,
        n_pairs: data.len(),
        width: args_width,
        horizon: schedule.horizon,
        seed: args_seed,
        basis: plan.basis.provenance.as_str(),
        claimed_l: plan.claimed_discontinuities,
        achieved_l,
        formula_l,
        kappa: kappa_of(schedule),
        endpoint_errors,
        max_endpoint_error,
        tolerance: tol,
        matched_first_coordinate_deviation: matched_deviation,
        minimal_complexity: minimal_complexity_flag(data.len(), data.dim),
    };
    report::write_report(out, command, passed, None, Some(&body))?;
    Ok(passed)
}

pub fn interpolate(args: &InterpolateArgs) -> Result<bool, CliError> {
    prepare(&args.out)?;
    report::write_manifest(&args.out, "interpolate", args)?;
    let data = io::parse_dataset(&args.data)?;
    let plan = interp::plan_two_stage(&data, args.p, args.horizon, args.seed)?;
    let formula_l = 2 * data.len().div_ceil(args.p) - 1;
    finish_plan(
        "interpolate",
        &args.out,
        &data,
        &plan,
        formula_l,
        args.p,
        args.seed,
        args.tol,
        None,
    )
}

pub fn basis(args: &BasisArgs) -> Result<bool, CliError> {
    prepare(&args.out)?;
    report::write_manifest(&args.out, "basis", args)?;
    let data = io::parse_dataset(&args.data)?;
    let plan = interp::plan_matched_pivot(&data, args.p, args.horizon, args.seed)?;
    let formula_l = 2 * (data.len().div_ceil(args.p) - 1);
    let u = plan.basis.column(0);
    let deviation = data
        .pairs
        .iter()
        .map(|(x, y)| {
            let diff: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
            dot(u, &diff).abs()
        })
        .fold(0.0f64, f64::max);
    finish_plan(
        "basis",
        &args.out,
        &data,
        &plan,
        formula_l,
        args.p,
        args.seed,
        args.tol,
        Some(deviation),
    )
}

// ---------------------------------------------------------------------------
// shallow
// ---------------------------------------------------------------------------

#[derive(Args, Serialize, Debug)]
pub struct ShallowArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Time horizon.
    #[arg(long = "T", default_value_t = 1.0)]
    pub horizon: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Endpoint acceptance tolerance.
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Serialize)]
struct ShallowBody {
    dim: usize,
    n_pairs: usize,
    horizon: f64,
    seed: u64,
    direction: Vec<f64>,
    strip_biases: Vec<f64>,
    strip_order: Vec<usize>,
    #[serde(rename = "claimed_L")]
    claimed_l: usize,
    #[serde(rename = "achieved_L")]
    achieved_l: usize,
    kappa: u64,
    endpoint_errors: Vec<f64>,
    max_endpoint_error: f64,
    tolerance: f64,
    /// Worst excursion of any trajectory sample outside its strip.
    max_strip_violation: f64,
    confined: bool,
    minimal_complexity: MinimalComplexityFlag,
}

pub fn shallow_run(args: &ShallowArgs) -> Result<bool, CliError> {
    prepare(&args.out)?;
    report::write_manifest(&args.out, "shallow", args)?;
    let data = io::parse_dataset(&args.data)?;
    let Some(cert) = shallow::find_separating_strips(&data, args.seed) else {
        let diag = Diagnostic {
            kind: "verification",
            message: "no direction among the tested candidates separates every pair into \
                      its own strip"
                .into(),
        };
        report::write_report::<()>(&args.out, "shallow", false, Some(&diag), None)?;
        return Ok(false);
    };
    let control = shallow::solve_autonomous(&data, &cert, args.horizon)?;
    let schedule = control.schedule()?;
    let (trajectories, endpoint_errors) =
        integrate_dataset(&schedule, &data, &IntegrateOpts::default())?;
    let max_endpoint_error = endpoint_errors.iter().fold(0.0f64, |m, &e| m.max(e));

    // Every sample of the trajectory of strip r must project into the open
    // interval (-b_r, -b_{r+1}) of the certificate direction.
    let mut max_strip_violation = 0.0f64;
    for (rank, &idx) in cert.order.iter().enumerate() {
        let lo = -cert.biases[rank];
        let hi = -cert.biases[rank + 1];
        for state in &trajectories[idx].states {
            let proj = dot(&cert.direction, state);
            max_strip_violation = max_strip_violation.max(lo - proj).max(proj - hi);
        }
    }
    let confined = max_strip_violation <= REPLAY_SLACK;
    let passed = max_endpoint_error <= args.tol && confined;
    write_flow_artifacts(&args.out, &schedule, &trajectories, &data)?;
    let body = ShallowBody {
        dim: data.dim,
        n_pairs: data.len(),
        horizon: args.horizon,
        seed: args.seed,
        direction: cert.direction.clone(),
        strip_biases: cert.biases.clone(),
        strip_order: cert.order.clone(),
        claimed_l: 0,
        achieved_l: schedule.discontinuity_count(),
        kappa: kappa_of(&schedule),
        endpoint_errors,
        max_endpoint_error,
        tolerance: args.tol,
        max_strip_violation,
        confined,
        minimal_complexity: minimal_complexity_flag(data.len(), data.dim),
    };
    report::write_report(&args.out, "shallow", passed, None, Some(&body))?;
    Ok(passed)
}

// ---------------------------------------------------------------------------
// field-fit
// ---------------------------------------------------------------------------

#[derive(Args, Serialize, Debug)]
pub struct FieldFitArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Half width of the working box [-R, R]^d.
    #[arg(long = "R", default_value_t = 2.0)]
    pub half_width: f64,
    /// Surrogate widths to fit, in order.
    #[arg(long, value_delimiter = ',', default_value = "32,64,128,256")]
    pub p_sweep: Vec<usize>,
    /// Time horizon.
    #[arg(long = "T", default_value_t = 1.0)]
    pub horizon: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Serialize)]
struct FitPoint {
    index: usize,
    measured: f64,
    bound: f64,
    margin: f64,
    certified: bool,
}

#[derive(Serialize)]
struct FitRecord {
    p: usize,
    kappa: usize,
    ridge: f64,
    eps_hat: f64,
    lipschitz_nn: f64,
    lipschitz_used: f64,
    bound: f64,
    points: Vec<FitPoint>,
    sound: bool,
}

#[derive(Serialize)]
struct FieldFitBody {
    dim: usize,
    n_pairs: usize,
    half_width: f64,
    horizon: f64,
    seed: u64,
    field_lipschitz: f64,
    tube_radius: f64,
    sweep: Vec<FitRecord>,
    eps_hat_non_increasing: bool,
    gronwall_sound: bool,
}

pub fn field_fit(args: &FieldFitArgs) -> Result<bool, CliError> {
    prepare(&args.out)?;
    report::write_manifest(&args.out, "field-fit", args)?;
    if args.p_sweep.is_empty() {
        return Err(CliError::parse("p-sweep must list at least one width".into()));
    }
    let data = io::parse_dataset(&args.data)?;
    let field = field_approx::build_field(&data, args.half_width, args.horizon, args.seed)?;
    let grid = GridSpec::default();
    let mut sweep = Vec::with_capacity(args.p_sweep.len());
    let mut widest: Option<(usize, field_approx::FieldApprox)> = None;
    for &p in &args.p_sweep {
        let fit = field_approx::fit_shallow_field(&field, p, &grid, args.seed)?;
        let cert = field_approx::gronwall_certificate(&field, &fit, &data, args.horizon)?;
        let points: Vec<FitPoint> = cert
            .records
            .iter()
            .map(|r| FitPoint {
                index: r.index,
                measured: r.measured,
                bound: r.bound,
                margin: r.margin,
                certified: r.certified,
            })
            .collect();
        let sound = points
            .iter()
            .all(|r| !r.certified || r.measured <= r.bound + 1e-12 * (1.0 + r.bound));
        sweep.push(FitRecord {
            p,
            kappa: fit.kappa,
            ridge: fit.ridge,
            eps_hat: fit.sup_error_grid,
            lipschitz_nn: fit.lipschitz_nn,
            lipschitz_used: cert.lipschitz_used,
            bound: cert.bound,
            points,
            sound,
        });
        if widest.as_ref().map_or(true, |(w, _)| p >= *w) {
            widest = Some((p, fit));
        }
    }
    let eps_hat_non_increasing = sweep
        .windows(2)
        .all(|w| w[1].eps_hat <= w[0].eps_hat + 1e-12);
    let gronwall_sound = sweep.iter().all(|r| r.sound);

    let (_, fit) = widest.expect("sweep is nonempty");
    let schedule = fit.schedule(args.horizon)?;
    let (trajectories, _) = integrate_dataset(&schedule, &data, &IntegrateOpts::default())?;
    write_flow_artifacts(&args.out, &schedule, &trajectories, &data)?;

    let body = FieldFitBody {
        dim: data.dim,
        n_pairs: data.len(),
        half_width: args.half_width,
        horizon: args.horizon,
        seed: args.seed,
        field_lipschitz: field.lipschitz_estimate,
        tube_radius: field.bundle.tube_radius,
        sweep,
        eps_hat_non_increasing,
        gronwall_sound,
    };
    report::write_report(&args.out, "field-fit", gronwall_sound, None, Some(&body))?;
    Ok(gronwall_sound)
}

// ---------------------------------------------------------------------------
// transport
// ---------------------------------------------------------------------------

#[derive(Args, Serialize, Debug)]
pub struct TransportArgs {
    /// CSV particle cloud, one point per row; omits to use --preset.
    #[arg(long)]
    pub measure: Option<PathBuf>,
    /// Synthetic source measure when no CSV is given.
    #[arg(long, value_enum, default_value_t = PresetKind::Mixture)]
    pub preset: PresetKind,
    /// Particle count for synthetic measures.
    #[arg(long, default_value_t = 10_000)]
    pub particles: usize,
    #[arg(long, default_value_t = 1.0)]
    pub q: f64,
    /// Wasserstein accuracy target; sets the resolution unless overridden.
    #[arg(long, default_value_t = 1.0)]
    pub epsilon: f64,
    /// Total width; must equal the sum of --p-split when given.
    #[arg(long)]
    pub p: Option<usize>,
    /// Per-coordinate neuron budgets; the length fixes the dimension.
    #[arg(long, value_delimiter = ',', default_value = "1,2")]
    pub p_split: Vec<usize>,
    /// Partition resolution override; epsilon then follows the resolution.
    #[arg(long)]
    pub n_override: Option<usize>,
    /// Target displacement override, in (0, 1/n).
    #[arg(long)]
    pub delta_override: Option<f64>,
    /// Time horizon.
    #[arg(long = "T", default_value_t = 1.0)]
    pub horizon: f64,
    /// Sampling allowance added to both Wasserstein gates.
    #[arg(long, default_value_t = 0.05)]
    pub allowance: f64,
    /// Subsample size for the assignment-based Wasserstein evaluation.
    #[arg(long, default_value_t = 1024)]
    pub wq_samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Serialize)]
struct TransportBody {
    source: String,
    particles: usize,
    requested_epsilon: f64,
    allowance: f64,
    n: usize,
    #[serde(rename = "claimed_L")]
    claimed_l: u64,
    #[serde(rename = "achieved_L")]
    achieved_l: u64,
    kappa: u64,
    wq_samples: usize,
    w_q: f64,
    w_q_within_epsilon: bool,
    w_q_within_envelope: bool,
    defective_hyperplanes: usize,
    max_target_defect: f64,
    plan: TransportReport,
}

pub fn transport_run(args: &TransportArgs) -> Result<bool, CliError> {
    prepare(&args.out)?;
    report::write_manifest(&args.out, "transport", args)?;
    if args.p_split.is_empty() || args.p_split.contains(&0) {
        return Err(CliError::parse("p-split needs positive entries".into()));
    }
    let d = args.p_split.len();
    let width: usize = args.p_split.iter().sum();
    if let Some(p) = args.p {
        if p != width {
            return Err(CliError::parse(format!(
                "p = {p} does not match the p-split sum {width}"
            )));
        }
    }
    let mut spec = match args.n_override {
        Some(n) => TransportPlanSpec::with_resolution(args.q, n, args.p_split.clone())?,
        None => TransportPlanSpec::for_accuracy(args.q, args.epsilon, args.p_split.clone())?,
    };
    if let Some(delta) = args.delta_override {
        spec.delta = delta;
        spec.validate()?;
    }

    let (mu, source) = match &args.measure {
        Some(path) => (io::load_measure_csv(path)?, path.display().to_string()),
        None => (
            io::synthetic_measure(args.preset, d, args.particles, args.seed)?,
            format!("preset:{}", args.preset.as_str()),
        ),
    };
    if mu.dim != d {
        return Err(CliError::parse(format!(
            "measure dimension {} does not match the p-split length {d}",
            mu.dim
        )));
    }
    let particles = mu.len();

    let plan = transport::plan_transport(&mu, &spec, args.horizon)?;
    let opts = IntegrateOpts::default();
    let pushed = flow::push_forward(&plan.schedule, &mu, &opts)?;

    // Empirical Wasserstein against a fresh uniform sample, both clouds
    // subsampled to the assignment solver's comfort zone.
    let m = args.wq_samples.clamp(1, 4096).min(particles);
    let sub = pushed.resample_uniform(m, args.seed.wrapping_add(101))?;
    let reference = io::synthetic_measure(PresetKind::Uniform, d, m, args.seed.wrapping_add(202))?;
    let w_q = transport::wasserstein(&sub, &reference, args.q)?;

    let claimed_l = {
        let compress = (2 * d as u64).div_ceil(spec.p as u64);
        let control = args
            .p_split
            .iter()
            .enumerate()
            .map(|(k, &pk)| (spec.n as u64).pow(k as u32 + 1).div_ceil(pk as u64))
            .max()
            .expect("split is nonempty");
        compress + control - 1
    };
    let achieved_l = plan.schedule.discontinuity_count() as u64;
    let w_q_within_epsilon = w_q <= spec.epsilon + args.allowance;
    let w_q_within_envelope = w_q <= plan.report.error_envelope + args.allowance;
    let passed = achieved_l == claimed_l && w_q_within_epsilon && w_q_within_envelope;

    io::save_schedule(&args.out.join("schedule.json"), &plan.schedule)?;
    let tracked = mu.resample_uniform(24.min(particles), args.seed.wrapping_add(303))?;
    let track_opts = IntegrateOpts {
        samples_per_piece: 2,
        ..IntegrateOpts::default()
    };
    let mut tracked_trajectories = Vec::with_capacity(tracked.len());
    for p in &tracked.points {
        tracked_trajectories.push(flow::integrate(&plan.schedule, p, &track_opts)?);
    }
    let ids: Vec<usize> = (0..tracked_trajectories.len()).collect();
    io::write_trajectories_csv(
        &args.out.join("trajectories.csv"),
        &ids,
        &tracked_trajectories,
    )?;
    let shown = 256.min(particles);
    let before = mu.resample_uniform(shown, args.seed.wrapping_add(404))?;
    let after = pushed.resample_uniform(shown, args.seed.wrapping_add(404))?;
    let (x_label, y_label) = axis_labels(d);
    plot::render(
        &args.out.join("plot.svg"),
        &PlotData {
            lines: trajectory_lines(&tracked_trajectories, d),
            solid: point_markers(&before.points, d, 0.0),
            hollow: point_markers(&after.points, d, args.horizon),
            x_label,
            y_label,
        },
    )?;

    let body = TransportBody {
        source,
        particles,
        requested_epsilon: args.epsilon,
        allowance: args.allowance,
        n: spec.n,
        claimed_l,
        achieved_l,
        kappa: kappa_of(&plan.schedule),
        wq_samples: m,
        w_q,
        w_q_within_epsilon,
        w_q_within_envelope,
        defective_hyperplanes: plan
            .report
            .directions
            .iter()
            .map(|r| r.defective_hyperplanes)
            .sum(),
        max_target_defect: plan
            .report
            .directions
            .iter()
            .map(|r| r.max_target_defect)
            .fold(0.0f64, f64::max),
        plan: plan.report.clone(),
    };
    report::write_report(&args.out, "transport", passed, None, Some(&body))?;
    Ok(passed)
}

// ---------------------------------------------------------------------------
// mc-prob
// ---------------------------------------------------------------------------

#[derive(Args, Serialize, Debug)]
pub struct McProbArgs {
    /// Ambient dimension.
    #[arg(long = "d")]
    pub dim: usize,
    /// Pairs per trial.
    #[arg(long = "N")]
    pub n_pairs: usize,
    #[arg(long, default_value_t = 100_000)]
    pub trials: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Serialize)]
struct McProbBody {
    dim: usize,
    n_pairs: usize,
    trials: u64,
    seed: u64,
    successes: u64,
    estimate: f64,
    wilson_low: f64,
    wilson_high: f64,
    /// Closed form for a single axis, N! 2^N / (2N)!.
    exact_axis_probability: f64,
    /// Independent-coordinate complement across all d axes.
    exact_any_axis_probability: f64,
    sigma_exact: f64,
    deviation: f64,
    within_three_sigma: bool,
}

pub fn mc_prob(args: &McProbArgs) -> Result<bool, CliError> {
    prepare(&args.out)?;
    report::write_manifest(&args.out, "mc-prob", args)?;
    let est =
        shallow::estimate_separability_probability(args.dim, args.n_pairs, args.trials, args.seed)?;
    let exact_axis = shallow::exact_axis_probability(args.n_pairs);
    let exact_any = shallow::exact_any_axis_probability(args.dim, args.n_pairs);
    let sigma = (exact_any * (1.0 - exact_any) / args.trials as f64).sqrt();
    let deviation = (est.estimate - exact_any).abs();
    let within = deviation <= 3.0 * sigma + 1e-12;
    plot::render_bars(
        &args.out.join("plot.svg"),
        ["estimate", "exact"],
        [est.estimate, exact_any],
    )?;
    let body = McProbBody {
        dim: args.dim,
        n_pairs: args.n_pairs,
        trials: est.trials,
        seed: args.seed,
        successes: est.successes,
        estimate: est.estimate,
        wilson_low: est.wilson_low,
        wilson_high: est.wilson_high,
        exact_axis_probability: exact_axis,
        exact_any_axis_probability: exact_any,
        sigma_exact: sigma,
        deviation,
        within_three_sigma: within,
    };
    report::write_report(&args.out, "mc-prob", within, None, Some(&body))?;
    Ok(within)
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

#[derive(Args, Serialize, Debug)]
pub struct SimulateArgs {
    /// Stored schedule.json to integrate.
    #[arg(long)]
    pub schedule: PathBuf,
    /// CSV of initial points, one per row.
    #[arg(long)]
    pub points: PathBuf,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Serialize)]
struct SimulateBody {
    schedule: String,
    points: String,
    dim: usize,
    width: usize,
    #[serde(rename = "achieved_L")]
    achieved_l: usize,
    horizon: f64,
    kappa: u64,
    n_points: usize,
    endpoints: Vec<Vec<f64>>,
    integrator_error_estimates: Vec<f64>,
}

pub fn simulate(args: &SimulateArgs) -> Result<bool, CliError> {
    prepare(&args.out)?;
    report::write_manifest(&args.out, "simulate", args)?;
    let schedule = io::load_schedule(&args.schedule)?;
    schedule
        .validate()
        .map_err(|e| CliError::parse(format!("{}: {e}", args.schedule.display())))?;
    let points = io::load_points_csv(&args.points)?;
    if points[0].len() != schedule.dim {
        return Err(CliError::parse(format!(
            "{}: points have dimension {}, schedule has {}",
            args.points.display(),
            points[0].len(),
            schedule.dim
        )));
    }
    let opts = IntegrateOpts::default();
    let mut trajectories = Vec::with_capacity(points.len());
    for p in &points {
        trajectories.push(flow::integrate(&schedule, p, &opts)?);
    }
    let ids: Vec<usize> = (0..trajectories.len()).collect();
    io::write_trajectories_csv(&args.out.join("trajectories.csv"), &ids, &trajectories)?;
    let (x_label, y_label) = axis_labels(schedule.dim);
    let endpoints: Vec<Vec<f64>> = trajectories
        .iter()
        .map(|t| t.endpoint().to_vec())
        .collect();
    plot::render(
        &args.out.join("plot.svg"),
        &PlotData {
            lines: trajectory_lines(&trajectories, schedule.dim),
            solid: point_markers(&points, schedule.dim, 0.0),
            hollow: point_markers(&endpoints, schedule.dim, schedule.horizon),
            x_label,
            y_label,
        },
    )?;
    let body = SimulateBody {
        schedule: args.schedule.display().to_string(),
        points: args.points.display().to_string(),
        dim: schedule.dim,
        width: schedule.width,
        achieved_l: schedule.discontinuity_count(),
        horizon: schedule.horizon,
        kappa: kappa_of(&schedule),
        n_points: points.len(),
        endpoints,
        integrator_error_estimates: trajectories.iter().map(|t| t.error_estimate).collect(),
    };
    report::write_report(&args.out, "simulate", true, None, Some(&body))?;
    Ok(true)
}

// ---------------------------------------------------------------------------
// verify
// ---------------------------------------------------------------------------

#[derive(Args, Serialize, Debug)]
pub struct VerifyArgs {
    /// Stored schedule.json to re-check.
    #[arg(long)]
    pub schedule: PathBuf,
    /// Dataset the schedule claims to interpolate.
    #[arg(long)]
    pub data: PathBuf,
    /// Endpoint acceptance tolerance.
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Serialize)]
struct VerifyRejectBody {
    schedule: String,
    data: String,
    tolerance: f64,
    schedule_valid: bool,
    failed_invariant: String,
}

#[derive(Serialize)]
struct VerifyBody {
    schedule: String,
    data: String,
    tolerance: f64,
    schedule_valid: bool,
    dim: usize,
    width: usize,
    #[serde(rename = "achieved_L")]
    achieved_l: usize,
    kappa: u64,
    endpoint_errors: Vec<f64>,
    max_endpoint_error: f64,
    minimal_complexity: MinimalComplexityFlag,
}

pub fn verify(args: &VerifyArgs) -> Result<bool, CliError> {
    prepare(&args.out)?;
    report::write_manifest(&args.out, "verify", args)?;
    let schedule = io::load_schedule(&args.schedule)?;
    if let Err(e) = schedule.validate() {
        let message = e.to_string();
        let body = VerifyRejectBody {
            schedule: args.schedule.display().to_string(),
            data: args.data.display().to_string(),
            tolerance: args.tol,
            schedule_valid: false,
            failed_invariant: message.clone(),
        };
        let diag = Diagnostic {
            kind: "verification",
            message,
        };
        report::write_report(&args.out, "verify", false, Some(&diag), Some(&body))?;
        return Ok(false);
    }
    let data = io::parse_dataset(&args.data)?;
    if data.dim != schedule.dim {
        return Err(CliError::parse(format!(
            "dataset dimension {} does not match schedule dimension {}",
            data.dim, schedule.dim
        )));
    }
    let (trajectories, endpoint_errors) =
        integrate_dataset(&schedule, &data, &IntegrateOpts::default())?;
    let max_endpoint_error = endpoint_errors.iter().fold(0.0f64, |m, &e| m.max(e));
    let passed = max_endpoint_error <= args.tol;
    let ids: Vec<usize> = (0..trajectories.len()).collect();
    io::write_trajectories_csv(&args.out.join("trajectories.csv"), &ids, &trajectories)?;
    let (x_label, y_label) = axis_labels(data.dim);
    let inputs: Vec<Vec<f64>> = data.inputs().cloned().collect();
    let targets: Vec<Vec<f64>> = data.targets().cloned().collect();
    plot::render(
        &args.out.join("plot.svg"),
        &PlotData {
            lines: trajectory_lines(&trajectories, data.dim),
            solid: point_markers(&inputs, data.dim, 0.0),
            hollow: point_markers(&targets, data.dim, schedule.horizon),
            x_label,
            y_label,
        },
    )?;
    let body = VerifyBody {
        schedule: args.schedule.display().to_string(),
        data: args.data.display().to_string(),
        tolerance: args.tol,
        schedule_valid: true,
        dim: schedule.dim,
        width: schedule.width,
        achieved_l: schedule.discontinuity_count(),
        kappa: kappa_of(&schedule),
        endpoint_errors,
        max_endpoint_error,
        minimal_complexity: minimal_complexity_flag(data.len(), data.dim),
    };
    report::write_report(&args.out, "verify", passed, None, Some(&body))?;
    Ok(passed)
}
