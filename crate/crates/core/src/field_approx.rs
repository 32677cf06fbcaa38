//! Lipschitz interpolating tube fields and their shallow surrogates.
//!
//! The exact construction routes one curve per data pair, wraps each curve
//! in a tube of radius `r`, and sets the field to the curve's unit tangent
//! times its traversal speed, faded out by a smooth radial profile. Tubes
//! are pairwise disjoint and vanish near the domain boundary, so the field
//! is globally Lipschitz with a computable constant and its time-`T` flow
//! maps every input onto its target.
//!
//! The surrogate is a one-hidden-layer ReLU field with seeded random inner
//! weights and ridge-regressed outer weights, fitted on a training grid and
//! scored on an offset validation grid. [`gronwall_certificate`] turns the
//! measured sup error into an a posteriori endpoint bound for the surrogate
//! flow.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::flow::{integrate, integrate_field, IntegrateOpts, Trajectory};
use crate::model::{ControlSchedule, Dataset, Neuron, Piece};
use crate::{linalg, vecmath};

/// One smooth piece of a routed curve. Arcs live in the plane spanned by
/// the orthonormal pair `(u, v)` around `center`; the parameter is
/// arclength from the piece start.
#[derive(Debug, Clone)]
enum Primitive {
    Segment {
        start: Vec<f64>,
        /// Unit direction, or zero for a point curve.
        dir: Vec<f64>,
        len: f64,
    },
    Arc {
        center: Vec<f64>,
        u: Vec<f64>,
        v: Vec<f64>,
        radius: f64,
        sweep: f64,
    },
}

impl Primitive {
    fn len(&self) -> f64 {
        match self {
            Primitive::Segment { len, .. } => *len,
            Primitive::Arc { radius, sweep, .. } => radius * sweep,
        }
    }

    fn point_at(&self, s: f64) -> Vec<f64> {
        match self {
            Primitive::Segment { start, dir, .. } => {
                let mut p = start.clone();
                vecmath::axpy(s, dir, &mut p);
                p
            }
            Primitive::Arc {
                center,
                u,
                v,
                radius,
                ..
            } => {
                let theta = s / radius;
                let mut p = center.clone();
                vecmath::axpy(radius * theta.cos(), u, &mut p);
                vecmath::axpy(radius * theta.sin(), v, &mut p);
                p
            }
        }
    }

    fn tangent_at(&self, s: f64) -> Vec<f64> {
        match self {
            Primitive::Segment { dir, .. } => dir.clone(),
            Primitive::Arc {
                u, v, radius, ..
            } => {
                let theta = s / radius;
                let mut t = vec![0.0; u.len()];
                vecmath::axpy(-theta.sin(), u, &mut t);
                vecmath::axpy(theta.cos(), v, &mut t);
                t
            }
        }
    }

    /// Squared distance from `x` and the arclength of the nearest point.
    fn closest(&self, x: &[f64]) -> (f64, f64) {
        match self {
            Primitive::Segment { start, dir, len } => {
                let mut rel = x.to_vec();
                vecmath::axpy(-1.0, start, &mut rel);
                let s = vecmath::dot(&rel, dir).clamp(0.0, *len);
                let p = self.point_at(s);
                (dist2(x, &p), s)
            }
            Primitive::Arc {
                center,
                u,
                v,
                radius,
                sweep,
            } => {
                let mut rel = x.to_vec();
                vecmath::axpy(-1.0, center, &mut rel);
                let theta = vecmath::dot(&rel, v).atan2(vecmath::dot(&rel, u));
                let mut best = (f64::INFINITY, 0.0);
                for cand in [theta.clamp(0.0, *sweep), 0.0, *sweep] {
                    let s = cand * radius;
                    let d2 = dist2(x, &self.point_at(s));
                    if d2 < best.0 {
                        best = (d2, s);
                    }
                }
                best
            }
        }
    }
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// A C¹ curve assembled from straight segments and circular corner fillets,
/// parameterized by arclength.
#[derive(Debug, Clone)]
pub struct Curve {
    prims: Vec<Primitive>,
    /// Arclength consumed before each primitive; one trailing total entry.
    cum: Vec<f64>,
    pub length: f64,
}

/// Fraction of the shorter adjacent segment trimmed away at each corner.
/// Below one half, so the two fillets of one segment never overlap.
const FILLET_FRACTION: f64 = 0.35;

impl Curve {
    /// Rounds the corners of a polyline. `trim_cap` bounds the trim length
    /// at every corner, keeping the curve within `trim_cap` of the
    /// polyline; pass infinity when no routing clearance is at stake.
    fn from_polyline(points: &[Vec<f64>], trim_cap: f64) -> Result<Curve> {
        let mut kept: Vec<Vec<f64>> = Vec::with_capacity(points.len());
        for p in points {
            if kept.last().map_or(true, |q| dist2(q, p).sqrt() > 1e-12) {
                kept.push(p.clone());
            }
        }
        let dim = kept[0].len();
        if kept.len() == 1 {
            return Ok(Curve {
                prims: vec![Primitive::Segment {
                    start: kept.pop().unwrap(),
                    dir: vec![0.0; dim],
                    len: 0.0,
                }],
                cum: vec![0.0, 0.0],
                length: 0.0,
            });
        }

        let dirs: Vec<Vec<f64>> = kept
            .windows(2)
            .map(|w| {
                let mut d = w[1].clone();
                vecmath::axpy(-1.0, &w[0], &mut d);
                vecmath::normalize(&mut d);
                d
            })
            .collect();
        let lens: Vec<f64> = kept
            .windows(2)
            .map(|w| dist2(&w[0], &w[1]).sqrt())
            .collect();

        let mut prims = Vec::new();
        let mut cursor = kept[0].clone();
        for i in 1..kept.len() - 1 {
            let (t1, t2) = (&dirs[i - 1], &dirs[i]);
            let cosb = vecmath::dot(t1, t2).clamp(-1.0, 1.0);
            if cosb > 1.0 - 1e-12 {
                continue;
            }
            if cosb < -(1.0 - 1e-9) {
                return Err(Error::invalid("curve corner: segments double back"));
            }
            let beta = cosb.acos();
            let trim = (FILLET_FRACTION * lens[i - 1].min(lens[i])).min(trim_cap);
            let radius = trim / (beta / 2.0).tan();
            let mut a = kept[i].clone();
            vecmath::axpy(-trim, t1, &mut a);
            let mut b = kept[i].clone();
            vecmath::axpy(trim, t2, &mut b);
            // Inward normal at the entry tangent point.
            let mut n = t2.clone();
            vecmath::axpy(-cosb, t1, &mut n);
            vecmath::normalize(&mut n);
            let mut center = a.clone();
            vecmath::axpy(radius, &n, &mut center);
            let mut u = n.clone();
            vecmath::scale(&mut u, -1.0);

            let seg_len = dist2(&cursor, &a).sqrt();
            if seg_len > 1e-12 {
                let mut dir = a.clone();
                vecmath::axpy(-1.0, &cursor, &mut dir);
                vecmath::normalize(&mut dir);
                prims.push(Primitive::Segment {
                    start: cursor,
                    dir,
                    len: seg_len,
                });
            }
            prims.push(Primitive::Arc {
                center,
                u,
                v: t1.clone(),
                radius,
                sweep: beta,
            });
            cursor = b;
        }
        let last = kept.last().unwrap();
        let seg_len = dist2(&cursor, last).sqrt();
        if seg_len > 1e-12 {
            let mut dir = last.clone();
            vecmath::axpy(-1.0, &cursor, &mut dir);
            vecmath::normalize(&mut dir);
            prims.push(Primitive::Segment {
                start: cursor,
                dir,
                len: seg_len,
            });
        }

        let mut cum = Vec::with_capacity(prims.len() + 1);
        let mut total = 0.0;
        for p in &prims {
            cum.push(total);
            total += p.len();
        }
        cum.push(total);
        Ok(Curve {
            prims,
            cum,
            length: total,
        })
    }

    pub fn start(&self) -> Vec<f64> {
        self.prims[0].point_at(0.0)
    }

    pub fn end(&self) -> Vec<f64> {
        let last = self.prims.last().unwrap();
        last.point_at(last.len())
    }

    /// Distance to the curve, the unit tangent at the nearest point, and
    /// its global arclength.
    pub fn closest(&self, x: &[f64]) -> (f64, Vec<f64>, f64) {
        let mut best = (f64::INFINITY, 0usize, 0.0f64);
        for (i, prim) in self.prims.iter().enumerate() {
            let (d2, s) = prim.closest(x);
            if d2 < best.0 {
                best = (d2, i, s);
            }
        }
        let (d2, i, s) = best;
        (d2.sqrt(), self.prims[i].tangent_at(s), self.cum[i] + s)
    }

    pub fn point_at(&self, s: f64) -> Vec<f64> {
        let (i, local) = self.locate(s);
        self.prims[i].point_at(local)
    }

    fn locate(&self, s: f64) -> (usize, f64) {
        let s = s.clamp(0.0, self.length);
        let i = match self
            .cum
            .binary_search_by(|c| c.partial_cmp(&s).unwrap())
        {
            Ok(i) => i.min(self.prims.len() - 1),
            Err(i) => i - 1,
        };
        let i = i.min(self.prims.len() - 1);
        (i, s - self.cum[i])
    }

    /// Arclength-uniform samples; a point curve yields its single point.
    pub fn samples(&self, count: usize) -> Vec<Vec<f64>> {
        if self.length == 0.0 {
            return vec![self.start()];
        }
        let count = count.max(2);
        (0..count)
            .map(|j| self.point_at(self.length * j as f64 / (count - 1) as f64))
            .collect()
    }

    fn min_fillet_radius(&self) -> f64 {
        self.prims
            .iter()
            .filter_map(|p| match p {
                Primitive::Arc { radius, .. } => Some(*radius),
                _ => None,
            })
            .fold(f64::INFINITY, f64::min)
    }

    /// Smallest gap between non-adjacent primitives, minus the sampling
    /// slack; infinite when every pair of primitives is adjacent.
    fn self_clearance(&self, spacing: f64) -> f64 {
        let mut best = f64::INFINITY;
        let samples: Vec<Vec<Vec<f64>>> = self
            .prims
            .iter()
            .map(|p| sample_primitive(p, spacing))
            .collect();
        for i in 0..self.prims.len() {
            for j in i + 2..self.prims.len() {
                for a in &samples[i] {
                    for b in &samples[j] {
                        best = best.min(dist2(a, b).sqrt());
                    }
                }
            }
        }
        best - spacing
    }
}

fn sample_primitive(p: &Primitive, spacing: f64) -> Vec<Vec<f64>> {
    let count = ((p.len() / spacing).ceil() as usize).clamp(1, 4096) + 1;
    (0..count)
        .map(|j| p.point_at(p.len() * j as f64 / (count - 1).max(1) as f64))
        .collect()
}

/// Radial fade profile: one on the inner half of the tube, zero outside,
/// C-infinity in between. Trajectories started on a curve only ever see the
/// flat core.
fn profile(rho: f64) -> f64 {
    if rho <= 0.5 {
        1.0
    } else if rho >= 1.0 {
        0.0
    } else {
        smooth_step(2.0 * rho - 1.0)
    }
}

/// Standard exp-based partition step: 1 at 0, 0 at 1, flat at both ends.
fn smooth_step(t: f64) -> f64 {
    let h = |s: f64| if s > 0.0 { (-1.0 / s).exp() } else { 0.0 };
    let (a, b) = (h(1.0 - t), h(t));
    a / (a + b)
}

/// Numeric sup of |d profile / d rho|, cached. The transition lives on
/// [1/2, 1], so the slope scales as 2 sup|step'|.
fn profile_slope_sup() -> f64 {
    static SLOPE: std::sync::OnceLock<f64> = std::sync::OnceLock::new();
    *SLOPE.get_or_init(|| {
        let n = 16384;
        let mut sup = 0.0f64;
        let mut prev = profile(0.5);
        for i in 1..=n {
            let rho = 0.5 + 0.5 * i as f64 / n as f64;
            let val = profile(rho);
            sup = sup.max((val - prev).abs() * (2.0 * n as f64));
            prev = val;
        }
        sup * 1.02
    })
}

/// Disjoint tubes around one routed curve per data pair inside the box
/// `[-half_width, half_width]^d`.
#[derive(Debug, Clone)]
pub struct CurveBundle {
    pub dim: usize,
    pub curves: Vec<Curve>,
    pub tube_radius: f64,
    pub half_width: f64,
}

/// The exact interpolating field: supported on the tube bundle, equal to
/// `speed * tangent` along each curve.
#[derive(Debug, Clone)]
pub struct LipschitzField {
    pub bundle: CurveBundle,
    pub speeds: Vec<f64>,
    /// Upper estimate of the global Lipschitz constant: the analytic
    /// profile/curvature bound, or 1.25 times the largest sampled
    /// difference quotient if that is larger.
    pub lipschitz_estimate: f64,
    pub horizon: f64,
}

impl LipschitzField {
    pub fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        let r = self.bundle.tube_radius;
        for (curve, &speed) in self.bundle.curves.iter().zip(&self.speeds) {
            if speed == 0.0 {
                continue;
            }
            let (dist, tangent, _) = curve.closest(x);
            if dist < r {
                let w = speed * profile(dist / r);
                if w != 0.0 {
                    vecmath::axpy(w, &tangent, out);
                }
            }
        }
    }

    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.bundle.dim];
        self.eval_into(x, &mut out);
        out
    }

    /// Flow of the field from `x0` over the construction horizon.
    pub fn flow(&self, x0: &[f64], opts: &IntegrateOpts) -> Result<Trajectory> {
        integrate_field(
            |x: &[f64], out: &mut [f64]| self.eval_into(x, out),
            x0,
            self.horizon,
            opts,
        )
    }
}

const ROUTING_ATTEMPTS: usize = 64;
const DETOUR_CANDIDATES: usize = 24;

/// Builds the exact interpolating field for `data` on
/// `[-half_width, half_width]^d`: straight curves where they stay apart,
/// planar detours otherwise, tube radius from the measured clearances, and
/// a flow check of every pair against the integrator.
pub fn build_field(
    data: &Dataset,
    half_width: f64,
    horizon: f64,
    seed: u64,
) -> Result<LipschitzField> {
    data.validate()?;
    if !(half_width > 0.0 && half_width.is_finite()) {
        return Err(Error::parameter("domain half width must be positive and finite"));
    }
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(Error::parameter("horizon must be positive and finite"));
    }
    let boundary_margin = data
        .pairs
        .iter()
        .flat_map(|(x, y)| x.iter().chain(y.iter()))
        .map(|c| half_width - c.abs())
        .fold(f64::INFINITY, f64::min);
    if boundary_margin <= 0.0 {
        return Err(Error::invalid(
            "field data: every point must lie strictly inside the domain box",
        ));
    }

    let (waypoints, trim_cap) = if data.dim == 2 && data.pairs.len() > 1 {
        route_planar(data, half_width, seed)?
    } else {
        let straight = data
            .pairs
            .iter()
            .map(|(x, y)| vec![x.clone(), y.clone()])
            .collect();
        (straight, f64::INFINITY)
    };
    let curves: Vec<Curve> = waypoints
        .iter()
        .map(|w| Curve::from_polyline(w, trim_cap))
        .collect::<Result<_>>()?;

    // All clearances come from dense samples; subtracting the spacing turns
    // them into certified lower bounds, so crossing curves cannot slip
    // through between sample points.
    let spacing = 0.004 * half_width;
    let dense: Vec<Vec<Vec<f64>>> = curves
        .iter()
        .map(|c| c.samples(((c.length / spacing).ceil() as usize).clamp(2, 8192)))
        .collect();

    let mut pair_gap = f64::INFINITY;
    for i in 0..curves.len() {
        for j in i + 1..curves.len() {
            let mut gap = f64::INFINITY;
            for a in &dense[i] {
                for b in &dense[j] {
                    gap = gap.min(dist2(a, b).sqrt());
                }
            }
            if gap - spacing <= 1e-9 {
                return Err(Error::Routing { first: i, second: j });
            }
            pair_gap = pair_gap.min(gap - spacing);
        }
    }
    for (i, curve) in curves.iter().enumerate() {
        if curve.self_clearance(spacing) <= 1e-9 {
            return Err(Error::Routing { first: i, second: i });
        }
    }

    let margin = dense
        .iter()
        .flatten()
        .flat_map(|p| p.iter().map(|c| half_width - c.abs()))
        .fold(f64::INFINITY, f64::min)
        - spacing;
    if margin <= 1e-9 {
        return Err(Error::invalid("field data: curve leaves the domain box"));
    }

    let fillet_min = curves
        .iter()
        .map(|c| c.min_fillet_radius())
        .fold(f64::INFINITY, f64::min);
    let self_min = curves
        .iter()
        .map(|c| c.self_clearance(spacing))
        .fold(f64::INFINITY, f64::min);

    let mut radius = margin.min(0.9 * fillet_min).min(0.45 * self_min);
    if curves.len() > 1 {
        radius = radius.min(0.5 * pair_gap);
    }
    let radius = radius * 0.999;
    debug_assert!(radius > 0.0);

    let speeds: Vec<f64> = curves.iter().map(|c| c.length / horizon).collect();

    let bundle = CurveBundle {
        dim: data.dim,
        curves,
        tube_radius: radius,
        half_width,
    };
    let mut field = LipschitzField {
        bundle,
        speeds,
        lipschitz_estimate: 0.0,
        horizon,
    };

    let analytic = field
        .bundle
        .curves
        .iter()
        .zip(&field.speeds)
        .map(|(c, &s)| {
            let turn = {
                let rho = c.min_fillet_radius();
                if rho.is_finite() { 1.0 / (rho - radius) } else { 0.0 }
            };
            s * (profile_slope_sup() / radius + turn)
        })
        .fold(0.0f64, f64::max);
    let sampled = sampled_lipschitz(&field, 1500, seed);
    field.lipschitz_estimate = analytic.max(1.25 * sampled);

    let opts = IntegrateOpts::default();
    for (n, (x, y)) in data.pairs.iter().enumerate() {
        let traj = field.flow(x, &opts)?;
        let err = vecmath::dist(traj.endpoint(), y);
        if err > 1e-5 {
            return Err(Error::Conditioning {
                context: format!("tube flow misses target {n} by {err:.3e}"),
            });
        }
    }
    Ok(field)
}

/// Largest difference quotient of the field over seeded probe pairs around
/// the tubes.
fn sampled_lipschitz(field: &LipschitzField, trials_per_curve: usize, seed: u64) -> f64 {
    let d = field.bundle.dim;
    let r = field.bundle.tube_radius;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    let mut sup = 0.0f64;
    let gauss = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        (0..d).map(|_| rng.sample(rand_distr::StandardNormal)).collect()
    };
    for (curve, &speed) in field.bundle.curves.iter().zip(&field.speeds) {
        if speed == 0.0 {
            continue;
        }
        for _ in 0..trials_per_curve {
            let base = curve.point_at(rng.gen_range(0.0..=1.0) * curve.length);
            let mut off = gauss(&mut rng);
            vecmath::normalize(&mut off);
            let mut p = base.clone();
            vecmath::axpy(rng.gen_range(0.0..1.3) * r, &off, &mut p);
            let mut step = gauss(&mut rng);
            vecmath::normalize(&mut step);
            let h = rng.gen_range(1e-4..0.3) * r;
            let mut q = p.clone();
            vecmath::axpy(h, &step, &mut q);
            let quotient = vecmath::dist(&field.eval(&p), &field.eval(&q)) / h;
            sup = sup.max(quotient);
        }
    }
    sup
}

/// Greedy planar routing: curves are placed one at a time, straight when
/// possible and with a rectangular detour otherwise; the whole pass is
/// retried under reshuffled orders. Returns the waypoint polylines and the
/// corner trim cap that preserves the achieved clearance.
fn route_planar(
    data: &Dataset,
    half_width: f64,
    seed: u64,
) -> Result<(Vec<Vec<Vec<f64>>>, f64)> {
    let n = data.pairs.len();
    let mut endpoint_gap = f64::INFINITY;
    for i in 0..n {
        for j in i + 1..n {
            for a in [&data.pairs[i].0, &data.pairs[i].1] {
                for b in [&data.pairs[j].0, &data.pairs[j].1] {
                    endpoint_gap = endpoint_gap.min(vecmath::dist(a, b));
                }
            }
        }
    }
    if endpoint_gap <= 1e-9 {
        return Err(Error::Routing { first: 0, second: 1 });
    }
    let mu = (0.35 * endpoint_gap).min(0.05 * half_width);

    let mut conflict = (0usize, 1usize);
    for attempt in 0..ROUTING_ATTEMPTS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(attempt as u64);
        let mut order: Vec<usize> = (0..n).collect();
        if attempt > 0 {
            order.shuffle(&mut rng);
        }
        match route_attempt(data, half_width, mu, &order, &mut rng) {
            Ok(w) => return Ok((w, mu / 2.0)),
            Err(pair) => conflict = pair,
        }
    }
    Err(Error::Routing {
        first: conflict.0.min(conflict.1),
        second: conflict.0.max(conflict.1),
    })
}

fn route_attempt(
    data: &Dataset,
    half_width: f64,
    mu: f64,
    order: &[usize],
    rng: &mut ChaCha8Rng,
) -> std::result::Result<Vec<Vec<Vec<f64>>>, (usize, usize)> {
    let n = data.pairs.len();
    let mut placed: Vec<Option<Vec<Vec<f64>>>> = vec![None; n];
    let mut placed_samples: Vec<Option<Vec<Vec<f64>>>> = vec![None; n];

    for &idx in order {
        let (x, y) = &data.pairs[idx];
        let mut candidates: Vec<Vec<Vec<f64>>> = vec![vec![x.clone(), y.clone()]];
        let mut delta = vec![0.0; 2];
        for (k, (a, b)) in y.iter().zip(x).enumerate() {
            delta[k] = a - b;
        }
        if vecmath::normalize(&mut delta) > 0.0 {
            let normal = vec![-delta[1], delta[0]];
            for _ in 0..DETOUR_CANDIDATES {
                let h = rng.gen_range(0.08..0.5)
                    * half_width
                    * if rng.gen::<bool>() { 1.0 } else { -1.0 };
                let mut a = x.clone();
                vecmath::axpy(h, &normal, &mut a);
                let mut b = y.clone();
                vecmath::axpy(h, &normal, &mut b);
                candidates.push(vec![x.clone(), a, b, y.clone()]);
            }
        }

        let mut best_block = (idx + 1) % n.max(1);
        'cand: for cand in &candidates {
            for p in cand {
                if p.iter().any(|c| half_width - c.abs() < mu) {
                    continue 'cand;
                }
            }
            let samples = sample_polyline(cand, mu / 2.0);
            for other in 0..n {
                if other == idx {
                    continue;
                }
                let gap = match &placed_samples[other] {
                    Some(existing) => min_gap(&samples, existing),
                    None => min_gap(
                        &samples,
                        &[data.pairs[other].0.clone(), data.pairs[other].1.clone()],
                    ),
                };
                if gap < mu {
                    best_block = other;
                    continue 'cand;
                }
            }
            placed_samples[idx] = Some(samples);
            placed[idx] = Some(cand.clone());
            break;
        }
        if placed[idx].is_none() {
            return Err((idx, best_block));
        }
    }
    Ok(placed.into_iter().map(|w| w.unwrap()).collect())
}

fn sample_polyline(points: &[Vec<f64>], spacing: f64) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    for w in points.windows(2) {
        let len = vecmath::dist(&w[0], &w[1]);
        let count = ((len / spacing).ceil() as usize).clamp(1, 2048);
        for j in 0..count {
            let t = j as f64 / count as f64;
            let mut p = w[0].clone();
            for k in 0..p.len() {
                p[k] += t * (w[1][k] - w[0][k]);
            }
            out.push(p);
        }
    }
    out.push(points.last().unwrap().clone());
    out
}

fn min_gap(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let mut best = f64::INFINITY;
    for p in a {
        for q in b {
            best = best.min(dist2(p, q));
        }
    }
    best.sqrt()
}

/// Grid resolutions for fitting and validation. The validation grid is
/// offset by half of its own cell so no training point is rescored.
#[derive(Debug, Clone, Copy)]
pub struct GridSpec {
    pub train_per_axis: usize,
    pub validation_per_axis: usize,
    /// Grids above this cardinality are subsampled with the fit seed.
    pub max_points: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            train_per_axis: 33,
            validation_per_axis: 65,
            max_points: 100_000,
        }
    }
}

impl GridSpec {
    fn validate(&self) -> Result<()> {
        if self.train_per_axis < 2 || self.validation_per_axis < 2 {
            return Err(Error::parameter("grid needs at least two points per axis"));
        }
        if self.max_points < 16 {
            return Err(Error::parameter("grid cap must allow at least 16 points"));
        }
        Ok(())
    }
}

/// One-hidden-layer ReLU surrogate of a tube field together with its
/// measured fit quality.
#[derive(Debug, Clone)]
pub struct FieldApprox {
    pub neurons: Vec<Neuron>,
    /// Sup of |V - V_NN| over the validation grid.
    pub sup_error_grid: f64,
    /// Product of the outer and inner spectral norms; a Lipschitz bound for
    /// the surrogate since the activation is 1-Lipschitz.
    pub lipschitz_nn: f64,
    pub kappa: usize,
    /// Ridge parameter actually used by the normal-equation solve.
    pub ridge: f64,
    pub dim: usize,
    pub half_width: f64,
}

impl FieldApprox {
    /// The surrogate as a single-piece autonomous schedule.
    pub fn schedule(&self, horizon: f64) -> Result<ControlSchedule> {
        ControlSchedule::new(
            self.dim,
            self.neurons.len(),
            vec![Piece {
                t_start: 0.0,
                t_end: horizon,
                neurons: self.neurons.clone(),
            }],
        )
    }
}

/// Fits `p` shared ReLU features to the field over its box. Inner weights
/// are seeded per feature index, so the features of a narrower fit are a
/// prefix of a wider one under the same seed.
pub fn fit_shallow_field(
    field: &LipschitzField,
    p: usize,
    grid: &GridSpec,
    seed: u64,
) -> Result<FieldApprox> {
    grid.validate()?;
    if p == 0 {
        return Err(Error::parameter("surrogate needs at least one feature"));
    }
    let d = field.bundle.dim;
    let half_width = field.bundle.half_width;
    let bias_range = (d as f64).sqrt() * half_width;

    let features: Vec<(Vec<f64>, f64)> = (0..p)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(1 + i as u64);
            let mut a: Vec<f64> = (0..d)
                .map(|_| rng.sample(rand_distr::StandardNormal))
                .collect();
            if vecmath::normalize(&mut a) == 0.0 {
                a = vecmath::unit(d, 0);
            }
            let b = rng.gen_range(-bias_range..bias_range);
            (a, b)
        })
        .collect();

    let train = grid_points(d, grid.train_per_axis, half_width, false, grid.max_points, seed);

    // Normal equations, accumulated over fixed-size chunks in index order so
    // the result does not depend on the thread schedule.
    let chunks: Vec<(DMatrix<f64>, DMatrix<f64>)> = train
        .par_chunks(2048)
        .map(|chunk| {
            let mut phi = DMatrix::<f64>::zeros(chunk.len(), p);
            let mut targets = DMatrix::<f64>::zeros(chunk.len(), d);
            let mut v = vec![0.0; d];
            for (row, x) in chunk.iter().enumerate() {
                for (col, (a, b)) in features.iter().enumerate() {
                    phi[(row, col)] = (vecmath::dot(a, x) + b).max(0.0);
                }
                field.eval_into(x, &mut v);
                for (col, &vi) in v.iter().enumerate() {
                    targets[(row, col)] = vi;
                }
            }
            (phi.transpose() * &phi, phi.transpose() * targets)
        })
        .collect();
    let mut gram = DMatrix::<f64>::zeros(p, p);
    let mut rhs = DMatrix::<f64>::zeros(p, d);
    for (g, r) in chunks {
        gram += g;
        rhs += r;
    }

    let (outer, ridge) =
        linalg::ridge_solve(&gram, &rhs, 1e-8, 1e-2).ok_or(Error::Conditioning {
            context: "surrogate normal equations stayed singular up to ridge 1e-2".into(),
        })?;

    let neurons: Vec<Neuron> = features
        .iter()
        .enumerate()
        .map(|(i, (a, b))| {
            let w: Vec<f64> = (0..d).map(|k| outer[(i, k)]).collect();
            Neuron::new(w, a.clone(), *b)
        })
        .collect::<Result<_>>()?;

    let validation = grid_points(
        d,
        grid.validation_per_axis,
        half_width,
        true,
        grid.max_points,
        seed,
    );
    let sup_error_grid = validation
        .par_iter()
        .map(|x| {
            let truth = field.eval(x);
            let fitted = crate::model::eval_field(&neurons, x).expect("dims fixed above");
            vecmath::dist(&truth, &fitted)
        })
        .reduce(|| 0.0, f64::max);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a_mat = DMatrix::<f64>::from_fn(p, d, |i, k| features[i].0[k]);
    let norm_a = linalg::spectral_norm(&a_mat, &mut rng);
    let norm_w = linalg::spectral_norm(&outer, &mut rng);

    Ok(FieldApprox {
        neurons,
        sup_error_grid,
        lipschitz_nn: norm_w * norm_a,
        kappa: (d + 2) * p * d,
        ridge,
        dim: d,
        half_width,
    })
}

/// Axis-uniform grid over the box, optionally offset by half a cell, capped
/// by seeded subsampling.
fn grid_points(
    d: usize,
    per_axis: usize,
    half_width: f64,
    offset: bool,
    cap: usize,
    seed: u64,
) -> Vec<Vec<f64>> {
    let total: u64 = (per_axis as u64).pow(d as u32);
    let coord = |i: usize| -> f64 {
        if offset {
            -half_width + (i as f64 + 0.5) * 2.0 * half_width / per_axis as f64
        } else {
            -half_width + i as f64 * 2.0 * half_width / (per_axis - 1) as f64
        }
    };
    let decode = |mut idx: u64| -> Vec<f64> {
        (0..d)
            .map(|_| {
                let i = (idx % per_axis as u64) as usize;
                idx /= per_axis as u64;
                coord(i)
            })
            .collect()
    };
    if total <= cap as u64 {
        (0..total).map(decode).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(if offset { u64::MAX - 1 } else { u64::MAX - 2 });
        (0..cap).map(|_| decode(rng.gen_range(0..total))).collect()
    }
}

/// `eps * T * exp(L T)`: the a posteriori endpoint bound obtained by
/// Grönwall from a sup field error `eps` and a Lipschitz constant `L`.
pub fn gronwall_bound(eps_hat: f64, lipschitz: f64, horizon: f64) -> f64 {
    eps_hat * horizon * (lipschitz * horizon).exp()
}

#[derive(Debug, Clone)]
pub struct GronwallRecord {
    pub index: usize,
    /// Endpoint deviation of the surrogate flow, by integration.
    pub measured: f64,
    pub bound: f64,
    pub margin: f64,
    /// False when the surrogate trajectory leaves the validation box, where
    /// the sup error is unmeasured and the bound says nothing.
    pub certified: bool,
}

#[derive(Debug, Clone)]
pub struct GronwallReport {
    pub records: Vec<GronwallRecord>,
    pub eps_hat: f64,
    /// The smaller of the field estimate and the surrogate spectral bound.
    pub lipschitz_used: f64,
    pub bound: f64,
}

/// Certifies the surrogate flow endpoint-by-endpoint against the Grönwall
/// bound built from the measured sup error.
pub fn gronwall_certificate(
    field: &LipschitzField,
    approx: &FieldApprox,
    data: &Dataset,
    horizon: f64,
) -> Result<GronwallReport> {
    data.validate()?;
    if approx.dim != data.dim || field.bundle.dim != data.dim {
        return Err(Error::Dimension {
            context: "gronwall certificate",
            expected: data.dim,
            found: approx.dim,
        });
    }
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(Error::parameter("horizon must be positive and finite"));
    }
    let lipschitz_used = field.lipschitz_estimate.min(approx.lipschitz_nn);
    let bound = gronwall_bound(approx.sup_error_grid, lipschitz_used, horizon);
    let schedule = approx.schedule(horizon)?;
    let opts = IntegrateOpts::default();
    let records = data
        .pairs
        .iter()
        .enumerate()
        .map(|(index, (x, y))| {
            let traj = integrate(&schedule, x, &opts)?;
            let certified = traj
                .states
                .iter()
                .all(|st| st.iter().all(|c| c.abs() <= approx.half_width + 1e-9));
            let measured = vecmath::dist(traj.endpoint(), y);
            Ok(GronwallRecord {
                index,
                measured,
                bound,
                margin: bound - measured,
                certified,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GronwallReport {
        records,
        eps_hat: approx.sup_error_grid,
        lipschitz_used,
        bound,
    })
}
