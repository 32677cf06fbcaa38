//! Model types: neurons, piecewise-constant schedules, datasets, complexity.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vecmath;

/// One ReLU neuron of the field `x' = sum_i w_i * relu(a_i . x + b_i)`.
///
/// `w` is the output direction, `a` the input direction and `b` the bias.
/// Both vectors live in the same ambient dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Neuron {
    pub w: Vec<f64>,
    pub a: Vec<f64>,
    pub b: f64,
}

impl Neuron {
    pub fn new(w: Vec<f64>, a: Vec<f64>, b: f64) -> Result<Self> {
        if w.is_empty() {
            return Err(Error::invalid("neuron: empty weight vector"));
        }
        if w.len() != a.len() {
            return Err(Error::Dimension {
                context: "neuron: w and a",
                expected: w.len(),
                found: a.len(),
            });
        }
        if !vecmath::all_finite(&w) || !vecmath::all_finite(&a) || !b.is_finite() {
            return Err(Error::NonFinite {
                context: "neuron parameters".into(),
            });
        }
        Ok(Neuron { w, a, b })
    }

    /// Inactive neuron whose input direction is the canonical `axis`.
    /// Used to pad pieces up to a fixed width without touching the state.
    pub fn zero_on_axis(dim: usize, axis: usize) -> Self {
        Neuron {
            w: vec![0.0; dim],
            a: vecmath::unit(dim, axis),
            b: 0.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.w.len()
    }

    pub fn is_inactive(&self) -> bool {
        self.w.iter().all(|&x| x == 0.0)
    }
}

/// Evaluate the field at `x` into `out`. Both slices must match the neuron
/// dimension; `out` is overwritten.
pub fn eval_field_into(neurons: &[Neuron], x: &[f64], out: &mut [f64]) -> Result<()> {
    if !vecmath::all_finite(x) {
        return Err(Error::NonFinite {
            context: "eval_field input".into(),
        });
    }
    out.fill(0.0);
    for n in neurons {
        if n.dim() != x.len() {
            return Err(Error::Dimension {
                context: "eval_field",
                expected: n.dim(),
                found: x.len(),
            });
        }
        let pre = vecmath::dot(&n.a, x) + n.b;
        if pre > 0.0 {
            vecmath::axpy(pre, &n.w, out);
        }
    }
    Ok(())
}

/// Allocating variant of [`eval_field_into`].
pub fn eval_field(neurons: &[Neuron], x: &[f64]) -> Result<Vec<f64>> {
    let mut out = vec![0.0; x.len()];
    eval_field_into(neurons, x, &mut out)?;
    Ok(out)
}

/// One interval of constancy of the control.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Piece {
    pub t_start: f64,
    pub t_end: f64,
    pub neurons: Vec<Neuron>,
}

impl Piece {
    pub fn duration(&self) -> f64 {
        self.t_end - self.t_start
    }
}

/// A piecewise-constant control on `[0, horizon]`.
///
/// Pieces tile the horizon exactly: the first starts at 0.0, consecutive
/// boundaries are bitwise equal, durations are strictly positive, and every
/// piece holds exactly `width` neurons of dimension `dim`. Boundaries are
/// stored absolutely so the tiling check is exact rather than a sum of
/// durations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlSchedule {
    pub dim: usize,
    pub width: usize,
    pub horizon: f64,
    pub pieces: Vec<Piece>,
}

impl ControlSchedule {
    pub fn new(dim: usize, width: usize, pieces: Vec<Piece>) -> Result<Self> {
        let horizon = pieces
            .last()
            .map(|p| p.t_end)
            .ok_or_else(|| Error::invalid("schedule: no pieces"))?;
        let s = ControlSchedule {
            dim,
            width,
            horizon,
            pieces,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let reject = |reason: String| Err(Error::InvalidSchedule { reason });
        if self.dim == 0 || self.width == 0 {
            return reject("dim and width must be positive".into());
        }
        if self.pieces.is_empty() {
            return reject("no pieces".into());
        }
        if !(self.horizon > 0.0) || !self.horizon.is_finite() {
            return reject(format!("horizon {} is not positive", self.horizon));
        }
        if self.pieces[0].t_start != 0.0 {
            return reject(format!(
                "first piece starts at {}, not 0",
                self.pieces[0].t_start
            ));
        }
        if self.pieces.last().unwrap().t_end != self.horizon {
            return reject("last piece does not end at the horizon".into());
        }
        for (i, p) in self.pieces.iter().enumerate() {
            if !(p.t_end > p.t_start) {
                return reject(format!("piece {i} has non-positive duration"));
            }
            if !p.t_start.is_finite() || !p.t_end.is_finite() {
                return reject(format!("piece {i} has non-finite boundaries"));
            }
            if i + 1 < self.pieces.len() && self.pieces[i + 1].t_start != p.t_end {
                return reject(format!("pieces {i} and {} do not abut", i + 1));
            }
            if p.neurons.len() != self.width {
                return reject(format!(
                    "piece {i} has {} neurons, width is {}",
                    p.neurons.len(),
                    self.width
                ));
            }
            for (j, n) in p.neurons.iter().enumerate() {
                if n.dim() != self.dim {
                    return reject(format!(
                        "neuron {j} of piece {i} has dimension {}, schedule dimension is {}",
                        n.dim(),
                        self.dim
                    ));
                }
                if !vecmath::all_finite(&n.w) || !vecmath::all_finite(&n.a) || !n.b.is_finite() {
                    return reject(format!("neuron {j} of piece {i} has non-finite parameters"));
                }
            }
        }
        Ok(())
    }

    /// Number of switching times, i.e. interior piece boundaries.
    pub fn discontinuity_count(&self) -> usize {
        self.pieces.len() - 1
    }

    pub fn architecture(&self) -> ArchitectureSpec {
        ArchitectureSpec {
            depth_transitions: self.discontinuity_count(),
            width: self.width,
            dim: self.dim,
        }
    }

    /// Concatenate `self` with `next` in time; `next` is shifted to start at
    /// the current horizon. Width and dimension must agree.
    pub fn then(mut self, next: &ControlSchedule) -> Result<ControlSchedule> {
        if next.dim != self.dim || next.width != self.width {
            return Err(Error::invalid(
                "schedule concatenation: width or dimension mismatch",
            ));
        }
        let offset = self.horizon;
        for p in &next.pieces {
            self.pieces.push(Piece {
                t_start: offset + p.t_start,
                t_end: offset + p.t_end,
                neurons: p.neurons.clone(),
            });
        }
        // Re-anchor the boundaries so consecutive pieces stay bitwise equal.
        let mut t = offset;
        for p in self.pieces.iter_mut().skip_while(|p| p.t_start != offset) {
            p.t_start = t;
            t = offset + (p.t_end - offset);
            p.t_end = t;
        }
        self.horizon = self.pieces.last().unwrap().t_end;
        self.validate()?;
        Ok(self)
    }
}

/// A finite interpolation problem: steer each `x` onto its paired `y`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub dim: usize,
    pub pairs: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Dataset {
    pub fn new(dim: usize, pairs: Vec<(Vec<f64>, Vec<f64>)>) -> Result<Self> {
        let d = Dataset { dim, pairs };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::invalid("dataset: dimension must be positive"));
        }
        if self.pairs.is_empty() {
            return Err(Error::invalid("dataset: no pairs"));
        }
        for (i, (x, y)) in self.pairs.iter().enumerate() {
            if x.len() != self.dim || y.len() != self.dim {
                return Err(Error::Dimension {
                    context: "dataset pair",
                    expected: self.dim,
                    found: if x.len() != self.dim { x.len() } else { y.len() },
                });
            }
            if !vecmath::all_finite(x) || !vecmath::all_finite(y) {
                return Err(Error::NonFinite {
                    context: format!("dataset pair {i}"),
                });
            }
        }
        // Distinctness is exact: interpolation through a duplicated input (or
        // onto a duplicated target) is ill-posed for a flow, which is injective.
        for i in 0..self.pairs.len() {
            for j in (i + 1)..self.pairs.len() {
                if self.pairs[i].0 == self.pairs[j].0 {
                    return Err(Error::DuplicatePoint {
                        which: "inputs",
                        first: i,
                        second: j,
                    });
                }
                if self.pairs[i].1 == self.pairs[j].1 {
                    return Err(Error::DuplicatePoint {
                        which: "targets",
                        first: i,
                        second: j,
                    });
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn inputs(&self) -> impl Iterator<Item = &Vec<f64>> {
        self.pairs.iter().map(|(x, _)| x)
    }

    pub fn targets(&self) -> impl Iterator<Item = &Vec<f64>> {
        self.pairs.iter().map(|(_, y)| y)
    }
}

/// Depth/width summary of a schedule: `depth_transitions` is the number of
/// switching times L, so the control takes L + 1 values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    pub depth_transitions: usize,
    pub width: usize,
    pub dim: usize,
}

/// Parameter count `(L + 1) * p * (2d + 1)`: each of the `L + 1` control
/// values holds `p` neurons with `2d + 1` scalars each.
pub fn complexity(spec: &ArchitectureSpec) -> u64 {
    (spec.depth_transitions as u64 + 1) * spec.width as u64 * (2 * spec.dim as u64 + 1)
}

/// Both readings of the minimal single-neuron interpolation complexity,
/// surfaced verbatim in reports because they disagree.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MinimalComplexityFlag {
    pub computed: u64,
    pub quoted: u64,
    pub note: String,
}

pub fn minimal_complexity_flag(n_pairs: usize, dim: usize) -> MinimalComplexityFlag {
    let computed = complexity(&ArchitectureSpec {
        depth_transitions: 2 * n_pairs - 1,
        width: 1,
        dim,
    });
    let quoted = (4 * dim as u64 + 2) * (n_pairs as u64 + 1);
    MinimalComplexityFlag {
        computed,
        quoted,
        note: format!(
            "flagged: minimal single-neuron complexity from (L+1)*p*(2d+1) with L = 2N-1, p = 1 \
             evaluates to (4d+2)*N = {computed}; the quoted minimum (4d+2)*(N+1) = {quoted} \
             differs by one (2d+1) block; both values are reported"
        ),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn neuron(w: &[f64], a: &[f64], b: f64) -> Neuron {
        Neuron::new(w.to_vec(), a.to_vec(), b).unwrap()
    }

    #[test]
    fn eval_single_neuron_by_hand() {
        // a.x + b = 0*2 + 1*1 - 0.5 = 0.5, so the field is 0.5 * w.
        let n = neuron(&[1.0, 0.0], &[0.0, 1.0], -0.5);
        let v = eval_field(&[n], &[2.0, 1.0]).unwrap();
        assert_eq!(v, vec![0.5, 0.0]);
    }

    #[test]
    fn eval_sums_over_neurons() {
        let n1 = neuron(&[1.0, 0.0], &[1.0, 0.0], 0.0);
        let n2 = neuron(&[0.0, 2.0], &[1.0, 0.0], 1.0);
        // At x = (1, 5): first preactivation 1, second 2.
        let v = eval_field(&[n1, n2], &[1.0, 5.0]).unwrap();
        assert_eq!(v, vec![1.0, 4.0]);
    }

    #[test]
    fn inactive_region_gives_zero_field() {
        let n1 = neuron(&[1.0, 1.0], &[1.0, 0.0], -2.0);
        let n2 = neuron(&[3.0, -1.0], &[0.0, 1.0], -2.0);
        // Both preactivations are negative at the origin: a fixed point.
        let v = eval_field(&[n1, n2], &[0.0, 0.0]).unwrap();
        assert_eq!(v, vec![0.0, 0.0]);
    }

    #[test]
    fn eval_rejects_dimension_mismatch() {
        let n = neuron(&[1.0, 0.0], &[0.0, 1.0], 0.0);
        assert!(matches!(
            eval_field(&[n], &[1.0, 2.0, 3.0]),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn neuron_rejects_mismatched_vectors() {
        assert!(Neuron::new(vec![1.0], vec![1.0, 0.0], 0.0).is_err());
        assert!(Neuron::new(vec![f64::NAN], vec![1.0], 0.0).is_err());
    }

    #[test]
    fn complexity_matches_hand_counts() {
        // Five switches, one neuron, two dimensions: 6 * 1 * 5.
        let c = complexity(&ArchitectureSpec {
            depth_transitions: 5,
            width: 1,
            dim: 2,
        });
        assert_eq!(c, 30);
        // One switch, four neurons, three dimensions: 2 * 4 * 7.
        let c = complexity(&ArchitectureSpec {
            depth_transitions: 1,
            width: 4,
            dim: 3,
        });
        assert_eq!(c, 56);
    }

    #[test]
    fn minimal_complexity_flag_reports_both_values() {
        let f = minimal_complexity_flag(3, 2);
        assert_eq!(f.computed, 30);
        assert_eq!(f.quoted, 40);
        assert!(f.note.contains("30"));
        assert!(f.note.contains("40"));
    }

    #[test]
    fn schedule_tiling_is_validated() {
        let n = || neuron(&[1.0], &[1.0], 0.0);
        let ok = ControlSchedule::new(
            1,
            1,
            vec![
                Piece {
                    t_start: 0.0,
                    t_end: 0.5,
                    neurons: vec![n()],
                },
                Piece {
                    t_start: 0.5,
                    t_end: 1.0,
                    neurons: vec![n()],
                },
            ],
        )
        .unwrap();
        assert_eq!(ok.discontinuity_count(), 1);
        assert_eq!(ok.horizon, 1.0);

        // A gap between pieces is rejected.
        let gap = ControlSchedule::new(
            1,
            1,
            vec![
                Piece {
                    t_start: 0.0,
                    t_end: 0.5,
                    neurons: vec![n()],
                },
                Piece {
                    t_start: 0.5 + 1e-12,
                    t_end: 1.0,
                    neurons: vec![n()],
                },
            ],
        );
        assert!(gap.is_err());

        // Wrong width is rejected.
        let wide = ControlSchedule::new(
            1,
            2,
            vec![Piece {
                t_start: 0.0,
                t_end: 1.0,
                neurons: vec![n()],
            }],
        );
        assert!(wide.is_err());
    }

    #[test]
    fn schedule_concatenation_preserves_tiling() {
        let n = || neuron(&[1.0], &[1.0], 0.0);
        let a = ControlSchedule::new(
            1,
            1,
            vec![Piece {
                t_start: 0.0,
                t_end: 0.3,
                neurons: vec![n()],
            }],
        )
        .unwrap();
        let b = ControlSchedule::new(
            1,
            1,
            vec![Piece {
                t_start: 0.0,
                t_end: 0.7,
                neurons: vec![n()],
            }],
        )
        .unwrap();
        let c = a.then(&b).unwrap();
        assert_eq!(c.pieces.len(), 2);
        assert_eq!(c.horizon, 1.0);
        assert_eq!(c.pieces[1].t_start, c.pieces[0].t_end);
    }

    #[test]
    fn dataset_rejects_duplicates_naming_indices() {
        let dup = Dataset::new(
            2,
            vec![
                (vec![0.0, 0.0], vec![1.0, 0.0]),
                (vec![0.5, 0.5], vec![2.0, 0.0]),
                (vec![0.0, 0.0], vec![3.0, 0.0]),
            ],
        );
        match dup {
            Err(Error::DuplicatePoint {
                which,
                first,
                second,
            }) => {
                assert_eq!(which, "inputs");
                assert_eq!((first, second), (0, 2));
            }
            other => panic!("expected duplicate rejection, got {other:?}"),
        }
        let dup_y = Dataset::new(
            1,
            vec![(vec![0.0], vec![1.0]), (vec![2.0], vec![1.0])],
        );
        assert!(matches!(
            dup_y,
            Err(Error::DuplicatePoint { which: "targets", .. })
        ));
    }

    #[test]
    fn schedule_roundtrips_through_json_bit_exactly() {
        let s = ControlSchedule::new(
            2,
            1,
            vec![Piece {
                t_start: 0.0,
                t_end: 0.1 + 0.2, // deliberately not a round float
                neurons: vec![neuron(
                    &[1.0 / 3.0, -2.0 / 7.0],
                    &[0.1, 0.9999999999999999],
                    -1e-163,
                )],
            }],
        )
        .unwrap();
        let text = serde_json::to_string(&s).unwrap();
        let back: ControlSchedule = serde_json::from_str(&text).unwrap();
        assert_eq!(s, back);
        assert_eq!(s.pieces[0].neurons[0].b.to_bits(), back.pieces[0].neurons[0].b.to_bits());
    }

    proptest! {
        #[test]
        fn eval_is_positively_homogeneous_in_w(
            wx in -5.0f64..5.0, wy in -5.0f64..5.0,
            ax in -5.0f64..5.0, ay in -5.0f64..5.0,
            b in -5.0f64..5.0,
            px in -5.0f64..5.0, py in -5.0f64..5.0,
            c in 0.0f64..10.0,
        ) {
            let base = Neuron::new(vec![wx, wy], vec![ax, ay], b).unwrap();
            let scaled = Neuron::new(vec![c * wx, c * wy], vec![ax, ay], b).unwrap();
            let x = [px, py];
            let v = eval_field(&[base], &x).unwrap();
            let vc = eval_field(&[scaled], &x).unwrap();
            for k in 0..2 {
                prop_assert!((vc[k] - c * v[k]).abs() <= 1e-12 * (1.0 + v[k].abs() * c));
            }
        }

        #[test]
        fn single_neuron_lipschitz_bound(
            wx in -3.0f64..3.0, wy in -3.0f64..3.0,
            ax in -3.0f64..3.0, ay in -3.0f64..3.0,
            b in -3.0f64..3.0,
            px in -8.0f64..8.0, py in -8.0f64..8.0,
            qx in -8.0f64..8.0, qy in -8.0f64..8.0,
        ) {
            let n = Neuron::new(vec![wx, wy], vec![ax, ay], b).unwrap();
            let p = [px, py];
            let q = [qx, qy];
            let vp = eval_field(std::slice::from_ref(&n), &p).unwrap();
            let vq = eval_field(std::slice::from_ref(&n), &q).unwrap();
            let diff = crate::vecmath::dist(&vp, &vq);
            let lip = crate::vecmath::norm(&n.w) * crate::vecmath::norm(&n.a);
            let gap = crate::vecmath::dist(&p, &q);
            prop_assert!(diff <= lip * gap * (1.0 + 1e-9) + 1e-12);
        }
    }
}
