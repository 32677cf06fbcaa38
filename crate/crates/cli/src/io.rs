//! On-disk formats: datasets and schedules as JSON, point clouds and
//! trajectories as CSV, plus the seeded synthetic measure presets.
//!
//! JSON is written through `serde_json` with the `float_roundtrip` parser
//! feature, so every emitted number re-reads to the identical `f64` and a
//! canonical file survives a parse/serialize cycle byte for byte.

use std::fs;
use std::path::Path;

use clap::ValueEnum;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use nodectl_core::flow::{ParticleMeasure, Trajectory};
use nodectl_core::{ControlSchedule, Dataset};

use crate::CliError;

/// Dataset document layout: `{"dim": d, "pairs": [{"x": [...], "y": [...]}]}`.
#[derive(Debug, Serialize, Deserialize)]
struct DatasetFile {
    dim: usize,
    pairs: Vec<PairFile>,
}

#[derive(Debug, Serialize, Deserialize)]
struct PairFile {
    x: Vec<f64>,
    y: Vec<f64>,
}

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::parse(format!("{}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::parse(format!("{}: {e}", path.display())))
}

/// Reads and validates a dataset document. Arity and distinctness failures
/// name the offending pair index.
pub fn parse_dataset(path: &Path) -> Result<Dataset, CliError> {
    let text = read_text(path)?;
    let file: DatasetFile = serde_json::from_str(&text)
        .map_err(|e| CliError::parse(format!("{}: {e}", path.display())))?;
    for (i, pair) in file.pairs.iter().enumerate() {
        if pair.x.len() != file.dim || pair.y.len() != file.dim {
            return Err(CliError::parse(format!(
                "{}: pair {i} has arity x={} y={}, expected dim {}",
                path.display(),
                pair.x.len(),
                pair.y.len(),
                file.dim
            )));
        }
    }
    Dataset::new(
        file.dim,
        file.pairs.into_iter().map(|p| (p.x, p.y)).collect(),
    )
    .map_err(|e| CliError::parse(format!("{}: {e}", path.display())))
}

/// The canonical dataset serialization; `parse_dataset` of this text
/// re-serializes to the same bytes.
#[cfg(test)]
pub fn dataset_json(data: &Dataset) -> String {
    let file = DatasetFile {
        dim: data.dim,
        pairs: data
            .pairs
            .iter()
            .map(|(x, y)| PairFile {
                x: x.clone(),
                y: y.clone(),
            })
            .collect(),
    };
    let mut text = serde_json::to_string_pretty(&file).expect("dataset serialization");
    text.push('\n');
    text
}

pub fn save_schedule(path: &Path, schedule: &ControlSchedule) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(schedule).expect("schedule serialization");
    text.push('\n');
    write_text(path, &text)
}

/// Parses a schedule document without validating it; callers decide whether
/// a broken invariant is a parse error or a verification finding.
pub fn load_schedule(path: &Path) -> Result<ControlSchedule, CliError> {
    let text = read_text(path)?;
    serde_json::from_str(&text).map_err(|e| CliError::parse(format!("{}: {e}", path.display())))
}

/// Reads a CSV point cloud, one point per row. A single leading header row
/// is skipped; every other row must be all-numeric and of equal width.
pub fn load_points_csv(path: &Path) -> Result<Vec<Vec<f64>>, CliError> {
    let text = read_text(path)?;
    let mut points: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parsed: Result<Vec<f64>, _> = line.split(',').map(|f| f.trim().parse::<f64>()).collect();
        match parsed {
            Ok(row) => {
                if let Some(first) = points.first() {
                    if row.len() != first.len() {
                        return Err(CliError::parse(format!(
                            "{}: row {} has {} fields, expected {}",
                            path.display(),
                            lineno + 1,
                            row.len(),
                            first.len()
                        )));
                    }
                }
                if row.iter().any(|v| !v.is_finite()) {
                    return Err(CliError::parse(format!(
                        "{}: row {} contains a non-finite value",
                        path.display(),
                        lineno + 1
                    )));
                }
                points.push(row);
            }
            Err(e) if points.is_empty() && lineno == 0 => {
                log::debug!("skipping header row of {}: {e}", path.display());
            }
            Err(e) => {
                return Err(CliError::parse(format!(
                    "{}: row {}: {e}",
                    path.display(),
                    lineno + 1
                )));
            }
        }
    }
    if points.is_empty() {
        return Err(CliError::parse(format!("{}: no points", path.display())));
    }
    Ok(points)
}

/// Loads a CSV cloud as a uniformly weighted particle measure.
pub fn load_measure_csv(path: &Path) -> Result<ParticleMeasure, CliError> {
    let points = load_points_csv(path)?;
    let dim = points[0].len();
    ParticleMeasure::uniform(dim, points)
        .map_err(|e| CliError::parse(format!("{}: {e}", path.display())))
}

/// Built-in source measures for self-contained transport runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum PresetKind {
    /// Uniform on the unit cube.
    Uniform,
    /// One Gaussian centered in the cube, truncated to it.
    Gaussian,
    /// Three Gaussians with seeded centers and spreads, truncated to the cube.
    Mixture,
}

impl PresetKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PresetKind::Uniform => "uniform",
            PresetKind::Gaussian => "gaussian",
            PresetKind::Mixture => "mixture",
        }
    }
}

/// Draws `count` particles of the chosen preset in dimension `dim`,
/// deterministically in `seed`. Gaussian draws are rejection-truncated to
/// the unit cube, so supports are compact without clipping artifacts.
pub fn synthetic_measure(
    preset: PresetKind,
    dim: usize,
    count: usize,
    seed: u64,
) -> Result<ParticleMeasure, CliError> {
    if dim == 0 || count == 0 {
        return Err(CliError::parse(
            "synthetic measure needs positive dimension and particle count".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points: Vec<Vec<f64>> = match preset {
        PresetKind::Uniform => (0..count)
            .map(|_| (0..dim).map(|_| rng.gen::<f64>()).collect())
            .collect(),
        PresetKind::Gaussian => {
            let comp = GaussianComponent {
                center: vec![0.5; dim],
                sigma: 0.22,
            };
            (0..count).map(|_| comp.draw(&mut rng)).collect()
        }
        PresetKind::Mixture => {
            let comps: Vec<GaussianComponent> = (0..3)
                .map(|_| GaussianComponent {
                    center: (0..dim).map(|_| rng.gen_range(0.2..0.8)).collect(),
                    sigma: rng.gen_range(0.08..0.18),
                })
                .collect();
            let weights = [0.5, 0.3, 0.2];
            (0..count)
                .map(|_| {
                    let u: f64 = rng.gen();
                    let j = if u < weights[0] {
                        0
                    } else if u < weights[0] + weights[1] {
                        1
                    } else {
                        2
                    };
                    comps[j].draw(&mut rng)
                })
                .collect()
        }
    };
    ParticleMeasure::uniform(dim, points).map_err(|e| CliError::parse(e.to_string()))
}

struct GaussianComponent {
    center: Vec<f64>,
    sigma: f64,
}

impl GaussianComponent {
    /// One draw truncated to the unit cube, coordinate-wise rejection.
    fn draw(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        self.center
            .iter()
            .map(|&c| {
                let normal = Normal::new(c, self.sigma).expect("finite parameters");
                loop {
                    let v = normal.sample(rng);
                    if (0.0..=1.0).contains(&v) {
                        return v;
                    }
                }
            })
            .collect()
    }
}

/// Writes dense trajectories as `point_id,t,x_1..x_d` rows.
pub fn write_trajectories_csv(
    path: &Path,
    ids: &[usize],
    trajectories: &[Trajectory],
) -> Result<(), CliError> {
    let dim = trajectories
        .first()
        .map(|t| t.states[0].len())
        .unwrap_or(0);
    let mut text = String::from("point_id,t");
    for k in 1..=dim {
        text.push_str(&format!(",x_{k}"));
    }
    text.push('\n');
    for (id, traj) in ids.iter().zip(trajectories) {
        for (t, state) in traj.times.iter().zip(&traj.states) {
            text.push_str(&format!("{id},{t}"));
            for v in state {
                text.push_str(&format!(",{v}"));
            }
            text.push('\n');
        }
    }
    write_text(path, &text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dataset_round_trip_is_byte_identical() {
        let data = Dataset::new(
            2,
            vec![
                (vec![0.0, 0.25], vec![1.0, 1.5]),
                (vec![0.1, -0.5], vec![0.3, 2.0 / 3.0]),
            ],
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.json");
        let text = dataset_json(&data);
        fs::write(&path, &text).unwrap();
        let parsed = parse_dataset(&path).unwrap();
        assert_eq!(dataset_json(&parsed), text);
    }

    #[test]
    fn duplicate_rows_name_the_offenders() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dup.json");
        fs::write(
            &path,
            r#"{"dim":2,"pairs":[{"x":[0,0],"y":[1,1]},{"x":[0,0],"y":[2,2]}]}"#,
        )
        .unwrap();
        let err = parse_dataset(&path).unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("pairs 0 and 1"), "{msg}");
        assert!(msg.contains("inputs"), "{msg}");
    }

    #[test]
    fn wrong_arity_names_the_pair() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("arity.json");
        fs::write(
            &path,
            r#"{"dim":2,"pairs":[{"x":[0,0],"y":[1,1]},{"x":[0],"y":[2,2]}]}"#,
        )
        .unwrap();
        let err = parse_dataset(&path).unwrap_err();
        assert!(format!("{err}").contains("pair 1"), "{err}");
    }

    #[test]
    fn points_csv_skips_one_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pts.csv");
        fs::write(&path, "x_1,x_2\n0.5,1.0\n-2,0.125\n").unwrap();
        let pts = load_points_csv(&path).unwrap();
        assert_eq!(pts, vec![vec![0.5, 1.0], vec![-2.0, 0.125]]);
    }

    #[test]
    fn preset_clouds_are_deterministic_and_in_cube() {
        for preset in [PresetKind::Uniform, PresetKind::Gaussian, PresetKind::Mixture] {
            let a = synthetic_measure(preset, 2, 500, 9).unwrap();
            let b = synthetic_measure(preset, 2, 500, 9).unwrap();
            assert_eq!(a.points, b.points);
            assert!(a
                .points
                .iter()
                .all(|p| p.iter().all(|&v| (0.0..=1.0).contains(&v))));
        }
    }
}
