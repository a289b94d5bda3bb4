//! Ground-truth trajectories and sensor data for one Monte Carlo run.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, Matrix2, Vector2, Vector3, Vector4};
use rand::Rng;
use rand_distr::StandardNormal;

use super::config::{pose3, Scenario, Sensor, TargetTruth};
use crate::error::{Error, Result};
use crate::gaussian::StateKey;
use crate::local_filter::{Dynamics, Measurement, ObservedPoint, RobotId};
use crate::models::{self, target_position_indices};
use crate::network::stream_rng;

/// Draw from `N(0, cov)` for a PSD `cov` via its symmetric square root.
pub fn sample_gaussian<R: Rng>(rng: &mut R, cov: &DMatrix<f64>) -> DVector<f64> {
    let n = cov.nrows();
    let z = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let eig = crate::linalg::symmetrize(cov).symmetric_eigen();
    let sqrt_vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&sqrt_vals) * eig.eigenvectors.transpose() * z
}

/// Truth and measurements for one run.
#[derive(Clone, Debug)]
pub struct Truth {
    /// `states[k]` is the true value of every state at tick `k`, for `k = 0..=steps`.
    pub states: Vec<BTreeMap<StateKey, DVector<f64>>>,
    /// `measurements[k - 1]` holds each robot's measurements at tick `k`.
    pub measurements: Vec<BTreeMap<RobotId, Vec<Measurement>>>,
}

impl Truth {
    /// True values of `keys` at tick `k`, stacked.
    pub fn stacked(&self, k: usize, keys: &[StateKey]) -> DVector<f64> {
        let parts: Vec<&DVector<f64>> = keys.iter().map(|key| &self.states[k][key]).collect();
        let n = parts.iter().map(|p| p.len()).sum();
        let mut out = DVector::zeros(n);
        let mut off = 0;
        for p in parts {
            out.rows_mut(off, p.len()).copy_from(p);
            off += p.len();
        }
        out
    }
}

fn rotate_velocity(x: &DVector<f64>, angle: f64) -> DVector<f64> {
    let (s, c) = angle.sin_cos();
    let (vx, vy) = (x[1], x[3]);
    DVector::from_vec(vec![x[0], c * vx - s * vy, x[2], s * vx + c * vy])
}

fn step_truth(
    dynamics: &Dynamics,
    truth: Option<&TargetTruth>,
    x: &DVector<f64>,
    tick: i64,
    rng: &mut impl Rng,
) -> Result<DVector<f64>> {
    match dynamics {
        Dynamics::Dubins { params, controls } => {
            let (v, phi) = controls.value_at(tick as f64 * params.dt);
            let w = sample_gaussian(rng, &crate::local_filter::to_dmat(&params.process_noise));
            let next = models::dubins_step(&pose3(x), v, phi, params, &Vector3::new(w[0], w[1], w[2]));
            Ok(DVector::from_column_slice(next.as_slice()))
        }
        Dynamics::ControlledTarget { params, dt, controls } => {
            let u = controls.value_at(tick as f64 * dt);
            let w = sample_gaussian(rng, &crate::local_filter::to_dmat(&params.process_noise));
            let next = models::controlled_target_step(&Vector2::new(x[0], x[1]), &Vector2::from(u), &Vector2::new(w[0], w[1]));
            Ok(DVector::from_column_slice(next.as_slice()))
        }
        Dynamics::Ncv(p) => {
            let x = match truth {
                Some(TargetTruth::Maneuver { turn_rate }) => {
                    rotate_velocity(x, turn_rate.value_at(tick as f64 * p.dt) * p.dt)
                }
                _ => x.clone(),
            };
            let (_, q) = p.transition_matrices();
            let w = sample_gaussian(rng, &crate::local_filter::to_dmat(&q));
            let next = p.step(&Vector4::new(x[0], x[1], x[2], x[3]), &Vector4::new(w[0], w[1], w[2], w[3]));
            Ok(DVector::from_column_slice(next.as_slice()))
        }
        Dynamics::Static { .. } => Ok(x.clone()),
        Dynamics::Linear { f, q } => Ok(f * x + sample_gaussian(rng, q)),
    }
}

fn noise2(rng: &mut impl Rng, r: &Matrix2<f64>) -> Vector2<f64> {
    let w = sample_gaussian(rng, &crate::local_filter::to_dmat(r));
    Vector2::new(w[0], w[1])
}

fn position_of(x: &DVector<f64>) -> Vector2<f64> {
    let [ix, iy] = target_position_indices(x.len());
    Vector2::new(x[ix], x[iy])
}

/// Simulate run `run`: initial truth drawn from each state's prior, then
/// `steps` ticks of motion and sensing.
pub fn simulate(scn: &Scenario, run: u64) -> Result<Truth> {
    let seed = scn.config.seed;
    let steps = scn.config.steps;
    let mut current = BTreeMap::new();
    for s in scn.states() {
        let mut rng = stream_rng(seed, run, &format!("init/{}", s.key));
        current.insert(s.key, &s.initial + sample_gaussian(&mut rng, &s.prior_cov));
    }
    let mut motion_rngs: BTreeMap<StateKey, _> = scn
        .states()
        .iter()
        .map(|s| (s.key, stream_rng(seed, run, &format!("truth/{}", s.key))))
        .collect();
    let mut sensor_rngs: BTreeMap<RobotId, _> = scn
        .robots
        .iter()
        .map(|r| (r.id, stream_rng(seed, run, &format!("meas/r{}", r.id))))
        .collect();
    let truth_model: BTreeMap<StateKey, &TargetTruth> =
        scn.targets.iter().map(|t| (t.state.key, &t.truth)).collect();

    let mut states = Vec::with_capacity(steps + 1);
    let mut measurements = Vec::with_capacity(steps);
    states.push(current.clone());
    for k in 1..=steps {
        let mut next = BTreeMap::new();
        for s in scn.states() {
            let rng = motion_rngs.get_mut(&s.key).expect("stream per state");
            let x = step_truth(&s.dynamics, truth_model.get(&s.key).copied(), &current[&s.key], k as i64 - 1, rng)?;
            next.insert(s.key, x);
        }
        current = next;

        let mut tick_meas = BTreeMap::new();
        for r in &scn.robots {
            let rng = sensor_rngs.get_mut(&r.id).expect("stream per robot");
            let mut out = Vec::new();
            match &r.sensor {
                Sensor::RangeBearing { noise, max_landmarks } => {
                    let pose_key = StateKey::pose(r.id);
                    let pose = pose3(&current[&pose_key]);
                    let sensor = models::RangeBearingSensor {
                        noise: *noise,
                        landmarks: scn.landmarks.clone(),
                        max_landmarks: *max_landmarks,
                    };
                    let mut points: Vec<(ObservedPoint, Vector2<f64>)> = sensor
                        .nearest_landmarks(&Vector2::new(pose[0], pose[1]))
                        .into_iter()
                        .map(|i| (ObservedPoint::Landmark(scn.landmarks[i]), scn.landmarks[i]))
                        .collect();
                    for tid in &r.targets {
                        let key = StateKey::target(*tid);
                        points.push((ObservedPoint::Target(key), position_of(&current[&key])));
                    }
                    for (point, p) in points {
                        let rb = match models::range_bearing_predict(&pose, &p) {
                            Ok(rb) => rb,
                            Err(Error::DegenerateGeometry(_)) => continue,
                            Err(e) => return Err(e),
                        };
                        let v = noise2(rng, noise);
                        out.push(Measurement::RangeBearing {
                            pose: pose_key,
                            point,
                            z: Vector2::new(rb.range + v[0], models::wrap_angle(rb.bearing + v[1])),
                            noise: *noise,
                        });
                    }
                }
                Sensor::Position { noise } => {
                    let bias_key = r.bias.as_ref().map(|b| b.key);
                    let bias = bias_key.map(|k| position_of(&current[&k])).unwrap_or_else(Vector2::zeros);
                    let r_dyn = crate::local_filter::to_dmat(noise);
                    if let Some(bk) = bias_key {
                        let v = noise2(rng, noise);
                        let z = models::bias_only_measure(&bias, &v);
                        out.push(Measurement::Linear {
                            terms: vec![(bk, DMatrix::identity(2, 2))],
                            z: DVector::from_column_slice(z.as_slice()),
                            noise: r_dyn.clone(),
                        });
                    }
                    for tid in &r.targets {
                        let key = StateKey::target(*tid);
                        let x = &current[&key];
                        let v = noise2(rng, noise);
                        let z = models::biased_position_measure(&position_of(x), &bias, &v);
                        let [ix, iy] = target_position_indices(x.len());
                        let mut h = DMatrix::zeros(2, x.len());
                        h[(0, ix)] = 1.0;
                        h[(1, iy)] = 1.0;
                        let mut terms = vec![(key, h)];
                        if let Some(bk) = bias_key {
                            terms.push((bk, DMatrix::identity(2, 2)));
                        }
                        out.push(Measurement::Linear {
                            terms,
                            z: DVector::from_column_slice(z.as_slice()),
                            noise: r_dyn.clone(),
                        });
                    }
                }
            }
            tick_meas.insert(r.id, out);
        }
        measurements.push(tick_meas);
        states.push(current.clone());
    }
    Ok(Truth { states, measurements })
}
