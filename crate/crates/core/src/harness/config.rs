//! Scenario files: JSON with an optional `extends` key naming a base file
//! (relative to the extending file) that is deep-merged underneath.
//!
//! Covariances are given either as a list (the diagonal) or as a list of rows.
//! Schedules are `{"segments": [[duration_s, value], ...], "cyclic": bool}`.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector, Matrix2, Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::fusion::{CiCost, FusionRule};
use crate::gaussian::StateKey;
use crate::linalg;
use crate::local_filter::{Dynamics, RobotId, StateSpec, TaskAllocation};
use crate::models::{
    ControlledTargetParams, DubinsParams, NcvTargetParams, Schedule, DEFAULT_MAX_LANDMARKS, DEFAULT_WHEELBASE,
};
use crate::network::Topology;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    pub dt: f64,
    pub steps: usize,
    #[serde(default = "default_fusion")]
    pub fusion: FusionRule,
    #[serde(default)]
    pub ci_cost: CiCost,
    #[serde(default = "default_delivery")]
    pub delivery_probability: f64,
    #[serde(default = "default_mc_runs")]
    pub mc_runs: usize,
    #[serde(default)]
    pub seed: u64,
    /// Conservative re-factorization of the local beliefs.
    #[serde(default = "default_true")]
    pub refactor: bool,
    #[serde(default)]
    pub landmarks: LandmarkConfig,
    pub robots: Vec<RobotConfig>,
    pub targets: Vec<TargetConfig>,
    pub topology: TopologyConfig,
}

fn default_fusion() -> FusionRule {
    FusionRule::HsCf
}

fn default_delivery() -> f64 {
    1.0
}

fn default_mc_runs() -> usize {
    50
}

fn default_true() -> bool {
    true
}

fn default_wheelbase() -> f64 {
    DEFAULT_WHEELBASE
}

fn default_max_landmarks() -> usize {
    DEFAULT_MAX_LANDMARKS
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LandmarkConfig {
    Points(Vec<[f64; 2]>),
    Grid { grid: GridConfig },
}

impl Default for LandmarkConfig {
    fn default() -> Self {
        LandmarkConfig::Points(Vec::new())
    }
}

/// `count[0] x count[1]` landmarks evenly spaced over the box `[min, max]`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub min: [f64; 2],
    pub max: [f64; 2],
    pub count: [usize; 2],
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CovSpec {
    Diag(Vec<f64>),
    Full(Vec<Vec<f64>>),
}

impl CovSpec {
    fn to_matrix(&self) -> DMatrix<f64> {
        match self {
            CovSpec::Diag(d) => DMatrix::from_diagonal(&DVector::from_column_slice(d)),
            CovSpec::Full(rows) => {
                let n = rows.len();
                DMatrix::from_fn(n, n, |r, c| rows[r].get(c).copied().unwrap_or(f64::NAN))
            }
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig<T> {
    pub segments: Vec<(f64, T)>,
    #[serde(default)]
    pub cyclic: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RobotConfig {
    pub id: RobotId,
    #[serde(default)]
    pub pose: Option<PoseConfig>,
    #[serde(default)]
    pub bias: Option<PriorConfig>,
    pub sensor: SensorConfig,
    /// Targets in this robot's task.
    pub targets: Vec<u32>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseConfig {
    #[serde(default = "default_wheelbase")]
    pub wheelbase: f64,
    /// Covariance of the additive rate noise.
    pub process_noise: CovSpec,
    /// (v m/s, steering rad).
    pub controls: ScheduleConfig<[f64; 2]>,
    pub initial: Vec<f64>,
    pub prior_variance: CovSpec,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorConfig {
    pub initial: Vec<f64>,
    pub prior_variance: CovSpec,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum SensorConfig {
    /// Range and bearing to the nearest landmarks and to every task target.
    RangeBearing {
        noise: CovSpec,
        #[serde(default = "default_max_landmarks")]
        max_landmarks: usize,
    },
    /// Relative target position, shifted by the robot's bias when it has one;
    /// a robot with a bias also measures the bias alone every tick.
    Position { noise: CovSpec },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetConfig {
    pub id: u32,
    pub model: TargetModelConfig,
    /// How the true target moves; defaults to the filter model.
    #[serde(default)]
    pub truth: Option<TruthConfig>,
    pub initial: Vec<f64>,
    pub prior_variance: CovSpec,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TargetModelConfig {
    /// Position plus a known per-step displacement.
    Controlled {
        process_noise: CovSpec,
        controls: ScheduleConfig<[f64; 2]>,
    },
    /// Nearly constant velocity, state [x, vx, y, vy].
    Ncv { q: f64 },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TruthConfig {
    /// Constant-velocity target whose velocity vector rotates at a scheduled
    /// rate (rad/s, negative turns right), plus the model's process noise.
    Maneuver { turn_rate: ScheduleConfig<f64> },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologyConfig {
    pub edges: Vec<[RobotId; 2]>,
}

/// Deep merge: objects merge key by key, anything else in `over` replaces `base`.
fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn config_error(path: &Path, field: impl Into<String>, reason: impl Into<String>) -> Error {
    Error::Config {
        path: path.display().to_string(),
        field: field.into(),
        reason: reason.into(),
    }
}

fn load_value(path: &Path, chain: &mut Vec<PathBuf>) -> Result<Value> {
    let canon = path.canonicalize().unwrap_or_else(|_| path.to_path_buf());
    if chain.contains(&canon) {
        return Err(config_error(path, "extends", "circular extends chain"));
    }
    chain.push(canon);
    let text = std::fs::read_to_string(path).map_err(|e| config_error(path, "<file>", e.to_string()))?;
    let mut value: Value = serde_json::from_str(&text).map_err(|e| config_error(path, "<document>", e.to_string()))?;
    let Some(obj) = value.as_object_mut() else {
        return Err(config_error(path, "<document>", "expected a JSON object"));
    };
    match obj.remove("extends") {
        None => Ok(value),
        Some(Value::String(base)) => {
            let base_path = path.parent().unwrap_or(Path::new(".")).join(base);
            let mut merged = load_value(&base_path, chain)?;
            merge(&mut merged, value);
            Ok(merged)
        }
        Some(_) => Err(config_error(path, "extends", "expected a file name")),
    }
}

/// Parse a resolved JSON document into a config.
pub fn parse_config(value: Value, path: &Path) -> Result<ScenarioConfig> {
    serde_path_to_error::deserialize(value).map_err(|e| {
        let at = e.path().to_string();
        let inner = e.into_inner().to_string();
        let field = match inner.split('`').nth(1) {
            Some(name) if inner.starts_with("missing field") => {
                if at == "." {
                    name.to_string()
                } else {
                    format!("{at}.{name}")
                }
            }
            _ => at,
        };
        config_error(path, field, inner)
    })
}

/// Read a scenario file, following `extends`.
pub fn load_config(path: &Path) -> Result<ScenarioConfig> {
    let value = load_value(path, &mut Vec::new())?;
    parse_config(value, path)
}

/// Load and validate a scenario file.
pub fn load_scenario(path: &Path) -> Result<Scenario> {
    Scenario::from_config(&load_config(path)?, path)
}

/// How a robot senses.
#[derive(Clone, Debug, PartialEq)]
pub enum Sensor {
    RangeBearing { noise: Matrix2<f64>, max_landmarks: usize },
    Position { noise: Matrix2<f64> },
}

#[derive(Clone, Debug)]
pub struct RobotSetup {
    pub id: RobotId,
    pub pose: Option<StateSetup>,
    pub bias: Option<StateSetup>,
    pub sensor: Sensor,
    pub targets: Vec<u32>,
}

#[derive(Clone, Debug)]
pub enum TargetTruth {
    Model,
    Maneuver { turn_rate: Schedule<f64> },
}

#[derive(Clone, Debug)]
pub struct TargetSetup {
    pub id: u32,
    pub state: StateSetup,
    pub truth: TargetTruth,
}

/// A state's dynamics and its prior: the filter starts at `initial` with
/// covariance `prior_cov`, the truth starts at a draw from that prior.
#[derive(Clone, Debug)]
pub struct StateSetup {
    pub key: StateKey,
    pub dynamics: Dynamics,
    pub initial: DVector<f64>,
    pub prior_cov: DMatrix<f64>,
}

/// Validated scenario.
#[derive(Clone, Debug)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub landmarks: Vec<Vector2<f64>>,
    pub robots: Vec<RobotSetup>,
    pub targets: Vec<TargetSetup>,
    pub topology: Topology,
    pub allocation: TaskAllocation,
}

fn schedule<T: Clone>(s: &ScheduleConfig<T>) -> Schedule<T> {
    Schedule {
        segments: s.segments.clone(),
        cyclic: s.cyclic,
    }
}

struct Checker<'a> {
    path: &'a Path,
}

impl Checker<'_> {
    fn err(&self, field: impl Into<String>, reason: impl Into<String>) -> Error {
        config_error(self.path, field, reason)
    }

    fn cov(&self, field: &str, spec: &CovSpec, dim: usize) -> Result<DMatrix<f64>> {
        let m = spec.to_matrix();
        if m.nrows() != dim || m.iter().any(|x| !x.is_finite()) {
            return Err(self.err(field, format!("expected a {dim}x{dim} covariance")));
        }
        if (&m - m.transpose()).amax() > 1e-12 * (1.0 + m.amax()) {
            return Err(self.err(field, "covariance is not symmetric"));
        }
        if !linalg::is_pd(&m) {
            return Err(self.err(field, "covariance is not positive definite"));
        }
        Ok(m)
    }

    fn noise_psd(&self, field: &str, spec: &CovSpec, dim: usize) -> Result<DMatrix<f64>> {
        let m = spec.to_matrix();
        if m.nrows() != dim || m.iter().any(|x| !x.is_finite()) || !linalg::is_psd(&m) {
            return Err(self.err(field, format!("expected a {dim}x{dim} PSD covariance")));
        }
        Ok(m)
    }

    fn vector(&self, field: &str, v: &[f64], dim: usize) -> Result<DVector<f64>> {
        if v.len() != dim || v.iter().any(|x| !x.is_finite()) {
            return Err(self.err(field, format!("expected {dim} finite numbers")));
        }
        Ok(DVector::from_column_slice(v))
    }

    fn schedule<T>(&self, field: &str, s: &ScheduleConfig<T>) -> Result<()> {
        if s.segments.is_empty() {
            return Err(self.err(field, "schedule needs at least one segment"));
        }
        if s.segments.iter().any(|(d, _)| !(d.is_finite() && *d > 0.0)) {
            return Err(self.err(field, "segment durations must be positive"));
        }
        Ok(())
    }
}

fn to_m2(m: &DMatrix<f64>) -> Matrix2<f64> {
    Matrix2::from_fn(|r, c| m[(r, c)])
}

impl Scenario {
    pub fn from_config(cfg: &ScenarioConfig, path: &Path) -> Result<Scenario> {
        let ck = Checker { path };
        if !(cfg.dt.is_finite() && cfg.dt > 0.0) {
            return Err(ck.err("dt", "must be positive"));
        }
        if cfg.steps == 0 {
            return Err(ck.err("steps", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&cfg.delivery_probability) {
            return Err(ck.err("delivery_probability", "must lie in [0, 1]"));
        }
        if cfg.mc_runs == 0 {
            return Err(ck.err("mc_runs", "must be at least 1"));
        }

        let landmarks = match &cfg.landmarks {
            LandmarkConfig::Points(p) => p.iter().map(|q| Vector2::new(q[0], q[1])).collect(),
            LandmarkConfig::Grid { grid } => {
                let mut out = Vec::new();
                for iy in 0..grid.count[1] {
                    for ix in 0..grid.count[0] {
                        let f = |i: usize, n: usize| if n > 1 { i as f64 / (n - 1) as f64 } else { 0.5 };
                        out.push(Vector2::new(
                            grid.min[0] + (grid.max[0] - grid.min[0]) * f(ix, grid.count[0]),
                            grid.min[1] + (grid.max[1] - grid.min[1]) * f(iy, grid.count[1]),
                        ));
                    }
                }
                out
            }
        };

        let mut targets = Vec::new();
        let mut target_ids = BTreeSet::new();
        for (n, t) in cfg.targets.iter().enumerate() {
            let at = |f: &str| format!("targets[{n}].{f}");
            if !target_ids.insert(t.id) {
                return Err(ck.err(at("id"), format!("duplicate target id {}", t.id)));
            }
            let dynamics = match &t.model {
                TargetModelConfig::Controlled { process_noise, controls } => {
                    ck.schedule(&at("model.controls"), controls)?;
                    Dynamics::ControlledTarget {
                        params: ControlledTargetParams {
                            process_noise: to_m2(&ck.cov(&at("model.process_noise"), process_noise, 2)?),
                        },
                        dt: cfg.dt,
                        controls: schedule(controls),
                    }
                }
                TargetModelConfig::Ncv { q } => {
                    if !(q.is_finite() && *q > 0.0) {
                        return Err(ck.err(at("model.q"), "must be positive"));
                    }
                    Dynamics::Ncv(NcvTargetParams { q: *q, dt: cfg.dt })
                }
            };
            let dim = dynamics.dim();
            let truth = match &t.truth {
                None => TargetTruth::Model,
                Some(TruthConfig::Maneuver { turn_rate }) => {
                    if !matches!(dynamics, Dynamics::Ncv(_)) {
                        return Err(ck.err(at("truth"), "maneuvering truth needs an ncv model"));
                    }
                    ck.schedule(&at("truth.turn_rate"), turn_rate)?;
                    TargetTruth::Maneuver {
                        turn_rate: schedule(turn_rate),
                    }
                }
            };
            targets.push(TargetSetup {
                id: t.id,
                state: StateSetup {
                    key: StateKey::target(t.id),
                    initial: ck.vector(&at("initial"), &t.initial, dim)?,
                    prior_cov: ck.cov(&at("prior_variance"), &t.prior_variance, dim)?,
                    dynamics,
                },
                truth,
            });
        }

        let mut robots = Vec::new();
        let mut robot_ids = BTreeSet::new();
        let mut tasks = std::collections::BTreeMap::new();
        for (n, r) in cfg.robots.iter().enumerate() {
            let at = |f: &str| format!("robots[{n}].{f}");
            if !robot_ids.insert(r.id) {
                return Err(ck.err(at("id"), format!("duplicate robot id {}", r.id)));
            }
            let pose = match &r.pose {
                None => None,
                Some(p) => {
                    if !(p.wheelbase.is_finite() && p.wheelbase > 0.0) {
                        return Err(ck.err(at("pose.wheelbase"), "must be positive"));
                    }
                    ck.schedule(&at("pose.controls"), &p.controls)?;
                    let q = ck.noise_psd(&at("pose.process_noise"), &p.process_noise, 3)?;
                    let controls = Schedule {
                        segments: p.controls.segments.iter().map(|(d, u)| (*d, (u[0], u[1]))).collect(),
                        cyclic: p.controls.cyclic,
                    };
                    Some(StateSetup {
                        key: StateKey::pose(r.id),
                        dynamics: Dynamics::Dubins {
                            params: DubinsParams {
                                wheelbase: p.wheelbase,
                                process_noise: Matrix3::from_fn(|i, j| q[(i, j)]),
                                dt: cfg.dt,
                            },
                            controls,
                        },
                        initial: ck.vector(&at("pose.initial"), &p.initial, 3)?,
                        prior_cov: ck.cov(&at("pose.prior_variance"), &p.prior_variance, 3)?,
                    })
                }
            };
            let bias = match &r.bias {
                None => None,
                Some(b) => Some(StateSetup {
                    key: StateKey::bias(r.id),
                    dynamics: Dynamics::Static { dim: 2 },
                    initial: ck.vector(&at("bias.initial"), &b.initial, 2)?,
                    prior_cov: ck.cov(&at("bias.prior_variance"), &b.prior_variance, 2)?,
                }),
            };
            let sensor = match &r.sensor {
                SensorConfig::RangeBearing { noise, max_landmarks } => {
                    if pose.is_none() {
                        return Err(ck.err(at("sensor"), "range-bearing sensing needs a pose"));
                    }
                    Sensor::RangeBearing {
                        noise: to_m2(&ck.cov(&at("sensor.noise"), noise, 2)?),
                        max_landmarks: *max_landmarks,
                    }
                }
                SensorConfig::Position { noise } => Sensor::Position {
                    noise: to_m2(&ck.cov(&at("sensor.noise"), noise, 2)?),
                },
            };
            let mut states = Vec::new();
            for s in pose.iter().chain(bias.iter()) {
                states.push(StateSpec {
                    key: s.key,
                    dim: s.initial.len(),
                });
            }
            let mut seen = BTreeSet::new();
            for (k, tid) in r.targets.iter().enumerate() {
                let Some(t) = targets.iter().find(|t| t.id == *tid) else {
                    return Err(ck.err(format!("robots[{n}].targets[{k}]"), format!("unknown target {tid}")));
                };
                if !seen.insert(*tid) {
                    return Err(ck.err(format!("robots[{n}].targets[{k}]"), format!("target {tid} listed twice")));
                }
                states.push(StateSpec {
                    key: t.state.key,
                    dim: t.state.initial.len(),
                });
            }
            if states.is_empty() {
                return Err(ck.err(at("targets"), "robot estimates nothing"));
            }
            tasks.insert(r.id, states);
            robots.push(RobotSetup {
                id: r.id,
                pose,
                bias,
                sensor,
                targets: r.targets.clone(),
            });
        }
        if robots.is_empty() {
            return Err(ck.err("robots", "at least one robot is required"));
        }
        for (n, t) in targets.iter().enumerate() {
            if !robots.iter().any(|r| r.targets.contains(&t.id)) {
                return Err(ck.err(format!("targets[{n}]"), format!("target {} is not in any robot's task", t.id)));
            }
        }

        let edges: Vec<(RobotId, RobotId)> = cfg.topology.edges.iter().map(|e| (e[0], e[1])).collect();
        let topology =
            Topology::new(robot_ids.iter().copied(), &edges).map_err(|e| ck.err("topology.edges", e.to_string()))?;
        topology
            .check_rule(cfg.fusion)
            .map_err(|e| ck.err("topology.edges", e.to_string()))?;
        let allocation = TaskAllocation::new(tasks).map_err(|e| ck.err("robots", e.to_string()))?;
        allocation
            .validate(topology.edges())
            .map_err(|e| ck.err("robots", e.to_string()))?;

        Ok(Scenario {
            config: cfg.clone(),
            landmarks,
            robots,
            targets,
            topology,
            allocation,
        })
    }

    pub fn robot(&self, id: RobotId) -> Option<&RobotSetup> {
        self.robots.iter().find(|r| r.id == id)
    }

    /// Every estimated state, in canonical order.
    pub fn states(&self) -> Vec<&StateSetup> {
        let mut out: Vec<&StateSetup> = self
            .robots
            .iter()
            .flat_map(|r| r.pose.iter().chain(r.bias.iter()))
            .chain(self.targets.iter().map(|t| &t.state))
            .collect();
        out.sort_by_key(|s| s.key);
        out
    }

    pub fn state(&self, key: StateKey) -> Option<&StateSetup> {
        self.states().into_iter().find(|s| s.key == key)
    }

    /// Dimension of the union of all robots' tasks.
    pub fn global_dim(&self) -> usize {
        self.allocation.global_states().iter().map(|s| s.dim).sum()
    }

    pub fn models(&self) -> crate::local_filter::ModelSet {
        self.states().into_iter().map(|s| (s.key, s.dynamics.clone())).collect()
    }

    /// Apply command-line overrides and re-validate.
    pub fn with_overrides(
        &self,
        fusion: Option<FusionRule>,
        delivery_probability: Option<f64>,
        mc_runs: Option<usize>,
        seed: Option<u64>,
    ) -> Result<Scenario> {
        let mut cfg = self.config.clone();
        if let Some(f) = fusion {
            cfg.fusion = f;
        }
        if let Some(p) = delivery_probability {
            cfg.delivery_probability = p;
        }
        if let Some(n) = mc_runs {
            cfg.mc_runs = n;
        }
        if let Some(s) = seed {
            cfg.seed = s;
        }
        Scenario::from_config(&cfg, Path::new("<command line>"))
    }
}

/// Pose initial value as a fixed-size vector.
pub(crate) fn pose3(v: &DVector<f64>) -> Vector3<f64> {
    Vector3::new(v[0], v[1], v[2])
}
