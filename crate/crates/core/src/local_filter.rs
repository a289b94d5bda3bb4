//! Per-robot recursive extended information filter over the robot's task states.
//!
//! One step is predict, marginalize the past slice (after conservative
//! re-factorization), then fold in local measurements. Fusion with neighbors
//! is done separately by [`crate::fusion`].

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector, Matrix2, Vector2, Vector3};

use crate::error::{Error, Result};
use crate::factor_graph::{FactorGraph, Provenance};
use crate::gaussian::{InfoForm, MomentForm, StateKey, VarKind, VariableId, VariableOrdering};
use crate::linalg;
use crate::models::{self, ControlledTargetParams, DubinsParams, NcvTargetParams, Schedule};

pub type RobotId = u32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct StateSpec {
    pub key: StateKey,
    pub dim: usize,
}

impl StateSpec {
    pub fn var(&self, time: i64) -> VariableId {
        VariableId::new(self.key, time, self.dim)
    }
}

/// Which states each robot estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskAllocation {
    tasks: BTreeMap<RobotId, Vec<StateSpec>>,
}

impl TaskAllocation {
    pub fn new(tasks: BTreeMap<RobotId, Vec<StateSpec>>) -> Result<Self> {
        let mut dims: BTreeMap<StateKey, usize> = BTreeMap::new();
        let mut tasks = tasks;
        for (robot, states) in tasks.iter_mut() {
            states.sort();
            let before = states.len();
            states.dedup_by_key(|s| s.key);
            if states.len() != before {
                return Err(Error::TaskAllocation(format!("robot {} lists a state twice", robot)));
            }
            for s in states.iter() {
                if s.dim == 0 {
                    return Err(Error::TaskAllocation(format!("state {} has zero dimension", s.key)));
                }
                if let Some(d) = dims.insert(s.key, s.dim) {
                    if d != s.dim {
                        return Err(Error::TaskAllocation(format!(
                            "state {} has inconsistent dimensions {} and {}",
                            s.key, d, s.dim
                        )));
                    }
                }
            }
        }
        Ok(TaskAllocation { tasks })
    }

    pub fn robots(&self) -> impl Iterator<Item = RobotId> + '_ {
        self.tasks.keys().copied()
    }

    pub fn states(&self, robot: RobotId) -> &[StateSpec] {
        self.tasks.get(&robot).map(|v| v.as_slice()).unwrap_or(&[])
    }

    pub fn dim(&self, robot: RobotId) -> usize {
        self.states(robot).iter().map(|s| s.dim).sum()
    }

    /// States shared by robots `i` and `j`, canonically ordered.
    pub fn common(&self, i: RobotId, j: RobotId) -> Vec<StateSpec> {
        let other: BTreeSet<StateKey> = self.states(j).iter().map(|s| s.key).collect();
        self.states(i)
            .iter()
            .filter(|s| other.contains(&s.key))
            .copied()
            .collect()
    }

    /// States of `robot` that no other robot estimates.
    pub fn local(&self, robot: RobotId) -> Vec<StateSpec> {
        self.states(robot)
            .iter()
            .filter(|s| {
                self.tasks
                    .iter()
                    .all(|(r, st)| *r == robot || !st.iter().any(|o| o.key == s.key))
            })
            .copied()
            .collect()
    }

    /// Union of all robots' states.
    pub fn global_states(&self) -> Vec<StateSpec> {
        let set: BTreeSet<StateSpec> = self.tasks.values().flatten().copied().collect();
        set.into_iter().collect()
    }

    /// Check the allocation against a communication graph: robot poses and
    /// biases are owned by their robot only, and every edge shares states.
    pub fn validate(&self, edges: &[(RobotId, RobotId)]) -> Result<()> {
        for (robot, states) in &self.tasks {
            for s in states {
                if matches!(s.key.kind, VarKind::RobotPose | VarKind::BiasState) {
                    let holders: Vec<RobotId> = self
                        .tasks
                        .iter()
                        .filter(|(_, st)| st.iter().any(|o| o.key == s.key))
                        .map(|(r, _)| *r)
                        .collect();
                    if holders != [*robot] {
                        return Err(Error::TaskAllocation(format!(
                            "local state {} is estimated by robots {:?}",
                            s.key, holders
                        )));
                    }
                }
            }
        }
        for &(i, j) in edges {
            if !self.tasks.contains_key(&i) || !self.tasks.contains_key(&j) {
                return Err(Error::TaskAllocation(format!("edge ({}, {}) names an unknown robot", i, j)));
            }
            if self.common(i, j).is_empty() {
                return Err(Error::TaskAllocation(format!("robots {} and {} share no states", i, j)));
            }
        }
        Ok(())
    }

    /// Re-factorization structure for a robot: its local states, and groups
    /// of common states that must be conditionally independent of each other
    /// given the local states.
    ///
    /// States are first grouped by neighbor signature (the set of neighbors
    /// sharing them). Two signature blocks must be decoupled when each is
    /// shared with a neighbor the other is not. Blocks linked only by pairs
    /// that may stay coupled are merged, unless the merged set would contain
    /// a pair that must be decoupled.
    pub fn partition(&self, robot: RobotId, neighbors: &[RobotId]) -> RefactorBlocks {
        let mut by_sig: BTreeMap<BTreeSet<RobotId>, BTreeSet<StateKey>> = BTreeMap::new();
        for s in self.states(robot) {
            let sig: BTreeSet<RobotId> = neighbors
                .iter()
                .copied()
                .filter(|n| self.states(*n).iter().any(|o| o.key == s.key))
                .collect();
            by_sig.entry(sig).or_default().insert(s.key);
        }
        let local = by_sig.remove(&BTreeSet::new()).unwrap_or_default();
        let sigs: Vec<(BTreeSet<RobotId>, BTreeSet<StateKey>)> = by_sig.into_iter().collect();
        let n = sigs.len();
        let must_split =
            |a: usize, b: usize| !sigs[a].0.is_subset(&sigs[b].0) && !sigs[b].0.is_subset(&sigs[a].0);
        let mut component: Vec<usize> = (0..n).collect();
        for a in 0..n {
            for b in a + 1..n {
                if !must_split(a, b) {
                    let (from, to) = (component[b], component[a]);
                    for c in component.iter_mut() {
                        if *c == from {
                            *c = to;
                        }
                    }
                }
            }
        }
        let mut groups = Vec::new();
        for root in (0..n).filter(|&r| component[r] == r) {
            let members: Vec<usize> = (0..n).filter(|&m| component[m] == root).collect();
            let clean = members
                .iter()
                .all(|&a| members.iter().all(|&b| a == b || !must_split(a, b)));
            if clean {
                groups.push(members.iter().flat_map(|&m| sigs[m].1.iter().copied()).collect());
            } else {
                groups.extend(members.iter().map(|&m| sigs[m].1.clone()));
            }
        }
        RefactorBlocks { local, groups }
    }
}

/// Local states and mutually decoupled groups of common states.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RefactorBlocks {
    pub local: BTreeSet<StateKey>,
    pub groups: Vec<BTreeSet<StateKey>>,
}

impl RefactorBlocks {
    /// Everything in one group: re-factorization never changes anything.
    pub fn single(keys: BTreeSet<StateKey>) -> Self {
        RefactorBlocks {
            local: BTreeSet::new(),
            groups: vec![keys],
        }
    }
}

/// State transition `x' = f x + offset + w`, `w ~ N(0, noise)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub f: DMatrix<f64>,
    pub offset: DVector<f64>,
    pub noise: DMatrix<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Dynamics {
    /// Dubins car; control schedule gives (v, phi) over time.
    Dubins {
        params: DubinsParams,
        controls: Schedule<(f64, f64)>,
    },
    /// Planar target with known per-step displacement.
    ControlledTarget {
        params: ControlledTargetParams,
        dt: f64,
        controls: Schedule<[f64; 2]>,
    },
    Ncv(NcvTargetParams),
    /// Constant state (e.g. a sensor bias).
    Static { dim: usize },
    /// Generic linear-Gaussian model with no input.
    Linear { f: DMatrix<f64>, q: DMatrix<f64> },
}

impl Dynamics {
    pub fn dim(&self) -> usize {
        match self {
            Dynamics::Dubins { .. } => 3,
            Dynamics::ControlledTarget { .. } => 2,
            Dynamics::Ncv(_) => 4,
            Dynamics::Static { dim } => *dim,
            Dynamics::Linear { f, .. } => f.nrows(),
        }
    }

    pub fn is_linear(&self) -> bool {
        !matches!(self, Dynamics::Dubins { .. })
    }

    /// Linearized transition from tick `tick` to `tick + 1` about `mean`
    /// (only the Dubins model needs a mean).
    pub fn transition(&self, mean: Option<&DVector<f64>>, tick: i64) -> Result<Transition> {
        match self {
            Dynamics::Dubins { params, controls } => {
                let mean = mean.ok_or(Error::SingularInformation {
                    min_eig: 0.0,
                    max_eig: 0.0,
                })?;
                let pose = Vector3::new(mean[0], mean[1], mean[2]);
                let (v, phi) = controls.value_at(tick as f64 * params.dt);
                let f = models::dubins_jacobian(&pose, v, phi, params);
                let next = models::dubins_predict(&pose, v, phi, params);
                let offset = next - f * pose;
                Ok(Transition {
                    f: to_dmat(&f),
                    offset: DVector::from_column_slice(offset.as_slice()),
                    noise: to_dmat(&params.step_noise()),
                })
            }
            Dynamics::ControlledTarget { params, dt, controls } => {
                let u = controls.value_at(tick as f64 * dt);
                Ok(Transition {
                    f: DMatrix::identity(2, 2),
                    offset: DVector::from_column_slice(&u),
                    noise: to_dmat(&params.process_noise),
                })
            }
            Dynamics::Ncv(p) => {
                let (f, q) = p.transition_matrices();
                Ok(Transition {
                    f: to_dmat(&f),
                    offset: DVector::zeros(4),
                    noise: to_dmat(&q),
                })
            }
            Dynamics::Static { dim } => Ok(Transition {
                f: DMatrix::identity(*dim, *dim),
                offset: DVector::zeros(*dim),
                noise: DMatrix::zeros(*dim, *dim),
            }),
            Dynamics::Linear { f, q } => Ok(Transition {
                f: f.clone(),
                offset: DVector::zeros(f.nrows()),
                noise: q.clone(),
            }),
        }
    }
}

pub(crate) fn to_dmat<const R: usize, const C: usize>(m: &nalgebra::SMatrix<f64, R, C>) -> DMatrix<f64> {
    DMatrix::from_column_slice(R, C, m.as_slice())
}

pub type ModelSet = BTreeMap<StateKey, Dynamics>;

#[derive(Clone, Debug, PartialEq)]
pub enum ObservedPoint {
    Landmark(Vector2<f64>),
    Target(StateKey),
}

#[derive(Clone, Debug, PartialEq)]
pub enum Measurement {
    /// Range and bearing from a robot pose to a landmark or target position.
    RangeBearing {
        pose: StateKey,
        point: ObservedPoint,
        z: Vector2<f64>,
        noise: Matrix2<f64>,
    },
    /// `z = sum_k H_k x_k + v`, `v ~ N(0, noise)`.
    Linear {
        terms: Vec<(StateKey, DMatrix<f64>)>,
        z: DVector<f64>,
        noise: DMatrix<f64>,
    },
}

impl Measurement {
    pub fn keys(&self) -> Vec<StateKey> {
        match self {
            Measurement::RangeBearing { pose, point, .. } => match point {
                ObservedPoint::Landmark(_) => vec![*pose],
                ObservedPoint::Target(t) => vec![*pose, *t],
            },
            Measurement::Linear { terms, .. } => terms.iter().map(|(k, _)| *k).collect(),
        }
    }

    /// Information-form factor of this measurement, linearized at `estimate`
    /// when the model is nonlinear. `resolve` maps a state to its current variable.
    pub fn factor(
        &self,
        resolve: &dyn Fn(StateKey) -> Result<VariableId>,
        estimate: Option<&MomentForm>,
    ) -> Result<InfoForm> {
        let vars: Vec<VariableId> = self.keys().into_iter().map(resolve).collect::<Result<_>>()?;
        let ordering = VariableOrdering::new(vars.iter().copied())?;
        let n = ordering.dim();
        match self {
            Measurement::Linear { terms, z, noise } => {
                let mut h = DMatrix::zeros(z.len(), n);
                for ((_, hk), v) in terms.iter().zip(&vars) {
                    if hk.nrows() != z.len() || hk.ncols() != v.dim {
                        return Err(Error::DimensionMismatch(format!(
                            "observation block for {} is {}x{}",
                            v,
                            hk.nrows(),
                            hk.ncols()
                        )));
                    }
                    let off = ordering.offset_of(v).expect("present");
                    let mut view = h.view_mut((0, off), (z.len(), v.dim));
                    view += hk;
                }
                let r_inv = linalg::spd_inverse(noise).ok_or(Error::SingularCovariance)?;
                let ht_rinv = h.transpose() * r_inv;
                InfoForm::new(ordering, &ht_rinv * z, &ht_rinv * h)
            }
            Measurement::RangeBearing { point, z, noise, .. } => {
                let est = estimate.ok_or(Error::SingularInformation {
                    min_eig: 0.0,
                    max_eig: 0.0,
                })?;
                let pose_var = vars[0];
                let pm = est.mean_of(&pose_var)?;
                let pose = Vector3::new(pm[0], pm[1], pm[2]);
                let mut h = DMatrix::zeros(2, n);
                let mut mu = DVector::zeros(n);
                let pose_off = ordering.offset_of(&pose_var).expect("present");
                mu.rows_mut(pose_off, 3).copy_from(&pm);
                let position = match point {
                    ObservedPoint::Landmark(p) => *p,
                    ObservedPoint::Target(_) => {
                        let tv = vars[1];
                        let tm = est.mean_of(&tv)?;
                        let off = ordering.offset_of(&tv).expect("present");
                        mu.rows_mut(off, tv.dim).copy_from(&tm);
                        let [ix, iy] = models::target_position_indices(tv.dim);
                        Vector2::new(tm[ix], tm[iy])
                    }
                };
                let rb = models::range_bearing_predict(&pose, &position)?;
                h.view_mut((0, pose_off), (2, 3)).copy_from(&rb.d_pose);
                if let ObservedPoint::Target(_) = point {
                    let tv = vars[1];
                    let off = ordering.offset_of(&tv).expect("present");
                    let [ix, iy] = models::target_position_indices(tv.dim);
                    for r in 0..2 {
                        h[(r, off + ix)] = rb.d_point[(r, 0)];
                        h[(r, off + iy)] = rb.d_point[(r, 1)];
                    }
                }
                let innovation = DVector::from_vec(vec![
                    z[0] - rb.range,
                    models::wrap_angle(z[1] - rb.bearing),
                ]);
                let r_inv = linalg::spd_inverse(&to_dmat(noise)).ok_or(Error::SingularCovariance)?;
                let ht_rinv = h.transpose() * r_inv;
                let pseudo = innovation + &h * mu;
                InfoForm::new(ordering, &ht_rinv * pseudo, &ht_rinv * h)
            }
        }
    }
}

/// Predict a graph one step: dynamic variables gain a successor linked by a
/// transition factor; zero-noise variables are moved forward by an exact
/// change of variables. Returns the new graph and the past variables still
/// to be eliminated.
pub(crate) fn predict_graph(
    graph: &FactorGraph,
    states: &[StateSpec],
    time: i64,
    estimate: Option<&MomentForm>,
    models: &ModelSet,
) -> Result<(FactorGraph, BTreeSet<VariableId>)> {
    let mut g = graph.clone();
    let mut past = BTreeSet::new();
    for s in states {
        let dynamics = models.get(&s.key).ok_or_else(|| {
            Error::UnknownVariable(s.var(time))
        })?;
        if dynamics.dim() != s.dim {
            return Err(Error::DimensionMismatch(format!(
                "model for {} has dimension {}, state has {}",
                s.key,
                dynamics.dim(),
                s.dim
            )));
        }
        let cur = s.var(time);
        let next = s.var(time + 1);
        let mean = match estimate {
            Some(est) if !dynamics.is_linear() => Some(est.mean_of(&cur)?),
            _ => None,
        };
        let tr = dynamics.transition(mean.as_ref(), time)?;
        if linalg::max_abs(&tr.noise) == 0.0 {
            let lu = tr.f.clone().lu();
            let g_inv = lu.try_inverse().ok_or(Error::SingularElimination)?;
            let c = -(&g_inv * &tr.offset);
            g = g.substitute_variable(&cur, next, &g_inv, &c)?;
            continue;
        }
        let q_inv = linalg::spd_inverse(&tr.noise).ok_or(Error::SingularCovariance)?;
        // residual w = x' - F x - b over [x; x']
        let d = s.dim;
        let mut a = DMatrix::zeros(d, 2 * d);
        a.view_mut((0, 0), (d, d)).copy_from(&(-&tr.f));
        a.view_mut((0, d), (d, d)).copy_from(&DMatrix::identity(d, d));
        let at_qinv = a.transpose() * q_inv;
        let ordering = VariableOrdering::new([cur, next])?;
        let factor = InfoForm::new(ordering, &at_qinv * &tr.offset, &at_qinv * a)?;
        g = g.add_factor(Provenance::Transition, factor);
        past.insert(cur);
    }
    Ok((g, past))
}

/// One robot's belief over its task states.
#[derive(Clone, Debug)]
pub struct RobotBelief {
    robot: RobotId,
    time: i64,
    states: Vec<StateSpec>,
    blocks: RefactorBlocks,
    graph: FactorGraph,
    past: BTreeSet<VariableId>,
    estimate: Option<MomentForm>,
    deflation: f64,
    refactor_enabled: bool,
}

impl RobotBelief {
    /// Belief at tick `time` from a prior over the robot's states; `blocks`
    /// is the conditional-independence structure used by re-factorization.
    pub fn new(robot: RobotId, time: i64, prior: InfoForm, blocks: RefactorBlocks) -> Result<Self> {
        let mut states: Vec<StateSpec> = prior
            .ordering()
            .iter()
            .map(|v| {
                if v.time != time {
                    Err(Error::DimensionMismatch(format!("prior variable {} is not at time {}", v, time)))
                } else {
                    Ok(StateSpec { key: v.key(), dim: v.dim })
                }
            })
            .collect::<Result<_>>()?;
        states.sort();
        let graph = FactorGraph::new().add_factor(Provenance::Prior, prior);
        let mut b = RobotBelief {
            robot,
            time,
            states,
            blocks,
            graph,
            past: BTreeSet::new(),
            estimate: None,
            deflation: 1.0,
            refactor_enabled: true,
        };
        b.refresh()?;
        Ok(b)
    }

    /// Disable conservative re-factorization (exact filtering; tests only make
    /// sense when the block structure is already exact).
    pub fn without_refactor(mut self) -> Self {
        self.refactor_enabled = false;
        self
    }

    fn refresh(&mut self) -> Result<()> {
        let joint = self.graph.joint_info()?;
        self.estimate = Some(joint.to_moment()?);
        Ok(())
    }

    pub fn robot(&self) -> RobotId {
        self.robot
    }

    pub fn time(&self) -> i64 {
        self.time
    }

    pub fn states(&self) -> &[StateSpec] {
        &self.states
    }

    pub fn blocks(&self) -> &RefactorBlocks {
        &self.blocks
    }

    pub fn graph(&self) -> &FactorGraph {
        &self.graph
    }

    /// Deflation applied by the most recent re-factorization.
    pub fn last_deflation(&self) -> f64 {
        self.deflation
    }

    pub fn dim(&self) -> usize {
        self.states.iter().map(|s| s.dim).sum()
    }

    pub fn holds(&self, key: StateKey) -> bool {
        self.states.iter().any(|s| s.key == key)
    }

    /// Current variable for a state.
    pub fn current_var(&self, key: StateKey) -> Result<VariableId> {
        let spec = self
            .states
            .iter()
            .find(|s| s.key == key)
            .ok_or(Error::UnknownVariable(VariableId::new(key, self.time, 1)))?;
        Ok(spec.var(self.time))
    }

    pub fn ordering(&self) -> VariableOrdering {
        VariableOrdering::new(self.states.iter().map(|s| s.var(self.time))).expect("valid states")
    }

    /// Ordering of the current variables for `keys`.
    pub fn ordering_of(&self, keys: &[StateKey]) -> Result<VariableOrdering> {
        VariableOrdering::new(keys.iter().map(|k| self.current_var(*k)).collect::<Result<Vec<_>>>()?)
    }

    pub fn joint(&self) -> Result<InfoForm> {
        self.graph.joint_info()
    }

    /// Moment form of the current joint (the linearization point).
    pub fn estimate(&self) -> Result<&MomentForm> {
        self.estimate.as_ref().ok_or(Error::SingularInformation {
            min_eig: 0.0,
            max_eig: 0.0,
        })
    }

    /// Marginal information over a subset of the current states.
    pub fn marginal(&self, keys: &[StateKey]) -> Result<InfoForm> {
        let keep = self.ordering_of(keys)?;
        self.joint()?.marginalize(&keep)
    }

    pub fn predict(&self, models: &ModelSet) -> Result<RobotBelief> {
        if !self.past.is_empty() {
            return Err(Error::DimensionMismatch("predict called twice without marginalizing".into()));
        }
        let (graph, past) = predict_graph(&self.graph, &self.states, self.time, self.estimate.as_ref(), models)?;
        let mut next = self.clone();
        next.graph = graph;
        next.past = past;
        next.time = self.time + 1;
        next.estimate = None;
        Ok(next)
    }

    pub fn marginalize_past(&self) -> Result<RobotBelief> {
        let mut next = self.clone();
        if self.refactor_enabled {
            let resolve = |keys: &BTreeSet<StateKey>| -> Result<BTreeSet<VariableId>> {
                keys.iter()
                    .map(|k| {
                        let cur = self.current_var(*k)?;
                        let prev = cur.at_time(self.time - 1);
                        Ok(if self.past.contains(&prev) { prev } else { cur })
                    })
                    .collect()
            };
            let local = resolve(&self.blocks.local)?;
            let groups: Vec<BTreeSet<VariableId>> = self.blocks.groups.iter().map(resolve).collect::<Result<_>>()?;
            let refactored = next.graph.conservative_refactor(&local, &groups)?;
            next.graph = refactored.graph;
            next.deflation = refactored.lambda;
        }
        if !self.past.is_empty() {
            next.graph = next.graph.eliminate_variables(&self.past)?;
        }
        next.past.clear();
        next.refresh()?;
        Ok(next)
    }

    pub fn measurement_update(&self, obs: &[Measurement]) -> Result<RobotBelief> {
        if obs.is_empty() {
            return Ok(self.clone());
        }
        let resolve = |k: StateKey| self.current_var(k);
        let mut graph = self.graph.clone();
        for m in obs {
            let f = m.factor(&resolve, self.estimate.as_ref())?;
            graph = graph.add_factor(Provenance::Measurement, f);
        }
        let mut next = self.clone();
        next.graph = graph;
        next.refresh()?;
        Ok(next)
    }

    pub fn local_step(&self, models: &ModelSet, obs: &[Measurement]) -> Result<RobotBelief> {
        self.predict(models)?.marginalize_past()?.measurement_update(obs)
    }

    /// Multiply in a factor produced by fusion.
    pub fn add_fusion_factor(&self, payload: InfoForm) -> Result<RobotBelief> {
        for v in payload.ordering().iter() {
            if self.current_var(v.key())? != *v {
                return Err(Error::UnknownVariable(*v));
            }
        }
        let mut next = self.clone();
        next.graph = self.graph.add_factor(Provenance::Fusion, payload);
        next.refresh()?;
        Ok(next)
    }
}
