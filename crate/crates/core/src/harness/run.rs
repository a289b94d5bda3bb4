//! Decentralized and centralized runs, and the Monte Carlo driver.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use log::{debug, warn};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use super::config::Scenario;
use super::sim::{simulate, Truth};
use crate::error::{Error, Result};
use crate::factor_graph::FactorGraph;
use crate::fusion::{ChannelFilterState, FusionNode, FusionRule};
use crate::gaussian::{InfoForm, MomentForm, StateKey, VarKind, VariableOrdering};
use crate::local_filter::{RefactorBlocks, RobotBelief, RobotId, StateSpec};
use crate::network::{communication_cost, tick_exchange, CommCost, DeliveryRecord, DropoutModel, ExchangeReport};

/// Estimate and truth for one robot at one tick.
#[derive(Clone, Debug)]
pub struct TickRecord {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub truth: DVector<f64>,
}

/// One robot's estimates over a run, over its states in canonical order.
#[derive(Clone, Debug)]
pub struct RobotSeries {
    pub robot: RobotId,
    pub states: Vec<StateSpec>,
    pub ticks: Vec<TickRecord>,
}

impl RobotSeries {
    pub fn dim(&self) -> usize {
        self.states.iter().map(|s| s.dim).sum()
    }

    /// Scalar indices of `keys` within this robot's state vector.
    pub fn indices_of(&self, keys: &[StateKey]) -> Result<Vec<usize>> {
        let mut out = Vec::new();
        for key in keys {
            let mut off = 0;
            let mut found = false;
            for s in &self.states {
                if s.key == *key {
                    out.extend(off..off + s.dim);
                    found = true;
                    break;
                }
                off += s.dim;
            }
            if !found {
                return Err(Error::UnknownVariable(crate::gaussian::VariableId::new(*key, 0, 1)));
            }
        }
        Ok(out)
    }

    /// Indices of heading angles, whose residuals are wrapped.
    pub fn angle_indices(&self) -> Vec<usize> {
        let mut off = 0;
        let mut out = Vec::new();
        for s in &self.states {
            if s.key.kind == VarKind::RobotPose {
                out.push(off + 2);
            }
            off += s.dim;
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub run: u64,
    pub robots: Vec<RobotSeries>,
    pub delivery_log: Vec<DeliveryRecord>,
    pub reports: Vec<ExchangeReport>,
    pub comm: CommCost,
    pub final_graphs: BTreeMap<RobotId, FactorGraph>,
    pub wall_clock_s: f64,
}

impl RunResult {
    pub fn robot(&self, id: RobotId) -> Option<&RobotSeries> {
        self.robots.iter().find(|r| r.robot == id)
    }
}

/// Independent-prior information form over `states` at tick 0.
pub fn prior_info(scn: &Scenario, states: &[StateSpec]) -> Result<InfoForm> {
    let ordering = VariableOrdering::new(states.iter().map(|s| s.var(0)))?;
    let n = ordering.dim();
    let mut mean = DVector::zeros(n);
    let mut cov = DMatrix::zeros(n, n);
    for v in ordering.iter() {
        let setup = scn.state(v.key()).ok_or(Error::UnknownVariable(*v))?;
        let off = ordering.offset_of(v).expect("present");
        mean.rows_mut(off, v.dim).copy_from(&setup.initial);
        cov.view_mut((off, off), (v.dim, v.dim)).copy_from(&setup.prior_cov);
    }
    MomentForm::new(ordering, mean, cov)?.to_info()
}

/// Beliefs and channel filters at tick 0.
pub fn initial_nodes(scn: &Scenario) -> Result<BTreeMap<RobotId, FusionNode>> {
    let mut nodes = BTreeMap::new();
    for r in &scn.robots {
        let states = scn.allocation.states(r.id).to_vec();
        let neighbors = scn.topology.neighbors(r.id);
        let blocks = scn.allocation.partition(r.id, &neighbors);
        let mut belief = RobotBelief::new(r.id, 0, prior_info(scn, &states)?, blocks)?;
        if !scn.config.refactor {
            belief = belief.without_refactor();
        }
        let mut node = FusionNode::new(belief);
        if scn.config.fusion == FusionRule::HsCf {
            for n in neighbors {
                let common = scn.allocation.common(r.id, n);
                let prior = prior_info(scn, &common)?;
                node.channels
                    .insert(n, ChannelFilterState::new(r.id, n, common, 0, Some(prior))?);
            }
        }
        nodes.insert(r.id, node);
    }
    Ok(nodes)
}

fn record(belief_est: &MomentForm, time: i64, states: &[StateSpec], truth: &Truth, k: usize) -> Result<TickRecord> {
    let keep = VariableOrdering::new(states.iter().map(|s| s.var(time)))?;
    let m = belief_est.marginal(&keep)?;
    let keys: Vec<StateKey> = states.iter().map(|s| s.key).collect();
    Ok(TickRecord {
        mean: m.mean().clone(),
        cov: m.covariance().clone(),
        truth: truth.stacked(k, &keys),
    })
}

/// Decentralized run against a given truth.
pub fn run_decentralized_with(scn: &Scenario, run: u64, truth: &Truth) -> Result<RunResult> {
    let start = Instant::now();
    let models = scn.models();
    let mut nodes = initial_nodes(scn)?;
    let mut dropout = DropoutModel::new(scn.config.delivery_probability, scn.config.seed, run)?;
    let mut series: BTreeMap<RobotId, RobotSeries> = nodes
        .keys()
        .map(|&r| {
            (
                r,
                RobotSeries {
                    robot: r,
                    states: scn.allocation.states(r).to_vec(),
                    ticks: Vec::with_capacity(scn.config.steps),
                },
            )
        })
        .collect();
    let mut log = Vec::new();
    let mut reports = Vec::new();
    for k in 1..=scn.config.steps {
        for (id, node) in nodes.iter_mut() {
            let obs = &truth.measurements[k - 1][id];
            node.belief = node
                .belief
                .local_step(&models, obs)
                .inspect_err(|e| debug!("run {run} tick {k} robot {id} local step: {e}"))?;
            node.predict_channels(&models)?;
        }
        let outcome = tick_exchange(
            &mut nodes,
            &scn.topology,
            &scn.allocation,
            &mut dropout,
            scn.config.fusion,
            scn.config.ci_cost,
            k as i64,
        )
        .inspect_err(|e| debug!("run {run} tick {k} exchange: {e}"))?;
        log.extend(outcome.log);
        reports.extend(outcome.reports);
        for (id, node) in &nodes {
            let s = series.get_mut(id).expect("series per robot");
            let rec = record(node.belief.estimate()?, node.belief.time(), &s.states, truth, k)?;
            s.ticks.push(rec);
        }
    }
    let comm = communication_cost(&log, scn.global_dim());
    Ok(RunResult {
        run,
        robots: series.into_values().collect(),
        delivery_log: log,
        reports,
        comm,
        final_graphs: nodes.iter().map(|(id, n)| (*id, n.belief.graph().clone())).collect(),
        wall_clock_s: start.elapsed().as_secs_f64(),
    })
}

/// Centralized id used for the single full-state belief.
pub const CENTRAL_ID: RobotId = 0;

/// One filter over the union of all tasks, fed every robot's measurements.
/// The reported series are its marginals over each robot's task.
pub fn run_centralized_with(scn: &Scenario, run: u64, truth: &Truth) -> Result<RunResult> {
    let start = Instant::now();
    let models = scn.models();
    let states = scn.allocation.global_states();
    let all: BTreeSet<StateKey> = states.iter().map(|s| s.key).collect();
    let mut belief = RobotBelief::new(CENTRAL_ID, 0, prior_info(scn, &states)?, RefactorBlocks::single(all))?.without_refactor();
    let mut series: Vec<RobotSeries> = scn
        .robots
        .iter()
        .map(|r| RobotSeries {
            robot: r.id,
            states: scn.allocation.states(r.id).to_vec(),
            ticks: Vec::with_capacity(scn.config.steps),
        })
        .collect();
    for k in 1..=scn.config.steps {
        let obs: Vec<_> = truth.measurements[k - 1].values().flatten().cloned().collect();
        belief = belief.local_step(&models, &obs)?;
        for s in series.iter_mut() {
            let rec = record(belief.estimate()?, belief.time(), &s.states, truth, k)?;
            s.ticks.push(rec);
        }
    }
    Ok(RunResult {
        run,
        robots: series,
        delivery_log: Vec::new(),
        reports: Vec::new(),
        comm: communication_cost(&[], scn.global_dim()),
        final_graphs: BTreeMap::from([(CENTRAL_ID, belief.graph().clone())]),
        wall_clock_s: start.elapsed().as_secs_f64(),
    })
}

pub fn run_decentralized(scn: &Scenario, run: u64) -> Result<RunResult> {
    run_decentralized_with(scn, run, &simulate(scn, run)?)
}

pub fn run_centralized(scn: &Scenario, run: u64) -> Result<RunResult> {
    run_centralized_with(scn, run, &simulate(scn, run)?)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunFailure {
    pub run: u64,
    pub error: String,
}

#[derive(Clone, Debug)]
pub struct MonteCarlo {
    pub runs: Vec<RunResult>,
    /// Empty unless the centralized baseline was requested; aligned with `runs`.
    pub centralized: Vec<RunResult>,
    pub failures: Vec<RunFailure>,
}

/// Worker count from `FGDDF_WORKERS`, if set to a positive integer.
pub fn workers_from_env() -> Option<usize> {
    std::env::var("FGDDF_WORKERS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
}

/// `mc_runs` independent runs in parallel. Failed runs are logged and left
/// out; results are ordered by run index whatever the scheduling.
pub fn run_monte_carlo(scn: &Scenario, centralized: bool) -> MonteCarlo {
    let one = |run: u64| -> Result<(RunResult, Option<RunResult>)> {
        let truth = simulate(scn, run)?;
        let dec = run_decentralized_with(scn, run, &truth)?;
        let cen = if centralized {
            Some(run_centralized_with(scn, run, &truth)?)
        } else {
            None
        };
        Ok((dec, cen))
    };
    let n = scn.config.mc_runs as u64;
    let outcomes: Vec<(u64, Result<(RunResult, Option<RunResult>)>)> = match workers_from_env() {
        Some(w) => match rayon::ThreadPoolBuilder::new().num_threads(w).build() {
            Ok(pool) => pool.install(|| (0..n).into_par_iter().map(|r| (r, one(r))).collect()),
            Err(e) => {
                warn!("could not start {w} workers ({e}); using the default pool");
                (0..n).into_par_iter().map(|r| (r, one(r))).collect()
            }
        },
        None => (0..n).into_par_iter().map(|r| (r, one(r))).collect(),
    };
    let mut mc = MonteCarlo {
        runs: Vec::new(),
        centralized: Vec::new(),
        failures: Vec::new(),
    };
    for (run, out) in outcomes {
        match out {
            Ok((dec, cen)) => {
                mc.runs.push(dec);
                if let Some(c) = cen {
                    mc.centralized.push(c);
                }
            }
            Err(e) => {
                warn!("run {run} failed and is excluded: {e}");
                mc.failures.push(RunFailure {
                    run,
                    error: e.to_string(),
                });
            }
        }
    }
    mc
}
