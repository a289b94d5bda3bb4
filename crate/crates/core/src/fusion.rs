//! Peer-to-peer heterogeneous fusion over common states.
//!
//! Both rules fuse the two robots' marginals over their common states as
//! `mine + theirs - common`, then push the change into the local belief as a
//! single factor over the common states, which leaves the conditional of the
//! non-mutual states given the common ones untouched. HS-CF tracks `common`
//! explicitly with a channel filter per neighbor; HS-CI derives it from the
//! covariance-intersection weight.

use std::collections::BTreeMap;

use log::debug;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::factor_graph::{FactorGraph, Provenance};
use crate::gaussian::{InfoForm, StateKey};
use crate::linalg;
use crate::local_filter::{predict_graph, ModelSet, RobotBelief, RobotId, StateSpec};

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FusionRule {
    #[serde(rename = "hs-cf")]
    HsCf,
    #[serde(rename = "hs-ci")]
    HsCi,
}

impl FusionRule {
    pub fn as_str(self) -> &'static str {
        match self {
            FusionRule::HsCf => "hs-cf",
            FusionRule::HsCi => "hs-ci",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "hs-cf" => Some(FusionRule::HsCf),
            "hs-ci" => Some(FusionRule::HsCi),
            _ => None,
        }
    }
}

impl std::fmt::Display for FusionRule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Objective minimized by the covariance-intersection weight.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CiCost {
    #[default]
    Trace,
    LogDet,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FusionWeight {
    pub omega: f64,
    pub cost: CiCost,
}

/// Marginal information over the common states of an edge, as sent on the wire.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionMessage {
    pub version: u32,
    pub sender: RobotId,
    pub receiver: RobotId,
    pub timestep: i64,
    pub rule: FusionRule,
    pub marginal: InfoForm,
}

/// Sender's marginal over the states it shares with the receiver.
pub fn prepare_message(
    belief: &RobotBelief,
    receiver: RobotId,
    common: &[StateKey],
    rule: FusionRule,
) -> Result<FusionMessage> {
    Ok(FusionMessage {
        version: PROTOCOL_VERSION,
        sender: belief.robot(),
        receiver,
        timestep: belief.time(),
        rule,
        marginal: belief.marginal(common)?,
    })
}

/// Per-neighbor estimate of the information both ends already share.
#[derive(Clone, Debug)]
pub struct ChannelFilterState {
    owner: RobotId,
    neighbor: RobotId,
    states: Vec<StateSpec>,
    time: i64,
    graph: FactorGraph,
}

impl ChannelFilterState {
    /// Channel filter at `time`, seeded with the common prior both robots
    /// start from (or zero information when there is none).
    pub fn new(
        owner: RobotId,
        neighbor: RobotId,
        states: Vec<StateSpec>,
        time: i64,
        common_prior: Option<InfoForm>,
    ) -> Result<Self> {
        let ordering = crate::gaussian::VariableOrdering::new(states.iter().map(|s| s.var(time)))?;
        let info = match common_prior {
            Some(p) => {
                if p.ordering() != &ordering {
                    return Err(Error::DimensionMismatch(format!(
                        "common prior over {} but channel holds {}",
                        p.ordering(),
                        ordering
                    )));
                }
                p
            }
            None => InfoForm::zero(ordering),
        };
        Ok(ChannelFilterState {
            owner,
            neighbor,
            states,
            time,
            graph: FactorGraph::new().add_factor(Provenance::Prior, info),
        })
    }

    pub fn owner(&self) -> RobotId {
        self.owner
    }

    pub fn neighbor(&self) -> RobotId {
        self.neighbor
    }

    pub fn time(&self) -> i64 {
        self.time
    }

    pub fn keys(&self) -> Vec<StateKey> {
        self.states.iter().map(|s| s.key).collect()
    }

    pub fn info(&self) -> Result<InfoForm> {
        self.graph.joint_info()
    }

    /// Propagate the common information one step through the shared models,
    /// with no new data.
    pub fn predict(&self, models: &ModelSet) -> Result<ChannelFilterState> {
        let info = self.info()?;
        let estimate = if linalg::is_pd(info.lambda()) {
            Some(info.to_moment()?)
        } else {
            None
        };
        let (graph, past) = predict_graph(&self.graph, &self.states, self.time, estimate.as_ref(), models)?;
        let graph = if past.is_empty() {
            graph
        } else {
            graph.eliminate_variables(&past)?
        };
        Ok(ChannelFilterState {
            graph,
            time: self.time + 1,
            ..self.clone()
        })
    }

    /// Scale the tracked information by `lambda`, matching the deflation the
    /// owning robot applied to its own belief before the same prediction.
    pub fn deflate(&self, lambda: f64) -> Result<ChannelFilterState> {
        if lambda == 1.0 {
            return Ok(self.clone());
        }
        let mut graph = FactorGraph::new();
        for f in self.graph.factors() {
            graph = graph.add_factor(f.provenance(), f.payload().scale(lambda));
        }
        Ok(ChannelFilterState { graph, ..self.clone() })
    }

    /// Replace the tracked common information.
    pub fn set(&self, info: InfoForm) -> Result<ChannelFilterState> {
        let expected = crate::gaussian::VariableOrdering::new(self.states.iter().map(|s| s.var(self.time)))?;
        if info.ordering() != &expected {
            return Err(Error::DimensionMismatch(format!(
                "channel update over {} but channel holds {}",
                info.ordering(),
                expected
            )));
        }
        Ok(ChannelFilterState {
            graph: FactorGraph::new().add_factor(Provenance::Fusion, info),
            ..self.clone()
        })
    }
}

fn check_aligned(a: &InfoForm, b: &InfoForm) -> Result<()> {
    if a.ordering() != b.ordering() {
        return Err(Error::DimensionMismatch(format!(
            "marginals over {} and {}",
            a.ordering(),
            b.ordering()
        )));
    }
    Ok(())
}

fn ci_objective(a: &InfoForm, b: &InfoForm, omega: f64, cost: CiCost) -> f64 {
    let m = a.lambda() * omega + b.lambda() * (1.0 - omega);
    match cost {
        CiCost::Trace => match linalg::spd_inverse(&m) {
            Some(p) => p.trace(),
            None => f64::INFINITY,
        },
        CiCost::LogDet => {
            if !linalg::is_pd(&m) {
                return f64::INFINITY;
            }
            match linalg::symmetrize(&m).cholesky() {
                Some(c) => -2.0 * c.l().diagonal().iter().map(|d| d.ln()).sum::<f64>(),
                None => f64::INFINITY,
            }
        }
    }
}

/// Golden-section interval tolerance for the weight search.
pub const OMEGA_TOL: f64 = 1e-6;

/// Covariance-intersection weight minimizing the fused covariance cost of
/// `omega * A + (1 - omega) * B`. Ties go to 0.5, then to the interior optimum.
pub fn ci_weight(a: &InfoForm, b: &InfoForm, cost: CiCost) -> Result<FusionWeight> {
    check_aligned(a, b)?;
    let f = |w: f64| ci_objective(a, b, w, cost);
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
    let mut x1 = hi - inv_phi * (hi - lo);
    let mut x2 = lo + inv_phi * (hi - lo);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    while hi - lo > OMEGA_TOL {
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - inv_phi * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + inv_phi * (hi - lo);
            f2 = f(x2);
        }
    }
    let interior = 0.5 * (lo + hi);
    let mut best = (0.5, f(0.5));
    for w in [interior, 0.0, 1.0] {
        let v = f(w);
        let tol = 1e-10 * best.1.abs().max(1e-300);
        if v < best.1 - tol {
            best = (w, v);
        }
    }
    if !best.1.is_finite() {
        return Err(Error::SingularCombination);
    }
    Ok(FusionWeight { omega: best.0, cost })
}

/// Common information implied by a CI weight: `(1 - w) * mine + w * theirs`.
pub fn ci_common_info(mine: &InfoForm, theirs: &InfoForm, w: FusionWeight) -> Result<InfoForm> {
    check_aligned(mine, theirs)?;
    Ok(mine.scale(1.0 - w.omega).add(&theirs.scale(w.omega)))
}

/// `mine + theirs - common`, required to be positive definite.
fn fuse_marginals(mine: &InfoForm, theirs: &InfoForm, common: &InfoForm) -> Result<InfoForm> {
    check_aligned(mine, theirs)?;
    check_aligned(mine, common)?;
    let fused = mine.add(theirs).subtract(common)?;
    let (lo, hi) = linalg::eig_range(fused.lambda());
    if !(hi > 0.0 && lo > linalg::SINGULAR_REL * hi) {
        return Err(Error::NonPsdFusion { min_eig: lo });
    }
    Ok(fused)
}

/// Covariance-intersection fusion of two aligned marginals.
pub fn ci_fuse_marginals(mine: &InfoForm, theirs: &InfoForm, cost: CiCost) -> Result<(InfoForm, FusionWeight)> {
    let w = ci_weight(mine, theirs, cost)?;
    let common = ci_common_info(mine, theirs, w)?;
    Ok((fuse_marginals(mine, theirs, &common)?, w))
}

/// Embed a fused common marginal into the belief: the added factor is
/// `fused - local`, so only the marginal over the common states changes.
fn apply_fused(belief: &RobotBelief, local: &InfoForm, fused: &InfoForm) -> Result<RobotBelief> {
    belief.add_fusion_factor(fused.subtract(local)?)
}

fn check_message(belief: &RobotBelief, msg: &FusionMessage, local: &InfoForm) -> Result<()> {
    if msg.receiver != belief.robot() {
        return Err(Error::malformed(
            "receiver",
            format!("message for robot {} delivered to robot {}", msg.receiver, belief.robot()),
        ));
    }
    check_aligned(local, &msg.marginal)
}

/// HS-CF fusion of a received message with the current belief.
pub fn hscf_fuse(
    belief: &RobotBelief,
    msg: &FusionMessage,
    cf: &ChannelFilterState,
) -> Result<(RobotBelief, ChannelFilterState)> {
    let local = belief.marginal(&cf.keys())?;
    check_message(belief, msg, &local)?;
    let fused = fuse_marginals(&local, &msg.marginal, &cf.info()?)?;
    Ok((apply_fused(belief, &local, &fused)?, cf.set(fused)?))
}

/// HS-CI fusion of a received message with the current belief.
pub fn hsci_fuse(belief: &RobotBelief, msg: &FusionMessage, cost: CiCost) -> Result<RobotBelief> {
    let keys: Vec<StateKey> = msg.marginal.ordering().iter().map(|v| v.key()).collect();
    let local = belief.marginal(&keys)?;
    check_message(belief, msg, &local)?;
    let (fused, _) = ci_fuse_marginals(&local, &msg.marginal, cost)?;
    apply_fused(belief, &local, &fused)
}

/// A robot as seen by the fusion layer: its belief and one channel filter per
/// neighbor (HS-CF only).
#[derive(Clone, Debug)]
pub struct FusionNode {
    pub belief: RobotBelief,
    pub channels: BTreeMap<RobotId, ChannelFilterState>,
}

impl FusionNode {
    pub fn new(belief: RobotBelief) -> Self {
        FusionNode {
            belief,
            channels: BTreeMap::new(),
        }
    }

    /// Advance every channel filter to the belief's time, applying the
    /// belief's most recent deflation first.
    pub fn predict_channels(&mut self, models: &ModelSet) -> Result<()> {
        let lambda = self.belief.last_deflation();
        for cf in self.channels.values_mut() {
            if cf.time() < self.belief.time() {
                *cf = cf.deflate(lambda)?;
            }
            while cf.time() < self.belief.time() {
                *cf = cf.predict(models)?;
            }
        }
        Ok(())
    }
}

/// What happened at one receiving end of an exchange.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ReceiveReport {
    pub delivered: bool,
    /// The rule's fusion was not PD and CI was used instead.
    pub fell_back_to_ci: bool,
    pub omega: Option<f64>,
    /// trace(CF common information) - trace(CI common information); HS-CF only.
    pub cf_ci_gap: Option<f64>,
}

fn is_pd_info(info: &InfoForm) -> bool {
    linalg::is_pd(info.lambda())
}

/// Add `factor` over the common states if the resulting common marginal
/// stays positive definite.
fn try_embed(belief: &RobotBelief, now: &InfoForm, factor: &InfoForm) -> Result<Option<RobotBelief>> {
    if !is_pd_info(&now.add(factor)) {
        return Ok(None);
    }
    belief.add_fusion_factor(factor.clone()).map(Some)
}

/// CI between the receiver's current marginal and the message, embedded.
fn ci_embed(belief: &RobotBelief, now: &InfoForm, theirs: &InfoForm, cost: CiCost) -> Result<(RobotBelief, InfoForm, f64)> {
    let w = ci_weight(now, theirs, cost)?;
    let fused = fuse_marginals(now, theirs, &ci_common_info(now, theirs, w)?)?;
    Ok((apply_fused(belief, now, &fused)?, fused, w.omega))
}

/// Apply one direction of an exchange at the receiving node. `sent` is the
/// node's own outgoing message (its pre-fusion marginal); `received` is the
/// neighbor's message, if it arrived.
///
/// The factor added is `theirs - common`, with the common term from the
/// channel filter (HS-CF) or from the CI weight of the two sent marginals
/// (HS-CI). When the receiver has already fused over other edges this tick,
/// the factor lands on its current marginal; if that would leave the common
/// marginal indefinite, the exchange falls back to CI between the current
/// marginal and the message.
pub fn receive(
    node: &mut FusionNode,
    sent: &FusionMessage,
    received: Option<&FusionMessage>,
    rule: FusionRule,
    cost: CiCost,
) -> Result<ReceiveReport> {
    let mine = &sent.marginal;
    let neighbor = sent.receiver;
    let mut report = ReceiveReport {
        delivered: received.is_some(),
        ..Default::default()
    };
    let cf = match rule {
        FusionRule::HsCf => Some(
            node.channels
                .get(&neighbor)
                .ok_or_else(|| Error::TaskAllocation(format!("no channel filter for neighbor {neighbor}")))?
                .clone(),
        ),
        FusionRule::HsCi => None,
    };
    let Some(msg) = received else {
        if let Some(cf) = cf {
            // the sender assumes delivery
            node.channels.insert(neighbor, cf.set(mine.clone())?);
        }
        return Ok(report);
    };
    check_message(&node.belief, msg, mine)?;
    let theirs = &msg.marginal;
    let w = ci_weight(mine, theirs, cost)?;
    let ci_common = ci_common_info(mine, theirs, w)?;
    let common = match &cf {
        Some(cf) => {
            let c = cf.info()?;
            report.cf_ci_gap = Some(c.lambda().trace() - ci_common.lambda().trace());
            c
        }
        None => {
            report.omega = Some(w.omega);
            ci_common
        }
    };
    let factor = theirs.subtract(&common)?;
    let keys: Vec<StateKey> = mine.ordering().iter().map(|v| v.key()).collect();
    let now = node.belief.marginal(&keys)?;
    let fused = match try_embed(&node.belief, &now, &factor)? {
        Some(b) => {
            node.belief = b;
            let f = mine.add(&factor);
            if is_pd_info(&f) {
                f
            } else {
                now.add(&factor)
            }
        }
        None => {
            debug!(
                "robot {} <- {} at t={}: {} fusion not PD, using CI",
                node.belief.robot(),
                neighbor,
                msg.timestep,
                rule
            );
            let (b, f, omega) = ci_embed(&node.belief, &now, theirs, cost)?;
            node.belief = b;
            report.fell_back_to_ci = true;
            report.omega = Some(omega);
            f
        }
    };
    if let Some(cf) = cf {
        node.channels.insert(neighbor, cf.set(fused)?);
    }
    Ok(report)
}

/// One exchange on edge (i, j): both messages come from the pre-fusion
/// beliefs, then each delivered message is fused at its receiver.
pub fn channel_sync(
    node_i: &mut FusionNode,
    node_j: &mut FusionNode,
    common: &[StateKey],
    rule: FusionRule,
    cost: CiCost,
    delivered_ij: bool,
    delivered_ji: bool,
) -> Result<(ReceiveReport, ReceiveReport)> {
    let i = node_i.belief.robot();
    let j = node_j.belief.robot();
    let msg_ij = prepare_message(&node_i.belief, j, common, rule)?;
    let msg_ji = prepare_message(&node_j.belief, i, common, rule)?;
    let at_i = receive(node_i, &msg_ij, delivered_ji.then_some(&msg_ji), rule, cost)?;
    let at_j = receive(node_j, &msg_ji, delivered_ij.then_some(&msg_ij), rule, cost)?;
    Ok((at_i, at_j))
}
