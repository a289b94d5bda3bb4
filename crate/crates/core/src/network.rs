//! Message transport between robots: topology, Bernoulli dropout, the JSON
//! wire format and the per-tick exchange schedule.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{self, CiCost, FusionMessage, FusionNode, FusionRule, ReceiveReport, PROTOCOL_VERSION};
use crate::gaussian::{InfoForm, StateKey, VarKind, VariableId, VariableOrdering};
use crate::linalg;
use crate::local_filter::{RobotId, TaskAllocation};

/// Undirected communication graph. Edges are stored as `(min, max)` pairs in
/// sorted order, which is the canonical exchange order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Topology {
    robots: Vec<RobotId>,
    edges: Vec<(RobotId, RobotId)>,
}

impl Topology {
    pub fn new(robots: impl IntoIterator<Item = RobotId>, edges: &[(RobotId, RobotId)]) -> Result<Self> {
        let robots: Vec<RobotId> = robots.into_iter().collect::<BTreeSet<_>>().into_iter().collect();
        if robots.is_empty() {
            return Err(Error::Topology("no robots".into()));
        }
        let mut canon = BTreeSet::new();
        for &(a, b) in edges {
            if a == b {
                return Err(Error::Topology(format!("self-loop on robot {a}")));
            }
            for r in [a, b] {
                if !robots.contains(&r) {
                    return Err(Error::Topology(format!("edge ({a}, {b}) names unknown robot {r}")));
                }
            }
            canon.insert((a.min(b), a.max(b)));
        }
        let topo = Topology {
            robots,
            edges: canon.into_iter().collect(),
        };
        if !topo.is_connected() {
            return Err(Error::Topology("communication graph is not connected".into()));
        }
        Ok(topo)
    }

    pub fn chain(robots: &[RobotId]) -> Result<Self> {
        let edges: Vec<_> = robots.windows(2).map(|w| (w[0], w[1])).collect();
        Topology::new(robots.iter().copied(), &edges)
    }

    pub fn robots(&self) -> &[RobotId] {
        &self.robots
    }

    pub fn edges(&self) -> &[(RobotId, RobotId)] {
        &self.edges
    }

    pub fn neighbors(&self, r: RobotId) -> Vec<RobotId> {
        let mut out: Vec<RobotId> = self
            .edges
            .iter()
            .filter_map(|&(a, b)| {
                if a == r {
                    Some(b)
                } else if b == r {
                    Some(a)
                } else {
                    None
                }
            })
            .collect();
        out.sort_unstable();
        out
    }

    fn is_connected(&self) -> bool {
        let mut seen = BTreeSet::from([self.robots[0]]);
        let mut stack = vec![self.robots[0]];
        while let Some(r) = stack.pop() {
            for n in self.neighbors(r) {
                if seen.insert(n) {
                    stack.push(n);
                }
            }
        }
        seen.len() == self.robots.len()
    }

    /// A connected graph is a tree exactly when it has `n - 1` edges.
    pub fn is_acyclic(&self) -> bool {
        self.edges.len() + 1 == self.robots.len()
    }

    /// Channel filters need a unique path between any two robots.
    pub fn check_rule(&self, rule: FusionRule) -> Result<()> {
        if rule == FusionRule::HsCf && !self.is_acyclic() {
            return Err(Error::Topology("hs-cf requires an acyclic communication graph".into()));
        }
        Ok(())
    }
}

/// 64-bit FNV-1a, used to name RNG streams.
pub fn fnv1a(label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent generator for a named purpose within one Monte Carlo run.
/// Streams with different labels never share draws, so switching one
/// consumer on or off leaves every other sequence untouched.
pub fn stream_rng(root_seed: u64, run: u64, label: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(root_seed ^ splitmix(run)));
    rng.set_stream(fnv1a(label));
    rng
}

/// Bernoulli message delivery with one stream per edge direction.
#[derive(Clone, Debug)]
pub struct DropoutModel {
    delivery_probability: f64,
    streams: BTreeMap<(RobotId, RobotId), ChaCha8Rng>,
    root_seed: u64,
    run: u64,
}

impl DropoutModel {
    pub fn new(delivery_probability: f64, root_seed: u64, run: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&delivery_probability) {
            return Err(Error::Topology(format!(
                "delivery probability {delivery_probability} outside [0, 1]"
            )));
        }
        Ok(DropoutModel {
            delivery_probability,
            streams: BTreeMap::new(),
            root_seed,
            run,
        })
    }

    pub fn delivery_probability(&self) -> f64 {
        self.delivery_probability
    }

    /// One draw for the message from `sender` to `receiver`; every call
    /// consumes exactly one value from that direction's stream.
    pub fn draw(&mut self, sender: RobotId, receiver: RobotId) -> bool {
        let (seed, run) = (self.root_seed, self.run);
        let rng = self
            .streams
            .entry((sender, receiver))
            .or_insert_with(|| stream_rng(seed, run, &format!("dropout/{sender}->{receiver}")));
        let u: f64 = rng.random();
        u < self.delivery_probability
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WireMessage {
    version: u32,
    sender: RobotId,
    receiver: RobotId,
    timestep: i64,
    variables: Vec<(String, u32, i64)>,
    zeta: Vec<f64>,
    lambda_upper: Vec<f64>,
    rule: FusionRule,
}

/// Number of scalars carried for a `d`-dimensional marginal.
pub fn payload_scalars(d: usize) -> usize {
    d + d * (d + 1) / 2
}

pub fn serialize(msg: &FusionMessage) -> Vec<u8> {
    let info = &msg.marginal;
    let d = info.dim();
    let l = info.lambda();
    let mut upper = Vec::with_capacity(d * (d + 1) / 2);
    for r in 0..d {
        for c in r..d {
            upper.push(l[(r, c)]);
        }
    }
    let wire = WireMessage {
        version: msg.version,
        sender: msg.sender,
        receiver: msg.receiver,
        timestep: msg.timestep,
        variables: info
            .ordering()
            .iter()
            .map(|v| (v.kind.as_str().to_string(), v.owner, v.time))
            .collect(),
        zeta: info.zeta().iter().copied().collect(),
        lambda_upper: upper,
        rule: msg.rule,
    };
    serde_json::to_vec(&wire).expect("wire message serializes")
}

/// Parse a wire message. `dims` gives the dimension of each state.
pub fn deserialize(bytes: &[u8], dims: impl Fn(VarKind, u32) -> Option<usize>) -> Result<FusionMessage> {
    let wire: WireMessage = serde_json::from_slice(bytes).map_err(|e| {
        let field = e.to_string().split('`').nth(1).unwrap_or("<document>").to_string();
        Error::malformed(&field, e.to_string())
    })?;
    if wire.version != PROTOCOL_VERSION {
        return Err(Error::malformed("version", format!("unsupported version {}", wire.version)));
    }
    let mut vars = Vec::with_capacity(wire.variables.len());
    for (idx, (kind, owner, time)) in wire.variables.iter().enumerate() {
        let kind = VarKind::parse(kind)
            .ok_or_else(|| Error::malformed(&format!("variables[{idx}]"), format!("unknown kind {kind:?}")))?;
        let dim = dims(kind, *owner).ok_or_else(|| {
            Error::malformed(&format!("variables[{idx}]"), format!("no state {}", StateKey { kind, owner: *owner }))
        })?;
        vars.push(VariableId::new(StateKey { kind, owner: *owner }, *time, dim));
    }
    if vars.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::malformed("variables", "not in canonical order"));
    }
    let ordering = VariableOrdering::new(vars).map_err(|e| Error::malformed("variables", e.to_string()))?;
    let d = ordering.dim();
    if wire.zeta.len() != d {
        return Err(Error::malformed("zeta", format!("expected {d} entries, got {}", wire.zeta.len())));
    }
    if wire.lambda_upper.len() != d * (d + 1) / 2 {
        return Err(Error::malformed(
            "lambda_upper",
            format!("expected {} entries, got {}", d * (d + 1) / 2, wire.lambda_upper.len()),
        ));
    }
    if wire.zeta.iter().chain(&wire.lambda_upper).any(|x| !x.is_finite()) {
        return Err(Error::malformed("zeta/lambda_upper", "non-finite number"));
    }
    let mut lambda = DMatrix::zeros(d, d);
    let mut it = wire.lambda_upper.iter();
    for r in 0..d {
        for c in r..d {
            let v = *it.next().expect("length checked");
            lambda[(r, c)] = v;
            lambda[(c, r)] = v;
        }
    }
    if !linalg::is_psd(&lambda) {
        return Err(Error::malformed("lambda_upper", "information matrix is not PSD"));
    }
    let marginal = InfoForm::new(ordering, DVector::from_vec(wire.zeta), lambda)?;
    Ok(FusionMessage {
        version: wire.version,
        sender: wire.sender,
        receiver: wire.receiver,
        timestep: wire.timestep,
        rule: wire.rule,
        marginal,
    })
}

/// One line of the delivery log.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct DeliveryRecord {
    pub tick: i64,
    pub edge_i: RobotId,
    pub edge_j: RobotId,
    pub direction: String,
    pub delivered: bool,
    pub scalars: usize,
    pub bytes: usize,
    #[serde(skip)]
    pub sender: RobotId,
}

/// Receiver-side diagnostics for one delivered or dropped message.
#[derive(Clone, Debug, PartialEq)]
pub struct ExchangeReport {
    pub tick: i64,
    pub receiver: RobotId,
    pub sender: RobotId,
    pub report: ReceiveReport,
}

#[derive(Clone, Debug, Default)]
pub struct TickOutcome {
    pub log: Vec<DeliveryRecord>,
    pub reports: Vec<ExchangeReport>,
}

/// One round of exchanges on every edge. All messages are prepared from the
/// beliefs as they stand on entry, sent through the wire format, thinned by
/// dropout and then fused at their receivers in canonical edge order.
pub fn tick_exchange(
    nodes: &mut BTreeMap<RobotId, FusionNode>,
    topology: &Topology,
    alloc: &TaskAllocation,
    dropout: &mut DropoutModel,
    rule: FusionRule,
    cost: CiCost,
    tick: i64,
) -> Result<TickOutcome> {
    let node = |nodes: &BTreeMap<RobotId, FusionNode>, r: RobotId| -> Result<FusionNode> {
        nodes
            .get(&r)
            .cloned()
            .ok_or_else(|| Error::Topology(format!("robot {r} has no node")))
    };
    let dims = |kind: VarKind, owner: u32| {
        alloc
            .global_states()
            .iter()
            .find(|s| s.key == StateKey { kind, owner })
            .map(|s| s.dim)
    };

    struct Pending {
        sent: FusionMessage,
        received: Option<FusionMessage>,
    }
    let mut out = TickOutcome::default();
    let mut pending: Vec<(RobotId, Pending)> = Vec::new();
    for &(i, j) in topology.edges() {
        let common: Vec<StateKey> = alloc.common(i, j).iter().map(|s| s.key).collect();
        let msg_ij = fusion::prepare_message(&node(nodes, i)?.belief, j, &common, rule)?;
        let msg_ji = fusion::prepare_message(&node(nodes, j)?.belief, i, &common, rule)?;
        let mut arrived = BTreeMap::new();
        for msg in [&msg_ij, &msg_ji] {
            let bytes = serialize(msg);
            let delivered = dropout.draw(msg.sender, msg.receiver);
            out.log.push(DeliveryRecord {
                tick,
                edge_i: i,
                edge_j: j,
                direction: format!("{}->{}", msg.sender, msg.receiver),
                delivered,
                scalars: payload_scalars(msg.marginal.dim()),
                bytes: bytes.len(),
                sender: msg.sender,
            });
            if delivered {
                arrived.insert(msg.receiver, deserialize(&bytes, dims)?);
            }
        }
        pending.push((
            i,
            Pending {
                sent: msg_ij,
                received: arrived.remove(&i),
            },
        ));
        pending.push((
            j,
            Pending {
                sent: msg_ji,
                received: arrived.remove(&j),
            },
        ));
    }
    for (robot, p) in pending {
        let n = nodes
            .get_mut(&robot)
            .ok_or_else(|| Error::Topology(format!("robot {robot} has no node")))?;
        let report = fusion::receive(n, &p.sent, p.received.as_ref(), rule, cost)?;
        out.reports.push(ExchangeReport {
            tick,
            receiver: robot,
            sender: p.sent.receiver,
            report,
        });
    }
    Ok(out)
}

/// Totals over sent messages, with the homogeneous full-state reference.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CommCost {
    pub per_robot: BTreeMap<RobotId, RobotCost>,
    pub messages: usize,
    pub heterogeneous_scalars: usize,
    pub global_dim: usize,
    pub homogeneous_scalars: usize,
    /// Largest single-message payload in the log.
    pub max_message_scalars: usize,
    pub homogeneous_message_scalars: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct RobotCost {
    pub scalars: usize,
    pub bytes: usize,
    pub messages: usize,
}

impl CommCost {
    /// Fraction of the homogeneous cost saved over the whole log.
    pub fn reduction(&self) -> f64 {
        if self.homogeneous_scalars == 0 {
            return 0.0;
        }
        1.0 - self.heterogeneous_scalars as f64 / self.homogeneous_scalars as f64
    }

    /// Saving for the largest heterogeneous message against one full-state message.
    pub fn max_message_reduction(&self) -> f64 {
        1.0 - self.max_message_scalars as f64 / self.homogeneous_message_scalars as f64
    }
}

pub fn communication_cost(log: &[DeliveryRecord], global_dim: usize) -> CommCost {
    let mut per_robot: BTreeMap<RobotId, RobotCost> = BTreeMap::new();
    let mut total = 0;
    let mut max_msg = 0;
    for rec in log {
        let c = per_robot.entry(rec.sender).or_default();
        c.scalars += rec.scalars;
        c.bytes += rec.bytes;
        c.messages += 1;
        total += rec.scalars;
        max_msg = max_msg.max(rec.scalars);
    }
    let homog = payload_scalars(global_dim);
    CommCost {
        per_robot,
        messages: log.len(),
        heterogeneous_scalars: total,
        global_dim,
        homogeneous_scalars: homog * log.len(),
        max_message_scalars: max_msg,
        homogeneous_message_scalars: homog,
    }
}
