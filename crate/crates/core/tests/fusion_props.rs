mod common;

use std::collections::BTreeSet;
use std::path::Path;

use common::*;
use fgddf::fusion::*;
use fgddf::gaussian::{InfoForm, MomentForm, StateKey, VariableId, VariableOrdering};
use fgddf::harness::load_scenario;
use fgddf::harness::sim::sample_gaussian;
use fgddf::local_filter::*;
use fgddf::models::NcvTargetParams;
use fgddf::network::stream_rng;
use nalgebra::{dmatrix, dvector, DMatrix, DVector};
use proptest::prelude::*;

const T: StateKey = StateKey { kind: fgddf::gaussian::VarKind::TargetState, owner: 1 };
const S: StateKey = StateKey { kind: fgddf::gaussian::VarKind::BiasState, owner: 1 };

fn ord(keys: &[(StateKey, usize)], time: i64) -> VariableOrdering {
    VariableOrdering::new(keys.iter().map(|&(k, d)| VariableId::new(k, time, d))).unwrap()
}

fn belief(robot: RobotId, prior: InfoForm) -> RobotBelief {
    let keys: BTreeSet<StateKey> = prior.ordering().iter().map(|v| v.key()).collect();
    RobotBelief::new(robot, 0, prior, RefactorBlocks::single(keys)).unwrap()
}

fn message(sender: RobotId, receiver: RobotId, marginal: InfoForm, rule: FusionRule) -> FusionMessage {
    FusionMessage { version: PROTOCOL_VERSION, sender, receiver, timestep: 0, rule, marginal }
}

fn spec(k: StateKey, dim: usize) -> StateSpec {
    StateSpec { key: k, dim }
}

fn scalar(z: f64, l: f64) -> InfoForm {
    InfoForm::new(ord(&[(T, 1)], 0), dvector![z], dmatrix![l]).unwrap()
}

#[test]
fn prepare_message_examples() {
    let joint = InfoForm::new(ord(&[(T, 1), (S, 1)], 0), dvector![1.0, 1.0], dmatrix![3.0, 1.0; 1.0, 2.0]).unwrap();
    let msg = prepare_message(&belief(1, joint), 2, &[T], FusionRule::HsCf).unwrap();
    assert!((msg.marginal.zeta()[0] - 0.5).abs() < 1e-15);
    assert!((msg.marginal.lambda()[(0, 0)] - 2.5).abs() < 1e-15);
    assert_eq!((msg.sender, msg.receiver, msg.version), (1, 2, PROTOCOL_VERSION));

    let block = InfoForm::new(ord(&[(T, 1), (S, 1)], 0), dvector![1.0, 4.0], dmatrix![3.0, 0.0; 0.0, 2.0]).unwrap();
    let msg = prepare_message(&belief(1, block), 2, &[T], FusionRule::HsCi).unwrap();
    assert_eq!(msg.marginal, scalar(1.0, 3.0));
}

#[test]
fn robots_three_and_four_share_four_scalars() {
    let p = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios/sim5x6.json");
    let scn = load_scenario(&p).unwrap();
    let common = scn.allocation.common(3, 4);
    let keys: Vec<StateKey> = common.iter().map(|s| s.key).collect();
    assert_eq!(keys, vec![StateKey::target(4), StateKey::target(5)]);
    let nodes = fgddf::harness::run::initial_nodes(&scn).unwrap();
    let msg = prepare_message(&nodes[&3].belief, 4, &keys, FusionRule::HsCf).unwrap();
    assert_eq!(msg.marginal.dim(), 4);
}

#[test]
fn channel_filter_prediction() {
    let models: ModelSet = [(T, Dynamics::Linear { f: dmatrix![1.0], q: dmatrix![1.0] })].into();
    let zero = ChannelFilterState::new(1, 2, vec![spec(T, 1)], 0, None).unwrap();
    let next = zero.predict(&models).unwrap().info().unwrap();
    assert_eq!(next.lambda()[(0, 0)], 0.0);
    assert_eq!(next.zeta()[0], 0.0);

    let one = ChannelFilterState::new(1, 2, vec![spec(T, 1)], 0, Some(scalar(0.0, 1.0))).unwrap();
    let next = one.predict(&models).unwrap();
    assert_eq!(next.time(), 1);
    assert!((next.info().unwrap().lambda()[(0, 0)] - 0.5).abs() < 1e-15);
}

#[test]
fn channel_filter_prediction_matches_local_filter() {
    let ncv = NcvTargetParams { q: 0.4, dt: 0.1 };
    let models: ModelSet = [(T, Dynamics::Ncv(ncv))].into();
    let m = MomentForm::new(ord(&[(T, 4)], 0), dvector![1.0, 0.5, -1.0, 0.2], DMatrix::from_diagonal(&dvector![2.0, 0.5, 3.0, 0.4]))
        .unwrap()
        .to_info()
        .unwrap();
    let cf = ChannelFilterState::new(1, 2, vec![spec(T, 4)], 0, Some(m.clone())).unwrap();
    let b = belief(1, m).local_step(&models, &[]).unwrap();
    let from_cf = cf.predict(&models).unwrap().info().unwrap();
    let from_b = b.joint().unwrap();
    assert!(rel_diff(from_cf.lambda(), from_b.lambda()) < 1e-9);
    assert!(vec_rel_diff(from_cf.zeta(), from_b.zeta()) < 1e-9);
}

#[test]
fn hscf_scalar_arithmetic() {
    let b = belief(1, scalar(2.0, 2.0));
    let cf = ChannelFilterState::new(1, 2, vec![spec(T, 1)], 0, Some(scalar(1.0, 1.0))).unwrap();
    let (fused, cf) = hscf_fuse(&b, &message(2, 1, scalar(3.0, 3.0), FusionRule::HsCf), &cf).unwrap();
    let j = fused.joint().unwrap();
    assert!((j.zeta()[0] - 4.0).abs() < 1e-15);
    assert!((j.lambda()[(0, 0)] - 4.0).abs() < 1e-15);
    assert_eq!(cf.info().unwrap(), j);
}

#[test]
fn message_equal_to_channel_filter_changes_nothing() {
    let joint = InfoForm::new(ord(&[(T, 1), (S, 1)], 0), dvector![1.0, 1.0], dmatrix![3.0, 1.0; 1.0, 2.0]).unwrap();
    let b = belief(1, joint);
    let c = scalar(0.3, 1.2);
    let cf = ChannelFilterState::new(1, 2, vec![spec(T, 1)], 0, Some(c.clone())).unwrap();
    let (fused, _) = hscf_fuse(&b, &message(2, 1, c, FusionRule::HsCf), &cf).unwrap();
    let (a, e) = (fused.joint().unwrap(), b.joint().unwrap());
    assert!(max_abs_diff(a.lambda(), e.lambda()) < 1e-15);
    assert!((a.zeta() - e.zeta()).abs().max() < 1e-15);
}

#[test]
fn full_overlap_exchange_equals_centralized_fusion() {
    // static 2-vector, common prior, one private measurement each
    let p0 = DMatrix::from_diagonal(&dvector![4.0, 2.0]);
    let x0 = dvector![0.0, 1.0];
    let prior = MomentForm::new(ord(&[(T, 2)], 0), x0.clone(), p0.clone()).unwrap().to_info().unwrap();
    let h1 = dmatrix![1.0, 0.0; 0.5, 1.0];
    let h2 = dmatrix![0.0, 1.0; 1.0, 1.0];
    let r1 = dmatrix![1.0, 0.2; 0.2, 2.0];
    let r2 = dmatrix![0.5, 0.0; 0.0, 1.5];
    let (z1, z2) = (dvector![0.4, 1.1], dvector![0.8, 0.3]);
    let mk = |robot, h: &DMatrix<f64>, z: &DVector<f64>, r: &DMatrix<f64>| {
        let obs = [Measurement::Linear { terms: vec![(T, h.clone())], z: z.clone(), noise: r.clone() }];
        let b = belief(robot, prior.clone()).measurement_update(&obs).unwrap();
        let mut node = FusionNode::new(b);
        let peer = if robot == 1 { 2 } else { 1 };
        node.channels.insert(peer, ChannelFilterState::new(robot, peer, vec![spec(T, 2)], 0, Some(prior.clone())).unwrap());
        node
    };
    let mut n1 = mk(1, &h1, &z1, &r1);
    let mut n2 = mk(2, &h2, &z2, &r2);
    channel_sync(&mut n1, &mut n2, &[T], FusionRule::HsCf, CiCost::Trace, true, true).unwrap();
    let mut kf = Kalman { x: x0, p: p0 };
    kf.update(&h1, &z1, &r1);
    kf.update(&h2, &z2, &r2);
    for n in [&n1, &n2] {
        let m = n.belief.estimate().unwrap();
        assert!(rel_diff(m.covariance(), &kf.p) < 1e-9);
        assert!(vec_rel_diff(m.mean(), &kf.x) < 1e-9);
    }
}

fn conditional(j: &InfoForm) -> (DMatrix<f64>, DMatrix<f64>, DVector<f64>) {
    // local rows of (common, local) ordering: lambda_LL, lambda_LC, zeta_L
    let n = j.dim();
    (
        j.lambda().view((2, 2), (n - 2, n - 2)).into_owned(),
        j.lambda().view((2, 0), (n - 2, 2)).into_owned(),
        j.zeta().rows(2, n - 2).into_owned(),
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fusion_preserves_local_conditional(lam in spd(4), z in vector(4), other in spd(2), oz in vector(2), c in 0.05..0.5f64) {
        let joint = InfoForm::new(ord(&[(T, 2), (S, 2)], 0), z, lam).unwrap();
        let b = belief(1, joint.clone());
        let mine = b.marginal(&[T]).unwrap();
        let theirs = InfoForm::new(mine.ordering().clone(), oz, &other + mine.lambda() * 0.5).unwrap();
        let cf = ChannelFilterState::new(1, 2, vec![spec(T, 2)], 0, Some(mine.scale(c))).unwrap();
        let msg = message(2, 1, theirs, FusionRule::HsCf);
        let before = conditional(&joint);
        let cf_out = hscf_fuse(&b, &msg, &cf);
        let ci_out = hsci_fuse(&b, &msg, CiCost::Trace);
        for out in [cf_out.map(|x| x.0), ci_out] {
            let after = conditional(&out.unwrap().joint().unwrap());
            prop_assert!(max_abs_diff(&after.0, &before.0) < 1e-9);
            prop_assert!(max_abs_diff(&after.1, &before.1) < 1e-9);
            prop_assert!((&after.2 - &before.2).abs().max() < 1e-9);
        }
    }

    #[test]
    fn weight_matches_grid_search(a in spd(3), b in spd(3), log_det in any::<bool>()) {
        let o = scalar_ordering(3);
        let ia = InfoForm::new(o.clone(), DVector::zeros(3), a.clone()).unwrap();
        let ib = InfoForm::new(o, DVector::zeros(3), b.clone()).unwrap();
        let cost = if log_det { CiCost::LogDet } else { CiCost::Trace };
        let w = ci_weight(&ia, &ib, cost).unwrap().omega;
        let g = ci_grid_oracle(&a, &b, 10_001, log_det);
        // flat objectives: compare cost values when the argmins differ
        let close = (w - g).abs() < 1e-3
            || (ci_cost_oracle(&a, &b, w, log_det) - ci_cost_oracle(&a, &b, g, log_det)).abs()
                <= 1e-9 * ci_cost_oracle(&a, &b, g, log_det).abs();
        prop_assert!(close, "omega {} grid {}", w, g);
    }

    #[test]
    fn weight_is_scale_invariant(a in spd(3), b in spd(3), c in 0.01..100.0f64) {
        let o = scalar_ordering(3);
        let mk = |m: &DMatrix<f64>| InfoForm::new(o.clone(), DVector::zeros(3), m.clone()).unwrap();
        let w1 = ci_weight(&mk(&a), &mk(&b), CiCost::Trace).unwrap().omega;
        let w2 = ci_weight(&mk(&(&a * c)), &mk(&(&b * c)), CiCost::Trace).unwrap().omega;
        prop_assert!((w1 - w2).abs() < 1e-6, "{} vs {}", w1, w2);
    }

    #[test]
    fn ci_information_is_bounded(a in spd(3), b in spd(3), w in 0.0..=1.0f64, extra in spd(3)) {
        let o = scalar_ordering(3);
        let ia = InfoForm::new(o.clone(), DVector::zeros(3), a.clone()).unwrap();
        let ib = InfoForm::new(o.clone(), DVector::zeros(3), b.clone()).unwrap();
        let weight = FusionWeight { omega: w, cost: CiCost::Trace };
        let common = ci_common_info(&ia, &ib, weight).unwrap();
        let fused = ia.add(&ib).subtract(&common).unwrap();
        prop_assert!(min_eig(&(&a + &b - fused.lambda())) >= -1e-9);
        // when one side dominates, the fused information is at least the weaker side
        let strong = InfoForm::new(o, DVector::zeros(3), &b + &extra).unwrap();
        let common = ci_common_info(&strong, &ib, weight).unwrap();
        let fused = strong.add(&ib).subtract(&common).unwrap();
        prop_assert!(min_eig(&(fused.lambda() - &b)) >= -1e-9);
    }

    #[test]
    fn ci_common_term_matches_weighted_average(a in info(3), b in info(3), w in 0.0..=1.0f64) {
        let common = ci_common_info(&a, &b, FusionWeight { omega: w, cost: CiCost::Trace }).unwrap();
        let eq3 = a.add(&b).subtract(&common).unwrap();
        let eq4 = a.scale(w).add(&b.scale(1.0 - w));
        prop_assert!(max_abs_diff(eq3.lambda(), eq4.lambda()) <= 1e-12 * (1.0 + eq4.lambda().abs().max()));
        prop_assert!((eq3.zeta() - eq4.zeta()).abs().max() <= 1e-12 * (1.0 + eq4.zeta().abs().max()));
    }

    #[test]
    fn hsci_full_overlap_is_homogeneous_ci(a in info(2), b in info(2)) {
        let bel = belief(1, a.clone());
        let out = hsci_fuse(&bel, &message(2, 1, b.clone(), FusionRule::HsCi), CiCost::Trace).unwrap();
        let w = ci_weight(&a, &b, CiCost::Trace).unwrap().omega;
        let want = a.scale(w).add(&b.scale(1.0 - w));
        let got = out.joint().unwrap();
        prop_assert!(rel_diff(got.lambda(), want.lambda()) < 1e-9);
        prop_assert!(vec_rel_diff(got.zeta(), want.zeta()) < 1e-9);
    }
}

#[test]
fn weight_examples() {
    let o = scalar_ordering(2);
    let mk = |m: DMatrix<f64>| InfoForm::new(o.clone(), DVector::zeros(2), m).unwrap();
    let eye = DMatrix::identity(2, 2);
    assert_eq!(ci_weight(&mk(eye.clone()), &mk(eye.clone()), CiCost::Trace).unwrap().omega, 0.5);
    assert_eq!(ci_weight(&mk(&eye * 2.0), &mk(eye.clone()), CiCost::Trace).unwrap().omega, 1.0);
    let w = ci_weight(&mk(dmatrix![4.0, 0.0; 0.0, 1.0]), &mk(dmatrix![1.0, 0.0; 0.0, 4.0]), CiCost::Trace).unwrap();
    assert_eq!(w.omega, 0.5);
    assert_eq!(ci_weight(&mk(eye.clone()), &mk(&eye * 3.0), CiCost::LogDet).unwrap().omega, 0.0);
}

#[test]
fn ci_boundary_weights() {
    let mine = scalar(1.0, 2.0);
    let theirs = scalar(3.0, 5.0);
    let at = |w: f64| {
        let c = ci_common_info(&mine, &theirs, FusionWeight { omega: w, cost: CiCost::Trace }).unwrap();
        (c.clone(), mine.add(&theirs).subtract(&c).unwrap())
    };
    let (c1, f1) = at(1.0);
    assert_eq!(c1, theirs);
    assert_eq!(f1, mine);
    let (c0, f0) = at(0.0);
    assert_eq!(c0, mine);
    assert_eq!(f0, theirs);
}

#[test]
fn hsci_on_identical_marginals_is_idempotent() {
    let joint = InfoForm::new(ord(&[(T, 1), (S, 1)], 0), dvector![1.0, 1.0], dmatrix![3.0, 1.0; 1.0, 2.0]).unwrap();
    let b = belief(1, joint);
    let mine = b.marginal(&[T]).unwrap();
    let out = hsci_fuse(&b, &message(2, 1, mine.clone(), FusionRule::HsCi), CiCost::Trace).unwrap();
    let after = out.marginal(&[T]).unwrap();
    assert!(max_abs_diff(after.lambda(), mine.lambda()) < 1e-12);
    assert!((after.zeta() - mine.zeta()).abs().max() < 1e-12);
}

#[test]
fn ci_is_conservative_for_sampled_cross_covariances() {
    let mut rng = stream_rng(5, 0, "fusion/cross-cov");
    let o = scalar_ordering(2);
    let worst = ci_cross_covariance_worst(&mut rng, 1000, |a, b| {
        let ia = InfoForm::new(o.clone(), DVector::zeros(2), a.clone()).unwrap();
        let ib = InfoForm::new(o.clone(), DVector::zeros(2), b.clone()).unwrap();
        ci_weight(&ia, &ib, CiCost::Trace).unwrap().omega
    });
    assert!(worst >= -1e-9, "worst eigenvalue {worst}");
}

fn two_robot_nodes(rule: FusionRule) -> (FusionNode, FusionNode) {
    // each robot: shared NCV target plus its own bias
    let mk = |robot: RobotId| {
        let s = StateKey::bias(robot);
        let o = ord(&[(T, 4), (s, 2)], 0);
        let prior = MomentForm::new(o, DVector::zeros(6), DMatrix::from_diagonal(&dvector![20.0, 1.0, 20.0, 1.0, 1.0, 1.0]))
            .unwrap()
            .to_info()
            .unwrap();
        let blocks = RefactorBlocks { local: [s].into(), groups: vec![[T].into()] };
        let mut node = FusionNode::new(RobotBelief::new(robot, 0, prior.clone(), blocks).unwrap());
        let peer = 3 - robot;
        if rule == FusionRule::HsCf {
            let common = prior.marginalize(&ord(&[(T, 4)], 0)).unwrap();
            node.channels.insert(peer, ChannelFilterState::new(robot, peer, vec![spec(T, 4)], 0, Some(common)).unwrap());
        }
        node
    };
    (mk(1), mk(2))
}

fn biased_obs(robot: RobotId, y: &DVector<f64>, m: &DVector<f64>, r: &DMatrix<f64>) -> Vec<Measurement> {
    let pos = dmatrix![1.0, 0.0, 0.0, 0.0; 0.0, 0.0, 1.0, 0.0];
    let s = StateKey::bias(robot);
    vec![
        Measurement::Linear { terms: vec![(T, pos), (s, DMatrix::identity(2, 2))], z: y.clone(), noise: r.clone() },
        Measurement::Linear { terms: vec![(s, DMatrix::identity(2, 2))], z: m.clone(), noise: r.clone() },
    ]
}

#[test]
fn channel_filters_agree_after_symmetric_exchange() {
    let (mut n1, mut n2) = two_robot_nodes(FusionRule::HsCf);
    let r = dmatrix![1.0, 0.0; 0.0, 10.0];
    n1.belief = n1.belief.measurement_update(&biased_obs(1, &dvector![1.0, 2.0], &dvector![0.1, 0.0], &r)).unwrap();
    n2.belief = n2.belief.measurement_update(&biased_obs(2, &dvector![0.5, 2.5], &dvector![-0.2, 0.3], &r)).unwrap();
    channel_sync(&mut n1, &mut n2, &[T], FusionRule::HsCf, CiCost::Trace, true, true).unwrap();
    let (c1, c2) = (n1.channels[&2].info().unwrap(), n2.channels[&1].info().unwrap());
    assert!(rel_diff(c1.lambda(), c2.lambda()) < 1e-12);
    let (m1, m2) = (n1.belief.marginal(&[T]).unwrap(), n2.belief.marginal(&[T]).unwrap());
    assert!(rel_diff(m1.lambda(), m2.lambda()) < 1e-12);
    assert!(vec_rel_diff(m1.zeta(), m2.zeta()) < 1e-12);
}

#[test]
fn dropped_exchange_leaves_beliefs_and_commits_sender() {
    let (mut n1, mut n2) = two_robot_nodes(FusionRule::HsCf);
    let r = dmatrix![1.0, 0.0; 0.0, 10.0];
    n1.belief = n1.belief.measurement_update(&biased_obs(1, &dvector![1.0, 2.0], &dvector![0.1, 0.0], &r)).unwrap();
    let (b1, b2) = (n1.belief.joint().unwrap(), n2.belief.joint().unwrap());
    let sent1 = n1.belief.marginal(&[T]).unwrap();
    let sent2 = n2.belief.marginal(&[T]).unwrap();
    channel_sync(&mut n1, &mut n2, &[T], FusionRule::HsCf, CiCost::Trace, false, false).unwrap();
    assert_eq!(n1.belief.joint().unwrap(), b1);
    assert_eq!(n2.belief.joint().unwrap(), b2);
    assert_eq!(n1.channels[&2].info().unwrap(), sent1);
    assert_eq!(n2.channels[&1].info().unwrap(), sent2);
    assert_ne!(n1.channels[&2].info().unwrap(), n2.channels[&1].info().unwrap());
}

fn run_linear_pair(rule: FusionRule, steps: usize, mut check: impl FnMut(&FusionNode, &FusionNode)) {
    let ncv = NcvTargetParams { q: 0.2, dt: 0.1 };
    let models: ModelSet = [
        (T, Dynamics::Ncv(ncv.clone())),
        (StateKey::bias(1), Dynamics::Static { dim: 2 }),
        (StateKey::bias(2), Dynamics::Static { dim: 2 }),
    ]
    .into();
    let (mut n1, mut n2) = two_robot_nodes(rule);
    let r = dmatrix![1.0, 0.0; 0.0, 10.0];
    let mut rng = stream_rng(9, 0, "fusion/pair");
    let (f, q) = ncv.transition_matrices();
    let f = DMatrix::from_column_slice(4, 4, f.as_slice());
    let q = DMatrix::from_column_slice(4, 4, q.as_slice());
    let mut t = dvector![0.0, 1.0, 0.0, -0.5];
    let bias = [dvector![0.3, -0.2], dvector![-0.4, 0.1]];
    for _ in 0..steps {
        t = &f * &t + sample_gaussian(&mut rng, &q);
        for (robot, n) in [(1u32, &mut n1), (2, &mut n2)] {
            let s = &bias[robot as usize - 1];
            let y = dvector![t[0], t[2]] + s + sample_gaussian(&mut rng, &r);
            let m = s + sample_gaussian(&mut rng, &r);
            n.belief = n.belief.local_step(&models, &biased_obs(robot, &y, &m, &r)).unwrap();
            n.predict_channels(&models).unwrap();
        }
        channel_sync(&mut n1, &mut n2, &[T], rule, CiCost::Trace, true, true).unwrap();
        check(&n1, &n2);
    }
}

#[test]
fn linear_pair_common_marginals_agree_every_step() {
    run_linear_pair(FusionRule::HsCf, 50, |a, b| {
        let (m1, m2) = (a.belief.marginal(&[T]).unwrap(), b.belief.marginal(&[T]).unwrap());
        let (e1, e2) = (m1.to_moment().unwrap(), m2.to_moment().unwrap());
        assert!(rel_diff(e1.covariance(), e2.covariance()) < 1e-7);
        assert!(vec_rel_diff(e1.mean(), e2.mean()) < 1e-7);
    });
}

#[test]
fn repeated_exchange_adds_nothing() {
    for rule in [FusionRule::HsCf, FusionRule::HsCi] {
        run_linear_pair(rule, 20, |a, b| {
            let (mut a2, mut b2) = (a.clone(), b.clone());
            channel_sync(&mut a2, &mut b2, &[T], rule, CiCost::Trace, true, true).unwrap();
            for (x, y) in [(a, &a2), (b, &b2)] {
                let (p, q) = (x.belief.joint().unwrap(), y.belief.joint().unwrap());
                assert!(rel_diff(q.lambda(), p.lambda()) < 1e-9, "{rule}");
                assert!(vec_rel_diff(q.zeta(), p.zeta()) < 1e-9, "{rule}");
            }
        });
    }
}
