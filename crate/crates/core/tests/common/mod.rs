#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use fgddf::gaussian::{InfoForm, MomentForm, StateKey, VariableId, VariableOrdering};

/// `n` variables with the given dimensions, all at time 0, as distinct targets.
pub fn ordering(dims: &[usize]) -> VariableOrdering {
    VariableOrdering::new(
        dims.iter()
            .enumerate()
            .map(|(i, &d)| VariableId::new(StateKey::target(i as u32 + 1), 0, d)),
    )
    .unwrap()
}

pub fn scalar_ordering(n: usize) -> VariableOrdering {
    ordering(&vec![1; n])
}

/// `A A^T + ridge I` from row-major entries of `A`.
pub fn spd_from(entries: &[f64], n: usize, ridge: f64) -> DMatrix<f64> {
    let a = DMatrix::from_row_slice(n, n, &entries[..n * n]);
    &a * a.transpose() + DMatrix::identity(n, n) * ridge
}

pub fn spd(n: usize) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-1.0..1.0f64, n * n).prop_map(move |v| spd_from(&v, n, 0.3))
}

pub fn vector(n: usize) -> impl Strategy<Value = DVector<f64>> {
    prop::collection::vec(-3.0..3.0f64, n).prop_map(DVector::from_vec)
}

pub fn info(n: usize) -> impl Strategy<Value = InfoForm> {
    (spd(n), vector(n)).prop_map(move |(l, z)| InfoForm::new(scalar_ordering(n), z, l).unwrap())
}

pub fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).abs().max()
}

pub fn rel_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    max_abs_diff(a, b) / (1.0 + b.abs().max())
}

pub fn vec_rel_diff(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).abs().max() / (1.0 + b.abs().max())
}

pub fn min_eig(m: &DMatrix<f64>) -> f64 {
    let s = (m + m.transpose()) * 0.5;
    s.symmetric_eigen().eigenvalues.min()
}

/// Plain moment-form Kalman filter.
#[derive(Clone, Debug)]
pub struct Kalman {
    pub x: DVector<f64>,
    pub p: DMatrix<f64>,
}

impl Kalman {
    pub fn from_moment(m: &MomentForm) -> Self {
        Kalman {
            x: m.mean().clone(),
            p: m.covariance().clone(),
        }
    }

    pub fn predict(&mut self, f: &DMatrix<f64>, b: &DVector<f64>, q: &DMatrix<f64>) {
        self.x = f * &self.x + b;
        self.p = f * &self.p * f.transpose() + q;
    }

    pub fn update(&mut self, h: &DMatrix<f64>, z: &DVector<f64>, r: &DMatrix<f64>) {
        let s = h * &self.p * h.transpose() + r;
        let k = &self.p * h.transpose() * s.try_inverse().unwrap();
        self.x = &self.x + &k * (z - h * &self.x);
        let n = self.p.nrows();
        let i_kh = DMatrix::identity(n, n) - &k * h;
        // Joseph form
        self.p = &i_kh * &self.p * i_kh.transpose() + &k * r * k.transpose();
    }
}

fn ln_gamma(x: f64) -> f64 {
    // Lanczos, g = 7
    const C: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    let x = x - 1.0;
    let mut a = C[0];
    let t = x + 7.5;
    for (i, c) in C.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Regularized lower incomplete gamma P(a, x): series below a + 1, Lentz
/// continued fraction for the upper tail above.
pub fn gamma_p(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    let lead = -x + a * x.ln() - ln_gamma(a);
    if x < a + 1.0 {
        let mut term = 1.0 / a;
        let mut sum = term;
        let mut n = a;
        for _ in 0..10_000 {
            n += 1.0;
            term *= x / n;
            sum += term;
            if term.abs() < sum.abs() * 1e-16 {
                break;
            }
        }
        sum * lead.exp()
    } else {
        let tiny = 1e-300;
        let mut b = x + 1.0 - a;
        let mut c = 1.0 / tiny;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..10_000 {
            let an = -(i as f64) * (i as f64 - a);
            b += 2.0;
            d = an * d + b;
            if d.abs() < tiny {
                d = tiny;
            }
            c = b + an / c;
            if c.abs() < tiny {
                c = tiny;
            }
            d = 1.0 / d;
            let del = d * c;
            h *= del;
            if (del - 1.0).abs() < 1e-16 {
                break;
            }
        }
        1.0 - lead.exp() * h
    }
}

/// Chi-square quantile by bisection on the CDF.
pub fn chi2_quantile(dof: f64, p: f64) -> f64 {
    let cdf = |x: f64| gamma_p(dof / 2.0, x / 2.0);
    let (mut lo, mut hi) = (0.0, dof.max(1.0));
    while cdf(hi) < p {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if cdf(mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Trace or log-det of `(w A + (1 - w) B)^-1`, evaluated by an explicit inverse.
pub fn ci_cost_oracle(a: &DMatrix<f64>, b: &DMatrix<f64>, w: f64, log_det: bool) -> f64 {
    let m = a * w + b * (1.0 - w);
    match m.clone().try_inverse() {
        Some(p) if min_eig(&m) > 0.0 => {
            if log_det {
                p.determinant().ln()
            } else {
                p.trace()
            }
        }
        _ => f64::INFINITY,
    }
}

/// Argmin of the CI cost over an evenly spaced grid on [0, 1].
pub fn ci_grid_oracle(a: &DMatrix<f64>, b: &DMatrix<f64>, points: usize, log_det: bool) -> f64 {
    let mut best = (0.0, f64::INFINITY);
    for k in 0..points {
        let w = k as f64 / (points - 1) as f64;
        let c = ci_cost_oracle(a, b, w, log_det);
        if c < best.1 {
            best = (w, c);
        }
    }
    best.0
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let e = m.clone().symmetric_eigen();
    let d = DMatrix::from_diagonal(&e.eigenvalues.map(|x| x.max(0.0).sqrt()));
    &e.eigenvectors * d * e.eigenvectors.transpose()
}

/// Worst (smallest) eigenvalue of `P_f - MSE` over sampled cross-covariances.
///
/// Each draw picks 2x2 covariances `P_i`, `P_j` and a cross term
/// `P_ij = P_i^(1/2) C P_j^(1/2)` with `||C||_2 <= 1`, which spans every
/// valid joint. `P_f` is the CI covariance at the given weight and the MSE is
/// the exact error covariance of the CI estimate under that joint.
pub fn ci_cross_covariance_worst<R: rand::Rng>(
    rng: &mut R,
    draws: usize,
    weight: impl Fn(&DMatrix<f64>, &DMatrix<f64>) -> f64,
) -> f64 {
    let mut worst = f64::INFINITY;
    let entry = |rng: &mut R| rng.random_range(-1.0..1.0);
    for _ in 0..draws {
        let a: Vec<f64> = (0..4).map(|_| entry(rng)).collect();
        let b: Vec<f64> = (0..4).map(|_| entry(rng)).collect();
        let c: Vec<f64> = (0..4).map(|_| entry(rng)).collect();
        let pi = spd_from(&a, 2, 0.1);
        let pj = spd_from(&b, 2, 0.1);
        let mut cm = DMatrix::from_row_slice(2, 2, &c);
        let norm = cm.clone().svd(false, false).singular_values.max();
        // a third of the draws sit on the boundary of the valid set
        let scale: f64 = if rng.random_bool(0.3) { 1.0 } else { rng.random_range(0.0..1.0) };
        cm *= scale / norm.max(1e-12);
        let pij = sym_sqrt(&pi) * cm * sym_sqrt(&pj);
        let li = pi.clone().try_inverse().unwrap();
        let lj = pj.clone().try_inverse().unwrap();
        let w = weight(&li, &lj);
        let pf = (&li * w + &lj * (1.0 - w)).try_inverse().unwrap();
        let ki = &pf * &li * w;
        let kj = &pf * &lj * (1.0 - w);
        let mse = &ki * &pi * ki.transpose()
            + &kj * &pj * kj.transpose()
            + &ki * &pij * kj.transpose()
            + &kj * pij.transpose() * ki.transpose();
        worst = worst.min(min_eig(&(pf - mse)));
    }
    worst
}

pub fn inline_scenario(cfg: serde_json::Value) -> fgddf::harness::Scenario {
    let path = std::path::Path::new("inline.json");
    let cfg = fgddf::harness::config::parse_config(cfg, path).unwrap();
    fgddf::harness::Scenario::from_config(&cfg, path).unwrap()
}

pub fn shipped_scenario(name: &str) -> fgddf::harness::Scenario {
    let p = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name);
    fgddf::harness::config::load_scenario(&p).unwrap()
}

/// Linear chain of robots with position sensors and NCV targets; robot `i`
/// tracks targets `i` and `i + 1`, so neighbors share one target.
pub fn linear_chain(robots: u32, steps: usize, p: f64) -> serde_json::Value {
    let robot = |id: u32| {
        serde_json::json!({
            "id": id,
            "sensor": {"type": "position", "noise": [0.5 + 0.2 * id as f64, 1.0]},
            "targets": [id, id + 1]
        })
    };
    let target = |id: u32| {
        serde_json::json!({
            "id": id,
            "model": {"type": "ncv", "q": 0.1},
            "initial": [id as f64, 0.2, -(id as f64), 0.1],
            "prior_variance": [2.0, 0.5, 2.0, 0.5]
        })
    };
    serde_json::json!({
        "name": "chain",
        "dt": 0.1,
        "steps": steps,
        "fusion": "hs-cf",
        "delivery_probability": p,
        "mc_runs": 1,
        "seed": 11,
        "landmarks": [],
        "robots": (1..=robots).map(robot).collect::<Vec<_>>(),
        "targets": (1..=robots + 1).map(target).collect::<Vec<_>>(),
        "topology": {"edges": (1..robots).map(|i| [i, i + 1]).collect::<Vec<_>>()}
    })
}

/// Moment-form Kalman filter over the stacked NCV targets of a scenario with
/// plain position sensors, fed every robot's measurements. Returns the
/// posterior after each tick and the offset of each target in the stack.
pub fn ncv_kalman_oracle(
    scn: &fgddf::harness::Scenario,
    truth: &fgddf::harness::sim::Truth,
    q: f64,
) -> (Vec<Kalman>, std::collections::BTreeMap<StateKey, usize>) {
    use fgddf::local_filter::Measurement;
    let keys: Vec<StateKey> = scn.targets.iter().map(|t| t.state.key).collect();
    let offset: std::collections::BTreeMap<StateKey, usize> = keys.iter().enumerate().map(|(i, &k)| (k, 4 * i)).collect();
    let n = 4 * keys.len();
    let (f1, q1) = fgddf::models::NcvTargetParams { q, dt: scn.config.dt }.transition_matrices();
    let mut f = DMatrix::zeros(n, n);
    let mut qm = DMatrix::zeros(n, n);
    let mut kf = Kalman {
        x: DVector::zeros(n),
        p: DMatrix::zeros(n, n),
    };
    for (t, &key) in keys.iter().enumerate() {
        let o = 4 * t;
        for r in 0..4 {
            for c in 0..4 {
                f[(o + r, o + c)] = f1[(r, c)];
                qm[(o + r, o + c)] = q1[(r, c)];
            }
        }
        let s = scn.state(key).unwrap();
        kf.x.rows_mut(o, 4).copy_from(&s.initial);
        kf.p.view_mut((o, o), (4, 4)).copy_from(&s.prior_cov);
    }
    let mut out = Vec::with_capacity(truth.measurements.len());
    for tick in &truth.measurements {
        kf.predict(&f, &DVector::zeros(n), &qm);
        for m in tick.values().flatten() {
            let Measurement::Linear { terms, z, noise } = m else {
                panic!("linear measurements only")
            };
            let mut h = DMatrix::zeros(z.len(), n);
            for (key, hk) in terms {
                h.view_mut((0, offset[key]), (z.len(), hk.ncols())).copy_from(hk);
            }
            kf.update(&h, z, noise);
        }
        out.push(kf.clone());
    }
    (out, offset)
}

/// Rows of the oracle stack for the given states.
pub fn stack_indices(offset: &std::collections::BTreeMap<StateKey, usize>, states: &[fgddf::local_filter::StateSpec]) -> Vec<usize> {
    states.iter().flat_map(|s| (0..s.dim).map(move |i| offset[&s.key] + i)).collect()
}

pub fn select_vec(v: &DVector<f64>, idx: &[usize]) -> DVector<f64> {
    DVector::from_iterator(idx.len(), idx.iter().map(|&i| v[i]))
}

pub fn select_mat(m: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(idx.len(), idx.len(), |r, c| m[(idx[r], idx[c])])
}
