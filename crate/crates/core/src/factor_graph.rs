//! Factor graphs over information-form factors.
//!
//! The local joint density is the product of all factor payloads. Graphs are
//! persistent values: every operation returns a new graph and leaves the input
//! untouched.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::gaussian::{InfoForm, VariableId, VariableOrdering};
use crate::linalg;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Provenance {
    Prior,
    Transition,
    Measurement,
    Fusion,
    Elimination,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Factor {
    id: u64,
    provenance: Provenance,
    payload: InfoForm,
}

impl Factor {
    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn payload(&self) -> &InfoForm {
        &self.payload
    }

    pub fn touches(&self, vars: &BTreeSet<VariableId>) -> bool {
        self.payload.ordering().iter().any(|v| vars.contains(v))
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FactorGraph {
    variables: BTreeSet<VariableId>,
    factors: Vec<Factor>,
    next_id: u64,
}

/// Output of [`FactorGraph::conservative_refactor`].
#[derive(Clone, Debug)]
pub struct Refactored {
    pub graph: FactorGraph,
    /// Deflation applied to the structured part; 1 when nothing changed.
    pub lambda: f64,
}

/// Bisection tolerance on the deflation scale.
pub const DEFLATION_TOL: f64 = 1e-10;

impl FactorGraph {
    pub fn new() -> Self {
        FactorGraph::default()
    }

    pub fn variables(&self) -> &BTreeSet<VariableId> {
        &self.variables
    }

    pub fn factors(&self) -> &[Factor] {
        &self.factors
    }

    pub fn is_empty(&self) -> bool {
        self.factors.is_empty()
    }

    /// Factor id to the variables it is connected to.
    pub fn adjacency(&self) -> BTreeMap<u64, Vec<VariableId>> {
        self.factors
            .iter()
            .map(|f| (f.id, f.payload.ordering().vars().to_vec()))
            .collect()
    }

    pub fn ordering(&self) -> VariableOrdering {
        VariableOrdering::new(self.variables.iter().copied()).expect("consistent dims")
    }

    /// Add a factor; panics on an empty payload ordering.
    pub fn add_factor(&self, provenance: Provenance, payload: InfoForm) -> FactorGraph {
        let mut g = self.clone();
        g.push(provenance, payload);
        g
    }

    fn push(&mut self, provenance: Provenance, payload: InfoForm) {
        assert!(
            !payload.ordering().is_empty(),
            "factor payload must reference at least one variable"
        );
        self.variables.extend(payload.ordering().iter().copied());
        self.factors.push(Factor {
            id: self.next_id,
            provenance,
            payload,
        });
        self.next_id += 1;
    }

    /// Register a variable with no factor attached.
    pub fn with_variable(&self, v: VariableId) -> FactorGraph {
        let mut g = self.clone();
        g.variables.insert(v);
        g
    }

    /// Product of all factors over the canonical ordering of the variable set.
    pub fn joint_info(&self) -> Result<InfoForm> {
        if self.factors.is_empty() {
            return Err(Error::EmptyGraph);
        }
        let ordering = self.ordering();
        let n = ordering.dim();
        let mut zeta = DVector::zeros(n);
        let mut lambda = DMatrix::zeros(n, n);
        for f in &self.factors {
            let idx = ordering.scalar_indices(f.payload.ordering())?;
            for (a, &ia) in idx.iter().enumerate() {
                zeta[ia] += f.payload.zeta()[a];
                for (b, &ib) in idx.iter().enumerate() {
                    lambda[(ia, ib)] += f.payload.lambda()[(a, b)];
                }
            }
        }
        InfoForm::new(ordering, zeta, lambda)
    }

    /// Marginalize out `drop`: all factors touching it collapse into one
    /// `Elimination` factor over their Markov blanket.
    pub fn eliminate_variables(&self, drop: &BTreeSet<VariableId>) -> Result<FactorGraph> {
        for v in drop {
            if !self.variables.contains(v) || !self.factors.iter().any(|f| f.payload.ordering().contains(v)) {
                return Err(Error::UnknownVariable(*v));
            }
        }
        let (touching, rest): (Vec<&Factor>, Vec<&Factor>) =
            self.factors.iter().partition(|f| f.touches(drop));
        let mut product: Option<InfoForm> = None;
        for f in &touching {
            product = Some(match product {
                None => f.payload.clone(),
                Some(p) => p.add(&f.payload),
            });
        }
        let mut g = FactorGraph {
            variables: self.variables.difference(drop).copied().collect(),
            factors: rest.into_iter().cloned().collect(),
            next_id: self.next_id,
        };
        if let Some(product) = product {
            let keep = VariableOrdering::new(
                product.ordering().iter().filter(|v| !drop.contains(v)).copied(),
            )?;
            let marginal = product.marginalize(&keep)?;
            if !keep.is_empty() {
                g.push(Provenance::Elimination, marginal);
            }
        }
        Ok(g)
    }

    /// Conservative re-factorization making `groups` conditionally
    /// independent of each other given `local`.
    ///
    /// The factors lying entirely within `local` and the groups are replaced
    /// by `lambda * M`, where `M` is their joint with the group-to-group
    /// cross terms zeroed and `lambda` is the largest value in (0, 1] with
    /// `lambda * M <= joint` in PSD order. If that `M` is indefinite the
    /// local-to-group terms are dropped as well. `M` is stored as one factor
    /// per group over the group and `local`, plus one over `local`. Means are
    /// kept. Factors reaching outside the scope (e.g. transitions) are
    /// untouched.
    pub fn conservative_refactor(
        &self,
        local: &BTreeSet<VariableId>,
        groups: &[BTreeSet<VariableId>],
    ) -> Result<Refactored> {
        let unchanged = || Refactored {
            graph: self.clone(),
            lambda: 1.0,
        };
        let groups: Vec<&BTreeSet<VariableId>> = groups.iter().filter(|g| !g.is_empty()).collect();
        let scope: BTreeSet<VariableId> = local.iter().chain(groups.iter().copied().flatten()).copied().collect();
        let (inside, outside): (Vec<&Factor>, Vec<&Factor>) = self
            .factors
            .iter()
            .partition(|f| f.payload.ordering().iter().all(|v| scope.contains(v)));
        if inside.is_empty() || groups.len() < 2 {
            return Ok(unchanged());
        }
        let scope_ord = VariableOrdering::new(scope.iter().copied())?;
        let mut joint = InfoForm::zero(scope_ord.clone());
        for f in &inside {
            joint = joint.add(&f.payload);
        }
        let lam = joint.lambda();
        let local_ord = VariableOrdering::new(local.iter().copied())?;
        let local_idx = scope_ord.scalar_indices(&local_ord)?;
        let group_ords: Vec<VariableOrdering> = groups
            .iter()
            .map(|g| VariableOrdering::new(g.iter().copied()))
            .collect::<Result<_>>()?;
        let group_idx: Vec<Vec<usize>> = group_ords
            .iter()
            .map(|g| scope_ord.scalar_indices(g))
            .collect::<Result<_>>()?;

        let mut template = lam.clone();
        for (a, ia) in group_idx.iter().enumerate() {
            for ib in &group_idx[a + 1..] {
                for &r in ia {
                    for &c in ib {
                        template[(r, c)] = 0.0;
                        template[(c, r)] = 0.0;
                    }
                }
            }
        }
        if linalg::max_abs(&(lam - &template)) <= 1e-12 * (1.0 + linalg::max_abs(lam)) {
            return Ok(unchanged());
        }
        let coupled = linalg::is_psd(&template);
        if !coupled {
            for ig in &group_idx {
                for &r in ig {
                    for &c in &local_idx {
                        template[(r, c)] = 0.0;
                        template[(c, r)] = 0.0;
                    }
                }
            }
        }

        let mean = joint.to_moment()?.mean().clone();
        let scale = deflation_scale(lam, &template)?;
        let mut g = FactorGraph {
            variables: self.variables.clone(),
            factors: outside.into_iter().cloned().collect(),
            next_id: self.next_id,
        };
        let push_block = |g: &mut FactorGraph, ord: VariableOrdering, idx: &[usize], block: DMatrix<f64>| -> Result<()> {
            let block = block * scale;
            if linalg::max_abs(&block) == 0.0 {
                return Ok(());
            }
            let zeta = &block * linalg::select_vec(&mean, idx);
            g.push(Provenance::Prior, InfoForm::new(ord, zeta, block)?);
            Ok(())
        };
        let mut local_block = linalg::select(&template, &local_idx, &local_idx);
        for (ord, ig) in group_ords.iter().zip(&group_idx) {
            let gg = linalg::select(&template, ig, ig);
            if !coupled || local_idx.is_empty() {
                push_block(&mut g, ord.clone(), ig, gg)?;
                continue;
            }
            let lg = linalg::select(&template, &local_idx, ig);
            let gg_inv = linalg::spd_inverse(&gg).ok_or(Error::SingularInformation {
                min_eig: linalg::eig_range(&gg).0,
                max_eig: linalg::eig_range(&gg).1,
            })?;
            let ll = &lg * gg_inv * lg.transpose();
            local_block -= &ll;
            let clique_ord = VariableOrdering::new(local.iter().chain(ord.iter()).copied())?;
            let clique_idx = scope_ord.scalar_indices(&clique_ord)?;
            let mut block = linalg::select(&template, &clique_idx, &clique_idx);
            let pos_l = clique_ord.scalar_indices(&local_ord)?;
            for (a, &ra) in pos_l.iter().enumerate() {
                for (b, &rb) in pos_l.iter().enumerate() {
                    block[(ra, rb)] = ll[(a, b)];
                }
            }
            push_block(&mut g, clique_ord, &clique_idx, block)?;
        }
        if !local_idx.is_empty() {
            push_block(&mut g, local_ord, &local_idx, linalg::symmetrize(&local_block))?;
        }
        Ok(Refactored { graph: g, lambda: scale })
    }

    /// Apply the change of variables `old = g * new + c` to every factor
    /// touching `old`, renaming it to `new` throughout the graph.
    pub fn substitute_variable(
        &self,
        old: &VariableId,
        new: VariableId,
        g: &DMatrix<f64>,
        c: &DVector<f64>,
    ) -> Result<FactorGraph> {
        if !self.variables.contains(old) {
            return Err(Error::UnknownVariable(*old));
        }
        let mut out = self.clone();
        out.variables.remove(old);
        out.variables.insert(new);
        for f in out.factors.iter_mut() {
            if f.payload.ordering().contains(old) {
                f.payload = f.payload.substitute(old, new, g, c)?;
            }
        }
        Ok(out)
    }

    /// Graphviz DOT text: variables as circles, factors as boxes.
    pub fn to_dot(&self, name: &str) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "graph \"{}\" {{", name);
        for v in &self.variables {
            let _ = writeln!(out, "  \"{}\" [shape=circle];", v);
        }
        for f in &self.factors {
            let _ = writeln!(
                out,
                "  \"f{}\" [shape=box, label=\"{:?}\"];",
                f.id, f.provenance
            );
            for v in f.payload.ordering().iter() {
                let _ = writeln!(out, "  \"f{}\" -- \"{}\";", f.id, v);
            }
        }
        out.push_str("}\n");
        out
    }
}

/// Largest `s` in (0, 1] with `joint - s * template` PSD, by bisection.
fn deflation_scale(joint: &DMatrix<f64>, template: &DMatrix<f64>) -> Result<f64> {
    let feasible = |s: f64| linalg::sym_eigenvalues(&(joint - template * s)).min() >= 0.0;
    if !linalg::is_psd(joint) {
        return Err(Error::DeflationFailure("joint information is not PSD".into()));
    }
    if linalg::is_psd(&(joint - template)) {
        return Ok(1.0);
    }
    let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
    while hi - lo > DEFLATION_TOL {
        let mid = 0.5 * (lo + hi);
        if feasible(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    if lo <= DEFLATION_TOL {
        return Err(Error::DeflationFailure(
            "no positive deflation keeps the estimate conservative".into(),
        ));
    }
    Ok(lo)
}
