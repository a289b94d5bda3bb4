//! Multivariate Gaussians in information (canonical) form.
//!
//! A density is carried as the pair (ζ, Λ) over an ordered set of variables.
//! Products of densities are sums of aligned pairs, division is subtraction,
//! and marginalization is a Schur complement. Every `InfoForm` lives on a
//! [`VariableOrdering`] that is sorted canonically by (kind, owner, time), so
//! two robots holding the same variable set always agree entry-by-entry.

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::fmt;
use std::hash::{Hash, Hasher};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarKind {
    RobotPose,
    TargetState,
    BiasState,
}

impl VarKind {
    pub fn as_str(self) -> &'static str {
        match self {
            VarKind::RobotPose => "robot_pose",
            VarKind::TargetState => "target_state",
            VarKind::BiasState => "bias_state",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "robot_pose" => Some(VarKind::RobotPose),
            "target_state" => Some(VarKind::TargetState),
            "bias_state" => Some(VarKind::BiasState),
            _ => None,
        }
    }
}

/// Time-independent identity of a state: which robot pose, target, or bias.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct StateKey {
    pub kind: VarKind,
    pub owner: u32,
}

impl StateKey {
    pub fn pose(owner: u32) -> Self {
        StateKey { kind: VarKind::RobotPose, owner }
    }

    pub fn target(owner: u32) -> Self {
        StateKey { kind: VarKind::TargetState, owner }
    }

    pub fn bias(owner: u32) -> Self {
        StateKey { kind: VarKind::BiasState, owner }
    }
}

impl fmt::Display for StateKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = match self.kind {
            VarKind::RobotPose => "r",
            VarKind::TargetState => "t",
            VarKind::BiasState => "s",
        };
        write!(f, "{}{}", tag, self.owner)
    }
}

/// A vector-valued random variable at one time index.
///
/// Identity (equality, ordering, hashing) is the triple (kind, owner, time);
/// `dim` is the number of scalar components and is carried along.
#[derive(Clone, Copy, Debug)]
pub struct VariableId {
    pub kind: VarKind,
    pub owner: u32,
    pub time: i64,
    pub dim: usize,
}

impl VariableId {
    pub fn new(key: StateKey, time: i64, dim: usize) -> Self {
        assert!(dim >= 1, "variable must have at least one component");
        VariableId {
            kind: key.kind,
            owner: key.owner,
            time,
            dim,
        }
    }

    pub fn key(&self) -> StateKey {
        StateKey {
            kind: self.kind,
            owner: self.owner,
        }
    }

    pub fn at_time(&self, time: i64) -> Self {
        VariableId { time, ..*self }
    }

    fn triple(&self) -> (VarKind, u32, i64) {
        (self.kind, self.owner, self.time)
    }
}

impl PartialEq for VariableId {
    fn eq(&self, other: &Self) -> bool {
        self.triple() == other.triple()
    }
}

impl Eq for VariableId {}

impl PartialOrd for VariableId {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for VariableId {
    fn cmp(&self, other: &Self) -> Ordering {
        self.triple().cmp(&other.triple())
    }
}

impl Hash for VariableId {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.triple().hash(state)
    }
}

impl fmt::Display for VariableId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}", self.key(), self.time)
    }
}

/// Canonically sorted, duplicate-free list of variables with scalar offsets.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct VariableOrdering {
    vars: Vec<VariableId>,
    offsets: Vec<usize>,
    dim: usize,
}

impl VariableOrdering {
    pub fn new(vars: impl IntoIterator<Item = VariableId>) -> Result<Self> {
        let mut vars: Vec<VariableId> = vars.into_iter().collect();
        vars.sort();
        for w in vars.windows(2) {
            if w[0] == w[1] && w[0].dim != w[1].dim {
                return Err(Error::DimensionMismatch(format!(
                    "variable {} declared with dims {} and {}",
                    w[0], w[0].dim, w[1].dim
                )));
            }
        }
        vars.dedup();
        let mut offsets = Vec::with_capacity(vars.len());
        let mut dim = 0;
        for v in &vars {
            offsets.push(dim);
            dim += v.dim;
        }
        Ok(VariableOrdering { vars, offsets, dim })
    }

    pub fn empty() -> Self {
        VariableOrdering::default()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    /// Total scalar dimension.
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn vars(&self) -> &[VariableId] {
        &self.vars
    }

    pub fn iter(&self) -> impl Iterator<Item = &VariableId> {
        self.vars.iter()
    }

    pub fn position(&self, v: &VariableId) -> Option<usize> {
        self.vars.binary_search(v).ok()
    }

    pub fn offset_of(&self, v: &VariableId) -> Option<usize> {
        self.position(v).map(|i| self.offsets[i])
    }

    pub fn contains(&self, v: &VariableId) -> bool {
        self.position(v).is_some()
    }

    pub fn is_subset_of(&self, other: &VariableOrdering) -> bool {
        self.vars.iter().all(|v| other.contains(v))
    }

    pub fn union(&self, other: &VariableOrdering) -> Result<Self> {
        VariableOrdering::new(self.vars.iter().chain(other.vars.iter()).copied())
    }

    pub fn to_set(&self) -> BTreeSet<VariableId> {
        self.vars.iter().copied().collect()
    }

    /// Scalar indices in `self` of every component of `sub`, in `sub`'s order.
    pub fn scalar_indices(&self, sub: &VariableOrdering) -> Result<Vec<usize>> {
        let mut idx = Vec::with_capacity(sub.dim());
        for v in sub.iter() {
            let off = self.offset_of(v).ok_or(Error::UnknownVariable(*v))?;
            idx.extend(off..off + v.dim);
        }
        Ok(idx)
    }
}

impl fmt::Display for VariableOrdering {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<String> = self.vars.iter().map(|v| v.to_string()).collect();
        write!(f, "[{}]", names.join(", "))
    }
}

/// Gaussian (or rank-deficient Gaussian factor) in information form.
#[derive(Clone, Debug, PartialEq)]
pub struct InfoForm {
    ordering: VariableOrdering,
    zeta: DVector<f64>,
    lambda: DMatrix<f64>,
}

impl InfoForm {
    pub fn new(ordering: VariableOrdering, zeta: DVector<f64>, lambda: DMatrix<f64>) -> Result<Self> {
        let n = ordering.dim();
        if zeta.len() != n || lambda.nrows() != n || lambda.ncols() != n {
            return Err(Error::DimensionMismatch(format!(
                "ordering dim {} vs zeta {} and lambda {}x{}",
                n,
                zeta.len(),
                lambda.nrows(),
                lambda.ncols()
            )));
        }
        Ok(InfoForm {
            ordering,
            zeta,
            lambda: linalg::symmetrize(&lambda),
        })
    }

    pub fn zero(ordering: VariableOrdering) -> Self {
        let n = ordering.dim();
        InfoForm {
            ordering,
            zeta: DVector::zeros(n),
            lambda: DMatrix::zeros(n, n),
        }
    }

    pub fn ordering(&self) -> &VariableOrdering {
        &self.ordering
    }

    pub fn zeta(&self) -> &DVector<f64> {
        &self.zeta
    }

    pub fn lambda(&self) -> &DMatrix<f64> {
        &self.lambda
    }

    pub fn dim(&self) -> usize {
        self.ordering.dim()
    }

    /// Zero-pad into a superset ordering.
    pub fn embed(&self, target: &VariableOrdering) -> Result<InfoForm> {
        if target == &self.ordering {
            return Ok(self.clone());
        }
        let idx = target.scalar_indices(&self.ordering)?;
        let n = target.dim();
        let mut zeta = DVector::zeros(n);
        let mut lambda = DMatrix::zeros(n, n);
        for (a, &ia) in idx.iter().enumerate() {
            zeta[ia] = self.zeta[a];
            for (b, &ib) in idx.iter().enumerate() {
                lambda[(ia, ib)] = self.lambda[(a, b)];
            }
        }
        Ok(InfoForm {
            ordering: target.clone(),
            zeta,
            lambda,
        })
    }

    /// Product of densities: entrywise sum over the union ordering.
    pub fn add(&self, other: &InfoForm) -> InfoForm {
        let ordering = self
            .ordering
            .union(&other.ordering)
            .expect("variables with equal identity must have equal dimension");
        let a = self.embed(&ordering).expect("subset of union");
        let b = other.embed(&ordering).expect("subset of union");
        InfoForm {
            ordering,
            zeta: a.zeta + b.zeta,
            lambda: linalg::symmetrize(&(a.lambda + b.lambda)),
        }
    }

    /// Division of densities. `other` must live on a subset of `self`'s variables;
    /// the result may be indefinite.
    pub fn subtract(&self, other: &InfoForm) -> Result<InfoForm> {
        let b = other.embed(&self.ordering)?;
        Ok(InfoForm {
            ordering: self.ordering.clone(),
            zeta: &self.zeta - b.zeta,
            lambda: linalg::symmetrize(&(&self.lambda - b.lambda)),
        })
    }

    pub fn scale(&self, c: f64) -> InfoForm {
        InfoForm {
            ordering: self.ordering.clone(),
            zeta: &self.zeta * c,
            lambda: &self.lambda * c,
        }
    }

    /// Raw (ζ, Λ) blocks for a subset of variables, without marginalizing.
    pub fn block(&self, sub: &VariableOrdering) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let idx = self.ordering.scalar_indices(sub)?;
        Ok((
            linalg::select_vec(&self.zeta, &idx),
            linalg::select(&self.lambda, &idx, &idx),
        ))
    }

    /// Marginal over `keep` via the Schur complement of the eliminated block.
    pub fn marginalize(&self, keep: &VariableOrdering) -> Result<InfoForm> {
        let keep_idx = self.ordering.scalar_indices(keep)?;
        let elim: Vec<VariableId> = self
            .ordering
            .iter()
            .filter(|v| !keep.contains(v))
            .copied()
            .collect();
        let elim_ord = VariableOrdering::new(elim)?;
        let zk = linalg::select_vec(&self.zeta, &keep_idx);
        let lkk = linalg::select(&self.lambda, &keep_idx, &keep_idx);
        if elim_ord.is_empty() {
            return InfoForm::new(keep.clone(), zk, lkk);
        }
        let elim_idx = self.ordering.scalar_indices(&elim_ord)?;
        let lee = linalg::select(&self.lambda, &elim_idx, &elim_idx);
        let lke = linalg::select(&self.lambda, &keep_idx, &elim_idx);
        let ze = linalg::select_vec(&self.zeta, &elim_idx);
        if !linalg::is_pd(&lee) {
            return Err(Error::SingularElimination);
        }
        let chol = linalg::symmetrize(&lee)
            .cholesky()
            .ok_or(Error::SingularElimination)?;
        let lee_inv_lek = chol.solve(&lke.transpose());
        let lee_inv_ze = chol.solve(&ze);
        let lambda = lkk - &lke * lee_inv_lek;
        let zeta = zk - &lke * lee_inv_ze;
        InfoForm::new(keep.clone(), zeta, lambda)
    }

    pub fn to_moment(&self) -> Result<MomentForm> {
        let (lo, hi) = linalg::eig_range(&self.lambda);
        if !(hi > 0.0 && lo > linalg::SINGULAR_REL * hi) {
            return Err(Error::SingularInformation {
                min_eig: lo,
                max_eig: hi,
            });
        }
        let cov = linalg::spd_inverse(&self.lambda).ok_or(Error::SingularInformation {
            min_eig: lo,
            max_eig: hi,
        })?;
        let mean = &cov * &self.zeta;
        Ok(MomentForm {
            ordering: self.ordering.clone(),
            mean,
            covariance: cov,
        })
    }

    /// True iff `other.Λ - self.Λ` is PSD, i.e. `self` claims no more information than `other`.
    pub fn is_conservative_wrt(&self, other: &InfoForm) -> Result<bool> {
        if self.ordering != other.ordering {
            return Err(Error::DimensionMismatch(format!(
                "orderings differ: {} vs {}",
                self.ordering, other.ordering
            )));
        }
        Ok(linalg::is_psd(&(&other.lambda - &self.lambda)))
    }

    /// Rename variables (e.g. advance time indices); entries are permuted into
    /// the canonical order of the renamed set.
    pub fn relabel(&self, f: impl Fn(&VariableId) -> VariableId) -> Result<InfoForm> {
        let renamed: Vec<VariableId> = self.ordering.iter().map(&f).collect();
        let ordering = VariableOrdering::new(renamed.iter().copied())?;
        if ordering.len() != self.ordering.len() {
            return Err(Error::DimensionMismatch("relabel merged distinct variables".into()));
        }
        let mut perm = Vec::with_capacity(self.dim());
        for new in &renamed {
            let off = ordering.offset_of(new).expect("present");
            perm.extend(off..off + new.dim);
        }
        let n = self.dim();
        let mut zeta = DVector::zeros(n);
        let mut lambda = DMatrix::zeros(n, n);
        for a in 0..n {
            zeta[perm[a]] = self.zeta[a];
            for b in 0..n {
                lambda[(perm[a], perm[b])] = self.lambda[(a, b)];
            }
        }
        Ok(InfoForm {
            ordering,
            zeta,
            lambda,
        })
    }

    /// Change of variables `old = g * new + c` for one variable, renaming it to `new_var`.
    pub fn substitute(
        &self,
        old_var: &VariableId,
        new_var: VariableId,
        g: &DMatrix<f64>,
        c: &DVector<f64>,
    ) -> Result<InfoForm> {
        let off = self
            .ordering
            .offset_of(old_var)
            .ok_or(Error::UnknownVariable(*old_var))?;
        let d = old_var.dim;
        if g.nrows() != d || g.ncols() != new_var.dim || c.len() != d || new_var.dim != d {
            return Err(Error::DimensionMismatch(format!(
                "substitution for {} has wrong shape",
                old_var
            )));
        }
        let n = self.dim();
        let mut t = DMatrix::identity(n, n);
        t.view_mut((off, off), (d, d)).copy_from(g);
        let mut shift = DVector::zeros(n);
        shift.rows_mut(off, d).copy_from(c);
        let lambda = t.transpose() * &self.lambda * &t;
        let zeta = t.transpose() * (&self.zeta - &self.lambda * shift);
        let moved = InfoForm::new(self.ordering.clone(), zeta, lambda)?;
        moved.relabel(|v| if v == old_var { new_var } else { *v })
    }
}

/// Gaussian in moment form (mean, covariance).
#[derive(Clone, Debug, PartialEq)]
pub struct MomentForm {
    ordering: VariableOrdering,
    mean: DVector<f64>,
    covariance: DMatrix<f64>,
}

impl MomentForm {
    pub fn new(ordering: VariableOrdering, mean: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        let n = ordering.dim();
        if mean.len() != n || covariance.nrows() != n || covariance.ncols() != n {
            return Err(Error::DimensionMismatch(format!(
                "ordering dim {} vs mean {} and covariance {}x{}",
                n,
                mean.len(),
                covariance.nrows(),
                covariance.ncols()
            )));
        }
        Ok(MomentForm {
            ordering,
            mean,
            covariance: linalg::symmetrize(&covariance),
        })
    }

    pub fn ordering(&self) -> &VariableOrdering {
        &self.ordering
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    pub fn to_info(&self) -> Result<InfoForm> {
        let lambda = linalg::spd_inverse(&self.covariance).ok_or(Error::SingularCovariance)?;
        let zeta = &lambda * &self.mean;
        Ok(InfoForm {
            ordering: self.ordering.clone(),
            zeta,
            lambda,
        })
    }

    /// Moment-space marginal: row/column selection.
    pub fn marginal(&self, keep: &VariableOrdering) -> Result<MomentForm> {
        let idx = self.ordering.scalar_indices(keep)?;
        Ok(MomentForm {
            ordering: keep.clone(),
            mean: linalg::select_vec(&self.mean, &idx),
            covariance: linalg::select(&self.covariance, &idx, &idx),
        })
    }

    /// Mean sub-vector for one variable.
    pub fn mean_of(&self, v: &VariableId) -> Result<DVector<f64>> {
        let off = self.ordering.offset_of(v).ok_or(Error::UnknownVariable(*v))?;
        Ok(self.mean.rows(off, v.dim).into_owned())
    }
}
