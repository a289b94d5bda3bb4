//! Error statistics over Monte Carlo runs: RMSE, average 2-sigma and the
//! NEES chi-square consistency test.

use nalgebra::{DMatrix, DVector};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use super::run::RunResult;
use crate::error::{Error, Result};
use crate::gaussian::StateKey;
use crate::linalg;
use crate::local_filter::RobotId;
use crate::models::wrap_angle;

/// Two-sided 95% acceptance region for the run-averaged NEES of an
/// `dim`-dimensional state over `runs` runs.
pub fn nees_bounds(dim: usize, runs: usize) -> (f64, f64) {
    let dof = (dim * runs) as f64;
    let chi = ChiSquared::new(dof).expect("positive degrees of freedom");
    (chi.inverse_cdf(0.025) / runs as f64, chi.inverse_cdf(0.975) / runs as f64)
}

/// Estimate minus truth, with the listed components wrapped to (-pi, pi].
pub fn residual(mean: &DVector<f64>, truth: &DVector<f64>, angles: &[usize]) -> DVector<f64> {
    let mut e = mean - truth;
    for &i in angles {
        e[i] = wrap_angle(e[i]);
    }
    e
}

pub fn nees(mean: &DVector<f64>, cov: &DMatrix<f64>, truth: &DVector<f64>, angles: &[usize]) -> Result<f64> {
    let e = residual(mean, truth, angles);
    let p_inv = linalg::spd_inverse(cov).ok_or(Error::SingularCovariance)?;
    Ok((e.transpose() * p_inv * &e)[(0, 0)])
}

/// Per-tick statistics of one robot across runs.
#[derive(Clone, Debug, PartialEq)]
pub struct RobotMetrics {
    pub robot: RobotId,
    pub dim: usize,
    pub runs: usize,
    pub rmse: Vec<f64>,
    pub two_sigma: Vec<f64>,
    pub nees: Vec<f64>,
    pub nees_lo: f64,
    pub nees_hi: f64,
}

impl RobotMetrics {
    /// Fraction of ticks whose average NEES lies inside the bounds.
    pub fn nees_in_bounds_fraction(&self) -> f64 {
        let inside = self.nees.iter().filter(|&&v| v >= self.nees_lo && v <= self.nees_hi).count();
        inside as f64 / self.nees.len().max(1) as f64
    }

    /// Fraction of ticks with RMSE at or below the average 2-sigma.
    pub fn rmse_within_two_sigma_fraction(&self) -> f64 {
        let inside = self.rmse.iter().zip(&self.two_sigma).filter(|(r, s)| r <= s).count();
        inside as f64 / self.rmse.len().max(1) as f64
    }

    pub fn mean_rmse(&self) -> f64 {
        mean(&self.rmse)
    }

    pub fn mean_two_sigma(&self) -> f64 {
        mean(&self.two_sigma)
    }

    pub fn mean_nees(&self) -> f64 {
        mean(&self.nees)
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

/// RMSE, average 2-sigma and average NEES per robot per tick.
pub fn robot_metrics(runs: &[RunResult]) -> Result<Vec<RobotMetrics>> {
    let Some(first) = runs.first() else {
        return Ok(Vec::new());
    };
    let mut out = Vec::new();
    for proto in &first.robots {
        let n = proto.dim();
        let ticks = proto.ticks.len();
        let angles = proto.angle_indices();
        let mut sq = vec![0.0; ticks];
        let mut sig = vec![0.0; ticks];
        let mut ne = vec![0.0; ticks];
        for run in runs {
            let s = run.robot(proto.robot).ok_or_else(|| {
                Error::DimensionMismatch(format!("run {} has no robot {}", run.run, proto.robot))
            })?;
            if s.ticks.len() != ticks {
                return Err(Error::DimensionMismatch(format!("run {} has {} ticks", run.run, s.ticks.len())));
            }
            for (k, t) in s.ticks.iter().enumerate() {
                let e = residual(&t.mean, &t.truth, &angles);
                sq[k] += e.norm_squared() / n as f64;
                sig[k] += 2.0 * (t.cov.trace() / n as f64).sqrt();
                ne[k] += nees(&t.mean, &t.cov, &t.truth, &angles)?;
            }
        }
        let m = runs.len() as f64;
        let (lo, hi) = nees_bounds(n, runs.len());
        out.push(RobotMetrics {
            robot: proto.robot,
            dim: n,
            runs: runs.len(),
            rmse: sq.iter().map(|v| (v / m).sqrt()).collect(),
            two_sigma: sig.iter().map(|v| v / m).collect(),
            nees: ne.iter().map(|v| v / m).collect(),
            nees_lo: lo,
            nees_hi: hi,
        });
    }
    Ok(out)
}

/// Average 2-sigma over runs of one robot's marginal over `keys`, per tick.
pub fn marginal_two_sigma(runs: &[RunResult], robot: RobotId, keys: &[StateKey]) -> Result<Vec<f64>> {
    let mut acc: Vec<f64> = Vec::new();
    for run in runs {
        let s = run
            .robot(robot)
            .ok_or_else(|| Error::DimensionMismatch(format!("run {} has no robot {robot}", run.run)))?;
        let idx = s.indices_of(keys)?;
        if acc.is_empty() {
            acc = vec![0.0; s.ticks.len()];
        }
        for (k, t) in s.ticks.iter().enumerate() {
            let p = linalg::select(&t.cov, &idx, &idx);
            acc[k] += 2.0 * (p.trace() / idx.len() as f64).sqrt();
        }
    }
    let m = runs.len().max(1) as f64;
    Ok(acc.into_iter().map(|v| v / m).collect())
}
