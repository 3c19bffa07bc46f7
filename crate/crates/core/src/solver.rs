//! Damped Newton iteration for systems of estimating equations.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    /// Threshold on both the sup-norm of the score and the Newton step.
    pub tol: f64,
    pub max_iter: usize,
    /// Maximum number of step halvings per iteration.
    pub step_halvings: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 100,
            step_halvings: 20,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) || self.max_iter < 1 {
            return Err(Error::InvalidParameter(format!(
                "solver needs tol > 0 and max_iter >= 1, got tol = {}, max_iter = {}",
                self.tol, self.max_iter
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub x: DVector<f64>,
    pub iterations: usize,
    pub score_norm: f64,
}

pub(crate) fn sup_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

/// Solves `score(x) = 0` by Newton's method with step halving.
///
/// `jacobian` returns `d score / d x'`. A trial point is rejected, and the step
/// halved, when the score cannot be evaluated there or its norm grows.
pub fn solve<S, J>(mut score: S, mut jacobian: J, init: DVector<f64>, cfg: &SolverConfig) -> Result<Solution>
where
    S: FnMut(&DVector<f64>) -> Result<DVector<f64>>,
    J: FnMut(&DVector<f64>) -> Result<DMatrix<f64>>,
{
    cfg.validate()?;
    let mut x = init;
    let mut u = score(&x)?;
    if u.len() != x.len() {
        return Err(Error::DimensionMismatch(format!(
            "score has length {}, parameter has length {}",
            u.len(),
            x.len()
        )));
    }
    let mut norm = sup_norm(&u);
    if !norm.is_finite() {
        return Err(Error::InvalidParameter("score is not finite at the initial point".into()));
    }
    if norm <= cfg.tol {
        return Ok(Solution {
            x,
            iterations: 0,
            score_norm: norm,
        });
    }
    for iter in 1..=cfg.max_iter {
        let jac = jacobian(&x)?;
        let step = jac
            .lu()
            .solve(&(-&u))
            .filter(|s| s.iter().all(|v| v.is_finite()))
            .ok_or_else(|| Error::Singular(format!("Jacobian is singular at iteration {iter}")))?;

        let mut scale = 1.0;
        let mut accepted: Option<(DVector<f64>, DVector<f64>, f64)> = None;
        let mut fallback: Option<(DVector<f64>, DVector<f64>, f64)> = None;
        for _ in 0..=cfg.step_halvings {
            let trial = &x + &step * scale;
            if let Ok(ut) = score(&trial) {
                let nt = sup_norm(&ut);
                if nt.is_finite() {
                    if nt < norm || nt <= cfg.tol {
                        accepted = Some((trial, ut, nt));
                        break;
                    }
                    fallback = Some((trial, ut, nt));
                }
            }
            scale *= 0.5;
        }
        let Some((xn, un, nn)) = accepted.or(fallback) else {
            return Err(Error::NonConvergence {
                iterations: iter,
                score_norm: norm,
                last_iterate: x.iter().copied().collect(),
            });
        };
        let step_norm = sup_norm(&(&xn - &x));
        x = xn;
        u = un;
        norm = nn;
        // Sums over many subjects carry rounding noise above `tol`; a vanishing
        // step with a small score is accepted as well.
        if norm <= cfg.tol || (step_norm <= cfg.tol && norm <= cfg.tol.sqrt()) {
            return Ok(Solution {
                x,
                iterations: iter,
                score_norm: norm,
            });
        }
    }
    Err(Error::NonConvergence {
        iterations: cfg.max_iter,
        score_norm: norm,
        last_iterate: x.iter().copied().collect(),
    })
}

/// Central-difference Jacobian of `f` with step `max(1e-6, 1e-6 |x_k|)`.
pub fn numeric_jacobian<F>(mut f: F, x: &DVector<f64>) -> Result<DMatrix<f64>>
where
    F: FnMut(&DVector<f64>) -> Result<DVector<f64>>,
{
    let p = x.len();
    let mut cols: Vec<DVector<f64>> = Vec::with_capacity(p);
    for k in 0..p {
        let h = fd_step(x[k]);
        let mut up = x.clone();
        let mut dn = x.clone();
        up[k] += h;
        dn[k] -= h;
        let fu = f(&up)?;
        let fd = f(&dn)?;
        cols.push((fu - fd) / (2.0 * h));
    }
    let m = cols.first().map_or(0, |c| c.len());
    let mut jac = DMatrix::zeros(m, p);
    for (k, c) in cols.iter().enumerate() {
        jac.set_column(k, c);
    }
    Ok(jac)
}

#[inline]
pub fn fd_step(x: f64) -> f64 {
    (1e-6 * x.abs()).max(1e-6)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn linear_root_in_one_step() {
        let s = solve(
            |b| Ok(DVector::from_element(1, b[0] - 2.0)),
            |_| Ok(DMatrix::from_element(1, 1, 1.0)),
            DVector::from_element(1, 0.0),
            &SolverConfig::default(),
        )
        .unwrap();
        assert_eq!(s.x[0], 2.0);
        assert_eq!(s.iterations, 1);
    }

    #[test]
    fn two_dimensional_root() {
        let cfg = SolverConfig {
            tol: 1e-10,
            ..Default::default()
        };
        let s = solve(
            |b| Ok(DVector::from_vec(vec![b[0] * b[0] - 1.0, b[1]])),
            |b| Ok(DMatrix::from_row_slice(2, 2, &[2.0 * b[0], 0.0, 0.0, 1.0])),
            DVector::from_vec(vec![2.0, 1.0]),
            &cfg,
        )
        .unwrap();
        assert!((s.x[0] - 1.0).abs() < 1e-10);
        assert!(s.x[1].abs() < 1e-10);
    }

    #[test]
    fn constant_score_does_not_converge() {
        let cfg = SolverConfig {
            max_iter: 7,
            ..Default::default()
        };
        let err = solve(
            |_| Ok(DVector::from_element(1, 1.0)),
            |_| Ok(DMatrix::from_element(1, 1, 1.0)),
            DVector::from_element(1, 0.0),
            &cfg,
        )
        .unwrap_err();
        match err {
            Error::NonConvergence {
                iterations,
                last_iterate,
                ..
            } => {
                assert_eq!(iterations, 7);
                assert_eq!(last_iterate.len(), 1);
            }
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn singular_jacobian_is_reported() {
        let err = solve(
            |b| Ok(DVector::from_element(1, b[0] - 1.0)),
            |_| Ok(DMatrix::from_element(1, 1, 0.0)),
            DVector::from_element(1, 0.0),
            &SolverConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Singular(_)));
    }

    #[test]
    fn halving_rejects_invalid_region() {
        // log-likelihood score of an exponential rate; undefined for b <= 0.
        let score = |b: &DVector<f64>| {
            if b[0] <= 0.0 {
                Err(Error::InvalidParameter("rate".into()))
            } else {
                Ok(DVector::from_element(1, 1.0 / b[0] - 2.0))
            }
        };
        let s = solve(
            score,
            |b| Ok(DMatrix::from_element(1, 1, -1.0 / (b[0] * b[0]))),
            DVector::from_element(1, 3.0),
            &SolverConfig::default(),
        )
        .unwrap();
        assert!((s.x[0] - 0.5).abs() < 1e-8);
    }

    #[test]
    fn numeric_jacobian_of_quadratic() {
        let j = numeric_jacobian(
            |v| Ok(DVector::from_vec(vec![v[0] * v[1], v[1] * v[1]])),
            &DVector::from_vec(vec![2.0, 3.0]),
        )
        .unwrap();
        assert!((j[(0, 0)] - 3.0).abs() < 1e-8);
        assert!((j[(0, 1)] - 2.0).abs() < 1e-8);
        assert!(j[(1, 0)].abs() < 1e-8);
        assert!((j[(1, 1)] - 6.0).abs() < 1e-6);
    }

    proptest! {
        #[test]
        fn permutation_invariance(a in -3.0..3.0f64, b in 0.5..3.0f64) {
            // f(x, y) = (x^3 + x - a, y - b), and its coordinate swap.
            let cfg = SolverConfig::default();
            let s1 = solve(
                |v| Ok(DVector::from_vec(vec![v[0].powi(3) + v[0] - a, v[1] - b])),
                |v| Ok(DMatrix::from_row_slice(2, 2, &[3.0 * v[0] * v[0] + 1.0, 0.0, 0.0, 1.0])),
                DVector::from_vec(vec![0.0, 0.0]),
                &cfg,
            ).unwrap();
            let s2 = solve(
                |v| Ok(DVector::from_vec(vec![v[0] - b, v[1].powi(3) + v[1] - a])),
                |v| Ok(DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 3.0 * v[1] * v[1] + 1.0])),
                DVector::from_vec(vec![0.0, 0.0]),
                &cfg,
            ).unwrap();
            prop_assert!((s1.x[0] - s2.x[1]).abs() < 1e-10);
            prop_assert!((s1.x[1] - s2.x[0]).abs() < 1e-10);
        }
    }
}
