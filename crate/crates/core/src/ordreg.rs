//! Cumulative-logit (proportional odds) regression by Fisher scoring.
//!
//! `logit Pr(Y <= k | x) = a_k + x'b` for `k = 1..K-1`. With `K = 2` this is a
//! logistic model for `Pr(Y = 1)`. Used for the outcome transition model and for
//! the conditional models of the imputation engine.

use std::cell::RefCell;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::ordinal::{self, check_increasing, PROB_FLOOR};
use crate::solver::{solve, SolverConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct OrdRow {
    pub x: Vec<f64>,
    /// Category in `1..=K`.
    pub y: usize,
    pub w: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OrdRegFit {
    pub categories: usize,
    pub intercepts: Vec<f64>,
    pub slopes: Vec<f64>,
    /// Inverse of the (penalized) Fisher information.
    pub cov: DMatrix<f64>,
    pub iterations: usize,
}

impl OrdRegFit {
    pub fn params(&self) -> Vec<f64> {
        self.intercepts.iter().chain(&self.slopes).copied().collect()
    }

    /// Probabilities of all `K` categories.
    pub fn probs(&self, x: &[f64]) -> Vec<f64> {
        full_probs(&self.intercepts, &self.slopes, x)
    }

    /// Refit-free draw of the coefficients from their asymptotic normal law.
    /// Draws with disordered intercepts are rejected; after 100 rejections the
    /// point estimate is returned.
    pub fn draw_params<R: Rng + ?Sized>(&self, rng: &mut R) -> (Vec<f64>, Vec<f64>) {
        let p = self.cov.nrows();
        let chol = nalgebra::Cholesky::new(self.cov.clone());
        if let Some(chol) = chol {
            let l = chol.l();
            let mean = DVector::from_vec(self.params());
            let k = self.intercepts.len();
            for _ in 0..100 {
                let e = DVector::from_fn(p, |_, _| StandardNormal.sample(rng));
                let v = &mean + &l * e;
                let a = v.as_slice()[..k].to_vec();
                if check_increasing(&a).is_ok() {
                    return (a, v.as_slice()[k..].to_vec());
                }
            }
        }
        (self.intercepts.clone(), self.slopes.clone())
    }
}

pub(crate) fn full_probs(intercepts: &[f64], slopes: &[f64], x: &[f64]) -> Vec<f64> {
    let cum = ordinal::cumulative(intercepts, slopes, x);
    let mut out = Vec::with_capacity(cum.len() + 1);
    let mut prev = 0.0;
    for c in &cum {
        out.push(c - prev);
        prev = *c;
    }
    out.push(1.0 - prev);
    out
}

/// Draws a category in `1..=K` from `probs`.
pub(crate) fn draw_category<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return k + 1;
        }
    }
    probs.len()
}

pub fn loglik(rows: &[OrdRow], intercepts: &[f64], slopes: &[f64]) -> f64 {
    rows.iter()
        .map(|r| {
            let p = full_probs(intercepts, slopes, &r.x);
            r.w * p[r.y - 1].max(PROB_FLOOR).ln()
        })
        .sum()
}

/// Score and Fisher information of the weighted likelihood with a ridge
/// penalty `0.5 * ridge * |b|^2` on the slopes.
pub fn score_info(rows: &[OrdRow], k: usize, theta: &[f64], ridge: f64) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let nk = k - 1;
    let p = theta.len();
    let (a, b) = theta.split_at(nk);
    check_increasing(a)?;
    let mut u = DVector::zeros(p);
    let mut info = DMatrix::zeros(p, p);
    // Gradients of the K category probabilities, row-major.
    let mut grads = vec![0.0; k * p];
    let mut probs = vec![0.0; k];
    for r in rows {
        if r.w == 0.0 {
            continue;
        }
        let cum = ordinal::cumulative(a, b, &r.x);
        let dens = |j: usize| if j < nk { cum[j] * (1.0 - cum[j]) } else { 0.0 };
        grads.iter_mut().for_each(|g| *g = 0.0);
        for c in 0..k {
            let hi = if c < nk { cum[c] } else { 1.0 };
            let lo = if c > 0 { cum[c - 1] } else { 0.0 };
            probs[c] = (hi - lo).max(PROB_FLOOR);
            let g = &mut grads[c * p..(c + 1) * p];
            if c < nk {
                g[c] += dens(c);
            }
            if c > 0 {
                g[c - 1] -= dens(c - 1);
            }
            let s = dens(c) - if c > 0 { dens(c - 1) } else { 0.0 };
            for (gm, xm) in g[nk..].iter_mut().zip(&r.x) {
                *gm = s * xm;
            }
        }
        let gy = &grads[(r.y - 1) * p..r.y * p];
        for (ui, gi) in u.iter_mut().zip(gy) {
            *ui += r.w * gi / probs[r.y - 1];
        }
        for c in 0..k {
            let g = &grads[c * p..(c + 1) * p];
            let f = r.w / probs[c];
            for j in 0..p {
                let gj = f * g[j];
                if gj == 0.0 {
                    continue;
                }
                for l in 0..p {
                    info[(l, j)] += gj * g[l];
                }
            }
        }
    }
    if ridge > 0.0 {
        for j in nk..p {
            u[j] -= ridge * theta[j];
            info[(j, j)] += ridge;
        }
    }
    Ok((u, info))
}

/// Maximum-likelihood fit. Every category must be observed with positive weight.
pub fn fit(rows: &[OrdRow], k: usize, n_x: usize, ridge: f64, cfg: &SolverConfig) -> Result<OrdRegFit> {
    fit_from(rows, k, n_x, ridge, None, cfg)
}

/// As [`fit`], started from `init` when given.
pub fn fit_from(
    rows: &[OrdRow],
    k: usize,
    n_x: usize,
    ridge: f64,
    init: Option<&[f64]>,
    cfg: &SolverConfig,
) -> Result<OrdRegFit> {
    if k < 2 {
        return Err(Error::InvalidParameter(format!("need at least 2 categories, got {k}")));
    }
    if rows.is_empty() {
        return Err(Error::NoUsableOccasions);
    }
    let mut counts = vec![0.0; k];
    for r in rows {
        if r.x.len() != n_x {
            return Err(Error::DimensionMismatch(format!(
                "design row has {} entries, expected {n_x}",
                r.x.len()
            )));
        }
        if r.y < 1 || r.y > k {
            return Err(Error::InvalidData(format!("category {} outside 1..={k}", r.y)));
        }
        counts[r.y - 1] += r.w;
    }
    if let Some(c) = counts.iter().position(|c| *c <= 0.0) {
        return Err(Error::DegenerateCategory { category: c + 1 });
    }
    let init = match init {
        Some(v) if v.len() == k - 1 + n_x && check_increasing(&v[..k - 1]).is_ok() => v.to_vec(),
        _ => {
            let total: f64 = counts.iter().sum();
            let mut init = Vec::with_capacity(k - 1 + n_x);
            let mut acc = 0.0;
            for c in &counts[..k - 1] {
                acc += c;
                init.push(ordinal::logit(acc / total));
            }
            init.extend(std::iter::repeat_n(0.0, n_x));
            init
        }
    };

    // The solver asks for the score and then the Jacobian at the same point.
    let cache: RefCell<Option<(DVector<f64>, DMatrix<f64>)>> = RefCell::new(None);
    let sol = solve(
        |th| {
            let (u, info) = score_info(rows, k, th.as_slice(), ridge)?;
            *cache.borrow_mut() = Some((th.clone(), -info));
            Ok(u)
        },
        |th| match cache.borrow().as_ref() {
            Some((at, jac)) if at == th => Ok(jac.clone()),
            _ => Ok(-score_info(rows, k, th.as_slice(), ridge)?.1),
        },
        DVector::from_vec(init),
        cfg,
    )?;
    let theta = sol.x.as_slice();
    let (_, info) = score_info(rows, k, theta, ridge)?;
    let cov = info
        .try_inverse()
        .ok_or_else(|| Error::Singular("information matrix of the ordinal regression".into()))?;
    Ok(OrdRegFit {
        categories: k,
        intercepts: theta[..k - 1].to_vec(),
        slopes: theta[k - 1..].to_vec(),
        cov: (&cov + cov.transpose()) * 0.5,
        iterations: sol.iterations,
    })
}
