//! Markov model for the incomplete covariate `X` on a finite support.
//!
//! `logit Pr(X_t <= s_k | history) = c_k - f_t' g`, so for a binary `X`
//! `Pr(X_t = 1) = expit(-c_1 + f_t' g)` and `(-c_1, g)` are the usual logistic
//! coefficients. `f_t` holds the previous `X` (0 before the first occasion),
//! the chosen `Z_t` columns and, optionally, indicators of the previous
//! observed response.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ordinal::{self, SubjectRecord};
use crate::ordreg::{self, OrdRow};
use crate::solver::{numeric_jacobian, solve, SolverConfig};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CovariateRecipe {
    pub lag_x: bool,
    pub z: bool,
    pub z_columns: Option<Vec<usize>>,
    /// Indicators `I(O*_{t-1} = j)` of the previous observed response.
    pub y_history: bool,
}

impl Default for CovariateRecipe {
    fn default() -> Self {
        Self {
            lag_x: true,
            z: true,
            z_columns: None,
            y_history: false,
        }
    }
}

impl CovariateRecipe {
    pub fn from_terms<S: AsRef<str>>(terms: &[S]) -> Result<Self> {
        let mut r = Self {
            lag_x: false,
            z: false,
            z_columns: None,
            y_history: false,
        };
        for t in terms {
            match t.as_ref() {
                "lag_x" => r.lag_x = true,
                "z" => r.z = true,
                "y_history" => r.y_history = true,
                other => {
                    return Err(Error::Config(format!(
                        "unknown covariate term '{other}' (expected lag_x, z or y_history)"
                    )))
                }
            }
        }
        Ok(r)
    }

    pub fn n_features(&self, n_z: usize, categories: usize) -> usize {
        usize::from(self.lag_x)
            + if self.z { self.z_columns.as_ref().map_or(n_z, |c| c.len()) } else { 0 }
            + if self.y_history { categories - 1 } else { 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CovariateModel {
    /// Ordered support of `X`.
    pub support: Vec<f64>,
    pub recipe: CovariateRecipe,
    /// Response categories, used by the `y_history` term.
    pub categories: usize,
    /// Strictly increasing `c_k`.
    pub cutpoints: Vec<f64>,
    pub slopes: Vec<f64>,
    pub cov: DMatrix<f64>,
}

/// Filtered quantities of one subject's chain.
struct Forward {
    /// Normalized `alpha_t`.
    alpha: Vec<Vec<f64>>,
    /// Normalizing constants.
    scale: Vec<f64>,
    /// `trans[t][prev][s]`; `prev` has one row at `t = 0`.
    trans: Vec<Vec<Vec<f64>>>,
    /// Evidence `e_t(s)`.
    evid: Vec<Vec<f64>>,
}

impl CovariateModel {
    pub fn new(
        support: Vec<f64>,
        recipe: CovariateRecipe,
        categories: usize,
        cutpoints: Vec<f64>,
        slopes: Vec<f64>,
    ) -> Result<Self> {
        if support.len() < 2 {
            return Err(Error::InvalidParameter("covariate support needs at least two values".into()));
        }
        if support.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidParameter("covariate support must be strictly increasing".into()));
        }
        if cutpoints.len() + 1 != support.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} support values need {} cut-points",
                support.len(),
                support.len() - 1
            )));
        }
        ordinal::check_increasing(&cutpoints)?;
        let q = cutpoints.len() + slopes.len();
        Ok(Self {
            support,
            recipe,
            categories,
            cutpoints,
            slopes,
            cov: DMatrix::zeros(q, q),
        })
    }

    /// Logistic model for `X` in `{0, 1}`: `Pr(X_t = 1) = expit(g0 + g' f_t)`.
    pub fn binary(recipe: CovariateRecipe, categories: usize, gamma0: f64, slopes: Vec<f64>) -> Result<Self> {
        Self::new(vec![0.0, 1.0], recipe, categories, vec![-gamma0], slopes)
    }

    pub fn n_params(&self) -> usize {
        self.cutpoints.len() + self.slopes.len()
    }

    pub fn params(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.n_params(),
            self.cutpoints.iter().chain(&self.slopes).copied(),
        )
    }

    /// Same model at another parameter point; cut-point order is not checked.
    pub fn with_params(&self, v: &[f64]) -> Self {
        let k = self.cutpoints.len();
        let mut m = self.clone();
        m.cutpoints = v[..k].to_vec();
        m.slopes = v[k..].to_vec();
        m
    }

    pub fn level_index(&self, x: f64) -> Result<usize> {
        self.support
            .iter()
            .position(|s| *s == x)
            .ok_or_else(|| Error::InvalidData(format!("covariate value {x} is outside the support {:?}", self.support)))
    }

    fn features(&self, x_prev: Option<f64>, z: &[f64], y_prev: Option<usize>) -> Vec<f64> {
        let mut f = Vec::with_capacity(self.slopes.len());
        if self.recipe.lag_x {
            f.push(x_prev.unwrap_or(0.0));
        }
        if self.recipe.z {
            match &self.recipe.z_columns {
                Some(cols) => f.extend(cols.iter().map(|c| z[*c])),
                None => f.extend_from_slice(z),
            }
        }
        if self.recipe.y_history {
            f.extend((1..self.categories).map(|j| if y_prev == Some(j) { 1.0 } else { 0.0 }));
        }
        f
    }

    fn neg_slopes(&self) -> Vec<f64> {
        self.slopes.iter().map(|g| -g).collect()
    }

    fn probs_at(&self, f: &[f64]) -> Vec<f64> {
        ordreg::full_probs(&self.cutpoints, &self.neg_slopes(), f)
    }

    /// Gradient of `log Pr(X = s_k)` in `(c, g)`.
    fn grad_log(&self, f: &[f64], k: usize) -> Result<DVector<f64>> {
        let ev = ordinal::eval_occasion(&self.cutpoints, &self.neg_slopes(), f)?;
        let nk = self.cutpoints.len();
        let p = self.n_params();
        let mut g = if k < nk {
            ev.d.column(k).into_owned() / ev.mu[k].max(ordinal::PROB_FLOOR)
        } else {
            let mut s = DVector::zeros(p);
            for j in 0..nk {
                s += ev.d.column(j);
            }
            -s / ordinal::last_prob(&ev.mu).max(ordinal::PROB_FLOOR)
        };
        for j in nk..p {
            g[j] = -g[j];
        }
        Ok(g)
    }

    /// Distribution of `X_t` over the support given the previous value
    /// (`None` before the first occasion), `Z_t` and the previous observed
    /// response.
    pub fn conditional_x_prob(&self, x_prev: Option<f64>, z_t: &[f64], y_prev: Option<usize>) -> Result<Vec<f64>> {
        if let Some(x) = x_prev {
            self.level_index(x)?;
        }
        Ok(self.probs_at(&self.features(x_prev, z_t, y_prev)))
    }

    fn y_prev(subj: &SubjectRecord, t: usize) -> Option<usize> {
        if t == 0 {
            None
        } else {
            subj.outcomes[t - 1]
        }
    }

    fn forward(&self, subj: &SubjectRecord) -> Result<Forward> {
        let k = self.support.len();
        let t_i = subj.n_occasions();
        let mut alpha: Vec<Vec<f64>> = Vec::with_capacity(t_i);
        let mut scale = Vec::with_capacity(t_i);
        let mut trans = Vec::with_capacity(t_i);
        let mut evid = Vec::with_capacity(t_i);
        for t in 0..t_i {
            let yp = Self::y_prev(subj, t);
            let rows: Vec<Vec<f64>> = if t == 0 {
                vec![self.probs_at(&self.features(None, &subj.z[0], yp))]
            } else {
                self.support
                    .iter()
                    .map(|s| self.probs_at(&self.features(Some(*s), &subj.z[t], yp)))
                    .collect()
            };
            let e: Vec<f64> = match subj.x[t] {
                Some(x) => {
                    let idx = self.level_index(x)?;
                    (0..k).map(|s| if s == idx { 1.0 } else { 0.0 }).collect()
                }
                None => vec![1.0; k],
            };
            let prev: Vec<f64> = if t == 0 { vec![1.0] } else { alpha[t - 1].clone() };
            let mut a = vec![0.0; k];
            for (pm, row) in prev.iter().zip(&rows) {
                for s in 0..k {
                    a[s] += pm * row[s] * e[s];
                }
            }
            let c: f64 = a.iter().sum();
            if !(c > 0.0) {
                return Err(Error::InvalidData(format!(
                    "subject {}: observed covariate path has zero probability",
                    subj.id
                )));
            }
            a.iter_mut().for_each(|v| *v /= c);
            alpha.push(a);
            scale.push(c);
            trans.push(rows);
            evid.push(e);
        }
        Ok(Forward { alpha, scale, trans, evid })
    }

    /// Log-likelihood of the observed `X` entries, missing ones summed out.
    pub fn observed_loglik(&self, subj: &SubjectRecord) -> Result<f64> {
        Ok(self.forward(subj)?.scale.iter().map(|c| c.ln()).sum())
    }

    /// Gradient of `observed_loglik` by forward-backward smoothing.
    pub fn subject_score(&self, subj: &SubjectRecord) -> Result<DVector<f64>> {
        let fw = self.forward(subj)?;
        let k = self.support.len();
        let t_i = subj.n_occasions();
        let mut beta = vec![vec![1.0; k]; t_i];
        for t in (0..t_i.saturating_sub(1)).rev() {
            for sp in 0..k {
                let mut acc = 0.0;
                for s in 0..k {
                    acc += fw.trans[t + 1][sp][s] * fw.evid[t + 1][s] * beta[t + 1][s];
                }
                beta[t][sp] = acc / fw.scale[t + 1];
            }
        }
        let mut g = DVector::zeros(self.n_params());
        for t in 0..t_i {
            let yp = Self::y_prev(subj, t);
            let prevs: Vec<(Option<f64>, f64)> = if t == 0 {
                vec![(None, 1.0)]
            } else {
                self.support.iter().zip(&fw.alpha[t - 1]).map(|(s, a)| (Some(*s), *a)).collect()
            };
            for (pi, (xp, a)) in prevs.iter().enumerate() {
                if *a == 0.0 {
                    continue;
                }
                let f = self.features(*xp, &subj.z[t], yp);
                for s in 0..k {
                    let xi = a * fw.trans[t][pi][s] * fw.evid[t][s] * beta[t][s] / fw.scale[t];
                    if xi > 0.0 {
                        g.axpy(xi, &self.grad_log(&f, s)?, 1.0);
                    }
                }
            }
        }
        Ok(g)
    }

    pub fn loglik(&self, data: &[SubjectRecord]) -> Result<f64> {
        data.iter().map(|s| self.observed_loglik(s)).sum()
    }

    pub fn subject_scores(&self, data: &[SubjectRecord]) -> Result<Vec<DVector<f64>>> {
        data.iter().map(|s| self.subject_score(s)).collect()
    }

    pub fn total_score(&self, data: &[SubjectRecord]) -> Result<DVector<f64>> {
        let mut g = DVector::zeros(self.n_params());
        for s in data {
            g += self.subject_score(s)?;
        }
        Ok(g)
    }

    /// `Pr(X_t = . | X observed before t)` for every occasion.
    pub fn predictive(&self, subj: &SubjectRecord) -> Result<Vec<Vec<f64>>> {
        let fw = self.forward(subj)?;
        let k = self.support.len();
        Ok((0..subj.n_occasions())
            .map(|t| {
                if t == 0 {
                    return fw.trans[0][0].clone();
                }
                let mut p = vec![0.0; k];
                for (a, row) in fw.alpha[t - 1].iter().zip(&fw.trans[t]) {
                    for s in 0..k {
                        p[s] += a * row[s];
                    }
                }
                p
            })
            .collect())
    }

    /// Distribution over configurations of the subject's missing `X` entries
    /// given the observed ones: exact when at most `cap` configurations exist,
    /// otherwise `draws` forward-filter backward-sample paths of weight
    /// `1 / draws` each. Configurations list values at the missing occasions
    /// in time order.
    pub fn conditional_missing_x_dist<R: Rng + ?Sized>(
        &self,
        subj: &SubjectRecord,
        cap: usize,
        draws: usize,
        rng: &mut R,
    ) -> Result<Vec<(Vec<f64>, f64)>> {
        let missing: Vec<usize> = (0..subj.n_occasions()).filter(|t| subj.x[*t].is_none()).collect();
        let k = self.support.len();
        let n_conf = (k as f64).powi(missing.len() as i32);
        if n_conf <= cap as f64 {
            let n_conf = n_conf as usize;
            let mut out = Vec::with_capacity(n_conf);
            let mut total = 0.0;
            for code in 0..n_conf {
                let mut c = code;
                let mut xs: Vec<f64> = subj.x.iter().map(|v| v.unwrap_or(f64::NAN)).collect();
                let mut conf = Vec::with_capacity(missing.len());
                for &t in &missing {
                    xs[t] = self.support[c % k];
                    conf.push(xs[t]);
                    c /= k;
                }
                let w = self.path_prob(subj, &xs)?;
                total += w;
                out.push((conf, w));
            }
            for o in &mut out {
                o.1 /= total;
            }
            return Ok(out);
        }
        let fw = self.forward(subj)?;
        let t_i = subj.n_occasions();
        let mut out = Vec::with_capacity(draws);
        for _ in 0..draws {
            let mut states = vec![0usize; t_i];
            states[t_i - 1] = sample_index(&fw.alpha[t_i - 1], rng);
            for t in (0..t_i - 1).rev() {
                let w: Vec<f64> = (0..k)
                    .map(|s| fw.alpha[t][s] * fw.trans[t + 1][s][states[t + 1]])
                    .collect();
                states[t] = sample_index(&w, rng);
            }
            out.push((missing.iter().map(|t| self.support[states[*t]]).collect(), 1.0 / draws as f64));
        }
        Ok(out)
    }

    /// Product of transition probabilities along a full path.
    fn path_prob(&self, subj: &SubjectRecord, xs: &[f64]) -> Result<f64> {
        let mut p = 1.0;
        for t in 0..xs.len() {
            let prev = if t == 0 { None } else { Some(xs[t - 1]) };
            let probs = self.probs_at(&self.features(prev, &subj.z[t], Self::y_prev(subj, t)));
            p *= probs[self.level_index(xs[t])?];
        }
        Ok(p)
    }
}

fn sample_index<R: Rng + ?Sized>(w: &[f64], rng: &mut R) -> usize {
    let total: f64 = w.iter().sum();
    let u: f64 = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for (i, v) in w.iter().enumerate() {
        acc += v;
        if u < acc {
            return i;
        }
    }
    w.len() - 1
}

/// Maximum-likelihood fit of the covariate chain with missing entries summed
/// out. `support` defaults to the sorted distinct observed values.
pub fn fit_gamma(
    data: &[SubjectRecord],
    recipe: &CovariateRecipe,
    categories: usize,
    support: Option<Vec<f64>>,
    cfg: &SolverConfig,
) -> Result<CovariateModel> {
    let mut observed: Vec<f64> = data.iter().flat_map(|s| s.x.iter().flatten().copied()).collect();
    if observed.is_empty() {
        return Err(Error::NotIdentifiable("the covariate is never observed".into()));
    }
    let support = match support {
        Some(s) => s,
        None => {
            observed.sort_by(|a, b| a.partial_cmp(b).expect("finite covariate values"));
            observed.dedup();
            observed
        }
    };
    if support.len() < 2 {
        return Err(Error::NotIdentifiable("the covariate takes a single value".into()));
    }
    let n_z = data[0].z.first().map_or(0, |z| z.len());
    let nf = recipe.n_features(n_z, categories);
    let k = support.len();
    let template = CovariateModel::new(
        support.clone(),
        recipe.clone(),
        categories,
        (0..k - 1).map(|j| j as f64).collect(),
        vec![0.0; nf],
    )?;

    // Starting values from transitions with both ends observed.
    let mut rows = Vec::new();
    for s in data {
        for t in 0..s.n_occasions() {
            let Some(x) = s.x[t] else { continue };
            let prev = if t == 0 {
                None
            } else {
                match s.x[t - 1] {
                    Some(v) => Some(v),
                    None => continue,
                }
            };
            rows.push(OrdRow {
                x: template.features(prev, &s.z[t], CovariateModel::y_prev(s, t)),
                y: template.level_index(x)? + 1,
                w: 1.0,
            });
        }
    }
    let init = match ordreg::fit(&rows, k, nf, 0.0, cfg) {
        Ok(f) => f.intercepts.into_iter().chain(f.slopes.iter().map(|b| -b)).collect(),
        Err(_) => {
            let mut v: Vec<f64> = (0..k - 1).map(|j| j as f64 - (k as f64 - 2.0) / 2.0).collect();
            v.resize(k - 1 + nf, 0.0);
            v
        }
    };
    let score = |v: &DVector<f64>| -> Result<DVector<f64>> {
        let m = template.with_params(v.as_slice());
        ordinal::check_increasing(&m.cutpoints)?;
        m.total_score(data)
    };
    let sol = solve(score, |v| numeric_jacobian(score, v), DVector::from_vec(init), cfg)?;
    let mut model = template.with_params(sol.x.as_slice());
    let h = numeric_jacobian(score, &sol.x)?;
    let cov = (-h)
        .try_inverse()
        .ok_or_else(|| Error::Singular("information of the covariate model".into()))?;
    model.cov = (&cov + cov.transpose()) * 0.5;
    Ok(model)
}
