//! Proportional-odds marginal model for a longitudinal ordinal response.
//!
//! The cumulative probabilities are
//! `logit Pr(O_it <= j) = b0_j + x_it' b_x + z_it' b_z` for `j = 1..J-1`, and the
//! response at one occasion is carried as the `(J-1)`-vector of category
//! indicators `Y_itj = I(O_it = j)`. Category `J` is implied.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Linear predictors are clamped to `[-ETA_CLAMP, ETA_CLAMP]` before the logistic map.
pub const ETA_CLAMP: f64 = 35.0;
/// Lower bound applied to probabilities whenever they are inverted.
pub const PROB_FLOOR: f64 = 1e-12;

#[inline]
pub fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// How the (possibly missing) covariate `X` enters a linear predictor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum XCoding {
    /// A single slope on the numeric value of `X`.
    #[default]
    Linear,
    /// One indicator per non-reference level; `levels[0]` is the reference.
    Indicators { levels: Vec<f64> },
}

impl XCoding {
    pub fn width(&self) -> usize {
        match self {
            XCoding::Linear => 1,
            XCoding::Indicators { levels } => levels.len().saturating_sub(1),
        }
    }

    pub fn encode_into(&self, x: f64, out: &mut Vec<f64>) -> Result<()> {
        match self {
            XCoding::Linear => out.push(x),
            XCoding::Indicators { levels } => {
                if !levels.contains(&x) {
                    return Err(Error::InvalidData(format!(
                        "covariate value {x} is not one of the coded levels {levels:?}"
                    )));
                }
                out.extend(levels[1..].iter().map(|&l| if l == x { 1.0 } else { 0.0 }));
            }
        }
        Ok(())
    }
}

/// Shape of the ordinal model: `J` categories, at most `T` occasions, `p_z`
/// always-observed covariates and the coding of `X`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrdinalSpec {
    pub categories: usize,
    pub occasions: usize,
    pub n_z: usize,
    #[serde(default)]
    pub x_coding: XCoding,
}

impl OrdinalSpec {
    pub fn new(categories: usize, occasions: usize, n_z: usize) -> Result<Self> {
        if categories < 2 {
            return Err(Error::InvalidParameter(format!(
                "need at least 2 categories, got {categories}"
            )));
        }
        if occasions < 1 {
            return Err(Error::InvalidParameter("need at least one occasion".into()));
        }
        Ok(Self {
            categories,
            occasions,
            n_z,
            x_coding: XCoding::Linear,
        })
    }

    pub fn with_x_coding(mut self, coding: XCoding) -> Self {
        self.x_coding = coding;
        self
    }

    pub fn n_intercepts(&self) -> usize {
        self.categories - 1
    }

    pub fn n_params(&self) -> usize {
        self.n_intercepts() + self.x_coding.width() + self.n_z
    }

    /// Non-intercept design row `[code(x), z]`.
    pub fn design_row(&self, x: f64, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.n_z {
            return Err(Error::DimensionMismatch(format!(
                "expected {} z values, got {}",
                self.n_z,
                z.len()
            )));
        }
        let mut row = Vec::with_capacity(self.x_coding.width() + self.n_z);
        self.x_coding.encode_into(x, &mut row)?;
        row.extend_from_slice(z);
        Ok(row)
    }

    /// Names of the parameters in vector order.
    pub fn param_names(&self, z_names: &[String]) -> Vec<String> {
        let mut names: Vec<String> = (1..self.categories)
            .map(|j| format!("intercept{j}"))
            .collect();
        match &self.x_coding {
            XCoding::Linear => names.push("x".into()),
            XCoding::Indicators { levels } => {
                names.extend(levels[1..].iter().map(|l| format!("x(={l})")))
            }
        }
        for k in 0..self.n_z {
            names.push(z_names.get(k).cloned().unwrap_or_else(|| format!("z{}", k + 1)));
        }
        names
    }
}

/// One subject's data over its `T_i` occasions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub id: String,
    /// Ordinal response per occasion, `1..=J` when present.
    pub outcomes: Vec<Option<usize>>,
    /// Incomplete covariate per occasion.
    pub x: Vec<Option<f64>>,
    /// Always-observed covariates per occasion.
    pub z: Vec<Vec<f64>>,
}

impl SubjectRecord {
    pub fn n_occasions(&self) -> usize {
        self.outcomes.len()
    }

    pub fn validate(&self, spec: &OrdinalSpec) -> Result<()> {
        let t = self.outcomes.len();
        if t == 0 || t > spec.occasions {
            return Err(Error::InvalidData(format!(
                "subject {}: {} occasions, expected 1..={}",
                self.id, t, spec.occasions
            )));
        }
        if self.x.len() != t || self.z.len() != t {
            return Err(Error::DimensionMismatch(format!(
                "subject {}: outcome, x and z lengths differ",
                self.id
            )));
        }
        for (k, o) in self.outcomes.iter().enumerate() {
            if let Some(o) = o {
                if *o < 1 || *o > spec.categories {
                    return Err(Error::InvalidData(format!(
                        "subject {}, occasion {}: response {} outside 1..={}",
                        self.id,
                        k + 1,
                        o,
                        spec.categories
                    )));
                }
            }
        }
        for (k, z) in self.z.iter().enumerate() {
            if z.len() != spec.n_z || z.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidData(format!(
                    "subject {}, occasion {}: z must hold {} finite values",
                    self.id,
                    k + 1,
                    spec.n_z
                )));
            }
        }
        Ok(())
    }

    /// True when both `O_it` and `X_it` are present.
    pub fn observed(&self, t: usize) -> bool {
        self.outcomes[t].is_some() && self.x[t].is_some()
    }

    pub fn has_missing(&self) -> bool {
        (0..self.n_occasions()).any(|t| !self.observed(t))
    }
}

/// Marginal-model coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BetaParams {
    pub intercepts: Vec<f64>,
    pub beta_x: Vec<f64>,
    pub beta_z: Vec<f64>,
}

impl BetaParams {
    pub fn new(intercepts: Vec<f64>, beta_x: Vec<f64>, beta_z: Vec<f64>) -> Result<Self> {
        check_increasing(&intercepts)?;
        if intercepts.iter().chain(&beta_x).chain(&beta_z).any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("non-finite coefficient".into()));
        }
        Ok(Self {
            intercepts,
            beta_x,
            beta_z,
        })
    }

    pub fn from_slice(spec: &OrdinalSpec, v: &[f64]) -> Result<Self> {
        if v.len() != spec.n_params() {
            return Err(Error::DimensionMismatch(format!(
                "expected {} parameters, got {}",
                spec.n_params(),
                v.len()
            )));
        }
        let a = spec.n_intercepts();
        let b = a + spec.x_coding.width();
        Self::new(v[..a].to_vec(), v[a..b].to_vec(), v[b..].to_vec())
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.intercepts
            .iter()
            .chain(&self.beta_x)
            .chain(&self.beta_z)
            .copied()
            .collect()
    }

    pub fn to_dvector(&self) -> DVector<f64> {
        DVector::from_vec(self.to_vec())
    }

    fn slopes(&self) -> Vec<f64> {
        self.beta_x.iter().chain(&self.beta_z).copied().collect()
    }
}

pub(crate) fn check_increasing(intercepts: &[f64]) -> Result<()> {
    if intercepts.is_empty() {
        return Err(Error::InvalidParameter("no intercepts".into()));
    }
    if intercepts.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::InvalidParameter(format!(
            "intercepts must be strictly increasing, got {intercepts:?}"
        )));
    }
    Ok(())
}

/// Cumulative probabilities, category probabilities and their derivatives at
/// one occasion of a cumulative-logit model with generic design row.
#[derive(Debug, Clone)]
pub(crate) struct OccasionEval {
    pub mu: Vec<f64>,
    /// `(n_intercepts + row.len()) x (J-1)`: column `j` is `d mu_j / d theta`.
    pub d: DMatrix<f64>,
}

pub(crate) fn cumulative(intercepts: &[f64], slopes: &[f64], row: &[f64]) -> Vec<f64> {
    let lin: f64 = slopes.iter().zip(row).map(|(b, r)| b * r).sum();
    intercepts
        .iter()
        .map(|a| expit((a + lin).clamp(-ETA_CLAMP, ETA_CLAMP)))
        .collect()
}

pub(crate) fn eval_occasion(intercepts: &[f64], slopes: &[f64], row: &[f64]) -> Result<OccasionEval> {
    if intercepts.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::InvalidParameter(
            "intercepts must be strictly increasing".into(),
        ));
    }
    let nj = intercepts.len();
    let cum = cumulative(intercepts, slopes, row);
    let dens: Vec<f64> = cum.iter().map(|c| c * (1.0 - c)).collect();
    let p = nj + row.len();
    let mut mu = Vec::with_capacity(nj);
    let mut d = DMatrix::zeros(p, nj);
    for j in 0..nj {
        let prev = if j == 0 { 0.0 } else { cum[j - 1] };
        mu.push(cum[j] - prev);
        d[(j, j)] = dens[j];
        if j > 0 {
            d[(j - 1, j)] = -dens[j - 1];
        }
        let slope_factor = dens[j] - if j > 0 { dens[j - 1] } else { 0.0 };
        for (k, r) in row.iter().enumerate() {
            d[(nj + k, j)] = slope_factor * r;
        }
    }
    Ok(OccasionEval { mu, d })
}

/// Probability of the implied last category.
pub(crate) fn last_prob(mu: &[f64]) -> f64 {
    1.0 - mu.iter().sum::<f64>()
}

/// Applies `V^{-1} = diag(1/mu) + 11'/mu_J` to `r`.
pub(crate) fn vinv_apply(mu: &[f64], r: &[f64]) -> Vec<f64> {
    let last = last_prob(mu).max(PROB_FLOOR);
    let total: f64 = r.iter().sum::<f64>() / last;
    mu.iter()
        .zip(r)
        .map(|(m, ri)| ri / m.max(PROB_FLOOR) + total)
        .collect()
}

/// Explicit `V^{-1}` for one occasion.
pub(crate) fn vinv_matrix(mu: &[f64]) -> DMatrix<f64> {
    let n = mu.len();
    let last = last_prob(mu).max(PROB_FLOOR);
    let mut m = DMatrix::from_element(n, n, 1.0 / last);
    for j in 0..n {
        m[(j, j)] += 1.0 / mu[j].max(PROB_FLOOR);
    }
    m
}

/// Score `D V^{-1}(y - mu)` and information `D V^{-1} D'` of one occasion.
pub(crate) fn occasion_score_info(ev: &OccasionEval, y: &[f64]) -> (DVector<f64>, DMatrix<f64>) {
    let resid: Vec<f64> = y.iter().zip(&ev.mu).map(|(a, b)| a - b).collect();
    let s = vinv_apply(&ev.mu, &resid);
    let u = &ev.d * DVector::from_vec(s);
    (u, occasion_info(ev))
}

pub(crate) fn occasion_info(ev: &OccasionEval) -> DMatrix<f64> {
    let p = ev.d.nrows();
    let last = last_prob(&ev.mu).max(PROB_FLOOR);
    let mut info = DMatrix::zeros(p, p);
    let mut dsum = DVector::zeros(p);
    for (j, m) in ev.mu.iter().enumerate() {
        let col = ev.d.column(j);
        info.ger(1.0 / m.max(PROB_FLOOR), &col, &col, 1.0);
        dsum += col;
    }
    info.ger(1.0 / last, &dsum, &dsum, 1.0);
    info
}

/// Within-time moments of the multinomial response.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanBlock {
    pub mu: DVector<f64>,
    /// Marginal variances `mu_j (1 - mu_j)`.
    pub f: DVector<f64>,
    /// `diag(mu) - mu mu'`.
    pub v: DMatrix<f64>,
}

impl MeanBlock {
    pub fn from_mu(mu: &[f64]) -> Self {
        let m = DVector::from_column_slice(mu);
        let f = m.map(|v| v * (1.0 - v));
        let v = DMatrix::from_diagonal(&m) - &m * m.transpose();
        Self { mu: m, f, v }
    }

    pub fn v_inverse(&self) -> DMatrix<f64> {
        vinv_matrix(self.mu.as_slice())
    }
}

/// `expit(b0_j + x b_x + z' b_z)` for `j = 1..J-1`.
pub fn cumulative_probs(spec: &OrdinalSpec, beta: &BetaParams, x: f64, z: &[f64]) -> Result<Vec<f64>> {
    check_increasing(&beta.intercepts)?;
    let row = spec.design_row(x, z)?;
    Ok(cumulative(&beta.intercepts, &beta.slopes(), &row))
}

/// Category probabilities `mu_j = Pr(O <= j) - Pr(O <= j-1)` for `j = 1..J-1`.
pub fn category_probs(spec: &OrdinalSpec, beta: &BetaParams, x: f64, z: &[f64]) -> Result<Vec<f64>> {
    let cum = cumulative_probs(spec, beta, x, z)?;
    Ok(cum
        .iter()
        .enumerate()
        .map(|(j, c)| c - if j == 0 { 0.0 } else { cum[j - 1] })
        .collect())
}

pub fn mean_block(spec: &OrdinalSpec, beta: &BetaParams, x: f64, z: &[f64]) -> Result<MeanBlock> {
    Ok(MeanBlock::from_mu(&category_probs(spec, beta, x, z)?))
}

/// `Y_j = I(O = j)` for `j = 1..J-1`.
pub fn encode_indicators(o: usize, categories: usize) -> Result<Vec<f64>> {
    if o < 1 || o > categories {
        return Err(Error::InvalidData(format!(
            "response {o} outside 1..={categories}"
        )));
    }
    Ok((1..categories).map(|j| if j == o { 1.0 } else { 0.0 }).collect())
}

pub(crate) fn eval_beta(spec: &OrdinalSpec, beta: &[f64], x: f64, z: &[f64]) -> Result<OccasionEval> {
    let a = spec.n_intercepts();
    let row = spec.design_row(x, z)?;
    eval_occasion(&beta[..a], &beta[a..], &row)
}

/// Stacked means `mu_i` (length `T_i (J-1)`) and `D_i = d mu_i / d beta'`
/// arranged `p x T_i (J-1)`. `x_override` supplies values for occasions whose
/// `X` is missing (or replaces observed ones).
pub fn mean_and_jacobian(
    spec: &OrdinalSpec,
    beta: &BetaParams,
    subj: &SubjectRecord,
    x_override: Option<&[Option<f64>]>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let t_i = subj.n_occasions();
    let nj = spec.n_intercepts();
    let p = spec.n_params();
    let b = beta.to_vec();
    let mut mu = DVector::zeros(t_i * nj);
    let mut d = DMatrix::zeros(p, t_i * nj);
    for t in 0..t_i {
        let x = x_override
            .and_then(|o| o.get(t).copied().flatten())
            .or(subj.x[t])
            .ok_or_else(|| Error::MissingCovariate {
                subject: subj.id.clone(),
                occasion: t + 1,
            })?;
        let ev = eval_beta(spec, &b, x, &subj.z[t])?;
        for j in 0..nj {
            mu[t * nj + j] = ev.mu[j];
        }
        d.view_mut((0, t * nj), (p, nj)).copy_from(&ev.d);
    }
    Ok((mu, d))
}
