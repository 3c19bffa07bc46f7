//! Missingness codes, the polytomous logistic model for the observation
//! process, observation probabilities and inverse-probability weights.
//!
//! `R_it` is 3 when both `O_it` and `X_it` are observed, 2 when only `O_it`
//! is, 1 when only `X_it` is and 0 when neither is. Occasion 1 is treated as
//! fixed; the model covers occasions `2..=T`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ordinal::{OrdinalSpec, SubjectRecord};
use crate::solver::{solve, SolverConfig};

pub const DEFAULT_POSITIVITY_FLOOR: f64 = 1e-4;

/// `R_it` per occasion.
pub fn encode_r(subj: &SubjectRecord) -> Vec<u8> {
    subj.outcomes
        .iter()
        .zip(&subj.x)
        .map(|(o, x)| match (o.is_some(), x.is_some()) {
            (true, true) => 3,
            (true, false) => 2,
            (false, true) => 1,
            (false, false) => 0,
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RMode {
    /// Observe-both against everything else; codes collapse to `{0, 3}`.
    #[default]
    Binary,
    /// All four codes.
    Full,
}

impl RMode {
    pub fn collapse(self, r: u8) -> u8 {
        match self {
            RMode::Binary if r != 3 => 0,
            _ => r,
        }
    }
}

/// Which terms enter the linear predictors `u_itk' psi_k`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MissingnessRecipe {
    /// One intercept per occasion `2..=T`.
    pub time_intercepts: bool,
    /// `I(R_{t-1} = k)` for `k = 1, 2, 3`.
    pub lag_r: bool,
    /// Zero-filled previous response `O*_{t-1}`.
    pub lag_o_star: bool,
    /// Zero-filled previous covariate `X*_{t-1}`.
    pub lag_x_star: bool,
    /// Current `Z_t`.
    pub z: bool,
    /// Subset of `Z` columns; all when absent.
    pub z_columns: Option<Vec<usize>>,
}

impl Default for MissingnessRecipe {
    fn default() -> Self {
        Self {
            time_intercepts: true,
            lag_r: false,
            lag_o_star: true,
            lag_x_star: true,
            z: true,
            z_columns: None,
        }
    }
}

impl MissingnessRecipe {
    /// Builds a recipe from term names.
    pub fn from_terms<S: AsRef<str>>(terms: &[S]) -> Result<Self> {
        let mut r = Self {
            time_intercepts: false,
            lag_r: false,
            lag_o_star: false,
            lag_x_star: false,
            z: false,
            z_columns: None,
        };
        for t in terms {
            match t.as_ref() {
                "time_intercepts" => r.time_intercepts = true,
                "lag_r" => r.lag_r = true,
                "lag_o_star" => r.lag_o_star = true,
                "lag_x_star" => r.lag_x_star = true,
                "z" => r.z = true,
                other => {
                    return Err(Error::Config(format!(
                        "unknown missingness term '{other}' (expected time_intercepts, lag_r, lag_o_star, lag_x_star or z)"
                    )))
                }
            }
        }
        Ok(r)
    }

    fn z_cols(&self, n_z: usize) -> Vec<usize> {
        self.z_columns.clone().unwrap_or_else(|| (0..n_z).collect())
    }

    pub fn feature_names(&self, occasions: usize, n_z: usize) -> Vec<String> {
        let mut names = Vec::new();
        if self.time_intercepts {
            names.extend((2..=occasions).map(|t| format!("time{t}")));
        }
        if self.lag_r {
            names.extend((1..=3).map(|k| format!("lag_r{k}")));
        }
        if self.lag_o_star {
            names.push("lag_o_star".into());
        }
        if self.lag_x_star {
            names.push("lag_x_star".into());
        }
        if self.z {
            names.extend(self.z_cols(n_z).iter().map(|c| format!("z{}", c + 1)));
        }
        names
    }

    /// Features at occasion `t` (0-based, `t >= 1`) given the previous code
    /// and zero-filled previous values.
    fn features_from(
        &self,
        occasions: usize,
        t: usize,
        prev_r: u8,
        o_star: f64,
        x_star: f64,
        z: &[f64],
    ) -> Vec<f64> {
        let mut f = Vec::new();
        if self.time_intercepts {
            f.extend((1..occasions).map(|s| if s == t { 1.0 } else { 0.0 }));
        }
        if self.lag_r {
            f.extend((1..=3u8).map(|k| if prev_r == k { 1.0 } else { 0.0 }));
        }
        if self.lag_o_star {
            f.push(o_star);
        }
        if self.lag_x_star {
            f.push(x_star);
        }
        if self.z {
            f.extend(self.z_cols(z.len()).iter().map(|c| z[*c]));
        }
        f
    }
}

/// Features of `subj` at occasion `t` built from its actual history.
pub fn subject_features(
    recipe: &MissingnessRecipe,
    mode: RMode,
    occasions: usize,
    subj: &SubjectRecord,
    t: usize,
) -> Vec<f64> {
    let r = encode_r(subj);
    let prev = mode.collapse(r[t - 1]);
    let o_star = subj.outcomes[t - 1].map_or(0.0, |o| o as f64);
    let x_star = subj.x[t - 1].unwrap_or(0.0);
    recipe.features_from(occasions, t, prev, o_star, x_star, &subj.z[t])
}

/// Fitted (or supplied) polytomous logistic model for `R_it`.
#[derive(Debug, Clone, PartialEq)]
pub struct MissingnessModel {
    pub recipe: MissingnessRecipe,
    pub mode: RMode,
    pub occasions: usize,
    /// Codes with positive probability; the first is the reference.
    pub categories: Vec<u8>,
    /// Indices into the full recipe features that are used.
    pub active: Vec<usize>,
    /// One coefficient vector per non-reference category.
    pub psi: Vec<Vec<f64>>,
    pub cov: DMatrix<f64>,
    pub notes: Vec<String>,
}

impl MissingnessModel {
    /// Model with given coefficients over all recipe features.
    pub fn new(
        recipe: MissingnessRecipe,
        mode: RMode,
        occasions: usize,
        n_z: usize,
        categories: Vec<u8>,
        psi: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let nf = recipe.feature_names(occasions, n_z).len();
        if categories.is_empty() || psi.len() + 1 != categories.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} categories need {} coefficient vectors, got {}",
                categories.len(),
                categories.len().saturating_sub(1),
                psi.len()
            )));
        }
        if psi.iter().any(|v| v.len() != nf) {
            return Err(Error::DimensionMismatch(format!(
                "each coefficient vector needs {nf} entries"
            )));
        }
        let q = psi.len() * nf;
        Ok(Self {
            recipe,
            mode,
            occasions,
            categories,
            active: (0..nf).collect(),
            psi,
            cov: DMatrix::zeros(q, q),
            notes: Vec::new(),
        })
    }

    pub fn n_params(&self) -> usize {
        self.psi.len() * self.active.len()
    }

    pub fn params(&self) -> DVector<f64> {
        DVector::from_iterator(self.n_params(), self.psi.iter().flatten().copied())
    }

    pub fn with_params(&self, v: &[f64]) -> Self {
        let mut m = self.clone();
        let a = self.active.len();
        m.psi = v.chunks(a.max(1)).take(self.psi.len()).map(|c| c.to_vec()).collect();
        if a == 0 {
            m.psi = vec![Vec::new(); self.psi.len()];
        }
        m
    }

    fn select(&self, full: &[f64]) -> Vec<f64> {
        self.active.iter().map(|&i| full[i]).collect()
    }

    /// `(lambda_0, .., lambda_3)` from active features.
    pub fn lambda_probs(&self, features: &[f64]) -> Result<[f64; 4]> {
        if features.len() != self.active.len() {
            return Err(Error::DimensionMismatch(format!(
                "expected {} features, got {}",
                self.active.len(),
                features.len()
            )));
        }
        let mut scores = Vec::with_capacity(self.categories.len());
        scores.push(0.0);
        for p in &self.psi {
            scores.push(p.iter().zip(features).map(|(a, b)| a * b).sum::<f64>());
        }
        let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
        let tot: f64 = e.iter().sum();
        let mut out = [0.0; 4];
        for (c, v) in self.categories.iter().zip(&e) {
            out[*c as usize] = v / tot;
        }
        Ok(out)
    }

    fn lambda_full(&self, full: &[f64]) -> [f64; 4] {
        self.lambda_probs(&self.select(full))
            .expect("active feature selection has the model's length")
    }

    /// `lambda` at occasion `t` along the subject's actual history.
    pub fn lambda_actual(&self, subj: &SubjectRecord, t: usize) -> [f64; 4] {
        self.lambda_full(&subject_features(&self.recipe, self.mode, self.occasions, subj, t))
    }

    /// Marginal probability of observing both at each occasion, summing over
    /// all earlier missingness histories. Along a hypothetical history the
    /// lagged values are zero-filled unless both the history and the data
    /// have them observed.
    pub fn marginal_pi_unchecked(&self, subj: &SubjectRecord) -> Vec<f64> {
        let t_i = subj.n_occasions();
        let r = encode_r(subj);
        let mut dist = [0.0; 4];
        dist[self.mode.collapse(r[0]) as usize] = 1.0;
        let mut pis = vec![if r[0] == 3 { 1.0 } else { 0.0 }];
        for t in 1..t_i {
            let mut next = [0.0; 4];
            for (prev, mass) in dist.iter().enumerate() {
                if *mass == 0.0 {
                    continue;
                }
                let prev = prev as u8;
                let o_star = if prev >= 2 { subj.outcomes[t - 1].map_or(0.0, |o| o as f64) } else { 0.0 };
                let x_star = if prev == 1 || prev == 3 { subj.x[t - 1].unwrap_or(0.0) } else { 0.0 };
                let f = self
                    .recipe
                    .features_from(self.occasions, t, prev, o_star, x_star, &subj.z[t]);
                let lam = self.lambda_full(&f);
                for k in 0..4 {
                    next[k] += mass * lam[k];
                }
            }
            pis.push(next[3]);
            dist = next;
        }
        pis
    }

    /// `pi_it` for every occasion; errors below the positivity floor.
    pub fn marginal_pi(&self, subj: &SubjectRecord, floor: f64) -> Result<Vec<f64>> {
        let pis = self.marginal_pi_unchecked(subj);
        for (t, p) in pis.iter().enumerate() {
            if *p < floor {
                return Err(Error::Positivity {
                    subject: subj.id.clone(),
                    occasion: t + 1,
                    pi: *p,
                    floor,
                });
            }
        }
        Ok(pis)
    }

    /// Per-subject score vectors of the log-likelihood.
    pub fn subject_scores(&self, data: &[SubjectRecord]) -> Vec<DVector<f64>> {
        data.iter()
            .map(|s| {
                let mut g = DVector::zeros(self.n_params());
                for (f, y) in self.rows(s) {
                    self.accumulate(&f, y, &mut g, None);
                }
                g
            })
            .collect()
    }

    /// Score and Hessian summed over subjects.
    pub fn score_hessian(&self, data: &[SubjectRecord]) -> (DVector<f64>, DMatrix<f64>) {
        let q = self.n_params();
        let mut g = DVector::zeros(q);
        let mut h = DMatrix::zeros(q, q);
        for s in data {
            for (f, y) in self.rows(s) {
                self.accumulate(&f, y, &mut g, Some(&mut h));
            }
        }
        (g, h)
    }

    pub fn loglik(&self, data: &[SubjectRecord]) -> f64 {
        data.iter()
            .flat_map(|s| self.rows(s))
            .map(|(f, y)| self.lambda_probs(&f).map(|l| l[y as usize].ln()).unwrap_or(f64::NAN))
            .sum()
    }

    /// Active features and collapsed response for occasions `2..=T_i`.
    fn rows(&self, s: &SubjectRecord) -> Vec<(Vec<f64>, u8)> {
        let r = encode_r(s);
        (1..s.n_occasions())
            .map(|t| {
                let f = subject_features(&self.recipe, self.mode, self.occasions, s, t);
                (self.select(&f), self.mode.collapse(r[t]))
            })
            .collect()
    }

    fn accumulate(&self, f: &[f64], y: u8, g: &mut DVector<f64>, h: Option<&mut DMatrix<f64>>) {
        let lam = self.lambda_probs(f).expect("row features match the model");
        let a = f.len();
        let others = &self.categories[1..];
        for (ci, c) in others.iter().enumerate() {
            let resid = if *c == y { 1.0 } else { 0.0 } - lam[*c as usize];
            for (j, fj) in f.iter().enumerate() {
                g[ci * a + j] += resid * fj;
            }
        }
        if let Some(h) = h {
            for (ci, c) in others.iter().enumerate() {
                for (di, d) in others.iter().enumerate() {
                    let lc = lam[*c as usize];
                    let ld = lam[*d as usize];
                    let w = if ci == di { lc * (1.0 - lc) } else { -lc * ld };
                    for (j, fj) in f.iter().enumerate() {
                        for (k, fk) in f.iter().enumerate() {
                            h[(ci * a + j, di * a + k)] -= w * fj * fk;
                        }
                    }
                }
            }
        }
    }
}

/// Maximum-likelihood fit of the polytomous logistic model.
///
/// Codes never observed are dropped, as are features that are identically
/// zero over the fitting rows; both are recorded in `notes`.
pub fn fit_psi(
    data: &[SubjectRecord],
    spec: &OrdinalSpec,
    recipe: &MissingnessRecipe,
    mode: RMode,
    cfg: &SolverConfig,
) -> Result<MissingnessModel> {
    let names = recipe.feature_names(spec.occasions, spec.n_z);
    let nf = names.len();
    let mut counts = [0usize; 4];
    let mut nonzero = vec![false; nf];
    for s in data {
        let r = encode_r(s);
        for t in 1..s.n_occasions() {
            counts[mode.collapse(r[t]) as usize] += 1;
            let f = subject_features(recipe, mode, spec.occasions, s, t);
            for (j, v) in f.iter().enumerate() {
                if *v != 0.0 {
                    nonzero[j] = true;
                }
            }
        }
    }
    let allowed: &[u8] = match mode {
        RMode::Binary => &[0, 3],
        RMode::Full => &[0, 1, 2, 3],
    };
    let categories: Vec<u8> = allowed.iter().copied().filter(|c| counts[*c as usize] > 0).collect();
    let mut notes = Vec::new();
    for c in allowed {
        if counts[*c as usize] == 0 {
            notes.push(format!("missingness code {c} never occurs and was dropped"));
        }
    }
    if categories.is_empty() {
        notes.push("no occasions after the first; every observation probability is 1".into());
        return Ok(MissingnessModel {
            recipe: recipe.clone(),
            mode,
            occasions: spec.occasions,
            categories: vec![3],
            active: Vec::new(),
            psi: Vec::new(),
            cov: DMatrix::zeros(0, 0),
            notes,
        });
    }
    let active: Vec<usize> = (0..nf).filter(|j| nonzero[*j]).collect();
    for j in (0..nf).filter(|j| !nonzero[*j]) {
        notes.push(format!("feature '{}' is identically zero and was dropped", names[j]));
    }
    let template = MissingnessModel {
        recipe: recipe.clone(),
        mode,
        occasions: spec.occasions,
        psi: vec![vec![0.0; active.len()]; categories.len() - 1],
        categories,
        active,
        cov: DMatrix::zeros(0, 0),
        notes,
    };
    let q = template.n_params();
    if q == 0 {
        return Ok(template);
    }
    let sol = solve(
        |v| Ok(template.with_params(v.as_slice()).score_hessian(data).0),
        |v| Ok(template.with_params(v.as_slice()).score_hessian(data).1),
        DVector::zeros(q),
        cfg,
    )?;
    let mut model = template.with_params(sol.x.as_slice());
    let (_, h) = model.score_hessian(data);
    model.cov = (-h)
        .try_inverse()
        .ok_or_else(|| Error::Singular("information of the missingness model".into()))?;
    Ok(model)
}

/// How `pi_it` is formed for the weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WeightScheme {
    /// Marginal observation probability summed over earlier histories.
    Marginal,
    /// Conditional probability given the actual observed history.
    #[default]
    Sequential,
}

/// Diagonal weight matrix of one subject.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix {
    /// `T_i (J-1)` square; block `t` is `delta_itt` times a matrix of ones,
    /// off-diagonal blocks are zero.
    pub delta: DMatrix<f64>,
    pub pi: Vec<f64>,
    /// `delta_itt = I(R_it = 3) / pi_it`.
    pub delta_diag: Vec<f64>,
}

/// `pi_it` per occasion under `scheme`, checked against `floor` where `R_it = 3`.
pub fn observation_probs(
    model: &MissingnessModel,
    subj: &SubjectRecord,
    scheme: WeightScheme,
    floor: f64,
) -> Result<Vec<f64>> {
    let r = encode_r(subj);
    let pis: Vec<f64> = match scheme {
        WeightScheme::Marginal => model.marginal_pi_unchecked(subj),
        WeightScheme::Sequential => (0..subj.n_occasions())
            .map(|t| if t == 0 { 1.0 } else { model.lambda_actual(subj, t)[3] })
            .collect(),
    };
    for (t, p) in pis.iter().enumerate() {
        if r[t] == 3 && *p < floor {
            return Err(Error::Positivity {
                subject: subj.id.clone(),
                occasion: t + 1,
                pi: *p,
                floor,
            });
        }
    }
    Ok(pis)
}

pub fn weight_matrix(
    model: &MissingnessModel,
    subj: &SubjectRecord,
    spec: &OrdinalSpec,
    scheme: WeightScheme,
    floor: f64,
) -> Result<WeightMatrix> {
    let pi = observation_probs(model, subj, scheme, floor)?;
    let r = encode_r(subj);
    let delta_diag: Vec<f64> = pi
        .iter()
        .zip(&r)
        .map(|(p, r)| if *r == 3 { 1.0 / p } else { 0.0 })
        .collect();
    let nj = spec.n_intercepts();
    let dim = subj.n_occasions() * nj;
    let mut delta = DMatrix::zeros(dim, dim);
    for (t, d) in delta_diag.iter().enumerate() {
        delta.view_mut((t * nj, t * nj), (nj, nj)).fill(*d);
    }
    Ok(WeightMatrix { delta, pi, delta_diag })
}
