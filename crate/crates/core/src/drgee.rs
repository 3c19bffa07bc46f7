//! Doubly robust augmented GEE.
//!
//! The estimating function of subject `i` is
//!
//! ```text
//! S1_i = sum_t delta_it U_it(Y_it, X_it) + sum_t (1 - delta_it) E{U_it | H_it}
//! ```
//!
//! with `delta_it = I(R_it = 3) / pi_it`, `U_it = D V^{-1}(Y - mu)` the
//! occasion-level GEE score and `H_it` the data observed before occasion `t`.
//! The conditional expectation integrates `X_it` over the covariate chain
//! filtered on the observed `X` history and `Y_it` over an ordinal transition
//! model for the response. It is unbiased when either the missingness model or
//! the pair of covariate and transition models is correct.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::covariate::CovariateModel;
use crate::error::{Error, Result};
use crate::gee::{self, FitResult, NuisanceCorrection, Term, Terms};
use crate::missingness::{encode_r, observation_probs, MissingnessModel, WeightScheme};
use crate::ordinal::{encode_indicators, BetaParams, OrdinalSpec, SubjectRecord};
use crate::ordreg::{self, draw_category, OrdRow};
use crate::solver::{numeric_jacobian, SolverConfig};
use crate::wgee::{self, hadamard_kernel};

/// `N_i = F^{-1/2} (C^{-1} o (11' - Delta)) F^{-1/2}`.
pub fn n_matrix(f: &DMatrix<f64>, cinv: &DMatrix<f64>, delta: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let ones = DMatrix::from_element(delta.nrows(), delta.ncols(), 1.0);
    hadamard_kernel(f, cinv, &(ones - delta))
}

/// Terms of the response transition model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutcomeRecipe {
    /// Indicators of the previous response category and of it being missing.
    pub lag_o: bool,
    /// Previous covariate (zero-filled) and an indicator of it being missing.
    pub lag_x: bool,
}

impl Default for OutcomeRecipe {
    fn default() -> Self {
        Self {
            lag_o: true,
            lag_x: false,
        }
    }
}

/// Proportional-odds model for `O_t` given `X_t`, `Z_t` and the observed past.
#[derive(Debug, Clone, PartialEq)]
pub struct OutcomeModel {
    pub recipe: OutcomeRecipe,
    pub spec: OrdinalSpec,
    pub active: Vec<usize>,
    pub intercepts: Vec<f64>,
    pub slopes: Vec<f64>,
    pub cov: DMatrix<f64>,
}

impl OutcomeModel {
    fn full_features(recipe: &OutcomeRecipe, spec: &OrdinalSpec, subj: &SubjectRecord, t: usize, x: f64) -> Result<Vec<f64>> {
        let mut f = spec.design_row(x, &subj.z[t])?;
        if recipe.lag_o {
            let prev = subj.outcomes[t - 1];
            f.extend((1..spec.categories).map(|k| if prev == Some(k) { 1.0 } else { 0.0 }));
            f.push(if prev.is_none() { 1.0 } else { 0.0 });
        }
        if recipe.lag_x {
            let prev = subj.x[t - 1];
            f.push(prev.unwrap_or(0.0));
            f.push(if prev.is_none() { 1.0 } else { 0.0 });
        }
        Ok(f)
    }

    fn features(&self, subj: &SubjectRecord, t: usize, x: f64) -> Result<Vec<f64>> {
        let full = Self::full_features(&self.recipe, &self.spec, subj, t, x)?;
        Ok(self.active.iter().map(|&i| full[i]).collect())
    }

    /// Category probabilities `1..=J` of `O_t` given `X_t = x` and the history.
    pub fn probs(&self, subj: &SubjectRecord, t: usize, x: f64) -> Result<Vec<f64>> {
        Ok(ordreg::full_probs(&self.intercepts, &self.slopes, &self.features(subj, t, x)?))
    }

    pub fn n_params(&self) -> usize {
        self.intercepts.len() + self.slopes.len()
    }

    pub fn params(&self) -> DVector<f64> {
        DVector::from_iterator(self.n_params(), self.intercepts.iter().chain(&self.slopes).copied())
    }

    pub fn with_params(&self, v: &[f64]) -> Self {
        let k = self.intercepts.len();
        let mut m = self.clone();
        m.intercepts = v[..k].to_vec();
        m.slopes = v[k..].to_vec();
        m
    }

    fn subject_rows(&self, subj: &SubjectRecord) -> Result<Vec<OrdRow>> {
        let mut rows = Vec::new();
        for t in 1..subj.n_occasions() {
            if let (Some(o), Some(x)) = (subj.outcomes[t], subj.x[t]) {
                rows.push(OrdRow {
                    x: self.features(subj, t, x)?,
                    y: o,
                    w: 1.0,
                });
            }
        }
        Ok(rows)
    }

    pub fn subject_scores(&self, data: &[SubjectRecord]) -> Result<Vec<DVector<f64>>> {
        let theta: Vec<f64> = self.params().iter().copied().collect();
        data.iter()
            .map(|s| Ok(ordreg::score_info(&self.subject_rows(s)?, self.spec.categories, &theta, 0.0)?.0))
            .collect()
    }

    /// `sum_i d S_i / d theta'`, the negative Fisher information.
    pub fn hessian(&self, data: &[SubjectRecord]) -> Result<DMatrix<f64>> {
        let theta: Vec<f64> = self.params().iter().copied().collect();
        let mut rows = Vec::new();
        for s in data {
            rows.extend(self.subject_rows(s)?);
        }
        Ok(-ordreg::score_info(&rows, self.spec.categories, &theta, 0.0)?.1)
    }
}

/// Fits the transition model on occasions `2..` with both `O` and `X` observed.
/// Features that are identically zero over the fitting rows are dropped.
pub fn fit_outcome_model(
    data: &[SubjectRecord],
    spec: &OrdinalSpec,
    recipe: &OutcomeRecipe,
    cfg: &SolverConfig,
) -> Result<OutcomeModel> {
    let mut full_rows = Vec::new();
    for s in data {
        for t in 1..s.n_occasions() {
            if let (Some(o), Some(x)) = (s.outcomes[t], s.x[t]) {
                full_rows.push((OutcomeModel::full_features(recipe, spec, s, t, x)?, o));
            }
        }
    }
    if full_rows.is_empty() {
        return Err(Error::NotIdentifiable(
            "no occasion after the first has both response and covariate observed".into(),
        ));
    }
    let nf = full_rows[0].0.len();
    let active: Vec<usize> = (0..nf)
        .filter(|j| full_rows.iter().any(|(f, _)| f[*j] != 0.0))
        .collect();
    let rows: Vec<OrdRow> = full_rows
        .into_iter()
        .map(|(f, y)| OrdRow {
            x: active.iter().map(|&j| f[j]).collect(),
            y,
            w: 1.0,
        })
        .collect();
    let fit = ordreg::fit(&rows, spec.categories, active.len(), 0.0, cfg)?;
    Ok(OutcomeModel {
        recipe: recipe.clone(),
        spec: spec.clone(),
        active,
        intercepts: fit.intercepts,
        slopes: fit.slopes,
        cov: fit.cov,
    })
}

/// Source of `beta*` in the conditional law of missing responses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BetaStarRule {
    /// Fitted response transition model.
    #[default]
    Transition,
    /// The current marginal-model iterate, with occasions independent.
    SelfConsistent,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationConfig {
    /// Largest number of `(x, y)` configurations per occasion summed exactly.
    pub enumeration_cap: usize,
    /// Monte Carlo draws per occasion beyond the cap.
    pub mc_draws: usize,
    pub beta_star_rule: BetaStarRule,
    pub seed: u64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            enumeration_cap: 4096,
            mc_draws: 1000,
            beta_star_rule: BetaStarRule::Transition,
            seed: 0,
        }
    }
}

/// Nuisance models plugged into the doubly robust equations.
#[derive(Debug, Clone)]
pub struct DrNuisance {
    pub missingness: MissingnessModel,
    pub covariate: CovariateModel,
    pub outcome: OutcomeModel,
}

/// `(beta, psi, gamma)` together with the transition model.
#[derive(Debug, Clone)]
pub struct ThetaParams {
    pub beta: BetaParams,
    pub nuisance: DrNuisance,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DrOptions {
    pub scheme: WeightScheme,
    pub positivity_floor: f64,
    pub augmentation: AugmentationConfig,
    pub correct_for_nuisance: bool,
}

impl Default for DrOptions {
    fn default() -> Self {
        Self {
            scheme: WeightScheme::Sequential,
            positivity_floor: crate::missingness::DEFAULT_POSITIVITY_FLOOR,
            augmentation: AugmentationConfig::default(),
            correct_for_nuisance: true,
        }
    }
}

/// Terms of one subject: weighted observed occasions plus augmentation terms.
fn subject_terms(
    spec: &OrdinalSpec,
    subj: &SubjectRecord,
    index: usize,
    nuis: &DrNuisance,
    opts: &DrOptions,
    floor: f64,
) -> Result<(Vec<Term>, Vec<Term>)> {
    let pi = observation_probs(&nuis.missingness, subj, opts.scheme, floor)?;
    let r = encode_r(subj);
    let aug = &opts.augmentation;
    let mut observed = Vec::new();
    let mut augmented = Vec::new();
    let pred = nuis.covariate.predictive(subj)?;
    let support = &nuis.covariate.support;
    for t in 0..subj.n_occasions() {
        let delta = if r[t] == 3 { 1.0 / pi[t] } else { 0.0 };
        if r[t] == 3 {
            observed.push(Term {
                t,
                x: subj.x[t].expect("observed"),
                w: delta,
                ybar: encode_indicators(subj.outcomes[t].expect("observed"), spec.categories)?,
            });
        }
        let a = 1.0 - delta;
        if t == 0 || a == 0.0 {
            continue;
        }
        match aug.beta_star_rule {
            BetaStarRule::SelfConsistent => match (subj.outcomes[t], subj.x[t]) {
                (Some(o), Some(x)) => augmented.push(Term {
                    t,
                    x,
                    w: a,
                    ybar: encode_indicators(o, spec.categories)?,
                }),
                (Some(o), None) => {
                    for (s, p) in support.iter().zip(&pred[t]) {
                        augmented.push(Term {
                            t,
                            x: *s,
                            w: a * p,
                            ybar: encode_indicators(o, spec.categories)?,
                        });
                    }
                }
                _ => {}
            },
            BetaStarRule::Transition => {
                if support.len() * spec.categories <= aug.enumeration_cap {
                    for (s, p) in support.iter().zip(&pred[t]) {
                        if *p == 0.0 {
                            continue;
                        }
                        let probs = nuis.outcome.probs(subj, t, *s)?;
                        augmented.push(Term {
                            t,
                            x: *s,
                            w: a * p,
                            ybar: probs[..spec.categories - 1].to_vec(),
                        });
                    }
                } else {
                    let mut rng = ChaCha8Rng::seed_from_u64(aug.seed);
                    rng.set_stream(((index as u64) << 8) | t as u64);
                    let draws = aug.mc_draws.max(1);
                    for _ in 0..draws {
                        let sx = draw_category(&pred[t], &mut rng) - 1;
                        let probs = nuis.outcome.probs(subj, t, support[sx])?;
                        let y = draw_category(&probs, &mut rng);
                        augmented.push(Term {
                            t,
                            x: support[sx],
                            w: a / draws as f64,
                            ybar: encode_indicators(y, spec.categories)?,
                        });
                    }
                }
            }
        }
    }
    Ok((observed, augmented))
}

fn build_terms(
    spec: &OrdinalSpec,
    data: &[SubjectRecord],
    nuis: &DrNuisance,
    opts: &DrOptions,
    floor: f64,
) -> Result<Terms> {
    data.iter()
        .enumerate()
        .map(|(i, s)| {
            let (mut o, a) = subject_terms(spec, s, i, nuis, opts, floor)?;
            o.extend(a);
            Ok(o)
        })
        .collect()
}

/// `sum_t (1 - delta_it) E{U_it | H_it}` for one subject at `beta`.
pub fn augmentation_term(
    spec: &OrdinalSpec,
    beta: &BetaParams,
    nuis: &DrNuisance,
    subj: &SubjectRecord,
    index: usize,
    opts: &DrOptions,
) -> Result<DVector<f64>> {
    let (_, aug) = subject_terms(spec, subj, index, nuis, opts, opts.positivity_floor)?;
    Ok(gee::subject_score_info(spec, &beta.to_vec(), subj, &aug, false)?.0)
}

/// Per-subject doubly robust scores `S1_i` at `beta`.
pub fn dr_subject_scores(
    spec: &OrdinalSpec,
    beta: &BetaParams,
    data: &[SubjectRecord],
    nuis: &DrNuisance,
    opts: &DrOptions,
) -> Result<Vec<DVector<f64>>> {
    let terms = build_terms(spec, data, nuis, opts, opts.positivity_floor)?;
    gee::subject_scores(spec, &beta.to_vec(), data, &terms)
}

/// Numeric cross-derivatives of the summed `S1` in each nuisance block and
/// the matching nuisance scores and Hessians.
fn corrections(
    spec: &OrdinalSpec,
    beta: &[f64],
    data: &[SubjectRecord],
    nuis: &DrNuisance,
    opts: &DrOptions,
) -> Result<Vec<NuisanceCorrection>> {
    let s1_total = |n: &DrNuisance| -> Result<DVector<f64>> {
        let terms = build_terms(spec, data, n, opts, 0.0)?;
        Ok(gee::total_score_info(spec, beta, data, &terms, false)?.0)
    };
    let mut out = Vec::new();
    if nuis.missingness.n_params() > 0 {
        out.push(wgee::psi_correction(&nuis.missingness, data, |m| {
            s1_total(&DrNuisance {
                missingness: m.clone(),
                ..nuis.clone()
            })
        })?);
    }
    let gamma = nuis.covariate.params();
    let cross = numeric_jacobian(
        |v| {
            s1_total(&DrNuisance {
                covariate: nuis.covariate.with_params(v.as_slice()),
                ..nuis.clone()
            })
        },
        &gamma,
    )?;
    let hessian = numeric_jacobian(
        |v| nuis.covariate.with_params(v.as_slice()).total_score(data),
        &gamma,
    )?;
    out.push(NuisanceCorrection {
        cross,
        hessian,
        scores: nuis.covariate.subject_scores(data)?,
    });
    if opts.augmentation.beta_star_rule == BetaStarRule::Transition {
        let theta = nuis.outcome.params();
        let cross = numeric_jacobian(
            |v| {
                s1_total(&DrNuisance {
                    outcome: nuis.outcome.with_params(v.as_slice()),
                    ..nuis.clone()
                })
            },
            &theta,
        )?;
        out.push(NuisanceCorrection {
            cross,
            hessian: nuis.outcome.hessian(data)?,
            scores: nuis.outcome.subject_scores(data)?,
        });
    }
    Ok(out)
}

/// Sandwich covariance with numeric `Gamma` and nuisance-estimation corrections.
pub fn dr_sandwich(theta: &ThetaParams, spec: &OrdinalSpec, data: &[SubjectRecord], opts: &DrOptions) -> Result<DMatrix<f64>> {
    let terms = build_terms(spec, data, &theta.nuisance, opts, opts.positivity_floor)?;
    sandwich_with_terms(spec, &theta.beta.to_vec(), data, &theta.nuisance, opts, &terms)
}

fn sandwich_with_terms(
    spec: &OrdinalSpec,
    beta: &[f64],
    data: &[SubjectRecord],
    nuis: &DrNuisance,
    opts: &DrOptions,
    terms: &Terms,
) -> Result<DMatrix<f64>> {
    let bread = numeric_jacobian(
        |b| Ok(gee::total_score_info(spec, b.as_slice(), data, terms, false)?.0),
        &DVector::from_column_slice(beta),
    )?;
    let s1 = gee::subject_scores(spec, beta, data, terms)?;
    let corr = if opts.correct_for_nuisance {
        corrections(spec, beta, data, nuis, opts)?
    } else {
        Vec::new()
    };
    gee::robust_cov(&bread, &s1, &corr)
}

/// Two estimates of `E{d S1 / d psi'}`: numeric differentiation and the
/// cross-product form `-E{S1 S2'}`. Both are averaged over subjects.
pub fn psi_cross_information(
    spec: &OrdinalSpec,
    beta: &BetaParams,
    data: &[SubjectRecord],
    nuis: &DrNuisance,
    opts: &DrOptions,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let b = beta.to_vec();
    let corr = wgee::psi_correction(&nuis.missingness, data, |m| {
        let n = DrNuisance {
            missingness: m.clone(),
            ..nuis.clone()
        };
        let terms = build_terms(spec, data, &n, opts, 0.0)?;
        Ok(gee::total_score_info(spec, &b, data, &terms, false)?.0)
    })?;
    let s1 = dr_subject_scores(spec, beta, data, nuis, opts)?;
    let n = data.len() as f64;
    let mut cp = DMatrix::zeros(b.len(), nuis.missingness.n_params());
    for (a, s2) in s1.iter().zip(&corr.scores) {
        cp -= a * s2.transpose();
    }
    Ok((corr.cross / n, cp / n))
}

/// Doubly robust fit at plugged-in nuisance models.
pub fn drgee_fit(
    data: &[SubjectRecord],
    spec: &OrdinalSpec,
    nuis: &DrNuisance,
    opts: &DrOptions,
    cfg: &SolverConfig,
) -> Result<FitResult> {
    gee::validate_data(spec, data)?;
    let terms = build_terms(spec, data, nuis, opts, opts.positivity_floor)?;
    let (beta, sol) = gee::fit_terms(spec, data, &terms, cfg)?;
    let cov = sandwich_with_terms(spec, &beta, data, nuis, opts, &terms)?;
    let mut diagnostics = nuis.missingness.notes.clone();
    let n_aug = terms.iter().flatten().filter(|t| t.w != 0.0).count();
    diagnostics.push(format!("{n_aug} weighted and augmentation terms"));
    Ok(FitResult {
        beta_hat: BetaParams::from_slice(spec, &beta)?,
        cov,
        iterations: sol.iterations,
        converged: true,
        score_norm: sol.score_norm,
        n_subjects: data.len(),
        diagnostics,
    })
}
