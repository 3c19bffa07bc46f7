//! Multiple imputation by chained equations, followed by GEE and Rubin's rules.
//!
//! Data are laid out wide: one column per occasion for `O` and for `X`, plus
//! every `Z` column. Each incomplete column is imputed from a cumulative-logit
//! regression on the current values of the others, with coefficients drawn
//! from their asymptotic normal law before each predictive draw.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gee::{gee_fit, FitResult, GeeMode};
use crate::ordinal::{BetaParams, OrdinalSpec, SubjectRecord};
use crate::ordreg::{self, draw_category, OrdRow};
use crate::solver::SolverConfig;

/// Predictor set of the covariate imputation models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ImputationRecipe {
    /// Every other column predicts every target.
    #[default]
    Full,
    /// `X_t` is imputed without the other `X` columns.
    OmitX,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImputationConfig {
    pub m: usize,
    pub cycles: usize,
    pub seed: u64,
    pub recipe: ImputationRecipe,
    /// Ridge on the slopes of each conditional model.
    pub ridge: f64,
}

impl Default for ImputationConfig {
    fn default() -> Self {
        Self {
            m: 10,
            cycles: 10,
            seed: 0,
            recipe: ImputationRecipe::Full,
            ridge: 1e-5,
        }
    }
}

impl ImputationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m < 2 {
            return Err(Error::InvalidParameter(format!("need at least 2 imputations, got {}", self.m)));
        }
        if self.cycles < 1 {
            return Err(Error::InvalidParameter("need at least one FCS cycle".into()));
        }
        if !(self.ridge >= 0.0 && self.ridge.is_finite()) {
            return Err(Error::InvalidParameter(format!("ridge must be finite and >= 0, got {}", self.ridge)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    O(usize),
    X(usize),
}

struct Column {
    kind: Kind,
    /// Sorted support; values are stored as indices into it.
    levels: Vec<f64>,
    observed: Vec<Option<usize>>,
}

struct Wide {
    cols: Vec<Column>,
    z: Vec<Vec<f64>>,
}

fn to_wide(data: &[SubjectRecord], spec: &OrdinalSpec) -> Result<Wide> {
    let t_len = data[0].n_occasions();
    if data.iter().any(|s| s.n_occasions() != t_len) {
        return Err(Error::InvalidData("imputation needs the same number of occasions for every subject".into()));
    }
    let mut cols = Vec::new();
    for t in 0..t_len {
        let levels: Vec<f64> = (1..=spec.categories).map(|k| k as f64).collect();
        let observed = data.iter().map(|s| s.outcomes[t].map(|o| o - 1)).collect();
        cols.push(Column {
            kind: Kind::O(t),
            levels,
            observed,
        });
        let mut levels: Vec<f64> = data.iter().filter_map(|s| s.x[t]).collect();
        levels.sort_by(f64::total_cmp);
        levels.dedup();
        let observed = data
            .iter()
            .map(|s| s.x[t].map(|x| levels.iter().position(|l| *l == x).expect("level")))
            .collect();
        cols.push(Column {
            kind: Kind::X(t),
            levels,
            observed,
        });
    }
    for c in &cols {
        if c.observed.iter().all(Option::is_none) && c.observed.iter().any(Option::is_none) {
            let what = match c.kind {
                Kind::O(t) => format!("response at occasion {}", t + 1),
                Kind::X(t) => format!("covariate at occasion {}", t + 1),
            };
            return Err(Error::NotIdentifiable(format!("{what} is never observed")));
        }
    }
    let z = data.iter().map(|s| s.z.iter().flatten().copied().collect()).collect();
    Ok(Wide { cols, z })
}

fn predictors(wide: &Wide, cur: &[Vec<usize>], target: usize, recipe: ImputationRecipe, i: usize) -> Vec<f64> {
    let omit_x = recipe == ImputationRecipe::OmitX && matches!(wide.cols[target].kind, Kind::X(_));
    let mut f = Vec::new();
    for (j, c) in wide.cols.iter().enumerate() {
        if j == target || (omit_x && matches!(c.kind, Kind::X(_))) {
            continue;
        }
        f.push(c.levels[cur[j][i]]);
    }
    f.extend_from_slice(&wide.z[i]);
    f
}

fn impute_once(
    data: &[SubjectRecord],
    wide: &Wide,
    cfg: &ImputationConfig,
    solver: &SolverConfig,
    stream: u64,
) -> Result<Vec<SubjectRecord>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(stream);
    let n = data.len();
    let mut cur: Vec<Vec<usize>> = wide
        .cols
        .iter()
        .map(|c| {
            let pool: Vec<usize> = c.observed.iter().flatten().copied().collect();
            c.observed
                .iter()
                .map(|v| v.unwrap_or_else(|| if pool.is_empty() { 0 } else { pool[rng.random_range(0..pool.len())] }))
                .collect()
        })
        .collect();
    let incomplete: Vec<usize> = (0..wide.cols.len())
        .filter(|&j| wide.cols[j].observed.iter().any(Option::is_none))
        .collect();
    let mut warm: Vec<Option<Vec<f64>>> = vec![None; wide.cols.len()];
    for _ in 0..cfg.cycles {
        for &j in &incomplete {
            let col = &wide.cols[j];
            // Compress to the levels actually observed so every category is populated.
            let mut present: Vec<usize> = col.observed.iter().flatten().copied().collect();
            present.sort_unstable();
            present.dedup();
            if present.len() == 1 {
                for i in 0..n {
                    if col.observed[i].is_none() {
                        cur[j][i] = present[0];
                    }
                }
                continue;
            }
            let rows: Vec<OrdRow> = (0..n)
                .filter_map(|i| {
                    col.observed[i].map(|v| OrdRow {
                        x: predictors(wide, &cur, j, cfg.recipe, i),
                        y: present.binary_search(&v).expect("present") + 1,
                        w: 1.0,
                    })
                })
                .collect();
            let n_x = rows[0].x.len();
            // Separated fits are retried with a heavier ridge.
            let mut fit = ordreg::fit_from(&rows, present.len(), n_x, cfg.ridge, warm[j].as_deref(), solver);
            for ridge in [1e-2, 1.0] {
                if fit.is_ok() || ridge <= cfg.ridge {
                    break;
                }
                fit = ordreg::fit_from(&rows, present.len(), n_x, ridge, None, solver);
            }
            let fit = fit?;
            warm[j] = Some(fit.params());
            let (a, b) = fit.draw_params(&mut rng);
            for i in 0..n {
                if col.observed[i].is_none() {
                    let p = ordreg::full_probs(&a, &b, &predictors(wide, &cur, j, cfg.recipe, i));
                    cur[j][i] = present[draw_category(&p, &mut rng) - 1];
                }
            }
        }
    }
    let mut out = data.to_vec();
    for (j, c) in wide.cols.iter().enumerate() {
        for (i, s) in out.iter_mut().enumerate() {
            let v = c.levels[cur[j][i]];
            match c.kind {
                Kind::O(t) => s.outcomes[t] = Some(v as usize),
                Kind::X(t) => s.x[t] = Some(v),
            }
        }
    }
    Ok(out)
}

/// `m` completed datasets. Chain `k` uses RNG stream `k` of the seed.
pub fn fcs_impute(
    data: &[SubjectRecord],
    spec: &OrdinalSpec,
    cfg: &ImputationConfig,
    solver: &SolverConfig,
) -> Result<Vec<Vec<SubjectRecord>>> {
    cfg.validate()?;
    crate::gee::validate_data(spec, data)?;
    let wide = to_wide(data, spec)?;
    (0..cfg.m)
        .into_par_iter()
        .map(|k| impute_once(data, &wide, cfg, solver, k as u64))
        .collect()
}

/// Rubin's rules: mean estimate and `W + (1 + 1/M) B`.
#[derive(Debug, Clone, PartialEq)]
pub struct Pooled {
    pub estimate: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub within: DMatrix<f64>,
    pub between: DMatrix<f64>,
}

pub fn pool_rubin(estimates: &[DVector<f64>], covs: &[DMatrix<f64>]) -> Result<Pooled> {
    let m = estimates.len();
    if m < 2 {
        return Err(Error::InvalidParameter(format!("pooling needs at least 2 imputations, got {m}")));
    }
    if covs.len() != m {
        return Err(Error::DimensionMismatch(format!("{m} estimates but {} covariances", covs.len())));
    }
    let p = estimates[0].len();
    if estimates.iter().any(|e| e.len() != p) || covs.iter().any(|c| c.shape() != (p, p)) {
        return Err(Error::DimensionMismatch("imputed fits differ in dimension".into()));
    }
    let mf = m as f64;
    // Centred on the first input so identical inputs pool to themselves exactly.
    let estimate = &estimates[0] + estimates.iter().fold(DVector::zeros(p), |a, e| a + (e - &estimates[0])) / mf;
    let within = &covs[0] + covs.iter().fold(DMatrix::zeros(p, p), |a, c| a + (c - &covs[0])) / mf;
    let between = estimates.iter().fold(DMatrix::zeros(p, p), |a, e| {
        let d = e - &estimate;
        a + &d * d.transpose()
    }) / (mf - 1.0);
    let cov = &within + &between * (1.0 + 1.0 / mf);
    Ok(Pooled {
        estimate,
        cov,
        within,
        between,
    })
}

/// Imputes, fits GEE to each completed dataset and pools.
pub fn migee_fit(
    data: &[SubjectRecord],
    spec: &OrdinalSpec,
    cfg: &ImputationConfig,
    solver: &SolverConfig,
) -> Result<FitResult> {
    let sets = fcs_impute(data, spec, cfg, solver)?;
    let fits = sets
        .iter()
        .map(|d| gee_fit(d, spec, solver, GeeMode::Complete))
        .collect::<Result<Vec<_>>>()?;
    let est: Vec<DVector<f64>> = fits.iter().map(|f| f.beta_hat.to_dvector()).collect();
    let covs: Vec<DMatrix<f64>> = fits.iter().map(|f| f.cov.clone()).collect();
    let pooled = pool_rubin(&est, &covs)?;
    let n_missing: usize = data
        .iter()
        .map(|s| s.outcomes.iter().filter(|o| o.is_none()).count() + s.x.iter().filter(|x| x.is_none()).count())
        .sum();
    Ok(FitResult {
        beta_hat: BetaParams::from_slice(spec, pooled.estimate.as_slice())?,
        cov: pooled.cov,
        iterations: fits.iter().map(|f| f.iterations).max().unwrap_or(0),
        converged: true,
        score_norm: fits.iter().map(|f| f.score_norm).fold(0.0, f64::max),
        n_subjects: data.len(),
        diagnostics: vec![format!("{} imputations, {n_missing} missing entries imputed", cfg.m)],
    })
}
