//! Monte Carlo harness: data generation under the three-occasion design and
//! summaries of bias, standard errors and coverage per estimator.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::covariate::{fit_gamma, CovariateRecipe};
use crate::drgee::{drgee_fit, fit_outcome_model, AugmentationConfig, DrNuisance, DrOptions, OutcomeRecipe};
use crate::error::{Error, Result};
use crate::gee::{gee_fit, FitResult, GeeMode};
use crate::migee::{migee_fit, ImputationConfig, ImputationRecipe};
use crate::missingness::{fit_psi, MissingnessRecipe, RMode};
use crate::ordinal::{expit, logit, BetaParams, OrdinalSpec, SubjectRecord};
use crate::solver::SolverConfig;
use crate::wgee::{wgee_fit, WgeeOptions};

/// True parameters of the generating process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Truth {
    /// `(intercept1, intercept2, x, z)` of the marginal model.
    pub beta: Vec<f64>,
    /// `(intercept, lag x, z)` of the covariate chain.
    pub gamma: [f64; 3],
    /// `(intercept2, intercept3, I(R_{t-1}=1), O*_{t-1}, X*_{t-1}, Z_t)`.
    pub psi: [f64; 6],
    pub z_means: Vec<f64>,
}

impl Default for Truth {
    fn default() -> Self {
        Self {
            beta: vec![-0.4, 1.2, -0.5, 0.5],
            gamma: [0.0, 2.0, 2.0],
            psi: [6.6, 6.0, 2.0, -2.0, -2.0, 2.0],
            z_means: vec![0.0, 0.5, 1.0],
        }
    }
}

impl Truth {
    pub fn occasions(&self) -> usize {
        self.z_means.len()
    }

    pub fn spec(&self) -> Result<OrdinalSpec> {
        OrdinalSpec::new(self.beta.len() - 1, self.occasions(), 1)
    }

    pub fn beta_params(&self) -> Result<BetaParams> {
        let spec = self.spec()?;
        BetaParams::from_slice(&spec, &self.beta)
    }

    fn validate(&self) -> Result<()> {
        if self.beta.len() < 3 {
            return Err(Error::InvalidParameter("truth.beta needs intercepts, x and z".into()));
        }
        if self.occasions() < 2 || self.occasions() > 3 {
            return Err(Error::InvalidParameter("the generator supports 2 or 3 occasions".into()));
        }
        self.beta_params().map(|_| ())
    }
}

/// `Z_it ~ N(mean_t, 1)`.
pub fn gen_z<R: Rng + ?Sized>(n: usize, means: &[f64], rng: &mut R) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            means
                .iter()
                .map(|m| m + Distribution::<f64>::sample(&StandardNormal, rng))
                .collect()
        })
        .collect()
}

/// Binary Markov chain with `logit Pr(X_t = 1) = g0 + g1 X_{t-1} + g2 Z_t` and `X_0 = 0`.
pub fn gen_x<R: Rng + ?Sized>(z: &[Vec<f64>], gamma: &[f64; 3], rng: &mut R) -> Vec<Vec<f64>> {
    z.iter()
        .map(|zi| {
            let mut prev = 0.0;
            zi.iter()
                .map(|zt| {
                    let p = expit(gamma[0] + gamma[1] * prev + gamma[2] * zt);
                    prev = if rng.random::<f64>() < p { 1.0 } else { 0.0 };
                    prev
                })
                .collect()
        })
        .collect()
}

/// Responses from thresholded logistic latents tied by an exchangeable
/// Gaussian copula with correlation `rho`.
pub fn gen_ordinal<R: Rng + ?Sized>(
    beta: &BetaParams,
    x: &[Vec<f64>],
    z: &[Vec<f64>],
    rho: f64,
    rng: &mut R,
) -> Result<Vec<Vec<usize>>> {
    if !(0.0..1.0).contains(&rho) {
        return Err(Error::InvalidParameter(format!("rho must lie in [0, 1), got {rho}")));
    }
    let bx = beta.beta_x[0];
    let bz = beta.beta_z[0];
    let std = Normal::standard();
    let (a, b) = (rho.sqrt(), (1.0 - rho).sqrt());
    Ok(x.iter()
        .zip(z)
        .map(|(xi, zi)| {
            let shared: f64 = StandardNormal.sample(rng);
            xi.iter()
                .zip(zi)
                .map(|(xt, zt)| {
                    let e: f64 = StandardNormal.sample(rng);
                    let latent = logit(std.cdf(a * shared + b * e));
                    let eta = bx * xt + bz * zt;
                    beta.intercepts
                        .iter()
                        .position(|c| latent <= c + eta)
                        .map_or(beta.intercepts.len() + 1, |j| j + 1)
                })
                .collect()
        })
        .collect())
}

/// Codes `R_it` in `{0, 3}`: the first occasion is always observed and later
/// ones are observed with probability `expit(psi' f)` given the zero-filled past.
pub fn gen_missingness<R: Rng + ?Sized>(
    psi: &[f64; 6],
    o: &[Vec<usize>],
    x: &[Vec<f64>],
    z: &[Vec<f64>],
    rng: &mut R,
) -> Vec<Vec<u8>> {
    o.iter()
        .zip(x)
        .zip(z)
        .map(|((oi, xi), zi)| {
            let mut r = vec![3u8; oi.len()];
            for t in 1..oi.len() {
                let prev = r[t - 1] == 3;
                let o_star = if prev { oi[t - 1] as f64 } else { 0.0 };
                let x_star = if prev { xi[t - 1] } else { 0.0 };
                let r1 = if r[t - 1] == 1 { 1.0 } else { 0.0 };
                let lin = psi[t.min(2) - 1] + psi[2] * r1 + psi[3] * o_star + psi[4] * x_star + psi[5] * zi[t];
                r[t] = if rng.random::<f64>() < expit(lin) { 3 } else { 0 };
            }
            r
        })
        .collect()
}

/// Full data and the incomplete records implied by `r`.
pub struct Generated {
    pub full: Vec<SubjectRecord>,
    pub observed: Vec<SubjectRecord>,
}

pub fn generate<R: Rng + ?Sized>(n: usize, truth: &Truth, rho: f64, rng: &mut R) -> Result<Generated> {
    let beta = truth.beta_params()?;
    let z = gen_z(n, &truth.z_means, rng);
    let x = gen_x(&z, &truth.gamma, rng);
    let o = gen_ordinal(&beta, &x, &z, rho, rng)?;
    let r = gen_missingness(&truth.psi, &o, &x, &z, rng);
    let full: Vec<SubjectRecord> = (0..n)
        .map(|i| SubjectRecord {
            id: (i + 1).to_string(),
            outcomes: o[i].iter().map(|v| Some(*v)).collect(),
            x: x[i].iter().map(|v| Some(*v)).collect(),
            z: z[i].iter().map(|v| vec![*v]).collect(),
        })
        .collect();
    let observed = full
        .iter()
        .zip(&r)
        .map(|(s, ri)| {
            let mut s = s.clone();
            for (t, code) in ri.iter().enumerate() {
                if *code == 0 {
                    s.outcomes[t] = None;
                    s.x[t] = None;
                }
            }
            s
        })
        .collect();
    Ok(Generated { full, observed })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Complete,
    Available,
    Wgee,
    Migee,
    Drgee,
}

/// Correct (`+`) or misspecified (`-`) working models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Flags {
    /// Covariate and imputation models keep the lagged covariate.
    pub x_correct: bool,
    /// Missingness model keeps the lagged covariate.
    pub r_correct: bool,
}

impl Flags {
    fn x_sign(&self) -> char {
        if self.x_correct { '+' } else { '-' }
    }

    fn r_sign(&self) -> char {
        if self.r_correct { '+' } else { '-' }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub n: usize,
    pub reps: usize,
    pub rho: f64,
    pub truth: Truth,
    pub flags: Vec<Flags>,
    pub methods: Vec<Method>,
    pub seed: u64,
    pub imputation: ImputationConfig,
    pub augmentation: AugmentationConfig,
    pub solver: SolverConfig,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            n: 300,
            reps: 200,
            rho: 0.9,
            truth: Truth::default(),
            flags: vec![Flags {
                x_correct: true,
                r_correct: true,
            }],
            methods: vec![Method::Complete, Method::Available, Method::Wgee, Method::Migee, Method::Drgee],
            seed: 2024,
            imputation: ImputationConfig::default(),
            augmentation: AugmentationConfig::default(),
            solver: SolverConfig::default(),
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.reps == 0 {
            return Err(Error::Config("n and reps must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.rho) {
            return Err(Error::Config(format!("rho must lie in [0, 1), got {}", self.rho)));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("no methods requested".into()));
        }
        self.truth.validate()?;
        self.imputation.validate()?;
        self.solver.validate()
    }

    /// Fitted variants in output order, each a method with the flags it uses.
    pub fn variants(&self) -> Vec<(String, Method, Flags)> {
        let mut out: Vec<(String, Method, Flags)> = Vec::new();
        for &m in &self.methods {
            for f in &self.flags {
                let label = match m {
                    Method::Complete => "complete".to_string(),
                    Method::Available => "available".to_string(),
                    Method::Wgee => format!("wgee(r{})", f.r_sign()),
                    Method::Migee => format!("migee(x{})", f.x_sign()),
                    Method::Drgee => format!("drgee(x{},r{})", f.x_sign(), f.r_sign()),
                };
                if !out.iter().any(|(l, _, _)| *l == label) {
                    out.push((label, m, *f));
                }
            }
        }
        out
    }
}

fn missingness_recipe(f: Flags) -> MissingnessRecipe {
    MissingnessRecipe {
        lag_x_star: f.r_correct,
        ..Default::default()
    }
}

fn covariate_recipe(f: Flags) -> CovariateRecipe {
    CovariateRecipe {
        lag_x: f.x_correct,
        ..Default::default()
    }
}

/// One replication's fit of one variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum RepOutcome {
    Fitted { estimates: Vec<f64>, std_errors: Vec<f64> },
    Failed(String),
}

fn fit_variant(
    cfg: &ScenarioConfig,
    spec: &OrdinalSpec,
    data: &Generated,
    method: Method,
    flags: Flags,
    rep: usize,
) -> Result<FitResult> {
    let solver = &cfg.solver;
    let obs = &data.observed;
    match method {
        Method::Complete => gee_fit(&data.full, spec, solver, GeeMode::Complete),
        Method::Available => gee_fit(obs, spec, solver, GeeMode::Available),
        Method::Wgee => {
            let model = fit_psi(obs, spec, &missingness_recipe(flags), RMode::Binary, solver)?;
            wgee_fit(obs, spec, &model, &WgeeOptions::default(), solver)
        }
        Method::Migee => {
            let imp = ImputationConfig {
                seed: cfg.seed ^ ((rep as u64 + 1) << 20),
                recipe: if flags.x_correct { ImputationRecipe::Full } else { ImputationRecipe::OmitX },
                ..cfg.imputation
            };
            migee_fit(obs, spec, &imp, solver)
        }
        Method::Drgee => {
            let nuis = DrNuisance {
                missingness: fit_psi(obs, spec, &missingness_recipe(flags), RMode::Binary, solver)?,
                covariate: fit_gamma(obs, &covariate_recipe(flags), spec.categories, None, solver)?,
                outcome: fit_outcome_model(obs, spec, &OutcomeRecipe::default(), solver)?,
            };
            let opts = DrOptions {
                augmentation: AugmentationConfig {
                    seed: cfg.seed ^ ((rep as u64 + 1) << 20),
                    ..cfg.augmentation
                },
                ..Default::default()
            };
            drgee_fit(obs, spec, &nuis, &opts, solver)
        }
    }
}

/// Results of one replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Replication {
    pub missing_rate: f64,
    pub outcomes: Vec<RepOutcome>,
}

pub fn run_replication(cfg: &ScenarioConfig, rep: usize) -> Result<Replication> {
    let spec = cfg.truth.spec()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(rep as u64);
    let data = generate(cfg.n, &cfg.truth, cfg.rho, &mut rng)?;
    let cells = cfg.n * cfg.truth.occasions();
    let missing = data
        .observed
        .iter()
        .map(|s| s.outcomes.iter().filter(|o| o.is_none()).count())
        .sum::<usize>();
    let outcomes = cfg
        .variants()
        .into_iter()
        .map(|(_, m, f)| match fit_variant(cfg, &spec, &data, m, f, rep) {
            Ok(fit) => RepOutcome::Fitted {
                estimates: fit.estimates(),
                std_errors: fit.std_errors(),
            },
            Err(e) => RepOutcome::Failed(e.to_string()),
        })
        .collect();
    Ok(Replication {
        missing_rate: missing as f64 / cells as f64,
        outcomes,
    })
}

/// JSON writes non-finite numbers as `null`; read them back as NaN.
pub(crate) fn nan_vec<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Vec<f64>, D::Error> {
    let v: Vec<Option<f64>> = Deserialize::deserialize(d)?;
    Ok(v.into_iter().map(|x| x.unwrap_or(f64::NAN)).collect())
}

pub(crate) fn nan_f64<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    let v: Option<f64> = Deserialize::deserialize(d)?;
    Ok(v.unwrap_or(f64::NAN))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub label: String,
    pub params: Vec<String>,
    /// Mean over replications of `100 (estimate - truth) / truth`.
    #[serde(deserialize_with = "nan_vec")]
    pub bias_pct: Vec<f64>,
    /// Mean sandwich standard error.
    #[serde(deserialize_with = "nan_vec")]
    pub mean_se: Vec<f64>,
    /// Monte Carlo standard deviation of the estimates.
    #[serde(deserialize_with = "nan_vec")]
    pub mc_sd: Vec<f64>,
    /// Share of nominal 95% Wald intervals covering the truth.
    #[serde(deserialize_with = "nan_vec")]
    pub coverage: Vec<f64>,
    pub fitted: usize,
    pub excluded: usize,
    pub first_error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSummary {
    pub n: usize,
    pub reps: usize,
    pub rho: f64,
    pub seed: u64,
    pub truth: Vec<f64>,
    /// Mean share of subject-occasions with the response missing.
    pub missing_rate: f64,
    pub methods: Vec<MethodSummary>,
}

pub fn summarize(cfg: &ScenarioConfig, reps: &[Replication]) -> Result<SimSummary> {
    let spec = cfg.truth.spec()?;
    let names = spec.param_names(&["z".to_string()]);
    let truth = &cfg.truth.beta;
    let z975 = Normal::standard().inverse_cdf(0.975);
    let p = truth.len();
    let methods = cfg
        .variants()
        .into_iter()
        .enumerate()
        .map(|(k, (label, _, _))| {
            let mut est: Vec<&Vec<f64>> = Vec::new();
            let mut ses: Vec<&Vec<f64>> = Vec::new();
            let mut first_error = None;
            for r in reps {
                match &r.outcomes[k] {
                    RepOutcome::Fitted { estimates, std_errors } => {
                        est.push(estimates);
                        ses.push(std_errors);
                    }
                    RepOutcome::Failed(e) => {
                        first_error.get_or_insert_with(|| e.clone());
                    }
                }
            }
            let m = est.len() as f64;
            let mean = |f: &dyn Fn(usize, usize) -> f64, j: usize| {
                if est.is_empty() {
                    f64::NAN
                } else {
                    (0..est.len()).map(|i| f(i, j)).sum::<f64>() / m
                }
            };
            let bias_pct = (0..p).map(|j| mean(&|i, j| 100.0 * (est[i][j] - truth[j]) / truth[j], j)).collect();
            let mean_se = (0..p).map(|j| mean(&|i, j| ses[i][j], j)).collect();
            let coverage = (0..p)
                .map(|j| mean(&|i, j| f64::from(u8::from((est[i][j] - truth[j]).abs() <= z975 * ses[i][j])), j))
                .collect();
            let mc_sd = (0..p)
                .map(|j| {
                    if est.len() < 2 {
                        return f64::NAN;
                    }
                    let mu = est.iter().map(|e| e[j]).sum::<f64>() / m;
                    (est.iter().map(|e| (e[j] - mu).powi(2)).sum::<f64>() / (m - 1.0)).sqrt()
                })
                .collect();
            MethodSummary {
                label,
                params: names.clone(),
                bias_pct,
                mean_se,
                mc_sd,
                coverage,
                fitted: est.len(),
                excluded: reps.len() - est.len(),
                first_error,
            }
        })
        .collect();
    Ok(SimSummary {
        n: cfg.n,
        reps: reps.len(),
        rho: cfg.rho,
        seed: cfg.seed,
        truth: truth.clone(),
        missing_rate: reps.iter().map(|r| r.missing_rate).sum::<f64>() / reps.len() as f64,
        methods,
    })
}

/// Runs every replication on the current rayon pool, in replication order.
pub fn run_replications(cfg: &ScenarioConfig) -> Result<Vec<Replication>> {
    cfg.validate()?;
    (0..cfg.reps)
        .into_par_iter()
        .map(|r| run_replication(cfg, r))
        .collect()
}

pub fn run_simulation(cfg: &ScenarioConfig) -> Result<SimSummary> {
    summarize(cfg, &run_replications(cfg)?)
}

impl SimSummary {
    pub fn method(&self, label: &str) -> Option<&MethodSummary> {
        self.methods.iter().find(|m| m.label == label)
    }

    /// Long CSV: one row per method and parameter.
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["method", "parameter", "truth", "bias_pct", "mean_se", "mc_sd", "coverage", "fitted", "excluded"])?;
        for m in &self.methods {
            for (j, name) in m.params.iter().enumerate() {
                wr.write_record([
                    m.label.clone(),
                    name.clone(),
                    format!("{}", self.truth[j]),
                    format!("{:.4}", m.bias_pct[j]),
                    format!("{:.5}", m.mean_se[j]),
                    format!("{:.5}", m.mc_sd[j]),
                    format!("{:.4}", m.coverage[j]),
                    m.fitted.to_string(),
                    m.excluded.to_string(),
                ])?;
            }
        }
        wr.flush()?;
        Ok(())
    }

    /// Plain-text table in the layout methods by parameters.
    pub fn to_table(&self) -> String {
        use std::fmt::Write;
        let mut s = String::new();
        let _ = writeln!(
            s,
            "n = {}, replications = {}, rho = {}, seed = {}, missing rate = {:.2}%",
            self.n,
            self.reps,
            self.rho,
            self.seed,
            100.0 * self.missing_rate
        );
        let Some(first) = self.methods.first() else {
            return s;
        };
        let _ = write!(s, "{:<16}", "method");
        for p in &first.params {
            let _ = write!(s, " | {:^26}", p);
        }
        let _ = writeln!(s, " | excluded");
        let _ = write!(s, "{:<16}", "");
        for _ in &first.params {
            let _ = write!(s, " | {:>8} {:>8} {:>8}", "bias%", "SE", "cover");
        }
        let _ = writeln!(s, " |");
        for m in &self.methods {
            let _ = write!(s, "{:<16}", m.label);
            for j in 0..m.params.len() {
                let _ = write!(s, " | {:>8.2} {:>8.3} {:>8.3}", m.bias_pct[j], m.mean_se[j], m.coverage[j]);
            }
            let _ = writeln!(s, " | {}", m.excluded);
        }
        s
    }
}
