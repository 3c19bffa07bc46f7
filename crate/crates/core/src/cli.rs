//! Run configuration and the `fit`, `simulate` and `report` commands.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::covariate::{fit_gamma, CovariateRecipe};
use crate::drgee::{drgee_fit, fit_outcome_model, AugmentationConfig, DrNuisance, DrOptions, OutcomeRecipe};
use crate::error::{Error, Result};
use crate::gee::{gee_fit, FitResult, GeeMode};
use crate::io::{read_long_csv_path, DataSchema};
use crate::migee::{migee_fit, ImputationConfig};
use crate::missingness::{fit_psi, MissingnessRecipe, RMode, WeightScheme, DEFAULT_POSITIVITY_FLOOR};
use crate::ordinal::{OrdinalSpec, SubjectRecord, XCoding};
use crate::simgen::{nan_f64, run_replications, summarize, RepOutcome, ScenarioConfig, SimSummary};
use crate::solver::SolverConfig;
use crate::wgee::{wgee_fit, WgeeOptions};

/// Process exit status for an error: 2 for bad input, 3 for estimation failures.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_)
        | Error::Parse { .. }
        | Error::Io(_)
        | Error::Csv(_)
        | Error::Json(_)
        | Error::InvalidData(_)
        | Error::InvalidParameter(_)
        | Error::DimensionMismatch(_)
        | Error::MissingCovariate { .. }
        | Error::EmptyDataset => 2,
        _ => 3,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitMethod {
    /// GEE on a fully observed dataset.
    Gee,
    Available,
    Wgee,
    Migee,
    Drgee,
}

impl FitMethod {
    pub fn name(self) -> &'static str {
        match self {
            FitMethod::Gee => "gee",
            FitMethod::Available => "available",
            FitMethod::Wgee => "wgee",
            FitMethod::Migee => "migee",
            FitMethod::Drgee => "drgee",
        }
    }
}

fn default_missingness_terms() -> Vec<String> {
    ["time_intercepts", "lag_o_star", "lag_x_star", "z"].map(String::from).to_vec()
}

fn default_covariate_terms() -> Vec<String> {
    ["lag_x", "z"].map(String::from).to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub x_coding: XCoding,
    pub missingness: Vec<String>,
    pub covariate: Vec<String>,
    pub outcome: OutcomeRecipe,
    pub r_mode: RMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            x_coding: XCoding::Linear,
            missingness: default_missingness_terms(),
            covariate: default_covariate_terms(),
            outcome: OutcomeRecipe::default(),
            r_mode: RMode::Binary,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WeightConfig {
    pub scheme: WeightScheme,
    pub positivity_floor: f64,
}

impl Default for WeightConfig {
    fn default() -> Self {
        Self {
            scheme: WeightScheme::Sequential,
            positivity_floor: DEFAULT_POSITIVITY_FLOOR,
        }
    }
}

/// Settings of the `fit` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    pub data: DataSchema,
    #[serde(default)]
    pub model: ModelConfig,
    pub methods: Vec<FitMethod>,
    #[serde(default)]
    pub weights: WeightConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub imputation: ImputationConfig,
    #[serde(default)]
    pub augmentation: AugmentationConfig,
    /// Overrides the imputation and Monte Carlo seeds when present.
    #[serde(default)]
    pub seed: Option<u64>,
}

impl FitConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut cfg: FitConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(seed) = cfg.seed {
            cfg.imputation.seed = seed;
            cfg.augmentation.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.categories < 2 {
            return Err(Error::Config("data.categories must be at least 2".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("no methods selected".into()));
        }
        let mut names = vec![&self.data.id, &self.data.occasion, &self.data.response, &self.data.x];
        names.extend(&self.data.z);
        for (i, a) in names.iter().enumerate() {
            if names[..i].contains(a) {
                return Err(Error::Config(format!("column '{a}' is named twice in [data]")));
            }
        }
        if let XCoding::Indicators { levels } = &self.model.x_coding {
            if levels.len() < 2 {
                return Err(Error::Config("x_coding indicators need at least two levels".into()));
            }
        }
        if !(self.weights.positivity_floor > 0.0 && self.weights.positivity_floor < 1.0) {
            return Err(Error::Config("weights.positivity_floor must lie in (0, 1)".into()));
        }
        MissingnessRecipe::from_terms(&self.model.missingness)?;
        CovariateRecipe::from_terms(&self.model.covariate)?;
        self.solver.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.imputation.validate().map_err(|e| Error::Config(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamRow {
    pub name: String,
    #[serde(deserialize_with = "nan_f64")]
    pub estimate: f64,
    #[serde(deserialize_with = "nan_f64")]
    pub se: f64,
    #[serde(deserialize_with = "nan_f64")]
    pub z: f64,
    #[serde(deserialize_with = "nan_f64")]
    pub p_value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodStatus {
    Ok,
    Failed,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub method: String,
    pub status: MethodStatus,
    pub message: Option<String>,
    pub converged: bool,
    pub iterations: usize,
    pub params: Vec<ParamRow>,
    pub diagnostics: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub n_subjects: usize,
    pub occasions: usize,
    pub missing_responses: usize,
    pub missing_covariates: usize,
    pub methods: Vec<MethodReport>,
}

/// Two-sided normal-reference p-value of `estimate / se`.
pub fn wald_p(estimate: f64, se: f64) -> f64 {
    let z = (estimate / se).abs();
    if z.is_nan() {
        return 1.0;
    }
    2.0 * Normal::standard().sf(z)
}

fn param_rows(names: &[String], fit: &FitResult) -> Vec<ParamRow> {
    names
        .iter()
        .zip(fit.estimates())
        .zip(fit.std_errors())
        .map(|((n, e), s)| ParamRow {
            name: n.clone(),
            estimate: e,
            se: s,
            z: e / s,
            p_value: wald_p(e, s),
        })
        .collect()
}

fn fit_method(cfg: &FitConfig, spec: &OrdinalSpec, data: &[SubjectRecord], method: FitMethod) -> Result<FitResult> {
    let solver = &cfg.solver;
    let mrecipe = || MissingnessRecipe::from_terms(&cfg.model.missingness);
    match method {
        FitMethod::Gee => gee_fit(data, spec, solver, GeeMode::Complete),
        FitMethod::Available => gee_fit(data, spec, solver, GeeMode::Available),
        FitMethod::Wgee => {
            let model = fit_psi(data, spec, &mrecipe()?, cfg.model.r_mode, solver)?;
            let opts = WgeeOptions {
                scheme: cfg.weights.scheme,
                positivity_floor: cfg.weights.positivity_floor,
                correct_for_psi: true,
            };
            let mut fit = wgee_fit(data, spec, &model, &opts, solver)?;
            fit.diagnostics.push(format!("missingness model: {} parameters", model.n_params()));
            Ok(fit)
        }
        FitMethod::Migee => migee_fit(data, spec, &cfg.imputation, solver),
        FitMethod::Drgee => {
            let crecipe = CovariateRecipe::from_terms(&cfg.model.covariate)?;
            let nuis = DrNuisance {
                missingness: fit_psi(data, spec, &mrecipe()?, cfg.model.r_mode, solver)?,
                covariate: fit_gamma(data, &crecipe, spec.categories, None, solver)?,
                outcome: fit_outcome_model(data, spec, &cfg.model.outcome, solver)?,
            };
            let opts = DrOptions {
                scheme: cfg.weights.scheme,
                positivity_floor: cfg.weights.positivity_floor,
                augmentation: cfg.augmentation,
                correct_for_nuisance: true,
            };
            let mut fit = drgee_fit(data, spec, &nuis, &opts, solver)?;
            fit.diagnostics.push(format!("missingness model: {} parameters", nuis.missingness.n_params()));
            fit.diagnostics.push(format!(
                "covariate model: support {:?}, {} parameters",
                nuis.covariate.support,
                nuis.covariate.n_params()
            ));
            fit.diagnostics.push(format!("outcome transition model: {} parameters", nuis.outcome.n_params()));
            Ok(fit)
        }
    }
}

/// Fits every selected method; a failing method is reported and the rest go on.
pub fn run_fit(cfg: &FitConfig, data: &[SubjectRecord]) -> Result<FitReport> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let occasions = data.iter().map(SubjectRecord::n_occasions).max().unwrap_or(0);
    let spec = OrdinalSpec::new(cfg.data.categories, occasions, cfg.data.z.len())?.with_x_coding(cfg.model.x_coding.clone());
    let names = spec.param_names(&cfg.data.z);
    let missing_responses = data.iter().flat_map(|s| &s.outcomes).filter(|o| o.is_none()).count();
    let missing_covariates = data.iter().flat_map(|s| &s.x).filter(|x| x.is_none()).count();
    let methods = cfg
        .methods
        .iter()
        .map(|&m| {
            let blank = |status, message: String| MethodReport {
                method: m.name().into(),
                status,
                message: Some(message),
                converged: false,
                iterations: 0,
                params: Vec::new(),
                diagnostics: Vec::new(),
            };
            if m == FitMethod::Gee && (missing_responses + missing_covariates) > 0 {
                return blank(
                    MethodStatus::Skipped,
                    "data contain missing values; complete-data GEE needs a fully observed dataset".into(),
                );
            }
            match fit_method(cfg, &spec, data, m) {
                Ok(fit) => MethodReport {
                    method: m.name().into(),
                    status: MethodStatus::Ok,
                    message: None,
                    converged: fit.converged,
                    iterations: fit.iterations,
                    params: param_rows(&names, &fit),
                    diagnostics: fit.diagnostics,
                },
                Err(e) => blank(MethodStatus::Failed, e.to_string()),
            }
        })
        .collect();
    Ok(FitReport {
        n_subjects: data.len(),
        occasions,
        missing_responses,
        missing_covariates,
        methods,
    })
}

impl FitReport {
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["method", "status", "parameter", "estimate", "se", "z", "p_value", "converged"])?;
        for m in &self.methods {
            let status = serde_json::to_value(m.status)?.as_str().unwrap_or_default().to_string();
            if m.params.is_empty() {
                wr.write_record([m.method.as_str(), &status, "", "", "", "", "", "false"])?;
            }
            for p in &m.params {
                wr.write_record([
                    m.method.clone(),
                    status.clone(),
                    p.name.clone(),
                    format!("{:.6}", p.estimate),
                    format!("{:.6}", p.se),
                    format!("{:.4}", p.z),
                    format!("{:.4}", p.p_value),
                    m.converged.to_string(),
                ])?;
            }
        }
        wr.flush()?;
        Ok(())
    }

    /// Parameters down, methods across: estimate, SE and p-value per method.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{} subjects, {} occasions, {} missing responses, {} missing covariates",
            self.n_subjects, self.occasions, self.missing_responses, self.missing_covariates
        );
        let ok: Vec<&MethodReport> = self.methods.iter().filter(|m| m.status == MethodStatus::Ok).collect();
        if let Some(first) = ok.first() {
            let _ = write!(s, "{:<12}", "parameter");
            for m in &ok {
                let _ = write!(s, " | {:^26}", m.method);
            }
            let _ = writeln!(s);
            let _ = write!(s, "{:<12}", "");
            for _ in &ok {
                let _ = write!(s, " | {:>8} {:>8} {:>8}", "estimate", "SE", "p");
            }
            let _ = writeln!(s);
            for (j, p) in first.params.iter().enumerate() {
                let _ = write!(s, "{:<12}", p.name);
                for m in &ok {
                    let r = &m.params[j];
                    let _ = write!(s, " | {:>8.3} {:>8.3} {:>8.3}", r.estimate, r.se, r.p_value);
                }
                let _ = writeln!(s);
            }
        }
        for m in &self.methods {
            let status = match m.status {
                MethodStatus::Ok => format!("converged in {} iterations", m.iterations),
                MethodStatus::Failed => "FAILED".into(),
                MethodStatus::Skipped => "skipped".into(),
            };
            let _ = writeln!(s, "{}: {}", m.method, status);
            if let Some(msg) = &m.message {
                let _ = writeln!(s, "  {msg}");
            }
            for d in &m.diagnostics {
                let _ = writeln!(s, "  {d}");
            }
        }
        s
    }

    pub fn any_failed(&self) -> bool {
        self.methods.iter().any(|m| m.status == MethodStatus::Failed)
    }
}

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))
}

fn write_outputs(out: &Path, files: &[(&str, Vec<u8>)]) -> Result<()> {
    fs::create_dir_all(out)?;
    for (name, bytes) in files {
        fs::write(out.join(name), bytes)?;
    }
    Ok(())
}

/// Reads the config and data, fits, and writes `report.{json,csv,txt}` to `out`.
pub fn fit_command(config: &Path, data: &Path, out: &Path) -> Result<FitReport> {
    let cfg = FitConfig::from_toml(&read_to_string(config)?)?;
    let records = read_long_csv_path(data, &cfg.data)?;
    let report = run_fit(&cfg, &records)?;
    let mut csv = Vec::new();
    report.write_csv(&mut csv)?;
    write_outputs(
        out,
        &[
            ("report.json", serde_json::to_vec_pretty(&report)?),
            ("report.csv", csv),
            ("report.txt", report.to_table().into_bytes()),
        ],
    )?;
    Ok(report)
}

/// Settings of the `simulate` command: one scenario run at each sample size.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    /// Sample sizes; `simulation.n` alone when empty.
    pub sizes: Vec<usize>,
    pub simulation: ScenarioConfig,
}

impl SimulateConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: SimulateConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.simulation.validate().map_err(|e| Error::Config(e.to_string()))?;
        if cfg.sizes.contains(&0) {
            return Err(Error::Config("sample sizes must be at least 1".into()));
        }
        Ok(cfg)
    }

    pub fn scenarios(&self) -> Vec<ScenarioConfig> {
        if self.sizes.is_empty() {
            return vec![self.simulation.clone()];
        }
        self.sizes
            .iter()
            .map(|&n| ScenarioConfig {
                n,
                ..self.simulation.clone()
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub summaries: Vec<SimSummary>,
}

impl SimulationReport {
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["n", "method", "parameter", "truth", "bias_pct", "mean_se", "mc_sd", "coverage", "fitted", "excluded", "missing_rate"])?;
        for s in &self.summaries {
            for m in &s.methods {
                for (j, name) in m.params.iter().enumerate() {
                    wr.write_record([
                        s.n.to_string(),
                        m.label.clone(),
                        name.clone(),
                        format!("{}", s.truth[j]),
                        format!("{:.4}", m.bias_pct[j]),
                        format!("{:.5}", m.mean_se[j]),
                        format!("{:.5}", m.mc_sd[j]),
                        format!("{:.4}", m.coverage[j]),
                        m.fitted.to_string(),
                        m.excluded.to_string(),
                        format!("{:.5}", s.missing_rate),
                    ])?;
                }
            }
        }
        wr.flush()?;
        Ok(())
    }

    pub fn to_table(&self) -> String {
        self.summaries.iter().map(SimSummary::to_table).collect::<Vec<_>>().join("\n")
    }
}

/// Runs the simulation on `jobs` threads (all cores when `None`) and writes
/// `summary.{json,csv,txt}` plus per-replication estimates to `out`.
pub fn simulate_command(config: &Path, out: &Path, seed: Option<u64>, jobs: Option<usize>) -> Result<SimulationReport> {
    let mut cfg = SimulateConfig::from_toml(&read_to_string(config)?)?;
    if let Some(s) = seed {
        cfg.simulation.seed = s;
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.unwrap_or(0))
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker threads: {e}")))?;
    let mut summaries = Vec::new();
    let mut reps_csv = csv::Writer::from_writer(Vec::new());
    reps_csv.write_record(["n", "replication", "method", "parameter", "estimate", "se", "relative_bias_pct", "error"])?;
    for sc in cfg.scenarios() {
        let reps = pool.install(|| run_replications(&sc))?;
        let summary = summarize(&sc, &reps)?;
        let variants = sc.variants();
        for (r, rep) in reps.iter().enumerate() {
            for ((label, _, _), outcome) in variants.iter().zip(&rep.outcomes) {
                match outcome {
                    RepOutcome::Fitted { estimates, std_errors } => {
                        for (j, name) in summary.methods[0].params.iter().enumerate() {
                            let truth = sc.truth.beta[j];
                            reps_csv.write_record([
                                sc.n.to_string(),
                                r.to_string(),
                                label.clone(),
                                name.clone(),
                                format!("{:.8}", estimates[j]),
                                format!("{:.8}", std_errors[j]),
                                format!("{:.6}", 100.0 * (estimates[j] - truth) / truth),
                                String::new(),
                            ])?;
                        }
                    }
                    RepOutcome::Failed(e) => {
                        reps_csv.write_record([sc.n.to_string(), r.to_string(), label.clone(), String::new(), String::new(), String::new(), String::new(), e.clone()])?;
                    }
                }
            }
        }
        summaries.push(summary);
    }
    let report = SimulationReport { summaries };
    let mut csv = Vec::new();
    report.write_csv(&mut csv)?;
    let reps_bytes = reps_csv.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    write_outputs(
        out,
        &[
            ("summary.json", serde_json::to_vec_pretty(&report)?),
            ("summary.csv", csv),
            ("summary.txt", report.to_table().into_bytes()),
            ("replications.csv", reps_bytes),
        ],
    )?;
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Csv,
    Json,
    Txt,
}

/// Renders the results found in `dir` (a `simulate` or `fit` output directory).
pub fn report_command(dir: &Path, format: ReportFormat) -> Result<String> {
    let sim = dir.join("summary.json");
    let fit = dir.join("report.json");
    if sim.exists() {
        let r: SimulationReport = serde_json::from_slice(&fs::read(&sim)?)?;
        return Ok(match format {
            ReportFormat::Json => String::from_utf8(serde_json::to_vec_pretty(&r)?).expect("utf-8"),
            ReportFormat::Txt => r.to_table(),
            ReportFormat::Csv => {
                let mut b = Vec::new();
                r.write_csv(&mut b)?;
                String::from_utf8(b).expect("utf-8")
            }
        });
    }
    if fit.exists() {
        let r: FitReport = serde_json::from_slice(&fs::read(&fit)?)?;
        return Ok(match format {
            ReportFormat::Json => String::from_utf8(serde_json::to_vec_pretty(&r)?).expect("utf-8"),
            ReportFormat::Txt => r.to_table(),
            ReportFormat::Csv => {
                let mut b = Vec::new();
                r.write_csv(&mut b)?;
                String::from_utf8(b).expect("utf-8")
            }
        });
    }
    Err(Error::Config(format!("{} holds neither summary.json nor report.json", dir.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wald_p_values() {
        assert!((wald_p(-1.008, 0.390) - 0.009748767897412847).abs() < 1e-9);
        assert_eq!(format!("{:.3}", wald_p(-1.008, 0.390)), "0.010");
        assert!((wald_p(0.0, 1.0) - 1.0).abs() < 1e-15);
        assert!((wald_p(1.959963984540054, 1.0) - 0.05).abs() < 1e-9);
    }

    #[test]
    fn config_errors_are_actionable() {
        let base = "methods = [\"gee\"]\n[data]\ncategories = 3\n";
        assert!(FitConfig::from_toml(base).is_ok());
        let e = FitConfig::from_toml("methods = [\"gee\"]\n[data]\ncategories = 3\ntypo = 1\n").unwrap_err();
        assert!(matches!(e, Error::Config(ref m) if m.contains("typo")), "{e}");
        let e = FitConfig::from_toml("methods = []\n[data]\ncategories = 3\n").unwrap_err();
        assert!(matches!(e, Error::Config(_)));
        let e = FitConfig::from_toml(&format!("{base}[model]\nmissingness = [\"lag_q\"]\n")).unwrap_err();
        assert!(matches!(e, Error::Config(ref m) if m.contains("lag_q")));
        assert_eq!(exit_code(&e), 2);
        assert_eq!(exit_code(&Error::Singular("x".into())), 3);
    }

    #[test]
    fn seed_override_reaches_nuisance_settings() {
        let c = FitConfig::from_toml("seed = 9\nmethods = [\"migee\"]\n[data]\ncategories = 3\n").unwrap();
        assert_eq!((c.imputation.seed, c.augmentation.seed), (9, 9));
    }
}
