//! End-to-end behaviour on incomplete data: fixture ingestion, the `fit`,
//! `simulate` and `report` commands, and large-sample properties of the
//! nuisance machinery.

use std::path::{Path, PathBuf};
use std::process::Command;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ordgee::cli::{run_fit, FitConfig, FitMethod, MethodStatus};
use ordgee::covariate::{fit_gamma, CovariateRecipe};
use ordgee::drgee::{augmentation_term, fit_outcome_model, psi_cross_information, DrNuisance, DrOptions, OutcomeRecipe};
use ordgee::io::read_long_csv_path;
use ordgee::migee::{fcs_impute, ImputationConfig};
use ordgee::missingness::{encode_r, fit_psi, MissingnessRecipe, RMode};
use ordgee::ordinal::SubjectRecord;
use ordgee::simgen::{generate, run_simulation, Method, ScenarioConfig, Truth};
use ordgee::solver::SolverConfig;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

fn fixture_config() -> FitConfig {
    FitConfig::from_toml(&std::fs::read_to_string(fixture("analgesia_like.toml")).unwrap()).unwrap()
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ordgee"))
}

#[test]
fn fixture_is_read_with_its_missingness_pattern() {
    let cfg = fixture_config();
    let d = read_long_csv_path(&fixture("analgesia_like.csv"), &cfg.data).unwrap();
    assert_eq!(d.len(), 49);
    assert!(d.iter().all(|s| s.n_occasions() == 3 && s.z[0].len() == 2));
    let missing_at = |t: usize| d.iter().filter(|s| s.outcomes[t].is_none()).count();
    assert_eq!((missing_at(0), missing_at(1), missing_at(2)), (0, 9, 18));
    for s in &d {
        let r = encode_r(s);
        assert_eq!(r[0], 3);
        assert!(r.iter().all(|c| *c == 0 || *c == 3));
    }
    assert!(d.iter().flat_map(|s| s.x.iter().flatten()).all(|x| [1.0, 2.0, 3.0].contains(x)));
}

#[test]
fn fixture_fit_runs_every_incomplete_data_method() {
    let cfg = fixture_config();
    let d = read_long_csv_path(&fixture("analgesia_like.csv"), &cfg.data).unwrap();
    let report = run_fit(&cfg, &d).unwrap();
    assert_eq!(report.n_subjects, 49);
    assert_eq!(report.missing_responses, 27);
    assert_eq!(report.methods.len(), 5);
    for m in &report.methods {
        if m.method == "gee" {
            assert_eq!(m.status, MethodStatus::Skipped);
            continue;
        }
        assert_eq!(m.status, MethodStatus::Ok, "{}: {:?}", m.method, m.message);
        // 2 intercepts, 2 indicator columns for oxyt, group, hours.
        assert_eq!(m.params.len(), 6);
        for p in &m.params {
            assert!(p.estimate.is_finite() && p.se > 0.0 && (0.0..=1.0).contains(&p.p_value), "{}: {p:?}", m.method);
        }
    }
    let wgee = report.methods.iter().find(|m| m.method == "wgee").unwrap();
    assert!(!wgee.diagnostics.is_empty());
}

#[test]
fn gee_alone_on_complete_records() {
    let mut cfg = fixture_config();
    cfg.methods = vec![FitMethod::Gee];
    let d: Vec<SubjectRecord> = read_long_csv_path(&fixture("analgesia_like.csv"), &cfg.data)
        .unwrap()
        .into_iter()
        .filter(|s| !s.has_missing())
        .collect();
    assert_eq!(d.len(), 49 - 27);
    let report = run_fit(&cfg, &d).unwrap();
    assert_eq!(report.methods.len(), 1);
    assert_eq!(report.methods[0].status, MethodStatus::Ok);
}

#[test]
fn fit_command_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("fit");
    let status = bin()
        .args(["fit", "--config"])
        .arg(fixture("analgesia_like.toml"))
        .arg("--data")
        .arg(fixture("analgesia_like.csv"))
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert_eq!(status.status.code(), Some(0), "{}", String::from_utf8_lossy(&status.stderr));
    for f in ["report.json", "report.csv", "report.txt"] {
        assert!(out.join(f).exists(), "{f}");
    }
    for format in ["csv", "json", "txt"] {
        let r = bin().args(["report", "--format", format, "--in"]).arg(&out).output().unwrap();
        assert_eq!(r.status.code(), Some(0));
        assert!(!r.stdout.is_empty());
    }

    // Unknown key in the config.
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "methods = [\"gee\"]\nbogus = 1\n[data]\ncategories = 3\n").unwrap();
    let r = bin()
        .args(["fit", "--config"])
        .arg(&bad)
        .arg("--data")
        .arg(fixture("analgesia_like.csv"))
        .arg("--out")
        .arg(dir.path().join("x"))
        .output()
        .unwrap();
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).starts_with("error:"));

    // Malformed data.
    let csv = dir.path().join("bad.csv");
    std::fs::write(&csv, "id,occasion,response,oxyt,group,hours\nA,1,2,1,1,zero\n").unwrap();
    let r = bin()
        .args(["fit", "--config"])
        .arg(fixture("analgesia_like.toml"))
        .arg("--data")
        .arg(&csv)
        .arg("--out")
        .arg(dir.path().join("y"))
        .output()
        .unwrap();
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains("row 2"));

    // Category 3 never observed: every method fails to estimate.
    let csv = dir.path().join("degenerate.csv");
    let mut text = String::from("id,occasion,response,oxyt,group,hours\n");
    for i in 0..30 {
        for t in 1..=3 {
            text.push_str(&format!("S{i},{t},{},{},{},{t}\n", 1 + (i + t) % 2, 1 + (i * t) % 3, i % 2));
        }
    }
    std::fs::write(&csv, text).unwrap();
    let cfg = dir.path().join("gee.toml");
    std::fs::write(
        &cfg,
        "methods = [\"gee\"]\n[data]\nx = \"oxyt\"\nz = [\"group\", \"hours\"]\ncategories = 3\n",
    )
    .unwrap();
    let r = bin()
        .args(["fit", "--config"])
        .arg(&cfg)
        .arg("--data")
        .arg(&csv)
        .arg("--out")
        .arg(dir.path().join("z"))
        .output()
        .unwrap();
    assert_eq!(r.status.code(), Some(3));
}

#[test]
fn report_on_empty_directory_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let r = bin().args(["report", "--in"]).arg(dir.path()).output().unwrap();
    assert_eq!(r.status.code(), Some(2));
}

#[test]
fn simulate_writes_summaries_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str, jobs: &str| {
        let out = dir.path().join(name);
        let r = bin()
            .args(["simulate", "--jobs", jobs, "--config"])
            .arg(fixture("simulate_smoke.toml"))
            .arg("--out")
            .arg(&out)
            .output()
            .unwrap();
        assert_eq!(r.status.code(), Some(0), "{}", String::from_utf8_lossy(&r.stderr));
        out
    };
    let a = run("a", "1");
    let b = run("b", "3");
    for f in ["summary.json", "summary.csv", "summary.txt", "replications.csv"] {
        let fa = std::fs::read(a.join(f)).unwrap();
        assert!(!fa.is_empty(), "{f}");
        assert_eq!(fa, std::fs::read(b.join(f)).unwrap(), "{f} differs between thread counts");
    }
    let r = bin().args(["report", "--format", "txt", "--in"]).arg(&a).output().unwrap();
    assert_eq!(r.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&r.stdout).contains("drgee(x+,r+)"));

    let c = dir.path().join("c");
    let r = bin()
        .args(["simulate", "--jobs", "2", "--seed", "99", "--config"])
        .arg(fixture("simulate_smoke.toml"))
        .arg("--out")
        .arg(&c)
        .output()
        .unwrap();
    assert_eq!(r.status.code(), Some(0));
    assert_ne!(std::fs::read(a.join("summary.json")).unwrap(), std::fs::read(c.join("summary.json")).unwrap());
}

#[test]
fn grid_fills_every_cell() {
    let text = std::fs::read_to_string(fixture("simulate_grid.toml")).unwrap();
    let mut cfg = ordgee::cli::SimulateConfig::from_toml(&text).unwrap();
    cfg.simulation.reps = 1;
    cfg.simulation.imputation.m = 2;
    cfg.simulation.imputation.cycles = 3;
    let scenarios = cfg.scenarios();
    assert_eq!(scenarios.iter().map(|s| s.n).collect::<Vec<_>>(), vec![50, 150, 300, 600]);
    for sc in &scenarios[1..] {
        let s = run_simulation(sc).unwrap();
        // complete, available, 2 wgee, 2 migee, 4 drgee.
        assert_eq!(s.methods.len(), 10);
        for m in &s.methods {
            assert_eq!(m.params.len(), 4);
            assert_eq!(m.fitted + m.excluded, 1);
            if m.fitted == 1 {
                assert!(m.bias_pct.iter().chain(&m.mean_se).all(|v| v.is_finite()), "{}", m.label);
            }
        }
        assert!(s.missing_rate > 0.0 && s.missing_rate < 0.5);
    }
}

#[test]
fn complete_data_estimator_is_unbiased_at_n300() {
    let cfg = ScenarioConfig {
        n: 300,
        reps: 200,
        methods: vec![Method::Complete],
        ..Default::default()
    };
    let s = run_simulation(&cfg).unwrap();
    let m = s.method("complete").unwrap();
    assert_eq!(m.fitted, 200);
    assert!(m.bias_pct[2].abs() <= 3.0, "beta_x bias {:.2}%", m.bias_pct[2]);
}

// Working covariate and outcome models omit the lags so the expected
// cross-derivative is away from zero; both estimates are averaged over ten
// datasets.
#[test]
fn psi_cross_information_matches_score_products() {
    let truth = Truth::default();
    let spec = truth.spec().unwrap();
    let cfg = SolverConfig::default();
    let opts = DrOptions::default();
    let mut numeric = nalgebra::DMatrix::zeros(0, 0);
    let mut products = nalgebra::DMatrix::zeros(0, 0);
    for rep in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(31 + rep);
        let d = generate(600, &truth, 0.9, &mut rng).unwrap().observed;
        let nuis = DrNuisance {
            missingness: fit_psi(&d, &spec, &MissingnessRecipe::default(), RMode::Binary, &cfg).unwrap(),
            covariate: fit_gamma(&d, &CovariateRecipe { lag_x: false, ..Default::default() }, 3, None, &cfg).unwrap(),
            outcome: fit_outcome_model(&d, &spec, &OutcomeRecipe { lag_o: false, lag_x: false }, &cfg).unwrap(),
        };
        let fit = ordgee::drgee::drgee_fit(&d, &spec, &nuis, &opts, &cfg).unwrap();
        let (a, b) = psi_cross_information(&spec, &fit.beta_hat, &d, &nuis, &opts).unwrap();
        if rep == 0 {
            numeric = a;
            products = b;
        } else {
            numeric += a;
            products += b;
        }
    }
    let rel = (&numeric - &products).norm() / numeric.norm();
    assert!(rel < 0.15, "relative Frobenius gap {rel:.3}");
}

#[test]
fn imputed_covariate_mean_is_unbiased_under_mcar() {
    let truth = Truth::default();
    let spec = truth.spec().unwrap();
    let cfg = ImputationConfig {
        m: 5,
        cycles: 5,
        ..Default::default()
    };
    let mut bias = Vec::new();
    for rep in 0..40u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + rep);
        let full = generate(300, &truth, 0.9, &mut rng).unwrap().full;
        let mut obs = full.clone();
        let mut deleted = Vec::new();
        for (i, s) in obs.iter_mut().enumerate() {
            for t in 0..3 {
                if rng.random::<f64>() < 0.2 {
                    s.x[t] = None;
                    deleted.push((i, t));
                }
            }
        }
        let truth_mean = deleted.iter().map(|&(i, t)| full[i].x[t].unwrap()).sum::<f64>() / deleted.len() as f64;
        let sets = fcs_impute(&obs, &spec, &ImputationConfig { seed: rep, ..cfg.clone() }, &SolverConfig::default()).unwrap();
        let imputed = sets
            .iter()
            .map(|d| deleted.iter().map(|&(i, t)| d[i].x[t].unwrap()).sum::<f64>() / deleted.len() as f64)
            .sum::<f64>()
            / sets.len() as f64;
        bias.push(imputed - truth_mean);
    }
    let mean_bias = bias.iter().sum::<f64>() / bias.len() as f64;
    assert!(mean_bias.abs() < 0.03, "mean bias {mean_bias:.4}");
}

#[test]
fn monte_carlo_augmentation_agrees_with_enumeration() {
    let truth = Truth::default();
    let spec = truth.spec().unwrap();
    let cfg = SolverConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let d = generate(300, &truth, 0.9, &mut rng).unwrap().observed;
    let nuis = DrNuisance {
        missingness: fit_psi(&d, &spec, &MissingnessRecipe::default(), RMode::Binary, &cfg).unwrap(),
        covariate: fit_gamma(&d, &CovariateRecipe::default(), 3, None, &cfg).unwrap(),
        outcome: fit_outcome_model(&d, &spec, &OutcomeRecipe::default(), &cfg).unwrap(),
    };
    let beta = truth.beta_params().unwrap();
    let exact_opts = DrOptions::default();
    let (i, subj) = d.iter().enumerate().find(|(_, s)| s.has_missing()).unwrap();
    let exact = augmentation_term(&spec, &beta, &nuis, subj, i, &exact_opts).unwrap();
    let seeds = 40;
    let draws: Vec<_> = (0..seeds)
        .map(|seed| {
            let mut o = exact_opts;
            o.augmentation.enumeration_cap = 0;
            o.augmentation.mc_draws = 200;
            o.augmentation.seed = seed;
            augmentation_term(&spec, &beta, &nuis, subj, i, &o).unwrap()
        })
        .collect();
    for k in 0..exact.len() {
        let mean = draws.iter().map(|v| v[k]).sum::<f64>() / seeds as f64;
        let sd = (draws.iter().map(|v| (v[k] - mean).powi(2)).sum::<f64>() / (seeds - 1) as f64).sqrt();
        assert!(sd > 0.0);
        let se = sd / (seeds as f64).sqrt();
        assert!((mean - exact[k]).abs() <= 3.0 * se, "component {k}: exact {} vs MC {mean} (se {se})", exact[k]);
        // A single run is also within 3 of its own standard errors.
        assert!((draws[0][k] - exact[k]).abs() <= 3.0 * sd, "component {k}");
    }
}
