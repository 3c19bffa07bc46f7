//! Inverse-probability-weighted GEE.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::gee::{self, FitResult, NuisanceCorrection, Term, Terms};
use crate::missingness::{encode_r, observation_probs, MissingnessModel, WeightScheme};
use crate::ordinal::{encode_indicators, BetaParams, MeanBlock, OrdinalSpec, SubjectRecord, PROB_FLOOR};
use crate::solver::{numeric_jacobian, SolverConfig};

/// Block-diagonal `F` of marginal variances.
pub fn f_matrix(blocks: &[MeanBlock]) -> DMatrix<f64> {
    let v: Vec<f64> = blocks.iter().flat_map(|b| b.f.iter().copied()).collect();
    DMatrix::from_diagonal(&DVector::from_vec(v))
}

/// Inverse working correlation under independence across occasions with the
/// multinomial correlation inside each occasion: `F^{1/2} V^{-1} F^{1/2}` per block.
pub fn independence_cinv(blocks: &[MeanBlock]) -> DMatrix<f64> {
    let n: usize = blocks.iter().map(|b| b.mu.len()).sum();
    let mut c = DMatrix::zeros(n, n);
    let mut off = 0;
    for b in blocks {
        let k = b.mu.len();
        let sf = b.f.map(|v| v.max(PROB_FLOOR).sqrt());
        let vinv = b.v_inverse();
        for i in 0..k {
            for j in 0..k {
                c[(off + i, off + j)] = sf[i] * vinv[(i, j)] * sf[j];
            }
        }
        off += k;
    }
    c
}

fn check_square(name: &str, m: &DMatrix<f64>, n: usize) -> Result<()> {
    if m.nrows() != n || m.ncols() != n {
        return Err(Error::DimensionMismatch(format!(
            "{name} is {}x{}, expected {n}x{n}",
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(())
}

/// `F^{-1/2} (C^{-1} o W) F^{-1/2}` for a weight pattern `W`.
pub(crate) fn hadamard_kernel(f: &DMatrix<f64>, cinv: &DMatrix<f64>, w: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = f.nrows();
    check_square("F", f, n)?;
    check_square("C^{-1}", cinv, n)?;
    check_square("weight matrix", w, n)?;
    let s: Vec<f64> = (0..n).map(|i| 1.0 / f[(i, i)].max(PROB_FLOOR).sqrt()).collect();
    let mut m = cinv.component_mul(w);
    for i in 0..n {
        for j in 0..n {
            m[(i, j)] *= s[i] * s[j];
        }
    }
    Ok(m)
}

/// `M_i = F^{-1/2} (C^{-1} o Delta) F^{-1/2}`.
pub fn m_matrix(f: &DMatrix<f64>, cinv: &DMatrix<f64>, delta: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    hadamard_kernel(f, cinv, delta)
}

/// Observed occasions weighted by `1 / pi_it`.
pub(crate) fn weighted_terms(
    spec: &OrdinalSpec,
    data: &[SubjectRecord],
    model: &MissingnessModel,
    scheme: WeightScheme,
    floor: f64,
) -> Result<Terms> {
    data.iter()
        .map(|s| {
            let pi = observation_probs(model, s, scheme, floor)?;
            let r = encode_r(s);
            let mut out = Vec::new();
            for t in 0..s.n_occasions() {
                if r[t] == 3 {
                    out.push(Term {
                        t,
                        x: s.x[t].expect("observed"),
                        w: 1.0 / pi[t],
                        ybar: encode_indicators(s.outcomes[t].expect("observed"), spec.categories)?,
                    });
                }
            }
            Ok(out)
        })
        .collect()
}

/// Correction of the sandwich for an estimated missingness model.
pub(crate) fn psi_correction<F>(
    model: &MissingnessModel,
    data: &[SubjectRecord],
    mut s1_total: F,
) -> Result<NuisanceCorrection>
where
    F: FnMut(&MissingnessModel) -> Result<DVector<f64>>,
{
    let q = model.n_params();
    let psi = model.params();
    let cross = if q == 0 {
        DMatrix::zeros(0, 0)
    } else {
        numeric_jacobian(|v| s1_total(&model.with_params(v.as_slice())), &psi)?
    };
    let (_, hessian) = model.score_hessian(data);
    Ok(NuisanceCorrection {
        cross,
        hessian,
        scores: model.subject_scores(data),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WgeeOptions {
    pub scheme: WeightScheme,
    pub positivity_floor: f64,
    /// Account for estimation of the missingness model in the covariance.
    pub correct_for_psi: bool,
}

impl Default for WgeeOptions {
    fn default() -> Self {
        Self {
            scheme: WeightScheme::Sequential,
            positivity_floor: crate::missingness::DEFAULT_POSITIVITY_FLOOR,
            correct_for_psi: true,
        }
    }
}

/// Weighted GEE at a fitted missingness model.
pub fn wgee_fit(
    data: &[SubjectRecord],
    spec: &OrdinalSpec,
    model: &MissingnessModel,
    opts: &WgeeOptions,
    cfg: &SolverConfig,
) -> Result<FitResult> {
    gee::validate_data(spec, data)?;
    let terms = weighted_terms(spec, data, model, opts.scheme, opts.positivity_floor)?;
    let (beta, sol) = gee::fit_terms(spec, data, &terms, cfg)?;
    let (_, info) = gee::total_score_info(spec, &beta, data, &terms, true)?;
    let s1 = gee::subject_scores(spec, &beta, data, &terms)?;
    let mut corrections = Vec::new();
    if opts.correct_for_psi && model.n_params() > 0 {
        corrections.push(psi_correction(model, data, |m| {
            let tr = weighted_terms(spec, data, m, opts.scheme, 0.0)?;
            Ok(gee::total_score_info(spec, &beta, data, &tr, false)?.0)
        })?);
    }
    let cov = gee::robust_cov(&info, &s1, &corrections)?;
    let mut diagnostics = model.notes.clone();
    let wmax = terms.iter().flatten().map(|t| t.w).fold(0.0, f64::max);
    diagnostics.push(format!("largest weight {wmax:.3}"));
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
