//! Canonical-link GLM families and weighted maximum-likelihood fitting.
//!
//! Information matrices are stored with a positive sign,
//! `J = (1/Σw) Σ w b''(βᵀx) x xᵀ`, so they can be Cholesky-factorised and
//! checked for positive semi-definiteness directly.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

/// Default clamp on the Poisson linear predictor inside `exp`.
pub const POISSON_ETA_CAP: f64 = 30.0;

/// Relative floor for the convergence test, in units of the gross score
/// magnitude `Σ w (|y| + |b'|) ‖x‖`. Below this the score is roundoff.
const ROUNDOFF_SCORE_RTOL: f64 = 1e-13;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GlmFamily {
    Linear,
    Logistic,
    Poisson,
}

impl GlmFamily {
    /// `(b(t), b'(t), b''(t))`, with the Poisson predictor clamped at
    /// [`POISSON_ETA_CAP`].
    pub fn cumulant_derivs(self, t: f64) -> Result<(f64, f64, f64)> {
        self.cumulant_derivs_capped(t, POISSON_ETA_CAP)
    }

    pub fn cumulant_derivs_capped(self, t: f64, cap: f64) -> Result<(f64, f64, f64)> {
        if !t.is_finite() {
            return Err(Error::Domain(format!("non-finite linear predictor {t}")));
        }
        Ok(match self {
            GlmFamily::Linear => (0.5 * t * t, t, 1.0),
            GlmFamily::Logistic => (softplus(t), sigmoid(t), logistic_variance(t)),
            GlmFamily::Poisson => {
                let e = t.clamp(-cap, cap).exp();
                (e, e, e)
            }
        })
    }

    /// Cumulant `b(t)`.
    #[inline]
    pub fn cumulant(self, t: f64) -> f64 {
        match self {
            GlmFamily::Linear => 0.5 * t * t,
            GlmFamily::Logistic => softplus(t),
            GlmFamily::Poisson => poisson_exp(t),
        }
    }

    /// Mean function `b'(t)`.
    #[inline]
    pub fn mean(self, t: f64) -> f64 {
        match self {
            GlmFamily::Linear => t,
            GlmFamily::Logistic => sigmoid(t),
            GlmFamily::Poisson => poisson_exp(t),
        }
    }

    /// Variance function `b''(t)`.
    #[inline]
    pub fn variance(self, t: f64) -> f64 {
        match self {
            GlmFamily::Linear => 1.0,
            GlmFamily::Logistic => logistic_variance(t),
            GlmFamily::Poisson => poisson_exp(t),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            GlmFamily::Linear => "linear",
            GlmFamily::Logistic => "logistic",
            GlmFamily::Poisson => "poisson",
        }
    }
}

impl fmt::Display for GlmFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GlmFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "linear" | "gaussian" => Ok(GlmFamily::Linear),
            "logistic" | "binomial" => Ok(GlmFamily::Logistic),
            "poisson" => Ok(GlmFamily::Poisson),
            other => Err(Error::Config(format!("unknown family '{other}'"))),
        }
    }
}

#[inline]
fn poisson_exp(t: f64) -> f64 {
    t.clamp(-POISSON_ETA_CAP, POISSON_ETA_CAP).exp()
}

#[inline]
fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

#[inline]
fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn logistic_variance(t: f64) -> f64 {
    let e = (-t.abs()).exp();
    (e / ((1.0 + e) * (1.0 + e))).max(f64::MIN_POSITIVE)
}

fn check_dims(x: &DMatrix<f64>, beta_len: usize, y: Option<&DVector<f64>>, w: &DVector<f64>) -> Result<()> {
    if x.ncols() != beta_len {
        return Err(Error::Dimension(format!(
            "X has {} columns but coefficient vector has length {}",
            x.ncols(),
            beta_len
        )));
    }
    if let Some(y) = y {
        if y.len() != x.nrows() {
            return Err(Error::Dimension(format!(
                "X has {} rows but response has length {}",
                x.nrows(),
                y.len()
            )));
        }
    }
    if w.len() != x.nrows() {
        return Err(Error::Dimension(format!(
            "X has {} rows but weights have length {}",
            x.nrows(),
            w.len()
        )));
    }
    if let Some(bad) = w.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
        return Err(Error::Weights(format!("weight {bad} is negative or non-finite")));
    }
    Ok(())
}

/// `Σ w_i (y_i − b'(βᵀx_i)) x_i`.
pub fn weighted_score(
    family: GlmFamily,
    beta: &DVector<f64>,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    w: &DVector<f64>,
) -> Result<DVector<f64>> {
    check_dims(x, beta.len(), Some(y), w)?;
    Ok(score_unchecked(family, beta, x, y, w))
}

fn score_unchecked(
    family: GlmFamily,
    beta: &DVector<f64>,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    w: &DVector<f64>,
) -> DVector<f64> {
    let eta = x * beta;
    let r = DVector::from_fn(y.len(), |i, _| w[i] * (y[i] - family.mean(eta[i])));
    x.tr_mul(&r)
}

/// Unnormalised `Σ w b''(βᵀx) x xᵀ`.
fn information_sum(family: GlmFamily, eta: &DVector<f64>, x: &DMatrix<f64>, w: &DVector<f64>) -> DMatrix<f64> {
    let mut xs = x.clone();
    for (i, mut row) in xs.row_iter_mut().enumerate() {
        row *= (w[i] * family.variance(eta[i])).sqrt();
    }
    linalg::symmetrize(&xs.tr_mul(&xs))
}

/// Weighted Fisher information `J = (1/Σw) Σ w b''(βᵀx) x xᵀ`.
pub fn fisher_info(
    family: GlmFamily,
    beta: &DVector<f64>,
    x: &DMatrix<f64>,
    w: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    check_dims(x, beta.len(), None, w)?;
    let total: f64 = w.sum();
    if total <= 0.0 {
        return Err(Error::Weights("all weights are zero".into()));
    }
    let eta = x * beta;
    Ok(information_sum(family, &eta, x, w) / total)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    /// Target Euclidean norm of the weighted score.
    pub tol: f64,
    pub max_iter: usize,
    pub max_halvings: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 100,
            max_halvings: 30,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub beta: DVector<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// `‖Σ w (y − b'(βᵀx)) x‖₂` at `beta`.
    pub score_norm: f64,
    /// Tolerance actually applied: the configured `tol`, raised to the
    /// roundoff floor of the score sum on badly scaled data.
    pub tol_used: f64,
    /// Normalised weighted information `J` at `beta`.
    pub info: DMatrix<f64>,
    pub diagnostic: Option<String>,
}

struct Evaluation {
    score: DVector<f64>,
    hessian: DMatrix<f64>,
    objective: f64,
    gross: f64,
}

fn evaluate(
    family: GlmFamily,
    beta: &DVector<f64>,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    w: &DVector<f64>,
) -> Evaluation {
    let eta = x * beta;
    let mut r = DVector::zeros(y.len());
    let mut objective = 0.0;
    let mut gross = 0.0;
    for i in 0..y.len() {
        if w[i] == 0.0 {
            continue;
        }
        let mu = family.mean(eta[i]);
        r[i] = w[i] * (y[i] - mu);
        objective += w[i] * (family.cumulant(eta[i]) - y[i] * eta[i]);
        gross += w[i] * (y[i].abs() + mu.abs()) * x.row(i).norm();
    }
    Evaluation {
        score: x.tr_mul(&r),
        hessian: information_sum(family, &eta, x, w),
        objective,
        gross,
    }
}

/// Weighted negative log-likelihood `Σ w (b(βᵀx) − y βᵀx)`.
fn objective(family: GlmFamily, beta: &DVector<f64>, x: &DMatrix<f64>, y: &DVector<f64>, w: &DVector<f64>) -> f64 {
    let eta = x * beta;
    (0..y.len())
        .filter(|&i| w[i] != 0.0)
        .map(|i| w[i] * (family.cumulant(eta[i]) - y[i] * eta[i]))
        .sum()
}

/// Damped Newton (equivalently IRLS for canonical links) on the weighted
/// score equations.
///
/// Numerical trouble is reported through `converged = false` and
/// `diagnostic`; only malformed input returns an error.
pub fn fit_glm(
    family: GlmFamily,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    w: &DVector<f64>,
    init: &DVector<f64>,
    opts: &SolverOptions,
) -> Result<FitResult> {
    check_dims(x, init.len(), Some(y), w)?;
    if init.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("initial coefficients must be finite".into()));
    }
    let p = x.ncols();
    let positive = w.iter().filter(|&&v| v > 0.0).count();

    let mut beta = init.clone();
    let mut diagnostic = None;
    let mut iterations = 0;
    let mut eval = evaluate(family, &beta, x, y, w);

    if positive < p {
        diagnostic = Some(format!("only {positive} rows with positive weight for {p} coefficients"));
    } else {
        loop {
            let tol_used = opts.tol.max(ROUNDOFF_SCORE_RTOL * eval.gross);
            if eval.score.norm() <= tol_used {
                break;
            }
            if iterations >= opts.max_iter {
                diagnostic = Some(format!("no convergence after {iterations} Newton iterations"));
                break;
            }
            let Some(delta) = linalg::spd_solve(&eval.hessian, &eval.score) else {
                diagnostic = Some("weighted information is singular after ridge jitter".into());
                break;
            };
            let slack = 1e-12 * (1.0 + eval.objective.abs());
            let mut step = 1.0;
            let mut accepted = None;
            for _ in 0..=opts.max_halvings {
                let cand = &beta + &delta * step;
                if cand.iter().all(|v| v.is_finite()) {
                    let obj = objective(family, &cand, x, y, w);
                    if obj.is_finite() && obj <= eval.objective + slack {
                        accepted = Some(cand);
                        break;
                    }
                }
                step *= 0.5;
            }
            iterations += 1;
            match accepted {
                Some(cand) => {
                    beta = cand;
                    eval = evaluate(family, &beta, x, y, w);
                }
                None => {
                    diagnostic = Some(format!(
                        "step halving failed after {} halvings at iteration {iterations}",
                        opts.max_halvings
                    ));
                    break;
                }
            }
        }
    }

    let score_norm = eval.score.norm();
    let tol_used = opts.tol.max(ROUNDOFF_SCORE_RTOL * eval.gross);
    let converged = positive >= p && score_norm.is_finite() && score_norm <= tol_used;
    if converged {
        diagnostic = None;
    }
    let total = w.sum();
    let info = if total > 0.0 {
        eval.hessian / total
    } else {
        DMatrix::zeros(p, p)
    };
    Ok(FitResult {
        beta,
        converged,
        iterations,
        score_norm,
        tol_used,
        info,
        diagnostic,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn m(rows: usize, cols: usize, data: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(rows, cols, data)
    }

    fn v(data: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(data)
    }

    #[test]
    fn cumulant_examples() {
        let (b, b1, b2) = GlmFamily::Logistic.cumulant_derivs(0.0).unwrap();
        assert_relative_eq!(b, 2f64.ln(), epsilon = 1e-15);
        assert_eq!(b1, 0.5);
        assert_eq!(b2, 0.25);

        assert_eq!(GlmFamily::Linear.cumulant_derivs(3.0).unwrap(), (4.5, 3.0, 1.0));
        assert_eq!(GlmFamily::Poisson.cumulant_derivs(0.0).unwrap(), (1.0, 1.0, 1.0));
    }

    #[test]
    fn cumulant_rejects_non_finite() {
        assert!(GlmFamily::Linear.cumulant_derivs(f64::NAN).is_err());
        assert!(GlmFamily::Poisson.cumulant_derivs(f64::INFINITY).is_err());
    }

    #[test]
    fn poisson_is_clamped() {
        let (_, b1, _) = GlmFamily::Poisson.cumulant_derivs(1e4).unwrap();
        assert_eq!(b1, POISSON_ETA_CAP.exp());
        let (_, b1, _) = GlmFamily::Poisson.cumulant_derivs_capped(1e4, 5.0).unwrap();
        assert_eq!(b1, 5f64.exp());
    }

    #[test]
    fn logistic_variance_identity_on_grid() {
        for k in 0..=6000 {
            let t = -30.0 + k as f64 * 0.01;
            let (_, b1, b2) = GlmFamily::Logistic.cumulant_derivs(t).unwrap();
            assert!(b1 > 0.0 && b1 < 1.0);
            assert!((b2 - b1 * (1.0 - b1)).abs() <= 1e-15, "t = {t}");
        }
    }

    #[test]
    fn variance_strictly_positive() {
        for fam in [GlmFamily::Linear, GlmFamily::Logistic, GlmFamily::Poisson] {
            for t in [-1e3, -40.0, -1.0, 0.0, 2.0, 40.0, 1e3] {
                assert!(fam.variance(t) > 0.0, "{fam} at {t}");
            }
        }
    }

    #[test]
    fn score_examples() {
        let s = weighted_score(GlmFamily::Linear, &v(&[0.0]), &m(2, 1, &[1.0, 1.0]), &v(&[1.0, -1.0]), &v(&[1.0, 1.0])).unwrap();
        assert_eq!(s, v(&[0.0]));
        let s = weighted_score(GlmFamily::Linear, &v(&[1.0]), &m(1, 1, &[2.0]), &v(&[5.0]), &v(&[3.0])).unwrap();
        assert_eq!(s, v(&[18.0]));
        let s = weighted_score(GlmFamily::Logistic, &v(&[0.0]), &m(2, 1, &[1.0, 1.0]), &v(&[1.0, 0.0]), &v(&[1.0, 1.0])).unwrap();
        assert_eq!(s, v(&[0.0]));
    }

    #[test]
    fn score_errors() {
        let x = m(2, 1, &[1.0, 1.0]);
        assert!(matches!(
            weighted_score(GlmFamily::Linear, &v(&[0.0, 1.0]), &x, &v(&[1.0, 1.0]), &v(&[1.0, 1.0])),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(
            weighted_score(GlmFamily::Linear, &v(&[0.0]), &x, &v(&[1.0, 1.0]), &v(&[1.0, -1.0])),
            Err(Error::Weights(_))
        ));
    }

    #[test]
    fn fisher_examples() {
        let j = fisher_info(GlmFamily::Linear, &v(&[0.3]), &m(2, 1, &[1.0, 2.0]), &v(&[1.0, 1.0])).unwrap();
        assert_relative_eq!(j[(0, 0)], 2.5, epsilon = 1e-15);
        let j = fisher_info(GlmFamily::Logistic, &v(&[0.0]), &m(1, 1, &[2.0]), &v(&[1.0])).unwrap();
        assert_relative_eq!(j[(0, 0)], 1.0, epsilon = 1e-15);
        let j = fisher_info(GlmFamily::Poisson, &v(&[0.0, 0.0]), &m(2, 2, &[1.0, 0.0, 0.0, 1.0]), &v(&[1.0, 1.0])).unwrap();
        assert_eq!(j, DMatrix::identity(2, 2) * 0.5);
    }

    #[test]
    fn fisher_rejects_zero_weights() {
        let r = fisher_info(GlmFamily::Linear, &v(&[0.0]), &m(2, 1, &[1.0, 2.0]), &v(&[0.0, 0.0]));
        assert!(matches!(r, Err(Error::Weights(_))));
    }

    #[test]
    fn logistic_balanced_fit_stays_at_zero() {
        // symmetric design, the same label at x and -x
        let x = m(4, 1, &[-1.0, 1.0, -2.0, 2.0]);
        let y = v(&[1.0, 1.0, 0.0, 0.0]);
        let fit = fit_glm(GlmFamily::Logistic, &x, &y, &v(&[1.0; 4]), &v(&[0.0]), &SolverOptions::default()).unwrap();
        assert!(fit.converged);
        assert_eq!(fit.iterations, 0);
        assert_eq!(fit.beta, v(&[0.0]));
    }

    #[test]
    fn separated_logistic_does_not_panic() {
        let x = m(4, 1, &[-2.0, -1.0, 1.0, 2.0]);
        let y = v(&[0.0, 0.0, 1.0, 1.0]);
        let fit = fit_glm(GlmFamily::Logistic, &x, &y, &v(&[1.0; 4]), &v(&[0.0]), &SolverOptions::default()).unwrap();
        // The score decays to zero along the separating direction; whatever
        // the outcome, the slope is large and positive and nothing blew up.
        assert!(fit.beta[0] > 5.0);
        assert!(fit.beta.iter().all(|b| b.is_finite()));
    }

    #[test]
    fn too_few_rows_is_non_convergence() {
        let x = m(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let fit = fit_glm(GlmFamily::Linear, &x, &v(&[1.0, 2.0]), &v(&[1.0, 0.0]), &v(&[0.0, 0.0]), &SolverOptions::default()).unwrap();
        assert!(!fit.converged);
        assert!(fit.diagnostic.is_some());
    }

    #[test]
    fn rank_deficient_design_reports_instead_of_panicking() {
        let x = m(3, 2, &[1.0, 1.0, 2.0, 2.0, 3.0, 3.0]);
        let y = v(&[1.0, 2.0, 3.5]);
        let fit = fit_glm(GlmFamily::Linear, &x, &y, &v(&[1.0; 3]), &v(&[0.0, 0.0]), &SolverOptions::default()).unwrap();
        assert!(fit.beta.iter().all(|b| b.is_finite()));
    }

    fn instance(seed: u64, n: usize, p: usize) -> (DMatrix<f64>, DVector<f64>, DVector<f64>) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, p, |_, _| rng.random_range(-2.0..2.0));
        let y = DVector::from_fn(n, |_, _| rng.random_range(0.0..3.0_f64).floor());
        let w = DVector::from_fn(n, |_, _| rng.random_range(0.1..5.0));
        (x, y, w)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn converged_fit_has_small_score(seed in 0u64..1000, fam in 0usize..3) {
            let family = [GlmFamily::Linear, GlmFamily::Logistic, GlmFamily::Poisson][fam];
            let (x, mut y, w) = instance(seed, 60, 3);
            if family == GlmFamily::Logistic {
                y.apply(|v| *v = (*v > 0.5) as u8 as f64);
            }
            let fit = fit_glm(family, &x, &y, &w, &DVector::zeros(3), &SolverOptions::default()).unwrap();
            if fit.converged {
                let s = weighted_score(family, &fit.beta, &x, &y, &w).unwrap();
                prop_assert!(s.norm() <= fit.tol_used);
                prop_assert!(fit.score_norm <= fit.tol_used);
                prop_assert!(linalg::min_eigen_over_trace(&fit.info) >= -1e-10);
            }
            prop_assert!((&fit.info - fit.info.transpose()).abs().max() == 0.0);
        }

        #[test]
        fn weight_scaling_scales_score_and_keeps_solution(seed in 0u64..1000, c in 0.01f64..100.0) {
            let (x, y, w) = instance(seed, 50, 3);
            let beta = DVector::from_element(3, 0.1);
            let s1 = weighted_score(GlmFamily::Poisson, &beta, &x, &y, &w).unwrap();
            let s2 = weighted_score(GlmFamily::Poisson, &beta, &x, &y, &(&w * c)).unwrap();
            prop_assert!((&s1 * c - &s2).norm() <= 1e-10 * (1.0 + s2.norm()));

            let opts = SolverOptions::default();
            let f1 = fit_glm(GlmFamily::Poisson, &x, &y, &w, &DVector::zeros(3), &opts).unwrap();
            let f2 = fit_glm(GlmFamily::Poisson, &x, &y, &(&w * c), &DVector::zeros(3), &opts).unwrap();
            prop_assert!(f1.converged && f2.converged);
            prop_assert!((&f1.beta - &f2.beta).amax() < 1e-7);
        }

        #[test]
        fn fisher_is_symmetric_psd(seed in 0u64..1000) {
            let (x, _, w) = instance(seed, 40, 4);
            let beta = DVector::from_element(4, 0.3);
            for family in [GlmFamily::Linear, GlmFamily::Logistic, GlmFamily::Poisson] {
                let j = fisher_info(family, &beta, &x, &w).unwrap();
                prop_assert!((&j - j.transpose()).abs().max() == 0.0);
                prop_assert!(linalg::min_eigen_over_trace(&j) >= -1e-10);
            }
        }
    }
}
