//! Pilot stage, subsample fits, plug-in covariance blocks and the
//! surrogate-augmented estimator.
//!
//! Responses live behind [`Dataset::reveal`], which logs every access so
//! callers can verify that only pilot and selected units were measured.

use std::cell::RefCell;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::glm::{self, FitResult, GlmFamily, SolverOptions};
use crate::linalg::{self, PINV_RTOL};
use crate::moments::{self, ForestParams, MomentModel};
use crate::rng::{self, Rng};
use crate::sampler::{self, SamplingPlan};

/// Condition number above which `sigma22` is flagged as numerically singular.
pub const SIGMA22_COND_LIMIT: f64 = 1e10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "osumcs")]
    Osumcs,
    #[serde(rename = "osumc")]
    Osumc,
    #[serde(rename = "unif")]
    Uniform,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Osumcs, Method::Osumc, Method::Uniform];

    pub fn name(self) -> &'static str {
        match self {
            Method::Osumcs => "osumcs",
            Method::Osumc => "osumc",
            Method::Uniform => "unif",
        }
    }

    pub fn index(self) -> u64 {
        match self {
            Method::Osumcs => 0,
            Method::Osumc => 1,
            Method::Uniform => 2,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "osumcs" => Ok(Method::Osumcs),
            "osumc" => Ok(Method::Osumc),
            "unif" | "uniform" => Ok(Method::Uniform),
            other => Err(Error::Config(format!("unknown method '{other}'"))),
        }
    }
}

/// Covariates and surrogate for every unit; responses only on request.
#[derive(Debug)]
pub struct Dataset {
    pub x: DMatrix<f64>,
    pub s: DVector<f64>,
    y: Vec<f64>,
    revealed: RefCell<Vec<bool>>,
}

impl Dataset {
    pub fn new(x: DMatrix<f64>, s: DVector<f64>, y: Vec<f64>) -> Result<Self> {
        if s.len() != x.nrows() || y.len() != x.nrows() {
            return Err(Error::Dimension(format!(
                "X has {} rows, S has {}, Y has {}",
                x.nrows(),
                s.len(),
                y.len()
            )));
        }
        let n = y.len();
        Ok(Self {
            x,
            s,
            y,
            revealed: RefCell::new(vec![false; n]),
        })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    /// Measure the response of unit `i`; the access is logged.
    pub fn reveal(&self, i: usize) -> f64 {
        self.revealed.borrow_mut()[i] = true;
        self.y[i]
    }

    pub fn reveal_many(&self, idx: &[usize]) -> DVector<f64> {
        DVector::from_iterator(idx.len(), idx.iter().map(|&i| self.reveal(i)))
    }

    /// Units whose response has been read since the last clear.
    pub fn access_log(&self) -> Vec<usize> {
        self.revealed
            .borrow()
            .iter()
            .enumerate()
            .filter_map(|(i, &r)| r.then_some(i))
            .collect()
    }

    pub fn clear_access_log(&self) {
        self.revealed.borrow_mut().iter_mut().for_each(|r| *r = false);
    }
}

/// Where the `ψψᵀ` term of `Σ₂₂` is summed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sigma22Source {
    /// All `N` units with kernel `1/π − 1`; `ψ` needs no responses.
    #[default]
    Population,
    /// Selected units only, with kernel `(1/π)(1/π − 1)`.
    Subsample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub n0: usize,
    pub n: usize,
    pub method: Method,
    pub family_y: GlmFamily,
    pub family_s: GlmFamily,
    pub solver: SolverOptions,
    pub forest: ForestParams,
    /// `false` returns the plain Horvitz-Thompson estimate as `beta_a`.
    pub augment: bool,
    pub sigma22_source: Sigma22Source,
}

impl PipelineConfig {
    pub fn new(family_y: GlmFamily, method: Method, n0: usize, n: usize) -> Self {
        Self {
            n0,
            n,
            method,
            family_y,
            family_s: GlmFamily::Linear,
            solver: SolverOptions::default(),
            forest: ForestParams::default(),
            augment: true,
            sigma22_source: Sigma22Source::Population,
        }
    }
}

/// Seeds for the three random stages of one pipeline run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PipelineSeeds {
    pub pilot: u64,
    pub forest: u64,
    pub draw: u64,
}

impl PipelineSeeds {
    pub fn from_rng(rng: &mut Rng) -> Self {
        use rand::Rng as _;
        Self {
            pilot: rng.random(),
            forest: rng.random(),
            draw: rng.random(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PilotStage {
    pub mask: Vec<bool>,
    pub beta: DVector<f64>,
    pub gamma: DVector<f64>,
    /// Information of the response model at the pilot estimate, on pilot rows.
    pub info: DMatrix<f64>,
    pub moments: Option<MomentModel>,
}

impl PilotStage {
    pub fn indices(&self) -> Vec<usize> {
        self.mask
            .iter()
            .enumerate()
            .filter_map(|(i, &r)| r.then_some(i))
            .collect()
    }
}

/// Uniform Bernoulli pilot with expected size `n0`.
pub fn draw_pilot_mask(n_rows: usize, n0: usize, rng: &mut Rng) -> Result<Vec<bool>> {
    if n0 == 0 || n0 > n_rows {
        return Err(Error::Config(format!("pilot size {n0} must be in 1..={n_rows}")));
    }
    let pi = vec![n0 as f64 / n_rows as f64; n_rows];
    Ok(sampler::draw(&pi, rng))
}

/// Fit pilot models for `Y|X` and `S|X`, the pilot information, and
/// optionally the root-moment forest.
pub fn pilot_stage(
    dataset: &Dataset,
    mask: &[bool],
    family_y: GlmFamily,
    family_s: GlmFamily,
    solver: &SolverOptions,
    forest: Option<(&ForestParams, &mut Rng)>,
) -> Result<PilotStage> {
    if mask.len() != dataset.len() {
        return Err(Error::Dimension("pilot mask length differs from dataset".into()));
    }
    let idx: Vec<usize> = mask
        .iter()
        .enumerate()
        .filter_map(|(i, &r)| r.then_some(i))
        .collect();
    let p = dataset.dim();
    if idx.len() <= p {
        return Err(Error::Pilot(format!(
            "pilot has {} units for {p} coefficients; increase n0",
            idx.len()
        )));
    }
    let x = linalg::select_rows(&dataset.x, &idx);
    let s = linalg::select(&dataset.s, &idx);
    let y = dataset.reveal_many(&idx);
    let ones = DVector::from_element(idx.len(), 1.0);
    let zero = DVector::zeros(p);

    let beta_fit = glm::fit_glm(family_y, &x, &y, &ones, &zero, solver)?;
    if !beta_fit.converged {
        return Err(Error::Pilot(format!(
            "response model did not converge on the pilot ({}); increase n0",
            beta_fit.diagnostic.unwrap_or_default()
        )));
    }
    let gamma_fit = glm::fit_glm(family_s, &x, &s, &ones, &zero, solver)?;
    if !gamma_fit.converged {
        return Err(Error::Pilot(format!(
            "surrogate model did not converge on the pilot ({}); increase n0",
            gamma_fit.diagnostic.unwrap_or_default()
        )));
    }

    let moments = match forest {
        Some((params, rng)) => {
            let targets = moments::residual_targets(family_y, &beta_fit.beta, &x, &y)?;
            let gamma = params.residual_feature.then(|| gamma_fit.beta.as_slice().to_vec());
            let feats = moments::moment_features(&s, &x, gamma.as_deref())?;
            let mut model = moments::fit_forest(&feats, &targets, params, rng)?;
            model.surrogate_fit = gamma;
            Some(model)
        }
        None => None,
    };

    Ok(PilotStage {
        mask: mask.to_vec(),
        beta: beta_fit.beta,
        gamma: gamma_fit.beta,
        info: beta_fit.info,
        moments,
    })
}

/// Full-data fit of the surrogate working model; needs no responses.
pub fn fit_surrogate_full(
    dataset: &Dataset,
    family_s: GlmFamily,
    init: &DVector<f64>,
    solver: &SolverOptions,
) -> Result<FitResult> {
    let ones = DVector::from_element(dataset.len(), 1.0);
    glm::fit_glm(family_s, &dataset.x, &dataset.s, &ones, init, solver)
}

/// Unnormalised selection scores for `method`.
pub fn selection_scores(
    dataset: &Dataset,
    pilot: &PilotStage,
    method: Method,
    family_y: GlmFamily,
) -> Result<DVector<f64>> {
    match method {
        Method::Osumcs => {
            let model = pilot
                .moments
                .as_ref()
                .ok_or_else(|| Error::Config("surrogate-based scores need a trained moment model".into()))?;
            let root = moments::predict_root_moment(model, &dataset.s, &dataset.x)?;
            sampler::osumcs_scores(&root, &pilot.info, &dataset.x)
        }
        Method::Osumc => sampler::osumc_scores(family_y, &pilot.beta, &pilot.info, &dataset.x),
        Method::Uniform => Ok(DVector::from_element(dataset.len(), 1.0)),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SigmaBlocks {
    pub sigma12: DMatrix<f64>,
    pub sigma22: DMatrix<f64>,
    /// Information of the response model at `beta_n`, π-weighted.
    pub j_beta: DMatrix<f64>,
}

fn check_subsample(x: &DMatrix<f64>, s: &DVector<f64>, selected: &[usize], y_selected: &DVector<f64>, pi: &[f64]) -> Result<()> {
    if s.len() != x.nrows() || pi.len() != x.nrows() {
        return Err(Error::Dimension("X, S and π must have one entry per unit".into()));
    }
    if selected.len() != y_selected.len() {
        return Err(Error::Dimension(format!(
            "{} selected units but {} responses",
            selected.len(),
            y_selected.len()
        )));
    }
    if selected.iter().any(|&i| i >= x.nrows()) {
        return Err(Error::Dimension("selected index out of range".into()));
    }
    if pi.iter().any(|&p| !(p > 0.0 && p <= 1.0)) {
        return Err(Error::Domain("inclusion probabilities must lie in (0, 1]".into()));
    }
    Ok(())
}

/// `(1/N²) Σ_sel k(π_i) a_i b_iᵀ` for per-unit vectors stored as rows.
fn kernel_cross(rows_a: &DMatrix<f64>, rows_b: &DMatrix<f64>, kernel: &[f64], big_n: usize) -> DMatrix<f64> {
    let mut scaled = rows_a.clone();
    for (i, mut r) in scaled.row_iter_mut().enumerate() {
        r *= kernel[i];
    }
    scaled.tr_mul(rows_b) / (big_n as f64 * big_n as f64)
}

fn residual_rows(family: GlmFamily, coef: &DVector<f64>, x: &DMatrix<f64>, target: &DVector<f64>) -> DMatrix<f64> {
    let eta = x * coef;
    let mut rows = x.clone();
    for (i, mut r) in rows.row_iter_mut().enumerate() {
        r *= target[i] - family.mean(eta[i]);
    }
    rows
}

/// Plug-in covariance blocks of `(β̂_n, γ̂_n − γ̂_N)`.
///
/// With `φ_i = (Y_i − b₁'(β̂_nᵀx_i)) x_i` and `ψ_i = (S_i − b₂'(γ̂_nᵀx_i)) x_i`:
/// `Σ₁₂ = J_β⁻¹ M₁₂ J_γ⁻¹`, `Σ₂₂ = J_γ⁻¹ M₂₂ J_γ⁻¹`, where
/// `M₁₂ = N⁻² Σ_sel (1/π)(1/π − 1) φψᵀ`, `J_β` is the π-weighted information
/// at `β̂_n` and `j_gamma` the full-data information at `γ̂_N`.
///
/// `M₂₂` is `N⁻² Σ_all (1/π − 1) ψψᵀ` for [`Sigma22Source::Population`] and
/// the selected-unit analogue of `M₁₂` for [`Sigma22Source::Subsample`].
#[allow(clippy::too_many_arguments)]
pub fn sigma_blocks(
    family_y: GlmFamily,
    family_s: GlmFamily,
    beta_n: &DVector<f64>,
    gamma_n: &DVector<f64>,
    j_gamma: &DMatrix<f64>,
    x: &DMatrix<f64>,
    s: &DVector<f64>,
    selected: &[usize],
    y_selected: &DVector<f64>,
    pi: &[f64],
    source: Sigma22Source,
) -> Result<SigmaBlocks> {
    check_subsample(x, s, selected, y_selected, pi)?;
    let p = x.ncols();
    let big_n = x.nrows();
    let xs = linalg::select_rows(x, selected);
    let ss = linalg::select(s, selected);
    let w = DVector::from_iterator(selected.len(), selected.iter().map(|&i| 1.0 / pi[i]));
    let kernel: Vec<f64> = selected.iter().map(|&i| (1.0 / pi[i]) * (1.0 / pi[i] - 1.0)).collect();

    let j_beta = if selected.is_empty() {
        DMatrix::identity(p, p)
    } else {
        glm::fisher_info(family_y, beta_n, &xs, &w)?
    };

    let phi = residual_rows(family_y, beta_n, &xs, y_selected);
    let psi = residual_rows(family_s, gamma_n, &xs, &ss);
    let m12 = kernel_cross(&phi, &psi, &kernel, big_n);
    let m22 = match source {
        Sigma22Source::Subsample => kernel_cross(&psi, &psi, &kernel, big_n),
        Sigma22Source::Population => {
            let psi_all = residual_rows(family_s, gamma_n, x, s);
            let k_all: Vec<f64> = pi.iter().map(|p| 1.0 / p - 1.0).collect();
            kernel_cross(&psi_all, &psi_all, &k_all, big_n)
        }
    };

    let jb_inv = linalg::spd_inverse(&j_beta)?;
    let jg_inv = linalg::spd_inverse(j_gamma)?;
    let sigma12 = &jb_inv * m12 * &jg_inv;
    let sigma22 = linalg::symmetrize(&(&jg_inv * m22 * &jg_inv));
    Ok(SigmaBlocks {
        sigma12,
        sigma22,
        j_beta,
    })
}

/// `J_β⁻¹ (N⁻² Σ_sel π_i⁻² φφᵀ) J_β⁻¹`; only used to bound the size of the
/// augmentation correction in diagnostics and tests.
pub fn sigma11_block(
    family_y: GlmFamily,
    beta_n: &DVector<f64>,
    x: &DMatrix<f64>,
    selected: &[usize],
    y_selected: &DVector<f64>,
    pi: &[f64],
) -> Result<DMatrix<f64>> {
    let big_n = x.nrows();
    let xs = linalg::select_rows(x, selected);
    let w = DVector::from_iterator(selected.len(), selected.iter().map(|&i| 1.0 / pi[i]));
    let kernel: Vec<f64> = selected.iter().map(|&i| 1.0 / (pi[i] * pi[i])).collect();
    let j_beta = glm::fisher_info(family_y, beta_n, &xs, &w)?;
    let phi = residual_rows(family_y, beta_n, &xs, y_selected);
    let m11 = kernel_cross(&phi, &phi, &kernel, big_n);
    let jb_inv = linalg::spd_inverse(&j_beta)?;
    Ok(linalg::symmetrize(&(&jb_inv * m11 * &jb_inv)))
}

/// `β̂_A = β̂_n − Σ₁₂ pinv(Σ₂₂) (γ̂_n − γ̂_N)`.
pub fn augment(
    beta_n: &DVector<f64>,
    gamma_n: &DVector<f64>,
    gamma_full: &DVector<f64>,
    sigma12: &DMatrix<f64>,
    sigma22: &DMatrix<f64>,
) -> DVector<f64> {
    let diff = gamma_n - gamma_full;
    let correction = sigma12 * (linalg::pinv_sym(sigma22, PINV_RTOL) * diff);
    beta_n - correction
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PipelineDiagnostics {
    pub pilot_size: usize,
    pub realized_m: usize,
    pub beta_n_converged: bool,
    pub gamma_n_converged: bool,
    pub gamma_full_converged: bool,
    pub cond_j_pilot: f64,
    pub cond_j_beta: f64,
    pub cond_sigma22: f64,
    pub sigma22_singular: bool,
    pub augmented: bool,
    pub notes: Vec<String>,
}

impl PipelineDiagnostics {
    pub fn all_converged(&self) -> bool {
        self.beta_n_converged && self.gamma_n_converged && self.gamma_full_converged
    }
}

#[derive(Debug, Clone)]
pub struct AugmentedEstimate {
    pub beta_n: DVector<f64>,
    pub gamma_n: DVector<f64>,
    pub gamma_full: DVector<f64>,
    pub sigma12: DMatrix<f64>,
    pub sigma22: DMatrix<f64>,
    pub beta_a: DVector<f64>,
    pub plan: SamplingPlan,
    pub diagnostics: PipelineDiagnostics,
}

impl AugmentedEstimate {
    pub fn converged(&self) -> bool {
        self.diagnostics.all_converged()
    }
}

/// Sample with probabilities built from `scores` and run the weighted fits,
/// covariance blocks and augmentation.
pub fn estimate_with_scores(
    dataset: &Dataset,
    pilot: &PilotStage,
    gamma_full: &FitResult,
    scores: &DVector<f64>,
    config: &PipelineConfig,
    draw_rng: &mut Rng,
) -> Result<AugmentedEstimate> {
    let big_n = dataset.len();
    let p = dataset.dim();
    let pi = sampler::normalize_cap(scores.as_slice(), config.n)?;
    let plan = SamplingPlan::draw(pi, config.n, draw_rng);
    let selected = plan.selected();

    let mut notes = Vec::new();
    let xs = linalg::select_rows(&dataset.x, &selected);
    let ss = linalg::select(&dataset.s, &selected);
    let ys = dataset.reveal_many(&selected);
    let w = DVector::from_iterator(selected.len(), selected.iter().map(|&i| 1.0 / plan.pi[i]));

    let beta_fit = glm::fit_glm(config.family_y, &xs, &ys, &w, &pilot.beta, &config.solver)?;
    let gamma_fit = glm::fit_glm(config.family_s, &xs, &ss, &w, &pilot.gamma, &config.solver)?;
    if let Some(d) = &beta_fit.diagnostic {
        notes.push(format!("beta_n: {d}"));
    }
    if let Some(d) = &gamma_fit.diagnostic {
        notes.push(format!("gamma_n: {d}"));
    }
    if let Some(d) = &gamma_full.diagnostic {
        notes.push(format!("gamma_N: {d}"));
    }

    let mut diagnostics = PipelineDiagnostics {
        pilot_size: pilot.mask.iter().filter(|&&r| r).count(),
        realized_m: plan.realized_m,
        beta_n_converged: beta_fit.converged,
        gamma_n_converged: gamma_fit.converged,
        gamma_full_converged: gamma_full.converged,
        cond_j_pilot: linalg::condition_number_sym(&pilot.info),
        cond_j_beta: linalg::condition_number_sym(&beta_fit.info),
        cond_sigma22: f64::NAN,
        sigma22_singular: false,
        augmented: config.augment,
        notes,
    };

    let (sigma12, sigma22) = if diagnostics.all_converged() {
        match sigma_blocks(
            config.family_y,
            config.family_s,
            &beta_fit.beta,
            &gamma_fit.beta,
            &gamma_full.info,
            &dataset.x,
            &dataset.s,
            &selected,
            &ys,
            &plan.pi,
            config.sigma22_source,
        ) {
            Ok(b) => (b.sigma12, b.sigma22),
            Err(e) => {
                diagnostics.notes.push(format!("covariance blocks: {e}"));
                diagnostics.beta_n_converged = false;
                (DMatrix::zeros(p, p), DMatrix::zeros(p, p))
            }
        }
    } else {
        (DMatrix::zeros(p, p), DMatrix::zeros(p, p))
    };
    diagnostics.cond_sigma22 = linalg::condition_number_sym(&sigma22);
    diagnostics.sigma22_singular = diagnostics.cond_sigma22.is_nan() || diagnostics.cond_sigma22 >= SIGMA22_COND_LIMIT;

    let beta_a = if config.augment {
        augment(&beta_fit.beta, &gamma_fit.beta, &gamma_full.beta, &sigma12, &sigma22)
    } else {
        beta_fit.beta.clone()
    };
    debug_assert_eq!(big_n, plan.pi.len());

    Ok(AugmentedEstimate {
        beta_n: beta_fit.beta,
        gamma_n: gamma_fit.beta,
        gamma_full: gamma_full.beta.clone(),
        sigma12,
        sigma22,
        beta_a,
        plan,
        diagnostics,
    })
}

/// Scores for `config.method`, then [`estimate_with_scores`].
pub fn estimate(
    dataset: &Dataset,
    pilot: &PilotStage,
    gamma_full: &FitResult,
    config: &PipelineConfig,
    draw_rng: &mut Rng,
) -> Result<AugmentedEstimate> {
    let scores = selection_scores(dataset, pilot, config.method, config.family_y)?;
    estimate_with_scores(dataset, pilot, gamma_full, &scores, config, draw_rng)
}

/// The whole procedure for one dataset: pilot, full-data surrogate fit,
/// scores, sampling, weighted fits and augmentation.
pub fn run_pipeline(dataset: &Dataset, config: &PipelineConfig, seeds: &PipelineSeeds) -> Result<AugmentedEstimate> {
    let mask = draw_pilot_mask(dataset.len(), config.n0, &mut rng::from_seed(seeds.pilot))?;
    let mut forest_rng = rng::from_seed(seeds.forest);
    let forest = (config.method == Method::Osumcs).then_some((&config.forest, &mut forest_rng));
    let pilot = pilot_stage(dataset, &mask, config.family_y, config.family_s, &config.solver, forest)?;
    let gamma_full = fit_surrogate_full(dataset, config.family_s, &pilot.gamma, &config.solver)?;
    estimate(dataset, &pilot, &gamma_full, config, &mut rng::from_seed(seeds.draw))
}
