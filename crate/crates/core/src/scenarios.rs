//! Seeded generators for the simulation designs and surrogate constructions.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::{ChiSquared, Distribution, Exp, Normal, Poisson, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::Dataset;
use crate::glm::{GlmFamily, POISSON_ETA_CAP};
use crate::linalg;
use crate::rng::{self, Rng, Stage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Design {
    MzNormal,
    NzNormal,
    UnNormal,
    MixNormal,
    T3Scaled,
    Exp,
    Ga,
    T3,
    T1,
    PoisMzNormal,
    PoisNzNormal,
    PoisUniform,
    PoisT3,
}

impl Design {
    pub const ALL: [Design; 13] = [
        Design::MzNormal,
        Design::NzNormal,
        Design::UnNormal,
        Design::MixNormal,
        Design::T3Scaled,
        Design::Exp,
        Design::Ga,
        Design::T3,
        Design::T1,
        Design::PoisMzNormal,
        Design::PoisNzNormal,
        Design::PoisUniform,
        Design::PoisT3,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Design::MzNormal => "mzNormal",
            Design::NzNormal => "nzNormal",
            Design::UnNormal => "unNormal",
            Design::MixNormal => "mixNormal",
            Design::T3Scaled => "T3scaled",
            Design::Exp => "Exp",
            Design::Ga => "GA",
            Design::T3 => "T3",
            Design::T1 => "T1",
            Design::PoisMzNormal => "PoisMzNormal",
            Design::PoisNzNormal => "PoisNzNormal",
            Design::PoisUniform => "PoisUniform",
            Design::PoisT3 => "PoisT3",
        }
    }

    pub fn default_family(self) -> GlmFamily {
        match self {
            Design::MzNormal
            | Design::NzNormal
            | Design::UnNormal
            | Design::MixNormal
            | Design::T3Scaled
            | Design::Exp => GlmFamily::Logistic,
            Design::Ga | Design::T3 | Design::T1 => GlmFamily::Linear,
            Design::PoisMzNormal | Design::PoisNzNormal | Design::PoisUniform | Design::PoisT3 => {
                GlmFamily::Poisson
            }
        }
    }
}

impl fmt::Display for Design {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Design {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Design::ALL
            .into_iter()
            .find(|d| d.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown scenario '{s}'")))
    }
}

/// Constants of the surrogate construction. Which terms are active depends on
/// the response family:
///
/// * logistic: `S = ζ_i Y + 5 Xβ₀ + Xη + ε`
/// * linear: `S = 10 Y + Xη + ε`
/// * Poisson: `S = 5 Y + ζ_i Xβ₀ + ε`
///
/// `ζ_i` and `ε_i` are drawn per row, `η` once per dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurrogateParams {
    pub zeta_mean: f64,
    pub zeta_var: f64,
    pub eta_mean: f64,
    pub eta_var: f64,
    pub eps_var: f64,
}

impl SurrogateParams {
    pub fn for_family(family: GlmFamily) -> Self {
        match family {
            GlmFamily::Logistic => Self {
                zeta_mean: 5.0,
                zeta_var: 0.04,
                eta_mean: 0.0,
                eta_var: 0.25,
                eps_var: 0.25,
            },
            GlmFamily::Linear => Self {
                zeta_mean: 0.0,
                zeta_var: 0.0,
                eta_mean: 2.0,
                eta_var: 1.0,
                eps_var: 1.0,
            },
            GlmFamily::Poisson => Self {
                zeta_mean: 5.0,
                zeta_var: 0.09,
                eta_mean: 0.0,
                eta_var: 0.0,
                eps_var: 1.0,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSpec {
    pub family: GlmFamily,
    pub design: Design,
    pub n_rows: usize,
    pub p: usize,
    pub beta0: DVector<f64>,
    /// Standard deviation of the linear-model noise.
    pub noise_sd: f64,
    pub surrogate: SurrogateParams,
}

impl ScenarioSpec {
    /// Defaults for `design`; `family` overrides the design's usual family
    /// and with it `p` and `β₀`.
    pub fn new(design: Design, family: Option<GlmFamily>, n_rows: usize) -> Self {
        let family = family.unwrap_or(design.default_family());
        let (p, b) = match family {
            GlmFamily::Logistic => (10, 0.5),
            GlmFamily::Linear => (30, 0.5),
            GlmFamily::Poisson => (10, 0.1),
        };
        Self {
            family,
            design,
            n_rows,
            p,
            beta0: DVector::from_element(p, b),
            noise_sd: 3.0,
            surrogate: SurrogateParams::for_family(family),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.p == 0 || self.n_rows == 0 {
            return Err(Error::Config("scenario needs N > 0 and p > 0".into()));
        }
        if self.beta0.len() != self.p {
            return Err(Error::Dimension(format!("beta0 has {} entries for p = {}", self.beta0.len(), self.p)));
        }
        let s = &self.surrogate;
        if [s.zeta_var, s.eta_var, s.eps_var, self.noise_sd].iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config("variances must be finite and nonnegative".into()));
        }
        Ok(())
    }
}

/// `Σ_ij = 0.5^{1(i≠j)}`.
pub fn exchangeable_sigma(p: usize) -> DMatrix<f64> {
    DMatrix::from_fn(p, p, |i, j| if i == j { 1.0 } else { 0.5 })
}

/// `Σ_ij = 2 · 0.5^{|i−j|}`.
pub fn ar_sigma(p: usize) -> DMatrix<f64> {
    DMatrix::from_fn(p, p, |i, j| 2.0 * 0.5f64.powi(i.abs_diff(j) as i32))
}

/// Population covariance of the Gaussian part of `design`.
pub fn design_sigma(design: Design, p: usize) -> DMatrix<f64> {
    match design {
        Design::Ga | Design::T3 | Design::T1 => ar_sigma(p),
        Design::UnNormal => {
            let u = DMatrix::from_diagonal(&DVector::from_fn(p, |j, _| 1.0 / (j + 1) as f64));
            &u * exchangeable_sigma(p) * &u
        }
        _ => exchangeable_sigma(p),
    }
}

fn gaussian_rows(n: usize, chol_l: &DMatrix<f64>, rng: &mut Rng) -> DMatrix<f64> {
    let p = chol_l.nrows();
    let z = DMatrix::<f64>::from_fn(n, p, |_, _| StandardNormal.sample(rng));
    z * chol_l.transpose()
}

fn divide_rows_by_chi(x: &mut DMatrix<f64>, df: f64, rng: &mut Rng) {
    let chi = ChiSquared::new(df).expect("positive degrees of freedom");
    for mut row in x.row_iter_mut() {
        let d = (chi.sample(rng) / df).sqrt();
        row /= d;
    }
}

/// Draw the `N × p` covariate matrix of `spec.design`.
pub fn gen_covariates(spec: &ScenarioSpec, rng: &mut Rng) -> Result<DMatrix<f64>> {
    spec.validate()?;
    let (n, p) = (spec.n_rows, spec.p);
    let design = spec.design;
    let gaussian = |rng: &mut Rng| -> Result<DMatrix<f64>> {
        let sigma = design_sigma(design, p);
        let l = sigma
            .cholesky()
            .ok_or_else(|| Error::Singular("design covariance is not positive definite".into()))?
            .l();
        Ok(gaussian_rows(n, &l, rng))
    };
    let x = match design {
        Design::MzNormal | Design::UnNormal | Design::PoisMzNormal => gaussian(rng)?,
        Design::NzNormal | Design::PoisNzNormal => gaussian(rng)?.add_scalar(0.5),
        Design::Ga => gaussian(rng)?.add_scalar(1.0),
        Design::MixNormal => {
            let mut x = gaussian(rng)?;
            for mut row in x.row_iter_mut() {
                let shift = if rng.random::<bool>() { 0.5 } else { -0.5 };
                row.add_scalar_mut(shift);
            }
            x
        }
        Design::T3Scaled | Design::PoisT3 => {
            let mut x = gaussian(rng)?;
            divide_rows_by_chi(&mut x, 3.0, rng);
            x / 10.0
        }
        Design::T3 => {
            let mut x = gaussian(rng)?;
            divide_rows_by_chi(&mut x, 3.0, rng);
            x
        }
        Design::T1 => {
            let mut x = gaussian(rng)?;
            divide_rows_by_chi(&mut x, 1.0, rng);
            x
        }
        Design::Exp => {
            let e = Exp::new(2.0).expect("positive rate");
            DMatrix::from_fn(n, p, |_, _| e.sample(rng))
        }
        Design::PoisUniform => {
            let wide = Uniform::new_inclusive(-1.0, 1.0).expect("valid range");
            let narrow = Uniform::new_inclusive(-0.5, 0.5).expect("valid range");
            let half = p / 2;
            let mut x = DMatrix::zeros(n, p);
            for i in 0..n {
                for j in 0..p {
                    x[(i, j)] = if j < half { wide.sample(rng) } else { narrow.sample(rng) };
                }
            }
            x
        }
    };
    Ok(x)
}

/// Draw responses from the family's model at `β₀`; `noise_sd` applies to the
/// linear family only.
pub fn gen_response(
    family: GlmFamily,
    x: &DMatrix<f64>,
    beta0: &DVector<f64>,
    noise_sd: f64,
    rng: &mut Rng,
) -> Result<DVector<f64>> {
    if x.ncols() != beta0.len() {
        return Err(Error::Dimension(format!("X has {} columns, beta0 {}", x.ncols(), beta0.len())));
    }
    let eta = x * beta0;
    let y = match family {
        GlmFamily::Linear => eta.map(|e| {
            let z: f64 = StandardNormal.sample(rng);
            e + noise_sd * z
        }),
        GlmFamily::Logistic => eta.map(|e| {
            let u: f64 = rng.random();
            if u < family.mean(e) { 1.0 } else { 0.0 }
        }),
        GlmFamily::Poisson => eta.map(|e| {
            let lambda = e.clamp(-POISSON_ETA_CAP, POISSON_ETA_CAP).exp();
            Poisson::new(lambda).expect("finite positive rate").sample(rng)
        }),
    };
    Ok(y)
}

fn normal(mean: f64, var: f64) -> Normal<f64> {
    Normal::new(mean, var.sqrt()).expect("finite nonnegative variance")
}

/// Surrogate for the simulation designs (see [`SurrogateParams`]).
pub fn gen_surrogate(spec: &ScenarioSpec, x: &DMatrix<f64>, y: &DVector<f64>, rng: &mut Rng) -> Result<DVector<f64>> {
    if x.nrows() != y.len() || x.ncols() != spec.beta0.len() {
        return Err(Error::Dimension("surrogate inputs disagree in shape".into()));
    }
    let c = spec.surrogate;
    let xb = x * &spec.beta0;
    let eta = DVector::from_fn(x.ncols(), |_, _| normal(c.eta_mean, c.eta_var).sample(rng));
    let xeta = x * eta;
    let zeta = normal(c.zeta_mean, c.zeta_var);
    let eps = normal(0.0, c.eps_var);
    let s = DVector::from_fn(y.len(), |i, _| {
        let z = zeta.sample(rng);
        let e = eps.sample(rng);
        match spec.family {
            GlmFamily::Logistic => z * y[i] + 5.0 * xb[i] + xeta[i] + e,
            GlmFamily::Linear => 10.0 * y[i] + xeta[i] + e,
            GlmFamily::Poisson => 5.0 * y[i] + z * xb[i] + e,
        }
    });
    Ok(s)
}

/// Ordinary least squares via QR; errors when `X` is rank deficient.
pub fn ols(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
    if x.nrows() != y.len() {
        return Err(Error::Dimension(format!("X has {} rows, y {}", x.nrows(), y.len())));
    }
    if x.nrows() < x.ncols() {
        return Err(Error::Singular("fewer rows than columns".into()));
    }
    let qr = x.clone().qr();
    let r = qr.r();
    let scale = r.diagonal().amax();
    if r.diagonal().iter().any(|d| d.abs() <= 1e-12 * scale) {
        return Err(Error::Singular("design matrix is rank deficient".into()));
    }
    let qty = qr.q().transpose() * y;
    r.solve_upper_triangular(&qty)
        .ok_or_else(|| Error::Singular("triangular solve failed".into()))
}

/// `S = 3 Xγ₀ + N(0, 1)` for real data.
pub fn real_data_surrogate(x: &DMatrix<f64>, gamma0: &DVector<f64>, rng: &mut Rng) -> DVector<f64> {
    let fitted = x * gamma0;
    fitted.map(|f| {
        let z: f64 = StandardNormal.sample(rng);
        3.0 * f + z
    })
}

/// One simulated draw with the response still visible.
#[derive(Debug, Clone)]
pub struct Simulated {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub s: DVector<f64>,
}

impl Simulated {
    pub fn into_dataset(self) -> Result<Dataset> {
        Dataset::new(self.x, self.s, self.y.as_slice().to_vec())
    }
}

/// Generate `(X, Y, S)` for replication `rep` of `spec` under base `seed`.
pub fn simulate(spec: &ScenarioSpec, seed: u64, rep: u64) -> Result<Simulated> {
    let data = Stage::Data as u64;
    let x = gen_covariates(spec, &mut rng::stream(seed, &[rep, 0, data]))?;
    let y = gen_response(spec.family, &x, &spec.beta0, spec.noise_sd, &mut rng::stream(seed, &[rep, 1, data]))?;
    let s = gen_surrogate(spec, &x, &y, &mut rng::stream(seed, &[rep, Stage::Surrogate as u64]))?;
    Ok(Simulated { x, y, s })
}

/// Column means and sample covariance.
pub fn sample_moments(x: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = x.nrows() as f64;
    let mean = x.row_mean().transpose();
    let mut centered = x.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = centered.tr_mul(&centered) / (n - 1.0);
    (mean, linalg::symmetrize(&cov))
}
