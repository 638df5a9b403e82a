//! Selection scores, budget normalisation and Bernoulli draws.

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::glm::GlmFamily;
use crate::linalg;
use crate::rng::Rng;

/// Lower bound on any inclusion probability after capping.
pub const MIN_PROBABILITY: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingPlan {
    pub pi: Vec<f64>,
    pub indicators: Vec<bool>,
    pub target_n: usize,
    pub realized_m: usize,
}

impl SamplingPlan {
    pub fn new(pi: Vec<f64>, indicators: Vec<bool>, target_n: usize) -> Self {
        let realized_m = indicators.iter().filter(|&&r| r).count();
        Self {
            pi,
            indicators,
            target_n,
            realized_m,
        }
    }

    /// Draw indicators for `pi`.
    pub fn draw(pi: Vec<f64>, target_n: usize, rng: &mut Rng) -> Self {
        let indicators = draw(&pi, rng);
        Self::new(pi, indicators, target_n)
    }

    pub fn selected(&self) -> Vec<usize> {
        self.indicators
            .iter()
            .enumerate()
            .filter_map(|(i, &r)| r.then_some(i))
            .collect()
    }

    /// Horvitz-Thompson weights `1/π` of the selected units, in
    /// [`selected`](Self::selected) order.
    pub fn ht_weights(&self) -> Vec<f64> {
        self.selected().into_iter().map(|i| 1.0 / self.pi[i]).collect()
    }
}

fn row_norms_of_solve(j: &DMatrix<f64>, x: &DMatrix<f64>) -> Result<DVector<f64>> {
    if j.nrows() != x.ncols() || j.ncols() != x.ncols() {
        return Err(Error::Dimension(format!(
            "information is {}x{} but X has {} columns",
            j.nrows(),
            j.ncols(),
            x.ncols()
        )));
    }
    let jinv = linalg::spd_inverse(j).map_err(|_| {
        Error::Singular("pilot information is singular; enlarge the pilot sample".into())
    })?;
    // rows of X J^{-1} are (J^{-1} x_i)^T since J is symmetric
    let z = x * jinv;
    Ok(DVector::from_iterator(z.nrows(), z.row_iter().map(|r| r.norm())))
}

/// `v_i = m_i ‖J⁻¹ x_i‖₂` with a supplied root-moment `m_i`.
pub fn osumcs_scores(root_moment: &DVector<f64>, j: &DMatrix<f64>, x: &DMatrix<f64>) -> Result<DVector<f64>> {
    if root_moment.len() != x.nrows() {
        return Err(Error::Dimension(format!(
            "{} root-moments for {} rows",
            root_moment.len(),
            x.nrows()
        )));
    }
    if root_moment.iter().any(|m| !(m.is_finite() && *m > 0.0)) {
        return Err(Error::Domain("root-moments must be positive and finite".into()));
    }
    let norms = row_norms_of_solve(j, x)?;
    Ok(root_moment.component_mul(&norms))
}

/// Model-based scores without a surrogate: `sqrt(b''(βᵀx_i)) ‖J⁻¹ x_i‖₂`.
pub fn osumc_scores(
    family: GlmFamily,
    beta_pilot: &DVector<f64>,
    j: &DMatrix<f64>,
    x: &DMatrix<f64>,
) -> Result<DVector<f64>> {
    if beta_pilot.len() != x.ncols() {
        return Err(Error::Dimension(format!(
            "beta has {} entries but X has {} columns",
            beta_pilot.len(),
            x.ncols()
        )));
    }
    let eta = x * beta_pilot;
    let root = eta.map(|t| family.variance(t).sqrt());
    let norms = row_norms_of_solve(j, x)?;
    Ok(root.component_mul(&norms))
}

/// Turn positive scores into inclusion probabilities summing to `n`.
///
/// Water-filling: start from `n v_i / Σv`; units above one are fixed at one
/// and the remaining budget is spread over the rest in proportion to `v`,
/// until nothing exceeds one. A final pass lifts anything below
/// [`MIN_PROBABILITY`] and takes the difference from the free units.
pub fn normalize_cap(v: &[f64], n: usize) -> Result<Vec<f64>> {
    let big_n = v.len();
    if n == 0 || n > big_n {
        return Err(Error::Config(format!("budget {n} must be in 1..={big_n}")));
    }
    if let Some(bad) = v.iter().find(|x| !(x.is_finite() && **x > 0.0)) {
        return Err(Error::Domain(format!("score {bad} is not positive and finite")));
    }
    if n == big_n {
        // water-filling ends with every unit capped; skip the roundoff
        return Ok(vec![1.0; big_n]);
    }
    let budget = n as f64;
    // Normalise first so huge or tiny score scales cannot overflow the sums.
    let vmax = v.iter().cloned().fold(0.0_f64, f64::max);
    let v: Vec<f64> = v.iter().map(|x| x / vmax).collect();

    #[derive(Clone, Copy, PartialEq)]
    enum State {
        Free,
        Capped,
        Floored,
    }
    let mut state = vec![State::Free; big_n];
    let mut pi = vec![0.0; big_n];

    let rescale = |state: &[State], pi: &mut [f64]| {
        let fixed: f64 = state
            .iter()
            .map(|s| match s {
                State::Capped => 1.0,
                State::Floored => MIN_PROBABILITY,
                State::Free => 0.0,
            })
            .sum();
        let free_mass: f64 = v
            .iter()
            .zip(state)
            .filter(|(_, s)| **s == State::Free)
            .map(|(x, _)| x)
            .sum();
        let c = (budget - fixed) / free_mass;
        for i in 0..big_n {
            pi[i] = match state[i] {
                State::Free => c * v[i],
                State::Capped => 1.0,
                State::Floored => MIN_PROBABILITY,
            };
        }
    };

    loop {
        if state.iter().all(|s| *s != State::Free) {
            break;
        }
        rescale(&state, &mut pi);
        let mut changed = false;
        for i in 0..big_n {
            if state[i] == State::Free && pi[i] > 1.0 {
                state[i] = State::Capped;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    loop {
        if state.iter().all(|s| *s != State::Free) {
            break;
        }
        let mut changed = false;
        for i in 0..big_n {
            if state[i] == State::Free && pi[i] < MIN_PROBABILITY {
                state[i] = State::Floored;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        rescale(&state, &mut pi);
    }
    for p in pi.iter_mut() {
        *p = p.clamp(MIN_PROBABILITY, 1.0);
    }
    Ok(pi)
}

/// Independent Bernoulli(π_i) indicators.
pub fn draw(pi: &[f64], rng: &mut Rng) -> Vec<bool> {
    pi.iter().map(|&p| rng.random::<f64>() < p).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn scalar_score_example() {
        let j = DMatrix::from_element(1, 1, 2.0);
        let x = DMatrix::from_column_slice(2, 1, &[4.0, -4.0]);
        let v = osumcs_scores(&DVector::from_element(2, 1.0), &j, &x).unwrap();
        assert!(close(v.as_slice(), &[2.0, 2.0], 1e-15));
    }

    #[test]
    fn toy_scores_match_hand_solve() {
        // J = [[2,1],[1,3]], J^{-1} = [[3,-1],[-1,2]] / 5
        let j = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 3.0]);
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let m = DVector::from_vec(vec![1.0, 2.0, 0.5]);
        let expected = [
            1.0 * (9.0_f64 + 1.0).sqrt() / 5.0,
            2.0 * (1.0_f64 + 4.0).sqrt() / 5.0,
            0.5 * (4.0_f64 + 1.0).sqrt() / 5.0,
        ];
        let v = osumcs_scores(&m, &j, &x).unwrap();
        assert!(close(v.as_slice(), &expected, 1e-14), "{v}");
    }

    #[test]
    fn constant_moment_cancels_after_normalisation() {
        let mut r = rng::from_seed(1);
        let x = DMatrix::from_fn(40, 3, |_, _| r.random_range(-2.0..2.0));
        let j = DMatrix::from_row_slice(3, 3, &[2.0, 0.3, 0.1, 0.3, 1.0, 0.0, 0.1, 0.0, 0.5]);
        let a = osumcs_scores(&DVector::from_element(40, 1.0), &j, &x).unwrap();
        let b = osumcs_scores(&DVector::from_element(40, 7.5), &j, &x).unwrap();
        let pa = normalize_cap(a.as_slice(), 10).unwrap();
        let pb = normalize_cap(b.as_slice(), 10).unwrap();
        assert!(close(&pa, &pb, 1e-12));
        assert_eq!(a.argmax().0, b.argmax().0);
    }

    #[test]
    fn osumc_examples() {
        let mut r = rng::from_seed(2);
        let x = DMatrix::from_fn(10, 2, |_, _| r.random_range(-2.0..2.0));
        let j = DMatrix::from_row_slice(2, 2, &[1.5, 0.2, 0.2, 0.8]);
        let beta = DVector::from_vec(vec![0.4, -0.3]);
        let norms = osumcs_scores(&DVector::from_element(10, 1.0), &j, &x).unwrap();

        let lin = osumc_scores(GlmFamily::Linear, &beta, &j, &x).unwrap();
        assert!(close(lin.as_slice(), norms.as_slice(), 1e-14));

        let logit = osumc_scores(GlmFamily::Logistic, &DVector::zeros(2), &j, &x).unwrap();
        assert!(close(logit.as_slice(), (&norms * 0.5).as_slice(), 1e-14));
    }

    #[test]
    fn osumc_equals_osumcs_with_exact_model_moment() {
        let mut r = rng::from_seed(3);
        let x = DMatrix::from_fn(25, 2, |_, _| r.random_range(-1.0..1.0));
        let j = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.1, 2.0]);
        let beta = DVector::from_vec(vec![0.5, 0.5]);
        let exact = (&x * &beta).map(|t| GlmFamily::Poisson.variance(t).sqrt());
        let a = osumcs_scores(&exact, &j, &x).unwrap();
        let b = osumc_scores(GlmFamily::Poisson, &beta, &j, &x).unwrap();
        assert!(close(a.as_slice(), b.as_slice(), 1e-14));
    }

    #[test]
    fn singular_information_is_reported() {
        let j = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]) * 0.0;
        let x = DMatrix::from_element(3, 2, 1.0);
        assert!(matches!(
            osumcs_scores(&DVector::from_element(3, 1.0), &j, &x),
            Err(Error::Singular(_))
        ));
    }

    #[test]
    fn normalize_examples() {
        assert!(close(&normalize_cap(&[1.0, 1.0, 2.0], 2).unwrap(), &[0.5, 0.5, 1.0], 1e-15));
        assert!(close(&normalize_cap(&[1.0, 9.0], 2).unwrap(), &[1.0, 1.0], 1e-15));
        assert!(close(&normalize_cap(&[3.0; 8], 4).unwrap(), &[0.5; 8], 1e-15));
    }

    #[test]
    fn normalize_errors() {
        assert!(normalize_cap(&[1.0, 2.0], 3).is_err());
        assert!(normalize_cap(&[1.0, 2.0], 0).is_err());
        assert!(normalize_cap(&[1.0, 0.0], 1).is_err());
    }

    #[test]
    fn heavy_tail_conserves_budget() {
        let mut v = vec![1e-9; 1000];
        v[0] = 1e12;
        v[1] = 5.0;
        let pi = normalize_cap(&v, 50).unwrap();
        let total: f64 = pi.iter().sum();
        assert!((total - 50.0).abs() <= 1e-9 * 50.0, "{total}");
        assert_eq!(pi[0], 1.0);
        assert!(pi.iter().all(|&p| (MIN_PROBABILITY..=1.0).contains(&p)));
    }

    #[test]
    fn floor_binds_and_budget_holds() {
        let mut v = vec![1.0; 100];
        v[7] = 1e-15;
        let pi = normalize_cap(&v, 10).unwrap();
        assert_eq!(pi[7], MIN_PROBABILITY);
        let total: f64 = pi.iter().sum();
        assert!((total - 10.0).abs() <= 1e-9 * 10.0);
    }

    #[test]
    fn all_ones_draw_selects_everything() {
        let mut r = rng::from_seed(4);
        assert!(draw(&[1.0; 50], &mut r).into_iter().all(|b| b));
    }

    #[test]
    fn draw_is_deterministic() {
        let pi = vec![0.3; 200];
        assert_eq!(draw(&pi, &mut rng::from_seed(5)), draw(&pi, &mut rng::from_seed(5)));
    }

    #[test]
    fn realized_size_concentrates() {
        let n = 10_000;
        let pi = vec![0.5; n];
        let bound = 4.0 * (n as f64 * 0.25).sqrt();
        for seed in 0..20 {
            let m = draw(&pi, &mut rng::from_seed(seed)).iter().filter(|&&b| b).count() as f64;
            assert!((m - 5000.0).abs() <= bound, "seed {seed}: {m}");
        }
    }

    #[test]
    fn horvitz_thompson_is_unbiased() {
        let mut r = rng::from_seed(6);
        let n = 200;
        let z: Vec<f64> = (0..n).map(|_| r.random_range(-3.0..5.0)).collect();
        let v: Vec<f64> = (0..n).map(|_| r.random_range(0.2..2.0)).collect();
        let pi = normalize_cap(&v, 40).unwrap();
        let truth: f64 = z.iter().sum();
        let reps = 2000;
        let est: Vec<f64> = (0..reps)
            .map(|k| {
                let ind = draw(&pi, &mut rng::from_seed(1000 + k));
                ind.iter().zip(&z).zip(&pi).filter(|((r, _), _)| **r).map(|((_, zi), p)| zi / p).sum()
            })
            .collect();
        let mean = est.iter().sum::<f64>() / reps as f64;
        let var = est.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (reps - 1) as f64;
        let se = (var / reps as f64).sqrt();
        assert!((mean - truth).abs() <= 3.0 * se, "mean {mean}, truth {truth}, se {se}");
    }

    #[test]
    fn plan_helpers() {
        let plan = SamplingPlan::new(vec![0.5, 1.0, 0.25], vec![true, false, true], 2);
        assert_eq!(plan.realized_m, 2);
        assert_eq!(plan.selected(), vec![0, 2]);
        assert_eq!(plan.ht_weights(), vec![2.0, 4.0]);
    }

    proptest! {
        #[test]
        fn normalize_invariants(v in proptest::collection::vec(1e-6f64..1e6, 2..200), frac in 0.01f64..1.0, c in 1e-3f64..1e3) {
            let n = ((v.len() as f64 * frac).ceil() as usize).clamp(1, v.len());
            let pi = normalize_cap(&v, n).unwrap();
            let total: f64 = pi.iter().sum();
            prop_assert!((total - n as f64).abs() <= 1e-9 * n as f64);
            prop_assert!(pi.iter().all(|&p| p > 0.0 && p <= 1.0));

            let scaled: Vec<f64> = v.iter().map(|x| x * c).collect();
            let pi2 = normalize_cap(&scaled, n).unwrap();
            prop_assert!(close(&pi, &pi2, 1e-12));

            // proportional among uncapped units
            let free: Vec<usize> = (0..v.len()).filter(|&i| pi[i] < 1.0 && pi[i] > MIN_PROBABILITY).collect();
            if free.len() >= 2 {
                let r0 = pi[free[0]] / v[free[0]];
                for &i in &free[1..] {
                    prop_assert!((pi[i] / v[i] - r0).abs() <= 1e-9 * r0);
                }
            }
        }
    }
}
