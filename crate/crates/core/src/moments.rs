//! Regression forest for the conditional root-moment
//! `sqrt(E[(Y − b'(βᵀX))² | S, X])`.
//!
//! The forest is trained on per-unit absolute residuals from the pilot fit
//! and its averaged prediction is used directly as the root-moment, floored
//! at a small positive value so every unit keeps a nonzero selection score.
//!
//! Feature layout: column 0 is the surrogate `S`, columns `1..=p` are `X`.
//! With a surrogate working fit `γ` the layout is `[S | S − Xγ | X]`.

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::glm::GlmFamily;
use crate::rng::{self, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForestParams {
    pub n_trees: usize,
    pub min_leaf: usize,
    /// `None` grows trees until `min_leaf` stops them.
    pub max_depth: Option<usize>,
    /// Features tried per split; `None` means `ceil(d / 3)`.
    pub mtry: Option<usize>,
    /// Prediction floor relative to the mean training target.
    pub floor_rel: f64,
    /// Add the pilot surrogate residual `S − Xγ` as a feature.
    pub residual_feature: bool,
}

impl Default for ForestParams {
    fn default() -> Self {
        Self {
            n_trees: 100,
            min_leaf: 5,
            max_depth: None,
            mtry: None,
            floor_rel: 1e-6,
            residual_feature: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Node {
    /// Rows with `feature value <= threshold` go to `left`.
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        value: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionTree {
    pub nodes: Vec<Node>,
}

impl RegressionTree {
    pub fn predict(&self, row: &[f64]) -> f64 {
        let mut at = 0;
        loop {
            match self.nodes[at] {
                Node::Leaf { value } => return value,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => at = if row[feature] <= threshold { left } else { right },
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn go(nodes: &[Node], at: usize) -> usize {
            match nodes[at] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + go(nodes, left).max(go(nodes, right)),
            }
        }
        go(&self.nodes, 0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentModel {
    pub trees: Vec<RegressionTree>,
    pub feature_count: usize,
    pub floor: f64,
    /// Surrogate working coefficients when the residual feature is used.
    #[serde(default)]
    pub surrogate_fit: Option<Vec<f64>>,
}

impl MomentModel {
    /// Raw forest average for one feature row, without the floor.
    pub fn predict_raw(&self, row: &[f64]) -> f64 {
        self.trees.iter().map(|t| t.predict(row)).sum::<f64>() / self.trees.len() as f64
    }

    pub fn predict_row(&self, row: &[f64]) -> f64 {
        self.predict_raw(row).max(self.floor)
    }

    /// Debug dump; not a stable format.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Per-unit `|Y − b'(βᵀx)|`.
pub fn residual_targets(
    family: GlmFamily,
    beta_pilot: &DVector<f64>,
    x_pilot: &DMatrix<f64>,
    y_pilot: &DVector<f64>,
) -> Result<DVector<f64>> {
    if x_pilot.ncols() != beta_pilot.len() || x_pilot.nrows() != y_pilot.len() {
        return Err(Error::Dimension(format!(
            "pilot X is {}x{}, beta has {} entries, Y has {}",
            x_pilot.nrows(),
            x_pilot.ncols(),
            beta_pilot.len(),
            y_pilot.len()
        )));
    }
    let eta = x_pilot * beta_pilot;
    Ok(DVector::from_fn(y_pilot.len(), |i, _| (y_pilot[i] - family.mean(eta[i])).abs()))
}

/// Feature matrix `[S | X]`.
pub fn features(s: &DVector<f64>, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    moment_features(s, x, None)
}

/// `[S | X]`, or `[S | S − Xγ | X]` when `gamma` is given.
pub fn moment_features(s: &DVector<f64>, x: &DMatrix<f64>, gamma: Option<&[f64]>) -> Result<DMatrix<f64>> {
    if s.len() != x.nrows() {
        return Err(Error::Dimension(format!(
            "surrogate has {} entries but X has {} rows",
            s.len(),
            x.nrows()
        )));
    }
    if let Some(g) = gamma {
        if g.len() != x.ncols() {
            return Err(Error::Dimension(format!("gamma has {} entries for {} columns", g.len(), x.ncols())));
        }
    }
    let lead = 1 + usize::from(gamma.is_some());
    let mut out = DMatrix::zeros(x.nrows(), x.ncols() + lead);
    let mut row = vec![0.0; x.ncols() + lead];
    for i in 0..x.nrows() {
        fill_row(&mut row, s[i], x, i, gamma);
        out.row_mut(i).copy_from_slice(&row);
    }
    Ok(out)
}

fn fill_row(row: &mut [f64], s: f64, x: &DMatrix<f64>, i: usize, gamma: Option<&[f64]>) {
    let p = x.ncols();
    row[0] = s;
    let lead = match gamma {
        Some(g) => {
            row[1] = s - (0..p).map(|j| x[(i, j)] * g[j]).sum::<f64>();
            2
        }
        None => 1,
    };
    for j in 0..p {
        row[j + lead] = x[(i, j)];
    }
}

/// Bootstrap regression forest with variance-reduction splits.
///
/// Each tree draws its own stream from a seed taken from `rng`, so the result
/// depends only on the data and that seed, not on thread scheduling.
pub fn fit_forest(
    features: &DMatrix<f64>,
    targets: &DVector<f64>,
    params: &ForestParams,
    rng: &mut Rng,
) -> Result<MomentModel> {
    let m = features.nrows();
    let d = features.ncols();
    if m == 0 {
        return Err(Error::Dimension("cannot fit a forest on zero rows".into()));
    }
    if targets.len() != m {
        return Err(Error::Dimension(format!(
            "{} feature rows but {} targets",
            m,
            targets.len()
        )));
    }
    if params.n_trees == 0 || params.min_leaf == 0 {
        return Err(Error::Config("forest needs n_trees >= 1 and min_leaf >= 1".into()));
    }
    if targets.iter().chain(features.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Domain("forest inputs must be finite".into()));
    }
    let mtry = params.mtry.unwrap_or(d.div_ceil(3)).clamp(1, d.max(1));
    let seed: u64 = rng.random();

    let columns: Vec<&[f64]> = (0..d)
        .map(|j| {
            let start = j * m;
            &features.as_slice()[start..start + m]
        })
        .collect();
    let y = targets.as_slice();

    let trees = (0..params.n_trees)
        .into_par_iter()
        .map(|t| {
            let mut trng = rng::stream(seed, &[t as u64]);
            let sample: Vec<usize> = (0..m).map(|_| trng.random_range(0..m)).collect();
            grow_tree(&columns, y, sample, mtry, params, &mut trng)
        })
        .collect();

    let mean_target = targets.mean();
    let floor = (params.floor_rel * mean_target).max(f64::MIN_POSITIVE.sqrt());
    Ok(MomentModel {
        trees,
        feature_count: d,
        floor,
        surrogate_fit: None,
    })
}

struct Pending {
    node: usize,
    rows: Vec<usize>,
    depth: usize,
}

fn grow_tree(
    columns: &[&[f64]],
    y: &[f64],
    sample: Vec<usize>,
    mtry: usize,
    params: &ForestParams,
    rng: &mut Rng,
) -> RegressionTree {
    let d = columns.len();
    let mut nodes = vec![Node::Leaf { value: 0.0 }];
    let mut stack = vec![Pending {
        node: 0,
        rows: sample,
        depth: 0,
    }];
    while let Some(Pending { node, rows, depth }) = stack.pop() {
        let n = rows.len() as f64;
        let sum: f64 = rows.iter().map(|&i| y[i]).sum();
        let mean = sum / n;
        nodes[node] = Node::Leaf { value: mean };

        let depth_ok = params.max_depth.is_none_or(|md| depth < md);
        if rows.len() < 2 * params.min_leaf || !depth_ok {
            continue;
        }
        let sse: f64 = rows.iter().map(|&i| (y[i] - mean).powi(2)).sum();
        if sse <= 1e-14 * (1.0 + sum.abs()) {
            continue;
        }

        let candidates = index::sample(rng, d, mtry);
        let mut best: Option<(f64, usize, f64)> = None;
        let mut order = rows.clone();
        for f in candidates.iter() {
            let col = columns[f];
            order.sort_by(|&a, &b| col[a].total_cmp(&col[b]));
            if let Some((gain, threshold)) = best_split(col, y, &order, sum, params.min_leaf) {
                if best.is_none_or(|(g, _, _)| gain > g) {
                    best = Some((gain, f, threshold));
                }
            }
        }
        let Some((gain, feature, threshold)) = best else {
            continue;
        };
        if gain <= 1e-12 * sse {
            continue;
        }
        let (left_rows, right_rows): (Vec<usize>, Vec<usize>) =
            rows.into_iter().partition(|&i| columns[feature][i] <= threshold);
        let left = nodes.len();
        nodes.push(Node::Leaf { value: 0.0 });
        let right = nodes.len();
        nodes.push(Node::Leaf { value: 0.0 });
        nodes[node] = Node::Split {
            feature,
            threshold,
            left,
            right,
        };
        stack.push(Pending {
            node: right,
            rows: right_rows,
            depth: depth + 1,
        });
        stack.push(Pending {
            node: left,
            rows: left_rows,
            depth: depth + 1,
        });
    }
    RegressionTree { nodes }
}

/// Best split of rows sorted by `col`; returns `(sse reduction, threshold)`.
fn best_split(col: &[f64], y: &[f64], order: &[usize], total: f64, min_leaf: usize) -> Option<(f64, f64)> {
    let n = order.len();
    let base = total * total / n as f64;
    let mut left_sum = 0.0;
    let mut best: Option<(f64, f64)> = None;
    for k in 1..n {
        left_sum += y[order[k - 1]];
        if k < min_leaf || n - k < min_leaf {
            continue;
        }
        let lo = col[order[k - 1]];
        let hi = col[order[k]];
        if lo >= hi {
            continue;
        }
        let right_sum = total - left_sum;
        let gain = left_sum * left_sum / k as f64 + right_sum * right_sum / (n - k) as f64 - base;
        if best.is_none_or(|(g, _)| gain > g) {
            let mid = lo + 0.5 * (hi - lo);
            let threshold = if mid < hi { mid } else { lo };
            best = Some((gain, threshold));
        }
    }
    best
}

/// Floored forest prediction for every unit.
pub fn predict_root_moment(model: &MomentModel, s: &DVector<f64>, x: &DMatrix<f64>) -> Result<DVector<f64>> {
    let gamma = model.surrogate_fit.as_deref();
    let lead = 1 + usize::from(gamma.is_some());
    if x.ncols() + lead != model.feature_count || gamma.is_some_and(|g| g.len() != x.ncols()) {
        return Err(Error::Dimension(format!(
            "model trained on {} features, got {} covariates",
            model.feature_count,
            x.ncols()
        )));
    }
    if s.len() != x.nrows() {
        return Err(Error::Dimension(format!(
            "surrogate has {} entries but X has {} rows",
            s.len(),
            x.nrows()
        )));
    }
    let width = model.feature_count;
    let out: Vec<f64> = (0..x.nrows())
        .into_par_iter()
        .map_init(
            || vec![0.0; width],
            |row, i| {
                fill_row(row, s[i], x, i, gamma);
                model.predict_row(row)
            },
        )
        .collect();
    Ok(DVector::from_vec(out))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(n_trees: usize, min_leaf: usize) -> ForestParams {
        ForestParams {
            n_trees,
            min_leaf,
            ..ForestParams::default()
        }
    }

    #[test]
    fn residual_examples() {
        let r = residual_targets(GlmFamily::Linear, &DVector::from_vec(vec![1.0]), &DMatrix::from_element(1, 1, 2.0), &DVector::from_vec(vec![5.0])).unwrap();
        assert_eq!(r[0], 3.0);
        let r = residual_targets(GlmFamily::Logistic, &DVector::zeros(1), &DMatrix::from_element(1, 1, 0.7), &DVector::from_vec(vec![1.0])).unwrap();
        assert_eq!(r[0], 0.5);
        let r = residual_targets(GlmFamily::Poisson, &DVector::zeros(1), &DMatrix::from_element(1, 1, -1.3), &DVector::from_vec(vec![0.0])).unwrap();
        assert_eq!(r[0], 1.0);
    }

    #[test]
    fn residual_dimension_error() {
        let r = residual_targets(GlmFamily::Linear, &DVector::zeros(2), &DMatrix::zeros(3, 1), &DVector::zeros(3));
        assert!(matches!(r, Err(Error::Dimension(_))));
    }

    #[test]
    fn constant_targets_predict_constant() {
        let mut rng = rng::from_seed(1);
        let feats = DMatrix::from_fn(50, 3, |_, _| rng.random::<f64>());
        let targets = DVector::from_element(50, 0.7);
        let model = fit_forest(&feats, &targets, &params(20, 5), &mut rng).unwrap();
        assert!(model.trees.iter().all(|t| t.nodes.len() == 1));
        let pred = predict_root_moment(&model, &DVector::from_element(10, 3.0), &DMatrix::from_element(10, 2, -4.0)).unwrap();
        assert!(pred.iter().all(|&p| (p - 0.7).abs() < 1e-15));
    }

    #[test]
    fn single_row_forest() {
        let mut rng = rng::from_seed(2);
        let model = fit_forest(&DMatrix::from_element(1, 2, 1.0), &DVector::from_element(1, 4.2), &params(5, 1), &mut rng).unwrap();
        assert!(model.trees.iter().all(|t| t.nodes == vec![Node::Leaf { value: 4.2 }]));
        assert_eq!(model.predict_row(&[0.0, 0.0]), 4.2);
    }

    #[test]
    fn empty_training_set_is_an_error() {
        let mut rng = rng::from_seed(2);
        assert!(fit_forest(&DMatrix::zeros(0, 2), &DVector::zeros(0), &params(5, 1), &mut rng).is_err());
    }

    #[test]
    fn floor_replaces_non_positive_average() {
        let model = MomentModel {
            trees: vec![RegressionTree { nodes: vec![Node::Leaf { value: -1.0 }] }, RegressionTree { nodes: vec![Node::Leaf { value: 0.5 }] }],
            feature_count: 2,
            floor: 1e-3,
            surrogate_fit: None,
        };
        let pred = predict_root_moment(&model, &DVector::zeros(3), &DMatrix::zeros(3, 1)).unwrap();
        assert!(pred.iter().all(|&p| p == 1e-3));
    }

    #[test]
    fn ties_at_threshold_go_left() {
        let tree = RegressionTree {
            nodes: vec![
                Node::Split { feature: 0, threshold: 1.0, left: 1, right: 2 },
                Node::Leaf { value: -1.0 },
                Node::Leaf { value: 1.0 },
            ],
        };
        assert_eq!(tree.predict(&[1.0]), -1.0);
        assert_eq!(tree.predict(&[1.0 + f64::EPSILON]), 1.0);
    }

    #[test]
    fn threshold_separates_adjacent_floats() {
        let lo = 1.0;
        let hi = lo + f64::EPSILON;
        let col = [lo, hi];
        let y = [0.0, 1.0];
        let (_, t) = best_split(&col, &y, &[0, 1], 1.0, 1).unwrap();
        assert!(lo <= t && t < hi);
    }

    #[test]
    fn overfits_identity_with_deep_trees() {
        let mut rng = rng::from_seed(3);
        let xs: Vec<f64> = (0..200).map(|_| rng.random_range(1.0..10.0)).collect();
        let feats = DMatrix::from_column_slice(200, 1, &xs);
        let targets = DVector::from_vec(xs.clone());
        let model = fit_forest(&feats, &targets, &params(50, 1), &mut rng).unwrap();
        let good = xs
            .iter()
            .filter(|&&x| (model.predict_row(&[x]) - x).abs() <= 0.1 * x)
            .count();
        assert!(good >= 180, "{good} of 200 within 10%");
    }

    #[test]
    fn deterministic_given_seed() {
        let mut rng = rng::from_seed(4);
        let feats = DMatrix::from_fn(120, 4, |_, _| rng.random::<f64>());
        let targets = DVector::from_fn(120, |i, _| feats[(i, 1)] * 2.0 + feats[(i, 3)]);
        let a = fit_forest(&feats, &targets, &params(30, 3), &mut rng::from_seed(9)).unwrap();
        let b = fit_forest(&feats, &targets, &params(30, 3), &mut rng::from_seed(9)).unwrap();
        let c = fit_forest(&feats, &targets, &params(30, 3), &mut rng::from_seed(10)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
    }

    #[test]
    fn json_dump_roundtrips() {
        let mut rng = rng::from_seed(5);
        let feats = DMatrix::from_fn(40, 2, |_, _| rng.random::<f64>());
        let targets = DVector::from_fn(40, |i, _| feats[(i, 0)]);
        let model = fit_forest(&feats, &targets, &params(3, 2), &mut rng).unwrap();
        let back = MomentModel::from_json(&model.to_json().unwrap()).unwrap();
        assert_eq!(model, back);
    }

    #[test]
    fn predict_dimension_mismatch() {
        let mut rng = rng::from_seed(6);
        let model = fit_forest(&DMatrix::from_element(10, 3, 1.0), &DVector::from_element(10, 1.0), &params(2, 1), &mut rng).unwrap();
        assert!(predict_root_moment(&model, &DVector::zeros(4), &DMatrix::zeros(4, 3)).is_err());
        assert!(predict_root_moment(&model, &DVector::zeros(3), &DMatrix::zeros(4, 2)).is_err());
    }

    #[test]
    fn max_depth_is_respected() {
        let mut rng = rng::from_seed(7);
        let feats = DMatrix::from_fn(300, 2, |_, _| rng.random::<f64>());
        let targets = DVector::from_fn(300, |i, _| feats[(i, 0)].sin() + feats[(i, 1)]);
        let p = ForestParams { max_depth: Some(3), ..params(10, 1) };
        let model = fit_forest(&feats, &targets, &p, &mut rng).unwrap();
        assert!(model.trees.iter().all(|t| t.depth() <= 3));
    }

    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut k = 0;
        while k < idx.len() {
            let mut e = k;
            while e + 1 < idx.len() && v[idx[e + 1]] == v[idx[k]] {
                e += 1;
            }
            let avg = (k + e) as f64 / 2.0;
            for &i in &idx[k..=e] {
                r[i] = avg;
            }
            k = e + 1;
        }
        r
    }

    fn pearson(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let ma = a.iter().sum::<f64>() / n;
        let mb = b.iter().sum::<f64>() / n;
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    #[test]
    fn monotone_signal_is_rank_correlated() {
        let mut rng = rng::from_seed(8);
        let m = 500;
        let feats = DMatrix::<f64>::from_fn(m, 4, |_, _| rng.random_range(-1.0..1.0));
        let targets = DVector::from_fn(m, |i, _| feats[(i, 2)].exp() + 0.3 * rng.random::<f64>());
        let model = fit_forest(&feats, &targets, &ForestParams::default(), &mut rng).unwrap();

        let grid = DMatrix::from_fn(500, 4, |i, j| if j == 2 { -1.0 + 2.0 * i as f64 / 499.0 } else { rng.random_range(-1.0..1.0) });
        let preds: Vec<f64> = (0..500)
            .map(|i| model.predict_row(grid.row(i).transpose().as_slice()))
            .collect();
        let signal: Vec<f64> = (0..500).map(|i| grid[(i, 2)]).collect();
        let rho = pearson(&ranks(&preds), &ranks(&signal));
        assert!(rho >= 0.5, "spearman {rho}");
    }

    #[test]
    fn beats_constant_predictor_in_sample() {
        let mut rng = rng::from_seed(11);
        let m = 400;
        let feats = DMatrix::<f64>::from_fn(m, 3, |_, _| rng.random_range(-2.0..2.0));
        let targets = DVector::from_fn(m, |i, _| (feats[(i, 0)] + 0.5 * feats[(i, 1)]).abs() + 0.2 * rng.random::<f64>());
        let model = fit_forest(&feats, &targets, &ForestParams::default(), &mut rng).unwrap();
        let mean = targets.mean();
        let mut mae_forest = 0.0;
        let mut mae_const = 0.0;
        for i in 0..m {
            let row: Vec<f64> = feats.row(i).iter().cloned().collect();
            mae_forest += (model.predict_row(&row) - targets[i]).abs();
            mae_const += (mean - targets[i]).abs();
        }
        assert!(mae_forest <= mae_const, "{mae_forest} vs {mae_const}");
    }
}
