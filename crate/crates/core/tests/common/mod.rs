#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use osumcs::rng::Rng;

/// Weighted least squares through a QR factorisation of `sqrt(W) X`.
pub fn wls_qr(x: &DMatrix<f64>, y: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
    let mut xs = x.clone();
    let mut ys = y.clone();
    for i in 0..x.nrows() {
        let r = w[i].sqrt();
        xs.row_mut(i).scale_mut(r);
        ys[i] *= r;
    }
    let qr = xs.qr();
    let qty = qr.q().transpose() * ys;
    qr.r().solve_upper_triangular(&qty).expect("full column rank")
}

pub fn gaussian_matrix(rows: usize, cols: usize, rng: &mut Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

pub fn uniform_vector(len: usize, lo: f64, hi: f64, rng: &mut Rng) -> DVector<f64> {
    DVector::from_fn(len, |_, _| rng.random_range(lo..hi))
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len();
    if m % 2 == 1 {
        v[m / 2]
    } else {
        0.5 * (v[m / 2 - 1] + v[m / 2])
    }
}

/// Smallest eigenvalue of a symmetric matrix, by Jacobi rotations so the
/// check does not reuse the library's eigen-solver path.
pub fn min_eigenvalue_jacobi(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    let mut a = (m + m.transpose()) * 0.5;
    for _ in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).filter(|(i, j)| i != j).map(|(i, j)| a[(i, j)].powi(2)).sum();
        if off <= 1e-30 * a.norm_squared().max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[(p, q)].abs() < f64::MIN_POSITIVE {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * a[(p, q)]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[(i, i)]).fold(f64::INFINITY, f64::min)
}
