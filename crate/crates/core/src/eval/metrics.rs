use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use super::assign::{max_assignment, permutations, EXHAUSTIVE_MAX};
use crate::error::{Error, Result};

/// Correlation used inside MCC.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Correlation {
    #[default]
    Pearson,
    Spearman,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MccResult {
    /// Mean matched absolute correlation, in `[0, 1]`.
    pub score: f64,
    /// `assignment[i]` is the estimated dimension matched to true dimension `i`.
    pub assignment: Vec<usize>,
    /// `|corr(true_i, est_j)|`.
    pub correlation: Vec<Vec<f64>>,
}

fn pearson(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.sum() / n, b.sum() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return 0.0;
    }
    (sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0)
}

/// Ranks starting at 1; tied values share their average rank.
fn ranks(x: ArrayView1<f64>) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

fn rank_columns(x: ArrayView2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(x.dim());
    for (j, col) in x.axis_iter(Axis(1)).enumerate() {
        out.column_mut(j).assign(&ndarray::Array1::from(ranks(col)));
    }
    out
}

/// Absolute correlation between every true and every estimated column.
pub fn abs_correlation(
    z_true: ArrayView2<f64>,
    z_est: ArrayView2<f64>,
    kind: Correlation,
) -> Array2<f64> {
    let (a, b) = match kind {
        Correlation::Pearson => (z_true.to_owned(), z_est.to_owned()),
        Correlation::Spearman => (rank_columns(z_true), rank_columns(z_est)),
    };
    Array2::from_shape_fn((a.ncols(), b.ncols()), |(i, j)| {
        pearson(a.column(i), b.column(j)).abs()
    })
}

/// Mean correlation coefficient under the best one-to-one matching of dimensions.
pub fn mcc(
    z_true: ArrayView2<f64>,
    z_est: ArrayView2<f64>,
    kind: Correlation,
) -> Result<MccResult> {
    if z_true.dim() != z_est.dim() {
        return Err(Error::contract(format!(
            "mcc: shapes {:?} and {:?} differ",
            z_true.dim(),
            z_est.dim()
        )));
    }
    if z_true.nrows() < 3 || z_true.ncols() == 0 {
        return Err(Error::contract(format!(
            "mcc needs T >= 3 and d >= 1, got {:?}",
            z_true.dim()
        )));
    }
    let c = abs_correlation(z_true, z_est, kind);
    let assignment = max_assignment(&c);
    let score = assignment
        .iter()
        .enumerate()
        .map(|(i, &j)| c[[i, j]])
        .sum::<f64>()
        / c.nrows() as f64;
    Ok(MccResult {
        score,
        assignment,
        correlation: c.outer_iter().map(|r| r.to_vec()).collect(),
    })
}

/// Best accuracy over relabelings of the estimate; `perm[k]` is the true
/// label assigned to estimated label `k`.
pub fn env_accuracy(e_true: &[usize], e_est: &[usize], n_envs: usize) -> Result<(f64, Vec<usize>)> {
    if e_true.len() != e_est.len() || e_true.is_empty() {
        return Err(Error::contract(format!(
            "env_accuracy: lengths {} and {}",
            e_true.len(),
            e_est.len()
        )));
    }
    if n_envs > EXHAUSTIVE_MAX {
        return Err(Error::Unsupported(format!(
            "{n_envs} environments; exhaustive matching supports at most {EXHAUSTIVE_MAX}"
        )));
    }
    if let Some(&bad) = e_true.iter().chain(e_est).find(|&&e| e >= n_envs) {
        return Err(Error::contract(format!(
            "label {bad} out of range for {n_envs} environments"
        )));
    }
    let mut counts = vec![vec![0usize; n_envs]; n_envs];
    for (&t, &e) in e_true.iter().zip(e_est) {
        counts[e][t] += 1;
    }
    let mut best = (0usize, (0..n_envs).collect::<Vec<_>>());
    for p in permutations(n_envs) {
        let hits: usize = p.iter().enumerate().map(|(k, &t)| counts[k][t]).sum();
        if hits > best.0 {
            best = (hits, p);
        }
    }
    Ok((best.0 as f64 / e_true.len() as f64, best.1))
}

/// Mean squared entrywise error after relabeling the estimate with `perm`
/// (estimated label -> true label, as returned by [`env_accuracy`]).
pub fn transition_mse(a_true: &Array2<f64>, a_est: &Array2<f64>, perm: &[usize]) -> Result<f64> {
    let e = a_true.nrows();
    if a_true.dim() != (e, e) || a_est.dim() != (e, e) || perm.len() != e {
        return Err(Error::contract(format!(
            "transition_mse: shapes {:?} / {:?} with a permutation of length {}",
            a_true.dim(),
            a_est.dim(),
            perm.len()
        )));
    }
    let mut seen = vec![false; e];
    for &p in perm {
        if p >= e || std::mem::replace(&mut seen[p], true) {
            return Err(Error::contract(format!("{perm:?} is not a permutation")));
        }
    }
    let mut total = 0.0;
    for i in 0..e {
        for j in 0..e {
            let d = a_true[[perm[i], perm[j]]] - a_est[[i, j]];
            total += d * d;
        }
    }
    Ok(total / (e * e) as f64)
}

/// Elementwise mean squared and mean absolute errors.
pub fn forecast_errors(y_true: ArrayView2<f64>, y_pred: ArrayView2<f64>) -> Result<(f64, f64)> {
    if y_true.dim() != y_pred.dim() || y_true.is_empty() {
        return Err(Error::contract(format!(
            "forecast_errors: shapes {:?} and {:?}",
            y_true.dim(),
            y_pred.dim()
        )));
    }
    let n = y_true.len() as f64;
    let (mut se, mut ae) = (0.0, 0.0);
    for (&a, &b) in y_true.iter().zip(y_pred) {
        se += (a - b) * (a - b);
        ae += (a - b).abs();
    }
    Ok((se / n, ae / n))
}

fn centered(x: ArrayView2<f64>) -> DMatrix<f64> {
    let mean = x.mean_axis(Axis(0)).expect("non-empty");
    DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| x[[i, j]] - mean[j])
}

fn inv_sqrt(cov: DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(cov);
    let scale = eig
        .eigenvalues
        .map(|v| if v > 1e-12 { 1.0 / v.sqrt() } else { 0.0 });
    &eig.eigenvectors * DMatrix::from_diagonal(&scale) * eig.eigenvectors.transpose()
}

/// Mean canonical correlation between the two blocks: MCC after the best
/// linear alignment. A diagnostic for recovery up to an invertible linear map.
pub fn cca_mcc(z_true: ArrayView2<f64>, z_est: ArrayView2<f64>) -> Result<f64> {
    if z_true.dim() != z_est.dim() || z_true.nrows() < 3 {
        return Err(Error::contract(format!(
            "cca_mcc: shapes {:?} and {:?}",
            z_true.dim(),
            z_est.dim()
        )));
    }
    let (a, b) = (centered(z_true), centered(z_est));
    let t = a.nrows() as f64;
    let saa = a.transpose() * &a / t;
    let sbb = b.transpose() * &b / t;
    let sab = a.transpose() * &b / t;
    let m = inv_sqrt(saa) * sab * inv_sqrt(sbb);
    let sv = m.singular_values();
    Ok(sv.iter().map(|v| v.min(1.0)).sum::<f64>() / z_true.ncols() as f64)
}
