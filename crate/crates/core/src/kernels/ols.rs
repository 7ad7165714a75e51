//! Least squares on labeled designs with deterministic collinearity handling
//! and cluster-robust (CR1) covariance.

use nalgebra::DMatrix;

use super::design::DesignMatrix;
use crate::error::{Error, Result};

/// Relative pivot tolerance: a column is dropped when its residual norm after
/// projection on earlier retained columns falls below `PIVOT_TOL` times the
/// largest original column norm.
const PIVOT_TOL: f64 = 1e-9;

/// Options for [`least_squares_fit_opts`].
#[derive(Debug, Clone)]
pub struct OlsOptions {
    /// Compute the cluster-robust covariance (skip for bootstrap pipelines
    /// that only need point estimates).
    pub compute_vcov: bool,
    /// Degrees of freedom absorbed upstream (fixed effects removed by
    /// demeaning), counted in the small-sample correction.
    pub absorbed_df: usize,
}

impl Default for OlsOptions {
    fn default() -> Self {
        Self {
            compute_vcov: true,
            absorbed_df: 0,
        }
    }
}

/// Result of a least-squares fit. Coefficient and covariance entries of
/// dropped columns are zero; `retained` lists the surviving column indices.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub coefficients: Vec<f64>,
    pub residuals: Vec<f64>,
    /// Cluster-robust covariance (q x q, zero rows/columns at dropped
    /// entries); zero-sized when `compute_vcov` was off.
    pub vcov: DMatrix<f64>,
    pub dropped_columns: Vec<String>,
    pub retained: Vec<usize>,
    pub n: usize,
    pub n_clusters: usize,
}

impl FitResult {
    pub fn se(&self, j: usize) -> f64 {
        if self.vcov.nrows() > j {
            self.vcov[(j, j)].max(0.0).sqrt()
        } else {
            f64::NAN
        }
    }

    pub fn coefficient(&self, j: usize) -> f64 {
        self.coefficients[j]
    }
}

/// OLS of `y` on `x` with cluster-robust covariance.
///
/// Rank-deficient columns are dropped deterministically by left-to-right
/// pivoting and reported in `dropped_columns`. The covariance is the CR1
/// sandwich with small-sample factor `G/(G-1) * (n-1)/(n-q)` over `G`
/// clusters.
pub fn least_squares_fit(x: &DesignMatrix, y: &[f64], clusters: &[usize]) -> Result<FitResult> {
    least_squares_fit_opts(x, y, clusters, &OlsOptions::default())
}

pub fn least_squares_fit_opts(
    x: &DesignMatrix,
    y: &[f64],
    clusters: &[usize],
    options: &OlsOptions,
) -> Result<FitResult> {
    let n = x.n();
    let q = x.q();
    if y.len() != n || clusters.len() != n {
        return Err(Error::InvalidConfig(format!(
            "length mismatch: design n={n}, y={}, clusters={}",
            y.len(),
            clusters.len()
        )));
    }

    // Gram matrix and X'y.
    let gram = gram_matrix(x);
    let xty: Vec<f64> = (0..q).map(|j| dot(x.col(j), y)).collect();

    let chol = pivoted_cholesky(&gram, q)?;
    let retained = chol.retained.clone();
    let k = retained.len();
    if n < k {
        return Err(Error::InvalidConfig(format!(
            "n={n} smaller than retained columns {k}"
        )));
    }

    // Solve for retained coefficients.
    let rhs: Vec<f64> = retained.iter().map(|&j| xty[j]).collect();
    let beta_r = chol.solve(&rhs);

    let mut coefficients = vec![0.0; q];
    for (idx, &j) in retained.iter().enumerate() {
        coefficients[j] = beta_r[idx];
    }

    // Residuals.
    let mut residuals = y.to_vec();
    for (idx, &j) in retained.iter().enumerate() {
        let b = beta_r[idx];
        if b != 0.0 {
            let col = x.col(j);
            for i in 0..n {
                residuals[i] -= b * col[i];
            }
        }
    }

    let dropped_columns: Vec<String> = (0..q)
        .filter(|j| !retained.contains(j))
        .map(|j| x.labels()[j].clone())
        .collect();

    let n_clusters = clusters.iter().copied().max().map_or(0, |m| m + 1);
    let n_distinct = {
        let mut seen = vec![false; n_clusters];
        let mut c = 0usize;
        for &g in clusters {
            if !seen[g] {
                seen[g] = true;
                c += 1;
            }
        }
        c
    };

    let vcov = if options.compute_vcov {
        if n_distinct < 2 {
            return Err(Error::FewerClustersThanTwo(n_distinct));
        }
        cluster_vcov(
            x,
            &residuals,
            clusters,
            n_clusters,
            n_distinct,
            &chol,
            options.absorbed_df,
            q,
        )
    } else {
        DMatrix::zeros(0, 0)
    };

    Ok(FitResult {
        coefficients,
        residuals,
        vcov,
        dropped_columns,
        retained,
        n,
        n_clusters: n_distinct,
    })
}

fn gram_matrix(x: &DesignMatrix) -> Vec<f64> {
    let q = x.q();
    let mut gram = vec![0.0; q * q];
    for j in 0..q {
        for l in 0..=j {
            let v = dot(x.col(j), x.col(l));
            gram[j * q + l] = v;
            gram[l * q + j] = v;
        }
    }
    gram
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Two-lane accumulation: cheap and stable enough for well-scaled designs.
    let mut s0 = 0.0;
    let mut s1 = 0.0;
    let chunks = a.len() / 2 * 2;
    let mut i = 0;
    while i < chunks {
        s0 += a[i] * b[i];
        s1 += a[i + 1] * b[i + 1];
        i += 2;
    }
    if a.len() % 2 == 1 {
        s0 += a[a.len() - 1] * b[a.len() - 1];
    }
    s0 + s1
}

/// Left-to-right Cholesky of a Gram matrix with pivot drops. No column
/// exchanges: columns are processed in order so the retained set (and hence
/// any collinearity report) is deterministic.
pub(crate) struct PivotedCholesky {
    pub retained: Vec<usize>,
    /// Lower factor over retained columns, row-major k x k.
    l: Vec<f64>,
    k: usize,
}

pub(crate) fn pivoted_cholesky(gram: &[f64], q: usize) -> Result<PivotedCholesky> {
    let max_diag = (0..q)
        .map(|j| gram[j * q + j])
        .fold(0.0f64, f64::max)
        .max(0.0);
    let tol = PIVOT_TOL * max_diag.sqrt();

    let mut retained: Vec<usize> = Vec::new();
    let mut l: Vec<f64> = Vec::new(); // row-major, grows one row per retained column
    for j in 0..q {
        let k = retained.len();
        let mut row = vec![0.0; k + 1];
        for (idx, &rj) in retained.iter().enumerate() {
            let mut v = gram[j * q + rj];
            for m in 0..idx {
                v -= row[m] * l[idx * (idx + 1) / 2 + m];
            }
            row[idx] = v / l[idx * (idx + 1) / 2 + idx];
        }
        let mut d = gram[j * q + j];
        for m in 0..k {
            d -= row[m] * row[m];
        }
        let pivot = d.max(0.0).sqrt();
        if pivot <= tol {
            continue; // dropped for collinearity
        }
        row[k] = pivot;
        l.extend_from_slice(&row);
        retained.push(j);
    }
    if retained.is_empty() {
        return Err(Error::RankZero);
    }
    let k = retained.len();
    Ok(PivotedCholesky { retained, l, k })
}

impl PivotedCholesky {
    fn lval(&self, r: usize, c: usize) -> f64 {
        self.l[r * (r + 1) / 2 + c]
    }

    /// Solve (L L') b = rhs for the retained system.
    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let k = self.k;
        let mut z = vec![0.0; k];
        for r in 0..k {
            let mut v = rhs[r];
            for c in 0..r {
                v -= self.lval(r, c) * z[c];
            }
            z[r] = v / self.lval(r, r);
        }
        let mut b = vec![0.0; k];
        for r in (0..k).rev() {
            let mut v = z[r];
            for c in r + 1..k {
                v -= self.lval(c, r) * b[c];
            }
            b[r] = v / self.lval(r, r);
        }
        b
    }

    /// Inverse of the retained Gram matrix.
    pub fn inverse(&self) -> DMatrix<f64> {
        let k = self.k;
        let mut inv = DMatrix::zeros(k, k);
        for col in 0..k {
            let mut e = vec![0.0; k];
            e[col] = 1.0;
            let b = self.solve(&e);
            for r in 0..k {
                inv[(r, col)] = b[r];
            }
        }
        // Symmetrize against round-off.
        for r in 0..k {
            for c in 0..r {
                let v = 0.5 * (inv[(r, c)] + inv[(c, r)]);
                inv[(r, c)] = v;
                inv[(c, r)] = v;
            }
        }
        inv
    }
}

#[allow(clippy::too_many_arguments)]
fn cluster_vcov(
    x: &DesignMatrix,
    residuals: &[f64],
    clusters: &[usize],
    n_cluster_ids: usize,
    n_distinct: usize,
    chol: &PivotedCholesky,
    absorbed_df: usize,
    q: usize,
) -> DMatrix<f64> {
    let retained = &chol.retained;
    let k = retained.len();
    let n = residuals.len();

    // Cluster score sums s_c = sum_{i in c} x_i e_i over retained columns.
    let mut scores = vec![0.0; n_cluster_ids * k];
    for (idx, &j) in retained.iter().enumerate() {
        let col = x.col(j);
        for i in 0..n {
            scores[clusters[i] * k + idx] += col[i] * residuals[i];
        }
    }
    let mut meat = DMatrix::zeros(k, k);
    for c in 0..n_cluster_ids {
        let s = &scores[c * k..(c + 1) * k];
        for r in 0..k {
            if s[r] == 0.0 {
                continue;
            }
            for l in 0..=r {
                meat[(r, l)] += s[r] * s[l];
            }
        }
    }
    for r in 0..k {
        for l in r + 1..k {
            meat[(r, l)] = meat[(l, r)];
        }
    }

    let inv = chol.inverse();
    let g = n_distinct as f64;
    let nf = n as f64;
    let qf = (k + absorbed_df) as f64;
    let dof = (nf - qf).max(1.0);
    let factor = g / (g - 1.0) * (nf - 1.0) / dof;
    let vk = factor * (&inv * meat * &inv);

    // Scatter back to the full q x q layout.
    let mut v = DMatrix::zeros(q, q);
    for (ri, &rj) in retained.iter().enumerate() {
        for (ci, &cj) in retained.iter().enumerate() {
            v[(rj, cj)] = vk[(ri, ci)];
        }
    }
    v
}
