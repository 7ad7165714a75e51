//! Binary and multinomial logistic regression by iteratively reweighted
//! least squares, with quasi-separation detection and a ridge fallback.

use nalgebra::{DMatrix, DVector};

use super::design::DesignMatrix;
use super::ols::pivoted_cholesky;
use crate::error::{Error, Result};

const SCORE_TOL: f64 = 1e-8;
const MAX_ITER: usize = 100;
const PROB_FLOOR: f64 = 1e-10;
const RIDGE: f64 = 1e-8;

/// Link function of a fitted generalized propensity score model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GpsLink {
    Logit,
    /// Softmax over `classes` categories, class 0 as reference.
    Softmax { classes: usize },
}

/// Fitted propensity model. Binary fits store `n` fitted probabilities;
/// softmax fits store `n * k` row-major class probabilities and coefficients
/// for classes `1..k` stacked by class.
#[derive(Debug, Clone)]
pub struct GpsModel {
    pub link: GpsLink,
    pub coefficients: Vec<f64>,
    pub column_labels: Vec<String>,
    pub retained: Vec<usize>,
    pub dropped_columns: Vec<String>,
    pub fitted: Vec<f64>,
    /// Some fitted probability left (1e-10, 1-1e-10): the fit is returned with
    /// capped probabilities but must not be used for inverse weighting.
    pub quasi_separated: bool,
    pub ridged: bool,
    pub converged: bool,
    pub iterations: usize,
}

impl GpsModel {
    /// Fitted probability for a new covariate row (binary link).
    pub fn predict_binary(&self, row: &[f64]) -> f64 {
        let eta: f64 = row
            .iter()
            .zip(&self.coefficients)
            .map(|(x, b)| x * b)
            .sum();
        cap(expit(eta))
    }

    /// Fitted class probabilities for a new covariate row (softmax link).
    pub fn predict_classes(&self, row: &[f64]) -> Vec<f64> {
        let k = match self.link {
            GpsLink::Softmax { classes } => classes,
            GpsLink::Logit => 2,
        };
        let q = row.len();
        let mut eta = vec![0.0; k];
        for class in 1..k {
            let coef = &self.coefficients[(class - 1) * q..class * q];
            eta[class] = row.iter().zip(coef).map(|(x, b)| x * b).sum();
        }
        softmax(&eta)
    }

    pub fn max_fitted(&self) -> f64 {
        self.fitted.iter().copied().fold(0.0, f64::max)
    }
}

fn expit(eta: f64) -> f64 {
    1.0 / (1.0 + (-eta.clamp(-35.0, 35.0)).exp())
}

fn cap(p: f64) -> f64 {
    p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR)
}

fn softmax(eta: &[f64]) -> Vec<f64> {
    let m = eta.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let ex: Vec<f64> = eta.iter().map(|e| (e - m).exp()).collect();
    let s: f64 = ex.iter().sum();
    ex.iter().map(|e| e / s).collect()
}

/// Bernoulli maximum likelihood by IRLS.
///
/// Converges when the largest absolute score falls below `1e-8`, capped at
/// 100 iterations. Collinear columns are dropped by the deterministic
/// left-to-right rule of the least-squares kernel. A non-invertible weighted
/// Hessian gets a `1e-8` ridge on its diagonal and is flagged.
pub fn binary_logit_fit(
    x: &DesignMatrix,
    labels: &[u8],
    _clusters: &[usize],
) -> Result<GpsModel> {
    let n = x.n();
    if labels.len() != n {
        return Err(Error::InvalidConfig(format!(
            "labels has {} rows, design has {n}",
            labels.len()
        )));
    }
    let ones = labels.iter().filter(|&&v| v == 1).count();
    if ones == 0 || ones == n {
        return Err(Error::SingleClass);
    }

    // Fix the retained column set from the unweighted Gram.
    let q = x.q();
    let gram = gram(x);
    let chol = pivoted_cholesky(&gram, q)?;
    let retained = chol.retained.clone();
    let k = retained.len();

    let mut beta = vec![0.0f64; k];
    let mut p = vec![0.0f64; n];
    let mut ridged = false;
    let mut converged = false;
    let mut iterations = 0;

    for iter in 1..=MAX_ITER {
        iterations = iter;
        // eta, p
        for i in 0..n {
            let mut eta = 0.0;
            for (idx, &j) in retained.iter().enumerate() {
                eta += x.col(j)[i] * beta[idx];
            }
            p[i] = expit(eta);
        }
        // score = X'(y - p)
        let mut score = vec![0.0f64; k];
        for (idx, &j) in retained.iter().enumerate() {
            let col = x.col(j);
            let mut s = 0.0;
            for i in 0..n {
                s += col[i] * (labels[i] as f64 - p[i]);
            }
            score[idx] = s;
        }
        if score.iter().all(|s| s.abs() < SCORE_TOL) {
            converged = true;
            break;
        }
        // Hessian = X' W X, W = p(1-p)
        let mut h = DMatrix::zeros(k, k);
        for (ri, &rj) in retained.iter().enumerate() {
            for (ci, &cj) in retained.iter().enumerate().take(ri + 1) {
                let (a, b) = (x.col(rj), x.col(cj));
                let mut v = 0.0;
                for i in 0..n {
                    v += a[i] * b[i] * p[i] * (1.0 - p[i]);
                }
                h[(ri, ci)] = v;
                h[(ci, ri)] = v;
            }
        }
        let step = match h.clone().cholesky() {
            Some(c) => c.solve(&DVector::from_column_slice(&score)),
            None => {
                ridged = true;
                for d in 0..k {
                    h[(d, d)] += RIDGE;
                }
                match h.cholesky() {
                    Some(c) => c.solve(&DVector::from_column_slice(&score)),
                    None => return Err(Error::RankZero),
                }
            }
        };
        for idx in 0..k {
            beta[idx] += step[idx];
        }
    }

    // Final fitted probabilities and separation check.
    for i in 0..n {
        let mut eta = 0.0;
        for (idx, &j) in retained.iter().enumerate() {
            eta += x.col(j)[i] * beta[idx];
        }
        p[i] = expit(eta);
    }
    let quasi_separated = p
        .iter()
        .any(|&v| v <= PROB_FLOOR || v >= 1.0 - PROB_FLOOR);
    for v in p.iter_mut() {
        *v = cap(*v);
    }

    let mut coefficients = vec![0.0; q];
    for (idx, &j) in retained.iter().enumerate() {
        coefficients[j] = beta[idx];
    }
    let dropped_columns = (0..q)
        .filter(|j| !retained.contains(j))
        .map(|j| x.labels()[j].clone())
        .collect();

    Ok(GpsModel {
        link: GpsLink::Logit,
        coefficients,
        column_labels: x.labels().to_vec(),
        retained,
        dropped_columns,
        fitted: p,
        quasi_separated,
        ridged,
        converged,
        iterations,
    })
}

/// Softmax maximum likelihood with class 0 as reference, by Newton steps on
/// the stacked (k-1)·q coefficient vector. Same convergence contract as the
/// binary fit.
pub fn multinomial_logit_fit(x: &DesignMatrix, labels: &[usize], k: usize) -> Result<GpsModel> {
    let n = x.n();
    if labels.len() != n {
        return Err(Error::InvalidConfig(format!(
            "labels has {} rows, design has {n}",
            labels.len()
        )));
    }
    if k < 2 {
        return Err(Error::InvalidConfig("need at least 2 classes".into()));
    }
    for class in 0..k {
        if !labels.iter().any(|&l| l == class) {
            return Err(Error::MissingClass(class));
        }
    }
    if labels.iter().any(|&l| l >= k) {
        return Err(Error::InvalidConfig("label outside 0..k".into()));
    }

    let q = x.q();
    let gm = gram(x);
    let chol = pivoted_cholesky(&gm, q)?;
    let retained = chol.retained.clone();
    let kk = retained.len();
    let dim = (k - 1) * kk;

    let mut beta = vec![0.0f64; dim];
    let mut probs = vec![0.0f64; n * k];
    let mut ridged = false;
    let mut converged = false;
    let mut iterations = 0;

    let compute_probs = |beta: &[f64], probs: &mut [f64]| {
        for i in 0..n {
            let mut eta = vec![0.0f64; k];
            for class in 1..k {
                let b = &beta[(class - 1) * kk..class * kk];
                let mut e = 0.0;
                for (idx, &j) in retained.iter().enumerate() {
                    e += x.col(j)[i] * b[idx];
                }
                eta[class] = e;
            }
            let p = softmax(&eta);
            probs[i * k..(i + 1) * k].copy_from_slice(&p);
        }
    };

    for iter in 1..=MAX_ITER {
        iterations = iter;
        compute_probs(&beta, &mut probs);

        // Score per class block: X'(y_c - p_c).
        let mut score = vec![0.0f64; dim];
        for class in 1..k {
            for (idx, &j) in retained.iter().enumerate() {
                let col = x.col(j);
                let mut s = 0.0;
                for i in 0..n {
                    let y = (labels[i] == class) as u8 as f64;
                    s += col[i] * (y - probs[i * k + class]);
                }
                score[(class - 1) * kk + idx] = s;
            }
        }
        if score.iter().all(|s| s.abs() < SCORE_TOL) {
            converged = true;
            break;
        }

        // Hessian blocks H[cd] = X' W_cd X, W_cd = p_c (1(c=d) - p_d).
        let mut h = DMatrix::zeros(dim, dim);
        for c in 1..k {
            for d in 1..=c {
                for (ri, &rj) in retained.iter().enumerate() {
                    for (ci, &cj) in retained.iter().enumerate() {
                        if d == c && ci > ri {
                            continue;
                        }
                        let (a, b) = (x.col(rj), x.col(cj));
                        let mut v = 0.0;
                        for i in 0..n {
                            let pc = probs[i * k + c];
                            let pd = probs[i * k + d];
                            let w = if c == d { pc * (1.0 - pc) } else { -pc * pd };
                            v += a[i] * b[i] * w;
                        }
                        let (r, cidx) = ((c - 1) * kk + ri, (d - 1) * kk + ci);
                        h[(r, cidx)] = v;
                        h[(cidx, r)] = v;
                    }
                }
            }
        }
        let step = match h.clone().cholesky() {
            Some(ch) => ch.solve(&DVector::from_column_slice(&score)),
            None => {
                ridged = true;
                for d in 0..dim {
                    h[(d, d)] += RIDGE;
                }
                match h.cholesky() {
                    Some(ch) => ch.solve(&DVector::from_column_slice(&score)),
                    None => return Err(Error::RankZero),
                }
            }
        };
        for idx in 0..dim {
            beta[idx] += step[idx];
        }
    }

    compute_probs(&beta, &mut probs);
    let quasi_separated = probs
        .iter()
        .any(|&v| v <= PROB_FLOOR || v >= 1.0 - PROB_FLOOR);
    for v in probs.iter_mut() {
        *v = cap(*v);
    }
    // Renormalize rows after capping so class probabilities sum to one.
    for i in 0..n {
        let s: f64 = probs[i * k..(i + 1) * k].iter().sum();
        for v in &mut probs[i * k..(i + 1) * k] {
            *v /= s;
        }
    }

    let mut coefficients = vec![0.0; (k - 1) * q];
    for class in 1..k {
        for (idx, &j) in retained.iter().enumerate() {
            coefficients[(class - 1) * q + j] = beta[(class - 1) * kk + idx];
        }
    }
    let dropped_columns = (0..q)
        .filter(|j| !retained.contains(j))
        .map(|j| x.labels()[j].clone())
        .collect();

    Ok(GpsModel {
        link: GpsLink::Softmax { classes: k },
        coefficients,
        column_labels: x.labels().to_vec(),
        retained,
        dropped_columns,
        fitted: probs,
        quasi_separated,
        ridged,
        converged,
        iterations,
    })
}

fn gram(x: &DesignMatrix) -> Vec<f64> {
    let q = x.q();
    let mut g = vec![0.0; q * q];
    for j in 0..q {
        for l in 0..=j {
            let v: f64 = x.col(j).iter().zip(x.col(l)).map(|(a, b)| a * b).sum();
            g[j * q + l] = v;
            g[l * q + j] = v;
        }
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn intercept_only(n: usize) -> DesignMatrix {
        DesignMatrix::with_intercept(n)
    }

    #[test]
    fn intercept_only_matches_sample_mean() {
        let n = 100;
        let labels: Vec<u8> = (0..n).map(|i| (i < 30) as u8).collect();
        let clusters: Vec<usize> = (0..n).collect();
        let m = binary_logit_fit(&intercept_only(n), &labels, &clusters).unwrap();
        assert!(m.converged);
        for &p in &m.fitted {
            assert!((p - 0.30).abs() < 1e-8, "p={p}");
        }
    }

    #[test]
    fn single_class_rejected() {
        let n = 10;
        let labels = vec![1u8; n];
        let clusters: Vec<usize> = (0..n).collect();
        assert!(matches!(
            binary_logit_fit(&intercept_only(n), &labels, &clusters),
            Err(Error::SingleClass)
        ));
    }

    #[test]
    fn perfect_separation_flagged() {
        let n = 40;
        let xvals: Vec<f64> = (0..n).map(|i| i as f64 - 20.0).collect();
        let labels: Vec<u8> = xvals.iter().map(|&v| (v > 0.0) as u8).collect();
        let mut d = DesignMatrix::with_intercept(n);
        d.push("x", xvals).unwrap();
        let clusters: Vec<usize> = (0..n).collect();
        let m = binary_logit_fit(&d, &labels, &clusters).unwrap();
        assert!(m.quasi_separated);
        assert!(m
            .fitted
            .iter()
            .all(|&p| (1e-10..=1.0 - 1e-10).contains(&p)));
    }

    #[test]
    fn recovers_coefficient_on_simulated_data() {
        // Logistic DGP with slope 1.5; n = 10_000 keeps the MLE within 0.1.
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 10_000;
        let mut d = DesignMatrix::with_intercept(n);
        let xv: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
        d.push("x", xv.clone()).unwrap();
        let labels: Vec<u8> = xv
            .iter()
            .map(|&x| (rng.gen::<f64>() < expit(0.3 + 1.5 * x)) as u8)
            .collect();
        let clusters: Vec<usize> = (0..n).collect();
        let m = binary_logit_fit(&d, &labels, &clusters).unwrap();
        assert!(m.converged);
        assert!(
            (m.coefficients[1] - 1.5).abs() < 0.1,
            "slope {}",
            m.coefficients[1]
        );
    }

    #[test]
    fn multinomial_intercept_only_matches_shares() {
        // Class shares 22/35/43 from the entry-probability table.
        let mut labels = Vec::new();
        labels.extend(std::iter::repeat(0usize).take(22));
        labels.extend(std::iter::repeat(1usize).take(35));
        labels.extend(std::iter::repeat(2usize).take(43));
        let n = labels.len();
        let m = multinomial_logit_fit(&intercept_only(n), &labels, 3).unwrap();
        assert!(m.converged);
        let p = &m.fitted[0..3];
        assert!((p[0] - 0.22).abs() < 1e-6);
        assert!((p[1] - 0.35).abs() < 1e-6);
        assert!((p[2] - 0.43).abs() < 1e-6);
    }

    #[test]
    fn multinomial_k2_reduces_to_binary() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 500;
        let mut d = DesignMatrix::with_intercept(n);
        let xv: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() * 3.0).collect();
        d.push("x", xv.clone()).unwrap();
        let labels_u8: Vec<u8> = xv
            .iter()
            .map(|&x| (rng.gen::<f64>() < expit(-1.0 + 0.8 * x)) as u8)
            .collect();
        let labels_us: Vec<usize> = labels_u8.iter().map(|&v| v as usize).collect();
        let clusters: Vec<usize> = (0..n).collect();
        let b = binary_logit_fit(&d, &labels_u8, &clusters).unwrap();
        let m = multinomial_logit_fit(&d, &labels_us, 2).unwrap();
        for j in 0..2 {
            assert!(
                (b.coefficients[j] - m.coefficients[j]).abs() < 1e-6,
                "coef {j}: binary {} vs multinomial {}",
                b.coefficients[j],
                m.coefficients[j]
            );
        }
    }

    #[test]
    fn multinomial_missing_class_rejected() {
        let labels = vec![0usize, 0, 2, 2];
        assert!(matches!(
            multinomial_logit_fit(&intercept_only(4), &labels, 3),
            Err(Error::MissingClass(1))
        ));
    }

    #[test]
    fn probabilities_sum_to_one_per_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 300;
        let mut d = DesignMatrix::with_intercept(n);
        d.push("x", (0..n).map(|_| rng.gen::<f64>()).collect::<Vec<_>>())
            .unwrap();
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..3)).collect();
        let m = multinomial_logit_fit(&d, &labels, 3).unwrap();
        for i in 0..n {
            let s: f64 = m.fitted[i * 3..(i + 1) * 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(m.fitted[i * 3..(i + 1) * 3].iter().all(|&p| p > 0.0 && p < 1.0));
        }
    }
}
