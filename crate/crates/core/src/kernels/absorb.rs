//! Fixed-effect absorption by alternating within-group demeaning.

use super::design::DesignMatrix;
use crate::error::{Error, Result};

const MAX_SWEEPS: usize = 1000;
const REL_TOL: f64 = 1e-10;

/// Projected design and outcome, orthogonal to the span of the factor dummies.
#[derive(Debug, Clone)]
pub struct AbsorbResult {
    pub x: DesignMatrix,
    pub y: Vec<f64>,
    pub sweeps: usize,
    /// Degrees of freedom consumed by the absorbed factors.
    pub absorbed_df: usize,
}

/// Degrees of freedom of a set of crossed factors on a connected panel:
/// total level count minus one redundancy per extra factor.
pub fn absorbed_df(factors: &[Vec<usize>]) -> usize {
    let mut df = 0usize;
    for f in factors {
        df += f.iter().copied().max().map_or(0, |m| m + 1);
    }
    df.saturating_sub(factors.len().saturating_sub(1))
}

/// Project `x` and `y` orthogonal to the span of the factor dummies by
/// alternating within-group demeaning until the largest change in a sweep is
/// below `1e-10` relative to the data scale. Coefficients of a subsequent
/// OLS on the projected data equal those of the full dummy regression.
pub fn absorb_fixed_effects(
    x: &DesignMatrix,
    y: &[f64],
    factors: &[Vec<usize>],
) -> Result<AbsorbResult> {
    let n = x.n();
    if y.len() != n {
        return Err(Error::InvalidConfig(format!(
            "y has {} rows, design has {n}",
            y.len()
        )));
    }
    for (fi, f) in factors.iter().enumerate() {
        if f.len() != n {
            return Err(Error::InvalidConfig(format!(
                "factor {fi} has {} rows, design has {n}",
                f.len()
            )));
        }
    }

    let mut cols: Vec<Vec<f64>> = (0..x.q()).map(|j| x.col(j).to_vec()).collect();
    let mut yv = y.to_vec();

    let scale = cols
        .iter()
        .chain(std::iter::once(&yv))
        .flat_map(|c| c.iter())
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(1.0);

    let level_counts: Vec<usize> = factors
        .iter()
        .map(|f| f.iter().copied().max().map_or(0, |m| m + 1))
        .collect();

    let mut sweeps = 0usize;
    if factors.len() == 1 {
        // A single factor is an exact projection: one demeaning pass.
        let f = &factors[0];
        let nl = level_counts[0];
        let mut counts = vec![0usize; nl];
        for &g in f {
            counts[g] += 1;
        }
        for v in cols.iter_mut().chain(std::iter::once(&mut yv)) {
            let mut sums = vec![0.0f64; nl];
            for (i, &g) in f.iter().enumerate() {
                sums[g] += v[i];
            }
            for (g, s) in sums.iter_mut().enumerate() {
                if counts[g] > 0 {
                    *s /= counts[g] as f64;
                }
            }
            for (i, &g) in f.iter().enumerate() {
                v[i] -= sums[g];
            }
        }
        sweeps = 1;
    } else if !factors.is_empty() {
        loop {
            sweeps += 1;
            let mut max_change = 0.0f64;
            for (f, &nl) in factors.iter().zip(&level_counts) {
                let mut counts = vec![0usize; nl];
                for &g in f {
                    counts[g] += 1;
                }
                for v in cols.iter_mut().chain(std::iter::once(&mut yv)) {
                    let mut sums = vec![0.0f64; nl];
                    for (i, &g) in f.iter().enumerate() {
                        sums[g] += v[i];
                    }
                    for (g, s) in sums.iter_mut().enumerate() {
                        if counts[g] > 0 {
                            *s /= counts[g] as f64;
                        }
                    }
                    for (i, &g) in f.iter().enumerate() {
                        let m = sums[g];
                        if m != 0.0 {
                            v[i] -= m;
                            max_change = max_change.max(m.abs());
                        }
                    }
                }
            }
            if max_change <= REL_TOL * scale {
                break;
            }
            if sweeps >= MAX_SWEEPS {
                return Err(Error::NonConvergence(sweeps));
            }
        }
    }

    let mut out = DesignMatrix::new(n);
    for (j, col) in cols.into_iter().enumerate() {
        out.push(x.labels()[j].clone(), col)?;
    }
    Ok(AbsorbResult {
        x: out,
        y: yv,
        sweeps,
        absorbed_df: absorbed_df(factors),
    })
}
