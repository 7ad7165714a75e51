//! Labeled column-major design matrices and covariate dummy expansion.

use crate::error::{Error, Result};
use crate::panel::{CovariateKind, CovariateMeta, PanelDataset};

/// Column-major design matrix with unique column labels.
#[derive(Debug, Clone)]
pub struct DesignMatrix {
    n: usize,
    labels: Vec<String>,
    cols: Vec<Vec<f64>>,
}

impl DesignMatrix {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            labels: Vec::new(),
            cols: Vec::new(),
        }
    }

    pub fn with_intercept(n: usize) -> Self {
        let mut m = Self::new(n);
        m.push("intercept", vec![1.0; n]).expect("fresh matrix");
        m
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn q(&self) -> usize {
        self.cols.len()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn col(&self, j: usize) -> &[f64] {
        &self.cols[j]
    }

    pub fn col_mut(&mut self, j: usize) -> &mut Vec<f64> {
        &mut self.cols[j]
    }

    pub fn push(&mut self, label: impl Into<String>, col: Vec<f64>) -> Result<usize> {
        let label = label.into();
        if col.len() != self.n {
            return Err(Error::InvalidConfig(format!(
                "column '{label}' has {} rows, design has {}",
                col.len(),
                self.n
            )));
        }
        if !col.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "column '{label}' contains non-finite entries"
            )));
        }
        if self.labels.iter().any(|l| *l == label) {
            return Err(Error::InvalidConfig(format!("duplicate column label '{label}'")));
        }
        self.labels.push(label);
        self.cols.push(col);
        Ok(self.cols.len() - 1)
    }

    /// Row values across all columns (allocates; prefer column access in loops).
    pub fn row(&self, i: usize) -> Vec<f64> {
        self.cols.iter().map(|c| c[i]).collect()
    }

    pub fn position(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }
}

/// Expand panel covariates into design columns for the given units, one row
/// per entry of `units`. Continuous and binary columns map one-to-one;
/// categorical columns expand to one indicator per non-reference level, the
/// reference being the first observed level. Column labels are
/// `name` or `name=level`.
pub fn expand_covariates(panel: &PanelDataset, units: &[usize]) -> Vec<(String, Vec<f64>)> {
    let mut out = Vec::new();
    for (j, meta) in panel.covariates().iter().enumerate() {
        expand_one(panel, units, j, meta, &mut out);
    }
    out
}

fn expand_one(
    panel: &PanelDataset,
    units: &[usize],
    j: usize,
    meta: &CovariateMeta,
    out: &mut Vec<(String, Vec<f64>)>,
) {
    match &meta.kind {
        CovariateKind::Continuous | CovariateKind::Binary => {
            let col = units.iter().map(|&u| panel.xval(u, j)).collect();
            out.push((meta.name.clone(), col));
        }
        CovariateKind::Categorical { levels } => {
            for (lv, name) in levels.iter().enumerate().skip(1) {
                let col = units
                    .iter()
                    .map(|&u| (panel.xval(u, j) as usize == lv) as u8 as f64)
                    .collect();
                out.push((format!("{}={}", meta.name, name), col));
            }
        }
    }
}
