//! Two-way Mundlak regression: one pooled linear model with cohort, time and
//! treatment-cell structure plus covariate interactions, whose conditional
//! effects are marginalized over cohort covariate distributions into
//! group-time, event-time and aggregate estimands. Also provides the naive
//! two-way fixed-effects regression as a comparison baseline.
//!
//! The pooled design: intercept, cohort dummies, time dummies, treatment-cell
//! indicators `1(G=g, t=tau)` for estimable post cells, covariates,
//! covariate x time and covariate x cohort interactions, and treatment-cell
//! interactions with cohort-centered covariates `x - xbar_g`. Periods with no
//! untreated observations identify no cell and are excluded from the sample.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::kernels::{
    absorb_fixed_effects, expand_covariates, least_squares_fit_opts, DesignMatrix, FitResult,
    OlsOptions,
};
use crate::panel::{Cohort, CohortMap, PanelDataset};

/// Which covariance the pooled fit carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum MundlakVcov {
    /// No analytic covariance (bootstrap callers).
    None,
    /// Cluster-robust at the cluster level.
    Cluster,
    /// Observation-level HC1, ignoring clustering; reproduces the behavior
    /// of marginalization software that cannot account for clustering.
    Hc1,
}

/// Fitted pooled regression with the bookkeeping needed to marginalize.
#[derive(Debug, Clone)]
pub struct MundlakFit {
    fit: FitResult,
    /// Estimable treatment cells in design order.
    cells: Vec<(u32, u32)>,
    cell_col: BTreeMap<(u32, u32), usize>,
    /// Per cell, the columns of its centered-covariate interactions.
    cell_interactions: BTreeMap<(u32, u32), Vec<usize>>,
    /// Cohort covariate means over the expanded covariate columns.
    xbar: BTreeMap<u32, Vec<f64>>,
    /// Expanded covariate values per unit (n_units x p_expanded, row-major).
    xexp: Vec<f64>,
    p_expanded: usize,
    n_units_per_cohort: BTreeMap<u32, usize>,
    pub vcov_kind: MundlakVcov,
    pub dropped_columns: Vec<String>,
    /// Cells that were requested but fell to collinearity.
    pub dropped_cells: Vec<(u32, u32)>,
}

impl MundlakFit {
    pub fn cells(&self) -> &[(u32, u32)] {
        &self.cells
    }

    pub fn cell_coefficient(&self, g: u32, t: u32) -> Option<f64> {
        self.cell_col
            .get(&(g, t))
            .map(|&j| self.fit.coefficients[j])
    }
}

/// A marginalized treatment effect.
#[derive(Debug, Clone, Serialize)]
pub struct MarginalizedEffect {
    pub estimand: String,
    pub estimate: f64,
    /// Delta-method standard error when the fit carries a covariance.
    pub se: Option<f64>,
    pub ci: Option<(f64, f64)>,
    /// Averaging weights over cells (nonnegative, sum to one).
    pub weights: Vec<((u32, u32), f64)>,
}

const Z95: f64 = 1.959963984540054;

/// Fit the pooled Mundlak regression.
pub fn fit_mundlak(
    panel: &PanelDataset,
    cohorts: &CohortMap,
    vcov: MundlakVcov,
) -> Result<MundlakFit> {
    if cohorts.support().len() < 2 && !cohorts.has_never_treated() {
        return Err(Error::NoReferenceCohort);
    }
    let tb = panel.tbar();
    // Keep only periods where some unit is untreated; later periods identify
    // no counterfactual and their cells are inestimable for every method.
    let t_max = (1..=tb)
        .filter(|&t| panel.any_untreated_at(t))
        .max()
        .ok_or(Error::NoReferenceCohort)?;

    let n_units = panel.n_units();
    let rows: Vec<(usize, u32)> = (0..n_units)
        .flat_map(|u| (1..=t_max).map(move |t| (u, t)))
        .collect();
    let nr = rows.len();

    // Cohort levels in deterministic order, never-treated last.
    let mut levels: Vec<Cohort> = cohorts.support().iter().map(|&g| Cohort::At(g)).collect();
    if cohorts.has_never_treated() {
        levels.push(Cohort::Never);
    }

    // Expanded covariates per unit.
    let all_units: Vec<usize> = (0..n_units).collect();
    let expanded = expand_covariates(panel, &all_units);
    let p_exp = expanded.len();
    let mut xexp = vec![0.0; n_units * p_exp];
    for (j, (_, col)) in expanded.iter().enumerate() {
        for u in 0..n_units {
            xexp[u * p_exp + j] = col[u];
        }
    }

    // Cohort covariate means on the estimation sample.
    let mut xbar: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
    let mut n_units_per_cohort: BTreeMap<u32, usize> = BTreeMap::new();
    for &g in cohorts.support() {
        let members = cohorts.units_in(Cohort::At(g));
        let mut mean = vec![0.0; p_exp];
        for &u in &members {
            for j in 0..p_exp {
                mean[j] += xexp[u * p_exp + j];
            }
        }
        for m in &mut mean {
            *m /= members.len() as f64;
        }
        xbar.insert(g, mean);
        n_units_per_cohort.insert(g, members.len());
    }

    // Treatment cells estimable in the restricted sample.
    let mut cells: Vec<(u32, u32)> = Vec::new();
    for &g in cohorts.support() {
        for t in g..=t_max {
            cells.push((g, t));
        }
    }

    let mut x = DesignMatrix::with_intercept(nr);
    for &lvl in levels.iter().skip(1) {
        let col = rows
            .iter()
            .map(|&(u, _)| (cohorts.cohort_of(u) == lvl) as u8 as f64)
            .collect();
        let label = match lvl {
            Cohort::At(g) => format!("g{g}"),
            Cohort::Never => "never".to_string(),
        };
        x.push(label, col)?;
    }
    for t in 2..=t_max {
        x.push(
            format!("t{t}"),
            rows.iter().map(|&(_, rt)| (rt == t) as u8 as f64).collect(),
        )?;
    }
    let mut cell_col_order: Vec<(u32, u32)> = Vec::new();
    for &(g, t) in &cells {
        let col = rows
            .iter()
            .map(|&(u, rt)| {
                (cohorts.cohort_of(u) == Cohort::At(g) && rt == t) as u8 as f64
            })
            .collect();
        x.push(format!("cell_g{g}_t{t}"), col)?;
        cell_col_order.push((g, t));
    }
    for (j, (name, _)) in expanded.iter().enumerate() {
        x.push(
            name.clone(),
            rows.iter().map(|&(u, _)| xexp[u * p_exp + j]).collect(),
        )?;
    }
    for (j, (name, _)) in expanded.iter().enumerate() {
        for t in 2..=t_max {
            x.push(
                format!("{name}:t{t}"),
                rows.iter()
                    .map(|&(u, rt)| if rt == t { xexp[u * p_exp + j] } else { 0.0 })
                    .collect(),
            )?;
        }
    }
    for (j, (name, _)) in expanded.iter().enumerate() {
        for &lvl in levels.iter().skip(1) {
            let label = match lvl {
                Cohort::At(g) => format!("{name}:g{g}"),
                Cohort::Never => format!("{name}:never"),
            };
            x.push(
                label,
                rows.iter()
                    .map(|&(u, _)| {
                        if cohorts.cohort_of(u) == lvl {
                            xexp[u * p_exp + j]
                        } else {
                            0.0
                        }
                    })
                    .collect(),
            )?;
        }
    }
    let mut interaction_cols: BTreeMap<(u32, u32), Vec<usize>> = BTreeMap::new();
    for &(g, t) in &cells {
        let mean = &xbar[&g];
        let mut idxs = Vec::with_capacity(p_exp);
        for (j, (name, _)) in expanded.iter().enumerate() {
            let col = rows
                .iter()
                .map(|&(u, rt)| {
                    if cohorts.cohort_of(u) == Cohort::At(g) && rt == t {
                        xexp[u * p_exp + j] - mean[j]
                    } else {
                        0.0
                    }
                })
                .collect();
            let idx = x.push(format!("cell_g{g}_t{t}:c({name})"), col)?;
            idxs.push(idx);
        }
        interaction_cols.insert((g, t), idxs);
    }

    let y: Vec<f64> = rows.iter().map(|&(u, t)| panel.outcome(u, t)).collect();
    let clusters: Vec<usize> = match vcov {
        // Observation-level "clusters" turn the CR1 sandwich into HC1.
        MundlakVcov::Hc1 => (0..nr).collect(),
        _ => rows.iter().map(|&(u, _)| panel.cluster_of_unit(u)).collect(),
    };
    let fit = least_squares_fit_opts(
        &x,
        &y,
        &clusters,
        &OlsOptions {
            compute_vcov: vcov != MundlakVcov::None,
            absorbed_df: 0,
        },
    )?;

    // Locate retained cell columns.
    let mut cell_col = BTreeMap::new();
    let mut dropped_cells = Vec::new();
    for &(g, t) in &cell_col_order {
        let j = x.position(&format!("cell_g{g}_t{t}")).expect("pushed above");
        if fit.retained.contains(&j) {
            cell_col.insert((g, t), j);
        } else {
            dropped_cells.push((g, t));
        }
    }
    let cells_kept: Vec<(u32, u32)> = cell_col_order
        .iter()
        .copied()
        .filter(|c| cell_col.contains_key(c))
        .collect();

    Ok(MundlakFit {
        dropped_columns: fit.dropped_columns.clone(),
        fit,
        cells: cells_kept,
        cell_col,
        cell_interactions: interaction_cols,
        xbar,
        xexp,
        p_expanded: p_exp,
        n_units_per_cohort,
        vcov_kind: vcov,
        dropped_cells,
    })
}

/// Average the conditional effect `psi_{g,t}(x)` over the units of cohort g.
/// With cohort-centered interactions this equals the cell main coefficient
/// up to the sample-mean centering residual; the averaging is done literally.
pub fn marginalize_group_time(
    fit: &MundlakFit,
    cohorts: &CohortMap,
    g: u32,
    t: u32,
) -> Result<MarginalizedEffect> {
    let weights = vec![((g, t), 1.0)];
    let contrast = cell_contrast(fit, cohorts, g, t)?;
    let (estimate, se) = evaluate_contrast(fit, &contrast);
    Ok(MarginalizedEffect {
        estimand: format!("psi_{{{g},{t}}}"),
        estimate,
        se,
        ci: se.map(|s| (estimate - Z95 * s, estimate + Z95 * s)),
        weights,
    })
}

/// Cell-count weighted average of group-time marginals over cells with
/// `t - g = ell`. Negative event times are infeasible for this estimator
/// (the model carries no parameters for pre-treatment periods).
pub fn marginalize_event_time(
    fit: &MundlakFit,
    cohorts: &CohortMap,
    ell: i32,
) -> Result<MarginalizedEffect> {
    if ell < 0 {
        return Err(Error::NegativeEventTime(ell));
    }
    let cells: Vec<(u32, u32)> = fit
        .cells
        .iter()
        .copied()
        .filter(|&(g, t)| t as i32 - g as i32 == ell)
        .collect();
    if cells.is_empty() {
        return Err(Error::MissingCell {
            g: 0,
            t: ell as u32,
        });
    }
    weighted_marginal(fit, cohorts, &cells, format!("psi_{{{ell}}}"))
}

/// Cell-count weighted average over every estimable post cell.
pub fn marginalize_aggregate(
    fit: &MundlakFit,
    cohorts: &CohortMap,
) -> Result<MarginalizedEffect> {
    let cells = fit.cells.clone();
    if cells.is_empty() {
        return Err(Error::MissingCell { g: 0, t: 0 });
    }
    weighted_marginal(fit, cohorts, &cells, "psi_aggr".to_string())
}

fn weighted_marginal(
    fit: &MundlakFit,
    cohorts: &CohortMap,
    cells: &[(u32, u32)],
    estimand: String,
) -> Result<MarginalizedEffect> {
    let total: f64 = cells
        .iter()
        .map(|(g, _)| fit.n_units_per_cohort[g] as f64)
        .sum();
    let mut combined = vec![0.0; fit.fit.coefficients.len()];
    let mut weights = Vec::with_capacity(cells.len());
    for &(g, t) in cells {
        let w = fit.n_units_per_cohort[&g] as f64 / total;
        weights.push(((g, t), w));
        let contrast = cell_contrast(fit, cohorts, g, t)?;
        for (j, v) in contrast {
            combined[j] += w * v;
        }
    }
    let sparse: Vec<(usize, f64)> = combined
        .iter()
        .enumerate()
        .filter(|(_, v)| **v != 0.0)
        .map(|(j, v)| (j, *v))
        .collect();
    let (estimate, se) = evaluate_contrast(fit, &sparse);
    Ok(MarginalizedEffect {
        estimand,
        estimate,
        se,
        ci: se.map(|s| (estimate - Z95 * s, estimate + Z95 * s)),
        weights,
    })
}

/// Linear contrast over coefficients representing the cohort-averaged
/// conditional effect of cell (g, t).
fn cell_contrast(
    fit: &MundlakFit,
    cohorts: &CohortMap,
    g: u32,
    t: u32,
) -> Result<Vec<(usize, f64)>> {
    let &cell_j = fit.cell_col.get(&(g, t)).ok_or(Error::MissingCell { g, t })?;
    let mut contrast = vec![(cell_j, 1.0)];
    // Average of (x_i - xbar_g) over cohort members; zero up to rounding when
    // xbar was computed on the same sample, kept literal for custom targets.
    let members = cohorts.units_in(Cohort::At(g));
    if !members.is_empty() {
        let p = fit.p_expanded;
        let mean_dev: Vec<f64> = (0..p)
            .map(|j| {
                members
                    .iter()
                    .map(|&u| fit.xexp[u * p + j] - fit.xbar[&g][j])
                    .sum::<f64>()
                    / members.len() as f64
            })
            .collect();
        if let Some(idxs) = fit.cell_interactions.get(&(g, t)) {
            for (j, &col) in idxs.iter().enumerate() {
                if fit.fit.retained.contains(&col) && mean_dev[j] != 0.0 {
                    contrast.push((col, mean_dev[j]));
                }
            }
        }
    }
    Ok(contrast)
}

fn evaluate_contrast(fit: &MundlakFit, contrast: &[(usize, f64)]) -> (f64, Option<f64>) {
    let estimate: f64 = contrast
        .iter()
        .map(|&(j, v)| v * fit.fit.coefficients[j])
        .sum();
    let se = if fit.vcov_kind == MundlakVcov::None {
        None
    } else {
        let mut var = 0.0;
        for &(j, vj) in contrast {
            for &(l, vl) in contrast {
                var += vj * vl * fit.fit.vcov[(j, l)];
            }
        }
        Some(var.max(0.0).sqrt())
    };
    (estimate, se)
}

/// Naive two-way fixed effects regression of the outcome on the treatment
/// dummy (comparison baseline; biased under group-time heterogeneity).
pub fn twfe_baseline(panel: &PanelDataset) -> Result<(f64, f64)> {
    let tb = panel.tbar();
    let n_units = panel.n_units();
    let nr = n_units * tb as usize;
    let mut unit_factor = Vec::with_capacity(nr);
    let mut time_factor = Vec::with_capacity(nr);
    let mut y = Vec::with_capacity(nr);
    let mut a = Vec::with_capacity(nr);
    let mut clusters = Vec::with_capacity(nr);
    for u in 0..n_units {
        for t in 1..=tb {
            unit_factor.push(u);
            time_factor.push((t - 1) as usize);
            y.push(panel.outcome(u, t));
            a.push(panel.treated(u, t) as u8 as f64);
            clusters.push(panel.cluster_of_unit(u));
        }
    }
    let mut x = DesignMatrix::new(nr);
    x.push("treated", a)?;
    let absorbed = absorb_fixed_effects(&x, &y, &[unit_factor, time_factor])?;
    let fit = least_squares_fit_opts(
        &absorbed.x,
        &absorbed.y,
        &clusters,
        &OlsOptions {
            compute_vcov: true,
            absorbed_df: absorbed.absorbed_df,
        },
    )?;
    Ok((fit.coefficients[0], fit.se(0)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::{derive_cohorts, validate_panel, PanelRecord};

    fn build(units: &[(u32, f64)], f: impl Fn(u32, u32) -> f64) -> (PanelDataset, CohortMap) {
        // units: (g (0 = never), covariate value); tbar = 5
        let mut recs = Vec::new();
        for (i, &(g, xv)) in units.iter().enumerate() {
            for t in 1..=5u32 {
                let treated = g != 0 && t >= g;
                recs.push(PanelRecord {
                    unit_id: format!("u{i}"),
                    cluster_id: format!("c{}", i / 2),
                    time: t,
                    y: t as f64 + 0.3 * xv + if treated { f(g, t) } else { 0.0 },
                    a: treated as u8,
                    x: vec![xv],
                });
            }
        }
        let panel = validate_panel(&recs).unwrap();
        let cohorts = derive_cohorts(&panel).unwrap();
        (panel, cohorts)
    }

    fn three_cohort_units() -> Vec<(u32, f64)> {
        // cluster-constant cohorts (units i, i+1 share cluster i/2)
        let mut units = Vec::new();
        for i in 0..9 {
            let g = 3 + (i % 3) as u32;
            units.push((g, (i as f64 * 0.7).sin() + 1.0));
            units.push((g, (i as f64 * 1.3).cos() + 2.0));
        }
        units
    }

    #[test]
    fn constant_effect_fills_every_cell() {
        let (panel, cohorts) = build(&three_cohort_units(), |_, _| 2.0);
        let fit = fit_mundlak(&panel, &cohorts, MundlakVcov::Cluster).unwrap();
        // Periods with untreated units stop at t=4, so cells (g,5) are out.
        assert_eq!(fit.cells(), &[(3, 3), (3, 4), (4, 4)]);
        for &(g, t) in fit.cells() {
            let c = fit.cell_coefficient(g, t).unwrap();
            assert!((c - 2.0).abs() < 1e-8, "cell ({g},{t}) = {c}");
        }
        let agg = marginalize_aggregate(&fit, &cohorts).unwrap();
        assert!((agg.estimate - 2.0).abs() < 1e-8);
        let wsum: f64 = agg.weights.iter().map(|(_, w)| w).sum();
        assert!((wsum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn centering_identity_holds() {
        let (panel, cohorts) = build(&three_cohort_units(), |g, t| (g + t) as f64 * 0.25);
        let fit = fit_mundlak(&panel, &cohorts, MundlakVcov::Cluster).unwrap();
        for &(g, t) in fit.cells() {
            let marginal = marginalize_group_time(&fit, &cohorts, g, t).unwrap();
            let cell = fit.cell_coefficient(g, t).unwrap();
            assert!(
                (marginal.estimate - cell).abs() < 1e-8,
                "marginal {} vs cell {}",
                marginal.estimate,
                cell
            );
        }
    }

    #[test]
    fn aggregate_equals_count_weighted_mean_of_cell_marginals() {
        let (panel, cohorts) = build(&three_cohort_units(), |g, t| (t - g) as f64 + 1.0);
        let fit = fit_mundlak(&panel, &cohorts, MundlakVcov::Cluster).unwrap();
        let agg = marginalize_aggregate(&fit, &cohorts).unwrap();
        let mut manual = 0.0;
        for &((g, t), w) in &agg.weights {
            manual += w * marginalize_group_time(&fit, &cohorts, g, t).unwrap().estimate;
        }
        assert!((agg.estimate - manual).abs() < 1e-12);
    }

    #[test]
    fn covariate_rescaling_leaves_marginals_unchanged() {
        let units = three_cohort_units();
        let (panel, cohorts) = build(&units, |_, _| 1.5);
        let base = {
            let fit = fit_mundlak(&panel, &cohorts, MundlakVcov::None).unwrap();
            marginalize_aggregate(&fit, &cohorts).unwrap().estimate
        };
        // Affine rescale of the covariate column.
        let mut recs = panel.to_records();
        for r in &mut recs {
            r.x[0] = 10.0 * r.x[0] - 3.0;
        }
        let p2 = validate_panel(&recs).unwrap();
        let c2 = derive_cohorts(&p2).unwrap();
        let rescaled = {
            let fit = fit_mundlak(&p2, &c2, MundlakVcov::None).unwrap();
            marginalize_aggregate(&fit, &c2).unwrap().estimate
        };
        assert!((base - rescaled).abs() < 1e-8);
    }

    #[test]
    fn negative_event_time_rejected() {
        let (panel, cohorts) = build(&three_cohort_units(), |_, _| 1.0);
        let fit = fit_mundlak(&panel, &cohorts, MundlakVcov::None).unwrap();
        assert!(matches!(
            marginalize_event_time(&fit, &cohorts, -1),
            Err(Error::NegativeEventTime(-1))
        ));
        let e0 = marginalize_event_time(&fit, &cohorts, 0).unwrap();
        assert!((e0.estimate - 1.0).abs() < 1e-8);
    }

    #[test]
    fn interactions_vanish_when_covariates_ignorable() {
        // Covariate independent of cohort and of the effect.
        let mut units = Vec::new();
        for i in 0..12 {
            let g = 3 + (i % 2) as u32; // cohorts 3, 4
            units.push((g, (i % 3) as f64));
            units.push((g, (i % 3) as f64));
        }
        let (panel, cohorts) = build(&units, |_, _| 2.0);
        let fit = fit_mundlak(&panel, &cohorts, MundlakVcov::None).unwrap();
        for (label, j) in fit
            .cell_interactions
            .iter()
            .flat_map(|(c, idxs)| idxs.iter().map(move |&j| (c, j)))
        {
            if fit.fit.retained.contains(&j) {
                assert!(
                    fit.fit.coefficients[j].abs() < 1e-8,
                    "interaction {label:?} = {}",
                    fit.fit.coefficients[j]
                );
            }
        }
    }

    #[test]
    fn twfe_unbiased_under_homogeneity_and_zero_effect() {
        let (panel, _) = build(&three_cohort_units(), |_, _| 2.0);
        let (est, se) = twfe_baseline(&panel).unwrap();
        assert!((est - 2.0).abs() < 1e-8, "twfe {est}");
        assert!(se.is_finite());
        let (panel0, _) = build(&three_cohort_units(), |_, _| 0.0);
        let (est0, _) = twfe_baseline(&panel0).unwrap();
        assert!(est0.abs() < 1e-8);
    }
}
