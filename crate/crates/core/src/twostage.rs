//! Two-stage estimator: residualize outcomes against cohort/time/covariate
//! structure estimated on untreated observations, then regress the residuals
//! on treatment exposure.
//!
//! Outcomes are first transformed by removing each unit's mean over its own
//! untreated periods (time-invariant covariates transform to zero and drop
//! out). Stage one fits cohort and time effects on untreated rows only;
//! stage two regresses the residualized outcome of every usable row on a
//! treatment dummy (aggregate) or relative-period indicators with `ell = -1`
//! omitted (event study). Rows at periods with no untreated observations
//! cannot be residualized and are excluded with a report.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::kernels::{expand_covariates, least_squares_fit_opts, DesignMatrix, OlsOptions};
use crate::panel::{Cohort, CohortMap, PanelDataset};

/// Outcomes and covariates with unit-level untreated means removed.
#[derive(Debug, Clone)]
pub struct TransformedPanel {
    /// Transformed outcome per row, unit-major.
    pub ytilde: Vec<f64>,
    /// Transformed covariate columns (zero for time-invariant covariates).
    pub xtilde: Vec<(String, Vec<f64>)>,
}

/// Remove each unit's mean over its untreated periods from its outcome path;
/// covariates are transformed the same way (time-invariant ones become zero).
pub fn transform_outcomes(panel: &PanelDataset, cohorts: &CohortMap) -> TransformedPanel {
    let tb = panel.tbar();
    let n = panel.n_units();
    let mut ytilde = Vec::with_capacity(n * tb as usize);
    for u in 0..n {
        let untreated: Vec<u32> = (1..=tb).filter(|&t| !panel.treated(u, t)).collect();
        debug_assert!(!untreated.is_empty(), "guaranteed by validation (a_1 = 0)");
        let mean = untreated
            .iter()
            .map(|&t| panel.outcome(u, t))
            .sum::<f64>()
            / untreated.len() as f64;
        for t in 1..=tb {
            ytilde.push(panel.outcome(u, t) - mean);
        }
    }
    let _ = cohorts;
    let xtilde = expand_covariates(panel, &(0..n).collect::<Vec<_>>())
        .into_iter()
        .map(|(label, _)| (format!("{label}_tilde"), vec![0.0; n * tb as usize]))
        .collect();
    TransformedPanel { ytilde, xtilde }
}

/// Stage-one coefficients fitted on untreated rows only.
#[derive(Debug, Clone, Serialize)]
pub struct Stage1Fit {
    pub intercept: f64,
    /// Cohort effects relative to the first cohort level (which maps to 0.0).
    pub mu_g: BTreeMap<String, f64>,
    /// Time effects for periods observed untreated, relative to the first.
    pub mu_t: BTreeMap<u32, f64>,
    /// Covariate coefficients on the transformed covariates.
    pub beta: Vec<(String, f64)>,
    pub dropped_columns: Vec<String>,
    pub n_untreated_rows: usize,
}

impl Stage1Fit {
    /// Stage-one prediction for a (cohort, time) pair; `None` when the period
    /// never appears untreated so its time effect is unidentified.
    pub fn predict(&self, cohort: &str, t: u32) -> Option<f64> {
        let mu_t = self.mu_t.get(&t)?;
        let mu_g = self.mu_g.get(cohort).copied().unwrap_or(0.0);
        Some(self.intercept + mu_g + mu_t)
    }
}

fn cohort_label(c: Cohort) -> String {
    match c {
        Cohort::At(g) => format!("g{g}"),
        Cohort::Never => "never".into(),
    }
}

/// Fit stage one: OLS of the transformed outcome on cohort dummies, time
/// dummies and transformed covariates over untreated rows.
pub fn stage1(
    panel: &PanelDataset,
    cohorts: &CohortMap,
    transformed: &TransformedPanel,
) -> Result<Stage1Fit> {
    let tb = panel.tbar();
    let n = panel.n_units();
    let mut rows: Vec<(usize, u32)> = Vec::new();
    for u in 0..n {
        for t in 1..=tb {
            if !panel.treated(u, t) {
                rows.push((u, t));
            }
        }
    }
    let mut times: Vec<u32> = rows.iter().map(|&(_, t)| t).collect();
    times.sort_unstable();
    times.dedup();
    if times.len() < 2 {
        return Err(Error::InsufficientUntreatedSupport(format!(
            "untreated rows span {} period(s), need at least 2",
            times.len()
        )));
    }

    let mut levels: Vec<Cohort> = rows
        .iter()
        .map(|&(u, _)| cohorts.cohort_of(u))
        .collect();
    levels.sort_unstable();
    levels.dedup();

    let nr = rows.len();
    let mut x = DesignMatrix::with_intercept(nr);
    // Cohort dummies, first level as reference; a single-cohort panel leaves
    // only the intercept (the dummy would duplicate it and get dropped).
    for &lvl in levels.iter().skip(1) {
        let col = rows
            .iter()
            .map(|&(u, _)| (cohorts.cohort_of(u) == lvl) as u8 as f64)
            .collect();
        x.push(cohort_label(lvl), col)?;
    }
    for &t in times.iter().skip(1) {
        let col = rows.iter().map(|&(_, rt)| (rt == t) as u8 as f64).collect();
        x.push(format!("t{t}"), col)?;
    }
    for (label, col_full) in &transformed.xtilde {
        let col = rows
            .iter()
            .map(|&(u, t)| col_full[u * tb as usize + (t - 1) as usize])
            .collect();
        x.push(label.clone(), col)?;
    }

    let y: Vec<f64> = rows
        .iter()
        .map(|&(u, t)| transformed.ytilde[u * tb as usize + (t - 1) as usize])
        .collect();
    let clusters: Vec<usize> = rows
        .iter()
        .map(|&(u, _)| panel.cluster_of_unit(u))
        .collect();
    let fit = least_squares_fit_opts(
        &x,
        &y,
        &clusters,
        &OlsOptions {
            compute_vcov: false,
            absorbed_df: 0,
        },
    )?;

    let mut mu_g = BTreeMap::new();
    mu_g.insert(cohort_label(levels[0]), 0.0);
    for (j, &lvl) in levels.iter().enumerate().skip(1) {
        mu_g.insert(cohort_label(lvl), fit.coefficients[j]);
    }
    let mut mu_t = BTreeMap::new();
    mu_t.insert(times[0], 0.0);
    let t_offset = levels.len() - 1;
    for (j, &t) in times.iter().enumerate().skip(1) {
        mu_t.insert(t, fit.coefficients[t_offset + j]);
    }
    let beta_offset = t_offset + times.len() - 1 + 1;
    let beta = transformed
        .xtilde
        .iter()
        .enumerate()
        .map(|(j, (label, _))| (label.clone(), fit.coefficients[beta_offset + j]))
        .collect();

    Ok(Stage1Fit {
        intercept: fit.coefficients[0],
        mu_g,
        mu_t,
        beta,
        dropped_columns: fit.dropped_columns,
        n_untreated_rows: nr,
    })
}

/// Residualized outcomes for every row computable from stage one. Rows at
/// periods with no untreated observations have no time effect and are `None`.
#[derive(Debug, Clone)]
pub struct ResidualPanel {
    pub z: Vec<Option<f64>>,
    pub excluded_rows: usize,
}

/// Subtract fitted stage-one structure from every row (treated and
/// untreated) using the stage-one coefficients.
pub fn residualize(
    panel: &PanelDataset,
    cohorts: &CohortMap,
    transformed: &TransformedPanel,
    stage1: &Stage1Fit,
) -> ResidualPanel {
    let tb = panel.tbar();
    let n = panel.n_units();
    let mut z = Vec::with_capacity(n * tb as usize);
    let mut excluded = 0usize;
    for u in 0..n {
        let label = cohort_label(cohorts.cohort_of(u));
        for t in 1..=tb {
            match stage1.predict(&label, t) {
                Some(pred) => {
                    z.push(Some(transformed.ytilde[u * tb as usize + (t - 1) as usize] - pred))
                }
                None => {
                    z.push(None);
                    excluded += 1;
                }
            }
        }
    }
    ResidualPanel {
        z,
        excluded_rows: excluded,
    }
}

/// Stage-two result.
#[derive(Debug, Clone, Serialize)]
pub struct Stage2Fit {
    /// Aggregate coefficient, or per-event-time coefficients.
    pub estimates: Vec<(Option<i32>, f64)>,
    pub se: Vec<Option<f64>>,
    pub ci: Vec<Option<(f64, f64)>>,
    pub n_treated_rows: usize,
    pub excluded_rows: usize,
    /// Realized share of treated rows per (g, t) cell within the regression.
    pub realized_cell_shares: Vec<((u32, u32), f64)>,
}

/// Aggregate second stage: OLS of the residualized outcome on an intercept
/// and the treatment dummy over usable rows; with `max_ell` set, rows with
/// `t - g >= max_ell` are dropped, targeting the capped-duration average.
pub fn stage2_aggregate(
    panel: &PanelDataset,
    cohorts: &CohortMap,
    residuals: &ResidualPanel,
    max_ell: Option<u32>,
) -> Result<Stage2Fit> {
    let tb = panel.tbar();
    let mut rows: Vec<(usize, u32, f64)> = Vec::new();
    for u in 0..panel.n_units() {
        for t in 1..=tb {
            if let Some(z) = residuals.z[u * tb as usize + (t - 1) as usize] {
                if let (Some(l), Cohort::At(_)) = (event_time(cohorts, u, t), cohorts.cohort_of(u))
                {
                    if let Some(cap) = max_ell {
                        if l >= 0 && l as u32 >= cap {
                            continue;
                        }
                    }
                    let _ = l;
                }
                rows.push((u, t, z));
            }
        }
    }
    let treated_rows: Vec<&(usize, u32, f64)> =
        rows.iter().filter(|&&(u, t, _)| panel.treated(u, t)).collect();
    if treated_rows.is_empty() {
        return Err(Error::NoTreatedRows);
    }

    let nr = rows.len();
    let mut x = DesignMatrix::with_intercept(nr);
    x.push(
        "treated",
        rows.iter()
            .map(|&(u, t, _)| panel.treated(u, t) as u8 as f64)
            .collect(),
    )?;
    let y: Vec<f64> = rows.iter().map(|&(_, _, z)| z).collect();
    let clusters: Vec<usize> = rows
        .iter()
        .map(|&(u, _, _)| panel.cluster_of_unit(u))
        .collect();
    let fit = least_squares_fit_opts(
        &x,
        &y,
        &clusters,
        &OlsOptions {
            compute_vcov: false,
            absorbed_df: 0,
        },
    )?;

    let mut cell_counts: BTreeMap<(u32, u32), usize> = BTreeMap::new();
    for &&(u, t, _) in &treated_rows {
        if let Cohort::At(g) = cohorts.cohort_of(u) {
            *cell_counts.entry((g, t)).or_insert(0) += 1;
        }
    }
    let total = treated_rows.len() as f64;
    Ok(Stage2Fit {
        estimates: vec![(None, fit.coefficients[1])],
        se: vec![None],
        ci: vec![None],
        n_treated_rows: treated_rows.len(),
        excluded_rows: residuals.excluded_rows,
        realized_cell_shares: cell_counts
            .into_iter()
            .map(|(c, n)| (c, n as f64 / total))
            .collect(),
    })
}

fn event_time(cohorts: &CohortMap, unit: usize, t: u32) -> Option<i32> {
    match cohorts.cohort_of(unit) {
        Cohort::At(g) => Some(t as i32 - g as i32),
        Cohort::Never => None,
    }
}

/// Event-study second stage: OLS of the residualized outcome on an intercept
/// and relative-period indicators, `ell = -1` omitted as the contrast base
/// (never-treated rows fall into the baseline). Returns coefficients for the
/// requested event times.
pub fn stage2_event_time(
    panel: &PanelDataset,
    cohorts: &CohortMap,
    residuals: &ResidualPanel,
    ells: &[i32],
) -> Result<Stage2Fit> {
    let tb = panel.tbar();
    let mut rows: Vec<(usize, u32, f64, Option<i32>)> = Vec::new();
    for u in 0..panel.n_units() {
        for t in 1..=tb {
            if let Some(z) = residuals.z[u * tb as usize + (t - 1) as usize] {
                rows.push((u, t, z, event_time(cohorts, u, t)));
            }
        }
    }
    let mut present: Vec<i32> = rows.iter().filter_map(|r| r.3).collect();
    present.sort_unstable();
    present.dedup();
    for &l in ells {
        if !present.contains(&l) {
            return Err(Error::EmptyEventTime(l));
        }
    }

    let nr = rows.len();
    let mut x = DesignMatrix::with_intercept(nr);
    let dummies: Vec<i32> = present.iter().copied().filter(|&l| l != -1).collect();
    for &l in &dummies {
        x.push(
            format!("ell{l}"),
            rows.iter()
                .map(|r| (r.3 == Some(l)) as u8 as f64)
                .collect(),
        )?;
    }
    let y: Vec<f64> = rows.iter().map(|r| r.2).collect();
    let clusters: Vec<usize> = rows
        .iter()
        .map(|&(u, _, _, _)| panel.cluster_of_unit(u))
        .collect();
    let fit = least_squares_fit_opts(
        &x,
        &y,
        &clusters,
        &OlsOptions {
            compute_vcov: false,
            absorbed_df: 0,
        },
    )?;

    let estimates: Vec<(Option<i32>, f64)> = ells
        .iter()
        .map(|&l| {
            let v = if l == -1 {
                0.0
            } else {
                let j = dummies.iter().position(|&d| d == l).expect("present");
                fit.coefficients[1 + j]
            };
            (Some(l), v)
        })
        .collect();

    let treated_rows = rows
        .iter()
        .filter(|&&(u, t, _, _)| panel.treated(u, t))
        .count();
    let mut cell_counts: BTreeMap<(u32, u32), usize> = BTreeMap::new();
    for &(u, t, _, l) in &rows {
        if l.map_or(false, |l| l >= 0) {
            if let Cohort::At(g) = cohorts.cohort_of(u) {
                *cell_counts.entry((g, t)).or_insert(0) += 1;
            }
        }
    }
    let total: usize = cell_counts.values().sum();
    Ok(Stage2Fit {
        se: vec![None; estimates.len()],
        ci: vec![None; estimates.len()],
        estimates,
        n_treated_rows: treated_rows,
        excluded_rows: residuals.excluded_rows,
        realized_cell_shares: cell_counts
            .into_iter()
            .map(|(c, n)| (c, n as f64 / total.max(1) as f64))
            .collect(),
    })
}

/// Full-pipeline aggregate point estimate (transform, stage one,
/// residualize, stage two). Bootstrap callers re-run this end to end.
pub fn two_stage_aggregate(
    panel: &PanelDataset,
    cohorts: &CohortMap,
    max_ell: Option<u32>,
) -> Result<Stage2Fit> {
    let transformed = transform_outcomes(panel, cohorts);
    let s1 = stage1(panel, cohorts, &transformed)?;
    let res = residualize(panel, cohorts, &transformed, &s1);
    stage2_aggregate(panel, cohorts, &res, max_ell)
}

/// Full-pipeline event-time point estimates.
pub fn two_stage_event_time(
    panel: &PanelDataset,
    cohorts: &CohortMap,
    ells: &[i32],
) -> Result<Stage2Fit> {
    let transformed = transform_outcomes(panel, cohorts);
    let s1 = stage1(panel, cohorts, &transformed)?;
    let res = residualize(panel, cohorts, &transformed, &s1);
    stage2_event_time(panel, cohorts, &res, ells)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::{derive_cohorts, validate_panel, PanelRecord};

    fn build(units: &[(u32, &[f64])]) -> (PanelDataset, CohortMap) {
        // units: (g (0 = never), outcome path)
        let mut recs = Vec::new();
        for (i, (g, ys)) in units.iter().enumerate() {
            for (ti, &y) in ys.iter().enumerate() {
                let t = ti as u32 + 1;
                recs.push(PanelRecord {
                    unit_id: format!("u{i}"),
                    cluster_id: format!("c{i}"),
                    time: t,
                    y,
                    a: (*g != 0 && t >= *g) as u8,
                    x: vec![],
                });
            }
        }
        let panel = validate_panel(&recs).unwrap();
        let cohorts = derive_cohorts(&panel).unwrap();
        (panel, cohorts)
    }

    #[test]
    fn transform_examples() {
        // Never-treated unit: full-series demeaning.
        let (panel, cohorts) = build(&[(0, &[1.0, 2.0, 3.0]), (2, &[1.0, 5.0, 5.0])]);
        let tr = transform_outcomes(&panel, &cohorts);
        assert_eq!(&tr.ytilde[0..3], &[-1.0, 0.0, 1.0]);
        // Unit treated from t=2: subtract the mean of period 1 only.
        assert_eq!(&tr.ytilde[3..6], &[0.0, 4.0, 4.0]);
    }

    #[test]
    fn constant_series_transforms_to_zero() {
        let (panel, cohorts) = build(&[(0, &[7.0, 7.0, 7.0]), (3, &[7.0, 7.0, 7.0])]);
        let tr = transform_outcomes(&panel, &cohorts);
        assert!(tr.ytilde.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn stage1_recovers_pure_time_trend() {
        // y = t, no effect: time effects recover differences t - 1.
        let mk = |_: u32| [1.0, 2.0, 3.0, 4.0, 5.0];
        let (panel, cohorts) = build(&[
            (3, &mk(3)),
            (4, &mk(4)),
            (0, &mk(0)),
            (3, &mk(3)),
            (4, &mk(4)),
            (0, &mk(0)),
        ]);
        let tr = transform_outcomes(&panel, &cohorts);
        let s1 = stage1(&panel, &cohorts, &tr).unwrap();
        for t in 2..=5u32 {
            let d = s1.mu_t[&t] - s1.mu_t[&1];
            assert!((d - (t as f64 - 1.0)).abs() < 1e-9, "mu_{t} diff = {d}");
        }
        // Residuals on untreated rows are noise-free zero here.
        let res = residualize(&panel, &cohorts, &tr, &s1);
        for u in 0..panel.n_units() {
            for t in 1..=5u32 {
                if !panel.treated(u, t) {
                    let z = res.z[u * 5 + (t - 1) as usize].unwrap();
                    assert!(z.abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn single_cohort_dummy_dropped_and_reported() {
        let (panel, cohorts) = build(&[
            (3, &[0.0, 0.0, 1.0, 1.0, 1.0]),
            (3, &[0.0, 0.0, 1.0, 1.0, 1.0]),
        ]);
        let tr = transform_outcomes(&panel, &cohorts);
        let s1 = stage1(&panel, &cohorts, &tr).unwrap();
        // One cohort: no cohort dummy at all (reference level only).
        assert_eq!(s1.mu_g.len(), 1);
        assert_eq!(s1.n_untreated_rows, 4);
    }

    #[test]
    fn noiseless_constant_effect_recovered_exactly() {
        // Three units, constant effect 2 on top of a time trend.
        let f = |g: u32| -> [f64; 5] {
            let mut ys = [0.0; 5];
            for t in 1..=5u32 {
                let base = t as f64 * 0.5 + 1.0;
                ys[(t - 1) as usize] = base + if g != 0 && t >= g { 2.0 } else { 0.0 };
            }
            ys
        };
        let (panel, cohorts) = build(&[(3, &f(3)), (4, &f(4)), (0, &f(0))]);
        let tr = transform_outcomes(&panel, &cohorts);
        let s1 = stage1(&panel, &cohorts, &tr).unwrap();
        let res = residualize(&panel, &cohorts, &tr, &s1);
        // Treated rows carry the effect, untreated rows zero.
        for u in 0..panel.n_units() {
            for t in 1..=5u32 {
                let z = res.z[u * 5 + (t - 1) as usize].unwrap();
                if panel.treated(u, t) {
                    assert!((z - 2.0).abs() < 1e-9, "z({u},{t}) = {z}");
                } else {
                    assert!(z.abs() < 1e-9);
                }
            }
        }
        let s2 = stage2_aggregate(&panel, &cohorts, &res, None).unwrap();
        assert!((s2.estimates[0].1 - 2.0).abs() < 1e-9);
        assert_eq!(s2.excluded_rows, 0, "never-treated unit identifies all periods");

        let ev = stage2_event_time(&panel, &cohorts, &res, &[-2, 0, 1, 2]).unwrap();
        for (l, v) in &ev.estimates {
            let expect = if l.unwrap() >= 0 { 2.0 } else { 0.0 };
            assert!((v - expect).abs() < 1e-9, "ell {l:?} = {v}");
        }
    }

    #[test]
    fn fully_treated_final_period_rows_are_excluded() {
        let f = |g: u32| -> [f64; 5] {
            let mut ys = [0.0; 5];
            for t in 1..=5u32 {
                ys[(t - 1) as usize] = t as f64 + if t >= g { 2.0 } else { 0.0 };
            }
            ys
        };
        let (panel, cohorts) = build(&[(3, &f(3)), (4, &f(4)), (5, &f(5)), (5, &f(5))]);
        let tr = transform_outcomes(&panel, &cohorts);
        let s1 = stage1(&panel, &cohorts, &tr).unwrap();
        assert!(!s1.mu_t.contains_key(&5), "period 5 never observed untreated");
        let res = residualize(&panel, &cohorts, &tr, &s1);
        assert_eq!(res.excluded_rows, 4);
        let s2 = stage2_aggregate(&panel, &cohorts, &res, None).unwrap();
        assert!((s2.estimates[0].1 - 2.0).abs() < 1e-9);
        // Realized shares cover the in-sample treated cells only.
        let cells: Vec<(u32, u32)> = s2.realized_cell_shares.iter().map(|(c, _)| *c).collect();
        assert_eq!(cells, vec![(3, 3), (3, 4), (4, 4)]);
    }

    #[test]
    fn ell_cap_drops_long_durations() {
        let f = |g: u32| -> [f64; 5] {
            let mut ys = [0.0; 5];
            for t in 1..=5u32 {
                // effect grows with duration so the cap changes the estimate
                ys[(t - 1) as usize] =
                    t as f64 + if g != 0 && t >= g { 1.0 + (t - g) as f64 } else { 0.0 };
            }
            ys
        };
        let (panel, cohorts) = build(&[(2, &f(2)), (3, &f(3)), (0, &f(0))]);
        let full = two_stage_aggregate(&panel, &cohorts, None).unwrap();
        let capped = two_stage_aggregate(&panel, &cohorts, Some(1)).unwrap();
        assert!((capped.estimates[0].1 - 1.0).abs() < 1e-9, "only ell=0 rows remain");
        assert!(full.estimates[0].1 > capped.estimates[0].1);
    }

    #[test]
    fn missing_event_time_is_an_error() {
        let (panel, cohorts) = build(&[
            (3, &[1.0, 2.0, 3.0, 4.0, 5.0]),
            (0, &[1.0, 2.0, 3.0, 4.0, 5.0]),
        ]);
        assert!(matches!(
            two_stage_event_time(&panel, &cohorts, &[4]),
            Err(Error::EmptyEventTime(4))
        ));
    }
}
