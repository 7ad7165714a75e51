//! Interaction-weighted estimator: a saturated cohort x relative-period
//! event-study regression with unit and time fixed effects absorbed, cohort
//! coefficients combined into event-time and aggregate summaries with
//! cohort-share weights.
//!
//! The reference cohort is the never-treated group when available, otherwise
//! the last-treated cohort. With a last-treated reference, all periods from
//! its adoption onward are excluded from the estimation sample (no untreated
//! observations remain there), so cells at those periods are inestimable.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::kernels::{
    absorb_fixed_effects, expand_covariates, least_squares_fit_opts, DesignMatrix, OlsOptions,
};
use crate::panel::{Cohort, CohortMap, PanelDataset};

/// One estimable cohort x relative-period coefficient.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct AlphaCell {
    pub g: u32,
    pub ell: i32,
    pub estimate: f64,
}

/// Saturated event-study coefficients with their cluster-robust covariance.
#[derive(Debug, Clone)]
pub struct SaturatedCoefficients {
    pub alpha: Vec<AlphaCell>,
    /// Covariance over the alpha cells, in `alpha` order.
    pub vcov: DMatrix<f64>,
    pub reference: Cohort,
    /// Relative period omitted from the regression (contrast base).
    pub omitted_period: i32,
    pub dropped_columns: Vec<String>,
    pub n_rows: usize,
}

impl SaturatedCoefficients {
    pub fn cell(&self, g: u32, ell: i32) -> Option<&AlphaCell> {
        self.alpha.iter().find(|c| c.g == g && c.ell == ell)
    }
}

/// Event-time or aggregate interaction-weighted effect.
#[derive(Debug, Clone, Serialize)]
pub struct IwEffect {
    /// `Some(ell)` for an event-time effect, `None` for the aggregate.
    pub ell: Option<i32>,
    pub estimate: f64,
    /// Delta-method standard error treating cohort shares as fixed.
    pub se: f64,
    pub ci: (f64, f64),
    /// Cohort weights actually applied (sum to one).
    pub weights: Vec<(u32, f64)>,
}

/// Fit the saturated regression: outcome on indicators
/// `1(G=g) * 1(t-g=ell)` for every non-reference cohort and `ell != -1`,
/// unit and time fixed effects absorbed, covariates entered additively after
/// within-unit demeaning (time-invariant covariates demean to zero and are
/// dropped), cluster-robust covariance at the cluster level.
pub fn fit_saturated(panel: &PanelDataset, cohorts: &CohortMap) -> Result<SaturatedCoefficients> {
    let reference = if cohorts.has_never_treated() {
        Cohort::Never
    } else if cohorts.support().len() >= 2 {
        Cohort::At(cohorts.gbar())
    } else {
        return Err(Error::NoReferenceCohort);
    };

    // Periods kept in the sample: all of them with a never-treated reference,
    // otherwise only those before the reference cohort adopts.
    let t_max = match reference {
        Cohort::Never => panel.tbar(),
        Cohort::At(gbar) => gbar - 1,
    };
    if t_max < 2 {
        return Err(Error::NoReferenceCohort);
    }

    let n_units = panel.n_units();
    let n_rows = n_units * t_max as usize;
    let mut unit_factor = Vec::with_capacity(n_rows);
    let mut time_factor = Vec::with_capacity(n_rows);
    let mut y = Vec::with_capacity(n_rows);
    let mut clusters = Vec::with_capacity(n_rows);
    for u in 0..n_units {
        for t in 1..=t_max {
            unit_factor.push(u);
            time_factor.push((t - 1) as usize);
            y.push(panel.outcome(u, t));
            clusters.push(panel.cluster_of_unit(u));
        }
    }

    // Cell dummies for non-reference cohorts at every in-sample period,
    // skipping the omitted relative period -1.
    let mut x = DesignMatrix::new(n_rows);
    let mut cells: Vec<(u32, i32)> = Vec::new();
    for &g in cohorts.support() {
        if Cohort::At(g) == reference {
            continue;
        }
        for t in 1..=t_max {
            let ell = t as i32 - g as i32;
            if ell == -1 {
                continue;
            }
            cells.push((g, ell));
            let mut col = vec![0.0; n_rows];
            for (row, (&u, &tf)) in unit_factor.iter().zip(&time_factor).enumerate() {
                if cohorts.cohort_of(u) == Cohort::At(g) && tf == (t - 1) as usize {
                    col[row] = 1.0;
                }
            }
            x.push(format!("g{g}l{ell}"), col)?;
        }
    }
    if cells.is_empty() {
        return Err(Error::NoReferenceCohort);
    }

    // Covariates, additively; the unit-FE absorption is the within-unit
    // demeaning, which zeroes time-invariant columns.
    let units_per_row: Vec<usize> = unit_factor.clone();
    for (label, unit_col) in expand_covariates(panel, &(0..n_units).collect::<Vec<_>>()) {
        let col: Vec<f64> = units_per_row.iter().map(|&u| unit_col[u]).collect();
        x.push(label, col)?;
    }

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

    let mut alpha = Vec::new();
    let mut keep_idx = Vec::new();
    for (j, &(g, ell)) in cells.iter().enumerate() {
        if fit.retained.contains(&j) {
            alpha.push(AlphaCell {
                g,
                ell,
                estimate: fit.coefficients[j],
            });
            keep_idx.push(j);
        }
    }
    let k = keep_idx.len();
    let mut vcov = DMatrix::zeros(k, k);
    for (r, &jr) in keep_idx.iter().enumerate() {
        for (c, &jc) in keep_idx.iter().enumerate() {
            vcov[(r, c)] = fit.vcov[(jr, jc)];
        }
    }

    Ok(SaturatedCoefficients {
        alpha,
        vcov,
        reference,
        omitted_period: -1,
        dropped_columns: fit.dropped_columns,
        n_rows,
    })
}

/// Interaction-weighted event-time effect: cohort coefficients at `ell`
/// combined with conditional cohort shares over the cohorts that contribute.
pub fn iw_event_time(
    coeffs: &SaturatedCoefficients,
    cohorts: &CohortMap,
    tbar: u32,
    ell: i32,
) -> Result<IwEffect> {
    let contributing: Vec<&AlphaCell> = coeffs
        .alpha
        .iter()
        .filter(|c| {
            let t = c.g as i64 + ell as i64;
            c.ell == ell && t >= 1 && t <= tbar as i64
        })
        .collect();
    if contributing.is_empty() {
        return Err(Error::NoContributingCohort(ell));
    }
    let denom: f64 = contributing
        .iter()
        .map(|c| cohorts.share_of(Cohort::At(c.g)))
        .sum();
    let weights: Vec<(u32, f64)> = contributing
        .iter()
        .map(|c| (c.g, cohorts.share_of(Cohort::At(c.g)) / denom))
        .collect();
    let (estimate, se) = weighted_combination(coeffs, &contributing, &weights);
    Ok(IwEffect {
        ell: Some(ell),
        estimate,
        se,
        ci: (estimate - Z95 * se, estimate + Z95 * se),
        weights,
    })
}

/// Simple average of event-time effects over `ells` (default: every
/// estimable nonnegative event time).
pub fn iw_aggregate(
    coeffs: &SaturatedCoefficients,
    cohorts: &CohortMap,
    tbar: u32,
    ells: Option<&[i32]>,
) -> Result<IwEffect> {
    let chosen: Vec<i32> = match ells {
        Some(e) => e.to_vec(),
        None => {
            let mut ls: Vec<i32> = coeffs
                .alpha
                .iter()
                .filter(|c| c.ell >= 0)
                .map(|c| c.ell)
                .collect();
            ls.sort_unstable();
            ls.dedup();
            ls
        }
    };
    if chosen.is_empty() {
        return Err(Error::NoContributingCohort(0));
    }

    // Stack the per-ell weight vectors over all alpha cells for one delta step.
    let mut stacked = vec![0.0f64; coeffs.alpha.len()];
    let mut estimate = 0.0;
    let mut weights: Vec<(u32, f64)> = Vec::new();
    for &ell in &chosen {
        let per = iw_event_time(coeffs, cohorts, tbar, ell)?;
        estimate += per.estimate / chosen.len() as f64;
        for (g, w) in per.weights {
            let idx = coeffs
                .alpha
                .iter()
                .position(|c| c.g == g && c.ell == ell)
                .expect("contributing cell exists");
            stacked[idx] += w / chosen.len() as f64;
            weights.push((g, w / chosen.len() as f64));
        }
    }
    let mut var = 0.0;
    for (i, wi) in stacked.iter().enumerate() {
        if *wi == 0.0 {
            continue;
        }
        for (j, wj) in stacked.iter().enumerate() {
            if *wj != 0.0 {
                var += wi * wj * coeffs.vcov[(i, j)];
            }
        }
    }
    let se = var.max(0.0).sqrt();
    Ok(IwEffect {
        ell: None,
        estimate,
        se,
        ci: (estimate - Z95 * se, estimate + Z95 * se),
        weights,
    })
}

const Z95: f64 = 1.959963984540054;

fn weighted_combination(
    coeffs: &SaturatedCoefficients,
    cells: &[&AlphaCell],
    weights: &[(u32, f64)],
) -> (f64, f64) {
    let mut estimate = 0.0;
    let mut var = 0.0;
    let idx: Vec<usize> = cells
        .iter()
        .map(|c| {
            coeffs
                .alpha
                .iter()
                .position(|a| a.g == c.g && a.ell == c.ell)
                .expect("cell present")
        })
        .collect();
    for (i, cell) in cells.iter().enumerate() {
        let w = weights[i].1;
        estimate += w * cell.estimate;
        for (j, _) in cells.iter().enumerate() {
            var += w * weights[j].1 * coeffs.vcov[(idx[i], idx[j])];
        }
    }
    (estimate, var.max(0.0).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::{derive_cohorts, validate_panel, PanelRecord};

    fn panel_from(f: impl Fn(u32, u32) -> f64, gs: &[u32], per_cohort: usize) -> PanelDataset {
        // gs lists cohort periods (0 = never treated), tbar = 5
        let mut recs = Vec::new();
        let mut id = 0;
        for &g in gs {
            for _ in 0..per_cohort {
                for t in 1..=5u32 {
                    let treated = g != 0 && t >= g;
                    recs.push(PanelRecord {
                        unit_id: format!("u{id}"),
                        cluster_id: format!("c{id}"),
                        time: t,
                        y: f(g, t) * treated as u8 as f64 + t as f64 + id as f64 * 0.1,
                        a: treated as u8,
                        x: vec![],
                    });
                }
                id += 1;
            }
        }
        validate_panel(&recs).unwrap()
    }

    #[test]
    fn estimable_cells_with_last_treated_reference() {
        let panel = panel_from(|_, _| 0.0, &[3, 4, 5], 4);
        let cohorts = derive_cohorts(&panel).unwrap();
        let fit = fit_saturated(&panel, &cohorts).unwrap();
        assert_eq!(fit.reference, Cohort::At(5));
        let mut cells: Vec<(u32, i32)> = fit.alpha.iter().map(|c| (c.g, c.ell)).collect();
        cells.sort();
        assert_eq!(
            cells,
            vec![(3, -2), (3, 0), (3, 1), (4, -3), (4, -2), (4, 0)],
            "periods at and after the reference adoption are excluded; ell=-1 omitted"
        );
    }

    #[test]
    fn zero_effect_gives_zero_alphas() {
        let panel = panel_from(|_, _| 0.0, &[3, 4, 5], 5);
        let cohorts = derive_cohorts(&panel).unwrap();
        let fit = fit_saturated(&panel, &cohorts).unwrap();
        for c in &fit.alpha {
            assert!(c.estimate.abs() < 1e-9, "alpha({},{}) = {}", c.g, c.ell, c.estimate);
        }
    }

    #[test]
    fn constant_effect_recovered_in_post_cells() {
        let panel = panel_from(|_, _| 2.0, &[3, 4, 5], 5);
        let cohorts = derive_cohorts(&panel).unwrap();
        let fit = fit_saturated(&panel, &cohorts).unwrap();
        for c in fit.alpha.iter().filter(|c| c.ell >= 0) {
            assert!((c.estimate - 2.0).abs() < 1e-9);
        }
        for c in fit.alpha.iter().filter(|c| c.ell < 0) {
            assert!(c.estimate.abs() < 1e-9);
        }
    }

    #[test]
    fn two_by_two_matches_hand_did_with_never_treated_reference() {
        let recs = vec![
            ("a", "ca", 1u32, 1.0, 0u8),
            ("a", "ca", 2, 4.0, 1),
            ("b", "cb", 1, 1.0, 0),
            ("b", "cb", 2, 2.0, 0),
        ]
        .into_iter()
        .map(|(u, c, t, y, a)| PanelRecord {
            unit_id: u.into(),
            cluster_id: c.into(),
            time: t,
            y,
            a,
            x: vec![],
        })
        .collect::<Vec<_>>();
        let panel = validate_panel(&recs).unwrap();
        let cohorts = derive_cohorts(&panel).unwrap();
        let fit = fit_saturated(&panel, &cohorts).unwrap();
        assert_eq!(fit.reference, Cohort::Never);
        let e = iw_event_time(&fit, &cohorts, 2, 0).unwrap();
        assert!((e.estimate - 2.0).abs() < 1e-10);
        assert_eq!(e.weights, vec![(2, 1.0)]);
    }

    #[test]
    fn level_shifts_leave_alphas_unchanged() {
        let panel = panel_from(|_, _| 1.0, &[3, 4, 5], 4);
        let cohorts = derive_cohorts(&panel).unwrap();
        let base = fit_saturated(&panel, &cohorts).unwrap();

        // Add a unit-specific constant and a common time shock.
        let mut recs = panel.to_records();
        for r in &mut recs {
            let uid: u64 = r.unit_id[1..].parse().unwrap();
            r.y += uid as f64 * 7.0 + if r.time == 3 { 11.0 } else { 0.0 };
        }
        let p2 = validate_panel(&recs).unwrap();
        let c2 = derive_cohorts(&p2).unwrap();
        let shifted = fit_saturated(&p2, &c2).unwrap();
        for (a, b) in base.alpha.iter().zip(&shifted.alpha) {
            assert_eq!((a.g, a.ell), (b.g, b.ell));
            assert!((a.estimate - b.estimate).abs() < 1e-8);
        }
    }

    #[test]
    fn event_time_weights_sum_to_one_and_average_constant_cells() {
        let panel = panel_from(|_, _| 2.0, &[3, 4, 5], 6);
        let cohorts = derive_cohorts(&panel).unwrap();
        let fit = fit_saturated(&panel, &cohorts).unwrap();
        let e0 = iw_event_time(&fit, &cohorts, 5, 0).unwrap();
        let wsum: f64 = e0.weights.iter().map(|(_, w)| w).sum();
        assert!((wsum - 1.0).abs() < 1e-12);
        assert!((e0.estimate - 2.0).abs() < 1e-9, "constant cells average to 2");
        // Single contributing cohort at ell = 1.
        let e1 = iw_event_time(&fit, &cohorts, 5, 1).unwrap();
        assert_eq!(e1.weights.len(), 1);
        let agg = iw_aggregate(&fit, &cohorts, 5, None).unwrap();
        assert!((agg.estimate - 2.0).abs() < 1e-9, "aggregate of constant cells");
        // Singleton ell set equals the event-time effect.
        let single = iw_aggregate(&fit, &cohorts, 5, Some(&[1])).unwrap();
        assert!((single.estimate - e1.estimate).abs() < 1e-12);
        assert!(matches!(
            iw_event_time(&fit, &cohorts, 5, 2),
            Err(Error::NoContributingCohort(2))
        ));
    }

    #[test]
    fn single_cohort_without_never_treated_is_an_error() {
        let panel = panel_from(|_, _| 1.0, &[3], 4);
        let cohorts = derive_cohorts(&panel).unwrap();
        assert!(matches!(
            fit_saturated(&panel, &cohorts),
            Err(Error::NoReferenceCohort)
        ));
    }
}
