//! Group-time average treatment effects via outcome regression, inverse
//! probability weighting, and their doubly robust combination, with
//! selectable control groups and treatment anticipation.
//!
//! For a cell (g, t) the outcome difference is `dY = Y_t - Y_{g-delta-1}`.
//! The treated weight is `1(G=g)` normalized to mean one over the analysis
//! sample, the control weight is proportional to `pi(x)/(1-pi(x))` over the
//! selected controls, likewise normalized, and the estimate is the weighted
//! mean of `dY - m(x)` with the outcome model fit on controls only.

use rayon::prelude::*;
use serde::Serialize;

use crate::aggregate::{
    aggregate, cluster_bootstrap, weights_aggregate, weights_event_time, AggregateResult,
    BootstrapSpec, WeightKind,
};
use crate::error::{Error, Result};
use crate::kernels::{
    binary_logit_fit, expand_covariates, least_squares_fit_opts, DesignMatrix, FitResult,
    GpsModel, OlsOptions,
};
use crate::panel::{derive_cohorts, Cohort, CohortMap, ControlGroup, EstimandSpec, PanelDataset};

/// Which nuisance enters the plug-in estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum CsMethod {
    OutcomeRegression,
    Ipw,
    DoublyRobust,
}

impl CsMethod {
    fn needs_outcome_model(self) -> bool {
        matches!(self, CsMethod::OutcomeRegression | CsMethod::DoublyRobust)
    }

    fn needs_gps(self) -> bool {
        matches!(self, CsMethod::Ipw | CsMethod::DoublyRobust)
    }
}

/// One estimated group-time effect.
#[derive(Debug, Clone, Serialize)]
pub struct GroupTimeEffect {
    pub g: u32,
    pub t: u32,
    pub estimate: f64,
    pub se: Option<f64>,
    pub ci: Option<(f64, f64)>,
    pub method: CsMethod,
    pub control_group: ControlGroup,
    pub n_treated: usize,
    pub n_control: usize,
}

/// Fitted nuisances for one (g, t) cell.
#[derive(Debug, Clone)]
pub struct NuisanceFits {
    /// Regression of `dY` on covariates over control units only.
    pub outcome_model: Option<FitResult>,
    /// Generalized propensity score of cohort membership vs the control set.
    pub gps: Option<GpsModel>,
}

/// Control units for the (g, t) cell: `NotYetTreated` selects units outside
/// cohort g that are still untreated through every period entering the
/// contrast — `t + delta` and the base period `g - 1` — so that for
/// pre-treatment cells no control contributes its own post-adoption outcomes
/// (never-treated units always qualify); `NeverTreated` selects units that
/// never enter treatment.
pub fn control_set(
    panel: &PanelDataset,
    cohorts: &CohortMap,
    g: u32,
    t: u32,
    delta: u32,
    control_group: ControlGroup,
) -> Result<Vec<usize>> {
    if g < delta + 2 {
        return Err(Error::InvalidConfig(format!(
            "base period g - delta - 1 = {} must be >= 1",
            g as i64 - delta as i64 - 1
        )));
    }
    let horizon = (t + delta).max(g - 1);
    let controls: Vec<usize> = (0..panel.n_units())
        .filter(|&u| match (control_group, cohorts.cohort_of(u)) {
            (ControlGroup::NeverTreated, c) => c == Cohort::Never,
            (ControlGroup::NotYetTreated, Cohort::Never) => true,
            (ControlGroup::NotYetTreated, Cohort::At(h)) => h != g && h > horizon,
            _ => false,
        })
        .collect();
    if controls.is_empty() {
        return Err(Error::EmptyControlSet { g, t });
    }
    Ok(controls)
}

/// Fit the nuisances required by `method` for cell (g, t).
pub fn fit_nuisances(
    panel: &PanelDataset,
    cohorts: &CohortMap,
    g: u32,
    t: u32,
    spec: &EstimandSpec,
    method: CsMethod,
) -> Result<NuisanceFits> {
    let delta = spec.anticipation;
    let controls = control_set(panel, cohorts, g, t, delta, spec.control_group)?;
    let treated = cohorts.units_in(Cohort::At(g));
    if treated.is_empty() {
        return Err(Error::EmptyControlSet { g, t });
    }
    let base = g - delta - 1;

    let outcome_model = if method.needs_outcome_model() {
        let dy: Vec<f64> = controls
            .iter()
            .map(|&u| panel.outcome(u, t) - panel.outcome(u, base))
            .collect();
        let mut x = DesignMatrix::with_intercept(controls.len());
        for (label, col) in expand_covariates(panel, &controls) {
            x.push(label, col)?;
        }
        let clusters: Vec<usize> = controls.iter().map(|&u| panel.cluster_of_unit(u)).collect();
        Some(least_squares_fit_opts(
            &x,
            &dy,
            &clusters,
            &OlsOptions {
                compute_vcov: false,
                absorbed_df: 0,
            },
        )?)
    } else {
        None
    };

    let gps = if method.needs_gps() {
        let analysis: Vec<usize> = treated.iter().chain(controls.iter()).copied().collect();
        let labels: Vec<u8> = analysis
            .iter()
            .map(|&u| (cohorts.cohort_of(u) == Cohort::At(g)) as u8)
            .collect();
        let mut x = DesignMatrix::with_intercept(analysis.len());
        for (label, col) in expand_covariates(panel, &analysis) {
            x.push(label, col)?;
        }
        let clusters: Vec<usize> = analysis.iter().map(|&u| panel.cluster_of_unit(u)).collect();
        let model = binary_logit_fit(&x, &labels, &clusters)?;
        let max_pi = model.max_fitted();
        if model.quasi_separated || max_pi > 1.0 - spec.overlap_eps {
            return Err(Error::OverlapViolation {
                g,
                t,
                max_pi,
                eps: spec.overlap_eps,
            });
        }
        Some(model)
    } else {
        None
    };

    Ok(NuisanceFits { outcome_model, gps })
}

/// Point estimate of the group-time effect for cell (g, t).
pub fn att_gt(
    panel: &PanelDataset,
    cohorts: &CohortMap,
    g: u32,
    t: u32,
    spec: &EstimandSpec,
    method: CsMethod,
) -> Result<GroupTimeEffect> {
    let delta = spec.anticipation;
    let controls = control_set(panel, cohorts, g, t, delta, spec.control_group)?;
    let treated = cohorts.units_in(Cohort::At(g));
    let nuisances = fit_nuisances(panel, cohorts, g, t, spec, method)?;
    let base = g - delta - 1;

    let analysis: Vec<usize> = treated.iter().chain(controls.iter()).copied().collect();
    let n = analysis.len() as f64;
    let n_treated = treated.len();
    let dy: Vec<f64> = analysis
        .iter()
        .map(|&u| panel.outcome(u, t) - panel.outcome(u, base))
        .collect();

    // Outcome-model predictions for every analysis unit (zero when absent).
    let mhat: Vec<f64> = match &nuisances.outcome_model {
        Some(fit) => {
            let cols = expand_covariates(panel, &analysis);
            analysis
                .iter()
                .enumerate()
                .map(|(i, _)| {
                    let mut v = fit.coefficients[0];
                    for (j, (_, col)) in cols.iter().enumerate() {
                        v += fit.coefficients[j + 1] * col[i];
                    }
                    v
                })
                .collect()
        }
        None => vec![0.0; analysis.len()],
    };

    let estimate = match method {
        CsMethod::OutcomeRegression => {
            let mut s = 0.0;
            for i in 0..n_treated {
                s += dy[i] - mhat[i];
            }
            s / n_treated as f64
        }
        CsMethod::Ipw | CsMethod::DoublyRobust => {
            let gps = nuisances.gps.as_ref().expect("gps fitted for ipw/dr");
            // Raw odds weights over controls, then normalized to mean one.
            let mut w0 = vec![0.0f64; analysis.len()];
            for i in n_treated..analysis.len() {
                let p = gps.fitted[i];
                w0[i] = p / (1.0 - p);
            }
            let w0_sum: f64 = w0.iter().sum();
            if w0_sum <= 0.0 {
                return Err(Error::OverlapViolation {
                    g,
                    t,
                    max_pi: 0.0,
                    eps: spec.overlap_eps,
                });
            }
            let w0_scale = n / w0_sum;
            let w1_scale = n / n_treated as f64;
            let mut s = 0.0;
            for i in 0..analysis.len() {
                let w1 = if i < n_treated { w1_scale } else { 0.0 };
                let adj = if method == CsMethod::DoublyRobust {
                    mhat[i]
                } else {
                    0.0
                };
                s += (w1 - w0[i] * w0_scale) * (dy[i] - adj);
            }
            s / n
        }
    };

    Ok(GroupTimeEffect {
        g,
        t,
        estimate,
        se: None,
        ci: None,
        method,
        control_group: spec.control_group,
        n_treated,
        n_control: controls.len(),
    })
}

/// Status of one table cell: inestimable cells are data, not failures.
#[derive(Debug, Clone, Serialize)]
pub enum CellStatus {
    Estimated(GroupTimeEffect),
    Missing { g: u32, t: u32, reason: String },
}

/// All group-time cells: post cells `t in g..=tbar` for every cohort, plus
/// pre-period cells `t in 2..g` when `include_pre` is set. Cells whose
/// control set is empty are reported missing.
pub fn att_gt_table(
    panel: &PanelDataset,
    cohorts: &CohortMap,
    spec: &EstimandSpec,
    method: CsMethod,
    include_pre: bool,
) -> Vec<CellStatus> {
    let mut cells: Vec<(u32, u32)> = Vec::new();
    for &g in cohorts.support() {
        let t_start = if include_pre { 1 } else { g };
        for t in t_start..=panel.tbar() {
            cells.push((g, t));
        }
    }
    cells
        .into_par_iter()
        .map(|(g, t)| match att_gt(panel, cohorts, g, t, spec, method) {
            Ok(effect) => CellStatus::Estimated(effect),
            Err(e) => CellStatus::Missing {
                g,
                t,
                reason: e.to_string(),
            },
        })
        .collect()
}

/// Point estimate of an event-time or aggregate estimand from the group-time
/// table, renormalizing the method's weights over estimable cells.
pub fn cs_point_estimate(
    panel: &PanelDataset,
    cohorts: &CohortMap,
    spec: &EstimandSpec,
    method: CsMethod,
) -> Result<AggregateResult> {
    match spec.kind {
        crate::panel::EstimandKind::GroupTime { g, t } => {
            let e = att_gt(panel, cohorts, g, t, spec, method)?;
            Ok(AggregateResult {
                estimate: e.estimate,
                realized: crate::aggregate::WeightScheme {
                    kind: WeightKind::Custom,
                    weights: vec![((g, t), 1.0)],
                },
                dropped_cells: vec![],
            })
        }
        crate::panel::EstimandKind::EventTime { ell } => {
            let weights =
                weights_event_time(cohorts, panel.tbar(), ell, WeightKind::CsEventTime(ell))?;
            let table = att_gt_table(panel, cohorts, spec, method, ell < 0);
            let values = estimated_cells(&table);
            aggregate(&values, &weights, true)
        }
        crate::panel::EstimandKind::Aggregate => {
            let weights = weights_aggregate(cohorts, panel.tbar(), WeightKind::CsAggregate)?;
            let table = att_gt_table(panel, cohorts, spec, method, false);
            let values = estimated_cells(&table);
            aggregate(&values, &weights, true)
        }
    }
}

/// Extract `((g,t), estimate)` pairs from a table.
pub fn estimated_cells(table: &[CellStatus]) -> Vec<((u32, u32), f64)> {
    table
        .iter()
        .filter_map(|c| match c {
            CellStatus::Estimated(e) => Some(((e.g, e.t), e.estimate)),
            CellStatus::Missing { .. } => None,
        })
        .collect()
}

/// Group-time effect with bootstrap uncertainty: the whole nuisance-fitting
/// and plug-in pipeline is re-run on every cluster resample.
pub fn att_gt_with_inference(
    panel: &PanelDataset,
    cohorts: &CohortMap,
    g: u32,
    t: u32,
    spec: &EstimandSpec,
    method: CsMethod,
    bootstrap: &BootstrapSpec,
) -> Result<GroupTimeEffect> {
    let mut effect = att_gt(panel, cohorts, g, t, spec, method)?;
    let spec_c = *spec;
    let pipeline = move |p: &PanelDataset| -> Result<Vec<f64>> {
        let cohorts = derive_cohorts(p)?;
        att_gt(p, &cohorts, g, t, &spec_c, method).map(|e| vec![e.estimate])
    };
    let out = cluster_bootstrap(&pipeline, panel, bootstrap)?;
    effect.se = Some(out.se[0]);
    effect.ci = Some(out.ci[0]);
    Ok(effect)
}
