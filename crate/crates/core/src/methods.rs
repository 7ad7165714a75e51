//! Uniform front door over the estimators: fit a method once on a panel,
//! then extract any of its supported estimands, with optional bootstrap or
//! delta-method uncertainty. Used by the benchmark engine and the CLI.

use serde::{Deserialize, Serialize};

use crate::aggregate::{cluster_bootstrap, BootstrapSpec, EffectRow, EffectTable};
use crate::cs::{att_gt_table, CellStatus, CsMethod};
use crate::error::{Error, Result};
use crate::mundlak::{
    fit_mundlak, marginalize_aggregate, marginalize_event_time, marginalize_group_time,
    MundlakFit, MundlakVcov,
};
use crate::panel::{derive_cohorts, Cohort, CohortMap, EstimandKind, EstimandSpec, PanelDataset};
use crate::sunab::{fit_saturated, iw_aggregate, iw_event_time, SaturatedCoefficients};
use crate::twostage::{
    residualize, stage1, stage2_aggregate, stage2_event_time, transform_outcomes, ResidualPanel,
    Stage1Fit, TransformedPanel,
};

/// Estimation method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    CsDr,
    CsIpw,
    CsOr,
    SunAb,
    TwoStage,
    Mundlak,
    Twfe,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::CsDr,
        Method::CsIpw,
        Method::CsOr,
        Method::SunAb,
        Method::TwoStage,
        Method::Mundlak,
        Method::Twfe,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::CsDr => "cs-dr",
            Method::CsIpw => "cs-ipw",
            Method::CsOr => "cs-or",
            Method::SunAb => "sunab",
            Method::TwoStage => "two-stage",
            Method::Mundlak => "mundlak",
            Method::Twfe => "twfe",
        }
    }

    pub fn parse(s: &str) -> Result<Method> {
        match s.to_ascii_lowercase().as_str() {
            "cs-dr" | "dr" => Ok(Method::CsDr),
            "cs-ipw" | "ipw" => Ok(Method::CsIpw),
            "cs-or" | "or" => Ok(Method::CsOr),
            "sunab" | "iw" => Ok(Method::SunAb),
            "two-stage" | "twostage" | "2s" => Ok(Method::TwoStage),
            "mundlak" => Ok(Method::Mundlak),
            "twfe" => Ok(Method::Twfe),
            other => Err(Error::InvalidConfig(format!("unknown method '{other}'"))),
        }
    }

    /// Estimand support matrix. Group-time effects exist only for the
    /// group-time methods; the TWFE baseline yields a single aggregate; the
    /// Mundlak model has no parameters for negative event times.
    pub fn supports(self, kind: EstimandKind) -> Result<()> {
        let ok = match (self, kind) {
            (Method::Twfe, EstimandKind::Aggregate) => true,
            (Method::Twfe, _) => false,
            (Method::SunAb | Method::TwoStage, EstimandKind::GroupTime { .. }) => false,
            (Method::Mundlak, EstimandKind::EventTime { ell }) => {
                if ell < 0 {
                    return Err(Error::NegativeEventTime(ell));
                }
                true
            }
            _ => true,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!(
                "method {} does not support estimand {kind:?}",
                self.name()
            )))
        }
    }

    fn cs(self) -> Option<CsMethod> {
        match self {
            Method::CsDr => Some(CsMethod::DoublyRobust),
            Method::CsIpw => Some(CsMethod::Ipw),
            Method::CsOr => Some(CsMethod::OutcomeRegression),
            _ => None,
        }
    }
}

/// Per-method fitted state, reusable across estimands.
pub enum MethodFit {
    Cs {
        method: CsMethod,
        table: Vec<CellStatus>,
    },
    SunAb(SaturatedCoefficients),
    TwoStage {
        transformed: TransformedPanel,
        stage1: Stage1Fit,
        residuals: ResidualPanel,
    },
    Mundlak(Box<MundlakFit>),
    Twfe {
        estimate: f64,
        se: f64,
    },
}

/// Fit a method once. For the group-time methods the whole cell table is
/// computed (pre-periods included) so any estimand can be extracted.
pub fn fit_method(
    method: Method,
    panel: &PanelDataset,
    cohorts: &CohortMap,
    spec: &EstimandSpec,
) -> Result<MethodFit> {
    match method {
        Method::CsDr | Method::CsIpw | Method::CsOr => {
            let cs = method.cs().expect("cs variant");
            Ok(MethodFit::Cs {
                method: cs,
                table: att_gt_table(panel, cohorts, spec, cs, true),
            })
        }
        Method::SunAb => Ok(MethodFit::SunAb(fit_saturated(panel, cohorts)?)),
        Method::TwoStage => {
            let transformed = transform_outcomes(panel, cohorts);
            let s1 = stage1(panel, cohorts, &transformed)?;
            let residuals = residualize(panel, cohorts, &transformed, &s1);
            Ok(MethodFit::TwoStage {
                transformed,
                stage1: s1,
                residuals,
            })
        }
        Method::Mundlak => Ok(MethodFit::Mundlak(Box::new(fit_mundlak(
            panel,
            cohorts,
            MundlakVcov::None,
        )?))),
        Method::Twfe => {
            let (estimate, se) = crate::mundlak::twfe_baseline(panel)?;
            Ok(MethodFit::Twfe { estimate, se })
        }
    }
}

impl MethodFit {
    /// Point estimate of one estimand from the fitted state.
    pub fn estimand(
        &self,
        panel: &PanelDataset,
        cohorts: &CohortMap,
        kind: EstimandKind,
    ) -> Result<f64> {
        match self {
            MethodFit::Cs { method, table } => match kind {
                EstimandKind::GroupTime { g, t } => table
                    .iter()
                    .find_map(|c| match c {
                        CellStatus::Estimated(e) if e.g == g && e.t == t => Some(e.estimate),
                        _ => None,
                    })
                    .ok_or(Error::MissingCell { g, t }),
                _ => {
                    let spec = EstimandSpec::new(kind);
                    cs_from_table(panel, cohorts, table, &spec, *method).map(|r| r.estimate)
                }
            },
            MethodFit::SunAb(fit) => match kind {
                EstimandKind::EventTime { ell } => {
                    iw_event_time(fit, cohorts, panel.tbar(), ell).map(|e| e.estimate)
                }
                EstimandKind::Aggregate => {
                    iw_aggregate(fit, cohorts, panel.tbar(), None).map(|e| e.estimate)
                }
                EstimandKind::GroupTime { .. } => Err(Error::InvalidConfig(
                    "sunab reports event-time and aggregate estimands only".into(),
                )),
            },
            MethodFit::TwoStage { residuals, .. } => match kind {
                EstimandKind::EventTime { ell } => {
                    stage2_event_time(panel, cohorts, residuals, &[ell])
                        .map(|f| f.estimates[0].1)
                }
                EstimandKind::Aggregate => stage2_aggregate(panel, cohorts, residuals, None)
                    .map(|f| f.estimates[0].1),
                EstimandKind::GroupTime { .. } => Err(Error::InvalidConfig(
                    "two-stage reports event-time and aggregate estimands only".into(),
                )),
            },
            MethodFit::Mundlak(fit) => match kind {
                EstimandKind::GroupTime { g, t } => {
                    marginalize_group_time(fit, cohorts, g, t).map(|e| e.estimate)
                }
                EstimandKind::EventTime { ell } => {
                    marginalize_event_time(fit, cohorts, ell).map(|e| e.estimate)
                }
                EstimandKind::Aggregate => {
                    marginalize_aggregate(fit, cohorts).map(|e| e.estimate)
                }
            },
            MethodFit::Twfe { estimate, .. } => match kind {
                EstimandKind::Aggregate => Ok(*estimate),
                _ => Err(Error::InvalidConfig(
                    "twfe baseline reports the aggregate only".into(),
                )),
            },
        }
    }
}

fn cs_from_table(
    panel: &PanelDataset,
    cohorts: &CohortMap,
    table: &[CellStatus],
    spec: &EstimandSpec,
    _method: CsMethod,
) -> Result<crate::aggregate::AggregateResult> {
    use crate::aggregate::{aggregate, weights_aggregate, weights_event_time, WeightKind};
    use crate::cs::estimated_cells;
    let values = estimated_cells(table);
    match spec.kind {
        EstimandKind::EventTime { ell } => {
            let w = weights_event_time(cohorts, panel.tbar(), ell, WeightKind::CsEventTime(ell))?;
            aggregate(&values, &w, true)
        }
        EstimandKind::Aggregate => {
            let w = weights_aggregate(cohorts, panel.tbar(), WeightKind::CsAggregate)?;
            aggregate(&values, &w, true)
        }
        EstimandKind::GroupTime { .. } => unreachable!("handled by caller"),
    }
}

/// How uncertainty is computed in [`estimate_effects`].
#[derive(Debug, Clone, Copy)]
pub enum Inference<'a> {
    /// Point estimates only.
    None,
    /// Cluster bootstrap of the full pipeline, jointly over all estimands.
    Bootstrap(&'a BootstrapSpec),
    /// Analytic delta-method SEs where the method provides them (sunab,
    /// mundlak, twfe); other methods fall back to no uncertainty.
    Delta,
}

/// Estimate several estimands for one method, with shared bootstrap
/// replicates when requested. Returns one effect row per estimand plus any
/// warnings (for example renormalized-away cells).
pub fn estimate_effects(
    method: Method,
    panel: &PanelDataset,
    cohorts: &CohortMap,
    spec: &EstimandSpec,
    estimands: &[EstimandKind],
    inference: Inference<'_>,
) -> Result<EffectTable> {
    for &kind in estimands {
        method.supports(kind)?;
    }
    let fit = fit_method(method, panel, cohorts, spec)?;
    let mut table = EffectTable::default();

    let points: Vec<f64> = estimands
        .iter()
        .map(|&kind| fit.estimand(panel, cohorts, kind))
        .collect::<Result<_>>()?;

    let (ses, cis): (Vec<Option<f64>>, Vec<Option<(f64, f64)>>) = match inference {
        Inference::None => (vec![None; points.len()], vec![None; points.len()]),
        Inference::Bootstrap(bspec) => {
            let base = *spec;
            let kinds = estimands.to_vec();
            let pipeline = move |p: &PanelDataset| -> Result<Vec<f64>> {
                let cs = derive_cohorts(p)?;
                let f = fit_method(method, p, &cs, &base)?;
                kinds.iter().map(|&k| f.estimand(p, &cs, k)).collect()
            };
            let out = cluster_bootstrap(&pipeline, panel, bspec)?;
            if out.failures > 0 {
                table.warn(format!(
                    "{} of {} bootstrap replicates failed and were excluded",
                    out.failures, bspec.replicates
                ));
            }
            (
                out.se.into_iter().map(Some).collect(),
                out.ci.into_iter().map(Some).collect(),
            )
        }
        Inference::Delta => delta_inference(&fit, panel, cohorts, estimands),
    };

    let n_treated = contributing_treated_units(method, cohorts);
    for (i, &kind) in estimands.iter().enumerate() {
        table.push(EffectRow {
            method: method.name().to_string(),
            estimand: kind.to_string(),
            estimate: points[i],
            se: ses[i],
            ci_lo: cis[i].map(|c| c.0),
            ci_hi: cis[i].map(|c| c.1),
            n_treated,
            weights_digest: weights_digest(&fit, panel, cohorts, kind),
        })?;
    }
    for w in collect_warnings(&fit, panel, cohorts, estimands) {
        table.warn(w);
    }
    Ok(table)
}

fn delta_inference(
    fit: &MethodFit,
    panel: &PanelDataset,
    cohorts: &CohortMap,
    estimands: &[EstimandKind],
) -> (Vec<Option<f64>>, Vec<Option<(f64, f64)>>) {
    let mut ses = Vec::with_capacity(estimands.len());
    let mut cis = Vec::with_capacity(estimands.len());
    for &kind in estimands {
        let (se, ci) = match (fit, kind) {
            (MethodFit::SunAb(f), EstimandKind::EventTime { ell }) => {
                match iw_event_time(f, cohorts, panel.tbar(), ell) {
                    Ok(e) => (Some(e.se), Some(e.ci)),
                    Err(_) => (None, None),
                }
            }
            (MethodFit::SunAb(f), EstimandKind::Aggregate) => {
                match iw_aggregate(f, cohorts, panel.tbar(), None) {
                    Ok(e) => (Some(e.se), Some(e.ci)),
                    Err(_) => (None, None),
                }
            }
            (MethodFit::Twfe { se, estimate }, EstimandKind::Aggregate) => (
                Some(*se),
                Some((estimate - 1.959963984540054 * se, estimate + 1.959963984540054 * se)),
            ),
            _ => (None, None),
        };
        ses.push(se);
        cis.push(ci);
    }
    (ses, cis)
}

fn contributing_treated_units(method: Method, cohorts: &CohortMap) -> usize {
    let _ = method;
    cohorts
        .support()
        .iter()
        .map(|&g| cohorts.n_in(Cohort::At(g)))
        .sum()
}

fn digest_cohort_weights(weights: &[(u32, f64)]) -> String {
    weights
        .iter()
        .map(|(g, w)| format!("g{g}:{w:.6}"))
        .collect::<Vec<_>>()
        .join(";")
}

fn weights_digest(
    fit: &MethodFit,
    panel: &PanelDataset,
    cohorts: &CohortMap,
    kind: EstimandKind,
) -> String {
    match fit {
        MethodFit::Cs { method, table } => {
            if let EstimandKind::GroupTime { g, t } = kind {
                return format!("({g},{t}):1.000000");
            }
            let spec = EstimandSpec::new(kind);
            cs_from_table(panel, cohorts, table, &spec, *method)
                .map(|r| r.realized.digest())
                .unwrap_or_default()
        }
        MethodFit::SunAb(f) => match kind {
            EstimandKind::EventTime { ell } => iw_event_time(f, cohorts, panel.tbar(), ell)
                .map(|e| digest_cohort_weights(&e.weights))
                .unwrap_or_default(),
            EstimandKind::Aggregate => iw_aggregate(f, cohorts, panel.tbar(), None)
                .map(|e| digest_cohort_weights(&e.weights))
                .unwrap_or_default(),
            _ => String::new(),
        },
        MethodFit::TwoStage { residuals, .. } => {
            let shares = match kind {
                EstimandKind::Aggregate => stage2_aggregate(panel, cohorts, residuals, None)
                    .map(|f| f.realized_cell_shares)
                    .unwrap_or_default(),
                EstimandKind::EventTime { ell } => {
                    stage2_event_time(panel, cohorts, residuals, &[ell])
                        .map(|f| f.realized_cell_shares)
                        .unwrap_or_default()
                }
                _ => Vec::new(),
            };
            shares
                .iter()
                .map(|((g, t), w)| format!("({g},{t}):{w:.6}"))
                .collect::<Vec<_>>()
                .join(";")
        }
        MethodFit::Mundlak(f) => {
            let res = match kind {
                EstimandKind::GroupTime { g, t } => marginalize_group_time(f, cohorts, g, t),
                EstimandKind::EventTime { ell } => marginalize_event_time(f, cohorts, ell),
                EstimandKind::Aggregate => marginalize_aggregate(f, cohorts),
            };
            res.map(|e| {
                e.weights
                    .iter()
                    .map(|((g, t), w)| format!("({g},{t}):{w:.6}"))
                    .collect::<Vec<_>>()
                    .join(";")
            })
            .unwrap_or_default()
        }
        MethodFit::Twfe { .. } => "regression-implied".to_string(),
    }
}

fn collect_warnings(
    fit: &MethodFit,
    panel: &PanelDataset,
    cohorts: &CohortMap,
    estimands: &[EstimandKind],
) -> Vec<String> {
    let mut out = Vec::new();
    match fit {
        MethodFit::Cs { method, table } => {
            let missing: Vec<String> = table
                .iter()
                .filter_map(|c| match c {
                    CellStatus::Missing { g, t, reason } => Some(format!("({g},{t}): {reason}")),
                    _ => None,
                })
                .collect();
            if !missing.is_empty() {
                out.push(format!(
                    "inestimable group-time cells skipped with renormalized weights: {}",
                    missing.join("; ")
                ));
            }
            for &kind in estimands {
                if !matches!(kind, EstimandKind::GroupTime { .. }) {
                    let spec = EstimandSpec::new(kind);
                    if let Ok(r) = cs_from_table(panel, cohorts, table, &spec, *method) {
                        if !r.dropped_cells.is_empty() {
                            out.push(format!(
                                "{kind}: weights renormalized over available cells (dropped {:?})",
                                r.dropped_cells
                            ));
                        }
                    }
                }
            }
        }
        MethodFit::TwoStage { residuals, .. } => {
            if residuals.excluded_rows > 0 {
                out.push(format!(
                    "{} rows at periods with no untreated observations were excluded",
                    residuals.excluded_rows
                ));
            }
        }
        MethodFit::Mundlak(f) => {
            if !f.dropped_cells.is_empty() {
                out.push(format!(
                    "collinear treatment cells dropped: {:?}",
                    f.dropped_cells
                ));
            }
        }
        _ => {}
    }
    out
}
