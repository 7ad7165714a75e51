//! Estimand aggregation and cluster-bootstrap inference.
//!
//! Converts group-time effects into event-time and overall estimands under
//! the method-specific weight schemes, and provides percentile cluster
//! bootstrap uncertainty for arbitrary panel pipelines, plus sup-t
//! simultaneous bands over group-time cells.

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::panel::{Cohort, CohortMap, PanelDataset};
use crate::rngstream::stream_rng;

/// Which estimand a weight scheme targets.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WeightKind {
    CsEventTime(i32),
    CsAggregate,
    IwEventTime(i32),
    IwAggregate,
    TwoStageAggregate,
    Custom,
}

/// Realized nonnegative weights over (g, t) cells, summing to one.
#[derive(Debug, Clone)]
pub struct WeightScheme {
    pub kind: WeightKind,
    pub weights: Vec<((u32, u32), f64)>,
}

impl WeightScheme {
    pub fn custom(weights: Vec<((u32, u32), f64)>) -> Result<Self> {
        let s: f64 = weights.iter().map(|(_, w)| w).sum();
        if s <= 0.0 || weights.iter().any(|(_, w)| *w < 0.0) {
            return Err(Error::InvalidConfig(
                "custom weights must be nonnegative with positive sum".into(),
            ));
        }
        Ok(Self {
            kind: WeightKind::Custom,
            weights: weights
                .into_iter()
                .map(|(c, w)| (c, w / s))
                .collect(),
        })
    }

    pub fn weight_of(&self, g: u32, t: u32) -> f64 {
        self.weights
            .iter()
            .find(|((wg, wt), _)| *wg == g && *wt == t)
            .map(|(_, w)| *w)
            .unwrap_or(0.0)
    }

    /// Compact deterministic rendering of the realized weights.
    pub fn digest(&self) -> String {
        self.weights
            .iter()
            .map(|((g, t), w)| format!("({g},{t}):{w:.6}"))
            .collect::<Vec<_>>()
            .join(";")
    }
}

/// Event-time weights: cells `(g, g + ell)` over cohorts whose event time is
/// observable (`1 <= g + ell <= tbar`), weighted by conditional cohort shares.
pub fn weights_event_time(
    cohorts: &CohortMap,
    tbar: u32,
    ell: i32,
    kind: WeightKind,
) -> Result<WeightScheme> {
    let feasible: Vec<u32> = cohorts
        .support()
        .iter()
        .copied()
        .filter(|&g| {
            let t = g as i64 + ell as i64;
            t >= 1 && t <= tbar as i64
        })
        .collect();
    if feasible.is_empty() {
        return Err(Error::NoFeasibleCohort(ell));
    }
    let denom: f64 = feasible
        .iter()
        .map(|&g| cohorts.share_of(Cohort::At(g)))
        .sum();
    let weights = feasible
        .iter()
        .map(|&g| {
            (
                (g, (g as i64 + ell as i64) as u32),
                cohorts.share_of(Cohort::At(g)) / denom,
            )
        })
        .collect();
    Ok(WeightScheme { kind, weights })
}

/// Aggregate weights per scheme:
/// - `CsAggregate`: cohort g's share (conditional on being treated by `tbar`)
///   split evenly over its post periods `t in g..=tbar`;
/// - `IwAggregate`: simple average over all feasible nonnegative event times
///   of the event-time weights;
/// - `TwoStageAggregate`: weights proportional to treated cell row counts,
///   i.e. cohort shares per post cell.
pub fn weights_aggregate(
    cohorts: &CohortMap,
    tbar: u32,
    kind: WeightKind,
) -> Result<WeightScheme> {
    let support = cohorts.support();
    if support.is_empty() {
        return Err(Error::NoTreatedUnits);
    }
    let denom: f64 = support
        .iter()
        .map(|&g| cohorts.share_of(Cohort::At(g)))
        .sum();
    let weights = match kind {
        WeightKind::CsAggregate => support
            .iter()
            .flat_map(|&g| {
                let per_cell =
                    cohorts.share_of(Cohort::At(g)) / denom / (tbar - g + 1) as f64;
                (g..=tbar).map(move |t| ((g, t), per_cell))
            })
            .collect(),
        WeightKind::IwAggregate => {
            let ells: Vec<i32> = (0..=(tbar as i32 - support[0] as i32))
                .filter(|&l| {
                    support
                        .iter()
                        .any(|&g| g as i64 + l as i64 <= tbar as i64)
                })
                .collect();
            if ells.is_empty() {
                return Err(Error::NoFeasibleCohort(0));
            }
            let mut w: Vec<((u32, u32), f64)> = Vec::new();
            for &l in &ells {
                let ev = weights_event_time(cohorts, tbar, l, WeightKind::IwEventTime(l))?;
                for (cell, wv) in ev.weights {
                    w.push((cell, wv / ells.len() as f64));
                }
            }
            w
        }
        WeightKind::TwoStageAggregate => {
            let total: f64 = support
                .iter()
                .map(|&g| cohorts.share_of(Cohort::At(g)) * (tbar - g + 1) as f64)
                .sum();
            support
                .iter()
                .flat_map(|&g| {
                    let w = cohorts.share_of(Cohort::At(g)) / total;
                    (g..=tbar).map(move |t| ((g, t), w))
                })
                .collect()
        }
        other => {
            return Err(Error::InvalidConfig(format!(
                "weights_aggregate does not build {other:?} schemes"
            )))
        }
    };
    Ok(WeightScheme { kind, weights })
}

/// Result of weighting cell values into a scalar estimand.
#[derive(Debug, Clone)]
pub struct AggregateResult {
    pub estimate: f64,
    /// Weights actually applied after any missing-cell renormalization.
    pub realized: WeightScheme,
    /// Weighted cells absent from the inputs (renormalized away).
    pub dropped_cells: Vec<(u32, u32)>,
}

/// Weighted sum of cell values. Cells carrying weight but missing from
/// `values` are renormalized away when `renormalize` is set (the estimand
/// changes slightly; the dropped cells are reported so callers can warn);
/// otherwise they are an error.
pub fn aggregate(
    values: &[((u32, u32), f64)],
    weights: &WeightScheme,
    renormalize: bool,
) -> Result<AggregateResult> {
    let mut present: Vec<((u32, u32), f64, f64)> = Vec::new();
    let mut dropped: Vec<(u32, u32)> = Vec::new();
    for &(cell, w) in &weights.weights {
        match values.iter().find(|(c, _)| *c == cell) {
            Some((_, v)) => present.push((cell, w, *v)),
            None if w == 0.0 => {}
            None => dropped.push(cell),
        }
    }
    if present.is_empty() {
        return Err(Error::AllCellsMissing);
    }
    if !dropped.is_empty() && !renormalize {
        return Err(Error::MissingCell {
            g: dropped[0].0,
            t: dropped[0].1,
        });
    }
    let wsum: f64 = present.iter().map(|(_, w, _)| w).sum();
    let estimate = present.iter().map(|(_, w, v)| w / wsum * v).sum();
    Ok(AggregateResult {
        estimate,
        realized: WeightScheme {
            kind: weights.kind,
            weights: present.iter().map(|&(c, w, _)| (c, w / wsum)).collect(),
        },
        dropped_cells: dropped,
    })
}

/// Bootstrap configuration; resampling is always at the cluster level.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct BootstrapSpec {
    pub replicates: usize,
    pub seed: u64,
    pub level: f64,
}

impl BootstrapSpec {
    pub fn new(replicates: usize, seed: u64) -> Result<Self> {
        let spec = Self {
            replicates,
            seed,
            level: 0.95,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_level(mut self, level: f64) -> Result<Self> {
        self.level = level;
        self.validate()?;
        Ok(self)
    }

    fn validate(&self) -> Result<()> {
        if self.replicates < 2 {
            return Err(Error::InvalidConfig(format!(
                "bootstrap needs >= 2 replicates, got {}",
                self.replicates
            )));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "confidence level must be in (0,1), got {}",
                self.level
            )));
        }
        Ok(())
    }
}

/// Bootstrap distribution of a multi-output pipeline.
#[derive(Debug, Clone)]
pub struct BootstrapOutcome {
    /// Replicate standard deviation per output.
    pub se: Vec<f64>,
    /// Percentile interval per output at the configured level.
    pub ci: Vec<(f64, f64)>,
    /// Successful replicate draws, row-major (replicate x output).
    pub replicates: Vec<Vec<f64>>,
    /// Replicates whose pipeline failed (excluded from the distribution).
    pub failures: usize,
}

/// Cluster bootstrap: `B` resamples of clusters with replacement (each drawn
/// cluster keeps all its units and periods), the pipeline re-run end-to-end
/// per replicate. Replicate RNG streams derive from `(seed, replicate)`, so
/// results are identical for any worker count. Failed replicates (for
/// example an empty cohort after resampling) are excluded and counted.
pub fn cluster_bootstrap(
    pipeline: &(dyn Fn(&PanelDataset) -> Result<Vec<f64>> + Sync),
    panel: &PanelDataset,
    spec: &BootstrapSpec,
) -> Result<BootstrapOutcome> {
    spec.validate()?;
    let n_clusters = panel.n_clusters();
    if n_clusters < 2 {
        return Err(Error::TooFewClusters(n_clusters));
    }

    let results: Vec<Result<Vec<f64>>> = (0..spec.replicates)
        .into_par_iter()
        .map(|rep| {
            let mut rng = stream_rng(spec.seed, &[0x626F_6F74, rep as u64]);
            let draw: Vec<usize> = (0..n_clusters)
                .map(|_| rng.gen_range(0..n_clusters))
                .collect();
            let resampled = panel.resample_clusters(&draw);
            pipeline(&resampled)
        })
        .collect();

    let mut replicates: Vec<Vec<f64>> = Vec::with_capacity(spec.replicates);
    let mut failures = 0usize;
    for r in results {
        match r {
            Ok(v) if v.iter().all(|x| x.is_finite()) => replicates.push(v),
            _ => failures += 1,
        }
    }
    if replicates.is_empty() {
        return Err(Error::AllReplicatesFailed(spec.replicates));
    }
    let d = replicates[0].len();
    if replicates.iter().any(|r| r.len() != d) {
        return Err(Error::InvalidConfig(
            "pipeline returned inconsistent output lengths across replicates".into(),
        ));
    }

    let m = replicates.len() as f64;
    let mut se = Vec::with_capacity(d);
    let mut ci = Vec::with_capacity(d);
    let alpha = 1.0 - spec.level;
    for j in 0..d {
        let vals: Vec<f64> = replicates.iter().map(|r| r[j]).collect();
        let mean = vals.iter().sum::<f64>() / m;
        let var = if m > 1.0 {
            vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (m - 1.0)
        } else {
            0.0
        };
        se.push(var.sqrt());
        let mut sorted = vals;
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        ci.push((
            quantile(&sorted, alpha / 2.0),
            quantile(&sorted, 1.0 - alpha / 2.0),
        ));
    }
    Ok(BootstrapOutcome {
        se,
        ci,
        replicates,
        failures,
    })
}

/// Type-7 (linear interpolation) quantile of pre-sorted values.
pub(crate) fn quantile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 0 {
        return f64::NAN;
    }
    if n == 1 {
        return sorted[0];
    }
    let h = p.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
    }
}

/// Sup-t simultaneous bands over cells: the critical value is the empirical
/// `level` quantile of the max studentized deviation across cells, the band
/// `estimate +/- crit * se`. Cells with zero bootstrap spread are skipped in
/// the max and get a degenerate band.
pub fn simultaneous_bands(
    estimates: &[f64],
    ses: &[f64],
    replicates: &[Vec<f64>],
    level: f64,
) -> Result<Vec<(f64, f64)>> {
    let d = estimates.len();
    if ses.len() != d || replicates.iter().any(|r| r.len() != d) {
        return Err(Error::InvalidConfig(
            "estimates, ses and replicate rows must share a length".into(),
        ));
    }
    if replicates.is_empty() {
        return Err(Error::InvalidConfig("no bootstrap replicates".into()));
    }
    let mut maxdevs: Vec<f64> = replicates
        .iter()
        .map(|rep| {
            let mut m = 0.0f64;
            for j in 0..d {
                if ses[j] > 0.0 {
                    m = m.max(((rep[j] - estimates[j]) / ses[j]).abs());
                }
            }
            m
        })
        .collect();
    maxdevs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let crit = quantile(&maxdevs, level);
    Ok((0..d)
        .map(|j| (estimates[j] - crit * ses[j], estimates[j] + crit * ses[j]))
        .collect())
}

/// One reported effect.
#[derive(Debug, Clone, Serialize)]
pub struct EffectRow {
    pub method: String,
    pub estimand: String,
    pub estimate: f64,
    pub se: Option<f64>,
    pub ci_lo: Option<f64>,
    pub ci_hi: Option<f64>,
    pub n_treated: usize,
    pub weights_digest: String,
}

/// Estimates, uncertainty and provenance for a set of estimands; serializes
/// to CSV and JSON.
#[derive(Debug, Clone, Default, Serialize)]
pub struct EffectTable {
    pub rows: Vec<EffectRow>,
    pub warnings: Vec<String>,
}

impl EffectTable {
    pub fn push(&mut self, row: EffectRow) -> Result<()> {
        if self
            .rows
            .iter()
            .any(|r| r.method == row.method && r.estimand == row.estimand)
        {
            return Err(Error::InvalidConfig(format!(
                "duplicate effect row ({}, {})",
                row.method, row.estimand
            )));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn warn(&mut self, message: impl Into<String>) {
        self.warnings.push(message.into());
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(Vec::new());
        w.write_record([
            "method",
            "estimand",
            "estimate",
            "se",
            "ci_lo",
            "ci_hi",
            "n_treated",
            "weights_digest",
        ])?;
        for r in &self.rows {
            w.write_record([
                r.method.clone(),
                r.estimand.clone(),
                crate::panel::format_float(r.estimate),
                r.se.map(crate::panel::format_float).unwrap_or_default(),
                r.ci_lo.map(crate::panel::format_float).unwrap_or_default(),
                r.ci_hi.map(crate::panel::format_float).unwrap_or_default(),
                r.n_treated.to_string(),
                r.weights_digest.clone(),
            ])?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| Error::Io(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Io(e.to_string()))
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Io(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::{validate_panel, PanelRecord};

    fn toy_cohorts() -> (PanelDataset, CohortMap) {
        let mut recs = Vec::new();
        for i in 0..100 {
            let g = if i < 22 { 3 } else if i < 57 { 4 } else { 5 };
            for t in 1..=5u32 {
                recs.push(PanelRecord {
                    unit_id: format!("u{i}"),
                    cluster_id: format!("c{i}"),
                    time: t,
                    y: 0.0,
                    a: (t >= g) as u8,
                    x: vec![],
                });
            }
        }
        let panel = validate_panel(&recs).unwrap();
        let cohorts = crate::panel::derive_cohorts(&panel).unwrap();
        (panel, cohorts)
    }

    #[test]
    fn event_time_weights_match_conditional_shares() {
        let (_, cohorts) = toy_cohorts();
        let w = weights_event_time(&cohorts, 5, 1, WeightKind::IwEventTime(1)).unwrap();
        assert_eq!(w.weights.len(), 2);
        assert!((w.weight_of(3, 4) - 0.22 / 0.57).abs() < 1e-12);
        assert!((w.weight_of(4, 5) - 0.35 / 0.57).abs() < 1e-12);
        let total: f64 = w.weights.iter().map(|(_, v)| v).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn infeasible_event_time_is_error() {
        let (_, cohorts) = toy_cohorts();
        assert!(matches!(
            weights_event_time(&cohorts, 5, 3, WeightKind::IwEventTime(3)),
            Err(Error::NoFeasibleCohort(3))
        ));
    }

    #[test]
    fn cs_aggregate_weights_split_mass_over_post_cells() {
        let (_, cohorts) = toy_cohorts();
        let w = weights_aggregate(&cohorts, 5, WeightKind::CsAggregate).unwrap();
        // Cohort 3's mass 0.22 splits over (3,3),(3,4),(3,5).
        assert!((w.weight_of(3, 3) - 0.22 / 3.0).abs() < 1e-12);
        assert!((w.weight_of(4, 5) - 0.35 / 2.0).abs() < 1e-12);
        assert!((w.weight_of(5, 5) - 0.43).abs() < 1e-12);
        let total: f64 = w.weights.iter().map(|(_, v)| v).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn two_stage_weights_proportional_to_cell_counts() {
        let (_, cohorts) = toy_cohorts();
        let w = weights_aggregate(&cohorts, 5, WeightKind::TwoStageAggregate).unwrap();
        // total mass 3*0.22 + 2*0.35 + 1*0.43 = 1.79
        assert!((w.weight_of(3, 4) - 0.22 / 1.79).abs() < 1e-12);
        assert!((w.weight_of(5, 5) - 0.43 / 1.79).abs() < 1e-12);
    }

    #[test]
    fn aggregate_renormalizes_missing_cells_with_report() {
        let w = WeightScheme::custom(vec![((3, 3), 0.5), ((4, 4), 0.5)]).unwrap();
        let full = aggregate(&[((3, 3), 1.0), ((4, 4), 3.0)], &w, false).unwrap();
        assert!((full.estimate - 2.0).abs() < 1e-15);
        let partial = aggregate(&[((3, 3), 1.0)], &w, true).unwrap();
        assert_eq!(partial.estimate, 1.0);
        assert_eq!(partial.dropped_cells, vec![(4, 4)]);
        assert!(matches!(
            aggregate(&[((3, 3), 1.0)], &w, false),
            Err(Error::MissingCell { g: 4, t: 4 })
        ));
        assert!(matches!(
            aggregate(&[((9, 9), 1.0)], &w, true),
            Err(Error::AllCellsMissing)
        ));
    }

    #[test]
    fn aggregate_is_linear() {
        let w = WeightScheme::custom(vec![((3, 3), 0.3), ((4, 4), 0.7)]).unwrap();
        let v1 = vec![((3, 3), 1.5), ((4, 4), -0.5)];
        let v2 = vec![((3, 3), 2.0), ((4, 4), 4.0)];
        let combo: Vec<_> = v1
            .iter()
            .zip(&v2)
            .map(|(&(c, a), &(_, b))| (c, 2.0 * a + 3.0 * b))
            .collect();
        let r1 = aggregate(&v1, &w, false).unwrap().estimate;
        let r2 = aggregate(&v2, &w, false).unwrap().estimate;
        let rc = aggregate(&combo, &w, false).unwrap().estimate;
        assert!((rc - (2.0 * r1 + 3.0 * r2)).abs() < 1e-12);
    }

    #[test]
    fn bootstrap_constant_pipeline_degenerates() {
        let (panel, _) = toy_cohorts();
        let spec = BootstrapSpec::new(50, 9).unwrap();
        let out = cluster_bootstrap(&|_p| Ok(vec![1.25]), &panel, &spec).unwrap();
        assert_eq!(out.failures, 0);
        assert_eq!(out.se[0], 0.0);
        assert_eq!(out.ci[0], (1.25, 1.25));
    }

    #[test]
    fn bootstrap_matches_analytic_se_for_cluster_means() {
        // 200 singleton clusters holding one draw each: the bootstrap SE of
        // the sample mean must come within 20% of s/sqrt(G).
        let mut recs = Vec::new();
        let mut state = 0x12345u64;
        let mut vals = Vec::new();
        for i in 0..200 {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let v = ((state >> 11) as f64 / (1u64 << 53) as f64 - 0.5) * 6.0;
            vals.push(v);
            for t in 1..=2u32 {
                recs.push(PanelRecord {
                    unit_id: format!("u{i}"),
                    cluster_id: format!("c{i}"),
                    time: t,
                    y: v,
                    a: (t >= 2 && i % 2 == 0) as u8,
                    x: vec![],
                });
            }
        }
        let panel = validate_panel(&recs).unwrap();
        let mean_pipeline = |p: &PanelDataset| -> Result<Vec<f64>> {
            let n = p.n_units();
            Ok(vec![(0..n).map(|u| p.outcome(u, 1)).sum::<f64>() / n as f64])
        };
        let spec = BootstrapSpec::new(1000, 31).unwrap();
        let out = cluster_bootstrap(&mean_pipeline, &panel, &spec).unwrap();
        let m = vals.iter().sum::<f64>() / 200.0;
        let s = (vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / 199.0).sqrt();
        let analytic = s / (200f64).sqrt();
        assert!(
            (out.se[0] - analytic).abs() / analytic < 0.2,
            "bootstrap {} vs analytic {analytic}",
            out.se[0]
        );
    }

    #[test]
    fn bootstrap_is_deterministic_across_worker_counts() {
        let (panel, _) = toy_cohorts();
        let pipeline = |p: &PanelDataset| -> Result<Vec<f64>> {
            Ok(vec![
                (0..p.n_units()).map(|u| p.outcome(u, 1)).sum::<f64>()
                    + p.n_clusters() as f64 * 0.001,
            ])
        };
        let spec = BootstrapSpec::new(64, 77).unwrap();
        let pool1 = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap();
        let pool2 = rayon::ThreadPoolBuilder::new()
            .num_threads(2)
            .build()
            .unwrap();
        let r1 = pool1.install(|| cluster_bootstrap(&pipeline, &panel, &spec).unwrap());
        let r2 = pool2.install(|| cluster_bootstrap(&pipeline, &panel, &spec).unwrap());
        assert_eq!(r1.replicates, r2.replicates);
        assert_eq!(r1.ci, r2.ci);
    }

    #[test]
    fn single_cell_band_equals_pointwise_quantile() {
        let estimates = vec![1.0];
        let ses = vec![0.5];
        let replicates: Vec<Vec<f64>> = (0..101).map(|i| vec![i as f64 * 0.02]).collect();
        let bands = simultaneous_bands(&estimates, &ses, &replicates, 0.95).unwrap();
        // max-dev quantile over one cell is the pointwise studentized quantile
        let mut devs: Vec<f64> = replicates
            .iter()
            .map(|r| ((r[0] - 1.0) / 0.5).abs())
            .collect();
        devs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let crit = quantile(&devs, 0.95);
        assert!((bands[0].0 - (1.0 - crit * 0.5)).abs() < 1e-12);
        assert!((bands[0].1 - (1.0 + crit * 0.5)).abs() < 1e-12);
    }

    #[test]
    fn joint_band_at_least_as_wide_as_pointwise() {
        // Two independent pseudo-random coordinates.
        let mut state = 99u64;
        let mut replicates = Vec::new();
        for _ in 0..400 {
            let mut draw = Vec::new();
            for _ in 0..2 {
                state = state.wrapping_mul(2862933555777941757).wrapping_add(3037000493);
                draw.push((state >> 11) as f64 / (1u64 << 53) as f64 - 0.5);
            }
            replicates.push(draw);
        }
        let estimates = vec![0.0, 0.0];
        let ses = vec![0.29, 0.29];
        let bands = simultaneous_bands(&estimates, &ses, &replicates, 0.95).unwrap();
        for j in 0..2 {
            let mut vals: Vec<f64> = replicates.iter().map(|r| r[j]).collect();
            vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let lo = quantile(&vals, 0.025);
            let hi = quantile(&vals, 0.975);
            assert!(bands[j].0 <= lo + 1e-12);
            assert!(bands[j].1 >= hi - 1e-12);
        }
    }

    #[test]
    fn effect_table_rejects_duplicates_and_serializes() {
        let mut t = EffectTable::default();
        t.push(EffectRow {
            method: "dr".into(),
            estimand: "psi_aggr".into(),
            estimate: 2.0,
            se: Some(0.1),
            ci_lo: Some(1.8),
            ci_hi: Some(2.2),
            n_treated: 10,
            weights_digest: "(3,3):1.000000".into(),
        })
        .unwrap();
        assert!(t
            .push(EffectRow {
                method: "dr".into(),
                estimand: "psi_aggr".into(),
                estimate: 1.0,
                se: None,
                ci_lo: None,
                ci_hi: None,
                n_treated: 1,
                weights_digest: String::new(),
            })
            .is_err());
        let csv = t.to_csv().unwrap();
        assert!(csv.starts_with("method,estimand,"));
        assert!(csv.contains("dr,psi_aggr,2.0,0.1,1.8,2.2,10,"));
        let json = t.to_json().unwrap();
        assert!(json.contains("\"estimate\": 2.0"));
    }
}
