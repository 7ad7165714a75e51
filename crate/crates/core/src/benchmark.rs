//! Monte-Carlo benchmark engine: run every requested method and estimand on
//! replicated synthetic panels across a (scenario x n x n_clusters) grid and
//! score them against the per-replication truth tables (mean estimate,
//! absolute bias, MSE, empirical coverage).
//!
//! Replications are the unit of parallelism; replicate seeds are pre-assigned
//! from (master seed, grid cell, replicate), so a plan run twice with any
//! worker counts produces byte-identical output.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregate::{cluster_bootstrap, BootstrapSpec};
use crate::error::{Error, Result};
use crate::methods::{fit_method, Method};
use crate::mundlak::{
    fit_mundlak, marginalize_aggregate, marginalize_event_time, marginalize_group_time,
    MundlakVcov,
};
use crate::panel::{derive_cohorts, EstimandKind, EstimandSpec, PanelDataset};
use crate::rngstream::stream_rng;
use crate::simgen::{scenario_presets, Scenario, SimConfig, TruthTable};

/// How the benchmark computes Mundlak confidence intervals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MundlakCi {
    /// Cluster bootstrap of the whole fit-and-marginalize pipeline (default).
    Bootstrap,
    /// Delta method on observation-level HC1, mirroring marginalization
    /// software that does not account for clustering.
    DeltaHc1,
}

/// Full benchmark specification.
#[derive(Debug, Clone, Serialize)]
pub struct BenchmarkPlan {
    pub scenarios: Vec<Scenario>,
    pub sample_sizes: Vec<usize>,
    pub cluster_counts: Vec<usize>,
    pub methods: Vec<Method>,
    pub estimands: Vec<EstimandKind>,
    pub replications: usize,
    /// Bootstrap for per-replication confidence intervals; `None` skips
    /// interval estimation (coverage columns stay empty).
    pub bootstrap: Option<(usize, f64)>,
    pub mundlak_ci: MundlakCi,
    pub master_seed: u64,
    pub tbar: u32,
    pub var_unit: f64,
    pub var_cluster: f64,
    pub var_noise: f64,
}

impl BenchmarkPlan {
    pub fn new(
        scenarios: Vec<Scenario>,
        sample_sizes: Vec<usize>,
        cluster_counts: Vec<usize>,
        methods: Vec<Method>,
        estimands: Vec<EstimandKind>,
        replications: usize,
        master_seed: u64,
    ) -> Self {
        Self {
            scenarios,
            sample_sizes,
            cluster_counts,
            methods,
            estimands,
            replications,
            bootstrap: None,
            mundlak_ci: MundlakCi::Bootstrap,
            master_seed,
            tbar: 5,
            var_unit: 0.5,
            var_cluster: 0.5,
            var_noise: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.replications == 0 {
            return Err(Error::InvalidConfig("replications must be >= 1".into()));
        }
        if self.scenarios.is_empty()
            || self.sample_sizes.is_empty()
            || self.cluster_counts.is_empty()
            || self.methods.is_empty()
            || self.estimands.is_empty()
        {
            return Err(Error::InvalidConfig(
                "scenarios, sample sizes, cluster counts, methods and estimands must be nonempty"
                    .into(),
            ));
        }
        for &m in &self.methods {
            for &e in &self.estimands {
                m.supports(e)?;
            }
        }
        if let Some((b, level)) = self.bootstrap {
            BootstrapSpec::new(b, 0)?.with_level(level)?;
        }
        Ok(())
    }

    /// Parse from the TOML plan format written by `--print-config`.
    pub fn from_toml(text: &str) -> Result<Self> {
        let file: PlanFile =
            toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        let scenarios = file
            .scenarios
            .iter()
            .map(|s| scenario_presets(s))
            .collect::<Result<Vec<_>>>()?;
        let methods = file
            .methods
            .iter()
            .map(|m| Method::parse(m))
            .collect::<Result<Vec<_>>>()?;
        let estimands = file
            .estimands
            .iter()
            .map(|e| parse_estimand(e))
            .collect::<Result<Vec<_>>>()?;
        let plan = BenchmarkPlan {
            scenarios,
            sample_sizes: file.sample_sizes,
            cluster_counts: file.cluster_counts,
            methods,
            estimands,
            replications: file.replications,
            bootstrap: file.bootstrap.map(|b| (b.replicates, b.level)),
            mundlak_ci: file.mundlak_ci.unwrap_or(MundlakCi::Bootstrap),
            master_seed: file.master_seed,
            tbar: file.dgp.as_ref().map_or(5, |d| d.tbar),
            var_unit: file.dgp.as_ref().map_or(0.5, |d| d.var_unit),
            var_cluster: file.dgp.as_ref().map_or(0.5, |d| d.var_cluster),
            var_noise: file.dgp.as_ref().map_or(0.5, |d| d.var_noise),
        };
        plan.validate()?;
        Ok(plan)
    }
}

#[derive(Deserialize)]
struct PlanFile {
    master_seed: u64,
    replications: usize,
    scenarios: Vec<String>,
    sample_sizes: Vec<usize>,
    cluster_counts: Vec<usize>,
    methods: Vec<String>,
    estimands: Vec<String>,
    bootstrap: Option<PlanBootstrap>,
    mundlak_ci: Option<MundlakCi>,
    dgp: Option<PlanDgp>,
}

#[derive(Deserialize)]
struct PlanBootstrap {
    replicates: usize,
    #[serde(default = "default_level")]
    level: f64,
}

fn default_level() -> f64 {
    0.95
}

#[derive(Deserialize)]
struct PlanDgp {
    #[serde(default = "default_tbar")]
    tbar: u32,
    #[serde(default = "default_var")]
    var_unit: f64,
    #[serde(default = "default_var")]
    var_cluster: f64,
    #[serde(default = "default_var")]
    var_noise: f64,
}

fn default_tbar() -> u32 {
    5
}

fn default_var() -> f64 {
    0.5
}

/// Parse "aggregate", "event:L" or "group:G,T".
pub fn parse_estimand(s: &str) -> Result<EstimandKind> {
    let s = s.trim();
    if s.eq_ignore_ascii_case("aggregate") {
        return Ok(EstimandKind::Aggregate);
    }
    if let Some(rest) = s.strip_prefix("event:") {
        let ell: i32 = rest
            .trim()
            .parse()
            .map_err(|_| Error::InvalidConfig(format!("bad event time in '{s}'")))?;
        return Ok(EstimandKind::EventTime { ell });
    }
    if let Some(rest) = s.strip_prefix("group:") {
        let parts: Vec<&str> = rest.split(',').map(str::trim).collect();
        if parts.len() == 2 {
            let g = parts[0]
                .parse()
                .map_err(|_| Error::InvalidConfig(format!("bad g in '{s}'")))?;
            let t = parts[1]
                .parse()
                .map_err(|_| Error::InvalidConfig(format!("bad t in '{s}'")))?;
            return Ok(EstimandKind::GroupTime { g, t });
        }
    }
    Err(Error::InvalidConfig(format!(
        "unknown estimand '{s}' (expected aggregate, event:L or group:G,T)"
    )))
}

/// One row of the benchmark metrics.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricsRow {
    pub method: String,
    pub estimand: String,
    pub scenario: String,
    pub n: usize,
    pub n_clusters: usize,
    pub replications: usize,
    pub failures: usize,
    pub mean_estimate: f64,
    pub mean_truth: f64,
    pub abs_bias: f64,
    pub mse: f64,
    /// Replicate standard deviation of (estimate - truth).
    pub sd_error: f64,
    pub coverage: Option<f64>,
}

/// Benchmark output: one row per (method, estimand, scenario, n, n_clusters).
#[derive(Debug, Clone, Default, Serialize)]
pub struct MetricsTable {
    pub rows: Vec<MetricsRow>,
}

impl MetricsTable {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(Vec::new());
        w.write_record([
            "method",
            "estimand",
            "scenario",
            "n",
            "n_clusters",
            "replications",
            "failures",
            "mean_estimate",
            "mean_truth",
            "abs_bias",
            "mse",
            "sd_error",
            "coverage",
        ])?;
        for r in &self.rows {
            w.write_record([
                r.method.clone(),
                r.estimand.clone(),
                r.scenario.clone(),
                r.n.to_string(),
                r.n_clusters.to_string(),
                r.replications.to_string(),
                r.failures.to_string(),
                crate::panel::format_float(r.mean_estimate),
                crate::panel::format_float(r.mean_truth),
                crate::panel::format_float(r.abs_bias),
                crate::panel::format_float(r.mse),
                crate::panel::format_float(r.sd_error),
                r.coverage.map(crate::panel::format_float).unwrap_or_default(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Io(e.to_string()))
    }

    pub fn from_csv(text: &str) -> Result<MetricsTable> {
        let mut reader = csv::Reader::from_reader(text.as_bytes());
        let mut rows = Vec::new();
        for rec in reader.records() {
            let rec = rec?;
            let get = |i: usize| rec.get(i).unwrap_or("").to_string();
            let num = |i: usize| -> Result<f64> {
                rec.get(i)
                    .unwrap_or("")
                    .parse()
                    .map_err(|_| Error::Schema(format!("bad number in metrics column {i}")))
            };
            rows.push(MetricsRow {
                method: get(0),
                estimand: get(1),
                scenario: get(2),
                n: get(3).parse().map_err(|_| Error::Schema("bad n".into()))?,
                n_clusters: get(4)
                    .parse()
                    .map_err(|_| Error::Schema("bad n_clusters".into()))?,
                replications: get(5)
                    .parse()
                    .map_err(|_| Error::Schema("bad replications".into()))?,
                failures: get(6)
                    .parse()
                    .map_err(|_| Error::Schema("bad failures".into()))?,
                mean_estimate: num(7)?,
                mean_truth: num(8)?,
                abs_bias: num(9)?,
                mse: num(10)?,
                sd_error: num(11)?,
                coverage: {
                    let v = get(12);
                    if v.is_empty() {
                        None
                    } else {
                        Some(v.parse().map_err(|_| Error::Schema("bad coverage".into()))?)
                    }
                },
            });
        }
        Ok(MetricsTable { rows })
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Io(e.to_string()))
    }

    pub fn row(&self, method: &str, estimand: &str, scenario: &str) -> Option<&MetricsRow> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.estimand == estimand && r.scenario == scenario)
    }
}

/// Truth value for one (method, estimand) pair from a replication's truth
/// table. Aggregates map to the scheme each estimator actually targets over
/// estimable cells; the TWFE baseline uses every treated row, so its natural
/// target carries row-count weights over all post cells.
fn truth_for(method: Method, kind: EstimandKind, truth: &TruthTable) -> Option<f64> {
    match kind {
        EstimandKind::GroupTime { g, t } => truth
            .cells
            .iter()
            .find(|((cg, ct), _)| *cg == g && *ct == t)
            .map(|(_, v)| *v),
        EstimandKind::EventTime { ell } => {
            truth.estimable.get(&format!("event_time_{ell}")).copied()
        }
        EstimandKind::Aggregate => match method {
            Method::CsDr | Method::CsIpw | Method::CsOr => {
                truth.estimable.get("cs_aggregate").copied()
            }
            Method::SunAb => truth.estimable.get("iw_aggregate").copied(),
            Method::TwoStage | Method::Mundlak => {
                truth.estimable.get("two_stage_aggregate").copied()
            }
            Method::Twfe => truth.full.get("two_stage_aggregate").copied(),
        },
    }
}

type RepOutcome = Vec<Vec<Result<(f64, Option<(f64, f64)>, f64)>>>;

/// Run the full benchmark grid. Failures are recorded per (method, estimand)
/// and never abort the grid.
pub fn run_benchmark(plan: &BenchmarkPlan) -> Result<MetricsTable> {
    plan.validate()?;
    let mut grid: Vec<(usize, &Scenario, usize, usize)> = Vec::new();
    let mut idx = 0usize;
    for scenario in &plan.scenarios {
        for &n in &plan.sample_sizes {
            for &c in &plan.cluster_counts {
                grid.push((idx, scenario, n, c));
                idx += 1;
            }
        }
    }

    let mut table = MetricsTable::default();
    for (cell_idx, scenario, n, c) in grid {
        let outcomes: Vec<RepOutcome> = (0..plan.replications)
            .into_par_iter()
            .map(|rep| run_replication(plan, cell_idx, rep, scenario, n, c))
            .collect();
        reduce_cell(plan, scenario, n, c, &outcomes, &mut table);
    }
    Ok(table)
}

fn run_replication(
    plan: &BenchmarkPlan,
    cell_idx: usize,
    rep: usize,
    scenario: &Scenario,
    n: usize,
    c: usize,
) -> RepOutcome {
    let seed = {
        use rand::RngCore;
        stream_rng(plan.master_seed, &[cell_idx as u64, rep as u64]).next_u64()
    };
    let mut config = SimConfig::new(n, c, scenario.clone(), seed);
    config.tbar = plan.tbar;
    config.var_unit = plan.var_unit;
    config.var_cluster = plan.var_cluster;
    config.var_noise = plan.var_noise;

    let (panel, truth) = match crate::simgen::generate(&config) {
        Ok(x) => x,
        Err(e) => {
            return vec![
                vec![Err(e.clone()); plan.estimands.len()];
                plan.methods.len()
            ]
        }
    };
    let cohorts = match derive_cohorts(&panel) {
        Ok(c) => c,
        Err(e) => {
            return vec![
                vec![Err(e.clone()); plan.estimands.len()];
                plan.methods.len()
            ]
        }
    };
    let spec = EstimandSpec::new(EstimandKind::Aggregate);

    plan.methods
        .iter()
        .map(|&method| {
            method_outcomes(plan, method, &panel, &cohorts, &spec, &truth, seed)
        })
        .collect()
}

fn method_outcomes(
    plan: &BenchmarkPlan,
    method: Method,
    panel: &PanelDataset,
    cohorts: &crate::panel::CohortMap,
    spec: &EstimandSpec,
    truth: &TruthTable,
    seed: u64,
) -> Vec<Result<(f64, Option<(f64, f64)>, f64)>> {
    let fit = match fit_method(method, panel, cohorts, spec) {
        Ok(f) => f,
        Err(e) => return vec![Err(e.clone()); plan.estimands.len()],
    };
    let points: Vec<Result<f64>> = plan
        .estimands
        .iter()
        .map(|&k| fit.estimand(panel, cohorts, k))
        .collect();

    // Intervals: delta-method HC1 for Mundlak when configured, otherwise a
    // joint cluster bootstrap over all estimands.
    let cis: Vec<Option<(f64, f64)>> = if plan.bootstrap.is_some()
        && method == Method::Mundlak
        && plan.mundlak_ci == MundlakCi::DeltaHc1
    {
        match fit_mundlak(panel, cohorts, MundlakVcov::Hc1) {
            Ok(f) => plan
                .estimands
                .iter()
                .map(|&k| {
                    let r = match k {
                        EstimandKind::GroupTime { g, t } => {
                            marginalize_group_time(&f, cohorts, g, t)
                        }
                        EstimandKind::EventTime { ell } => {
                            marginalize_event_time(&f, cohorts, ell)
                        }
                        EstimandKind::Aggregate => marginalize_aggregate(&f, cohorts),
                    };
                    r.ok().and_then(|e| e.ci)
                })
                .collect(),
            Err(_) => vec![None; plan.estimands.len()],
        }
    } else if let Some((b, level)) = plan.bootstrap {
        let bspec = BootstrapSpec {
            replicates: b,
            seed,
            level,
        };
        let kinds = plan.estimands.to_vec();
        let base = *spec;
        let pipeline = move |p: &PanelDataset| -> Result<Vec<f64>> {
            let cs = derive_cohorts(p)?;
            let f = fit_method(method, p, &cs, &base)?;
            // A replicate fails only if every estimand fails; per-estimand
            // failures surface as NaN and are filtered coordinate-wise.
            Ok(kinds
                .iter()
                .map(|&k| f.estimand(p, &cs, k).unwrap_or(f64::NAN))
                .collect())
        };
        match bootstrap_with_nan_filter(&pipeline, panel, &bspec) {
            Ok(cis) => cis,
            Err(_) => vec![None; plan.estimands.len()],
        }
    } else {
        vec![None; plan.estimands.len()]
    };

    points
        .into_iter()
        .zip(cis)
        .zip(plan.estimands.iter())
        .map(|((point, ci), &kind)| {
            let point = point?;
            let tr = truth_for(method, kind, truth).ok_or(Error::AllCellsMissing)?;
            Ok((point, ci, tr))
        })
        .collect()
}

/// Bootstrap where individual coordinates may be NaN in some replicates;
/// percentile intervals are computed per coordinate over its finite draws.
fn bootstrap_with_nan_filter(
    pipeline: &(dyn Fn(&PanelDataset) -> Result<Vec<f64>> + Sync),
    panel: &PanelDataset,
    spec: &BootstrapSpec,
) -> Result<Vec<Option<(f64, f64)>>> {
    // Wrap so NaN coordinates do not fail the whole replicate.
    let out = cluster_bootstrap(
        &|p| pipeline(p).map(|v| v.into_iter().map(|x| if x.is_finite() { x } else { f64::MAX }).collect()),
        panel,
        spec,
    )?;
    let d = out.replicates[0].len();
    let alpha = 1.0 - spec.level;
    let mut cis = Vec::with_capacity(d);
    for j in 0..d {
        let mut vals: Vec<f64> = out
            .replicates
            .iter()
            .map(|r| r[j])
            .filter(|v| *v != f64::MAX)
            .collect();
        if vals.len() < 2 {
            cis.push(None);
            continue;
        }
        vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        cis.push(Some((
            crate::aggregate::quantile(&vals, alpha / 2.0),
            crate::aggregate::quantile(&vals, 1.0 - alpha / 2.0),
        )));
    }
    Ok(cis)
}

fn reduce_cell(
    plan: &BenchmarkPlan,
    scenario: &Scenario,
    n: usize,
    c: usize,
    outcomes: &[RepOutcome],
    table: &mut MetricsTable,
) {
    for (mi, &method) in plan.methods.iter().enumerate() {
        for (ei, &kind) in plan.estimands.iter().enumerate() {
            let mut errs: Vec<f64> = Vec::new();
            let mut ests: Vec<f64> = Vec::new();
            let mut truths: Vec<f64> = Vec::new();
            let mut covered = 0usize;
            let mut with_ci = 0usize;
            let mut failures = 0usize;
            for rep in outcomes {
                match &rep[mi][ei] {
                    Ok((est, ci, tr)) => {
                        ests.push(*est);
                        truths.push(*tr);
                        errs.push(est - tr);
                        if let Some((lo, hi)) = ci {
                            with_ci += 1;
                            if tr >= lo && tr <= hi {
                                covered += 1;
                            }
                        }
                    }
                    Err(_) => failures += 1,
                }
            }
            let m = ests.len();
            let (mean_estimate, mean_truth, abs_bias, mse, sd_error) = if m > 0 {
                let me = ests.iter().sum::<f64>() / m as f64;
                let mt = truths.iter().sum::<f64>() / m as f64;
                let mean_err = errs.iter().sum::<f64>() / m as f64;
                let mse = errs.iter().map(|e| e * e).sum::<f64>() / m as f64;
                let var = if m > 1 {
                    errs.iter().map(|e| (e - mean_err) * (e - mean_err)).sum::<f64>()
                        / (m - 1) as f64
                } else {
                    0.0
                };
                (me, mt, mean_err.abs(), mse, var.sqrt())
            } else {
                (f64::NAN, f64::NAN, f64::NAN, f64::NAN, f64::NAN)
            };
            table.rows.push(MetricsRow {
                method: method.name().to_string(),
                estimand: kind.to_string(),
                scenario: scenario.name().to_string(),
                n,
                n_clusters: c,
                replications: plan.replications,
                failures,
                mean_estimate,
                mean_truth,
                abs_bias,
                mse,
                sd_error,
                coverage: if with_ci > 0 {
                    Some(covered as f64 / with_ci as f64)
                } else {
                    None
                },
            });
        }
    }
}

/// Render report artifacts from a metrics table: one long-format plot-data
/// CSV per metric (series = method, x = n, panels = n_clusters) plus the
/// metrics themselves in the requested format.
pub fn summarize(metrics: &MetricsTable, format: &str) -> Result<Vec<(String, String)>> {
    let mut files = Vec::new();
    match format {
        "csv" => files.push(("metrics.csv".to_string(), metrics.to_csv()?)),
        "json" => files.push(("metrics.json".to_string(), metrics.to_json()?)),
        "both" => {
            files.push(("metrics.csv".to_string(), metrics.to_csv()?));
            files.push(("metrics.json".to_string(), metrics.to_json()?));
        }
        other => {
            return Err(Error::InvalidConfig(format!(
                "unknown report format '{other}' (expected csv, json or both)"
            )))
        }
    }
    for (metric, pick) in [
        (
            "coverage",
            Box::new(|r: &MetricsRow| r.coverage) as Box<dyn Fn(&MetricsRow) -> Option<f64>>,
        ),
        ("mse", Box::new(|r: &MetricsRow| Some(r.mse))),
        ("abs_bias", Box::new(|r: &MetricsRow| Some(r.abs_bias))),
    ] {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(Vec::new());
        w.write_record(["estimand", "scenario", "method", "n_clusters", "n", "value", "failures"])?;
        for r in &metrics.rows {
            if let Some(v) = pick(r) {
                if v.is_finite() {
                    w.write_record([
                        r.estimand.clone(),
                        r.scenario.clone(),
                        r.method.clone(),
                        r.n_clusters.to_string(),
                        r.n.to_string(),
                        crate::panel::format_float(v),
                        r.failures.to_string(),
                    ])?;
                }
            }
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.to_string()))?;
        files.push((
            format!("plotdata_{metric}.csv"),
            String::from_utf8(bytes).map_err(|e| Error::Io(e.to_string()))?,
        ));
    }
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_plan() -> BenchmarkPlan {
        BenchmarkPlan::new(
            vec![Scenario::Constant],
            vec![240],
            vec![40],
            vec![Method::CsDr, Method::TwoStage],
            vec![EstimandKind::Aggregate, EstimandKind::EventTime { ell: 0 }],
            3,
            99,
        )
    }

    #[test]
    fn noiseless_single_replication_has_exact_identities() {
        let mut plan = tiny_plan();
        plan.methods = vec![Method::CsDr, Method::Mundlak, Method::TwoStage];
        plan.replications = 1;
        plan.var_unit = 0.0;
        plan.var_cluster = 0.0;
        plan.var_noise = 0.0;
        let metrics = run_benchmark(&plan).unwrap();
        for r in &metrics.rows {
            assert_eq!(r.failures, 0, "{} {}", r.method, r.estimand);
            assert!(
                (r.abs_bias - (r.mean_estimate - r.mean_truth).abs()).abs() < 1e-12,
                "bias reconstructs from means"
            );
            assert!((r.mse - r.abs_bias * r.abs_bias).abs() < 1e-12, "R=1: MSE = bias^2");
            // Correctly specified estimators are exact without noise; the
            // two-stage estimator keeps its deterministic covariate-trend
            // misspecification, so only the identities hold for it.
            if r.method != "two-stage" {
                assert!(r.abs_bias < 1e-8, "{} {}: bias {}", r.method, r.estimand, r.abs_bias);
            }
        }
    }

    #[test]
    fn gps_separation_on_tiny_cluster_counts_is_counted_not_fatal() {
        // 12 clusters: cluster-level covariates can perfectly predict the
        // cohort, the GPS flags the overlap violation, and the grid records
        // the failures instead of aborting.
        let mut plan = tiny_plan();
        plan.cluster_counts = vec![12];
        plan.sample_sizes = vec![120];
        plan.replications = 2;
        let metrics = run_benchmark(&plan).unwrap();
        let dr = metrics.row("cs-dr", "psi_aggr", "constant").unwrap();
        assert!(dr.failures > 0, "expected overlap failures at 12 clusters");
        let ts = metrics.row("two-stage", "psi_aggr", "constant").unwrap();
        assert_eq!(ts.failures, 0);
        assert!(ts.mean_estimate.is_finite());
    }

    #[test]
    fn mse_dominates_squared_bias() {
        let metrics = run_benchmark(&tiny_plan()).unwrap();
        for r in &metrics.rows {
            assert!(r.mse >= r.abs_bias * r.abs_bias - 1e-12);
        }
    }

    #[test]
    fn identical_across_worker_counts() {
        let mut plan = tiny_plan();
        plan.bootstrap = Some((8, 0.95));
        let pool1 = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let pool2 = rayon::ThreadPoolBuilder::new().num_threads(2).build().unwrap();
        let m1 = pool1.install(|| run_benchmark(&plan).unwrap());
        let m2 = pool2.install(|| run_benchmark(&plan).unwrap());
        assert_eq!(m1.to_csv().unwrap(), m2.to_csv().unwrap());
    }

    #[test]
    fn metrics_csv_round_trips() {
        let metrics = run_benchmark(&tiny_plan()).unwrap();
        let csv = metrics.to_csv().unwrap();
        let back = MetricsTable::from_csv(&csv).unwrap();
        assert_eq!(metrics.rows, back.rows);
        assert_eq!(back.to_csv().unwrap(), csv);
    }

    #[test]
    fn plan_toml_round_trip_and_validation() {
        let text = r#"
            master_seed = 7
            replications = 2
            scenarios = ["constant", "lagged"]
            sample_sizes = [100]
            cluster_counts = [10]
            methods = ["cs-dr", "mundlak"]
            estimands = ["aggregate", "event:0", "group:3,4"]
            [bootstrap]
            replicates = 4
        "#;
        let plan = BenchmarkPlan::from_toml(text).unwrap();
        assert_eq!(plan.scenarios.len(), 2);
        assert_eq!(plan.bootstrap, Some((4, 0.95)));
        assert_eq!(plan.mundlak_ci, MundlakCi::Bootstrap);

        // sunab cannot target group-time cells: plan must be rejected.
        let bad = text.replace("\"cs-dr\", \"mundlak\"", "\"sunab\"");
        assert!(BenchmarkPlan::from_toml(&bad).is_err());
        // unknown estimand text
        assert!(parse_estimand("event-1").is_err());
        assert_eq!(
            parse_estimand("event:-2").unwrap(),
            EstimandKind::EventTime { ell: -2 }
        );
        assert_eq!(
            parse_estimand("group:4,5").unwrap(),
            EstimandKind::GroupTime { g: 4, t: 5 }
        );
    }

    #[test]
    fn summarize_emits_plot_data() {
        let metrics = run_benchmark(&tiny_plan()).unwrap();
        let files = summarize(&metrics, "both").unwrap();
        let names: Vec<&str> = files.iter().map(|(n, _)| n.as_str()).collect();
        assert!(names.contains(&"metrics.csv"));
        assert!(names.contains(&"metrics.json"));
        assert!(names.contains(&"plotdata_mse.csv"));
        assert!(summarize(&metrics, "yaml").is_err());
    }
}
