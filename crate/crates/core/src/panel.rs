//! Canonical data model for staggered-adoption panels.
//!
//! A panel is a balanced long-format dataset: every unit is observed at every
//! period `1..=tbar`, carries a binary treatment path that is absorbing
//! (0 → 1, never back), time-invariant baseline covariates, and belongs to a
//! cluster that adopts treatment as a whole. Validation enforces these
//! structural assumptions; [`CohortMap`] derives first-treatment cohorts and
//! their empirical shares.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// First-treatment time of a unit. `Never` compares greater than every
/// `At(g)`, so sorting puts never-treated units last.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Cohort {
    /// First treated at the given period.
    At(u32),
    /// Never treated over the observed window.
    Never,
}

impl Cohort {
    /// Period representation used in file output: never-treated units are
    /// written as a sentinel strictly greater than `tbar`, never as a real time.
    pub fn sentinel(self, tbar: u32) -> u32 {
        match self {
            Cohort::At(g) => g,
            Cohort::Never => tbar + 1,
        }
    }

    pub fn period(self) -> Option<u32> {
        match self {
            Cohort::At(g) => Some(g),
            Cohort::Never => None,
        }
    }
}

impl fmt::Display for Cohort {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Cohort::At(g) => write!(f, "{g}"),
            Cohort::Never => write!(f, "inf"),
        }
    }
}

/// Kind of a baseline covariate column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum CovariateKind {
    Continuous,
    Binary,
    /// Categorical with the observed levels in first-observed order; the
    /// first level is the reference for dummy expansion.
    Categorical { levels: Vec<String> },
}

/// Name and kind of one covariate column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateMeta {
    pub name: String,
    pub kind: CovariateKind,
}

/// One unit-time observation. Covariates are numeric; categorical columns
/// store a 0-based level index (see [`CovariateKind::Categorical`]).
#[derive(Debug, Clone)]
pub struct PanelRecord {
    pub unit_id: String,
    pub cluster_id: String,
    pub time: u32,
    pub y: f64,
    pub a: u8,
    pub x: Vec<f64>,
}

/// Validation options. Cluster-constant treatment is the default because the
/// intervention is adopted at the cluster level; relax it for generic panels.
#[derive(Debug, Clone)]
pub struct PanelOptions {
    pub require_cluster_constant_treatment: bool,
}

impl Default for PanelOptions {
    fn default() -> Self {
        Self {
            require_cluster_constant_treatment: true,
        }
    }
}

/// Validated balanced panel, stored unit-major: row `(i, t)` lives at
/// `i * tbar + (t - 1)`. Covariates are time-invariant and stored once per
/// unit. Immutable after construction and safe to share across workers.
#[derive(Debug, Clone)]
pub struct PanelDataset {
    n_units: usize,
    tbar: u32,
    unit_labels: Vec<String>,
    cluster_labels: Vec<String>,
    cluster_of_unit: Vec<usize>,
    cluster_units: Vec<Vec<usize>>,
    y: Vec<f64>,
    a: Vec<u8>,
    x: Vec<f64>,
    covariates: Vec<CovariateMeta>,
}

impl PanelDataset {
    pub fn n_units(&self) -> usize {
        self.n_units
    }

    pub fn n_rows(&self) -> usize {
        self.n_units * self.tbar as usize
    }

    pub fn tbar(&self) -> u32 {
        self.tbar
    }

    /// Number of covariate columns (categoricals count once, pre-expansion).
    pub fn p(&self) -> usize {
        self.covariates.len()
    }

    pub fn covariates(&self) -> &[CovariateMeta] {
        &self.covariates
    }

    pub fn unit_labels(&self) -> &[String] {
        &self.unit_labels
    }

    pub fn cluster_labels(&self) -> &[String] {
        &self.cluster_labels
    }

    pub fn n_clusters(&self) -> usize {
        self.cluster_units.len()
    }

    pub fn cluster_of_unit(&self, unit: usize) -> usize {
        self.cluster_of_unit[unit]
    }

    /// Unit indices belonging to one cluster.
    pub fn cluster_units(&self, cluster: usize) -> &[usize] {
        &self.cluster_units[cluster]
    }

    pub fn outcome(&self, unit: usize, time: u32) -> f64 {
        self.y[unit * self.tbar as usize + (time - 1) as usize]
    }

    pub fn treated(&self, unit: usize, time: u32) -> bool {
        self.a[unit * self.tbar as usize + (time - 1) as usize] == 1
    }

    /// Covariate value (level index for categoricals) of one unit.
    pub fn xval(&self, unit: usize, col: usize) -> f64 {
        self.x[unit * self.covariates.len() + col]
    }

    pub fn xrow(&self, unit: usize) -> &[f64] {
        let p = self.covariates.len();
        &self.x[unit * p..(unit + 1) * p]
    }

    /// First treatment period of one unit.
    pub fn first_treatment(&self, unit: usize) -> Cohort {
        let tb = self.tbar as usize;
        for t in 0..tb {
            if self.a[unit * tb + t] == 1 {
                return Cohort::At(t as u32 + 1);
            }
        }
        Cohort::Never
    }

    /// True if at least one unit is untreated at `time`.
    pub fn any_untreated_at(&self, time: u32) -> bool {
        (0..self.n_units).any(|i| !self.treated(i, time))
    }

    /// Rebuild a panel from a cluster draw (bootstrap resampling). Each drawn
    /// cluster keeps all its units and periods but receives a fresh cluster
    /// id, and its units receive fresh unit ids, so repeated draws stay
    /// distinct. Invariants hold by construction; no re-validation is done.
    pub fn resample_clusters(&self, draw: &[usize]) -> PanelDataset {
        let tb = self.tbar as usize;
        let p = self.covariates.len();
        let n_new: usize = draw.iter().map(|&c| self.cluster_units[c].len()).sum();
        let mut unit_labels = Vec::with_capacity(n_new);
        let mut cluster_labels = Vec::with_capacity(draw.len());
        let mut cluster_of_unit = Vec::with_capacity(n_new);
        let mut cluster_units = Vec::with_capacity(draw.len());
        let mut y = Vec::with_capacity(n_new * tb);
        let mut a = Vec::with_capacity(n_new * tb);
        let mut x = Vec::with_capacity(n_new * p);
        for (new_c, &c) in draw.iter().enumerate() {
            cluster_labels.push(format!("b{new_c}"));
            let mut members = Vec::with_capacity(self.cluster_units[c].len());
            for &u in &self.cluster_units[c] {
                let new_u = unit_labels.len();
                unit_labels.push(format!("b{new_c}_u{new_u}"));
                cluster_of_unit.push(new_c);
                members.push(new_u);
                y.extend_from_slice(&self.y[u * tb..(u + 1) * tb]);
                a.extend_from_slice(&self.a[u * tb..(u + 1) * tb]);
                x.extend_from_slice(&self.x[u * p..(u + 1) * p]);
            }
            cluster_units.push(members);
        }
        PanelDataset {
            n_units: n_new,
            tbar: self.tbar,
            unit_labels,
            cluster_labels,
            cluster_of_unit,
            cluster_units,
            y,
            a,
            x,
            covariates: self.covariates.clone(),
        }
    }

    /// Flatten back to records (inverse of validation up to ordering).
    pub fn to_records(&self) -> Vec<PanelRecord> {
        let mut out = Vec::with_capacity(self.n_rows());
        for i in 0..self.n_units {
            for t in 1..=self.tbar {
                out.push(PanelRecord {
                    unit_id: self.unit_labels[i].clone(),
                    cluster_id: self.cluster_labels[self.cluster_of_unit[i]].clone(),
                    time: t,
                    y: self.outcome(i, t),
                    a: self.treated(i, t) as u8,
                    x: self.xrow(i).to_vec(),
                });
            }
        }
        out
    }
}

/// Validate records into a [`PanelDataset`] with cluster-constant treatment
/// enforced and covariate kinds inferred (binary when every value is 0/1,
/// continuous otherwise).
pub fn validate_panel(records: &[PanelRecord]) -> Result<PanelDataset> {
    validate_panel_with(records, None, &PanelOptions::default())
}

/// Validation with explicit covariate metadata and options. When `meta` is
/// `None`, names default to `x1..xp` and kinds are inferred.
pub fn validate_panel_with(
    records: &[PanelRecord],
    meta: Option<Vec<CovariateMeta>>,
    options: &PanelOptions,
) -> Result<PanelDataset> {
    if records.is_empty() {
        return Err(Error::InvalidPanel("empty record list".into()));
    }
    let p = records[0].x.len();
    let tbar = records.iter().map(|r| r.time).max().unwrap();
    if tbar < 2 {
        return Err(Error::InvalidPanel(format!("tbar must be >= 2, got {tbar}")));
    }

    // Intern units and clusters in first-appearance order.
    let mut unit_index: HashMap<&str, usize> = HashMap::new();
    let mut unit_labels: Vec<String> = Vec::new();
    let mut cluster_index: HashMap<&str, usize> = HashMap::new();
    let mut cluster_labels: Vec<String> = Vec::new();
    let mut cluster_of_unit: Vec<usize> = Vec::new();
    for r in records {
        if r.x.len() != p {
            return Err(Error::InvalidPanel(format!(
                "unit '{}' has {} covariates, expected {}",
                r.unit_id,
                r.x.len(),
                p
            )));
        }
        if r.time < 1 || r.time > tbar {
            return Err(Error::InvalidPanel(format!(
                "time {} out of range 1..={tbar}",
                r.time
            )));
        }
        if r.a > 1 {
            return Err(Error::InvalidPanel(format!(
                "treatment indicator must be 0/1, got {} for unit '{}'",
                r.a, r.unit_id
            )));
        }
        if !r.y.is_finite() || r.x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidPanel(format!(
                "non-finite outcome or covariate for unit '{}' at time {}",
                r.unit_id, r.time
            )));
        }
        let cid = *cluster_index.entry(r.cluster_id.as_str()).or_insert_with(|| {
            cluster_labels.push(r.cluster_id.clone());
            cluster_labels.len() - 1
        });
        match unit_index.get(r.unit_id.as_str()) {
            Some(&u) => {
                if cluster_of_unit[u] != cid {
                    return Err(Error::InvalidPanel(format!(
                        "unit '{}' appears in more than one cluster",
                        r.unit_id
                    )));
                }
            }
            None => {
                unit_index.insert(r.unit_id.as_str(), unit_labels.len());
                unit_labels.push(r.unit_id.clone());
                cluster_of_unit.push(cid);
            }
        }
    }

    let n_units = unit_labels.len();
    let tb = tbar as usize;
    let mut y = vec![f64::NAN; n_units * tb];
    let mut a = vec![u8::MAX; n_units * tb];
    let mut x = vec![f64::NAN; n_units * p];
    let mut counts = vec![0usize; n_units];

    for r in records {
        let u = unit_index[r.unit_id.as_str()];
        let slot = u * tb + (r.time - 1) as usize;
        if a[slot] != u8::MAX {
            return Err(Error::InvalidPanel(format!(
                "duplicate record for unit '{}' at time {}",
                r.unit_id, r.time
            )));
        }
        y[slot] = r.y;
        a[slot] = r.a;
        counts[u] += 1;
        // Covariates must be identical across a unit's records.
        for (j, &v) in r.x.iter().enumerate() {
            let cell = &mut x[u * p + j];
            if cell.is_nan() {
                *cell = v;
            } else if *cell != v {
                return Err(Error::CovariateDrift {
                    unit: r.unit_id.clone(),
                    column: j,
                });
            }
        }
    }

    for (u, &c) in counts.iter().enumerate() {
        if c != tb {
            return Err(Error::UnbalancedPanel {
                unit: unit_labels[u].clone(),
                got: c,
                expected: tb,
            });
        }
    }

    // Irreversibility: untreated at baseline, monotone afterwards.
    for u in 0..n_units {
        if a[u * tb] == 1 {
            return Err(Error::TreatedAtBaseline {
                unit: unit_labels[u].clone(),
            });
        }
        for t in 1..tb {
            if a[u * tb + t - 1] == 1 && a[u * tb + t] == 0 {
                return Err(Error::TreatmentReversal {
                    unit: unit_labels[u].clone(),
                    time: t as u32 + 1,
                });
            }
        }
    }

    let mut cluster_units: Vec<Vec<usize>> = vec![Vec::new(); cluster_labels.len()];
    for (u, &c) in cluster_of_unit.iter().enumerate() {
        cluster_units[c].push(u);
    }

    if options.require_cluster_constant_treatment {
        for (c, members) in cluster_units.iter().enumerate() {
            for t in 0..tb {
                let first = a[members[0] * tb + t];
                if members.iter().any(|&u| a[u * tb + t] != first) {
                    return Err(Error::MixedClusterTreatment {
                        cluster: cluster_labels[c].clone(),
                        time: t as u32 + 1,
                    });
                }
            }
        }
    }

    let covariates = match meta {
        Some(m) => {
            if m.len() != p {
                return Err(Error::InvalidPanel(format!(
                    "covariate metadata has {} entries, expected {p}",
                    m.len()
                )));
            }
            m
        }
        None => (0..p)
            .map(|j| {
                let binary = (0..n_units).all(|u| x[u * p + j] == 0.0 || x[u * p + j] == 1.0);
                CovariateMeta {
                    name: format!("x{}", j + 1),
                    kind: if binary {
                        CovariateKind::Binary
                    } else {
                        CovariateKind::Continuous
                    },
                }
            })
            .collect(),
    };

    Ok(PanelDataset {
        n_units,
        tbar,
        unit_labels,
        cluster_labels,
        cluster_of_unit,
        cluster_units,
        y,
        a,
        x,
        covariates,
    })
}

/// Per-unit first-treatment cohorts, cohort support, and empirical shares.
#[derive(Debug, Clone)]
pub struct CohortMap {
    g: Vec<Cohort>,
    support: Vec<u32>,
    never: Vec<usize>,
    gbar: u32,
    shares: Vec<(Cohort, f64)>,
}

impl CohortMap {
    pub fn cohort_of(&self, unit: usize) -> Cohort {
        self.g[unit]
    }

    /// Sorted distinct finite first-treatment periods.
    pub fn support(&self) -> &[u32] {
        &self.support
    }

    /// Indices of never-treated units.
    pub fn never_treated(&self) -> &[usize] {
        &self.never
    }

    pub fn has_never_treated(&self) -> bool {
        !self.never.is_empty()
    }

    /// Last period at which some unit first receives treatment.
    pub fn gbar(&self) -> u32 {
        self.gbar
    }

    /// Empirical share of each cohort (finite cohorts plus never-treated);
    /// sums to one exactly.
    pub fn shares(&self) -> &[(Cohort, f64)] {
        &self.shares
    }

    pub fn share_of(&self, cohort: Cohort) -> f64 {
        self.shares
            .iter()
            .find(|(c, _)| *c == cohort)
            .map(|(_, s)| *s)
            .unwrap_or(0.0)
    }

    /// Units first treated at `g`.
    pub fn units_in(&self, cohort: Cohort) -> Vec<usize> {
        self.g
            .iter()
            .enumerate()
            .filter(|(_, c)| **c == cohort)
            .map(|(u, _)| u)
            .collect()
    }

    pub fn n_in(&self, cohort: Cohort) -> usize {
        self.g.iter().filter(|c| **c == cohort).count()
    }
}

/// Derive first-treatment cohorts from a validated panel.
pub fn derive_cohorts(panel: &PanelDataset) -> Result<CohortMap> {
    let g: Vec<Cohort> = (0..panel.n_units())
        .map(|u| panel.first_treatment(u))
        .collect();
    let mut support: Vec<u32> = g.iter().filter_map(|c| c.period()).collect();
    support.sort_unstable();
    support.dedup();
    if support.is_empty() {
        return Err(Error::NoTreatedUnits);
    }
    let gbar = *support.last().unwrap();
    let never: Vec<usize> = g
        .iter()
        .enumerate()
        .filter(|(_, c)| **c == Cohort::Never)
        .map(|(u, _)| u)
        .collect();
    let n = g.len() as f64;
    let mut shares: Vec<(Cohort, f64)> = support
        .iter()
        .map(|&p| {
            let cohort = Cohort::At(p);
            (cohort, g.iter().filter(|c| **c == cohort).count() as f64 / n)
        })
        .collect();
    if !never.is_empty() {
        shares.push((Cohort::Never, never.len() as f64 / n));
    }
    Ok(CohortMap {
        g,
        support,
        never,
        gbar,
        shares,
    })
}

/// Conditional cohort share `P(G = g | window holds)`, where `window` selects
/// the conditioning set of finite cohorts.
pub fn cohort_share(
    cohorts: &CohortMap,
    g: u32,
    window: impl Fn(u32) -> bool,
) -> Result<f64> {
    if !cohorts.support().contains(&g) {
        return Err(Error::InvalidPanel(format!("cohort {g} not in support")));
    }
    let denom: f64 = cohorts
        .support()
        .iter()
        .filter(|&&h| window(h))
        .map(|&h| cohorts.share_of(Cohort::At(h)))
        .sum();
    if denom <= 0.0 {
        return Err(Error::EmptyWindow);
    }
    let num = if window(g) {
        cohorts.share_of(Cohort::At(g))
    } else {
        0.0
    };
    Ok(num / denom)
}

/// Target estimand.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum EstimandKind {
    GroupTime { g: u32, t: u32 },
    EventTime { ell: i32 },
    Aggregate,
}

impl fmt::Display for EstimandKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EstimandKind::GroupTime { g, t } => write!(f, "psi_{{{g},{t}}}"),
            EstimandKind::EventTime { ell } => write!(f, "psi_{{{ell}}}"),
            EstimandKind::Aggregate => write!(f, "psi_aggr"),
        }
    }
}

/// Comparison population used by an estimator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ControlGroup {
    NeverTreated,
    NotYetTreated,
    LastTreated,
    AllUntreated,
}

/// Estimand plus the identification knobs it is computed under.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimandSpec {
    pub kind: EstimandKind,
    /// Anticipation periods (delta >= 0).
    pub anticipation: u32,
    pub control_group: ControlGroup,
    /// Overlap threshold epsilon in (0, 1) used by diagnostics and the IPW path.
    pub overlap_eps: f64,
}

impl EstimandSpec {
    pub fn new(kind: EstimandKind) -> Self {
        Self {
            kind,
            anticipation: 0,
            control_group: ControlGroup::NotYetTreated,
            overlap_eps: 0.01,
        }
    }

    pub fn validate(&self, panel: &PanelDataset, cohorts: &CohortMap) -> Result<()> {
        if !(self.overlap_eps > 0.0 && self.overlap_eps < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "overlap_eps must be in (0,1), got {}",
                self.overlap_eps
            )));
        }
        match self.kind {
            EstimandKind::GroupTime { g, t } => {
                if !cohorts.support().contains(&g) {
                    return Err(Error::InvalidConfig(format!("g={g} not in cohort support")));
                }
                if t < 2 || t > panel.tbar() {
                    return Err(Error::InvalidConfig(format!(
                        "t={t} outside 2..={}",
                        panel.tbar()
                    )));
                }
            }
            EstimandKind::EventTime { ell } => {
                let bound = panel.tbar() as i32 - 2;
                if ell < -bound || ell > bound {
                    return Err(Error::InvalidConfig(format!(
                        "event time {ell} outside -{bound}..={bound}"
                    )));
                }
            }
            EstimandKind::Aggregate => {}
        }
        Ok(())
    }
}

/// One (g, t) overlap diagnostic.
#[derive(Debug, Clone, Serialize)]
pub struct OverlapCell {
    pub g: u32,
    pub t: u32,
    /// Empirical probability of the cohort among units at risk at (g, t).
    pub cohort_prob: f64,
    /// Largest fitted generalized propensity score, when a GPS model was supplied.
    pub max_fitted_pi: Option<f64>,
    pub flagged: bool,
}

/// Overlap diagnostics: per (g, t), the empirical cohort probability among
/// units untreated at t or entering at g, flagged against `overlap_eps`.
/// Purely diagnostic; estimators consume the flags.
pub fn check_overlap(
    panel: &PanelDataset,
    cohorts: &CohortMap,
    spec: &EstimandSpec,
    fitted_pi: Option<&dyn Fn(u32, u32) -> Option<f64>>,
) -> Vec<OverlapCell> {
    let eps = spec.overlap_eps;
    let mut out = Vec::new();
    for &g in cohorts.support() {
        for t in 2..=panel.tbar() {
            let at_risk: Vec<usize> = (0..panel.n_units())
                .filter(|&u| {
                    cohorts.cohort_of(u) == Cohort::At(g) || !panel.treated(u, t)
                })
                .collect();
            let n_g = at_risk
                .iter()
                .filter(|&&u| cohorts.cohort_of(u) == Cohort::At(g))
                .count();
            let prob = if at_risk.is_empty() {
                0.0
            } else {
                n_g as f64 / at_risk.len() as f64
            };
            let max_pi = fitted_pi.and_then(|f| f(g, t));
            let flagged = prob < eps
                || prob > 1.0 - eps
                || max_pi.map(|m| m > 1.0 - eps).unwrap_or(false);
            out.push(OverlapCell {
                g,
                t,
                cohort_prob: prob,
                max_fitted_pi: max_pi,
                flagged,
            });
        }
    }
    out
}

// ---------------------------------------------------------------------------
// CSV schema: unit_id, cluster_id, time, y, a, then covariate columns.
// ---------------------------------------------------------------------------

/// Read a panel from CSV. Header is required and must start with
/// `unit_id, cluster_id, time, y, a`; remaining columns are covariates.
/// Numeric columns become continuous (binary when all values are 0/1);
/// non-numeric columns become categoricals with levels in first-observed order.
pub fn read_panel_csv(path: &Path) -> Result<PanelDataset> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let cols: Vec<&str> = headers.iter().collect();
    let fixed = ["unit_id", "cluster_id", "time", "y", "a"];
    if cols.len() < fixed.len() || cols[..fixed.len()] != fixed {
        return Err(Error::Schema(format!(
            "header must start with {:?}, got {:?}",
            fixed,
            &cols[..cols.len().min(fixed.len())]
        )));
    }
    let cov_names: Vec<String> = cols[fixed.len()..].iter().map(|s| s.to_string()).collect();
    let p = cov_names.len();

    let mut raw: Vec<(String, String, u32, f64, u8, Vec<String>)> = Vec::new();
    for row in reader.records() {
        let row = row?;
        if row.len() != fixed.len() + p {
            return Err(Error::Schema(format!(
                "row has {} fields, expected {}",
                row.len(),
                fixed.len() + p
            )));
        }
        let parse_field = |idx: usize, what: &str| -> Result<&str> {
            let v = row.get(idx).unwrap_or("");
            if v.is_empty() {
                return Err(Error::Schema(format!("missing {what} value")));
            }
            Ok(v)
        };
        let time: u32 = parse_field(2, "time")?
            .parse()
            .map_err(|_| Error::Schema("time must be a positive integer".into()))?;
        let y: f64 = parse_field(3, "y")?
            .parse()
            .map_err(|_| Error::Schema("y must be numeric".into()))?;
        let a: u8 = parse_field(4, "a")?
            .parse()
            .map_err(|_| Error::Schema("a must be 0 or 1".into()))?;
        let xs: Vec<String> = (0..p)
            .map(|j| parse_field(fixed.len() + j, &cov_names[j]).map(|s| s.to_string()))
            .collect::<Result<_>>()?;
        raw.push((
            parse_field(0, "unit_id")?.to_string(),
            parse_field(1, "cluster_id")?.to_string(),
            time,
            y,
            a,
            xs,
        ));
    }
    if raw.is_empty() {
        return Err(Error::Schema("no data rows".into()));
    }

    // Column typing: numeric -> continuous/binary, otherwise categorical.
    let mut meta = Vec::with_capacity(p);
    let mut level_maps: Vec<Option<Vec<String>>> = vec![None; p];
    for j in 0..p {
        let numeric = raw.iter().all(|r| r.5[j].parse::<f64>().is_ok());
        if numeric {
            let binary = raw.iter().all(|r| {
                let v: f64 = r.5[j].parse().unwrap();
                v == 0.0 || v == 1.0
            });
            meta.push(CovariateMeta {
                name: cov_names[j].clone(),
                kind: if binary {
                    CovariateKind::Binary
                } else {
                    CovariateKind::Continuous
                },
            });
        } else {
            let mut levels: Vec<String> = Vec::new();
            for r in &raw {
                if !levels.contains(&r.5[j]) {
                    levels.push(r.5[j].clone());
                }
            }
            meta.push(CovariateMeta {
                name: cov_names[j].clone(),
                kind: CovariateKind::Categorical {
                    levels: levels.clone(),
                },
            });
            level_maps[j] = Some(levels);
        }
    }

    let records: Vec<PanelRecord> = raw
        .into_iter()
        .map(|(unit_id, cluster_id, time, y, a, xs)| {
            let x = xs
                .iter()
                .enumerate()
                .map(|(j, v)| match &level_maps[j] {
                    Some(levels) => levels.iter().position(|l| l == v).unwrap() as f64,
                    None => v.parse::<f64>().unwrap(),
                })
                .collect();
            PanelRecord {
                unit_id,
                cluster_id,
                time,
                y,
                a,
                x,
            }
        })
        .collect();

    validate_panel_with(&records, Some(meta), &PanelOptions::default())
}

/// Write a panel in the CSV schema (LF line endings, `.` decimal separator).
pub fn write_panel_csv<W: std::io::Write>(panel: &PanelDataset, out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out);
    let mut header = vec![
        "unit_id".to_string(),
        "cluster_id".to_string(),
        "time".to_string(),
        "y".to_string(),
        "a".to_string(),
    ];
    header.extend(panel.covariates().iter().map(|m| m.name.clone()));
    w.write_record(&header)?;
    for i in 0..panel.n_units() {
        for t in 1..=panel.tbar() {
            let mut row = vec![
                panel.unit_labels()[i].clone(),
                panel.cluster_labels()[panel.cluster_of_unit(i)].clone(),
                t.to_string(),
                format_float(panel.outcome(i, t)),
                (panel.treated(i, t) as u8).to_string(),
            ];
            for (j, m) in panel.covariates().iter().enumerate() {
                let v = panel.xval(i, j);
                row.push(match &m.kind {
                    CovariateKind::Categorical { levels } => levels[v as usize].clone(),
                    _ => format_float(v),
                });
            }
            w.write_record(&row)?;
        }
    }
    w.flush().map_err(Error::from)?;
    Ok(())
}

/// Locale-independent float formatting with full round-trip precision.
pub(crate) fn format_float(v: f64) -> String {
    let mut buf = ryu_format(v);
    if !buf.contains('.') && !buf.contains('e') && !buf.contains("inf") && !buf.contains("NaN") {
        buf.push_str(".0");
    }
    buf
}

fn ryu_format(v: f64) -> String {
    // `{:?}` on f64 is the shortest representation that round-trips.
    format!("{v:?}")
}
