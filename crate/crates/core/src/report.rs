//! Aggregation of per-miss records into distributions, cross-tabs and rates.
//!
//! Counts are accumulated in a [`ReportBuilder`], which merges associatively so
//! partial builders from parallel workers can be combined in any grouping.
//! Percentages carry one decimal and are apportioned by largest remainder, so
//! each distribution of a non-empty set sums to exactly 100.0.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::AnalysisConfig;
use crate::interchange::{ClassCatalog, ClassIndex, ImageIntrospection};
use crate::matching::{ApAccumulator, MatchResult};
use crate::mechanism::{FnRecord, MechanismLabel};
use crate::tide::TideFnType;

pub const REPORT_FORMAT_VERSION: &str = "1";

const M: usize = MechanismLabel::ALL.len();
const T: usize = TideFnType::ALL.len();

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ReportError {
    #[error("malformed report: {0}")]
    Parse(String),
    #[error("inconsistent report: {0}")]
    Invalid(String),
    #[error("class catalogs differ: {a:?} vs {b:?}")]
    CatalogMismatch { a: Vec<String>, b: Vec<String> },
}

/// Largest-remainder apportionment of 1000 tenths of a percent over `counts`.
///
/// All zeros when the counts sum to zero. Ties in remainder go to the earlier entry.
pub fn percent_tenths(counts: &[u64]) -> Vec<u64> {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return vec![0; counts.len()];
    }
    let exact: Vec<(u64, u64)> = counts
        .iter()
        .map(|&c| {
            let scaled = u128::from(c) * 1000;
            (
                (scaled / u128::from(total)) as u64,
                (scaled % u128::from(total)) as u64,
            )
        })
        .collect();
    let mut out: Vec<u64> = exact.iter().map(|e| e.0).collect();
    let short = 1000 - out.iter().sum::<u64>();
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| exact[b].1.cmp(&exact[a].1).then(a.cmp(&b)));
    for &i in order.iter().take(short as usize) {
        out[i] += 1;
    }
    out
}

/// `num / den` in tenths of a percent, rounded half up; `None` when `den` is 0.
pub fn rate_tenths(num: u64, den: u64) -> Option<u64> {
    if den == 0 {
        return None;
    }
    let (n, d) = (u128::from(num), u128::from(den));
    Some(((2000 * n + d) / (2 * d)) as u64)
}

fn tenths(p: f64) -> i64 {
    (p * 10.0).round() as i64
}

/// Mergeable per-class counts.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Tally {
    /// Non-ignored ground-truth objects.
    pub objects: u64,
    pub mechanisms: [u64; M],
    pub tide: [u64; T],
    /// `crosstab[tide][mechanism]`.
    pub crosstab: [[u64; M]; T],
    pub ap: ApAccumulator,
}

impl Tally {
    pub fn merge(&mut self, other: &Tally) {
        self.objects += other.objects;
        for i in 0..M {
            self.mechanisms[i] += other.mechanisms[i];
        }
        for t in 0..T {
            self.tide[t] += other.tide[t];
            for m in 0..M {
                self.crosstab[t][m] += other.crosstab[t][m];
            }
        }
        self.ap.merge(&other.ap);
    }

    fn add(&mut self, mechanism: MechanismLabel, tide: TideFnType) {
        self.mechanisms[mechanism.index()] += 1;
        self.tide[tide.index()] += 1;
        self.crosstab[tide.index()][mechanism.index()] += 1;
    }
}

/// Accumulates one (dump, config) run.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportBuilder {
    class_names: Vec<String>,
    config: AnalysisConfig,
    classes: Vec<Tally>,
}

impl ReportBuilder {
    pub fn new(catalog: &ClassCatalog, config: AnalysisConfig) -> Self {
        Self {
            class_names: catalog.names().to_vec(),
            config,
            classes: vec![Tally::default(); catalog.num_classes()],
        }
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    fn class(&mut self, c: ClassIndex) -> &mut Tally {
        &mut self.classes[c as usize - 1]
    }

    pub fn add_objects(&mut self, class_index: ClassIndex, count: u64) {
        self.class(class_index).objects += count;
    }

    pub fn add_record(&mut self, record: &FnRecord) {
        self.class(record.class_index).add(record.mechanism, record.tide);
    }

    /// Object counts and AP inputs of one matched image, plus its miss records.
    pub fn add_image<'r>(
        &mut self,
        image: &ImageIntrospection,
        matched: &MatchResult,
        records: impl IntoIterator<Item = &'r FnRecord>,
    ) {
        for g in image.ground_truth.iter().filter(|g| !g.ignore) {
            let t = self.class(g.class_index);
            t.objects += 1;
            t.ap.gt_count += 1;
        }
        for (d, label) in image.detections.iter().zip(&matched.detections) {
            self.class(d.class_index).ap.scored.push((d.score, label.is_tp()));
        }
        for r in records {
            self.add_record(r);
        }
    }

    /// Folds `other` in after `self`; both must describe the same catalog.
    pub fn merge(&mut self, other: &ReportBuilder) -> Result<(), ReportError> {
        if self.class_names != other.class_names {
            return Err(ReportError::CatalogMismatch {
                a: self.class_names.clone(),
                b: other.class_names.clone(),
            });
        }
        for (a, b) in self.classes.iter_mut().zip(&other.classes) {
            a.merge(b);
        }
        Ok(())
    }

    pub fn finish(&self) -> AnalysisReport {
        let mut all = Tally::default();
        for t in &self.classes {
            all.merge(t);
        }
        let per_class: Vec<ClassSummary> = self
            .classes
            .iter()
            .enumerate()
            .map(|(i, t)| ClassSummary {
                class_index: i as ClassIndex + 1,
                name: self.class_names[i].clone(),
                average_precision: t.ap.average_precision(),
                summary: Summary::from_tally(t),
            })
            .collect();
        let with_gt: Vec<f64> = self
            .classes
            .iter()
            .zip(&per_class)
            .filter(|(t, _)| t.ap.gt_count > 0)
            .map(|(_, s)| s.average_precision)
            .collect();
        let mean_average_precision = if with_gt.is_empty() {
            None
        } else {
            Some(with_gt.iter().sum::<f64>() / with_gt.len() as f64)
        };
        AnalysisReport {
            format_version: REPORT_FORMAT_VERSION.into(),
            class_names: self.class_names.clone(),
            config: self.config,
            overall: Summary::from_tally(&all),
            mean_average_precision,
            per_class,
        }
    }
}

/// Builds a report from miss records and per-class object counts (indexed by class − 1).
pub fn aggregate<'r>(
    records: impl IntoIterator<Item = &'r FnRecord>,
    objects_per_class: &[u64],
    catalog: &ClassCatalog,
    config: AnalysisConfig,
) -> AnalysisReport {
    let mut b = ReportBuilder::new(catalog, config);
    for (i, &n) in objects_per_class.iter().enumerate() {
        b.add_objects(i as ClassIndex + 1, n);
    }
    for r in records {
        b.add_record(r);
    }
    b.finish()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Distribution {
    pub labels: Vec<String>,
    pub counts: Vec<u64>,
    /// Percent of the total, one decimal.
    pub percent: Vec<f64>,
}

impl Distribution {
    fn new(labels: impl IntoIterator<Item = &'static str>, counts: &[u64]) -> Self {
        Self {
            labels: labels.into_iter().map(str::to_string).collect(),
            counts: counts.to_vec(),
            percent: percent_tenths(counts).into_iter().map(|t| t as f64 / 10.0).collect(),
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

fn mechanism_labels() -> impl Iterator<Item = &'static str> {
    MechanismLabel::ALL.iter().map(|m| m.short_name())
}

fn tide_labels() -> impl Iterator<Item = &'static str> {
    TideFnType::ALL.iter().map(|t| t.short_name())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Summary {
    pub total_objects: u64,
    pub fn_count: u64,
    /// `fn_count / total_objects`; absent when there are no objects.
    pub fn_rate: Option<f64>,
    pub mechanisms: Distribution,
    pub tide: Distribution,
    /// Rows follow `tide.labels`, columns follow `mechanisms.labels`.
    pub crosstab: [[u64; M]; T],
}

impl Summary {
    fn from_tally(t: &Tally) -> Self {
        let fn_count = t.mechanisms.iter().sum();
        Self {
            total_objects: t.objects,
            fn_count,
            fn_rate: (t.objects > 0).then(|| fn_count as f64 / t.objects as f64),
            mechanisms: Distribution::new(mechanism_labels(), &t.mechanisms),
            tide: Distribution::new(tide_labels(), &t.tide),
            crosstab: t.crosstab,
        }
    }

    /// FN rate in tenths of a percent.
    pub fn fn_rate_tenths(&self) -> Option<u64> {
        rate_tenths(self.fn_count, self.total_objects)
    }

    fn check(&self, scope: &str) -> Result<(), String> {
        let err = |m: String| Err(format!("{scope}: {m}"));
        if !self.mechanisms.labels.iter().map(String::as_str).eq(mechanism_labels()) {
            return err(format!("mechanism labels {:?}", self.mechanisms.labels));
        }
        if !self.tide.labels.iter().map(String::as_str).eq(tide_labels()) {
            return err(format!("tide labels {:?}", self.tide.labels));
        }
        for (name, d) in [("mechanism", &self.mechanisms), ("tide", &self.tide)] {
            if d.counts.len() != d.labels.len() || d.percent.len() != d.labels.len() {
                return err(format!("{name} distribution lengths differ"));
            }
            if d.total() != self.fn_count {
                return err(format!("{name} counts sum to {} not fn_count {}", d.total(), self.fn_count));
            }
            let sum: f64 = d.percent.iter().sum();
            let want = if self.fn_count == 0 { 0.0 } else { 100.0 };
            if (sum - want).abs() > 0.1 + 1e-9 {
                return err(format!("{name} percentages sum to {sum}"));
            }
        }
        for t in 0..T {
            let row: u64 = self.crosstab[t].iter().sum();
            if row != self.tide.counts[t] {
                return err(format!("crosstab row {} sums to {row}, histogram has {}", t, self.tide.counts[t]));
            }
        }
        for m in 0..M {
            let col: u64 = (0..T).map(|t| self.crosstab[t][m]).sum();
            if col != self.mechanisms.counts[m] {
                return err(format!(
                    "crosstab column {} sums to {col}, histogram has {}",
                    m, self.mechanisms.counts[m]
                ));
            }
        }
        if self.fn_count > self.total_objects {
            return err(format!("{} misses among {} objects", self.fn_count, self.total_objects));
        }
        if self.fn_rate.is_some() != (self.total_objects > 0) {
            return err("fn_rate must be present exactly when there are objects".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSummary {
    pub class_index: ClassIndex,
    pub name: String,
    pub average_precision: f64,
    pub summary: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisReport {
    pub format_version: String,
    pub class_names: Vec<String>,
    pub config: AnalysisConfig,
    pub overall: Summary,
    /// Mean over classes with at least one object.
    pub mean_average_precision: Option<f64>,
    /// One entry per class, including classes without misses.
    pub per_class: Vec<ClassSummary>,
}

impl AnalysisReport {
    /// Every marginal, sum and cross-class invariant; the first violation found.
    pub fn check_invariants(&self) -> Result<(), ReportError> {
        let invalid = ReportError::Invalid;
        if self.format_version != REPORT_FORMAT_VERSION {
            return Err(invalid(format!("unsupported format_version \"{}\"", self.format_version)));
        }
        self.overall.check("overall").map_err(invalid)?;
        if self.per_class.len() != self.class_names.len() {
            return Err(invalid(format!(
                "{} per-class entries for {} classes",
                self.per_class.len(),
                self.class_names.len()
            )));
        }
        let mut objects = 0;
        let mut crosstab = [[0u64; M]; T];
        for (i, c) in self.per_class.iter().enumerate() {
            if c.class_index as usize != i + 1 || c.name != self.class_names[i] {
                return Err(invalid(format!("per_class[{i}] is {} \"{}\"", c.class_index, c.name)));
            }
            c.summary.check(&c.name).map_err(invalid)?;
            objects += c.summary.total_objects;
            for t in 0..T {
                for m in 0..M {
                    crosstab[t][m] += c.summary.crosstab[t][m];
                }
            }
        }
        if objects != self.overall.total_objects || crosstab != self.overall.crosstab {
            return Err(invalid("per-class entries do not add up to overall".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, ReportError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let report: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            ReportError::Parse(format!("{} at {path}", e.into_inner()))
        })?;
        report.check_invariants()?;
        Ok(report)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RenderFormat {
    Table,
    Json,
    CrosstabFlow,
}

fn pct(tenths: impl Into<i64>) -> String {
    let t: i64 = tenths.into();
    format!("{}{}.{}", if t < 0 { "-" } else { "" }, t.abs() / 10, t.abs() % 10)
}

fn name_width(names: &[String]) -> usize {
    // wide enough for the section titles in the first column
    names.iter().map(String::len).max().unwrap_or(0).max("mechanism %".len())
}

fn render_table(r: &AnalysisReport) -> String {
    let w = name_width(&r.class_names);
    let has_data = r.overall.total_objects > 0;
    let mut out = String::new();
    let rows: Vec<(&str, &Summary)> = std::iter::once(("all", &r.overall))
        .chain(r.per_class.iter().map(|c| (c.name.as_str(), &c.summary)))
        .collect();

    let _ = writeln!(out, "{:<w$} {:>9} {:>9} {:>8} {:>7}", "class", "objects", "FN", "FN rate", "AP");
    if has_data {
        let ap = |i: usize| {
            if i == 0 {
                r.mean_average_precision.map_or("-".to_string(), |v| format!("{v:.3}"))
            } else if r.per_class[i - 1].summary.total_objects == 0 {
                "-".to_string()
            } else {
                format!("{:.3}", r.per_class[i - 1].average_precision)
            }
        };
        for (i, (name, s)) in rows.iter().enumerate() {
            let rate = s.fn_rate_tenths().map_or("-".to_string(), |t| format!("{}%", pct(t as i64)));
            let _ = writeln!(out, "{name:<w$} {:>9} {:>9} {rate:>8} {:>7}", s.total_objects, s.fn_count, ap(i));
        }
    }

    out.push('\n');
    let _ = write!(out, "{:<w$} {:>9}", "mechanism %", "FN");
    for l in mechanism_labels() {
        let _ = write!(out, " {l:>7}");
    }
    out.push('\n');
    if has_data {
        for (name, s) in &rows {
            let _ = write!(out, "{name:<w$} {:>9}", s.fn_count);
            for p in &s.mechanisms.percent {
                let _ = write!(out, " {:>7}", pct(tenths(*p)));
            }
            out.push('\n');
        }
    }

    out.push('\n');
    let _ = write!(out, "{:<w$} {:>9}", "TIDE %", "FN");
    for l in tide_labels() {
        let _ = write!(out, " {l:>7}");
    }
    out.push('\n');
    if has_data {
        for (name, s) in &rows {
            let _ = write!(out, "{name:<w$} {:>9}", s.fn_count);
            for p in &s.tide.percent {
                let _ = write!(out, " {:>7}", pct(tenths(*p)));
            }
            out.push('\n');
        }
    }

    out.push('\n');
    let _ = write!(out, "{:<w$} {:>9}", "TIDE \\ mech", "FN");
    for l in mechanism_labels() {
        let _ = write!(out, " {l:>7}");
    }
    out.push('\n');
    if has_data {
        for (t, l) in tide_labels().enumerate() {
            let _ = write!(out, "{l:<w$} {:>9}", r.overall.tide.counts[t]);
            for m in 0..M {
                let _ = write!(out, " {:>7}", r.overall.crosstab[t][m]);
            }
            out.push('\n');
        }
    }
    out
}

#[derive(Serialize)]
struct FlowNode {
    id: String,
    label: &'static str,
    column: &'static str,
    count: u64,
}

#[derive(Serialize)]
struct FlowLink {
    source: String,
    target: String,
    count: u64,
}

#[derive(Serialize)]
struct Flow {
    nodes: Vec<FlowNode>,
    links: Vec<FlowLink>,
}

fn tide_id(t: TideFnType) -> String {
    format!("tide:{}", t.short_name())
}

fn mechanism_id(m: MechanismLabel) -> String {
    format!("mechanism:{}", m.short_name())
}

fn render_flow(r: &AnalysisReport) -> String {
    let s = &r.overall;
    let mut nodes: Vec<FlowNode> = TideFnType::ALL
        .iter()
        .map(|&t| FlowNode {
            id: tide_id(t),
            label: t.short_name(),
            column: "tide",
            count: s.tide.counts[t.index()],
        })
        .collect();
    nodes.extend(MechanismLabel::ALL.iter().map(|&m| FlowNode {
        id: mechanism_id(m),
        label: m.name(),
        column: "mechanism",
        count: s.mechanisms.counts[m.index()],
    }));
    let mut links = Vec::new();
    for t in TideFnType::ALL {
        for m in MechanismLabel::ALL {
            let count = s.crosstab[t.index()][m.index()];
            if count > 0 {
                links.push(FlowLink {
                    source: tide_id(t),
                    target: mechanism_id(m),
                    count,
                });
            }
        }
    }
    let mut out = serde_json::to_string_pretty(&Flow { nodes, links }).expect("flow serializes");
    out.push('\n');
    out
}

/// Deterministic text rendering of `report`.
pub fn render(report: &AnalysisReport, format: RenderFormat) -> String {
    match format {
        RenderFormat::Table => render_table(report),
        RenderFormat::Json => report.to_json(),
        RenderFormat::CrosstabFlow => render_flow(report),
    }
}

/// Percentage-point differences `b − a` for one scope (overall or one class).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeltaRow {
    pub scope: String,
    /// Absent when either side has no objects.
    pub fn_rate: Option<f64>,
    pub mechanisms: [f64; M],
    pub tide: [f64; T],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeltaTable {
    pub class_names: Vec<String>,
    /// `overall` first, then classes in catalog order.
    pub rows: Vec<DeltaRow>,
}

fn delta_row(scope: &str, a: &Summary, b: &Summary) -> DeltaRow {
    let d = |x: &[f64], y: &[f64], i: usize| (tenths(y[i]) - tenths(x[i])) as f64 / 10.0;
    DeltaRow {
        scope: scope.to_string(),
        fn_rate: a
            .fn_rate_tenths()
            .zip(b.fn_rate_tenths())
            .map(|(x, y)| (y as i64 - x as i64) as f64 / 10.0),
        mechanisms: std::array::from_fn(|i| d(&a.mechanisms.percent, &b.mechanisms.percent, i)),
        tide: std::array::from_fn(|i| d(&a.tide.percent, &b.tide.percent, i)),
    }
}

/// Cell-wise `b − a` in percentage points.
pub fn compare(a: &AnalysisReport, b: &AnalysisReport) -> Result<DeltaTable, ReportError> {
    if a.class_names != b.class_names {
        return Err(ReportError::CatalogMismatch {
            a: a.class_names.clone(),
            b: b.class_names.clone(),
        });
    }
    let mut rows = vec![delta_row("overall", &a.overall, &b.overall)];
    rows.extend(
        a.per_class
            .iter()
            .zip(&b.per_class)
            .map(|(x, y)| delta_row(&x.name, &x.summary, &y.summary)),
    );
    Ok(DeltaTable {
        class_names: a.class_names.clone(),
        rows,
    })
}

fn signed(v: f64) -> String {
    let t = tenths(v);
    if t > 0 {
        format!("+{}", pct(t))
    } else {
        pct(t)
    }
}

impl DeltaTable {
    pub fn render_table(&self) -> String {
        let w = name_width(&self.class_names).max("overall".len());
        let mut out = String::new();
        let _ = write!(out, "{:<w$} {:>8}", "delta pp", "FN rate");
        for l in mechanism_labels().chain(tide_labels()) {
            let _ = write!(out, " {l:>7}");
        }
        out.push('\n');
        for r in &self.rows {
            let rate = r.fn_rate.map_or("-".to_string(), signed);
            let _ = write!(out, "{:<w$} {rate:>8}", r.scope);
            for v in r.mechanisms.iter().chain(&r.tide) {
                let _ = write!(out, " {:>7}", signed(*v));
            }
            out.push('\n');
        }
        out
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("delta table serializes");
        s.push('\n');
        s
    }
}
