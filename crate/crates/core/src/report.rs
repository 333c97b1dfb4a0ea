//! Tables and charts: performance at an operating point, AUROC comparisons,
//! calibration summaries, control charts and variable-importance plots.
//!
//! Tables keep raw numbers and render them on demand, so every rendered cell
//! can be recomputed from the JSON form.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::calibration::{trajectories_csv, CalibrationVerdict, CusumTrajectory, Direction, VariableImportance};
use crate::data::{matching_rows, AuditDataset, SubgroupFilter};
use crate::error::{AuditError, Result};
use crate::roc::{
    auroc, confusion_at, delong_correlated, delong_uncorrelated, operating_threshold, CorrelationMode, OperatingPoint,
    RocComparison, SignificanceBand,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Csv,
    Md,
    Json,
}

impl Format {
    pub fn extension(self) -> &'static str {
        match self {
            Format::Csv => "csv",
            Format::Md => "md",
            Format::Json => "json",
        }
    }
}

impl FromStr for Format {
    type Err = AuditError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Format::Csv),
            "md" => Ok(Format::Md),
            "json" => Ok(Format::Json),
            other => Err(AuditError::InvalidArgument(format!("unknown format `{other}`"))),
        }
    }
}

/// A labelled subgroup, written `Label:filter` on the command line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subgroup {
    pub label: String,
    pub filter: SubgroupFilter,
}

impl Subgroup {
    pub fn overall() -> Self {
        Subgroup {
            label: "Overall".into(),
            filter: SubgroupFilter::all(),
        }
    }

    pub fn new(label: &str, filter: SubgroupFilter) -> Self {
        Subgroup {
            label: label.to_string(),
            filter,
        }
    }
}

impl FromStr for Subgroup {
    type Err = AuditError;

    fn from_str(s: &str) -> Result<Self> {
        match s.split_once(':') {
            Some((label, filter)) if !label.trim().is_empty() => Ok(Subgroup::new(label.trim(), filter.parse()?)),
            _ => {
                let filter: SubgroupFilter = s.parse()?;
                Ok(Subgroup {
                    label: filter.to_string(),
                    filter,
                })
            }
        }
    }
}

/// `0.xyz`, with negative zero printed as zero.
pub fn fmt3(x: f64) -> String {
    let s = format!("{x:.3}");
    if s == "-0.000" {
        "0.000".into()
    } else {
        s
    }
}

/// Whole percent, e.g. `95%`.
pub fn fmt_percent(x: Option<f64>) -> String {
    match x {
        Some(v) => format!("{:.0}%", v * 100.0),
        None => "N/A".into(),
    }
}

fn fmt_opt3(x: Option<f64>) -> String {
    x.map_or_else(|| "N/A".into(), fmt3)
}

fn csv_line(cells: &[String]) -> String {
    let quoted: Vec<String> = cells
        .iter()
        .map(|c| {
            if c.contains([',', '"', '\n']) {
                format!("\"{}\"", c.replace('"', "\"\""))
            } else {
                c.clone()
            }
        })
        .collect();
    quoted.join(",") + "\n"
}

fn md_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut out = String::new();
    out.push_str(&format!("| {} |\n", header.join(" | ")));
    out.push_str(&format!("|{}\n", "---|".repeat(header.len())));
    for r in rows {
        out.push_str(&format!("| {} |\n", r.join(" | ")));
    }
    out
}

fn csv_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut out = csv_line(&header.iter().map(|h| h.to_string()).collect::<Vec<_>>());
    for r in rows {
        out.push_str(&csv_line(r));
    }
    out
}

fn to_json<T: Serialize>(value: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(value)? + "\n")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerformanceRow {
    pub subgroup: String,
    pub model: String,
    pub total: usize,
    pub positives: usize,
    pub false_positives: usize,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub auroc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerformanceTable {
    pub target_sensitivity: f64,
    /// Per-model threshold chosen on the whole dataset.
    pub thresholds: Vec<(String, f64)>,
    pub rows: Vec<PerformanceRow>,
}

/// Metrics per subgroup and model at each model's overall operating point.
pub fn build_performance_table(
    ds: &AuditDataset,
    models: &[String],
    subgroups: &[Subgroup],
    target_sens: f64,
) -> Result<PerformanceTable> {
    let labels = ds.outcomes();
    let mut scores = Vec::with_capacity(models.len());
    let mut thresholds = Vec::with_capacity(models.len());
    for m in models {
        let s = ds.model_scores(m)?;
        thresholds.push((m.clone(), operating_threshold(&s, &labels, target_sens)?.threshold));
        scores.push(s);
    }
    let mut rows = Vec::new();
    for sg in subgroups {
        sg.filter.validate(ds.attribute_schema())?;
        let idx = matching_rows(ds, &sg.filter);
        let y: Vec<bool> = idx.iter().map(|&i| labels[i]).collect();
        for ((m, s), (_, t)) in models.iter().zip(&scores).zip(&thresholds) {
            let sub: Vec<f64> = idx.iter().map(|&i| s[i]).collect();
            let c = confusion_at(&sub, &y, OperatingPoint { threshold: *t })?;
            let auc = match auroc(&sub, &y) {
                Ok(a) => Some(a),
                Err(AuditError::DegenerateLabels) => None,
                Err(e) => return Err(e),
            };
            rows.push(PerformanceRow {
                subgroup: sg.label.clone(),
                model: m.clone(),
                total: c.total(),
                positives: c.positives(),
                false_positives: c.fp,
                sensitivity: c.sensitivity(),
                specificity: c.specificity(),
                auroc: auc,
            });
        }
    }
    Ok(PerformanceTable {
        target_sensitivity: target_sens,
        thresholds,
        rows,
    })
}

impl PerformanceTable {
    fn header(&self) -> Vec<String> {
        let pct = format!("{:.0}%", self.target_sensitivity * 100.0);
        vec![
            "Subgroup".into(),
            "Model".into(),
            "Total".into(),
            "Positives".into(),
            format!("False Positives at {pct} Threshold"),
            format!("Sensitivity at {pct} Threshold"),
            format!("Specificity at {pct} Threshold"),
            "AUROC".into(),
        ]
    }

    fn cells(&self) -> Vec<Vec<String>> {
        self.rows
            .iter()
            .map(|r| {
                vec![
                    r.subgroup.clone(),
                    r.model.clone(),
                    r.total.to_string(),
                    r.positives.to_string(),
                    r.false_positives.to_string(),
                    fmt_percent(r.sensitivity),
                    fmt_percent(r.specificity),
                    fmt_opt3(r.auroc),
                ]
            })
            .collect()
    }

    pub fn render(&self, format: Format) -> Result<String> {
        let header = self.header();
        let header: Vec<&str> = header.iter().map(String::as_str).collect();
        match format {
            Format::Md => Ok(md_table(&header, &self.cells())),
            Format::Csv => Ok(csv_table(&header, &self.cells())),
            Format::Json => to_json(self),
        }
    }
}

/// One side of an AUROC comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Arm {
    pub model: String,
    pub subgroup: Subgroup,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub first: Arm,
    pub second: Arm,
}

impl Comparison {
    /// Two models on the same subgroup.
    pub fn models(a: &str, b: &str, subgroup: &Subgroup) -> Self {
        Comparison {
            first: Arm {
                model: a.into(),
                subgroup: subgroup.clone(),
            },
            second: Arm {
                model: b.into(),
                subgroup: subgroup.clone(),
            },
        }
    }

    /// One model on two subgroups.
    pub fn subgroups(model: &str, a: &Subgroup, b: &Subgroup) -> Self {
        Comparison {
            first: Arm {
                model: model.into(),
                subgroup: a.clone(),
            },
            second: Arm {
                model: model.into(),
                subgroup: b.clone(),
            },
        }
    }

    fn label(&self) -> (String, String) {
        if self.first.subgroup == self.second.subgroup {
            (
                self.first.subgroup.label.clone(),
                format!("{} vs {}", self.first.model, self.second.model),
            )
        } else {
            (
                format!("{} vs {}", self.first.subgroup.label, self.second.subgroup.label),
                self.first.model.clone(),
            )
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComparisonOutcome {
    Tested {
        result: RocComparison,
        band: SignificanceBand,
    },
    Skipped {
        reason: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub subgroup: String,
    pub comparison: String,
    pub outcome: ComparisonOutcome,
}

impl ComparisonRow {
    /// `diff (lo, hi)`
    pub fn difference_cell(&self) -> String {
        match &self.outcome {
            ComparisonOutcome::Tested { result, .. } => {
                format!("{} ({}, {})", fmt3(result.diff), fmt3(result.ci95.0), fmt3(result.ci95.1))
            }
            ComparisonOutcome::Skipped { reason } => format!("skipped: {reason}"),
        }
    }

    pub fn p_cell(&self) -> String {
        match &self.outcome {
            ComparisonOutcome::Tested { result, .. } => fmt3(result.p_value),
            ComparisonOutcome::Skipped { .. } => "N/A".into(),
        }
    }

    pub fn band_cell(&self) -> String {
        match &self.outcome {
            ComparisonOutcome::Tested { band, .. } => band.label().into(),
            ComparisonOutcome::Skipped { .. } => String::new(),
        }
    }

    /// `diff (lo, hi) / p`
    pub fn rendered(&self) -> String {
        format!("{} / {}", self.difference_cell(), self.p_cell())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub title: String,
    pub mode: CorrelationMode,
    pub rows: Vec<ComparisonRow>,
}

fn arm_data(ds: &AuditDataset, arm: &Arm) -> Result<(Vec<f64>, Vec<bool>)> {
    arm.subgroup.filter.validate(ds.attribute_schema())?;
    let idx = matching_rows(ds, &arm.subgroup.filter);
    let scores = ds.model_scores(&arm.model)?;
    let recs = ds.records();
    Ok((idx.iter().map(|&i| scores[i]).collect(), idx.iter().map(|&i| recs[i].outcome).collect()))
}

fn compare(ds: &AuditDataset, c: &Comparison, mode: CorrelationMode) -> Result<RocComparison> {
    let (sa, ya) = arm_data(ds, &c.first)?;
    let (sb, yb) = arm_data(ds, &c.second)?;
    match mode {
        CorrelationMode::Correlated => {
            if c.first.subgroup.filter != c.second.subgroup.filter {
                return Err(AuditError::InvalidArgument(
                    "correlated comparisons need both arms on the same subgroup".into(),
                ));
            }
            delong_correlated(&sa, &sb, &ya)
        }
        CorrelationMode::Uncorrelated => {
            delong_uncorrelated(&sa, &ya, &sb, &yb)
        }
    }
}

/// One row per comparison under the given mode. Rows whose data cannot be
/// compared (a class missing, too few per class) are kept as skipped rows.
pub fn build_comparison_table(
    ds: &AuditDataset,
    title: &str,
    comparisons: &[Comparison],
    mode: CorrelationMode,
) -> Result<ComparisonTable> {
    let mut rows = Vec::with_capacity(comparisons.len());
    for c in comparisons {
        let (subgroup, comparison) = c.label();
        let outcome = match compare(ds, c, mode) {
            Ok(result) => ComparisonOutcome::Tested {
                band: SignificanceBand::of(result.p_value),
                result,
            },
            Err(e @ (AuditError::DegenerateLabels | AuditError::TooFewPerClass { .. })) => {
                ComparisonOutcome::Skipped { reason: e.to_string() }
            }
            Err(e) => return Err(e),
        };
        rows.push(ComparisonRow {
            subgroup,
            comparison,
            outcome,
        });
    }
    Ok(ComparisonTable {
        title: title.to_string(),
        mode,
        rows,
    })
}

/// Model-vs-model tables (one per pair, correlated) and subgroup-vs-subgroup
/// tables (one per model, uncorrelated), each with its mode stated.
pub fn build_comparison_tables(
    ds: &AuditDataset,
    model_pairs: &[(String, String)],
    subgroups: &[Subgroup],
    subgroup_pairs: &[(Subgroup, Subgroup)],
    model_mode: CorrelationMode,
    subgroup_mode: CorrelationMode,
) -> Result<Vec<ComparisonTable>> {
    let mut tables = Vec::new();
    if !model_pairs.is_empty() {
        let comps: Vec<Comparison> = model_pairs
            .iter()
            .flat_map(|(a, b)| subgroups.iter().map(move |sg| Comparison::models(a, b, sg)))
            .collect();
        tables.push(build_comparison_table(ds, "Difference in AUROC between models", &comps, model_mode)?);
    }
    if !subgroup_pairs.is_empty() {
        let comps: Vec<Comparison> = ds
            .model_names()
            .iter()
            .flat_map(|m| subgroup_pairs.iter().map(move |(a, b)| Comparison::subgroups(m, a, b)))
            .collect();
        tables.push(build_comparison_table(ds, "Difference in AUROC between subgroups", &comps, subgroup_mode)?);
    }
    Ok(tables)
}

impl ComparisonTable {
    const HEADER: [&'static str; 5] = ["Subgroup", "Comparison", "Difference in AUROC (95% CI)", "P-value", "Band"];

    fn cells(&self) -> Vec<Vec<String>> {
        self.rows
            .iter()
            .map(|r| {
                vec![
                    r.subgroup.clone(),
                    r.comparison.clone(),
                    r.difference_cell(),
                    r.p_cell(),
                    r.band_cell(),
                ]
            })
            .collect()
    }

    pub fn render(&self, format: Format) -> Result<String> {
        let mode = match self.mode {
            CorrelationMode::Correlated => "correlated",
            CorrelationMode::Uncorrelated => "uncorrelated",
        };
        match format {
            Format::Md => Ok(format!(
                "### {} ({mode} DeLong)\n\n{}",
                self.title,
                md_table(&Self::HEADER, &self.cells())
            )),
            Format::Csv => Ok(csv_table(&Self::HEADER, &self.cells())),
            Format::Json => to_json(self),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRow {
    pub model: String,
    pub dataset: String,
    pub direction: Direction,
    pub test_statistic: f64,
    pub p_value: f64,
    pub reject: bool,
    pub vi_ranking: Vec<VariableImportance>,
}

impl CalibrationRow {
    pub fn from_verdict(model: &str, dataset: &str, v: &CalibrationVerdict) -> Self {
        CalibrationRow {
            model: model.into(),
            dataset: dataset.into(),
            direction: v.direction,
            test_statistic: v.max_stat,
            p_value: v.p_value,
            reject: v.reject,
            vi_ranking: v.vi_ranking.clone(),
        }
    }

    /// Non-embedding features among the ten most important, with 1-based
    /// ranks: `Prediction (1), age (2)`.
    pub fn vi_string(&self) -> String {
        vi_string(&self.vi_ranking, 10)
    }
}

pub fn vi_string(ranking: &[VariableImportance], top_n: usize) -> String {
    ranking
        .iter()
        .take(top_n)
        .enumerate()
        .filter(|(_, v)| !v.embedding)
        .map(|(i, v)| format!("{} ({})", v.feature, i + 1))
        .collect::<Vec<_>>()
        .join(", ")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub rows: Vec<CalibrationRow>,
}

impl CalibrationReport {
    const HEADER: [&'static str; 7] = ["Model", "Dataset", "Direction", "Test Statistic", "P-value", "Reject", "VI Ranking"];

    fn cells(&self) -> Vec<Vec<String>> {
        self.rows
            .iter()
            .map(|r| {
                vec![
                    r.model.clone(),
                    r.dataset.clone(),
                    r.direction.to_string(),
                    format!("{:.4}", r.test_statistic),
                    fmt3(r.p_value),
                    r.reject.to_string(),
                    r.vi_string(),
                ]
            })
            .collect()
    }

    pub fn render(&self, format: Format) -> Result<String> {
        match format {
            Format::Md => Ok(md_table(&Self::HEADER, &self.cells())),
            Format::Csv => Ok(csv_table(&Self::HEADER, &self.cells())),
            Format::Json => to_json(self),
        }
    }
}

/// An SVG chart and the CSV holding its data.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Chart {
    pub svg: String,
    pub csv: String,
}

const WIDTH: f64 = 800.0;
const HEIGHT: f64 = 480.0;
const MARGIN: f64 = 60.0;
const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
];

fn svg_open(title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">{}</text>\n",
        WIDTH / 2.0,
        escape(title)
    )
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Cumulative score of every ensemble member against evaluation index.
pub fn emit_control_chart(trajectories: &[CusumTrajectory], title: &str) -> Result<Chart> {
    if trajectories.is_empty() || trajectories.iter().all(|t| t.partial_sums.is_empty()) {
        return Err(AuditError::EmptyTrajectory);
    }
    let n = trajectories.iter().map(|t| t.partial_sums.len()).max().unwrap_or(0);
    let mut lo = 0.0f64;
    let mut hi = 0.0f64;
    for v in trajectories.iter().flat_map(|t| &t.partial_sums) {
        lo = lo.min(*v);
        hi = hi.max(*v);
    }
    if hi - lo < 1e-12 {
        hi = lo + 1.0;
    }
    let plot_w = WIDTH - 2.0 * MARGIN - 80.0;
    let plot_h = HEIGHT - 2.0 * MARGIN;
    let x_of = |i: usize| MARGIN + plot_w * if n > 1 { i as f64 / (n - 1) as f64 } else { 0.5 };
    let y_of = |v: f64| MARGIN + plot_h * (hi - v) / (hi - lo);

    let mut svg = svg_open(title);
    let _ = writeln!(
        svg,
        "<rect x=\"{MARGIN}\" y=\"{MARGIN}\" width=\"{plot_w}\" height=\"{plot_h}\" fill=\"none\" stroke=\"black\"/>"
    );
    let zero = y_of(0.0);
    let _ = writeln!(
        svg,
        "<line x1=\"{MARGIN}\" y1=\"{zero:.2}\" x2=\"{:.2}\" y2=\"{zero:.2}\" stroke=\"#999\" stroke-dasharray=\"4 3\"/>",
        MARGIN + plot_w
    );
    let _ = writeln!(
        svg,
        "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\">Evaluation index</text>",
        MARGIN + plot_w / 2.0,
        HEIGHT - 20.0
    );
    let _ = writeln!(
        svg,
        "<text x=\"16\" y=\"{:.2}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {:.2})\">Cumulative score</text>",
        MARGIN + plot_h / 2.0,
        MARGIN + plot_h / 2.0
    );
    for (v, y) in [(hi, MARGIN), (lo, MARGIN + plot_h)] {
        let _ = writeln!(
            svg,
            "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\">{v:.4}</text>",
            MARGIN - 4.0,
            y + 4.0
        );
    }
    for (k, t) in trajectories.iter().enumerate() {
        let colour = PALETTE[k % PALETTE.len()];
        let points: Vec<String> = t
            .partial_sums
            .iter()
            .enumerate()
            .map(|(i, &v)| format!("{:.2},{:.2}", x_of(i), y_of(v)))
            .collect();
        let _ = writeln!(
            svg,
            "<polyline fill=\"none\" stroke=\"{colour}\" stroke-width=\"1.2\" points=\"{}\"/>",
            points.join(" ")
        );
        let ly = MARGIN + 16.0 * k as f64;
        let lx = MARGIN + plot_w + 12.0;
        let _ = writeln!(
            svg,
            "<line x1=\"{lx:.2}\" y1=\"{ly:.2}\" x2=\"{:.2}\" y2=\"{ly:.2}\" stroke=\"{colour}\" stroke-width=\"2\"/>\n<text x=\"{:.2}\" y=\"{:.2}\">k = {}</text>",
            lx + 18.0,
            lx + 22.0,
            ly + 4.0,
            t.member_id + 1
        );
    }
    svg.push_str("</svg>\n");
    Ok(Chart {
        svg,
        csv: trajectories_csv(trajectories),
    })
}

/// Horizontal bars for the `top_n` most important features, most important
/// at the top. Ties are ordered by feature name.
pub fn emit_vi_plot(ranking: &[VariableImportance], top_n: usize, title: &str) -> Result<Chart> {
    if ranking.is_empty() {
        return Err(AuditError::EmptyRanking);
    }
    let mut sorted = ranking.to_vec();
    sorted.sort_by(|a, b| b.importance.total_cmp(&a.importance).then_with(|| a.feature.cmp(&b.feature)));
    sorted.truncate(top_n.max(1));

    let lo = sorted.iter().map(|v| v.importance).fold(0.0f64, f64::min);
    let mut hi = sorted.iter().map(|v| v.importance).fold(0.0f64, f64::max);
    if hi - lo < 1e-300 {
        hi = lo + 1.0;
    }
    let left = MARGIN + 100.0;
    let plot_w = WIDTH - left - MARGIN;
    let plot_h = HEIGHT - 2.0 * MARGIN;
    let slot = plot_h / sorted.len() as f64;
    let x_of = |v: f64| left + plot_w * (v - lo) / (hi - lo);

    let mut svg = svg_open(title);
    let zero = x_of(0.0);
    let _ = writeln!(
        svg,
        "<line x1=\"{zero:.2}\" y1=\"{MARGIN}\" x2=\"{zero:.2}\" y2=\"{:.2}\" stroke=\"black\"/>",
        MARGIN + plot_h
    );
    for (i, v) in sorted.iter().enumerate() {
        let y = MARGIN + slot * i as f64 + slot * 0.15;
        let h = slot * 0.7;
        let (x0, x1) = if v.importance >= 0.0 { (zero, x_of(v.importance)) } else { (x_of(v.importance), zero) };
        let _ = writeln!(
            svg,
            "<rect x=\"{x0:.2}\" y=\"{y:.2}\" width=\"{:.2}\" height=\"{h:.2}\" fill=\"#1f77b4\"/>",
            x1 - x0
        );
        let _ = writeln!(
            svg,
            "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\">{}</text>",
            left - 6.0,
            y + h / 2.0 + 4.0,
            escape(&v.feature)
        );
    }
    let _ = writeln!(
        svg,
        "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\">Drop in test statistic</text>",
        left + plot_w / 2.0,
        HEIGHT - 20.0
    );
    svg.push_str("</svg>\n");

    let mut csv = String::from("rank,feature,importance\n");
    for (i, v) in sorted.iter().enumerate() {
        csv.push_str(&csv_line(&[(i + 1).to_string(), v.feature.clone(), v.importance.to_string()]));
    }
    Ok(Chart { svg, csv })
}
