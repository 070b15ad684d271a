//! Complexity-vs-score correlation, cost-benefit tables and class-count
//! figure data.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::finetune::{MetricReport, Stat};
use crate::flops::{relative_difference, round_half_away};
use crate::objective::{ClassCount, Direction, ObjectiveSpec};
use crate::{Error, Result};

pub use crate::metrics::{pearson, Correlation};

/// Pseudo-task name for the unweighted mean of every task mean.
pub const AVG_TASK: &str = "avg";

/// Pearson r, with constant inputs reported as degenerate (r = 0).
pub fn pearson_r(xs: &[f64], ys: &[f64]) -> Result<Correlation> {
    pearson(xs, ys)
}

/// Everything known about one pretraining objective.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentResult {
    pub objective: ObjectiveSpec,
    pub num_classes: usize,
    /// Task name to headline-metric mean/spread over seeds.
    pub scores: BTreeMap<String, Stat>,
    pub total_flops: Option<f64>,
}

impl ExperimentResult {
    pub fn new(objective: ObjectiveSpec, num_classes: usize) -> Self {
        Self {
            objective,
            num_classes,
            scores: BTreeMap::new(),
            total_flops: None,
        }
    }

    pub fn with_score(mut self, task: &str, mean: f64) -> Self {
        self.scores.insert(task.to_string(), Stat { mean, std: 0.0, count: 1 });
        self
    }

    pub fn with_flops(mut self, flops: f64) -> Self {
        self.total_flops = Some(flops);
        self
    }

    /// Mean score for `task`, or the mean over all tasks for [`AVG_TASK`].
    pub fn score(&self, task: &str) -> Option<f64> {
        if task == AVG_TASK {
            if self.scores.is_empty() {
                return None;
            }
            return Some(self.scores.values().map(|s| s.mean).sum::<f64>() / self.scores.len() as f64);
        }
        self.scores.get(task).map(|s| s.mean)
    }
}

/// Headline metrics tried in order when none is named.
pub const HEADLINE_METRICS: [&str; 4] = ["accuracy", "matthews", "spearman", "span_f1_with_miss"];

/// Build results from per-task metric reports. Each task contributes
/// `metric`, or the first of [`HEADLINE_METRICS`] it reports. Reports
/// sharing an objective are merged.
pub fn results_from_reports(reports: &[MetricReport], metric: Option<&str>) -> Result<Vec<ExperimentResult>> {
    let mut out: Vec<ExperimentResult> = Vec::new();
    for r in reports {
        let stat = match metric {
            Some(m) => r.get(m),
            None => HEADLINE_METRICS.iter().find_map(|m| r.get(m)),
        }
        .ok_or_else(|| Error::Config(format!("task `{}` has no usable metric for {}", r.task, r.objective)))?;
        let pos = match out.iter().position(|e| e.objective == r.objective) {
            Some(p) => {
                if out[p].num_classes != r.num_classes {
                    return Err(Error::Config(format!(
                        "{} reported with {} and {} classes",
                        r.objective, out[p].num_classes, r.num_classes
                    )));
                }
                p
            }
            None => {
                out.push(ExperimentResult::new(r.objective, r.num_classes));
                out.len() - 1
            }
        };
        out[pos].scores.insert(r.task.clone(), stat);
    }
    Ok(out)
}

/// Cost-benefit rows as CSV `objective,flops,flops_diff_pct,task,score,diff_pct`.
pub fn cost_benefit_csv(rows: &[CostBenefitRow]) -> String {
    let mut s = String::from("objective,flops,flops_diff_pct,task,score,diff_pct\n");
    for r in rows {
        let flops = r.flops.map_or(String::new(), |f| format!("{f:e}"));
        let fd = r.flops_diff.map_or(String::new(), |d| format!("{:.1}", round_half_away(d, 1)));
        for (task, v, d) in &r.scores {
            let _ = writeln!(s, "{},{flops},{fd},{task},{v},{d:.1}", r.objective);
        }
    }
    s
}

/// x variable of a complexity correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ComplexityAxis {
    /// log10 of the label-space size; family baseline, n sweep and MLM.
    Log10Classes,
    /// Raw label-space size; same points.
    Classes,
    /// n of the n-character objectives only (baseline and MLM have no n).
    N,
}

impl ComplexityAxis {
    pub const ALL: [ComplexityAxis; 3] = [ComplexityAxis::Log10Classes, ComplexityAxis::Classes, ComplexityAxis::N];

    pub fn tag(&self) -> &'static str {
        match self {
            ComplexityAxis::Log10Classes => "log10_classes",
            ComplexityAxis::Classes => "classes",
            ComplexityAxis::N => "n",
        }
    }
}

impl std::str::FromStr for ComplexityAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ComplexityAxis::ALL
            .into_iter()
            .find(|a| a.tag() == s)
            .ok_or_else(|| Error::Parse(format!("unknown complexity axis `{s}` (expected log10_classes, classes or n)")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationReport {
    pub family: Direction,
    pub task: String,
    pub axis: ComplexityAxis,
    pub r: f64,
    pub degenerate: bool,
    pub points: usize,
}

pub fn complexity_correlation(results: &[ExperimentResult], family: Direction, task: &str, axis: ComplexityAxis) -> Result<CorrelationReport> {
    let baseline = match family {
        Direction::First => ObjectiveSpec::FirstChar29,
        Direction::Last => ObjectiveSpec::LastChar29,
    };
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for r in results {
        let x = match (r.objective, axis) {
            (ObjectiveSpec::NChars { direction, n }, ComplexityAxis::N) if direction == family => n as f64,
            (_, ComplexityAxis::N) => continue,
            (ObjectiveSpec::NChars { direction, .. }, _) if direction != family => continue,
            (o, _) if o == baseline || o == ObjectiveSpec::Mlm || o.direction() == Some(family) => {
                if axis == ComplexityAxis::Log10Classes {
                    (r.num_classes as f64).log10()
                } else {
                    r.num_classes as f64
                }
            }
            _ => continue,
        };
        let Some(y) = r.score(task) else {
            return Err(Error::Config(format!("{} has no score for task `{task}`", r.objective)));
        };
        xs.push(x);
        ys.push(y);
    }
    if xs.len() < 3 {
        return Err(Error::TooFewPoints { needed: 3, got: xs.len() });
    }
    let c = pearson(&xs, &ys)?;
    Ok(CorrelationReport {
        family,
        task: task.to_string(),
        axis,
        r: c.r,
        degenerate: c.degenerate,
        points: xs.len(),
    })
}

/// One objective's scores and cost next to their differences from MLM.
#[derive(Clone, Debug, PartialEq)]
pub struct CostBenefitRow {
    pub objective: ObjectiveSpec,
    pub flops: Option<f64>,
    /// Percentage difference in FLOPs from MLM, unrounded.
    pub flops_diff: Option<f64>,
    /// (task, score, difference from MLM rounded to one decimal)
    pub scores: Vec<(String, f64, f64)>,
}

pub fn cost_benefit_table(results: &[ExperimentResult]) -> Result<Vec<CostBenefitRow>> {
    let base = results
        .iter()
        .find(|r| r.objective == ObjectiveSpec::Mlm)
        .ok_or_else(|| Error::MissingBaseline("no MLM row in the result set".into()))?;
    results
        .iter()
        .map(|r| {
            let flops_diff = match (r.total_flops, base.total_flops) {
                (Some(v), Some(b)) => Some(relative_difference(v, b)?),
                _ => None,
            };
            let mut scores = Vec::with_capacity(r.scores.len());
            for (task, s) in &r.scores {
                let b = base
                    .score(task)
                    .ok_or_else(|| Error::MissingBaseline(format!("MLM has no score for task `{task}`")))?;
                scores.push((task.clone(), s.mean, round_half_away(relative_difference(s.mean, b)?, 1)));
            }
            Ok(CostBenefitRow {
                objective: r.objective,
                flops: r.total_flops,
                flops_diff,
                scores,
            })
        })
        .collect()
}

/// Whether a printed relative difference is consistent with printed values.
///
/// `value` and `baseline` were printed with `input_decimals` places, so each
/// stands for an interval of half a unit in the last place. The printed
/// difference is consistent if some pair of true values inside those
/// intervals rounds (half away from zero, `printed_decimals` places) to it.
pub fn difference_consistent(value: f64, baseline: f64, input_decimals: i32, printed: f64, printed_decimals: i32) -> Result<bool> {
    if baseline == 0.0 {
        return Err(Error::ZeroBaseline);
    }
    let half = 0.5 * 10f64.powi(-input_decimals);
    let (blo, bhi) = (baseline - half, baseline + half);
    if blo <= 0.0 {
        return Ok(true);
    }
    // the difference is monotone in each argument, so the corners bound it
    let corners = [
        relative_difference(value - half, bhi)?,
        relative_difference(value - half, blo)?,
        relative_difference(value + half, bhi)?,
        relative_difference(value + half, blo)?,
    ];
    let lo = corners.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = corners.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let unit = 0.5 * 10f64.powi(-printed_decimals);
    // slack for decimal inputs that are not exact in binary
    let tol = 1e-9;
    Ok(hi >= printed - unit - tol && lo <= printed + unit + tol)
}

/// Emitted figure data: CSV text and an SVG document.
#[derive(Clone, Debug, PartialEq)]
pub struct FigureData {
    pub csv: String,
    pub svg: String,
}

/// Class counts per n for both directions, with the 29-class and |V|
/// reference lines. Log-scale y axis.
pub fn emit_figure_data(sweep: &[ClassCount], vocab_size: usize, char_classes: usize) -> Result<FigureData> {
    if sweep.is_empty() {
        return Err(Error::Empty("class-count sweep"));
    }
    let mut rows = sweep.to_vec();
    rows.sort_by_key(|c| (c.direction, c.n));

    let mut csv = String::from("direction,n,num_classes\n");
    for c in &rows {
        let _ = writeln!(csv, "{},{},{}", c.direction.as_str(), c.n, c.num_classes);
    }

    let (w, h, pad) = (640.0, 400.0, 60.0);
    let n_min = rows.iter().map(|c| c.n).min().unwrap_or(1) as f64;
    let n_max = rows.iter().map(|c| c.n).max().unwrap_or(1) as f64;
    let y_lo = (rows.iter().map(|c| c.num_classes).min().unwrap_or(1).min(char_classes).max(1) as f64).log10().floor();
    let y_hi = (vocab_size.max(2) as f64).log10().ceil().max(y_lo + 1.0);
    let sx = |n: f64| {
        if n_max > n_min {
            pad + (n - n_min) / (n_max - n_min) * (w - 2.0 * pad)
        } else {
            w / 2.0
        }
    };
    let sy = |v: f64| h - pad - (v.max(1.0).log10() - y_lo) / (y_hi - y_lo) * (h - 2.0 * pad);

    let mut svg = String::new();
    let _ = writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(svg, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<g stroke="black"><line x1="{pad}" y1="{b}" x2="{r}" y2="{b}"/><line x1="{pad}" y1="{pad}" x2="{pad}" y2="{b}"/></g>"#,
        b = h - pad,
        r = w - pad
    );
    for e in y_lo as i32..=y_hi as i32 {
        let y = sy(10f64.powi(e));
        let _ = writeln!(svg, r#"<text x="{:.1}" y="{:.1}" font-size="11" text-anchor="end">1e{e}</text>"#, pad - 6.0, y + 4.0);
    }
    let mut ns: Vec<usize> = rows.iter().map(|c| c.n).collect();
    ns.dedup();
    for n in &ns {
        let _ = writeln!(svg, r#"<text x="{:.1}" y="{:.1}" font-size="11" text-anchor="middle">{n}</text>"#, sx(*n as f64), h - pad + 16.0);
    }
    let refs = [("MLM (|V|)", vocab_size, "#888888"), ("First/Last Char", char_classes, "#cc8800")];
    for (label, v, colour) in refs {
        let y = sy(v as f64);
        let _ = writeln!(
            svg,
            r#"<line x1="{pad}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="{colour}" stroke-dasharray="6 4"/><text x="{:.1}" y="{:.1}" font-size="11">{label}</text>"#,
            w - pad,
            pad + 4.0,
            y - 4.0
        );
    }
    for (dir, colour) in [(Direction::First, "#1f60c4"), (Direction::Last, "#c42b1f")] {
        let pts: Vec<String> = rows
            .iter()
            .filter(|c| c.direction == dir)
            .map(|c| format!("{:.1},{:.1}", sx(c.n as f64), sy(c.num_classes as f64)))
            .collect();
        if pts.is_empty() {
            continue;
        }
        let _ = writeln!(svg, r#"<polyline fill="none" stroke="{colour}" stroke-width="2" points="{}"/>"#, pts.join(" "));
    }
    let _ = writeln!(svg, r#"<text x="{:.1}" y="20" font-size="12" text-anchor="middle">classes per n (log scale)</text>"#, w / 2.0);
    svg.push_str("</svg>\n");
    Ok(FigureData { csv, svg })
}

pub fn write_figure_data(fig: &FigureData, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv = dir.join("class_counts.csv");
    std::fs::write(&csv, &fig.csv).map_err(|e| Error::io(&csv, e))?;
    let svg = dir.join("class_counts.svg");
    std::fs::write(&svg, &fig.svg).map_err(|e| Error::io(&svg, e))
}

pub fn correlation_csv(reports: &[CorrelationReport]) -> String {
    let mut s = String::from("family,task,axis,r,degenerate,points\n");
    for r in reports {
        let _ = writeln!(s, "{},{},{},{:.6},{},{}", r.family.as_str(), r.task, r.axis.tag(), r.r, r.degenerate, r.points);
    }
    s
}

/// Markdown summary with the cost-benefit table and correlations.
pub fn markdown_summary(table: &[CostBenefitRow], correlations: &[CorrelationReport]) -> String {
    let mut tasks: Vec<&str> = Vec::new();
    for row in table {
        for (t, _, _) in &row.scores {
            if !tasks.contains(&t.as_str()) {
                tasks.push(t);
            }
        }
    }
    let mut s = String::from("## Cost and scores relative to MLM\n\n| objective | FLOPs |");
    for t in &tasks {
        let _ = write!(s, " {t} |");
    }
    s.push_str("\n|---|---|");
    s.push_str(&"---|".repeat(tasks.len()));
    s.push('\n');
    for row in table {
        let flops = match (row.flops, row.flops_diff) {
            (Some(f), Some(d)) => format!("{f:.2e} ({:+.0}%)", round_half_away(d, 0)),
            (Some(f), None) => format!("{f:.2e}"),
            _ => "-".into(),
        };
        let _ = write!(s, "| {} | {flops} |", row.objective.label());
        for t in &tasks {
            match row.scores.iter().find(|(name, _, _)| name == t) {
                Some((_, v, d)) => {
                    let _ = write!(s, " {v:.4} ({d:+.1}) |");
                }
                None => s.push_str(" - |"),
            }
        }
        s.push('\n');
    }
    if !correlations.is_empty() {
        s.push_str("\n## Complexity correlation\n\n| family | task | axis | r | points |\n|---|---|---|---|---|\n");
        for c in correlations {
            let r = if c.degenerate { "degenerate".to_string() } else { format!("{:.3}", c.r) };
            let _ = writeln!(s, "| {} | {} | {} | {r} | {} |", c.family.as_str(), c.task, c.axis.tag(), c.points);
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn nch(d: Direction, n: usize) -> ObjectiveSpec {
        ObjectiveSpec::NChars { direction: d, n }
    }

    fn desk_results() -> Vec<ExperimentResult> {
        vec![
            ExperimentResult::new(ObjectiveSpec::FirstChar29, 29).with_score("probe", 0.50),
            ExperimentResult::new(nch(Direction::First, 1), 120).with_score("probe", 0.55),
            ExperimentResult::new(nch(Direction::First, 2), 400).with_score("probe", 0.54),
            ExperimentResult::new(nch(Direction::First, 4), 800).with_score("probe", 0.60),
            ExperimentResult::new(nch(Direction::Last, 4), 700).with_score("probe", 0.10),
            ExperimentResult::new(ObjectiveSpec::Mlm, 1000).with_score("probe", 0.62),
        ]
    }

    #[test]
    fn pearson_hand_formula() {
        // xs=(1,2,3) ys=(1,2,4): cov 1.5, var 1 and 7/3 (n-1 normalisation)
        let r = pearson_r(&[1.0, 2.0, 3.0], &[1.0, 2.0, 4.0]).unwrap();
        assert!((r.r - 1.5 / (7.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert_eq!(pearson_r(&[1.0, 2.0, 3.0], &[5.0, 3.0, 1.0]).unwrap().r, -1.0);
    }

    #[test]
    fn correlation_matches_manual_extraction() {
        let res = desk_results();
        let rep = complexity_correlation(&res, Direction::First, "probe", ComplexityAxis::Log10Classes).unwrap();
        let xs: Vec<f64> = [29.0f64, 120.0, 400.0, 800.0, 1000.0].iter().map(|v| v.log10()).collect();
        let manual = pearson_r(&xs, &[0.50, 0.55, 0.54, 0.60, 0.62]).unwrap();
        assert_eq!(rep.r, manual.r);
        assert_eq!(rep.points, 5);
        let rn = complexity_correlation(&res, Direction::First, "probe", ComplexityAxis::N).unwrap();
        assert_eq!(rn.points, 3);
    }

    #[test]
    fn correlation_degenerate_and_too_few() {
        let flat: Vec<ExperimentResult> = desk_results()
            .into_iter()
            .map(|mut r| {
                r.scores.clear();
                r.with_score("probe", 0.5)
            })
            .collect();
        let rep = complexity_correlation(&flat, Direction::First, "probe", ComplexityAxis::Classes).unwrap();
        assert!(rep.degenerate && rep.r == 0.0);
        let few = &desk_results()[4..];
        assert!(matches!(
            complexity_correlation(few, Direction::Last, "probe", ComplexityAxis::Classes),
            Err(Error::TooFewPoints { .. })
        ));
    }

    #[test]
    fn cost_benefit_examples() {
        let res = vec![
            ExperimentResult::new(ObjectiveSpec::Mlm, 50265).with_score("ud", 88.8).with_flops(2.44e19),
            ExperimentResult::new(nch(Direction::First, 4), 20479).with_score("ud", 88.5).with_flops(2.0e19),
        ];
        let t = cost_benefit_table(&res).unwrap();
        assert_eq!(t[0].scores[0].2, 0.0);
        assert_eq!(t[0].flops_diff, Some(0.0));
        assert_eq!(t[1].scores[0].2, -0.3);
        assert!(matches!(cost_benefit_table(&res[1..]), Err(Error::MissingBaseline(_))));
    }

    #[test]
    fn interval_consistency() {
        assert!(difference_consistent(53.0, 58.0, 1, -8.7, 1).unwrap());
        assert!(!difference_consistent(53.0, 58.0, 1, -8.0, 1).unwrap());
        // 88.3 vs 88.8 is -0.56 exactly but the inputs allow -0.5
        assert!(difference_consistent(88.3, 88.8, 1, -0.5, 1).unwrap());
    }

    #[test]
    fn figure_three_points() {
        let sweep = vec![
            ClassCount { direction: Direction::Last, n: 1, num_classes: 256 },
            ClassCount { direction: Direction::First, n: 2, num_classes: 2355 },
            ClassCount { direction: Direction::First, n: 1, num_classes: 256 },
        ];
        let fig = emit_figure_data(&sweep, 50265, 29).unwrap();
        assert_eq!(fig.csv, "direction,n,num_classes\nfirst,1,256\nfirst,2,2355\nlast,1,256\n");
        assert!(fig.svg.starts_with("<svg") && fig.svg.trim_end().ends_with("</svg>"));
        assert!(fig.svg.contains("MLM (|V|)"));
        assert!(emit_figure_data(&[], 10, 29).is_err());
    }
}
