//! Comparison tables, learning curves and report files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{mean_parity_reduction, relative_change, Direction, EvalResult};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantKind {
    #[default]
    Model,
    /// Reference rows such as Uniform Guess; no delta against a base.
    Bound,
}

/// Raw scores for one table row. Accuracy is in percent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantScore {
    pub name: String,
    pub accuracy: Option<f64>,
    pub alignment: Option<f64>,
    /// Row this variant is compared against; the report base when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base: Option<String>,
    #[serde(default)]
    pub kind: VariantKind,
    /// Per-category demographic parity.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub parity: BTreeMap<String, f64>,
}

impl VariantScore {
    pub fn model(name: &str, accuracy: Option<f64>, alignment: Option<f64>) -> Self {
        VariantScore {
            name: name.into(),
            accuracy,
            alignment,
            base: None,
            kind: VariantKind::Model,
            parity: BTreeMap::new(),
        }
    }

    pub fn bound(name: &str, accuracy: Option<f64>, alignment: Option<f64>) -> Self {
        VariantScore {
            kind: VariantKind::Bound,
            ..Self::model(name, accuracy, alignment)
        }
    }

    pub fn with_base(mut self, base: &str) -> Self {
        self.base = Some(base.into());
        self
    }

    pub fn from_eval(r: &EvalResult) -> Self {
        VariantScore {
            parity: r.macro_score.parity.clone(),
            ..Self::model(&r.variant, r.macro_score.accuracy.map(|a| a * 100.0), r.macro_score.alignment)
        }
    }

    /// Uniform Guess and Empirical Best rows from one evaluation's bounds.
    pub fn bounds_of(r: &EvalResult) -> [VariantScore; 2] {
        let b = &r.macro_score.bounds;
        [
            Self::bound(
                "Uniform Guess",
                b.uniform_guess_accuracy.map(|a| a * 100.0),
                b.uniform_guess_alignment,
            ),
            Self::bound("Empirical Best", None, b.empirical_best),
        ]
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Deltas {
    pub accuracy: Option<f64>,
    pub alignment: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mark {
    Best,
    Second,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub variant: VariantScore,
    /// Base actually used for this row, if any.
    pub compared_to: Option<String>,
    pub vs_base: Deltas,
    pub vs_reference: Option<Deltas>,
    pub accuracy_mark: Option<Mark>,
    pub alignment_mark: Option<Mark>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParitySummary {
    /// Mean across categories of the parity reduction vs each row's base.
    pub mean_reduction: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub fraction: f64,
    pub accuracy: Option<f64>,
    pub alignment: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub points: Vec<SweepPoint>,
    pub saturation: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub baseline_name: String,
    pub reference_name: Option<String>,
    pub rows: Vec<ReportRow>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepTable>,
    pub parity_summary: ParitySummary,
}

fn deltas(v: &VariantScore, base: &VariantScore) -> Deltas {
    let pair = |m: Option<f64>, b: Option<f64>, d| m.zip(b).and_then(|(m, b)| relative_change(m, b, d));
    Deltas {
        accuracy: pair(v.accuracy, base.accuracy, Direction::HigherBetter),
        alignment: pair(v.alignment, base.alignment, Direction::LowerBetter),
    }
}

/// Best and second-best marks among model rows sharing a base.
fn rank(rows: &mut [ReportRow], value: impl Fn(&VariantScore) -> Option<f64>, higher: bool, accuracy: bool) {
    let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, r) in rows.iter().enumerate() {
        if r.variant.kind == VariantKind::Model && value(&r.variant).is_some() {
            let g = r.compared_to.clone().unwrap_or_else(|| r.variant.name.clone());
            groups.entry(g).or_default().push(i);
        }
    }
    for idx in groups.values() {
        let mut vals: Vec<f64> = idx.iter().filter_map(|&i| value(&rows[i].variant)).collect();
        vals.sort_by(|a, b| if higher { b.total_cmp(a) } else { a.total_cmp(b) });
        vals.dedup();
        for &i in idx {
            let v = value(&rows[i].variant).expect("filtered above");
            let mark = if Some(&v) == vals.first() {
                Some(Mark::Best)
            } else if Some(&v) == vals.get(1) {
                Some(Mark::Second)
            } else {
                None
            };
            if accuracy {
                rows[i].accuracy_mark = mark;
            } else {
                rows[i].alignment_mark = mark;
            }
        }
    }
}

/// Builds the comparison table. Each model row is compared with its own
/// base (or `base`), and every row with `reference` when given.
pub fn build_report(variants: &[VariantScore], base: &str, reference: Option<&str>) -> Result<EvalReport> {
    let by_name: BTreeMap<&str, &VariantScore> = variants.iter().map(|v| (v.name.as_str(), v)).collect();
    if by_name.len() != variants.len() {
        return Err(Error::Config("duplicate variant names".into()));
    }
    let lookup = |name: &str| {
        by_name.get(name).copied().ok_or_else(|| Error::UnknownKey {
            kind: "variant",
            id: name.into(),
        })
    };
    lookup(base)?;
    let reference_row = reference.map(lookup).transpose()?;

    let mut rows = Vec::with_capacity(variants.len());
    let mut mean_reduction = BTreeMap::new();
    for v in variants {
        let compared_to = match v.kind {
            VariantKind::Bound => None,
            VariantKind::Model => {
                let b = v.base.as_deref().unwrap_or(base);
                (b != v.name).then(|| b.to_string())
            }
        };
        let vs_base = match &compared_to {
            Some(b) => {
                let b = lookup(b)?;
                if let Some(m) = mean_parity_reduction(&v.parity, &b.parity) {
                    mean_reduction.insert(v.name.clone(), m);
                }
                deltas(v, b)
            }
            None => Deltas::default(),
        };
        let vs_reference = reference_row
            .filter(|r| r.name != v.name)
            .map(|r| deltas(v, r));
        rows.push(ReportRow {
            variant: v.clone(),
            compared_to,
            vs_base,
            vs_reference,
            accuracy_mark: None,
            alignment_mark: None,
        });
    }
    rank(&mut rows, |v| v.accuracy, true, true);
    rank(&mut rows, |v| v.alignment, false, false);
    Ok(EvalReport {
        baseline_name: base.into(),
        reference_name: reference.map(str::to_string),
        rows,
        sweep: None,
        parity_summary: ParitySummary { mean_reduction },
    })
}

/// Relative tolerance used to call a sweep saturated.
pub const SATURATION_TOLERANCE: f64 = 0.02;

/// Orders sweep points by fraction and flags the smallest fraction whose
/// alignment is within 2% (relative) of the alignment at the 0.5 point, or
/// at the largest fraction when 0.5 was not run.
pub fn build_sweep(points: &[SweepPoint]) -> SweepTable {
    let mut points = points.to_vec();
    points.sort_by(|a, b| a.fraction.total_cmp(&b.fraction));
    let saturation = if points.len() < 2 {
        None
    } else {
        let anchor = points
            .iter()
            .find(|p| (p.fraction - 0.5).abs() < 1e-9)
            .or(points.last())
            .and_then(|p| p.alignment);
        anchor.and_then(|a| {
            points
                .iter()
                .find(|p| {
                    p.alignment.is_some_and(|x| {
                        if a == 0.0 {
                            x == 0.0
                        } else {
                            (x - a).abs() / a.abs() <= SATURATION_TOLERANCE
                        }
                    })
                })
                .map(|p| p.fraction)
        })
    };
    SweepTable { points, saturation }
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "--".into(), |v| format!("{v:.1}%"))
}

fn marked(text: String, mark: Option<Mark>) -> String {
    match mark {
        Some(Mark::Best) => format!("**{text}**"),
        Some(Mark::Second) => format!("<u>{text}</u>"),
        None => text,
    }
}

pub fn to_markdown(report: &EvalReport) -> String {
    let reference = report.reference_name.as_deref();
    let mut s = String::new();
    let mut header = vec!["Variant", "Accuracy", "%Δ vs Base"];
    let ref_col = reference.map(|r| format!("vs {r}"));
    if let Some(c) = &ref_col {
        header.push(c);
    }
    header.extend(["Distribution", "%Δ vs Base"]);
    if let Some(c) = &ref_col {
        header.push(c);
    }
    let _ = writeln!(s, "| {} |", header.join(" | "));
    let _ = writeln!(s, "|{}", "---|".repeat(header.len()));
    for row in &report.rows {
        let v = &row.variant;
        let mut cells = vec![
            v.name.clone(),
            marked(v.accuracy.map_or_else(|| "--".into(), |a| format!("{a:.1}")), row.accuracy_mark),
            pct(row.vs_base.accuracy),
        ];
        if reference.is_some() {
            cells.push(pct(row.vs_reference.as_ref().and_then(|d| d.accuracy)));
        }
        cells.push(marked(v.alignment.map_or_else(|| "--".into(), |a| format!("{a:.3}")), row.alignment_mark));
        cells.push(pct(row.vs_base.alignment));
        if reference.is_some() {
            cells.push(pct(row.vs_reference.as_ref().and_then(|d| d.alignment)));
        }
        let _ = writeln!(s, "| {} |", cells.join(" | "));
    }

    let categories: Vec<&String> = {
        let mut c: Vec<&String> = report.rows.iter().flat_map(|r| r.variant.parity.keys()).collect();
        c.sort();
        c.dedup();
        c
    };
    if !categories.is_empty() {
        let _ = writeln!(s, "\n## Demographic parity\n");
        let names: Vec<&str> = categories.iter().map(|c| c.as_str()).collect();
        let _ = writeln!(s, "| Variant | {} | Mean reduction |", names.join(" | "));
        let _ = writeln!(s, "|{}", "---|".repeat(names.len() + 2));
        for row in report.rows.iter().filter(|r| !r.variant.parity.is_empty()) {
            let vals: Vec<String> = categories
                .iter()
                .map(|c| row.variant.parity.get(*c).map_or_else(|| "--".into(), |p| format!("{p:.4}")))
                .collect();
            let _ = writeln!(
                s,
                "| {} | {} | {} |",
                row.variant.name,
                vals.join(" | "),
                pct(report.parity_summary.mean_reduction.get(&row.variant.name).copied())
            );
        }
    }

    if let Some(sweep) = &report.sweep {
        let _ = writeln!(s, "\n## Participant sweep\n");
        let _ = writeln!(s, "| Pilot fraction | Accuracy | Distribution |");
        let _ = writeln!(s, "|---|---|---|");
        for p in &sweep.points {
            let flag = if sweep.saturation == Some(p.fraction) { " (saturated)" } else { "" };
            let _ = writeln!(
                s,
                "| {:.0}%{flag} | {} | {} |",
                p.fraction * 100.0,
                p.accuracy.map_or_else(|| "--".into(), |a| format!("{:.1}", a * 100.0)),
                p.alignment.map_or_else(|| "--".into(), |a| format!("{a:.3}")),
            );
        }
    }
    s
}

fn opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

/// One row per variant with raw scores and deltas at full precision.
pub fn to_csv(report: &EvalReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "variant",
        "kind",
        "compared_to",
        "accuracy",
        "alignment",
        "accuracy_vs_base",
        "alignment_vs_base",
        "accuracy_vs_reference",
        "alignment_vs_reference",
    ])?;
    for r in &report.rows {
        let kind = match r.variant.kind {
            VariantKind::Model => "model",
            VariantKind::Bound => "bound",
        };
        w.write_record([
            r.variant.name.clone(),
            kind.to_string(),
            r.compared_to.clone().unwrap_or_default(),
            opt(r.variant.accuracy),
            opt(r.variant.alignment),
            opt(r.vs_base.accuracy),
            opt(r.vs_base.alignment),
            opt(r.vs_reference.as_ref().and_then(|d| d.accuracy)),
            opt(r.vs_reference.as_ref().and_then(|d| d.alignment)),
        ])?;
    }
    finish_csv(w)
}

fn finish_csv(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::Config(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn to_json(report: &EvalReport) -> Result<String> {
    Ok(serde_json::to_string_pretty(report)?)
}

/// Tidy `variant,metric,group,value` rows for plotting.
pub fn to_plotdata(report: &EvalReport, results: &[EvalResult]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["variant", "metric", "group", "value"])?;
    let mut put = |v: &str, m: &str, g: &str, x: Option<f64>| -> Result<()> {
        if let Some(x) = x {
            w.write_record([v, m, g, &x.to_string()])?;
        }
        Ok(())
    };
    for r in &report.rows {
        let n = &r.variant.name;
        put(n, "accuracy", "all", r.variant.accuracy)?;
        put(n, "alignment", "all", r.variant.alignment)?;
        put(n, "accuracy_vs_base", "all", r.vs_base.accuracy)?;
        put(n, "alignment_vs_base", "all", r.vs_base.alignment)?;
        if let Some(d) = &r.vs_reference {
            put(n, "accuracy_vs_reference", "all", d.accuracy)?;
            put(n, "alignment_vs_reference", "all", d.alignment)?;
        }
        for (cat, p) in &r.variant.parity {
            put(n, "parity", cat, Some(*p))?;
        }
    }
    for res in results {
        for table in &res.macro_score.subgroups {
            for (value, g) in &table.groups {
                put(&res.variant, "subgroup_alignment", &format!("{}={}", table.category, value), g.alignment)?;
            }
        }
    }
    if let Some(sweep) = &report.sweep {
        for p in &sweep.points {
            let g = p.fraction.to_string();
            put("sweep", "accuracy", &g, p.accuracy)?;
            put("sweep", "alignment", &g, p.alignment)?;
        }
    }
    drop(put);
    finish_csv(w)
}

/// Stimulus-level scores of every evaluation, one row per (variant, stimulus).
pub fn per_stimulus_csv(results: &[EvalResult]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "variant",
        "study_id",
        "condition_id",
        "outcome_id",
        "wasserstein",
        "accuracy",
        "n_truth",
        "n_pred",
        "bounds_min",
        "bounds_max",
    ])?;
    for r in results {
        for s in &r.stimuli {
            w.write_record([
                r.variant.clone(),
                s.key.study_id.clone(),
                s.key.condition_id.clone(),
                s.key.outcome_id.clone(),
                opt(s.wasserstein),
                opt(s.accuracy),
                s.n_truth.to_string(),
                s.n_pred.to_string(),
                s.bounds_min.to_string(),
                s.bounds_max.to_string(),
            ])?;
        }
    }
    finish_csv(w)
}

/// Writes `report.md`, `scores.json`, `per_stimulus.csv` and `plot/*.csv`.
pub fn write_report_dir(report: &EvalReport, results: &[EvalResult], dir: &Path) -> Result<()> {
    let plot = dir.join("plot");
    fs::create_dir_all(&plot).map_err(|e| Error::io(&plot, e))?;
    let write = |name: &Path, text: String| fs::write(name, text).map_err(|e| Error::io(name, e));
    write(&dir.join("report.md"), to_markdown(report))?;
    write(&dir.join("report.csv"), to_csv(report)?)?;
    let scores = serde_json::json!({ "report": report, "evaluations": results });
    write(&dir.join("scores.json"), serde_json::to_string_pretty(&scores)?)?;
    write(&dir.join("per_stimulus.csv"), per_stimulus_csv(results)?)?;
    write(&plot.join("scores.csv"), to_plotdata(report, results)?)?;
    Ok(())
}
