//! Readers and writers for every intermediate file under the work directory.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use proq_core::cohort::InclusionReason;
use proq_core::metrics::MetricReport;
use proq_core::quantizer::N_CUTS;
use proq_core::training::{EpochRecord, Split, SplitPart};
use proq_core::{CohortMember, Date, Label, LabeledExample, PersonId, QuantileMap, TaskSpec, Token, TokenSequence, Vocabulary};

use crate::cdm_csv::{FormatError, Table, DATE_FORMAT};

pub const COHORT_HEADER: [&str; 5] = ["person_id", "inclusion_reasons", "stage3a_index", "stage5_index", "last_observed"];
pub const LABEL_HEADER: [&str; 6] = ["person_id", "anchor", "window_start", "followup_days", "assessment_days", "label"];
pub const SPLIT_HEADER: [&str; 2] = ["person_id", "split"];
pub const REPORT_HEADER: [&str; 13] = [
    "followup_days",
    "assessment_days",
    "roc_auc",
    "pr_auc",
    "accuracy",
    "specificity",
    "precision",
    "recall",
    "f1",
    "threshold",
    "n_pos",
    "n_neg",
    "degenerate",
];

pub fn write_text(path: &Path, text: &str) -> Result<(), FormatError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| FormatError::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| FormatError::io(path, e))
}

pub fn read_text(path: &Path) -> Result<String, FormatError> {
    fs::read_to_string(path).map_err(|e| FormatError::io(path, e))
}

fn csv_line(out: &mut String, fields: &[String]) {
    out.push_str(&fields.join(","));
    out.push('\n');
}

fn date(d: Date) -> String {
    d.format(DATE_FORMAT).to_string()
}

fn opt_date(d: Option<Date>) -> String {
    d.map(date).unwrap_or_default()
}

fn parse_date(row: &crate::cdm_csv::Row<'_>, column: &str) -> Result<Date, FormatError> {
    Date::parse_from_str(row.raw(column), DATE_FORMAT).map_err(|e| row.error(column, e.to_string()))
}

fn parse_opt_date(row: &crate::cdm_csv::Row<'_>, column: &str) -> Result<Option<Date>, FormatError> {
    if row.raw(column).is_empty() {
        Ok(None)
    } else {
        parse_date(row, column).map(Some)
    }
}

pub fn cohort_csv(members: &[CohortMember]) -> String {
    let mut out = String::new();
    csv_line(&mut out, &COHORT_HEADER.map(String::from));
    for m in members {
        let reasons: Vec<String> = m.inclusion_reasons.iter().map(ToString::to_string).collect();
        csv_line(
            &mut out,
            &[
                m.person_id.to_string(),
                reasons.join("|"),
                opt_date(m.stage3a_index),
                opt_date(m.stage5_index),
                date(m.last_observed),
            ],
        );
    }
    out
}

pub fn read_cohort(path: &Path) -> Result<Vec<CohortMember>, FormatError> {
    let mut out = Vec::new();
    Table::open(path, &COHORT_HEADER)?.for_each(|r| {
        let mut reasons = BTreeSet::new();
        for tag in r.raw("inclusion_reasons").split('|').filter(|t| !t.is_empty()) {
            reasons.insert(tag.parse::<InclusionReason>().map_err(|e| r.error("inclusion_reasons", e.to_string()))?);
        }
        out.push(CohortMember {
            person_id: r.parse("person_id")?,
            inclusion_reasons: reasons,
            stage3a_index: parse_opt_date(r, "stage3a_index")?,
            stage5_index: parse_opt_date(r, "stage5_index")?,
            last_observed: parse_date(r, "last_observed")?,
        });
        Ok(())
    })?;
    Ok(out)
}

pub fn labels_csv(examples: &[LabeledExample]) -> String {
    let mut out = String::new();
    csv_line(&mut out, &LABEL_HEADER.map(String::from));
    for e in examples {
        csv_line(
            &mut out,
            &[
                e.person_id.to_string(),
                date(e.anchor),
                date(e.window_start),
                e.followup_days.to_string(),
                e.assessment_days.to_string(),
                e.label.as_u8().to_string(),
            ],
        );
    }
    out
}

pub fn read_labels(path: &Path) -> Result<Vec<LabeledExample>, FormatError> {
    let mut out = Vec::new();
    Table::open(path, &LABEL_HEADER)?.for_each(|r| {
        let label = Label::from_u8(r.parse("label")?).ok_or_else(|| r.error("label", "expected 0 or 1"))?;
        out.push(LabeledExample {
            person_id: r.parse("person_id")?,
            anchor: parse_date(r, "anchor")?,
            window_start: parse_date(r, "window_start")?,
            followup_days: r.parse("followup_days")?,
            assessment_days: r.parse("assessment_days")?,
            label,
        });
        Ok(())
    })?;
    Ok(out)
}

fn part_name(p: SplitPart) -> &'static str {
    match p {
        SplitPart::Train => "train",
        SplitPart::Val => "val",
        SplitPart::Test => "test",
    }
}

pub fn split_csv(split: &Split) -> String {
    let mut rows: Vec<(PersonId, SplitPart)> = Vec::new();
    for (part, ids) in [(SplitPart::Train, &split.train), (SplitPart::Val, &split.val), (SplitPart::Test, &split.test)] {
        rows.extend(ids.iter().map(|&id| (id, part)));
    }
    rows.sort();
    let mut out = String::new();
    csv_line(&mut out, &SPLIT_HEADER.map(String::from));
    for (id, part) in rows {
        csv_line(&mut out, &[id.to_string(), part_name(part).to_string()]);
    }
    out
}

pub fn read_split(path: &Path) -> Result<Split, FormatError> {
    let mut split = Split::default();
    Table::open(path, &SPLIT_HEADER)?.for_each(|r| {
        let id: PersonId = r.parse("person_id")?;
        match r.raw("split") {
            "train" => split.train.insert(id),
            "val" => split.val.insert(id),
            "test" => split.test.insert(id),
            other => return Err(r.error("split", format!("unknown split {other:?}"))),
        };
        Ok(())
    })?;
    Ok(split)
}

/// One line per concept: the id then nine cut points.
pub fn quantiles_text(qm: &QuantileMap) -> String {
    let mut out = String::new();
    for (concept, cuts) in qm.iter() {
        let _ = write!(out, "{concept}");
        for c in cuts.cuts {
            let _ = write!(out, ",{c:?}");
        }
        out.push('\n');
    }
    out
}

pub fn parse_quantiles(path: &Path, text: &str) -> Result<QuantileMap, FormatError> {
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let bad = |message: String| FormatError::Line { path: path.to_path_buf(), line: i as u64 + 1, message };
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != N_CUTS + 1 {
            return Err(bad(format!("expected {} fields, found {}", N_CUTS + 1, fields.len())));
        }
        let concept = fields[0].parse().map_err(|e| bad(format!("concept_id: {e}")))?;
        let mut cuts = [0.0; N_CUTS];
        for (slot, f) in cuts.iter_mut().zip(&fields[1..]) {
            *slot = f.parse().map_err(|e| bad(format!("cut point {f:?}: {e}")))?;
        }
        entries.push((concept, cuts));
    }
    QuantileMap::from_cuts(entries).map_err(|e| FormatError::Content { path: path.to_path_buf(), message: e.to_string() })
}

pub fn parse_vocab(path: &Path, text: &str) -> Result<Vocabulary, FormatError> {
    Vocabulary::from_lines(text.lines()).map_err(|e| FormatError::Content { path: path.to_path_buf(), message: e.to_string() })
}

/// `person_id \t label \t tokens`, label empty when unlabeled.
pub fn sequences_text(seqs: &[TokenSequence]) -> String {
    let mut out = String::new();
    for s in seqs {
        let label = s.label.map(|l| l.as_u8().to_string()).unwrap_or_default();
        let _ = writeln!(out, "{}\t{}\t{}", s.person_id, label, s.text());
    }
    out
}

/// Sequence records as read back from disk; token times are not persisted.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceRecord {
    pub person_id: PersonId,
    pub label: Option<Label>,
    pub tokens: Vec<Token>,
}

pub fn parse_sequences(path: &Path, text: &str) -> Result<Vec<SequenceRecord>, FormatError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.is_empty()) {
        let bad = |message: String| FormatError::Line { path: path.to_path_buf(), line: i as u64 + 1, message };
        let mut fields = line.split('\t');
        let (Some(id), Some(label), Some(tokens), None) = (fields.next(), fields.next(), fields.next(), fields.next()) else {
            return Err(bad("expected three tab-separated fields".into()));
        };
        let person_id = id.parse().map_err(|e| bad(format!("person_id: {e}")))?;
        let label = match label {
            "" => None,
            l => Some(l.parse::<u8>().ok().and_then(Label::from_u8).ok_or_else(|| bad(format!("label {l:?}")))?),
        };
        let tokens = tokens
            .split(' ')
            .filter(|t| !t.is_empty())
            .map(|t| t.parse::<Token>().map_err(|e| bad(e.to_string())))
            .collect::<Result<_, _>>()?;
        out.push(SequenceRecord { person_id, label, tokens });
    }
    Ok(out)
}

/// `epoch \t train_loss \t val_metric \t wall_seconds`. The header names the
/// validation metric.
pub fn training_log(history: &[(EpochRecord, f64)], val_metric: &str) -> String {
    let mut out = format!("epoch\ttrain_loss\t{val_metric}\twall_seconds\n");
    for (r, wall) in history {
        let val = if val_metric == "val_auc" { r.val_auc } else { r.val_loss };
        let val = val.map(|v| format!("{v:?}")).unwrap_or_default();
        let _ = writeln!(out, "{}\t{:?}\t{}\t{:.3}", r.epoch, r.train_loss, val, wall);
    }
    out
}

fn report_fields(r: &MetricReport) -> Vec<String> {
    vec![
        format!("{:?}", r.roc_auc),
        format!("{:?}", r.pr_auc),
        format!("{:?}", r.accuracy),
        format!("{:?}", r.specificity),
        format!("{:?}", r.precision),
        format!("{:?}", r.recall),
        format!("{:?}", r.f1),
        format!("{:?}", r.threshold),
        r.n_pos.to_string(),
        r.n_neg.to_string(),
        u8::from(r.degenerate).to_string(),
    ]
}

/// A row key: a grid value or `mean` for an average over that axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Axis {
    Value(u32),
    Mean,
}

impl std::fmt::Display for Axis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Axis::Value(v) => write!(f, "{v}"),
            Axis::Mean => f.write_str("mean"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub followup: Axis,
    pub assessment: Axis,
    pub report: MetricReport,
}

/// Grid rows followed by per-follow-up means, per-assessment means and the
/// overall mean. Cells are sorted by (followup, assessment).
pub fn summarize(cells: &[(TaskSpec, MetricReport)]) -> Vec<ReportRow> {
    let mut cells = cells.to_vec();
    cells.sort_by_key(|(t, _)| (t.followup_days, t.assessment_days));
    let mut rows: Vec<ReportRow> = cells
        .iter()
        .map(|(t, r)| ReportRow { followup: Axis::Value(t.followup_days), assessment: Axis::Value(t.assessment_days), report: *r })
        .collect();
    let followups: BTreeSet<u32> = cells.iter().map(|(t, _)| t.followup_days).collect();
    let assessments: BTreeSet<u32> = cells.iter().map(|(t, _)| t.assessment_days).collect();
    let mean_where = |pred: &dyn Fn(&TaskSpec) -> bool| {
        let picked: Vec<MetricReport> = cells.iter().filter(|(t, _)| pred(t)).map(|(_, r)| *r).collect();
        MetricReport::mean(&picked)
    };
    for &f in &followups {
        if let Some(r) = mean_where(&|t| t.followup_days == f) {
            rows.push(ReportRow { followup: Axis::Value(f), assessment: Axis::Mean, report: r });
        }
    }
    for &a in &assessments {
        if let Some(r) = mean_where(&|t| t.assessment_days == a) {
            rows.push(ReportRow { followup: Axis::Mean, assessment: Axis::Value(a), report: r });
        }
    }
    if let Some(r) = mean_where(&|_| true) {
        rows.push(ReportRow { followup: Axis::Mean, assessment: Axis::Mean, report: r });
    }
    rows
}

pub fn report_csv(rows: &[ReportRow]) -> String {
    let mut out = String::new();
    csv_line(&mut out, &REPORT_HEADER.map(String::from));
    for row in rows {
        let mut fields = vec![row.followup.to_string(), row.assessment.to_string()];
        fields.extend(report_fields(&row.report));
        csv_line(&mut out, &fields);
    }
    out
}

fn parse_axis(row: &crate::cdm_csv::Row<'_>, column: &str) -> Result<Axis, FormatError> {
    match row.raw(column) {
        "mean" => Ok(Axis::Mean),
        _ => row.parse(column).map(Axis::Value),
    }
}

pub fn read_report(path: &Path) -> Result<Vec<ReportRow>, FormatError> {
    let mut out = Vec::new();
    Table::open(path, &REPORT_HEADER)?.for_each(|r| {
        let degenerate: u8 = r.parse("degenerate")?;
        out.push(ReportRow {
            followup: parse_axis(r, "followup_days")?,
            assessment: parse_axis(r, "assessment_days")?,
            report: MetricReport {
                roc_auc: r.parse("roc_auc")?,
                pr_auc: r.parse("pr_auc")?,
                accuracy: r.parse("accuracy")?,
                specificity: r.parse("specificity")?,
                precision: r.parse("precision")?,
                recall: r.parse("recall")?,
                f1: r.parse("f1")?,
                threshold: r.parse("threshold")?,
                n_pos: r.parse("n_pos")?,
                n_neg: r.parse("n_neg")?,
                degenerate: degenerate != 0,
            },
        });
        Ok(())
    })?;
    Ok(out)
}

/// Per-example test predictions: `person_id,label,score`.
pub fn predictions_csv(ids: &[PersonId], labels: &[u8], scores: &[f64]) -> String {
    let mut out = String::from("person_id,label,score\n");
    for ((id, l), s) in ids.iter().zip(labels).zip(scores) {
        let _ = writeln!(out, "{id},{l},{s:?}");
    }
    out
}
