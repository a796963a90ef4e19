//! Before/after accounting of benign and error cases.
//!
//! "Before" counts every kept case (a distribution-unaware fuzzer);
//! "after" drops the cases flagged OOD.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::fuzzer::{Corpus, CurvePoint, OutcomeKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportView {
    Before,
    After,
    Both,
}

impl FromStr for ReportView {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "before" => Ok(ReportView::Before),
            "after" => Ok(ReportView::After),
            "both" => Ok(ReportView::Both),
            other => Err(Error::UnknownName {
                family: "report view",
                name: other.to_string(),
                available: "before, after, both".into(),
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CategoryCounts {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub before: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub after: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta_percent: Option<f64>,
}

impl CategoryCounts {
    fn new(before: usize, after: usize, view: ReportView) -> Self {
        match view {
            ReportView::Before => CategoryCounts {
                before: Some(before),
                after: None,
                delta_percent: None,
            },
            ReportView::After => CategoryCounts {
                before: None,
                after: Some(after),
                delta_percent: None,
            },
            ReportView::Both => CategoryCounts {
                before: Some(before),
                after: Some(after),
                delta_percent: Some(delta_percent(before, after)),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub criterion: String,
    pub scorer: String,
    pub view: ReportView,
    /// Whether before/after come from two separate runs.
    pub separate_runs: bool,
    pub benign: CategoryCounts,
    pub error: CategoryCounts,
    pub generated: usize,
    pub discarded: usize,
    pub benign_no_gain: usize,
    pub requeued: usize,
    pub iterations: u64,
    pub coverage_ratio: f64,
    pub saturation: Vec<CurvePoint>,
}

/// `(before - after) / before * 100`, signed; 0 when `before` is 0.
pub fn delta_percent(before: usize, after: usize) -> f64 {
    if before == 0 {
        0.0
    } else {
        (before as f64 - after as f64) / before as f64 * 100.0
    }
}

fn counts(corpus: &Corpus, kind: OutcomeKind) -> (usize, usize) {
    corpus
        .records
        .iter()
        .filter(|r| r.outcome.kind == kind)
        .fold((0, 0), |(all, id), r| (all + 1, id + usize::from(!r.outcome.is_ood)))
}

/// Both columns from one corpus.
pub fn report(corpus: &Corpus, view: ReportView) -> RunReport {
    let (benign_before, benign_after) = counts(corpus, OutcomeKind::BenignGain);
    let (error_before, error_after) = counts(corpus, OutcomeKind::Error);
    build(corpus, view, false, (benign_before, benign_after), (error_before, error_after))
}

/// "Before" from an unguided run, "after" from the in-distribution cases of
/// a guided run. Run statistics are those of the guided run.
pub fn report_separate_runs(unguided: &Corpus, guided: &Corpus, view: ReportView) -> RunReport {
    let (benign_before, _) = counts(unguided, OutcomeKind::BenignGain);
    let (error_before, _) = counts(unguided, OutcomeKind::Error);
    let (_, benign_after) = counts(guided, OutcomeKind::BenignGain);
    let (_, error_after) = counts(guided, OutcomeKind::Error);
    build(guided, view, true, (benign_before, benign_after), (error_before, error_after))
}

fn build(corpus: &Corpus, view: ReportView, separate_runs: bool, benign: (usize, usize), error: (usize, usize)) -> RunReport {
    let s = &corpus.stats;
    RunReport {
        criterion: corpus.config.coverage.criterion.clone(),
        scorer: corpus.config.scorer.clone(),
        view,
        separate_runs,
        benign: CategoryCounts::new(benign.0, benign.1, view),
        error: CategoryCounts::new(error.0, error.1, view),
        generated: s.generated,
        discarded: s.discarded,
        benign_no_gain: s.benign_no_gain,
        requeued: s.requeued,
        iterations: s.iterations,
        coverage_ratio: s.coverage_ratio,
        saturation: s.saturation.clone(),
    }
}

impl RunReport {
    /// Aligned plain-text table.
    pub fn to_table(&self) -> String {
        let cell = |v: Option<usize>| v.map_or_else(|| "-".to_string(), |n| n.to_string());
        let pct = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |d| format!("{d:.2}%"));
        let rows = [
            ("benign", &self.benign),
            ("error", &self.error),
        ];
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<10} {:<7} {:>10} {:>10} {:>9}",
            "criterion", "type", "before", "after", "delta%"
        );
        for (name, c) in rows {
            let _ = writeln!(
                out,
                "{:<10} {:<7} {:>10} {:>10} {:>9}",
                self.criterion,
                name,
                cell(c.before),
                cell(c.after),
                pct(c.delta_percent)
            );
        }
        let _ = writeln!(
            out,
            "scorer {} | generated {} | discarded {} | benign w/o gain {} | requeued {} | coverage {:.4}",
            self.scorer, self.generated, self.discarded, self.benign_no_gain, self.requeued, self.coverage_ratio
        );
        out
    }
}
