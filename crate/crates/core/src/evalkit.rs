//! Token-level strict-match scoring.
//!
//! A token is a true positive for class `c` when both the gold and the
//! predicted tag carry class `c` at that position. The "accuracy" column
//! reported alongside precision, recall and F1 is the Jaccard index
//! `tp / (tp + fp + fn)`, which always equals `F1 / (2 - F1)`.
//!
//! ```
//! use pico_icl::evalkit::{ClassCounts, class_metrics};
//! use pico_icl::corpus::Coarse;
//!
//! let m = class_metrics(&ClassCounts { label: Coarse::Outcomes, tp: 5, fp: 3, fn_: 5 });
//! assert!((m.accuracy - m.f1 / (2.0 - m.f1)).abs() < 1e-12);
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{BioTag, Coarse, LabeledSentence};
use crate::extractparse::AlignedPrediction;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EvalError {
    #[error("sentence `{id}`: gold has {gold} tokens, prediction has {pred}")]
    LengthMismatch { id: String, gold: usize, pred: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub label: Coarse,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ClassCounts {
    pub fn new(label: Coarse) -> Self {
        ClassCounts { label, tp: 0, fp: 0, fn_: 0 }
    }

    pub fn merge(&mut self, other: &ClassCounts) {
        debug_assert_eq!(self.label, other.label);
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }

    /// Tokens that are gold or predicted as this class.
    pub fn support(&self) -> u64 {
        self.tp + self.fp + self.fn_
    }
}

/// How a predicted tag must agree with the gold tag to count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchMode {
    /// Class identity only; B and I are interchangeable.
    #[default]
    ClassOnly,
    /// Class and B/I kind must both agree.
    KindSensitive,
}

/// Per-class counts, indexed by coarse class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountTable(BTreeMap<Coarse, ClassCounts>);

impl Default for CountTable {
    fn default() -> Self {
        CountTable(Coarse::ALL.into_iter().map(|c| (c, ClassCounts::new(c))).collect())
    }
}

impl CountTable {
    pub fn get(&self, c: Coarse) -> ClassCounts {
        self.0[&c]
    }

    pub fn iter(&self) -> impl Iterator<Item = &ClassCounts> {
        self.0.values()
    }

    pub fn merge(&mut self, other: &CountTable) {
        for (c, counts) in &other.0 {
            self.0.get_mut(c).expect("all classes present").merge(counts);
        }
    }

    fn entry(&mut self, c: Coarse) -> &mut ClassCounts {
        self.0.get_mut(&c).expect("all classes present")
    }
}

/// Per-class tp/fp/fn for one sentence. Labels are compared by coarse class.
pub fn count_tokens(gold: &[BioTag], pred: &[BioTag], mode: MatchMode) -> Result<CountTable, EvalError> {
    count_tokens_for("", gold, pred, mode)
}

fn count_tokens_for(id: &str, gold: &[BioTag], pred: &[BioTag], mode: MatchMode) -> Result<CountTable, EvalError> {
    if gold.len() != pred.len() {
        return Err(EvalError::LengthMismatch { id: id.to_string(), gold: gold.len(), pred: pred.len() });
    }
    let mut table = CountTable::default();
    for (g, p) in gold.iter().zip(pred) {
        let gc = g.label().map(|l| l.parent());
        let pc = p.label().map(|l| l.parent());
        let agree = gc == pc && (mode == MatchMode::ClassOnly || g.kind() == p.kind());
        match (gc, pc) {
            (Some(c), Some(_)) if agree => table.entry(c).tp += 1,
            _ => {
                if let Some(c) = pc {
                    table.entry(c).fp += 1;
                }
                if let Some(c) = gc {
                    table.entry(c).fn_ += 1;
                }
            }
        }
    }
    Ok(table)
}

/// Counts for a gold sentence against its aligned prediction.
pub fn count_sentence(
    gold: &LabeledSentence,
    pred: &AlignedPrediction,
    mode: MatchMode,
) -> Result<CountTable, EvalError> {
    count_tokens_for(gold.id(), gold.tags(), &pred.tags, mode)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl Metrics {
    pub const ZERO: Metrics = Metrics { precision: 0.0, recall: 0.0, f1: 0.0, accuracy: 0.0 };

    /// Derive F1 and Jaccard accuracy from a precision/recall pair.
    pub fn from_precision_recall(precision: f64, recall: f64) -> Metrics {
        let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
        Metrics { precision, recall, f1, accuracy: jaccard_from_f1(f1) }
    }

    pub fn scaled(&self, factor: f64) -> Metrics {
        Metrics {
            precision: self.precision * factor,
            recall: self.recall * factor,
            f1: self.f1 * factor,
            accuracy: self.accuracy * factor,
        }
    }
}

/// `F1 / (2 - F1)`: the Jaccard index implied by an F1 score (both as fractions).
pub fn jaccard_from_f1(f1: f64) -> f64 {
    if f1 <= 0.0 {
        0.0
    } else {
        f1 / (2.0 - f1)
    }
}

/// Precision, recall, F1 and Jaccard accuracy. Any 0/0 is 0.
pub fn class_metrics(c: &ClassCounts) -> Metrics {
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    let f1 = ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_);
    let accuracy = ratio(c.tp, c.tp + c.fp + c.fn_);
    Metrics { precision, recall, f1, accuracy }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_class: BTreeMap<Coarse, Metrics>,
    pub counts: CountTable,
    /// Unweighted mean of the per-class rows (classes with zero support are
    /// left out).
    pub macro_avg: Metrics,
    pub sentences: usize,
    pub parse_warnings: usize,
    pub unmatched_extractions: usize,
    /// Gold sentences without a prediction row; scored as all-O.
    pub missing_predictions: usize,
    /// Prediction rows marked as generation errors; scored as all-O.
    pub error_rows: usize,
}

/// Macro average over every class that appears in gold or predictions.
/// Macro F1 is the mean of per-class F1 scores, not the harmonic mean of
/// macro precision and macro recall.
pub fn macro_metrics(counts: &CountTable) -> MetricsReport {
    let per_class: BTreeMap<Coarse, Metrics> =
        counts.iter().filter(|c| c.support() > 0).map(|c| (c.label, class_metrics(c))).collect();
    let macro_avg = mean(per_class.values());
    MetricsReport {
        per_class,
        counts: counts.clone(),
        macro_avg,
        sentences: 0,
        parse_warnings: 0,
        unmatched_extractions: 0,
        missing_predictions: 0,
        error_rows: 0,
    }
}

/// Unweighted mean of metric rows.
pub fn mean<'a>(rows: impl IntoIterator<Item = &'a Metrics>) -> Metrics {
    let mut sum = Metrics::ZERO;
    let mut n = 0usize;
    for m in rows {
        sum.precision += m.precision;
        sum.recall += m.recall;
        sum.f1 += m.f1;
        sum.accuracy += m.accuracy;
        n += 1;
    }
    if n == 0 {
        Metrics::ZERO
    } else {
        sum.scaled(1.0 / n as f64)
    }
}

impl MetricsReport {
    /// Plain-text table: one row per class plus a macro row, in percent.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<6} {:>9} {:>9} {:>9} {:>9}", "", "Precision", "Recall", "F-score", "Accuracy");
        let row = |out: &mut String, name: &str, m: &Metrics| {
            let p = m.scaled(100.0);
            let _ =
                writeln!(out, "{:<6} {:>9.2} {:>9.2} {:>9.2} {:>9.2}", name, p.precision, p.recall, p.f1, p.accuracy);
        };
        // Same row order as the published per-class tables.
        for c in [Coarse::Outcomes, Coarse::Interventions, Coarse::Participants] {
            if let Some(m) = self.per_class.get(&c) {
                row(&mut out, c.short(), m);
            }
        }
        row(&mut out, "MACRO", &self.macro_avg);
        let _ = writeln!(
            out,
            "sentences={} parse_warnings={} unmatched={} missing={} errors={}",
            self.sentences, self.parse_warnings, self.unmatched_extractions, self.missing_predictions, self.error_rows
        );
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tags(s: &[&str]) -> Vec<BioTag> {
        s.iter().map(|t| t.parse().unwrap()).collect()
    }

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-4
    }

    #[test]
    fn identical_sequences_have_no_errors() {
        let g = tags(&["B-PAR", "I-PAR", "O", "B-INT", "B-OUT"]);
        let t = count_tokens(&g, &g, MatchMode::ClassOnly).unwrap();
        for c in t.iter() {
            assert_eq!((c.fp, c.fn_), (0, 0));
        }
        assert_eq!(t.get(Coarse::Participants).tp, 2);
    }

    #[test]
    fn all_outside_prediction() {
        let g = tags(&["B-INT", "I-INT", "I-INT", "O"]);
        let t = count_tokens(&g, &vec![BioTag::O; 4], MatchMode::ClassOnly).unwrap();
        assert_eq!(t.get(Coarse::Interventions), ClassCounts { label: Coarse::Interventions, tp: 0, fp: 0, fn_: 3 });
    }

    #[test]
    fn length_mismatch() {
        assert!(count_tokens(&tags(&["O"]), &[], MatchMode::ClassOnly).is_err());
    }

    #[test]
    fn ten_token_fixture_matches_per_token_table() {
        let gold = tags(&["B-PAR", "I-PAR", "O", "B-INT", "I-INT", "O", "B-OUT", "I-OUT", "I-OUT", "O"]);
        let pred = tags(&["B-PAR", "O", "O", "B-OUT", "B-INT", "B-INT", "B-OUT", "I-OUT", "O", "B-PAR"]);
        // Hand table, one row per token (gold class, predicted class):
        //  0 PAR/PAR tp(PAR)        5 O/INT   fp(INT)
        //  1 PAR/O   fn(PAR)        6 OUT/OUT tp(OUT)
        //  2 O/O     -              7 OUT/OUT tp(OUT)
        //  3 INT/OUT fn(INT) fp(OUT) 8 OUT/O  fn(OUT)
        //  4 INT/INT tp(INT)        9 O/PAR   fp(PAR)
        let t = count_tokens(&gold, &pred, MatchMode::ClassOnly).unwrap();
        let get = |c| {
            let x = t.get(c);
            (x.tp, x.fp, x.fn_)
        };
        assert_eq!(get(Coarse::Participants), (1, 1, 1));
        assert_eq!(get(Coarse::Interventions), (1, 1, 1));
        assert_eq!(get(Coarse::Outcomes), (2, 1, 1));

        // Kind-sensitive: token 4 (I vs B) no longer matches.
        let t = count_tokens(&gold, &pred, MatchMode::KindSensitive).unwrap();
        let x = t.get(Coarse::Interventions);
        assert_eq!((x.tp, x.fp, x.fn_), (0, 2, 2));
    }

    #[test]
    fn zero_counts_are_zero() {
        assert_eq!(class_metrics(&ClassCounts::new(Coarse::Outcomes)), Metrics::ZERO);
    }

    #[test]
    fn direct_formula() {
        let m = class_metrics(&ClassCounts { label: Coarse::Outcomes, tp: 5, fp: 3, fn_: 5 });
        assert!(close(m.precision, 0.625));
        assert!(close(m.recall, 0.5));
        assert!(close(m.f1, 0.5556));
        assert!(close(m.accuracy, 0.3846));
    }

    #[test]
    fn published_outcome_row() {
        let m = Metrics::from_precision_recall(0.8588, 0.4903).scaled(100.0);
        assert!((m.f1 - 62.42).abs() < 0.02, "{}", m.f1);
        assert!((m.accuracy - 45.37).abs() < 0.02, "{}", m.accuracy);
    }

    #[test]
    fn macro_examples() {
        let mut t = CountTable::default();
        t.entry(Coarse::Outcomes).tp = 3;
        t.entry(Coarse::Outcomes).fp = 1;
        let r = macro_metrics(&t);
        assert_eq!(r.per_class.len(), 1);
        assert_eq!(r.macro_avg, r.per_class[&Coarse::Outcomes]);

        let a = Metrics { precision: 0.5, recall: 0.5, f1: 0.5, accuracy: 1.0 / 3.0 };
        let b = Metrics { precision: 1.0, recall: 1.0, f1: 1.0, accuracy: 1.0 };
        assert!(close(mean([&a, &b]).f1, 0.75));
    }

    #[test]
    fn table_layout() {
        let mut t = CountTable::default();
        t.entry(Coarse::Outcomes).tp = 1;
        let table = macro_metrics(&t).to_table();
        assert!(table.lines().nth(1).unwrap().starts_with("OUT"));
        assert!(table.contains("100.00"));
    }
}
