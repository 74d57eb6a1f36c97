//! Per-domain evaluation metrics: accuracy, macro-averaged precision, recall
//! and F1, all in percent, each backed by a confusion matrix.
//!
//! Macro averaging runs over the classes observed in a slice (present in
//! gold labels or predictions); a class with no predictions gets precision 0
//! rather than NaN, and degenerate recall/F1 follow the same convention.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Gold-major square count matrix: `counts[gold][pred]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: usize,
    counts: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassMetrics {
    pub class: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn record(&mut self, gold: usize, pred: usize) {
        self.counts[gold * self.classes + pred] += 1;
    }

    pub fn count(&self, gold: usize, pred: usize) -> usize {
        self.counts[gold * self.classes + pred]
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn correct(&self) -> usize {
        (0..self.classes).map(|c| self.count(c, c)).sum()
    }

    pub fn accuracy_pct(&self) -> f64 {
        100.0 * self.correct() as f64 / self.total() as f64
    }

    fn gold_count(&self, class: usize) -> usize {
        (0..self.classes).map(|p| self.count(class, p)).sum()
    }

    fn pred_count(&self, class: usize) -> usize {
        (0..self.classes).map(|g| self.count(g, class)).sum()
    }

    /// Classes that appear in gold labels or predictions.
    pub fn observed_classes(&self) -> Vec<usize> {
        (0..self.classes)
            .filter(|&c| self.gold_count(c) > 0 || self.pred_count(c) > 0)
            .collect()
    }

    /// Per-class precision/recall/F1 as fractions, degenerate cases 0.
    pub fn class_metrics(&self, class: usize) -> ClassMetrics {
        let tp = self.count(class, class) as f64;
        let pred = self.pred_count(class) as f64;
        let gold = self.gold_count(class) as f64;
        let precision = if pred > 0.0 { tp / pred } else { 0.0 };
        let recall = if gold > 0.0 { tp / gold } else { 0.0 };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        ClassMetrics {
            class,
            precision,
            recall,
            f1,
        }
    }

    /// Macro precision/recall/F1 in percent over the observed classes.
    pub fn macro_metrics_pct(&self) -> (f64, f64, f64) {
        let observed = self.observed_classes();
        let n = observed.len() as f64;
        let mut p = 0.0;
        let mut r = 0.0;
        let mut f = 0.0;
        for class in observed {
            let m = self.class_metrics(class);
            p += m.precision;
            r += m.recall;
            f += m.f1;
        }
        (100.0 * p / n, 100.0 * r / n, 100.0 * f / n)
    }
}

/// One metrics row plus its confusion matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainMetrics {
    pub domain: String,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub confusion: ConfusionMatrix,
}

impl DomainMetrics {
    pub fn from_confusion(domain: impl Into<String>, confusion: ConfusionMatrix) -> Result<Self> {
        if confusion.total() == 0 {
            return Err(Error::data("cannot compute metrics over zero samples"));
        }
        let (precision, recall, f1) = confusion.macro_metrics_pct();
        Ok(DomainMetrics {
            domain: domain.into(),
            accuracy: confusion.accuracy_pct(),
            precision,
            recall,
            f1,
            confusion,
        })
    }
}

/// Per-domain rows plus the whole-dataset row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub domains: Vec<DomainMetrics>,
    pub total: DomainMetrics,
}

impl MetricsReport {
    /// Build from (domain, gold, pred) triples.
    pub fn from_outcomes(classes: usize, outcomes: &[(String, usize, usize)]) -> Result<Self> {
        if outcomes.is_empty() {
            return Err(Error::data("cannot evaluate an empty set"));
        }
        let mut total = ConfusionMatrix::new(classes);
        let mut domain_names: Vec<String> = Vec::new();
        let mut per_domain: Vec<ConfusionMatrix> = Vec::new();
        for (domain, gold, pred) in outcomes {
            if *gold >= classes || *pred >= classes {
                return Err(Error::data(format!(
                    "label {gold}/{pred} outside {classes} classes"
                )));
            }
            total.record(*gold, *pred);
            let idx = match domain_names.iter().position(|d| d == domain) {
                Some(i) => i,
                None => {
                    domain_names.push(domain.clone());
                    per_domain.push(ConfusionMatrix::new(classes));
                    domain_names.len() - 1
                }
            };
            per_domain[idx].record(*gold, *pred);
        }
        let mut rows: Vec<DomainMetrics> = domain_names
            .into_iter()
            .zip(per_domain)
            .map(|(name, cm)| DomainMetrics::from_confusion(name, cm))
            .collect::<Result<_>>()?;
        rows.sort_by(|a, b| a.domain.cmp(&b.domain));
        Ok(MetricsReport {
            domains: rows,
            total: DomainMetrics::from_confusion("Total", total)?,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("domain,accuracy,precision,recall,f1\n");
        for row in self.domains.iter().chain(std::iter::once(&self.total)) {
            out.push_str(&format!(
                "{},{:.2},{:.2},{:.2},{:.2}\n",
                row.domain, row.accuracy, row.precision, row.recall, row.f1
            ));
        }
        out
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("report serializes")
    }

    /// Fixed-width per-domain grid for terminal output.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<16} {:>8} {:>8} {:>8} {:>8}\n",
            "Domain", "Acc", "Pre", "Rec", "F1"
        ));
        for row in self.domains.iter().chain(std::iter::once(&self.total)) {
            out.push_str(&format!(
                "{:<16} {:>8.2} {:>8.2} {:>8.2} {:>8.2}\n",
                row.domain, row.accuracy, row.precision, row.recall, row.f1
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn binary_matrix(tp: usize, fp: usize, fn_: usize, tn: usize) -> ConfusionMatrix {
        // class 1 = positive, class 0 = negative
        let mut cm = ConfusionMatrix::new(2);
        for _ in 0..tp {
            cm.record(1, 1);
        }
        for _ in 0..fp {
            cm.record(0, 1);
        }
        for _ in 0..fn_ {
            cm.record(1, 0);
        }
        for _ in 0..tn {
            cm.record(0, 0);
        }
        cm
    }

    #[test]
    fn all_correct_yields_straight_hundreds() {
        let outcomes: Vec<(String, usize, usize)> = vec![
            ("Life".into(), 0, 0),
            ("Life".into(), 1, 1),
            ("Life".into(), 0, 0),
        ];
        let report = MetricsReport::from_outcomes(2, &outcomes).unwrap();
        let t = &report.total;
        assert_eq!(
            (t.accuracy, t.precision, t.recall, t.f1),
            (100.0, 100.0, 100.0, 100.0)
        );
    }

    #[test]
    fn hand_computed_confusion_fixture() {
        // TP=2 FP=1 FN=1 TN=6: accuracy 80.0, macro P/R/F1 = 76.19
        let cm = binary_matrix(2, 1, 1, 6);
        let dm = DomainMetrics::from_confusion("x", cm).unwrap();
        assert!((dm.accuracy - 80.0).abs() < 0.01);
        assert!((dm.precision - 76.19).abs() < 0.01, "{}", dm.precision);
        assert!((dm.recall - 76.19).abs() < 0.01);
        assert!((dm.f1 - 76.19).abs() < 0.01);
    }

    #[test]
    fn degenerate_class_precision_is_zero_not_nan() {
        // class 1 never predicted but present in gold
        let mut cm = ConfusionMatrix::new(2);
        cm.record(1, 0);
        cm.record(0, 0);
        let m = cm.class_metrics(1);
        assert_eq!(m.precision, 0.0);
        assert_eq!(m.recall, 0.0);
        assert_eq!(m.f1, 0.0);
        let dm = DomainMetrics::from_confusion("x", cm).unwrap();
        assert!(dm.precision.is_finite());
    }

    #[test]
    fn macro_f1_is_unweighted_mean_of_per_class_f1() {
        let cm = binary_matrix(5, 2, 3, 10);
        let f1_0 = cm.class_metrics(0).f1;
        let f1_1 = cm.class_metrics(1).f1;
        let (_, _, macro_f1) = cm.macro_metrics_pct();
        assert!((macro_f1 - 100.0 * (f1_0 + f1_1) / 2.0).abs() < 1e-9);
    }

    #[test]
    fn absent_class_is_excluded_from_macro_average() {
        // only class 0 ever appears: macro average over one class
        let mut cm = ConfusionMatrix::new(2);
        cm.record(0, 0);
        cm.record(0, 0);
        assert_eq!(cm.observed_classes(), vec![0]);
        let (p, r, f) = cm.macro_metrics_pct();
        assert_eq!((p, r, f), (100.0, 100.0, 100.0));
    }

    #[test]
    fn domains_get_their_own_rows() {
        let outcomes: Vec<(String, usize, usize)> = vec![
            ("Political".into(), 0, 0),
            ("Science".into(), 1, 0),
            ("Political".into(), 1, 1),
        ];
        let report = MetricsReport::from_outcomes(2, &outcomes).unwrap();
        assert_eq!(report.domains.len(), 2);
        assert_eq!(report.domains[0].domain, "Political");
        assert_eq!(report.domains[0].accuracy, 100.0);
        assert_eq!(report.domains[1].domain, "Science");
        assert_eq!(report.domains[1].accuracy, 0.0);
        assert_eq!(report.total.confusion.total(), 3);
    }

    #[test]
    fn accuracy_is_consistent_with_confusion_matrix() {
        let cm = binary_matrix(3, 2, 4, 1);
        let dm = DomainMetrics::from_confusion("x", cm.clone()).unwrap();
        let want = 100.0 * cm.correct() as f64 / cm.total() as f64;
        assert_eq!(dm.accuracy, want);
    }

    #[test]
    fn five_hand_computed_fixtures() {
        // (tp, fp, fn, tn) -> (acc, macro_p, macro_r, macro_f1), by hand
        let cases = [
            ((2, 1, 1, 6), (80.0, 76.19, 76.19, 76.19)),
            ((5, 0, 0, 5), (100.0, 100.0, 100.0, 100.0)),
            ((0, 5, 5, 0), (0.0, 0.0, 0.0, 0.0)),
            // pos: P=4/6, R=4/5; neg: P=4/5, R=4/6
            // F1_pos = F1_neg = 2*(4/6)*(4/5)/(4/6+4/5) = 8/11
            ((4, 2, 1, 4), (72.73, 73.33, 73.33, 72.73)),
            // pos: P=1/2, R=1/4; neg: P=6/9, R=6/7
            // F1_pos = 1/3, F1_neg = 3/4
            ((1, 1, 3, 6), (63.64, 58.33, 55.36, 54.17)),
        ];
        for ((tp, fp, fn_, tn), (acc, p, r, f)) in cases {
            let dm = DomainMetrics::from_confusion("x", binary_matrix(tp, fp, fn_, tn)).unwrap();
            assert!((dm.accuracy - acc).abs() < 0.01, "acc {} vs {acc}", dm.accuracy);
            assert!((dm.precision - p).abs() < 0.01, "p {} vs {p}", dm.precision);
            assert!((dm.recall - r).abs() < 0.01, "r {} vs {r}", dm.recall);
            assert!((dm.f1 - f).abs() < 0.01, "f1 {} vs {f}", dm.f1);
        }
    }

    #[test]
    fn empty_outcomes_are_rejected() {
        assert!(MetricsReport::from_outcomes(2, &[]).is_err());
    }
}
