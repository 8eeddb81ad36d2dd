use serde::{Deserialize, Serialize};

use crate::labels::{Label, Pred, INVALID};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricsError {
    #[error("{gold} gold labels but {pred} predictions")]
    LengthMismatch { gold: usize, pred: usize },
    #[error("gold label `{0}` is not in the taxonomy")]
    GoldOutsideTaxonomy(String),
    #[error("predicted label `{0}` is not in the taxonomy")]
    PredOutsideTaxonomy(String),
    #[error("taxonomy is empty")]
    EmptyTaxonomy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub label: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

/// Scores for one task on one set of predictions.
///
/// `confusion[g][p]` counts gold class `g` predicted as column `p`; columns
/// are the taxonomy followed by `invalid`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(default)]
    pub model: String,
    pub task: String,
    pub n: u64,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub weighted_f1: f64,
    pub per_class: Vec<ClassMetrics>,
    pub labels: Vec<String>,
    pub confusion: Vec<Vec<u64>>,
    pub invalid_rate: f64,
}

impl MetricsReport {
    pub fn named(mut self, model: impl Into<String>) -> Self {
        self.model = model.into();
        self
    }

    /// A row carrying only headline numbers, e.g. for published baselines.
    pub fn headline(model: &str, task: &str, accuracy: f64, macro_f1: f64, weighted_f1: f64) -> Self {
        Self {
            model: model.into(),
            task: task.into(),
            n: 0,
            accuracy,
            macro_f1,
            weighted_f1,
            per_class: Vec::new(),
            labels: Vec::new(),
            confusion: Vec::new(),
            invalid_rate: 0.0,
        }
    }

    pub fn f1_of(&self, label: &str) -> Option<f64> {
        self.per_class.iter().find(|c| c.label == label).map(|c| c.f1)
    }

    pub fn column_labels(&self) -> Vec<String> {
        let mut cols = self.labels.clone();
        cols.push(INVALID.to_string());
        cols
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Accuracy, per-class precision/recall/F1, macro and support-weighted F1.
///
/// Every taxonomy class enters the macro average; a class with no support and
/// no predictions scores 0. Invalid predictions are wrong answers that add to
/// no class's predicted count.
pub fn compute_metrics<L: Label>(gold: &[L], pred: &[Pred<L>], taxonomy: &[L]) -> Result<MetricsReport, MetricsError> {
    if gold.len() != pred.len() {
        return Err(MetricsError::LengthMismatch { gold: gold.len(), pred: pred.len() });
    }
    if taxonomy.is_empty() {
        return Err(MetricsError::EmptyTaxonomy);
    }
    let k = taxonomy.len();
    let index = |l: L| taxonomy.iter().position(|t| *t == l);
    let mut confusion = vec![vec![0u64; k + 1]; k];
    for (&g, &p) in gold.iter().zip(pred) {
        let row = index(g).ok_or_else(|| MetricsError::GoldOutsideTaxonomy(g.to_string()))?;
        let col = match p {
            Pred::Label(l) => index(l).ok_or_else(|| MetricsError::PredOutsideTaxonomy(l.to_string()))?,
            Pred::Invalid => k,
        };
        confusion[row][col] += 1;
    }

    let n = gold.len() as u64;
    let correct: u64 = (0..k).map(|i| confusion[i][i]).sum();
    let invalid: u64 = confusion.iter().map(|r| r[k]).sum();
    let per_class: Vec<ClassMetrics> = taxonomy
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let tp = confusion[i][i];
            let support: u64 = confusion[i].iter().sum();
            let predicted: u64 = confusion.iter().map(|r| r[i]).sum();
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, support);
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            ClassMetrics { label: l.to_string(), precision, recall, f1, support }
        })
        .collect();
    let macro_f1 = per_class.iter().map(|c| c.f1).sum::<f64>() / k as f64;
    let weighted_f1 = if n == 0 {
        0.0
    } else {
        per_class.iter().map(|c| c.f1 * c.support as f64).sum::<f64>() / n as f64
    };

    Ok(MetricsReport {
        model: String::new(),
        task: L::TASK.to_string(),
        n,
        accuracy: ratio(correct, n),
        macro_f1,
        weighted_f1,
        per_class,
        labels: taxonomy.iter().map(ToString::to_string).collect(),
        confusion,
        invalid_rate: ratio(invalid, n),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labels::{Emotion, Sentiment};
    use proptest::prelude::*;
    use Sentiment::{Negative as A, Neutral as B, Positive as C};

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn three_pair_example() {
        let tax = [A, B];
        let r = compute_metrics(&[A, A, B], &[A.into(), B.into(), B.into()], &tax).unwrap();
        assert!(close(r.f1_of("negative").unwrap(), 2.0 / 3.0));
        assert!(close(r.f1_of("neutral").unwrap(), 2.0 / 3.0));
        assert!(close(r.macro_f1, 2.0 / 3.0));
        assert!(close(r.weighted_f1, 2.0 / 3.0));
        assert!(close(r.accuracy, 2.0 / 3.0));
    }

    #[test]
    fn perfect_predictor() {
        let gold = [A, B, C, C];
        let pred: Vec<_> = gold.iter().map(|&g| Pred::Label(g)).collect();
        let r = compute_metrics(&gold, &pred, &Sentiment::ALL).unwrap();
        assert_eq!((r.accuracy, r.macro_f1, r.weighted_f1), (1.0, 1.0, 1.0));
        assert_eq!(r.task, "sentiment");
    }

    #[test]
    fn invalid_is_a_false_negative_only() {
        let r = compute_metrics(&[A, A], &[Pred::Invalid, A.into()], &[A, B]).unwrap();
        assert!(close(r.accuracy, 0.5));
        let a = &r.per_class[0];
        assert!(close(a.precision, 1.0) && close(a.recall, 0.5) && close(a.f1, 2.0 / 3.0));
        assert_eq!(r.f1_of("neutral"), Some(0.0));
        assert!(close(r.macro_f1, 1.0 / 3.0));
        assert!(close(r.invalid_rate, 0.5));
        assert_eq!(r.confusion, vec![vec![1, 0, 1], vec![0, 0, 0]]);
        assert_eq!(r.column_labels(), ["negative", "neutral", "invalid"]);
    }

    #[test]
    fn errors() {
        assert_eq!(
            compute_metrics(&[A], &[], &[A]).unwrap_err(),
            MetricsError::LengthMismatch { gold: 1, pred: 0 }
        );
        assert_eq!(
            compute_metrics(&[C], &[C.into()], &[A, B]).unwrap_err(),
            MetricsError::GoldOutsideTaxonomy("positive".into())
        );
        assert_eq!(
            compute_metrics(&[A], &[C.into()], &[A, B]).unwrap_err(),
            MetricsError::PredOutsideTaxonomy("positive".into())
        );
    }

    #[test]
    fn empty_input_scores_zero() {
        let r = compute_metrics::<Emotion>(&[], &[], &Emotion::ALL).unwrap();
        assert_eq!((r.n, r.accuracy, r.macro_f1, r.weighted_f1), (0, 0.0, 0.0, 0.0));
    }

    fn draws() -> impl Strategy<Value = Vec<(usize, Option<usize>)>> {
        prop::collection::vec((0..7usize, prop::option::weighted(0.9, 0..7usize)), 1..120)
    }

    fn split(d: &[(usize, Option<usize>)]) -> (Vec<Emotion>, Vec<Pred<Emotion>>) {
        d.iter()
            .map(|&(g, p)| (Emotion::ALL[g], p.map_or(Pred::Invalid, |p| Pred::Label(Emotion::ALL[p]))))
            .unzip()
    }

    proptest! {
        #[test]
        fn confusion_rows_sum_to_support(d in draws()) {
            let (g, p) = split(&d);
            let r = compute_metrics(&g, &p, &Emotion::ALL).unwrap();
            let total: u64 = r.confusion.iter().flatten().sum();
            prop_assert_eq!(total, r.n);
            for (row, c) in r.confusion.iter().zip(&r.per_class) {
                prop_assert_eq!(row.iter().sum::<u64>(), c.support);
            }
        }

        #[test]
        fn macro_f1_ignores_sample_and_class_order(d in draws(), rot in 0..7usize) {
            let (g, p) = split(&d);
            let base = compute_metrics(&g, &p, &Emotion::ALL).unwrap();
            let (mut g2, mut p2) = (g.clone(), p.clone());
            g2.reverse();
            p2.reverse();
            let mut tax = Emotion::ALL;
            tax.rotate_left(rot);
            let other = compute_metrics(&g2, &p2, &tax).unwrap();
            prop_assert!((base.macro_f1 - other.macro_f1).abs() < 1e-12);
            prop_assert!((base.weighted_f1 - other.weighted_f1).abs() < 1e-12);
        }

        #[test]
        fn balanced_supports_make_weighted_equal_macro(per in 1..6usize, preds in prop::collection::vec(prop::option::of(0..7usize), 42)) {
            let mut gold = Vec::new();
            let mut pred = Vec::new();
            for (i, p) in preds.iter().cycle().take(7 * per).enumerate() {
                gold.push(Emotion::ALL[i % 7]);
                pred.push(p.map_or(Pred::Invalid, |p| Pred::Label(Emotion::ALL[p])));
            }
            let r = compute_metrics(&gold, &pred, &Emotion::ALL).unwrap();
            prop_assert!((r.weighted_f1 - r.macro_f1).abs() < 1e-12);
        }
    }
}
