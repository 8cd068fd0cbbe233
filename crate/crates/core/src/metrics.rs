//! Calibration metrics and diagnostics: ECE, reliability bins, NLL, Brier,
//! disagreement, Hausdorff distance between representation sets, weight norms.
//!
//! All functions here are pure and accept immutable slices; they form the
//! evaluation path, independent of the tape-based loss path used in training.

use serde::{Deserialize, Serialize};

use crate::autodiff::ParamSet;
use crate::model::Prediction;

/// Probability floor shared with the training losses.
pub const PROB_FLOOR: f64 = 1e-12;

/// One confidence bin of a reliability diagram.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReliabilityBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub accuracy: f64,
    pub confidence: f64,
}

/// Per-bin accuracy/confidence table over `(0, 1]` split into T equal bins.
///
/// Bin t (1-based) covers `((t-1)/T, t/T]`; confidence exactly 0 lands in
/// bin 1.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReliabilityBins {
    pub bins: Vec<ReliabilityBin>,
    pub total: usize,
}

/// Bin index (0-based) for a confidence value.
///
/// Starts from `ceil(conf * T)` and then corrects against the exact f64 bin
/// boundaries `(t-1)/T` and `t/T`, so the result always satisfies the
/// interval test `conf > (t-1)/T && conf <= t/T` bit-for-bit.
fn bin_index(confidence: f64, t_bins: usize) -> usize {
    debug_assert!((0.0..=1.0).contains(&confidence));
    if confidence <= 0.0 {
        return 0;
    }
    let tf = t_bins as f64;
    let mut t = (confidence * tf).ceil() as usize;
    t = t.clamp(1, t_bins);
    while t > 1 && confidence <= (t - 1) as f64 / tf {
        t -= 1;
    }
    while t < t_bins && confidence > t as f64 / tf {
        t += 1;
    }
    t - 1
}

pub fn reliability_bins(
    predictions: &[Prediction],
    labels: &[usize],
    t_bins: usize,
) -> ReliabilityBins {
    assert!(!predictions.is_empty(), "reliability_bins: empty prediction set");
    assert!(t_bins >= 1, "reliability_bins: need at least one bin");
    assert_eq!(predictions.len(), labels.len(), "predictions/labels length mismatch");

    let tf = t_bins as f64;
    let mut count = vec![0usize; t_bins];
    let mut correct = vec![0usize; t_bins];
    let mut conf_sum = vec![0.0; t_bins];
    for (pred, &label) in predictions.iter().zip(labels) {
        let b = bin_index(pred.confidence, t_bins);
        count[b] += 1;
        conf_sum[b] += pred.confidence;
        if pred.label == label {
            correct[b] += 1;
        }
    }
    let bins = (0..t_bins)
        .map(|b| ReliabilityBin {
            lo: b as f64 / tf,
            hi: (b + 1) as f64 / tf,
            count: count[b],
            accuracy: if count[b] > 0 { correct[b] as f64 / count[b] as f64 } else { 0.0 },
            confidence: if count[b] > 0 { conf_sum[b] / count[b] as f64 } else { 0.0 },
        })
        .collect();
    ReliabilityBins { bins, total: predictions.len() }
}

impl ReliabilityBins {
    /// Weighted fold of per-bin |accuracy - confidence| gaps; this is ECE.
    pub fn ece(&self) -> f64 {
        let n = self.total as f64;
        self.bins
            .iter()
            .filter(|b| b.count > 0)
            .map(|b| b.count as f64 / n * (b.accuracy - b.confidence).abs())
            .sum()
    }

    /// CSV rows in the plotting contract: `bin_lo,bin_hi,count,accuracy,confidence`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_lo,bin_hi,count,accuracy,confidence\n");
        for b in &self.bins {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                b.lo, b.hi, b.count, b.accuracy, b.confidence
            ));
        }
        out
    }
}

/// Expected calibration error over T equidistant confidence bins.
pub fn ece(predictions: &[Prediction], labels: &[usize], t_bins: usize) -> f64 {
    reliability_bins(predictions, labels, t_bins).ece()
}

/// Mean negative log-probability of the true label, floored at [`PROB_FLOOR`].
pub fn nll(predictions: &[Prediction], labels: &[usize]) -> f64 {
    assert!(!predictions.is_empty(), "nll: empty prediction set");
    assert_eq!(predictions.len(), labels.len());
    let total: f64 = predictions
        .iter()
        .zip(labels)
        .map(|(p, &y)| -p.probs[y - 1].max(PROB_FLOOR).ln())
        .sum();
    total / predictions.len() as f64
}

/// Mean squared error against the one-hot target, summed over classes.
pub fn brier_score(predictions: &[Prediction], labels: &[usize]) -> f64 {
    assert!(!predictions.is_empty(), "brier_score: empty prediction set");
    assert_eq!(predictions.len(), labels.len());
    let total: f64 = predictions
        .iter()
        .zip(labels)
        .map(|(p, &y)| {
            p.probs
                .iter()
                .enumerate()
                .map(|(k, &pk)| {
                    let t = if k + 1 == y { 1.0 } else { 0.0 };
                    (pk - t) * (pk - t)
                })
                .sum::<f64>()
        })
        .sum();
    total / predictions.len() as f64
}

/// Fraction of correct argmax predictions, in [0, 1].
pub fn accuracy(predictions: &[Prediction], labels: &[usize]) -> f64 {
    assert!(!predictions.is_empty(), "accuracy: empty prediction set");
    assert_eq!(predictions.len(), labels.len());
    let correct = predictions.iter().zip(labels).filter(|(p, &y)| p.label == y).count();
    correct as f64 / predictions.len() as f64
}

/// Mean over unordered member pairs of the fraction of examples on which
/// the two members' argmax predictions differ.
pub fn disagreement(member_predictions: &[Vec<Prediction>]) -> f64 {
    let m = member_predictions.len();
    assert!(m >= 2, "disagreement needs at least two members");
    let n = member_predictions[0].len();
    assert!(
        member_predictions.iter().all(|p| p.len() == n),
        "disagreement: members evaluated on different sets"
    );
    assert!(n > 0, "disagreement: empty evaluation set");
    let mut total = 0.0;
    let mut pairs = 0usize;
    for a in 0..m {
        for b in a + 1..m {
            let differing = member_predictions[a]
                .iter()
                .zip(&member_predictions[b])
                .filter(|(pa, pb)| pa.label != pb.label)
                .count();
            total += differing as f64 / n as f64;
            pairs += 1;
        }
    }
    total / pairs as f64
}

/// Which Hausdorff aggregation to use between representation sets.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HausdorffVariant {
    /// Classical symmetric max of directed max-min distances.
    #[default]
    MaxMin,
    /// Mean of the two directed average-min distances.
    Average,
}

fn directed_min_distances(from: &[Vec<f64>], to: &[Vec<f64>]) -> Vec<f64> {
    from.iter()
        .map(|a| {
            to.iter()
                .map(|b| {
                    a.iter()
                        .zip(b)
                        .map(|(x, y)| (x - y) * (x - y))
                        .sum::<f64>()
                        .sqrt()
                })
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

/// Hausdorff distance in Euclidean space between two non-empty sets of
/// equal-dimension vectors.
pub fn hausdorff_euclidean(set_a: &[Vec<f64>], set_b: &[Vec<f64>], variant: HausdorffVariant) -> f64 {
    assert!(!set_a.is_empty() && !set_b.is_empty(), "hausdorff: empty set");
    let dim = set_a[0].len();
    assert!(
        set_a.iter().chain(set_b).all(|v| v.len() == dim),
        "hausdorff: dimension mismatch"
    );
    let ab = directed_min_distances(set_a, set_b);
    let ba = directed_min_distances(set_b, set_a);
    match variant {
        HausdorffVariant::MaxMin => {
            let fwd = ab.iter().cloned().fold(0.0, f64::max);
            let bwd = ba.iter().cloned().fold(0.0, f64::max);
            fwd.max(bwd)
        }
        HausdorffVariant::Average => {
            let fwd = ab.iter().sum::<f64>() / ab.len() as f64;
            let bwd = ba.iter().sum::<f64>() / ba.len() as f64;
            0.5 * (fwd + bwd)
        }
    }
}

/// L2 norm of all parameters whose name passes `scope`.
pub fn weight_norm(params: &ParamSet, scope: impl Fn(&str) -> bool) -> f64 {
    let mut sum = 0.0;
    let mut matched = false;
    for p in params.iter() {
        if scope(&p.name) {
            matched = true;
            sum += p.value.data.iter().map(|v| v * v).sum::<f64>();
        }
    }
    assert!(matched, "weight_norm: scope matched no parameters");
    sum.sqrt()
}

/// Final evaluation summary. The `*_x100` fields are presentation copies,
/// exactly 100x the raw values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy_percent: f64,
    pub ece: f64,
    pub nll: f64,
    pub brier: f64,
    pub ece_x100: f64,
    pub nll_x100: f64,
}

impl EvalReport {
    pub fn from_predictions(predictions: &[Prediction], labels: &[usize], t_bins: usize) -> Self {
        let ece_raw = ece(predictions, labels, t_bins);
        let nll_raw = nll(predictions, labels);
        EvalReport {
            accuracy_percent: 100.0 * accuracy(predictions, labels),
            ece: ece_raw,
            nll: nll_raw,
            brier: brier_score(predictions, labels),
            ece_x100: 100.0 * ece_raw,
            nll_x100: 100.0 * nll_raw,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    fn pred(probs: Vec<f64>) -> Prediction {
        Prediction::from_probs(probs)
    }

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    #[test]
    fn ece_zero_for_confident_correct() {
        let preds = vec![pred(vec![1.0, 0.0]); 4];
        let labels = vec![1, 1, 1, 1];
        assert_eq!(ece(&preds, &labels, 15), 0.0);
    }

    #[test]
    fn ece_single_incorrect_prediction() {
        let preds = vec![pred(vec![0.7, 0.3])];
        let labels = vec![2];
        assert_close(ece(&preds, &labels, 1), 0.7, 1e-12);
    }

    #[test]
    fn ece_hand_checked_four_sample_case() {
        // confidences 0.9, 0.8, 0.6, 0.95 with correctness 1,0,1,1 at T=15:
        // bins 14, 12, 9, 15 each hold one sample; gaps 0.1, 0.8, 0.4, 0.05
        // weighted by 1/4 each -> 0.3375
        let preds = vec![
            pred(vec![0.9, 0.1]),
            pred(vec![0.8, 0.2]),
            pred(vec![0.6, 0.4]),
            pred(vec![0.95, 0.05]),
        ];
        let labels = vec![1, 2, 1, 1];
        assert_close(ece(&preds, &labels, 15), 0.3375, 1e-12);

        let bins = reliability_bins(&preds, &labels, 15);
        let occupied: Vec<usize> = bins
            .bins
            .iter()
            .enumerate()
            .filter(|(_, b)| b.count > 0)
            .map(|(i, _)| i + 1)
            .collect();
        assert_eq!(occupied, vec![9, 12, 14, 15]);
        assert!(bins.bins.iter().filter(|b| b.count > 0).all(|b| b.count == 1));
    }

    #[test]
    fn bins_counts_sum_to_n() {
        let preds: Vec<Prediction> = (0..50)
            .map(|i| {
                let p = 0.5 + 0.01 * (i as f64 % 50.0);
                pred(vec![p, 1.0 - p])
            })
            .collect();
        let labels = vec![1; 50];
        let bins = reliability_bins(&preds, &labels, 10);
        let total: usize = bins.bins.iter().map(|b| b.count).sum();
        assert_eq!(total, 50);
    }

    #[test]
    fn uniform_confidence_occupies_one_bin() {
        let preds = vec![pred(vec![0.73, 0.27]); 8];
        let labels = vec![1; 8];
        let bins = reliability_bins(&preds, &labels, 15);
        assert_eq!(bins.bins.iter().filter(|b| b.count > 0).count(), 1);
    }

    #[test]
    fn ece_equals_bins_fold() {
        let preds = vec![
            pred(vec![0.55, 0.45]),
            pred(vec![0.91, 0.09]),
            pred(vec![0.34, 0.66]),
        ];
        let labels = vec![1, 2, 2];
        let direct = ece(&preds, &labels, 15);
        let folded = reliability_bins(&preds, &labels, 15).ece();
        assert_eq!(direct, folded);
    }

    #[test]
    fn nll_perfect_predictions() {
        let preds = vec![pred(vec![1.0, 0.0]); 3];
        assert_eq!(nll(&preds, &[1, 1, 1]), 0.0);
    }

    #[test]
    fn nll_half_probability() {
        let preds = vec![pred(vec![0.5, 0.5])];
        assert_close(nll(&preds, &[1]), 0.693147, 1e-6);
    }

    #[test]
    fn nll_two_example_mean() {
        let preds = vec![pred(vec![1.0, 0.0]), pred(vec![0.5, 0.5])];
        assert_close(nll(&preds, &[1, 1]), 0.346574, 1e-6);
    }

    #[test]
    fn brier_perfect_and_hand_case() {
        let preds = vec![pred(vec![1.0, 0.0])];
        assert_eq!(brier_score(&preds, &[1]), 0.0);
        let preds = vec![pred(vec![0.7, 0.3])];
        assert_close(brier_score(&preds, &[1]), 0.18, 1e-12);
    }

    #[test]
    fn brier_bounded_by_two() {
        let preds = vec![pred(vec![1.0, 0.0])];
        assert!(brier_score(&preds, &[2]) <= 2.0);
    }

    #[test]
    fn disagreement_identical_members_is_zero() {
        let a = vec![pred(vec![0.9, 0.1]), pred(vec![0.2, 0.8])];
        assert_eq!(disagreement(&[a.clone(), a]), 0.0);
    }

    #[test]
    fn disagreement_one_of_three() {
        let a = vec![pred(vec![0.0, 1.0, 0.0]), pred(vec![0.0, 0.0, 1.0]), pred(vec![0.0, 0.0, 1.0])];
        // argmax sequences (2,3,3) vs (2,1,3): differ on one of three
        let b = vec![pred(vec![0.0, 1.0, 0.0]), pred(vec![1.0, 0.0, 0.0]), pred(vec![0.0, 0.0, 1.0])];
        assert_close(disagreement(&[a, b]), 1.0 / 3.0, 1e-12);
    }

    #[test]
    fn disagreement_always_differing_is_one() {
        let a = vec![pred(vec![1.0, 0.0]); 5];
        let b = vec![pred(vec![0.0, 1.0]); 5];
        assert_eq!(disagreement(&[a, b]), 1.0);
    }

    #[test]
    fn hausdorff_identical_sets_zero() {
        let a = vec![vec![1.0, 2.0], vec![3.0, 4.0]];
        assert_eq!(hausdorff_euclidean(&a, &a, HausdorffVariant::MaxMin), 0.0);
    }

    #[test]
    fn hausdorff_three_four_five() {
        let a = vec![vec![0.0, 0.0]];
        let b = vec![vec![3.0, 4.0]];
        assert_close(hausdorff_euclidean(&a, &b, HausdorffVariant::MaxMin), 5.0, 1e-12);
    }

    #[test]
    fn hausdorff_symmetric() {
        let a = vec![vec![0.0, 0.0], vec![1.0, 1.0]];
        let b = vec![vec![2.0, 0.5], vec![-1.0, 3.0], vec![0.2, 0.2]];
        let ab = hausdorff_euclidean(&a, &b, HausdorffVariant::MaxMin);
        let ba = hausdorff_euclidean(&b, &a, HausdorffVariant::MaxMin);
        assert_eq!(ab, ba);
        let ab_avg = hausdorff_euclidean(&a, &b, HausdorffVariant::Average);
        let ba_avg = hausdorff_euclidean(&b, &a, HausdorffVariant::Average);
        assert_eq!(ab_avg, ba_avg);
    }

    #[test]
    fn weight_norm_three_four_matrix() {
        let mut ps = ParamSet::new();
        ps.add("m", Tensor::new(vec![2], vec![3.0, 4.0]));
        assert_eq!(weight_norm(&ps, |_| true), 5.0);
    }

    #[test]
    fn weight_norm_zero_params() {
        let mut ps = ParamSet::new();
        ps.add("z", Tensor::zeros(vec![4, 4]));
        assert_eq!(weight_norm(&ps, |_| true), 0.0);
    }

    #[test]
    #[should_panic(expected = "matched no parameters")]
    fn weight_norm_empty_scope_panics() {
        let mut ps = ParamSet::new();
        ps.add("a", Tensor::zeros(vec![1]));
        weight_norm(&ps, |name| name == "nope");
    }

    #[test]
    fn weight_norm_order_invariant() {
        let mut ps1 = ParamSet::new();
        ps1.add("a", Tensor::new(vec![1], vec![3.0]));
        ps1.add("b", Tensor::new(vec![1], vec![4.0]));
        let mut ps2 = ParamSet::new();
        ps2.add("b", Tensor::new(vec![1], vec![4.0]));
        ps2.add("a", Tensor::new(vec![1], vec![3.0]));
        assert_eq!(weight_norm(&ps1, |_| true), weight_norm(&ps2, |_| true));
    }

    #[test]
    fn eval_report_presentation_fields() {
        let preds = vec![pred(vec![0.8, 0.2]), pred(vec![0.6, 0.4])];
        let labels = vec![1, 2];
        let report = EvalReport::from_predictions(&preds, &labels, 15);
        assert_eq!(report.ece_x100, 100.0 * report.ece);
        assert_eq!(report.nll_x100, 100.0 * report.nll);
        assert_eq!(report.accuracy_percent, 50.0);
    }
}
