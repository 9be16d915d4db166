//! Detection, grading, reconstruction and correlation metrics.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::synth::Grade;

/// Classes scored by the grading metrics; G1 predictions count as healthy.
pub const EVAL_CLASSES: [Grade; 3] = [Grade::G0, Grade::G2, Grade::G3];

/// Average ranks (1-based), ties sharing the mean of their positions.
pub fn mid_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Area under the ROC curve; ties between a positive and a negative count
/// one half.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape(scores.len(), labels.len()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::OutOfRange("NaN score".into()));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::DegenerateLabels);
    }
    let ranks = mid_ranks(scores);
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l).map(|(r, _)| r).sum();
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Rows are true classes, columns predictions, both in `classes` order.
/// Pairs whose truth or prediction lies outside `classes` are skipped.
pub fn confusion_matrix(pred: &[Grade], truth: &[Grade], classes: &[Grade]) -> Result<Vec<Vec<usize>>> {
    if pred.len() != truth.len() {
        return Err(Error::shape(truth.len(), pred.len()));
    }
    let mut m = vec![vec![0; classes.len()]; classes.len()];
    for (p, t) in pred.iter().zip(truth) {
        let (Some(pi), Some(ti)) = (
            classes.iter().position(|c| c == p),
            classes.iter().position(|c| c == t),
        ) else {
            continue;
        };
        m[ti][pi] += 1;
    }
    Ok(m)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub grade: Grade,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

pub fn per_class_stats(pred: &[Grade], truth: &[Grade], classes: &[Grade]) -> Result<Vec<ClassStats>> {
    if pred.is_empty() {
        return Err(Error::EmptyInput("no predictions to score".into()));
    }
    if pred.len() != truth.len() {
        return Err(Error::shape(truth.len(), pred.len()));
    }
    Ok(classes
        .iter()
        .map(|&c| {
            let pairs = || pred.iter().zip(truth);
            let tp = pairs().filter(|(p, t)| **p == c && **t == c).count() as f64;
            let predicted = pred.iter().filter(|&&p| p == c).count() as f64;
            let support = truth.iter().filter(|&&t| t == c).count();
            let ratio = |a: f64, b: f64| if b > 0.0 { a / b } else { 0.0 };
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, support as f64);
            ClassStats {
                grade: c,
                precision,
                recall,
                f1: ratio(2.0 * precision * recall, precision + recall),
                support,
            }
        })
        .collect())
}

/// Unweighted mean of per-class F1; a class that is never predicted
/// correctly contributes zero.
pub fn macro_f1(pred: &[Grade], truth: &[Grade], classes: &[Grade]) -> Result<f64> {
    let stats = per_class_stats(pred, truth, classes)?;
    Ok(stats.iter().map(|s| s.f1).sum::<f64>() / stats.len() as f64)
}

pub fn mse(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(Error::EmptyInput("empty image".into()));
    }
    let sum: f64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum();
    Ok(sum / a.len() as f64)
}

/// PSNR for pixels in [0, 1]; infinite when the images are identical.
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

pub fn mse_psnr(a: &[f32], b: &[f32]) -> Result<(f64, f64)> {
    let m = mse(a, b)?;
    Ok((m, psnr_from_mse(m)))
}

fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation("constant input".into()));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Spearman rank correlation with mid-ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::shape(x.len(), y.len()));
    }
    if x.len() < 3 {
        return Err(Error::UndefinedCorrelation(format!("need at least 3 pairs, got {}", x.len())));
    }
    if x.iter().chain(y).any(|v| v.is_nan()) {
        return Err(Error::UndefinedCorrelation("NaN input".into()));
    }
    pearson(&mid_ranks(x), &mid_ranks(y))
}

/// Projects rows onto their top two principal components.
///
/// Components come from power iteration on the covariance with deflation;
/// each is signed so its largest-magnitude entry is positive.
pub fn pca_2d(rows: &[Vec<f64>]) -> Result<Vec<[f64; 2]>> {
    let n = rows.len();
    if n < 2 {
        return Err(Error::EmptyInput("PCA needs at least two rows".into()));
    }
    let d = rows[0].len();
    if let Some(r) = rows.iter().find(|r| r.len() != d) {
        return Err(Error::shape(d, r.len()));
    }
    let mean: Vec<f64> = (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    let centered: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| r.iter().zip(&mean).map(|(a, m)| a - m).collect())
        .collect();
    let mut cov = vec![0.0; d * d];
    for r in &centered {
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] += r[i] * r[j];
            }
        }
    }
    cov.iter_mut().for_each(|c| *c /= (n - 1) as f64);
    let mut comps: Vec<Vec<f64>> = Vec::new();
    for k in 0..2.min(d) {
        let mut v: Vec<f64> = (0..d).map(|i| 1.0 + 0.01 * ((i * 7 + k * 13) % 17) as f64).collect();
        for _ in 0..500 {
            let mut w: Vec<f64> = (0..d).map(|i| (0..d).map(|j| cov[i * d + j] * v[j]).sum()).collect();
            for c in &comps {
                let dot: f64 = w.iter().zip(c).map(|(a, b)| a * b).sum();
                w.iter_mut().zip(c).for_each(|(a, b)| *a -= dot * b);
            }
            let norm = w.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm < 1e-300 {
                break;
            }
            w.iter_mut().for_each(|a| *a /= norm);
            let delta: f64 = w.iter().zip(&v).map(|(a, b)| (a - b).abs()).sum();
            v = w;
            if delta < 1e-12 {
                break;
            }
        }
        let big = v.iter().copied().fold(0.0f64, |m, a| if a.abs() > m.abs() { a } else { m });
        if big < 0.0 {
            v.iter_mut().for_each(|a| *a = -*a);
        }
        comps.push(v);
    }
    Ok(centered
        .iter()
        .map(|r| {
            let mut out = [0.0; 2];
            for (o, c) in out.iter_mut().zip(&comps) {
                *o = r.iter().zip(c).map(|(a, b)| a * b).sum();
            }
            out
        })
        .collect())
}

fn serialize_psnr<S: Serializer>(v: &Option<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    match v {
        Some(x) if x.is_infinite() => s.serialize_str("inf"),
        Some(x) => s.serialize_f64(*x),
        None => s.serialize_none(),
    }
}

fn deserialize_psnr<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Option<f64>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Num(f64),
        Str(String),
    }
    Ok(match Option::<Raw>::deserialize(d)? {
        None => None,
        Some(Raw::Num(x)) => Some(x),
        Some(Raw::Str(s)) if s == "inf" => Some(f64::INFINITY),
        Some(Raw::Str(s)) => return Err(serde::de::Error::custom(format!("bad PSNR {s:?}"))),
    })
}

/// Summary of a test-split evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub probe_kind: String,
    pub calibration_kind: String,
    pub detection_auc: f64,
    pub macro_f1: f64,
    pub per_class: Vec<ClassStats>,
    /// Rows true class, columns prediction, over G0, G2, G3.
    pub confusion: Vec<Vec<usize>>,
    pub recon_mse: Option<f64>,
    #[serde(serialize_with = "serialize_psnr", deserialize_with = "deserialize_psnr")]
    pub recon_psnr: Option<f64>,
    pub spearman_distance_compression: Option<f64>,
    pub n_detection: usize,
    pub n_grading: usize,
    pub n_fractured: usize,
    pub n_reconstruction: usize,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn to_text(&self) -> String {
        let opt = |v: Option<f64>, digits: usize| match v {
            Some(x) if x.is_infinite() => "inf".to_string(),
            Some(x) => format!("{x:.digits$}"),
            None => "n/a".to_string(),
        };
        let mut s = String::new();
        let _ = writeln!(s, "probe {} / calibration {}", self.probe_kind, self.calibration_kind);
        let _ = writeln!(s, "detection AUC (G0 vs G2/G3): {:.4}  (n = {})", self.detection_auc, self.n_detection);
        let _ = writeln!(s, "grading macro F1 (G0, G2, G3): {:.4}  (n = {})", self.macro_f1, self.n_grading);
        let _ = writeln!(s, "{:<6}{:>10}{:>10}{:>10}{:>9}", "class", "precision", "recall", "f1", "support");
        for c in &self.per_class {
            let _ = writeln!(
                s,
                "{:<6}{:>10.4}{:>10.4}{:>10.4}{:>9}",
                c.grade.to_string(),
                c.precision,
                c.recall,
                c.f1,
                c.support
            );
        }
        let _ = writeln!(s, "confusion (rows true, cols predicted): G0 G2 G3");
        for (g, row) in EVAL_CLASSES.iter().zip(&self.confusion) {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:>6}")).collect();
            let _ = writeln!(s, "  {g} {}", cells.join(""));
        }
        let _ = writeln!(
            s,
            "reconstruction MSE {}  PSNR {} dB  (n = {})",
            opt(self.recon_mse, 6),
            opt(self.recon_psnr, 2),
            self.n_reconstruction
        );
        let _ = writeln!(
            s,
            "spearman(distance, compression) on fractured: {}  (n = {})",
            opt(self.spearman_distance_compression, 4),
            self.n_fractured
        );
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use Grade::*;

    fn brute_auc(scores: &[f64], labels: &[bool]) -> f64 {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for (i, &si) in scores.iter().enumerate() {
            for (j, &sj) in scores.iter().enumerate() {
                if labels[i] && !labels[j] {
                    pairs += 1.0;
                    wins += if si > sj {
                        1.0
                    } else if si == sj {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        wins / pairs
    }

    #[test]
    fn auc_examples() {
        assert_eq!(roc_auc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).unwrap(), 0.75);
        assert_eq!(roc_auc(&[0.3; 6], &[true, false, true, false, false, true]).unwrap(), 0.5);
        let err = roc_auc(&[0.1, 0.2], &[true, true]).unwrap_err();
        assert_eq!(err.code(), "degenerate-labels");
    }

    #[test]
    fn auc_matches_pair_counting() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let n = rng.random_range(2..40);
            let scores: Vec<f64> = (0..n).map(|_| (rng.random_range(0..10) as f64) / 3.0).collect();
            let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
            labels[0] = true;
            labels[1] = false;
            let a = roc_auc(&scores, &labels).unwrap();
            assert!((a - brute_auc(&scores, &labels)).abs() < 1e-12);
        }
    }

    #[test]
    fn macro_f1_examples() {
        let truth = [G0, G0, G2, G3];
        assert_eq!(macro_f1(&truth, &truth, &EVAL_CLASSES).unwrap(), 1.0);
        let f = macro_f1(&[G0, G2, G2, G0], &truth, &EVAL_CLASSES).unwrap();
        assert!((f - (0.5 + 2.0 / 3.0) / 3.0).abs() < 1e-12);
        assert!((f - 0.388_888_888_9).abs() < 1e-9);
        let never = macro_f1(&[G0, G0, G2, G2], &truth, &EVAL_CLASSES).unwrap();
        assert!(never < 1.0);
        assert_eq!(macro_f1(&[], &[], &EVAL_CLASSES).unwrap_err().code(), "empty-input");
    }

    #[test]
    fn confusion_rows_sum_to_support() {
        let truth = [G0, G0, G2, G3, G3];
        let pred = [G0, G2, G2, G0, G3];
        let m = confusion_matrix(&pred, &truth, &EVAL_CLASSES).unwrap();
        assert_eq!(m, vec![vec![1, 1, 0], vec![0, 1, 0], vec![1, 0, 1]]);
        let stats = per_class_stats(&pred, &truth, &EVAL_CLASSES).unwrap();
        for (row, s) in m.iter().zip(&stats) {
            assert_eq!(row.iter().sum::<usize>(), s.support);
        }
    }

    #[test]
    fn mse_psnr_examples() {
        let a = vec![0.2f32; 16];
        assert_eq!(mse_psnr(&a, &a).unwrap(), (0.0, f64::INFINITY));
        assert_eq!(mse_psnr(&[0.0; 4], &[1.0; 4]).unwrap(), (1.0, 0.0));
        let (m, p) = mse_psnr(&[0.0; 4], &[0.5; 4]).unwrap();
        assert_eq!(m, 0.25);
        assert!((p - 6.0206).abs() < 1e-4);
        assert_eq!(mse(&[0.0; 3], &[0.0; 4]).unwrap_err().code(), "shape-mismatch");
    }

    #[test]
    fn spearman_examples() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert!((spearman(&x, &x).unwrap() - 1.0).abs() < 1e-15);
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((spearman(&x, &neg).unwrap() + 1.0).abs() < 1e-15);
        assert!((spearman(&x, &[1.0, 3.0, 2.0, 4.0]).unwrap() - 0.8).abs() < 1e-15);
        assert_eq!(spearman(&x, &[2.0; 4]).unwrap_err().code(), "undefined-correlation");
    }

    #[test]
    fn mid_ranks_average_ties() {
        assert_eq!(mid_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn pca_recovers_dominant_axis() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rows: Vec<Vec<f64>> = (0..200)
            .map(|_| {
                let a: f64 = rng.random_range(-5.0..5.0);
                let b: f64 = rng.random_range(-1.0..1.0);
                vec![a, b, 0.01 * rng.random_range(-1.0..1.0)]
            })
            .collect();
        let proj = pca_2d(&rows).unwrap();
        let corr = spearman(
            &rows.iter().map(|r| r[0]).collect::<Vec<_>>(),
            &proj.iter().map(|p| p[0]).collect::<Vec<_>>(),
        )
        .unwrap();
        assert!(corr.abs() > 0.999);
        assert_eq!(pca_2d(&rows).unwrap(), proj);
    }

    #[test]
    fn report_json_round_trip() {
        let r = EvalReport {
            probe_kind: "svm".into(),
            calibration_kind: "two_point".into(),
            detection_auc: 0.97,
            macro_f1: 0.8,
            per_class: per_class_stats(&[G0, G2], &[G0, G2], &EVAL_CLASSES).unwrap(),
            confusion: vec![vec![1, 0, 0], vec![0, 1, 0], vec![0, 0, 0]],
            recon_mse: Some(0.0),
            recon_psnr: Some(f64::INFINITY),
            spearman_distance_compression: None,
            n_detection: 2,
            n_grading: 2,
            n_fractured: 1,
            n_reconstruction: 1,
        };
        let json = r.to_json().unwrap();
        assert!(json.contains("\"inf\""));
        let back: EvalReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
        assert!(r.to_text().contains("macro F1"));
    }

    proptest! {
        #[test]
        fn auc_invariant_under_monotone_transform(
            data in proptest::collection::vec((-100.0f64..100.0, any::<bool>()), 4..60)
        ) {
            let scores: Vec<f64> = data.iter().map(|d| d.0).collect();
            let labels: Vec<bool> = data.iter().map(|d| d.1).collect();
            prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
            let a = roc_auc(&scores, &labels).unwrap();
            let warped: Vec<f64> = scores.iter().map(|s| (s / 50.0).exp() * 3.0 + 1.0).collect();
            prop_assert!((roc_auc(&warped, &labels).unwrap() - a).abs() < 1e-12);
            let mut sorted = scores.clone();
            sorted.sort_by(f64::total_cmp);
            prop_assume!(sorted.windows(2).all(|w| w[0] != w[1]));
            let flipped: Vec<f64> = scores.iter().map(|s| -s).collect();
            prop_assert!((roc_auc(&flipped, &labels).unwrap() + a - 1.0).abs() < 1e-12);
        }

        #[test]
        fn macro_f1_permutation_invariant(
            pairs in proptest::collection::vec((0usize..3, 0usize..3), 1..40),
            seed in any::<u64>()
        ) {
            let pred: Vec<Grade> = pairs.iter().map(|p| EVAL_CLASSES[p.0]).collect();
            let truth: Vec<Grade> = pairs.iter().map(|p| EVAL_CLASSES[p.1]).collect();
            let f = macro_f1(&pred, &truth, &EVAL_CLASSES).unwrap();
            let mut idx: Vec<usize> = (0..pairs.len()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for i in (1..idx.len()).rev() {
                idx.swap(i, rng.random_range(0..=i));
            }
            let p2: Vec<Grade> = idx.iter().map(|&i| pred[i]).collect();
            let t2: Vec<Grade> = idx.iter().map(|&i| truth[i]).collect();
            prop_assert!((macro_f1(&p2, &t2, &EVAL_CLASSES).unwrap() - f).abs() < 1e-12);
        }
    }
}
