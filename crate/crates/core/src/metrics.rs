//! Binary classification metrics: confusion counts, accuracy, sensitivity,
//! specificity and the area under the ROC curve.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Score for the positive class and the true label (0 or 1).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredPrediction {
    pub score: f64,
    pub label: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

fn validate(preds: &[ScoredPrediction]) -> Result<()> {
    for (i, p) in preds.iter().enumerate() {
        if !p.score.is_finite() {
            return Err(Error::NonFinite(format!("score of sample {i} is {}", p.score)));
        }
        if p.label > 1 {
            return Err(Error::LabelOutOfRange { label: p.label, classes: 2 });
        }
    }
    Ok(())
}

/// Counts with `score >= threshold` predicted positive.
pub fn confusion(preds: &[ScoredPrediction], threshold: f64) -> Result<ConfusionCounts> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::InvalidArgument(format!("threshold must lie in [0, 1], got {threshold}")));
    }
    validate(preds)?;
    let mut c = ConfusionCounts::default();
    for p in preds {
        match (p.score >= threshold, p.label == 1) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.tp + self.tn + self.fp + self.fn_
    }

    pub fn accuracy(&self) -> Result<f64> {
        ratio("ACC", self.tp + self.tn, self.total(), "no samples")
    }

    pub fn sensitivity(&self) -> Result<f64> {
        ratio("SEN", self.tp, self.tp + self.fn_, "no positive samples (tp + fn = 0)")
    }

    pub fn specificity(&self) -> Result<f64> {
        ratio("SPE", self.tn, self.tn + self.fp, "no negative samples (tn + fp = 0)")
    }

    pub fn acc_sen_spe(&self) -> Result<(f64, f64, f64)> {
        Ok((self.accuracy()?, self.sensitivity()?, self.specificity()?))
    }
}

fn ratio(metric: &'static str, num: usize, den: usize, reason: &str) -> Result<f64> {
    if den == 0 {
        return Err(Error::UndefinedMetric {
            metric,
            reason: reason.to_string(),
        });
    }
    Ok(num as f64 / den as f64)
}

/// Trapezoidal area under the ROC curve traced by thresholding at every
/// distinct score. Tied scores move TPR and FPR together, which credits
/// a positive/negative tie with one half.
pub fn auc(preds: &[ScoredPrediction]) -> Result<f64> {
    validate(preds)?;
    let pos = preds.iter().filter(|p| p.label == 1).count();
    let neg = preds.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric {
            metric: "AUC",
            reason: format!("needs both classes, got {pos} positive and {neg} negative"),
        });
    }
    let mut sorted: Vec<&ScoredPrediction> = preds.iter().collect();
    sorted.sort_by(|a, b| b.score.total_cmp(&a.score));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut area = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let (tp0, fp0) = (tp, fp);
        let score = sorted[i].score;
        while i < sorted.len() && sorted[i].score == score {
            if sorted[i].label == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        // trapezoid between (fp0, tp0) and (fp, tp), in count units
        area += (fp - fp0) as f64 * (tp + tp0) as f64 / 2.0;
    }
    Ok(area / (pos as f64 * neg as f64))
}

/// Everything an evaluation reports. Metrics whose denominator is zero are
/// `None` and explained in `undefined`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub samples: usize,
    pub threshold: f64,
    pub counts: ConfusionCounts,
    pub acc: Option<f64>,
    pub sen: Option<f64>,
    pub spe: Option<f64>,
    pub auc: Option<f64>,
    pub undefined: Vec<String>,
}

pub fn summarize(preds: &[ScoredPrediction], threshold: f64) -> Result<MetricSummary> {
    let counts = confusion(preds, threshold)?;
    let mut undefined = Vec::new();
    let mut keep = |r: Result<f64>| match r {
        Ok(v) => Some(v),
        Err(e @ Error::UndefinedMetric { .. }) => {
            undefined.push(e.to_string());
            None
        }
        Err(_) => None,
    };
    let acc = keep(counts.accuracy());
    let sen = keep(counts.sensitivity());
    let spe = keep(counts.specificity());
    let auc = keep(auc(preds));
    Ok(MetricSummary {
        samples: preds.len(),
        threshold,
        counts,
        acc,
        sen,
        spe,
        auc,
        undefined,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn preds(scores: &[f64], labels: &[usize]) -> Vec<ScoredPrediction> {
        scores
            .iter()
            .zip(labels)
            .map(|(&score, &label)| ScoredPrediction { score, label })
            .collect()
    }

    #[test]
    fn perfect_scores_confusion() {
        let c = confusion(&preds(&[1.0, 0.0], &[1, 0]), 0.5).unwrap();
        assert_eq!(c, ConfusionCounts { tp: 1, tn: 1, fp: 0, fn_: 0 });
        assert_eq!(c.acc_sen_spe().unwrap(), (1.0, 1.0, 1.0));
    }

    #[test]
    fn zero_threshold_predicts_all_positive() {
        let c = confusion(&preds(&[0.0, 0.3, 0.9], &[0, 1, 0]), 0.0).unwrap();
        assert_eq!((c.fn_, c.tn), (0, 0));
    }

    #[test]
    fn undefined_sensitivity_is_an_error() {
        let c = ConfusionCounts { tp: 0, tn: 3, fp: 1, fn_: 0 };
        assert!(matches!(c.sensitivity(), Err(Error::UndefinedMetric { metric: "SEN", .. })));
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&preds(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1])).unwrap(), 0.75);
        assert_eq!(auc(&preds(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1])).unwrap(), 1.0);
        assert_eq!(auc(&preds(&[0.1, 0.2, 0.8, 0.9], &[1, 1, 0, 0])).unwrap(), 0.0);
        assert_eq!(auc(&preds(&[0.5, 0.5], &[0, 1])).unwrap(), 0.5);
        assert!(auc(&preds(&[0.5, 0.6], &[1, 1])).is_err());
    }
}
