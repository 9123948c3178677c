use crate::detector::Prediction;
use crate::{Error, Result};

/// Fraction of predictions whose 0.5-threshold label equals the 0/1 label.
pub fn accuracy(predictions: &[Prediction], labels: &[f64]) -> Result<f64> {
    check_lengths(predictions.len(), labels.len())?;
    let correct = predictions
        .iter()
        .zip(labels)
        .filter(|(p, &y)| f64::from(p.label) == y)
        .count();
    Ok(correct as f64 / labels.len() as f64)
}

/// Mean of precision@k over the ranks `k` of the positives, ranking by score
/// descending. Equal scores keep their input order.
pub fn average_precision(scores: &[f64], labels: &[f64]) -> Result<f64> {
    check_lengths(scores.len(), labels.len())?;
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("score passed to average precision".into()));
    }
    let positives = labels.iter().filter(|&&y| y > 0.5).count();
    if positives == 0 {
        return Err(Error::NoPositives);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    // Stable sort keeps input order among ties.
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] > 0.5 {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / positives as f64)
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a == 0 {
        return Err(Error::Empty("metric input".into()));
    }
    if a != b {
        return Err(Error::InvalidArgument(format!("{a} scores for {b} labels")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn preds(p: &[f64]) -> Vec<Prediction> {
        p.iter()
            .map(|&probability| Prediction {
                logit: 0.0,
                probability,
                label: u8::from(probability >= 0.5),
            })
            .collect()
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&preds(&[0.9, 0.1]), &[1.0, 0.0]).unwrap(), 1.0);
        let a = accuracy(&preds(&[0.6, 0.4, 0.9]), &[1.0, 1.0, 0.0]).unwrap();
        assert!((a - 1.0 / 3.0).abs() < 1e-15);
        assert!(accuracy(&[], &[]).is_err());
        assert!(accuracy(&preds(&[0.5]), &[1.0, 0.0]).is_err());
    }

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&[0.9, 0.8, 0.1], &[1.0, 1.0, 0.0]).unwrap(), 1.0);
        let ap = average_precision(&[0.9, 0.8, 0.3], &[1.0, 0.0, 1.0]).unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
        assert!((ap - 0.833333).abs() < 1e-6);
        assert_eq!(average_precision(&[0.5, 0.5], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(average_precision(&[0.5, 0.5], &[0.0, 1.0]).unwrap(), 0.5);
        assert!(matches!(average_precision(&[0.2], &[0.0]), Err(Error::NoPositives)));
    }

    /// Sweeps every distinct threshold; at each, the new positives are
    /// counted in input order, matching the stable tie-break.
    fn threshold_oracle(scores: &[f64], labels: &[f64]) -> f64 {
        let mut thresholds: Vec<f64> = scores.to_vec();
        thresholds.sort_by(|a, b| b.total_cmp(a));
        thresholds.dedup();
        let positives = labels.iter().filter(|&&y| y == 1.0).count() as f64;
        let (mut seen, mut hits, mut total) = (0.0, 0.0, 0.0);
        for th in thresholds {
            for (s, y) in scores.iter().zip(labels) {
                if *s == th {
                    seen += 1.0;
                    if *y == 1.0 {
                        hits += 1.0;
                        total += hits / seen;
                    }
                }
            }
        }
        total / positives
    }

    proptest! {
        #[test]
        fn ap_matches_threshold_oracle(
            items in prop::collection::vec((0u8..6, prop::bool::ANY), 1..64)
        ) {
            let scores: Vec<f64> = items.iter().map(|(s, _)| f64::from(*s) / 5.0).collect();
            let labels: Vec<f64> = items.iter().map(|(_, y)| f64::from(u8::from(*y))).collect();
            prop_assume!(labels.contains(&1.0));
            let ap = average_precision(&scores, &labels).unwrap();
            prop_assert!((0.0..=1.0).contains(&ap));
            prop_assert!((ap - threshold_oracle(&scores, &labels)).abs() < 1e-10);
        }

        #[test]
        fn accuracy_matches_loop_count(p in prop::collection::vec(0.0f64..1.0, 50), y in prop::collection::vec(prop::bool::ANY, 50)) {
            let labels: Vec<f64> = y.iter().map(|b| f64::from(u8::from(*b))).collect();
            let mut correct = 0;
            for i in 0..50 {
                if (p[i] >= 0.5) == y[i] {
                    correct += 1;
                }
            }
            prop_assert_eq!(accuracy(&preds(&p), &labels).unwrap(), correct as f64 / 50.0);
        }
    }
}
