use crate::error::{Error, Result};

/// Mean of the joint accuracies `A_t`.
pub fn avg_acc(joint: &[f64]) -> Result<f64> {
    if joint.is_empty() {
        return Err(Error::Usage("no accuracies recorded".into()));
    }
    Ok(joint.iter().sum::<f64>() / joint.len() as f64)
}

/// `A_T`, the joint accuracy after the final task.
pub fn last_acc(joint: &[f64]) -> Result<f64> {
    joint
        .last()
        .copied()
        .ok_or_else(|| Error::Usage("no accuracies recorded".into()))
}

/// Trapezoidal area under `(samples_seen, accuracy)` divided by the sample
/// span it covers, so a flat curve at `c` gives exactly `c`. A single point
/// returns its accuracy.
pub fn auc_acc(curve: &[(usize, f64)]) -> Result<f64> {
    match curve {
        [] => Err(Error::Usage("empty accuracy curve".into())),
        [(_, a)] => Ok(*a),
        _ => {
            if curve.windows(2).any(|w| w[1].0 <= w[0].0) {
                return Err(Error::Usage("curve sample counts must increase".into()));
            }
            let mut area = 0.0;
            for w in curve.windows(2) {
                let dx = (w[1].0 - w[0].0) as f64;
                area += dx * (w[0].1 + w[1].1) / 2.0;
            }
            let span = (curve[curve.len() - 1].0 - curve[0].0) as f64;
            Ok(area / span)
        }
    }
}

/// Fraction of `predicted` equal to `labels`.
pub fn accuracy(predicted: &[usize], labels: &[usize]) -> Result<f64> {
    if labels.is_empty() || predicted.len() != labels.len() {
        return Err(Error::Usage(format!(
            "{} predictions for {} labels",
            predicted.len(),
            labels.len()
        )));
    }
    let hits = predicted.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn avg_and_last() {
        assert_eq!(avg_acc(&[80.0, 70.0]).unwrap(), 75.0);
        assert_eq!(last_acc(&[80.0, 70.0]).unwrap(), 70.0);
        assert_eq!(avg_acc(&[90.0, 80.0, 70.0]).unwrap(), 80.0);
        assert!(avg_acc(&[]).is_err());
        assert!(last_acc(&[]).is_err());
    }

    #[test]
    fn flat_curve_auc_is_the_constant() {
        let c = 0.6180339887;
        let curve: Vec<(usize, f64)> = [13, 26, 40, 53, 66, 80, 93, 106, 120, 133]
            .iter()
            .map(|&s| (s, c))
            .collect();
        assert!((auc_acc(&curve).unwrap() - c).abs() < 1e-12);
        assert_eq!(auc_acc(&[(5, 0.25)]).unwrap(), 0.25);
        assert!(auc_acc(&[(5, 0.2), (5, 0.3)]).is_err());
    }

    #[test]
    fn linear_curve_auc_is_midpoint() {
        let curve = [(0, 0.0), (10, 0.5), (20, 1.0)];
        assert!((auc_acc(&curve).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn accuracy_counts_hits() {
        assert_eq!(accuracy(&[1, 2, 3, 4], &[1, 2, 0, 4]).unwrap(), 0.75);
        assert!(accuracy(&[], &[]).is_err());
    }
}
