use crate::error::{Error, Result};

/// Unweighted mean of per-class recall over the classes present in
/// `labels`.
pub fn balanced_accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::invalid("balanced accuracy of an empty label set"));
    }
    if predictions.len() != labels.len() {
        return Err(Error::invalid(format!("{} predictions for {} labels", predictions.len(), labels.len())));
    }
    let classes = labels.iter().chain(predictions).max().map_or(0, |m| m + 1);
    let cm = confusion_matrix(predictions, labels, classes);
    let recalls: Vec<f64> = cm
        .iter()
        .enumerate()
        .filter_map(|(c, row)| {
            let n: usize = row.iter().sum();
            (n > 0).then(|| row[c] as f64 / n as f64)
        })
        .collect();
    Ok(recalls.iter().sum::<f64>() / recalls.len() as f64)
}

/// `cm[true][predicted]` counts.
pub fn confusion_matrix(predictions: &[usize], labels: &[usize], classes: usize) -> Vec<Vec<usize>> {
    let mut cm = vec![vec![0; classes]; classes];
    for (&p, &y) in predictions.iter().zip(labels) {
        if p < classes && y < classes {
            cm[y][p] += 1;
        }
    }
    cm
}

/// Number of distinct classes among `labels`.
pub fn present_classes(labels: &[usize]) -> usize {
    let mut seen: Vec<usize> = labels.to_vec();
    seen.sort_unstable();
    seen.dedup();
    seen.len()
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 { xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn examples() {
        assert_eq!(balanced_accuracy(&[0, 1, 1], &[0, 1, 1]).unwrap(), 1.0);
        assert_eq!(balanced_accuracy(&[1, 1, 1, 1], &[0, 0, 1, 1]).unwrap(), 0.5);
        let b = balanced_accuracy(&[0, 1, 1, 1, 0], &[0, 0, 1, 1, 1]).unwrap();
        assert!((b - 7.0 / 12.0).abs() < 1e-15);
        assert!(balanced_accuracy(&[], &[]).is_err());
        assert!(balanced_accuracy(&[0], &[0, 1]).is_err());
    }

    #[test]
    fn single_class_labels_use_present_classes() {
        assert_eq!(balanced_accuracy(&[1, 1, 0], &[1, 1, 1]).unwrap(), 2.0 / 3.0);
        assert_eq!(present_classes(&[1, 1, 1]), 1);
    }

    proptest! {
        #[test]
        fn invariant_to_consistent_relabeling(
            pairs in prop::collection::vec((0usize..3, 0usize..3), 1..60),
            perm in Just([0usize, 1, 2]).prop_shuffle(),
        ) {
            let (p, y): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
            let b = balanced_accuracy(&p, &y).unwrap();
            prop_assert!((0.0..=1.0).contains(&b));
            let pp: Vec<_> = p.iter().map(|&c| perm[c]).collect();
            let yy: Vec<_> = y.iter().map(|&c| perm[c]).collect();
            prop_assert!((balanced_accuracy(&pp, &yy).unwrap() - b).abs() < 1e-12);
        }
    }
}
