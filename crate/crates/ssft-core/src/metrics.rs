//! Evaluation metrics: top-1 accuracy and macro F1.

/// Argmax with the lowest index winning ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Top-1 accuracy over `[B, K]` logits.
pub fn accuracy(logits: &[f64], k: usize, labels: &[usize]) -> f64 {
    assert_eq!(logits.len(), labels.len() * k);
    let correct = labels
        .iter()
        .enumerate()
        .filter(|(i, &l)| argmax(&logits[i * k..(i + 1) * k]) == l)
        .count();
    correct as f64 / labels.len() as f64
}

/// Macro F1 over `[B, K]` logits with threshold 0.5 on the sigmoid (i.e.
/// logit > 0), multi-hot targets. Per-class F1 with 0/0 defined as 0,
/// averaged unweighted over classes.
pub fn macro_f1(logits: &[f64], k: usize, targets: &[f64]) -> f64 {
    assert_eq!(logits.len(), targets.len());
    assert_eq!(logits.len() % k, 0);
    let b = logits.len() / k;
    let mut tp = vec![0usize; k];
    let mut fp = vec![0usize; k];
    let mut fn_ = vec![0usize; k];
    for i in 0..b {
        for j in 0..k {
            let pred = logits[i * k + j] > 0.0;
            let truth = targets[i * k + j] > 0.5;
            match (pred, truth) {
                (true, true) => tp[j] += 1,
                (true, false) => fp[j] += 1,
                (false, true) => fn_[j] += 1,
                (false, false) => {}
            }
        }
    }
    let mut sum = 0.0;
    for j in 0..k {
        let denom = 2 * tp[j] + fp[j] + fn_[j];
        sum += if denom == 0 {
            0.0
        } else {
            2.0 * tp[j] as f64 / denom as f64
        };
    }
    sum / k as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions() {
        let logits = [5.0, -1.0, -1.0, 5.0];
        assert_eq!(accuracy(&logits, 2, &[0, 1]), 1.0);
        let targets = [1.0, 0.0, 0.0, 1.0];
        assert_eq!(macro_f1(&logits, 2, &targets), 1.0);
    }

    #[test]
    fn all_class_zero_on_balanced_binary() {
        // K=2, always predict class 0, balanced labels: accuracy 0.5,
        // macro F1 = (2/3 + 0) / 2 = 1/3
        let logits = [1.0, -1.0, 1.0, -1.0];
        assert_eq!(accuracy(&logits, 2, &[0, 1]), 0.5);
        let targets = [1.0, 0.0, 0.0, 1.0];
        let f1 = macro_f1(&logits, 2, &targets);
        assert!((f1 - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn argmax_lowest_index_wins_ties() {
        assert_eq!(argmax(&[1.0, 1.0, 0.5]), 0);
        assert_eq!(argmax(&[0.2, 1.0, 1.0]), 1);
    }
}
