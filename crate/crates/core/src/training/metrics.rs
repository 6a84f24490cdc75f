/// Classification quality on one dataset.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Metrics {
    pub accuracy: f64,
    /// Multi-class Matthews correlation; 0 when undefined.
    pub mcc: f64,
    /// Unweighted mean F1 over every class that occurs in gold or predictions.
    pub macro_f1: f64,
    pub n: usize,
}

/// Computes [`Metrics`] from parallel prediction and gold slices.
pub fn classification_metrics(preds: &[usize], gold: &[usize]) -> Metrics {
    assert_eq!(preds.len(), gold.len(), "prediction and gold lengths differ");
    let n = preds.len();
    if n == 0 {
        return Metrics::default();
    }
    let k = preds.iter().chain(gold).max().map_or(0, |m| m + 1);
    let mut confusion = vec![vec![0u64; k]; k];
    for (&p, &t) in preds.iter().zip(gold) {
        confusion[t][p] += 1;
    }
    let correct: u64 = (0..k).map(|c| confusion[c][c]).sum();
    let true_count: Vec<u64> = (0..k).map(|c| confusion[c].iter().sum()).collect();
    let pred_count: Vec<u64> = (0..k).map(|c| (0..k).map(|t| confusion[t][c]).sum()).collect();

    let s = n as f64;
    let c = correct as f64;
    let pt: f64 = (0..k).map(|i| pred_count[i] as f64 * true_count[i] as f64).sum();
    let pp: f64 = pred_count.iter().map(|&x| (x as f64).powi(2)).sum();
    let tt: f64 = true_count.iter().map(|&x| (x as f64).powi(2)).sum();
    let denom = ((s * s - pp) * (s * s - tt)).sqrt();
    let mcc = if denom > 0.0 { (c * s - pt) / denom } else { 0.0 };

    let mut f1_sum = 0.0;
    let mut present = 0;
    for i in 0..k {
        if true_count[i] == 0 && pred_count[i] == 0 {
            continue;
        }
        present += 1;
        let tp = confusion[i][i] as f64;
        f1_sum += 2.0 * tp / (true_count[i] as f64 + pred_count[i] as f64);
    }
    Metrics {
        accuracy: c / s,
        mcc,
        macro_f1: f1_sum / f64::from(present),
        n,
    }
}
