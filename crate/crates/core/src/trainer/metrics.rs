use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::MetricsError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct F1Report {
    pub per_class: Vec<f64>,
    pub macro_f1: f64,
    /// Classes with neither gold nor predicted instances (scored 0).
    pub absent_classes: Vec<usize>,
}

/// Per-class F1 and their unweighted mean over `0..n_classes`.
pub fn f1_scores(
    predictions: &[usize],
    golds: &[usize],
    n_classes: usize,
) -> Result<F1Report, MetricsError> {
    if predictions.len() != golds.len() {
        return Err(MetricsError::Length(predictions.len(), golds.len()));
    }
    if n_classes == 0 {
        return Err(MetricsError::Classes(0));
    }
    let mut tp = vec![0usize; n_classes];
    let mut pred = vec![0usize; n_classes];
    let mut gold = vec![0usize; n_classes];
    for (&p, &g) in predictions.iter().zip(golds) {
        pred[p] += 1;
        gold[g] += 1;
        if p == g {
            tp[p] += 1;
        }
    }
    let mut absent_classes = Vec::new();
    let per_class: Vec<f64> = (0..n_classes)
        .map(|c| {
            if pred[c] == 0 && gold[c] == 0 {
                absent_classes.push(c);
                return 0.0;
            }
            // F1 = 2TP / (2TP + FP + FN)
            2.0 * tp[c] as f64 / (pred[c] + gold[c]) as f64
        })
        .collect();
    if !absent_classes.is_empty() {
        warn!("classes {absent_classes:?} absent from predictions and golds; F1 set to 0");
    }
    let macro_f1 = per_class.iter().sum::<f64>() / n_classes as f64;
    Ok(F1Report {
        per_class,
        macro_f1,
        absent_classes,
    })
}
