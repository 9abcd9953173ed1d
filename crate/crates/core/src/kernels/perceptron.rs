use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::KernelError;
use crate::treebank::ConstituencyTree;

use super::{gram, kernel, KernelConfig};

#[derive(Debug, Clone)]
pub struct LabeledTree {
    pub tree: ConstituencyTree,
    pub label: String,
}

/// Dual-form binary perceptron over a tree kernel.
///
/// The label of the first training example is the positive class; a zero
/// score is predicted as positive. Both choices flip together with the labels.
#[derive(Debug, Clone)]
pub struct KernelPerceptron {
    cfg: KernelConfig,
    support: Vec<ConstituencyTree>,
    /// Mistake counts per training example.
    alpha: Vec<f64>,
    signs: Vec<f64>,
    positive: String,
    negative: String,
    pub train_accuracy: f64,
    pub epochs_run: usize,
}

impl KernelPerceptron {
    pub fn train(
        train: &[LabeledTree],
        cfg: KernelConfig,
        epochs: usize,
        seed: u64,
    ) -> Result<Self, KernelError> {
        cfg.validate()?;
        let mut labels: Vec<String> = train.iter().map(|t| t.label.clone()).collect();
        labels.sort();
        labels.dedup();
        match labels.len() {
            0 | 1 => return Err(KernelError::SingleClass(labels)),
            2 => {}
            _ => return Err(KernelError::NotBinary(labels)),
        }
        let positive = train[0].label.clone();
        let negative = labels.into_iter().find(|l| *l != positive).unwrap();
        let signs: Vec<f64> = train
            .iter()
            .map(|t| if t.label == positive { 1.0 } else { -1.0 })
            .collect();
        let trees: Vec<ConstituencyTree> = train.iter().map(|t| t.tree.clone()).collect();
        let k = gram(&trees, &cfg);

        let n = train.len();
        let mut alpha = vec![0.0; n];
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut epochs_run = 0;
        for _ in 0..epochs {
            epochs_run += 1;
            order.shuffle(&mut rng);
            let mut mistakes = 0;
            for &i in &order {
                let score: f64 = (0..n).map(|j| alpha[j] * signs[j] * k.get(j, i)).sum();
                if signs[i] * score <= 0.0 {
                    alpha[i] += 1.0;
                    mistakes += 1;
                }
            }
            if mistakes == 0 {
                break;
            }
        }
        let correct = (0..n)
            .filter(|&i| {
                let score: f64 = (0..n).map(|j| alpha[j] * signs[j] * k.get(j, i)).sum();
                (score >= 0.0) == (signs[i] > 0.0)
            })
            .count();
        Ok(Self {
            cfg,
            support: trees,
            alpha,
            signs,
            positive,
            negative,
            train_accuracy: correct as f64 / n as f64,
            epochs_run,
        })
    }

    pub fn decision_score(&self, tree: &ConstituencyTree) -> f64 {
        self.support
            .iter()
            .zip(&self.alpha)
            .zip(&self.signs)
            .filter(|((_, a), _)| **a != 0.0)
            .map(|((s, a), y)| a * y * kernel(s, tree, &self.cfg))
            .sum()
    }

    pub fn predict(&self, trees: &[ConstituencyTree]) -> Vec<String> {
        trees
            .iter()
            .map(|t| {
                if self.decision_score(t) >= 0.0 {
                    self.positive.clone()
                } else {
                    self.negative.clone()
                }
            })
            .collect()
    }

    pub fn positive_class(&self) -> &str {
        &self.positive
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::KernelKind;

    fn lt(s: &str, label: &str) -> LabeledTree {
        LabeledTree {
            tree: ConstituencyTree::parse(s).unwrap(),
            label: label.into(),
        }
    }

    fn toy() -> Vec<LabeledTree> {
        vec![
            lt("(S (NP (PRP we)) (VP (MD should) (VB act)))", "claim"),
            lt("(S (NP (DT the) (NN data)) (VP (VBZ shows) (NP (NN growth))))", "premise"),
            lt("(S (NP (PRP they)) (VP (MD should) (VB stop)))", "claim"),
            lt("(S (NP (DT a) (NN study)) (VP (VBZ finds) (NP (NN risk))))", "premise"),
        ]
    }

    #[test]
    fn separates_toy_corpus() {
        let p = KernelPerceptron::train(&toy(), KernelConfig::new(KernelKind::Sstk), 10, 7).unwrap();
        assert_eq!(p.train_accuracy, 1.0);
        let trees: Vec<_> = toy().into_iter().map(|t| t.tree).collect();
        let labels: Vec<_> = toy().into_iter().map(|t| t.label).collect();
        assert_eq!(p.predict(&trees), labels);
    }

    #[test]
    fn empty_test_set() {
        let p = KernelPerceptron::train(&toy(), KernelConfig::new(KernelKind::Stk), 5, 1).unwrap();
        assert!(p.predict(&[]).is_empty());
    }

    #[test]
    fn single_class_refused() {
        let data = vec![lt("(S a)", "x"), lt("(S b)", "x")];
        assert!(matches!(
            KernelPerceptron::train(&data, KernelConfig::default(), 3, 0),
            Err(KernelError::SingleClass(_))
        ));
    }

    #[test]
    fn flipping_labels_flips_predictions() {
        let data = toy();
        let flipped: Vec<LabeledTree> = data
            .iter()
            .map(|t| LabeledTree {
                tree: t.tree.clone(),
                label: if t.label == "claim" { "premise" } else { "claim" }.into(),
            })
            .collect();
        let cfg = KernelConfig::new(KernelKind::Ptk);
        let a = KernelPerceptron::train(&data, cfg, 1, 3).unwrap();
        let b = KernelPerceptron::train(&flipped, cfg, 1, 3).unwrap();
        let probe: Vec<_> = [
            "(S (NP (PRP we)) (VP (VBZ shows)))",
            "(X y)",
            "(S (NP (NN risk)))",
        ]
        .iter()
        .map(|s| ConstituencyTree::parse(s).unwrap())
        .collect();
        let pa = a.predict(&probe);
        let pb = b.predict(&probe);
        for (x, y) in pa.iter().zip(&pb) {
            assert_ne!(x, y);
        }
    }
}
