use serde::{Deserialize, Serialize};

use crate::numcore::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

/// Plain SGD or Adam over a flat list of parameter tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f64, params: &[&Tensor]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.rows(), p.cols())).collect();
        let (m, v) = match kind {
            OptimizerKind::Sgd => (Vec::new(), Vec::new()),
            OptimizerKind::Adam => (zeros(), zeros()),
        };
        Self {
            kind,
            learning_rate,
            step: 0,
            m,
            v,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) {
        assert_eq!(params.len(), grads.len(), "one gradient per parameter");
        self.step += 1;
        let lr = self.learning_rate;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    for (x, d) in p.data_mut().iter_mut().zip(g.data()) {
                        *x -= lr * d;
                    }
                }
            }
            OptimizerKind::Adam => {
                let t = self.step as i32;
                let c1 = 1.0 - BETA1.powi(t);
                let c2 = 1.0 - BETA2.powi(t);
                for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                    let m = self.m[i].data_mut();
                    let v = self.v[i].data_mut();
                    for (j, (x, &d)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                        m[j] = BETA1 * m[j] + (1.0 - BETA1) * d;
                        v[j] = BETA2 * v[j] + (1.0 - BETA2) * d * d;
                        let m_hat = m[j] / c1;
                        let v_hat = v[j] / c2;
                        *x -= lr * m_hat / (v_hat.sqrt() + EPS);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_step_is_lr_times_gradient() {
        let mut p = Tensor::from_rows(&[vec![1.0, 2.0]]);
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.5, &[&p]);
        opt.step(&mut [&mut p], &[Tensor::from_rows(&[vec![2.0, -2.0]])]);
        assert_eq!(p, Tensor::from_rows(&[vec![0.0, 3.0]]));
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        // bias correction makes the first update lr * sign(g)
        let mut p = Tensor::from_rows(&[vec![0.0, 0.0]]);
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.01, &[&p]);
        opt.step(&mut [&mut p], &[Tensor::from_rows(&[vec![3.0, -0.5]])]);
        assert!((p.get(0, 0) + 0.01).abs() < 1e-9);
        assert!((p.get(0, 1) - 0.01).abs() < 1e-9);
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut p = Tensor::from_rows(&[vec![3.0, -4.0]]);
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.1, &[&p]);
        for _ in 0..500 {
            let g = p.scale(2.0);
            opt.step(&mut [&mut p], &[g]);
        }
        assert!(p.frobenius() < 1e-2);
    }
}
