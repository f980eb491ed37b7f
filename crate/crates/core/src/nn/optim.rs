use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// Heavy-ball SGD.
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam { beta1: 0.5, beta2: 0.999 }
    }

    pub fn sgd() -> Self {
        OptimizerKind::Sgd { momentum: 0.9 }
    }
}

/// Optimizer state for one flat parameter vector.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

const ADAM_EPS: f64 = 1e-8;

impl Optimizer {
    pub fn new(kind: OptimizerKind, n: usize) -> Self {
        let v = match kind {
            OptimizerKind::Adam { .. } => vec![0.0; n],
            OptimizerKind::Sgd { .. } => Vec::new(),
        };
        Self {
            kind,
            m: vec![0.0; n],
            v,
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        assert_eq!(params.len(), grad.len());
        assert_eq!(params.len(), self.m.len());
        self.t += 1;
        match self.kind {
            OptimizerKind::Sgd { momentum } => {
                for ((p, m), g) in params.iter_mut().zip(&mut self.m).zip(grad) {
                    *m = momentum * *m + g;
                    *p -= lr * *m;
                }
            }
            OptimizerKind::Adam { beta1, beta2 } => {
                let bc1 = 1.0 - beta1.powi(self.t as i32);
                let bc2 = 1.0 - beta2.powi(self.t as i32);
                for (((p, m), v), g) in params.iter_mut().zip(&mut self.m).zip(&mut self.v).zip(grad) {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    let mh = *m / bc1;
                    let vh = *v / bc2;
                    *p -= lr * mh / (vh.sqrt() + ADAM_EPS);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn both_optimizers_descend_a_quadratic() {
        for kind in [OptimizerKind::sgd(), OptimizerKind::adam()] {
            let mut p = vec![3.0, -2.0];
            let mut opt = Optimizer::new(kind, 2);
            for _ in 0..3000 {
                let g: Vec<f64> = p.iter().map(|x| 2.0 * x).collect();
                opt.step(&mut p, &g, 0.01);
            }
            assert!(p.iter().all(|x| x.abs() < 0.1), "{kind:?} ended at {p:?}");
        }
    }

    #[test]
    fn sgd_first_step_is_plain_gradient_step() {
        let mut p = vec![1.0];
        let mut opt = Optimizer::new(OptimizerKind::sgd(), 1);
        opt.step(&mut p, &[0.5], 0.1);
        assert_eq!(p[0], 1.0 - 0.05);
    }
}
