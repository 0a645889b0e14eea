use super::OptimizerKind;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const ADAMW_WEIGHT_DECAY: f64 = 0.01;

/// First-order optimizer with its own moment buffers. A fresh instance is
/// created for every adaptation run.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, dim: usize) -> Self {
        let buffers = if kind == OptimizerKind::Sgd { 0 } else { dim };
        Optimizer {
            kind,
            lr,
            m: vec![0.0; buffers],
            v: vec![0.0; buffers],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        debug_assert_eq!(params.len(), grad.len());
        self.t += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= self.lr * g;
                }
            }
            OptimizerKind::Adam | OptimizerKind::AdamW => {
                if self.kind == OptimizerKind::AdamW {
                    let decay = self.lr * ADAMW_WEIGHT_DECAY;
                    for p in params.iter_mut() {
                        *p -= decay * *p;
                    }
                }
                let c1 = 1.0 - ADAM_BETA1.powi(self.t);
                let c2 = 1.0 - ADAM_BETA2.powi(self.t);
                for i in 0..params.len() {
                    let g = grad[i];
                    self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * g;
                    self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * g * g;
                    let mhat = self.m[i] / c1;
                    let vhat = self.v[i] / c2;
                    params[i] -= self.lr * mhat / (vhat.sqrt() + ADAM_EPS);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_adam_step_moves_by_lr_times_sign() {
        let mut o = Optimizer::new(OptimizerKind::Adam, 0.1, 2);
        let mut p = vec![1.0, 1.0];
        o.step(&mut p, &[3.0, -0.5]);
        assert!((p[0] - 0.9).abs() < 1e-8);
        assert!((p[1] - 1.1).abs() < 1e-8);
    }

    #[test]
    fn adamw_decays_with_zero_gradient() {
        let mut o = Optimizer::new(OptimizerKind::AdamW, 0.1, 1);
        let mut p = vec![2.0];
        o.step(&mut p, &[0.0]);
        assert!((p[0] - 2.0 * (1.0 - 0.1 * ADAMW_WEIGHT_DECAY)).abs() < 1e-15);
    }
}
