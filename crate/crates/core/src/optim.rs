use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

impl std::str::FromStr for OptimizerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "adam" => Ok(OptimizerKind::Adam),
            "sgd" => Ok(OptimizerKind::Sgd),
            other => Err(format!("unknown optimizer {other:?} (adam, sgd)")),
        }
    }
}

/// First-order optimizer over a fixed list of flat parameter tensors.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, sizes: &[usize]) -> Self {
        let zeros = |n: &usize| vec![0.0; *n];
        let (m, v) = match kind {
            OptimizerKind::Adam => (sizes.iter().map(zeros).collect(), sizes.iter().map(zeros).collect()),
            OptimizerKind::Sgd => (Vec::new(), Vec::new()),
        };
        Self {
            kind,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m,
            v,
        }
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr
    }

    /// Applies one update. `params` and `grads` are visited in the same order
    /// as the sizes given at construction.
    pub fn step<'a>(&mut self, params: impl Iterator<Item = &'a mut [f64]>, grads: &[&[f64]]) {
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.zip(grads) {
                    for (pi, gi) in p.iter_mut().zip(g.iter()) {
                        *pi -= self.lr * gi;
                    }
                }
            }
            OptimizerKind::Adam => {
                let t = self.step as i32;
                let c1 = 1.0 - self.beta1.powi(t);
                let c2 = 1.0 - self.beta2.powi(t);
                for (idx, (p, g)) in params.zip(grads).enumerate() {
                    let (m, v) = (&mut self.m[idx], &mut self.v[idx]);
                    for k in 0..p.len() {
                        m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                        v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                        let m_hat = m[k] / c1;
                        let v_hat = v[k] / c2;
                        p[k] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
                    }
                }
            }
        }
    }
}
