use serde::{Deserialize, Serialize};

use super::checkpoint::{put_f64s, Reader};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    SgdMomentum,
    Adam,
}

const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Plain SGD, heavy-ball SGD (`v = mu * v + g; p -= lr * v`) or Adam with
/// `momentum` as its first-moment decay.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    updates: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f64, momentum: f64, sizes: &[usize]) -> Result<Self> {
        if !(learning_rate >= 0.0 && learning_rate.is_finite()) {
            return Err(Error::invalid(format!("learning rate {learning_rate}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::invalid(format!("momentum {momentum} outside [0, 1)")));
        }
        let slots = || sizes.iter().map(|n| vec![0.0; *n]).collect::<Vec<_>>();
        let (velocity, second) = match kind {
            OptimizerKind::Sgd => (Vec::new(), Vec::new()),
            OptimizerKind::SgdMomentum => (slots(), Vec::new()),
            OptimizerKind::Adam => (slots(), slots()),
        };
        Ok(Self {
            kind,
            learning_rate,
            momentum,
            velocity,
            second,
            updates: 0,
        })
    }

    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Vec<f64>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::invalid(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        let lr = self.learning_rate;
        self.updates += 1;
        let t = self.updates as f64;
        let bias1 = 1.0 - self.momentum.powf(t);
        let bias2 = 1.0 - ADAM_BETA2.powf(t);
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            if p.numel() != g.len() {
                return Err(Error::ShapeMismatch {
                    op: "optimizer_step",
                    left: p.shape().to_vec(),
                    right: vec![g.len()],
                });
            }
            match self.kind {
                OptimizerKind::Sgd => {
                    for (w, d) in p.data_mut().iter_mut().zip(g) {
                        *w -= lr * d;
                    }
                }
                OptimizerKind::SgdMomentum => {
                    let v = &mut self.velocity[i];
                    for ((w, vel), d) in p.data_mut().iter_mut().zip(v.iter_mut()).zip(g) {
                        *vel = self.momentum * *vel + d;
                        *w -= lr * *vel;
                    }
                }
                OptimizerKind::Adam => {
                    let (m, v) = (&mut self.velocity[i], &mut self.second[i]);
                    for (((w, m), v), d) in p.data_mut().iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g) {
                        *m = self.momentum * *m + (1.0 - self.momentum) * d;
                        *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * d * d;
                        *w -= lr * (*m / bias1) / ((*v / bias2).sqrt() + ADAM_EPS);
                    }
                }
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = vec![match self.kind {
            OptimizerKind::Sgd => 0u8,
            OptimizerKind::SgdMomentum => 1,
            OptimizerKind::Adam => 2,
        }];
        out.extend_from_slice(&self.learning_rate.to_le_bytes());
        out.extend_from_slice(&self.momentum.to_le_bytes());
        out.extend_from_slice(&self.updates.to_le_bytes());
        for slots in [&self.velocity, &self.second] {
            out.extend_from_slice(&(slots.len() as u32).to_le_bytes());
            for v in slots {
                put_f64s(&mut out, v);
            }
        }
        out
    }

    /// Restores state saved by [`Optimizer::to_bytes`] into an optimizer
    /// built for the same parameter layout.
    pub fn restore(&mut self, bytes: &[u8]) -> Result<()> {
        let mut r = Reader::new(bytes);
        let kind = match r.u8()? {
            0 => OptimizerKind::Sgd,
            1 => OptimizerKind::SgdMomentum,
            2 => OptimizerKind::Adam,
            k => return Err(Error::Checkpoint(format!("unknown optimizer kind {k}"))),
        };
        if kind != self.kind {
            return Err(Error::Checkpoint(format!(
                "optimizer kind {kind:?} does not match config {:?}",
                self.kind
            )));
        }
        self.learning_rate = r.f64()?;
        self.momentum = r.f64()?;
        self.updates = r.u64()?;
        for slots in [&mut self.velocity, &mut self.second] {
            let count = r.u32()? as usize;
            if count != slots.len() {
                return Err(Error::Checkpoint(format!(
                    "optimizer holds {count} slots, model needs {}",
                    slots.len()
                )));
            }
            for v in slots.iter_mut() {
                let stored = r.f64s()?;
                if stored.len() != v.len() {
                    return Err(Error::Checkpoint("optimizer slot size mismatch".into()));
                }
                *v = stored;
            }
        }
        r.finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn momentum_matches_hand_iteration() {
        let mut p = Tensor::vector(&[1.0]);
        let mut opt = Optimizer::new(OptimizerKind::SgdMomentum, 0.1, 0.5, &[1]).unwrap();
        opt.step(vec![&mut p], &[vec![1.0]]).unwrap();
        assert!((p.data()[0] - 0.9).abs() < 1e-15);
        opt.step(vec![&mut p], &[vec![1.0]]).unwrap();
        assert!((p.data()[0] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut p = Tensor::vector(&[1.0, -1.0]);
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.01, 0.9, &[2]).unwrap();
        opt.step(vec![&mut p], &[vec![3.0, -0.002]]).unwrap();
        assert!((p.data()[0] - 0.99).abs() < 1e-9);
        assert!((p.data()[1] + 0.99).abs() < 1e-6);
        let mut q = Optimizer::new(OptimizerKind::Adam, 0.01, 0.9, &[2]).unwrap();
        q.restore(&opt.to_bytes()).unwrap();
        assert_eq!(q, opt);
    }

    #[test]
    fn zero_rate_leaves_params() {
        let mut p = Tensor::vector(&[1.0, 2.0]);
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.0, 0.0, &[2]).unwrap();
        opt.step(vec![&mut p], &[vec![5.0, -3.0]]).unwrap();
        assert_eq!(p.data(), &[1.0, 2.0]);
        assert!(opt.step(vec![&mut p], &[vec![1.0]]).is_err());
    }

    #[test]
    fn state_round_trip() {
        let mut p = Tensor::vector(&[1.0, 2.0]);
        let mut a = Optimizer::new(OptimizerKind::SgdMomentum, 0.05, 0.9, &[2]).unwrap();
        a.step(vec![&mut p], &[vec![0.3, -0.7]]).unwrap();
        let mut b = Optimizer::new(OptimizerKind::SgdMomentum, 0.05, 0.9, &[2]).unwrap();
        b.restore(&a.to_bytes()).unwrap();
        assert_eq!(a, b);
        let mut c = Optimizer::new(OptimizerKind::Sgd, 0.05, 0.9, &[2]).unwrap();
        assert!(c.restore(&a.to_bytes()).is_err());
    }
}
