//! Poly learning-rate decay and SGD with momentum.

use crate::error::{CianError, Result};
use crate::tensor::{Real, Tensor};

/// `lr(t) = lr0 · (1 − t/T)^power`, clamped to zero past `T`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PolySchedule {
    pub lr0: f64,
    pub power: f64,
    pub total_steps: usize,
}

impl PolySchedule {
    pub fn new(lr0: f64, power: f64, total_steps: usize) -> Result<Self> {
        if !(lr0 > 0.0 && lr0.is_finite()) {
            return Err(CianError::invalid(format!(
                "lr0 must be positive, got {lr0}"
            )));
        }
        if !(power > 0.0 && power <= 1.0) {
            return Err(CianError::invalid(format!(
                "power must lie in (0, 1], got {power}"
            )));
        }
        Ok(PolySchedule {
            lr0,
            power,
            total_steps,
        })
    }

    pub fn lr(&self, step: usize) -> f64 {
        if step >= self.total_steps {
            return 0.0;
        }
        self.lr0 * (1.0 - step as f64 / self.total_steps as f64).powf(self.power)
    }
}

/// `v ← μv + g; p ← p − lr·v`, velocities starting at zero. No weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd<T> {
    momentum: T,
    velocity: Vec<Tensor<T>>,
}

impl<T: Real> Sgd<T> {
    pub fn new<'a>(momentum: f64, params: impl IntoIterator<Item = &'a Tensor<T>>) -> Self {
        Sgd {
            momentum: T::lit(momentum),
            velocity: params
                .into_iter()
                .map(|p| Tensor::zeros(p.shape()))
                .collect(),
        }
    }

    pub fn step<'a, 'b>(
        &mut self,
        params: impl IntoIterator<Item = &'a mut Tensor<T>>,
        grads: impl IntoIterator<Item = &'b Tensor<T>>,
        lr: f64,
    ) -> Result<()> {
        let lr = T::lit(lr);
        let mut n = 0;
        for ((p, g), v) in params.into_iter().zip(grads).zip(&mut self.velocity) {
            if p.shape() != g.shape() || v.shape() != g.shape() {
                return Err(CianError::shape("sgd", p.shape(), g.shape()));
            }
            for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vv = self.momentum * *vv + gv;
                *pv -= lr * *vv;
            }
            n += 1;
        }
        if n != self.velocity.len() {
            return Err(CianError::invalid(format!(
                "sgd expected {} tensors, got {n}",
                self.velocity.len()
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn poly_endpoints() {
        let s = PolySchedule::new(5e-4, 0.9, 100).unwrap();
        assert_eq!(s.lr(0), 5e-4);
        assert_eq!(s.lr(100), 0.0);
        assert!((s.lr(50) - 5e-4 * 0.5f64.powf(0.9)).abs() < 1e-15);
        assert!(PolySchedule::new(0.0, 0.9, 10).is_err());
        assert!(PolySchedule::new(1.0, 1.5, 10).is_err());
    }

    #[test]
    fn momentum_update() {
        let mut p = Tensor::new(&[2], vec![1.0f64, 2.0]).unwrap();
        let g = Tensor::new(&[2], vec![0.5, -1.0]).unwrap();
        let mut opt = Sgd::new(0.9, [&p]);
        opt.step([&mut p], [&g], 0.1).unwrap();
        assert_eq!(p.data(), &[1.0 - 0.05, 2.0 + 0.1]);
        opt.step([&mut p], [&g], 0.1).unwrap();
        // v = 0.9·g + g
        assert!((p.data()[0] - (0.95 - 0.1 * 0.95)).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn poly_is_monotone(lr0 in 1e-5f64..1.0, power in 0.05f64..=1.0, total in 1usize..500) {
            let s = PolySchedule::new(lr0, power, total).unwrap();
            for t in 0..total {
                prop_assert!(s.lr(t + 1) <= s.lr(t));
            }
        }
    }
}
