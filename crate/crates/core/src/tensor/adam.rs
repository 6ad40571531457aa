use serde::{Deserialize, Serialize};

use super::{mismatch, Real, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 2e-4, beta1: 0.5, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with bias correction. Moment tensors mirror the parameter list
/// passed to [`Adam::new`].
#[derive(Debug, Clone)]
pub struct Adam<T> {
    cfg: AdamConfig,
    step: u64,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor<T>>, cfg: AdamConfig) -> Self {
        let first: Vec<Tensor<T>> = params.into_iter().map(|p| Tensor::zeros(p.shape())).collect();
        let second = first.clone();
        Self { cfg, step: 0, first, second }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    pub fn step<'a>(
        &mut self,
        params: impl IntoIterator<Item = &'a mut Tensor<T>>,
        grads: &[&Tensor<T>],
    ) -> Result<(), TensorError> {
        let mut params: Vec<&mut Tensor<T>> = params.into_iter().collect();
        if params.len() != self.first.len() || grads.len() != self.first.len() {
            return Err(mismatch(
                "adam_step",
                format!("{} moments, {} params, {} grads", self.first.len(), params.len(), grads.len()),
            ));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.first) {
            if p.shape() != m.shape() || g.shape() != m.shape() {
                return Err(mismatch("adam_step", format!("param {:?}, grad {:?}", p.shape(), g.shape())));
            }
        }
        self.step += 1;
        let c = |v: f64| T::from_f64_lossy(v);
        let (b1, b2) = (c(self.cfg.beta1), c(self.cfg.beta2));
        let t = self.step as i32;
        let bias1 = c(1.0 - self.cfg.beta1.powi(t));
        let bias2 = c(1.0 - self.cfg.beta2.powi(t));
        let (lr, eps) = (c(self.cfg.lr), c(self.cfg.eps));
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.first).zip(&mut self.second) {
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = b1 * *mv + (T::one() - b1) * gv;
                *vv = b2 * *vv + (T::one() - b2) * gv * gv;
                let m_hat = *mv / bias1;
                let v_hat = *vv / bias2;
                *pv -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = Tensor::<f64>::new(vec![3], vec![0.1, -0.2, 0.3]).unwrap();
        let before = p.clone();
        let g = Tensor::zeros(&[3]);
        let mut adam = Adam::new([&p], AdamConfig::default());
        for _ in 0..5 {
            adam.step([&mut p], &[&g]).unwrap();
        }
        assert_eq!(p, before);
        assert_eq!(adam.steps(), 5);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let cfg = AdamConfig::default();
        let mut p = Tensor::<f64>::new(vec![3], vec![1.0, 1.0, 1.0]).unwrap();
        let g = Tensor::new(vec![3], vec![0.3, -5.0, 1e-3]).unwrap();
        let mut adam = Adam::new([&p], cfg);
        adam.step([&mut p], &[&g]).unwrap();
        // m_hat = g, v_hat = g^2 => delta = -lr g / (|g| + eps)
        for (pv, gv) in p.data().iter().zip(g.data()) {
            let expected = 1.0 - cfg.lr * gv / (gv.abs() + cfg.eps);
            assert!((pv - expected).abs() < 1e-15);
            assert!(((pv - 1.0) + cfg.lr * gv.signum()).abs() < 1e-8);
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = Tensor::<f64>::zeros(&[2]);
        let g = Tensor::zeros(&[3]);
        let mut adam = Adam::new([&p], AdamConfig::default());
        assert!(adam.step([&mut p], &[&g]).is_err());
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let run = || {
            let mut p = Tensor::<f32>::new(vec![4], vec![0.5, -0.5, 0.25, 2.0]).unwrap();
            let mut adam = Adam::new([&p], AdamConfig::default());
            for i in 0..50 {
                let g = Tensor::from_fn(&[4], |j| ((i * 4 + j) as f32 * 0.37).sin());
                adam.step([&mut p], &[&g]).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }
}
