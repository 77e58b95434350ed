use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// AdamW with decoupled weight decay and bias-corrected moments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.first, &self.second)
    }

    /// One update of `params` in place. Moment buffers are created lazily on
    /// the first call and must keep matching shapes afterwards.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&[f64]]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Dimension(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.numel() != g.len() {
                return Err(Error::Dimension(format!(
                    "gradient {i} has {} entries for parameter of shape {:?}",
                    g.len(),
                    p.shape
                )));
            }
            if let Some(j) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite gradient in parameter {i} at element {j} (value {}); parameter norm {:.6e}",
                    g[j],
                    p.l2_norm()
                )));
            }
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.second = self.first.clone();
        } else if self.first.len() != params.len()
            || self.first.iter().zip(params.iter()).any(|(m, p)| m.len() != p.numel())
        {
            return Err(Error::Dimension("optimizer state does not match parameters".into()));
        }

        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            for k in 0..g.len() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                let x = &mut p.data[k];
                *x -= self.lr * self.weight_decay * *x;
                *x -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Step schedule: `base_lr · factor^(number of drop epochs ≤ epoch)`.
pub fn lr_schedule(epoch: usize, base_lr: f64, drop_epochs: &[usize], factor: f64) -> f64 {
    let drops = drop_epochs.iter().filter(|&&d| d <= epoch).count();
    base_lr * factor.powi(drops as i32)
}

/// Rescales drop epochs given for `reference_epochs` to a run of `epochs`,
/// rounding down.
pub fn scaled_drop_epochs(drops: &[usize], reference_epochs: usize, epochs: usize) -> Vec<usize> {
    drops.iter().map(|d| d * epochs / reference_epochs).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Tensor {
        Tensor::new(vec![1], vec![v]).unwrap()
    }

    #[test]
    fn zero_gradient_without_decay_is_noop() {
        let mut opt = AdamW::new(0.1, 0.0);
        let mut p = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let before = p.clone();
        for _ in 0..3 {
            opt.step(&mut [&mut p], &[&[0.0, 0.0, 0.0]]).unwrap();
        }
        assert_eq!(p.data, before.data);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m̂ = g, v̂ = g², so the update is lr·g/(|g|+eps)
        let mut opt = AdamW::new(0.1, 0.0);
        let mut p = scalar(1.0);
        opt.step(&mut [&mut p], &[&[1.0]]).unwrap();
        let expected = 1.0 - 0.1 * 1.0 / (1.0 + 1e-8);
        assert!((p.data[0] - expected).abs() < 1e-15);
        assert!((p.data[0] - 0.9).abs() < 1e-8);
    }

    #[test]
    fn decay_only_shrinks_geometrically() {
        let (lr, wd) = (0.01, 1e-5);
        let mut opt = AdamW::new(lr, wd);
        let mut p = scalar(2.0);
        for _ in 0..5 {
            opt.step(&mut [&mut p], &[&[0.0]]).unwrap();
        }
        let expected = 2.0 * (1.0 - lr * wd).powi(5);
        assert!((p.data[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn step_counter_and_moment_shapes() {
        let mut opt = AdamW::new(1e-3, 1e-5);
        let mut a = Tensor::zeros(&[2, 3]);
        let mut b = Tensor::zeros(&[4]);
        for k in 1..=3 {
            opt.step(&mut [&mut a, &mut b], &[&[0.1; 6], &[0.2; 4]]).unwrap();
            assert_eq!(opt.step, k);
        }
        let (m, v) = opt.moments();
        assert_eq!(m[0].len(), 6);
        assert_eq!(v[1].len(), 4);
    }

    #[test]
    fn nan_gradient_aborts() {
        let mut opt = AdamW::new(1e-3, 0.0);
        let mut p = scalar(1.0);
        let err = opt.step(&mut [&mut p], &[&[f64::NAN]]).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
        assert_eq!(p.data[0], 1.0);
        assert_eq!(opt.step, 0);
    }

    #[test]
    fn schedule_drops() {
        let drops = [14, 32, 44];
        assert_eq!(lr_schedule(0, 1e-2, &drops, 0.1), 1e-2);
        assert!((lr_schedule(13, 1e-2, &drops, 0.1) - 1e-2).abs() < 1e-18);
        assert!((lr_schedule(14, 1e-2, &drops, 0.1) - 1e-3).abs() < 1e-18);
        assert!((lr_schedule(44, 1e-2, &drops, 0.1) - 1e-5).abs() < 1e-18);
        assert!((lr_schedule(59, 1e-3, &drops, 0.1) - 1e-6).abs() < 1e-18);
    }

    #[test]
    fn drop_epochs_scale_with_run_length() {
        assert_eq!(scaled_drop_epochs(&[14, 32, 44], 60, 60), vec![14, 32, 44]);
        assert_eq!(scaled_drop_epochs(&[14, 32, 44], 60, 30), vec![7, 16, 22]);
        assert_eq!(scaled_drop_epochs(&[14, 32, 44], 60, 200), vec![46, 106, 146]);
    }
}
