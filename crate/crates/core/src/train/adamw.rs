//! Adam with decoupled weight decay over named parameter blocks.

use crate::error::{Error, Result};

/// Parameter storage precision. Everything computes in f64; in `F32` mode
/// parameters and optimizer moments are snapped to f32-representable values
/// after every step, emulating reduced-precision training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F64,
    F32,
}

/// Optimization hyperparameters. Defaults follow the connector recipe:
/// lr 1e-4, batch 4, 3 epochs, dev cross-entropy early stopping.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Epochs without dev-loss improvement tolerated before stopping.
    pub patience: usize,
    pub seed: u64,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 4,
            max_epochs: 3,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            patience: 1,
            seed: 0,
            precision: Precision::F64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Precondition("learning_rate must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Precondition("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Optimizer state for a fixed list of named parameter blocks.
pub struct AdamW {
    names: Vec<String>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
    config: TrainConfig,
}

impl AdamW {
    pub fn new(names: Vec<String>, sizes: &[usize], config: TrainConfig) -> Self {
        assert_eq!(names.len(), sizes.len());
        let m = sizes.iter().map(|&s| vec![0.0; s]).collect();
        let v = sizes.iter().map(|&s| vec![0.0; s]).collect();
        Self {
            names,
            m,
            v,
            t: 0,
            config,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One update: bias-corrected moment step, then decoupled decay
    /// `p <- p - lr * wd * p`. Rejects non-finite gradients, naming the
    /// offending block.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        if params.len() != self.names.len() || grads.len() != self.names.len() {
            return Err(Error::ShapeMismatch(format!(
                "optimizer holds {} blocks, got {} params / {} grads",
                self.names.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, g) in grads.iter().enumerate() {
            if g.len() != self.m[i].len() {
                return Err(Error::ShapeMismatch(format!(
                    "block '{}' size {} != registered {}",
                    self.names[i],
                    g.len(),
                    self.m[i].len()
                )));
            }
            if let Some(j) = g.iter().position(|x| !x.is_finite()) {
                return Err(Error::TrainingFailed(format!(
                    "non-finite gradient in parameter block '{}' at offset {j}",
                    self.names[i]
                )));
            }
        }
        self.t += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for i in 0..self.names.len() {
            let p = &mut *params[i];
            let g = grads[i];
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for j in 0..p.len() {
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p[j] -= c.learning_rate * m_hat / (v_hat.sqrt() + c.epsilon);
                p[j] -= c.learning_rate * c.weight_decay * p[j];
            }
            if c.precision == Precision::F32 {
                for j in 0..p.len() {
                    p[j] = p[j] as f32 as f64;
                    m[j] = m[j] as f32 as f64;
                    v[j] = v[j] as f32 as f64;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_opt(config: TrainConfig) -> AdamW {
        AdamW::new(vec!["p".into()], &[1], config)
    }

    #[test]
    fn zero_gradient_zero_decay_leaves_params() {
        let mut opt = scalar_opt(TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::default()
        });
        let mut p = [0.5f64];
        opt.step(&mut [&mut p], &[&[0.0]]).unwrap();
        assert_eq!(p[0], 0.5);
    }

    #[test]
    fn first_step_closed_form() {
        // p = 0, g = 1: m_hat = v_hat = 1, so the gradient step is
        // lr / (1 + eps); decay then multiplies by (1 - lr * wd).
        let c = TrainConfig::default();
        let mut opt = scalar_opt(c.clone());
        let mut p = [0.0f64];
        opt.step(&mut [&mut p], &[&[1.0]]).unwrap();
        let expect = -(c.learning_rate / (1.0 + c.epsilon)) * (1.0 - c.learning_rate * c.weight_decay);
        assert!((p[0] - expect).abs() < 1e-18, "{} vs {expect}", p[0]);
        assert!((p[0] + 9.9999e-5).abs() < 1e-8);
    }

    #[test]
    fn decay_only_is_geometric() {
        let c = TrainConfig::default();
        let mut opt = scalar_opt(c.clone());
        let mut p = [1.0f64];
        let factor = 1.0 - c.learning_rate * c.weight_decay;
        for step in 1..=5 {
            opt.step(&mut [&mut p], &[&[0.0]]).unwrap();
            assert!((p[0] - factor.powi(step)).abs() < 1e-15);
        }
    }

    #[test]
    fn non_finite_gradient_names_block() {
        let mut opt = AdamW::new(vec!["w2".into()], &[2], TrainConfig::default());
        let mut p = [0.0f64, 0.0];
        let err = opt.step(&mut [&mut p], &[&[0.0, f64::NAN]]).unwrap_err();
        assert!(err.to_string().contains("w2"), "{err}");
    }

    #[test]
    fn f32_mode_snaps_parameters() {
        let mut opt = scalar_opt(TrainConfig {
            precision: Precision::F32,
            ..TrainConfig::default()
        });
        let mut p = [0.1f64];
        opt.step(&mut [&mut p], &[&[0.3]]).unwrap();
        assert_eq!(p[0], p[0] as f32 as f64);
    }
}
