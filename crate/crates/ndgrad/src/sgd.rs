use crate::error::Result;
use crate::params::ParamSet;
use crate::tensor::Tensor;

/// SGD hyper-parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct SgdConfig {
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_initial: f64,
    pub lr_final: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_initial: 1e-2,
            lr_final: 1e-8,
            epochs: 30,
            batch_size: 64,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(format!("negative weight decay {}", self.weight_decay));
        }
        if !(self.lr_final >= 0.0 && self.lr_final <= self.lr_initial) {
            return Err(format!(
                "need 0 <= lr_final <= lr_initial, got {} and {}",
                self.lr_final, self.lr_initial
            ));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err("epochs and batch_size must be positive".into());
        }
        Ok(())
    }

    /// Geometric interpolation from `lr_initial` at epoch 0 to `lr_final`
    /// at the last epoch.
    pub fn lr(&self, epoch: usize) -> f64 {
        if self.epochs <= 1 || epoch == 0 || self.lr_initial == self.lr_final {
            return self.lr_initial;
        }
        if epoch >= self.epochs - 1 {
            return self.lr_final;
        }
        if self.lr_final == 0.0 {
            return 0.0;
        }
        let t = epoch as f64 / (self.epochs - 1) as f64;
        self.lr_initial * (self.lr_final / self.lr_initial).powf(t)
    }
}

/// Momentum SGD with L2 weight decay on every trainable parameter.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub config: SgdConfig,
    velocity: ParamSet,
    f32_storage: bool,
}

impl Sgd {
    pub fn new(config: SgdConfig) -> Self {
        Self {
            config,
            velocity: ParamSet::new(),
            f32_storage: false,
        }
    }

    /// Round parameters and velocities to `f32` after every step.
    pub fn with_f32_storage(mut self, on: bool) -> Self {
        self.f32_storage = on;
        self
    }

    pub fn velocity(&self) -> &ParamSet {
        &self.velocity
    }

    pub fn set_velocity(&mut self, velocity: ParamSet) {
        self.velocity = velocity;
    }

    /// Applies one update at the scheduled rate for `epoch`.
    pub fn step(&mut self, params: &mut ParamSet, epoch: usize) -> Result<()> {
        let lr = self.config.lr(epoch);
        self.step_with_lr(params, lr)
    }

    /// `v <- momentum v + grad + weight_decay p; p <- p - lr v`.
    pub fn step_with_lr(&mut self, params: &mut ParamSet, lr: f64) -> Result<()> {
        let (mu, wd) = (self.config.momentum, self.config.weight_decay);
        for (name, p) in params.iter_mut() {
            if !p.trainable {
                continue;
            }
            if !self.velocity.contains(name) {
                self.velocity
                    .insert(name, Tensor::zeros(p.value.shape()), false)?;
            }
            let v = &mut self.velocity.get_mut(name)?.value;
            let vd = v.data_mut();
            let pd = p.value.data_mut();
            for ((vi, pi), gi) in vd.iter_mut().zip(pd.iter_mut()).zip(p.grad.data()) {
                *vi = mu * *vi + gi + wd * *pi;
                if self.f32_storage {
                    *vi = *vi as f32 as f64;
                }
                *pi -= lr * *vi;
                if self.f32_storage {
                    *pi = *pi as f32 as f64;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        let cfg = SgdConfig::default();
        assert_eq!(cfg.lr(0), 1e-2);
        assert_eq!(cfg.lr(29), 1e-8);
        let mid = cfg.lr(14);
        assert!(mid < 1e-2 && mid > 1e-8);
        // log-linear: equal ratios between consecutive epochs
        let r1 = cfg.lr(1) / cfg.lr(0);
        let r2 = cfg.lr(2) / cfg.lr(1);
        assert!((r1 - r2).abs() < 1e-12);
    }

    #[test]
    fn zero_grad_no_decay_is_identity() {
        let mut params = ParamSet::new();
        params
            .insert("w", Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap(), true)
            .unwrap();
        let before = params.clone();
        let mut sgd = Sgd::new(SgdConfig {
            weight_decay: 0.0,
            ..SgdConfig::default()
        });
        for e in 0..5 {
            sgd.step(&mut params, e).unwrap();
        }
        assert_eq!(params, before);
    }

    #[test]
    fn validation() {
        assert!(SgdConfig::default().validate().is_ok());
        let bad = SgdConfig {
            momentum: 1.0,
            ..SgdConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = SgdConfig {
            lr_final: 1.0,
            ..SgdConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
