//! SGD and Adam over lists of [`Param`]s.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::fmt;
use std::str::FromStr;

/// A trainable tensor together with its most recent gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub grad: Option<Tensor>,
}

impl Param {
    pub fn new(value: Tensor) -> Self {
        Param { value, grad: None }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::Config(format!("unknown optimizer '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl OptimizerConfig {
    pub fn sgd(lr: f32) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Sgd,
            lr,
            ..Self::adam(lr)
        }
    }

    pub fn adam(lr: f32) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn new(kind: OptimizerKind, lr: f32) -> Self {
        match kind {
            OptimizerKind::Sgd => Self::sgd(lr),
            OptimizerKind::Adam => Self::adam(lr),
        }
    }
}

/// Optimizer state: configuration, step counter and (for Adam) per-parameter moments.
#[derive(Clone, Debug)]
pub struct Optimizer {
    config: OptimizerConfig,
    step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Self {
        Optimizer {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter, consuming their gradients.
    pub fn step(&mut self, params: &mut [&mut Param]) -> Result<()> {
        for (i, p) in params.iter().enumerate() {
            match &p.grad {
                None => return Err(Error::MissingGradient(i)),
                Some(g) if g.shape() != p.value.shape() => {
                    return Err(Error::shape("optimizer", p.value.shape(), g.shape()))
                }
                _ => {}
            }
        }
        if self.config.kind == OptimizerKind::Adam {
            if self.m.is_empty() {
                self.m = params.iter().map(|p| vec![0.0; p.value.len()]).collect();
                self.v = self.m.clone();
            } else if self.m.len() != params.len()
                || self.m.iter().zip(params.iter()).any(|(m, p)| m.len() != p.value.len())
            {
                return Err(Error::InvalidArgument(
                    "parameter list changed between optimizer steps".into(),
                ));
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (i, p) in params.iter_mut().enumerate() {
            let g = p.grad.take().expect("checked above");
            let values = p.value.data_mut();
            match c.kind {
                OptimizerKind::Sgd => {
                    for (w, &gv) in values.iter_mut().zip(g.data()) {
                        *w -= c.lr * gv;
                    }
                }
                OptimizerKind::Adam => {
                    let (m, v) = (&mut self.m[i], &mut self.v[i]);
                    for (((w, &gv), mv), vv) in values.iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *mv = c.beta1 * *mv + (1.0 - c.beta1) * gv;
                        *vv = c.beta2 * *vv + (1.0 - c.beta2) * gv * gv;
                        let m_hat = *mv / bc1;
                        let v_hat = *vv / bc2;
                        *w -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(v: f32, g: f32) -> Param {
        Param {
            value: Tensor::from_vec(vec![v]),
            grad: Some(Tensor::from_vec(vec![g])),
        }
    }

    #[test]
    fn sgd_step() {
        let mut p = param(1.0, 2.0);
        Optimizer::new(OptimizerConfig::sgd(0.1)).step(&mut [&mut p]).unwrap();
        assert!((p.value.item() - 0.8).abs() < 1e-7);
        assert!(p.grad.is_none());
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        // t=1: m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps)
        let mut p = param(0.5, 1.0);
        Optimizer::new(OptimizerConfig::adam(0.001)).step(&mut [&mut p]).unwrap();
        let expected = 0.5 - 0.001 * 1.0 / (1.0 + 1e-8);
        assert!((p.value.item() - expected).abs() < 1e-7);
    }

    #[test]
    fn zero_gradient() {
        let mut p = param(0.5, 0.0);
        Optimizer::new(OptimizerConfig::sgd(0.1)).step(&mut [&mut p]).unwrap();
        assert_eq!(p.value.item(), 0.5);

        // after one real step the decayed first moment still moves the weight,
        // by at most lr * |m_hat| / (sqrt(v_hat) + eps)
        let mut opt = Optimizer::new(OptimizerConfig::adam(0.001));
        let mut p = param(0.5, 1.0);
        opt.step(&mut [&mut p]).unwrap();
        let before = p.value.item();
        p.grad = Some(Tensor::from_vec(vec![0.0]));
        opt.step(&mut [&mut p]).unwrap();
        let (b1, b2) = (0.9f32, 0.999f32);
        let m_hat = b1 * (1.0 - b1) / (1.0 - b1 * b1);
        let v_hat = b2 * (1.0 - b2) / (1.0 - b2 * b2);
        let bound = 0.001 * m_hat / (v_hat.sqrt() + 1e-8);
        let moved = (before - p.value.item()).abs();
        assert!(moved > 0.0 && moved <= bound * 1.0001, "{moved} vs {bound}");
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut p = Param::new(Tensor::from_vec(vec![1.0]));
        let mut opt = Optimizer::new(OptimizerConfig::adam(0.1));
        assert!(matches!(opt.step(&mut [&mut p]), Err(Error::MissingGradient(0))));
        assert_eq!(opt.steps(), 0);
    }
}
