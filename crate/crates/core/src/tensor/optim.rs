use super::Tensor;
use crate::error::{Error, Result};

/// A named trainable tensor with its SGD momentum buffer.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    pub momentum_buffer: Vec<f64>,
}

impl Parameter {
    pub fn new(name: impl Into<String>, shape: &[usize], values: Vec<f64>) -> Result<Self> {
        let tensor = Tensor::param(shape, values)?;
        let momentum_buffer = vec![0.0; tensor.numel()];
        Ok(Parameter {
            name: name.into(),
            tensor,
            momentum_buffer,
        })
    }

    pub fn shape(&self) -> &[usize] {
        self.tensor.shape()
    }

    pub fn values(&self) -> &[f64] {
        self.tensor.data()
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.tensor.grad()
    }

    /// Replaces the values with a fresh leaf; the gradient is dropped.
    pub fn set_values(&mut self, values: Vec<f64>) -> Result<()> {
        self.tensor = Tensor::leaf(self.tensor.shape(), values, self.tensor.requires_grad())?;
        Ok(())
    }

    /// Same values as a constant (no gradient tracking).
    pub fn frozen(&self) -> Parameter {
        Parameter {
            name: self.name.clone(),
            tensor: self.tensor.detach(),
            momentum_buffer: self.momentum_buffer.clone(),
        }
    }
}

/// One SGD-with-momentum update:
/// `buf ← momentum·buf + grad; value ← value − lr·buf`, then grads cleared.
///
/// Every parameter must hold a gradient.
pub fn sgd_step<'a>(params: impl IntoIterator<Item = &'a mut Parameter>, lr: f64, momentum: f64) -> Result<()> {
    sgd_step_scaled(params, lr, momentum, 1.0)
}

/// Euclidean norm of all gradients together; missing gradients count as 0.
pub fn global_grad_norm<'a>(params: impl IntoIterator<Item = &'a Parameter>) -> f64 {
    params
        .into_iter()
        .filter_map(Parameter::grad)
        .map(|g| g.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Scale that brings a gradient of norm `norm` down to `max_norm`, or 1.
pub fn clip_scale(norm: f64, max_norm: f64) -> f64 {
    if max_norm > 0.0 && norm > max_norm {
        max_norm / norm
    } else {
        1.0
    }
}

/// [`sgd_step`] with every gradient multiplied by `grad_scale` first.
pub fn sgd_step_scaled<'a>(
    params: impl IntoIterator<Item = &'a mut Parameter>,
    lr: f64,
    momentum: f64,
    grad_scale: f64,
) -> Result<()> {
    if !(lr > 0.0) || !(0.0..1.0).contains(&momentum) {
        return Err(Error::Contract(format!(
            "sgd_step needs lr > 0 and momentum in [0,1), got lr={lr}, momentum={momentum}"
        )));
    }
    let params: Vec<&mut Parameter> = params.into_iter().collect();
    if let Some(p) = params.iter().find(|p| p.grad().is_none()) {
        return Err(Error::Contract(format!("parameter {} has no gradient", p.name)));
    }
    for p in params {
        let grad = p.grad().expect("checked above");
        let mut values = p.values().to_vec();
        for ((v, b), g) in values.iter_mut().zip(&mut p.momentum_buffer).zip(&grad) {
            *b = momentum * *b + grad_scale * g;
            *v -= lr * *b;
        }
        p.set_values(values)?;
    }
    Ok(())
}

/// Polynomial decay `base·(1 − iter/max_iter)^power`.
pub fn poly_lr(base_lr: f64, iter: usize, max_iter: usize, power: f64) -> f64 {
    debug_assert!(max_iter > 0 && iter <= max_iter);
    let frac = (iter.min(max_iter)) as f64 / max_iter as f64;
    base_lr * (1.0 - frac).powf(power)
}
