use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// A named, trainable leaf tensor.
#[derive(Debug, Clone)]
pub struct Parameter<T: Scalar = f32> {
    name: String,
    value: Tensor<T>,
}

impl<T: Scalar> Parameter<T> {
    pub fn new(name: impl Into<String>, shape: &[usize], data: Vec<T>) -> Result<Self> {
        Ok(Parameter {
            name: name.into(),
            value: Tensor::leaf(shape, data)?,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.value.grad()
    }

    /// Replaces the values; the gradient slot starts empty again.
    pub fn set_data(&mut self, data: Vec<T>) -> Result<()> {
        self.value = Tensor::leaf(self.value.shape(), data)?;
        Ok(())
    }

    pub fn zero_grad(&self) {
        self.value.zero_grad();
    }
}

#[derive(Debug, Clone)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }
}

/// One bias-corrected Adam step over `params`, which must keep the same
/// order between calls. Gradients are cleared afterwards.
pub fn adam_update<T: Scalar>(params: &mut [Parameter<T>], state: &mut AdamState) -> Result<()> {
    let grads = params
        .iter()
        .map(|p| p.grad().ok_or_else(|| Error::MissingGrad(p.name.clone())))
        .collect::<Result<Vec<_>>>()?;
    if state.first.is_empty() {
        state.first = params.iter().map(|p| vec![0.0; p.value.numel()]).collect();
        state.second = state.first.clone();
    }
    if state.first.len() != params.len()
        || state.first.iter().zip(params.iter()).any(|(m, p)| m.len() != p.value.numel())
    {
        return Err(Error::shape("adam_update", "parameter set changed between steps"));
    }

    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.first.iter_mut().zip(state.second.iter_mut()))
    {
        let mut data: Vec<f64> = p.value.data().iter().map(|x| x.as_f64()).collect();
        for i in 0..data.len() {
            let gi = g[i].as_f64();
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * gi;
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * gi * gi;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            data[i] -= state.lr * mhat / (vhat.sqrt() + state.eps);
        }
        p.set_data(data.into_iter().map(T::of).collect())?;
    }
    Ok(())
}
