use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with bias-corrected first and second moments, one moment pair per
/// parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Element> Adam<T> {
    /// Zero moments shaped like `shapes`.
    pub fn new<'a>(config: AdamConfig, shapes: impl IntoIterator<Item = &'a [usize]>) -> Self {
        let m: Vec<Tensor<T>> = shapes.into_iter().map(Tensor::zeros).collect();
        Self { config, step: 0, v: m.clone(), m }
    }

    /// Applies one update in place. Arithmetic is carried out in `f64`.
    pub fn update(&mut self, params: &mut [&mut Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::InvalidArgument(format!(
                "optimizer tracks {} tensors, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(Error::shape("adam", format!("parameter {:?}, gradient {:?}", p.shape(), g.shape())));
            }
        }
        self.step += 1;
        let AdamConfig { learning_rate: lr, beta1: b1, beta2: b2, eps } = self.config;
        let c1 = 1.0 - b1.powf(self.step as f64);
        let c2 = 1.0 - b2.powf(self.step as f64);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                let g = g.to_f64().unwrap();
                let m_new = b1 * m.to_f64().unwrap() + (1.0 - b1) * g;
                let v_new = b2 * v.to_f64().unwrap() + (1.0 - b2) * g * g;
                *m = T::from_f64(m_new).unwrap();
                *v = T::from_f64(v_new).unwrap();
                let delta = lr * (m_new / c1) / ((v_new / c2).sqrt() + eps);
                *p = T::from_f64(p.to_f64().unwrap() - delta).unwrap();
            }
        }
        Ok(())
    }
}

/// One Adam update of `params` given `grads` and the moment state.
pub fn adam_step<T: Element>(params: &mut [&mut Tensor<T>], grads: &[Tensor<T>], state: &mut Adam<T>) -> Result<()> {
    state.update(params, grads)
}
