//! Named parameter storage and the layer building blocks shared by the
//! generator, discriminator and registration network.

use crate::error::{Error, Result};
use crate::tensor::{BatchNormStats, ConvSpec, Element, Tape, Tensor, Var};
use rand::Rng;

/// Standard deviation of the zero-mean Gaussian used for conv weights.
pub const INIT_STD: f64 = 0.02;
pub const BN_MOMENTUM: f64 = 0.1;
pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; batch-norm running statistics are updated.
    Train,
    /// Running statistics.
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BufferId(usize);

/// Learnable parameters and non-learnable buffers of one model, in
/// registration order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore<T> {
    params: Vec<(String, Tensor<T>)>,
    buffers: Vec<(String, Tensor<T>)>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new(), buffers: Vec::new() }
    }

    pub fn add_param(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.params.push((name.into(), value));
        ParamId(self.params.len() - 1)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor<T>) -> BufferId {
        self.buffers.push((name.into(), value));
        BufferId(self.buffers.len() - 1)
    }

    pub fn param(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].1
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor<T> {
        &self.buffers[id.0].1
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.buffers.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.params.iter_mut().map(|(_, t)| t)
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Total learnable scalar count.
    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn param_id(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|(n, _)| n == name).map(ParamId)
    }

    /// Replaces a parameter or buffer by name; the shape must match.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let slot = self
            .params
            .iter_mut()
            .chain(self.buffers.iter_mut())
            .find(|(n, _)| n == name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))?;
        if slot.1.shape() != value.shape() {
            return Err(Error::shape(
                "set_param",
                format!("{name}: expected {:?}, got {:?}", slot.1.shape(), value.shape()),
            ));
        }
        slot.1 = value;
        Ok(())
    }

    /// Places every parameter on the tape as a leaf.
    pub fn bind(&self, tape: &mut Tape<T>, requires_grad: bool) -> Result<Binding> {
        let vars = self
            .params
            .iter()
            .map(|(_, t)| tape.leaf(t.clone(), requires_grad))
            .collect::<Result<_>>()?;
        Ok(Binding { vars })
    }

    /// Gradients of every parameter from a bound tape; unreached ones are zero.
    pub fn grads(&self, tape: &Tape<T>, binding: &Binding) -> Vec<Tensor<T>> {
        self.params
            .iter()
            .zip(&binding.vars)
            .map(|((_, t), v)| tape.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    }

    pub fn apply(&mut self, updates: &[NormUpdate<T>]) {
        for u in updates {
            let momentum = T::from_f64(u.momentum).unwrap();
            let keep = T::one() - momentum;
            for (id, fresh) in [(u.mean, &u.stats.mean), (u.var, &u.stats.var)] {
                let buf = &mut self.buffers[id.0].1;
                for (r, &s) in buf.data_mut().iter_mut().zip(fresh) {
                    *r = keep * *r + momentum * s;
                }
            }
        }
    }
}

/// Tape variables for each parameter of a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    /// Binding over explicit tape variables, in parameter registration order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Routes a parameter through a different tape variable (used by
    /// gradient checks that perturb one parameter).
    pub fn substitute(&mut self, id: ParamId, var: Var) {
        self.vars[id.0] = var;
    }
}

/// Running-statistic update produced by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct NormUpdate<T> {
    pub mean: BufferId,
    pub var: BufferId,
    pub momentum: f64,
    pub stats: BatchNormStats<T>,
}

/// One forward pass: the tape, the parameter binding, the mode, and the
/// batch-norm updates to apply once the pass is accepted.
pub struct Pass<'a, T> {
    pub tape: &'a mut Tape<T>,
    pub binding: &'a Binding,
    pub mode: Mode,
    pub updates: Vec<NormUpdate<T>>,
}

impl<'a, T: Element> Pass<'a, T> {
    pub fn new(tape: &'a mut Tape<T>, binding: &'a Binding, mode: Mode) -> Self {
        Self { tape, binding, mode, updates: Vec::new() }
    }
}

fn gaussian<T: Element, R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor<T> {
    Tensor::randn(shape, INIT_STD, rng)
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub spec: ConvSpec,
}

impl Conv {
    /// Two-dimensional conv with a square `kernel`.
    #[allow(clippy::too_many_arguments)]
    pub fn new2d<T: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        groups: usize,
        rng: &mut R,
    ) -> Self {
        let weight = store.add_param(format!("{name}.weight"), gaussian(&[cout, cin / groups, kernel, kernel], rng));
        let bias = Some(store.add_param(format!("{name}.bias"), Tensor::zeros(&[cout])));
        Self { weight, bias, spec: ConvSpec::d2(stride, padding, groups) }
    }

    /// 1×1 conv, stride 1, no padding.
    pub fn pointwise<T: Element, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, rng: &mut R) -> Self {
        Self::new2d(store, name, cin, cout, 1, 1, 0, 1, rng)
    }

    pub fn new3d<T: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let weight = store.add_param(format!("{name}.weight"), gaussian(&[cout, cin, 3, 3, 3], rng));
        let bias = Some(store.add_param(format!("{name}.bias"), Tensor::zeros(&[cout])));
        Self { weight, bias, spec: ConvSpec::d3(stride, 1) }
    }

    pub fn forward<T: Element>(&self, pass: &mut Pass<T>, x: Var) -> Result<Var> {
        let w = pass.binding.var(self.weight);
        let b = self.bias.map(|b| pass.binding.var(b));
        pass.tape.conv(x, w, b, self.spec)
    }
}

/// 2-D transposed convolution, square kernel.
#[derive(Clone, Debug)]
pub struct ConvTranspose {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub padding: usize,
    pub output_padding: usize,
}

impl ConvTranspose {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        output_padding: usize,
        rng: &mut R,
    ) -> Self {
        let weight = store.add_param(format!("{name}.weight"), gaussian(&[cin, cout, kernel, kernel], rng));
        let bias = Some(store.add_param(format!("{name}.bias"), Tensor::zeros(&[cout])));
        Self { weight, bias, stride, padding, output_padding }
    }

    pub fn forward<T: Element>(&self, pass: &mut Pass<T>, x: Var) -> Result<Var> {
        let w = pass.binding.var(self.weight);
        let b = self.bias.map(|b| pass.binding.var(b));
        pass.tape.conv_transpose2d(x, w, b, self.stride, self.padding, self.output_padding)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
}

impl BatchNorm {
    pub fn new<T: Element>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add_param(format!("{name}.gamma"), Tensor::full(&[channels], T::one())),
            beta: store.add_param(format!("{name}.beta"), Tensor::zeros(&[channels])),
            running_mean: store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels])),
            running_var: store.add_buffer(format!("{name}.running_var"), Tensor::full(&[channels], T::one())),
        }
    }

    pub fn forward<T: Element>(&self, pass: &mut Pass<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let gamma = pass.binding.var(self.gamma);
        let beta = pass.binding.var(self.beta);
        match pass.mode {
            Mode::Train => {
                let (y, stats) = pass.tape.batch_norm_train(x, gamma, beta, NORM_EPS)?;
                pass.updates.push(NormUpdate {
                    mean: self.running_mean,
                    var: self.running_var,
                    momentum: BN_MOMENTUM,
                    stats,
                });
                Ok(y)
            }
            Mode::Eval => pass.tape.batch_norm_eval(
                x,
                gamma,
                beta,
                store.buffer(self.running_mean).data(),
                store.buffer(self.running_var).data(),
                NORM_EPS,
            ),
        }
    }
}

/// Running mean/variance pair for the free-standing [`batch_norm`].
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Element> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        Self { mean: vec![T::zero(); channels], var: vec![T::one(); channels] }
    }
}

/// Batch normalization over batch and spatial axes. Training mode uses
/// batch statistics and folds them into `running` with `momentum`
/// (`running ← (1 − momentum)·running + momentum·batch`, unbiased variance);
/// evaluation mode normalizes with `running`.
#[allow(clippy::too_many_arguments)]
pub fn batch_norm<T: Element>(
    tape: &mut Tape<T>,
    x: Var,
    gamma: Var,
    beta: Var,
    running: &mut RunningStats<T>,
    mode: Mode,
    momentum: f64,
    eps: f64,
) -> Result<Var> {
    match mode {
        Mode::Train => {
            let (y, stats) = tape.batch_norm_train(x, gamma, beta, eps)?;
            let m = T::from_f64(momentum).unwrap();
            for (r, s) in running.mean.iter_mut().zip(&stats.mean) {
                *r = (T::one() - m) * *r + m * *s;
            }
            for (r, s) in running.var.iter_mut().zip(&stats.var) {
                *r = (T::one() - m) * *r + m * *s;
            }
            Ok(y)
        }
        Mode::Eval => tape.batch_norm_eval(x, gamma, beta, &running.mean, &running.var, eps),
    }
}
