//! Patch discriminator: a stack of 4×4 convolutions whose output is a map of
//! per-patch realness scores (no terminal sigmoid).

use crate::error::{Error, Result};
use crate::nn::{Binding, Conv, ParamStore, Pass, NORM_EPS};
use crate::tensor::{Element, Tape, Var};
use rand::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PatchNorm {
    /// Per-sample, per-channel normalization without affine terms.
    Instance,
    None,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorConfig {
    pub input_channels: usize,
    pub base_width: usize,
    /// Stride-2 layers; 3 gives the 70×70 receptive field.
    pub n_layers: usize,
    pub slope: f64,
    pub norm: PatchNorm,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self { input_channels: 1, base_width: 64, n_layers: 3, slope: 0.2, norm: PatchNorm::Instance }
    }
}

const KERNEL: usize = 4;
const MAX_MULT: usize = 8;

impl DiscriminatorConfig {
    /// Widths divided by eight with a single stride-2 layer so that a 16×16
    /// input covers the receptive field.
    pub fn miniature() -> Self {
        Self { base_width: 8, n_layers: 1, ..Self::default() }
    }

    /// `(cin, cout, stride, normalized)` per conv, input to output.
    fn layers(&self) -> Vec<(usize, usize, usize, bool)> {
        let w = self.base_width;
        let mut layers = vec![(self.input_channels, w, 2, false)];
        let mut mult = 1;
        for i in 1..self.n_layers {
            let next = (1 << i).min(MAX_MULT);
            layers.push((w * mult, w * next, 2, true));
            mult = next;
        }
        let next = (1 << self.n_layers).min(MAX_MULT);
        layers.push((w * mult, w * next, 1, true));
        layers.push((w * next, 1, 1, false));
        layers
    }

    pub fn receptive_field(&self) -> usize {
        self.layers().iter().rev().fold(1, |rf, &(_, _, stride, _)| (rf - 1) * stride + KERNEL)
    }

    /// Side of the score map for a square input of side `size`.
    pub fn output_extent(&self, size: usize) -> Result<usize> {
        if size < self.receptive_field() {
            return Err(Error::shape(
                "discriminate",
                format!("input side {size} is smaller than the {}-pixel receptive field", self.receptive_field()),
            ));
        }
        Ok(self.layers().iter().fold(size, |s, &(_, _, stride, _)| (s + 2 - KERNEL) / stride + 1))
    }
}

#[derive(Clone, Debug)]
pub struct Discriminator<T> {
    config: DiscriminatorConfig,
    store: ParamStore<T>,
    convs: Vec<(Conv, bool)>,
}

impl<T: Element> Discriminator<T> {
    pub fn new<R: Rng + ?Sized>(config: DiscriminatorConfig, rng: &mut R) -> Result<Self> {
        if config.base_width == 0 || config.input_channels == 0 || config.n_layers == 0 {
            return Err(Error::InvalidArgument("discriminator widths and depth must be positive".into()));
        }
        let mut store = ParamStore::new();
        let convs = config
            .layers()
            .into_iter()
            .enumerate()
            .map(|(i, (cin, cout, stride, normed))| {
                (Conv::new2d(&mut store, &format!("conv{i}"), cin, cout, KERNEL, stride, 1, 1, rng), normed)
            })
            .collect();
        Ok(Self { config, store, convs })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn parameter_count(&self) -> usize {
        self.store.parameter_count()
    }

    pub fn bind(&self, tape: &mut Tape<T>, requires_grad: bool) -> Result<Binding> {
        self.store.bind(tape, requires_grad)
    }

    /// `[N, C, S, S]` → score map `[N, 1, s, s]`.
    pub fn discriminate(&self, pass: &mut Pass<T>, x: Var) -> Result<Var> {
        let shape = pass.tape.shape(x).to_vec();
        match shape[..] {
            [_, c, h, w] if c == self.config.input_channels && h == w => {
                self.config.output_extent(h)?;
            }
            _ => {
                return Err(Error::shape(
                    "discriminate",
                    format!("expected [N, {}, S, S], got {shape:?}", self.config.input_channels),
                ))
            }
        }
        let slope = T::from_f64(self.config.slope).unwrap();
        let last = self.convs.len() - 1;
        let mut h = x;
        for (i, (conv, normed)) in self.convs.iter().enumerate() {
            h = conv.forward(pass, h)?;
            if i == last {
                break;
            }
            if *normed && self.config.norm == PatchNorm::Instance {
                h = pass.tape.instance_norm(h, NORM_EPS)?;
            }
            h = pass.tape.leaky_relu(h, slope)?;
        }
        Ok(h)
    }
}
