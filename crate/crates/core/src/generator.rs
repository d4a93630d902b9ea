//! Generative convolutional transformer: a convolutional downsampling block,
//! convolutional transformer block(s) with per-head depthwise-separable
//! projections and scaled dot-product attention, and a transposed-conv
//! upsampling block.

use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Binding, Conv, ConvTranspose, Mode, NormUpdate, ParamStore, Pass};
use crate::tensor::{Element, Tape, Tensor, Var};
use rand::Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorConfig {
    pub input_channels: usize,
    /// Filters in the stem and first stride-2 conv; the second has twice as many.
    pub base_width: usize,
    /// Channels `c` of the transformer grid.
    pub transformer_channels: usize,
    pub heads: usize,
    /// `d_q = d_k = d_v`.
    pub head_dim: usize,
    /// Filters of the first pointwise conv of the pointwise block.
    pub mlp_width: usize,
    pub blocks: usize,
    pub image_size: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            input_channels: 1,
            base_width: 32,
            transformer_channels: 128,
            heads: 6,
            head_dim: 64,
            mlp_width: 512,
            blocks: 1,
            image_size: 512,
        }
    }
}

impl GeneratorConfig {
    /// Channel widths divided by eight on 16×16 inputs, for gradient checks.
    pub fn miniature() -> Self {
        Self {
            base_width: 4,
            transformer_channels: 16,
            head_dim: 8,
            mlp_width: 64,
            image_size: 16,
            ..Self::default()
        }
    }

    pub fn with_image_size(mut self, image_size: usize) -> Self {
        self.image_size = image_size;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || !self.image_size.is_multiple_of(8) {
            return Err(Error::InvalidArgument(format!(
                "image size {} must be a positive multiple of 8",
                self.image_size
            )));
        }
        let widths = [self.input_channels, self.base_width, self.transformer_channels, self.heads, self.head_dim, self.mlp_width, self.blocks];
        if widths.contains(&0) {
            return Err(Error::InvalidArgument("generator widths, heads and blocks must be positive".into()));
        }
        Ok(())
    }

    /// Side of the transformer grid, `h = w = image_size / 8`.
    pub fn grid(&self) -> usize {
        self.image_size / 8
    }

    /// Query tokens `n_q = h·w`.
    pub fn query_tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Key/value tokens `n_k = n_v = ⌈h/2⌉·⌈w/2⌉` from the stride-2 projections.
    pub fn key_tokens(&self) -> usize {
        let g = self.grid().div_ceil(2);
        g * g
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Projection {
    Query,
    Key,
    Value,
}

/// Depthwise 3×3 conv → batch norm → pointwise conv.
#[derive(Clone, Debug)]
struct ProjectionBlock {
    depthwise: Conv,
    norm: BatchNorm,
    pointwise: Conv,
}

impl ProjectionBlock {
    fn new<T: Element, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, c: usize, d: usize, stride: usize, rng: &mut R) -> Self {
        Self {
            depthwise: Conv::new2d(store, &format!("{name}.depthwise"), c, c, 3, stride, 1, c, rng),
            norm: BatchNorm::new(store, &format!("{name}.norm"), c),
            pointwise: Conv::pointwise(store, &format!("{name}.pointwise"), c, d, rng),
        }
    }
}

#[derive(Clone, Debug)]
struct AttentionHead {
    query: ProjectionBlock,
    key: ProjectionBlock,
    value: ProjectionBlock,
}

#[derive(Clone, Debug)]
struct TransformerBlock {
    heads: Vec<AttentionHead>,
    merge: Conv,
    attn_norm: BatchNorm,
    mlp_norm: BatchNorm,
    expand: Conv,
    contract: Conv,
}

#[derive(Clone, Debug)]
struct ConvNorm {
    conv: Conv,
    norm: BatchNorm,
}

#[derive(Clone, Debug)]
struct DeconvNorm {
    deconv: ConvTranspose,
    norm: BatchNorm,
}

#[derive(Clone, Debug)]
pub struct Generator<T> {
    config: GeneratorConfig,
    store: ParamStore<T>,
    down: Vec<ConvNorm>,
    blocks: Vec<TransformerBlock>,
    up: Vec<DeconvNorm>,
    head: Conv,
}

/// Scaled dot-product attention weights `softmax(Q·Kᵀ/√d)` for batched
/// `Q[N, n_q, d]`, `K[N, n_k, d]`, normalized over the key axis.
pub fn attention_weights<T: Element>(tape: &mut Tape<T>, q: Var, k: Var) -> Result<Var> {
    let (qs, ks) = (tape.shape(q).to_vec(), tape.shape(k).to_vec());
    let d = *qs.last().ok_or_else(|| Error::shape("attention", "query must be a matrix"))?;
    if qs.len() != ks.len() || ks.last() != Some(&d) {
        return Err(Error::shape("attention", format!("query {qs:?} and key {ks:?} widths differ")));
    }
    let kt = tape.transpose(k)?;
    let logits = tape.matmul(q, kt)?;
    let scaled = tape.scale(logits, T::from_f64(1.0 / (d as f64).sqrt()).unwrap())?;
    tape.softmax(scaled)
}

/// `Z = softmax(Q·Kᵀ/√d_q)·V`.
pub fn self_attention<T: Element>(tape: &mut Tape<T>, q: Var, k: Var, v: Var) -> Result<Var> {
    let (ks, vs) = (tape.shape(k).to_vec(), tape.shape(v).to_vec());
    if ks.len() != vs.len() || ks[ks.len() - 2] != vs[vs.len() - 2] {
        return Err(Error::shape("attention", format!("key {ks:?} and value {vs:?} token counts differ")));
    }
    let weights = attention_weights(tape, q, k)?;
    tape.matmul(weights, v)
}

impl<T: Element> Generator<T> {
    pub fn new<R: Rng + ?Sized>(config: GeneratorConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let s = &mut store;
        let (b, c) = (config.base_width, config.transformer_channels);
        let down_widths = [(config.input_channels, b, 7, 1, 3), (b, b, 3, 2, 1), (b, 2 * b, 3, 2, 1), (2 * b, c, 3, 2, 1)];
        let down = down_widths
            .iter()
            .enumerate()
            .map(|(i, &(cin, cout, k, stride, pad))| ConvNorm {
                conv: Conv::new2d(s, &format!("down{i}.conv"), cin, cout, k, stride, pad, 1, rng),
                norm: BatchNorm::new(s, &format!("down{i}.norm"), cout),
            })
            .collect();
        let blocks = (0..config.blocks)
            .map(|bi| {
                let heads = (0..config.heads)
                    .map(|h| {
                        let name = format!("block{bi}.head{h}");
                        AttentionHead {
                            query: ProjectionBlock::new(s, &format!("{name}.query"), c, config.head_dim, 1, rng),
                            key: ProjectionBlock::new(s, &format!("{name}.key"), c, config.head_dim, 2, rng),
                            value: ProjectionBlock::new(s, &format!("{name}.value"), c, config.head_dim, 2, rng),
                        }
                    })
                    .collect();
                TransformerBlock {
                    heads,
                    merge: Conv::pointwise(s, &format!("block{bi}.merge"), config.heads * config.head_dim, c, rng),
                    attn_norm: BatchNorm::new(s, &format!("block{bi}.attn_norm"), c),
                    mlp_norm: BatchNorm::new(s, &format!("block{bi}.mlp_norm"), c),
                    expand: Conv::pointwise(s, &format!("block{bi}.expand"), c, config.mlp_width, rng),
                    contract: Conv::pointwise(s, &format!("block{bi}.contract"), config.mlp_width, c, rng),
                }
            })
            .collect();
        let up_widths = [(c, c), (c, 2 * b), (2 * b, b)];
        let up = up_widths
            .iter()
            .enumerate()
            .map(|(i, &(cin, cout))| DeconvNorm {
                deconv: ConvTranspose::new(s, &format!("up{i}.deconv"), cin, cout, 3, 2, 1, 1, rng),
                norm: BatchNorm::new(s, &format!("up{i}.norm"), cout),
            })
            .collect();
        let head = Conv::new2d(s, "head", b, config.input_channels, 7, 1, 3, 1, rng);
        Ok(Self { config, store, down, blocks, up, head })
    }

    pub fn config(&self) -> &GeneratorConfig {
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

    pub fn apply_updates(&mut self, updates: &[NormUpdate<T>]) {
        self.store.apply(updates);
    }

    fn check_input(&self, op: &'static str, shape: &[usize], channels: usize, side: usize) -> Result<()> {
        match *shape {
            [_, c, h, w] if c == channels && h == side && w == side => Ok(()),
            _ => Err(Error::shape(op, format!("expected [N, {channels}, {side}, {side}], got {shape:?}"))),
        }
    }

    /// `[N, 1, S, S]` → `T[N, c, S/8, S/8]`.
    pub fn downsample(&self, pass: &mut Pass<T>, x: Var) -> Result<Var> {
        self.check_input("downsample", pass.tape.shape(x), self.config.input_channels, self.config.image_size)?;
        let mut h = x;
        for layer in &self.down {
            h = layer.conv.forward(pass, h)?;
            h = layer.norm.forward(pass, &self.store, h)?;
            h = pass.tape.relu(h)?;
        }
        Ok(h)
    }

    /// Projects `T[N, c, h, w]` into the token matrix `[N, n, d]` of one head.
    pub fn conv_projection(&self, pass: &mut Pass<T>, t: Var, which: Projection, head: usize) -> Result<Var> {
        self.projection_in_block(pass, 0, t, which, head)
    }

    fn projection_in_block(&self, pass: &mut Pass<T>, block: usize, t: Var, which: Projection, head: usize) -> Result<Var> {
        let g = self.config.grid();
        self.check_input("conv_projection", pass.tape.shape(t), self.config.transformer_channels, g)?;
        let heads = &self.blocks[block].heads;
        let h = heads.get(head).ok_or_else(|| {
            Error::InvalidArgument(format!("head index {head} out of range (model has {})", heads.len()))
        })?;
        let p = match which {
            Projection::Query => &h.query,
            Projection::Key => &h.key,
            Projection::Value => &h.value,
        };
        let y = p.depthwise.forward(pass, t)?;
        let y = p.norm.forward(pass, &self.store, y)?;
        let y = p.pointwise.forward(pass, y)?;
        // [N, d, h', w'] → [N, d, h'·w'] → [N, h'·w', d]
        let y = pass.tape.flatten_from(y, 2)?;
        pass.tape.transpose(y)
    }

    /// Multi-head attention output `Z*` (after the merging pointwise conv).
    fn multi_head(&self, pass: &mut Pass<T>, block: usize, t: Var) -> Result<Var> {
        let n = pass.tape.shape(t)[0];
        let g = self.config.grid();
        let mut outputs = Vec::with_capacity(self.config.heads);
        for head in 0..self.config.heads {
            let q = self.projection_in_block(pass, block, t, Projection::Query, head)?;
            let k = self.projection_in_block(pass, block, t, Projection::Key, head)?;
            let v = self.projection_in_block(pass, block, t, Projection::Value, head)?;
            let z = self_attention(pass.tape, q, k, v)?;
            let z = pass.tape.transpose(z)?;
            outputs.push(pass.tape.reshape(z, &[n, self.config.head_dim, g, g])?);
        }
        let concat = pass.tape.concat(&outputs, 1)?;
        self.blocks[block].merge.forward(pass, concat)
    }

    /// One transformer block; the output shape equals the input shape.
    pub fn transformer_block(&self, pass: &mut Pass<T>, t: Var) -> Result<Var> {
        self.block_forward(pass, 0, t)
    }

    fn block_forward(&self, pass: &mut Pass<T>, block: usize, t: Var) -> Result<Var> {
        let b = &self.blocks[block];
        let z = self.multi_head(pass, block, t)?;
        let r = pass.tape.add(t, z)?;
        let r = b.attn_norm.forward(pass, &self.store, r)?;
        let p = b.mlp_norm.forward(pass, &self.store, r)?;
        let p = b.expand.forward(pass, p)?;
        let p = pass.tape.gelu(p)?;
        let p = b.contract.forward(pass, p)?;
        pass.tape.add(r, p)
    }

    /// `T[N, c, S/8, S/8]` → `[N, 1, S, S]`, linear output.
    pub fn upsample(&self, pass: &mut Pass<T>, t: Var) -> Result<Var> {
        self.check_input("upsample", pass.tape.shape(t), self.config.transformer_channels, self.config.grid())?;
        let mut h = t;
        for layer in &self.up {
            h = layer.deconv.forward(pass, h)?;
            h = layer.norm.forward(pass, &self.store, h)?;
            h = pass.tape.relu(h)?;
        }
        self.head.forward(pass, h)
    }

    pub fn generate(&self, pass: &mut Pass<T>, x: Var) -> Result<Var> {
        let mut t = self.downsample(pass, x)?;
        for block in 0..self.blocks.len() {
            t = self.block_forward(pass, block, t)?;
        }
        self.upsample(pass, t)
    }

    /// Inference with running batch-norm statistics on a `[N, 1, S, S]` batch.
    pub fn generate_eval(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let binding = self.bind(&mut tape, false)?;
        let x = tape.constant(input.clone())?;
        let mut pass = Pass::new(&mut tape, &binding, Mode::Eval);
        let y = self.generate(&mut pass, x)?;
        Ok(tape.value(y).clone())
    }
}
