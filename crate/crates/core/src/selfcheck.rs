//! Built-in verification suites: closed-form parameter arithmetic, the shape
//! contract of the generator, and sampled gradient checks of the miniature
//! models in 64-bit precision.

use crate::discriminator::{Discriminator, DiscriminatorConfig};
use crate::error::Result;
use crate::generator::{self_attention, Generator, GeneratorConfig, Projection};
use crate::nn::{Binding, Mode, Pass};
use crate::tensor::{grad_check_many, GradCheckReport, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Learnable parameters of the default generator.
pub const DEFAULT_GENERATOR_PARAMETERS: usize = 703_329;

/// Tolerance on the maximum relative gradient error.
pub const GRADIENT_TOLERANCE: f64 = 1e-4;

/// Parameter count from layer arithmetic alone: conv weights and biases,
/// batch-norm scale and shift.
pub fn generator_parameters(c: &GeneratorConfig) -> usize {
    let conv = |cin: usize, cout: usize, k: usize| cin * cout * k * k + cout;
    let norm = |ch: usize| 2 * ch;
    let (b, t) = (c.base_width, c.transformer_channels);
    let down = conv(c.input_channels, b, 7) + norm(b) + conv(b, b, 3) + norm(b) + conv(b, 2 * b, 3) + norm(2 * b)
        + conv(2 * b, t, 3) + norm(t);
    let projection = t * 9 + t + norm(t) + conv(t, c.head_dim, 1);
    let block = c.heads * 3 * projection
        + conv(c.heads * c.head_dim, t, 1)
        + 2 * norm(t)
        + conv(t, c.mlp_width, 1)
        + conv(c.mlp_width, t, 1);
    let up = conv(t, 4 * b, 3) + norm(4 * b) + conv(4 * b, 2 * b, 3) + norm(2 * b) + conv(2 * b, b, 3) + norm(b);
    down + c.blocks * block + up + conv(b, c.input_channels, 7)
}

/// Intermediate extents observed on one forward pass.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShapeReport {
    pub input: Vec<usize>,
    pub tokens: Vec<usize>,
    pub query: Vec<usize>,
    pub key: Vec<usize>,
    pub value: Vec<usize>,
    pub head_concat: Vec<usize>,
    pub output: Vec<usize>,
}

/// Runs the default generator at `size` on one random slice in inference
/// mode and records the extents of every stage.
pub fn generator_shapes(size: usize, seed: u64) -> Result<ShapeReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g: Generator<f32> = Generator::new(GeneratorConfig::default().with_image_size(size), &mut rng)?;
    let mut tape = Tape::new();
    let binding = g.bind(&mut tape, false)?;
    let x = tape.constant(Tensor::randn(&[1, 1, size, size], 1.0, &mut rng))?;
    let mut pass = Pass::new(&mut tape, &binding, Mode::Eval);
    let t = g.downsample(&mut pass, x)?;
    let mut heads = Vec::new();
    let (mut q_shape, mut k_shape, mut v_shape) = (Vec::new(), Vec::new(), Vec::new());
    for head in 0..g.config().heads {
        let q = g.conv_projection(&mut pass, t, Projection::Query, head)?;
        let k = g.conv_projection(&mut pass, t, Projection::Key, head)?;
        let v = g.conv_projection(&mut pass, t, Projection::Value, head)?;
        q_shape = pass.tape.shape(q).to_vec();
        k_shape = pass.tape.shape(k).to_vec();
        v_shape = pass.tape.shape(v).to_vec();
        let z = self_attention(pass.tape, q, k, v)?;
        heads.push(pass.tape.transpose(z)?);
    }
    let concat = pass.tape.concat(&heads, 1)?;
    let y = g.generate(&mut pass, x)?;
    Ok(ShapeReport {
        input: vec![1, 1, size, size],
        tokens: pass.tape.shape(t).to_vec(),
        query: q_shape,
        key: k_shape,
        value: v_shape,
        head_concat: pass.tape.shape(concat).to_vec(),
        output: pass.tape.shape(y).to_vec(),
    })
}

/// Probe positions: up to `per_tensor` spread-out elements of every input.
fn probes(inputs: &[Tensor<f64>], per_tensor: usize) -> Vec<(usize, usize)> {
    let mut probes = Vec::new();
    for (i, t) in inputs.iter().enumerate() {
        let n = t.numel();
        for j in 0..per_tensor.min(n) {
            probes.push((i, (j * 104_729 + 17 * i) % n));
        }
    }
    probes
}

/// Checks the miniature generator (16×16 input, batch 2, training mode)
/// against central differences on the input and every parameter tensor.
pub fn generator_gradients(seed: u64, per_tensor: usize) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g: Generator<f64> = Generator::new(GeneratorConfig::miniature(), &mut rng)?;
    let mut inputs = vec![Tensor::randn(&[2, 1, 16, 16], 1.0, &mut rng)];
    inputs.extend(g.store().params().map(|(_, t)| t.clone()));
    let weights = Tensor::randn(&[2, 1, 16, 16], 1.0, &mut rng);
    grad_check_many(
        |tape, vars| {
            let binding = Binding::from_vars(vars[1..].to_vec());
            let mut pass = Pass::new(tape, &binding, Mode::Train);
            let y = g.generate(&mut pass, vars[0])?;
            let w = tape.constant(weights.clone())?;
            let yw = tape.mul(y, w)?;
            tape.sum(yw)
        },
        &inputs,
        Some(&probes(&inputs, per_tensor)),
        1e-5,
        GRADIENT_TOLERANCE,
    )
}

/// Checks a discriminator on `size`×`size` inputs (batch 2, training mode).
pub fn discriminator_gradients(
    config: DiscriminatorConfig,
    size: usize,
    seed: u64,
    per_tensor: usize,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d: Discriminator<f64> = Discriminator::new(config, &mut rng)?;
    let side = d.config().output_extent(size)?;
    let mut inputs = vec![Tensor::randn(&[2, 1, size, size], 1.0, &mut rng)];
    inputs.extend(d.store().params().map(|(_, t)| t.clone()));
    let weights = Tensor::randn(&[2, 1, side, side], 1.0, &mut rng);
    grad_check_many(
        |tape, vars| {
            let binding = Binding::from_vars(vars[1..].to_vec());
            let mut pass = Pass::new(tape, &binding, Mode::Train);
            let y = d.discriminate(&mut pass, vars[0])?;
            let w = tape.constant(weights.clone())?;
            let yw = tape.mul(y, w)?;
            tape.sum(yw)
        },
        &inputs,
        Some(&probes(&inputs, per_tensor)),
        1e-5,
        GRADIENT_TOLERANCE,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_matches_built_models() {
        for config in [GeneratorConfig::default(), GeneratorConfig::miniature()] {
            let g: Generator<f32> = Generator::new(config.clone(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
            assert_eq!(generator_parameters(&config), g.parameter_count());
        }
        assert_eq!(generator_parameters(&GeneratorConfig::default()), DEFAULT_GENERATOR_PARAMETERS);
    }

    #[test]
    fn shapes_at_small_size() {
        let r = generator_shapes(32, 0).unwrap();
        assert_eq!(r.output, r.input);
        assert_eq!(r.tokens, [1, 128, 4, 4]);
        assert_eq!(r.query, [1, 16, 64]);
        assert_eq!(r.key, [1, 4, 64]);
        assert_eq!(r.head_concat, [1, 384, 16]);
    }
}
