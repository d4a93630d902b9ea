use super::{DisplacementField, RegistrationModel};
use crate::container::{self, Entries, Entry};
use crate::data::Volume;
use crate::error::{Error, Result};
use crate::nn::{Binding, Conv, Mode, ParamStore, Pass};
use crate::tensor::{Element, Tape, Tensor, Var};
use crate::training::{Adam, AdamConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::Path;

#[derive(Clone, Debug, PartialEq)]
pub struct RegNetConfig {
    /// Channels at full, half and quarter resolution.
    pub widths: [usize; 3],
    pub slope: f64,
}

impl Default for RegNetConfig {
    fn default() -> Self {
        Self { widths: [8, 16, 16], slope: 0.2 }
    }
}

/// Three-level 3-D convolutional encoder-decoder mapping a concatenated
/// `(moving, fixed)` pair to a dense displacement field.
#[derive(Clone, Debug)]
pub struct RegNet<T> {
    config: RegNetConfig,
    store: ParamStore<T>,
    enc: [Conv; 3],
    dec: [Conv; 2],
    flow: Conv,
}

impl<T: Element> RegNet<T> {
    pub fn new<R: Rng + ?Sized>(config: RegNetConfig, rng: &mut R) -> Result<Self> {
        let [w1, w2, w3] = config.widths;
        if config.widths.contains(&0) {
            return Err(Error::InvalidArgument("registration widths must be positive".into()));
        }
        let mut store = ParamStore::new();
        let s = &mut store;
        let enc = [
            Conv::new3d(s, "enc1", 2, w1, 1, rng),
            Conv::new3d(s, "enc2", w1, w2, 2, rng),
            Conv::new3d(s, "enc3", w2, w3, 2, rng),
        ];
        let dec = [Conv::new3d(s, "dec2", w3 + w2, w2, 1, rng), Conv::new3d(s, "dec1", w2 + w1, w1, 1, rng)];
        let flow = Conv::new3d(s, "flow", w1, 3, 1, rng);
        Ok(Self { config, store, enc, dec, flow })
    }

    pub fn config(&self) -> &RegNetConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn bind(&self, tape: &mut Tape<T>, requires_grad: bool) -> Result<Binding> {
        self.store.bind(tape, requires_grad)
    }

    /// `pair[N, 2, D, H, W]` → `flow[N, 3, D, H, W]`; every spatial extent
    /// must be divisible by 4.
    pub fn forward(&self, pass: &mut Pass<T>, pair: Var) -> Result<Var> {
        let shape = pass.tape.shape(pair).to_vec();
        match shape[..] {
            [_, 2, d, h, w] if [d, h, w].iter().all(|&e| e > 0 && e % 4 == 0) => {}
            _ => {
                return Err(Error::shape(
                    "register",
                    format!("expected [N, 2, D, H, W] with extents divisible by 4, got {shape:?}"),
                ))
            }
        }
        let slope = T::from_f64(self.config.slope).unwrap();
        let act = |pass: &mut Pass<T>, conv: &Conv, x: Var| -> Result<Var> {
            let y = conv.forward(pass, x)?;
            pass.tape.leaky_relu(y, slope)
        };
        let e1 = act(pass, &self.enc[0], pair)?;
        let e2 = act(pass, &self.enc[1], e1)?;
        let e3 = act(pass, &self.enc[2], e2)?;
        let u2 = pass.tape.upsample_nearest(e3, [2, 2, 2])?;
        let c2 = pass.tape.concat(&[u2, e2], 1)?;
        let d2 = act(pass, &self.dec[0], c2)?;
        let u1 = pass.tape.upsample_nearest(d2, [2, 2, 2])?;
        let c1 = pass.tape.concat(&[u1, e1], 1)?;
        let d1 = act(pass, &self.dec[1], c1)?;
        self.flow.forward(pass, d1)
    }
}

fn pair_tensor(moving: &Volume, fixed: &Volume) -> Result<Tensor<f32>> {
    if (moving.depth, moving.height) != (fixed.depth, fixed.height) {
        return Err(Error::shape("register", "moving and fixed grids differ"));
    }
    let mut data = moving.voxels.clone();
    data.extend_from_slice(&fixed.voxels);
    Tensor::new(vec![1, 2, moving.depth, moving.height, moving.width], data)
}

/// Mean squared forward difference of the flow along each spatial axis.
fn smoothness<T: Element>(tape: &mut Tape<T>, flow: Var) -> Result<Var> {
    let shape = tape.shape(flow).to_vec();
    let mut terms = Vec::new();
    for axis in 2..5 {
        let len = shape[axis];
        if len < 2 {
            continue;
        }
        let hi = tape.narrow(flow, axis, 1, len - 1)?;
        let lo = tape.narrow(flow, axis, 0, len - 1)?;
        let d = tape.sub(hi, lo)?;
        let sq = tape.square(d)?;
        terms.push(tape.mean(sq)?);
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    Ok(total)
}

/// Unsupervised objective `mean((warp(moving, φ) − fixed)²) + w·smooth(φ)`.
pub fn registration_loss<T: Element>(tape: &mut Tape<T>, pair: Var, flow: Var, smoothness_weight: f64) -> Result<Var> {
    let moving = tape.narrow(pair, 1, 0, 1)?;
    let fixed = tape.narrow(pair, 1, 1, 1)?;
    let warped = tape.warp(moving, flow)?;
    let diff = tape.sub(warped, fixed)?;
    let sq = tape.square(diff)?;
    let sim = tape.mean(sq)?;
    let smooth = smoothness(tape, flow)?;
    let smooth = tape.scale(smooth, T::from_f64(smoothness_weight).unwrap())?;
    tape.add(sim, smooth)
}

impl RegistrationModel for RegNet<f32> {
    fn register(&self, moving: &Volume, fixed: &Volume) -> Result<DisplacementField> {
        let mut tape = Tape::new();
        let binding = self.bind(&mut tape, false)?;
        let pair = tape.constant(pair_tensor(moving, fixed)?)?;
        let mut pass = Pass::new(&mut tape, &binding, Mode::Eval);
        let flow = self.forward(&mut pass, pair)?;
        DisplacementField::from_tensor(tape.value(flow))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegTrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub smoothness: f64,
    pub seed: u64,
}

impl Default for RegTrainConfig {
    fn default() -> Self {
        Self { steps: 200, learning_rate: 1e-3, smoothness: 0.1, seed: 0 }
    }
}

/// Trains on `(moving, fixed)` pairs drawn uniformly under the seed; returns
/// the loss of every step.
pub fn train_registration(net: &mut RegNet<f32>, pairs: &[(Volume, Volume)], config: &RegTrainConfig) -> Result<Vec<f64>> {
    if pairs.is_empty() {
        return Err(Error::Empty("no registration training pairs".into()));
    }
    let tensors = pairs.iter().map(|(m, f)| pair_tensor(m, f)).collect::<Result<Vec<_>>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let shapes: Vec<Vec<usize>> = net.store().params().map(|(_, t)| t.shape().to_vec()).collect();
    let adam_config = AdamConfig { learning_rate: config.learning_rate, ..AdamConfig::default() };
    let mut adam = Adam::new(adam_config, shapes.iter().map(Vec::as_slice));
    let mut losses = Vec::with_capacity(config.steps);
    for _ in 0..config.steps {
        let i = rng.random_range(0..tensors.len());
        let mut tape = Tape::new();
        let binding = net.bind(&mut tape, true)?;
        let pair = tape.constant(tensors[i].clone())?;
        let mut pass = Pass::new(&mut tape, &binding, Mode::Train);
        let flow = net.forward(&mut pass, pair)?;
        let loss = registration_loss(&mut tape, pair, flow, config.smoothness)?;
        tape.backward(loss)?;
        losses.push(tape.value(loss).item()? as f64);
        let grads = net.store().grads(&tape, &binding);
        drop(tape);
        let mut params: Vec<&mut Tensor<f32>> = net.store_mut().params_mut().collect();
        adam.update(&mut params, &grads)?;
    }
    Ok(losses)
}

pub fn save_regnet(net: &RegNet<f32>, path: impl AsRef<Path>) -> Result<()> {
    let c = net.config();
    let mut entries = vec![
        Entry::u64s("regnet.widths", c.widths.iter().map(|&w| w as u64).collect()),
        Entry::f64("regnet.slope", c.slope),
    ];
    entries.extend(net.store().params().map(|(n, t)| Entry::tensor(format!("R.{n}"), t)));
    container::save(path, &entries)
}

pub fn load_regnet(path: impl AsRef<Path>) -> Result<RegNet<f32>> {
    let mut e = Entries::new(container::load(path)?);
    let widths = e.u64s("regnet.widths")?;
    let [w1, w2, w3] = widths[..] else {
        return Err(Error::InvalidArgument("regnet.widths must hold three values".into()));
    };
    let config = RegNetConfig { widths: [w1 as usize, w2 as usize, w3 as usize], slope: e.f64("regnet.slope")? };
    let mut net = RegNet::new(config, &mut ChaCha8Rng::seed_from_u64(0))?;
    let names: Vec<String> = net.store().params().map(|(n, _)| n.to_string()).collect();
    for n in names {
        net.store_mut().set(&n, e.tensor(&format!("R.{n}"))?)?;
    }
    e.finish()?;
    Ok(net)
}
