//! Cycle-consistent adversarial training of the two generators and two
//! patch discriminators.

mod adam;
mod checkpoint;
mod config;
mod loss;
mod pool;

pub use adam::{adam_step, Adam, AdamConfig};
pub use checkpoint::{checkpoint_load, checkpoint_save, decode_state, encode_state};
pub use config::{parse_domains, TrainConfig};
pub use loss::{combine, cycle_consistency, cycle_loss, gan_loss_d, gan_loss_g, LossBreakdown, LsganLabels};
pub use pool::ImagePool;

use crate::discriminator::Discriminator;
use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::nn::{Binding, Mode, NormUpdate, Pass};
use crate::tensor::{Element, Tape, Tensor, Var};
use loss::scalar;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Loss values of one optimization step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub epoch: usize,
    /// Global step index, starting at 0.
    pub step: u64,
    pub losses: LossBreakdown,
    pub disc_x: f64,
    pub disc_y: f64,
}

impl StepLog {
    /// `epoch, step, l_gan_g, l_gan_f, l_cycle, total`.
    pub fn log_line(&self) -> String {
        let l = &self.losses;
        format!("{}, {}, {:.8e}, {:.8e}, {:.8e}, {:.8e}", self.epoch, self.step, l.gan_g, l.gan_f, l.cycle, l.total())
    }
}

/// Running sums of the current epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossSums {
    pub gan_g: f64,
    pub gan_f: f64,
    pub cycle: f64,
    pub total: f64,
    pub disc_x: f64,
    pub disc_y: f64,
    pub steps: u64,
}

impl LossSums {
    pub const FIELDS: usize = 6;

    fn add(&mut self, log: &StepLog) {
        self.gan_g += log.losses.gan_g;
        self.gan_f += log.losses.gan_f;
        self.cycle += log.losses.cycle;
        self.total += log.losses.total();
        self.disc_x += log.disc_x;
        self.disc_y += log.disc_y;
        self.steps += 1;
    }

    pub fn to_vec(&self) -> Vec<f64> {
        vec![self.gan_g, self.gan_f, self.cycle, self.total, self.disc_x, self.disc_y]
    }

    pub fn from_slice(v: &[f64], steps: u64) -> Self {
        Self { gan_g: v[0], gan_f: v[1], cycle: v[2], total: v[3], disc_x: v[4], disc_y: v[5], steps }
    }
}

/// Epoch-level means of every loss component.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub steps: u64,
    pub gan_g: f64,
    pub gan_f: f64,
    pub cycle: f64,
    pub total: f64,
    pub disc_x: f64,
    pub disc_y: f64,
}

impl From<(usize, &LossSums)> for EpochSummary {
    fn from((epoch, s): (usize, &LossSums)) -> Self {
        let n = s.steps.max(1) as f64;
        Self {
            epoch,
            steps: s.steps,
            gan_g: s.gan_g / n,
            gan_f: s.gan_f / n,
            cycle: s.cycle / n,
            total: s.total / n,
            disc_x: s.disc_x / n,
            disc_y: s.disc_y / n,
        }
    }
}

/// Position of the training loop.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Progress {
    /// Completed epochs.
    pub epoch: usize,
    pub step_in_epoch: usize,
    pub global_step: u64,
    /// Permutation of the X pool for the current epoch; empty between epochs.
    pub order: Vec<usize>,
    pub sums: LossSums,
}

/// Both generators, both discriminators, their optimizers, the image
/// histories, the random stream and the loop position.
#[derive(Clone, Debug)]
pub struct CyTranState<T> {
    pub config: TrainConfig,
    /// `X → Y`.
    pub g: Generator<T>,
    /// `Y → X`.
    pub f: Generator<T>,
    pub d_x: Discriminator<T>,
    pub d_y: Discriminator<T>,
    /// Shared by `G` and `F`.
    pub opt_gen: Adam<T>,
    /// Shared by `D_X` and `D_Y`.
    pub opt_disc: Adam<T>,
    pub pool_x: ImagePool<T>,
    pub pool_y: ImagePool<T>,
    pub rng: ChaCha8Rng,
    pub progress: Progress,
}

fn shapes<T: Element>(stores: &[&crate::nn::ParamStore<T>]) -> Vec<Vec<usize>> {
    stores.iter().flat_map(|s| s.params().map(|(_, t)| t.shape().to_vec())).collect()
}

impl<T: Element> CyTranState<T> {
    /// Fresh models initialized from the configured seed, in the order
    /// `G`, `F`, `D_X`, `D_Y`.
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let g = Generator::new(config.generator_config(), &mut rng)?;
        let f = Generator::new(config.generator_config(), &mut rng)?;
        let d_x = Discriminator::new(config.discriminator.clone(), &mut rng)?;
        let d_y = Discriminator::new(config.discriminator.clone(), &mut rng)?;
        let gen_shapes = shapes(&[g.store(), f.store()]);
        let disc_shapes = shapes(&[d_x.store(), d_y.store()]);
        Ok(Self {
            opt_gen: Adam::new(config.adam(), gen_shapes.iter().map(Vec::as_slice)),
            opt_disc: Adam::new(config.adam(), disc_shapes.iter().map(Vec::as_slice)),
            pool_x: ImagePool::new(config.history_buffer),
            pool_y: ImagePool::new(config.history_buffer),
            config,
            g,
            f,
            d_x,
            d_y,
            rng,
            progress: Progress::default(),
        })
    }

    /// Steps per epoch over a pool of `n_x` samples.
    pub fn steps_per_epoch(&self, n_x: usize) -> usize {
        n_x.div_ceil(self.config.batch_size)
    }

    fn check_pools(&self, xs: &[Tensor<T>], ys: &[Tensor<T>]) -> Result<()> {
        if xs.is_empty() || ys.is_empty() {
            return Err(Error::Empty("training needs non-empty X and Y pools".into()));
        }
        let s = self.config.image_size;
        let expected = [1, s, s];
        if let Some(bad) = xs.iter().chain(ys).find(|t| t.shape() != expected) {
            return Err(Error::shape("train", format!("slices must be {expected:?}, found {:?}", bad.shape())));
        }
        Ok(())
    }

    fn stack(&mut self, slices: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let s = self.config.image_size;
        let mut data = Vec::with_capacity(slices.len() * s * s);
        for t in slices {
            if self.config.augmentation_rate > 0.0 && self.rng.random_bool(self.config.augmentation_rate) {
                for row in t.data().chunks_exact(s) {
                    data.extend(row.iter().rev());
                }
            } else {
                data.extend_from_slice(t.data());
            }
        }
        Tensor::new(vec![slices.len(), 1, s, s], data)
    }

    /// Runs one optimization step (a generator update, then a discriminator
    /// update), starting a new epoch permutation when needed.
    pub fn train_step(&mut self, xs: &[Tensor<T>], ys: &[Tensor<T>]) -> Result<(StepLog, Option<EpochSummary>)> {
        self.check_pools(xs, ys)?;
        if self.progress.order.is_empty() {
            let mut order: Vec<usize> = (0..xs.len()).collect();
            order.shuffle(&mut self.rng);
            self.progress.order = order;
            self.progress.step_in_epoch = 0;
            self.progress.sums = LossSums::default();
        }
        if self.progress.order.len() != xs.len() {
            return Err(Error::InvalidArgument(format!(
                "resumed epoch covers {} X samples but the pool has {}",
                self.progress.order.len(),
                xs.len()
            )));
        }
        let bs = self.config.batch_size;
        let start = self.progress.step_in_epoch * bs;
        let end = (start + bs).min(xs.len());
        let x_idx = self.progress.order[start..end].to_vec();
        let y_idx: Vec<usize> = (0..x_idx.len()).map(|_| self.rng.random_range(0..ys.len())).collect();
        let xb = self.stack(&x_idx.iter().map(|&i| &xs[i]).collect::<Vec<_>>())?;
        let yb = self.stack(&y_idx.iter().map(|&i| &ys[i]).collect::<Vec<_>>())?;

        let (losses, fake_x, fake_y) = self.generator_update(&xb, &yb)?;
        let fake_x = self.through_pool(fake_x, true)?;
        let fake_y = self.through_pool(fake_y, false)?;
        let (disc_x, disc_y) = self.discriminator_update(&xb, &yb, fake_x, fake_y)?;

        let log = StepLog { epoch: self.progress.epoch, step: self.progress.global_step, losses, disc_x, disc_y };
        self.progress.sums.add(&log);
        self.progress.global_step += 1;
        self.progress.step_in_epoch += 1;
        let mut summary = None;
        if self.progress.step_in_epoch == self.steps_per_epoch(xs.len()) {
            summary = Some(EpochSummary::from((self.progress.epoch, &self.progress.sums)));
            self.progress.epoch += 1;
            self.progress.step_in_epoch = 0;
            self.progress.order.clear();
            self.progress.sums = LossSums::default();
        }
        Ok((log, summary))
    }

    /// Runs the remaining steps of the current epoch.
    pub fn train_epoch(&mut self, xs: &[Tensor<T>], ys: &[Tensor<T>]) -> Result<(EpochSummary, Vec<StepLog>)> {
        let mut logs = Vec::new();
        loop {
            let (log, summary) = self.train_step(xs, ys)?;
            logs.push(log);
            if let Some(summary) = summary {
                return Ok((summary, logs));
            }
        }
    }

    fn through_pool(&mut self, fakes: Tensor<T>, domain_x: bool) -> Result<Tensor<T>> {
        if self.config.history_buffer == 0 {
            return Ok(fakes);
        }
        let shape = fakes.shape().to_vec();
        let per = shape[1..].iter().product::<usize>();
        let mut single = shape.clone();
        single[0] = 1;
        let mut out = Vec::with_capacity(fakes.numel());
        for chunk in fakes.data().chunks_exact(per) {
            let image = Tensor::new(single.clone(), chunk.to_vec())?;
            let pool = if domain_x { &mut self.pool_x } else { &mut self.pool_y };
            out.extend_from_slice(pool.query(image, &mut self.rng).data());
        }
        Tensor::new(shape, out)
    }

    /// Adam step on `G` and `F` for one batch; returns the loss breakdown and
    /// the detached fakes `F(y)`, `G(x)`.
    pub fn generator_update(&mut self, xb: &Tensor<T>, yb: &Tensor<T>) -> Result<(LossBreakdown, Tensor<T>, Tensor<T>)> {
        let mut tape = Tape::new();
        let bg = self.g.bind(&mut tape, true)?;
        let bf = self.f.bind(&mut tape, true)?;
        let bdx = self.d_x.bind(&mut tape, false)?;
        let bdy = self.d_y.bind(&mut tape, false)?;
        let x = tape.constant(xb.clone())?;
        let y = tape.constant(yb.clone())?;
        let (mut g_up, mut f_up) = (Vec::new(), Vec::new());
        let fake_y = run_generator(&self.g, &mut tape, &bg, x, &mut g_up)?;
        let x_rec = run_generator(&self.f, &mut tape, &bf, fake_y, &mut f_up)?;
        let fake_x = run_generator(&self.f, &mut tape, &bf, y, &mut f_up)?;
        let y_rec = run_generator(&self.g, &mut tape, &bg, fake_x, &mut g_up)?;
        let labels = self.config.labels();
        let sy_fake = run_discriminator(&self.d_y, &mut tape, &bdy, fake_y)?;
        let sx_fake = run_discriminator(&self.d_x, &mut tape, &bdx, fake_x)?;
        let (sy_real, sx_real) = if labels == LsganLabels::PaperLiteral {
            (run_discriminator(&self.d_y, &mut tape, &bdy, y)?, run_discriminator(&self.d_x, &mut tape, &bdx, x)?)
        } else {
            (sy_fake, sx_fake)
        };
        let gan_g = labels.generator(&mut tape, sy_real, sy_fake)?;
        let gan_f = labels.generator(&mut tape, sx_real, sx_fake)?;
        let cycle = cycle_consistency(&mut tape, x, x_rec, y, y_rec)?;
        let (total, breakdown) = combine(&mut tape, gan_g, gan_f, cycle, self.config.lambda_cycle)?;
        tape.backward(total)?;
        let mut grads = self.g.store().grads(&tape, &bg);
        grads.extend(self.f.store().grads(&tape, &bf));
        let fake_x_value = tape.value(fake_x).clone();
        let fake_y_value = tape.value(fake_y).clone();
        drop(tape);
        let (g, f) = (&mut self.g, &mut self.f);
        let mut params: Vec<&mut Tensor<T>> = g.store_mut().params_mut().chain(f.store_mut().params_mut()).collect();
        self.opt_gen.update(&mut params, &grads)?;
        self.g.apply_updates(&g_up);
        self.f.apply_updates(&f_up);
        Ok((breakdown, fake_x_value, fake_y_value))
    }

    /// Adam step on `D_X` and `D_Y`; returns their losses.
    pub fn discriminator_update(&mut self, xb: &Tensor<T>, yb: &Tensor<T>, fake_x: Tensor<T>, fake_y: Tensor<T>) -> Result<(f64, f64)> {
        let mut tape = Tape::new();
        let bdx = self.d_x.bind(&mut tape, true)?;
        let bdy = self.d_y.bind(&mut tape, true)?;
        let x = tape.constant(xb.clone())?;
        let y = tape.constant(yb.clone())?;
        let fx = tape.constant(fake_x)?;
        let fy = tape.constant(fake_y)?;
        let labels = self.config.labels();
        let (real, fake) = (run_discriminator(&self.d_x, &mut tape, &bdx, x)?, run_discriminator(&self.d_x, &mut tape, &bdx, fx)?);
        let loss_x = labels.discriminator(&mut tape, real, fake)?;
        let (real, fake) = (run_discriminator(&self.d_y, &mut tape, &bdy, y)?, run_discriminator(&self.d_y, &mut tape, &bdy, fy)?);
        let loss_y = labels.discriminator(&mut tape, real, fake)?;
        let total = tape.add(loss_x, loss_y)?;
        tape.backward(total)?;
        let mut grads = self.d_x.store().grads(&tape, &bdx);
        grads.extend(self.d_y.store().grads(&tape, &bdy));
        let values = (scalar(&tape, loss_x)?, scalar(&tape, loss_y)?);
        drop(tape);
        let (dx, dy) = (&mut self.d_x, &mut self.d_y);
        let mut params: Vec<&mut Tensor<T>> = dx.store_mut().params_mut().chain(dy.store_mut().params_mut()).collect();
        self.opt_disc.update(&mut params, &grads)?;
        Ok(values)
    }

    /// Evaluates the combined objective on a batch without updating anything
    /// (generators in training mode, as during optimization).
    pub fn total_loss(&self, xb: &Tensor<T>, yb: &Tensor<T>) -> Result<LossBreakdown> {
        if xb.shape() != yb.shape() {
            return Err(Error::shape("total_loss", format!("x {:?} vs y {:?}", xb.shape(), yb.shape())));
        }
        let mut tape = Tape::new();
        let bg = self.g.bind(&mut tape, false)?;
        let bf = self.f.bind(&mut tape, false)?;
        let bdx = self.d_x.bind(&mut tape, false)?;
        let bdy = self.d_y.bind(&mut tape, false)?;
        let x = tape.constant(xb.clone())?;
        let y = tape.constant(yb.clone())?;
        let mut sink = Vec::new();
        let fake_y = run_generator(&self.g, &mut tape, &bg, x, &mut sink)?;
        let x_rec = run_generator(&self.f, &mut tape, &bf, fake_y, &mut sink)?;
        let fake_x = run_generator(&self.f, &mut tape, &bf, y, &mut sink)?;
        let y_rec = run_generator(&self.g, &mut tape, &bg, fake_x, &mut sink)?;
        let labels = self.config.labels();
        let sy_fake = run_discriminator(&self.d_y, &mut tape, &bdy, fake_y)?;
        let sx_fake = run_discriminator(&self.d_x, &mut tape, &bdx, fake_x)?;
        let sy_real = run_discriminator(&self.d_y, &mut tape, &bdy, y)?;
        let sx_real = run_discriminator(&self.d_x, &mut tape, &bdx, x)?;
        let gan_g = labels.generator(&mut tape, sy_real, sy_fake)?;
        let gan_f = labels.generator(&mut tape, sx_real, sx_fake)?;
        let cycle = cycle_consistency(&mut tape, x, x_rec, y, y_rec)?;
        Ok(combine(&mut tape, gan_g, gan_f, cycle, self.config.lambda_cycle)?.1)
    }
}

fn run_generator<T: Element>(
    model: &Generator<T>,
    tape: &mut Tape<T>,
    binding: &Binding,
    x: Var,
    updates: &mut Vec<NormUpdate<T>>,
) -> Result<Var> {
    let mut pass = Pass::new(tape, binding, Mode::Train);
    let out = model.generate(&mut pass, x)?;
    updates.append(&mut pass.updates);
    Ok(out)
}

fn run_discriminator<T: Element>(model: &Discriminator<T>, tape: &mut Tape<T>, binding: &Binding, x: Var) -> Result<Var> {
    let mut pass = Pass::new(tape, binding, Mode::Train);
    model.discriminate(&mut pass, x)
}
