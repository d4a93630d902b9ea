use super::{CyTranState, LossSums, Progress, TrainConfig};
use crate::container::{self, Entries, Entry};
use crate::data::Phase;
use crate::discriminator::PatchNorm;
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{Element, Tensor};
use crate::training::{Adam, ImagePool};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;

const MODELS: [&str; 4] = ["G", "F", "DX", "DY"];

fn config_entries(c: &TrainConfig) -> Vec<Entry> {
    let u = |k: &str, v: usize| Entry::u64(format!("config.{k}"), v as u64);
    let f = |k: &str, v: f64| Entry::f64(format!("config.{k}"), v);
    vec![
        f("lambda_cycle", c.lambda_cycle),
        f("learning_rate", c.learning_rate),
        u("epochs", c.epochs),
        u("batch_size", c.batch_size),
        Entry::u64("config.seed", c.seed),
        f("beta1", c.beta1),
        f("beta2", c.beta2),
        f("eps", c.eps),
        u("image_size", c.image_size),
        u("history_buffer", c.history_buffer),
        u("checkpoint_every", c.checkpoint_every),
        f("augmentation_rate", c.augmentation_rate),
        u("paper_literal_lsgan", c.paper_literal_lsgan as usize),
        Entry::u64s("config.domains", vec![c.domains.0 as u64, c.domains.1 as u64]),
        u("generator.input_channels", c.generator.input_channels),
        u("generator.base_width", c.generator.base_width),
        u("generator.transformer_channels", c.generator.transformer_channels),
        u("generator.heads", c.generator.heads),
        u("generator.head_dim", c.generator.head_dim),
        u("generator.mlp_width", c.generator.mlp_width),
        u("generator.blocks", c.generator.blocks),
        u("discriminator.input_channels", c.discriminator.input_channels),
        u("discriminator.base_width", c.discriminator.base_width),
        u("discriminator.n_layers", c.discriminator.n_layers),
        f("discriminator.slope", c.discriminator.slope),
        u("discriminator.norm", (c.discriminator.norm == PatchNorm::None) as usize),
    ]
}

fn read_config(e: &mut Entries) -> Result<TrainConfig> {
    let mut c = TrainConfig::default();
    c.lambda_cycle = e.f64("config.lambda_cycle")?;
    c.learning_rate = e.f64("config.learning_rate")?;
    c.epochs = e.usize("config.epochs")?;
    c.batch_size = e.usize("config.batch_size")?;
    c.seed = e.u64("config.seed")?;
    c.beta1 = e.f64("config.beta1")?;
    c.beta2 = e.f64("config.beta2")?;
    c.eps = e.f64("config.eps")?;
    c.image_size = e.usize("config.image_size")?;
    c.history_buffer = e.usize("config.history_buffer")?;
    c.checkpoint_every = e.usize("config.checkpoint_every")?;
    c.augmentation_rate = e.f64("config.augmentation_rate")?;
    c.paper_literal_lsgan = e.u64("config.paper_literal_lsgan")? != 0;
    let phase = |tag: u64| {
        u8::try_from(tag)
            .ok()
            .and_then(Phase::from_tag)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown phase tag {tag} in config.domains")))
    };
    c.domains = match e.u64s("config.domains")?[..] {
        [x, y] => (phase(x)?, phase(y)?),
        _ => return Err(Error::InvalidArgument("config.domains must hold two phase tags".into())),
    };
    c.generator.input_channels = e.usize("config.generator.input_channels")?;
    c.generator.base_width = e.usize("config.generator.base_width")?;
    c.generator.transformer_channels = e.usize("config.generator.transformer_channels")?;
    c.generator.heads = e.usize("config.generator.heads")?;
    c.generator.head_dim = e.usize("config.generator.head_dim")?;
    c.generator.mlp_width = e.usize("config.generator.mlp_width")?;
    c.generator.blocks = e.usize("config.generator.blocks")?;
    c.generator.image_size = c.image_size;
    c.discriminator.input_channels = e.usize("config.discriminator.input_channels")?;
    c.discriminator.base_width = e.usize("config.discriminator.base_width")?;
    c.discriminator.n_layers = e.usize("config.discriminator.n_layers")?;
    c.discriminator.slope = e.f64("config.discriminator.slope")?;
    c.discriminator.norm = match e.u64("config.discriminator.norm")? {
        0 => PatchNorm::Instance,
        1 => PatchNorm::None,
        other => return Err(Error::InvalidArgument(format!("unknown discriminator norm tag {other}"))),
    };
    Ok(c)
}

/// Every parameter and buffer of `store` under `prefix.`.
pub fn store_entries<T: Element>(prefix: &str, store: &ParamStore<T>) -> Vec<Entry> {
    store
        .params()
        .chain(store.buffers())
        .map(|(name, t)| Entry::tensor(format!("{prefix}.{name}"), t))
        .collect()
}

/// Overwrites every parameter and buffer of `store` from `prefix.` entries.
pub fn read_store<T: Element>(prefix: &str, store: &mut ParamStore<T>, e: &mut Entries) -> Result<()> {
    let names: Vec<String> = store.params().chain(store.buffers()).map(|(n, _)| n.to_string()).collect();
    for name in names {
        store.set(&name, e.tensor(&format!("{prefix}.{name}"))?)?;
    }
    Ok(())
}

fn param_names<T: Element>(stores: &[(&str, &ParamStore<T>)]) -> Vec<String> {
    stores.iter().flat_map(|(p, s)| s.params().map(move |(n, _)| format!("{p}.{n}"))).collect()
}

fn stack_pool<T: Element>(pool: &ImagePool<T>) -> Result<Option<Tensor<T>>> {
    let images = pool.images();
    let Some(first) = images.first() else { return Ok(None) };
    let mut shape = first.shape().to_vec();
    shape[0] = images.len();
    Tensor::new(shape, images.iter().flat_map(|t| t.data().iter().copied()).collect()).map(Some)
}

fn unstack_pool<T: Element>(capacity: usize, stacked: Option<Tensor<T>>) -> Result<ImagePool<T>> {
    let Some(t) = stacked else { return Ok(ImagePool::new(capacity)) };
    let mut single = t.shape().to_vec();
    let count = single[0];
    single[0] = 1;
    let per = t.numel() / count;
    let images = t.data().chunks_exact(per).map(|c| Tensor::new(single.clone(), c.to_vec())).collect::<Result<Vec<_>>>()?;
    Ok(ImagePool::with_images(capacity, images))
}

pub fn encode_state<T: Element>(state: &CyTranState<T>) -> Result<Vec<u8>> {
    let mut entries = config_entries(&state.config);
    let stores = [("G", state.g.store()), ("F", state.f.store()), ("DX", state.d_x.store()), ("DY", state.d_y.store())];
    for (prefix, store) in stores {
        entries.extend(store_entries(prefix, store));
    }
    for (opt_name, opt, owners) in [("opt_gen", &state.opt_gen, &stores[..2]), ("opt_disc", &state.opt_disc, &stores[2..])] {
        entries.push(Entry::u64(format!("{opt_name}.step"), opt.step));
        for ((name, m), v) in param_names(owners).iter().zip(&opt.m).zip(&opt.v) {
            entries.push(Entry::tensor(format!("{opt_name}.m.{name}"), m));
            entries.push(Entry::tensor(format!("{opt_name}.v.{name}"), v));
        }
    }
    for (name, pool) in [("pool_x", &state.pool_x), ("pool_y", &state.pool_y)] {
        if let Some(t) = stack_pool(pool)? {
            entries.push(Entry::tensor(name, &t));
        }
    }
    let seed = state.rng.get_seed();
    entries.push(Entry::u64s("rng.seed", seed.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect()));
    entries.push(Entry::u64("rng.stream", state.rng.get_stream()));
    let pos = state.rng.get_word_pos();
    entries.push(Entry::u64s("rng.word_pos", vec![pos as u64, (pos >> 64) as u64]));
    let p = &state.progress;
    entries.push(Entry::u64("progress.epoch", p.epoch as u64));
    entries.push(Entry::u64("progress.step_in_epoch", p.step_in_epoch as u64));
    entries.push(Entry::u64("progress.global_step", p.global_step));
    if !p.order.is_empty() {
        entries.push(Entry::u64s("progress.order", p.order.iter().map(|&i| i as u64).collect()));
    }
    entries.push(Entry::f64s("progress.sums", p.sums.to_vec()));
    entries.push(Entry::u64("progress.sum_steps", p.sums.steps));
    container::encode(&entries)
}

/// Rebuilds a state from container bytes; fails without side effects on any
/// malformed, missing or unexpected entry.
pub fn decode_state<T: Element>(bytes: &[u8]) -> Result<CyTranState<T>> {
    let mut e = Entries::new(container::decode(bytes)?);
    let config = read_config(&mut e)?;
    let mut state = CyTranState::<T>::new(config)?;
    read_store(MODELS[0], state.g.store_mut(), &mut e)?;
    read_store(MODELS[1], state.f.store_mut(), &mut e)?;
    read_store(MODELS[2], state.d_x.store_mut(), &mut e)?;
    read_store(MODELS[3], state.d_y.store_mut(), &mut e)?;
    let gen_names = param_names(&[("G", state.g.store()), ("F", state.f.store())]);
    let disc_names = param_names(&[("DX", state.d_x.store()), ("DY", state.d_y.store())]);
    for (opt_name, names) in [("opt_gen", gen_names), ("opt_disc", disc_names)] {
        let step = e.u64(&format!("{opt_name}.step"))?;
        let mut m = Vec::with_capacity(names.len());
        let mut v = Vec::with_capacity(names.len());
        for name in &names {
            m.push(e.tensor(&format!("{opt_name}.m.{name}"))?);
            v.push(e.tensor(&format!("{opt_name}.v.{name}"))?);
        }
        let opt = if opt_name == "opt_gen" { &mut state.opt_gen } else { &mut state.opt_disc };
        for (fresh, stored) in opt.m.iter().zip(&m) {
            if fresh.shape() != stored.shape() {
                return Err(Error::shape("checkpoint_load", format!("{opt_name} moment shape {:?}", stored.shape())));
            }
        }
        *opt = Adam { config: opt.config, step, m, v };
    }
    let cap = state.config.history_buffer;
    for (name, domain_x) in [("pool_x", true), ("pool_y", false)] {
        let stacked = if e.contains(name) { Some(e.tensor(name)?) } else { None };
        let pool = unstack_pool(cap, stacked)?;
        if domain_x {
            state.pool_x = pool;
        } else {
            state.pool_y = pool;
        }
    }
    let seed_words = e.u64s("rng.seed")?;
    let pos = e.u64s("rng.word_pos")?;
    if seed_words.len() != 4 || pos.len() != 2 {
        return Err(Error::InvalidArgument("malformed random-state entries".into()));
    }
    let mut seed = [0u8; 32];
    for (chunk, w) in seed.chunks_exact_mut(8).zip(&seed_words) {
        chunk.copy_from_slice(&w.to_le_bytes());
    }
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(e.u64("rng.stream")?);
    rng.set_word_pos(pos[0] as u128 | ((pos[1] as u128) << 64));
    state.rng = rng;
    let order = if e.contains("progress.order") { e.u64s("progress.order")? } else { Vec::new() };
    let sums = e.f64s("progress.sums")?;
    if sums.len() != LossSums::FIELDS {
        return Err(Error::InvalidArgument("malformed progress.sums entry".into()));
    }
    state.progress = Progress {
        epoch: e.usize("progress.epoch")?,
        step_in_epoch: e.usize("progress.step_in_epoch")?,
        global_step: e.u64("progress.global_step")?,
        order: order.into_iter().map(|i| i as usize).collect(),
        sums: LossSums::from_slice(&sums, e.u64("progress.sum_steps")?),
    };
    e.finish()?;
    Ok(state)
}

pub fn checkpoint_save<T: Element>(state: &CyTranState<T>, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_state(state)?)?;
    Ok(())
}

pub fn checkpoint_load<T: Element>(path: impl AsRef<Path>) -> Result<CyTranState<T>> {
    decode_state(&std::fs::read(path)?)
}
