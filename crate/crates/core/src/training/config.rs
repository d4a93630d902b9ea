use crate::data::Phase;
use crate::discriminator::{DiscriminatorConfig, PatchNorm};
use crate::error::{Error, Result};
use crate::generator::GeneratorConfig;
use crate::training::{AdamConfig, LsganLabels};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lambda_cycle: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub image_size: usize,
    /// Capacity of the discriminator image history; 0 disables it.
    pub history_buffer: usize,
    /// Epochs between periodic checkpoints; 0 disables them.
    pub checkpoint_every: usize,
    /// Probability of a horizontal flip per training slice.
    pub augmentation_rate: f64,
    pub paper_literal_lsgan: bool,
    /// Phases of the X and Y domains; G maps X to Y.
    pub domains: (Phase, Phase),
    /// Generator architecture; its image size follows `image_size`.
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_cycle: 1.0,
            learning_rate: 1e-4,
            epochs: 70,
            batch_size: 2,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            image_size: 512,
            history_buffer: 0,
            checkpoint_every: 1,
            augmentation_rate: 0.0,
            paper_literal_lsgan: false,
            domains: (Phase::Native, Phase::Venous),
            generator: GeneratorConfig::default(),
            discriminator: DiscriminatorConfig::default(),
        }
    }
}

fn parse<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
    value.parse().map_err(|_| Error::InvalidArgument(format!("{key}: cannot parse {value:?}")))
}

/// Parses `x:y`, e.g. `native:venous`.
pub fn parse_domains(text: &str) -> Result<(Phase, Phase)> {
    let (x, y) = text
        .split_once(':')
        .ok_or_else(|| Error::InvalidArgument(format!("domains: expected `x:y`, got {text:?}")))?;
    Ok((Phase::parse(x.trim())?, Phase::parse(y.trim())?))
}

impl TrainConfig {
    pub const KEYS: &'static [&'static str] = &[
        "lambda_cycle",
        "learning_rate",
        "epochs",
        "batch_size",
        "seed",
        "beta1",
        "beta2",
        "eps",
        "image_size",
        "history_buffer",
        "checkpoint_every",
        "augmentation_rate",
        "paper_literal_lsgan",
        "domains",
        "generator.base_width",
        "generator.transformer_channels",
        "generator.heads",
        "generator.head_dim",
        "generator.mlp_width",
        "generator.blocks",
        "discriminator.base_width",
        "discriminator.n_layers",
        "discriminator.slope",
        "discriminator.norm",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "lambda_cycle" => self.lambda_cycle = parse(key, v)?,
            "learning_rate" => self.learning_rate = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "beta1" => self.beta1 = parse(key, v)?,
            "beta2" => self.beta2 = parse(key, v)?,
            "eps" => self.eps = parse(key, v)?,
            "image_size" => self.image_size = parse(key, v)?,
            "history_buffer" => self.history_buffer = if v == "off" { 0 } else { parse(key, v)? },
            "checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            "augmentation_rate" => self.augmentation_rate = parse(key, v)?,
            "paper_literal_lsgan" => self.paper_literal_lsgan = parse(key, v)?,
            "domains" => self.domains = parse_domains(v)?,
            "generator.base_width" => self.generator.base_width = parse(key, v)?,
            "generator.transformer_channels" => self.generator.transformer_channels = parse(key, v)?,
            "generator.heads" => self.generator.heads = parse(key, v)?,
            "generator.head_dim" => self.generator.head_dim = parse(key, v)?,
            "generator.mlp_width" => self.generator.mlp_width = parse(key, v)?,
            "generator.blocks" => self.generator.blocks = parse(key, v)?,
            "discriminator.base_width" => self.discriminator.base_width = parse(key, v)?,
            "discriminator.n_layers" => self.discriminator.n_layers = parse(key, v)?,
            "discriminator.slope" => self.discriminator.slope = parse(key, v)?,
            "discriminator.norm" => {
                self.discriminator.norm = match v {
                    "instance" => PatchNorm::Instance,
                    "none" => PatchNorm::None,
                    _ => return Err(Error::InvalidArgument(format!("{key}: expected instance or none, got {v:?}"))),
                }
            }
            _ => return Err(Error::InvalidArgument(format!("unknown configuration key {key:?}"))),
        }
        Ok(())
    }

    /// Applies flat `key = value` lines over `self`. Blank lines and lines
    /// starting with `#` are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::InvalidArgument(format!("line {}: expected `key = value`", i + 1)))?;
            self.set(key.trim(), value).map_err(|e| Error::InvalidArgument(format!("line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut config = Self::default();
        config.apply_text(text)?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if !(self.lambda_cycle >= 0.0 && self.lambda_cycle.is_finite()) {
            return bad(format!("lambda_cycle must be finite and non-negative, got {}", self.lambda_cycle));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return bad("Adam betas must lie in [0, 1) and eps must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.augmentation_rate) {
            return bad(format!("augmentation_rate must lie in [0, 1], got {}", self.augmentation_rate));
        }
        if self.domains.0 == self.domains.1 {
            return bad(format!("domains must be two different phases, got {} twice", self.domains.0.name()));
        }
        self.generator_config().validate()?;
        self.discriminator.output_extent(self.image_size).map(|_| ())
    }

    pub fn generator_config(&self) -> GeneratorConfig {
        self.generator.clone().with_image_size(self.image_size)
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { learning_rate: self.learning_rate, beta1: self.beta1, beta2: self.beta2, eps: self.eps }
    }

    pub fn labels(&self) -> LsganLabels {
        if self.paper_literal_lsgan {
            LsganLabels::PaperLiteral
        } else {
            LsganLabels::Standard
        }
    }

    /// Renders every key in [`Self::KEYS`] order; parsing the text yields `self`.
    pub fn to_text(&self) -> String {
        let norm = match self.discriminator.norm {
            PatchNorm::Instance => "instance",
            PatchNorm::None => "none",
        };
        let values: Vec<String> = vec![
            self.lambda_cycle.to_string(),
            self.learning_rate.to_string(),
            self.epochs.to_string(),
            self.batch_size.to_string(),
            self.seed.to_string(),
            self.beta1.to_string(),
            self.beta2.to_string(),
            self.eps.to_string(),
            self.image_size.to_string(),
            self.history_buffer.to_string(),
            self.checkpoint_every.to_string(),
            self.augmentation_rate.to_string(),
            self.paper_literal_lsgan.to_string(),
            format!("{}:{}", self.domains.0.name(), self.domains.1.name()),
            self.generator.base_width.to_string(),
            self.generator.transformer_channels.to_string(),
            self.generator.heads.to_string(),
            self.generator.head_dim.to_string(),
            self.generator.mlp_width.to_string(),
            self.generator.blocks.to_string(),
            self.discriminator.base_width.to_string(),
            self.discriminator.n_layers.to_string(),
            self.discriminator.slope.to_string(),
            norm.to_string(),
        ];
        Self::KEYS.iter().zip(values).map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}
