use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};
use cytran::data::{
    dataset_patients, generate_cohort, load_volume, save_volume, volume_file_name, CohortOptions, Phase, Volume,
};
use cytran::discriminator::DiscriminatorConfig;
use cytran::generator::GeneratorConfig;
use cytran::metrics::{evaluate_translation, SsimParams};
use cytran::registration::{
    cascade_register, load_regnet, save_field, save_regnet, train_registration, translate_then_register, RegNet,
    RegNetConfig, RegTrainConfig,
};
use cytran::selfcheck;
use cytran::training::{checkpoint_load, checkpoint_save, parse_domains, CyTranState, TrainConfig};
use cytran::translate::{Direction, GeneratorTranslator, IdentityTranslator, SliceTranslator};
use cytran::{Error, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser, Debug)]
#[command(name = "cytran", version, about = "Contrast-phase translation and registration for CT volumes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write synthetic triphasic phantom volumes.
    PhantomGen(PhantomGenArgs),
    /// Train a CyTran generator pair on a dataset directory.
    Train(TrainArgs),
    /// Translate a volume with a trained generator.
    Translate(TranslateArgs),
    /// Compare a (translated) source volume with a target volume.
    Evaluate(EvaluateArgs),
    /// Register a moving volume to a fixed one with a recursive cascade.
    Register(RegisterArgs),
    /// Train a registration network on a dataset directory.
    TrainRegistration(TrainRegistrationArgs),
    /// Run the parameter-count, shape and gradient suites.
    SelfCheck(SelfCheckArgs),
}

#[derive(Args, Debug)]
struct PhantomGenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    count: usize,
    #[arg(long, default_value_t = 128)]
    size: usize,
    #[arg(long, default_value_t = 8)]
    depth: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Peak displacement of the contrast phases, in voxels.
    #[arg(long, default_value_t = 0.0)]
    misalign: f64,
    #[arg(long, default_value_t = 0.002)]
    noise: f64,
    /// Render every phase without contrast uptake.
    #[arg(long)]
    no_contrast: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Domains as `x:y`, e.g. `native:venous`.
    #[arg(long)]
    pair: Option<String>,
    /// Flat `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Override a configuration key (repeatable), e.g. `--set lambda_cycle=2`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Continue from a checkpoint instead of initializing new models.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Append loss lines to this file as well as standard output.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Stop after this many optimization steps in this invocation.
    #[arg(long)]
    max_steps: Option<u64>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum DirectionArg {
    X2y,
    Y2x,
}

impl From<DirectionArg> for Direction {
    fn from(d: DirectionArg) -> Self {
        match d {
            DirectionArg::X2y => Direction::XToY,
            DirectionArg::Y2x => Direction::YToX,
        }
    }
}

#[derive(Args, Debug)]
struct TranslateArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, value_enum, default_value = "x2y")]
    direction: DirectionArg,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
#[command(group(ArgGroup::new("model").required(true).args(["ckpt", "identity"])))]
struct EvaluateArgs {
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Evaluate the untranslated source (no-transfer baseline).
    #[arg(long)]
    identity: bool,
    #[arg(long, value_enum, default_value = "x2y")]
    direction: DirectionArg,
    #[arg(long)]
    src: PathBuf,
    #[arg(long)]
    tgt: PathBuf,
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args, Debug)]
struct RegisterArgs {
    #[arg(long)]
    moving: PathBuf,
    #[arg(long)]
    fixed: PathBuf,
    #[arg(long, default_value_t = 1)]
    cascades: usize,
    /// Trained registration network (see `train-registration`).
    #[arg(long)]
    model: PathBuf,
    /// Translate the moving volume to the fixed volume's phase before
    /// estimating the field.
    #[arg(long)]
    translate_ckpt: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "y2x")]
    direction: DirectionArg,
    #[arg(long)]
    out: PathBuf,
    /// Also write the net displacement field.
    #[arg(long)]
    field: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainRegistrationArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "venous")]
    moving_phase: String,
    #[arg(long, default_value = "native")]
    fixed_phase: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    steps: usize,
    #[arg(long, default_value_t = 1e-3)]
    learning_rate: f64,
    #[arg(long, default_value_t = 0.1)]
    smoothness: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct SelfCheckArgs {
    /// Elements probed per parameter tensor in the gradient suites.
    #[arg(long, default_value_t = 3)]
    probes: usize,
    /// Skip the 512×512 shape pass.
    #[arg(long)]
    quick: bool,
}

/// A failure with the process exit code it maps to.
#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Format { .. } | Error::Version { .. } | Error::Io(_) => 2,
            Error::Shape { .. } | Error::InvalidArgument(_) | Error::Empty(_) => 3,
            Error::NonFinite { .. } => 4,
        };
        Failure { code, message: e.to_string() }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e).into()
    }
}

fn validation(message: impl Into<String>) -> Failure {
    Failure { code: 3, message: message.into() }
}

type Outcome = std::result::Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::PhantomGen(a) => phantom_gen(a),
        Command::Train(a) => train(a),
        Command::Translate(a) => translate(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Register(a) => register(a),
        Command::TrainRegistration(a) => train_registration_cmd(a),
        Command::SelfCheck(a) => self_check(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn phantom_gen(a: PhantomGenArgs) -> Outcome {
    if a.count == 0 {
        return Err(validation("--count must be at least 1"));
    }
    let options = CohortOptions { image_size: a.size, depth: a.depth, noise_sigma: a.noise, misalignment: a.misalign, contrast: !a.no_contrast };
    let cohort = generate_cohort(&options, a.count, a.seed)?;
    fs::create_dir_all(&a.out)?;
    for (i, triple) in cohort.iter().enumerate() {
        for phase in Phase::ALL {
            save_volume(triple.phase(phase), a.out.join(volume_file_name(i, phase)))?;
        }
    }
    log::info!("wrote {} phantom triples to {}", a.count, a.out.display());
    Ok(())
}

type Slices = Vec<Tensor<f32>>;

/// Slices of the `x` and `y` phases of every patient in `dir`, and their side length.
fn load_domains(dir: &Path, (x, y): (Phase, Phase)) -> Result<(Slices, Slices, usize), Failure> {
    let patients = dataset_patients(dir)?;
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    let mut size = None;
    for paths in &patients {
        for (phase, out) in [(x, &mut xs), (y, &mut ys)] {
            let v = load_volume(&paths[phase as usize])?;
            if v.phase != phase {
                return Err(validation(format!(
                    "{} is tagged {}, expected {}",
                    paths[phase as usize].display(),
                    v.phase.name(),
                    phase.name()
                )));
            }
            if *size.get_or_insert(v.size()) != v.size() {
                return Err(validation("dataset volumes have different slice sizes"));
            }
            out.extend(v.slices());
        }
    }
    Ok((xs, ys, size.unwrap_or(0)))
}

fn train_config(a: &TrainArgs) -> Result<TrainConfig, Failure> {
    let mut config = TrainConfig::default();
    if let Some(path) = &a.config {
        config.apply_text(&fs::read_to_string(path)?)?;
    }
    for kv in &a.overrides {
        let (k, v) = kv.split_once('=').ok_or_else(|| validation(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        config.set(k.trim(), v)?;
    }
    if let Some(pair) = &a.pair {
        config.domains = parse_domains(pair)?;
    }
    if let Some(v) = a.epochs {
        config.epochs = v;
    }
    if let Some(v) = a.seed {
        config.seed = v;
    }
    if let Some(v) = a.learning_rate {
        config.learning_rate = v;
    }
    if let Some(v) = a.batch_size {
        config.batch_size = v;
    }
    Ok(config)
}

fn train(a: TrainArgs) -> Outcome {
    let mut state: CyTranState<f32> = match &a.resume {
        Some(path) => checkpoint_load(path)?,
        None => {
            let config = train_config(&a)?;
            let (xs, _, size) = load_domains(&a.data, config.domains)?;
            if xs.is_empty() {
                return Err(validation("dataset holds no slices"));
            }
            let config = TrainConfig { image_size: size, ..config };
            config.validate()?;
            CyTranState::new(config)?
        }
    };
    let (xs, ys, size) = load_domains(&a.data, state.config.domains)?;
    if size != state.config.image_size {
        return Err(validation(format!(
            "dataset slices are {size}×{size}, the model was built for {}",
            state.config.image_size
        )));
    }
    let mut log_file = match &a.log {
        Some(path) => Some(fs::OpenOptions::new().create(true).append(true).open(path)?),
        None => None,
    };
    let stdout = std::io::stdout();
    let mut steps = 0u64;
    while state.progress.epoch < state.config.epochs && a.max_steps.is_none_or(|m| steps < m) {
        let (step, summary) = state.train_step(&xs, &ys)?;
        steps += 1;
        if !step.losses.total().is_finite() {
            return Err(Error::NonFinite { op: "train" }.into());
        }
        let line = step.log_line();
        writeln!(stdout.lock(), "{line}")?;
        if let Some(f) = log_file.as_mut() {
            writeln!(f, "{line}")?;
        }
        if let Some(s) = summary {
            log::info!(
                "epoch {} done: cycle {:.6}, total {:.6}, disc_x {:.6}, disc_y {:.6}",
                s.epoch,
                s.cycle,
                s.total,
                s.disc_x,
                s.disc_y
            );
            let every = state.config.checkpoint_every;
            if every > 0 && (s.epoch + 1) % every == 0 {
                checkpoint_save(&state, &a.out)?;
            }
        }
    }
    checkpoint_save(&state, &a.out)?;
    log::info!("saved checkpoint after {} steps to {}", state.progress.global_step, a.out.display());
    Ok(())
}

fn translator(ckpt: &Path, direction: DirectionArg) -> Result<GeneratorTranslator, Failure> {
    let state: CyTranState<f32> = checkpoint_load(ckpt)?;
    Ok(GeneratorTranslator::from_state(&state, direction.into()))
}

fn translate(a: TranslateArgs) -> Outcome {
    let t = translator(&a.ckpt, a.direction)?;
    let volume = load_volume(&a.input)?;
    save_volume(&t.translate_volume(&volume)?, &a.out)?;
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> Outcome {
    let (src, tgt) = (load_volume(&a.src)?, load_volume(&a.tgt)?);
    let report = match &a.ckpt {
        Some(ckpt) => evaluate_translation(&translator(ckpt, a.direction)?, &src, &tgt, &SsimParams::default())?,
        None => evaluate_translation(&IdentityTranslator, &src, &tgt, &SsimParams::default())?,
    };
    fs::write(&a.report, report.to_text())?;
    let m = &report.mean;
    println!("mae {:.9} rmse {:.9} ssim {:.9}", m.mae, m.rmse, m.ssim);
    Ok(())
}

fn register(a: RegisterArgs) -> Outcome {
    if a.cascades == 0 {
        return Err(validation("--cascades must be at least 1"));
    }
    let (moving, fixed) = (load_volume(&a.moving)?, load_volume(&a.fixed)?);
    let model = load_regnet(&a.model)?;
    let (out, field) = match &a.translate_ckpt {
        Some(ckpt) => {
            let t = translator(ckpt, a.direction)?;
            let r = translate_then_register(&t, &model, &moving, &fixed, a.cascades)?;
            (r.aligned, r.field)
        }
        None => {
            let r = cascade_register(&model, &moving, &fixed, a.cascades)?;
            (r.warped, r.net_field)
        }
    };
    save_volume(&out, &a.out)?;
    if let Some(path) = &a.field {
        save_field(&field, path)?;
    }
    Ok(())
}

fn train_registration_cmd(a: TrainRegistrationArgs) -> Outcome {
    let (moving_phase, fixed_phase) = (Phase::parse(&a.moving_phase)?, Phase::parse(&a.fixed_phase)?);
    let pairs = dataset_patients(&a.data)?
        .iter()
        .map(|p| Ok((load_volume(&p[moving_phase as usize])?, load_volume(&p[fixed_phase as usize])?)))
        .collect::<Result<Vec<(Volume, Volume)>, Failure>>()?;
    let mut net = RegNet::new(RegNetConfig::default(), &mut ChaCha8Rng::seed_from_u64(a.seed))?;
    let config = RegTrainConfig { steps: a.steps, learning_rate: a.learning_rate, smoothness: a.smoothness, seed: a.seed };
    let losses = train_registration(&mut net, &pairs, &config)?;
    if losses.iter().any(|l| !l.is_finite()) {
        return Err(Error::NonFinite { op: "train-registration" }.into());
    }
    for (i, l) in losses.iter().enumerate() {
        println!("{i}, {l:.8e}");
    }
    save_regnet(&net, &a.out)?;
    Ok(())
}

fn self_check(a: SelfCheckArgs) -> Outcome {
    let mut failures = 0;
    let mut report = |name: &str, ok: bool, detail: String| {
        println!("{} {name}: {detail}", if ok { "ok  " } else { "FAIL" });
        if !ok {
            failures += 1;
        }
    };

    let config = GeneratorConfig::default();
    let built: cytran::generator::Generator<f32> =
        cytran::generator::Generator::new(config.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
    let count = built.parameter_count();
    let closed = selfcheck::generator_parameters(&config);
    report(
        "parameter count",
        count == selfcheck::DEFAULT_GENERATOR_PARAMETERS && closed == count,
        format!("{count} (expected {}, layer arithmetic {closed})", selfcheck::DEFAULT_GENERATOR_PARAMETERS),
    );

    let sizes: &[usize] = if a.quick { &[16, 64, 128] } else { &[16, 64, 128, 512] };
    for &size in sizes {
        let s = selfcheck::generator_shapes(size, 0)?;
        let (g, n_q, n_k) = (size / 8, (size / 8).pow(2), (size / 16).pow(2));
        let ok = s.output == s.input
            && s.tokens == [1, 128, g, g]
            && s.query == [1, n_q, 64]
            && s.key == [1, n_k, 64]
            && s.value == [1, n_k, 64]
            && s.head_concat == [1, 384, n_q];
        report(
            &format!("shapes at {size}"),
            ok,
            format!("tokens {:?}, Q {:?}, K {:?}, concat {:?}, output {:?}", s.tokens, s.query, s.key, s.head_concat, s.output),
        );
    }

    let g = selfcheck::generator_gradients(17, a.probes)?;
    report(
        "generator gradients",
        g.passed(),
        format!("max relative error {:.3e} over {} probes, {} kinks", g.max_rel_error, g.elements.len(), g.flagged.len()),
    );
    let d = selfcheck::discriminator_gradients(DiscriminatorConfig::miniature(), 16, 10, 8 * a.probes)?;
    report(
        "discriminator gradients",
        d.passed(),
        format!("max relative error {:.3e} over {} probes, {} kinks", d.max_rel_error, d.elements.len(), d.flagged.len()),
    );

    if failures > 0 {
        return Err(validation(format!("{failures} self-check suite(s) failed")));
    }
    Ok(())
}
