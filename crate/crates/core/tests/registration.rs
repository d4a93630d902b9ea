use cytran::data::{Phase, Volume};
use cytran::nn::{Binding, Mode, Pass};
use cytran::registration::{
    cascade_register, cascade_register_with, compose, load_field, load_regnet, save_field, save_regnet,
    train_registration, translate_then_register, warp, CascadeMode, DisplacementField, RegNet, RegNetConfig,
    RegTrainConfig, RegistrationModel, ZeroFieldModel,
};
use cytran::tensor::{grad_check_many, Tape, Tensor};
use cytran::translate::{IdentityTranslator, SliceTranslator};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_volume(depth: usize, size: usize, seed: u64) -> Volume {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Volume::new(depth, size, (0..depth * size * size).map(|_| rng.random_range(-1.0..1.0)).collect(), Phase::Native)
        .unwrap()
}

/// Smooth volume sampled from an analytic function, so interpolation error is small.
fn smooth_volume(depth: usize, size: usize, shift: [f32; 3]) -> Volume {
    let mut v = Vec::with_capacity(depth * size * size);
    for z in 0..depth {
        for y in 0..size {
            for x in 0..size {
                let (z, y, x) = (z as f32 + shift[0], y as f32 + shift[1], x as f32 + shift[2]);
                v.push((0.3 * x).sin() * (0.25 * y).cos() + 0.2 * (0.5 * z).sin());
            }
        }
    }
    Volume::new(depth, size, v, Phase::Native).unwrap()
}

fn smooth_field(grid: [usize; 3], amp: f32, seed: u64) -> DisplacementField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p: Vec<f32> = (0..9).map(|_| rng.random_range(0.0..std::f32::consts::TAU)).collect();
    DisplacementField::from_fn(grid, |z, y, x| {
        let (z, y, x) = (z as f32, y as f32, x as f32);
        [
            amp * (0.4 * y + p[0]).sin() * (0.3 * x + p[1]).cos() * 0.5,
            amp * (0.35 * x + p[2]).sin() + 0.2 * amp * (0.5 * z + p[3]).cos(),
            amp * (0.3 * y + p[4]).cos() * (0.45 * z + p[5]).sin(),
        ]
    })
}

fn max_diff(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

fn interior_max_diff(a: &DisplacementField, b: &DisplacementField, margin: usize) -> f32 {
    let [d, h, w] = a.grid;
    let vox = a.voxels();
    let mut m = 0.0f32;
    for k in 0..3 {
        for z in margin.min(d / 2)..d - margin.min(d / 2) {
            for y in margin..h - margin {
                for x in margin..w - margin {
                    let i = k * vox + (z * h + y) * w + x;
                    m = m.max((a.data[i] - b.data[i]).abs());
                }
            }
        }
    }
    m
}

#[test]
fn zero_field_is_exact_identity() {
    let v = random_volume(3, 10, 0);
    let out = warp(&v, &DisplacementField::for_volume(&v)).unwrap();
    assert_eq!(out.voxels, v.voxels);
}

#[test]
fn integer_shift_moves_voxels() {
    let v = random_volume(2, 6, 1);
    let out = warp(&v, &DisplacementField::constant([2, 6, 6], [0.0, 0.0, 1.0])).unwrap();
    for z in 0..2 {
        for y in 0..6 {
            for x in 0..6 {
                let src = (z * 6 + y) * 6 + (x + 1).min(5);
                assert_eq!(out.voxels[(z * 6 + y) * 6 + x], v.voxels[src]);
            }
        }
    }
}

#[test]
fn half_voxel_shift_of_ramp() {
    let ramp: Vec<f32> = (0..4 * 8 * 8).map(|i| ((i / 8) % 8) as f32).collect();
    let v = Volume::new(4, 8, ramp, Phase::Native).unwrap();
    let out = warp(&v, &DisplacementField::constant([4, 8, 8], [0.0, 0.5, 0.0])).unwrap();
    for (i, o) in out.voxels.iter().enumerate() {
        let y = (i / 8) % 8;
        let expected = if y == 7 { 7.0 } else { y as f32 + 0.5 };
        assert_eq!(*o, expected);
    }
}

#[test]
fn warp_rejects_grid_mismatch() {
    let v = random_volume(2, 6, 2);
    assert!(warp(&v, &DisplacementField::zeros([2, 6, 5])).is_err());
    assert!(compose(&DisplacementField::zeros([2, 6, 6]), &DisplacementField::zeros([3, 6, 6])).is_err());
}

#[test]
fn compose_with_zero_is_identity() {
    let f = smooth_field([4, 12, 12], 1.3, 3);
    let zero = DisplacementField::zeros(f.grid);
    assert_eq!(compose(&f, &zero).unwrap(), f);
    assert_eq!(compose(&zero, &f).unwrap(), f);
}

#[test]
fn constant_fields_add() {
    let g = [3, 8, 8];
    let a = DisplacementField::constant(g, [0.0, 0.25, -0.5]);
    let b = DisplacementField::constant(g, [0.0, 1.0, 0.75]);
    let c = compose(&a, &b).unwrap();
    assert!(max_diff(&c.data, &DisplacementField::constant(g, [0.0, 1.25, 0.25]).data) < 1e-6);
}

#[test]
fn composed_warp_matches_sequential_warps() {
    let size = 24;
    let v = smooth_volume(6, size, [0.0; 3]);
    let a = smooth_field([6, size, size], 0.8, 4);
    let b = smooth_field([6, size, size], 0.8, 5);
    let sequential = warp(&warp(&v, &a).unwrap(), &b).unwrap();
    let composed = warp(&v, &compose(&a, &b).unwrap()).unwrap();
    let mut worst = 0.0f32;
    for z in 1..5 {
        for y in 3..size - 3 {
            for x in 3..size - 3 {
                let i = (z * size + y) * size + x;
                worst = worst.max((sequential.voxels[i] - composed.voxels[i]).abs());
            }
        }
    }
    assert!(worst < 0.05, "{worst}");
}

#[test]
fn composition_is_associative_for_smooth_fields() {
    let g = [6, 20, 20];
    let (a, b, c) = (smooth_field(g, 0.5, 6), smooth_field(g, 0.5, 7), smooth_field(g, 0.5, 8));
    let left = compose(&compose(&a, &b).unwrap(), &c).unwrap();
    let right = compose(&a, &compose(&b, &c).unwrap()).unwrap();
    let err = interior_max_diff(&left, &right, 3);
    assert!(err < 2e-2, "{err}");
}

struct ConstantModel([f32; 3]);

impl RegistrationModel for ConstantModel {
    fn register(&self, moving: &Volume, _: &Volume) -> cytran::Result<DisplacementField> {
        Ok(DisplacementField::constant([moving.depth, moving.height, moving.width], self.0))
    }
}

#[test]
fn cascade_single_step_equals_direct_warp() {
    let (m, f) = (random_volume(2, 8, 9), random_volume(2, 8, 10));
    let model = ConstantModel([0.0, 0.3, -0.2]);
    let r = cascade_register(&model, &m, &f, 1).unwrap();
    let direct = model.register(&m, &f).unwrap();
    assert_eq!(r.net_field, direct);
    assert_eq!(r.warped.voxels, warp(&m, &direct).unwrap().voxels);
    assert_eq!(r.steps.len(), 1);
    assert!(cascade_register(&model, &m, &f, 0).is_err());
}

#[test]
fn cascade_accumulates_constant_steps() {
    let (m, f) = (smooth_volume(4, 16, [0.0; 3]), random_volume(4, 16, 11));
    let model = ConstantModel([0.0, 0.25, 0.5]);
    let r = cascade_register(&model, &m, &f, 4).unwrap();
    assert!(max_diff(&r.net_field.data, &DisplacementField::constant(r.net_field.grid, [0.0, 1.0, 2.0]).data) < 1e-5);
    assert_eq!(r.warped.voxels, warp(&m, &r.net_field).unwrap().voxels);
    let rec = cascade_register_with(&model, &m, &f, 4, CascadeMode::Recursive).unwrap();
    assert_eq!(rec.net_field, r.net_field);
    assert_eq!(rec.steps.len(), 4);
}

#[test]
fn zero_model_cascade_returns_moving() {
    let (m, f) = (random_volume(3, 8, 12), random_volume(3, 8, 13));
    let r = cascade_register(&ZeroFieldModel, &m, &f, 3).unwrap();
    assert_eq!(r.warped.voxels, m.voxels);
    assert_eq!(r.net_field.max_abs(), 0.0);
}

struct PhaseTranslator;

impl SliceTranslator for PhaseTranslator {
    fn phases(&self) -> Option<(Phase, Phase)> {
        Some((Phase::Arterial, Phase::Native))
    }
    fn translate_slice(&self, slice: &Tensor<f32>) -> cytran::Result<Tensor<f32>> {
        Ok(slice.clone())
    }
}

#[test]
fn pipeline_identity_cases() {
    let native = random_volume(2, 8, 14);
    let r = translate_then_register(&IdentityTranslator, &ZeroFieldModel, &native, &native, 2).unwrap();
    assert_eq!(r.aligned.voxels, native.voxels);
    assert_eq!(r.translated.voxels, native.voxels);

    let mut arterial = random_volume(2, 8, 15);
    arterial.phase = Phase::Arterial;
    let model = ConstantModel([0.0, 1.0, 0.0]);
    let r = translate_then_register(&PhaseTranslator, &model, &arterial, &native, 1).unwrap();
    assert_eq!(r.aligned.voxels, warp(&arterial, &r.field).unwrap().voxels);
    assert_eq!(r.translated.phase, Phase::Native);

    let mut venous = arterial.clone();
    venous.phase = Phase::Venous;
    assert!(translate_then_register(&PhaseTranslator, &model, &venous, &native, 1).is_err());
}

#[test]
fn field_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("f.cyck");
    let f = smooth_field([2, 8, 8], 1.0, 16);
    save_field(&f, &path).unwrap();
    assert_eq!(load_field(&path).unwrap(), f);
}

fn small_config() -> RegNetConfig {
    RegNetConfig { widths: [2, 3, 3], ..RegNetConfig::default() }
}

#[test]
fn regnet_predicts_full_resolution_field() {
    let net = RegNet::<f32>::new(RegNetConfig::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let (m, f) = (random_volume(4, 16, 17), random_volume(4, 16, 18));
    let field = net.register(&m, &f).unwrap();
    assert_eq!(field.grid, [4, 16, 16]);
    assert!(net.register(&random_volume(3, 16, 19), &random_volume(3, 16, 20)).is_err());
}

#[test]
fn registration_loss_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let net = RegNet::<f64>::new(small_config(), &mut rng).unwrap();
    let pair = Tensor::<f64>::randn(&[1, 2, 4, 4, 4], 1.0, &mut rng);
    let mut inputs = vec![pair];
    inputs.extend(net.store().params().map(|(_, t)| t.clone()));
    let n_inputs = inputs.len();
    let mut probes = Vec::new();
    for (i, t) in inputs.iter().enumerate() {
        for _ in 0..3 {
            probes.push((i, rng.random_range(0..t.numel())));
        }
    }
    let report = grad_check_many(
        |tape: &mut Tape<f64>, vars| {
            let binding = Binding::from_vars(vars[1..n_inputs].to_vec());
            let mut pass = Pass::new(tape, &binding, Mode::Train);
            let flow = net.forward(&mut pass, vars[0])?;
            let flow = tape.scale(flow, 3.0)?;
            cytran::registration::registration_loss(tape, vars[0], flow, 0.1)
        },
        &inputs,
        Some(&probes),
        1e-6,
        1e-4,
    )
    .unwrap();
    assert!(report.passed(), "max rel error {} flagged {:?}", report.max_rel_error, report.flagged);
    assert!(report.flagged.len() <= 2);
}

fn shifted_pairs(n: usize, size: usize) -> Vec<(Volume, Volume)> {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    (0..n)
        .map(|_| {
            let s = [0.0, rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5)];
            (smooth_volume(4, size, s), smooth_volume(4, size, [0.0; 3]))
        })
        .collect()
}

#[test]
fn training_reduces_registration_loss() {
    let mut net = RegNet::<f32>::new(small_config(), &mut ChaCha8Rng::seed_from_u64(23)).unwrap();
    let pairs = shifted_pairs(6, 12);
    let config = RegTrainConfig { steps: 60, learning_rate: 1e-2, smoothness: 0.01, seed: 1 };
    let losses = train_registration(&mut net, &pairs, &config).unwrap();
    assert_eq!(losses.len(), 60);
    let head: f64 = losses[..10].iter().sum::<f64>() / 10.0;
    let tail: f64 = losses[50..].iter().sum::<f64>() / 10.0;
    assert!(tail < 0.7 * head, "{head} -> {tail}");
    assert!(train_registration(&mut net, &[], &config).is_err());
}

#[test]
fn regnet_file_round_trip() {
    let net = RegNet::<f32>::new(small_config(), &mut ChaCha8Rng::seed_from_u64(24)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.cyck");
    save_regnet(&net, &path).unwrap();
    let back = load_regnet(&path).unwrap();
    assert_eq!(back.config(), net.config());
    let (m, f) = (random_volume(4, 8, 25), random_volume(4, 8, 26));
    assert_eq!(back.register(&m, &f).unwrap(), net.register(&m, &f).unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn warp_stays_within_input_range(seed in any::<u64>(), amp in 0.0f32..4.0) {
        let v = random_volume(3, 8, seed);
        let out = warp(&v, &smooth_field([3, 8, 8], amp, seed ^ 1)).unwrap();
        let lo = v.voxels.iter().cloned().fold(f32::INFINITY, f32::min);
        let hi = v.voxels.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        prop_assert!(out.voxels.iter().all(|&o| o >= lo - 1e-6 && o <= hi + 1e-6));
    }

    #[test]
    fn constant_integer_shift_composes(dy in -2i32..=2, dx in -2i32..=2, ey in -2i32..=2, ex in -2i32..=2) {
        let g = [2, 10, 10];
        let a = DisplacementField::constant(g, [0.0, dy as f32, dx as f32]);
        let b = DisplacementField::constant(g, [0.0, ey as f32, ex as f32]);
        let c = compose(&a, &b).unwrap();
        let sum = DisplacementField::constant(g, [0.0, (dy + ey) as f32, (dx + ex) as f32]);
        prop_assert_eq!(interior_max_diff(&c, &sum, 4), 0.0);
    }
}
