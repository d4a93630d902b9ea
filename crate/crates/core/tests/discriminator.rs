use cytran::discriminator::{Discriminator, DiscriminatorConfig, PatchNorm};
use cytran::nn::{Binding, Mode, Pass};
use cytran::tensor::{grad_check_many, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Score-map side from the layer arithmetic: 4×4 kernels with padding 1,
/// strides (2, 2, 2, 1, 1) for the default stack.
fn extent_oracle(size: usize, strides: &[usize]) -> usize {
    strides.iter().fold(size, |s, &st| (s + 2 - 4) / st + 1)
}

fn scores(d: &Discriminator<f64>, x: Tensor<f64>) -> Tensor<f64> {
    let mut tape = Tape::new();
    let b = d.bind(&mut tape, false).unwrap();
    let x = tape.constant(x).unwrap();
    let mut pass = Pass::new(&mut tape, &b, Mode::Train);
    let y = d.discriminate(&mut pass, x).unwrap();
    tape.value(y).clone()
}

#[test]
fn score_map_extent_follows_stride_arithmetic() {
    let c = DiscriminatorConfig::default();
    assert_eq!(c.receptive_field(), 70);
    assert_eq!(extent_oracle(512, &[2, 2, 2, 1, 1]), 62);
    assert_eq!(c.output_extent(512).unwrap(), 62);
    assert_eq!(c.output_extent(128).unwrap(), extent_oracle(128, &[2, 2, 2, 1, 1]));
    assert_eq!(c.output_extent(70).unwrap(), extent_oracle(70, &[2, 2, 2, 1, 1]));
    assert!(c.output_extent(69).is_err());
    assert_eq!(DiscriminatorConfig::miniature().receptive_field(), 16);
}

#[test]
fn full_resolution_score_map() {
    let d: Discriminator<f32> = Discriminator::new(DiscriminatorConfig::default(), &mut rng(0)).unwrap();
    let mut tape = Tape::new();
    let b = d.bind(&mut tape, false).unwrap();
    let x = tape.constant(Tensor::randn(&[1, 1, 512, 512], 1.0, &mut rng(1))).unwrap();
    let mut pass = Pass::new(&mut tape, &b, Mode::Train);
    let y = d.discriminate(&mut pass, x).unwrap();
    assert_eq!(tape.shape(y), &[1, 1, 62, 62]);
}

#[test]
fn parameter_count_of_default_stack() {
    let d: Discriminator<f32> = Discriminator::new(DiscriminatorConfig::default(), &mut rng(0)).unwrap();
    let conv = |cin: usize, cout: usize| cout * cin * 16 + cout;
    let expected = conv(1, 64) + conv(64, 128) + conv(128, 256) + conv(256, 512) + conv(512, 1);
    assert_eq!(d.parameter_count(), expected);
}

#[test]
fn zero_input_zero_scores() {
    let d: Discriminator<f64> = Discriminator::new(DiscriminatorConfig::miniature(), &mut rng(2)).unwrap();
    let s = scores(&d, Tensor::zeros(&[1, 1, 32, 32]));
    assert!(s.data().iter().all(|&v| v == 0.0));
}

#[test]
fn rejects_inputs_below_receptive_field() {
    let d: Discriminator<f64> = Discriminator::new(DiscriminatorConfig::default(), &mut rng(3)).unwrap();
    let mut tape = Tape::new();
    let b = d.bind(&mut tape, false).unwrap();
    let x = tape.constant(Tensor::zeros(&[1, 1, 64, 64])).unwrap();
    let mut pass = Pass::new(&mut tape, &b, Mode::Train);
    let err = d.discriminate(&mut pass, x).unwrap_err();
    assert!(matches!(err, cytran::Error::Shape { .. }), "{err}");
}

#[test]
fn patch_local_perturbation_changes_only_covering_scores() {
    let config = DiscriminatorConfig { norm: PatchNorm::None, ..DiscriminatorConfig::default() };
    let d: Discriminator<f64> = Discriminator::new(config, &mut rng(4)).unwrap();
    let size = 96;
    let x = Tensor::randn(&[1, 1, size, size], 1.0, &mut rng(5));
    let base = scores(&d, x.clone());
    let mut bumped = x;
    let (py, px) = (5, 7);
    bumped.data_mut()[py * size + px] += 1.0;
    let moved = scores(&d, bumped);
    let side = base.shape()[3];
    // Output (i, j) sees input rows [8i - 23, 8i + 46]: jump 8, padding 1 at jumps 1, 2, 4, 8, 8.
    let covers = |o: usize, p: usize| {
        let lo = 8 * o as i64 - 23;
        (lo..lo + 70).contains(&(p as i64))
    };
    let mut changed = 0;
    for i in 0..side {
        for j in 0..side {
            let diff = (base.data()[i * side + j] - moved.data()[i * side + j]).abs();
            if covers(i, py) && covers(j, px) {
                changed += (diff > 0.0) as usize;
            } else {
                assert_eq!(diff, 0.0, "score ({i}, {j}) outside the patch changed");
            }
        }
    }
    assert!(changed > 0);
}

fn check(config: DiscriminatorConfig, size: usize, per_tensor: usize, seed: u64) {
    let d: Discriminator<f64> = Discriminator::new(config, &mut rng(seed)).unwrap();
    let mut inputs = vec![Tensor::randn(&[2, 1, size, size], 1.0, &mut rng(seed + 1))];
    inputs.extend(d.store().params().map(|(_, t)| t.clone()));
    let side = d.config().output_extent(size).unwrap();
    let weights = Tensor::randn(&[2, 1, side, side], 1.0, &mut rng(seed + 2));
    let mut probes = Vec::new();
    for (i, t) in inputs.iter().enumerate() {
        let n = t.numel();
        for j in 0..per_tensor.min(n) {
            probes.push((i, (j * 104_729 + 17 * i) % n));
        }
    }
    let report = grad_check_many(
        |tape, vars| {
            let b = Binding::from_vars(vars[1..].to_vec());
            let mut pass = Pass::new(tape, &b, Mode::Train);
            let y = d.discriminate(&mut pass, vars[0])?;
            let w = tape.constant(weights.clone())?;
            let yw = tape.mul(y, w)?;
            tape.sum(yw)
        },
        &inputs,
        Some(&probes),
        1e-5,
        1e-4,
    )
    .unwrap();
    assert!(report.passed(), "max rel error {:e}, flagged {:?}", report.max_rel_error, report.flagged);
}

#[test]
fn miniature_discriminator_gradcheck() {
    check(DiscriminatorConfig::miniature(), 16, 24, 10);
}

#[test]
fn full_depth_narrow_discriminator_gradcheck() {
    check(DiscriminatorConfig { base_width: 4, ..DiscriminatorConfig::default() }, 70, 4, 20);
}
