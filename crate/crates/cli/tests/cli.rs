use cytran::data::{load_volume, volume_file_name, Phase};
use cytran::registration::{cascade_register, load_regnet};
use std::path::Path;
use std::process::{Command, Output};

fn cytran(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cytran")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn phantoms(dir: &Path, extra: &[&str]) {
    let mut args = vec!["phantom-gen", "--out", s(dir), "--count", "3", "--size", "16", "--depth", "4", "--seed", "5"];
    args.extend_from_slice(extra);
    let o = cytran(&args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

const TINY: &str = "\
# miniature models for fast runs
epochs = 2
batch_size = 2
learning_rate = 0.001
generator.base_width = 4
generator.transformer_channels = 16
generator.head_dim = 8
generator.mlp_width = 64
discriminator.base_width = 8
discriminator.n_layers = 1
";

#[test]
fn usage_errors_and_help() {
    assert_eq!(code(&cytran(&["--help"])), 0);
    assert_eq!(code(&cytran(&["--version"])), 0);
    assert_eq!(code(&cytran(&["phantom-gen", "--bogus"])), 1);
    assert_eq!(code(&cytran(&["no-such-command"])), 1);
    assert_eq!(code(&cytran(&["evaluate", "--src", "a", "--tgt", "b", "--report", "r"])), 1);
}

#[test]
fn phantom_generation_is_deterministic() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    phantoms(a.path(), &["--misalign", "1.5"]);
    phantoms(b.path(), &["--misalign", "1.5"]);
    for i in 0..3 {
        for phase in Phase::ALL {
            let name = volume_file_name(i, phase);
            let bytes = std::fs::read(a.path().join(&name)).unwrap();
            assert_eq!(bytes, std::fs::read(b.path().join(&name)).unwrap());
            assert_eq!(load_volume(a.path().join(&name)).unwrap().phase, phase);
        }
    }
    assert_eq!(code(&cytran(&["phantom-gen", "--out", s(a.path()), "--count", "0"])), 3);
}

#[test]
fn identity_evaluation_and_format_errors() {
    let dir = tempfile::tempdir().unwrap();
    phantoms(dir.path(), &[]);
    let vol = dir.path().join(volume_file_name(0, Phase::Native));
    let report = dir.path().join("report.csv");
    let o = cytran(&["evaluate", "--identity", "--src", s(&vol), "--tgt", s(&vol), "--report", s(&report)]);
    assert_eq!(code(&o), 0);
    let text = std::fs::read_to_string(&report).unwrap();
    assert!(text.lines().last().unwrap().starts_with("mean,0.000000000,0.000000000,1.000000000"), "{text}");

    let missing = dir.path().join("missing.cytv");
    assert_eq!(code(&cytran(&["evaluate", "--identity", "--src", s(&missing), "--tgt", s(&vol), "--report", s(&report)])), 2);
    let corrupt = dir.path().join("corrupt.cytv");
    std::fs::write(&corrupt, b"CYTVgarbage").unwrap();
    assert_eq!(code(&cytran(&["evaluate", "--identity", "--src", s(&corrupt), "--tgt", s(&vol), "--report", s(&report)])), 2);
    let other = tempfile::tempdir().unwrap();
    let o = cytran(&["phantom-gen", "--out", s(other.path()), "--count", "1", "--size", "24", "--depth", "4"]);
    assert_eq!(code(&o), 0);
    let big = other.path().join(volume_file_name(0, Phase::Native));
    assert_eq!(code(&cytran(&["evaluate", "--identity", "--src", s(&big), "--tgt", s(&vol), "--report", s(&report)])), 3);
}

#[test]
fn train_translate_and_resume() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    phantoms(&data, &[]);
    let config = dir.path().join("tiny.conf");
    std::fs::write(&config, TINY).unwrap();
    let ckpt = dir.path().join("model.cyck");
    let log = dir.path().join("loss.log");
    let o = cytran(&[
        "train", "--data", s(&data), "--pair", "native:arterial", "--config", s(&config), "--out", s(&ckpt), "--log",
        s(&log), "--max-steps", "4",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8(o.stdout).unwrap();
    let lines: Vec<&str> = stdout.lines().collect();
    assert_eq!(lines.len(), 4);
    assert_eq!(lines[0].split(", ").count(), 6);
    assert!(lines[3].starts_with("0, 3, "), "{}", lines[3]);
    assert_eq!(std::fs::read_to_string(&log).unwrap(), stdout);

    let o = cytran(&["train", "--data", s(&data), "--out", s(&ckpt), "--resume", s(&ckpt), "--max-steps", "2"]);
    assert_eq!(code(&o), 0);
    let resumed = String::from_utf8(o.stdout).unwrap();
    assert!(resumed.lines().next().unwrap().starts_with("0, 4, "));
    assert!(resumed.lines().nth(1).unwrap().starts_with("0, 5, "));

    let native = data.join(volume_file_name(1, Phase::Native));
    let out = dir.path().join("translated.cytv");
    let o = cytran(&["translate", "--ckpt", s(&ckpt), "--direction", "x2y", "--in", s(&native), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let t = load_volume(&out).unwrap();
    assert_eq!(t.phase, Phase::Arterial);
    assert_eq!((t.depth, t.size()), (4, 16));
    let o = cytran(&["translate", "--ckpt", s(&ckpt), "--direction", "y2x", "--in", s(&native), "--out", s(&out)]);
    assert_eq!(code(&o), 3);
}

#[test]
fn training_rejects_bad_configuration() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    phantoms(&data, &[]);
    let ckpt = dir.path().join("m.cyck");
    let config = dir.path().join("bad.conf");
    std::fs::write(&config, "lambda_cycle = 1\nno_such_key = 3\n").unwrap();
    assert_eq!(code(&cytran(&["train", "--data", s(&data), "--config", s(&config), "--out", s(&ckpt)])), 3);
    std::fs::write(&config, TINY).unwrap();
    let o = cytran(&["train", "--data", s(&data), "--config", s(&config), "--set", "lambda_cycle=-1", "--out", s(&ckpt)]);
    assert_eq!(code(&o), 3);
    let o = cytran(&["train", "--data", s(&data), "--config", s(&config), "--pair", "native:native", "--out", s(&ckpt)]);
    assert_eq!(code(&o), 3);
    assert!(!ckpt.exists());
}

#[test]
fn register_matches_library_cascade() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    phantoms(&data, &["--misalign", "1.0", "--no-contrast"]);
    let model = dir.path().join("reg.cyck");
    let o = cytran(&["train-registration", "--data", s(&data), "--out", s(&model), "--steps", "5"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(String::from_utf8(o.stdout).unwrap().lines().count(), 5);

    let moving = data.join(volume_file_name(0, Phase::Venous));
    let fixed = data.join(volume_file_name(0, Phase::Native));
    let out = dir.path().join("warped.cytv");
    let o = cytran(&[
        "register", "--moving", s(&moving), "--fixed", s(&fixed), "--cascades", "1", "--model", s(&model), "--out", s(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let net = load_regnet(&model).unwrap();
    let expected = cascade_register(&net, &load_volume(&moving).unwrap(), &load_volume(&fixed).unwrap(), 1).unwrap();
    assert_eq!(load_volume(&out).unwrap(), expected.warped);
    let o = cytran(&[
        "register", "--moving", s(&moving), "--fixed", s(&fixed), "--cascades", "0", "--model", s(&model), "--out", s(&out),
    ]);
    assert_eq!(code(&o), 3);
}

#[test]
fn self_check_reports_parameter_count() {
    let o = cytran(&["self-check", "--quick"]);
    let stdout = String::from_utf8(o.stdout.clone()).unwrap();
    assert_eq!(code(&o), 0, "{stdout}");
    let line = stdout.lines().find(|l| l.contains("parameter count")).unwrap();
    assert!(line.starts_with("ok") && line.contains("703329"), "{line}");
    assert!(stdout.lines().all(|l| l.starts_with("ok")), "{stdout}");
}
