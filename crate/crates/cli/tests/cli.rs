use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use palgan_core::palette::PaletteFile;

fn palgan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_palgan"))
        .args(args)
        .env("PALGAN_NUM_THREADS", "1")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const TOY: &str = "preset = \"toy\"\nbatch_size = 2\ncrop_size = 16\nepochs = 2\nseed = 5\ncheckpoint_interval = 2\nlog_interval = 1\n";

struct Fixture {
    _dir: tempfile::TempDir,
    data: PathBuf,
    run: PathBuf,
    config: PathBuf,
}

impl Fixture {
    fn checkpoint(&self) -> PathBuf {
        self.run.join("latest.palg")
    }
}

/// A corpus and a short toy run shared by the tests below.
fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        let run = dir.path().join("run");
        let config = dir.path().join("toy.toml");
        std::fs::write(&config, TOY).unwrap();
        let o = palgan(&["synth", "--out", s(&data), "--count", "8", "--size", "24", "--seed", "1"]);
        assert!(o.status.success(), "{}", stderr(&o));
        let o = palgan(&["train", "--config", s(&config), "--data", s(&data), "--out", s(&run), "--deterministic"]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        Fixture {
            _dir: dir,
            data,
            run,
            config,
        }
    })
}

fn write_gray(path: &Path, w: u32, h: u32) {
    image::GrayImage::from_fn(w, h, |x, y| image::Luma([((x * 7 + y * 3) % 256) as u8])).save(path).unwrap();
}

#[test]
fn train_writes_checkpoints_and_log() {
    let f = fixture();
    assert!(f.checkpoint().exists());
    assert!(f.run.join("checkpoint_00000004.palg").exists());
    let log = std::fs::read_to_string(f.run.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 9);
    assert!(f.run.join("config.toml").exists());
}

#[test]
fn missing_data_root_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nowhere");
    let o = palgan(&["train", "--data", s(&missing), "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains(s(&missing)));
}

#[test]
fn resume_continues_from_recorded_step() {
    let f = fixture();
    let out = tempfile::tempdir().unwrap();
    let ck = f.run.join("checkpoint_00000002.palg");
    let o = palgan(&["train", "--data", s(&f.data), "--out", s(out.path()), "--resume", s(&ck)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let log = std::fs::read_to_string(out.path().join("train_log.csv")).unwrap();
    let steps: Vec<&str> = log.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(steps, ["2", "3", "4", "5", "6", "7"]);
    // same run, same bytes
    let a = std::fs::read(out.path().join("latest.palg")).unwrap();
    let b = std::fs::read(f.checkpoint()).unwrap();
    assert_eq!(a, b);

    let o = palgan(&[
        "train", "--config", s(&f.config), "--data", s(&f.data), "--out", s(out.path()), "--resume", s(&ck),
    ]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn colorize_keeps_size_and_samples_differ() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("gray.png");
    write_gray(&input, 37, 21);
    let out = dir.path().join("out");
    let o = palgan(&["colorize", "--checkpoint", s(&f.checkpoint()), "--out", s(&out), s(&input)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let img = image::open(out.join("gray_color.png")).unwrap();
    assert_eq!((img.width(), img.height()), (37, 21));

    let run = |out: &Path| {
        let o = palgan(&[
            "colorize", "--checkpoint", s(&f.checkpoint()), "--out", s(out), "--samples", "3", "--seed", "9",
            s(&input),
        ]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        (0..3)
            .map(|k| std::fs::read(out.join(format!("gray_color_{k}.png"))).unwrap())
            .collect::<Vec<_>>()
    };
    let a = run(&dir.path().join("a"));
    let b = run(&dir.path().join("b"));
    assert_eq!(a, b);
    assert!(a[0] != a[1] || a[1] != a[2]);

    let o = palgan(&["colorize", "--checkpoint", s(&input), "--out", s(&out), s(&input)]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn colorize_ref_is_reproducible_and_checks_bins() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let input = f.data.join("synth_00000.png");
    let reference = f.data.join("synth_00001.png");
    let run = |out: &Path, r: &Path| {
        palgan(&[
            "colorize-ref", "--checkpoint", s(&f.checkpoint()), "--reference", s(r), "--out", s(out), s(&input),
        ])
    };
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(run(&a, &reference).status.code(), Some(0));
    assert_eq!(run(&b, &reference).status.code(), Some(0));
    let bytes = |d: &Path| std::fs::read(d.join("synth_00000_ref.png")).unwrap();
    assert_eq!(bytes(&a), bytes(&b));

    let pal = dir.path().join("small.json");
    let o = palgan(&["palette", "--out", s(dir.path()), "--bins", "64", s(&reference)]);
    assert_eq!(o.status.code(), Some(0));
    std::fs::rename(dir.path().join("synth_00001.palette.json"), &pal).unwrap();
    let o = run(&dir.path().join("c"), &pal);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("grid"));
}

#[test]
fn palette_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let color = dir.path().join("color.png");
    image::RgbImage::from_fn(30, 20, |x, _| if x < 15 { image::Rgb([200, 40, 30]) } else { image::Rgb([30, 60, 210]) })
        .save(&color)
        .unwrap();
    let o = palgan(&["palette", "--out", s(dir.path()), s(&color)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let file = PaletteFile::load(&dir.path().join("color.palette.json")).unwrap();
    assert!((file.weights.iter().sum::<f64>() - 1.0).abs() < 1e-4);
    assert_eq!((file.n_a, file.n_b), (16, 16));
    let heat = image::open(dir.path().join("color.palette.png")).unwrap();
    assert_eq!((heat.width(), heat.height()), (256, 256));

    let achromatic = dir.path().join("flat.png");
    image::RgbImage::from_pixel(20, 20, image::Rgb([128, 128, 128])).save(&achromatic).unwrap();
    assert_eq!(palgan(&["palette", "--out", s(dir.path()), s(&achromatic)]).status.code(), Some(0));
    let h = PaletteFile::load(&dir.path().join("flat.palette.json")).unwrap().histogram().unwrap();
    let (ia, ib) = h.argmax();
    // zero chroma sits on the corner shared by bins 7 and 8 of each axis
    assert!((7..=8).contains(&ia) && (7..=8).contains(&ib));
    let corner = h.get(ia, ib);
    for a in 7..=8 {
        for b in 7..=8 {
            assert!((h.get(a, b) - corner).abs() < 1e-3);
        }
    }

    let gray = dir.path().join("gray.png");
    write_gray(&gray, 20, 20);
    let o = palgan(&["palette", "--out", s(dir.path()), s(&gray)]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn eval_report_and_errors() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let val = dir.path().join("val");
    assert!(palgan(&["synth", "--out", s(&val), "--count", "5", "--size", "20", "--seed", "7"]).status.success());
    let run = |out: &Path| {
        palgan(&[
            "eval", "--checkpoint", s(&f.checkpoint()), "--data", s(&val), "--out", s(out), "--crop", "16",
            "--deterministic",
        ])
    };
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(run(&a).status.code(), Some(0), "{}", stderr(&run(&a)));
    assert_eq!(run(&b).status.code(), Some(0));
    let csv = std::fs::read(a.join("eval.csv")).unwrap();
    assert_eq!(String::from_utf8_lossy(&csv).lines().count(), 6);
    assert_eq!(csv, std::fs::read(b.join("eval.csv")).unwrap());
    assert!(a.join("eval.json").exists());

    let bad = dir.path().join("bad.palg");
    std::fs::write(&bad, b"NOPE and more bytes").unwrap();
    let o = palgan(&["eval", "--checkpoint", s(&bad), "--data", s(&val), "--out", s(&a)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("magic"));
}

#[test]
fn usage_errors_and_help() {
    assert_eq!(palgan(&["colorize", "--bogus"]).status.code(), Some(1));
    assert_eq!(palgan(&["frobnicate"]).status.code(), Some(1));
    let help = palgan(&["train", "--help"]);
    assert_eq!(help.status.code(), Some(0));
    let text = String::from_utf8_lossy(&help.stdout);
    for flag in ["--config", "--data", "--out", "--resume", "--seed", "--deterministic", "--bins", "--crop"] {
        assert!(text.contains(flag), "{flag}");
    }
}

#[test]
fn diverging_run_exits_with_numerical_code() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("hot.toml");
    std::fs::write(&cfg, format!("{TOY}lr_generator = 1e300\nlr_discriminator = 1e300\n")).unwrap();
    let o = palgan(&["train", "--config", s(&cfg), "--data", s(&f.data), "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("non-finite"));
}
