use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use palgan_core::colorspace::{rgb_to_lab, RgbImage};
use palgan_core::data::{build_index, synth, CachePolicy, Split};
use palgan_core::palette::{soft_histogram, PaletteFile};
use palgan_core::training::{TrainConfig, Trainer};
use palgan_core::Error;

fn toy_config() -> TrainConfig {
    TrainConfig {
        preset: "toy".into(),
        batch_size: 3,
        crop_size: 16,
        epochs: 1,
        seed: 4,
        log_interval: 1,
        ..TrainConfig::default()
    }
}

#[test]
fn train_save_reload_and_colorize() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("data");
    synth::write_corpus(&root, 6, 24, 12).unwrap();
    let data = build_index(&root, Split::Train).unwrap().with_cache(CachePolicy::Memory);
    assert_eq!(data.len(), 6);

    let cfg = toy_config();
    let mut trainer = Trainer::new(cfg.clone(), 2).unwrap();
    let out = dir.path().join("run");
    let reports = trainer.fit(&data, Some(&out), |_| {}).unwrap();
    assert_eq!(reports.len(), 2);
    assert!(reports.iter().all(|r| r.generator_total.is_finite() && r.d_loss.is_finite()));

    let reloaded = Trainer::load_checkpoint(&out.join("latest.palg")).unwrap();
    assert_eq!(reloaded.state.step, 2);
    assert_eq!(reloaded.checkpoint().to_bytes(), trainer.checkpoint().to_bytes());

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let img = synth::synth_image(19, &mut rng);
    let (gray, chroma) = rgb_to_lab(&img).unwrap();
    let model = &reloaded.model;
    let z = model.latent(&mut rng);
    let auto = model.colorize(&gray, None, &z, &reloaded.state.params).unwrap();
    assert_eq!((auto.rgb.width(), auto.rgb.height()), (19, 19));
    assert_eq!(auto.palette, auto.predicted_palette);
    // the output keeps the input's lightness
    let (l_out, _) = rgb_to_lab(&auto.rgb).unwrap();
    let drift = l_out.data().iter().zip(gray.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(drift < 0.02, "{drift}");

    let reference = soft_histogram(&chroma, &model.config.grid).unwrap();
    let guided = model.colorize(&gray, Some(&reference), &z, &reloaded.state.params).unwrap();
    assert_eq!(guided.palette, reference);
    assert_ne!(guided.chroma, auto.chroma);
}

#[test]
fn palette_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (_, chroma) = rgb_to_lab(&synth::synth_image(20, &mut rng)).unwrap();
    let grid = palgan_core::PaletteGrid::default();
    let hist = soft_histogram(&chroma, &grid).unwrap();
    let path = dir.path().join("p.json");
    PaletteFile::new(&hist, grid.sigma).save(&path).unwrap();
    let back = PaletteFile::load(&path).unwrap();
    assert_eq!(back.grid().unwrap(), grid);
    let restored = back.histogram().unwrap();
    for (a, b) in restored.weights().iter().zip(hist.weights()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn errors_are_typed() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("none");
    assert!(build_index(&missing, Split::Train).is_err());

    let bad = dir.path().join("bad.palg");
    std::fs::write(&bad, b"garbage").unwrap();
    assert!(matches!(Trainer::load_checkpoint(&bad), Err(Error::Format(_))));

    assert!(RgbImage::new(2, 2, vec![0.5; 11]).is_err());
    let mut cfg = toy_config();
    cfg.crop_size = 15;
    assert!(cfg.validate().is_err());
}
