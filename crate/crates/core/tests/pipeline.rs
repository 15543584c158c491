use std::path::Path;

use nightdehaze::atmospherics::{recover_radiance, AtmosphericLight};
use nightdehaze::image::{Plane, RadianceImage, TransmissionMap};
use nightdehaze::networks::{DeGlowModel, DeHazeModel, NetworkConfig};
use nightdehaze::pipeline::cli::{cli_dispatch_to, EXIT_RUNTIME, EXIT_USAGE};
use nightdehaze::pipeline::{
    evaluate_dirs, recover_from_dumps, run_file, run_pipeline, DumpPaths, InferenceConfig,
    ModelPaths, Models, StageHooks, STAGES,
};
use nightdehaze::pnm;
use nightdehaze::tensor::WeightInit;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_net() -> NetworkConfig {
    NetworkConfig {
        features: 4,
        recurrences: 2,
        init: WeightInit::Gaussian { std: 0.2 },
        ..NetworkConfig::default()
    }
}

fn random_models(seed: u64) -> Models {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Models {
        deglow: DeGlowModel::new(small_net(), &mut rng).unwrap(),
        dehaze: DeHazeModel::new(small_net(), &mut rng).unwrap(),
    }
}

/// Channel values on a 1/256 grid, exact in 32 bits.
fn grid_image(h: usize, w: usize, seed: u64) -> RadianceImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    RadianceImage::from_fn(h, w, |_, _| {
        [0, 1, 2].map(|_| rng.random_range(0..=255) as f64 / 256.0)
    })
    .unwrap()
}

fn exact() -> InferenceConfig {
    InferenceConfig {
        quantize_stages: false,
        ..InferenceConfig::default()
    }
}

#[test]
fn zero_deglow_with_injected_stages_reduces_to_recovery() {
    let input = grid_image(12, 10, 1);
    let models = Models {
        deglow: DeGlowModel::zeros(small_net()).unwrap(),
        dehaze: DeHazeModel::zeros(small_net()).unwrap(),
    };
    let t = TransmissionMap::new(
        Plane::from_fn(12, 10, |y, x| 0.1 + 0.07 * ((y + x) % 12) as f64).unwrap(),
    )
    .unwrap();
    let light = AtmosphericLight::new([0.8, 0.7, 0.9]).unwrap();
    let hooks = StageHooks {
        transmission: Some(t.clone()),
        light: Some(light),
    };
    let out = run_pipeline(&input, &models, &exact(), &hooks).unwrap();
    assert_eq!(out.deglowed, input);
    assert_eq!(
        out.output,
        recover_radiance(&input, &t, light, exact().t_min).unwrap()
    );
}

#[test]
fn timings_cover_every_stage_in_order() {
    let out = run_pipeline(
        &grid_image(16, 16, 2),
        &random_models(3),
        &exact(),
        &StageHooks::default(),
    )
    .unwrap();
    let stages: Vec<&str> = out.timings.iter().map(|t| t.stage).collect();
    assert_eq!(stages, STAGES);
    assert!(out.timings.iter().all(|t| t.seconds >= 0.0));
    assert_eq!(out.timing_report().lines().count(), 4);
}

#[test]
fn tiled_inference_matches_whole_image() {
    let input = grid_image(40, 36, 4);
    let models = random_models(5);
    let whole = run_pipeline(&input, &models, &exact(), &StageHooks::default()).unwrap();
    let tiled_cfg = InferenceConfig {
        tile_size: Some(16),
        ..exact()
    };
    let tiled = run_pipeline(&input, &models, &tiled_cfg, &StageHooks::default()).unwrap();
    let diff = |a: &[f64], b: &[f64]| {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    };
    assert!(diff(whole.deglowed.data(), tiled.deglowed.data()) <= 1e-6);
    assert!(diff(whole.transmission.data(), tiled.transmission.data()) <= 1e-6);
    assert!(diff(whole.output.data(), tiled.output.data()) <= 1e-5);
}

#[test]
fn runs_are_deterministic() {
    let input = grid_image(20, 24, 6);
    let models = random_models(7);
    let a = run_pipeline(
        &input,
        &models,
        &InferenceConfig::default(),
        &StageHooks::default(),
    )
    .unwrap();
    let b = run_pipeline(
        &input,
        &models,
        &InferenceConfig::default(),
        &StageHooks::default(),
    )
    .unwrap();
    assert_eq!(a.output, b.output);
    assert_eq!(a.transmission, b.transmission);
    assert_eq!(a.light, b.light);
}

#[test]
fn dumped_stages_recover_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let input_path = dir.path().join("night.ppm");
    pnm::write_ppm(&input_path, &grid_image(18, 22, 8)).unwrap();
    let out_dir = dir.path().join("out");
    let artifacts = run_file(
        &input_path,
        &out_dir,
        &random_models(9),
        &InferenceConfig::default(),
        true,
    )
    .unwrap();
    let paths = DumpPaths::new(&out_dir, "night");
    for p in [
        &paths.output,
        &paths.deglowed,
        &paths.transmission,
        &paths.light,
    ] {
        assert!(p.exists(), "{}", p.display());
    }
    let recovered =
        recover_from_dumps(&out_dir, "night", InferenceConfig::default().t_min).unwrap();
    assert_eq!(recovered, artifacts.output);
}

fn cli(args: &[&str]) -> (i32, String, String) {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let argv = std::iter::once("nightdehaze").chain(args.iter().copied());
    let code = cli_dispatch_to(argv, &mut out, &mut err);
    (
        code,
        String::from_utf8(out).unwrap(),
        String::from_utf8(err).unwrap(),
    )
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn eval_of_identical_directories_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["a", "b"] {
        pnm::write_ppm(
            &dir.path().join(format!("{name}.ppm")),
            &grid_image(16, 16, 10),
        )
        .unwrap();
    }
    let report = evaluate_dirs(dir.path(), dir.path()).unwrap();
    assert_eq!(report.rows.len(), 2);
    assert_eq!(report.ssim(), 1.0);
    assert!(report.psnr_db().is_infinite());

    let (code, out, _) = cli(&["eval", "--pred", s(dir.path()), "--truth", s(dir.path())]);
    assert_eq!(code, 0);
    assert!(out.contains("a") && out.contains("b"));
}

#[test]
fn cli_synth_train_run_recover() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let config = root.join("c.toml");
    std::fs::write(
        &config,
        "[synthesis]\nwidth = 16\nheight = 16\n\n[network]\nfeatures = 4\nrecurrences = 1\n\n\
         [train_deglow]\nbatch_size = 1\nmax_iterations = 2\n\n[train_dehaze]\nbatch_size = 1\nmax_iterations = 2\n",
    )
    .unwrap();
    let c = s(&config);
    let data = root.join("data");
    let (code, out, err) = cli(&["synth", "--out", s(&data), "--config", c]);
    assert_eq!(code, 0, "{err}");
    assert!(out.starts_with("records=90 "), "{out}");

    let ckpt = root.join("ckpt");
    for sub in ["train-deglow", "train-dehaze"] {
        let (code, out, err) = cli(&[
            sub,
            "--data",
            s(&data),
            "--out",
            s(&ckpt),
            "--config",
            c,
            "--iterations",
            "3",
        ]);
        assert_eq!(code, 0, "{err}");
        assert!(out.contains("iterations=3"), "{out}");
    }
    let paths = ModelPaths::in_dir(&ckpt);
    assert!(paths.deglow.exists() && paths.dehaze.exists());
    assert!(ckpt.join("deglow.loss.log").exists());

    let inputs = root.join("inputs");
    std::fs::create_dir_all(&inputs).unwrap();
    std::fs::copy(data.join("scene00000_b0_q0.hazy.ppm"), inputs.join("x.ppm")).unwrap();
    let out_dir = root.join("out");
    let (code, out, err) = cli(&[
        "run",
        s(&inputs),
        "--out",
        s(&out_dir),
        "--checkpoint",
        s(&ckpt),
        "--dump-intermediates",
        "--tile-size",
        "8",
    ]);
    assert_eq!(code, 0, "{err}");
    for stage in STAGES {
        assert!(out.contains(&format!("{stage}=")), "{out}");
    }
    let recovered = root.join("recovered");
    let (code, _, err) = cli(&["recover", "--dumps", s(&out_dir), "--out", s(&recovered)]);
    assert_eq!(code, 0, "{err}");
    assert_eq!(
        std::fs::read(recovered.join("x.out.ppm")).unwrap(),
        std::fs::read(out_dir.join("x.out.ppm")).unwrap()
    );
}

#[test]
fn cli_exit_codes() {
    assert_eq!(cli(&["--version"]).0, 0);
    assert_eq!(cli(&["eval", "--pred"]).0, EXIT_USAGE);
    assert_eq!(
        cli(&["run", "x.ppm", "--out", "o", "--tau", "many"]).0,
        EXIT_USAGE
    );

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.ppm");
    std::fs::write(&bad, b"P6\n2 2\n255\n\x00").unwrap();
    let (code, _, err) = cli(&["eval", "--pred", s(dir.path()), "--truth", s(dir.path())]);
    assert_eq!(code, EXIT_RUNTIME);
    assert!(
        err.starts_with("error stage=eval kind=format file="),
        "{err}"
    );
    assert!(err.contains("bad.ppm"), "{err}");
}
