// Full inference on one synthetic night image: glow removal, transmission,
// atmospheric light, recovery. Whole-image and tiled runs are compared.
//
// Untrained weights are used unless a checkpoint directory is given:
// `cargo run --release --example dehaze_image -- <checkpoint_dir>`

use nightdehaze::metrics::psnr;
use nightdehaze::networks::{DeGlowModel, DeHazeModel, NetworkConfig};
use nightdehaze::pipeline::{run_pipeline, InferenceConfig, ModelPaths, Models, StageHooks};
use nightdehaze::synthesis::{generate_records, PairSource, SynthesisConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn run(size: usize, checkpoints: Option<&std::path::Path>) -> nightdehaze::Result<()> {
    let models = match checkpoints {
        Some(dir) => Models::load(&ModelPaths::in_dir(dir))?,
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(6);
            Models {
                deglow: DeGlowModel::new(NetworkConfig::default(), &mut rng)?,
                dehaze: DeHazeModel::new(NetworkConfig::default(), &mut rng)?,
            }
        }
    };
    let cfg = SynthesisConfig::desk(size, 7);
    let pairs = PairSource::Procedural { count: 1 }.load(&cfg)?;
    let record = generate_records(&pairs, &cfg)?.swap_remove(4).layers();

    let whole = run_pipeline(
        &record.hazy,
        &models,
        &InferenceConfig::default(),
        &StageHooks::default(),
    )?;
    print!("{}", whole.timing_report());
    println!(
        "light {:.3?}, t in [{:.3}, {:.3}]",
        whole.light.rgb(),
        whole.transmission.min(),
        whole
            .transmission
            .data()
            .iter()
            .copied()
            .fold(0.0, f64::max)
    );
    println!(
        "psnr vs clean: input {:.2} dB, output {:.2} dB",
        psnr(&record.hazy, &record.clean)?,
        psnr(&whole.output, &record.clean)?
    );

    let tiled_cfg = InferenceConfig {
        tile_size: Some(size / 2),
        ..InferenceConfig::default()
    };
    let tiled = run_pipeline(&record.hazy, &models, &tiled_cfg, &StageHooks::default())?;
    let diff = whole
        .output
        .data()
        .iter()
        .zip(tiled.output.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    println!(
        "tiled ({} px tiles) vs whole: max diff {diff:.2e}",
        size / 2
    );
    Ok(())
}

#[allow(dead_code)]
fn main() -> nightdehaze::Result<()> {
    let dir = std::env::args().nth(1).map(std::path::PathBuf::from);
    run(96, dir.as_deref())
}
