// Short DeGlow training run on synthetic records, followed by a checkpoint
// round trip.

use nightdehaze::networks::{train, DeGlowModel, NetworkConfig, Sample, TrainSchedule};
use nightdehaze::synthesis::{generate_records, PairSource, SynthesisConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn run(size: usize, iterations: usize) -> nightdehaze::Result<()> {
    let cfg = SynthesisConfig::desk(size, 5);
    let pairs = PairSource::Procedural { count: 2 }.load(&cfg)?;
    let samples: Vec<Sample> = generate_records(&pairs, &cfg)?
        .iter()
        .map(|g| Sample::deglow(&g.layers()))
        .collect();
    let mut model = DeGlowModel::new(NetworkConfig::default(), &mut ChaCha8Rng::seed_from_u64(0))?;
    let schedule = TrainSchedule {
        batch_size: 4,
        max_iterations: iterations,
        validation_every: 5,
        ..TrainSchedule::default()
    };
    let tmp = tempfile::tempdir().expect("temporary directory");
    let dir = tmp.path();
    let report = train(&mut model, &samples, &[], &schedule, Some(dir))?;
    let (first, last) = report.initial_and_final(5);
    println!(
        "{} samples, loss {first:.5} -> {last:.5}, lr {}",
        samples.len(),
        report.final_learning_rate
    );

    let reloaded = DeGlowModel::load(&dir.join("deglow.nckp"))?;
    let a = model.infer(&samples[0].input, 3)?;
    let b = reloaded.infer(&samples[0].input, 3)?;
    println!("checkpoint round trip max diff {}", a.max_abs_diff(&b));
    Ok(())
}

#[allow(dead_code)]
fn main() -> nightdehaze::Result<()> {
    run(48, 40)
}
