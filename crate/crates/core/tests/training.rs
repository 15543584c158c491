use nightdehaze::networks::{train, DeGlowModel, NetworkConfig, Sample, TrainSchedule};
use nightdehaze::synthesis::{generate_records, PairSource, SynthesisConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn desk_run_loss_falls_block_by_block() {
    let cfg = SynthesisConfig::desk(64, 11);
    let pairs = PairSource::Procedural { count: 8 }.load(&cfg).unwrap();
    let samples: Vec<Sample> = generate_records(&pairs, &cfg)
        .unwrap()
        .iter()
        .take(64)
        .map(|g| Sample::deglow(&g.layers()))
        .collect();
    let schedule = TrainSchedule {
        batch_size: 8,
        max_iterations: 200,
        plateau_patience: 1000,
        ..TrainSchedule::default()
    };
    let mut model =
        DeGlowModel::new(NetworkConfig::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let probe: Vec<Sample> = samples.iter().step_by(4).cloned().collect();
    let report = train(&mut model, &samples, &probe, &schedule, None).unwrap();
    // full-probe losses every 10 iterations, averaged over 50-iteration blocks
    let blocks: Vec<f64> = report
        .log
        .chunks(50)
        .map(|c| {
            let v: Vec<f64> = c.iter().filter_map(|e| e.validation).collect();
            v.iter().sum::<f64>() / v.len() as f64
        })
        .collect();
    assert_eq!(blocks.len(), 4);
    assert!(blocks.windows(2).all(|w| w[1] < w[0]), "{blocks:?}");
    let (first, last) = report.initial_and_final(10);
    assert!(last < 0.75 * first, "{first} -> {last}");
}
