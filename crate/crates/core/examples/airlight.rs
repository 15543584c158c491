// Estimate the atmospheric light of hazy scenes whose true light is known.

use nightdehaze::atmospherics::{
    airlight_candidate_count, compose_haze, estimate_atmospheric_light, transmission_from_depth,
    AtmosphericLight,
};
use nightdehaze::synthesis::procedural_pair;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn run(size: usize) -> nightdehaze::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    println!(
        "{size}x{size}: {} candidate pixels",
        airlight_candidate_count(size * size)
    );
    for _ in 0..5 {
        let (clean, depth) = procedural_pair(&mut rng, size, size)?;
        let truth = AtmosphericLight::new([0, 1, 2].map(|_| rng.random_range(0.5..1.0)))?;
        let t = transmission_from_depth(&depth, 3.0)?;
        let hazy = compose_haze(&clean, &t, truth)?;
        let est = estimate_atmospheric_light(&t, &hazy)?;
        let err = est
            .rgb()
            .iter()
            .zip(truth.rgb())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        println!(
            "true {:.3?} estimated {:.3?} max error {err:.4} (min t {:.3})",
            truth.rgb(),
            est.rgb(),
            t.min()
        );
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> nightdehaze::Result<()> {
    run(160)
}
