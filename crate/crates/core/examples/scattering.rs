// Compose haze and glow over a procedural scene, then invert the haze blend
// with the true transmission and light.

use nightdehaze::atmospherics::{
    compose_glow, compose_haze, recover_radiance, transmission_from_depth, AtmosphericLight,
    DEFAULT_T_MIN,
};
use nightdehaze::metrics::psnr;
use nightdehaze::synthesis::{
    procedural_pair, render_glow_field, sample_glow_sources, SynthesisConfig,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn run(size: usize) -> nightdehaze::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cfg = SynthesisConfig::desk(size, 1);
    let (clean, depth) = procedural_pair(&mut rng, size, size)?;
    let light = AtmosphericLight::new([0.85, 0.75, 0.6])?;

    for beta in [0.5, 1.0, 2.0] {
        let t = transmission_from_depth(&depth, beta)?;
        let haze = compose_haze(&clean, &t, light)?;
        let sources = sample_glow_sources(&mut rng, size, size, 0.6, &cfg);
        let glow = render_glow_field(
            size,
            size,
            &sources,
            cfg.use_taylor_glow,
            cfg.mask_threshold,
        )?;
        let observed = compose_glow(&haze, &glow)?;
        let back = recover_radiance(&haze, &t, light, DEFAULT_T_MIN)?;
        println!(
            "beta {beta:.1}: min t {:.3}, hazy {:.2} dB, with glow {:.2} dB, recovered {:.2} dB",
            t.min(),
            psnr(&haze, &clean)?,
            psnr(&observed, &clean)?,
            psnr(&back, &clean)?
        );
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> nightdehaze::Result<()> {
    run(128)
}
