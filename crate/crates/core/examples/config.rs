// The default pipeline configuration as TOML, and a partial override.

use nightdehaze::pipeline::PipelineConfig;

pub fn run() -> nightdehaze::Result<()> {
    let defaults = PipelineConfig::default();
    print!("{}", defaults.to_toml());
    let custom = PipelineConfig::parse(
        "seed = 9\n\n[inference]\ntile_size = 128\n\n[train_deglow]\nmax_iterations = 50\n",
    )?;
    println!(
        "\noverride: tile {:?}, deglow iterations {}, synthesis seed {}",
        custom.inference.tile_size, custom.train_deglow.max_iterations, custom.synthesis.rng_seed
    );
    Ok(())
}

#[allow(dead_code)]
fn main() -> nightdehaze::Result<()> {
    run()
}
