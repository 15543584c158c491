// Build a small synthetic dataset: every clean/depth pair crossed with the
// sampled scattering and glow parameters.
//
// `cargo run --release --example synthesize -- <out_dir>`

use std::path::PathBuf;

use nightdehaze::synthesis::{build_dataset, PairSource, SynthesisConfig};

pub fn run(out: &std::path::Path, size: usize, pairs: usize) -> nightdehaze::Result<()> {
    let cfg = SynthesisConfig::desk(size, 3);
    let pairs = PairSource::Procedural { count: pairs }.load(&cfg)?;
    let manifest = build_dataset(&pairs, &cfg, out)?;
    println!("{} records in {}", manifest.len(), out.display());
    for r in manifest.records.iter().take(3) {
        println!(
            "  {} beta {:.3} q {:.3} light {:.3?} sources {}",
            r.id,
            r.beta,
            r.q,
            r.light,
            r.sources.len()
        );
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> nightdehaze::Result<()> {
    let out = std::env::args().nth(1).map_or_else(
        || std::env::temp_dir().join("nightdehaze-data"),
        PathBuf::from,
    );
    run(&out, 64, 4)
}
