// PSNR and SSIM of increasingly noisy copies of one image.

use nightdehaze::metrics::{psnr, ssim, QualityReport};
use nightdehaze::synthesis::procedural_clean;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn run(size: usize) -> nightdehaze::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let clean = procedural_clean(&mut rng, size, size)?;
    let mut report = QualityReport::default();
    for amp in [0.01, 0.03, 0.1, 0.3] {
        let mut noisy = clean.clone();
        for v in noisy.data_mut() {
            *v = (*v + rng.random_range(-amp..amp)).clamp(0.0, 1.0);
        }
        report.push(format!("noise{amp}"), &noisy, &clean)?;
    }
    print!("{}", report.to_table());
    println!(
        "self: psnr {} ssim {}",
        psnr(&clean, &clean)?,
        ssim(&clean, &clean)?
    );
    Ok(())
}

#[allow(dead_code)]
fn main() -> nightdehaze::Result<()> {
    run(96)
}
