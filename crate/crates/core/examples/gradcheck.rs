// Finite-difference check of every differentiable operation and of both
// networks.

use nightdehaze::gradcheck::{run_suite, GRADCHECK_TOLERANCE};

pub fn run(seed: u64) -> nightdehaze::Result<bool> {
    let report = run_suite(seed)?;
    print!("{}", report.to_text());
    Ok(report.passed(GRADCHECK_TOLERANCE))
}

#[allow(dead_code)]
fn main() -> nightdehaze::Result<()> {
    if !run(0)? {
        std::process::exit(1);
    }
    Ok(())
}
