//! Prints the block scaling table and the partner scaling table as CSV.
//!
//!     cargo run --release --example scaling

use damamba::bench::{
    partner_scaling_benchmark, run_scaling_benchmark, single_threaded, to_csv, CountingAlloc, PartnerConfig,
    ScalingConfig,
};

#[global_allocator]
static ALLOC: CountingAlloc = CountingAlloc;

fn main() -> damamba::Result<()> {
    let t0 = std::time::Instant::now();
    let rows = single_threaded(|| run_scaling_benchmark(&ScalingConfig::default()))??;
    print!("{}", to_csv(&rows)?);
    let rows = single_threaded(|| partner_scaling_benchmark(&PartnerConfig::default()))??;
    print!("{}", to_csv(&rows)?);
    eprintln!("{:.1?}", t0.elapsed());
    Ok(())
}
