//! Trains the default configuration on the seeded synthetic benchmark and
//! prints per-epoch metrics.
//!
//!     cargo run --release --example synthetic_benchmark -- [epochs] [key=value ...]

use damamba::config::Config;
use damamba::pipeline::SyntheticBenchmark;
use damamba::train::{train, TrainOptions};

fn main() -> damamba::Result<()> {
    let mut args = std::env::args().skip(1);
    let mut cfg = Config::default();
    if let Some(e) = args.next() {
        cfg.train.epochs = e.parse().expect("epochs");
    }
    let overrides: Vec<String> = args.collect();
    let cfg = cfg.with_overrides(&overrides)?;
    let mut bench = SyntheticBenchmark::default();
    if let Ok(v) = std::env::var("NOISE") {
        bench.options.noise = v.parse().expect("noise");
    }
    let (tr, val) = bench.generate()?;
    let out = std::env::temp_dir().join("damamba-synthetic-benchmark");
    let t0 = std::time::Instant::now();
    let r = train(&cfg, &tr, &val, &out, &TrainOptions { verbose: true, ..TrainOptions::default() })?;
    println!("best held-out CCC {:.4} after {} epochs in {:.1?}", r.best_val_ccc, r.epochs_run, t0.elapsed());
    Ok(())
}
