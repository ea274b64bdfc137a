//! Gather/scatter microbenchmark comparing the per-route-copy path the
//! library uses with a fused single-buffer variant.
//!
//! Both strategies are checksummed over the full output bit pattern and the
//! checksums are compared before any timing, so a speedup can never come
//! from computing something different.

use mhs::bench::{run_bench, BenchSettings, GatherStrategy};
use mhs::Result;

fn main() -> Result<()> {
    let settings = BenchSettings {
        h: 48,
        w: 48,
        channels: 16,
        reps: 7,
        ..BenchSettings::default()
    };
    println!(
        "grid {}x{}, {} channels, {} routes, {} reps per strategy\n",
        settings.h, settings.w, settings.channels, settings.k_routes, settings.reps
    );

    let mut checksums = Vec::new();
    for strategy in GatherStrategy::ALL {
        let result = run_bench(strategy, &settings)?;
        println!(
            "{:<16} median {:>10.3e}s  p10 {:>10.3e}s  p90 {:>10.3e}s  {:>12.3e} elem/s  checksum {}",
            result.strategy,
            result.median_seconds,
            result.p10_seconds,
            result.p90_seconds,
            result.elements_per_second,
            result.checksum
        );
        checksums.push(result.checksum);
    }
    assert_eq!(checksums[0], checksums[1]);
    println!("\nchecksums agree, so the timing comparison is apples to apples");
    Ok(())
}
