//! Weight container round trip: f64 storage restores every bit, f32 storage
//! trades 4 bytes per value for a small quantization error, and malformed
//! files are rejected with the byte offset of the problem.

use mhs::config::MhsConfig;
use mhs::weights::{init_weights, load_weights, save_weights, save_weights_as, Storage};
use mhs::Result;

fn main() -> Result<()> {
    let config = MhsConfig {
        c_l: 12,
        n_heads: 3,
        subspace_dim: 4,
        ..MhsConfig::default()
    };
    let weights = init_weights(&config, 99)?;
    let dir = tempfile::tempdir()?;

    let full = dir.path().join("weights.mhsw");
    save_weights(&weights, &full)?;
    let restored = load_weights(&full, &config)?;
    let exact = weights
        .entries()
        .iter()
        .zip(restored.entries())
        .all(|((_, a), (_, b))| a.bits_eq(b));
    println!(
        "f64 container: {} bytes, bit-exact restore: {exact}",
        std::fs::metadata(&full)?.len()
    );
    assert!(exact);

    let half = dir.path().join("weights_f32.mhsw");
    save_weights_as(&weights, &half, Storage::F32)?;
    let lossy = load_weights(&half, &config)?;
    let worst = weights
        .entries()
        .iter()
        .zip(lossy.entries())
        .flat_map(|((_, a), (_, b))| {
            a.data()
                .iter()
                .zip(b.data().to_vec())
                .map(|(x, y)| (x - y).abs())
                .collect::<Vec<_>>()
        })
        .fold(0.0f64, f64::max);
    println!(
        "f32 container: {} bytes, max restore error {worst:.3e}",
        std::fs::metadata(&half)?.len()
    );

    let mut bytes = std::fs::read(&full)?;
    bytes[0] ^= 0xFF;
    let bad_magic = dir.path().join("bad_magic.mhsw");
    std::fs::write(&bad_magic, &bytes)?;
    match load_weights(&bad_magic, &config) {
        Err(e) => println!("corrupted magic     -> {e}"),
        Ok(_) => panic!("corrupted magic was accepted"),
    }

    let truncated = dir.path().join("truncated.mhsw");
    std::fs::write(&truncated, &std::fs::read(&full)?[..bytes.len() - 64])?;
    match load_weights(&truncated, &config) {
        Err(e) => println!("truncated payload   -> {e}"),
        Ok(_) => panic!("truncated file was accepted"),
    }

    let wrong = MhsConfig {
        subspace_dim: 3,
        tail_projection: true,
        ..config.clone()
    };
    match load_weights(&full, &wrong) {
        Err(e) => println!("mismatched config   -> {e}"),
        Ok(_) => panic!("mismatched config was accepted"),
    }
    Ok(())
}
