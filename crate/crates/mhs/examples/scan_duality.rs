//! A linear recurrence with time-invariant parameters computes the same
//! sequence as a causal convolution with the unrolled kernel.
//!
//! The recurrence costs O(L*N) and the kernel form O(L^2) here, but the two
//! must agree to near machine precision; this is the main correctness anchor
//! for the scan implementation.

use mhs::ssm::{conv_kernel, conv_scan, recurrence_scan};
use mhs::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 6;
    let l = 48;

    let draw = |rng: &mut ChaCha8Rng, len: usize, lo: f64, hi: f64| {
        Tensor::new([len], (0..len).map(|_| rng.gen_range(lo..hi)).collect())
    };
    let abar = draw(&mut rng, n, -0.95, 0.95)?;
    let bbar = draw(&mut rng, n, -1.0, 1.0)?;
    let c = draw(&mut rng, n, -1.0, 1.0)?;
    let x = draw(&mut rng, l, -1.0, 1.0)?;

    let by_recurrence = recurrence_scan(&abar, &bbar, &c, &x)?;
    let kernel = conv_kernel(&abar, &bbar, &c, l)?;
    let by_convolution = conv_scan(&x, &kernel)?;

    println!("first kernel taps (k_0 is the instantaneous response):");
    for (i, tap) in kernel.taps().data().iter().take(6).enumerate() {
        println!("  k_{i} = {tap:+.6}");
    }

    let mut worst = 0.0f64;
    for (a, b) in by_recurrence.data().iter().zip(by_convolution.data()) {
        worst = worst.max((a - b).abs());
    }
    println!("\nstate dim {n}, sequence length {l}");
    println!("max |recurrence - convolution| = {worst:.3e}");
    assert!(worst <= 1e-10, "the two forms drifted apart");
    println!("the two evaluation orders agree to 1e-10");
    Ok(())
}
