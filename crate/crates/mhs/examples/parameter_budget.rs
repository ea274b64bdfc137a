//! How the parameter count moves with head count, subspace width, and the
//! tail projection.
//!
//! The headline trade-off: more, narrower heads (n = 4, S = C_l/4) cost
//! fewer parameters than fewer, wider ones (n = 3, S = C_l/3), because the
//! per-head blocks shrink faster than the extra projections grow. Keeping
//! S = C_l/3 while going to 4 heads spends more instead.

use mhs::config::MhsConfig;
use mhs::weights::param_count;
use mhs::Result;

fn config(n_heads: usize, subspace_dim: usize, tail: bool) -> MhsConfig {
    MhsConfig {
        c_l: 96,
        n_heads,
        subspace_dim,
        tail_projection: tail,
        patterns: None,
        ..MhsConfig::default()
    }
}

fn main() -> Result<()> {
    let variants = [
        ("3 heads, S = 32", config(3, 32, true)),
        ("4 heads, S = 24", config(4, 24, true)),
        ("4 heads, S = 32", config(4, 32, true)),
    ];

    let mut totals = Vec::new();
    for (label, cfg) in &variants {
        let breakdown = param_count(cfg)?;
        println!("{label}  (C_l = {})", cfg.c_l);
        for (name, count) in breakdown.lines() {
            println!("  {name:<18} {count:>8}");
        }
        println!("  {:<18} {:>8}", "total", breakdown.total());
        println!();
        totals.push(breakdown.total());
    }
    assert!(
        totals[1] < totals[0],
        "narrow heads should be the cheap option"
    );
    assert!(totals[2] > totals[0], "wide extra heads should cost more");

    let with_tail = config(3, 32, true);
    let without_tail = param_count(&config(3, 32, false))?;
    let tail_cost = param_count(&with_tail)?.total() - without_tail.total();
    println!(
        "dropping the tail projection (possible because 3 * 32 = 96) saves \
         {tail_cost} parameters = C_l * n * S = {}",
        with_tail.c_l * 3 * 32
    );
    Ok(())
}
