//! Render every scan pattern and variant on a small grid.
//!
//! Each route visits all H*W cells exactly once; the printout shows the step
//! number at which each cell is visited, so a raster route reads 0..L left to
//! right while a spiral route winds inward.

use mhs::routes::{build_route, GridShape, RouteVariant, ScanPattern};
use mhs::Result;

fn main() -> Result<()> {
    let grid = GridShape::new(4, 5)?;

    for pattern in ScanPattern::ALL {
        println!("== {} ==", pattern.name());
        for variant in RouteVariant::ALL {
            let route = build_route(pattern, variant, grid);
            println!("variant {variant}:");
            let digits = (route.len() - 1).to_string().len();
            for r in 0..grid.h {
                let row: Vec<String> = (0..grid.w)
                    .map(|c| format!("{:>digits$}", route.inv()[r * grid.w + c]))
                    .collect();
                println!("  {}", row.join(" "));
            }
        }
        println!();
    }

    let spiral = build_route(
        ScanPattern::Spiral,
        RouteVariant::new(0)?,
        GridShape::new(3, 3)?,
    );
    println!("dump format used by the `routes` subcommand and golden files:");
    print!("{}", spiral.dump());
    Ok(())
}
