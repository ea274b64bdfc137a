//! Command-line surface: route inspection and rendering, seeded demo runs,
//! the property suites, parameter accounting, and the gather benchmark.
//!
//! Exit codes: 0 success, 1 failed property or correctness check, 2 usage
//! error (bad flags, unknown names, invalid config). All output is
//! deterministic for fixed flags and seeds except wall-clock measurements,
//! which live in keys whose names end in `_seconds` or name their unit, so
//! byte comparisons can mask them.

use crate::bench::{run_bench, BenchResult, BenchSettings, GatherStrategy};
use crate::checks::{run_scope, CheckScope};
use crate::config::MhsConfig;
use crate::error::{Error, Result};
use crate::forward::{forward_with_stats, HeadStats};
use crate::routes::{build_route, GridShape, RouteVariant, ScanPattern, ScanRoute};
use crate::tensor::Tensor;
use crate::weights::{init_weights, param_count};
use clap::{Parser, Subcommand, ValueEnum};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Debug, Parser)]
#[command(
    name = "mhs",
    about = "Multi-head scan module tools: routes, demo runs, property checks, parameter counts, benchmarks"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum RouteFormat {
    /// Pattern header plus the visit permutation
    Perm,
    /// Visit step number printed in each grid cell
    Ascii,
    /// Traversal polyline through the cell centers
    Svg,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Dump or render one scan route
    Routes {
        /// raster, snake, diagonal, or spiral
        #[arg(value_parser = parse_pattern)]
        pattern: ScanPattern,
        /// Variant index 0..=3 (starting corner / orientation)
        variant: u8,
        height: usize,
        width: usize,
        #[arg(long, value_enum, default_value_t = RouteFormat::Perm)]
        format: RouteFormat,
    },
    /// Build weights from a seed, run one forward pass on seeded random
    /// input, and print JSON stats
    Demo {
        /// Path to a module config (JSON)
        #[arg(long)]
        config: PathBuf,
        /// Overrides the seed recorded in the config
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 8)]
        height: usize,
        #[arg(long, default_value_t = 8)]
        width: usize,
        #[arg(long, default_value_t = 1)]
        batch: usize,
    },
    /// Run the fixed-seed property suites, one line per property
    Check {
        /// routes, ssm, esf, grads, or all
        #[arg(value_parser = parse_scope, default_value = "all")]
        scope: CheckScope,
    },
    /// Itemized parameter counts for a config
    Params {
        /// Path to a module config (JSON)
        #[arg(long)]
        config: PathBuf,
    },
    /// Time route gather/scatter under one memory strategy (both are
    /// checksum-compared first)
    Bench {
        /// per-route-copy or fused-gather
        #[arg(value_parser = parse_strategy)]
        strategy: GatherStrategy,
        #[arg(long, default_value_t = 64)]
        height: usize,
        #[arg(long, default_value_t = 64)]
        width: usize,
        /// Channels carried through the gather
        #[arg(long, default_value_t = 32)]
        channels: usize,
        /// Timed repetitions, at least 3
        #[arg(long, default_value_t = 5)]
        reps: usize,
    },
}

fn parse_pattern(s: &str) -> Result<ScanPattern> {
    s.parse()
}

fn parse_scope(s: &str) -> Result<CheckScope> {
    s.parse()
}

fn parse_strategy(s: &str) -> Result<GatherStrategy> {
    s.parse()
}

/// Parse the process arguments and run; returns the process exit code.
pub fn run() -> i32 {
    let cli = Cli::parse();
    let mut out = std::io::stdout();
    match execute(cli, &mut out) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            exit_code_for(&err)
        }
    }
}

fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::Contract(_) => 1,
        _ => 2,
    }
}

/// Run one parsed invocation, writing to `out`; returns the exit code.
pub fn execute(cli: Cli, out: &mut impl Write) -> Result<i32> {
    match cli.command {
        Command::Routes {
            pattern,
            variant,
            height,
            width,
            format,
        } => cmd_routes(pattern, variant, height, width, format, out),
        Command::Demo {
            config,
            seed,
            height,
            width,
            batch,
        } => cmd_demo(&config, seed, height, width, batch, out),
        Command::Check { scope } => cmd_check(scope, out),
        Command::Params { config } => cmd_params(&config, out),
        Command::Bench {
            strategy,
            height,
            width,
            channels,
            reps,
        } => cmd_bench(strategy, height, width, channels, reps, out),
    }
}

// ---------------------------------------------------------------------------
// routes
// ---------------------------------------------------------------------------

fn cmd_routes(
    pattern: ScanPattern,
    variant: u8,
    height: usize,
    width: usize,
    format: RouteFormat,
    out: &mut impl Write,
) -> Result<i32> {
    let route = build_route(
        pattern,
        RouteVariant::new(variant)?,
        GridShape::new(height, width)?,
    );
    match format {
        RouteFormat::Perm => write!(out, "{}", route.dump())?,
        RouteFormat::Ascii => write!(out, "{}", route_ascii(&route, width))?,
        RouteFormat::Svg => write!(out, "{}", route_svg(&route, height, width))?,
    }
    Ok(0)
}

/// Step numbers laid out in grid positions, columns space-separated and
/// right-aligned to the widest step.
fn route_ascii(route: &ScanRoute, width: usize) -> String {
    let l = route.len();
    let digits = (l - 1).to_string().len();
    let mut text = String::new();
    for cell in 0..l {
        if cell > 0 {
            text.push(if cell % width == 0 { '\n' } else { ' ' });
        }
        text.push_str(&format!("{:>digits$}", route.inv()[cell]));
    }
    text.push('\n');
    text
}

const SVG_CELL: usize = 40;

/// Fixed-order, integer-coordinate SVG so identical routes render to
/// identical bytes.
fn route_svg(route: &ScanRoute, height: usize, width: usize) -> String {
    let (w_px, h_px) = (width * SVG_CELL, height * SVG_CELL);
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w_px}\" height=\"{h_px}\" viewBox=\"0 0 {w_px} {h_px}\">\n"
    );
    for r in 0..height {
        for c in 0..width {
            svg.push_str(&format!(
                "  <rect x=\"{}\" y=\"{}\" width=\"{SVG_CELL}\" height=\"{SVG_CELL}\" fill=\"none\" stroke=\"#cccccc\" stroke-width=\"1\"/>\n",
                c * SVG_CELL,
                r * SVG_CELL
            ));
        }
    }
    let center = |cell: usize| {
        (
            (cell % width) * SVG_CELL + SVG_CELL / 2,
            (cell / width) * SVG_CELL + SVG_CELL / 2,
        )
    };
    let points: Vec<String> = route
        .perm()
        .iter()
        .map(|&cell| {
            let (x, y) = center(cell);
            format!("{x},{y}")
        })
        .collect();
    svg.push_str(&format!(
        "  <polyline points=\"{}\" fill=\"none\" stroke=\"#2060c0\" stroke-width=\"3\"/>\n",
        points.join(" ")
    ));
    let (sx, sy) = center(route.perm()[0]);
    svg.push_str(&format!(
        "  <circle cx=\"{sx}\" cy=\"{sy}\" r=\"6\" fill=\"#2060c0\"/>\n"
    ));
    svg.push_str("</svg>\n");
    svg
}

// ---------------------------------------------------------------------------
// demo
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize)]
struct DemoReport {
    seed: u64,
    input_shape: Vec<usize>,
    output_shape: Vec<usize>,
    heads: Vec<HeadStats>,
    forward_seconds: f64,
}

fn load_config(path: &Path) -> Result<MhsConfig> {
    let text = std::fs::read_to_string(path)?;
    let config: MhsConfig = serde_json::from_str(&text)
        .map_err(|e| Error::Validation(format!("config {}: {e}", path.display())))?;
    config.validate()?;
    Ok(config)
}

fn cmd_demo(
    config_path: &Path,
    seed: Option<u64>,
    height: usize,
    width: usize,
    batch: usize,
    out: &mut impl Write,
) -> Result<i32> {
    let config = load_config(config_path)?;
    let seed = seed.unwrap_or(config.seed);
    let weights = init_weights(&config, seed)?;
    // input stream decoupled from the weight draws
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x9E37_79B9_7F4A_7C15));
    let count = batch * height * width * config.c_l;
    let x = Tensor::new(
        [batch, height, width, config.c_l],
        (0..count).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )?;
    let start = Instant::now();
    let (y, stats) = forward_with_stats(&x, &weights, &config)?;
    let forward_seconds = start.elapsed().as_secs_f64();
    let report = DemoReport {
        seed,
        input_shape: x.shape().to_vec(),
        output_shape: y.shape().to_vec(),
        heads: stats.heads,
        forward_seconds,
    };
    writeln!(
        out,
        "{}",
        serde_json::to_string_pretty(&report).expect("report serializes")
    )?;
    Ok(0)
}

// ---------------------------------------------------------------------------
// check
// ---------------------------------------------------------------------------

fn cmd_check(scope: CheckScope, out: &mut impl Write) -> Result<i32> {
    let results = run_scope(scope);
    let mut failed = 0usize;
    for result in &results {
        writeln!(out, "{}", result.line())?;
        if !result.passed {
            failed += 1;
        }
    }
    writeln!(out, "{} properties, {} failed", results.len(), failed)?;
    Ok(if failed > 0 { 1 } else { 0 })
}

// ---------------------------------------------------------------------------
// params
// ---------------------------------------------------------------------------

fn cmd_params(config_path: &Path, out: &mut impl Write) -> Result<i32> {
    let config = load_config(config_path)?;
    let breakdown = param_count(&config)?;
    for (name, count) in breakdown.lines() {
        writeln!(out, "{name:<16} {count:>10}")?;
    }
    writeln!(out, "{:<16} {:>10}", "total", breakdown.total())?;
    Ok(0)
}

// ---------------------------------------------------------------------------
// bench
// ---------------------------------------------------------------------------

fn cmd_bench(
    strategy: GatherStrategy,
    height: usize,
    width: usize,
    channels: usize,
    reps: usize,
    out: &mut impl Write,
) -> Result<i32> {
    let settings = BenchSettings {
        h: height,
        w: width,
        channels,
        reps,
        ..BenchSettings::default()
    };
    let result: BenchResult = run_bench(strategy, &settings)?;
    writeln!(
        out,
        "{}",
        serde_json::to_string_pretty(&result).expect("result serializes")
    )?;
    Ok(0)
}
