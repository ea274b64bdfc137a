//! Gather/scatter throughput measurement under two memory strategies.
//!
//! Both strategies move the same elements along the same routes, so their
//! outputs must agree bit for bit; the run refuses to report any timing
//! until the checksums match. `per-route-copy` materializes each route's
//! sequence with separate library calls, `fused-gather` fills one combined
//! buffer for all routes in a single pass.

use crate::error::{Error, Result};
use crate::routes::{
    build_route, gather_sequence, scatter_section, GridShape, RouteVariant, ScanPattern, ScanRoute,
};
use crate::tensor::Tensor;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::str::FromStr;
use std::time::Instant;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GatherStrategy {
    PerRouteCopy,
    FusedGather,
}

impl GatherStrategy {
    pub const ALL: [GatherStrategy; 2] =
        [GatherStrategy::PerRouteCopy, GatherStrategy::FusedGather];

    pub fn name(self) -> &'static str {
        match self {
            GatherStrategy::PerRouteCopy => "per-route-copy",
            GatherStrategy::FusedGather => "fused-gather",
        }
    }
}

impl FromStr for GatherStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<GatherStrategy> {
        GatherStrategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Validation(format!("unknown gather strategy {s:?}")))
    }
}

/// Workload description; the input map is drawn from `seed`.
#[derive(Debug, Clone, Copy)]
pub struct BenchSettings {
    pub h: usize,
    pub w: usize,
    pub channels: usize,
    pub k_routes: usize,
    pub batch: usize,
    pub reps: usize,
    pub pattern: ScanPattern,
    pub seed: u64,
}

impl Default for BenchSettings {
    fn default() -> Self {
        BenchSettings {
            h: 64,
            w: 64,
            channels: 32,
            k_routes: 4,
            batch: 1,
            reps: 5,
            pattern: ScanPattern::Snake,
            seed: 0x5eed,
        }
    }
}

/// One timed strategy run. Wall-time fields all carry a `_seconds` suffix
/// (and the throughput key names its unit) so deterministic comparisons can
/// mask them by name.
#[derive(Debug, Clone, Serialize)]
pub struct BenchResult {
    pub op: &'static str,
    pub strategy: &'static str,
    pub grid: [usize; 2],
    pub channels: usize,
    pub k_routes: usize,
    pub reps: usize,
    pub checksum: String,
    pub median_seconds: f64,
    pub p10_seconds: f64,
    pub p90_seconds: f64,
    pub elements_per_second: f64,
}

fn fnv1a(state: &mut u64, bytes: &[u8]) {
    for &b in bytes {
        *state ^= b as u64;
        *state = state.wrapping_mul(0x0000_0100_0000_01b3);
    }
}

/// FNV-1a over the little-endian bit patterns of every value, in order.
pub fn checksum_tensors<'a>(tensors: impl IntoIterator<Item = &'a Tensor>) -> u64 {
    let mut state = 0xcbf2_9ce4_8422_2325u64;
    for t in tensors {
        for v in t.data() {
            fnv1a(&mut state, &v.to_bits().to_le_bytes());
        }
    }
    state
}

fn bench_routes(settings: &BenchSettings) -> Result<Vec<ScanRoute>> {
    let grid = GridShape::new(settings.h, settings.w)?;
    (0..settings.k_routes)
        .map(|v| {
            let variant = RouteVariant::new((v % 4) as u8)?;
            Ok(build_route(settings.pattern, variant, grid))
        })
        .collect()
}

fn bench_input(settings: &BenchSettings) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let count = settings.batch * settings.channels * settings.h * settings.w;
    Tensor::new(
        [settings.batch, settings.channels, settings.h, settings.w],
        (0..count).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .expect("shape/data agree by construction")
}

/// Each route handled end to end by the library calls, results stacked in
/// route order.
fn per_route_sections(map: &Tensor, routes: &[ScanRoute]) -> Result<Vec<Tensor>> {
    routes
        .iter()
        .map(|route| scatter_section(&gather_sequence(map, route)?, route))
        .collect()
}

/// One combined buffer for all routes: a single gather pass writes every
/// route's sequence, a single scatter pass writes every section.
fn fused_sections(map: &Tensor, routes: &[ScanRoute]) -> Result<Tensor> {
    let shape = map.shape();
    let (b, s) = (shape[0], shape[1]);
    let l = shape[2] * shape[3];
    let k = routes.len();
    let data = map.data();
    let mut seq = vec![0.0f64; k * b * s * l];
    for (kk, route) in routes.iter().enumerate() {
        let perm = route.perm();
        for bb in 0..b {
            for ss in 0..s {
                let src = (bb * s + ss) * l;
                let dst = ((kk * b + bb) * s + ss) * l;
                for (t, &cell) in perm.iter().enumerate() {
                    seq[dst + t] = data[src + cell];
                }
            }
        }
    }
    let mut sections = vec![0.0f64; k * b * s * l];
    for (kk, route) in routes.iter().enumerate() {
        let perm = route.perm();
        for bb in 0..b {
            for ss in 0..s {
                let base = ((kk * b + bb) * s + ss) * l;
                for (t, &cell) in perm.iter().enumerate() {
                    sections[base + cell] = seq[base + t];
                }
            }
        }
    }
    Tensor::new([k, b, s, l], sections)
}

fn strategy_checksum(strategy: GatherStrategy, map: &Tensor, routes: &[ScanRoute]) -> Result<u64> {
    Ok(match strategy {
        GatherStrategy::PerRouteCopy => checksum_tensors(&per_route_sections(map, routes)?),
        GatherStrategy::FusedGather => checksum_tensors([&fused_sections(map, routes)?]),
    })
}

/// Verify both strategies agree bitwise on this workload, then time the
/// requested one. `reps` below 3 is rejected: a median of fewer runs says
/// nothing.
pub fn run_bench(strategy: GatherStrategy, settings: &BenchSettings) -> Result<BenchResult> {
    if settings.reps < 3 {
        return Err(Error::Validation(format!(
            "bench needs at least 3 repetitions, got {}",
            settings.reps
        )));
    }
    if settings.k_routes == 0 {
        return Err(Error::Validation("bench needs at least one route".into()));
    }
    let routes = bench_routes(settings)?;
    let map = bench_input(settings);

    let per_route = strategy_checksum(GatherStrategy::PerRouteCopy, &map, &routes)?;
    let fused = strategy_checksum(GatherStrategy::FusedGather, &map, &routes)?;
    if per_route != fused {
        return Err(Error::Contract(format!(
            "gather strategies disagree before timing: per-route-copy {per_route:016x} vs fused-gather {fused:016x}"
        )));
    }

    let mut times = Vec::with_capacity(settings.reps);
    for _ in 0..settings.reps {
        let start = Instant::now();
        match strategy {
            GatherStrategy::PerRouteCopy => {
                std::hint::black_box(per_route_sections(&map, &routes)?);
            }
            GatherStrategy::FusedGather => {
                std::hint::black_box(fused_sections(&map, &routes)?);
            }
        }
        times.push(start.elapsed().as_secs_f64());
    }
    times.sort_by(|a, b| a.partial_cmp(b).expect("durations are finite"));
    let pick = |q: f64| times[((times.len() - 1) as f64 * q).round() as usize];
    let median = pick(0.5);
    let moved =
        2 * settings.k_routes * settings.batch * settings.channels * settings.h * settings.w;
    Ok(BenchResult {
        op: "gather-scatter",
        strategy: strategy.name(),
        grid: [settings.h, settings.w],
        channels: settings.channels,
        k_routes: settings.k_routes,
        reps: settings.reps,
        checksum: format!("{per_route:016x}"),
        median_seconds: median,
        p10_seconds: pick(0.1),
        p90_seconds: pick(0.9),
        elements_per_second: moved as f64 / median.max(f64::MIN_POSITIVE),
    })
}
