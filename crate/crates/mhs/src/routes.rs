//! 2D-to-1D traversal orders over a patch grid: four scan patterns, four
//! corner variants each, plus the gather/scatter ops that move data between
//! grid layout and sequence layout.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// Height and width of the patch grid, in patch units.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridShape {
    pub h: usize,
    pub w: usize,
}

impl GridShape {
    pub fn new(h: usize, w: usize) -> Result<Self> {
        if h == 0 || w == 0 {
            return Err(Error::Validation(format!(
                "grid extents must be positive, got {h}x{w}"
            )));
        }
        Ok(GridShape { h, w })
    }

    /// Number of cells L = H * W.
    pub fn len(&self) -> usize {
        self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// The four traversal rules. All but `Raster` keep consecutive cells
/// spatially adjacent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScanPattern {
    Raster,
    Snake,
    Diagonal,
    Spiral,
}

impl ScanPattern {
    pub const ALL: [ScanPattern; 4] = [
        ScanPattern::Raster,
        ScanPattern::Snake,
        ScanPattern::Diagonal,
        ScanPattern::Spiral,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScanPattern::Raster => "raster",
            ScanPattern::Snake => "snake",
            ScanPattern::Diagonal => "diagonal",
            ScanPattern::Spiral => "spiral",
        }
    }

    /// Adjacency metric the pattern is expected to satisfy between
    /// consecutive visits. Raster is held to Manhattan too but violates it at
    /// every row wrap; see [`adjacency_report`].
    pub fn metric(self) -> AdjacencyMetric {
        match self {
            ScanPattern::Diagonal => AdjacencyMetric::Chebyshev,
            _ => AdjacencyMetric::Manhattan,
        }
    }
}

impl fmt::Display for ScanPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScanPattern {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raster" => Ok(ScanPattern::Raster),
            "snake" => Ok(ScanPattern::Snake),
            "diagonal" => Ok(ScanPattern::Diagonal),
            "spiral" => Ok(ScanPattern::Spiral),
            other => Err(Error::Validation(format!(
                "unknown scan pattern {other:?} (expected raster, snake, diagonal or spiral)"
            ))),
        }
    }
}

/// Starting-corner variant: 0 = top-left, 1 = top-right, 2 = bottom-left,
/// 3 = bottom-right. Variants 1-3 are the variant-0 construction reflected
/// horizontally and/or vertically.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RouteVariant(u8);

impl RouteVariant {
    pub const ALL: [RouteVariant; 4] = [
        RouteVariant(0),
        RouteVariant(1),
        RouteVariant(2),
        RouteVariant(3),
    ];

    pub fn new(index: u8) -> Result<Self> {
        if index > 3 {
            return Err(Error::Validation(format!(
                "route variant must be 0..=3, got {index}"
            )));
        }
        Ok(RouteVariant(index))
    }

    pub fn index(self) -> u8 {
        self.0
    }

    fn flip_h(self) -> bool {
        self.0 & 1 != 0
    }

    fn flip_v(self) -> bool {
        self.0 & 2 != 0
    }
}

impl fmt::Display for RouteVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// A concrete traversal: `perm[t]` is the flat row-major cell index visited
/// at step `t`, and `inv[perm[t]] = t`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScanRoute {
    pub pattern: ScanPattern,
    pub variant: RouteVariant,
    pub grid: GridShape,
    perm: Vec<usize>,
    inv: Vec<usize>,
}

impl ScanRoute {
    pub fn perm(&self) -> &[usize] {
        &self.perm
    }

    pub fn inv(&self) -> &[usize] {
        &self.inv
    }

    pub fn len(&self) -> usize {
        self.perm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perm.is_empty()
    }

    /// Dump format consumed by the CLI and by golden tests: one header line
    /// `pattern variant H W`, then the perm as space-separated integers.
    pub fn dump(&self) -> String {
        let perm: Vec<String> = self.perm.iter().map(|p| p.to_string()).collect();
        format!(
            "{} {} {} {}\n{}\n",
            self.pattern,
            self.variant,
            self.grid.h,
            self.grid.w,
            perm.join(" ")
        )
    }
}

/// Build the route for (pattern, variant) on `grid`. Every input combination
/// is valid by construction.
pub fn build_route(pattern: ScanPattern, variant: RouteVariant, grid: GridShape) -> ScanRoute {
    let cells = match pattern {
        ScanPattern::Raster => raster_cells(grid),
        ScanPattern::Snake => snake_cells(grid),
        ScanPattern::Diagonal => diagonal_cells(grid),
        ScanPattern::Spiral => spiral_cells(grid),
    };
    let perm: Vec<usize> = cells
        .into_iter()
        .map(|(r, c)| {
            let r = if variant.flip_v() { grid.h - 1 - r } else { r };
            let c = if variant.flip_h() { grid.w - 1 - c } else { c };
            r * grid.w + c
        })
        .collect();
    let inv = invert(&perm);
    ScanRoute {
        pattern,
        variant,
        grid,
        perm,
        inv,
    }
}

/// Inverse permutation: `invert(perm)[perm[t]] = t`.
pub fn invert(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; perm.len()];
    for (t, &cell) in perm.iter().enumerate() {
        inv[cell] = t;
    }
    inv
}

fn raster_cells(grid: GridShape) -> Vec<(usize, usize)> {
    let mut cells = Vec::with_capacity(grid.len());
    for r in 0..grid.h {
        for c in 0..grid.w {
            cells.push((r, c));
        }
    }
    cells
}

fn snake_cells(grid: GridShape) -> Vec<(usize, usize)> {
    let mut cells = Vec::with_capacity(grid.len());
    for r in 0..grid.h {
        if r % 2 == 0 {
            for c in 0..grid.w {
                cells.push((r, c));
            }
        } else {
            for c in (0..grid.w).rev() {
                cells.push((r, c));
            }
        }
    }
    cells
}

/// Anti-diagonals d = r + c, direction alternating per diagonal so the hop
/// between diagonals lands on a king-move neighbour.
fn diagonal_cells(grid: GridShape) -> Vec<(usize, usize)> {
    let mut cells = Vec::with_capacity(grid.len());
    for d in 0..grid.h + grid.w - 1 {
        let r_lo = d.saturating_sub(grid.w - 1);
        let r_hi = d.min(grid.h - 1);
        if d % 2 == 0 {
            for r in r_lo..=r_hi {
                cells.push((r, d - r));
            }
        } else {
            for r in (r_lo..=r_hi).rev() {
                cells.push((r, d - r));
            }
        }
    }
    cells
}

/// Clockwise inward peel starting along the top edge.
fn spiral_cells(grid: GridShape) -> Vec<(usize, usize)> {
    let mut cells = Vec::with_capacity(grid.len());
    let (mut top, mut bottom) = (0isize, grid.h as isize - 1);
    let (mut left, mut right) = (0isize, grid.w as isize - 1);
    while top <= bottom && left <= right {
        for c in left..=right {
            cells.push((top as usize, c as usize));
        }
        top += 1;
        for r in top..=bottom {
            cells.push((r as usize, right as usize));
        }
        right -= 1;
        if top <= bottom {
            for c in (left..=right).rev() {
                cells.push((bottom as usize, c as usize));
            }
            bottom -= 1;
        }
        if left <= right {
            for r in (top..=bottom).rev() {
                cells.push((r as usize, left as usize));
            }
            left += 1;
        }
    }
    cells
}

/// Read a [B, S, H, W] map along the route: `out[b, s, t] = map[b, s, cell_t]`.
pub fn gather_sequence(map: &Tensor, route: &ScanRoute) -> Result<Tensor> {
    let shape = map.shape();
    if shape.len() != 4 || shape[2] != route.grid.h || shape[3] != route.grid.w {
        return Err(Error::dim(
            "gather_sequence",
            shape,
            &[route.grid.h, route.grid.w],
        ));
    }
    let (b, s) = (shape[0], shape[1]);
    let l = route.len();
    let mut out = Vec::with_capacity(b * s * l);
    for plane in 0..b * s {
        let base = plane * l;
        for &cell in &route.perm {
            out.push(map.data()[base + cell]);
        }
    }
    Tensor::new([b, s, l], out)
}

/// Re-lay a [B, S, L] route sequence into canonical row-major cell order:
/// `out[b, s, cell_t] = seq[b, s, t]`. Sections produced this way are
/// position-aligned across routes.
pub fn scatter_section(seq: &Tensor, route: &ScanRoute) -> Result<Tensor> {
    let shape = seq.shape();
    if shape.len() != 3 || shape[2] != route.len() {
        return Err(Error::dim("scatter_section", shape, &[route.len()]));
    }
    let (b, s, l) = (shape[0], shape[1], shape[2]);
    let mut out = vec![0.0f64; b * s * l];
    for plane in 0..b * s {
        let base = plane * l;
        for (t, &cell) in route.perm.iter().enumerate() {
            out[base + cell] = seq.data()[base + t];
        }
    }
    Tensor::new([b, s, l], out)
}

/// Distance notion a pattern's consecutive steps are measured against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdjacencyMetric {
    Manhattan,
    Chebyshev,
}

impl AdjacencyMetric {
    fn distance(self, a: (usize, usize), b: (usize, usize)) -> usize {
        let dr = a.0.abs_diff(b.0);
        let dc = a.1.abs_diff(b.1);
        match self {
            AdjacencyMetric::Manhattan => dr + dc,
            AdjacencyMetric::Chebyshev => dr.max(dc),
        }
    }
}

impl fmt::Display for AdjacencyMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AdjacencyMetric::Manhattan => "manhattan",
            AdjacencyMetric::Chebyshev => "chebyshev",
        })
    }
}

/// One consecutive pair whose distance exceeds 1 under the route's metric.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AdjacencyViolation {
    /// Step index t of the pair (perm[t], perm[t+1]).
    pub step: usize,
    pub from_cell: usize,
    pub to_cell: usize,
    pub distance: usize,
}

/// Every consecutive-pair violation of the route's adjacency metric. Snake,
/// Spiral and Diagonal routes report none; Raster reports one per row wrap.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdjacencyReport {
    pub metric: AdjacencyMetric,
    pub violations: Vec<AdjacencyViolation>,
}

impl AdjacencyReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

pub fn adjacency_report(route: &ScanRoute) -> AdjacencyReport {
    let metric = route.pattern.metric();
    let w = route.grid.w;
    let mut violations = Vec::new();
    for t in 0..route.len().saturating_sub(1) {
        let from = route.perm[t];
        let to = route.perm[t + 1];
        let d = metric.distance((from / w, from % w), (to / w, to % w));
        if d != 1 {
            violations.push(AdjacencyViolation {
                step: t,
                from_cell: from,
                to_cell: to,
                distance: d,
            });
        }
    }
    AdjacencyReport { metric, violations }
}
