//! Self-contained property suites with fixed seeds, one result line per
//! property. The `check` subcommand prints these verbatim, so every detail
//! string must be deterministic: counts and error magnitudes, never wall
//! time.

use crate::error::Result;
use crate::esf::{coefficient_variation, CvGate, EsfScheme, SectionStack};
use crate::grad::{
    gradcheck_module, CheckDims, GradOp, GradStatus, DEFAULT_STEP, DEFAULT_TOL_FORWARD,
    DEFAULT_TOL_ISOLATED,
};
use crate::routes::{
    build_route, gather_sequence, scatter_section, GridShape, RouteVariant, ScanPattern,
};
use crate::ssm::{conv_kernel, conv_scan, recurrence_scan, zoh};
use crate::tensor::Tensor;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::str::FromStr;

/// Outcome of one named property.
#[derive(Debug, Clone)]
pub struct PropertyResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl PropertyResult {
    pub fn line(&self) -> String {
        let verdict = if self.passed { "PASS" } else { "FAIL" };
        format!("{verdict} {}: {}", self.name, self.detail)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckScope {
    Routes,
    Ssm,
    Esf,
    Grads,
    All,
}

impl CheckScope {
    pub const ALL: [CheckScope; 5] = [
        CheckScope::Routes,
        CheckScope::Ssm,
        CheckScope::Esf,
        CheckScope::Grads,
        CheckScope::All,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CheckScope::Routes => "routes",
            CheckScope::Ssm => "ssm",
            CheckScope::Esf => "esf",
            CheckScope::Grads => "grads",
            CheckScope::All => "all",
        }
    }
}

impl FromStr for CheckScope {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> Result<CheckScope> {
        CheckScope::ALL
            .into_iter()
            .find(|scope| scope.name() == s)
            .ok_or_else(|| crate::error::Error::Validation(format!("unknown check scope {s:?}")))
    }
}

/// Run every property in the scope (`All` concatenates the four suites in a
/// fixed order).
pub fn run_scope(scope: CheckScope) -> Vec<PropertyResult> {
    match scope {
        CheckScope::Routes => routes_properties(),
        CheckScope::Ssm => ssm_properties(),
        CheckScope::Esf => esf_properties(),
        CheckScope::Grads => grads_properties(),
        CheckScope::All => {
            let mut all = routes_properties();
            all.extend(ssm_properties());
            all.extend(esf_properties());
            all.extend(grads_properties());
            all
        }
    }
}

fn property(name: &'static str, run: impl FnOnce() -> Result<(bool, String)>) -> PropertyResult {
    match run() {
        Ok((passed, detail)) => PropertyResult {
            name,
            passed,
            detail,
        },
        Err(e) => PropertyResult {
            name,
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn draw(rng: &mut ChaCha8Rng, shape: impl Into<Vec<usize>>, lo: f64, hi: f64) -> Tensor {
    let shape = shape.into();
    let count = shape.iter().product();
    Tensor::new(shape, (0..count).map(|_| rng.gen_range(lo..hi)).collect())
        .expect("shape/data agree by construction")
}

// ---------------------------------------------------------------------------
// routes
// ---------------------------------------------------------------------------

pub fn routes_properties() -> Vec<PropertyResult> {
    vec![
        property("routes.bijection", || {
            let mut routes = 0usize;
            for pattern in ScanPattern::ALL {
                for variant in RouteVariant::ALL {
                    for h in 1..=8 {
                        for w in 1..=8 {
                            let route = build_route(pattern, variant, GridShape::new(h, w)?);
                            let l = route.len();
                            let mut seen = vec![false; l];
                            for t in 0..l {
                                let cell = route.perm()[t];
                                if cell >= l || seen[cell] || route.inv()[cell] != t {
                                    return Ok((false, format!("broken at {}", route.dump())));
                                }
                                seen[cell] = true;
                            }
                            routes += 1;
                        }
                    }
                }
            }
            Ok((
                true,
                format!("{routes} routes are bijective with exact inverses"),
            ))
        }),
        property("routes.adjacency", || {
            let mut steps = 0usize;
            for pattern in ScanPattern::ALL {
                let chebyshev = matches!(pattern, ScanPattern::Diagonal);
                let unconstrained = matches!(pattern, ScanPattern::Raster);
                if unconstrained {
                    continue;
                }
                for variant in RouteVariant::ALL {
                    for h in 1..=8 {
                        for w in 1..=8 {
                            let grid = GridShape::new(h, w)?;
                            let route = build_route(pattern, variant, grid);
                            for t in 1..route.len() {
                                let (a, b) = (route.perm()[t - 1], route.perm()[t]);
                                let (ar, ac) = (a / w, a % w);
                                let (br, bc) = (b / w, b % w);
                                let (dr, dc) = (ar.abs_diff(br), ac.abs_diff(bc));
                                let dist = if chebyshev { dr.max(dc) } else { dr + dc };
                                if dist != 1 {
                                    return Ok((
                                        false,
                                        format!("step {t} of {} jumps {dist}", route.dump()),
                                    ));
                                }
                                steps += 1;
                            }
                        }
                    }
                }
            }
            Ok((true, format!("{steps} consecutive steps all unit distance")))
        }),
        property("routes.scatter_inverts_gather", || {
            let mut r = rng(101);
            let mut cases = 0usize;
            for (h, w) in [(1, 1), (2, 3), (4, 4), (5, 2), (7, 3)] {
                let grid = GridShape::new(h, w)?;
                let map = draw(&mut r, [2, 3, h, w], -1.0, 1.0);
                for pattern in ScanPattern::ALL {
                    for variant in RouteVariant::ALL {
                        let route = build_route(pattern, variant, grid);
                        let seq = gather_sequence(&map, &route)?;
                        let back = scatter_section(&seq, &route)?;
                        let flat = Tensor::new([2, 3, h * w], map.data().to_vec())?;
                        if !back.bits_eq(&flat) {
                            return Ok((false, format!("mismatch on {}", route.dump())));
                        }
                        cases += 1;
                    }
                }
            }
            Ok((
                true,
                format!("{cases} gather/scatter round trips are bitwise exact"),
            ))
        }),
    ]
}

// ---------------------------------------------------------------------------
// ssm
// ---------------------------------------------------------------------------

pub fn ssm_properties() -> Vec<PropertyResult> {
    vec![
        property("ssm.duality", || {
            let mut r = rng(202);
            let mut max_rel: f64 = 0.0;
            for _ in 0..100 {
                let n = r.gen_range(1..=8usize);
                let l = r.gen_range(1..=64usize);
                let abar = draw(&mut r, [n], -0.95, 0.95);
                let bbar = draw(&mut r, [n], -1.0, 1.0);
                let c = draw(&mut r, [n], -1.0, 1.0);
                let x = draw(&mut r, [l], -1.0, 1.0);
                let by_scan = recurrence_scan(&abar, &bbar, &c, &x)?;
                let by_conv = conv_scan(&x, &conv_kernel(&abar, &bbar, &c, l)?)?;
                let scale = by_scan
                    .data()
                    .iter()
                    .fold(0.0f64, |m, v| m.max(v.abs()))
                    .max(1e-30);
                let diff = by_scan
                    .data()
                    .iter()
                    .zip(by_conv.data())
                    .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
                max_rel = max_rel.max(diff / scale);
            }
            Ok((
                max_rel <= 1e-10,
                format!(
                    "recurrence vs convolution max relative L-inf {max_rel:.3e} over 100 trials"
                ),
            ))
        }),
        property("ssm.zoh_doubling_step", || {
            // a unit rate over a log-2 step doubles the state carry and
            // leaves the input weight untouched
            let (abar, bbar) = zoh(std::f64::consts::LN_2, 1.0, 0.75);
            let ok = (abar - 2.0).abs() <= 1e-12 && (bbar - 0.75).abs() <= 1e-12;
            Ok((ok, format!("carry {abar:.15} input weight {bbar:.15}")))
        }),
        property("ssm.zoh_small_step_bound", || {
            let mut r = rng(203);
            let mut ok = true;
            let mut worst: f64 = 0.0;
            let delta = 1e-4;
            for _ in 0..50 {
                let a: f64 = r.gen_range(-2.0..2.0);
                let b: f64 = r.gen_range(-2.0..2.0);
                let (_, bbar) = zoh(delta, a, b);
                let err = (bbar - delta * b).abs();
                let bound = a.abs() * delta * delta * b.abs();
                if err > bound {
                    ok = false;
                }
                worst = worst.max(err);
            }
            Ok((
                ok,
                format!("|input weight - step*b| max {worst:.3e} within the quadratic bound"),
            ))
        }),
        property("ssm.zoh_series_continuity", || {
            // the series branch takes over below |z| = 1e-4; the two sides
            // must agree at the seam
            let below = 1e-4 * (1.0 - 1e-9);
            let above = 1e-4 * (1.0 + 1e-9);
            let mut worst: f64 = 0.0;
            for (a, b) in [(1.0f64, 1.0), (-1.0, 0.5), (0.5, -2.0)] {
                let (_, lo) = zoh(below / a.abs(), a, b);
                let (_, hi) = zoh(above / a.abs(), a, b);
                worst = worst.max((lo - hi).abs());
            }
            Ok((
                worst <= 1e-12,
                format!("input weight jump across the series seam {worst:.3e}"),
            ))
        }),
    ]
}

// ---------------------------------------------------------------------------
// esf
// ---------------------------------------------------------------------------

pub fn esf_properties() -> Vec<PropertyResult> {
    vec![
        property("esf.identical_sections_gate_closed", || {
            let mut r = rng(301);
            let one = draw(&mut r, [1, 2, 5], -1.0, 1.0);
            let stack = SectionStack::from_sections(&[one.clone(), one.clone(), one.clone(), one])?;
            let cv_scaled = EsfScheme::CvScaling {
                t: 0.5,
                eps: 1e-6,
                gate: CvGate::ThresholdRelu,
            }
            .fuse(&stack)?;
            let mixpool_cv = EsfScheme::MixPoolCv {
                w: Tensor::new([1, 2], vec![0.5, 0.5])?,
                t: 0.5,
                eps: 1e-6,
                gate: CvGate::ThresholdRelu,
            }
            .fuse(&stack)?;
            let ok = cv_scaled.data().iter().all(|&v| v == 0.0)
                && mixpool_cv.data().iter().all(|&v| v == 0.0);
            Ok((
                ok,
                "identical sections fuse to exact zeros under both gated schemes".into(),
            ))
        }),
        property("esf.variation_probe", || {
            let stack = SectionStack::new(Tensor::new([1, 4, 1, 1], vec![0.0, 0.0, 0.0, 1.0])?)?;
            let cv = coefficient_variation(&stack, 1e-6)?.data()[0];
            let gate = CvGate::ThresholdRelu.apply(cv, 0.5);
            let root3 = 3.0f64.sqrt();
            let ok = (cv - root3).abs() <= 1e-5 && (gate - (root3 - 0.5)).abs() <= 1e-5;
            Ok((
                ok,
                format!("one-hot column: variation {cv:.7} gate {gate:.7}"),
            ))
        }),
        property("esf.variation_shift_scale_invariant", || {
            // the additive eps in the denominator caps how exactly a positive
            // scale can cancel, so the invariance probe uses a small one
            let eps = 1e-8;
            let mut r = rng(302);
            let base = SectionStack::new(draw(&mut r, [1, 4, 3, 5], 0.5, 1.5))?;
            let cv0 = coefficient_variation(&base, eps)?;
            let shifted = SectionStack::new(
                base.tensor()
                    .scale(1.0)
                    .add(&Tensor::full([1, 4, 3, 5], 0.9))?,
            )?;
            let scaled = SectionStack::new(base.tensor().scale(2.7))?;
            let cv_shift = coefficient_variation(&shifted, eps)?;
            let cv_scale = coefficient_variation(&scaled, eps)?;
            let mut worst: f64 = 0.0;
            for i in 0..cv0.len() {
                let c0 = cv0.data()[i];
                for c in [cv_shift.data()[i], cv_scale.data()[i]] {
                    worst = worst.max((c - c0).abs() / c0.abs().max(1e-12));
                }
            }
            Ok((
                worst <= 1e-6,
                format!("variation drift under shift/scale {worst:.3e}"),
            ))
        }),
    ]
}

// ---------------------------------------------------------------------------
// grads
// ---------------------------------------------------------------------------

pub fn grads_properties() -> Vec<PropertyResult> {
    let isolated = CheckDims {
        state_dim: 2,
        ..CheckDims::default()
    };
    let mut out = Vec::new();
    for op in [
        GradOp::Recurrence,
        GradOp::SelectiveScan,
        GradOp::MambaBlock,
        GradOp::EsfSum,
        GradOp::EsfMixpool,
        GradOp::EsfCv,
        GradOp::EsfMixpoolCv,
    ] {
        out.push(grad_property(op, &isolated, 42, DEFAULT_TOL_ISOLATED));
    }
    out.push(grad_property(
        GradOp::Forward,
        &CheckDims::default(),
        7,
        DEFAULT_TOL_FORWARD,
    ));
    out
}

fn grad_property(op: GradOp, dims: &CheckDims, seed: u64, tol: f64) -> PropertyResult {
    let name = match op {
        GradOp::Recurrence => "grads.recurrence",
        GradOp::SelectiveScan => "grads.selective_scan",
        GradOp::MambaBlock => "grads.mamba_block",
        GradOp::EsfSum => "grads.esf_sum",
        GradOp::EsfMixpool => "grads.esf_mixpool",
        GradOp::EsfCv => "grads.esf_cv",
        GradOp::EsfMixpoolCv => "grads.esf_mixpool_cv",
        GradOp::Forward => "grads.forward",
    };
    property(name, || {
        let report = gradcheck_module(op, dims, seed, DEFAULT_STEP, tol)?;
        let detail = match report.status {
            GradStatus::Inconclusive => {
                format!("inconclusive after {} attempts", report.attempts)
            }
            _ => {
                let probes: usize = report.params.iter().map(|p| p.probes).sum();
                format!(
                    "max relative error {:.3e} over {} probes (tol {:.0e}, attempt {})",
                    report.max_rel_err(),
                    probes,
                    report.tol,
                    report.attempts
                )
            }
        };
        Ok((report.status == GradStatus::Pass, detail))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_scope_passes_on_a_fresh_build() {
        for scope in [
            CheckScope::Routes,
            CheckScope::Ssm,
            CheckScope::Esf,
            CheckScope::Grads,
        ] {
            for result in run_scope(scope) {
                assert!(result.passed, "{}", result.line());
            }
        }
    }

    #[test]
    fn all_scope_is_the_concatenation_and_is_deterministic() {
        let first = run_scope(CheckScope::All);
        let second = run_scope(CheckScope::All);
        let sum = routes_properties().len()
            + ssm_properties().len()
            + esf_properties().len()
            + grads_properties().len();
        assert_eq!(first.len(), sum);
        let lines: Vec<String> = first.iter().map(PropertyResult::line).collect();
        let again: Vec<String> = second.iter().map(PropertyResult::line).collect();
        assert_eq!(lines, again);
    }

    #[test]
    fn scope_names_round_trip() {
        for scope in CheckScope::ALL {
            assert_eq!(scope.name().parse::<CheckScope>().unwrap(), scope);
        }
        assert!("gradients".parse::<CheckScope>().is_err());
    }

    #[test]
    fn result_lines_start_with_the_verdict() {
        let result = PropertyResult {
            name: "demo.property",
            passed: false,
            detail: "off by 2".into(),
        };
        assert_eq!(result.line(), "FAIL demo.property: off by 2");
    }
}
