//! Release gate: ten numbered criteria over the public API and the shipped
//! binary, each reported as one verdict line. Run with
//! `cargo test --test acceptance -- --nocapture` to read the checklist;
//! every tolerance and runtime bound is pinned in the criterion body.

use std::process::Command;
use std::time::Instant;

use mhs::bench::{run_bench, BenchSettings, GatherStrategy};
use mhs::config::MhsConfig;
use mhs::esf::{coefficient_variation, CvGate, EsfScheme, SectionStack};
use mhs::forward::forward;
use mhs::grad::{gradcheck_module, CheckDims, GradOp, DEFAULT_STEP};
use mhs::routes::{build_route, GridShape, RouteVariant, ScanPattern};
use mhs::ssm::{conv_kernel, conv_scan, recurrence_scan, zoh};
use mhs::weights::{init_weights, load_weights, save_weights};
use mhs::{Error, Tensor};

type Outcome = Result<String, String>;

fn verdict(number: u32, name: &str, outcome: Outcome) {
    match outcome {
        Ok(detail) => println!("ACCEPTANCE {number:02} {name}: PASS ({detail})"),
        Err(why) => {
            println!("ACCEPTANCE {number:02} {name}: FAIL ({why})");
            panic!("criterion {number:02} {name} failed: {why}");
        }
    }
}

fn seeded(seed: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    rand_chacha::ChaCha8Rng::seed_from_u64(seed)
}

fn draw(rng: &mut rand_chacha::ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    use rand::Rng;
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

#[test]
fn criterion_01_route_correctness() {
    let start = Instant::now();
    let run = || -> Outcome {
        let mut routes = 0usize;
        for pattern in ScanPattern::ALL {
            for variant in RouteVariant::ALL {
                for h in 1..=8usize {
                    for w in 1..=8usize {
                        let route = build_route(pattern, variant, GridShape { h, w });
                        let perm = route.perm();
                        let mut seen = vec![false; h * w];
                        for &cell in perm {
                            if cell >= h * w || seen[cell] {
                                return Err(format!(
                                    "{pattern} v{variant} {h}x{w}: not a bijection"
                                ));
                            }
                            seen[cell] = true;
                        }
                        for (t, &cell) in perm.iter().enumerate() {
                            if route.inv()[cell] != t {
                                return Err(format!(
                                    "{pattern} v{variant} {h}x{w}: inverse broken at step {t}"
                                ));
                            }
                        }
                        for pair in perm.windows(2) {
                            let (r0, c0) = (pair[0] / w, pair[0] % w);
                            let (r1, c1) = (pair[1] / w, pair[1] % w);
                            let dr = r0.abs_diff(r1);
                            let dc = c0.abs_diff(c1);
                            let ok = match pattern {
                                ScanPattern::Raster => true,
                                ScanPattern::Snake | ScanPattern::Spiral => dr + dc == 1,
                                ScanPattern::Diagonal => dr.max(dc) == 1,
                            };
                            if !ok {
                                return Err(format!(
                                    "{pattern} v{variant} {h}x{w}: adjacency broken between \
                                     cells {} and {}",
                                    pair[0], pair[1]
                                ));
                            }
                        }
                        routes += 1;
                    }
                }
            }
        }
        let elapsed = start.elapsed().as_secs_f64();
        if elapsed >= 5.0 {
            return Err(format!("took {elapsed:.1}s, limit 5s"));
        }
        Ok(format!(
            "{routes} routes bijective with inverse and adjacency intact in {elapsed:.2}s"
        ))
    };
    verdict(1, "route correctness", run());
}

#[test]
fn criterion_02_recurrence_convolution_duality() {
    let start = Instant::now();
    let run = || -> Outcome {
        use rand::Rng;
        let mut rng = seeded(4242);
        let mut max_rel: f64 = 0.0;
        for trial in 0..100 {
            let n = rng.gen_range(1..=8usize);
            let l = rng.gen_range(1..=64usize);
            let abar = draw(&mut rng, &[n], -0.95, 0.95);
            let bbar = draw(&mut rng, &[n], -1.0, 1.0);
            let c = draw(&mut rng, &[n], -1.0, 1.0);
            let x = draw(&mut rng, &[l], -1.0, 1.0);
            let by_scan =
                recurrence_scan(&abar, &bbar, &c, &x).map_err(|e| format!("trial {trial}: {e}"))?;
            let kernel =
                conv_kernel(&abar, &bbar, &c, l).map_err(|e| format!("trial {trial}: {e}"))?;
            let by_conv = conv_scan(&x, &kernel).map_err(|e| format!("trial {trial}: {e}"))?;
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
        if max_rel > 1e-10 {
            return Err(format!("max relative L-inf {max_rel:.3e} > 1e-10"));
        }
        let elapsed = start.elapsed().as_secs_f64();
        if elapsed >= 5.0 {
            return Err(format!("took {elapsed:.1}s, limit 5s"));
        }
        Ok(format!(
            "max relative L-inf {max_rel:.3e} over 100 trials in {elapsed:.2}s"
        ))
    };
    verdict(2, "recurrence/convolution duality", run());
}

#[test]
fn criterion_03_zoh_discretization() {
    let run = || -> Outcome {
        let (abar, bbar) = zoh(std::f64::consts::LN_2, 1.0, 0.75);
        if (abar - 2.0).abs() > 1e-12 || (bbar - 0.75).abs() > 1e-12 {
            return Err(format!(
                "log-2 step: carry {abar:.15}, input weight {bbar:.15}"
            ));
        }

        use rand::Rng;
        let mut rng = seeded(909);
        let delta = 1e-4;
        for _ in 0..50 {
            let a: f64 = rng.gen_range(-2.0..2.0);
            let b: f64 = rng.gen_range(-2.0..2.0);
            let (_, bb) = zoh(delta, a, b);
            let err = (bb - delta * b).abs();
            let bound = a.abs() * delta * delta * b.abs();
            if err > bound {
                return Err(format!(
                    "small-step bound broken at a={a:.4}, b={b:.4}: {err:.3e} > {bound:.3e}"
                ));
            }
        }

        let mut worst_jump: f64 = 0.0;
        for (a, b) in [(1.0f64, 1.0), (-1.0, 0.5), (0.5, -2.0)] {
            let z = 1e-4;
            let below = z * (1.0 - 1e-9) / a.abs();
            let above = z * (1.0 + 1e-9) / a.abs();
            let (ab0, bb0) = zoh(below, a, b);
            let (ab1, bb1) = zoh(above, a, b);
            worst_jump = worst_jump.max((ab0 - ab1).abs()).max((bb0 - bb1).abs());
        }
        if worst_jump > 1e-12 {
            return Err(format!(
                "series/closed-form seam jump {worst_jump:.3e} > 1e-12"
            ));
        }
        Ok(format!(
            "closed form exact, quadratic small-step bound holds, seam jump {worst_jump:.3e}"
        ))
    };
    verdict(3, "zero-order-hold discretization", run());
}

#[test]
fn criterion_04_section_fusion_semantics() {
    let run = || -> Outcome {
        let section = Tensor::new([1, 2, 3], vec![0.8, -0.3, 1.9, 0.05, -2.0, 0.4])
            .map_err(|e| e.to_string())?;
        let identical = SectionStack::from_sections(&[
            section.clone(),
            section.clone(),
            section.clone(),
            section,
        ])
        .map_err(|e| e.to_string())?;
        let w = Tensor::new([2], vec![0.5, 0.5]).map_err(|e| e.to_string())?;
        let gated = [
            EsfScheme::CvScaling {
                t: 0.5,
                eps: 1e-6,
                gate: CvGate::ThresholdRelu,
            },
            EsfScheme::MixPoolCv {
                w,
                t: 0.5,
                eps: 1e-6,
                gate: CvGate::ThresholdRelu,
            },
        ];
        for scheme in &gated {
            let fused = scheme.fuse(&identical).map_err(|e| e.to_string())?;
            if fused.data().iter().any(|&v| v != 0.0) {
                return Err("identical sections leaked through the variation gate".into());
            }
        }

        let probe = SectionStack::from_sections(&[
            Tensor::zeros([1, 1, 1]),
            Tensor::new([1, 1, 1], vec![1.0]).map_err(|e| e.to_string())?,
            Tensor::zeros([1, 1, 1]),
            Tensor::zeros([1, 1, 1]),
        ])
        .map_err(|e| e.to_string())?;
        let cv = coefficient_variation(&probe, 1e-6).map_err(|e| e.to_string())?;
        let root3 = 3f64.sqrt();
        if (cv.data()[0] - root3).abs() > 1e-5 {
            return Err(format!(
                "one-hot probe cv {:.7} strays from sqrt(3) by more than 1e-5",
                cv.data()[0]
            ));
        }
        let z3 = gated[0].fuse(&probe).map_err(|e| e.to_string())?;
        if (z3.data()[0] - (root3 - 0.5)).abs() > 1e-5 {
            return Err(format!(
                "one-hot probe gated output {:.7}, expected sqrt(3) - 0.5",
                z3.data()[0]
            ));
        }

        let mut rng = seeded(31);
        let base = draw(&mut rng, &[1, 4, 2, 5], -1.0, 1.0);
        let stack = SectionStack::new(base.clone()).map_err(|e| e.to_string())?;
        // the additive eps in the denominator caps how exactly a positive
        // scale can cancel, so probe with a small one
        let eps = 1e-8;
        let cv0 = coefficient_variation(&stack, eps).map_err(|e| e.to_string())?;
        let moved = Tensor::new(
            base.shape().to_vec(),
            base.data().iter().map(|v| v * 2.7 + 0.9).collect(),
        )
        .map_err(|e| e.to_string())?;
        let cv1 = coefficient_variation(&SectionStack::new(moved).map_err(|e| e.to_string())?, eps)
            .map_err(|e| e.to_string())?;
        let mut drift: f64 = 0.0;
        for (a, b) in cv0.data().iter().zip(cv1.data()) {
            drift = drift.max((a - b).abs() / a.abs().max(b.abs()).max(1e-30));
        }
        if drift > 1e-6 {
            return Err(format!(
                "cv moved by {drift:.3e} relative under shift 0.9, scale 2.7"
            ));
        }
        Ok(format!(
            "gate closes exactly, probe matches sqrt(3), shift/scale drift {drift:.3e}"
        ))
    };
    verdict(4, "section fusion semantics", run());
}

#[test]
fn criterion_05_gradient_certification() {
    let start = Instant::now();
    let run = || -> Outcome {
        let isolated = CheckDims {
            state_dim: 2,
            ..CheckDims::default()
        };
        let mut max_isolated: f64 = 0.0;
        for op in GradOp::ALL {
            if op == GradOp::Forward {
                continue;
            }
            let report = gradcheck_module(op, &isolated, 42, DEFAULT_STEP, 1e-5)
                .map_err(|e| format!("{}: {e}", op.name()))?;
            if !report.passed() {
                return Err(format!(
                    "{} status {:?}, max rel {:.3e}",
                    report.op,
                    report.status,
                    report.max_rel_err()
                ));
            }
            max_isolated = max_isolated.max(report.max_rel_err());
        }

        let forward_dims = CheckDims::default();
        assert_eq!(forward_dims.grid, (4, 4));
        assert_eq!(forward_dims.c_l, 12);
        assert_eq!(forward_dims.n_heads, 3);
        assert_eq!(forward_dims.subspace_dim, 4);
        assert_eq!(forward_dims.k_routes, 4);
        let report = gradcheck_module(GradOp::Forward, &forward_dims, 7, DEFAULT_STEP, 1e-4)
            .map_err(|e| format!("forward: {e}"))?;
        if !report.passed() {
            return Err(format!(
                "forward status {:?} after {} attempts",
                report.status, report.attempts
            ));
        }

        let elapsed = start.elapsed().as_secs_f64();
        if elapsed >= 60.0 {
            return Err(format!("took {elapsed:.1}s, limit 60s"));
        }
        Ok(format!(
            "isolated ops within 1e-5 (worst honest coordinate {max_isolated:.3e}), \
             composed forward within 1e-4, in {elapsed:.1}s"
        ))
    };
    verdict(5, "gradient certification", run());
}

#[test]
fn criterion_06_shape_contract() {
    let run = || -> Outcome {
        let cases = [
            ("3 heads, S = C/3", 3usize, 4usize, true),
            ("4 heads, S = C/4", 4, 3, true),
            ("4 heads, S = C/3", 4, 4, true),
            ("3 heads, S = C/3, tail off", 3, 4, false),
        ];
        for (label, n_heads, subspace_dim, tail) in cases {
            let config = MhsConfig {
                c_l: 12,
                n_heads,
                subspace_dim,
                tail_projection: tail,
                ..MhsConfig::default()
            };
            let weights = init_weights(&config, 17).map_err(|e| format!("{label}: {e}"))?;
            let mut rng = seeded(18);
            let x = draw(&mut rng, &[2, 3, 5, 12], -1.0, 1.0);
            let y = forward(&x, &weights, &config).map_err(|e| format!("{label}: {e}"))?;
            if y.shape() != x.shape() {
                return Err(format!(
                    "{label}: shape {:?} in, {:?} out",
                    x.shape(),
                    y.shape()
                ));
            }
        }

        let invalid = MhsConfig {
            c_l: 12,
            n_heads: 4,
            subspace_dim: 4,
            tail_projection: false,
            ..MhsConfig::default()
        };
        match invalid.validate() {
            Ok(()) => Err("tail-off with 4 * 4 != 12 was accepted".into()),
            Err(e) => Ok(format!(
                "four configs preserve shape; mismatched tail-off rejected with: {e}"
            )),
        }
    };
    verdict(6, "shape contract", run());
}

#[test]
fn criterion_07_parameter_direction() {
    use mhs::weights::param_count;
    let run = || -> Outcome {
        let config = |n_heads: usize, subspace_dim: usize, tail: bool| MhsConfig {
            c_l: 96,
            n_heads,
            subspace_dim,
            tail_projection: tail,
            ..MhsConfig::default()
        };
        let base = param_count(&config(3, 32, true))
            .map_err(|e| e.to_string())?
            .total();
        let narrow = param_count(&config(4, 24, true))
            .map_err(|e| e.to_string())?
            .total();
        let wide = param_count(&config(4, 32, true))
            .map_err(|e| e.to_string())?
            .total();
        if narrow >= base {
            return Err(format!(
                "4 narrow heads {narrow} not below 3 wide heads {base}"
            ));
        }
        if wide <= base {
            return Err(format!("4 wide heads {wide} not above 3 wide heads {base}"));
        }
        let no_tail = param_count(&config(3, 32, false))
            .map_err(|e| e.to_string())?
            .total();
        let saved = base - no_tail;
        if saved != 96 * 3 * 32 {
            return Err(format!("tail removal saved {saved}, expected 96 * 3 * 32"));
        }
        Ok(format!(
            "{narrow} < {base} < {wide}; tail removal saves exactly {saved}"
        ))
    };
    verdict(7, "parameter-count direction", run());
}

fn run_binary(args: &[&str], threads: &str) -> Result<(String, i32), String> {
    let output = Command::new(env!("CARGO_BIN_EXE_mhs"))
        .args(args)
        .env("RAYON_NUM_THREADS", threads)
        .output()
        .map_err(|e| format!("spawn: {e}"))?;
    let stdout = String::from_utf8(output.stdout).map_err(|e| format!("stdout: {e}"))?;
    Ok((stdout, output.status.code().unwrap_or(-1)))
}

fn mask_time_fields(text: &str) -> String {
    text.lines()
        .filter(|line| !line.contains("seconds"))
        .collect::<Vec<_>>()
        .join("\n")
}

#[test]
fn criterion_08_subcommand_determinism() {
    let run = || -> Outcome {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let config_path = dir.path().join("demo.json");
        std::fs::write(
            &config_path,
            r#"{"c_l": 12, "n_heads": 3, "subspace_dim": 4, "seed": 5}"#,
        )
        .map_err(|e| e.to_string())?;
        let config_arg = config_path.to_str().ok_or("non-utf8 temp path")?;

        for (label, args) in [
            ("demo", vec!["demo", "--config", config_arg]),
            ("check all", vec!["check", "all"]),
        ] {
            let mut outputs = Vec::new();
            for threads in ["1", "1", "4"] {
                let (stdout, code) = run_binary(&args, threads)?;
                if code != 0 {
                    return Err(format!("{label} exited {code} with {threads} threads"));
                }
                outputs.push(mask_time_fields(&stdout));
            }
            if outputs[0] != outputs[1] {
                return Err(format!("{label}: two consecutive runs differ"));
            }
            if outputs[0] != outputs[2] {
                return Err(format!("{label}: output depends on the thread count"));
            }
            if outputs[0].is_empty() {
                return Err(format!("{label}: produced no output"));
            }
        }
        Ok("demo and check all byte-identical across reruns and thread counts".into())
    };
    verdict(8, "subcommand determinism", run());
}

#[test]
fn criterion_09_bench_checksums() {
    let run = || -> Outcome {
        let settings = BenchSettings {
            reps: 3,
            ..BenchSettings::default()
        };
        assert_eq!((settings.h, settings.w, settings.channels), (64, 64, 32));
        let per_route =
            run_bench(GatherStrategy::PerRouteCopy, &settings).map_err(|e| e.to_string())?;
        let fused = run_bench(GatherStrategy::FusedGather, &settings).map_err(|e| e.to_string())?;
        if per_route.checksum != fused.checksum {
            return Err(format!(
                "checksums diverge: {} vs {}",
                per_route.checksum, fused.checksum
            ));
        }
        if per_route.elements_per_second <= 0.0 || fused.elements_per_second <= 0.0 {
            return Err("throughput not positive".into());
        }
        Ok(format!(
            "64x64, 32 channels: both strategies report checksum {}",
            per_route.checksum
        ))
    };
    verdict(9, "benchmark checksum agreement", run());
}

#[test]
fn criterion_10_weights_round_trip() {
    let run = || -> Outcome {
        let config = MhsConfig {
            c_l: 12,
            n_heads: 3,
            subspace_dim: 4,
            ..MhsConfig::default()
        };
        let weights = init_weights(&config, 77).map_err(|e| e.to_string())?;
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let path = dir.path().join("weights.mhsw");
        save_weights(&weights, &path).map_err(|e| e.to_string())?;
        let restored = load_weights(&path, &config).map_err(|e| e.to_string())?;
        for ((name, a), (_, b)) in weights.entries().iter().zip(restored.entries()) {
            if !a.bits_eq(b) {
                return Err(format!("tensor {name} changed across the round trip"));
            }
        }

        let good = std::fs::read(&path).map_err(|e| e.to_string())?;
        let mut corrupt = good.clone();
        corrupt[0] ^= 0xFF;
        let bad_path = dir.path().join("bad.mhsw");
        std::fs::write(&bad_path, &corrupt).map_err(|e| e.to_string())?;
        match load_weights(&bad_path, &config) {
            Err(Error::Format { .. }) => {}
            Err(e) => return Err(format!("magic corruption gave the wrong error kind: {e}")),
            Ok(_) => return Err("corrupted magic was accepted".into()),
        }

        let cut = dir.path().join("cut.mhsw");
        std::fs::write(&cut, &good[..good.len() - 9]).map_err(|e| e.to_string())?;
        match load_weights(&cut, &config) {
            Err(Error::Format { .. }) => {}
            Err(e) => return Err(format!("truncation gave the wrong error kind: {e}")),
            Ok(_) => return Err("truncated file was accepted".into()),
        }
        Ok("bit-exact restore; corrupted magic and truncation rejected".into())
    };
    verdict(10, "weights round trip", run());
}
