//! Finite-difference verification of every hand-written backward pass.
//!
//! Each operation is checked at jittered regular points (safely away from
//! gate thresholds and pooling ties, where central differences lie). The
//! isolated kernels must agree with numeric gradients to 1e-5; the fully
//! composed module, whose finite differences stack noise from every stage,
//! gets 1e-4.

use mhs::grad::{
    gradcheck_module, CheckDims, GradOp, GradStatus, DEFAULT_STEP, DEFAULT_TOL_FORWARD,
    DEFAULT_TOL_ISOLATED,
};
use mhs::Result;

fn main() -> Result<()> {
    let dims = CheckDims {
        state_dim: 2,
        ..CheckDims::default()
    };

    println!(
        "{:<16} {:>7} {:>9} {:>13} {:>8}",
        "op", "status", "attempts", "max rel err", "probes"
    );
    let mut forward_report = None;
    for op in GradOp::ALL {
        let (seed, tol, d) = if op == GradOp::Forward {
            (7, DEFAULT_TOL_FORWARD, CheckDims::default())
        } else {
            (42, DEFAULT_TOL_ISOLATED, dims)
        };
        let report = gradcheck_module(op, &d, seed, DEFAULT_STEP, tol)?;
        let probes: usize = report.params.iter().map(|p| p.probes).sum();
        println!(
            "{:<16} {:>7} {:>9} {:>13.3e} {:>8}",
            report.op,
            match report.status {
                GradStatus::Pass => "pass",
                GradStatus::Fail => "FAIL",
                GradStatus::Inconclusive => "n/a",
            },
            report.attempts,
            report.max_rel_err(),
            probes
        );
        assert!(report.passed(), "{} gradient check failed", report.op);
        if op == GradOp::Forward {
            forward_report = Some(report);
        }
    }
    println!();
    println!("a coordinate passes when its relative error meets the tolerance OR its");
    println!("absolute error sits below the finite-difference noise floor (~5e-9 at");
    println!("h = 1e-5); large relative numbers on near-zero gradients are noise, not");
    println!("wrong derivatives, and the forward row above shows exactly that case");

    println!();
    println!("per-tensor detail for the composed forward:");
    let report = forward_report.expect("loop covers Forward");
    for p in &report.params {
        println!(
            "  {:<24} rel {:>9.3e}  abs {:>9.3e}  ({} probes)",
            p.name, p.max_rel_err, p.max_abs_err, p.probes
        );
    }
    Ok(())
}
