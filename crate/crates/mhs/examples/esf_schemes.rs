//! The four section-fusion schemes, side by side on hand-built stacks.
//!
//! A section stack holds one [B, S, L] activation block per scan route.
//! Fusion collapses the route axis; the CV-gated schemes additionally
//! suppress positions where all routes agree, so only route-sensitive
//! positions survive.

use mhs::esf::{coefficient_variation, CvGate, EsfScheme, SectionStack};
use mhs::{Result, Tensor};

fn schemes() -> Vec<(&'static str, EsfScheme)> {
    let w = Tensor::new([2], vec![0.6, 0.4]).expect("pool weights");
    vec![
        ("sum", EsfScheme::Sum),
        (
            "mixture-pooling",
            EsfScheme::MixturePooling { w: w.clone() },
        ),
        (
            "cv-scaling",
            EsfScheme::CvScaling {
                t: 0.5,
                eps: 1e-6,
                gate: CvGate::ThresholdRelu,
            },
        ),
        (
            "mixpool-cv",
            EsfScheme::MixPoolCv {
                w,
                t: 0.5,
                eps: 1e-6,
                gate: CvGate::Sigmoid,
            },
        ),
    ]
}

fn stack_from_route_values(per_route: &[[f64; 3]]) -> Result<SectionStack> {
    let sections: Vec<Tensor> = per_route
        .iter()
        .map(|vals| Tensor::new([1, 1, 3], vals.to_vec()))
        .collect::<Result<_>>()?;
    SectionStack::from_sections(&sections)
}

fn main() -> Result<()> {
    println!("-- disagreeing routes ------------------------------------");
    let varied = stack_from_route_values(&[
        [1.0, 0.2, -0.5],
        [0.1, 0.2, 0.5],
        [0.4, 0.2, 1.5],
        [-0.3, 0.2, 0.5],
    ])?;
    let cv = coefficient_variation(&varied, 1e-6)?;
    println!("cv per position: {:?}", cv.data());
    for (name, scheme) in schemes() {
        let fused = scheme.fuse(&varied)?;
        println!("{name:<16} -> {:?}", fused.data());
    }

    println!();
    println!("-- all four routes identical ------------------------------");
    let flat = stack_from_route_values(&[[0.7, -0.4, 1.1]; 4])?;
    for (name, scheme) in schemes() {
        let fused = scheme.fuse(&flat)?;
        println!("{name:<16} -> {:?}", fused.data());
    }
    println!("the thresholded-relu gate clamps identical sections to exactly zero;");
    println!(
        "the sigmoid variant only attenuates them (by sigmoid(-t) = {:.3}),",
        1.0 / (1.0 + 0.5f64.exp())
    );
    println!("and the ungated schemes pass them through unchanged");

    println!();
    println!("-- the one-hot probe --------------------------------------");
    let probe = stack_from_route_values(&[
        [0.0, 0.0, 0.0],
        [1.0, 1.0, 1.0],
        [0.0, 0.0, 0.0],
        [0.0, 0.0, 0.0],
    ])?;
    let cv = coefficient_variation(&probe, 1e-6)?;
    println!(
        "sections (0, 1, 0, 0): cv = {:.6} (sqrt(3) = {:.6})",
        cv.data()[0],
        3f64.sqrt()
    );
    let gated = EsfScheme::CvScaling {
        t: 0.5,
        eps: 1e-6,
        gate: CvGate::ThresholdRelu,
    }
    .fuse(&probe)?;
    println!(
        "sum of sections is 1, so the relu-gated output is cv - 0.5 = {:.6}",
        gated.data()[0]
    );
    Ok(())
}
