//! Embedding section fusion: collapse the K position-aligned sections of one
//! head into a single section. Four schemes: plain sum, a mixture of mean
//! and max pooling, coefficient-of-variation gating of the sum, and the
//! pooling mixture combined with the same gate.

use crate::error::{Error, Result};
use crate::tensor::{sigmoid, Reduction, Tensor};

/// K position-aligned sections from one head, laid out [B, K, S, L].
#[derive(Debug, Clone, PartialEq)]
pub struct SectionStack {
    data: Tensor,
}

impl SectionStack {
    pub fn new(data: Tensor) -> Result<Self> {
        if data.rank() != 4 {
            return Err(Error::dim("SectionStack", data.shape(), &[0, 0, 0, 0]));
        }
        Ok(SectionStack { data })
    }

    /// Stack per-route sections, each [B, S, L], along a new K axis.
    pub fn from_sections(sections: &[Tensor]) -> Result<Self> {
        let first = sections
            .first()
            .ok_or_else(|| Error::Validation("section stack needs at least one section".into()))?;
        if first.rank() != 3 {
            return Err(Error::dim("SectionStack", first.shape(), &[0, 0, 0]));
        }
        let (b, s, l) = (first.shape()[0], first.shape()[1], first.shape()[2]);
        for sec in sections {
            if sec.shape() != [b, s, l] {
                return Err(Error::dim("SectionStack", sec.shape(), first.shape()));
            }
        }
        let k = sections.len();
        let plane = s * l;
        let mut out = Vec::with_capacity(b * k * plane);
        for batch in 0..b {
            for sec in sections {
                out.extend_from_slice(&sec.data()[batch * plane..(batch + 1) * plane]);
            }
        }
        Ok(SectionStack {
            data: Tensor::new([b, k, s, l], out)?,
        })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn k(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn batch(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn seq_len(&self) -> usize {
        self.data.shape()[3]
    }
}

/// Gate applied to the coefficient of variation before it scales a fused
/// section. The thresholded ReLU is the reference choice; the sigmoid is a
/// smooth alternative selectable in config but not covered by golden files.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CvGate {
    ThresholdRelu,
    Sigmoid,
}

impl CvGate {
    pub fn apply(self, cv: f64, t: f64) -> f64 {
        match self {
            CvGate::ThresholdRelu => (cv - t).max(0.0),
            CvGate::Sigmoid => sigmoid(cv - t),
        }
    }
}

/// Fusion scheme plus its parameters. `w` is the live [1, 2] pooling mix
/// (mean weight, max weight) for the schemes that pool.
#[derive(Debug, Clone, PartialEq)]
pub enum EsfScheme {
    Sum,
    MixturePooling {
        w: Tensor,
    },
    CvScaling {
        t: f64,
        eps: f64,
        gate: CvGate,
    },
    MixPoolCv {
        w: Tensor,
        t: f64,
        eps: f64,
        gate: CvGate,
    },
}

impl EsfScheme {
    pub fn validate(&self) -> Result<()> {
        if let EsfScheme::MixturePooling { w } | EsfScheme::MixPoolCv { w, .. } = self {
            if w.len() != 2 {
                return Err(Error::Validation(format!(
                    "pooling mix must have exactly two entries, got shape {:?}",
                    w.shape()
                )));
            }
        }
        if let EsfScheme::CvScaling { t, eps, .. } | EsfScheme::MixPoolCv { t, eps, .. } = self {
            if *t < 0.0 {
                return Err(Error::Validation(format!(
                    "gate threshold t must be >= 0, got {t}"
                )));
            }
            if *eps <= 0.0 {
                return Err(Error::Validation(format!("cv eps must be > 0, got {eps}")));
            }
        }
        Ok(())
    }

    pub fn uses_pool_weights(&self) -> bool {
        matches!(
            self,
            EsfScheme::MixturePooling { .. } | EsfScheme::MixPoolCv { .. }
        )
    }

    /// Same scheme with the pooling mix replaced (used to run a config-level
    /// scheme with weights loaded from a file).
    pub fn with_pool_weights(&self, w: &Tensor) -> EsfScheme {
        match self {
            EsfScheme::MixturePooling { .. } => EsfScheme::MixturePooling { w: w.clone() },
            EsfScheme::MixPoolCv { t, eps, gate, .. } => EsfScheme::MixPoolCv {
                w: w.clone(),
                t: *t,
                eps: *eps,
                gate: *gate,
            },
            other => other.clone(),
        }
    }

    /// Apply the scheme to a stack, producing the fused [B, S, L] section.
    pub fn fuse(&self, stack: &SectionStack) -> Result<Tensor> {
        self.validate()?;
        match self {
            EsfScheme::Sum => fuse_sum(stack),
            EsfScheme::MixturePooling { w } => fuse_mixpool(stack, w),
            EsfScheme::CvScaling { t, eps, gate } => fuse_cv_scale_gated(stack, *t, *eps, *gate),
            EsfScheme::MixPoolCv { w, t, eps, gate } => {
                fuse_mixpool_cv_gated(stack, w, *t, *eps, *gate)
            }
        }
    }
}

/// Elementwise sum over the K axis, in ascending route order.
pub fn fuse_sum(stack: &SectionStack) -> Result<Tensor> {
    stack.tensor().reduce(1, Reduction::Sum)
}

/// `w[0] * mean + w[1] * max` over the K axis, pointwise.
pub fn fuse_mixpool(stack: &SectionStack, w: &Tensor) -> Result<Tensor> {
    if w.len() != 2 {
        return Err(Error::dim("fuse_mixpool", w.shape(), &[1, 2]));
    }
    let mean = stack.tensor().reduce(1, Reduction::Mean)?;
    let max = stack.tensor().reduce(1, Reduction::Max)?;
    mean.scale(w.data()[0]).add(&max.scale(w.data()[1]))
}

/// Route-sensitivity measure, pointwise over (B, S, L): population standard
/// deviation across the K sections divided by the mean deviation from the
/// per-point minimum, `std / (mean(y - min) + eps)`. Identical sections give
/// exactly 0 thanks to the eps term.
pub fn coefficient_variation(stack: &SectionStack, eps: f64) -> Result<Tensor> {
    if stack.k() < 2 {
        return Err(Error::Contract(
            "coefficient of variation needs at least two sections; use the sum scheme for K = 1"
                .into(),
        ));
    }
    if eps <= 0.0 {
        return Err(Error::Validation(format!("cv eps must be > 0, got {eps}")));
    }
    let std = stack.tensor().reduce(1, Reduction::Std)?;
    let mean = stack.tensor().reduce(1, Reduction::Mean)?;
    let min = stack.tensor().reduce(1, Reduction::Min)?;
    let denom = mean.sub(&min)?.add(&Tensor::scalar(eps))?;
    let mut out = std;
    for (v, d) in out.data_mut().iter_mut().zip(denom.data()) {
        *v /= d;
    }
    Ok(out)
}

/// Sum fused section scaled by the thresholded-ReLU CV gate.
pub fn fuse_cv_scale(stack: &SectionStack, t: f64, eps: f64) -> Result<Tensor> {
    fuse_cv_scale_gated(stack, t, eps, CvGate::ThresholdRelu)
}

pub fn fuse_cv_scale_gated(stack: &SectionStack, t: f64, eps: f64, gate: CvGate) -> Result<Tensor> {
    let cv = coefficient_variation(stack, eps)?;
    let mut out = fuse_sum(stack)?;
    for (v, &c) in out.data_mut().iter_mut().zip(cv.data()) {
        *v *= gate.apply(c, t);
    }
    Ok(out)
}

/// Pooling-mixture section scaled by the thresholded-ReLU CV gate.
pub fn fuse_mixpool_cv(stack: &SectionStack, w: &Tensor, t: f64, eps: f64) -> Result<Tensor> {
    fuse_mixpool_cv_gated(stack, w, t, eps, CvGate::ThresholdRelu)
}

pub fn fuse_mixpool_cv_gated(
    stack: &SectionStack,
    w: &Tensor,
    t: f64,
    eps: f64,
    gate: CvGate,
) -> Result<Tensor> {
    let cv = coefficient_variation(stack, eps)?;
    let mut out = fuse_mixpool(stack, w)?;
    for (v, &c) in out.data_mut().iter_mut().zip(cv.data()) {
        *v *= gate.apply(c, t);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// One-point stack with the given per-route values.
    fn probe(values: &[f64]) -> SectionStack {
        SectionStack::new(Tensor::new([1, values.len(), 1, 1], values.to_vec()).unwrap()).unwrap()
    }

    const EPS: f64 = 1e-6;

    #[test]
    fn sum_hand_cases() {
        let twice = probe(&[0.7, 0.7]);
        assert_eq!(fuse_sum(&twice).unwrap().data()[0], 1.4);
        let single = probe(&[0.7]);
        assert_eq!(fuse_sum(&single).unwrap().data()[0], 0.7);
        assert_eq!(
            fuse_sum(&probe(&[0.0, 0.0, 0.0, 1.0])).unwrap().data()[0],
            1.0
        );
    }

    #[test]
    fn mixpool_hand_cases() {
        let stack = probe(&[1.0, 3.0]);
        let mean_only = Tensor::new([1, 2], vec![1.0, 0.0]).unwrap();
        assert_eq!(fuse_mixpool(&stack, &mean_only).unwrap().data()[0], 2.0);
        let max_only = Tensor::new([1, 2], vec![0.0, 1.0]).unwrap();
        assert_eq!(fuse_mixpool(&stack, &max_only).unwrap().data()[0], 3.0);
        let half = Tensor::new([1, 2], vec![0.5, 0.5]).unwrap();
        assert_eq!(fuse_mixpool(&stack, &half).unwrap().data()[0], 2.5);
    }

    #[test]
    fn cv_probe_value() {
        // {0,0,0,1}: std = sqrt(3)/4, mean deviation from min = 1/4
        let cv = coefficient_variation(&probe(&[0.0, 0.0, 0.0, 1.0]), EPS).unwrap();
        assert!((cv.data()[0] - 3.0f64.sqrt()).abs() <= 1e-5);
    }

    #[test]
    fn cv_identical_sections_is_exactly_zero() {
        let cv = coefficient_variation(&probe(&[0.4, 0.4, 0.4]), EPS).unwrap();
        assert_eq!(cv.data()[0], 0.0);
    }

    #[test]
    fn cv_needs_two_sections() {
        let err = coefficient_variation(&probe(&[1.0]), EPS).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
        assert!(fuse_cv_scale(&probe(&[1.0]), 0.5, EPS).is_err());
    }

    #[test]
    fn cv_invariant_under_shift_and_positive_scale() {
        let base = [0.3, -1.1, 0.9, 2.0];
        let cv0 = coefficient_variation(&probe(&base), EPS).unwrap().data()[0];
        let shifted: Vec<f64> = base.iter().map(|v| v + 5.0).collect();
        let cv_shift = coefficient_variation(&probe(&shifted), EPS).unwrap().data()[0];
        assert!((cv_shift - cv0).abs() / cv0 <= 1e-6);
        let scaled: Vec<f64> = base.iter().map(|v| v * 3.7).collect();
        let cv_scale = coefficient_variation(&probe(&scaled), EPS).unwrap().data()[0];
        assert!((cv_scale - cv0).abs() / cv0 <= 1e-6);
    }

    #[test]
    fn cv_scale_hand_value() {
        let z3 = fuse_cv_scale(&probe(&[0.0, 0.0, 0.0, 1.0]), 0.5, EPS).unwrap();
        assert!((z3.data()[0] - (3.0f64.sqrt() - 0.5)).abs() <= 1e-5);
    }

    #[test]
    fn gate_zeroes_identical_sections_exactly() {
        for t in [0.5, 0.0] {
            let z3 = fuse_cv_scale(&probe(&[2.5, 2.5, 2.5, 2.5]), t, EPS).unwrap();
            assert_eq!(z3.data()[0], 0.0, "t = {t}");
        }
        let w = Tensor::new([1, 2], vec![0.5, 0.5]).unwrap();
        let z4 = fuse_mixpool_cv(&probe(&[2.5, 2.5, 2.5]), &w, 0.5, EPS).unwrap();
        assert_eq!(z4.data()[0], 0.0);
    }

    #[test]
    fn mixpool_cv_sum_equivalent_weighting() {
        // w = [K, 0] turns the mean back into the sum (K a power of two, so
        // the rescaling is exact in floating point)
        let stack = probe(&[0.3, -0.7, 1.9, 0.5]);
        let w = Tensor::new([1, 2], vec![4.0, 0.0]).unwrap();
        let z4 = fuse_mixpool_cv(&stack, &w, 0.1, EPS).unwrap();
        let z3 = fuse_cv_scale(&stack, 0.1, EPS).unwrap();
        assert_eq!(z4.data()[0], z3.data()[0]);
    }

    #[test]
    fn mixpool_cv_hand_value() {
        let stack = probe(&[1.0, 3.0]);
        let w = Tensor::new([1, 2], vec![0.5, 0.5]).unwrap();
        let z4 = fuse_mixpool_cv(&stack, &w, 0.0, EPS).unwrap();
        // y_cv = std{1,3} / (mean{0,2} + eps) = 1/(1 + eps)
        let expect = 2.5 * (1.0 / (1.0 + EPS));
        assert!((z4.data()[0] - expect).abs() <= 1e-12);
    }

    #[test]
    fn sum_equals_scaled_mean_pool_for_power_of_two_k() {
        for values in [[0.3f64, -0.7].as_slice(), &[0.1, 2.3, -0.5, 0.9]] {
            let stack = probe(values);
            let k = values.len() as f64;
            let w = Tensor::new([1, 2], vec![1.0, 0.0]).unwrap();
            let sum = fuse_sum(&stack).unwrap();
            let mean = fuse_mixpool(&stack, &w).unwrap();
            assert_eq!(sum.data()[0], mean.data()[0] * k);
        }
    }

    #[test]
    fn fusion_is_symmetric_in_route_order() {
        let base = [0.3, -1.1, 0.9, 2.0];
        let perms: [[usize; 4]; 3] = [[1, 0, 3, 2], [3, 2, 1, 0], [2, 3, 0, 1]];
        let w = Tensor::new([1, 2], vec![0.4, 0.6]).unwrap();
        let reference = (
            fuse_sum(&probe(&base)).unwrap().data()[0],
            fuse_mixpool(&probe(&base), &w).unwrap().data()[0],
            fuse_cv_scale(&probe(&base), 0.2, EPS).unwrap().data()[0],
            fuse_mixpool_cv(&probe(&base), &w, 0.2, EPS).unwrap().data()[0],
        );
        for perm in perms {
            let shuffled: Vec<f64> = perm.iter().map(|&i| base[i]).collect();
            let stack = probe(&shuffled);
            assert!((fuse_sum(&stack).unwrap().data()[0] - reference.0).abs() <= 1e-12);
            assert!((fuse_mixpool(&stack, &w).unwrap().data()[0] - reference.1).abs() <= 1e-12);
            assert!(
                (fuse_cv_scale(&stack, 0.2, EPS).unwrap().data()[0] - reference.2).abs() <= 1e-12
            );
            assert!(
                (fuse_mixpool_cv(&stack, &w, 0.2, EPS).unwrap().data()[0] - reference.3).abs()
                    <= 1e-12
            );
        }
    }

    #[test]
    fn sigmoid_gate_alternative() {
        let stack = probe(&[0.4, 0.4]);
        // identical sections: cv = 0, so the sigmoid gate passes sigmoid(-t)
        let z = fuse_cv_scale_gated(&stack, 0.5, EPS, CvGate::Sigmoid).unwrap();
        let expect = 0.8 * sigmoid(-0.5);
        assert!((z.data()[0] - expect).abs() <= 1e-15);
    }

    #[test]
    fn scheme_dispatch_and_validation() {
        let stack = probe(&[0.0, 0.0, 0.0, 1.0]);
        assert_eq!(EsfScheme::Sum.fuse(&stack).unwrap().data()[0], 1.0);
        let cv = EsfScheme::CvScaling {
            t: 0.5,
            eps: EPS,
            gate: CvGate::ThresholdRelu,
        };
        assert!((cv.fuse(&stack).unwrap().data()[0] - (3.0f64.sqrt() - 0.5)).abs() <= 1e-5);

        let bad_t = EsfScheme::CvScaling {
            t: -1.0,
            eps: EPS,
            gate: CvGate::ThresholdRelu,
        };
        assert!(bad_t.validate().is_err());
        let bad_eps = EsfScheme::CvScaling {
            t: 0.5,
            eps: 0.0,
            gate: CvGate::ThresholdRelu,
        };
        assert!(bad_eps.validate().is_err());
        let bad_w = EsfScheme::MixturePooling {
            w: Tensor::zeros([3]),
        };
        assert!(bad_w.validate().is_err());
    }

    #[test]
    fn stack_construction_from_sections() {
        let a = Tensor::from_fn([2, 1, 3], |idx| (idx[0] * 3 + idx[2]) as f64);
        let b = a.scale(10.0);
        let stack = SectionStack::from_sections(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(stack.tensor().shape(), &[2, 2, 1, 3]);
        for batch in 0..2 {
            for l in 0..3 {
                assert_eq!(stack.tensor().at(&[batch, 0, 0, l]), a.at(&[batch, 0, l]));
                assert_eq!(stack.tensor().at(&[batch, 1, 0, l]), b.at(&[batch, 0, l]));
            }
        }
        let short = Tensor::zeros([2, 1, 2]);
        assert!(SectionStack::from_sections(&[a, short]).is_err());
    }
}
