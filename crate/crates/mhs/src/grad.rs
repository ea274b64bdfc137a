//! Hand-derived reverse-mode passes for the differentiable core and a
//! central-difference harness that certifies them.
//!
//! Every `*_vjp`/`backward_*` function recomputes its own forward
//! intermediates with the same library calls as the primal op, so the tape
//! matches the checked function bit for bit. Nondifferentiable points follow
//! fixed conventions: relu' at the kink is 0, max/min ties route the
//! cotangent to the lowest index, and the std factor of the variation ratio
//! has derivative 0 at zero variance. The harness only evaluates finite
//! differences at points jittered away from those kinks; a draw that keeps
//! landing on them is reported as inconclusive rather than failed.

use crate::config::{EsfSchemeName, EsfSettings, MhsConfig};
use crate::error::{Error, Result};
use crate::esf::{coefficient_variation, CvGate, EsfScheme, SectionStack};
use crate::forward::{forward, head_stacks, LN_EPS};
use crate::routes::{
    build_route, gather_sequence, scatter_section, GridShape, RouteVariant, ScanRoute,
};
use crate::ssm::{mamba_block, phi, phi_prime, selective_scan, zoh, MambaWeights};
use crate::tensor::{sigmoid, Tensor};
use crate::weights::{init_weights, MhsWeights};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::str::FromStr;

/// Default finite-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;
/// Default pass tolerance for ops checked in isolation.
pub const DEFAULT_TOL_ISOLATED: f64 = 1e-5;
/// Default pass tolerance for the composed module forward.
pub const DEFAULT_TOL_FORWARD: f64 = 1e-4;

/// Minimum distance a drawn point must keep from each kink (gate threshold,
/// max/min ties) before finite differences are trusted.
const JITTER_MARGIN: f64 = 1e-3;
const MAX_ATTEMPTS: u32 = 10;
/// Floor of the relative-error denominator `max(|analytic|, |numeric|, floor)`.
const REL_FLOOR: f64 = 1e-8;
/// Central differences on an order-one loss resolve gradients to roughly
/// `eps * |loss| / (2h)`, a few times 1e-10 at the default step; differences
/// below this floor are measurement noise, so a coordinate only fails when
/// its error clears both this and the relative tolerance.
const FD_RESOLUTION: f64 = 5e-9;
const ISOLATED_PROBE_CAP: usize = 256;
const FORWARD_PROBE_CAP: usize = 40;

// ---------------------------------------------------------------------------
// numeric side
// ---------------------------------------------------------------------------

/// Deterministic probe subset: all coordinates when `len <= cap`, otherwise a
/// seeded sample of `cap` of them, ascending.
pub fn probe_plan(len: usize, cap: usize, seed: u64) -> Vec<usize> {
    if len <= cap {
        (0..len).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut picks = rand::seq::index::sample(&mut rng, len, cap).into_vec();
        picks.sort_unstable();
        picks
    }
}

/// Central-difference Jacobian `(f(x + h e_i) - f(x - h e_i)) / (2h)` over
/// every coordinate of `x`, shaped [y_len, x_len].
pub fn numeric_jacobian(
    f: impl Fn(&Tensor) -> Result<Tensor>,
    x: &Tensor,
    h: f64,
) -> Result<Tensor> {
    let all: Vec<usize> = (0..x.len()).collect();
    numeric_jacobian_probed(f, x, h, &all)
}

/// [`numeric_jacobian`] restricted to the given coordinates, shaped
/// [y_len, probes.len()].
pub fn numeric_jacobian_probed(
    f: impl Fn(&Tensor) -> Result<Tensor>,
    x: &Tensor,
    h: f64,
    probes: &[usize],
) -> Result<Tensor> {
    if h <= 0.0 || !h.is_finite() {
        return Err(Error::Domain(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    let mut columns: Vec<Vec<f64>> = Vec::with_capacity(probes.len());
    let mut y_len = None;
    for &i in probes {
        if i >= x.len() {
            return Err(Error::dim("numeric_jacobian", x.shape(), &[i]));
        }
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let yp = f(&plus)?;
        let ym = f(&minus)?;
        if !yp.is_finite() || !ym.is_finite() {
            return Err(Error::Domain(
                "probed function returned non-finite values".into(),
            ));
        }
        if yp.shape() != ym.shape() || *y_len.get_or_insert(yp.len()) != yp.len() {
            return Err(Error::dim("numeric_jacobian", yp.shape(), ym.shape()));
        }
        columns.push(
            yp.data()
                .iter()
                .zip(ym.data())
                .map(|(p, m)| (p - m) / (2.0 * h))
                .collect(),
        );
    }
    let rows = y_len.unwrap_or(0);
    let mut out = vec![0.0f64; rows * probes.len()];
    for (ci, col) in columns.iter().enumerate() {
        for (r, v) in col.iter().enumerate() {
            out[r * probes.len() + ci] = *v;
        }
    }
    Tensor::new([rows, probes.len()], out)
}

// ---------------------------------------------------------------------------
// elementary adjoints
// ---------------------------------------------------------------------------

fn dsilu(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// Cotangents of `y = a . b`: `(gy . b^T, a^T . gy)`.
pub fn matmul_vjp(a: &Tensor, b: &Tensor, gy: &Tensor) -> Result<(Tensor, Tensor)> {
    let ga = gy.matmul(&b.transpose2()?)?;
    let gb = a.transpose2()?.matmul(gy)?;
    Ok((ga, gb))
}

/// Cotangents of layer normalization along `axis`; returns
/// `(gx, ggamma, gbeta)`. At an exactly zero denominator (possible only with
/// eps = 0) the input cotangent of that group is 0, matching the forward
/// guard.
pub fn layer_norm_vjp(
    x: &Tensor,
    axis: usize,
    gamma: &Tensor,
    eps: f64,
    gy: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    if gy.shape() != x.shape() {
        return Err(Error::dim("layer_norm_vjp", gy.shape(), x.shape()));
    }
    if axis >= x.rank() || gamma.len() != x.shape()[axis] {
        return Err(Error::dim("layer_norm_vjp", x.shape(), gamma.shape()));
    }
    let extent = x.shape()[axis];
    let inner: usize = x.shape()[axis + 1..].iter().product();
    let outer: usize = x.shape()[..axis].iter().product();
    let e = extent as f64;
    let mut gx = vec![0.0f64; x.len()];
    let mut ggamma = vec![0.0f64; extent];
    let mut gbeta = vec![0.0f64; extent];
    let xd = x.data();
    let gyd = gy.data();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * extent * inner + i;
            let mut sum = 0.0;
            for j in 0..extent {
                sum += xd[base + j * inner];
            }
            let mean = sum / e;
            let mut var = 0.0;
            for j in 0..extent {
                let d = xd[base + j * inner] - mean;
                var += d * d;
            }
            var /= e;
            let denom = (var + eps).sqrt();
            let mut mean_dxhat = 0.0;
            let mut mean_dxhat_xhat = 0.0;
            let mut xhat = vec![0.0f64; extent];
            let mut dxhat = vec![0.0f64; extent];
            for j in 0..extent {
                xhat[j] = if denom == 0.0 {
                    0.0
                } else {
                    (xd[base + j * inner] - mean) / denom
                };
                dxhat[j] = gyd[base + j * inner] * gamma.data()[j];
                ggamma[j] += gyd[base + j * inner] * xhat[j];
                gbeta[j] += gyd[base + j * inner];
                mean_dxhat += dxhat[j];
                mean_dxhat_xhat += dxhat[j] * xhat[j];
            }
            mean_dxhat /= e;
            mean_dxhat_xhat /= e;
            for j in 0..extent {
                gx[base + j * inner] = if denom == 0.0 {
                    0.0
                } else {
                    (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat) / denom
                };
            }
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), gx)?,
        Tensor::new([extent], ggamma)?,
        Tensor::new([extent], gbeta)?,
    ))
}

/// Reverse-time adjoint of the linear recurrence: with
/// `lambda_t = a_bar_{t+1} (.) lambda_{t+1} + c_t * gy_t`, returns
/// `(gx, ga_bar, gb_bar, gc)` shaped like the inputs (which may be `[N]` or
/// `[L, N]` as in the forward scan).
pub fn backward_recurrence(
    abar: &Tensor,
    bbar: &Tensor,
    c: &Tensor,
    x: &Tensor,
    gy: &Tensor,
) -> Result<(Tensor, Tensor, Tensor, Tensor)> {
    if x.rank() != 1 || gy.shape() != x.shape() {
        return Err(Error::dim("backward_recurrence", gy.shape(), x.shape()));
    }
    let l = x.len();
    let n = abar.shape()[abar.rank() - 1];
    for t in [bbar, c] {
        if t.shape()[t.rank() - 1] != n {
            return Err(Error::dim("backward_recurrence", abar.shape(), t.shape()));
        }
    }
    let row = |t: &Tensor, step: usize| -> Result<Vec<f64>> {
        match t.rank() {
            1 => Ok(t.data().to_vec()),
            2 if t.shape()[0] == l => Ok(t.data()[step * n..(step + 1) * n].to_vec()),
            _ => Err(Error::dim("backward_recurrence", t.shape(), &[l, n])),
        }
    };

    let mut h = vec![0.0f64; l * n];
    for t in 0..l {
        let a_row = row(abar, t)?;
        let b_row = row(bbar, t)?;
        let xt = x.data()[t];
        for j in 0..n {
            let prev = if t > 0 { h[(t - 1) * n + j] } else { 0.0 };
            h[t * n + j] = a_row[j] * prev + b_row[j] * xt;
        }
    }

    let mut gx = vec![0.0f64; l];
    let mut ga = vec![0.0f64; abar.len()];
    let mut gb = vec![0.0f64; bbar.len()];
    let mut gc = vec![0.0f64; c.len()];
    let slot = |len: usize, t: usize, j: usize| if len == n { j } else { t * n + j };
    let (la, lb, lc) = (ga.len(), gb.len(), gc.len());
    let mut lam = vec![0.0f64; n];
    for t in (0..l).rev() {
        let a_row = row(abar, t)?;
        let b_row = row(bbar, t)?;
        let c_row = row(c, t)?;
        let gyt = gy.data()[t];
        for j in 0..n {
            gc[slot(lc, t, j)] += gyt * h[t * n + j];
            lam[j] += c_row[j] * gyt;
        }
        let prev = |j: usize| if t > 0 { h[(t - 1) * n + j] } else { 0.0 };
        for j in 0..n {
            ga[slot(la, t, j)] += lam[j] * prev(j);
            gb[slot(lb, t, j)] += lam[j] * x.data()[t];
            gx[t] += b_row[j] * lam[j];
            lam[j] *= a_row[j];
        }
    }
    Ok((
        Tensor::new([l], gx)?,
        Tensor::new(abar.shape().to_vec(), ga)?,
        Tensor::new(bbar.shape().to_vec(), gb)?,
        Tensor::new(c.shape().to_vec(), gc)?,
    ))
}

// ---------------------------------------------------------------------------
// section-fusion adjoint
// ---------------------------------------------------------------------------

/// Cotangents produced by [`backward_esf`].
#[derive(Debug, Clone)]
pub struct EsfGrads {
    /// [B, K, S, L] cotangent of the section stack.
    pub stack: Tensor,
    /// [1, 2] cotangent of the pooling mix, present for pooling schemes.
    pub pool_w: Option<Tensor>,
}

/// Exact reverse-mode of the fusion scheme as implemented: max/min route the
/// cotangent to the lowest attaining index and the thresholded gate has
/// derivative 0 on its clamped side.
pub fn backward_esf(scheme: &EsfScheme, stack: &SectionStack, gy: &Tensor) -> Result<EsfGrads> {
    scheme.validate()?;
    let st = stack.tensor();
    let (b, k, s, l) = (stack.batch(), stack.k(), stack.channels(), stack.seq_len());
    if gy.shape() != [b, s, l] {
        return Err(Error::dim("backward_esf", gy.shape(), &[b, s, l]));
    }
    let mut gst = vec![0.0f64; st.len()];
    let mut gw = [0.0f64; 2];
    let kf = k as f64;
    let data = st.data();
    let mut ys = vec![0.0f64; k];
    for bi in 0..b {
        for si in 0..s {
            for li in 0..l {
                let at = |kk: usize| ((bi * k + kk) * s + si) * l + li;
                for (kk, y) in ys.iter_mut().enumerate() {
                    *y = data[at(kk)];
                }
                let g = gy.data()[(bi * s + si) * l + li];
                match scheme {
                    EsfScheme::Sum => {
                        for kk in 0..k {
                            gst[at(kk)] += g;
                        }
                    }
                    EsfScheme::MixturePooling { w } => {
                        let (mean, max, argmax) = pool_stats(&ys);
                        gw[0] += g * mean;
                        gw[1] += g * max;
                        for kk in 0..k {
                            gst[at(kk)] += g * w.data()[0] / kf;
                        }
                        gst[at(argmax)] += g * w.data()[1];
                    }
                    EsfScheme::CvScaling { t, eps, gate } => {
                        let cv = CvPoint::of(&ys, *eps);
                        let z1: f64 = ys.iter().sum();
                        let gate_v = gate.apply(cv.value, *t);
                        let gz1 = g * gate_v;
                        let gcv = g * z1 * gate_slope(*gate, cv.value, *t);
                        for kk in 0..k {
                            gst[at(kk)] += gz1 + gcv * cv.d(kk, &ys);
                        }
                    }
                    EsfScheme::MixPoolCv { w, t, eps, gate } => {
                        let cv = CvPoint::of(&ys, *eps);
                        let (mean, max, argmax) = pool_stats(&ys);
                        let z2 = w.data()[0] * mean + w.data()[1] * max;
                        let gate_v = gate.apply(cv.value, *t);
                        let gz2 = g * gate_v;
                        gw[0] += gz2 * mean;
                        gw[1] += gz2 * max;
                        let gcv = g * z2 * gate_slope(*gate, cv.value, *t);
                        for kk in 0..k {
                            gst[at(kk)] += gz2 * w.data()[0] / kf + gcv * cv.d(kk, &ys);
                        }
                        gst[at(argmax)] += gz2 * w.data()[1];
                    }
                }
            }
        }
    }
    Ok(EsfGrads {
        stack: Tensor::new(st.shape().to_vec(), gst)?,
        pool_w: scheme
            .uses_pool_weights()
            .then(|| Tensor::new([1, 2], gw.to_vec()).expect("fixed shape")),
    })
}

fn pool_stats(ys: &[f64]) -> (f64, f64, usize) {
    let mean = ys.iter().sum::<f64>() / ys.len() as f64;
    let mut max = ys[0];
    let mut argmax = 0;
    for (kk, &y) in ys.iter().enumerate().skip(1) {
        if y > max {
            max = y;
            argmax = kk;
        }
    }
    (mean, max, argmax)
}

fn gate_slope(gate: CvGate, cv: f64, t: f64) -> f64 {
    match gate {
        CvGate::ThresholdRelu => {
            if cv > t {
                1.0
            } else {
                0.0
            }
        }
        CvGate::Sigmoid => {
            let s = sigmoid(cv - t);
            s * (1.0 - s)
        }
    }
}

/// One point of the variation ratio `std / (mean - min + eps)` with
/// everything needed for its derivative.
struct CvPoint {
    value: f64,
    mean: f64,
    std: f64,
    denom: f64,
    argmin: usize,
    k: f64,
}

impl CvPoint {
    fn of(ys: &[f64], eps: f64) -> CvPoint {
        let k = ys.len() as f64;
        let mean = ys.iter().sum::<f64>() / k;
        let all_equal = ys.iter().all(|&y| y == ys[0]);
        let std = if all_equal {
            0.0
        } else {
            (ys.iter().map(|&y| (y - mean) * (y - mean)).sum::<f64>() / k).sqrt()
        };
        let mut min = ys[0];
        let mut argmin = 0;
        for (kk, &y) in ys.iter().enumerate().skip(1) {
            if y < min {
                min = y;
                argmin = kk;
            }
        }
        let denom = mean - min + eps;
        CvPoint {
            value: std / denom,
            mean,
            std,
            denom,
            argmin,
            k,
        }
    }

    /// d(cv)/d(ys[kk]); the std factor contributes 0 at zero variance.
    fn d(&self, kk: usize, ys: &[f64]) -> f64 {
        let dstd = if self.std == 0.0 {
            0.0
        } else {
            (ys[kk] - self.mean) / (self.k * self.std)
        };
        let ddenom = 1.0 / self.k - if kk == self.argmin { 1.0 } else { 0.0 };
        (dstd - self.value * ddenom) / self.denom
    }
}

// ---------------------------------------------------------------------------
// selective scan and block adjoints
// ---------------------------------------------------------------------------

/// Forward intermediates of one selective scan, stored step by step.
struct ScanTape {
    pre: Vec<f64>, // [l * d] timescale pre-activation
    dt: Vec<f64>,  // [l * d]
    bt: Vec<f64>,  // [l * n]
    ct: Vec<f64>,  // [l * n]
    h: Vec<f64>,   // [l * d * n]
    y: Tensor,
}

fn project_into(u: &[f64], w: &Tensor, bias: &Tensor, out: &mut [f64]) {
    let cols = w.shape()[1];
    out.copy_from_slice(bias.data());
    for (i, &ui) in u.iter().enumerate() {
        let row = &w.data()[i * cols..(i + 1) * cols];
        for (o, &wj) in out.iter_mut().zip(row) {
            *o += ui * wj;
        }
    }
}

/// Recomputes [`selective_scan`] with the same operations in the same order,
/// keeping every intermediate.
fn selective_scan_tape(u: &Tensor, w: &MambaWeights) -> Result<ScanTape> {
    if !u.is_finite() {
        return Err(Error::Domain("selective_scan input is not finite".into()));
    }
    let d_dim = w.inner_dim();
    if u.rank() != 2 || u.shape()[1] != d_dim {
        return Err(Error::dim("selective_scan_vjp", u.shape(), &[0, d_dim]));
    }
    let n = w.state_dim();
    let l = u.shape()[0];
    let mut tape = ScanTape {
        pre: vec![0.0; l * d_dim],
        dt: vec![0.0; l * d_dim],
        bt: vec![0.0; l * n],
        ct: vec![0.0; l * n],
        h: vec![0.0; l * d_dim * n],
        y: Tensor::zeros([0]),
    };
    let mut h = vec![0.0f64; d_dim * n];
    let mut y = Vec::with_capacity(l * d_dim);
    let mut buf_d = vec![0.0f64; d_dim];
    for t in 0..l {
        let ut = &u.data()[t * d_dim..(t + 1) * d_dim];
        project_into(ut, &w.w_delta, &w.b_delta, &mut buf_d);
        tape.pre[t * d_dim..(t + 1) * d_dim].copy_from_slice(&buf_d);
        for v in buf_d.iter_mut() {
            *v = crate::tensor::softplus(*v);
        }
        tape.dt[t * d_dim..(t + 1) * d_dim].copy_from_slice(&buf_d);
        project_into(ut, &w.w_b, &w.b_b, &mut tape.bt[t * n..(t + 1) * n]);
        project_into(ut, &w.w_c, &w.b_c, &mut tape.ct[t * n..(t + 1) * n]);
        for d in 0..d_dim {
            let dt = tape.dt[t * d_dim + d];
            let hd = &mut h[d * n..(d + 1) * n];
            let mut yd = 0.0;
            for j in 0..n {
                let (abar, bbar) = zoh(dt, w.a.data()[d * n + j], tape.bt[t * n + j]);
                hd[j] = abar * hd[j] + bbar * ut[d];
                yd += tape.ct[t * n + j] * hd[j];
            }
            y.push(yd + w.d_skip.data()[d] * ut[d]);
        }
        tape.h[t * d_dim * n..(t + 1) * d_dim * n].copy_from_slice(&h);
    }
    tape.y = Tensor::new([l, d_dim], y)?;
    Ok(tape)
}

fn mamba_zeros_like(w: &MambaWeights) -> MambaWeights {
    MambaWeights {
        w_in: Tensor::zeros(w.w_in.shape().to_vec()),
        w_gate: Tensor::zeros(w.w_gate.shape().to_vec()),
        conv_w: w.conv_w.as_ref().map(|c| Tensor::zeros(c.shape().to_vec())),
        w_delta: Tensor::zeros(w.w_delta.shape().to_vec()),
        b_delta: Tensor::zeros(w.b_delta.shape().to_vec()),
        w_b: Tensor::zeros(w.w_b.shape().to_vec()),
        b_b: Tensor::zeros(w.b_b.shape().to_vec()),
        w_c: Tensor::zeros(w.w_c.shape().to_vec()),
        b_c: Tensor::zeros(w.b_c.shape().to_vec()),
        a: Tensor::zeros(w.a.shape().to_vec()),
        d_skip: Tensor::zeros(w.d_skip.shape().to_vec()),
        w_out: Tensor::zeros(w.w_out.shape().to_vec()),
    }
}

fn acc(into: &mut Tensor, from: &Tensor) {
    for (a, b) in into.data_mut().iter_mut().zip(from.data()) {
        *a += b;
    }
}

fn mamba_acc(into: &mut MambaWeights, from: &MambaWeights) {
    acc(&mut into.w_in, &from.w_in);
    acc(&mut into.w_gate, &from.w_gate);
    if let (Some(a), Some(b)) = (&mut into.conv_w, &from.conv_w) {
        for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
            *x += y;
        }
    }
    acc(&mut into.w_delta, &from.w_delta);
    acc(&mut into.b_delta, &from.b_delta);
    acc(&mut into.w_b, &from.w_b);
    acc(&mut into.b_b, &from.b_b);
    acc(&mut into.w_c, &from.w_c);
    acc(&mut into.b_c, &from.b_c);
    acc(&mut into.a, &from.a);
    acc(&mut into.d_skip, &from.d_skip);
    acc(&mut into.w_out, &from.w_out);
}

/// Cotangents of [`selective_scan`]: input cotangent plus gradients for the
/// scan-side tensors (`w_delta`, `b_delta`, `w_b`, `b_b`, `w_c`, `b_c`, `a`,
/// `d_skip`); the projection tensors not used by the op stay zero.
pub fn selective_scan_vjp(
    u: &Tensor,
    w: &MambaWeights,
    gy: &Tensor,
) -> Result<(Tensor, MambaWeights)> {
    let tape = selective_scan_tape(u, w)?;
    selective_scan_vjp_with_tape(u, w, &tape, gy)
}

fn selective_scan_vjp_with_tape(
    u: &Tensor,
    w: &MambaWeights,
    tape: &ScanTape,
    gy: &Tensor,
) -> Result<(Tensor, MambaWeights)> {
    let d_dim = w.inner_dim();
    let n = w.state_dim();
    let l = u.shape()[0];
    if gy.shape() != [l, d_dim] {
        return Err(Error::dim("selective_scan_vjp", gy.shape(), &[l, d_dim]));
    }
    let mut grads = mamba_zeros_like(w);
    let mut gu = vec![0.0f64; l * d_dim];
    let mut lam = vec![0.0f64; d_dim * n];
    let mut gpre = vec![0.0f64; d_dim];
    let mut gb_row = vec![0.0f64; n];
    let mut gc_row = vec![0.0f64; n];
    let a = w.a.data();
    for t in (0..l).rev() {
        let ut = &u.data()[t * d_dim..(t + 1) * d_dim];
        let gyt = &gy.data()[t * d_dim..(t + 1) * d_dim];
        let ht = &tape.h[t * d_dim * n..(t + 1) * d_dim * n];
        let bt = &tape.bt[t * n..(t + 1) * n];
        let ct = &tape.ct[t * n..(t + 1) * n];
        gb_row.fill(0.0);
        gc_row.fill(0.0);
        for d in 0..d_dim {
            grads.d_skip.data_mut()[d] += gyt[d] * ut[d];
            gu[t * d_dim + d] += gyt[d] * w.d_skip.data()[d];
            for j in 0..n {
                gc_row[j] += gyt[d] * ht[d * n + j];
                lam[d * n + j] += ct[j] * gyt[d];
            }
        }
        for d in 0..d_dim {
            let dt = tape.dt[t * d_dim + d];
            let mut gdt = 0.0;
            for j in 0..n {
                let z = dt * a[d * n + j];
                let ez = z.exp();
                let ph = phi(z);
                let php = phi_prime(z);
                let hprev = if t > 0 {
                    tape.h[(t - 1) * d_dim * n + d * n + j]
                } else {
                    0.0
                };
                let lm = lam[d * n + j];
                let gabar = lm * hprev;
                let gbbar = lm * ut[d];
                gu[t * d_dim + d] += ph * dt * bt[j] * lm;
                gdt += gabar * a[d * n + j] * ez + gbbar * (ph + z * php) * bt[j];
                grads.a.data_mut()[d * n + j] += gabar * dt * ez + gbbar * dt * dt * php * bt[j];
                gb_row[j] += gbbar * ph * dt;
                lam[d * n + j] = lm * ez;
            }
            gpre[d] = gdt * sigmoid(tape.pre[t * d_dim + d]);
        }
        for i in 0..d_dim {
            let ui = ut[i];
            for (dd, &gp) in gpre.iter().enumerate() {
                grads.w_delta.data_mut()[i * d_dim + dd] += ui * gp;
                gu[t * d_dim + i] += w.w_delta.data()[i * d_dim + dd] * gp;
            }
            for (j, &gb) in gb_row.iter().enumerate() {
                grads.w_b.data_mut()[i * n + j] += ui * gb;
                gu[t * d_dim + i] += w.w_b.data()[i * n + j] * gb;
            }
            for (j, &gc) in gc_row.iter().enumerate() {
                grads.w_c.data_mut()[i * n + j] += ui * gc;
                gu[t * d_dim + i] += w.w_c.data()[i * n + j] * gc;
            }
        }
        for (d, &gp) in gpre.iter().enumerate() {
            grads.b_delta.data_mut()[d] += gp;
        }
        for (j, &gb) in gb_row.iter().enumerate() {
            grads.b_b.data_mut()[j] += gb;
        }
        for (j, &gc) in gc_row.iter().enumerate() {
            grads.b_c.data_mut()[j] += gc;
        }
    }
    Ok((Tensor::new([l, d_dim], gu)?, grads))
}

fn causal_conv_vjp(v0: &Tensor, taps: &Tensor, gy: &Tensor) -> Result<(Tensor, Tensor)> {
    let (l, d_dim) = (v0.shape()[0], v0.shape()[1]);
    let width = taps.shape()[1];
    let mut gv = vec![0.0f64; l * d_dim];
    let mut gtaps = vec![0.0f64; taps.len()];
    for t in 0..l {
        for d in 0..d_dim {
            let g = gy.data()[t * d_dim + d];
            for k in 0..width.min(t + 1) {
                gv[(t - k) * d_dim + d] += taps.data()[d * width + k] * g;
                gtaps[d * width + k] += g * v0.data()[(t - k) * d_dim + d];
            }
        }
    }
    Ok((
        Tensor::new([l, d_dim], gv)?,
        Tensor::new(taps.shape().to_vec(), gtaps)?,
    ))
}

/// Cotangents of [`mamba_block`]: the input cotangent and a full gradient for
/// every block tensor.
pub fn mamba_block_vjp(
    x_seq: &Tensor,
    w: &MambaWeights,
    gy: &Tensor,
) -> Result<(Tensor, MambaWeights)> {
    let s = w.channels();
    if x_seq.rank() != 3 || x_seq.shape()[1] != s {
        return Err(Error::dim("mamba_block_vjp", x_seq.shape(), &[0, s, 0]));
    }
    if gy.shape() != x_seq.shape() {
        return Err(Error::dim("mamba_block_vjp", gy.shape(), x_seq.shape()));
    }
    let (b, l) = (x_seq.shape()[0], x_seq.shape()[2]);
    let mut grads = mamba_zeros_like(w);
    let mut gx_seq = vec![0.0f64; x_seq.len()];
    for batch in 0..b {
        let x = Tensor::from_fn([l, s], |idx| x_seq.at(&[batch, idx[1], idx[0]]));
        let v0 = x.matmul(&w.w_in)?;
        let v1 = match &w.conv_w {
            Some(taps) => crate::ssm::causal_depthwise_conv(&v0, taps)?,
            None => v0.clone(),
        };
        let v = v1.silu();
        let xg = x.matmul(&w.w_gate)?;
        let g = xg.silu();
        let tape = selective_scan_tape(&v, w)?;
        let gated = tape.y.mul(&g)?;

        let gy_b = Tensor::from_fn([l, s], |idx| gy.at(&[batch, idx[1], idx[0]]));
        let (g_gated, gw_out) = matmul_vjp(&gated, &w.w_out, &gy_b)?;
        acc(&mut grads.w_out, &gw_out);
        let g_scan_y = g_gated.mul(&g)?;
        let g_g = g_gated.mul(&tape.y)?;
        let (g_v, scan_grads) = selective_scan_vjp_with_tape(&v, w, &tape, &g_scan_y)?;
        mamba_acc(&mut grads, &scan_grads);

        let g_xg = Tensor::new(
            [l, w.inner_dim()],
            g_g.data()
                .iter()
                .zip(xg.data())
                .map(|(gg, &p)| gg * dsilu(p))
                .collect(),
        )?;
        let (g_x_gate, gw_gate) = matmul_vjp(&x, &w.w_gate, &g_xg)?;
        acc(&mut grads.w_gate, &gw_gate);

        let g_v1 = Tensor::new(
            [l, w.inner_dim()],
            g_v.data()
                .iter()
                .zip(v1.data())
                .map(|(gv, &p)| gv * dsilu(p))
                .collect(),
        )?;
        let g_v0 = match &w.conv_w {
            Some(taps) => {
                let (g_v0, g_taps) = causal_conv_vjp(&v0, taps, &g_v1)?;
                if let Some(ct) = &mut grads.conv_w {
                    for (a, b) in ct.data_mut().iter_mut().zip(g_taps.data()) {
                        *a += b;
                    }
                }
                g_v0
            }
            None => g_v1,
        };
        let (g_x_in, gw_in) = matmul_vjp(&x, &w.w_in, &g_v0)?;
        acc(&mut grads.w_in, &gw_in);

        for ch in 0..s {
            for t in 0..l {
                gx_seq[(batch * s + ch) * l + t] +=
                    g_x_gate.data()[t * s + ch] + g_x_in.data()[t * s + ch];
            }
        }
    }
    Ok((Tensor::new(x_seq.shape().to_vec(), gx_seq)?, grads))
}

// ---------------------------------------------------------------------------
// full-module adjoint
// ---------------------------------------------------------------------------

fn mhs_zeros_like(w: &MhsWeights) -> MhsWeights {
    MhsWeights {
        head_proj: w
            .head_proj
            .iter()
            .map(|t| Tensor::zeros(t.shape().to_vec()))
            .collect(),
        mamba: w.mamba.iter().map(mamba_zeros_like).collect(),
        esf_w: w.esf_w.as_ref().map(|t| Tensor::zeros(t.shape().to_vec())),
        ln_gamma: Tensor::zeros(w.ln_gamma.shape().to_vec()),
        ln_beta: Tensor::zeros(w.ln_beta.shape().to_vec()),
        tail_proj: w
            .tail_proj
            .as_ref()
            .map(|t| Tensor::zeros(t.shape().to_vec())),
    }
}

struct HeadTape {
    routes: Vec<ScanRoute>,
    seqs: Vec<Tensor>,
    stack: SectionStack,
}

struct ForwardTape {
    grid: GridShape,
    batch: usize,
    x_cf: Tensor, // [B, C, HW]
    scheme: EsfScheme,
    heads: Vec<HeadTape>,
    cat: Tensor,
    normed: Tensor,
    y: Tensor,
}

/// Recomputes [`forward`] with the same staging and library calls, keeping
/// the intermediates the adjoint needs.
fn forward_tape(x: &Tensor, weights: &MhsWeights, config: &MhsConfig) -> Result<ForwardTape> {
    config.validate()?;
    weights.validate(config)?;
    let shape = x.shape();
    if shape.len() != 4 || shape[3] != config.c_l {
        return Err(Error::dim("forward_vjp", shape, &[config.c_l]));
    }
    let grid = GridShape::new(shape[1], shape[2])?;
    if !x.is_finite() {
        return Err(Error::Domain("forward input has non-finite values".into()));
    }
    let (batch, hw, c_l) = (shape[0], grid.len(), config.c_l);
    let mut cf = vec![0.0f64; batch * c_l * hw];
    for b in 0..batch {
        for p in 0..hw {
            let src = (b * hw + p) * c_l;
            for c in 0..c_l {
                cf[(b * c_l + c) * hw + p] = x.data()[src + c];
            }
        }
    }
    let x_cf = Tensor::new([batch, c_l, hw], cf)?;
    let mut scheme = config.esf.scheme();
    if let Some(w) = &weights.esf_w {
        scheme = scheme.with_pool_weights(w);
    }
    let patterns = config.pattern_assignment()?;
    let s = config.subspace_dim;

    let mut heads = Vec::with_capacity(config.n_heads);
    for h in 0..config.n_heads {
        let mut sub = Vec::with_capacity(batch * s * hw);
        for b in 0..batch {
            let plane = Tensor::new(
                [c_l, hw],
                x_cf.data()[b * c_l * hw..(b + 1) * c_l * hw].to_vec(),
            )?;
            sub.extend_from_slice(weights.head_proj[h].matmul(&plane)?.data());
        }
        let plane_grids = Tensor::new([batch, s, grid.h, grid.w], sub)?;
        let mut routes = Vec::with_capacity(config.k_routes);
        let mut seqs = Vec::with_capacity(config.k_routes);
        let mut sections = Vec::with_capacity(config.k_routes);
        for v in 0..config.k_routes {
            let route = build_route(patterns[h], RouteVariant::new(v as u8)?, grid);
            let seq = gather_sequence(&plane_grids, &route)?;
            let scanned = mamba_block(&seq, &weights.mamba[h])?;
            sections.push(scatter_section(&scanned, &route)?);
            routes.push(route);
            seqs.push(seq);
        }
        let stack = SectionStack::from_sections(&sections)?;
        heads.push(HeadTape {
            routes,
            seqs,
            stack,
        });
    }

    let fused_c = config.fused_channels();
    let mut cat = Vec::with_capacity(batch * fused_c * hw);
    let fused: Vec<Tensor> = heads
        .iter()
        .map(|h| scheme.fuse(&h.stack))
        .collect::<Result<_>>()?;
    for b in 0..batch {
        for f in &fused {
            cat.extend_from_slice(&f.data()[b * s * hw..(b + 1) * s * hw]);
        }
    }
    let cat = Tensor::new([batch, fused_c, hw], cat)?;
    let normed = cat.layer_norm(1, &weights.ln_gamma, &weights.ln_beta, LN_EPS)?;
    let (projected, c_out) = match &weights.tail_proj {
        Some(tail) => {
            let mut out = Vec::with_capacity(batch * c_l * hw);
            for b in 0..batch {
                let plane = Tensor::new(
                    [fused_c, hw],
                    normed.data()[b * fused_c * hw..(b + 1) * fused_c * hw].to_vec(),
                )?;
                out.extend_from_slice(tail.matmul(&plane)?.data());
            }
            (Tensor::new([batch, c_l, hw], out)?, c_l)
        }
        None => (normed.clone(), fused_c),
    };
    let mut out = vec![0.0f64; batch * hw * c_out];
    for b in 0..batch {
        for p in 0..hw {
            for c in 0..c_out {
                out[(b * hw + p) * c_out + c] = projected.data()[(b * c_out + c) * hw + p];
            }
        }
    }
    Ok(ForwardTape {
        grid,
        batch,
        x_cf,
        scheme,
        heads,
        cat,
        normed,
        y: Tensor::new([batch, grid.h, grid.w, c_out], out)?,
    })
}

/// Cotangents of the full module forward: the input cotangent and a gradient
/// for every weight tensor.
pub fn forward_vjp(
    x: &Tensor,
    weights: &MhsWeights,
    config: &MhsConfig,
    gy: &Tensor,
) -> Result<(Tensor, MhsWeights)> {
    let tape = forward_tape(x, weights, config)?;
    if gy.shape() != tape.y.shape() {
        return Err(Error::dim("forward_vjp", gy.shape(), tape.y.shape()));
    }
    let (batch, hw) = (tape.batch, tape.grid.len());
    let (s, c_l, fused_c) = (config.subspace_dim, config.c_l, config.fused_channels());
    let c_out = tape.y.shape()[3];
    let mut grads = mhs_zeros_like(weights);

    // channel-last cotangent back to channel-first staging
    let mut g_chan = vec![0.0f64; batch * c_out * hw];
    for b in 0..batch {
        for p in 0..hw {
            for c in 0..c_out {
                g_chan[(b * c_out + c) * hw + p] = gy.data()[(b * hw + p) * c_out + c];
            }
        }
    }

    let g_normed = match &weights.tail_proj {
        Some(tail) => {
            let mut gn = vec![0.0f64; batch * fused_c * hw];
            for b in 0..batch {
                let g_out =
                    Tensor::new([c_l, hw], g_chan[b * c_l * hw..(b + 1) * c_l * hw].to_vec())?;
                let plane = Tensor::new(
                    [fused_c, hw],
                    tape.normed.data()[b * fused_c * hw..(b + 1) * fused_c * hw].to_vec(),
                )?;
                let (g_tail, g_plane) = matmul_vjp(tail, &plane, &g_out)?;
                acc(grads.tail_proj.as_mut().expect("tail present"), &g_tail);
                gn[b * fused_c * hw..(b + 1) * fused_c * hw].copy_from_slice(g_plane.data());
            }
            Tensor::new([batch, fused_c, hw], gn)?
        }
        None => Tensor::new([batch, fused_c, hw], g_chan.clone())?,
    };

    let (g_cat, g_gamma, g_beta) =
        layer_norm_vjp(&tape.cat, 1, &weights.ln_gamma, LN_EPS, &g_normed)?;
    acc(&mut grads.ln_gamma, &g_gamma);
    acc(&mut grads.ln_beta, &g_beta);

    let mut g_x_cf = vec![0.0f64; batch * c_l * hw];
    for (h, head) in tape.heads.iter().enumerate() {
        let mut gf = Vec::with_capacity(batch * s * hw);
        for b in 0..batch {
            let base = b * fused_c * hw + h * s * hw;
            gf.extend_from_slice(&g_cat.data()[base..base + s * hw]);
        }
        let g_fused = Tensor::new([batch, s, hw], gf)?;
        let esf_grads = backward_esf(&tape.scheme, &head.stack, &g_fused)?;
        if let (Some(gw), Some(slot)) = (&esf_grads.pool_w, &mut grads.esf_w) {
            for (a, b) in slot.data_mut().iter_mut().zip(gw.data()) {
                *a += b;
            }
        }

        let k = config.k_routes;
        let mut g_sub = vec![0.0f64; batch * s * hw];
        for (v, route) in head.routes.iter().enumerate() {
            let mut gsec = Vec::with_capacity(batch * s * hw);
            for b in 0..batch {
                for si in 0..s {
                    let base = ((b * k + v) * s + si) * hw;
                    gsec.extend_from_slice(&esf_grads.stack.data()[base..base + hw]);
                }
            }
            let gsec = Tensor::new([batch, s, tape.grid.h, tape.grid.w], gsec)?;
            let g_scanned = gather_sequence(&gsec, route)?;
            let (g_seq, g_mamba) = mamba_block_vjp(&head.seqs[v], &weights.mamba[h], &g_scanned)?;
            mamba_acc(&mut grads.mamba[h], &g_mamba);
            let g_grid = scatter_section(&g_seq, route)?;
            for (aa, bb) in g_sub.iter_mut().zip(g_grid.data()) {
                *aa += bb;
            }
        }

        for b in 0..batch {
            let g_sub_b = Tensor::new([s, hw], g_sub[b * s * hw..(b + 1) * s * hw].to_vec())?;
            let plane = Tensor::new(
                [c_l, hw],
                tape.x_cf.data()[b * c_l * hw..(b + 1) * c_l * hw].to_vec(),
            )?;
            let (g_proj, g_plane) = matmul_vjp(&weights.head_proj[h], &plane, &g_sub_b)?;
            acc(&mut grads.head_proj[h], &g_proj);
            for (aa, bb) in g_x_cf[b * c_l * hw..(b + 1) * c_l * hw]
                .iter_mut()
                .zip(g_plane.data())
            {
                *aa += bb;
            }
        }
    }

    let mut gx = vec![0.0f64; x.len()];
    for b in 0..batch {
        for p in 0..hw {
            for c in 0..c_l {
                gx[(b * hw + p) * c_l + c] = g_x_cf[(b * c_l + c) * hw + p];
            }
        }
    }
    Ok((Tensor::new(x.shape().to_vec(), gx)?, grads))
}

// ---------------------------------------------------------------------------
// harness
// ---------------------------------------------------------------------------

/// Operations the harness can certify.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradOp {
    Recurrence,
    SelectiveScan,
    MambaBlock,
    EsfSum,
    EsfMixpool,
    EsfCv,
    EsfMixpoolCv,
    Forward,
}

impl GradOp {
    pub const ALL: [GradOp; 8] = [
        GradOp::Recurrence,
        GradOp::SelectiveScan,
        GradOp::MambaBlock,
        GradOp::EsfSum,
        GradOp::EsfMixpool,
        GradOp::EsfCv,
        GradOp::EsfMixpoolCv,
        GradOp::Forward,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GradOp::Recurrence => "recurrence",
            GradOp::SelectiveScan => "selective_scan",
            GradOp::MambaBlock => "mamba_block",
            GradOp::EsfSum => "esf_sum",
            GradOp::EsfMixpool => "esf_mixpool",
            GradOp::EsfCv => "esf_cv",
            GradOp::EsfMixpoolCv => "esf_mixpool_cv",
            GradOp::Forward => "forward",
        }
    }
}

impl FromStr for GradOp {
    type Err = Error;

    fn from_str(s: &str) -> Result<GradOp> {
        GradOp::ALL
            .into_iter()
            .find(|op| op.name() == s)
            .ok_or_else(|| Error::Validation(format!("unknown gradient check op {s:?}")))
    }
}

/// Problem sizes for one harness run.
#[derive(Debug, Clone, Copy)]
pub struct CheckDims {
    pub seq_len: usize,
    pub state_dim: usize,
    pub channels: usize,
    pub expansion: usize,
    pub conv_width: usize,
    pub k_routes: usize,
    pub grid: (usize, usize),
    pub c_l: usize,
    pub n_heads: usize,
    pub subspace_dim: usize,
    pub esf_scheme: EsfSchemeName,
}

impl Default for CheckDims {
    fn default() -> Self {
        CheckDims {
            seq_len: 8,
            state_dim: 4,
            channels: 3,
            expansion: 2,
            conv_width: 3,
            k_routes: 4,
            grid: (4, 4),
            c_l: 12,
            n_heads: 3,
            subspace_dim: 4,
            esf_scheme: EsfSchemeName::CvScaling,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradStatus {
    Pass,
    Fail,
    /// The draws kept landing within the jitter margin of a kink; finite
    /// differences are not trustworthy there, so no verdict is given.
    Inconclusive,
}

/// Errors for one checked tensor.
#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    pub probes: usize,
    /// Every probed coordinate was within tolerance or below the
    /// finite-difference resolution floor.
    pub passed: bool,
}

/// Outcome of one harness run.
#[derive(Debug, Clone)]
pub struct GradReport {
    pub op: &'static str,
    pub step: f64,
    pub tol: f64,
    pub attempts: u32,
    pub status: GradStatus,
    pub params: Vec<ParamCheck>,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.status == GradStatus::Pass
    }

    pub fn max_rel_err(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.max_rel_err)
            .fold(0.0, f64::max)
    }
}

type EvalFn<'a> = Box<dyn Fn(&Tensor) -> Result<Tensor> + 'a>;

struct CheckTarget<'a> {
    name: String,
    value: Tensor,
    analytic: Tensor,
    eval: EvalFn<'a>,
}

fn dot(gy: &Tensor, y: &Tensor) -> f64 {
    gy.data().iter().zip(y.data()).map(|(a, b)| a * b).sum()
}

fn run_targets(
    targets: &[CheckTarget],
    gy: &Tensor,
    h: f64,
    cap: usize,
    probe_seed: u64,
    tol: f64,
) -> Result<Vec<ParamCheck>> {
    let mut out = Vec::with_capacity(targets.len());
    for (ti, target) in targets.iter().enumerate() {
        let probes = probe_plan(target.value.len(), cap, probe_seed.wrapping_add(ti as u64));
        let loss = |t: &Tensor| -> Result<Tensor> {
            let y = (target.eval)(t)?;
            if y.shape() != gy.shape() {
                return Err(Error::dim("gradcheck", y.shape(), gy.shape()));
            }
            Tensor::new([1], vec![dot(gy, &y)])
        };
        let numeric = numeric_jacobian_probed(loss, &target.value, h, &probes)?;
        let mut max_abs: f64 = 0.0;
        let mut max_rel: f64 = 0.0;
        let mut passed = true;
        for (pi, &i) in probes.iter().enumerate() {
            let n = numeric.data()[pi];
            let a = target.analytic.data()[i];
            let abs = (a - n).abs();
            let rel = abs / a.abs().max(n.abs()).max(REL_FLOOR);
            max_abs = max_abs.max(abs);
            max_rel = max_rel.max(rel);
            passed &= abs <= FD_RESOLUTION || rel <= tol;
        }
        out.push(ParamCheck {
            name: target.name.clone(),
            max_abs_err: max_abs,
            max_rel_err: max_rel,
            probes: probes.len(),
            passed,
        });
    }
    Ok(out)
}

fn draw(rng: &mut ChaCha8Rng, shape: impl Into<Vec<usize>>, lo: f64, hi: f64) -> Tensor {
    let shape = shape.into();
    let count = shape.iter().product();
    Tensor::new(shape, (0..count).map(|_| rng.gen_range(lo..hi)).collect())
        .expect("shape/data agree by construction")
}

fn draw_mamba(rng: &mut ChaCha8Rng, s: usize, d: usize, n: usize, width: usize) -> MambaWeights {
    MambaWeights {
        w_in: draw(rng, [s, d], -0.7, 0.7),
        w_gate: draw(rng, [s, d], -0.7, 0.7),
        conv_w: (width > 0).then(|| draw(rng, [d, width], -0.6, 0.6)),
        w_delta: draw(rng, [d, d], -0.4, 0.4),
        b_delta: draw(rng, [d], -2.5, -1.0),
        w_b: draw(rng, [d, n], -0.7, 0.7),
        b_b: draw(rng, [n], -0.3, 0.3),
        w_c: draw(rng, [d, n], -0.7, 0.7),
        b_c: draw(rng, [n], -0.3, 0.3),
        a: draw(rng, [d, n], -1.2, -0.2),
        d_skip: draw(rng, [d], -1.0, 1.0),
        w_out: draw(rng, [d, s], -0.7, 0.7),
    }
}

fn esf_scheme_for(op: GradOp, rng: &mut ChaCha8Rng) -> EsfScheme {
    let w = draw(rng, [1, 2], -1.0, 1.0);
    match op {
        GradOp::EsfSum => EsfScheme::Sum,
        GradOp::EsfMixpool => EsfScheme::MixturePooling { w },
        GradOp::EsfCv => EsfScheme::CvScaling {
            t: 0.5,
            eps: 1e-6,
            gate: CvGate::ThresholdRelu,
        },
        GradOp::EsfMixpoolCv => EsfScheme::MixPoolCv {
            w,
            t: 0.5,
            eps: 1e-6,
            gate: CvGate::ThresholdRelu,
        },
        _ => unreachable!("not a fusion op"),
    }
}

/// True when the stack keeps every reduction the scheme uses away from ties
/// and the thresholded gate away from its kink.
fn stack_is_regular(stack: &SectionStack, scheme: &EsfScheme) -> Result<bool> {
    let (need_max, need_min, relu_gate) = match scheme {
        EsfScheme::Sum => (false, false, None),
        EsfScheme::MixturePooling { .. } => (true, false, None),
        EsfScheme::CvScaling { t, eps, gate } => (
            false,
            true,
            matches!(gate, CvGate::ThresholdRelu).then_some((*t, *eps)),
        ),
        EsfScheme::MixPoolCv { t, eps, gate, .. } => (
            true,
            true,
            matches!(gate, CvGate::ThresholdRelu).then_some((*t, *eps)),
        ),
    };
    let (b, k, s, l) = (stack.batch(), stack.k(), stack.channels(), stack.seq_len());
    if (need_max || need_min) && k >= 2 {
        let data = stack.tensor().data();
        let mut ys = vec![0.0f64; k];
        for bi in 0..b {
            for si in 0..s {
                for li in 0..l {
                    for (kk, y) in ys.iter_mut().enumerate() {
                        *y = data[((bi * k + kk) * s + si) * l + li];
                    }
                    ys.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
                    if need_min && ys[1] - ys[0] <= JITTER_MARGIN {
                        return Ok(false);
                    }
                    if need_max && ys[k - 1] - ys[k - 2] <= JITTER_MARGIN {
                        return Ok(false);
                    }
                }
            }
        }
    }
    if let Some((t, eps)) = relu_gate {
        let cv = coefficient_variation(stack, eps)?;
        if cv.data().iter().any(|&c| (c - t).abs() <= JITTER_MARGIN) {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Draw inputs from the seed, jitter away from nondifferentiable points, and
/// compare analytic against central-difference gradients. A persistent tie
/// after 10 redraws yields `Inconclusive`.
pub fn gradcheck_module(
    op: GradOp,
    dims: &CheckDims,
    seed: u64,
    h: f64,
    tol: f64,
) -> Result<GradReport> {
    if h <= 0.0 || !h.is_finite() {
        return Err(Error::Domain(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    for attempt in 0..MAX_ATTEMPTS {
        let attempt_seed = seed
            .wrapping_add((attempt as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
            .wrapping_add(attempt as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(attempt_seed);
        let Some(params) = check_once(op, dims, &mut rng, h, attempt_seed, tol)? else {
            continue;
        };
        let status = if params.iter().all(|p| p.passed) {
            GradStatus::Pass
        } else {
            GradStatus::Fail
        };
        return Ok(GradReport {
            op: op.name(),
            step: h,
            tol,
            attempts: attempt + 1,
            status,
            params,
        });
    }
    Ok(GradReport {
        op: op.name(),
        step: h,
        tol,
        attempts: MAX_ATTEMPTS,
        status: GradStatus::Inconclusive,
        params: Vec::new(),
    })
}

fn check_once(
    op: GradOp,
    dims: &CheckDims,
    rng: &mut ChaCha8Rng,
    h: f64,
    probe_seed: u64,
    tol: f64,
) -> Result<Option<Vec<ParamCheck>>> {
    match op {
        GradOp::Recurrence => {
            let (l, n) = (dims.seq_len, dims.state_dim);
            let abar = draw(rng, [n], -0.95, 0.95);
            let bbar = draw(rng, [n], -1.0, 1.0);
            let c = draw(rng, [n], -1.0, 1.0);
            let x = draw(rng, [l], -1.0, 1.0);
            let gy = draw(rng, [l], -1.0, 1.0);
            let (gx, ga, gb, gc) = backward_recurrence(&abar, &bbar, &c, &x, &gy)?;
            let targets = vec![
                CheckTarget {
                    name: "x".into(),
                    value: x.clone(),
                    analytic: gx,
                    eval: Box::new({
                        let (a, b, c) = (abar.clone(), bbar.clone(), c.clone());
                        move |t| crate::ssm::recurrence_scan(&a, &b, &c, t)
                    }),
                },
                CheckTarget {
                    name: "a_bar".into(),
                    value: abar.clone(),
                    analytic: ga,
                    eval: Box::new({
                        let (b, c, x) = (bbar.clone(), c.clone(), x.clone());
                        move |t| crate::ssm::recurrence_scan(t, &b, &c, &x)
                    }),
                },
                CheckTarget {
                    name: "b_bar".into(),
                    value: bbar.clone(),
                    analytic: gb,
                    eval: Box::new({
                        let (a, c, x) = (abar.clone(), c.clone(), x.clone());
                        move |t| crate::ssm::recurrence_scan(&a, t, &c, &x)
                    }),
                },
                CheckTarget {
                    name: "c".into(),
                    value: c.clone(),
                    analytic: gc,
                    eval: Box::new({
                        let (a, b, x) = (abar.clone(), bbar.clone(), x.clone());
                        move |t| crate::ssm::recurrence_scan(&a, &b, t, &x)
                    }),
                },
            ];
            Ok(Some(run_targets(
                &targets,
                &gy,
                h,
                ISOLATED_PROBE_CAP,
                probe_seed,
                tol,
            )?))
        }
        GradOp::SelectiveScan => {
            let (l, n) = (dims.seq_len, dims.state_dim);
            let s = dims.channels;
            let d = s * dims.expansion;
            let w = draw_mamba(rng, s, d, n, dims.conv_width);
            let u = draw(rng, [l, d], -1.0, 1.0);
            let gy = draw(rng, [l, d], -1.0, 1.0);
            let (gu, gw) = selective_scan_vjp(&u, &w, &gy)?;
            let mut targets = vec![CheckTarget {
                name: "u".into(),
                value: u.clone(),
                analytic: gu,
                eval: Box::new({
                    let w = w.clone();
                    move |t| selective_scan(t, &w)
                }),
            }];
            type Field = (
                &'static str,
                fn(&MambaWeights) -> &Tensor,
                fn(&mut MambaWeights, Tensor),
            );
            let fields: [Field; 8] = [
                ("w_delta", |w| &w.w_delta, |w, t| w.w_delta = t),
                ("b_delta", |w| &w.b_delta, |w, t| w.b_delta = t),
                ("w_b", |w| &w.w_b, |w, t| w.w_b = t),
                ("b_b", |w| &w.b_b, |w, t| w.b_b = t),
                ("w_c", |w| &w.w_c, |w, t| w.w_c = t),
                ("b_c", |w| &w.b_c, |w, t| w.b_c = t),
                ("a", |w| &w.a, |w, t| w.a = t),
                ("d_skip", |w| &w.d_skip, |w, t| w.d_skip = t),
            ];
            for (name, get, set) in fields {
                targets.push(CheckTarget {
                    name: name.into(),
                    value: get(&w).clone(),
                    analytic: get(&gw).clone(),
                    eval: Box::new({
                        let (w, u) = (w.clone(), u.clone());
                        move |t| {
                            let mut w2 = w.clone();
                            set(&mut w2, t.clone());
                            selective_scan(&u, &w2)
                        }
                    }),
                });
            }
            Ok(Some(run_targets(
                &targets,
                &gy,
                h,
                ISOLATED_PROBE_CAP,
                probe_seed,
                tol,
            )?))
        }
        GradOp::MambaBlock => {
            let (l, n) = (dims.seq_len, dims.state_dim);
            let s = dims.channels;
            let d = s * dims.expansion;
            let w = draw_mamba(rng, s, d, n, dims.conv_width);
            let x = draw(rng, [1, s, l], -1.0, 1.0);
            let gy = draw(rng, [1, s, l], -1.0, 1.0);
            let (gx, gw) = mamba_block_vjp(&x, &w, &gy)?;
            let mut targets = vec![CheckTarget {
                name: "x".into(),
                value: x.clone(),
                analytic: gx,
                eval: Box::new({
                    let w = w.clone();
                    move |t| mamba_block(t, &w)
                }),
            }];
            type Field = (
                &'static str,
                fn(&MambaWeights) -> &Tensor,
                fn(&mut MambaWeights, Tensor),
            );
            let mut fields: Vec<Field> = vec![
                ("w_in", |w| &w.w_in, |w, t| w.w_in = t),
                ("w_gate", |w| &w.w_gate, |w, t| w.w_gate = t),
                ("w_delta", |w| &w.w_delta, |w, t| w.w_delta = t),
                ("b_delta", |w| &w.b_delta, |w, t| w.b_delta = t),
                ("w_b", |w| &w.w_b, |w, t| w.w_b = t),
                ("b_b", |w| &w.b_b, |w, t| w.b_b = t),
                ("w_c", |w| &w.w_c, |w, t| w.w_c = t),
                ("b_c", |w| &w.b_c, |w, t| w.b_c = t),
                ("a", |w| &w.a, |w, t| w.a = t),
                ("d_skip", |w| &w.d_skip, |w, t| w.d_skip = t),
                ("w_out", |w| &w.w_out, |w, t| w.w_out = t),
            ];
            if w.conv_w.is_some() {
                fields.push((
                    "conv_w",
                    |w| w.conv_w.as_ref().expect("conv present"),
                    |w, t| w.conv_w = Some(t),
                ));
            }
            for (name, get, set) in fields {
                targets.push(CheckTarget {
                    name: name.into(),
                    value: get(&w).clone(),
                    analytic: get(&gw).clone(),
                    eval: Box::new({
                        let (w, x) = (w.clone(), x.clone());
                        move |t| {
                            let mut w2 = w.clone();
                            set(&mut w2, t.clone());
                            mamba_block(&x, &w2)
                        }
                    }),
                });
            }
            Ok(Some(run_targets(
                &targets,
                &gy,
                h,
                ISOLATED_PROBE_CAP,
                probe_seed,
                tol,
            )?))
        }
        GradOp::EsfSum | GradOp::EsfMixpool | GradOp::EsfCv | GradOp::EsfMixpoolCv => {
            let (k, s, l) = (dims.k_routes, dims.channels, dims.seq_len);
            let scheme = esf_scheme_for(op, rng);
            let stack = SectionStack::new(draw(rng, [1, k, s, l], -1.0, 1.0))?;
            if !stack_is_regular(&stack, &scheme)? {
                return Ok(None);
            }
            let gy = draw(rng, [1, s, l], -1.0, 1.0);
            let grads = backward_esf(&scheme, &stack, &gy)?;
            let mut targets = vec![CheckTarget {
                name: "stack".into(),
                value: stack.tensor().clone(),
                analytic: grads.stack.clone(),
                eval: Box::new({
                    let scheme = scheme.clone();
                    move |t| scheme.fuse(&SectionStack::new(t.clone())?)
                }),
            }];
            if let (Some(gw), EsfScheme::MixturePooling { w } | EsfScheme::MixPoolCv { w, .. }) =
                (&grads.pool_w, &scheme)
            {
                targets.push(CheckTarget {
                    name: "w".into(),
                    value: w.clone(),
                    analytic: gw.clone(),
                    eval: Box::new({
                        let (scheme, stack) = (scheme.clone(), stack.tensor().clone());
                        move |t| {
                            scheme
                                .with_pool_weights(t)
                                .fuse(&SectionStack::new(stack.clone())?)
                        }
                    }),
                });
            }
            Ok(Some(run_targets(
                &targets,
                &gy,
                h,
                ISOLATED_PROBE_CAP,
                probe_seed,
                tol,
            )?))
        }
        GradOp::Forward => {
            let config = MhsConfig {
                c_l: dims.c_l,
                n_heads: dims.n_heads,
                subspace_dim: dims.subspace_dim,
                k_routes: dims.k_routes,
                patterns: None,
                esf: EsfSettings {
                    scheme: dims.esf_scheme,
                    ..Default::default()
                },
                tail_projection: true,
                ssm: crate::config::SsmSettings {
                    state_dim: dims.state_dim,
                    expansion: dims.expansion,
                    conv_width: dims.conv_width,
                    conv_on: dims.conv_width > 0,
                },
                seed: 0,
            };
            let weights = init_weights(&config, probe_seed)?;
            let (gh, gw_) = dims.grid;
            // wider inputs push the route sections apart, which keeps the
            // max/min ties clear of the jitter margin far more often
            let x = draw(rng, [1, gh, gw_, dims.c_l], -2.5, 2.5);
            let live_scheme = match &weights.esf_w {
                Some(w) => config.esf.scheme().with_pool_weights(w),
                None => config.esf.scheme(),
            };
            for stack in head_stacks(&x, &weights, &config)? {
                if !stack_is_regular(&stack, &live_scheme)? {
                    return Ok(None);
                }
            }
            let out_c = if config.tail_projection {
                config.c_l
            } else {
                config.fused_channels()
            };
            let gy = draw(rng, [1, gh, gw_, out_c], -1.0, 1.0);
            let (gx, gweights) = forward_vjp(&x, &weights, &config, &gy)?;

            let mut targets = vec![CheckTarget {
                name: "x".into(),
                value: x.clone(),
                analytic: gx,
                eval: Box::new({
                    let (w, c) = (weights.clone(), config.clone());
                    move |t| forward(t, &w, &c)
                }),
            }];
            for (idx, (name, _)) in weights.entries().iter().enumerate() {
                let analytic = {
                    let entries = gweights.entries();
                    entries[idx].1.clone()
                };
                let value = weights.entries()[idx].1.clone();
                targets.push(CheckTarget {
                    name: name.clone(),
                    value,
                    analytic,
                    eval: Box::new({
                        let (w, c, x) = (weights.clone(), config.clone(), x.clone());
                        move |t| {
                            let mut w2 = w.clone();
                            set_entry(&mut w2, idx, t.clone());
                            forward(&x, &w2, &c)
                        }
                    }),
                });
            }
            Ok(Some(run_targets(
                &targets,
                &gy,
                h,
                FORWARD_PROBE_CAP,
                probe_seed,
                tol,
            )?))
        }
    }
}

/// Replace the weight tensor at `index` of the canonical [`MhsWeights::entries`]
/// enumeration.
fn set_entry(w: &mut MhsWeights, index: usize, value: Tensor) {
    let mut slots: Vec<&mut Tensor> = Vec::new();
    for (proj, mamba) in w.head_proj.iter_mut().zip(&mut w.mamba) {
        slots.push(proj);
        slots.push(&mut mamba.w_in);
        slots.push(&mut mamba.w_gate);
        if let Some(conv) = &mut mamba.conv_w {
            slots.push(conv);
        }
        slots.push(&mut mamba.w_delta);
        slots.push(&mut mamba.b_delta);
        slots.push(&mut mamba.w_b);
        slots.push(&mut mamba.b_b);
        slots.push(&mut mamba.w_c);
        slots.push(&mut mamba.b_c);
        slots.push(&mut mamba.a);
        slots.push(&mut mamba.d_skip);
        slots.push(&mut mamba.w_out);
    }
    if let Some(esf) = &mut w.esf_w {
        slots.push(esf);
    }
    slots.push(&mut w.ln_gamma);
    slots.push(&mut w.ln_beta);
    if let Some(tail) = &mut w.tail_proj {
        slots.push(tail);
    }
    *slots[index] = value;
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ssm::recurrence_scan;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn numeric_jacobian_of_square_hits_closed_form() {
        let f = |x: &Tensor| Tensor::new([1], vec![x.data()[0] * x.data()[0]]);
        let x = Tensor::new([1], vec![3.0]).unwrap();
        let jac = numeric_jacobian(f, &x, 1e-5).unwrap();
        assert!((jac.data()[0] - 6.0).abs() <= 1e-9);
    }

    #[test]
    fn numeric_jacobian_of_linear_map_is_near_exact() {
        let f = |x: &Tensor| Ok(x.scale(3.0));
        let x = Tensor::new([4], vec![0.3, -1.0, 2.0, 0.0]).unwrap();
        let jac = numeric_jacobian(f, &x, 1e-5).unwrap();
        assert_eq!(jac.shape(), &[4, 4]);
        for r in 0..4 {
            for c in 0..4 {
                let want = if r == c { 3.0 } else { 0.0 };
                assert!((jac.at(&[r, c]) - want).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn numeric_jacobian_of_relu_away_from_kink() {
        let f = |x: &Tensor| Ok(x.relu());
        let x = Tensor::new([1], vec![1.0]).unwrap();
        let jac = numeric_jacobian(f, &x, 1e-5).unwrap();
        assert!((jac.data()[0] - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn numeric_jacobian_rejects_nonfinite_outputs() {
        let f = |x: &Tensor| Tensor::new([1], vec![(x.data()[0] - 1.0).ln()]);
        let x = Tensor::new([1], vec![1.0]).unwrap();
        assert!(matches!(
            numeric_jacobian(f, &x, 1e-3).unwrap_err(),
            Error::Domain(_)
        ));
    }

    #[test]
    fn recurrence_single_step_is_the_chain_rule_product() {
        let abar = Tensor::new([3], vec![0.5, -0.2, 0.9]).unwrap();
        let bbar = Tensor::new([3], vec![1.0, 2.0, -1.0]).unwrap();
        let c = Tensor::new([3], vec![0.3, 0.7, 0.1]).unwrap();
        let x = Tensor::new([1], vec![1.7]).unwrap();
        let gy = Tensor::new([1], vec![1.0]).unwrap();
        let (gx, ..) = backward_recurrence(&abar, &bbar, &c, &x, &gy).unwrap();
        let want: f64 = (0..3).map(|j| c.data()[j] * bbar.data()[j]).sum();
        assert!((gx.data()[0] - want).abs() <= 1e-15);
    }

    #[test]
    fn recurrence_zero_readout_zeroes_input_cotangent() {
        let abar = Tensor::new([2], vec![0.5, 0.25]).unwrap();
        let bbar = Tensor::new([2], vec![1.0, -1.0]).unwrap();
        let c = Tensor::zeros([2]);
        let x = Tensor::new([4], vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        let gy = Tensor::full([4], 1.0);
        let (gx, ga, gb, _) = backward_recurrence(&abar, &bbar, &c, &x, &gy).unwrap();
        assert!(gx.data().iter().all(|&v| v == 0.0));
        assert!(ga.data().iter().all(|&v| v == 0.0));
        assert!(gb.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn recurrence_scalar_case_matches_numeric() {
        // a_bar 1/2, b_bar 1, c 1 over three steps
        let abar = Tensor::new([1], vec![0.5]).unwrap();
        let bbar = Tensor::new([1], vec![1.0]).unwrap();
        let c = Tensor::new([1], vec![1.0]).unwrap();
        let x = Tensor::new([3], vec![1.0, 1.0, 1.0]).unwrap();
        let gy = Tensor::new([3], vec![1.0, -0.5, 2.0]).unwrap();
        let (gx, ga, gb, gc) = backward_recurrence(&abar, &bbar, &c, &x, &gy).unwrap();
        for (value, analytic, eval) in [
            (
                x.clone(),
                gx,
                Box::new(|t: &Tensor| recurrence_scan(&abar, &bbar, &c, t))
                    as Box<dyn Fn(&Tensor) -> Result<Tensor> + '_>,
            ),
            (
                abar.clone(),
                ga,
                Box::new(|t: &Tensor| recurrence_scan(t, &bbar, &c, &x)),
            ),
            (
                bbar.clone(),
                gb,
                Box::new(|t: &Tensor| recurrence_scan(&abar, t, &c, &x)),
            ),
            (
                c.clone(),
                gc,
                Box::new(|t: &Tensor| recurrence_scan(&abar, &bbar, t, &x)),
            ),
        ] {
            let loss = |t: &Tensor| Tensor::new([1], vec![dot(&gy, &eval(t)?)]);
            let jac = numeric_jacobian(loss, &value, 1e-6).unwrap();
            for i in 0..value.len() {
                let n = jac.data()[i];
                let a = analytic.data()[i];
                assert!(
                    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR) <= 1e-7,
                    "{a} vs {n}"
                );
            }
        }
    }

    #[test]
    fn esf_sum_backward_replicates_the_cotangent() {
        let stack = SectionStack::new(draw(&mut rng(3), [2, 3, 2, 4], -1.0, 1.0)).unwrap();
        let gy = draw(&mut rng(4), [2, 2, 4], -1.0, 1.0);
        let grads = backward_esf(&EsfScheme::Sum, &stack, &gy).unwrap();
        for b in 0..2 {
            for k in 0..3 {
                for s in 0..2 {
                    for l in 0..4 {
                        assert_eq!(grads.stack.at(&[b, k, s, l]), gy.at(&[b, s, l]));
                    }
                }
            }
        }
        assert!(grads.pool_w.is_none());
    }

    #[test]
    fn esf_cv_identical_sections_block_the_cotangent() {
        let one = draw(&mut rng(5), [1, 1, 2, 3], -1.0, 1.0);
        let sections: Vec<Tensor> = (0..4)
            .map(|_| one.clone().reshape([1, 2, 3]).unwrap())
            .collect();
        let stack = SectionStack::from_sections(&sections).unwrap();
        let scheme = EsfScheme::CvScaling {
            t: 0.5,
            eps: 1e-6,
            gate: CvGate::ThresholdRelu,
        };
        let gy = draw(&mut rng(6), [1, 2, 3], -1.0, 1.0);
        let grads = backward_esf(&scheme, &stack, &gy).unwrap();
        assert!(grads.stack.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cotangent_doubling_is_exact_scaling() {
        // doubling is a power-of-two scale, so linearity holds bitwise
        let mut r = rng(7);
        let abar = draw(&mut r, [3], -0.9, 0.9);
        let bbar = draw(&mut r, [3], -1.0, 1.0);
        let c = draw(&mut r, [3], -1.0, 1.0);
        let x = draw(&mut r, [5], -1.0, 1.0);
        let gy = draw(&mut r, [5], -1.0, 1.0);
        let once = backward_recurrence(&abar, &bbar, &c, &x, &gy).unwrap();
        let twice = backward_recurrence(&abar, &bbar, &c, &x, &gy.scale(2.0)).unwrap();
        for (a, b) in [
            (&once.0, &twice.0),
            (&once.1, &twice.1),
            (&once.2, &twice.2),
            (&once.3, &twice.3),
        ] {
            assert!(a.scale(2.0).bits_eq(b));
        }

        let stack = SectionStack::new(draw(&mut r, [1, 4, 2, 3], -1.0, 1.0)).unwrap();
        let scheme = EsfScheme::CvScaling {
            t: 0.3,
            eps: 1e-6,
            gate: CvGate::ThresholdRelu,
        };
        let gy2 = draw(&mut r, [1, 2, 3], -1.0, 1.0);
        let e1 = backward_esf(&scheme, &stack, &gy2).unwrap();
        let e2 = backward_esf(&scheme, &stack, &gy2.scale(2.0)).unwrap();
        assert!(e1.stack.scale(2.0).bits_eq(&e2.stack));

        let w = draw_mamba(&mut r, 2, 4, 3, 3);
        let u = draw(&mut r, [5, 4], -1.0, 1.0);
        let gy3 = draw(&mut r, [5, 4], -1.0, 1.0);
        let (gu1, gw1) = selective_scan_vjp(&u, &w, &gy3).unwrap();
        let (gu2, gw2) = selective_scan_vjp(&u, &w, &gy3.scale(2.0)).unwrap();
        assert!(gu1.scale(2.0).bits_eq(&gu2));
        assert!(gw1.a.scale(2.0).bits_eq(&gw2.a));
        assert!(gw1.w_delta.scale(2.0).bits_eq(&gw2.w_delta));
    }

    #[test]
    fn zero_cotangent_zeroes_every_gradient() {
        let mut r = rng(9);
        let w = draw_mamba(&mut r, 2, 4, 3, 3);
        let x = draw(&mut r, [2, 2, 5], -1.0, 1.0);
        let (gx, gw) = mamba_block_vjp(&x, &w, &Tensor::zeros([2, 2, 5])).unwrap();
        assert!(gx.data().iter().all(|&v| v == 0.0));
        assert!(gw.w_in.data().iter().all(|&v| v == 0.0));
        assert!(gw.a.data().iter().all(|&v| v == 0.0));
        assert!(gw.d_skip.data().iter().all(|&v| v == 0.0));

        let config = MhsConfig {
            c_l: 6,
            n_heads: 3,
            subspace_dim: 2,
            ..MhsConfig::default()
        };
        let weights = init_weights(&config, 2).unwrap();
        let input = draw(&mut r, [1, 2, 3, 6], -1.0, 1.0);
        let (gi, gws) =
            forward_vjp(&input, &weights, &config, &Tensor::zeros([1, 2, 3, 6])).unwrap();
        assert!(gi.data().iter().all(|&v| v == 0.0));
        for (_, t) in gws.entries() {
            assert!(t.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn tapes_reproduce_the_primal_ops_bit_for_bit() {
        let mut r = rng(11);
        let w = draw_mamba(&mut r, 3, 6, 4, 3);
        let u = draw(&mut r, [7, 6], -1.0, 1.0);
        let tape = selective_scan_tape(&u, &w).unwrap();
        assert!(tape.y.bits_eq(&selective_scan(&u, &w).unwrap()));

        let config = MhsConfig {
            c_l: 6,
            n_heads: 3,
            subspace_dim: 2,
            ..MhsConfig::default()
        };
        let weights = init_weights(&config, 5).unwrap();
        let x = draw(&mut r, [2, 3, 4, 6], -1.0, 1.0);
        let tape = forward_tape(&x, &weights, &config).unwrap();
        assert!(tape.y.bits_eq(&forward(&x, &weights, &config).unwrap()));
    }

    #[test]
    fn matmul_vjp_matches_numeric() {
        let mut r = rng(13);
        let a = draw(&mut r, [3, 4], -1.0, 1.0);
        let b = draw(&mut r, [4, 2], -1.0, 1.0);
        let gy = draw(&mut r, [3, 2], -1.0, 1.0);
        let (ga, gb) = matmul_vjp(&a, &b, &gy).unwrap();
        let loss_a = |t: &Tensor| Tensor::new([1], vec![dot(&gy, &t.matmul(&b)?)]);
        let jac = numeric_jacobian(loss_a, &a, 1e-6).unwrap();
        for i in 0..a.len() {
            assert!((jac.data()[i] - ga.data()[i]).abs() <= 1e-9);
        }
        let loss_b = |t: &Tensor| Tensor::new([1], vec![dot(&gy, &a.matmul(t)?)]);
        let jac = numeric_jacobian(loss_b, &b, 1e-6).unwrap();
        for i in 0..b.len() {
            assert!((jac.data()[i] - gb.data()[i]).abs() <= 1e-9);
        }
    }

    #[test]
    fn layer_norm_vjp_matches_numeric() {
        let mut r = rng(15);
        let x = draw(&mut r, [2, 5, 3], -1.0, 1.0);
        let gamma = draw(&mut r, [5], 0.5, 1.5);
        let beta = draw(&mut r, [5], -0.5, 0.5);
        let gy = draw(&mut r, [2, 5, 3], -1.0, 1.0);
        let (gx, ggamma, gbeta) = layer_norm_vjp(&x, 1, &gamma, 1e-5, &gy).unwrap();
        let loss_x =
            |t: &Tensor| Tensor::new([1], vec![dot(&gy, &t.layer_norm(1, &gamma, &beta, 1e-5)?)]);
        let jac = numeric_jacobian(loss_x, &x, 1e-5).unwrap();
        for i in 0..x.len() {
            let (n, a) = (jac.data()[i], gx.data()[i]);
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR);
            assert!((a - n).abs() <= FD_RESOLUTION || rel <= 1e-5, "{a} vs {n}");
        }
        let loss_g =
            |t: &Tensor| Tensor::new([1], vec![dot(&gy, &x.layer_norm(1, t, &beta, 1e-5)?)]);
        let jac = numeric_jacobian(loss_g, &gamma, 1e-6).unwrap();
        for i in 0..gamma.len() {
            assert!((jac.data()[i] - ggamma.data()[i]).abs() <= 1e-8);
        }
        let loss_b =
            |t: &Tensor| Tensor::new([1], vec![dot(&gy, &x.layer_norm(1, &gamma, t, 1e-5)?)]);
        let jac = numeric_jacobian(loss_b, &beta, 1e-6).unwrap();
        for i in 0..beta.len() {
            assert!((jac.data()[i] - gbeta.data()[i]).abs() <= 1e-8);
        }
    }

    #[test]
    fn isolated_ops_certify_at_tight_tolerance() {
        let dims = CheckDims {
            state_dim: 2,
            ..CheckDims::default()
        };
        for op in [
            GradOp::Recurrence,
            GradOp::SelectiveScan,
            GradOp::MambaBlock,
            GradOp::EsfSum,
            GradOp::EsfMixpool,
            GradOp::EsfCv,
            GradOp::EsfMixpoolCv,
        ] {
            let report =
                gradcheck_module(op, &dims, 42, DEFAULT_STEP, DEFAULT_TOL_ISOLATED).unwrap();
            assert!(
                report.passed(),
                "{}: status {:?}, max rel {:.3e}",
                report.op,
                report.status,
                report.max_rel_err()
            );
        }
    }

    #[test]
    fn full_forward_certifies_at_relaxed_tolerance() {
        let report = gradcheck_module(
            GradOp::Forward,
            &CheckDims::default(),
            7,
            DEFAULT_STEP,
            DEFAULT_TOL_FORWARD,
        )
        .unwrap();
        assert!(
            report.passed(),
            "status {:?}, max rel {:.3e}, attempts {}",
            report.status,
            report.max_rel_err(),
            report.attempts
        );
        assert!(report.params.iter().any(|p| p.name == "head0.proj"));
        assert!(report.params.iter().any(|p| p.name == "tail.proj"));
    }

    #[test]
    fn degenerate_grid_is_inconclusive_not_failed() {
        // on a 1x1 grid every route coincides, so the min-gap jitter
        // condition can never be met
        let dims = CheckDims {
            grid: (1, 1),
            ..CheckDims::default()
        };
        let report =
            gradcheck_module(GradOp::Forward, &dims, 3, DEFAULT_STEP, DEFAULT_TOL_FORWARD).unwrap();
        assert_eq!(report.status, GradStatus::Inconclusive);
        assert_eq!(report.attempts, 10);
        assert!(report.params.is_empty());
    }
}
