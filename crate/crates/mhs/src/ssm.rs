//! Discrete state-space machinery: zero-order-hold discretization, the
//! linear recurrence, its global-convolution twin, and the input-dependent
//! (selective) scan wrapped in a gated sequence block.
//!
//! The state matrix is diagonal throughout, so discretization is elementwise
//! and kernel powers are running products, never matrix powers.

use crate::error::{Error, Result};
use crate::tensor::{softplus, Tensor};

/// Threshold below which `(e^z - 1)/z` switches to its Taylor series.
pub const ZOH_SERIES_THRESHOLD: f64 = 1e-4;

/// `(e^z - 1)/z`, continuous through z = 0 via the series
/// `1 + z/2 + z^2/6` for small `|z|`.
pub(crate) fn phi(z: f64) -> f64 {
    if z.abs() < ZOH_SERIES_THRESHOLD {
        1.0 + z / 2.0 + z * z / 6.0
    } else {
        z.exp_m1() / z
    }
}

/// Derivative of [`phi`]: `((z - 1)e^z + 1)/z^2`, evaluated as
/// `(z e^z - expm1(z))/z^2` to limit cancellation, with the series
/// `1/2 + z/3 + z^2/8 + z^3/30` for small `|z|`.
pub(crate) fn phi_prime(z: f64) -> f64 {
    if z.abs() < ZOH_SERIES_THRESHOLD {
        0.5 + z / 3.0 + z * z / 8.0 + z * z * z / 30.0
    } else {
        (z * z.exp() - z.exp_m1()) / (z * z)
    }
}

/// Scalar zero-order hold: for one state coordinate,
/// `a_bar = exp(delta * a)` and `b_bar = phi(delta * a) * delta * b`.
pub fn zoh(delta: f64, a: f64, b: f64) -> (f64, f64) {
    let z = delta * a;
    (z.exp(), phi(z) * delta * b)
}

/// Continuous parameters of a D-channel diagonal state-space system, bundled
/// for validation. `b_in`/`c_out` are `[N]` when time-invariant or `[L, N]`
/// per step; `delta` is `[1]` or `[L, D]`.
#[derive(Debug, Clone)]
pub struct SsmParams {
    pub a: Tensor,
    pub b_in: Tensor,
    pub c_out: Tensor,
    pub delta: Tensor,
}

impl SsmParams {
    pub fn state_dim(&self) -> usize {
        self.a.shape()[self.a.rank() - 1]
    }

    pub fn channels(&self) -> usize {
        if self.a.rank() == 2 {
            self.a.shape()[0]
        } else {
            1
        }
    }

    pub fn is_time_invariant(&self) -> bool {
        self.b_in.rank() == 1 && self.c_out.rank() == 1 && self.delta.len() == 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.delta.data().iter().any(|&d| d <= 0.0) {
            return Err(Error::Domain(format!(
                "delta must be positive, min is {}",
                self.delta
                    .data()
                    .iter()
                    .cloned()
                    .fold(f64::INFINITY, f64::min)
            )));
        }
        let n = self.state_dim();
        for (name, t) in [("b_in", &self.b_in), ("c_out", &self.c_out)] {
            if t.shape()[t.rank() - 1] != n {
                return Err(Error::Validation(format!(
                    "{name} state extent {} does not match A state extent {n}",
                    t.shape()[t.rank() - 1]
                )));
            }
        }
        Ok(())
    }

    /// Discrete `(a_bar, b_bar)` for channel `d`, shaped `[N]` when
    /// time-invariant and `[L, N]` when any parameter is per-step.
    pub fn discretize_channel(&self, d: usize) -> Result<(Tensor, Tensor)> {
        self.validate()?;
        let n = self.state_dim();
        let a_row: Vec<f64> = if self.a.rank() == 2 {
            (0..n).map(|j| self.a.at(&[d, j])).collect()
        } else {
            self.a.data().to_vec()
        };
        let delta_at = |t: usize| -> f64 {
            if self.delta.len() == 1 {
                self.delta.data()[0]
            } else {
                self.delta.at(&[t, d])
            }
        };
        if self.is_time_invariant() {
            let dt = delta_at(0);
            let mut abar = Vec::with_capacity(n);
            let mut bbar = Vec::with_capacity(n);
            for j in 0..n {
                let (ab, bb) = zoh(dt, a_row[j], self.b_in.data()[j]);
                abar.push(ab);
                bbar.push(bb);
            }
            return Ok((Tensor::new([n], abar)?, Tensor::new([n], bbar)?));
        }
        let l = if self.b_in.rank() == 2 {
            self.b_in.shape()[0]
        } else if self.c_out.rank() == 2 {
            self.c_out.shape()[0]
        } else {
            self.delta.shape()[0]
        };
        let mut abar = Vec::with_capacity(l * n);
        let mut bbar = Vec::with_capacity(l * n);
        for t in 0..l {
            let dt = delta_at(t);
            for j in 0..n {
                let b = if self.b_in.rank() == 2 {
                    self.b_in.at(&[t, j])
                } else {
                    self.b_in.data()[j]
                };
                let (ab, bb) = zoh(dt, a_row[j], b);
                abar.push(ab);
                bbar.push(bb);
            }
        }
        Ok((Tensor::new([l, n], abar)?, Tensor::new([l, n], bbar)?))
    }
}

/// Elementwise zero-order hold over tensors: `delta` is a scalar or matches
/// `a`'s shape, `b` matches `a`. Returns `(a_bar, b_bar)` shaped like `a`.
pub fn discretize(delta: &Tensor, a: &Tensor, b: &Tensor) -> Result<(Tensor, Tensor)> {
    if delta.data().iter().any(|&d| d <= 0.0) {
        return Err(Error::Domain(format!(
            "delta must be positive, min is {}",
            delta.data().iter().cloned().fold(f64::INFINITY, f64::min)
        )));
    }
    if b.shape() != a.shape() {
        return Err(Error::dim("discretize", a.shape(), b.shape()));
    }
    if delta.len() != 1 && delta.shape() != a.shape() {
        return Err(Error::dim("discretize", delta.shape(), a.shape()));
    }
    let mut abar = Vec::with_capacity(a.len());
    let mut bbar = Vec::with_capacity(a.len());
    for i in 0..a.len() {
        let dt = if delta.len() == 1 {
            delta.data()[0]
        } else {
            delta.data()[i]
        };
        let (ab, bb) = zoh(dt, a.data()[i], b.data()[i]);
        abar.push(ab);
        bbar.push(bb);
    }
    Ok((
        Tensor::new(a.shape().to_vec(), abar)?,
        Tensor::new(a.shape().to_vec(), bbar)?,
    ))
}

fn step_row<'a>(t: &'a Tensor, step: usize, op: &'static str, l: usize) -> Result<&'a [f64]> {
    match t.rank() {
        1 => Ok(t.data()),
        2 => {
            if t.shape()[0] != l {
                return Err(Error::dim(op, t.shape(), &[l]));
            }
            let n = t.shape()[1];
            Ok(&t.data()[step * n..(step + 1) * n])
        }
        _ => Err(Error::dim(op, t.shape(), &[l])),
    }
}

/// Single-channel linear recurrence from zero initial state:
/// `h_t = a_bar_t * h_{t-1} + b_bar_t * x_t`, `y_t = sum_n c_t[n] h_t[n]`.
/// Parameters are `[N]` (shared across steps) or `[L, N]` (per step).
pub fn recurrence_scan(abar: &Tensor, bbar: &Tensor, c: &Tensor, x: &Tensor) -> Result<Tensor> {
    if x.rank() != 1 {
        return Err(Error::dim("recurrence_scan", x.shape(), &[0]));
    }
    let l = x.len();
    let n = abar.shape()[abar.rank() - 1];
    for t in [bbar, c] {
        if t.shape()[t.rank() - 1] != n {
            return Err(Error::dim("recurrence_scan", abar.shape(), t.shape()));
        }
    }
    let mut h = vec![0.0f64; n];
    let mut y = Vec::with_capacity(l);
    for t in 0..l {
        let a_row = step_row(abar, t, "recurrence_scan", l)?;
        let b_row = step_row(bbar, t, "recurrence_scan", l)?;
        let c_row = step_row(c, t, "recurrence_scan", l)?;
        let xt = x.data()[t];
        let mut yt = 0.0;
        for j in 0..n {
            h[j] = a_row[j] * h[j] + b_row[j] * xt;
            yt += c_row[j] * h[j];
        }
        y.push(yt);
    }
    Tensor::new([l], y)
}

/// The structured kernel of the global-convolution form:
/// `taps[i] = sum_n c[n] * a_bar[n]^i * b_bar[n]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvKernel {
    taps: Tensor,
}

impl ConvKernel {
    pub fn new(taps: Tensor) -> Result<Self> {
        if taps.rank() != 1 {
            return Err(Error::dim("ConvKernel", taps.shape(), &[0]));
        }
        Ok(ConvKernel { taps })
    }

    pub fn taps(&self) -> &Tensor {
        &self.taps
    }

    pub fn len(&self) -> usize {
        self.taps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taps.is_empty()
    }
}

/// Kernel of the convolution form, defined for time-invariant parameters
/// only. Powers of `a_bar` are maintained as a running elementwise product.
pub fn conv_kernel(abar: &Tensor, bbar: &Tensor, c: &Tensor, l: usize) -> Result<ConvKernel> {
    for t in [abar, bbar, c] {
        if t.rank() != 1 {
            return Err(Error::Contract(format!(
                "conv_kernel requires time-invariant parameters, got shape {:?}",
                t.shape()
            )));
        }
    }
    if bbar.len() != abar.len() || c.len() != abar.len() {
        return Err(Error::dim("conv_kernel", abar.shape(), bbar.shape()));
    }
    let n = abar.len();
    let mut pow = vec![1.0f64; n];
    let mut taps = Vec::with_capacity(l);
    for _ in 0..l {
        let mut k = 0.0;
        for j in 0..n {
            k += c.data()[j] * pow[j] * bbar.data()[j];
        }
        taps.push(k);
        for j in 0..n {
            pow[j] *= abar.data()[j];
        }
    }
    ConvKernel::new(Tensor::new([l], taps)?)
}

/// Causal convolution `y_t = sum_{i=0..t} taps[i] * x[t-i]`.
pub fn conv_scan(x: &Tensor, kernel: &ConvKernel) -> Result<Tensor> {
    if x.rank() != 1 || x.len() != kernel.len() {
        return Err(Error::dim("conv_scan", x.shape(), kernel.taps.shape()));
    }
    let l = x.len();
    let mut y = Vec::with_capacity(l);
    for t in 0..l {
        let mut yt = 0.0;
        for i in 0..=t {
            yt += kernel.taps.data()[i] * x.data()[t - i];
        }
        y.push(yt);
    }
    Tensor::new([l], y)
}

/// Learnable weights of one gated sequence block. `S` is the block's channel
/// width and `D = expansion * S` its inner width; `N` is the state size.
///
/// The input-dependent projections carry biases (`b_b`, `b_c` default to
/// zero) so the block can also express a fixed, input-independent system.
#[derive(Debug, Clone, PartialEq)]
pub struct MambaWeights {
    /// [S, D] input projection.
    pub w_in: Tensor,
    /// [S, D] gate projection.
    pub w_gate: Tensor,
    /// [D, width] depthwise causal convolution taps; tap k multiplies the
    /// input k steps in the past. None disables the convolution stage.
    pub conv_w: Option<Tensor>,
    /// [D, D] timescale projection.
    pub w_delta: Tensor,
    /// [D] timescale bias.
    pub b_delta: Tensor,
    /// [D, N] input-matrix projection.
    pub w_b: Tensor,
    /// [N] input-matrix bias.
    pub b_b: Tensor,
    /// [D, N] output-matrix projection.
    pub w_c: Tensor,
    /// [N] output-matrix bias.
    pub b_c: Tensor,
    /// [D, N] continuous diagonal state matrix.
    pub a: Tensor,
    /// [D] skip gain.
    pub d_skip: Tensor,
    /// [D, S] output projection.
    pub w_out: Tensor,
}

impl MambaWeights {
    pub fn channels(&self) -> usize {
        self.w_in.shape()[0]
    }

    pub fn inner_dim(&self) -> usize {
        self.w_in.shape()[1]
    }

    pub fn state_dim(&self) -> usize {
        self.a.shape()[1]
    }

    pub fn conv_width(&self) -> usize {
        self.conv_w.as_ref().map_or(0, |c| c.shape()[1])
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.channels();
        let d = self.inner_dim();
        let n = self.state_dim();
        let expect: [(&str, &Tensor, Vec<usize>); 10] = [
            ("w_in", &self.w_in, vec![s, d]),
            ("w_gate", &self.w_gate, vec![s, d]),
            ("w_delta", &self.w_delta, vec![d, d]),
            ("b_delta", &self.b_delta, vec![d]),
            ("w_b", &self.w_b, vec![d, n]),
            ("b_b", &self.b_b, vec![n]),
            ("w_c", &self.w_c, vec![d, n]),
            ("b_c", &self.b_c, vec![n]),
            ("a", &self.a, vec![d, n]),
            ("d_skip", &self.d_skip, vec![d]),
        ];
        for (name, tensor, shape) in expect {
            if tensor.shape() != shape.as_slice() {
                return Err(Error::Validation(format!(
                    "{name} has shape {:?}, expected {shape:?}",
                    tensor.shape()
                )));
            }
        }
        if self.w_out.shape() != [d, s] {
            return Err(Error::Validation(format!(
                "w_out has shape {:?}, expected {:?}",
                self.w_out.shape(),
                [d, s]
            )));
        }
        if let Some(conv) = &self.conv_w {
            if conv.rank() != 2 || conv.shape()[0] != d || conv.shape()[1] == 0 {
                return Err(Error::Validation(format!(
                    "conv_w has shape {:?}, expected [{d}, width]",
                    conv.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Input-dependent scan over `u: [L, D]`: per step,
/// `delta_t = softplus(u_t W_delta + b_delta)`, `B_t = u_t W_B + b_b`,
/// `C_t = u_t W_C + b_c`, then the zero-order-hold recurrence
/// `h_t = a_bar_t (.) h_{t-1} + b_bar_t * u_t` with
/// `y_t[d] = C_t . h_t[d, :] + d_skip[d] u_t[d]`.
pub fn selective_scan(u: &Tensor, weights: &MambaWeights) -> Result<Tensor> {
    if !u.is_finite() {
        return Err(Error::Domain("selective_scan input is not finite".into()));
    }
    let d_dim = weights.inner_dim();
    if u.rank() != 2 || u.shape()[1] != d_dim {
        return Err(Error::dim("selective_scan", u.shape(), &[0, d_dim]));
    }
    let n = weights.state_dim();
    let l = u.shape()[0];
    let mut h = vec![0.0f64; d_dim * n];
    let mut y = Vec::with_capacity(l * d_dim);
    let mut delta_t = vec![0.0f64; d_dim];
    let mut b_t = vec![0.0f64; n];
    let mut c_t = vec![0.0f64; n];
    for t in 0..l {
        let ut = &u.data()[t * d_dim..(t + 1) * d_dim];
        project_step(ut, &weights.w_delta, &weights.b_delta, &mut delta_t);
        for v in delta_t.iter_mut() {
            *v = softplus(*v);
        }
        project_step(ut, &weights.w_b, &weights.b_b, &mut b_t);
        project_step(ut, &weights.w_c, &weights.b_c, &mut c_t);
        for d in 0..d_dim {
            let dt = delta_t[d];
            let hd = &mut h[d * n..(d + 1) * n];
            let mut yd = 0.0;
            for j in 0..n {
                let (abar, bbar) = zoh(dt, weights.a.at(&[d, j]), b_t[j]);
                hd[j] = abar * hd[j] + bbar * ut[d];
                yd += c_t[j] * hd[j];
            }
            y.push(yd + weights.d_skip.data()[d] * ut[d]);
        }
    }
    Tensor::new([l, d_dim], y)
}

/// `out = u . w + bias` for one step vector, fixed-order accumulation.
fn project_step(u: &[f64], w: &Tensor, bias: &Tensor, out: &mut [f64]) {
    let cols = w.shape()[1];
    out.copy_from_slice(bias.data());
    for (i, &ui) in u.iter().enumerate() {
        let row = &w.data()[i * cols..(i + 1) * cols];
        for (o, &wj) in out.iter_mut().zip(row) {
            *o += ui * wj;
        }
    }
}

/// Depthwise causal convolution along the step axis of `v: [L, D]`:
/// `out[t, d] = sum_k taps[d, k] * v[t - k, d]`, zero-padded at the start.
pub(crate) fn causal_depthwise_conv(v: &Tensor, taps: &Tensor) -> Result<Tensor> {
    let (l, d_dim) = (v.shape()[0], v.shape()[1]);
    if taps.rank() != 2 || taps.shape()[0] != d_dim {
        return Err(Error::dim("causal_depthwise_conv", taps.shape(), v.shape()));
    }
    let width = taps.shape()[1];
    let mut out = vec![0.0f64; l * d_dim];
    for t in 0..l {
        for d in 0..d_dim {
            let mut acc = 0.0;
            for k in 0..width.min(t + 1) {
                acc += taps.at(&[d, k]) * v.data()[(t - k) * d_dim + d];
            }
            out[t * d_dim + d] = acc;
        }
    }
    Tensor::new([l, d_dim], out)
}

/// One gated sequence block over `x_seq: [B, S, L]`: project to the inner
/// width, causal depthwise convolution, silu, selective scan, silu gate,
/// project back to `S`. The same weights serve every route of one head.
pub fn mamba_block(x_seq: &Tensor, weights: &MambaWeights) -> Result<Tensor> {
    let s = weights.channels();
    if x_seq.rank() != 3 || x_seq.shape()[1] != s {
        return Err(Error::dim("mamba_block", x_seq.shape(), &[0, s, 0]));
    }
    let (b, l) = (x_seq.shape()[0], x_seq.shape()[2]);
    let mut out = Vec::with_capacity(b * s * l);
    for batch in 0..b {
        // [L, S] view of this batch element
        let x = Tensor::from_fn([l, s], |idx| x_seq.at(&[batch, idx[1], idx[0]]));
        let mut v = x.matmul(&weights.w_in)?;
        if let Some(taps) = &weights.conv_w {
            v = causal_depthwise_conv(&v, taps)?;
        }
        let v = v.silu();
        let g = x.matmul(&weights.w_gate)?.silu();
        let scanned = selective_scan(&v, weights)?;
        let y = scanned.mul(&g)?.matmul(&weights.w_out)?;
        for ch in 0..s {
            for t in 0..l {
                out.push(y.data()[t * s + ch]);
            }
        }
    }
    Tensor::new([b, s, l], out)
}
