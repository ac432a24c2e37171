//! Selective state-space context block.
//!
//! A diagonal linear recurrence scanned over the chronological frame
//! sequence. The step size is computed from the input at every step, so
//! empty (event-free) frames produce a tiny step and the state coasts
//! through them unchanged:
//!
//! ```text
//! delta_t = softplus(w_delta . x_t + b_delta)
//! B_t = W_B x_t,  C_t = W_C x_t
//! A_bar = exp(delta_t A[f,s]),  B_bar = (A_bar - 1) / A[f,s] * B_t[s]
//! h_t[f,s] = A_bar h_{t-1}[f,s] + B_bar x_t[f]
//! y_t[f] = sum_s C_t[s] h_t[f,s] + D[f] x_t[f]
//! ```
//!
//! `A = -exp(a_log)` keeps every state pole strictly negative.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::ops::sigmoid;
use crate::tensor::Tensor;

/// Step size produced by the default bias at zero input.
pub const DELTA_INIT: f64 = 1e-3;
pub const DEFAULT_STATE: usize = 8;
const NORM_EPS: f64 = 1e-5;

pub fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

pub fn softplus_inv(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

/// Zero-order hold for one diagonal entry. Returns `(A_bar, B_bar)`.
pub fn discretize(a: f64, b: f64, delta: f64) -> Result<(f64, f64)> {
    if !(delta > 0.0) {
        return Err(Error::config(format!("step size must be positive, got {delta}")));
    }
    if !(a < 0.0) {
        return Err(Error::config(format!("state pole must be negative, got {a}")));
    }
    Ok(discretize_unchecked(a, b, delta))
}

#[inline]
fn discretize_unchecked(a: f64, b: f64, delta: f64) -> (f64, f64) {
    let a_bar = (delta * a).exp();
    let b_bar = (delta * a).exp_m1() / a * b;
    (a_bar, b_bar)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SsmParams {
    pub features: usize,
    pub state: usize,
    /// RMS-norm gain applied to the block input, `[F]`.
    pub norm_gain: Tensor,
    /// `[F, S]`, `A = -exp(a_log)`.
    pub a_log: Tensor,
    /// `[S, F]`
    pub w_b: Tensor,
    /// `[S, F]`
    pub w_c: Tensor,
    /// `[F]`
    pub w_delta: Tensor,
    /// `[1]`
    pub b_delta: Tensor,
    /// Skip coefficients, `[F]`.
    pub d: Tensor,
}

impl SsmParams {
    /// `A[f, s] = -(s + 1)`, `softplus(b_delta) = DELTA_INIT`, projections
    /// uniform in `±1/sqrt(F)`, unit skip and norm gain.
    pub fn init<R: Rng + ?Sized>(features: usize, state: usize, rng: &mut R) -> Self {
        let mut p = Self::zeros(features, state);
        p.norm_gain = Tensor::filled(&[features], 1.0);
        for f in 0..features {
            for s in 0..state {
                p.a_log.data_mut()[f * state + s] = ((s + 1) as f64).ln();
            }
        }
        let bound = 1.0 / (features as f64).sqrt();
        p.w_b = Tensor::uniform(&[state, features], bound, rng);
        p.w_c = Tensor::uniform(&[state, features], bound, rng);
        p.w_delta = Tensor::uniform(&[features], bound, rng);
        p.b_delta = Tensor::filled(&[1], softplus_inv(DELTA_INIT));
        p.d = Tensor::filled(&[features], 1.0);
        p
    }

    pub fn zeros(features: usize, state: usize) -> Self {
        SsmParams {
            features,
            state,
            norm_gain: Tensor::zeros(&[features]),
            a_log: Tensor::zeros(&[features, state]),
            w_b: Tensor::zeros(&[state, features]),
            w_c: Tensor::zeros(&[state, features]),
            w_delta: Tensor::zeros(&[features]),
            b_delta: Tensor::zeros(&[1]),
            d: Tensor::zeros(&[features]),
        }
    }

    pub fn a(&self, f: usize, s: usize) -> f64 {
        -self.a_log.data()[f * self.state + s].exp()
    }

    pub fn tensors(&self) -> [(&'static str, &Tensor); 7] {
        [
            ("norm_gain", &self.norm_gain),
            ("a_log", &self.a_log),
            ("w_b", &self.w_b),
            ("w_c", &self.w_c),
            ("w_delta", &self.w_delta),
            ("b_delta", &self.b_delta),
            ("d", &self.d),
        ]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut Tensor); 7] {
        [
            ("norm_gain", &mut self.norm_gain),
            ("a_log", &mut self.a_log),
            ("w_b", &mut self.w_b),
            ("w_c", &mut self.w_c),
            ("w_delta", &mut self.w_delta),
            ("b_delta", &mut self.b_delta),
            ("d", &mut self.d),
        ]
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    fn poles(&self) -> Vec<f64> {
        self.a_log.data().iter().map(|v| -v.exp()).collect()
    }
}

/// Everything the backward pass needs from a forward scan.
#[derive(Debug, Clone)]
pub struct ScanTrace {
    pub steps: usize,
    pub x: Vec<f64>,
    pub z: Vec<f64>,
    pub delta: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub h: Vec<f64>,
}

/// Scans `x: [N, F]` and returns `y: [N, F]`.
pub fn selective_scan(x: &Tensor, p: &SsmParams) -> Result<(Tensor, ScanTrace)> {
    let (n, f) = x.dims2()?;
    if f != p.features {
        return Err(Error::shape(format!("scan input has {f} features, params expect {}", p.features)));
    }
    let s = p.state;
    let poles = p.poles();
    let xs = x.data();
    let mut trace = ScanTrace {
        steps: n,
        x: xs.to_vec(),
        z: vec![0.0; n],
        delta: vec![0.0; n],
        b: vec![0.0; n * s],
        c: vec![0.0; n * s],
        h: vec![0.0; n * f * s],
    };
    let mut y = vec![0.0; n * f];
    let mut h = vec![0.0; f * s];
    for t in 0..n {
        let xt = &xs[t * f..(t + 1) * f];
        let z = dot(p.w_delta.data(), xt) + p.b_delta.data()[0];
        let delta = softplus(z);
        let bt = &mut trace.b[t * s..(t + 1) * s];
        let ct = &mut trace.c[t * s..(t + 1) * s];
        for k in 0..s {
            bt[k] = dot(&p.w_b.data()[k * f..(k + 1) * f], xt);
            ct[k] = dot(&p.w_c.data()[k * f..(k + 1) * f], xt);
        }
        let yt = &mut y[t * f..(t + 1) * f];
        for fi in 0..f {
            let mut acc = p.d.data()[fi] * xt[fi];
            for k in 0..s {
                let i = fi * s + k;
                let (a_bar, b_bar) = discretize_unchecked(poles[i], bt[k], delta);
                h[i] = a_bar * h[i] + b_bar * xt[fi];
                acc += ct[k] * h[i];
            }
            yt[fi] = acc;
        }
        if !delta.is_finite() || !yt.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(format!("selective scan step {t}")));
        }
        trace.z[t] = z;
        trace.delta[t] = delta;
        trace.h[t * f * s..(t + 1) * f * s].copy_from_slice(&h);
    }
    Ok((Tensor::from_vec(&[n, f], y)?, trace))
}

/// Reverse-time adjoint of [`selective_scan`]. Returns `(dx, dparams)`;
/// `dparams.norm_gain` is left at zero.
pub fn scan_backward(trace: &ScanTrace, p: &SsmParams, dy: &Tensor) -> Result<(Tensor, SsmParams)> {
    let (f, s, n) = (p.features, p.state, trace.steps);
    if dy.shape() != [n, f] {
        return Err(Error::shape(format!("scan grad shape {:?} != [{n}, {f}]", dy.shape())));
    }
    let poles = p.poles();
    let mut g = SsmParams::zeros(f, s);
    let mut dx = vec![0.0; n * f];
    let mut carry = vec![0.0; f * s];
    let zeros = vec![0.0; f * s];
    let mut db = vec![0.0; s];
    let mut dc = vec![0.0; s];
    for t in (0..n).rev() {
        let xt = &trace.x[t * f..(t + 1) * f];
        let dyt = &dy.data()[t * f..(t + 1) * f];
        let bt = &trace.b[t * s..(t + 1) * s];
        let ct = &trace.c[t * s..(t + 1) * s];
        let ht = &trace.h[t * f * s..(t + 1) * f * s];
        let hp = if t > 0 {
            &trace.h[(t - 1) * f * s..t * f * s]
        } else {
            &zeros[..]
        };
        let delta = trace.delta[t];
        let dxt = &mut dx[t * f..(t + 1) * f];
        db.fill(0.0);
        dc.fill(0.0);
        let mut d_delta = 0.0;
        for fi in 0..f {
            dxt[fi] += dyt[fi] * p.d.data()[fi];
            g.d.data_mut()[fi] += dyt[fi] * xt[fi];
            for k in 0..s {
                let i = fi * s + k;
                let a = poles[i];
                let a_bar = (delta * a).exp();
                let e = (delta * a).exp_m1() / a;
                dc[k] += dyt[fi] * ht[i];
                let gh = carry[i] + dyt[fi] * ct[k];
                let d_abar = gh * hp[i];
                let d_e = gh * bt[k] * xt[fi];
                db[k] += gh * e * xt[fi];
                dxt[fi] += gh * e * bt[k];
                d_delta += d_abar * a_bar * a + d_e * a_bar;
                let d_a = d_abar * a_bar * delta + d_e * (delta * a_bar - e) / a;
                g.a_log.data_mut()[i] += d_a * a;
                carry[i] = gh * a_bar;
            }
        }
        let dz = d_delta * sigmoid(trace.z[t]);
        g.b_delta.data_mut()[0] += dz;
        for fi in 0..f {
            g.w_delta.data_mut()[fi] += dz * xt[fi];
            dxt[fi] += dz * p.w_delta.data()[fi];
        }
        for k in 0..s {
            let wb = &p.w_b.data()[k * f..(k + 1) * f];
            let wc = &p.w_c.data()[k * f..(k + 1) * f];
            for fi in 0..f {
                g.w_b.data_mut()[k * f + fi] += db[k] * xt[fi];
                g.w_c.data_mut()[k * f + fi] += dc[k] * xt[fi];
                dxt[fi] += wb[fi] * db[k] + wc[fi] * dc[k];
            }
        }
    }
    Ok((Tensor::from_vec(&[n, f], dx)?, g))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Per batch element: normalized inputs, their RMS, and the scan trace.
#[derive(Debug, Clone)]
pub struct BlockCache {
    dims: [usize; 4],
    unit: Vec<Tensor>,
    rms: Vec<Vec<f64>>,
    traces: Vec<ScanTrace>,
}

/// `X + scan(rmsnorm(X))` over the chronological sequence `t * Bn + n`.
/// Output shape equals input shape.
pub fn ssm_block_forward(x: &Tensor, p: &SsmParams) -> Result<(Tensor, BlockCache)> {
    let [bt, t, bn, f] = rank4(x)?;
    let n = t * bn;
    let mut out = x.data().to_vec();
    let mut cache = BlockCache {
        dims: [bt, t, bn, f],
        unit: Vec::with_capacity(bt),
        rms: Vec::with_capacity(bt),
        traces: Vec::with_capacity(bt),
    };
    for b in 0..bt {
        let rows = &x.data()[b * n * f..(b + 1) * n * f];
        let mut unit = vec![0.0; n * f];
        let mut normed = vec![0.0; n * f];
        let mut rms = vec![0.0; n];
        for r in 0..n {
            let row = &rows[r * f..(r + 1) * f];
            let ms = row.iter().map(|v| v * v).sum::<f64>() / f as f64;
            let rr = (ms + NORM_EPS).sqrt();
            rms[r] = rr;
            for i in 0..f {
                unit[r * f + i] = row[i] / rr;
                normed[r * f + i] = unit[r * f + i] * p.norm_gain.data()[i];
            }
        }
        let (y, trace) = selective_scan(&Tensor::from_vec(&[n, f], normed)?, p)?;
        for (o, v) in out[b * n * f..(b + 1) * n * f].iter_mut().zip(y.data()) {
            *o += v;
        }
        cache.unit.push(Tensor::from_vec(&[n, f], unit)?);
        cache.rms.push(rms);
        cache.traces.push(trace);
    }
    Ok((Tensor::from_vec(&[bt, t, bn, f], out)?, cache))
}

pub fn ssm_block_backward(
    cache: &BlockCache,
    p: &SsmParams,
    grad_out: &Tensor,
) -> Result<(Tensor, SsmParams)> {
    if grad_out.shape() != cache.dims {
        return Err(Error::shape(format!("block grad {:?} != {:?}", grad_out.shape(), cache.dims)));
    }
    let [bt, _, _, f] = cache.dims;
    let n = cache.traces.first().map_or(0, |tr| tr.steps);
    let mut dx = grad_out.data().to_vec();
    let mut grads = SsmParams::zeros(p.features, p.state);
    for b in 0..bt {
        let g = &grad_out.data()[b * n * f..(b + 1) * n * f];
        let (d_normed, gp) = scan_backward(&cache.traces[b], p, &Tensor::from_vec(&[n, f], g.to_vec())?)?;
        accumulate(&mut grads, &gp);
        let unit = cache.unit[b].data();
        for r in 0..n {
            let u = &unit[r * f..(r + 1) * f];
            let dn = &d_normed.data()[r * f..(r + 1) * f];
            let mut du = vec![0.0; f];
            for i in 0..f {
                grads.norm_gain.data_mut()[i] += dn[i] * u[i];
                du[i] = dn[i] * p.norm_gain.data()[i];
            }
            let proj = dot(&du, u) / f as f64;
            let inv = 1.0 / cache.rms[b][r];
            let dxr = &mut dx[(b * n + r) * f..(b * n + r + 1) * f];
            for i in 0..f {
                dxr[i] += (du[i] - u[i] * proj) * inv;
            }
        }
    }
    Ok((Tensor::from_vec(&cache.dims, dx)?, grads))
}

fn rank4(x: &Tensor) -> Result<[usize; 4]> {
    match x.shape()[..] {
        [a, b, c, d] => Ok([a, b, c, d]),
        _ => Err(Error::shape(format!("block input must be [Bt, T, Bn, F], got {:?}", x.shape()))),
    }
}

pub(crate) fn accumulate(into: &mut SsmParams, from: &SsmParams) {
    for ((_, a), (_, b)) in into.tensors_mut().into_iter().zip(from.tensors()) {
        a.add_assign(b);
    }
}
