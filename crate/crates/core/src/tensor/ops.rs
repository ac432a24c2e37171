//! Forward and backward kernels. Image tensors are `[C, H, W]`, batches of
//! vectors are `[N, D]`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::Shape(msg()))
    }
}

/// Kernel size of an asymmetric depthwise pair, validated.
fn asym_kernel(c: usize, wh: &Tensor, wv: &Tensor) -> Result<usize> {
    let (ch, one_h, k) = wh.dims3()?;
    let (cv, kv, one_v) = wv.dims3()?;
    check(one_h == 1 && one_v == 1, || {
        format!("horizontal kernel must be Cx1xk and vertical Cxkx1, got {:?} / {:?}", wh.shape(), wv.shape())
    })?;
    check(ch == c && cv == c, || format!("kernel channels {ch}/{cv} != input channels {c}"))?;
    check(k == kv, || format!("kernel sizes differ: {k} vs {kv}"))?;
    check(k % 2 == 1, || format!("kernel size must be odd, got {k}"))?;
    Ok(k)
}

/// Per-channel 1xk horizontal pass followed by a kx1 vertical pass, both
/// zero-padded to keep the spatial size. Returns `(output, horizontal_pass)`;
/// the intermediate is needed by the backward pass.
pub fn dw_asym_forward(input: &Tensor, wh: &Tensor, wv: &Tensor) -> Result<(Tensor, Tensor)> {
    let (c, h, w) = input.dims3()?;
    let k = asym_kernel(c, wh, wv)?;
    let r = k / 2;
    let x = input.data();
    let mut mid = Tensor::zeros(&[c, h, w]);
    let mut out = Tensor::zeros(&[c, h, w]);
    {
        let m = mid.data_mut();
        for ch in 0..c {
            let kh = &wh.data()[ch * k..(ch + 1) * k];
            for y in 0..h {
                let row = &x[(ch * h + y) * w..(ch * h + y + 1) * w];
                let dst = &mut m[(ch * h + y) * w..(ch * h + y + 1) * w];
                for (j, &kw) in kh.iter().enumerate() {
                    // dst[xx] += kw * row[xx + j - r] over the valid range
                    let lo = r.saturating_sub(j);
                    let hi = (w + r).saturating_sub(j).min(w);
                    for xx in lo..hi {
                        dst[xx] += kw * row[xx + j - r];
                    }
                }
            }
        }
    }
    {
        let m = mid.data();
        let o = out.data_mut();
        for ch in 0..c {
            let kv = &wv.data()[ch * k..(ch + 1) * k];
            let plane = ch * h * w;
            for y in 0..h {
                let dst = &mut o[plane + y * w..plane + (y + 1) * w];
                for (i, &kw) in kv.iter().enumerate() {
                    let sy = y as isize + i as isize - r as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &m[plane + sy as usize * w..plane + (sy as usize + 1) * w];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += kw * s;
                    }
                }
            }
        }
    }
    Ok((out, mid))
}

/// Returns `(d_input, d_wh, d_wv)`.
pub fn dw_asym_backward(
    input: &Tensor,
    mid: &Tensor,
    wh: &Tensor,
    wv: &Tensor,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (c, h, w) = input.dims3()?;
    let k = asym_kernel(c, wh, wv)?;
    check(grad_out.shape() == input.shape() && mid.shape() == input.shape(), || {
        "gradient shape differs from input".into()
    })?;
    let r = k / 2;
    let g = grad_out.data();
    let m = mid.data();
    let x = input.data();

    let mut d_mid = Tensor::zeros(&[c, h, w]);
    let mut d_wv = Tensor::zeros(wv.shape());
    {
        let dm = d_mid.data_mut();
        let dwv = d_wv.data_mut();
        for ch in 0..c {
            let plane = ch * h * w;
            for i in 0..k {
                let kw = wv.data()[ch * k + i];
                let mut acc = 0.0;
                for y in 0..h {
                    let sy = y as isize + i as isize - r as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let sy = sy as usize;
                    let go = &g[plane + y * w..plane + (y + 1) * w];
                    let src = &m[plane + sy * w..plane + (sy + 1) * w];
                    let dst = &mut dm[plane + sy * w..plane + (sy + 1) * w];
                    for xx in 0..w {
                        acc += go[xx] * src[xx];
                        dst[xx] += kw * go[xx];
                    }
                }
                dwv[ch * k + i] = acc;
            }
        }
    }

    let mut d_in = Tensor::zeros(&[c, h, w]);
    let mut d_wh = Tensor::zeros(wh.shape());
    {
        let dm = d_mid.data();
        let di = d_in.data_mut();
        let dwh = d_wh.data_mut();
        for ch in 0..c {
            for j in 0..k {
                let kw = wh.data()[ch * k + j];
                let lo = r.saturating_sub(j);
                let hi = (w + r).saturating_sub(j).min(w);
                let mut acc = 0.0;
                for y in 0..h {
                    let base = (ch * h + y) * w;
                    for xx in lo..hi {
                        let src = base + xx + j - r;
                        acc += dm[base + xx] * x[src];
                        di[src] += kw * dm[base + xx];
                    }
                }
                dwh[ch * k + j] = acc;
            }
        }
    }
    Ok((d_in, d_wh, d_wv))
}

/// 1x1 convolution: `out[o, p] = sum_i w[o, i] * in[i, p] + b[o]`.
pub fn pointwise_forward(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (cin, h, w) = input.dims3()?;
    let (cout, wcin) = weight.dims2()?;
    check(wcin == cin, || format!("weight expects {wcin} input channels, got {cin}"))?;
    check(bias.shape() == [cout], || format!("bias shape {:?} != [{cout}]", bias.shape()))?;
    let p = h * w;
    let x = input.data();
    let mut out = Tensor::zeros(&[cout, h, w]);
    let o = out.data_mut();
    for oc in 0..cout {
        let dst = &mut o[oc * p..(oc + 1) * p];
        dst.fill(bias.data()[oc]);
        for ic in 0..cin {
            let wv = weight.data()[oc * cin + ic];
            if wv == 0.0 {
                continue;
            }
            let src = &x[ic * p..(ic + 1) * p];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += wv * s;
            }
        }
    }
    Ok(out)
}

/// Returns `(d_input, d_weight, d_bias)`.
pub fn pointwise_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (cin, h, w) = input.dims3()?;
    let (cout, wcin) = weight.dims2()?;
    check(wcin == cin && grad_out.shape() == [cout, h, w], || {
        format!("pointwise backward shapes: input {:?}, weight {:?}, grad {:?}", input.shape(), weight.shape(), grad_out.shape())
    })?;
    let p = h * w;
    let x = input.data();
    let g = grad_out.data();
    let mut d_in = Tensor::zeros(&[cin, h, w]);
    let mut d_w = Tensor::zeros(&[cout, cin]);
    let mut d_b = Tensor::zeros(&[cout]);
    for oc in 0..cout {
        let go = &g[oc * p..(oc + 1) * p];
        d_b.data_mut()[oc] = go.iter().sum();
        for ic in 0..cin {
            let src = &x[ic * p..(ic + 1) * p];
            d_w.data_mut()[oc * cin + ic] = go.iter().zip(src).map(|(a, b)| a * b).sum();
            let wv = weight.data()[oc * cin + ic];
            let di = &mut d_in.data_mut()[ic * p..(ic + 1) * p];
            for (d, gv) in di.iter_mut().zip(go) {
                *d += wv * gv;
            }
        }
    }
    Ok((d_in, d_w, d_b))
}

pub fn relu(x: &Tensor) -> Tensor {
    map(x, |v| v.max(0.0))
}

/// `pre` is the pre-activation input.
pub fn relu_backward(pre: &Tensor, grad: &Tensor) -> Tensor {
    zip_map(pre, grad, |x, g| if x > 0.0 { g } else { 0.0 })
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn silu(x: &Tensor) -> Tensor {
    map(x, |v| v * sigmoid(v))
}

pub fn silu_backward(pre: &Tensor, grad: &Tensor) -> Tensor {
    zip_map(pre, grad, |x, g| {
        let s = sigmoid(x);
        g * (s + x * s * (1.0 - s))
    })
}

fn map(x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    let data = x.data().iter().map(|&v| f(v)).collect();
    Tensor::from_vec(x.shape(), data).expect("same shape")
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    assert_eq!(a.shape(), b.shape(), "elementwise shape mismatch");
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.shape(), data).expect("same shape")
}

/// 2x2 max pooling, stride 2; odd trailing rows/cols are dropped. Returns
/// the pooled tensor and the flat input index chosen for each output.
pub fn maxpool2x2(input: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let (c, h, w) = input.dims3()?;
    check(h >= 2 && w >= 2, || format!("maxpool needs H, W >= 2, got {h}x{w}"))?;
    let (oh, ow) = (h / 2, w / 2);
    let x = input.data();
    let mut out = Tensor::zeros(&[c, oh, ow]);
    let mut idx = vec![0usize; c * oh * ow];
    let o = out.data_mut();
    for ch in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                let base = (ch * h + 2 * y) * w + 2 * xx;
                let mut best = base;
                for cand in [base + 1, base + w, base + w + 1] {
                    if x[cand] > x[best] {
                        best = cand;
                    }
                }
                let oi = (ch * oh + y) * ow + xx;
                o[oi] = x[best];
                idx[oi] = best;
            }
        }
    }
    Ok((out, idx))
}

pub fn maxpool2x2_backward(input_shape: &[usize], argmax: &[usize], grad_out: &Tensor) -> Tensor {
    assert_eq!(argmax.len(), grad_out.len());
    let mut d = Tensor::zeros(input_shape);
    let dd = d.data_mut();
    for (&i, &g) in argmax.iter().zip(grad_out.data()) {
        dd[i] += g;
    }
    d
}

/// `[C, H, W] -> [C]` spatial mean.
pub fn global_avg_pool(input: &Tensor) -> Result<Tensor> {
    let (c, h, w) = input.dims3()?;
    let p = (h * w) as f64;
    let data = input
        .data()
        .chunks_exact(h * w)
        .map(|plane| plane.iter().sum::<f64>() / p)
        .collect();
    Tensor::from_vec(&[c], data)
}

pub fn global_avg_pool_backward(input_shape: &[usize], grad: &Tensor) -> Result<Tensor> {
    let [c, h, w] = input_shape[..] else {
        return Err(Error::shape("global_avg_pool input must be rank 3"));
    };
    check(grad.shape() == [c], || format!("grad shape {:?} != [{c}]", grad.shape()))?;
    let inv = 1.0 / (h * w) as f64;
    let mut d = Tensor::zeros(input_shape);
    for (plane, g) in d.data_mut().chunks_exact_mut(h * w).zip(grad.data()) {
        plane.fill(g * inv);
    }
    Ok(d)
}

/// Row-wise affine map `[N, In] -> [N, Out]` with weight `[Out, In]`.
pub fn linear_forward(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (n, din) = x.dims2()?;
    let (dout, win) = weight.dims2()?;
    check(win == din, || format!("linear weight expects {win} inputs, got {din}"))?;
    check(bias.shape() == [dout], || format!("bias shape {:?} != [{dout}]", bias.shape()))?;
    let mut out = Tensor::zeros(&[n, dout]);
    for (row, dst) in x.data().chunks_exact(din).zip(out.data_mut().chunks_exact_mut(dout)) {
        for (o, d) in dst.iter_mut().enumerate() {
            let wr = &weight.data()[o * din..(o + 1) * din];
            *d = bias.data()[o] + wr.iter().zip(row).map(|(a, b)| a * b).sum::<f64>();
        }
    }
    Ok(out)
}

/// Returns `(d_x, d_weight, d_bias)`.
pub fn linear_backward(x: &Tensor, weight: &Tensor, grad: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, din) = x.dims2()?;
    let (dout, win) = weight.dims2()?;
    check(win == din && grad.shape() == [n, dout], || {
        format!("linear backward shapes: x {:?}, weight {:?}, grad {:?}", x.shape(), weight.shape(), grad.shape())
    })?;
    let mut dx = Tensor::zeros(&[n, din]);
    let mut dw = Tensor::zeros(&[dout, din]);
    let mut db = Tensor::zeros(&[dout]);
    for r in 0..n {
        let row = &x.data()[r * din..(r + 1) * din];
        let g = &grad.data()[r * dout..(r + 1) * dout];
        for o in 0..dout {
            let go = g[o];
            db.data_mut()[o] += go;
            let wr = &weight.data()[o * din..(o + 1) * din];
            let dwr = &mut dw.data_mut()[o * din..(o + 1) * din];
            for i in 0..din {
                dwr[i] += go * row[i];
            }
            let dxr = &mut dx.data_mut()[r * din..(r + 1) * din];
            for i in 0..din {
                dxr[i] += go * wr[i];
            }
        }
    }
    Ok((dx, dw, db))
}

/// Row-wise softmax of `[N, C]` logits, stabilized by subtracting the row max.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    let (_, c) = logits.dims2()?;
    let mut out = logits.clone();
    for row in out.data_mut().chunks_exact_mut(c) {
        softmax_in_place(row);
    }
    Ok(out)
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Vector-Jacobian product of softmax given its output `p`.
pub fn softmax_backward(p: &Tensor, grad_p: &Tensor) -> Result<Tensor> {
    let (_, c) = p.dims2()?;
    check(p.shape() == grad_p.shape(), || "softmax grad shape mismatch".into())?;
    let mut out = Tensor::zeros(p.shape());
    for ((pr, gr), dr) in p
        .data()
        .chunks_exact(c)
        .zip(grad_p.data().chunks_exact(c))
        .zip(out.data_mut().chunks_exact_mut(c))
    {
        let dot: f64 = pr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for i in 0..c {
            dr[i] = pr[i] * (gr[i] - dot);
        }
    }
    Ok(out)
}

/// Probabilities are clamped here before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrossEntropy {
    pub loss: f64,
    /// True when the true-class probability was below [`PROB_FLOOR`].
    pub clamped: bool,
}

/// `-sum_c y_c ln p_c` for a one-hot `y` given by its class index.
pub fn cross_entropy(p: &[f64], label: usize) -> Result<CrossEntropy> {
    check(label < p.len(), || format!("label {label} out of range for {} classes", p.len()))?;
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > 1e-6 || p.iter().any(|&v| v < 0.0) {
        return Err(Error::Shape(format!("probabilities do not form a simplex (sum {total})")));
    }
    let pt = p[label];
    let clamped = pt < PROB_FLOOR;
    Ok(CrossEntropy {
        loss: -pt.max(PROB_FLOOR).ln(),
        clamped,
    })
}

/// Gradient of `cross_entropy(softmax(z), label)` with respect to `z`: `p - y`.
pub fn softmax_cross_entropy_grad(p: &[f64], label: usize) -> Vec<f64> {
    let mut g = p.to_vec();
    g[label] -= 1.0;
    g
}
