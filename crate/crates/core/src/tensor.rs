//! Dense row-major `f64` tensors and the layer kernels (forward and backward)
//! used by the autodiff graph.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape("tensor", shape, &[data.len()]));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            grad: None,
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn take_grad(&mut self) -> Option<Vec<f64>> {
        self.grad.take()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `delta` into the stored gradient, allocating it on first use.
    pub fn accumulate_grad(&mut self, delta: &[f64]) -> Result<()> {
        if delta.len() != self.data.len() {
            return Err(Error::shape("accumulate_grad", &self.shape, &[delta.len()]));
        }
        match &mut self.grad {
            Some(g) => g.iter_mut().zip(delta).for_each(|(g, d)| *g += d),
            None => self.grad = Some(delta.to_vec()),
        }
        Ok(())
    }

    pub fn scale_grad(&mut self, factor: f64) {
        if let Some(g) = &mut self.grad {
            g.iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.data)
    }
}

/// Index of the largest value, first occurrence on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// No padding; output shrinks by `k - 1`.
    Valid,
    /// Zero padding that preserves the spatial size.
    Same,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OddPolicy {
    /// Odd spatial dimensions are rejected.
    #[default]
    Error,
    /// Odd dimensions get a partial trailing window (output is `ceil(n / 2)`).
    Pad,
}

#[derive(Debug, Clone, Copy)]
struct ConvGeometry {
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    pad_top: usize,
    pad_left: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeometry {
    fn new(input: &[usize], kernels: &[usize], bias: &[usize], padding: Padding) -> Result<Self> {
        if input.len() != 3 || kernels.len() != 4 {
            return Err(Error::shape("conv2d", input, kernels));
        }
        let (c_in, h, w) = (input[0], input[1], input[2]);
        let (c_out, kc, kh, kw) = (kernels[0], kernels[1], kernels[2], kernels[3]);
        if kc != c_in || kh == 0 || kw == 0 || kh > h || kw > w {
            return Err(Error::shape("conv2d", input, kernels));
        }
        if bias != [c_out] {
            return Err(Error::shape("conv2d bias", kernels, bias));
        }
        let (pad_top, pad_left, oh, ow) = match padding {
            Padding::Valid => (0, 0, h - kh + 1, w - kw + 1),
            Padding::Same => ((kh - 1) / 2, (kw - 1) / 2, h, w),
        };
        Ok(ConvGeometry {
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            pad_top,
            pad_left,
            oh,
            ow,
        })
    }

    /// Output positions `o` whose input coordinate `o + k - pad` lies in `0..n`.
    fn valid_range(k: usize, pad: usize, n: usize, out: usize) -> (usize, usize) {
        let lo = pad.saturating_sub(k);
        let hi = (n + pad).saturating_sub(k).min(out);
        (lo, hi.max(lo))
    }
}

/// 2-D cross-correlation of a `[C_in, H, W]` input with `[C_out, C_in, kh, kw]`
/// kernels plus a per-channel bias.
pub fn conv2d(input: &Tensor, kernels: &Tensor, bias: &Tensor, padding: Padding) -> Result<Tensor> {
    let g = ConvGeometry::new(input.shape(), kernels.shape(), bias.shape(), padding)?;
    let x = input.data();
    let k = kernels.data();
    let mut out = vec![0.0; g.c_out * g.oh * g.ow];
    for co in 0..g.c_out {
        let plane = &mut out[co * g.oh * g.ow..(co + 1) * g.oh * g.ow];
        plane.iter_mut().for_each(|v| *v = bias.data()[co]);
        for ci in 0..g.c_in {
            let xin = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            for ky in 0..g.kh {
                let (oy0, oy1) = ConvGeometry::valid_range(ky, g.pad_top, g.h, g.oh);
                for kx in 0..g.kw {
                    let wv = k[((co * g.c_in + ci) * g.kh + ky) * g.kw + kx];
                    let (ox0, ox1) = ConvGeometry::valid_range(kx, g.pad_left, g.w, g.ow);
                    for oy in oy0..oy1 {
                        let iy = oy + ky - g.pad_top;
                        let ix0 = ox0 + kx - g.pad_left;
                        let dst = &mut plane[oy * g.ow + ox0..oy * g.ow + ox1];
                        let src = &xin[iy * g.w + ix0..iy * g.w + ix0 + (ox1 - ox0)];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += wv * s;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[g.c_out, g.oh, g.ow], out)
}

/// Gradients of [`conv2d`] with respect to input, kernels and bias.
pub fn conv2d_backward(
    input: &Tensor,
    kernels: &Tensor,
    bias: &Tensor,
    padding: Padding,
    grad_out: &[f64],
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let g = ConvGeometry::new(input.shape(), kernels.shape(), bias.shape(), padding)?;
    if grad_out.len() != g.c_out * g.oh * g.ow {
        return Err(Error::shape(
            "conv2d backward",
            &[g.c_out, g.oh, g.ow],
            &[grad_out.len()],
        ));
    }
    let x = input.data();
    let k = kernels.data();
    let mut gx = vec![0.0; x.len()];
    let mut gk = vec![0.0; k.len()];
    let mut gb = vec![0.0; g.c_out];
    for co in 0..g.c_out {
        let gplane = &grad_out[co * g.oh * g.ow..(co + 1) * g.oh * g.ow];
        gb[co] = gplane.iter().sum();
        for ci in 0..g.c_in {
            let xin = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            let gxin = &mut gx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            for ky in 0..g.kh {
                let (oy0, oy1) = ConvGeometry::valid_range(ky, g.pad_top, g.h, g.oh);
                for kx in 0..g.kw {
                    let widx = ((co * g.c_in + ci) * g.kh + ky) * g.kw + kx;
                    let wv = k[widx];
                    let (ox0, ox1) = ConvGeometry::valid_range(kx, g.pad_left, g.w, g.ow);
                    let mut acc = 0.0;
                    for oy in oy0..oy1 {
                        let iy = oy + ky - g.pad_top;
                        let ix0 = ox0 + kx - g.pad_left;
                        let go = &gplane[oy * g.ow + ox0..oy * g.ow + ox1];
                        let xrow = &xin[iy * g.w + ix0..iy * g.w + ix0 + (ox1 - ox0)];
                        let gxrow = &mut gxin[iy * g.w + ix0..iy * g.w + ix0 + (ox1 - ox0)];
                        for ((gv, xv), gxv) in go.iter().zip(xrow).zip(gxrow.iter_mut()) {
                            acc += gv * xv;
                            *gxv += wv * gv;
                        }
                    }
                    gk[widx] += acc;
                }
            }
        }
    }
    Ok((gx, gk, gb))
}

/// 2x2 max pooling with stride 2. Returns the pooled tensor and, per output
/// cell, the flat input index of the selected maximum (first in row-major
/// order on ties).
pub fn maxpool2d(input: &Tensor, odd: OddPolicy) -> Result<(Tensor, Vec<usize>)> {
    let s = input.shape();
    if s.len() != 3 {
        return Err(Error::shape("maxpool2d", s, &[0, 0, 0]));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    if h == 0 || w == 0 {
        return Err(Error::shape("maxpool2d", s, &[c, 2, 2]));
    }
    let (oh, ow) = match odd {
        OddPolicy::Error => {
            if h % 2 != 0 || w % 2 != 0 {
                return Err(Error::Input(format!(
                    "maxpool2d needs even spatial dimensions, got {h}x{w}"
                )));
            }
            (h / 2, w / 2)
        }
        OddPolicy::Pad => (h.div_ceil(2), w.div_ceil(2)),
    };
    let x = input.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut idx = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let base = ch * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for iy in 2 * oy..(2 * oy + 2).min(h) {
                    for ix in 2 * ox..(2 * ox + 2).min(w) {
                        let j = base + iy * w + ix;
                        if x[j] > x[best] {
                            best = j;
                        }
                    }
                }
                out.push(x[best]);
                idx.push(best);
            }
        }
    }
    Ok((Tensor::new(&[c, oh, ow], out)?, idx))
}

pub fn maxpool2d_backward(input_len: usize, argmax: &[usize], grad_out: &[f64]) -> Vec<f64> {
    let mut gx = vec![0.0; input_len];
    for (&i, &g) in argmax.iter().zip(grad_out) {
        gx[i] += g;
    }
    gx
}

/// Fully connected layer `weights · input + bias`; the input is flattened.
pub fn dense(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let ws = weights.shape();
    if ws.len() != 2 || ws[1] != input.numel() {
        return Err(Error::shape("dense", input.shape(), ws));
    }
    if bias.shape() != [ws[0]] {
        return Err(Error::shape("dense bias", ws, bias.shape()));
    }
    let n = ws[1];
    let x = input.data();
    let out = weights
        .data()
        .chunks_exact(n)
        .zip(bias.data())
        .map(|(row, b)| b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
        .collect();
    Ok(Tensor::vector(out))
}

pub fn dense_backward(input: &Tensor, weights: &Tensor, grad_out: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let n = input.numel();
    let x = input.data();
    let mut gx = vec![0.0; n];
    let mut gw = vec![0.0; weights.numel()];
    for ((row, grow), &g) in weights.data().chunks_exact(n).zip(gw.chunks_exact_mut(n)).zip(grad_out) {
        for ((w, gwv), (xv, gxv)) in row.iter().zip(grow.iter_mut()).zip(x.iter().zip(gx.iter_mut())) {
            *gwv = g * xv;
            *gxv += g * w;
        }
    }
    (gx, gw, grad_out.to_vec())
}

pub fn relu(input: &Tensor) -> Tensor {
    let mut out = input.clone();
    out.zero_grad();
    out.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
    out
}

/// Numerically stable softmax (the maximum logit is subtracted first).
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| libm::exp(z - m)).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `log Σ exp(z_i)` with max subtraction.
pub fn log_sum_exp(logits: &[f64]) -> f64 {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + libm::log(logits.iter().map(|z| libm::exp(z - m)).sum::<f64>())
}

/// `-ln probs[label]`.
pub fn cross_entropy(probs: &[f64], label: usize) -> Result<f64> {
    match probs.get(label) {
        Some(p) => Ok(-libm::log(*p)),
        None => Err(Error::Input(format!(
            "label {label} out of range for {} classes",
            probs.len()
        ))),
    }
}
