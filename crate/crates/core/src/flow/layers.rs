//! Per-layer forward, inverse and adjoint maps on single CHW tensors.
//!
//! Every adjoint receives `dy = dL/dy` for the negative log-likelihood `L`
//! and returns `dL/dx`, accumulating parameter gradients in place. The
//! `-log|det J|` term of `L` is folded into the parameter gradients here.

use super::arch::{coupling_convs, LayerSpec};
use super::conv::Conv3x3;

pub(crate) const LOG_SCALE_BOUND: f64 = 2.0;

/// Smooth squashing of the raw coupling log-scale into `(-2, 2)`.
#[inline]
pub(crate) fn squash(raw: f64) -> f64 {
    LOG_SCALE_BOUND * (raw / LOG_SCALE_BOUND).tanh()
}

#[inline]
fn squash_derivative(raw: f64) -> f64 {
    let t = (raw / LOG_SCALE_BOUND).tanh();
    1.0 - t * t
}

// ---------------------------------------------------------------------------
// squeeze

pub(crate) fn squeeze(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (h2, w2) = (h / 2, w / 2);
    let mut out = vec![0.0; x.len()];
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                let sub = (i % 2) * 2 + (j % 2);
                let dst = ((ch * 4 + sub) * h2 + i / 2) * w2 + j / 2;
                out[dst] = x[(ch * h + i) * w + j];
            }
        }
    }
    out
}

/// Inverse of [`squeeze`]; `c`, `h`, `w` are the shape before squeezing.
pub(crate) fn unsqueeze(y: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (h2, w2) = (h / 2, w / 2);
    let mut out = vec![0.0; y.len()];
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                let sub = (i % 2) * 2 + (j % 2);
                let src = ((ch * 4 + sub) * h2 + i / 2) * w2 + j / 2;
                out[(ch * h + i) * w + j] = y[src];
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// actnorm: y = x * exp(log_scale[c]) + bias[c]

pub(crate) fn actnorm_forward(spec: &LayerSpec, params: &[f64], x: &[f64]) -> (Vec<f64>, f64) {
    let (c, hw) = (spec.channels, spec.pixels());
    let (log_scale, bias) = params.split_at(c);
    let mut y = x.to_vec();
    for ch in 0..c {
        let s = log_scale[ch].exp();
        for v in &mut y[ch * hw..(ch + 1) * hw] {
            *v = *v * s + bias[ch];
        }
    }
    (y, hw as f64 * log_scale.iter().sum::<f64>())
}

pub(crate) fn actnorm_inverse(spec: &LayerSpec, params: &[f64], y: &[f64]) -> (Vec<f64>, f64) {
    let (c, hw) = (spec.channels, spec.pixels());
    let (log_scale, bias) = params.split_at(c);
    let mut x = y.to_vec();
    for ch in 0..c {
        let inv = (-log_scale[ch]).exp();
        for v in &mut x[ch * hw..(ch + 1) * hw] {
            *v = (*v - bias[ch]) * inv;
        }
    }
    (x, -(hw as f64) * log_scale.iter().sum::<f64>())
}

pub(crate) fn actnorm_backward(
    spec: &LayerSpec,
    params: &[f64],
    x: &[f64],
    dy: &[f64],
    dparams: &mut [f64],
) -> Vec<f64> {
    let (c, hw) = (spec.channels, spec.pixels());
    let log_scale = &params[..c];
    let (dlog, dbias) = dparams.split_at_mut(c);
    let mut dx = vec![0.0; x.len()];
    for ch in 0..c {
        let s = log_scale[ch].exp();
        let range = ch * hw..(ch + 1) * hw;
        let mut gs = 0.0;
        let mut gb = 0.0;
        for ((d, &g), &xv) in dx[range.clone()].iter_mut().zip(&dy[range.clone()]).zip(&x[range]) {
            *d = g * s;
            gs += g * xv;
            gb += g;
        }
        dlog[ch] += gs * s - hw as f64;
        dbias[ch] += gb;
    }
    dx
}

// ---------------------------------------------------------------------------
// 1x1 mixing, W = L (U + diag(exp(d))) packed in one c*c block: entries below
// the diagonal are L, above are U, the diagonal holds d.

pub(crate) struct MixFactors {
    lower: Vec<f64>,
    upper: Vec<f64>,
    weight: Vec<f64>,
}

impl MixFactors {
    pub fn new(c: usize, packed: &[f64]) -> Self {
        let mut lower = vec![0.0; c * c];
        let mut upper = vec![0.0; c * c];
        for i in 0..c {
            for j in 0..c {
                let p = packed[i * c + j];
                match i.cmp(&j) {
                    std::cmp::Ordering::Greater => lower[i * c + j] = p,
                    std::cmp::Ordering::Less => upper[i * c + j] = p,
                    std::cmp::Ordering::Equal => {
                        lower[i * c + j] = 1.0;
                        upper[i * c + j] = p.exp();
                    }
                }
            }
        }
        let mut weight = vec![0.0; c * c];
        for i in 0..c {
            for k in 0..=i {
                let l = lower[i * c + k];
                for j in k..c {
                    weight[i * c + j] += l * upper[k * c + j];
                }
            }
        }
        Self {
            lower,
            upper,
            weight,
        }
    }
}

pub(crate) fn mix_log_det(spec: &LayerSpec, packed: &[f64]) -> f64 {
    let c = spec.channels;
    spec.pixels() as f64 * (0..c).map(|i| packed[i * c + i]).sum::<f64>()
}

pub(crate) fn mix_forward(spec: &LayerSpec, packed: &[f64], x: &[f64]) -> (Vec<f64>, f64) {
    let (c, hw) = (spec.channels, spec.pixels());
    let f = MixFactors::new(c, packed);
    let mut y = vec![0.0; x.len()];
    for i in 0..c {
        let dst = &mut y[i * hw..(i + 1) * hw];
        for j in 0..c {
            let wij = f.weight[i * c + j];
            for (d, s) in dst.iter_mut().zip(&x[j * hw..(j + 1) * hw]) {
                *d += wij * s;
            }
        }
    }
    (y, mix_log_det(spec, packed))
}

pub(crate) fn mix_inverse(spec: &LayerSpec, packed: &[f64], y: &[f64]) -> (Vec<f64>, f64) {
    let (c, hw) = (spec.channels, spec.pixels());
    let f = MixFactors::new(c, packed);
    let mut x = vec![0.0; y.len()];
    let mut a = vec![0.0; c];
    for p in 0..hw {
        // L a = y (unit lower triangular)
        for i in 0..c {
            let mut v = y[i * hw + p];
            for k in 0..i {
                v -= f.lower[i * c + k] * a[k];
            }
            a[i] = v;
        }
        // U' x = a
        for i in (0..c).rev() {
            let mut v = a[i];
            for k in i + 1..c {
                v -= f.upper[i * c + k] * x[k * hw + p];
            }
            x[i * hw + p] = v / f.upper[i * c + i];
        }
    }
    (x, -mix_log_det(spec, packed))
}

pub(crate) fn mix_backward(
    spec: &LayerSpec,
    packed: &[f64],
    x: &[f64],
    dy: &[f64],
    dparams: &mut [f64],
) -> Vec<f64> {
    let (c, hw) = (spec.channels, spec.pixels());
    let f = MixFactors::new(c, packed);
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; c * c];
    for i in 0..c {
        let g = &dy[i * hw..(i + 1) * hw];
        for j in 0..c {
            let xs = &x[j * hw..(j + 1) * hw];
            dw[i * c + j] = g.iter().zip(xs).map(|(a, b)| a * b).sum();
            let wij = f.weight[i * c + j];
            for (d, gv) in dx[j * hw..(j + 1) * hw].iter_mut().zip(g) {
                *d += wij * gv;
            }
        }
    }
    for i in 0..c {
        for j in 0..c {
            let grad = if i > j {
                // dL = dW U'^T
                (0..c).map(|k| dw[i * c + k] * f.upper[j * c + k]).sum::<f64>()
            } else {
                // dU' = L^T dW
                let du: f64 = (0..c).map(|k| f.lower[k * c + i] * dw[k * c + j]).sum();
                if i == j {
                    du * f.upper[i * c + i] - hw as f64
                } else {
                    du
                }
            };
            dparams[i * c + j] += grad;
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// affine coupling: y_b = x_b * exp(s) + t with (raw_s, t) = net(x_a)

/// Channel ranges `(conditioning, transformed)` for one coupling.
#[inline]
pub(crate) fn coupling_halves(c: usize, flip: bool) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
    let half = c / 2;
    if flip {
        (half..c, 0..half)
    } else {
        (0..half, half..c)
    }
}

pub(crate) struct CouplingNet {
    convs: Vec<Conv3x3>,
    offsets: Vec<usize>,
}

/// Activations retained from a subnetwork pass. `inputs[k]` is the input of
/// conv `k` (post-ReLU for k > 0); `output` is the raw final conv output.
pub(crate) struct NetTrace {
    pub inputs: Vec<Vec<f64>>,
    pub output: Vec<f64>,
}

impl CouplingNet {
    pub fn new(arch: &super::FlowArchitecture, spec: &LayerSpec) -> Self {
        let mut offsets = Vec::new();
        let mut off = 0;
        let convs = coupling_convs(arch, spec.channels)
            .into_iter()
            .map(|(cin, cout)| {
                let conv = Conv3x3 {
                    cin,
                    cout,
                    height: spec.height,
                    width: spec.width,
                };
                offsets.push(off);
                off += conv.param_len();
                conv
            })
            .collect();
        Self { convs, offsets }
    }

    pub fn convs(&self) -> &[Conv3x3] {
        &self.convs
    }

    pub fn conv_params<'a>(&self, k: usize, params: &'a [f64]) -> &'a [f64] {
        &params[self.offsets[k]..self.offsets[k] + self.convs[k].param_len()]
    }

    pub fn forward(&self, params: &[f64], cond: &[f64]) -> NetTrace {
        let hw = self.convs[0].height * self.convs[0].width;
        let mut inputs = Vec::with_capacity(self.convs.len());
        let mut cur = cond.to_vec();
        let last = self.convs.len() - 1;
        for (k, conv) in self.convs.iter().enumerate() {
            let mut out = vec![0.0; conv.cout * hw];
            conv.forward(self.conv_params(k, params), &cur, &mut out);
            inputs.push(cur);
            if k < last {
                out.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            cur = out;
        }
        NetTrace {
            inputs,
            output: cur,
        }
    }

    /// Backpropagates `dout` (w.r.t. the raw output) through the net.
    pub fn backward(&self, params: &[f64], trace: &NetTrace, dout: Vec<f64>, dparams: &mut [f64]) -> Vec<f64> {
        let mut grad = dout;
        for k in (0..self.convs.len()).rev() {
            let conv = &self.convs[k];
            let input = &trace.inputs[k];
            let mut dinput = vec![0.0; input.len()];
            let range = self.offsets[k]..self.offsets[k] + conv.param_len();
            conv.backward(
                self.conv_params(k, params),
                input,
                &grad,
                &mut dparams[range],
                Some(&mut dinput),
            );
            if k > 0 {
                // input of conv k is relu(pre); relu' = 1 where the output is positive
                for (d, &a) in dinput.iter_mut().zip(input) {
                    if a <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            grad = dinput;
        }
        grad
    }
}

pub(crate) fn coupling_forward(
    net: &CouplingNet,
    spec: &LayerSpec,
    flip: bool,
    params: &[f64],
    x: &[f64],
) -> (Vec<f64>, f64, NetTrace) {
    let hw = spec.pixels();
    let (cond, tr) = coupling_halves(spec.channels, flip);
    let n = tr.len() * hw;
    let trace = net.forward(params, &x[cond.start * hw..cond.end * hw]);
    let (raw_s, shift) = trace.output.split_at(n);
    let mut y = x.to_vec();
    let mut log_det = 0.0;
    for (k, v) in y[tr.start * hw..tr.end * hw].iter_mut().enumerate() {
        let s = squash(raw_s[k]);
        log_det += s;
        *v = *v * s.exp() + shift[k];
    }
    (y, log_det, trace)
}

pub(crate) fn coupling_inverse(
    net: &CouplingNet,
    spec: &LayerSpec,
    flip: bool,
    params: &[f64],
    y: &[f64],
) -> (Vec<f64>, f64) {
    let hw = spec.pixels();
    let (cond, tr) = coupling_halves(spec.channels, flip);
    let n = tr.len() * hw;
    let trace = net.forward(params, &y[cond.start * hw..cond.end * hw]);
    let (raw_s, shift) = trace.output.split_at(n);
    let mut x = y.to_vec();
    let mut log_det = 0.0;
    for (k, v) in x[tr.start * hw..tr.end * hw].iter_mut().enumerate() {
        let s = squash(raw_s[k]);
        log_det -= s;
        *v = (*v - shift[k]) * (-s).exp();
    }
    (x, log_det)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn coupling_backward(
    net: &CouplingNet,
    spec: &LayerSpec,
    flip: bool,
    params: &[f64],
    x: &[f64],
    trace: &NetTrace,
    dy: &[f64],
    dparams: &mut [f64],
) -> Vec<f64> {
    let hw = spec.pixels();
    let (cond, tr) = coupling_halves(spec.channels, flip);
    let n = tr.len() * hw;
    let raw_s = &trace.output[..n];
    let mut dx = dy.to_vec();
    let mut dout = vec![0.0; 2 * n];
    let xb = &x[tr.start * hw..tr.end * hw];
    let dyb = &dy[tr.start * hw..tr.end * hw];
    for k in 0..n {
        let s = squash(raw_s[k]);
        let e = s.exp();
        dx[tr.start * hw + k] = dyb[k] * e;
        // dL/ds includes -1 from the -log det term
        let ds = dyb[k] * xb[k] * e - 1.0;
        dout[k] = ds * squash_derivative(raw_s[k]);
        dout[n + k] = dyb[k];
    }
    let dcond = net.backward(params, trace, dout, dparams);
    for (d, g) in dx[cond.start * hw..cond.end * hw].iter_mut().zip(dcond) {
        *d += g;
    }
    dx
}
