//! Same-size 3x3 convolution over CHW tensors with zero padding.
//!
//! Parameters are laid out as `weights[cout][cin][3][3]` followed by
//! `bias[cout]`.

#[derive(Debug, Clone, Copy)]
pub(crate) struct Conv3x3 {
    pub cin: usize,
    pub cout: usize,
    pub height: usize,
    pub width: usize,
}

/// Output row range `i` for which `i + dy` stays inside `0..n`.
#[inline]
fn valid_range(n: usize, d: isize) -> (usize, usize) {
    let lo = if d < 0 { (-d) as usize } else { 0 };
    let hi = if d > 0 { n - d as usize } else { n };
    (lo, hi)
}

impl Conv3x3 {
    pub fn weight_len(&self) -> usize {
        self.cout * self.cin * 9
    }

    pub fn param_len(&self) -> usize {
        self.weight_len() + self.cout
    }

    pub fn forward(&self, params: &[f64], input: &[f64], out: &mut [f64]) {
        let (h, w) = (self.height, self.width);
        let hw = h * w;
        let (weights, bias) = params.split_at(self.weight_len());
        debug_assert_eq!(input.len(), self.cin * hw);
        debug_assert_eq!(out.len(), self.cout * hw);
        for o in 0..self.cout {
            let dst = &mut out[o * hw..(o + 1) * hw];
            dst.fill(bias[o]);
            for c in 0..self.cin {
                let src = &input[c * hw..(c + 1) * hw];
                let kernel = &weights[(o * self.cin + c) * 9..(o * self.cin + c + 1) * 9];
                for ky in 0..3 {
                    let dy = ky as isize - 1;
                    let (r0, r1) = valid_range(h, dy);
                    for kx in 0..3 {
                        let wv = kernel[ky * 3 + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let dx = kx as isize - 1;
                        let (c0, c1) = valid_range(w, dx);
                        for i in r0..r1 {
                            let si = (i as isize + dy) as usize;
                            let d = &mut dst[i * w + c0..i * w + c1];
                            let s0 = (si * w) as isize + c0 as isize + dx;
                            let s = &src[s0 as usize..s0 as usize + (c1 - c0)];
                            for (a, b) in d.iter_mut().zip(s) {
                                *a += wv * b;
                            }
                        }
                    }
                }
            }
        }
    }

    /// Accumulates parameter gradients into `dparams` and, when given,
    /// the input gradient into `dinput`.
    pub fn backward(
        &self,
        params: &[f64],
        input: &[f64],
        dout: &[f64],
        dparams: &mut [f64],
        mut dinput: Option<&mut [f64]>,
    ) {
        let (h, w) = (self.height, self.width);
        let hw = h * w;
        let weights = &params[..self.weight_len()];
        let (dweights, dbias) = dparams.split_at_mut(self.weight_len());
        for o in 0..self.cout {
            let g = &dout[o * hw..(o + 1) * hw];
            dbias[o] += g.iter().sum::<f64>();
            for c in 0..self.cin {
                let src = &input[c * hw..(c + 1) * hw];
                let base = (o * self.cin + c) * 9;
                for ky in 0..3 {
                    let dy = ky as isize - 1;
                    let (r0, r1) = valid_range(h, dy);
                    for kx in 0..3 {
                        let dx = kx as isize - 1;
                        let (c0, c1) = valid_range(w, dx);
                        let wv = weights[base + ky * 3 + kx];
                        let mut acc = 0.0;
                        for i in r0..r1 {
                            let si = (i as isize + dy) as usize;
                            let gr = &g[i * w + c0..i * w + c1];
                            let s0 = ((si * w) as isize + c0 as isize + dx) as usize;
                            let sr = &src[s0..s0 + (c1 - c0)];
                            acc += gr.iter().zip(sr).map(|(a, b)| a * b).sum::<f64>();
                            if let Some(din) = dinput.as_deref_mut() {
                                if wv != 0.0 {
                                    let dr = &mut din[c * hw + s0..c * hw + s0 + (c1 - c0)];
                                    for (a, b) in dr.iter_mut().zip(gr) {
                                        *a += wv * b;
                                    }
                                }
                            }
                        }
                        dweights[base + ky * 3 + kx] += acc;
                    }
                }
            }
        }
    }
}
