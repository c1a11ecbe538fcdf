//! Convolutions use the cross-correlation convention (no kernel flip):
//! `y[o, t] = b[o] + sum_{c, j} w[o, c, j] * x[c, t * stride + j - padding]`
//! with zeros outside the input.

use super::kernels::{gemm_nn, gemm_nt, gemm_tn};
use super::tape::{Op, Tape, Var};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

pub(crate) struct Conv1dSaved {
    x: Var,
    w: Var,
    b: Var,
    stride: usize,
    padding: usize,
    l_out: usize,
}

pub(crate) struct Conv2dSaved {
    x: Var,
    w: Var,
    b: Var,
    stride: usize,
    padding: usize,
    h_out: usize,
    w_out: usize,
}

/// Output length of a 1-D convolution, or `None` when the kernel does not fit.
pub fn conv_out_len(len: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    if stride == 0 || kernel == 0 || kernel > len + 2 * padding {
        return None;
    }
    Some((len + 2 * padding - kernel) / stride + 1)
}

fn im2col_1d<T: Scalar>(x: &[T], c_in: usize, len: usize, k: usize, stride: usize, pad: usize, l_out: usize, cols: &mut [T]) {
    for c in 0..c_in {
        for j in 0..k {
            let row = &mut cols[(c * k + j) * l_out..(c * k + j + 1) * l_out];
            for (t, slot) in row.iter_mut().enumerate() {
                let pos = (t * stride + j) as isize - pad as isize;
                *slot = if pos >= 0 && (pos as usize) < len { x[c * len + pos as usize] } else { T::zero() };
            }
        }
    }
}

fn col2im_1d<T: Scalar>(cols: &[T], c_in: usize, len: usize, k: usize, stride: usize, pad: usize, l_out: usize, dx: &mut [T]) {
    for c in 0..c_in {
        for j in 0..k {
            let row = &cols[(c * k + j) * l_out..(c * k + j + 1) * l_out];
            for (t, &v) in row.iter().enumerate() {
                let pos = (t * stride + j) as isize - pad as isize;
                if pos >= 0 && (pos as usize) < len {
                    dx[c * len + pos as usize] += v;
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col_2d<T: Scalar>(
    x: &[T],
    c_in: usize,
    (h, w): (usize, usize),
    (kh, kw): (usize, usize),
    stride: usize,
    pad: usize,
    (ho, wo): (usize, usize),
    cols: &mut [T],
    scatter: bool,
    dx: &mut [T],
) {
    for c in 0..c_in {
        for i in 0..kh {
            for j in 0..kw {
                let r = (c * kh + i) * kw + j;
                for oy in 0..ho {
                    let y = (oy * stride + i) as isize - pad as isize;
                    for ox in 0..wo {
                        let xx = (ox * stride + j) as isize - pad as isize;
                        let inside = y >= 0 && (y as usize) < h && xx >= 0 && (xx as usize) < w;
                        let col = r * ho * wo + oy * wo + ox;
                        let src = c * h * w + (y.max(0) as usize) * w + xx.max(0) as usize;
                        if scatter {
                            if inside {
                                dx[src] += cols[col];
                            }
                        } else {
                            cols[col] = if inside { x[src] } else { T::zero() };
                        }
                    }
                }
            }
        }
    }
}

impl<T: Scalar> Tape<T> {
    /// `x: [B, C_in, L]`, `w: [C_out, C_in, K]`, `b: [C_out]` -> `[B, C_out, L_out]`
    /// with `L_out = floor((L + 2*padding - K) / stride) + 1`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: usize) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x).to_vec(), self.shape(w).to_vec(), self.shape(b).to_vec());
        if sx.len() != 3 || sw.len() != 3 || sw[1] != sx[1] || sb != [sw[0]] {
            return Err(Error::dim("conv1d", format!("input {sx:?}, kernel {sw:?}, bias {sb:?}")));
        }
        if stride == 0 {
            return Err(Error::dim("conv1d", "stride must be >= 1"));
        }
        let (batch, c_in, len) = (sx[0], sx[1], sx[2]);
        let (c_out, k) = (sw[0], sw[2]);
        let l_out = conv_out_len(len, k, stride, padding).ok_or_else(|| {
            Error::dim("conv1d", format!("kernel {k} larger than padded input {}", len + 2 * padding))
        })?;
        let (xd, wd, bd) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let mut out = vec![T::zero(); batch * c_out * l_out];
        let mut cols = vec![T::zero(); c_in * k * l_out];
        for n in 0..batch {
            im2col_1d(&xd[n * c_in * len..(n + 1) * c_in * len], c_in, len, k, stride, padding, l_out, &mut cols);
            let o = &mut out[n * c_out * l_out..(n + 1) * c_out * l_out];
            for (co, row) in o.chunks_mut(l_out).enumerate() {
                row.iter_mut().for_each(|v| *v = bd[co]);
            }
            gemm_nn(wd, &cols, o, c_out, c_in * k, l_out);
        }
        let rg = self.any_grad(&[x, w, b]);
        let saved = Conv1dSaved { x, w, b, stride, padding, l_out };
        Ok(self.push(Tensor::new([batch, c_out, l_out], out)?, Op::Conv1d(saved), rg))
    }

    /// `x: [B, C_in, H, W]`, `w: [C_out, C_in, KH, KW]`, `b: [C_out]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: usize) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x).to_vec(), self.shape(w).to_vec(), self.shape(b).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sw[1] != sx[1] || sb != [sw[0]] {
            return Err(Error::dim("conv2d", format!("input {sx:?}, kernel {sw:?}, bias {sb:?}")));
        }
        let (batch, c_in, h, wi) = (sx[0], sx[1], sx[2], sx[3]);
        let (c_out, kh, kw) = (sw[0], sw[2], sw[3]);
        let ho = conv_out_len(h, kh, stride, padding);
        let wo = conv_out_len(wi, kw, stride, padding);
        let (Some(ho), Some(wo)) = (ho, wo) else {
            return Err(Error::dim("conv2d", format!("kernel {kh}x{kw} does not fit input {h}x{wi} with padding {padding}")));
        };
        let (xd, wd, bd) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let plane = ho * wo;
        let mut out = vec![T::zero(); batch * c_out * plane];
        let mut cols = vec![T::zero(); c_in * kh * kw * plane];
        let mut unused: [T; 0] = [];
        for n in 0..batch {
            let xs = &xd[n * c_in * h * wi..(n + 1) * c_in * h * wi];
            im2col_2d(xs, c_in, (h, wi), (kh, kw), stride, padding, (ho, wo), &mut cols, false, &mut unused);
            let o = &mut out[n * c_out * plane..(n + 1) * c_out * plane];
            for (co, row) in o.chunks_mut(plane).enumerate() {
                row.iter_mut().for_each(|v| *v = bd[co]);
            }
            gemm_nn(wd, &cols, o, c_out, c_in * kh * kw, plane);
        }
        let rg = self.any_grad(&[x, w, b]);
        let saved = Conv2dSaved { x, w, b, stride, padding, h_out: ho, w_out: wo };
        Ok(self.push(Tensor::new([batch, c_out, ho, wo], out)?, Op::Conv2d(saved), rg))
    }

    /// Max pooling over the last axis. Ties resolve to the first maximum.
    pub fn maxpool1d(&mut self, x: Var, window: usize, stride: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let len = *shape.last().ok_or_else(|| Error::dim("maxpool1d", "scalar input"))?;
        let l_out = conv_out_len(len, window, stride, 0)
            .ok_or_else(|| Error::dim("maxpool1d", format!("window {window} longer than input {len}")))?;
        let rows = self.value(x).len() / len;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(rows * l_out);
        let mut argmax = Vec::with_capacity(rows * l_out);
        for r in 0..rows {
            for t in 0..l_out {
                let start = r * len + t * stride;
                let mut best = start;
                for i in start + 1..start + window {
                    if src[i] > src[best] {
                        best = i;
                    }
                }
                out.push(src[best]);
                argmax.push(best);
            }
        }
        if self.kinks_on() {
            let bits: Vec<u64> = argmax.iter().map(|&a| a as u64).collect();
            self.mix_kinks(bits.into_iter());
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = l_out;
        let rg = self.requires_grad(x);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::MaxPool1d { x, argmax }, rg))
    }
}

pub(crate) fn conv1d_backward<T: Scalar>(tape: &Tape<T>, s: &Conv1dSaved, g: &[T]) -> Vec<(Var, Vec<T>)> {
    let (sx, sw) = (tape.shape(s.x), tape.shape(s.w));
    let (batch, c_in, len) = (sx[0], sx[1], sx[2]);
    let (c_out, k) = (sw[0], sw[2]);
    let l_out = s.l_out;
    let (xd, wd) = (tape.value(s.x).data(), tape.value(s.w).data());
    let mut dx = vec![T::zero(); xd.len()];
    let mut dw = vec![T::zero(); wd.len()];
    let mut db = vec![T::zero(); c_out];
    let mut cols = vec![T::zero(); c_in * k * l_out];
    let mut dcols = vec![T::zero(); c_in * k * l_out];
    for n in 0..batch {
        let gn = &g[n * c_out * l_out..(n + 1) * c_out * l_out];
        for (co, row) in gn.chunks(l_out).enumerate() {
            db[co] += row.iter().copied().sum();
        }
        if tape.requires_grad(s.w) {
            im2col_1d(&xd[n * c_in * len..(n + 1) * c_in * len], c_in, len, k, s.stride, s.padding, l_out, &mut cols);
            gemm_nt(gn, &cols, &mut dw, c_out, l_out, c_in * k);
        }
        if tape.requires_grad(s.x) {
            dcols.iter_mut().for_each(|v| *v = T::zero());
            gemm_tn(wd, gn, &mut dcols, c_out, c_in * k, l_out);
            col2im_1d(&dcols, c_in, len, k, s.stride, s.padding, l_out, &mut dx[n * c_in * len..(n + 1) * c_in * len]);
        }
    }
    vec![(s.x, dx), (s.w, dw), (s.b, db)]
}

pub(crate) fn conv2d_backward<T: Scalar>(tape: &Tape<T>, s: &Conv2dSaved, g: &[T]) -> Vec<(Var, Vec<T>)> {
    let (sx, sw) = (tape.shape(s.x), tape.shape(s.w));
    let (batch, c_in, h, wi) = (sx[0], sx[1], sx[2], sx[3]);
    let (c_out, kh, kw) = (sw[0], sw[2], sw[3]);
    let plane = s.h_out * s.w_out;
    let (xd, wd) = (tape.value(s.x).data(), tape.value(s.w).data());
    let mut dx = vec![T::zero(); xd.len()];
    let mut dw = vec![T::zero(); wd.len()];
    let mut db = vec![T::zero(); c_out];
    let q = c_in * kh * kw;
    let mut cols = vec![T::zero(); q * plane];
    let mut unused: [T; 0] = [];
    for n in 0..batch {
        let gn = &g[n * c_out * plane..(n + 1) * c_out * plane];
        for (co, row) in gn.chunks(plane).enumerate() {
            db[co] += row.iter().copied().sum();
        }
        let xs = &xd[n * c_in * h * wi..(n + 1) * c_in * h * wi];
        im2col_2d(xs, c_in, (h, wi), (kh, kw), s.stride, s.padding, (s.h_out, s.w_out), &mut cols, false, &mut unused);
        gemm_nt(gn, &cols, &mut dw, c_out, plane, q);
        cols.iter_mut().for_each(|v| *v = T::zero());
        gemm_tn(wd, gn, &mut cols, c_out, q, plane);
        let dxs = &mut dx[n * c_in * h * wi..(n + 1) * c_in * h * wi];
        im2col_2d(&[], c_in, (h, wi), (kh, kw), s.stride, s.padding, (s.h_out, s.w_out), &mut cols, true, dxs);
    }
    vec![(s.x, dx), (s.w, dw), (s.b, db)]
}
