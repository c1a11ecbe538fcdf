use rand::Rng;

use super::linalg::split_axis;
use super::tape::{Op, Tape, Var};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

pub(crate) struct BatchNormSaved<T> {
    x: Var,
    gamma: Var,
    beta: Var,
    xhat: Vec<T>,
    invstd: Vec<T>,
    batch_stats: bool,
}

pub(crate) struct LayerNormSaved<T> {
    x: Var,
    gamma: Var,
    beta: Var,
    xhat: Vec<T>,
    invstd: Vec<T>,
}

/// Running statistics consumed (eval) or produced (train) by batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance, the convention used for the running estimate.
    pub var: Vec<T>,
}

impl<T: Scalar> Tape<T> {
    /// Softmax along `axis`, stabilised by subtracting the per-row maximum.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim("softmax", format!("axis {axis} out of range for {shape:?}")));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |t: usize| (o * n + t) * inner + i;
                let mut m = T::neg_infinity();
                for t in 0..n {
                    m = m.max(src[at(t)]);
                }
                let mut z = T::zero();
                for t in 0..n {
                    let e = (src[at(t)] - m).exp();
                    out[at(t)] = e;
                    z += e;
                }
                for t in 0..n {
                    out[at(t)] /= z;
                }
            }
        }
        let rg = self.requires_grad(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax { x, axis }, rg))
    }

    /// Batch normalisation over every axis except axis 1 (channels).
    ///
    /// In training mode the batch statistics are used and returned so the
    /// caller can update its running estimates; in eval mode `running` must
    /// be supplied.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<&BatchStats<T>>,
        eps: f64,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::dim("batchnorm", format!("need [B, C, ..], got {shape:?}")));
        }
        let c = shape[1];
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::dim("batchnorm", format!("affine params must be [{c}]")));
        }
        let (batch, _, inner) = split_axis(&shape, 1);
        let count = batch * inner;
        let src = self.value(x).data();
        let train = self.is_train();
        let (mean, var_biased, stats) = if train {
            if batch < 2 {
                return Err(Error::contract("batchnorm", "training mode needs batch extent >= 2"));
            }
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            for b in 0..batch {
                for ch in 0..c {
                    let row = &src[(b * c + ch) * inner..(b * c + ch + 1) * inner];
                    mean[ch] += row.iter().copied().sum::<T>();
                }
            }
            let inv = T::one() / T::c(count as f64);
            mean.iter_mut().for_each(|m| *m *= inv);
            for b in 0..batch {
                for ch in 0..c {
                    let row = &src[(b * c + ch) * inner..(b * c + ch + 1) * inner];
                    var[ch] += row.iter().map(|&v| (v - mean[ch]) * (v - mean[ch])).sum::<T>();
                }
            }
            let unbiased: Vec<T> = var.iter().map(|&v| v / T::c((count - 1).max(1) as f64)).collect();
            var.iter_mut().for_each(|v| *v *= inv);
            let stats = BatchStats { mean: mean.clone(), var: unbiased };
            (mean, var, Some(stats))
        } else {
            let r = running.ok_or_else(|| Error::contract("batchnorm", "eval mode requires running statistics"))?;
            (r.mean.clone(), r.var.clone(), None)
        };
        let eps = T::c(eps);
        let invstd: Vec<T> = var_biased.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (g, bta) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); src.len()];
        let mut out = vec![T::zero(); src.len()];
        for b in 0..batch {
            for ch in 0..c {
                for i in 0..inner {
                    let idx = (b * c + ch) * inner + i;
                    let h = (src[idx] - mean[ch]) * invstd[ch];
                    xhat[idx] = h;
                    out[idx] = g[ch] * h + bta[ch];
                }
            }
        }
        let rg = self.any_grad(&[x, gamma, beta]);
        let saved = BatchNormSaved { x, gamma, beta, xhat, invstd, batch_stats: train };
        Ok((self.push(Tensor::new(shape, out)?, Op::BatchNorm(saved), rg), stats))
    }

    /// Layer normalisation over the last axis with affine `gamma`, `beta`.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::dim("layernorm", "scalar input"))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::dim("layernorm", format!("affine params must be [{d}]")));
        }
        let src = self.value(x).data();
        let rows = src.len() / d;
        let eps = T::c(eps);
        let inv_d = T::one() / T::c(d as f64);
        let (g, bta) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); src.len()];
        let mut out = vec![T::zero(); src.len()];
        let mut invstd = vec![T::zero(); rows];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let is = T::one() / (var + eps).sqrt();
            invstd[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = g[j] * h + bta[j];
            }
        }
        let rg = self.any_grad(&[x, gamma, beta]);
        let saved = LayerNormSaved { x, gamma, beta, xhat, invstd };
        Ok(self.push(Tensor::new(shape, out)?, Op::LayerNorm(saved), rg))
    }

    /// Inverted dropout: in training mode each entry is zeroed with
    /// probability `p` and survivors are scaled by `1 / (1 - p)`. Identity in
    /// eval mode.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::contract("dropout", format!("rate {p} outside [0, 1)")));
        }
        if !self.is_train() || p == 0.0 {
            return Ok(x);
        }
        let n = self.value(x).len();
        let keep = T::c(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..n).map(|_| if self.rng.random::<f64>() < p { T::zero() } else { keep }).collect();
        let src = self.value(x);
        let out: Vec<T> = src.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = Tensor::new(src.shape().to_vec(), out)?;
        let rg = self.requires_grad(x);
        Ok(self.push(value, Op::Dropout { x, mask }, rg))
    }
}

pub(crate) fn softmax_backward<T: Scalar>(out: &Tensor<T>, x: Var, axis: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
    let (outer, n, inner) = split_axis(out.shape(), axis);
    let y = out.data();
    let mut dx = vec![T::zero(); y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |t: usize| (o * n + t) * inner + i;
            let dot: T = (0..n).map(|t| g[at(t)] * y[at(t)]).sum();
            for t in 0..n {
                dx[at(t)] = y[at(t)] * (g[at(t)] - dot);
            }
        }
    }
    vec![(x, dx)]
}

pub(crate) fn batchnorm_backward<T: Scalar>(tape: &Tape<T>, s: &BatchNormSaved<T>, g: &[T]) -> Vec<(Var, Vec<T>)> {
    let shape = tape.shape(s.x);
    let c = shape[1];
    let (batch, _, inner) = split_axis(shape, 1);
    let gamma = tape.value(s.gamma).data();
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for b in 0..batch {
        for ch in 0..c {
            for i in 0..inner {
                let idx = (b * c + ch) * inner + i;
                dgamma[ch] += g[idx] * s.xhat[idx];
                dbeta[ch] += g[idx];
            }
        }
    }
    let mut dx = vec![T::zero(); g.len()];
    let m = T::c((batch * inner) as f64);
    for b in 0..batch {
        for ch in 0..c {
            let k = gamma[ch] * s.invstd[ch];
            for i in 0..inner {
                let idx = (b * c + ch) * inner + i;
                dx[idx] = if s.batch_stats {
                    k * (g[idx] - dbeta[ch] / m - s.xhat[idx] * dgamma[ch] / m)
                } else {
                    k * g[idx]
                };
            }
        }
    }
    vec![(s.x, dx), (s.gamma, dgamma), (s.beta, dbeta)]
}

pub(crate) fn layernorm_backward<T: Scalar>(tape: &Tape<T>, s: &LayerNormSaved<T>, g: &[T]) -> Vec<(Var, Vec<T>)> {
    let d = *tape.shape(s.x).last().unwrap();
    let gamma = tape.value(s.gamma).data();
    let rows = g.len() / d;
    let mut dgamma = vec![T::zero(); d];
    let mut dbeta = vec![T::zero(); d];
    let mut dx = vec![T::zero(); g.len()];
    let inv_d = T::one() / T::c(d as f64);
    for r in 0..rows {
        let (gr, hr) = (&g[r * d..(r + 1) * d], &s.xhat[r * d..(r + 1) * d]);
        let mut sum_dh = T::zero();
        let mut sum_dh_h = T::zero();
        for j in 0..d {
            dgamma[j] += gr[j] * hr[j];
            dbeta[j] += gr[j];
            let dh = gr[j] * gamma[j];
            sum_dh += dh;
            sum_dh_h += dh * hr[j];
        }
        for j in 0..d {
            let dh = gr[j] * gamma[j];
            dx[r * d + j] = s.invstd[r] * (dh - inv_d * sum_dh - hr[j] * inv_d * sum_dh_h);
        }
    }
    vec![(s.x, dx), (s.gamma, dgamma), (s.beta, dbeta)]
}
