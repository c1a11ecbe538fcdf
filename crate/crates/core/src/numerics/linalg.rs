use super::kernels::{gemm_nn, gemm_nt, gemm_tn};
use super::tape::{Op, Tape, Var};
use super::tensor::{broadcast_index_map, broadcast_shapes, numel, permute_data, Scalar, Tensor};
use crate::error::{Error, Result};

pub(crate) struct MatmulSaved {
    a: Var,
    b: Var,
    m: usize,
    k: usize,
    n: usize,
    /// Per output batch entry, the batch offsets into `a` and `b`.
    a_batches: Vec<usize>,
    b_batches: Vec<usize>,
}

/// Splits a shape into its (outer, axis, inner) extents around `axis`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (numel(&shape[..axis]), shape[axis], numel(&shape[axis + 1..]))
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::dim(op, format!("axis {axis} out of range for shape {shape:?}")));
    }
    Ok(())
}

impl<T: Scalar> Tape<T> {
    /// Batched matrix product `[.., m, k] x [.., k, n] -> [.., m, n]` with
    /// numpy broadcasting over the leading batch extents.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::dim("matmul", format!("operands need rank >= 2, got {sa:?} and {sb:?}")));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(Error::dim("matmul", format!("inner extents differ: {sa:?} x {sb:?}")));
        }
        let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let batch = broadcast_shapes(ba, bb).ok_or_else(|| {
            Error::dim("matmul", format!("batch extents do not broadcast: {sa:?} x {sb:?}"))
        })?;
        let nb = numel(&batch);
        let (a_batches, b_batches) = if batch.is_empty() {
            (vec![0], vec![0])
        } else {
            (broadcast_index_map(ba, &batch), broadcast_index_map(bb, &batch))
        };
        let mut out = vec![T::zero(); nb * m * n];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        if bb.iter().product::<usize>() == 1 && ba.iter().product::<usize>() == nb {
            // Shared right operand: fold the batch into the row extent.
            gemm_nn(da, db, &mut out, nb * m, k, n);
        } else {
            for i in 0..nb {
                let (oa, ob) = (a_batches[i] * m * k, b_batches[i] * k * n);
                gemm_nn(&da[oa..oa + m * k], &db[ob..ob + k * n], &mut out[i * m * n..(i + 1) * m * n], m, k, n);
            }
        }
        let mut shape = batch;
        shape.extend([m, n]);
        let value = Tensor::new(shape, out)?;
        let rg = self.any_grad(&[a, b]);
        let saved = MatmulSaved { a, b, m, k, n, a_batches, b_batches };
        Ok(self.push(value, Op::Matmul(saved), rg))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::dim("permute", format!("axes {axes:?} invalid for shape {shape:?}")));
        }
        let (out_shape, data) = permute_data(&shape, self.value(x).data(), axes);
        let rg = self.requires_grad(x);
        Ok(self.push(Tensor::new(out_shape, data)?, Op::Permute { x, axes: axes.to_vec() }, rg))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(Error::dim("transpose", "rank < 2"));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(x, &axes)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        let rg = self.requires_grad(x);
        Ok(self.push(value, Op::Reshape { x }, rg))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs.first().ok_or_else(|| Error::dim("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        check_axis("concat", &base, axis)?;
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::dim("concat", format!("shape {s:?} incompatible with {base:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let len = self.shape(x)[axis] * inner;
                out.extend_from_slice(&self.value(x).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = self.any_grad(xs);
        Ok(self.push(Tensor::new(shape, out)?, Op::Concat { xs: xs.to_vec(), axis }, rg))
    }

    /// `len` entries of `x` along `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis("slice", &shape, axis)?;
        if len == 0 || start + len > shape[axis] {
            return Err(Error::dim("slice", format!("range {start}..{} exceeds extent {}", start + len, shape[axis])));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * n * inner + start * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.requires_grad(x);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::Slice { x, axis, start }, rg))
    }

    fn reduce_axis(&mut self, x: Var, axis: usize, mean: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis(if mean { "mean" } else { "sum" }, &shape, axis)?;
        let (outer, n, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for t in 0..n {
                let row = &src[(o * n + t) * inner..(o * n + t + 1) * inner];
                for (acc, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        if mean {
            let inv = T::one() / T::c(n as f64);
            out.iter_mut().for_each(|v| *v *= inv);
        }
        let mut out_shape: Vec<usize> = shape.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let rg = self.requires_grad(x);
        let op = if mean { Op::Mean { x, axis } } else { Op::Sum { x, axis } };
        Ok(self.push(Tensor::new(out_shape, out)?, op, rg))
    }

    /// Sum over `axis`, dropping it.
    pub fn sum(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, false)
    }

    /// Mean over `axis`, dropping it.
    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, true)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: T = self.value(x).data().iter().copied().sum();
        let rg = self.requires_grad(x);
        self.push(Tensor::scalar(s), Op::SumAll { x }, rg)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n)
    }
}

pub(crate) fn matmul_backward<T: Scalar>(tape: &Tape<T>, s: &MatmulSaved, g: &[T]) -> Vec<(Var, Vec<T>)> {
    let (da, db) = (tape.value(s.a).data(), tape.value(s.b).data());
    let (m, k, n) = (s.m, s.k, s.n);
    let mut ga = vec![T::zero(); da.len()];
    let mut gb = vec![T::zero(); db.len()];
    let nb = s.a_batches.len();
    let shared_b = db.len() == k * n && da.len() == nb * m * k;
    if shared_b {
        if tape.requires_grad(s.a) {
            gemm_nt(g, db, &mut ga, nb * m, n, k);
        }
        if tape.requires_grad(s.b) {
            gemm_tn(da, g, &mut gb, nb * m, k, n);
        }
    } else {
        for i in 0..nb {
            let (oa, ob) = (s.a_batches[i] * m * k, s.b_batches[i] * k * n);
            let gi = &g[i * m * n..(i + 1) * m * n];
            if tape.requires_grad(s.a) {
                gemm_nt(gi, &db[ob..ob + k * n], &mut ga[oa..oa + m * k], m, n, k);
            }
            if tape.requires_grad(s.b) {
                gemm_tn(&da[oa..oa + m * k], gi, &mut gb[ob..ob + k * n], m, k, n);
            }
        }
    }
    vec![(s.a, ga), (s.b, gb)]
}

pub(crate) fn permute_backward<T: Scalar>(tape: &Tape<T>, x: Var, axes: &[usize], g: &[T]) -> Vec<(Var, Vec<T>)> {
    let mut inverse = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inverse[a] = i;
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| tape.shape(x)[a]).collect();
    let (_, data) = permute_data(&out_shape, g, &inverse);
    vec![(x, data)]
}

pub(crate) fn concat_backward<T: Scalar>(tape: &Tape<T>, xs: &[Var], axis: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
    let base = tape.shape(xs[0]);
    let (outer, _, inner) = split_axis(base, axis);
    let mut parts: Vec<Vec<T>> = xs.iter().map(|&x| Vec::with_capacity(tape.value(x).len())).collect();
    let mut off = 0;
    for _ in 0..outer {
        for (part, &x) in parts.iter_mut().zip(xs) {
            let len = tape.shape(x)[axis] * inner;
            part.extend_from_slice(&g[off..off + len]);
            off += len;
        }
    }
    xs.iter().copied().zip(parts).collect()
}

pub(crate) fn slice_backward<T: Scalar>(
    tape: &Tape<T>,
    x: Var,
    axis: usize,
    start: usize,
    out_shape: &[usize],
    g: &[T],
) -> Vec<(Var, Vec<T>)> {
    let shape = tape.shape(x);
    let (outer, n, inner) = split_axis(shape, axis);
    let len = out_shape[axis];
    let mut dx = vec![T::zero(); tape.value(x).len()];
    for o in 0..outer {
        let dst = o * n * inner + start * inner;
        dx[dst..dst + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
    }
    vec![(x, dx)]
}

pub(crate) fn sum_backward<T: Scalar>(tape: &Tape<T>, x: Var, axis: usize, g: &[T], mean: bool) -> Vec<(Var, Vec<T>)> {
    let (outer, n, inner) = split_axis(tape.shape(x), axis);
    let scale = if mean { T::one() / T::c(n as f64) } else { T::one() };
    let mut dx = vec![T::zero(); outer * n * inner];
    for o in 0..outer {
        for t in 0..n {
            for i in 0..inner {
                dx[(o * n + t) * inner + i] = g[o * inner + i] * scale;
            }
        }
    }
    vec![(x, dx)]
}
