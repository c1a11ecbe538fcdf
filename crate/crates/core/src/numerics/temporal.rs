use super::linalg::split_axis;
use super::tape::{Op, Tape, Var};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

impl<T: Scalar> Tape<T> {
    /// Deviation of each sample from the mean of its centred `2k+1` window
    /// along `axis`: `d_t = x_t - mean(x_{t-k} .. x_{t+k})`.
    ///
    /// Out-of-range window positions repeat the nearest edge sample. The sum
    /// is accumulated as `-(1/(2k+1)) * sum (x_tau - x_t)`, so a signal that is
    /// constant inside the window produces exactly zero.
    pub fn difference(&mut self, x: Var, axis: usize, k: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim("difference", format!("axis {axis} out of range for {shape:?}")));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let w = T::c((2 * k + 1) as f64);
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for t in 0..n {
                let centre = &src[(o * n + t) * inner..(o * n + t + 1) * inner];
                let dst = &mut out[(o * n + t) * inner..(o * n + t + 1) * inner];
                for tau in t as isize - k as isize..=(t + k) as isize {
                    let c = tau.clamp(0, n as isize - 1) as usize;
                    let other = &src[(o * n + c) * inner..(o * n + c + 1) * inner];
                    for ((d, &a), &b) in dst.iter_mut().zip(other).zip(centre) {
                        *d += a - b;
                    }
                }
                dst.iter_mut().for_each(|d| *d = -*d / w);
            }
        }
        let rg = self.requires_grad(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::Difference { x, axis, k }, rg))
    }
}

pub(crate) fn difference_backward<T: Scalar>(tape: &Tape<T>, x: Var, axis: usize, k: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
    let (outer, n, inner) = split_axis(tape.shape(x), axis);
    let w = T::c((2 * k + 1) as f64);
    let mut dx = g.to_vec();
    for o in 0..outer {
        for t in 0..n {
            for tau in t as isize - k as isize..=(t + k) as isize {
                let c = tau.clamp(0, n as isize - 1) as usize;
                for i in 0..inner {
                    dx[(o * n + c) * inner + i] -= g[(o * n + t) * inner + i] / w;
                }
            }
        }
    }
    vec![(x, dx)]
}
