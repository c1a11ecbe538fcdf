use super::tape::{Op, Tape, Var};
use super::tensor::{broadcast_index_map, broadcast_shapes, Scalar, Tensor};
use crate::error::{Error, Result};

type Bcast = (Vec<usize>, Vec<usize>);

impl<T: Scalar> Tape<T> {
    fn binary(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
    ) -> Result<(Tensor<T>, Option<Bcast>)> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa == sb {
            let data = self
                .value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(&x, &y)| f(x, y))
                .collect();
            return Ok((Tensor::new(sa, data)?, None));
        }
        let out_shape = broadcast_shapes(&sa, &sb).ok_or_else(|| {
            Error::dim(op_name, format!("shapes {sa:?} and {sb:?} do not broadcast"))
        })?;
        let ma = broadcast_index_map(&sa, &out_shape);
        let mb = broadcast_index_map(&sb, &out_shape);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let data = ma.iter().zip(&mb).map(|(&i, &j)| f(da[i], db[j])).collect();
        Ok((Tensor::new(out_shape, data)?, Some((ma, mb))))
    }

    /// Elementwise sum with numpy broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (value, bcast) = self.binary("add", a, b, |x, y| x + y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Add { a, b, bcast }, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (value, bcast) = self.binary("sub", a, b, |x, y| x - y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Sub { a, b, bcast }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (value, bcast) = self.binary("mul", a, b, |x, y| x * y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Mul { a, b, bcast }, rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let s = T::c(s);
        let v = self.map(x, |v| v * s);
        let rg = self.requires_grad(x);
        self.push(v, Op::Scale { x, s }, rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let c = T::c(c);
        let v = self.map(x, |v| v + c);
        let rg = self.requires_grad(x);
        self.push(v, Op::Shift { x }, rg)
    }

    /// max(x, 0); the subgradient at 0 is 0.
    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.map(x, |v| if v > T::zero() { v } else { T::zero() });
        self.mix_relu_kinks(x);
        let rg = self.requires_grad(x);
        self.push(v, Op::Relu { x }, rg)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let slope = T::c(slope);
        let v = self.map(x, |v| if v > T::zero() { v } else { v * slope });
        self.mix_relu_kinks(x);
        let rg = self.requires_grad(x);
        self.push(v, Op::LeakyRelu { x, slope }, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.map(x, |v| T::one() / (T::one() + (-v).exp()));
        let rg = self.requires_grad(x);
        self.push(v, Op::Sigmoid { x }, rg)
    }

    fn map(&self, x: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let src = self.value(x);
        Tensor::new(src.shape().to_vec(), src.data().iter().map(|&v| f(v)).collect())
            .expect("same shape")
    }

    fn mix_relu_kinks(&mut self, x: Var) {
        if !self.kinks_on() {
            return;
        }
        let bits: Vec<u64> = self
            .value(x)
            .data()
            .chunks(64)
            .map(|c| {
                c.iter()
                    .enumerate()
                    .fold(0u64, |acc, (i, &v)| acc | (((v > T::zero()) as u64) << i))
            })
            .collect();
        self.mix_kinks(bits.into_iter());
    }
}

/// Sums a full-size gradient back onto an operand through its broadcast map.
fn reduce<T: Scalar>(len: usize, map: Option<&Vec<usize>>, g: impl Iterator<Item = T>) -> Vec<T> {
    match map {
        None => g.collect(),
        Some(m) => {
            let mut out = vec![T::zero(); len];
            for (&i, d) in m.iter().zip(g) {
                out[i] += d;
            }
            out
        }
    }
}

pub(crate) fn add_backward<T: Scalar>(
    tape: &Tape<T>,
    a: Var,
    b: Var,
    bcast: Option<&Bcast>,
    g: &[T],
) -> Vec<(Var, Vec<T>)> {
    let (la, lb) = (tape.value(a).len(), tape.value(b).len());
    vec![
        (a, reduce(la, bcast.map(|x| &x.0), g.iter().copied())),
        (b, reduce(lb, bcast.map(|x| &x.1), g.iter().copied())),
    ]
}

pub(crate) fn sub_backward<T: Scalar>(
    tape: &Tape<T>,
    a: Var,
    b: Var,
    bcast: Option<&Bcast>,
    g: &[T],
) -> Vec<(Var, Vec<T>)> {
    let (la, lb) = (tape.value(a).len(), tape.value(b).len());
    vec![
        (a, reduce(la, bcast.map(|x| &x.0), g.iter().copied())),
        (b, reduce(lb, bcast.map(|x| &x.1), g.iter().map(|&d| -d))),
    ]
}

pub(crate) fn mul_backward<T: Scalar>(
    tape: &Tape<T>,
    a: Var,
    b: Var,
    bcast: Option<&Bcast>,
    g: &[T],
) -> Vec<(Var, Vec<T>)> {
    let (va, vb) = (tape.value(a).data(), tape.value(b).data());
    match bcast {
        None => vec![
            (a, g.iter().zip(vb).map(|(&d, &y)| d * y).collect()),
            (b, g.iter().zip(va).map(|(&d, &x)| d * x).collect()),
        ],
        Some((ma, mb)) => {
            let ga = g.iter().zip(mb).map(|(&d, &j)| d * vb[j]);
            let gb = g.iter().zip(ma).map(|(&d, &i)| d * va[i]);
            vec![(a, reduce(va.len(), Some(ma), ga)), (b, reduce(vb.len(), Some(mb), gb))]
        }
    }
}

pub(crate) fn relu_backward<T: Scalar>(tape: &Tape<T>, x: Var, g: &[T]) -> Vec<(Var, Vec<T>)> {
    let xs = tape.value(x).data();
    vec![(x, g.iter().zip(xs).map(|(&d, &v)| if v > T::zero() { d } else { T::zero() }).collect())]
}

pub(crate) fn leaky_relu_backward<T: Scalar>(
    tape: &Tape<T>,
    x: Var,
    slope: T,
    g: &[T],
) -> Vec<(Var, Vec<T>)> {
    let xs = tape.value(x).data();
    vec![(x, g.iter().zip(xs).map(|(&d, &v)| if v > T::zero() { d } else { d * slope }).collect())]
}

pub(crate) fn sigmoid_backward<T: Scalar>(out: &Tensor<T>, x: Var, g: &[T]) -> Vec<(Var, Vec<T>)> {
    vec![(x, g.iter().zip(out.data()).map(|(&d, &y)| d * y * (T::one() - y)).collect())]
}
