use super::tape::{Op, Tape, Var};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

impl<T: Scalar> Tape<T> {
    /// Mean over the batch (axis 0) of squared L2 distances between rows:
    /// `(1/N) * sum_i ||a_i - b_i||^2`. A rank-1 input counts as one sample.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa != sb {
            return Err(Error::contract("mse", format!("shapes differ: {sa:?} vs {sb:?}")));
        }
        let batch = if sa.len() == 1 { 1 } else { sa[0] };
        let total: T = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum();
        let value = Tensor::scalar(total / T::c(batch as f64));
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Mse { a, b, batch }, rg))
    }

    /// Mean over the batch of `-log softmax(logits)[label]` for `[B, C]` logits.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(Error::dim(
                "cross_entropy",
                format!("logits {shape:?} with {} labels", labels.len()),
            ));
        }
        let (batch, classes) = (shape[0], shape[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelRange { label: bad, classes });
        }
        let src = self.value(logits).data();
        let mut probs = vec![T::zero(); src.len()];
        let mut total = T::zero();
        for (b, &label) in labels.iter().enumerate() {
            let row = &src[b * classes..(b + 1) * classes];
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&v| (v - m).exp()).sum();
            let log_z = z.ln() + m;
            total += log_z - row[label];
            for (p, &v) in probs[b * classes..(b + 1) * classes].iter_mut().zip(row) {
                *p = (v - log_z).exp();
            }
        }
        let value = Tensor::scalar(total / T::c(batch as f64));
        let rg = self.requires_grad(logits);
        Ok(self.push(value, Op::CrossEntropy { logits, labels: labels.to_vec(), probs }, rg))
    }
}

pub(crate) fn mse_backward<T: Scalar>(tape: &Tape<T>, a: Var, b: Var, batch: usize, g: T) -> Vec<(Var, Vec<T>)> {
    let k = T::c(2.0) * g / T::c(batch as f64);
    let da: Vec<T> = tape
        .value(a)
        .data()
        .iter()
        .zip(tape.value(b).data())
        .map(|(&x, &y)| k * (x - y))
        .collect();
    let db = da.iter().map(|&v| -v).collect();
    vec![(a, da), (b, db)]
}

pub(crate) fn cross_entropy_backward<T: Scalar>(logits: Var, labels: &[usize], probs: &[T], g: T) -> Vec<(Var, Vec<T>)> {
    let batch = labels.len();
    let classes = probs.len() / batch;
    let k = g / T::c(batch as f64);
    let mut d: Vec<T> = probs.iter().map(|&p| p * k).collect();
    for (b, &l) in labels.iter().enumerate() {
        d[b * classes + l] -= k;
    }
    vec![(logits, d)]
}

#[cfg(test)]
mod tests {
    use crate::error::Error;
    use crate::numerics::{Mode, Tape, Tensor};

    #[test]
    fn cross_entropy_single_row() {
        let mut tape = Tape::<f64>::new(Mode::Eval, 0);
        let l = tape.leaf(Tensor::from_f64([1, 3], &[1.0, 2.0, 3.0]).unwrap());
        let ce = tape.cross_entropy(l, &[2]).unwrap();
        let z: f64 = [1f64, 2., 3.].iter().map(|v| v.exp()).sum();
        let want = -(3f64.exp() / z).ln();
        assert!((tape.value(ce).data()[0] - want).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_label_out_of_range() {
        let mut tape = Tape::<f64>::new(Mode::Eval, 0);
        let l = tape.leaf(Tensor::zeros([1, 11]));
        assert!(matches!(tape.cross_entropy(l, &[11]), Err(Error::LabelRange { label: 11, classes: 11 })));
    }

    #[test]
    fn mse_is_batch_mean_of_squared_norms() {
        let mut tape = Tape::<f64>::new(Mode::Eval, 0);
        let a = tape.leaf(Tensor::from_f64([2, 2], &[1., 1., 0., 0.]).unwrap());
        let b = tape.leaf(Tensor::zeros([2, 2]));
        let l = tape.mse(a, b).unwrap();
        assert_eq!(tape.value(l).data(), &[1.0]);
    }
}
