//! Two-layer graph convolution over a learnable symmetric adjacency.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Scalar, Tape, Tensor, Var};

/// Scale of the symmetric perturbation added to the identity at init.
pub const INIT_NOISE: f64 = 0.01;

/// `I + S` with `S` symmetric Gaussian noise. Only the raw matrix is stored;
/// the effective adjacency is always `(raw + raw^T) / 2`.
pub fn init_adjacency<T: Scalar>(n: usize, rng: &mut impl Rng) -> Tensor<T> {
    let normal = Normal::new(0.0, INIT_NOISE).expect("finite scale");
    let mut a = Tensor::<T>::eye(n);
    for i in 0..n {
        for j in i..n {
            let e = T::c(normal.sample(rng));
            let v = a.at(&[i, j]) + e;
            a.set(&[i, j], v);
            a.set(&[j, i], v);
        }
    }
    a
}

/// Symmetrised adjacency, optionally scaled as `D^-1/2 A D^-1/2` where `D`
/// holds absolute row sums of the current values (treated as constants).
pub fn effective_adjacency<T: Scalar>(tape: &mut Tape<T>, raw: Var, normalized: bool) -> Result<Var> {
    let s = tape.shape(raw).to_vec();
    if s.len() != 2 || s[0] != s[1] {
        return Err(Error::dim("adjacency", format!("raw matrix must be square, got {s:?}")));
    }
    let rt = tape.transpose(raw)?;
    let sum = tape.add(raw, rt)?;
    let a = tape.scale(sum, 0.5);
    if !normalized {
        return Ok(a);
    }
    let n = s[0];
    let v = tape.value(a).data();
    let inv: Vec<T> = (0..n)
        .map(|i| {
            let d: T = v[i * n..(i + 1) * n].iter().map(|x| x.abs()).sum();
            T::one() / (d + T::c(1e-6)).sqrt()
        })
        .collect();
    let outer: Vec<T> = (0..n * n).map(|k| inv[k / n] * inv[k % n]).collect();
    let scale = tape.constant(Tensor::new([n, n], outer)?);
    tape.mul(a, scale)
}

/// Per time step: `E' = relu(A E W1)`, `Z = A E' W2`.
///
/// `e: [B, T, N, D]`, `a: [N, N]`, `w1: [D, H]`, `w2: [H, D']`.
pub fn gcn_forward<T: Scalar>(tape: &mut Tape<T>, e: Var, a: Var, w1: Var, w2: Var) -> Result<Var> {
    let (se, sa) = (tape.shape(e).to_vec(), tape.shape(a).to_vec());
    if se.len() < 2 || sa.len() != 2 || sa[0] != sa[1] || se[se.len() - 2] != sa[0] {
        return Err(Error::dim("gcn_forward", format!("node features {se:?} against adjacency {sa:?}")));
    }
    let h = tape.matmul(e, w1)?;
    let h = tape.matmul(a, h)?;
    let h = tape.relu(h);
    let z = tape.matmul(h, w2)?;
    tape.matmul(a, z)
}

/// Mean over the time axis (axis 1) of `[B, T, N, D]`.
pub fn temporal_pool<T: Scalar>(tape: &mut Tape<T>, z: Var) -> Result<Var> {
    if tape.shape(z).len() != 4 {
        return Err(Error::dim("temporal_pool", format!("expected [B, T, N, D], got {:?}", tape.shape(z))));
    }
    tape.mean(z, 1)
}

/// Time-pooling of an explicit sequence of per-step tensors.
pub fn temporal_pool_seq<T: Scalar>(steps: &[Tensor<T>]) -> Result<Tensor<T>> {
    let first = steps.first().ok_or_else(|| Error::dim("temporal_pool", "empty time axis"))?;
    let mut acc = vec![T::zero(); first.len()];
    for s in steps {
        if s.shape() != first.shape() {
            return Err(Error::dim("temporal_pool", format!("step shapes {:?} and {:?}", first.shape(), s.shape())));
        }
        acc.iter_mut().zip(s.data()).for_each(|(a, &v)| *a += v);
    }
    let inv = T::one() / T::c(steps.len() as f64);
    Tensor::new(first.shape().to_vec(), acc.into_iter().map(|v| v * inv).collect())
}

pub fn init_gcn<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, nodes: usize, d_in: usize, hidden: usize, d_out: usize, rng: &mut impl Rng) {
    store.param(format!("{prefix}.adj"), init_adjacency(nodes, rng));
    store.param_normal(&format!("{prefix}.w1"), &[d_in, hidden], (2.0 / d_in as f64).sqrt(), rng);
    store.param_normal(&format!("{prefix}.w2"), &[hidden, d_out], (1.0 / hidden as f64).sqrt(), rng);
}

/// Runs a stored two-layer GCN on `[B, T, N, D]` features.
pub fn apply_gcn<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>, prefix: &str, e: Var, normalized: bool) -> Result<Var> {
    let raw = tape.param(store, &format!("{prefix}.adj"))?;
    let a = effective_adjacency(tape, raw, normalized)?;
    let w1 = tape.param(store, &format!("{prefix}.w1"))?;
    let w2 = tape.param(store, &format!("{prefix}.w2"))?;
    gcn_forward(tape, e, a, w1, w2)
}

/// Effective adjacency computed outside any tape.
pub fn symmetrize<T: Scalar>(raw: &Tensor<T>) -> Tensor<T> {
    let n = raw.shape()[0];
    let mut out = raw.clone();
    let half = T::c(0.5);
    for i in 0..n {
        for j in 0..n {
            out.set(&[i, j], (raw.at(&[i, j]) + raw.at(&[j, i])) * half);
        }
    }
    out
}

/// Writes a square matrix as headerless CSV.
pub fn write_matrix_csv<T: Scalar>(m: &Tensor<T>, path: &Path) -> Result<()> {
    let n = m.shape()[0];
    let cols = m.len() / n;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for row in m.data().chunks(cols) {
        let line: Vec<String> = row.iter().map(|v| format!("{}", v.f64())).collect();
        writeln!(f, "{}", line.join(",")).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{adam_step, AdamConfig, AdamState, Mode};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), v).unwrap()
    }

    fn gcn(e: Tensor<f64>, a: Tensor<f64>, w1: Tensor<f64>, w2: Tensor<f64>) -> Tensor<f64> {
        let mut tape = Tape::new(Mode::Eval, 0);
        let vs = [e, a, w1, w2].map(|x| tape.constant(x));
        let z = gcn_forward(&mut tape, vs[0], vs[1], vs[2], vs[3]).unwrap();
        tape.value(z).clone()
    }

    #[test]
    fn identity_propagation() {
        let e = t(&[1, 2, 3, 2], &[0.5, 1.0, 2.0, 0.0, 3.0, 0.25, 1.0, 1.0, 0.0, 4.0, 2.0, 2.0]);
        let z = gcn(e.clone(), Tensor::eye(3), Tensor::eye(2), Tensor::eye(2));
        assert_eq!(z.data(), e.data());
    }

    #[test]
    fn swap_graph_swaps_twice() {
        let a = t(&[2, 2], &[0.0, 1.0, 1.0, 0.0]);
        let e = t(&[1, 1, 2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let z = gcn(e.clone(), a, Tensor::eye(2), Tensor::eye(2));
        assert_eq!(z.data(), e.data());
    }

    #[test]
    fn zero_features_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let z = gcn(Tensor::zeros([2, 3, 4, 5]), init_adjacency(4, &mut rng), Tensor::full([5, 6], 0.3), Tensor::full([6, 2], -0.7));
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn node_count_mismatch() {
        let mut tape = Tape::<f64>::new(Mode::Eval, 0);
        let e = tape.constant(Tensor::zeros([1, 1, 3, 2]));
        let a = tape.constant(Tensor::eye(4));
        let w = tape.constant(Tensor::eye(2));
        assert!(matches!(gcn_forward(&mut tape, e, a, w, w), Err(Error::Dimension { .. })));
    }

    #[test]
    fn pooling_examples() {
        let steps = [t(&[2], &[1.0, 5.0]), t(&[2], &[3.0, 5.0])];
        assert_eq!(temporal_pool_seq(&steps).unwrap().data(), &[2.0, 5.0]);
        assert_eq!(temporal_pool_seq(&steps[..1]).unwrap().data(), steps[0].data());
        assert!(temporal_pool_seq::<f64>(&[]).is_err());
    }

    #[test]
    fn init_is_symmetric_and_deterministic() {
        let a = init_adjacency::<f64>(5, &mut ChaCha8Rng::seed_from_u64(4));
        let b = init_adjacency::<f64>(5, &mut ChaCha8Rng::seed_from_u64(4));
        assert_eq!(a.data(), b.data());
        assert_eq!(a.max_abs_diff(&a.permuted(&[1, 0])), 0.0);
        let one = init_adjacency::<f64>(1, &mut ChaCha8Rng::seed_from_u64(0));
        assert!((one.data()[0] - 1.0).abs() < 0.1);
    }

    #[test]
    fn symmetry_survives_training() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f32>::new();
        init_gcn(&mut store, "g", 4, 3, 3, 2, &mut rng);
        // break raw symmetry so only the parameterisation keeps A symmetric
        store.get_mut("g.adj").unwrap().data_mut()[1] += 0.3;
        let x: Tensor<f32> = Tensor::from_f64([2, 3, 4, 3], &(0..72).map(|i| (i as f64 * 0.7).sin()).collect::<Vec<_>>()).unwrap();
        let mut st = AdamState::default();
        let cfg = AdamConfig { lr: 1e-2, ..Default::default() };
        for _ in 0..100 {
            let mut tape = Tape::new(Mode::Train, 0);
            let e = tape.constant(x.clone());
            let z = apply_gcn(&mut tape, &store, "g", e, false).unwrap();
            let sq = tape.mul(z, z).unwrap();
            let loss = tape.mean_all(sq);
            tape.backward(loss).unwrap();
            let g = store.gradients(&tape);
            adam_step(&mut store, &g, &mut st, &cfg).unwrap();
        }
        let a = symmetrize(store.get("g.adj").unwrap());
        assert_eq!(a.max_abs_diff(&a.permuted(&[1, 0])), 0.0);
    }

    proptest! {
        #[test]
        fn matches_per_node_sum(seed in 0u64..1000, n in 1usize..=4, d in 1usize..4, h in 1usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut rnd = |shape: &[usize]| {
                let len = shape.iter().product();
                Tensor::<f64>::new(shape.to_vec(), (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
            };
            let (e, raw, w1, w2) = (rnd(&[1, 1, n, d]), rnd(&[n, n]), rnd(&[d, h]), rnd(&[h, d]));
            let a = symmetrize(&raw);
            let z = gcn(e.clone(), a.clone(), w1.clone(), w2.clone());
            // E'[i] = relu(sum_j A_ij (E[j] W1)); Z[i] = sum_j A_ij (E'[j] W2)
            let mut ep = vec![vec![0.0; h]; n];
            for i in 0..n {
                for c in 0..h {
                    let s: f64 = (0..n).map(|j| a.at(&[i, j]) * (0..d).map(|q| e.at(&[0, 0, j, q]) * w1.at(&[q, c])).sum::<f64>()).sum();
                    ep[i][c] = s.max(0.0);
                }
            }
            for i in 0..n {
                for c in 0..d {
                    let s: f64 = (0..n).map(|j| a.at(&[i, j]) * (0..h).map(|q| ep[j][q] * w2.at(&[q, c])).sum::<f64>()).sum();
                    prop_assert!((z.at(&[0, 0, i, c]) - s).abs() < 1e-5);
                }
            }
        }

        #[test]
        fn pooling_commutes_with_scaling(vals in prop::collection::vec(-10.0f64..10.0, 6), c in -3.0f64..3.0) {
            let x = t(&[1, 3, 1, 2], &vals);
            let scaled: Vec<f64> = vals.iter().map(|v| v * c).collect();
            let mut tape = Tape::new(Mode::Eval, 0);
            let (a, b) = (tape.constant(x), tape.constant(t(&[1, 3, 1, 2], &scaled)));
            let pa = temporal_pool(&mut tape, a).unwrap();
            let pb = temporal_pool(&mut tape, b).unwrap();
            for (u, v) in tape.value(pa).data().iter().zip(tape.value(pb).data()) {
                prop_assert!((u * c - v).abs() < 1e-9);
            }
        }
    }
}
