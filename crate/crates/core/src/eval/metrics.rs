use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Zero-based rank of `label` in `row`: classes scoring higher, plus equal
/// scores at a lower index, come first.
pub fn rank_of<T: PartialOrd + Copy>(row: &[T], label: usize) -> usize {
    let v = row[label];
    row.iter().enumerate().filter(|&(j, &x)| x > v || (x == v && j < label)).count()
}

/// Percentage of rows whose label ranks within the top `k`.
pub fn topk_accuracy<T: PartialOrd + Copy, R: AsRef<[T]>>(logits: &[R], labels: &[usize], k: usize) -> Result<f64> {
    if logits.is_empty() {
        return Err(Error::contract("topk_accuracy", "empty batch"));
    }
    if logits.len() != labels.len() {
        return Err(Error::contract("topk_accuracy", format!("{} rows for {} labels", logits.len(), labels.len())));
    }
    if k == 0 {
        return Err(Error::contract("topk_accuracy", "k must be at least 1"));
    }
    let mut hits = 0usize;
    for (row, &l) in logits.iter().zip(labels) {
        let row = row.as_ref();
        if l >= row.len() {
            return Err(Error::LabelRange { label: l, classes: row.len() });
        }
        if rank_of(row, l) < k {
            hits += 1;
        }
    }
    Ok(100.0 * hits as f64 / labels.len() as f64)
}

/// Lowest index among the maximal entries.
pub fn top1<T: PartialOrd + Copy>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// `m[true][predicted]` counts.
pub fn confusion(predicted: &[usize], labels: &[usize], classes: usize) -> Result<Vec<Vec<u64>>> {
    if predicted.len() != labels.len() {
        return Err(Error::contract("confusion", format!("{} predictions for {} labels", predicted.len(), labels.len())));
    }
    let mut m = vec![vec![0u64; classes]; classes];
    for (&p, &l) in predicted.iter().zip(labels) {
        if p >= classes || l >= classes {
            return Err(Error::LabelRange { label: p.max(l), classes });
        }
        m[l][p] += 1;
    }
    Ok(m)
}

/// Classes with no true samples; they are left out of [`macro_f1`].
pub fn unsupported_classes(m: &[Vec<u64>]) -> Vec<usize> {
    m.iter().enumerate().filter(|(_, r)| r.iter().sum::<u64>() == 0).map(|(i, _)| i).collect()
}

/// Unweighted mean of per-class F1 over classes with support, in percent.
pub fn macro_f1(m: &[Vec<u64>]) -> f64 {
    let n = m.len();
    let mut sum = 0.0;
    let mut supported = 0usize;
    for c in 0..n {
        let support: u64 = m[c].iter().sum();
        if support == 0 {
            continue;
        }
        supported += 1;
        let tp = m[c][c];
        let predicted: u64 = m.iter().map(|r| r[c]).sum();
        // harmonic mean of precision and recall, in counts
        sum += (2 * tp) as f64 / (support + predicted) as f64;
    }
    if supported == 0 {
        0.0
    } else {
        100.0 * sum / supported as f64
    }
}

pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        0.0
    } else {
        ab / (aa.sqrt() * bb.sqrt())
    }
}

/// Seeded shuffle of `0..n` with no fixed points whenever `n >= 2`.
pub fn derangement(n: usize, seed: u64) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    if n < 2 {
        return p;
    }
    for i in 0..n {
        if p[i] == i {
            let j = if i + 1 < n { i + 1 } else { 0 };
            p.swap(i, j);
        }
    }
    p
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairMode {
    Paired,
    Shuffled,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub cosine: f64,
    /// Mean squared L2 distance per pair.
    pub mse: f64,
}

pub const SHUFFLE_SEED: u64 = 0x5417_f1ed;

pub fn alignment_report<R: AsRef<[f32]>>(z_v: &[R], z_p: &[R], mode: PairMode) -> Result<AlignmentReport> {
    if z_v.len() != z_p.len() || z_v.is_empty() {
        return Err(Error::contract("alignment_report", format!("{} video rows for {} sensor rows", z_v.len(), z_p.len())));
    }
    let order = match mode {
        PairMode::Paired => (0..z_p.len()).collect(),
        PairMode::Shuffled => derangement(z_p.len(), SHUFFLE_SEED),
    };
    let (mut cos, mut mse) = (0.0, 0.0);
    for (v, &j) in z_v.iter().zip(&order) {
        let (v, p) = (v.as_ref(), z_p[j].as_ref());
        if v.len() != p.len() {
            return Err(Error::contract("alignment_report", format!("dims {} and {}", v.len(), p.len())));
        }
        cos += cosine(v, p);
        mse += v.iter().zip(p).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum::<f64>();
    }
    let n = z_v.len() as f64;
    Ok(AlignmentReport { cosine: cos / n, mse: mse / n })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn topk_examples() {
        let perfect = vec![vec![0.0, 1.0], vec![1.0, 0.0]];
        assert_eq!(topk_accuracy(&perfect, &[1, 0], 1).unwrap(), 100.0);
        let uniform = vec![vec![0.0f32; 11]; 4];
        assert_eq!(topk_accuracy(&uniform, &[3, 10, 0, 7], 11).unwrap(), 100.0);
        let ranked = vec![
            vec![9.0, 1.0, 2.0, 3.0, 4.0, 5.0],
            vec![5.0, 9.0, 1.0, 2.0, 3.0, 4.0],
            vec![9.0, 8.0, 7.0, 6.0, 5.0, 1.0],
        ];
        let acc = topk_accuracy(&ranked, &[0, 0, 4], 3).unwrap();
        assert!((acc - 200.0 / 3.0).abs() < 1e-9);
        assert!(matches!(topk_accuracy::<f32, Vec<f32>>(&[], &[], 1), Err(Error::Contract { .. })));
    }

    #[test]
    fn ties_rank_lower_index_first() {
        let row = [1.0, 1.0, 1.0];
        assert_eq!(rank_of(&row, 0), 0);
        assert_eq!(rank_of(&row, 2), 2);
        assert_eq!(top1(&row), 0);
        assert_eq!(topk_accuracy(&[row], &[1], 1).unwrap(), 0.0);
    }

    #[test]
    fn macro_f1_examples() {
        let diag = vec![vec![3, 0], vec![0, 5]];
        assert_eq!(macro_f1(&diag), 100.0);
        assert_eq!(macro_f1(&[vec![1, 1], vec![1, 1]]), 50.0);
        let one_class = [vec![2, 0], vec![2, 0]];
        assert!((macro_f1(&one_class) - 100.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn unsupported_classes_are_excluded() {
        let m = vec![vec![2, 0, 0], vec![0, 0, 0], vec![0, 0, 1]];
        assert_eq!(unsupported_classes(&m), [1]);
        assert_eq!(macro_f1(&m), 100.0);
    }

    #[test]
    fn confusion_rows_match_support() {
        let m = confusion(&[0, 1, 1, 2], &[0, 0, 1, 2], 3).unwrap();
        assert_eq!(m, [vec![1, 1, 0], vec![0, 1, 0], vec![0, 0, 1]]);
    }

    #[test]
    fn alignment_examples() {
        let z = vec![vec![1.0f32, 2.0], vec![-3.0, 0.5]];
        let r = alignment_report(&z, &z, PairMode::Paired).unwrap();
        assert!((r.cosine - 1.0).abs() < 1e-12);
        assert_eq!(r.mse, 0.0);
        let a = vec![vec![1.0f32, 0.0]];
        let b = vec![vec![0.0f32, 1.0]];
        assert_eq!(alignment_report(&a, &b, PairMode::Paired).unwrap().cosine, 0.0);
        assert!(matches!(alignment_report(&z, &a, PairMode::Paired), Err(Error::Contract { .. })));
    }

    #[test]
    fn shuffled_pairs_differ_from_paired() {
        let z: Vec<Vec<f32>> = (0..5).map(|i| (0..5).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
        let r = alignment_report(&z, &z, PairMode::Shuffled).unwrap();
        assert_eq!(r.cosine, 0.0);
        assert!((r.mse - 2.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn derangement_has_no_fixed_points(n in 2usize..40, seed in any::<u64>()) {
            let p = derangement(n, seed);
            let mut sorted = p.clone();
            sorted.sort();
            prop_assert_eq!(sorted, (0..n).collect::<Vec<_>>());
            prop_assert!(p.iter().enumerate().all(|(i, &j)| i != j));
        }

        #[test]
        fn topk_is_monotone_in_k(rows in prop::collection::vec(prop::collection::vec(-3i8..3, 5), 1..20), seed in 0usize..5) {
            let labels: Vec<usize> = (0..rows.len()).map(|i| (i + seed) % 5).collect();
            let accs: Vec<f64> = (1..=5).map(|k| topk_accuracy(&rows, &labels, k).unwrap()).collect();
            prop_assert!(accs.windows(2).all(|w| w[0] <= w[1]));
            prop_assert_eq!(accs[4], 100.0);
        }

        #[test]
        fn macro_f1_ignores_class_relabelling(cells in prop::collection::vec(0u64..6, 16), shift in 1usize..4) {
            let m: Vec<Vec<u64>> = cells.chunks(4).map(<[u64]>::to_vec).collect();
            let perm: Vec<usize> = (0..4).map(|i| (i + shift) % 4).collect();
            let mut p = vec![vec![0; 4]; 4];
            for i in 0..4 {
                for j in 0..4 {
                    p[perm[i]][perm[j]] = m[i][j];
                }
            }
            prop_assert!((macro_f1(&m) - macro_f1(&p)).abs() < 1e-9);
        }
    }
}
