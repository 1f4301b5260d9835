use std::f64::consts::PI;

use magr_core::gradcore::Tensor2;
use magr_core::losses::{
    angular_distance_matrix, distance_alignment, graph_reg_loss, kl_row_divergence,
    score_distance_matrix, BlockedMatrix, Divergence, GraphRegOptions, GraphTerms, JointBatch,
    ScoreDistance,
};
use proptest::prelude::*;

fn features(rows: usize, cols: usize) -> impl Strategy<Value = Tensor2> {
    prop::collection::vec(-3.0f64..3.0, rows * cols)
        .prop_filter("rows must be nonzero", move |d| {
            d.chunks(cols)
                .all(|r| r.iter().map(|x| x * x).sum::<f64>() > 1e-6)
        })
        .prop_map(move |d| Tensor2::new(rows, cols, d).unwrap())
}

fn scores(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..1.0, n)
}

/// Row softmax written out directly.
fn softmax_rows(m: &Tensor2) -> Vec<Vec<f64>> {
    (0..m.rows())
        .map(|r| {
            let row = m.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
            let z: f64 = e.iter().sum();
            e.into_iter().map(|v| v / z).collect()
        })
        .collect()
}

fn kl_oracle(p: &Tensor2, q: &Tensor2) -> f64 {
    let (sp, sq) = (softmax_rows(p), softmax_rows(q));
    let total: f64 = sp
        .iter()
        .zip(&sq)
        .map(|(a, b)| {
            a.iter()
                .zip(b)
                .map(|(x, y)| x * (x.max(1e-12).ln() - y.max(1e-12).ln()))
                .sum::<f64>()
        })
        .sum();
    total / p.rows() as f64
}

fn block(m: &Tensor2, r0: usize, c0: usize, rows: usize, cols: usize) -> Tensor2 {
    let mut out = Tensor2::zeros(rows, cols);
    for r in 0..rows {
        for c in 0..cols {
            out.set(r, c, m.get(r0 + r, c0 + c));
        }
    }
    out
}

/// Regularizer recomputed from explicit blocks.
fn graph_oracle(h: &Tensor2, y: &[f64], split: usize) -> f64 {
    let a = angular_distance_matrix(h).unwrap();
    let s = score_distance_matrix(y, ScoreDistance::Signed);
    let m = h.rows() - split;
    let mut total = kl_oracle(&a, &s);
    for (r0, c0, rows, cols) in [
        (0, 0, split, split),
        (0, split, split, m),
        (split, 0, m, split),
        (split, split, m, m),
    ] {
        total += kl_oracle(
            &block(&a, r0, c0, rows, cols),
            &block(&s, r0, c0, rows, cols),
        );
    }
    total
}

fn batch(h: &Tensor2, y: &[f64], split: usize) -> JointBatch {
    JointBatch {
        old: h.slice(0, 0, split, h.cols()),
        new: h.slice(split, 0, h.rows() - split, h.cols()),
        scores: y.to_vec(),
    }
}

#[test]
fn exact_alignment_gives_zero_loss() {
    // Unit vectors at angle y_i pairwise subtend |y_i - y_j|, so A equals the
    // absolute score matrix up to the clamp floor on the diagonal.
    let y: [f64; 8] = [0.1, 0.4, 0.9, 1.3, 2.0, 2.2, 2.9, 0.05];
    let rows: Vec<[f64; 2]> = y.iter().map(|t| [t.cos(), t.sin()]).collect();
    let h = Tensor2::from_rows(&rows);
    let a = angular_distance_matrix(&h).unwrap();
    let s = score_distance_matrix(&y, ScoreDistance::Absolute);
    for (x, z) in a.data().iter().zip(s.data()) {
        assert!((x - z).abs() < 1e-3);
    }
    let opts = GraphRegOptions {
        score_distance: ScoreDistance::Absolute,
        ..GraphRegOptions::default()
    };
    assert!(graph_reg_loss(&batch(&h, &y, 5), opts).unwrap() < 1e-6);

    // Parallel features with equal scores: A is constant, S is zero, every row softmax is uniform.
    let h = Tensor2::from_rows(&[[0.3, -1.2, 0.5]; 8]);
    let y = [0.4; 8];
    assert_eq!(
        graph_reg_loss(&batch(&h, &y, 5), GraphRegOptions::default()).unwrap(),
        0.0
    );
}

#[test]
fn old_row_permutations_leave_loss_unchanged() {
    let h = Tensor2::from_rows(&[
        [0.3, -1.0, 0.2, 0.8],
        [1.1, 0.4, -0.6, 0.1],
        [-0.2, 0.9, 0.7, -0.5],
        [0.5, 0.5, 0.1, 1.2],
        [-0.9, 0.3, 0.4, 0.2],
    ]);
    let y = [0.1, 0.6, 0.35, 0.9, 0.2];
    let base = graph_reg_loss(&batch(&h, &y, 3), GraphRegOptions::default()).unwrap();
    for perm in [[0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]] {
        let mut rows = Vec::new();
        let mut ys = Vec::new();
        for &p in &perm {
            rows.push(h.row(p).to_vec());
            ys.push(y[p]);
        }
        rows.extend((3..5).map(|r| h.row(r).to_vec()));
        ys.extend_from_slice(&y[3..5]);
        let hp = Tensor2::from_rows(&rows);
        let got = graph_reg_loss(&batch(&hp, &ys, 3), GraphRegOptions::default()).unwrap();
        assert!((got - base).abs() < 1e-12, "{perm:?}: {got} vs {base}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn angular_distance_invariants(h in features(8, 16)) {
        let a = angular_distance_matrix(&h).unwrap();
        for i in 0..8 {
            prop_assert!(a.get(i, i) <= 1e-3);
            for j in 0..8 {
                let v = a.get(i, j);
                prop_assert!((0.0..=PI).contains(&v));
                prop_assert!((v - a.get(j, i)).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn power_of_two_scaling_is_bit_exact(h in features(6, 16), k in -20i32..20) {
        let c = 2f64.powi(k);
        let a = angular_distance_matrix(&h).unwrap();
        let b = angular_distance_matrix(&h.map(|x| x * c)).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn positive_scaling_is_invariant(h in features(6, 16), c in 1e-3f64..1e3) {
        let a = angular_distance_matrix(&h).unwrap();
        let b = angular_distance_matrix(&h.map(|x| x * c)).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn blocks_reassemble_bit_exactly(h in features(9, 4), split in 1usize..8) {
        let a = angular_distance_matrix(&h).unwrap();
        let blocks = BlockedMatrix::partition(a.clone(), split);
        prop_assert_eq!(blocks.a11.shape(), (split, split));
        prop_assert_eq!(blocks.a22.shape(), (9 - split, 9 - split));
        prop_assert_eq!(blocks.reassemble(), a);
    }

    #[test]
    fn regularizer_is_sum_of_independent_terms(h in features(8, 16), y in scores(8)) {
        let got = graph_reg_loss(&batch(&h, &y, 5), GraphRegOptions::default()).unwrap();
        let expected = graph_oracle(&h, &y, 5);
        prop_assert!((got - expected).abs() <= 1e-10 * (1.0 + expected.abs()), "{} vs {}", got, expected);
    }

    #[test]
    fn regularizer_is_nonnegative_for_every_kl_variant(h in features(8, 16), y in scores(8)) {
        for terms in [GraphTerms::All, GraphTerms::BlocksOnly, GraphTerms::JointOnly] {
            for divergence in [Divergence::Kl, Divergence::ReverseKl, Divergence::Mse] {
                for score_distance in [ScoreDistance::Signed, ScoreDistance::Absolute] {
                    let opts = GraphRegOptions { terms, divergence, score_distance };
                    prop_assert!(graph_reg_loss(&batch(&h, &y, 5), opts).unwrap() >= -1e-15);
                }
            }
        }
    }

    #[test]
    fn kl_matches_oracle_and_ignores_row_shifts(
        p in features(4, 5),
        q in features(4, 5),
        shift in -5.0f64..5.0,
    ) {
        let got = kl_row_divergence(&p, &q).unwrap();
        prop_assert!((got - kl_oracle(&p, &q)).abs() < 1e-12);
        let mut shifted = p.clone();
        for v in shifted.row_mut(1) {
            *v += shift;
        }
        prop_assert!((kl_row_divergence(&shifted, &q).unwrap() - got).abs() < 1e-12);
    }

    #[test]
    fn score_matrix_is_antisymmetric(y in scores(7)) {
        let s = score_distance_matrix(&y, ScoreDistance::Signed);
        let abs = score_distance_matrix(&y, ScoreDistance::Absolute);
        for i in 0..7 {
            for j in 0..7 {
                prop_assert_eq!(s.get(i, j), -s.get(j, i));
                prop_assert_eq!(abs.get(i, j), s.get(i, j).abs());
            }
        }
    }

    #[test]
    fn identical_matrices_align_exactly(y in scores(7), split in 1usize..6) {
        for divergence in [Divergence::Kl, Divergence::ReverseKl, Divergence::Mse] {
            for score_distance in [ScoreDistance::Signed, ScoreDistance::Absolute] {
                let s = score_distance_matrix(&y, score_distance);
                let opts = GraphRegOptions { terms: GraphTerms::All, divergence, score_distance };
                prop_assert_eq!(distance_alignment(&s, &s, split, opts).unwrap(), 0.0);
            }
        }
    }
}
