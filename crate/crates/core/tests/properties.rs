use condensery::bilevel::{div, AccQueue};
use condensery::data::cnd::CndContainer;
use condensery::data::idx::{encode_idx_images, encode_idx_labels, parse_idx_images, parse_idx_labels, IdxImages};
use condensery::data::Pca2;
use condensery::{SyntheticSet, Tape, Tensor};
use nalgebra::{DMatrix, SymmetricEigen};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-5.0f64..5.0, rows * cols).prop_map(move |v| Tensor::from_vec(vec![rows, cols], v).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn group_mean_matches_manual_average(
        t in (1usize..8, 1usize..6).prop_flat_map(|(r, c)| matrix(r, c)),
        picks in prop::collection::vec(prop::collection::vec(0usize..64, 1..5), 1..4),
    ) {
        let (b, d) = (t.shape()[0], t.shape()[1]);
        let groups: Vec<Vec<usize>> = picks.iter().map(|g| g.iter().map(|i| i % b).collect()).collect();
        let mut tape = Tape::new();
        let x = tape.leaf(&t, false);
        let m = tape.group_mean(x, groups.clone()).unwrap();
        let got = tape.value(m);
        for (g, rows) in groups.iter().enumerate() {
            for j in 0..d {
                let want = rows.iter().map(|&r| t.row(r)[j]).sum::<f64>() / rows.len() as f64;
                prop_assert!((got[g * d + j] - want).abs() <= 1e-12 * (1.0 + want.abs()));
            }
        }
    }

    #[test]
    fn matmul_bt_matches_nalgebra(
        (a, b) in (1usize..6, 1usize..6, 1usize..6).prop_flat_map(|(n, m, k)| (matrix(n, k), matrix(m, k))),
    ) {
        let mut tape = Tape::new();
        let (va, vb) = (tape.leaf(&a, false), tape.leaf(&b, false));
        let c = tape.matmul_bt(va, vb).unwrap();
        let na = DMatrix::from_row_slice(a.shape()[0], a.shape()[1], a.data());
        let nb = DMatrix::from_row_slice(b.shape()[0], b.shape()[1], b.data());
        let want = na * nb.transpose();
        for (i, v) in tape.value(c).iter().enumerate() {
            let (r, col) = (i / b.shape()[0], i % b.shape()[0]);
            prop_assert!((v - want[(r, col)]).abs() < 1e-10);
        }
    }

    #[test]
    fn div_is_max_minus_min(vals in prop::collection::vec(0.0f64..1.0, 1..20)) {
        let mut q = AccQueue::new(vals.len());
        for &v in &vals {
            q.push(v).unwrap();
        }
        let mut sorted = vals.clone();
        sorted.sort_by(f64::total_cmp);
        prop_assert_eq!(div(&q).unwrap(), sorted[sorted.len() - 1] - sorted[0]);
    }

    #[test]
    fn cnd_round_trip_is_bitwise(
        k in 1usize..4,
        ipc in 1usize..3,
        bits in prop::collection::vec(any::<u64>(), 4 * 3 * 2),
    ) {
        let n = k * ipc;
        let data: Vec<f64> = bits.iter().cycle().take(n * 4).map(|&b| f64::from_bits(b)).collect();
        let set = SyntheticSet::new(Tensor::from_vec(vec![n, 1, 2, 2], data).unwrap(), k, ipc).unwrap();
        let back = CndContainer::decode(&CndContainer::from_synthetic(&set, None).encode()).unwrap().to_synthetic().unwrap();
        let same = back.images.data().iter().zip(set.images.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        prop_assert!(same);
        prop_assert_eq!(back.labels(), set.labels());
    }

    #[test]
    fn idx_round_trip(
        (count, rows, cols) in (0usize..5, 1usize..5, 1usize..5),
        seed in any::<u8>(),
    ) {
        let pixels: Vec<u8> = (0..count * rows * cols).map(|i| (i as u8).wrapping_mul(31).wrapping_add(seed)).collect();
        let images = IdxImages { count, rows, cols, pixels };
        prop_assert_eq!(parse_idx_images(&encode_idx_images(&images)).unwrap(), images);
        let labels: Vec<u8> = (0..count as u8).map(|i| i.wrapping_add(seed) % 10).collect();
        prop_assert_eq!(parse_idx_labels(&encode_idx_labels(&labels)).unwrap(), labels);
    }

    #[test]
    fn pca_variances_match_dense_eigensolver(t in (3usize..12, 2usize..6).prop_flat_map(|(n, d)| matrix(n, d))) {
        let (n, d) = (t.shape()[0], t.shape()[1]);
        let x = DMatrix::from_row_slice(n, d, t.data());
        let mean = x.row_mean();
        let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
        let cov = centered.transpose() * &centered / n as f64;
        let mut eig: Vec<f64> = SymmetricEigen::new(cov).eigenvalues.iter().copied().collect();
        eig.sort_by(|a, b| b.total_cmp(a));
        let pca = Pca2::fit(&t).unwrap();
        for c in 0..2 {
            prop_assert!((pca.variances[c] - eig[c]).abs() < 1e-8 * (1.0 + eig[0]), "{:?} vs {:?}", pca.variances, eig);
        }
    }
}
