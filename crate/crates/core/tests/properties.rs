use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use mixmem::matching::{match_procrustes, match_smallest_angle, Permutation};
use mixmem::moments::dirichlet_moments;
use mixmem::tensor::{fold, khatri_rao, unfold, KruskalFactors, Mode, Tensor3};

fn matrix(rows: usize, cols: usize, lo: f64, hi: f64) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(lo..hi, rows * cols).prop_map(move |v| DMatrix::from_vec(rows, cols, v))
}

fn kruskal() -> impl Strategy<Value = KruskalFactors> {
    (1usize..=6, 1usize..=6, 1usize..=6, 1usize..=4).prop_flat_map(|(d1, d2, d3, r)| {
        (
            matrix(d1, r, -2.0, 2.0),
            matrix(d2, r, -2.0, 2.0),
            matrix(d3, r, -2.0, 2.0),
            prop::collection::vec(0.0..3.0, r),
        )
            .prop_map(|(a, b, c, w)| KruskalFactors::with_weights(a, b, c, DVector::from_vec(w)).unwrap())
    })
}

fn tensor() -> impl Strategy<Value = Tensor3> {
    (1usize..=5, 1usize..=5, 1usize..=5).prop_flat_map(|dims| {
        prop::collection::vec(-5.0..5.0, dims.0 * dims.1 * dims.2)
            .prop_map(move |v| Tensor3::from_vec([dims.0, dims.1, dims.2], v).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn unfolding_identities(f in kruskal()) {
        let t = f.to_dense();
        let w = DMatrix::from_diagonal(&f.weights);
        let expected = [
            &f.a * &w * khatri_rao(&f.c, &f.b).unwrap().transpose(),
            &f.b * &w * khatri_rao(&f.c, &f.a).unwrap().transpose(),
            &f.c * &w * khatri_rao(&f.b, &f.a).unwrap().transpose(),
        ];
        for (mode, rhs) in Mode::ALL.into_iter().zip(expected) {
            prop_assert!((unfold(&t, mode) - rhs).amax() < 1e-10);
        }
        let doubled = KruskalFactors::with_weights(f.a.clone(), f.b.clone(), f.c.clone(), &f.weights * 2.0).unwrap();
        prop_assert_eq!(doubled.to_dense(), t.scaled(2.0));
    }

    #[test]
    fn fold_inverts_unfold(t in tensor()) {
        for mode in Mode::ALL {
            prop_assert_eq!(&fold(&unfold(&t, mode), mode, t.dims()).unwrap(), &t);
        }
    }

    #[test]
    fn dirichlet_moments_are_normalized(alpha in prop::collection::vec(0.01..10.0, 1..6)) {
        let (mean, second, third) = dirichlet_moments(&DVector::from_vec(alpha)).unwrap();
        prop_assert!((mean.sum() - 1.0).abs() < 1e-12);
        prop_assert!((second.sum() - 1.0).abs() < 1e-12);
        prop_assert!((third.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn matches_ignore_column_scales(
        (a, b, scales) in (2usize..=5).prop_flat_map(|k| (matrix(3 * k, k, 0.01, 1.0), matrix(3 * k, k, 0.01, 1.0), prop::collection::vec(0.1..10.0, k)))
    ) {
        let k = a.ncols();
        let id = Permutation::identity(k);
        let scaled = DMatrix::from_fn(b.nrows(), k, |i, j| b[(i, j)] * scales[j]);
        prop_assert_eq!(
            match_smallest_angle(&a, &id, &b).unwrap().permutation,
            match_smallest_angle(&a, &id, &scaled).unwrap().permutation
        );
        prop_assert_eq!(
            match_procrustes(&a, &id, &b).unwrap().permutation,
            match_procrustes(&a, &id, &scaled).unwrap().permutation
        );
        for report in [match_smallest_angle(&a, &id, &a).unwrap(), match_procrustes(&a, &id, &a).unwrap()] {
            prop_assert!(report.permutation.unwrap().is_identity());
        }
    }
}
