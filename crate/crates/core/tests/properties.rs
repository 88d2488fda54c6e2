use proptest::prelude::*;

use csil_core::csil::{ewc_loss, kd_loss, FisherMatrix};
use csil_core::doc::{degree_of_conflict, similarity_matrix};
use csil_core::optim::{GradientMask, Sgd, SgdConfig};
use csil_core::tensor::Tensor;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor<f64>> {
    prop::collection::vec(-3.0f64..3.0, rows * cols)
        .prop_filter("rows must be non-zero", move |v| {
            v.chunks(cols).all(|r| r.iter().map(|x| x * x).sum::<f64>() > 1e-3)
        })
        .prop_map(move |v| Tensor::new(vec![rows, cols], v).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn doc_never_beats_the_optimum(w in (2usize..8, 2usize..8).prop_flat_map(|(r, c)| matrix(r, c))) {
        let c = w.rows() as f64;
        let d = degree_of_conflict(&w).unwrap();
        prop_assert!(d >= -c / 2.0 - 1e-9);
        prop_assert!(d <= c * (c - 1.0) / 2.0 + 1e-9);
    }

    #[test]
    fn similarity_is_symmetric_with_unit_diagonal(w in (2usize..6, 2usize..6).prop_flat_map(|(r, c)| matrix(r, c))) {
        let s = similarity_matrix(&w).unwrap();
        for i in 0..s.size {
            prop_assert!((s.get(i, i) - 1.0).abs() < 1e-12);
            for j in 0..s.size {
                prop_assert_eq!(s.get(i, j).to_bits(), s.get(j, i).to_bits());
            }
        }
    }

    #[test]
    fn kd_is_batch_mean_of_squared_gaps(a in matrix(3, 5), b in matrix(3, 5)) {
        let kd = kd_loss(&a, &b).unwrap();
        let direct: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / 5.0;
        prop_assert!((kd - direct).abs() <= 1e-12 * direct.max(1.0));
        prop_assert_eq!(kd_loss(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn ewc_is_non_negative(p in matrix(2, 3), q in matrix(2, 3), f in prop::collection::vec(0.0f64..5.0, 6)) {
        let fisher = FisherMatrix::new(vec![Tensor::new(vec![2, 3], f).unwrap()]).unwrap();
        let e = ewc_loss(&[&p], std::slice::from_ref(&q), &fisher).unwrap();
        prop_assert!(e >= 0.0);
        prop_assert_eq!(ewc_loss(&[&q], std::slice::from_ref(&q), &fisher).unwrap(), 0.0);
    }

    #[test]
    fn closed_entries_never_move(
        w in matrix(3, 4),
        grads in prop::collection::vec(matrix(3, 4), 1..6),
        open in prop::collection::vec(any::<bool>(), 12),
    ) {
        let mut mask = GradientMask::zeros(&[3, 4]);
        for (i, &o) in open.iter().enumerate() {
            mask.set(i, o);
        }
        let mut sgd = Sgd::new(SgdConfig::default()).unwrap();
        let mut p = w.clone();
        for g in &grads {
            sgd.step(&mut [&mut p], std::slice::from_ref(g), std::slice::from_ref(&mask)).unwrap();
        }
        for (i, &o) in open.iter().enumerate() {
            if !o {
                prop_assert_eq!(p.data()[i].to_bits(), w.data()[i].to_bits());
            }
        }
    }
}
