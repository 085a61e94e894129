use proptest::prelude::*;
use put_tensor::{Tape, Tensor};

proptest! {
    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..5, cols in 1usize..12, seed in proptest::collection::vec(-30.0f32..30.0, 60)) {
        let data: Vec<f32> = (0..rows * cols).map(|i| seed[i % seed.len()] * ((i % 7) as f32 - 3.0) / 3.0).collect();
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::new([rows, cols], data).unwrap());
        let y = tape.softmax(x).unwrap();
        for row in tape.value(y).data().chunks(cols) {
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            let s: f32 = row.iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-5, "sum {}", s);
        }
    }

    #[test]
    fn broadcast_add_matches_explicit_tiling(a in proptest::collection::vec(-5.0f64..5.0, 12), b in proptest::collection::vec(-5.0f64..5.0, 4)) {
        let mut tape = Tape::<f64>::new();
        let av = tape.constant(Tensor::new([3, 4], a.clone()).unwrap());
        let bv = tape.constant(Tensor::new([4], b.clone()).unwrap());
        let y = tape.add(av, bv).unwrap();
        for i in 0..12 {
            prop_assert_eq!(tape.value(y).data()[i], a[i] + b[i % 4]);
        }
    }
}
