use fsar_tensor::{Graph, Tensor};
use proptest::prelude::*;

fn matrix() -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
    (1usize..5, 1usize..6).prop_flat_map(|(r, c)| {
        (Just(r), Just(c), prop::collection::vec(-20.0f64..20.0, r * c))
    })
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions((r, c, data) in matrix()) {
        let mut g = Graph::<f64>::new();
        let x = g.constant_from(vec![r, c], data).unwrap();
        let y = g.softmax(x, -1).unwrap();
        for row in g.data(y).chunks(c) {
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn concat_then_split_is_exact((r, c, data) in matrix(), extra in 1usize..4) {
        let mut g = Graph::<f32>::new();
        let a = g.constant(&Tensor::from_f64(vec![r, c], &data).unwrap());
        let b = g.constant(&Tensor::full(vec![r, extra], 0.5f32));
        let joined = g.concat(&[a, b], 1).unwrap();
        let parts = g.split(joined, &[c, extra], 1).unwrap();
        prop_assert_eq!(g.data(parts[0]), g.data(a));
        prop_assert_eq!(g.data(parts[1]), g.data(b));
    }

    #[test]
    fn reshape_round_trip_is_exact((r, c, data) in matrix()) {
        let mut g = Graph::<f64>::new();
        let a = g.constant_from(vec![r, c], data).unwrap();
        let flat = g.reshape(a, &[r * c]).unwrap();
        let back = g.reshape(flat, &[r, c]).unwrap();
        prop_assert_eq!(g.data(back), g.data(a));
        prop_assert_eq!(g.shape(back), g.shape(a));
    }
}
