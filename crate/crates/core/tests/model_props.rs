use gcnspline_core::geom::add;
use gcnspline_core::model::{forward, ArchConfig, ModelParams};
use gcnspline_core::{Point3, PointCloud};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn arch() -> ArchConfig {
    ArchConfig {
        k_neighbors: 5,
        layer_dims: vec![8, 12],
        global_dim: 16,
        dict_atoms: 3,
        head_hidden: 24,
        pad_rows: 4,
        pad_cols: 5,
        max_input_points: 48,
        spline_degrees: (3, 3),
    }
}

fn points() -> impl Strategy<Value = Vec<Point3>> {
    prop::collection::vec([-1.0..1.0f64, -1.0..1.0f64, -0.3..0.3f64], 8..80)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn forward_is_permutation_invariant(pts in points(), seed in any::<u64>()) {
        let arch = arch();
        let params = ModelParams::init(&arch, &mut ChaCha8Rng::seed_from_u64(seed));
        let mut shuffled = pts.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 1));
        let a = forward(&params, &arch, &PointCloud::new(pts).unwrap()).unwrap();
        let b = forward(&params, &arch, &PointCloud::new(shuffled).unwrap()).unwrap();
        prop_assert_eq!(a.values, b.values);
    }

    #[test]
    fn forward_is_translation_equivariant(pts in points(), t in [-5.0..5.0f64, -5.0..5.0f64, -5.0..5.0f64], seed in any::<u64>()) {
        let arch = arch();
        let params = ModelParams::init(&arch, &mut ChaCha8Rng::seed_from_u64(seed));
        let moved: Vec<Point3> = pts.iter().map(|&p| add(p, t)).collect();
        let a = forward(&params, &arch, &PointCloud::new(pts).unwrap()).unwrap();
        let b = forward(&params, &arch, &PointCloud::new(moved).unwrap()).unwrap();
        for (x, y) in a.values.iter().zip(&b.values) {
            for d in 0..3 {
                prop_assert!((x[d] + t[d] - y[d]).abs() < 1e-9);
            }
        }
    }
}
