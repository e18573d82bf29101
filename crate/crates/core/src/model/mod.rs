//! Graph network predicting a zero-padded control grid, and extraction of
//! the variable-size grid from the prediction.
//!
//! The forward pass sorts its input lexicographically before doing anything
//! else, so the output depends only on the point multiset and is bit-identical
//! under permutation.

mod checkpoint;
mod graph;
mod linalg;
mod network;
mod params;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
pub use graph::{build_knn_graph, KnnGraph};
pub use network::{
    check_shapes, dictionary_refine, dictionary_weights, forward, forward_prepared, Prediction,
    PreparedInput,
};
pub use params::{ArchConfig, ModelParams, Tensor, LEAKY_SLOPE};

pub(crate) use network::{backward, forward_cached};

use crate::geom::{bounding_box, Point3};
use crate::spline::{ControlGrid, PointCloud};
use crate::{Error, Result};

/// Default extraction threshold, in unit-cube coordinates.
pub const DEFAULT_EPSILON: f64 = 0.05;

/// Leading active rows and columns of `pred`: a row is active when the mean
/// norm of its entries exceeds `epsilon`, and only the run starting at row 0
/// counts.
pub fn extract_cp_grid(pred: &Prediction, epsilon: f64) -> Result<ControlGrid> {
    if !(epsilon > 0.0) {
        return Err(Error::config("epsilon must be positive"));
    }
    let (pr, pc) = (pred.pad_rows, pred.pad_cols);
    let norm = |i: usize, j: usize| crate::geom::norm(pred.value(i, j));
    let rows = (0..pr)
        .take_while(|&i| (0..pc).map(|j| norm(i, j)).sum::<f64>() / pc as f64 > epsilon)
        .count();
    let cols = (0..pc)
        .take_while(|&j| (0..pr).map(|i| norm(i, j)).sum::<f64>() / pr as f64 > epsilon)
        .count();
    if rows == 0 || cols == 0 {
        return Err(Error::EmptyPrediction);
    }
    Ok(ControlGrid::from_fn(rows, cols, |i, j| pred.value(i, j)))
}

/// Isotropic map of a cloud's bounding box into the unit cube:
/// `p -> (p - min) / max_extent`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UnitCube {
    pub origin: Point3,
    pub scale: f64,
}

impl UnitCube {
    pub fn fit(cloud: &PointCloud) -> Self {
        let (lo, hi) = bounding_box(cloud.points());
        let extent = (0..3).map(|d| hi[d] - lo[d]).fold(0.0, f64::max);
        Self {
            origin: lo,
            scale: if extent > 0.0 { extent } else { 1.0 },
        }
    }

    pub fn apply(&self, p: Point3) -> Point3 {
        [
            (p[0] - self.origin[0]) / self.scale,
            (p[1] - self.origin[1]) / self.scale,
            (p[2] - self.origin[2]) / self.scale,
        ]
    }

    pub fn invert(&self, p: Point3) -> Point3 {
        [
            p[0] * self.scale + self.origin[0],
            p[1] * self.scale + self.origin[1],
            p[2] * self.scale + self.origin[2],
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::pad_target;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_arch() -> ArchConfig {
        ArchConfig {
            k_neighbors: 4,
            layer_dims: vec![6, 8],
            global_dim: 8,
            dict_atoms: 3,
            head_hidden: 10,
            pad_rows: 3,
            pad_cols: 4,
            max_input_points: 200,
            spline_degrees: (3, 3),
        }
    }

    fn random_cloud(rng: &mut impl Rng, n: usize) -> PointCloud {
        PointCloud::new(
            (0..n)
                .map(|_| [rng.random(), rng.random(), rng.random::<f64>() * 0.2])
                .collect(),
        )
        .unwrap()
    }

    fn prediction_from(grid: &[Point3], rows: usize, cols: usize) -> Prediction {
        Prediction {
            pad_rows: rows,
            pad_cols: cols,
            values: grid.to_vec(),
        }
    }

    #[test]
    fn dictionary_weights_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let g: Vec<f64> = (0..16).map(|_| rng.random_range(-3.0..3.0)).collect();
            let atoms: Vec<f64> = (0..5 * 16).map(|_| rng.random_range(-3.0..3.0)).collect();
            let s: f64 = dictionary_weights(&g, &atoms).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn single_atom_is_added_exactly() {
        let g = [0.5, -1.25, 3.0];
        let atom = [0.1, 0.2, -0.3];
        let r = dictionary_refine(&g, &atom);
        for f in 0..3 {
            assert_eq!(r[f], g[f] + atom[f]);
        }
    }

    #[test]
    fn zero_feature_gives_mean_atom() {
        let atoms = [1.0, 2.0, 3.0, 4.0, -5.0, 6.0, 0.0, 0.5];
        let w = dictionary_weights(&[0.0; 2], &atoms);
        assert!(w.iter().all(|&x| x == 0.25));
        let r = dictionary_refine(&[0.0; 2], &atoms);
        assert!((r[0] - (1.0 + 3.0 - 5.0 + 0.0) / 4.0).abs() < 1e-15);
        assert!((r[1] - (2.0 + 4.0 + 6.0 + 0.5) / 4.0).abs() < 1e-15);
    }

    fn block_grid(rng: &mut impl Rng, rows: usize, cols: usize) -> ControlGrid {
        ControlGrid::from_fn(rows, cols, |_, _| {
            [
                rng.random_range(0.2..1.0),
                rng.random_range(0.2..1.0),
                rng.random_range(-0.1..0.1),
            ]
        })
    }

    #[test]
    fn exact_padded_target_extracts_block() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let grid = block_grid(&mut rng, 5, 6);
        let t = pad_target(&grid, 8, 8).unwrap();
        let got = extract_cp_grid(&prediction_from(t.values(), 8, 8), DEFAULT_EPSILON).unwrap();
        assert_eq!(got, grid);
    }

    #[test]
    fn small_padding_noise_does_not_change_extraction() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let eps = DEFAULT_EPSILON;
        for _ in 0..1000 {
            // Block entries have norm >= 2 eps, padding noise norm < eps / 2.
            let grid = ControlGrid::from_fn(5, 6, |_, _| loop {
                let p = [
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                ];
                if crate::geom::norm(p) >= 2.0 * eps {
                    break p;
                }
            });
            let t = pad_target(&grid, 8, 8).unwrap();
            let mut values = t.values().to_vec();
            for (idx, v) in values.iter_mut().enumerate() {
                if t.mask()[idx] == 0 {
                    let dir = [
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0f64),
                    ];
                    let len = crate::geom::norm(dir).max(1e-12);
                    let mag = rng.random_range(0.0..0.5 * eps);
                    *v = crate::geom::scale(dir, 0.999 * mag / len);
                }
            }
            let got = extract_cp_grid(&prediction_from(&values, 8, 8), eps).unwrap();
            assert_eq!(got.shape(), (5, 6));
        }
    }

    #[test]
    fn zero_prediction_is_empty() {
        let p = prediction_from(&[[0.0; 3]; 64], 8, 8);
        assert!(matches!(
            extract_cp_grid(&p, 0.05),
            Err(Error::EmptyPrediction)
        ));
    }

    #[test]
    fn trailing_active_row_is_ignored() {
        let mut values = vec![[0.0; 3]; 16];
        for j in 0..4 {
            values[j] = [1.0, 0.0, 0.0];
            values[3 * 4 + j] = [1.0, 0.0, 0.0];
        }
        let got = extract_cp_grid(&prediction_from(&values, 4, 4), 0.05).unwrap();
        assert_eq!(got.shape(), (1, 4));
    }

    #[test]
    fn extraction_inverts_padding() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for (r, c) in [(3, 4), (5, 6), (8, 8), (1, 1)] {
            let grid = block_grid(&mut rng, r, c);
            let t = pad_target(&grid, 8, 8).unwrap();
            let got = extract_cp_grid(&prediction_from(t.values(), 8, 8), DEFAULT_EPSILON);
            assert_eq!(got.unwrap(), grid);
        }
    }

    #[test]
    fn output_shape_and_permutation_invariance() {
        let arch = tiny_arch();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = ModelParams::init(&arch, &mut rng);
        for n in [arch.k_neighbors + 1, 40, 250] {
            let cloud = random_cloud(&mut rng, n);
            let a = forward(&params, &arch, &cloud).unwrap();
            assert_eq!(a.values.len(), arch.pad_rows * arch.pad_cols);
            let mut pts = cloud.points().to_vec();
            pts.reverse();
            pts.rotate_left(n / 3);
            let b = forward(&params, &arch, &PointCloud::new(pts).unwrap()).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn translation_moves_every_cp() {
        let arch = tiny_arch();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let params = ModelParams::init(&arch, &mut rng);
        let cloud = random_cloud(&mut rng, 60);
        let t = [3.5, -2.0, 0.75];
        let moved = cloud.map(|p| crate::geom::add(p, t));
        let a = forward(&params, &arch, &cloud).unwrap();
        let b = forward(&params, &arch, &moved).unwrap();
        for (p, q) in a.values.iter().zip(&b.values) {
            for d in 0..3 {
                assert!((q[d] - p[d] - t[d]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn forward_is_finite_for_random_inits() {
        let arch = tiny_arch();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let params = ModelParams::init(&arch, &mut rng);
            let n = rng.random_range(arch.k_neighbors + 1..60);
            let cloud = random_cloud(&mut rng, n).map(|p| crate::geom::scale(p, 10.0));
            let out = forward(&params, &arch, &cloud).unwrap();
            assert!(out.values.iter().flatten().all(|x| x.is_finite()));
        }
    }

    #[test]
    fn too_small_cloud_is_config_error() {
        let arch = tiny_arch();
        let params = ModelParams::zeros(&arch);
        let cloud = PointCloud::new(vec![[0.0; 3], [1.0, 0.0, 0.0]]).unwrap();
        assert!(matches!(
            forward(&params, &arch, &cloud),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn mismatched_params_are_config_error() {
        let arch = tiny_arch();
        let other = ArchConfig {
            head_hidden: 11,
            ..tiny_arch()
        };
        let params = ModelParams::zeros(&other);
        let cloud = random_cloud(&mut ChaCha8Rng::seed_from_u64(8), 30);
        assert!(matches!(
            forward(&params, &arch, &cloud),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn unit_cube_round_trip() {
        let cloud = random_cloud(&mut ChaCha8Rng::seed_from_u64(9), 50)
            .map(|p| [p[0] * 4.0 - 7.0, p[1] * 2.0 + 1.0, p[2]]);
        let n = UnitCube::fit(&cloud);
        for &p in cloud.points() {
            let q = n.apply(p);
            assert!(q.iter().all(|&x| (-1e-12..=1.0 + 1e-12).contains(&x)));
            let back = n.invert(q);
            for d in 0..3 {
                assert!((back[d] - p[d]).abs() < 1e-12);
            }
        }
    }
}
