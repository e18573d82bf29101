use gcnspline_core::geom::{dist2, scale};
use gcnspline_core::knn::KdTree;
use gcnspline_core::metrics::{dcd, emd, nc_error, pca_normals};
use gcnspline_core::{Point3, PointCloud};
use proptest::prelude::*;

fn cloud(min: usize, max: usize) -> impl Strategy<Value = Vec<Point3>> {
    prop::collection::vec([-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64], min..max)
}

/// Quantised coordinates so exact ties occur.
fn tied_cloud() -> impl Strategy<Value = Vec<Point3>> {
    prop::collection::vec([0i32..4, 0i32..4, 0i32..4], 1..128)
        .prop_map(|v| v.into_iter().map(|p| p.map(|c| c as f64)).collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn knn_agrees_with_brute_force(pts in tied_cloud(), q in [-1.0..5.0f64, -1.0..5.0f64, -1.0..5.0f64], k in 1usize..12) {
        let tree = KdTree::new(&pts);
        let got = tree.knn(q, k, None);
        let mut all: Vec<(usize, f64)> = pts.iter().enumerate().map(|(i, &p)| (i, dist2(p, q))).collect();
        all.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        all.truncate(k);
        prop_assert_eq!(got, all);
    }

    #[test]
    fn dcd_in_unit_interval(a in cloud(1, 64), b in cloud(1, 64), alpha in 0.1..100.0f64) {
        let v = dcd(&PointCloud::new(a).unwrap(), &PointCloud::new(b).unwrap(), alpha);
        prop_assert!((0.0..=1.0).contains(&v));
    }

    #[test]
    fn emd_nonnegative_and_symmetric(a in cloud(2, 24), b in cloud(2, 24)) {
        let n = a.len().min(b.len());
        let (a, b) = (PointCloud::new(a[..n].to_vec()).unwrap(), PointCloud::new(b[..n].to_vec()).unwrap());
        let ab = emd(&a, &b, 64, 7);
        let ba = emd(&b, &a, 64, 7);
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!(emd(&a, &a, 64, 7).abs() < 1e-15);
    }

    #[test]
    fn nc_in_unit_interval_and_sign_invariant(a in cloud(8, 48), b in cloud(8, 48), flips in prop::collection::vec(any::<bool>(), 48)) {
        let (a, b) = (PointCloud::new(a).unwrap(), PointCloud::new(b).unwrap());
        let na = pca_normals(&a, 5).unwrap();
        let nb = pca_normals(&b, 5).unwrap();
        let v = nc_error(&a, &na, &b, &nb);
        prop_assert!((0.0..=1.0).contains(&v));
        let flipped: Vec<Point3> = na.iter().zip(&flips).map(|(&n, &f)| if f { scale(n, -1.0) } else { n }).collect();
        prop_assert!((nc_error(&a, &flipped, &b, &nb) - v).abs() < 1e-12);
    }
}
