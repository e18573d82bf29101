//! Point-cloud similarity metrics.

pub mod assignment;

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix3, SymmetricEigen};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::mix64;
use crate::geom::{dist, dot, Point3};
use crate::knn::KdTree;
use crate::spline::PointCloud;
use crate::{Error, Result};

pub const DEFAULT_EMD_EVAL_SIZE: usize = 512;
pub const DEFAULT_DCD_ALPHA: f64 = 40.0;
pub const DEFAULT_NORMAL_K: usize = 16;

/// Optimal bijection between two equal-size point sets.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    pub mapping: Vec<usize>,
    /// Sum of matched Euclidean distances.
    pub total_cost: f64,
}

pub fn optimal_assignment(a: &[Point3], b: &[Point3]) -> Assignment {
    assert_eq!(a.len(), b.len(), "assignment needs equal-size sets");
    let n = a.len();
    let mut cost = Vec::with_capacity(n * n);
    for &p in a {
        cost.extend(b.iter().map(|&q| dist(p, q)));
    }
    let (mapping, total_cost) = assignment::solve(n, &cost);
    Assignment {
        mapping,
        total_cost,
    }
}

fn subsample(points: &[Point3], m: usize, seed: u64) -> Vec<Point3> {
    if m >= points.len() {
        return points.to_vec();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks = index::sample(&mut rng, points.len(), m).into_vec();
    picks.sort_unstable();
    picks.into_iter().map(|i| points[i]).collect()
}

/// Mean matched distance under the optimal bijection, after subsampling
/// both clouds (each with its own stream) to `min(eval_size, |a|, |b|)`.
pub fn emd(a: &PointCloud, b: &PointCloud, eval_size: usize, seed: u64) -> f64 {
    let m = eval_size.min(a.len()).min(b.len());
    let sa = subsample(a.points(), m, mix64(seed ^ 0xa));
    let sb = subsample(b.points(), m, mix64(seed ^ 0xb));
    optimal_assignment(&sa, &sb).total_cost / m as f64
}

/// One direction of DCD: mean over `from` of `exp(-alpha d^2) / n_hat`, where
/// `n_hat` counts how many points of `from` chose the same nearest neighbour.
fn dcd_term(from: &[Point3], to: &KdTree, alpha: f64) -> f64 {
    let nearest: Vec<(usize, f64)> = from.iter().map(|&p| to.nearest(p)).collect();
    let mut hits = vec![0usize; to.len()];
    for &(j, _) in &nearest {
        hits[j] += 1;
    }
    nearest
        .iter()
        .map(|&(j, d2)| (-alpha * d2).exp() / hits[j] as f64)
        .sum::<f64>()
        / from.len() as f64
}

/// Density-aware Chamfer distance in `[0, 1]`.
pub fn dcd(a: &PointCloud, b: &PointCloud, alpha: f64) -> f64 {
    let ta = KdTree::new(a.points());
    let tb = KdTree::new(b.points());
    let value = 1.0 - 0.5 * (dcd_term(a.points(), &tb, alpha) + dcd_term(b.points(), &ta, alpha));
    value.clamp(0.0, 1.0)
}

/// Symmetric mean of squared nearest-neighbour distances.
pub fn chamfer(a: &PointCloud, b: &PointCloud) -> f64 {
    let ta = KdTree::new(a.points());
    let tb = KdTree::new(b.points());
    let side = |from: &PointCloud, to: &KdTree| {
        from.points().iter().map(|&p| to.nearest(p).1).sum::<f64>() / from.len() as f64
    };
    0.5 * (side(a, &tb) + side(b, &ta))
}

/// Smallest-eigenvalue eigenvector of each point's k-neighbourhood
/// covariance (the point itself included). Signs are arbitrary.
pub fn pca_normals(cloud: &PointCloud, k: usize) -> Result<Vec<Point3>> {
    if k < 3 || cloud.len() <= k {
        return Err(Error::config(format!(
            "pca normals need |cloud| > k >= 3 (|cloud|={}, k={k})",
            cloud.len()
        )));
    }
    let tree = KdTree::new(cloud.points());
    cloud
        .points()
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let nbrs: Vec<Point3> = tree
                .knn(p, k, None)
                .into_iter()
                .map(|(j, _)| cloud.points()[j])
                .collect();
            local_normal(&nbrs).ok_or(Error::DegenerateNeighborhood(i))
        })
        .collect()
}

fn local_normal(nbrs: &[Point3]) -> Option<Point3> {
    let c = crate::geom::centroid(nbrs);
    let mut cov = Matrix3::<f64>::zeros();
    for p in nbrs {
        let d = nalgebra::Vector3::new(p[0] - c[0], p[1] - c[1], p[2] - c[2]);
        cov += d * d.transpose();
    }
    if !(cov.trace() > 1e-30) {
        return None;
    }
    let eig = SymmetricEigen::new(cov);
    let (imin, _) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))?;
    let n = eig.eigenvectors.column(imin).normalize();
    Some([n[0], n[1], n[2]])
}

/// Symmetrised mean of `1 - |n_x . n_nearest|` over nearest-neighbour pairs.
pub fn nc_error(a: &PointCloud, na: &[Point3], b: &PointCloud, nb: &[Point3]) -> f64 {
    assert_eq!(a.len(), na.len());
    assert_eq!(b.len(), nb.len());
    let ta = KdTree::new(a.points());
    let tb = KdTree::new(b.points());
    let side = |from: &PointCloud, nf: &[Point3], to: &KdTree, nt: &[Point3]| {
        from.points()
            .iter()
            .zip(nf)
            .map(|(&p, &n)| 1.0 - dot(n, nt[to.nearest(p).0]).abs().min(1.0))
            .sum::<f64>()
            / from.len() as f64
    };
    0.5 * (side(a, na, &tb, nb) + side(b, nb, &ta, na))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleMetrics {
    pub sample_id: u64,
    pub emd: f64,
    pub nc: f64,
    pub dcd: f64,
}

/// Per-sample metrics at natural scale with their means.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub samples: Vec<SampleMetrics>,
}

impl MetricsReport {
    pub fn new(samples: Vec<SampleMetrics>) -> Self {
        Self { samples }
    }

    pub fn count(&self) -> usize {
        self.samples.len()
    }

    fn mean_of(&self, f: impl Fn(&SampleMetrics) -> f64) -> f64 {
        if self.samples.is_empty() {
            return f64::NAN;
        }
        self.samples.iter().map(f).sum::<f64>() / self.samples.len() as f64
    }

    pub fn mean_emd(&self) -> f64 {
        self.mean_of(|s| s.emd)
    }

    pub fn mean_nc(&self) -> f64 {
        self.mean_of(|s| s.nc)
    }

    pub fn mean_dcd(&self) -> f64 {
        self.mean_of(|s| s.dcd)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("sample_id,emd,nc,dcd\n");
        for s in &self.samples {
            writeln!(out, "{},{:e},{:e},{:e}", s.sample_id, s.emd, s.nc, s.dcd).unwrap();
        }
        writeln!(
            out,
            "mean,{:e},{:e},{:e}",
            self.mean_emd(),
            self.mean_nc(),
            self.mean_dcd()
        )
        .unwrap();
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    /// Parse the per-sample rows of a report CSV; the summary row is ignored.
    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut samples = Vec::new();
        for (n, line) in text.lines().enumerate().skip(1) {
            let fields: Vec<&str> = line.split(',').collect();
            let parse_err = |msg: &str| Error::Parse {
                path: path.to_path_buf(),
                line: n + 1,
                msg: msg.to_string(),
            };
            if fields.len() != 4 {
                return Err(parse_err("expected 4 fields"));
            }
            if fields[0] == "mean" {
                continue;
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| parse_err("bad number"));
            samples.push(SampleMetrics {
                sample_id: fields[0].parse().map_err(|_| parse_err("bad sample id"))?,
                emd: num(fields[1])?,
                nc: num(fields[2])?,
                dcd: num(fields[3])?,
            });
        }
        Ok(Self { samples })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::seq::SliceRandom;
    use rand::Rng;

    fn cloud(points: Vec<Point3>) -> PointCloud {
        PointCloud::new(points).unwrap()
    }

    fn random_points(n: usize, rng: &mut impl Rng) -> Vec<Point3> {
        (0..n)
            .map(|_| [rng.random(), rng.random(), rng.random()])
            .collect()
    }

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(n - 1) {
            for pos in 0..=p.len() {
                let mut q = p.clone();
                q.insert(pos, n - 1);
                out.push(q);
            }
        }
        out
    }

    #[test]
    fn emd_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pts = random_points(40, &mut rng);
        let mut shuffled = pts.clone();
        shuffled.shuffle(&mut rng);
        assert_abs_diff_eq!(
            emd(&cloud(pts.clone()), &cloud(shuffled), 64, 1),
            0.0,
            epsilon = 1e-15
        );

        let t = [0.3, -0.2, 0.05];
        let moved: Vec<Point3> = pts.iter().map(|&p| crate::geom::add(p, t)).collect();
        assert_abs_diff_eq!(
            emd(&cloud(pts), &cloud(moved), 64, 1),
            crate::geom::norm(t),
            epsilon = 1e-12
        );
    }

    #[test]
    fn emd_matches_exhaustive_permutations() {
        let perms = permutations(6);
        assert_eq!(perms.len(), 720);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let a = random_points(6, &mut rng);
            let b = random_points(6, &mut rng);
            let brute = perms
                .iter()
                .map(|p| (0..6).map(|i| dist(a[i], b[p[i]])).sum::<f64>())
                .fold(f64::INFINITY, f64::min)
                / 6.0;
            assert_abs_diff_eq!(emd(&cloud(a), &cloud(b), 6, 0), brute, epsilon = 1e-12);
        }
    }

    #[test]
    fn emd_is_symmetric_without_subsampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = cloud(random_points(50, &mut rng));
        let b = cloud(random_points(50, &mut rng));
        assert_abs_diff_eq!(emd(&a, &b, 100, 3), emd(&b, &a, 100, 3), epsilon = 1e-12);
    }

    #[test]
    fn dcd_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = cloud(random_points(30, &mut rng));
        assert_abs_diff_eq!(dcd(&a, &a, 40.0), 0.0, epsilon = 1e-15);

        let far = a.map(|p| [p[0] + 1e3, p[1], p[2]]);
        assert_abs_diff_eq!(dcd(&a, &far, 40.0), 1.0, epsilon = 1e-15);

        // a -> b: both points hit b0 (n = 2): (1/2)(1/2 + e^-alpha/2).
        // b -> a: b0 hits a0 once at distance 0: 1.
        let alpha = 2.0f64;
        let two = cloud(vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
        let one = cloud(vec![[0.0, 0.0, 0.0]]);
        let expected = 1.0 - 0.5 * (0.5 * (0.5 + 0.5 * (-alpha).exp()) + 1.0);
        assert_abs_diff_eq!(dcd(&two, &one, alpha), expected, epsilon = 1e-15);
    }

    #[test]
    fn chamfer_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = cloud(random_points(20, &mut rng));
        assert_eq!(chamfer(&a, &a), 0.0);
        let d = 0.7;
        assert_abs_diff_eq!(
            chamfer(&cloud(vec![[0.0; 3]]), &cloud(vec![[d, 0.0, 0.0]])),
            d * d,
            epsilon = 1e-15
        );
        for _ in 0..100 {
            let a = random_points(15, &mut rng);
            let b = random_points(9, &mut rng);
            let side = |x: &[Point3], y: &[Point3]| {
                x.iter()
                    .map(|&p| {
                        y.iter()
                            .map(|&q| crate::geom::dist2(p, q))
                            .fold(f64::INFINITY, f64::min)
                    })
                    .sum::<f64>()
                    / x.len() as f64
            };
            let brute = 0.5 * (side(&a, &b) + side(&b, &a));
            assert_abs_diff_eq!(chamfer(&cloud(a), &cloud(b)), brute, epsilon = 1e-12);
        }
    }

    #[test]
    fn planar_pca_normals() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts: Vec<Point3> = (0..200)
            .map(|_| [rng.random(), rng.random(), 0.0])
            .collect();
        for n in pca_normals(&cloud(pts), 16).unwrap() {
            assert_abs_diff_eq!(n[2].abs(), 1.0, epsilon = 1e-6);
            assert_abs_diff_eq!(crate::geom::norm(n), 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn sphere_pca_normals_are_radial() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let normal = rand_distr::StandardNormal;
        let pts: Vec<Point3> = (0..500)
            .map(|_| {
                let v: Point3 = [rng.sample(normal), rng.sample(normal), rng.sample(normal)];
                crate::geom::scale(v, 1.0 / crate::geom::norm(v))
            })
            .collect();
        let normals = pca_normals(&cloud(pts.clone()), 16).unwrap();
        let mean = pts
            .iter()
            .zip(&normals)
            .map(|(p, n)| dot(*p, *n).abs())
            .sum::<f64>()
            / 500.0;
        assert!(mean > 0.98, "mean |n . r| = {mean}");
    }

    #[test]
    fn degenerate_neighbourhood() {
        let pts = vec![[1.0, 2.0, 3.0]; 10];
        assert!(matches!(
            pca_normals(&cloud(pts), 4),
            Err(Error::DegenerateNeighborhood(0))
        ));
        assert!(pca_normals(&cloud(vec![[0.0; 3]; 3]), 3).is_err());
    }

    #[test]
    fn nc_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let pts = cloud(random_points(50, &mut rng));
        let up = vec![[0.0, 0.0, 1.0]; 50];
        let side = vec![[1.0, 0.0, 0.0]; 50];
        assert_eq!(nc_error(&pts, &up, &pts, &up), 0.0);
        assert_abs_diff_eq!(nc_error(&pts, &up, &pts, &side), 1.0, epsilon = 1e-15);
        let flipped: Vec<Point3> = up.iter().map(|n| crate::geom::scale(*n, -1.0)).collect();
        assert_eq!(nc_error(&pts, &up, &pts, &flipped), 0.0);

        let plane = |rng: &mut ChaCha8Rng| {
            cloud(
                (0..300)
                    .map(|_| [rng.random(), rng.random(), 0.5])
                    .collect(),
            )
        };
        let (a, b) = (plane(&mut rng), plane(&mut rng));
        let (na, nb) = (pca_normals(&a, 16).unwrap(), pca_normals(&b, 16).unwrap());
        assert!(nc_error(&a, &na, &b, &nb) < 1e-6);
    }

    #[test]
    fn report_csv_round_trip() {
        let report = MetricsReport::new(vec![
            SampleMetrics {
                sample_id: 3,
                emd: 0.01,
                nc: 0.1,
                dcd: 0.5,
            },
            SampleMetrics {
                sample_id: 9,
                emd: 0.03,
                nc: 0.2,
                dcd: 0.4,
            },
        ]);
        assert_abs_diff_eq!(report.mean_emd(), 0.02, epsilon = 1e-15);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        report.write_csv(&path).unwrap();
        assert_eq!(MetricsReport::read_csv(&path).unwrap(), report);
    }
}
