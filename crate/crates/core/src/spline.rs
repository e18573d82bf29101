//! Tensor-product B-spline surfaces over the unit parameter square.
//!
//! Basis functions follow the Cox-de Boor recursion with half-open degree-0
//! spans, `0/0 := 0`, and the right end of the domain folded into the last
//! nonempty span so that open knot vectors interpolate both end points.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::geom::{self, Point3};
use crate::{Error, Result};

/// Non-decreasing knot sequence in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct KnotVector(Vec<f64>);

impl KnotVector {
    pub fn new(knots: Vec<f64>) -> Result<Self> {
        if knots.len() < 2 {
            return Err(Error::config("knot vector needs at least two entries"));
        }
        if knots.windows(2).any(|w| !(w[0] <= w[1])) {
            return Err(Error::config("knot vector must be non-decreasing"));
        }
        Ok(Self(knots))
    }

    /// Open uniform knots for `num_cps` control points of the given degree:
    /// `degree + 1` zeros, equally spaced interior knots, `degree + 1` ones.
    pub fn open_uniform(num_cps: usize, degree: usize) -> Result<Self> {
        if degree == 0 || num_cps <= degree {
            return Err(Error::config(format!(
                "open uniform knots need num_cps > degree >= 1 (got num_cps={num_cps}, degree={degree})"
            )));
        }
        let interior = num_cps - degree - 1;
        let mut knots = Vec::with_capacity(num_cps + degree + 1);
        knots.extend(std::iter::repeat_n(0.0, degree + 1));
        knots.extend((1..=interior).map(|i| i as f64 / (interior + 1) as f64));
        knots.extend(std::iter::repeat_n(1.0, degree + 1));
        Ok(Self(knots))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Number of degree-`k` basis functions this vector supports.
    pub fn basis_count(&self, degree: usize) -> usize {
        self.0.len().saturating_sub(degree + 1)
    }

    /// All degree-`k` basis values at `t`, indices `0..basis_count(k)`.
    pub fn basis_all(&self, degree: usize, t: f64) -> Vec<f64> {
        let knots = &self.0;
        let spans = knots.len() - 1;
        let t_end = knots[spans];
        // Index of the last nonempty span; it owns t == t_end.
        let last = (0..spans).rev().find(|&i| knots[i] < knots[i + 1]);

        let mut n: Vec<f64> = (0..spans)
            .map(|i| {
                let inside = knots[i] <= t && t < knots[i + 1];
                let closing = t == t_end && Some(i) == last;
                if inside || closing {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();

        for k in 1..=degree {
            for i in 0..spans - k {
                let left_den = knots[i + k] - knots[i];
                let right_den = knots[i + k + 1] - knots[i + 1];
                let left = if left_den > 0.0 {
                    (t - knots[i]) / left_den * n[i]
                } else {
                    0.0
                };
                let right = if right_den > 0.0 {
                    (knots[i + k + 1] - t) / right_den * n[i + 1]
                } else {
                    0.0
                };
                n[i] = left + right;
            }
            n.truncate(spans - k);
        }
        n
    }
}

/// Cox-de Boor basis value `N_{i,k}(t)`.
pub fn basis(i: usize, degree: usize, t: f64, knots: &KnotVector) -> Result<f64> {
    let count = knots.basis_count(degree);
    if i >= count {
        return Err(Error::IndexOutOfRange { index: i, count });
    }
    Ok(knots.basis_all(degree, t)[i])
}

pub fn open_uniform_knots(num_cps: usize, degree: usize) -> Result<KnotVector> {
    KnotVector::open_uniform(num_cps, degree)
}

/// Highest usable degree not exceeding `requested` for `count` control points.
pub fn clamp_degree(requested: usize, count: usize) -> usize {
    requested.min(count.saturating_sub(1)).max(1)
}

/// Row-major grid of control points; rows run along `u`, columns along `v`.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlGrid {
    rows: usize,
    cols: usize,
    points: Vec<Point3>,
}

impl ControlGrid {
    pub fn new(rows: usize, cols: usize, points: Vec<Point3>) -> Result<Self> {
        if rows == 0 || cols == 0 || points.len() != rows * cols {
            return Err(Error::config(format!(
                "control grid {rows}x{cols} does not match {} points",
                points.len()
            )));
        }
        Ok(Self { rows, cols, points })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> Point3) -> Self {
        let mut points = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                points.push(f(i, j));
            }
        }
        Self { rows, cols, points }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn get(&self, i: usize, j: usize) -> Point3 {
        self.points[i * self.cols + j]
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub fn points_mut(&mut self) -> &mut [Point3] {
        &mut self.points
    }

    pub fn map(&self, f: impl Fn(Point3) -> Point3) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            points: self.points.iter().map(|&p| f(p)).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BSplineSurface {
    degree_u: usize,
    degree_v: usize,
    knots_u: KnotVector,
    knots_v: KnotVector,
    control: ControlGrid,
}

impl BSplineSurface {
    pub fn new(
        degree_u: usize,
        degree_v: usize,
        knots_u: KnotVector,
        knots_v: KnotVector,
        control: ControlGrid,
    ) -> Result<Self> {
        if knots_u.basis_count(degree_u) != control.rows()
            || knots_v.basis_count(degree_v) != control.cols()
        {
            return Err(Error::config(format!(
                "knot vectors ({}, {}) inconsistent with degrees ({degree_u}, {degree_v}) and a {}x{} grid",
                knots_u.len(),
                knots_v.len(),
                control.rows(),
                control.cols()
            )));
        }
        Ok(Self {
            degree_u,
            degree_v,
            knots_u,
            knots_v,
            control,
        })
    }

    /// Surface with open uniform knots in both directions.
    pub fn open_uniform(control: ControlGrid, degree_u: usize, degree_v: usize) -> Result<Self> {
        let knots_u = KnotVector::open_uniform(control.rows(), degree_u)?;
        let knots_v = KnotVector::open_uniform(control.cols(), degree_v)?;
        Self::new(degree_u, degree_v, knots_u, knots_v, control)
    }

    pub fn degrees(&self) -> (usize, usize) {
        (self.degree_u, self.degree_v)
    }

    pub fn knots_u(&self) -> &KnotVector {
        &self.knots_u
    }

    pub fn knots_v(&self) -> &KnotVector {
        &self.knots_v
    }

    pub fn control(&self) -> &ControlGrid {
        &self.control
    }

    /// `S(u, v) = sum_i sum_j N_{i,p}(u) N_{j,q}(v) P_ij`.
    pub fn eval(&self, u: f64, v: f64) -> Point3 {
        let nu = self.knots_u.basis_all(self.degree_u, u);
        let nv = self.knots_v.basis_all(self.degree_v, v);
        let mut out = [0.0; 3];
        for (i, &bu) in nu.iter().enumerate() {
            for (j, &bv) in nv.iter().enumerate() {
                let w = bu * bv;
                let p = self.control.get(i, j);
                out[0] += w * p[0];
                out[1] += w * p[1];
                out[2] += w * p[2];
            }
        }
        out
    }

    /// Unit normal from central differences of `S`, one-sided at the
    /// domain boundary.
    pub fn normal(&self, u: f64, v: f64, h: f64) -> Result<Point3> {
        if !(h > 0.0 && h <= 1e-3) {
            return Err(Error::config(format!(
                "normal step h={h} outside (0, 1e-3]"
            )));
        }
        let (u0, u1) = ((u - h).max(0.0), (u + h).min(1.0));
        let (v0, v1) = ((v - h).max(0.0), (v + h).min(1.0));
        let du = geom::scale(
            geom::sub(self.eval(u1, v), self.eval(u0, v)),
            1.0 / (u1 - u0),
        );
        let dv = geom::scale(
            geom::sub(self.eval(u, v1), self.eval(u, v0)),
            1.0 / (v1 - v0),
        );
        let n = geom::cross(du, dv);
        let len = geom::norm(n);
        if !(len >= 1e-12) {
            return Err(Error::DegenerateNormal { u, v });
        }
        Ok(geom::scale(n, 1.0 / len))
    }

    pub fn sample(&self, count: usize, mode: SampleMode, seed: u64) -> (PointCloud, Vec<[f64; 2]>) {
        let params = match mode {
            SampleMode::UniformGrid => {
                let res = (count as f64).sqrt().ceil() as usize;
                lattice_params(res.max(1))
            }
            SampleMode::Random => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                (0..count.max(1))
                    .map(|_| [rng.random::<f64>(), rng.random::<f64>()])
                    .collect()
            }
        };
        let points = params.iter().map(|&[u, v]| self.eval(u, v)).collect();
        (PointCloud { points }, params)
    }
}

/// Free-function form of [`BSplineSurface::eval`].
pub fn eval_surface(surface: &BSplineSurface, u: f64, v: f64) -> Point3 {
    surface.eval(u, v)
}

pub fn surface_normal(surface: &BSplineSurface, u: f64, v: f64, h: f64) -> Result<Point3> {
    surface.normal(u, v, h)
}

pub fn sample_surface(
    surface: &BSplineSurface,
    count: usize,
    mode: SampleMode,
    seed: u64,
) -> (PointCloud, Vec<[f64; 2]>) {
    surface.sample(count, mode, seed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleMode {
    /// `ceil(sqrt(count))^2` points on a regular lattice, row-major in `u`.
    UniformGrid,
    /// i.i.d. uniform parameters from the seed.
    Random,
}

/// Parameters of a `res x res` lattice including both domain ends.
pub fn lattice_params(res: usize) -> Vec<[f64; 2]> {
    let t = |i: usize| {
        if res == 1 {
            0.5
        } else {
            i as f64 / (res - 1) as f64
        }
    };
    let mut out = Vec::with_capacity(res * res);
    for i in 0..res {
        for j in 0..res {
            out.push([t(i), t(j)]);
        }
    }
    out
}

/// Unordered set of 3D points with finite coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    points: Vec<Point3>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyCloud);
        }
        if let Some(i) = points.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
            return Err(Error::NonFinite(i));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn into_points(self) -> Vec<Point3> {
        self.points
    }

    pub fn map(&self, f: impl Fn(Point3) -> Point3) -> Self {
        Self {
            points: self.points.iter().map(|&p| f(p)).collect(),
        }
    }
}
