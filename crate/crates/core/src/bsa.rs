//! Least-squares B-spline surface approximation with a fixed control grid,
//! preceded by rank-based gridding of the unordered cloud.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::geom::{dist, Point3};
use crate::spline::{clamp_degree, BSplineSurface, ControlGrid, KnotVector, PointCloud};
use crate::{Error, Result};

/// `rows x cols` matrix of data points; row index follows y, column index x.
#[derive(Clone, Debug, PartialEq)]
pub struct GriddedCloud {
    rows: usize,
    cols: usize,
    points: Vec<Point3>,
}

impl GriddedCloud {
    pub fn new(rows: usize, cols: usize, points: Vec<Point3>) -> Result<Self> {
        if rows < 2 || cols < 2 || points.len() != rows * cols {
            return Err(Error::config(format!(
                "gridded cloud {rows}x{cols} needs at least 2x2 and {} points (got {})",
                rows * cols,
                points.len()
            )));
        }
        Ok(Self { rows, cols, points })
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
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitConfig {
    /// Requested degrees; clamped per direction to `count - 1`.
    pub degrees: (usize, usize),
    pub cp_grid: (usize, usize),
    pub regularization: f64,
}

impl FitConfig {
    pub fn new(cp_rows: usize, cp_cols: usize) -> Self {
        Self {
            degrees: (3, 3),
            cp_grid: (cp_rows, cp_cols),
            regularization: 1e-9,
        }
    }

    pub fn effective_degrees(&self) -> (usize, usize) {
        (
            clamp_degree(self.degrees.0, self.cp_grid.0),
            clamp_degree(self.degrees.1, self.cp_grid.1),
        )
    }
}

fn lex(a: &Point3, b: &Point3, axes: [usize; 3]) -> std::cmp::Ordering {
    a[axes[0]]
        .total_cmp(&b[axes[0]])
        .then(a[axes[1]].total_cmp(&b[axes[1]]))
        .then(a[axes[2]].total_cmp(&b[axes[2]]))
}

/// Sort by y into `rows` equal-count bands, sort each band by x and keep
/// `cols` evenly spaced ranks per band.
///
/// Ties are broken on the remaining coordinates, so the result depends only
/// on the multiset of points.
pub fn grid_order(cloud: &PointCloud, rows: usize, cols: usize) -> Result<GriddedCloud> {
    let n = cloud.len();
    if rows == 0 || cols == 0 || n < rows * cols {
        return Err(Error::InsufficientPoints {
            needed: rows * cols,
            got: n,
        });
    }
    let mut by_y = cloud.points().to_vec();
    by_y.sort_by(|a, b| lex(a, b, [1, 0, 2]));

    let mut out = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        let mut band = by_y[i * n / rows..(i + 1) * n / rows].to_vec();
        band.sort_by(|a, b| lex(a, b, [0, 1, 2]));
        let last = band.len() - 1;
        for j in 0..cols {
            let rank = if cols == 1 {
                last / 2
            } else {
                (j * last + (cols - 1) / 2) / (cols - 1)
            };
            out.push(band[rank]);
        }
    }
    GriddedCloud::new(rows, cols, out)
}

/// Averaged normalised cumulative chord lengths along one axis.
fn averaged_chords(
    lines: usize,
    len: usize,
    at: impl Fn(usize, usize) -> Point3,
) -> Result<Vec<f64>> {
    let mut acc = vec![0.0; len];
    let mut used = 0usize;
    for l in 0..lines {
        let mut cum = vec![0.0; len];
        for k in 1..len {
            cum[k] = cum[k - 1] + dist(at(l, k - 1), at(l, k));
        }
        let total = cum[len - 1];
        if total <= 0.0 {
            continue;
        }
        for k in 0..len {
            acc[k] += cum[k] / total;
        }
        used += 1;
    }
    if used == 0 {
        return Err(Error::DegenerateParameterization(
            "every line has zero chord length".into(),
        ));
    }
    let mut t: Vec<f64> = acc.iter().map(|a| a / used as f64).collect();
    t[0] = 0.0;
    t[len - 1] = 1.0;
    if t.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::DegenerateParameterization(
            "coincident adjacent points leave parameters non-increasing".into(),
        ));
    }
    Ok(t)
}

/// Chord-length parameters: `u` (one per row) from column chords and `v`
/// (one per column) from row chords, each averaged over lines.
pub fn chord_length_params(grid: &GriddedCloud) -> Result<(Vec<f64>, Vec<f64>)> {
    let (r, c) = grid.shape();
    let u = averaged_chords(c, r, |col, row| grid.get(row, col))?;
    let v = averaged_chords(r, c, |row, col| grid.get(row, col))?;
    Ok((u, v))
}

fn basis_matrix(knots: &KnotVector, degree: usize, params: &[f64]) -> DMatrix<f64> {
    let n = knots.basis_count(degree);
    let mut m = DMatrix::zeros(params.len(), n);
    for (a, &t) in params.iter().enumerate() {
        for (i, b) in knots.basis_all(degree, t).into_iter().enumerate() {
            m[(a, i)] = b;
        }
    }
    m
}

/// Fit with chord-length parameters.
pub fn lsq_fit_surface(grid: &GriddedCloud, cfg: &FitConfig) -> Result<BSplineSurface> {
    let (u, v) = chord_length_params(grid)?;
    lsq_fit_surface_at(grid, &u, &v, cfg)
}

/// Minimise `sum_ab |S(u_a, v_b) - Q_ab|^2 + lambda |P|^2` over control points.
///
/// The normal matrix is `Gu (x) Gv + lambda I` with `Gu = Bu^T Bu`,
/// `Gv = Bv^T Bv`; diagonalising both Gram matrices solves it exactly
/// without forming the Kronecker product.
pub fn lsq_fit_surface_at(
    grid: &GriddedCloud,
    u: &[f64],
    v: &[f64],
    cfg: &FitConfig,
) -> Result<BSplineSurface> {
    let (r, c) = grid.shape();
    let (rows, cols) = cfg.cp_grid;
    if rows < 2 || cols < 2 || rows > r || cols > c {
        return Err(Error::config(format!(
            "control grid {rows}x{cols} incompatible with data grid {r}x{c}"
        )));
    }
    if u.len() != r || v.len() != c {
        return Err(Error::config("parameter counts do not match data grid"));
    }
    if !(cfg.regularization >= 0.0) {
        return Err(Error::config("regularization must be non-negative"));
    }
    let (p, q) = cfg.effective_degrees();
    let knots_u = KnotVector::open_uniform(rows, p)?;
    let knots_v = KnotVector::open_uniform(cols, q)?;
    let bu = basis_matrix(&knots_u, p, u);
    let bv = basis_matrix(&knots_v, q, v);

    let eu = SymmetricEigen::new(bu.transpose() * &bu);
    let ev = SymmetricEigen::new(bv.transpose() * &bv);
    let scale = eu.eigenvalues.max() * ev.eigenvalues.max();
    let mut denom = DMatrix::zeros(rows, cols);
    for i in 0..rows {
        for j in 0..cols {
            let d = eu.eigenvalues[i] * ev.eigenvalues[j] + cfg.regularization;
            if !(d > 1e-13 * scale) {
                return Err(Error::SingularSystem);
            }
            denom[(i, j)] = d;
        }
    }

    let mut control = vec![[0.0; 3]; rows * cols];
    for d in 0..3 {
        let qd = DMatrix::from_fn(r, c, |a, b| grid.get(a, b)[d]);
        let rhs = bu.transpose() * qd * &bv;
        let mut w = eu.eigenvectors.transpose() * rhs * &ev.eigenvectors;
        w.component_div_assign(&denom);
        let pd = &eu.eigenvectors * w * ev.eigenvectors.transpose();
        for (k, cp) in control.iter_mut().enumerate() {
            cp[d] = pd[(k / cols, k % cols)];
        }
    }
    BSplineSurface::new(
        p,
        q,
        knots_u,
        knots_v,
        ControlGrid::new(rows, cols, control)?,
    )
}

/// Root-mean-square distance between the surface at the data parameters and
/// the data points.
pub fn residual_rms(surface: &BSplineSurface, grid: &GriddedCloud, u: &[f64], v: &[f64]) -> f64 {
    let (r, c) = grid.shape();
    let mut sum = 0.0;
    for (a, &ua) in u.iter().enumerate().take(r) {
        for (b, &vb) in v.iter().enumerate().take(c) {
            sum += crate::geom::dist2(surface.eval(ua, vb), grid.get(a, b));
        }
    }
    (sum / (r * c) as f64).sqrt()
}

/// Square data grid used when gridding a cloud of `n` points.
pub fn default_data_grid(n: usize) -> (usize, usize) {
    let side = (n as f64).sqrt().floor() as usize;
    (side.max(2), side.max(2))
}

/// Gridding, chord-length parameterisation and fit in one call.
pub fn fit_cloud(cloud: &PointCloud, cfg: &FitConfig) -> Result<BSplineSurface> {
    let (r, c) = default_data_grid(cloud.len());
    let grid = grid_order(cloud, r, c)?;
    lsq_fit_surface(&grid, cfg)
}
