#![allow(dead_code)]

use gcnspline_core::bsa::{lsq_fit_surface_at, residual_rms, FitConfig, GriddedCloud};
use gcnspline_core::dataset::{gen_control_grid, GenConfig};
use gcnspline_core::geom::dist;
use gcnspline_core::BSplineSurface;
use rand::Rng;

pub fn random_surface(rows: usize, cols: usize, rng: &mut impl Rng) -> BSplineSurface {
    let cfg = GenConfig::desk_scale();
    let grid = gen_control_grid(rows, cols, &cfg, rng).unwrap();
    let (p, q) = cfg.degrees_for(rows, cols);
    BSplineSurface::open_uniform(grid, p, q).unwrap()
}

/// Sorted parameters in [0, 1] with both endpoints and jittered interior.
pub fn params(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..n)
        .map(|k| {
            let base = k as f64 / (n - 1) as f64;
            if k == 0 || k == n - 1 {
                base
            } else {
                base + rng.random_range(-0.3..0.3) / (n - 1) as f64
            }
        })
        .collect()
}

pub fn sample_grid(surface: &BSplineSurface, u: &[f64], v: &[f64]) -> GriddedCloud {
    let mut pts = Vec::with_capacity(u.len() * v.len());
    for &a in u {
        for &b in v {
            pts.push(surface.eval(a, b));
        }
    }
    GriddedCloud::new(u.len(), v.len(), pts).unwrap()
}

/// Max control-point error when fitting noise-free samples of `surface` at
/// their true parameters with the generating grid size.
pub fn recovery_error(surface: &BSplineSurface, data: usize, rng: &mut impl Rng) -> f64 {
    let u = params(data, rng);
    let v = params(data, rng);
    let grid = sample_grid(surface, &u, &v);
    let (r, c) = surface.control().shape();
    let fit = lsq_fit_surface_at(&grid, &u, &v, &FitConfig::new(r, c)).unwrap();
    fit.control()
        .points()
        .iter()
        .zip(surface.control().points())
        .map(|(&a, &b)| dist(a, b))
        .fold(0.0, f64::max)
}

/// Residual RMS at the data parameters when fitting with `cp_grid`.
pub fn fit_residual(
    surface: &BSplineSurface,
    cp_grid: (usize, usize),
    data: usize,
    rng: &mut impl Rng,
) -> f64 {
    let u = params(data, rng);
    let v = params(data, rng);
    let grid = sample_grid(surface, &u, &v);
    let fit = lsq_fit_surface_at(&grid, &u, &v, &FitConfig::new(cp_grid.0, cp_grid.1)).unwrap();
    residual_rms(&fit, &grid, &u, &v)
}
