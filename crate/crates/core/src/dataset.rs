//! Synthetic corpus: noisy samples of random B-spline surfaces with their
//! control grids zero-padded to a fixed `I x J` shape.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::config::{join_list, parse_list, KeyValues};
use crate::geom::Point3;
use crate::spline::{clamp_degree, BSplineSurface, ControlGrid, PointCloud};
use crate::{Error, Result};

pub const MANIFEST_NAME: &str = "manifest.txt";
const SAMPLE_MAGIC: &[u8; 4] = b"BSDS";
const SAMPLE_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct GenConfig {
    pub grid_sizes: Vec<(usize, usize)>,
    pub samples_per_size: usize,
    /// Standard deviation of the lattice jitter, as a fraction of spacing.
    pub cp_xy_jitter_sigma: f64,
    pub z_range: (f64, f64),
    /// Requested degrees; each direction is clamped to `count - 1`.
    pub degrees: (usize, usize),
    pub points_per_cloud: usize,
    pub point_noise_sigma: f64,
    pub removal_fraction: f64,
    pub pad_rows: usize,
    pub pad_cols: usize,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self::desk_scale()
    }
}

impl GenConfig {
    pub const KEYS: &'static [&'static str] = &[
        "grid_sizes",
        "samples_per_size",
        "cp_xy_jitter_sigma",
        "z_range",
        "degrees",
        "points_per_cloud",
        "point_noise_sigma",
        "removal_fraction",
        "pad_rows",
        "pad_cols",
        "seed",
    ];

    /// Two grid sizes, 300 samples each.
    pub fn desk_scale() -> Self {
        Self {
            grid_sizes: vec![(3, 4), (5, 6)],
            samples_per_size: 300,
            cp_xy_jitter_sigma: 0.2,
            z_range: (-0.15, 0.15),
            degrees: (3, 3),
            points_per_cloud: 1024,
            point_noise_sigma: 0.01,
            removal_fraction: 0.1,
            pad_rows: 8,
            pad_cols: 8,
            seed: 0,
        }
    }

    /// Two grid sizes, 3000 samples each (6000 clouds).
    pub fn paper_scale() -> Self {
        Self {
            samples_per_size: 3000,
            ..Self::desk_scale()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid_sizes.is_empty() {
            return Err(Error::config("grid_sizes is empty"));
        }
        for &(r, c) in &self.grid_sizes {
            if r < 2 || c < 2 {
                return Err(Error::config(format!(
                    "grid size {r}x{c} needs at least 2x2"
                )));
            }
            if r > self.pad_rows || c > self.pad_cols {
                return Err(Error::config(format!(
                    "grid size {r}x{c} exceeds padding {}x{}",
                    self.pad_rows, self.pad_cols
                )));
            }
        }
        if self.degrees.0 == 0 || self.degrees.1 == 0 {
            return Err(Error::config("degrees must be positive"));
        }
        if self.points_per_cloud == 0 {
            return Err(Error::config("points_per_cloud must be positive"));
        }
        if !(0.0..1.0).contains(&self.removal_fraction) {
            return Err(Error::config("removal_fraction must lie in [0, 1)"));
        }
        if !(self.cp_xy_jitter_sigma >= 0.0 && self.point_noise_sigma >= 0.0) {
            return Err(Error::config("noise sigmas must be non-negative"));
        }
        if !(self.z_range.0 <= self.z_range.1) {
            return Err(Error::config("z_range low exceeds high"));
        }
        if self.kept_points() == 0 {
            return Err(Error::config("removal leaves no points"));
        }
        Ok(())
    }

    /// Points that survive removal: `round(N * (1 - removal_fraction))`.
    pub fn kept_points(&self) -> usize {
        (self.points_per_cloud as f64 * (1.0 - self.removal_fraction)).round() as usize
    }

    pub fn degrees_for(&self, rows: usize, cols: usize) -> (usize, usize) {
        (
            clamp_degree(self.degrees.0, rows),
            clamp_degree(self.degrees.1, cols),
        )
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        let sizes: Vec<String> = self
            .grid_sizes
            .iter()
            .map(|(r, c)| format!("{r}x{c}"))
            .collect();
        kv.set("grid_sizes", sizes.join(","));
        kv.set("samples_per_size", self.samples_per_size);
        kv.set("cp_xy_jitter_sigma", self.cp_xy_jitter_sigma);
        kv.set("z_range", join_list(&[self.z_range.0, self.z_range.1]));
        kv.set("degrees", join_list(&[self.degrees.0, self.degrees.1]));
        kv.set("points_per_cloud", self.points_per_cloud);
        kv.set("point_noise_sigma", self.point_noise_sigma);
        kv.set("removal_fraction", self.removal_fraction);
        kv.set("pad_rows", self.pad_rows);
        kv.set("pad_cols", self.pad_cols);
        kv.set("seed", self.seed);
        kv
    }

    /// Overlay recognised keys of `kv` onto `self`.
    pub fn apply_kv(mut self, kv: &KeyValues) -> Result<Self> {
        if let Some(v) = kv.get_str("grid_sizes") {
            self.grid_sizes = parse_grid_sizes(v)?;
        }
        if let Some(v) = kv.get("samples_per_size")? {
            self.samples_per_size = v;
        }
        if let Some(v) = kv.get("cp_xy_jitter_sigma")? {
            self.cp_xy_jitter_sigma = v;
        }
        if let Some(v) = kv.get_str("z_range") {
            self.z_range = pair(parse_list("z_range", v)?, "z_range")?;
        }
        if let Some(v) = kv.get_str("degrees") {
            self.degrees = pair(parse_list("degrees", v)?, "degrees")?;
        }
        if let Some(v) = kv.get("points_per_cloud")? {
            self.points_per_cloud = v;
        }
        if let Some(v) = kv.get("point_noise_sigma")? {
            self.point_noise_sigma = v;
        }
        if let Some(v) = kv.get("removal_fraction")? {
            self.removal_fraction = v;
        }
        if let Some(v) = kv.get("pad_rows")? {
            self.pad_rows = v;
        }
        if let Some(v) = kv.get("pad_cols")? {
            self.pad_cols = v;
        }
        if let Some(v) = kv.get("seed")? {
            self.seed = v;
        }
        Ok(self)
    }
}

fn pair<T: Copy>(v: Vec<T>, key: &str) -> Result<(T, T)> {
    match v.as_slice() {
        [a, b] => Ok((*a, *b)),
        _ => Err(Error::config(format!("key {key}: expected two values"))),
    }
}

pub fn parse_grid_sizes(value: &str) -> Result<Vec<(usize, usize)>> {
    value
        .split(',')
        .map(|s| {
            let s = s.trim();
            let (r, c) = s
                .split_once('x')
                .ok_or_else(|| Error::config(format!("grid size {s:?} is not RxC")))?;
            let parse = |t: &str| {
                t.parse::<usize>()
                    .map_err(|e| Error::config(format!("grid size {s:?}: {e}")))
            };
            Ok((parse(r)?, parse(c)?))
        })
        .collect()
}

/// Control grid zero-padded into an `I x J` matrix with a block mask.
#[derive(Clone, Debug, PartialEq)]
pub struct PaddedTarget {
    pad_rows: usize,
    pad_cols: usize,
    values: Vec<Point3>,
    mask: Vec<u8>,
}

impl PaddedTarget {
    pub fn pad_rows(&self) -> usize {
        self.pad_rows
    }

    pub fn pad_cols(&self) -> usize {
        self.pad_cols
    }

    pub fn values(&self) -> &[Point3] {
        &self.values
    }

    pub fn mask(&self) -> &[u8] {
        &self.mask
    }

    pub fn value(&self, i: usize, j: usize) -> Point3 {
        self.values[i * self.pad_cols + j]
    }

    pub fn is_real(&self, i: usize, j: usize) -> bool {
        self.mask[i * self.pad_cols + j] == 1
    }

    /// Shape of the masked block (leading rows and columns with mask 1).
    pub fn block_shape(&self) -> (usize, usize) {
        let rows = (0..self.pad_rows)
            .take_while(|&i| self.is_real(i, 0))
            .count();
        let cols = (0..self.pad_cols)
            .take_while(|&j| self.is_real(0, j))
            .count();
        (rows, cols)
    }

    pub fn crop(&self) -> Result<ControlGrid> {
        let (rows, cols) = self.block_shape();
        if rows == 0 || cols == 0 {
            return Err(Error::EmptyPrediction);
        }
        Ok(ControlGrid::from_fn(rows, cols, |i, j| self.value(i, j)))
    }

    /// Rebuild from raw arrays, checking the zero-padding and block invariants.
    pub fn from_parts(
        pad_rows: usize,
        pad_cols: usize,
        values: Vec<Point3>,
        mask: Vec<u8>,
    ) -> Result<Self> {
        if values.len() != pad_rows * pad_cols || mask.len() != pad_rows * pad_cols {
            return Err(Error::config("padded target arrays do not match I x J"));
        }
        let t = Self {
            pad_rows,
            pad_cols,
            values,
            mask,
        };
        let (rows, cols) = t.block_shape();
        for i in 0..pad_rows {
            for j in 0..pad_cols {
                let inside = i < rows && j < cols;
                if t.is_real(i, j) != inside || t.mask[i * pad_cols + j] > 1 {
                    return Err(Error::config("mask is not a contiguous top-left block"));
                }
                if !inside && t.value(i, j) != [0.0; 3] {
                    return Err(Error::config("nonzero value outside the mask"));
                }
            }
        }
        Ok(t)
    }
}

pub fn pad_target(grid: &ControlGrid, pad_rows: usize, pad_cols: usize) -> Result<PaddedTarget> {
    let (rows, cols) = grid.shape();
    if rows > pad_rows || cols > pad_cols {
        return Err(Error::config(format!(
            "grid {rows}x{cols} does not fit padding {pad_rows}x{pad_cols}"
        )));
    }
    let mut values = vec![[0.0; 3]; pad_rows * pad_cols];
    let mut mask = vec![0u8; pad_rows * pad_cols];
    for i in 0..rows {
        for j in 0..cols {
            values[i * pad_cols + j] = grid.get(i, j);
            mask[i * pad_cols + j] = 1;
        }
    }
    Ok(PaddedTarget {
        pad_rows,
        pad_cols,
        values,
        mask,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSample {
    pub sample_id: u64,
    /// Noisy, subsampled, shuffled cloud.
    pub cloud: PointCloud,
    /// Noise-free positions of the same surface parameters, aligned with `cloud`.
    pub clean_cloud: PointCloud,
    pub target: PaddedTarget,
    pub true_grid: (usize, usize),
    /// Surface parameters of each cloud point. Empty for samples read from disk.
    pub params: Vec<[f64; 2]>,
}

/// Uniform lattice over the unit square with Gaussian xy jitter and uniform z.
pub fn gen_control_grid(
    rows: usize,
    cols: usize,
    cfg: &GenConfig,
    rng: &mut impl Rng,
) -> Result<ControlGrid> {
    if rows < 2 || cols < 2 {
        return Err(Error::config(format!(
            "grid {rows}x{cols} needs at least 2x2"
        )));
    }
    let dx = 1.0 / (cols - 1) as f64;
    let dy = 1.0 / (rows - 1) as f64;
    let jitter_x = normal(cfg.cp_xy_jitter_sigma * dx)?;
    let jitter_y = normal(cfg.cp_xy_jitter_sigma * dy)?;
    let (zlo, zhi) = cfg.z_range;
    Ok(ControlGrid::from_fn(rows, cols, |i, j| {
        let x = j as f64 * dx + jitter_x.sample(rng);
        let y = i as f64 * dy + jitter_y.sample(rng);
        let z = if zhi > zlo {
            rng.random_range(zlo..zhi)
        } else {
            zlo
        };
        [x, y, z]
    }))
}

fn normal(sigma: f64) -> Result<Normal<f64>> {
    Normal::new(0.0, sigma).map_err(|e| Error::config(format!("bad sigma {sigma}: {e}")))
}

pub fn make_sample(
    rows: usize,
    cols: usize,
    cfg: &GenConfig,
    rng: &mut impl Rng,
    sample_id: u64,
) -> Result<DatasetSample> {
    let grid = gen_control_grid(rows, cols, cfg, rng)?;
    let (p, q) = cfg.degrees_for(rows, cols);
    let surface = BSplineSurface::open_uniform(grid.clone(), p, q)?;

    let n = cfg.points_per_cloud;
    let params: Vec<[f64; 2]> = (0..n)
        .map(|_| [rng.random::<f64>(), rng.random::<f64>()])
        .collect();
    let clean: Vec<Point3> = params.iter().map(|&[u, v]| surface.eval(u, v)).collect();
    let noise = normal(cfg.point_noise_sigma)?;
    let noisy: Vec<Point3> = clean
        .iter()
        .map(|p| {
            [
                p[0] + noise.sample(rng),
                p[1] + noise.sample(rng),
                p[2] + noise.sample(rng),
            ]
        })
        .collect();

    // Drop a random subset, then shuffle the survivors.
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.truncate(cfg.kept_points());
    order.shuffle(rng);

    Ok(DatasetSample {
        sample_id,
        cloud: PointCloud::new(order.iter().map(|&i| noisy[i]).collect())?,
        clean_cloud: PointCloud::new(order.iter().map(|&i| clean[i]).collect())?,
        target: pad_target(&grid, cfg.pad_rows, cfg.pad_cols)?,
        true_grid: (rows, cols),
        params: order.iter().map(|&i| params[i]).collect(),
    })
}

/// splitmix64 finalizer.
pub(crate) fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent RNG stream for one sample.
pub fn sample_rng(seed: u64, sample_id: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix64(mix64(seed) ^ sample_id))
}

/// Grid size and id of every sample the config describes, in id order.
pub fn sample_plan(cfg: &GenConfig) -> Vec<(u64, (usize, usize))> {
    cfg.grid_sizes
        .iter()
        .enumerate()
        .flat_map(|(s, &size)| {
            (0..cfg.samples_per_size).map(move |k| ((s * cfg.samples_per_size + k) as u64, size))
        })
        .collect()
}

/// Build every sample in memory.
pub fn generate_samples(cfg: &GenConfig) -> Result<Vec<DatasetSample>> {
    cfg.validate()?;
    sample_plan(cfg)
        .into_par_iter()
        .map(|(id, (r, c))| make_sample(r, c, cfg, &mut sample_rng(cfg.seed, id), id))
        .collect()
}

/// Write `manifest.txt` and one `sample_<id>.bsd` per sample under `dir`.
pub fn generate_dataset(cfg: &GenConfig, dir: &Path) -> Result<Vec<DatasetSample>> {
    let samples = generate_samples(cfg)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    samples
        .par_iter()
        .try_for_each(|s| write_sample(&dir.join(sample_file_name(s.sample_id)), s))?;
    write_manifest(cfg, dir)?;
    Ok(samples)
}

pub fn sample_file_name(id: u64) -> String {
    format!("sample_{id}.bsd")
}

pub fn write_manifest(cfg: &GenConfig, dir: &Path) -> Result<()> {
    let mut kv = cfg.to_kv();
    kv.set("format_version", 1);
    for &(r, c) in &cfg.grid_sizes {
        kv.set(&format!("count_{r}x{c}"), cfg.samples_per_size);
    }
    kv.set("total_samples", cfg.grid_sizes.len() * cfg.samples_per_size);
    let path = dir.join(MANIFEST_NAME);
    fs::write(&path, kv.to_text()).map_err(|e| Error::io(&path, e))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub config: GenConfig,
    pub counts: Vec<((usize, usize), usize)>,
}

/// Read and validate a manifest: known version, per-size counts balanced
/// and consistent with the sample files present.
pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_NAME);
    let kv = KeyValues::load(&path)?;
    let version: u32 = kv.require("format_version")?;
    if version != 1 {
        return Err(Error::format(
            &path,
            format!("unsupported format_version {version}"),
        ));
    }
    let config = GenConfig::default().apply_kv(&kv)?;
    config.validate()?;
    let mut counts = Vec::new();
    for &(r, c) in &config.grid_sizes {
        let n: usize = kv.require(&format!("count_{r}x{c}"))?;
        if n != config.samples_per_size {
            return Err(Error::format(
                &path,
                format!("count_{r}x{c}={n} differs from samples_per_size"),
            ));
        }
        counts.push(((r, c), n));
    }
    Ok(Manifest { config, counts })
}

/// Load every sample listed by the manifest, in id order.
pub fn load_dataset(dir: &Path) -> Result<(Manifest, Vec<DatasetSample>)> {
    let manifest = read_manifest(dir)?;
    let samples = sample_plan(&manifest.config)
        .into_par_iter()
        .map(|(id, size)| {
            let path = dir.join(sample_file_name(id));
            let s = read_sample(&path, id)?;
            if s.true_grid != size {
                return Err(Error::format(&path, "grid size disagrees with manifest"));
            }
            Ok(s)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, samples))
}

pub fn write_sample(path: &Path, s: &DatasetSample) -> Result<()> {
    let t = &s.target;
    let n = s.cloud.len();
    let mut buf = Vec::with_capacity(24 + n * 24 + t.values.len() * 13);
    buf.extend_from_slice(SAMPLE_MAGIC);
    buf.extend_from_slice(&SAMPLE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(n as u32).to_le_bytes());
    buf.extend_from_slice(&(t.pad_rows as u32).to_le_bytes());
    buf.extend_from_slice(&(t.pad_cols as u32).to_le_bytes());
    buf.extend_from_slice(&(s.true_grid.0 as u16).to_le_bytes());
    buf.extend_from_slice(&(s.true_grid.1 as u16).to_le_bytes());
    for p in s.cloud.points().iter().chain(s.clean_cloud.points()) {
        put_point(&mut buf, *p);
    }
    for p in &t.values {
        put_point(&mut buf, *p);
    }
    buf.extend_from_slice(&t.mask);
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

fn put_point(buf: &mut Vec<u8>, p: Point3) {
    for c in p {
        buf.extend_from_slice(&(c as f32).to_le_bytes());
    }
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.data.len() {
            return Err(Error::format(self.path, "truncated sample file"));
        }
        let out = &self.data[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn points(&mut self, n: usize) -> Result<Vec<Point3>> {
        let raw = self.take(n * 12)?;
        Ok(raw
            .chunks_exact(12)
            .map(|c| {
                let f =
                    |k: usize| f32::from_le_bytes(c[k * 4..k * 4 + 4].try_into().unwrap()) as f64;
                [f(0), f(1), f(2)]
            })
            .collect())
    }
}

pub fn read_sample(path: &Path, sample_id: u64) -> Result<DatasetSample> {
    let mut data = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut data))
        .map_err(|e| Error::io(path, e))?;
    let mut cur = Cursor {
        data: &data,
        pos: 0,
        path,
    };
    if cur.take(4)? != SAMPLE_MAGIC {
        return Err(Error::format(path, "bad magic"));
    }
    let version = cur.u32()?;
    if version != SAMPLE_VERSION {
        return Err(Error::format(
            path,
            format!("unsupported version {version}"),
        ));
    }
    let n = cur.u32()? as usize;
    let pad_rows = cur.u32()? as usize;
    let pad_cols = cur.u32()? as usize;
    let rows = cur.u16()? as usize;
    let cols = cur.u16()? as usize;
    let cloud = cur.points(n)?;
    let clean = cur.points(n)?;
    let values = cur.points(pad_rows * pad_cols)?;
    let mask = cur.take(pad_rows * pad_cols)?.to_vec();
    if cur.pos != data.len() {
        return Err(Error::format(path, "trailing bytes"));
    }
    let target = PaddedTarget::from_parts(pad_rows, pad_cols, values, mask)
        .map_err(|e| Error::format(path, e.to_string()))?;
    if target.block_shape() != (rows, cols) {
        return Err(Error::format(
            path,
            "mask block disagrees with header grid size",
        ));
    }
    Ok(DatasetSample {
        sample_id,
        cloud: PointCloud::new(cloud)?,
        clean_cloud: PointCloud::new(clean)?,
        target,
        true_grid: (rows, cols),
        params: Vec::new(),
    })
}

/// Summed value-noise heightfield on a `res x res` unit lattice, row-major.
///
/// Octave `o` uses a `2^(o+1)` cell lattice and amplitude `amplitude / 2^o`.
pub fn heightfield(res: usize, octaves: usize, amplitude: f64, rng: &mut impl Rng) -> Vec<f64> {
    let mut z = vec![0.0; res * res];
    for o in 0..octaves {
        let cells = 1usize << (o + 1);
        let lattice: Vec<f64> = (0..(cells + 1) * (cells + 1))
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let amp = amplitude / (1u64 << o) as f64;
        let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
        for i in 0..res {
            for j in 0..res {
                let y = i as f64 / (res - 1) as f64 * cells as f64;
                let x = j as f64 / (res - 1) as f64 * cells as f64;
                let (iy, ix) = ((y as usize).min(cells - 1), (x as usize).min(cells - 1));
                let (ty, tx) = (smooth(y - iy as f64), smooth(x - ix as f64));
                let at = |a: usize, b: usize| lattice[a * (cells + 1) + b];
                let top = at(iy, ix) * (1.0 - tx) + at(iy, ix + 1) * tx;
                let bottom = at(iy + 1, ix) * (1.0 - tx) + at(iy + 1, ix + 1) * tx;
                z[i * res + j] += amp * (top * (1.0 - ty) + bottom * ty);
            }
        }
    }
    z
}

/// Out-of-distribution test cloud: jittered, shuffled value-noise heightfield
/// over the unit square.
pub fn random_heightfield_cloud(
    res: usize,
    octaves: usize,
    amplitude: f64,
    noise_sigma: f64,
    seed: u64,
) -> Result<PointCloud> {
    if res < 8 {
        return Err(Error::config(format!("heightfield resolution {res} < 8")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = heightfield(res, octaves, amplitude, &mut rng);
    let noise = normal(noise_sigma)?;
    let mut points: Vec<Point3> = (0..res * res)
        .map(|k| {
            let (i, j) = (k / res, k % res);
            [
                j as f64 / (res - 1) as f64 + noise.sample(&mut rng),
                i as f64 / (res - 1) as f64 + noise.sample(&mut rng),
                z[k] + noise.sample(&mut rng),
            ]
        })
        .collect();
    points.shuffle(&mut rng);
    PointCloud::new(points)
}

pub fn default_dataset_dir() -> PathBuf {
    PathBuf::from("dataset")
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn small_cfg() -> GenConfig {
        GenConfig {
            samples_per_size: 4,
            points_per_cloud: 200,
            ..GenConfig::desk_scale()
        }
    }

    #[test]
    fn zero_jitter_gives_exact_lattice() {
        let cfg = GenConfig {
            cp_xy_jitter_sigma: 0.0,
            ..small_cfg()
        };
        let g = gen_control_grid(5, 6, &cfg, &mut sample_rng(1, 0)).unwrap();
        assert_eq!(g.shape(), (5, 6));
        for i in 0..5 {
            for j in 1..5 {
                let d0 = g.get(i, j)[0] - g.get(i, j - 1)[0];
                let d1 = g.get(i, j + 1)[0] - g.get(i, j)[0];
                assert_abs_diff_eq!(d0, d1, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn z_statistics_match_uniform_range() {
        // Uniform(-0.15, 0.15): mean 0, std 0.3 / sqrt(12).
        let cfg = small_cfg();
        let mut rng = sample_rng(9, 0);
        let mut zs = Vec::new();
        while zs.len() < 10_000 {
            let g = gen_control_grid(5, 6, &cfg, &mut rng).unwrap();
            zs.extend(g.points().iter().map(|p| p[2]));
        }
        assert!(zs.iter().all(|&z| (-0.15..0.15).contains(&z)));
        let mean = zs.iter().sum::<f64>() / zs.len() as f64;
        let se = 0.3 / 12f64.sqrt() / (zs.len() as f64).sqrt();
        assert!(mean.abs() < 3.0 * se, "mean {mean} vs 3se {}", 3.0 * se);
    }

    #[test]
    fn noise_free_points_lie_on_surface() {
        let cfg = GenConfig {
            point_noise_sigma: 0.0,
            removal_fraction: 0.0,
            ..small_cfg()
        };
        let s = make_sample(5, 6, &cfg, &mut sample_rng(3, 1), 1).unwrap();
        let grid = s.target.crop().unwrap();
        let (p, q) = cfg.degrees_for(5, 6);
        let surf = BSplineSurface::open_uniform(grid, p, q).unwrap();
        for (pt, &[u, v]) in s.cloud.points().iter().zip(&s.params) {
            let e = surf.eval(u, v);
            for d in 0..3 {
                assert_abs_diff_eq!(pt[d], e[d], epsilon = 1e-12);
            }
        }
        assert_eq!(s.cloud, s.clean_cloud);
    }

    #[test]
    fn removal_count_and_subset() {
        let cfg = small_cfg();
        let s = make_sample(3, 4, &cfg, &mut sample_rng(4, 2), 2).unwrap();
        assert_eq!(s.cloud.len(), (200.0f64 * 0.9).round() as usize);
        assert_eq!(s.target.block_shape(), (3, 4));

        // Same draws without shuffling/removal give the superset.
        let full_cfg = GenConfig {
            removal_fraction: 0.0,
            ..cfg.clone()
        };
        let full = make_sample(3, 4, &full_cfg, &mut sample_rng(4, 2), 2).unwrap();
        let key = |p: &Point3| p.map(f64::to_bits);
        let mut pool: Vec<_> = full.clean_cloud.points().iter().map(key).collect();
        pool.sort();
        for p in s.clean_cloud.points() {
            assert!(pool.binary_search(&key(p)).is_ok());
        }
    }

    #[test]
    fn pad_examples() {
        let g = ControlGrid::from_fn(3, 4, |i, j| [i as f64 + 1.0, j as f64 + 1.0, 1.0]);
        let t = pad_target(&g, 8, 8).unwrap();
        assert_eq!(t.mask().iter().map(|&m| m as usize).sum::<usize>(), 12);
        for i in 0..8 {
            for j in 0..8 {
                if i >= 3 || j >= 4 {
                    assert_eq!(t.value(i, j), [0.0; 3]);
                }
            }
        }
        assert_eq!(t.crop().unwrap(), g);

        let tight = pad_target(&g, 3, 4).unwrap();
        assert!(tight.mask().iter().all(|&m| m == 1));
        assert_eq!(tight.values(), g.points());

        assert!(matches!(pad_target(&g, 2, 8), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn sample_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_cfg();
        let s = make_sample(5, 6, &cfg, &mut sample_rng(5, 3), 3).unwrap();
        let path = dir.path().join("s.bsd");
        write_sample(&path, &s).unwrap();
        let back = read_sample(&path, 3).unwrap();
        assert_eq!(back.true_grid, (5, 6));
        assert_eq!(back.cloud.len(), s.cloud.len());
        for (a, b) in back.cloud.points().iter().zip(s.cloud.points()) {
            for d in 0..3 {
                assert_eq!(a[d], b[d] as f32 as f64);
            }
        }
        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"BSDS");
        assert_eq!(bytes.len(), 24 + s.cloud.len() * 24 + 64 * 12 + 64);

        fs::write(&path, &bytes[..bytes.len() - 1]).unwrap();
        assert!(matches!(read_sample(&path, 3), Err(Error::Format { .. })));
    }

    #[test]
    fn dataset_is_reproducible_and_balanced() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let cfg = GenConfig {
            grid_sizes: vec![(3, 4), (5, 6), (3, 6)],
            samples_per_size: 3,
            points_per_cloud: 100,
            seed: 42,
            ..GenConfig::desk_scale()
        };
        generate_dataset(&cfg, a.path()).unwrap();
        generate_dataset(&cfg, b.path()).unwrap();
        let mut names: Vec<_> = fs::read_dir(a.path())
            .unwrap()
            .map(|e| e.unwrap().file_name())
            .collect();
        names.sort();
        assert_eq!(names.len(), 10);
        for n in &names {
            assert_eq!(
                fs::read(a.path().join(n)).unwrap(),
                fs::read(b.path().join(n)).unwrap()
            );
        }
        let (m, samples) = load_dataset(a.path()).unwrap();
        assert_eq!(m.config, cfg);
        assert_eq!(m.counts, vec![((3, 4), 3), ((5, 6), 3), ((3, 6), 3)]);
        assert_eq!(samples.len(), 9);
    }

    #[test]
    fn invalid_configs_rejected() {
        let too_big = GenConfig {
            grid_sizes: vec![(9, 4)],
            ..small_cfg()
        };
        assert!(too_big.validate().is_err());
        let bad_removal = GenConfig {
            removal_fraction: 1.0,
            ..small_cfg()
        };
        assert!(bad_removal.validate().is_err());
    }

    #[test]
    fn heightfield_examples() {
        let flat = random_heightfield_cloud(16, 3, 0.0, 0.0, 1).unwrap();
        assert!(flat.points().iter().all(|p| p[2] == 0.0));
        assert_eq!(
            random_heightfield_cloud(16, 3, 0.2, 0.01, 5).unwrap(),
            random_heightfield_cloud(16, 3, 0.2, 0.01, 5).unwrap()
        );
        assert!(random_heightfield_cloud(4, 1, 0.1, 0.0, 0).is_err());

        let roughness = |octaves: usize| {
            let res = 64;
            let mut total = 0.0;
            for seed in 0..8 {
                let z = heightfield(res, octaves, 0.2, &mut ChaCha8Rng::seed_from_u64(seed));
                for i in 1..res - 1 {
                    for j in 1..res - 1 {
                        let c = z[i * res + j];
                        let lap = z[(i - 1) * res + j]
                            + z[(i + 1) * res + j]
                            + z[i * res + j - 1]
                            + z[i * res + j + 1]
                            - 4.0 * c;
                        total += lap.abs();
                    }
                }
            }
            total
        };
        assert!(roughness(4) > roughness(1));
    }
}
