//! File formats, reconstruction, mesh export and evaluation reports.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::bsa::{fit_cloud, FitConfig};
use crate::config::{join_list, parse_list, KeyValues};
use crate::dataset::{load_dataset, mix64, parse_grid_sizes, DatasetSample};
use crate::geom::{cross, sub, Point3};
use crate::metrics::{
    dcd, emd, nc_error, pca_normals, MetricsReport, SampleMetrics, DEFAULT_DCD_ALPHA,
    DEFAULT_EMD_EVAL_SIZE, DEFAULT_NORMAL_K,
};
use crate::model::{
    extract_cp_grid, forward, load_checkpoint, ArchConfig, ModelParams, UnitCube, DEFAULT_EPSILON,
};
use crate::spline::{clamp_degree, lattice_params, BSplineSurface, ControlGrid, PointCloud};
use crate::train::is_validation;
use crate::{Error, Result};

pub const DEFAULT_SAMPLE_RES: usize = 64;

/// Parses whitespace-separated `x y z` lines.
pub fn parse_xyz(text: &str, path: &Path) -> Result<PointCloud> {
    let mut points = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            msg,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(err(format!(
                "expected 3 coordinates, found {}",
                fields.len()
            )));
        }
        let mut p = [0.0; 3];
        for (d, f) in fields.iter().enumerate() {
            p[d] = f
                .parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| err(format!("invalid number {f:?}")))?;
        }
        points.push(p);
    }
    PointCloud::new(points)
}

pub fn load_xyz(path: &Path) -> Result<PointCloud> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_xyz(&text, path)
}

/// Shortest plain decimal of `x` rounded to 9 significant digits.
fn decimal9(x: f64) -> String {
    let rounded: f64 = format!("{x:.8e}").parse().unwrap();
    // Display never uses exponent notation.
    format!("{}", rounded + 0.0)
}

pub fn format_xyz(cloud: &PointCloud) -> String {
    let mut out = String::with_capacity(cloud.len() * 36);
    for p in cloud.points() {
        writeln!(
            out,
            "{} {} {}",
            decimal9(p[0]),
            decimal9(p[1]),
            decimal9(p[2])
        )
        .unwrap();
    }
    out
}

pub fn save_xyz(cloud: &PointCloud, path: &Path) -> Result<()> {
    fs::write(path, format_xyz(cloud)).map_err(|e| Error::io(path, e))
}

/// 64-bit FNV-1a digest, used to identify checkpoints.
fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

/// A loaded network with an identifier derived from its checkpoint bytes.
#[derive(Clone, Debug)]
pub struct Model {
    pub arch: ArchConfig,
    pub params: ModelParams,
    pub id: String,
}

impl Model {
    pub fn load(path: &Path) -> Result<Self> {
        let (arch, params) = load_checkpoint(path)?;
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            arch,
            params,
            id: format!("{:016x}", fnv1a(&bytes)),
        })
    }

    pub fn new(arch: ArchConfig, params: ModelParams, id: impl Into<String>) -> Self {
        Self {
            arch,
            params,
            id: id.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Provenance {
    pub checkpoint_id: String,
    pub input: String,
}

#[derive(Clone, Debug)]
pub struct ReconstructionResult {
    pub surface: BSplineSurface,
    pub predicted_grid: (usize, usize),
    pub sample_res: usize,
    /// `sample_res x sample_res` lattice on the surface, row-major in `u`.
    pub dense_sample: PointCloud,
    pub provenance: Provenance,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReconstructConfig {
    pub sample_res: usize,
    /// Extraction threshold in unit-cube coordinates.
    pub epsilon: f64,
}

impl Default for ReconstructConfig {
    fn default() -> Self {
        Self {
            sample_res: DEFAULT_SAMPLE_RES,
            epsilon: DEFAULT_EPSILON,
        }
    }
}

impl ReconstructConfig {
    pub const KEYS: &'static [&'static str] = &["sample_res", "epsilon"];

    pub fn apply_kv(mut self, kv: &KeyValues) -> Result<Self> {
        if let Some(v) = kv.get("sample_res")? {
            self.sample_res = v;
        }
        if let Some(v) = kv.get("epsilon")? {
            self.epsilon = v;
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_res < 2 {
            return Err(Error::config("sample_res must be at least 2"));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::config("epsilon must be positive"));
        }
        Ok(())
    }
}

/// Samples the `res x res` parameter lattice of `surface`.
pub fn dense_lattice(surface: &BSplineSurface, res: usize) -> PointCloud {
    let pts = lattice_params(res)
        .into_iter()
        .map(|[u, v]| surface.eval(u, v))
        .collect();
    PointCloud::new(pts).expect("surface points are finite")
}

/// Control grid predicted for `cloud`, in the cloud's own frame.
pub fn predict_grid(cloud: &PointCloud, model: &Model, epsilon: f64) -> Result<ControlGrid> {
    let frame = UnitCube::fit(cloud);
    let normalized = cloud.map(|p| frame.apply(p));
    let pred = forward(&model.params, &model.arch, &normalized)?;
    Ok(extract_cp_grid(&pred, epsilon)?.map(|p| frame.invert(p)))
}

fn surface_from_grid(grid: ControlGrid, arch: &ArchConfig) -> Result<BSplineSurface> {
    if grid.rows() < 2 || grid.cols() < 2 {
        return Err(Error::DegenerateGrid {
            rows: grid.rows(),
            cols: grid.cols(),
        });
    }
    let (p, q) = arch.spline_degrees;
    let (p, q) = (clamp_degree(p, grid.rows()), clamp_degree(q, grid.cols()));
    BSplineSurface::open_uniform(grid, p, q)
}

pub fn reconstruct(
    cloud: &PointCloud,
    model: &Model,
    cfg: &ReconstructConfig,
    input: &str,
) -> Result<ReconstructionResult> {
    cfg.validate()?;
    let grid = predict_grid(cloud, model, cfg.epsilon)?;
    let predicted_grid = grid.shape();
    let surface = surface_from_grid(grid, &model.arch)?;
    let dense_sample = dense_lattice(&surface, cfg.sample_res);
    Ok(ReconstructionResult {
        surface,
        predicted_grid,
        sample_res: cfg.sample_res,
        dense_sample,
        provenance: Provenance {
            checkpoint_id: model.id.clone(),
            input: input.to_string(),
        },
    })
}

/// OBJ text for a `res x res` vertex lattice, two triangles per cell.
///
/// Winding is chosen so that faces point towards +z on average.
pub fn lattice_obj(vertices: &[Point3], res: usize, header: &str) -> Result<String> {
    if res < 2 || vertices.len() != res * res {
        return Err(Error::config(
            "OBJ export needs a res x res lattice with res >= 2",
        ));
    }
    let idx = |i: usize, j: usize| i * res + j;
    let mut facing = 0.0;
    for i in 0..res - 1 {
        for j in 0..res - 1 {
            let a = vertices[idx(i, j)];
            let b = vertices[idx(i, j + 1)];
            let c = vertices[idx(i + 1, j + 1)];
            facing += cross(sub(b, a), sub(c, a))[2];
        }
    }
    let flip = facing < 0.0;
    let mut out = String::new();
    for line in header.lines() {
        writeln!(out, "# {line}").unwrap();
    }
    for v in vertices {
        writeln!(
            out,
            "v {} {} {}",
            decimal9(v[0]),
            decimal9(v[1]),
            decimal9(v[2])
        )
        .unwrap();
    }
    for i in 0..res - 1 {
        for j in 0..res - 1 {
            let (a, b, c, d) = (
                idx(i, j) + 1,
                idx(i, j + 1) + 1,
                idx(i + 1, j + 1) + 1,
                idx(i + 1, j) + 1,
            );
            if flip {
                writeln!(out, "f {a} {c} {b}\nf {a} {d} {c}").unwrap();
            } else {
                writeln!(out, "f {a} {b} {c}\nf {a} {c} {d}").unwrap();
            }
        }
    }
    Ok(out)
}

fn result_header(result: &ReconstructionResult) -> String {
    let (r, c) = result.predicted_grid;
    format!(
        "control grid {r}x{c}\ncheckpoint {}\ninput {}",
        result.provenance.checkpoint_id, result.provenance.input
    )
}

pub fn export_obj(result: &ReconstructionResult, path: &Path) -> Result<()> {
    let text = lattice_obj(
        result.dense_sample.points(),
        result.sample_res,
        &result_header(result),
    )?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Parsed OBJ: vertices and 1-based triangle indices.
pub type ObjMesh = (Vec<Point3>, Vec<[usize; 3]>);

/// Reads the `v` and `f` records of an OBJ file written by [`lattice_obj`].
pub fn parse_obj(text: &str, path: &Path) -> Result<ObjMesh> {
    let mut verts = Vec::new();
    let mut faces = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let err = |msg: &str| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            msg: msg.to_string(),
        };
        let mut it = line.split_whitespace();
        match it.next() {
            Some("v") => {
                let c: Vec<f64> = it
                    .map(|s| s.parse().map_err(|_| err("bad vertex coordinate")))
                    .collect::<Result<_>>()?;
                if c.len() != 3 {
                    return Err(err("vertex needs 3 coordinates"));
                }
                verts.push([c[0], c[1], c[2]]);
            }
            Some("f") => {
                let f: Vec<usize> = it
                    .map(|s| s.parse().map_err(|_| err("bad face index")))
                    .collect::<Result<_>>()?;
                if f.len() != 3 {
                    return Err(err("face needs 3 indices"));
                }
                faces.push([f[0], f[1], f[2]]);
            }
            _ => {}
        }
    }
    Ok((verts, faces))
}

#[derive(Clone, Debug, PartialEq)]
pub struct BsaRunConfig {
    pub cp_grid: (usize, usize),
    pub degrees: (usize, usize),
    pub regularization: f64,
    pub sample_res: usize,
}

impl Default for BsaRunConfig {
    fn default() -> Self {
        let fit = FitConfig::new(5, 6);
        Self {
            cp_grid: fit.cp_grid,
            degrees: fit.degrees,
            regularization: fit.regularization,
            sample_res: DEFAULT_SAMPLE_RES,
        }
    }
}

impl BsaRunConfig {
    pub const KEYS: &'static [&'static str] =
        &["cp_grid", "degrees", "regularization", "sample_res"];

    pub fn fit_config(&self) -> FitConfig {
        FitConfig {
            degrees: self.degrees,
            cp_grid: self.cp_grid,
            regularization: self.regularization,
        }
    }

    pub fn apply_kv(mut self, kv: &KeyValues) -> Result<Self> {
        if let Some(v) = kv.get_str("cp_grid") {
            let g = parse_grid_sizes(v)?;
            if g.len() != 1 {
                return Err(Error::config("cp_grid expects one RxC size"));
            }
            self.cp_grid = g[0];
        }
        if let Some(v) = kv.get_str("degrees") {
            let d: Vec<usize> = parse_list("degrees", v)?;
            if d.len() != 2 || d.contains(&0) {
                return Err(Error::config("degrees expects two positive values"));
            }
            self.degrees = (d[0], d[1]);
        }
        if let Some(v) = kv.get("regularization")? {
            self.regularization = v;
        }
        if let Some(v) = kv.get("sample_res")? {
            self.sample_res = v;
        }
        if self.sample_res < 2 {
            return Err(Error::config("sample_res must be at least 2"));
        }
        Ok(self)
    }
}

/// Baseline fit of `cloud` and its dense lattice sample.
pub fn run_bsa(cloud: &PointCloud, cfg: &BsaRunConfig) -> Result<(BSplineSurface, PointCloud)> {
    let surface = fit_cloud(cloud, &cfg.fit_config())?;
    let dense = dense_lattice(&surface, cfg.sample_res);
    Ok((surface, dense))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalSplit {
    Validation,
    All,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub sample_res: usize,
    pub eval_size: usize,
    pub dcd_alpha: f64,
    pub normal_k: usize,
    pub epsilon: f64,
    /// Fixed grids of the baseline, each applied to every sample.
    pub bsa_grids: Vec<(usize, usize)>,
    pub bsa_regularization: f64,
    pub split: EvalSplit,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            sample_res: DEFAULT_SAMPLE_RES,
            eval_size: DEFAULT_EMD_EVAL_SIZE,
            dcd_alpha: DEFAULT_DCD_ALPHA,
            normal_k: DEFAULT_NORMAL_K,
            epsilon: DEFAULT_EPSILON,
            bsa_grids: vec![(3, 4), (5, 6)],
            bsa_regularization: FitConfig::new(3, 3).regularization,
            split: EvalSplit::Validation,
            seed: 0,
        }
    }
}

impl EvalConfig {
    pub const KEYS: &'static [&'static str] = &[
        "sample_res",
        "eval_size",
        "dcd_alpha",
        "normal_k",
        "epsilon",
        "bsa_grids",
        "bsa_regularization",
        "split",
        "seed",
    ];

    pub fn apply_kv(mut self, kv: &KeyValues) -> Result<Self> {
        if let Some(v) = kv.get("sample_res")? {
            self.sample_res = v;
        }
        if let Some(v) = kv.get("eval_size")? {
            self.eval_size = v;
        }
        if let Some(v) = kv.get("dcd_alpha")? {
            self.dcd_alpha = v;
        }
        if let Some(v) = kv.get("normal_k")? {
            self.normal_k = v;
        }
        if let Some(v) = kv.get("epsilon")? {
            self.epsilon = v;
        }
        if let Some(v) = kv.get_str("bsa_grids") {
            self.bsa_grids = parse_grid_sizes(v)?;
        }
        if let Some(v) = kv.get("bsa_regularization")? {
            self.bsa_regularization = v;
        }
        if let Some(v) = kv.get_str("split") {
            self.split = match v {
                "validation" => EvalSplit::Validation,
                "all" => EvalSplit::All,
                other => {
                    return Err(Error::config(format!(
                        "split must be validation or all, got {other:?}"
                    )))
                }
            };
        }
        if let Some(v) = kv.get("seed")? {
            self.seed = v;
        }
        self.validate()?;
        Ok(self)
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("sample_res", self.sample_res);
        kv.set("eval_size", self.eval_size);
        kv.set("dcd_alpha", self.dcd_alpha);
        kv.set("normal_k", self.normal_k);
        kv.set("epsilon", self.epsilon);
        let grids: Vec<String> = self
            .bsa_grids
            .iter()
            .map(|(r, c)| format!("{r}x{c}"))
            .collect();
        kv.set("bsa_grids", join_list(&grids));
        kv.set("bsa_regularization", self.bsa_regularization);
        kv.set(
            "split",
            match self.split {
                EvalSplit::Validation => "validation",
                EvalSplit::All => "all",
            },
        );
        kv.set("seed", self.seed);
        kv
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_res < 2 || self.eval_size == 0 || self.normal_k < 3 {
            return Err(Error::config(
                "sample_res >= 2, eval_size >= 1 and normal_k >= 3 are required",
            ));
        }
        if !(self.epsilon > 0.0 && self.dcd_alpha > 0.0 && self.bsa_regularization >= 0.0) {
            return Err(Error::config("epsilon and dcd_alpha must be positive"));
        }
        Ok(())
    }

    fn bsa_run(&self, grid: (usize, usize)) -> BsaRunConfig {
        BsaRunConfig {
            cp_grid: grid,
            degrees: FitConfig::new(grid.0, grid.1).degrees,
            regularization: self.bsa_regularization,
            sample_res: self.sample_res,
        }
    }
}

/// EMD, NC and DCD of `recon` against the clean reference.
pub fn compare_clouds(
    sample_id: u64,
    recon: &PointCloud,
    clean: &PointCloud,
    clean_normals: &[Point3],
    cfg: &EvalConfig,
) -> Result<SampleMetrics> {
    let normals = pca_normals(recon, cfg.normal_k)?;
    Ok(SampleMetrics {
        sample_id,
        emd: emd(recon, clean, cfg.eval_size, mix64(cfg.seed ^ sample_id)),
        nc: nc_error(recon, &normals, clean, clean_normals),
        dcd: dcd(recon, clean, cfg.dcd_alpha),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MethodReport {
    /// File stem, e.g. `ours` or `bsa_5x6`.
    pub key: String,
    /// Row label of the summary table.
    pub label: String,
    pub report: MetricsReport,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridOutcome {
    pub sample_id: u64,
    pub truth: (usize, usize),
    pub predicted: (usize, usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    /// Baselines in configured order, then the network. The network row
    /// omits samples whose prediction yields no surface.
    pub methods: Vec<MethodReport>,
    /// The noisy input itself compared against the clean cloud.
    pub input: MetricsReport,
    pub grids: Vec<GridOutcome>,
}

impl Evaluation {
    pub fn method(&self, key: &str) -> Option<&MetricsReport> {
        self.methods
            .iter()
            .find(|m| m.key == key)
            .map(|m| &m.report)
    }

    /// Samples whose predicted grid is empty or thinner than 2x2.
    pub fn failed_reconstructions(&self) -> usize {
        self.grids.len() - self.method("ours").map_or(0, MetricsReport::count)
    }

    pub fn grid_accuracy(&self) -> f64 {
        let hits = self.grids.iter().filter(|g| g.truth == g.predicted).count();
        hits as f64 / self.grids.len() as f64
    }

    /// Rows per method with DCD, NC and EMD columns, in units of 1e-2.
    pub fn summary_table(&self) -> String {
        let mut out = String::from("method      DCD     NC      EMD     (x1e-2)\n");
        for m in &self.methods {
            writeln!(
                out,
                "{:<10}  {:<6.2}  {:<6.2}  {:<6.2}",
                m.label,
                100.0 * m.report.mean_dcd(),
                100.0 * m.report.mean_nc(),
                100.0 * m.report.mean_emd()
            )
            .unwrap();
        }
        let failed = self.failed_reconstructions();
        if failed > 0 {
            writeln!(
                out,
                "{failed} of {} network reconstructions failed",
                self.grids.len()
            )
            .unwrap();
        }
        out
    }

    pub fn summary_csv(&self) -> String {
        let mut out = String::from("method,dcd,nc,emd\n");
        for m in &self.methods {
            writeln!(
                out,
                "{},{:e},{:e},{:e}",
                m.key,
                m.report.mean_dcd(),
                m.report.mean_nc(),
                m.report.mean_emd()
            )
            .unwrap();
        }
        out
    }

    pub fn grids_csv(&self) -> String {
        let mut out = String::from("sample_id,true_rows,true_cols,pred_rows,pred_cols\n");
        for g in &self.grids {
            writeln!(
                out,
                "{},{},{},{},{}",
                g.sample_id, g.truth.0, g.truth.1, g.predicted.0, g.predicted.1
            )
            .unwrap();
        }
        out
    }

    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut written = Vec::new();
        for m in &self.methods {
            let p = dir.join(format!("{}.csv", m.key));
            m.report.write_csv(&p)?;
            written.push(p);
        }
        let p = dir.join("input.csv");
        self.input.write_csv(&p)?;
        written.push(p);
        for (name, text) in [
            ("summary.csv", self.summary_csv()),
            ("summary.txt", self.summary_table()),
            ("grids.csv", self.grids_csv()),
        ] {
            let p = dir.join(name);
            fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
            written.push(p);
        }
        Ok(written)
    }
}

struct SampleEval {
    baselines: Vec<SampleMetrics>,
    ours: Option<SampleMetrics>,
    input: SampleMetrics,
    grid: GridOutcome,
}

fn evaluate_sample(s: &DatasetSample, model: &Model, cfg: &EvalConfig) -> Result<SampleEval> {
    let clean_normals = pca_normals(&s.clean_cloud, cfg.normal_k)?;
    let compare = |cloud: &PointCloud| {
        compare_clouds(s.sample_id, cloud, &s.clean_cloud, &clean_normals, cfg)
    };
    let baselines = cfg
        .bsa_grids
        .iter()
        .map(|&g| compare(&run_bsa(&s.cloud, &cfg.bsa_run(g))?.1))
        .collect::<Result<Vec<_>>>()?;
    let (predicted, ours) = match predict_grid(&s.cloud, model, cfg.epsilon) {
        Ok(grid) => {
            let shape = grid.shape();
            match surface_from_grid(grid, &model.arch) {
                Ok(surface) => (
                    shape,
                    Some(compare(&dense_lattice(&surface, cfg.sample_res))?),
                ),
                Err(Error::DegenerateGrid { .. }) => (shape, None),
                Err(e) => return Err(e),
            }
        }
        Err(Error::EmptyPrediction) => ((0, 0), None),
        Err(e) => return Err(e),
    };
    Ok(SampleEval {
        baselines,
        ours,
        input: compare(&s.cloud)?,
        grid: GridOutcome {
            sample_id: s.sample_id,
            truth: s.true_grid,
            predicted,
        },
    })
}

/// Scores the network and each fixed-grid baseline on `samples` (filtered by
/// the configured split) against the stored clean clouds.
pub fn evaluate_samples(
    samples: &[DatasetSample],
    model: &Model,
    cfg: &EvalConfig,
) -> Result<Evaluation> {
    cfg.validate()?;
    let chosen: Vec<&DatasetSample> = samples
        .iter()
        .filter(|s| cfg.split == EvalSplit::All || is_validation(s.sample_id))
        .collect();
    if chosen.is_empty() {
        return Err(Error::config("no samples in the evaluation split"));
    }
    let per_sample = chosen
        .par_iter()
        .map(|s| evaluate_sample(s, model, cfg))
        .collect::<Result<Vec<_>>>()?;
    let mut methods: Vec<MethodReport> = cfg
        .bsa_grids
        .iter()
        .enumerate()
        .map(|(i, &(r, c))| MethodReport {
            key: format!("bsa_{r}x{c}"),
            label: format!("BS {r}x{c}"),
            report: MetricsReport::new(per_sample.iter().map(|e| e.baselines[i].clone()).collect()),
        })
        .collect();
    methods.push(MethodReport {
        key: "ours".into(),
        label: "Ours".into(),
        report: MetricsReport::new(per_sample.iter().filter_map(|e| e.ours.clone()).collect()),
    });
    Ok(Evaluation {
        methods,
        input: MetricsReport::new(per_sample.iter().map(|e| e.input.clone()).collect()),
        grids: per_sample.into_iter().map(|e| e.grid).collect(),
    })
}

/// Loads the dataset and checkpoint, evaluates, and writes every report into
/// `out_dir`.
pub fn evaluate(
    dataset_dir: &Path,
    checkpoint: &Path,
    cfg: &EvalConfig,
    out_dir: &Path,
) -> Result<Evaluation> {
    if !checkpoint.is_file() {
        return Err(Error::config(format!(
            "checkpoint {} does not exist",
            checkpoint.display()
        )));
    }
    let model = Model::load(checkpoint)?;
    let (_, samples) = load_dataset(dataset_dir)?;
    let eval = evaluate_samples(&samples, &model, cfg)?;
    eval.write(out_dir)?;
    Ok(eval)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_cloud(n: usize, seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PointCloud::new(
            (0..n)
                .map(|_| {
                    [
                        rng.random_range(-10.0..10.0),
                        rng.random_range(-1e-3..1e-3),
                        rng.random_range(-1e5..1e5),
                    ]
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn xyz_round_trip_keeps_nine_digits() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let unit = PointCloud::new(
            (0..1000)
                .map(|_| {
                    [
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                    ]
                })
                .collect(),
        )
        .unwrap();
        let text = format_xyz(&unit);
        assert!(!text.contains('e') && !text.contains(','));
        assert!(text.ends_with('\n'));
        let back = parse_xyz(&text, Path::new("mem")).unwrap();
        for (a, b) in unit.points().iter().zip(back.points()) {
            for d in 0..3 {
                assert!((a[d] - b[d]).abs() <= 1e-9);
            }
        }
        let wide = random_cloud(1000, 2);
        let back = parse_xyz(&format_xyz(&wide), Path::new("mem")).unwrap();
        for (a, b) in wide.points().iter().zip(back.points()) {
            for d in 0..3 {
                assert!((a[d] - b[d]).abs() <= 5.000001e-9 * a[d].abs());
            }
        }
        let exact = PointCloud::new(vec![[0.1, -2.5, 123456.789]]).unwrap();
        assert_eq!(
            parse_xyz(&format_xyz(&exact), Path::new("m")).unwrap(),
            exact
        );
    }

    #[test]
    fn xyz_errors() {
        assert!(matches!(
            parse_xyz("", Path::new("e")),
            Err(Error::EmptyCloud)
        ));
        match parse_xyz("1.0 2.0\n", Path::new("e")) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("unexpected {other:?}"),
        }
        match parse_xyz("1 2 3\n4 5 x\n", Path::new("e")) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    fn plane_lattice(res: usize, upward: bool) -> Vec<Point3> {
        lattice_params(res)
            .into_iter()
            .map(|[u, v]| {
                if upward {
                    [v, u, 0.1 * u]
                } else {
                    [u, v, 0.1 * u]
                }
            })
            .collect()
    }

    #[test]
    fn obj_counts_and_orientation() {
        for res in [2, 3, 7] {
            for upward in [true, false] {
                let text = lattice_obj(&plane_lattice(res, upward), res, "t").unwrap();
                let (v, f) = parse_obj(&text, Path::new("m")).unwrap();
                assert_eq!(v.len(), res * res);
                assert_eq!(f.len(), 2 * (res - 1) * (res - 1));
                for tri in &f {
                    assert!(tri.iter().all(|&i| (1..=v.len()).contains(&i)));
                    let [a, b, c] = tri.map(|i| v[i - 1]);
                    assert!(
                        cross(sub(b, a), sub(c, a))[2] > 0.0,
                        "face not counter-clockwise"
                    );
                }
            }
        }
    }

    #[test]
    fn obj_interior_edges_are_shared_twice() {
        let res = 6;
        let text = lattice_obj(&plane_lattice(res, true), res, "").unwrap();
        let (_, faces) = parse_obj(&text, Path::new("m")).unwrap();
        let mut count = std::collections::BTreeMap::new();
        for f in &faces {
            for k in 0..3 {
                let (a, b) = (f[k], f[(k + 1) % 3]);
                *count.entry((a.min(b), a.max(b))).or_insert(0) += 1;
            }
        }
        let boundary = |i: usize| {
            let (r, c) = ((i - 1) / res, (i - 1) % res);
            r == 0 || c == 0 || r == res - 1 || c == res - 1
        };
        for (&(a, b), &n) in &count {
            let on_boundary = boundary(a) && boundary(b) && {
                let (ra, ca, rb, cb) = ((a - 1) / res, (a - 1) % res, (b - 1) / res, (b - 1) % res);
                (ra == rb && (ra == 0 || ra == res - 1)) || (ca == cb && (ca == 0 || ca == res - 1))
            };
            assert_eq!(n, if on_boundary { 1 } else { 2 }, "edge {a}-{b}");
        }
    }

    #[test]
    fn obj_rejects_tiny_lattice() {
        assert!(lattice_obj(&[[0.0; 3]], 1, "").is_err());
    }

    #[test]
    fn clean_cloud_against_itself_scores_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let surface = BSplineSurface::open_uniform(
            ControlGrid::from_fn(4, 4, |i, j| {
                [j as f64 / 3.0, i as f64 / 3.0, rng.random_range(-0.2..0.2)]
            }),
            3,
            3,
        )
        .unwrap();
        let clean = surface.sample(400, crate::spline::SampleMode::Random, 9).0;
        let cfg = EvalConfig::default();
        let normals = pca_normals(&clean, cfg.normal_k).unwrap();
        let m = compare_clouds(3, &clean, &clean, &normals, &cfg).unwrap();
        assert_eq!(m.emd, 0.0);
        assert!(m.nc.abs() < 1e-12);
        assert!(m.dcd.abs() < 1e-12);
    }

    #[test]
    fn config_keys_parse() {
        let kv = KeyValues::parse("bsa_grids=5x6\nsplit=all\nsample_res=16\n").unwrap();
        let cfg = EvalConfig::default().apply_kv(&kv).unwrap();
        assert_eq!(cfg.bsa_grids, vec![(5, 6)]);
        assert_eq!(cfg.split, EvalSplit::All);
        assert_eq!(EvalConfig::default().apply_kv(&cfg.to_kv()).unwrap(), cfg);
        let bad = KeyValues::parse("split=test\n").unwrap();
        assert!(EvalConfig::default().apply_kv(&bad).is_err());
        let b = BsaRunConfig::default()
            .apply_kv(&KeyValues::parse("cp_grid=3x4\ndegrees=2,3\n").unwrap())
            .unwrap();
        assert_eq!((b.cp_grid, b.degrees), ((3, 4), (2, 3)));
    }
}
