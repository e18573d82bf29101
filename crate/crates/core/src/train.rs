//! Weighted loss, batch gradients, Adam and the training loop.
//!
//! Training happens in each sample's unit-cube frame: the cloud and the real
//! control points are mapped by [`UnitCube::fit`] of the noisy cloud, while
//! padded cells stay at zero.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::KeyValues;
use crate::dataset::{mix64, DatasetSample, PaddedTarget};
use crate::geom::Point3;
use crate::model::{
    backward, check_shapes, forward_cached, save_checkpoint, ArchConfig, ModelParams,
    PreparedInput, UnitCube,
};
use crate::spline::PointCloud;
use crate::{Error, Result};

const SPLIT_SALT: u64 = 0x7a11_da7a;
const INIT_SALT: u64 = 0x1417;
const SHUFFLE_SALT: u64 = 0x5eed_5415;
const GRAD_CHECK_SALT: u64 = 0x9c4e;
const RESAMPLE_SALT: u64 = 0x4e5a_3b1e;

pub const CHECKPOINT_FILE: &str = "model.bsck";
pub const HISTORY_FILE: &str = "loss_history.csv";

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub w_pad: f64,
    pub seed: u64,
    /// Run a finite-difference gradient check on the first batch.
    pub grad_check: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            epochs: 200,
            batch_size: 16,
            w_pad: 2.0,
            seed: 0,
            grad_check: false,
        }
    }
}

impl TrainConfig {
    pub const KEYS: &'static [&'static str] = &[
        "learning_rate",
        "beta1",
        "beta2",
        "adam_eps",
        "epochs",
        "batch_size",
        "w_pad",
        "seed",
        "grad_check",
    ];

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("learning_rate must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::config(format!("{name} must lie in (0, 1)")));
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::config("adam_eps must be positive"));
        }
        if !(self.w_pad >= 1.0) {
            return Err(Error::config("w_pad must be at least 1"));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("learning_rate", self.learning_rate);
        kv.set("beta1", self.beta1);
        kv.set("beta2", self.beta2);
        kv.set("adam_eps", self.adam_eps);
        kv.set("epochs", self.epochs);
        kv.set("batch_size", self.batch_size);
        kv.set("w_pad", self.w_pad);
        kv.set("seed", self.seed);
        kv.set("grad_check", self.grad_check);
        kv
    }

    pub fn apply_kv(mut self, kv: &KeyValues) -> Result<Self> {
        if let Some(v) = kv.get("learning_rate")? {
            self.learning_rate = v;
        }
        if let Some(v) = kv.get("beta1")? {
            self.beta1 = v;
        }
        if let Some(v) = kv.get("beta2")? {
            self.beta2 = v;
        }
        if let Some(v) = kv.get("adam_eps")? {
            self.adam_eps = v;
        }
        if let Some(v) = kv.get("epochs")? {
            self.epochs = v;
        }
        if let Some(v) = kv.get("batch_size")? {
            self.batch_size = v;
        }
        if let Some(v) = kv.get("w_pad")? {
            self.w_pad = v;
        }
        if let Some(v) = kv.get("seed")? {
            self.seed = v;
        }
        if let Some(v) = kv.get("grad_check")? {
            self.grad_check = v;
        }
        Ok(self)
    }
}

/// `sum w ||pred - target||^2 / sum 3 w`, with weight `w_pad` on padded cells.
pub fn weighted_mse(pred: &[Point3], target: &PaddedTarget, w_pad: f64) -> f64 {
    loss_and_grad(pred, target, w_pad).0
}

/// Loss and its gradient with respect to every predicted coordinate.
fn loss_and_grad(pred: &[Point3], target: &PaddedTarget, w_pad: f64) -> (f64, Vec<f64>) {
    assert_eq!(
        pred.len(),
        target.values().len(),
        "prediction/target shape mismatch"
    );
    let weights: Vec<f64> = target
        .mask()
        .iter()
        .map(|&m| if m == 1 { 1.0 } else { w_pad })
        .collect();
    let norm = 3.0 * weights.iter().sum::<f64>();
    let mut loss = 0.0;
    let mut grad = vec![0.0; pred.len() * 3];
    for (idx, (p, t)) in pred.iter().zip(target.values()).enumerate() {
        for d in 0..3 {
            let e = p[d] - t[d];
            loss += weights[idx] * e * e;
            grad[idx * 3 + d] = 2.0 * weights[idx] * e / norm;
        }
    }
    (loss / norm, grad)
}

/// A sample mapped into its unit-cube frame with the network input built.
#[derive(Clone, Debug)]
pub struct PreparedSample {
    pub sample_id: u64,
    pub input: PreparedInput,
    pub target: PaddedTarget,
    /// The full cloud in the unit-cube frame, kept for resampling.
    pub cloud: PointCloud,
}

impl PreparedSample {
    pub fn new(sample: &DatasetSample, arch: &ArchConfig) -> Result<Self> {
        let frame = UnitCube::fit(&sample.cloud);
        let cloud = sample.cloud.map(|p| frame.apply(p));
        let t = &sample.target;
        if (t.pad_rows(), t.pad_cols()) != (arch.pad_rows, arch.pad_cols) {
            return Err(Error::config(format!(
                "dataset padding {}x{} does not match architecture {}x{}",
                t.pad_rows(),
                t.pad_cols(),
                arch.pad_rows,
                arch.pad_cols
            )));
        }
        let values = t
            .values()
            .iter()
            .zip(t.mask())
            .map(|(&p, &m)| if m == 1 { frame.apply(p) } else { [0.0; 3] })
            .collect();
        let target =
            PaddedTarget::from_parts(t.pad_rows(), t.pad_cols(), values, t.mask().to_vec())?;
        Ok(Self {
            sample_id: sample.sample_id,
            input: PreparedInput::new(&cloud, arch)?,
            target,
            cloud,
        })
    }

    /// The same sample with its input subset drawn from `seed`. Clouds within
    /// the input cap keep every point, so they are returned unchanged.
    pub fn resampled(&self, arch: &ArchConfig, seed: u64) -> Result<Self> {
        if self.cloud.len() <= arch.max_input_points {
            return Ok(self.clone());
        }
        Ok(Self {
            input: PreparedInput::with_subsample_seed(&self.cloud, arch, seed)?,
            ..self.clone()
        })
    }
}

pub fn prepare_samples(
    samples: &[DatasetSample],
    arch: &ArchConfig,
) -> Result<Vec<PreparedSample>> {
    samples
        .par_iter()
        .map(|s| PreparedSample::new(s, arch))
        .collect()
}

fn predicted_points(raw: &[f64], offset: Point3) -> Vec<Point3> {
    raw.chunks_exact(3)
        .map(|p| [p[0] + offset[0], p[1] + offset[1], p[2] + offset[2]])
        .collect()
}

/// Loss of one prepared sample.
pub fn sample_loss(params: &ModelParams, arch: &ArchConfig, s: &PreparedSample, w_pad: f64) -> f64 {
    let (raw, _) = forward_cached(params, arch, &s.input);
    weighted_mse(&predicted_points(&raw, s.input.centroid), &s.target, w_pad)
}

/// Mean loss over `samples`, reduced in order.
pub fn mean_loss(
    params: &ModelParams,
    arch: &ArchConfig,
    samples: &[PreparedSample],
    w_pad: f64,
) -> f64 {
    let losses: Vec<f64> = samples
        .par_iter()
        .map(|s| sample_loss(params, arch, s, w_pad))
        .collect();
    losses.iter().sum::<f64>() / losses.len() as f64
}

/// Mean batch loss and the gradient of `loss_scale * mean loss`.
pub fn batch_gradients(
    params: &ModelParams,
    arch: &ArchConfig,
    batch: &[&PreparedSample],
    w_pad: f64,
    loss_scale: f64,
) -> (f64, ModelParams) {
    assert!(!batch.is_empty(), "empty batch");
    let scale = loss_scale / batch.len() as f64;
    let per_sample: Vec<(f64, ModelParams)> = batch
        .par_iter()
        .map(|s| {
            let (raw, cache) = forward_cached(params, arch, &s.input);
            let pred = predicted_points(&raw, s.input.centroid);
            let (loss, mut grad) = loss_and_grad(&pred, &s.target, w_pad);
            for g in &mut grad {
                *g *= scale;
            }
            let mut grads = params.zeros_like();
            backward(params, arch, &s.input, &cache, &grad, &mut grads);
            (loss, grads)
        })
        .collect();
    let mut total = params.zeros_like();
    let mut loss = 0.0;
    for (l, g) in &per_sample {
        loss += l;
        total.add_scaled(g, 1.0);
    }
    (loss / batch.len() as f64, total)
}

/// Gradient of the mean weighted loss over `batch`.
pub fn compute_gradients(
    params: &ModelParams,
    arch: &ArchConfig,
    batch: &[DatasetSample],
    w_pad: f64,
) -> Result<ModelParams> {
    if batch.is_empty() {
        return Err(Error::config("gradient batch is empty"));
    }
    check_shapes(params, arch)?;
    let prepared = prepare_samples(batch, arch)?;
    let refs: Vec<&PreparedSample> = prepared.iter().collect();
    Ok(batch_gradients(params, arch, &refs, w_pad, 1.0).1)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Probes compared against the analytic gradient.
    pub probes: usize,
    /// Probes whose stencil straddled a kink of the rectifier or of a max.
    pub skipped: usize,
    pub max_rel_error: f64,
}

/// Relative error with a floor on the denominator, so entries that are zero
/// up to rounding do not dominate.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-7)
}

/// Compares `probes` random gradient entries with central differences of
/// step `h`.
///
/// The network is piecewise smooth. A probe is skipped when the central
/// differences at `h` and `h / 2` disagree, which happens only when the
/// stencil crosses a nonsmooth point; a wrong analytic gradient still fails
/// because both estimates then agree with each other but not with it.
pub fn gradient_check(
    params: &ModelParams,
    arch: &ArchConfig,
    batch: &[&PreparedSample],
    w_pad: f64,
    probes: usize,
    h: f64,
    seed: u64,
) -> GradCheckReport {
    let (_, grads) = batch_gradients(params, arch, batch, w_pad, 1.0);
    let loss = |p: &ModelParams| {
        batch
            .iter()
            .map(|s| sample_loss(p, arch, s, w_pad))
            .sum::<f64>()
            / batch.len() as f64
    };
    let mut rng = ChaCha8Rng::seed_from_u64(mix64(seed ^ GRAD_CHECK_SALT));
    let mut work = params.clone();
    let mut central = |ti: usize, ei: usize, step: f64| {
        let orig = params.tensors()[ti].data[ei];
        work.tensors_mut()[ti].data[ei] = orig + step;
        let up = loss(&work);
        work.tensors_mut()[ti].data[ei] = orig - step;
        let down = loss(&work);
        work.tensors_mut()[ti].data[ei] = orig;
        (up - down) / (2.0 * step)
    };
    let mut report = GradCheckReport {
        probes: 0,
        skipped: 0,
        max_rel_error: 0.0,
    };
    let tensor_count = params.tensors().len();
    while report.probes < probes && report.skipped < 10 * probes.max(1) {
        let ti = rng.random_range(0..tensor_count);
        let ei = rng.random_range(0..params.tensors()[ti].len());
        let numeric = central(ti, ei, h);
        if relative_error(numeric, central(ti, ei, 0.5 * h)) > 1e-6 {
            report.skipped += 1;
            continue;
        }
        report.probes += 1;
        let err = relative_error(grads.tensors()[ti].data[ei], numeric);
        report.max_rel_error = report.max_rel_error.max(err);
    }
    report
}

/// First and second moment estimates for every parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: ModelParams,
    pub v: ModelParams,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update in place.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &ModelParams,
    state: &mut AdamState,
    cfg: &TrainConfig,
) {
    state.step += 1;
    let tensors = params.tensors_mut().iter_mut();
    let rest = grads
        .tensors()
        .iter()
        .zip(state.m.tensors_mut().iter_mut())
        .zip(state.v.tensors_mut().iter_mut());
    for (p, ((g, m), v)) in tensors.zip(rest) {
        adam_update(
            &mut p.data,
            &g.data,
            &mut m.data,
            &mut v.data,
            state.step,
            cfg,
        );
    }
}

/// Adam update of one flat parameter block at step `step >= 1`.
pub fn adam_update(
    p: &mut [f64],
    g: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    step: u64,
    cfg: &TrainConfig,
) {
    let t = step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..p.len() {
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
        p[i] -= cfg.learning_rate * (m[i] / c1) / ((v[i] / c2).sqrt() + cfg.adam_eps);
    }
}

/// Deterministic 90/10 split on the sample id.
pub fn is_validation(sample_id: u64) -> bool {
    mix64(sample_id ^ SPLIT_SALT).is_multiple_of(10)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossHistory(pub Vec<EpochLoss>);

impl LossHistory {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_loss\n");
        for e in &self.0 {
            writeln!(s, "{},{:e},{:e}", e.epoch, e.train_loss, e.val_loss).unwrap();
        }
        s
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some("epoch,train_loss,val_loss") {
            return Err(Error::config("loss history header mismatch"));
        }
        let mut rows = Vec::new();
        for line in lines {
            let f: Vec<&str> = line.split(',').collect();
            let parse = |s: &str| {
                s.parse::<f64>()
                    .map_err(|_| Error::config(format!("bad loss history value {s:?}")))
            };
            if f.len() != 3 {
                return Err(Error::config(format!("bad loss history row {line:?}")));
            }
            rows.push(EpochLoss {
                epoch: f[0]
                    .parse()
                    .map_err(|_| Error::config(format!("bad epoch {:?}", f[0])))?,
                train_loss: parse(f[1])?,
                val_loss: parse(f[2])?,
            });
        }
        Ok(Self(rows))
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Row 0 is the initialization; row e > 0 holds the mean minibatch
    /// loss of epoch e and the validation loss after it.
    pub history: LossHistory,
    pub best_epoch: usize,
    pub best_params: ModelParams,
    pub final_params: ModelParams,
    pub grad_check: Option<GradCheckReport>,
    pub train_ids: Vec<u64>,
    pub val_ids: Vec<u64>,
}

impl TrainOutcome {
    pub fn best_val_loss(&self) -> f64 {
        self.history.0[self.best_epoch].val_loss
    }
}

/// Splits and prepares `samples`, then runs shuffled mini-batch Adam,
/// keeping the parameters with the lowest validation loss.
pub fn train(
    samples: &[DatasetSample],
    arch: &ArchConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    train_observed(samples, arch, cfg, |_| {})
}

/// [`train`] with `on_epoch` called on every history row as it is produced.
pub fn train_observed(
    samples: &[DatasetSample],
    arch: &ArchConfig,
    cfg: &TrainConfig,
    on_epoch: impl FnMut(&EpochLoss),
) -> Result<TrainOutcome> {
    let (train_set, val_set): (Vec<DatasetSample>, Vec<DatasetSample>) = samples
        .iter()
        .cloned()
        .partition(|s| !is_validation(s.sample_id));
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::config(format!(
            "split left {} training and {} validation samples; both must be nonempty",
            train_set.len(),
            val_set.len()
        )));
    }
    let train_prep = prepare_samples(&train_set, arch)?;
    let val_prep = prepare_samples(&val_set, arch)?;
    let mut outcome = train_prepared(&train_prep, &val_prep, arch, cfg, on_epoch)?;
    outcome.train_ids = train_set.iter().map(|s| s.sample_id).collect();
    outcome.val_ids = val_set.iter().map(|s| s.sample_id).collect();
    Ok(outcome)
}

/// Training on already prepared splits; `on_epoch` observes each history row.
pub fn train_prepared(
    train_set: &[PreparedSample],
    val_set: &[PreparedSample],
    arch: &ArchConfig,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLoss),
) -> Result<TrainOutcome> {
    arch.validate()?;
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::config(
            "training and validation sets must be nonempty",
        ));
    }
    let mut init_rng = ChaCha8Rng::seed_from_u64(mix64(cfg.seed ^ INIT_SALT));
    let mut params = ModelParams::init(arch, &mut init_rng);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(mix64(cfg.seed ^ SHUFFLE_SALT));
    let mut state = AdamState::new(&params);

    let grad_check = cfg.grad_check.then(|| {
        let batch: Vec<&PreparedSample> = train_set.iter().take(cfg.batch_size).collect();
        gradient_check(&params, arch, &batch, cfg.w_pad, 20, 1e-4, cfg.seed)
    });

    let first = EpochLoss {
        epoch: 0,
        train_loss: mean_loss(&params, arch, train_set, cfg.w_pad),
        val_loss: mean_loss(&params, arch, val_set, cfg.w_pad),
    };
    on_epoch(&first);
    let mut history = vec![first];
    let mut best_epoch = 0;
    let mut best_params = params.clone();

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        // Each epoch sees a fresh subset of every oversized training cloud.
        let epoch_seed = mix64(cfg.seed ^ RESAMPLE_SALT ^ epoch as u64);
        let epoch_set: Vec<PreparedSample> = train_set
            .par_iter()
            .map(|s| s.resampled(arch, mix64(epoch_seed ^ s.sample_id)))
            .collect::<Result<_>>()?;
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&PreparedSample> = chunk.iter().map(|&i| &epoch_set[i]).collect();
            let (loss, grads) = batch_gradients(&params, arch, &batch, cfg.w_pad, 1.0);
            loss_sum += loss * batch.len() as f64;
            adam_step(&mut params, &grads, &mut state, cfg);
        }
        let row = EpochLoss {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            val_loss: mean_loss(&params, arch, val_set, cfg.w_pad),
        };
        on_epoch(&row);
        if row.val_loss < history[best_epoch].val_loss {
            best_epoch = epoch;
            best_params = params.clone();
        }
        history.push(row);
    }
    Ok(TrainOutcome {
        history: LossHistory(history),
        best_epoch,
        best_params,
        final_params: params,
        grad_check,
        train_ids: Vec::new(),
        val_ids: Vec::new(),
    })
}

/// Trains and writes the best checkpoint and the loss history into `out_dir`.
pub fn train_to_dir(
    samples: &[DatasetSample],
    arch: &ArchConfig,
    cfg: &TrainConfig,
    out_dir: &Path,
    on_epoch: impl FnMut(&EpochLoss),
) -> Result<TrainOutcome> {
    let outcome = train_observed(samples, arch, cfg, on_epoch)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    save_checkpoint(&out_dir.join(CHECKPOINT_FILE), arch, &outcome.best_params)?;
    let hist = out_dir.join(HISTORY_FILE);
    fs::write(&hist, outcome.history.to_csv()).map_err(|e| Error::io(&hist, e))?;
    Ok(outcome)
}
