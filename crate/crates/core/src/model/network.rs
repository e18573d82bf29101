//! Forward pass with cached activations and its hand-derived adjoint.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{build_knn_graph, KnnGraph};
use super::linalg::{affine, gemm, leaky, leaky_grad};
use super::params::{ArchConfig, Layout, ModelParams, LEAKY_SLOPE};
use crate::geom::{centroid, Point3};
use crate::spline::PointCloud;
use crate::{Error, Result};

/// Fixed seed of the input subsampler, so the retained subset depends only
/// on the point multiset.
const SUBSAMPLE_SEED: u64 = 0x5eed_c10d;

/// Edges per chunk of the second edge-MLP product.
const EDGE_CHUNK: usize = 4096;

/// Canonically ordered, centred network input with its graph.
#[derive(Clone, Debug)]
pub struct PreparedInput {
    pub(crate) points: Vec<Point3>,
    pub(crate) centroid: Point3,
    pub(crate) graph: KnnGraph,
}

impl PreparedInput {
    pub fn new(cloud: &PointCloud, arch: &ArchConfig) -> Result<Self> {
        Self::with_subsample_seed(cloud, arch, SUBSAMPLE_SEED)
    }

    /// As [`PreparedInput::new`] but drawing the retained subset from
    /// `seed`; inference always uses the fixed seed.
    pub fn with_subsample_seed(cloud: &PointCloud, arch: &ArchConfig, seed: u64) -> Result<Self> {
        let mut pts = cloud.points().to_vec();
        pts.sort_by(|a, b| {
            a[0].total_cmp(&b[0])
                .then(a[1].total_cmp(&b[1]))
                .then(a[2].total_cmp(&b[2]))
        });
        if pts.len() > arch.max_input_points {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut keep =
                rand::seq::index::sample(&mut rng, pts.len(), arch.max_input_points).into_vec();
            keep.sort_unstable();
            pts = keep.into_iter().map(|i| pts[i]).collect();
        }
        let c = centroid(&pts);
        let centred: Vec<Point3> = pts
            .iter()
            .map(|p| [p[0] - c[0], p[1] - c[1], p[2] - c[2]])
            .collect();
        let centred = PointCloud::new(centred)?;
        let graph = build_knn_graph(&centred, arch.k_neighbors)?;
        Ok(Self {
            points: centred.into_points(),
            centroid: c,
            graph,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

struct LayerCache {
    /// Hidden edge activations, E × c.
    a1: Vec<f64>,
    /// Max-aggregated pre-activation including the second bias, N × c.
    pre: Vec<f64>,
    /// Edge achieving each maximum.
    arg: Vec<u32>,
}

pub(crate) struct Cache {
    layers: Vec<LayerCache>,
    /// Output of every layer, N × c_l.
    outputs: Vec<Vec<f64>>,
    pool_arg: Vec<u32>,
    pooled: Vec<f64>,
    g: Vec<f64>,
    attn: Vec<f64>,
    r: Vec<f64>,
    hidden: Vec<f64>,
}

struct LayerWeights<'a> {
    w1: &'a [f64],
    b1: &'a [f64],
    w2: &'a [f64],
    b2: &'a [f64],
}

fn layer_forward(
    h: &[f64],
    c_in: usize,
    c: usize,
    w: &LayerWeights,
    graph: &KnnGraph,
) -> (Vec<f64>, LayerCache) {
    let n = graph.node_count();
    let offsets = graph.offsets();
    let targets = graph.targets();
    let e_total = graph.edge_count();
    // [x_i, x_j - x_i] · W1 = x_i · (Wt - Wb) + x_j · Wb.
    let (wt, wb) = w.w1.split_at(c_in * c);
    let mut a = vec![0.0; n * c];
    let mut b = vec![0.0; n * c];
    gemm(n, c_in, c, h, false, wt, false, &mut a, false);
    gemm(n, c_in, c, h, false, wb, false, &mut b, false);
    for i in 0..n {
        for f in 0..c {
            a[i * c + f] += w.b1[f] - b[i * c + f];
        }
    }
    let mut a1 = vec![0.0; e_total * c];
    for i in 0..n {
        let ai = &a[i * c..(i + 1) * c];
        for e in offsets[i]..offsets[i + 1] {
            let bj = &b[targets[e] * c..(targets[e] + 1) * c];
            let row = &mut a1[e * c..(e + 1) * c];
            for f in 0..c {
                row[f] = leaky(ai[f] + bj[f], LEAKY_SLOPE);
            }
        }
    }
    let mut pre = vec![f64::NEG_INFINITY; n * c];
    let mut arg = vec![0u32; n * c];
    let mut z2 = vec![0.0; EDGE_CHUNK.max(1) * c];
    let mut node = 0;
    while node < n {
        let start = offsets[node];
        let mut end_node = node + 1;
        while end_node < n && offsets[end_node + 1] - start <= EDGE_CHUNK {
            end_node += 1;
        }
        let edges = offsets[end_node] - start;
        if z2.len() < edges * c {
            z2.resize(edges * c, 0.0);
        }
        gemm(
            edges,
            c,
            c,
            &a1[start * c..],
            false,
            w.w2,
            false,
            &mut z2,
            false,
        );
        for i in node..end_node {
            let m = &mut pre[i * c..(i + 1) * c];
            let am = &mut arg[i * c..(i + 1) * c];
            for e in offsets[i]..offsets[i + 1] {
                let z = &z2[(e - start) * c..(e - start + 1) * c];
                for f in 0..c {
                    if z[f] > m[f] {
                        m[f] = z[f];
                        am[f] = e as u32;
                    }
                }
            }
        }
        node = end_node;
    }
    let mut out = vec![0.0; n * c];
    for i in 0..n {
        for f in 0..c {
            let p = &mut pre[i * c + f];
            *p += w.b2[f];
            out[i * c + f] = leaky(*p, LEAKY_SLOPE);
        }
    }
    (out, LayerCache { a1, pre, arg })
}

/// Returns the gradient with respect to the layer input.
#[allow(clippy::too_many_arguments)]
fn layer_backward(
    h: &[f64],
    c_in: usize,
    c: usize,
    w: &LayerWeights,
    graph: &KnnGraph,
    cache: &LayerCache,
    dout: &[f64],
    grads: [&mut [f64]; 4],
) -> Vec<f64> {
    let [dw1, db1, dw2, db2] = grads;
    let n = graph.node_count();
    let offsets = graph.offsets();
    let targets = graph.targets();
    let e_total = graph.edge_count();

    // Only the argmax edge of each (node, feature) receives gradient.
    let mut dw2t = vec![0.0; c * c];
    let mut da1 = vec![0.0; e_total * c];
    let mut w2t = vec![0.0; c * c];
    for r in 0..c {
        for f in 0..c {
            w2t[f * c + r] = w.w2[r * c + f];
        }
    }
    for i in 0..n {
        for f in 0..c {
            let g = dout[i * c + f] * leaky_grad(cache.pre[i * c + f], LEAKY_SLOPE);
            if g == 0.0 {
                continue;
            }
            db2[f] += g;
            let e = cache.arg[i * c + f] as usize;
            let a1e = &cache.a1[e * c..(e + 1) * c];
            let acc = &mut dw2t[f * c..(f + 1) * c];
            for r in 0..c {
                acc[r] += g * a1e[r];
            }
            let wrow = &w2t[f * c..(f + 1) * c];
            let de = &mut da1[e * c..(e + 1) * c];
            for r in 0..c {
                de[r] += g * wrow[r];
            }
        }
    }
    for r in 0..c {
        for f in 0..c {
            dw2[r * c + f] += dw2t[f * c + r];
        }
    }

    // z1 = A_i + B_j with A_i = x_i (Wt - Wb) + b1 and B_j = x_j Wb.
    let mut da = vec![0.0; n * c];
    let mut db = vec![0.0; n * c];
    for i in 0..n {
        for e in offsets[i]..offsets[i + 1] {
            let j = targets[e];
            for f in 0..c {
                let dz = da1[e * c + f] * leaky_grad(cache.a1[e * c + f], LEAKY_SLOPE);
                da[i * c + f] += dz;
                db[j * c + f] += dz;
            }
        }
    }
    for i in 0..n {
        for f in 0..c {
            db1[f] += da[i * c + f];
        }
    }
    // d(Wt) = hᵀ dA, d(Wb) = hᵀ (dB - dA).
    for (x, y) in db.iter_mut().zip(&da) {
        *x -= y;
    }
    let (dwt, dwb) = dw1.split_at_mut(c_in * c);
    gemm(c_in, n, c, h, true, &da, false, dwt, true);
    gemm(c_in, n, c, h, true, &db, false, dwb, true);
    let (wt, wb) = w.w1.split_at(c_in * c);
    let mut dh = vec![0.0; n * c_in];
    gemm(n, c, c_in, &da, false, wt, true, &mut dh, false);
    gemm(n, c, c_in, &db, false, wb, true, &mut dh, true);
    dh
}

/// Scaled-dot-product attention weights over the atoms.
pub fn dictionary_weights(g: &[f64], atoms: &[f64]) -> Vec<f64> {
    let d = g.len();
    let scale = 1.0 / (d as f64).sqrt();
    let logits: Vec<f64> = atoms
        .chunks_exact(d)
        .map(|atom| atom.iter().zip(g).map(|(a, b)| a * b).sum::<f64>() * scale)
        .collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `g + aᵀ · atoms` with `a = softmax(atoms · g / sqrt(d))`; `atoms` is K×d
/// row-major.
pub fn dictionary_refine(g: &[f64], atoms: &[f64]) -> Vec<f64> {
    refine_with(g, atoms, &dictionary_weights(g, atoms))
}

fn refine_with(g: &[f64], atoms: &[f64], attn: &[f64]) -> Vec<f64> {
    let d = g.len();
    let mut r = g.to_vec();
    for (atom, &a) in atoms.chunks_exact(d).zip(attn) {
        for (x, y) in r.iter_mut().zip(atom) {
            *x += a * y;
        }
    }
    r
}

fn layer_weights<'a>(params: &'a ModelParams, layout: &Layout, l: usize) -> LayerWeights<'a> {
    let s = layout.layers[l];
    LayerWeights {
        w1: params.slot(s.w1),
        b1: params.slot(s.b1),
        w2: params.slot(s.w2),
        b2: params.slot(s.b2),
    }
}

/// Raw head output (centred frame, I·J·3 values) and the cache needed by
/// [`backward`].
pub(crate) fn forward_cached(
    params: &ModelParams,
    arch: &ArchConfig,
    input: &PreparedInput,
) -> (Vec<f64>, Cache) {
    let layout = Layout::new(arch);
    let n = input.len();
    let graph = &input.graph;
    let mut h: Vec<f64> = input.points.iter().flatten().copied().collect();
    let mut c_in = 3;
    let mut layers = Vec::with_capacity(arch.layer_dims.len());
    let mut outputs = Vec::with_capacity(arch.layer_dims.len());
    for (l, &c) in arch.layer_dims.iter().enumerate() {
        let w = layer_weights(params, &layout, l);
        let (out, cache) = layer_forward(&h, c_in, c, &w, graph);
        layers.push(cache);
        outputs.push(out.clone());
        h = out;
        c_in = c;
    }

    // Max pool then mean pool over the concatenated layer outputs.
    let total = arch.concat_dim();
    let mut pooled = vec![0.0; 2 * total];
    let mut pool_arg = vec![0u32; total];
    let mut base = 0;
    for (out, &c) in outputs.iter().zip(&arch.layer_dims) {
        for f in 0..c {
            let mut best = f64::NEG_INFINITY;
            let mut best_i = 0;
            let mut sum = 0.0;
            for i in 0..n {
                let x = out[i * c + f];
                if x > best {
                    best = x;
                    best_i = i;
                }
                sum += x;
            }
            pooled[base + f] = best;
            pool_arg[base + f] = best_i as u32;
            pooled[total + base + f] = sum / n as f64;
        }
        base += c;
    }

    let g: Vec<f64> = affine(
        &pooled,
        params.slot(layout.proj_w),
        params.slot(layout.proj_b),
    )
    .into_iter()
    .map(|x| leaky(x, LEAKY_SLOPE))
    .collect();
    let atoms = params.slot(layout.atoms);
    let attn = dictionary_weights(&g, atoms);
    let r = refine_with(&g, atoms, &attn);
    let hidden: Vec<f64> = affine(&r, params.slot(layout.head_w1), params.slot(layout.head_b1))
        .into_iter()
        .map(|x| leaky(x, LEAKY_SLOPE))
        .collect();
    let out = affine(
        &hidden,
        params.slot(layout.head_w2),
        params.slot(layout.head_b2),
    );
    let cache = Cache {
        layers,
        outputs,
        pool_arg,
        pooled,
        g,
        attn,
        r,
        hidden,
    };
    (out, cache)
}

/// Accumulates into `grads` the parameter gradient of `<dout, head output>`.
pub(crate) fn backward(
    params: &ModelParams,
    arch: &ArchConfig,
    input: &PreparedInput,
    cache: &Cache,
    dout: &[f64],
    grads: &mut ModelParams,
) {
    let layout = Layout::new(arch);
    let d = arch.global_dim;
    let hid = arch.head_hidden;
    let out_len = arch.output_len();

    // Head.
    for (x, y) in grads.slot_mut(layout.head_b2).iter_mut().zip(dout) {
        *x += y;
    }
    gemm(
        hid,
        1,
        out_len,
        &cache.hidden,
        true,
        dout,
        false,
        grads.slot_mut(layout.head_w2),
        true,
    );
    let mut dh = vec![0.0; hid];
    gemm(
        1,
        out_len,
        hid,
        dout,
        false,
        params.slot(layout.head_w2),
        true,
        &mut dh,
        false,
    );
    for (x, &h) in dh.iter_mut().zip(&cache.hidden) {
        *x *= leaky_grad(h, LEAKY_SLOPE);
    }
    for (x, y) in grads.slot_mut(layout.head_b1).iter_mut().zip(&dh) {
        *x += y;
    }
    gemm(
        d,
        1,
        hid,
        &cache.r,
        true,
        &dh,
        false,
        grads.slot_mut(layout.head_w1),
        true,
    );
    let mut dr = vec![0.0; d];
    gemm(
        1,
        hid,
        d,
        &dh,
        false,
        params.slot(layout.head_w1),
        true,
        &mut dr,
        false,
    );

    // Dictionary.
    let atoms = params.slot(layout.atoms);
    let scale = 1.0 / (d as f64).sqrt();
    let da: Vec<f64> = atoms
        .chunks_exact(d)
        .map(|atom| atom.iter().zip(&dr).map(|(a, b)| a * b).sum())
        .collect();
    let mean_da: f64 = cache.attn.iter().zip(&da).map(|(a, b)| a * b).sum();
    let ds: Vec<f64> = cache
        .attn
        .iter()
        .zip(&da)
        .map(|(a, x)| a * (x - mean_da))
        .collect();
    let mut dg = dr.clone();
    {
        let datoms = grads.slot_mut(layout.atoms);
        for k in 0..arch.dict_atoms {
            let row = &mut datoms[k * d..(k + 1) * d];
            for f in 0..d {
                row[f] += cache.attn[k] * dr[f] + ds[k] * scale * cache.g[f];
            }
        }
    }
    for (k, atom) in atoms.chunks_exact(d).enumerate() {
        for f in 0..d {
            dg[f] += ds[k] * scale * atom[f];
        }
    }

    // Projection.
    for (x, &g) in dg.iter_mut().zip(&cache.g) {
        *x *= leaky_grad(g, LEAKY_SLOPE);
    }
    for (x, y) in grads.slot_mut(layout.proj_b).iter_mut().zip(&dg) {
        *x += y;
    }
    let pooled_len = cache.pooled.len();
    gemm(
        pooled_len,
        1,
        d,
        &cache.pooled,
        true,
        &dg,
        false,
        grads.slot_mut(layout.proj_w),
        true,
    );
    let mut dpool = vec![0.0; pooled_len];
    gemm(
        1,
        d,
        pooled_len,
        &dg,
        false,
        params.slot(layout.proj_w),
        true,
        &mut dpool,
        false,
    );

    // Pooling back onto each layer output.
    let n = input.len();
    let total = arch.concat_dim();
    let mut douts: Vec<Vec<f64>> = Vec::with_capacity(arch.layer_dims.len());
    let mut base = 0;
    for &c in &arch.layer_dims {
        let mut g = vec![0.0; n * c];
        for f in 0..c {
            let mean_g = dpool[total + base + f] / n as f64;
            for i in 0..n {
                g[i * c + f] = mean_g;
            }
            g[cache.pool_arg[base + f] as usize * c + f] += dpool[base + f];
        }
        douts.push(g);
        base += c;
    }

    // Layers in reverse, adding the skip gradient of each output.
    let input_flat: Vec<f64> = input.points.iter().flatten().copied().collect();
    let mut carry: Option<Vec<f64>> = None;
    for l in (0..arch.layer_dims.len()).rev() {
        let c = arch.layer_dims[l];
        let c_in = if l == 0 { 3 } else { arch.layer_dims[l - 1] };
        let mut dl = std::mem::take(&mut douts[l]);
        if let Some(extra) = carry.take() {
            for (x, y) in dl.iter_mut().zip(&extra) {
                *x += y;
            }
        }
        let h = if l == 0 {
            &input_flat
        } else {
            &cache.outputs[l - 1]
        };
        let w = layer_weights(params, &layout, l);
        let s = layout.layers[l];
        let [dw1, db1, dw2, db2] = grads.slots_mut([s.w1, s.b1, s.w2, s.b2]);
        let dh = layer_backward(
            h,
            c_in,
            c,
            &w,
            &input.graph,
            &cache.layers[l],
            &dl,
            [dw1, db1, dw2, db2],
        );
        if l > 0 {
            carry = Some(dh);
        }
    }
}

/// Network prediction on the `I×J` padded grid, in the input frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub pad_rows: usize,
    pub pad_cols: usize,
    pub values: Vec<Point3>,
}

impl Prediction {
    pub fn value(&self, i: usize, j: usize) -> Point3 {
        self.values[i * self.pad_cols + j]
    }

    pub(crate) fn from_raw(arch: &ArchConfig, raw: &[f64], offset: Point3) -> Self {
        let values = raw
            .chunks_exact(3)
            .map(|p| [p[0] + offset[0], p[1] + offset[1], p[2] + offset[2]])
            .collect();
        Self {
            pad_rows: arch.pad_rows,
            pad_cols: arch.pad_cols,
            values,
        }
    }
}

pub fn check_shapes(params: &ModelParams, arch: &ArchConfig) -> Result<()> {
    let expected = ModelParams::zeros(arch);
    for (t, e) in params.tensors().iter().zip(expected.tensors()) {
        if t.shape != e.shape {
            return Err(Error::config(format!(
                "tensor {} has shape {:?}, architecture expects {:?}",
                t.name, t.shape, e.shape
            )));
        }
    }
    if params.tensors().len() != expected.tensors().len() {
        return Err(Error::config("parameter count does not match architecture"));
    }
    Ok(())
}

pub fn forward_prepared(
    params: &ModelParams,
    arch: &ArchConfig,
    input: &PreparedInput,
) -> Prediction {
    let (raw, _) = forward_cached(params, arch, input);
    Prediction::from_raw(arch, &raw, input.centroid)
}

/// Predicts the padded control grid of `cloud`.
pub fn forward(params: &ModelParams, arch: &ArchConfig, cloud: &PointCloud) -> Result<Prediction> {
    arch.validate()?;
    check_shapes(params, arch)?;
    let input = PreparedInput::new(cloud, arch)?;
    Ok(forward_prepared(params, arch, &input))
}
