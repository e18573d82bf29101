use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::config::{join_list, parse_list, KeyValues};
use crate::{Error, Result};

/// Slope of the leaky rectifier used everywhere except the output layer.
pub const LEAKY_SLOPE: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct ArchConfig {
    pub k_neighbors: usize,
    /// Output width of each graph-convolution layer.
    pub layer_dims: Vec<usize>,
    pub global_dim: usize,
    pub dict_atoms: usize,
    pub head_hidden: usize,
    pub pad_rows: usize,
    pub pad_cols: usize,
    /// Clouds larger than this are deterministically subsampled before the
    /// graph is built.
    pub max_input_points: usize,
    /// Requested spline degrees of the predicted surface (clamped per
    /// direction to `count - 1`).
    pub spline_degrees: (usize, usize),
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            k_neighbors: 16,
            layer_dims: vec![64, 64, 128],
            global_dim: 256,
            dict_atoms: 16,
            head_hidden: 512,
            pad_rows: 8,
            pad_cols: 8,
            max_input_points: 256,
            spline_degrees: (3, 3),
        }
    }
}

impl ArchConfig {
    pub const KEYS: &'static [&'static str] = &[
        "k_neighbors",
        "layer_dims",
        "global_dim",
        "dict_atoms",
        "head_hidden",
        "pad_rows",
        "pad_cols",
        "max_input_points",
        "spline_degrees",
    ];

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.k_neighbors,
            self.global_dim,
            self.dict_atoms,
            self.head_hidden,
            self.pad_rows,
            self.pad_cols,
            self.spline_degrees.0,
            self.spline_degrees.1,
        ];
        if positive.contains(&0) || self.layer_dims.is_empty() || self.layer_dims.contains(&0) {
            return Err(Error::config("architecture sizes must all be positive"));
        }
        if self.max_input_points <= self.k_neighbors {
            return Err(Error::config("max_input_points must exceed k_neighbors"));
        }
        Ok(())
    }

    pub fn output_len(&self) -> usize {
        self.pad_rows * self.pad_cols * 3
    }

    /// Width of the skip-concatenated per-node feature.
    pub fn concat_dim(&self) -> usize {
        self.layer_dims.iter().sum()
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("k_neighbors", self.k_neighbors);
        kv.set("layer_dims", join_list(&self.layer_dims));
        kv.set("global_dim", self.global_dim);
        kv.set("dict_atoms", self.dict_atoms);
        kv.set("head_hidden", self.head_hidden);
        kv.set("pad_rows", self.pad_rows);
        kv.set("pad_cols", self.pad_cols);
        kv.set("max_input_points", self.max_input_points);
        kv.set(
            "spline_degrees",
            join_list(&[self.spline_degrees.0, self.spline_degrees.1]),
        );
        kv
    }

    pub fn apply_kv(mut self, kv: &KeyValues) -> Result<Self> {
        if let Some(v) = kv.get("k_neighbors")? {
            self.k_neighbors = v;
        }
        if let Some(v) = kv.get_str("layer_dims") {
            self.layer_dims = parse_list("layer_dims", v)?;
        }
        if let Some(v) = kv.get("global_dim")? {
            self.global_dim = v;
        }
        if let Some(v) = kv.get("dict_atoms")? {
            self.dict_atoms = v;
        }
        if let Some(v) = kv.get("head_hidden")? {
            self.head_hidden = v;
        }
        if let Some(v) = kv.get("pad_rows")? {
            self.pad_rows = v;
        }
        if let Some(v) = kv.get("pad_cols")? {
            self.pad_cols = v;
        }
        if let Some(v) = kv.get("max_input_points")? {
            self.max_input_points = v;
        }
        if let Some(v) = kv.get_str("spline_degrees") {
            let d: Vec<usize> = parse_list("spline_degrees", v)?;
            if d.len() != 2 {
                return Err(Error::config("spline_degrees expects two values"));
            }
            self.spline_degrees = (d[0], d[1]);
        }
        Ok(self)
    }

    /// Flat encoding stored in checkpoints.
    pub(crate) fn encode(&self) -> Vec<f64> {
        let mut v = vec![
            self.k_neighbors,
            self.global_dim,
            self.dict_atoms,
            self.head_hidden,
            self.pad_rows,
            self.pad_cols,
            self.max_input_points,
            self.spline_degrees.0,
            self.spline_degrees.1,
            self.layer_dims.len(),
        ];
        v.extend(&self.layer_dims);
        v.into_iter().map(|x| x as f64).collect()
    }

    pub(crate) fn decode(v: &[f64]) -> Result<Self> {
        let ints: Vec<usize> = v.iter().map(|&x| x as usize).collect();
        if ints.len() < 10 || ints.len() != 10 + ints[9] {
            return Err(Error::config("malformed architecture record"));
        }
        let arch = Self {
            k_neighbors: ints[0],
            global_dim: ints[1],
            dict_atoms: ints[2],
            head_hidden: ints[3],
            pad_rows: ints[4],
            pad_cols: ints[5],
            max_input_points: ints[6],
            spline_degrees: (ints[7], ints[8]),
            layer_dims: ints[10..].to_vec(),
        };
        arch.validate()?;
        Ok(arch)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Indices of each tensor in the registry.
#[derive(Clone, Copy, Debug)]
pub(crate) struct LayerSlots {
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Clone, Debug)]
pub(crate) struct Layout {
    pub layers: Vec<LayerSlots>,
    pub proj_w: usize,
    pub proj_b: usize,
    pub atoms: usize,
    pub head_w1: usize,
    pub head_b1: usize,
    pub head_w2: usize,
    pub head_b2: usize,
}

impl Layout {
    pub fn new(arch: &ArchConfig) -> Self {
        let l = arch.layer_dims.len();
        let layers = (0..l)
            .map(|i| LayerSlots {
                w1: 4 * i,
                b1: 4 * i + 1,
                w2: 4 * i + 2,
                b2: 4 * i + 3,
            })
            .collect();
        let base = 4 * l;
        Self {
            layers,
            proj_w: base,
            proj_b: base + 1,
            atoms: base + 2,
            head_w1: base + 3,
            head_b1: base + 4,
            head_w2: base + 5,
            head_b2: base + 6,
        }
    }
}

/// Named registry of every learnable tensor, in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    tensors: Vec<Tensor>,
}

impl ModelParams {
    /// Shapes for `arch`, all zero.
    pub fn zeros(arch: &ArchConfig) -> Self {
        let mut tensors = Vec::new();
        let mut c_in = 3;
        for (l, &c_out) in arch.layer_dims.iter().enumerate() {
            tensors.push(Tensor::zeros(format!("gconv{l}.w1"), &[2 * c_in, c_out]));
            tensors.push(Tensor::zeros(format!("gconv{l}.b1"), &[c_out]));
            tensors.push(Tensor::zeros(format!("gconv{l}.w2"), &[c_out, c_out]));
            tensors.push(Tensor::zeros(format!("gconv{l}.b2"), &[c_out]));
            c_in = c_out;
        }
        let pooled = 2 * arch.concat_dim();
        let out = arch.output_len();
        tensors.push(Tensor::zeros("proj.w", &[pooled, arch.global_dim]));
        tensors.push(Tensor::zeros("proj.b", &[arch.global_dim]));
        tensors.push(Tensor::zeros(
            "dict.atoms",
            &[arch.dict_atoms, arch.global_dim],
        ));
        tensors.push(Tensor::zeros(
            "head.w1",
            &[arch.global_dim, arch.head_hidden],
        ));
        tensors.push(Tensor::zeros("head.b1", &[arch.head_hidden]));
        tensors.push(Tensor::zeros("head.w2", &[arch.head_hidden, out]));
        tensors.push(Tensor::zeros("head.b2", &[out]));
        Self { tensors }
    }

    /// Weights uniform in `+-sqrt(6 / (fan_in + fan_out))`, biases zero,
    /// dictionary atoms normal with std 0.02.
    pub fn init(arch: &ArchConfig, rng: &mut impl Rng) -> Self {
        let mut p = Self::zeros(arch);
        let atom_dist = Normal::new(0.0, 0.02).unwrap();
        for t in &mut p.tensors {
            if t.name == "dict.atoms" {
                for x in &mut t.data {
                    *x = atom_dist.sample(rng);
                }
            } else if t.shape.len() == 2 {
                let bound = (6.0 / (t.shape[0] + t.shape[1]) as f64).sqrt();
                for x in &mut t.data {
                    *x = rng.random_range(-bound..bound);
                }
            }
        }
        p
    }

    pub fn from_tensors(arch: &ArchConfig, tensors: Vec<Tensor>) -> Result<Self> {
        let expected = Self::zeros(arch);
        if tensors.len() != expected.tensors.len() {
            return Err(Error::config(format!(
                "expected {} tensors, got {}",
                expected.tensors.len(),
                tensors.len()
            )));
        }
        for (t, e) in tensors.iter().zip(&expected.tensors) {
            if t.name != e.name || t.shape != e.shape || t.data.len() != e.data.len() {
                return Err(Error::config(format!(
                    "tensor {} {:?} does not match expected {} {:?}",
                    t.name, t.shape, e.name, e.shape
                )));
            }
        }
        Ok(Self { tensors })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor::zeros(t.name.clone(), &t.shape))
                .collect(),
        }
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.iter_mut().find(|t| t.name == name)
    }

    pub(crate) fn slot(&self, i: usize) -> &[f64] {
        &self.tensors[i].data
    }

    pub(crate) fn slot_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.tensors[i].data
    }

    pub(crate) fn slots_mut<const N: usize>(&mut self, idx: [usize; N]) -> [&mut [f64]; N] {
        self.tensors
            .get_disjoint_mut(idx)
            .expect("distinct tensor slots")
            .map(|t| t.data.as_mut_slice())
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// `self += scale * other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &ModelParams, scale: f64) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += scale * y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in &mut self.tensors {
            for x in &mut t.data {
                *x *= s;
            }
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors
            .iter()
            .flat_map(|t| t.data.iter())
            .fold(0.0, |m, x| m.max(x.abs()))
    }
}
