use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{tensor_layout, LayerKind, LayerSpec, ModelGraph, ModelMeta, TensorRole, INPUT};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Incremental construction of a [`ModelGraph`] that tracks channel counts,
/// so callers only state filter counts.
///
/// ```
/// use filterprune::zoo::GraphBuilder;
/// let mut b = GraphBuilder::new([1, 8, 8]);
/// let c = b.conv("conv", "input", 4, 3, 1, 1);
/// let p = b.gap("pool", &c);
/// b.linear("fc", &p, 2);
/// let model = b.build(None, 1.0, 7).unwrap();
/// assert_eq!(model.layers().len(), 3);
/// ```
pub struct GraphBuilder {
    input_shape: [usize; 3],
    layers: Vec<LayerSpec>,
    width: HashMap<String, usize>,
}

impl GraphBuilder {
    pub fn new(input_shape: [usize; 3]) -> Self {
        let mut width = HashMap::new();
        width.insert(INPUT.to_string(), input_shape[0]);
        GraphBuilder {
            input_shape,
            layers: Vec::new(),
            width,
        }
    }

    /// Channel (or feature) count produced by `id`; 0 if unknown.
    pub fn width_of(&self, id: &str) -> usize {
        self.width.get(id).copied().unwrap_or(0)
    }

    fn push(&mut self, id: &str, kind: LayerKind, inputs: &[&str], width: usize) -> String {
        self.layers.push(LayerSpec::new(id, kind, inputs));
        self.width.insert(id.to_string(), width);
        id.to_string()
    }

    pub fn conv(&mut self, id: &str, from: &str, filters: usize, kernel: usize, stride: usize, pad: usize) -> String {
        let kind = LayerKind::Conv {
            in_channels: self.width_of(from),
            filters,
            kernel,
            stride,
            pad,
        };
        self.push(id, kind, &[from], filters)
    }

    pub fn bn(&mut self, id: &str, from: &str) -> String {
        let c = self.width_of(from);
        self.push(id, LayerKind::Bn { channels: c }, &[from], c)
    }

    pub fn relu(&mut self, id: &str, from: &str) -> String {
        let c = self.width_of(from);
        self.push(id, LayerKind::Relu, &[from], c)
    }

    pub fn max_pool(&mut self, id: &str, from: &str, kernel: usize, stride: usize, pad: usize) -> String {
        let c = self.width_of(from);
        self.push(id, LayerKind::MaxPool { kernel, stride, pad }, &[from], c)
    }

    pub fn gap(&mut self, id: &str, from: &str) -> String {
        let c = self.width_of(from);
        self.push(id, LayerKind::Gap, &[from], c)
    }

    pub fn linear(&mut self, id: &str, from: &str, out_features: usize) -> String {
        let kind = LayerKind::Linear {
            in_features: self.width_of(from),
            out_features,
        };
        self.push(id, kind, &[from], out_features)
    }

    pub fn add(&mut self, id: &str, a: &str, b: &str) -> String {
        let c = self.width_of(a);
        self.push(id, LayerKind::Add, &[a, b], c)
    }

    /// Layers added so far.
    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    /// Validates the graph and initializes its tensors from `seed`. The
    /// class count is taken from the final linear layer.
    pub fn build(self, depth: Option<u32>, width_scale: f64, seed: u64) -> Result<ModelGraph> {
        let num_classes = match self.layers.last().map(|l| &l.kind) {
            Some(LayerKind::Linear { out_features, .. }) => *out_features,
            _ => return Err(Error::Config("model must end in a linear layer".into())),
        };
        let meta = ModelMeta {
            depth,
            width_scale,
            num_classes,
            input_shape: self.input_shape,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (params, buffers) = init_tensors(&self.layers, &mut rng)?;
        ModelGraph::from_parts(meta, self.layers, params, buffers)
    }
}

/// Fresh tensors for a layer list: He fan-in normal conv weights, unit
/// gamma and zero beta, zero/one running statistics, and linear weights
/// and biases uniform in `±1/sqrt(fan_in)`.
pub fn init_tensors(
    layers: &[LayerSpec],
    rng: &mut impl Rng,
) -> Result<(BTreeMap<String, Tensor>, BTreeMap<String, Tensor>)> {
    let mut params = BTreeMap::new();
    let mut buffers = BTreeMap::new();
    for (name, shape, role) in tensor_layout(layers) {
        let n: usize = shape.iter().product();
        let data = if name.ends_with(".running_var") {
            vec![1.0; n]
        } else if name.ends_with(".running_mean") {
            vec![0.0; n]
        } else if shape.len() == 4 {
            let fan_in = (shape[1] * shape[2] * shape[3]).max(1) as f32;
            let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).map_err(|e| Error::Config(e.to_string()))?;
            (0..n).map(|_| normal.sample(rng)).collect()
        } else if shape.len() == 2 || linear_bias(layers, &name) {
            let fan_in = linear_fan_in(layers, &name).max(1) as f32;
            let bound = 1.0 / fan_in.sqrt();
            (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
        } else if name.ends_with(".weight") {
            vec![1.0; n]
        } else {
            vec![0.0; n]
        };
        let t = Tensor::new(&shape, data)?;
        match role {
            TensorRole::Param => params.insert(name, t.with_requires_grad(true)),
            TensorRole::Buffer => buffers.insert(name, t),
        };
    }
    Ok((params, buffers))
}

fn owner<'a>(layers: &'a [LayerSpec], name: &str) -> Option<&'a LayerSpec> {
    let id = name.rsplit_once('.').map(|(id, _)| id)?;
    layers.iter().find(|l| l.id == id)
}

fn linear_bias(layers: &[LayerSpec], name: &str) -> bool {
    name.ends_with(".bias") && matches!(owner(layers, name).map(|l| &l.kind), Some(LayerKind::Linear { .. }))
}

fn linear_fan_in(layers: &[LayerSpec], name: &str) -> usize {
    match owner(layers, name).map(|l| &l.kind) {
        Some(LayerKind::Linear { in_features, .. }) => *in_features,
        _ => 1,
    }
}
