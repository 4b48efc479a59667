//! Model graphs: typed layer lists with named parameters, ResNet builders
//! and the binary checkpoint format.
//!
//! A [`ModelGraph`] is a topologically ordered list of [`LayerSpec`]s.
//! Skip connections are explicit `add` layers, so the pruning engine can
//! see which convolutions share output channels.

mod builder;
pub mod checkpoint;
mod resnet;

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::autodiff::{BnStats, PoolSpec, RunningStats, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use builder::GraphBuilder;
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use resnet::{build_resnet, resnet_layout, BlockKind, ResnetLayout, SUPPORTED_DEPTHS};

/// Producer id that refers to the graph input.
pub const INPUT: &str = "input";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    /// Bias-free convolution with square kernels.
    Conv {
        in_channels: usize,
        filters: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    Bn {
        channels: usize,
    },
    Relu,
    MaxPool {
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    Gap,
    Linear {
        in_features: usize,
        out_features: usize,
    },
    Add,
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Conv { .. } => "conv",
            LayerKind::Bn { .. } => "bn",
            LayerKind::Relu => "relu",
            LayerKind::MaxPool { .. } => "maxpool",
            LayerKind::Gap => "gap",
            LayerKind::Linear { .. } => "linear",
            LayerKind::Add => "add",
        }
    }

    fn arity(&self) -> usize {
        match self {
            LayerKind::Add => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub id: String,
    #[serde(flatten)]
    pub kind: LayerKind,
    pub inputs: Vec<String>,
}

impl LayerSpec {
    pub fn new(id: impl Into<String>, kind: LayerKind, inputs: &[&str]) -> Self {
        LayerSpec {
            id: id.into(),
            kind,
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    /// ResNet depth label; `None` for hand-built graphs.
    pub depth: Option<u32>,
    pub width_scale: f64,
    pub num_classes: usize,
    /// `[C, H, W]` of one input image.
    pub input_shape: [usize; 3],
}

/// Whether a named tensor is a trainable parameter or a running statistic.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorRole {
    Param,
    Buffer,
}

/// Name, shape and role of every tensor a layer list implies, in layer
/// order (weight before bias, mean before variance).
pub fn tensor_layout(layers: &[LayerSpec]) -> Vec<(String, Vec<usize>, TensorRole)> {
    let mut out = Vec::new();
    for l in layers {
        let id = &l.id;
        match l.kind {
            LayerKind::Conv {
                in_channels,
                filters,
                kernel,
                ..
            } => out.push((
                format!("{id}.weight"),
                vec![filters, in_channels, kernel, kernel],
                TensorRole::Param,
            )),
            LayerKind::Bn { channels } => {
                out.push((format!("{id}.weight"), vec![channels], TensorRole::Param));
                out.push((format!("{id}.bias"), vec![channels], TensorRole::Param));
                out.push((format!("{id}.running_mean"), vec![channels], TensorRole::Buffer));
                out.push((format!("{id}.running_var"), vec![channels], TensorRole::Buffer));
            }
            LayerKind::Linear {
                in_features,
                out_features,
            } => {
                out.push((
                    format!("{id}.weight"),
                    vec![out_features, in_features],
                    TensorRole::Param,
                ));
                out.push((format!("{id}.bias"), vec![out_features], TensorRole::Param));
            }
            _ => {}
        }
    }
    out
}

/// Per-layer output shapes for one image (`[C, H, W]` or `[D]`), checking
/// every structural constraint of the layer list along the way.
pub fn infer_shapes(layers: &[LayerSpec], input_shape: [usize; 3]) -> Result<Vec<Vec<usize>>> {
    let mut shapes: HashMap<&str, Vec<usize>> = HashMap::new();
    let mut out = Vec::with_capacity(layers.len());
    for l in layers {
        if l.inputs.len() != l.kind.arity() {
            return Err(Error::Config(format!(
                "layer `{}` ({}) needs {} input(s), has {}",
                l.id,
                l.kind.name(),
                l.kind.arity(),
                l.inputs.len()
            )));
        }
        let mut ins = Vec::with_capacity(l.inputs.len());
        for p in &l.inputs {
            let s = if p == INPUT {
                input_shape.to_vec()
            } else {
                shapes
                    .get(p.as_str())
                    .cloned()
                    .ok_or_else(|| Error::Config(format!("layer `{}` reads unknown or later layer `{p}`", l.id)))?
            };
            ins.push(s);
        }
        let spatial = |s: &[usize]| -> Result<[usize; 3]> {
            match *s {
                [c, h, w] => Ok([c, h, w]),
                _ => Err(Error::Dimension(format!(
                    "layer `{}` ({}) needs a [C, H, W] input, got {s:?}",
                    l.id,
                    l.kind.name()
                ))),
            }
        };
        let shape = match l.kind {
            LayerKind::Conv {
                in_channels,
                filters,
                kernel,
                stride,
                pad,
            } => {
                let [c, h, w] = spatial(&ins[0])?;
                if c != in_channels {
                    return Err(Error::Dimension(format!(
                        "conv `{}` expects {in_channels} channels, input has {c}",
                        l.id
                    )));
                }
                if filters == 0 || kernel == 0 {
                    return Err(Error::Config(format!("conv `{}` has an empty kernel or no filters", l.id)));
                }
                let oh = crate::autodiff::conv_out_extent(h, kernel, stride, pad)?;
                let ow = crate::autodiff::conv_out_extent(w, kernel, stride, pad)?;
                vec![filters, oh, ow]
            }
            LayerKind::Bn { channels } => {
                let [c, h, w] = spatial(&ins[0])?;
                if c != channels {
                    return Err(Error::Dimension(format!(
                        "bn `{}` has {channels} channels, input has {c}",
                        l.id
                    )));
                }
                vec![c, h, w]
            }
            LayerKind::Relu => ins[0].clone(),
            LayerKind::MaxPool { kernel, stride, pad } => {
                let [c, h, w] = spatial(&ins[0])?;
                if stride == 0 || kernel == 0 || pad >= kernel {
                    return Err(Error::Config(format!("maxpool `{}` has an invalid window", l.id)));
                }
                let oh = crate::autodiff::conv_out_extent(h, kernel, stride, pad)?;
                let ow = crate::autodiff::conv_out_extent(w, kernel, stride, pad)?;
                vec![c, oh, ow]
            }
            LayerKind::Gap => {
                let [c, _, _] = spatial(&ins[0])?;
                vec![c]
            }
            LayerKind::Linear {
                in_features,
                out_features,
            } => {
                if ins[0] != [in_features] {
                    return Err(Error::Dimension(format!(
                        "linear `{}` expects [{in_features}] features, input is {:?}",
                        l.id, ins[0]
                    )));
                }
                vec![out_features]
            }
            LayerKind::Add => {
                if ins[0] != ins[1] {
                    return Err(Error::Dimension(format!(
                        "add `{}` joins mismatched shapes {:?} and {:?}",
                        l.id, ins[0], ins[1]
                    )));
                }
                ins[0].clone()
            }
        };
        shapes.insert(&l.id, shape.clone());
        out.push(shape);
    }
    Ok(out)
}

fn validate_layers(layers: &[LayerSpec], meta: &ModelMeta) -> Result<()> {
    let mut seen = HashSet::new();
    for l in layers {
        if l.id == INPUT || l.id.is_empty() || l.id.contains('\0') {
            return Err(Error::Config(format!("invalid layer id `{}`", l.id)));
        }
        if !seen.insert(l.id.as_str()) {
            return Err(Error::Config(format!("duplicate layer id `{}`", l.id)));
        }
    }
    let last = layers
        .last()
        .ok_or_else(|| Error::Config("model has no layers".into()))?;
    let shapes = infer_shapes(layers, meta.input_shape)?;
    if shapes.last().map(Vec::as_slice) != Some(&[meta.num_classes][..]) {
        return Err(Error::Config(format!(
            "final layer `{}` must emit {} logits, emits {:?}",
            last.id,
            meta.num_classes,
            shapes.last()
        )));
    }
    let consumed: HashSet<&str> = layers
        .iter()
        .flat_map(|l| l.inputs.iter().map(String::as_str))
        .collect();
    if let Some(l) = layers[..layers.len() - 1]
        .iter()
        .find(|l| !consumed.contains(l.id.as_str()))
    {
        return Err(Error::Config(format!("layer `{}` feeds nothing", l.id)));
    }
    Ok(())
}

/// A layered model with its parameters and batch-norm running statistics.
#[derive(Debug, Clone)]
pub struct ModelGraph {
    meta: ModelMeta,
    layers: Vec<LayerSpec>,
    params: BTreeMap<String, Tensor>,
    buffers: BTreeMap<String, Tensor>,
}

/// Tape handles of one recorded forward pass.
pub struct Recorded {
    pub logits: Var,
    /// Parameter name and its leaf on the tape.
    pub params: Vec<(String, Var)>,
}

enum Stats<'a> {
    Update(&'a mut BTreeMap<String, Tensor>),
    Batch,
    Fixed(&'a BTreeMap<String, Tensor>),
}

impl ModelGraph {
    /// Assembles a model, checking the layers and that every tensor has the
    /// shape its layer implies.
    pub fn from_parts(
        meta: ModelMeta,
        layers: Vec<LayerSpec>,
        params: BTreeMap<String, Tensor>,
        buffers: BTreeMap<String, Tensor>,
    ) -> Result<Self> {
        validate_layers(&layers, &meta)?;
        let layout = tensor_layout(&layers);
        let n_params = layout.iter().filter(|t| t.2 == TensorRole::Param).count();
        if n_params != params.len() || layout.len() - n_params != buffers.len() {
            return Err(Error::Config(format!(
                "expected {} parameters and {} buffers, got {} and {}",
                n_params,
                layout.len() - n_params,
                params.len(),
                buffers.len()
            )));
        }
        for (name, shape, role) in &layout {
            let store = match role {
                TensorRole::Param => &params,
                TensorRole::Buffer => &buffers,
            };
            let t = store
                .get(name)
                .ok_or_else(|| Error::Config(format!("missing tensor `{name}`")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Dimension(format!(
                    "tensor `{name}` has shape {:?}, layer implies {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(ModelGraph {
            meta,
            layers,
            params,
            buffers,
        })
    }

    pub fn meta(&self) -> &ModelMeta {
        &self.meta
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn layer(&self, id: &str) -> Option<&LayerSpec> {
        self.layers.iter().find(|l| l.id == id)
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn buffers(&self) -> &BTreeMap<String, Tensor> {
        &self.buffers
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn buffer_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.buffers.get_mut(name)
    }

    /// Parameters in name order, for handing to an optimizer.
    pub fn params_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Parameters and buffers in name order.
    pub fn named_tensors(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params
            .iter()
            .chain(self.buffers.iter())
            .map(|(k, v)| (k.as_str(), v))
    }

    /// Output shape of every layer for one image.
    pub fn shapes(&self) -> Vec<Vec<usize>> {
        infer_shapes(&self.layers, self.meta.input_shape).expect("validated at construction")
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.params.values_mut().for_each(|t| t.set_requires_grad(flag));
    }

    pub fn zero_grads(&mut self) {
        self.params.values_mut().for_each(Tensor::clear_grad);
    }

    /// Every tensor finite.
    pub fn is_finite(&self) -> bool {
        self.named_tensors().all(|(_, t)| t.is_finite())
    }

    fn check_batch(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 || shape[1..] != self.meta.input_shape || shape[0] == 0 {
            return Err(Error::Dimension(format!(
                "batch shape {shape:?} does not match model input [N, {}, {}, {}]",
                self.meta.input_shape[0], self.meta.input_shape[1], self.meta.input_shape[2]
            )));
        }
        Ok(())
    }

    /// Records a training-mode pass: batch-norm uses batch statistics and
    /// updates the running averages.
    pub fn forward_train(&mut self, tape: &mut Tape, input: Var) -> Result<Recorded> {
        self.check_batch(tape.shape(input))?;
        run(&self.layers, &self.params, Stats::Update(&mut self.buffers), tape, input, true)
    }

    /// Records a training-mode pass without touching the running averages.
    pub fn forward_batch_stats(&self, tape: &mut Tape, input: Var) -> Result<Recorded> {
        self.check_batch(tape.shape(input))?;
        run(&self.layers, &self.params, Stats::Batch, tape, input, true)
    }

    /// Records an inference-mode pass (running statistics).
    pub fn forward_eval(&self, tape: &mut Tape, input: Var) -> Result<Recorded> {
        self.check_batch(tape.shape(input))?;
        run(&self.layers, &self.params, Stats::Fixed(&self.buffers), tape, input, true)
    }

    /// Inference logits `[N, num_classes]`.
    pub fn forward(&self, batch: &Tensor) -> Result<Tensor> {
        self.check_batch(batch.shape())?;
        let mut tape = Tape::new();
        let x = tape.leaf_with_grad(batch, false);
        let rec = run(&self.layers, &self.params, Stats::Fixed(&self.buffers), &mut tape, x, false)?;
        Ok(tape.take_value(rec.logits))
    }

    /// Inference output of layer `id` for `[N, ...]` batch (everything
    /// after it is skipped).
    pub fn forward_to(&self, batch: &Tensor, id: &str) -> Result<Tensor> {
        self.check_batch(batch.shape())?;
        let end = self
            .layers
            .iter()
            .position(|l| l.id == id)
            .ok_or_else(|| Error::Usage(format!("no layer `{id}`")))?;
        let mut tape = Tape::new();
        let x = tape.leaf_with_grad(batch, false);
        let rec = run(&self.layers[..=end], &self.params, Stats::Fixed(&self.buffers), &mut tape, x, false)?;
        Ok(tape.take_value(rec.logits))
    }

    /// Copies gradients from the tape into the parameter tensors,
    /// accumulating onto any gradient already present.
    pub fn store_grads(&mut self, tape: &Tape, rec: &Recorded) -> Result<()> {
        for (name, var) in &rec.params {
            if let Some(g) = tape.grad(*var) {
                let t = self
                    .params
                    .get_mut(name)
                    .ok_or_else(|| Error::Usage(format!("unknown parameter `{name}`")))?;
                t.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    /// Replaces the layer list and tensors with a structurally different
    /// version (used by compaction).
    pub fn with_layers(
        &self,
        layers: Vec<LayerSpec>,
        params: BTreeMap<String, Tensor>,
        buffers: BTreeMap<String, Tensor>,
    ) -> Result<ModelGraph> {
        ModelGraph::from_parts(self.meta.clone(), layers, params, buffers)
    }
}

fn run(
    layers: &[LayerSpec],
    params: &BTreeMap<String, Tensor>,
    mut stats: Stats<'_>,
    tape: &mut Tape,
    input: Var,
    track: bool,
) -> Result<Recorded> {
    let mut vars: HashMap<&str, Var> = HashMap::new();
    let mut recorded = Vec::new();
    let mut last = input;
    let mut leaf = |tape: &mut Tape, name: &str| {
        if track {
            let v = tape.leaf(&params[name]);
            recorded.push((name.to_string(), v));
            v
        } else {
            tape.leaf_with_grad(&params[name], false)
        }
    };
    for l in layers {
        let x = |i: usize| if l.inputs[i] == INPUT { input } else { vars[l.inputs[i].as_str()] };
        let second = if l.inputs.len() > 1 { Some(x(1)) } else { None };
        let y = apply(l, x(0), second, tape, &mut leaf, &mut stats)?;
        vars.insert(&l.id, y);
        last = y;
    }
    Ok(Recorded {
        logits: last,
        params: recorded,
    })
}

fn apply(
    l: &LayerSpec,
    x: Var,
    second: Option<Var>,
    tape: &mut Tape,
    param: &mut dyn FnMut(&mut Tape, &str) -> Var,
    stats: &mut Stats<'_>,
) -> Result<Var> {
    let id = &l.id;
    match l.kind {
        LayerKind::Conv { stride, pad, .. } => {
            let w = param(tape, &format!("{id}.weight"));
            tape.conv2d(x, w, stride, pad)
        }
        LayerKind::Bn { .. } => {
            let g = param(tape, &format!("{id}.weight"));
            let b = param(tape, &format!("{id}.bias"));
            let (mk, vk) = (format!("{id}.running_mean"), format!("{id}.running_var"));
            match stats {
                Stats::Update(buffers) => {
                    let mut mean = buffers.remove(&mk).expect("validated buffer");
                    let mut var = buffers.remove(&vk).expect("validated buffer");
                    let out = tape.batch_norm(
                        x,
                        g,
                        b,
                        BnStats::Batch(Some(RunningStats {
                            mean: mean.data_mut(),
                            var: var.data_mut(),
                        })),
                    );
                    buffers.insert(mk, mean);
                    buffers.insert(vk, var);
                    out
                }
                Stats::Batch => tape.batch_norm(x, g, b, BnStats::Batch(None)),
                Stats::Fixed(buffers) => tape.batch_norm(
                    x,
                    g,
                    b,
                    BnStats::Running {
                        mean: buffers[&mk].data(),
                        var: buffers[&vk].data(),
                    },
                ),
            }
        }
        LayerKind::Relu => Ok(tape.relu(x)),
        LayerKind::MaxPool { kernel, stride, pad } => tape.max_pool(x, PoolSpec { kernel, stride, pad }),
        LayerKind::Gap => tape.global_avg_pool(x),
        LayerKind::Linear { .. } => {
            let w = param(tape, &format!("{id}.weight"));
            let b = param(tape, &format!("{id}.bias"));
            tape.linear(x, w, Some(b))
        }
        LayerKind::Add => tape.add(x, second.expect("add arity validated")),
    }
}

#[cfg(test)]
mod tests;
