use std::collections::{BTreeMap, HashMap};

use super::groups::channel_sources;
use super::{compute_alignment_groups, PruneMask};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::zoo::{LayerKind, LayerSpec, ModelGraph, INPUT};

/// Physically removes masked filters: conv outputs lose rows, consumers
/// lose the matching input channels, batch-norm vectors shrink. The result
/// computes the same function as the masked model.
pub fn compact(model: &ModelGraph, mask: &PruneMask) -> Result<ModelGraph> {
    mask.check(model)?;
    let mut keep: HashMap<String, Vec<usize>> = HashMap::new();
    for g in compute_alignment_groups(model)? {
        let all_false = vec![false; g.filters];
        let first = mask.layers.get(&g.members[0]).unwrap_or(&all_false);
        for id in &g.members[1..] {
            if mask.layers.get(id).unwrap_or(&all_false) != first {
                return Err(Error::Invariant(format!(
                    "mask differs between aligned convs `{}` and `{id}`",
                    g.members[0]
                )));
            }
        }
        let kept: Vec<usize> = (0..g.filters).filter(|&i| !first[i]).collect();
        if kept.len() < g.filters && g.input_tied {
            return Err(Error::Invariant(format!(
                "mask prunes `{}`, whose channels are tied to the model input",
                g.members[0]
            )));
        }
        if kept.is_empty() {
            return Err(Error::Invariant(format!("mask prunes every filter of `{}`", g.members[0])));
        }
        for id in &g.members {
            keep.insert(id.clone(), kept.clone());
        }
    }

    let src = channel_sources(model);
    // kept channel indices of a layer's output; None keeps everything
    let kept_of = |id: &str| -> Option<&Vec<usize>> {
        let s = &src[id];
        if s.is_empty() || s.contains(INPUT) {
            None
        } else {
            s.iter().next().and_then(|c| keep.get(c))
        }
    };

    let mut layers = Vec::with_capacity(model.layers().len());
    let mut params = BTreeMap::new();
    let mut buffers = BTreeMap::new();
    for l in model.layers() {
        let id = &l.id;
        let kind = match l.kind {
            LayerKind::Conv {
                in_channels,
                filters,
                kernel,
                stride,
                pad,
            } => {
                let rows = kept_of(id).cloned().unwrap_or_else(|| (0..filters).collect());
                let cols = kept_of(&l.inputs[0]).cloned().unwrap_or_else(|| (0..in_channels).collect());
                let name = format!("{id}.weight");
                params.insert(name.clone(), select_conv(&model.params()[&name], &rows, &cols)?);
                LayerKind::Conv {
                    in_channels: cols.len(),
                    filters: rows.len(),
                    kernel,
                    stride,
                    pad,
                }
            }
            LayerKind::Bn { channels } => {
                let ch = kept_of(id).cloned().unwrap_or_else(|| (0..channels).collect());
                for suffix in ["weight", "bias"] {
                    let name = format!("{id}.{suffix}");
                    params.insert(name.clone(), select_vec(&model.params()[&name], &ch)?);
                }
                for suffix in ["running_mean", "running_var"] {
                    let name = format!("{id}.{suffix}");
                    buffers.insert(name.clone(), select_vec(&model.buffers()[&name], &ch)?);
                }
                LayerKind::Bn { channels: ch.len() }
            }
            LayerKind::Linear {
                in_features,
                out_features,
            } => {
                let cols = kept_of(&l.inputs[0]).cloned().unwrap_or_else(|| (0..in_features).collect());
                let w = format!("{id}.weight");
                let b = format!("{id}.bias");
                let rows: Vec<usize> = (0..out_features).collect();
                params.insert(w.clone(), select_matrix(&model.params()[&w], &rows, &cols)?);
                params.insert(b.clone(), model.params()[&b].clone());
                LayerKind::Linear {
                    in_features: cols.len(),
                    out_features,
                }
            }
            ref other => other.clone(),
        };
        layers.push(LayerSpec {
            id: id.clone(),
            kind,
            inputs: l.inputs.clone(),
        });
    }
    model.with_layers(layers, params, buffers)
}

fn finish(src: &Tensor, shape: &[usize], data: Vec<f32>) -> Result<Tensor> {
    Ok(Tensor::new(shape, data)?.with_requires_grad(src.requires_grad()))
}

fn select_vec(t: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let d = t.data();
    finish(t, &[idx.len()], idx.iter().map(|&i| d[i]).collect())
}

fn select_matrix(t: &Tensor, rows: &[usize], cols: &[usize]) -> Result<Tensor> {
    let width = t.shape()[1];
    let d = t.data();
    let data = rows
        .iter()
        .flat_map(|&r| cols.iter().map(move |&c| d[r * width + c]))
        .collect();
    finish(t, &[rows.len(), cols.len()], data)
}

fn select_conv(t: &Tensor, rows: &[usize], cols: &[usize]) -> Result<Tensor> {
    let s = t.shape();
    let (c, kk) = (s[1], s[2] * s[3]);
    let d = t.data();
    let mut data = Vec::with_capacity(rows.len() * cols.len() * kk);
    for &f in rows {
        for &ch in cols {
            let off = (f * c + ch) * kk;
            data.extend_from_slice(&d[off..off + kk]);
        }
    }
    finish(t, &[rows.len(), cols.len(), s[2], s[3]], data)
}
