//! Structured filter pruning: l_p filter norms, hard pruning rounds with
//! frozen masks, asymptotic soft filter pruning, residual-aware alignment
//! groups and compaction into a physically smaller model.

mod asfp;
mod compact;
mod groups;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::zoo::{LayerKind, ModelGraph};

pub use asfp::{asfp_epoch_end, asfp_rate, AsfpSchedule};
pub use compact::compact;
pub use groups::{compute_alignment_groups, AlignmentGroup};

/// Default exponent of the l_p filter criterion.
pub const DEFAULT_NORM_P: f64 = 2.0;

/// Per-conv-layer filter masks (`true` = pruned) and the freeze flag that
/// distinguishes hard pruning (frozen) from soft pruning.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PruneMask {
    pub layers: BTreeMap<String, Vec<bool>>,
    pub freeze: bool,
}

impl PruneMask {
    /// Mask with no pruned filters for every conv layer of `model`.
    pub fn empty(model: &ModelGraph, freeze: bool) -> Self {
        let layers = model
            .layers()
            .iter()
            .filter_map(|l| match l.kind {
                LayerKind::Conv { filters, .. } => Some((l.id.clone(), vec![false; filters])),
                _ => None,
            })
            .collect();
        PruneMask { layers, freeze }
    }

    /// True when no filter is pruned.
    pub fn is_empty(&self) -> bool {
        self.layers.values().all(|m| m.iter().all(|&p| !p))
    }

    pub fn pruned_count(&self, id: &str) -> usize {
        self.layers.get(id).map_or(0, |m| m.iter().filter(|&&p| p).count())
    }

    /// Unpruned filters of layer `id` (0 for unknown layers).
    pub fn active_count(&self, id: &str) -> usize {
        self.layers.get(id).map_or(0, |m| m.iter().filter(|&&p| !p).count())
    }

    /// Checks that every entry names a conv layer of `model` with matching
    /// filter count.
    pub fn check(&self, model: &ModelGraph) -> Result<()> {
        for (id, m) in &self.layers {
            match model.layer(id).map(|l| &l.kind) {
                Some(LayerKind::Conv { filters, .. }) if *filters == m.len() => {}
                Some(LayerKind::Conv { filters, .. }) => {
                    return Err(Error::Dimension(format!(
                        "mask for `{id}` has {} entries, layer has {filters} filters",
                        m.len()
                    )))
                }
                _ => return Err(Error::Dimension(format!("mask names `{id}`, which is not a conv layer"))),
            }
        }
        Ok(())
    }
}

/// Per-filter `(sum |w|^p)^(1/p)` of a `[F, C, k, k]` weight, in f64.
pub fn filter_norm(weight: &Tensor, p: f64) -> Result<Vec<f64>> {
    if !(p > 0.0 && p.is_finite()) {
        return Err(Error::Config(format!("l_p exponent must be positive, got {p}")));
    }
    let f = match weight.shape() {
        [f, ..] if weight.rank() == 4 => *f,
        s => return Err(Error::Dimension(format!("filter_norm expects [F, C, k, k], got {s:?}"))),
    };
    let per = weight.numel() / f.max(1);
    Ok(weight
        .data()
        .chunks(per.max(1))
        .take(f)
        .map(|row| {
            if p == 2.0 {
                row.iter().map(|&w| (w as f64) * (w as f64)).sum::<f64>().sqrt()
            } else if p == 1.0 {
                row.iter().map(|&w| (w as f64).abs()).sum::<f64>()
            } else {
                row.iter().map(|&w| (w as f64).abs().powf(p)).sum::<f64>().powf(1.0 / p)
            }
        })
        .collect())
}

/// `floor(rate * n)` with a guard against products such as 0.29 * 100
/// landing just below an integer.
pub(crate) fn floor_count(rate: f64, n: usize) -> usize {
    ((rate * n as f64) + 1e-9).floor() as usize
}

/// Picks `floor(rate * F_active)` filters with the lowest norms among the
/// filters not already pruned; ties go to the lower index. Returned
/// indices are ascending.
pub fn select_filters(norms: &[f64], rate: f64, already_pruned: &[bool]) -> Vec<usize> {
    let mut active: Vec<usize> = (0..norms.len())
        .filter(|&i| !already_pruned.get(i).copied().unwrap_or(false))
        .collect();
    let take = floor_count(rate.clamp(0.0, 1.0), active.len()).min(active.len());
    active.sort_by(|&a, &b| norms[a].total_cmp(&norms[b]).then(a.cmp(&b)));
    let mut chosen = active[..take].to_vec();
    chosen.sort_unstable();
    chosen
}

/// Group norm per filter: the member convs' filter norms summed.
pub fn group_norms(model: &ModelGraph, group: &AlignmentGroup, p: f64) -> Result<Vec<f64>> {
    let mut total = vec![0.0; group.filters];
    for id in &group.members {
        let w = model
            .param(&format!("{id}.weight"))
            .ok_or_else(|| Error::Usage(format!("no weight for conv `{id}`")))?;
        for (t, n) in total.iter_mut().zip(filter_norm(w, p)?) {
            *t += n;
        }
    }
    Ok(total)
}

fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("pruning rate {rate} outside [0, 1)")));
    }
    Ok(())
}

/// One hard pruning round: for every prunable group, prunes `rate` of the
/// still-active filters by group norm, keeps earlier rounds' filters
/// pruned, zeroes the pruned channels and returns the frozen mask.
pub fn hard_prune_round(model: &mut ModelGraph, mask: &PruneMask, rate: f64, p: f64) -> Result<PruneMask> {
    check_rate(rate)?;
    mask.check(model)?;
    if rate == 0.0 {
        return Ok(mask.clone());
    }
    let mut next = PruneMask::empty(model, true);
    for (id, m) in &mask.layers {
        next.layers.insert(id.clone(), m.clone());
    }
    for g in compute_alignment_groups(model)? {
        if !g.prunable {
            continue;
        }
        let norms = group_norms(model, &g, p)?;
        let mut already = vec![false; g.filters];
        for id in &g.members {
            for (a, &m) in already.iter_mut().zip(&next.layers[id]) {
                *a |= m;
            }
        }
        for i in select_filters(&norms, rate, &already) {
            already[i] = true;
        }
        for id in &g.members {
            next.layers.insert(id.clone(), already.clone());
        }
    }
    enforce_mask(model, &next)?;
    Ok(next)
}

/// Per-channel masks of the batch-norm layers that normalize pruned conv
/// outputs, keyed by BN id.
fn bn_masks(model: &ModelGraph, mask: &PruneMask) -> BTreeMap<String, Vec<bool>> {
    let src = groups::channel_sources(model);
    let mut out = BTreeMap::new();
    for l in model.layers() {
        if let LayerKind::Bn { channels } = l.kind {
            let mut m = vec![false; channels];
            let mut any = false;
            for conv in &src[&l.id] {
                if let Some(cm) = mask.layers.get(conv) {
                    for (a, &b) in m.iter_mut().zip(cm) {
                        *a |= b;
                    }
                    any = true;
                }
            }
            if any && m.iter().any(|&b| b) {
                out.insert(l.id.clone(), m);
            }
        }
    }
    out
}

fn zero_rows(t: &mut Tensor, mask: &[bool], with_grad: bool) {
    let per = t.numel() / mask.len().max(1);
    let (data, grad) = t.data_and_grad_mut();
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        data[i * per..(i + 1) * per].fill(0.0);
    }
    if let Some(g) = grad.filter(|_| with_grad) {
        for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
            g[i * per..(i + 1) * per].fill(0.0);
        }
    }
}

/// Zeroes every masked channel: the conv filters and the batch-norm terms
/// of the same channels.
///
/// A frozen (hard) mask zeroes gamma, beta and both running statistics, and
/// any stored gradients of those entries. A soft mask zeroes the filters,
/// beta and the running mean but keeps gamma and the running variance: the
/// channel still emits exactly zero, and once the optimizer (momentum from
/// earlier steps) moves the filter off zero, batch norm rescales it and the
/// filter trains again.
pub fn enforce_mask(model: &mut ModelGraph, mask: &PruneMask) -> Result<()> {
    mask.check(model)?;
    for (id, m) in &mask.layers {
        if m.iter().any(|&b| b) {
            let w = model.param_mut(&format!("{id}.weight")).expect("checked conv");
            zero_rows(w, m, mask.freeze);
        }
    }
    for (bn, m) in bn_masks(model, mask) {
        if mask.freeze {
            zero_rows(model.param_mut(&format!("{bn}.weight")).expect("bn gamma"), &m, true);
            zero_rows(model.buffer_mut(&format!("{bn}.running_var")).expect("bn var"), &m, true);
        }
        zero_rows(model.param_mut(&format!("{bn}.bias")).expect("bn beta"), &m, mask.freeze);
        zero_rows(model.buffer_mut(&format!("{bn}.running_mean")).expect("bn mean"), &m, mask.freeze);
    }
    Ok(())
}

/// Zeroes the stored gradients of every masked entry (filters and BN
/// affine terms), leaving values untouched. Called between backward and
/// the optimizer step while a frozen mask is active.
pub fn freeze_gradients(model: &mut ModelGraph, mask: &PruneMask) -> Result<()> {
    mask.check(model)?;
    let mut targets: Vec<(String, Vec<bool>)> = mask
        .layers
        .iter()
        .filter(|(_, m)| m.iter().any(|&b| b))
        .map(|(id, m)| (format!("{id}.weight"), m.clone()))
        .collect();
    for (bn, m) in bn_masks(model, mask) {
        targets.push((format!("{bn}.weight"), m.clone()));
        targets.push((format!("{bn}.bias"), m));
    }
    for (name, m) in targets {
        let t = model.param_mut(&name).expect("masked parameter exists");
        let per = t.numel() / m.len().max(1);
        if let Some(g) = t.grad_mut() {
            for (i, _) in m.iter().enumerate().filter(|(_, &b)| b) {
                g[i * per..(i + 1) * per].fill(0.0);
            }
        }
    }
    Ok(())
}
