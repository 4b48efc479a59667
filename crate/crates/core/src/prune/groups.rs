use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::zoo::{LayerKind, ModelGraph, INPUT};

/// Convolutions whose output channels are tied together by residual
/// additions and therefore share one filter mask.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignmentGroup {
    /// Conv layer ids in graph order.
    pub members: Vec<String>,
    pub filters: usize,
    /// False for the group holding the stem conv or tied to the input.
    pub prunable: bool,
    /// Channels are added to the raw input by an identity skip, so they
    /// cannot be removed at all.
    pub input_tied: bool,
}

/// Which convolutions' channels a layer's output carries, channel for
/// channel. `INPUT` stands for the raw input channels; an empty set means
/// the channels are freshly mixed (linear outputs).
pub(crate) fn channel_sources(model: &ModelGraph) -> HashMap<String, BTreeSet<String>> {
    let mut src: HashMap<String, BTreeSet<String>> = HashMap::new();
    src.insert(INPUT.to_string(), BTreeSet::from([INPUT.to_string()]));
    for l in model.layers() {
        let set = match l.kind {
            LayerKind::Conv { .. } => BTreeSet::from([l.id.clone()]),
            LayerKind::Linear { .. } => BTreeSet::new(),
            _ => l.inputs.iter().flat_map(|i| src[i].iter().cloned()).collect(),
        };
        src.insert(l.id.clone(), set);
    }
    src
}

fn find(parent: &mut HashMap<String, String>, x: &str) -> String {
    let mut root = x.to_string();
    while parent[&root] != root {
        root = parent[&root].clone();
    }
    let mut cur = x.to_string();
    while parent[&cur] != root {
        let next = parent[&cur].clone();
        parent.insert(cur, root.clone());
        cur = next;
    }
    root
}

/// Partitions the conv layers into alignment groups. Convs meeting at an
/// `add` (directly or through identity skips) share a group. The group
/// holding a stem conv (one that reads the raw input) or tied to the raw
/// input by a skip is not prunable. The linear head is never part of a
/// group.
pub fn compute_alignment_groups(model: &ModelGraph) -> Result<Vec<AlignmentGroup>> {
    let src = channel_sources(model);
    let mut parent: HashMap<String, String> = HashMap::new();
    parent.insert(INPUT.to_string(), INPUT.to_string());
    for l in model.layers() {
        if matches!(l.kind, LayerKind::Conv { .. }) {
            parent.insert(l.id.clone(), l.id.clone());
        }
    }
    for l in model.layers() {
        match &l.kind {
            LayerKind::Add => {
                let tied: Vec<&String> = l.inputs.iter().flat_map(|i| src[i].iter()).collect();
                if let Some((first, rest)) = tied.split_first() {
                    for other in rest {
                        let (a, b) = (find(&mut parent, first), find(&mut parent, other));
                        if a != b {
                            // keep the input marker as a root so the stem group stays recognizable
                            if b == INPUT {
                                parent.insert(a, b);
                            } else {
                                parent.insert(b, a);
                            }
                        }
                    }
                }
            }
            _ => {}
        }
    }
    let mut order: Vec<String> = Vec::new();
    let mut members: HashMap<String, Vec<String>> = HashMap::new();
    for l in model.layers() {
        if let LayerKind::Conv { .. } = l.kind {
            let root = find(&mut parent, &l.id);
            if !members.contains_key(&root) {
                order.push(root.clone());
            }
            members.entry(root).or_default().push(l.id.clone());
        }
    }
    let mut groups = Vec::with_capacity(order.len());
    for root in order {
        let ids = members.remove(&root).expect("root recorded");
        let counts: BTreeSet<usize> = ids
            .iter()
            .map(|id| match model.layer(id).map(|l| &l.kind) {
                Some(LayerKind::Conv { filters, .. }) => *filters,
                _ => 0,
            })
            .collect();
        if counts.len() != 1 {
            return Err(Error::Invariant(format!(
                "aligned convs {ids:?} have differing filter counts {counts:?}"
            )));
        }
        let stem = ids
            .iter()
            .any(|id| model.layer(id).is_some_and(|l| l.inputs[0] == INPUT));
        groups.push(AlignmentGroup {
            members: ids,
            filters: *counts.iter().next().expect("non-empty"),
            prunable: root != INPUT && !stem,
            input_tied: root == INPUT,
        });
    }
    Ok(groups)
}
