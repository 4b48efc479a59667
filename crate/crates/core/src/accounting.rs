//! Parameter and FLOP accounting.
//!
//! FLOPs are counted as multiply-accumulates (one MAC = one FLOP) for a
//! single image: conv `F·C·k·k·H'·W'`, linear `K·D`. Batch norm, ReLU,
//! pooling and additions are free. Parameters are the learned tensors only:
//! conv `F·C·k·k`, batch norm `2C`, linear `K·D + K`.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::zoo::{infer_shapes, LayerKind, LayerSpec, ModelGraph};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CostTotals {
    pub params: u64,
    pub flops: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostRow {
    pub id: String,
    pub kind: String,
    pub params: u64,
    pub flops: u64,
}

/// Per-layer change between a baseline and a pruned model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerDelta {
    pub id: String,
    pub params_removed: u64,
    pub flops_removed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub baseline: CostTotals,
    pub pruned: CostTotals,
    /// pruned / baseline
    pub params_ratio: f64,
    pub flops_ratio: f64,
    pub deltas: Vec<LayerDelta>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub input_shape: [usize; 3],
    pub rows: Vec<CostRow>,
    pub totals: CostTotals,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub comparison: Option<Comparison>,
}

fn layer_params(l: &LayerSpec) -> u64 {
    match l.kind {
        LayerKind::Conv {
            in_channels,
            filters,
            kernel,
            ..
        } => (filters * in_channels * kernel * kernel) as u64,
        LayerKind::Bn { channels } => 2 * channels as u64,
        LayerKind::Linear {
            in_features,
            out_features,
        } => (out_features * in_features + out_features) as u64,
        _ => 0,
    }
}

fn layer_flops(l: &LayerSpec, out_shape: &[usize]) -> u64 {
    match l.kind {
        LayerKind::Conv {
            in_channels,
            filters,
            kernel,
            ..
        } => (filters * in_channels * kernel * kernel * out_shape[1] * out_shape[2]) as u64,
        LayerKind::Linear {
            in_features,
            out_features,
        } => (out_features * in_features) as u64,
        _ => 0,
    }
}

/// Learned parameters (running statistics excluded).
pub fn count_params(model: &ModelGraph) -> u64 {
    model.layers().iter().map(layer_params).sum()
}

/// Multiply-accumulates of one forward pass on a `[C, H, W]` image.
pub fn count_flops(model: &ModelGraph, input_shape: [usize; 3]) -> Result<u64> {
    Ok(cost_report(model, input_shape)?.totals.flops)
}

/// Per-layer parameter and FLOP rows plus totals.
pub fn cost_report(model: &ModelGraph, input_shape: [usize; 3]) -> Result<CostReport> {
    let shapes = infer_shapes(model.layers(), input_shape)?;
    let rows: Vec<CostRow> = model
        .layers()
        .iter()
        .zip(&shapes)
        .map(|(l, s)| CostRow {
            id: l.id.clone(),
            kind: l.kind.name().to_string(),
            params: layer_params(l),
            flops: layer_flops(l, s),
        })
        .collect();
    let totals = CostTotals {
        params: rows.iter().map(|r| r.params).sum(),
        flops: rows.iter().map(|r| r.flops).sum(),
    };
    Ok(CostReport {
        input_shape,
        rows,
        totals,
        comparison: None,
    })
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        1.0
    } else {
        a as f64 / b as f64
    }
}

/// The pruned report annotated with pruned/baseline ratios and the
/// per-layer reductions (matched by layer id).
pub fn report_compression(baseline: &CostReport, pruned: &CostReport) -> CostReport {
    let by_id: HashMap<&str, &CostRow> = pruned.rows.iter().map(|r| (r.id.as_str(), r)).collect();
    let deltas = baseline
        .rows
        .iter()
        .map(|b| {
            let (p, f) = by_id.get(b.id.as_str()).map_or((0, 0), |r| (r.params, r.flops));
            LayerDelta {
                id: b.id.clone(),
                params_removed: b.params.saturating_sub(p),
                flops_removed: b.flops.saturating_sub(f),
            }
        })
        .collect();
    CostReport {
        comparison: Some(Comparison {
            baseline: baseline.totals,
            pruned: pruned.totals,
            params_ratio: ratio(pruned.totals.params, baseline.totals.params),
            flops_ratio: ratio(pruned.totals.flops, baseline.totals.flops),
            deltas,
        }),
        ..pruned.clone()
    }
}

/// `1.2e+7` style: two significant digits.
pub fn sci(x: u64) -> String {
    if x == 0 {
        return "0".into();
    }
    let s = format!("{:.1e}", x as f64);
    match s.split_once('e') {
        Some((m, e)) if !e.starts_with('-') => format!("{m}e+{e}"),
        _ => s,
    }
}

impl CostReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned plain-text table: one line per layer, a total line and, for
    /// comparisons, baseline/pruned/ratio lines.
    pub fn to_table(&self) -> String {
        let idw = self.rows.iter().map(|r| r.id.len()).max().unwrap_or(5).max(5);
        let mut out = String::new();
        let _ = writeln!(out, "{:<idw$}  {:<8}  {:>12}  {:>15}", "layer", "kind", "params", "flops");
        for r in &self.rows {
            let _ = writeln!(out, "{:<idw$}  {:<8}  {:>12}  {:>15}", r.id, r.kind, r.params, r.flops);
        }
        let _ = writeln!(
            out,
            "{:<idw$}  {:<8}  {:>12}  {:>15}",
            "total", "", self.totals.params, self.totals.flops
        );
        if let Some(c) = &self.comparison {
            let _ = writeln!(out);
            let _ = writeln!(out, "{:<10}  {:>10}  {:>10}", "", "Params", "FLOPs");
            let _ = writeln!(out, "{:<10}  {:>10}  {:>10}", "Baseline", sci(c.baseline.params), sci(c.baseline.flops));
            let _ = writeln!(out, "{:<10}  {:>10}  {:>10}", "Pruned", sci(c.pruned.params), sci(c.pruned.flops));
            let _ = writeln!(
                out,
                "{:<10}  {:>10.3}  {:>10.3}",
                "Ratio", c.params_ratio, c.flops_ratio
            );
        }
        out
    }
}
