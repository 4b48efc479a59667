use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, PruningPlan};
use crate::accounting::{sci, CostReport};
use crate::data::FoldPlan;
use crate::error::{Error, Result};

/// Mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Stat {
        if values.is_empty() {
            return Stat { mean: 0.0, std: 0.0 };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Stat { mean, std: var.sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    /// Best-epoch accuracy of the pruned model (final epoch for soft
    /// pruning, where only the last epoch runs at the target rate).
    pub accuracy: f64,
    pub last_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldRecord {
    pub repeat: usize,
    pub fold: usize,
    pub seed: u64,
    /// Best-epoch validation accuracy.
    pub baseline_accuracy: f64,
    pub baseline_last_accuracy: f64,
    pub best_epoch: usize,
    /// Last-epoch recall of the defective class.
    pub defective_recall: f64,
    pub rounds: Vec<RoundRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundSummary {
    pub round: usize,
    pub label: String,
    /// Over the repeat axis of fold-averaged accuracies.
    pub accuracy: Stat,
    /// Pruned minus baseline accuracy (negative = degradation).
    pub drop: Stat,
    pub cost: Option<CostReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: String,
    pub config: ExperimentConfig,
    pub fold_sizes: Vec<usize>,
    pub folds: Vec<FoldRecord>,
    /// Fold-averaged baseline accuracy per repeat.
    pub repeat_accuracy: Vec<f64>,
    pub baseline: Stat,
    /// Mean over repeats of the across-fold standard deviation.
    pub baseline_fold_std: f64,
    pub baseline_cost: CostReport,
    pub rounds: Vec<RoundSummary>,
}

fn per_repeat(folds: &[FoldRecord], value: impl Fn(&FoldRecord) -> Option<f64>) -> Vec<Vec<f64>> {
    let mut by: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for f in folds {
        if let Some(v) = value(f) {
            by.entry(f.repeat).or_default().push(v);
        }
    }
    by.into_values().collect()
}

fn means(groups: &[Vec<f64>]) -> Vec<f64> {
    groups.iter().map(|g| Stat::of(g).mean).collect()
}

impl MetricsReport {
    /// Builds the summary statistics from per-fold records.
    pub fn aggregate(
        config: &ExperimentConfig,
        plan: &FoldPlan,
        folds: Vec<FoldRecord>,
        baseline_cost: CostReport,
        round_costs: &[Option<CostReport>],
    ) -> MetricsReport {
        let base_groups = per_repeat(&folds, |f| Some(f.baseline_accuracy));
        let repeat_accuracy = means(&base_groups);
        let fold_std = Stat::of(&base_groups.iter().map(|g| Stat::of(g).std).collect::<Vec<_>>()).mean;
        let n_rounds = folds.iter().map(|f| f.rounds.len()).max().unwrap_or(0);
        let rounds = (0..n_rounds)
            .map(|r| {
                let acc = per_repeat(&folds, |f| f.rounds.get(r).map(|x| x.accuracy));
                let drop = per_repeat(&folds, |f| f.rounds.get(r).map(|x| x.accuracy - f.baseline_accuracy));
                RoundSummary {
                    round: r + 1,
                    label: match config.pruning {
                        PruningPlan::Asfp { .. } => "ASFP".to_string(),
                        _ => format!("Round {}", r + 1),
                    },
                    accuracy: Stat::of(&means(&acc)),
                    drop: Stat::of(&means(&drop)),
                    cost: round_costs.get(r).cloned().flatten(),
                }
            })
            .collect();
        MetricsReport {
            method: config.pruning.method().to_string(),
            config: config.clone(),
            fold_sizes: plan.sizes(),
            folds,
            baseline: Stat::of(&repeat_accuracy),
            repeat_accuracy,
            baseline_fold_std: fold_std,
            baseline_cost,
            rounds,
        }
    }

    pub fn model_name(&self) -> String {
        let a = &self.config.architecture;
        if a.width_scale == 1.0 {
            format!("ResNet-{}", a.depth)
        } else {
            format!("ResNet-{} x{}", a.depth, a.width_scale)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Json,
    Table,
}

impl std::str::FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(Format::Json),
            "table" => Ok(Format::Table),
            _ => Err(Error::Usage(format!("unknown format `{s}` (json or table)"))),
        }
    }
}

/// Serializes a report; JSON is the schema-stable form.
pub fn emit_report(report: &MetricsReport, format: Format) -> String {
    match format {
        Format::Json => {
            let mut s = serde_json::to_string_pretty(report).expect("report serializes");
            s.push('\n');
            s
        }
        Format::Table => emit_table(std::slice::from_ref(report)),
    }
}

fn pct(s: &Stat) -> String {
    format!("{:.2} ± {:.2}", 100.0 * s.mean, 100.0 * s.std)
}

fn signed_pct(s: &Stat) -> String {
    format!("{:+.2} ± {:.2}", 100.0 * s.mean, 100.0 * s.std)
}

/// One accuracy row per report (model x optimizer x pruning method, mean ±
/// std over repeats, one accuracy-drop column per pruning round), then the
/// matching parameter/FLOP rows.
pub fn emit_table(reports: &[MetricsReport]) -> String {
    let rounds = reports.iter().map(|r| r.rounds.len()).max().unwrap_or(0);
    let round_label = |i: usize| {
        reports
            .iter()
            .find_map(|r| r.rounds.get(i).map(|x| x.label.clone()))
            .unwrap_or_else(|| format!("Round {}", i + 1))
    };
    let mut head = vec![
        "Model".to_string(),
        "Optimizer".into(),
        "Pruning".into(),
        "k".into(),
        "Repeats".into(),
        "Accuracy % (mean ± std)".into(),
    ];
    for i in 0..rounds {
        head.push(format!("{} drop %", round_label(i)));
    }
    let mut rows = vec![head];
    for r in reports {
        let mut row = vec![
            r.model_name(),
            r.config.optimizer.name().to_string(),
            r.method.clone(),
            r.config.k.to_string(),
            r.repeat_accuracy.len().to_string(),
            pct(&r.baseline),
        ];
        for i in 0..rounds {
            row.push(r.rounds.get(i).map_or("-".into(), |x| signed_pct(&x.drop)));
        }
        rows.push(row);
    }
    let mut out = render(&rows);

    let mut cost_head = vec!["Model".to_string(), "Pruning".into(), "Params".into(), "FLOPs".into()];
    for i in 0..rounds {
        cost_head.push(format!("{} params", round_label(i)));
        cost_head.push(format!("{} FLOPs", round_label(i)));
    }
    let mut cost_rows = vec![cost_head];
    for r in reports {
        let mut row = vec![
            r.model_name(),
            r.method.clone(),
            sci(r.baseline_cost.totals.params),
            sci(r.baseline_cost.totals.flops),
        ];
        for i in 0..rounds {
            match r.rounds.get(i).and_then(|x| x.cost.as_ref()) {
                Some(c) => {
                    row.push(sci(c.totals.params));
                    row.push(sci(c.totals.flops));
                }
                None => row.extend(["-".to_string(), "-".to_string()]),
            }
        }
        cost_rows.push(row);
    }
    out.push('\n');
    out.push_str(&render(&cost_rows));
    out
}

fn render(rows: &[Vec<String>]) -> String {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols)
        .map(|c| rows.iter().filter_map(|r| r.get(c)).map(|s| s.chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (i, r) in rows.iter().enumerate() {
        let line: Vec<String> = r
            .iter()
            .enumerate()
            .map(|(c, s)| format!("{s:<w$}", w = widths[c]))
            .collect();
        let _ = writeln!(out, "{}", line.join("  ").trim_end());
        if i == 0 {
            let total = widths.iter().sum::<usize>() + 2 * cols.saturating_sub(1);
            let _ = writeln!(out, "{}", "-".repeat(total));
        }
    }
    out
}
