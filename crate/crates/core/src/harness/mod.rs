//! Cross-validated training, pruning plans and metrics reports.

mod config;
mod report;
mod train;

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::accounting::{cost_report, report_compression, CostReport};
use crate::data::{derive_seed, kfold_split, load_dataset, Dataset, DatasetManifest, FoldPlan};
use crate::error::{Error, Result};
use crate::optim::OptimState;
use crate::prune::{compact, hard_prune_round, AsfpSchedule, PruneMask};
use crate::zoo::ModelGraph;

pub use config::{Architecture, ExperimentConfig, PruningPlan};
pub use report::{emit_report, emit_table, FoldRecord, Format, MetricsReport, RoundRecord, RoundSummary, Stat};
pub use train::{
    check_no_leakage, evaluate, initial_model, make_batch, run_phase, run_seeds, score_logits, train, EpochLog,
    Evaluation, Phase, PhaseOutcome, RunPosition, TrainOutcome,
};

/// Stream index of the fold-assignment seed; fixed across repeats so all
/// repeats share fold boundaries.
const FOLD_STREAM: u64 = 0xF01D;

/// Fold plan of an experiment: stratified (by default) and seeded from the
/// config seed, independent of the repeat.
pub fn experiment_folds(config: &ExperimentConfig, labels: &[usize]) -> Result<FoldPlan> {
    kfold_split(labels, config.k, derive_seed(config.seed, FOLD_STREAM), config.stratified)
}

/// Loads the dataset a config points at, resized to the model input.
pub fn load_experiment_data(config: &ExperimentConfig) -> Result<Dataset> {
    let manifest = DatasetManifest::read(&config.dataset)?;
    load_dataset(&manifest, config.architecture.input_size)
}

/// Final models of the first (repeat 0, fold 0) run, kept for checkpoints.
#[derive(Debug, Clone)]
pub struct FirstRunModels {
    pub baseline: ModelGraph,
    /// Compacted model after the last pruning step, if the plan prunes.
    pub pruned: Option<ModelGraph>,
}

/// Progress callback; receives one human-readable line per fold.
pub type Progress<'a> = &'a mut dyn FnMut(&str);

/// Runs `repeats x k` folds of the configured plan and aggregates the
/// metrics. With `partial_out`, the report so far is rewritten after every
/// fold (to survive an aborted run).
pub fn run_experiment(
    config: &ExperimentConfig,
    data: &Dataset,
    partial_out: Option<&Path>,
    progress: Progress<'_>,
) -> Result<(MetricsReport, FirstRunModels)> {
    config.validate()?;
    let plan = experiment_folds(config, &data.labels)?;
    let input = config.architecture.input_shape();
    let reference = initial_model(config, 0)?;
    let baseline_cost = cost_report(&reference, input)?;
    let mut folds = Vec::with_capacity(config.repeats * config.k);
    let mut round_costs: Vec<Option<CostReport>> = Vec::new();
    let mut first = None;

    for repeat in 0..config.repeats {
        let seed = config.seed.wrapping_add(repeat as u64);
        for fold in 0..config.k {
            let pos = RunPosition { repeat, fold };
            let (record, models, costs) = run_fold(config, data, &plan, pos, seed)?;
            if round_costs.is_empty() {
                round_costs = costs.into_iter().map(Some).collect();
            } else {
                for (have, got) in round_costs.iter().zip(costs) {
                    if have.as_ref().map(|c| c.totals) != Some(got.totals) {
                        return Err(Error::Invariant(format!(
                            "pruned architecture differs between folds (repeat {repeat}, fold {fold})"
                        )));
                    }
                }
            }
            progress(&format!(
                "repeat {repeat} fold {fold}: baseline {:.4}{}",
                record.baseline_accuracy,
                record
                    .rounds
                    .iter()
                    .map(|r| format!(", round {} {:.4}", r.round, r.accuracy))
                    .collect::<String>()
            ));
            folds.push(record);
            if first.is_none() {
                first = Some(models);
            }
            if let Some(dir) = partial_out {
                let partial = MetricsReport::aggregate(config, &plan, folds.clone(), baseline_cost.clone(), &round_costs);
                let path = dir.join("partial.json");
                fs::write(&path, emit_report(&partial, Format::Json)).map_err(|e| Error::io(&path, e))?;
            }
        }
    }
    let report = MetricsReport::aggregate(config, &plan, folds, baseline_cost, &round_costs);
    Ok((report, first.expect("at least one fold ran")))
}

fn run_fold(
    config: &ExperimentConfig,
    data: &Dataset,
    plan: &FoldPlan,
    pos: RunPosition,
    seed: u64,
) -> Result<(FoldRecord, FirstRunModels, Vec<CostReport>)> {
    let input = config.architecture.input_shape();
    let base = train::train_at(config, data, plan, pos, seed, None)?;
    let mut record = FoldRecord {
        repeat: pos.repeat,
        fold: pos.fold,
        seed,
        baseline_accuracy: base.phase.best_accuracy,
        baseline_last_accuracy: base.phase.last.accuracy,
        best_epoch: base.phase.best_epoch,
        defective_recall: base.phase.last.recall.get(1).copied().unwrap_or(0.0),
        rounds: Vec::new(),
    };
    let mut costs = Vec::new();
    let mut pruned_model = None;
    let eval_idx = plan.fold(pos.fold);
    let train_idx = plan.training(pos.fold);
    match config.pruning {
        PruningPlan::None => {}
        PruningPlan::Hard {
            rounds,
            rate,
            fine_tune_epochs,
            fine_tune_lr_factor,
        } => {
            let mut model = base.model.clone();
            let mut mask = PruneMask::empty(&model, true);
            let mut seen = base.seen.clone();
            let (_, data_seed) = run_seeds(seed, pos.fold);
            for round in 1..=rounds {
                mask = hard_prune_round(&mut model, &mask, rate, config.norm_p)?;
                // fresh optimizer: momentum from before the round would move frozen filters
                let schedule = config.lr_schedule.scaled(fine_tune_lr_factor);
                let mut opt = OptimState::new(config.optimizer.clone(), schedule.base_lr)?;
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(data_seed, 1 + round as u64));
                let out = run_phase(
                    &mut model,
                    &mut opt,
                    data,
                    &train_idx,
                    &eval_idx,
                    config.batch_size,
                    &Phase {
                        epochs: fine_tune_epochs,
                        schedule,
                        frozen: Some(&mask),
                        asfp: None,
                    },
                    &mut rng,
                    pos,
                    &mut seen,
                )?;
                check_no_leakage(&seen, &eval_idx, pos)?;
                let compacted = compact(&model, &mask)?;
                costs.push(cost_report(&compacted, input)?);
                record.rounds.push(RoundRecord {
                    round,
                    accuracy: out.best_accuracy,
                    last_accuracy: out.last.accuracy,
                });
                pruned_model = Some(compacted);
            }
        }
        PruningPlan::Asfp { target_rate, exponent } => {
            let schedule = AsfpSchedule {
                target_rate,
                total_epochs: config.epochs,
                exponent,
            };
            let run = train::train_at(config, data, plan, pos, seed, Some((schedule, config.norm_p)))?;
            let mask = run.phase.soft_mask.as_ref().expect("soft pruning ran every epoch");
            let compacted = compact(&run.model, mask)?;
            costs.push(cost_report(&compacted, input)?);
            // only the final epoch runs at the target rate
            record.rounds.push(RoundRecord {
                round: 1,
                accuracy: run.phase.last.accuracy,
                last_accuracy: run.phase.last.accuracy,
            });
            pruned_model = Some(compacted);
        }
    }
    Ok((
        record,
        FirstRunModels {
            baseline: base.model,
            pruned: pruned_model,
        },
        costs,
    ))
}

/// Baseline and per-round cost comparisons of a report.
pub fn round_compressions(report: &MetricsReport) -> Vec<CostReport> {
    report
        .rounds
        .iter()
        .filter_map(|r| r.cost.as_ref())
        .map(|c| report_compression(&report.baseline_cost, c))
        .collect()
}
