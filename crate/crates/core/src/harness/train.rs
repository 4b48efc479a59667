use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use crate::autodiff::Tape;
use crate::data::{augment, derive_seed, Dataset, FoldPlan, AUGMENT_PAD};
use crate::error::{Error, Result};
use crate::optim::{LrSchedule, OptimState};
use crate::prune::{asfp_epoch_end, freeze_gradients, AsfpSchedule, PruneMask};
use crate::tensor::Tensor;
use crate::zoo::{build_resnet, load_checkpoint, ModelGraph};

const EVAL_BATCH: usize = 64;

/// Accuracy, confusion counts (`confusion[true][predicted]`) and per-class
/// recall of an argmax classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    pub confusion: Vec<Vec<usize>>,
    /// NaN-free: classes absent from the subset get recall 0.
    pub recall: Vec<f64>,
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Scores `[N, K]` logits against labels.
pub fn score_logits(logits: &Tensor, labels: &[usize]) -> Result<Evaluation> {
    let (n, k) = match logits.shape() {
        &[n, k] => (n, k),
        s => return Err(Error::Dimension(format!("logits must be [N, K], got {s:?}"))),
    };
    if n == 0 || n != labels.len() {
        return Err(Error::Input(format!("{n} logit rows for {} labels", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Input(format!("label {bad} outside {k} classes")));
    }
    let mut confusion = vec![vec![0; k]; k];
    for (row, &l) in logits.data().chunks(k).zip(labels) {
        confusion[l][argmax(row)] += 1;
    }
    let correct = (0..k).map(|c| confusion[c][c]).sum();
    let recall = confusion
        .iter()
        .enumerate()
        .map(|(c, r)| {
            let t: usize = r.iter().sum();
            if t == 0 {
                0.0
            } else {
                r[c] as f64 / t as f64
            }
        })
        .collect();
    Ok(Evaluation {
        accuracy: correct as f64 / n as f64,
        correct,
        total: n,
        confusion,
        recall,
    })
}

/// Stacks images into a `[B, 1, H, W]` batch, augmenting when `rng` is
/// given.
pub fn make_batch(data: &Dataset, indices: &[usize], rng: Option<&mut ChaCha8Rng>) -> Result<Tensor> {
    let s = data.size;
    let mut out = Vec::with_capacity(indices.len() * s * s);
    match rng {
        Some(rng) => {
            for &i in indices {
                out.extend_from_slice(&augment(&data.images[i], AUGMENT_PAD, rng).pixels);
            }
        }
        None => {
            for &i in indices {
                out.extend_from_slice(&data.images[i].pixels);
            }
        }
    }
    Tensor::new(&[indices.len(), 1, s, s], out)
}

/// Inference-mode evaluation on the images at `indices`.
pub fn evaluate(model: &ModelGraph, data: &Dataset, indices: &[usize]) -> Result<Evaluation> {
    if indices.is_empty() {
        return Err(Error::Input("evaluation subset is empty".into()));
    }
    let k = model.meta().num_classes;
    let mut logits = Vec::with_capacity(indices.len() * k);
    for chunk in indices.chunks(EVAL_BATCH) {
        logits.extend_from_slice(model.forward(&make_batch(data, chunk, None)?)?.data());
    }
    let labels: Vec<usize> = indices.iter().map(|&i| data.labels[i]).collect();
    score_logits(&Tensor::new(&[indices.len(), k], logits)?, &labels)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f32,
    pub loss: f64,
    pub accuracy: f64,
}

/// Result of one training phase on one fold.
#[derive(Debug, Clone)]
pub struct PhaseOutcome {
    pub best_accuracy: f64,
    pub best_epoch: usize,
    pub last: Evaluation,
    pub history: Vec<EpochLog>,
    /// Soft mask set at the last epoch end, for soft-pruning phases.
    pub soft_mask: Option<PruneMask>,
}

/// Where a phase sits in the experiment, for diagnostics.
#[derive(Debug, Clone, Copy)]
pub struct RunPosition {
    pub repeat: usize,
    pub fold: usize,
}

/// Options of one training phase.
pub struct Phase<'a> {
    pub epochs: usize,
    pub schedule: LrSchedule,
    /// Frozen mask whose gradients are zeroed before every step.
    pub frozen: Option<&'a PruneMask>,
    /// Soft pruning applied at every epoch end.
    pub asfp: Option<(AsfpSchedule, f64)>,
}

/// One optimizer step on a batch; `loss` receives the batch loss as soon
/// as it is known. Non-finite losses or gradients are `NonFinite` errors.
fn sgd_step(
    model: &mut ModelGraph,
    opt: &mut OptimState,
    x: &Tensor,
    y: &[usize],
    frozen: Option<&PruneMask>,
    loss: &mut f32,
) -> Result<()> {
    model.zero_grads();
    let mut tape = Tape::new();
    let input = tape.leaf_with_grad(x, false);
    let rec = model.forward_train(&mut tape, input)?;
    let out = tape.cross_entropy(rec.logits, y)?;
    *loss = tape.value(out)[0];
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("loss is {loss}")));
    }
    tape.backward(out)?;
    model.store_grads(&tape, &rec)?;
    drop(tape);
    if let Some(mask) = frozen {
        freeze_gradients(model, mask)?;
    }
    opt.step(model.params_mut())
}

/// Trains on `train_idx` for the phase's epochs, evaluating on `eval_idx`
/// after each. Every image fed to an optimizer step is added to `seen`.
#[allow(clippy::too_many_arguments)]
pub fn run_phase(
    model: &mut ModelGraph,
    opt: &mut OptimState,
    data: &Dataset,
    train_idx: &[usize],
    eval_idx: &[usize],
    batch_size: usize,
    phase: &Phase<'_>,
    rng: &mut ChaCha8Rng,
    pos: RunPosition,
    seen: &mut BTreeSet<usize>,
) -> Result<PhaseOutcome> {
    let mut order = train_idx.to_vec();
    let mut history = Vec::with_capacity(phase.epochs);
    let mut best = (f64::NEG_INFINITY, 0);
    let mut last = None;
    let mut soft_mask = None;
    model.set_requires_grad(true);
    for epoch in 0..phase.epochs {
        let lr = phase.schedule.lr_at(epoch);
        opt.set_lr(lr);
        order.shuffle(rng);
        let (mut loss_sum, mut batches) = (0.0, 0);
        // a trailing single image is skipped: batch norm needs two
        for (step, chunk) in order.chunks(batch_size).filter(|c| c.len() >= 2).enumerate() {
            let x = make_batch(data, chunk, Some(rng))?;
            let y: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
            let mut value = f32::NAN;
            let stepped = sgd_step(model, opt, &x, &y, phase.frozen, &mut value);
            match stepped {
                Err(Error::NonFinite(_)) => {
                    return Err(Error::AbortedRun {
                        repeat: pos.repeat,
                        fold: pos.fold,
                        epoch,
                        step,
                        loss: value,
                    })
                }
                r => r?,
            }
            seen.extend(chunk.iter().copied());
            loss_sum += value as f64;
            batches += 1;
        }
        if let Some((schedule, p)) = &phase.asfp {
            soft_mask = Some(asfp_epoch_end(model, schedule, epoch, *p)?);
        }
        let eval = evaluate(model, data, eval_idx)?;
        if eval.accuracy > best.0 {
            best = (eval.accuracy, epoch);
        }
        history.push(EpochLog {
            epoch,
            lr,
            loss: loss_sum / batches.max(1) as f64,
            accuracy: eval.accuracy,
        });
        last = Some(eval);
    }
    model.zero_grads();
    let last = match last {
        Some(l) => l,
        None => evaluate(model, data, eval_idx)?,
    };
    if phase.epochs == 0 {
        best = (last.accuracy, 0);
    }
    Ok(PhaseOutcome {
        best_accuracy: best.0,
        best_epoch: best.1,
        last,
        history,
        soft_mask,
    })
}

/// Fresh model for a run: the configured initial weights, or a seeded
/// initialization.
pub fn initial_model(config: &ExperimentConfig, seed: u64) -> Result<ModelGraph> {
    let a = &config.architecture;
    let model = build_resnet(a.depth, a.width_scale, a.input_shape(), a.num_classes, seed)?;
    match &config.initial_weights {
        None => Ok(model),
        Some(path) => {
            let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
            let mut loaded = load_checkpoint(&bytes, Some(&model))?;
            loaded.set_requires_grad(true);
            Ok(loaded)
        }
    }
}

/// Errors if any image of the evaluation fold reached an optimizer step.
pub fn check_no_leakage(seen: &BTreeSet<usize>, eval_idx: &[usize], pos: RunPosition) -> Result<()> {
    if let Some(i) = eval_idx.iter().find(|i| seen.contains(i)) {
        return Err(Error::Invariant(format!(
            "repeat {} fold {}: evaluation image {i} was used for training",
            pos.repeat, pos.fold
        )));
    }
    Ok(())
}

/// Outcome of plain training on one fold.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ModelGraph,
    pub phase: PhaseOutcome,
    pub seen: BTreeSet<usize>,
}

/// Seeds of one (repeat, fold) run: model init, data order/augmentation.
pub fn run_seeds(seed: u64, fold: usize) -> (u64, u64) {
    let run = derive_seed(seed, fold as u64);
    (derive_seed(run, 0), derive_seed(run, 1))
}

/// Trains a fresh model on every fold but `fold` (with augmentation) and
/// evaluates on `fold` after each epoch. Deterministic in
/// `(config, plan, fold, seed)`.
pub fn train(config: &ExperimentConfig, data: &Dataset, plan: &FoldPlan, fold: usize, seed: u64) -> Result<TrainOutcome> {
    train_at(config, data, plan, RunPosition { repeat: 0, fold }, seed, None)
}

pub(crate) fn train_at(
    config: &ExperimentConfig,
    data: &Dataset,
    plan: &FoldPlan,
    pos: RunPosition,
    seed: u64,
    asfp: Option<(AsfpSchedule, f64)>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if plan.assignment.len() != data.images.len() || pos.fold >= plan.k {
        return Err(Error::Usage(format!(
            "fold plan covers {} records / {} folds; dataset has {} images, fold {} requested",
            plan.assignment.len(),
            plan.k,
            data.images.len(),
            pos.fold
        )));
    }
    let (init_seed, data_seed) = run_seeds(seed, pos.fold);
    let mut model = initial_model(config, init_seed)?;
    let mut opt = OptimState::new(config.optimizer.clone(), config.lr_schedule.base_lr)?;
    let mut rng = ChaCha8Rng::seed_from_u64(data_seed);
    let train_idx = plan.training(pos.fold);
    let eval_idx = plan.fold(pos.fold);
    let mut seen = BTreeSet::new();
    let phase = run_phase(
        &mut model,
        &mut opt,
        data,
        &train_idx,
        &eval_idx,
        config.batch_size,
        &Phase {
            epochs: config.epochs,
            schedule: config.lr_schedule,
            frozen: None,
            asfp,
        },
        &mut rng,
        pos,
        &mut seen,
    )?;
    check_no_leakage(&seen, &eval_idx, pos)?;
    Ok(TrainOutcome { model, phase, seen })
}
