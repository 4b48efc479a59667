use serde::{Deserialize, Serialize};

use super::{compute_alignment_groups, enforce_mask, floor_count, group_norms, select_filters, PruneMask};
use crate::error::{Error, Result};
use crate::zoo::ModelGraph;

/// Asymptotic soft-pruning schedule: the rate ramps from a small value in
/// the first epoch to `target_rate` in the last.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AsfpSchedule {
    pub target_rate: f64,
    pub total_epochs: usize,
    #[serde(default = "default_exponent")]
    pub exponent: f64,
}

fn default_exponent() -> f64 {
    3.0
}

impl AsfpSchedule {
    pub fn new(target_rate: f64, total_epochs: usize) -> Self {
        AsfpSchedule {
            target_rate,
            total_epochs,
            exponent: default_exponent(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.target_rate) {
            return Err(Error::Config(format!("ASFP target rate {} outside [0, 1)", self.target_rate)));
        }
        if self.total_epochs == 0 {
            return Err(Error::Config("ASFP schedule needs at least one epoch".into()));
        }
        if !(self.exponent > 0.0 && self.exponent.is_finite()) {
            return Err(Error::Config(format!("ASFP exponent must be positive, got {}", self.exponent)));
        }
        Ok(())
    }
}

/// `P * (1 - (1 - (epoch + 1) / E)^exponent)`; equals `P` exactly at the
/// last epoch.
pub fn asfp_rate(schedule: &AsfpSchedule, epoch: usize) -> Result<f64> {
    schedule.validate()?;
    let e = schedule.total_epochs;
    if epoch >= e {
        return Err(Error::Usage(format!("epoch {epoch} outside schedule of {e} epochs")));
    }
    let remaining = 1.0 - (epoch + 1) as f64 / e as f64;
    Ok(schedule.target_rate * (1.0 - remaining.powf(schedule.exponent)))
}

/// End-of-epoch soft pruning: reselects, from all filters of each prunable
/// group, the `asfp_rate(epoch)` fraction with the lowest group norms and
/// zeroes them. Filters zeroed at earlier epochs compete again.
pub fn asfp_epoch_end(model: &mut ModelGraph, schedule: &AsfpSchedule, epoch: usize, p: f64) -> Result<PruneMask> {
    let rate = asfp_rate(schedule, epoch)?;
    let mut mask = PruneMask::empty(model, false);
    for g in compute_alignment_groups(model)? {
        if !g.prunable || floor_count(rate, g.filters) == 0 {
            continue;
        }
        let norms = group_norms(model, &g, p)?;
        let chosen = select_filters(&norms, rate, &vec![false; g.filters]);
        for id in &g.members {
            let m = mask.layers.get_mut(id).expect("conv in mask");
            for &i in &chosen {
                m[i] = true;
            }
        }
    }
    enforce_mask(model, &mask)?;
    Ok(mask)
}
