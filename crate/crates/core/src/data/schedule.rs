use serde::{Deserialize, Serialize};

use super::mask::scale_mask_ratio;
use crate::error::{Error, Result};

/// Share of the token budget spent on short inputs before switching to long ones.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ScheduleShape {
    S100,
    S75L25,
    S50L50,
    L100,
}

impl ScheduleShape {
    pub const ALL: [ScheduleShape; 4] = [Self::S100, Self::S75L25, Self::S50L50, Self::L100];

    /// Percent of the budget given to short inputs.
    pub fn short_percent(self) -> usize {
        match self {
            Self::S100 => 100,
            Self::S75L25 => 75,
            Self::S50L50 => 50,
            Self::L100 => 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleParams {
    /// Input tokens across all phases.
    pub total_budget: usize,
    pub batch_size: usize,
    pub short_len: usize,
    pub long_len: usize,
    pub short_output_len: usize,
    pub long_output_len: usize,
    /// Masking ratio at `short_len`; the long phase keeps the masked token
    /// count fixed.
    pub base_mask_ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Phase {
    pub input_len: usize,
    pub output_len: usize,
    pub mask_ratio: f64,
    pub token_budget: usize,
    pub steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainSchedule {
    pub shape: ScheduleShape,
    pub batch_size: usize,
    pub phases: Vec<Phase>,
    pub total_budget: usize,
}

impl PretrainSchedule {
    pub fn total_steps(&self) -> usize {
        self.phases.iter().map(|p| p.steps).sum()
    }
}

fn phase(p: &ScheduleParams, input_len: usize, output_len: usize, budget: usize) -> Result<Phase> {
    let per_step = p.batch_size * input_len;
    if budget % per_step != 0 {
        return Err(Error::Config(format!(
            "phase budget {budget} is not a multiple of batch_size * input_len = {per_step}"
        )));
    }
    Ok(Phase {
        input_len,
        output_len,
        mask_ratio: scale_mask_ratio(p.base_mask_ratio, p.short_len, input_len)?,
        token_budget: budget,
        steps: budget / per_step,
    })
}

fn lcm(a: usize, b: usize) -> usize {
    let (mut x, mut y) = (a, b);
    while y != 0 {
        (x, y) = (y, x % y);
    }
    a / x * b
}

/// Splits the budget into a short phase followed by a long phase.
///
/// The short phase is rounded to whole steps and the long phase takes the
/// remainder, so the phase budgets always sum to `total_budget`. Empty phases
/// are omitted.
pub fn build_schedule(shape: ScheduleShape, p: &ScheduleParams) -> Result<PretrainSchedule> {
    if p.batch_size == 0 || p.short_len == 0 || p.long_len < p.short_len || p.total_budget == 0 {
        return Err(Error::Config(
            "schedule needs positive budget, batch and short_len <= long_len".into(),
        ));
    }
    // Rounding the short phase to whole steps of both lengths leaves the long
    // phase a whole number of steps whenever the total allows it.
    let unit = lcm(p.batch_size * p.short_len, p.batch_size * p.long_len);
    let short_budget = match shape.short_percent() {
        0 => 0,
        100 => p.total_budget,
        pct => {
            let units = (p.total_budget as f64 * pct as f64 / 100.0 / unit as f64).round() as usize;
            (units * unit).min(p.total_budget)
        }
    };
    let long_budget = p.total_budget - short_budget;
    let mut phases = Vec::new();
    if short_budget > 0 {
        phases.push(phase(p, p.short_len, p.short_output_len, short_budget)?);
    }
    if long_budget > 0 {
        phases.push(phase(p, p.long_len, p.long_output_len, long_budget)?);
    }
    Ok(PretrainSchedule {
        shape,
        batch_size: p.batch_size,
        phases,
        total_budget: p.total_budget,
    })
}
