//! Training regimens, their phase plans, and early stopping.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::student::{ParamGroup, StudentParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regimen {
    /// All losses together, all groups trainable.
    Joint,
    /// Representation loss first, then CE + logit loss with gradual unfreezing.
    StagewiseRlFirst,
    /// Representation + logit loss on unlabeled data, then CE fine-tuning
    /// with gradual unfreezing.
    DistilThenFinetune,
}

impl fmt::Display for Regimen {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Regimen::Joint => "joint",
            Regimen::StagewiseRlFirst => "stagewise_rl_first",
            Regimen::DistilThenFinetune => "distil_then_finetune",
        })
    }
}

impl std::str::FromStr for Regimen {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "joint" => Ok(Regimen::Joint),
            "stagewise_rl_first" => Ok(Regimen::StagewiseRlFirst),
            "distil_then_finetune" => Ok(Regimen::DistilThenFinetune),
            other => Err(Error::contract(format!("unknown regimen {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Phase {
    #[serde(rename = "joint")]
    Joint,
    /// Stage 1 of the stagewise regimen.
    #[serde(rename = "RL")]
    Representation,
    /// Stage 1 of distil-then-finetune.
    #[serde(rename = "RL+LL")]
    Distillation,
    #[serde(rename = "heads")]
    Heads,
    #[serde(rename = "heads+bilstm")]
    HeadsBilstm,
    #[serde(rename = "all")]
    All,
}

impl Phase {
    pub fn label(self) -> &'static str {
        match self {
            Phase::Joint => "joint",
            Phase::Representation => "RL",
            Phase::Distillation => "RL+LL",
            Phase::Heads => "heads",
            Phase::HeadsBilstm => "heads+bilstm",
            Phase::All => "all",
        }
    }

    /// Groups that may change during this phase.
    pub fn trainable_groups(self) -> &'static [ParamGroup] {
        match self {
            Phase::Heads => &[ParamGroup::Heads],
            Phase::HeadsBilstm => &[ParamGroup::Heads, ParamGroup::Bilstm],
            _ => &ParamGroup::ALL,
        }
    }

    pub fn is_unfreezing(self) -> bool {
        matches!(self, Phase::Heads | Phase::HeadsBilstm | Phase::All)
    }

    pub fn apply_freeze(self, params: &mut StudentParams) {
        for g in ParamGroup::ALL {
            params.set_frozen(g, !self.trainable_groups().contains(&g));
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl Regimen {
    /// Stage index (1-based) and phase for every phase of the run.
    pub fn plan(self) -> Vec<(usize, Phase)> {
        match self {
            Regimen::Joint => vec![(1, Phase::Joint)],
            Regimen::StagewiseRlFirst => vec![
                (1, Phase::Representation),
                (2, Phase::Heads),
                (2, Phase::HeadsBilstm),
                (2, Phase::All),
            ],
            Regimen::DistilThenFinetune => vec![
                (1, Phase::Distillation),
                (2, Phase::Heads),
                (2, Phase::HeadsBilstm),
                (2, Phase::All),
            ],
        }
    }
}

/// Progress through a regimen's phase plan.
#[derive(Clone, Debug, PartialEq)]
pub struct ScheduleState {
    pub regimen: Regimen,
    plan: Vec<(usize, Phase)>,
    cursor: Option<usize>,
    /// Groups unlocked so far by gradual unfreezing.
    unfrozen: Vec<ParamGroup>,
    pub epochs_in_phase: usize,
    pub best_val_loss: f64,
    pub patience_counter: usize,
}

impl ScheduleState {
    pub fn new(regimen: Regimen) -> Self {
        Self::with_plan(regimen, regimen.plan())
    }

    /// A schedule restricted to the phases of `stage`.
    pub fn for_stage(regimen: Regimen, stage: usize) -> Self {
        let plan = regimen.plan().into_iter().filter(|(s, _)| *s == stage).collect();
        Self::with_plan(regimen, plan)
    }

    fn with_plan(regimen: Regimen, plan: Vec<(usize, Phase)>) -> Self {
        Self {
            regimen,
            plan,
            cursor: None,
            unfrozen: Vec::new(),
            epochs_in_phase: 0,
            best_val_loss: f64::INFINITY,
            patience_counter: 0,
        }
    }

    pub fn stage(&self) -> Option<usize> {
        self.cursor.map(|c| self.plan[c].0)
    }

    pub fn phase(&self) -> Option<Phase> {
        self.cursor.map(|c| self.plan[c].1)
    }

    pub fn unfrozen_groups(&self) -> &[ParamGroup] {
        &self.unfrozen
    }

    /// Move to the next phase, returning it, or `None` when the plan is done.
    pub fn advance(&mut self) -> Option<(usize, Phase)> {
        let next = self.cursor.map_or(0, |c| c + 1);
        if next >= self.plan.len() {
            self.cursor = (!self.plan.is_empty()).then(|| self.plan.len() - 1);
            return None;
        }
        let (stage, phase) = self.plan[next];
        if let Some(prev) = self.stage() {
            debug_assert!(stage >= prev, "stages are monotone");
        }
        if phase.is_unfreezing() {
            for &g in phase.trainable_groups() {
                if !self.unfrozen.contains(&g) {
                    self.unfrozen.push(g);
                }
            }
        }
        self.cursor = Some(next);
        self.epochs_in_phase = 0;
        self.best_val_loss = f64::INFINITY;
        self.patience_counter = 0;
        Some((stage, phase))
    }

    /// Record one validation loss, returning whether it improved on the best.
    pub fn observe(&mut self, val_loss: f64) -> bool {
        self.epochs_in_phase += 1;
        if val_loss < self.best_val_loss {
            self.best_val_loss = val_loss;
            self.patience_counter = 0;
            true
        } else {
            self.patience_counter += 1;
            false
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    Stop { best_epoch: usize },
}

/// Stop once `patience` consecutive entries have failed to improve on the
/// best (first minimal) validation loss.
pub fn early_stop(history: &[f64], patience: usize) -> Result<StopDecision> {
    if patience == 0 {
        return Err(Error::contract("patience must be at least 1"));
    }
    let Some(best) = best_index(history) else {
        return Ok(StopDecision::Continue);
    };
    if history.len() - 1 - best >= patience {
        Ok(StopDecision::Stop { best_epoch: best })
    } else {
        Ok(StopDecision::Continue)
    }
}

/// Index of the first minimum.
pub fn best_index(history: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in history.iter().enumerate() {
        if best.is_none_or(|b| v < history[b]) {
            best = Some(i);
        }
    }
    best
}
