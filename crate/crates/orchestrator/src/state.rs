use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, Utc};
use labelkit_core::gateway::LedgerTotals;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Ingested,
    Embedded,
    Reduced,
    PoolSelected,
    PoolLabeled,
    PromptGenerated,
    PromptApproved,
    CoarseDone,
    ConsensusDone,
    Finalized,
}

impl Stage {
    pub const ALL: [Stage; 10] = [
        Stage::Ingested,
        Stage::Embedded,
        Stage::Reduced,
        Stage::PoolSelected,
        Stage::PoolLabeled,
        Stage::PromptGenerated,
        Stage::PromptApproved,
        Stage::CoarseDone,
        Stage::ConsensusDone,
        Stage::Finalized,
    ];

    /// The stage after `current` (`None` is a fresh run).
    pub fn after(current: Option<Stage>) -> Option<Stage> {
        match current {
            None => Some(Stage::Ingested),
            Some(s) => Stage::ALL.get(s as usize + 1).copied(),
        }
    }

    /// Transitions that only a named person may make.
    pub fn requires_actor(self) -> bool {
        matches!(self, Stage::PoolLabeled | Stage::PromptApproved)
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingested => "ingested",
            Stage::Embedded => "embedded",
            Stage::Reduced => "reduced",
            Stage::PoolSelected => "pool_selected",
            Stage::PoolLabeled => "pool_labeled",
            Stage::PromptGenerated => "prompt_generated",
            Stage::PromptApproved => "prompt_approved",
            Stage::CoarseDone => "coarse_done",
            Stage::ConsensusDone => "consensus_done",
            Stage::Finalized => "finalized",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s.trim().replace('-', "_"))
            .ok_or_else(|| format!("unknown stage `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transition {
    pub stage: Stage,
    pub at: DateTime<Utc>,
    pub actor: Option<String>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TransitionError {
    #[error("cannot move from {from:?} to {to}; stages advance one at a time")]
    OutOfOrder { from: Option<Stage>, to: Stage },
    #[error("{0} needs the identity of the person approving it")]
    ActorRequired(Stage),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct RunState {
    pub stage: Option<Stage>,
    pub transitions: Vec<Transition>,
    /// Provider usage persisted so far.
    pub ledger: LedgerTotals,
}

impl RunState {
    pub fn reached(&self, stage: Stage) -> bool {
        self.stage.is_some_and(|s| s >= stage)
    }

    pub fn next(&self) -> Option<Stage> {
        Stage::after(self.stage)
    }

    /// Moves exactly one stage forward.
    pub fn advance(&mut self, to: Stage, at: DateTime<Utc>, actor: Option<&str>) -> Result<(), TransitionError> {
        if self.next() != Some(to) {
            return Err(TransitionError::OutOfOrder { from: self.stage, to });
        }
        let actor = actor.map(str::trim).filter(|a| !a.is_empty());
        if to.requires_actor() && actor.is_none() {
            return Err(TransitionError::ActorRequired(to));
        }
        self.stage = Some(to);
        self.transitions.push(Transition {
            stage: to,
            at,
            actor: actor.map(str::to_string),
        });
        Ok(())
    }
}
