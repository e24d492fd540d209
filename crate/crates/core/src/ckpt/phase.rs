use serde::{Deserialize, Serialize};

use super::CkptError;

/// Checkpoint phase of one rank.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Phase {
    Running,
    Suspended,
    Draining,
    Writing,
    Resuming,
    Restarting,
}

impl Phase {
    /// Wire code used in PHASE_ACK.
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn can_follow(self, prev: Phase) -> bool {
        use Phase::*;
        matches!(
            (prev, self),
            (Running, Suspended)
                | (Suspended, Draining)
                | (Draining, Writing)
                | (Writing, Resuming)
                | (Restarting, Resuming)
                | (Resuming, Running)
        )
    }
}

/// Records every phase a rank passes through and rejects illegal moves.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhaseTracker {
    history: Vec<Phase>,
}

impl PhaseTracker {
    pub fn starting_at(phase: Phase) -> Self {
        Self { history: vec![phase] }
    }

    pub fn current(&self) -> Phase {
        *self.history.last().unwrap()
    }

    pub fn history(&self) -> &[Phase] {
        &self.history
    }

    pub fn enter(&mut self, next: Phase) -> Result<(), CkptError> {
        let from = self.current();
        if !next.can_follow(from) {
            return Err(CkptError::IllegalTransition { from, to: next });
        }
        self.history.push(next);
        Ok(())
    }
}

/// Whether `seq` is a legal phase history: it starts in RUNNING or
/// RESTARTING and every step is a legal transition.
pub fn is_legal_sequence(seq: &[Phase]) -> bool {
    match seq.first() {
        Some(Phase::Running | Phase::Restarting) => seq.windows(2).all(|w| w[1].can_follow(w[0])),
        _ => false,
    }
}
