use std::fmt;

use serde::{Deserialize, Serialize};

/// Where an action came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionOrigin {
    Generated,
    GroundTruth,
    Human,
}

/// A recovery action with its justification.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Action {
    pub action_text: String,
    pub explanation: String,
    pub origin: ActionOrigin,
}

impl Action {
    /// Returns `None` when the action text is blank.
    pub fn new(
        action_text: impl Into<String>,
        explanation: impl Into<String>,
        origin: ActionOrigin,
    ) -> Option<Self> {
        let action_text = action_text.into();
        if action_text.trim().is_empty() {
            return None;
        }
        Some(Self {
            action_text,
            explanation: explanation.into(),
            origin,
        })
    }

    pub fn generated(action_text: impl Into<String>, explanation: impl Into<String>) -> Self {
        Self::new(action_text, explanation, ActionOrigin::Generated)
            .expect("generated action text must be non-empty")
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.action_text)
    }
}

/// The six recovery criteria, in the order a response normally satisfies them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    Contained,
    Assessed,
    Preserved,
    Evicted,
    Hardened,
    Restored,
}

impl Criterion {
    pub const ALL: [Criterion; 6] = [
        Criterion::Contained,
        Criterion::Assessed,
        Criterion::Preserved,
        Criterion::Evicted,
        Criterion::Hardened,
        Criterion::Restored,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Criterion::Contained => "contained",
            Criterion::Assessed => "assessed",
            Criterion::Preserved => "preserved",
            Criterion::Evicted => "evicted",
            Criterion::Hardened => "hardened",
            Criterion::Restored => "restored",
        }
    }

    /// Short description of what satisfying the criterion means.
    pub fn objective(self) -> &'static str {
        match self {
            Criterion::Contained => "contain the attack",
            Criterion::Assessed => "gather information on the scope and severity of the attack",
            Criterion::Preserved => "preserve forensic evidence",
            Criterion::Evicted => "eradicate the attacker",
            Criterion::Hardened => "harden the system",
            Criterion::Restored => "recover operational services",
        }
    }
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Which recovery criteria currently hold.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecoveryState {
    pub contained: bool,
    pub assessed: bool,
    pub preserved: bool,
    pub evicted: bool,
    pub hardened: bool,
    pub restored: bool,
}

impl RecoveryState {
    pub fn recovered() -> Self {
        let mut s = Self::default();
        for c in Criterion::ALL {
            s.set(c);
        }
        s
    }

    pub fn get(&self, criterion: Criterion) -> bool {
        match criterion {
            Criterion::Contained => self.contained,
            Criterion::Assessed => self.assessed,
            Criterion::Preserved => self.preserved,
            Criterion::Evicted => self.evicted,
            Criterion::Hardened => self.hardened,
            Criterion::Restored => self.restored,
        }
    }

    pub fn set(&mut self, criterion: Criterion) {
        match criterion {
            Criterion::Contained => self.contained = true,
            Criterion::Assessed => self.assessed = true,
            Criterion::Preserved => self.preserved = true,
            Criterion::Evicted => self.evicted = true,
            Criterion::Hardened => self.hardened = true,
            Criterion::Restored => self.restored = true,
        }
    }

    pub fn is_recovered(&self) -> bool {
        Criterion::ALL.iter().all(|&c| self.get(c))
    }

    pub fn satisfied(&self) -> impl Iterator<Item = Criterion> + '_ {
        Criterion::ALL.into_iter().filter(|&c| self.get(c))
    }

    pub fn unmet(&self) -> impl Iterator<Item = Criterion> + '_ {
        Criterion::ALL.into_iter().filter(|&c| !self.get(c))
    }

    /// True when every criterion set in `self` is also set in `later`.
    pub fn is_subset_of(&self, later: &RecoveryState) -> bool {
        self.satisfied().all(|c| later.get(c))
    }
}
