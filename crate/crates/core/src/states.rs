//! Intermediate-state bookkeeping shared by the tape and the cost model.
//!
//! Counts are in elements. A state is "forward" if the op materialises it and
//! "retained" if it must stay alive until the backward pass consumes it.

use alloc::collections::BTreeMap;
use alloc::string::String;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Forward,
    Backward,
}

/// When a forward state has to survive until backward.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Retention {
    Always,
    /// Released as soon as the forward computation no longer needs it.
    Never,
    /// Kept only if some consumer's backward reads this node's output.
    IfRead,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StateRecord {
    pub label: &'static str,
    pub elements: usize,
    pub retention: Retention,
}

impl StateRecord {
    pub const fn new(label: &'static str, elements: usize, retention: Retention) -> Self {
        Self {
            label,
            elements,
            retention,
        }
    }

    pub fn retained(&self, output_is_read: bool) -> bool {
        match self.retention {
            Retention::Always => true,
            Retention::Never => false,
            Retention::IfRead => output_is_read,
        }
    }
}

/// Aggregated element counts keyed by state label.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateReport {
    pub entries: BTreeMap<String, usize>,
}

impl StateReport {
    pub fn add(&mut self, label: &str, elements: usize) {
        *self.entries.entry(String::from(label)).or_insert(0) += elements;
    }

    pub fn total(&self) -> usize {
        self.entries.values().sum()
    }

    pub fn get(&self, label: &str) -> usize {
        self.entries.get(label).copied().unwrap_or(0)
    }
}
