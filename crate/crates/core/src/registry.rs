//! Name-keyed lookup of the interchangeable pipeline strategies.
//!
//! Support pooling (`raw`, `class-mean`) and class-score aggregation
//! (`weighted-sim`, `literal`) are selected by name from configs, checkpoints
//! and the command line.

use crate::cds::{ClassMeanPooling, RawPooling, SupportPooling};
use crate::error::{Error, Result};
use crate::query::{Literal, ScoreRule, WeightedSim};

static POOLINGS: &[&dyn SupportPooling] = &[&RawPooling, &ClassMeanPooling];
static SCORE_RULES: &[&dyn ScoreRule] = &[&WeightedSim, &Literal];

pub const DEFAULT_POOLING: &str = "raw";
pub const DEFAULT_SCORE_RULE: &str = "weighted-sim";

pub fn pooling(name: &str) -> Result<&'static dyn SupportPooling> {
    POOLINGS
        .iter()
        .copied()
        .find(|p| p.name() == name)
        .ok_or_else(|| Error::UnknownStrategy {
            kind: "support pooling",
            name: name.to_string(),
            known: pooling_names().join(", "),
        })
}

pub fn score_rule(name: &str) -> Result<&'static dyn ScoreRule> {
    SCORE_RULES
        .iter()
        .copied()
        .find(|r| r.name() == name)
        .ok_or_else(|| Error::UnknownStrategy {
            kind: "score form",
            name: name.to_string(),
            known: score_rule_names().join(", "),
        })
}

pub fn pooling_names() -> Vec<&'static str> {
    POOLINGS.iter().map(|p| p.name()).collect()
}

pub fn score_rule_names() -> Vec<&'static str> {
    SCORE_RULES.iter().map(|r| r.name()).collect()
}
