use crate::cds::{select_top_k, validate_k_fraction, CdsSelection, SupportPooling};
use crate::descriptor::Episode;
use crate::error::{Error, Result};
use crate::query::{episode_scores, QueryEvaluation, ScoreRule, ThresholdMlp};
use crate::registry;

/// Inference-time settings shared by training, evaluation and checkpoints.
#[derive(Debug, Clone, Copy)]
pub struct Scoring {
    pub k_fraction: f64,
    pub lambda: f64,
    pub rule: &'static dyn ScoreRule,
    pub pooling: &'static dyn SupportPooling,
}

impl Default for Scoring {
    fn default() -> Self {
        Self {
            k_fraction: 0.1,
            lambda: 20.0,
            rule: registry::score_rule(registry::DEFAULT_SCORE_RULE).expect("default score rule"),
            pooling: registry::pooling(registry::DEFAULT_POOLING).expect("default pooling"),
        }
    }
}

impl Scoring {
    pub fn named(k_fraction: f64, lambda: f64, rule: &str, pooling: &str) -> Result<Self> {
        let s = Self {
            k_fraction,
            lambda,
            rule: registry::score_rule(rule)?,
            pooling: registry::pooling(pooling)?,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        validate_k_fraction(self.k_fraction)?;
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "lambda must be finite and non-negative, got {}",
                self.lambda
            )));
        }
        Ok(())
    }

    pub fn select(&self, episode: &Episode) -> Result<CdsSelection> {
        let pool = self.pooling.build(episode.support())?;
        select_top_k(&pool, self.k_fraction)
    }

    /// Pools, selects and scores one episode.
    pub fn evaluate(&self, episode: &Episode, mlp: &ThresholdMlp) -> Result<QueryEvaluation> {
        let selection = self.select(episode)?;
        episode_scores(episode, &selection, mlp, self.lambda, self.rule)
    }
}
