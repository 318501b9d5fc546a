//! Resolves the category of a command by scoring templated sentences
//! with a language model and picking the least perplexing one.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_CATEGORY_TEMPLATE: &str = "[Y] is a kind of [X]";
pub const COMMAND_SLOT: &str = "[Y]";
pub const CATEGORY_SLOT: &str = "[X]";

/// Per-token log-probabilities of a sentence under a language model.
pub trait SentenceScorer: Send + Sync {
    fn token_log_probs(&self, sentence: &str) -> Result<Vec<f64>>;
}

/// `exp(-mean(log p))` over tokens.
pub fn perplexity(log_probs: &[f64]) -> Result<f64> {
    if log_probs.is_empty() {
        return Err(Error::Backend("scorer returned no tokens".into()));
    }
    if log_probs.iter().any(|l| !l.is_finite() || *l > 0.0) {
        return Err(Error::Backend(format!(
            "scorer returned invalid log-probabilities {log_probs:?}"
        )));
    }
    let mean = log_probs.iter().sum::<f64>() / log_probs.len() as f64;
    Ok((-mean).exp())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CategoryQuery {
    pub command: String,
    pub candidates: Vec<String>,
    pub template: String,
}

impl CategoryQuery {
    pub fn new(command: impl Into<String>, candidates: Vec<String>) -> Self {
        Self {
            command: command.into(),
            candidates,
            template: DEFAULT_CATEGORY_TEMPLATE.to_string(),
        }
    }

    pub fn with_template(mut self, template: impl Into<String>) -> Self {
        self.template = template.into();
        self
    }

    fn validate(&self) -> Result<()> {
        for slot in [COMMAND_SLOT, CATEGORY_SLOT] {
            let n = self.template.matches(slot).count();
            if n != 1 {
                return Err(Error::Validation(format!(
                    "template {:?} must contain {slot} exactly once, found {n}",
                    self.template
                )));
            }
        }
        if self.candidates.is_empty() {
            return Err(Error::Validation(format!(
                "no candidate categories for command {:?}",
                self.command
            )));
        }
        if self.command.trim().is_empty() {
            return Err(Error::Validation("empty command".into()));
        }
        Ok(())
    }

    pub fn sentence(&self, candidate: &str) -> String {
        self.template
            .replace(COMMAND_SLOT, &self.command)
            .replace(CATEGORY_SLOT, candidate)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryScore {
    pub category: String,
    pub sentence: String,
    pub perplexity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryResult {
    pub command: String,
    pub category: String,
    /// Several candidates shared the minimum perplexity.
    pub tie: bool,
    /// The category was pinned in configuration rather than scored.
    pub manual: bool,
    pub scores: Vec<CategoryScore>,
}

/// Scores every candidate and returns the argmin. Equal minima resolve
/// to the lexicographically first candidate and set `tie`.
pub fn find_category(query: &CategoryQuery, scorer: &dyn SentenceScorer) -> Result<CategoryResult> {
    query.validate()?;
    let mut scores = Vec::with_capacity(query.candidates.len());
    for candidate in &query.candidates {
        let sentence = query.sentence(candidate);
        let ppl = perplexity(&scorer.token_log_probs(&sentence)?)?;
        scores.push(CategoryScore {
            category: candidate.clone(),
            sentence,
            perplexity: ppl,
        });
    }
    let min = scores
        .iter()
        .map(|s| s.perplexity)
        .fold(f64::INFINITY, f64::min);
    let mut best: Vec<&str> = scores
        .iter()
        .filter(|s| s.perplexity == min)
        .map(|s| s.category.as_str())
        .collect();
    best.sort_unstable();
    best.dedup();
    Ok(CategoryResult {
        command: query.command.clone(),
        category: best[0].to_string(),
        tie: best.len() > 1,
        manual: false,
        scores,
    })
}

/// A result pinned by configuration; the scorer is not consulted.
pub fn manual_category(command: &str, category: &str) -> CategoryResult {
    CategoryResult {
        command: command.to_string(),
        category: category.to_string(),
        tie: false,
        manual: true,
        scores: Vec::new(),
    }
}
