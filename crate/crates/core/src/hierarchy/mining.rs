//! Prompt-based attribute mining with a masked-language-model infiller.
//!
//! Mining only proposes candidates; curating them into a hierarchy is a
//! manual step, so nothing here touches an [`AttributeHierarchy`](super::AttributeHierarchy).

use std::collections::HashSet;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MASK_SLOT: &str = "[MASK]";
pub const KEYWORD_SLOT: &str = "[X]";

/// Default number of infill candidates kept per prompt.
pub const DEFAULT_TOP_K: usize = 10;

/// Fills the single mask token of a sentence.
pub trait Infiller {
    /// Returns up to `top_k` fillers for the mask, most likely first.
    fn infill(&self, sentence: &str, top_k: usize) -> Result<Vec<String>>;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MiningPrompt {
    pub template: String,
    pub keyword: String,
}

impl MiningPrompt {
    pub fn new(template: impl Into<String>, keyword: impl Into<String>) -> Result<Self> {
        let prompt = Self {
            template: template.into(),
            keyword: keyword.into(),
        };
        prompt.render()?;
        Ok(prompt)
    }

    /// Substitutes the keyword, checking that exactly one mask remains.
    pub fn render(&self) -> Result<String> {
        let masks = self.template.matches(MASK_SLOT).count();
        let slots = self.template.matches(KEYWORD_SLOT).count();
        if masks != 1 {
            return Err(Error::Validation(format!(
                "template {:?} must contain exactly one {MASK_SLOT} slot, found {masks}",
                self.template
            )));
        }
        if slots != 1 {
            return Err(Error::Validation(format!(
                "template {:?} must contain exactly one {KEYWORD_SLOT} slot, found {slots}",
                self.template
            )));
        }
        if self.keyword.trim().is_empty() || self.keyword.contains(MASK_SLOT) {
            return Err(Error::Validation(format!(
                "invalid keyword {:?}",
                self.keyword
            )));
        }
        Ok(self.template.replace(KEYWORD_SLOT, self.keyword.trim()))
    }
}

/// One mining result line: candidates for a (prompt, keyword) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiningRecord {
    pub template: String,
    pub keyword: String,
    pub prompt: String,
    pub candidates: Vec<String>,
    /// Candidate phrases, e.g. "blue" under keyword "eyes" becomes "blue eyes".
    pub attributes: Vec<String>,
}

pub fn mine_attributes(
    prompts: &[MiningPrompt],
    infiller: &dyn Infiller,
    top_k: usize,
) -> Result<Vec<MiningRecord>> {
    if top_k == 0 {
        return Err(Error::Validation("top_k must be at least 1".into()));
    }
    let mut out = Vec::with_capacity(prompts.len());
    for p in prompts {
        let sentence = p.render()?;
        let raw = infiller.infill(&sentence, top_k)?;
        let mut seen = HashSet::new();
        let candidates: Vec<String> = raw
            .into_iter()
            .map(|c| c.trim().to_lowercase())
            .filter(|c| c.chars().any(char::is_alphanumeric))
            .filter(|c| seen.insert(c.clone()))
            .take(top_k)
            .collect();
        let keyword = p.keyword.trim().to_lowercase();
        let attributes = candidates.iter().map(|c| format!("{c} {keyword}")).collect();
        out.push(MiningRecord {
            template: p.template.clone(),
            keyword,
            prompt: sentence,
            candidates,
            attributes,
        });
    }
    Ok(out)
}

pub fn write_jsonl<W: Write>(mut w: W, records: &[MiningRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}
