//! A synthetic world with a known set of attributes planted to co-occur
//! with a command, plus unrelated distractors.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use super::synthetic::{orthonormal_directions, CoOccurrence, SyntheticWorldSpec};
use crate::error::Result;
use crate::hierarchy::{AttributeHierarchy, HierarchySource};

#[derive(Debug, Clone, PartialEq)]
pub struct PlantedWorldConfig {
    pub planted: usize,
    pub distractors: usize,
    /// Other attributes in the command's category.
    pub siblings: usize,
    /// Latent correlation of each planted attribute with the command.
    pub correlation: f64,
    /// Prevalence of the command, its siblings and the planted attributes.
    pub prevalence: f64,
    /// Distractor prevalences are drawn uniformly from this interval.
    pub distractor_prevalence: (f64, f64),
    pub dim: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for PlantedWorldConfig {
    fn default() -> Self {
        Self {
            planted: 10,
            distractors: 30,
            siblings: 4,
            correlation: 0.85,
            prevalence: 0.15,
            distractor_prevalence: (0.05, 0.5),
            dim: 128,
            noise: 0.05,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PlantedWorld {
    pub spec: SyntheticWorldSpec,
    pub hierarchy: AttributeHierarchy,
    pub command: String,
    pub planted: Vec<String>,
    pub distractors: Vec<String>,
}

pub const PLANTED_COMMAND: &str = "target look";

/// Builds the world. Planted attributes correlate with the command at
/// `correlation` and with each other at `correlation^2`; distractors are
/// independent. Non-command attributes are grouped pairwise into categories.
pub fn planted_world(cfg: &PlantedWorldConfig) -> Result<PlantedWorld> {
    let command = PLANTED_COMMAND.to_string();
    let siblings: Vec<String> = (0..cfg.siblings).map(|i| format!("sibling look {i}")).collect();
    let planted: Vec<String> = (0..cfg.planted).map(|i| format!("planted trait {i}")).collect();
    let distractors: Vec<String> = (0..cfg.distractors).map(|i| format!("distractor trait {i}")).collect();

    let mut all: Vec<&str> = vec![&command];
    all.extend(siblings.iter().map(String::as_str));
    all.extend(planted.iter().map(String::as_str));
    all.extend(distractors.iter().map(String::as_str));
    let attribute_directions = orthonormal_directions(&all, cfg.dim, cfg.seed.wrapping_add(1))?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2));
    let mut prevalence = BTreeMap::new();
    for a in std::iter::once(&command).chain(&siblings).chain(&planted) {
        prevalence.insert(a.clone(), cfg.prevalence);
    }
    let (lo, hi) = cfg.distractor_prevalence;
    for d in &distractors {
        prevalence.insert(d.clone(), rng.gen_range(lo..hi));
    }

    let mut co_occurrence = Vec::new();
    for (i, p) in planted.iter().enumerate() {
        co_occurrence.push(CoOccurrence::new(command.clone(), p.clone(), cfg.correlation));
        for q in &planted[i + 1..] {
            co_occurrence.push(CoOccurrence::new(p.clone(), q.clone(), cfg.correlation * cfg.correlation));
        }
    }

    let mut rest: Vec<&String> = planted.iter().chain(&distractors).collect();
    let mut categories = vec![json!({
        "name": "target group",
        "attributes": std::iter::once(&command).chain(&siblings).collect::<Vec<_>>(),
    })];
    let mut k = 0;
    while !rest.is_empty() {
        let take = if rest.len() == 3 { 3 } else { 2.min(rest.len()) };
        let chunk: Vec<&String> = rest.drain(..take).collect();
        categories.push(json!({"name": format!("group {k}"), "attributes": chunk}));
        k += 1;
    }
    let hierarchy = AttributeHierarchy::from_json_str(
        &json!({"version": "planted", "categories": categories}).to_string(),
        HierarchySource::User,
    )?;

    Ok(PlantedWorld {
        spec: SyntheticWorldSpec {
            dim: cfg.dim,
            attribute_directions,
            co_occurrence,
            prevalence,
            noise: cfg.noise,
            seed: cfg.seed,
            model_id: "planted-world".into(),
        },
        hierarchy,
        command,
        planted,
        distractors,
    })
}
