//! Predicts which attributes co-occur with a command.
//!
//! Images are ranked by distance to the command text, filtered by
//! zero-shot classification over the command's category, and the top
//! survivors form the relevant set. Each candidate attribute is then
//! scored by its summed distance over the relevant set and over the whole
//! corpus; the two sums are turned into rank positions (1 = smallest sum)
//! and the final score is `r_comd / min(r_full, R)`, lower meaning more
//! entangled.

use std::collections::{BTreeMap, HashMap};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embedding::{EmbeddedCorpus, EmbeddingBackend, EmbeddingVector};
use crate::error::{Error, Result};
use crate::hierarchy::AttributeHierarchy;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictorConfig {
    /// Number of entangled attributes to return.
    pub n: usize,
    /// Cap applied to the full-corpus rank.
    pub rank_cap: usize,
    pub top_images: usize,
    pub min_images: usize,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self {
            n: 10,
            rank_cap: 40,
            top_images: 100,
            min_images: 5,
        }
    }
}

impl PredictorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rank_cap < 1 {
            return Err(Error::Config("rank_cap must be at least 1".into()));
        }
        if self.top_images < 1 {
            return Err(Error::Config("top_images must be at least 1".into()));
        }
        if self.min_images > self.top_images {
            return Err(Error::Config(format!(
                "min_images ({}) exceeds top_images ({})",
                self.min_images, self.top_images
            )));
        }
        Ok(())
    }
}

/// Corpus items ordered by ascending distance to the command.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRanking {
    pub command: String,
    /// Corpus row indices in rank order.
    pub order: Vec<usize>,
    pub item_ids: Vec<String>,
    pub scores: Vec<f64>,
}

/// Ranks by `distances` ascending; equal distances fall back to item id.
pub fn rank_by_distance(command: &str, item_ids: &[String], distances: &[f64]) -> ImageRanking {
    let mut order: Vec<usize> = (0..distances.len()).collect();
    order.sort_by(|&a, &b| {
        distances[a]
            .total_cmp(&distances[b])
            .then_with(|| item_ids[a].cmp(&item_ids[b]))
    });
    ImageRanking {
        command: command.to_string(),
        item_ids: order.iter().map(|&i| item_ids[i].clone()).collect(),
        scores: order.iter().map(|&i| distances[i]).collect(),
        order,
    }
}

pub fn rank_images(
    corpus: &EmbeddedCorpus,
    command: &str,
    backend: &dyn EmbeddingBackend,
) -> Result<ImageRanking> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let t = backend.embed_text(command)?;
    let d = corpus.distances_to(&t)?;
    Ok(rank_by_distance(command, corpus.item_ids(), &d))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelevantImageSet {
    pub command: String,
    pub labels: Vec<String>,
    pub item_ids: Vec<String>,
    #[serde(skip)]
    pub indices: Vec<usize>,
    /// Zero-shot label of each retained item (always the command).
    pub predicted_labels: Vec<String>,
}

/// Index of the nearest label; the earliest label wins a tie.
fn nearest_label(row: &[f32], labels: &[EmbeddingVector]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (k, t) in labels.iter().enumerate() {
        let d = crate::embedding::cosine_distance(row, t.values());
        if d < best_d {
            best = k;
            best_d = d;
        }
    }
    best
}

/// Keeps ranked images whose zero-shot label is the command, up to
/// `top_images` of them.
pub fn aggregate_relevant(
    ranking: &ImageRanking,
    corpus: &EmbeddedCorpus,
    labels: &[String],
    backend: &dyn EmbeddingBackend,
    top_images: usize,
) -> Result<RelevantImageSet> {
    let command_pos = labels
        .iter()
        .position(|l| *l == ranking.command)
        .ok_or_else(|| {
            Error::Validation(format!(
                "label set {labels:?} does not contain the command {:?}",
                ranking.command
            ))
        })?;
    let label_vecs = labels
        .iter()
        .map(|l| backend.embed_text(l))
        .collect::<Result<Vec<_>>>()?;
    let mut set = RelevantImageSet {
        command: ranking.command.clone(),
        labels: labels.to_vec(),
        item_ids: Vec::new(),
        indices: Vec::new(),
        predicted_labels: Vec::new(),
    };
    for &i in &ranking.order {
        if set.indices.len() == top_images {
            break;
        }
        if nearest_label(corpus.row(i), &label_vecs) == command_pos {
            set.indices.push(i);
            set.item_ids.push(corpus.item_ids()[i].clone());
            set.predicted_labels.push(ranking.command.clone());
        }
    }
    if set.indices.is_empty() {
        return Err(Error::NoRelevantImages {
            command: ranking.command.clone(),
            labels: labels.to_vec(),
        });
    }
    Ok(set)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeScore {
    pub attribute: String,
    pub sum_comd: f64,
    pub sum_full: f64,
    pub r_comd: usize,
    pub r_full: usize,
    pub score_final: f64,
}

/// 1-indexed rank positions of `values` ascending; ties by `names`.
pub fn rank_positions(values: &[f64], names: &[String]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then_with(|| names[a].cmp(&names[b])));
    let mut ranks = vec![0; values.len()];
    for (pos, &i) in order.iter().enumerate() {
        ranks[i] = pos + 1;
    }
    ranks
}

pub fn final_score(r_comd: usize, r_full: usize, rank_cap: usize) -> f64 {
    r_comd as f64 / r_full.min(rank_cap) as f64
}

/// Builds the score table from per-attribute sums.
pub fn score_table(
    names: &[String],
    sum_comd: &[f64],
    sum_full: &[f64],
    rank_cap: usize,
) -> Result<Vec<AttributeScore>> {
    if rank_cap < 1 {
        return Err(Error::Config("rank_cap must be at least 1".into()));
    }
    let r_comd = rank_positions(sum_comd, names);
    let r_full = rank_positions(sum_full, names);
    Ok((0..names.len())
        .map(|k| AttributeScore {
            attribute: names[k].clone(),
            sum_comd: sum_comd[k],
            sum_full: sum_full[k],
            r_comd: r_comd[k],
            r_full: r_full[k],
            score_final: final_score(r_comd[k], r_full[k], rank_cap),
        })
        .collect())
}

/// Attributes in ascending `score_final`, ties by text, at most `n`.
pub fn top_entangled(scores: &[AttributeScore], n: usize) -> Vec<AttributeScore> {
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| {
        a.score_final
            .total_cmp(&b.score_final)
            .then_with(|| a.attribute.cmp(&b.attribute))
    });
    sorted.truncate(n);
    sorted
}

/// Full-corpus distance sums, memoized per (corpus, attribute set, model).
#[derive(Debug, Default)]
pub struct FullScoreCache {
    entries: Mutex<HashMap<String, Vec<f64>>>,
}

impl FullScoreCache {
    pub fn new() -> Self {
        Self::default()
    }

    fn key(corpus: &EmbeddedCorpus, names: &[String]) -> String {
        let mut h = Sha256::new();
        h.update(corpus.fingerprint().as_bytes());
        h.update(corpus.model_id().as_bytes());
        for n in names {
            h.update([0u8]);
            h.update(n.as_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("score cache poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn get_or_compute(
        &self,
        corpus: &EmbeddedCorpus,
        names: &[String],
        compute: impl FnOnce() -> Result<Vec<f64>>,
    ) -> Result<Vec<f64>> {
        let key = Self::key(corpus, names);
        if let Some(v) = self.entries.lock().expect("score cache poisoned").get(&key) {
            return Ok(v.clone());
        }
        let v = compute()?;
        self.entries
            .lock()
            .expect("score cache poisoned")
            .insert(key, v.clone());
        Ok(v)
    }
}

fn sum_distances(corpus: &EmbeddedCorpus, rows: impl Iterator<Item = usize>, t: &EmbeddingVector) -> f64 {
    rows.map(|i| crate::embedding::cosine_distance(corpus.row(i), t.values()))
        .sum()
}

/// Scores every scoring attribute outside `excluded_category`.
pub fn score_attributes(
    relevant: &RelevantImageSet,
    corpus: &EmbeddedCorpus,
    hierarchy: &AttributeHierarchy,
    excluded_category: &str,
    backend: &dyn EmbeddingBackend,
    rank_cap: usize,
    cache: Option<&FullScoreCache>,
) -> Result<Vec<AttributeScore>> {
    if relevant.indices.is_empty() {
        return Err(Error::NoRelevantImages {
            command: relevant.command.clone(),
            labels: relevant.labels.clone(),
        });
    }
    if rank_cap < 1 {
        return Err(Error::Config("rank_cap must be at least 1".into()));
    }
    let names: Vec<String> = hierarchy
        .scoring_attributes()
        .filter(|a| a.category_id != excluded_category && a.text != relevant.command)
        .map(|a| a.text.clone())
        .collect();
    let texts = names
        .iter()
        .map(|n| backend.embed_text(n))
        .collect::<Result<Vec<_>>>()?;
    let sum_comd: Vec<f64> = texts
        .iter()
        .map(|t| sum_distances(corpus, relevant.indices.iter().copied(), t))
        .collect();
    let full = || -> Result<Vec<f64>> {
        for t in &texts {
            corpus.distances_to(t)?;
        }
        Ok(texts
            .iter()
            .map(|t| sum_distances(corpus, 0..corpus.len(), t))
            .collect())
    };
    let sum_full = match cache {
        Some(c) => c.get_or_compute(corpus, &names, full)?,
        None => full()?,
    };
    score_table(&names, &sum_comd, &sum_full, rank_cap)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntanglementPrediction {
    pub command: String,
    pub excluded_category: String,
    pub config: PredictorConfig,
    pub entangled: Vec<AttributeScore>,
    pub scores: Vec<AttributeScore>,
    pub relevant_item_ids: Vec<String>,
}

impl EntanglementPrediction {
    pub fn entangled_texts(&self) -> Vec<String> {
        self.entangled.iter().map(|s| s.attribute.clone()).collect()
    }
}

pub fn predict_entangled(
    command: &str,
    corpus: &EmbeddedCorpus,
    hierarchy: &AttributeHierarchy,
    backend: &dyn EmbeddingBackend,
    category_hint: Option<&str>,
    config: &PredictorConfig,
    cache: Option<&FullScoreCache>,
) -> Result<EntanglementPrediction> {
    config.validate()?;
    let category = hierarchy.resolve_command(command, category_hint)?;
    let labels = hierarchy.labels_for_command(command, category_hint)?;
    let ranking = rank_images(corpus, command, backend)?;
    let relevant = aggregate_relevant(&ranking, corpus, &labels, backend, config.top_images)?;
    if relevant.indices.len() < config.min_images {
        return Err(Error::TooFewRelevant {
            command: command.to_string(),
            found: relevant.indices.len(),
            min: config.min_images,
        });
    }
    let scores = score_attributes(
        &relevant,
        corpus,
        hierarchy,
        &category.id,
        backend,
        config.rank_cap,
        cache,
    )?;
    Ok(EntanglementPrediction {
        command: command.to_string(),
        excluded_category: category.id.clone(),
        config: *config,
        entangled: top_entangled(&scores, config.n),
        scores,
        relevant_item_ids: relevant.item_ids,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiPrediction {
    pub predictions: Vec<EntanglementPrediction>,
    /// Deduplicated union of the entangled lists, minus every command's
    /// own category.
    pub union: Vec<String>,
}

pub fn predict_multi(
    commands: &[String],
    corpus: &EmbeddedCorpus,
    hierarchy: &AttributeHierarchy,
    backend: &dyn EmbeddingBackend,
    category_hints: &BTreeMap<String, String>,
    config: &PredictorConfig,
    cache: Option<&FullScoreCache>,
) -> Result<MultiPrediction> {
    if commands.is_empty() {
        return Err(Error::Validation("at least one command is required".into()));
    }
    let predictions = commands
        .iter()
        .map(|c| {
            predict_entangled(
                c,
                corpus,
                hierarchy,
                backend,
                category_hints.get(c).map(String::as_str),
                config,
                cache,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MultiPrediction {
        union: union_entangled(&predictions, hierarchy),
        predictions,
    })
}

pub fn union_entangled(
    predictions: &[EntanglementPrediction],
    hierarchy: &AttributeHierarchy,
) -> Vec<String> {
    let excluded: Vec<&str> = predictions.iter().map(|p| p.excluded_category.as_str()).collect();
    let commands: Vec<&str> = predictions.iter().map(|p| p.command.as_str()).collect();
    let mut union: Vec<String> = Vec::new();
    for p in predictions {
        for a in &p.entangled {
            let in_excluded = hierarchy
                .category_of(&a.attribute)
                .is_some_and(|c| excluded.contains(&c.id.as_str()));
            if !in_excluded && !commands.contains(&a.attribute.as_str()) && !union.contains(&a.attribute) {
                union.push(a.attribute.clone());
            }
        }
    }
    union
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::embedding::{
        generate_synthetic_corpus, orthonormal_directions, CoOccurrence, SyntheticBackend,
        SyntheticWorldSpec,
    };
    use crate::hierarchy::HierarchySource;

    fn names(list: &[&str]) -> Vec<String> {
        list.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn final_score_examples() {
        assert_eq!(final_score(2, 100, 40), 0.05);
        assert_eq!(final_score(5, 3, 40), 5.0 / 3.0);
        assert!(score_table(&names(&["a"]), &[1.0], &[1.0], 0).is_err());
    }

    #[test]
    fn ranks_are_a_permutation_with_text_ties() {
        let n = names(&["b", "a", "c", "d"]);
        assert_eq!(rank_positions(&[0.5, 0.5, 0.1, 0.9], &n), [3, 2, 1, 4]);
    }

    #[test]
    fn ranking_matches_sort_and_breaks_ties_by_id() {
        let ids = names(&["e", "d", "c", "b", "a"]);
        let d = [0.4, 0.1, 0.3, 0.1, 0.2];
        let r = rank_by_distance("x", &ids, &d);
        assert_eq!(r.item_ids, ["b", "d", "a", "c", "e"]);
        assert!(r.scores.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn n_larger_than_table_returns_everything() {
        let n = names(&["a", "b", "c"]);
        let table = score_table(&n, &[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0], 40).unwrap();
        assert_eq!(top_entangled(&table, 50).len(), 3);
    }

    fn tiny_world() -> (EmbeddedCorpus, SyntheticBackend, AttributeHierarchy) {
        let attrs = ["grey hair", "black hair", "white skin", "black skin", "with glasses"];
        let spec = SyntheticWorldSpec {
            dim: 8,
            attribute_directions: orthonormal_directions(&attrs, 8, 2).unwrap(),
            co_occurrence: vec![CoOccurrence::new("grey hair", "white skin", 0.8)],
            prevalence: BTreeMap::new(),
            noise: 0.05,
            seed: 4,
            model_id: "syn".into(),
        };
        let (corpus, _) = generate_synthetic_corpus(&spec, 120).unwrap();
        let backend = SyntheticBackend::for_world(&spec).unwrap();
        let h = AttributeHierarchy::from_json_str(
            r#"{"version": "t", "categories": [
                {"name": "hair color", "attributes": ["grey hair", "black hair"]},
                {"name": "skin color", "attributes": ["white skin", "black skin"]},
                {"name": "glasses", "binary": true, "attributes": ["with glasses", "without glasses"]}]}"#,
            HierarchySource::User,
        )
        .unwrap();
        (corpus, backend, h)
    }

    #[test]
    fn top_images_takes_the_first_survivors() {
        let (corpus, backend, h) = tiny_world();
        let ranking = rank_images(&corpus, "grey hair", &backend).unwrap();
        let labels = h.labels_for_command("grey hair", None).unwrap();
        let all = aggregate_relevant(&ranking, &corpus, &labels, &backend, 1000).unwrap();
        assert!(all.item_ids.len() >= 10);
        let three = aggregate_relevant(&ranking, &corpus, &labels, &backend, 3).unwrap();
        assert_eq!(three.item_ids, all.item_ids[..3]);
    }

    #[test]
    fn excluded_category_never_predicted() {
        let (corpus, backend, h) = tiny_world();
        let cfg = PredictorConfig::default();
        let p = predict_entangled("grey hair", &corpus, &h, &backend, None, &cfg, None).unwrap();
        assert_eq!(p.excluded_category, "hair_color");
        let texts = p.entangled_texts();
        assert!(!texts.iter().any(|t| t.ends_with("hair")));
        assert!(!texts.contains(&"without glasses".to_string()));
        let white = p.scores.iter().find(|s| s.attribute == "white skin").unwrap();
        assert_eq!(white.r_comd, 1);
        assert_eq!(p.scores.len(), 3);
    }

    #[test]
    fn no_survivors_is_an_error_and_few_survivors_is_checked() {
        let (corpus, mut backend, h) = tiny_world();
        let grey = backend.embed_text("grey hair").unwrap().to_f64();
        backend.register("silver hair", &grey).unwrap();
        let ranking = rank_images(&corpus, "grey hair", &backend).unwrap();
        let labels = names(&["silver hair", "grey hair"]);
        let err = aggregate_relevant(&ranking, &corpus, &labels, &backend, 10).unwrap_err();
        assert!(matches!(err, Error::NoRelevantImages { .. }));
        assert!(err.to_string().contains("silver hair"));
        let cfg = PredictorConfig {
            min_images: 100,
            top_images: 100,
            ..Default::default()
        };
        let err = predict_entangled("grey hair", &corpus, &h, &backend, None, &cfg, None).unwrap_err();
        assert!(matches!(err, Error::TooFewRelevant { .. }), "{err}");
    }

    #[test]
    fn full_sums_are_memoized() {
        let (corpus, backend, h) = tiny_world();
        let cache = FullScoreCache::new();
        let cfg = PredictorConfig::default();
        let a = predict_entangled("grey hair", &corpus, &h, &backend, None, &cfg, Some(&cache)).unwrap();
        let b = predict_entangled("grey hair", &corpus, &h, &backend, None, &cfg, Some(&cache)).unwrap();
        let c = predict_entangled("grey hair", &corpus, &h, &backend, None, &cfg, None).unwrap();
        assert_eq!(cache.len(), 1);
        assert_eq!(a, b);
        assert_eq!(a, c);
    }

    #[test]
    fn multi_prediction_unions_and_degenerates() {
        let (corpus, backend, h) = tiny_world();
        let cfg = PredictorConfig::default();
        let hints = BTreeMap::new();
        let single = predict_entangled("grey hair", &corpus, &h, &backend, None, &cfg, None).unwrap();
        let multi = predict_multi(&names(&["grey hair"]), &corpus, &h, &backend, &hints, &cfg, None).unwrap();
        assert_eq!(multi.predictions, vec![single.clone()]);
        assert_eq!(multi.union, single.entangled_texts());

        let both = predict_multi(
            &names(&["grey hair", "white skin"]),
            &corpus,
            &h,
            &backend,
            &hints,
            &cfg,
            None,
        )
        .unwrap();
        assert_eq!(both.union, ["with glasses"]);
        assert!(predict_multi(&[], &corpus, &h, &backend, &hints, &cfg, None).is_err());
    }

    fn distinct_sums(len: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::btree_set(1u32..100_000, len)
            .prop_map(|s| s.into_iter().map(|v| f64::from(v) / 1000.0).collect::<Vec<_>>())
            .prop_shuffle()
    }

    fn table_inputs() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, usize)> {
        (2usize..30).prop_flat_map(|m| (distinct_sums(m), distinct_sums(m), 1usize..60))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(256))]

        #[test]
        fn ranks_are_scale_invariant((comd, full, cap) in table_inputs(), c in 0.01f64..100.0) {
            let n: Vec<String> = (0..comd.len()).map(|i| format!("a{i:02}")).collect();
            let base = score_table(&n, &comd, &full, cap).unwrap();
            let sc: Vec<f64> = comd.iter().map(|v| v * c).collect();
            let sf: Vec<f64> = full.iter().map(|v| v * c).collect();
            let scaled = score_table(&n, &sc, &sf, cap).unwrap();
            for (a, b) in base.iter().zip(&scaled) {
                prop_assert_eq!(a.r_comd, b.r_comd);
                prop_assert_eq!(a.r_full, b.r_full);
                prop_assert_eq!(a.score_final.to_bits(), b.score_final.to_bits());
            }
            let texts = |t: &[AttributeScore]| {
                top_entangled(t, 10).into_iter().map(|s| s.attribute).collect::<Vec<_>>()
            };
            prop_assert_eq!(texts(&base), texts(&scaled));
        }

        #[test]
        fn raising_the_cap_never_raises_scores((comd, full, cap) in table_inputs(), extra in 1usize..40) {
            let n: Vec<String> = (0..comd.len()).map(|i| format!("a{i:02}")).collect();
            let low = score_table(&n, &comd, &full, cap).unwrap();
            let high = score_table(&n, &comd, &full, cap + extra).unwrap();
            for (a, b) in low.iter().zip(&high) {
                prop_assert!(b.score_final <= a.score_final);
            }
        }

        #[test]
        fn ranks_form_a_permutation(values in prop::collection::vec(0.0f64..5.0, 1..40)) {
            let n: Vec<String> = (0..values.len()).map(|i| format!("a{i:02}")).collect();
            let mut r = rank_positions(&values, &n);
            r.sort_unstable();
            prop_assert_eq!(r, (1..=values.len()).collect::<Vec<_>>());
        }
    }
}
