//! Compares the predictor against a direct re-implementation on small
//! random corpora.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use untangle_core::embedding::{EmbeddedCorpus, EmbeddingBackend, EmbeddingVector, SyntheticBackend};
use untangle_core::hierarchy::{AttributeHierarchy, HierarchySource};
use untangle_core::predict::{predict_entangled, PredictorConfig};
use untangle_core::Error;

const DIM: usize = 16;
const MODEL: &str = "oracle-model";

struct Case {
    hierarchy: AttributeHierarchy,
    backend: SyntheticBackend,
    corpus: EmbeddedCorpus,
    command: String,
    labels: Vec<String>,
    scoring: Vec<String>,
}

fn gaussian(rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..DIM).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn build(seed: u64, items: usize, categories: usize) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut backend = SyntheticBackend::identity(MODEL, DIM);
    let mut cats = Vec::new();
    let mut scoring = Vec::new();
    let mut dirs = Vec::new();
    for c in 0..categories {
        let size = rng.gen_range(2..=4);
        let attrs: Vec<String> = (0..size).map(|j| format!("c{c} a{j}")).collect();
        for a in &attrs {
            let d = gaussian(&mut rng);
            backend.register(a, &d).unwrap();
            scoring.push(a.clone());
            dirs.push(d);
        }
        cats.push(json!({"name": format!("cat {c}"), "attributes": attrs}));
    }
    let d = gaussian(&mut rng);
    backend.register("with mark", &d).unwrap();
    backend
        .register("without mark", &d.iter().map(|v| -v).collect::<Vec<_>>())
        .unwrap();
    scoring.push("with mark".into());
    dirs.push(d);
    cats.push(json!({"name": "mark", "binary": true, "attributes": ["with mark", "without mark"]}));
    let hierarchy = AttributeHierarchy::from_json_str(
        &json!({"version": "oracle", "categories": cats}).to_string(),
        HierarchySource::User,
    )
    .unwrap();

    let mut ids: Vec<String> = (0..items).map(|i| format!("item-{i:03}")).collect();
    for i in (1..ids.len()).rev() {
        ids.swap(i, rng.gen_range(0..=i));
    }
    let rows = (0..items)
        .map(|_| {
            let mut v = gaussian(&mut rng);
            for d in &dirs {
                if rng.gen_bool(0.3) {
                    for (x, y) in v.iter_mut().zip(d) {
                        *x += 2.0 * y;
                    }
                }
            }
            EmbeddingVector::from_f64(&v, MODEL).unwrap()
        })
        .collect();
    let corpus = EmbeddedCorpus::from_rows(ids, rows, vec!["oracle".into(); items]).unwrap();
    let labels: Vec<String> = (0..4).map(|j| format!("c0 a{j}")).filter(|a| scoring.contains(a)).collect();
    Case {
        hierarchy,
        backend,
        corpus,
        command: "c0 a0".into(),
        labels,
        scoring,
    }
}

fn dist(a: &[f32], b: &[f32]) -> f64 {
    let a: Vec<f64> = a.iter().map(|&v| v as f64).collect();
    let b: Vec<f64> = b.iter().map(|&v| v as f64).collect();
    let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    1.0 - dot / (na * nb)
}

struct OracleRow {
    attribute: String,
    sum_comd: f64,
    sum_full: f64,
    r_comd: usize,
    r_full: usize,
    score: f64,
}

/// Returns None when no image survives the zero-shot filter.
fn oracle(case: &Case, top_images: usize, rank_cap: usize, n: usize) -> Option<(Vec<String>, Vec<OracleRow>, Vec<String>)> {
    let emb = |t: &str| case.backend.embed_text(t).unwrap().values().to_vec();
    let t_c = emb(&case.command);
    let label_embs: Vec<Vec<f32>> = case.labels.iter().map(|l| emb(l)).collect();
    let corpus = &case.corpus;

    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.sort_by(|&a, &b| {
        dist(corpus.row(a), &t_c)
            .partial_cmp(&dist(corpus.row(b), &t_c))
            .unwrap()
            .then(corpus.item_ids()[a].cmp(&corpus.item_ids()[b]))
    });
    let mut relevant = Vec::new();
    for &i in &order {
        let mut best = 0;
        for k in 1..label_embs.len() {
            if dist(corpus.row(i), &label_embs[k]) < dist(corpus.row(i), &label_embs[best]) {
                best = k;
            }
        }
        if case.labels[best] == case.command {
            relevant.push(i);
        }
        if relevant.len() == top_images {
            break;
        }
    }
    if relevant.is_empty() {
        return None;
    }

    let names: Vec<String> = case.scoring.iter().filter(|a| !a.starts_with("c0 ")).cloned().collect();
    let mut rows: Vec<OracleRow> = names
        .iter()
        .map(|a| {
            let t = emb(a);
            OracleRow {
                attribute: a.clone(),
                sum_comd: relevant.iter().map(|&i| dist(corpus.row(i), &t)).sum(),
                sum_full: (0..corpus.len()).map(|i| dist(corpus.row(i), &t)).sum(),
                r_comd: 0,
                r_full: 0,
                score: 0.0,
            }
        })
        .collect();
    let rank = |v: &dyn Fn(&OracleRow) -> f64, k: usize, rows: &[OracleRow]| {
        1 + rows
            .iter()
            .filter(|o| v(o) < v(&rows[k]) || (v(o) == v(&rows[k]) && o.attribute < rows[k].attribute))
            .count()
    };
    for k in 0..rows.len() {
        let rc = rank(&|o: &OracleRow| o.sum_comd, k, &rows);
        let rf = rank(&|o: &OracleRow| o.sum_full, k, &rows);
        rows[k].r_comd = rc;
        rows[k].r_full = rf;
        rows[k].score = rc as f64 / rf.min(rank_cap) as f64;
    }
    let mut top: Vec<&OracleRow> = rows.iter().collect();
    top.sort_by(|a, b| a.score.partial_cmp(&b.score).unwrap().then(a.attribute.cmp(&b.attribute)));
    let top = top.into_iter().take(n).map(|o| o.attribute.clone()).collect();
    let ids = relevant.iter().map(|&i| corpus.item_ids()[i].clone()).collect();
    Some((top, rows, ids))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn predictor_matches_oracle(
        seed in any::<u64>(),
        items in 5usize..=50,
        categories in 2usize..=4,
        top_images in 1usize..=20,
        rank_cap in 1usize..=15,
        n in 1usize..=12,
    ) {
        let case = build(seed, items, categories);
        let config = PredictorConfig { n, rank_cap, top_images, min_images: 1 };
        let got = predict_entangled(&case.command, &case.corpus, &case.hierarchy, &case.backend, None, &config, None);
        match oracle(&case, top_images, rank_cap, n) {
            None => prop_assert!(matches!(got, Err(Error::NoRelevantImages { .. })), "expected no survivors"),
            Some((top, rows, ids)) => {
                let got = got.unwrap();
                prop_assert_eq!(&got.relevant_item_ids, &ids);
                prop_assert_eq!(got.entangled_texts(), top);
                prop_assert_eq!(got.scores.len(), rows.len());
                for o in &rows {
                    let s = got.scores.iter().find(|s| s.attribute == o.attribute).unwrap();
                    prop_assert_eq!(s.r_comd, o.r_comd);
                    prop_assert_eq!(s.r_full, o.r_full);
                    prop_assert_eq!(s.score_final.to_bits(), o.score.to_bits());
                    prop_assert!((s.sum_comd - o.sum_comd).abs() < 1e-9);
                    prop_assert!((s.sum_full - o.sum_full).abs() < 1e-9);
                }
            }
        }
    }
}
