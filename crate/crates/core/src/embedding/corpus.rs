use std::collections::{HashMap, HashSet};
use std::path::PathBuf;

use sha2::{Digest, Sha256};

use super::cache::{cache_key, EmbeddingCache};
use super::{cosine_distance, EmbeddingBackend, EmbeddingVector, Image};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub enum ItemSource {
    /// A raw little-endian f32 image file.
    File(PathBuf),
    Image(Image),
}

#[derive(Debug, Clone)]
pub struct CorpusItem {
    pub id: String,
    pub source: ItemSource,
}

impl CorpusItem {
    pub fn image(id: impl Into<String>, image: Image) -> Self {
        Self {
            id: id.into(),
            source: ItemSource::Image(image),
        }
    }

    fn content(&self) -> Result<(Vec<u8>, String)> {
        match &self.source {
            ItemSource::File(path) => {
                let bytes = std::fs::read(path).map_err(|source| Error::UnreadableItem {
                    id: self.id.clone(),
                    source,
                })?;
                Ok((bytes, format!("file:{}", path.display())))
            }
            ItemSource::Image(img) => Ok((img.to_bytes(), "memory".to_string())),
        }
    }
}

/// An image set with one unit-norm embedding row per item.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddedCorpus {
    item_ids: Vec<String>,
    embeddings: Vec<f32>,
    dim: usize,
    model_id: String,
    provenance: Vec<String>,
    fingerprint: String,
}

impl EmbeddedCorpus {
    pub fn from_rows(
        item_ids: Vec<String>,
        rows: Vec<EmbeddingVector>,
        provenance: Vec<String>,
    ) -> Result<Self> {
        let first = rows.first().ok_or(Error::EmptyCorpus)?;
        let dim = first.dim();
        let model_id = first.model_id().to_string();
        if item_ids.len() != rows.len() || provenance.len() != rows.len() {
            return Err(Error::Validation(format!(
                "{} ids, {} rows and {} provenance entries",
                item_ids.len(),
                rows.len(),
                provenance.len()
            )));
        }
        let mut seen = HashSet::with_capacity(item_ids.len());
        for id in &item_ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::Validation(format!("duplicate item id {id:?}")));
            }
        }
        let mut embeddings = Vec::with_capacity(rows.len() * dim);
        for row in &rows {
            if row.model_id() != model_id {
                return Err(Error::ModelMismatch {
                    left: model_id,
                    right: row.model_id().to_string(),
                });
            }
            if row.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: row.dim(),
                });
            }
            embeddings.extend_from_slice(row.values());
        }
        let mut h = Sha256::new();
        h.update(model_id.as_bytes());
        for id in &item_ids {
            h.update(id.as_bytes());
            h.update([0u8]);
        }
        for v in &embeddings {
            h.update(v.to_le_bytes());
        }
        Ok(Self {
            item_ids,
            embeddings,
            dim,
            model_id,
            provenance,
            fingerprint: hex::encode(h.finalize()),
        })
    }

    pub fn len(&self) -> usize {
        self.item_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.item_ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn model_id(&self) -> &str {
        &self.model_id
    }

    pub fn item_ids(&self) -> &[String] {
        &self.item_ids
    }

    pub fn provenance(&self) -> &[String] {
        &self.provenance
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.embeddings[i * self.dim..(i + 1) * self.dim]
    }

    /// Content hash of ids, embeddings and model id.
    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    fn check_compatible(&self, v: &EmbeddingVector) -> Result<()> {
        if v.model_id() != self.model_id {
            return Err(Error::ModelMismatch {
                left: self.model_id.clone(),
                right: v.model_id().to_string(),
            });
        }
        if v.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: v.dim(),
            });
        }
        Ok(())
    }

    /// Distance of every item to `v`, in corpus order.
    pub fn distances_to(&self, v: &EmbeddingVector) -> Result<Vec<f64>> {
        self.check_compatible(v)?;
        Ok((0..self.len())
            .map(|i| cosine_distance(self.row(i), v.values()))
            .collect())
    }

    pub fn distance(&self, item: usize, v: &EmbeddingVector) -> Result<f64> {
        self.check_compatible(v)?;
        Ok(cosine_distance(self.row(item), v.values()))
    }
}

/// Embeds every item, reusing cached embeddings. Identical content is
/// embedded at most once per model.
pub fn build_corpus(
    backend: &dyn EmbeddingBackend,
    items: &[CorpusItem],
    cache: Option<&EmbeddingCache>,
) -> Result<EmbeddedCorpus> {
    if items.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let model_id = backend.model_id().to_string();
    let mut memo: HashMap<String, EmbeddingVector> = HashMap::new();
    let mut rows = Vec::with_capacity(items.len());
    let mut provenance = Vec::with_capacity(items.len());
    for item in items {
        let (bytes, origin) = item.content()?;
        let key = cache_key(&bytes, &model_id);
        let vector = if let Some(v) = memo.get(&key) {
            v.clone()
        } else {
            let cached = cache
                .and_then(|c| c.get(&key, &model_id))
                .filter(|v| v.len() == backend.dim())
                .and_then(|v| EmbeddingVector::from_unit(v, model_id.clone()).ok());
            let v = match cached {
                Some(v) => v,
                None => {
                    let image = Image::from_bytes(&bytes).map_err(|e| {
                        Error::Validation(format!("item {:?}: {e}", item.id))
                    })?;
                    let v = backend.embed_image(&image)?;
                    if let Some(c) = cache {
                        c.put(&key, &model_id, v.values())?;
                    }
                    v
                }
            };
            memo.insert(key.clone(), v.clone());
            v
        };
        rows.push(vector);
        provenance.push(format!("{origin} sha256:{}", &key[..16]));
    }
    EmbeddedCorpus::from_rows(
        items.iter().map(|i| i.id.clone()).collect(),
        rows,
        provenance,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::SyntheticBackend;

    fn items(n: usize) -> Vec<CorpusItem> {
        (0..n)
            .map(|i| {
                CorpusItem::image(
                    format!("img{i}"),
                    Image::new(vec![1.0 + i as f32, (i as f32).sin(), 0.5]),
                )
            })
            .collect()
    }

    #[test]
    fn rerun_with_cache_makes_no_backend_calls() {
        let dir = tempfile::tempdir().unwrap();
        let cache = EmbeddingCache::open(dir.path()).unwrap();
        let backend = SyntheticBackend::identity("syn", 3);
        let first = build_corpus(&backend, &items(6), Some(&cache)).unwrap();
        assert_eq!(backend.image_calls(), 6);
        let again = SyntheticBackend::identity("syn", 3);
        let second = build_corpus(&again, &items(6), Some(&cache)).unwrap();
        assert_eq!(again.image_calls(), 0);
        assert_eq!(first, second);
    }

    #[test]
    fn cache_is_pure_memoization() {
        let dir = tempfile::tempdir().unwrap();
        let cache = EmbeddingCache::open(dir.path()).unwrap();
        let backend = SyntheticBackend::identity("syn", 3);
        let with = build_corpus(&backend, &items(4), Some(&cache)).unwrap();
        let with_again = build_corpus(&backend, &items(4), Some(&cache)).unwrap();
        let without = build_corpus(&backend, &items(4), None).unwrap();
        assert_eq!(with, without);
        assert_eq!(with_again, without);
    }

    #[test]
    fn duplicate_content_embedded_once() {
        let backend = SyntheticBackend::identity("syn", 3);
        let img = Image::new(vec![1.0, 2.0, 3.0]);
        let items = vec![
            CorpusItem::image("a", img.clone()),
            CorpusItem::image("b", img),
        ];
        build_corpus(&backend, &items, None).unwrap();
        assert_eq!(backend.image_calls(), 1);
    }

    #[test]
    fn corrupt_record_recomputed() {
        let dir = tempfile::tempdir().unwrap();
        let cache = EmbeddingCache::open(dir.path()).unwrap();
        let backend = SyntheticBackend::identity("syn", 3);
        let corpus = build_corpus(&backend, &items(2), Some(&cache)).unwrap();
        for entry in std::fs::read_dir(dir.path()).unwrap() {
            let p = entry.unwrap().path();
            if p.extension().is_some_and(|e| e == "f32") {
                std::fs::write(&p, b"junk").unwrap();
            }
        }
        let fresh = SyntheticBackend::identity("syn", 3);
        let rebuilt = build_corpus(&fresh, &items(2), Some(&cache)).unwrap();
        assert_eq!(fresh.image_calls(), 2);
        assert_eq!(rebuilt, corpus);
    }

    #[test]
    fn unreadable_item_is_named() {
        let backend = SyntheticBackend::identity("syn", 3);
        let mut list = items(2);
        list.push(CorpusItem {
            id: "missing-face".into(),
            source: ItemSource::File("/nonexistent/face.f32".into()),
        });
        let err = build_corpus(&backend, &list, None).unwrap_err();
        assert!(err.to_string().contains("missing-face"), "{err}");
    }

    #[test]
    fn file_items_are_read() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.f32");
        std::fs::write(&path, Image::new(vec![0.0, 3.0, 4.0]).to_bytes()).unwrap();
        let backend = SyntheticBackend::identity("syn", 3);
        let corpus = build_corpus(
            &backend,
            &[CorpusItem {
                id: "x".into(),
                source: ItemSource::File(path),
            }],
            None,
        )
        .unwrap();
        assert_eq!(corpus.row(0), &[0.0, 0.6, 0.8]);
        assert!(corpus.provenance()[0].starts_with("file:"));
    }

    #[test]
    fn empty_and_duplicate_ids_rejected() {
        let backend = SyntheticBackend::identity("syn", 3);
        assert!(matches!(build_corpus(&backend, &[], None), Err(Error::EmptyCorpus)));
        let mut list = items(2);
        list[1].id = list[0].id.clone();
        assert!(build_corpus(&backend, &list, None).is_err());
    }
}
