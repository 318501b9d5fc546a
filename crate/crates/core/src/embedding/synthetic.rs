//! Deterministic synthetic embedding worlds with planted attribute
//! co-occurrence.
//!
//! Attribute presence is drawn from a Gaussian copula: a correlated
//! standard-normal vector is thresholded per attribute at its prevalence
//! quantile, so `co_occurrence` entries are latent correlations. Each item
//! embeds as `normalize(sum of present directions + noise)`.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicUsize, Ordering};

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use statrs::distribution::{ContinuousCDF, Normal};

use super::{
    DifferentiableEncoder, EmbeddedCorpus, EmbeddingBackend, EmbeddingVector, Image,
    NormalizedLinear,
};
use crate::error::{Error, Result};

pub const DEFAULT_PREVALENCE: f64 = 0.5;
pub const DEFAULT_SYNTHETIC_MODEL: &str = "synthetic-world";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoOccurrence {
    pub a: String,
    pub b: String,
    pub correlation: f64,
}

impl CoOccurrence {
    pub fn new(a: impl Into<String>, b: impl Into<String>, correlation: f64) -> Self {
        Self {
            a: a.into(),
            b: b.into(),
            correlation,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticWorldSpec {
    pub dim: usize,
    pub attribute_directions: BTreeMap<String, Vec<f64>>,
    #[serde(default)]
    pub co_occurrence: Vec<CoOccurrence>,
    /// Marginal presence probability per attribute; unlisted ones use
    /// [`DEFAULT_PREVALENCE`].
    #[serde(default)]
    pub prevalence: BTreeMap<String, f64>,
    /// Standard deviation of the isotropic Gaussian noise added per item.
    #[serde(default)]
    pub noise: f64,
    pub seed: u64,
    #[serde(default = "default_model")]
    pub model_id: String,
}

fn default_model() -> String {
    DEFAULT_SYNTHETIC_MODEL.to_string()
}

impl SyntheticWorldSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Validation("world dimension must be positive".into()));
        }
        if self.attribute_directions.is_empty() {
            return Err(Error::Validation("world has no attributes".into()));
        }
        for (name, dir) in &self.attribute_directions {
            if dir.len() != self.dim {
                return Err(Error::Validation(format!(
                    "direction of {name:?} has length {}, world dimension is {}",
                    dir.len(),
                    self.dim
                )));
            }
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !norm.is_finite() || (norm - 1.0).abs() > 1e-6 {
                return Err(Error::Validation(format!(
                    "direction of {name:?} has norm {norm}, expected unit length"
                )));
            }
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Validation(format!("invalid noise {}", self.noise)));
        }
        let names: Vec<&str> = self.attribute_directions.keys().map(String::as_str).collect();
        check_presence_model(&names, &self.prevalence, &self.co_occurrence)
    }
}

pub(crate) fn check_presence_model(
    names: &[&str],
    prevalence: &BTreeMap<String, f64>,
    co_occurrence: &[CoOccurrence],
) -> Result<()> {
    for (name, &p) in prevalence {
        if !names.contains(&name.as_str()) {
            return Err(Error::Validation(format!("prevalence for unknown attribute {name:?}")));
        }
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::Validation(format!(
                "prevalence of {name:?} must lie in (0, 1), got {p}"
            )));
        }
    }
    let mut seen: HashMap<(&str, &str), f64> = HashMap::new();
    for c in co_occurrence {
        for n in [&c.a, &c.b] {
            if !names.contains(&n.as_str()) {
                return Err(Error::Validation(format!(
                    "co-occurrence names unknown attribute {n:?}"
                )));
            }
        }
        if c.a == c.b {
            return Err(Error::Validation(format!(
                "co-occurrence of {:?} with itself",
                c.a
            )));
        }
        if !(-1.0..=1.0).contains(&c.correlation) {
            return Err(Error::Validation(format!(
                "correlation {} for ({:?}, {:?}) outside [-1, 1]",
                c.correlation, c.a, c.b
            )));
        }
        let key = if c.a < c.b {
            (c.a.as_str(), c.b.as_str())
        } else {
            (c.b.as_str(), c.a.as_str())
        };
        if let Some(prev) = seen.insert(key, c.correlation) {
            if prev != c.correlation {
                return Err(Error::Validation(format!(
                    "co-occurrence of ({:?}, {:?}) is not symmetric: {prev} vs {}",
                    key.0, key.1, c.correlation
                )));
            }
        }
    }
    Ok(())
}

/// Gaussian-copula sampler for correlated binary attribute presence.
#[derive(Debug, Clone)]
pub(crate) struct PresenceSampler {
    thresholds: Vec<f64>,
    factor: DMatrix<f64>,
}

impl PresenceSampler {
    pub(crate) fn new(
        names: &[&str],
        prevalence: &BTreeMap<String, f64>,
        default_prevalence: f64,
        co_occurrence: &[CoOccurrence],
    ) -> Result<Self> {
        let n = names.len();
        let index: HashMap<&str, usize> = names.iter().enumerate().map(|(i, &s)| (s, i)).collect();
        let mut corr = DMatrix::<f64>::identity(n, n);
        for c in co_occurrence {
            let (i, j) = (index[c.a.as_str()], index[c.b.as_str()]);
            corr[(i, j)] = c.correlation;
            corr[(j, i)] = c.correlation;
        }
        let chol = Cholesky::new(corr).ok_or_else(|| {
            Error::InfeasibleCorrelation(
                "correlation matrix is not positive definite".to_string(),
            )
        })?;
        let normal = Normal::new(0.0, 1.0).expect("standard normal");
        let thresholds = names
            .iter()
            .map(|name| {
                let p = prevalence.get(*name).copied().unwrap_or(default_prevalence);
                normal.inverse_cdf(p)
            })
            .collect();
        Ok(Self {
            thresholds,
            factor: chol.l(),
        })
    }

    pub(crate) fn sample(&self, rng: &mut impl Rng) -> Vec<bool> {
        let n = self.thresholds.len();
        let eps = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let z = &self.factor * eps;
        z.iter()
            .zip(&self.thresholds)
            .map(|(zi, t)| zi < t)
            .collect()
    }
}

/// Which attributes each generated item carries.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    /// Attribute names, sorted.
    pub attributes: Vec<String>,
    /// `presence[item][attribute]`.
    pub presence: Vec<Vec<bool>>,
}

impl GroundTruth {
    pub fn attribute_index(&self, name: &str) -> Option<usize> {
        self.attributes.iter().position(|a| a == name)
    }

    pub fn has(&self, item: usize, name: &str) -> bool {
        self.attribute_index(name)
            .is_some_and(|a| self.presence[item][a])
    }

    pub fn count(&self, name: &str) -> usize {
        match self.attribute_index(name) {
            Some(a) => self.presence.iter().filter(|row| row[a]).count(),
            None => 0,
        }
    }
}

pub fn generate_synthetic_corpus(
    spec: &SyntheticWorldSpec,
    count: usize,
) -> Result<(EmbeddedCorpus, GroundTruth)> {
    spec.validate()?;
    if count == 0 {
        return Err(Error::EmptyCorpus);
    }
    let names: Vec<&str> = spec.attribute_directions.keys().map(String::as_str).collect();
    let sampler =
        PresenceSampler::new(&names, &spec.prevalence, DEFAULT_PREVALENCE, &spec.co_occurrence)?;
    let directions: Vec<&Vec<f64>> = spec.attribute_directions.values().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut rows = Vec::with_capacity(count);
    let mut presence = Vec::with_capacity(count);
    for _ in 0..count {
        // An empty noiseless item has no direction; resample it.
        let (present, v) = loop {
            let present = sampler.sample(&mut rng);
            let mut v = vec![0.0f64; spec.dim];
            for (dir, _) in directions.iter().zip(&present).filter(|(_, &p)| p) {
                for (x, d) in v.iter_mut().zip(dir.iter()) {
                    *x += d;
                }
            }
            if spec.noise > 0.0 {
                for x in v.iter_mut() {
                    *x += spec.noise * rng.sample::<f64, _>(StandardNormal);
                }
            }
            if v.iter().any(|x| *x != 0.0) {
                break (present, v);
            }
        };
        rows.push(EmbeddingVector::from_f64(&v, spec.model_id.clone())?);
        presence.push(present);
    }
    let ids = (0..count).map(|i| format!("syn-{}-{i:05}", spec.seed)).collect();
    let provenance = (0..count)
        .map(|i| format!("synthetic:seed={}:index={i}", spec.seed))
        .collect();
    let corpus = EmbeddedCorpus::from_rows(ids, rows, provenance)?;
    Ok((
        corpus,
        GroundTruth {
            attributes: names.iter().map(|s| s.to_string()).collect(),
            presence,
        },
    ))
}

/// `names.len()` mutually orthonormal directions in `dim` dimensions
/// (requires `dim >= names.len()`), seeded.
pub fn orthonormal_directions(
    names: &[&str],
    dim: usize,
    seed: u64,
) -> Result<BTreeMap<String, Vec<f64>>> {
    if names.len() > dim {
        return Err(Error::Validation(format!(
            "{} orthonormal directions do not fit in {dim} dimensions",
            names.len()
        )));
    }
    let basis = random_orthonormal(dim, names.len(), seed);
    Ok(names
        .iter()
        .enumerate()
        .map(|(k, n)| (n.to_string(), basis.column(k).iter().copied().collect()))
        .collect())
}

/// A `rows x cols` matrix with orthonormal columns (or rows, when wide).
pub(crate) fn random_orthonormal(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if rows >= cols {
        let g = DMatrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal));
        g.qr().q()
    } else {
        random_orthonormal(cols, rows, seed).transpose()
    }
}

/// A unit direction derived from a hash of `(model_id, text)`.
pub(crate) fn hashed_direction(model_id: &str, text: &str, dim: usize) -> Vec<f64> {
    let mut h = Sha256::new();
    h.update(model_id.as_bytes());
    h.update([0u8]);
    h.update(text.as_bytes());
    let digest = h.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    let mut rng = ChaCha8Rng::from_seed(seed);
    let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

/// Embedding backend over a synthetic world.
///
/// Registered texts embed to their registered direction; any other text
/// embeds to a hash-seeded random direction. Images are embedded by a
/// fixed linear map followed by normalization, which makes this backend
/// differentiable.
#[derive(Debug)]
pub struct SyntheticBackend {
    model_id: String,
    texts: BTreeMap<String, Vec<f32>>,
    encoder: NormalizedLinear,
    image_calls: AtomicUsize,
    text_calls: AtomicUsize,
}

impl SyntheticBackend {
    pub fn new(model_id: impl Into<String>, encoder: NormalizedLinear) -> Self {
        Self {
            model_id: model_id.into(),
            texts: BTreeMap::new(),
            encoder,
            image_calls: AtomicUsize::new(0),
            text_calls: AtomicUsize::new(0),
        }
    }

    /// Images are embedding-space vectors themselves.
    pub fn identity(model_id: impl Into<String>, dim: usize) -> Self {
        Self::new(model_id, NormalizedLinear::identity(dim))
    }

    pub fn for_world(spec: &SyntheticWorldSpec) -> Result<Self> {
        spec.validate()?;
        let mut b = Self::identity(spec.model_id.clone(), spec.dim);
        for (name, dir) in &spec.attribute_directions {
            b.register(name, dir)?;
        }
        Ok(b)
    }

    pub fn register(&mut self, text: &str, direction: &[f64]) -> Result<()> {
        if direction.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: direction.len(),
            });
        }
        let v = EmbeddingVector::from_f64(direction, self.model_id.clone())?;
        self.texts.insert(text.to_string(), v.values().to_vec());
        Ok(())
    }

    pub fn is_registered(&self, text: &str) -> bool {
        self.texts.contains_key(text)
    }

    pub fn image_calls(&self) -> usize {
        self.image_calls.load(Ordering::Relaxed)
    }

    pub fn text_calls(&self) -> usize {
        self.text_calls.load(Ordering::Relaxed)
    }

    pub fn encoder(&self) -> &NormalizedLinear {
        &self.encoder
    }
}

impl EmbeddingBackend for SyntheticBackend {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn dim(&self) -> usize {
        self.encoder.output_dim()
    }

    fn embed_text(&self, text: &str) -> Result<EmbeddingVector> {
        if text.trim().is_empty() {
            return Err(Error::Validation("cannot embed empty text".into()));
        }
        self.text_calls.fetch_add(1, Ordering::Relaxed);
        match self.texts.get(text) {
            Some(v) => Ok(EmbeddingVector {
                values: v.clone(),
                model_id: self.model_id.clone(),
            }),
            None => EmbeddingVector::from_f64(
                &hashed_direction(&self.model_id, text, self.dim()),
                self.model_id.clone(),
            ),
        }
    }

    fn embed_image(&self, image: &Image) -> Result<EmbeddingVector> {
        if image.pixels.len() != self.encoder.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.encoder.input_dim(),
                got: image.pixels.len(),
            });
        }
        self.image_calls.fetch_add(1, Ordering::Relaxed);
        let x = image.to_f64();
        let u = self.encoder.matrix() * DVector::from_column_slice(&x);
        EmbeddingVector::from_f64(u.as_slice(), self.model_id.clone())
    }

    fn differentiable(&self) -> Option<&dyn DifferentiableEncoder> {
        Some(&self.encoder)
    }
}
