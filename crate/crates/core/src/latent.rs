//! Latent codes and the frozen generator that renders them.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::embedding::{CorpusItem, Image};
use crate::error::{Error, Result};

/// A point in the generator's latent space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LatentCode(Vec<f64>);

impl LatentCode {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("latent code must be non-empty and finite".into()));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

/// A frozen generator `G: latent -> image`.
pub trait Generator: Send + Sync {
    fn id(&self) -> &str;
    fn latent_dim(&self) -> usize;
    fn image_dim(&self) -> usize;
    fn render_raw(&self, w: &[f64]) -> Vec<f64>;

    /// Vector-Jacobian product, for generators that declare one.
    fn pullback(&self, _w: &[f64], _grad_image: &[f64]) -> Option<Vec<f64>> {
        None
    }

    fn is_differentiable(&self) -> bool {
        false
    }

    fn render(&self, w: &[f64]) -> Result<Image> {
        if w.len() != self.latent_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.latent_dim(),
                got: w.len(),
            });
        }
        Ok(Image::from_f64(&self.render_raw(w)))
    }
}

/// `w -> A w`.
#[derive(Debug, Clone)]
pub struct LinearGenerator {
    id: String,
    matrix: DMatrix<f64>,
}

impl LinearGenerator {
    pub fn new(id: impl Into<String>, matrix: DMatrix<f64>) -> Self {
        Self {
            id: id.into(),
            matrix,
        }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }
}

impl Generator for LinearGenerator {
    fn id(&self) -> &str {
        &self.id
    }

    fn latent_dim(&self) -> usize {
        self.matrix.ncols()
    }

    fn image_dim(&self) -> usize {
        self.matrix.nrows()
    }

    fn render_raw(&self, w: &[f64]) -> Vec<f64> {
        (&self.matrix * DVector::from_column_slice(w)).as_slice().to_vec()
    }

    fn pullback(&self, _w: &[f64], grad_image: &[f64]) -> Option<Vec<f64>> {
        let g = DVector::from_column_slice(grad_image);
        Some(self.matrix.tr_mul(&g).as_slice().to_vec())
    }

    fn is_differentiable(&self) -> bool {
        true
    }
}

/// A set of inverted latent codes with item ids.
///
/// On disk: `{"latent_dim": d, "ids": [...], "latents": [[...], ...]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentCorpus {
    pub latent_dim: usize,
    pub ids: Vec<String>,
    pub latents: Vec<LatentCode>,
}

impl LatentCorpus {
    pub fn new(ids: Vec<String>, latents: Vec<LatentCode>) -> Result<Self> {
        let latent_dim = latents.first().map(LatentCode::dim).ok_or(Error::EmptyCorpus)?;
        let corpus = Self {
            latent_dim,
            ids,
            latents,
        };
        corpus.validate()?;
        Ok(corpus)
    }

    pub fn validate(&self) -> Result<()> {
        if self.latents.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        if self.ids.len() != self.latents.len() {
            return Err(Error::Validation(format!(
                "{} ids for {} latents",
                self.ids.len(),
                self.latents.len()
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for (id, w) in self.ids.iter().zip(&self.latents) {
            if !seen.insert(id) {
                return Err(Error::Validation(format!("duplicate latent id {id:?}")));
            }
            if w.dim() != self.latent_dim || w.values().iter().any(|v| !v.is_finite()) {
                return Err(Error::Validation(format!(
                    "latent {id:?} is not a finite {}-vector",
                    self.latent_dim
                )));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        let corpus: Self = serde_json::from_str(&text)
            .map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
        corpus.validate()?;
        Ok(corpus)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec(self)?).map_err(|e| Error::file(path, e))
    }

    pub fn len(&self) -> usize {
        self.latents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.latents.is_empty()
    }

    pub fn head(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            latent_dim: self.latent_dim,
            ids: self.ids[..n].to_vec(),
            latents: self.latents[..n].to_vec(),
        }
    }

    /// Renders every latent into an image corpus item.
    pub fn render(&self, generator: &dyn Generator) -> Result<Vec<CorpusItem>> {
        if generator.latent_dim() != self.latent_dim {
            return Err(Error::DimensionMismatch {
                expected: generator.latent_dim(),
                got: self.latent_dim,
            });
        }
        self.ids
            .iter()
            .zip(&self.latents)
            .map(|(id, w)| Ok(CorpusItem::image(id.clone(), generator.render(w.values())?)))
            .collect()
    }
}
