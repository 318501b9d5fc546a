//! Joint text–image embedding space and its cosine distance.

pub mod cache;
pub mod corpus;
pub mod external;
pub mod planted;
pub mod synthetic;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub use cache::EmbeddingCache;
pub use corpus::{build_corpus, CorpusItem, EmbeddedCorpus, ItemSource};
pub use external::ExternalBackend;
pub use planted::{planted_world, PlantedWorld, PlantedWorldConfig};
pub use synthetic::{
    generate_synthetic_corpus, orthonormal_directions, CoOccurrence, GroundTruth,
    SyntheticBackend, SyntheticWorldSpec,
};

const UNIT_NORM_TOLERANCE: f64 = 1e-6;

/// A unit-norm embedding tagged with the model that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    values: Vec<f32>,
    model_id: String,
}

impl EmbeddingVector {
    /// Normalizes `values` to unit length.
    pub fn from_f64(values: &[f64], model_id: impl Into<String>) -> Result<Self> {
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !norm.is_finite() || values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("embedding has non-finite entries".into()));
        }
        if norm == 0.0 {
            return Err(Error::Validation("cannot normalize a zero embedding".into()));
        }
        Ok(Self {
            values: values.iter().map(|v| (v / norm) as f32).collect(),
            model_id: model_id.into(),
        })
    }

    pub fn from_f32(values: &[f32], model_id: impl Into<String>) -> Result<Self> {
        let wide: Vec<f64> = values.iter().map(|&v| f64::from(v)).collect();
        Self::from_f64(&wide, model_id)
    }

    /// Wraps values that are already unit length (e.g. read back from the cache).
    pub fn from_unit(values: Vec<f32>, model_id: impl Into<String>) -> Result<Self> {
        let norm = values
            .iter()
            .map(|&v| f64::from(v) * f64::from(v))
            .sum::<f64>()
            .sqrt();
        if !norm.is_finite() || (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
            return Err(Error::Validation(format!(
                "embedding norm {norm} is not unit"
            )));
        }
        Ok(Self {
            values,
            model_id: model_id.into(),
        })
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.values.iter().map(|&v| f64::from(v)).collect()
    }

    pub fn model_id(&self) -> &str {
        &self.model_id
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// Cosine distance `1 - cos(a, b)` accumulated in f64, clamped to `[0, 2]`.
pub fn cosine_distance(a: &[f32], b: &[f32]) -> f64 {
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (f64::from(x), f64::from(y));
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    let denom = (na * nb).sqrt();
    if denom == 0.0 {
        return 1.0;
    }
    (1.0 - dot / denom).clamp(0.0, 2.0)
}

/// Distance between two embeddings of the same model.
pub fn clip_distance(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    if a.model_id != b.model_id {
        return Err(Error::ModelMismatch {
            left: a.model_id.clone(),
            right: b.model_id.clone(),
        });
    }
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            got: b.dim(),
        });
    }
    Ok(cosine_distance(&a.values, &b.values))
}

/// A flat "image": a vector of pixel intensities.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub pixels: Vec<f32>,
}

impl Image {
    pub fn new(pixels: Vec<f32>) -> Self {
        Self { pixels }
    }

    pub fn from_f64(pixels: &[f64]) -> Self {
        Self {
            pixels: pixels.iter().map(|&p| p as f32).collect(),
        }
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.pixels.iter().map(|&p| f64::from(p)).collect()
    }

    /// Little-endian f32 encoding; this is also the on-disk image format.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.pixels.iter().flat_map(|p| p.to_le_bytes()).collect()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if !bytes.len().is_multiple_of(4) || bytes.is_empty() {
            return Err(Error::Validation(format!(
                "image payload of {} bytes is not a non-empty f32 array",
                bytes.len()
            )));
        }
        Ok(Self {
            pixels: bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
        })
    }
}

/// A joint text–image embedding model.
///
/// Implementations must tolerate concurrent calls.
pub trait EmbeddingBackend: Send + Sync {
    fn model_id(&self) -> &str;
    fn dim(&self) -> usize;
    fn embed_text(&self, text: &str) -> Result<EmbeddingVector>;
    fn embed_image(&self, image: &Image) -> Result<EmbeddingVector>;

    /// The differentiable image encoder, for backends that declare one.
    fn differentiable(&self) -> Option<&dyn DifferentiableEncoder> {
        None
    }
}

/// An encoder producing unit-norm embeddings whose vector–Jacobian product
/// is available.
pub trait DifferentiableEncoder: Send + Sync {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn encode(&self, input: &[f64]) -> Vec<f64>;
    /// Maps `d loss / d embedding` to `d loss / d input` at `input`.
    fn pullback(&self, input: &[f64], grad_embedding: &[f64]) -> Vec<f64>;
}

/// `x -> normalize(M x)`.
#[derive(Debug, Clone)]
pub struct NormalizedLinear {
    matrix: DMatrix<f64>,
}

impl NormalizedLinear {
    pub fn new(matrix: DMatrix<f64>) -> Self {
        Self { matrix }
    }

    pub fn identity(dim: usize) -> Self {
        Self::new(DMatrix::identity(dim, dim))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }
}

impl DifferentiableEncoder for NormalizedLinear {
    fn input_dim(&self) -> usize {
        self.matrix.ncols()
    }

    fn output_dim(&self) -> usize {
        self.matrix.nrows()
    }

    fn encode(&self, input: &[f64]) -> Vec<f64> {
        let u = &self.matrix * DVector::from_column_slice(input);
        let norm = u.norm();
        (u / norm).as_slice().to_vec()
    }

    fn pullback(&self, input: &[f64], grad_embedding: &[f64]) -> Vec<f64> {
        let u = &self.matrix * DVector::from_column_slice(input);
        let norm = u.norm();
        let e = &u / norm;
        let g = DVector::from_column_slice(grad_embedding);
        // d(u/|u|)/du = (I - e e^T) / |u|
        let gu = (&g - &e * e.dot(&g)) / norm;
        (self.matrix.transpose() * gu).as_slice().to_vec()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(v: &[f64]) -> EmbeddingVector {
        EmbeddingVector::from_f64(v, "m").unwrap()
    }

    #[test]
    fn identical_orthogonal_antipodal() {
        let a = unit(&[0.3, -0.4, 0.5]);
        assert_eq!(clip_distance(&a, &a).unwrap(), 0.0);
        let x = unit(&[1.0, 0.0]);
        let y = unit(&[0.0, 1.0]);
        assert_eq!(clip_distance(&x, &y).unwrap(), 1.0);
        let neg = unit(&[-0.3, 0.4, -0.5]);
        assert_eq!(clip_distance(&a, &neg).unwrap(), 2.0);
    }

    #[test]
    fn model_mismatch_is_an_error() {
        let a = unit(&[1.0, 0.0]);
        let b = EmbeddingVector::from_f64(&[1.0, 0.0], "other").unwrap();
        assert!(matches!(clip_distance(&a, &b), Err(Error::ModelMismatch { .. })));
        let c = unit(&[1.0, 0.0, 0.0]);
        assert!(matches!(
            clip_distance(&a, &c),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn vectors_are_unit_and_finite() {
        let v = unit(&[3.0, 4.0]);
        let n: f64 = v.to_f64().iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-6);
        assert!(EmbeddingVector::from_f64(&[0.0, 0.0], "m").is_err());
        assert!(EmbeddingVector::from_f64(&[f64::NAN, 1.0], "m").is_err());
        assert!(EmbeddingVector::from_unit(vec![2.0, 0.0], "m").is_err());
    }

    #[test]
    fn image_bytes_round_trip() {
        let img = Image::new(vec![1.5, -2.0, 0.25]);
        assert_eq!(Image::from_bytes(&img.to_bytes()).unwrap(), img);
        assert!(Image::from_bytes(&[1, 2, 3]).is_err());
    }

    #[test]
    fn normalized_linear_pullback_matches_finite_differences() {
        let m = DMatrix::from_fn(4, 3, |r, c| ((r * 3 + c) as f64 * 0.37).sin());
        let enc = NormalizedLinear::new(m);
        let x = [0.4, -1.1, 0.7];
        let t = [0.5, 0.5, -0.5, 0.5];
        let f = |x: &[f64]| 1.0 - enc.encode(x).iter().zip(&t).map(|(a, b)| a * b).sum::<f64>();
        let neg_t: Vec<f64> = t.iter().map(|v| -v).collect();
        let g = enc.pullback(&x, &neg_t);
        let h = 1e-3;
        for i in 0..3 {
            let mut xp = x;
            let mut xm = x;
            xp[i] += h;
            xm[i] -= h;
            let fd = (f(&xp) - f(&xm)) / (2.0 * h);
            assert!((fd - g[i]).abs() <= 1e-4 * fd.abs().max(g[i].abs()).max(1e-8));
        }
    }
}
