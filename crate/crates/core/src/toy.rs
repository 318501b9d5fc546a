//! A small fully linear generator/embedder stack with planted attribute
//! entanglement, used to exercise training and evaluation end to end.
//!
//! Every scoring attribute owns an orthonormal latent direction `z_a`.
//! Latents are `loading * sum(z_a over present a) + noise`, with presence
//! drawn from a copula in which the command co-occurs with its planted
//! partners. Images are `A w` (orthonormal columns) and embeddings are
//! `normalize(P x)` for a random rotation `P`. The command's text embedding
//! leaks into its partners' directions, which is what makes a naive edit
//! entangled.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::embedding::synthetic::{random_orthonormal, PresenceSampler};
use crate::embedding::{CoOccurrence, GroundTruth, NormalizedLinear, SyntheticBackend};
use crate::error::{Error, Result};
use crate::hierarchy::AttributeHierarchy;
use crate::latent::{LatentCode, LatentCorpus, LinearGenerator};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyStackSpec {
    pub hierarchy: String,
    pub command: String,
    /// Attributes planted to co-occur with the command.
    pub partners: Vec<String>,
    /// Latent correlation between the command and each partner.
    pub correlation: f64,
    /// Weight of each partner direction inside the command's text embedding.
    pub leakage: f64,
    pub prevalence: f64,
    pub loading: f64,
    pub noise: f64,
    pub latent_dim: usize,
    pub image_dim: usize,
    pub identity_dim: usize,
    pub items: usize,
    pub seed: u64,
    pub model_id: String,
}

impl Default for ToyStackSpec {
    fn default() -> Self {
        Self {
            hierarchy: crate::hierarchy::BUNDLED_TOY_FACE_V1.to_string(),
            command: "grey hair".into(),
            partners: vec!["grey eyes".into(), "white skin".into(), "with wrinkles".into()],
            correlation: 0.8,
            leakage: 0.5,
            prevalence: 0.25,
            loading: 0.4,
            noise: 0.05,
            latent_dim: 32,
            image_dim: 64,
            identity_dim: 16,
            items: 1000,
            seed: 7,
            model_id: "toy-linear-embedder".into(),
        }
    }
}

pub struct ToyStack {
    pub spec: ToyStackSpec,
    pub hierarchy: AttributeHierarchy,
    pub generator: LinearGenerator,
    pub backend: SyntheticBackend,
    pub identity: NormalizedLinear,
    pub latents: LatentCorpus,
    pub truth: GroundTruth,
    /// Latent direction per scoring attribute.
    pub directions: BTreeMap<String, Vec<f64>>,
}

impl std::fmt::Debug for ToyStack {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ToyStack").field("spec", &self.spec).finish_non_exhaustive()
    }
}

pub const TOY_GENERATOR_ID: &str = "toy-linear";

impl ToyStack {
    pub fn build(spec: &ToyStackSpec) -> Result<Self> {
        let hierarchy = AttributeHierarchy::load(&spec.hierarchy)?;
        let names: Vec<String> = hierarchy.scoring_attributes().map(|a| a.text.clone()).collect();
        if names.len() > spec.latent_dim {
            return Err(Error::Validation(format!(
                "{} attributes do not fit a {}-dim latent space",
                names.len(),
                spec.latent_dim
            )));
        }
        if spec.image_dim < spec.latent_dim {
            return Err(Error::Validation("image_dim must be at least latent_dim".into()));
        }
        for a in std::iter::once(&spec.command).chain(&spec.partners) {
            if !names.contains(a) {
                return Err(Error::Validation(format!("toy attribute {a:?} is not a scoring attribute")));
            }
        }

        let basis = random_orthonormal(spec.latent_dim, names.len(), spec.seed.wrapping_add(1));
        let directions: BTreeMap<String, Vec<f64>> = names
            .iter()
            .enumerate()
            .map(|(k, n)| (n.clone(), basis.column(k).iter().copied().collect()))
            .collect();

        let a = random_orthonormal(spec.image_dim, spec.latent_dim, spec.seed.wrapping_add(2));
        let p = random_orthonormal(spec.image_dim, spec.image_dim, spec.seed.wrapping_add(3));
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(4));
        let scale = 1.0 / (spec.image_dim as f64).sqrt();
        let q = DMatrix::from_fn(spec.identity_dim, spec.image_dim, |_, _| {
            scale * rng.sample::<f64, _>(StandardNormal)
        });

        let embed = &p * &a;
        let mut backend = SyntheticBackend::new(spec.model_id.clone(), NormalizedLinear::new(p));
        for attr in hierarchy.attributes() {
            let positive = hierarchy
                .category_of(&attr.text)
                .map(|c| c.scoring_attributes()[0].text.clone())
                .filter(|_| attr.is_binary)
                .unwrap_or_else(|| attr.text.clone());
            let mut v = DVector::from_column_slice(&directions[&positive]);
            if attr.text == spec.command {
                for partner in &spec.partners {
                    v += DVector::from_column_slice(&directions[partner]) * spec.leakage;
                }
            }
            if attr.is_binary && positive != attr.text {
                v = -v;
            }
            backend.register(&attr.text, (&embed * v).as_slice())?;
        }

        let prevalence: BTreeMap<String, f64> =
            names.iter().map(|n| (n.clone(), spec.prevalence)).collect();
        let mut co = Vec::new();
        for (i, x) in spec.partners.iter().enumerate() {
            co.push(CoOccurrence::new(spec.command.clone(), x.clone(), spec.correlation));
            for y in &spec.partners[i + 1..] {
                co.push(CoOccurrence::new(x.clone(), y.clone(), spec.correlation * spec.correlation));
            }
        }
        let name_refs: Vec<&str> = names.iter().map(String::as_str).collect();
        crate::embedding::synthetic::check_presence_model(&name_refs, &prevalence, &co)?;
        let sampler = PresenceSampler::new(&name_refs, &prevalence, spec.prevalence, &co)?;

        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut ids = Vec::with_capacity(spec.items);
        let mut latents = Vec::with_capacity(spec.items);
        let mut presence = Vec::with_capacity(spec.items);
        for i in 0..spec.items {
            let present = sampler.sample(&mut rng);
            let mut w = vec![0.0; spec.latent_dim];
            for (k, _) in present.iter().enumerate().filter(|(_, &p)| p) {
                for (x, d) in w.iter_mut().zip(basis.column(k).iter()) {
                    *x += spec.loading * d;
                }
            }
            for x in w.iter_mut() {
                *x += spec.noise * rng.sample::<f64, _>(StandardNormal);
            }
            ids.push(format!("toy-{i:05}"));
            latents.push(LatentCode::new(w)?);
            presence.push(present);
        }
        let latents = LatentCorpus::new(ids, latents)?;

        Ok(Self {
            spec: spec.clone(),
            hierarchy,
            generator: LinearGenerator::new(TOY_GENERATOR_ID, a),
            backend,
            identity: NormalizedLinear::new(q),
            latents,
            truth: GroundTruth {
                attributes: names,
                presence,
            },
            directions,
        })
    }
}
