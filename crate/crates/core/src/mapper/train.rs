//! Mini-batch training of a latent mapper with analytic gradients.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{LossTerms, LossWeights};
use super::MapperModel;
use crate::embedding::{DifferentiableEncoder, EmbeddingBackend};
use crate::error::{Error, Result};
use crate::latent::{Generator, LatentCorpus};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub hidden: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            batch: 32,
            learning_rate: 0.01,
            seed: 0,
            hidden: vec![64, 64],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("steps must be positive".into()));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }

    /// Step size at `step`: halved for the last quarter of training.
    pub fn learning_rate_at(&self, step: usize) -> f64 {
        if 4 * step >= 3 * self.steps {
            self.learning_rate * 0.5
        } else {
            self.learning_rate
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub step: usize,
    #[serde(flatten)]
    pub terms: LossTerms,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingTrace {
    pub seed: u64,
    pub steps: usize,
    pub weights: LossWeights,
    pub entries: Vec<TraceEntry>,
}

/// Everything that stays fixed while a mapper is optimized.
pub struct Objective<'a> {
    generator: &'a dyn Generator,
    encoder: &'a dyn DifferentiableEncoder,
    identity: Option<&'a dyn DifferentiableEncoder>,
    command: Vec<f64>,
    entangled: Vec<Vec<f64>>,
    weights: LossWeights,
}

struct Sample {
    terms: [f64; 4],
    grad_offset: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl<'a> Objective<'a> {
    /// Refuses backends or generators without gradients. Without an
    /// identity encoder the identity term is dropped.
    pub fn new(
        generator: &'a dyn Generator,
        backend: &'a dyn EmbeddingBackend,
        identity: Option<&'a dyn DifferentiableEncoder>,
        command: &str,
        entangled: &[String],
        weights: LossWeights,
    ) -> Result<Self> {
        weights.validate()?;
        let encoder = backend
            .differentiable()
            .ok_or_else(|| Error::NotDifferentiable(backend.model_id().to_string()))?;
        if !generator.is_differentiable() {
            return Err(Error::NotDifferentiable(generator.id().to_string()));
        }
        if encoder.input_dim() != generator.image_dim() {
            return Err(Error::DimensionMismatch {
                expected: generator.image_dim(),
                got: encoder.input_dim(),
            });
        }
        if weights.lambda_e > 0.0 && entangled.is_empty() {
            return Err(Error::Config(
                "lambda_e > 0 needs at least one entangled attribute; use baseline mode instead"
                    .into(),
            ));
        }
        let mut weights = weights;
        if identity.is_none() && weights.lambda_id > 0.0 {
            log::info!("no identity encoder available; identity loss disabled");
            weights.lambda_id = 0.0;
        }
        let command = backend.embed_text(command)?.to_f64();
        let entangled = entangled
            .iter()
            .map(|t| backend.embed_text(t).map(|v| v.to_f64()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            generator,
            encoder,
            identity,
            command,
            entangled,
            weights,
        })
    }

    pub fn weights(&self) -> &LossWeights {
        &self.weights
    }

    fn sample(&self, mapper: &MapperModel, w: &[f64], with_grad: bool) -> Result<Sample> {
        let offset = mapper.offset(w)?;
        let moved: Vec<f64> = w.iter().zip(&offset).map(|(a, b)| a + b).collect();
        let x = self.generator.render_raw(w);
        let x_new = self.generator.render_raw(&moved);
        let e = self.encoder.encode(&x);
        let e_new = self.encoder.encode(&x_new);

        let clip = 1.0 - dot(&e_new, &self.command);
        let l2: f64 = offset.iter().map(|v| v * v).sum();
        let deltas: Vec<f64> = self
            .entangled
            .iter()
            .map(|t| (1.0 - dot(&e, t)) - (1.0 - dot(&e_new, t)))
            .collect();
        let entanglement = if deltas.is_empty() {
            0.0
        } else {
            deltas.iter().map(|d| d * d).sum::<f64>() / deltas.len() as f64
        };
        let (id, q_pair) = match self.identity {
            Some(enc) => {
                let q = enc.encode(&x);
                let q_new = enc.encode(&x_new);
                (1.0 - dot(&q, &q_new), Some(q))
            }
            None => (0.0, None),
        };

        let mut grad_offset = Vec::new();
        if with_grad {
            let w8 = &self.weights;
            let mut g_e: Vec<f64> = self.command.iter().map(|t| -t).collect();
            if !deltas.is_empty() && w8.lambda_e > 0.0 {
                let scale = w8.lambda_e * 2.0 / deltas.len() as f64;
                for (d, t) in deltas.iter().zip(&self.entangled) {
                    for (g, tv) in g_e.iter_mut().zip(t) {
                        *g += scale * d * tv;
                    }
                }
            }
            let mut g_x = self.encoder.pullback(&x_new, &g_e);
            if let (Some(enc), Some(q)) = (self.identity, q_pair) {
                if w8.lambda_id > 0.0 {
                    let g_q: Vec<f64> = q.iter().map(|v| -w8.lambda_id * v).collect();
                    for (a, b) in g_x.iter_mut().zip(enc.pullback(&x_new, &g_q)) {
                        *a += b;
                    }
                }
            }
            grad_offset = self
                .generator
                .pullback(&moved, &g_x)
                .ok_or_else(|| Error::NotDifferentiable(self.generator.id().to_string()))?;
            for (g, o) in grad_offset.iter_mut().zip(&offset) {
                *g += w8.lambda_l2 * 2.0 * o;
            }
        }
        Ok(Sample {
            terms: [clip, l2, id, entanglement],
            grad_offset,
        })
    }

    fn batch(&self, mapper: &MapperModel, batch: &[&[f64]], with_grad: bool) -> Result<(LossTerms, Vec<f64>)> {
        if batch.is_empty() {
            return Err(Error::Validation("empty batch".into()));
        }
        let mut sums = [0.0; 4];
        let mut grad = vec![0.0; if with_grad { mapper.params().len() } else { 0 }];
        for w in batch {
            let s = self.sample(mapper, w, with_grad)?;
            for (acc, v) in sums.iter_mut().zip(s.terms) {
                *acc += v;
            }
            if with_grad {
                mapper.accumulate_grad(w, &s.grad_offset, &mut grad)?;
            }
        }
        let n = batch.len() as f64;
        for g in grad.iter_mut() {
            *g /= n;
        }
        let [c, l2, id, e] = sums.map(|v| v / n);
        Ok((LossTerms::combine(c, l2, id, e, &self.weights), grad))
    }

    /// Batch-mean loss terms.
    pub fn loss(&self, mapper: &MapperModel, batch: &[&[f64]]) -> Result<LossTerms> {
        Ok(self.batch(mapper, batch, false)?.0)
    }

    /// Batch-mean loss terms and the gradient of the total with respect to
    /// the mapper parameters.
    pub fn loss_and_grad(&self, mapper: &MapperModel, batch: &[&[f64]]) -> Result<(LossTerms, Vec<f64>)> {
        self.batch(mapper, batch, true)
    }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * grad[i];
            self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * grad[i] * grad[i];
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + Self::EPS);
        }
    }
}

/// Draws batches by walking seeded shuffles of the corpus.
struct BatchSampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
}

impl BatchSampler {
    fn new(n: usize, seed: u64) -> Self {
        let mut s = Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            order: (0..n).collect(),
            pos: n,
        };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        self.order.shuffle(&mut self.rng);
        self.pos = 0;
    }

    fn next(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.order.len() {
                self.reshuffle();
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Optimizes a fresh MLP mapper with Adam and records every step.
pub fn train_mapper(
    objective: &Objective<'_>,
    latents: &LatentCorpus,
    config: &TrainConfig,
) -> Result<(MapperModel, TrainingTrace)> {
    config.validate()?;
    latents.validate()?;
    let mut mapper = MapperModel::mlp(latents.latent_dim, &config.hidden, config.seed)?;
    train_from(objective, latents, config, &mut mapper).map(|trace| (mapper, trace))
}

/// Continues optimizing `mapper` in place.
pub fn train_from(
    objective: &Objective<'_>,
    latents: &LatentCorpus,
    config: &TrainConfig,
    mapper: &mut MapperModel,
) -> Result<TrainingTrace> {
    config.validate()?;
    if latents.latent_dim != objective.generator.latent_dim() {
        return Err(Error::DimensionMismatch {
            expected: objective.generator.latent_dim(),
            got: latents.latent_dim,
        });
    }
    let mut adam = Adam::new(mapper.params().len());
    let mut sampler = BatchSampler::new(latents.len(), config.seed.wrapping_add(0x5eed));
    let mut entries = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let idx = sampler.next(config.batch);
        let batch: Vec<&[f64]> = idx.iter().map(|&i| latents.latents[i].values()).collect();
        let (terms, grad) = objective.loss_and_grad(mapper, &batch)?;
        if !terms.total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteLoss(step));
        }
        entries.push(TraceEntry { step, terms });
        adam.step(mapper.params_mut(), &grad, config.learning_rate_at(step));
        log::debug!("step {step}: total {:.6}", terms.total);
    }
    Ok(TrainingTrace {
        seed: config.seed,
        steps: config.steps,
        weights: *objective.weights(),
        entries,
    })
}
