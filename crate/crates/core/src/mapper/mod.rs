//! Latent mappers: trainable maps from a latent code to a latent offset.

pub mod loss;
pub mod train;

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embedding::Image;
use crate::error::{Error, Result};
use crate::latent::Generator;

pub use loss::{
    clip_loss, entanglement_loss, id_loss, l2_loss, LossTerms, LossWeights,
};
pub use train::{train_from, train_mapper, Objective, TraceEntry, TrainConfig, TrainingTrace};

const LEAKY_SLOPE: f64 = 0.2;
const OUTPUT_INIT_SCALE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MapperArch {
    /// Fully connected net `dim -> hidden... -> dim` with leaky ReLU
    /// between layers and a linear output.
    Mlp { hidden: Vec<usize> },
    /// `offset = sum_k theta_k d_k` for fixed directions `d_k`.
    Basis { directions: Vec<Vec<f64>> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapperModel {
    arch: MapperArch,
    dim: usize,
    params: Vec<f64>,
}

fn layer_sizes(dim: usize, hidden: &[usize]) -> Vec<usize> {
    std::iter::once(dim)
        .chain(hidden.iter().copied())
        .chain(std::iter::once(dim))
        .collect()
}

fn leaky(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        LEAKY_SLOPE * x
    }
}

fn leaky_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        LEAKY_SLOPE
    }
}

impl MapperModel {
    /// Weights drawn from `N(0, 2/fan_in)`, the output layer scaled down so
    /// the initial offset is small; biases start at zero.
    pub fn mlp(dim: usize, hidden: &[usize], seed: u64) -> Result<Self> {
        if dim == 0 || hidden.contains(&0) {
            return Err(Error::Config("mapper layer widths must be positive".into()));
        }
        let sizes = layer_sizes(dim, hidden);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        let last = sizes.len() - 2;
        for (l, pair) in sizes.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let mut scale = (2.0 / fan_in as f64).sqrt();
            if l == last {
                scale *= OUTPUT_INIT_SCALE;
            }
            for _ in 0..fan_in * fan_out {
                params.push(scale * rng.sample::<f64, _>(StandardNormal));
            }
            params.extend(std::iter::repeat_n(0.0, fan_out));
        }
        Ok(Self {
            arch: MapperArch::Mlp {
                hidden: hidden.to_vec(),
            },
            dim,
            params,
        })
    }

    /// A basis mapper with all coefficients at zero.
    pub fn basis(dim: usize, directions: Vec<Vec<f64>>) -> Result<Self> {
        if directions.iter().any(|d| d.len() != dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: directions.iter().map(Vec::len).find(|&l| l != dim).unwrap_or(0),
            });
        }
        let params = vec![0.0; directions.len()];
        Ok(Self {
            arch: MapperArch::Basis { directions },
            dim,
            params,
        })
    }

    /// The mapper whose offset is always zero.
    pub fn zero(dim: usize) -> Self {
        Self {
            arch: MapperArch::Basis {
                directions: Vec::new(),
            },
            dim,
            params: Vec::new(),
        }
    }

    pub fn from_parts(arch: MapperArch, dim: usize, params: Vec<f64>) -> Result<Self> {
        let expected = match &arch {
            MapperArch::Mlp { hidden } => layer_sizes(dim, hidden)
                .windows(2)
                .map(|p| p[0] * p[1] + p[1])
                .sum(),
            MapperArch::Basis { directions } => directions.len(),
        };
        if params.len() != expected {
            return Err(Error::Validation(format!(
                "mapper expects {expected} parameters, got {}",
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Validation("mapper parameters are not finite".into()));
        }
        Ok(Self { arch, dim, params })
    }

    pub fn arch(&self) -> &MapperArch {
        &self.arch
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn check_input(&self, w: &[f64]) -> Result<()> {
        if w.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: w.len(),
            });
        }
        Ok(())
    }

    /// Pre-activations of every layer, input first.
    fn activations(&self, w: &[f64], hidden: &[usize]) -> Vec<Vec<f64>> {
        let sizes = layer_sizes(self.dim, hidden);
        let mut acts = vec![w.to_vec()];
        let mut offset = 0;
        let n_layers = sizes.len() - 1;
        for l in 0..n_layers {
            let (n_in, n_out) = (sizes[l], sizes[l + 1]);
            let input: Vec<f64> = if l == 0 {
                acts[0].clone()
            } else {
                acts[l].iter().map(|&z| leaky(z)).collect()
            };
            let weights = &self.params[offset..offset + n_in * n_out];
            let bias = &self.params[offset + n_in * n_out..offset + n_in * n_out + n_out];
            let z: Vec<f64> = (0..n_out)
                .map(|o| {
                    let row = &weights[o * n_in..(o + 1) * n_in];
                    bias[o] + row.iter().zip(&input).map(|(a, b)| a * b).sum::<f64>()
                })
                .collect();
            acts.push(z);
            offset += n_in * n_out + n_out;
        }
        acts
    }

    pub fn offset(&self, w: &[f64]) -> Result<Vec<f64>> {
        self.check_input(w)?;
        Ok(match &self.arch {
            MapperArch::Mlp { hidden } => self.activations(w, hidden).pop().expect("output layer"),
            MapperArch::Basis { directions } => {
                let mut out = vec![0.0; self.dim];
                for (theta, d) in self.params.iter().zip(directions) {
                    for (o, x) in out.iter_mut().zip(d) {
                        *o += theta * x;
                    }
                }
                out
            }
        })
    }

    /// Adds `d loss / d params` to `grad` given `d loss / d offset` at `w`.
    pub fn accumulate_grad(&self, w: &[f64], grad_offset: &[f64], grad: &mut [f64]) -> Result<()> {
        self.check_input(w)?;
        match &self.arch {
            MapperArch::Basis { directions } => {
                for (g, d) in grad.iter_mut().zip(directions) {
                    *g += d.iter().zip(grad_offset).map(|(a, b)| a * b).sum::<f64>();
                }
            }
            MapperArch::Mlp { hidden } => {
                let sizes = layer_sizes(self.dim, hidden);
                let acts = self.activations(w, hidden);
                let n_layers = sizes.len() - 1;
                let mut offsets = Vec::with_capacity(n_layers);
                let mut o = 0;
                for l in 0..n_layers {
                    offsets.push(o);
                    o += sizes[l] * sizes[l + 1] + sizes[l + 1];
                }
                let mut delta = grad_offset.to_vec();
                for l in (0..n_layers).rev() {
                    let (n_in, n_out) = (sizes[l], sizes[l + 1]);
                    let input: Vec<f64> = if l == 0 {
                        acts[0].clone()
                    } else {
                        acts[l].iter().map(|&z| leaky(z)).collect()
                    };
                    let base = offsets[l];
                    for out in 0..n_out {
                        let row = base + out * n_in;
                        for i in 0..n_in {
                            grad[row + i] += delta[out] * input[i];
                        }
                        grad[base + n_in * n_out + out] += delta[out];
                    }
                    if l > 0 {
                        let weights = &self.params[base..base + n_in * n_out];
                        delta = (0..n_in)
                            .map(|i| {
                                let back: f64 =
                                    (0..n_out).map(|out| weights[out * n_in + i] * delta[out]).sum();
                                back * leaky_grad(acts[l][i])
                            })
                            .collect();
                    }
                }
            }
        }
        Ok(())
    }

    /// Parameters as little-endian f64.
    pub fn to_blob(&self) -> Vec<u8> {
        self.params.iter().flat_map(|p| p.to_le_bytes()).collect()
    }

    pub fn from_blob(arch: MapperArch, dim: usize, bytes: &[u8]) -> Result<Self> {
        if !bytes.len().is_multiple_of(8) {
            return Err(Error::Validation(format!(
                "parameter blob of {} bytes is not an f64 array",
                bytes.len()
            )));
        }
        let params = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        Self::from_parts(arch, dim, params)
    }
}

/// `G(w + strength * M(w))`; strength zero renders `G(w)` itself.
pub fn manipulate(
    generator: &dyn Generator,
    mapper: &MapperModel,
    w: &[f64],
    strength: f64,
) -> Result<Image> {
    if mapper.dim() != generator.latent_dim() {
        return Err(Error::DimensionMismatch {
            expected: generator.latent_dim(),
            got: mapper.dim(),
        });
    }
    if strength == 0.0 {
        return generator.render(w);
    }
    let offset = mapper.offset(w)?;
    let moved: Vec<f64> = w.iter().zip(&offset).map(|(a, d)| a + strength * d).collect();
    generator.render(&moved)
}

/// Metadata stored next to a parameter blob.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub command: String,
    pub mode: String,
    pub arch: MapperArch,
    pub latent_dim: usize,
    pub weights: LossWeights,
    pub entangled: Vec<String>,
    pub train: TrainConfig,
    pub prediction_hash: Option<String>,
    pub blob_sha256: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool_version: Option<String>,
}

/// Writes `<stem>.bin` and `<stem>.json` into `dir`.
pub fn save_checkpoint(dir: &Path, stem: &str, meta: &CheckpointMeta, mapper: &MapperModel) -> Result<()> {
    let blob = mapper.to_blob();
    let bin = dir.join(format!("{stem}.bin"));
    let json = dir.join(format!("{stem}.json"));
    std::fs::write(&bin, &blob).map_err(|e| Error::file(&bin, e))?;
    std::fs::write(&json, serde_json::to_vec_pretty(meta)?).map_err(|e| Error::file(&json, e))?;
    Ok(())
}

pub fn blob_digest(mapper: &MapperModel) -> String {
    hex::encode(Sha256::digest(mapper.to_blob()))
}

pub fn load_checkpoint(dir: &Path, stem: &str) -> Result<(CheckpointMeta, MapperModel)> {
    let bin = dir.join(format!("{stem}.bin"));
    let json = dir.join(format!("{stem}.json"));
    let meta_text = std::fs::read_to_string(&json).map_err(|e| Error::file(&json, e))?;
    let meta: CheckpointMeta = serde_json::from_str(&meta_text)?;
    let blob = std::fs::read(&bin).map_err(|e| Error::file(&bin, e))?;
    if hex::encode(Sha256::digest(&blob)) != meta.blob_sha256 {
        return Err(Error::Validation(format!(
            "{}: parameter blob does not match its recorded digest",
            bin.display()
        )));
    }
    let mapper = MapperModel::from_blob(meta.arch.clone(), meta.latent_dim, &blob)?;
    Ok((meta, mapper))
}
