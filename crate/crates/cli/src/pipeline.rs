//! The pipeline commands. Each one reads the validated config, writes its
//! artifacts under the output directory and returns the written paths.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use untangle_core::category::{find_category, manual_category, CategoryQuery, CategoryResult};
use untangle_core::embedding::{build_corpus, CorpusItem, EmbeddedCorpus, EmbeddingBackend, EmbeddingCache, ExternalBackend, ItemSource};
use untangle_core::eval::{comparison_csv, EvalSetup, EvaluationReport, RangeCache, SweepPoint};
use untangle_core::hierarchy::mining::{mine_attributes, write_jsonl, MiningPrompt};
use untangle_core::hierarchy::{AttributeHierarchy, BUNDLED_CELEBA_FACE_V1};
use untangle_core::latent::LatentCorpus;
use untangle_core::mapper::{blob_digest, load_checkpoint, manipulate, save_checkpoint, train_mapper, CheckpointMeta, MapperModel, Objective};
use untangle_core::predict::{predict_entangled, EntanglementPrediction, FullScoreCache};
use untangle_core::toy::{ToyStack, ToyStackSpec};

use crate::config::{BackendKind, ConfigError, PipelineConfig};
use crate::output::{read_artifact, short_hash, slug, to_json_bytes, Area, Artifact, OutputDir, TOOL_VERSION};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Ppe,
    Baseline,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Ppe => "ppe",
            Mode::Baseline => "baseline",
        }
    }
}

pub enum Stack {
    Toy(Box<ToyStack>),
    External(ExternalBackend),
}

impl Stack {
    pub fn backend(&self) -> &dyn EmbeddingBackend {
        match self {
            Stack::Toy(s) => &s.backend,
            Stack::External(b) => b,
        }
    }

    fn toy(&self, what: &str) -> Result<&ToyStack> {
        match self {
            Stack::Toy(s) => Ok(s),
            Stack::External(_) => Err(ConfigError::new(
                "backend",
                format!("{what} needs a generator, which only the synthetic backend provides"),
            )
            .into()),
        }
    }
}

/// Comparison table written by `report`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub command: String,
    pub runs: BTreeMap<String, EvaluationReport>,
    pub sweeps: BTreeMap<String, Vec<SweepPoint>>,
}

pub struct Pipeline {
    pub config: PipelineConfig,
    pub hash: String,
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

impl Pipeline {
    pub fn new(config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        let hash = config.hash();
        Ok(Self { config, hash })
    }

    fn stem(&self, prefix: &str, command: &str) -> String {
        format!("{prefix}-{}-{}", slug(command), short_hash(&self.hash))
    }

    pub fn prediction_file(&self, command: &str) -> String {
        format!("{}.json", self.stem("prediction", command))
    }

    pub fn checkpoint_stem(&self, mode: Mode, command: &str) -> String {
        self.stem(mode.name(), command)
    }

    pub fn eval_stem(&self, mode: Mode, command: &str) -> String {
        self.stem(&format!("eval-{}", mode.name()), command)
    }

    pub fn sweep_file(&self, mode: Mode, command: &str) -> String {
        format!("{}.json", self.stem(&format!("sweep-{}", mode.name()), command))
    }

    pub fn open_stack(&self) -> Result<Stack> {
        match self.config.backend {
            BackendKind::Synthetic => {
                let path = self.config.paths.world.as_ref().expect("validated");
                let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                let spec: ToyStackSpec = serde_json::from_str(&text)
                    .map_err(|e| ConfigError::new("paths.world", format!("{}: {e}", path.display())))?;
                Ok(Stack::Toy(Box::new(ToyStack::build(&spec)?)))
            }
            BackendKind::External => {
                let ext = &self.config.external;
                let program = ext.program.as_deref().expect("validated");
                Ok(Stack::External(ExternalBackend::spawn(program, &ext.args)?))
            }
        }
    }

    pub fn hierarchy(&self, stack: &Stack) -> Result<AttributeHierarchy> {
        match (&self.config.hierarchy, stack) {
            (Some(h), _) => Ok(AttributeHierarchy::load(h)?),
            (None, Stack::Toy(s)) => Ok(s.hierarchy.clone()),
            (None, Stack::External(_)) => Ok(AttributeHierarchy::load(BUNDLED_CELEBA_FACE_V1)?),
        }
    }

    fn corpus_path(&self) -> &Path {
        self.config.paths.corpus.as_deref().expect("validated")
    }

    fn latents(&self) -> Result<LatentCorpus> {
        let path = self.corpus_path();
        if path.is_dir() {
            return Err(ConfigError::new("paths.corpus", "training and evaluation need a latent corpus file, not an image directory").into());
        }
        Ok(LatentCorpus::load(path)?)
    }

    fn test_latents(&self) -> Result<LatentCorpus> {
        match &self.config.paths.test_latents {
            Some(p) => Ok(LatentCorpus::load(p)?),
            None => Ok(self.latents()?.head(self.config.eval.test_items)),
        }
    }

    pub fn corpus(&self, stack: &Stack) -> Result<EmbeddedCorpus> {
        let path = self.corpus_path();
        let items: Vec<CorpusItem> = if path.is_dir() {
            let mut files: Vec<PathBuf> = std::fs::read_dir(path)
                .with_context(|| format!("listing {}", path.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "f32"))
                .collect();
            files.sort();
            files
                .into_iter()
                .map(|p| CorpusItem {
                    id: p.file_stem().expect("file name").to_string_lossy().into_owned(),
                    source: ItemSource::File(p),
                })
                .collect()
        } else {
            let toy = stack.toy("a latent corpus")?;
            self.latents()?.render(&toy.generator)?
        };
        let cache = match &self.config.paths.cache_dir {
            Some(dir) => Some(EmbeddingCache::open(dir)?),
            None => None,
        };
        Ok(build_corpus(stack.backend(), &items, cache.as_ref())?)
    }

    pub fn predict(&self, out: &OutputDir) -> Result<Vec<PathBuf>> {
        let stack = self.open_stack()?;
        let hierarchy = self.hierarchy(&stack)?;
        let corpus = self.corpus(&stack)?;
        let cache = FullScoreCache::new();
        let mut written = Vec::new();
        for command in self.config.commands() {
            let (path, _) = self.predict_one(out, &stack, &hierarchy, &corpus, &cache, &command)?;
            written.push(path);
        }
        Ok(written)
    }

    fn predict_one(
        &self,
        out: &OutputDir,
        stack: &Stack,
        hierarchy: &AttributeHierarchy,
        corpus: &EmbeddedCorpus,
        cache: &FullScoreCache,
        command: &str,
    ) -> Result<(PathBuf, EntanglementPrediction)> {
        let prediction = predict_entangled(
            command,
            corpus,
            hierarchy,
            stack.backend(),
            self.config.category.as_deref(),
            &self.config.predictor_config(),
            Some(cache),
        )?;
        let artifact = Artifact::new("prediction", &self.hash, prediction);
        let path = out.write_json(Area::Predictions, &self.prediction_file(command), &artifact, Some(command))?;
        Ok((path, artifact.data))
    }

    /// The persisted prediction for `command`, computed first if missing.
    fn load_or_predict(&self, out: &OutputDir, stack: &Stack, command: &str) -> Result<(EntanglementPrediction, String)> {
        let path = out.path(Area::Predictions, &self.prediction_file(command));
        if !path.exists() {
            log::info!("no prediction for {command:?} yet; predicting");
            let hierarchy = self.hierarchy(stack)?;
            let corpus = self.corpus(stack)?;
            self.predict_one(out, stack, &hierarchy, &corpus, &FullScoreCache::new(), command)?;
        }
        let artifact: Artifact<EntanglementPrediction> = read_artifact(&path)?;
        Ok((artifact.data, sha256_file(&path)?))
    }

    pub fn train(&self, out: &OutputDir, modes: &[Mode]) -> Result<Vec<PathBuf>> {
        let stack = self.open_stack()?;
        let toy = stack.toy("training")?;
        let latents = self.latents()?;
        let train = self.config.train_config();
        let mut written = Vec::new();
        for command in self.config.commands() {
            let (prediction, prediction_hash) = self.load_or_predict(out, &stack, &command)?;
            let entangled = prediction.entangled_texts();
            for &mode in modes {
                let weights = match mode {
                    Mode::Ppe => self.config.loss_weights(),
                    Mode::Baseline => self.config.loss_weights().baseline(),
                };
                let objective = Objective::new(&toy.generator, &toy.backend, Some(&toy.identity), &command, &entangled, weights)?;
                let (mapper, trace) = train_mapper(&objective, &latents, &train)?;
                let stem = self.checkpoint_stem(mode, &command);
                let meta = CheckpointMeta {
                    command: command.clone(),
                    mode: mode.name().into(),
                    arch: mapper.arch().clone(),
                    latent_dim: mapper.dim(),
                    weights: *objective.weights(),
                    entangled: entangled.clone(),
                    train: train.clone(),
                    prediction_hash: Some(prediction_hash.clone()),
                    blob_sha256: blob_digest(&mapper),
                    config_hash: Some(self.hash.clone()),
                    tool_version: Some(TOOL_VERSION.into()),
                };
                save_checkpoint(&out.dir(Area::Checkpoints), &stem, &meta, &mapper)?;
                for ext in ["bin", "json"] {
                    let file = format!("{stem}.{ext}");
                    out.record(Area::Checkpoints, &file, "checkpoint", Some(&command), &self.hash)?;
                    written.push(out.path(Area::Checkpoints, &file));
                }
                let trace = Artifact::new("trace", &self.hash, trace);
                written.push(out.write_json(Area::Checkpoints, &format!("{stem}.trace.json"), &trace, Some(&command))?);
            }
        }
        Ok(written)
    }

    fn load_mapper(&self, out: &OutputDir, mode: Mode, command: &str) -> Result<(CheckpointMeta, MapperModel)> {
        let stem = self.checkpoint_stem(mode, command);
        if !out.path(Area::Checkpoints, &format!("{stem}.json")).exists() {
            bail!("no {} checkpoint for {command:?} under this config; run `untangle train` first", mode.name());
        }
        Ok(load_checkpoint(&out.dir(Area::Checkpoints), &stem)?)
    }

    /// Writes one evaluation report and strength sweep per mode. Reports
    /// whose indicator is undefined are written with `valid: false`.
    pub fn evaluate(&self, out: &OutputDir, modes: &[Mode]) -> Result<Vec<PathBuf>> {
        let stack = self.open_stack()?;
        let toy = stack.toy("evaluation")?;
        let corpus = self.corpus(&stack)?;
        let test = self.test_latents()?;
        let ranges = RangeCache::new();
        let mut written = Vec::new();
        for command in self.config.commands() {
            for &mode in modes {
                let (meta, mapper) = self.load_mapper(out, mode, &command)?;
                let setup = EvalSetup {
                    generator: &toy.generator,
                    backend: &toy.backend,
                    corpus: &corpus,
                    command: &command,
                    entangled: &meta.entangled,
                    ranges: Some(&ranges),
                };
                let mut report = setup.evaluate(&test, &mapper, self.config.eval.strength)?;
                report.config_hash = Some(self.hash.clone());
                if let Some(reason) = &report.invalid_reason {
                    log::warn!("{} report for {command:?} is flagged invalid: {reason}", mode.name());
                }
                let stem = self.eval_stem(mode, &command);
                written.push(out.write(Area::Reports, &format!("{stem}.csv"), report.to_csv().as_bytes(), "evaluation-csv", Some(&command), &self.hash)?);
                written.push(out.write_json(Area::Reports, &format!("{stem}.json"), &Artifact::new("evaluation", &self.hash, report), Some(&command))?);
                let sweep = setup.sweep(&test, &mapper, &self.config.eval.strengths)?;
                written.push(out.write_json(Area::Reports, &self.sweep_file(mode, &command), &Artifact::new("sweep", &self.hash, sweep), Some(&command))?);
            }
        }
        Ok(written)
    }

    /// Renders the first `eval.images` test items at each strength as raw
    /// f32 images.
    pub fn manipulate(&self, out: &OutputDir, modes: &[Mode], strengths: &[f64]) -> Result<Vec<PathBuf>> {
        if strengths.iter().any(|s| !s.is_finite()) || strengths.is_empty() {
            return Err(ConfigError::new("strengths", "must be a non-empty list of finite numbers").into());
        }
        let stack = self.open_stack()?;
        let toy = stack.toy("manipulation")?;
        let test = self.test_latents()?.head(self.config.eval.images);
        let mut written = Vec::new();
        for command in self.config.commands() {
            for &mode in modes {
                let (_, mapper) = self.load_mapper(out, mode, &command)?;
                let stem = self.checkpoint_stem(mode, &command);
                for (id, w) in test.ids.iter().zip(&test.latents) {
                    for &s in strengths {
                        let image = manipulate(&toy.generator, &mapper, w.values(), s)?;
                        let file = format!("{stem}-{}-s{s}.f32", slug(id));
                        written.push(out.write(Area::Images, &file, &image.to_bytes(), "image", Some(&command), &self.hash)?);
                    }
                }
            }
        }
        Ok(written)
    }

    /// Builds the baseline-vs-ppe comparison from persisted reports only.
    pub fn report(&self, out: &OutputDir) -> Result<Vec<PathBuf>> {
        let mut written = Vec::new();
        for command in self.config.commands() {
            let mut runs = BTreeMap::new();
            let mut sweeps = BTreeMap::new();
            for mode in [Mode::Baseline, Mode::Ppe] {
                let path = out.path(Area::Reports, &format!("{}.json", self.eval_stem(mode, &command)));
                if !path.exists() {
                    continue;
                }
                let report: Artifact<EvaluationReport> = read_artifact(&path)?;
                runs.insert(mode.name().to_string(), report.data);
                let sweep_path = out.path(Area::Reports, &self.sweep_file(mode, &command));
                if sweep_path.exists() {
                    let sweep: Artifact<Vec<SweepPoint>> = read_artifact(&sweep_path)?;
                    sweeps.insert(mode.name().to_string(), sweep.data);
                }
            }
            if runs.is_empty() {
                bail!("no evaluation reports for {command:?} under this config; run `untangle evaluate` first");
            }
            let stem = self.stem("comparison", &command);
            let columns: Vec<(&str, &EvaluationReport)> = runs.iter().map(|(k, v)| (k.as_str(), v)).collect();
            written.push(out.write(Area::Reports, &format!("{stem}.csv"), comparison_csv(&columns).as_bytes(), "comparison-csv", Some(&command), &self.hash)?);
            if !sweeps.is_empty() {
                written.push(out.write(Area::Reports, &format!("{}.csv", self.stem("sweep", &command)), sweep_csv(&sweeps).as_bytes(), "sweep-csv", Some(&command), &self.hash)?);
            }
            let comparison = Comparison {
                command: command.clone(),
                runs,
                sweeps,
            };
            written.push(out.write_json(Area::Reports, &format!("{stem}.json"), &Artifact::new("comparison", &self.hash, comparison), Some(&command))?);
        }
        Ok(written)
    }

    pub fn mine(&self, out: &OutputDir) -> Result<Vec<PathBuf>> {
        let m = &self.config.mine;
        if m.keywords.is_empty() {
            return Err(ConfigError::new("mine.keywords", "at least one keyword is required").into());
        }
        let prompts = m
            .templates
            .iter()
            .flat_map(|t| m.keywords.iter().map(move |k| MiningPrompt::new(t.clone(), k.clone())))
            .collect::<untangle_core::Result<Vec<_>>>()
            .map_err(|e| ConfigError::new("mine.templates", e.to_string()))?;
        let stack = self.open_stack()?;
        let Stack::External(backend) = &stack else {
            return Err(ConfigError::new("backend", "mining needs the external backend's masked language model").into());
        };
        let records = mine_attributes(&prompts, backend, m.top_k)?;
        let mut bytes = Vec::new();
        write_jsonl(&mut bytes, &records)?;
        let file = format!("mining-{}.jsonl", short_hash(&self.hash));
        Ok(vec![out.write(Area::Reports, &file, &bytes, "mining", None, &self.hash)?])
    }

    pub fn find_category(&self, out: &OutputDir) -> Result<Vec<PathBuf>> {
        let mut written = Vec::new();
        let mut stack = None;
        for command in self.config.commands() {
            let result: CategoryResult = match &self.config.category {
                Some(c) => manual_category(&command, c),
                None => {
                    if stack.is_none() {
                        stack = Some(self.open_stack()?);
                    }
                    let s = stack.as_ref().expect("opened");
                    let Stack::External(backend) = s else {
                        return Err(ConfigError::new(
                            "backend",
                            "category scoring needs the external backend's language model; set `category` to assign one manually",
                        )
                        .into());
                    };
                    let candidates = if self.config.find_category.candidates.is_empty() {
                        self.hierarchy(s)?.categories.iter().map(|c| c.name.clone()).collect()
                    } else {
                        self.config.find_category.candidates.clone()
                    };
                    let query = CategoryQuery::new(command.clone(), candidates).with_template(self.config.find_category.template.clone());
                    find_category(&query, backend)?
                }
            };
            if result.tie {
                log::warn!("category for {command:?} is a tie; picked {:?}", result.category);
            }
            let file = format!("{}.json", self.stem("category", &command));
            written.push(out.write_json(Area::Reports, &file, &Artifact::new("category", &self.hash, result), Some(&command))?);
        }
        Ok(written)
    }
}

/// One row per strength with delta columns per run.
pub fn sweep_csv(sweeps: &BTreeMap<String, Vec<SweepPoint>>) -> String {
    let mut strengths: Vec<f64> = sweeps.values().flatten().map(|p| p.strength).collect();
    strengths.sort_by(f64::total_cmp);
    strengths.dedup();
    let mut out = String::from("strength");
    for name in sweeps.keys() {
        out.push_str(&format!(",{name}_delta_command,{name}_delta_command_norm,{name}_mean_abs_entangled,{name}_indicator"));
    }
    out.push('\n');
    for s in strengths {
        out.push_str(&s.to_string());
        for points in sweeps.values() {
            match points.iter().find(|p| p.strength == s) {
                Some(p) => out.push_str(&format!(
                    ",{},{},{},{}",
                    p.delta_command,
                    p.delta_command_norm,
                    p.mean_abs_entangled,
                    p.indicator.map(|v| v.to_string()).unwrap_or_default()
                )),
                None => out.push_str(",,,,"),
            }
        }
        out.push('\n');
    }
    out
}

/// Writes a toy world, its latent corpus and a config into `dir`.
pub fn init_toy(dir: &Path, seed: u64) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let spec = ToyStackSpec {
        seed,
        ..Default::default()
    };
    let stack = ToyStack::build(&spec)?;
    let world = dir.join("world.json");
    let latents = dir.join("latents.json");
    let config = dir.join("untangle.toml");
    for p in [&world, &latents, &config] {
        if p.exists() {
            return Err(anyhow!("{} already exists", p.display()));
        }
    }
    std::fs::write(&world, to_json_bytes(&spec)?)?;
    stack.latents.save(&latents)?;
    let toml = format!(
        "seed = {seed}\nbackend = \"synthetic\"\ncommand = \"{}\"\n\n[paths]\ncorpus = \"latents.json\"\nworld = \"world.json\"\noutput_dir = \"out\"\n",
        spec.command
    );
    std::fs::write(&config, toml)?;
    Ok(vec![world, latents, config])
}
