//! Pipeline configuration: a TOML or JSON file, dotted-key overrides and
//! field-level validation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use untangle_core::category::DEFAULT_CATEGORY_TEMPLATE;
use untangle_core::eval::DEFAULT_STRENGTHS;
use untangle_core::hierarchy::{AttributeHierarchy, BUNDLED_CELEBA_FACE_V1, BUNDLED_TOY_FACE_V1};
use untangle_core::mapper::{LossWeights, TrainConfig};
use untangle_core::predict::PredictorConfig;

/// Overrides `paths.cache_dir`.
pub const CACHE_DIR_ENV: &str = "UNTANGLE_CACHE_DIR";

/// A configuration problem, reported with the offending key.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid config: {}", .problems.iter().map(|(f, m)| format!("{f}: {m}")).collect::<Vec<_>>().join("; "))]
pub struct ConfigError {
    pub problems: Vec<(String, String)>,
}

impl ConfigError {
    pub fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            problems: vec![(field.into(), message.into())],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    /// The built-in linear toy stack described by `paths.world`.
    #[default]
    Synthetic,
    /// A subprocess speaking the JSON-lines backend protocol.
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// A latent corpus JSON file, or a directory of raw f32 images.
    pub corpus: Option<PathBuf>,
    /// Toy stack description; required by the synthetic backend.
    pub world: Option<PathBuf>,
    pub test_latents: Option<PathBuf>,
    pub cache_dir: Option<PathBuf>,
    pub output_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            corpus: None,
            world: None,
            test_latents: None,
            cache_dir: None,
            output_dir: PathBuf::from("untangle-out"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct External {
    pub program: Option<String>,
    pub args: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Predictor {
    pub n: usize,
    pub rank_cap: usize,
    pub top_images: usize,
    pub min_images: usize,
}

impl Default for Predictor {
    fn default() -> Self {
        let d = PredictorConfig::default();
        Self {
            n: d.n,
            rank_cap: d.rank_cap,
            top_images: d.top_images,
            min_images: d.min_images,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Loss {
    pub lambda_l2: f64,
    pub lambda_id: f64,
    pub lambda_e: f64,
}

impl Default for Loss {
    fn default() -> Self {
        let d = LossWeights::default();
        Self {
            lambda_l2: d.lambda_l2,
            lambda_id: d.lambda_id,
            lambda_e: d.lambda_e,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Train {
    pub steps: usize,
    pub batch: usize,
    pub learning_rate: f64,
    pub hidden: Vec<usize>,
}

impl Default for Train {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            steps: d.steps,
            batch: d.batch,
            learning_rate: d.learning_rate,
            hidden: d.hidden,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Eval {
    pub strength: f64,
    pub strengths: Vec<f64>,
    /// Leading corpus latents used when `paths.test_latents` is unset.
    pub test_items: usize,
    /// Test items rendered by `manipulate`.
    pub images: usize,
}

impl Default for Eval {
    fn default() -> Self {
        Self {
            strength: 1.0,
            strengths: DEFAULT_STRENGTHS.to_vec(),
            test_items: 200,
            images: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Mine {
    pub templates: Vec<String>,
    pub keywords: Vec<String>,
    pub top_k: usize,
}

impl Default for Mine {
    fn default() -> Self {
        Self {
            templates: vec!["a person with [MASK] [X].".into()],
            keywords: Vec::new(),
            top_k: untangle_core::hierarchy::mining::DEFAULT_TOP_K,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FindCategory {
    pub template: String,
    /// Defaults to the hierarchy's category names.
    pub candidates: Vec<String>,
}

impl Default for FindCategory {
    fn default() -> Self {
        Self {
            template: DEFAULT_CATEGORY_TEMPLATE.into(),
            candidates: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: Option<u64>,
    pub backend: BackendKind,
    /// Bundled hierarchy id or a JSON file. Defaults to the toy world's
    /// hierarchy for the synthetic backend and the bundled face hierarchy
    /// otherwise.
    pub hierarchy: Option<String>,
    pub command: Option<String>,
    pub commands: Vec<String>,
    /// Category of the command when it is ambiguous or not in the hierarchy.
    pub category: Option<String>,
    pub paths: Paths,
    pub external: External,
    pub predictor: Predictor,
    pub loss: Loss,
    pub train: Train,
    pub eval: Eval,
    pub mine: Mine,
    pub find_category: FindCategory,
}

fn parse_document(text: &str, json: bool) -> Result<Value, ConfigError> {
    if json {
        serde_json::from_str(text).map_err(|e| ConfigError::new("<file>", e.to_string()))
    } else {
        let v: toml::Value = toml::from_str(text).map_err(|e| ConfigError::new("<file>", e.to_string()))?;
        serde_json::to_value(v).map_err(|e| ConfigError::new("<file>", e.to_string()))
    }
}

/// Parses an override value as a TOML literal, falling back to a bare string.
fn parse_value(raw: &str) -> Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .and_then(|v| serde_json::to_value(v).ok())
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

/// Sets a dotted key such as `predictor.n` inside `doc`.
pub fn apply_override(doc: &mut Value, key: &str, raw: &str) -> Result<(), ConfigError> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(ConfigError::new(key, "malformed override key"));
    }
    let mut node = doc;
    for p in &parts[..parts.len() - 1] {
        if !node.is_object() {
            return Err(ConfigError::new(key, "cannot set a field inside a non-table value"));
        }
        node = node
            .as_object_mut()
            .expect("checked object")
            .entry(p.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    let obj = node
        .as_object_mut()
        .ok_or_else(|| ConfigError::new(key, "cannot set a field inside a non-table value"))?;
    obj.insert(parts[parts.len() - 1].to_string(), parse_value(raw));
    Ok(())
}

fn resolve(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(path) = p {
        if path.is_relative() {
            *path = base.join(&*path);
        }
    }
}

impl PipelineConfig {
    /// Reads `path` (JSON if it ends in `.json`, TOML otherwise), applies
    /// `key=value` overrides and resolves relative paths against the file's
    /// directory. Does not validate.
    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::new("<file>", format!("cannot read {}: {e}", path.display())))?;
        let json = path.extension().is_some_and(|e| e == "json");
        let abs = std::path::absolute(path)
            .map_err(|e| ConfigError::new("<file>", format!("cannot resolve {}: {e}", path.display())))?;
        let base = abs.parent().unwrap_or(Path::new("/")).to_path_buf();
        Self::from_document(parse_document(&text, json)?, overrides, &base)
    }

    pub fn from_document(mut doc: Value, overrides: &[(String, String)], base: &Path) -> Result<Self, ConfigError> {
        if !doc.is_object() {
            return Err(ConfigError::new("<file>", "the config must be a table"));
        }
        for (k, v) in overrides {
            apply_override(&mut doc, k, v)?;
        }
        let mut cfg: Self = serde_json::from_value(doc).map_err(|e| ConfigError::new("<file>", e.to_string()))?;
        let p = &mut cfg.paths;
        for slot in [&mut p.corpus, &mut p.world, &mut p.test_latents, &mut p.cache_dir] {
            resolve(base, slot);
        }
        if p.output_dir.is_relative() {
            p.output_dir = base.join(&p.output_dir);
        }
        if let Ok(dir) = std::env::var(CACHE_DIR_ENV) {
            if !dir.is_empty() {
                p.cache_dir = Some(PathBuf::from(dir));
            }
        }
        if let Some(h) = &cfg.hierarchy {
            let is_bundled = h.starts_with("bundled:") || [BUNDLED_CELEBA_FACE_V1, BUNDLED_TOY_FACE_V1].contains(&h.as_str());
            if !is_bundled && Path::new(h).is_relative() {
                cfg.hierarchy = Some(base.join(h).to_string_lossy().into_owned());
            }
        }
        Ok(cfg)
    }

    /// Checks every field, collecting all problems.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut problems = Vec::new();
        let mut bad = |f: &str, m: String| problems.push((f.to_string(), m));
        if self.seed.is_none() {
            bad("seed", "required".into());
        }
        if self.commands().is_empty() {
            bad("command", "at least one command is required (command or commands)".into());
        }
        match &self.paths.corpus {
            None => bad("paths.corpus", "required".into()),
            Some(p) if !p.exists() => bad("paths.corpus", format!("{} does not exist", p.display())),
            _ => {}
        }
        match (&self.paths.world, self.backend) {
            (None, BackendKind::Synthetic) => bad("paths.world", "required by the synthetic backend".into()),
            (Some(p), _) if !p.is_file() => bad("paths.world", format!("{} is not a file", p.display())),
            _ => {}
        }
        if let Some(p) = &self.paths.test_latents {
            if !p.is_file() {
                bad("paths.test_latents", format!("{} is not a file", p.display()));
            }
        }
        if let Some(p) = &self.paths.cache_dir {
            if p.exists() && !p.is_dir() {
                bad("paths.cache_dir", format!("{} is not a directory", p.display()));
            }
        }
        if self.paths.output_dir.exists() && !self.paths.output_dir.is_dir() {
            bad(
                "paths.output_dir",
                format!("{} is not a directory", self.paths.output_dir.display()),
            );
        }
        if self.backend == BackendKind::External && self.external.program.is_none() {
            bad("external.program", "required by the external backend".into());
        }
        if let Some(h) = &self.hierarchy {
            if let Err(e) = AttributeHierarchy::load(h) {
                bad("hierarchy", e.to_string());
            }
        }
        if let Err(e) = self.predictor_config().validate() {
            bad("predictor", e.to_string());
        }
        if self.predictor.n == 0 {
            bad("predictor.n", "must be at least 1".into());
        }
        if let Err(e) = self.loss_weights().validate() {
            bad("loss", e.to_string());
        }
        if let Err(e) = self.train_config().validate() {
            bad("train", e.to_string());
        }
        if self.train.hidden.contains(&0) {
            bad("train.hidden", "layer widths must be positive".into());
        }
        if !self.eval.strength.is_finite() {
            bad("eval.strength", "must be finite".into());
        }
        if self.eval.strengths.is_empty() || self.eval.strengths.iter().any(|s| !s.is_finite()) {
            bad("eval.strengths", "must be a non-empty list of finite numbers".into());
        }
        if self.eval.test_items == 0 {
            bad("eval.test_items", "must be at least 1".into());
        }
        if self.mine.top_k == 0 {
            bad("mine.top_k", "must be at least 1".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(ConfigError { problems })
        }
    }

    /// `command` followed by `commands`, without duplicates.
    pub fn commands(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for c in self.command.iter().chain(&self.commands) {
            if !out.contains(c) {
                out.push(c.clone());
            }
        }
        out
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or_default()
    }

    pub fn predictor_config(&self) -> PredictorConfig {
        PredictorConfig {
            n: self.predictor.n,
            rank_cap: self.predictor.rank_cap,
            top_images: self.predictor.top_images,
            min_images: self.predictor.min_images,
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda_l2: self.loss.lambda_l2,
            lambda_id: self.loss.lambda_id,
            lambda_e: self.loss.lambda_e,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.train.steps,
            batch: self.train.batch,
            learning_rate: self.train.learning_rate,
            seed: self.seed(),
            hidden: self.train.hidden.clone(),
        }
    }

    /// SHA-256 of the canonical JSON form, ignoring where outputs and caches
    /// live.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(paths) = v.get_mut("paths").and_then(Value::as_object_mut) {
            paths.remove("output_dir");
            paths.remove("cache_dir");
        }
        hex::encode(Sha256::digest(canonical_json(&v).as_bytes()))
    }
}

/// JSON with object keys sorted at every level and no whitespace.
pub fn canonical_json(v: &Value) -> String {
    match v {
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            let body: Vec<String> = keys
                .into_iter()
                .map(|k| format!("{}:{}", Value::String(k.clone()), canonical_json(&map[k])))
                .collect();
            format!("{{{}}}", body.join(","))
        }
        Value::Array(items) => format!("[{}]", items.iter().map(canonical_json).collect::<Vec<_>>().join(",")),
        other => other.to_string(),
    }
}
