//! Hierarchical attribute structure: categories of short attribute phrases.
//!
//! A hierarchy is loaded from a versioned JSON document:
//!
//! ```json
//! {"version": "...", "categories": [{"name": "hair color", "attributes": ["black hair", "..."]},
//!                                   {"name": "earrings", "binary": true,
//!                                    "attributes": ["with earrings", "without earrings"]}]}
//! ```
//!
//! Binary categories hold exactly the positive/negative pair, positive first.
//! Hierarchies are immutable after loading.

pub mod mining;

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BUNDLED_CELEBA_FACE_V1: &str = "celeba_face_v1";
pub const BUNDLED_TOY_FACE_V1: &str = "toy_face_v1";
const CELEBA_FACE_V1_JSON: &str = include_str!("../../data/celeba_face_v1.json");
const TOY_FACE_V1_JSON: &str = include_str!("../../data/toy_face_v1.json");

/// Maximum number of words in an attribute phrase.
pub const MAX_ATTRIBUTE_WORDS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HierarchySource {
    Bundled,
    Mined,
    User,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Attribute {
    pub text: String,
    pub category_id: String,
    pub is_binary: bool,
    /// The opposite phrase of a binary attribute, e.g. "without earrings".
    pub negation_text: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Category {
    pub id: String,
    pub name: String,
    pub binary: bool,
    pub attributes: Vec<Attribute>,
}

impl Category {
    /// Attributes that take part in co-occurrence scoring. For a binary
    /// category that is only the positive phrase.
    pub fn scoring_attributes(&self) -> &[Attribute] {
        if self.binary {
            &self.attributes[..1]
        } else {
            &self.attributes
        }
    }

    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.attributes.iter().map(|a| a.text.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttributeHierarchy {
    pub version: String,
    pub source: HierarchySource,
    pub categories: Vec<Category>,
    index: HashMap<String, usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct HierarchyDoc {
    version: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    source: Option<HierarchySource>,
    categories: Vec<CategoryDoc>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CategoryDoc {
    name: String,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    binary: bool,
    attributes: Vec<String>,
}

/// Category identifier derived from its human label.
pub fn category_id(name: &str) -> String {
    name.trim()
        .to_lowercase()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join("_")
}

fn check_attribute_text(category: &str, text: &str) -> Result<()> {
    if text.trim().is_empty() {
        return Err(Error::Hierarchy(format!(
            "category {category:?}: empty attribute text"
        )));
    }
    if text != text.to_lowercase() {
        return Err(Error::Hierarchy(format!(
            "category {category:?}: attribute {text:?} is not lowercase"
        )));
    }
    if text.trim() != text {
        return Err(Error::Hierarchy(format!(
            "category {category:?}: attribute {text:?} has surrounding whitespace"
        )));
    }
    let words = text.split_whitespace().count();
    if words > MAX_ATTRIBUTE_WORDS {
        return Err(Error::Hierarchy(format!(
            "category {category:?}: attribute {text:?} has {words} words (max {MAX_ATTRIBUTE_WORDS})"
        )));
    }
    Ok(())
}

impl AttributeHierarchy {
    /// Loads either a bundled hierarchy (`"celeba_face_v1"`,
    /// `"toy_face_v1"`, optionally prefixed with `"bundled:"`) or a JSON file.
    pub fn load(source: &str) -> Result<Self> {
        let id = source.strip_prefix("bundled:").unwrap_or(source);
        match id {
            BUNDLED_CELEBA_FACE_V1 => {
                return Self::from_json_str(CELEBA_FACE_V1_JSON, HierarchySource::Bundled)
            }
            BUNDLED_TOY_FACE_V1 => {
                return Self::from_json_str(TOY_FACE_V1_JSON, HierarchySource::Bundled)
            }
            _ => {}
        }
        if source.starts_with("bundled:") {
            return Err(Error::Hierarchy(format!("unknown bundled hierarchy {id:?}")));
        }
        Self::load_file(Path::new(source))
    }

    pub fn load_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Self::from_json_str(&text, HierarchySource::User)
    }

    pub fn bundled() -> Self {
        Self::from_json_str(CELEBA_FACE_V1_JSON, HierarchySource::Bundled)
            .expect("bundled hierarchy is valid")
    }

    /// Parses and validates a hierarchy document. `default_source` applies
    /// when the document does not declare its own source.
    pub fn from_json_str(text: &str, default_source: HierarchySource) -> Result<Self> {
        let doc: HierarchyDoc = serde_json::from_str(text)
            .map_err(|e| Error::Hierarchy(format!("schema violation: {e}")))?;
        Self::from_doc(doc, default_source)
    }

    fn from_doc(doc: HierarchyDoc, default_source: HierarchySource) -> Result<Self> {
        if doc.categories.is_empty() {
            return Err(Error::Hierarchy("category list is empty".into()));
        }
        let mut categories = Vec::with_capacity(doc.categories.len());
        let mut names: BTreeMap<String, ()> = BTreeMap::new();
        let mut index: HashMap<String, usize> = HashMap::new();

        for (ci, cat) in doc.categories.into_iter().enumerate() {
            let name = cat.name.trim().to_string();
            if name.is_empty() {
                return Err(Error::Hierarchy(format!("category #{ci} has an empty name")));
            }
            let id = category_id(&name);
            if names.insert(id.clone(), ()).is_some() {
                return Err(Error::Hierarchy(format!("duplicate category name {name:?}")));
            }
            if cat.binary && cat.attributes.len() != 2 {
                return Err(Error::Hierarchy(format!(
                    "binary category {name:?} must hold exactly the with/without pair, found {} attributes",
                    cat.attributes.len()
                )));
            }
            if cat.attributes.len() < 2 {
                return Err(Error::Hierarchy(format!(
                    "category {name:?} needs at least 2 attributes, found {}",
                    cat.attributes.len()
                )));
            }
            let mut attributes = Vec::with_capacity(cat.attributes.len());
            for (ai, text) in cat.attributes.iter().enumerate() {
                check_attribute_text(&name, text)?;
                if let Some(&other) = index.get(text) {
                    let first: &Category = &categories[other];
                    return Err(Error::DuplicateAttribute {
                        text: text.clone(),
                        first: first.name.clone(),
                        second: name.clone(),
                    });
                }
                if attributes.iter().any(|a: &Attribute| &a.text == text) {
                    return Err(Error::DuplicateAttribute {
                        text: text.clone(),
                        first: name.clone(),
                        second: name.clone(),
                    });
                }
                let negation_text = cat.binary.then(|| cat.attributes[1 - ai].clone());
                attributes.push(Attribute {
                    text: text.clone(),
                    category_id: id.clone(),
                    is_binary: cat.binary,
                    negation_text,
                });
            }
            for a in &attributes {
                index.insert(a.text.clone(), categories.len());
            }
            categories.push(Category {
                id,
                name,
                binary: cat.binary,
                attributes,
            });
        }

        Ok(Self {
            version: doc.version,
            source: doc.source.unwrap_or(default_source),
            categories,
            index,
        })
    }

    pub fn to_json(&self) -> String {
        let doc = HierarchyDoc {
            version: self.version.clone(),
            source: Some(self.source),
            categories: self
                .categories
                .iter()
                .map(|c| CategoryDoc {
                    name: c.name.clone(),
                    binary: c.binary,
                    attributes: c.attributes.iter().map(|a| a.text.clone()).collect(),
                })
                .collect(),
        };
        serde_json::to_string_pretty(&doc).expect("hierarchy serializes")
    }

    pub fn attribute(&self, text: &str) -> Option<&Attribute> {
        let cat = &self.categories[*self.index.get(text)?];
        cat.attributes.iter().find(|a| a.text == text)
    }

    pub fn category_of(&self, text: &str) -> Option<&Category> {
        self.index.get(text).map(|&i| &self.categories[i])
    }

    /// Looks a category up by id or by human name.
    pub fn category(&self, key: &str) -> Option<&Category> {
        let id = category_id(key);
        self.categories.iter().find(|c| c.id == id)
    }

    pub fn attributes(&self) -> impl Iterator<Item = &Attribute> {
        self.categories.iter().flat_map(|c| c.attributes.iter())
    }

    /// All attributes that can be predicted as entangled, in hierarchy order.
    pub fn scoring_attributes(&self) -> impl Iterator<Item = &Attribute> {
        self.categories
            .iter()
            .flat_map(|c| c.scoring_attributes().iter())
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    /// Resolves the category a command belongs to. A `category_hint`
    /// (from the category finder or a manual override) wins when given.
    pub fn resolve_command<'a>(
        &'a self,
        command: &str,
        category_hint: Option<&str>,
    ) -> Result<&'a Category> {
        if let Some(hint) = category_hint {
            return self.category(hint).ok_or_else(|| {
                Error::Validation(format!(
                    "category {hint:?} given for command {command:?} is not in the hierarchy"
                ))
            });
        }
        self.category_of(command)
            .ok_or_else(|| Error::UnresolvedCategory(command.to_string()))
    }

    /// Zero-shot classification labels for a command: every attribute of
    /// the command's category, or the with/without pair for binary ones.
    pub fn labels_for_command(
        &self,
        command: &str,
        category_hint: Option<&str>,
    ) -> Result<Vec<String>> {
        let category = self.resolve_command(command, category_hint)?;
        let mut labels: Vec<String> = if let Some(attr) =
            category.attributes.iter().find(|a| a.text == command)
        {
            match (&attr.is_binary, &attr.negation_text) {
                (true, Some(neg)) => vec![attr.text.clone(), neg.clone()],
                _ => category.texts().map(str::to_string).collect(),
            }
        } else {
            category.texts().map(str::to_string).collect()
        };
        if !labels.iter().any(|l| l == command) {
            labels.insert(0, command.to_string());
        }
        Ok(labels)
    }
}
