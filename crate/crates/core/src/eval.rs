//! Disentanglement metric.
//!
//! For an edit `i -> i'`, the command delta is `D(i, t_c) - D(i', t_c)`
//! and each entangled delta is `D(i, t_e) - D(i', t_e)`. Deltas are
//! averaged over the test items, then divided by the attribute's distance
//! range over the full corpus. The indicator is the mean absolute
//! normalized entangled delta over the normalized command delta; lower is
//! better.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::embedding::{clip_distance, EmbeddedCorpus, EmbeddingBackend, EmbeddingVector};
use crate::error::{Error, Result};
use crate::latent::{Generator, LatentCorpus};
use crate::mapper::{manipulate, MapperModel};

pub const NO_EFFECT_REASON: &str = "no manipulation effect";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeRange {
    pub attribute: String,
    pub min: f64,
    pub max: f64,
    pub items: usize,
}

impl AttributeRange {
    pub fn from_distances(attribute: &str, distances: &[f64]) -> Result<Self> {
        if distances.len() < 2 {
            return Err(Error::Validation(format!(
                "range of {attribute:?} needs at least 2 items, got {}",
                distances.len()
            )));
        }
        let min = distances.iter().copied().fold(f64::INFINITY, f64::min);
        let max = distances.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max <= min {
            return Err(Error::ZeroRange(attribute.to_string()));
        }
        Ok(Self {
            attribute: attribute.to_string(),
            min,
            max,
            items: distances.len(),
        })
    }

    pub fn span(&self) -> f64 {
        self.max - self.min
    }
}

pub fn attribute_range(
    corpus: &EmbeddedCorpus,
    attribute: &str,
    backend: &dyn EmbeddingBackend,
) -> Result<AttributeRange> {
    let t = backend.embed_text(attribute)?;
    AttributeRange::from_distances(attribute, &corpus.distances_to(&t)?)
}

/// Ranges memoized per (corpus, attribute, model).
#[derive(Debug, Default)]
pub struct RangeCache {
    entries: Mutex<HashMap<(String, String, String), AttributeRange>>,
}

impl RangeCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(
        &self,
        corpus: &EmbeddedCorpus,
        attribute: &str,
        backend: &dyn EmbeddingBackend,
    ) -> Result<AttributeRange> {
        let key = (
            corpus.fingerprint().to_string(),
            attribute.to_string(),
            corpus.model_id().to_string(),
        );
        if let Some(r) = self.entries.lock().expect("range cache poisoned").get(&key) {
            return Ok(r.clone());
        }
        let r = attribute_range(corpus, attribute, backend)?;
        self.entries
            .lock()
            .expect("range cache poisoned")
            .insert(key, r.clone());
        Ok(r)
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("range cache poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `D(original, text) - D(edited, text)`; positive when the edit moved
/// toward the text.
pub fn delta(original: &EmbeddingVector, edited: &EmbeddingVector, text: &EmbeddingVector) -> Result<f64> {
    Ok(clip_distance(original, text)? - clip_distance(edited, text)?)
}

pub fn delta_command(original: &EmbeddingVector, edited: &EmbeddingVector, command: &EmbeddingVector) -> Result<f64> {
    delta(original, edited, command)
}

pub fn delta_entangled(original: &EmbeddingVector, edited: &EmbeddingVector, attribute: &EmbeddingVector) -> Result<f64> {
    delta(original, edited, attribute)
}

pub fn normalize_delta(delta: f64, range: &AttributeRange) -> f64 {
    delta / range.span()
}

/// Mean absolute normalized entangled delta over the normalized command
/// delta.
pub fn indicator(command_norm: f64, entangled_norm: &[f64]) -> Result<f64> {
    if entangled_norm.is_empty() {
        return Err(Error::Validation("indicator needs at least one entangled delta".into()));
    }
    if command_norm.is_nan() || command_norm <= 0.0 {
        return Err(Error::NoManipulationEffect(command_norm));
    }
    let mean = entangled_norm.iter().map(|d| d.abs()).sum::<f64>() / entangled_norm.len() as f64;
    Ok(mean / command_norm)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntangledDelta {
    pub attribute: String,
    pub delta: f64,
    pub normalized: f64,
    pub range: AttributeRange,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub command: String,
    pub items: usize,
    pub strength: f64,
    pub delta_command: f64,
    pub delta_command_norm: f64,
    pub command_range: AttributeRange,
    pub entangled: Vec<EntangledDelta>,
    /// Mean of `|delta|` over entangled attributes, unnormalized.
    pub mean_abs_entangled: f64,
    pub indicator: Option<f64>,
    pub valid: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub invalid_reason: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

impl EvaluationReport {
    /// Two-column CSV laid out as indicator, command delta, then one row
    /// per entangled attribute.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("row,value\n");
        let ind = self.indicator.map(|v| format!("{v:.6}")).unwrap_or_default();
        let _ = writeln!(out, "indicator,{ind}");
        let _ = writeln!(out, "delta_command,{:.6}", self.delta_command_norm);
        for e in &self.entangled {
            let _ = writeln!(out, "{},{:.6}", csv_field(&e.attribute), e.normalized);
        }
        out
    }
}

pub(crate) fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Side-by-side CSV of two reports: one column per named report.
pub fn comparison_csv(columns: &[(&str, &EvaluationReport)]) -> String {
    let mut out = String::from("row");
    for (name, _) in columns {
        out.push(',');
        out.push_str(&csv_field(name));
    }
    out.push('\n');
    let fmt = |v: Option<f64>| v.map(|v| format!("{v:.6}")).unwrap_or_default();
    let mut push_row = |label: &str, values: Vec<Option<f64>>| {
        out.push_str(&csv_field(label));
        for v in values {
            out.push(',');
            out.push_str(&fmt(v));
        }
        out.push('\n');
    };
    push_row("indicator", columns.iter().map(|(_, r)| r.indicator).collect());
    push_row(
        "delta_command",
        columns.iter().map(|(_, r)| Some(r.delta_command_norm)).collect(),
    );
    let mut attrs: Vec<&str> = Vec::new();
    for (_, r) in columns {
        for e in &r.entangled {
            if !attrs.contains(&e.attribute.as_str()) {
                attrs.push(&e.attribute);
            }
        }
    }
    for a in attrs {
        push_row(
            a,
            columns
                .iter()
                .map(|(_, r)| r.entangled.iter().find(|e| e.attribute == a).map(|e| e.normalized))
                .collect(),
        );
    }
    out
}

/// Inputs shared by every evaluation of one trained mapper.
pub struct EvalSetup<'a> {
    pub generator: &'a dyn Generator,
    pub backend: &'a dyn EmbeddingBackend,
    /// The full corpus the normalization ranges are taken over.
    pub corpus: &'a EmbeddedCorpus,
    pub command: &'a str,
    pub entangled: &'a [String],
    pub ranges: Option<&'a RangeCache>,
}

impl EvalSetup<'_> {
    fn range(&self, attribute: &str) -> Result<AttributeRange> {
        match self.ranges {
            Some(c) => c.get(self.corpus, attribute, self.backend),
            None => attribute_range(self.corpus, attribute, self.backend),
        }
    }

    /// Raw deltas averaged over `test`: (command delta, per-attribute deltas).
    fn mean_deltas(&self, test: &LatentCorpus, mapper: &MapperModel, strength: f64) -> Result<(f64, Vec<f64>)> {
        if test.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let t_c = self.backend.embed_text(self.command)?;
        let t_e = self
            .entangled
            .iter()
            .map(|a| self.backend.embed_text(a))
            .collect::<Result<Vec<_>>>()?;
        let mut dc = 0.0;
        let mut de = vec![0.0; t_e.len()];
        for w in &test.latents {
            let original = self.backend.embed_image(&self.generator.render(w.values())?)?;
            let edited = self
                .backend
                .embed_image(&manipulate(self.generator, mapper, w.values(), strength)?)?;
            dc += delta(&original, &edited, &t_c)?;
            for (acc, t) in de.iter_mut().zip(&t_e) {
                *acc += delta(&original, &edited, t)?;
            }
        }
        let n = test.len() as f64;
        Ok((dc / n, de.into_iter().map(|v| v / n).collect()))
    }

    pub fn evaluate(&self, test: &LatentCorpus, mapper: &MapperModel, strength: f64) -> Result<EvaluationReport> {
        if self.entangled.is_empty() {
            return Err(Error::Validation("no entangled attributes to evaluate".into()));
        }
        let (dc, de) = self.mean_deltas(test, mapper, strength)?;
        let command_range = self.range(self.command)?;
        let dc_norm = normalize_delta(dc, &command_range);
        let mut entangled = Vec::with_capacity(de.len());
        for (a, d) in self.entangled.iter().zip(&de) {
            let range = self.range(a)?;
            entangled.push(EntangledDelta {
                attribute: a.clone(),
                delta: *d,
                normalized: normalize_delta(*d, &range),
                range,
            });
        }
        let norms: Vec<f64> = entangled.iter().map(|e| e.normalized).collect();
        let (indicator, invalid_reason) = match indicator(dc_norm, &norms) {
            Ok(v) => (Some(v), None),
            Err(Error::NoManipulationEffect(_)) => (None, Some(NO_EFFECT_REASON.to_string())),
            Err(e) => return Err(e),
        };
        Ok(EvaluationReport {
            command: self.command.to_string(),
            items: test.len(),
            strength,
            delta_command: dc,
            delta_command_norm: dc_norm,
            command_range,
            mean_abs_entangled: de.iter().map(|d| d.abs()).sum::<f64>() / de.len() as f64,
            entangled,
            valid: indicator.is_some(),
            indicator,
            invalid_reason,
            config_hash: None,
        })
    }

    pub fn sweep(&self, test: &LatentCorpus, mapper: &MapperModel, strengths: &[f64]) -> Result<Vec<SweepPoint>> {
        strengths
            .iter()
            .map(|&s| {
                let r = self.evaluate(test, mapper, s)?;
                Ok(SweepPoint {
                    strength: s,
                    delta_command: r.delta_command,
                    delta_command_norm: r.delta_command_norm,
                    mean_abs_entangled: r.mean_abs_entangled,
                    indicator: r.indicator,
                })
            })
            .collect()
    }
}

pub const DEFAULT_STRENGTHS: [f64; 5] = [0.0, 0.5, 1.0, 1.5, 2.0];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub strength: f64,
    pub delta_command: f64,
    pub delta_command_norm: f64,
    pub mean_abs_entangled: f64,
    pub indicator: Option<f64>,
}

/// Evaluates `mapper` at `strength` over the test latents.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_run(
    test: &LatentCorpus,
    generator: &dyn Generator,
    mapper: &MapperModel,
    strength: f64,
    command: &str,
    entangled: &[String],
    backend: &dyn EmbeddingBackend,
    corpus: &EmbeddedCorpus,
) -> Result<EvaluationReport> {
    EvalSetup {
        generator,
        backend,
        corpus,
        command,
        entangled,
        ranges: None,
    }
    .evaluate(test, mapper, strength)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::embedding::{build_corpus, SyntheticBackend};
    use crate::toy::{ToyStack, ToyStackSpec};

    fn range(min: f64, max: f64) -> AttributeRange {
        AttributeRange {
            attribute: "a".into(),
            min,
            max,
            items: 2,
        }
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_delta(0.2, &range(0.25, 0.65)), 0.5);
        assert_eq!(normalize_delta(0.0, &range(0.3, 0.7)), 0.0);
    }

    #[test]
    fn indicator_examples() {
        let de = [
            0.1637, 0.1945, 0.0927, 0.2433, 0.1548, 0.1393, 0.0873, 0.2641, 0.1362, 0.1626,
        ];
        assert!((indicator(0.4878, &de).unwrap() - 0.3359).abs() < 1e-3);
        assert_eq!(indicator(0.5, &[0.0, 0.0]).unwrap(), 0.0);
        assert!(matches!(indicator(0.0, &[0.1]), Err(Error::NoManipulationEffect(_))));
        assert!(matches!(indicator(-0.2, &[0.1]), Err(Error::NoManipulationEffect(_))));
    }

    #[test]
    fn range_matches_brute_force() {
        let backend = SyntheticBackend::identity("syn", 2);
        let rows = [[1.0, 0.0], [0.6, 0.8], [0.0, 1.0]];
        let items: Vec<_> = rows
            .iter()
            .enumerate()
            .map(|(i, r)| crate::embedding::CorpusItem::image(format!("i{i}"), crate::embedding::Image::new(r.to_vec())))
            .collect();
        let corpus = build_corpus(&backend, &items, None).unwrap();
        let t = backend.embed_text("probe").unwrap();
        let d: Vec<f64> = rows
            .iter()
            .map(|r| {
                let tv = t.to_f64();
                1.0 - (f64::from(r[0]) * tv[0] + f64::from(r[1]) * tv[1])
            })
            .collect();
        let r = attribute_range(&corpus, "probe", &backend).unwrap();
        let lo = d.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert!((r.min - lo).abs() < 1e-6 && (r.max - hi).abs() < 1e-6);

        let cache = RangeCache::new();
        assert_eq!(cache.get(&corpus, "probe", &backend).unwrap(), r);
        cache.get(&corpus, "probe", &backend).unwrap();
        assert_eq!(cache.len(), 1);
    }

    #[test]
    fn degenerate_ranges_rejected() {
        assert!(matches!(
            AttributeRange::from_distances("x", &[0.4]),
            Err(Error::Validation(_))
        ));
        assert!(matches!(
            AttributeRange::from_distances("x", &[0.4, 0.4, 0.4]),
            Err(Error::ZeroRange(_))
        ));
    }

    #[test]
    fn zero_mapper_gives_an_invalid_report_that_round_trips() {
        let stack = ToyStack::build(&ToyStackSpec {
            items: 60,
            ..Default::default()
        })
        .unwrap();
        let items = stack.latents.render(&stack.generator).unwrap();
        let corpus = build_corpus(&stack.backend, &items, None).unwrap();
        let entangled = vec!["grey eyes".to_string(), "white skin".to_string()];
        let mapper = MapperModel::zero(stack.latents.latent_dim);
        let report = evaluate_run(
            &stack.latents.head(10),
            &stack.generator,
            &mapper,
            1.0,
            "grey hair",
            &entangled,
            &stack.backend,
            &corpus,
        )
        .unwrap();
        assert_eq!(report.delta_command, 0.0);
        assert!(report.entangled.iter().all(|e| e.delta == 0.0));
        assert!(!report.valid);
        assert_eq!(report.invalid_reason.as_deref(), Some(NO_EFFECT_REASON));
        let back: EvaluationReport = serde_json::from_str(&serde_json::to_string(&report).unwrap()).unwrap();
        assert_eq!(back, report);
        assert!(report.to_csv().starts_with("row,value\nindicator,\n"));
    }

    #[test]
    fn comparison_has_one_column_per_report() {
        let mk = |ind: f64| EvaluationReport {
            command: "c".into(),
            items: 1,
            strength: 1.0,
            delta_command: 0.1,
            delta_command_norm: 0.2,
            command_range: range(0.0, 0.5),
            entangled: vec![EntangledDelta {
                attribute: "x, y".into(),
                delta: 0.01,
                normalized: 0.02,
                range: range(0.0, 0.5),
            }],
            mean_abs_entangled: 0.01,
            indicator: Some(ind),
            valid: true,
            invalid_reason: None,
            config_hash: None,
        };
        let (a, b) = (mk(0.3), mk(0.1));
        let csv = comparison_csv(&[("baseline", &a), ("ppe", &b)]);
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines[0], "row,baseline,ppe");
        assert_eq!(lines[1], "indicator,0.300000,0.100000");
        assert_eq!(lines[3], "\"x, y\",0.020000,0.020000");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(256))]

        #[test]
        fn indicator_scales_with_its_inputs(
            dc in 0.01f64..1.0,
            de in prop::collection::vec(-1.0f64..1.0, 1..15),
            k in 0.1f64..10.0,
        ) {
            let base = indicator(dc, &de).unwrap();
            let scaled: Vec<f64> = de.iter().map(|v| v * k).collect();
            let up = indicator(dc, &scaled).unwrap();
            prop_assert!((up - k * base).abs() <= 1e-12 * (1.0 + up.abs()));
            let down = indicator(dc * k, &de).unwrap();
            prop_assert!((down - base / k).abs() <= 1e-12 * (1.0 + base.abs()));
            let doubled: Vec<f64> = de.iter().map(|v| v * 2.0).collect();
            prop_assert_eq!(indicator(dc, &doubled).unwrap(), 2.0 * base);
            prop_assert_eq!(indicator(2.0 * dc, &de).unwrap(), base / 2.0);
        }

        #[test]
        fn indicator_ignores_order(
            dc in 0.01f64..1.0,
            de in prop::collection::vec(-1.0f64..1.0, 1..15).prop_shuffle(),
        ) {
            let mut sorted = de.clone();
            sorted.sort_by(f64::total_cmp);
            let a = indicator(dc, &de).unwrap();
            let b = indicator(dc, &sorted).unwrap();
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
        }

        #[test]
        fn normalized_deltas_within_range_are_bounded(
            lo in 0.0f64..1.0, span in 0.01f64..1.0, u in 0.0f64..1.0, v in 0.0f64..1.0,
        ) {
            let r = range(lo, lo + span);
            let before = lo + u * span;
            let after = lo + v * span;
            prop_assert!(normalize_delta(before - after, &r).abs() <= 1.0 + 1e-12);
        }
    }
}
