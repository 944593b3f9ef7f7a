//! Run configuration: one TOML file with `dataset`, `target`, `concept`,
//! `evaluate` and `report` sections. Every key has a default; unknown keys
//! are rejected all at once.

use std::path::{Path, PathBuf};

use hiconcept_core::attribution::Method;
use hiconcept_core::datagen::{TextCorpusSpec, ToyConfig};
use hiconcept_core::losses::{LossWeights, MaskSpec};
use hiconcept_core::targets::{CnnConfig, TargetKind, TrainConfig, TransformerConfig};
use hiconcept_core::trainer::{ConceptConfig, TrainSchedule};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const DEFAULT_OUT: &str = "hiconcept-out";
pub const OUT_ENV: &str = "HICONCEPT_OUT";

/// Keys that are valid but absent from the serialized defaults because they
/// default to "derive it".
const OPTIONAL_KEYS: &[&str] = &[
    "dataset.path",
    "target.kind",
    "target.train.epochs",
    "target.train.batch_size",
    "target.train.lr",
    "target.train.lr_decay",
    "concept.beta",
    "concept.layer",
    "concept.schedule.causal_on_epoch",
    "report.out_dir",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    /// Rendered shapes with latent bits.
    Toy,
    /// Generated sentences with planted tokens.
    Text,
    /// A user JSONL file of `{"text", "label"}` records.
    Jsonl,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub source: Source,
    pub path: Option<PathBuf>,
    /// Train/test (or train/val/test) fractions.
    pub split: Vec<f64>,
    pub split_seed: u64,
    pub toy: ToyConfig,
    pub text: TextCorpusSpec,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            source: Source::Toy,
            path: None,
            split: vec![0.8, 0.2],
            split_seed: 0,
            toy: ToyConfig::default(),
            text: TextCorpusSpec::default(),
        }
    }
}

/// Target training settings; unset fields take the defaults of the kind.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TargetTrain {
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub lr_decay: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TargetSection {
    /// Derived from the dataset source when unset.
    pub kind: Option<TargetKind>,
    pub seed: u64,
    pub cnn: CnnConfig,
    pub transformer: TransformerConfig,
    pub train: TargetTrain,
}

impl Default for TargetSection {
    fn default() -> Self {
        Self {
            kind: None,
            seed: 0,
            cnn: CnnConfig::default(),
            transformer: TransformerConfig::default(),
            train: TargetTrain::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConceptSection {
    /// Concept count including the context concept.
    pub n: usize,
    pub beta: Option<f64>,
    pub hidden: usize,
    /// Split layer; the target's last layer when unset.
    pub layer: Option<usize>,
    /// Impact below which a concept is switched off before scoring.
    pub filter_epsilon: f64,
    /// Batch size for encoding and scoring.
    pub eval_batch_size: usize,
    pub weights: LossWeights,
    pub mask: MaskSpec,
    pub schedule: TrainSchedule,
}

impl Default for ConceptSection {
    fn default() -> Self {
        let c = ConceptConfig::default();
        Self {
            n: c.n,
            beta: None,
            hidden: c.hidden,
            layer: None,
            filter_epsilon: 1e-3,
            eval_batch_size: 256,
            weights: c.weights,
            mask: c.mask,
            schedule: c.schedule,
        }
    }
}

impl ConceptSection {
    pub fn concept_config(&self) -> ConceptConfig {
        ConceptConfig {
            n: self.n,
            beta: self.beta,
            hidden: self.hidden,
            weights: self.weights,
            mask: self.mask,
            schedule: self.schedule.clone(),
            freeze_concepts: false,
            use_rec: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateSection {
    pub impact: bool,
    pub delta_acc: bool,
    /// Keyword coherence (text datasets only).
    pub coherence: bool,
    pub coherence_window: usize,
    pub attribution: Method,
    /// Concepts mixed into each token's impact score.
    pub top_concepts: usize,
    /// Documents scanned for keyword saliency at sequence-level splits.
    pub keyword_docs: usize,
    /// Occurrences a token needs before it can be a keyword.
    pub min_keyword_count: usize,
}

impl Default for EvaluateSection {
    fn default() -> Self {
        Self {
            impact: true,
            delta_acc: true,
            coherence: true,
            coherence_window: 10,
            attribution: Method::GradInput,
            top_concepts: 3,
            keyword_docs: 500,
            min_keyword_count: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportSection {
    pub out_dir: Option<PathBuf>,
    pub top_keywords_per_concept: usize,
    pub examples_per_concept: usize,
}

impl Default for ReportSection {
    fn default() -> Self {
        Self {
            out_dir: None,
            top_keywords_per_concept: 10,
            examples_per_concept: 5,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSection,
    pub target: TargetSection,
    pub concept: ConceptSection,
    pub evaluate: EvaluateSection,
    pub report: ReportSection,
}

/// Command-line overrides applied on top of the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub sets: Vec<String>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

fn unknown_keys(user: &toml::Value, schema: &toml::Value, prefix: &str, out: &mut Vec<String>) {
    let (Some(u), Some(s)) = (user.as_table(), schema.as_table()) else {
        return;
    };
    for (k, v) in u {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match s.get(k) {
            Some(sv) if sv.is_table() => unknown_keys(v, sv, &path, out),
            Some(_) => {}
            None if OPTIONAL_KEYS.contains(&path.as_str()) => {}
            None => out.push(path),
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn apply_set(root: &mut toml::Value, assignment: &str) -> std::result::Result<(), String> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| format!("--set expects key=value, got '{assignment}'"))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(format!("--set has an empty key segment in '{key}'"));
    }
    let mut cur = root;
    for p in &parts[..parts.len() - 1] {
        let table = cur.as_table_mut().ok_or_else(|| format!("--set {key}: '{p}' is not a section"))?;
        cur = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    let table = cur.as_table_mut().ok_or_else(|| format!("--set {key}: parent is not a section"))?;
    table.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

impl RunConfig {
    /// Read `path` (or start from defaults), apply overrides, fill derived
    /// defaults and validate.
    pub fn load(path: Option<&Path>, ov: &Overrides) -> Result<Self> {
        let mut value = match path {
            Some(p) => {
                let raw = std::fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
                toml::from_str::<toml::Value>(&raw).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Value::Table(Default::default()),
        };
        let mut errs = Vec::new();
        for s in &ov.sets {
            if let Err(e) = apply_set(&mut value, s) {
                errs.push(e);
            }
        }
        let schema = toml::Value::try_from(RunConfig::default()).expect("defaults serialize");
        let mut unknown = Vec::new();
        unknown_keys(&value, &schema, "", &mut unknown);
        errs.extend(unknown.into_iter().map(|k| format!("unknown key '{k}'")));
        if !errs.is_empty() {
            return Err(CliError::Config(errs.join("\n")));
        }
        let mut cfg: RunConfig = value.try_into().map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        if let Some(seed) = ov.seed {
            cfg.concept.schedule.seed = seed;
        }
        if let Some(out) = &ov.out {
            cfg.report.out_dir = Some(out.clone());
        }
        cfg.resolve();
        cfg.validate()?;
        Ok(cfg)
    }

    /// Replace "derive it" fields with concrete values.
    pub fn resolve(&mut self) {
        let kind = *self.target.kind.get_or_insert(match self.dataset.source {
            Source::Toy => TargetKind::ToyCnn,
            Source::Text | Source::Jsonl => TargetKind::TextTransformer,
        });
        let d = TrainConfig::for_kind(kind);
        let t = &mut self.target.train;
        t.epochs.get_or_insert(d.epochs);
        t.batch_size.get_or_insert(d.batch_size);
        t.lr.get_or_insert(d.lr);
        t.lr_decay.get_or_insert(d.lr_decay);
        if self.concept.beta.is_none() && self.concept.n > 0 {
            self.concept.beta = Some(1.0 / self.concept.n as f64);
        }
        if self.concept.schedule.causal_on_epoch.is_none() {
            self.concept.schedule.causal_on_epoch = Some(self.concept.schedule.causal_on());
        }
        if self.report.out_dir.is_none() {
            let env = std::env::var_os(OUT_ENV).filter(|v| !v.is_empty());
            self.report.out_dir = Some(env.map_or_else(|| PathBuf::from(DEFAULT_OUT), PathBuf::from));
        }
        if let Some(TargetKind::ToyCnn) = self.target.kind {
            self.target.cnn.canvas_size = self.dataset.toy.canvas_size;
        }
    }

    /// Every violation, joined, as one config error.
    pub fn validate(&self) -> Result<()> {
        let mut errs: Vec<String> = Vec::new();
        let mut check = |r: hiconcept_core::Result<()>| {
            if let Err(e) = r {
                errs.push(e.to_string());
            }
        };
        match self.dataset.source {
            Source::Toy => check(self.dataset.toy.validate()),
            Source::Text => check(self.dataset.text.validate()),
            Source::Jsonl => {}
        }
        check(self.target_train().validate());
        check(self.concept.concept_config().validate());
        match self.target.kind {
            Some(TargetKind::ToyCnn) => check(self.target.cnn.validate()),
            Some(TargetKind::TextTransformer) => {
                let mut t = self.target.transformer.clone();
                t.vocab_size = t.vocab_size.max(3);
                check(t.validate());
            }
            None => {}
        }
        let mut errs = errs;
        if self.dataset.source == Source::Jsonl && self.dataset.path.is_none() {
            errs.push("dataset.path is required when dataset.source = \"jsonl\"".into());
        }
        let toy = self.dataset.source == Source::Toy;
        match self.target.kind {
            Some(TargetKind::ToyCnn) if !toy => errs.push("target.kind toy_cnn needs dataset.source = \"toy\"".into()),
            Some(TargetKind::TextTransformer) if toy => errs.push("target.kind text_transformer needs a text dataset".into()),
            _ => {}
        }
        let total: f64 = self.dataset.split.iter().sum();
        if !(2..=3).contains(&self.dataset.split.len()) || (total - 1.0).abs() > 1e-9 || self.dataset.split.iter().any(|&f| f <= 0.0) {
            errs.push(format!("dataset.split must be 2 or 3 positive fractions summing to 1, got {:?}", self.dataset.split));
        }
        if !(self.concept.filter_epsilon >= 0.0) {
            errs.push(format!("concept.filter_epsilon must be >= 0, got {}", self.concept.filter_epsilon));
        }
        if self.concept.eval_batch_size == 0 {
            errs.push("concept.eval_batch_size must be positive".into());
        }
        if self.evaluate.coherence_window == 0 || self.evaluate.top_concepts == 0 {
            errs.push("evaluate.coherence_window and evaluate.top_concepts must be positive".into());
        }
        if self.report.top_keywords_per_concept == 0 || self.report.examples_per_concept == 0 {
            errs.push("report.top_keywords_per_concept and report.examples_per_concept must be positive".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(CliError::Config(errs.join("\n")))
        }
    }

    pub fn target_kind(&self) -> TargetKind {
        self.target.kind.expect("resolved config")
    }

    pub fn target_train(&self) -> TrainConfig {
        let d = TrainConfig::for_kind(self.target.kind.unwrap_or(TargetKind::ToyCnn));
        let t = &self.target.train;
        TrainConfig {
            epochs: t.epochs.unwrap_or(d.epochs),
            batch_size: t.batch_size.unwrap_or(d.batch_size),
            lr: t.lr.unwrap_or(d.lr),
            lr_decay: t.lr_decay.unwrap_or(d.lr_decay),
        }
    }

    pub fn out_dir(&self) -> PathBuf {
        self.report.out_dir.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn load(sets: &[&str]) -> Result<RunConfig> {
        RunConfig::load(
            None,
            &Overrides {
                sets: sets.iter().map(|s| s.to_string()).collect(),
                seed: None,
                out: Some("x".into()),
            },
        )
    }

    #[test]
    fn defaults_resolve() {
        let c = load(&[]).unwrap();
        assert_eq!(c.target_kind(), TargetKind::ToyCnn);
        assert_eq!(c.concept.beta, Some(0.1));
        assert_eq!(c.concept.schedule.causal_on_epoch, Some(50));
        assert_eq!(c.target_train().batch_size, 64);
        let t = load(&["dataset.source=\"text\""]).unwrap();
        assert_eq!(t.target_kind(), TargetKind::TextTransformer);
        assert_eq!(t.target_train().batch_size, 128);
    }

    #[test]
    fn unknown_keys_are_listed_together() {
        let e = load(&["concept.nn=3", "bogus.key=1", "concept.weights.lambda9=2"]).unwrap_err().to_string();
        for k in ["concept.nn", "bogus", "concept.weights.lambda9"] {
            assert!(e.contains(k), "{e}");
        }
    }

    #[test]
    fn validation_lists_every_violation() {
        let e = load(&["concept.n=1", "dataset.split=[0.5, 0.1]", "concept.filter_epsilon=-1.0"]).unwrap_err();
        assert_eq!(e.exit_code(), 2);
        let s = e.to_string();
        for k in ["n must be", "dataset.split", "filter_epsilon"] {
            assert!(s.contains(k), "{s}");
        }
    }

    #[test]
    fn snapshot_roundtrips() {
        let c = load(&["concept.n=5", "dataset.toy.p_cor=0.6"]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, c.to_toml()).unwrap();
        let back = RunConfig::load(Some(&p), &Overrides::default()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn set_values_parse_as_toml_or_strings() {
        assert_eq!(parse_value("3"), toml::Value::Integer(3));
        assert_eq!(parse_value("toy"), toml::Value::String("toy".into()));
        let c = load(&["dataset.source=jsonl", "dataset.path=/tmp/x.jsonl"]).unwrap();
        assert_eq!(c.dataset.source, Source::Jsonl);
    }
}
