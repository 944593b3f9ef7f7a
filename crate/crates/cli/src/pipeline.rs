//! Pipeline stages and the artifacts that connect them.
//!
//! Each stage writes a small JSON stamp next to its artifact recording the
//! digests of the config sections and upstream artifacts it was built from.
//! A later stage accepts an artifact only if its stamp matches the current
//! config, so a stale artifact reads as a missing prerequisite.

use std::path::{Path, PathBuf};

use hiconcept_core::attribution::{saliency_batch, sample_concept_probs, Method};
use hiconcept_core::checkpoint::hex_digest;
use hiconcept_core::conceptnet::ConceptModel;
use hiconcept_core::datagen::{self, gen_synthetic_text, gen_toy_dataset, load_corpus, split_dataset, Dataset, Inputs};
use hiconcept_core::metrics::{coherence, evaluate_concepts, token_impact_batch, MetricsReport};
use hiconcept_core::targets::{self, encode_dataset, ActivationSet, ArchConfig, Granularity, SplitPoint, TargetKind, TargetModel};
use hiconcept_core::trainer::{filter_concepts, init_model, train_concepts, ConceptConfig, FilterOutcome, HistoryRow, TrainOutcome};
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, Source};
use crate::error::{CliError, Result};

/// Artifact locations under one output directory.
#[derive(Debug, Clone)]
pub struct Paths {
    pub root: PathBuf,
}

impl Paths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }
    pub fn data_stamp(&self) -> PathBuf {
        self.root.join("data").join("stamp.json")
    }
    pub fn target(&self) -> PathBuf {
        self.root.join("target.hicpt")
    }
    pub fn target_stamp(&self) -> PathBuf {
        self.root.join("target.json")
    }
    pub fn concept_model(&self) -> PathBuf {
        self.root.join("concept_model.hicpt")
    }
    pub fn concept_stamp(&self) -> PathBuf {
        self.root.join("concept_model.json")
    }
    pub fn history(&self) -> PathBuf {
        self.root.join("history.csv")
    }
    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.json")
    }
    pub fn concepts(&self) -> PathBuf {
        self.root.join("concepts.json")
    }
    pub fn ablation(&self) -> PathBuf {
        self.root.join("ablation.csv")
    }
    pub fn report(&self) -> PathBuf {
        self.root.join("report.html")
    }
    pub fn snapshot(&self) -> PathBuf {
        self.root.join("resolved_config.toml")
    }
}

fn digest<T: Serialize>(v: &T) -> String {
    hex_digest(serde_json::to_string(v).expect("serializable").as_bytes())
}

pub(crate) fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Other(format!("{}: {e}", dir.display())))?;
    }
    std::fs::write(path, bytes).map_err(|e| CliError::Other(format!("{}: {e}", path.display())))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Option<T> {
    serde_json::from_str(&std::fs::read_to_string(path).ok()?).ok()
}

// ---- dataset ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct DataStamp {
    dataset: String,
}

/// Digest of everything that determines the dataset, including the bytes
/// of a user corpus.
pub fn dataset_digest(cfg: &RunConfig) -> Result<String> {
    let d = &cfg.dataset;
    let body = match d.source {
        Source::Toy => serde_json::json!({ "source": "toy", "toy": d.toy, "split": d.split, "seed": d.split_seed }),
        Source::Text => serde_json::json!({ "source": "text", "text": d.text, "split": d.split, "seed": d.split_seed }),
        Source::Jsonl => {
            let path = d.path.as_ref().expect("validated");
            let bytes = std::fs::read(path).map_err(|e| CliError::Config(format!("dataset.path {}: {e}", path.display())))?;
            serde_json::json!({ "source": "jsonl", "corpus": hex_digest(&bytes), "split": d.split, "seed": d.split_seed })
        }
    };
    Ok(digest(&body))
}

/// Generate or read the dataset and cut it into splits.
pub fn build_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let d = &cfg.dataset;
    let ds = match d.source {
        Source::Toy => gen_toy_dataset(&d.toy)?,
        Source::Text => gen_synthetic_text(&d.text)?,
        Source::Jsonl => load_corpus(d.path.as_ref().expect("validated"))?,
    };
    Ok(split_dataset(ds, &d.split, d.split_seed)?)
}

/// Write the dataset unless an identical one is already there. Returns
/// whether anything was written.
pub fn gen_data(cfg: &RunConfig, paths: &Paths) -> Result<bool> {
    let stamp = DataStamp {
        dataset: dataset_digest(cfg)?,
    };
    if read_json::<DataStamp>(&paths.data_stamp()).as_ref() == Some(&stamp) && Dataset::load(&paths.data()).is_ok() {
        log::info!("dataset in {} is up to date; nothing to do", paths.data().display());
        return Ok(false);
    }
    let ds = build_dataset(cfg)?;
    ds.save(&paths.data())?;
    write(&paths.data_stamp(), serde_json::to_string_pretty(&stamp)?.as_bytes())?;
    log::info!("wrote {} samples to {}", ds.len(), paths.data().display());
    Ok(true)
}

pub fn load_dataset(cfg: &RunConfig, paths: &Paths) -> Result<Dataset> {
    let want = dataset_digest(cfg)?;
    match read_json::<DataStamp>(&paths.data_stamp()) {
        Some(s) if s.dataset == want => Ok(Dataset::load(&paths.data())?),
        Some(_) => Err(CliError::Prerequisite(
            "the dataset on disk was built from a different config; run gen-data first".into(),
        )),
        None => Err(CliError::Prerequisite(format!("no dataset in {}; run gen-data first", paths.data().display()))),
    }
}

// ---- target ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetStamp {
    pub dataset: String,
    pub config: String,
    pub params: String,
    pub test_accuracy: Option<f64>,
    pub train_accuracy: Vec<f64>,
    pub loss: Vec<f64>,
}

/// Architecture for `ds`, with sizes taken from the data.
pub fn arch_for(cfg: &RunConfig, ds: &Dataset) -> Result<ArchConfig> {
    match (cfg.target_kind(), &ds.inputs) {
        (TargetKind::ToyCnn, Inputs::Images { size, .. }) => {
            let mut c = cfg.target.cnn.clone();
            c.canvas_size = *size;
            c.outputs = ds.task.heads();
            Ok(ArchConfig::ToyCnn(c))
        }
        (TargetKind::TextTransformer, Inputs::Tokens { .. }) => {
            let mut t = cfg.target.transformer.clone();
            t.vocab_size = ds.vocab.as_ref().map_or(0, |v| v.len());
            t.classes = ds.task.classes();
            Ok(ArchConfig::TextTransformer(t))
        }
        (k, _) => Err(CliError::Config(format!("target kind {k:?} does not match the dataset"))),
    }
}

fn target_digest(cfg: &RunConfig, arch: &ArchConfig) -> String {
    digest(&serde_json::json!({ "arch": arch, "seed": cfg.target.seed, "train": cfg.target_train() }))
}

/// Train the target unless a matching checkpoint exists.
pub fn train_target(cfg: &RunConfig, paths: &Paths) -> Result<TargetStamp> {
    let ds = load_dataset(cfg, paths)?;
    let arch = arch_for(cfg, &ds)?;
    let dataset = dataset_digest(cfg)?;
    let config = target_digest(cfg, &arch);
    if let Some(s) = read_json::<TargetStamp>(&paths.target_stamp()) {
        if s.dataset == dataset && s.config == config && paths.target().exists() {
            log::info!("target checkpoint is up to date; nothing to do");
            return Ok(s);
        }
    }
    let mut model = targets::build_target(&arch, cfg.target.seed)?;
    let rep = targets::train_target(&mut model, &ds, &cfg.target_train())?;
    model.frozen = true;
    model.save(&paths.target())?;
    let stamp = TargetStamp {
        dataset,
        config,
        params: model.params_hash(),
        test_accuracy: rep.test_accuracy,
        train_accuracy: rep.epochs.iter().map(|e| e.train_accuracy).collect(),
        loss: rep.epochs.iter().map(|e| e.loss).collect(),
    };
    write(&paths.target_stamp(), serde_json::to_string_pretty(&stamp)?.as_bytes())?;
    if let Some(a) = rep.test_accuracy {
        log::info!("target test accuracy {a:.4}");
    }
    Ok(stamp)
}

/// The trained target in `f64`, checked against the current config.
pub fn load_target(cfg: &RunConfig, paths: &Paths, ds: &Dataset) -> Result<(TargetModel<f64>, TargetStamp)> {
    let arch = arch_for(cfg, ds)?;
    let want = target_digest(cfg, &arch);
    let stamp = match read_json::<TargetStamp>(&paths.target_stamp()) {
        Some(s) if s.config == want && s.dataset == dataset_digest(cfg)? => s,
        Some(_) => {
            return Err(CliError::Prerequisite(
                "the target checkpoint was trained with a different config; run train-target first".into(),
            ))
        }
        None => return Err(CliError::Prerequisite("no target checkpoint; run train-target first".into())),
    };
    let model = TargetModel::<f32>::load(&paths.target())?;
    Ok((model.cast::<f64>(), stamp))
}

pub fn split_of(cfg: &RunConfig, model: &TargetModel<f64>) -> Result<SplitPoint> {
    Ok(match cfg.concept.layer {
        Some(l) => model.split_point(l)?,
        None => model.default_split(),
    })
}

/// Activations of every sample in split `name`.
pub fn encode_split(model: &TargetModel<f64>, ds: &Dataset, name: &str, split: SplitPoint, batch_size: usize) -> Result<ActivationSet> {
    let idx = ds.split(name)?;
    log::info!("encoding {} '{name}' samples at layer {}", idx.len(), split.layer_index);
    Ok(encode_dataset(model, ds, idx, split.layer_index, batch_size)?)
}

// ---- concepts ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptStamp {
    pub target: String,
    pub config: String,
    pub warnings: Vec<String>,
}

fn concept_digest(cfg: &RunConfig, split: SplitPoint) -> String {
    digest(&serde_json::json!({ "concept": cfg.concept.concept_config(), "split": split }))
}

/// Fit a fresh concept model on cached activations.
pub fn fit_concepts(head: &dyn targets::Head, acts: &ActivationSet, cc: &ConceptConfig) -> Result<TrainOutcome> {
    let model = init_model(head, cc)?;
    Ok(train_concepts(model, head, acts, cc)?)
}

pub fn train_concepts_stage(cfg: &RunConfig, paths: &Paths) -> Result<TrainOutcome> {
    let ds = load_dataset(cfg, paths)?;
    let (target, stamp) = load_target(cfg, paths, &ds)?;
    let split = split_of(cfg, &target)?;
    let (_, head) = target.split_at(split.layer_index)?;
    let acts = encode_split(&target, &ds, "train", split, cfg.concept.eval_batch_size)?;
    let out = fit_concepts(&head, &acts, &cfg.concept.concept_config())?;
    out.model.save(&paths.concept_model())?;
    write(&paths.history(), hiconcept_core::trainer::history_csv(&out.history).as_bytes())?;
    let cs = ConceptStamp {
        target: stamp.params,
        config: concept_digest(cfg, split),
        warnings: out.warnings.clone(),
    };
    write(&paths.concept_stamp(), serde_json::to_string_pretty(&cs)?.as_bytes())?;
    if let Some(last) = out.history.last() {
        log::info!("final holdout RAcc {:.4}", last.racc);
    }
    Ok(out)
}

pub fn load_concepts(cfg: &RunConfig, paths: &Paths, target: &TargetStamp, split: SplitPoint) -> Result<ConceptModel> {
    match read_json::<ConceptStamp>(&paths.concept_stamp()) {
        Some(s) if s.target == target.params && s.config == concept_digest(cfg, split) => {}
        Some(_) => {
            return Err(CliError::Prerequisite(
                "the concept checkpoint does not match the current config; run train-concepts first".into(),
            ))
        }
        None => return Err(CliError::Prerequisite("no concept checkpoint; run train-concepts first".into())),
    }
    Ok(ConceptModel::load(&paths.concept_model())?)
}

// ---- scoring ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterSummary {
    pub epsilon: f64,
    pub deactivated: Vec<usize>,
    pub restored: Vec<usize>,
    pub racc_before: f64,
    pub racc_after: f64,
}

/// A filtered model and its scores on one evaluation set.
#[derive(Debug, Clone)]
pub struct Scored {
    pub model: ConceptModel,
    pub filter: FilterSummary,
    pub report: MetricsReport,
}

/// Switch off low-impact concepts, then score what is left.
pub fn score(model: &ConceptModel, head: &dyn targets::Head, acts: &ActivationSet, epsilon: f64, batch_size: usize) -> Result<Scored> {
    let FilterOutcome {
        model,
        deactivated,
        restored,
        racc_before,
        racc_after,
        ..
    } = filter_concepts(model, head, acts, epsilon, batch_size)?;
    let report = evaluate_concepts(&model, head, acts, batch_size)?;
    Ok(Scored {
        model,
        filter: FilterSummary {
            epsilon,
            deactivated,
            restored,
            racc_before,
            racc_after,
        },
        report,
    })
}

/// Sample-level concept probabilities `[N][n]` over an activation set.
pub fn sample_probs(model: &ConceptModel, acts: &ActivationSet, batch_size: usize) -> Vec<Vec<f64>> {
    let idx: Vec<usize> = (0..acts.len()).collect();
    idx.chunks(batch_size.max(1))
        .flat_map(|c| sample_concept_probs(model, &acts.batch(c)))
        .collect()
}

/// Indices of the `k` samples with the highest probability for `concept`.
pub fn top_examples(probs: &[Vec<f64>], concept: usize, k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..probs.len()).filter(|&i| probs[i][concept] > 0.0).collect();
    idx.sort_by(|&a, &b| probs[b][concept].total_cmp(&probs[a][concept]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Per-concept keyword scores over `docs`: mean per-token probability at
/// token-level splits, probability-weighted mean saliency otherwise.
pub fn keyword_scores(
    model: &ConceptModel,
    enc: &dyn hiconcept_core::attribution::TokenEncoder,
    acts: &ActivationSet,
    docs: &[&[u32]],
    vocab_len: usize,
    max_docs: usize,
    batch_size: usize,
) -> Result<Vec<Vec<(f64, f64)>>> {
    let n = model.n();
    // (weighted sum, weight) per concept per token id.
    let mut acc = vec![vec![(0.0, 0.0); vocab_len]; n];
    let reported = model.reported();
    match acts.split.granularity {
        Granularity::TokenLevel => {
            let idx: Vec<usize> = (0..acts.len()).collect();
            for chunk in idx.chunks(batch_size.max(1)) {
                let b = acts.batch(chunk);
                let p = model.concept_probs(&b);
                let t = p.shape()[1];
                for (r, &i) in chunk.iter().enumerate() {
                    for (j, &tok) in docs[i].iter().enumerate() {
                        let row = &p.data()[(r * t + j) * n..(r * t + j + 1) * n];
                        for &c in &reported {
                            let e = &mut acc[c][tok as usize];
                            e.0 += row[c];
                            e.1 += 1.0;
                        }
                    }
                }
            }
        }
        Granularity::SequenceLevel => {
            let m = docs.len().min(max_docs);
            let probs = sample_probs(model, &acts.select(&(0..m).collect::<Vec<_>>()), batch_size);
            for &c in &reported {
                let rows: Vec<usize> = (0..m).filter(|&i| probs[i][c] > 0.0).collect();
                for chunk in rows.chunks(64) {
                    let sub: Vec<&[u32]> = chunk.iter().map(|&i| docs[i]).collect();
                    let res = saliency_batch(model, enc, &sub, &vec![c; chunk.len()], Method::GradInput)?;
                    for (&i, r) in chunk.iter().zip(res) {
                        if r.uniform_fallback {
                            continue;
                        }
                        let w = probs[i][c];
                        for (&tok, s) in docs[i].iter().zip(&r.scores) {
                            let e = &mut acc[c][tok as usize];
                            e.0 += w * s;
                            e.1 += w;
                        }
                    }
                }
            }
        }
    }
    Ok(acc)
}

/// Rank tokens by score, dropping special ids and rare tokens. Ties go to
/// the lower id.
pub fn top_keywords(scores: &[(f64, f64)], counts: &[usize], min_count: usize, k: usize) -> Vec<u32> {
    let mut ids: Vec<u32> = (2..scores.len() as u32)
        .filter(|&t| scores[t as usize].1 > 0.0 && counts[t as usize] >= min_count)
        .collect();
    let val = |t: u32| {
        let (s, w) = scores[t as usize];
        s / w
    };
    ids.sort_by(|&a, &b| val(b).total_cmp(&val(a)).then(a.cmp(&b)));
    ids.truncate(k);
    ids
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub sample: usize,
    pub probability: f64,
    pub label: Vec<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tokens: Option<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub token_impact: Option<Vec<f64>>,
    /// Shapes present in a toy image (1-based).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub shapes: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptEntry {
    pub index: usize,
    pub impact: f64,
    pub delta_acc: f64,
    pub keywords: Vec<String>,
    pub examples: Vec<Example>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptsFile {
    pub split: SplitPoint,
    pub concepts: Vec<ConceptEntry>,
    pub deactivated: Vec<usize>,
}

/// Everything `evaluate` writes.
pub struct Evaluation {
    pub metrics: serde_json::Value,
    pub concepts: ConceptsFile,
    pub scored: Scored,
}

pub fn evaluate(cfg: &RunConfig, paths: &Paths) -> Result<Evaluation> {
    let ds = load_dataset(cfg, paths)?;
    let (target, stamp) = load_target(cfg, paths, &ds)?;
    let split = split_of(cfg, &target)?;
    let model = load_concepts(cfg, paths, &stamp, split)?;
    let (enc, head) = target.split_at(split.layer_index)?;
    let bs = cfg.concept.eval_batch_size;
    let test_idx = ds.split("test")?.to_vec();
    let acts = encode_split(&target, &ds, "test", split, bs)?;
    let mut scored = score(&model, &head, &acts, cfg.concept.filter_epsilon, bs)?;
    let ev = &cfg.evaluate;
    let rep_cfg = &cfg.report;
    let probs = sample_probs(&scored.model, &acts, bs);
    let active = scored.model.reported();

    let mut keywords: Vec<Vec<u32>> = vec![Vec::new(); scored.model.n()];
    let mut examples: Vec<Vec<Example>> = vec![Vec::new(); scored.model.n()];
    let text = ds.is_text();
    if text && ev.attribution == Method::TokenSimilarity && split.granularity != Granularity::TokenLevel {
        return Err(CliError::Config(
            "evaluate.attribution = \"token_similarity\" needs a token-level concept.layer".into(),
        ));
    }
    for &c in &active {
        for i in top_examples(&probs, c, rep_cfg.examples_per_concept) {
            let s = test_idx[i];
            let mut ex = Example {
                sample: s,
                probability: probs[i][c],
                label: ds.label(s).to_vec(),
                tokens: None,
                token_impact: None,
                shapes: None,
            };
            if let Inputs::Images { latents, .. } = &ds.inputs {
                ex.shapes = Some((0..datagen::toy::NUM_SHAPES).filter(|b| latents[s] >> b & 1 == 1).map(|b| b + 1).collect());
            }
            examples[c].push(ex);
        }
    }
    if text {
        let vocab = ds.vocab.as_ref().expect("text vocabulary");
        let docs: Vec<&[u32]> = test_idx.iter().map(|&i| ds.tokens(i)).collect();
        let mut counts = vec![0usize; vocab.len()];
        for d in &docs {
            for &t in *d {
                counts[t as usize] += 1;
            }
        }
        let scores = keyword_scores(&scored.model, &enc, &acts, &docs, vocab.len(), ev.keyword_docs, bs)?;
        for &c in &active {
            keywords[c] = top_keywords(&scores[c], &counts, ev.min_keyword_count, rep_cfg.top_keywords_per_concept);
        }
        // Token impact for every shown example, one batch.
        let shown: Vec<(usize, usize)> = active
            .iter()
            .flat_map(|&c| (0..examples[c].len()).map(move |j| (c, j)))
            .collect();
        let ex_docs: Vec<&[u32]> = shown.iter().map(|&(c, j)| ds.tokens(examples[c][j].sample)).collect();
        let mut impacts = Vec::new();
        for chunk in ex_docs.chunks(64) {
            impacts.extend(token_impact_batch(&scored.model, &enc, chunk, ev.attribution, ev.top_concepts)?);
        }
        for (&(c, j), imp) in shown.iter().zip(impacts) {
            let e = &mut examples[c][j];
            e.tokens = Some(ds.tokens(e.sample).iter().map(|&t| vocab.token(t).to_string()).collect());
            e.token_impact = Some(imp);
        }
        if ev.coherence {
            let corpus: Vec<Vec<u32>> = docs.iter().map(|d| d.to_vec()).collect();
            let kw: Vec<Vec<u32>> = active.iter().map(|&c| keywords[c].clone()).filter(|k| !k.is_empty()).collect();
            scored.report.coherence = Some(coherence(&corpus, &kw, ev.coherence_window));
        }
    }

    let r = &scored.report;
    let mut m = serde_json::Map::new();
    m.insert("split".into(), serde_json::to_value(split)?);
    m.insert("target_test_accuracy".into(), serde_json::to_value(stamp.test_accuracy)?);
    m.insert("racc".into(), r.racc.into());
    m.insert("effective_concepts".into(), r.effective_concepts.into());
    if ev.impact {
        m.insert("avg_impact".into(), r.avg_impact.into());
        m.insert("per_concept_impact".into(), serde_json::to_value(&r.per_concept_impact)?);
    }
    if ev.delta_acc {
        m.insert("delta_acc".into(), r.delta_acc.into());
        m.insert("per_concept_delta_acc".into(), serde_json::to_value(&r.per_concept_delta_acc)?);
    }
    if let Some(c) = &r.coherence {
        m.insert("coherence".into(), serde_json::to_value(c)?);
    }
    m.insert("filter".into(), serde_json::to_value(&scored.filter)?);
    let concepts = ConceptsFile {
        split,
        concepts: active
            .iter()
            .map(|&c| ConceptEntry {
                index: c,
                impact: r.per_concept_impact[c],
                delta_acc: r.per_concept_delta_acc[c],
                keywords: keywords[c]
                    .iter()
                    .map(|&t| ds.vocab.as_ref().map_or(String::new(), |v| v.token(t).to_string()))
                    .collect(),
                examples: std::mem::take(&mut examples[c]),
            })
            .collect(),
        deactivated: scored.filter.deactivated.clone(),
    };
    Ok(Evaluation {
        metrics: serde_json::Value::Object(m),
        concepts,
        scored,
    })
}

/// One row of `ablation.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda_e: f64,
    pub lambda_c: f64,
    pub beta: f64,
    pub use_rec: bool,
    pub racc: f64,
    pub avg_impact: f64,
    pub delta_acc: f64,
    pub effective_concepts: usize,
    pub racc_before_filter: f64,
}

pub fn ablate(cfg: &RunConfig, paths: &Paths) -> Result<Vec<AblationRow>> {
    let ds = load_dataset(cfg, paths)?;
    let (target, _) = load_target(cfg, paths, &ds)?;
    let split = split_of(cfg, &target)?;
    let (_, head) = target.split_at(split.layer_index)?;
    let bs = cfg.concept.eval_batch_size;
    let train = encode_split(&target, &ds, "train", split, bs)?;
    let test = encode_split(&target, &ds, "test", split, bs)?;
    let base = cfg.concept.concept_config();
    let mut rows = Vec::new();
    for name in hiconcept_core::baselines::ABLATIONS {
        let ab = hiconcept_core::baselines::make_ablation_config(name)?;
        let cc = ab.apply(&base);
        log::info!("ablation '{name}'");
        let out = fit_concepts(&head, &train, &cc)?;
        let s = score(&out.model, &head, &test, cfg.concept.filter_epsilon, bs)?;
        rows.push(AblationRow {
            name: name.to_string(),
            lambda1: cc.weights.lambda1,
            lambda2: cc.weights.lambda2,
            lambda_e: cc.weights.lambda_e,
            lambda_c: cc.weights.lambda_c,
            beta: out.model.beta,
            use_rec: cc.use_rec,
            racc: s.report.racc,
            avg_impact: s.report.avg_impact,
            delta_acc: s.report.delta_acc,
            effective_concepts: s.report.effective_concepts,
            racc_before_filter: s.filter.racc_before,
        });
    }
    Ok(rows)
}

pub fn history_rows(path: &Path) -> Option<Vec<HistoryRow>> {
    let mut r = csv::Reader::from_path(path).ok()?;
    r.deserialize().collect::<std::result::Result<Vec<HistoryRow>, _>>().ok()
}
