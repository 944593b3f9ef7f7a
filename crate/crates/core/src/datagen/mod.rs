//! Synthetic benchmarks and corpus ingestion.

pub mod corpus;
mod glyphs;
pub mod rules;
pub mod text;
pub mod toy;

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Container;
use crate::rng::{derived_rng, stream};
use crate::{Error, Result};
pub use corpus::{load_corpus, Vocab, MAX_LEN};
pub use text::{gen_synthetic_text, TextCorpusSpec};
pub use toy::{gen_toy_dataset, sample_toy_latents, ToyConfig};

/// Output structure of a classification task: `heads` independent
/// categorical outputs with `classes` classes each. Multilabel binary tasks
/// have one two-class head per label; multiclass tasks have a single head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Task {
    MultilabelBinary { labels: usize },
    Multiclass { classes: usize },
}

impl Task {
    pub fn heads(&self) -> usize {
        match self {
            Task::MultilabelBinary { labels } => *labels,
            Task::Multiclass { .. } => 1,
        }
    }

    pub fn classes(&self) -> usize {
        match self {
            Task::MultilabelBinary { .. } => 2,
            Task::Multiclass { classes } => *classes,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Inputs {
    /// RGB images, `u8` HWC, `size x size`, with the latent bits that produced them.
    Images {
        size: usize,
        pixels: Vec<u8>,
        latents: Vec<u16>,
    },
    Tokens {
        docs: Vec<Vec<u32>>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub task: Task,
    pub inputs: Inputs,
    /// `heads` label values per sample, flattened.
    pub labels: Vec<u32>,
    pub vocab: Option<Vocab>,
    pub metadata: serde_json::Value,
    pub splits: BTreeMap<String, Vec<usize>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len() / self.task.heads()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn label(&self, i: usize) -> &[u32] {
        let k = self.task.heads();
        &self.labels[i * k..(i + 1) * k]
    }

    pub fn image(&self, i: usize) -> &[u8] {
        match &self.inputs {
            Inputs::Images { size, pixels, .. } => {
                let n = size * size * 3;
                &pixels[i * n..(i + 1) * n]
            }
            Inputs::Tokens { .. } => panic!("image() on a text dataset"),
        }
    }

    pub fn tokens(&self, i: usize) -> &[u32] {
        match &self.inputs {
            Inputs::Tokens { docs } => &docs[i],
            Inputs::Images { .. } => panic!("tokens() on an image dataset"),
        }
    }

    pub fn is_text(&self) -> bool {
        matches!(self.inputs, Inputs::Tokens { .. })
    }

    pub fn split(&self, name: &str) -> Result<&[usize]> {
        self.splits
            .get(name)
            .map(|v| v.as_slice())
            .ok_or_else(|| Error::Invalid(format!("dataset has no '{name}' split")))
    }

    /// Persist under `dir`. Image sets go into an `HICPT1` arrays file; text
    /// sets are written as JSONL (plus `ground_truth.json` when present).
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut meta = serde_json::json!({
            "task": self.task,
            "splits": self.splits,
            "generator": self.metadata,
        });
        match &self.inputs {
            Inputs::Images { size, pixels, latents } => {
                meta["format"] = "toy_arrays".into();
                let k = self.task.heads();
                let mut c = Container::new("toy_dataset", serde_json::json!({ "size": size }));
                c.put_u8("images", &[self.len(), *size, *size, 3], pixels);
                c.put_u16("z", &[latents.len()], latents);
                c.put_u32("y", &[self.len(), k], &self.labels);
                c.save(&dir.join("arrays.hicpt"))?;
            }
            Inputs::Tokens { docs } => {
                meta["format"] = "jsonl".into();
                let vocab = self.vocab.as_ref().expect("text dataset has a vocabulary");
                let mut out = String::new();
                for (i, doc) in docs.iter().enumerate() {
                    let text: Vec<&str> = doc.iter().map(|&t| vocab.token(t)).collect();
                    let line = serde_json::json!({ "text": text.join(" "), "label": self.label(i)[0] });
                    out.push_str(&line.to_string());
                    out.push('\n');
                }
                write_file(&dir.join("corpus.jsonl"), out.as_bytes())?;
                if let Some(gt) = self.metadata.get("ground_truth") {
                    write_file(&dir.join("ground_truth.json"), serde_json::to_string(gt)?.as_bytes())?;
                }
            }
        }
        write_file(&dir.join("metadata.json"), serde_json::to_string_pretty(&meta)?.as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join("metadata.json");
        let raw = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: serde_json::Value = serde_json::from_str(&raw)?;
        let task: Task = serde_json::from_value(meta["task"].clone())?;
        let splits: BTreeMap<String, Vec<usize>> = serde_json::from_value(meta["splits"].clone())?;
        let generator = meta["generator"].clone();
        let mut ds = match meta["format"].as_str() {
            Some("toy_arrays") => {
                let path = dir.join("arrays.hicpt");
                let c = Container::load(&path)?;
                c.expect_kind("toy_dataset", &path)?;
                let (shape, pixels) = c.u8s("images")?;
                let (_, latents) = c.u16s("z")?;
                let (_, labels) = c.u32s("y")?;
                Dataset {
                    task,
                    inputs: Inputs::Images {
                        size: shape[1],
                        pixels,
                        latents,
                    },
                    labels,
                    vocab: None,
                    metadata: generator,
                    splits: BTreeMap::new(),
                }
            }
            Some("jsonl") => {
                let mut ds = load_corpus(&dir.join("corpus.jsonl"))?;
                ds.task = task;
                ds.metadata = generator;
                ds
            }
            other => return Err(Error::Invalid(format!("{}: unknown dataset format {other:?}", meta_path.display()))),
        };
        ds.splits = splits;
        Ok(ds)
    }
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn split_names(k: usize) -> Vec<String> {
    match k {
        1 => vec!["train".into()],
        2 => vec!["train".into(), "test".into()],
        3 => vec!["train".into(), "val".into(), "test".into()],
        _ => (0..k).map(|i| format!("part{i}")).collect(),
    }
}

/// Shuffle under `seed` and cut into named parts (`train`/`test` for two
/// fractions, `train`/`val`/`test` for three). Sizes are floored and the
/// remainder goes to the first part.
pub fn split_dataset(mut ds: Dataset, fractions: &[f64], seed: u64) -> Result<Dataset> {
    if fractions.is_empty() {
        return Err(Error::Invalid("no split fractions given".into()));
    }
    for &f in fractions {
        if !(f > 0.0 && f <= 1.0) {
            return Err(Error::Invalid(format!("split fraction {f} outside (0, 1]")));
        }
    }
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Invalid(format!("split fractions sum to {total}, expected 1")));
    }
    let n = ds.len();
    let mut sizes: Vec<usize> = fractions.iter().map(|f| (f * n as f64).floor() as usize).collect();
    let assigned: usize = sizes.iter().sum();
    sizes[0] += n - assigned;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut derived_rng(seed, stream::SPLIT));
    ds.splits.clear();
    let mut start = 0;
    for (name, size) in split_names(fractions.len()).into_iter().zip(sizes) {
        let mut part = order[start..start + size].to_vec();
        part.sort_unstable();
        ds.splits.insert(name, part);
        start += size;
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(n: usize) -> Dataset {
        Dataset {
            task: Task::Multiclass { classes: 2 },
            inputs: Inputs::Tokens {
                docs: vec![vec![2]; n],
            },
            labels: vec![0; n],
            vocab: None,
            metadata: serde_json::Value::Null,
            splits: BTreeMap::new(),
        }
    }

    #[test]
    fn floor_allocation_with_remainder_first() {
        let ds = split_dataset(tiny(10), &[0.8, 0.2], 0).unwrap();
        assert_eq!((ds.splits["train"].len(), ds.splits["test"].len()), (8, 2));
        let ds = split_dataset(tiny(10), &[0.75, 0.25], 0).unwrap();
        // floor(7.5)=7, floor(2.5)=2, remainder 1 goes to the first part
        assert_eq!((ds.splits["train"].len(), ds.splits["test"].len()), (8, 2));
    }

    #[test]
    fn splits_are_deterministic_disjoint_and_cover() {
        let a = split_dataset(tiny(57), &[0.5, 0.3, 0.2], 4).unwrap();
        let b = split_dataset(tiny(57), &[0.5, 0.3, 0.2], 4).unwrap();
        assert_eq!(a.splits, b.splits);
        let mut all: Vec<usize> = a.splits.values().flatten().copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..57).collect::<Vec<_>>());
    }

    #[test]
    fn bad_fractions_rejected() {
        assert!(split_dataset(tiny(10), &[0.0, 1.0], 0).is_err());
        assert!(split_dataset(tiny(10), &[1.2, -0.2], 0).is_err());
        assert!(split_dataset(tiny(10), &[0.5, 0.4], 0).is_err());
    }
}
