//! JSONL corpus ingestion and the token vocabulary.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::Deserialize;

use super::{Dataset, Inputs, Task};
use crate::{Error, Result};

pub const MAX_LEN: usize = 512;
pub const PAD: u32 = 0;
pub const UNK: u32 = 1;

/// Token table. Ids 0 and 1 are reserved for padding and unknown tokens;
/// the rest are assigned in order of first appearance.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Default for Vocab {
    fn default() -> Self {
        let mut v = Self {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        v.insert("<pad>");
        v.insert("<unk>");
        v
    }
}

impl Vocab {
    pub fn insert(&mut self, tok: &str) -> u32 {
        if let Some(&id) = self.index.get(tok) {
            return id;
        }
        let id = self.tokens.len() as u32;
        self.tokens.push(tok.to_string());
        self.index.insert(tok.to_string(), id);
        id
    }

    pub fn id(&self, tok: &str) -> u32 {
        self.index.get(tok).copied().unwrap_or(UNK)
    }

    pub fn get(&self, tok: &str) -> Option<u32> {
        self.index.get(tok).copied()
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(|t| t.to_lowercase()).collect()
}

#[derive(Deserialize)]
struct Record {
    text: String,
    label: i64,
}

/// Build a multiclass text dataset from tokenized documents, truncating to
/// [`MAX_LEN`] tokens.
pub fn build_text_dataset(docs: Vec<Vec<String>>, labels: Vec<u32>) -> Result<Dataset> {
    let classes = labels.iter().copied().max().map_or(0, |m| m as usize + 1);
    if classes < 2 {
        return Err(Error::Invalid(format!("text corpus needs at least 2 classes, found {classes}")));
    }
    let mut vocab = Vocab::default();
    let ids = docs
        .into_iter()
        .map(|d| d.iter().take(MAX_LEN).map(|t| vocab.insert(t)).collect())
        .collect();
    Ok(Dataset {
        task: Task::Multiclass { classes },
        inputs: Inputs::Tokens { docs: ids },
        labels,
        vocab: Some(vocab),
        metadata: serde_json::json!({ "source": "jsonl" }),
        splits: BTreeMap::new(),
    })
}

/// Read a JSONL file of `{"text": ..., "label": ...}` records.
pub fn load_corpus(path: &Path) -> Result<Dataset> {
    let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut docs = Vec::new();
    let mut labels = Vec::new();
    for (i, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let rec: Record = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
        if rec.label < 0 || rec.label > u32::MAX as i64 {
            return Err(parse_err(format!("label {} is not a class index", rec.label)));
        }
        let toks = tokenize(&rec.text);
        if toks.is_empty() {
            return Err(parse_err("empty text".into()));
        }
        docs.push(toks);
        labels.push(rec.label as u32);
    }
    if docs.is_empty() {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            message: "corpus is empty".into(),
        });
    }
    let mut ds = build_text_dataset(docs, labels)?;
    ds.metadata = serde_json::json!({ "source": "jsonl", "path": path.display().to_string() });
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(contents: &str) -> tempfile::NamedTempFile {
        use std::io::Write;
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn two_valid_lines() {
        let f = write("{\"text\": \"Good movie\", \"label\": 1}\n{\"text\": \"bad  MOVIE\", \"label\": 0}\n");
        let ds = load_corpus(f.path()).unwrap();
        assert_eq!(ds.len(), 2);
        let v = ds.vocab.as_ref().unwrap();
        assert_eq!(ds.tokens(1), &[v.id("bad"), v.id("movie")]);
        assert_eq!(v.id("movie"), v.id("movie"));
        assert_eq!(v.id("unseen"), UNK);
    }

    #[test]
    fn missing_label_names_line() {
        let f = write("{\"text\": \"no label here\"}\n");
        let err = load_corpus(f.path()).unwrap_err().to_string();
        assert!(err.contains("line 1"), "{err}");
    }

    #[test]
    fn empty_file_rejected() {
        let f = write("");
        assert!(load_corpus(f.path()).is_err());
    }

    #[test]
    fn long_documents_truncated() {
        let text = (0..600).map(|i| format!("w{i}")).collect::<Vec<_>>().join(" ");
        let f = write(&format!(
            "{}\n{}\n",
            serde_json::json!({"text": text, "label": 0}),
            serde_json::json!({"text": "x", "label": 1})
        ));
        let ds = load_corpus(f.path()).unwrap();
        assert_eq!(ds.tokens(0).len(), MAX_LEN);
    }
}
