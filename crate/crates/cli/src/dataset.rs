//! Prompt datasets: line-delimited JSON with `system` and `question`
//! fields.

use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptRecord {
    #[serde(default)]
    pub system: String,
    pub question: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<String>,
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("reading {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("line {line}: {source}")]
    Parse { line: usize, source: serde_json::Error },
    #[error("line {line}: question is empty")]
    EmptyQuestion { line: usize },
    #[error("dataset has no records")]
    Empty,
}

/// Parses every non-blank line. Line numbers in errors are 1-based.
pub fn parse_dataset(text: &str) -> Result<Vec<PromptRecord>, DatasetError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: PromptRecord =
            serde_json::from_str(line).map_err(|source| DatasetError::Parse { line: i + 1, source })?;
        if rec.question.trim().is_empty() {
            return Err(DatasetError::EmptyQuestion { line: i + 1 });
        }
        out.push(rec);
    }
    if out.is_empty() {
        return Err(DatasetError::Empty);
    }
    Ok(out)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<PromptRecord>, DatasetError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|source| DatasetError::Io { path: path.display().to_string(), source })?;
    parse_dataset(&text)
}

/// Picks `n` prompts. A larger dataset is sampled without replacement in
/// file order; a smaller one is cycled.
pub fn sample_prompts(records: &[PromptRecord], n: usize, seed: u64) -> Vec<PromptRecord> {
    if records.is_empty() {
        return Vec::new();
    }
    if records.len() <= n {
        return records.iter().cycle().take(n).cloned().collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = index::sample(&mut rng, records.len(), n).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| records[i].clone()).collect()
}

/// Stand-in prompts for runs without a dataset file.
pub fn synthetic(n: usize) -> Vec<PromptRecord> {
    (0..n)
        .map(|i| PromptRecord {
            system: "You are a helpful assistant.".into(),
            question: format!("Question {i}: explain how a gateway routes each request to one replica under load."),
            response: None,
        })
        .collect()
}
