//! Blocklist content filter: case-insensitive substring matching.

use std::path::Path;
use std::sync::Arc;

/// Cheap to clone; the term list is shared.
#[derive(Debug, Clone, Default)]
pub struct ContentFilter {
    terms: Arc<[String]>,
    longest: usize,
}

impl ContentFilter {
    pub fn new<I, S>(terms: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let terms: Vec<String> =
            terms.into_iter().map(|t| t.as_ref().trim().to_lowercase()).filter(|t| !t.is_empty()).collect();
        let longest = terms.iter().map(|t| t.chars().count()).max().unwrap_or(0);
        Self { terms: terms.into(), longest }
    }

    /// One term per line; blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Self {
        Self::new(text.lines().filter(|l| !l.trim_start().starts_with('#')))
    }

    pub fn load(path: impl AsRef<Path>) -> std::io::Result<Self> {
        Ok(Self::parse(&std::fs::read_to_string(path)?))
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    /// The first blocklisted term contained in `text`.
    pub fn check(&self, text: &str) -> Option<&str> {
        if self.terms.is_empty() {
            return None;
        }
        let lower = text.to_lowercase();
        self.terms.iter().find(|t| lower.contains(t.as_str())).map(String::as_str)
    }

    pub fn stream(&self) -> StreamFilter {
        StreamFilter { filter: self.clone(), tail: String::new() }
    }
}

/// Filters text that arrives in pieces. Keeps just enough of the previous
/// pieces to catch a term split across a boundary.
#[derive(Debug)]
pub struct StreamFilter {
    filter: ContentFilter,
    tail: String,
}

impl StreamFilter {
    /// Feeds the next piece; returns the matched term if the text seen so
    /// far now contains one.
    pub fn push(&mut self, piece: &str) -> Option<String> {
        if self.filter.terms.is_empty() {
            return None;
        }
        let mut window = std::mem::take(&mut self.tail);
        window.push_str(&piece.to_lowercase());
        let hit = self.filter.terms.iter().find(|t| window.contains(t.as_str())).cloned();
        let keep = self.filter.longest.saturating_sub(1);
        let skip = window.chars().count().saturating_sub(keep);
        self.tail = window.chars().skip(skip).collect();
        hit
    }
}
