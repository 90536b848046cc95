//! Corpus ingestion: feature extraction, vocabularies and fixed-length
//! encoding of description/code pairs.

mod encode;
mod extract;
mod ingest;
mod split;
mod vocab;

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use encode::{
    encode_code, encode_pair, encode_query, encode_record, EncodedCode, EncodedPair, EncodedRecord, EncodedSeq,
    SeqLengths, Truncation,
};
pub use extract::{extract_features, leading_comment, normalize_description, normalize_tokens};
pub use ingest::{
    build_dataset, ingest_file, ingest_lines, read_dataset, read_vocabs, write_dataset, Dataset, Field, IngestOutput,
    IngestReport, RawRecord, CODE_VOCAB_FILE, DATASET_FILE, DESC_VOCAB_FILE, META_FILE, REPORT_FILE,
};
pub use split::split_camel;
pub use vocab::{build_vocab, Vocabularies, Vocabulary, PAD, UNK};

const JAVA_KEYWORDS: &str = include_str!("../../data/java_keywords.txt");
const STOPWORDS: &str = include_str!("../../data/stopwords.txt");

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("no records")]
    NoRecords,
    #[error("malformed dataset line {line}: {message}")]
    Malformed { line: usize, message: String },
}

impl CorpusError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

/// Why a raw method was not turned into a record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    Unparseable,
    EmptyName,
    EmptyApi,
    EmptyBody,
    EmptyDescription,
}

impl DropReason {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Unparseable => "unparseable",
            Self::EmptyName => "empty_name",
            Self::EmptyApi => "empty_api",
            Self::EmptyBody => "empty_body",
            Self::EmptyDescription => "empty_description",
        }
    }
}

/// Keyword and stopword lists applied to body tokens.
#[derive(Debug, Clone)]
pub struct TokenFilter {
    keywords: HashSet<String>,
    stopwords: HashSet<String>,
}

fn word_list(text: &str) -> HashSet<String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_lowercase)
        .collect()
}

impl Default for TokenFilter {
    /// The 50 reserved Java words and a small English stopword list.
    fn default() -> Self {
        Self {
            keywords: word_list(JAVA_KEYWORDS),
            stopwords: word_list(STOPWORDS),
        }
    }
}

impl TokenFilter {
    pub fn new(keywords: HashSet<String>, stopwords: HashSet<String>) -> Self {
        Self { keywords, stopwords }
    }

    /// Replaces either list with the contents of a one-word-per-line file.
    pub fn with_files(mut self, keywords: Option<&Path>, stopwords: Option<&Path>) -> Result<Self, CorpusError> {
        if let Some(p) = keywords {
            self.keywords = word_list(&std::fs::read_to_string(p).map_err(|e| CorpusError::io(p, e))?);
        }
        if let Some(p) = stopwords {
            self.stopwords = word_list(&std::fs::read_to_string(p).map_err(|e| CorpusError::io(p, e))?);
        }
        Ok(self)
    }

    pub fn is_keyword(&self, word: &str) -> bool {
        self.keywords.contains(word)
    }

    pub fn keeps(&self, word: &str) -> bool {
        !self.keywords.contains(word) && !self.stopwords.contains(word)
    }

    pub fn keyword_count(&self) -> usize {
        self.keywords.len()
    }
}

/// One method described by its three code features and its description.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeRecord {
    pub id: String,
    pub method_name: String,
    pub method_name_tokens: Vec<String>,
    pub api_sequence_tokens: Vec<String>,
    pub body_tokens: Vec<String>,
    pub description_tokens: Vec<String>,
    pub raw_source: Option<String>,
}

impl CodeRecord {
    /// Checks the non-empty invariant, reporting the first failing field.
    pub fn validate(&self) -> Result<(), DropReason> {
        if self.method_name_tokens.is_empty() {
            Err(DropReason::EmptyName)
        } else if self.body_tokens.is_empty() {
            Err(DropReason::EmptyBody)
        } else if self.api_sequence_tokens.is_empty() {
            Err(DropReason::EmptyApi)
        } else if self.description_tokens.is_empty() {
            Err(DropReason::EmptyDescription)
        } else {
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_keyword_list_has_fifty_entries() {
        assert_eq!(TokenFilter::default().keyword_count(), 50);
    }
}
