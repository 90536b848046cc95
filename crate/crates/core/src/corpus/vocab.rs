use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::Path;

use super::{CodeRecord, CorpusError};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
const PAD_WORD: &str = "<pad>";
const UNK_WORD: &str = "<unk>";

/// Bidirectional word/id table. Ids are dense; 0 and 1 are PAD and UNK.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::from_words(Vec::<String>::new())
    }
}

impl Vocabulary {
    /// Table with the two sentinels followed by `words` in order.
    pub fn from_words<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut v = Self {
            words: vec![PAD_WORD.to_string(), UNK_WORD.to_string()],
            index: HashMap::new(),
        };
        for w in words {
            let w = w.into();
            if !v.index.contains_key(&w) && w != PAD_WORD && w != UNK_WORD {
                v.index.insert(w.clone(), v.words.len());
                v.words.push(w);
            }
        }
        v
    }

    /// Most frequent first, ties broken lexicographically. Words seen fewer
    /// than `min_frequency` times are dropped; `max_size` caps the total size
    /// including the sentinels.
    pub fn from_counts(counts: &BTreeMap<String, usize>, min_frequency: usize, max_size: Option<usize>) -> Self {
        let mut ranked: Vec<(&String, usize)> = counts
            .iter()
            .filter(|(_, c)| **c >= min_frequency.max(1))
            .map(|(w, c)| (w, *c))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let cap = max_size.map_or(usize::MAX, |m| m.saturating_sub(2));
        Self::from_words(ranked.into_iter().take(cap).map(|(w, _)| w.clone()))
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Id of `word`, or UNK.
    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(word)
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    /// Non-sentinel words in id order.
    pub fn words(&self) -> &[String] {
        &self.words[2..]
    }

    /// One word per line; the first line holds id 2.
    pub fn write(&self, path: &Path) -> Result<(), CorpusError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| CorpusError::io(path, e))?);
        for w in self.words() {
            writeln!(f, "{w}").map_err(|e| CorpusError::io(path, e))?;
        }
        f.flush().map_err(|e| CorpusError::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self, CorpusError> {
        let text = std::fs::read_to_string(path).map_err(|e| CorpusError::io(path, e))?;
        Ok(Self::from_words(text.lines().filter(|l| !l.is_empty())))
    }
}

/// Code-side vocabulary (shared by name, API and token fields) and
/// description-side vocabulary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabularies {
    pub code: Vocabulary,
    pub desc: Vocabulary,
}

pub fn build_vocab(records: &[CodeRecord], min_frequency: usize, max_size: Option<usize>) -> Vocabularies {
    let mut code = BTreeMap::new();
    let mut desc = BTreeMap::new();
    for r in records {
        let code_words = r
            .method_name_tokens
            .iter()
            .chain(&r.api_sequence_tokens)
            .chain(&r.body_tokens);
        for w in code_words {
            *code.entry(w.clone()).or_insert(0) += 1;
        }
        for w in &r.description_tokens {
            *desc.entry(w.clone()).or_insert(0) += 1;
        }
    }
    Vocabularies {
        code: Vocabulary::from_counts(&code, min_frequency, max_size),
        desc: Vocabulary::from_counts(&desc, min_frequency, max_size),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(words: &[&str]) -> CodeRecord {
        CodeRecord {
            id: "r".into(),
            method_name: "m".into(),
            method_name_tokens: vec![],
            api_sequence_tokens: vec![],
            body_tokens: words.iter().map(|s| s.to_string()).collect(),
            description_tokens: vec!["d".into()],
            raw_source: None,
        }
    }

    #[test]
    fn single_record_two_words() {
        let v = build_vocab(&[record(&["a", "b"])], 1, None);
        assert_eq!(v.code.len(), 4);
        assert_eq!(v.code.id("a"), 2);
        assert_eq!(v.code.id("b"), 3);
        assert_eq!(v.code.id("zzz"), UNK);
        assert_eq!(v.code.word(PAD), Some("<pad>"));
    }

    #[test]
    fn min_frequency_drops_hapaxes() {
        let v = build_vocab(&[record(&["a", "b"]), record(&["a"])], 2, None);
        assert_eq!(v.code.words(), ["a"]);
        assert_eq!(v.code.id("b"), UNK);
    }

    #[test]
    fn max_size_keeps_sentinels() {
        let v = build_vocab(&[record(&["a", "b", "c"]), record(&["c"])], 1, Some(3));
        assert_eq!(v.code.len(), 3);
        assert_eq!(v.code.words(), ["c"]);
        assert_eq!(v.code.id("<unk>"), UNK);
        let tiny = build_vocab(&[record(&["a"])], 1, Some(1));
        assert_eq!(tiny.code.len(), 2);
    }

    #[test]
    fn file_round_trip() {
        let v = build_vocab(&[record(&["x", "y", "y"])], 1, None);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("code.vocab");
        v.code.write(&p).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "y\nx\n");
        assert_eq!(Vocabulary::read(&p).unwrap(), v.code);
    }
}
