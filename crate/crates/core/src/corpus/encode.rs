use serde::{Deserialize, Serialize};

use super::{normalize_description, CodeRecord, Vocabularies, Vocabulary, PAD};

/// Fixed sequence lengths for the description and the three code fields.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeqLengths {
    pub desc: usize,
    pub name: usize,
    pub api: usize,
    pub tokens: usize,
}

impl Default for SeqLengths {
    fn default() -> Self {
        Self {
            desc: 30,
            name: 6,
            api: 30,
            tokens: 50,
        }
    }
}

impl SeqLengths {
    /// Total code length across the three fields.
    pub fn code(&self) -> usize {
        self.tokens + self.name + self.api
    }
}

/// Right-truncated, right-padded id sequence with its PAD mask.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodedSeq {
    pub ids: Vec<usize>,
    pub mask: Vec<bool>,
}

impl EncodedSeq {
    /// Encodes `words` to exactly `len` ids. The flag reports truncation.
    pub fn encode<S: AsRef<str>>(words: &[S], vocab: &Vocabulary, len: usize) -> (Self, bool) {
        let mut ids: Vec<usize> = words.iter().take(len).map(|w| vocab.id(w.as_ref())).collect();
        ids.resize(len, PAD);
        (Self::from_ids(ids), words.len() > len)
    }

    /// Wraps padded ids, deriving the mask.
    pub fn from_ids(ids: Vec<usize>) -> Self {
        let mask = ids.iter().map(|&i| i != PAD).collect();
        Self { ids, mask }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Number of non-PAD positions.
    pub fn valid(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    pub fn decode(&self, vocab: &Vocabulary) -> Vec<String> {
        self.ids
            .iter()
            .filter(|&&i| i != PAD)
            .map(|&i| vocab.word(i).unwrap_or("<unk>").to_string())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodedCode {
    pub name: EncodedSeq,
    pub api: EncodedSeq,
    pub tokens: EncodedSeq,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodedPair {
    pub desc: EncodedSeq,
    pub code: EncodedCode,
    pub label: usize,
}

/// A kept record in encoded form. The description is the record's own query.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedRecord {
    pub id: String,
    pub method_name: String,
    pub raw_source: Option<String>,
    pub desc: EncodedSeq,
    pub code: EncodedCode,
}

/// Which fields were cut short while encoding one record.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Truncation {
    pub desc: bool,
    pub name: bool,
    pub api: bool,
    pub tokens: bool,
}

pub fn encode_code(record: &CodeRecord, vocabs: &Vocabularies, lengths: &SeqLengths) -> (EncodedCode, Truncation) {
    let (name, tn) = EncodedSeq::encode(&record.method_name_tokens, &vocabs.code, lengths.name);
    let (api, ta) = EncodedSeq::encode(&record.api_sequence_tokens, &vocabs.code, lengths.api);
    let (tokens, tt) = EncodedSeq::encode(&record.body_tokens, &vocabs.code, lengths.tokens);
    let t = Truncation {
        desc: false,
        name: tn,
        api: ta,
        tokens: tt,
    };
    (EncodedCode { name, api, tokens }, t)
}

pub fn encode_pair(record: &CodeRecord, vocabs: &Vocabularies, lengths: &SeqLengths, label: usize) -> EncodedPair {
    let (desc, _) = EncodedSeq::encode(&record.description_tokens, &vocabs.desc, lengths.desc);
    let (code, _) = encode_code(record, vocabs, lengths);
    EncodedPair { desc, code, label }
}

pub fn encode_record(record: &CodeRecord, vocabs: &Vocabularies, lengths: &SeqLengths) -> (EncodedRecord, Truncation) {
    let (desc, td) = EncodedSeq::encode(&record.description_tokens, &vocabs.desc, lengths.desc);
    let (code, mut t) = encode_code(record, vocabs, lengths);
    t.desc = td;
    let enc = EncodedRecord {
        id: record.id.clone(),
        method_name: record.method_name.clone(),
        raw_source: record.raw_source.clone(),
        desc,
        code,
    };
    (enc, t)
}

/// Encodes a free-text query the same way descriptions are encoded.
pub fn encode_query(text: &str, vocab: &Vocabulary, len: usize) -> EncodedSeq {
    EncodedSeq::encode(&normalize_description(text), vocab, len).0
}
