//! Seeded synthetic corpora for experiments and tests.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::CodeRecord;

const ONSETS: [&str; 14] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"];
const NUCLEI: [&str; 5] = ["a", "e", "i", "o", "u"];

/// Deterministic pronounceable word for `index` (distinct for every index).
pub fn word(index: usize) -> String {
    let base = ONSETS.len() * NUCLEI.len();
    let mut i = index;
    let mut out = String::new();
    loop {
        let s = i % base;
        out.push_str(ONSETS[s / NUCLEI.len()]);
        out.push_str(NUCLEI[s % NUCLEI.len()]);
        i /= base;
        if i == 0 {
            break;
        }
        i -= 1;
    }
    out
}

/// Shape of a generated corpus.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    pub records: usize,
    /// Distinct content words available to descriptions.
    pub content_words: usize,
    /// Distinct filler words for code fields.
    pub filler_words: usize,
    /// Content words per description (inclusive range).
    pub desc_words: (usize, usize),
    /// Filler words added to each body.
    pub body_filler: usize,
    pub name_words: usize,
    pub api_words: usize,
    /// Copy every description word into the body tokens.
    pub lexical: bool,
    pub seed: u64,
}

impl SyntheticSpec {
    /// Descriptions whose content words all reappear in the code tokens.
    pub fn lexical(records: usize, seed: u64) -> Self {
        Self {
            records,
            content_words: 400,
            filler_words: 400,
            desc_words: (3, 5),
            body_filler: 4,
            name_words: 2,
            api_words: 3,
            lexical: true,
            seed,
        }
    }
}

/// Generates records with distinct descriptions.
pub fn generate(spec: &SyntheticSpec) -> Vec<CodeRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let content: Vec<String> = (0..spec.content_words).map(word).collect();
    let filler: Vec<String> = (spec.content_words..spec.content_words + spec.filler_words)
        .map(word)
        .collect();
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::with_capacity(spec.records);
    while out.len() < spec.records {
        let k = rng.gen_range(spec.desc_words.0..=spec.desc_words.1);
        let desc: Vec<String> = content.choose_multiple(&mut rng, k).cloned().collect();
        let mut key = desc.clone();
        key.sort();
        if !seen.insert(key) {
            continue;
        }
        let mut body: Vec<String> = filler.choose_multiple(&mut rng, spec.body_filler).cloned().collect();
        if spec.lexical {
            body.extend(desc.iter().cloned());
        } else {
            body.extend(content.choose_multiple(&mut rng, k).cloned());
        }
        body.shuffle(&mut rng);
        let name: Vec<String> = filler.choose_multiple(&mut rng, spec.name_words).cloned().collect();
        let api: Vec<String> = filler.choose_multiple(&mut rng, spec.api_words).cloned().collect();
        let method_name = name
            .iter()
            .enumerate()
            .map(|(i, w)| if i == 0 { w.clone() } else { capitalize(w) })
            .collect();
        out.push(CodeRecord {
            id: format!("syn{}", out.len()),
            method_name,
            method_name_tokens: name,
            api_sequence_tokens: api,
            body_tokens: body,
            description_tokens: desc,
            raw_source: None,
        });
    }
    out
}

fn capitalize(w: &str) -> String {
    let mut c = w.chars();
    c.next()
        .map(|f| f.to_uppercase().chain(c).collect())
        .unwrap_or_default()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn words_are_distinct() {
        let words: std::collections::HashSet<String> = (0..5000).map(word).collect();
        assert_eq!(words.len(), 5000);
        assert_eq!(word(0), "ba");
    }

    #[test]
    fn lexical_bodies_contain_descriptions() {
        let recs = generate(&SyntheticSpec::lexical(50, 1));
        assert_eq!(recs.len(), 50);
        for r in &recs {
            assert!(r.validate().is_ok());
            assert!(r.description_tokens.iter().all(|w| r.body_tokens.contains(w)));
        }
        assert_eq!(recs, generate(&SyntheticSpec::lexical(50, 1)));
    }
}
