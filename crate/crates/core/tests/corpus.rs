use std::collections::HashMap;
use std::path::PathBuf;

use codesearch_core::corpus::{
    build_dataset, build_vocab, ingest_file, read_dataset, write_dataset, Field, SeqLengths, TokenFilter, PAD,
    UNK,
};
use codesearch_core::synthetic::{generate, SyntheticSpec};

fn fixture() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/methods.jsonl")
}

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

#[test]
fn fixture_methods_extract_to_golden_features() {
    let out = ingest_file(&fixture(), &TokenFilter::default()).unwrap();
    // (name, api, body, description) of the first five methods.
    let golden = [
        (
            "read all bytes",
            "ByteArrayOutputStream read write toByteArray",
            "array output stream buffer n read write",
            "reads all bytes from the given input stream",
        ),
        (
            "is null or empty",
            "isEmpty",
            "value null empty",
            "returns true if the string is null or empty",
        ),
        (
            "hex to bytes",
            "length digit charAt digit charAt",
            "len hex length data character digit",
            "converts a hex string to a byte array",
        ),
        (
            "write text file",
            "newBufferedWriter write flush",
            "buffered writer files path standard charsets utf 8 write text flush",
            "writes the text to a file using utf 8",
        ),
        (
            "md 5 hex",
            "getInstance digest getBytes StringBuilder append format toString",
            "message digest get instance hash input bytes string builder sb b append format",
            "computes the md5 digest of a string",
        ),
    ];
    for (record, (name, api, body, desc)) in out.records.iter().zip(golden) {
        assert_eq!(record.method_name_tokens, words(name), "{}", record.id);
        assert_eq!(record.api_sequence_tokens, words(api), "{}", record.id);
        assert_eq!(record.body_tokens, words(body), "{}", record.id);
        assert_eq!(record.description_tokens, words(desc), "{}", record.id);
    }
    assert_eq!(out.records[0].method_name, "readAllBytes");
}

#[test]
fn fixture_report_counts_every_line() {
    let out = ingest_file(&fixture(), &TokenFilter::default()).unwrap();
    let r = &out.report;
    assert_eq!(r.lines, 32);
    assert_eq!(r.malformed, 0);
    assert_eq!(r.kept, 30);
    assert_eq!(r.dropped.values().sum::<usize>(), 2);
    assert_eq!(r.kept + r.malformed + r.dropped.values().sum::<usize>(), r.lines);
}

#[test]
fn vocabulary_matches_brute_force_counts() {
    let spec = SyntheticSpec {
        content_words: 60,
        filler_words: 80,
        ..SyntheticSpec::lexical(100, 8)
    };
    let records = generate(&spec);
    assert_eq!(records.len(), 100);
    for min_frequency in [1, 2, 5] {
        let vocabs = build_vocab(&records, min_frequency, None);
        let mut code: HashMap<&str, usize> = HashMap::new();
        let mut desc: HashMap<&str, usize> = HashMap::new();
        for r in &records {
            for w in r.method_name_tokens.iter().chain(&r.api_sequence_tokens).chain(&r.body_tokens) {
                *code.entry(w).or_default() += 1;
            }
            for w in &r.description_tokens {
                *desc.entry(w).or_default() += 1;
            }
        }
        for (vocab, counts) in [(&vocabs.code, &code), (&vocabs.desc, &desc)] {
            let kept: Vec<&str> = counts
                .iter()
                .filter(|(_, c)| **c >= min_frequency)
                .map(|(w, _)| *w)
                .collect();
            assert_eq!(vocab.len(), kept.len() + 2);
            for w in &kept {
                assert!(vocab.contains(w), "{w} missing at min_frequency {min_frequency}");
            }
            // Ids follow descending frequency.
            for pair in vocab.words().windows(2) {
                assert!(counts[pair[0].as_str()] >= counts[pair[1].as_str()]);
            }
            for (w, c) in counts.iter() {
                if *c < min_frequency {
                    assert_eq!(vocab.id(w), UNK);
                }
            }
        }
    }
}

#[test]
fn dataset_directory_round_trips() {
    let out = ingest_file(&fixture(), &TokenFilter::default()).unwrap();
    let vocabs = build_vocab(&out.records, 1, None);
    let mut report = out.report.clone();
    let lengths = SeqLengths {
        desc: 6,
        name: 3,
        api: 4,
        tokens: 8,
    };
    let ds = build_dataset(&out.records, &vocabs, lengths, &mut report);
    assert!(report.truncation[&Field::Tokens] > 0.0);
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &ds, &vocabs, &report).unwrap();
    let (back, back_vocabs) = read_dataset(dir.path()).unwrap();
    assert_eq!(back.lengths, lengths);
    assert_eq!(back.records, ds.records);
    assert_eq!(back_vocabs.code.words(), vocabs.code.words());
    assert_eq!(back_vocabs.desc.words(), vocabs.desc.words());
    for r in &back.records {
        assert_eq!(r.desc.ids.len(), 6);
        let first_pad = r.desc.ids.iter().position(|&i| i == PAD).unwrap_or(6);
        assert!(r.desc.ids[first_pad..].iter().all(|&i| i == PAD));
    }
}
