use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize};

use super::encode::{encode_record, EncodedCode, EncodedRecord, EncodedSeq, SeqLengths};
use super::extract::leading_comment;
use super::{
    extract_features, normalize_description, normalize_tokens, split_camel, CodeRecord, CorpusError, DropReason,
    TokenFilter, Vocabularies, Vocabulary,
};

pub const DATASET_FILE: &str = "dataset.jsonl";
pub const META_FILE: &str = "dataset.meta";
pub const CODE_VOCAB_FILE: &str = "code.vocab";
pub const DESC_VOCAB_FILE: &str = "desc.vocab";
pub const REPORT_FILE: &str = "ingest_report.jsonl";

/// One input line. Either the four pre-extracted fields are present, or
/// `raw_source` is given and features are extracted from it.
#[derive(Debug, Clone, Deserialize)]
pub struct RawRecord {
    #[serde(deserialize_with = "id_text")]
    pub id: String,
    #[serde(default)]
    pub method_name: Option<String>,
    #[serde(default)]
    pub api_sequence: Option<String>,
    #[serde(default)]
    pub tokens: Option<String>,
    #[serde(default)]
    pub description: Option<String>,
    #[serde(default)]
    pub raw_source: Option<String>,
}

fn id_text<'de, D: Deserializer<'de>>(d: D) -> Result<String, D::Error> {
    match serde_json::Value::deserialize(d)? {
        serde_json::Value::String(s) => Ok(s),
        serde_json::Value::Number(n) => Ok(n.to_string()),
        other => Err(serde::de::Error::custom(format!("id must be a string or number, got {other}"))),
    }
}

impl RawRecord {
    pub fn into_record(self, filter: &TokenFilter) -> Result<CodeRecord, DropReason> {
        if let (Some(name), Some(api), Some(tokens), Some(desc)) =
            (&self.method_name, &self.api_sequence, &self.tokens, &self.description)
        {
            let record = CodeRecord {
                id: self.id.clone(),
                method_name: name.trim().to_string(),
                method_name_tokens: split_camel(name.trim()),
                api_sequence_tokens: api.split_whitespace().map(str::to_string).collect(),
                body_tokens: normalize_tokens(tokens.split_whitespace(), filter),
                description_tokens: normalize_description(desc),
                raw_source: self.raw_source,
            };
            record.validate()?;
            return Ok(record);
        }
        let raw = self.raw_source.as_deref().ok_or(DropReason::Unparseable)?;
        let comment = match &self.description {
            Some(d) => d.clone(),
            None => leading_comment(raw),
        };
        extract_features(&self.id, raw, &comment, filter)
    }
}

/// The four encoded fields.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Field {
    Desc,
    Name,
    Api,
    Tokens,
}

impl Field {
    pub const ALL: [Field; 4] = [Field::Desc, Field::Name, Field::Api, Field::Tokens];

    pub fn as_str(self) -> &'static str {
        match self {
            Field::Desc => "desc",
            Field::Name => "name",
            Field::Api => "api",
            Field::Tokens => "tokens",
        }
    }
}

/// Counts of kept and dropped records plus per-field truncation rates.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct IngestReport {
    pub lines: usize,
    pub malformed: usize,
    pub kept: usize,
    pub dropped: BTreeMap<DropReason, usize>,
    pub truncation: BTreeMap<Field, f64>,
}

#[derive(Serialize)]
struct ReportLine<'a> {
    metric: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    key: Option<&'a str>,
    value: serde_json::Value,
}

impl IngestReport {
    pub fn dropped_total(&self) -> usize {
        self.dropped.values().sum()
    }

    pub fn to_jsonl(&self) -> String {
        let mut lines = vec![
            ReportLine { metric: "lines", key: None, value: self.lines.into() },
            ReportLine { metric: "malformed", key: None, value: self.malformed.into() },
            ReportLine { metric: "kept", key: None, value: self.kept.into() },
        ];
        for (reason, n) in &self.dropped {
            lines.push(ReportLine { metric: "dropped", key: Some(reason.as_str()), value: (*n).into() });
        }
        for (field, rate) in &self.truncation {
            lines.push(ReportLine { metric: "truncation_rate", key: Some(field.as_str()), value: (*rate).into() });
        }
        lines
            .iter()
            .map(|l| serde_json::to_string(l).expect("report line serializes") + "\n")
            .collect()
    }
}

impl fmt::Display for IngestReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<28}{:>8}", "lines", self.lines)?;
        writeln!(f, "{:<28}{:>8}", "malformed", self.malformed)?;
        writeln!(f, "{:<28}{:>8}", "kept", self.kept)?;
        for (reason, n) in &self.dropped {
            writeln!(f, "{:<28}{:>8}", format!("dropped.{}", reason.as_str()), n)?;
        }
        for (field, rate) in &self.truncation {
            writeln!(f, "{:<28}{:>8.4}", format!("truncation_rate.{}", field.as_str()), rate)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct IngestOutput {
    pub records: Vec<CodeRecord>,
    pub report: IngestReport,
}

/// Parses and filters input lines. Bad lines and dropped records are
/// counted, never fatal.
pub fn ingest_lines<I, S>(lines: I, filter: &TokenFilter) -> IngestOutput
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut report = IngestReport::default();
    let mut records = Vec::new();
    for line in lines {
        let line = line.as_ref().trim();
        if line.is_empty() {
            continue;
        }
        report.lines += 1;
        let raw: RawRecord = match serde_json::from_str(line) {
            Ok(r) => r,
            Err(_) => {
                report.malformed += 1;
                continue;
            }
        };
        match raw.into_record(filter) {
            Ok(r) => records.push(r),
            Err(reason) => *report.dropped.entry(reason).or_insert(0) += 1,
        }
    }
    report.kept = records.len();
    IngestOutput { records, report }
}

/// Reads a corpus file and filters it.
pub fn ingest_file(path: &Path, filter: &TokenFilter) -> Result<IngestOutput, CorpusError> {
    let file = std::fs::File::open(path).map_err(|e| CorpusError::io(path, e))?;
    let lines = std::io::BufReader::new(file)
        .lines()
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| CorpusError::io(path, e))?;
    Ok(ingest_lines(lines, filter))
}

/// Encoded records at fixed lengths.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub lengths: SeqLengths,
    pub records: Vec<EncodedRecord>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Encodes kept records and fills the truncation rates of `report`.
pub fn build_dataset(
    records: &[CodeRecord],
    vocabs: &Vocabularies,
    lengths: SeqLengths,
    report: &mut IngestReport,
) -> Dataset {
    let mut cut = [0usize; 4];
    let encoded = records
        .iter()
        .map(|r| {
            let (enc, t) = encode_record(r, vocabs, &lengths);
            for (slot, flag) in cut.iter_mut().zip([t.desc, t.name, t.api, t.tokens]) {
                *slot += usize::from(flag);
            }
            enc
        })
        .collect::<Vec<_>>();
    let n = encoded.len().max(1) as f64;
    for (field, c) in Field::ALL.into_iter().zip(cut) {
        report.truncation.insert(field, c as f64 / n);
    }
    Dataset {
        lengths,
        records: encoded,
    }
}

#[derive(Serialize, Deserialize)]
struct DatasetLine {
    id: String,
    method_name: String,
    desc: Vec<usize>,
    name: Vec<usize>,
    api: Vec<usize>,
    tokens: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    raw_source: Option<String>,
}

fn write_file(path: &Path, contents: &str) -> Result<(), CorpusError> {
    let mut f = std::fs::File::create(path).map_err(|e| CorpusError::io(path, e))?;
    f.write_all(contents.as_bytes()).map_err(|e| CorpusError::io(path, e))
}

/// Writes the encoded dataset, both vocabularies and the report into `dir`.
pub fn write_dataset(
    dir: &Path,
    dataset: &Dataset,
    vocabs: &Vocabularies,
    report: &IngestReport,
) -> Result<(), CorpusError> {
    std::fs::create_dir_all(dir).map_err(|e| CorpusError::io(dir, e))?;
    let mut body = String::new();
    for r in &dataset.records {
        let line = DatasetLine {
            id: r.id.clone(),
            method_name: r.method_name.clone(),
            desc: r.desc.ids.clone(),
            name: r.code.name.ids.clone(),
            api: r.code.api.ids.clone(),
            tokens: r.code.tokens.ids.clone(),
            raw_source: r.raw_source.clone(),
        };
        body.push_str(&serde_json::to_string(&line).expect("dataset line serializes"));
        body.push('\n');
    }
    write_file(&dir.join(DATASET_FILE), &body)?;
    let l = dataset.lengths;
    let meta = format!(
        "desc_len={}\nname_len={}\napi_len={}\ntokens_len={}\nrecords={}\n",
        l.desc,
        l.name,
        l.api,
        l.tokens,
        dataset.len()
    );
    write_file(&dir.join(META_FILE), &meta)?;
    vocabs.code.write(&dir.join(CODE_VOCAB_FILE))?;
    vocabs.desc.write(&dir.join(DESC_VOCAB_FILE))?;
    write_file(&dir.join(REPORT_FILE), &report.to_jsonl())
}

/// Loads both vocabularies from an ingest output directory.
pub fn read_vocabs(dir: &Path) -> Result<Vocabularies, CorpusError> {
    Ok(Vocabularies {
        code: Vocabulary::read(&dir.join(CODE_VOCAB_FILE))?,
        desc: Vocabulary::read(&dir.join(DESC_VOCAB_FILE))?,
    })
}

fn read_meta(path: &Path) -> Result<(SeqLengths, usize), CorpusError> {
    let text = std::fs::read_to_string(path).map_err(|e| CorpusError::io(path, e))?;
    let mut values = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let (k, v) = line.split_once('=').ok_or_else(|| CorpusError::Malformed {
            line: i + 1,
            message: format!("{META_FILE}: expected key=value"),
        })?;
        let v: usize = v.trim().parse().map_err(|_| CorpusError::Malformed {
            line: i + 1,
            message: format!("{META_FILE}: `{k}` is not a count"),
        })?;
        values.insert(k.trim().to_string(), v);
    }
    let get = |k: &str| {
        values.get(k).copied().ok_or_else(|| CorpusError::Malformed {
            line: 0,
            message: format!("{META_FILE}: missing `{k}`"),
        })
    };
    let lengths = SeqLengths {
        desc: get("desc_len")?,
        name: get("name_len")?,
        api: get("api_len")?,
        tokens: get("tokens_len")?,
    };
    Ok((lengths, get("records")?))
}

/// Loads a dataset written by [`write_dataset`], checking every sequence
/// length and id range.
pub fn read_dataset(dir: &Path) -> Result<(Dataset, Vocabularies), CorpusError> {
    let (lengths, expected) = read_meta(&dir.join(META_FILE))?;
    let vocabs = read_vocabs(dir)?;
    let path = dir.join(DATASET_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| CorpusError::io(&path, e))?;
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let bad = |message: String| CorpusError::Malformed { line: i + 1, message };
        let d: DatasetLine = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
        let seq = |ids: Vec<usize>, len: usize, vocab: &Vocabulary, field: &str| {
            if ids.len() != len {
                return Err(bad(format!("field `{field}` has {} ids, expected {len}", ids.len())));
            }
            if let Some(id) = ids.iter().find(|&&id| id >= vocab.len()) {
                return Err(bad(format!("field `{field}` id {id} exceeds vocabulary size {}", vocab.len())));
            }
            Ok(EncodedSeq::from_ids(ids))
        };
        records.push(EncodedRecord {
            desc: seq(d.desc, lengths.desc, &vocabs.desc, "desc")?,
            code: EncodedCode {
                name: seq(d.name, lengths.name, &vocabs.code, "name")?,
                api: seq(d.api, lengths.api, &vocabs.code, "api")?,
                tokens: seq(d.tokens, lengths.tokens, &vocabs.code, "tokens")?,
            },
            id: d.id,
            method_name: d.method_name,
            raw_source: d.raw_source,
        });
    }
    if records.len() != expected {
        return Err(CorpusError::Malformed {
            line: 0,
            message: format!("{DATASET_FILE} holds {} records, meta says {expected}", records.len()),
        });
    }
    if records.is_empty() {
        return Err(CorpusError::NoRecords);
    }
    Ok((Dataset { lengths, records }, vocabs))
}

#[cfg(test)]
mod tests {
    use super::super::build_vocab;
    use super::*;

    const LINES: &[&str] = &[
        r#"{"id": 1, "method_name": "readFile", "api_sequence": "File.open read close", "tokens": "path reader buffer the", "description": "Reads a file."}"#,
        r#"{"id": "b", "method_name": "noop", "api_sequence": "", "tokens": "x", "description": "Does nothing."}"#,
        "not json",
        "",
        r#"{"id": 3, "raw_source": "/** Sums values. */ int sum(int[] v) { return IntStream.of(v).sum(); }"}"#,
        r#"{"id": 4}"#,
    ];

    #[test]
    fn lines_are_kept_dropped_or_counted_malformed() {
        let out = ingest_lines(LINES, &TokenFilter::default());
        assert_eq!(out.report.lines, 5);
        assert_eq!(out.report.malformed, 1);
        assert_eq!(out.report.kept, 2);
        assert_eq!(out.report.dropped[&DropReason::EmptyApi], 1);
        assert_eq!(out.report.dropped[&DropReason::Unparseable], 1);
        let r = &out.records[0];
        assert_eq!(r.id, "1");
        assert_eq!(r.method_name_tokens, ["read", "file"]);
        assert_eq!(r.api_sequence_tokens, ["File.open", "read", "close"]);
        assert_eq!(r.body_tokens, ["path", "reader", "buffer"]);
        assert_eq!(r.description_tokens, ["reads", "a", "file"]);
        let s = &out.records[1];
        assert_eq!(s.method_name, "sum");
        assert_eq!(s.api_sequence_tokens, ["of", "sum"]);
        assert_eq!(s.description_tokens, ["sums", "values"]);
    }

    #[test]
    fn write_then_read_round_trips_and_is_byte_stable() {
        let filter = TokenFilter::default();
        let mut out = ingest_lines(LINES, &filter);
        let vocabs = build_vocab(&out.records, 1, None);
        let lengths = SeqLengths { desc: 4, name: 2, api: 2, tokens: 3 };
        let ds = build_dataset(&out.records, &vocabs, lengths, &mut out.report);
        assert_eq!(out.report.truncation[&Field::Api], 0.5);
        assert_eq!(out.report.truncation[&Field::Name], 0.0);

        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        write_dataset(a.path(), &ds, &vocabs, &out.report).unwrap();
        write_dataset(b.path(), &ds, &vocabs, &out.report).unwrap();
        for f in [DATASET_FILE, META_FILE, CODE_VOCAB_FILE, DESC_VOCAB_FILE, REPORT_FILE] {
            assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap());
        }
        let (back, vb) = read_dataset(a.path()).unwrap();
        assert_eq!(back, ds);
        assert_eq!(vb, vocabs);
    }

    #[test]
    fn corrupted_lengths_are_reported_with_the_field() {
        let mut out = ingest_lines(LINES, &TokenFilter::default());
        let vocabs = build_vocab(&out.records, 1, None);
        let ds = build_dataset(&out.records, &vocabs, SeqLengths::default(), &mut out.report);
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &ds, &vocabs, &out.report).unwrap();
        std::fs::write(
            dir.path().join(META_FILE),
            "desc_len=30\nname_len=7\napi_len=30\ntokens_len=50\nrecords=2\n",
        )
        .unwrap();
        let err = read_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("`name`"), "{err}");
    }

    #[test]
    fn report_is_line_delimited_json() {
        let out = ingest_lines(LINES, &TokenFilter::default());
        for line in out.report.to_jsonl().lines() {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            assert!(v.get("metric").is_some());
        }
        assert!(out.report.to_string().contains("dropped.empty_api"));
    }
}
