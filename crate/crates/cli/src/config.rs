//! Run configuration: one table of keys, layered from defaults, a
//! `key=value` file, `CODESEARCH_*` environment variables and flags.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use codesearch_core::corpus::SeqLengths;
use codesearch_core::matching::PoolAxis;
use codesearch_core::model::Variant;
use codesearch_core::tensor::AdamConfig;
use codesearch_core::trainer::TrainConfig;

/// Prefix of environment overrides, e.g. `CODESEARCH_LR=0.001`.
pub const ENV_PREFIX: &str = "CODESEARCH_";
/// Environment variable naming a config file.
pub const ENV_CONFIG: &str = "CODESEARCH_CONFIG";

pub struct Key {
    pub name: &'static str,
    pub default: &'static str,
    pub help: &'static str,
}

/// Every config key with its default.
pub const KEYS: &[Key] = &[
    Key { name: "corpus", default: "", help: "Input JSONL corpus for `ingest` (required there)" },
    Key { name: "data_dir", default: "data", help: "Encoded dataset directory written by `ingest`" },
    Key { name: "eval_dir", default: "", help: "Dataset directory to evaluate on (empty: data_dir)" },
    Key { name: "vocab_from", default: "", help: "Reuse the vocabularies of this dataset directory" },
    Key { name: "checkpoint", default: "model.ckpt", help: "Checkpoint file (manifest written alongside)" },
    Key { name: "loss_curve", default: "loss_curve.jsonl", help: "Per-epoch loss records written by `train`" },
    Key { name: "report", default: "", help: "Also append evaluation reports as JSON lines to this file" },
    Key { name: "keywords", default: "", help: "Keyword list file (empty: the Java reserved words)" },
    Key { name: "stopwords", default: "", help: "Stopword list file (empty: the built-in list)" },
    Key { name: "min_frequency", default: "1", help: "Minimum count for a word to enter a vocabulary" },
    Key { name: "max_vocab", default: "0", help: "Vocabulary size cap including PAD and UNK (0: none)" },
    Key { name: "desc_len", default: "30", help: "Description length in words" },
    Key { name: "name_len", default: "6", help: "Method-name length in words" },
    Key { name: "api_len", default: "30", help: "API-sequence length in calls" },
    Key { name: "tokens_len", default: "50", help: "Body-token length in words" },
    Key { name: "dim", default: "100", help: "Embedding and filter dimension" },
    Key { name: "hidden", default: "256", help: "Scorer hidden width" },
    Key { name: "variant", default: "full", help: "Model variant: full, RM, SM, M, A, T, Conv1, Conv2, Conv3" },
    Key { name: "variants", default: "all", help: "Comma-separated variants for `ablate` (all: every variant)" },
    Key { name: "relevance_pool_axis", default: "code_column", help: "Relevance pooling axis: code_column or description_row" },
    Key { name: "batch_size", default: "128", help: "Training pairs per Adam step" },
    Key { name: "dropout", default: "0.25", help: "Dropout rate on the scorer input" },
    Key { name: "lr", default: "0.0001", help: "Adam learning rate" },
    Key { name: "beta1", default: "0.9", help: "Adam first-moment decay" },
    Key { name: "beta2", default: "0.999", help: "Adam second-moment decay" },
    Key { name: "eps", default: "1e-8", help: "Adam epsilon" },
    Key { name: "epochs", default: "20", help: "Training epochs" },
    Key { name: "seed", default: "0", help: "Seed for init, sampling, shuffling, dropout and pools" },
    Key { name: "negatives", default: "1", help: "Negative pairs per positive" },
    Key { name: "val_fraction", default: "0.05", help: "Fraction of records held out for checkpoint selection" },
    Key { name: "val_pool_size", default: "0", help: "Validation pool size (0: all held-out codes)" },
    Key { name: "pool_size", default: "0", help: "Evaluation pool size including the truth (0: whole set)" },
    Key { name: "top_k", default: "10", help: "Results printed by `search`" },
    Key { name: "threads", default: "0", help: "Worker threads (0: one per core)" },
];

/// Flag spelling of a key: `batch_size` becomes `batch-size`.
pub fn flag_name(key: &str) -> String {
    key.replace('_', "-")
}

/// A bad key or value. Reported with exit code 1.
#[derive(Debug, Clone, PartialEq)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(message: impl Into<String>) -> UsageError {
    UsageError(message.into())
}

/// Raw string values for every key, with the layer each came from.
#[derive(Debug, Clone)]
pub struct Layers {
    values: BTreeMap<&'static str, (String, &'static str)>,
}

impl Default for Layers {
    fn default() -> Self {
        Self {
            values: KEYS.iter().map(|k| (k.name, (k.default.to_string(), "default"))).collect(),
        }
    }
}

impl Layers {
    /// Sets `key` from `source`, rejecting unknown keys.
    pub fn set(&mut self, key: &str, value: &str, source: &'static str) -> Result<(), UsageError> {
        let k = KEYS
            .iter()
            .find(|k| k.name == key)
            .ok_or_else(|| usage(format!("unknown config key `{key}` (from {source})")))?;
        self.values.insert(k.name, (value.trim().to_string(), source));
        Ok(())
    }

    /// Applies a `key=value` file. Blank lines and `#` comments are ignored.
    pub fn apply_file(&mut self, path: &Path) -> Result<(), UsageError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| usage(format!("cannot read config file {}: {e}", path.display())))?;
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| usage(format!("{}:{}: expected key=value", path.display(), i + 1)))?;
            self.set(k.trim(), v, "config file")?;
        }
        Ok(())
    }

    /// Applies `CODESEARCH_<KEY>` variables. Any other variable with the
    /// prefix, except the config-file one, is rejected.
    pub fn apply_env<I: IntoIterator<Item = (String, String)>>(&mut self, vars: I) -> Result<(), UsageError> {
        for (name, value) in vars {
            let Some(rest) = name.strip_prefix(ENV_PREFIX) else { continue };
            if name == ENV_CONFIG {
                continue;
            }
            self.set(&rest.to_ascii_lowercase(), &value, "environment")?;
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> &str {
        &self.values[key].0
    }

    pub fn source(&self, key: &str) -> &'static str {
        self.values[key].1
    }

    pub fn resolve(&self) -> Result<RunConfig, UsageError> {
        RunConfig::from_layers(self)
    }
}

/// Fully typed configuration of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub corpus: Option<PathBuf>,
    pub data_dir: PathBuf,
    pub eval_dir: Option<PathBuf>,
    pub vocab_from: Option<PathBuf>,
    pub checkpoint: PathBuf,
    pub loss_curve: PathBuf,
    pub report: Option<PathBuf>,
    pub keywords: Option<PathBuf>,
    pub stopwords: Option<PathBuf>,
    pub min_frequency: usize,
    pub max_vocab: Option<usize>,
    pub lengths: SeqLengths,
    pub dim: usize,
    pub hidden: usize,
    pub variant: Variant,
    pub variants: Vec<Variant>,
    pub pool_axis: PoolAxis,
    pub train: TrainConfig,
    pub pool_size: usize,
    pub top_k: usize,
    pub threads: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Layers::default().resolve().expect("defaults parse")
    }
}

fn parse<T: std::str::FromStr>(layers: &Layers, key: &str, what: &str) -> Result<T, UsageError> {
    let raw = layers.get(key);
    raw.parse().map_err(|_| {
        usage(format!(
            "config key `{key}` (from {}): `{raw}` is not {what}",
            layers.source(key)
        ))
    })
}

fn count(layers: &Layers, key: &str) -> Result<usize, UsageError> {
    parse(layers, key, "a non-negative integer")
}

fn positive(layers: &Layers, key: &str) -> Result<usize, UsageError> {
    let v = count(layers, key)?;
    if v == 0 {
        return Err(usage(format!("config key `{key}` must be positive")));
    }
    Ok(v)
}

fn real(layers: &Layers, key: &str) -> Result<f64, UsageError> {
    let v: f64 = parse(layers, key, "a number")?;
    if !v.is_finite() {
        return Err(usage(format!("config key `{key}` must be finite")));
    }
    Ok(v)
}

fn path(layers: &Layers, key: &str) -> Option<PathBuf> {
    let raw = layers.get(key);
    (!raw.is_empty()).then(|| PathBuf::from(raw))
}

fn variant(raw: &str, key: &str) -> Result<Variant, UsageError> {
    raw.trim().parse().map_err(|m: String| usage(format!("config key `{key}`: {m}")))
}

impl RunConfig {
    fn from_layers(l: &Layers) -> Result<Self, UsageError> {
        let variants = match l.get("variants") {
            "all" => Variant::ALL.to_vec(),
            list => list
                .split(',')
                .filter(|s| !s.trim().is_empty())
                .map(|s| variant(s, "variants"))
                .collect::<Result<Vec<_>, _>>()?,
        };
        if variants.is_empty() {
            return Err(usage("config key `variants` lists no variant"));
        }
        let train = TrainConfig {
            batch_size: positive(l, "batch_size")?,
            dropout: real(l, "dropout")?,
            adam: AdamConfig {
                lr: real(l, "lr")?,
                beta1: real(l, "beta1")?,
                beta2: real(l, "beta2")?,
                eps: real(l, "eps")?,
            },
            epochs: positive(l, "epochs")?,
            seed: parse(l, "seed", "a non-negative integer")?,
            negatives: positive(l, "negatives")?,
            val_fraction: real(l, "val_fraction")?,
            val_pool_size: count(l, "val_pool_size")?,
        };
        train.validate().map_err(|e| usage(e.to_string()))?;
        let max_vocab = count(l, "max_vocab")?;
        Ok(Self {
            corpus: path(l, "corpus"),
            data_dir: path(l, "data_dir").ok_or_else(|| usage("config key `data_dir` must not be empty"))?,
            eval_dir: path(l, "eval_dir"),
            vocab_from: path(l, "vocab_from"),
            checkpoint: path(l, "checkpoint").ok_or_else(|| usage("config key `checkpoint` must not be empty"))?,
            loss_curve: path(l, "loss_curve").ok_or_else(|| usage("config key `loss_curve` must not be empty"))?,
            report: path(l, "report"),
            keywords: path(l, "keywords"),
            stopwords: path(l, "stopwords"),
            min_frequency: positive(l, "min_frequency")?,
            max_vocab: (max_vocab > 0).then_some(max_vocab),
            lengths: SeqLengths {
                desc: positive(l, "desc_len")?,
                name: positive(l, "name_len")?,
                api: positive(l, "api_len")?,
                tokens: positive(l, "tokens_len")?,
            },
            dim: positive(l, "dim")?,
            hidden: positive(l, "hidden")?,
            variant: variant(l.get("variant"), "variant")?,
            variants,
            pool_axis: l
                .get("relevance_pool_axis")
                .parse()
                .map_err(|m: String| usage(format!("config key `relevance_pool_axis`: {m}")))?,
            train,
            pool_size: count(l, "pool_size")?,
            top_k: positive(l, "top_k")?,
            threads: count(l, "threads")?,
        })
    }

    /// Every key with its current value, in table order.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let p = |o: &Option<PathBuf>| o.as_ref().map_or(String::new(), |p| p.display().to_string());
        let t = &self.train;
        let variants = if self.variants == Variant::ALL {
            "all".to_string()
        } else {
            self.variants.iter().map(|v| v.name()).collect::<Vec<_>>().join(",")
        };
        vec![
            ("corpus", p(&self.corpus)),
            ("data_dir", self.data_dir.display().to_string()),
            ("eval_dir", p(&self.eval_dir)),
            ("vocab_from", p(&self.vocab_from)),
            ("checkpoint", self.checkpoint.display().to_string()),
            ("loss_curve", self.loss_curve.display().to_string()),
            ("report", p(&self.report)),
            ("keywords", p(&self.keywords)),
            ("stopwords", p(&self.stopwords)),
            ("min_frequency", self.min_frequency.to_string()),
            ("max_vocab", self.max_vocab.unwrap_or(0).to_string()),
            ("desc_len", self.lengths.desc.to_string()),
            ("name_len", self.lengths.name.to_string()),
            ("api_len", self.lengths.api.to_string()),
            ("tokens_len", self.lengths.tokens.to_string()),
            ("dim", self.dim.to_string()),
            ("hidden", self.hidden.to_string()),
            ("variant", self.variant.name()),
            ("variants", variants),
            ("relevance_pool_axis", self.pool_axis.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("dropout", t.dropout.to_string()),
            ("lr", t.adam.lr.to_string()),
            ("beta1", t.adam.beta1.to_string()),
            ("beta2", t.adam.beta2.to_string()),
            ("eps", format!("{:e}", t.adam.eps)),
            ("epochs", t.epochs.to_string()),
            ("seed", t.seed.to_string()),
            ("negatives", t.negatives.to_string()),
            ("val_fraction", t.val_fraction.to_string()),
            ("val_pool_size", t.val_pool_size.to_string()),
            ("pool_size", self.pool_size.to_string()),
            ("top_k", self.top_k.to_string()),
            ("threads", self.threads.to_string()),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_pairs() {
        let c = RunConfig::default();
        let pairs = c.to_pairs();
        assert_eq!(pairs.len(), KEYS.len());
        for ((name, value), key) in pairs.iter().zip(KEYS) {
            assert_eq!(*name, key.name);
            assert_eq!(value, key.default, "{name}");
        }
        assert_eq!(c.train, TrainConfig::default());
        assert_eq!(c.lengths, SeqLengths::default());
    }

    #[test]
    fn later_layers_win_and_unknown_keys_fail() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("run.conf");
        std::fs::write(&file, "# comment\nlr = 0.01\nepochs=3\n").unwrap();
        let mut l = Layers::default();
        l.apply_file(&file).unwrap();
        l.apply_env([("CODESEARCH_EPOCHS".to_string(), "4".to_string()), ("HOME".into(), "/x".into())])
            .unwrap();
        l.set("seed", "7", "flag").unwrap();
        let c = l.resolve().unwrap();
        assert_eq!(c.train.adam.lr, 0.01);
        assert_eq!(c.train.epochs, 4);
        assert_eq!(c.train.seed, 7);
        assert_eq!(l.source("epochs"), "environment");

        std::fs::write(&file, "learning_rate=0.1\n").unwrap();
        let err = Layers::default().apply_file(&file).unwrap_err();
        assert!(err.0.contains("learning_rate"), "{err}");
        let err = Layers::default()
            .apply_env([("CODESEARCH_BOGUS".to_string(), "1".to_string())])
            .unwrap_err();
        assert!(err.0.contains("bogus"), "{err}");
    }

    #[test]
    fn bad_values_name_their_key() {
        let mut l = Layers::default();
        l.set("dropout", "1.5", "flag").unwrap();
        assert!(l.resolve().unwrap_err().0.contains("dropout"));
        let mut l = Layers::default();
        l.set("epochs", "many", "flag").unwrap();
        let err = l.resolve().unwrap_err().0;
        assert!(err.contains("epochs") && err.contains("flag"), "{err}");
        let mut l = Layers::default();
        l.set("variants", "RM, SM", "flag").unwrap();
        assert_eq!(l.resolve().unwrap().variants, [Variant::Relevance, Variant::Semantic]);
    }
}
