//! The five subcommands. Each reads and writes only the paths named in its
//! [`RunConfig`].

use std::fs::{File, OpenOptions};
use std::io::{BufRead, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};

use codesearch_core::ablation::{render_ablation, run_variant};
use codesearch_core::checkpoint;
use codesearch_core::corpus::{
    build_dataset, build_vocab, encode_query, ingest_file, read_dataset, read_vocabs, write_dataset, Dataset,
    TokenFilter, Vocabularies,
};
use codesearch_core::eval::{evaluate, rank_pool, render_table, score_pool, FeatureCache, PoolSpec};
use codesearch_core::model::{Model, ModelConfig};
use codesearch_core::trainer::train;

use crate::config::{RunConfig, UsageError};

fn load_dataset(dir: &Path) -> Result<(Dataset, Vocabularies)> {
    let (ds, vocabs) = read_dataset(dir).with_context(|| format!("reading dataset {}", dir.display()))?;
    if ds.is_empty() {
        bail!("dataset {} has no records", dir.display());
    }
    Ok((ds, vocabs))
}

fn model_config(run: &RunConfig, ds: &Dataset, vocabs: &Vocabularies) -> ModelConfig {
    ModelConfig {
        dim: run.dim,
        hidden: run.hidden,
        lengths: ds.lengths,
        code_vocab: vocabs.code.len(),
        desc_vocab: vocabs.desc.len(),
        variant: run.variant,
        pool_axis: run.pool_axis,
    }
}

/// Loads the checkpoint and checks it against the dataset it will score.
fn load_model(run: &RunConfig, ds: &Dataset, vocabs: &Vocabularies) -> Result<Model<f32>> {
    let path = &run.checkpoint;
    let model = checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    let c = model.config();
    let checks = [
        ("code_vocab", c.code_vocab, vocabs.code.len()),
        ("desc_vocab", c.desc_vocab, vocabs.desc.len()),
        ("desc_len", c.lengths.desc, ds.lengths.desc),
        ("name_len", c.lengths.name, ds.lengths.name),
        ("api_len", c.lengths.api, ds.lengths.api),
        ("tokens_len", c.lengths.tokens, ds.lengths.tokens),
    ];
    for (field, model_value, data_value) in checks {
        if model_value != data_value {
            bail!(
                "checkpoint {} has {field}={model_value} but the dataset has {field}={data_value}",
                path.display()
            );
        }
    }
    Ok(model)
}

fn append_lines(path: &Path, lines: &[String]) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .with_context(|| format!("opening {}", path.display()))?;
    for line in lines {
        writeln!(f, "{line}").with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

pub fn ingest(run: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let corpus = run
        .corpus
        .as_ref()
        .ok_or_else(|| UsageError("`ingest` needs --corpus".into()))?;
    let filter = TokenFilter::default()
        .with_files(run.keywords.as_deref(), run.stopwords.as_deref())
        .context("reading token lists")?;
    let parsed = ingest_file(corpus, &filter).with_context(|| format!("reading corpus {}", corpus.display()))?;
    if parsed.records.is_empty() {
        bail!("no records in {} ({} lines read)", corpus.display(), parsed.report.lines);
    }
    let vocabs = match &run.vocab_from {
        Some(dir) => read_vocabs(dir).with_context(|| format!("reading vocabularies from {}", dir.display()))?,
        None => build_vocab(&parsed.records, run.min_frequency, run.max_vocab),
    };
    let mut report = parsed.report;
    let ds = build_dataset(&parsed.records, &vocabs, run.lengths, &mut report);
    write_dataset(&run.data_dir, &ds, &vocabs, &report)
        .with_context(|| format!("writing dataset {}", run.data_dir.display()))?;
    write!(out, "{report}")?;
    writeln!(
        out,
        "wrote {} records to {} (code vocabulary {}, description vocabulary {})",
        ds.len(),
        run.data_dir.display(),
        vocabs.code.len(),
        vocabs.desc.len()
    )?;
    Ok(())
}

pub fn train_cmd(run: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let (ds, vocabs) = load_dataset(&run.data_dir)?;
    let config = model_config(run, &ds, &vocabs);
    let model = Model::<f32>::init(config, run.train.seed).context("building model")?;
    let curve_path = &run.loss_curve;
    let mut curve = File::create(curve_path).with_context(|| format!("creating {}", curve_path.display()))?;
    let mut write_err = None;
    let outcome = train(&ds.records, model, &run.train, |p| {
        let line = serde_json::to_string(p).expect("curve point serializes");
        if let Err(e) = writeln!(curve, "{line}").and_then(|_| curve.flush()) {
            write_err.get_or_insert(e);
        }
        let val = p.val_mrr.map_or(String::new(), |v| format!(" val_mrr {v:.4}"));
        eprintln!("epoch {:>3}  step {:>6}  loss {:.5}{val}", p.epoch, p.step, p.loss);
    })
    .context("training")?;
    if let Some(e) = write_err {
        return Err(e).with_context(|| format!("writing {}", curve_path.display()));
    }
    let t = &run.train;
    let mut extra = vec![
        ("batch_size".to_string(), t.batch_size.to_string()),
        ("dropout".into(), t.dropout.to_string()),
        ("lr".into(), t.adam.lr.to_string()),
        ("beta1".into(), t.adam.beta1.to_string()),
        ("beta2".into(), t.adam.beta2.to_string()),
        ("eps".into(), format!("{:e}", t.adam.eps)),
        ("epochs".into(), t.epochs.to_string()),
        ("seed".into(), t.seed.to_string()),
        ("negatives".into(), t.negatives.to_string()),
        ("val_fraction".into(), t.val_fraction.to_string()),
        ("best_epoch".into(), outcome.best_epoch.to_string()),
    ];
    if let Some(v) = outcome.best_val_mrr {
        extra.push(("best_val_mrr".into(), v.to_string()));
    }
    checkpoint::save(&run.checkpoint, &outcome.best, &extra)
        .with_context(|| format!("writing checkpoint {}", run.checkpoint.display()))?;
    let last = outcome.curve.last().map_or(f64::NAN, |p| p.loss);
    writeln!(
        out,
        "trained {} for {} epochs: final loss {last:.5}, kept epoch {}; checkpoint {}",
        config.variant,
        t.epochs,
        outcome.best_epoch,
        run.checkpoint.display()
    )?;
    Ok(())
}

fn eval_set(run: &RunConfig) -> Result<(Dataset, Vocabularies)> {
    load_dataset(run.eval_dir.as_ref().unwrap_or(&run.data_dir))
}

pub fn eval_cmd(run: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let (ds, vocabs) = eval_set(run)?;
    let model = load_model(run, &ds, &vocabs)?;
    let queries: Vec<_> = ds.records.iter().map(|r| &r.desc).collect();
    let codes: Vec<_> = ds.records.iter().map(|r| &r.code).collect();
    let truths: Vec<usize> = (0..ds.len()).collect();
    let spec = PoolSpec {
        size: run.pool_size,
        seed: run.train.seed,
    };
    let label = model.config().variant.name();
    let report = evaluate(&label, &model, &queries, &codes, &truths, spec).context("evaluating")?;
    write!(out, "{}", render_table(std::slice::from_ref(&report)))?;
    if let Some(path) = &run.report {
        append_lines(path, &[report.to_json_line()])?;
    }
    Ok(())
}

/// Per-variant checkpoint path: `model.ckpt` becomes `model.ckpt.RM`.
pub fn variant_checkpoint(base: &Path, variant: &str) -> std::path::PathBuf {
    let mut s = base.as_os_str().to_owned();
    s.push(format!(".{variant}"));
    s.into()
}

pub fn ablate(run: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let (train_ds, vocabs) = load_dataset(&run.data_dir)?;
    let test = match &run.eval_dir {
        Some(dir) => {
            let (test, test_vocabs) = load_dataset(dir)?;
            if test_vocabs.code.words() != vocabs.code.words() || test_vocabs.desc.words() != vocabs.desc.words() {
                bail!(
                    "{} and {} use different vocabularies (ingest one with --vocab-from the other)",
                    run.data_dir.display(),
                    dir.display()
                );
            }
            if test.lengths != train_ds.lengths {
                bail!("{} and {} use different sequence lengths", run.data_dir.display(), dir.display());
            }
            test.records
        }
        None => train_ds.records.clone(),
    };
    let base = model_config(run, &train_ds, &vocabs);
    let spec = PoolSpec {
        size: run.pool_size,
        seed: run.train.seed,
    };
    let mut rows = Vec::with_capacity(run.variants.len());
    for &variant in &run.variants {
        let (row, model) = run_variant(variant, &base, &run.train, &train_ds.records, &test, spec, |p| {
            eprintln!("{variant:<6} epoch {:>3}  loss {:.5}", p.epoch, p.loss);
        })
        .with_context(|| format!("ablation variant {variant}"))?;
        let path = variant_checkpoint(&run.checkpoint, &variant.name());
        checkpoint::save(&path, &model, &[("seed".into(), run.train.seed.to_string())])
            .with_context(|| format!("writing checkpoint {}", path.display()))?;
        rows.push(row);
    }
    write!(out, "{}", render_ablation(&rows))?;
    if let Some(path) = &run.report {
        let lines: Vec<String> = rows
            .iter()
            .map(|r| serde_json::to_string(r).expect("row serializes"))
            .collect();
        append_lines(path, &lines)?;
    }
    Ok(())
}

/// A loaded checkpoint with its pre-encoded candidate codes.
pub struct SearchIndex {
    model: Model<f32>,
    dataset: Dataset,
    vocabs: Vocabularies,
    cache: FeatureCache<f32>,
    all: Vec<usize>,
}

/// One ranked result.
#[derive(Debug, Clone, PartialEq)]
pub struct Hit {
    pub rank: usize,
    pub score: f64,
    pub record: usize,
}

impl SearchIndex {
    pub fn open(run: &RunConfig) -> Result<Self> {
        let (dataset, vocabs) = load_dataset(&run.data_dir)?;
        let model = load_model(run, &dataset, &vocabs)?;
        let codes: Vec<_> = dataset.records.iter().map(|r| &r.code).collect();
        let cache = FeatureCache::build(&model, &[], &codes).context("encoding the index")?;
        let all = (0..dataset.len()).collect();
        Ok(Self {
            model,
            dataset,
            vocabs,
            cache,
            all,
        })
    }

    /// Top `k` codes for `text`, or `None` when no word of the query
    /// survives normalization.
    pub fn query(&mut self, text: &str, k: usize) -> Result<Option<Vec<Hit>>> {
        let seq = encode_query(text, &self.vocabs.desc, self.dataset.lengths.desc);
        if seq.valid() == 0 {
            return Ok(None);
        }
        self.cache.queries = vec![self.model.desc_features(&seq)?];
        let scores = score_pool(&self.model, &self.cache, 0, &self.all)?;
        let hits = rank_pool(&scores)
            .into_iter()
            .take(k)
            .enumerate()
            .map(|(i, c)| Hit {
                rank: i + 1,
                score: scores[c],
                record: c,
            })
            .collect();
        Ok(Some(hits))
    }

    pub fn render(&self, hits: &[Hit], out: &mut dyn Write) -> std::io::Result<()> {
        for h in hits {
            let r = &self.dataset.records[h.record];
            writeln!(out, "{:>3}  {:.4}  {}  {}", h.rank, h.score, r.method_name, excerpt(r, &self.vocabs))?;
        }
        Ok(())
    }
}

const EXCERPT_CHARS: usize = 72;

/// First source line, or the body tokens when no source was kept.
fn excerpt(r: &codesearch_core::corpus::EncodedRecord, vocabs: &Vocabularies) -> String {
    let text = match &r.raw_source {
        Some(src) => src.lines().map(str::trim).find(|l| !l.is_empty()).unwrap_or("").to_string(),
        None => r.code.tokens.decode(&vocabs.code).join(" "),
    };
    if text.chars().count() > EXCERPT_CHARS {
        let cut: String = text.chars().take(EXCERPT_CHARS).collect();
        format!("{cut}...")
    } else {
        text
    }
}

/// One-shot search when `query` is given, otherwise a read-eval loop over
/// `input` lines.
pub fn search(run: &RunConfig, query: Option<&str>, input: &mut dyn BufRead, out: &mut dyn Write) -> Result<()> {
    let mut index = SearchIndex::open(run)?;
    if let Some(q) = query {
        let hits = index
            .query(q, run.top_k)?
            .ok_or_else(|| UsageError(format!("query `{q}` has no words left after normalization")))?;
        index.render(&hits, out)?;
        return Ok(());
    }
    let interactive = std::io::IsTerminal::is_terminal(&std::io::stdin());
    loop {
        if interactive {
            eprint!("query> ");
        }
        let mut line = String::new();
        if input.read_line(&mut line)? == 0 {
            return Ok(());
        }
        match index.query(line.trim(), run.top_k)? {
            Some(hits) => index.render(&hits, out)?,
            None => writeln!(out, "(empty query, try again)")?,
        }
        out.flush()?;
    }
}
