//! Trains and evaluates every model variant under identical settings.

use std::fmt::Write as _;

use serde::Serialize;

use crate::corpus::EncodedRecord;
use crate::eval::{evaluate, EvalReport, PoolSpec};
use crate::model::{Model, ModelConfig, Variant};
use crate::trainer::{train, CurvePoint, TrainConfig, TrainError};

/// One row of an ablation table.
#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub scorer_width: usize,
    pub params: usize,
    pub best_epoch: usize,
    #[serde(flatten)]
    pub report: EvalReport,
}

/// Trains `variant` from `base` on `train_records` and ranks every test
/// query against all test codes (or pools of `pool.size`). Returns the row
/// and the selected model.
pub fn run_variant(
    variant: Variant,
    base: &ModelConfig,
    train_config: &TrainConfig,
    train_records: &[EncodedRecord],
    test_records: &[EncodedRecord],
    pool: PoolSpec,
    on_epoch: impl FnMut(&CurvePoint),
) -> Result<(AblationRow, Model<f32>), TrainError> {
    let config = ModelConfig { variant, ..*base };
    let model = Model::<f32>::init(config, train_config.seed)?;
    let params = model.params().numel();
    let outcome = train(train_records, model, train_config, on_epoch)?;
    let queries: Vec<_> = test_records.iter().map(|r| &r.desc).collect();
    let codes: Vec<_> = test_records.iter().map(|r| &r.code).collect();
    let truths: Vec<usize> = (0..test_records.len()).collect();
    let report = evaluate(&variant.name(), &outcome.best, &queries, &codes, &truths, pool)?;
    let row = AblationRow {
        variant: variant.name(),
        scorer_width: config.scorer_width(),
        params,
        best_epoch: outcome.best_epoch,
        report,
    };
    Ok((row, outcome.best))
}

/// Runs [`run_variant`] for each of `variants` in order.
pub fn run_ablation(
    variants: &[Variant],
    base: &ModelConfig,
    train_config: &TrainConfig,
    train_records: &[EncodedRecord],
    test_records: &[EncodedRecord],
    pool: PoolSpec,
    mut on_epoch: impl FnMut(Variant, &CurvePoint),
) -> Result<Vec<AblationRow>, TrainError> {
    variants
        .iter()
        .map(|&v| {
            run_variant(v, base, train_config, train_records, test_records, pool, |p| on_epoch(v, p)).map(|(row, _)| row)
        })
        .collect()
}

/// Aligned table with one line per variant.
pub fn render_ablation(rows: &[AblationRow]) -> String {
    let width = rows.iter().map(|r| r.variant.len()).max().unwrap_or(0).max(7);
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<width$}  {:>6}  {:>8}  {:>8}  {:>9}  {:>6}  {:>6}",
        "variant", "width", "Recall@1", "Recall@5", "Recall@10", "MRR", "NDCG"
    );
    for r in rows {
        let e = &r.report;
        let _ = writeln!(
            out,
            "{:<width$}  {:>6}  {:>8.3}  {:>8.3}  {:>9.3}  {:>6.3}  {:>6.3}",
            r.variant, r.scorer_width, e.recall_at_1, e.recall_at_5, e.recall_at_10, e.mrr, e.ndcg
        );
    }
    out
}
