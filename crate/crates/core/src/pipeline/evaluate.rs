use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::{Context, PipelineError};
use crate::dataset;
use crate::metrics::{BinaryOptions, EvaluationReport};
use crate::overlay;

#[derive(Debug, Clone, Serialize)]
pub struct EvaluateSummary {
    pub joined: usize,
    /// Prediction rows with no model-class truth row.
    pub unmatched_predictions: usize,
    /// Model-class truth rows with no prediction.
    pub unmatched_truths: usize,
    pub json: PathBuf,
    pub text: PathBuf,
    pub report: EvaluationReport,
}

/// Joins predictions to truth labels on `(slide_id, col, row)` and writes
/// the report as JSON to `report_path` and as a text table next to it.
pub fn evaluate(
    pred_csv: &Path,
    truth_manifest: &Path,
    report_path: &Path,
    opts: BinaryOptions,
) -> Result<EvaluateSummary, PipelineError> {
    let preds = overlay::read_sidecar(pred_csv).context(|| format!("reading predictions {}", pred_csv.display()))?;
    let truths = dataset::read_manifest(truth_manifest)
        .context(|| format!("reading truth manifest {}", truth_manifest.display()))?;
    let truth_rows: Vec<_> = truths.iter().filter(|r| r.class().is_some_and(|c| c.model_index().is_some())).collect();

    let mut by_key: HashMap<(&str, u32, u32), usize> = HashMap::with_capacity(preds.len());
    for (i, p) in preds.iter().enumerate() {
        by_key.insert((p.slide_id.as_str(), p.coord.col, p.coord.row), i);
    }
    let mut pred_labels = Vec::new();
    let mut truth_labels = Vec::new();
    let mut scores = Vec::new();
    let mut used = vec![false; preds.len()];
    for t in &truth_rows {
        if let Some(&i) = by_key.get(&(t.slide_id.as_str(), t.col, t.row)) {
            used[i] = true;
            pred_labels.push(preds[i].label);
            truth_labels.push(t.class().expect("filtered above"));
            scores.push(*preds[i].probs.as_array());
        }
    }
    let joined = truth_labels.len();
    if joined == 0 {
        return Err(PipelineError::EmptyJoin { predictions: preds.len(), truths: truth_rows.len() });
    }
    let unmatched_predictions = used.iter().filter(|u| !**u).count();
    let unmatched_truths = truth_rows.len() - joined;
    if unmatched_predictions + unmatched_truths > 0 {
        tracing::warn!(unmatched_predictions, unmatched_truths, "rows without a partner were skipped");
    }

    let report = EvaluationReport::compute(&pred_labels, &truth_labels, &scores, opts)
        .context(|| "computing metrics".into())?;
    let text_path = report_path.with_extension("txt");
    std::fs::write(report_path, report.to_json() + "\n").context(|| format!("writing {}", report_path.display()))?;
    std::fs::write(&text_path, report.to_text() + "\n").context(|| format!("writing {}", text_path.display()))?;
    Ok(EvaluateSummary {
        joined,
        unmatched_predictions,
        unmatched_truths,
        json: report_path.to_path_buf(),
        text: text_path,
        report,
    })
}
