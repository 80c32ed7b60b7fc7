use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};

use super::*;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacroMetrics {
    pub accuracy: Option<f64>,
    pub f1: Option<f64>,
    pub auc: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
}

impl MacroMetrics {
    pub fn from_classes(per_class: &[ClassMetrics]) -> Self {
        let avg = |f: fn(&ClassMetrics) -> Option<f64>| {
            macro_average(&per_class.iter().map(f).collect::<Vec<_>>()).ok()
        };
        Self {
            accuracy: avg(|m| m.accuracy),
            f1: avg(|m| m.f1),
            auc: avg(|m| m.auc),
            sensitivity: avg(|m| m.sensitivity),
            specificity: avg(|m| m.specificity),
        }
    }
}

/// Full evaluation output. Undefined values serialize as `null`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub n_tiles: u64,
    pub classes: Vec<String>,
    pub confusion: ConfusionMatrix,
    pub per_class: Vec<ClassMetrics>,
    #[serde(rename = "macro")]
    pub macro_avg: MacroMetrics,
    pub binary: Vec<BinaryMetrics>,
    pub binary_options: BinaryOptions,
    /// Binary tasks that had no tiles, with the reason.
    pub skipped: Vec<String>,
}

impl EvaluationReport {
    pub fn compute(
        preds: &[GleasonClass],
        truths: &[GleasonClass],
        scores: &[[f64; K]],
        opts: BinaryOptions,
    ) -> Result<Self, MetricsError> {
        let confusion = confusion_matrix(preds, truths)?;
        let per_class = per_class_metrics(&confusion, scores, truths)?;
        let mut binary = Vec::new();
        let mut skipped = Vec::new();
        for task in [BinaryTask::CancerDetection, BinaryTask::FineClassification] {
            match binary_task_metrics(preds, truths, task, opts) {
                Ok(m) => binary.push(m),
                Err(e @ MetricsError::EmptyTask(_)) => skipped.push(e.to_string()),
                Err(e) => return Err(e),
            }
        }
        Ok(Self {
            n_tiles: confusion.total(),
            classes: GleasonClass::MODEL.iter().map(|c| c.name().to_string()).collect(),
            macro_avg: MacroMetrics::from_classes(&per_class),
            confusion,
            per_class,
            binary,
            binary_options: opts,
            skipped,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_text(&self) -> String {
        self.to_string()
    }
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.3}")).unwrap_or_else(|| "undef".into())
}

impl fmt::Display for EvaluationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = String::new();
        writeln!(s, "tiles evaluated: {}", self.n_tiles)?;
        writeln!(s)?;
        writeln!(s, "{:<16} {:>7} {:>7} {:>7} {:>7} {:>7} {:>8}", "class", "Acc", "F1", "AUC", "Sens", "Spec", "support")?;
        for m in &self.per_class {
            writeln!(
                s,
                "{:<16} {:>7} {:>7} {:>7} {:>7} {:>7} {:>8}",
                m.class.name(),
                cell(m.accuracy),
                cell(m.f1),
                cell(m.auc),
                cell(m.sensitivity),
                cell(m.specificity),
                m.support
            )?;
        }
        let a = &self.macro_avg;
        writeln!(
            s,
            "{:<16} {:>7} {:>7} {:>7} {:>7} {:>7}",
            "macro",
            cell(a.accuracy),
            cell(a.f1),
            cell(a.auc),
            cell(a.sensitivity),
            cell(a.specificity)
        )?;
        writeln!(s)?;
        writeln!(s, "{:<22} {:>7} {:>7} {:>7} {:>8}", "binary task", "Acc", "Sens", "Spec", "n")?;
        for b in &self.binary {
            let name = match b.task {
                BinaryTask::CancerDetection => "benign vs malignant",
                BinaryTask::FineClassification => "G3 vs G4+G5",
            };
            writeln!(
                s,
                "{:<22} {:>7} {:>7} {:>7} {:>8}",
                name,
                cell(Some(b.accuracy)),
                cell(b.sensitivity),
                cell(b.specificity),
                b.n
            )?;
        }
        for skip in &self.skipped {
            writeln!(s, "skipped: {skip}")?;
        }
        writeln!(s)?;
        writeln!(s, "confusion matrix (rows = truth, cols = prediction)")?;
        for (i, row) in self.confusion.counts.iter().enumerate() {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:>7}")).collect();
            writeln!(s, "{:<16} {}", GleasonClass::MODEL[i].name(), cells.join(" "))?;
        }
        f.write_str(s.trim_end())
    }
}
