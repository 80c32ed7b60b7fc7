//! Tile-level evaluation: confusion matrix, one-vs-rest metrics with
//! midrank AUC, macro averages, binary grouping tasks and focal loss.

mod report;

use serde::{Deserialize, Serialize};

use crate::annotation::{GleasonClass, NUM_MODEL_CLASSES};

pub use report::{EvaluationReport, MacroMetrics};

const K: usize = NUM_MODEL_CLASSES;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricsError {
    #[error("length mismatch: {0} predictions vs {1} truths")]
    LengthMismatch(usize, usize),
    #[error("no samples to evaluate")]
    Empty,
    #[error("{0} is not one of the six model classes")]
    NotModelClass(GleasonClass),
    #[error("no defined values to average")]
    NothingToAverage,
    #[error("no tiles remain for the {0} task")]
    EmptyTask(&'static str),
    #[error("invalid focal loss parameters: {0}")]
    BadFocalParams(String),
}

fn model_index(c: GleasonClass) -> Result<usize, MetricsError> {
    c.model_index().ok_or(MetricsError::NotModelClass(c))
}

/// Rows are truth, columns prediction, both in model-class order.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; K]; K],
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..K).map(|i| self.counts[i][i]).sum()
    }

    pub fn row_sum(&self, i: usize) -> u64 {
        self.counts[i].iter().sum()
    }

    pub fn col_sum(&self, j: usize) -> u64 {
        self.counts.iter().map(|r| r[j]).sum()
    }

    /// (TP, FP, FN, TN) for class `c` against the rest.
    pub fn one_vs_rest(&self, c: usize) -> (u64, u64, u64, u64) {
        let tp = self.counts[c][c];
        let fp = self.col_sum(c) - tp;
        let fn_ = self.row_sum(c) - tp;
        (tp, fp, fn_, self.total() - tp - fp - fn_)
    }
}

pub fn confusion_matrix(preds: &[GleasonClass], truths: &[GleasonClass]) -> Result<ConfusionMatrix, MetricsError> {
    if preds.len() != truths.len() {
        return Err(MetricsError::LengthMismatch(preds.len(), truths.len()));
    }
    if preds.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut cm = ConfusionMatrix::default();
    for (&p, &t) in preds.iter().zip(truths) {
        cm.counts[model_index(t)?][model_index(p)?] += 1;
    }
    Ok(cm)
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// One-vs-rest metrics; `None` marks an undefined value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: GleasonClass,
    pub support: u64,
    pub accuracy: Option<f64>,
    pub f1: Option<f64>,
    pub auc: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
}

/// Twice the Mann–Whitney U statistic of `scores` for `positive`, computed
/// with midranks. Kept as an integer so it can be compared exactly.
pub fn mann_whitney_u2(scores: &[f64], positive: &[bool]) -> u128 {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank2_pos: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Positions i..=j (1-based i+1..=j+1) share midrank (i+j+2)/2.
        let rank2 = (i + j + 2) as u128;
        let pos = order[i..=j].iter().filter(|&&k| positive[k]).count() as u128;
        rank2_pos += rank2 * pos;
        i = j + 1;
    }
    let n_pos = positive.iter().filter(|p| **p).count() as u128;
    rank2_pos - n_pos * (n_pos + 1)
}

/// ROC AUC as the normalized Mann–Whitney statistic; undefined without
/// both positives and negatives.
pub fn auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|p| **p).count() as u128;
    let n_neg = positive.len() as u128 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    Some(mann_whitney_u2(scores, positive) as f64 / (2 * n_pos * n_neg) as f64)
}

pub fn per_class_metrics(
    cm: &ConfusionMatrix,
    scores: &[[f64; K]],
    truths: &[GleasonClass],
) -> Result<Vec<ClassMetrics>, MetricsError> {
    if scores.len() != truths.len() {
        return Err(MetricsError::LengthMismatch(scores.len(), truths.len()));
    }
    let truth_idx = truths.iter().map(|&t| model_index(t)).collect::<Result<Vec<_>, _>>()?;
    let n = cm.total();
    Ok(GleasonClass::MODEL
        .iter()
        .enumerate()
        .map(|(c, &class)| {
            let (tp, fp, fn_, tn) = cm.one_vs_rest(c);
            let positive: Vec<bool> = truth_idx.iter().map(|&t| t == c).collect();
            let column: Vec<f64> = scores.iter().map(|s| s[c]).collect();
            ClassMetrics {
                class,
                support: tp + fn_,
                accuracy: ratio(tp + tn, n),
                f1: ratio(2 * tp, 2 * tp + fp + fn_),
                auc: auc(&column, &positive),
                sensitivity: ratio(tp, tp + fn_),
                specificity: ratio(tn, tn + fp),
            }
        })
        .collect())
}

/// Mean of the defined values.
pub fn macro_average(values: &[Option<f64>]) -> Result<f64, MetricsError> {
    let defined: Vec<f64> = values.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(MetricsError::NothingToAverage);
    }
    Ok(defined.iter().sum::<f64>() / defined.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BinaryTask {
    /// Benign vs malignant: Regular against Gleason 3/4/5.
    #[default]
    CancerDetection,
    /// Gleason 3 against Gleason 4/5.
    FineClassification,
}

impl BinaryTask {
    pub fn name(self) -> &'static str {
        match self {
            BinaryTask::CancerDetection => "cancer_detection",
            BinaryTask::FineClassification => "fine_classification",
        }
    }
}

/// How artefact truths enter the cancer-detection task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ArtefactMode {
    #[default]
    Exclude,
    /// Count artefact truths as benign.
    Benign,
}

/// Which truths enter the fine-classification task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FineScope {
    #[default]
    MalignantTruths,
    AllTiles,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct BinaryOptions {
    pub artefacts: ArtefactMode,
    pub fine_scope: FineScope,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinaryMetrics {
    pub task: BinaryTask,
    pub n: u64,
    pub accuracy: f64,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
}

fn positive_in(task: BinaryTask, c: GleasonClass) -> bool {
    match task {
        BinaryTask::CancerDetection => c.is_malignant(),
        BinaryTask::FineClassification => matches!(c, GleasonClass::Gleason4 | GleasonClass::Gleason5),
    }
}

fn included(task: BinaryTask, opts: BinaryOptions, truth: GleasonClass) -> bool {
    match task {
        BinaryTask::CancerDetection => !truth.is_artefact() || opts.artefacts == ArtefactMode::Benign,
        BinaryTask::FineClassification => truth.is_malignant() || opts.fine_scope == FineScope::AllTiles,
    }
}

pub fn binary_task_metrics(
    preds: &[GleasonClass],
    truths: &[GleasonClass],
    task: BinaryTask,
    opts: BinaryOptions,
) -> Result<BinaryMetrics, MetricsError> {
    if preds.len() != truths.len() {
        return Err(MetricsError::LengthMismatch(preds.len(), truths.len()));
    }
    let (mut tp, mut fp, mut fn_, mut tn) = (0u64, 0u64, 0u64, 0u64);
    for (&p, &t) in preds.iter().zip(truths) {
        model_index(p)?;
        model_index(t)?;
        if !included(task, opts, t) {
            continue;
        }
        match (positive_in(task, t), positive_in(task, p)) {
            (true, true) => tp += 1,
            (true, false) => fn_ += 1,
            (false, true) => fp += 1,
            (false, false) => tn += 1,
        }
    }
    let n = tp + fp + fn_ + tn;
    if n == 0 {
        return Err(MetricsError::EmptyTask(task.name()));
    }
    Ok(BinaryMetrics {
        task,
        n,
        accuracy: (tp + tn) as f64 / n as f64,
        sensitivity: ratio(tp, tp + fn_),
        specificity: ratio(tn, tn + fp),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FocalLossParams {
    pub alpha: [f64; K],
    pub gamma: f64,
}

impl Default for FocalLossParams {
    fn default() -> Self {
        Self { alpha: [1.0; K], gamma: 2.0 }
    }
}

impl FocalLossParams {
    pub fn validate(&self) -> Result<(), MetricsError> {
        if self.alpha.iter().any(|a| !a.is_finite() || *a < 0.0) {
            return Err(MetricsError::BadFocalParams(format!("alpha must be non-negative: {:?}", self.alpha)));
        }
        if !self.gamma.is_finite() || self.gamma < 0.0 {
            return Err(MetricsError::BadFocalParams(format!("gamma must be non-negative: {}", self.gamma)));
        }
        Ok(())
    }
}

pub const FOCAL_EPSILON: f64 = 1e-12;

/// `−α_t·(1 − p_t)^γ·ln p_t` with `p_t` clamped to `[ε, 1]`.
pub fn focal_loss(probs: &[f64; K], truth: usize, params: &FocalLossParams) -> f64 {
    let p = probs[truth].clamp(FOCAL_EPSILON, 1.0);
    let loss = -params.alpha[truth] * (1.0 - p).powf(params.gamma) * p.ln();
    loss.max(0.0)
}
