use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use tract_onnx::prelude::*;
use tract_onnx::tract_hir::infer::Factoid;

use super::{BatchItem, ClassProbabilities, Classifier, InferenceError};
use crate::annotation::NUM_MODEL_CLASSES;
use crate::preprocess::MODEL_INPUT_SIDE;

/// How to read the model's `N×6` output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputKind {
    /// Rows that already form probability vectors are used as is; anything
    /// else is treated as logits.
    #[default]
    Auto,
    Logits,
    Probabilities,
}

type Plan = Arc<TypedRunnableModel>;

/// ONNX classifier with input `N×3×224×224` (channel-first, z-scored).
/// Models with a fixed batch of 1 are run one tile at a time.
pub struct ModelBackend {
    plan: Plan,
    fixed_batch: Option<usize>,
    output: OutputKind,
}

impl std::fmt::Debug for ModelBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ModelBackend").field("fixed_batch", &self.fixed_batch).field("output", &self.output).finish()
    }
}

const S: usize = MODEL_INPUT_SIDE as usize;

fn concrete(d: &TDim) -> Option<i64> {
    d.to_i64().ok()
}

impl ModelBackend {
    pub fn load(path: &Path, output: OutputKind) -> Result<Self, InferenceError> {
        let err = |reason: String| InferenceError::Model { path: path.display().to_string(), reason };
        if !path.exists() {
            return Err(InferenceError::Unavailable(format!("model file {} not found", path.display())));
        }
        let model = tract_onnx::onnx().model_for_path(path).map_err(|e| err(format!("{e:#}")))?;

        let declared = model.input_fact(0).map_err(|e| err(format!("{e:#}")))?;
        let declared_batch = match declared.shape.dims().next().and_then(|d| d.concretize()) {
            Some(d) => concrete(&d),
            None => None,
        };
        if let Some(rank) = declared.shape.rank().concretize() {
            if rank != 4 {
                return Err(InferenceError::Shape(format!("model input has rank {rank}, expected 4")));
            }
        }
        for (axis, want) in [(1, 3), (2, S as i64), (3, S as i64)] {
            if let Some(d) = declared.shape.dim(axis).and_then(|d| d.concretize()) {
                if concrete(&d).is_some_and(|v| v != want) {
                    return Err(InferenceError::Shape(format!("model input axis {axis} is {d}, expected {want}")));
                }
            }
        }

        let fixed_batch = match declared_batch {
            Some(b) if b >= 1 => Some(b as usize),
            _ => None,
        };
        let batch_dim: TDim = match fixed_batch {
            Some(b) => (b as i64).into(),
            None => model.symbols.sym("N").into(),
        };
        let fact = f32::fact([batch_dim, 3.into(), (S as i64).into(), (S as i64).into()]);
        let typed = model
            .with_input_fact(0, fact.into())
            .and_then(|m| m.into_optimized())
            .map_err(|e| err(format!("{e:#}")))?;

        let out = typed.output_fact(0).map_err(|e| err(format!("{e:#}")))?;
        let dims: Vec<TDim> = out.shape.iter().cloned().collect();
        let width = dims.last().and_then(concrete);
        if dims.len() != 2 || width != Some(NUM_MODEL_CLASSES as i64) {
            return Err(InferenceError::Shape(format!(
                "model output shape {:?}, expected N×{NUM_MODEL_CLASSES}",
                dims.iter().map(|d| d.to_string()).collect::<Vec<_>>()
            )));
        }
        let plan = typed.into_runnable().map_err(|e| err(format!("{e:#}")))?;
        Ok(Self { plan, fixed_batch, output })
    }

    fn run(&self, items: &[BatchItem<'_>]) -> Result<Vec<Vec<f64>>, InferenceError> {
        let n = items.len();
        let plane = S * S;
        let mut data = Vec::with_capacity(n * 3 * plane);
        for item in items {
            data.extend(item.tensor()?.to_chw());
        }
        let input = Tensor::from_shape(&[n, 3, S, S], &data)
            .map_err(|e| InferenceError::Shape(format!("{e:#}")))?;
        let outputs = self
            .plan
            .run(tvec!(input.into()))
            .map_err(|e| InferenceError::Unavailable(format!("model run failed: {e:#}")))?;
        let view = outputs[0]
            .to_plain_array_view::<f32>()
            .map_err(|e| InferenceError::Shape(format!("model output: {e:#}")))?;
        if view.shape() != [n, NUM_MODEL_CLASSES] {
            return Err(InferenceError::Shape(format!("model output shape {:?}", view.shape())));
        }
        view.outer_iter()
            .map(|row| {
                let row: Vec<f64> = row.iter().map(|&v| v as f64).collect();
                let probs = match self.output {
                    OutputKind::Probabilities => ClassProbabilities::normalize(&row)?,
                    OutputKind::Logits => ClassProbabilities::softmax(&row)?,
                    OutputKind::Auto => {
                        ClassProbabilities::normalize(&row).or_else(|_| ClassProbabilities::softmax(&row))?
                    }
                };
                Ok(probs.as_array().to_vec())
            })
            .collect()
    }
}

impl Classifier for ModelBackend {
    fn classify_raw(&self, batch: &[BatchItem<'_>]) -> Result<Vec<Vec<f64>>, InferenceError> {
        match self.fixed_batch {
            None => self.run(batch),
            Some(b) => {
                let mut out = Vec::with_capacity(batch.len());
                for chunk in batch.chunks(b) {
                    if chunk.len() != b {
                        return Err(InferenceError::Shape(format!(
                            "model has a fixed batch of {b}; got a trailing batch of {}",
                            chunk.len()
                        )));
                    }
                    out.extend(self.run(chunk)?);
                }
                Ok(out)
            }
        }
    }
}

#[cfg(test)]
#[path = "../../tests/common/onnx_fixture.rs"]
mod onnx_fixture;
