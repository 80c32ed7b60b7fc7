//! Six-class tile classifiers behind a common batch contract.
//!
//! Backends: a CSV lookup table, an ONNX model file (run with tract) and a
//! remote HTTP service speaking `POST /v1/classify`.

mod lookup;
mod onnx;
mod remote;

use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::annotation::{GleasonClass, NUM_MODEL_CLASSES};
use crate::preprocess::{TileTensor, MODEL_INPUT_SIDE};
use crate::wsi_io::TileCoord;

pub use lookup::LookupBackend;
pub use onnx::{ModelBackend, OutputKind};
pub use remote::{decode_pixels, encode_pixels, ClassifyRequest, ClassifyResponse, RemoteBackend, RemoteConfig, RemoteResult, RemoteTile};

pub const DEFAULT_BATCH_SIZE: usize = 28;
/// Backend outputs whose sum is off by at most this are renormalized.
pub const RENORMALIZE_TOLERANCE: f64 = 1e-3;

#[derive(Debug, thiserror::Error)]
pub enum InferenceError {
    #[error("backend unavailable: {0}")]
    Unavailable(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("probability vector {probs:?} cannot be normalized: {reason}")]
    NotNormalizable { probs: Vec<f64>, reason: String },
    #[error("batch of {got} tiles outside 1..={max}")]
    BatchSize { got: usize, max: usize },
    #[error("backend returned {got} results for {expected} tiles")]
    CountMismatch { expected: usize, got: usize },
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("HTTP status {0} from remote backend")]
    Status(u16),
    #[error("transport failure after {attempts} attempts: {reason}")]
    Transport { attempts: u32, reason: String },
    #[error("model {path}: {reason}")]
    Model { path: String, reason: String },
    #[error("lookup table {path}: {reason}")]
    Lookup { path: String, reason: String },
}

/// A probability vector over the six model classes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassProbabilities {
    probs: [f64; NUM_MODEL_CLASSES],
}

impl ClassProbabilities {
    pub fn uniform() -> Self {
        Self { probs: [1.0 / NUM_MODEL_CLASSES as f64; NUM_MODEL_CLASSES] }
    }

    /// Validates a raw backend vector, rescaling it when its sum is within
    /// [`RENORMALIZE_TOLERANCE`] of 1.
    pub fn normalize(raw: &[f64]) -> Result<Self, InferenceError> {
        let bad = |reason: &str| InferenceError::NotNormalizable { probs: raw.to_vec(), reason: reason.into() };
        if raw.len() != NUM_MODEL_CLASSES {
            return Err(InferenceError::Shape(format!("expected {NUM_MODEL_CLASSES} probabilities, got {}", raw.len())));
        }
        if raw.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(bad("entries must be finite and non-negative"));
        }
        let sum: f64 = raw.iter().sum();
        if (sum - 1.0).abs() > RENORMALIZE_TOLERANCE {
            return Err(bad(&format!("sum {sum} deviates from 1 by more than {RENORMALIZE_TOLERANCE}")));
        }
        let mut probs = [0.0; NUM_MODEL_CLASSES];
        // Sums off by rounding only are left alone so exact inputs stay exact.
        let scale = if (sum - 1.0).abs() <= 1e-12 { 1.0 } else { sum };
        for (p, r) in probs.iter_mut().zip(raw) {
            *p = (r / scale).min(1.0);
        }
        Ok(Self { probs })
    }

    pub fn softmax(logits: &[f64]) -> Result<Self, InferenceError> {
        if logits.iter().any(|l| !l.is_finite()) {
            return Err(InferenceError::NotNormalizable { probs: logits.to_vec(), reason: "non-finite logit".into() });
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exp: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let sum: f64 = exp.iter().sum();
        Self::normalize(&exp.iter().map(|e| e / sum).collect::<Vec<_>>())
    }

    pub fn as_array(&self) -> &[f64; NUM_MODEL_CLASSES] {
        &self.probs
    }

    pub fn get(&self, c: GleasonClass) -> f64 {
        c.model_index().map_or(0.0, |i| self.probs[i])
    }

    /// Index of the largest probability; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for i in 1..NUM_MODEL_CLASSES {
            if self.probs[i] > self.probs[best] {
                best = i;
            }
        }
        best
    }

    pub fn label(&self) -> GleasonClass {
        GleasonClass::MODEL[self.argmax()]
    }

    pub fn max(&self) -> f64 {
        self.probs[self.argmax()]
    }
}

impl fmt::Display for ClassProbabilities {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.probs.iter().map(|p| format!("{p:.4}")).collect();
        write!(f, "[{}]", parts.join(", "))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub slide_id: String,
    pub coord: TileCoord,
    pub probs: ClassProbabilities,
    pub label: GleasonClass,
}

impl Prediction {
    pub fn new(slide_id: impl Into<String>, coord: TileCoord, probs: ClassProbabilities) -> Self {
        Self { slide_id: slide_id.into(), coord, label: probs.label(), probs }
    }
}

/// One tile handed to a backend. `tensor` is `None` for backends that do
/// not look at pixels.
#[derive(Debug, Clone, Copy)]
pub struct BatchItem<'a> {
    pub slide_id: &'a str,
    pub coord: TileCoord,
    pub tensor: Option<&'a TileTensor>,
}

impl<'a> BatchItem<'a> {
    pub fn id(&self) -> String {
        format!("{}_{}_{}", self.slide_id, self.coord.col, self.coord.row)
    }

    fn tensor(&self) -> Result<&'a TileTensor, InferenceError> {
        self.tensor.ok_or_else(|| InferenceError::Shape(format!("tile {} has no tensor", self.id())))
    }
}

pub trait Classifier: Send + Sync {
    /// Raw per-tile output, one vector per item in order; normalization is
    /// applied by [`classify_batch`].
    fn classify_raw(&self, batch: &[BatchItem<'_>]) -> Result<Vec<Vec<f64>>, InferenceError>;

    /// Whether the backend reads pixels (lookup tables do not).
    fn needs_pixels(&self) -> bool {
        true
    }
}

/// Runs one batch and returns validated probability vectors in input order.
pub fn classify_batch(
    backend: &dyn Classifier,
    batch_size: usize,
    batch: &[BatchItem<'_>],
) -> Result<Vec<ClassProbabilities>, InferenceError> {
    if batch.is_empty() || batch.len() > batch_size {
        return Err(InferenceError::BatchSize { got: batch.len(), max: batch_size });
    }
    if backend.needs_pixels() {
        for item in batch {
            let t = item.tensor()?;
            let expected = (MODEL_INPUT_SIDE * MODEL_INPUT_SIDE * 3) as usize;
            if t.side != MODEL_INPUT_SIDE || t.values.len() != expected {
                return Err(InferenceError::Shape(format!(
                    "tile {} is {}x{}x3 ({} values), expected {MODEL_INPUT_SIDE}x{MODEL_INPUT_SIDE}x3",
                    item.id(),
                    t.side,
                    t.side,
                    t.values.len()
                )));
            }
        }
    }
    let raw = backend.classify_raw(batch)?;
    if raw.len() != batch.len() {
        return Err(InferenceError::CountMismatch { expected: batch.len(), got: raw.len() });
    }
    raw.iter().map(|v| ClassProbabilities::normalize(v)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendKind {
    Lookup { path: PathBuf },
    ModelFile {
        path: PathBuf,
        #[serde(default)]
        output: OutputKind,
    },
    Remote(RemoteConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendSpec {
    #[serde(flatten)]
    pub kind: BackendKind,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
}

fn default_batch_size() -> usize {
    DEFAULT_BATCH_SIZE
}

impl BackendSpec {
    pub fn new(kind: BackendKind) -> Self {
        Self { kind, batch_size: DEFAULT_BATCH_SIZE }
    }

    pub fn validate(&self) -> Result<(), InferenceError> {
        if self.batch_size == 0 {
            return Err(InferenceError::BatchSize { got: 0, max: 0 });
        }
        Ok(())
    }

    pub fn load(&self) -> Result<Box<dyn Classifier>, InferenceError> {
        self.validate()?;
        Ok(match &self.kind {
            BackendKind::Lookup { path } => Box::new(LookupBackend::load(path)?),
            BackendKind::ModelFile { path, output } => Box::new(ModelBackend::load(path, *output)?),
            BackendKind::Remote(cfg) => Box::new(RemoteBackend::new(cfg.clone())?),
        })
    }
}

/// Classifies items in consecutive batches of at most `batch_size`.
pub fn classify_all(
    backend: &dyn Classifier,
    batch_size: usize,
    items: &[BatchItem<'_>],
) -> Result<Vec<ClassProbabilities>, InferenceError> {
    let mut out = Vec::with_capacity(items.len());
    for chunk in items.chunks(batch_size.max(1)) {
        out.extend(classify_batch(backend, batch_size, chunk)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization_tolerance() {
        let p = ClassProbabilities::normalize(&[0.2 * 1.0005; 6]);
        assert!(p.is_err(), "sum 1.2006 is far outside tolerance");
        let p = ClassProbabilities::normalize(&[1.0005 / 6.0; 6]).unwrap();
        assert!((p.as_array().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(ClassProbabilities::normalize(&[0.5, 0.5, 0.1, 0.0, 0.0, 0.0]).is_err());
        assert!(ClassProbabilities::normalize(&[1.0, 0.0, 0.0, 0.0, 0.0]).is_err());
        assert!(ClassProbabilities::normalize(&[1.1, -0.1, 0.0, 0.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn softmax_and_argmax() {
        let u = ClassProbabilities::softmax(&[0.0; 6]).unwrap();
        for p in u.as_array() {
            assert!((p - 1.0 / 6.0).abs() < 1e-15);
        }
        assert_eq!(u.argmax(), 0);
        assert_eq!(u.label(), GleasonClass::Regular);
        let p = ClassProbabilities::normalize(&[0.1, 0.3, 0.3, 0.1, 0.1, 0.1]).unwrap();
        assert_eq!(p.label(), GleasonClass::Gleason3);
        let big = ClassProbabilities::softmax(&[1000.0, 0.0, 0.0, 0.0, 0.0, 1000.0]).unwrap();
        assert_eq!(big.argmax(), 0);
    }

    struct Fixed(Vec<Vec<f64>>);
    impl Classifier for Fixed {
        fn classify_raw(&self, batch: &[BatchItem<'_>]) -> Result<Vec<Vec<f64>>, InferenceError> {
            Ok(self.0.iter().take(batch.len()).cloned().collect())
        }
        fn needs_pixels(&self) -> bool {
            false
        }
    }

    #[test]
    fn batch_contract() {
        let item = BatchItem { slide_id: "s", coord: TileCoord::new(0, 0), tensor: None };
        let b = Fixed(vec![vec![0.2 * 1.0005 * 5.0 / 6.0; 6]]);
        let out = classify_batch(&b, 4, &[item]).unwrap();
        assert!((out[0].as_array().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(matches!(classify_batch(&b, 4, &[]), Err(InferenceError::BatchSize { .. })));
        assert!(matches!(classify_batch(&b, 1, &[item, item]), Err(InferenceError::BatchSize { .. })));
        assert!(matches!(classify_batch(&b, 4, &[item, item]), Err(InferenceError::CountMismatch { .. })));
    }

    #[test]
    fn pixel_backends_check_shape() {
        struct Pix;
        impl Classifier for Pix {
            fn classify_raw(&self, b: &[BatchItem<'_>]) -> Result<Vec<Vec<f64>>, InferenceError> {
                Ok(vec![vec![1.0 / 6.0; 6]; b.len()])
            }
        }
        let small = TileTensor { side: 8, values: vec![0.0; 8 * 8 * 3] };
        let item = BatchItem { slide_id: "s", coord: TileCoord::new(0, 0), tensor: Some(&small) };
        assert!(matches!(classify_batch(&Pix, 4, &[item]), Err(InferenceError::Shape(_))));
        let none = BatchItem { tensor: None, ..item };
        assert!(matches!(classify_batch(&Pix, 4, &[none]), Err(InferenceError::Shape(_))));
    }

    #[test]
    fn backend_spec_toml_shape() {
        let spec: BackendSpec = serde_json::from_str(r#"{"kind":"lookup","path":"p.csv"}"#).unwrap();
        assert_eq!(spec.batch_size, 28);
        assert_eq!(spec.kind, BackendKind::Lookup { path: "p.csv".into() });
    }
}
