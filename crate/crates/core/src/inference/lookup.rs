use std::collections::HashMap;
use std::path::Path;

use super::{BatchItem, Classifier, InferenceError};
use crate::annotation::NUM_MODEL_CLASSES;

pub const PROB_COLUMNS: [&str; NUM_MODEL_CLASSES] =
    ["p_regular", "p_g3", "p_g4", "p_g5", "p_art_empty", "p_art_sponge"];

/// Per-tile vectors keyed by `(slide_id, col, row)`. A `*` slide id matches
/// any slide; tiles not in the table get the uniform vector.
#[derive(Debug, Clone, Default)]
pub struct LookupBackend {
    table: HashMap<(String, u32, u32), Vec<f64>>,
}

impl LookupBackend {
    pub fn new(entries: impl IntoIterator<Item = ((String, u32, u32), Vec<f64>)>) -> Self {
        Self { table: entries.into_iter().collect() }
    }

    /// Reads a CSV with columns `slide_id,col,row,p_regular,…,p_art_sponge`
    /// (further columns are ignored). The prediction sidecar has this shape.
    pub fn load(path: &Path) -> Result<Self, InferenceError> {
        let err = |reason: String| InferenceError::Lookup { path: path.display().to_string(), reason };
        let mut r = csv::Reader::from_path(path).map_err(|e| err(e.to_string()))?;
        let headers = r.headers().map_err(|e| err(e.to_string()))?.clone();
        let col = |name: &str| headers.iter().position(|h| h.trim() == name).ok_or_else(|| err(format!("missing column {name}")));
        let (si, ci, ri) = (col("slide_id")?, col("col")?, col("row")?);
        let pi = PROB_COLUMNS.iter().map(|n| col(n)).collect::<Result<Vec<_>, _>>()?;
        let mut table = HashMap::new();
        for (line, rec) in r.records().enumerate() {
            let rec = rec.map_err(|e| err(e.to_string()))?;
            let field = |i: usize| rec.get(i).unwrap_or("").trim();
            let num = |i: usize| field(i).parse::<f64>().map_err(|e| err(format!("row {}: {e}", line + 2)));
            let int = |i: usize| field(i).parse::<u32>().map_err(|e| err(format!("row {}: {e}", line + 2)));
            let key = (field(si).to_string(), int(ci)?, int(ri)?);
            let probs = pi.iter().map(|&i| num(i)).collect::<Result<Vec<_>, _>>()?;
            table.insert(key, probs);
        }
        Ok(Self { table })
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    fn get(&self, item: &BatchItem<'_>) -> Option<&Vec<f64>> {
        let (c, r) = (item.coord.col, item.coord.row);
        self.table.get(&(item.slide_id.to_string(), c, r)).or_else(|| self.table.get(&("*".to_string(), c, r)))
    }
}

impl Classifier for LookupBackend {
    fn classify_raw(&self, batch: &[BatchItem<'_>]) -> Result<Vec<Vec<f64>>, InferenceError> {
        Ok(batch
            .iter()
            .map(|item| self.get(item).cloned().unwrap_or_else(|| vec![1.0 / NUM_MODEL_CLASSES as f64; NUM_MODEL_CLASSES]))
            .collect())
    }

    fn needs_pixels(&self) -> bool {
        false
    }
}
