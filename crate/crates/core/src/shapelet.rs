//! The interpretable output artifact and its JSON dump.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Where a shapelet's source candidate came from in the training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub candidate: usize,
    pub instance: usize,
    pub variable: usize,
    pub start: usize,
    pub length: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Shapelet {
    pub values: Vec<f64>,
    pub variable: usize,
    pub length: usize,
    #[serde(default)]
    pub provenance: Option<Provenance>,
    #[serde(default)]
    pub cluster_size_at_selection: usize,
    #[serde(default)]
    pub embedding: Vec<f64>,
}

impl Shapelet {
    /// A bare shapelet with no provenance.
    pub fn new(values: Vec<f64>, variable: usize) -> Self {
        Self {
            length: values.len(),
            values,
            variable,
            provenance: None,
            cluster_size_at_selection: 0,
            embedding: Vec::new(),
        }
    }
}

pub fn shapelets_to_json(shapelets: &[Shapelet]) -> String {
    serde_json::to_string_pretty(shapelets).expect("shapelets serialize")
}

pub fn shapelets_from_json(text: &str, origin: &str) -> Result<Vec<Shapelet>> {
    let shapelets: Vec<Shapelet> = serde_json::from_str(text).map_err(|e| Error::Artifact {
        path: origin.to_string(),
        message: e.to_string(),
    })?;
    for (i, s) in shapelets.iter().enumerate() {
        if s.values.len() != s.length || s.values.iter().any(|x| !x.is_finite()) {
            return Err(Error::Artifact {
                path: origin.to_string(),
                message: format!("shapelet {i} has inconsistent length or non-finite values"),
            });
        }
    }
    Ok(shapelets)
}

pub fn save_shapelets(shapelets: &[Shapelet], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, shapelets_to_json(shapelets)).map_err(|e| Error::io(path, e))
}

pub fn load_shapelets(path: impl AsRef<Path>) -> Result<Vec<Shapelet>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    shapelets_from_json(&text, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_round_trip_is_exact() {
        let mut s = Shapelet::new(vec![0.1, -2.0 / 3.0, 1e-300], 2);
        s.provenance = Some(Provenance {
            candidate: 7,
            instance: 1,
            variable: 2,
            start: 4,
            length: 3,
        });
        s.cluster_size_at_selection = 11;
        let text = shapelets_to_json(&[s.clone()]);
        assert_eq!(shapelets_from_json(&text, "x").unwrap(), vec![s]);
    }

    #[test]
    fn rejects_length_mismatch() {
        let text = r#"[{"values":[1.0,2.0],"variable":0,"length":3}]"#;
        assert!(shapelets_from_json(text, "x").is_err());
    }
}
