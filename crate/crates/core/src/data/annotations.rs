//! JSON schemas: annotations, split manifest, prediction dumps.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `annotations.json`: all videos of a dataset plus the label table.
/// A segment's `label` is the 1-based index into `labels`.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct AnnotationFile {
    pub labels: Vec<String>,
    pub videos: Vec<VideoAnnotation>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct VideoAnnotation {
    pub id: String,
    pub duration: f64,
    pub segments: Vec<SegmentAnn>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SegmentAnn {
    pub start: f64,
    pub end: f64,
    pub label: usize,
}

impl AnnotationFile {
    pub fn read(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::MissingInput(format!("{}", path.display())));
        }
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// `manifest.json`: feature dimensionality and split membership.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    pub feature_dim: usize,
    pub splits: BTreeMap<String, Vec<String>>,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::MissingInput(format!("{}", path.display())));
        }
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Prediction dump consumed by evaluation: same shape as annotations with a
/// per-segment score.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct PredictionFile {
    pub videos: Vec<VideoPredictions>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct VideoPredictions {
    pub id: String,
    pub segments: Vec<ScoredSegmentJson>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ScoredSegmentJson {
    pub start: f64,
    pub end: f64,
    pub label: usize,
    pub score: f64,
}

impl PredictionFile {
    pub fn read(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::MissingInput(format!("{}", path.display())));
        }
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn annotation_json_roundtrip() {
        let file = AnnotationFile {
            labels: vec!["walk".into(), "run".into()],
            videos: vec![VideoAnnotation {
                id: "v1".into(),
                duration: 12.25,
                segments: vec![SegmentAnn {
                    start: 1.5,
                    end: 3.75,
                    label: 2,
                }],
            }],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("annotations.json");
        file.write(&path).unwrap();
        assert_eq!(AnnotationFile::read(&path).unwrap(), file);
    }

    #[test]
    fn missing_file_is_missing_input() {
        let err = Manifest::read(Path::new("/nonexistent/manifest.json")).unwrap_err();
        assert!(matches!(err, Error::MissingInput(_)));
    }
}
