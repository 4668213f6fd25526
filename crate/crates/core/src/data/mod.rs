//! Dataset formats, loaders, and the synthetic feature-sequence generator.

mod annotations;
mod format;
mod synth;

pub use annotations::{
    AnnotationFile, Manifest, PredictionFile, ScoredSegmentJson, SegmentAnn, VideoAnnotation,
    VideoPredictions,
};
pub use format::{parse_feature_bytes, read_feature_file, write_feature_file};
pub use synth::{generate_synthetic, SynthConfig, SynthDataset};

use std::collections::BTreeMap;
use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// One video's feature sequence with timing metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    pub video_id: String,
    /// `[T, D]` features.
    pub values: Tensor,
    /// Seconds represented by one feature row.
    pub delta_seconds: f64,
    pub duration_seconds: f64,
}

impl FeatureSequence {
    pub fn t_len(&self) -> usize {
        self.values.rows()
    }

    pub fn dim(&self) -> usize {
        self.values.cols()
    }

    /// Temporal extent covered by the feature grid, in seconds.
    pub fn grid_extent(&self) -> f64 {
        self.t_len() as f64 * self.delta_seconds
    }

    pub fn validate(&self) -> Result<()> {
        if !self.delta_seconds.is_finite() || self.delta_seconds <= 0.0 {
            return Err(Error::Config(format!(
                "{}: delta_seconds must be positive",
                self.video_id
            )));
        }
        if !self.duration_seconds.is_finite() || self.duration_seconds <= 0.0 {
            return Err(Error::Config(format!(
                "{}: duration must be positive",
                self.video_id
            )));
        }
        if self.grid_extent() > self.duration_seconds + self.delta_seconds {
            return Err(Error::Config(format!(
                "{}: T*delta {} exceeds duration {} by more than one delta",
                self.video_id,
                self.grid_extent(),
                self.duration_seconds
            )));
        }
        if !self.values.all_finite() {
            return Err(Error::numeric(format!("features of {}", self.video_id)));
        }
        Ok(())
    }
}

/// Ground-truth action segment in seconds, with a 1-based class id.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ActionSegment {
    pub start: f64,
    pub end: f64,
    pub class_id: usize,
}

impl ActionSegment {
    pub fn validate(&self, duration: f64, num_classes: usize) -> Result<()> {
        if !(self.start >= 0.0 && self.start < self.end && self.end <= duration) {
            return Err(Error::Config(format!(
                "segment [{}, {}] invalid for duration {duration}",
                self.start, self.end
            )));
        }
        if self.class_id == 0 || self.class_id > num_classes {
            return Err(Error::Config(format!(
                "segment class {} outside 1..={num_classes}",
                self.class_id
            )));
        }
        Ok(())
    }

    pub fn length(&self) -> f64 {
        self.end - self.start
    }

    pub fn center(&self) -> f64 {
        0.5 * (self.start + self.end)
    }
}

/// One video with features and ground truth.
#[derive(Clone, Debug)]
pub struct VideoData {
    pub features: FeatureSequence,
    pub segments: Vec<ActionSegment>,
}

/// An in-memory split of a dataset.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub labels: Vec<String>,
    pub videos: Vec<VideoData>,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.labels.len()
    }
}

/// Load one split of an on-disk dataset directory:
/// `manifest.json`, `annotations.json`, `features/<id>.tadf`.
pub fn load_dataset(dir: &Path, split: &str) -> Result<Dataset> {
    if !dir.is_dir() {
        return Err(Error::MissingInput(format!(
            "dataset dir {}",
            dir.display()
        )));
    }
    let manifest = Manifest::read(&dir.join("manifest.json"))?;
    let annotations = AnnotationFile::read(&dir.join("annotations.json"))?;
    let ids = manifest
        .splits
        .get(split)
        .ok_or_else(|| Error::Config(format!("split '{split}' not in manifest")))?;
    let by_id: BTreeMap<&str, &VideoAnnotation> = annotations
        .videos
        .iter()
        .map(|v| (v.id.as_str(), v))
        .collect();
    let mut videos = Vec::with_capacity(ids.len());
    for id in ids {
        let ann = by_id
            .get(id.as_str())
            .ok_or_else(|| Error::Config(format!("video {id} missing from annotations")))?;
        let path = dir.join("features").join(format!("{id}.tadf"));
        if !path.is_file() {
            return Err(Error::MissingInput(format!(
                "feature file {}",
                path.display()
            )));
        }
        let features = read_feature_file(&path, id)?;
        if features.dim() != manifest.feature_dim {
            return Err(Error::Config(format!(
                "{id}: feature dim {} disagrees with manifest {}",
                features.dim(),
                manifest.feature_dim
            )));
        }
        features.validate()?;
        let segments: Vec<ActionSegment> = ann
            .segments
            .iter()
            .map(|s| ActionSegment {
                start: s.start,
                end: s.end,
                class_id: s.label,
            })
            .collect();
        for s in &segments {
            s.validate(ann.duration, annotations.labels.len())?;
        }
        videos.push(VideoData { features, segments });
    }
    Ok(Dataset {
        labels: annotations.labels.clone(),
        videos,
    })
}
