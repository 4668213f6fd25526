//! Synthetic feature-sequence generator.
//!
//! Each class gets a fixed random unit prototype vector. Rows inside a planted
//! segment are prototype + Gaussian noise; background rows are pure noise.
//! Segments never overlap within a video. Everything is deterministic under
//! the configured seeds, and all values are quantized to f32 so the in-memory
//! dataset matches its on-disk round trip bitwise.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::Tensor;
use crate::data::{
    write_feature_file, ActionSegment, AnnotationFile, FeatureSequence, Manifest, SegmentAnn,
    VideoAnnotation, VideoData,
};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct SynthConfig {
    pub num_videos: usize,
    /// Temporal length of every video, in feature rows.
    pub t: usize,
    /// Feature dimensionality.
    pub d: usize,
    pub num_classes: usize,
    /// Planted segments per video (inclusive range).
    pub segments_min: usize,
    pub segments_max: usize,
    /// Segment length in rows (inclusive range).
    pub seg_len_min: usize,
    pub seg_len_max: usize,
    /// Gaussian noise level added everywhere.
    pub noise: f64,
    /// Seed for the per-class prototype vectors.
    pub proto_seed: u64,
    /// Seed for everything else.
    pub seed: u64,
    pub delta_seconds: f64,
    /// Fraction of videos routed to the "val" split (rest are "train").
    pub val_fraction: f64,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_videos == 0 || self.t == 0 || self.d == 0 || self.num_classes == 0 {
            return Err(Error::Config("synth: counts and dims must be >= 1".into()));
        }
        if self.segments_min > self.segments_max || self.seg_len_min > self.seg_len_max {
            return Err(Error::Config("synth: empty range".into()));
        }
        if self.seg_len_min == 0 {
            return Err(Error::Config("synth: segment length must be >= 1".into()));
        }
        if self.noise < 0.0 || !self.noise.is_finite() {
            return Err(Error::Config("synth: noise must be >= 0".into()));
        }
        if self.delta_seconds <= 0.0 {
            return Err(Error::Config("synth: delta_seconds must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config(
                "synth: val_fraction must be in [0, 1)".into(),
            ));
        }
        if self.segments_min * self.seg_len_min > self.t {
            return Err(Error::Config(format!(
                "synth: {} segments of length >= {} cannot fit in T={}",
                self.segments_min, self.seg_len_min, self.t
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SynthDataset {
    pub labels: Vec<String>,
    pub videos: Vec<VideoData>,
    pub splits: BTreeMap<String, Vec<String>>,
    pub prototypes: Vec<Vec<f64>>,
    pub feature_dim: usize,
}

impl SynthDataset {
    pub fn split(&self, name: &str) -> Result<Vec<VideoData>> {
        let ids = self
            .splits
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown split '{name}'")))?;
        Ok(self
            .videos
            .iter()
            .filter(|v| ids.contains(&v.features.video_id))
            .cloned()
            .collect())
    }

    /// Write the dataset directory: manifest, annotations, feature files.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join("features"))?;
        Manifest {
            feature_dim: self.feature_dim,
            splits: self.splits.clone(),
        }
        .write(&dir.join("manifest.json"))?;
        let annotations = AnnotationFile {
            labels: self.labels.clone(),
            videos: self
                .videos
                .iter()
                .map(|v| VideoAnnotation {
                    id: v.features.video_id.clone(),
                    duration: v.features.duration_seconds,
                    segments: v
                        .segments
                        .iter()
                        .map(|s| SegmentAnn {
                            start: s.start,
                            end: s.end,
                            label: s.class_id,
                        })
                        .collect(),
                })
                .collect(),
        };
        annotations.write(&dir.join("annotations.json"))?;
        for v in &self.videos {
            let path = dir
                .join("features")
                .join(format!("{}.tadf", v.features.video_id));
            write_feature_file(&path, &v.features)?;
        }
        Ok(())
    }
}

/// Unit prototype vectors, one per class, fixed by `proto_seed`.
pub fn class_prototypes(proto_seed: u64, num_classes: usize, d: usize) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(proto_seed);
    (0..num_classes)
        .map(|_| {
            let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            for x in v.iter_mut() {
                *x /= norm;
            }
            v
        })
        .collect()
}

/// Quantize to f32 so disk round trips are bitwise exact.
fn q32(v: f64) -> f64 {
    v as f32 as f64
}

pub fn generate_synthetic(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let prototypes = class_prototypes(cfg.proto_seed, cfg.num_classes, cfg.d);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let duration = cfg.t as f64 * cfg.delta_seconds;
    let mut videos = Vec::with_capacity(cfg.num_videos);
    for vi in 0..cfg.num_videos {
        let id = format!("synth-{vi:04}");
        let layout = plant_segments(cfg, &mut rng)?;
        let mut data = vec![0.0f64; cfg.t * cfg.d];
        // background noise everywhere
        if cfg.noise > 0.0 {
            for v in data.iter_mut() {
                let n: f64 = StandardNormal.sample(&mut rng);
                *v = q32(cfg.noise * n);
            }
        }
        // planted prototypes on top
        for (start, len, class_id) in &layout {
            for t in *start..start + len {
                for di in 0..cfg.d {
                    let idx = t * cfg.d + di;
                    data[idx] = q32(data[idx] + prototypes[class_id - 1][di]);
                }
            }
        }
        let features = FeatureSequence {
            video_id: id,
            values: Tensor::new(vec![cfg.t, cfg.d], data)?,
            delta_seconds: cfg.delta_seconds,
            duration_seconds: duration,
        };
        let segments: Vec<ActionSegment> = layout
            .iter()
            .map(|(start, len, class_id)| ActionSegment {
                start: *start as f64 * cfg.delta_seconds,
                end: (*start + *len) as f64 * cfg.delta_seconds,
                class_id: *class_id,
            })
            .collect();
        for s in &segments {
            s.validate(duration, cfg.num_classes)?;
        }
        videos.push(VideoData { features, segments });
    }
    let labels = (1..=cfg.num_classes)
        .map(|c| format!("class-{c}"))
        .collect();
    let num_val = (cfg.num_videos as f64 * cfg.val_fraction).round() as usize;
    let num_train = cfg.num_videos - num_val;
    let ids: Vec<String> = videos.iter().map(|v| v.features.video_id.clone()).collect();
    let mut splits = BTreeMap::new();
    splits.insert("train".to_string(), ids[..num_train].to_vec());
    splits.insert("val".to_string(), ids[num_train..].to_vec());
    Ok(SynthDataset {
        labels,
        videos,
        splits,
        prototypes,
        feature_dim: cfg.d,
    })
}

/// Non-overlapping segment layout: (start_row, len_rows, class_id).
fn plant_segments(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<Vec<(usize, usize, usize)>> {
    for _attempt in 0..1000 {
        let n = rng.gen_range(cfg.segments_min..=cfg.segments_max);
        let lens: Vec<usize> = (0..n)
            .map(|_| rng.gen_range(cfg.seg_len_min..=cfg.seg_len_max))
            .collect();
        let total: usize = lens.iter().sum();
        if total > cfg.t {
            continue;
        }
        // split the leftover room into n+1 gaps via sorted uniform draws
        let free = cfg.t - total;
        let mut cuts: Vec<usize> = (0..n).map(|_| rng.gen_range(0..=free)).collect();
        cuts.sort_unstable();
        let mut layout = Vec::with_capacity(n);
        let mut cursor = 0usize;
        let mut prev_cut = 0usize;
        for (i, len) in lens.iter().enumerate() {
            let gap = cuts[i] - prev_cut;
            prev_cut = cuts[i];
            cursor += gap;
            let class_id = rng.gen_range(1..=cfg.num_classes);
            layout.push((cursor, *len, class_id));
            cursor += len;
        }
        return Ok(layout);
    }
    Err(Error::Config(
        "synth: segment ranges unsatisfiable within T".into(),
    ))
}
