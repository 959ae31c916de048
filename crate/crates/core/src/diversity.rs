//! Scene Diversity: how much a subject's placement, scale, and pose vary
//! across a storyboard. Built from normalized bounding boxes (and pose
//! keypoints for human subjects) provided by a pluggable detector; a
//! fixture detector reads annotations from JSON.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pose keypoints per panel for human subjects.
pub const KEYPOINT_COUNT: usize = 17;

/// Detections scoring below this are treated as absent.
pub const DEFAULT_CONFIDENCE_THRESHOLD: f64 = 0.35;

/// Subject localization for one panel. Coordinates are normalized by
/// the image dimensions into `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelAnnotation {
    pub panel: usize,
    /// `(x0, y0, x1, y1)`, present when the subject was detected.
    pub bbox: Option<[f64; 4]>,
    /// Exactly [`KEYPOINT_COUNT`] `(x, y)` pairs when present.
    pub keypoints: Option<Vec<[f64; 2]>>,
    pub detected: bool,
}

impl PanelAnnotation {
    pub fn validate(&self) -> Result<()> {
        if let Some([x0, y0, x1, y1]) = self.bbox {
            if x0 > x1 || y0 > y1 {
                return Err(Error::Contract(format!(
                    "panel {}: bbox corners must be ordered, got ({x0}, {y0}, {x1}, {y1})",
                    self.panel
                )));
            }
        }
        if let Some(kps) = &self.keypoints {
            if kps.len() != KEYPOINT_COUNT {
                return Err(Error::Contract(format!(
                    "panel {}: expected {KEYPOINT_COUNT} keypoints, got {}",
                    self.panel,
                    kps.len()
                )));
            }
        }
        Ok(())
    }
}

/// Per-story diversity result: raw spreads, their benchmark-normalized
/// forms, and the combined score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversityReport {
    pub raw_bbox_std: f64,
    pub raw_pose_var: Option<f64>,
    pub s_bbox: f64,
    pub s_pose: Option<f64>,
    #[serde(rename = "final")]
    pub final_score: f64,
    pub is_human: bool,
}

/// Mean over the four box coordinates of their population standard
/// deviation across detected panels.
pub fn bbox_std_score(annotations: &[PanelAnnotation]) -> Result<f64> {
    let boxes: Vec<[f64; 4]> = annotations
        .iter()
        .filter(|a| a.detected)
        .filter_map(|a| a.bbox)
        .collect();
    if boxes.len() < 2 {
        return Err(Error::InsufficientDetections { found: boxes.len(), needed: 2 });
    }
    let n = boxes.len() as f64;
    let mut total = 0.0;
    for coord in 0..4 {
        let mean = boxes.iter().map(|b| b[coord]).sum::<f64>() / n;
        let var = boxes.iter().map(|b| (b[coord] - mean).powi(2)).sum::<f64>() / n;
        total += var.sqrt();
    }
    Ok(total / 4.0)
}

/// Mean over keypoints of the per-axis population variance across
/// panels (axes averaged per keypoint).
pub fn pose_variance_score(annotations: &[PanelAnnotation]) -> Result<f64> {
    let sets: Vec<&Vec<[f64; 2]>> = annotations
        .iter()
        .filter(|a| a.detected)
        .filter_map(|a| a.keypoints.as_ref())
        .collect();
    for set in &sets {
        if set.len() != KEYPOINT_COUNT {
            return Err(Error::Contract(format!(
                "expected {KEYPOINT_COUNT} keypoints, got {}",
                set.len()
            )));
        }
    }
    if sets.len() < 2 {
        return Err(Error::InsufficientDetections { found: sets.len(), needed: 2 });
    }
    let n = sets.len() as f64;
    let mut total = 0.0;
    for kp in 0..KEYPOINT_COUNT {
        let mut per_axis = 0.0;
        for axis in 0..2 {
            let mean = sets.iter().map(|s| s[kp][axis]).sum::<f64>() / n;
            per_axis += sets.iter().map(|s| (s[kp][axis] - mean).powi(2)).sum::<f64>() / n;
        }
        total += per_axis / 2.0;
    }
    Ok(total / KEYPOINT_COUNT as f64)
}

/// Min-max normalization over a benchmark's raw scores. A constant
/// input maps to all zeros.
pub fn minmax_normalize(raw: &[f64]) -> Result<Vec<f64>> {
    if raw.is_empty() {
        return Err(Error::Contract("cannot normalize an empty score list".into()));
    }
    let min = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let max = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == min {
        return Ok(vec![0.0; raw.len()]);
    }
    Ok(raw.iter().map(|x| (x - min) / (max - min)).collect())
}

/// Combines the normalized components: the mean of box and pose scores
/// for human subjects, the box score alone otherwise.
pub fn scene_diversity(s_bbox: f64, s_pose: Option<f64>, is_human: bool) -> Result<f64> {
    if is_human {
        let s_pose = s_pose.ok_or_else(|| {
            Error::Contract("human subjects need a pose score".into())
        })?;
        Ok((s_bbox + s_pose) / 2.0)
    } else {
        Ok(s_bbox)
    }
}

/// A single detection candidate as a detector backend reports it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: [f64; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keypoints: Option<Vec<[f64; 2]>>,
    pub score: f64,
}

/// Subject localization backend. Real detector adapters implement this;
/// the shipped [`FixtureDetector`] replays recorded annotations.
pub trait Detector {
    /// Best detection for one panel, or `None` when nothing clears the
    /// backend's confidence threshold.
    fn detect_panel(
        &self,
        story_id: &str,
        panel: usize,
        image: &Array3<f32>,
        subject: &str,
    ) -> Result<Option<Detection>>;
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
enum FixtureCandidates {
    One(Detection),
    Many(Vec<Detection>),
}

type FixtureData = BTreeMap<String, BTreeMap<String, FixtureCandidates>>;

/// Replays annotations from a JSON file shaped
/// `{story_id: {panel_index: {bbox, keypoints, score} | [..]}}`.
pub struct FixtureDetector {
    data: FixtureData,
    threshold: f64,
}

impl FixtureDetector {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read annotation fixture {}: {e}", path.display()))
        })?;
        Ok(Self { data: serde_json::from_str(&text)?, threshold: DEFAULT_CONFIDENCE_THRESHOLD })
    }

    pub fn from_json(json: &str) -> Result<Self> {
        Ok(Self { data: serde_json::from_str(json)?, threshold: DEFAULT_CONFIDENCE_THRESHOLD })
    }

    pub fn with_threshold(mut self, threshold: f64) -> Self {
        self.threshold = threshold;
        self
    }
}

impl Detector for FixtureDetector {
    fn detect_panel(
        &self,
        story_id: &str,
        panel: usize,
        _image: &Array3<f32>,
        _subject: &str,
    ) -> Result<Option<Detection>> {
        let Some(panels) = self.data.get(story_id) else {
            return Ok(None);
        };
        let Some(candidates) = panels.get(&panel.to_string()) else {
            return Ok(None);
        };
        let candidates: Vec<&Detection> = match candidates {
            FixtureCandidates::One(d) => vec![d],
            FixtureCandidates::Many(ds) => ds.iter().collect(),
        };
        // Highest-confidence candidate above the threshold wins.
        let best = candidates
            .into_iter()
            .filter(|d| d.score >= self.threshold)
            .max_by(|a, b| a.score.partial_cmp(&b.score).unwrap_or(std::cmp::Ordering::Equal));
        Ok(best.cloned())
    }
}

/// Runs the detector over every panel, producing one annotation per
/// panel; undetected panels are kept with `detected = false`.
pub fn detect(
    story_id: &str,
    panels: &[Array3<f32>],
    subject: &str,
    detector: &dyn Detector,
) -> Result<Vec<PanelAnnotation>> {
    let mut annotations = Vec::with_capacity(panels.len());
    for (i, image) in panels.iter().enumerate() {
        let annotation = match detector.detect_panel(story_id, i, image, subject)? {
            Some(detection) => PanelAnnotation {
                panel: i,
                bbox: Some(detection.bbox),
                keypoints: detection.keypoints,
                detected: true,
            },
            None => PanelAnnotation { panel: i, bbox: None, keypoints: None, detected: false },
        };
        annotation.validate()?;
        annotations.push(annotation);
    }
    Ok(annotations)
}
