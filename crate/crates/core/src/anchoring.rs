//! Panel anchoring: composite prompt construction, top-half
//! synchronization across the batch, and final sub-panel cropping.
//!
//! Every latent grid stacks a reference sub-panel (top half) above a
//! scene sub-panel (bottom half). Keeping the top halves bit-identical
//! across the batch after every transformer block is what anchors
//! character identity; only the bottom halves are kept at the end.

use ndarray::{s, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A storyboard request: one reference prompt plus `n` scene prompts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoryboardSpec {
    pub story_id: String,
    pub reference_prompt: String,
    pub scene_prompts: Vec<String>,
    pub seed: u64,
    /// When set, that scene doubles as the reference: its prompt becomes
    /// the reference prompt and it is generated as batch element 0.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reuse_reference_scene: Option<usize>,
}

impl StoryboardSpec {
    pub fn n(&self) -> usize {
        self.scene_prompts.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.scene_prompts.is_empty() {
            return Err(Error::Contract("at least one scene prompt is required".into()));
        }
        if self.reference_prompt.trim().is_empty() && self.reuse_reference_scene.is_none() {
            return Err(Error::Contract(
                "reference prompt must be non-empty unless a scene is reused".into(),
            ));
        }
        if self.scene_prompts.iter().any(|p| p.trim().is_empty()) {
            return Err(Error::Contract("scene prompts must be non-empty".into()));
        }
        if let Some(idx) = self.reuse_reference_scene {
            if idx >= self.scene_prompts.len() {
                return Err(Error::Contract(format!(
                    "reuse_reference_scene {idx} out of range for {} scenes",
                    self.scene_prompts.len()
                )));
            }
        }
        Ok(())
    }
}

/// Batch of two-panel latent grids evolving through denoising. Each grid
/// is `(2 * rows, cols, channels)`: reference on top, scene below.
#[derive(Debug, Clone)]
pub struct PanelLatentBatch {
    latents: Vec<Array3<f32>>,
    step: usize,
}

impl PanelLatentBatch {
    pub fn new(latents: Vec<Array3<f32>>) -> Result<Self> {
        let Some(first) = latents.first() else {
            return Err(Error::Contract("batch must hold at least one latent".into()));
        };
        if first.dim().0 % 2 != 0 {
            return Err(Error::Contract(format!(
                "latent height {} must be even (two stacked sub-panels)",
                first.dim().0
            )));
        }
        if latents.iter().any(|l| l.dim() != first.dim()) {
            return Err(Error::ShapeMismatch("all latents must share one shape".into()));
        }
        Ok(Self { latents, step: 0 })
    }

    pub fn n(&self) -> usize {
        self.latents.len()
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn set_step(&mut self, step: usize) {
        self.step = step;
    }

    pub fn latent(&self, i: usize) -> &Array3<f32> {
        &self.latents[i]
    }

    pub fn latent_mut(&mut self, i: usize) -> &mut Array3<f32> {
        &mut self.latents[i]
    }

    pub fn latents(&self) -> &[Array3<f32>] {
        &self.latents
    }

    /// Rows in one sub-panel (half the grid height).
    pub fn panel_rows(&self) -> usize {
        self.latents[0].dim().0 / 2
    }
}

/// Builds the composite two-panel prompt for one scene.
pub fn compose_prompt(reference: &str, scene: &str) -> Result<String> {
    if reference.is_empty() || scene.is_empty() {
        return Err(Error::Contract(
            "reference and scene prompts must be non-empty".into(),
        ));
    }
    Ok(format!("A storyboard of {reference} (top) and {scene} (bottom)"))
}

/// Overwrites every element's top half with element 0's top half,
/// bit-for-bit. Bottom halves are untouched.
pub fn broadcast_reference(batch: &mut PanelLatentBatch) {
    let rows = batch.panel_rows();
    if batch.n() < 2 {
        return;
    }
    let anchor = batch.latents[0].slice(s![..rows, .., ..]).to_owned();
    for latent in batch.latents.iter_mut().skip(1) {
        latent.slice_mut(s![..rows, .., ..]).assign(&anchor);
    }
}

/// Returns the bottom half of a two-panel grid (the scene sub-panel).
pub fn crop_bottom(image: &Array3<f32>) -> Result<Array3<f32>> {
    let (h, _, _) = image.dim();
    if h % 2 != 0 {
        return Err(Error::Contract(format!(
            "cannot split a grid of odd height {h}"
        )));
    }
    Ok(image.slice(s![h / 2.., .., ..]).to_owned())
}
