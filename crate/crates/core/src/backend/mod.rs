//! Denoising backend: the hook contract real model adapters must honor,
//! the standard intervention hooks, and a deterministic toy
//! diffusion-transformer that runs the whole pipeline at desk scale.
//!
//! Adapters for full-scale models must expose the same two hook points
//! per dual-stream block — attention access (read Q/K/V, write V) and
//! post-block latent access — and apply interventions on the
//! conditional branch.

mod toy;

use std::collections::BTreeSet;
use std::time::Instant;

use ndarray::{s, Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::anchoring::{broadcast_reference, compose_prompt, crop_bottom, PanelLatentBatch, StoryboardSpec};
use crate::attention::{
    build_correspondence, compute_attention, extract_cross_blocks, mix_values,
    reciprocal_scores, AttentionView, ReciprocalState,
};
use crate::error::{Error, Result};

use toy::ToyModel;
pub use toy::{PATCH, TEXT_TOKENS};

/// Backend parameters. Every field can come from a config file and be
/// overridden per run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub steps: usize,
    /// Classifier-free guidance scale. Recorded for adapters; the toy
    /// backend runs a single conditional trajectory and ignores it.
    pub guidance: f32,
    /// Value mixing weight: 1 keeps the scene token, 0 replaces it with
    /// its reference partner.
    pub lambda: f32,
    /// Momentum of the reciprocal-score moving average.
    pub momentum: f32,
    /// Blocks where value mixing applies; `None` means all blocks.
    pub ravm_blocks: Option<BTreeSet<usize>>,
    /// Half-open `[start, end)` step interval where value mixing
    /// applies; `None` means all steps.
    pub ravm_step_range: Option<(usize, usize)>,
    pub h_tok: usize,
    pub w_tok: usize,
    pub d: usize,
    pub heads: usize,
    pub blocks: usize,
    /// Seed for the frozen toy weights and text conditioning.
    pub seed: u64,
    pub lpa: bool,
    pub ravm: bool,
    /// Record reciprocal-state snapshots and a key snapshot for export.
    pub collect_diagnostics: bool,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            steps: 28,
            guidance: 3.5,
            lambda: 0.5,
            momentum: 0.8,
            ravm_blocks: None,
            ravm_step_range: None,
            h_tok: 8,
            w_tok: 8,
            d: 32,
            heads: 2,
            blocks: 4,
            seed: 0,
            lpa: true,
            ravm: true,
            collect_diagnostics: false,
        }
    }
}

impl BackendConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda must be in [0, 1], got {}", self.lambda)));
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must be in [0, 1], got {}",
                self.momentum
            )));
        }
        if self.h_tok == 0 || self.w_tok == 0 || self.d == 0 || self.heads == 0 || self.blocks == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.d % self.heads != 0 {
            return Err(Error::Config(format!(
                "d = {} must be divisible by heads = {}",
                self.d, self.heads
            )));
        }
        if let Some((start, end)) = self.ravm_step_range {
            if start > end || end > self.steps {
                return Err(Error::Config(format!(
                    "ravm_step_range [{start}, {end}) must lie within [0, {})",
                    self.steps
                )));
            }
        }
        if let Some(blocks) = &self.ravm_blocks {
            if blocks.iter().any(|&b| b >= self.blocks) {
                return Err(Error::Config(format!(
                    "ravm_blocks must be below blocks = {}",
                    self.blocks
                )));
            }
        }
        Ok(())
    }

    /// Tokens per sub-panel.
    pub fn panel_tokens(&self) -> usize {
        self.h_tok * self.w_tok
    }

    pub fn effective_ravm_blocks(&self) -> BTreeSet<usize> {
        self.ravm_blocks
            .clone()
            .unwrap_or_else(|| (0..self.blocks).collect())
    }

    pub fn effective_ravm_step_range(&self) -> (usize, usize) {
        self.ravm_step_range.unwrap_or((0, self.steps))
    }
}

/// Position of one hook invocation within a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HookCtx {
    pub step: usize,
    pub block: usize,
    pub element: usize,
}

/// Intervention callbacks invoked by the denoiser.
///
/// Per batch element, `on_attention` fires once per (step, block) in
/// ascending order; `after_block` fires once per (step, block) with the
/// whole batch and acts as a barrier between blocks.
pub trait DenoiseHooks {
    /// Runs once on the freshly initialized batch, before step 0.
    fn on_init(&mut self, batch: &mut PanelLatentBatch) -> Result<()> {
        let _ = batch;
        Ok(())
    }

    /// Attention access inside a block: read Q/K/V, optionally write V.
    fn on_attention(&mut self, ctx: HookCtx, view: &mut AttentionView) -> Result<()> {
        let _ = (ctx, view);
        Ok(())
    }

    /// Latent access after a block's full forward.
    fn after_block(&mut self, step: usize, block: usize, batch: &mut PanelLatentBatch) -> Result<()> {
        let _ = (step, block, batch);
        Ok(())
    }
}

/// Hooks that leave the run untouched.
pub struct NoopHooks;

impl DenoiseHooks for NoopHooks {}

/// One value-mixing invocation record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixEvent {
    pub step: usize,
    pub block: usize,
    pub element: usize,
    /// Number of bottom tokens selected for mixing.
    pub selected: usize,
}

/// Snapshot of batch element 0's reciprocal state after an update.
#[derive(Debug, Clone)]
pub struct ReciprocalSnapshot {
    pub step: usize,
    pub block: usize,
    pub state: ReciprocalState,
}

/// Head-averaged keys of the image tokens at one (step, block), for the
/// key-PCA diagnostic.
#[derive(Debug, Clone)]
pub struct KeySnapshot {
    pub step: usize,
    pub block: usize,
    /// `(2P, d_head)` rows over the full two-panel grid.
    pub keys: Array2<f32>,
}

/// What a run did and when, beyond the panels themselves.
#[derive(Debug, Clone, Default)]
pub struct RunDiagnostics {
    pub mix_events: Vec<MixEvent>,
    pub reciprocal_snapshots: Vec<ReciprocalSnapshot>,
    pub key_snapshot: Option<KeySnapshot>,
    /// Original scene index of each batch element, in generation order.
    pub generation_order: Vec<usize>,
    pub wall_ms: u128,
}

/// Reciprocal-attention value mixing across a run: per-element moving
/// averages, correspondence extraction, and the soft value update.
pub struct RavmEngine {
    lambda: f32,
    blocks: BTreeSet<usize>,
    step_range: (usize, usize),
    grid: (usize, usize),
    states: Vec<ReciprocalState>,
    events: Vec<MixEvent>,
    snapshots: Vec<ReciprocalSnapshot>,
    collect_snapshots: bool,
}

impl RavmEngine {
    pub fn new(cfg: &BackendConfig, batch_size: usize) -> Result<Self> {
        let states = (0..batch_size)
            .map(|_| ReciprocalState::new(cfg.panel_tokens(), cfg.momentum))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            lambda: cfg.lambda,
            blocks: cfg.effective_ravm_blocks(),
            step_range: cfg.effective_ravm_step_range(),
            grid: (cfg.h_tok, cfg.w_tok),
            states,
            events: Vec::new(),
            snapshots: Vec::new(),
            collect_snapshots: cfg.collect_diagnostics,
        })
    }

    fn applies(&self, step: usize, block: usize) -> bool {
        step >= self.step_range.0 && step < self.step_range.1 && self.blocks.contains(&block)
    }

    pub fn state(&self, element: usize) -> &ReciprocalState {
        &self.states[element]
    }

    /// Observes the block's attention, updates the moving average, and
    /// mixes values for the selected correspondences.
    pub fn intervene(&mut self, ctx: HookCtx, view: &mut AttentionView) -> Result<()> {
        if !self.applies(ctx.step, ctx.block) {
            return Ok(());
        }
        let attention = compute_attention(view.queries(), view.keys())?;
        let (a_tb, a_bt) = extract_cross_blocks(&attention, view)?;
        let m = reciprocal_scores(&a_tb, &a_bt)?;
        let state = &mut self.states[ctx.element];
        state.update_ema(&m)?;
        let map = build_correspondence(state, self.grid, self.lambda)?;
        if !map.is_empty() {
            let mixed = mix_values(view.values(), &map, view)?;
            view.set_values(mixed)?;
        }
        self.events.push(MixEvent {
            step: ctx.step,
            block: ctx.block,
            element: ctx.element,
            selected: map.len(),
        });
        if self.collect_snapshots && ctx.element == 0 {
            self.snapshots.push(ReciprocalSnapshot {
                step: ctx.step,
                block: ctx.block,
                state: self.states[0].clone(),
            });
        }
        Ok(())
    }
}

/// The standard intervention wiring: top-half anchoring after every
/// block plus value mixing inside configured blocks.
pub struct PipelineHooks {
    lpa: bool,
    ravm: Option<RavmEngine>,
}

impl PipelineHooks {
    pub fn from_config(cfg: &BackendConfig, batch_size: usize) -> Result<Self> {
        let ravm = if cfg.ravm {
            Some(RavmEngine::new(cfg, batch_size)?)
        } else {
            None
        };
        Ok(Self { lpa: cfg.lpa, ravm })
    }

    pub fn ravm(&self) -> Option<&RavmEngine> {
        self.ravm.as_ref()
    }

    /// Consumes the hooks, yielding recorded mixing events and snapshots.
    pub fn into_records(self) -> (Vec<MixEvent>, Vec<ReciprocalSnapshot>) {
        match self.ravm {
            Some(engine) => (engine.events, engine.snapshots),
            None => (Vec::new(), Vec::new()),
        }
    }
}

impl DenoiseHooks for PipelineHooks {
    fn on_init(&mut self, batch: &mut PanelLatentBatch) -> Result<()> {
        if self.lpa {
            broadcast_reference(batch);
        }
        Ok(())
    }

    fn on_attention(&mut self, ctx: HookCtx, view: &mut AttentionView) -> Result<()> {
        if let Some(engine) = &mut self.ravm {
            engine.intervene(ctx, view)?;
        }
        Ok(())
    }

    fn after_block(&mut self, _step: usize, _block: usize, batch: &mut PanelLatentBatch) -> Result<()> {
        if self.lpa {
            broadcast_reference(batch);
        }
        Ok(())
    }
}

/// The deterministic toy denoising backend.
pub struct ToyBackend {
    config: BackendConfig,
    model: ToyModel,
}

impl ToyBackend {
    pub fn new(config: BackendConfig) -> Result<Self> {
        config.validate()?;
        let model = ToyModel::new(&config);
        Ok(Self { config, model })
    }

    pub fn config(&self) -> &BackendConfig {
        &self.config
    }

    /// Sub-panel pixel resolution `(height, width)` after decoding.
    pub fn panel_resolution(&self) -> (usize, usize) {
        (self.config.h_tok * PATCH, self.config.w_tok * PATCH)
    }

    /// Runs the seeded denoising loop over the whole batch, firing the
    /// hooks at every block of every step.
    ///
    /// Batch elements are ordered for generation: element 0 is the
    /// anchor (the reused scene when `reuse_reference_scene` is set).
    /// `RunDiagnostics::generation_order` maps elements back to scene
    /// indices.
    pub fn toy_denoise(
        &self,
        spec: &StoryboardSpec,
        hooks: &mut dyn DenoiseHooks,
    ) -> Result<(PanelLatentBatch, RunDiagnostics)> {
        spec.validate()?;
        let started = Instant::now();
        let cfg = &self.config;
        let n = spec.n();

        let order: Vec<usize> = match spec.reuse_reference_scene {
            Some(anchor) => std::iter::once(anchor)
                .chain((0..n).filter(|&i| i != anchor))
                .collect(),
            None => (0..n).collect(),
        };
        let reference = match spec.reuse_reference_scene {
            Some(anchor) => spec.scene_prompts[anchor].clone(),
            None => spec.reference_prompt.clone(),
        };
        let conditioning: Vec<Array2<f32>> = order
            .iter()
            .map(|&i| {
                let prompt = compose_prompt(&reference, &spec.scene_prompts[i])?;
                Ok(self.model.text_embedding(&prompt))
            })
            .collect::<Result<Vec<_>>>()?;

        let mut batch = PanelLatentBatch::new(
            order
                .iter()
                .map(|&i| self.model.initial_noise(spec.seed, i))
                .collect(),
        )?;
        hooks.on_init(&mut batch)?;

        let mut diagnostics = RunDiagnostics {
            generation_order: order,
            ..RunDiagnostics::default()
        };
        let key_target = (cfg.steps / 2, cfg.blocks / 2);
        let text = TEXT_TOKENS;
        let image_tokens = 2 * cfg.panel_tokens();

        for step in 0..cfg.steps {
            batch.set_step(step);
            let step_input: Vec<Array3<f32>> = batch.latents().to_vec();
            let mut streams: Vec<Array2<f32>> = (0..n)
                .map(|j| {
                    let mut stream = Array2::<f32>::zeros((self.model.sequence_len(), cfg.d));
                    stream.slice_mut(s![..text, ..]).assign(&conditioning[j]);
                    stream
                        .slice_mut(s![text.., ..])
                        .assign(&self.model.tokens_from_grid(&step_input[j]));
                    stream
                })
                .collect();

            for block in 0..cfg.blocks {
                for (element, stream) in streams.iter_mut().enumerate() {
                    let ctx = HookCtx { step, block, element };
                    self.model.block_forward(block, stream, |view| {
                        hooks.on_attention(ctx, view)?;
                        if cfg.collect_diagnostics
                            && element == 0
                            && (step, block) == key_target
                            && diagnostics.key_snapshot.is_none()
                        {
                            diagnostics.key_snapshot =
                                Some(Self::snapshot_keys(step, block, view));
                        }
                        Ok(())
                    })?;
                }
                // Barrier: expose the image rows as the evolving latents,
                // let the hooks rewrite them, then continue from the
                // (possibly anchored) state.
                for (j, stream) in streams.iter().enumerate() {
                    let grid = self
                        .model
                        .grid_from_tokens(&stream.slice(s![text.., ..]).to_owned());
                    batch.latent_mut(j).assign(&grid);
                }
                hooks.after_block(step, block, &mut batch)?;
                for (j, stream) in streams.iter_mut().enumerate() {
                    stream
                        .slice_mut(s![text.., ..])
                        .assign(&self.model.tokens_from_grid(batch.latent(j)));
                }
            }

            // Linear schedule: move the step-start latent toward the
            // bounded prediction; the final step lands on it exactly.
            let alpha = 1.0 / (cfg.steps - step) as f32;
            for j in 0..n {
                let image_rows = streams[j].slice(s![text..text + image_tokens, ..]).to_owned();
                let prediction = self.model.grid_from_tokens(&self.model.predict(&image_rows));
                let blended = &step_input[j] + &((&prediction - &step_input[j]) * alpha);
                batch.latent_mut(j).assign(&blended);
            }
        }

        diagnostics.wall_ms = started.elapsed().as_millis();
        Ok((batch, diagnostics))
    }

    fn snapshot_keys(step: usize, block: usize, view: &AttentionView) -> KeySnapshot {
        let range = view.image_token_range();
        let keys = view.keys();
        let heads = view.heads();
        let mut mean = Array2::<f32>::zeros((range.len(), view.d_head()));
        for (row, token) in range.enumerate() {
            for t in 0..view.d_head() {
                let sum: f64 = (0..heads).map(|h| f64::from(keys[[h, token, t]])).sum();
                mean[[row, t]] = (sum / heads as f64) as f32;
            }
        }
        KeySnapshot { step, block, keys: mean }
    }

    /// Decodes one latent grid to pixels via the frozen patch projection.
    pub fn toy_decode(&self, latent: &Array3<f32>) -> Result<Array3<f32>> {
        let expected = (2 * self.config.h_tok, self.config.w_tok, self.config.d);
        if latent.dim() != expected {
            return Err(Error::ShapeMismatch(format!(
                "latent {:?} does not match configured {:?}",
                latent.dim(),
                expected
            )));
        }
        Ok(self.model.decode(latent))
    }

    /// Full pipeline for one story: compose prompts, denoise with the
    /// configured interventions, decode, and crop to the scene panels.
    ///
    /// Returns one cropped panel per scene, in scene order, plus the
    /// uncropped two-panel composites and diagnostics.
    pub fn run_storyboard(&self, spec: &StoryboardSpec) -> Result<StoryboardRun> {
        let started = Instant::now();
        let mut hooks = PipelineHooks::from_config(&self.config, spec.n())?;
        let (batch, mut diagnostics) = self.toy_denoise(spec, &mut hooks)?;
        let (events, snapshots) = hooks.into_records();
        diagnostics.mix_events = events;
        diagnostics.reciprocal_snapshots = snapshots;

        let n = spec.n();
        let mut panels: Vec<Option<Array3<f32>>> = vec![None; n];
        let mut composites: Vec<Option<Array3<f32>>> = vec![None; n];
        for (element, &scene) in diagnostics.generation_order.iter().enumerate() {
            let decoded = self.toy_decode(batch.latent(element))?;
            panels[scene] = Some(crop_bottom(&decoded)?);
            composites[scene] = Some(decoded);
        }
        diagnostics.wall_ms = started.elapsed().as_millis();
        Ok(StoryboardRun {
            panels: panels.into_iter().map(Option::unwrap).collect(),
            composites: composites.into_iter().map(Option::unwrap).collect(),
            final_latents: batch,
            diagnostics,
        })
    }
}

/// Everything a storyboard run produces.
pub struct StoryboardRun {
    /// Cropped scene sub-panels, in scene order.
    pub panels: Vec<Array3<f32>>,
    /// Uncropped two-panel composites, in scene order.
    pub composites: Vec<Array3<f32>>,
    /// Final latents in generation order (element 0 is the anchor).
    pub final_latents: PanelLatentBatch,
    pub diagnostics: RunDiagnostics,
}

/// Mean L2 distance between each bottom token and the top (reference)
/// token at the same grid position, averaged over the batch. Smaller
/// means the scene panels sit closer to the anchored reference.
pub fn mean_reference_distance(batch: &PanelLatentBatch) -> f64 {
    let rows = batch.panel_rows();
    let mut total = 0.0f64;
    let mut count = 0usize;
    for latent in batch.latents() {
        let (_, w, d) = latent.dim();
        for r in 0..rows {
            for c in 0..w {
                let mut sq = 0.0f64;
                for t in 0..d {
                    let diff = f64::from(latent[[rows + r, c, t]]) - f64::from(latent[[r, c, t]]);
                    sq += diff * diff;
                }
                total += sq.sqrt();
                count += 1;
            }
        }
    }
    total / count.max(1) as f64
}
