//! Training-free storyboard generation toolkit.
//!
//! Two attention-level mechanisms keep a storyboard's panels coherent
//! without touching model weights: panel anchoring keeps a shared
//! reference sub-panel bit-identical across the batch after every
//! transformer block, and reciprocal-attention value mixing blends each
//! scene token's value vector toward its strongest mutually-attending
//! reference token. Around them sit a prompt decomposer, a Scene
//! Diversity metric, a benchmark harness, and a deterministic toy
//! diffusion-transformer backend that runs the whole pipeline in
//! seconds.

pub mod anchoring;
pub mod attention;
pub mod backend;
pub mod benchmark;
pub mod director;
pub mod diversity;
pub mod error;
pub mod imageio;

pub use anchoring::{broadcast_reference, compose_prompt, crop_bottom, PanelLatentBatch, StoryboardSpec};
pub use attention::{
    build_correspondence, compute_attention, extract_cross_blocks, mix_values,
    morphological_filter, otsu_threshold, reciprocal_scores, AttentionView,
    CorrespondenceEntry, CorrespondenceMap, ReciprocalState,
};
pub use attention::diagnostics::{key_pca_map, reciprocal_heatmap, Anchor, DiagnosticSidecar};
pub use backend::{
    mean_reference_distance, BackendConfig, DenoiseHooks, HookCtx, MixEvent, NoopHooks,
    PipelineHooks, RavmEngine, RunDiagnostics, StoryboardRun, ToyBackend,
};
pub use benchmark::{
    evaluate, load_benchmark, BenchmarkEntry, EvaluationReport, Provenance, SceneDiversityScorer,
    ScoreOutcome, ScoringItem, StoryScorer, PANEL_COUNT,
};
pub use director::{
    decompose, validate_decomposition, ChatClient, Decomposition, DecompositionSource,
    FixtureClient, HttpChatClient,
};
pub use diversity::{
    bbox_std_score, detect, minmax_normalize, pose_variance_score, scene_diversity,
    Detection, Detector, DiversityReport, FixtureDetector, PanelAnnotation,
};
pub use error::{Error, Result};
