//! `storyboard generate`: run the toy backend over a spec and write
//! panels, diagnostics, and a manifest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::Args;
use storyboard_core::attention::diagnostics::{
    key_pca_map, reciprocal_heatmap, Anchor, DiagnosticSidecar,
};
use storyboard_core::error::{Error, Result};
use storyboard_core::{imageio, load_benchmark, BackendConfig, StoryboardSpec, ToyBackend};

use crate::config::{
    parse_block_list, parse_lambda_sweep, parse_step_range, resolve_config, ConfigOverrides,
};
use crate::manifest::{sha256_file, sha256_hex, ManifestOutput, RunManifest};

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Storyboard spec JSON file.
    #[arg(required_unless_present = "from_entry")]
    pub spec: Option<PathBuf>,

    /// Build the spec from a benchmark entry: `<benchmark.json>:<story_id>`.
    #[arg(long, conflicts_with = "spec")]
    pub from_entry: Option<String>,

    /// Config file (TOML key/value mirroring the backend fields).
    #[arg(long)]
    pub config: Option<PathBuf>,

    /// Override the story seed from the spec file.
    #[arg(long)]
    pub seed: Option<u64>,

    #[arg(long)]
    pub lambda: Option<f32>,

    #[arg(long)]
    pub momentum: Option<f32>,

    #[arg(long)]
    pub steps: Option<usize>,

    #[arg(long)]
    pub guidance: Option<f32>,

    /// Comma-separated block indices where mixing applies.
    #[arg(long)]
    pub ravm_blocks: Option<String>,

    /// Half-open step window `start,end` where mixing applies.
    #[arg(long)]
    pub ravm_steps: Option<String>,

    #[arg(long)]
    pub h_tok: Option<usize>,

    #[arg(long)]
    pub w_tok: Option<usize>,

    /// Model embedding width.
    #[arg(long)]
    pub model_dim: Option<usize>,

    #[arg(long)]
    pub heads: Option<usize>,

    #[arg(long)]
    pub blocks: Option<usize>,

    /// Seed for the frozen toy weights (distinct from the story seed).
    #[arg(long)]
    pub model_seed: Option<u64>,

    /// Disable latent panel anchoring.
    #[arg(long)]
    pub no_lpa: bool,

    /// Disable reciprocal attention value mixing.
    #[arg(long)]
    pub no_ravm: bool,

    /// Run once per lambda in `a,b,c`, writing one manifest each.
    #[arg(long)]
    pub lambda_sweep: Option<String>,

    /// Output directory root.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,

    /// Also write the uncropped two-panel composites.
    #[arg(long)]
    pub composites: bool,

    /// Collect and export reciprocal heatmaps and a key-PCA map.
    #[arg(long)]
    pub diagnostics: bool,
}

fn load_spec(args: &GenerateArgs) -> Result<(StoryboardSpec, PathBuf)> {
    if let Some(from_entry) = &args.from_entry {
        let (file, story_id) = from_entry.rsplit_once(':').ok_or_else(|| {
            Error::Config("--from-entry takes <benchmark.json>:<story_id>".into())
        })?;
        let path = PathBuf::from(file);
        let entries = load_benchmark(&path)?;
        let entry = entries
            .iter()
            .find(|e| e.story_id == story_id)
            .ok_or_else(|| Error::Lookup(format!("no benchmark entry '{story_id}'")))?;
        let spec = StoryboardSpec {
            story_id: entry.story_id.clone(),
            reference_prompt: entry.character_description.clone(),
            scene_prompts: entry.panel_prompts.clone(),
            seed: args.seed.unwrap_or(0),
            reuse_reference_scene: None,
        };
        return Ok((spec, path));
    }
    let path = args.spec.clone().expect("clap enforces spec xor from-entry");
    let text = std::fs::read_to_string(&path)
        .map_err(|e| Error::Config(format!("cannot read spec {}: {e}", path.display())))?;
    let mut spec: StoryboardSpec = serde_json::from_str(&text)?;
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    Ok((spec, path))
}

pub fn run(args: &GenerateArgs) -> Result<()> {
    let (spec, spec_path) = load_spec(args)?;
    spec.validate()?;

    let overrides = ConfigOverrides {
        steps: args.steps,
        guidance: args.guidance,
        lambda: args.lambda,
        momentum: args.momentum,
        ravm_blocks: args.ravm_blocks.as_deref().map(parse_block_list).transpose()?,
        ravm_step_range: args.ravm_steps.as_deref().map(parse_step_range).transpose()?,
        h_tok: args.h_tok,
        w_tok: args.w_tok,
        d: args.model_dim,
        heads: args.heads,
        blocks: args.blocks,
        seed: args.model_seed,
        no_lpa: args.no_lpa,
        no_ravm: args.no_ravm,
        diagnostics: args.diagnostics,
    };
    let base_config = resolve_config(args.config.as_deref(), &overrides)?;

    let mut input_hashes = BTreeMap::new();
    input_hashes.insert(format!("spec:{}", spec_path.display()), sha256_file(&spec_path)?);
    if let Some(config_path) = &args.config {
        input_hashes.insert(
            format!("config:{}", config_path.display()),
            sha256_file(config_path)?,
        );
    }

    let sweep = match &args.lambda_sweep {
        Some(text) => parse_lambda_sweep(text)?,
        None => vec![base_config.lambda],
    };
    let sweeping = args.lambda_sweep.is_some();

    for lambda in sweep {
        let mut config = base_config.clone();
        config.lambda = lambda;
        config.validate()?;
        let story_dir = if sweeping {
            args.out.join(&spec.story_id).join(format!("lambda_{lambda}"))
        } else {
            args.out.join(&spec.story_id)
        };
        generate_one(&spec, &config, &story_dir, args, input_hashes.clone())?;
    }
    Ok(())
}

fn generate_one(
    spec: &StoryboardSpec,
    config: &BackendConfig,
    story_dir: &Path,
    args: &GenerateArgs,
    input_hashes: BTreeMap<String, String>,
) -> Result<()> {
    let started = Instant::now();
    std::fs::create_dir_all(story_dir)?;
    let backend = ToyBackend::new(config.clone())?;
    let run = backend.run_storyboard(spec)?;

    let mut outputs = Vec::new();
    for (i, panel) in run.panels.iter().enumerate() {
        let path = story_dir.join(format!("panel_{i}.png"));
        imageio::save_panel_png(&path, panel)?;
        outputs.push(ManifestOutput {
            path: path.display().to_string(),
            sha256: sha256_hex(&std::fs::read(&path)?),
        });
    }
    if args.composites {
        for (i, composite) in run.composites.iter().enumerate() {
            let path = story_dir.join(format!("composite_{i}.png"));
            imageio::save_panel_png(&path, composite)?;
            outputs.push(ManifestOutput {
                path: path.display().to_string(),
                sha256: sha256_hex(&std::fs::read(&path)?),
            });
        }
    }

    if config.collect_diagnostics {
        let diag_dir = story_dir.join("diagnostics");
        std::fs::create_dir_all(&diag_dir)?;
        let grid = (config.h_tok, config.w_tok);
        if let Some(snapshot) = run.diagnostics.reciprocal_snapshots.last() {
            // Anchor on the bottom token with the strongest correspondence.
            let m = snapshot.state.m_bar();
            let anchor_token = (0..config.panel_tokens())
                .max_by(|&a, &b| {
                    let col = |v: usize| {
                        (0..config.panel_tokens())
                            .map(|u| m[[u, v]])
                            .fold(f32::NEG_INFINITY, f32::max)
                    };
                    col(a).partial_cmp(&col(b)).unwrap_or(std::cmp::Ordering::Equal)
                })
                .unwrap_or(0);
            let anchor = Anchor::Bottom(anchor_token);
            let heat = reciprocal_heatmap(&snapshot.state, anchor, grid)?;
            let path = diag_dir.join(format!(
                "reciprocal_step{}_block{}.png",
                snapshot.step, snapshot.block
            ));
            storyboard_core::attention::diagnostics::export_heatmap(
                &path,
                &heat,
                &DiagnosticSidecar {
                    step: snapshot.step,
                    layer: snapshot.block,
                    anchor: Some(anchor),
                    grid,
                },
            )?;
        }
        if let Some(keys) = &run.diagnostics.key_snapshot {
            let rgb = key_pca_map(&keys.keys, (2 * config.h_tok, config.w_tok))?;
            let path = diag_dir.join(format!("key_pca_step{}_block{}.png", keys.step, keys.block));
            storyboard_core::attention::diagnostics::export_key_pca(
                &path,
                &rgb,
                &DiagnosticSidecar {
                    step: keys.step,
                    layer: keys.block,
                    anchor: None,
                    grid: (2 * config.h_tok, config.w_tok),
                },
            )?;
        }
    }

    let manifest = RunManifest {
        command: "generate".into(),
        config: config.clone(),
        seeds: [
            ("story".to_string(), spec.seed),
            ("model".to_string(), config.seed),
        ]
        .into_iter()
        .collect(),
        input_hashes,
        outputs,
        wall_ms: started.elapsed().as_millis(),
    };
    manifest.write_atomic(story_dir)?;

    let mixed: usize = run.diagnostics.mix_events.iter().map(|e| e.selected).sum();
    println!(
        "generated {} panels in {} (lambda={}, lpa={}, ravm={}, tokens mixed: {mixed})",
        run.panels.len(),
        story_dir.display(),
        config.lambda,
        config.lpa,
        config.ravm,
    );
    Ok(())
}
