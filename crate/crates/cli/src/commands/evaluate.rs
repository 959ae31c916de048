//! `storyboard evaluate`: score generated panels against the benchmark.

use std::collections::BTreeMap;
use std::path::PathBuf;

use clap::Args;
use ndarray::Array3;
use storyboard_core::error::{Error, Result};
use storyboard_core::{
    evaluate, imageio, load_benchmark, FixtureDetector, Provenance, SceneDiversityScorer,
    StoryScorer,
};

use crate::manifest::{sha256_file, RunManifest};

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Directory holding one `<story_id>/panel_<i>.png` tree per story.
    #[arg(long, default_value = "out")]
    pub panels: PathBuf,

    /// Benchmark entries file.
    #[arg(long)]
    pub benchmark: PathBuf,

    /// Annotation fixture for the scene-diversity detector.
    #[arg(long)]
    pub annotations: Option<PathBuf>,

    /// Comma-separated metric names to run.
    #[arg(long, default_value = "scene-diversity")]
    pub metrics: String,

    /// Restrict evaluation to these story ids (comma-separated).
    #[arg(long)]
    pub stories: Option<String>,

    /// Report output path.
    #[arg(long, default_value = "report.json")]
    pub out: PathBuf,
}

fn load_panels(dir: &PathBuf) -> Result<Vec<Array3<f32>>> {
    let mut indexed = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        if let Some(index) = name
            .strip_prefix("panel_")
            .and_then(|rest| rest.strip_suffix(".png"))
            .and_then(|i| i.parse::<usize>().ok())
        {
            indexed.push((index, path));
        }
    }
    indexed.sort_by_key(|(i, _)| *i);
    indexed
        .into_iter()
        .map(|(_, path)| imageio::load_rgb_png(&path))
        .collect()
}

pub fn run(args: &EvaluateArgs) -> Result<()> {
    let entries = load_benchmark(&args.benchmark)?;

    let selected: Vec<String> = match &args.stories {
        Some(list) => list.split(',').map(|s| s.trim().to_string()).collect(),
        None => entries.iter().map(|e| e.story_id.clone()).collect(),
    };

    let mut storyboards = BTreeMap::new();
    let mut missing = Vec::new();
    let mut seeds = BTreeMap::new();
    for story_id in &selected {
        let dir = args.panels.join(story_id);
        let panels = if dir.is_dir() { load_panels(&dir)? } else { Vec::new() };
        if panels.is_empty() {
            missing.push(story_id.clone());
            continue;
        }
        if let Ok(manifest) = RunManifest::read(&dir) {
            if let Some(seed) = manifest.seeds.get("story") {
                seeds.insert(story_id.clone(), *seed);
            }
        }
        storyboards.insert(story_id.clone(), panels);
    }
    if !missing.is_empty() {
        return Err(Error::Lookup(format!(
            "no panels found under {} for stories: {}",
            args.panels.display(),
            missing.join(", ")
        )));
    }

    let mut scorers: Vec<Box<dyn StoryScorer>> = Vec::new();
    for metric in args.metrics.split(',').map(str::trim).filter(|m| !m.is_empty()) {
        match metric {
            "scene-diversity" | "scene_diversity" => {
                let path = args.annotations.as_ref().ok_or_else(|| {
                    Error::Config("scene-diversity needs --annotations <file>".into())
                })?;
                let detector = FixtureDetector::from_file(path)?;
                scorers.push(Box::new(SceneDiversityScorer::new(Box::new(detector))));
            }
            other => {
                return Err(Error::Config(format!(
                    "unknown metric '{other}' (available: scene-diversity)"
                )))
            }
        }
    }

    let mut hasher_input = sha256_file(&args.benchmark)?;
    if let Some(annotations) = &args.annotations {
        hasher_input.push(':');
        hasher_input.push_str(&sha256_file(annotations)?);
    }
    let provenance = Provenance {
        config_hash: crate::manifest::sha256_hex(hasher_input.as_bytes()),
        seeds,
        normalization_scope: "evaluated_set".into(),
    };

    let report = evaluate(&storyboards, &entries, &scorers, provenance)?;
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(&args.out, serde_json::to_vec_pretty(&report)?)?;

    println!("evaluated {} stories -> {}", report.stories.len(), args.out.display());
    for (metric, aggregate) in &report.aggregates {
        match aggregate.mean {
            Some(mean) => println!(
                "  {metric}: mean {mean:.4} over {} stories ({} failed)",
                aggregate.scored, aggregate.failed
            ),
            None => println!("  {metric}: no stories scored ({} failed)", aggregate.failed),
        }
    }
    Ok(())
}
