//! `storyboard decompose`: story file in, decomposition JSON out.

use std::path::PathBuf;

use clap::Args;
use storyboard_core::error::{Error, Result};
use storyboard_core::{
    decompose, validate_decomposition, ChatClient, FixtureClient, HttpChatClient, StoryboardSpec,
};

#[derive(Debug, Args)]
pub struct DecomposeArgs {
    /// Story text file.
    pub story: PathBuf,

    /// Number of scene panels to produce.
    #[arg(long, default_value_t = 7)]
    pub panels: usize,

    /// Replay a recorded transcript file instead of calling a service.
    #[arg(long, conflicts_with = "live")]
    pub fixture: Option<PathBuf>,

    /// Call a live chat-completion endpoint.
    #[arg(long)]
    pub live: bool,

    /// Chat-completion endpoint URL (or STORYBOARD_API_URL).
    #[arg(long)]
    pub endpoint: Option<String>,

    /// Model name sent to the live endpoint.
    #[arg(long, default_value = "gpt-4o")]
    pub model: String,

    /// Where to write the decomposition JSON.
    #[arg(long, default_value = "decomposition.json")]
    pub out: PathBuf,

    /// Also write a ready-to-generate spec file here.
    #[arg(long)]
    pub spec_out: Option<PathBuf>,

    /// Story id used in the spec file (default: story file stem).
    #[arg(long)]
    pub story_id: Option<String>,

    /// Seed recorded in the spec file.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

pub fn run(args: &DecomposeArgs) -> Result<()> {
    let story = std::fs::read_to_string(&args.story).map_err(|e| {
        Error::Config(format!("cannot read story {}: {e}", args.story.display()))
    })?;

    let client: Box<dyn ChatClient> = if args.live {
        let endpoint = args
            .endpoint
            .clone()
            .or_else(|| std::env::var("STORYBOARD_API_URL").ok())
            .ok_or_else(|| {
                Error::Config("--live needs --endpoint or STORYBOARD_API_URL".into())
            })?;
        Box::new(HttpChatClient::new(endpoint, args.model.clone())?)
    } else {
        let path = args.fixture.as_ref().ok_or_else(|| {
            Error::Config("either --fixture <file> or --live is required".into())
        })?;
        Box::new(FixtureClient::from_file(path)?)
    };

    let decomposition = decompose(&story, args.panels, client.as_ref())?;
    for warning in validate_decomposition(&decomposition) {
        eprintln!("warning: {warning}");
    }

    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(&args.out, serde_json::to_vec_pretty(&decomposition)?)?;
    println!(
        "wrote {} ({} scenes, reference: {:?})",
        args.out.display(),
        decomposition.scene_prompts.len(),
        decomposition.reference_prompt
    );

    if let Some(spec_out) = &args.spec_out {
        let story_id = args.story_id.clone().unwrap_or_else(|| {
            args.story
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "story".to_string())
        });
        let spec = StoryboardSpec {
            story_id,
            reference_prompt: decomposition.reference_prompt.clone(),
            scene_prompts: decomposition.scene_prompts.clone(),
            seed: args.seed,
            reuse_reference_scene: None,
        };
        if let Some(parent) = spec_out.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(spec_out, serde_json::to_vec_pretty(&spec)?)?;
        println!("wrote {}", spec_out.display());
    }
    Ok(())
}
