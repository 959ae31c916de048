//! Backend configuration loading with per-field precedence:
//! CLI flag > config file > built-in default.

use std::collections::BTreeSet;
use std::path::Path;

use storyboard_core::error::{Error, Result};
use storyboard_core::BackendConfig;

/// Per-field overrides collected from command-line flags.
#[derive(Debug, Default, Clone)]
pub struct ConfigOverrides {
    pub steps: Option<usize>,
    pub guidance: Option<f32>,
    pub lambda: Option<f32>,
    pub momentum: Option<f32>,
    pub ravm_blocks: Option<BTreeSet<usize>>,
    pub ravm_step_range: Option<(usize, usize)>,
    pub h_tok: Option<usize>,
    pub w_tok: Option<usize>,
    pub d: Option<usize>,
    pub heads: Option<usize>,
    pub blocks: Option<usize>,
    pub seed: Option<u64>,
    pub no_lpa: bool,
    pub no_ravm: bool,
    pub diagnostics: bool,
}

/// Loads the layered configuration and validates the result.
pub fn resolve_config(file: Option<&Path>, overrides: &ConfigOverrides) -> Result<BackendConfig> {
    let mut config = match file {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| {
                Error::Config(format!("cannot read config {}: {e}", path.display()))
            })?;
            toml::from_str(&text)
                .map_err(|e| Error::Config(format!("invalid config {}: {e}", path.display())))?
        }
        None => BackendConfig::default(),
    };

    if let Some(steps) = overrides.steps {
        config.steps = steps;
    }
    if let Some(guidance) = overrides.guidance {
        config.guidance = guidance;
    }
    if let Some(lambda) = overrides.lambda {
        config.lambda = lambda;
    }
    if let Some(momentum) = overrides.momentum {
        config.momentum = momentum;
    }
    if let Some(blocks) = &overrides.ravm_blocks {
        config.ravm_blocks = Some(blocks.clone());
    }
    if let Some(range) = overrides.ravm_step_range {
        config.ravm_step_range = Some(range);
    }
    if let Some(h_tok) = overrides.h_tok {
        config.h_tok = h_tok;
    }
    if let Some(w_tok) = overrides.w_tok {
        config.w_tok = w_tok;
    }
    if let Some(d) = overrides.d {
        config.d = d;
    }
    if let Some(heads) = overrides.heads {
        config.heads = heads;
    }
    if let Some(blocks) = overrides.blocks {
        config.blocks = blocks;
    }
    if let Some(seed) = overrides.seed {
        config.seed = seed;
    }
    if overrides.no_lpa {
        config.lpa = false;
    }
    if overrides.no_ravm {
        config.ravm = false;
    }
    if overrides.diagnostics {
        config.collect_diagnostics = true;
    }

    config.validate()?;
    Ok(config)
}

/// Parses `a,b,c` into a block set.
pub fn parse_block_list(text: &str) -> Result<BTreeSet<usize>> {
    text.split(',')
        .map(|part| {
            part.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("invalid block index '{part}'")))
        })
        .collect()
}

/// Parses `start,end` into a half-open step interval.
pub fn parse_step_range(text: &str) -> Result<(usize, usize)> {
    let parts: Vec<&str> = text.split(',').map(str::trim).collect();
    if parts.len() != 2 {
        return Err(Error::Config(format!(
            "step range must be 'start,end', got '{text}'"
        )));
    }
    let start = parts[0]
        .parse()
        .map_err(|_| Error::Config(format!("invalid step '{}'", parts[0])))?;
    let end = parts[1]
        .parse()
        .map_err(|_| Error::Config(format!("invalid step '{}'", parts[1])))?;
    Ok((start, end))
}

/// Parses `1.0,0.5,0.0` into a lambda sweep.
pub fn parse_lambda_sweep(text: &str) -> Result<Vec<f32>> {
    text.split(',')
        .map(|part| {
            part.trim()
                .parse::<f32>()
                .map_err(|_| Error::Config(format!("invalid lambda '{part}'")))
        })
        .collect()
}
