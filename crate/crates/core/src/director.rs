//! The prompt "Director": turns a freeform story into one reference
//! prompt (the recurring characters or objects) plus `n` scene prompts,
//! via a chat-completion-style service. A fixture client replays
//! recorded transcripts for deterministic offline runs.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Environment variable holding the live-service auth token.
pub const API_KEY_ENV: &str = "STORYBOARD_API_KEY";

/// Parse failures are retried this many times before giving up.
const PARSE_RETRIES: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecompositionSource {
    Live,
    Fixture,
}

/// A decomposed story: the shared reference prompt and one prompt per
/// scene panel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decomposition {
    pub reference_prompt: String,
    pub scene_prompts: Vec<String>,
    pub source: DecompositionSource,
}

/// One decomposition request as handed to a client.
#[derive(Debug, Clone)]
pub struct DirectorRequest {
    /// The full instruction sent to the service.
    pub instruction: String,
    /// The raw story, used by fixture clients for transcript lookup.
    pub story: String,
    pub n: usize,
}

/// A blocking chat-completion client.
pub trait ChatClient {
    fn complete(&self, request: &DirectorRequest) -> Result<String>;
    fn source(&self) -> DecompositionSource;
}

/// Hex-encoded SHA-256 of a story text; the key fixture transcripts are
/// stored under.
pub fn story_key(story: &str) -> String {
    let digest = Sha256::digest(story.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Replays recorded replies from a JSON map of story hash to reply.
pub struct FixtureClient {
    transcripts: BTreeMap<String, String>,
}

impl FixtureClient {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read fixture transcripts {}: {e}", path.display()))
        })?;
        Ok(Self { transcripts: serde_json::from_str(&text)? })
    }

    pub fn from_map(transcripts: BTreeMap<String, String>) -> Self {
        Self { transcripts }
    }

    /// Convenience for building fixtures: keys a reply by its story.
    pub fn record(&mut self, story: &str, reply: &str) {
        self.transcripts.insert(story_key(story), reply.to_string());
    }
}

impl ChatClient for FixtureClient {
    fn complete(&self, request: &DirectorRequest) -> Result<String> {
        let key = story_key(&request.story);
        self.transcripts.get(&key).cloned().ok_or_else(|| {
            Error::Config(format!("no fixture transcript recorded for story hash {key}"))
        })
    }

    fn source(&self) -> DecompositionSource {
        DecompositionSource::Fixture
    }
}

/// Live client for an OpenAI-style chat-completion endpoint. The auth
/// token comes from [`API_KEY_ENV`].
pub struct HttpChatClient {
    endpoint: String,
    model: String,
    api_key: String,
    agent: reqwest::blocking::Client,
}

impl HttpChatClient {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>) -> Result<Self> {
        let api_key = std::env::var(API_KEY_ENV).map_err(|_| {
            Error::Config(format!("{API_KEY_ENV} must be set for live decomposition"))
        })?;
        Ok(Self {
            endpoint: endpoint.into(),
            model: model.into(),
            api_key,
            agent: reqwest::blocking::Client::new(),
        })
    }
}

impl ChatClient for HttpChatClient {
    fn complete(&self, request: &DirectorRequest) -> Result<String> {
        let body = serde_json::json!({
            "model": self.model,
            "messages": [{"role": "user", "content": request.instruction}],
            "temperature": 0,
        });
        let response = self
            .agent
            .post(&self.endpoint)
            .bearer_auth(&self.api_key)
            .json(&body)
            .send()
            .map_err(|e| Error::Transport(e.to_string()))?;
        if !response.status().is_success() {
            return Err(Error::Transport(format!(
                "{} returned {}",
                self.endpoint,
                response.status()
            )));
        }
        let value: serde_json::Value =
            response.json().map_err(|e| Error::Transport(e.to_string()))?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| Error::Transport("reply missing choices[0].message.content".into()))
    }

    fn source(&self) -> DecompositionSource {
        DecompositionSource::Live
    }
}

/// The decomposition instruction for one story, asking for `n` panels
/// in a machine-parseable layout.
pub fn build_instruction(story: &str, n: usize) -> String {
    format!(
        "You are a storyboard designer helping to create cinematic, visually expressive \
         storyboards. Your task is to:\n\
         \n\
         (1) Read the story below.\n\
         \n\
         (2) Break down the story into {n} distinct storyboard scene descriptions. Each should \
         describe one key visual moment--something worth illustrating in a single panel. Replace \
         names with a description of the character (e.g. instead of \"Tom went to the store\", \
         say \"A man went to the store\").\n\
         \n\
         (3) Write one reference description of all recurring characters or objects.\n\
         \n\
         Return:\n\
         \n\
         - A line starting with \"Reference:\" followed by the reference description\n\
         - A numbered list of {n} storyboard panel prompts that visually represent the story, \
         one prompt per line\n\
         \n\
         Story:\n\
         \n\
         {story}"
    )
}

/// Decomposes a story into exactly `n` scene prompts plus a reference
/// prompt, retrying parse failures up to two times.
///
/// Transport failures abort immediately. If the reply carries no
/// `Reference:` line, the reference defaults to the longest common
/// prefix of the scene prompts, cut at a word boundary.
pub fn decompose(story: &str, n: usize, client: &dyn ChatClient) -> Result<Decomposition> {
    if story.trim().is_empty() {
        return Err(Error::Contract("story must be non-empty".into()));
    }
    if n == 0 {
        return Err(Error::Contract("at least one scene is required".into()));
    }
    let request = DirectorRequest {
        instruction: build_instruction(story, n),
        story: story.to_string(),
        n,
    };

    let mut last_err = None;
    for _ in 0..=PARSE_RETRIES {
        let reply = client.complete(&request)?;
        match parse_reply(&reply, n) {
            Ok((explicit_reference, scene_prompts)) => {
                let reference = explicit_reference
                    .filter(|r| !r.is_empty())
                    .or_else(|| common_prefix_reference(&scene_prompts));
                match reference {
                    Some(reference_prompt) => {
                        return Ok(Decomposition {
                            reference_prompt,
                            scene_prompts,
                            source: client.source(),
                        })
                    }
                    None => {
                        last_err = Some(Error::Format {
                            message: "no reference prompt stated or derivable".into(),
                            raw: reply,
                        })
                    }
                }
            }
            Err(e) => last_err = Some(e),
        }
    }
    Err(last_err.expect("at least one attempt runs"))
}

fn parse_numbered_item(line: &str) -> Option<String> {
    let digits = line.chars().take_while(|c| c.is_ascii_digit()).count();
    if digits == 0 {
        return None;
    }
    let rest = &line[digits..];
    let rest = rest.strip_prefix(['.', ')', ':'])?;
    let item = rest.trim();
    (!item.is_empty()).then(|| item.to_string())
}

fn parse_reply(reply: &str, n: usize) -> Result<(Option<String>, Vec<String>)> {
    let mut reference = None;
    let mut scenes = Vec::new();
    for line in reply.lines() {
        let line = line.trim();
        if let Some(rest) = line.strip_prefix("Reference:") {
            reference = Some(rest.trim().to_string());
        } else if let Some(item) = parse_numbered_item(line) {
            scenes.push(item);
        }
    }
    if scenes.len() != n {
        return Err(Error::Format {
            message: format!("expected {n} numbered scene prompts, found {}", scenes.len()),
            raw: reply.to_string(),
        });
    }
    Ok((reference, scenes))
}

/// Longest common prefix of the prompts, cut back to the last complete
/// word when it stops mid-word. This recovers the recurring-character
/// description when every panel prompt opens with it.
fn common_prefix_reference(prompts: &[String]) -> Option<String> {
    let first = prompts.first()?;
    let mut prefix_len = first.len();
    for prompt in &prompts[1..] {
        let mut common = 0;
        for ((i, a), (_, b)) in first.char_indices().zip(prompt.char_indices()) {
            if a != b {
                break;
            }
            common = i + a.len_utf8();
        }
        prefix_len = prefix_len.min(common);
    }
    let prefix = &first[..prefix_len];
    let stops_mid_word = prefix.chars().last().is_some_and(|c| !c.is_whitespace())
        && prompts.iter().any(|p| {
            p[prefix_len.min(p.len())..]
                .chars()
                .next()
                .is_some_and(|c| !c.is_whitespace())
        });
    let reference = if stops_mid_word {
        prefix[..prefix.rfind(char::is_whitespace).unwrap_or(0)].trim()
    } else {
        prefix.trim()
    };
    (!reference.is_empty()).then(|| reference.to_string())
}

/// Words allowed to open a sentence capitalized without tripping the
/// proper-name heuristic.
const COMMON_OPENERS: &[&str] = &[
    "a", "an", "the", "one", "two", "three", "he", "she", "it", "they", "we", "i", "in", "on",
    "at", "by", "from", "with", "as", "after", "before", "during", "under", "over", "beneath",
    "beside", "inside", "outside", "near", "far", "and", "then", "later", "meanwhile",
    "suddenly", "finally", "when", "while", "night", "morning", "dawn", "dusk", "now",
];

/// Lints a decomposition: empty prompts, likely proper names (a
/// capitalized-token heuristic), and duplicated scene prompts. Returns
/// human-readable warnings and never mutates.
pub fn validate_decomposition(decomposition: &Decomposition) -> Vec<String> {
    let mut warnings = Vec::new();

    if decomposition.reference_prompt.trim().is_empty() {
        warnings.push("reference prompt is empty".to_string());
    }
    if let Some(name) = find_proper_name(&decomposition.reference_prompt) {
        warnings.push(format!("reference prompt may contain a proper name: \"{name}\""));
    }

    for (i, prompt) in decomposition.scene_prompts.iter().enumerate() {
        if prompt.trim().is_empty() {
            warnings.push(format!("scene prompt {i} is empty"));
            continue;
        }
        if let Some(name) = find_proper_name(prompt) {
            warnings.push(format!("scene prompt {i} may contain a proper name: \"{name}\""));
        }
        for (j, other) in decomposition.scene_prompts.iter().enumerate().skip(i + 1) {
            if prompt == other {
                warnings.push(format!("scene prompts {i} and {j} are duplicates"));
            }
        }
    }
    warnings
}

/// First token that looks like a proper name: capitalized mid-sentence,
/// or capitalized at a sentence start without being a common opener.
fn find_proper_name(text: &str) -> Option<String> {
    let mut sentence_start = true;
    for raw in text.split_whitespace() {
        let word: String = raw
            .trim_matches(|c: char| !c.is_alphabetic())
            .to_string();
        let ends_sentence = raw.ends_with(['.', '!', '?']);
        if word.is_empty() {
            sentence_start = ends_sentence || sentence_start;
            continue;
        }
        let capitalized = word.chars().next().is_some_and(char::is_uppercase);
        if capitalized {
            let lower = word.to_lowercase();
            if !sentence_start || !COMMON_OPENERS.contains(&lower.as_str()) {
                return Some(word);
            }
        }
        sentence_start = ends_sentence;
    }
    None
}
