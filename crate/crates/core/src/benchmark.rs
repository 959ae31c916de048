//! Storyboard benchmark entries and the evaluation harness that runs
//! pluggable scorers over generated panels.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::diversity::{
    bbox_std_score, minmax_normalize, pose_variance_score, scene_diversity, detect,
    Detector, DiversityReport,
};
use crate::error::{Error, Result};

/// Panels per benchmark story.
pub const PANEL_COUNT: usize = 7;

/// One benchmark story: the full narrative, its recurring-subject
/// description, and seven scene-level panel prompts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkEntry {
    pub story_id: String,
    pub full_story: String,
    pub character_description: String,
    pub is_human: bool,
    pub panel_prompts: Vec<String>,
    /// Optional per-story annotation fixture path, relative to the
    /// benchmark file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotations: Option<PathBuf>,
}

/// Violations for one entry; empty when the entry is well-formed.
pub fn validate_entry(entry: &BenchmarkEntry) -> Vec<String> {
    let mut problems = Vec::new();
    let id = &entry.story_id;
    if id.trim().is_empty() {
        problems.push("entry has an empty story_id".to_string());
    }
    if entry.full_story.trim().is_empty() {
        problems.push(format!("{id}: full_story is empty"));
    }
    if entry.character_description.trim().is_empty() {
        problems.push(format!("{id}: character_description is empty"));
    }
    if entry.panel_prompts.len() != PANEL_COUNT {
        problems.push(format!(
            "{id}: expected {PANEL_COUNT} panel prompts, found {}",
            entry.panel_prompts.len()
        ));
    }
    for (i, prompt) in entry.panel_prompts.iter().enumerate() {
        if prompt.trim().is_empty() {
            problems.push(format!("{id}: panel prompt {i} is empty"));
        }
    }
    problems
}

/// Parses and validates a benchmark JSON document (an array of entries).
pub fn parse_benchmark(json: &str) -> Result<Vec<BenchmarkEntry>> {
    let entries: Vec<BenchmarkEntry> = serde_json::from_str(json)?;
    let mut problems: Vec<String> = entries.iter().flat_map(|e| validate_entry(e)).collect();
    let mut seen = BTreeMap::new();
    for entry in &entries {
        if let Some(first) = seen.insert(entry.story_id.clone(), ()) {
            let _ = first;
            problems.push(format!("{}: duplicate story_id", entry.story_id));
        }
    }
    if problems.is_empty() {
        Ok(entries)
    } else {
        Err(Error::Validation(problems))
    }
}

pub fn load_benchmark(path: &Path) -> Result<Vec<BenchmarkEntry>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read benchmark {}: {e}", path.display())))?;
    parse_benchmark(&text)
}

pub fn to_canonical_json(entries: &[BenchmarkEntry]) -> Result<String> {
    Ok(serde_json::to_string_pretty(entries)?)
}

/// One story's inputs for scoring.
pub struct ScoringItem<'a> {
    pub entry: &'a BenchmarkEntry,
    pub panels: &'a [Array3<f32>],
}

/// Result of one scorer on one story. Failures carry a message and are
/// excluded from aggregates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreOutcome {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub value: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detail: Option<serde_json::Value>,
}

impl ScoreOutcome {
    fn failed(message: String) -> Self {
        Self { value: None, error: Some(message), detail: None }
    }
}

/// A metric computed per story over the whole evaluated set. Batch-level
/// scorers may normalize internally across the set.
pub trait StoryScorer {
    fn name(&self) -> &'static str;

    /// Scores every item, one outcome per item, in order.
    fn score_batch(&self, items: &[ScoringItem<'_>]) -> Vec<ScoreOutcome>;
}

/// Scene Diversity over a detector backend: raw spreads per story,
/// min-max normalization of each component across the evaluated set,
/// then the human/non-human combination.
pub struct SceneDiversityScorer {
    detector: Box<dyn Detector>,
}

impl SceneDiversityScorer {
    pub fn new(detector: Box<dyn Detector>) -> Self {
        Self { detector }
    }
}

impl StoryScorer for SceneDiversityScorer {
    fn name(&self) -> &'static str {
        "scene_diversity"
    }

    fn score_batch(&self, items: &[ScoringItem<'_>]) -> Vec<ScoreOutcome> {
        // Raw spreads per story; a story failing here drops out of
        // normalization and aggregation.
        let raws: Vec<std::result::Result<(f64, Option<f64>), String>> = items
            .iter()
            .map(|item| {
                let annotations = detect(
                    &item.entry.story_id,
                    item.panels,
                    &item.entry.character_description,
                    self.detector.as_ref(),
                )
                .map_err(|e| e.to_string())?;
                let raw_bbox = bbox_std_score(&annotations).map_err(|e| e.to_string())?;
                let raw_pose = if item.entry.is_human {
                    Some(pose_variance_score(&annotations).map_err(|e| e.to_string())?)
                } else {
                    None
                };
                Ok((raw_bbox, raw_pose))
            })
            .collect();

        let bbox_raws: Vec<f64> = raws
            .iter()
            .filter_map(|r| r.as_ref().ok().map(|(b, _)| *b))
            .collect();
        let pose_raws: Vec<f64> = raws
            .iter()
            .filter_map(|r| r.as_ref().ok().and_then(|(_, p)| *p))
            .collect();
        let bbox_norm = minmax_normalize(&bbox_raws).unwrap_or_default();
        let pose_norm = if pose_raws.is_empty() {
            Vec::new()
        } else {
            minmax_normalize(&pose_raws).unwrap_or_default()
        };

        let mut bbox_cursor = 0usize;
        let mut pose_cursor = 0usize;
        raws.into_iter()
            .zip(items)
            .map(|(raw, item)| match raw {
                Err(message) => ScoreOutcome::failed(message),
                Ok((raw_bbox, raw_pose)) => {
                    let s_bbox = bbox_norm[bbox_cursor];
                    bbox_cursor += 1;
                    let s_pose = raw_pose.map(|_| {
                        let s = pose_norm[pose_cursor];
                        pose_cursor += 1;
                        s
                    });
                    match scene_diversity(s_bbox, s_pose, item.entry.is_human) {
                        Ok(final_score) => {
                            let report = DiversityReport {
                                raw_bbox_std: raw_bbox,
                                raw_pose_var: raw_pose,
                                s_bbox,
                                s_pose,
                                final_score,
                                is_human: item.entry.is_human,
                            };
                            ScoreOutcome {
                                value: Some(final_score),
                                error: None,
                                detail: serde_json::to_value(report).ok(),
                            }
                        }
                        Err(e) => ScoreOutcome::failed(e.to_string()),
                    }
                }
            })
            .collect()
    }
}

/// Run provenance recorded into every report.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seeds: BTreeMap<String, u64>,
    /// Which population min-max normalization ran over.
    pub normalization_scope: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoryScores {
    pub story_id: String,
    pub scores: BTreeMap<String, ScoreOutcome>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricAggregate {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean: Option<f64>,
    pub scored: usize,
    pub failed: usize,
}

/// Per-story scores by metric plus benchmark-level means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub stories: Vec<StoryScores>,
    pub aggregates: BTreeMap<String, MetricAggregate>,
    pub provenance: Provenance,
}

/// Scores every storyboard with every scorer and aggregates per-metric
/// means over the successful stories.
///
/// Every storyboard must have a benchmark entry; stories are processed
/// in story-id order, so output is deterministic for fixture scorers.
pub fn evaluate(
    storyboards: &BTreeMap<String, Vec<Array3<f32>>>,
    entries: &[BenchmarkEntry],
    scorers: &[Box<dyn StoryScorer>],
    provenance: Provenance,
) -> Result<EvaluationReport> {
    let by_id: BTreeMap<&str, &BenchmarkEntry> =
        entries.iter().map(|e| (e.story_id.as_str(), e)).collect();
    let missing: Vec<&String> = storyboards
        .keys()
        .filter(|id| !by_id.contains_key(id.as_str()))
        .collect();
    if !missing.is_empty() {
        return Err(Error::Lookup(format!(
            "no benchmark entry for stories: {}",
            missing.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", ")
        )));
    }

    let items: Vec<ScoringItem<'_>> = storyboards
        .iter()
        .map(|(id, panels)| ScoringItem { entry: by_id[id.as_str()], panels })
        .collect();

    let mut stories: Vec<StoryScores> = storyboards
        .keys()
        .map(|id| StoryScores { story_id: id.clone(), scores: BTreeMap::new() })
        .collect();
    let mut aggregates = BTreeMap::new();

    for scorer in scorers {
        let outcomes = scorer.score_batch(&items);
        if outcomes.len() != items.len() {
            return Err(Error::Contract(format!(
                "scorer {} returned {} outcomes for {} stories",
                scorer.name(),
                outcomes.len(),
                items.len()
            )));
        }
        let values: Vec<f64> = outcomes.iter().filter_map(|o| o.value).collect();
        let scored = values.len();
        let failed = outcomes.len() - scored;
        let mean = (scored > 0).then(|| values.iter().sum::<f64>() / scored as f64);
        aggregates.insert(scorer.name().to_string(), MetricAggregate { mean, scored, failed });
        for (story, outcome) in stories.iter_mut().zip(outcomes) {
            story.scores.insert(scorer.name().to_string(), outcome);
        }
    }

    Ok(EvaluationReport { stories, aggregates, provenance })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diversity::FixtureDetector;

    fn entry(id: &str, is_human: bool) -> BenchmarkEntry {
        BenchmarkEntry {
            story_id: id.into(),
            full_story: format!("A story about {id}."),
            character_description: "a traveler".into(),
            is_human,
            panel_prompts: (0..PANEL_COUNT).map(|i| format!("{id} scene {i}")).collect(),
            annotations: None,
        }
    }

    #[test]
    fn well_formed_entry_round_trips() {
        let entries = vec![entry("alpha", true), entry("beta", false)];
        let json = to_canonical_json(&entries).unwrap();
        let back = parse_benchmark(&json).unwrap();
        assert_eq!(entries, back);
    }

    #[test]
    fn wrong_prompt_count_names_the_story() {
        let mut bad = entry("gamma", false);
        bad.panel_prompts.truncate(6);
        let json = serde_json::to_string(&vec![bad]).unwrap();
        match parse_benchmark(&json) {
            Err(Error::Validation(problems)) => {
                assert!(problems.iter().any(|p| p.contains("gamma")));
            }
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn empty_file_is_a_parse_error() {
        assert!(matches!(parse_benchmark(""), Err(Error::Json(_))));
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let json = serde_json::to_string(&vec![entry("dup", false), entry("dup", true)]).unwrap();
        assert!(matches!(parse_benchmark(&json), Err(Error::Validation(_))));
    }

    fn panels(n: usize) -> Vec<Array3<f32>> {
        (0..n).map(|_| Array3::zeros((4, 4, 3))).collect()
    }

    /// Fixture boxes engineered so raw bbox spreads are 0.1 and 0.3:
    /// normalized they become {0, 1}, with mean 0.5.
    #[test]
    fn diversity_normalizes_across_the_evaluated_set() {
        let detector = FixtureDetector::from_json(
            r#"{
                "low":  {"0": {"bbox": [0.0, 0.0, 0.0, 0.0], "score": 0.9},
                          "1": {"bbox": [0.2, 0.2, 0.2, 0.2], "score": 0.9}},
                "high": {"0": {"bbox": [0.0, 0.0, 0.0, 0.0], "score": 0.9},
                          "1": {"bbox": [0.6, 0.6, 0.6, 0.6], "score": 0.9}}
            }"#,
        )
        .unwrap();
        let entries = vec![entry("low", false), entry("high", false)];
        let mut storyboards = BTreeMap::new();
        storyboards.insert("low".to_string(), panels(2));
        storyboards.insert("high".to_string(), panels(2));
        let scorers: Vec<Box<dyn StoryScorer>> =
            vec![Box::new(SceneDiversityScorer::new(Box::new(detector)))];
        let report =
            evaluate(&storyboards, &entries, &scorers, Provenance::default()).unwrap();

        let agg = &report.aggregates["scene_diversity"];
        assert_eq!(agg.scored, 2);
        assert_eq!(agg.mean, Some(0.5));
        let by_id: BTreeMap<&str, f64> = report
            .stories
            .iter()
            .map(|s| (s.story_id.as_str(), s.scores["scene_diversity"].value.unwrap()))
            .collect();
        assert_eq!(by_id["low"], 0.0);
        assert_eq!(by_id["high"], 1.0);
    }

    #[test]
    fn zero_scorers_gives_empty_table() {
        let entries = vec![entry("solo", false)];
        let mut storyboards = BTreeMap::new();
        storyboards.insert("solo".to_string(), panels(2));
        let report = evaluate(&storyboards, &entries, &[], Provenance::default()).unwrap();
        assert!(report.aggregates.is_empty());
        assert_eq!(report.stories.len(), 1);
        assert!(report.stories[0].scores.is_empty());
    }

    #[test]
    fn failing_story_is_flagged_and_excluded() {
        // "ghost" has no fixture annotations, so detection never clears
        // the minimum and its score fails.
        let detector = FixtureDetector::from_json(
            r#"{
                "low":  {"0": {"bbox": [0.0, 0.0, 0.0, 0.0], "score": 0.9},
                          "1": {"bbox": [0.2, 0.2, 0.2, 0.2], "score": 0.9}},
                "high": {"0": {"bbox": [0.0, 0.0, 0.0, 0.0], "score": 0.9},
                          "1": {"bbox": [0.6, 0.6, 0.6, 0.6], "score": 0.9}}
            }"#,
        )
        .unwrap();
        let entries = vec![entry("low", false), entry("high", false), entry("ghost", false)];
        let mut storyboards = BTreeMap::new();
        storyboards.insert("low".to_string(), panels(2));
        storyboards.insert("high".to_string(), panels(2));
        storyboards.insert("ghost".to_string(), panels(2));
        let scorers: Vec<Box<dyn StoryScorer>> =
            vec![Box::new(SceneDiversityScorer::new(Box::new(detector)))];
        let report =
            evaluate(&storyboards, &entries, &scorers, Provenance::default()).unwrap();

        let agg = &report.aggregates["scene_diversity"];
        assert_eq!((agg.scored, agg.failed), (2, 1));
        assert_eq!(agg.mean, Some(0.5));
        let ghost = report.stories.iter().find(|s| s.story_id == "ghost").unwrap();
        assert!(ghost.scores["scene_diversity"].error.is_some());
    }

    #[test]
    fn storyboard_without_entry_is_a_lookup_error() {
        let entries = vec![entry("known", false)];
        let mut storyboards = BTreeMap::new();
        storyboards.insert("unknown".to_string(), panels(2));
        match evaluate(&storyboards, &entries, &[], Provenance::default()) {
            Err(Error::Lookup(message)) => assert!(message.contains("unknown")),
            other => panic!("expected lookup error, got {other:?}"),
        }
    }
}
