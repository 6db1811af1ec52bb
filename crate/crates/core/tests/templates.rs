mod common;

use std::path::PathBuf;

use common::*;
use hara_core::orchestrator::stage_bindings;
use hara_core::parsing::StageSchema;
use hara_core::templates::estimate_tokens;
use hara_core::{Stage, TemplateSet};

/// Token count of `data/token_fixture_4000.txt` under the cl100k_base
/// encoding, computed once with an independent tokenizer and frozen here.
const CL100K_TOKENS_OF_FIXTURE: usize = 762;

fn bundle_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("templates/hara-v1")
}

fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Phrases that would tie a template to one of the bundled items: the
/// function names and the words of their spelled-out titles that are not
/// everyday vocabulary.
fn denylist() -> Vec<Vec<String>> {
    let mut phrases = Vec::new();
    for name in ["caem", "alc"] {
        let item = item(name);
        phrases.push(words(item.function_name()));
        let title = item
            .description()
            .lines()
            .find(|l| !l.trim().is_empty() && !l.starts_with('#'))
            .unwrap()
            .to_string();
        let title = title.split('(').next().unwrap();
        phrases.push(words(title));
    }
    for extra in ["evasive", "evasion", "lane change", "collision avoidance", "steering angle request"] {
        phrases.push(words(extra));
    }
    phrases
}

fn contains_phrase(haystack: &[String], phrase: &[String]) -> bool {
    !phrase.is_empty() && haystack.windows(phrase.len()).any(|w| w == phrase)
}

#[test]
fn no_template_mentions_a_fixture_function() {
    let deny = denylist();
    assert!(deny.iter().any(|p| p == &["caem"]));
    assert!(deny.iter().any(|p| p == &["automated", "lane", "change"]));
    for bundle in [TemplateSet::builtin(), TemplateSet::load_dir(&bundle_dir()).unwrap()] {
        for template in bundle.iter() {
            let text = words(&template.literal_text());
            for phrase in &deny {
                assert!(
                    !contains_phrase(&text, phrase),
                    "template {} contains {:?}",
                    template.stage(),
                    phrase.join(" ")
                );
            }
        }
    }
    // the manifest and raw files too, placeholders included
    for entry in std::fs::read_dir(bundle_dir()).unwrap() {
        let text = words(&std::fs::read_to_string(entry.unwrap().path()).unwrap());
        for phrase in &deny {
            assert!(!contains_phrase(&text, phrase), "{:?}", phrase.join(" "));
        }
    }
}

#[test]
fn scan_catches_a_planted_name() {
    let haystack = words("Consider the ALC function on highways.");
    assert!(denylist().iter().any(|p| contains_phrase(&haystack, p)));
    // word boundaries: "calculate" must not trip "alc"
    assert!(!contains_phrase(&words("calculate the scale"), &words("alc")));
}

#[test]
fn directory_bundle_matches_builtin() {
    let builtin = TemplateSet::builtin();
    let loaded = TemplateSet::load_dir(&bundle_dir()).unwrap();
    assert_eq!(builtin.version(), loaded.version());
    assert_eq!(builtin.version(), "hara-v1.0.0");
    assert_eq!(builtin.len(), 6);
    for stage in Stage::ALL {
        assert_eq!(builtin.get(stage).literal_text(), loaded.get(stage).literal_text());
    }
}

fn schema(stage: Stage) -> StageSchema {
    match stage {
        Stage::Hazards => StageSchema::hazards(),
        Stage::Geometries => StageSchema::geometries(20),
        Stage::Expansion => StageSchema::expansion(),
        Stage::Severity => StageSchema::severity(),
        Stage::SafetyGoal => StageSchema::safety_goal(),
        Stage::ClusterSelect => StageSchema::cluster_select(5),
    }
}

#[test]
fn every_stage_renders_context_task_template_in_order() {
    let templates = TemplateSet::builtin();
    let item = item("alc");
    for stage in Stage::ALL {
        let template = templates.get(stage);
        let bindings: Vec<(String, String)> = stage_bindings(stage)
            .iter()
            .map(|name| {
                let value = match *name {
                    "item_definition" => item.description().to_string(),
                    other => format!("<<{other}>>"),
                };
                (name.to_string(), value)
            })
            .collect();
        let prompt = template.render(bindings).unwrap();
        assert!(!prompt.text.contains('{'), "{stage}: unsubstituted placeholder");
        let task_at = prompt.text.find(&prompt.task).unwrap();
        let template_at = prompt.text.rfind(&prompt.template).unwrap();
        assert!(task_at > 0, "{stage}: context section missing");
        assert!(task_at < template_at, "{stage}");
        let header = schema(stage).header_line();
        assert!(prompt.template.contains(&header), "{stage}: response template lacks {header:?}");
        for name in stage_bindings(stage).iter().filter(|n| **n != "item_definition") {
            assert!(prompt.text.contains(&format!("<<{name}>>")), "{stage}: {name} not substituted");
        }
        assert_eq!(prompt.token_estimate, estimate_tokens(&prompt.text));
    }
}

#[test]
fn token_estimate_is_within_a_fifth_of_a_real_tokenizer() {
    let text = include_str!("data/token_fixture_4000.txt");
    assert_eq!(text.chars().count(), 4000);
    let estimate = estimate_tokens(text);
    assert_eq!(estimate, 889);
    let error = (estimate as f64 - CL100K_TOKENS_OF_FIXTURE as f64).abs() / CL100K_TOKENS_OF_FIXTURE as f64;
    assert!(error <= 0.20, "relative error {error:.3}");
    // over- rather than under-estimate, so budgets stay conservative
    assert!(estimate >= CL100K_TOKENS_OF_FIXTURE);
}
