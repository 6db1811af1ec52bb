//! Stage prompt templates.
//!
//! A bundle is a directory holding `manifest.toml` and one UTF-8, LF-only
//! text file per stage. Each file is split into three sections by marker
//! lines:
//!
//! ```text
//! === CONTEXT ===
//! ...
//! === TASK ===
//! ...
//! === TEMPLATE ===
//! ...
//! ```
//!
//! Placeholders are `{lowercase_identifier}`; `{{` and `}}` produce literal
//! braces. Every placeholder used must be declared in the manifest and every
//! declared placeholder must be used.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::Deserialize;
use thiserror::Error;

use crate::stage::Stage;

/// Estimated tokens are characters divided by 4.5, written as a ratio so the
/// arithmetic stays integral.
const TOKENS_PER_NINE_CHARS: usize = 2;

const CONTEXT_MARKER: &str = "=== CONTEXT ===";
const TASK_MARKER: &str = "=== TASK ===";
const TEMPLATE_MARKER: &str = "=== TEMPLATE ===";

const BUILTIN_MANIFEST: &str = include_str!("../templates/hara-v1/manifest.toml");
const BUILTIN_FILES: [(&str, &str); 6] = [
    ("hazards.txt", include_str!("../templates/hara-v1/hazards.txt")),
    ("geometries.txt", include_str!("../templates/hara-v1/geometries.txt")),
    ("expansion.txt", include_str!("../templates/hara-v1/expansion.txt")),
    ("severity.txt", include_str!("../templates/hara-v1/severity.txt")),
    ("safety_goal.txt", include_str!("../templates/hara-v1/safety_goal.txt")),
    ("cluster_select.txt", include_str!("../templates/hara-v1/cluster_select.txt")),
];

#[derive(Debug, Error)]
pub enum TemplateError {
    #[error("cannot read template bundle file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid manifest: {0}")]
    Manifest(String),
    #[error("missing stage: {0}")]
    MissingStage(Stage),
    #[error("{stage}: {reason}")]
    Malformed { stage: Stage, reason: String },
    #[error("{stage}: placeholder {{{name}}} used in {section} section but not declared")]
    UndeclaredPlaceholder {
        stage: Stage,
        name: String,
        section: &'static str,
    },
    #[error("{stage}: placeholder {{{name}}} declared but never used")]
    UnusedPlaceholder { stage: Stage, name: String },
    #[error("{stage}: no binding for placeholder {{{name}}}")]
    MissingBinding { stage: Stage, name: String },
    #[error("{stage}: binding {name:?} matches no declared placeholder")]
    ExtraBinding { stage: Stage, name: String },
    #[error("{stage}: binding for {{{name}}} is empty")]
    EmptyBinding { stage: Stage, name: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Segment {
    Literal(String),
    Placeholder(String),
}

fn is_placeholder_name(name: &str) -> bool {
    let mut chars = name.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_lowercase())
        && chars.all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_')
}

fn parse_segments(text: &str) -> Vec<Segment> {
    let mut segments = Vec::new();
    let mut literal = String::new();
    let mut rest = text;
    while let Some(c) = rest.chars().next() {
        if rest.starts_with("{{") {
            literal.push('{');
            rest = &rest[2..];
        } else if rest.starts_with("}}") {
            literal.push('}');
            rest = &rest[2..];
        } else if c == '{' {
            let name = rest[1..].find('}').map(|end| &rest[1..1 + end]);
            match name {
                Some(name) if is_placeholder_name(name) => {
                    if !literal.is_empty() {
                        segments.push(Segment::Literal(std::mem::take(&mut literal)));
                    }
                    segments.push(Segment::Placeholder(name.to_string()));
                    rest = &rest[name.len() + 2..];
                }
                _ => {
                    literal.push('{');
                    rest = &rest[1..];
                }
            }
        } else {
            literal.push(c);
            rest = &rest[c.len_utf8()..];
        }
    }
    if !literal.is_empty() {
        segments.push(Segment::Literal(literal));
    }
    segments
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Section {
    segments: Vec<Segment>,
}

impl Section {
    fn parse(text: &str) -> Self {
        Self {
            segments: parse_segments(text.trim_matches('\n')),
        }
    }

    fn placeholders(&self) -> impl Iterator<Item = &str> {
        self.segments.iter().filter_map(|s| match s {
            Segment::Placeholder(name) => Some(name.as_str()),
            Segment::Literal(_) => None,
        })
    }

    fn is_blank(&self) -> bool {
        self.segments.iter().all(|s| match s {
            Segment::Literal(text) => text.trim().is_empty(),
            Segment::Placeholder(_) => false,
        })
    }

    fn render(&self, bindings: &BTreeMap<String, String>) -> String {
        let mut out = String::new();
        for segment in &self.segments {
            match segment {
                Segment::Literal(text) => out.push_str(text),
                Segment::Placeholder(name) => out.push_str(&bindings[name]),
            }
        }
        out
    }
}

/// A validated Context / Task / Template prompt for one stage.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    stage: Stage,
    context: Section,
    task: Section,
    template: Section,
    declared: BTreeSet<String>,
}

impl PromptTemplate {
    pub fn new(
        stage: Stage,
        context: &str,
        task: &str,
        template: &str,
        declared: impl IntoIterator<Item = impl Into<String>>,
    ) -> Result<Self, TemplateError> {
        let declared: BTreeSet<String> = declared.into_iter().map(Into::into).collect();
        if let Some(bad) = declared.iter().find(|n| !is_placeholder_name(n)) {
            return Err(TemplateError::Malformed {
                stage,
                reason: format!("declared placeholder {bad:?} is not a lowercase identifier"),
            });
        }
        let tpl = Self {
            stage,
            context: Section::parse(context),
            task: Section::parse(task),
            template: Section::parse(template),
            declared,
        };
        if tpl.template.is_blank() {
            return Err(TemplateError::Malformed {
                stage,
                reason: "template section is empty".into(),
            });
        }
        let mut used = BTreeSet::new();
        for (section_name, section) in tpl.sections() {
            for name in section.placeholders() {
                if !tpl.declared.contains(name) {
                    return Err(TemplateError::UndeclaredPlaceholder {
                        stage,
                        name: name.to_string(),
                        section: section_name,
                    });
                }
                used.insert(name.to_string());
            }
        }
        if let Some(unused) = tpl.declared.iter().find(|n| !used.contains(*n)) {
            return Err(TemplateError::UnusedPlaceholder {
                stage,
                name: unused.clone(),
            });
        }
        Ok(tpl)
    }

    /// Parses a marker-delimited template file.
    pub fn parse_file(
        stage: Stage,
        text: &str,
        declared: impl IntoIterator<Item = impl Into<String>>,
    ) -> Result<Self, TemplateError> {
        let malformed = |reason: String| TemplateError::Malformed { stage, reason };
        if text.contains('\r') {
            return Err(malformed("file must use LF line endings".into()));
        }
        let mut current: Option<usize> = None;
        let mut parts: [Option<String>; 3] = [None, None, None];
        for line in text.split_inclusive('\n') {
            let marker = match line.trim_end() {
                CONTEXT_MARKER => Some(0),
                TASK_MARKER => Some(1),
                TEMPLATE_MARKER => Some(2),
                _ => None,
            };
            match (marker, current) {
                (Some(idx), prev) => {
                    if parts[idx].is_some() || prev.is_some_and(|p| p >= idx) || (prev.is_none() && idx != 0) {
                        return Err(malformed(format!(
                            "section markers must appear once each, in order: {CONTEXT_MARKER}, {TASK_MARKER}, {TEMPLATE_MARKER}"
                        )));
                    }
                    parts[idx] = Some(String::new());
                    current = Some(idx);
                }
                (None, Some(idx)) => parts[idx].as_mut().unwrap().push_str(line),
                (None, None) if line.trim().is_empty() => {}
                (None, None) => {
                    return Err(malformed(format!("text before {CONTEXT_MARKER}")));
                }
            }
        }
        match parts {
            [Some(context), Some(task), Some(template)] => {
                Self::new(stage, &context, &task, &template, declared)
            }
            _ => Err(malformed("file lacks one of the CONTEXT/TASK/TEMPLATE sections".into())),
        }
    }

    fn sections(&self) -> [(&'static str, &Section); 3] {
        [
            ("context", &self.context),
            ("task", &self.task),
            ("template", &self.template),
        ]
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    pub fn declared_placeholders(&self) -> &BTreeSet<String> {
        &self.declared
    }

    /// All literal (non-placeholder) text, for content scans.
    pub fn literal_text(&self) -> String {
        let mut out = String::new();
        for (_, section) in self.sections() {
            for segment in &section.segments {
                if let Segment::Literal(text) = segment {
                    out.push_str(text);
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn render<K, V>(
        &self,
        bindings: impl IntoIterator<Item = (K, V)>,
    ) -> Result<RenderedPrompt, TemplateError>
    where
        K: Into<String>,
        V: Into<String>,
    {
        let bindings: BTreeMap<String, String> = bindings
            .into_iter()
            .map(|(k, v)| (k.into(), v.into()))
            .collect();
        let stage = self.stage;
        if let Some(extra) = bindings.keys().find(|k| !self.declared.contains(*k)) {
            return Err(TemplateError::ExtraBinding {
                stage,
                name: extra.clone(),
            });
        }
        for name in &self.declared {
            match bindings.get(name) {
                None => {
                    return Err(TemplateError::MissingBinding {
                        stage,
                        name: name.clone(),
                    })
                }
                Some(v) if v.trim().is_empty() => {
                    return Err(TemplateError::EmptyBinding {
                        stage,
                        name: name.clone(),
                    })
                }
                Some(_) => {}
            }
        }
        let context = self.context.render(&bindings);
        let task = self.task.render(&bindings);
        let template = self.template.render(&bindings);
        let text = [context.as_str(), task.as_str(), template.as_str()]
            .into_iter()
            .filter(|s| !s.is_empty())
            .collect::<Vec<_>>()
            .join("\n\n");
        Ok(RenderedPrompt {
            stage,
            token_estimate: estimate_tokens(&text),
            text,
            task,
            template,
            bindings,
        })
    }
}

/// A fully substituted prompt, ready to send.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedPrompt {
    pub stage: Stage,
    pub text: String,
    /// The rendered task section on its own.
    pub task: String,
    /// The rendered response template on its own.
    pub template: String,
    pub bindings: BTreeMap<String, String>,
    pub token_estimate: usize,
}

/// Heuristic token count: Unicode scalar count divided by 4.5, rounded up.
/// Slightly overestimates for English prose with BPE tokenizers.
pub fn estimate_tokens(text: &str) -> usize {
    (text.chars().count() * TOKENS_PER_NINE_CHARS).div_ceil(9)
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    version: String,
    #[serde(default)]
    note: Option<String>,
    stages: BTreeMap<String, ManifestStage>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestStage {
    file: String,
    #[serde(default)]
    placeholders: Vec<String>,
}

/// The six stage templates plus the bundle version they came from.
#[derive(Debug, Clone)]
pub struct TemplateSet {
    version: String,
    note: Option<String>,
    templates: BTreeMap<Stage, PromptTemplate>,
}

impl TemplateSet {
    /// The bundle shipped with this crate.
    pub fn builtin() -> Self {
        Self::from_sources(BUILTIN_MANIFEST, |file| {
            BUILTIN_FILES
                .iter()
                .find(|(name, _)| *name == file)
                .map(|(_, text)| text.to_string())
                .ok_or_else(|| TemplateError::Manifest(format!("builtin bundle lacks {file}")))
        })
        .expect("builtin template bundle is valid")
    }

    /// Loads a bundle directory containing `manifest.toml`.
    pub fn load_dir(dir: &Path) -> Result<Self, TemplateError> {
        let read = |name: &str| {
            let path = dir.join(name);
            fs::read_to_string(&path).map_err(|source| TemplateError::Io {
                path: path.display().to_string(),
                source,
            })
        };
        let manifest = read("manifest.toml")?;
        Self::from_sources(&manifest, |file| {
            if file.contains('/') || file.contains('\\') || file.starts_with('.') {
                return Err(TemplateError::Manifest(format!(
                    "template file {file:?} must be a plain file name inside the bundle"
                )));
            }
            read(file)
        })
    }

    pub fn from_sources(
        manifest: &str,
        mut read_file: impl FnMut(&str) -> Result<String, TemplateError>,
    ) -> Result<Self, TemplateError> {
        let manifest: Manifest =
            toml::from_str(manifest).map_err(|e| TemplateError::Manifest(e.to_string()))?;
        if manifest.version.trim().is_empty() {
            return Err(TemplateError::Manifest("version is empty".into()));
        }
        let mut templates = BTreeMap::new();
        for (name, entry) in &manifest.stages {
            let stage: Stage = name
                .parse()
                .map_err(|e| TemplateError::Manifest(format!("{e}")))?;
            if templates.contains_key(&stage) {
                return Err(TemplateError::Manifest(format!("duplicate stage: {stage}")));
            }
            let text = read_file(&entry.file)?;
            let template = PromptTemplate::parse_file(stage, &text, entry.placeholders.iter().cloned())?;
            templates.insert(stage, template);
        }
        Self::from_templates(manifest.version, manifest.note, templates.into_values())
    }

    pub fn from_templates(
        version: impl Into<String>,
        note: Option<String>,
        templates: impl IntoIterator<Item = PromptTemplate>,
    ) -> Result<Self, TemplateError> {
        let mut map = BTreeMap::new();
        for template in templates {
            let stage = template.stage();
            if map.insert(stage, template).is_some() {
                return Err(TemplateError::Manifest(format!("duplicate stage: {stage}")));
            }
        }
        if let Some(missing) = Stage::ALL.iter().find(|s| !map.contains_key(s)) {
            return Err(TemplateError::MissingStage(*missing));
        }
        Ok(Self {
            version: version.into(),
            note,
            templates: map,
        })
    }

    pub fn version(&self) -> &str {
        &self.version
    }

    pub fn note(&self) -> Option<&str> {
        self.note.as_deref()
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }

    pub fn get(&self, stage: Stage) -> &PromptTemplate {
        &self.templates[&stage]
    }

    pub fn iter(&self) -> impl Iterator<Item = &PromptTemplate> {
        self.templates.values()
    }
}
