//! Prompt rendering from versioned text templates with `{{slot}}` placeholders.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

use crate::geotools::{Rcc5Relation, ToolName, ToolResult};
use crate::kg::{KgcRecord, Stage, Triplet, View};

pub const COT_TRIGGER: &str = "Let's think step by step";
pub const TOOL_TRIGGER: &str = "Which types of tool interface you need";
pub const DELIBERATION_TRIGGER: &str = "Please refine your reasoning process";
pub const VERIFIER_TRIGGER: &str = "Judge whether all extracted triplets are correct and provide improvement suggestion";
pub const UPDATER_TRIGGER: &str = "Follow suggestion to refine the reasoning process";
pub const FAITHFUL_SENTINEL: &str = "This is a faithful trajectory";
pub const TRIPLET_GRAMMAR: &str = "<head, relation, tail>";

/// Phrases that only the templates themselves may contain.
pub const TRIGGERS: [&str; 6] =
    [COT_TRIGGER, TOOL_TRIGGER, DELIBERATION_TRIGGER, VERIFIER_TRIGGER, UPDATER_TRIGGER, FAITHFUL_SENTINEL];

const BUILTIN_V1: &[(&str, &str)] = &[
    ("rte_turn1", include_str!("../templates/v1/rte_turn1.txt")),
    ("rte_turn2", include_str!("../templates/v1/rte_turn2.txt")),
    ("view_spatial", include_str!("../templates/v1/view_spatial.txt")),
    ("view_temporal", include_str!("../templates/v1/view_temporal.txt")),
    ("view_functional", include_str!("../templates/v1/view_functional.txt")),
    ("kgc_instruction", include_str!("../templates/v1/kgc_instruction.txt")),
    ("rcc_definitions", include_str!("../templates/v1/rcc_definitions.txt")),
    ("tool_prompt", include_str!("../templates/v1/tool_prompt.txt")),
    ("deliberation", include_str!("../templates/v1/deliberation.txt")),
    ("verifier", include_str!("../templates/v1/verifier.txt")),
    ("updater", include_str!("../templates/v1/updater.txt")),
    ("eval_rte", include_str!("../templates/v1/eval_rte.txt")),
    ("eval_kgc", include_str!("../templates/v1/eval_kgc.txt")),
    ("baseline_rte", include_str!("../templates/v1/baseline_rte.txt")),
    ("baseline_kgc", include_str!("../templates/v1/baseline_kgc.txt")),
    ("relation_merge", include_str!("../templates/v1/relation_merge.txt")),
];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PromptError {
    #[error("text to extract from is empty")]
    EmptyText,
    #[error("toolkit is empty")]
    EmptyToolkit,
    #[error("trajectory is empty")]
    EmptyTrajectory,
    #[error("in-context prompts need at least one demonstration")]
    MissingDemos,
    #[error("unknown paradigm {0:?} (expected ZSL or ICL)")]
    UnknownParadigm(String),
    #[error("template {template} references unbound slot {slot:?}")]
    UnboundSlot { template: String, slot: String },
    #[error("template {template} has an unterminated placeholder")]
    Unterminated { template: String },
    #[error("unknown template {0:?}")]
    UnknownTemplate(String),
    #[error("{0}")]
    Io(String),
}

/// Neutralizes placeholder delimiters and strips trigger phrases so that
/// embedded content cannot fake a slot or repeat a trigger.
pub fn sanitize(value: &str) -> String {
    let mut s = value.to_string();
    loop {
        let before = s.len();
        s = s.replace("{{", "{ {").replace("}}", "} }");
        for trig in TRIGGERS {
            let needle = trig.to_ascii_lowercase();
            while let Some(at) = s.to_ascii_lowercase().find(&needle) {
                s.replace_range(at..at + needle.len(), "");
            }
        }
        // Removing one phrase can splice together another.
        if s.len() == before {
            return s;
        }
    }
}

pub fn render_template(name: &str, text: &str, slots: &BTreeMap<&str, String>) -> Result<String, PromptError> {
    let mut out = String::with_capacity(text.len() * 2);
    let mut rest = text;
    while let Some(start) = rest.find("{{") {
        out.push_str(&rest[..start]);
        let after = &rest[start + 2..];
        let end = after.find("}}").ok_or_else(|| PromptError::Unterminated { template: name.into() })?;
        let slot = after[..end].trim();
        let value = slots
            .get(slot)
            .ok_or_else(|| PromptError::UnboundSlot { template: name.into(), slot: slot.into() })?;
        out.push_str(&sanitize(value));
        rest = &after[end + 2..];
    }
    out.push_str(rest);
    Ok(out.trim_end().to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Paradigm {
    Zsl,
    Icl,
}

impl FromStr for Paradigm {
    type Err = PromptError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "ZSL" => Ok(Paradigm::Zsl),
            "ICL" => Ok(Paradigm::Icl),
            _ => Err(PromptError::UnknownParadigm(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Demo {
    pub question: String,
    pub answer: String,
}

/// What the updater should end its revision with.
pub fn answer_format(task: Stage) -> &'static str {
    match task {
        Stage::Rte => "End with the complete corrected list of triplets, one per line.",
        Stage::Kgc => "End with the final answer on the last line as \"Relation: <code>\".",
    }
}

pub fn task_description(task: Stage) -> &'static str {
    match task {
        Stage::Rte => "extract relational triplets from urban text",
        Stage::Kgc => "decide the geospatial relation between two urban entities",
    }
}

/// A named collection of templates; `v1` is compiled in.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateSet {
    pub version: String,
    templates: BTreeMap<String, String>,
}

impl Default for TemplateSet {
    fn default() -> Self {
        Self::builtin()
    }
}

impl TemplateSet {
    pub fn builtin() -> Self {
        TemplateSet {
            version: "v1".into(),
            templates: BUILTIN_V1.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }

    /// Builtin templates overridden by `<name>.txt` files in `dir`.
    pub fn from_dir(dir: &Path) -> Result<Self, PromptError> {
        let mut set = Self::builtin();
        set.version = dir.file_name().map_or("custom".into(), |n| n.to_string_lossy().into_owned());
        let entries = fs::read_dir(dir).map_err(|e| PromptError::Io(format!("{}: {e}", dir.display())))?;
        let mut paths: Vec<_> = entries.filter_map(|e| e.ok().map(|e| e.path())).collect();
        paths.sort();
        for p in paths {
            if p.extension().and_then(|e| e.to_str()) != Some("txt") {
                continue;
            }
            let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            if !set.templates.contains_key(&stem) {
                return Err(PromptError::UnknownTemplate(stem));
            }
            let text = fs::read_to_string(&p).map_err(|e| PromptError::Io(format!("{}: {e}", p.display())))?;
            set.templates.insert(stem, text);
        }
        Ok(set)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.templates.keys().map(String::as_str)
    }

    fn raw(&self, name: &str) -> &str {
        self.templates.get(name).map(String::as_str).expect("builtin template names are fixed")
    }

    fn render(&self, name: &str, slots: &[(&'static str, String)]) -> Result<String, PromptError> {
        let map: BTreeMap<&str, String> = slots.iter().cloned().collect();
        render_template(name, self.raw(name), &map)
    }

    pub fn view_definitions(&self, view: View) -> &str {
        match view {
            View::Spatial => self.raw("view_spatial"),
            View::Temporal => self.raw("view_temporal"),
            View::Functional | View::Other => self.raw("view_functional"),
        }
        .trim_end()
    }

    /// Relation definitions, one line per code in prompt order.
    pub fn rcc_definitions(&self) -> String {
        let text = self.raw("rcc_definitions");
        Rcc5Relation::PROMPT_ORDER
            .iter()
            .map(|r| {
                text.lines()
                    .find(|l| l.trim_start().starts_with(&format!("{} ", r.code())))
                    .map_or_else(|| format!("{} ({})", r.code(), r.full_name()), |l| l.trim().to_string())
            })
            .collect::<Vec<_>>()
            .join("\n")
    }

    pub fn rte_turn1(&self, view: View, text: &str) -> Result<String, PromptError> {
        if text.trim().is_empty() {
            return Err(PromptError::EmptyText);
        }
        self.render(
            "rte_turn1",
            &[
                ("view", view.to_string()),
                ("definitions", self.view_definitions(view).to_string()),
                ("text", text.trim().to_string()),
            ],
        )
    }

    pub fn rte_turn2(
        &self,
        view: View,
        text: &str,
        entity_types: &[String],
        relation_types: &[String],
    ) -> Result<String, PromptError> {
        if text.trim().is_empty() {
            return Err(PromptError::EmptyText);
        }
        let list = |xs: &[String]| if xs.is_empty() { "(none identified)".to_string() } else { xs.join(", ") };
        let note = if entity_types.is_empty() && relation_types.is_empty() {
            "No types were identified, so extract any triplets the text supports.\n"
        } else {
            ""
        };
        self.render(
            "rte_turn2",
            &[
                ("view", view.to_string()),
                ("entity_types", list(entity_types)),
                ("relation_types", list(relation_types)),
                ("type_note", note.to_string()),
                ("text", text.trim().to_string()),
            ],
        )
    }

    pub fn kgc_instruction(&self, rec: &KgcRecord) -> Result<String, PromptError> {
        self.render(
            "kgc_instruction",
            &[
                ("head_name", rec.head_name.clone()),
                ("head_geometry", rec.head_geometry.to_wkt()),
                ("tail_name", rec.tail_name.clone()),
                ("tail_geometry", rec.tail_geometry.to_wkt()),
                ("relation_definitions", self.rcc_definitions()),
            ],
        )
    }

    pub fn tool_prompt(&self, rec: &KgcRecord, toolkit: &[(ToolName, &str)]) -> Result<String, PromptError> {
        if toolkit.is_empty() {
            return Err(PromptError::EmptyToolkit);
        }
        let lines = toolkit.iter().map(|(n, d)| format!("{n}: {d}")).collect::<Vec<_>>().join("\n");
        self.render(
            "tool_prompt",
            &[
                ("head_name", rec.head_name.clone()),
                ("head_kind", rec.head_geometry.kind().to_string()),
                ("tail_name", rec.tail_name.clone()),
                ("tail_kind", rec.tail_geometry.kind().to_string()),
                ("toolkit", lines),
            ],
        )
    }

    pub fn deliberation(&self, results: &[ToolResult], trajectory: &str) -> Result<String, PromptError> {
        let rendered = if results.is_empty() {
            "(no tool results)".to_string()
        } else {
            results.iter().map(ToolResult::render).collect::<Vec<_>>().join("\n")
        };
        self.render("deliberation", &[("trajectory", trajectory.trim().to_string()), ("tool_results", rendered)])
    }

    pub fn verifier(&self, task: Stage, trajectory: &str) -> Result<String, PromptError> {
        if trajectory.trim().is_empty() {
            return Err(PromptError::EmptyTrajectory);
        }
        self.render(
            "verifier",
            &[("task", task_description(task).to_string()), ("trajectory", trajectory.trim().to_string())],
        )
    }

    pub fn updater(&self, task: Stage, trajectory: &str, feedback: &str) -> Result<String, PromptError> {
        if trajectory.trim().is_empty() {
            return Err(PromptError::EmptyTrajectory);
        }
        self.render(
            "updater",
            &[
                ("task", task_description(task).to_string()),
                ("trajectory", trajectory.trim().to_string()),
                ("feedback", feedback.trim().to_string()),
                ("answer_format", answer_format(task).to_string()),
            ],
        )
    }

    pub fn eval_rte(&self, text: &str, triplets: &[Triplet]) -> Result<String, PromptError> {
        let results = if triplets.is_empty() {
            "(none)".to_string()
        } else {
            triplets.iter().map(|t| t.to_string()).collect::<Vec<_>>().join("\n")
        };
        self.render("eval_rte", &[("text", text.trim().to_string()), ("results", results)])
    }

    pub fn eval_kgc(&self, rec: &KgcRecord, relation: Rcc5Relation, evidence: &[String]) -> Result<String, PromptError> {
        self.render(
            "eval_kgc",
            &[
                ("head_name", rec.head_name.clone()),
                ("head_geometry", rec.head_geometry.to_wkt()),
                ("tail_name", rec.tail_name.clone()),
                ("tail_geometry", rec.tail_geometry.to_wkt()),
                ("relation", format!("{} ({})", relation.code(), relation.full_name())),
                ("relation_definitions", self.rcc_definitions()),
                ("evidence", evidence.join("\n")),
            ],
        )
    }

    pub fn baseline(&self, paradigm: Paradigm, task: Stage, question: &str, demos: &[Demo]) -> Result<String, PromptError> {
        let demos = match paradigm {
            Paradigm::Zsl => String::new(),
            Paradigm::Icl if demos.is_empty() => return Err(PromptError::MissingDemos),
            Paradigm::Icl => {
                let blocks: Vec<String> =
                    demos.iter().map(|d| format!("Question: {}\nAnswer: {}\n", d.question.trim(), d.answer.trim())).collect();
                format!("\n{}", blocks.join("\n"))
            }
        };
        let name = match task {
            Stage::Rte => "baseline_rte",
            Stage::Kgc => "baseline_kgc",
        };
        self.render(name, &[("demos", demos), ("question", question.trim().to_string())])
    }

    /// Question text for a KGC record in baseline prompts.
    pub fn kgc_question(rec: &KgcRecord) -> String {
        format!(
            "Head entity: {}, {}. Tail entity: {}, {}.",
            rec.head_name, rec.head_geometry, rec.tail_name, rec.tail_geometry
        )
    }

    pub fn relation_merge(&self, groups: &[Vec<String>]) -> Result<String, PromptError> {
        let body = groups
            .iter()
            .enumerate()
            .map(|(i, g)| format!("Group {}: {}", i + 1, g.join(", ")))
            .collect::<Vec<_>>()
            .join("\n");
        self.render("relation_merge", &[("groups", body)])
    }
}

impl fmt::Display for Paradigm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Paradigm::Zsl => "ZSL",
            Paradigm::Icl => "ICL",
        })
    }
}

/// Parses the "Entity types:" / "Relation types:" reply of the first turn.
pub fn parse_type_lists(reply: &str) -> (Vec<String>, Vec<String>) {
    let grab = |prefix: &str| -> Vec<String> {
        reply
            .lines()
            .filter_map(|l| {
                let t = l.trim().trim_start_matches(['-', '*', ' ']);
                let lower = t.to_ascii_lowercase();
                lower.starts_with(prefix).then(|| t[prefix.len()..].trim_start_matches([':', ' ']).to_string())
            })
            .flat_map(|rest| {
                rest.split([',', ';'])
                    .map(|x| x.trim().trim_matches(['"', '\'', '[', ']', '{', '}', '.', '*']).trim().to_string())
                    .filter(|x| !x.is_empty() && !x.eq_ignore_ascii_case("none"))
                    .collect::<Vec<_>>()
            })
            .fold(Vec::new(), |mut acc, x| {
                if !acc.iter().any(|a: &String| a.eq_ignore_ascii_case(&x)) {
                    acc.push(x);
                }
                acc
            })
    };
    (grab("entity types"), grab("relation types"))
}
