//! JSON graph documents.
//!
//! ```json
//! {
//!   "locations": ["pantry", "table"],
//!   "objects": ["bowl"],
//!   "actions": [{"id": "regrasp", "label": "re-grasp primitive"}],
//!   "skills": [{
//!     "id": "pick_bowl_pantry", "label": "pick the bowl", "category": "pick",
//!     "pre": {"location": "pantry", "left": null, "right": "_"},
//!     "delta": {"scene": null, "left": {"add": "bowl"}, "right": null},
//!     "action_refs": []
//!   }],
//!   "edges": [],
//!   "edge_mode": "derived"
//! }
//! ```
//!
//! A skill whose `id` contains `{obj}`, `{loc}`, `{from}` or `{to}` is a
//! template. It expands at load time over the declared objects and locations
//! (`{from}`/`{to}` range over ordered pairs of distinct locations); every
//! string inside the entry is substituted. An optional `over` map narrows a
//! placeholder's domain, e.g. `"over": {"loc": ["pantry"]}`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{
    ActionSkill, Diagnostic, DiagnosticKind, EdgeMode, EdgeSpec, SemanticSkill, SkillStateGraph,
    DEFAULT_STATE_SPACE_LIMIT,
};
use crate::ids::{LocationId, ObjectId, SkillId};

#[derive(Debug, Clone, Copy)]
pub struct LoadOptions {
    pub state_space_limit: u128,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            state_space_limit: DEFAULT_STATE_SPACE_LIMIT,
        }
    }
}

/// Serialized form of a graph, with templates already expanded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphDocument {
    pub locations: Vec<String>,
    pub objects: Vec<String>,
    #[serde(default)]
    pub actions: Vec<Value>,
    pub skills: Vec<Value>,
    #[serde(default)]
    pub edges: Vec<(String, String)>,
    #[serde(default)]
    pub edge_mode: EdgeMode,
}

pub fn load_graph(document: &str) -> Result<SkillStateGraph, Vec<Diagnostic>> {
    load_graph_with(document, &LoadOptions::default())
}

pub fn load_graph_with(
    document: &str,
    options: &LoadOptions,
) -> Result<SkillStateGraph, Vec<Diagnostic>> {
    let doc: GraphDocument = serde_json::from_str(document).map_err(|e| {
        vec![Diagnostic::new(
            "$",
            DiagnosticKind::Malformed,
            e.to_string(),
        )]
    })?;
    let mut diags = Vec::new();

    let locations = parse_ids::<LocationId>(&doc.locations, "locations", &mut diags);
    let objects = parse_ids::<ObjectId>(&doc.objects, "objects", &mut diags);

    let mut actions = Vec::new();
    for (i, raw) in doc.actions.iter().enumerate() {
        match serde_json::from_value::<ActionSkill>(raw.clone()) {
            Ok(action) => actions.push(action),
            Err(e) => diags.push(Diagnostic::new(
                format!("actions[{i}]"),
                DiagnosticKind::Malformed,
                e.to_string(),
            )),
        }
    }

    let mut skills = Vec::new();
    for (i, raw) in doc.skills.iter().enumerate() {
        let path = format!("skills[{i}]");
        match expand_template(raw, &path, &doc.locations, &doc.objects) {
            Ok(expanded) => {
                for (suffix, value) in expanded {
                    match serde_json::from_value::<SemanticSkill>(value) {
                        Ok(skill) => skills.push(skill),
                        Err(e) => diags.push(Diagnostic::new(
                            format!("{path}{suffix}"),
                            DiagnosticKind::Malformed,
                            e.to_string(),
                        )),
                    }
                }
            }
            Err(diag) => diags.push(diag),
        }
    }

    let mut edges = Vec::new();
    for (k, (from, to)) in doc.edges.iter().enumerate() {
        for (end, raw) in [(0, from), (1, to)] {
            if let Err(e) = SkillId::new(raw.as_str()) {
                diags.push(Diagnostic::new(
                    format!("edges[{k}][{end}]"),
                    DiagnosticKind::InvalidIdentifier,
                    e.to_string(),
                ));
            }
        }
        if let (Ok(a), Ok(b)) = (SkillId::new(from.as_str()), SkillId::new(to.as_str())) {
            edges.push((a, b));
        }
    }
    let edge_spec = match doc.edge_mode {
        EdgeMode::Declared => EdgeSpec::Declared(edges),
        EdgeMode::Derived => {
            if !doc.edges.is_empty() {
                diags.push(Diagnostic::new(
                    "edges",
                    DiagnosticKind::EdgesInDerivedMode,
                    "edges must be empty when edge_mode is \"derived\"",
                ));
            }
            EdgeSpec::Derived
        }
    };

    if !diags.is_empty() {
        return Err(diags);
    }
    SkillStateGraph::from_parts(
        locations,
        objects,
        actions,
        skills,
        edge_spec,
        options.state_space_limit,
    )
}

fn parse_ids<T>(raw: &[String], field: &str, diags: &mut Vec<Diagnostic>) -> Vec<T>
where
    T: std::str::FromStr<Err = crate::ids::InvalidId>,
{
    raw.iter()
        .enumerate()
        .filter_map(|(i, token)| match token.parse::<T>() {
            Ok(id) => Some(id),
            Err(e) => {
                diags.push(Diagnostic::new(
                    format!("{field}[{i}]"),
                    DiagnosticKind::InvalidIdentifier,
                    e.to_string(),
                ));
                None
            }
        })
        .collect()
}

const PLACEHOLDERS: [&str; 4] = ["obj", "loc", "from", "to"];

fn placeholders_in(text: &str) -> Vec<&'static str> {
    PLACEHOLDERS
        .into_iter()
        .filter(|p| text.contains(&format!("{{{p}}}")))
        .collect()
}

fn collect_strings<'v>(value: &'v Value, out: &mut Vec<&'v str>) {
    match value {
        Value::String(s) => out.push(s),
        Value::Array(items) => items.iter().for_each(|v| collect_strings(v, out)),
        Value::Object(map) => map.values().for_each(|v| collect_strings(v, out)),
        _ => {}
    }
}

fn substitute(value: &Value, bindings: &[(&str, &str)]) -> Value {
    match value {
        Value::String(s) => {
            let mut text = s.clone();
            for (name, replacement) in bindings {
                text = text.replace(&format!("{{{name}}}"), replacement);
            }
            Value::String(text)
        }
        Value::Array(items) => {
            Value::Array(items.iter().map(|v| substitute(v, bindings)).collect())
        }
        Value::Object(map) => Value::Object(
            map.iter()
                .map(|(k, v)| (k.clone(), substitute(v, bindings)))
                .collect(),
        ),
        other => other.clone(),
    }
}

/// Expands one skill entry into `(path suffix, concrete entry)` pairs. A
/// non-template entry expands to itself with an empty suffix.
fn expand_template(
    raw: &Value,
    path: &str,
    locations: &[String],
    objects: &[String],
) -> Result<Vec<(String, Value)>, Diagnostic> {
    let template_error =
        |msg: String| Diagnostic::new(path.to_string(), DiagnosticKind::Template, msg);
    let Some(map) = raw.as_object() else {
        return Err(Diagnostic::new(
            path,
            DiagnosticKind::Malformed,
            "skill entry must be an object",
        ));
    };
    let id = map.get("id").and_then(Value::as_str).unwrap_or_default();
    let in_id = placeholders_in(id);

    let mut body = map.clone();
    let over = body.remove("over");
    let body = Value::Object(body);
    let mut strings = Vec::new();
    collect_strings(&body, &mut strings);
    for s in strings {
        for p in placeholders_in(s) {
            if !in_id.contains(&p) {
                return Err(template_error(format!(
                    "placeholder {{{p}}} is used but does not appear in the skill id"
                )));
            }
        }
    }
    if in_id.is_empty() {
        if over.is_some() {
            return Err(template_error(
                "`over` given on a skill that is not a template".into(),
            ));
        }
        return Ok(vec![(String::new(), raw.clone())]);
    }
    if in_id.contains(&"loc") && (in_id.contains(&"from") || in_id.contains(&"to")) {
        return Err(template_error(
            "{loc} cannot be combined with {from}/{to}".into(),
        ));
    }

    let over: BTreeMap<String, Vec<String>> = match over {
        None => BTreeMap::new(),
        Some(v) => {
            serde_json::from_value(v).map_err(|e| template_error(format!("bad `over`: {e}")))?
        }
    };
    let domain = |name: &str, declared: &[String]| -> Result<Vec<String>, Diagnostic> {
        match over.get(name) {
            None => Ok(declared.to_vec()),
            Some(subset) => {
                if let Some(bad) = subset.iter().find(|v| !declared.contains(v)) {
                    return Err(template_error(format!(
                        "`over.{name}` value {bad} is not declared"
                    )));
                }
                Ok(subset.clone())
            }
        }
    };
    for key in over.keys() {
        if !in_id.contains(&key.as_str()) {
            return Err(template_error(format!(
                "`over.{key}` names a placeholder not in the id"
            )));
        }
    }

    // Cartesian product over placeholders in fixed order.
    let mut combos: Vec<Vec<(&str, String)>> = vec![Vec::new()];
    for name in PLACEHOLDERS {
        if !in_id.contains(&name) {
            continue;
        }
        let values = match name {
            "obj" => domain("obj", objects)?,
            _ => domain(name, locations)?,
        };
        combos = combos
            .into_iter()
            .flat_map(|prefix| {
                values.iter().map(move |v| {
                    let mut next = prefix.clone();
                    next.push((name, v.clone()));
                    next
                })
            })
            .collect();
    }
    combos.retain(|c| {
        let get = |n: &str| c.iter().find(|(k, _)| *k == n).map(|(_, v)| v);
        match (get("from"), get("to")) {
            (Some(a), Some(b)) => a != b,
            _ => true,
        }
    });

    Ok(combos
        .into_iter()
        .map(|combo| {
            let bindings: Vec<(&str, &str)> = combo.iter().map(|(k, v)| (*k, v.as_str())).collect();
            let suffix = format!(
                "{{{}}}",
                combo
                    .iter()
                    .map(|(k, v)| format!("{k}={v}"))
                    .collect::<Vec<_>>()
                    .join(",")
            );
            (suffix, substitute(&body, &bindings))
        })
        .collect())
}

impl SkillStateGraph {
    /// Canonical document: templates expanded, everything in id order.
    pub fn to_document(&self) -> GraphDocument {
        GraphDocument {
            locations: self.locations().iter().map(|l| l.to_string()).collect(),
            objects: self.objects().iter().map(|o| o.to_string()).collect(),
            actions: self
                .actions()
                .values()
                .map(|a| serde_json::to_value(a).expect("action serializes"))
                .collect(),
            skills: self
                .skills()
                .values()
                .map(|s| serde_json::to_value(s).expect("skill serializes"))
                .collect(),
            edges: match self.edge_mode() {
                EdgeMode::Declared => self
                    .edges()
                    .iter()
                    .map(|(a, b)| (a.to_string(), b.to_string()))
                    .collect(),
                EdgeMode::Derived => Vec::new(),
            },
            edge_mode: self.edge_mode(),
        }
    }

    pub fn to_json(&self) -> String {
        let mut text =
            serde_json::to_string_pretty(&self.to_document()).expect("document serializes");
        text.push('\n');
        text
    }
}
