//! The hierarchical skill library and the skill-state graph.
//!
//! Nodes are semantic skills, each carrying a [`Precondition`] and a
//! [`StateDelta`]. A directed edge `(i, j)` is a feasible local transition:
//! some state admitted by `i`'s precondition, after `i`'s delta, satisfies
//! `j`'s precondition. Action-level skills live beside the graph without
//! preconditions or edges.

mod document;
mod view;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::ids::{ActionSkillId, LocationId, ObjectId, SkillId};
use crate::state::{EmbodimentState, Precondition, StateDelta};

pub use document::{load_graph, load_graph_with, GraphDocument, LoadOptions};
pub use view::{
    export_dot, prune_view, topo_view, DotError, DotSource, PruneDepth, TopoNode, TopoView,
};

/// Default bound on the number of states [`derive_edges`] may enumerate.
pub const DEFAULT_STATE_SPACE_LIMIT: u128 = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkillCategory {
    Pick,
    Place,
    Navigate,
    Open,
    Close,
    Recovery,
    Other,
}

impl fmt::Display for SkillCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            SkillCategory::Pick => "pick",
            SkillCategory::Place => "place",
            SkillCategory::Navigate => "navigate",
            SkillCategory::Open => "open",
            SkillCategory::Close => "close",
            SkillCategory::Recovery => "recovery",
            SkillCategory::Other => "other",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SemanticSkill {
    pub id: SkillId,
    pub label: String,
    pub category: SkillCategory,
    pub pre: Precondition,
    pub delta: StateDelta,
    #[serde(default)]
    pub action_refs: Vec<ActionSkillId>,
}

impl SemanticSkill {
    /// Executes the skill symbolically: `None` when the precondition or the
    /// delta rejects `state`.
    pub fn successor(&self, state: &EmbodimentState) -> Option<EmbodimentState> {
        if !self.pre.matches(state) {
            return None;
        }
        self.delta.apply(state).ok()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActionSkill {
    pub id: ActionSkillId,
    pub label: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EdgeMode {
    /// Edges are listed in the document and checked against the derivation rule.
    Declared,
    /// Edges are computed by enumeration.
    #[default]
    Derived,
}

pub type Edge = (SkillId, SkillId);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiagnosticKind {
    Malformed,
    InvalidIdentifier,
    DuplicateDeclaration,
    DuplicateSkillId,
    DuplicateEdge,
    UnknownLocation,
    UnknownObject,
    UnknownAction,
    DanglingEdge,
    PreconditionContradictsDelta,
    InfeasibleDeclaredEdge,
    EdgesInDerivedMode,
    StateSpaceTooLarge,
    Template,
}

/// A load/validation problem, located by a path into the document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub path: String,
    pub kind: DiagnosticKind,
    pub message: String,
}

impl Diagnostic {
    pub fn new(path: impl Into<String>, kind: DiagnosticKind, message: impl Into<String>) -> Self {
        Self {
            path: path.into(),
            kind,
            message: message.into(),
        }
    }
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {:?}: {}", self.path, self.kind, self.message)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("state space of {states} states exceeds the enumeration limit of {limit}")]
pub struct StateSpaceTooLarge {
    pub states: u128,
    pub limit: u128,
}

/// How edges are supplied when building a graph.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EdgeSpec {
    Declared(Vec<Edge>),
    Derived,
}

/// Immutable, validated skill-state graph.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkillStateGraph {
    locations: BTreeSet<LocationId>,
    objects: BTreeSet<ObjectId>,
    skills: BTreeMap<SkillId, SemanticSkill>,
    actions: BTreeMap<ActionSkillId, ActionSkill>,
    edges: BTreeSet<Edge>,
    edge_mode: EdgeMode,
}

impl SkillStateGraph {
    /// Validates the parts and assembles a graph. Every problem found is
    /// reported, not just the first.
    pub fn from_parts(
        locations: Vec<LocationId>,
        objects: Vec<ObjectId>,
        actions: Vec<ActionSkill>,
        skills: Vec<SemanticSkill>,
        edges: EdgeSpec,
        state_space_limit: u128,
    ) -> Result<Self, Vec<Diagnostic>> {
        let mut diags = Vec::new();

        let mut location_set = BTreeSet::new();
        for (i, location) in locations.into_iter().enumerate() {
            if !location_set.insert(location.clone()) {
                diags.push(Diagnostic::new(
                    format!("locations[{i}]"),
                    DiagnosticKind::DuplicateDeclaration,
                    format!("location {location} declared twice"),
                ));
            }
        }
        let mut object_set = BTreeSet::new();
        for (i, object) in objects.into_iter().enumerate() {
            if !object_set.insert(object.clone()) {
                diags.push(Diagnostic::new(
                    format!("objects[{i}]"),
                    DiagnosticKind::DuplicateDeclaration,
                    format!("object {object} declared twice"),
                ));
            }
        }
        let mut action_map = BTreeMap::new();
        for (i, action) in actions.into_iter().enumerate() {
            if action_map.contains_key(&action.id) {
                diags.push(Diagnostic::new(
                    format!("actions[{i}]"),
                    DiagnosticKind::DuplicateDeclaration,
                    format!("action {} declared twice", action.id),
                ));
            } else {
                action_map.insert(action.id.clone(), action);
            }
        }

        let mut skill_map = BTreeMap::new();
        for skill in skills {
            let base = format!("skills[{}]", skill.id);
            check_skill(
                &skill,
                &base,
                &location_set,
                &object_set,
                &action_map,
                &mut diags,
            );
            if skill_map.contains_key(&skill.id) {
                diags.push(Diagnostic::new(
                    base,
                    DiagnosticKind::DuplicateSkillId,
                    format!("skill id {} used more than once", skill.id),
                ));
            } else {
                skill_map.insert(skill.id.clone(), skill);
            }
        }

        let (edge_mode, declared) = match edges {
            EdgeSpec::Declared(list) => (EdgeMode::Declared, list),
            EdgeSpec::Derived => (EdgeMode::Derived, Vec::new()),
        };
        let mut edge_set = BTreeSet::new();
        for (k, (from, to)) in declared.iter().enumerate() {
            let mut dangling = false;
            for (end, id) in [(0, from), (1, to)] {
                if !skill_map.contains_key(id) {
                    dangling = true;
                    diags.push(Diagnostic::new(
                        format!("edges[{k}][{end}]"),
                        DiagnosticKind::DanglingEdge,
                        format!("edge endpoint {id} is not a declared skill"),
                    ));
                }
            }
            if !dangling && !edge_set.insert((from.clone(), to.clone())) {
                diags.push(Diagnostic::new(
                    format!("edges[{k}]"),
                    DiagnosticKind::DuplicateEdge,
                    format!("edge {from} -> {to} listed twice"),
                ));
            }
        }

        if !diags.is_empty() {
            return Err(diags);
        }

        let mut graph = SkillStateGraph {
            locations: location_set,
            objects: object_set,
            skills: skill_map,
            actions: action_map,
            edges: BTreeSet::new(),
            edge_mode,
        };
        let derived = match derive_edges(&graph, state_space_limit) {
            Ok(derived) => derived,
            Err(err) => {
                return Err(vec![Diagnostic::new(
                    "$",
                    DiagnosticKind::StateSpaceTooLarge,
                    err.to_string(),
                )])
            }
        };
        match edge_mode {
            EdgeMode::Derived => graph.edges = derived,
            EdgeMode::Declared => {
                for (k, edge) in declared.iter().enumerate() {
                    if !derived.contains(edge) {
                        diags.push(Diagnostic::new(
                            format!("edges[{k}]"),
                            DiagnosticKind::InfeasibleDeclaredEdge,
                            format!(
                                "no state satisfying {}'s precondition leads, after its delta, to a state satisfying {}'s precondition",
                                edge.0, edge.1
                            ),
                        ));
                    }
                }
                if !diags.is_empty() {
                    return Err(diags);
                }
                graph.edges = edge_set;
            }
        }
        Ok(graph)
    }

    pub fn empty() -> Self {
        SkillStateGraph {
            locations: BTreeSet::new(),
            objects: BTreeSet::new(),
            skills: BTreeMap::new(),
            actions: BTreeMap::new(),
            edges: BTreeSet::new(),
            edge_mode: EdgeMode::Derived,
        }
    }

    pub fn locations(&self) -> &BTreeSet<LocationId> {
        &self.locations
    }

    pub fn objects(&self) -> &BTreeSet<ObjectId> {
        &self.objects
    }

    pub fn skills(&self) -> &BTreeMap<SkillId, SemanticSkill> {
        &self.skills
    }

    pub fn skill(&self, id: &str) -> Option<&SemanticSkill> {
        self.skills.get(id)
    }

    pub fn actions(&self) -> &BTreeMap<ActionSkillId, ActionSkill> {
        &self.actions
    }

    pub fn edges(&self) -> &BTreeSet<Edge> {
        &self.edges
    }

    pub fn has_edge(&self, from: &SkillId, to: &SkillId) -> bool {
        // BTreeSet<(A, B)> cannot be probed by reference pair without cloning.
        self.edges
            .range((from.clone(), to.clone())..=(from.clone(), to.clone()))
            .next()
            .is_some()
    }

    pub fn edge_mode(&self) -> EdgeMode {
        self.edge_mode
    }

    pub fn state_space_size(&self) -> u128 {
        EmbodimentState::space_size(self.locations.len(), self.objects.len())
    }

    /// All concrete states over the graph's vocabulary.
    pub fn states(&self) -> Vec<EmbodimentState> {
        EmbodimentState::enumerate(&self.locations, &self.objects)
    }

    /// Whether a concrete state only mentions declared locations and objects.
    pub fn in_vocabulary(&self, state: &EmbodimentState) -> bool {
        self.locations.contains(&state.location)
            && [&state.left, &state.right]
                .into_iter()
                .filter_map(|g| g.held())
                .all(|o| self.objects.contains(o))
    }

    /// Skills executable at `state`, in id order, with their successor states.
    pub fn successors<'g>(
        &'g self,
        state: &'g EmbodimentState,
    ) -> impl Iterator<Item = (&'g SemanticSkill, EmbodimentState)> + 'g {
        self.skills
            .values()
            .filter_map(move |skill| skill.successor(state).map(|next| (skill, next)))
    }
}

fn check_skill(
    skill: &SemanticSkill,
    base: &str,
    locations: &BTreeSet<LocationId>,
    objects: &BTreeSet<ObjectId>,
    actions: &BTreeMap<ActionSkillId, ActionSkill>,
    diags: &mut Vec<Diagnostic>,
) {
    for location in skill.pre.location_ids() {
        if !locations.contains(location) {
            diags.push(Diagnostic::new(
                format!("{base}.pre.location"),
                DiagnosticKind::UnknownLocation,
                format!("location {location} is not declared"),
            ));
        }
    }
    for location in skill.delta.location_ids() {
        if !locations.contains(location) {
            diags.push(Diagnostic::new(
                format!("{base}.delta.scene"),
                DiagnosticKind::UnknownLocation,
                format!("location {location} is not declared"),
            ));
        }
    }
    for object in skill.pre.object_ids() {
        if !objects.contains(object) {
            diags.push(Diagnostic::new(
                format!("{base}.pre"),
                DiagnosticKind::UnknownObject,
                format!("object {object} is not declared"),
            ));
        }
    }
    for object in skill.delta.object_ids() {
        if !objects.contains(object) {
            diags.push(Diagnostic::new(
                format!("{base}.delta"),
                DiagnosticKind::UnknownObject,
                format!("object {object} is not declared"),
            ));
        }
    }
    for (i, action) in skill.action_refs.iter().enumerate() {
        if !actions.contains_key(action) {
            diags.push(Diagnostic::new(
                format!("{base}.action_refs[{i}]"),
                DiagnosticKind::UnknownAction,
                format!("action {action} is not declared"),
            ));
        }
    }
    let needed = skill.delta.implied_precondition();
    if !skill.pre.implies(&needed) {
        let field = if !skill.pre.location.implies(&needed.location) {
            "location"
        } else if !skill.pre.left.implies(&needed.left) {
            "left"
        } else {
            "right"
        };
        diags.push(Diagnostic::new(
            format!("{base}.pre.{field}"),
            DiagnosticKind::PreconditionContradictsDelta,
            format!(
                "precondition {} admits states where delta {} cannot apply (needs {})",
                skill.pre, skill.delta, needed
            ),
        ));
    }
}

/// Computes the feasible-transition edge set by enumerating every concrete
/// state: `(i, j)` is an edge iff some state `S` admitted by `i` has a
/// successor admitted by `j`.
pub fn derive_edges(
    graph: &SkillStateGraph,
    limit: u128,
) -> Result<BTreeSet<Edge>, StateSpaceTooLarge> {
    let states = graph.state_space_size();
    if states > limit {
        return Err(StateSpaceTooLarge { states, limit });
    }
    let mut edges = BTreeSet::new();
    for state in graph.states() {
        for (from, next) in graph.successors(&state) {
            for to in graph.skills.values() {
                if to.pre.matches(&next) {
                    edges.insert((from.id.clone(), to.id.clone()));
                }
            }
        }
    }
    Ok(edges)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) const MINI: &str = include_str!("../../../../fixtures/mini_household.json");

    pub(crate) fn mini() -> SkillStateGraph {
        load_graph(MINI).expect("mini fixture loads")
    }

    pub(crate) fn sid(s: &str) -> SkillId {
        SkillId::new(s).unwrap()
    }

    #[test]
    fn mini_counts() {
        let g = mini();
        assert_eq!(g.skills().len(), 7);
        assert_eq!(g.locations().len(), 3);
        assert_eq!(g.objects().len(), 2);
        assert_eq!(g.state_space_size(), 27);
    }

    #[test]
    fn derived_edges_on_mini() {
        let g = mini();
        assert!(g.has_edge(&sid("pick_bowl_pantry"), &sid("nav_pantry_to_table")));
        assert!(!g.has_edge(&sid("pick_bowl_pantry"), &sid("pick_bowl_pantry")));
        assert!(!g.has_edge(&sid("pick_bowl_pantry"), &sid("pick_cup_pantry")));
    }

    #[test]
    fn state_space_limit_enforced() {
        let g = mini();
        assert_eq!(
            derive_edges(&g, 26),
            Err(StateSpaceTooLarge {
                states: 27,
                limit: 26
            })
        );
    }
}
