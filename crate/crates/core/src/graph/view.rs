//! State-stripped projections of the graph and DOT export.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;
use std::num::NonZeroUsize;

use serde::{Deserialize, Serialize};

use super::{SkillCategory, SkillStateGraph};
use crate::ids::SkillId;
use crate::state::EmbodimentState;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopoNode {
    pub id: SkillId,
    pub label: String,
    pub category: SkillCategory,
}

/// Skill nodes and adjacency only; carries no precondition or delta data.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopoView {
    pub nodes: Vec<TopoNode>,
    pub adjacency: BTreeMap<SkillId, Vec<SkillId>>,
}

impl TopoView {
    pub fn contains(&self, id: &str) -> bool {
        self.adjacency.contains_key(id)
    }

    pub fn node_ids(&self) -> impl Iterator<Item = &SkillId> {
        self.nodes.iter().map(|n| &n.id)
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.values().map(Vec::len).sum()
    }
}

fn view_over(graph: &SkillStateGraph, keep: impl Fn(&SkillId) -> bool) -> TopoView {
    let nodes: Vec<TopoNode> = graph
        .skills()
        .values()
        .filter(|s| keep(&s.id))
        .map(|s| TopoNode {
            id: s.id.clone(),
            label: s.label.clone(),
            category: s.category,
        })
        .collect();
    let mut adjacency: BTreeMap<SkillId, Vec<SkillId>> =
        nodes.iter().map(|n| (n.id.clone(), Vec::new())).collect();
    // edges iterate in (from, to) order, so successor lists come out sorted
    for (from, to) in graph.edges() {
        if keep(from) && keep(to) {
            adjacency.get_mut(from).expect("kept node").push(to.clone());
        }
    }
    TopoView { nodes, adjacency }
}

pub fn topo_view(graph: &SkillStateGraph) -> TopoView {
    view_over(graph, |_| true)
}

/// How far [`prune_view`] looks ahead. Serialized as a positive integer or
/// `"closure"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PruneDepth {
    Steps(NonZeroUsize),
    /// Full reachability closure.
    Closure,
}

impl PruneDepth {
    pub fn steps(n: usize) -> Option<Self> {
        NonZeroUsize::new(n).map(PruneDepth::Steps)
    }
}

impl Serialize for PruneDepth {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        match self {
            PruneDepth::Steps(n) => serializer.serialize_u64(n.get() as u64),
            PruneDepth::Closure => serializer.serialize_str("closure"),
        }
    }
}

impl<'de> Deserialize<'de> for PruneDepth {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        use serde::de::Error;

        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Steps(usize),
            Named(String),
        }
        match Raw::deserialize(deserializer)? {
            Raw::Steps(n) => {
                PruneDepth::steps(n).ok_or_else(|| D::Error::custom("prune depth must be positive"))
            }
            Raw::Named(s) => s.parse().map_err(D::Error::custom),
        }
    }
}

impl std::fmt::Display for PruneDepth {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PruneDepth::Steps(n) => write!(f, "{n}"),
            PruneDepth::Closure => f.write_str("closure"),
        }
    }
}

impl std::str::FromStr for PruneDepth {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "closure" | "inf" | "∞" => Ok(PruneDepth::Closure),
            _ => s
                .parse::<usize>()
                .ok()
                .and_then(PruneDepth::steps)
                .ok_or_else(|| {
                    format!("prune depth must be a positive integer or `closure`, got {s:?}")
                }),
        }
    }
}

/// Skills executable within `depth` executions from `state`: a breadth-first
/// sweep of the reachable states, collecting every skill that fires.
pub fn reachable_skills(
    graph: &SkillStateGraph,
    state: &EmbodimentState,
    depth: PruneDepth,
) -> BTreeSet<SkillId> {
    let limit = match depth {
        PruneDepth::Steps(n) => n.get(),
        PruneDepth::Closure => usize::MAX,
    };
    let mut seen: HashSet<EmbodimentState> = HashSet::from([state.clone()]);
    let mut frontier = vec![state.clone()];
    let mut skills = BTreeSet::new();
    let mut level = 0;
    while level < limit && !frontier.is_empty() {
        let mut next = Vec::new();
        for current in &frontier {
            for (skill, after) in graph.successors(current) {
                skills.insert(skill.id.clone());
                if seen.insert(after.clone()) {
                    next.push(after);
                }
            }
        }
        frontier = next;
        level += 1;
    }
    skills
}

/// [`topo_view`] restricted to the skills reachable from `state` within
/// `depth` executions, with the induced adjacency.
pub fn prune_view(graph: &SkillStateGraph, state: &EmbodimentState, depth: PruneDepth) -> TopoView {
    let keep = reachable_skills(graph, state, depth);
    view_over(graph, |id| keep.contains(id))
}

#[derive(Debug, Clone, Copy)]
pub enum DotSource<'a> {
    View(&'a TopoView),
    Graph(&'a SkillStateGraph),
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DotError {
    #[error(
        "annotated export needs the full graph; a topological view has no preconditions or deltas"
    )]
    AnnotatedRequiresFullGraph,
}

fn quote(text: &str) -> String {
    let mut out = String::with_capacity(text.len() + 2);
    out.push('"');
    for c in text.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            _ => out.push(c),
        }
    }
    out.push('"');
    out
}

pub fn export_dot(source: DotSource<'_>, annotated: bool) -> Result<String, DotError> {
    let (view, graph) = match source {
        DotSource::View(view) => {
            if annotated {
                return Err(DotError::AnnotatedRequiresFullGraph);
            }
            (view.clone(), None)
        }
        DotSource::Graph(graph) => (topo_view(graph), Some(graph)),
    };
    if view.nodes.is_empty() {
        return Ok("digraph skillstate {}\n".to_string());
    }
    let mut out = String::from("digraph skillstate {\n");
    for node in &view.nodes {
        let mut label = format!("{}\n{}", node.id, node.label);
        if annotated {
            let skill = graph
                .and_then(|g| g.skill(node.id.as_str()))
                .expect("annotated export has the graph");
            let _ = write!(label, "\npre: {}\ndelta: {}", skill.pre, skill.delta);
        }
        let _ = writeln!(
            out,
            "  {} [label={}];",
            quote(node.id.as_str()),
            quote(&label)
        );
    }
    for (from, successors) in &view.adjacency {
        for to in successors {
            let _ = writeln!(out, "  {} -> {};", quote(from.as_str()), quote(to.as_str()));
        }
    }
    out.push_str("}\n");
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::tests::mini;

    fn word_present(haystack: &str, word: &str) -> bool {
        haystack
            .split(|c: char| !c.is_alphanumeric())
            .any(|token| token == word)
    }

    #[test]
    fn topo_view_projects_everything() {
        let g = mini();
        let view = topo_view(&g);
        assert_eq!(view.nodes.len(), 7);
        assert_eq!(view.edge_count(), g.edges().len());
        let json = serde_json::to_string(&view).unwrap();
        for token in ["pre", "delta", "MOVE", "ADD", "SUB"] {
            assert!(!word_present(&json, token), "{token} leaked into {json}");
        }
        for list in view.adjacency.values() {
            assert!(list.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn empty_graph_views() {
        let g = SkillStateGraph::empty();
        assert!(topo_view(&g).nodes.is_empty());
        assert_eq!(
            export_dot(DotSource::Graph(&g), false).unwrap(),
            "digraph skillstate {}\n"
        );
    }

    #[test]
    fn dot_counts_and_determinism() {
        let g = mini();
        let view = topo_view(&g);
        let dot = export_dot(DotSource::View(&view), false).unwrap();
        let nodes = dot.lines().filter(|l| l.contains("[label=")).count();
        let edges = dot.lines().filter(|l| l.contains(" -> ")).count();
        assert_eq!(nodes, 7);
        assert_eq!(edges, view.edge_count());
        assert_eq!(dot, export_dot(DotSource::View(&view), false).unwrap());
        assert!(dot.starts_with("digraph skillstate {\n"));
    }

    #[test]
    fn annotated_needs_graph() {
        let g = mini();
        let view = topo_view(&g);
        assert_eq!(
            export_dot(DotSource::View(&view), true),
            Err(DotError::AnnotatedRequiresFullGraph)
        );
        let dot = export_dot(DotSource::Graph(&g), true).unwrap();
        assert!(dot.contains("pre: (pantry, ∅, _)"));
        assert!(dot.contains("delta: (MOVE(pantry, table), ∅, ∅)"));
    }

    #[test]
    fn prune_depth_one_is_executable_set() {
        let g = mini();
        let s: EmbodimentState = "(pantry, null, null)".parse().unwrap();
        let view = prune_view(&g, &s, PruneDepth::steps(1).unwrap());
        let ids: Vec<&str> = view.node_ids().map(|i| i.as_str()).collect();
        assert_eq!(
            ids,
            ["nav_pantry_to_table", "pick_bowl_pantry", "pick_cup_pantry"]
        );
    }

    #[test]
    fn prune_depth_parse() {
        assert_eq!("closure".parse::<PruneDepth>(), Ok(PruneDepth::Closure));
        assert_eq!("2".parse::<PruneDepth>(), Ok(PruneDepth::steps(2).unwrap()));
        assert!("0".parse::<PruneDepth>().is_err());
        assert_eq!(serde_json::to_string(&PruneDepth::steps(3)).unwrap(), "3");
        assert_eq!(
            serde_json::from_str::<PruneDepth>("\"closure\"").unwrap(),
            PruneDepth::Closure
        );
        assert!(serde_json::from_str::<PruneDepth>("0").is_err());
    }
}
