//! Test oracles for `skillstate`.
//!
//! [`RefModel`] reads a graph document as plain JSON and re-implements the
//! transition rule over strings, sharing no code with the library's state
//! algebra. The brute-force searches here are deliberately naive.

use std::collections::{BTreeSet, HashSet, VecDeque};

use rand::seq::SliceRandom;
use rand::Rng;
use serde_json::{json, Value};

pub use rand::SeedableRng;
pub use rand_chacha::ChaCha8Rng;

/// `(location, left, right)`; `None` is an empty gripper.
pub type RefState = (String, Option<String>, Option<String>);

#[derive(Debug, Clone, PartialEq, Eq)]
enum Pat {
    Any,
    Empty,
    Is(String),
}

impl Pat {
    fn parse(v: &Value) -> Pat {
        match v {
            Value::Null => Pat::Empty,
            Value::String(s) if s == "_" => Pat::Any,
            Value::String(s) => Pat::Is(s.clone()),
            other => panic!("bad pattern {other}"),
        }
    }

    fn ok_loc(&self, loc: &str) -> bool {
        match self {
            Pat::Any => true,
            Pat::Is(l) => l == loc,
            Pat::Empty => false,
        }
    }

    fn ok_hand(&self, hand: &Option<String>) -> bool {
        match (self, hand) {
            (Pat::Any, _) => true,
            (Pat::Empty, None) => true,
            (Pat::Is(want), Some(have)) => want == have,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum HandOp {
    Keep,
    Grab(String),
    Release(String),
}

#[derive(Debug, Clone)]
pub struct RefSkill {
    pub id: String,
    pre: (Pat, Pat, Pat),
    mv: Option<(String, String)>,
    hands: (HandOp, HandOp),
}

fn hand_op(v: &Value) -> HandOp {
    match v {
        Value::Null => HandOp::Keep,
        Value::Object(m) => {
            if let Some(o) = m.get("add") {
                HandOp::Grab(o.as_str().unwrap().to_string())
            } else {
                HandOp::Release(m["sub"].as_str().unwrap().to_string())
            }
        }
        other => panic!("bad gripper op {other}"),
    }
}

fn apply_hand(op: &HandOp, hand: &Option<String>) -> Option<Option<String>> {
    match (op, hand) {
        (HandOp::Keep, h) => Some(h.clone()),
        (HandOp::Grab(o), None) => Some(Some(o.clone())),
        (HandOp::Grab(_), Some(_)) => None,
        (HandOp::Release(o), Some(h)) if h == o => Some(None),
        (HandOp::Release(_), _) => None,
    }
}

impl RefSkill {
    /// One symbolic execution; `None` if the skill cannot run at `s`.
    pub fn step(&self, s: &RefState) -> Option<RefState> {
        if !(self.pre.0.ok_loc(&s.0) && self.pre.1.ok_hand(&s.1) && self.pre.2.ok_hand(&s.2)) {
            return None;
        }
        let loc = match &self.mv {
            None => s.0.clone(),
            Some((from, to)) => {
                if &s.0 != from {
                    return None;
                }
                to.clone()
            }
        };
        Some((
            loc,
            apply_hand(&self.hands.0, &s.1)?,
            apply_hand(&self.hands.1, &s.2)?,
        ))
    }
}

#[derive(Debug, Clone)]
pub struct RefModel {
    pub locations: Vec<String>,
    pub objects: Vec<String>,
    /// Sorted by id.
    pub skills: Vec<RefSkill>,
}

impl RefModel {
    /// Reads a concrete (template-free) graph document.
    pub fn from_json(text: &str) -> RefModel {
        let doc: Value = serde_json::from_str(text).expect("graph json");
        let strings = |key: &str| -> Vec<String> {
            doc[key]
                .as_array()
                .unwrap()
                .iter()
                .map(|v| v.as_str().unwrap().to_string())
                .collect()
        };
        let mut skills: Vec<RefSkill> = doc["skills"]
            .as_array()
            .unwrap()
            .iter()
            .map(|s| RefSkill {
                id: s["id"].as_str().unwrap().to_string(),
                pre: (
                    Pat::parse(&s["pre"]["location"]),
                    Pat::parse(&s["pre"]["left"]),
                    Pat::parse(&s["pre"]["right"]),
                ),
                mv: match &s["delta"]["scene"] {
                    Value::Null => None,
                    m => Some((
                        m["move"][0].as_str().unwrap().to_string(),
                        m["move"][1].as_str().unwrap().to_string(),
                    )),
                },
                hands: (hand_op(&s["delta"]["left"]), hand_op(&s["delta"]["right"])),
            })
            .collect();
        skills.sort_by(|a, b| a.id.cmp(&b.id));
        RefModel {
            locations: strings("locations"),
            objects: strings("objects"),
            skills,
        }
    }

    pub fn skill(&self, id: &str) -> Option<&RefSkill> {
        self.skills.iter().find(|s| s.id == id)
    }

    pub fn states(&self) -> Vec<RefState> {
        let hands: Vec<Option<String>> = std::iter::once(None)
            .chain(self.objects.iter().cloned().map(Some))
            .collect();
        let mut out = Vec::new();
        for l in &self.locations {
            for a in &hands {
                for b in &hands {
                    out.push((l.clone(), a.clone(), b.clone()));
                }
            }
        }
        out
    }

    /// Runs a sequence step by step. `Ok(chain)` on success, `Err(index)` of
    /// the first step that cannot run (unknown ids fail too).
    pub fn simulate(&self, initial: &RefState, seq: &[&str]) -> Result<Vec<RefState>, usize> {
        let mut chain = vec![initial.clone()];
        for (i, id) in seq.iter().enumerate() {
            let skill = self.skill(id).ok_or(i)?;
            let next = skill.step(chain.last().unwrap()).ok_or(i)?;
            chain.push(next);
        }
        Ok(chain)
    }

    /// `(i, j)` iff some state lets `i` run and leaves `j` runnable.
    pub fn brute_edges(&self) -> BTreeSet<(String, String)> {
        let mut edges = BTreeSet::new();
        for a in &self.skills {
            for b in &self.skills {
                let witness = self
                    .states()
                    .iter()
                    .filter_map(|s| a.step(s))
                    .any(|after| b.step(&after).is_some());
                if witness {
                    edges.insert((a.id.clone(), b.id.clone()));
                }
            }
        }
        edges
    }

    /// Every sequence of length `1..=max_len` over the skill ids.
    pub fn all_sequences(&self, max_len: usize) -> Vec<Vec<&str>> {
        let ids: Vec<&str> = self.skills.iter().map(|s| s.id.as_str()).collect();
        let mut out = Vec::new();
        let mut layer: Vec<Vec<&str>> = vec![Vec::new()];
        for _ in 0..max_len {
            let mut next = Vec::new();
            for prefix in &layer {
                for id in &ids {
                    let mut seq = prefix.clone();
                    seq.push(id);
                    next.push(seq);
                }
            }
            out.extend(next.iter().cloned());
            layer = next;
        }
        out
    }

    /// Shortest goal-completing sequence, lexicographically first among the
    /// shortest, by iterative deepening over feasible prefixes. A goal counts
    /// when its skill runs while it is the next outstanding goal.
    pub fn shortest_plan(
        &self,
        initial: &RefState,
        goals: &[&str],
        allowed: Option<&BTreeSet<String>>,
        max_len: usize,
    ) -> Option<Vec<String>> {
        for len in 1..=max_len {
            let mut seq = Vec::new();
            if let Some(found) = self.dfs(initial, goals, 0, allowed, len, &mut seq) {
                return Some(found);
            }
        }
        None
    }

    fn dfs(
        &self,
        state: &RefState,
        goals: &[&str],
        done: usize,
        allowed: Option<&BTreeSet<String>>,
        remaining: usize,
        seq: &mut Vec<String>,
    ) -> Option<Vec<String>> {
        if remaining == 0 {
            return (done == goals.len()).then(|| seq.clone());
        }
        // cannot finish the outstanding goals in time
        if goals.len() - done > remaining {
            return None;
        }
        for skill in &self.skills {
            if allowed.is_some_and(|a| !a.contains(&skill.id)) {
                continue;
            }
            let Some(next) = skill.step(state) else {
                continue;
            };
            let done_next = if done < goals.len() && goals[done] == skill.id {
                done + 1
            } else {
                done
            };
            seq.push(skill.id.clone());
            if done_next == goals.len() && remaining == 1 {
                return Some(seq.clone());
            }
            if let Some(found) = self.dfs(&next, goals, done_next, allowed, remaining - 1, seq) {
                return Some(found);
            }
            seq.pop();
        }
        None
    }

    /// Skills that fire within `depth` executions from `initial`, via BFS in
    /// the (state, last skill) product space. `None` depth = full closure.
    pub fn product_reachable(&self, initial: &RefState, depth: Option<usize>) -> BTreeSet<String> {
        let mut seen: HashSet<(RefState, Option<String>)> = HashSet::new();
        let mut queue = VecDeque::from([((initial.clone(), None::<String>), 0usize)]);
        seen.insert((initial.clone(), None));
        let mut fired = BTreeSet::new();
        while let Some(((state, _), d)) = queue.pop_front() {
            if depth.is_some_and(|limit| d >= limit) {
                continue;
            }
            for skill in &self.skills {
                if let Some(next) = skill.step(&state) {
                    fired.insert(skill.id.clone());
                    let node = (next, Some(skill.id.clone()));
                    if seen.insert(node.clone()) {
                        queue.push_back((node, d + 1));
                    }
                }
            }
        }
        fired
    }
}

/// Literal `(loc, left, right)` with `null` for empty, as the CLI expects.
pub fn state_literal(s: &RefState) -> String {
    let hand = |h: &Option<String>| h.clone().unwrap_or_else(|| "null".into());
    format!("({}, {}, {})", s.0, hand(&s.1), hand(&s.2))
}

/// Generates a valid graph document: every skill's precondition implies what
/// its delta needs.
pub fn random_graph_json(
    rng: &mut impl Rng,
    max_skills: usize,
    max_locations: usize,
    max_objects: usize,
) -> String {
    let n_locs = rng.gen_range(1..=max_locations);
    let n_objs = rng.gen_range(1..=max_objects.max(1)).min(max_objects);
    let n_skills = rng.gen_range(1..=max_skills);
    let locations: Vec<String> = (0..n_locs).map(|i| format!("l{i}")).collect();
    let objects: Vec<String> = (0..n_objs).map(|i| format!("o{i}")).collect();

    // one arm per object, so no reachable state holds an object twice
    let arm: Vec<usize> = (0..n_objs).map(|_| rng.gen_range(0..2)).collect();
    let mut skills = Vec::new();
    let mut ids = BTreeSet::new();
    for k in 0..n_skills {
        let kind = rng.gen_range(0..4);
        let mut pre_loc = json!("_");
        let mut pre = [json!("_"), json!("_")];
        let mut scene = Value::Null;
        let mut hands = [Value::Null, Value::Null];
        let (category, tag) = match kind {
            0 if n_locs >= 2 => {
                let mut pair: Vec<&String> = locations.choose_multiple(rng, 2).collect();
                pair.shuffle(rng);
                scene = json!({"move": [pair[0], pair[1]]});
                pre_loc = json!(pair[0]);
                ("navigate", "nav")
            }
            1 | 2 if n_objs > 0 => {
                let o = rng.gen_range(0..n_objs);
                let (side, object) = (arm[o], &objects[o]);
                if kind == 1 {
                    hands[side] = json!({"add": object});
                    pre[side] = Value::Null;
                } else {
                    hands[side] = json!({"sub": object});
                    pre[side] = json!(object);
                }
                if rng.gen_bool(0.8) {
                    pre_loc = json!(locations.choose(rng).unwrap());
                }
                if kind == 1 {
                    ("pick", "pick")
                } else {
                    ("place", "place")
                }
            }
            _ => {
                if rng.gen_bool(0.5) {
                    pre_loc = json!(locations.choose(rng).unwrap());
                }
                ("other", "misc")
            }
        };
        // optional refinement of untouched gripper slots
        for side in 0..2 {
            if hands[side].is_null() && pre[side] == json!("_") && rng.gen_bool(0.25) {
                pre[side] = if n_objs > 0 && rng.gen_bool(0.5) {
                    json!(objects.choose(rng).unwrap())
                } else {
                    Value::Null
                };
            }
        }
        let id = format!("{tag}{k}");
        ids.insert(id.clone());
        skills.push(json!({
            "id": id,
            "label": format!("{category} skill {k}"),
            "category": category,
            "pre": {"location": pre_loc, "left": pre[0], "right": pre[1]},
            "delta": {"scene": scene, "left": hands[0], "right": hands[1]},
            "action_refs": []
        }));
    }
    serde_json::to_string_pretty(&json!({
        "locations": locations,
        "objects": objects,
        "actions": [],
        "skills": skills,
        "edges": [],
        "edge_mode": "derived"
    }))
    .unwrap()
}

/// A random state from which no run can hold an object in both grippers:
/// a hand only holds objects the other hand never grabs.
pub fn random_state(rng: &mut impl Rng, model: &RefModel) -> RefState {
    let grabbed_by = |object: &str, left: bool| {
        model.skills.iter().any(|s| {
            let op = if left { &s.hands.0 } else { &s.hands.1 };
            matches!(op, HandOp::Grab(o) if o == object)
        })
    };
    let states: Vec<RefState> = model
        .states()
        .into_iter()
        .filter(|(_, l, r)| {
            (l.is_none() || l != r)
                && l.as_deref().is_none_or(|o| !grabbed_by(o, false))
                && r.as_deref().is_none_or(|o| !grabbed_by(o, true))
        })
        .collect();
    states.choose(rng).unwrap().clone()
}

pub fn mini_household_json() -> &'static str {
    include_str!("../../../fixtures/mini_household.json")
}

pub fn fixture_path(name: &str) -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../fixtures")
        .join(name)
}
