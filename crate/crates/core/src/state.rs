//! Embodiment-state algebra.
//!
//! A concrete [`EmbodimentState`] is the robot-centric tuple
//! `(location, left gripper, right gripper)`. Skills carry a [`Precondition`]
//! (the same tuple with wildcard slots) and a [`StateDelta`] describing how
//! the tuple changes: `MOVE(A, B)` relocates the base, `ADD(a)` fills an empty
//! gripper and `SUB(a)` empties a gripper holding `a`.
//!
//! Textual forms: `(pantry, bowl, ∅)` for states, `_` for wildcards. The
//! parser also accepts `null` for the empty marker.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::ids::{InvalidId, LocationId, ObjectId};

pub const EMPTY_MARKER: &str = "∅";
pub const WILDCARD: &str = "_";

/// Which slot of the state tuple an error or conflict refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Slot {
    Location,
    Left,
    Right,
}

impl Slot {
    pub fn describe(self) -> &'static str {
        match self {
            Slot::Location => "location",
            Slot::Left => "left gripper",
            Slot::Right => "right gripper",
        }
    }
}

impl fmt::Display for Slot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.describe())
    }
}

/// One of the two grippers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Left,
    Right,
}

impl Side {
    pub const BOTH: [Side; 2] = [Side::Left, Side::Right];

    pub fn slot(self) -> Slot {
        match self {
            Side::Left => Slot::Left,
            Side::Right => Slot::Right,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum GripperContent {
    Empty,
    Holding(ObjectId),
}

impl GripperContent {
    pub fn held(&self) -> Option<&ObjectId> {
        match self {
            GripperContent::Empty => None,
            GripperContent::Holding(object) => Some(object),
        }
    }

    pub fn is_empty(&self) -> bool {
        matches!(self, GripperContent::Empty)
    }
}

impl fmt::Display for GripperContent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GripperContent::Empty => f.write_str(EMPTY_MARKER),
            GripperContent::Holding(object) => write!(f, "{object}"),
        }
    }
}

/// The concrete robot state `(location, left, right)`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EmbodimentState {
    pub location: LocationId,
    pub left: GripperContent,
    pub right: GripperContent,
}

impl EmbodimentState {
    pub fn new(location: LocationId, left: GripperContent, right: GripperContent) -> Self {
        Self {
            location,
            left,
            right,
        }
    }

    pub fn gripper(&self, side: Side) -> &GripperContent {
        match side {
            Side::Left => &self.left,
            Side::Right => &self.right,
        }
    }

    pub fn gripper_mut(&mut self, side: Side) -> &mut GripperContent {
        match side {
            Side::Left => &mut self.left,
            Side::Right => &mut self.right,
        }
    }

    /// Enumerates every concrete state over a vocabulary, in lexicographic
    /// order of (location, left, right) with `Empty` sorting first.
    pub fn enumerate<'a>(
        locations: impl IntoIterator<Item = &'a LocationId>,
        objects: impl IntoIterator<Item = &'a ObjectId> + Clone,
    ) -> Vec<EmbodimentState> {
        let contents: Vec<GripperContent> = std::iter::once(GripperContent::Empty)
            .chain(objects.into_iter().cloned().map(GripperContent::Holding))
            .collect();
        let mut out = Vec::new();
        for location in locations {
            for left in &contents {
                for right in &contents {
                    out.push(EmbodimentState::new(
                        location.clone(),
                        left.clone(),
                        right.clone(),
                    ));
                }
            }
        }
        out
    }

    pub fn space_size(locations: usize, objects: usize) -> u128 {
        locations as u128 * (objects as u128 + 1).pow(2)
    }
}

impl fmt::Display for EmbodimentState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.location, self.left, self.right)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum LocationPattern {
    Wildcard,
    At(LocationId),
}

impl LocationPattern {
    pub fn matches(&self, location: &LocationId) -> bool {
        match self {
            LocationPattern::Wildcard => true,
            LocationPattern::At(expected) => expected == location,
        }
    }

    pub fn implies(&self, other: &LocationPattern) -> bool {
        matches!(other, LocationPattern::Wildcard) || self == other
    }
}

impl fmt::Display for LocationPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LocationPattern::Wildcard => f.write_str(WILDCARD),
            LocationPattern::At(location) => write!(f, "{location}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum GripperPattern {
    Wildcard,
    Empty,
    Holding(ObjectId),
}

impl GripperPattern {
    /// Wildcard matches every content, `Empty` included.
    pub fn matches(&self, content: &GripperContent) -> bool {
        match (self, content) {
            (GripperPattern::Wildcard, _) => true,
            (GripperPattern::Empty, GripperContent::Empty) => true,
            (GripperPattern::Holding(want), GripperContent::Holding(have)) => want == have,
            _ => false,
        }
    }

    pub fn implies(&self, other: &GripperPattern) -> bool {
        matches!(other, GripperPattern::Wildcard) || self == other
    }
}

impl fmt::Display for GripperPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GripperPattern::Wildcard => f.write_str(WILDCARD),
            GripperPattern::Empty => f.write_str(EMPTY_MARKER),
            GripperPattern::Holding(object) => write!(f, "{object}"),
        }
    }
}

/// A pattern over [`EmbodimentState`] with per-slot wildcards.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Precondition {
    pub location: LocationPattern,
    pub left: GripperPattern,
    pub right: GripperPattern,
}

impl Precondition {
    pub fn any() -> Self {
        Self {
            location: LocationPattern::Wildcard,
            left: GripperPattern::Wildcard,
            right: GripperPattern::Wildcard,
        }
    }

    pub fn gripper(&self, side: Side) -> &GripperPattern {
        match side {
            Side::Left => &self.left,
            Side::Right => &self.right,
        }
    }

    pub fn matches(&self, state: &EmbodimentState) -> bool {
        self.mismatch(state).is_none()
    }

    /// First slot (location, left, right order) that fails to match.
    pub fn mismatch(&self, state: &EmbodimentState) -> Option<Slot> {
        if !self.location.matches(&state.location) {
            Some(Slot::Location)
        } else if !self.left.matches(&state.left) {
            Some(Slot::Left)
        } else if !self.right.matches(&state.right) {
            Some(Slot::Right)
        } else {
            None
        }
    }

    /// Slot-wise pattern implication: every state matching `self` also
    /// matches `other`.
    pub fn implies(&self, other: &Precondition) -> bool {
        self.location.implies(&other.location)
            && self.left.implies(&other.left)
            && self.right.implies(&other.right)
    }

    pub fn location_ids(&self) -> impl Iterator<Item = &LocationId> {
        match &self.location {
            LocationPattern::At(location) => Some(location),
            LocationPattern::Wildcard => None,
        }
        .into_iter()
    }

    pub fn object_ids(&self) -> impl Iterator<Item = &ObjectId> {
        [&self.left, &self.right]
            .into_iter()
            .filter_map(|p| match p {
                GripperPattern::Holding(object) => Some(object),
                _ => None,
            })
    }
}

/// `matches(state, pre)` as a free function.
pub fn matches(state: &EmbodimentState, pre: &Precondition) -> bool {
    pre.matches(state)
}

impl fmt::Display for Precondition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.location, self.left, self.right)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SceneOp {
    NoOp,
    Move { from: LocationId, to: LocationId },
}

impl fmt::Display for SceneOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SceneOp::NoOp => f.write_str(EMPTY_MARKER),
            SceneOp::Move { from, to } => write!(f, "MOVE({from}, {to})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum GripperOp {
    NoOp,
    Add(ObjectId),
    Sub(ObjectId),
}

impl GripperOp {
    pub fn object(&self) -> Option<&ObjectId> {
        match self {
            GripperOp::NoOp => None,
            GripperOp::Add(object) | GripperOp::Sub(object) => Some(object),
        }
    }
}

impl fmt::Display for GripperOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GripperOp::NoOp => f.write_str(EMPTY_MARKER),
            GripperOp::Add(object) => write!(f, "ADD({object})"),
            GripperOp::Sub(object) => write!(f, "SUB({object})"),
        }
    }
}

/// The state variation `(scene, left, right)` a skill induces.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct StateDelta {
    pub scene: SceneOp,
    pub left: GripperOp,
    pub right: GripperOp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeltaErrorKind {
    MoveFromMismatch,
    AddOnOccupied,
    SubOnWrongObject,
    SubOnEmpty,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{kind:?} on {slot}")]
pub struct DeltaError {
    pub slot: Slot,
    pub kind: DeltaErrorKind,
}

impl StateDelta {
    pub fn identity() -> Self {
        Self {
            scene: SceneOp::NoOp,
            left: GripperOp::NoOp,
            right: GripperOp::NoOp,
        }
    }

    pub fn gripper(&self, side: Side) -> &GripperOp {
        match side {
            Side::Left => &self.left,
            Side::Right => &self.right,
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::identity()
    }

    pub fn is_move(&self) -> bool {
        matches!(self.scene, SceneOp::Move { .. })
    }

    /// Objects this delta grasps, with the gripper doing the grasping.
    pub fn adds(&self) -> impl Iterator<Item = (Side, &ObjectId)> {
        Side::BOTH
            .into_iter()
            .filter_map(|side| match self.gripper(side) {
                GripperOp::Add(object) => Some((side, object)),
                _ => None,
            })
    }

    /// Objects this delta releases, with the releasing gripper.
    pub fn subs(&self) -> impl Iterator<Item = (Side, &ObjectId)> {
        Side::BOTH
            .into_iter()
            .filter_map(|side| match self.gripper(side) {
                GripperOp::Sub(object) => Some((side, object)),
                _ => None,
            })
    }

    pub fn apply(&self, state: &EmbodimentState) -> Result<EmbodimentState, DeltaError> {
        let mut next = state.clone();
        if let SceneOp::Move { from, to } = &self.scene {
            if &state.location != from {
                return Err(DeltaError {
                    slot: Slot::Location,
                    kind: DeltaErrorKind::MoveFromMismatch,
                });
            }
            next.location = to.clone();
        }
        for side in Side::BOTH {
            let current = state.gripper(side);
            let updated = match (self.gripper(side), current) {
                (GripperOp::NoOp, _) => continue,
                (GripperOp::Add(object), GripperContent::Empty) => {
                    GripperContent::Holding(object.clone())
                }
                (GripperOp::Add(_), GripperContent::Holding(_)) => {
                    return Err(DeltaError {
                        slot: side.slot(),
                        kind: DeltaErrorKind::AddOnOccupied,
                    })
                }
                (GripperOp::Sub(object), GripperContent::Holding(held)) if held == object => {
                    GripperContent::Empty
                }
                (GripperOp::Sub(_), GripperContent::Holding(_)) => {
                    return Err(DeltaError {
                        slot: side.slot(),
                        kind: DeltaErrorKind::SubOnWrongObject,
                    })
                }
                (GripperOp::Sub(_), GripperContent::Empty) => {
                    return Err(DeltaError {
                        slot: side.slot(),
                        kind: DeltaErrorKind::SubOnEmpty,
                    })
                }
            };
            *next.gripper_mut(side) = updated;
        }
        Ok(next)
    }

    /// Weakest precondition under which [`StateDelta::apply`] cannot fail.
    pub fn implied_precondition(&self) -> Precondition {
        let gripper = |op: &GripperOp| match op {
            GripperOp::NoOp => GripperPattern::Wildcard,
            GripperOp::Add(_) => GripperPattern::Empty,
            GripperOp::Sub(object) => GripperPattern::Holding(object.clone()),
        };
        Precondition {
            location: match &self.scene {
                SceneOp::NoOp => LocationPattern::Wildcard,
                SceneOp::Move { from, .. } => LocationPattern::At(from.clone()),
            },
            left: gripper(&self.left),
            right: gripper(&self.right),
        }
    }

    pub fn location_ids(&self) -> impl Iterator<Item = &LocationId> {
        match &self.scene {
            SceneOp::Move { from, to } => vec![from, to],
            SceneOp::NoOp => vec![],
        }
        .into_iter()
    }

    pub fn object_ids(&self) -> impl Iterator<Item = &ObjectId> {
        self.left.object().into_iter().chain(self.right.object())
    }
}

/// `apply_delta(state, delta)` as a free function.
pub fn apply_delta(
    state: &EmbodimentState,
    delta: &StateDelta,
) -> Result<EmbodimentState, DeltaError> {
    delta.apply(state)
}

impl fmt::Display for StateDelta {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.scene, self.left, self.right)
    }
}

// ---------------------------------------------------------------------------
// literal parsing

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum LiteralError {
    #[error("state literal must look like (location, left, right): {0:?}")]
    Shape(String),
    #[error("wildcard `_` is not allowed in a concrete state")]
    WildcardInState,
    #[error(transparent)]
    Id(#[from] InvalidId),
}

fn split_literal(text: &str) -> Result<[&str; 3], LiteralError> {
    let inner = text
        .trim()
        .strip_prefix('(')
        .and_then(|t| t.strip_suffix(')'))
        .ok_or_else(|| LiteralError::Shape(text.to_string()))?;
    let parts: Vec<&str> = inner.split(',').map(str::trim).collect();
    <[&str; 3]>::try_from(parts).map_err(|_| LiteralError::Shape(text.to_string()))
}

fn is_empty_token(token: &str) -> bool {
    token == "null" || token == EMPTY_MARKER
}

fn parse_content(token: &str) -> Result<GripperContent, LiteralError> {
    if is_empty_token(token) {
        Ok(GripperContent::Empty)
    } else if token == WILDCARD {
        Err(LiteralError::WildcardInState)
    } else {
        Ok(GripperContent::Holding(ObjectId::new(token)?))
    }
}

fn parse_gripper_pattern(token: &str) -> Result<GripperPattern, LiteralError> {
    if is_empty_token(token) {
        Ok(GripperPattern::Empty)
    } else if token == WILDCARD {
        Ok(GripperPattern::Wildcard)
    } else {
        Ok(GripperPattern::Holding(ObjectId::new(token)?))
    }
}

impl FromStr for EmbodimentState {
    type Err = LiteralError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let [location, left, right] = split_literal(s)?;
        if location == WILDCARD {
            return Err(LiteralError::WildcardInState);
        }
        Ok(EmbodimentState::new(
            LocationId::new(location)?,
            parse_content(left)?,
            parse_content(right)?,
        ))
    }
}

impl FromStr for Precondition {
    type Err = LiteralError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let [location, left, right] = split_literal(s)?;
        Ok(Precondition {
            location: if location == WILDCARD {
                LocationPattern::Wildcard
            } else {
                LocationPattern::At(LocationId::new(location)?)
            },
            left: parse_gripper_pattern(left)?,
            right: parse_gripper_pattern(right)?,
        })
    }
}

// ---------------------------------------------------------------------------
// structured (JSON) encodings: `"_"` wildcard, `null` empty, `"bowl"` exact

impl Serialize for GripperContent {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.held().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for GripperContent {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        match Option::<String>::deserialize(deserializer)? {
            None => Ok(GripperContent::Empty),
            Some(token) if token == WILDCARD => Err(serde::de::Error::custom(
                "wildcard `_` is not allowed in a concrete state",
            )),
            Some(token) => ObjectId::new(token)
                .map(GripperContent::Holding)
                .map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StateRepr {
    location: LocationId,
    left: GripperContent,
    right: GripperContent,
}

impl Serialize for EmbodimentState {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        StateRepr {
            location: self.location.clone(),
            left: self.left.clone(),
            right: self.right.clone(),
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for EmbodimentState {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let repr = StateRepr::deserialize(deserializer)?;
        Ok(EmbodimentState::new(repr.location, repr.left, repr.right))
    }
}

impl Serialize for LocationPattern {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        match self {
            LocationPattern::Wildcard => serializer.serialize_str(WILDCARD),
            LocationPattern::At(location) => location.serialize(serializer),
        }
    }
}

impl<'de> Deserialize<'de> for LocationPattern {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let token = String::deserialize(deserializer)?;
        if token == WILDCARD {
            Ok(LocationPattern::Wildcard)
        } else {
            LocationId::new(token)
                .map(LocationPattern::At)
                .map_err(serde::de::Error::custom)
        }
    }
}

impl Serialize for GripperPattern {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        match self {
            GripperPattern::Wildcard => serializer.serialize_str(WILDCARD),
            GripperPattern::Empty => serializer.serialize_none(),
            GripperPattern::Holding(object) => object.serialize(serializer),
        }
    }
}

impl<'de> Deserialize<'de> for GripperPattern {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        match Option::<String>::deserialize(deserializer)? {
            None => Ok(GripperPattern::Empty),
            Some(token) if token == WILDCARD => Ok(GripperPattern::Wildcard),
            Some(token) => ObjectId::new(token)
                .map(GripperPattern::Holding)
                .map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PreconditionRepr {
    location: LocationPattern,
    left: GripperPattern,
    right: GripperPattern,
}

impl Serialize for Precondition {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        PreconditionRepr {
            location: self.location.clone(),
            left: self.left.clone(),
            right: self.right.clone(),
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Precondition {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let repr = PreconditionRepr::deserialize(deserializer)?;
        Ok(Precondition {
            location: repr.location,
            left: repr.left,
            right: repr.right,
        })
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MoveRepr {
    #[serde(rename = "move")]
    endpoints: (LocationId, LocationId),
}

impl Serialize for SceneOp {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        match self {
            SceneOp::NoOp => serializer.serialize_none(),
            SceneOp::Move { from, to } => MoveRepr {
                endpoints: (from.clone(), to.clone()),
            }
            .serialize(serializer),
        }
    }
}

impl<'de> Deserialize<'de> for SceneOp {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        match Option::<MoveRepr>::deserialize(deserializer)? {
            None => Ok(SceneOp::NoOp),
            Some(MoveRepr {
                endpoints: (from, to),
            }) => {
                if from == to {
                    return Err(serde::de::Error::custom(format!(
                        "move from {from} to itself"
                    )));
                }
                Ok(SceneOp::Move { from, to })
            }
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
enum GripperOpRepr {
    Add(ObjectId),
    Sub(ObjectId),
}

impl Serialize for GripperOp {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        match self {
            GripperOp::NoOp => serializer.serialize_none(),
            GripperOp::Add(object) => GripperOpRepr::Add(object.clone()).serialize(serializer),
            GripperOp::Sub(object) => GripperOpRepr::Sub(object.clone()).serialize(serializer),
        }
    }
}

impl<'de> Deserialize<'de> for GripperOp {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        Ok(match Option::<GripperOpRepr>::deserialize(deserializer)? {
            None => GripperOp::NoOp,
            Some(GripperOpRepr::Add(object)) => GripperOp::Add(object),
            Some(GripperOpRepr::Sub(object)) => GripperOp::Sub(object),
        })
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DeltaRepr {
    scene: SceneOp,
    left: GripperOp,
    right: GripperOp,
}

impl Serialize for StateDelta {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        DeltaRepr {
            scene: self.scene.clone(),
            left: self.left.clone(),
            right: self.right.clone(),
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for StateDelta {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let repr = DeltaRepr::deserialize(deserializer)?;
        Ok(StateDelta {
            scene: repr.scene,
            left: repr.left,
            right: repr.right,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn loc(s: &str) -> LocationId {
        LocationId::new(s).unwrap()
    }

    fn obj(s: &str) -> ObjectId {
        ObjectId::new(s).unwrap()
    }

    fn st(s: &str) -> EmbodimentState {
        s.parse().unwrap()
    }

    fn pre(s: &str) -> Precondition {
        s.parse().unwrap()
    }

    fn add_left(o: &str) -> StateDelta {
        StateDelta {
            left: GripperOp::Add(obj(o)),
            ..StateDelta::identity()
        }
    }

    fn sub_left(o: &str) -> StateDelta {
        StateDelta {
            left: GripperOp::Sub(obj(o)),
            ..StateDelta::identity()
        }
    }

    fn mv(a: &str, b: &str) -> StateDelta {
        StateDelta {
            scene: SceneOp::Move {
                from: loc(a),
                to: loc(b),
            },
            ..StateDelta::identity()
        }
    }

    #[test]
    fn matches_examples() {
        assert!(matches(&st("(pantry, null, null)"), &pre("(pantry, ∅, _)")));
        // a pick is invalid if the gripper is already occupied
        assert!(!matches(&st("(table, bowl, null)"), &pre("(_, null, _)")));
        assert!(matches(&st("(table, bowl, cup)"), &Precondition::any()));
        assert_eq!(pre("(_,_,_)"), Precondition::any());
    }

    #[test]
    fn mismatch_reports_first_slot() {
        let p = pre("(table, null, cup)");
        assert_eq!(
            p.mismatch(&st("(pantry, bowl, null)")),
            Some(Slot::Location)
        );
        assert_eq!(p.mismatch(&st("(table, bowl, null)")), Some(Slot::Left));
        assert_eq!(p.mismatch(&st("(table, null, null)")), Some(Slot::Right));
        assert_eq!(p.mismatch(&st("(table, null, cup)")), None);
    }

    #[test]
    fn apply_examples() {
        assert_eq!(
            apply_delta(&st("(pantry, ∅, ∅)"), &add_left("bowl")).unwrap(),
            st("(pantry, bowl, ∅)")
        );
        assert_eq!(
            apply_delta(&st("(pantry, bowl, ∅)"), &mv("pantry", "table")).unwrap(),
            st("(table, bowl, ∅)")
        );
        assert_eq!(
            apply_delta(&st("(table, cup, ∅)"), &sub_left("bowl")).unwrap_err(),
            DeltaError {
                slot: Slot::Left,
                kind: DeltaErrorKind::SubOnWrongObject
            }
        );
    }

    #[test]
    fn apply_error_kinds() {
        let err = |s: &str, d: &StateDelta| apply_delta(&st(s), d).unwrap_err().kind;
        assert_eq!(
            err("(table, ∅, ∅)", &mv("pantry", "table")),
            DeltaErrorKind::MoveFromMismatch
        );
        assert_eq!(
            err("(table, cup, ∅)", &add_left("bowl")),
            DeltaErrorKind::AddOnOccupied
        );
        assert_eq!(
            err("(table, ∅, ∅)", &sub_left("bowl")),
            DeltaErrorKind::SubOnEmpty
        );
        let right_add = StateDelta {
            right: GripperOp::Add(obj("cup")),
            ..StateDelta::identity()
        };
        assert_eq!(
            apply_delta(&st("(a, ∅, bowl)"), &right_add)
                .unwrap_err()
                .slot,
            Slot::Right
        );
    }

    #[test]
    fn implied_precondition_examples() {
        assert_eq!(mv("A", "B").implied_precondition(), pre("(A, _, _)"));
        assert_eq!(add_left("a").implied_precondition(), pre("(_, ∅, _)"));
        assert_eq!(
            StateDelta::identity().implied_precondition(),
            Precondition::any()
        );
    }

    #[test]
    fn display_forms() {
        assert_eq!(st("(pantry,bowl,null)").to_string(), "(pantry, bowl, ∅)");
        assert_eq!(pre("(_, null, cup)").to_string(), "(_, ∅, cup)");
        assert_eq!(mv("a", "b").to_string(), "(MOVE(a, b), ∅, ∅)");
        assert_eq!(sub_left("x").to_string(), "(∅, SUB(x), ∅)");
    }

    #[test]
    fn literal_rejects_malformed() {
        assert!("pantry, null, null".parse::<EmbodimentState>().is_err());
        assert!("(pantry, null)".parse::<EmbodimentState>().is_err());
        assert_eq!(
            "(pantry, _, null)".parse::<EmbodimentState>(),
            Err(LiteralError::WildcardInState)
        );
        assert_eq!(
            "(_, null, null)".parse::<EmbodimentState>(),
            Err(LiteralError::WildcardInState)
        );
    }

    #[test]
    fn json_encodings() {
        let p: Precondition =
            serde_json::from_str(r#"{"location": "_", "left": null, "right": "cup"}"#).unwrap();
        assert_eq!(p, pre("(_, ∅, cup)"));
        let d: StateDelta = serde_json::from_str(
            r#"{"scene": {"move": ["a", "b"]}, "left": {"add": "x"}, "right": {"sub": "y"}}"#,
        )
        .unwrap();
        assert_eq!(d.to_string(), "(MOVE(a, b), ADD(x), SUB(y))");
        assert_eq!(
            serde_json::to_string(&d).unwrap(),
            r#"{"scene":{"move":["a","b"]},"left":{"add":"x"},"right":{"sub":"y"}}"#
        );
        assert!(serde_json::from_str::<StateDelta>(
            r#"{"scene": {"move": ["a", "a"]}, "left": null, "right": null}"#
        )
        .is_err());
        assert!(serde_json::from_str::<EmbodimentState>(
            r#"{"location": "a", "left": "_", "right": null}"#
        )
        .is_err());
        let s: EmbodimentState =
            serde_json::from_str(r#"{"location": "a", "left": "bowl", "right": null}"#).unwrap();
        assert_eq!(s, st("(a, bowl, ∅)"));
    }

    #[test]
    fn enumerate_counts() {
        let locs = [loc("a"), loc("b"), loc("c")];
        let objs = [obj("x"), obj("y")];
        let all = EmbodimentState::enumerate(&locs, &objs);
        assert_eq!(all.len(), 27);
        assert_eq!(EmbodimentState::space_size(3, 2), 27);
        let mut sorted = all.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), 27);
    }

    // -- properties ---------------------------------------------------------

    const LOCS: [&str; 3] = ["a", "b", "c"];
    const OBJS: [&str; 2] = ["x", "y"];

    fn content() -> impl Strategy<Value = GripperContent> {
        prop_oneof![
            Just(GripperContent::Empty),
            prop::sample::select(&OBJS[..]).prop_map(|o| GripperContent::Holding(obj(o))),
        ]
    }

    fn state() -> impl Strategy<Value = EmbodimentState> {
        (prop::sample::select(&LOCS[..]), content(), content())
            .prop_map(|(l, a, b)| EmbodimentState::new(loc(l), a, b))
    }

    fn gripper_op() -> impl Strategy<Value = GripperOp> {
        prop_oneof![
            Just(GripperOp::NoOp),
            prop::sample::select(&OBJS[..]).prop_map(|o| GripperOp::Add(obj(o))),
            prop::sample::select(&OBJS[..]).prop_map(|o| GripperOp::Sub(obj(o))),
        ]
    }

    fn scene_op() -> impl Strategy<Value = SceneOp> {
        prop_oneof![
            Just(SceneOp::NoOp),
            (
                prop::sample::select(&LOCS[..]),
                prop::sample::select(&LOCS[..])
            )
                .prop_filter("distinct endpoints", |(a, b)| a != b)
                .prop_map(|(a, b)| SceneOp::Move {
                    from: loc(a),
                    to: loc(b)
                }),
        ]
    }

    fn delta() -> impl Strategy<Value = StateDelta> {
        (scene_op(), gripper_op(), gripper_op()).prop_map(|(scene, left, right)| StateDelta {
            scene,
            left,
            right,
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10_000))]

        #[test]
        fn implied_precondition_is_exact(s in state(), d in delta()) {
            prop_assert_eq!(
                matches(&s, &d.implied_precondition()),
                apply_delta(&s, &d).is_ok()
            );
        }
    }

    proptest! {
        #[test]
        fn identity_delta_is_identity(s in state()) {
            prop_assert_eq!(apply_delta(&s, &StateDelta::identity()).unwrap(), s);
        }

        #[test]
        fn wildcard_totality(s in state()) {
            prop_assert!(matches(&s, &Precondition::any()));
        }

        #[test]
        fn apply_is_deterministic(s in state(), d in delta()) {
            prop_assert_eq!(apply_delta(&s, &d), apply_delta(&s, &d));
        }

        #[test]
        fn add_then_sub_restores(s in state(), o in prop::sample::select(&OBJS[..])) {
            if let Ok(after) = apply_delta(&s, &add_left(o)) {
                prop_assert_eq!(apply_delta(&after, &sub_left(o)).unwrap(), s);
            }
        }

        #[test]
        fn move_there_and_back_restores(s in state(), to in prop::sample::select(&LOCS[..])) {
            let from = s.location.as_str().to_string();
            prop_assume!(from != to);
            let there = apply_delta(&s, &mv(&from, to)).unwrap();
            prop_assert_eq!(apply_delta(&there, &mv(to, &from)).unwrap(), s);
        }

        #[test]
        fn literal_roundtrip(s in state()) {
            prop_assert_eq!(s.to_string().parse::<EmbodimentState>().unwrap(), s.clone());
            let json = serde_json::to_string(&s).unwrap();
            prop_assert_eq!(serde_json::from_str::<EmbodimentState>(&json).unwrap(), s);
        }
    }
}
