//! Skill-state graph planning: an embodiment-state algebra, a graph of
//! semantic skills annotated with preconditions and state deltas, plan
//! verification, graph-constrained planning with a verify-and-retry loop, and
//! a seeded closed-loop execution simulator with failure injection.

pub mod bench;
pub mod graph;
pub mod ids;
pub mod planner;
pub mod sim;
pub mod state;
pub mod verify;

pub use graph::{SemanticSkill, SkillStateGraph};
pub use ids::{ActionSkillId, LocationId, ObjectId, SkillId};
pub use state::{
    apply_delta, matches, EmbodimentState, GripperContent, GripperOp, Precondition, SceneOp, Side,
    Slot, StateDelta,
};
