use std::path::Path;

use skillstate::bench::{load_graph_file, load_scenario};
use skillstate::graph::SkillCategory;
use skillstate::graph::{prune_view, topo_view, PruneDepth};
use skillstate::planner::search_plan;
use skillstate_testkit::fixture_path;

fn graph(name: &str) -> skillstate::SkillStateGraph {
    load_graph_file(&fixture_path(name)).unwrap().0
}

#[test]
fn real_world_library_shape() {
    let g = graph("real_world.json");
    let count = |c: SkillCategory| g.skills().values().filter(|s| s.category == c).count();
    assert_eq!(g.skills().len(), 16);
    assert_eq!(count(SkillCategory::Pick), 6);
    assert_eq!(count(SkillCategory::Place), 6);
    assert_eq!(count(SkillCategory::Navigate), 4);
    assert_eq!(g.actions().len(), 10);
    assert!(g.skill("nav_pantry_to_cupboard").is_none());
    for skill in g.skills().values() {
        for action in &skill.action_refs {
            assert!(g.actions().contains_key(action));
        }
    }
}

#[test]
fn chain_task_takes_ten_steps() {
    let scenario = load_scenario(&fixture_path("chain10_scenario.json")).unwrap();
    let plan = search_plan(&scenario.graph, &scenario.file.tasks[0].spec()).unwrap();
    assert_eq!(plan.len(), 10);
}

#[test]
fn half_reachable_prunes_half() {
    let g = graph("half_reachable.json");
    let start = "(kitchen, null, null)".parse().unwrap();
    assert_eq!(topo_view(&g).nodes.len(), 8);
    assert_eq!(prune_view(&g, &start, PruneDepth::Closure).nodes.len(), 4);
}

#[test]
fn scenarios_load() {
    for name in [
        "mini_scenario.json",
        "real_world_scenario.json",
        "chain10_scenario.json",
    ] {
        let scenario = load_scenario(&fixture_path(name)).unwrap();
        for task in &scenario.file.tasks {
            search_plan(&scenario.graph, &task.spec()).unwrap();
        }
    }
}

#[test]
fn fixture_graphs_roundtrip() {
    for name in [
        "mini_household.json",
        "real_world.json",
        "chain10.json",
        "half_reachable.json",
    ] {
        let g = graph(name);
        let again = skillstate::graph::load_graph(&g.to_json()).unwrap();
        assert_eq!(g, again, "{name}");
    }
    assert!(Path::new(&fixture_path("plan_feasible.txt")).exists());
}
