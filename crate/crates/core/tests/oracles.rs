use proptest::prelude::*;
use rand::Rng;
use skillstate::graph::{load_graph, prune_view, topo_view, PruneDepth};
use skillstate::planner::{
    plan_with_verification, search_from, serialize_prompt, AdversarialPlanner, AdversaryMode,
    LoopConfig, SearchError, SearchOptions, TaskSpec,
};
use skillstate::verify::{verify, Plan};
use skillstate::{EmbodimentState, SkillId, SkillStateGraph};
use skillstate_testkit::{
    random_graph_json, random_state, state_literal, ChaCha8Rng, RefModel, RefState, SeedableRng,
};

fn world(seed: u64) -> (SkillStateGraph, RefModel, ChaCha8Rng) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let text = random_graph_json(&mut rng, 8, 4, 3);
    let graph = load_graph(&text).expect("generated graphs are valid");
    (graph, RefModel::from_json(&text), rng)
}

fn to_state(s: &RefState) -> EmbodimentState {
    state_literal(s).parse().unwrap()
}

fn from_state(s: &EmbodimentState) -> RefState {
    let hand = |g: &skillstate::GripperContent| g.held().map(|o| o.to_string());
    (s.location.to_string(), hand(&s.left), hand(&s.right))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn verifier_agrees_with_reference(seed in any::<u64>(), len in 0usize..7) {
        let (graph, model, mut rng) = world(seed);
        let start = random_state(&mut rng, &model);
        let ids: Vec<&str> = model.skills.iter().map(|s| s.id.as_str()).collect();
        let seq: Vec<&str> = (0..len).map(|_| ids[rng.gen_range(0..ids.len())]).collect();
        let report = verify(&graph, &to_state(&start), &Plan::new(seq.iter().copied()), false);
        match model.simulate(&start, &seq) {
            Ok(chain) => {
                prop_assert!(report.is_feasible());
                let got: Vec<RefState> = report.state_chain.iter().map(from_state).collect();
                prop_assert_eq!(got, chain);
            }
            Err(index) => {
                prop_assert!(!report.is_feasible());
                prop_assert_eq!(report.conflict.unwrap().index, index);
                prop_assert_eq!(report.state_chain.len(), index + 1);
            }
        }
    }

    #[test]
    fn derived_edges_match_witnesses(seed in any::<u64>()) {
        let (graph, model, _) = world(seed);
        let derived: std::collections::BTreeSet<(String, String)> = graph
            .edges()
            .iter()
            .map(|(a, b)| (a.to_string(), b.to_string()))
            .collect();
        prop_assert_eq!(derived, model.brute_edges());
    }

    #[test]
    fn search_is_shortest_and_lexicographic(seed in any::<u64>(), n_goals in 1usize..3) {
        let (graph, model, mut rng) = world(seed);
        let start = random_state(&mut rng, &model);
        let ids: Vec<&str> = model.skills.iter().map(|s| s.id.as_str()).collect();
        let goals: Vec<&str> = (0..n_goals).map(|_| ids[rng.gen_range(0..ids.len())]).collect();
        let goal_ids: Vec<SkillId> = goals.iter().map(|g| SkillId::new(*g).unwrap()).collect();
        let found = search_from(&graph, &to_state(&start), &goal_ids, &SearchOptions::default());
        let brute = model.shortest_plan(&start, &goals, None, 7);
        match (found, brute) {
            (Ok(plan), Some(expected)) => {
                prop_assert_eq!(&plan.steps, &expected);
                prop_assert!(verify(&graph, &to_state(&start), &plan, false).is_feasible());
                prop_assert!(verify(&graph, &to_state(&start), &plan, true).is_feasible());
            }
            (Ok(plan), None) => prop_assert!(plan.len() > 7),
            (Err(SearchError::NoPlan), brute) => prop_assert!(brute.is_none()),
            (Err(e), _) => prop_assert!(false, "{e}"),
        }
    }

    #[test]
    fn prune_matches_product_space(seed in any::<u64>(), depth in 1usize..5) {
        let (graph, model, mut rng) = world(seed);
        let start = random_state(&mut rng, &model);
        for (d, limit) in [(PruneDepth::steps(depth).unwrap(), Some(depth)), (PruneDepth::Closure, None)] {
            let view = prune_view(&graph, &to_state(&start), d);
            let got: std::collections::BTreeSet<String> = view.node_ids().map(|i| i.to_string()).collect();
            prop_assert_eq!(got, model.product_reachable(&start, limit));
        }
    }

    #[test]
    fn pruned_prompt_never_longer(seed in any::<u64>(), depth in 1usize..4) {
        let (graph, model, mut rng) = world(seed);
        let start = to_state(&random_state(&mut rng, &model));
        let goal = graph.skills().keys().next().unwrap().clone();
        let task = TaskSpec { goal_skills: vec![goal], instruction: "tidy up".into(), initial: start.clone() };
        let full = serialize_prompt(&task, &topo_view(&graph), &start, None);
        for d in [PruneDepth::steps(depth).unwrap(), PruneDepth::Closure] {
            let view = prune_view(&graph, &start, d);
            let pruned = serialize_prompt(&task, &view, &start, None);
            prop_assert!(pruned.len() <= full.len());
            if view.nodes.len() < graph.skills().len() {
                prop_assert!(pruned.len() < full.len());
            }
        }
    }

    #[test]
    fn loop_never_returns_infeasible(seed in any::<u64>(), rate in 0.0f64..1.0, retries in 0usize..3) {
        let (graph, model, mut rng) = world(seed);
        let start = to_state(&random_state(&mut rng, &model));
        let goal = graph.skills().keys().nth(rng.gen_range(0..graph.skills().len())).unwrap().clone();
        let task = TaskSpec { goal_skills: vec![goal], instruction: String::new(), initial: start.clone() };
        let mut planner = AdversarialPlanner::new(&graph, AdversaryMode::Random(rate), ChaCha8Rng::seed_from_u64(seed));
        let config = LoopConfig { max_retries: retries, ..LoopConfig::default() };
        if let Ok(outcome) = plan_with_verification(&mut planner, &graph, &task, &config) {
            prop_assert!(verify(&graph, &start, &outcome.plan, false).is_feasible());
            prop_assert!(outcome.attempts <= retries + 1);
            prop_assert_eq!(outcome.transcript.iter().filter(|a| a.accepted).count(), 1);
        }
    }
}
