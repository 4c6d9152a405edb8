use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::mpsc;
use std::thread;

use serde_json::{json, Value};
use skillstate::graph::{load_graph, topo_view};
use skillstate::planner::{
    plan_with_verification, ExternalConfig, ExternalPlanner, FailureReason, InFlightLimit,
    LoopConfig, PlanRequest, Planner, Refusal, TaskSpec,
};
use skillstate_testkit::mini_household_json;

/// Serves one canned completion per accepted connection and reports each
/// request's headers and body.
fn serve(replies: Vec<String>) -> (String, mpsc::Receiver<(String, Value)>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1", listener.local_addr().unwrap());
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        for reply in replies {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut head = String::new();
            let mut length = 0;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if line == "\r\n" || line.is_empty() {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    length = v.trim().parse().unwrap();
                }
                head.push_str(&line);
            }
            let mut body = vec![0; length];
            reader.read_exact(&mut body).unwrap();
            tx.send((head, serde_json::from_slice(&body).unwrap()))
                .unwrap();
            let payload =
                json!({"choices": [{"message": {"role": "assistant", "content": reply}}]})
                    .to_string();
            let mut stream = stream;
            write!(
                stream,
                "HTTP/1.1 200 OK\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{}",
                payload.len(),
                payload
            )
            .unwrap();
        }
    });
    (url, rx)
}

fn task() -> TaskSpec {
    TaskSpec {
        goal_skills: vec!["place_bowl_table".parse().unwrap()],
        instruction: "Put the bowl on the table.".into(),
        initial: "(pantry, null, null)".parse().unwrap(),
    }
}

#[test]
fn request_shape_and_reply_parsing() {
    let (url, requests) = serve(vec![
        "Plan:\n<<PLAN>>\npick_bowl_pantry\nnav_pantry_to_table\nplace_bowl_table\n<<END>>".into(),
    ]);
    std::env::set_var("SKILLSTATE_TEST_TOKEN", "secret-token");
    let config = ExternalConfig {
        base_url: url,
        model: "planner-small".into(),
        timeout_secs: 5,
        api_key_env: "SKILLSTATE_TEST_TOKEN".into(),
        max_in_flight: 1,
    };
    let graph = load_graph(mini_household_json()).unwrap();
    let view = topo_view(&graph);
    let t = task();
    let mut planner = ExternalPlanner::new(config, InFlightLimit::new(1));
    let plan = planner
        .propose(&PlanRequest {
            task: &t,
            view: &view,
            state: &t.initial,
            feedback: None,
        })
        .unwrap();
    assert_eq!(plan.len(), 3);
    let (head, body) = requests.recv().unwrap();
    assert!(head.starts_with("POST /v1/chat/completions"));
    assert!(head
        .to_ascii_lowercase()
        .contains("authorization: bearer secret-token"));
    assert_eq!(body["model"], "planner-small");
    assert_eq!(body["temperature"], 0);
    assert_eq!(body["messages"][0]["role"], "system");
    assert_eq!(body["messages"][1]["role"], "user");
    assert!(body["messages"][1]["content"]
        .as_str()
        .unwrap()
        .contains("<<PLAN>>"));
}

#[test]
fn hallucinated_ids_feed_back_into_the_loop() {
    let (url, requests) = serve(vec![
        "<<PLAN>>\nteleport_bowl\n<<END>>".into(),
        "<<PLAN>>\npick_bowl_pantry\nnav_pantry_to_table\nplace_bowl_table\n<<END>>".into(),
    ]);
    let config = ExternalConfig {
        base_url: url,
        timeout_secs: 5,
        ..ExternalConfig::default()
    };
    let graph = load_graph(mini_household_json()).unwrap();
    let mut planner = ExternalPlanner::new(config, InFlightLimit::new(2));
    let outcome =
        plan_with_verification(&mut planner, &graph, &task(), &LoopConfig::default()).unwrap();
    assert_eq!(outcome.attempts, 2);
    assert!(outcome.transcript[0].parse_error.is_some());
    let _ = requests.recv().unwrap();
    let (_, second) = requests.recv().unwrap();
    let prompt = second["messages"][1]["content"].as_str().unwrap();
    assert!(prompt.contains("teleport_bowl"), "{prompt}");
}

#[test]
fn unreachable_endpoint_is_a_transport_failure() {
    let port = {
        let l = TcpListener::bind("127.0.0.1:0").unwrap();
        l.local_addr().unwrap().port()
    };
    let config = ExternalConfig {
        base_url: format!("http://127.0.0.1:{port}/v1"),
        timeout_secs: 2,
        ..ExternalConfig::default()
    };
    let graph = load_graph(mini_household_json()).unwrap();
    let mut planner = ExternalPlanner::new(config, InFlightLimit::new(1));
    let failed =
        plan_with_verification(&mut planner, &graph, &task(), &LoopConfig::default()).unwrap_err();
    assert!(
        matches!(failed.reason, FailureReason::Transport(_)),
        "{:?}",
        failed.reason
    );
    let view = topo_view(&graph);
    let t = task();
    let refusal = planner.propose(&PlanRequest {
        task: &t,
        view: &view,
        state: &t.initial,
        feedback: None,
    });
    assert!(matches!(refusal, Err(Refusal::Transport(_))));
}
