use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use axum::extract::State;
use axum::http::StatusCode;
use axum::routing::post;
use axum::{Json, Router};
use langarm_core::action_space::LowLevelAction;
use langarm_core::endpoint::{ChatEndpoint, EndpointError};
use langarm_core::policy_control::{llm_advisor_client, GuidanceVerdict};
use langarm_core::sim_world::{init_world, render, TaskSpec};
use langarm_core::teleop::{llm_translator_client, translate_supervision};
use serde_json::{json, Value};

#[derive(Default)]
struct Mock {
    calls: AtomicUsize,
    prompts: std::sync::Mutex<Vec<Value>>,
}

async fn reply(State(m): State<Arc<Mock>>, Json(body): Json<Value>) -> Json<Value> {
    m.calls.fetch_add(1, Ordering::SeqCst);
    let prompt = body["prompt"].as_str().unwrap_or_default().to_string();
    m.prompts.lock().unwrap().push(body);
    let text = if prompt.contains("Appropriate") {
        r#"{"Appropriate": ["move arm to the left"], "Inappropriate": ["move arm back"]}"#
    } else {
        "Command: [0.0, -0.07, 0.0, 0.0, 0.0, 0.0, 0.0]"
    };
    Json(json!({ "text": text }))
}

/// Fails every first attempt so the client's single retry is exercised.
async fn flaky(State(m): State<Arc<Mock>>) -> Result<Json<Value>, StatusCode> {
    if m.calls.fetch_add(1, Ordering::SeqCst) % 2 == 0 {
        return Err(StatusCode::SERVICE_UNAVAILABLE);
    }
    Ok(Json(json!({ "text": "[0.1, 0, 0, 0, 0, 0, 0]" })))
}

async fn down() -> StatusCode {
    StatusCode::INTERNAL_SERVER_ERROR
}

async fn garbage() -> &'static str {
    "not json"
}

fn serve(mock: Arc<Mock>) -> String {
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build().unwrap();
    let listener = rt.block_on(tokio::net::TcpListener::bind("127.0.0.1:0")).unwrap();
    let addr = listener.local_addr().unwrap();
    let app = Router::new()
        .route("/complete", post(reply))
        .route("/flaky", post(flaky))
        .route("/down", post(down))
        .route("/garbage", post(garbage))
        .with_state(mock);
    std::thread::spawn(move || rt.block_on(async { axum::serve(listener, app).await.unwrap() }));
    format!("http://{addr}")
}

#[test]
fn translator_and_advisor_use_the_endpoint() {
    let mock = Arc::new(Mock::default());
    let base = serve(mock.clone());
    let ep = ChatEndpoint::new(format!("{base}/complete"));

    let a = llm_translator_client("scoot over to the right a touch", &ep);
    assert_eq!(a, LowLevelAction([0.0, -0.07, 0.0, 0.0, 0.0, 0.0, 0.0, -1.0]));
    // Gripper verbs never leave the process.
    let calls = mock.calls.load(Ordering::SeqCst);
    llm_translator_client("close the gripper", &ep);
    assert_eq!(mock.calls.load(Ordering::SeqCst), calls);

    let world = init_world(&TaskSpec::pick(), 3).unwrap();
    let v = llm_advisor_client(&render(&world), &world.instruction, &ep, 2, 0.7);
    assert_eq!(
        v,
        GuidanceVerdict {
            appropriate: vec![12, 13, 14, 15],
            inappropriate: vec![0, 1, 2, 3],
            step: 2,
            alpha: 0.7,
        }
    );
    let prompts = mock.prompts.lock().unwrap();
    let advisor = prompts.last().unwrap();
    assert!(advisor["prompt"].as_str().unwrap().contains(&world.instruction));
    assert!(!advisor["image_png_base64"].as_str().unwrap().is_empty());
    assert!(prompts[0].get("image_png_base64").is_none());
}

#[test]
fn failures_retry_once_then_fall_back() {
    let mock = Arc::new(Mock::default());
    let base = serve(mock.clone());

    let flaky = ChatEndpoint::new(format!("{base}/flaky"));
    assert_eq!(flaky.complete("p", None).unwrap(), "[0.1, 0, 0, 0, 0, 0, 0]");
    assert_eq!(mock.calls.load(Ordering::SeqCst), 2);

    let down = ChatEndpoint::new(format!("{base}/down"));
    assert!(matches!(down.complete("p", None), Err(EndpointError::Status(500))));
    let text = "move the arm to the left by 5cm";
    assert_eq!(llm_translator_client(text, &down), translate_supervision(text));

    let garbage = ChatEndpoint::new(format!("{base}/garbage"));
    assert!(matches!(garbage.complete("p", None), Err(EndpointError::Body(_))));
    let world = init_world(&TaskSpec::point(), 1).unwrap();
    let v = llm_advisor_client(&render(&world), &world.instruction, &garbage, 1, 0.7);
    assert_eq!(v, GuidanceVerdict::empty(1, 0.7));

    let mut unreachable = ChatEndpoint::new("http://127.0.0.1:9/complete");
    unreachable.timeout = Duration::from_millis(300);
    assert!(matches!(unreachable.complete("p", None), Err(EndpointError::Transport(_))));
}
