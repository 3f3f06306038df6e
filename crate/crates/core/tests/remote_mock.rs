//! RemotePolicy against a throwaway HTTP/1.1 server on localhost.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use drawreason_core::canvas::{new_canvas, Rgba};
use drawreason_core::dsl::{AnswerValue, QuestionType};
use drawreason_core::episode::remote::{RemoteConfig, RemotePolicy};
use drawreason_core::episode::{run_episode, EpisodeConfig, Termination};
use drawreason_core::task::Task;

#[derive(Default)]
struct Stats {
    requests: AtomicUsize,
    active: AtomicUsize,
    peak: AtomicUsize,
    bodies: Mutex<Vec<String>>,
}

type Handler = dyn Fn(usize, &str) -> (u16, String) + Send + Sync;

fn read_request(r: &mut BufReader<TcpStream>) -> Option<String> {
    let mut len = 0usize;
    let mut line = String::new();
    loop {
        line.clear();
        if r.read_line(&mut line).ok()? == 0 {
            return None;
        }
        let l = line.trim_end();
        if l.is_empty() {
            break;
        }
        if let Some((k, v)) = l.split_once(':') {
            if k.eq_ignore_ascii_case("content-length") {
                len = v.trim().parse().ok()?;
            }
        }
    }
    let mut body = vec![0; len];
    r.read_exact(&mut body).ok()?;
    String::from_utf8(body).ok()
}

fn serve(handler: Arc<Handler>, delay: Duration) -> (String, Arc<Stats>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/generate", listener.local_addr().unwrap());
    let stats = Arc::new(Stats::default());
    let st = stats.clone();
    thread::spawn(move || {
        for conn in listener.incoming() {
            let Ok(conn) = conn else { break };
            let (handler, st) = (handler.clone(), st.clone());
            thread::spawn(move || {
                let mut w = conn.try_clone().unwrap();
                let mut r = BufReader::new(conn);
                while let Some(body) = read_request(&mut r) {
                    let n = st.requests.fetch_add(1, Ordering::SeqCst);
                    let now = st.active.fetch_add(1, Ordering::SeqCst) + 1;
                    st.peak.fetch_max(now, Ordering::SeqCst);
                    thread::sleep(delay);
                    let (status, text) = handler(n, &body);
                    st.bodies.lock().unwrap().push(body);
                    st.active.fetch_sub(1, Ordering::SeqCst);
                    let resp = format!(
                        "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\n\r\n{text}",
                        text.len()
                    );
                    if w.write_all(resp.as_bytes()).is_err() {
                        break;
                    }
                }
            });
        }
    });
    (url, stats)
}

fn task() -> Task {
    Task {
        id: "r1".into(),
        images: vec!["a.png".into()],
        question: "Which?".into(),
        qtype: QuestionType::Choice,
        options: None,
        answer: AnswerValue::Choice('B'),
        subtask: None,
        video: false,
        maze: None,
    }
}

fn cfg(url: &str) -> RemoteConfig {
    RemoteConfig {
        endpoint: url.into(),
        timeout_secs: 5.0,
        backoff_base_ms: 5,
        backoff_max_ms: 20,
        ..Default::default()
    }
}

fn episode(policy: &RemotePolicy) -> drawreason_core::episode::EpisodeTrace {
    let img = new_canvas(32, 32, Rgba::WHITE).unwrap();
    run_episode(policy, &task(), vec![img], &EpisodeConfig::default(), 0)
        .unwrap()
        .trace
}

#[test]
fn answer_reply_ends_episode() {
    let (url, stats) = serve(
        Arc::new(|_, _| (200, r#"{"text":"It is B.\nFinal answer: B"}"#.into())),
        Duration::ZERO,
    );
    let tr = episode(&RemotePolicy::new(cfg(&url)));
    assert_eq!(tr.termination, Termination::Answered);
    assert_eq!(tr.final_answer.unwrap().value, AnswerValue::Choice('B'));
    assert_eq!(stats.requests.load(Ordering::SeqCst), 1);
    let body: serde_json::Value = serde_json::from_str(&stats.bodies.lock().unwrap()[0]).unwrap();
    let parts = body["messages"][1]["content"].as_array().unwrap();
    assert!(parts.iter().any(|p| p["type"] == "image" && p["png_base64"].is_string()));
}

#[test]
fn server_errors_retry_then_fail() {
    let (url, stats) = serve(Arc::new(|_, _| (500, "{}".into())), Duration::ZERO);
    let tr = episode(&RemotePolicy::new(cfg(&url)));
    assert_eq!(tr.termination, Termination::PolicyError);
    assert_eq!(stats.requests.load(Ordering::SeqCst), 3);
    assert!(tr.error.unwrap().contains("3 attempt"));
}

#[test]
fn transient_error_recovers() {
    let (url, stats) = serve(
        Arc::new(|n, _| {
            if n == 0 {
                (503, "{}".into())
            } else {
                (200, r#"{"choices":[{"message":{"content":"Final answer: B"}}]}"#.into())
            }
        }),
        Duration::ZERO,
    );
    let tr = episode(&RemotePolicy::new(cfg(&url)));
    assert_eq!(tr.termination, Termination::Answered);
    assert_eq!(stats.requests.load(Ordering::SeqCst), 2);
}

#[test]
fn client_errors_are_not_retried() {
    let (url, stats) = serve(Arc::new(|_, _| (400, "bad".into())), Duration::ZERO);
    let tr = episode(&RemotePolicy::new(cfg(&url)));
    assert_eq!(tr.termination, Termination::PolicyError);
    assert_eq!(stats.requests.load(Ordering::SeqCst), 1);
}

#[test]
fn unreachable_endpoint_is_policy_error() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let c = RemoteConfig {
        max_attempts: 2,
        ..cfg(&format!("http://127.0.0.1:{port}/x"))
    };
    assert_eq!(episode(&RemotePolicy::new(c)).termination, Termination::PolicyError);
}

#[test]
fn in_flight_requests_are_bounded() {
    let (url, stats) = serve(
        Arc::new(|_, _| (200, r#"{"text":"Final answer: B"}"#.into())),
        Duration::from_millis(60),
    );
    let policy = RemotePolicy::new(RemoteConfig {
        max_in_flight: 2,
        ..cfg(&url)
    });
    thread::scope(|s| {
        for _ in 0..8 {
            s.spawn(|| assert_eq!(episode(&policy).termination, Termination::Answered));
        }
    });
    assert_eq!(stats.requests.load(Ordering::SeqCst), 8);
    let peak = stats.peak.load(Ordering::SeqCst);
    assert!((1..=2).contains(&peak), "peak concurrency {peak}");
}
