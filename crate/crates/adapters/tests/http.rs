use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use segchain_adapters::wire::{FramesPayload, GenerateRequest, PropagateRequest};
use segchain_adapters::{HttpPolicy, HttpTracker};
use segchain_core::adapters::{render_round1, render_round2};
use segchain_core::rng::substream;
use segchain_core::rollout::{
    run_group, run_rollout, AdapterError, EpisodeInput, GroundTruth, Policy, PolicyRequest, Role,
    RolloutConfig, TrackRequest, Tracker, Turn, VideoSource,
};
use segchain_core::{BBox, BinaryMask, FrameSize};

type Handler = dyn Fn(usize, &str) -> (u16, String) + Send + Sync;

/// Minimal HTTP/1.1 server: one request per connection.
struct TestServer {
    url: String,
    calls: Arc<AtomicUsize>,
    bodies: Arc<Mutex<Vec<String>>>,
}

fn read_request(stream: &mut TcpStream) -> Option<String> {
    let mut reader = BufReader::new(stream.try_clone().ok()?);
    let mut length = 0usize;
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line).ok()? == 0 {
            return None;
        }
        let line = line.trim_end();
        if line.is_empty() {
            break;
        }
        if let Some((k, v)) = line.split_once(':') {
            if k.eq_ignore_ascii_case("content-length") {
                length = v.trim().parse().ok()?;
            }
        }
    }
    let mut body = vec![0u8; length];
    reader.read_exact(&mut body).ok()?;
    String::from_utf8(body).ok()
}

fn serve(handler: Box<Handler>) -> TestServer {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    let calls = Arc::new(AtomicUsize::new(0));
    let bodies = Arc::new(Mutex::new(Vec::new()));
    let handler: Arc<Handler> = Arc::from(handler);
    let (c, b) = (calls.clone(), bodies.clone());
    thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { continue };
            let (c, b, handler) = (c.clone(), b.clone(), handler.clone());
            thread::spawn(move || {
                let Some(body) = read_request(&mut stream) else {
                    return;
                };
                let index = c.fetch_add(1, Ordering::SeqCst);
                b.lock().unwrap().push(body.clone());
                let (status, reply) = handler(index, &body);
                let response = format!(
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{reply}",
                    reply.len()
                );
                let _ = stream.write_all(response.as_bytes());
            });
        }
    });
    TestServer { url, calls, bodies }
}

fn echo_server() -> TestServer {
    serve(Box::new(|_, body| {
        let req: GenerateRequest = serde_json::from_str(body).unwrap();
        (200, serde_json::json!({ "text": req.prompt }).to_string())
    }))
}

fn request(prompt: &str) -> PolicyRequest {
    PolicyRequest {
        round: 1,
        prompt: prompt.into(),
        images: vec![],
        history: vec![Turn {
            role: Role::User,
            text: "earlier".into(),
        }],
    }
}

fn unreachable_url() -> String {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    drop(listener);
    url
}

#[test]
fn echo_returns_server_payload() {
    let server = echo_server();
    let policy = HttpPolicy::new(&server.url).unwrap();
    let text = policy
        .generate(&request("hello there"), &mut substream(0, "t", 0))
        .unwrap();
    assert_eq!(text, "hello there");
    let sent: GenerateRequest = serde_json::from_str(&server.bodies.lock().unwrap()[0]).unwrap();
    assert_eq!(sent.round, 1);
    assert_eq!(sent.history[0].text, "earlier");
    assert!(sent.images.is_empty());
}

#[test]
fn retries_through_two_server_errors() {
    let server = serve(Box::new(|i, _| {
        if i < 2 {
            (500, "{}".into())
        } else {
            (200, r#"{"text":"ok"}"#.into())
        }
    }));
    let policy = HttpPolicy::new(&server.url).unwrap();
    assert_eq!(
        policy
            .generate(&request("x"), &mut substream(0, "t", 0))
            .unwrap(),
        "ok"
    );
    assert_eq!(server.calls.load(Ordering::SeqCst), 3);
}

#[test]
fn gives_up_after_two_retries() {
    let server = serve(Box::new(|_, _| (503, "busy".into())));
    let policy = HttpPolicy::new(&server.url).unwrap();
    let err = policy
        .generate(&request("x"), &mut substream(0, "t", 0))
        .unwrap_err();
    assert_eq!(
        err,
        AdapterError::Http {
            status: 503,
            body: "busy".into()
        }
    );
    assert_eq!(server.calls.load(Ordering::SeqCst), 3);
}

#[test]
fn client_errors_are_not_retried() {
    let server = serve(Box::new(|_, _| (400, "bad".into())));
    let policy = HttpPolicy::new(&server.url).unwrap();
    assert!(policy
        .generate(&request("x"), &mut substream(0, "t", 0))
        .is_err());
    assert_eq!(server.calls.load(Ordering::SeqCst), 1);
}

#[test]
fn malformed_body_is_a_protocol_error() {
    let server = serve(Box::new(|_, _| (200, r#"{"txt":"?"}"#.into())));
    let policy = HttpPolicy::new(&server.url).unwrap();
    let err = policy
        .generate(&request("x"), &mut substream(0, "t", 0))
        .unwrap_err();
    assert!(matches!(err, AdapterError::Protocol(_)), "{err}");
}

#[test]
fn unreachable_endpoint_fails_within_budget() {
    let policy = HttpPolicy::with_options(&unreachable_url(), Duration::from_secs(2), 2).unwrap();
    let start = Instant::now();
    let err = policy
        .generate(&request("x"), &mut substream(0, "t", 0))
        .unwrap_err();
    assert!(
        matches!(err, AdapterError::Transport(_) | AdapterError::Timeout(_)),
        "{err}"
    );
    assert!(start.elapsed() < Duration::from_secs(10));
}

#[test]
fn slow_server_times_out() {
    let server = serve(Box::new(|_, _| {
        thread::sleep(Duration::from_millis(1500));
        (200, r#"{"text":"late"}"#.into())
    }));
    let policy = HttpPolicy::with_options(&server.url, Duration::from_millis(200), 0).unwrap();
    let err = policy
        .generate(&request("x"), &mut substream(0, "t", 0))
        .unwrap_err();
    assert_eq!(err, AdapterError::Timeout(200));
}

fn video(frame_paths: Option<Vec<std::path::PathBuf>>) -> VideoSource {
    VideoSource {
        id: "clip".into(),
        size: FrameSize::new(840, 840).unwrap(),
        frame_count: 16,
        fps: 4.0,
        frame_paths,
    }
}

#[test]
fn unreachable_policy_gives_failed_zero_reward_trace() {
    let policy = HttpPolicy::with_options(&unreachable_url(), Duration::from_secs(2), 0).unwrap();
    let ep = EpisodeInput::uniform(video(None), "which one?", 16).unwrap();
    let gt = GroundTruth::from_boxes(vec![Some(BBox::new(0, 0, 10, 10).unwrap()); 16]);
    let trace = run_rollout(
        &ep,
        &policy,
        &RolloutConfig::default(),
        Some(&gt),
        &mut substream(0, "t", 0),
    )
    .unwrap();
    assert_eq!(trace.total_reward(), 0.0);
    assert!(trace.failure.is_some());
}

#[test]
fn full_rollout_over_http_with_images() {
    let dir = tempfile::tempdir().unwrap();
    let paths: Vec<_> = (0..16)
        .map(|i| {
            let p = dir.path().join(format!("{i:03}.png"));
            image::RgbImage::from_pixel(840, 840, image::Rgb([i as u8, 0, 0]))
                .save(&p)
                .unwrap();
            p
        })
        .collect();
    let gt_box = BBox::new(100, 100, 300, 300).unwrap();
    let server = serve(Box::new(move |_, body| {
        let req: GenerateRequest = serde_json::from_str(body).unwrap();
        let text = match req.round {
            1 => {
                assert_eq!(req.images.len(), 16);
                render_round1(5, "red square")
            }
            _ => {
                assert_eq!(req.images.len(), 1);
                assert_eq!(req.history.len(), 2);
                render_round2(&gt_box)
            }
        };
        (200, serde_json::json!({ "text": text }).to_string())
    }));
    let policy = HttpPolicy::new(&server.url).unwrap();
    let ep = EpisodeInput::uniform(video(Some(paths)), "the red one", 16).unwrap();
    let gt = GroundTruth::from_boxes(vec![Some(gt_box); 16]);
    let group = run_group(&ep, &policy, &RolloutConfig::default(), Some(&gt), 4, 0, 0).unwrap();
    assert_eq!(group.rewards, vec![3.0; 4]);
    assert_eq!(server.calls.load(Ordering::SeqCst), 8);
}

#[test]
fn tracker_by_reference_and_inline() {
    let size = FrameSize::new(8, 6).unwrap();
    let gt = BinaryMask::from_box(size, &BBox::new(1, 1, 4, 4).unwrap());
    let rle = serde_json::to_value(gt.to_rle()).unwrap();
    let server = serve(Box::new(move |_, body| {
        let req: PropagateRequest = serde_json::from_str(body).unwrap();
        let n = match req.frames {
            FramesPayload::Images(f) => f.len(),
            FramesPayload::Reference { .. } => 3,
        };
        (
            200,
            serde_json::json!({ "masks": vec![rle.clone(); n] }).to_string(),
        )
    }));
    let tracker = HttpTracker::new(&server.url).unwrap();
    let mut source = VideoSource {
        id: "v".into(),
        size,
        frame_count: 3,
        fps: 1.0,
        frame_paths: None,
    };
    let masks = tracker
        .propagate(&TrackRequest {
            video: &source,
            query_index: 0,
            keyframe: 1,
            bbox: BBox::new(1, 1, 4, 4).unwrap(),
        })
        .unwrap();
    assert_eq!(masks.len(), 3);
    assert_eq!(masks.frames()[2], gt);
    let sent: serde_json::Value = serde_json::from_str(&server.bodies.lock().unwrap()[0]).unwrap();
    assert_eq!(sent["frames"]["manifest_ref"]["video_id"], "v");
    assert_eq!(sent["bbox"], serde_json::json!([1, 1, 4, 4]));

    // two frame files for a three-frame video: the reply is one mask short
    let dir = tempfile::tempdir().unwrap();
    let paths: Vec<_> = (0..2)
        .map(|i| {
            let p = dir.path().join(format!("{i}.png"));
            image::GrayImage::new(8, 6).save(&p).unwrap();
            p
        })
        .collect();
    source.frame_paths = Some(paths);
    let err = tracker
        .propagate(&TrackRequest {
            video: &source,
            query_index: 0,
            keyframe: 0,
            bbox: BBox::new(1, 1, 4, 4).unwrap(),
        })
        .unwrap_err();
    assert!(matches!(err, AdapterError::Protocol(_)), "{err}");
}
