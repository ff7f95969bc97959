use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::thread;

use segchain_core::adapters::{render_round1, render_round2};
use segchain_core::curation::{write_manifest, Manifest, QueryRecord, VideoManifest};
use segchain_core::{BBox, BinaryMask, FrameSize};

fn segchain(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_segchain"))
        .args(args)
        .env_remove("SEGCHAIN_POLICY_URL")
        .env_remove("SEGCHAIN_TRACKER_URL")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn blob_video(id: &str, size: FrameSize, boxes: &[Option<BBox>]) -> VideoManifest {
    VideoManifest {
        id: id.into(),
        fps: 4.0,
        num_frames: boxes.len(),
        width: size.width(),
        height: size.height(),
        frames: None,
        queries: vec![QueryRecord {
            text: format!("where is {id}?"),
            masks: boxes
                .iter()
                .map(|b| b.map(|b| BinaryMask::from_box(size, &b).to_rle()))
                .collect(),
        }],
    }
}

fn write(dir: &Path, name: &str, m: &Manifest) -> PathBuf {
    let path = dir.join(name);
    write_manifest(m, &path).unwrap();
    path
}

#[test]
fn parse_reports_status() {
    let dir = tempfile::tempdir().unwrap();
    let good = dir.path().join("good.txt");
    std::fs::write(&good, render_round1(3, "the cat")).unwrap();
    let out = segchain(&["parse", "--input", p(&good)]);
    assert!(out.status.success());
    let report: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(report["parse"]["status"], "succ");
    assert_eq!(report["parse"]["keyframe"], 3);

    let bad = dir.path().join("bad.txt");
    std::fs::write(&bad, "<answer>{\"bbox\": [1, 2]}</answer>").unwrap();
    let out = segchain(&["parse", "--round", "2", "--input", p(&bad)]);
    assert!(out.status.success());
    let report: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(report["parse"]["status"], "fail");
    assert_eq!(report["parse"]["checklist"]["think_block_present"], false);
    assert_eq!(report["parse"]["checklist"]["payload_parses"], true);

    let out = segchain(&["parse", "--input", p(&dir.path().join("missing.txt"))]);
    assert!(!out.status.success());
    assert!(out.stdout.is_empty());
}

#[test]
fn train_toy_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out_dir = dir.path().join(name);
        let out = segchain(&[
            "train-toy",
            "--seed",
            "3",
            "--steps",
            "150",
            "--output",
            p(&out_dir),
            "--svg",
        ]);
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
        out_dir
    };
    let (a, b) = (run("a"), run("b"));
    let csv_a = std::fs::read(a.join("train_log.csv")).unwrap();
    assert_eq!(csv_a, std::fs::read(b.join("train_log.csv")).unwrap());
    assert_eq!(
        std::fs::read(a.join("metrics.json")).unwrap(),
        std::fs::read(b.join("metrics.json")).unwrap()
    );
    let text = String::from_utf8(csv_a).unwrap();
    assert!(text.starts_with("step,mean_reward,mean_r_f,mean_r_t,mean_r_s,kl,frame_acc,box_acc\n"));
    assert_eq!(text.lines().count(), 151);
    assert!(std::fs::read_to_string(a.join("reward.svg"))
        .unwrap()
        .contains("<polyline"));
}

#[test]
fn train_toy_config_file_and_validation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"steps": 0, "temporal_mode": "binary"}"#).unwrap();
    let out = segchain(&["train-toy", "--config", p(&cfg)]);
    assert!(out.status.success());
    assert_eq!(
        stdout(&out),
        "step,mean_reward,mean_r_f,mean_r_t,mean_r_s,kl,frame_acc,box_acc\n"
    );

    let out = segchain(&["train-toy", "--beta=-1", "--steps", "1"]);
    assert!(!out.status.success());
    let out = segchain(&["train-toy", "--temporal-mode", "sometimes"]);
    assert!(!out.status.success());
}

#[test]
fn eval_gt_against_itself_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let size = FrameSize::new(32, 24).unwrap();
    let m = Manifest {
        videos: vec![
            blob_video("a", size, &[Some(BBox::new(2, 2, 10, 10).unwrap()), None]),
            blob_video("b", size, &[Some(BBox::new(5, 1, 30, 20).unwrap()); 2]),
        ],
    };
    let gt = write(dir.path(), "gt.json", &m);
    let report = dir.path().join("report.json");
    let out = segchain(&[
        "eval",
        "--input",
        p(&gt),
        "--gt",
        p(&gt),
        "--output",
        p(&report),
    ]);
    assert!(out.status.success());
    assert!(stdout(&out).contains("| **All** | 100.0 | 100.0 | 100.0 |"));
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(report).unwrap()).unwrap();
    assert_eq!(json["j_and_f"], 100.0);

    let other = Manifest {
        videos: vec![
            blob_video("a", FrameSize::new(16, 24).unwrap(), &[None, None]),
            blob_video("b", size, &[None, None]),
        ],
    };
    let pred = write(dir.path(), "pred.json", &other);
    let out = segchain(&["eval", "--input", p(&pred), "--gt", p(&gt)]);
    assert!(!out.status.success());
}

#[test]
fn curate_with_oracle_tracker_keeps_everything() {
    let dir = tempfile::tempdir().unwrap();
    let size = FrameSize::new(20, 20).unwrap();
    let m = Manifest {
        videos: vec![blob_video(
            "a",
            size,
            &[Some(BBox::new(2, 2, 9, 9).unwrap()), None],
        )],
    };
    let input = write(dir.path(), "in.json", &m);
    let curated = dir.path().join("out.json");
    let out = segchain(&[
        "curate",
        "--input",
        p(&input),
        "--output",
        p(&curated),
        "--tracker",
        "oracle",
    ]);
    assert!(out.status.success());
    assert_eq!(
        stdout(&out),
        "video_id,query,mean_iou,decision,threshold\na,0,1.000000,keep,0.6\n"
    );
    assert_eq!(
        std::fs::read_to_string(&curated).unwrap(),
        std::fs::read_to_string(&input).unwrap()
    );

    let out = segchain(&["curate", "--input", p(&input), "--output", p(&curated)]);
    assert!(!out.status.success());
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

/// Answers round 1 with frame 0 and round 2 with a fixed box.
fn scripted_server(bbox: BBox) -> String {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { continue };
            thread::spawn(move || {
                let Some(body) = read_request(&mut stream) else {
                    return;
                };
                let req: serde_json::Value = serde_json::from_str(&body).unwrap();
                let text = if req["round"] == 1 {
                    render_round1(0, "the box")
                } else {
                    render_round2(&bbox)
                };
                let reply = serde_json::json!({ "text": text }).to_string();
                let _ = write!(
                    stream,
                    "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{reply}",
                    reply.len()
                );
            });
        }
    });
    url
}

fn strip_timing(jsonl: &str) -> Vec<serde_json::Value> {
    jsonl
        .lines()
        .map(|l| {
            let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
            v["trace"].as_object_mut().unwrap().remove("timing");
            v
        })
        .collect()
}

#[test]
fn rollout_then_score_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let size = FrameSize::new(420, 280).unwrap();
    let target = BBox::new(42, 28, 126, 112).unwrap();
    let mut video = blob_video("clip", size, &[Some(target); 4]);
    video.frames = Some(
        (0..4)
            .map(|i| {
                let path = dir.path().join(format!("{i}.png"));
                image::RgbImage::new(420, 280).save(&path).unwrap();
                path
            })
            .collect(),
    );
    let manifest = write(
        dir.path(),
        "m.json",
        &Manifest {
            videos: vec![video],
        },
    );
    // the policy answers in 840x840 coordinates: x * 2, y * 3
    let url = scripted_server(BBox::new(84, 84, 252, 336).unwrap());
    let run = |name: &str| {
        let traces = dir.path().join(name);
        let out = segchain(&[
            "rollout",
            "--input",
            p(&manifest),
            "--policy-url",
            &url,
            "--group-size",
            "3",
            "--frames",
            "4",
            "--output",
            p(&traces),
        ]);
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
        traces
    };
    let (a, b) = (run("a.jsonl"), run("b.jsonl"));
    let (ta, tb) = (
        std::fs::read_to_string(&a).unwrap(),
        std::fs::read_to_string(&b).unwrap(),
    );
    assert_eq!(ta.lines().count(), 3);
    assert_eq!(strip_timing(&ta), strip_timing(&tb));
    let first = &strip_timing(&ta)[0];
    assert_eq!(first["trace"]["reward"]["total"], 3.0);
    assert_eq!(
        first["trace"]["bbox_original"],
        serde_json::json!([42, 28, 126, 112])
    );

    let out = segchain(&["score", "--input", p(&a), "--gt", p(&manifest)]);
    assert!(out.status.success());
    let report: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(report["mean_total"], 3.0);

    // a round-1 failure scores r_f only
    let mut broken: serde_json::Value = serde_json::from_str(ta.lines().next().unwrap()).unwrap();
    broken["trace"]["y1"] = "<think>hm</think> frame 0".into();
    broken["trace"]["y2"] = serde_json::Value::Null;
    let broken_path = dir.path().join("broken.jsonl");
    std::fs::write(&broken_path, format!("{broken}\n")).unwrap();
    let out = segchain(&["score", "--input", p(&broken_path), "--gt", p(&manifest)]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let report: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    let reward = &report["records"][0]["reward"];
    assert_eq!(reward["total"], reward["r_f"]);
    assert_eq!(reward["r_f"], 0.25);

    // a trace for a video the manifest does not know
    broken["video_id"] = "elsewhere".into();
    std::fs::write(&broken_path, format!("{broken}\n")).unwrap();
    let out = segchain(&["score", "--input", p(&broken_path), "--gt", p(&manifest)]);
    assert!(!out.status.success());
}

#[test]
fn rollout_failures_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let size = FrameSize::new(420, 280).unwrap();
    let m = Manifest {
        videos: vec![blob_video(
            "clip",
            size,
            &[Some(BBox::new(0, 0, 9, 9).unwrap()); 2],
        )],
    };
    let manifest = write(dir.path(), "m.json", &m);
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let dead = format!("http://{}", listener.local_addr().unwrap());
    drop(listener);
    let out = segchain(&[
        "rollout",
        "--input",
        p(&manifest),
        "--policy-url",
        &dead,
        "--group-size",
        "2",
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("failed"));

    let out = segchain(&[
        "rollout",
        "--input",
        p(&manifest),
        "--policy-url",
        &dead,
        "--group-size",
        "1",
    ]);
    assert!(!out.status.success());
}
