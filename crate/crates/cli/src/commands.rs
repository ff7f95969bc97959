use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use segchain_adapters::{HttpPolicy, HttpTracker};
use segchain_core::adapters::OracleTracker;
use segchain_core::curation::{
    load_manifest, masks_to_boxes, tracker_filter, write_manifest, Manifest, VideoBoxes,
};
use segchain_core::lab::{train_toy, LabConfig, TrainOptions};
use segchain_core::metrics::{evaluate_dataset, BenchmarkReport};
use segchain_core::parser::{parse_round1, parse_round2};
use segchain_core::rollout::{
    run_group, score_transcripts, EpisodeInput, GroundTruth, RolloutConfig, TraceRecord, Tracker,
};
use segchain_core::{MaskSequence, RewardBreakdown};
use serde::Serialize;

use crate::config::RunConfig;
use crate::svg::line_chart;

fn write_text(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes())?;
            out.flush()?;
            Ok(())
        }
    }
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable report");
    s.push('\n');
    s
}

fn load(path: &Path) -> Result<Manifest> {
    load_manifest(path).with_context(|| format!("loading manifest {}", path.display()))
}

pub fn parse(config: &RunConfig, round: u8) -> Result<()> {
    let path = config.require_input()?;
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let report = match round {
        1 => {
            serde_json::json!({ "round": 1, "frames": config.frames, "parse": parse_round1(&text, config.frames) })
        }
        2 => {
            let image = RolloutConfig::default().round2_image;
            serde_json::json!({ "round": 2, "image": image, "parse": parse_round2(&text, image) })
        }
        r => bail!("--round must be 1 or 2, got {r}"),
    };
    write_text(config.output.as_deref(), &to_json(&report))
}

/// Ground truth at the sampled frames of one query.
fn ground_truth(boxes: &VideoBoxes, query: usize, frames: &[usize]) -> Result<GroundTruth> {
    let q = boxes
        .queries
        .get(query)
        .with_context(|| format!("video {} has no query {query}", boxes.id))?;
    let picked = frames
        .iter()
        .map(|&t| {
            q.boxes
                .get(t)
                .copied()
                .with_context(|| format!("frame {t} beyond video {}", boxes.id))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GroundTruth::from_boxes(picked))
}

#[derive(Serialize)]
struct ScoredRecord {
    video_id: String,
    query_index: usize,
    member: usize,
    reward: RewardBreakdown,
}

#[derive(Serialize)]
struct ScoreReport {
    records: Vec<ScoredRecord>,
    mean_total: f64,
}

fn read_traces(path: &Path) -> Result<Vec<TraceRecord>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    BufReader::new(file)
        .lines()
        .enumerate()
        .filter(|(_, l)| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
        .map(|(i, line)| {
            let line = line?;
            serde_json::from_str(&line)
                .with_context(|| format!("{}:{}: malformed trace record", path.display(), i + 1))
        })
        .collect()
}

pub fn score(config: &RunConfig, gt_path: &Path) -> Result<()> {
    let records = read_traces(config.require_input()?)?;
    let manifest = load(gt_path)?;
    let boxes = masks_to_boxes(&manifest)?;
    let rollout = RolloutConfig {
        temporal_mode: config.temporal_mode,
        ..RolloutConfig::default()
    };
    let mut scored = Vec::with_capacity(records.len());
    for rec in records {
        let index = manifest
            .videos
            .iter()
            .position(|v| v.id == rec.video_id)
            .with_context(|| {
                format!(
                    "trace refers to video `{}`, which is not in {}",
                    rec.video_id,
                    gt_path.display()
                )
            })?;
        let video = &manifest.videos[index];
        let query = video.queries.get(rec.query_index).with_context(|| {
            format!("video `{}` has no query {}", rec.video_id, rec.query_index)
        })?;
        let ep = EpisodeInput::new(
            video.source(),
            query.text.clone(),
            rec.frame_indices.clone(),
        )?;
        let gt = ground_truth(&boxes[index], rec.query_index, &rec.frame_indices)?;
        let reward = if rec.trace.failure.is_some() {
            RewardBreakdown::zero()
        } else {
            score_transcripts(
                &ep,
                &rollout,
                &rec.trace.y1,
                rec.trace.y2.as_deref(),
                Some(&gt),
            )?
            .reward
            .expect("ground truth supplied")
        };
        scored.push(ScoredRecord {
            video_id: rec.video_id,
            query_index: rec.query_index,
            member: rec.member,
            reward,
        });
    }
    let mean_total = if scored.is_empty() {
        0.0
    } else {
        scored.iter().map(|r| r.reward.total).sum::<f64>() / scored.len() as f64
    };
    log::info!(
        "scored {} rollouts, mean total reward {mean_total:.4}",
        scored.len()
    );
    write_text(
        config.output.as_deref(),
        &to_json(&ScoreReport {
            records: scored,
            mean_total,
        }),
    )
}

pub fn rollout(config: &RunConfig) -> Result<()> {
    let manifest = load(config.require_input()?)?;
    let url = config
        .policy_url
        .as_deref()
        .context("--policy-url (or SEGCHAIN_POLICY_URL) is required")?;
    let policy = HttpPolicy::new(url)?;
    let boxes = masks_to_boxes(&manifest)?;
    let rollout = RolloutConfig {
        temporal_mode: config.temporal_mode,
        ..RolloutConfig::default()
    };
    let mut out: Box<dyn Write> = match &config.output {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(BufWriter::new(std::io::stdout().lock())),
    };
    let mut group_index = 0u64;
    let mut failures = 0usize;
    let mut total = 0usize;
    for (video, vboxes) in manifest.videos.iter().zip(&boxes) {
        for (q, query) in video.queries.iter().enumerate() {
            let ep = EpisodeInput::uniform(video.source(), query.text.clone(), config.frames)?;
            let gt = ground_truth(vboxes, q, &ep.original_frame_indices)?;
            let group = run_group(
                &ep,
                &policy,
                &rollout,
                Some(&gt),
                config.group_size,
                config.seed,
                group_index,
            )?;
            group_index += 1;
            for (member, trace) in group.traces.into_iter().enumerate() {
                total += 1;
                if let Some(f) = &trace.failure {
                    failures += 1;
                    log::error!("{} query {q} member {member}: {f}", video.id);
                }
                let record = TraceRecord {
                    video_id: video.id.clone(),
                    query_index: q,
                    member,
                    frame_indices: ep.original_frame_indices.clone(),
                    trace,
                };
                serde_json::to_writer(&mut out, &record)?;
                out.write_all(b"\n")?;
            }
        }
    }
    out.flush()?;
    ensure!(
        failures == 0,
        "{failures} of {total} rollouts failed to reach the policy"
    );
    log::info!("wrote {total} rollouts in {group_index} groups");
    Ok(())
}

pub fn train(config: &RunConfig, svg: bool) -> Result<()> {
    let options = TrainOptions {
        grpo: config.grpo(),
        mode: config.temporal_mode,
        lab: LabConfig {
            frames: config.frames,
            ..LabConfig::default()
        },
        ..TrainOptions::default()
    };
    log::info!(
        "training toy policy: {} steps, n = {}, beta = {}, lr = {}, temporal reward {}",
        options.grpo.steps,
        options.grpo.n,
        options.grpo.beta,
        options.grpo.learning_rate,
        options.mode
    );
    let report = train_toy(&options)?;
    let metrics = to_json(&report.final_metrics);
    log::info!(
        "held-out: frame quality {:.4}, box accuracy {:.4}, mean total reward {:.4}",
        report.final_metrics.frame_quality,
        report.final_metrics.box_accuracy,
        report.final_metrics.mean_total_reward
    );
    match &config.output {
        Some(dir) => {
            std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            write_text(Some(&dir.join("train_log.csv")), &report.to_csv())?;
            write_text(Some(&dir.join("metrics.json")), &metrics)?;
            if svg {
                let rewards: Vec<f64> = report.rows.iter().map(|r| r.mean_reward).collect();
                let chart = line_chart(
                    &format!("mean group reward ({})", options.mode),
                    &rewards,
                    0.0,
                    3.0,
                );
                write_text(Some(&dir.join("reward.svg")), &chart)?;
            }
            write_text(None, &metrics)
        }
        None => {
            ensure!(!svg, "--svg needs --output DIR");
            write_text(None, &report.to_csv())
        }
    }
}

fn sequences(manifest: &Manifest) -> Result<Vec<(String, MaskSequence)>> {
    let mut out = Vec::new();
    for v in &manifest.videos {
        for q in 0..v.queries.len() {
            out.push((format!("{}/{q}", v.id), v.query_masks(q)?));
        }
    }
    Ok(out)
}

pub fn eval(config: &RunConfig, gt_path: &Path) -> Result<()> {
    let pred_path = config.require_input()?;
    let pred = sequences(&load(pred_path)?)?;
    let gt = sequences(&load(gt_path)?)?;
    let mut pairs = Vec::with_capacity(gt.len());
    for (name, g) in &gt {
        let p = pred
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, p)| p)
            .with_context(|| format!("{} has no prediction for {name}", pred_path.display()))?;
        ensure!(
            p.size() == g.size(),
            "{name}: predicted masks are {}, ground truth is {}",
            p.size(),
            g.size()
        );
        pairs.push((name.clone(), p, g));
    }
    let report: BenchmarkReport = evaluate_dataset(pairs)?;
    if let Some(path) = &config.output {
        write_text(Some(path), &to_json(&report))?;
    }
    write_text(None, &report.to_markdown())
}

pub fn curate(config: &RunConfig, oracle: bool, decisions: Option<PathBuf>) -> Result<()> {
    let manifest = load(config.require_input()?)?;
    let output = config.require_output()?;
    let tracker: Box<dyn Tracker> = if oracle {
        let mut t = OracleTracker::new();
        for v in &manifest.videos {
            for q in 0..v.queries.len() {
                t.insert(v.id.clone(), q, v.query_masks(q)?);
            }
        }
        Box::new(t)
    } else {
        let url = config
            .tracker_url
            .as_deref()
            .context("curate needs --tracker oracle or --tracker-url (or SEGCHAIN_TRACKER_URL)")?;
        Box::new(HttpTracker::new(url)?)
    };
    let outcome = tracker_filter(&manifest, tracker.as_ref(), config.threshold)?;
    for d in &outcome.decisions {
        for line in &d.diagnostics {
            log::warn!("{}: {line}", d.video_id);
        }
    }
    write_manifest(&outcome.curated, output)?;
    log::info!(
        "kept {} of {} videos at threshold {}",
        outcome.curated.videos.len(),
        manifest.videos.len(),
        config.threshold
    );
    write_text(decisions.as_deref(), &outcome.decisions_csv())
}
