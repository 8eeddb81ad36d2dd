use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use omnimer::cli::{run_with, Outcome};
use omnimer::corpus::{ChannelSentiment, Gender, Sample, Split};
use omnimer::modelgw::mock::MockTransport;
use omnimer::modelgw::ChatTransport;
use omnimer::Sentiment;
use serde_json::Value;

fn write_corpus(dir: &Path) -> String {
    let mut text = String::new();
    for i in 0..12 {
        let split = match i {
            0..=7 => Split::Train,
            8..=9 => Split::Val,
            _ => Split::Test,
        };
        let s = Sample {
            id: format!("c{i:02}"),
            speaker_id: format!("sp{}", i / 2),
            gender: Gender::default(),
            topic: "daily".into(),
            transcript: format!("kalimat {i}"),
            audio_path: format!("audio/c{i:02}.wav"),
            video_path: format!("video/c{i:02}.mp4"),
            duration_s: 3.0,
            sentiment_gt: ChannelSentiment::uniform(Sentiment::ALL[i % 3]),
            emotion_gt: None,
            split,
            extra: BTreeMap::new(),
        };
        text.push_str(&serde_json::to_string(&s).unwrap());
        text.push('\n');
    }
    let path = dir.join("corpus.jsonl");
    std::fs::write(&path, text).unwrap();
    path.display().to_string()
}

fn text_only_config(dir: &Path, endpoint: Option<&str>) -> String {
    let mut cfg = format!(
        "output_dir = \"{}\"\n\n[endpoint]\nmedia = {{ audio = false, video = false, drop_unsupported = true }}\nretry = {{ max_attempts = 1, base_delay_ms = 1, max_delay_ms = 1 }}\n",
        dir.join("out").display()
    );
    if let Some(url) = endpoint {
        cfg.push_str(&format!("url = \"{url}\"\n"));
    }
    let path = dir.join("pipeline.toml");
    std::fs::write(&path, cfg).unwrap();
    path.display().to_string()
}

fn run(config: &str, args: &[&str], transport: Option<Arc<dyn ChatTransport>>) -> Outcome {
    let mut argv = vec!["omnimer", "--config", config];
    argv.extend_from_slice(args);
    run_with(argv, transport)
}

fn neutral_model() -> Arc<dyn ChatTransport> {
    Arc::new(MockTransport::new(|_| {
        Ok(r#"{"Sentiment": "neutral", "Emotion_keywords": ["biasa"], "Explanation": "flat delivery"}"#.into())
    }))
}

#[test]
fn validate_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = write_corpus(dir.path());
    let cfg = text_only_config(dir.path(), None);
    let o = run(&cfg, &["validate", "--corpus", &corpus], None);
    assert_eq!(o.code, 0, "{}", o.summary);
    assert_eq!(o.summary["samples"], 12);
    let report: Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("out/validation.json")).unwrap()).unwrap();
    assert!(report.is_object());
    let log = std::fs::read_to_string(dir.path().join("out/run_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 1);
}

#[test]
fn malformed_corpus_fails_validation() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.jsonl");
    std::fs::write(&path, "{\"id\": \"x\"}\nnot json\n").unwrap();
    let cfg = text_only_config(dir.path(), None);
    let o = run(&cfg, &["validate", "--corpus", &path.display().to_string()], None);
    assert_ne!(o.code, 0);
    assert_eq!(o.summary["status"], "error");
}

#[test]
fn hybrid_schedule_is_reproducible_from_seed() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = write_corpus(dir.path());
    let cfg = text_only_config(dir.path(), None);
    let b = run(&cfg, &["build-aux", "--corpus", &corpus], Some(neutral_model()));
    assert_eq!(b.code, 0, "{}", b.summary);

    let manifest = dir.path().join("out/manifest.jsonl");
    let schedule = |seed: &str| {
        let o = run(
            &cfg,
            &["--seed", seed, "schedule", "--corpus", &corpus, "--strategy", "hybrid", "--total-steps", "200"],
            None,
        );
        assert_eq!(o.code, 0, "{}", o.summary);
        (o.summary["manifest_hash"].clone(), std::fs::read(&manifest).unwrap())
    };
    let (h1, bytes1) = schedule("7");
    let (h2, bytes2) = schedule("7");
    let (h3, _) = schedule("8");
    assert_eq!(h1, h2);
    assert_eq!(bytes1, bytes2);
    assert_ne!(h1, h3);

    let r = run(&cfg, &["runspec", "--lr", "1e-4"], None);
    assert_eq!(r.code, 0, "{}", r.summary);
    let spec: Value = serde_json::from_slice(&std::fs::read(dir.path().join("out/runspec.json")).unwrap()).unwrap();
    assert_eq!(spec["optimizer"]["lr"], 1e-4);
    assert_eq!(spec["lora"]["rank"], 8);
}

#[test]
fn unreachable_endpoint_fails_at_gateway_stage() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = write_corpus(dir.path());
    let cfg = text_only_config(dir.path(), Some("http://127.0.0.1:9/v1"));
    let o = run(&cfg, &["build-aux", "--corpus", &corpus, "--modality", "text", "--max-attempts", "1"], None);
    assert_ne!(o.code, 0);
    assert_eq!(o.summary["stage"], "gateway", "{}", o.summary);
    // failed records are still written for inspection
    assert!(dir.path().join("out/supervision.jsonl").exists());
}
