mod common;

use std::io::{BufRead, BufReader, Read, Write};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use common::*;
use dvoc_core::dataset::{parse_video_dataset, Schema};
use serde_json::Value;

fn stderr(o: &std::process::Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn identity_files(dir: &std::path::Path) -> (std::path::PathBuf, std::path::PathBuf) {
    let d = synthetic_dataset(FixtureSpec::default());
    let gt = write_dataset_file(dir, "gt.json", &d);
    let tracks = write_tracks_file(dir, "tracks.json", &tracks_from_gt(&d));
    (gt, tracks)
}

#[test]
fn evaluate_identity_fixture_in_mask_mode() {
    let dir = tempfile::tempdir().unwrap();
    let (gt, tracks) = identity_files(dir.path());
    let out = dir.path().join("report.json");
    let csv = dir.path().join("curves.csv");
    let o = run(&[
        "evaluate",
        "--gt",
        path_str(&gt),
        "--tracks",
        path_str(&tracks),
        "--geometry",
        "mask",
        "-o",
        path_str(&out),
        "--csv",
        path_str(&csv),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(report["schema_version"], 1);
    assert_eq!(report["geometry"], "mask");
    for k in ["det_a", "ass_a", "cap_a", "chota"] {
        let v = report["summary"][k].as_f64().unwrap();
        assert!((v - 100.0).abs() < 1e-9, "{k} = {v}");
    }
    let curves = std::fs::read_to_string(&csv).unwrap();
    assert!(curves.starts_with("alpha,det_a,ass_a,cap_a\n"));
    assert_eq!(curves.lines().count(), 20);
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let o = run(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("Usage"));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let o = run(&["evaluate", "--gt", "a", "--tracks", "b", "--nonsense"]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(&["track", "--predictions", "p", "--preset", "kinetics"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn help_documents_every_flag() {
    let cases: [(&str, &[&str]); 6] = [
        ("ingest", &["--input", "--schema", "--output-schema", "--output"]),
        (
            "generate-captions",
            &[
                "--dataset",
                "--frames",
                "--endpoint",
                "--adapter",
                "--model",
                "--visual-mode",
                "--cue",
                "--few-shot",
                "--samples",
                "--no-area",
                "--no-other-labels",
                "--max-inflight",
                "--rate",
                "--timeout-secs",
                "--resume",
                "--journal",
                "--manifest",
            ],
        ),
        (
            "track",
            &["--predictions", "--preset", "--t-match", "--k-match", "--t-thresh", "--match-floor", "--t-agg", "--aggregation"],
        ),
        ("evaluate", &["--gt", "--tracks", "--geometry", "--alphas", "--capsim", "--csv"]),
        ("capsim", &["--candidates", "--references"]),
        ("report", &["--input", "--curves"]),
    ];
    let top = run(&["--help"]);
    assert!(top.status.success());
    let text = String::from_utf8(top.stdout).unwrap();
    for (cmd, _) in &cases {
        assert!(text.contains(cmd), "top-level help lacks {cmd}");
    }
    for (cmd, flags) in cases {
        let o = run(&[cmd, "--help"]);
        assert!(o.status.success());
        let text = String::from_utf8(o.stdout).unwrap();
        for f in flags.iter().chain(&["--config", "--workers", "--verbose", "--quiet"]) {
            assert!(text.contains(f), "{cmd} --help lacks {f}");
        }
    }
}

fn predictions_file(dir: &std::path::Path) -> std::path::PathBuf {
    let mut videos = std::collections::BTreeMap::new();
    videos.insert(4, persistent_clips(6, 1, 2));
    videos.insert(9, persistent_clips(3, 1, 3));
    let p = dir.join("pred.jsonl");
    let mut buf = Vec::new();
    dvoc_core::predictions::write_predictions(&videos, &mut buf).unwrap();
    std::fs::write(&p, buf).unwrap();
    p
}

#[test]
fn track_with_vidstg_preset() {
    let dir = tempfile::tempdir().unwrap();
    let pred = predictions_file(dir.path());
    let out = dir.path().join("tracks.json");
    let o = run(&["track", "--predictions", path_str(&pred), "--preset", "vidstg", "-o", path_str(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("preset=vidstg t_match=100 k_match=7"), "{}", stderr(&o));
    assert!(stderr(&o).contains("t_agg=32 aggregation=weighted-mean"));
    let tracks = dvoc_core::tracks::parse_tracks(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(tracks.len(), 2);
    assert_eq!(tracks[0].tracks.len(), 2);
    assert_eq!(tracks[1].tracks.len(), 3);
    for t in &tracks[0].tracks {
        assert_eq!(t.clips.len(), 6);
        assert_eq!(t.frames.len(), 6);
        let e = t.embedding.as_ref().expect("aggregated embedding");
        assert!((e.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn config_file_sits_between_preset_and_flags() {
    let dir = tempfile::tempdir().unwrap();
    let pred = predictions_file(dir.path());
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "preset = \"vln\"\n\n[tracker]\nk_match = 3\nt_match = 4\n").unwrap();
    let o = run(&[
        "track",
        "--config",
        path_str(&cfg),
        "--predictions",
        path_str(&pred),
        "--t-match",
        "9",
        "-o",
        path_str(&dir.path().join("t.json")),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("preset=vln t_match=9 k_match=3"), "{}", stderr(&o));
    assert!(stderr(&o).contains("t_agg=8"));

    // a flag preset replaces the file's preset, file overrides still apply
    let o = run(&[
        "track",
        "--config",
        path_str(&cfg),
        "--predictions",
        path_str(&pred),
        "--preset",
        "bensmot",
        "-o",
        path_str(&dir.path().join("t.json")),
    ]);
    assert!(stderr(&o).contains("preset=bensmot t_match=4 k_match=3"), "{}", stderr(&o));
}

#[test]
fn outputs_are_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let (gt, tracks) = identity_files(dir.path());
    let pred = predictions_file(dir.path());
    let mut first = Vec::new();
    for round in 0..2 {
        let r = dir.path().join(format!("r{round}.json"));
        let t = dir.path().join(format!("t{round}.json"));
        let workers = if round == 0 { "1" } else { "4" };
        assert!(run(&["evaluate", "--workers", workers, "--gt", path_str(&gt), "--tracks", path_str(&tracks), "-o", path_str(&r)])
            .status
            .success());
        assert!(run(&["track", "--workers", workers, "--predictions", path_str(&pred), "-o", path_str(&t)])
            .status
            .success());
        let bytes = (std::fs::read(&r).unwrap(), std::fs::read(&t).unwrap());
        if round == 0 {
            first.push(bytes);
        } else {
            assert!(first[0] == bytes, "outputs differ between runs");
        }
    }
}

#[test]
fn failures_exit_1_with_an_error_class() {
    let dir = tempfile::tempdir().unwrap();
    let (gt, tracks) = identity_files(dir.path());
    let broken = dir.path().join("broken.json");
    std::fs::write(&broken, "{\"videos\": [").unwrap();

    let o = run(&["evaluate", "--gt", path_str(&broken), "--tracks", path_str(&tracks)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("[input]"), "{}", stderr(&o));

    let o = run(&["evaluate", "--gt", path_str(&gt), "--tracks", path_str(&dir.path().join("absent.json"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("[io]"), "{}", stderr(&o));

    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[tracker]\nkmatch = 3\n").unwrap();
    let o = run(&["evaluate", "--config", path_str(&cfg), "--gt", path_str(&gt), "--tracks", path_str(&tracks)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("[config]"), "{}", stderr(&o));

    let o = run(&["evaluate", "--gt", path_str(&gt), "--tracks", path_str(&tracks), "--alphas", "0.5,1.5"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("[config]"), "{}", stderr(&o));

    let boxes_only = synthetic_dataset(FixtureSpec {
        masks: false,
        ..FixtureSpec::default()
    });
    let gt2 = write_dataset_file(dir.path(), "boxes.json", &boxes_only);
    let t2 = write_tracks_file(dir.path(), "t2.json", &tracks_from_gt(&boxes_only));
    let o = run(&["evaluate", "--gt", path_str(&gt2), "--tracks", path_str(&t2), "--geometry", "mask"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("[validation]"), "{}", stderr(&o));
    assert!(run(&["evaluate", "--gt", path_str(&gt2), "--tracks", path_str(&t2), "--geometry", "box"])
        .status
        .success());
}

#[test]
fn capsim_scores_pairs() {
    let dir = tempfile::tempdir().unwrap();
    let cand = dir.path().join("c.txt");
    let refs = dir.path().join("r.txt");
    std::fs::write(&cand, "a brown dog runs in the grass\nzebra zebra\na dog runs\n").unwrap();
    std::fs::write(&refs, "a brown dog runs in the grass\na cat sleeps on the sofa\na brown dog runs in the grass\n").unwrap();
    let o = run(&["capsim", "--candidates", path_str(&cand), "--references", path_str(&refs)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    let rows: Vec<(usize, f64)> = text
        .lines()
        .skip(1)
        .map(|l| {
            let (i, s) = l.split_once(',').unwrap();
            (i.parse().unwrap(), s.parse().unwrap())
        })
        .collect();
    assert!(text.starts_with("line,similarity\n"));
    assert_eq!(rows.len(), 3);
    assert!((rows[0].1 - 1.0).abs() < 1e-12);
    assert_eq!(rows[1].1, 0.0);
    assert!(rows[2].1 > 0.0 && rows[2].1 < 1.0);

    std::fs::write(&cand, "one line\n").unwrap();
    let o = run(&["capsim", "--candidates", path_str(&cand), "--references", path_str(&refs)]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn report_renders_table_and_curves() {
    let dir = tempfile::tempdir().unwrap();
    let (gt, tracks) = identity_files(dir.path());
    let out = dir.path().join("report.json");
    assert!(run(&["evaluate", "--gt", path_str(&gt), "--tracks", path_str(&tracks), "-o", path_str(&out)])
        .status
        .success());
    let o = run(&["report", "--input", path_str(&out)]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("CHOTA"));
    assert!(text.lines().any(|l| l.trim_start().starts_with("all") && l.contains("100.00")));
    assert_eq!(text.lines().count(), 2 + 1 + 5);
    let o = run(&["report", "--input", path_str(&out), "--curves"]);
    assert!(String::from_utf8(o.stdout).unwrap().starts_with("alpha,"));
    let o = run(&["report", "--input", path_str(&gt)]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn ingest_normalizes_and_converts() {
    let dir = tempfile::tempdir().unwrap();
    let d = synthetic_dataset(FixtureSpec::default());
    let input = write_dataset_file(dir.path(), "in.json", &d);
    let out = dir.path().join("out.json");
    let o = run(&["ingest", "--input", path_str(&input), "-o", path_str(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("5 videos, 15 objects, 15 captions"));
    let text = std::fs::read_to_string(&out).unwrap();
    assert!(text.starts_with("{\"schema_version\":1"));
    assert_eq!(parse_video_dataset(&text, Schema::LvVis).unwrap(), d);

    let stg = dir.path().join("stg.json");
    let o = run(&["ingest", "--input", path_str(&input), "--output-schema", "vidstg", "-o", path_str(&stg)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let back = parse_video_dataset(&std::fs::read_to_string(&stg).unwrap(), Schema::VidStg).unwrap();
    assert_eq!(back.object_count(), d.object_count());
}

/// Answers every request with the generic layout and counts them.
fn caption_server() -> (String, Arc<AtomicUsize>) {
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = format!("http://{}", listener.local_addr().unwrap());
    let count = Arc::new(AtomicUsize::new(0));
    let c = count.clone();
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            let mut stream = stream.unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
                if line == "\r\n" {
                    break;
                }
            }
            let mut body = vec![0; len];
            reader.read_exact(&mut body).unwrap();
            let n = c.fetch_add(1, Ordering::SeqCst);
            let reply = format!("{{\"text\": \"A thing number {n} moves.\", \"finish_reason\": \"stop\"}}");
            let resp = format!(
                "HTTP/1.1 200 OK\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{reply}",
                reply.len()
            );
            stream.write_all(resp.as_bytes()).unwrap();
        }
    });
    (addr, count)
}

#[test]
fn generate_captions_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let mut d = synthetic_dataset(FixtureSpec {
        videos: 2,
        frames: 6,
        objects: 2,
        height: 24,
        width: 32,
        ..FixtureSpec::default()
    });
    // every object visible on every frame so none is skipped
    for v in &mut d.videos {
        for o in &mut v.objects {
            let g = o.frames.values().next().unwrap().clone();
            o.frames = (0..v.length).map(|f| (f, g.clone())).collect();
            o.caption = None;
        }
        for name in &v.file_names {
            let p = dir.path().join("frames").join(name);
            std::fs::create_dir_all(p.parent().unwrap()).unwrap();
            image::RgbImage::from_pixel(v.width, v.height, image::Rgb([40, 90, 160])).save(&p).unwrap();
        }
    }
    let input = write_dataset_file(dir.path(), "in.json", &d);
    let out = dir.path().join("captioned.json");
    let (addr, count) = caption_server();
    let frames = dir.path().join("frames");
    let args = [
        "generate-captions",
        "--dataset",
        path_str(&input),
        "--frames",
        path_str(&frames),
        "--endpoint",
        &addr,
        "--adapter",
        "generic",
        "--max-inflight",
        "2",
        "-o",
        path_str(&out),
    ];
    let o = dvoc().args(args).env("DVOC_VLM_API_KEY", "test-key").output().unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(count.load(Ordering::SeqCst), 4);
    let captioned = parse_video_dataset(&std::fs::read_to_string(&out).unwrap(), Schema::LvVis).unwrap();
    assert_eq!(captioned.caption_count(), 4);
    let manifest: Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("captioned.json.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["schema_version"], 1);
    assert_eq!(manifest["captioned"], 4);
    assert_eq!(manifest["template_hash"].as_str().unwrap().len(), 64);
    assert_eq!(
        std::fs::read_to_string(dir.path().join("captioned.json.journal")).unwrap().lines().count(),
        4
    );

    // resuming from the journal sends nothing new
    let o = dvoc()
        .args(args)
        .arg("--resume")
        .env("DVOC_VLM_API_KEY", "test-key")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(count.load(Ordering::SeqCst), 4);
    let again = parse_video_dataset(&std::fs::read_to_string(&out).unwrap(), Schema::LvVis).unwrap();
    assert_eq!(again, captioned);

    let o = dvoc().args(args).env_remove("DVOC_VLM_API_KEY").output().unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("[config]") && stderr(&o).contains("DVOC_VLM_API_KEY"));
}
