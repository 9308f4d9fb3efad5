use std::collections::{HashSet, VecDeque};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use dvoc_core::mask::{rle_encode, BitGrid};
use dvoc_core::{BBox, Category, Dataset, FrameGeometry, GtObject, RleMask, VideoRecord};
use dvoc_datagen::client::{CORRECTIVE_SUFFIX, RetryPolicy};
use dvoc_datagen::frames::{encode_png, in_box_stroke};
use dvoc_datagen::generate::{FailureKind, JournalEntry};
use dvoc_datagen::vlm::{FinishStatus, TransportError};
use dvoc_datagen::*;
use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Reply = Result<VlmResponse, TransportError>;

fn reply(text: &str) -> Reply {
    Ok(VlmResponse {
        text: text.into(),
        finish: FinishStatus::Stop,
        metadata: serde_json::Value::Null,
    })
}

/// Answers from a fixed script, then falls back to describing the category
/// named in the user text.
#[derive(Default)]
struct Mock {
    script: Mutex<VecDeque<Reply>>,
    seen: Arc<Mutex<Vec<VlmRequest>>>,
    refuse_category: Option<String>,
}

impl Mock {
    fn scripted(replies: Vec<Reply>) -> (Self, Arc<Mutex<Vec<VlmRequest>>>) {
        let m = Mock {
            script: Mutex::new(replies.into()),
            ..Default::default()
        };
        let seen = m.seen.clone();
        (m, seen)
    }
}

fn category_of(user_text: &str) -> String {
    let line = user_text.lines().next().unwrap();
    line.trim_start_matches("Category of the queried object: ").trim_end_matches('.').to_string()
}

impl VlmTransport for Mock {
    fn send(&self, request: &VlmRequest) -> Reply {
        self.seen.lock().unwrap().push(request.clone());
        if let Some(r) = self.script.lock().unwrap().pop_front() {
            return r;
        }
        let cat = category_of(&request.text_parts[0]);
        if self.refuse_category.as_deref() == Some(cat.as_str()) {
            return Ok(VlmResponse {
                text: String::new(),
                finish: FinishStatus::Refused("policy".into()),
                metadata: serde_json::Value::Null,
            });
        }
        reply(&format!("A {cat} in the scene."))
    }
}

fn client(mock: Mock) -> (CaptionClient, Arc<Mutex<Vec<Duration>>>) {
    let sleeps = Arc::new(Mutex::new(Vec::new()));
    let s2 = sleeps.clone();
    let cfg = ClientConfig {
        retry: RetryPolicy {
            max_retries: 3,
            base_delay: Duration::from_millis(10),
            max_delay: Duration::from_millis(100),
        },
        ..Default::default()
    };
    let c = CaptionClient::new(Box::new(mock), cfg).with_sleeper(move |d| s2.lock().unwrap().push(d));
    (c, sleeps)
}

fn geo(x: f64, y: f64) -> FrameGeometry {
    let bbox = BBox::new(x, y, 6.0, 5.0).unwrap();
    FrameGeometry {
        bbox,
        mask: Some(RleMask::from_box(24, 32, &bbox)),
    }
}

fn fixture(videos: usize, objects_per_video: usize) -> Dataset {
    let categories = (0..5)
        .map(|i| Category {
            id: i + 1,
            name: ["dog", "cat", "horse", "cup", "bicycle"][i as usize].into(),
        })
        .collect();
    let mut next_object = 0;
    let videos = (0..videos)
        .map(|v| VideoRecord {
            video_id: v as u64 + 1,
            length: 6,
            height: 24,
            width: 32,
            file_names: Vec::new(),
            objects: (0..objects_per_video)
                .map(|j| {
                    next_object += 1;
                    GtObject {
                        object_id: next_object,
                        category_id: (j % 5) as u64 + 1,
                        frames: (0..6).map(|f| (f, geo(2.0 * j as f64 + f as f64, 3.0))).collect(),
                        caption: None,
                    }
                })
                .collect(),
        })
        .collect();
    Dataset { categories, videos }
}

fn bundle() -> PromptBundle {
    let d = fixture(1, 2);
    build_prompt(&d, &d.videos[0], 1, &PromptOptions::default(), &SolidFrames([40, 40, 40])).unwrap()
}

#[test]
fn plain_caption_passes_through() {
    let (mock, seen) = Mock::scripted(vec![reply("  A brown dog runs on grass. ")]);
    let (c, _) = client(mock);
    assert_eq!(request_caption(&c, &bundle()).unwrap(), "A brown dog runs on grass.");
    let seen = seen.lock().unwrap();
    assert_eq!(seen.len(), 1);
    assert_eq!(seen[0].image_parts.len(), 4);
    assert!(seen[0].image_parts.iter().all(|p| p.mime_type == "image/jpeg"));
}

#[test]
fn artifact_mention_gets_one_corrective_retry() {
    let (mock, seen) = Mock::scripted(vec![reply("A dog inside a red bounding box."), reply("A dog sits.")]);
    let (c, _) = client(mock);
    assert_eq!(request_caption(&c, &bundle()).unwrap(), "A dog sits.");
    let seen = seen.lock().unwrap();
    assert_eq!(seen.len(), 2);
    assert_eq!(seen[1].text_parts.last().unwrap(), CORRECTIVE_SUFFIX);

    let (mock, seen) = Mock::scripted(vec![reply("A highlighted dog."), reply("A dog in a rectangle.")]);
    let (c, _) = client(mock);
    assert!(matches!(request_caption(&c, &bundle()), Err(CaptionError::Permanent(_))));
    assert_eq!(seen.lock().unwrap().len(), 2);
}

#[test]
fn rate_limit_backs_off_then_succeeds() {
    let limited = || Err(TransportError::RateLimited { retry_after: None });
    let (mock, seen) = Mock::scripted(vec![limited(), limited(), reply("A cat.")]);
    let (c, sleeps) = client(mock);
    assert_eq!(request_caption(&c, &bundle()).unwrap(), "A cat.");
    assert_eq!(seen.lock().unwrap().len(), 3);
    assert_eq!(
        *sleeps.lock().unwrap(),
        vec![Duration::from_millis(10), Duration::from_millis(20)]
    );
}

#[test]
fn retry_after_header_is_honoured() {
    let (mock, _) = Mock::scripted(vec![
        Err(TransportError::RateLimited {
            retry_after: Some(Duration::from_secs(3)),
        }),
        reply("A cat."),
    ]);
    let (c, sleeps) = client(mock);
    request_caption(&c, &bundle()).unwrap();
    assert_eq!(*sleeps.lock().unwrap(), vec![Duration::from_secs(3)]);
}

#[test]
fn failure_classes() {
    let (mock, _) = Mock::scripted(vec![Ok(VlmResponse {
        text: String::new(),
        finish: FinishStatus::Refused("unsafe content".into()),
        metadata: serde_json::Value::Null,
    })]);
    let (c, _) = client(mock);
    match request_caption(&c, &bundle()) {
        Err(CaptionError::Permanent(m)) => assert!(m.contains("unsafe content")),
        other => panic!("{other:?}"),
    }

    let down = || Err(TransportError::Network("connection reset".into()));
    let (mock, seen) = Mock::scripted(vec![down(), down(), down(), down()]);
    let (c, sleeps) = client(mock);
    assert!(matches!(request_caption(&c, &bundle()), Err(CaptionError::Transient(_))));
    assert_eq!(seen.lock().unwrap().len(), 4);
    assert_eq!(sleeps.lock().unwrap().len(), 3);

    let (mock, seen) = Mock::scripted(vec![Err(TransportError::Status {
        status: 401,
        body: "bad key".into(),
    })]);
    let (c, _) = client(mock);
    assert!(matches!(request_caption(&c, &bundle()), Err(CaptionError::Permanent(_))));
    assert_eq!(seen.lock().unwrap().len(), 1);
}

#[test]
fn two_videos_all_captioned() {
    let d = fixture(2, 3);
    let (mock, seen) = Mock::scripted(vec![]);
    let (c, _) = client(mock);
    let out = generate_captions(&d, &SolidFrames([0, 0, 0]), &c, &GenerateOptions::default(), None);
    assert!(out.manifest.failures.is_empty());
    assert_eq!(out.manifest.captioned, 6);
    assert_eq!(seen.lock().unwrap().len(), 6);
    let v = &out.dataset.videos[1];
    assert_eq!(v.objects[1].caption.as_deref(), Some("A cat in the scene."));
    assert_eq!(out.manifest.template_hash, template_hash());
}

#[test]
fn rerun_only_requests_missing_captions() {
    let d = fixture(3, 5);
    let failing = Mock {
        refuse_category: Some("horse".into()),
        ..Default::default()
    };
    let (c, _) = client(failing);
    let first = generate_captions(&d, &SolidFrames([0, 0, 0]), &c, &GenerateOptions::default(), None);
    assert_eq!(first.manifest.failures.len(), 3);
    assert!(first.manifest.failures.iter().all(|f| f.kind == FailureKind::Permanent));

    let (mock, seen) = Mock::scripted(vec![]);
    let (c, _) = client(mock);
    let second = generate_captions(&first.dataset, &SolidFrames([0, 0, 0]), &c, &GenerateOptions::default(), None);
    assert_eq!(seen.lock().unwrap().len(), 3);
    assert!(seen.lock().unwrap().iter().all(|r| category_of(&r.text_parts[0]) == "horse"));
    assert_eq!(second.manifest.already_captioned, 12);
    assert!(second.manifest.failures.is_empty());
    assert_eq!(second.dataset.caption_count(), 15);
}

#[test]
fn journal_resume_after_interruption() {
    let dir = std::env::temp_dir().join(format!("dvoc-journal-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("captions.jsonl");
    let d = fixture(2, 4);

    let journal = Journal::create(&path).unwrap();
    let (mock, _) = Mock::scripted(vec![]);
    let (c, _) = client(mock);
    let full = generate_captions(&d, &SolidFrames([0; 3]), &c, &GenerateOptions::default(), Some(&journal));
    drop(journal);

    // keep five entries and a torn sixth line, as if the process died mid-write
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 8);
    std::fs::write(&path, format!("{}\n{}", lines[..5].join("\n"), &lines[5][..10])).unwrap();

    let (journal, entries) = Journal::open(&path).unwrap();
    assert_eq!(entries.len(), 5);
    let mut resumed = d.clone();
    assert_eq!(apply_journal(&mut resumed, &entries), 5);
    let (mock, seen) = Mock::scripted(vec![]);
    let (c, _) = client(mock);
    let out = generate_captions(&resumed, &SolidFrames([0; 3]), &c, &GenerateOptions::default(), Some(&journal));
    assert_eq!(seen.lock().unwrap().len(), 3);
    assert_eq!(out.dataset, full.dataset);
    std::fs::remove_dir_all(&dir).unwrap();

    let e = JournalEntry {
        video_id: 99,
        object_id: 1,
        caption: "x".into(),
    };
    assert_eq!(apply_journal(&mut resumed, &[e]), 0);
}

#[test]
fn object_off_sampled_frames_lands_in_manifest() {
    let mut d = fixture(1, 2);
    d.videos[0].objects[1].frames = [(1usize, geo(1.0, 1.0))].into();
    let (mock, seen) = Mock::scripted(vec![]);
    let (c, _) = client(mock);
    let out = generate_captions(&d, &SolidFrames([0; 3]), &c, &GenerateOptions::default(), None);
    assert_eq!(seen.lock().unwrap().len(), 1);
    assert_eq!(out.manifest.failures.len(), 1);
    assert_eq!(out.manifest.failures[0].kind, FailureKind::Skipped);
    assert_eq!(out.manifest.failures[0].object_id, 2);
}

#[test]
fn prompt_is_byte_identical_across_runs() {
    let d = fixture(1, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let noise: Vec<u8> = (0..24 * 32 * 3).map(|_| rng.random()).collect();
    struct Noise(Vec<u8>);
    impl FrameSource for Noise {
        fn load(&self, v: &VideoRecord, _: usize) -> Result<RgbImage, dvoc_datagen::frames::FrameError> {
            Ok(RgbImage::from_raw(v.width, v.height, self.0.clone()).unwrap())
        }
    }
    let src = Noise(noise);
    for opts in [
        PromptOptions::default(),
        PromptOptions {
            visual: VisualMode::MaskBoundaries,
            cue: Cue::CenterPoint,
            include_area: false,
            include_other_labels: false,
            few_shot: 0,
            ..Default::default()
        },
    ] {
        let a = build_prompt(&d, &d.videos[0], 2, &opts, &src).unwrap();
        let b = build_prompt(&d, &d.videos[0], 2, &opts, &src).unwrap();
        assert_eq!(a.system_text.as_bytes(), b.system_text.as_bytes());
        assert_eq!(a.user_text.as_bytes(), b.user_text.as_bytes());
        for (x, y) in a.visual_frames.iter().zip(&b.visual_frames) {
            assert_eq!(encode_png(x).unwrap(), encode_png(y).unwrap());
        }
    }
}

fn random_frame(rng: &mut ChaCha8Rng, w: u32, h: u32) -> RgbImage {
    // green channel is never zero, so no pixel starts out pure red
    RgbImage::from_fn(w, h, |_, _| Rgb([rng.random(), rng.random_range(1..=255), rng.random()]))
}

fn changed(a: &RgbImage, b: &RgbImage) -> HashSet<(u32, u32)> {
    a.enumerate_pixels()
        .filter(|(x, y, p)| b.get_pixel(*x, *y) != *p)
        .map(|(x, y, _)| (x, y))
        .collect()
}

#[test]
fn box_drawing_matches_pixel_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let (w, h) = (rng.random_range(1..20), rng.random_range(1..20));
        let frame = random_frame(&mut rng, w, h);
        let b = BBox::new(
            rng.random_range(-5.0..20.0),
            rng.random_range(-5.0..20.0),
            rng.random_range(0.0..15.0),
            rng.random_range(0.0..15.0),
        )
        .unwrap();
        let stroke = Stroke {
            width: rng.random_range(1..5),
            color: [255, 0, 0],
        };
        let mut drawn = frame.clone();
        draw_annotation(&mut drawn, Annotation::Box(&b), stroke);
        let expected: HashSet<(u32, u32)> = (0..h)
            .flat_map(|y| (0..w).map(move |x| (x, y)))
            .filter(|&(x, y)| in_box_stroke(&b, stroke.width, x, y))
            .collect();
        assert_eq!(changed(&frame, &drawn), expected);
    }
}

#[test]
fn boundary_drawing_matches_pixel_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..100 {
        let (w, h) = (rng.random_range(1..16u32), rng.random_range(1..16u32));
        let mut grid = BitGrid::new(h, w);
        let density = rng.random_range(0.1..0.9);
        for y in 0..h {
            for x in 0..w {
                grid.set(y, x, rng.random_bool(density));
            }
        }
        let mask = rle_encode(&grid);
        let width = rng.random_range(1..6u32);
        let frame = random_frame(&mut rng, w, h);
        let mut drawn = frame.clone();
        draw_annotation(
            &mut drawn,
            Annotation::MaskBoundary(&mask),
            Stroke {
                width,
                color: [255, 0, 0],
            },
        );
        // brute force: boundary pixels, then every pixel within the square radius of one
        let fg = |x: i64, y: i64| grid.get(y as u32, x as u32);
        let inside = |x: i64, y: i64| x >= 0 && y >= 0 && x < w as i64 && y < h as i64;
        let mut boundary = Vec::new();
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                let edge = [(-1, 0), (1, 0), (0, -1), (0, 1)]
                    .iter()
                    .any(|(dx, dy)| inside(x + dx, y + dy) && !fg(x + dx, y + dy));
                if fg(x, y) && edge {
                    boundary.push((x, y));
                }
            }
        }
        let r = ((width - 1) / 2) as i64;
        let expected: HashSet<(u32, u32)> = (0..h as i64)
            .flat_map(|y| (0..w as i64).map(move |x| (x, y)))
            .filter(|&(x, y)| boundary.iter().any(|&(bx, by)| (bx - x).abs() <= r && (by - y).abs() <= r))
            .map(|(x, y)| (x as u32, y as u32))
            .collect();
        let mask_empty = mask.is_empty();
        let got = changed(&frame, &drawn);
        if mask_empty {
            assert!(got.is_empty());
        } else {
            assert_eq!(got, expected);
        }
    }
}

fn scale_run(videos: usize, objects: usize) {
    // spread `objects` over `videos` as evenly as possible
    let mut d = fixture(videos, 0);
    let mut next = 0u64;
    for (i, v) in d.videos.iter_mut().enumerate() {
        let n = objects / videos + usize::from(i < objects % videos);
        for j in 0..n {
            next += 1;
            v.objects.push(GtObject {
                object_id: next,
                category_id: (j % 5) as u64 + 1,
                frames: [(0usize, geo(1.0, 1.0)), (5, geo(2.0, 2.0))].into(),
                caption: None,
            });
        }
    }
    let (mock, seen) = Mock::scripted(vec![]);
    let (c, _) = client(mock);
    let opts = GenerateOptions {
        max_inflight: 16,
        ..Default::default()
    };
    let out = generate_captions(&d, &SolidFrames([0; 3]), &c, &opts, None);
    assert_eq!(out.dataset.videos.len(), videos);
    assert_eq!(out.dataset.object_count(), objects);
    assert_eq!(out.dataset.caption_count(), objects);
    assert_eq!(seen.lock().unwrap().len(), objects);
    assert!(out.manifest.failures.is_empty());
}

#[test]
fn training_split_volume() {
    scale_run(3_076, 16_017);
}

#[test]
fn validation_split_volume() {
    scale_run(837, 3_700);
}

/// Serves canned HTTP responses, one per connection, and records request heads and bodies.
fn serve(responses: Vec<String>) -> (String, std::thread::JoinHandle<Vec<(String, String)>>) {
    use std::io::{BufRead, BufReader, Read, Write};
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = format!("http://{}", listener.local_addr().unwrap());
    let handle = std::thread::spawn(move || {
        let mut seen = Vec::new();
        for resp in responses {
            let (mut stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut head = String::new();
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
                head.push_str(&line);
            }
            let mut body = vec![0; len];
            reader.read_exact(&mut body).unwrap();
            seen.push((head, String::from_utf8(body).unwrap()));
            stream.write_all(resp.as_bytes()).unwrap();
        }
        seen
    });
    (addr, handle)
}

fn http(status: &str, extra: &str, body: &str) -> String {
    format!(
        "HTTP/1.1 {status}\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n{extra}\r\n{body}",
        body.len()
    )
}

#[test]
fn gemini_over_http() {
    let ok = r#"{"candidates":[{"content":{"parts":[{"text":"A grey horse grazes."}]},"finishReason":"STOP"}]}"#;
    let (addr, server) = serve(vec![
        http("429 Too Many Requests", "retry-after: 2\r\n", "{}"),
        http("200 OK", "", ok),
    ]);
    let transport = HttpTransport::new(&addr, "k-123".into(), Adapter::Gemini, Duration::from_secs(10)).unwrap();
    let sleeps = Arc::new(Mutex::new(Vec::new()));
    let s2 = sleeps.clone();
    let c = CaptionClient::new(Box::new(transport), ClientConfig::default()).with_sleeper(move |d| s2.lock().unwrap().push(d));
    assert_eq!(request_caption(&c, &bundle()).unwrap(), "A grey horse grazes.");
    assert_eq!(*sleeps.lock().unwrap(), vec![Duration::from_secs(2)]);
    let seen = server.join().unwrap();
    let (head, body) = &seen[1];
    assert!(head.starts_with("POST /models/gemini-2.0-flash:generateContent "));
    assert!(head.to_ascii_lowercase().contains("x-goog-api-key: k-123"));
    let json: serde_json::Value = serde_json::from_str(body).unwrap();
    assert_eq!(json["contents"][0]["parts"].as_array().unwrap().len(), 5);
}

#[test]
fn generic_over_http_client_error_is_permanent() {
    let (addr, server) = serve(vec![http("400 Bad Request", "", r#"{"error":"bad image"}"#)]);
    let transport = HttpTransport::new(&addr, "k".into(), Adapter::Generic, Duration::from_secs(10)).unwrap();
    let c = CaptionClient::new(Box::new(transport), ClientConfig::default());
    match request_caption(&c, &bundle()) {
        Err(CaptionError::Permanent(m)) => assert!(m.contains("bad image")),
        other => panic!("{other:?}"),
    }
    let seen = server.join().unwrap();
    assert!(seen[0].0.to_ascii_lowercase().contains("authorization: bearer k"));
}
