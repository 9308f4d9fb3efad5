#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dvoc_core::{BBox, Category, ClipPrediction, Dataset, FrameGeometry, GtObject, QueryPrediction, RleMask};
use dvoc_core::{Track, VideoRecord, VideoTracks};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const CATEGORIES: [&str; 5] = ["dog", "cat", "car", "person", "bicycle"];
const COLORS: [&str; 6] = ["red", "black", "white", "brown", "small", "large"];
const ACTIONS: [&str; 6] = ["runs", "sits", "turns left", "moves forward", "stands still", "jumps"];
const PLACES: [&str; 5] = ["on the road", "near a fence", "in the grass", "by the door", "under a tree"];

#[derive(Debug, Clone, Copy)]
pub struct FixtureSpec {
    pub videos: usize,
    pub frames: usize,
    pub objects: usize,
    pub height: u32,
    pub width: u32,
    pub masks: bool,
    pub seed: u64,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        Self {
            videos: 5,
            frames: 12,
            objects: 3,
            height: 48,
            width: 64,
            masks: true,
            seed: 7,
        }
    }
}

pub fn random_caption(rng: &mut impl Rng, category: &str) -> String {
    format!(
        "a {} {category} {} {}",
        COLORS[rng.random_range(0..COLORS.len())],
        ACTIONS[rng.random_range(0..ACTIONS.len())],
        PLACES[rng.random_range(0..PLACES.len())]
    )
}

/// Objects are integer boxes drifting across the frame, each visible on a
/// random contiguous frame range; masks, when present, fill the box.
pub fn synthetic_dataset(spec: FixtureSpec) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let categories = CATEGORIES
        .iter()
        .enumerate()
        .map(|(i, n)| Category {
            id: i as u64 + 1,
            name: n.to_string(),
        })
        .collect();
    let (h, w) = (spec.height as i64, spec.width as i64);
    let videos = (0..spec.videos)
        .map(|v| {
            let objects = (0..spec.objects)
                .map(|o| {
                    let bw = rng.random_range(4..=(w / 3).max(4));
                    let bh = rng.random_range(4..=(h / 3).max(4));
                    let mut x = rng.random_range(0..=w - bw);
                    let mut y = rng.random_range(0..=h - bh);
                    let (dx, dy) = (rng.random_range(-2..=2i64), rng.random_range(-2..=2i64));
                    let start = rng.random_range(0..spec.frames);
                    let end = rng.random_range(start..spec.frames);
                    let mut frames = BTreeMap::new();
                    for f in start..=end {
                        x = (x + dx).clamp(0, w - bw);
                        y = (y + dy).clamp(0, h - bh);
                        let bbox = BBox::new(x as f64, y as f64, bw as f64, bh as f64).unwrap();
                        let mask = spec.masks.then(|| RleMask::from_box(spec.height, spec.width, &bbox));
                        frames.insert(f, FrameGeometry { bbox, mask });
                    }
                    let c = rng.random_range(0..CATEGORIES.len());
                    GtObject {
                        object_id: (v * spec.objects + o) as u64 + 1,
                        category_id: c as u64 + 1,
                        frames,
                        caption: Some(random_caption(&mut rng, CATEGORIES[c])),
                    }
                })
                .collect();
            VideoRecord {
                video_id: v as u64 + 1,
                length: spec.frames,
                height: spec.height,
                width: spec.width,
                file_names: (0..spec.frames).map(|f| format!("v{}/{f:05}.png", v + 1)).collect(),
                objects,
            }
        })
        .collect();
    Dataset { categories, videos }
}

/// Tracks that reproduce the ground truth exactly, captions included.
pub fn tracks_from_gt(d: &Dataset) -> Vec<VideoTracks> {
    d.videos
        .iter()
        .map(|v| VideoTracks {
            video_id: v.video_id,
            tracks: v
                .objects
                .iter()
                .map(|o| Track {
                    track_id: o.object_id,
                    frames: o.frames.clone(),
                    caption: o.caption.clone(),
                    ..Track::default()
                })
                .collect(),
        })
        .collect()
}

pub fn query(embedding: Vec<f32>, class: f64, objectness: f64, boxes: Vec<Option<BBox>>) -> QueryPrediction {
    QueryPrediction {
        embedding,
        class_scores: vec![class, class / 2.0],
        objectness,
        boxes,
        masks: None,
    }
}

/// `objects` persistent objects with fixed embeddings over `clips` clips of `span` frames.
pub fn persistent_clips(clips: usize, span: usize, objects: usize) -> Vec<ClipPrediction> {
    (0..clips)
        .map(|c| ClipPrediction {
            clip_index: c,
            first_frame: c * span,
            last_frame: c * span + span - 1,
            queries: (0..objects)
                .map(|o| {
                    let mut e = vec![0.0f32; objects.max(2)];
                    e[o] = 1.0;
                    let b = BBox::new(4.0 + 10.0 * o as f64, 4.0, 8.0, 8.0).unwrap();
                    query(e, 0.9, 0.8, vec![Some(b); span])
                })
                .collect(),
        })
        .collect()
}

pub fn dvoc() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dvoc"))
}

pub fn run(args: &[&str]) -> Output {
    dvoc().args(args).output().expect("spawn dvoc")
}

pub fn path_str(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

pub fn write_dataset_file(dir: &Path, name: &str, d: &Dataset) -> PathBuf {
    let p = dir.join(name);
    let mut buf = Vec::new();
    dvoc_core::dataset::write_dataset(d, dvoc_core::dataset::Schema::LvVis, &mut buf).unwrap();
    std::fs::write(&p, buf).unwrap();
    p
}

pub fn write_tracks_file(dir: &Path, name: &str, t: &[VideoTracks]) -> PathBuf {
    let p = dir.join(name);
    let mut buf = Vec::new();
    dvoc_core::tracks::write_tracks(t, &mut buf).unwrap();
    std::fs::write(&p, buf).unwrap();
    p
}
