//! Seeded inputs for the toolkit benchmarks.

use std::collections::BTreeMap;

use dvoc_core::assignment::{CostMatrix, Sense};
use dvoc_core::{BBox, Category, Dataset, FrameGeometry, GtObject, RleMask, Track, VideoRecord, VideoTracks};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Square maximize matrix with entries in [0, 1).
pub fn random_matrix(n: usize, seed: u64) -> CostMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = (0..n * n).map(|_| rng.random::<f64>()).collect();
    CostMatrix::new(n, n, values, Sense::Maximize).expect("square matrix")
}

fn random_box(rng: &mut impl Rng, height: u32, width: u32) -> BBox {
    let (h, w) = (height as i64, width as i64);
    let bw = rng.random_range(1..=w / 2);
    let bh = rng.random_range(1..=h / 2);
    let x = rng.random_range(0..=w - bw);
    let y = rng.random_range(0..=h - bh);
    BBox::new(x as f64, y as f64, bw as f64, bh as f64).expect("positive box")
}

/// Two overlapping-ish box masks on one frame.
pub fn mask_pair(height: u32, width: u32, seed: u64) -> (RleMask, RleMask) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = random_box(&mut rng, height, width);
    let b = random_box(&mut rng, height, width);
    (RleMask::from_box(height, width, &a), RleMask::from_box(height, width, &b))
}

/// Ground truth with masks on every frame and predictions that jitter it by a pixel.
pub fn eval_fixture(videos: usize, frames: usize, objects: usize, seed: u64) -> (Dataset, Vec<VideoTracks>) {
    const H: u32 = 120;
    const W: u32 = 160;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gt_videos = Vec::new();
    let mut predictions = Vec::new();
    for v in 0..videos {
        let mut gts = Vec::new();
        let mut tracks = Vec::new();
        for o in 0..objects {
            let mut gt_frames = BTreeMap::new();
            let mut pred_frames = BTreeMap::new();
            for f in 0..frames {
                let b = random_box(&mut rng, H, W);
                let dx = rng.random_range(-1.0..=1.0f64).round();
                let p = BBox::new((b.x + dx).clamp(0.0, W as f64 - b.w), b.y, b.w, b.h).expect("positive box");
                gt_frames.insert(f, FrameGeometry { bbox: b, mask: Some(RleMask::from_box(H, W, &b)) });
                pred_frames.insert(f, FrameGeometry { bbox: p, mask: Some(RleMask::from_box(H, W, &p)) });
            }
            let id = (v * objects + o) as u64 + 1;
            gts.push(GtObject {
                object_id: id,
                category_id: 1,
                frames: gt_frames,
                caption: Some(format!("object {o} moves across the frame")),
            });
            tracks.push(Track {
                track_id: id,
                frames: pred_frames,
                caption: Some(format!("object {o} moves left")),
                ..Track::default()
            });
        }
        gt_videos.push(VideoRecord {
            video_id: v as u64 + 1,
            length: frames,
            height: H,
            width: W,
            file_names: (0..frames).map(|f| format!("{f:05}.jpg")).collect(),
            objects: gts,
        });
        predictions.push(VideoTracks { video_id: v as u64 + 1, tracks });
    }
    let gt = Dataset {
        categories: vec![Category { id: 1, name: "object".into() }],
        videos: gt_videos,
    };
    (gt, predictions)
}
