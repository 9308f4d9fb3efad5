//! JSON-lines prediction files: one clip per line.
//!
//! ```json
//! {"video_id": 3, "clip_index": 0, "frame_start": 0, "frame_end": 4,
//!  "queries": [{"embedding": [..], "class_scores": [..], "objectness": 0.9,
//!               "boxes": [[x, y, w, h] | null, ..], "masks": [rle | null, ..]}]}
//! ```
//!
//! `frame_end` is inclusive; `boxes` (and `masks`, when present) carry one
//! entry per clip frame.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::geometry::BBox;
use crate::mask::RleMask;
use crate::model::{ClipPrediction, QueryPrediction, VideoId};

#[derive(Debug, thiserror::Error)]
pub enum PredictionError {
    #[error("line {line}: JSON parse error at byte {offset}: {message}")]
    Parse { line: usize, offset: usize, message: String },
    #[error("video {video_id} clip {clip_index}: {message}")]
    Validation {
        video_id: VideoId,
        clip_index: usize,
        message: String,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Serialize, Deserialize)]
struct RawQuery {
    embedding: Vec<f32>,
    class_scores: Vec<f64>,
    objectness: f64,
    boxes: Vec<Option<BBox>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    masks: Option<Vec<Option<RleMask>>>,
}

#[derive(Serialize, Deserialize)]
struct RawClip {
    video_id: VideoId,
    clip_index: usize,
    frame_start: usize,
    frame_end: usize,
    queries: Vec<RawQuery>,
}

/// Parses a JSON-lines prediction document into clips grouped by video and
/// sorted by clip index. Blank lines are ignored.
pub fn parse_predictions(text: &str) -> Result<BTreeMap<VideoId, Vec<ClipPrediction>>, PredictionError> {
    let mut videos: BTreeMap<VideoId, Vec<ClipPrediction>> = BTreeMap::new();
    let mut line_start = 0;
    for (i, line) in text.split_inclusive('\n').enumerate() {
        let offset = line_start;
        line_start += line.len();
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawClip = serde_json::from_str(line).map_err(|e| PredictionError::Parse {
            line: i + 1,
            offset: offset + crate::dataset::byte_offset(line, e.line(), e.column()),
            message: e.to_string(),
        })?;
        let clip = convert_clip(&raw)?;
        videos.entry(raw.video_id).or_default().push(clip);
    }
    for (&video_id, clips) in videos.iter_mut() {
        clips.sort_by_key(|c| c.clip_index);
        validate_video(video_id, clips)?;
    }
    Ok(videos)
}

fn convert_clip(raw: &RawClip) -> Result<ClipPrediction, PredictionError> {
    let err = |m: String| PredictionError::Validation {
        video_id: raw.video_id,
        clip_index: raw.clip_index,
        message: m,
    };
    if raw.frame_end < raw.frame_start {
        return Err(err(format!(
            "frame_end {} precedes frame_start {}",
            raw.frame_end, raw.frame_start
        )));
    }
    let span = raw.frame_end - raw.frame_start + 1;
    let mut queries = Vec::with_capacity(raw.queries.len());
    for (q, rq) in raw.queries.iter().enumerate() {
        if !(0.0..=1.0).contains(&rq.objectness) {
            return Err(err(format!("query {q}: objectness {} outside [0, 1]", rq.objectness)));
        }
        if rq.class_scores.is_empty() {
            return Err(err(format!("query {q}: empty class_scores")));
        }
        if let Some(s) = rq.class_scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            return Err(err(format!("query {q}: class score {s} outside [0, 1]")));
        }
        if rq.embedding.iter().any(|v| !v.is_finite()) {
            return Err(err(format!("query {q}: non-finite embedding value")));
        }
        if rq.boxes.len() != span {
            return Err(err(format!("query {q}: {} boxes for a {span}-frame clip", rq.boxes.len())));
        }
        if let Some(m) = &rq.masks {
            if m.len() != span {
                return Err(err(format!("query {q}: {} masks for a {span}-frame clip", m.len())));
            }
        }
        queries.push(QueryPrediction {
            embedding: rq.embedding.clone(),
            class_scores: rq.class_scores.clone(),
            objectness: rq.objectness,
            boxes: rq.boxes.clone(),
            masks: rq.masks.clone(),
        });
    }
    Ok(ClipPrediction {
        clip_index: raw.clip_index,
        first_frame: raw.frame_start,
        last_frame: raw.frame_end,
        queries,
    })
}

fn validate_video(video_id: VideoId, clips: &[ClipPrediction]) -> Result<(), PredictionError> {
    let mut dim: Option<usize> = None;
    let mut classes: Option<usize> = None;
    for (expected, clip) in clips.iter().enumerate() {
        let err = |m: String| PredictionError::Validation {
            video_id,
            clip_index: clip.clip_index,
            message: m,
        };
        if clip.clip_index != expected {
            return Err(err(format!(
                "clip indices are not contiguous from 0: expected {expected}, found {}",
                clip.clip_index
            )));
        }
        for (q, query) in clip.queries.iter().enumerate() {
            let d = *dim.get_or_insert(query.embedding.len());
            if query.embedding.len() != d {
                return Err(err(format!(
                    "query {q}: embedding dimension {} differs from {d}",
                    query.embedding.len()
                )));
            }
            let c = *classes.get_or_insert(query.class_scores.len());
            if query.class_scores.len() != c {
                return Err(err(format!(
                    "query {q}: {} class scores, expected {c}",
                    query.class_scores.len()
                )));
            }
        }
    }
    Ok(())
}

/// Writes clips in the JSON-lines layout, videos in key order.
pub fn write_predictions(
    videos: &BTreeMap<VideoId, Vec<ClipPrediction>>,
    mut out: impl Write,
) -> Result<usize, PredictionError> {
    let mut written = 0;
    for (&video_id, clips) in videos {
        for clip in clips {
            let raw = RawClip {
                video_id,
                clip_index: clip.clip_index,
                frame_start: clip.first_frame,
                frame_end: clip.last_frame,
                queries: clip
                    .queries
                    .iter()
                    .map(|q| RawQuery {
                        embedding: q.embedding.clone(),
                        class_scores: q.class_scores.clone(),
                        objectness: q.objectness,
                        boxes: q.boxes.clone(),
                        masks: q.masks.clone(),
                    })
                    .collect(),
            };
            let mut line = serde_json::to_vec(&raw).map_err(|e| PredictionError::Io(e.into()))?;
            line.push(b'\n');
            out.write_all(&line)?;
            written += line.len();
        }
    }
    Ok(written)
}
