//! Tracks file: the tracker's output and the evaluator's prediction input.
//!
//! ```json
//! {"schema_version": 1,
//!  "videos": [{"video_id": 3, "tracks": [
//!     {"track_id": 0, "clips": [[0, 4], [1, 2]], "scores": [[0, 0.81], [1, 0.77]],
//!      "frames": [{"frame": 0, "bbox": [x, y, w, h], "mask": rle}],
//!      "embedding": [..], "caption": "a dog runs"}]}]}
//! ```

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::dataset::{byte_offset, SCHEMA_VERSION};
use crate::geometry::BBox;
use crate::mask::RleMask;
use crate::model::{FrameGeometry, Track, TrackId, VideoId, VideoTracks};

#[derive(Debug, thiserror::Error)]
pub enum TracksError {
    #[error("JSON parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error("video {video_id} track {track_id}: {message}")]
    Validation {
        video_id: VideoId,
        track_id: TrackId,
        message: String,
    },
    #[error("video {0} appears more than once")]
    DuplicateVideo(VideoId),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Serialize, Deserialize)]
struct RawFrame {
    frame: usize,
    bbox: BBox,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mask: Option<RleMask>,
}

#[derive(Serialize, Deserialize)]
struct RawTrack {
    track_id: TrackId,
    #[serde(default)]
    clips: Vec<(usize, usize)>,
    #[serde(default)]
    scores: Vec<(usize, f64)>,
    frames: Vec<RawFrame>,
    #[serde(default)]
    embedding: Option<Vec<f64>>,
    #[serde(default)]
    caption: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct RawVideoTracks {
    video_id: VideoId,
    tracks: Vec<RawTrack>,
}

#[derive(Serialize, Deserialize)]
struct RawTracksFile {
    #[serde(default = "default_version")]
    schema_version: u32,
    videos: Vec<RawVideoTracks>,
}

fn default_version() -> u32 {
    SCHEMA_VERSION
}

pub fn parse_tracks(text: &str) -> Result<Vec<VideoTracks>, TracksError> {
    let raw: RawTracksFile = serde_json::from_str(text).map_err(|e| TracksError::Parse {
        offset: byte_offset(text, e.line(), e.column()),
        message: e.to_string(),
    })?;
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::with_capacity(raw.videos.len());
    for v in raw.videos {
        if !seen.insert(v.video_id) {
            return Err(TracksError::DuplicateVideo(v.video_id));
        }
        let mut ids = std::collections::HashSet::new();
        let mut tracks = Vec::with_capacity(v.tracks.len());
        for t in v.tracks {
            let err = |m: String| TracksError::Validation {
                video_id: v.video_id,
                track_id: t.track_id,
                message: m,
            };
            if !ids.insert(t.track_id) {
                return Err(err("duplicate track id".into()));
            }
            let mut frames = BTreeMap::new();
            for f in t.frames {
                if frames
                    .insert(f.frame, FrameGeometry { bbox: f.bbox, mask: f.mask })
                    .is_some()
                {
                    return Err(err(format!("frame {} listed twice", f.frame)));
                }
            }
            let clips: BTreeMap<usize, usize> = t.clips.into_iter().collect();
            let scores: BTreeMap<usize, f64> = t.scores.into_iter().collect();
            if let Some((c, s)) = scores.iter().find(|(_, s)| !(0.0..=1.0).contains(*s)) {
                return Err(err(format!("clip {c} score {s} outside [0, 1]")));
            }
            tracks.push(Track {
                track_id: t.track_id,
                clips,
                scores,
                frames,
                embedding: t.embedding,
                caption: t.caption,
            });
        }
        out.push(VideoTracks {
            video_id: v.video_id,
            tracks,
        });
    }
    Ok(out)
}

pub fn write_tracks(videos: &[VideoTracks], mut out: impl Write) -> Result<usize, TracksError> {
    let raw = RawTracksFile {
        schema_version: SCHEMA_VERSION,
        videos: videos
            .iter()
            .map(|v| RawVideoTracks {
                video_id: v.video_id,
                tracks: v
                    .tracks
                    .iter()
                    .map(|t| RawTrack {
                        track_id: t.track_id,
                        clips: t.clips.iter().map(|(&c, &q)| (c, q)).collect(),
                        scores: t.scores.iter().map(|(&c, &s)| (c, s)).collect(),
                        frames: t
                            .frames
                            .iter()
                            .map(|(&frame, g)| RawFrame {
                                frame,
                                bbox: g.bbox,
                                mask: g.mask.clone(),
                            })
                            .collect(),
                        embedding: t.embedding.clone(),
                        caption: t.caption.clone(),
                    })
                    .collect(),
            })
            .collect(),
    };
    let bytes = serde_json::to_vec(&raw).map_err(|e| TracksError::Io(e.into()))?;
    out.write_all(&bytes)?;
    Ok(bytes.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip() {
        let mut t = Track {
            track_id: 4,
            caption: Some("a grey elephant walks".into()),
            embedding: Some(vec![0.25, -1.0e-3]),
            ..Default::default()
        };
        t.clips.insert(0, 3);
        t.scores.insert(0, 0.75);
        t.frames.insert(
            2,
            FrameGeometry {
                bbox: BBox::new(1.0, 1.0, 2.0, 2.0).unwrap(),
                mask: Some(RleMask::from_box(4, 4, &BBox::new(1.0, 1.0, 2.0, 2.0).unwrap())),
            },
        );
        let videos = vec![VideoTracks { video_id: 9, tracks: vec![t] }];
        let mut buf = Vec::new();
        write_tracks(&videos, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("{\"schema_version\":1"));
        assert_eq!(parse_tracks(&text).unwrap(), videos);
    }

    #[test]
    fn duplicate_track_ids() {
        let text = r#"{"videos": [{"video_id": 1, "tracks": [
            {"track_id": 0, "frames": []}, {"track_id": 0, "frames": []}]}]}"#;
        assert!(matches!(parse_tracks(text), Err(TracksError::Validation { track_id: 0, .. })));
    }
}
