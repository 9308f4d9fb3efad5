//! Domain types shared by the tracker, evaluator and caption pipeline.

use std::collections::BTreeMap;

use crate::geometry::BBox;
use crate::mask::RleMask;

pub type VideoId = u64;
pub type ObjectId = u64;
pub type CategoryId = u64;
pub type TrackId = u64;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Category {
    pub id: CategoryId,
    pub name: String,
}

/// Geometry of one object on one frame. When a mask is present the box is
/// its tight bounding box.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameGeometry {
    pub bbox: BBox,
    pub mask: Option<RleMask>,
}

/// Ground-truth trajectory: per-frame masks and boxes, a category and an
/// optional caption.
#[derive(Debug, Clone, PartialEq)]
pub struct GtObject {
    pub object_id: ObjectId,
    pub category_id: CategoryId,
    pub frames: BTreeMap<usize, FrameGeometry>,
    pub caption: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoRecord {
    pub video_id: VideoId,
    /// Frame count N.
    pub length: usize,
    pub height: u32,
    pub width: u32,
    /// Frame file references, either empty or one per frame.
    pub file_names: Vec<String>,
    pub objects: Vec<GtObject>,
}

impl VideoRecord {
    pub fn object(&self, id: ObjectId) -> Option<&GtObject> {
        self.objects.iter().find(|o| o.object_id == id)
    }
}

/// A parsed annotation file: categories plus videos (images are videos of length 1).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub categories: Vec<Category>,
    pub videos: Vec<VideoRecord>,
}

impl Dataset {
    pub fn category(&self, id: CategoryId) -> Option<&Category> {
        self.categories.iter().find(|c| c.id == id)
    }

    pub fn video(&self, id: VideoId) -> Option<&VideoRecord> {
        self.videos.iter().find(|v| v.video_id == id)
    }

    pub fn object_count(&self) -> usize {
        self.videos.iter().map(|v| v.objects.len()).sum()
    }

    pub fn caption_count(&self) -> usize {
        self.videos
            .iter()
            .flat_map(|v| &v.objects)
            .filter(|o| o.caption.is_some())
            .count()
    }
}

/// One query of one clip as emitted by the segmentation model.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryPrediction {
    pub embedding: Vec<f32>,
    pub class_scores: Vec<f64>,
    pub objectness: f64,
    /// One entry per clip frame; `None` where the model predicts nothing.
    pub boxes: Vec<Option<BBox>>,
    pub masks: Option<Vec<Option<RleMask>>>,
}

impl QueryPrediction {
    /// Geometry on the `offset`-th frame of the clip. A missing box is
    /// recovered from the mask when one is present.
    pub fn geometry(&self, offset: usize) -> Option<FrameGeometry> {
        let mask = self
            .masks
            .as_ref()
            .and_then(|m| m.get(offset).cloned().flatten());
        let bbox = self
            .boxes
            .get(offset)
            .copied()
            .flatten()
            .or_else(|| mask.as_ref().and_then(crate::mask::mask_to_bbox))?;
        Some(FrameGeometry { bbox, mask })
    }
}

/// Model output for a block of consecutive frames `first_frame..=last_frame`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipPrediction {
    pub clip_index: usize,
    pub first_frame: usize,
    pub last_frame: usize,
    pub queries: Vec<QueryPrediction>,
}

impl ClipPrediction {
    /// Number of frames T in the clip.
    pub fn span(&self) -> usize {
        self.last_frame + 1 - self.first_frame
    }
}

/// A video-level trajectory assembled by the tracker.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Track {
    pub track_id: TrackId,
    /// clip index → query index within that clip.
    pub clips: BTreeMap<usize, usize>,
    /// clip index → fused score S.
    pub scores: BTreeMap<usize, f64>,
    pub frames: BTreeMap<usize, FrameGeometry>,
    /// Aggregated video-level query, when computed.
    pub embedding: Option<Vec<f64>>,
    pub caption: Option<String>,
}

/// Tracks of one video.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct VideoTracks {
    pub video_id: VideoId,
    pub tracks: Vec<Track>,
}
