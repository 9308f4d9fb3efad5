//! Reading and writing annotation files.
//!
//! Three layouts are supported:
//!
//! * [`Schema::Lvis`]: image dataset with `images[]`, `annotations[]` carrying an
//!   RLE or polygon `segmentation` and a `bbox`, and `categories[]`. Each image
//!   becomes a video of length 1.
//! * [`Schema::LvVis`]: video dataset with `videos[]`, `annotations[]` carrying
//!   per-frame `segmentations` and `bboxes` (with `null` for absent frames), and
//!   `categories[]`.
//! * [`Schema::VidStg`]: box-only video dataset with `videos[]` and
//!   `trajectories[]` listing sparse `{frame, bbox}` entries.
//!
//! Captions are read from an inline `caption` field or a top-level
//! `captions[]` list of `{annotation_id, caption}`; they are written inline.

use std::collections::{BTreeMap, HashSet};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::geometry::BBox;
use crate::mask::{mask_to_bbox, rasterize_polygons, CodecError, RleMask};
use crate::model::{Category, Dataset, FrameGeometry, GtObject, ObjectId, VideoId, VideoRecord};

/// Largest per-coordinate difference tolerated between an annotated box and
/// the tight box of its mask. Polygon annotations carry sub-pixel extents.
pub const BOX_TOLERANCE: f64 = 1.0;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Schema {
    Lvis,
    LvVis,
    VidStg,
}

impl std::str::FromStr for Schema {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "lvis" => Ok(Schema::Lvis),
            "lvvis" | "lv-vis" => Ok(Schema::LvVis),
            "vidstg" => Ok(Schema::VidStg),
            other => Err(format!("unknown dataset schema `{other}` (expected lvis, lvvis or vidstg)")),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("JSON parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error("video {video_id}{}: {message}", object_suffix(*.object_id))]
    Validation {
        video_id: VideoId,
        object_id: Option<ObjectId>,
        message: String,
    },
    #[error("dataset: {0}")]
    Invalid(String),
    #[error("video {video_id} object {object_id} has no caption")]
    MissingCaption { video_id: VideoId, object_id: ObjectId },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn object_suffix(id: Option<ObjectId>) -> String {
    id.map(|i| format!(" object {i}")).unwrap_or_default()
}

impl DatasetError {
    fn validation(video_id: VideoId, object_id: Option<ObjectId>, message: impl Into<String>) -> Self {
        DatasetError::Validation {
            video_id,
            object_id,
            message: message.into(),
        }
    }

    pub(crate) fn from_json(err: serde_json::Error, text: &str) -> Self {
        DatasetError::Parse {
            offset: byte_offset(text, err.line(), err.column()),
            message: err.to_string(),
        }
    }
}

/// Converts serde_json's 1-based line and column into a byte offset.
pub(crate) fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let line_start: usize = text
        .split_inclusive('\n')
        .take(line - 1)
        .map(str::len)
        .sum();
    (line_start + column.saturating_sub(1)).min(text.len())
}

#[derive(Serialize, Deserialize)]
struct RawCategory {
    id: u64,
    name: String,
}

#[derive(Deserialize)]
struct RawCaption {
    annotation_id: u64,
    caption: String,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum RawSegmentation {
    Rle(RleMask),
    Polygons(Vec<Vec<f64>>),
}

#[derive(Serialize, Deserialize)]
struct RawImage {
    id: u64,
    height: u32,
    width: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    file_name: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct RawImageAnnotation {
    id: u64,
    image_id: u64,
    category_id: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    segmentation: Option<RawSegmentation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bbox: Option<BBox>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    area: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    caption: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct RawVideo {
    id: u64,
    length: usize,
    height: u32,
    width: u32,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    file_names: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct RawVideoAnnotation {
    id: u64,
    video_id: u64,
    category_id: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    segmentations: Option<Vec<Option<RleMask>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bboxes: Option<Vec<Option<BBox>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    areas: Option<Vec<Option<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    caption: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct RawFrameBox {
    frame: usize,
    bbox: BBox,
}

#[derive(Serialize, Deserialize)]
struct RawTrajectory {
    id: u64,
    video_id: u64,
    category_id: u64,
    boxes: Vec<RawFrameBox>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    caption: Option<String>,
}

#[derive(Deserialize)]
struct RawDocument {
    #[serde(default)]
    images: Vec<RawImage>,
    #[serde(default)]
    videos: Vec<RawVideo>,
    #[serde(default)]
    annotations: Vec<serde_json::Value>,
    #[serde(default)]
    trajectories: Vec<RawTrajectory>,
    #[serde(default)]
    categories: Vec<RawCategory>,
    #[serde(default)]
    captions: Vec<RawCaption>,
}

/// Parses and validates an annotation document.
pub fn parse_video_dataset(text: &str, schema: Schema) -> Result<Dataset, DatasetError> {
    let doc: RawDocument = serde_json::from_str(text).map_err(|e| DatasetError::from_json(e, text))?;
    let categories: Vec<Category> = doc
        .categories
        .into_iter()
        .map(|c| Category { id: c.id, name: c.name })
        .collect();
    let mut extra_captions: BTreeMap<u64, String> = BTreeMap::new();
    for c in doc.captions {
        if extra_captions.insert(c.annotation_id, c.caption).is_some() {
            return Err(DatasetError::Invalid(format!(
                "annotation {} has more than one entry in captions[]",
                c.annotation_id
            )));
        }
    }

    let mut videos = match schema {
        Schema::Lvis => {
            let videos: Vec<VideoRecord> = doc
                .images
                .into_iter()
                .map(|im| VideoRecord {
                    video_id: im.id,
                    length: 1,
                    height: im.height,
                    width: im.width,
                    file_names: im.file_name.into_iter().collect(),
                    objects: Vec::new(),
                })
                .collect();
            let mut index = VideoIndex::new(videos)?;
            for value in doc.annotations {
                let ann: RawImageAnnotation =
                    serde_json::from_value(value).map_err(|e| DatasetError::Invalid(format!("annotation: {e}")))?;
                let video = index.get(ann.image_id, ann.id)?;
                let (h, w) = (video.height, video.width);
                let mask = match ann.segmentation {
                    None => None,
                    Some(RawSegmentation::Rle(m)) => Some(m),
                    Some(RawSegmentation::Polygons(p)) => Some(
                        rasterize_polygons(h, w, &p)
                            .map_err(|e| DatasetError::validation(ann.image_id, Some(ann.id), e.to_string()))?,
                    ),
                };
                let mut frames = BTreeMap::new();
                if let Some(g) = frame_geometry(ann.image_id, ann.id, ann.bbox, mask)? {
                    frames.insert(0, g);
                }
                video.objects.push(GtObject {
                    object_id: ann.id,
                    category_id: ann.category_id,
                    frames,
                    caption: ann.caption,
                });
            }
            index.into_videos()
        }
        Schema::LvVis => {
            let mut index = VideoIndex::new(doc.videos.into_iter().map(raw_video).collect())?;
            for value in doc.annotations {
                let ann: RawVideoAnnotation =
                    serde_json::from_value(value).map_err(|e| DatasetError::Invalid(format!("annotation: {e}")))?;
                let video = index.get(ann.video_id, ann.id)?;
                let n = video.length;
                let err = |m: String| DatasetError::validation(ann.video_id, Some(ann.id), m);
                if ann.segmentations.is_none() && ann.bboxes.is_none() {
                    return Err(err("annotation has neither segmentations nor bboxes".into()));
                }
                for (name, len) in [
                    ("segmentations", ann.segmentations.as_ref().map(Vec::len)),
                    ("bboxes", ann.bboxes.as_ref().map(Vec::len)),
                ] {
                    if let Some(len) = len {
                        if len != n {
                            return Err(err(format!("{name} has {len} entries for a video of {n} frames")));
                        }
                    }
                }
                let mut frames = BTreeMap::new();
                for f in 0..n {
                    let mask = ann.segmentations.as_ref().and_then(|s| s[f].clone());
                    let bbox = ann.bboxes.as_ref().and_then(|b| b[f]);
                    if let Some(g) = frame_geometry(ann.video_id, ann.id, bbox, mask)? {
                        frames.insert(f, g);
                    }
                }
                video.objects.push(GtObject {
                    object_id: ann.id,
                    category_id: ann.category_id,
                    frames,
                    caption: ann.caption,
                });
            }
            index.into_videos()
        }
        Schema::VidStg => {
            let mut index = VideoIndex::new(doc.videos.into_iter().map(raw_video).collect())?;
            for traj in doc.trajectories {
                let video = index.get(traj.video_id, traj.id)?;
                let mut frames = BTreeMap::new();
                for fb in traj.boxes {
                    if frames
                        .insert(fb.frame, FrameGeometry { bbox: fb.bbox, mask: None })
                        .is_some()
                    {
                        return Err(DatasetError::validation(
                            traj.video_id,
                            Some(traj.id),
                            format!("frame {} listed twice", fb.frame),
                        ));
                    }
                }
                video.objects.push(GtObject {
                    object_id: traj.id,
                    category_id: traj.category_id,
                    frames,
                    caption: traj.caption,
                });
            }
            index.into_videos()
        }
    };

    let mut seen_captions = HashSet::new();
    for video in &mut videos {
        for obj in &mut video.objects {
            if let Some(c) = extra_captions.get(&obj.object_id) {
                seen_captions.insert(obj.object_id);
                match &obj.caption {
                    Some(inline) if inline != c => {
                        return Err(DatasetError::validation(
                            video.video_id,
                            Some(obj.object_id),
                            "inline caption disagrees with captions[] entry",
                        ))
                    }
                    _ => obj.caption = Some(c.clone()),
                }
            }
        }
    }
    if let Some(id) = extra_captions.keys().find(|id| !seen_captions.contains(id)) {
        return Err(DatasetError::Invalid(format!("captions[] references unknown annotation {id}")));
    }

    let dataset = Dataset { categories, videos };
    validate(&dataset)?;
    Ok(dataset)
}

fn raw_video(v: RawVideo) -> VideoRecord {
    VideoRecord {
        video_id: v.id,
        length: v.length,
        height: v.height,
        width: v.width,
        file_names: v.file_names,
        objects: Vec::new(),
    }
}

/// Combines an annotated box and mask for one frame. An empty mask with no box
/// means the object is absent; a missing box is taken from the mask.
fn frame_geometry(
    video_id: VideoId,
    object_id: ObjectId,
    bbox: Option<BBox>,
    mask: Option<RleMask>,
) -> Result<Option<FrameGeometry>, DatasetError> {
    match (bbox, mask) {
        (None, None) => Ok(None),
        (Some(bbox), None) => Ok(Some(FrameGeometry { bbox, mask: None })),
        (bbox, Some(mask)) => match (mask_to_bbox(&mask), bbox) {
            (None, None) => Ok(None),
            (None, Some(b)) if b.is_empty() => Ok(None),
            (Some(tight), None) => Ok(Some(FrameGeometry {
                bbox: tight,
                mask: Some(mask),
            })),
            (tight, Some(b)) => {
                let agrees = tight.is_some_and(|t| t.max_abs_diff(&b) <= BOX_TOLERANCE);
                if !agrees {
                    return Err(DatasetError::validation(
                        video_id,
                        Some(object_id),
                        format!("box {:?} disagrees with the mask's tight box {:?}", <[f64; 4]>::from(b), tight.map(<[f64; 4]>::from)),
                    ));
                }
                Ok(Some(FrameGeometry { bbox: b, mask: Some(mask) }))
            }
        },
    }
}

struct VideoIndex {
    videos: Vec<VideoRecord>,
    by_id: BTreeMap<VideoId, usize>,
}

impl VideoIndex {
    fn new(videos: Vec<VideoRecord>) -> Result<Self, DatasetError> {
        let mut by_id = BTreeMap::new();
        for (i, v) in videos.iter().enumerate() {
            if by_id.insert(v.video_id, i).is_some() {
                return Err(DatasetError::validation(v.video_id, None, "duplicate video id"));
            }
        }
        Ok(Self { videos, by_id })
    }

    fn get(&mut self, video_id: VideoId, object_id: ObjectId) -> Result<&mut VideoRecord, DatasetError> {
        match self.by_id.get(&video_id) {
            Some(&i) => Ok(&mut self.videos[i]),
            None => Err(DatasetError::validation(video_id, Some(object_id), "annotation references an unknown video")),
        }
    }

    fn into_videos(self) -> Vec<VideoRecord> {
        self.videos
    }
}

/// Checks every dataset invariant.
pub fn validate(dataset: &Dataset) -> Result<(), DatasetError> {
    let mut cat_ids = HashSet::new();
    for c in &dataset.categories {
        if !cat_ids.insert(c.id) {
            return Err(DatasetError::Invalid(format!("duplicate category id {}", c.id)));
        }
        if c.name.trim().is_empty() {
            return Err(DatasetError::Invalid(format!("category {} has an empty name", c.id)));
        }
    }
    let mut object_ids = HashSet::new();
    for v in &dataset.videos {
        let vid = v.video_id;
        if v.length == 0 {
            return Err(DatasetError::validation(vid, None, "video has no frames"));
        }
        if !v.file_names.is_empty() && v.file_names.len() != v.length {
            return Err(DatasetError::validation(
                vid,
                None,
                format!("{} file names for {} frames", v.file_names.len(), v.length),
            ));
        }
        for o in &v.objects {
            let err = |m: String| DatasetError::validation(vid, Some(o.object_id), m);
            if !object_ids.insert(o.object_id) {
                return Err(err("duplicate annotation id".into()));
            }
            if !cat_ids.contains(&o.category_id) {
                return Err(err(format!("unknown category {}", o.category_id)));
            }
            if o.frames.is_empty() {
                return Err(err("object has no annotated frames".into()));
            }
            for (&f, g) in &o.frames {
                if f >= v.length {
                    return Err(err(format!("frame {f} outside a video of {} frames", v.length)));
                }
                if let Some(m) = &g.mask {
                    if (m.height(), m.width()) != (v.height, v.width) {
                        return Err(err(format!(
                            "frame {f} mask is {}x{} in a {}x{} video",
                            m.height(),
                            m.width(),
                            v.height,
                            v.width
                        )));
                    }
                    let agrees = mask_to_bbox(m).is_some_and(|t| t.max_abs_diff(&g.bbox) <= BOX_TOLERANCE);
                    if !agrees {
                        return Err(err(format!("frame {f} box disagrees with its mask")));
                    }
                }
            }
        }
    }
    Ok(())
}

impl From<CodecError> for DatasetError {
    fn from(e: CodecError) -> Self {
        DatasetError::Invalid(e.to_string())
    }
}

#[derive(Serialize)]
struct OutImageDocument<'a> {
    schema_version: u32,
    images: Vec<RawImage>,
    annotations: Vec<RawImageAnnotation>,
    categories: &'a [RawCategory],
}

#[derive(Serialize)]
struct OutVideoDocument<'a> {
    schema_version: u32,
    videos: Vec<RawVideo>,
    annotations: Vec<RawVideoAnnotation>,
    categories: &'a [RawCategory],
}

#[derive(Serialize)]
struct OutTrajectoryDocument<'a> {
    schema_version: u32,
    videos: Vec<RawVideo>,
    trajectories: Vec<RawTrajectory>,
    categories: &'a [RawCategory],
}

/// Serializes a dataset in the given layout. Returns the number of bytes written.
pub fn write_dataset(dataset: &Dataset, schema: Schema, mut out: impl Write) -> Result<usize, DatasetError> {
    let categories: Vec<RawCategory> = dataset
        .categories
        .iter()
        .map(|c| RawCategory {
            id: c.id,
            name: c.name.clone(),
        })
        .collect();
    let raw_videos = || {
        dataset
            .videos
            .iter()
            .map(|v| RawVideo {
                id: v.video_id,
                length: v.length,
                height: v.height,
                width: v.width,
                file_names: v.file_names.clone(),
            })
            .collect::<Vec<_>>()
    };
    let bytes = match schema {
        Schema::Lvis => {
            let mut images = Vec::new();
            let mut annotations = Vec::new();
            for v in &dataset.videos {
                if v.length != 1 {
                    return Err(DatasetError::validation(
                        v.video_id,
                        None,
                        "image layout needs single-frame videos",
                    ));
                }
                images.push(RawImage {
                    id: v.video_id,
                    height: v.height,
                    width: v.width,
                    file_name: v.file_names.first().cloned(),
                });
                for o in &v.objects {
                    let g = o.frames.get(&0);
                    annotations.push(RawImageAnnotation {
                        id: o.object_id,
                        image_id: v.video_id,
                        category_id: o.category_id,
                        segmentation: g.and_then(|g| g.mask.clone()).map(RawSegmentation::Rle),
                        bbox: g.map(|g| g.bbox),
                        area: g.map(area_of),
                        caption: o.caption.clone(),
                    });
                }
            }
            serde_json::to_vec(&OutImageDocument {
                schema_version: SCHEMA_VERSION,
                images,
                annotations,
                categories: &categories,
            })
        }
        Schema::LvVis => {
            let mut annotations = Vec::new();
            for v in &dataset.videos {
                for o in &v.objects {
                    let has_masks = o.frames.values().any(|g| g.mask.is_some());
                    let per_frame = |f: usize| o.frames.get(&f);
                    annotations.push(RawVideoAnnotation {
                        id: o.object_id,
                        video_id: v.video_id,
                        category_id: o.category_id,
                        segmentations: has_masks
                            .then(|| (0..v.length).map(|f| per_frame(f).and_then(|g| g.mask.clone())).collect()),
                        bboxes: Some((0..v.length).map(|f| per_frame(f).map(|g| g.bbox)).collect()),
                        areas: Some((0..v.length).map(|f| per_frame(f).map(area_of)).collect()),
                        caption: o.caption.clone(),
                    });
                }
            }
            serde_json::to_vec(&OutVideoDocument {
                schema_version: SCHEMA_VERSION,
                videos: raw_videos(),
                annotations,
                categories: &categories,
            })
        }
        Schema::VidStg => {
            let mut trajectories = Vec::new();
            for v in &dataset.videos {
                for o in &v.objects {
                    trajectories.push(RawTrajectory {
                        id: o.object_id,
                        video_id: v.video_id,
                        category_id: o.category_id,
                        boxes: o
                            .frames
                            .iter()
                            .map(|(&frame, g)| RawFrameBox { frame, bbox: g.bbox })
                            .collect(),
                        caption: o.caption.clone(),
                    });
                }
            }
            serde_json::to_vec(&OutTrajectoryDocument {
                schema_version: SCHEMA_VERSION,
                videos: raw_videos(),
                trajectories,
                categories: &categories,
            })
        }
    }
    .map_err(|e| DatasetError::Invalid(e.to_string()))?;
    out.write_all(&bytes)?;
    Ok(bytes.len())
}

/// Like [`write_dataset`] but requires every object to carry a caption.
pub fn write_captioned_dataset(dataset: &Dataset, schema: Schema, out: impl Write) -> Result<usize, DatasetError> {
    for v in &dataset.videos {
        if let Some(o) = v.objects.iter().find(|o| o.caption.is_none()) {
            return Err(DatasetError::MissingCaption {
                video_id: v.video_id,
                object_id: o.object_id,
            });
        }
    }
    write_dataset(dataset, schema, out)
}

fn area_of(g: &FrameGeometry) -> f64 {
    match &g.mask {
        Some(m) => m.area() as f64,
        None => g.bbox.area(),
    }
}
