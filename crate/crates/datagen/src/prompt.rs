//! Visual and text prompts for one object.

use std::fmt::Write as _;

use dvoc_core::{Dataset, FrameGeometry, ObjectId, VideoRecord};
use image::RgbImage;
use sha2::{Digest, Sha256};

use crate::frames::{draw_annotation, sample_frames, Annotation, DrawWarning, FrameError, FrameSource, Stroke};

/// Bumped whenever any template string below changes.
pub const TEMPLATE_VERSION: u32 = 1;

const SYSTEM_INTRO: &str = "You write a caption for one queried object in a video.
The queried object is marked in each frame with a {visual} drawn in red.";

const SYSTEM_RULES: &str = "Rules:
- Describe the queried object only: what it is, what it looks like, what it does and how it interacts with other objects or the scene.
- Do not mention the bounding boxes in the caption.
- Do not mention the drawn marks, the frames or the images themselves.
- If the object is small or partly hidden, describe what is visible and use the scene as context.
- Write one sentence of at most 30 words in the present tense.";

const SYSTEM_FORMAT: &str = "Input: the category of the queried object, its {cue} on each sampled frame{area}, and the categories of the other annotated objects.
Output: the caption alone on a single line, without quotes.";

const EXAMPLES: [&str; 4] = [
    "Category: dog. Caption: A small brown dog runs across the lawn and leaps to catch a red frisbee.",
    "Category: cup. Caption: A white ceramic cup sits on a wooden table next to a plate while a hand lifts it.",
    "Category: elephant. Caption: A distant grey elephant walks slowly behind the herd near the river bank.",
    "Category: bicycle. Caption: A blue bicycle is ridden along a city street by a man in a yellow jacket.",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VisualMode {
    Boxes,
    MaskBoundaries,
}

impl std::str::FromStr for VisualMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "boxes" | "box" => Ok(VisualMode::Boxes),
            "mask-boundaries" | "mask" => Ok(VisualMode::MaskBoundaries),
            other => Err(format!("unknown visual mode `{other}`")),
        }
    }
}

/// Localization cue written into the user text.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Cue {
    BoxCoords,
    CenterPoint,
}

impl std::str::FromStr for Cue {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "bbox" | "box" => Ok(Cue::BoxCoords),
            "center" => Ok(Cue::CenterPoint),
            other => Err(format!("unknown localization cue `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PromptOptions {
    pub visual: VisualMode,
    pub cue: Cue,
    pub include_area: bool,
    pub include_other_labels: bool,
    /// Extra textual examples appended to the system text, at most 3.
    pub few_shot: usize,
    /// Number of frames shown to the model.
    pub samples: usize,
    pub stroke: Stroke,
}

impl Default for PromptOptions {
    fn default() -> Self {
        Self {
            visual: VisualMode::Boxes,
            cue: Cue::BoxCoords,
            include_area: true,
            include_other_labels: true,
            few_shot: EXAMPLES.len() - 1,
            samples: 4,
            stroke: Stroke::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptBundle {
    pub system_text: String,
    pub user_text: String,
    pub frame_indices: Vec<usize>,
    pub visual_frames: Vec<RgbImage>,
    pub warnings: Vec<(usize, DrawWarning)>,
}

#[derive(Debug, thiserror::Error)]
pub enum PromptError {
    #[error("video {video_id} has no object {object_id}")]
    UnknownObject { video_id: u64, object_id: ObjectId },
    #[error("video {video_id} object {object_id} is absent from every sampled frame")]
    Absent { video_id: u64, object_id: ObjectId },
    #[error("invalid prompt options: {0}")]
    Options(String),
    #[error(transparent)]
    Frame(#[from] FrameError),
}

/// SHA-256 over the template version and every template string, hex encoded.
pub fn template_hash() -> String {
    let mut h = Sha256::new();
    h.update(TEMPLATE_VERSION.to_le_bytes());
    for part in [SYSTEM_INTRO, SYSTEM_RULES, SYSTEM_FORMAT].iter().chain(EXAMPLES.iter()) {
        h.update((part.len() as u64).to_le_bytes());
        h.update(part.as_bytes());
    }
    h.finalize().iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// The static instructions for the given options.
pub fn system_text(opts: &PromptOptions) -> String {
    let visual = match opts.visual {
        VisualMode::Boxes => "bounding box",
        VisualMode::MaskBoundaries => "segmentation outline",
    };
    let cue = match opts.cue {
        Cue::BoxCoords => "bounding box [x, y, width, height] in pixels",
        Cue::CenterPoint => "center point (x, y) in pixels",
    };
    let area = if opts.include_area { " with its area in pixels" } else { "" };
    let mut s = String::new();
    s.push_str(&SYSTEM_INTRO.replace("{visual}", visual));
    s.push_str("\n\n");
    s.push_str(SYSTEM_RULES);
    s.push_str("\n\n");
    s.push_str(&SYSTEM_FORMAT.replace("{cue}", cue).replace("{area}", area));
    s.push_str("\n\nExample:\n");
    s.push_str(EXAMPLES[0]);
    if opts.few_shot > 0 {
        s.push_str("\n\nMore examples:");
        for e in &EXAMPLES[1..=opts.few_shot] {
            s.push('\n');
            s.push_str(e);
        }
    }
    s
}

fn area_of(g: &FrameGeometry) -> u64 {
    match &g.mask {
        Some(m) => m.area(),
        None => g.bbox.area().round() as u64,
    }
}

/// Assembles the prompt for one object: sampled frames with the object drawn,
/// the static system text and the per-object user text.
pub fn build_prompt(
    dataset: &Dataset,
    video: &VideoRecord,
    object_id: ObjectId,
    opts: &PromptOptions,
    source: &dyn FrameSource,
) -> Result<PromptBundle, PromptError> {
    if opts.few_shot >= EXAMPLES.len() {
        return Err(PromptError::Options(format!(
            "few-shot count {} exceeds the {} available examples",
            opts.few_shot,
            EXAMPLES.len() - 1
        )));
    }
    if opts.samples == 0 {
        return Err(PromptError::Options("sample count must be at least 1".into()));
    }
    let object = video.object(object_id).ok_or(PromptError::UnknownObject {
        video_id: video.video_id,
        object_id,
    })?;
    let frame_indices = sample_frames(video.length, opts.samples);
    if !frame_indices.iter().any(|f| object.frames.contains_key(f)) {
        return Err(PromptError::Absent {
            video_id: video.video_id,
            object_id,
        });
    }
    let category = |id| dataset.category(id).map(|c| c.name.as_str()).unwrap_or("object");

    let mut user = String::new();
    let _ = writeln!(user, "Category of the queried object: {}.", category(object.category_id));
    let _ = writeln!(user, "Frame size: {}x{} pixels.", video.width, video.height);
    match opts.cue {
        Cue::BoxCoords => user.push_str("Bounding box [x, y, width, height] on each sampled frame:\n"),
        Cue::CenterPoint => user.push_str("Center point (x, y) on each sampled frame:\n"),
    }
    for &f in &frame_indices {
        match object.frames.get(&f) {
            None => {
                let _ = writeln!(user, "frame {f}: not visible");
            }
            Some(g) => {
                let b = g.bbox;
                let _ = match opts.cue {
                    Cue::BoxCoords => writeln!(
                        user,
                        "frame {f}: [{}, {}, {}, {}]",
                        b.x.round(),
                        b.y.round(),
                        b.w.round(),
                        b.h.round()
                    ),
                    Cue::CenterPoint => {
                        let (cx, cy) = b.center();
                        writeln!(user, "frame {f}: ({}, {})", cx.round(), cy.round())
                    }
                };
            }
        }
    }
    if opts.include_area {
        user.push_str("Area in pixels on each sampled frame:\n");
        for &f in &frame_indices {
            if let Some(g) = object.frames.get(&f) {
                let _ = writeln!(user, "frame {f}: {}", area_of(g));
            }
        }
    }
    if opts.include_other_labels {
        let mut others: Vec<&str> = video
            .objects
            .iter()
            .filter(|o| o.object_id != object_id)
            .map(|o| category(o.category_id))
            .collect();
        others.sort_unstable();
        others.dedup();
        if others.is_empty() {
            user.push_str("Other objects in the video: none.\n");
        } else {
            let _ = writeln!(user, "Other objects in the video: {}.", others.join(", "));
        }
    }

    let mut visual_frames = Vec::with_capacity(frame_indices.len());
    let mut warnings = Vec::new();
    for &f in &frame_indices {
        let mut img = source.load(video, f)?;
        if let Some(g) = object.frames.get(&f) {
            let annotation = match (&opts.visual, &g.mask) {
                (VisualMode::MaskBoundaries, Some(m)) => Annotation::MaskBoundary(m),
                _ => Annotation::Box(&g.bbox),
            };
            if let Some(w) = draw_annotation(&mut img, annotation, opts.stroke) {
                log::warn!("video {} object {object_id} frame {f}: {w:?}", video.video_id);
                warnings.push((f, w));
            }
        }
        visual_frames.push(img);
    }

    Ok(PromptBundle {
        system_text: system_text(opts),
        user_text: user,
        frame_indices,
        visual_frames,
        warnings,
    })
}
