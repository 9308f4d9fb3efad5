//! CHOTA: detection, association and captioning accuracy over IoU thresholds.
//!
//! Frames are matched by maximizing the IoU sum; a matched pair counts as a
//! true positive at threshold α when its IoU is at least α. Counts are pooled
//! over all frames and videos before the per-α ratios are taken, the ratios
//! are averaged over the α grid, and CHOTA is the cube root of the product of
//! the three averages.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assignment::{solve_thresholded, CostMatrix, Sense};
use crate::caption::CaptionSimilarity;
use crate::dataset::SCHEMA_VERSION;
use crate::geometry::{box_iou, BBox};
use crate::mask::{mask_iou, mask_to_bbox, CodecError};
use crate::model::{Dataset, FrameGeometry, TrackId, VideoId, VideoRecord, VideoTracks};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GeometryMode {
    Box,
    Mask,
}

impl GeometryMode {
    pub fn name(self) -> &'static str {
        match self {
            GeometryMode::Box => "box",
            GeometryMode::Mask => "mask",
        }
    }
}

impl std::str::FromStr for GeometryMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "box" | "bbox" => Ok(GeometryMode::Box),
            "mask" | "segm" => Ok(GeometryMode::Mask),
            other => Err(format!("unknown geometry mode `{other}`, expected box or mask")),
        }
    }
}

/// One detection without its mask in mask mode.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MissingMask {
    pub video_id: VideoId,
    pub frame: usize,
    /// `"gt"` or `"pred"`.
    pub side: &'static str,
    /// Object id for ground truth, track id for predictions.
    pub id: u64,
}

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{} detection(s) lack a mask: {}", .0.len(), format_missing(.0))]
    MissingMasks(Vec<MissingMask>),
    #[error("tracks reference video {0}, which is not in the ground truth")]
    UnknownVideo(VideoId),
    #[error("tracks list video {0} more than once")]
    DuplicateVideo(VideoId),
    #[error("video {video_id} track {track_id}: frame {frame} is past the video length {length}")]
    FrameRange {
        video_id: VideoId,
        track_id: TrackId,
        frame: usize,
        length: usize,
    },
    #[error("video {video_id} frame {frame}: {source}")]
    Codec {
        video_id: VideoId,
        frame: usize,
        source: CodecError,
    },
}

fn format_missing(list: &[MissingMask]) -> String {
    const SHOWN: usize = 20;
    let mut s = String::new();
    for (i, m) in list.iter().take(SHOWN).enumerate() {
        if i > 0 {
            s.push_str(", ");
        }
        let _ = write!(s, "video {} frame {} {} {}", m.video_id, m.frame, m.side, m.id);
    }
    if list.len() > SHOWN {
        let _ = write!(s, ", and {} more", list.len() - SHOWN);
    }
    s
}

/// 0.05, 0.10, ..., 0.95.
pub fn default_alphas() -> Vec<f64> {
    (1..=19).map(|i| i as f64 / 20.0).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub alphas: Vec<f64>,
    pub geometry: GeometryMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            alphas: default_alphas(),
            geometry: GeometryMode::Box,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.alphas.is_empty() {
            return Err(EvalError::Config("α list is empty".into()));
        }
        if let Some(a) = self.alphas.iter().find(|a| !(**a > 0.0 && **a <= 1.0)) {
            return Err(EvalError::Config(format!("α = {a} is outside (0, 1]")));
        }
        if self.alphas.windows(2).any(|w| w[0] >= w[1]) {
            return Err(EvalError::Config("α list must be strictly increasing".into()));
        }
        Ok(())
    }
}

/// Outcome of matching one frame at one threshold. Indices refer to the
/// slices passed to [`match_frame`].
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct FrameMatchSet {
    /// (pred, gt) pairs, sorted by pred.
    pub true_positives: Vec<(usize, usize)>,
    pub false_positives: Vec<usize>,
    pub false_negatives: Vec<usize>,
}

/// IoU of two detections under the chosen geometry. `None` marks a missing mask.
fn detection_iou(a: &FrameGeometry, b: &FrameGeometry, mode: GeometryMode) -> Option<Result<f64, CodecError>> {
    match mode {
        GeometryMode::Box => Some(Ok(box_iou(&a.bbox, &b.bbox))),
        GeometryMode::Mask => Some(mask_iou(a.mask.as_ref()?, b.mask.as_ref()?)),
    }
}

/// Maximum-IoU-sum matching of one frame, before any threshold is applied.
/// Returns `(pred, gt, iou)` for every assigned pair with positive IoU.
fn solve_frame(
    preds: &[&FrameGeometry],
    gts: &[&FrameGeometry],
    mode: GeometryMode,
) -> Result<Vec<(usize, usize, f64)>, CodecError> {
    if preds.is_empty() || gts.is_empty() {
        return Ok(Vec::new());
    }
    // tight boxes for a cheap disjointness test
    let extent = |g: &FrameGeometry| match mode {
        GeometryMode::Box => Some(g.bbox),
        GeometryMode::Mask => g.mask.as_ref().and_then(mask_to_bbox),
    };
    let pb: Vec<Option<BBox>> = preds.iter().map(|g| extent(g)).collect();
    let gb: Vec<Option<BBox>> = gts.iter().map(|g| extent(g)).collect();
    let mut values = vec![0.0; preds.len() * gts.len()];
    for (i, p) in preds.iter().enumerate() {
        for (j, g) in gts.iter().enumerate() {
            let (Some(a), Some(b)) = (pb[i], gb[j]) else {
                continue;
            };
            if a.right() <= b.x || b.right() <= a.x || a.bottom() <= b.y || b.bottom() <= a.y {
                continue;
            }
            values[i * gts.len() + j] = detection_iou(p, g, mode).expect("masks checked")?;
        }
    }
    let m = CostMatrix::new(preds.len(), gts.len(), values, Sense::Maximize).expect("IoU values are finite");
    let pairs = solve_thresholded(&m, f64::MIN_POSITIVE).expect("maximize matrix");
    Ok(pairs.into_iter().map(|(p, g)| (p, g, m.get(p, g))).collect())
}

/// Matches one frame at threshold `alpha`: pairs from the maximum-IoU-sum
/// assignment with IoU ≥ α are true positives, everything else is left over.
pub fn match_frame(
    preds: &[&FrameGeometry],
    gts: &[&FrameGeometry],
    alpha: f64,
    mode: GeometryMode,
) -> Result<FrameMatchSet, EvalError> {
    if mode == GeometryMode::Mask {
        // ids are slice indices here; the frame is unknown to this function
        let list: Vec<MissingMask> = [(gts, "gt"), (preds, "pred")]
            .into_iter()
            .flat_map(|(gs, side)| {
                gs.iter().enumerate().filter(|(_, g)| g.mask.is_none()).map(move |(i, _)| MissingMask {
                    video_id: 0,
                    frame: 0,
                    side,
                    id: i as u64,
                })
            })
            .collect();
        if !list.is_empty() {
            return Err(EvalError::MissingMasks(list));
        }
    }
    let solved = solve_frame(preds, gts, mode).map_err(|source| EvalError::Codec {
        video_id: 0,
        frame: 0,
        source,
    })?;
    let true_positives: Vec<(usize, usize)> =
        solved.iter().filter(|t| t.2 >= alpha).map(|&(p, g, _)| (p, g)).collect();
    let mut pred_used = vec![false; preds.len()];
    let mut gt_used = vec![false; gts.len()];
    for &(p, g) in &true_positives {
        pred_used[p] = true;
        gt_used[g] = true;
    }
    Ok(FrameMatchSet {
        true_positives,
        false_positives: (0..preds.len()).filter(|&p| !pred_used[p]).collect(),
        false_negatives: (0..gts.len()).filter(|&g| !gt_used[g]).collect(),
    })
}

/// Pooled counts for one threshold.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AlphaCounts {
    pub tp: u64,
    pub fn_: u64,
    pub fp: u64,
    /// Σ over true positives of TPA / (TPA + FNA + FPA).
    pub ass_sum: f64,
    /// Σ over true positives with a captioned gt of the caption similarity.
    pub cap_sum: f64,
    /// Ground-truth detections whose object carries a caption (TP_capt + FN_capt).
    pub gt_captioned: u64,
}

impl AlphaCounts {
    fn add(&mut self, o: &AlphaCounts) {
        self.tp += o.tp;
        self.fn_ += o.fn_;
        self.fp += o.fp;
        self.ass_sum += o.ass_sum;
        self.cap_sum += o.cap_sum;
        self.gt_captioned += o.gt_captioned;
    }
}

/// `TP / (TP + FN + FP)`, 1 when all three are zero.
pub fn det_accuracy(c: &AlphaCounts) -> f64 {
    let d = c.tp + c.fn_ + c.fp;
    if d == 0 {
        1.0
    } else {
        c.tp as f64 / d as f64
    }
}

/// Mean of `A(c)` over true positives; 1 with no detections at all, 0 when
/// detections exist but none matched.
pub fn ass_accuracy(c: &AlphaCounts) -> f64 {
    if c.tp == 0 {
        return if c.fn_ + c.fp == 0 { 1.0 } else { 0.0 };
    }
    c.ass_sum / c.tp as f64
}

/// `Σ sim / (TP_capt + FN_capt + FP)`, 1 when the denominator is zero.
pub fn cap_accuracy(c: &AlphaCounts) -> f64 {
    let d = c.gt_captioned + c.fp;
    if d == 0 {
        1.0
    } else {
        c.cap_sum / d as f64
    }
}

/// Geometric mean of the three components.
pub fn chota(det_a: f64, ass_a: f64, cap_a: f64) -> f64 {
    (det_a * ass_a * cap_a).cbrt()
}

/// Components in [0, 100].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub det_a: f64,
    pub ass_a: f64,
    pub cap_a: f64,
    pub chota: f64,
}

/// Per-α components in [0, 100], aligned with the report's α list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Curves {
    pub det_a: Vec<f64>,
    pub ass_a: Vec<f64>,
    pub cap_a: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoReport {
    pub video_id: VideoId,
    pub summary: Summary,
    pub curves: Curves,
    pub counts: Vec<AlphaCounts>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub geometry: GeometryMode,
    pub alphas: Vec<f64>,
    pub summary: Summary,
    pub curves: Curves,
    pub counts: Vec<AlphaCounts>,
    pub videos: Vec<VideoReport>,
}

fn summarize(counts: &[AlphaCounts]) -> (Summary, Curves) {
    let curve = |f: fn(&AlphaCounts) -> f64| counts.iter().map(|c| 100.0 * f(c)).collect::<Vec<_>>();
    let curves = Curves {
        det_a: curve(det_accuracy),
        ass_a: curve(ass_accuracy),
        cap_a: curve(cap_accuracy),
    };
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (d, a, c) = (mean(&curves.det_a), mean(&curves.ass_a), mean(&curves.cap_a));
    (
        Summary {
            det_a: d,
            ass_a: a,
            cap_a: c,
            chota: chota(d, a, c),
        },
        curves,
    )
}

impl EvalReport {
    /// Per-α curves as CSV with header `alpha,det_a,ass_a,cap_a`.
    pub fn curves_csv(&self) -> String {
        let mut s = String::from("alpha,det_a,ass_a,cap_a\n");
        for (i, a) in self.alphas.iter().enumerate() {
            let _ = writeln!(
                s,
                "{a:.2},{:.6},{:.6},{:.6}",
                self.curves.det_a[i], self.curves.ass_a[i], self.curves.cap_a[i]
            );
        }
        s
    }

    /// Plain-text summary table followed by the per-video breakdown.
    pub fn render_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "geometry: {}  thresholds: {}", self.geometry.name(), self.alphas.len());
        let _ = writeln!(s, "{:>10} {:>8} {:>8} {:>8} {:>8}", "video", "CHOTA", "DetA", "AssA", "CapA");
        let row = |s: &mut String, label: &str, m: &Summary| {
            let _ = writeln!(
                s,
                "{label:>10} {:>8.2} {:>8.2} {:>8.2} {:>8.2}",
                m.chota, m.det_a, m.ass_a, m.cap_a
            );
        };
        row(&mut s, "all", &self.summary);
        for v in &self.videos {
            row(&mut s, &v.video_id.to_string(), &v.summary);
        }
        s
    }
}

/// Detections of one video, grouped by frame.
struct VideoFrames<'a> {
    gts: Vec<Vec<(usize, &'a FrameGeometry)>>,
    preds: Vec<Vec<(usize, &'a FrameGeometry)>>,
}

fn collect_frames<'a>(
    video: &'a VideoRecord,
    tracks: &'a [crate::model::Track],
    mode: GeometryMode,
    missing: &mut Vec<MissingMask>,
) -> Result<VideoFrames<'a>, EvalError> {
    let mut out = VideoFrames {
        gts: vec![Vec::new(); video.length],
        preds: vec![Vec::new(); video.length],
    };
    for (i, o) in video.objects.iter().enumerate() {
        for (&f, g) in &o.frames {
            if mode == GeometryMode::Mask && g.mask.is_none() {
                missing.push(MissingMask {
                    video_id: video.video_id,
                    frame: f,
                    side: "gt",
                    id: o.object_id,
                });
            }
            out.gts[f].push((i, g));
        }
    }
    for (i, t) in tracks.iter().enumerate() {
        for (&f, g) in &t.frames {
            if f >= video.length {
                return Err(EvalError::FrameRange {
                    video_id: video.video_id,
                    track_id: t.track_id,
                    frame: f,
                    length: video.length,
                });
            }
            if mode == GeometryMode::Mask && g.mask.is_none() {
                missing.push(MissingMask {
                    video_id: video.video_id,
                    frame: f,
                    side: "pred",
                    id: t.track_id,
                });
            }
            out.preds[f].push((i, g));
        }
    }
    Ok(out)
}

fn evaluate_video(
    video: &VideoRecord,
    tracks: &[crate::model::Track],
    cfg: &EvalConfig,
    sim: &dyn CaptionSimilarity,
) -> Result<Vec<AlphaCounts>, EvalError> {
    let mut missing = Vec::new();
    let frames = collect_frames(video, tracks, cfg.geometry, &mut missing)?;
    if !missing.is_empty() {
        return Err(EvalError::MissingMasks(missing));
    }

    // (pred track, gt object, iou) for every frame-level assignment
    let mut matched: Vec<(usize, usize, f64)> = Vec::new();
    for (f, (gts, preds)) in frames.gts.iter().zip(&frames.preds).enumerate() {
        let g: Vec<&FrameGeometry> = gts.iter().map(|d| d.1).collect();
        let p: Vec<&FrameGeometry> = preds.iter().map(|d| d.1).collect();
        let solved = solve_frame(&p, &g, cfg.geometry).map_err(|source| EvalError::Codec {
            video_id: video.video_id,
            frame: f,
            source,
        })?;
        matched.extend(solved.into_iter().map(|(pi, gi, iou)| (preds[pi].0, gts[gi].0, iou)));
    }

    let gt_len: Vec<u64> = video.objects.iter().map(|o| o.frames.len() as u64).collect();
    let pred_len: Vec<u64> = tracks.iter().map(|t| t.frames.len() as u64).collect();
    let total_gt: u64 = gt_len.iter().sum();
    let total_pred: u64 = pred_len.iter().sum();
    let gt_captioned: u64 = video
        .objects
        .iter()
        .zip(&gt_len)
        .filter(|(o, _)| o.caption.is_some())
        .map(|(_, n)| n)
        .sum();

    let mut sims: HashMap<(usize, usize), f64> = HashMap::new();
    let mut pair_sim = |p: usize, g: usize| -> Option<f64> {
        let reference = video.objects[g].caption.as_deref()?;
        Some(*sims.entry((p, g)).or_insert_with(|| match tracks[p].caption.as_deref() {
            Some(c) => sim.similarity(c, reference),
            None => 0.0,
        }))
    };

    let mut out = Vec::with_capacity(cfg.alphas.len());
    for &alpha in &cfg.alphas {
        let mut tpa: BTreeMap<(usize, usize), u64> = BTreeMap::new();
        for &(p, g, iou) in &matched {
            if iou >= alpha {
                *tpa.entry((p, g)).or_insert(0) += 1;
            }
        }
        let tp: u64 = tpa.values().sum();
        let mut c = AlphaCounts {
            tp,
            fn_: total_gt - tp,
            fp: total_pred - tp,
            gt_captioned,
            ..Default::default()
        };
        for (&(p, g), &n) in &tpa {
            let n_f = n as f64;
            c.ass_sum += n_f * n_f / (gt_len[g] + pred_len[p] - n) as f64;
            if let Some(s) = pair_sim(p, g) {
                c.cap_sum += n_f * s;
            }
        }
        out.push(c);
    }
    Ok(out)
}

/// Evaluates tracks against ground truth. Videos absent from `tracks` count
/// as having no predictions.
pub fn evaluate(
    gt: &Dataset,
    tracks: &[VideoTracks],
    cfg: &EvalConfig,
    sim: &dyn CaptionSimilarity,
) -> Result<EvalReport, EvalError> {
    cfg.validate()?;
    let mut by_video: HashMap<VideoId, &VideoTracks> = HashMap::new();
    for v in tracks {
        if gt.video(v.video_id).is_none() {
            return Err(EvalError::UnknownVideo(v.video_id));
        }
        if by_video.insert(v.video_id, v).is_some() {
            return Err(EvalError::DuplicateVideo(v.video_id));
        }
    }

    let results: Vec<Result<Vec<AlphaCounts>, EvalError>> = gt
        .videos
        .par_iter()
        .map(|v| {
            let t = by_video.get(&v.video_id).map(|t| t.tracks.as_slice()).unwrap_or(&[]);
            evaluate_video(v, t, cfg, sim)
        })
        .collect();

    let mut missing = Vec::new();
    let mut per_video = Vec::with_capacity(results.len());
    for (v, r) in gt.videos.iter().zip(results) {
        match r {
            Ok(c) => per_video.push((v.video_id, c)),
            Err(EvalError::MissingMasks(m)) => missing.extend(m),
            Err(e) => return Err(e),
        }
    }
    if !missing.is_empty() {
        return Err(EvalError::MissingMasks(missing));
    }

    let mut total = vec![AlphaCounts::default(); cfg.alphas.len()];
    let mut videos = Vec::with_capacity(per_video.len());
    for (video_id, counts) in per_video {
        for (t, c) in total.iter_mut().zip(&counts) {
            t.add(c);
        }
        let (summary, curves) = summarize(&counts);
        videos.push(VideoReport {
            video_id,
            summary,
            curves,
            counts,
        });
    }
    let (summary, curves) = summarize(&total);
    Ok(EvalReport {
        schema_version: SCHEMA_VERSION,
        geometry: cfg.geometry,
        alphas: cfg.alphas.clone(),
        summary,
        curves,
        counts: total,
        videos,
    })
}

/// Ground-truth captions of every object, the corpus for caption statistics.
pub fn gt_captions(gt: &Dataset) -> Vec<&str> {
    gt.videos
        .iter()
        .flat_map(|v| &v.objects)
        .filter_map(|o| o.caption.as_deref())
        .collect()
}
