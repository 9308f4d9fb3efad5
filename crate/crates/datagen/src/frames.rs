//! Frame sampling, loading, annotation drawing and re-encoding.

use std::io::Cursor;
use std::path::{Path, PathBuf};

use dvoc_core::mask::rle_decode;
use dvoc_core::{BBox, RleMask, VideoRecord};
use image::imageops::FilterType;
use image::{ImageFormat, Rgb, RgbImage};

/// Uniformly spread frame indices: `round(i (N-1) / (k-1))` for `i < k`,
/// or every frame when `N <= k`.
pub fn sample_frames(n: usize, k: usize) -> Vec<usize> {
    if n == 0 || k == 0 {
        return Vec::new();
    }
    if n <= k {
        return (0..n).collect();
    }
    if k == 1 {
        return vec![n / 2];
    }
    let mut out: Vec<usize> = (0..k).map(|i| (2 * i * (n - 1) + (k - 1)) / (2 * (k - 1))).collect();
    out.dedup();
    out
}

#[derive(Debug, thiserror::Error)]
pub enum FrameError {
    #[error("video {video_id} has no file for frame {frame}")]
    Missing { video_id: u64, frame: usize },
    #[error("{path}: {source}")]
    Decode {
        path: PathBuf,
        source: image::ImageError,
    },
    #[error("image encoding failed: {0}")]
    Encode(image::ImageError),
}

/// Where frame pixels come from.
pub trait FrameSource: Sync {
    fn load(&self, video: &VideoRecord, frame: usize) -> Result<RgbImage, FrameError>;
}

/// Pre-extracted frames on disk: `root / file_names[frame]`.
#[derive(Debug, Clone)]
pub struct DirFrameSource {
    root: PathBuf,
}

impl DirFrameSource {
    pub fn new(root: impl AsRef<Path>) -> Self {
        Self {
            root: root.as_ref().to_path_buf(),
        }
    }
}

impl FrameSource for DirFrameSource {
    fn load(&self, video: &VideoRecord, frame: usize) -> Result<RgbImage, FrameError> {
        let name = video.file_names.get(frame).ok_or(FrameError::Missing {
            video_id: video.video_id,
            frame,
        })?;
        let path = self.root.join(name);
        image::open(&path)
            .map(|img| img.to_rgb8())
            .map_err(|source| FrameError::Decode { path, source })
    }
}

/// Frames of a single color at the video's size. Useful for dry runs.
#[derive(Debug, Clone, Copy)]
pub struct SolidFrames(pub [u8; 3]);

impl FrameSource for SolidFrames {
    fn load(&self, video: &VideoRecord, _frame: usize) -> Result<RgbImage, FrameError> {
        Ok(RgbImage::from_pixel(video.width, video.height, Rgb(self.0)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Stroke {
    pub width: u32,
    pub color: [u8; 3],
}

impl Default for Stroke {
    fn default() -> Self {
        Self {
            width: 3,
            color: [255, 0, 0],
        }
    }
}

pub enum Annotation<'a> {
    Box(&'a BBox),
    MaskBoundary(&'a RleMask),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DrawWarning {
    EmptyGeometry,
    SizeMismatch,
}

/// Pixel bounds `[x0, x1) x [y0, y1)` of a box, before clipping.
fn box_bounds(b: &BBox) -> (i64, i64, i64, i64) {
    (
        b.x.round() as i64,
        b.y.round() as i64,
        b.right().round() as i64,
        b.bottom().round() as i64,
    )
}

/// Whether `(x, y)` lies on the stroke band of a box: inside the box and
/// closer than `width` pixels to one of its edges.
pub fn in_box_stroke(b: &BBox, width: u32, x: u32, y: u32) -> bool {
    let (x0, y0, x1, y1) = box_bounds(b);
    let (x, y, s) = (x as i64, y as i64, width as i64);
    if x < x0 || x >= x1 || y < y0 || y >= y1 {
        return false;
    }
    x < x0 + s || x >= x1 - s || y < y0 + s || y >= y1 - s
}

/// Draws the annotation in place. The box stroke lies inside the box; mask
/// boundary pixels (foreground pixels with a background 4-neighbour inside
/// the frame) are dilated by a square of side `2 * ((width - 1) / 2) + 1`.
/// Returns a warning instead of drawing when the geometry is empty or the
/// mask size differs from the frame.
pub fn draw_annotation(frame: &mut RgbImage, annotation: Annotation<'_>, stroke: Stroke) -> Option<DrawWarning> {
    let color = Rgb(stroke.color);
    let (w, h) = frame.dimensions();
    match annotation {
        Annotation::Box(b) => {
            let (x0, y0, x1, y1) = box_bounds(b);
            if x1 <= x0 || y1 <= y0 || stroke.width == 0 {
                return Some(DrawWarning::EmptyGeometry);
            }
            let cx = |v: i64, hi: u32| v.clamp(0, hi as i64) as u32;
            for y in cx(y0, h)..cx(y1, h) {
                for x in cx(x0, w)..cx(x1, w) {
                    if in_box_stroke(b, stroke.width, x, y) {
                        frame.put_pixel(x, y, color);
                    }
                }
            }
            None
        }
        Annotation::MaskBoundary(m) => {
            if m.width() != w || m.height() != h {
                return Some(DrawWarning::SizeMismatch);
            }
            if m.is_empty() || stroke.width == 0 {
                return Some(DrawWarning::EmptyGeometry);
            }
            let grid = rle_decode(m);
            let r = ((stroke.width - 1) / 2) as i64;
            for y in 0..h {
                for x in 0..w {
                    if !grid.get(y, x) || !is_boundary(&grid, x, y) {
                        continue;
                    }
                    for dy in -r..=r {
                        for dx in -r..=r {
                            let (px, py) = (x as i64 + dx, y as i64 + dy);
                            if px >= 0 && py >= 0 && px < w as i64 && py < h as i64 {
                                frame.put_pixel(px as u32, py as u32, color);
                            }
                        }
                    }
                }
            }
            None
        }
    }
}

fn is_boundary(grid: &dvoc_core::mask::BitGrid, x: u32, y: u32) -> bool {
    let (w, h) = (grid.width(), grid.height());
    (x > 0 && !grid.get(y, x - 1))
        || (x + 1 < w && !grid.get(y, x + 1))
        || (y > 0 && !grid.get(y - 1, x))
        || (y + 1 < h && !grid.get(y + 1, x))
}

/// JPEG bytes of the frame, downscaled so that its longest side is at most `max_side`.
pub fn encode_jpeg(frame: &RgbImage, max_side: u32, quality: u8) -> Result<Vec<u8>, FrameError> {
    let (w, h) = frame.dimensions();
    let longest = w.max(h);
    let resized;
    let img = if max_side > 0 && longest > max_side {
        let scale = max_side as f64 / longest as f64;
        let nw = ((w as f64 * scale).round() as u32).max(1);
        let nh = ((h as f64 * scale).round() as u32).max(1);
        resized = image::imageops::resize(frame, nw, nh, FilterType::Triangle);
        &resized
    } else {
        frame
    };
    let mut out = Cursor::new(Vec::new());
    let encoder = image::codecs::jpeg::JpegEncoder::new_with_quality(&mut out, quality);
    img.write_with_encoder(encoder).map_err(FrameError::Encode)?;
    Ok(out.into_inner())
}

/// PNG bytes of the frame, lossless.
pub fn encode_png(frame: &RgbImage) -> Result<Vec<u8>, FrameError> {
    let mut out = Cursor::new(Vec::new());
    frame.write_to(&mut out, ImageFormat::Png).map_err(FrameError::Encode)?;
    Ok(out.into_inner())
}
