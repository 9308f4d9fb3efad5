//! Column-major run-length encoded binary masks.
//!
//! Runs alternate background/foreground and always start with background, so
//! `counts[0]` may be zero when the first pixel is foreground. Pixel `(row, col)`
//! lives at linear index `col * height + row`, matching the COCO convention used
//! by the source annotation files.

use serde::{Deserialize, Serialize};

use crate::geometry::BBox;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CodecError {
    #[error("run lengths sum to {sum} but the {height}x{width} frame has {expected} pixels")]
    CountSum {
        height: u32,
        width: u32,
        sum: u64,
        expected: u64,
    },
    #[error("zero-length run at interior position {0}")]
    InteriorZeroRun(usize),
    #[error("mask dimensions {a_height}x{a_width} and {b_height}x{b_width} differ")]
    DimensionMismatch {
        a_height: u32,
        a_width: u32,
        b_height: u32,
        b_width: u32,
    },
    #[error("grid has {bits} cells, expected {height}x{width}")]
    GridSize { height: u32, width: u32, bits: usize },
    #[error("malformed compressed RLE string at byte {0}")]
    CompressedString(usize),
    #[error("polygon has {0} coordinates; need an even count of at least 6")]
    Polygon(usize),
}

/// Dense binary mask addressed by `(row, col)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitGrid {
    height: u32,
    width: u32,
    // column-major
    bits: Vec<bool>,
}

impl BitGrid {
    pub fn new(height: u32, width: u32) -> Self {
        Self {
            height,
            width,
            bits: vec![false; height as usize * width as usize],
        }
    }

    /// Builds a grid from column-major bits.
    pub fn from_column_major(height: u32, width: u32, bits: Vec<bool>) -> Result<Self, CodecError> {
        if bits.len() != height as usize * width as usize {
            return Err(CodecError::GridSize {
                height,
                width,
                bits: bits.len(),
            });
        }
        Ok(Self { height, width, bits })
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn get(&self, row: u32, col: u32) -> bool {
        self.bits[self.index(row, col)]
    }

    pub fn set(&mut self, row: u32, col: u32, value: bool) {
        let i = self.index(row, col);
        self.bits[i] = value;
    }

    pub fn count_ones(&self) -> u64 {
        self.bits.iter().filter(|&&b| b).count() as u64
    }

    pub fn column_major(&self) -> &[bool] {
        &self.bits
    }

    fn index(&self, row: u32, col: u32) -> usize {
        assert!(row < self.height && col < self.width, "({row}, {col}) outside grid");
        col as usize * self.height as usize + row as usize
    }
}

/// Run-length encoded mask. Construct through [`RleMask::new`] or the codec;
/// every instance satisfies `sum(counts) == height * width`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RleRepr", into = "RleRepr")]
pub struct RleMask {
    height: u32,
    width: u32,
    counts: Vec<u32>,
}

impl RleMask {
    pub fn new(height: u32, width: u32, counts: Vec<u32>) -> Result<Self, CodecError> {
        let expected = height as u64 * width as u64;
        let sum: u64 = counts.iter().map(|&c| c as u64).sum();
        if sum != expected {
            return Err(CodecError::CountSum {
                height,
                width,
                sum,
                expected,
            });
        }
        if let Some(pos) = counts.iter().skip(1).position(|&c| c == 0) {
            return Err(CodecError::InteriorZeroRun(pos + 1));
        }
        Ok(Self {
            height,
            width,
            counts,
        })
    }

    /// All-background mask.
    pub fn empty(height: u32, width: u32) -> Self {
        let n = height * width;
        Self {
            height,
            width,
            counts: if n == 0 { Vec::new() } else { vec![n] },
        }
    }

    /// Mask whose foreground is the pixel rectangle covered by `bbox`, clipped to the frame.
    ///
    /// Pixel bounds are `round(x) .. round(x + w)` by `round(y) .. round(y + h)`.
    pub fn from_box(height: u32, width: u32, bbox: &BBox) -> Self {
        let clip = |v: f64, hi: u32| v.round().clamp(0.0, hi as f64) as u64;
        let (c0, c1) = (clip(bbox.x, width), clip(bbox.right(), width));
        let (r0, r1) = (clip(bbox.y, height), clip(bbox.bottom(), height));
        if c0 >= c1 || r0 >= r1 {
            return Self::empty(height, width);
        }
        let h = height as u64;
        let mut runs = RunBuilder::default();
        runs.push(false, c0 * h);
        for _ in c0..c1 {
            runs.push(false, r0);
            runs.push(true, r1 - r0);
            runs.push(false, h - r1);
        }
        runs.push(false, (width as u64 - c1) * h);
        runs.finish(height, width)
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    /// Foreground pixel count.
    pub fn area(&self) -> u64 {
        mask_area(self)
    }

    pub fn is_empty(&self) -> bool {
        self.area() == 0
    }

    /// Half-open `[start, end)` column-major index ranges of foreground runs.
    pub fn foreground_runs(&self) -> impl Iterator<Item = (u64, u64)> + '_ {
        let mut pos = 0u64;
        self.counts.iter().enumerate().filter_map(move |(i, &c)| {
            let start = pos;
            pos += c as u64;
            (i % 2 == 1 && c > 0).then_some((start, pos))
        })
    }

    /// Nearest-neighbour upscale by an integer factor in both directions.
    pub fn upscaled(&self, factor: u32) -> Self {
        let grid = rle_decode(self);
        let mut out = BitGrid::new(self.height * factor, self.width * factor);
        for col in 0..out.width {
            for row in 0..out.height {
                if grid.get(row / factor, col / factor) {
                    out.set(row, col, true);
                }
            }
        }
        rle_encode(&out)
    }

    /// Encodes the counts in the COCO compressed ASCII form.
    pub fn to_compressed_string(&self) -> String {
        let mut out = String::new();
        for (i, &c) in self.counts.iter().enumerate() {
            let mut x = c as i64;
            if i > 2 {
                x -= self.counts[i - 2] as i64;
            }
            loop {
                let mut ch = x & 0x1f;
                x >>= 5;
                let more = if ch & 0x10 != 0 { x != -1 } else { x != 0 };
                if more {
                    ch |= 0x20;
                }
                out.push((ch as u8 + 48) as char);
                if !more {
                    break;
                }
            }
        }
        out
    }

    /// Decodes COCO compressed ASCII counts.
    pub fn from_compressed_string(height: u32, width: u32, s: &str) -> Result<Self, CodecError> {
        let bytes = s.as_bytes();
        let mut counts: Vec<i64> = Vec::new();
        let mut p = 0;
        while p < bytes.len() {
            let mut x: i64 = 0;
            let mut k = 0;
            loop {
                let b = *bytes.get(p).ok_or(CodecError::CompressedString(p))?;
                if !(48..48 + 64).contains(&b) || k > 12 {
                    return Err(CodecError::CompressedString(p));
                }
                let c = (b - 48) as i64;
                x |= (c & 0x1f) << (5 * k);
                p += 1;
                k += 1;
                if c & 0x20 == 0 {
                    if c & 0x10 != 0 {
                        x |= -1i64 << (5 * k);
                    }
                    break;
                }
            }
            if counts.len() > 2 {
                x += counts[counts.len() - 2];
            }
            if !(0..=u32::MAX as i64).contains(&x) {
                return Err(CodecError::CompressedString(p));
            }
            counts.push(x);
        }
        Self::new(height, width, counts.into_iter().map(|c| c as u32).collect())
    }
}

/// Accumulates alternating runs, merging adjacent runs of the same value.
#[derive(Default)]
struct RunBuilder {
    counts: Vec<u32>,
    current: bool,
    len: u64,
}

impl RunBuilder {
    fn push(&mut self, value: bool, len: u64) {
        if len == 0 {
            return;
        }
        if value != self.current {
            self.counts.push(self.len as u32);
            self.current = value;
            self.len = 0;
        }
        self.len += len;
    }

    fn finish(mut self, height: u32, width: u32) -> RleMask {
        if self.len > 0 || self.counts.is_empty() {
            self.counts.push(self.len as u32);
        }
        if height as u64 * width as u64 == 0 {
            self.counts.clear();
        }
        RleMask {
            height,
            width,
            counts: self.counts,
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum CountsRepr {
    Runs(Vec<u32>),
    Compressed(String),
}

#[derive(Serialize, Deserialize)]
struct RleRepr {
    size: [u32; 2],
    counts: CountsRepr,
}

impl TryFrom<RleRepr> for RleMask {
    type Error = CodecError;

    fn try_from(r: RleRepr) -> Result<Self, Self::Error> {
        let [h, w] = r.size;
        match r.counts {
            CountsRepr::Runs(c) => RleMask::new(h, w, c),
            CountsRepr::Compressed(s) => RleMask::from_compressed_string(h, w, &s),
        }
    }
}

impl From<RleMask> for RleRepr {
    fn from(m: RleMask) -> Self {
        RleRepr {
            size: [m.height, m.width],
            counts: CountsRepr::Runs(m.counts),
        }
    }
}

/// Expands runs into a dense grid. Even runs are background, odd runs foreground.
pub fn rle_decode(mask: &RleMask) -> BitGrid {
    let mut bits = Vec::with_capacity(mask.height as usize * mask.width as usize);
    for (i, &c) in mask.counts.iter().enumerate() {
        bits.extend(std::iter::repeat_n(i % 2 == 1, c as usize));
    }
    BitGrid {
        height: mask.height,
        width: mask.width,
        bits,
    }
}

/// Canonical encoding of a dense grid.
pub fn rle_encode(grid: &BitGrid) -> RleMask {
    let mut runs = RunBuilder::default();
    for &b in &grid.bits {
        runs.push(b, 1);
    }
    runs.finish(grid.height, grid.width)
}

/// Tight pixel box around the foreground, or `None` for an empty mask.
pub fn mask_to_bbox(mask: &RleMask) -> Option<BBox> {
    let h = mask.height as u64;
    let mut bounds: Option<(u64, u64, u64, u64)> = None;
    for (start, end) in mask.foreground_runs() {
        let (c0, r0) = (start / h, start % h);
        let (c1, r1) = ((end - 1) / h, (end - 1) % h);
        // a run that wraps into the next column touches both the last and first row
        let (top, bottom) = if c0 == c1 { (r0, r1) } else { (0, h - 1) };
        bounds = Some(match bounds {
            None => (c0, c1, top, bottom),
            Some((x0, x1, y0, y1)) => (x0.min(c0), x1.max(c1), y0.min(top), y1.max(bottom)),
        });
    }
    bounds.map(|(x0, x1, y0, y1)| BBox {
        x: x0 as f64,
        y: y0 as f64,
        w: (x1 - x0 + 1) as f64,
        h: (y1 - y0 + 1) as f64,
    })
}

/// Sum of the foreground (odd-position) runs.
pub fn mask_area(mask: &RleMask) -> u64 {
    mask.counts.iter().skip(1).step_by(2).map(|&c| c as u64).sum()
}

/// Foreground pixels shared by both masks, by merge-scanning their runs.
pub fn mask_intersection(a: &RleMask, b: &RleMask) -> Result<u64, CodecError> {
    check_same_size(a, b)?;
    let mut ra = a.foreground_runs().peekable();
    let mut rb = b.foreground_runs().peekable();
    let mut inter = 0u64;
    while let (Some(&(s1, e1)), Some(&(s2, e2))) = (ra.peek(), rb.peek()) {
        let lo = s1.max(s2);
        let hi = e1.min(e2);
        if hi > lo {
            inter += hi - lo;
        }
        if e1 <= e2 {
            ra.next();
        } else {
            rb.next();
        }
    }
    Ok(inter)
}

/// `|a ∧ b| / |a ∨ b|` computed on runs. Two empty masks give 0.
pub fn mask_iou(a: &RleMask, b: &RleMask) -> Result<f64, CodecError> {
    let inter = mask_intersection(a, b)?;
    let union = a.area() + b.area() - inter;
    Ok(if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    })
}

fn check_same_size(a: &RleMask, b: &RleMask) -> Result<(), CodecError> {
    if a.height != b.height || a.width != b.width {
        return Err(CodecError::DimensionMismatch {
            a_height: a.height,
            a_width: a.width,
            b_height: b.height,
            b_width: b.width,
        });
    }
    Ok(())
}

/// Rasterizes polygons `[x0, y0, x1, y1, ...]` with an even-odd scanline fill
/// sampled at pixel centers. Multiple polygons are unioned.
pub fn rasterize_polygons(height: u32, width: u32, polygons: &[Vec<f64>]) -> Result<RleMask, CodecError> {
    let mut grid = BitGrid::new(height, width);
    for poly in polygons {
        if poly.len() < 6 || poly.len() % 2 != 0 {
            return Err(CodecError::Polygon(poly.len()));
        }
        let pts: Vec<(f64, f64)> = poly.chunks_exact(2).map(|p| (p[0], p[1])).collect();
        let mut xs = Vec::new();
        for row in 0..height {
            let y = row as f64 + 0.5;
            xs.clear();
            for i in 0..pts.len() {
                let (x1, y1) = pts[i];
                let (x2, y2) = pts[(i + 1) % pts.len()];
                if (y1 <= y) != (y2 <= y) {
                    xs.push(x1 + (y - y1) * (x2 - x1) / (y2 - y1));
                }
            }
            xs.sort_by(|a, b| a.total_cmp(b));
            for pair in xs.chunks_exact(2) {
                // pixel centers c + 0.5 in [pair[0], pair[1])
                let first = (pair[0] - 0.5).ceil().max(0.0);
                let last = (pair[1] - 0.5).ceil().min(width as f64);
                let mut col = first;
                while col < last {
                    grid.set(row, col as u32, true);
                    col += 1.0;
                }
            }
        }
    }
    Ok(rle_encode(&grid))
}
