//! Temporal aggregation of a track's per-clip queries into one video-level query.

use std::collections::BTreeMap;

use super::TrackerError;
use crate::model::{ClipPrediction, Track};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AggregationMode {
    /// `Σ S^i e^i / Σ S^i` over the sampled clips.
    WeightedMean,
    /// `Σ e^i / |I_agg|` over the sampled clips.
    ArithmeticMean,
    /// Embedding of the track's highest-scoring clip.
    BestScore,
    /// Embedding of the track's middle clip.
    MiddleClip,
    /// Unnormalized `Σ S^i e^i`. Debugging only.
    WeightedSum,
}

impl AggregationMode {
    pub fn name(self) -> &'static str {
        match self {
            AggregationMode::WeightedMean => "weighted-mean",
            AggregationMode::ArithmeticMean => "arithmetic-mean",
            AggregationMode::BestScore => "best-score",
            AggregationMode::MiddleClip => "middle-clip",
            AggregationMode::WeightedSum => "weighted-sum",
        }
    }
}

impl std::str::FromStr for AggregationMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "weighted-mean" => AggregationMode::WeightedMean,
            "arithmetic-mean" => AggregationMode::ArithmeticMean,
            "best-score" => AggregationMode::BestScore,
            "middle-clip" | "middle-frame" => AggregationMode::MiddleClip,
            "weighted-sum" => AggregationMode::WeightedSum,
            other => return Err(format!("unknown aggregation mode `{other}`")),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AggregationConfig {
    /// Number of clips to sample, T_agg.
    pub t_agg: usize,
    pub mode: AggregationMode,
}

impl Default for AggregationConfig {
    fn default() -> Self {
        Self {
            t_agg: 8,
            mode: AggregationMode::WeightedMean,
        }
    }
}

/// `round(a / b)` with halves rounded up, for non-negative integers.
fn div_round(a: usize, b: usize) -> usize {
    (2 * a + b) / (2 * b)
}

/// Uniformly spread clip indices over the track: all clips when the track has
/// at most `t_agg` of them, otherwise positions `round(i (m-1) / (t_agg-1))`.
/// With `t_agg == 1` the middle position `round((m-1) / 2)` is used.
pub fn select_agg_clips(track: &Track, t_agg: usize) -> Vec<usize> {
    let clips: Vec<usize> = track.clips.keys().copied().collect();
    let m = clips.len();
    if m == 0 || t_agg == 0 {
        return Vec::new();
    }
    if m <= t_agg {
        return clips;
    }
    let mut positions: Vec<usize> = if t_agg == 1 {
        vec![div_round(m - 1, 2)]
    } else {
        (0..t_agg).map(|i| div_round(i * (m - 1), t_agg - 1)).collect()
    };
    positions.dedup();
    positions.into_iter().map(|p| clips[p]).collect()
}

/// Looks up each assigned clip's query embedding.
pub fn track_embeddings(track: &Track, clips: &[ClipPrediction]) -> BTreeMap<usize, Vec<f64>> {
    track
        .clips
        .iter()
        .filter_map(|(&c, &q)| {
            let clip = match clips.get(c) {
                Some(p) if p.clip_index == c => p,
                _ => clips.iter().find(|p| p.clip_index == c)?,
            };
            let e = &clip.queries.get(q)?.embedding;
            Some((c, e.iter().map(|&x| x as f64).collect()))
        })
        .collect()
}

/// Combines the track's per-clip embeddings into one query vector.
pub fn aggregate_track(
    track: &Track,
    embeddings: &BTreeMap<usize, Vec<f64>>,
    cfg: &AggregationConfig,
) -> Result<Vec<f64>, TrackerError> {
    if track.clips.is_empty() {
        return Err(TrackerError::EmptyTrack(track.track_id));
    }
    let lookup = |c: usize| embeddings.get(&c).ok_or(TrackerError::MissingEmbedding(c));
    let score = |c: usize| track.scores.get(&c).copied().unwrap_or(0.0);
    match cfg.mode {
        AggregationMode::BestScore => {
            // earliest clip wins ties
            let best = track
                .clips
                .keys()
                .copied()
                .fold(None, |acc: Option<usize>, c| match acc {
                    Some(b) if score(b) >= score(c) => Some(b),
                    _ => Some(c),
                })
                .expect("non-empty track");
            lookup(best).cloned()
        }
        AggregationMode::MiddleClip => lookup(select_agg_clips(track, 1)[0]).cloned(),
        AggregationMode::ArithmeticMean => {
            let picked = select_agg_clips(track, cfg.t_agg.max(1));
            let mut acc = zeros_like(lookup(picked[0])?);
            for &c in &picked {
                add_scaled(&mut acc, lookup(c)?, 1.0)?;
            }
            let n = picked.len() as f64;
            Ok(acc.into_iter().map(|v| v / n).collect())
        }
        AggregationMode::WeightedMean | AggregationMode::WeightedSum => {
            let picked = select_agg_clips(track, cfg.t_agg.max(1));
            let mut acc = zeros_like(lookup(picked[0])?);
            let mut total = 0.0;
            for &c in &picked {
                let s = score(c);
                add_scaled(&mut acc, lookup(c)?, s)?;
                total += s;
            }
            if cfg.mode == AggregationMode::WeightedSum {
                return Ok(acc);
            }
            if total <= 0.0 {
                return Err(TrackerError::DegenerateWeights);
            }
            Ok(acc.into_iter().map(|v| v / total).collect())
        }
    }
}

fn zeros_like(v: &[f64]) -> Vec<f64> {
    vec![0.0; v.len()]
}

fn add_scaled(acc: &mut [f64], v: &[f64], s: f64) -> Result<(), TrackerError> {
    if acc.len() != v.len() {
        return Err(TrackerError::Dimension {
            expected: acc.len(),
            got: v.len(),
        });
    }
    for (a, x) in acc.iter_mut().zip(v) {
        *a += s * x;
    }
    Ok(())
}
