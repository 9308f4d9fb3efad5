//! Clip-to-video association.
//!
//! Each clip's queries are scored (`S = sqrt(max_c S_cls(c) * S_obj)`), filtered
//! against `t_thresh`, and matched against a memory bank of the last `T_match`
//! clips. The bank clips whose own optimal matching to the incoming queries has
//! the largest total cosine similarity are kept (`K_match` of them); each
//! track's similarity to each incoming query is averaged over the kept clips
//! it appears in, and one final assignment on that consensus matrix decides
//! which incoming queries continue existing tracks.

mod aggregate;

use std::collections::{BTreeMap, VecDeque};

pub use aggregate::{aggregate_track, select_agg_clips, track_embeddings, AggregationConfig, AggregationMode};

use crate::assignment::{solve, solve_thresholded, CostMatrix, Sense};
use crate::model::{ClipPrediction, Track, TrackId};

/// Default cosine similarity a consensus match must reach.
pub const DEFAULT_MATCH_FLOOR: f64 = 0.2;
/// Default per-clip score floor.
pub const DEFAULT_SCORE_THRESHOLD: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TrackerError {
    #[error("invalid tracker configuration: {0}")]
    Config(String),
    #[error("score {value} outside [0, 1]")]
    ScoreRange { value: f64 },
    #[error("no class scores")]
    NoClassScores,
    #[error("embedding dimension {got} differs from {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("clip at position {position} has index {index}; clips must be ordered and contiguous")]
    ClipOrder { position: usize, index: usize },
    #[error("track {0} has no clips")]
    EmptyTrack(TrackId),
    #[error("no embedding for clip {0}")]
    MissingEmbedding(usize),
    #[error("aggregation weights sum to zero")]
    DegenerateWeights,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackerConfig {
    /// Memory window in clips.
    pub t_match: usize,
    /// Number of best-matching bank clips used for the consensus.
    pub k_match: usize,
    /// Queries whose fused score is below this are dropped.
    pub t_thresh: f64,
    /// Consensus similarity needed to continue a track; `-inf` accepts every match.
    pub match_floor: f64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            t_match: 1,
            k_match: 1,
            t_thresh: DEFAULT_SCORE_THRESHOLD,
            match_floor: DEFAULT_MATCH_FLOOR,
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<(), TrackerError> {
        if self.t_match == 0 {
            return Err(TrackerError::Config("T_match must be at least 1".into()));
        }
        if self.k_match == 0 || self.k_match > self.t_match {
            return Err(TrackerError::Config(format!(
                "K_match must be in 1..={} (got {})",
                self.t_match, self.k_match
            )));
        }
        // thresholds above 1 are allowed and empty every clip
        if !(self.t_thresh >= 0.0) {
            return Err(TrackerError::Config(format!("t_thresh {} must be >= 0", self.t_thresh)));
        }
        if self.match_floor.is_nan() || self.match_floor > 1.0 {
            return Err(TrackerError::Config(format!(
                "match floor {} must be at most 1 (or -inf)",
                self.match_floor
            )));
        }
        Ok(())
    }
}

/// Inference presets per benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Preset {
    LvVis,
    VidStg,
    Vln,
    BenSmot,
}

impl Preset {
    pub const ALL: [Preset; 4] = [Preset::LvVis, Preset::VidStg, Preset::Vln, Preset::BenSmot];

    pub fn name(self) -> &'static str {
        match self {
            Preset::LvVis => "lvvis",
            Preset::VidStg => "vidstg",
            Preset::Vln => "vln",
            Preset::BenSmot => "bensmot",
        }
    }

    pub fn tracker(self) -> TrackerConfig {
        let (t_match, k_match) = match self {
            Preset::LvVis => (1, 1),
            Preset::VidStg => (100, 7),
            Preset::Vln => (20, 5),
            Preset::BenSmot => (40, 7),
        };
        TrackerConfig {
            t_match,
            k_match,
            ..TrackerConfig::default()
        }
    }

    pub fn aggregation(self) -> AggregationConfig {
        match self {
            Preset::LvVis => AggregationConfig {
                t_agg: 1,
                mode: AggregationMode::BestScore,
            },
            Preset::VidStg => AggregationConfig {
                t_agg: 32,
                mode: AggregationMode::WeightedMean,
            },
            Preset::Vln | Preset::BenSmot => AggregationConfig {
                t_agg: 8,
                mode: AggregationMode::WeightedMean,
            },
        }
    }

    /// Inference clip length T.
    pub fn clip_length(self) -> usize {
        match self {
            Preset::LvVis => 5,
            _ => 1,
        }
    }
}

impl std::str::FromStr for Preset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| format!("unknown preset `{s}` (expected lvvis, vidstg, vln or bensmot)"))
    }
}

/// Class-agnostic maximum and fused per-clip score of one query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusedScore {
    pub class_max: f64,
    pub score: f64,
}

/// `S_cls* = max_c S_cls(c)` and `S = sqrt(S_cls* * S_obj)`.
pub fn fuse_scores(class_scores: &[f64], objectness: f64) -> Result<FusedScore, TrackerError> {
    let in_range = |v: f64| (0.0..=1.0).contains(&v);
    if !in_range(objectness) {
        return Err(TrackerError::ScoreRange { value: objectness });
    }
    let mut class_max: Option<f64> = None;
    for &s in class_scores {
        if !in_range(s) {
            return Err(TrackerError::ScoreRange { value: s });
        }
        class_max = Some(class_max.map_or(s, |m: f64| m.max(s)));
    }
    let class_max = class_max.ok_or(TrackerError::NoClassScores)?;
    Ok(FusedScore {
        class_max,
        score: (class_max * objectness).sqrt(),
    })
}

/// Surviving queries of one clip, with their original indices and fused scores.
#[derive(Debug, Clone)]
pub struct FilteredClip<'a> {
    pub clip: &'a ClipPrediction,
    pub survivors: Vec<(usize, FusedScore)>,
}

impl FilteredClip<'_> {
    pub fn len(&self) -> usize {
        self.survivors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.survivors.is_empty()
    }
}

/// Drops queries whose fused score is below `t_thresh`.
pub fn filter_clip(clip: &ClipPrediction, t_thresh: f64) -> Result<FilteredClip<'_>, TrackerError> {
    let mut survivors = Vec::new();
    for (i, q) in clip.queries.iter().enumerate() {
        let fused = fuse_scores(&q.class_scores, q.objectness)?;
        if fused.score >= t_thresh {
            survivors.push((i, fused));
        }
    }
    Ok(FilteredClip { clip, survivors })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BankEntry {
    pub track_id: TrackId,
    /// Unit-normalized embedding (all zeros for a zero vector).
    pub embedding: Vec<f64>,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BankClip {
    pub clip_index: usize,
    pub entries: Vec<BankEntry>,
}

/// The last `T_match` clips' surviving queries, each tagged with its track.
/// Also owns the per-video track id counter so ids are never reused.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    capacity: usize,
    clips: VecDeque<BankClip>,
    next_track_id: TrackId,
    dimension: Option<usize>,
}

impl MemoryBank {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            clips: VecDeque::new(),
            next_track_id: 0,
            dimension: None,
        }
    }

    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    pub fn clips(&self) -> impl Iterator<Item = &BankClip> {
        self.clips.iter()
    }

    fn allocate(&mut self) -> TrackId {
        let id = self.next_track_id;
        self.next_track_id += 1;
        id
    }

    fn push(&mut self, clip: BankClip) {
        self.clips.push_back(clip);
        while self.clips.len() > self.capacity {
            self.clips.pop_front();
        }
    }
}

fn normalized(v: &[f32]) -> Vec<f64> {
    let norm = v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
    if norm == 0.0 {
        vec![0.0; v.len()]
    } else {
        v.iter().map(|&x| x as f64 / norm).collect()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Matches an incoming filtered clip against the bank and appends it.
/// Returns original query index → track id for every surviving query.
pub fn match_clip(
    bank: &mut MemoryBank,
    incoming: &FilteredClip<'_>,
    cfg: &TrackerConfig,
) -> Result<BTreeMap<usize, TrackId>, TrackerError> {
    let queries: Vec<Vec<f64>> = incoming
        .survivors
        .iter()
        .map(|&(i, _)| {
            let e = &incoming.clip.queries[i].embedding;
            match bank.dimension {
                Some(d) if d != e.len() => Err(TrackerError::Dimension {
                    expected: d,
                    got: e.len(),
                }),
                _ => {
                    bank.dimension = Some(e.len());
                    Ok(normalized(e))
                }
            }
        })
        .collect::<Result<_, _>>()?;

    // per bank clip: similarity matrix and the total of its optimal matching
    let mut ranked: Vec<(usize, f64, Vec<f64>)> = Vec::with_capacity(bank.len());
    for (pos, bc) in bank.clips.iter().enumerate() {
        let sims: Vec<f64> = bc
            .entries
            .iter()
            .flat_map(|e| queries.iter().map(move |q| dot(&e.embedding, q)))
            .collect();
        let matrix = CostMatrix::new(bc.entries.len(), queries.len(), sims.clone(), Sense::Maximize)
            .expect("cosine similarities are finite");
        let total = matrix.total(&solve(&matrix));
        ranked.push((pos, total, sims));
    }
    // most matched first; newer clips win ties
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(b.0.cmp(&a.0)));
    ranked.truncate(cfg.k_match);

    let mut sums: BTreeMap<TrackId, (Vec<f64>, usize)> = BTreeMap::new();
    for (pos, _, sims) in &ranked {
        let bc = &bank.clips[*pos];
        for (r, entry) in bc.entries.iter().enumerate() {
            let slot = sums
                .entry(entry.track_id)
                .or_insert_with(|| (vec![0.0; queries.len()], 0));
            for (c, acc) in slot.0.iter_mut().enumerate() {
                *acc += sims[r * queries.len() + c];
            }
            slot.1 += 1;
        }
    }
    let track_ids: Vec<TrackId> = sums.keys().copied().collect();
    let consensus = CostMatrix::from_fn(track_ids.len(), queries.len(), Sense::Maximize, |r, c| {
        let (s, n) = &sums[&track_ids[r]];
        s[c] / *n as f64
    })
    .expect("averaged similarities are finite");
    let matched = solve_thresholded(&consensus, cfg.match_floor).expect("maximize sense");

    let mut by_column: BTreeMap<usize, TrackId> = matched.into_iter().map(|(r, c)| (c, track_ids[r])).collect();
    let mut assignment = BTreeMap::new();
    let mut entries = Vec::with_capacity(queries.len());
    for (c, (&(orig, fused), emb)) in incoming.survivors.iter().zip(queries).enumerate() {
        let track_id = match by_column.remove(&c) {
            Some(t) => t,
            None => bank.allocate(),
        };
        assignment.insert(orig, track_id);
        entries.push(BankEntry {
            track_id,
            embedding: emb,
            score: fused.score,
        });
    }
    bank.push(BankClip {
        clip_index: incoming.clip.clip_index,
        entries,
    });
    Ok(assignment)
}

/// Tracks one video's clips in a single online pass.
pub fn track_video(clips: &[ClipPrediction], cfg: &TrackerConfig) -> Result<Vec<Track>, TrackerError> {
    cfg.validate()?;
    let mut bank = MemoryBank::new(cfg.t_match);
    let mut tracks: BTreeMap<TrackId, Track> = BTreeMap::new();
    for (position, clip) in clips.iter().enumerate() {
        if clip.clip_index != position {
            return Err(TrackerError::ClipOrder {
                position,
                index: clip.clip_index,
            });
        }
        let filtered = filter_clip(clip, cfg.t_thresh)?;
        let scores: BTreeMap<usize, f64> = filtered.survivors.iter().map(|&(i, f)| (i, f.score)).collect();
        for (query, track_id) in match_clip(&mut bank, &filtered, cfg)? {
            let track = tracks.entry(track_id).or_insert_with(|| Track {
                track_id,
                ..Track::default()
            });
            track.clips.insert(clip.clip_index, query);
            track.scores.insert(clip.clip_index, scores[&query]);
            let q = &clip.queries[query];
            for offset in 0..clip.span() {
                if let Some(g) = q.geometry(offset) {
                    track.frames.insert(clip.first_frame + offset, g);
                }
            }
        }
    }
    Ok(tracks.into_values().collect())
}

/// [`track_video`] followed by temporal aggregation of every track. Tracks
/// whose sampled scores are all zero fall back to the arithmetic mean.
pub fn track_and_aggregate(
    clips: &[ClipPrediction],
    cfg: &TrackerConfig,
    agg: &AggregationConfig,
) -> Result<Vec<Track>, TrackerError> {
    let mut tracks = track_video(clips, cfg)?;
    for t in &mut tracks {
        let emb = track_embeddings(t, clips);
        let e = match aggregate_track(t, &emb, agg) {
            Err(TrackerError::DegenerateWeights) => {
                let mean = AggregationConfig {
                    mode: AggregationMode::ArithmeticMean,
                    ..*agg
                };
                aggregate_track(t, &emb, &mean)?
            }
            r => r?,
        };
        t.embedding = Some(e);
    }
    Ok(tracks)
}
