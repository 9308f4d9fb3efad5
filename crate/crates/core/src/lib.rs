//! Tracking, evaluation and caption scoring for dense video object captioning.

pub mod assignment;
pub mod caption;
pub mod dataset;
pub mod eval;
pub mod geometry;
pub mod mask;
pub mod model;
pub mod predictions;
pub mod tracker;
pub mod tracks;

pub use geometry::BBox;
pub use mask::RleMask;
pub use model::{
    Category, CategoryId, ClipPrediction, Dataset, FrameGeometry, GtObject, ObjectId,
    QueryPrediction, Track, TrackId, VideoId, VideoRecord, VideoTracks,
};
