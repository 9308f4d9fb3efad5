//! Synthetic object captions: each annotated object is drawn onto a few
//! sampled frames and described by a vision-language model.

pub mod client;
pub mod frames;
pub mod generate;
pub mod prompt;
pub mod vlm;

pub use client::{request_caption, CaptionClient, CaptionError, ClientConfig, RetryPolicy};
pub use frames::{draw_annotation, sample_frames, Annotation, DirFrameSource, FrameSource, SolidFrames, Stroke};
pub use generate::{apply_journal, generate_captions, GenerateOptions, Journal, Manifest, Outcome};
pub use prompt::{build_prompt, template_hash, Cue, PromptBundle, PromptOptions, VisualMode};
pub use vlm::{Adapter, HttpTransport, VlmRequest, VlmResponse, VlmTransport};
