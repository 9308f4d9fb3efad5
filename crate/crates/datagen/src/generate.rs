//! Captioning every object of a dataset.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use dvoc_core::{Dataset, ObjectId, VideoId};
use serde::{Deserialize, Serialize};

use crate::client::{request_caption, CaptionClient, CaptionError};
use crate::frames::FrameSource;
use crate::prompt::{build_prompt, template_hash, PromptError, PromptOptions, TEMPLATE_VERSION};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenerateOptions {
    pub prompt: PromptOptions,
    /// Requests in flight at once.
    pub max_inflight: usize,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        Self {
            prompt: PromptOptions::default(),
            max_inflight: 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FailureKind {
    /// The prompt could not be built (object not on any sampled frame, unreadable frame).
    Skipped,
    /// Retries exhausted; a rerun may succeed.
    Transient,
    /// Refusal or an unusable answer.
    Permanent,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Failure {
    pub video_id: VideoId,
    pub object_id: ObjectId,
    pub kind: FailureKind,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub template_version: u32,
    pub template_hash: String,
    /// Objects that already had a caption and were left alone.
    pub already_captioned: usize,
    pub requested: usize,
    pub captioned: usize,
    pub failures: Vec<Failure>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub dataset: Dataset,
    pub manifest: Manifest,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JournalEntry {
    pub video_id: VideoId,
    pub object_id: ObjectId,
    pub caption: String,
}

/// Append-only record of finished captions, one JSON object per line.
pub struct Journal {
    file: Mutex<File>,
}

impl Journal {
    /// Opens the journal for appending and returns the entries it already
    /// holds. A torn final line is ignored.
    pub fn open(path: &Path) -> std::io::Result<(Journal, Vec<JournalEntry>)> {
        let mut entries = Vec::new();
        if path.exists() {
            for line in BufReader::new(File::open(path)?).lines() {
                match serde_json::from_str::<JournalEntry>(&line?) {
                    Ok(e) => entries.push(e),
                    Err(e) => log::warn!("{}: ignoring unreadable journal line: {e}", path.display()),
                }
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok((Journal { file: Mutex::new(file) }, entries))
    }

    /// Empties the journal at `path` and opens it.
    pub fn create(path: &Path) -> std::io::Result<Journal> {
        File::create(path)?;
        Ok(Journal::open(path)?.0)
    }

    pub fn record(&self, entry: &JournalEntry) -> std::io::Result<()> {
        let mut line = serde_json::to_vec(entry).map_err(std::io::Error::other)?;
        line.push(b'\n');
        let mut f = self.file.lock().expect("journal poisoned");
        f.write_all(&line)?;
        f.flush()
    }
}

/// Fills captions from journal entries; entries for unknown objects are ignored.
/// Returns how many captions were applied.
pub fn apply_journal(dataset: &mut Dataset, entries: &[JournalEntry]) -> usize {
    let mut n = 0;
    for e in entries {
        let obj = dataset
            .videos
            .iter_mut()
            .find(|v| v.video_id == e.video_id)
            .and_then(|v| v.objects.iter_mut().find(|o| o.object_id == e.object_id));
        if let Some(o) = obj {
            o.caption = Some(e.caption.clone());
            n += 1;
        }
    }
    n
}

/// Requests a caption for every object that lacks one. Objects are processed
/// by a bounded pool of `max_inflight` workers; results are merged by
/// `(video, object)` so the output does not depend on completion order.
/// Single-object failures go to the manifest and never stop the run.
pub fn generate_captions(
    dataset: &Dataset,
    source: &dyn FrameSource,
    client: &CaptionClient,
    opts: &GenerateOptions,
    journal: Option<&Journal>,
) -> Outcome {
    let mut jobs: Vec<(usize, usize)> = Vec::new();
    let mut already_captioned = 0;
    for (vi, v) in dataset.videos.iter().enumerate() {
        for (oi, o) in v.objects.iter().enumerate() {
            if o.caption.is_some() {
                already_captioned += 1;
            } else {
                jobs.push((vi, oi));
            }
        }
    }

    let results: Vec<Mutex<Option<Result<String, Failure>>>> = jobs.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let workers = opts.max_inflight.max(1).min(jobs.len());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(&(vi, oi)) = jobs.get(i) else {
                    break;
                };
                let video = &dataset.videos[vi];
                let object_id = video.objects[oi].object_id;
                let fail = |kind, message: String| Failure {
                    video_id: video.video_id,
                    object_id,
                    kind,
                    message,
                };
                let r = match build_prompt(dataset, video, object_id, &opts.prompt, source) {
                    Err(e @ (PromptError::Absent { .. } | PromptError::Frame(_))) => {
                        Err(fail(FailureKind::Skipped, e.to_string()))
                    }
                    Err(e) => Err(fail(FailureKind::Permanent, e.to_string())),
                    Ok(bundle) => match request_caption(client, &bundle) {
                        Ok(c) => Ok(c),
                        Err(CaptionError::Transient(m)) => Err(fail(FailureKind::Transient, m)),
                        Err(e) => Err(fail(FailureKind::Permanent, e.to_string())),
                    },
                };
                if let (Ok(caption), Some(j)) = (&r, journal) {
                    let entry = JournalEntry {
                        video_id: video.video_id,
                        object_id,
                        caption: caption.clone(),
                    };
                    if let Err(e) = j.record(&entry) {
                        log::error!("journal write failed: {e}");
                    }
                }
                *results[i].lock().expect("result slot poisoned") = Some(r);
            });
        }
    });

    let mut out = dataset.clone();
    let mut failures = Vec::new();
    let mut captioned = 0;
    for (&(vi, oi), slot) in jobs.iter().zip(results) {
        match slot.into_inner().expect("result slot poisoned").expect("every job runs") {
            Ok(c) => {
                out.videos[vi].objects[oi].caption = Some(c);
                captioned += 1;
            }
            Err(f) => failures.push(f),
        }
    }
    Outcome {
        dataset: out,
        manifest: Manifest {
            schema_version: MANIFEST_VERSION,
            template_version: TEMPLATE_VERSION,
            template_hash: template_hash(),
            already_captioned,
            requested: jobs.len(),
            captioned,
            failures,
        },
    }
}
