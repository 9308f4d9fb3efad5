mod config;

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context};
use clap::{ArgAction, Args, Parser, Subcommand};
use rayon::prelude::*;

use config::{layer, parse_value, ConfigError, FileConfig};
use dvoc_core::caption::{CaptionSimilarity, CiderBackend, ExactMatch};
use dvoc_core::dataset::{parse_video_dataset, validate, write_dataset, Schema, SCHEMA_VERSION};
use dvoc_core::eval::{default_alphas, evaluate, gt_captions, EvalConfig, EvalReport, GeometryMode};
use dvoc_core::predictions::parse_predictions;
use dvoc_core::tracker::{track_and_aggregate, AggregationConfig, AggregationMode, Preset, TrackerConfig};
use dvoc_core::tracks::{parse_tracks, write_tracks};
use dvoc_core::VideoTracks;
use dvoc_datagen::client::{CaptionClient, ClientConfig};
use dvoc_datagen::generate::{apply_journal, generate_captions, GenerateOptions, Journal};
use dvoc_datagen::prompt::{Cue, PromptOptions, VisualMode};
use dvoc_datagen::vlm::{Adapter, HttpTransport, API_KEY_ENV};
use dvoc_datagen::DirFrameSource;

/// Dense video object captioning toolkit: caption generation, tracking and evaluation.
#[derive(Debug, Parser)]
#[command(name = "dvoc", version)]
struct Cli {
    /// TOML config file; its values override the preset and are overridden by flags.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Worker threads for parallel stages (default: one per core).
    #[arg(long, global = true, value_name = "N")]
    workers: Option<usize>,

    /// More log output; repeat for trace level.
    #[arg(short, long, global = true, action = ArgAction::Count)]
    verbose: u8,

    /// Only log errors.
    #[arg(short, long, global = true, conflicts_with = "verbose")]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Parse and validate an annotation file and rewrite it in a normalized layout.
    Ingest(IngestArgs),
    /// Caption every uncaptioned object of a dataset with a vision-language model.
    GenerateCaptions(GenerateArgs),
    /// Link per-clip predictions into video-level tracks.
    Track(TrackArgs),
    /// Score tracks against ground truth.
    Evaluate(EvaluateArgs),
    /// Score candidate captions against reference captions, line by line.
    Capsim(CapsimArgs),
    /// Print an evaluation report as a table.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
struct IngestArgs {
    /// Annotation file.
    #[arg(long, value_name = "FILE")]
    input: PathBuf,
    /// Layout of the input: lvvis, vidstg or lvis.
    #[arg(long, default_value = "lvvis")]
    schema: Schema,
    /// Layout of the output (default: same as input).
    #[arg(long)]
    output_schema: Option<Schema>,
    /// Output file (default: standard output).
    #[arg(long, short, value_name = "FILE")]
    output: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GenerateArgs {
    /// Annotation file to caption.
    #[arg(long, value_name = "FILE")]
    dataset: PathBuf,
    /// Layout of the dataset: lvvis, vidstg or lvis.
    #[arg(long, default_value = "lvvis")]
    schema: Schema,
    /// Directory holding the extracted frames, laid out as the dataset's file names.
    #[arg(long, value_name = "DIR")]
    frames: PathBuf,
    /// Provider endpoint URL.
    #[arg(long)]
    endpoint: Option<String>,
    /// Request layout: gemini or generic.
    #[arg(long)]
    adapter: Option<Adapter>,
    /// Model name sent with each request.
    #[arg(long)]
    model: Option<String>,
    /// What is drawn on the frames: boxes or mask-boundaries.
    #[arg(long)]
    visual_mode: Option<VisualMode>,
    /// Location cue in the text prompt: bbox or center.
    #[arg(long)]
    cue: Option<Cue>,
    /// Textual examples in the system prompt (0 to 3).
    #[arg(long)]
    few_shot: Option<usize>,
    /// Frames shown per object.
    #[arg(long)]
    samples: Option<usize>,
    /// Leave per-frame areas out of the prompt.
    #[arg(long)]
    no_area: bool,
    /// Leave the other labels of the video out of the prompt.
    #[arg(long)]
    no_other_labels: bool,
    /// Requests in flight at once.
    #[arg(long)]
    max_inflight: Option<usize>,
    /// Requests per second (default: unlimited).
    #[arg(long)]
    rate: Option<f64>,
    /// Per-request timeout in seconds.
    #[arg(long)]
    timeout_secs: Option<u64>,
    /// Reuse captions recorded in the journal by an earlier interrupted run.
    #[arg(long)]
    resume: bool,
    /// Journal file (default: OUTPUT.journal).
    #[arg(long, value_name = "FILE")]
    journal: Option<PathBuf>,
    /// Captioned dataset, written in the input layout.
    #[arg(long, short, value_name = "FILE")]
    output: PathBuf,
    /// Run manifest (default: OUTPUT.manifest.json).
    #[arg(long, value_name = "FILE")]
    manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrackerFlags {
    /// Named configuration: lvvis, vidstg, vln or bensmot.
    #[arg(long)]
    preset: Option<Preset>,
    /// Memory window in clips.
    #[arg(long)]
    t_match: Option<usize>,
    /// Best-matching memory clips used per decision.
    #[arg(long)]
    k_match: Option<usize>,
    /// Fused score below which queries are dropped.
    #[arg(long, allow_negative_numbers = true)]
    t_thresh: Option<f64>,
    /// Similarity a match must reach to continue a track.
    #[arg(long, allow_negative_numbers = true)]
    match_floor: Option<f64>,
    /// Clips sampled for aggregation.
    #[arg(long)]
    t_agg: Option<usize>,
    /// weighted-mean, arithmetic-mean, best-score, middle-clip or weighted-sum.
    #[arg(long)]
    aggregation: Option<AggregationMode>,
}

#[derive(Debug, Args)]
struct TrackArgs {
    /// Per-clip predictions, one JSON object per line.
    #[arg(long, value_name = "FILE")]
    predictions: PathBuf,
    #[command(flatten)]
    tracker: TrackerFlags,
    /// Tracks file (default: standard output).
    #[arg(long, short, value_name = "FILE")]
    output: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum CapSim {
    Cider,
    Exact,
}

impl std::str::FromStr for CapSim {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        <CapSim as clap::ValueEnum>::from_str(s, false)
    }
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    /// Ground-truth annotation file.
    #[arg(long, value_name = "FILE")]
    gt: PathBuf,
    /// Layout of the ground truth: lvvis, vidstg or lvis.
    #[arg(long, default_value = "lvvis")]
    schema: Schema,
    /// Tracks file.
    #[arg(long, value_name = "FILE")]
    tracks: PathBuf,
    /// Matching geometry: box or mask.
    #[arg(long)]
    geometry: Option<GeometryMode>,
    /// Comma-separated localization thresholds (default 0.05, 0.10, ..., 0.95).
    #[arg(long, value_delimiter = ',')]
    alphas: Option<Vec<f64>>,
    /// Caption similarity.
    #[arg(long, value_enum)]
    capsim: Option<CapSim>,
    /// JSON report (default: standard output).
    #[arg(long, short, value_name = "FILE")]
    output: Option<PathBuf>,
    /// Also write the per-threshold curves as CSV.
    #[arg(long, value_name = "FILE")]
    csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct CapsimArgs {
    /// Candidate captions, one per line.
    #[arg(long, value_name = "FILE")]
    candidates: PathBuf,
    /// Reference captions, one per line, paired with the candidates by line.
    #[arg(long, value_name = "FILE")]
    references: PathBuf,
    /// CSV of scores (default: standard output).
    #[arg(long, short, value_name = "FILE")]
    output: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// JSON report written by `evaluate`.
    #[arg(long, value_name = "FILE")]
    input: PathBuf,
    /// Print the per-threshold curves instead of the table.
    #[arg(long)]
    curves: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match (cli.quiet, cli.verbose) {
        (true, _) => log::LevelFilter::Error,
        (false, 0) => log::LevelFilter::Info,
        (false, 1) => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .target(env_logger::Target::Stderr)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("[{}] {e:#}", error_class(&e));
            ExitCode::FAILURE
        }
    }
}

fn error_class(e: &anyhow::Error) -> &'static str {
    use dvoc_core::{dataset::DatasetError, eval::EvalError, predictions::PredictionError};
    use dvoc_core::{tracker::TrackerError, tracks::TracksError};
    for c in e.chain() {
        if c.is::<ConfigError>() {
            return "config";
        }
        if c.is::<DatasetError>() || c.is::<PredictionError>() || c.is::<TracksError>() {
            return "input";
        }
        if c.is::<EvalError>() || c.is::<TrackerError>() {
            return "validation";
        }
        if c.is::<std::io::Error>() {
            return "io";
        }
    }
    "error"
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let file = match &cli.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    if let Some(n) = layer([file.workers, cli.workers]) {
        if n == 0 {
            return Err(ConfigError("--workers must be positive".into()).into());
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("starting the worker pool")?;
    }
    match cli.command {
        Command::Ingest(a) => ingest(a),
        Command::GenerateCaptions(a) => generate(a, &file),
        Command::Track(a) => track(a, &file),
        Command::Evaluate(a) => evaluate_cmd(a, &file),
        Command::Capsim(a) => capsim(a),
        Command::Report(a) => report(a),
    }
}

fn read(path: &Path) -> anyhow::Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

/// Writes through `f` to `path`, or to standard output when `path` is `None`.
fn emit(path: Option<&Path>, f: impl FnOnce(&mut dyn Write) -> anyhow::Result<()>) -> anyhow::Result<()> {
    match path {
        Some(p) => {
            let file = File::create(p).with_context(|| format!("creating {}", p.display()))?;
            let mut w = BufWriter::new(file);
            f(&mut w)?;
            w.flush().with_context(|| format!("writing {}", p.display()))?;
        }
        None => {
            let stdout = std::io::stdout();
            let mut w = stdout.lock();
            f(&mut w)?;
            w.flush()?;
        }
    }
    Ok(())
}

fn load_dataset(path: &Path, schema: Schema) -> anyhow::Result<dvoc_core::Dataset> {
    let d = parse_video_dataset(&read(path)?, schema).with_context(|| format!("parsing {}", path.display()))?;
    validate(&d).with_context(|| format!("validating {}", path.display()))?;
    Ok(d)
}

fn ingest(a: IngestArgs) -> anyhow::Result<()> {
    let d = load_dataset(&a.input, a.schema)?;
    log::info!(
        "{}: {} categories, {} videos, {} objects, {} captions",
        a.input.display(),
        d.categories.len(),
        d.videos.len(),
        d.object_count(),
        d.caption_count()
    );
    let schema = a.output_schema.unwrap_or(a.schema);
    emit(a.output.as_deref(), |w| {
        write_dataset(&d, schema, w)?;
        Ok(())
    })
}

fn generate(a: GenerateArgs, file: &FileConfig) -> anyhow::Result<()> {
    let g = &file.generate;
    let endpoint = layer([g.endpoint.clone(), a.endpoint.clone()])
        .ok_or_else(|| ConfigError("no endpoint given (--endpoint or [generate] endpoint)".into()))?;
    let adapter = layer([parse_value("generate.adapter", g.adapter.as_ref())?, a.adapter]).unwrap_or(Adapter::Gemini);
    let defaults = PromptOptions::default();
    let prompt = PromptOptions {
        visual: layer([parse_value("generate.visual_mode", g.visual_mode.as_ref())?, a.visual_mode])
            .unwrap_or(defaults.visual),
        cue: layer([parse_value("generate.cue", g.cue.as_ref())?, a.cue]).unwrap_or(defaults.cue),
        include_area: !a.no_area,
        include_other_labels: !a.no_other_labels,
        few_shot: layer([g.few_shot, a.few_shot]).unwrap_or(defaults.few_shot),
        samples: layer([g.samples, a.samples]).unwrap_or(defaults.samples),
        stroke: defaults.stroke,
    };
    let opts = GenerateOptions {
        prompt,
        max_inflight: layer([g.max_inflight, a.max_inflight]).unwrap_or(GenerateOptions::default().max_inflight),
    };
    if opts.max_inflight == 0 {
        return Err(ConfigError("max_inflight must be positive".into()).into());
    }
    let mut client_cfg = ClientConfig::default();
    if let Some(m) = layer([g.model.clone(), a.model.clone()]) {
        client_cfg.model = m;
    }
    if let Some(r) = layer([g.rate, a.rate]) {
        if !(r > 0.0 && r.is_finite()) {
            return Err(ConfigError(format!("rate must be positive, got {r}")).into());
        }
        client_cfg.rate_limit = Some((r, r.max(1.0)));
    }
    let timeout = Duration::from_secs(layer([g.timeout_secs, a.timeout_secs]).unwrap_or(120));

    let key = std::env::var(API_KEY_ENV).map_err(|_| ConfigError(format!("{API_KEY_ENV} is not set")))?;
    let transport = HttpTransport::new(&endpoint, key, adapter, timeout)?;
    let client = CaptionClient::new(Box::new(transport), client_cfg);

    let mut dataset = load_dataset(&a.dataset, a.schema)?;
    let journal_path = a.journal.clone().unwrap_or_else(|| suffixed(&a.output, ".journal"));
    let journal = if a.resume {
        let (j, entries) = Journal::open(&journal_path).with_context(|| format!("opening {}", journal_path.display()))?;
        let n = apply_journal(&mut dataset, &entries);
        log::info!("resumed {n} captions from {}", journal_path.display());
        j
    } else {
        Journal::create(&journal_path).with_context(|| format!("creating {}", journal_path.display()))?
    };
    log::info!(
        "captioning {} of {} objects with {} ({} in flight)",
        dataset.object_count() - dataset.caption_count(),
        dataset.object_count(),
        client.config().model,
        opts.max_inflight
    );
    let source = DirFrameSource::new(&a.frames);
    let outcome = generate_captions(&dataset, &source, &client, &opts, Some(&journal));
    let m = &outcome.manifest;
    log::info!(
        "{} captioned, {} failed, {} already captioned",
        m.captioned,
        m.failures.len(),
        m.already_captioned
    );
    for f in &m.failures {
        log::warn!("video {} object {}: {:?}: {}", f.video_id, f.object_id, f.kind, f.message);
    }
    emit(Some(&a.output), |w| {
        write_dataset(&outcome.dataset, a.schema, w)?;
        Ok(())
    })?;
    let manifest_path = a.manifest.clone().unwrap_or_else(|| suffixed(&a.output, ".manifest.json"));
    emit(Some(&manifest_path), |w| {
        serde_json::to_writer_pretty(&mut *w, m)?;
        writeln!(w)?;
        Ok(())
    })
}

fn suffixed(p: &Path, suffix: &str) -> PathBuf {
    let mut s = p.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Preset, then config file, then flags.
fn resolve_tracker(flags: &TrackerFlags, file: &FileConfig) -> anyhow::Result<(Option<Preset>, TrackerConfig, AggregationConfig)> {
    let preset = layer([parse_value::<Preset>("preset", file.preset.as_ref())?, flags.preset]);
    let (mut t, mut agg) = match preset {
        Some(p) => (p.tracker(), p.aggregation()),
        None => (TrackerConfig::default(), AggregationConfig::default()),
    };
    let ft = &file.tracker;
    t.t_match = layer([Some(t.t_match), ft.t_match, flags.t_match]).unwrap_or(t.t_match);
    t.k_match = layer([Some(t.k_match), ft.k_match, flags.k_match]).unwrap_or(t.k_match);
    t.t_thresh = layer([Some(t.t_thresh), ft.t_thresh, flags.t_thresh]).unwrap_or(t.t_thresh);
    t.match_floor = layer([Some(t.match_floor), ft.match_floor, flags.match_floor]).unwrap_or(t.match_floor);
    let fa = &file.aggregation;
    agg.t_agg = layer([Some(agg.t_agg), fa.t_agg, flags.t_agg]).unwrap_or(agg.t_agg);
    agg.mode = layer([
        Some(agg.mode),
        parse_value("aggregation.mode", fa.mode.as_ref())?,
        flags.aggregation,
    ])
    .unwrap_or(agg.mode);
    t.validate().map_err(|e| ConfigError(e.to_string()))?;
    if agg.t_agg == 0 {
        return Err(ConfigError("t_agg must be positive".into()).into());
    }
    Ok((preset, t, agg))
}

fn track(a: TrackArgs, file: &FileConfig) -> anyhow::Result<()> {
    let (preset, cfg, agg) = resolve_tracker(&a.tracker, file)?;
    log::info!(
        "tracker: preset={} t_match={} k_match={} t_thresh={} match_floor={} t_agg={} aggregation={}",
        preset.map_or("none", |p| p.name()),
        cfg.t_match,
        cfg.k_match,
        cfg.t_thresh,
        cfg.match_floor,
        agg.t_agg,
        agg.mode.name()
    );
    let videos = parse_predictions(&read(&a.predictions)?).with_context(|| format!("parsing {}", a.predictions.display()))?;
    if let Some(p) = preset {
        let spans: BTreeMap<usize, usize> = videos
            .values()
            .flatten()
            .fold(BTreeMap::new(), |mut m, c| {
                *m.entry(c.span()).or_default() += 1;
                m
            });
        if spans.keys().any(|&s| s != p.clip_length()) {
            log::warn!(
                "preset {} expects clips of {} frames; predictions have spans {:?}",
                p.name(),
                p.clip_length(),
                spans.keys().collect::<Vec<_>>()
            );
        }
    }
    let tracks: Vec<VideoTracks> = videos
        .par_iter()
        .map(|(&video_id, clips)| {
            track_and_aggregate(clips, &cfg, &agg)
                .map(|tracks| VideoTracks { video_id, tracks })
                .with_context(|| format!("video {video_id}"))
        })
        .collect::<anyhow::Result<_>>()?;
    log::info!(
        "{} videos, {} tracks",
        tracks.len(),
        tracks.iter().map(|v| v.tracks.len()).sum::<usize>()
    );
    emit(a.output.as_deref(), |w| {
        write_tracks(&tracks, w)?;
        Ok(())
    })
}

fn evaluate_cmd(a: EvaluateArgs, file: &FileConfig) -> anyhow::Result<()> {
    let fe = &file.eval;
    let geometry = layer([parse_value("eval.geometry", fe.geometry.as_ref())?, a.geometry]).unwrap_or(GeometryMode::Box);
    let alphas = layer([fe.alphas.clone(), a.alphas.clone()]).unwrap_or_else(default_alphas);
    let capsim = layer([parse_value("eval.capsim", fe.capsim.as_ref())?, a.capsim]).unwrap_or(CapSim::Cider);
    let cfg = EvalConfig { alphas, geometry };
    cfg.validate().map_err(|e| ConfigError(e.to_string()))?;

    let gt = load_dataset(&a.gt, a.schema)?;
    let tracks = parse_tracks(&read(&a.tracks)?).with_context(|| format!("parsing {}", a.tracks.display()))?;
    let sim: Box<dyn CaptionSimilarity> = match capsim {
        CapSim::Exact => Box::new(ExactMatch),
        CapSim::Cider => match CiderBackend::new(&gt_captions(&gt)) {
            Ok(b) => Box::new(b),
            Err(_) => {
                log::warn!("ground truth has no captions; caption accuracy only counts false positives");
                Box::new(ExactMatch)
            }
        },
    };
    log::info!(
        "evaluating {} tracked videos against {} ground-truth videos ({} geometry, {} thresholds)",
        tracks.len(),
        gt.videos.len(),
        geometry.name(),
        cfg.alphas.len()
    );
    let report = evaluate(&gt, &tracks, &cfg, sim.as_ref())?;
    let s = report.summary;
    log::info!(
        "CHOTA {:.2}  DetA {:.2}  AssA {:.2}  CapA {:.2}",
        s.chota,
        s.det_a,
        s.ass_a,
        s.cap_a
    );
    emit(a.output.as_deref(), |w| {
        serde_json::to_writer_pretty(&mut *w, &report)?;
        writeln!(w)?;
        Ok(())
    })?;
    if let Some(p) = &a.csv {
        emit(Some(p), |w| {
            w.write_all(report.curves_csv().as_bytes())?;
            Ok(())
        })?;
    }
    Ok(())
}

fn capsim(a: CapsimArgs) -> anyhow::Result<()> {
    let candidates = read(&a.candidates)?;
    let references = read(&a.references)?;
    let cand: Vec<&str> = candidates.lines().collect();
    let refs: Vec<&str> = references.lines().collect();
    if cand.len() != refs.len() {
        bail!(ConfigError(format!(
            "{} candidates but {} references; files are paired by line",
            cand.len(),
            refs.len()
        )));
    }
    let backend = CiderBackend::new(&refs).map_err(|e| ConfigError(format!("{}: {e}", a.references.display())))?;
    let scores: Vec<f64> = cand
        .par_iter()
        .zip(refs.par_iter())
        .map(|(c, r)| backend.similarity(c, r))
        .collect();
    if !scores.is_empty() {
        log::info!(
            "{} pairs, mean similarity {:.4}",
            scores.len(),
            scores.iter().sum::<f64>() / scores.len() as f64
        );
    }
    emit(a.output.as_deref(), |w| {
        writeln!(w, "line,similarity")?;
        for (i, s) in scores.iter().enumerate() {
            writeln!(w, "{},{s}", i + 1)?;
        }
        Ok(())
    })
}

fn report(a: ReportArgs) -> anyhow::Result<()> {
    let report: EvalReport = serde_json::from_str(&read(&a.input)?)
        .map_err(|e| ConfigError(format!("{}: not an evaluation report: {e}", a.input.display())))?;
    if report.schema_version != SCHEMA_VERSION {
        log::warn!(
            "{} has schema version {}, expected {SCHEMA_VERSION}",
            a.input.display(),
            report.schema_version
        );
    }
    let text = if a.curves { report.curves_csv() } else { report.render_table() };
    emit(None, |w| {
        w.write_all(text.as_bytes())?;
        Ok(())
    })
}
