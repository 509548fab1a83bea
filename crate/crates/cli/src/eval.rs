//! Unattended evaluation: a robot user initializes every object with
//! clicks on frame 0, the engine tracks in one pass, optional robot
//! corrections fire when failures persist after refinement, and the
//! results are scored and tabulated.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use trackany_core::backend::SegmentRequest;
use trackany_core::davis::{open_davis_sequence, read_split, write_sequence_masks, RESOLUTION_DIR};
use trackany_core::engine::{
    EngineConfig, EngineError, EventBody, EventKind, LogicalClock, Session, SessionOptions, SessionPhase,
};
use trackany_core::mask::extract_or_empty;
use trackany_core::metrics::{
    aggregate_sequences, report_percent, score_sequence, BoundaryTolerance, FramePolicy, MetricConfig,
};
use trackany_core::prompts::{simulate_click, simulate_init_clicks_online};
use trackany_core::{LabelMap, SequenceResult};

use crate::backends::BackendConfig;
use crate::error::CliError;

pub const RESULTS_SCHEMA: &str = "trackany-results/1";

/// JSON Schema of `results.json`.
pub const RESULTS_JSON_SCHEMA: &str = include_str!("../schema/results.schema.json");

#[derive(Clone, Debug)]
pub struct EvalConfig {
    pub dataset: PathBuf,
    /// Sequence list; every sequence under the frames directory when absent.
    pub split: Option<PathBuf>,
    pub backend: BackendConfig,
    pub init_clicks: usize,
    /// Correction episodes allowed per sequence; 0 is pure one-pass.
    pub correction_budget: usize,
    pub engine: EngineConfig,
    pub metric: MetricConfig,
    pub out: PathBuf,
    pub threads: Option<usize>,
}

impl EvalConfig {
    pub fn new(dataset: impl Into<PathBuf>, backend: BackendConfig, out: impl Into<PathBuf>) -> Self {
        Self {
            dataset: dataset.into(),
            split: None,
            backend,
            init_clicks: 3,
            correction_budget: 0,
            engine: EngineConfig::default(),
            metric: MetricConfig::default(),
            out: out.into(),
            threads: None,
        }
    }

    fn validate(&self) -> Result<(), CliError> {
        if self.init_clicks == 0 {
            return Err(CliError::Config("init clicks must be at least 1".into()));
        }
        self.engine.validate().map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn sequences(&self) -> Result<Vec<String>, CliError> {
        let ids = match &self.split {
            Some(path) => read_split(path).map_err(CliError::io(path))?,
            None => {
                let dir = self.dataset.join("JPEGImages").join(RESOLUTION_DIR);
                let mut ids: Vec<String> = fs::read_dir(&dir)
                    .map_err(CliError::io(&dir))?
                    .filter_map(|e| e.ok())
                    .filter(|e| e.path().is_dir())
                    .filter_map(|e| e.file_name().to_str().map(String::from))
                    .collect();
                ids.sort();
                ids
            }
        };
        if ids.is_empty() {
            return Err(CliError::Config("no sequences to evaluate".into()));
        }
        Ok(ids)
    }
}

/// Outcome of one sequence.
#[derive(Clone, Debug)]
pub struct SequenceRun {
    pub sequence_id: String,
    pub masks: Vec<LabelMap>,
    pub log: String,
    pub score: Option<SequenceResult>,
    pub refined: usize,
    pub reanchored: usize,
    pub corrections: usize,
}

fn engine_err(sequence: &str) -> impl Fn(EngineError) -> CliError + '_ {
    move |source| CliError::Engine { sequence: sequence.to_string(), source }
}

/// Runs one sequence end to end.
pub fn run_sequence(config: &EvalConfig, sequence_id: &str) -> Result<SequenceRun, CliError> {
    let seq = open_davis_sequence(&config.dataset, sequence_id)?;
    let gt0 = seq.annotations[0].clone().ok_or_else(|| CliError::Groundtruth {
        sequence: sequence_id.to_string(),
        message: "frame 0 has no annotation to initialize from".into(),
    })?;
    let backends = config.backend.build(sequence_id, seq.groundtruth())?;
    let segmenter = backends.segmenter.clone();
    let options = SessionOptions {
        clock: Box::new(LogicalClock::default()),
        sink: None,
        backend: config.backend.describe(),
    };
    let err = engine_err(sequence_id);
    let mut session =
        Session::new(seq.frames.clone(), backends.segmenter, backends.propagator, config.engine.clone(), options)
            .map_err(&err)?;

    for &id in gt0.object_ids() {
        let gt = extract_or_empty(&gt0, id);
        if gt.is_empty() {
            continue;
        }
        let clicks = simulate_init_clicks_online(&gt, config.init_clicks, id, |clicks| {
            segmenter
                .segment(&SegmentRequest::points(&seq.frames[0], clicks))
                .map(|r| r.mask)
                .map_err(|source| EngineError::Backend { frame: 0, source })
        })
        .map_err(&err)?;
        session.add_clicks(Some(id), clicks).map_err(&err)?;
    }

    let mut corrections = 0;
    if config.correction_budget == 0 {
        session.run_one_pass().map_err(&err)?;
    } else {
        session.start().map_err(&err)?;
        while session.frames_remaining() > 0 {
            let outcome = session.track_step().map_err(&err)?;
            let persisting: Vec<_> = outcome
                .reports
                .iter()
                .filter(|r| !r.pass && !outcome.refined.contains(&r.object_id))
                .map(|r| r.object_id)
                .collect();
            let gt = seq.annotations[outcome.frame].as_ref();
            if persisting.is_empty() || corrections >= config.correction_budget || gt.is_none() {
                continue;
            }
            session.pause().map_err(&err)?;
            for id in persisting {
                let current = extract_or_empty(session.mask(outcome.frame).expect("tracked"), id);
                let Some(click) = simulate_click(&extract_or_empty(gt.expect("checked"), id), Some(&current), id)
                    .map_err(|e| err(e.into()))?
                else {
                    continue;
                };
                match session.correct(id, vec![click]) {
                    Ok(_) | Err(EngineError::EmptyMask) => {}
                    Err(e) => return Err(err(e)),
                }
            }
            corrections += 1;
            tracing::debug!(sequence = sequence_id, frame = outcome.frame, "robot correction");
            session.resume().map_err(&err)?;
        }
        session.finish().map_err(&err)?;
    }
    debug_assert_eq!(session.phase(), SessionPhase::Finished);

    let masks: Vec<LabelMap> = session.masks().iter().map(|m| m.clone().expect("every frame tracked")).collect();
    let score = match seq.groundtruth() {
        Some(gt) => Some(
            score_sequence(sequence_id, &masks, &gt, &config.metric)
                .map_err(|source| CliError::Metric { sequence: sequence_id.to_string(), source })?,
        ),
        None => {
            tracing::warn!(sequence = sequence_id, "groundtruth incomplete; masks written, scoring skipped");
            None
        }
    };
    let events = session.log().events();
    let count = |kind| events.iter().filter(|e| e.kind() == kind).count();
    let refined = events.iter().filter(|e| matches!(e.body, EventBody::Refined { accepted: true, .. })).count();
    Ok(SequenceRun {
        sequence_id: sequence_id.to_string(),
        log: session.log().to_jsonl(),
        masks,
        score,
        refined,
        reanchored: count(EventKind::ReAnchored),
        corrections,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResultsConfig {
    pub init_clicks: usize,
    pub correction_budget: usize,
    pub engine: EngineConfig,
    pub tolerance: BoundaryTolerance,
    pub frame_policy: FramePolicy,
    pub resolution: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreEntry {
    pub j: f64,
    pub f: f64,
    pub jf: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectEntry {
    pub object_id: u8,
    pub j: f64,
    pub f: f64,
    pub jf: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceEntry {
    pub sequence_id: String,
    pub frames: usize,
    /// Absent when the groundtruth does not cover every frame.
    pub score: Option<ScoreEntry>,
    pub objects: Vec<ObjectEntry>,
    pub refined: usize,
    pub reanchored: usize,
    pub corrections: usize,
}

/// Contents of `results.json`. Scores are fractions in [0, 1].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Results {
    pub schema: String,
    pub dataset: String,
    pub split: String,
    pub backend: BackendConfig,
    pub config: ResultsConfig,
    pub sequences: Vec<SequenceEntry>,
    /// Means over every scored (sequence, object) pair.
    pub summary: Option<ScoreEntry>,
}

impl Results {
    fn build(config: &EvalConfig, runs: &[SequenceRun]) -> Result<Self, CliError> {
        let scored: Vec<SequenceResult> = runs.iter().filter_map(|r| r.score.clone()).collect();
        let summary = if scored.is_empty() {
            None
        } else {
            let d = aggregate_sequences(scored)
                .map_err(|source| CliError::Metric { sequence: "dataset".into(), source })?;
            Some(ScoreEntry { j: d.j, f: d.f, jf: d.jf })
        };
        let sequences = runs
            .iter()
            .map(|r| SequenceEntry {
                sequence_id: r.sequence_id.clone(),
                frames: r.masks.len(),
                score: r.score.as_ref().map(|s| ScoreEntry { j: s.j, f: s.f, jf: s.jf }),
                objects: r.score.as_ref().map_or_else(Vec::new, |s| {
                    s.objects
                        .iter()
                        .map(|o| ObjectEntry { object_id: o.object_id, j: o.j, f: o.f, jf: o.jf })
                        .collect()
                }),
                refined: r.refined,
                reanchored: r.reanchored,
                corrections: r.corrections,
            })
            .collect();
        let name = |p: &Path| p.file_name().and_then(|n| n.to_str()).unwrap_or("dataset").to_string();
        Ok(Results {
            schema: RESULTS_SCHEMA.into(),
            dataset: name(&config.dataset.canonicalize().unwrap_or_else(|_| config.dataset.clone())),
            split: config.split.as_deref().map_or_else(|| "all".into(), |p| {
                p.file_stem().and_then(|s| s.to_str()).unwrap_or("split").to_string()
            }),
            backend: config.backend.clone(),
            config: ResultsConfig {
                init_clicks: config.init_clicks,
                correction_budget: config.correction_budget,
                engine: config.engine.clone(),
                tolerance: config.metric.tolerance,
                frame_policy: config.metric.frame_policy,
                resolution: RESOLUTION_DIR.into(),
            },
            sequences,
            summary,
        })
    }

    /// Text table in percent with one decimal, ties to even. Depends only on the JSON
    /// contents.
    pub fn to_table(&self) -> String {
        let method = if self.config.correction_budget == 0 {
            "click, one pass".to_string()
        } else {
            format!("click, up to {} corrections", self.config.correction_budget)
        };
        let pct = |s: Option<&ScoreEntry>| match s {
            Some(s) => format!("{:>7.1}{:>7.1}{:>7.1}", report_percent(s.jf), report_percent(s.j), report_percent(s.f)),
            None => format!("{:>7}{:>7}{:>7}", "-", "-", "-"),
        };
        let width = self.sequences.iter().map(|s| s.sequence_id.len()).max().unwrap_or(0).max(8);
        let mut out = String::new();
        writeln!(out, "Method: trackany ({method})").unwrap();
        writeln!(out, "Dataset: {} ({})", self.dataset, self.split).unwrap();
        writeln!(out, "{:<width$}{:>7}{:>7}{:>7}", "Sequence", "J&F", "J", "F").unwrap();
        for s in &self.sequences {
            writeln!(out, "{:<width$}{}", s.sequence_id, pct(s.score.as_ref())).unwrap();
        }
        writeln!(out, "{:<width$}{}", "Mean", pct(self.summary.as_ref())).unwrap();
        out
    }
}

#[derive(Debug)]
pub struct EvalReport {
    pub results: Results,
    pub runs: Vec<SequenceRun>,
}

fn write_file(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    fs::write(path, contents).map_err(CliError::io(path))
}

/// Evaluates every sequence (in parallel across sequences) and writes
/// `results.json`, `results.txt`, `masks/<seq>/NNNNN.png` and
/// `logs/<seq>.jsonl` under the output directory.
pub fn run_eval(config: &EvalConfig) -> Result<EvalReport, CliError> {
    config.validate()?;
    config.backend.handshake()?;
    let ids = config.sequences()?;
    let work = || ids.par_iter().map(|id| run_sequence(config, id)).collect::<Result<Vec<_>, _>>();
    let runs = match config.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| CliError::Config(format!("thread pool: {e}")))?
            .install(work)?,
        None => work()?,
    };

    let logs = config.out.join("logs");
    let masks = config.out.join("masks");
    fs::create_dir_all(&logs).map_err(CliError::io(&logs))?;
    for run in &runs {
        write_file(&logs.join(format!("{}.jsonl", run.sequence_id)), run.log.as_bytes())?;
        let maps: Vec<Option<LabelMap>> = run.masks.iter().cloned().map(Some).collect();
        write_sequence_masks(&masks, &run.sequence_id, &maps)?;
    }
    let results = Results::build(config, &runs)?;
    let json = serde_json::to_string_pretty(&results).expect("results serialize");
    write_file(&config.out.join("results.json"), json.as_bytes())?;
    write_file(&config.out.join("results.txt"), results.to_table().as_bytes())?;
    if let Some(s) = &results.summary {
        tracing::info!(jf = s.jf, j = s.j, f = s.f, sequences = runs.len(), "evaluation finished");
    }
    Ok(EvalReport { results, runs })
}
