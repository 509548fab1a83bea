use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use trackany::backends::{BackendConfig, BackendOptions};
use trackany::error::{exit, CliError};
use trackany::eval::{run_eval, EvalConfig};
use trackany::service::{open_video, serve, ServeConfig};
use trackany::synth::{make_synthetic_dataset, SynthSpec};
use trackany_core::backend::{DegradationConfig, SyntheticScene};
use trackany_core::davis::{annotations_dir, open_davis_sequence, RESOLUTION_DIR};
use trackany_core::engine::{parse_log, replay, EngineConfig, ReplayError};
use trackany_core::metrics::{BoundaryTolerance, FramePolicy, MetricConfig};
use trackany_core::prompts::PromptConfig;
use trackany_remote::MockServer;

#[derive(Parser)]
#[command(name = "trackany", version, about = "Interactive video object tracking and segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the HTTP/WebSocket session service.
    Serve(ServeArgs),
    /// Evaluate on a DAVIS-layout dataset with a simulated user.
    Eval(EvalArgs),
    /// Generate a synthetic DAVIS-layout dataset.
    Synth(SynthArgs),
    /// Re-execute an event log and verify every recorded digest.
    Replay(ReplayArgs),
    /// Serve the model wire protocol from a dataset's annotations.
    MockServer(MockArgs),
}

#[derive(Args)]
struct BackendArgs {
    /// `synthetic` or `remote:<url>`.
    #[arg(long, env = "TRACKANY_BACKEND", default_value = "synthetic")]
    backend: String,
    /// Erosion per frame since the last anchor, synthetic propagator only.
    #[arg(long, env = "TRACKANY_EROSION", default_value_t = 0.0)]
    erosion: f64,
    #[arg(long, env = "TRACKANY_AFFINITY_SHARPNESS", default_value_t = 16.0)]
    affinity_sharpness: f64,
    /// Clamp out-of-range remote values instead of rejecting them.
    #[arg(long, env = "TRACKANY_LENIENT")]
    lenient: bool,
    #[arg(long, env = "TRACKANY_TIMEOUT_MS", default_value_t = 30_000)]
    timeout_ms: u64,
    #[arg(long, env = "TRACKANY_RETRIES", default_value_t = 2)]
    retries: u32,
}

impl BackendArgs {
    fn degradation(&self) -> Result<DegradationConfig, CliError> {
        DegradationConfig::new(self.erosion, self.affinity_sharpness).map_err(CliError::Config)
    }

    fn resolve(&self) -> Result<BackendConfig, CliError> {
        let options = BackendOptions {
            degradation: self.degradation()?,
            strict: !self.lenient,
            timeout: Duration::from_millis(self.timeout_ms),
            retries: self.retries,
        };
        BackendConfig::parse(&self.backend, &options)
    }
}

#[derive(Args)]
struct EngineArgs {
    /// JSON engine config; the flags below override it.
    #[arg(long, env = "TRACKANY_ENGINE_CONFIG")]
    engine_config: Option<PathBuf>,
    /// Quality threshold below which an object is failing.
    #[arg(long, env = "TRACKANY_TAU")]
    tau: Option<f64>,
    /// Weight of affinity confidence against mask stability.
    #[arg(long, env = "TRACKANY_ALPHA")]
    alpha: Option<f64>,
    /// Disable refinement of failing objects.
    #[arg(long, env = "TRACKANY_NO_REFINE")]
    no_refine: bool,
    #[arg(long, env = "TRACKANY_K_POS")]
    k_pos: Option<usize>,
    #[arg(long, env = "TRACKANY_K_NEG")]
    k_neg: Option<usize>,
    #[arg(long, env = "TRACKANY_MIN_DIST")]
    min_dist: Option<u32>,
    #[arg(long, env = "TRACKANY_INIT_CLICKS")]
    init_clicks: Option<usize>,
    #[arg(long, env = "TRACKANY_PROMPT_RES")]
    prompt_res: Option<u32>,
}

impl EngineArgs {
    fn resolve(&self) -> Result<EngineConfig, CliError> {
        let mut cfg: EngineConfig = match &self.engine_config {
            Some(path) => read_json(path)?,
            None => EngineConfig::default(),
        };
        let q = &mut cfg.quality;
        if let Some(v) = self.tau {
            q.tau = v;
        }
        if let Some(v) = self.alpha {
            q.alpha = v;
        }
        if self.no_refine {
            cfg.refine = false;
        }
        let p: &mut PromptConfig = &mut cfg.prompts;
        if let Some(v) = self.k_pos {
            p.k_pos = v;
        }
        if let Some(v) = self.k_neg {
            p.k_neg = v;
        }
        if let Some(v) = self.min_dist {
            p.min_dist = v;
        }
        if let Some(v) = self.init_clicks {
            p.init_clicks = v;
        }
        if let Some(v) = self.prompt_res {
            p.prompt_res = v;
        }
        cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, env = "TRACKANY_BIND", default_value = "127.0.0.1:8080")]
    bind: String,
    /// Session manifests and event logs.
    #[arg(long, env = "TRACKANY_DATA_DIR", default_value = "sessions")]
    data_dir: PathBuf,
    /// Static UI bundle to serve at `/`.
    #[arg(long, env = "TRACKANY_UI_DIR")]
    ui_dir: Option<PathBuf>,
    /// Advance frames only through the step endpoint.
    #[arg(long, env = "TRACKANY_MANUAL_STEP")]
    manual_step: bool,
    #[command(flatten)]
    backend: BackendArgs,
    #[command(flatten)]
    engine: EngineArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, env = "TRACKANY_DATASET")]
    dataset: PathBuf,
    /// Sequence id list; defaults to every annotated sequence.
    #[arg(long, env = "TRACKANY_SPLIT")]
    split: Option<PathBuf>,
    #[arg(long, env = "TRACKANY_CORRECTION_BUDGET", default_value_t = 0)]
    correction_budget: usize,
    #[arg(long, env = "TRACKANY_OUT", default_value = "results")]
    out: PathBuf,
    /// Boundary tolerance in pixels; default scales with the image diagonal.
    #[arg(long, env = "TRACKANY_TOLERANCE_PX")]
    tolerance_px: Option<u32>,
    /// skip_first, strict_davis or all.
    #[arg(long, env = "TRACKANY_FRAME_POLICY", default_value = "skip_first")]
    frame_policy: String,
    #[arg(long, env = "TRACKANY_THREADS")]
    threads: Option<usize>,
    #[command(flatten)]
    backend: BackendArgs,
    #[command(flatten)]
    engine: EngineArgs,
}

#[derive(Args)]
struct SynthArgs {
    /// JSON spec; omitted fields take their defaults.
    #[arg(long, env = "TRACKANY_SYNTH_SPEC")]
    spec: Option<PathBuf>,
    #[arg(long, env = "TRACKANY_OUT", default_value = "data")]
    out: PathBuf,
    /// Overrides the spec seed.
    #[arg(long, env = "TRACKANY_SEED")]
    seed: Option<u64>,
}

#[derive(Args)]
struct ReplayArgs {
    #[arg(long, env = "TRACKANY_LOG")]
    log: PathBuf,
    /// Frame directory of the logged video.
    #[arg(long, env = "TRACKANY_VIDEO")]
    video: PathBuf,
    /// Use this backend instead of the one named in the log header.
    #[arg(long, env = "TRACKANY_BACKEND")]
    backend: Option<String>,
}

#[derive(Args)]
struct MockArgs {
    #[arg(long, env = "TRACKANY_BIND", default_value = "127.0.0.1:8090")]
    bind: String,
    /// DAVIS-layout dataset whose annotations drive the synthetic models.
    #[arg(long, env = "TRACKANY_DATASET")]
    dataset: PathBuf,
    #[arg(long, env = "TRACKANY_EROSION", default_value_t = 0.0)]
    erosion: f64,
    #[arg(long, env = "TRACKANY_AFFINITY_SHARPNESS", default_value_t = 16.0)]
    affinity_sharpness: f64,
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(CliError::io(path))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn cmd_serve(args: ServeArgs) -> Result<(), CliError> {
    let config = ServeConfig {
        bind: args.bind,
        data_dir: args.data_dir,
        backend: args.backend.resolve()?,
        engine: args.engine.resolve()?,
        autoplay: !args.manual_step,
        ui_dir: args.ui_dir,
    };
    let runtime = tokio::runtime::Runtime::new().map_err(|e| CliError::Config(format!("runtime: {e}")))?;
    runtime.block_on(serve(config))
}

fn cmd_eval(args: EvalArgs) -> Result<(), CliError> {
    let mut config = EvalConfig::new(args.dataset, args.backend.resolve()?, args.out);
    config.split = args.split;
    config.engine = args.engine.resolve()?;
    config.init_clicks = config.engine.prompts.init_clicks;
    config.correction_budget = args.correction_budget;
    config.threads = args.threads;
    let frame_policy: FramePolicy = serde_json::from_value(serde_json::Value::String(args.frame_policy.clone()))
        .map_err(|_| CliError::Config(format!("unknown frame policy {:?}", args.frame_policy)))?;
    config.metric = MetricConfig {
        tolerance: args.tolerance_px.map_or_else(BoundaryTolerance::default, BoundaryTolerance::Pixels),
        frame_policy,
    };
    let report = run_eval(&config)?;
    print!("{}", report.results.to_table());
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> Result<(), CliError> {
    let mut spec: SynthSpec = match &args.spec {
        Some(path) => read_json(path)?,
        None => SynthSpec::default(),
    };
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    let ids = make_synthetic_dataset(&spec, &args.out)?;
    println!("wrote {} sequences to {}", ids.len(), args.out.display());
    Ok(())
}

fn cmd_replay(args: ReplayArgs) -> Result<(), CliError> {
    let text = fs::read_to_string(&args.log).map_err(CliError::io(&args.log))?;
    let backend = match &args.backend {
        Some(spec) => BackendConfig::parse(spec, &BackendOptions::default())?,
        None => {
            let header = parse_log(&text).map_err(ReplayError::Log)?.header;
            BackendConfig::from_description(&header.backend)?
        }
    };
    let (frames, gt) = open_video(&args.video)?;
    let seq = frames[0].sequence_id.clone();
    let backends = backend.build(&seq, gt)?;
    let session = replay(&text, frames, backends.segmenter, backends.propagator)?;
    for (t, map) in session.masks().iter().enumerate() {
        if let Some(map) = map {
            println!("{t:05} {}", map.digest());
        }
    }
    println!("replay ok: {} events, phase {}", session.log().events().len(), session.phase());
    Ok(())
}

fn cmd_mock(args: MockArgs) -> Result<(), CliError> {
    let degradation = DegradationConfig::new(args.erosion, args.affinity_sharpness).map_err(CliError::Config)?;
    let root = annotations_dir(&args.dataset, "");
    let mut ids: Vec<String> = fs::read_dir(&root)
        .map_err(CliError::io(&root))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .filter_map(|e| e.file_name().into_string().ok())
        .collect();
    ids.sort();
    let mut scene = SyntheticScene::new();
    for id in &ids {
        let seq = open_davis_sequence(&args.dataset, id)?;
        match seq.groundtruth() {
            Some(gt) => scene.insert(id.clone(), gt),
            None => tracing::warn!(sequence = %id, "skipped: not annotated on every frame"),
        }
    }
    let server = MockServer::bind(&args.bind, scene, degradation).map_err(CliError::io(&args.bind))?;
    tracing::info!(url = %server.url(), sequences = ids.len(), resolution = RESOLUTION_DIR, "mock model server");
    server.wait();
    Ok(())
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_env("TRACKANY_LOG_LEVEL")
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info")),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Serve(a) => cmd_serve(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Replay(a) => cmd_replay(a),
        Command::MockServer(a) => cmd_mock(a),
    };
    match result {
        Ok(()) => ExitCode::from(exit::OK as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
