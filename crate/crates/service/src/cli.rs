use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use makeup_core::backend::{BackendSettings, RemoteConfig};
use makeup_core::config::{spec_schema, ColorTargetDoc, SpecDocument};
use makeup_core::fixtures::fixture_sized;
use makeup_core::pipeline::{run_makeup, JobControl};

use crate::jobs::{Service, ServiceConfig};
use crate::prepare::{prepare, BackendPool, Limits};
use crate::store::{JobInputs, RestartPolicy};

#[derive(Debug, Parser)]
#[command(name = "makeup", version, about = "Region-aware makeup editing with diffusion backends")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Recolor facial regions with target colors and optional concept prompts.
    Color(ColorArgs),
    /// Copy the makeup of a reference face onto the source face.
    Transfer(TransferArgs),
    /// Run the HTTP job service.
    Serve(ServeArgs),
    /// Write a bundled synthetic face and its label map.
    Fixture(FixtureArgs),
    /// Print the JSON Schema of spec documents.
    Schema,
}

#[derive(Debug, Args)]
pub struct SourceArgs {
    /// Source face image (PNG or JPEG).
    #[arg(long)]
    pub image: PathBuf,
    /// Label map PNG whose gray values are face-parser class ids.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Text file of `label=region` lines replacing the default class mapping.
    #[arg(long)]
    pub mapping: Option<PathBuf>,
    /// Segment the image with a bundled fixture palette instead of --labels.
    #[arg(long, conflicts_with = "labels")]
    pub fixture: Option<String>,
    #[arg(long, env = "MAKEUP_BACKEND", default_value = "toy")]
    pub backend: String,
    #[arg(long, env = "MAKEUP_REMOTE_URL")]
    pub remote_url: Option<String>,
    /// JSON spec document; flags below are added on top of it.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Concept prompt as "text:weight"; repeatable.
    #[arg(long = "concept")]
    pub concepts: Vec<String>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub t_star: Option<usize>,
    #[arg(long)]
    pub inversion_steps: Option<usize>,
    #[arg(long)]
    pub reverse_steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output image (PNG).
    #[arg(long)]
    pub out: PathBuf,
    /// Also write intermediate images and masks into this directory.
    #[arg(long)]
    pub debug_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ColorArgs {
    #[command(flatten)]
    pub source: SourceArgs,
    #[arg(long, value_name = "HEX")]
    pub lips: Option<String>,
    #[arg(long, value_name = "HEX")]
    pub skin: Option<String>,
    #[arg(long, value_name = "HEX")]
    pub eyeshadow: Option<String>,
    /// Transfer scale applied to every color flag.
    #[arg(long, default_value_t = 1.0)]
    pub alpha: f64,
}

#[derive(Debug, Args)]
pub struct TransferArgs {
    #[command(flatten)]
    pub source: SourceArgs,
    #[arg(long)]
    pub reference: PathBuf,
    #[arg(long, conflicts_with = "reference_fixture")]
    pub reference_labels: Option<PathBuf>,
    #[arg(long)]
    pub reference_fixture: Option<String>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum OnRestart {
    Requeue,
    Fail,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, env = "MAKEUP_PORT", default_value_t = 8080)]
    pub port: u16,
    #[arg(long, env = "MAKEUP_HOST", default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long, env = "MAKEUP_BACKEND", default_value = "toy")]
    pub backend: String,
    #[arg(long, env = "MAKEUP_WORKERS", default_value_t = 2)]
    pub workers: usize,
    #[arg(long, env = "MAKEUP_STORE_DIR", default_value = "makeup-store")]
    pub store_dir: PathBuf,
    #[arg(long, env = "MAKEUP_REMOTE_URL")]
    pub remote_url: Option<String>,
    #[arg(long, env = "MAKEUP_JOB_TIMEOUT_SECS", default_value_t = 600)]
    pub job_timeout_secs: u64,
    #[arg(long, env = "MAKEUP_MAX_PIXELS", default_value_t = 1024 * 1024)]
    pub max_pixels: usize,
    #[arg(long, env = "MAKEUP_MAX_UPLOAD_BYTES", default_value_t = 32 * 1024 * 1024)]
    pub max_upload_bytes: usize,
    /// What to do with jobs left unfinished by a previous run.
    #[arg(long, env = "MAKEUP_ON_RESTART", value_enum, default_value = "requeue")]
    pub on_restart: OnRestart,
}

#[derive(Debug, Args)]
pub struct FixtureArgs {
    #[arg(long, default_value = "face-a")]
    pub name: String,
    #[arg(long, default_value_t = 128)]
    pub size: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub labels_out: Option<PathBuf>,
}

fn read(path: &Path) -> Result<Vec<u8>, String> {
    fs::read(path).map_err(|e| format!("cannot read {}: {e}", path.display()))
}

fn read_text(path: &Path) -> Result<String, String> {
    fs::read_to_string(path).map_err(|e| format!("cannot read {}: {e}", path.display()))
}

fn settings(remote_url: Option<&str>) -> BackendSettings {
    BackendSettings {
        remote: remote_url.map(RemoteConfig::new),
        ..BackendSettings::default()
    }
}

fn base_document(src: &SourceArgs) -> Result<SpecDocument, String> {
    let mut doc = match &src.spec {
        Some(path) => SpecDocument::parse(&read_text(path)?).map_err(|e| format!("spec {e}"))?,
        None => SpecDocument::default(),
    };
    doc.concepts.extend(src.concepts.iter().cloned());
    if let Some(l) = src.lambda {
        doc.guidance.lambda = l;
    }
    if let Some(t) = src.t_star {
        doc.t_star = t;
    }
    if let Some(n) = src.inversion_steps {
        doc.inversion_steps = n;
    }
    if let Some(n) = src.reverse_steps {
        doc.reverse_steps = n;
    }
    if let Some(s) = src.seed {
        doc.seed = s;
    }
    Ok(doc)
}

fn source_inputs(src: &SourceArgs, doc: &SpecDocument) -> Result<JobInputs, String> {
    Ok(JobInputs {
        image: read(&src.image)?,
        labels: src.labels.as_deref().map(read).transpose()?,
        mapping: src.mapping.as_deref().map(read_text).transpose()?,
        fixture: src.fixture.clone(),
        spec: doc.to_json(),
        backend: Some(src.backend.clone()),
        debug: src.debug_dir.is_some(),
        ..JobInputs::default()
    })
}

fn execute(src: &SourceArgs, inputs: JobInputs) -> Result<(), String> {
    let pool = BackendPool::new(settings(src.remote_url.as_deref()));
    let prepared = prepare(&inputs, &pool, &src.backend, &Limits { max_pixels: usize::MAX })
        .map_err(|r| r.to_string())?;
    let result = run_makeup(&prepared.job, prepared.backend.as_ref(), &JobControl::default())
        .map_err(|e| e.to_string())?;
    result.output.save_png(&src.out).map_err(|e| e.to_string())?;
    if let (Some(dir), Some(inter)) = (&src.debug_dir, &result.intermediates) {
        fs::create_dir_all(dir).map_err(|e| e.to_string())?;
        inter.x0_hat.save_png(dir.join("x0_hat.png")).map_err(|e| e.to_string())?;
        inter.x_new.save_png(dir.join("x_new.png")).map_err(|e| e.to_string())?;
        for mask in inter.masks.iter() {
            let bytes = mask.encode_png().map_err(|e| e.to_string())?;
            fs::write(dir.join(format!("mask-{}.png", mask.region)), bytes).map_err(|e| e.to_string())?;
        }
    }
    Ok(())
}

fn color(args: &ColorArgs) -> Result<(), String> {
    let mut doc = base_document(&args.source)?;
    for (region, hex) in [("lips", &args.lips), ("skin", &args.skin), ("eyeshadow", &args.eyeshadow)] {
        if let Some(color) = hex {
            doc.color_targets.push(ColorTargetDoc {
                region: region.into(),
                color: color.clone(),
                alpha: args.alpha,
                sigma: None,
            });
        }
    }
    let inputs = source_inputs(&args.source, &doc)?;
    execute(&args.source, inputs)
}

fn transfer(args: &TransferArgs) -> Result<(), String> {
    let doc = base_document(&args.source)?;
    let mut inputs = source_inputs(&args.source, &doc)?;
    inputs.reference = Some(read(&args.reference)?);
    inputs.reference_labels = args.reference_labels.as_deref().map(read).transpose()?;
    inputs.reference_fixture = args.reference_fixture.clone();
    execute(&args.source, inputs)
}

fn fixture(args: &FixtureArgs) -> Result<(), String> {
    let f = fixture_sized(&args.name, args.size).map_err(|e| e.to_string())?;
    f.image.save_png(&args.out).map_err(|e| e.to_string())?;
    if let Some(path) = &args.labels_out {
        let bytes = f.labels.encode_png().map_err(|e| e.to_string())?;
        fs::write(path, bytes).map_err(|e| format!("cannot write {}: {e}", path.display()))?;
    }
    Ok(())
}

fn serve(args: &ServeArgs) -> Result<(), String> {
    let config = ServiceConfig {
        store_dir: args.store_dir.clone(),
        default_backend: args.backend.clone(),
        workers: args.workers.max(1),
        job_timeout: Duration::from_secs(args.job_timeout_secs),
        limits: Limits {
            max_pixels: args.max_pixels,
        },
        max_body_bytes: args.max_upload_bytes,
        restart_policy: match args.on_restart {
            OnRestart::Requeue => RestartPolicy::Requeue,
            OnRestart::Fail => RestartPolicy::Fail,
        },
        backends: settings(args.remote_url.as_deref()),
    };
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| e.to_string())?;
    runtime.block_on(async move {
        let svc = Service::start(config).map_err(|e| e.to_string())?;
        svc.pool
            .get(&svc.config.default_backend)
            .map_err(|e| format!("default backend: {e}"))?;
        let addr = format!("{}:{}", args.host, args.port);
        let listener = tokio::net::TcpListener::bind(&addr)
            .await
            .map_err(|e| format!("cannot listen on {addr}: {e}"))?;
        tracing::info!("listening on http://{addr}");
        axum::serve(listener, crate::api::router(svc))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .map_err(|e| e.to_string())
    })
}

/// Parses arguments and runs the command, returning the process exit code:
/// 0 on success, 1 on a runtime failure and 2 on bad usage.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let outcome = match &cli.command {
        Command::Color(a) => color(a),
        Command::Transfer(a) => transfer(a),
        Command::Serve(a) => serve(a),
        Command::Fixture(a) => fixture(a),
        Command::Schema => {
            println!("{}", serde_json::to_string_pretty(&spec_schema()).unwrap_or_default());
            Ok(())
        }
    };
    match outcome {
        Ok(()) => 0,
        Err(msg) => {
            eprintln!("error: {msg}");
            1
        }
    }
}
