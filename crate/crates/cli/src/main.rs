use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use lidmark::checkpoint::{load_models, save_models};
use lidmark::config::RunConfig;
use lidmark::dataset::{generate_synthetic_set, load_dataset, split_dataset, write_dataset, DatasetRecord, SIDECAR_NAME};
use lidmark::distortion::{apply_with_record, ManipulationKind, ManipulationSpec, Stage, SwapTarget};
use lidmark::evaluation::{bench, embed_examples, run_trials, specs_for};
use lidmark::forensics::{calibrate_threshold, forensic_report, image_quality, trace, SourceRegistry};
use lidmark::imaging::{write_atomic, ImageBuffer};
use lidmark::model::{model_summary, ModelSet};
use lidmark::payload::{derive_source_id, normalize_landmarks, read_sidecar, source_name, write_sidecar, IdBits, SidecarRecord};
use lidmark::training::{prepare_examples, train, LogEntry};
use lidmark::Error;

/// Landmark-identifier watermarking for face images: embed, attack, verify, trace.
#[derive(Parser)]
#[command(name = "lidmark", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render synthetic faces with exact landmarks into a dataset directory.
    DatasetSynth(DatasetSynthArgs),
    /// Print identifiers and payload vectors for a sidecar or source names.
    Payload(PayloadArgs),
    /// Run one training stage and write a checkpoint.
    Train(TrainArgs),
    /// Watermark every image of a dataset directory.
    Embed(EmbedArgs),
    /// Apply one manipulation to every image of a dataset directory.
    Attack(AttackArgs),
    /// Decode one image and report detection, localization and tracing results.
    Verify(VerifyArgs),
    /// Decode the identifier of one image and look it up in a registry.
    Trace(TraceArgs),
    /// Derive the detection threshold from benign and swapped copies of a dataset.
    Calibrate(CalibrateArgs),
    /// Robustness and quality table over the common distortions.
    Bench(BenchArgs),
    /// Parameter counts and FLOP estimates as JSON.
    ModelInfo(ModelInfoArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// key = value configuration file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key, e.g. --set model.image_size=64 (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> lidmark::Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        for (i, o) in self.overrides.iter().enumerate() {
            c.merge_text(o, &format!("--set #{}", i + 1))?;
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Args)]
struct DatasetSynthArgs {
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    /// Number of faces
    #[arg(long, default_value_t = 500)]
    count: usize,
    /// Canvas side in pixels (64, 128 or 256)
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// Seed of the first face; faces use consecutive seeds
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct PayloadArgs {
    /// Landmark sidecar (JSON Lines); one payload per record
    #[arg(long, conflicts_with = "name")]
    sidecar: Option<PathBuf>,
    /// Source name to hash (repeatable)
    #[arg(long)]
    name: Vec<String>,
    /// Identifier width (16 or 32)
    #[arg(long, default_value_t = 16)]
    id_bits: usize,
    /// Output JSON Lines file [default: stdout]
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory (PNG images and landmarks.jsonl)
    #[arg(long)]
    data: PathBuf,
    /// pretrain or finetune
    #[arg(long, default_value = "pretrain")]
    stage: String,
    /// Checkpoint to continue from (required for finetune)
    #[arg(long)]
    init: Option<PathBuf>,
    /// Output checkpoint
    #[arg(long)]
    out: PathBuf,
    /// Training log (JSON Lines)
    #[arg(long)]
    log: Option<PathBuf>,
    /// Fraction of the dataset held out for per-epoch validation
    #[arg(long, default_value_t = 0.1)]
    val_fraction: f64,
    /// Seed; overrides the configuration file
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct EmbedArgs {
    /// Trained checkpoint
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory (PNG images and landmarks.jsonl)
    #[arg(long)]
    data: PathBuf,
    /// Output directory for watermarked images and their landmarks
    #[arg(long)]
    out: PathBuf,
    /// Source registry to write [default: OUT/registry.jsonl]
    #[arg(long)]
    registry: Option<PathBuf>,
}

#[derive(Args)]
struct AttackArgs {
    /// Dataset directory (PNG images and landmarks.jsonl)
    #[arg(long)]
    data: PathBuf,
    /// Output directory; landmarks.jsonl holds the post-attack landmarks
    #[arg(long)]
    out: PathBuf,
    /// identity, resize, gausblur, medblur, jpegtest, jpegmask or proxyswap
    #[arg(long)]
    kind: String,
    /// Resize down-up factor [default: 0.5]
    #[arg(long)]
    factor: Option<f64>,
    /// GausBlur sigma [default: 1.0]
    #[arg(long)]
    sigma: Option<f64>,
    /// Blur kernel size [default: 5]
    #[arg(long)]
    kernel: Option<usize>,
    /// JpegTest quality [default: 50]
    #[arg(long)]
    quality: Option<u8>,
    /// JpegMask luma coefficients kept per axis [default: 5]
    #[arg(long)]
    keep_luma: Option<usize>,
    /// JpegMask chroma coefficients kept per axis [default: 3]
    #[arg(long)]
    keep_chroma: Option<usize>,
    /// ProxySwap magnitude in pixels [default: 8]
    #[arg(long)]
    magnitude: Option<f64>,
    /// ProxySwap target: full, jaw, right_brow, left_brow, nose, right_eye, left_eye, mouth
    #[arg(long, default_value = "full")]
    target: String,
    /// Seed; image i uses seed + i
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct VerifyArgs {
    /// Trained checkpoint
    #[arg(long)]
    checkpoint: PathBuf,
    /// Image to verify
    #[arg(long)]
    image: PathBuf,
    /// Extrinsic landmarks [default: landmarks.jsonl next to the image, if present]
    #[arg(long)]
    landmarks: Option<PathBuf>,
    /// Source registry for tracing
    #[arg(long)]
    registry: Option<PathBuf>,
    /// Detection threshold in pixels [default: forensics.tau_px]
    #[arg(long)]
    tau: Option<f64>,
    /// Expected source name; adds the identifier bit error rate
    #[arg(long)]
    source: Option<String>,
    /// Output JSON [default: stdout]
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct TraceArgs {
    /// Trained checkpoint
    #[arg(long)]
    checkpoint: PathBuf,
    /// Image to trace
    #[arg(long)]
    image: PathBuf,
    /// Source registry (JSON Lines)
    #[arg(long)]
    registry: PathBuf,
    /// Report exact matches only
    #[arg(long)]
    exact: bool,
    /// Output JSON [default: stdout]
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CalibrateArgs {
    /// Trained checkpoint
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory of unwatermarked images
    #[arg(long)]
    data: PathBuf,
    /// Seed for the manipulations
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output JSON [default: stdout]
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct BenchArgs {
    /// Trained checkpoint
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory of unwatermarked images
    #[arg(long)]
    data: PathBuf,
    /// Seed for the manipulations
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output JSON [default: stdout]
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct ModelInfoArgs {
    /// Summarize the configuration stored in this checkpoint
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).format_timestamp(None).init();
    let cli = Cli::parse();
    if let Err(e) = set_threads() {
        return report_error(&e);
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report_error(&e),
    }
}

fn set_threads() -> lidmark::Result<()> {
    let Ok(value) = std::env::var("LIDMARK_THREADS") else { return Ok(()) };
    let n: usize = value
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::InvalidParameter(format!("LIDMARK_THREADS={value:?} is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::InvalidParameter(format!("thread pool: {e}")))
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::Dimension { .. } | Error::PayloadLength(_) | Error::IdBits(_) => "dimension",
        Error::Domain(_) | Error::InvalidParameter(_) => "invalid_parameter",
        Error::Record { .. } | Error::MissingImage(_) => "data",
        Error::Checkpoint(_) => "checkpoint",
        Error::Config { .. } => "config",
        Error::NonFiniteLoss { .. } => "non_finite_loss",
        Error::Empty(_) => "empty_input",
        Error::WarpOutOfBounds(_) => "warp",
        Error::Image(_) | Error::Json(_) | Error::Io(_) => "io",
    }
}

fn report_error(e: &Error) -> ExitCode {
    eprintln!("{}", json!({ "error": { "kind": error_kind(e), "message": e.to_string() } }));
    ExitCode::FAILURE
}

/// Sorted-key pretty JSON to `out` (atomically) or stdout.
fn emit<T: Serialize>(value: &T, out: Option<&Path>) -> lidmark::Result<()> {
    let mut text = serde_json::to_string_pretty(&serde_json::to_value(value)?)?;
    text.push('\n');
    match out {
        Some(p) => write_atomic(p, text.as_bytes()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn emit_lines<T: Serialize>(values: &[T], out: Option<&Path>) -> lidmark::Result<()> {
    let mut text = String::new();
    for v in values {
        text.push_str(&serde_json::to_string(&serde_json::to_value(v)?)?);
        text.push('\n');
    }
    match out {
        Some(p) => write_atomic(p, text.as_bytes()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn load_dir(dir: &Path) -> lidmark::Result<Vec<DatasetRecord>> {
    let sidecar = dir.join(SIDECAR_NAME);
    if !sidecar.exists() {
        return Err(Error::Empty("dataset directory has no landmarks.jsonl"));
    }
    let records = load_dataset(dir, &sidecar)?;
    if records.is_empty() {
        return Err(Error::Empty("dataset directory has no records"));
    }
    Ok(records)
}

fn load_checkpoint(path: &Path) -> lidmark::Result<ModelSet<f32>> {
    load_models(path)
}

fn run(command: Command) -> lidmark::Result<()> {
    match command {
        Command::DatasetSynth(a) => {
            let records = generate_synthetic_set(a.seed, a.count, a.size)?;
            write_dataset(&a.out, &records)?;
            emit(&json!({ "images": records.len(), "size": a.size, "out": a.out }), None)
        }
        Command::Payload(a) => cmd_payload(a),
        Command::Train(a) => cmd_train(a),
        Command::Embed(a) => cmd_embed(a),
        Command::Attack(a) => cmd_attack(a),
        Command::Verify(a) => cmd_verify(a),
        Command::Trace(a) => {
            let models = load_checkpoint(&a.checkpoint)?;
            let registry = SourceRegistry::load(&a.registry)?;
            let d = decode_one(&models, &a.image)?;
            emit(&trace(&d.id_logits, &registry, !a.exact)?, a.out.as_deref())
        }
        Command::Calibrate(a) => cmd_calibrate(a),
        Command::Bench(a) => {
            let config = a.config.load()?;
            let models = load_checkpoint(&a.checkpoint)?;
            let examples = prepare_examples(&load_dir(&a.data)?, models.config().id_bits)?;
            emit(&bench(&models, &examples, &config.distortion, a.seed)?, a.out.as_deref())
        }
        Command::ModelInfo(a) => {
            let model = match &a.checkpoint {
                Some(p) => load_checkpoint(p)?.config(),
                None => a.config.load()?.model,
            };
            emit(&model_summary(model)?, None)
        }
    }
}

fn cmd_payload(a: PayloadArgs) -> lidmark::Result<()> {
    let bits = IdBits::try_from(a.id_bits)?;
    let mut lines = Vec::new();
    if let Some(path) = &a.sidecar {
        for r in read_sidecar(path)? {
            let source = source_name(Path::new(&r.file));
            let id = derive_source_id(&source, bits);
            let payload = lidmark::payload::compose_payload(normalize_landmarks(&r.landmarks()?)?, id.clone());
            lines.push(json!({ "file": r.file, "source": source, "id_hex": id.to_hex(), "payload": payload.to_flat() }));
        }
    } else if !a.name.is_empty() {
        for name in &a.name {
            let id = derive_source_id(name, bits);
            lines.push(json!({ "source": name, "id_hex": id.to_hex(), "id_bits": id.bits() }));
        }
    } else {
        return Err(Error::InvalidParameter("payload needs --sidecar or --name".into()));
    }
    emit_lines(&lines, a.out.as_deref())
}

fn cmd_train(a: TrainArgs) -> lidmark::Result<()> {
    let mut config = a.config.load()?;
    if let Some(seed) = a.seed {
        config.seed = seed;
    }
    let stage = Stage::parse(&a.stage)?;
    let mut models = match &a.init {
        Some(p) => load_checkpoint(p)?,
        None if stage == Stage::Finetune => return Err(Error::InvalidParameter("finetune needs --init with a pretrained checkpoint".into())),
        None => ModelSet::new(config.model, config.seed)?,
    };
    if !(0.0..1.0).contains(&a.val_fraction) {
        return Err(Error::InvalidParameter(format!("--val-fraction {} must be in [0, 1)", a.val_fraction)));
    }
    let records = load_dir(&a.data)?;
    let (train_set, val_set, _) = split_dataset(&records, [1.0 - a.val_fraction, a.val_fraction, 0.0], config.seed)?;
    let bits = models.config().id_bits;
    let (train_set, val_set) = (prepare_examples(&train_set, bits)?, prepare_examples(&val_set, bits)?);
    let mut log = String::new();
    let mut sink = |e: &LogEntry| -> lidmark::Result<()> {
        log.push_str(&serde_json::to_string(&serde_json::to_value(e)?)?);
        log.push('\n');
        Ok(())
    };
    let validation = train(&mut models, &train_set, &val_set, &config.train_config(stage), &mut sink)?;
    save_models(&models, &a.out)?;
    if let Some(p) = &a.log {
        write_atomic(p, log.as_bytes())?;
    }
    emit(&json!({ "stage": stage, "train_images": train_set.len(), "validation": validation, "checkpoint": a.out }), None)
}

fn write_sidecar_file(path: &Path, records: &[SidecarRecord]) -> lidmark::Result<()> {
    let mut bytes = Vec::new();
    write_sidecar(&mut bytes, records)?;
    write_atomic(path, &bytes)
}

fn cmd_embed(a: EmbedArgs) -> lidmark::Result<()> {
    let models = load_checkpoint(&a.checkpoint)?;
    let records = load_dir(&a.data)?;
    let examples = prepare_examples(&records, models.config().id_bits)?;
    let watermarked = embed_examples(&models, &examples)?;
    std::fs::create_dir_all(&a.out)?;
    let mut registry = SourceRegistry::new();
    let mut collisions = Vec::new();
    let (mut psnr, mut ssim) = (0.0, 0.0);
    for ((r, e), w) in records.iter().zip(&examples).zip(&watermarked) {
        w.save_png(&a.out.join(format!("{}.png", r.source_name)))?;
        let q = image_quality(&e.image, w)?;
        psnr += q.psnr_db;
        ssim += q.ssim;
        if registry.insert(&e.id, r.source_name.clone()).is_err() {
            log::warn!("identifier {} of {} is already registered; keeping the first source", e.id.to_hex(), r.source_name);
            collisions.push(r.source_name.clone());
        }
    }
    let sidecar: Vec<SidecarRecord> =
        records.iter().map(|r| SidecarRecord::from_landmarks(format!("{}.png", r.source_name), &r.landmarks)).collect();
    write_sidecar_file(&a.out.join(SIDECAR_NAME), &sidecar)?;
    let registry_path = a.registry.unwrap_or_else(|| a.out.join("registry.jsonl"));
    let mut bytes = Vec::new();
    registry.write(&mut bytes)?;
    write_atomic(&registry_path, &bytes)?;
    let n = records.len() as f64;
    emit(
        &json!({ "images": records.len(), "psnr_db": psnr / n, "ssim": ssim / n, "registry": registry_path, "collisions": collisions }),
        None,
    )
}

fn cmd_attack(a: AttackArgs) -> lidmark::Result<()> {
    let kind = ManipulationKind::parse(&a.kind)?;
    let mut params = lidmark::distortion::DistortionParams::default();
    if let Some(v) = a.factor {
        params.resize_factor = v;
    }
    if let Some(v) = a.sigma {
        params.blur_sigma = v;
    }
    if let Some(v) = a.kernel {
        params.blur_kernel = v;
        params.median_kernel = v;
    }
    if let Some(v) = a.quality {
        params.jpeg_quality = v;
    }
    if let Some(v) = a.keep_luma {
        params.keep_luma = v;
    }
    if let Some(v) = a.keep_chroma {
        params.keep_chroma = v;
    }
    if let Some(v) = a.magnitude {
        params.swap_magnitude_px = v;
    }
    params.validate()?;
    let target = SwapTarget::parse(&a.target)?;
    let manipulation = params.manipulation(kind, target);
    manipulation.validate()?;
    let records = load_dir(&a.data)?;
    std::fs::create_dir_all(&a.out)?;
    let mut sidecar = Vec::new();
    let mut warps = Vec::new();
    for (i, r) in records.iter().enumerate() {
        let spec = ManipulationSpec::new(manipulation, a.seed.wrapping_add(i as u64));
        let file = format!("{}.png", r.source_name);
        let (image, landmarks, warp) = apply_with_record(&spec, &r.image, &r.landmarks)?;
        image.save_png(&a.out.join(&file))?;
        sidecar.push(SidecarRecord::from_landmarks(file.clone(), &landmarks));
        if let Some(w) = warp {
            warps.push(json!({ "file": file, "warp": w }));
        }
    }
    write_sidecar_file(&a.out.join(SIDECAR_NAME), &sidecar)?;
    if !warps.is_empty() {
        emit_lines(&warps, Some(&a.out.join("warps.jsonl")))?;
    }
    emit(&json!({ "images": records.len(), "manipulation": manipulation, "seed": a.seed }), None)
}

fn decode_one(models: &ModelSet<f32>, image: &Path) -> lidmark::Result<lidmark::model::DecodedPayload> {
    let img = ImageBuffer::load_png(image)?;
    let mut decoded = models.decoder.decode(&img.to_batch())?;
    Ok(decoded.remove(0))
}

/// Landmarks for `image` from `sidecar`, matched by file name.
fn extrinsic_for(image: &Path, sidecar: &Path) -> lidmark::Result<Option<lidmark::payload::LandmarkSet>> {
    let file = image.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let found = read_sidecar(sidecar)?.into_iter().find(|r| r.file == file);
    found.map(|r| r.landmarks()).transpose()
}

fn cmd_verify(a: VerifyArgs) -> lidmark::Result<()> {
    let config = a.config.load()?;
    let models = load_checkpoint(&a.checkpoint)?;
    let img = ImageBuffer::load_png(&a.image)?;
    let d = models.decoder.decode(&img.to_batch())?.remove(0);
    let sidecar = a.landmarks.clone().or_else(|| {
        let sibling = a.image.parent().unwrap_or(Path::new(".")).join(SIDECAR_NAME);
        sibling.exists().then_some(sibling)
    });
    let extrinsic = match &sidecar {
        Some(p) => extrinsic_for(&a.image, p)?,
        None => None,
    };
    let ext = extrinsic.as_ref().map(normalize_landmarks).transpose()?;
    let registry = match &a.registry {
        Some(p) => SourceRegistry::load(p)?,
        None => SourceRegistry::new(),
    };
    let truth = a.source.as_ref().map(|s| derive_source_id(s, models.config().id_bits));
    let (w, h) = (img.width() as u32, img.height() as u32);
    let report = forensic_report(
        &d.landmark_pred,
        &d.id_logits,
        ext.as_ref().map(|v| v.values()),
        w,
        h,
        a.tau.unwrap_or(config.forensics.tau_px),
        &registry,
        truth.as_ref(),
    )?;
    emit(&report, a.out.as_deref())
}

fn cmd_calibrate(a: CalibrateArgs) -> lidmark::Result<()> {
    let config = a.config.load()?;
    let models = load_checkpoint(&a.checkpoint)?;
    let examples = prepare_examples(&load_dir(&a.data)?, models.config().id_bits)?;
    let watermarked = embed_examples(&models, &examples)?;
    let n = examples.len();
    let mut real = Vec::new();
    let mut per_kind = BTreeMap::new();
    for kind in ManipulationKind::COMMON {
        let trials = run_trials(&models, &examples, &watermarked, &specs_for(kind, SwapTarget::Full, &config.distortion, n, a.seed))?;
        let aeds: Vec<f64> = trials.iter().map(|t| t.aed_consistency_px).collect();
        per_kind.insert(kind.name().to_string(), aeds.iter().sum::<f64>() / n as f64);
        real.extend(aeds);
    }
    let specs = specs_for(ManipulationKind::ProxySwap, SwapTarget::Full, &config.distortion, n, a.seed);
    let fake: Vec<f64> = run_trials(&models, &examples, &watermarked, &specs)?.iter().map(|t| t.aed_consistency_px).collect();
    per_kind.insert(ManipulationKind::ProxySwap.name().to_string(), fake.iter().sum::<f64>() / n as f64);
    let calibration = calibrate_threshold(&real, &fake)?;
    emit(&json!({ "calibration": calibration, "mean_aed_px": per_kind, "real": real.len(), "fake": fake.len() }), a.out.as_deref())
}
