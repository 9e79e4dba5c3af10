//! Command-line front end. Every subcommand writes a JSON report (to
//! `--report` or stdout) wrapped with provenance; failures print one JSON
//! line on stderr and return a nonzero code.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use ndarray::Array3;
use serde::Serialize;
use serde_json::{json, Value};

use crate::checkpoint::{file_hash, load_generator, Checkpoint};
use crate::error::{Error, Result};
use crate::evalkit::{self, BenchRow, FeatureExtractor};
use crate::shapelab::{self, IouParams};
use crate::trainer::{self, TrainConfig};
use crate::triplets::{DatasetManifest, FrameOptions};
use crate::volio::{self, FramePolicy, VolumeStack};
use crate::zaugment::{self, InferenceOptions, Schedule};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

pub const KEY_MODEL_HASH: &str = "axsr.model_sha256";
pub const KEY_CONFIG_HASH: &str = "axsr.config_hash";
pub const KEY_VERSION: &str = "axsr.toolkit_version";

pub const DEVICES_ENV: &str = "AXSR_DEVICES";

#[derive(Debug, Parser)]
#[command(name = "axsr", version, about = "Axial super-resolution of volumetric image stacks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model from a config file and a dataset manifest.
    Train(TrainArgs),
    /// Insert slices into a stack with a trained model.
    Predict(PredictArgs),
    /// Score a predicted stack against ground truth.
    Eval(EvalArgs),
    /// Compare a model with cubic interpolation on a subsampled stack.
    Bench(BenchArgs),
    /// Spherical-harmonic roughness of every object in a label mask.
    Roughness(RoughnessArgs),
    /// Match labels of one mask to another by largest overlap.
    Match(PairArgs),
    /// IoU of two masks after dilation and smoothing.
    Iou(IouArgs),
    /// Count the triplets a dataset manifest would produce.
    #[command(name = "triplets-dryrun")]
    TripletsDryrun(DryrunArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PolicyArg {
    Tile,
    Resize,
}

impl From<PolicyArg> for FramePolicy {
    fn from(p: PolicyArg) -> Self {
        match p {
            PolicyArg::Tile => FramePolicy::Tile,
            PolicyArg::Resize => FramePolicy::Resize,
        }
    }
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Dataset manifest (TOML).
    #[arg(long)]
    input: PathBuf,
    /// Run directory for checkpoints and logs.
    #[arg(long)]
    output: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, env = DEVICES_ENV)]
    devices: Option<usize>,
    #[arg(long, value_enum, default_value = "resize")]
    policy: PolicyArg,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[command(group = clap::ArgGroup::new("schedule").required(true).args(["passes", "zs"]))]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Midpoint doublings.
    #[arg(long)]
    passes: Option<usize>,
    /// Relative positions inserted in every gap, e.g. 0.25,0.5,0.75.
    #[arg(long, value_delimiter = ',')]
    zs: Option<Vec<f64>>,
    #[arg(long, value_enum, default_value = "tile")]
    policy: PolicyArg,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Predicted stack.
    #[arg(long)]
    input: PathBuf,
    /// Ground-truth stack.
    #[arg(long)]
    reference: PathBuf,
    /// Generated slices between consecutive originals.
    #[arg(long, default_value_t = 1)]
    stride: usize,
    /// Also compute the Fréchet distance of generated vs true slices.
    #[arg(long)]
    fid: bool,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[arg(long)]
    model: PathBuf,
    /// Full-resolution ground-truth stack.
    #[arg(long)]
    input: PathBuf,
    /// Slices removed per gap before upsampling: 1, 3 or 7.
    #[arg(long, default_value_t = 1)]
    stride: usize,
    #[arg(long, value_enum, default_value = "tile")]
    policy: PolicyArg,
    /// Markdown table.
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct RoughnessArgs {
    /// Label mask.
    #[arg(long)]
    input: PathBuf,
    /// Voxel size dx,dy,dz; defaults to the mask metadata, then 1,1,1.
    #[arg(long, value_delimiter = ',', num_args = 3)]
    spacing: Option<Vec<f64>>,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PairArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    reference: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct IouArgs {
    #[command(flatten)]
    pair: PairArgs,
    #[arg(long, default_value_t = 2)]
    dilate: usize,
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
}

#[derive(Debug, Args)]
struct DryrunArgs {
    /// Dataset manifest (TOML).
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Default, Clone, Serialize)]
struct Provenance {
    toolkit_version: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    config_hash: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    model_sha256: Option<String>,
}

impl Provenance {
    fn new() -> Self {
        Provenance {
            toolkit_version: env!("CARGO_PKG_VERSION").to_string(),
            ..Default::default()
        }
    }

    fn from_stack(s: &VolumeStack) -> Self {
        Provenance {
            config_hash: s.meta.provenance.get(KEY_CONFIG_HASH).cloned(),
            model_sha256: s.meta.provenance.get(KEY_MODEL_HASH).cloned(),
            ..Provenance::new()
        }
    }
}

fn emit(command: &str, prov: &Provenance, result: impl Serialize, report: Option<&Path>) -> Result<()> {
    let doc = json!({ "command": command, "provenance": prov, "result": result });
    let text = serde_json::to_string_pretty(&doc)? + "\n";
    match report {
        Some(p) => std::fs::write(p, text).map_err(|e| Error::io(p, e)),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn load_model(path: &Path) -> Result<(Checkpoint, Provenance)> {
    let ck = load_generator(path, None)?;
    let prov = Provenance {
        config_hash: Some(ck.manifest.config_hash.clone()),
        model_sha256: Some(file_hash(path)?),
        ..Provenance::new()
    };
    Ok((ck, prov))
}

fn stamp(s: &mut VolumeStack, prov: &Provenance) {
    let p = &mut s.meta.provenance;
    p.insert(KEY_VERSION.into(), prov.toolkit_version.clone());
    if let Some(h) = &prov.config_hash {
        p.insert(KEY_CONFIG_HASH.into(), h.clone());
    }
    if let Some(h) = &prov.model_sha256 {
        p.insert(KEY_MODEL_HASH.into(), h.clone());
    }
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let mut cfg = TrainConfig::load(&a.config)?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(d) = a.devices {
        cfg.device_count = d;
    }
    cfg.validate()?;
    let manifest = DatasetManifest::load(&a.input)?;
    let data = manifest.build(FrameOptions {
        policy: a.policy.into(),
        model_size: cfg.generator.model_size,
    })?;
    let summary = trainer::train(&cfg, &data, Some(&a.output))?;
    if let Some(last) = summary.epochs.last().and_then(|e| e.checkpoint.as_ref()) {
        let dst = a.output.join("model.ckpt");
        std::fs::copy(last, &dst).map_err(|e| Error::io(&dst, e))?;
    }
    let prov = Provenance {
        config_hash: Some(summary.config_hash.clone()),
        ..Provenance::new()
    };
    emit("train", &prov, &summary, a.report.as_deref())
}

fn cmd_predict(a: &PredictArgs) -> Result<()> {
    let (ck, prov) = load_model(&a.model)?;
    let input = volio::load_stack(&a.input)?;
    let schedule = match (&a.passes, &a.zs) {
        (Some(k), None) => Schedule::Passes(*k),
        (None, Some(zs)) => Schedule::Positions(zs.clone()),
        _ => return Err(Error::invalid("give exactly one of --passes and --zs")),
    };
    let opts = InferenceOptions {
        policy: a.policy.into(),
        ..Default::default()
    };
    let t = Instant::now();
    let mut out = zaugment::augment_volume(&ck.generator, &input, &schedule, &opts)?;
    let seconds = t.elapsed().as_secs_f64();
    stamp(&mut out, &prov);
    volio::save_stack(&out, &a.output)?;
    let result = json!({
        "input_depth": input.depth(),
        "output_depth": out.depth(),
        "schedule": schedule,
        "output": a.output,
        "predict_seconds": seconds,
    });
    emit("predict", &prov, result, a.report.as_deref())
}

fn generated_frames(s: &Array3<f64>, stride: usize) -> Vec<ndarray::Array2<f64>> {
    let period = stride + 1;
    (0..s.dim().0)
        .filter(|i| i % period != 0 && (i / period + 1) * period < s.dim().0)
        .map(|i| s.index_axis(ndarray::Axis(0), i).mapv(|v| v / 255.0))
        .collect()
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let pred = volio::load_stack(&a.input)?;
    let gt = volio::load_stack(&a.reference)?;
    let mut report = evalkit::interstack_report(&pred, &gt, a.stride)?;
    report.dataset = a.reference.display().to_string();
    report.model = pred
        .meta
        .provenance
        .get(KEY_MODEL_HASH)
        .cloned()
        .unwrap_or_else(|| a.input.display().to_string());
    if a.fid {
        let fp = generated_frames(&evalkit::stack_8bit(&pred), a.stride);
        let fg = generated_frames(&evalkit::stack_8bit(&gt), a.stride);
        let ext = FeatureExtractor::new();
        report.fid = Some(ext.fid(&fp.iter().collect::<Vec<_>>(), &fg.iter().collect::<Vec<_>>())?);
    }
    emit("eval", &Provenance::from_stack(&pred), &report, a.report.as_deref())
}

fn cmd_bench(a: &BenchArgs) -> Result<()> {
    let factor = a.stride + 1;
    if ![2, 4, 8].contains(&factor) {
        return Err(Error::invalid(format!("stride {} not in {{1, 3, 7}}", a.stride)));
    }
    let passes = factor.trailing_zeros() as usize;
    let (ck, prov) = load_model(&a.model)?;
    let gt = volio::load_stack(&a.input)?;
    let low = crate::synth::subsample_z(&gt, factor)?;
    if low.depth() < 2 {
        return Err(Error::invalid(format!("{} slices leave fewer than 2 after subsampling", gt.depth())));
    }
    let depth = (low.depth() - 1) * factor + 1;
    let gt_vox = gt.voxels().slice(ndarray::s![..depth, .., ..]).to_owned();
    let gt = VolumeStack::new(gt_vox, gt.bit_depth())?;

    let t = Instant::now();
    let cubic = evalkit::bicubic_z(&low, factor)?.stack;
    let cubic_s = t.elapsed().as_secs_f64();
    let opts = InferenceOptions {
        policy: a.policy.into(),
        ..Default::default()
    };
    let t = Instant::now();
    let model_out = zaugment::augment_volume(&ck.generator, &low, &Schedule::Passes(passes), &opts)?;
    let model_s = t.elapsed().as_secs_f64();

    let name = format!("axsr ({:?})", ck.generator.mode()).to_lowercase();
    let rows = vec![
        BenchRow {
            method: "bicubic".into(),
            metrics: evalkit::interstack_report(&cubic, &gt, a.stride)?.metrics,
            train_seconds: None,
            predict_seconds: cubic_s,
        },
        BenchRow {
            method: name,
            metrics: evalkit::interstack_report(&model_out, &gt, a.stride)?.metrics,
            train_seconds: None,
            predict_seconds: model_s,
        },
    ];
    let table = evalkit::render_table(&rows);
    if let Some(p) = &a.output {
        std::fs::write(p, &table).map_err(|e| Error::io(p, e))?;
    }
    let result = json!({ "stride": a.stride, "slices": depth, "rows": rows, "table": table });
    emit("bench", &prov, result, a.report.as_deref())
}

fn cmd_roughness(a: &RoughnessArgs) -> Result<()> {
    let (mask, meta) = volio::load_labels(&a.input)?;
    let spacing = match &a.spacing {
        Some(v) => [v[0], v[1], v[2]],
        None => meta.spacing.unwrap_or([1.0; 3]),
    };
    if spacing.iter().any(|&d| !(d > 0.0 && d.is_finite())) {
        return Err(Error::invalid(format!("spacing {spacing:?} must be positive")));
    }
    let table = shapelab::roughness_table(&mask, spacing);
    let result = json!({ "spacing": spacing, "table": table });
    emit("roughness", &Provenance::new(), result, a.report.as_deref())
}

fn cmd_match(a: &PairArgs) -> Result<()> {
    let (ma, _) = volio::load_labels(&a.input)?;
    let (mb, _) = volio::load_labels(&a.reference)?;
    let rows = shapelab::match_labels(&ma, &mb)?;
    emit("match", &Provenance::new(), &rows, a.report.as_deref())
}

fn cmd_iou(a: &IouArgs) -> Result<()> {
    let (ma, _) = volio::load_labels(&a.pair.input)?;
    let (mb, _) = volio::load_labels(&a.pair.reference)?;
    let params = IouParams {
        dilate_r: a.dilate,
        sigma: a.sigma,
        threshold: a.threshold,
    };
    let r = shapelab::smoothed_iou(&ma.mapv(|v| v != 0), &mb.mapv(|v| v != 0), &params)?;
    let result = json!({ "params": params, "iou": r.iou, "both_empty": r.both_empty });
    emit("iou", &Provenance::new(), result, a.pair.report.as_deref())
}

fn cmd_dryrun(a: &DryrunArgs) -> Result<()> {
    let manifest = DatasetManifest::load(&a.input)?;
    let counts = manifest.dry_run()?;
    let total: usize = counts.iter().map(|c| c.1).sum();
    let stacks: Vec<Value> = counts.iter().map(|(p, n)| json!({ "path": p, "triplets": n })).collect();
    let result = json!({ "window": manifest.window, "stacks": stacks, "total": total });
    emit("triplets-dryrun", &Provenance::new(), result, a.report.as_deref())
}

fn dispatch(cmd: &Command) -> Result<()> {
    match cmd {
        Command::Train(a) => cmd_train(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Roughness(a) => cmd_roughness(a),
        Command::Match(a) => cmd_match(a),
        Command::Iou(a) => cmd_iou(a),
        Command::TripletsDryrun(a) => cmd_dryrun(a),
    }
}

fn name(cmd: &Command) -> &'static str {
    match cmd {
        Command::Train(_) => "train",
        Command::Predict(_) => "predict",
        Command::Eval(_) => "eval",
        Command::Bench(_) => "bench",
        Command::Roughness(_) => "roughness",
        Command::Match(_) => "match",
        Command::Iou(_) => "iou",
        Command::TripletsDryrun(_) => "triplets-dryrun",
    }
}

/// The single-line error record written to stderr.
pub fn error_line(kind: &str, message: &str) -> String {
    json!({ "error": { "kind": kind, "message": message } }).to_string()
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return EXIT_OK;
            }
            let rendered = e.to_string();
            let msg = rendered.lines().next().unwrap_or_default().trim_start_matches("error: ");
            eprintln!("{}", error_line("usage", msg));
            let _ = e.print();
            return EXIT_USAGE;
        }
    };
    match dispatch(&cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("{}", error_line(e.kind(), &e.to_string()));
            if matches!(e, Error::Io { .. } | Error::ModeMismatch(_) | Error::InvalidArgument(_)) {
                let mut c = Cli::command();
                if let Some(sub) = c.find_subcommand_mut(name(&cli.command)) {
                    eprintln!("{}", sub.render_usage());
                }
            }
            EXIT_FAILURE
        }
    }
}
