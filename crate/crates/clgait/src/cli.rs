//! The `clgait` command line.
//!
//! Exit status is 0 on success, 1 on a usage error and 2 on a runtime error.
//! Configuration values resolve as flag > config file > default; the `CLGAIT_SEED`
//! environment variable supplies the seed when neither a flag nor the file does.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use clgait_core::eval::Direction;
use clgait_core::geometry::{back_project, CameraIntrinsics};
use clgait_core::synth::{Condition, DepthRender, SynthOptions};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Map, Value};

use crate::config::{Granularity, TrainConfig};
use crate::dataset::{pseudo_dataset, read_dataset, synth_dataset, write_dataset, PseudoInput, Split, SplitMode, SynthPlan};
use crate::error::{io_err, Error, Result};
use crate::formats::{depth_to_pgm, encode_pgm, encode_ply, pgm_to_depth, pgm_to_silhouette, read_pgm, read_ply, write_bytes};
use crate::report::{evaluate, summary_csv, write_reports};
use crate::train::{alignment, finetune, heldout_pairs, load_weights, loss_csv, pretrain_cspp, save_weights, write_checkpoint, TrainState};
use crate::verify::{check_combined, check_part_contrastive, GRADCHECK_TOL};

pub const SEED_ENV: &str = "CLGAIT_SEED";

#[derive(Debug, Parser)]
#[command(name = "clgait", version, about = "Camera-LiDAR cross-modality gait recognition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Synthesize a paired silhouette / point-cloud walker dataset.
    Synth(SynthArgs),
    /// Build pseudo point-cloud pairs from silhouettes and estimated depth maps.
    Pseudo(PseudoArgs),
    /// Contrastive silhouette-point pre-training of the stems and shared stack.
    Pretrain(PretrainArgs),
    /// Cross-modality fine-tuning with triplet and identity losses.
    Finetune(FinetuneArgs),
    /// Cross-view retrieval report on a dataset split.
    Eval(EvalArgs),
    /// Project a PLY point cloud into an interpolated 16-bit depth image.
    Project(ProjectArgs),
    /// Back-project a 16-bit depth image into a PLY point cloud.
    Backproject(BackprojectArgs),
    /// Finite-difference check of the network gradients under both losses.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
struct Jobs {
    /// Worker threads for synthesis and embedding extraction.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..))]
    jobs: u32,
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    /// JSON file with any of the keys ids, seqs_per_id, frames, seed, views, conditions, split_mode.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of identities.
    #[arg(long)]
    ids: Option<u32>,
    /// Sequences per identity, cycling through view x condition combinations.
    #[arg(long)]
    seqs_per_id: Option<u32>,
    /// Frames per sequence (at least 8).
    #[arg(long)]
    frames: Option<usize>,
    /// Master seed; `CLGAIT_SEED` applies when neither this flag nor the config file sets it.
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated view angles in degrees (multiples of 45).
    #[arg(long, value_delimiter = ',')]
    views: Option<Vec<u16>>,
    /// Comma-separated conditions: normal, bag, umbrella, night.
    #[arg(long, value_delimiter = ',')]
    conditions: Option<Vec<String>>,
    /// identity: disjoint identities per split; sequence: even repeats train, odd repeats test.
    #[arg(long, value_enum)]
    split_mode: Option<SplitMode>,
    #[command(flatten)]
    jobs: Jobs,
}

#[derive(Debug, Args)]
struct IntrinsicArgs {
    /// Focal length in pixels along x; --fx, --fy, --cx and --cy go together.
    #[arg(long, requires_all = ["fy", "cx", "cy"])]
    fx: Option<f64>,
    #[arg(long, requires_all = ["fx", "cx", "cy"])]
    fy: Option<f64>,
    #[arg(long, requires_all = ["fx", "fy", "cy"])]
    cx: Option<f64>,
    #[arg(long, requires_all = ["fx", "fy", "cx"])]
    cy: Option<f64>,
}

impl IntrinsicArgs {
    /// Explicit intrinsics when all four are given, `None` when none are.
    fn resolve(&self) -> std::result::Result<Option<CameraIntrinsics>, String> {
        match (self.fx, self.fy, self.cx, self.cy) {
            (Some(fx), Some(fy), Some(cx), Some(cy)) => CameraIntrinsics::new(fx, fy, cx, cy).map(Some).map_err(|e| e.to_string()),
            (None, None, None, None) => Ok(None),
            _ => Err("--fx, --fy, --cx and --cy must be given together".into()),
        }
    }
}

#[derive(Debug, Args)]
struct PseudoArgs {
    /// Directory of 8-bit silhouette PGMs.
    #[arg(long)]
    sil: PathBuf,
    /// Directory of 16-bit depth PGMs (millimeters) with the same file names.
    #[arg(long)]
    depth: PathBuf,
    /// Voxel edge for downsampling the pseudo point cloud, meters.
    #[arg(long, default_value_t = 0.02)]
    voxel: f64,
    /// Hole-filling radius in pixels.
    #[arg(long, default_value_t = 2)]
    radius: usize,
    /// Master seed; `CLGAIT_SEED` applies when neither this flag nor the config file sets it.
    #[arg(long)]
    seed: Option<u64>,
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    intrinsics: IntrinsicArgs,
    #[command(flatten)]
    jobs: Jobs,
}

#[derive(Debug, Args)]
struct TrainFlags {
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for weights, checkpoints and logs.
    #[arg(long)]
    out: PathBuf,
    /// JSON training configuration; unknown keys are rejected.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Continue from a checkpoint written by the same stage.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Master seed; `CLGAIT_SEED` applies when neither this flag nor the config file sets it.
    #[arg(long)]
    seed: Option<u64>,
    /// Iterations of this stage.
    #[arg(long)]
    iterations: Option<usize>,
    /// Adam learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Contrastive temperature.
    #[arg(long)]
    tau: Option<f64>,
    /// Horizontal parts; must divide the 8-row feature map.
    #[arg(long)]
    parts: Option<usize>,
    /// Embedding width per part.
    #[arg(long)]
    embed_dim: Option<usize>,
    /// Comma-separated channel widths of the stem and the two downsampling blocks.
    #[arg(long, value_delimiter = ',')]
    channels: Option<Vec<usize>>,
    /// Checkpoint interval in iterations; the final iteration is always saved.
    #[arg(long)]
    checkpoint_every: Option<usize>,
    #[command(flatten)]
    jobs: Jobs,
}

#[derive(Debug, Args)]
struct PretrainArgs {
    #[command(flatten)]
    train: TrainFlags,
    /// Frame pairs per batch.
    #[arg(long)]
    pairs: Option<usize>,
    #[arg(long, value_enum)]
    granularity: Option<Granularity>,
}

#[derive(Debug, Args)]
struct FinetuneArgs {
    #[command(flatten)]
    train: TrainFlags,
    /// Pre-trained weights; stems and shared stack are copied by name.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Weight of the identity cross-entropy term; 0 trains on the triplet term alone.
    #[arg(long)]
    gamma: Option<f64>,
    /// Triplet margin.
    #[arg(long)]
    margin: Option<f64>,
    /// Identities per batch.
    #[arg(long)]
    batch_p: Option<usize>,
    /// Sequences per identity in a batch.
    #[arg(long)]
    batch_k: Option<usize>,
    /// Frames drawn from each sampled sequence.
    #[arg(long)]
    frames_per_sample: Option<usize>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum DirectionArg {
    L2c,
    C2l,
    Both,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// CLGW weights from finetune.
    #[arg(long)]
    weights: PathBuf,
    #[arg(long, value_enum, default_value = "both")]
    direction: DirectionArg,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    /// Leave identical-view cells out of the averages.
    #[arg(long)]
    exclude_same_view: bool,
    /// Output directory for report.json, summary.csv and cmc.dat.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    jobs: Jobs,
}

#[derive(Debug, Args)]
struct ProjectArgs {
    /// Input ASCII PLY.
    #[arg(long)]
    ply: PathBuf,
    /// Output 16-bit PGM.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 320)]
    width: usize,
    #[arg(long, default_value_t = 240)]
    height: usize,
    #[arg(long, default_value_t = 2)]
    radius: usize,
    /// Also crop and rescale the result to this square size.
    #[arg(long)]
    normalize: Option<usize>,
    #[command(flatten)]
    intrinsics: IntrinsicArgs,
}

#[derive(Debug, Args)]
struct BackprojectArgs {
    /// Input 16-bit depth PGM, millimeters.
    #[arg(long)]
    depth: PathBuf,
    /// Optional silhouette PGM; only pixels above half intensity are kept.
    #[arg(long)]
    mask: Option<PathBuf>,
    /// Output ASCII PLY.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    intrinsics: IntrinsicArgs,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    /// Master seed; `CLGAIT_SEED` applies when neither this flag nor the config file sets it.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for run.json.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Parses `argv` (including the program name), runs the verb and returns the exit status.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let started = Instant::now();
    let args: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    match dispatch(cli.command, &args, started) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

struct Resolved {
    config: Value,
    seed: u64,
    sources: BTreeMap<String, &'static str>,
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v.trim().parse().map(Some).map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an integer"))),
        Err(_) => Ok(None),
    }
}

/// Layers defaults, the environment seed, the config file and the flags, recording
/// where each non-default value came from.
fn resolve<T: Serialize + DeserializeOwned + Default>(file: Option<&Path>, flags: Map<String, Value>) -> Result<(T, Resolved)> {
    let mut merged = match serde_json::to_value(T::default()) {
        Ok(Value::Object(m)) => m,
        _ => unreachable!("configurations serialize to objects"),
    };
    let mut sources = BTreeMap::new();
    if let Some(seed) = env_seed()? {
        merged.insert("seed".into(), json!(seed));
        sources.insert("seed".into(), "env");
    }
    if let Some(path) = file {
        let bytes = std::fs::read(path).map_err(io_err(path))?;
        let v: Value = serde_json::from_slice(&bytes).map_err(|source| Error::Json { path: path.to_path_buf(), source })?;
        let Value::Object(obj) = v else {
            return Err(Error::Config(format!("{} must hold a JSON object", path.display())));
        };
        if let Some(k) = obj.keys().find(|k| !merged.contains_key(*k)) {
            return Err(Error::Config(format!("{}: unknown key {k:?}", path.display())));
        }
        for (k, v) in obj {
            sources.insert(k.clone(), "file");
            merged.insert(k, v);
        }
    }
    for (k, v) in flags {
        sources.insert(k.clone(), "flag");
        merged.insert(k, v);
    }
    let config = Value::Object(merged);
    let typed: T = serde_json::from_value(config.clone()).map_err(|e| Error::Config(e.to_string()))?;
    let seed = config.get("seed").and_then(Value::as_u64).unwrap_or(0);
    for (k, s) in &sources {
        eprintln!("config {k} = {} ({s})", config[k]);
    }
    Ok((typed, Resolved { config, seed, sources }))
}

fn flag_map(pairs: Vec<(&str, Option<Value>)>) -> Map<String, Value> {
    pairs.into_iter().filter_map(|(k, v)| v.map(|v| (k.to_string(), v))).collect()
}

fn pool(jobs: &Jobs) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.jobs as usize)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {} worker threads: {e}", jobs.jobs)))
}

fn write_run_json(out: &Path, verb: &str, argv: &[String], r: &Resolved, started: Instant) -> Result<()> {
    let doc = json!({
        "verb": verb,
        "argv": argv,
        "config": r.config,
        "seed": r.seed,
        "sources": r.sources,
        "version": env!("CLGAIT_GIT_DESCRIBE"),
        "wall_time_s": started.elapsed().as_secs_f64(),
    });
    let bytes = serde_json::to_vec_pretty(&doc).map_err(|source| Error::Json { path: out.join("run.json"), source })?;
    write_bytes(&out.join("run.json"), &bytes)
}

fn dispatch(cmd: Command, argv: &[String], started: Instant) -> Result<i32> {
    match cmd {
        Command::Synth(a) => {
            let conditions = match &a.conditions {
                Some(cs) => Some(cs.iter().map(|c| Condition::parse(c).map(|c| json!(c))).collect::<clgait_core::Result<Vec<_>>>()?),
                None => None,
            };
            let flags = flag_map(vec![
                ("ids", a.ids.map(|v| json!(v))),
                ("seqs_per_id", a.seqs_per_id.map(|v| json!(v))),
                ("frames", a.frames.map(|v| json!(v))),
                ("seed", a.seed.map(|v| json!(v))),
                ("views", a.views.as_ref().map(|v| json!(v))),
                ("conditions", conditions.map(Value::Array)),
                ("split_mode", a.split_mode.map(|v| json!(v))),
            ]);
            let (plan, r): (SynthPlan, _) = resolve(a.config.as_deref(), flags)?;
            let ds = pool(&a.jobs)?.install(|| synth_dataset(&plan, &SynthOptions::default()))?;
            let manifest = pool(&a.jobs)?.install(|| write_dataset(&ds, &a.out))?;
            eprintln!(
                "wrote {} sequences of {} identities to {}",
                manifest.sequences.len(),
                manifest.identities.len(),
                a.out.display()
            );
            write_run_json(&a.out, "synth", argv, &r, started)?;
            Ok(0)
        }
        Command::Pseudo(a) => {
            let k = a.intrinsics.resolve().map_err(Error::Config)?;
            let seed = match a.seed {
                Some(s) => s,
                None => env_seed()?.unwrap_or(0),
            };
            let inputs = read_pseudo_inputs(&a.sil, &a.depth)?;
            let ds = pool(&a.jobs)?.install(|| pseudo_dataset(&inputs, k, a.voxel, a.radius, seed))?;
            pool(&a.jobs)?.install(|| write_dataset(&ds, &a.out))?;
            eprintln!("wrote {} pseudo pairs to {}", ds.sequences.len(), a.out.display());
            let r = Resolved {
                config: json!({"voxel": a.voxel, "radius": a.radius, "intrinsics": k, "sil": a.sil, "depth": a.depth}),
                seed,
                sources: BTreeMap::new(),
            };
            write_run_json(&a.out, "pseudo", argv, &r, started)?;
            Ok(0)
        }
        Command::Pretrain(a) => {
            let t = &a.train;
            let mut flags = train_flags(t, "iterations_pretrain");
            flags.extend(flag_map(vec![
                ("pretrain_pairs", a.pairs.map(|v| json!(v))),
                ("granularity", a.granularity.map(|v| json!(v))),
            ]));
            let (cfg, r): (TrainConfig, _) = resolve(t.config.as_deref(), flags)?;
            cfg.validate()?;
            let ds = pool(&t.jobs)?.install(|| read_dataset(&t.data))?;
            let resume = t.resume.as_deref().map(|p| TrainState::load(p, &cfg)).transpose()?;
            let out = t.out.clone();
            let state = pretrain_cspp(&ds, &cfg, resume, &mut |s| write_checkpoint(&out, s))?;
            let (held_seqs, held) = heldout_pairs(&ds, &cfg)?;
            let after = alignment(&state.weights, &cfg.net(0), &held_seqs, &held, cfg.granularity)?;
            save_weights(&t.out.join("weights.clgw"), &state.weights)?;
            write_bytes(&t.out.join("loss.csv"), loss_csv(&state.losses, Some(after)).as_bytes())?;
            let summary = json!({
                "iterations": state.iteration,
                "initial_loss": state.losses.first(),
                "final_loss": state.losses.last(),
                "alignment_before": state.alignment_before,
                "alignment_after": after,
            });
            write_bytes(&t.out.join("pretrain.json"), &serde_json::to_vec_pretty(&summary).expect("plain JSON"))?;
            match state.alignment_before {
                Some(before) => eprintln!("alignment {before:.4} -> {after:.4}"),
                None => eprintln!("alignment {after:.4}"),
            }
            write_run_json(&t.out, "pretrain", argv, &r, started)?;
            Ok(0)
        }
        Command::Finetune(a) => {
            let t = &a.train;
            let mut flags = train_flags(t, "iterations_finetune");
            flags.extend(flag_map(vec![
                ("gamma", a.gamma.map(|v| json!(v))),
                ("margin", a.margin.map(|v| json!(v))),
                ("batch_p", a.batch_p.map(|v| json!(v))),
                ("batch_k", a.batch_k.map(|v| json!(v))),
                ("frames_per_sample", a.frames_per_sample.map(|v| json!(v))),
            ]));
            let (cfg, r): (TrainConfig, _) = resolve(t.config.as_deref(), flags)?;
            cfg.validate()?;
            let ds = pool(&t.jobs)?.install(|| read_dataset(&t.data))?;
            let init = a.init.as_deref().map(load_weights).transpose()?;
            let resume = t.resume.as_deref().map(|p| TrainState::load(p, &cfg)).transpose()?;
            let out = t.out.clone();
            let state = finetune(&ds, init.as_ref(), &cfg, resume, &mut |s| write_checkpoint(&out, s))?;
            save_weights(&t.out.join("weights.clgw"), &state.weights)?;
            write_bytes(&t.out.join("loss.csv"), loss_csv(&state.losses, None).as_bytes())?;
            eprintln!("final loss {:?}", state.losses.last());
            write_run_json(&t.out, "finetune", argv, &r, started)?;
            Ok(0)
        }
        Command::Eval(a) => {
            let directions = match a.direction {
                DirectionArg::L2c => vec![Direction::LToC],
                DirectionArg::C2l => vec![Direction::CToL],
                DirectionArg::Both => Direction::BOTH.to_vec(),
            };
            let split = match a.split {
                SplitArg::Train => Split::Train,
                SplitArg::Val => Split::Val,
                SplitArg::Test => Split::Test,
            };
            let ds = pool(&a.jobs)?.install(|| read_dataset(&a.data))?;
            let weights = load_weights(&a.weights)?;
            let reports = pool(&a.jobs)?.install(|| evaluate(&ds, &weights, split, &directions, a.exclude_same_view))?;
            for w in reports.iter().flat_map(|r| &r.warnings) {
                eprintln!("warning: {w}");
            }
            write_reports(&a.out, &reports)?;
            print!("{}", summary_csv(&reports));
            let r = Resolved {
                config: json!({"split": split, "directions": directions, "exclude_same_view": a.exclude_same_view}),
                seed: 0,
                sources: BTreeMap::new(),
            };
            write_run_json(&a.out, "eval", argv, &r, started)?;
            Ok(0)
        }
        Command::Project(a) => {
            let default = DepthRender::default();
            let intrinsics = a.intrinsics.resolve().map_err(Error::Config)?.unwrap_or(default.intrinsics);
            let render = DepthRender { intrinsics, width: a.width, height: a.height, radius: a.radius };
            let cloud = read_ply(&a.ply)?;
            let mut depth = render.render(&cloud)?;
            if let Some(n) = a.normalize {
                depth = depth.normalize_crop(n)?;
            }
            write_bytes(&a.out, &encode_pgm(&depth_to_pgm(&depth)))?;
            eprintln!("projected {} points, {} pixels filled", cloud.len(), depth.filled());
            Ok(0)
        }
        Command::Backproject(a) => {
            let depth = pgm_to_depth(&read_pgm(&a.depth)?);
            let mask = a.mask.as_deref().map(|p| read_pgm(p).map(|m| pgm_to_silhouette(&m))).transpose()?;
            let k = a
                .intrinsics
                .resolve()
                .map_err(Error::Config)?
                .unwrap_or_else(|| CameraIntrinsics::virtual_default(depth.width, depth.height));
            let cloud = back_project(&depth, &k, mask.as_ref())?;
            write_bytes(&a.out, &encode_ply(&cloud))?;
            eprintln!("wrote {} points", cloud.len());
            Ok(0)
        }
        Command::Gradcheck(a) => {
            let seed = match a.seed {
                Some(s) => s,
                None => env_seed()?.unwrap_or(0),
            };
            let combined = check_combined(seed)?;
            let contrastive = check_part_contrastive(seed)?;
            let worst = combined.max_rel_error.max(contrastive.max_rel_error);
            println!(
                "combined loss: max relative error {:.3e} over {} coordinates ({} kinks skipped)",
                combined.max_rel_error, combined.checked, combined.skipped_kinks
            );
            println!(
                "part contrastive loss: max relative error {:.3e} over {} coordinates ({} kinks skipped)",
                contrastive.max_rel_error, contrastive.checked, contrastive.skipped_kinks
            );
            println!("max relative error {worst:.3e} (tolerance {GRADCHECK_TOL:e})");
            if let Some(out) = &a.out {
                let r = Resolved { config: json!({"max_rel_error": worst}), seed, sources: BTreeMap::new() };
                write_run_json(out, "gradcheck", argv, &r, started)?;
            }
            Ok(if worst < GRADCHECK_TOL { 0 } else { 2 })
        }
    }
}

fn train_flags(t: &TrainFlags, iterations_key: &'static str) -> Map<String, Value> {
    flag_map(vec![
        ("seed", t.seed.map(|v| json!(v))),
        (iterations_key, t.iterations.map(|v| json!(v))),
        ("lr", t.lr.map(|v| json!(v))),
        ("tau", t.tau.map(|v| json!(v))),
        ("parts", t.parts.map(|v| json!(v))),
        ("embed_dim", t.embed_dim.map(|v| json!(v))),
        ("channels", t.channels.as_ref().map(|v| json!(v))),
        ("checkpoint_every", t.checkpoint_every.map(|v| json!(v))),
    ])
}

fn read_pseudo_inputs(sil_dir: &Path, depth_dir: &Path) -> Result<Vec<PseudoInput>> {
    let mut names: Vec<String> = std::fs::read_dir(sil_dir)
        .map_err(io_err(sil_dir))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".pgm"))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Error::Dataset(format!("no .pgm files in {}", sil_dir.display())));
    }
    names
        .into_iter()
        .map(|name| {
            let silhouette = pgm_to_silhouette(&read_pgm(&sil_dir.join(&name))?);
            let depth = pgm_to_depth(&read_pgm(&depth_dir.join(&name))?);
            Ok(PseudoInput { name: name.trim_end_matches(".pgm").to_string(), silhouette, depth })
        })
        .collect()
}
