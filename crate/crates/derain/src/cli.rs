//! Command-line interface: synth, derain, train, eval, ablate-stages.
//!
//! Flag precedence is defaults < config file < flags. The config file is
//! plain `key = value` lines (keys match the long flag names, `#` starts a
//! comment); unknown keys are rejected. Every run echoes its resolved
//! configuration to stderr.
//!
//! Exit codes: 0 success, 2 usage error, 3 data error, 4 numerical failure
//! (a NaN anywhere in a pipeline aborts with the offending stage named).

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Parser, Subcommand};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::metrics::{self, MetricsRow, PSNR_CAP_DB};
use crate::model::Image;
use crate::prox::ProxKind;
use crate::solver::{self, SolverConfig, StageParams};
use crate::synth::SynthConfig;
use crate::train::{self, stage_loss_weights, LearnableSet, TrainConfig};
use crate::{dataset, imgio, tensor};

#[derive(Parser)]
#[command(
    name = "derain",
    version,
    about = "Convolutional-dictionary single-image deraining toolkit"
)]
struct Cli {
    /// Config file with `key = value` lines overriding defaults.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic rainy/clean dataset with ground-truth latents.
    Synth(SynthArgs),
    /// Remove rain from one image or a directory of images.
    Derain(DerainArgs),
    /// Train the unfolded network on a dataset directory.
    Train(TrainArgs),
    /// Compute Y-channel PSNR/SSIM between two directories.
    Eval(EvalArgs),
    /// Train and evaluate models across a list of stage counts.
    AblateStages(AblateArgs),
}

#[derive(clap::Args)]
struct SynthArgs {
    /// Output dataset directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Number of pairs to generate.
    #[arg(long)]
    count: Option<usize>,
    /// Image size as HxW, e.g. 64x64.
    #[arg(long, value_name = "HxW")]
    size: Option<String>,
    /// Number of rain kernels.
    #[arg(long)]
    kernels: Option<usize>,
    /// Expected activations per 1000 pixels, per map.
    #[arg(long)]
    density: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(clap::Args)]
struct DerainArgs {
    /// A PNG file or a directory of PNGs.
    #[arg(long, value_name = "PNG|DIR")]
    input: Option<PathBuf>,
    /// Kernel bank file (.rcdt), required in analytic mode.
    #[arg(long, value_name = "FILE")]
    kernels: Option<PathBuf>,
    /// analytic | checkpoint
    #[arg(long)]
    mode: Option<String>,
    /// Trained checkpoint, required in checkpoint mode.
    #[arg(long, value_name = "FILE")]
    checkpoint: Option<PathBuf>,
    /// Stage count (analytic default 17; checkpoint mode may truncate).
    #[arg(long)]
    stages: Option<usize>,
    /// Directory for per-stage trace panels and objective CSV.
    #[arg(long, value_name = "DIR")]
    trace: Option<PathBuf>,
    /// Output directory for derained images.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(clap::Args)]
struct TrainArgs {
    /// Dataset directory (rain/ + norain/).
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,
    /// Output checkpoint path.
    #[arg(long, value_name = "CKPT")]
    out: Option<PathBuf>,
    #[arg(long)]
    stages: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    kernels: Option<usize>,
    #[arg(long)]
    kernel_size: Option<usize>,
    #[arg(long)]
    prox_blocks: Option<usize>,
    #[arg(long)]
    prox_hidden: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    patch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lr_decay_factor: Option<f64>,
    #[arg(long)]
    lr_decay_every: Option<usize>,
    /// Resume from an existing checkpoint.
    #[arg(long, value_name = "CKPT")]
    resume: Option<PathBuf>,
    /// Per-epoch loss CSV (default: <out>.loss.csv).
    #[arg(long, value_name = "CSV")]
    loss_log: Option<PathBuf>,
}

#[derive(clap::Args)]
struct EvalArgs {
    #[arg(long, value_name = "DIR")]
    pred: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    truth: Option<PathBuf>,
    /// Metrics CSV output path.
    #[arg(long, value_name = "CSV")]
    out: Option<PathBuf>,
}

#[derive(clap::Args)]
struct AblateArgs {
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,
    /// Comma-separated stage counts, e.g. 0,2,5,8.
    #[arg(long, value_name = "LIST")]
    stages_list: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    kernels: Option<usize>,
    #[arg(long)]
    kernel_size: Option<usize>,
    #[arg(long)]
    prox_blocks: Option<usize>,
    #[arg(long)]
    prox_hidden: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    patch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Fraction of pairs held out for evaluation.
    #[arg(long)]
    holdout_frac: Option<f64>,
    /// Exit nonzero if mean PSNR drops by more than 0.2 dB between
    /// consecutive stage counts.
    #[arg(long)]
    assert_monotone: bool,
    /// Optional CSV for the ablation table.
    #[arg(long, value_name = "CSV")]
    out: Option<PathBuf>,
}

/// Entry point for the thin binary. Returns the process exit code.
pub fn main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap exits 0 for --help/--version, 2 for usage errors
            e.exit();
        }
    };
    let file_cfg = match FileConfig::load(cli.config.as_deref()) {
        Ok(cfg) => cfg,
        Err(e) => return fail(&e),
    };
    let result = match cli.cmd {
        Cmd::Synth(args) => cmd_synth(args, &file_cfg),
        Cmd::Derain(args) => cmd_derain(args, &file_cfg),
        Cmd::Train(args) => cmd_train(args, &file_cfg),
        Cmd::Eval(args) => cmd_eval(args, &file_cfg),
        Cmd::AblateStages(args) => cmd_ablate_stages(args, &file_cfg),
    };
    match result {
        Ok(code) => code,
        Err(e) => fail(&e),
    }
}

fn fail(e: &Error) -> i32 {
    eprintln!("error: {e}");
    exit_code(e)
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::ShapeMismatch(_) => 2,
        Error::NonFinite { .. } => 4,
        _ => 3,
    }
}

// ---------------------------------------------------------------------------
// config file + resolution
// ---------------------------------------------------------------------------

struct FileConfig {
    map: BTreeMap<String, String>,
    used: std::cell::RefCell<BTreeSet<String>>,
}

impl FileConfig {
    fn load(path: Option<&Path>) -> Result<FileConfig> {
        let mut map = BTreeMap::new();
        if let Some(path) = path {
            let text = std::fs::read_to_string(path)?;
            for (lineno, raw) in text.lines().enumerate() {
                let line = raw.split('#').next().unwrap_or("").trim();
                if line.is_empty() {
                    continue;
                }
                let (key, value) = line.split_once('=').ok_or_else(|| {
                    Error::Config(format!(
                        "config line {} is not `key = value`: {raw}",
                        lineno + 1
                    ))
                })?;
                map.insert(key.trim().to_string(), value.trim().to_string());
            }
        }
        Ok(FileConfig { map, used: std::cell::RefCell::new(BTreeSet::new()) })
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.map.get(key) {
            None => Ok(None),
            Some(raw) => {
                self.used.borrow_mut().insert(key.to_string());
                raw.parse::<T>().map(Some).map_err(|_| {
                    Error::Config(format!("config key `{key}` has unparsable value `{raw}`"))
                })
            }
        }
    }

    fn reject_unknown(&self) -> Result<()> {
        let used = self.used.borrow();
        let unknown: Vec<&String> =
            self.map.keys().filter(|k| !used.contains(k.as_str())).collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "unknown config keys for this subcommand: {}",
                unknown.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", ")
            )))
        }
    }
}

fn resolve<T: FromStr + Clone>(
    flag: Option<T>,
    file: &FileConfig,
    key: &str,
    default: Option<T>,
) -> Result<T> {
    if let Some(v) = flag {
        // still mark the key used so reject_unknown tolerates it in the file
        let _ = file.get::<String>(key)?;
        return Ok(v);
    }
    if let Some(v) = file.get::<T>(key)? {
        return Ok(v);
    }
    default.ok_or_else(|| Error::Config(format!("missing required option --{key}")))
}

fn echo_config(cmd: &str, entries: &[(&str, String)]) {
    eprintln!("[{cmd}] resolved configuration:");
    for (key, value) in entries {
        eprintln!("  {key} = {value}");
    }
}

fn parse_size(size: &str) -> Result<(usize, usize)> {
    let (h, w) = size
        .split_once(['x', 'X'])
        .ok_or_else(|| Error::Config(format!("size must be HxW, got `{size}`")))?;
    let h: usize = h.trim().parse().map_err(|_| Error::Config(format!("bad height in `{size}`")))?;
    let w: usize = w.trim().parse().map_err(|_| Error::Config(format!("bad width in `{size}`")))?;
    if h == 0 || w == 0 {
        return Err(Error::Config(format!("size must be positive, got `{size}`")));
    }
    Ok((h, w))
}

fn check_finite_image(img: &Image, stage: &str) -> Result<()> {
    if img.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { stage: stage.to_string() })
    }
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

fn cmd_synth(args: SynthArgs, file: &FileConfig) -> Result<i32> {
    let out = resolve(args.out, file, "out", None::<PathBuf>)?;
    let count = resolve(args.count, file, "count", Some(20))?;
    let size = resolve(args.size, file, "size", Some("64x64".to_string()))?;
    let kernels = resolve(args.kernels, file, "kernels", Some(4))?;
    let density = resolve(args.density, file, "density", Some(2.0))?;
    let seed = resolve(args.seed, file, "seed", Some(0u64))?;
    file.reject_unknown()?;
    let (h, w) = parse_size(&size)?;
    echo_config(
        "derain synth",
        &[
            ("out", out.display().to_string()),
            ("count", count.to_string()),
            ("size", format!("{h}x{w}")),
            ("kernels", kernels.to_string()),
            ("density", density.to_string()),
            ("seed", seed.to_string()),
        ],
    );

    let cfg = SynthConfig { num_kernels: kernels, density, ..SynthConfig::default() };
    let (bank, pairs) = crate::synth::generate_dataset(&cfg, count, h, w, seed)?;
    dataset::write_dataset(&out, &bank.to_tensor(), &pairs)?;
    println!(
        "wrote {count} pairs of {h}x{w} with {kernels} kernels to {} (bank: C_true.rcdt)",
        out.display()
    );
    Ok(0)
}

// ---------------------------------------------------------------------------
// derain
// ---------------------------------------------------------------------------

fn list_input_pngs(input: &Path) -> Result<Vec<PathBuf>> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    if !input.is_dir() {
        return Err(Error::Data(format!("input {} does not exist", input.display())));
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(input)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().map_or(false, |e| e == "png"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Data(format!("no PNG files under {}", input.display())));
    }
    Ok(files)
}

enum DerainModel {
    Analytic { bank: crate::model::KernelBank, stages: usize },
    Trained { params: Box<LearnableSet>, stages: usize },
}

fn cmd_derain(args: DerainArgs, file: &FileConfig) -> Result<i32> {
    let input = resolve(args.input, file, "input", None::<PathBuf>)?;
    let out = resolve(args.out, file, "out", None::<PathBuf>)?;
    let mode = resolve(args.mode, file, "mode", Some("analytic".to_string()))?;
    let stages_flag = match args.stages {
        Some(s) => Some(s),
        None => file.get::<usize>("stages")?,
    };
    let kernels = match args.kernels {
        Some(p) => Some(p),
        None => file.get::<PathBuf>("kernels")?,
    };
    let checkpoint = match args.checkpoint {
        Some(p) => Some(p),
        None => file.get::<PathBuf>("checkpoint")?,
    };
    let trace_dir = match args.trace {
        Some(p) => Some(p),
        None => file.get::<PathBuf>("trace")?,
    };
    file.reject_unknown()?;

    let model = match mode.as_str() {
        "analytic" => {
            let bank_path = kernels.ok_or_else(|| {
                Error::Config("analytic mode requires --kernels FILE".into())
            })?;
            let bank = crate::model::KernelBank::from_tensor(&tensor::load_rcdt(&bank_path)?)?;
            DerainModel::Analytic { bank, stages: stages_flag.unwrap_or(solver::DEFAULT_STAGES) }
        }
        "checkpoint" => {
            let ckpt_path = checkpoint.ok_or_else(|| {
                Error::Config("checkpoint mode requires --checkpoint FILE".into())
            })?;
            let params = train::load_checkpoint(&ckpt_path)?;
            let trained_stages = params.num_stages();
            let stages = stages_flag.unwrap_or(trained_stages);
            if stages > trained_stages {
                return Err(Error::Config(format!(
                    "checkpoint has {trained_stages} stages, cannot run {stages}"
                )));
            }
            DerainModel::Trained { params: Box::new(params), stages }
        }
        other => {
            return Err(Error::Config(format!(
                "mode must be `analytic` or `checkpoint`, got `{other}`"
            )))
        }
    };

    echo_config(
        "derain derain",
        &[
            ("input", input.display().to_string()),
            ("out", out.display().to_string()),
            ("mode", mode.clone()),
            (
                "stages",
                match &model {
                    DerainModel::Analytic { stages, .. } => stages.to_string(),
                    DerainModel::Trained { stages, .. } => stages.to_string(),
                },
            ),
            ("trace", trace_dir.as_ref().map_or("-".into(), |p| p.display().to_string())),
        ],
    );

    let files = list_input_pngs(&input)?;
    std::fs::create_dir_all(&out)?;

    let results: Vec<Result<String>> = files
        .par_iter()
        .map(|path| {
            let stem = path
                .file_stem()
                .and_then(|s| s.to_str())
                .ok_or_else(|| Error::Data(format!("unusable file name: {}", path.display())))?
                .to_string();
            let o = imgio::load_png(path)?;
            let (h, w) = o.shape();
            let record_trace = trace_dir.is_some();

            let output = match &model {
                DerainModel::Analytic { bank, stages } => {
                    let mut cfg = SolverConfig::analytic(bank, h, w)?;
                    cfg.stages = *stages;
                    cfg.record_trace = record_trace;
                    solver::run(&o, bank, &cfg, None)?
                }
                DerainModel::Trained { params, stages } => {
                    let mut cfg = params.solver_config(record_trace);
                    cfg.stages = *stages;
                    let stage_params: Vec<StageParams> =
                        params.stage_params().into_iter().take(*stages).collect();
                    solver::run(&o, &params.bank, &cfg, Some(&stage_params))?
                }
            };
            check_finite_image(&output.background, &format!("derain output for {stem}"))?;
            check_finite_image(&output.rain, &format!("rain estimate for {stem}"))?;

            imgio::save_png(&out.join(format!("{stem}.png")), &output.background)?;
            imgio::save_png(&out.join(format!("{stem}.rain.png")), &output.rain)?;
            if let Some(tdir) = &trace_dir {
                solver::export_trace(&tdir.join(&stem), &output.trace)?;
            }
            Ok(stem)
        })
        .collect();

    let mut done = 0;
    for r in results {
        r?;
        done += 1;
    }
    println!("derained {done} image(s) into {}", out.display());
    Ok(0)
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

fn train_config_from(
    file: &FileConfig,
    stages: Option<usize>,
    epochs: Option<usize>,
    seed: Option<u64>,
    kernels: Option<usize>,
    kernel_size: Option<usize>,
    prox_blocks: Option<usize>,
    prox_hidden: Option<usize>,
    batch_size: Option<usize>,
    patch_size: Option<usize>,
    lr: Option<f64>,
    lr_decay_factor: Option<f64>,
    lr_decay_every: Option<usize>,
) -> Result<TrainConfig> {
    let desk = TrainConfig::desk();
    let stages = resolve(stages, file, "stages", Some(desk.stages))?;
    let (lambda, gamma) = stage_loss_weights(stages);
    Ok(TrainConfig {
        stages,
        num_kernels: resolve(kernels, file, "kernels", Some(desk.num_kernels))?,
        kernel_size: resolve(kernel_size, file, "kernel-size", Some(desk.kernel_size))?,
        prox_blocks: resolve(prox_blocks, file, "prox-blocks", Some(desk.prox_blocks))?,
        prox_hidden: resolve(prox_hidden, file, "prox-hidden", Some(desk.prox_hidden))?,
        lambda,
        gamma,
        learning_rate: resolve(lr, file, "lr", Some(desk.learning_rate))?,
        lr_decay_factor: resolve(lr_decay_factor, file, "lr-decay-factor", Some(desk.lr_decay_factor))?,
        lr_decay_every: resolve(lr_decay_every, file, "lr-decay-every", Some(desk.lr_decay_every))?,
        epochs: resolve(epochs, file, "epochs", Some(desk.epochs))?,
        batch_size: resolve(batch_size, file, "batch-size", Some(desk.batch_size))?,
        patch_size: resolve(patch_size, file, "patch-size", Some(desk.patch_size))?,
        seed: resolve(seed, file, "seed", Some(desk.seed))?,
    })
}

fn cmd_train(args: TrainArgs, file: &FileConfig) -> Result<i32> {
    let data = resolve(args.data, file, "data", None::<PathBuf>)?;
    let out = resolve(args.out, file, "out", None::<PathBuf>)?;
    let cfg = train_config_from(
        file,
        args.stages,
        args.epochs,
        args.seed,
        args.kernels,
        args.kernel_size,
        args.prox_blocks,
        args.prox_hidden,
        args.batch_size,
        args.patch_size,
        args.lr,
        args.lr_decay_factor,
        args.lr_decay_every,
    )?;
    let resume = match args.resume {
        Some(p) => Some(p),
        None => file.get::<PathBuf>("resume")?,
    };
    let loss_log = match args.loss_log {
        Some(p) => Some(p),
        None => file.get::<PathBuf>("loss-log")?,
    };
    file.reject_unknown()?;
    cfg.validate()?;

    echo_config(
        "derain train",
        &[
            ("data", data.display().to_string()),
            ("out", out.display().to_string()),
            ("stages", cfg.stages.to_string()),
            ("epochs", cfg.epochs.to_string()),
            ("kernels", cfg.num_kernels.to_string()),
            ("kernel-size", cfg.kernel_size.to_string()),
            ("prox-blocks", cfg.prox_blocks.to_string()),
            ("prox-hidden", cfg.prox_hidden.to_string()),
            ("batch-size", cfg.batch_size.to_string()),
            ("patch-size", cfg.patch_size.to_string()),
            ("lr", cfg.learning_rate.to_string()),
            ("lr-decay-factor", cfg.lr_decay_factor.to_string()),
            ("lr-decay-every", cfg.lr_decay_every.to_string()),
            ("seed", cfg.seed.to_string()),
            ("resume", resume.as_ref().map_or("-".into(), |p| p.display().to_string())),
        ],
    );

    let pairs = dataset::load_pairs(&data)?;
    let report = match resume {
        Some(ckpt) => train::train_from(train::load_checkpoint(&ckpt)?, &pairs, &cfg)?,
        None => train::train(&pairs, &cfg)?,
    };
    train::save_checkpoint(&out, &report.params)?;
    let log_path = loss_log.unwrap_or_else(|| {
        let mut p = out.as_os_str().to_owned();
        p.push(".loss.csv");
        PathBuf::from(p)
    });
    train::write_loss_csv(&log_path, &report.epoch_losses)?;
    if let (Some(first), Some(last)) = (report.epoch_losses.first(), report.epoch_losses.last()) {
        println!(
            "trained {} epochs: loss {first:.6} -> {last:.6}; checkpoint at {}",
            report.epoch_losses.len(),
            out.display()
        );
    } else {
        println!("trained 0 epochs: checkpoint holds the initialization ({})", out.display());
    }
    Ok(0)
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

fn scan_ids(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::Data(format!("{} is not a directory", dir.display())));
    }
    let mut map = BTreeMap::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        let is_png = path.extension().map_or(false, |e| e == "png");
        let is_rain_layer = path
            .file_name()
            .and_then(|s| s.to_str())
            .map_or(false, |s| s.ends_with(".rain.png"));
        if is_png && !is_rain_layer {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                map.insert(stem.to_string(), path.clone());
            }
        }
    }
    Ok(map)
}

fn cmd_eval(args: EvalArgs, file: &FileConfig) -> Result<i32> {
    let pred = resolve(args.pred, file, "pred", None::<PathBuf>)?;
    let truth = resolve(args.truth, file, "truth", None::<PathBuf>)?;
    let out = resolve(args.out, file, "out", None::<PathBuf>)?;
    file.reject_unknown()?;
    echo_config(
        "derain eval",
        &[
            ("pred", pred.display().to_string()),
            ("truth", truth.display().to_string()),
            ("out", out.display().to_string()),
        ],
    );

    let pred_ids = scan_ids(&pred)?;
    let truth_ids = scan_ids(&truth)?;
    let mut matched: Vec<(String, PathBuf, PathBuf)> = Vec::new();
    for (id, ppath) in &pred_ids {
        match truth_ids.get(id) {
            Some(tpath) => matched.push((id.clone(), ppath.clone(), tpath.clone())),
            None => eprintln!("skipping `{id}`: present in pred, missing in truth"),
        }
    }
    for id in truth_ids.keys() {
        if !pred_ids.contains_key(id) {
            eprintln!("skipping `{id}`: present in truth, missing in pred");
        }
    }
    if matched.is_empty() {
        return Err(Error::Data("no ids matched between pred and truth".into()));
    }

    let mut rows: Vec<MetricsRow> = matched
        .par_iter()
        .map(|(id, ppath, tpath)| {
            let est = imgio::load_png(ppath)?;
            let reference = imgio::load_png(tpath)?;
            let psnr = metrics::psnr_images(&reference, &est)?;
            let ssim = metrics::ssim_images(&reference, &est)?;
            if !psnr.is_finite() && psnr.is_nan() || ssim.is_nan() {
                return Err(Error::NonFinite { stage: format!("metrics for {id}") });
            }
            Ok(MetricsRow { id: id.clone(), psnr_db: psnr, ssim })
        })
        .collect::<Result<Vec<_>>>()?;
    rows.sort_by(|a, b| a.id.cmp(&b.id));
    metrics::write_metrics_csv(&out, &rows, true)?;

    let n = rows.len() as f64;
    let mean_psnr = rows.iter().map(|r| r.psnr_db.min(PSNR_CAP_DB)).sum::<f64>() / n;
    let mean_ssim = rows.iter().map(|r| r.ssim).sum::<f64>() / n;
    println!("evaluated {} pairs: mean PSNR {mean_psnr:.4} dB, mean SSIM {mean_ssim:.4}", rows.len());
    Ok(0)
}

// ---------------------------------------------------------------------------
// ablate-stages
// ---------------------------------------------------------------------------

fn cmd_ablate_stages(args: AblateArgs, file: &FileConfig) -> Result<i32> {
    let data = resolve(args.data, file, "data", None::<PathBuf>)?;
    let list_raw = resolve(args.stages_list, file, "stages-list", Some("0,2,5,8".to_string()))?;
    let holdout_frac = resolve(args.holdout_frac, file, "holdout-frac", Some(0.2))?;
    let base_cfg = train_config_from(
        file,
        None,
        args.epochs,
        args.seed,
        args.kernels,
        args.kernel_size,
        args.prox_blocks,
        args.prox_hidden,
        args.batch_size,
        args.patch_size,
        args.lr,
        None,
        None,
    )?;
    let out_csv = match args.out {
        Some(p) => Some(p),
        None => file.get::<PathBuf>("out")?,
    };
    file.reject_unknown()?;

    let mut stage_counts: Vec<usize> = list_raw
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("bad stage count `{s}` in --stages-list")))
        })
        .collect::<Result<Vec<_>>>()?;
    stage_counts.sort_unstable();
    stage_counts.dedup();
    if stage_counts.is_empty() {
        return Err(Error::Config("--stages-list must name at least one stage count".into()));
    }
    if !(0.0..1.0).contains(&holdout_frac) {
        return Err(Error::Config("holdout-frac must lie in [0, 1)".into()));
    }

    echo_config(
        "derain ablate-stages",
        &[
            ("data", data.display().to_string()),
            (
                "stages-list",
                stage_counts.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(","),
            ),
            ("epochs", base_cfg.epochs.to_string()),
            ("seed", base_cfg.seed.to_string()),
            ("holdout-frac", holdout_frac.to_string()),
            ("assert-monotone", args.assert_monotone.to_string()),
        ],
    );

    let pairs = dataset::load_pairs(&data)?;
    let holdout = ((pairs.len() as f64 * holdout_frac).round() as usize)
        .clamp(1, pairs.len().saturating_sub(1).max(1));
    if pairs.len() < 2 {
        return Err(Error::Data("ablation needs at least 2 pairs (train + holdout)".into()));
    }
    let (train_pairs, eval_pairs) = pairs.split_at(pairs.len() - holdout);

    let mut table: Vec<(usize, f64, f64)> = Vec::new();
    for &stages in &stage_counts {
        let mut cfg = base_cfg.clone();
        cfg.stages = stages;
        let (lambda, gamma) = stage_loss_weights(stages);
        cfg.lambda = lambda;
        cfg.gamma = gamma;
        cfg.validate()?;
        let report = train::train(train_pairs, &cfg)?;
        let params = report.params;

        let mut psnr_sum = 0.0;
        let mut ssim_sum = 0.0;
        for (o, b_true) in eval_pairs {
            let solver_cfg = params.solver_config(false);
            let stage_params = params.stage_params();
            let outp = solver::run(o, &params.bank, &solver_cfg, Some(&stage_params))?;
            check_finite_image(&outp.background, &format!("ablation S={stages}"))?;
            psnr_sum += metrics::psnr_images(b_true, &outp.background)?.min(PSNR_CAP_DB);
            ssim_sum += metrics::ssim_images(b_true, &outp.background)?;
        }
        let n = eval_pairs.len() as f64;
        table.push((stages, psnr_sum / n, ssim_sum / n));
    }

    println!("stages  mean_psnr_db  mean_ssim");
    for (s, p, m) in &table {
        println!("{s:>6}  {p:>12.4}  {m:>9.4}");
    }
    if let Some(csv) = out_csv {
        use std::io::Write as _;
        let mut f = std::fs::File::create(&csv)?;
        writeln!(f, "stages,mean_psnr_db,mean_ssim")?;
        for (s, p, m) in &table {
            writeln!(f, "{s},{p:.4},{m:.4}")?;
        }
    }

    if args.assert_monotone {
        const SLACK_DB: f64 = 0.2;
        for pair in table.windows(2) {
            let (s0, p0, _) = pair[0];
            let (s1, p1, _) = pair[1];
            if p1 < p0 - SLACK_DB {
                eprintln!(
                    "monotonicity violated: S={s1} scores {p1:.4} dB, more than {SLACK_DB} dB \
                     below S={s0} at {p0:.4} dB"
                );
                return Ok(1);
            }
        }
    }
    Ok(0)
}
