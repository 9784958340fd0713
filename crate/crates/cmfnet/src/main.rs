//! Command-line entry points for training, inference, evaluation,
//! degradation synthesis, and gradient verification.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use cmfnet::attention::AttentionKind;
use cmfnet::data::{
    crop_to, load_directory_pairs, load_image, pad_to_multiple, random_blur_recipe,
    random_haze_recipe, save_image, stack_batch, synth_blur, synth_haze, synthetic_pairs,
    unstack_one, BlurRecipe, DegradationKind, GrayPolicy, HazeRecipe,
};
use cmfnet::error::Error;
use cmfnet::loss::{evaluate_pair, EvalProtocol, LossConfig, LossKind};
use cmfnet::model::{cmfnet_forward, CmfnetConfig, SkipVariant};
use cmfnet::train::{train_from_scratch, Checkpoint, Dataset, Schedule, TrainConfig};
use cmfnet::verify::run_gradient_suite;
use cmfnet::{Result, Tensor};

/// Decorrelates synthetic-dataset generation from the training batch stream.
const DATASET_SEED_SALT: u64 = 0x5851_f42d_4c95_7f2d;

#[derive(Parser)]
#[command(name = "cmfnet", version, about = "Multi-branch attention U-Net image restoration")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model on directory pairs or synthetic degradations.
    Train(TrainArgs),
    /// Restore one image with a trained checkpoint.
    Infer(InferArgs),
    /// Compute PSNR/SSIM over paired prediction/ground-truth directories.
    Eval(EvalArgs),
    /// Run the finite-difference gradient verification suites.
    Gradcheck(GradcheckArgs),
    /// Apply a synthetic degradation to a clean image.
    Synth(SynthArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset root with degraded/ and clean/ subdirectories.
    #[arg(long, conflicts_with = "synthetic")]
    data: Option<PathBuf>,
    /// Generate a synthetic dataset instead: haze or blur.
    #[arg(long)]
    synthetic: Option<String>,
    /// Number of synthetic pairs.
    #[arg(long, default_value_t = 20)]
    pairs: usize,
    /// Synthetic image side length.
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// Base feature channels.
    #[arg(long, default_value_t = 8)]
    width: usize,
    /// Training patch side length.
    #[arg(long, default_value_t = 64)]
    patch: usize,
    /// Patches per optimization step.
    #[arg(long, default_value_t = 2)]
    batch: usize,
    /// Optimization steps (also the cosine schedule horizon).
    #[arg(long, default_value_t = 2000)]
    iters: usize,
    /// Master seed for init, data, and batch sampling.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Branch set: any of c (channel), p (pixel), s (spatial).
    #[arg(long, default_value = "cps")]
    branches: String,
    /// Skip connection: none, asc, or msc.
    #[arg(long, default_value = "msc")]
    sc: String,
    /// Fidelity loss: ps or l1.
    #[arg(long, default_value = "ps")]
    loss: String,
    /// Checkpoint output path.
    #[arg(long)]
    out: PathBuf,
    /// Metrics CSV path (defaults to <out>.csv).
    #[arg(long)]
    log: Option<PathBuf>,
    /// Initial learning rate.
    #[arg(long, default_value_t = 2e-4)]
    lr_max: f64,
    /// Final learning rate.
    #[arg(long, default_value_t = 1e-6)]
    lr_min: f64,
    /// Clip gradients to this global L2 norm (off when absent).
    #[arg(long)]
    clip_norm: Option<f64>,
    /// Log the loss every N steps.
    #[arg(long, default_value_t = 50)]
    log_every: usize,
    /// Evaluate the held-out pair every N steps.
    #[arg(long, default_value_t = 250)]
    eval_every: usize,
    /// Write intermediate checkpoints every N steps (0 = final only).
    #[arg(long, default_value_t = 0)]
    ckpt_every: usize,
    /// Reject grayscale inputs instead of broadcasting them to RGB.
    #[arg(long, default_value_t = false)]
    reject_gray: bool,
}

#[derive(Args)]
struct InferArgs {
    /// Trained checkpoint.
    #[arg(long)]
    ckpt: PathBuf,
    /// Degraded input image (PNG or PPM).
    #[arg(long)]
    input: PathBuf,
    /// Restored output image path.
    #[arg(long)]
    output: PathBuf,
    /// Reject grayscale inputs instead of broadcasting them to RGB.
    #[arg(long, default_value_t = false)]
    reject_gray: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory of predictions.
    #[arg(long)]
    pred_dir: PathBuf,
    /// Directory of ground-truth images with matching filenames.
    #[arg(long)]
    gt_dir: PathBuf,
    /// Metric protocol: rgb or yluma.
    #[arg(long, default_value = "rgb")]
    protocol: String,
    /// Reject grayscale inputs instead of broadcasting them to RGB.
    #[arg(long, default_value_t = false)]
    reject_gray: bool,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Model width used by the block and full-model suites.
    #[arg(long, default_value_t = 4)]
    width: usize,
    /// Seed for all random points.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SynthArgs {
    /// Degradation kind: haze or blur.
    #[arg(long)]
    kind: String,
    /// Clean input image.
    #[arg(long)]
    input: PathBuf,
    /// Degraded output image path (a .json parameter sidecar is written next
    /// to it).
    #[arg(long)]
    output: PathBuf,
    /// Sampling seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Haze override: constant transmission value in [0,1].
    #[arg(long)]
    m_const: Option<f32>,
    /// Blur override: noise standard deviation.
    #[arg(long)]
    sigma: Option<f32>,
    /// Blur override: odd motion-kernel length (1 = identity).
    #[arg(long)]
    kernel_len: Option<usize>,
    /// Reject grayscale inputs instead of broadcasting them to RGB.
    #[arg(long, default_value_t = false)]
    reject_gray: bool,
}

fn parse_branches(s: &str) -> Result<Vec<AttentionKind>> {
    let mut out: Vec<AttentionKind> = Vec::new();
    for ch in s.chars() {
        let kind: AttentionKind = ch.to_string().parse()?;
        if out.contains(&kind) {
            return Err(Error::InvalidArgument(format!("duplicate branch '{ch}'")));
        }
        out.push(kind);
    }
    out.sort();
    Ok(out)
}

fn gray_policy(reject: bool) -> GrayPolicy {
    if reject {
        GrayPolicy::Reject
    } else {
        GrayPolicy::Broadcast
    }
}

fn cmd_train(args: TrainArgs) -> Result<u8> {
    let model = CmfnetConfig {
        width: args.width,
        branches: parse_branches(&args.branches)?,
        sc_variant: args.sc.parse::<SkipVariant>()?,
        ..CmfnetConfig::default()
    };
    model.validate()?;
    let loss = LossConfig { kind: args.loss.parse::<LossKind>()?, ..LossConfig::default() };
    let cfg = TrainConfig {
        model,
        loss,
        schedule: Schedule::new(args.lr_max, args.lr_min, args.iters.max(1))?,
        batch_size: args.batch,
        patch: args.patch,
        iters: args.iters,
        seed: args.seed,
        log_every: args.log_every,
        eval_every: args.eval_every,
        checkpoint_every: args.ckpt_every,
        clip_norm: args.clip_norm,
    };

    let pairs = match (&args.data, &args.synthetic) {
        (Some(dir), None) => load_directory_pairs(dir, gray_policy(args.reject_gray))?,
        (None, Some(kind)) => {
            let kind: DegradationKind = kind.parse()?;
            synthetic_pairs(kind, args.pairs, args.size, args.seed ^ DATASET_SEED_SALT)?
        }
        _ => {
            return Err(Error::InvalidArgument(
                "exactly one of --data or --synthetic is required".into(),
            ))
        }
    };
    let data = Dataset::from_pairs(pairs)?;
    let log_path = args.log.clone().unwrap_or_else(|| {
        let mut p = args.out.as_os_str().to_owned();
        p.push(".csv");
        PathBuf::from(p)
    });
    train_from_scratch(&cfg, &data, Some(&args.out), Some(&log_path))?;
    Ok(0)
}

fn cmd_infer(args: InferArgs) -> Result<u8> {
    let ckpt = Checkpoint::read(&args.ckpt)?;
    let params = ckpt.build_params()?.detached();
    let image = load_image(&args.input, gray_policy(args.reject_gray))?;
    let (padded, (h, w)) = pad_to_multiple(&image, ckpt.config.spatial_factor())?;
    let restored = cmfnet_forward(&stack_batch(&[&padded])?, &ckpt.config, &params)?;
    let restored = crop_to(&unstack_one(&restored, 0)?, h, w)?;
    let clamped = Tensor::from_vec(
        restored.shape(),
        restored.data().iter().map(|v| v.clamp(0.0, 1.0)).collect(),
    )?;
    save_image(&clamped, &args.output)?;
    Ok(0)
}

fn list_images(dir: &Path) -> Result<Vec<String>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut names: Vec<String> = entries
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().into_string().ok())
        .filter(|n| {
            let l = n.to_ascii_lowercase();
            l.ends_with(".png") || l.ends_with(".ppm")
        })
        .collect();
    names.sort();
    Ok(names)
}

fn cmd_eval(args: EvalArgs) -> Result<u8> {
    let protocol: EvalProtocol = args.protocol.parse()?;
    let pred_names = list_images(&args.pred_dir)?;
    let gt_names = list_images(&args.gt_dir)?;
    let missing: Vec<String> = pred_names
        .iter()
        .filter(|n| gt_names.binary_search(n).is_err())
        .map(|n| format!("{n} (no ground truth)"))
        .chain(
            gt_names
                .iter()
                .filter(|n| pred_names.binary_search(n).is_err())
                .map(|n| format!("{n} (no prediction)")),
        )
        .collect();
    if !missing.is_empty() {
        return Err(Error::Data(format!("unpaired files: {}", missing.join(", "))));
    }
    if pred_names.is_empty() {
        return Err(Error::Data("no image pairs to evaluate".into()));
    }
    let policy = gray_policy(args.reject_gray);
    let mut sum_psnr = 0.0;
    let mut sum_ssim = 0.0;
    for name in &pred_names {
        let pred = load_image(&args.pred_dir.join(name), policy)?;
        let gt = load_image(&args.gt_dir.join(name), policy)?;
        let (p, s) = evaluate_pair(&stack_batch(&[&pred])?, &stack_batch(&[&gt])?, protocol)?;
        println!("{name},{p},{s}");
        sum_psnr += p;
        sum_ssim += s;
    }
    let n = pred_names.len() as f64;
    println!("mean,{},{}", sum_psnr / n, sum_ssim / n);
    Ok(0)
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<u8> {
    let reports = run_gradient_suite(args.width, args.seed)?;
    let mut all_pass = true;
    for r in &reports {
        let status = if r.pass() { "PASS" } else { "FAIL" };
        println!(
            "{}: max rel err {:.3e} (threshold {:.0e}, {} coords) {}",
            r.name, r.max_rel_err, r.threshold, r.coords_checked, status
        );
        all_pass &= r.pass();
    }
    Ok(if all_pass { 0 } else { 1 })
}

#[derive(Serialize)]
struct Sidecar {
    kind: String,
    seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    haze: Option<HazeRecipe>,
    #[serde(skip_serializing_if = "Option::is_none")]
    blur: Option<BlurRecipe>,
}

fn cmd_synth(args: SynthArgs) -> Result<u8> {
    let kind: DegradationKind = args.kind.parse()?;
    let clean = load_image(&args.input, gray_policy(args.reject_gray))?;
    let (h, w) = match clean.shape() {
        [3, h, w] => (*h, *w),
        _ => unreachable!("loader yields rank-3 RGB"),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let (degraded, sidecar) = match kind {
        DegradationKind::Haze => {
            let mut recipe = random_haze_recipe(&mut rng);
            if let Some(m) = args.m_const {
                recipe = HazeRecipe::constant(m, recipe.atmosphere);
            }
            let out = synth_haze(&clean, &recipe.expand(h, w)?)?;
            (out, Sidecar { kind: kind.to_string(), seed: args.seed, haze: Some(recipe), blur: None })
        }
        DegradationKind::Blur => {
            let mut recipe = random_blur_recipe(&mut rng);
            if let Some(len) = args.kernel_len {
                recipe.length = len;
            }
            if let Some(sigma) = args.sigma {
                recipe.noise_sigma = sigma;
            }
            let out = synth_blur(&clean, &recipe.kernel()?, &mut rng)?;
            (out, Sidecar { kind: kind.to_string(), seed: args.seed, haze: None, blur: Some(recipe) })
        }
    };
    save_image(&degraded, &args.output)?;
    let sidecar_path = {
        let mut p = args.output.as_os_str().to_owned();
        p.push(".json");
        PathBuf::from(p)
    };
    let json = serde_json::to_string_pretty(&sidecar)
        .map_err(|e| Error::InvalidArgument(format!("sidecar serialization: {e}")))?;
    std::fs::write(&sidecar_path, json).map_err(|e| Error::io(&sidecar_path, e))?;
    Ok(0)
}

fn dispatch(cli: Cli) -> Result<u8> {
    match cli.cmd {
        Cmd::Train(a) => cmd_train(a),
        Cmd::Infer(a) => cmd_infer(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Gradcheck(a) => cmd_gradcheck(a),
        Cmd::Synth(a) => cmd_synth(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            let code = match e {
                Error::NonFiniteLoss { .. } => 3,
                _ => 2,
            };
            ExitCode::from(code)
        }
    }
}
