//! The `ipsr` command line. One binary, seven subcommands; every run is
//! reproducible from `--seed` (fixed default) and the config file, with
//! flags overriding file values. Exit codes: 0 success, 1 usage error,
//! 2 data error.

use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use log::info;

use crate::degrade::{self, DegradationConfig};
use crate::imgcore::{load_image, save_image, PlanarImage};
use crate::kernest::{estimate_kernel, EstimationProblem};
use crate::metrics::{evaluate_pairs, EvalProtocol};
use crate::srnet::{
    self, calibrate_and_quantize, train, Tensor, TrainConfig, Weights,
};

/// Fixed default so unseeded runs are still byte-reproducible.
pub const DEFAULT_SEED: u64 = 1009;

const USAGE_ERROR: i32 = 1;
const DATA_ERROR: i32 = 2;

#[derive(Parser)]
#[command(
    name = "ipsr",
    about = "Real-world super-resolution toolkit: degradation synthesis, kernel estimation, training, quantized inference, evaluation",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate LR/HR training pairs from a directory of HR images
    Degrade(DegradeArgs),
    /// Harvest low-variance noise patches from real LR images into a bank
    CollectNoise(CollectNoiseArgs),
    /// Estimate the blur kernel relating an image to its LR counterpart
    EstimateKernel(EstimateKernelArgs),
    /// Train the super-resolution network on LR/HR pairs
    Train(TrainArgs),
    /// Super-resolve one image with a weight file (float or quantized)
    Infer(InferArgs),
    /// Post-training-quantize a float weight file to uint8
    Quantize(QuantizeArgs),
    /// Score an SR directory against an HR directory (PSNR/SSIM, CSV)
    Eval(EvalArgs),
}

#[derive(Args)]
struct DegradeArgs {
    /// Directory of HR source images
    #[arg(long)]
    hr: PathBuf,
    /// Output directory (HR/LR subtrees are created inside)
    #[arg(long)]
    out: PathBuf,
    /// JSON degradation recipe; defaults apply when omitted
    #[arg(long)]
    config: Option<PathBuf>,
    /// LR variants per HR image
    #[arg(long, default_value_t = 1)]
    count: usize,
    /// Overrides the config-file seed
    #[arg(long)]
    seed: Option<u64>,
    /// Parallelism cap; never changes results
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args)]
struct CollectNoiseArgs {
    /// Directory of real LR images to harvest from
    #[arg(long)]
    lr: PathBuf,
    /// Output bank file
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    patch_size: usize,
    /// Window stride; defaults to the patch size
    #[arg(long)]
    stride: Option<usize>,
    /// Per-channel variance gate v; windows at or above it are discarded
    #[arg(long, default_value_t = 0.002)]
    variance_cap: f64,
}

#[derive(Args)]
struct EstimateKernelArgs {
    /// Source image (HR side when --lr is given, otherwise self-reference)
    #[arg(long)]
    src: PathBuf,
    /// Paired LR image; omitted means ideal-downsample self-reference
    #[arg(long)]
    lr: Option<PathBuf>,
    /// Output kernel text file (first line size, then rows)
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 3)]
    scale: usize,
    #[arg(long, default_value_t = 13)]
    kernel_size: usize,
    #[arg(long, default_value_t = 2000)]
    iterations: usize,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// Directory of LR inputs (filenames matched against --hr)
    #[arg(long)]
    lr: PathBuf,
    /// Directory of HR targets
    #[arg(long)]
    hr: PathBuf,
    /// Output weight file
    #[arg(long)]
    out: PathBuf,
    /// Resume from an existing float weight file
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 50)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-4)]
    learning_rate: f64,
    #[arg(long, default_value_t = 32)]
    channels: usize,
    #[arg(long, default_value_t = 4)]
    body: usize,
    #[arg(long, default_value_t = 3)]
    scale: usize,
    /// Add the nearest-upscaled input to the network output
    #[arg(long)]
    anchor: bool,
    /// Quantization-aware training (fake-quantize weights and activations)
    #[arg(long)]
    qat: bool,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
}

#[derive(Args)]
struct InferArgs {
    /// Weight file, float or quantized
    #[arg(long)]
    weights: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct QuantizeArgs {
    /// Float weight file to quantize
    #[arg(long)]
    weights: PathBuf,
    /// Directory of calibration images (LR-sized)
    #[arg(long)]
    calib: PathBuf,
    /// Output quantized weight file
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory of super-resolved images
    #[arg(long)]
    sr: PathBuf,
    /// Directory of ground-truth images (matched by filename)
    #[arg(long)]
    hr: PathBuf,
    /// Channel protocol: y (luma) or rgb
    #[arg(long, default_value = "y")]
    mode: String,
    /// Border pixels excluded from scoring; defaults to 3 for y, 0 for rgb
    #[arg(long)]
    shave: Option<usize>,
    /// Write the CSV report here instead of standard output
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Parses and dispatches `argv`, returning the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => USAGE_ERROR,
            };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Degrade(a) => cmd_degrade(a),
        Command::CollectNoise(a) => cmd_collect_noise(a),
        Command::EstimateKernel(a) => cmd_estimate_kernel(a),
        Command::Train(a) => cmd_train(a),
        Command::Infer(a) => cmd_infer(a),
        Command::Quantize(a) => cmd_quantize(a),
        Command::Eval(a) => cmd_eval(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("ipsr: {e:#}");
            DATA_ERROR
        }
    }
}

fn cmd_degrade(a: DegradeArgs) -> anyhow::Result<()> {
    let mut cfg = match &a.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| anyhow::anyhow!("reading {}: {e}", path.display()))?;
            serde_json::from_str::<DegradationConfig>(&text)
                .map_err(|e| anyhow::anyhow!("parsing {}: {e}", path.display()))?
        }
        None => DegradationConfig::default(),
    };
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    } else if a.config.is_none() {
        cfg.seed = DEFAULT_SEED;
    }
    let summary = degrade::generate_dataset(&a.hr, &a.out, &cfg, a.count, a.jobs)?;
    info!(
        "degrade: {} HR / {} LR images written to {}",
        summary.hr_written,
        summary.lr_written,
        a.out.display()
    );
    for (path, why) in &summary.failures {
        eprintln!("ipsr: skipped {}: {why}", path.display());
    }
    if summary.lr_written == 0 {
        anyhow::bail!("no images produced from {}", a.hr.display());
    }
    Ok(())
}

fn cmd_collect_noise(a: CollectNoiseArgs) -> anyhow::Result<()> {
    let images = load_dir(&a.lr)?;
    if images.is_empty() {
        anyhow::bail!("no images in {}", a.lr.display());
    }
    let stride = a.stride.unwrap_or(a.patch_size);
    let imgs: Vec<PlanarImage> = images.into_iter().map(|(_, img)| img).collect();
    let bank = degrade::collect_noise_patches(&imgs, a.patch_size, stride, a.variance_cap)?;
    info!(
        "collect-noise: {} patches under variance {}",
        bank.len(),
        a.variance_cap
    );
    bank.save(&a.out)?;
    Ok(())
}

fn cmd_estimate_kernel(a: EstimateKernelArgs) -> anyhow::Result<()> {
    let source = load_image(&a.src)?;
    let lr = a.lr.as_ref().map(load_image).transpose()?;
    let mut problem = EstimationProblem::new(source, a.scale, a.kernel_size);
    if let Some(lr) = lr {
        problem = problem.with_lr(lr);
    }
    problem.iterations = a.iterations;
    problem.seed = a.seed;
    let result = estimate_kernel(&problem)?;
    info!(
        "estimate-kernel: final loss {:.6}",
        result.loss_history.last().copied().unwrap_or(f64::NAN)
    );
    std::fs::write(&a.out, result.kernel.to_text())?;
    Ok(())
}

fn cmd_train(a: TrainArgs) -> anyhow::Result<()> {
    let pairs = load_pairs(&a.lr, &a.hr)?;
    if pairs.is_empty() {
        anyhow::bail!("no matching LR/HR filenames between the two directories");
    }
    let initial = match &a.init {
        Some(path) => srnet::io::load_float(path)?,
        None => Weights::init(
            srnet::build_network(a.channels, a.body, a.scale, a.anchor)?,
            a.seed,
        ),
    };
    let scale = initial.spec.scale;
    let tensors: Vec<(Tensor, Tensor)> = pairs
        .iter()
        .map(|(name, lr, hr)| {
            let ok = hr.height() == lr.height() * scale && hr.width() == lr.width() * scale;
            if !ok {
                anyhow::bail!(
                    "{name}: HR {}x{} is not {scale}x the LR {}x{}",
                    hr.height(),
                    hr.width(),
                    lr.height(),
                    lr.width()
                );
            }
            Ok((Tensor::from_image(lr), Tensor::from_image(hr)))
        })
        .collect::<anyhow::Result<_>>()?;
    let cfg = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        learning_rate: a.learning_rate,
        qat: a.qat,
        seed: a.seed,
        ..TrainConfig::default()
    };
    let (weights, log) = train(&initial, &tensors, &cfg, None)?;
    for (i, ep) in log.epochs.iter().enumerate() {
        info!(
            "train: epoch {} loss {:.5} l1 {:.5} psnr {:.2} dB lr {:.2e}",
            i + 1,
            ep.loss,
            ep.l1,
            ep.psnr_db,
            ep.learning_rate
        );
    }
    srnet::io::save_weights(&weights, &a.out)?;
    Ok(())
}

fn cmd_infer(a: InferArgs) -> anyhow::Result<()> {
    let input = load_image(&a.input)?;
    let x = Tensor::from_image(&input);
    let output = match srnet::io::load_weights(&a.weights)? {
        srnet::io::LoadedNetwork::Float(w) => srnet::forward(&w, &x)?,
        srnet::io::LoadedNetwork::Quantized(q) => q.forward(&x)?,
    };
    save_image(&output.to_image(), &a.out)?;
    Ok(())
}

fn cmd_quantize(a: QuantizeArgs) -> anyhow::Result<()> {
    let weights = srnet::io::load_float(&a.weights)?;
    let calib: Vec<Tensor> = load_dir(&a.calib)?
        .iter()
        .map(|(_, img)| Tensor::from_image(img))
        .collect();
    let q = calibrate_and_quantize(&weights, &calib)?;
    srnet::io::save_quantized(&q, &a.out)?;
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> anyhow::Result<()> {
    let proto = match a.mode.as_str() {
        "y" => EvalProtocol::y(a.shave.unwrap_or(3)),
        "rgb" => EvalProtocol::rgb(a.shave.unwrap_or(0)),
        other => anyhow::bail!("unknown mode {other:?}; expected y or rgb"),
    };
    let report = evaluate_pairs(&a.sr, &a.hr, &proto)?;
    let csv = report.to_csv();
    match &a.out {
        Some(path) => std::fs::write(path, csv)?,
        None => print!("{csv}"),
    }
    info!(
        "eval: mean psnr {:.2} dB, mean ssim {:.4} over {} pairs",
        report.mean_psnr(),
        report.mean_ssim(),
        report.scores.len()
    );
    Ok(())
}

fn is_image(path: &Path) -> bool {
    matches!(
        path.extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
            .as_deref(),
        Some("png" | "ppm" | "pgm")
    )
}

fn load_dir(dir: &Path) -> anyhow::Result<Vec<(String, PlanarImage)>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| anyhow::anyhow!("reading {}: {e}", dir.display()))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| is_image(p))
        .collect();
    paths.sort();
    paths
        .into_iter()
        .map(|p| {
            let name = p
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            Ok((name, load_image(&p)?))
        })
        .collect()
}

/// Pairs LR and HR images by identical filenames; unmatched files are
/// skipped with a warning.
fn load_pairs(
    lr_dir: &Path,
    hr_dir: &Path,
) -> anyhow::Result<Vec<(String, PlanarImage, PlanarImage)>> {
    let lr = load_dir(lr_dir)?;
    let hr: std::collections::BTreeMap<String, PlanarImage> =
        load_dir(hr_dir)?.into_iter().collect();
    let mut pairs = Vec::new();
    for (name, lr_img) in lr {
        match hr.get(&name) {
            Some(hr_img) => pairs.push((name, lr_img, hr_img.clone())),
            None => eprintln!("ipsr: no HR match for {name}, skipping"),
        }
    }
    Ok(pairs)
}
