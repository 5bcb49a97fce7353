//! Command-line front end: training, sampling, reconstruction panels, latent
//! interpolation, attribute edits, scoring and the gradient self-check.
//! Every option follows the same precedence: built-in defaults, then the
//! config file, then explicit flags. Each run writes the config it resolved
//! next to its outputs.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use avae::checkpoint::load_checkpoint;
use avae::config::Config;
use avae::data::{Dataset, load_dataset};
use avae::error::{Error, Result};
use avae::grid::save_image_grid;
use avae::latent::{apply_attribute, build_attribute_from_dataset, interpolate, latent_rows};
use avae::score::{ClassifierConfig, inception_score, train_classifier};
use avae::selfcheck::reference_suite;
use avae::train::{Trainer, run_training};
use avae::vae::{VaeModel, sample_prior};
use avae::Tensor;

/// RNG stream for inference-time prior draws, disjoint from every stream the
/// trainer uses.
const SAMPLE_STREAM: u64 = 6 << 56;

/// File name of the resolved configuration written beside outputs.
const RESOLVED_CONFIG: &str = "config.toml";

#[derive(Parser)]
#[command(name = "avae", version, about = "Adversarially trained VAE: train, sample and inspect models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model (fresh or resumed); writes checkpoint, metrics and config.
    Train(TrainArgs),
    /// Decode prior draws from a checkpoint into an image grid.
    Sample(SampleArgs),
    /// Real images beside their generator and discriminator reconstructions.
    Reconstruct(ReconstructArgs),
    /// Decode evenly spaced latents between two dataset images.
    Interpolate(InterpolateArgs),
    /// Build an attribute vector from flagged images and store it in the checkpoint.
    AttrBuild(AttrBuildArgs),
    /// Decode one image's latent shifted by a stored attribute vector.
    AttrApply(AttrApplyArgs),
    /// Train the local classifier and score generated samples.
    Score(ScoreArgs),
    /// Compare reverse-mode gradients against finite differences.
    GradCheck(GradCheckArgs),
}

/// Flag-level overrides applied on top of the config file (or the resumed
/// checkpoint's stored config).
#[derive(Args, Clone, Default)]
struct ConfigOverrides {
    /// TOML config file; flags still win over its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Square image edge (power of two, at least 8).
    #[arg(long)]
    image_size: Option<usize>,
    /// 1 (grayscale) or 3 (RGB).
    #[arg(long)]
    channels: Option<usize>,
    /// Latent width shared by generator and discriminator.
    #[arg(long)]
    latent_dim: Option<usize>,
    /// Three comma-separated conv widths, narrow to wide, e.g. 32,64,128.
    #[arg(long)]
    widths: Option<String>,
    /// Total training steps (a resumed run counts from its checkpoint).
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    checkpoint_interval: Option<usize>,
    #[arg(long)]
    metrics_interval: Option<usize>,
    #[arg(long)]
    holdout_fraction: Option<f64>,
    /// Weight on the fake-sample energy inside the fake side.
    #[arg(long)]
    alpha: Option<f64>,
    /// Weight on the latent-similarity term.
    #[arg(long)]
    beta: Option<f64>,
    /// Weight on the pixel reconstruction term.
    #[arg(long)]
    gamma: Option<f64>,
    /// Equilibrium diversity ratio.
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    literal_fake_energy: Option<bool>,
    #[arg(long)]
    literal_error_sign: Option<bool>,
    #[arg(long)]
    adaptive_eta: Option<bool>,
    #[arg(long)]
    lambda_integral: Option<f64>,
    #[arg(long)]
    lambda_proportional: Option<f64>,
    #[arg(long)]
    lambda_derivative: Option<f64>,
    #[arg(long)]
    initial_gain: Option<f64>,
}

impl ConfigOverrides {
    /// Defaults < config file < flags. `stored` (a resumed checkpoint's
    /// config) replaces the defaults when no file is given.
    fn resolve(&self, stored: Option<Config>) -> Result<Config> {
        let mut cfg = match &self.config {
            Some(path) => Config::from_path(path)?,
            None => stored.unwrap_or_default(),
        };
        if let Some(v) = self.image_size {
            cfg.model.image_size = v;
        }
        if let Some(v) = self.channels {
            cfg.model.channels = v;
        }
        if let Some(v) = self.latent_dim {
            cfg.model.latent_dim = v;
        }
        if let Some(v) = &self.widths {
            cfg.model.widths = parse_widths(v)?;
        }
        if let Some(v) = self.iterations {
            cfg.train.iterations = v;
        }
        if let Some(v) = self.batch {
            cfg.train.batch = v;
        }
        if let Some(v) = self.learning_rate {
            cfg.train.learning_rate = v;
        }
        if let Some(v) = self.seed {
            cfg.train.seed = v;
        }
        if let Some(v) = self.checkpoint_interval {
            cfg.train.checkpoint_interval = v;
        }
        if let Some(v) = self.metrics_interval {
            cfg.train.metrics_interval = v;
        }
        if let Some(v) = self.holdout_fraction {
            cfg.train.holdout_fraction = v;
        }
        if let Some(v) = self.alpha {
            cfg.loss.alpha = v;
        }
        if let Some(v) = self.beta {
            cfg.loss.beta = v;
        }
        if let Some(v) = self.gamma {
            cfg.loss.gamma = v;
        }
        if let Some(v) = self.eta {
            cfg.loss.eta = v;
        }
        if let Some(v) = self.literal_fake_energy {
            cfg.loss.literal_fake_energy = v;
        }
        if let Some(v) = self.literal_error_sign {
            cfg.loss.literal_error_sign = v;
        }
        if let Some(v) = self.adaptive_eta {
            cfg.loss.adaptive_eta = v;
        }
        if let Some(v) = self.lambda_integral {
            cfg.controller.lambda_integral = v;
        }
        if let Some(v) = self.lambda_proportional {
            cfg.controller.lambda_proportional = v;
        }
        if let Some(v) = self.lambda_derivative {
            cfg.controller.lambda_derivative = v;
        }
        if let Some(v) = self.initial_gain {
            cfg.controller.initial_gain = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_widths(s: &str) -> Result<[usize; 3]> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(Error::Usage(format!(
            "--widths wants three comma-separated values, got '{s}'"
        )));
    }
    let mut widths = [0usize; 3];
    for (slot, part) in widths.iter_mut().zip(&parts) {
        *slot = part
            .parse()
            .map_err(|_| Error::Usage(format!("bad width '{part}' in '{s}'")))?;
    }
    Ok(widths)
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory (images plus optional attributes.csv).
    #[arg(long)]
    data: PathBuf,
    /// Output directory for checkpoint, metrics and resolved config.
    #[arg(long)]
    out: PathBuf,
    /// Resume from this checkpoint; its stored config becomes the base.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[command(flatten)]
    overrides: ConfigOverrides,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Number of images to draw.
    #[arg(long, default_value_t = 64)]
    count: usize,
    /// Grid columns.
    #[arg(long, default_value_t = 8)]
    columns: usize,
    /// Seed for the prior draws.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ReconstructArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// How many dataset images (in name order) to show.
    #[arg(long, default_value_t = 8)]
    count: usize,
}

#[derive(Args)]
struct InterpolateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Dataset file name of the start image.
    #[arg(long)]
    from: String,
    /// Dataset file name of the end image.
    #[arg(long)]
    to: String,
    /// Strip length including both endpoints.
    #[arg(long, default_value_t = 8)]
    steps: usize,
}

#[derive(Args)]
struct AttrBuildArgs {
    /// Checkpoint to read and update in place.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Directory for the build summary and resolved config.
    #[arg(long)]
    out: PathBuf,
    /// Attribute column (±1 flags) to build the vector from.
    #[arg(long)]
    attribute: String,
    /// Encoder batch size.
    #[arg(long, default_value_t = 64)]
    batch: usize,
}

#[derive(Args)]
struct AttrApplyArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Stored attribute vector to apply.
    #[arg(long)]
    attribute: String,
    /// Dataset file name of the image to edit.
    #[arg(long)]
    image: String,
    /// Comma-separated weights; one output column per weight.
    #[arg(long, default_value = "-1,-0.5,0,0.5,1", allow_hyphen_values = true)]
    weights: String,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Generated samples to score.
    #[arg(long, default_value_t = 256)]
    samples: usize,
    /// Independent scoring splits.
    #[arg(long, default_value_t = 1)]
    splits: usize,
    /// Attribute-column prefix carrying the class labels.
    #[arg(long, default_value = "class_")]
    label_prefix: String,
    /// Seed for the prior draws.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 10)]
    clf_epochs: usize,
    #[arg(long, default_value_t = 32)]
    clf_batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    clf_learning_rate: f64,
    #[arg(long, default_value_t = 1)]
    clf_seed: u64,
    #[arg(long, default_value_t = 0.2)]
    clf_holdout_fraction: f64,
    /// Classifier conv widths, narrow to wide.
    #[arg(long, default_value = "8,16,32")]
    clf_widths: String,
}

#[derive(Args)]
struct GradCheckArgs {
    /// Optional directory for the text report.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Sample(args) => cmd_sample(args),
        Command::Reconstruct(args) => cmd_reconstruct(args),
        Command::Interpolate(args) => cmd_interpolate(args),
        Command::AttrBuild(args) => cmd_attr_build(args),
        Command::AttrApply(args) => cmd_attr_apply(args),
        Command::Score(args) => cmd_score(args),
        Command::GradCheck(args) => cmd_grad_check(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Usage(_) | Error::Config(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Usage(format!("{what} not found: {}", path.display())))
    }
}

fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Rejects a dataset whose geometry disagrees with the checkpointed model.
fn check_geometry(dataset: &Dataset, config: &Config) -> Result<()> {
    if dataset.image_size() != config.model.image_size
        || dataset.channels() != config.model.channels
    {
        return Err(Error::Usage(format!(
            "dataset images are {}×{} with {} channel(s) but the model expects {}×{} with {}",
            dataset.image_size(),
            dataset.image_size(),
            dataset.channels(),
            config.model.image_size,
            config.model.image_size,
            config.model.channels,
        )));
    }
    Ok(())
}

fn find_entry(dataset: &Dataset, name: &str) -> Result<usize> {
    (0..dataset.len())
        .find(|&i| dataset.entry_name(i) == name)
        .ok_or_else(|| Error::Usage(format!("dataset has no image named '{name}'")))
}

/// Decodes latents in bounded chunks and reassembles one image batch.
fn decode_chunked(vae: &VaeModel<f32>, z: &Tensor<f32>) -> Result<Tensor<f32>> {
    const CHUNK: usize = 64;
    let (batch, width) = (z.dim(0), z.dim(1));
    let mut data = Vec::new();
    let mut tail: Vec<usize> = Vec::new();
    let mut lo = 0;
    while lo < batch {
        let hi = (lo + CHUNK).min(batch);
        let part = Tensor::new(vec![hi - lo, width], z.data()[lo * width..hi * width].to_vec())?;
        let images = vae.decode_batch(&part)?;
        tail = images.shape()[1..].to_vec();
        data.extend_from_slice(images.data());
        lo = hi;
    }
    let mut shape = vec![batch];
    shape.extend(tail);
    Tensor::new(shape, data)
}

/// Stacks rank-1 latents into a `[rows, width]` batch.
fn stack_rows(rows: &[Tensor<f32>]) -> Result<Tensor<f32>> {
    let width = rows[0].dim(0);
    let mut data = Vec::with_capacity(rows.len() * width);
    for row in rows {
        data.extend_from_slice(row.data());
    }
    Tensor::new(vec![rows.len(), width], data)
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let stored = match &args.resume {
        Some(path) => {
            require_file(path, "checkpoint")?;
            Some(load_checkpoint(path)?.0.config)
        }
        None => None,
    };
    let config = args.overrides.resolve(stored)?;
    ensure_dir(&args.out)?;
    config.write_resolved(&args.out.join(RESOLVED_CONFIG))?;

    let dataset = load_dataset(&args.data)?;
    let outcome = run_training(&dataset, &config, &args.out, args.resume.as_deref())?;
    println!("iterations: {}", outcome.iterations_completed);
    println!("checkpoint: {}", outcome.checkpoint_path.display());
    println!("metrics: {}", outcome.metrics_path.display());
    if let (Some(before), Some(after)) =
        (outcome.initial_holdout_recon, outcome.final_holdout_recon)
    {
        println!("holdout_recon: {before} -> {after}");
    }
    Ok(())
}

fn cmd_sample(args: SampleArgs) -> Result<()> {
    require_file(&args.checkpoint, "checkpoint")?;
    if args.count == 0 || args.columns == 0 {
        return Err(Error::Usage("--count and --columns must be at least 1".into()));
    }
    let trainer = Trainer::from_checkpoint_stored(&args.checkpoint)?;
    ensure_dir(&args.out)?;

    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    rng.set_stream(SAMPLE_STREAM);
    let z = sample_prior::<f32, _>(&mut rng, args.count, trainer.config().model.latent_dim);
    let images = decode_chunked(&trainer.vae, &z)?;
    let path = args.out.join("samples.png");
    save_image_grid(&images, args.columns, &path)?;
    trainer.config().write_resolved(&args.out.join(RESOLVED_CONFIG))?;
    println!("samples: {}", path.display());
    Ok(())
}

fn cmd_reconstruct(args: ReconstructArgs) -> Result<()> {
    require_file(&args.checkpoint, "checkpoint")?;
    if args.count == 0 {
        return Err(Error::Usage("--count must be at least 1".into()));
    }
    let trainer = Trainer::from_checkpoint_stored(&args.checkpoint)?;
    let dataset = load_dataset(&args.data)?;
    check_geometry(&dataset, trainer.config())?;

    let count = args.count.min(dataset.len());
    let indices: Vec<usize> = (0..count).collect();
    let real = dataset.batch(&indices)?;
    let vae_recon = trainer.vae.reconstruct(&real)?;
    let disc_recon = trainer.disc.reconstruct(&real)?;

    // One row per image: the original, the generator's reconstruction, the
    // discriminator's auto-encoding.
    let row = real.dim(1) * real.dim(2) * real.dim(3);
    let mut data = Vec::with_capacity(3 * count * row);
    for i in 0..count {
        for source in [&real, &vae_recon, &disc_recon] {
            data.extend_from_slice(&source.data()[i * row..(i + 1) * row]);
        }
    }
    let panel = Tensor::new(vec![3 * count, real.dim(1), real.dim(2), real.dim(3)], data)?;

    ensure_dir(&args.out)?;
    let path = args.out.join("reconstructions.png");
    save_image_grid(&panel, 3, &path)?;
    trainer.config().write_resolved(&args.out.join(RESOLVED_CONFIG))?;
    println!("reconstructions: {}", path.display());
    Ok(())
}

fn cmd_interpolate(args: InterpolateArgs) -> Result<()> {
    require_file(&args.checkpoint, "checkpoint")?;
    let trainer = Trainer::from_checkpoint_stored(&args.checkpoint)?;
    let dataset = load_dataset(&args.data)?;
    check_geometry(&dataset, trainer.config())?;

    let from = find_entry(&dataset, &args.from)?;
    let to = find_entry(&dataset, &args.to)?;
    let x = dataset.batch(&[from, to])?;
    let latents = latent_rows(&trainer.vae.encode_mean(&x)?)?;
    let line = interpolate(&latents[0], &latents[1], args.steps)?;
    let images = decode_chunked(&trainer.vae, &stack_rows(&line)?)?;

    ensure_dir(&args.out)?;
    let path = args.out.join("interpolation.png");
    save_image_grid(&images, args.steps, &path)?;
    trainer.config().write_resolved(&args.out.join(RESOLVED_CONFIG))?;
    println!("interpolation: {}", path.display());
    Ok(())
}

fn cmd_attr_build(args: AttrBuildArgs) -> Result<()> {
    require_file(&args.checkpoint, "checkpoint")?;
    if args.batch == 0 {
        return Err(Error::Usage("--batch must be at least 1".into()));
    }
    let mut trainer = Trainer::from_checkpoint_stored(&args.checkpoint)?;
    let dataset = load_dataset(&args.data)?;
    check_geometry(&dataset, trainer.config())?;

    let attribute =
        build_attribute_from_dataset(&trainer.vae, &dataset, &args.attribute, args.batch)?;
    trainer.put_attribute(&attribute);
    trainer.save_checkpoint(&args.checkpoint)?;

    ensure_dir(&args.out)?;
    let norm: f32 = attribute.vector.data().iter().map(|v| v * v).sum::<f32>().sqrt();
    let summary = format!(
        "attribute: {}\npositives: {}\nnegatives: {}\nnorm: {}\n",
        attribute.name, attribute.positives, attribute.negatives, norm
    );
    fs::write(args.out.join("attribute.txt"), &summary)
        .map_err(|e| Error::io(&args.out.join("attribute.txt"), e))?;
    trainer.config().write_resolved(&args.out.join(RESOLVED_CONFIG))?;
    print!("{summary}");
    Ok(())
}

fn cmd_attr_apply(args: AttrApplyArgs) -> Result<()> {
    require_file(&args.checkpoint, "checkpoint")?;
    let trainer = Trainer::from_checkpoint_stored(&args.checkpoint)?;
    let attribute = trainer.attribute(&args.attribute)?;
    let dataset = load_dataset(&args.data)?;
    check_geometry(&dataset, trainer.config())?;

    let weights: Vec<f32> = args
        .weights
        .split(',')
        .map(|w| {
            w.trim()
                .parse()
                .map_err(|_| Error::Usage(format!("bad weight '{w}' in '{}'", args.weights)))
        })
        .collect::<Result<_>>()?;
    if weights.is_empty() {
        return Err(Error::Usage("--weights must list at least one value".into()));
    }

    let index = find_entry(&dataset, &args.image)?;
    let x = dataset.batch(&[index])?;
    let z = &latent_rows(&trainer.vae.encode_mean(&x)?)?[0];
    let shifted: Vec<Tensor<f32>> = weights
        .iter()
        .map(|&w| apply_attribute(z, &attribute, w))
        .collect::<Result<_>>()?;
    let images = decode_chunked(&trainer.vae, &stack_rows(&shifted)?)?;

    ensure_dir(&args.out)?;
    let path = args.out.join("attribute_strip.png");
    save_image_grid(&images, weights.len(), &path)?;
    trainer.config().write_resolved(&args.out.join(RESOLVED_CONFIG))?;
    println!("attribute_strip: {}", path.display());
    Ok(())
}

fn cmd_score(args: ScoreArgs) -> Result<()> {
    require_file(&args.checkpoint, "checkpoint")?;
    if args.samples == 0 {
        return Err(Error::Usage("--samples must be at least 1".into()));
    }
    let trainer = Trainer::from_checkpoint_stored(&args.checkpoint)?;
    let dataset = load_dataset(&args.data)?;
    check_geometry(&dataset, trainer.config())?;

    let labels = dataset.labels_from_flag_group(&args.label_prefix)?;
    let clf_cfg = ClassifierConfig {
        widths: parse_widths(&args.clf_widths)?,
        learning_rate: args.clf_learning_rate,
        epochs: args.clf_epochs,
        batch: args.clf_batch,
        seed: args.clf_seed,
        holdout_fraction: args.clf_holdout_fraction,
    };
    let trained = train_classifier(&dataset, &labels, &clf_cfg)?;

    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    rng.set_stream(SAMPLE_STREAM);
    let z = sample_prior::<f32, _>(&mut rng, args.samples, trainer.config().model.latent_dim);
    let samples = decode_chunked(&trainer.vae, &z)?;
    let report = inception_score(&trained.model, &samples, args.splits)?;

    let text = format!(
        "{}classifier_holdout_accuracy: {}\nclassifier_classes: {}\n",
        report.to_text(),
        trained.holdout_accuracy,
        trained.model.classes()
    );
    ensure_dir(&args.out)?;
    fs::write(args.out.join("score.txt"), &text)
        .map_err(|e| Error::io(&args.out.join("score.txt"), e))?;
    trainer.config().write_resolved(&args.out.join(RESOLVED_CONFIG))?;
    print!("{text}");
    Ok(())
}

fn cmd_grad_check(args: GradCheckArgs) -> Result<()> {
    let report = reference_suite()?;
    let text = report.to_text();
    print!("{text}");
    if let Some(out) = &args.out {
        ensure_dir(out)?;
        fs::write(out.join("grad_check.txt"), &text)
            .map_err(|e| Error::io(&out.join("grad_check.txt"), e))?;
    }
    if report.passed() {
        Ok(())
    } else {
        Err(Error::Numeric(format!(
            "gradient suite failed: max relative error {:e} over tolerance {:e}",
            report.max_rel_err(),
            report.tolerance
        )))
    }
}
