//! Command-line surface of the forecaster: dataset synthesis, training,
//! rollout prediction, split evaluation, mask inspection, and a gradient
//! self-check. Every subcommand is seeded and deterministic; `--gate` turns
//! threshold violations into a nonzero exit code.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use fieldcast::dataset::{assign_splits, compute_stats, denormalize, normalize_sequence, Dataset, SplitFractions};
use fieldcast::estimate::{MotionEstimator, VariationalConfig, VariationalEstimator};
use fieldcast::evolve::{rollout, ConvEvolveParams, EvolutionConfig, RolloutConfig};
use fieldcast::io::{load_field, save_field, write_manifest, write_stats, ManifestEntry, NormStats, Split};
use fieldcast::loss::{finite_diff_check, grad_total_loss, total_loss, LossConfig};
use fieldcast::mask::{conflict_mask, splat_energy, ConflictMask, MaskThresholds, SplatMode};
use fieldcast::metrics::evaluate;
use fieldcast::net::{finite_diff_check_net, load_checkpoint, EncDec};
use fieldcast::refine::InpaintRefiner;
use fieldcast::refine::Refiner;
use fieldcast::synth::{synth_sequence, Blob, FlowProgram, SynthSpec, SYNTH_STEP_HOURS};
use fieldcast::tape::Tensor;
use fieldcast::train::{train, MotionSource, PredictorModel, TrainConfig};
use fieldcast::warp::{advect, KernelConfig};
use fieldcast::{ScalarField, Sequence, VectorField};

#[derive(Parser)]
#[command(name = "fieldcast", version, about = "Physics-guided forecasting of gridded scalar fields")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset: FGRD sequences, a manifest, and a stats sidecar.
    Synth(SynthArgs),
    /// Train the forecaster on a dataset manifest.
    Train(TrainArgs),
    /// Roll the forecaster forward from an input window.
    Predict(PredictArgs),
    /// Score rollouts against one dataset split.
    Eval(EvalArgs),
    /// Dump the splat energy and conflict mask of a flow field.
    Mask(MaskArgs),
    /// Compare analytic gradients against central finite differences.
    CheckGrad(CheckGradArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum EstimatorKind {
    /// Per-window variational motion solve.
    Variational,
    /// The learned motion head (needs --model).
    Net,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum RefinerKind {
    /// Deterministic harmonic fill of untrusted pixels.
    Inpaint,
    /// The learned refinement head (needs --model).
    Net,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum FlowKind {
    /// One velocity for every step.
    Constant,
    /// Velocity growing linearly over time.
    Drift,
    /// Rigid rotation around a pivot.
    Rotation,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum EvolutionKind {
    /// Exponential blend of the carried flow into each new estimate.
    Momentum,
    /// Learned convolutional update of the carried flow.
    Conv,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SplatKind {
    Bilinear,
    Nearest,
}

impl From<SplatKind> for SplatMode {
    fn from(kind: SplatKind) -> SplatMode {
        match kind {
            SplatKind::Bilinear => SplatMode::Bilinear,
            SplatKind::Nearest => SplatMode::Nearest,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SplitKind {
    Train,
    Val,
    Test,
}

impl From<SplitKind> for Split {
    fn from(kind: SplitKind) -> Split {
        match kind {
            SplitKind::Train => Split::Train,
            SplitKind::Val => Split::Val,
            SplitKind::Test => Split::Test,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Synth(args) => run_synth(args),
        Command::Train(args) => run_train(args),
        Command::Predict(args) => run_predict(args),
        Command::Eval(args) => run_eval(args),
        Command::Mask(args) => run_mask(args),
        Command::CheckGrad(args) => run_check_grad(args),
    };
    match outcome {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
    /// Sequences to generate.
    #[arg(long, default_value_t = 8)]
    sequences: usize,
    /// Frames per sequence.
    #[arg(long, default_value_t = 12)]
    frames: usize,
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, default_value_t = 64)]
    width: usize,
    /// Gaussian blobs per sequence.
    #[arg(long, default_value_t = 3)]
    blobs: usize,
    /// Diffusion coefficient of the generating process.
    #[arg(long, default_value_t = 0.05)]
    kappa: f64,
    /// Flow program driving the blobs.
    #[arg(long, value_enum, default_value_t = FlowKind::Constant)]
    flow: FlowKind,
    /// Rightward velocity in pixels per step.
    #[arg(long, default_value_t = 0.5, allow_hyphen_values = true)]
    u: f64,
    /// Downward velocity in pixels per step.
    #[arg(long, default_value_t = -0.25, allow_hyphen_values = true)]
    v: f64,
    /// Per-step increment of u (drift flow).
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    du: f64,
    /// Per-step increment of v (drift flow).
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    dv: f64,
    /// Rotation angle per step in radians (rotation flow).
    #[arg(long, default_value_t = 0.05, allow_hyphen_values = true)]
    theta: f64,
    /// Rotation pivot row; defaults to the grid center.
    #[arg(long)]
    pivot_y: Option<f64>,
    /// Rotation pivot column; defaults to the grid center.
    #[arg(long)]
    pivot_x: Option<f64>,
    /// Standard deviation of additive observation noise.
    #[arg(long, default_value_t = 0.0)]
    noise_sigma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Chronological share of sequences assigned to training.
    #[arg(long, default_value_t = 0.85)]
    train_frac: f64,
    /// Chronological share assigned to validation; test takes the rest.
    #[arg(long, default_value_t = 0.05)]
    val_frac: f64,
}

/// Samples blob layouts until one keeps every blob inside the grid over the
/// whole horizon (the generator rejects layouts whose mass would leak).
fn place_blobs(args: &SynthArgs, rng: &mut ChaCha20Rng) -> Result<SynthSpec> {
    let flow = match args.flow {
        FlowKind::Constant => FlowProgram::Constant { u: args.u, v: args.v },
        FlowKind::Drift => FlowProgram::Drift {
            u: args.u,
            v: args.v,
            du: args.du,
            dv: args.dv,
        },
        FlowKind::Rotation => FlowProgram::Rotation {
            pivot_y: args.pivot_y.unwrap_or((args.height as f64 - 1.0) / 2.0),
            pivot_x: args.pivot_x.unwrap_or((args.width as f64 - 1.0) / 2.0),
            theta: args.theta,
        },
    };
    let (h, w) = (args.height as f64, args.width as f64);
    let mut last_err = None;
    for _ in 0..200 {
        let blobs = (0..args.blobs)
            .map(|_| Blob {
                cy: rng.gen_range(0.2 * h..0.8 * h),
                cx: rng.gen_range(0.2 * w..0.8 * w),
                amplitude: rng.gen_range(0.6..1.4),
                sigma: rng.gen_range(1.5..2.5),
            })
            .collect();
        let spec = SynthSpec {
            height: args.height,
            width: args.width,
            blobs,
            flow: flow.clone(),
            kappa: args.kappa,
            frames: args.frames,
            noise_sigma: args.noise_sigma,
        };
        match spec.validate() {
            Ok(()) => return Ok(spec),
            Err(e) => last_err = Some(e),
        }
    }
    Err(last_err.expect("200 failed attempts leave an error")).context(
        "no blob layout fits the grid; enlarge the grid or soften the flow/kappa/frames",
    )
}

fn run_synth(args: SynthArgs) -> Result<ExitCode> {
    if args.sequences == 0 {
        bail!("--sequences must be at least 1");
    }
    let test_frac = 1.0 - args.train_frac - args.val_frac;
    if test_frac < -1e-9 {
        bail!("--train-frac plus --val-frac must not exceed 1");
    }
    fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;

    let mut rng = ChaCha20Rng::seed_from_u64(args.seed);
    let mut sequences = Vec::with_capacity(args.sequences);
    let mut entries = Vec::with_capacity(args.sequences);
    for i in 0..args.sequences {
        let spec = place_blobs(&args, &mut rng).with_context(|| format!("sequence {i}"))?;
        let seq = synth_sequence(&spec, args.seed.wrapping_add(1 + i as u64))?;
        let name = format!("seq_{i:03}.fgrd");
        save_field(args.out.join(&name), &seq)
            .with_context(|| format!("writing {name}"))?;
        entries.push(ManifestEntry {
            path: name,
            start_timestamp: (i * args.frames) as i64 * SYNTH_STEP_HOURS as i64,
            split: Split::Train,
        });
        sequences.push(seq);
    }

    let fractions = SplitFractions {
        train: args.train_frac,
        val: args.val_frac,
        test: test_frac.max(0.0),
    };
    let (n_train, n_val, n_test) = assign_splits(&mut entries, fractions)?;
    write_manifest(args.out.join("manifest.txt"), &entries)?;

    // Entries stay in generation order (timestamps are already increasing),
    // so the first `n_train` sequences are the training split.
    let stats = compute_stats(sequences.iter().take(n_train))?;
    write_stats(args.out.join("stats.txt"), &stats)?;

    println!(
        "wrote {} sequence(s) ({n_train} train / {n_val} val / {n_test} test) to {}",
        args.sequences,
        args.out.display()
    );
    println!(
        "stats: mean {:.6} std {:.6} range [{:.6}, {:.6}]",
        stats.mean, stats.std, stats.min, stats.max
    );
    Ok(ExitCode::SUCCESS)
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset manifest; FGRD paths resolve against its directory.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint file to write.
    #[arg(long, default_value = "model.fckp")]
    out: PathBuf,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 1)]
    batch_size: usize,
    /// Momentum coefficient of the carried flow (momentum evolution).
    #[arg(long, default_value_t = 0.0)]
    beta: f64,
    /// Trusted-pixel share of the data term.
    #[arg(long, default_value_t = 0.9)]
    alpha: f64,
    #[arg(long, default_value_t = 1.0)]
    lambda_div: f64,
    #[arg(long, default_value_t = 0.4)]
    lambda_smooth: f64,
    /// Diffusion coefficient of the advection kernel.
    #[arg(long, default_value_t = 0.0)]
    kappa: f64,
    /// Initialization and shuffle seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Motion source; `variational` freezes the motion head.
    #[arg(long, value_enum, default_value_t = EstimatorKind::Net)]
    estimator: EstimatorKind,
    /// Refinement stage; `inpaint` freezes the generator head.
    #[arg(long, value_enum, default_value_t = RefinerKind::Net)]
    refiner: RefinerKind,
    /// Input frames per sample (ignored with --init).
    #[arg(long, default_value_t = 2)]
    window: usize,
    /// Rollout steps per sample.
    #[arg(long, default_value_t = 4)]
    horizon: usize,
    /// Channel width of the first encoder level (ignored with --init).
    #[arg(long, default_value_t = 8)]
    base_channels: usize,
    /// Evolution rule of the carried flow (ignored with --init).
    #[arg(long, value_enum, default_value_t = EvolutionKind::Momentum)]
    evolution: EvolutionKind,
    /// Hidden width of the conv evolution rule (ignored with --init).
    #[arg(long, default_value_t = 8)]
    hidden: usize,
    /// Resume from this checkpoint instead of fresh initialization.
    #[arg(long)]
    init: Option<PathBuf>,
}

/// Loads a checkpoint, reading the evolution rule off its entries: stored
/// `evolve.*` tensors mean the conv variant (hidden width from the first
/// conv's shape), otherwise momentum with the given coefficient.
fn load_model(path: &Path, beta: f64) -> Result<PredictorModel> {
    let entries = load_checkpoint(path)
        .with_context(|| format!("reading checkpoint {}", path.display()))?;
    let evolution = match entries.iter().find(|(n, _)| n == "evolve.conv1.weight") {
        Some((_, t)) => {
            let hidden = *t.shape().first().context("evolve.conv1.weight has no shape")?;
            let mut rng = ChaCha20Rng::seed_from_u64(0);
            EvolutionConfig::conv(ConvEvolveParams::new(hidden, &mut rng)?)
        }
        None => EvolutionConfig::momentum(beta)?,
    };
    Ok(PredictorModel::load(path, evolution)?)
}

/// Normalization statistics: the sidecar next to the manifest when present,
/// otherwise recomputed from the training split.
fn dataset_stats(manifest: &Path, ds: &Dataset) -> Result<NormStats> {
    let sidecar = manifest.parent().unwrap_or_else(|| Path::new(".")).join("stats.txt");
    if sidecar.is_file() {
        Ok(fieldcast::io::read_stats(&sidecar)?)
    } else {
        Ok(ds.train_stats()?)
    }
}

fn run_train(args: TrainArgs) -> Result<ExitCode> {
    let ds = Dataset::load(&args.data)
        .with_context(|| format!("loading dataset {}", args.data.display()))?;
    let stats = dataset_stats(&args.data, &ds)?;
    let raw = ds.split_sequences(Split::Train);
    if raw.is_empty() {
        bail!("manifest has no training sequences");
    }
    let normalized: Vec<Sequence> = raw
        .iter()
        .map(|s| Ok(normalize_sequence(s, &stats)?))
        .collect::<Result<_>>()?;
    let refs: Vec<&Sequence> = normalized.iter().collect();

    let mut model = match &args.init {
        Some(path) => load_model(path, args.beta)?,
        None => {
            let evolution = match args.evolution {
                EvolutionKind::Momentum => EvolutionConfig::momentum(args.beta)?,
                EvolutionKind::Conv => {
                    let mut rng = ChaCha20Rng::seed_from_u64(args.seed ^ 0x65766f);
                    EvolutionConfig::conv(ConvEvolveParams::new(args.hidden, &mut rng)?)
                }
            };
            PredictorModel::new(args.window, args.base_channels, evolution, args.seed)?
        }
    };

    let cfg = TrainConfig {
        epochs: args.epochs,
        batch_size: args.batch_size,
        learning_rate: args.lr,
        loss: LossConfig {
            lambda_div: args.lambda_div,
            lambda_smooth: args.lambda_smooth,
            alpha: args.alpha,
            ..LossConfig::default()
        },
        kernel: KernelConfig::new(args.kappa),
        window: model.motion.window(),
        horizon: args.horizon,
        motion: match args.estimator {
            EstimatorKind::Net => MotionSource::Net,
            EstimatorKind::Variational => MotionSource::Variational(VariationalConfig::default()),
        },
        seed: args.seed,
        use_generator: args.refiner == RefinerKind::Net,
        ..TrainConfig::default()
    };

    let report = train(&mut model, &refs, &cfg)?;
    for (epoch, loss) in report.epoch_loss.iter().enumerate() {
        println!("epoch {epoch:>4}  loss {loss:.6}");
    }
    if let Some(epoch) = report.diverged_at {
        println!("diverged at epoch {epoch}; restored the last finite parameters");
    }
    model.save(&args.out)?;
    println!("saved checkpoint to {}", args.out.display());
    Ok(ExitCode::SUCCESS)
}

/// Flags shared by the rollout-driving subcommands.
#[derive(Args)]
struct PipelineArgs {
    /// Trained checkpoint (required by the net estimator/refiner).
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = EstimatorKind::Net)]
    estimator: EstimatorKind,
    #[arg(long, value_enum, default_value_t = RefinerKind::Net)]
    refiner: RefinerKind,
    /// Momentum coefficient when the checkpoint stores no conv evolution rule.
    #[arg(long, default_value_t = 0.0)]
    beta: f64,
    /// Diffusion coefficient of the advection kernel.
    #[arg(long, default_value_t = 0.0)]
    kappa: f64,
}

struct Pipeline {
    estimator: Box<dyn MotionEstimator>,
    refiner: Box<dyn Refiner>,
    cfg: RolloutConfig,
}

fn build_pipeline(args: &PipelineArgs) -> Result<Pipeline> {
    let kernel = KernelConfig::new(args.kappa);
    let model = match &args.model {
        Some(path) => Some(load_model(path, args.beta)?),
        None => None,
    };
    let estimator: Box<dyn MotionEstimator> = match args.estimator {
        EstimatorKind::Net => Box::new(
            model
                .as_ref()
                .context("--estimator net needs --model")?
                .net_estimator(),
        ),
        EstimatorKind::Variational => Box::new(VariationalEstimator {
            cfg: VariationalConfig::default(),
            kernel,
        }),
    };
    let refiner: Box<dyn Refiner> = match args.refiner {
        RefinerKind::Net => Box::new(
            model
                .as_ref()
                .context("--refiner net needs --model")?
                .net_refiner(),
        ),
        RefinerKind::Inpaint => Box::new(InpaintRefiner),
    };
    let evolution = match model {
        Some(m) => m.evolution,
        None => EvolutionConfig::momentum(args.beta)?,
    };
    Ok(Pipeline {
        estimator,
        refiner,
        cfg: RolloutConfig {
            evolution,
            kernel,
            ..RolloutConfig::default()
        },
    })
}

#[derive(Args)]
struct PredictArgs {
    /// Input window: an FGRD file whose frames feed the estimator.
    #[arg(long)]
    inputs: PathBuf,
    /// Prediction steps to roll out.
    #[arg(long, default_value_t = 4)]
    horizon: usize,
    /// FGRD file for the predicted frames.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    pipeline: PipelineArgs,
    /// Normalization sidecar applied to inputs and inverted on outputs.
    #[arg(long)]
    stats: Option<PathBuf>,
    /// Directory for per-step composed flows as two-frame FGRD files.
    #[arg(long)]
    dump_flow: Option<PathBuf>,
}

fn flow_to_sequence(flow: &VectorField, step_hours: f64) -> Result<Sequence> {
    let (h, w) = flow.shape();
    let u = ScalarField::from_fn(h, w, |y, x| flow.u(y, x));
    let v = ScalarField::from_fn(h, w, |y, x| flow.v(y, x));
    Ok(Sequence::new(vec![u, v], step_hours)?)
}

fn run_predict(args: PredictArgs) -> Result<ExitCode> {
    let inputs = load_field(&args.inputs)
        .with_context(|| format!("loading {}", args.inputs.display()))?;
    let stats = match &args.stats {
        Some(path) => Some(fieldcast::io::read_stats(path)?),
        None => None,
    };
    let working = match &stats {
        Some(s) => normalize_sequence(&inputs, s)?,
        None => inputs.clone(),
    };
    let pipeline = build_pipeline(&args.pipeline)?;
    let steps = rollout(
        &working,
        pipeline.estimator.as_ref(),
        pipeline.refiner.as_ref(),
        args.horizon,
        &pipeline.cfg,
    )?;

    let mut frames = Vec::with_capacity(steps.len());
    for step in &steps {
        frames.push(match &stats {
            Some(s) => denormalize(&step.refined, s)?,
            None => step.refined.clone(),
        });
    }
    save_field(&args.out, &Sequence::new(frames, inputs.step_hours())?)?;
    println!("wrote {} predicted frame(s) to {}", steps.len(), args.out.display());

    if let Some(dir) = &args.dump_flow {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        for (k, step) in steps.iter().enumerate() {
            let path = dir.join(format!("flow_step_{:02}.fgrd", k + 1));
            save_field(&path, &flow_to_sequence(step.state.composed(), inputs.step_hours())?)?;
        }
        println!("wrote {} composed flow(s) to {}", steps.len(), dir.display());
    }
    Ok(ExitCode::SUCCESS)
}

#[derive(Args)]
struct EvalArgs {
    /// Dataset manifest.
    #[arg(long)]
    data: PathBuf,
    /// Split to score.
    #[arg(long, value_enum, default_value_t = SplitKind::Test)]
    split: SplitKind,
    /// Input frames handed to the estimator.
    #[arg(long, default_value_t = 2)]
    window: usize,
    /// Prediction steps per sequence.
    #[arg(long, default_value_t = 4)]
    horizon: usize,
    #[command(flatten)]
    pipeline: PipelineArgs,
    /// File for the machine-readable key=value report.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Directory for grayscale PNG dumps of predictions and masks.
    #[arg(long)]
    heatmaps: Option<PathBuf>,
    /// Exit nonzero when any threshold below is violated.
    #[arg(long)]
    gate: bool,
    /// Gate: highest acceptable averaged MSE.
    #[arg(long)]
    max_mse: Option<f64>,
    /// Gate: lowest acceptable averaged PSNR in dB.
    #[arg(long)]
    min_psnr: Option<f64>,
    /// Gate: lowest acceptable averaged SSIM.
    #[arg(long)]
    min_ssim: Option<f64>,
    /// Gate: lowest acceptable averaged CORR.
    #[arg(long)]
    min_corr: Option<f64>,
}

/// Renders `field` as a grayscale PNG, mapping `[lo, hi]` onto black..white.
fn save_heatmap(path: &Path, field: &ScalarField, lo: f64, hi: f64) -> Result<()> {
    let (h, w) = field.shape();
    let scale = if hi > lo { 255.0 / (hi - lo) } else { 0.0 };
    let img = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
        let v = (field.get(y as usize, x as usize) - lo) * scale;
        image::Luma([v.clamp(0.0, 255.0) as u8])
    });
    img.save(path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn run_eval(args: EvalArgs) -> Result<ExitCode> {
    if args.gate
        && args.max_mse.is_none()
        && args.min_psnr.is_none()
        && args.min_ssim.is_none()
        && args.min_corr.is_none()
    {
        bail!("--gate needs at least one threshold (--max-mse, --min-psnr, --min-ssim, --min-corr)");
    }
    let ds = Dataset::load(&args.data)
        .with_context(|| format!("loading dataset {}", args.data.display()))?;
    let stats = dataset_stats(&args.data, &ds)?;
    let split: Split = args.split.into();
    let sequences = ds.split_sequences(split);
    if sequences.is_empty() {
        bail!("manifest has no {} sequences", split.as_str());
    }
    let pipeline = build_pipeline(&args.pipeline)?;

    // Metrics run in physical units: the forecaster normalizes its inputs
    // and its predictions are mapped back before scoring.
    let report = evaluate(
        &sequences,
        args.window,
        args.horizon,
        stats.range(),
        |frames| {
            let window = Sequence::new(
                frames
                    .iter()
                    .map(|f| fieldcast::dataset::normalize(f, &stats))
                    .collect::<fieldcast::Result<_>>()?,
                SYNTH_STEP_HOURS,
            )?;
            let steps = rollout(
                &window,
                pipeline.estimator.as_ref(),
                pipeline.refiner.as_ref(),
                args.horizon,
                &pipeline.cfg,
            )?;
            steps.iter().map(|s| denormalize(&s.refined, &stats)).collect()
        },
    )?;

    print!("{}", report.render_text());
    let key_values = report.render_key_values();
    match &args.report {
        Some(path) => {
            fs::write(path, &key_values).with_context(|| format!("writing {}", path.display()))?;
            println!("wrote key=value report to {}", path.display());
        }
        None => {
            println!();
            print!("{key_values}");
        }
    }

    if let Some(dir) = &args.heatmaps {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let first = sequences[0];
        let window = Sequence::new(
            first.frames()[..args.window]
                .iter()
                .map(|f| fieldcast::dataset::normalize(f, &stats))
                .collect::<fieldcast::Result<_>>()?,
            first.step_hours(),
        )?;
        let steps = rollout(
            &window,
            pipeline.estimator.as_ref(),
            pipeline.refiner.as_ref(),
            args.horizon,
            &pipeline.cfg,
        )?;
        for (k, step) in steps.iter().enumerate() {
            let pred = denormalize(&step.refined, &stats)?;
            save_heatmap(&dir.join(format!("step{:02}_pred.png", k + 1)), &pred, stats.min, stats.max)?;
            save_heatmap(&dir.join(format!("step{:02}_mask.png", k + 1)), step.mask.grid(), 0.0, 1.0)?;
        }
        println!("wrote {} heatmap pair(s) to {}", steps.len(), dir.display());
    }

    let a = &report.averaged;
    let mut violations = Vec::new();
    if let Some(t) = args.max_mse {
        if !(a.mse <= t) {
            violations.push(format!("averaged mse {} exceeds {t}", a.mse));
        }
    }
    if let Some(t) = args.min_psnr {
        if !(a.psnr >= t) {
            violations.push(format!("averaged psnr {} falls below {t}", a.psnr));
        }
    }
    if let Some(t) = args.min_ssim {
        if !(a.ssim >= t) {
            violations.push(format!("averaged ssim {} falls below {t}", a.ssim));
        }
    }
    if let Some(t) = args.min_corr {
        if !(a.corr >= t) {
            violations.push(format!("averaged corr {} falls below {t}", a.corr));
        }
    }
    for v in &violations {
        println!("GATE: {v}");
    }
    if args.gate && !violations.is_empty() {
        return Ok(ExitCode::FAILURE);
    }
    Ok(ExitCode::SUCCESS)
}

#[derive(Args)]
struct MaskArgs {
    /// Flow to inspect: a two-frame FGRD file (u component, then v).
    #[arg(long)]
    flow: PathBuf,
    /// Directory for energy.fgrd and mask.fgrd.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = SplatKind::Bilinear)]
    splat: SplatKind,
    /// Energy at or below this marks a gap.
    #[arg(long, default_value_t = MaskThresholds::default().tau_low)]
    tau_low: f64,
    /// Energy at or above this marks a collision.
    #[arg(long, default_value_t = MaskThresholds::default().tau_high)]
    tau_high: f64,
}

fn run_mask(args: MaskArgs) -> Result<ExitCode> {
    let seq = load_field(&args.flow)
        .with_context(|| format!("loading {}", args.flow.display()))?;
    if seq.len() != 2 {
        bail!(
            "{} holds {} frame(s); a flow needs exactly two (u, then v)",
            args.flow.display(),
            seq.len()
        );
    }
    let (h, w) = seq.shape();
    let flow = VectorField::from_components(
        h,
        w,
        seq.frames()[0].data().to_vec(),
        seq.frames()[1].data().to_vec(),
    )?;
    let energy = splat_energy(&flow, args.splat.into());
    let thresholds = MaskThresholds {
        tau_low: args.tau_low,
        tau_high: args.tau_high,
    };
    let mask = conflict_mask(&energy, &thresholds)?;

    fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    save_field(
        args.out.join("energy.fgrd"),
        &Sequence::new(vec![energy.grid().clone()], seq.step_hours())?,
    )?;
    save_field(
        args.out.join("mask.fgrd"),
        &Sequence::new(vec![mask.grid().clone()], seq.step_hours())?,
    )?;
    println!(
        "splat energy: {:.3} of {:.0} units discarded off-grid",
        energy.discarded(),
        energy.total()
    );
    println!(
        "mask: {:.1}% of pixels trusted; wrote energy.fgrd and mask.fgrd to {}",
        100.0 * mask.fraction_trusted(),
        args.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

#[derive(Args)]
struct CheckGradArgs {
    /// Random instances per suite.
    #[arg(long, default_value_t = 10)]
    instances: usize,
    /// Grid side of each instance.
    #[arg(long, default_value_t = 8)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Enforce the thresholds (1e-4 objective, 1e-3 network).
    #[arg(long)]
    gate: bool,
}

const OBJECTIVE_TOLERANCE: f64 = 1e-4;
const NETWORK_TOLERANCE: f64 = 1e-3;

fn run_check_grad(args: CheckGradArgs) -> Result<ExitCode> {
    if args.instances == 0 {
        bail!("--instances must be at least 1");
    }
    if args.size < 8 || args.size % 8 != 0 {
        bail!("--size must be a positive multiple of 8");
    }
    let mut rng = ChaCha20Rng::seed_from_u64(args.seed);
    let n = args.size;
    let kernel = KernelConfig::new(0.1);
    let loss_cfg = LossConfig::default();

    let mut worst_objective: f64 = 0.0;
    for _ in 0..args.instances {
        let target = ScalarField::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        let source = ScalarField::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        let flow = VectorField::from_fn(n, n, |_, _| {
            (rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5))
        });
        let mask = ConflictMask::from_field(ScalarField::from_fn(n, n, |_, _| {
            if rng.gen_bool(0.8) {
                1.0
            } else {
                0.0
            }
        }))?;
        let (_, grad) = grad_total_loss(&target, &source, &flow, &mask, &loss_cfg, &kernel)?;
        let objective = |candidate: &VectorField| {
            let pred = advect(&source, candidate, &kernel).expect("advect on checked shapes");
            total_loss(&target, &pred, &mask, candidate, &loss_cfg)
                .expect("loss on checked shapes")
                .total
        };
        worst_objective = worst_objective.max(finite_diff_check(objective, &grad, &flow, 1e-5)?);
    }
    println!(
        "objective gradient: worst relative error {worst_objective:.3e} over {} instance(s) (threshold {OBJECTIVE_TOLERANCE:.0e})",
        args.instances
    );

    let mut worst_network: f64 = 0.0;
    for i in 0..args.instances {
        let mut net_rng = ChaCha20Rng::seed_from_u64(args.seed.wrapping_add(1 + i as u64));
        let mut net = EncDec::new(2, 1, 2, &mut net_rng)?;
        // Fresh nets carry all-zero biases, which leave every dead
        // receptive field exactly on the ReLU kink where a central
        // difference is undefined; offsetting the biases moves the probe
        // to a point where the network is differentiable.
        let mut entries = net.checkpoint_entries("fd");
        for (name, t) in entries.iter_mut() {
            if name.ends_with(".bias") {
                for v in t.data_mut() {
                    *v += net_rng.gen_range(0.01..0.05);
                }
            }
        }
        net.load_checkpoint_entries("fd", &entries)?;
        let input = Tensor::from_data(
            &[2, n, n],
            (0..2 * n * n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        );
        let upstream = Tensor::from_data(
            &[1, n, n],
            (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        );
        worst_network = worst_network.max(finite_diff_check_net(&net, &input, &upstream, 1e-5)?);
    }
    println!(
        "network backward: worst relative error {worst_network:.3e} over {} instance(s) (threshold {NETWORK_TOLERANCE:.0e})",
        args.instances
    );

    let objective_ok = worst_objective <= OBJECTIVE_TOLERANCE;
    let network_ok = worst_network <= NETWORK_TOLERANCE;
    if !objective_ok {
        println!("GATE: objective gradient error exceeds {OBJECTIVE_TOLERANCE:.0e}");
    }
    if !network_ok {
        println!("GATE: network backward error exceeds {NETWORK_TOLERANCE:.0e}");
    }
    if args.gate && !(objective_ok && network_ok) {
        return Ok(ExitCode::FAILURE);
    }
    Ok(ExitCode::SUCCESS)
}
