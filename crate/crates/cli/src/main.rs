use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use slickmem_core::fusion::FusionMode;
use slickmem_core::memory::BankLayout;
use slickmem_core::metrics::{ConfusionCounts, MiouPolicy};
use slickmem_core::pipeline::{
    ablate, build_decoder, mask_path, run_log_path, run_stream, DecoderSource, GatingMode, PipelineConfig,
    TrainSpec,
};
use slickmem_core::scene::{load_mask, synth_stream, StreamSpec, SynthSpec};

#[derive(Parser)]
#[command(
    name = "slickmem",
    version,
    about = "Memory-augmented SAR oil-spill segmentation over image streams"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic drift stream (images, masks, prompts, stream.toml).
    Synth(SynthArgs),
    /// Process a stream, writing a run log and predicted masks.
    Run(RunArgs),
    /// Score stored masks against a stream's ground truth.
    Eval(EvalArgs),
    /// Run the eight component combinations on one stream.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 17)]
    seed: u64,
    #[arg(long, default_value_t = 200)]
    images: usize,
    /// Keep regime segments contiguous instead of shuffling them together.
    #[arg(long)]
    no_interleave: bool,
    #[arg(long)]
    no_prompts: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum FusionArg {
    Adaptive,
    Uniform,
}

#[derive(Clone, Copy, ValueEnum)]
enum GatingArg {
    Gated,
    Always,
    Never,
}

#[derive(Clone, Copy, ValueEnum)]
enum BankArg {
    Multi,
    Merged,
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyArg {
    Exclude,
    Zero,
}

impl From<PolicyArg> for MiouPolicy {
    fn from(p: PolicyArg) -> Self {
        match p {
            PolicyArg::Exclude => MiouPolicy::ExcludeUndefined,
            PolicyArg::Zero => MiouPolicy::UndefinedAsZero,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum DecoderArg {
    Random,
    File,
    Train,
}

/// Pipeline settings. A `--config` TOML file is read first; any flag given
/// here overrides it.
#[derive(Args, Default)]
struct ConfigArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    cap_tex: Option<usize>,
    #[arg(long)]
    cap_str: Option<usize>,
    #[arg(long)]
    cap_sem: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    tau_sem: Option<f64>,
    #[arg(long)]
    tau_str: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Two comma-separated weights, background then oil.
    #[arg(long, value_delimiter = ',', num_args = 2)]
    class_weights: Option<Vec<f64>>,
    #[arg(long)]
    adapter_gain: Option<f64>,
    #[arg(long, value_enum)]
    fusion: Option<FusionArg>,
    #[arg(long, value_enum)]
    gating: Option<GatingArg>,
    #[arg(long, value_enum)]
    bank: Option<BankArg>,
    /// Clear the memory bank before every image.
    #[arg(long)]
    reset_memory: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    miou_policy: Option<PolicyArg>,
    #[arg(long)]
    no_calibration: bool,
    #[arg(long)]
    calibration_images: Option<usize>,
    #[arg(long)]
    calibration_seed: Option<u64>,
    #[arg(long, value_enum)]
    decoder: Option<DecoderArg>,
    #[arg(long)]
    decoder_seed: Option<u64>,
    #[arg(long)]
    decoder_scale: Option<f64>,
    #[arg(long)]
    decoder_path: Option<PathBuf>,
    #[arg(long)]
    train_images: Option<usize>,
    #[arg(long)]
    train_seed: Option<u64>,
    #[arg(long)]
    train_steps: Option<usize>,
    #[arg(long)]
    train_lr: Option<f64>,
    #[arg(long)]
    train_rounds: Option<usize>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                let mut cfg = PipelineConfig::from_toml(&text)?;
                if let DecoderSource::File { path: p } = &mut cfg.decoder {
                    if p.is_relative() {
                        *p = path.parent().unwrap_or(Path::new(".")).join(&*p);
                    }
                }
                cfg
            }
            None => PipelineConfig::default(),
        };
        macro_rules! set {
            ($field:expr, $value:expr) => {
                if let Some(v) = $value {
                    $field = v;
                }
            };
        }
        set!(cfg.d, self.d);
        set!(cfg.capacities.texture, self.cap_tex);
        set!(cfg.capacities.structure, self.cap_str);
        set!(cfg.capacities.semantic, self.cap_sem);
        set!(cfg.k, self.k);
        set!(cfg.thresholds.tau_sem, self.tau_sem);
        set!(cfg.thresholds.tau_str, self.tau_str);
        set!(cfg.thresholds.alpha, self.alpha);
        set!(cfg.class_weights, self.class_weights.clone());
        set!(cfg.adapter_gain, self.adapter_gain);
        set!(cfg.seed, self.seed);
        set!(cfg.calibration.images, self.calibration_images);
        set!(cfg.calibration.seed, self.calibration_seed);
        if self.no_calibration {
            cfg.calibration.enabled = false;
        }
        if self.reset_memory {
            cfg.persist_memory = false;
        }
        set!(cfg.miou_policy, self.miou_policy.map(Into::into));
        set!(
            cfg.switches.fusion,
            self.fusion.map(|f| match f {
                FusionArg::Adaptive => FusionMode::Adaptive,
                FusionArg::Uniform => FusionMode::Uniform,
            })
        );
        set!(
            cfg.switches.gating,
            self.gating.map(|g| match g {
                GatingArg::Gated => GatingMode::Gated,
                GatingArg::Always => GatingMode::Always,
                GatingArg::Never => GatingMode::Never,
            })
        );
        set!(
            cfg.switches.bank,
            self.bank.map(|b| match b {
                BankArg::Multi => BankLayout::Multi,
                BankArg::Merged => BankLayout::Merged,
            })
        );
        self.apply_decoder(&mut cfg)?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply_decoder(&self, cfg: &mut PipelineConfig) -> Result<()> {
        match self.decoder {
            Some(DecoderArg::Random) if !matches!(cfg.decoder, DecoderSource::Random { .. }) => {
                cfg.decoder = DecoderSource::Random {
                    seed: cfg.seed,
                    scale: 0.1,
                };
            }
            Some(DecoderArg::File) => {
                let path = self
                    .decoder_path
                    .clone()
                    .or(match &cfg.decoder {
                        DecoderSource::File { path } => Some(path.clone()),
                        _ => None,
                    })
                    .context("--decoder file needs --decoder-path")?;
                cfg.decoder = DecoderSource::File { path };
            }
            Some(DecoderArg::Train) if !matches!(cfg.decoder, DecoderSource::Train(_)) => {
                cfg.decoder = DecoderSource::Train(TrainSpec::default());
            }
            _ => {}
        }
        match &mut cfg.decoder {
            DecoderSource::Random { seed, scale } => {
                set_opt(seed, self.decoder_seed);
                set_opt(scale, self.decoder_scale);
                self.reject_train_flags("random")?;
            }
            DecoderSource::File { path } => {
                set_opt(path, self.decoder_path.clone());
                self.reject_train_flags("file")?;
            }
            DecoderSource::Train(t) => {
                set_opt(&mut t.images, self.train_images);
                set_opt(&mut t.seed, self.train_seed);
                set_opt(&mut t.steps, self.train_steps);
                set_opt(&mut t.lr, self.train_lr);
                set_opt(&mut t.rounds, self.train_rounds);
                if self.decoder_seed.is_some() || self.decoder_scale.is_some() {
                    bail!("--decoder-seed/--decoder-scale apply to the random decoder only");
                }
            }
        }
        Ok(())
    }

    fn reject_train_flags(&self, source: &str) -> Result<()> {
        if self.train_images.is_some()
            || self.train_seed.is_some()
            || self.train_steps.is_some()
            || self.train_lr.is_some()
            || self.train_rounds.is_some()
        {
            bail!("--train-* flags do not apply to the {source} decoder");
        }
        Ok(())
    }
}

fn set_opt<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

#[derive(Args)]
struct RunArgs {
    /// Stream description (stream.toml).
    #[arg(long)]
    stream: PathBuf,
    /// Output directory for runlog.jsonl and masks/.
    #[arg(long)]
    out: PathBuf,
    /// Also write the resolved decoder parameters here.
    #[arg(long)]
    save_decoder: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    stream: PathBuf,
    /// Directory holding `<image_id>.pgm` predictions (e.g. a run's masks/).
    #[arg(long)]
    masks: PathBuf,
    #[arg(long, value_enum, default_value = "exclude")]
    miou_policy: PolicyArg,
    /// Print JSON instead of a table.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct AblateArgs {
    /// Stream to evaluate on; defaults to a synthetic drift stream.
    #[arg(long)]
    stream: Option<PathBuf>,
    #[arg(long, default_value_t = 17)]
    synth_seed: u64,
    #[arg(long, default_value_t = 200)]
    synth_images: usize,
    #[arg(long)]
    json: bool,
    #[command(flatten)]
    config: ConfigArgs,
}

fn synth(args: &SynthArgs) -> Result<()> {
    let spec = SynthSpec {
        interleave: !args.no_interleave,
        prompts: !args.no_prompts,
        ..SynthSpec::standard_drift(args.seed, args.images)
    };
    let frames = synth_stream(&spec)?;
    StreamSpec::write_frames(&args.out, Some(&spec), &frames)?;
    println!(
        "{}",
        serde_json::json!({ "stream": args.out.join("stream.toml"), "images": frames.len() })
    );
    Ok(())
}

fn run(args: &RunArgs) -> Result<()> {
    let cfg = args.config.resolve()?;
    let (spec, base) = StreamSpec::load(&args.stream)?;
    let decoder = build_decoder(&cfg)?;
    if let Some(path) = &args.save_decoder {
        fs::write(path, decoder.dump()).with_context(|| format!("writing {}", path.display()))?;
    }
    let summary = run_stream(&spec, &base, &cfg, &decoder, &args.out)?;
    println!(
        "{}",
        serde_json::json!({
            "images": summary.images,
            "commits": summary.commits,
            "miou": summary.miou(),
            "runlog": run_log_path(&args.out),
        })
    );
    Ok(())
}

fn eval(args: &EvalArgs) -> Result<()> {
    let (spec, base) = StreamSpec::load(&args.stream)?;
    let mut counts = ConfusionCounts::new(spec.num_classes)?;
    for item in &spec.items {
        let truth_path = item
            .mask
            .as_ref()
            .with_context(|| format!("stream item {} has no ground-truth mask", item.image_id))?;
        let truth = load_mask(base.join(truth_path), spec.num_classes)?;
        // masks_dir/<id>.pgm, or a run directory holding masks/<id>.pgm
        let direct = args.masks.join(format!("{}.pgm", item.image_id));
        let pred_path = if direct.exists() {
            direct
        } else {
            mask_path(&args.masks, &item.image_id)
        };
        let pred = load_mask(&pred_path, spec.num_classes)?;
        counts
            .accumulate(&pred, &truth)
            .with_context(|| format!("image {}", item.image_id))?;
    }
    let report = counts.report(args.miou_policy.into());
    if args.json {
        println!("{}", serde_json::to_string(&report)?);
    } else {
        print!("{}", report.to_table());
    }
    Ok(())
}

fn ablate_cmd(args: &AblateArgs) -> Result<()> {
    let cfg = args.config.resolve()?;
    let frames = match &args.stream {
        Some(path) => {
            let (spec, base) = StreamSpec::load(path)?;
            spec.load_frames(&base)?
        }
        None => synth_stream(&SynthSpec::standard_drift(args.synth_seed, args.synth_images))?,
    };
    let report = ablate(&frames, &cfg)?;
    if args.json {
        println!("{}", serde_json::to_string(&report)?);
    } else {
        print!("{}", report.to_table());
    }
    Ok(())
}

fn error_record(err: &anyhow::Error) -> serde_json::Value {
    let core = err.chain().find_map(|e| e.downcast_ref::<slickmem_core::Error>());
    // core error messages already embed their source
    let mut message = String::new();
    for e in err.chain() {
        let text = e.to_string();
        if !message.contains(&text) {
            if !message.is_empty() {
                message.push_str(": ");
            }
            message.push_str(&text);
        }
    }
    serde_json::json!({
        "error": message,
        "kind": core.map_or("usage", |e| e.kind()),
        "image_id": core.and_then(|e| e.image_id()),
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Synth(a) => synth(a),
        Command::Run(a) => run(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_record(&e));
            ExitCode::FAILURE
        }
    }
}
