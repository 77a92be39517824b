use std::path::{Path, PathBuf};
use std::process::ExitCode;

use almrr::numeric::{DType, Real};
use almrr::pipeline::dataset::load_train_images;
use almrr::pipeline::infer::{collect_images, InferOptions};
use almrr::pipeline::{self, CorpusSpec, Layout, Model, RunConfig};
use almrr::{metrics, Error, Result};
use clap::{Args, Parser, Subcommand};

const DATA_ROOT_ENV: &str = "ALMRR_DATA_ROOT";

/// Anomaly localization by feature reconstruction and refinement.
#[derive(Parser)]
#[command(name = "almrr", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model per category.
    Train(TrainArgs),
    /// Write anomaly heatmaps and image scores for an image or directory.
    Infer(InferArgs),
    /// Compute image AUROC, pixel AUROC and pixel AP per category.
    Eval(EvalArgs),
    /// Generate the procedural texture corpus in MVTec layout.
    SynthCorpus(CorpusArgs),
    /// Time the reconstruction module per image.
    BenchScan(BenchArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// key = value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration key (repeatable), e.g. `--set epochs=10`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn build(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        for kv in &self.overrides {
            let (k, v) = kv.split_once('=').ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
            cfg.set(k, v)?;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct DataArgs {
    /// Dataset root; defaults to $ALMRR_DATA_ROOT.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value = "mvtec")]
    layout: String,
    /// Restrict to these categories (repeatable).
    #[arg(long)]
    category: Vec<String>,
}

impl DataArgs {
    fn ingest(&self) -> Result<pipeline::DatasetHandle> {
        let root = match &self.data {
            Some(p) => p.clone(),
            None => std::env::var_os(DATA_ROOT_ENV)
                .map(PathBuf::from)
                .ok_or_else(|| Error::Config(format!("no --data given and ${DATA_ROOT_ENV} is unset")))?,
        };
        let mut handle = pipeline::ingest(&root, self.layout.parse::<Layout>()?)?;
        if !self.category.is_empty() {
            for c in &self.category {
                handle.category(c)?;
            }
            handle.categories.retain(|c| self.category.contains(&c.name));
        }
        Ok(handle)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    config: ConfigArgs,
    /// Output directory; one subdirectory per category.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    /// Train on the reconstruction loss only and score by feature distance.
    #[arg(long)]
    no_frm: bool,
    #[arg(long)]
    recon_arch: Option<String>,
    /// Directory of texture images used instead of the procedural bank.
    #[arg(long)]
    texture_dir: Option<PathBuf>,
    /// Single-threaded execution for bit-exact reproduction.
    #[arg(long)]
    strict_deterministic: bool,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Image file or directory of images.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Also write color overlays.
    #[arg(long)]
    overlay: bool,
    /// Gaussian blur sigma applied to written heatmaps only.
    #[arg(long)]
    blur: Option<f64>,
    /// Expected configuration; the checkpoint must match its shapes.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Checkpoint file, or a directory holding `<category>/model.almr`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Also write the report as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct CorpusArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 128)]
    size: usize,
    #[arg(long, default_value_t = 64)]
    train: usize,
    #[arg(long, default_value_t = 20)]
    test_good: usize,
    #[arg(long, default_value_t = 20)]
    test_anomalous: usize,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Benchmark a trained checkpoint instead of a fresh model.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    runs: usize,
}

fn run_train<T: Real>(args: &TrainArgs, cfg: &RunConfig) -> Result<()> {
    let data = args.data.ingest()?;
    for cat in &data.categories {
        let images = load_train_images(cat, cfg.image_size)?;
        let dir = args.out.join(&cat.name);
        log::info!("training {} on {} images", cat.name, images.len());
        let outcome = pipeline::train::<T>(cfg, &images, Some(&dir))?;
        println!("{}: {} steps, checkpoint {}", cat.name, outcome.log.len(), dir.join("model.almr").display());
    }
    Ok(())
}

fn train(args: TrainArgs) -> Result<()> {
    let mut cfg = args.config.build()?;
    if let Some(e) = args.epochs {
        cfg.epochs = e;
    }
    if args.no_frm {
        cfg.frm_enabled = false;
    }
    if let Some(a) = &args.recon_arch {
        cfg.set("recon_arch", a)?;
    }
    if let Some(t) = &args.texture_dir {
        cfg.texture_dir = Some(t.to_string_lossy().into_owned());
    }
    cfg.strict_deterministic |= args.strict_deterministic;
    cfg.validate()?;
    match cfg.precision {
        DType::F32 => run_train::<f32>(&args, &cfg),
        DType::F64 => run_train::<f64>(&args, &cfg),
    }
}

fn run_infer<T: Real>(args: &InferArgs, ckpt: &pipeline::Checkpoint, expected: Option<&RunConfig>) -> Result<()> {
    let model = Model::<T>::from_checkpoint(ckpt, expected)?;
    let images = collect_images(&args.input, model.config.image_size)?;
    let opts = InferOptions { overlay: args.overlay, blur_sigma: args.blur };
    let scores = pipeline::infer_images(&model, &images, &args.out, opts)?;
    for (id, s) in scores {
        println!("{id}\t{s:.6}");
    }
    Ok(())
}

fn infer(args: InferArgs) -> Result<()> {
    let expected = args.config.as_deref().map(RunConfig::from_file).transpose()?;
    let ckpt = pipeline::Checkpoint::load(&args.checkpoint)?;
    match pipeline::infer::checkpoint_dtype(&ckpt) {
        DType::F32 => run_infer::<f32>(&args, &ckpt, expected.as_ref()),
        DType::F64 => run_infer::<f64>(&args, &ckpt, expected.as_ref()),
    }
}

fn eval(args: EvalArgs) -> Result<()> {
    let data = args.data.ingest()?;
    let reports = pipeline::evaluate(&data, &args.checkpoint)?;
    print!("{}", metrics::to_table(&reports));
    if let Some(p) = &args.csv {
        std::fs::write(p, metrics::to_csv(&reports))?;
    }
    Ok(())
}

fn synth_corpus(args: CorpusArgs) -> Result<()> {
    std::fs::create_dir_all(&args.out)?;
    let spec = CorpusSpec { image_size: args.size, train: args.train, test_good: args.test_good, test_anomalous: args.test_anomalous };
    let m = pipeline::make_synth_corpus(&args.out, args.seed, spec)?;
    println!("wrote {} images to {}", m.entries.len(), args.out.display());
    Ok(())
}

fn run_bench<T: Real>(model: &Model<T>, runs: usize) -> Result<()> {
    let r = pipeline::bench_scan(model, runs, model.config.seed)?;
    println!("runs,mean_s,min_s,max_s,scan_mean_s");
    println!("{},{:.6},{:.6},{:.6},{:.6}", r.runs, r.mean_ms / 1e3, r.min_ms / 1e3, r.max_ms / 1e3, r.scan_mean_ms / 1e3);
    Ok(())
}

fn bench(args: BenchArgs) -> Result<()> {
    if let Some(p) = &args.checkpoint {
        let ckpt = pipeline::Checkpoint::load(p)?;
        return match pipeline::infer::checkpoint_dtype(&ckpt) {
            DType::F32 => run_bench(&Model::<f32>::from_checkpoint(&ckpt, None)?, args.runs),
            DType::F64 => run_bench(&Model::<f64>::from_checkpoint(&ckpt, None)?, args.runs),
        };
    }
    let cfg = args.config.build()?;
    match cfg.precision {
        DType::F32 => run_bench(&Model::<f32>::new(cfg)?, args.runs),
        DType::F64 => run_bench(&Model::<f64>::new(cfg)?, args.runs),
    }
}

fn exists_or_usage(p: &Path) -> Result<()> {
    if p.exists() {
        Ok(())
    } else {
        Err(Error::DataContract(format!("{} does not exist", p.display())))
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Infer(a) => exists_or_usage(&a.checkpoint).and_then(|_| infer(a)),
        Command::Eval(a) => eval(a),
        Command::SynthCorpus(a) => synth_corpus(a),
        Command::BenchScan(a) => bench(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
