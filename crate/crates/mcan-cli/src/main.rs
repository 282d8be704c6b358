//! `mcan` — the full pipeline as one executable: synthetic data generation,
//! training, evaluation, fill-in-the-blank scoring, conditional
//! recommendation and artifact inspection.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data or
//! validation error, 3 runtime error. All randomness derives from the
//! global `--seed` through per-stage labels, so re-running any subcommand
//! with the same seed reproduces its outputs byte for byte.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mcan::data::{load_dataset, save_dataset, Granularity, Split};
use mcan::evaluator::{
    build_fitb, evaluate, fitb_accuracy, report_lines, report_to_string, save_report, shuffle_eval,
    ReportLine,
};
use mcan::model::{ModelConfig, PoolSet};
use mcan::objectives::{LossWeights, SamplingLevel};
use mcan::recommender::{complete_outfit, completion_to_string, load_query};
use mcan::seeding::derive_seed;
use mcan::syngen::{generate, save_latent, GenConfig};
use mcan::trainer::{load_checkpoint, save_checkpoint, train, LrDecay, TrainConfig};

#[derive(Parser)]
#[command(name = "mcan", version, about = "Tuple-compatibility outfit recommendation pipeline")]
struct Cli {
    /// Root seed; every stage derives its own labeled sub-seed from it.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Suppress the resolved-configuration echo and progress lines.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with planted compatibility structure.
    Gen(GenArgs),
    /// Train a model on a dataset's train split.
    Train(TrainArgs),
    /// Evaluate FITB accuracy and compatibility AUC, writing a report.
    Eval(EvalArgs),
    /// Build and answer fill-in-the-blank questions, printing accuracy.
    Fitb(FitbArgs),
    /// Complete a partial outfit described by a query file.
    Recommend(RecommendArgs),
    /// Print dataset and checkpoint summaries.
    Inspect(InspectArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Output dataset path.
    #[arg(long)]
    out: PathBuf,
    /// Output latent-record path (defaults to `<out>.latent`).
    #[arg(long)]
    latent_out: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    num_coarse: usize,
    #[arg(long, default_value_t = 2)]
    fines_per_coarse: usize,
    #[arg(long, default_value_t = 16)]
    items_per_fine: usize,
    #[arg(long, default_value_t = 200)]
    num_outfits: usize,
    #[arg(long, default_value_t = 4)]
    outfit_len: usize,
    #[arg(long, default_value_t = 3)]
    style_dim: usize,
    #[arg(long, default_value_t = 8)]
    d_img: usize,
    #[arg(long, default_value_t = 0.05)]
    noise_sigma: f64,
}

#[derive(Args)]
struct TrainArgs {
    /// Input dataset path.
    #[arg(long)]
    data: PathBuf,
    /// Output checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Optional training-log path (line-delimited epoch records).
    #[arg(long)]
    log_out: Option<PathBuf>,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    #[arg(long, default_value_t = 20)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.05)]
    mu: f64,
    #[arg(long, default_value_t = 0.1)]
    lambda1: f64,
    #[arg(long, default_value_t = 0.1)]
    lambda2: f64,
    /// Compatibility-space dimension.
    #[arg(long, default_value_t = 512)]
    d: usize,
    /// Category-embedding width.
    #[arg(long, default_value_t = 64)]
    d_c: usize,
    /// Hidden width of the attention, mixer and scorer nets.
    #[arg(long, default_value_t = 128)]
    hidden: usize,
    /// Remove the category prediction heads (the MAN ablation).
    #[arg(long)]
    no_cpl: bool,
    /// Disable the triplet loss term.
    #[arg(long)]
    no_triplet: bool,
    /// Granularity the triplet loss runs at.
    #[arg(long, default_value = "fine", value_parser = parse_granularity)]
    triplet_granularity: Granularity,
    /// Subsample training softmax denominators to this many candidates.
    #[arg(long)]
    sample_k: Option<usize>,
    /// Run a validation FITB pass every N epochs (0 = never).
    #[arg(long, default_value_t = 0)]
    eval_every: usize,
    /// Decay the learning rate every N epochs.
    #[arg(long)]
    lr_decay_every: Option<usize>,
    /// Multiplicative decay factor used with --lr-decay-every.
    #[arg(long, default_value_t = 0.5)]
    lr_decay_factor: f64,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Report output path.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "test", value_parser = parse_split)]
    split: Split,
    /// Comma-separated difficulty levels.
    #[arg(long, default_value = "easy,semi_hard,hard", value_delimiter = ',', value_parser = parse_level)]
    levels: Vec<SamplingLevel>,
    /// Also evaluate with each outfit's tuples jointly permuted.
    #[arg(long)]
    shuffled: bool,
    #[arg(long, default_value = "fine", value_parser = parse_granularity)]
    granularity: Granularity,
}

#[derive(Args)]
struct FitbArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "test", value_parser = parse_split)]
    split: Split,
    #[arg(long, default_value = "easy", value_parser = parse_level)]
    level: SamplingLevel,
    #[arg(long, default_value = "fine", value_parser = parse_granularity)]
    granularity: Granularity,
}

#[derive(Args)]
struct RecommendArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Query document path.
    #[arg(long)]
    query: PathBuf,
    /// Write the completion here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

fn parse_granularity(s: &str) -> Result<Granularity, String> {
    Granularity::parse(s).ok_or_else(|| format!("expected fine or coarse, got {s:?}"))
}

fn parse_split(s: &str) -> Result<Split, String> {
    Split::parse(s).ok_or_else(|| format!("expected train, val, test or none, got {s:?}"))
}

fn parse_level(s: &str) -> Result<SamplingLevel, String> {
    SamplingLevel::parse(s).ok_or_else(|| format!("expected easy, semi_hard or hard, got {s:?}"))
}

/// Failure with the exit code it maps to.
struct AppError {
    code: u8,
    message: String,
}

impl AppError {
    fn usage(message: impl Into<String>) -> Self {
        AppError {
            code: 1,
            message: message.into(),
        }
    }

    fn data(message: impl Into<String>) -> Self {
        AppError {
            code: 2,
            message: message.into(),
        }
    }

    fn runtime(message: impl Into<String>) -> Self {
        AppError {
            code: 3,
            message: message.into(),
        }
    }
}

impl From<mcan::data::DataError> for AppError {
    fn from(e: mcan::data::DataError) -> Self {
        match e {
            mcan::data::DataError::Io(io) => AppError::runtime(io.to_string()),
            other => AppError::data(other.to_string()),
        }
    }
}

impl From<mcan::syngen::SynError> for AppError {
    fn from(e: mcan::syngen::SynError) -> Self {
        match e {
            mcan::syngen::SynError::Config(m) => AppError::usage(format!("config: {m}")),
            mcan::syngen::SynError::Io(io) => AppError::runtime(io.to_string()),
            other => AppError::data(other.to_string()),
        }
    }
}

impl From<mcan::trainer::TrainError> for AppError {
    fn from(e: mcan::trainer::TrainError) -> Self {
        use mcan::trainer::TrainError as T;
        match e {
            T::Config(m) => AppError::usage(format!("config: {m}")),
            T::Checkpoint(m) => AppError::data(format!("checkpoint: {m}")),
            T::Data(d) => d.into(),
            T::Io(io) => AppError::runtime(io.to_string()),
            other => AppError::runtime(other.to_string()),
        }
    }
}

impl From<mcan::evaluator::EvalError> for AppError {
    fn from(e: mcan::evaluator::EvalError) -> Self {
        use mcan::evaluator::EvalError as E;
        match e {
            E::Contract(m) => AppError::data(m),
            E::Build { .. } => AppError::data(e.to_string()),
            E::Data(d) => d.into(),
            E::Io(io) => AppError::runtime(io.to_string()),
            E::Model(m) => AppError::runtime(m.to_string()),
        }
    }
}

impl From<mcan::recommender::RecError> for AppError {
    fn from(e: mcan::recommender::RecError) -> Self {
        use mcan::recommender::RecError as R;
        match e {
            R::Contract(m) => AppError::usage(m),
            R::Parse { .. } => AppError::data(e.to_string()),
            R::CategoriesExhausted { .. } => AppError::data(e.to_string()),
            R::Data(d) => d.into(),
            R::Io(io) => AppError::runtime(io.to_string()),
            R::Model(m) => AppError::runtime(m.to_string()),
        }
    }
}

fn require_file(path: &Path) -> Result<(), AppError> {
    if !path.is_file() {
        return Err(AppError::data(format!(
            "input file {} does not exist",
            path.display()
        )));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap prints help/version through the error path too; those are
            // successes, not usage errors.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

fn run(cli: Cli) -> Result<(), AppError> {
    let echo = |line: String| {
        if !cli.quiet {
            println!("{line}");
        }
    };
    match cli.command {
        Command::Gen(args) => cmd_gen(cli.seed, echo, args),
        Command::Train(args) => cmd_train(cli.seed, echo, args),
        Command::Eval(args) => cmd_eval(cli.seed, echo, args),
        Command::Fitb(args) => cmd_fitb(cli.seed, echo, args),
        Command::Recommend(args) => cmd_recommend(cli.seed, echo, args),
        Command::Inspect(args) => cmd_inspect(echo, args),
    }
}

fn cmd_gen(seed: u64, echo: impl Fn(String), args: GenArgs) -> Result<(), AppError> {
    let cfg = GenConfig {
        num_coarse: args.num_coarse,
        fines_per_coarse: args.fines_per_coarse,
        items_per_fine: args.items_per_fine,
        num_outfits: args.num_outfits,
        outfit_len: args.outfit_len,
        style_dim: args.style_dim,
        d_img: args.d_img,
        noise_sigma: args.noise_sigma,
        seed: derive_seed(seed, "gen"),
    };
    echo(format!(
        "# gen seed={seed} num_coarse={} fines_per_coarse={} items_per_fine={} num_outfits={} \
         outfit_len={} style_dim={} d_img={} noise_sigma={} out={} latent_out={}",
        cfg.num_coarse,
        cfg.fines_per_coarse,
        cfg.items_per_fine,
        cfg.num_outfits,
        cfg.outfit_len,
        cfg.style_dim,
        cfg.d_img,
        cfg.noise_sigma,
        args.out.display(),
        args.latent_out
            .clone()
            .unwrap_or_else(|| default_latent_path(&args.out))
            .display(),
    ));
    let (dataset, latent) = generate(&cfg)?;
    save_dataset(&dataset, &args.out).map_err(AppError::from)?;
    let latent_path = args
        .latent_out
        .unwrap_or_else(|| default_latent_path(&args.out));
    save_latent(&latent, &latent_path)?;
    echo(format!(
        "# wrote {} items, {} outfits",
        dataset.items().len(),
        dataset.outfits().len()
    ));
    Ok(())
}

fn default_latent_path(out: &Path) -> PathBuf {
    let mut p = out.as_os_str().to_owned();
    p.push(".latent");
    PathBuf::from(p)
}

fn cmd_train(seed: u64, echo: impl Fn(String), args: TrainArgs) -> Result<(), AppError> {
    require_file(&args.data)?;
    let dataset = load_dataset(&args.data)?;
    let lr_decay = args.lr_decay_every.map(|every| LrDecay {
        every,
        factor: args.lr_decay_factor,
    });
    let cfg = TrainConfig {
        model: ModelConfig {
            d: args.d,
            d_img: dataset.d_img(),
            d_c: args.d_c,
            hidden_attn: args.hidden,
            hidden_mix_fine: args.hidden,
            hidden_mix_coarse: args.hidden,
            hidden_scorer: args.hidden,
            use_cpl: !args.no_cpl,
            sample_k: args.sample_k,
        },
        lr: args.lr,
        batch_size: args.batch_size,
        epochs: args.epochs,
        weights: LossWeights {
            lambda1: args.lambda1,
            lambda2: args.lambda2,
            mu: args.mu,
        },
        seed: derive_seed(seed, "train"),
        eval_every: args.eval_every,
        triplet_enabled: !args.no_triplet,
        triplet_granularity: args.triplet_granularity,
        lr_decay,
    };
    echo(format!(
        "# train seed={seed} data={} out={} epochs={} lr={} batch_size={} mu={} lambda1={} \
         lambda2={} d={} d_c={} d_img={} hidden={} use_cpl={} triplet={} triplet_granularity={} \
         sample_k={:?} eval_every={}",
        args.data.display(),
        args.out.display(),
        cfg.epochs,
        cfg.lr,
        cfg.batch_size,
        cfg.weights.mu,
        cfg.weights.lambda1,
        cfg.weights.lambda2,
        cfg.model.d,
        cfg.model.d_c,
        cfg.model.d_img,
        args.hidden,
        cfg.model.use_cpl,
        cfg.triplet_enabled,
        cfg.triplet_granularity.as_str(),
        cfg.model.sample_k,
        cfg.eval_every,
    ));
    let (model, log) = train(&cfg, &dataset)?;
    save_checkpoint(&model, &args.out)?;
    if let Some(log_path) = args.log_out {
        log.save(&log_path)?;
    }
    for record in &log.epochs {
        echo(format!(
            "# epoch {} level={} loss={:.6} fine={:.6} coarse={:.6} triplet={:.6}{}",
            record.epoch,
            record.level.as_str(),
            record.loss_total,
            record.loss_fine,
            record.loss_coarse,
            record.loss_triplet,
            match record.val_fitb {
                Some(v) => format!(" val_fitb={v:.4}"),
                None => String::new(),
            }
        ));
    }
    echo(format!("# wrote checkpoint {}", args.out.display()));
    Ok(())
}

fn cmd_eval(seed: u64, echo: impl Fn(String), args: EvalArgs) -> Result<(), AppError> {
    require_file(&args.data)?;
    require_file(&args.checkpoint)?;
    let dataset = load_dataset(&args.data)?;
    let model = load_checkpoint(&args.checkpoint)?;
    let eval_seed = derive_seed(seed, "eval");
    echo(format!(
        "# eval seed={seed} data={} checkpoint={} split={} levels={} shuffled={} granularity={} out={}",
        args.data.display(),
        args.checkpoint.display(),
        args.split.as_str(),
        args.levels
            .iter()
            .map(|l| l.as_str())
            .collect::<Vec<_>>()
            .join(","),
        args.shuffled,
        args.granularity.as_str(),
        args.out.display(),
    ));
    let mut lines: Vec<ReportLine> = Vec::new();
    for &level in &args.levels {
        if args.shuffled {
            let (ordered, shuffled) = shuffle_eval(
                &model,
                &dataset,
                args.split,
                level,
                args.granularity,
                eval_seed,
            )?;
            lines.extend(report_lines(level, false, &ordered, seed));
            lines.extend(report_lines(level, true, &shuffled, seed));
        } else {
            let metrics = evaluate(
                &model,
                &dataset,
                args.split,
                level,
                args.granularity,
                eval_seed,
            )?;
            lines.extend(report_lines(level, false, &metrics, seed));
        }
    }
    save_report(&lines, &args.out)?;
    print!("{}", report_to_string(&lines));
    Ok(())
}

fn cmd_fitb(seed: u64, echo: impl Fn(String), args: FitbArgs) -> Result<(), AppError> {
    require_file(&args.data)?;
    require_file(&args.checkpoint)?;
    let dataset = load_dataset(&args.data)?;
    let model = load_checkpoint(&args.checkpoint)?;
    echo(format!(
        "# fitb seed={seed} data={} checkpoint={} split={} level={} granularity={}",
        args.data.display(),
        args.checkpoint.display(),
        args.split.as_str(),
        args.level.as_str(),
        args.granularity.as_str(),
    ));
    let questions = build_fitb(
        &dataset,
        args.split,
        args.level,
        args.granularity,
        derive_seed(seed, "fitb"),
    )?;
    let accuracy = fitb_accuracy(&model, &dataset, &questions)?;
    println!(
        "fitb {} accuracy {:.4} n={}",
        args.level.as_str(),
        accuracy,
        questions.len()
    );
    Ok(())
}

fn cmd_recommend(seed: u64, echo: impl Fn(String), args: RecommendArgs) -> Result<(), AppError> {
    require_file(&args.data)?;
    require_file(&args.checkpoint)?;
    require_file(&args.query)?;
    let dataset = load_dataset(&args.data)?;
    let model = load_checkpoint(&args.checkpoint)?;
    let query = load_query(&args.query)?;
    echo(format!(
        "# recommend seed={seed} data={} checkpoint={} query={} given={} plan={} max_len={}",
        args.data.display(),
        args.checkpoint.display(),
        args.query.display(),
        query.given.len(),
        query.plan.len(),
        query.max_len,
    ));
    let pools = PoolSet::build(&dataset).map_err(|e| AppError::runtime(e.to_string()))?;
    let completion = complete_outfit(&model, &dataset, &pools, &query)?;
    let text = completion_to_string(&completion);
    match args.out {
        Some(path) => {
            std::fs::write(&path, &text).map_err(|e| AppError::runtime(e.to_string()))?;
            echo(format!("# wrote completion {}", path.display()));
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn cmd_inspect(echo: impl Fn(String), args: InspectArgs) -> Result<(), AppError> {
    if args.data.is_none() && args.checkpoint.is_none() {
        return Err(AppError::usage(
            "inspect needs --data and/or --checkpoint",
        ));
    }
    let _ = &echo;
    if let Some(path) = args.data {
        require_file(&path)?;
        let dataset = load_dataset(&path)?;
        println!("dataset {}", path.display());
        println!("  d_img {}", dataset.d_img());
        println!(
            "  categories fine={} coarse={}",
            dataset.taxonomy().num_fine(),
            dataset.taxonomy().num_coarse()
        );
        println!("  items {}", dataset.items().len());
        let splits = [Split::Train, Split::Val, Split::Test, Split::None];
        let counts: Vec<String> = splits
            .iter()
            .map(|&s| format!("{}={}", s.as_str(), dataset.split_outfits(s).len()))
            .collect();
        println!("  outfits {} ({})", dataset.outfits().len(), counts.join(" "));
    }
    if let Some(path) = args.checkpoint {
        require_file(&path)?;
        let model = load_checkpoint(&path)?;
        println!("checkpoint {}", path.display());
        println!(
            "  d={} d_img={} d_c={} use_cpl={}",
            model.cfg.d, model.cfg.d_img, model.cfg.d_c, model.cfg.use_cpl
        );
        println!(
            "  categories fine={} coarse={}",
            model.num_fine(),
            model.num_coarse()
        );
        println!("  parameters {}", model.params.num_params());
    }
    Ok(())
}
