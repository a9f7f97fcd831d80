use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use coslearn::data::{make_blobs, BlobSpec, Dataset, Split};
use coslearn::experiments::{self, ExperimentConfig, PreparedData, RunStatus, TrainSettings};
use coslearn::gradcheck::{self, GradcheckConfig};
use coslearn::hierarchy::{read_class_list, ClassHierarchy};
use coslearn::losses::{loss_surface_grid, LossKind, LossSpec};
use coslearn::optim::{ClipSpec, ScheduleProfile};
use coslearn::{verify_embeddings, EmbeddingMatrix, Error, SimilarityMatrix};

#[derive(Parser)]
#[command(
    name = "coslearn",
    version,
    about = "Cosine-loss classification on small datasets"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compute class embeddings from a hierarchy and verify their Gram matrix.
    Embed(EmbedArgs),
    /// Train one model and write a per-epoch CSV log.
    Train(Box<TrainArgs>),
    /// Run a seeded loss comparison / dataset-size sweep.
    Experiment(ExperimentArgs),
    /// Finite-difference gradient checks for every op and loss.
    Gradcheck(GradcheckArgs),
    /// Sample a 2-D loss surface for the target [1, 0].
    Surface(SurfaceArgs),
    /// Regenerate report files.
    #[command(subcommand)]
    Report(ReportCommand),
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Onehot,
    Semantic,
}

#[derive(Args)]
struct EmbedArgs {
    #[arg(long)]
    hierarchy: PathBuf,
    /// One class per line; fixes the embedding row order.
    #[arg(long)]
    classes: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "semantic")]
    kind: KindArg,
}

#[derive(Args)]
struct TrainArgs {
    /// Training CSV (`label,x1,...`); blobs are generated when absent.
    #[arg(long, requires = "test")]
    data: Option<PathBuf>,
    #[arg(long, requires = "data")]
    test: Option<PathBuf>,
    #[arg(long)]
    classes: Option<PathBuf>,
    #[arg(long)]
    hierarchy: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    blobs_classes: usize,
    #[arg(long, default_value_t = 8)]
    blobs_dim: usize,
    #[arg(long, default_value_t = 40)]
    blobs_samples: usize,
    #[arg(long, default_value_t = 0.3)]
    blobs_spread: f64,
    #[arg(long, default_value_t = 1.0)]
    blobs_separation: f64,
    #[arg(long, default_value_t = 0)]
    blobs_seed: u64,
    /// Train on this many samples per class.
    #[arg(long)]
    samples_per_class: Option<usize>,
    #[arg(long)]
    loss: String,
    /// Embedding CSV as written by `embed`.
    #[arg(long, conflicts_with_all = ["onehot", "semantic"])]
    embeddings: Option<PathBuf>,
    #[arg(long, conflicts_with = "semantic")]
    onehot: bool,
    /// Semantic embeddings from `--hierarchy`.
    #[arg(long)]
    semantic: bool,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long, default_value_t = 0.0)]
    label_smoothing: f64,
    #[arg(long, default_value_t = 0.1)]
    lr_max: f64,
    /// `paper`, `quick` or `BASE:CYCLES`.
    #[arg(long, default_value = "paper")]
    epochs_profile: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, value_delimiter = ',', default_value = "64")]
    hidden: Vec<usize>,
    #[arg(long, default_value_t = 0.0)]
    momentum: f64,
    #[arg(long, default_value_t = 10.0)]
    clip_norm: f64,
    #[arg(long)]
    checkpoint_out: Option<PathBuf>,
    /// Epoch log destination; stdout when absent.
    #[arg(long)]
    log_out: Option<PathBuf>,
}

#[derive(Args)]
struct ExperimentArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// `all` or a comma-separated list of case names.
    #[arg(long, default_value = "all")]
    ops: String,
    #[arg(long, default_value_t = gradcheck::DEFAULT_TRIALS)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = gradcheck::DEFAULT_TOLERANCE)]
    tolerance: f64,
}

#[derive(Args)]
struct SurfaceArgs {
    #[arg(long)]
    loss: String,
    #[arg(long, default_value_t = 201)]
    resolution: usize,
    /// Half-width of the square grid.
    #[arg(long, default_value_t = 2.0)]
    bound: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum ReportCommand {
    /// Rewrite summary, curve and test CSVs from a results.json.
    Results {
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Dump the learning-rate schedule as `step,lr`.
    Lr {
        #[arg(long)]
        lr_max: f64,
        #[arg(long, default_value = "paper")]
        profile: String,
        #[arg(long, default_value_t = 1)]
        steps_per_epoch: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("COSLEARN_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 1 for bad input, 2 for numeric or runtime failures.
fn exit_code(e: &anyhow::Error) -> u8 {
    match e.chain().find_map(|c| c.downcast_ref::<Error>()) {
        Some(err) if !err.is_validation() => 2,
        _ => 1,
    }
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Embed(a) => embed(a),
        Command::Train(a) => train(*a),
        Command::Experiment(a) => experiment(a),
        Command::Gradcheck(a) => run_gradcheck(a),
        Command::Surface(a) => surface(a),
        Command::Report(r) => report(r),
    }
}

fn embed(a: EmbedArgs) -> anyhow::Result<ExitCode> {
    let h = ClassHierarchy::from_files(&a.hierarchy, a.classes.as_deref())?;
    let names: Vec<String> = h.classes().into_iter().map(String::from).collect();
    let (e, s) = match a.kind {
        KindArg::Semantic => {
            let s = h.semantic_similarity()?;
            (EmbeddingMatrix::semantic(&s)?, s)
        }
        KindArg::Onehot => (
            EmbeddingMatrix::onehot_named(names.clone())?,
            SimilarityMatrix::identity(names),
        ),
    };
    e.save(&a.out)?;
    let r = verify_embeddings(&e, &s)?;
    println!(
        "classes={} dim={} max_gram_deviation={:e} max_norm_deviation={:e}",
        e.num_classes(),
        e.dim(),
        r.max_gram_deviation,
        r.max_norm_deviation
    );
    Ok(ExitCode::SUCCESS)
}

fn config_error(msg: impl Into<String>) -> anyhow::Error {
    Error::Config(msg.into()).into()
}

fn train(a: TrainArgs) -> anyhow::Result<ExitCode> {
    let kind: LossKind = a.loss.parse()?;
    let has_embeddings = a.embeddings.is_some() || a.onehot || a.semantic;
    if kind == LossKind::CosinePlusXent && (!has_embeddings || a.lambda.is_none()) {
        return Err(config_error(
            "cosine_xent requires embeddings (--embeddings, --onehot or --semantic) and --lambda",
        ));
    }
    if a.semantic && a.hierarchy.is_none() {
        return Err(config_error("--semantic requires --hierarchy"));
    }
    let profile: ScheduleProfile = a.epochs_profile.parse()?;

    let hierarchy = a
        .hierarchy
        .as_deref()
        .map(|p| ClassHierarchy::from_files(p, a.classes.as_deref()))
        .transpose()?;
    let (train, test) = match (&a.data, &a.test) {
        (Some(d), Some(t)) => {
            let list = match (&hierarchy, &a.classes) {
                (Some(h), _) => Some(h.classes().into_iter().map(String::from).collect()),
                (None, Some(p)) => Some(read_class_list(p)?),
                (None, None) => None,
            };
            let tr = Dataset::load_csv(d, list.as_deref(), Split::Train)?;
            let te = Dataset::load_csv(t, Some(tr.class_names()), Split::Test)?;
            (tr, te)
        }
        _ => make_blobs(
            &BlobSpec {
                n_classes: a.blobs_classes,
                dim: a.blobs_dim,
                samples_per_class: a.blobs_samples,
                spread: a.blobs_spread,
                separation: a.blobs_separation,
                seed: a.blobs_seed,
            },
            hierarchy.as_ref(),
        )?,
    };
    let train = match a.samples_per_class {
        Some(k) => train.subsample(k, a.seed)?,
        None => train,
    };
    let names = train.class_names().to_vec();
    let embeddings = if let Some(p) = &a.embeddings {
        let e = EmbeddingMatrix::load(p)?;
        if e.class_names() != names.as_slice() {
            return Err(config_error(format!(
                "{} does not list the dataset's classes in order",
                p.display()
            )));
        }
        e
    } else if a.semantic {
        let h = hierarchy.as_ref().expect("checked above");
        EmbeddingMatrix::semantic(&h.semantic_similarity()?)?
    } else {
        EmbeddingMatrix::onehot_named(names.clone())?
    };

    let spec = LossSpec::new(kind, names.len())?
        .with_label_smoothing(a.label_smoothing)?
        .with_lambda(a.lambda.unwrap_or(coslearn::losses::DEFAULT_LAMBDA))?;
    let settings = TrainSettings {
        schedule: profile.schedule(a.lr_max),
        batch_size: a.batch_size,
        clip: ClipSpec {
            max_norm: a.clip_norm,
        },
        momentum: a.momentum,
        divergence_threshold: 1e4,
        hidden_layers: a.hidden.clone(),
    };
    let out = experiments::run_training(&train, &test, &spec, &embeddings, &settings, a.seed)?;

    let mut log = String::from("epoch,lr,train_loss,test_accuracy\n");
    for e in &out.epochs {
        log.push_str(&format!(
            "{},{},{},{}\n",
            e.epoch, e.lr, e.train_loss, e.test_accuracy
        ));
    }
    match &a.log_out {
        Some(p) => std::fs::write(p, &log).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{log}"),
    }
    if let Some(p) = &a.checkpoint_out {
        out.model.save(p)?;
    }
    if out.status == RunStatus::Diverged {
        let last = out
            .epochs
            .last()
            .map_or("none".to_string(), |e| e.epoch.to_string());
        let diag = out.diagnostic.unwrap_or_default();
        return Err(anyhow::Error::new(Error::Divergence(diag))
            .context(format!("training diverged; last finite epoch: {last}")));
    }
    if let Some((acc, epoch)) = out.best() {
        eprintln!("best test accuracy {acc} at epoch {epoch}");
    }
    Ok(ExitCode::SUCCESS)
}

fn experiment(a: ExperimentArgs) -> anyhow::Result<ExitCode> {
    let cfg = ExperimentConfig::load(&a.config)?;
    let data = PreparedData::load(&cfg.dataset, cfg.standardize)?;
    let workers = a
        .workers
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let (result, timings) = experiments::size_sweep(&cfg, &data, workers)?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    experiments::write_report(&a.out, &result, &timings)?;
    print!("{}", experiments::report::summary_csv(&result));
    Ok(ExitCode::SUCCESS)
}

fn run_gradcheck(a: GradcheckArgs) -> anyhow::Result<ExitCode> {
    let names: Vec<&str> = if a.ops == "all" {
        gradcheck::all_cases()
    } else {
        a.ops.split(',').map(str::trim).collect()
    };
    let cfg = GradcheckConfig {
        trials: a.trials,
        tolerance: a.tolerance,
        seed: a.seed,
        ..Default::default()
    };
    let reports = gradcheck::run_suite(&names, &cfg)?;
    println!("case,trials,max_rel_error,status");
    for r in &reports {
        let status = if r.passed { "pass" } else { "FAIL" };
        println!("{},{},{:e},{status}", r.name, r.trials, r.max_rel_error);
    }
    if reports.iter().all(|r| r.passed) {
        Ok(ExitCode::SUCCESS)
    } else {
        Ok(ExitCode::from(2))
    }
}

fn surface(a: SurfaceArgs) -> anyhow::Result<ExitCode> {
    let kind: LossKind = a.loss.parse()?;
    if kind == LossKind::CosinePlusXent {
        bail!(Error::Config(
            "surface supports cosine, cross_entropy and mse".into()
        ));
    }
    let spec = LossSpec::new(kind, 2)?;
    let grid = loss_surface_grid(&spec, 0, (-a.bound, a.bound), a.resolution)?;
    grid.save(&a.out)?;
    Ok(ExitCode::SUCCESS)
}

fn report(r: ReportCommand) -> anyhow::Result<ExitCode> {
    match r {
        ReportCommand::Results { results, out } => {
            let res = experiments::load_result(&results)?;
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            write_text(
                &out.join("summary.csv"),
                &experiments::report::summary_csv(&res),
            )?;
            write_text(
                &out.join("curve.csv"),
                &experiments::report::curve_csv(&res),
            )?;
            write_text(
                &out.join("tests.csv"),
                &experiments::report::tests_csv(&res),
            )?;
        }
        ReportCommand::Lr {
            lr_max,
            profile,
            steps_per_epoch,
            out,
        } => {
            let p: ScheduleProfile = profile.parse()?;
            experiments::write_lr_curve(&out, &p.schedule(lr_max), steps_per_epoch)?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}
