use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use tracing::info;

use seqex_core::analysis::{summarize, summarize_arms, t_test_greater, TrajectorySummary};
use seqex_core::blackbox::{accuracy, categorize, checkpoint, train_with_history, NetworkParams, TrainConfig};
use seqex_core::dataset::{prepare, DataPlan, PreparedData, TaskPreset};
use seqex_core::experiment::Experiment;
use seqex_core::explainers::{build_catalog, CatalogConfig, ExplanationCatalog, PrototypeSelection};
use seqex_core::policies::PolicyKind;
use seqex_core::session::{load_dir, EXPERIMENTAL_ITERATIONS};
use seqex_core::simulee::{simulate_arm, SimuleeConfig};
use seqex_service::{cors, router, SessionStore};

#[derive(Parser)]
#[command(name = "seqex", version, about = "Sequential explanation selection experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the classifier and write a checkpoint.
    Train(TrainArgs),
    /// Categorize the explanation pool and build the 8-explanation catalog.
    Catalog(CatalogArgs),
    /// Run the participant API.
    Serve(ServeArgs),
    /// Run simulated sessions for each policy arm.
    Simulate(SimulateArgs),
    /// Summarize completed session logs into a CSV.
    Analyze(AnalyzeArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// MNIST-style digits 3 vs 5.
    Mnist,
    /// Kuzushiji-49 classes 0 vs 33.
    Kuzushiji49,
}

impl From<Preset> for TaskPreset {
    fn from(p: Preset) -> Self {
        match p {
            Preset::Mnist => TaskPreset::MnistFallback,
            Preset::Kuzushiji49 => TaskPreset::Kuzushiji49,
        }
    }
}

#[derive(Args)]
struct DataArgs {
    /// Directory with {train,t10k}-{images-idx3,labels-idx1}-ubyte files.
    #[arg(long, default_value = "data/mnist")]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "mnist")]
    preset: Preset,
    #[arg(long, default_value_t = 1000)]
    train_per_class: usize,
    #[arg(long, default_value_t = 200)]
    test_per_class: usize,
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
}

impl DataArgs {
    fn load(&self) -> Result<PreparedData> {
        let plan = DataPlan {
            preset: self.preset.into(),
            train_per_class: self.train_per_class,
            test_per_class: self.test_per_class,
            seed: self.split_seed,
        };
        prepare(&self.data, &plan).with_context(|| format!("loading {}", self.data.display()))
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value = "model.bin")]
    out: PathBuf,
    #[arg(long, default_value_t = 15)]
    epochs: usize,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    learning_rate: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Prototypes {
    Protodash,
    Ranked,
}

#[derive(Args)]
struct CatalogArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value = "model.bin")]
    model: PathBuf,
    #[arg(long, default_value = "catalog.json")]
    out: PathBuf,
    /// Experiment seed: fixes the catalog, the task and the example images.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "protodash")]
    prototypes: Prototypes,
}

#[derive(Args)]
struct ServeArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "model.bin")]
    model: PathBuf,
    #[arg(long, default_value = "catalog.json")]
    catalog: PathBuf,
    #[arg(long, default_value = "logs")]
    log_dir: PathBuf,
    /// Origin allowed by CORS; any origin when omitted.
    #[arg(long)]
    cors_origin: Option<String>,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value = "model.bin")]
    model: PathBuf,
    #[arg(long, default_value = "catalog.json")]
    catalog: PathBuf,
    /// Simulee config (JSON); defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 200)]
    sessions: u64,
    /// Arms to run; all six when omitted.
    #[arg(long, value_delimiter = ',')]
    arms: Vec<String>,
    /// Where to write one JSON-lines log per arm.
    #[arg(long)]
    log_dir: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long, default_value = "logs")]
    logs: PathBuf,
    #[arg(long, default_value = "summary.csv")]
    out: PathBuf,
}

fn load_experiment(data: &DataArgs, model: &Path, catalog: &Path) -> Result<Experiment> {
    let params = checkpoint::load(model).with_context(|| format!("loading {}", model.display()))?;
    let catalog = ExplanationCatalog::load(catalog).with_context(|| format!("loading {}", catalog.display()))?;
    let pool = data.load()?.pool;
    let cats = categorize(&params, &pool)?;
    let seed = catalog.seed;
    Ok(Experiment::assemble(data.preset.into(), pool, cats, catalog, seed)?)
}

fn run_train(args: TrainArgs) -> Result<()> {
    let data = args.data.load()?;
    let config = TrainConfig {
        epochs: args.epochs,
        batch_size: args.batch_size,
        learning_rate: args.learning_rate,
        seed: args.seed,
        ..TrainConfig::default()
    };
    let started = Instant::now();
    let (params, losses) = train_with_history(&data.train, &config)?;
    for (epoch, loss) in losses.iter().enumerate() {
        info!(epoch = epoch + 1, loss, "epoch");
    }
    let acc = accuracy(&params, &data.test)?;
    checkpoint::save(&params, &args.out)?;
    println!(
        "trained on {} images in {:.1?}; test accuracy {:.4} on {}; wrote {}",
        data.train.len(),
        started.elapsed(),
        acc,
        data.test.len(),
        args.out.display()
    );
    Ok(())
}

fn run_catalog(args: CatalogArgs) -> Result<()> {
    let params: NetworkParams = checkpoint::load(&args.model)?;
    let pool = args.data.load()?.pool;
    let cats = categorize(&params, &pool)?;
    let config = CatalogConfig {
        prototype_selection: match args.prototypes {
            Prototypes::Protodash => PrototypeSelection::ProtoDash,
            Prototypes::Ranked => PrototypeSelection::Ranked,
        },
        ..CatalogConfig::default()
    };
    let catalog = build_catalog(&params, &cats, &pool, args.seed, config)?;
    catalog.save(&args.out)?;
    println!(
        "wrote {} explanations to {}",
        catalog.explanations.len(),
        args.out.display()
    );
    Ok(())
}

async fn run_serve(args: ServeArgs) -> Result<()> {
    let exp = load_experiment(&args.data, &args.model, &args.catalog)?;
    let store = Arc::new(SessionStore::open(exp, Some(args.log_dir.clone()))?);
    let app = router(store).layer(cors(args.cors_origin.as_deref())?);
    let listener = tokio::net::TcpListener::bind(("0.0.0.0", args.port)).await?;
    info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, app).await?;
    Ok(())
}

fn print_summary(summary: &TrajectorySummary) {
    println!(
        "{:<18} {:>2} {:>5} {:>8} {:>7} {:>7}",
        "arm", "t", "n", "mean", "se", "d"
    );
    for r in &summary.rows {
        let opt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.3}"));
        println!(
            "{:<18} {:>2} {:>5} {:>8.3} {:>7} {:>7}",
            r.arm.as_str(),
            r.t,
            r.n,
            r.mean,
            opt(r.se),
            opt(r.d)
        );
    }
}

fn run_simulate(args: SimulateArgs) -> Result<()> {
    let config = match &args.config {
        Some(p) => SimuleeConfig::load(p)?,
        None => SimuleeConfig::default(),
    };
    let arms: Vec<PolicyKind> = if args.arms.is_empty() {
        PolicyKind::ALL.to_vec()
    } else {
        args.arms.iter().map(|a| a.parse()).collect::<Result<_, _>>()?
    };
    let exp = load_experiment(&args.data, &args.model, &args.catalog)?;
    if let Some(dir) = &args.log_dir {
        std::fs::create_dir_all(dir)?;
    }
    let mut logs = Vec::new();
    for &arm in &arms {
        let mut sessions = simulate_arm(&exp, arm, &config, args.sessions)?;
        if let Some(dir) = &args.log_dir {
            let path = dir.join(format!("{arm}.jsonl"));
            if path.exists() {
                bail!("{} already exists", path.display());
            }
            for s in &mut sessions {
                s.persist(&path)?;
            }
        }
        logs.extend(sessions);
    }
    let summary = summarize_arms(&logs, &arms)?;
    print_summary(&summary);
    let last = usize::from(EXPERIMENTAL_ITERATIONS - 1);
    for &arm in arms.iter().filter(|a| a.is_mental_model()) {
        let baseline = arm.paired_baseline();
        if !arms.contains(&baseline) {
            continue;
        }
        let at_end = |k: PolicyKind| -> Vec<f64> {
            logs.iter()
                .filter(|s| s.policy == k)
                .map(|s| f64::from(s.iterations[last].relative_reward))
                .collect()
        };
        let test = t_test_greater(&at_end(arm), &at_end(baseline))?;
        println!(
            "{arm} vs {baseline} at t={EXPERIMENTAL_ITERATIONS}: t = {:.3}, one-sided p = {:.4}",
            test.t, test.p_greater
        );
    }
    if let Some(out) = &args.out {
        summary.export_csv(out)?;
    }
    Ok(())
}

fn run_analyze(args: AnalyzeArgs) -> Result<()> {
    let sessions = load_dir(&args.logs)?;
    let complete: Vec<_> = sessions.into_iter().filter(|s| s.is_complete()).collect();
    let summary = summarize(&complete)?;
    summary.export_csv(&args.out)?;
    print_summary(&summary);
    println!("{} complete sessions; wrote {}", complete.len(), args.out.display());
    Ok(())
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .with_writer(std::io::stderr)
        .init();
    match Cli::parse().command {
        Command::Train(a) => run_train(a),
        Command::Catalog(a) => run_catalog(a),
        Command::Serve(a) => tokio::runtime::Runtime::new()?.block_on(run_serve(a)),
        Command::Simulate(a) => run_simulate(a),
        Command::Analyze(a) => run_analyze(a),
    }
}
