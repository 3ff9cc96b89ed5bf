use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use avtta::audiomap::MappingResult;
use avtta::data::{gen_dataset, load_dataset, save_dataset, Dataset, DatasetSpec};
use avtta::experiment::{build_mapper, prepare_bench, run_experiment, ExperimentConfig, MapperKind};
use avtta::Error;
use clap::{Args, Parser, Subcommand};

/// Audio-assisted test-time adaptation experiments.
#[derive(Parser)]
#[command(name = "avtta", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every (seed, corruption, arm) combination and write the report.
    Run(RunArgs),
    /// Generate and save the synthetic dataset.
    GenData(CommonArgs),
    /// Train the source model and save it with its training statistics.
    ComputeTrainStats(CommonArgs),
    /// Map the test clips' audio tags to video labels, warming the mapping cache.
    MapLabels(CommonArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Experiment config (JSON). Built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; every file is written inside it.
    #[arg(long)]
    out: PathBuf,
    /// Seed used instead of the config's first seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Replaces the config's seed list; repeatable.
    #[arg(long = "seed")]
    seeds: Vec<u64>,
}

enum Failure {
    Config(Error),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config { .. } => Failure::Config(e),
            e => Failure::Runtime(e),
        }
    }
}

type CliResult<T> = Result<T, Failure>;

fn load_config(path: Option<&Path>) -> CliResult<ExperimentConfig> {
    match path {
        None => Ok(ExperimentConfig::default()),
        Some(p) => ExperimentConfig::load(p).map_err(|e| match e {
            Error::Io { .. } | Error::Json(_) => Failure::Config(e),
            e => e.into(),
        }),
    }
}

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| Failure::Runtime(Error::Io { path: dir.to_path_buf(), source: e }))
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    std::fs::write(path, bytes).map_err(|e| Failure::Runtime(Error::Io { path: path.to_path_buf(), source: e }))
}

fn run(args: RunArgs) -> CliResult<()> {
    let mut cfg = load_config(Some(&args.config))?;
    if !args.seeds.is_empty() {
        cfg.seeds = args.seeds;
        cfg.validate()?;
    }
    create_dir(&args.out)?;
    write_file(&args.out.join("config.resolved.json"), serde_json::to_string_pretty(&cfg).map_err(Error::from)?.as_bytes())?;
    let report = run_experiment(&cfg)?;
    report.write(&args.out)?;
    print!("{}", report.to_csv());
    match report.error {
        Some(msg) => Err(Failure::Runtime(Error::Validation(format!("report incomplete: {msg}")))),
        None => Ok(()),
    }
}

fn seeded(cfg: &mut ExperimentConfig, seed: Option<u64>) -> u64 {
    if let Some(s) = seed {
        cfg.seeds = vec![s];
    }
    cfg.seeds[0]
}

fn dataset_for(cfg: &ExperimentConfig, seed: u64) -> avtta::Result<Dataset> {
    match &cfg.dataset_path {
        Some(p) => load_dataset(p),
        None => gen_dataset(&DatasetSpec { seed: cfg.dataset.seed.wrapping_add(seed), ..cfg.dataset.clone() }),
    }
}

fn gen_data(args: CommonArgs) -> CliResult<()> {
    let mut cfg = load_config(args.config.as_deref())?;
    let seed = seeded(&mut cfg, args.seed);
    let ds = gen_dataset(&DatasetSpec { seed: cfg.dataset.seed.wrapping_add(seed), ..cfg.dataset.clone() })?;
    save_dataset(&ds, &args.out)?;
    println!("wrote {} train and {} test clips to {}", ds.train.len(), ds.test.len(), args.out.display());
    Ok(())
}

fn compute_train_stats(args: CommonArgs) -> CliResult<()> {
    let mut cfg = load_config(args.config.as_deref())?;
    let seed = seeded(&mut cfg, args.seed);
    let bench = prepare_bench(&cfg, seed)?;
    create_dir(&args.out)?;
    bench.model.save(&args.out.join("model.json"))?;
    bench.train_stats.save(&args.out.join("train_stats.json"))?;
    println!(
        "source train accuracy {:.2}%, clean test accuracy {:.2}%",
        100.0 * bench.train_report.final_accuracy,
        100.0 * bench.clean_test_accuracy()?
    );
    Ok(())
}

fn map_labels(args: CommonArgs) -> CliResult<()> {
    let mut cfg = load_config(args.config.as_deref())?;
    let seed = seeded(&mut cfg, args.seed);
    if cfg.mapper == MapperKind::Oracle {
        return Err(Failure::Config(Error::config("mapper", "the oracle mapper has nothing to map")));
    }
    create_dir(&args.out)?;
    if cfg.mapper == MapperKind::Llm && cfg.mapping_cache.is_none() {
        cfg.mapping_cache = Some(args.out.join("mapping_cache.jsonl"));
    }
    let ds = dataset_for(&cfg, seed)?;
    let mapper = build_mapper(&cfg, &ds)?.expect("non-oracle mapper");
    let mut lines = Vec::new();
    let mut valid = 0;
    for (id, audio) in &ds.audio {
        let result: MappingResult = mapper.map(audio);
        valid += usize::from(result.valid);
        let line = serde_json::json!({ "sample_id": id, "mapping": result });
        serde_json::to_writer(&mut lines, &line).map_err(Error::from)?;
        lines.push(b'\n');
    }
    write_file(&args.out.join("mappings.jsonl"), &lines)?;
    println!("{valid}/{} mappings valid", ds.audio.len());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run(a) => run(a),
        Command::GenData(a) => gen_data(a),
        Command::ComputeTrainStats(a) => compute_train_stats(a),
        Command::MapLabels(a) => map_labels(a),
    };
    let _ = std::io::stdout().flush();
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
