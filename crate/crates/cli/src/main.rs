//! `oms`: scenario generation, dataset building, training and evaluation.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use oms_core::config::{ConfigError, RunConfig};
use oms_core::coordination::{
    evaluate, run_proactive, run_reactive, write_rows_csv, CoordError, EvalSetup, Predictor,
    Summary,
};
use oms_core::dataset::{build_dataset, build_test_set, Dataset, Split};
use oms_core::neuralnet::{train, Model, ModelConfig, NnError, TrainOptions};
use oms_core::scenario::{read_trace, simulate, write_trace, ScenarioError, Trace};

#[derive(Parser)]
#[command(
    name = "oms",
    version,
    about = "Camera and BSM aided beam prediction and proactive handoff simulator"
)]
struct Cli {
    /// TOML run configuration; defaults are used when omitted.
    #[arg(long, global = true, env = "OMS_CONFIG")]
    config: Option<PathBuf>,
    /// Overrides the configuration's seed.
    #[arg(long, global = true, env = "OMS_SEED")]
    seed: Option<u64>,
    /// Worker threads for independent evaluation runs.
    #[arg(long, global = true, env = "OMS_THREADS", default_value_t = 1)]
    threads: usize,
    /// Output file (or directory for `evaluate`).
    #[arg(long, global = true, env = "OMS_OUT")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Default,
    Desk,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum Baseline {
    Reactive,
}

#[derive(Subcommand)]
enum Command {
    /// Print a configuration file.
    Config {
        #[arg(long, value_enum, default_value = "default")]
        preset: Preset,
    },
    /// Simulate a scenario and write the trace.
    Generate {
        /// Frame count; defaults to the configuration's.
        #[arg(long)]
        frames: Option<usize>,
    },
    /// Cut training records (or a test set) from a trace.
    Dataset {
        #[arg(long)]
        trace: PathBuf,
        /// Build a test set for this many reporting users instead.
        #[arg(long)]
        test_users: Option<usize>,
        /// BSM interval for the test set.
        #[arg(long)]
        bsm_interval: Option<usize>,
    },
    /// Train BEM-GBPN; writes the checkpoint and a per-epoch history CSV.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        /// History CSV path; defaults to the checkpoint path with `.csv`.
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Run the proactive scheme on a trace and write metrics.
    Evaluate {
        #[arg(long)]
        trace: PathBuf,
        /// Model checkpoint; omit together with `--oracle` to inject true labels.
        #[arg(long, required_unless_present = "oracle")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        oracle: bool,
        #[arg(long)]
        users: Option<usize>,
        #[arg(long)]
        bsm_interval: Option<usize>,
        #[arg(long, value_enum)]
        baseline: Option<Baseline>,
        /// Comma-separated BSM intervals; adds `sweep.csv` with one row per interval.
        #[arg(long, value_delimiter = ',')]
        sweep: Vec<usize>,
    },
}

#[derive(Debug)]
enum CliError {
    Config(ConfigError),
    Io(PathBuf, std::io::Error),
    Data(ScenarioError),
    Model(NnError),
    Eval(CoordError),
    Usage(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Config(_) => 3,
            CliError::Io(..) => 4,
            CliError::Data(_) => 5,
            CliError::Model(_) => 6,
            CliError::Eval(_) => 7,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(e) => write!(f, "config error: {e}"),
            CliError::Io(p, e) => write!(f, "{}: {e}", p.display()),
            CliError::Data(e) => write!(f, "data error: {e}"),
            CliError::Model(e) => write!(f, "model error: {e}"),
            CliError::Eval(e) => write!(f, "evaluation error: {e}"),
            CliError::Usage(m) => write!(f, "{m}"),
        }
    }
}

impl From<ScenarioError> for CliError {
    fn from(e: ScenarioError) -> Self {
        match e {
            ScenarioError::Config(c) => CliError::Config(c),
            ScenarioError::Io(e) => CliError::Io(PathBuf::from("<stream>"), e),
            other => CliError::Data(other),
        }
    }
}

fn open(path: &Path) -> Result<BufReader<File>, CliError> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| CliError::Io(path.into(), e))
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::Io(path.into(), e))
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Io(path.into(), e)
}

fn load_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(io_err(p))?;
            RunConfig::from_toml(&text).map_err(CliError::Config)?
        }
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn out_path(cli: &Cli, default: &str) -> PathBuf {
    cli.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn load_trace(path: &Path) -> Result<Trace, CliError> {
    Ok(read_trace(open(path)?)?)
}

fn cmd_generate(cli: &Cli, frames: Option<usize>) -> Result<(), CliError> {
    let cfg = load_config(cli)?;
    let trace = simulate(&cfg, cfg.seed, frames.unwrap_or(cfg.frames))?;
    let out = out_path(cli, "trace.bin");
    let mut w = create(&out)?;
    write_trace(&trace, &mut w)?;
    w.flush().map_err(io_err(&out))?;
    eprintln!("wrote {} frames to {}", trace.frames.len(), out.display());
    Ok(())
}

fn cmd_dataset(
    cli: &Cli,
    trace: &Path,
    test_users: Option<usize>,
    interval: Option<usize>,
) -> Result<(), CliError> {
    let mut tr = load_trace(trace)?;
    if cli.config.is_some() {
        // Sensing and sampling settings may be changed after simulation.
        let cfg = load_config(cli)?;
        tr.config.sensing = cfg.sensing;
        tr.config.training = cfg.training;
    }
    let ds = match test_users {
        Some(u) => {
            if u == 0 || u > tr.config.scenario.users {
                return Err(CliError::Usage(format!(
                    "--test-users must be in 1..={}",
                    tr.config.scenario.users
                )));
            }
            build_test_set(
                &tr,
                u,
                interval.unwrap_or(tr.config.sensing.bsm_interval).max(1),
            )?
        }
        None => build_dataset(&tr)?,
    };
    let out = out_path(cli, "dataset.bin");
    let mut w = create(&out)?;
    ds.write(&mut w)?;
    w.flush().map_err(io_err(&out))?;
    eprintln!(
        "wrote {} records ({} train, {} valid, {} test) to {}",
        ds.records.len(),
        ds.count(Split::Train),
        ds.count(Split::Valid),
        ds.count(Split::Test),
        out.display()
    );
    Ok(())
}

fn cmd_train(cli: &Cli, dataset: &Path, history: Option<&Path>) -> Result<(), CliError> {
    let cfg = load_config(cli)?;
    let ds = Dataset::read(open(dataset)?)?;
    let h = &ds.header;
    let mut mcfg = ModelConfig::from_run(&cfg);
    mcfg.grid_width = h.width;
    mcfg.grid_height = h.height;
    mcfg.t_p = h.t_p;
    mcfg.n_beams = h.n_t;
    let mut model = Model::new(&mcfg, cfg.seed).map_err(CliError::Model)?;
    let opts = TrainOptions::from_config(&cfg.training, cfg.seed);
    let out = out_path(cli, "model.ckpt");
    let hist_path = history
        .map(Path::to_path_buf)
        .unwrap_or_else(|| out.with_extension("csv"));
    let mut hist = create(&hist_path)?;
    writeln!(
        hist,
        "epoch,train_loss,train_top1,valid_loss,valid_top1,valid_top3"
    )
    .map_err(io_err(&hist_path))?;
    let mut write_err = None;
    let report = train(
        &mut model,
        &ds.examples(Split::Train),
        &ds.examples(Split::Valid),
        &opts,
        |s| {
            eprintln!(
                "epoch {:>3}  loss {:.4}  top1 {:.3}  valid loss {:.4}  top1 {:.3}  top3 {:.3}",
                s.epoch, s.train_loss, s.train_top1, s.valid_loss, s.valid_top1, s.valid_top3
            );
            if let Err(e) = writeln!(
                hist,
                "{},{},{},{},{},{}",
                s.epoch, s.train_loss, s.train_top1, s.valid_loss, s.valid_top1, s.valid_top3
            ) {
                write_err.get_or_insert(e);
            }
        },
    )
    .map_err(CliError::Model)?;
    if let Some(e) = write_err {
        return Err(CliError::Io(hist_path, e));
    }
    hist.flush().map_err(io_err(&hist_path))?;
    let mut w = create(&out)?;
    model.save(&mut w).map_err(CliError::Model)?;
    w.flush().map_err(io_err(&out))?;
    eprintln!("kept epoch {} -> {}", report.best_epoch, out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_evaluate(
    cli: &Cli,
    trace: &Path,
    checkpoint: Option<&Path>,
    oracle: bool,
    users: Option<usize>,
    interval: Option<usize>,
    baseline: Option<Baseline>,
    sweep: &[usize],
) -> Result<(), CliError> {
    let tr = load_trace(trace)?;
    let cfg = &tr.config;
    let model = match (oracle, checkpoint) {
        (true, _) => None,
        (false, Some(p)) => Some(Model::load(open(p)?).map_err(CliError::Model)?),
        (false, None) => {
            return Err(CliError::Usage(
                "--checkpoint is required without --oracle".into(),
            ))
        }
    };
    if let Some(m) = &model {
        let (g, t) = (&cfg.sensing, &m.config);
        if (t.grid_width, t.grid_height, t.t_p, t.n_beams)
            != (g.grid_width, g.grid_height, g.t_p, cfg.radio.n_antennas)
        {
            return Err(CliError::Usage(
                "checkpoint input shape does not match the trace configuration".into(),
            ));
        }
    }
    let users = users.unwrap_or(cfg.scenario.users);
    if users == 0 || users > cfg.scenario.users {
        return Err(CliError::Usage(format!(
            "--users must be in 1..={}",
            cfg.scenario.users
        )));
    }
    let interval = interval.unwrap_or(cfg.sensing.bsm_interval).max(1);
    let predictor = match &model {
        Some(m) => Predictor::Model(m),
        None => Predictor::Oracle,
    };
    let dir = out_path(cli, "eval");
    std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;

    let setup = EvalSetup::new(&tr, users, interval);
    let run = run_proactive(&tr, &setup, &predictor).map_err(CliError::Eval)?;
    let csv = dir.join("metrics.csv");
    let mut w = create(&csv)?;
    write_rows_csv(&run.rows, &mut w).map_err(io_err(&csv))?;
    w.flush().map_err(io_err(&csv))?;
    let mut summary = serde_json::Map::new();
    let main = evaluate(&run, &setup);
    eprintln!("{}: ASRR {:.4}", main.scheme, main.asrr);
    summary.insert(
        "proactive".into(),
        serde_json::to_value(&main).expect("summary serializes"),
    );
    if baseline == Some(Baseline::Reactive) {
        let e = &cfg.evaluation;
        let r =
            run_reactive(&tr, &setup, e.sweep_period, e.handoff_margin).map_err(CliError::Eval)?;
        let s = evaluate(&r, &setup);
        eprintln!("reactive: ASRR {:.4}, {} pilots", s.asrr, s.pilot_count);
        let path = dir.join("reactive.csv");
        let mut w = create(&path)?;
        write_rows_csv(&r.rows, &mut w).map_err(io_err(&path))?;
        w.flush().map_err(io_err(&path))?;
        summary.insert(
            "reactive".into(),
            serde_json::to_value(&s).expect("summary serializes"),
        );
    }
    let path = dir.join("summary.json");
    let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
    std::fs::write(&path, text + "\n").map_err(io_err(&path))?;

    if !sweep.is_empty() {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build()
            .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
        let rows: Vec<Result<Summary, CoordError>> = pool.install(|| {
            use rayon::prelude::*;
            sweep
                .par_iter()
                .map(|&m| {
                    let s = EvalSetup::new(&tr, users, m.max(1));
                    run_proactive(&tr, &s, &predictor).map(|r| evaluate(&r, &s))
                })
                .collect()
        });
        let path = dir.join("sweep.csv");
        let mut w = create(&path)?;
        let ks: Vec<String> = cfg
            .evaluation
            .top_k
            .iter()
            .map(|k| format!("top{k}"))
            .collect();
        writeln!(
            w,
            "users,bsm_interval,asrr,asrr_no_interference,{},handoffs,report_bytes",
            ks.join(",")
        )
        .map_err(io_err(&path))?;
        for s in rows {
            let s = s.map_err(CliError::Eval)?;
            let tk: Vec<String> = ks
                .iter()
                .map(|k| s.top_k.get(k).copied().unwrap_or(0.0).to_string())
                .collect();
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                s.users,
                s.bsm_interval,
                s.asrr,
                s.asrr_no_interference,
                tk.join(","),
                s.handoffs,
                s.report_bytes
            )
            .map_err(io_err(&path))?;
        }
        w.flush().map_err(io_err(&path))?;
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<(), CliError> {
    if cli.threads == 0 {
        return Err(CliError::Usage("--threads must be at least 1".into()));
    }
    match &cli.command {
        Command::Config { preset } => {
            let cfg = match preset {
                Preset::Default => RunConfig::default(),
                Preset::Desk => RunConfig::desk(),
            };
            let text = cfg.to_toml();
            match &cli.out {
                Some(p) => std::fs::write(p, text).map_err(io_err(p))?,
                None => print!("{text}"),
            }
            Ok(())
        }
        Command::Generate { frames } => cmd_generate(cli, *frames),
        Command::Dataset {
            trace,
            test_users,
            bsm_interval,
        } => cmd_dataset(cli, trace, *test_users, *bsm_interval),
        Command::Train { dataset, history } => cmd_train(cli, dataset, history.as_deref()),
        Command::Evaluate {
            trace,
            checkpoint,
            oracle,
            users,
            bsm_interval,
            baseline,
            sweep,
        } => cmd_evaluate(
            cli,
            trace,
            checkpoint.as_deref(),
            *oracle,
            *users,
            *bsm_interval,
            *baseline,
            sweep,
        ),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("oms: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
