//! Command-line front end for the `rspnet` search pipeline.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rspnet::analysis::{count_params_report, grad_flow_report, Activation, FlowArch};
use rspnet::attention::MacroGenotype;
use rspnet::cell::Genotype;
use rspnet::config::SearchConfig;
use rspnet::data::{load_dataset, save_dataset, synth_dataset};
use rspnet::model::{ModelFile, Network};
use rspnet::train::{
    evaluate_miou, load_splits, search_splits, stage1_cell_search, stage2_path_search, train_final, MetricsLog,
};
use rspnet::{Error, Scalar};

pub mod selftest;

/// Exit code for bad flags, configs or input files.
pub const EXIT_INVALID: i32 = 1;
/// Exit code for failures while running.
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "rspnet",
    version,
    about = "Two-stage differentiable architecture search for segmentation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Seed for every random choice of the command.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Stage 1: search the cell and write its genotype.
    SearchCell {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "genotype.txt")]
        out: PathBuf,
        /// Metrics CSV.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Stage 2: search the input paths of every layer.
    SearchPaths {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        genotype: PathBuf,
        #[arg(long, default_value = "macro.txt")]
        out: PathBuf,
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Train the stacked final model.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        genotype: PathBuf,
        /// Macro genotype; defaults to the leading paths of each layer.
        #[arg(long = "macro")]
        macro_g: Option<PathBuf>,
        #[arg(long, default_value = "model.json")]
        out: PathBuf,
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Store weights as f64 and train in double precision.
        #[arg(long)]
        f64: bool,
    },
    /// Score a saved model.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        /// Dataset directory; defaults to the configured validation set.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Write a synthetic dataset as PGM pairs.
    SynthData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        size: Option<usize>,
    },
    /// Per-layer gradient norms of deep 1x1 chains.
    GradFlow {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 20)]
        depth: usize,
        #[arg(long, default_value = "sigmoid")]
        activation: String,
        /// plain, residual, csp or all.
        #[arg(long = "arch", default_value = "all")]
        arch: String,
    },
    /// Parameter counts of the plain and partial variants.
    CountParams {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        genotype: PathBuf,
        #[arg(long = "macro")]
        macro_g: Option<PathBuf>,
    },
    /// Finite-difference and invariant checks.
    Selftest {
        #[command(flatten)]
        common: Common,
        /// Seeds per gradient case.
        #[arg(long, default_value_t = 20)]
        seeds: u64,
    },
}

/// A failure with its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Io(_) | Error::Diverged { .. } => EXIT_RUNTIME,
            _ => EXIT_INVALID,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn invalid(message: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_INVALID,
        message: message.into(),
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

/// Worker threads allowed by `RSPNET_THREADS` (default 1).
pub fn thread_budget() -> usize {
    std::env::var("RSPNET_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

fn load_config(common: &Common) -> CliResult<SearchConfig> {
    let mut cfg = match &common.config {
        Some(p) => {
            let text =
                fs::read_to_string(p).map_err(|e| invalid(format!("cannot read config {}: {e}", p.display())))?;
            SearchConfig::from_text(&text)?
        }
        None => SearchConfig::default(),
    };
    for kv in &common.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| invalid(format!("--set expects KEY=VALUE, got '{kv}'")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| Failure {
        code: EXIT_RUNTIME,
        message: format!("cannot read {}: {e}", path.display()),
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    fs::write(path, bytes).map_err(|e| Failure {
        code: EXIT_RUNTIME,
        message: format!("cannot write {}: {e}", path.display()),
    })
}

fn read_genotype(path: &Path) -> CliResult<Genotype> {
    let g: Genotype = read_text(path)?.parse()?;
    g.validate()?;
    Ok(g)
}

fn read_macro(path: &Path) -> CliResult<MacroGenotype> {
    let m: MacroGenotype = read_text(path)?.parse()?;
    m.validate()?;
    Ok(m)
}

fn write_metrics(path: Option<&PathBuf>, log: &MetricsLog) -> CliResult<()> {
    match path {
        Some(p) => write_file(p, log.to_csv().as_bytes()),
        None => Ok(()),
    }
}

fn summary(out: &mut dyn Write, params: usize, miou: f64) -> CliResult<()> {
    writeln!(out, "params={params} miou={miou:.6}").map_err(io_failure)
}

fn io_failure(e: std::io::Error) -> Failure {
    Failure {
        code: EXIT_RUNTIME,
        message: e.to_string(),
    }
}

fn train_with<T: Scalar>(
    genotype: &Genotype,
    macro_g: &MacroGenotype,
    cfg: &SearchConfig,
    out: &Path,
    log: &mut MetricsLog,
) -> CliResult<(usize, f64)> {
    let (train, val) = load_splits(cfg)?;
    let outcome = train_final::<T>(genotype, macro_g, &train, &val, cfg, log)?;
    let json = outcome.network.to_file()?.to_json()?;
    write_file(out, json.as_bytes())?;
    Ok((outcome.params, outcome.report.mean))
}

fn eval_with<T: Scalar>(file: &ModelFile, cfg: &SearchConfig, data: Option<&PathBuf>) -> CliResult<(usize, f64)> {
    let net = Network::<T>::from_file(file)?;
    let samples = match data {
        Some(d) => load_dataset(d)?,
        None => load_splits(cfg)?.1,
    };
    let classes = file.shape.num_classes;
    for s in &samples {
        s.check_labels(classes)?;
    }
    let report = evaluate_miou(&net, &samples, cfg.batch_size, classes)?;
    Ok((net.param_count(), report.mean))
}

fn execute(command: Command, out: &mut dyn Write) -> CliResult<()> {
    match command {
        Command::SearchCell {
            common,
            out: path,
            metrics,
        } => {
            let cfg = load_config(&common)?;
            let (train, _) = load_splits(&cfg)?;
            let (a, b) = search_splits(&train, cfg.seed);
            let mut log = MetricsLog::default();
            let outcome = stage1_cell_search::<f32>(&a, &b, &cfg, &mut log)?;
            write_file(&path, outcome.genotype.to_string().as_bytes())?;
            write_metrics(metrics.as_ref(), &log)?;
            summary(out, outcome.network.param_count(), outcome.final_miou)
        }
        Command::SearchPaths {
            common,
            genotype,
            out: path,
            metrics,
        } => {
            let cfg = load_config(&common)?;
            let g = read_genotype(&genotype)?;
            let (train, _) = load_splits(&cfg)?;
            let (a, b) = search_splits(&train, cfg.seed);
            let mut log = MetricsLog::default();
            let outcome = stage2_path_search::<f32>(&a, &b, &g, &cfg, &mut log)?;
            write_file(&path, outcome.macro_genotype.to_string().as_bytes())?;
            write_metrics(metrics.as_ref(), &log)?;
            for (l, s) in outcome.mean_scores.iter().enumerate() {
                let s: Vec<String> = s.iter().map(|v| format!("{v:.6}")).collect();
                writeln!(out, "layer {l} scores {}", s.join(",")).map_err(io_failure)?;
            }
            let miou = log.rows.last().map_or(0.0, |r| r.miou);
            let net = Network::<f32>::final_model(
                rspnet::train::net_shape(&cfg),
                &g.with_rsp(cfg.rsp),
                &outcome.macro_genotype,
                cfg.stack_n,
                &mut rspnet::rng::seeded(0),
            )?;
            summary(out, net.param_count(), miou)
        }
        Command::Train {
            common,
            genotype,
            macro_g,
            out: path,
            metrics,
            f64,
        } => {
            let cfg = load_config(&common)?;
            let g = read_genotype(&genotype)?;
            let m = match macro_g {
                Some(p) => read_macro(&p)?,
                None => MacroGenotype::leading(cfg.layers, cfg.k_paths, cfg.attention_mode),
            };
            let mut log = MetricsLog::default();
            let (params, miou) = if f64 {
                train_with::<f64>(&g, &m, &cfg, &path, &mut log)?
            } else {
                train_with::<f32>(&g, &m, &cfg, &path, &mut log)?
            };
            write_metrics(metrics.as_ref(), &log)?;
            summary(out, params, miou)
        }
        Command::Eval { common, model, data } => {
            let cfg = load_config(&common)?;
            let file = ModelFile::from_json(&read_text(&model)?)?;
            let (params, miou) = match file.scalar.as_str() {
                "f32" => eval_with::<f32>(&file, &cfg, data.as_ref())?,
                "f64" => eval_with::<f64>(&file, &cfg, data.as_ref())?,
                other => return Err(invalid(format!("unknown scalar type '{other}' in model file"))),
            };
            summary(out, params, miou)
        }
        Command::SynthData {
            common,
            out: dir,
            count,
            size,
        } => {
            let cfg = load_config(&common)?;
            let seed = common.seed.unwrap_or(cfg.data_seed);
            let count = count.unwrap_or(cfg.synth_train + cfg.synth_val);
            let samples = synth_dataset(seed, count, size.unwrap_or(cfg.synth_size), cfg.num_classes)?;
            fs::create_dir_all(&dir).map_err(io_failure)?;
            save_dataset(&dir, &samples)?;
            writeln!(out, "wrote {} samples to {}", samples.len(), dir.display()).map_err(io_failure)
        }
        Command::GradFlow {
            common,
            depth,
            activation,
            arch,
        } => {
            let cfg = load_config(&common)?;
            let act: Activation = activation.parse()?;
            let archs = if arch == "all" {
                vec![FlowArch::Plain, FlowArch::Residual, FlowArch::Csp]
            } else {
                vec![arch.parse()?]
            };
            for a in archs {
                let report = grad_flow_report(depth, act, a, cfg.seed)?;
                write!(out, "{report}").map_err(io_failure)?;
            }
            Ok(())
        }
        Command::CountParams {
            common,
            genotype,
            macro_g,
        } => {
            let cfg = load_config(&common)?;
            let g = read_genotype(&genotype)?;
            let m = macro_g.as_deref().map(read_macro).transpose()?;
            let report = count_params_report(&g, m.as_ref(), &cfg)?;
            write!(out, "{report}").map_err(io_failure)
        }
        Command::Selftest { common, seeds } => {
            let cfg = load_config(&common)?;
            let failures = selftest::run(cfg.seed, seeds, thread_budget(), out).map_err(Failure::from)?;
            if failures == 0 {
                writeln!(out, "selftest passed").map_err(io_failure)
            } else {
                Err(Failure {
                    code: EXIT_RUNTIME,
                    message: format!("selftest: {failures} check(s) failed"),
                })
            }
        }
    }
}

/// Parse `argv` (program name first), run the command and return the exit
/// code. Results go to `out`, diagnostics to `err`.
pub fn run<I, S>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{}", e.render());
                    0
                }
                _ => {
                    let _ = write!(err, "{}", e.render());
                    EXIT_INVALID
                }
            };
        }
    };
    match execute(cli.command, out) {
        Ok(()) => 0,
        Err(f) => {
            let _ = writeln!(err, "error: {}", f.message);
            f.code
        }
    }
}
