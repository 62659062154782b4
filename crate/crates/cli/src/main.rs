use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use maskctc::corpus::{read_dataset, CorpusConfig};
use maskctc::decoding::{write_traces, DecodeMode, Iterations};
use maskctc::harness::{self, RunConfig};
use maskctc::model::checkpoint;
use maskctc::training::TrainConfig;
use maskctc::{Error, Result};

#[derive(Parser)]
#[command(name = "maskctc", version, about = "Mask CTC training, decoding and benchmarking")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct Target {
    /// Checkpoint, overriding `model` in the config.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Dataset, overriding `data` in the config.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train/dev/eval splits of the synthetic corpus.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 2000)]
        train: usize,
        #[arg(long, default_value_t = 200)]
        dev: usize,
        #[arg(long, default_value_t = 200)]
        eval: usize,
    },
    /// Train a model.
    Train {
        #[command(flatten)]
        common: Common,
        /// Print the effective config and exit.
        #[arg(long)]
        print_config: bool,
    },
    /// Decode a dataset and write hypotheses.
    Decode {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        target: Target,
        #[arg(long)]
        p_thres: Option<f64>,
        /// Iterations: a positive integer or `num_mask`.
        #[arg(long)]
        k: Option<Iterations>,
        /// Also write one JSON trace per utterance.
        #[arg(long)]
        emit_trace: bool,
    },
    /// Score every decode mode of a model on a dataset.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        target: Target,
        #[arg(long)]
        p_thres: Option<f64>,
    },
    /// Time decoding for one or more checkpoints.
    Bench {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        target: Target,
        #[arg(long)]
        p_thres: Option<f64>,
        #[arg(long)]
        k: Option<Iterations>,
        #[arg(long)]
        repeats: Option<usize>,
        /// Worker threads; 1 pins decoding to a single thread.
        #[arg(long)]
        threads: Option<usize>,
    },
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::File {
        path: path.to_path_buf(),
        source: e,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::File {
        path: path.to_path_buf(),
        source: e,
    })
}

fn make_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::File {
        path: path.to_path_buf(),
        source: e,
    })
}

fn run_config(common: &Common, target: &Target, p_thres: Option<f64>, k: Option<Iterations>) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::from_toml(&read_text(p)?)?,
        None => RunConfig::default(),
    };
    if let Some(m) = &target.model {
        cfg.model = m.display().to_string();
    }
    if let Some(d) = &target.data {
        cfg.data = d.display().to_string();
    }
    if let Some(p) = p_thres {
        cfg.p_thres = p;
    }
    if let Some(k) = k {
        cfg.k_iters = k;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let threads = harness::configure_threads()?;
    match cli.command {
        Command::GenData {
            common,
            train,
            dev,
            eval,
        } => {
            let mut cfg: CorpusConfig = match &common.config {
                Some(p) => toml::from_str(&read_text(p)?).map_err(|e| Error::Config(e.to_string()))?,
                None => CorpusConfig::default(),
            };
            if let Some(s) = common.seed {
                cfg.seed = s;
            }
            let m = harness::gen_data(&cfg, [train, dev, eval], &common.out)?;
            for s in &m.splits {
                println!("{}: {} utterances, {} frames, {} tokens", s.file, s.utterances, s.frames, s.tokens);
            }
        }
        Command::Train { common, print_config } => {
            let mut cfg = match &common.config {
                Some(p) => TrainConfig::from_toml(&read_text(p)?)?,
                None => TrainConfig::default(),
            };
            if let Some(s) = common.seed {
                cfg.seed = s;
            }
            cfg.validate()?;
            if print_config {
                print!("{}", cfg.to_toml());
                return Ok(());
            }
            info!("training {} on {threads} threads", cfg.model_type);
            let summary = harness::run_train(&cfg, &common.out)?;
            if let Some(last) = summary.metrics.last() {
                println!(
                    "{} epochs in {:.1}s, last dev acc {:.4}",
                    summary.metrics.len(),
                    summary.seconds,
                    last.dev_acc
                );
            }
            println!("averaged {} checkpoints into {}", summary.averaged.len(), summary.final_model.display());
        }
        Command::Decode {
            common,
            target,
            p_thres,
            k,
            emit_trace,
        } => {
            let cfg = run_config(&common, &target, p_thres, k)?;
            let model = checkpoint::load(Path::new(&cfg.model))?;
            let utts = read_dataset(Path::new(&cfg.data))?;
            let mode = DecodeMode::for_model(model.kind, &cfg.decode_config());
            let decoded = harness::decode_dataset(&model, &utts, &mode)?;
            make_dir(&common.out)?;
            let mut hyp = String::new();
            for (u, (tokens, _)) in utts.iter().zip(&decoded) {
                hyp.push_str(&format!("{}\t{}\n", u.id, model.vocab.render(tokens)));
            }
            write_text(&common.out.join("hyp.txt"), &hyp)?;
            if emit_trace {
                let traces: Vec<_> = decoded.into_iter().map(|(_, t)| t).collect();
                write_traces(&traces, &common.out.join("decode.trace.jsonl"))?;
            }
            println!("decoded {} utterances with {}", utts.len(), mode.label());
        }
        Command::Eval {
            common,
            target,
            p_thres,
        } => {
            let cfg = run_config(&common, &target, p_thres, None)?;
            let model = checkpoint::load(Path::new(&cfg.model))?;
            let modes = harness::default_modes(model.kind, &cfg.decode_config(), &cfg.k_values);
            let report = harness::run_eval(Path::new(&cfg.model), Path::new(&cfg.data), &modes)?;
            report.write(&common.out, "eval_report")?;
            print!("{}", report.to_text());
        }
        Command::Bench {
            common,
            target,
            p_thres,
            k,
            repeats,
            threads,
        } => {
            if let Some(n) = threads {
                if n == 0 {
                    return Err(Error::Config("--threads must be at least 1".into()));
                }
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            let mut cfg = run_config(&common, &target, p_thres, k)?;
            if let Some(r) = repeats {
                cfg.repeats = r;
            }
            cfg.validate()?;
            let decode_cfg = cfg.decode_config();
            let mut entries = Vec::new();
            for path in std::iter::once(&cfg.model).chain(&cfg.models) {
                let path = PathBuf::from(path);
                let side = checkpoint::load_sidecar(&path)?;
                entries.push((path.clone(), DecodeMode::CtcGreedy));
                if side.model_type != maskctc::ModelType::CtcOnly {
                    entries.push((path, DecodeMode::for_model(side.model_type, &decode_cfg)));
                }
            }
            let report = harness::run_bench(&entries, Path::new(&cfg.data), cfg.repeats)?;
            make_dir(&common.out)?;
            write_text(&common.out.join("bench_report.json"), &serde_json::to_string_pretty(&report)?)?;
            write_text(&common.out.join("bench_report.txt"), &report.to_text())?;
            print!("{}", report.to_text());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
