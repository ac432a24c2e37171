//! `egoev` command-line tool.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numeric failure.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use egoev::dataset::{load_split, manifest_path, synth_corpus, Manifest};
use egoev::events::{read_binary, read_csv, slice_windows, Geometry, WindowParams, MAGIC};
use egoev::lnes::{volume_from_slices, write_volume};
use egoev::model::{
    ablate, evaluate, load_checkpoint, save_checkpoint, train, AblationRow, EvalReport, GestureModel, ModelConfig,
    TrainConfig,
};
use egoev::stats::{corpus_records, duration_histogram, normalized_rates, DurationTable, GroupBy, RateReport};
use egoev::synth::{Split, SynthConfig};

#[derive(Parser)]
#[command(name = "egoev", version, about = "Event-based egocentric gesture recognition")]
struct Cli {
    /// Worker threads for data loading and training (1 is bit-reproducible).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Convert an event file (EVG1 or CSV) to an LNES volume.
    Convert {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        bin_ms: u64,
        #[arg(long, default_value_t = 6)]
        frames_per_bin: usize,
        /// Sensor width, required for CSV input.
        #[arg(long)]
        width: Option<u16>,
        /// Sensor height, required for CSV input.
        #[arg(long)]
        height: Option<u16>,
    },
    /// Generate a labeled synthetic corpus and its manifest.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        per_class: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train on the train split, validating on the val split.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// JSON-lines training log; defaults to `<out>.log.jsonl`.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Accuracy and confusion matrix of a checkpoint.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, default_value = "test", value_parser = parse_split)]
        split: Split,
    },
    /// Train and test the four module variants.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        report: PathBuf,
        /// Comma-separated seeds, overriding the config.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Event-rate and duration statistics of a corpus.
    Stats {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_parser = parse_group)]
        group_by: GroupBy,
        #[arg(long)]
        report: PathBuf,
    },
}

fn parse_split(s: &str) -> Result<Split, String> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        _ => Err(format!("unknown split {s:?} (train, val, test)")),
    }
}

fn parse_group(s: &str) -> Result<GroupBy, String> {
    s.parse().map_err(|e: egoev::Error| e.to_string())
}

enum Failure {
    Usage(String),
    Core(egoev::Error),
}

impl From<egoev::Error> for Failure {
    fn from(e: egoev::Error) -> Self {
        match e {
            egoev::Error::Config(msg) => Failure::Usage(msg),
            other => Failure::Core(other),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Core(e.into())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Core(e.into())
    }
}

type CliResult<T = ()> = Result<T, Failure>;

/// Config for `synth`: generator fields plus the per-class count.
#[derive(Debug, Serialize, Deserialize)]
struct SynthRun {
    #[serde(default = "default_per_class")]
    per_class: usize,
    #[serde(flatten)]
    synth: SynthConfig,
}

fn default_per_class() -> usize {
    12
}

/// Config for `train` and `ablate`. Input size, class count and bins are
/// taken from the manifest.
#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct RunConfig {
    model: ModelConfig,
    train: TrainConfig,
    window: WindowParams,
    seeds: Vec<u64>,
}

fn read_config<T: for<'de> Deserialize<'de> + Default>(path: Option<&Path>) -> CliResult<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn fit_to_manifest(model: &mut ModelConfig, manifest: &Manifest, window: WindowParams) -> CliResult {
    model.height = manifest.geometry.height as usize;
    model.width = manifest.geometry.width as usize;
    model.num_classes = manifest.classes.len();
    model.bins = manifest.grid(window)?.bins;
    model.frames_per_bin = window.frames_per_bin;
    model.bin_len_us = window.bin_len;
    Ok(())
}

fn convert(
    input: &Path,
    out: &Path,
    bin_ms: u64,
    frames_per_bin: usize,
    width: Option<u16>,
    height: Option<u16>,
) -> CliResult {
    let mut bytes = Vec::new();
    File::open(input)?.read_to_end(&mut bytes)?;
    let stream = if bytes.starts_with(MAGIC) {
        read_binary(&bytes[..])?
    } else {
        let (Some(w), Some(h)) = (width, height) else {
            return Err(Failure::Usage("CSV input needs --width and --height".into()));
        };
        read_csv(BufReader::new(&bytes[..]), Geometry::new(w, h))?
    };
    let params = WindowParams::new(bin_ms * 1000, frames_per_bin)?;
    let volume = volume_from_slices(&slice_windows(&stream, params)?)?;
    write_volume(&volume, params.bin_len, BufWriter::new(File::create(out)?))?;
    Ok(())
}

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Convert {
            input,
            out,
            bin_ms,
            frames_per_bin,
            width,
            height,
        } => convert(&input, &out, bin_ms, frames_per_bin, width, height),

        Command::Synth {
            config,
            out_dir,
            per_class,
            seed,
        } => {
            let mut run: SynthRun = match config {
                Some(p) => read_config::<serde_json::Value>(Some(&p))
                    .and_then(|v| serde_json::from_value(v).map_err(|e| Failure::Usage(e.to_string())))?,
                None => SynthRun {
                    per_class: default_per_class(),
                    synth: SynthConfig::default(),
                },
            };
            if let Some(n) = per_class {
                run.per_class = n;
            }
            if let Some(s) = seed {
                run.synth.seed = s;
            }
            fs::create_dir_all(&out_dir)?;
            let m = synth_corpus(&out_dir, &run.synth, run.per_class)?;
            eprintln!("wrote {} sequences to {}", m.entries.len(), out_dir.display());
            Ok(())
        }

        Command::Train {
            data,
            config,
            out,
            log,
            seed,
            epochs,
        } => {
            let mut rc: RunConfig = read_config(config.as_deref())?;
            if let Some(s) = seed {
                rc.model.seed = s;
                rc.train.seed = s;
            }
            if let Some(e) = epochs {
                rc.train.epochs = e;
            }
            let mpath = manifest_path(&data);
            let (manifest, train_set) = load_split(&mpath, Split::Train, rc.window)?;
            let (_, val) = load_split(&mpath, Split::Val, rc.window)?;
            fit_to_manifest(&mut rc.model, &manifest, rc.window)?;
            let mut model = GestureModel::new(rc.model)?;
            let train_log = train(&mut model, &train_set, &val, &rc.train)?;
            save_checkpoint(&model, BufWriter::new(File::create(&out)?))?;
            let log_path = log.unwrap_or_else(|| {
                let mut p = out.clone().into_os_string();
                p.push(".log.jsonl");
                p.into()
            });
            train_log.write_jsonl(BufWriter::new(File::create(&log_path)?))?;
            eprintln!(
                "trained {} epochs (best {}), checkpoint {}",
                train_log.epochs.len(),
                train_log.best_epoch,
                out.display()
            );
            Ok(())
        }

        Command::Eval {
            data,
            ckpt,
            report,
            split,
        } => {
            let model = load_checkpoint(BufReader::new(File::open(&ckpt)?))?;
            let window = WindowParams::new(model.config().bin_len_us, model.config().frames_per_bin)?;
            let (_, samples) = load_split(&manifest_path(&data), split, window)?;
            let r = evaluate(&model, &samples)?;
            #[derive(Serialize)]
            struct Report<'a> {
                split: &'a str,
                #[serde(flatten)]
                eval: &'a EvalReport,
            }
            write_json(
                &report,
                &Report {
                    split: split.name(),
                    eval: &r,
                },
            )?;
            eprintln!("{} accuracy {:.4} on {} samples", split.name(), r.accuracy, r.samples);
            Ok(())
        }

        Command::Ablate {
            data,
            config,
            report,
            seeds,
        } => {
            let mut rc: RunConfig = read_config(config.as_deref())?;
            if let Some(s) = seeds {
                rc.seeds = s;
            }
            if rc.seeds.is_empty() {
                rc.seeds = vec![rc.model.seed];
            }
            let mpath = manifest_path(&data);
            let (manifest, train_set) = load_split(&mpath, Split::Train, rc.window)?;
            let (_, val) = load_split(&mpath, Split::Val, rc.window)?;
            let (_, test) = load_split(&mpath, Split::Test, rc.window)?;
            fit_to_manifest(&mut rc.model, &manifest, rc.window)?;
            let rows = ablate(&rc.model, &rc.train, &rc.seeds, &train_set, &val, &test)?;
            #[derive(Serialize)]
            struct Report<'a> {
                seeds: &'a [u64],
                variants: &'a [AblationRow],
            }
            write_json(
                &report,
                &Report {
                    seeds: &rc.seeds,
                    variants: &rows,
                },
            )?;
            for r in &rows {
                eprintln!("{:<9} params {:>6}  accuracy {:.4}", r.variant, r.params, r.mean_accuracy);
            }
            Ok(())
        }

        Command::Stats { data, group_by, report } => {
            let records = corpus_records(&manifest_path(&data))?;
            let rates = normalized_rates(&records, group_by)?;
            let durations = duration_histogram(&records)?;
            #[derive(Serialize)]
            struct Report<'a> {
                rates: &'a RateReport,
                durations: &'a DurationTable,
            }
            write_json(
                &report,
                &Report {
                    rates: &rates,
                    durations: &durations,
                },
            )?;
            fs::write(report.with_extension("rates.csv"), rates.to_csv())?;
            fs::write(report.with_extension("durations.csv"), durations.to_csv())?;
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numeric() { 3 } else { 2 })
        }
    }
}
