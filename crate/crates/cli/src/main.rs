use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hipmark_core::data::{read_image, write_pgm_bytes, Dataset};
use hipmark_core::eval::{
    ablation_run, decode_landmarks, evaluate, format_ablation_table, format_metrics_csv, overlay, METRICS_HEADER,
    REFERENCE_FOOTER,
};
use hipmark_core::synth::generate_dataset;
use hipmark_core::train::{load_checkpoint, save_checkpoint, Checkpoint, Trainer, LOSS_LOG_HEADER};
use hipmark_core::{Error, Result, RunConfig, TgcnIcf};

/// Hip landmark detection and Graf classification on B-mode images.
///
/// Every command reads an optional config file (`-c`); any config key can
/// also be overridden on the command line as `--key value` or
/// `--key=value`, e.g. `--train.lr 1e-3`. Overrides win.
#[derive(Debug, Parser)]
#[command(name = "hipmark", version)]
struct Cli {
    /// Config file of `key = value` lines.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write synthetic phantoms and their manifest.
    Generate {
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a manifest and write a checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint path.
        #[arg(long)]
        out: PathBuf,
        /// Loss log CSV; defaults to the checkpoint path with `.loss.csv`.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Score a checkpoint on a manifest.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Metrics CSV; printed to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Predict landmarks and class probability for one image.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// `.pgm` or `.tgt` image.
        #[arg(long)]
        image: PathBuf,
        /// Overlay PGM; defaults to the image path with `.overlay.pgm`.
        #[arg(long)]
        overlay: Option<PathBuf>,
    },
    /// Cross-validate every ablation variant under identical splits.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        /// Output directory for `ablation.csv`, `metrics.csv` and the loss log.
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the effective configuration with a comment per key.
    Config,
}

type Overrides = Vec<(String, String)>;

/// Splits `--section.key value` overrides (every config key is dotted)
/// from the arguments clap handles.
fn split_overrides(args: Vec<String>) -> Result<(Vec<String>, Overrides)> {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        match arg.strip_prefix("--").filter(|k| k.contains('.') && !k.starts_with('.')) {
            Some(flag) => {
                let (key, value) = match flag.split_once('=') {
                    Some((k, v)) => (k.to_string(), v.to_string()),
                    None => {
                        let v = it.next().ok_or_else(|| Error::Config(format!("--{flag} needs a value")))?;
                        (flag.to_string(), v)
                    }
                };
                overrides.push((key, value));
            }
            None => rest.push(arg),
        }
    }
    Ok((rest, overrides))
}

fn resolve_config(path: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for (k, v) in overrides {
        cfg.set(k, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Echoes every `every`-th loss row to stderr while writing all of them.
struct LossLog<W: Write> {
    inner: W,
    every: usize,
    rows: usize,
    line: Vec<u8>,
}

impl<W: Write> Write for LossLog<W> {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        let n = self.inner.write(buf)?;
        for &b in &buf[..n] {
            if b != b'\n' {
                self.line.push(b);
                continue;
            }
            if self.rows.is_multiple_of(self.every) {
                eprintln!("[loss] {}", String::from_utf8_lossy(&self.line));
            }
            self.rows += 1;
            self.line.clear();
        }
        Ok(n)
    }

    fn flush(&mut self) -> io::Result<()> {
        self.inner.flush()
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| io_error(path, e))
}

fn io_error(path: &Path, source: io::Error) -> Error {
    Error::Io { path: path.display().to_string(), source }
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.with_extension("").into_os_string();
    s.push(suffix);
    PathBuf::from(s)
}

fn open_loss_log(path: &Path) -> Result<LossLog<BufWriter<File>>> {
    let mut file = create(path)?;
    writeln!(file, "{LOSS_LOG_HEADER}").map_err(|e| io_error(path, e))?;
    Ok(LossLog { inner: file, every: 50, rows: 0, line: Vec::new() })
}

/// Rebuilds the network a checkpoint was trained with.
fn load_model(path: &Path) -> Result<TgcnIcf<f32>> {
    let ckpt = load_checkpoint(path)?;
    let snapshot = RunConfig::parse(&ckpt.config)
        .map_err(|e| Error::Format(format!("{}: bad config snapshot: {e}", path.display())))?;
    let mut model = TgcnIcf::new(snapshot.model, 0)?;
    ckpt.restore_model(&mut model)?;
    Ok(model)
}

fn run(cli: Cli, cfg: RunConfig) -> Result<()> {
    let mut stdout = io::stdout().lock();
    let out_err = |e: io::Error| io_error(Path::new("<stdout>"), e);
    match cli.command {
        Command::Generate { out } => {
            let manifest = generate_dataset(&cfg.synth, &out)?;
            writeln!(stdout, "{}", manifest.display()).map_err(out_err)?;
        }
        Command::Train { data, out, log } => {
            let dataset = Dataset::load(&data)?;
            let model = TgcnIcf::new(cfg.model.clone(), cfg.train.seed)?;
            let mut trainer = Trainer::new(model, cfg.train.clone())?;
            let log_path = log.unwrap_or_else(|| with_suffix(&out, ".loss.csv"));
            let mut log = open_loss_log(&log_path)?;
            let history = trainer.run(&dataset, &mut log)?;
            log.flush().map_err(|e| io_error(&log_path, e))?;
            save_checkpoint(&out, &Checkpoint::capture(&trainer, &cfg.to_text()))?;
            let last = history.last().map(|h| h.loss.total).unwrap_or(f64::NAN);
            eprintln!("trained {} steps, final loss {last:.6}", history.len());
            writeln!(stdout, "{}", out.display()).map_err(out_err)?;
        }
        Command::Eval { checkpoint, data, out } => {
            let model = load_model(&checkpoint)?;
            let dataset = Dataset::load(&data)?;
            let report = evaluate(&model, &dataset)?.report(&dataset, model.config().variant.name(), None)?;
            let csv = format!("{METRICS_HEADER}\n{}\n", report.csv_row());
            match out {
                Some(path) => fs::write(&path, csv).map_err(|e| io_error(&path, e))?,
                None => stdout.write_all(csv.as_bytes()).map_err(out_err)?,
            }
        }
        Command::Infer { checkpoint, image, overlay: overlay_path } => {
            let model = load_model(&checkpoint)?;
            let pixels = read_image(&image)?;
            let pred = model.predict(&pixels)?;
            let decoded = decode_landmarks(&pred.heatmaps, model.config().backbone.upscale() as f64)?;
            let mut fields: Vec<String> = decoded.landmarks.to_flat().iter().map(|v| format!("{v:.3}")).collect();
            fields.push(pred.probability.map_or_else(String::new, |p| format!("{p:.6}")));
            writeln!(stdout, "{}", fields.join(",")).map_err(out_err)?;
            let path = overlay_path.unwrap_or_else(|| with_suffix(&image, ".overlay.pgm"));
            let n = pixels.shape()[2];
            write_pgm_bytes(&path, n, n, &overlay(&pixels, None, &decoded.landmarks))?;
        }
        Command::Ablate { data, out } => {
            let dataset = Dataset::load(&data)?;
            let mut log = open_loss_log(&out.join("loss.csv"))?;
            let mut hook = |variant: &str, fold: usize| eprintln!("ablate: {variant} fold {fold}");
            let rows = ablation_run(&dataset, &cfg.model, &cfg.train, &cfg.eval, &mut log, &mut hook)?;
            log.flush().map_err(|e| io_error(&out, e))?;
            let table = format_ablation_table(&rows);
            let path = out.join("ablation.csv");
            fs::write(&path, &table).map_err(|e| io_error(&path, e))?;
            let reports: Vec<_> = rows.iter().map(|r| &r.report).collect();
            let path = out.join("metrics.csv");
            fs::write(&path, format_metrics_csv(&reports)).map_err(|e| io_error(&path, e))?;
            writeln!(stdout, "{table}# {REFERENCE_FOOTER}").map_err(out_err)?;
        }
        Command::Config => stdout.write_all(cfg.annotated().as_bytes()).map_err(out_err)?,
    }
    Ok(())
}

fn fail(e: &Error) -> ExitCode {
    let category = e.category();
    eprintln!("error[{}]: {}", category.as_str(), e.to_string().replace('\n', " "));
    ExitCode::from(category.exit_code() as u8)
}

fn main() -> ExitCode {
    let (args, overrides) = match split_overrides(std::env::args().collect()) {
        Ok(split) => split,
        Err(e) => return fail(&e),
    };
    let cli = Cli::parse_from(args);
    match resolve_config(cli.config.as_deref(), &overrides).and_then(|cfg| run(cli, cfg)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(&e),
    }
}
