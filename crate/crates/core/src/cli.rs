//! Command-line interface. Exit codes: 0 success, 1 runtime failure,
//! 2 usage or configuration error.

use std::fmt::Write as _;
use std::io::Write as _;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Parser, Subcommand};

use crate::data::{generate, parse_record, schema_from_header, write_atomic, write_tsv, SyntheticSpec};
use crate::error::Error;
use crate::eval;
use crate::kv::KeyValues;
use crate::model::{MmnModel, ModelMode};
use crate::serve::{self, format_prob};
use crate::trainer::{self, FileAudit, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "mmn", version, about = "Multi-domain conversion-rate model: data, training, evaluation, serving")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic log and a sidecar of true per-domain CVRs.
    GenData {
        /// Synthetic spec (key = value file).
        spec: PathBuf,
        /// Output TSV log.
        out: PathBuf,
        /// Ground-truth sidecar path [default: OUT.truth].
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Train from a run config; writes the best checkpoint, log and report.
    Train { config: PathBuf },
    /// Evaluate a checkpoint on a labelled log.
    Eval {
        checkpoint: PathBuf,
        test: PathBuf,
        /// Write the metrics as `key = value` lines here.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Append p_ctr and p_cvr to every line of a log.
    Predict {
        checkpoint: PathBuf,
        input: PathBuf,
        output: PathBuf,
    },
    /// Serve predictions over a line protocol on 127.0.0.1.
    Serve {
        checkpoint: PathBuf,
        /// TCP port; 0 picks a free one.
        #[arg(long, default_value_t = 0)]
        port: u16,
        #[arg(long, default_value_t = 4)]
        workers: usize,
    },
    /// Train several modes on the same data and print per-group AUC deltas
    /// against the first.
    Ablation {
        config: PathBuf,
        /// Comma-separated modes, the first being the reference.
        #[arg(long, value_delimiter = ',', default_value = "mmn,mmn_common_params,mmn_no_dynamic_weight")]
        modes: Vec<ModelMode>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0:#}")]
    Usage(anyhow::Error),
    #[error("{0:#}")]
    Runtime(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

/// Configuration and missing-input problems are usage errors; the rest are
/// runtime failures.
impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Checkpoint(_) | Error::UnknownDomain { .. } => CliError::Usage(e.into()),
            Error::Io { ref source, .. } if source.kind() == std::io::ErrorKind::NotFound => {
                CliError::Usage(e.into())
            }
            other => CliError::Runtime(other.into()),
        }
    }
}

fn require_file(path: &Path, what: &str) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Usage(anyhow::anyhow!("{what} {} not found", path.display())))
    }
}

fn runtime(e: std::io::Error, ctx: String) -> CliError {
    CliError::Runtime(anyhow::Error::new(e).context(ctx))
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData { spec, out, truth } => gen_data(&spec, &out, truth),
        Command::Train { config } => train(&config),
        Command::Eval {
            checkpoint,
            test,
            report,
        } => eval_cmd(&checkpoint, &test, report.as_deref()),
        Command::Predict {
            checkpoint,
            input,
            output,
        } => predict(&checkpoint, &input, &output),
        Command::Serve {
            checkpoint,
            port,
            workers,
        } => serve_cmd(&checkpoint, port, workers),
        Command::Ablation { config, modes, out } => ablation(&config, &modes, out.as_deref()),
    }
}

fn gen_data(spec_path: &Path, out: &Path, truth: Option<PathBuf>) -> Result<(), CliError> {
    require_file(spec_path, "spec file")?;
    let spec = KeyValues::load(spec_path)
        .and_then(|kv| SyntheticSpec::from_kv(&kv))
        .map_err(|e| CliError::Usage(anyhow::Error::new(e).context("invalid synthetic spec")))?;
    let log = generate(&spec)?;
    write_tsv(out, &log)?;
    let truth = truth.unwrap_or_else(|| {
        let mut p = out.as_os_str().to_owned();
        p.push(".truth");
        PathBuf::from(p)
    });
    write_atomic(&truth, spec.ground_truth_report().as_bytes())?;
    println!("wrote {} records to {} and ground truth to {}", log.len(), out.display(), truth.display());
    Ok(())
}

fn train(config_path: &Path) -> Result<(), CliError> {
    require_file(config_path, "config file")?;
    let config = RunConfig::load(config_path)?;
    let summary = trainer::train(&config)?;
    for row in &summary.outcome.epochs {
        println!("{}", row.to_line());
    }
    println!(
        "best epoch {} saved to {} (datasets opened: {})",
        summary.outcome.best_epoch,
        config.checkpoint_path.display(),
        summary.audit.dataset_files_opened()
    );
    print!("{}", summary.report.to_text());
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<MmnModel, CliError> {
    require_file(path, "checkpoint")?;
    Ok(MmnModel::load(path)?)
}

fn eval_cmd(checkpoint: &Path, test: &Path, report_path: Option<&Path>) -> Result<(), CliError> {
    let model = load_checkpoint(checkpoint)?;
    require_file(test, "test log")?;
    let mut audit = FileAudit::default();
    let log = audit.load_dataset(test)?;
    let instances = model.encode(&log.records)?;
    let report = eval::report(&model, &instances)?;
    print!("{}", report.to_text());
    if let Some(p) = report_path {
        write_atomic(p, report.to_kv().as_bytes())?;
    }
    Ok(())
}

fn predict(checkpoint: &Path, input: &Path, output: &Path) -> Result<(), CliError> {
    let model = load_checkpoint(checkpoint)?;
    require_file(input, "input log")?;
    let text = std::fs::read_to_string(input).map_err(|e| runtime(e, format!("reading {}", input.display())))?;
    if let Some(schema) = schema_from_header(&text) {
        if schema? != *model.schema() {
            return Err(CliError::Usage(anyhow::anyhow!(
                "{} header fields differ from the checkpoint schema",
                input.display()
            )));
        }
    }
    let path = input.display().to_string();
    let mut out = String::with_capacity(text.len() * 2);
    let mut errors = 0usize;
    for (i, line) in text.lines().enumerate() {
        if line.starts_with('#') {
            let _ = writeln!(out, "{line}\tp_ctr\tp_cvr");
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let result = parse_record(line, model.schema(), &path, i + 1).and_then(|fv| model.predict_one(&fv));
        match result {
            Ok(p) => {
                let _ = writeln!(out, "{line}\t{}\t{}", format_prob(p.p_ctr), p.p_cvr);
            }
            Err(e) => {
                errors += 1;
                let _ = writeln!(out, "{line}\tERR\t{}", e.to_string().replace(['\t', '\n'], " "));
            }
        }
    }
    write_atomic(output, out.as_bytes())?;
    if errors > 0 {
        eprintln!("{errors} line(s) could not be scored; see ERR records in {}", output.display());
    }
    Ok(())
}

fn serve_cmd(checkpoint: &Path, port: u16, workers: usize) -> Result<(), CliError> {
    let model = Arc::new(load_checkpoint(checkpoint)?);
    let listener = TcpListener::bind(("127.0.0.1", port)).map_err(|e| runtime(e, format!("binding port {port}")))?;
    let addr = listener.local_addr().map_err(|e| runtime(e, "reading bound address".into()))?;
    println!("listening on {addr}");
    std::io::stdout().flush().map_err(|e| runtime(e, "flushing stdout".into()))?;
    let report = serve::serve(model, listener, workers)?;
    println!("shutdown {}", report.summary());
    Ok(())
}

fn ablation(config_path: &Path, modes: &[ModelMode], out: Option<&Path>) -> Result<(), CliError> {
    require_file(config_path, "config file")?;
    let config = RunConfig::load(config_path)?;
    config.check_paths()?;
    let table = trainer::run_ablation(&config, modes)?;
    let text = table.to_text();
    print!("{text}");
    if let Some(p) = out {
        write_atomic(p, text.as_bytes())?;
    }
    Ok(())
}
