//! Command-line front end for the streaming spline reconstructor.
//!
//! Four subcommands cover the full pipeline: `generate` writes a synthetic
//! interval dataset, `train` fits a policy on it, `eval` scores checkpoints
//! against the myopic and batch baselines, and `reconstruct` streams a single
//! sequence through a checkpoint and emits plot-ready samples.
//!
//! Every command writes a `manifest.json` into its output directory with the
//! echoed configuration, seeds, artifact names, crate versions, and wall
//! time. Exit codes: 0 success, 2 validation error, 3 IO error, 4 numerical
//! failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use rti_core::batchref::{batch_interpolate, BatchError};
use rti_core::core::{CoreError, Interval, IntervalSequence, SplineConfig};
use rti_core::datagen::{
    build_dataset, load_dataset, save_dataset, DatagenError, DatasetManifest, SourceKind,
    Standardization,
};
use rti_core::policy::{PolicyError, PolicyParams};
use rti_core::rti::{initial_state, stream_step, RtiError, StreamState};
use rti_core::splinalg::{basis_derivative, SplinalgError};
use rti_core::train::{
    improvement_with_uncertainty, sequence_losses, train, LossStats, TrainConfig, TrainError,
};
use serde::{Deserialize, Serialize};

#[derive(Parser)]
#[command(
    name = "rti",
    version,
    about = "Zero-delay spline reconstruction from streamed interval data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic interval dataset (train/val/test CSVs).
    Generate {
        /// Source pipeline: `s1` (quantized, uniform timestamps) or `s2`
        /// (compressed, non-uniform timestamps).
        #[arg(long)]
        source: SourceKind,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a policy on a generated dataset.
    Train {
        /// Dataset directory written by `generate`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        policy: PolicyArg,
        /// Polynomial order of each section.
        #[arg(long)]
        d: usize,
        /// Number of matched derivatives at the knots.
        #[arg(long)]
        phi: usize,
        /// Override the policy's default epoch budget.
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        /// Override the policy's default base learning rate.
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory for checkpoint and report.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on a dataset split.
    Eval {
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint JSON written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        /// Also solve the batch minimum-curvature baseline per sequence.
        #[arg(long)]
        with_batch: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stream one sequence through a checkpoint and emit sampled values.
    Reconstruct {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Input CSV: either `x,y,eps` rows or the dataset schema
        /// `seq_id,t,x,y,eps` holding a single sequence.
        #[arg(long)]
        input: PathBuf,
        /// Evaluation points per section; 1 emits knots only.
        #[arg(long, default_value_t = 20)]
        samples_per_section: usize,
        /// Output CSV for the samples; a sections table and manifest are
        /// written next to it.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PolicyArg {
    Myopic,
    Parametrized,
    Rnn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl SplitArg {
    fn name(self) -> &'static str {
        match self {
            SplitArg::Train => "train",
            SplitArg::Val => "val",
            SplitArg::Test => "test",
        }
    }
}

#[derive(Debug)]
enum CliError {
    Validation(String),
    Io(String),
    Numerical(String),
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Io(_) => 3,
            CliError::Numerical(_) => 4,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Validation(m) | CliError::Io(m) | CliError::Numerical(m) => {
                f.write_str(m)
            }
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> CliError {
        match e {
            CoreError::BrokenContinuity { .. } => CliError::Numerical(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<SplinalgError> for CliError {
    fn from(e: SplinalgError) -> CliError {
        CliError::Validation(e.to_string())
    }
}

impl From<PolicyError> for CliError {
    fn from(e: PolicyError) -> CliError {
        match e {
            PolicyError::AsymmetricCost { .. }
            | PolicyError::SingularD
            | PolicyError::DegenerateSlab => CliError::Numerical(e.to_string()),
            PolicyError::Core(c) => c.into(),
            PolicyError::Splinalg(s) => s.into(),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<RtiError> for CliError {
    fn from(e: RtiError) -> CliError {
        match e {
            RtiError::TooShort { .. } => CliError::Validation(e.to_string()),
            RtiError::Core(c) => c.into(),
            RtiError::Policy(p) => p.into(),
            RtiError::Splinalg(s) => s.into(),
        }
    }
}

impl From<BatchError> for CliError {
    fn from(e: BatchError) -> CliError {
        match e {
            BatchError::Core(c) => c.into(),
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> CliError {
        if e.is_io_error() {
            CliError::Io(e.to_string())
        } else {
            CliError::Validation(e.to_string())
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> CliError {
        CliError::Io(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> CliError {
        match e.classify() {
            serde_json::error::Category::Io => CliError::Io(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> CliError {
        match e {
            TrainError::NonFiniteLoss
            | TrainError::DegenerateBaseline { .. }
            | TrainError::Autodiff(_) => CliError::Numerical(e.to_string()),
            TrainError::Rti(r) => r.into(),
            TrainError::Splinalg(s) => s.into(),
            TrainError::Csv(c) => c.into(),
            TrainError::Io(i) => i.into(),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<DatagenError> for CliError {
    fn from(e: DatagenError) -> CliError {
        match e {
            DatagenError::InsufficientData { .. } | DatagenError::ZeroVariance => {
                CliError::Numerical(e.to_string())
            }
            DatagenError::Core(c) => c.into(),
            DatagenError::Io(i) => i.into(),
            DatagenError::Csv(c) => c.into(),
            DatagenError::Json(j) => j.into(),
            DatagenError::MissingManifest => CliError::Validation(e.to_string()),
        }
    }
}

#[derive(Serialize)]
struct Versions {
    #[serde(rename = "rti-cli")]
    cli: &'static str,
    #[serde(rename = "rti-core")]
    core: &'static str,
}

/// Provenance record written once per output directory.
#[derive(Serialize)]
struct RunManifest {
    command: &'static str,
    config: serde_json::Value,
    seeds: Vec<u64>,
    artifacts: Vec<String>,
    versions: Versions,
    wall_time_seconds: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    dataset: Option<DatasetManifest>,
}

fn write_manifest(dir: &Path, manifest: &RunManifest) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(manifest)?;
    text.push('\n');
    fs::write(dir.join("manifest.json"), text)?;
    Ok(())
}

fn versions() -> Versions {
    Versions { cli: env!("CARGO_PKG_VERSION"), core: rti_core::version() }
}

/// Trained parameters plus everything needed to run them: spline shape and
/// the standardization in force during training.
#[derive(Serialize, Deserialize)]
struct Checkpoint {
    policy: PolicyParams,
    d: usize,
    phi: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    standardization: Option<Standardization>,
}

fn read_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    let raw = fs::read_to_string(path)
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&raw)
        .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

fn write_checkpoint(path: &Path, ck: &Checkpoint) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(ck)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate { source, seed, out } => cmd_generate(source, seed, &out),
        Command::Train { data, policy, d, phi, epochs, batch_size, lr, seed, out } => {
            cmd_train(&data, policy, d, phi, epochs, batch_size, lr, seed, &out)
        }
        Command::Eval { data, checkpoint, split, with_batch, out } => {
            cmd_eval(&data, &checkpoint, split, with_batch, &out)
        }
        Command::Reconstruct { checkpoint, input, samples_per_section, out } => {
            cmd_reconstruct(&checkpoint, &input, samples_per_section, &out)
        }
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

fn cmd_generate(source: SourceKind, seed: u64, out: &Path) -> Result<(), CliError> {
    let clock = Instant::now();
    let (split, dataset) = build_dataset(source, seed)?;
    save_dataset(out, &split)?;
    write_manifest(
        out,
        &RunManifest {
            command: "generate",
            config: serde_json::json!({
                "source": source.to_string(),
                "seed": seed,
                "out": out.display().to_string(),
            }),
            seeds: vec![seed],
            artifacts: vec!["train.csv".into(), "val.csv".into(), "test.csv".into()],
            versions: versions(),
            wall_time_seconds: clock.elapsed().as_secs_f64(),
            dataset: Some(dataset),
        },
    )?;
    println!(
        "wrote {}/{}/{} sequences to {}",
        split.train.len(),
        split.val.len(),
        split.test.len(),
        out.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    data: &Path,
    policy: PolicyArg,
    d: usize,
    phi: usize,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    lr: Option<f64>,
    seed: u64,
    out: &Path,
) -> Result<(), CliError> {
    let clock = Instant::now();
    let cfg = SplineConfig::new(d, phi)?;
    let (split, dataset) = load_dataset(data)?;
    let std_split = split.standardized();
    fs::create_dir_all(out)?;

    let mut artifacts = vec!["checkpoint.json".to_string()];
    match policy {
        PolicyArg::Myopic => {
            write_checkpoint(
                &out.join("checkpoint.json"),
                &Checkpoint {
                    policy: PolicyParams::Myopic,
                    d,
                    phi,
                    standardization: Some(dataset.standardization),
                },
            )?;
            println!("wrote myopic checkpoint (nothing to optimize)");
        }
        PolicyArg::Parametrized | PolicyArg::Rnn => {
            let mut tc = match policy {
                PolicyArg::Parametrized => TrainConfig::parametrized(cfg, seed),
                _ => TrainConfig::rnn_based(cfg, seed),
            };
            if let Some(e) = epochs {
                tc.epochs = e;
            }
            if let Some(b) = batch_size {
                if b == 0 {
                    return Err(CliError::Validation("batch size must be at least 1".into()));
                }
                tc.batch_size = b;
            }
            if let Some(l) = lr {
                if !(l > 0.0) {
                    return Err(CliError::Validation(format!(
                        "learning rate must be positive, got {l}"
                    )));
                }
                tc.lr = l;
            }
            let (best, report) = train(&std_split.train, &std_split.val, &tc)?;
            write_checkpoint(
                &out.join("checkpoint.json"),
                &Checkpoint {
                    policy: best,
                    d,
                    phi,
                    standardization: Some(dataset.standardization),
                },
            )?;
            let file = fs::File::create(out.join("report.csv"))?;
            report.write_csv(file)?;
            artifacts.push("report.csv".to_string());
            println!(
                "best epoch {}: validation loss {:.6}",
                report.best_epoch, report.best_val_mean
            );
        }
    }

    write_manifest(
        out,
        &RunManifest {
            command: "train",
            config: serde_json::json!({
                "data": data.display().to_string(),
                "policy": match policy {
                    PolicyArg::Myopic => "myopic",
                    PolicyArg::Parametrized => "parametrized",
                    PolicyArg::Rnn => "rnn",
                },
                "d": d,
                "phi": phi,
                "epochs": epochs,
                "batch_size": batch_size,
                "lr": lr,
                "seed": seed,
                "out": out.display().to_string(),
            }),
            seeds: vec![seed],
            artifacts,
            versions: versions(),
            wall_time_seconds: clock.elapsed().as_secs_f64(),
            dataset: None,
        },
    )?;
    Ok(())
}

fn stats(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

fn apply_standardization(
    st: Standardization,
    seqs: &[IntervalSequence],
) -> Result<Vec<IntervalSequence>, CliError> {
    seqs.iter()
        .map(|s| {
            IntervalSequence::new(s.as_slice().iter().map(|i| st.apply(i)).collect())
                .map_err(CliError::from)
        })
        .collect()
}

fn cmd_eval(
    data: &Path,
    checkpoint: &Path,
    split_arg: SplitArg,
    with_batch: bool,
    out: &Path,
) -> Result<(), CliError> {
    let clock = Instant::now();
    let ck = read_checkpoint(checkpoint)?;
    let cfg = SplineConfig::new(ck.d, ck.phi)?;
    let (split, dataset) = load_dataset(data)?;
    let st = ck.standardization.unwrap_or(dataset.standardization);
    let raw = match split_arg {
        SplitArg::Train => &split.train,
        SplitArg::Val => &split.val,
        SplitArg::Test => &split.test,
    };
    let seqs = apply_standardization(st, raw)?;
    fs::create_dir_all(out)?;

    let policy_kind = ck.policy.kind_name();
    let policy_losses = sequence_losses(&seqs, cfg, &ck.policy)?;
    let is_myopic = matches!(ck.policy, PolicyParams::Myopic);
    let myopic_losses = if is_myopic {
        policy_losses.clone()
    } else {
        sequence_losses(&seqs, cfg, &PolicyParams::Myopic)?
    };
    let batch_losses = if with_batch {
        let mut v = Vec::with_capacity(seqs.len());
        for s in &seqs {
            v.push(batch_interpolate(s, cfg)?.loss);
        }
        Some(v)
    } else {
        None
    };
    for l in policy_losses.iter().chain(&myopic_losses) {
        if !l.is_finite() {
            return Err(CliError::Numerical(
                "reconstruction loss is non-finite (diverging sequence)".into(),
            ));
        }
    }

    let mut losses_out = csv::Writer::from_path(out.join("losses.csv"))?;
    losses_out.write_record(["seq", "policy", "loss"])?;
    let mut write_rows = |name: &str, losses: &[f64]| -> Result<(), csv::Error> {
        for (k, l) in losses.iter().enumerate() {
            losses_out.write_record([&k.to_string(), name, &l.to_string()])?;
        }
        Ok(())
    };
    write_rows(policy_kind, &policy_losses)?;
    if !is_myopic {
        write_rows("myopic", &myopic_losses)?;
    }
    if let Some(bl) = &batch_losses {
        write_rows("batch", bl)?;
    }
    losses_out.flush().map_err(std::io::Error::from)?;
    drop(losses_out);

    let policy_stats = stats(&policy_losses);
    let myopic_stats = stats(&myopic_losses);
    let batch_stats = batch_losses.as_deref().map(stats);

    // Improvement is the share of the myopic-to-batch gap a policy closes,
    // so non-baseline rows need the batch run; the myopic row is 0 and the
    // batch row 100 by definition.
    let mut summary = csv::Writer::from_path(out.join("summary.csv"))?;
    summary.write_record([
        "policy",
        "loss_mean",
        "loss_std",
        "improvement_pct",
        "improvement_err",
    ])?;
    let fmt_opt = |v: Option<(f64, f64)>| match v {
        Some((imp, err)) => (imp.to_string(), err.to_string()),
        None => (String::new(), String::new()),
    };
    let policy_improvement = if is_myopic {
        Some((0.0, 0.0))
    } else if let Some((bm, bs)) = batch_stats {
        let p = LossStats { mean: policy_stats.0, std: policy_stats.1 };
        let m = LossStats { mean: myopic_stats.0, std: myopic_stats.1 };
        let b = LossStats { mean: bm, std: bs };
        Some(improvement_with_uncertainty(p, m, b)?)
    } else {
        None
    };
    let mut rows: Vec<(String, f64, f64, Option<(f64, f64)>)> = vec![(
        policy_kind.to_string(),
        policy_stats.0,
        policy_stats.1,
        policy_improvement,
    )];
    if !is_myopic {
        rows.push(("myopic".into(), myopic_stats.0, myopic_stats.1, Some((0.0, 0.0))));
    }
    if let Some((bm, bs)) = batch_stats {
        rows.push(("batch".into(), bm, bs, Some((100.0, 0.0))));
    }
    for (name, mean, std, imp) in &rows {
        let (i, e) = fmt_opt(*imp);
        summary.write_record([name, &mean.to_string(), &std.to_string(), &i, &e])?;
        match imp {
            Some((iv, _)) => println!("{name}: loss {mean:.6} +- {std:.6}, improvement {iv:.2}%"),
            None => println!("{name}: loss {mean:.6} +- {std:.6}"),
        }
    }
    summary.flush().map_err(std::io::Error::from)?;
    drop(summary);

    write_manifest(
        out,
        &RunManifest {
            command: "eval",
            config: serde_json::json!({
                "data": data.display().to_string(),
                "checkpoint": checkpoint.display().to_string(),
                "split": split_arg.name(),
                "with_batch": with_batch,
                "out": out.display().to_string(),
            }),
            seeds: vec![],
            artifacts: vec!["losses.csv".into(), "summary.csv".into()],
            versions: versions(),
            wall_time_seconds: clock.elapsed().as_secs_f64(),
            dataset: None,
        },
    )?;
    Ok(())
}

/// Streaming interval reader over either accepted input schema.
struct IntervalReader {
    reader: csv::Reader<fs::File>,
    /// Column indexes of x, y, eps.
    cols: (usize, usize, usize),
    /// Column index of seq_id when the input uses the dataset schema.
    seq_col: Option<usize>,
    seen_seq: Option<String>,
    row: usize,
}

impl IntervalReader {
    fn open(path: &Path) -> Result<IntervalReader, CliError> {
        let mut reader = csv::Reader::from_path(path)?;
        let headers = reader.headers()?.clone();
        let find = |name: &str| headers.iter().position(|h| h == name);
        let (x, y, eps) = match (find("x"), find("y"), find("eps")) {
            (Some(x), Some(y), Some(e)) => (x, y, e),
            _ => {
                return Err(CliError::Validation(format!(
                    "unrecognized input schema: expected columns x,y,eps or \
                     seq_id,t,x,y,eps, got {}",
                    headers.iter().collect::<Vec<_>>().join(",")
                )))
            }
        };
        Ok(IntervalReader {
            reader,
            cols: (x, y, eps),
            seq_col: find("seq_id"),
            seen_seq: None,
            row: 0,
        })
    }

    fn next_interval(&mut self) -> Result<Option<Interval>, CliError> {
        let mut record = csv::StringRecord::new();
        if !self.reader.read_record(&mut record)? {
            return Ok(None);
        }
        self.row += 1;
        if let Some(c) = self.seq_col {
            let id = record
                .get(c)
                .ok_or_else(|| {
                    CliError::Validation(format!("row {}: missing seq_id", self.row))
                })?
                .to_string();
            match &self.seen_seq {
                None => self.seen_seq = Some(id),
                Some(first) if *first != id => {
                    return Err(CliError::Validation(format!(
                        "input holds more than one sequence (seq_id {first} then {id}); \
                         reconstruct expects exactly one"
                    )))
                }
                _ => {}
            }
        }
        let field = |idx: usize, name: &str| -> Result<f64, CliError> {
            record
                .get(idx)
                .and_then(|v| v.parse::<f64>().ok())
                .ok_or_else(|| {
                    CliError::Validation(format!("row {}: bad {name} value", self.row))
                })
        };
        Ok(Some(Interval::new(
            field(self.cols.0, "x")?,
            field(self.cols.1, "y")?,
            field(self.cols.2, "eps")?,
        )))
    }
}

fn cmd_reconstruct(
    checkpoint: &Path,
    input: &Path,
    samples_per_section: usize,
    out: &Path,
) -> Result<(), CliError> {
    let clock = Instant::now();
    if samples_per_section == 0 {
        return Err(CliError::Validation(
            "samples-per-section must be at least 1".into(),
        ));
    }
    let ck = read_checkpoint(checkpoint)?;
    let cfg = SplineConfig::new(ck.d, ck.phi)?;
    let out_dir = match out.parent() {
        Some(p) if p != Path::new("") => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&out_dir)?;
    let sections_path = {
        let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("reconstruction");
        out_dir.join(format!("{stem}.sections.csv"))
    };

    // Map into the units the policy was trained in; samples map back out.
    let standardize = |i: &Interval| match ck.standardization {
        Some(st) => st.apply(i),
        None => *i,
    };
    let de_value = |v: f64, order: usize| match ck.standardization {
        Some(st) if order == 0 => v * st.std + st.mean,
        Some(st) => v * st.std,
        None => v,
    };

    let mut samples = csv::Writer::from_path(out)?;
    let mut header = vec!["x".to_string(), "f".to_string()];
    for k in 1..=ck.phi {
        header.push(format!("df{k}"));
    }
    samples.write_record(&header)?;
    let mut sections = csv::Writer::from_path(&sections_path)?;
    let mut s_header = vec!["section".to_string(), "x_left".to_string(), "x_right".to_string()];
    for m in 0..=ck.d {
        s_header.push(format!("c{m}"));
    }
    sections.write_record(&s_header)?;

    let mut reader = IntervalReader::open(input)?;
    let first = reader.next_interval()?.ok_or_else(|| {
        CliError::Validation("input is empty; need at least two intervals".into())
    })?;
    let mut carry: StreamState = initial_state(&standardize(&first), cfg, None)?;
    let mut x_left = first.x;
    let mut section = 0usize;
    let mut sample_rows = 0usize;

    let write_sample =
        |w: &mut csv::Writer<fs::File>, x: f64, coeffs: &[f64], left: f64| -> Result<(), CliError> {
            let mut row = vec![x.to_string()];
            for k in 0..=ck.phi {
                let basis = basis_derivative(x, left, ck.d, k);
                let v = rti_core::linalg::dot(&basis, coeffs);
                row.push(de_value(v, k).to_string());
            }
            w.write_record(&row)?;
            Ok(())
        };

    while let Some(interval) = reader.next_interval()? {
        let stepped = standardize(&interval);
        let (action, next) = stream_step(carry, &stepped, cfg, &ck.policy)?;
        carry = next;
        if action.coeffs().iter().any(|c| !c.is_finite()) {
            return Err(CliError::Numerical(format!(
                "section {section} has non-finite coefficients (diverging reconstruction)"
            )));
        }
        if section == 0 {
            write_sample(&mut samples, x_left, action.coeffs(), x_left)?;
            sample_rows += 1;
        }
        let u = interval.x - x_left;
        for j in 1..=samples_per_section {
            let x = if j == samples_per_section {
                interval.x
            } else {
                x_left + u * j as f64 / samples_per_section as f64
            };
            write_sample(&mut samples, x, action.coeffs(), x_left)?;
            sample_rows += 1;
        }
        let mut row = vec![section.to_string(), x_left.to_string(), interval.x.to_string()];
        for (m, c) in action.coeffs().iter().enumerate() {
            row.push(de_value(*c, usize::from(m > 0)).to_string());
        }
        sections.write_record(&row)?;
        section += 1;
        x_left = interval.x;
    }
    if section == 0 {
        return Err(CliError::Validation(
            "input has fewer than two intervals; nothing to reconstruct".into(),
        ));
    }
    samples.flush().map_err(std::io::Error::from)?;
    sections.flush().map_err(std::io::Error::from)?;

    let artifact_name = |p: &Path| {
        p.file_name()
            .map(|f| f.to_string_lossy().into_owned())
            .unwrap_or_else(|| p.display().to_string())
    };
    write_manifest(
        &out_dir,
        &RunManifest {
            command: "reconstruct",
            config: serde_json::json!({
                "checkpoint": checkpoint.display().to_string(),
                "input": input.display().to_string(),
                "samples_per_section": samples_per_section,
                "out": out.display().to_string(),
            }),
            seeds: vec![],
            artifacts: vec![artifact_name(out), artifact_name(&sections_path)],
            versions: versions(),
            wall_time_seconds: clock.elapsed().as_secs_f64(),
            dataset: None,
        },
    )?;
    println!("wrote {sample_rows} sample rows across {section} sections");
    Ok(())
}
