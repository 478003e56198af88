//! `hyperbrain` command-line driver.
//!
//! Exit codes: 0 on success, 2 for usage or configuration errors, 1 for
//! anything that fails at run time. Error lines start with `error:`.

pub mod config;

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use hyperbrain::data::generate_synthetic;
use hyperbrain::evaluation::{
    basis_similarity_scores, cross_validated_retrieval, export_histogram, export_poincare,
    paired_recall, time_tau, Diagnostics, EvalReport, RecallStats, RecallTable, RetrievalModel,
    RetrievalSetup, TauReport,
};
use hyperbrain::training::{train, TrainState};
use hyperbrain::{Checkpoint, Dataset, DualEncoder, LorentzPoint};

use config::{DataArgs, DataSettings, FitArgs, ModelShape};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const LOSS_LOG_FILE: &str = "loss_log.jsonl";
pub const CONFIG_FILE: &str = "config.json";
pub const REPORT_FILE: &str = "report.json";
pub const POINCARE_FILE: &str = "poincare.csv";
pub const HISTOGRAM_FILE: &str = "histogram.csv";
pub const BRAIN_EMBED_FILE: &str = "brain_embeddings.csv";
pub const TEXT_EMBED_FILE: &str = "text_embeddings.csv";

#[derive(Parser, Debug)]
#[command(name = "hyperbrain", version, about = "Hyperbolic brain/text embeddings")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic region-tree dataset.
    #[command(allow_negative_numbers = true)]
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Train the encoder pair and write a checkpoint plus loss log.
    #[command(allow_negative_numbers = true)]
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from this checkpoint; `--epochs` counts additional epochs.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Retrieval, rank correlation and optional plot exports.
    #[command(allow_negative_numbers = true)]
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Cross-validate by retraining on this many folds instead of
        /// scoring the checkpoint on the whole dataset.
        #[arg(long)]
        folds: Option<usize>,
        #[arg(long, value_delimiter = ',', default_value = "5,10,100")]
        ks: Vec<usize>,
        /// Also report the random-embedding baseline (with `--folds`).
        #[arg(long)]
        with_null: bool,
        /// Dataset whose brain vectors serve as a basis for activation scores.
        #[arg(long)]
        basis: Option<PathBuf>,
        #[arg(long)]
        export_poincare: bool,
        #[arg(long)]
        export_histogram: bool,
    },
    /// Dump per-sample embeddings as CSV.
    #[command(allow_negative_numbers = true)]
    Embed {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

#[derive(Args, Debug)]
struct Common {
    /// Flat JSON settings; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    fit: FitArgs,
}

enum Failure {
    Usage(Vec<String>),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<hyperbrain::Error> for Failure {
    fn from(e: hyperbrain::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

/// Parses `args` (including the program name), runs the command, and
/// returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(Failure::Usage(problems)) => {
            for p in problems {
                eprintln!("error: {p}");
            }
            2
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(Failure::Usage(vec!["threads must be positive".into()]));
        }
        hyperbrain::par::set_thread_count(t);
    }
    match cli.command {
        Command::Generate { out, data } => cmd_generate(&out, &data),
        Command::Train { common, resume } => cmd_train(common, resume.as_deref()),
        Command::Eval {
            common,
            checkpoint,
            folds,
            ks,
            with_null,
            basis,
            export_poincare,
            export_histogram,
        } => cmd_eval(
            common,
            &EvalFlags {
                checkpoint,
                folds,
                ks,
                with_null,
                basis,
                export_poincare,
                export_histogram,
            },
        ),
        Command::Embed { common, checkpoint } => cmd_embed(common, &checkpoint),
    }
}

struct Resolved {
    data: DataSettings,
    shape: ModelShape,
    train: hyperbrain::TrainConfig,
    out_dir: PathBuf,
}

fn resolve(common: Common) -> Result<Resolved, Failure> {
    // Keys that failed to parse are reported alongside range problems in
    // the keys that did.
    let (file_data, file_fit, mut problems) = match &common.config {
        Some(p) => config::read_file(p).map_err(Failure::Usage)?,
        None => Default::default(),
    };
    let data_args = file_data.overlay(common.data);
    let fit_args = file_fit.overlay(common.fit);
    let data = config::resolve_data(&data_args, &mut problems);
    let fit = config::resolve_fit(&fit_args, data.seed, &mut problems);
    match fit {
        Some((shape, train)) if problems.is_empty() => Ok(Resolved {
            data,
            shape,
            train,
            out_dir: common.out_dir,
        }),
        _ => Err(Failure::Usage(problems)),
    }
}

/// One line to stdout. A closed pipe (e.g. `| head`) is not an error for
/// a batch tool whose real outputs are files.
fn emit(line: &impl std::fmt::Display) {
    let _ = writeln!(std::io::stdout().lock(), "{line}");
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> anyhow::Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn cmd_generate(out: &Path, data: &DataArgs) -> Result<(), Failure> {
    let mut problems = Vec::new();
    if data.data.is_some() {
        problems.push("data: generate writes a synthetic dataset; use --out".into());
    }
    let settings = config::resolve_data(data, &mut problems);
    let config::Source::Synthetic(spec) = settings.source else {
        return Err(Failure::Usage(problems));
    };
    if !problems.is_empty() {
        return Err(Failure::Usage(problems));
    }
    let ds = generate_synthetic(&spec)?;
    ds.save(out)?;
    emit(&json!({
        "path": out.display().to_string(),
        "samples": ds.len(),
        "brain_dim": ds.brain_dim(),
        "text_dim": ds.text_dim(),
        "nodes": spec.node_count(),
    }));
    Ok(())
}

fn cmd_train(common: Common, resume: Option<&Path>) -> Result<(), Failure> {
    let r = resolve(common)?;
    let echo = config::echo(&r.data, &r.shape, &r.train);
    emit(&json!({ "config": echo }));

    let ds = r.data.source.load(r.data.delta)?;
    let state = match resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            ck.model.check_dataset(&ds)?;
            ck.into_state()
        }
        None => {
            let (b, t) = r.shape.encoders(ds.brain_dim(), ds.text_dim(), r.train.seed);
            TrainState::fresh(DualEncoder::init(b, t, r.train.loss.curvature)?)
        }
    };

    create_dir(&r.out_dir)?;
    let log_path = r.out_dir.join(LOSS_LOG_FILE);
    let mut log = fs::File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?;
    let mut io_error = None;
    let (state, _) = train(&ds, state, &r.train, &mut |rec| {
        let line = serde_json::to_string(rec).expect("record serialises");
        emit(&line);
        if io_error.is_none() {
            io_error = writeln!(log, "{line}").err();
        }
    })?;
    if let Some(e) = io_error {
        return Err(anyhow::Error::new(e).context(format!("writing {}", log_path.display())).into());
    }

    let ck_path = r.out_dir.join(CHECKPOINT_FILE);
    Checkpoint::from_state(&state, r.train.seed).save(&ck_path)?;
    write_file(
        &r.out_dir.join(CONFIG_FILE),
        serde_json::to_string_pretty(&Value::Object(echo)).expect("config serialises"),
    )?;
    emit(&json!({
        "checkpoint": ck_path.display().to_string(),
        "epochs_completed": state.epochs_completed,
    }));
    Ok(())
}

struct EvalFlags {
    checkpoint: PathBuf,
    folds: Option<usize>,
    ks: Vec<usize>,
    with_null: bool,
    basis: Option<PathBuf>,
    export_poincare: bool,
    export_histogram: bool,
}

fn load_model(path: &Path, ds: &Dataset) -> anyhow::Result<DualEncoder> {
    let ck = Checkpoint::load(path)?;
    ck.model.check_dataset(ds)?;
    Ok(ck.model)
}

fn cmd_eval(common: Common, flags: &EvalFlags) -> Result<(), Failure> {
    let r = resolve(common)?;
    if flags.folds.is_some_and(|k| k < 2) {
        return Err(Failure::Usage(vec!["folds must be at least 2".into()]));
    }
    let ds = r.data.source.load(r.data.delta)?;
    let model = load_model(&flags.checkpoint, &ds)?;
    let c = model.curvature;
    let emb = model.embed(&ds)?;
    let counts = ds.region_counts();
    let mut diag = Diagnostics {
        samples: ds.len(),
        ..Default::default()
    };

    let mut recall = RecallTable::new();
    match flags.folds {
        Some(k) => {
            let train = hyperbrain::TrainConfig {
                loss: hyperbrain::LossConfig {
                    curvature: c,
                    ..r.train.loss
                },
                ..r.train
            };
            let setup = RetrievalSetup {
                k_folds: k,
                ks: flags.ks.clone(),
                seed: r.train.seed,
                brain: model.brain.config,
                text: model.text.config,
                train,
            };
            let mut models = vec![("", RetrievalModel::Trained)];
            if flags.with_null {
                models.push(("null_", RetrievalModel::Null));
            }
            for (prefix, m) in models {
                let rep = cross_validated_retrieval(&ds, &setup, m)?;
                diag.degenerate_pairs += rep.degenerate_pairs;
                if prefix.is_empty() {
                    diag.notes.extend(rep.skipped);
                }
                for (dir, table) in rep.recall {
                    recall.insert(format!("{prefix}{dir}"), table);
                }
            }
            diag.notes.push(format!("{k}-fold cross-validation, retrained per fold"));
        }
        None => {
            let mut ks = Vec::new();
            for &k in &flags.ks {
                if k == 0 || k > ds.len() {
                    diag.notes.push(format!("recall@{k} skipped: {} samples", ds.len()));
                } else {
                    ks.push(k);
                }
            }
            let (by_dir, deg) = paired_recall(&emb.brain, &emb.text, &ks, c)?;
            diag.degenerate_pairs += deg;
            for (dir, vals) in by_dir {
                let table = recall.entry(dir.key().to_string()).or_default();
                for (k, v) in ks.iter().zip(vals) {
                    table.insert(*k, RecallStats::from_folds(vec![v]));
                }
            }
            diag.notes.push("checkpoint scored on the full dataset".into());
        }
    }

    let tau = TauReport {
        brain: time_tau(&emb.brain, &counts, "brain", &mut diag.notes),
        text: time_tau(&emb.text, &counts, "text", &mut diag.notes),
    };

    let mut basis_scores = Vec::new();
    if let Some(path) = &flags.basis {
        let basis_ds = hyperbrain::data::load_dataset(path)?;
        if basis_ds.brain_dim() != model.brain.config.input_dim {
            return Err(anyhow::anyhow!(
                "basis brain_dim {} but checkpoint brain input_dim {}",
                basis_ds.brain_dim(),
                model.brain.config.input_dim
            )
            .into());
        }
        let inputs: Vec<&[f64]> = basis_ds.samples().iter().map(|s| s.brain.as_slice()).collect();
        let (basis, _) = model.brain.forward_batch(&inputs, c)?;
        for t in &emb.text {
            let s = basis_similarity_scores(t, &basis, c)?;
            diag.degenerate_pairs += s.degenerate;
            basis_scores.push(s.probabilities);
        }
    }

    create_dir(&r.out_dir)?;
    if flags.export_poincare {
        let (points, labels) = labelled(&emb.brain, &emb.text);
        export_poincare(&points, &labels, c, r.out_dir.join(POINCARE_FILE))?;
    }
    if flags.export_histogram {
        export_histogram(&emb.brain, &counts, r.out_dir.join(HISTOGRAM_FILE))?;
    }

    let report = EvalReport {
        recall,
        tau,
        basis_scores,
        diagnostics: diag,
    };
    let json = report.to_json();
    write_file(&r.out_dir.join(REPORT_FILE), &json)?;
    emit(&json);
    Ok(())
}

fn labelled(brain: &[LorentzPoint], text: &[LorentzPoint]) -> (Vec<LorentzPoint>, Vec<String>) {
    let points = brain.iter().chain(text).cloned().collect();
    let labels = (0..brain.len())
        .map(|i| format!("brain:{i}"))
        .chain((0..text.len()).map(|i| format!("text:{i}")))
        .collect();
    (points, labels)
}

fn embedding_csv(points: &[LorentzPoint]) -> String {
    let d = points.first().map_or(0, LorentzPoint::dim);
    let mut out = String::from("time");
    for k in 0..d {
        write!(out, ",s{k}").expect("write to string");
    }
    out.push('\n');
    for p in points {
        write!(out, "{}", p.time()).expect("write to string");
        for v in p.space() {
            write!(out, ",{v}").expect("write to string");
        }
        out.push('\n');
    }
    out
}

fn cmd_embed(common: Common, checkpoint: &Path) -> Result<(), Failure> {
    let r = resolve(common)?;
    let ds = r.data.source.load(r.data.delta)?;
    let model = load_model(checkpoint, &ds)?;
    let emb = model.embed(&ds)?;
    create_dir(&r.out_dir)?;
    for (name, pts) in [(BRAIN_EMBED_FILE, &emb.brain), (TEXT_EMBED_FILE, &emb.text)] {
        let path = r.out_dir.join(name);
        write_file(&path, embedding_csv(pts))?;
        emit(&json!({ "path": path.display().to_string(), "rows": pts.len() }));
    }
    Ok(())
}
