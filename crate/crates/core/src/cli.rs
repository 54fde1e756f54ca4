//! Command-line interface: dataset generation, training, evaluation, the
//! k-sweep study, and attention-matrix export.
//!
//! Exit codes: 0 success, 1 usage error, 2 data/I-O error, 3 numeric
//! failure. Settings layer as defaults < `--config` file < explicit flags.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use crate::analysis::{
    accumulate_kc_attention, default_soft_grid, default_topk_grid, matrix_to_csv,
    mode_note, sweep_k, sweep_to_csv, KcAccum, KcRelationMatrix, DEFAULT_TOP_M,
};
use crate::attention::{Renorm, SparseMode};
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::load_train_config;
use crate::data::{gen_synthetic, load_sequences, save_dataset, split, Dataset};
use crate::error::{Error, Result};
use crate::heatmap::export_heatmap;
use crate::training::{evaluate, log_to_csv, train, Checkpoint, EpochStat, TrainConfig};

#[derive(Parser, Debug)]
#[command(
    name = "sparsekt",
    version,
    about = "Sparse-attention knowledge tracing: train, evaluate, analyze"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate a synthetic interaction dataset
    GenSynth(GenSynthArgs),
    /// Train a model and write a checkpoint plus an epoch log
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split
    Eval(EvalArgs),
    /// Train one model per k and report validation metrics
    SweepK(SweepArgs),
    /// Export the KC-relation attention matrix (CSV + SVG heatmap)
    ExportAttention(ExportArgs),
}

#[derive(Args, Debug)]
struct GenSynthArgs {
    /// Output path; a `.meta` sidecar is written next to it
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 500)]
    students: usize,
    #[arg(long, default_value_t = 50)]
    kcs: usize,
    #[arg(long, default_value_t = 200)]
    questions: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Training settings; unset flags fall back to the config file, then to
/// defaults.
#[derive(Args, Debug, Clone)]
struct ConfigArgs {
    /// Flat key=value settings file
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// soft | topk | dense
    #[arg(long)]
    mode: Option<String>,
    /// Soft threshold in (0,1] or top-k count
    #[arg(long)]
    k: Option<f64>,
    /// resoftmax | sumnorm
    #[arg(long)]
    renorm: Option<String>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    n_heads: Option<usize>,
    #[arg(long)]
    positions: Option<bool>,
    #[arg(long)]
    projections: Option<bool>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<TrainConfig<f64>> {
        let cfg = self.layer()?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Merge defaults, config file, and flags without validating; callers
    /// that rewrite fields afterwards (sweep-k replaces k from its grid)
    /// validate the final value themselves.
    fn layer(&self) -> Result<TrainConfig<f64>> {
        let mut cfg = match &self.config {
            Some(path) => load_train_config(path)?,
            None => TrainConfig::default(),
        };
        if let Some(v) = self.d {
            cfg.d = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.lr {
            cfg.lr = v;
        }
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.patience {
            cfg.patience = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = &self.mode {
            cfg.sparse.mode = SparseMode::parse(v)?;
        }
        if let Some(v) = self.k {
            cfg.sparse.k = v;
        }
        if let Some(v) = &self.renorm {
            cfg.sparse.renorm = Renorm::parse(v)?;
        }
        if let Some(v) = self.dropout {
            cfg.dropout = v;
        }
        if let Some(v) = self.n_heads {
            cfg.flags.n_heads = v;
        }
        if let Some(v) = self.positions {
            cfg.flags.positions = v;
        }
        if let Some(v) = self.projections {
            cfg.flags.projections = v;
        }
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Interaction data file (4 lines per student record)
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long, default_value = "checkpoint.spkt")]
    out_checkpoint: PathBuf,
    #[arg(long, default_value = "epochs.csv")]
    out_log: PathBuf,
    /// Suppress per-epoch progress lines
    #[arg(long, default_value_t = false)]
    quiet: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// train | valid | test | all (split derived from the checkpoint's seed)
    #[arg(long, default_value = "test")]
    split: String,
    /// Write per-position predictions as CSV
    #[arg(long)]
    dump_predictions: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Comma-separated k grid; defaults to 0.1..1.0 (soft) or 1..10 (topk)
    #[arg(long)]
    grid: Option<String>,
    /// Parallel training runs (default: available cores)
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long, default_value = "sweep.csv")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Writes <prefix>.csv, <prefix>.svg, <prefix>.meta
    #[arg(long, default_value = "attention")]
    out_prefix: PathBuf,
    /// Heatmap side length: the top-m most frequent KCs
    #[arg(long, default_value_t = DEFAULT_TOP_M)]
    top_m: usize,
    /// Accumulate across a fresh training run (the checkpoint's config)
    /// instead of one pass over the trained model
    #[arg(long, default_value_t = false)]
    during_training: bool,
}

/// Parse argv and run. Returns the process exit code; never panics on bad
/// input.
pub fn cli_dispatch<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.cmd) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::GenSynth(a) => run_gen_synth(a),
        Cmd::Train(a) => run_train(a),
        Cmd::Eval(a) => run_eval(a),
        Cmd::SweepK(a) => run_sweep(a),
        Cmd::ExportAttention(a) => run_export(a),
    }
}

fn run_gen_synth(a: GenSynthArgs) -> Result<()> {
    let ds = gen_synthetic(a.students, a.kcs, a.questions, a.seed)?;
    save_dataset(&ds, &a.out)?;
    let n: usize = ds.sequences.iter().map(|s| s.items.len()).sum();
    println!(
        "wrote {} sequences ({} interactions, {} KCs, {} questions) to {}",
        ds.sequences.len(),
        n,
        ds.meta.n_kcs,
        ds.meta.n_questions,
        a.out.display()
    );
    Ok(())
}

fn print_epoch(s: &EpochStat) {
    println!(
        "epoch {:>3}: train_loss={:.6} valid_auc={:.6} valid_acc={:.6} ({:.2}s)",
        s.epoch, s.train_loss, s.valid_auc, s.valid_acc, s.seconds
    );
    if s.clip_events > 0 {
        println!("epoch {:>3}: gradient clipped on {} batches", s.epoch, s.clip_events);
    }
}

fn run_train(a: TrainArgs) -> Result<()> {
    let cfg = a.cfg.resolve()?;
    let ds = load_sequences(&a.data)?;
    let result = train(&ds, &cfg, None)?;
    if !a.quiet {
        for s in &result.log {
            print_epoch(s);
        }
    }
    save_checkpoint(&result.checkpoint, &a.out_checkpoint)?;
    std::fs::write(&a.out_log, log_to_csv(&result.log))?;
    println!(
        "best epoch {} valid_auc={:.6}; checkpoint -> {}; log -> {}",
        result.checkpoint.epoch,
        result.checkpoint.valid_auc,
        a.out_checkpoint.display(),
        a.out_log.display()
    );
    Ok(())
}

fn pick_split(ds: &Dataset, seed: u64, which: &str) -> Result<Vec<crate::data::InteractionSequence>> {
    if which == "all" {
        return Ok(ds.sequences.clone());
    }
    let parts = split(ds, seed, ds.meta.fractions)?;
    match which {
        "train" => Ok(parts.train),
        "valid" => Ok(parts.valid),
        "test" => Ok(parts.test),
        other => Err(Error::Usage(format!(
            "unknown split {other:?} (expected train, valid, test, or all)"
        ))),
    }
}

fn run_eval(a: EvalArgs) -> Result<()> {
    let ck: Checkpoint<f64> = load_checkpoint(&a.checkpoint)?;
    let ds = load_sequences(&a.data)?;
    let seqs = pick_split(&ds, ck.cfg.seed, &a.split)?;
    if seqs.is_empty() {
        return Err(Error::Data(format!("split {:?} is empty", a.split)));
    }
    let report = evaluate(&ck, &seqs)?;
    if let Some(path) = &a.dump_predictions {
        let mut out = String::from("student,position,question,kc,label,pred\n");
        for p in &report.predictions {
            let q = ds.meta.question_ids.get(p.question).copied().unwrap_or(p.question as u64);
            let kc = ds.meta.kc_ids.get(p.kc).copied().unwrap_or(p.kc as u64);
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                p.student_id, p.position, q, kc, p.label, p.pred
            ));
        }
        std::fs::write(path, out)?;
    }
    let fmt = |v: Option<f64>| match v {
        Some(x) => format!("{x:.6}"),
        None => "undefined".to_string(),
    };
    println!("auc={} acc={}", fmt(report.auc), fmt(report.accuracy));
    Ok(())
}

fn run_sweep(a: SweepArgs) -> Result<()> {
    let mut cfg = a.cfg.layer()?;
    let mode = cfg.sparse.mode;
    if matches!(mode, SparseMode::Dense) {
        return Err(Error::Usage(
            "sweep-k needs --mode soft or --mode topk (dense has no k)".into(),
        ));
    }
    let grid: Vec<f64> = match &a.grid {
        Some(text) => {
            let mut g = Vec::new();
            for part in text.split(',') {
                g.push(part.trim().parse::<f64>().map_err(|_| {
                    Error::Usage(format!("bad grid value {part:?}"))
                })?);
            }
            g
        }
        None => match mode {
            SparseMode::Soft => default_soft_grid(),
            SparseMode::TopK => default_topk_grid(),
            SparseMode::Dense => unreachable!(),
        },
    };
    // The grid supplies k; any base k (often another mode's default) is
    // never trained with, so validate against the first grid entry instead.
    cfg.sparse.k = grid[0];
    cfg.validate()?;
    let ds = load_sequences(&a.data)?;
    let threads = a.threads.unwrap_or_else(|| {
        std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
    });
    let report = sweep_k(&ds, &cfg, mode, &grid, threads)?;
    let csv = sweep_to_csv(&report);
    std::fs::write(&a.out, &csv)?;
    print!("{csv}");
    if let Some(best) = report.best_auc() {
        println!("best: k={} valid_auc={:.6}", best.k, best.valid_auc);
    }
    println!("report -> {}", a.out.display());
    Ok(())
}

fn write_export(
    m: &KcRelationMatrix,
    ds: &Dataset,
    prefix: &Path,
    during_training: bool,
) -> Result<()> {
    let csv_path = prefix.with_extension("csv");
    let svg_path = prefix.with_extension("svg");
    let meta_path = prefix.with_extension("meta");
    std::fs::write(&csv_path, matrix_to_csv(m, &ds.meta.kc_ids))?;
    let labels: Vec<String> = m
        .top_ids
        .iter()
        .map(|&i| {
            ds.meta
                .kc_ids
                .get(i)
                .map(|v| v.to_string())
                .unwrap_or_else(|| i.to_string())
        })
        .collect();
    export_heatmap(&m.top, &labels, &svg_path)?;
    let meta = format!(
        "mode = {}\nduring_training = {}\nqueries = {}\nraw_mass = {}\ntop_kcs = {}\n",
        m.mode_note,
        during_training,
        m.n_queries,
        m.raw.data().iter().sum::<f64>(),
        labels.join(","),
    );
    std::fs::write(&meta_path, meta)?;
    println!(
        "attention matrix -> {} / {} / {}",
        csv_path.display(),
        svg_path.display(),
        meta_path.display()
    );
    Ok(())
}

fn run_export(a: ExportArgs) -> Result<()> {
    let ck: Checkpoint<f64> = load_checkpoint(&a.checkpoint)?;
    let ds = load_sequences(&a.data)?;
    let parts = split(&ds, ck.cfg.seed, ds.meta.fractions)?;
    let m = if a.during_training {
        // literal reading: accumulate over every epoch of a fresh run
        let mut acc = KcAccum::new(ck.params.dims.n_kcs);
        let mut hook = |_epoch: usize, n: usize, records: &[crate::model::AttnRecord]| {
            acc.add(n, records);
        };
        train(&ds, &ck.cfg, Some(&mut hook))?;
        acc.finish(&parts.train, a.top_m, mode_note(&ck.cfg))?
    } else {
        accumulate_kc_attention(&ck, &parts.train, a.top_m)?
    };
    write_export(&m, &ds, &a.out_prefix, a.during_training)
}
