//! `lrqk` command line.
//!
//! Every subcommand reads one or more heads, either generated from a
//! synthetic spec or loaded from a trace file, and writes CSV/JSON into an
//! output directory. Files produced per head carry an `_h{index}` suffix.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;

use crate::decode::DecodeConfig;
use crate::error::{LrqkError, Result};
use crate::prefill::{
    prefill_factorize_traced, relative_residuals, InitStrategy, PrefillConfig, Residuals,
};
use crate::session::{run_simulation, write_report_csv, SessionConfig, SimulationSummary};
use crate::workload::{
    gen_recency_biased, group_heads, heads_to_tensors, load_trace, neighbor_attention_profile,
    save_trace, singular_spectrum, write_profile_csv, write_spectrum_csv, HeadTensors,
    SyntheticSpec, Workload,
};

pub const THREADS_ENV: &str = "LRQK_THREADS";

#[derive(Debug, Parser)]
#[command(
    name = "lrqk",
    version,
    about = "Low-rank query/key attention with a two-tier KV cache"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Prefill factorization only: residuals and objective trajectory.
    Factorize {
        #[command(flatten)]
        source: SourceArgs,
        #[command(flatten)]
        tuning: TuningArgs,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Prefill followed by a decode run with cache accounting.
    Simulate {
        #[command(flatten)]
        source: SourceArgs,
        #[command(flatten)]
        tuning: TuningArgs,
        /// Decode steps; taken from the tail of each head.
        #[arg(long, default_value_t = 128)]
        steps: usize,
        /// Skip the per-step full-history oracles.
        #[arg(long)]
        no_quality: bool,
        /// Bins of the per-step miss-rate histogram.
        #[arg(long, default_value_t = 10)]
        hist_bins: usize,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Singular values of Q and K per head, plus their mean.
    Spectrum {
        #[command(flatten)]
        source: SourceArgs,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Mean attention mass on the most recent keys.
    Recency {
        #[command(flatten)]
        source: SourceArgs,
        #[arg(long, default_value_t = 16)]
        window: usize,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Writes synthetic heads to a trace file.
    Synth {
        #[command(flatten)]
        synthetic: SyntheticArgs,
        /// Trace file to create.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Args)]
pub struct SyntheticArgs {
    /// Sequence length per head.
    #[arg(long, default_value_t = 1024)]
    pub len: usize,
    #[arg(long, default_value_t = 64)]
    pub dim: usize,
    /// Rank of the generated Q and K.
    #[arg(long, default_value_t = 16)]
    pub true_rank: usize,
    /// Singular values follow `decay^i`.
    #[arg(long, default_value_t = 0.9)]
    pub decay: f64,
    /// Pull of each key toward the queries right after it.
    #[arg(long, default_value_t = 0.0)]
    pub recency: f64,
    #[arg(long, default_value_t = 1.0)]
    pub amplitude: f64,
    #[arg(long, default_value_t = 1)]
    pub heads: usize,
    /// Seeds both the generator (head `h` uses `seed + h`) and random init.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl SyntheticArgs {
    fn spec(&self, head: usize) -> SyntheticSpec {
        SyntheticSpec {
            l: self.len,
            d: self.dim,
            r_true: self.true_rank,
            decay: self.decay,
            recency_strength: self.recency,
            seed: self.seed.wrapping_add(head as u64),
            amplitude: self.amplitude,
        }
    }

    fn generate(&self) -> Result<Vec<Workload>> {
        if self.heads == 0 {
            return Err(LrqkError::InvalidConfig("heads must be at least 1".into()));
        }
        (0..self.heads)
            .map(|h| gen_recency_biased(&self.spec(h)))
            .collect()
    }
}

#[derive(Debug, Clone, Args)]
pub struct SourceArgs {
    /// Read heads from a trace file instead of generating them.
    #[arg(long, conflicts_with_all = ["len", "dim", "true_rank", "decay", "recency", "amplitude", "heads"])]
    pub trace: Option<PathBuf>,
    #[command(flatten)]
    pub synthetic: SyntheticArgs,
}

impl SourceArgs {
    fn load(&self) -> Result<Vec<Workload>> {
        match &self.trace {
            Some(path) => {
                let (_, heads) = group_heads(&load_trace(path)?)?;
                heads
                    .into_iter()
                    .map(|HeadTensors { q, k, v }| Workload::new(q, k, v))
                    .collect()
            }
            None => self.synthetic.generate(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum InitArg {
    Randn,
    Top,
    Topcol,
}

#[derive(Debug, Clone, Args)]
pub struct TuningArgs {
    #[arg(long, default_value_t = 32)]
    pub rank: usize,
    /// Active-token budget.
    #[arg(long, default_value_t = 2048)]
    pub topk: usize,
    /// Recent tokens always kept resident.
    #[arg(long, default_value_t = 64)]
    pub lite: usize,
    #[arg(long, default_value_t = 2)]
    pub max_iter: usize,
    #[arg(long, default_value_t = 0.01)]
    pub tol: f64,
    #[arg(long, default_value_t = 1.0)]
    pub lambda_pq: f64,
    #[arg(long, default_value_t = 1.0)]
    pub lambda_pk: f64,
    #[arg(long, default_value_t = 1.0)]
    pub lambda_d1: f64,
    #[arg(long, default_value_t = 1.0)]
    pub lambda_d2: f64,
    #[arg(long, value_enum, default_value_t = InitArg::Randn)]
    pub init: InitArg,
}

impl TuningArgs {
    pub fn session_config(&self, seed: u64) -> SessionConfig {
        let init = match self.init {
            InitArg::Randn => InitStrategy::Randn { seed },
            InitArg::Top => InitStrategy::TopR,
            InitArg::Topcol => InitStrategy::TopCol,
        };
        SessionConfig {
            prefill: PrefillConfig {
                rank: self.rank,
                lambda_pq: self.lambda_pq,
                lambda_pk: self.lambda_pk,
                max_iter: self.max_iter,
                tol: self.tol,
                init,
            },
            decode: DecodeConfig {
                lambda_d1: self.lambda_d1,
                lambda_d2: self.lambda_d2,
                max_iter: self.max_iter,
                tol: self.tol,
            },
            k_budget: self.topk,
            lite_budget: self.lite,
            track_quality: true,
        }
    }
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code: 0 on success, 2 for usage or configuration errors,
/// 1 for everything else.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("lrqk: {e}");
            exit_code(&e)
        }
    }
}

fn exit_code(e: &LrqkError) -> i32 {
    match e {
        LrqkError::InvalidConfig(_)
        | LrqkError::RankTooLarge { .. }
        | LrqkError::WindowTooLarge { .. } => 2,
        _ => 1,
    }
}

fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(raw) = std::env::var(THREADS_ENV) {
        let n: usize = raw.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
            LrqkError::InvalidConfig(format!(
                "{THREADS_ENV} must be a positive integer, got {raw:?}"
            ))
        })?;
        builder = builder.num_threads(n);
    }
    builder
        .build()
        .map_err(|e| LrqkError::InvalidConfig(format!("thread pool: {e}")))
}

/// Runs `f` over the heads on the worker pool; results keep head order.
fn per_head<T, F>(heads: &[Workload], f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(&Workload) -> Result<T> + Sync,
{
    thread_pool()?.install(|| heads.par_iter().map(&f).collect())
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<()> {
    let mut w = create(dir, name)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Factorize {
            source,
            tuning,
            out,
        } => factorize(&source, &tuning, &out),
        Command::Simulate {
            source,
            tuning,
            steps,
            no_quality,
            hist_bins,
            out,
        } => simulate(&source, &tuning, steps, !no_quality, hist_bins, &out),
        Command::Spectrum { source, out } => spectrum(&source, &out),
        Command::Recency {
            source,
            window,
            out,
        } => recency(&source, window, &out),
        Command::Synth { synthetic, out } => {
            let heads: Vec<HeadTensors> = synthetic
                .generate()?
                .into_iter()
                .map(|w| HeadTensors {
                    q: w.q,
                    k: w.k,
                    v: w.v,
                })
                .collect();
            save_trace(&out, &heads_to_tensors(&heads))
        }
    }
}

#[derive(Serialize)]
struct FactorizeRow {
    head: usize,
    q_rel: f64,
    k_rel: f64,
    qk_rel: f64,
    sweeps: usize,
    converged: bool,
}

fn factorize(source: &SourceArgs, tuning: &TuningArgs, out: &Path) -> Result<()> {
    let cfg = tuning.session_config(source.synthetic.seed).prefill;
    let heads = source.load()?;
    if let Some(w) = heads.first() {
        cfg.validate(w.dim())?;
    }
    let results = per_head(&heads, |w| {
        let (input, _) = w.clone().into_prefill_input()?;
        let (f, trace) = prefill_factorize_traced(&input, &cfg)?;
        Ok((relative_residuals(&input, &f)?, trace))
    })?;

    fs::create_dir_all(out)?;
    let mut res = csv::Writer::from_writer(create(out, "residuals.csv")?);
    for (h, (r, trace)) in results.iter().enumerate() {
        let Residuals {
            q_rel,
            k_rel,
            qk_rel,
        } = *r;
        res.serialize(FactorizeRow {
            head: h,
            q_rel,
            k_rel,
            qk_rel,
            sweeps: trace.sweeps(),
            converged: trace.converged,
        })?;
        let mut w = csv::Writer::from_writer(create(out, &format!("trajectory_h{h}.csv"))?);
        w.write_record(["sweep", "lagrangian", "factor_change"])?;
        for (s, l) in trace.lagrangian.iter().enumerate() {
            let change = s.checked_sub(1).map(|i| trace.factor_change[i].to_string());
            w.write_record([s.to_string(), l.to_string(), change.unwrap_or_default()])?;
        }
        w.flush()?;
    }
    res.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct SimulateOutput<'a> {
    heads: Vec<&'a SimulationSummary>,
    mean_miss_rate: Option<f64>,
}

fn simulate(
    source: &SourceArgs,
    tuning: &TuningArgs,
    steps: usize,
    track_quality: bool,
    hist_bins: usize,
    out: &Path,
) -> Result<()> {
    let cfg = SessionConfig {
        track_quality,
        ..tuning.session_config(source.synthetic.seed)
    };
    let mut heads = source.load()?;
    if source.trace.is_none() {
        // generate the decode stream after the requested prompt length
        let extended = SyntheticArgs {
            len: source.synthetic.len + steps,
            ..source.synthetic.clone()
        };
        heads = extended.generate()?;
    }
    if let Some(w) = heads.first() {
        cfg.validate(w.dim())?;
        if steps >= w.len() {
            return Err(LrqkError::InvalidConfig(format!(
                "{steps} decode steps leave no prompt in a {}-token head",
                w.len()
            )));
        }
    }
    let results = per_head(&heads, |w| {
        let (input, v, stream) = w.split(w.len() - steps)?;
        run_simulation(&input, &v, &stream, cfg)
    })?;

    fs::create_dir_all(out)?;
    for (h, r) in results.iter().enumerate() {
        write_report_csv(create(out, &format!("report_h{h}.csv"))?, &r.reports)?;
        r.stats
            .write_csv(create(out, &format!("stats_h{h}.csv"))?)?;
        let mut w = csv::Writer::from_writer(create(out, &format!("miss_hist_h{h}.csv"))?);
        w.write_record(["lo", "hi", "count"])?;
        for (lo, hi, c) in r.stats.miss_rate_histogram(hist_bins) {
            w.write_record([lo.to_string(), hi.to_string(), c.to_string()])?;
        }
        w.flush()?;
    }
    let (miss, total) = results.iter().fold((0u64, 0u64), |(m, t), r| {
        (m + r.stats.c_miss, t + r.stats.c_total)
    });
    let summary = SimulateOutput {
        heads: results.iter().map(|r| &r.summary).collect(),
        mean_miss_rate: (total > 0).then(|| miss as f64 / total as f64),
    };
    write_json(out, "summary.json", &summary)
}

/// Elementwise mean of equally long vectors.
fn mean_of(rows: &[Vec<f64>]) -> Vec<f64> {
    let n = rows.len().max(1) as f64;
    let width = rows.first().map_or(0, Vec::len);
    (0..width)
        .map(|i| rows.iter().map(|r| r[i]).sum::<f64>() / n)
        .collect()
}

fn spectrum(source: &SourceArgs, out: &Path) -> Result<()> {
    let heads = source.load()?;
    let spectra = per_head(&heads, |w| {
        Ok((singular_spectrum(&w.q), singular_spectrum(&w.k)))
    })?;
    fs::create_dir_all(out)?;
    for (h, (sq, sk)) in spectra.iter().enumerate() {
        write_spectrum_csv(create(out, &format!("spectrum_q_h{h}.csv"))?, sq)?;
        write_spectrum_csv(create(out, &format!("spectrum_k_h{h}.csv"))?, sk)?;
    }
    let (qs, ks): (Vec<_>, Vec<_>) = spectra.into_iter().unzip();
    write_spectrum_csv(create(out, "spectrum_q_mean.csv")?, &mean_of(&qs))?;
    write_spectrum_csv(create(out, "spectrum_k_mean.csv")?, &mean_of(&ks))?;
    Ok(())
}

fn recency(source: &SourceArgs, window: usize, out: &Path) -> Result<()> {
    let heads = source.load()?;
    let profiles = per_head(&heads, |w| neighbor_attention_profile(&w.q, &w.k, window))?;
    fs::create_dir_all(out)?;
    for (h, p) in profiles.iter().enumerate() {
        write_profile_csv(create(out, &format!("profile_h{h}.csv"))?, p)?;
    }
    write_profile_csv(create(out, "profile_mean.csv")?, &mean_of(&profiles))
}
