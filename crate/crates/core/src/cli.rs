//! Command-line interface: training, evaluation, ablation, synthetic data
//! generation, scan benchmarking, and gradient checking.
//!
//! Exit codes: `0` success, `2` configuration problems (including bad
//! flags), `3` missing or corrupt data files, `1` everything else
//! (numerical failures, failed checks).
//!
//! The base seed is resolved with a fixed precedence: the `--seed` flag
//! beats the `BIMAMSLEEP_SEED` environment variable, which beats the
//! config file, which beats the built-in default of 42.

use std::path::PathBuf;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use crate::bimamba;
use crate::error::{Error, Result};
use crate::features;
use crate::graph::Graph;
use crate::metrics::{render_csv, render_text};
use crate::model::{grad_check_model, SleepModel};
use crate::nn::gradcheck::{primitive_reports, GradCheckReport};
use crate::signal_io::epb::write_epb;
use crate::signal_io::synth::{synth_generate, SynthConfig};
use crate::signal_io::{load_dataset, EpochDataset, SleepStage};
use crate::tensor::NdArray;
use crate::training::{cross_validate, evaluate_confusion, run_ablation, TrainConfig};

#[derive(Parser)]
#[command(
    name = "bimamsleep",
    version,
    about = "EEG sleep staging with a triple-resolution CNN and a bidirectional selective state-space sequence model"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train with subject-wise cross-validation and write reports.
    Train(TrainArgs),
    /// Score a saved model on a dataset.
    Evaluate(EvaluateArgs),
    /// Train every sequence-module variant on one fold and tabulate scores.
    Ablate(TrainArgs),
    /// Generate a synthetic labeled cohort: EPB files plus a manifest.
    GenSynthetic(GenSyntheticArgs),
    /// Time the selective scan across sequence lengths.
    ScanBench(ScanBenchArgs),
    /// Verify analytic gradients against finite differences.
    GradCheck(GradCheckArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Manifest CSV or a single EPB file (sniffed by content).
    #[arg(long)]
    data: PathBuf,
    /// TOML training recipe; defaults apply for every omitted field.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory for reports and model snapshots.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    /// Base seed (beats BIMAMSLEEP_SEED and the config file).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Saved model JSON.
    #[arg(long)]
    model: PathBuf,
    /// Manifest CSV or a single EPB file.
    #[arg(long)]
    data: PathBuf,
    /// Optional file for the metric report as CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GenSyntheticArgs {
    /// Directory that receives one EPB per subject plus manifest.csv.
    #[arg(long)]
    out: PathBuf,
    /// Number of synthetic subjects.
    #[arg(long, default_value_t = 10)]
    subjects: usize,
    /// Epochs generated per subject.
    #[arg(long, default_value_t = 400)]
    epochs: usize,
    /// Stage priors as five comma-separated weights (W,N1,N2,N3,REM).
    #[arg(long, value_parser = parse_priors)]
    priors: Option<[f64; 5]>,
    /// Signal-to-noise ratio of the additive noise, in dB.
    #[arg(long, default_value_t = 12.0)]
    snr_db: f64,
    /// Per-epoch amplitude jitter fraction.
    #[arg(long, default_value_t = 0.15)]
    amplitude_jitter: f64,
    /// Base seed (beats BIMAMSLEEP_SEED).
    #[arg(long)]
    seed: Option<u64>,
}

/// Comma-separated list of sequence lengths (newtype so clap parses the
/// whole list as one value).
#[derive(Debug, Clone)]
struct Lengths(Vec<usize>);

impl std::str::FromStr for Lengths {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        parse_lengths(s).map(Lengths)
    }
}

#[derive(Args)]
struct ScanBenchArgs {
    /// Sequence lengths to time, comma-separated and increasing.
    #[arg(long, default_value = "1024,2048,4096")]
    lengths: Lengths,
    /// Model width of the timed scan.
    #[arg(long, default_value_t = 64)]
    d_model: usize,
    /// State dimension of the timed scan.
    #[arg(long = "state", default_value_t = 16)]
    state_dim: usize,
}

#[derive(Args)]
struct GradCheckArgs {
    /// Worst tolerated relative error.
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    /// Random parameter directions probed in the end-to-end check.
    #[arg(long, default_value_t = 2)]
    directions: usize,
}

/// Five comma-separated non-negative weights.
fn parse_priors(s: &str) -> std::result::Result<[f64; 5], String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 5 {
        return Err(format!("expected 5 comma-separated priors, got {}", parts.len()));
    }
    let mut out = [0.0; 5];
    for (i, p) in parts.iter().enumerate() {
        out[i] = p
            .trim()
            .parse::<f64>()
            .map_err(|_| format!("prior {:?} is not a number", p.trim()))?;
    }
    Ok(out)
}

/// Comma-separated strictly increasing nonzero lengths.
fn parse_lengths(s: &str) -> std::result::Result<Vec<usize>, String> {
    let mut out = Vec::new();
    for p in s.split(',') {
        let v: usize =
            p.trim().parse().map_err(|_| format!("length {:?} is not a number", p.trim()))?;
        if v == 0 {
            return Err("lengths must be nonzero".into());
        }
        if let Some(&last) = out.last() {
            if v <= last {
                return Err(format!("lengths must increase, but {v} follows {last}"));
            }
        }
        out.push(v);
    }
    if out.is_empty() {
        return Err("need at least one length".into());
    }
    Ok(out)
}

/// Apply the seed precedence: flag, then environment, then fallback.
fn resolve_seed(flag: Option<u64>, fallback: u64) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var("BIMAMSLEEP_SEED") {
        Ok(v) => v.trim().parse().map_err(|_| {
            Error::Config(format!("BIMAMSLEEP_SEED is not a valid seed: {v:?}"))
        }),
        Err(_) => Ok(fallback),
    }
}

/// Load the recipe, fold in the resolved seed, and echo the result.
fn resolved_config(args: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = match &args.config {
        Some(path) => TrainConfig::from_toml_file(path)?,
        None => TrainConfig::default(),
    };
    cfg.seed = resolve_seed(args.seed, cfg.seed)?;
    cfg.validate()?;
    println!("resolved configuration:\n{}", indent(&cfg.to_toml_string()));
    Ok(cfg)
}

fn indent(s: &str) -> String {
    s.lines().map(|l| format!("  {l}\n")).collect()
}

fn describe(ds: &EpochDataset) -> String {
    let hist = ds.class_histogram();
    let mix = SleepStage::ALL
        .iter()
        .map(|s| format!("{} {}", s.label(), hist[s.index()]))
        .collect::<Vec<_>>()
        .join(", ");
    format!("{} epochs from {} subjects ({mix})", ds.len(), ds.subject_ids().len())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let cfg = resolved_config(&args)?;
    let ds = load_dataset(&args.data)?;
    println!("loaded {}", describe(&ds));
    let cv = cross_validate(&ds, &cfg, &args.out)?;
    for f in &cv.folds {
        println!(
            "fold {}: {} epochs, best val acc {:.4}, test acc {:.4}",
            f.fold,
            f.epochs_run,
            f.best_val_acc,
            f.cm.accuracy()
        );
    }
    print!("{}", render_text("pooled cross-validation", &cv.pooled));
    println!("reports written to {}", args.out.display());
    Ok(())
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    let mut model = SleepModel::load(&args.model)?;
    let ds = load_dataset(&args.data)?;
    println!("loaded {}", describe(&ds));
    let idx: Vec<usize> = (0..ds.len()).collect();
    let cm = evaluate_confusion(&mut model, &ds, &idx, 128)?;
    print!("{}", render_text("evaluation", &cm));
    if let Some(out) = &args.out {
        std::fs::write(out, render_csv(&cm))?;
        println!("report written to {}", out.display());
    }
    Ok(())
}

fn cmd_ablate(args: TrainArgs) -> Result<()> {
    let cfg = resolved_config(&args)?;
    let ds = load_dataset(&args.data)?;
    println!("loaded {}", describe(&ds));
    let rows = run_ablation(&ds, &cfg, &args.out)?;
    println!("variant            ACC     MF1   kappa");
    for r in &rows {
        println!(
            "{:<16} {:>6.2}  {:>6.2}  {:>6.2}",
            r.variant.to_string(),
            r.acc * 100.0,
            r.mf1 * 100.0,
            r.kappa * 100.0
        );
    }
    println!("reports written to {}", args.out.display());
    Ok(())
}

fn cmd_gen_synthetic(args: GenSyntheticArgs) -> Result<()> {
    let defaults = SynthConfig::default();
    let cfg = SynthConfig {
        subjects: args.subjects,
        epochs_per_subject: args.epochs,
        priors: args.priors.unwrap_or(defaults.priors),
        seed: resolve_seed(args.seed, defaults.seed)?,
        snr_db: args.snr_db,
        amplitude_jitter: args.amplitude_jitter,
    };
    let ds = synth_generate(&cfg)?;
    std::fs::create_dir_all(&args.out)?;
    let mut manifest = String::from("path,subject_id\n");
    for sid in ds.subject_ids() {
        let mut sub = EpochDataset::new();
        for i in 0..ds.len() {
            if ds.subject_of(i) == sid {
                sub.push_epoch(sid, ds.epoch(i), ds.label(i))?;
            }
        }
        let file = format!("{sid}.epb");
        write_epb(&sub, &args.out.join(&file))?;
        manifest.push_str(&format!("{file},{sid}\n"));
    }
    std::fs::write(args.out.join("manifest.csv"), manifest)?;
    println!("generated {}", describe(&ds));
    println!("cohort written to {}", args.out.display());
    Ok(())
}

/// Median wall time of `runs` inference-mode scans at the given size.
/// Deterministic inputs for one benchmarked length: mid-range decays so the
/// state stays bounded at any length, and no random draws so every process
/// times the same arithmetic.
struct ScanFixture {
    len: usize,
    a_bar: NdArray,
    bx: NdArray,
    c: NdArray,
}

fn scan_fixture(len: usize, d: usize, n: usize) -> Result<ScanFixture> {
    let total = len * d * n;
    let a_bar = NdArray::from_vec(
        &[1, len, d, n],
        (0..total).map(|i| 0.5 + 0.4 * ((i % 17) as f64 / 17.0)).collect(),
    )?;
    let bx = NdArray::from_vec(
        &[1, len, d, n],
        (0..total).map(|i| ((i % 23) as f64 / 23.0) - 0.5).collect(),
    )?;
    let c = NdArray::from_vec(
        &[1, len, n],
        (0..len * n).map(|i| ((i % 13) as f64 / 13.0) - 0.5).collect(),
    )?;
    Ok(ScanFixture { len, a_bar, bx, c })
}

/// Fixtures at most this many elements (~2 MB) are timed in repeated batches
/// so a sample outlasts timer granularity; at that size the data stays cached
/// for every length alike. Larger fixtures get exactly one scan per sample:
/// repeated scans on one graph re-warm caches unevenly across lengths (the
/// longest working set spills the last-level cache while shorter ones do
/// not), so long sequences must all be timed equally cold.
const REP_MAX_ELEMS: usize = 1 << 18;
/// Element-updates per batched sample for short sequences.
const REP_WORK: usize = 1 << 20;

fn scan_reps(fx: &ScanFixture) -> usize {
    let elems = fx.a_bar.len();
    if elems == 0 || elems > REP_MAX_ELEMS {
        1
    } else {
        REP_WORK.div_ceil(elems)
    }
}

/// Times `reps` scans over the fixture and returns seconds per scan.
fn time_scan_once(fx: &ScanFixture, reps: usize) -> Result<f64> {
    let g = Graph::inference();
    let (av, bv, cv) = (g.leaf(fx.a_bar.clone()), g.leaf(fx.bx.clone()), g.leaf(fx.c.clone()));
    let start = Instant::now();
    let mut y = g.ssm_scan(&av, &bv, &cv)?;
    for _ in 1..reps {
        y = g.ssm_scan(&av, &bv, &cv)?;
    }
    let elapsed = start.elapsed().as_secs_f64();
    if !y.value().all_finite() {
        return Err(Error::Numeric("benchmark scan produced non-finite output".into()));
    }
    Ok(elapsed / reps as f64)
}

fn cmd_scan_bench(args: ScanBenchArgs) -> Result<()> {
    const ROUNDS: usize = 7;
    const RATIO_SLACK: f64 = 1.3;
    println!(
        "selective scan timing (d_model {}, state {}, best of {ROUNDS})",
        args.d_model, args.state_dim
    );
    let mut fixtures = Vec::new();
    for &len in &args.lengths.0 {
        fixtures.push(scan_fixture(len, args.d_model, args.state_dim)?);
    }
    // One unscored round warms caches and the allocator for every length.
    for fx in &fixtures {
        time_scan_once(fx, scan_reps(fx))?;
    }
    // Lengths are interleaved across rounds so slow phases of the machine
    // (frequency scaling, a noisy neighbour) hit every length alike, and the
    // minimum is kept because interference only ever adds time.
    let mut best = vec![f64::INFINITY; fixtures.len()];
    for _ in 0..ROUNDS {
        for (i, fx) in fixtures.iter().enumerate() {
            let t = time_scan_once(fx, scan_reps(fx))?;
            if t < best[i] {
                best[i] = t;
            }
        }
    }
    let timed: Vec<(usize, f64)> = fixtures.iter().map(|fx| fx.len).zip(best).collect();
    for &(len, t) in &timed {
        println!("  len {len:>6}: {:.3} ms", t * 1e3);
    }
    let mut failures = Vec::new();
    for w in timed.windows(2) {
        let (l0, t0) = w[0];
        let (l1, t1) = w[1];
        let ratio = t1 / t0;
        let bound = RATIO_SLACK * (l1 as f64 / l0 as f64);
        println!("  len {l0} -> {l1}: time ratio {ratio:.2} (bound {bound:.2})");
        if ratio > bound {
            failures.push(format!("{l0} -> {l1} took {ratio:.2}x (bound {bound:.2}x)"));
        }
    }
    if !failures.is_empty() {
        return Err(Error::Numeric(format!(
            "scan scaling is superlinear: {}",
            failures.join("; ")
        )));
    }
    println!("scan time scales linearly in sequence length");
    Ok(())
}

fn cmd_grad_check(args: GradCheckArgs) -> Result<()> {
    if !(args.tolerance.is_finite() && args.tolerance > 0.0) {
        return Err(Error::Config(format!(
            "tolerance must be positive, got {}",
            args.tolerance
        )));
    }
    if args.directions == 0 {
        return Err(Error::Config("directions must be nonzero".into()));
    }
    let mut reports: Vec<GradCheckReport> = Vec::new();
    reports.extend(primitive_reports(args.tolerance)?);
    reports.extend(features::grad_check_reports(args.tolerance)?);
    reports.extend(bimamba::grad_check_reports(args.tolerance)?);
    reports.push(grad_check_model(args.tolerance, args.directions)?);
    let mut failed = 0usize;
    for r in &reports {
        println!("{r}");
        if !r.passed() {
            failed += 1;
        }
    }
    if failed > 0 {
        return Err(Error::Numeric(format!(
            "{failed} of {} gradient checks exceeded tolerance {:.1e}",
            reports.len(),
            args.tolerance
        )));
    }
    println!("all {} gradient checks passed at {:.1e}", reports.len(), args.tolerance);
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::GenSynthetic(a) => cmd_gen_synthetic(a),
        Command::ScanBench(a) => cmd_scan_bench(a),
        Command::GradCheck(a) => cmd_grad_check(a),
    }
}

/// Parse arguments, run the chosen command, and return the process exit
/// code. Argument errors exit through clap itself (code 2).
pub fn run() -> i32 {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn priors_parser_wants_exactly_five_numbers() {
        assert_eq!(parse_priors("0.2,0.1,0.4,0.1,0.2").unwrap(), [0.2, 0.1, 0.4, 0.1, 0.2]);
        assert!(parse_priors("1,2,3,4").is_err());
        assert!(parse_priors("a,b,c,d,e").is_err());
    }

    #[test]
    fn lengths_parser_requires_increasing_nonzero_values() {
        assert_eq!(parse_lengths("64,128,256").unwrap(), vec![64, 128, 256]);
        assert!(parse_lengths("128,64").is_err());
        assert!(parse_lengths("0,64").is_err());
        assert!(parse_lengths("").is_err());
    }

    #[test]
    fn seed_precedence_prefers_the_flag() {
        // The environment variable is exercised in the CLI integration
        // tests, where it can be set per spawned process.
        assert_eq!(resolve_seed(Some(7), 42).unwrap(), 7);
    }

    #[test]
    fn command_line_shape_is_self_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
