//! `fxnet run | compare | sysarray`.
//!
//! Exit status: 0 success, 1 configuration error, 2 data or I/O error,
//! 3 training divergence.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fxnet::experiment::{compare, ExperimentConfig, ExperimentError};
use fxnet::fxp::{FxFormat, RoundingMode};
use fxnet::fxtensor::{FxTensor, GemmSpec};
use fxnet::sysarray::{perf_report, simulate_gemm, SysArrayConfig, TraceReport};

#[derive(Parser)]
#[command(name = "fxnet", version, about = "Fixed-point network training and systolic GEMM simulation")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
#[allow(clippy::large_enum_variant)]
enum Cmd {
    /// Train one configuration and write metrics.csv, config.txt and final.ckpt.
    Run(RunArgs),
    /// Compare two metrics.csv files epoch by epoch (deltas are a - b).
    Compare {
        a: PathBuf,
        b: PathBuf,
        /// Test-error gap, in points, that counts as diverging.
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
    },
    /// Simulate one random GEMM on the systolic array.
    Sysarray(SysArgs),
}

#[derive(Args)]
struct RunArgs {
    /// key = value file; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// mnist or cifar10.
    #[arg(long)]
    dataset: Option<String>,
    /// dnn or cnn.
    #[arg(long)]
    model: Option<String>,
    /// Layer width multiplier; below 1 also selects desk-size epochs.
    #[arg(long)]
    scale: Option<String>,
    /// nearest, stochastic or float.
    #[arg(long)]
    rounding: Option<String>,
    #[arg(long)]
    wl: Option<String>,
    /// Fractional bits of weights and updates.
    #[arg(long)]
    fl: Option<String>,
    /// Fractional bits of layer outputs and errors.
    #[arg(long)]
    fl_outputs: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    /// Widen every format after this many epochs.
    #[arg(long)]
    fine_tune_after: Option<String>,
    /// Bits added when fine-tuning (default 4).
    #[arg(long)]
    fine_tune_bits: Option<String>,
    #[arg(long)]
    data_dir: Option<String>,
    #[arg(long)]
    out: Option<String>,
    /// Any other config key, as key=value. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// No per-epoch progress on stderr.
    #[arg(long)]
    quiet: bool,
}

impl RunArgs {
    fn overrides(&self) -> Result<Vec<(String, String)>, ExperimentError> {
        let mut v = Vec::new();
        let named = [
            ("dataset", &self.dataset),
            ("model", &self.model),
            ("scale", &self.scale),
            ("rounding", &self.rounding),
            ("wl", &self.wl),
            ("fl_weights", &self.fl),
            ("fl_outputs", &self.fl_outputs),
            ("seed", &self.seed),
            ("epochs", &self.epochs),
            ("fine_tune_after", &self.fine_tune_after),
            ("fine_tune_bits", &self.fine_tune_bits),
            ("data_dir", &self.data_dir),
            ("out", &self.out),
        ];
        for (k, val) in named {
            if let Some(x) = val {
                v.push((k.to_string(), x.clone()));
            }
        }
        for s in &self.set {
            let (k, x) = s
                .split_once('=')
                .ok_or_else(|| ExperimentError::Config(format!("--set expects KEY=VALUE, got {s:?}")))?;
            v.push((k.trim().replace('-', "_"), x.trim().to_string()));
        }
        Ok(v)
    }
}

#[derive(Args)]
struct SysArgs {
    /// Array dimension.
    #[arg(long, default_value_t = 28)]
    n: usize,
    /// Inner dimension.
    #[arg(long, default_value_t = 256)]
    k: usize,
    /// Rows of A.
    #[arg(long, default_value_t = 224)]
    l: usize,
    /// Columns of B.
    #[arg(long, default_value_t = 224)]
    m: usize,
    /// Word length of both operands.
    #[arg(long, default_value_t = 16)]
    wl: u32,
    /// Fractional bits of both operands.
    #[arg(long, default_value_t = 14)]
    fl_in: u32,
    /// Fractional bits of the result.
    #[arg(long, default_value_t = 14)]
    fl_out: u32,
    /// Must equal 2 * fl_in - fl_out when given.
    #[arg(long)]
    lfsr_width: Option<u32>,
    /// Clock in MHz for the throughput report.
    #[arg(long)]
    freq: Option<f64>,
    /// Board power in watts for the efficiency report.
    #[arg(long)]
    power: Option<f64>,
    /// Off-chip bandwidth in elements per cycle (default: unlimited).
    #[arg(long)]
    bandwidth: Option<f64>,
    /// On-chip buffer capacity in elements.
    #[arg(long, default_value_t = 1 << 20)]
    l2: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Also write the CSV row to this file.
    #[arg(long)]
    csv: Option<PathBuf>,
}

fn run(args: RunArgs) -> Result<(), ExperimentError> {
    let overrides = args.overrides()?;
    let cfg = match &args.config {
        Some(p) => ExperimentConfig::from_file(p, &overrides)?,
        None => ExperimentConfig::from_pairs(&overrides)?,
    };
    cfg.validate()?;
    if !args.quiet {
        eprintln!("{}", cfg.to_text().trim_end());
    }
    let quiet = args.quiet;
    fxnet::experiment::run(&cfg, |r| {
        if !quiet {
            eprintln!(
                "epoch {:>3}  train {:>7.3}%  test {:>7.3}%  zero-updates {:.4}",
                r.epoch, r.train_err, r.test_err, r.zero_update_frac
            );
        }
    })?;
    Ok(())
}

fn random_matrix(rows: usize, cols: usize, fmt: FxFormat, rng: &mut ChaCha8Rng) -> FxTensor {
    let (lo, hi) = (fmt.min_mantissa() as i32, fmt.max_mantissa() as i32);
    let data = (0..rows * cols).map(|_| rng.random_range(lo..=hi)).collect();
    FxTensor::new(vec![rows, cols], data, fmt, "").expect("mantissas drawn inside the format")
}

fn sysarray(a: SysArgs) -> Result<(), String> {
    let in_fmt = FxFormat::with_wl(a.wl, a.fl_in).map_err(|e| e.to_string())?;
    let out_fmt = FxFormat::with_wl(a.wl, a.fl_out).map_err(|e| e.to_string())?;
    let cfg = SysArrayConfig {
        n: a.n,
        lfsr_width: a.lfsr_width,
        l2_capacity: a.l2,
        bandwidth: a.bandwidth,
        ..SysArrayConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let ma = random_matrix(a.l, a.k, in_fmt, &mut rng);
    let mb = random_matrix(a.k, a.m, in_fmt, &mut rng);
    let out = simulate_gemm(&ma, &mb, &cfg, &GemmSpec::new(out_fmt, RoundingMode::Stochastic)).map_err(|e| e.to_string())?;
    let report: &TraceReport = &out.report;
    println!("{report}");
    if let Some(mhz) = a.freq {
        let perf = perf_report(report, mhz * 1e6, a.power).ok_or("frequency must be positive")?;
        println!("{perf}");
    }
    println!();
    println!("{}", TraceReport::CSV_HEADER);
    println!("{}", report.csv_row());
    if let Some(p) = a.csv {
        std::fs::write(&p, format!("{}\n{}\n", TraceReport::CSV_HEADER, report.csv_row()))
            .map_err(|e| format!("{}: {e}", p.display()))?;
    }
    Ok(())
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
    match cli.cmd {
        Cmd::Run(args) => match run(args) {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(e.exit_code() as u8)
            }
        },
        Cmd::Compare { a, b, threshold } => match compare(&a, &b, threshold) {
            Ok(c) => {
                println!("{c}");
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(e.exit_code() as u8)
            }
        },
        Cmd::Sysarray(args) => match sysarray(args) {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(1)
            }
        },
    }
}
