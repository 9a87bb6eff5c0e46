use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use log::info;
use serde_json::json;

use modestruct::diagnostics::{hillery, hillery_counts, pearson_pvalue, uncertainty_curve_with, DEFAULT_REPEATS};
use modestruct::fitting::{JpdTemplate, MinimizeOptions};
use modestruct::forward_model::{full_jpd, lossless_jpd, SourceModel};
use modestruct::io::{self, Cell};
use modestruct::pipeline::{
    default_loss_sharing, reconstruct_observed, KnownStructureOptions, Observed, ReconstructionConfig, RunStatus,
};
use modestruct::reduction::{marginalize, Arm};
use modestruct::sampling::sample_counts;

#[derive(Parser)]
#[command(name = "modestruct", version, about = "Mode-structure reconstruction from photon-number joint distributions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a counts matrix from a model file.
    Simulate {
        #[arg(long)]
        model: PathBuf,
        /// Number of trials, e.g. `1000000` or `1e6`.
        #[arg(long, value_parser = parse_count)]
        n_tot: u64,
        #[arg(long, env = "MODESTRUCT_SEED", default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Also write the exact joint distribution as a tidy CSV.
        #[arg(long)]
        jpd_out: Option<PathBuf>,
    },
    /// Reconstruct the mode structure behind a counts file.
    Reconstruct {
        #[arg(long)]
        counts: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        /// Overrides the seed of the config file.
        #[arg(long, env = "MODESTRUCT_SEED")]
        seed: Option<u64>,
    },
    /// Hillery sums, Pearson test or marginals of a counts or model file.
    Diagnose {
        #[arg(value_enum)]
        which: Which,
        #[arg(long)]
        counts: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
        /// Fitted parameters subtracted from the degrees of freedom; defaults
        /// to the free parameters of the model.
        #[arg(long)]
        n_params: Option<usize>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Mean relative reconstruction error against the number of trials.
    Uncertainty {
        #[arg(long)]
        model: PathBuf,
        /// Comma-separated trial counts, e.g. `1e4,1e5,1e6`.
        #[arg(long, value_delimiter = ',', value_parser = parse_count)]
        n_tot: Vec<u64>,
        #[arg(long, default_value_t = DEFAULT_REPEATS)]
        repeats: usize,
        #[arg(long, env = "MODESTRUCT_SEED", default_value_t = 0)]
        seed: u64,
        /// Optimizer restarts per fit.
        #[arg(long, default_value_t = 2)]
        restarts: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Which {
    Hillery,
    Pvalue,
    Marginals,
}

fn parse_count(s: &str) -> std::result::Result<u64, String> {
    if let Ok(v) = s.trim().parse::<u64>() {
        return Ok(v);
    }
    let v: f64 = s.trim().parse().map_err(|e| format!("'{s}': {e}"))?;
    if v >= 1.0 && v.fract() == 0.0 && v < u64::MAX as f64 {
        Ok(v as u64)
    } else {
        Err(format!("'{s}' is not a positive whole number"))
    }
}

fn write(path: &Path, text: String) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn simulate(model: &Path, n_tot: u64, seed: u64, out: &Path, jpd_out: Option<&Path>) -> Result<()> {
    let model = io::read_model(model).with_context(|| format!("reading {}", model.display()))?;
    let jpd = full_jpd(&model)?;
    let counts = sample_counts(&jpd, n_tot, seed)?;
    io::write_counts(out, &counts)?;
    if let Some(p) = jpd_out {
        write(p, io::jpd_csv(&jpd))?;
    }
    info!("{} of {} trials inside the window", counts.in_range(), counts.n_tot());
    Ok(())
}

fn reconstruct(counts: &Path, config: Option<&Path>, out_dir: &Path, seed: Option<u64>) -> Result<RunStatus> {
    let counts = io::read_counts(counts)?;
    let mut config = match config {
        Some(p) => io::read_config(p).with_context(|| format!("reading {}", p.display()))?,
        None => ReconstructionConfig::default(),
    };
    if let Some(s) = seed {
        config.seed = s;
    }
    let observed = Observed::Counts(counts);
    let rec = reconstruct_observed(&observed, &config)?;
    let files = io::write_run_dir(out_dir, &observed, &rec)?;
    info!("wrote {} files to {}", files.len(), out_dir.display());
    for w in &rec.report.warnings {
        eprintln!("warning: {w}");
    }
    println!("{}", serde_json::to_string(&rec.report.model)?);
    Ok(rec.report.status)
}

fn free_parameters(model: &SourceModel) -> usize {
    JpdTemplate::from_model(model, default_loss_sharing(model)).n_params()
}

fn diagnose(which: Which, counts: Option<&Path>, model: Option<&Path>, n_params: Option<usize>, out_dir: Option<&Path>) -> Result<()> {
    let counts = counts.map(io::read_counts).transpose()?;
    let model = model.map(io::read_model).transpose()?;
    if let Some(d) = out_dir {
        std::fs::create_dir_all(d)?;
    }
    let out = match which {
        Which::Hillery => match (&counts, &model) {
            (Some(c), _) => json!({ "source": "counts", "hillery": hillery_counts(c) }),
            (None, Some(m)) => {
                let lossless = lossless_jpd(m)?;
                json!({
                    "source": "model",
                    "hillery": hillery(&full_jpd(m)?.conditional()),
                    "lossless": hillery(&lossless.jpd.conditional()),
                    "eta_s": lossless.eta_s,
                    "eta_i": lossless.eta_i,
                })
            }
            (None, None) => bail!("hillery needs --counts or --model"),
        },
        Which::Pvalue => {
            let (Some(c), Some(m)) = (&counts, &model) else { bail!("pvalue needs --counts and --model") };
            if m.n_max != c.n_max() {
                bail!("model window {} differs from counts window {}", m.n_max, c.n_max());
            }
            let jpd = full_jpd(m)?;
            let k = n_params.unwrap_or_else(|| free_parameters(m));
            if let Some(d) = out_dir {
                let n = c.in_range() as f64;
                let total = jpd.total();
                let dim = c.dim();
                let rows: Vec<Vec<Cell>> = (0..dim * dim)
                    .map(|i| {
                        vec![(i / dim).into(), (i % dim).into(), c.counts()[i].into(), (n * jpd.entries()[i] / total).into()]
                    })
                    .collect();
                write(&d.join("pvalue_cells.csv"), io::tidy_csv(&["n_s", "n_i", "observed", "expected"], &rows))?;
            }
            json!({ "n_fit_params": k, "test": pearson_pvalue(c, &jpd, k) })
        }
        Which::Marginals => {
            let (rs, ri) = match (&counts, &model) {
                (Some(c), _) => (
                    modestruct::reduction::marginalize_counts(c, Arm::Signal),
                    modestruct::reduction::marginalize_counts(c, Arm::Idler),
                ),
                (None, Some(m)) => {
                    let jpd = full_jpd(m)?;
                    (marginalize(&jpd, Arm::Signal), marginalize(&jpd, Arm::Idler))
                }
                (None, None) => bail!("marginals needs --counts or --model"),
            };
            if let Some(d) = out_dir {
                write(&d.join("marginal_signal.csv"), io::rpd_csv(&rs))?;
                write(&d.join("marginal_idler.csv"), io::rpd_csv(&ri))?;
            }
            let arm = |r: &modestruct::reduction::Rpd| {
                json!({
                    "total": r.total(),
                    "mean": r.mean() / r.total().max(f64::MIN_POSITIVE),
                    "tail_mass": r.tail_mass,
                    "events": r.counts.as_ref().map(|c| c.iter().sum::<u64>()),
                })
            };
            json!({ "signal": arm(&rs), "idler": arm(&ri) })
        }
    };
    let text = io::to_json(&out)?;
    if let Some(d) = out_dir {
        let name = match which {
            Which::Hillery => "hillery.json",
            Which::Pvalue => "pvalue.json",
            Which::Marginals => "marginals.json",
        };
        write(&d.join(name), text.clone())?;
    }
    print!("{text}");
    Ok(())
}

fn uncertainty(model: &Path, n_tot: &[u64], repeats: usize, seed: u64, restarts: usize, out: Option<&Path>) -> Result<()> {
    if n_tot.is_empty() {
        bail!("--n-tot needs at least one value");
    }
    let model = io::read_model(model)?;
    let options = KnownStructureOptions {
        minimize: MinimizeOptions { restarts, ..Default::default() },
        ..Default::default()
    };
    let points = uncertainty_curve_with(&model, n_tot, repeats, seed, &options)?;
    let rows: Vec<Vec<Cell>> = points
        .iter()
        .map(|p| vec![p.n_tot.into(), p.mean_relative_error.into(), p.standard_error.into(), p.used.into(), p.excluded.into()])
        .collect();
    let csv = io::tidy_csv(&["n_tot", "mean_relative_error", "standard_error", "used", "excluded"], &rows);
    match out {
        Some(p) => write(p, csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn run(cli: Cli) -> Result<RunStatus> {
    match cli.command {
        Command::Simulate { model, n_tot, seed, out, jpd_out } => {
            simulate(&model, n_tot, seed, &out, jpd_out.as_deref())?;
            Ok(RunStatus::Complete)
        }
        Command::Reconstruct { counts, config, out_dir, seed } => reconstruct(&counts, config.as_deref(), &out_dir, seed),
        Command::Diagnose { which, counts, model, n_params, out_dir } => {
            diagnose(which, counts.as_deref(), model.as_deref(), n_params, out_dir.as_deref())?;
            Ok(RunStatus::Complete)
        }
        Command::Uncertainty { model, n_tot, repeats, seed, restarts, out } => {
            uncertainty(&model, &n_tot, repeats, seed, restarts, out.as_deref())?;
            Ok(RunStatus::Complete)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(RunStatus::Complete) => ExitCode::SUCCESS,
        Ok(RunStatus::Partial) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
