use clap::{Args, Parser, Subcommand};
use quantband::bandwidth::TuningParams;
use quantband::io::{
    bandwidth_command, fit_command, kernel_dump, simulate_command, CliError, ErrorOverride,
    FitRequest,
};
use quantband::quad::QuadratureRule;
use quantband::sim::TauRegion;
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "quantband",
    version,
    about = "Uniform confidence bands for conditional quantiles under measurement error"
)]
struct Cli {
    /// Worker threads (default: QUANTBAND_THREADS env var, then all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct DataArgs {
    /// Primary data CSV with header `y,w` (or `y,w1,w2` with --repeated).
    #[arg(long)]
    data: PathBuf,
    /// Auxiliary error-sample CSV with header `u`.
    #[arg(long)]
    aux: Option<PathBuf>,
    /// Treat the data file as repeated measurements `y,w1,w2`.
    #[arg(long)]
    repeated: bool,
    /// Apply log(. + SHIFT) to each measurement column first.
    #[arg(long, num_args = 0..=1, default_missing_value = "5")]
    log_shift: Option<f64>,
    /// Known error model instead of an auxiliary sample: laplace:B or gaussian:SD.
    #[arg(long)]
    error: Option<String>,
    /// Single quantile level.
    #[arg(long, conflicts_with = "tau_range")]
    tau: Option<f64>,
    /// Quantile interval, e.g. --tau-range 0.2 0.3.
    #[arg(long, num_args = 2)]
    tau_range: Option<Vec<f64>>,
    /// Evaluation x-range, e.g. --x-range -0.8 0.8 (default: [min W, max W];
    /// an interior range is recommended, deconvolution is boundary-sensitive).
    #[arg(long, num_args = 2)]
    x_range: Option<Vec<f64>>,
    /// Grid sizes.
    #[arg(long, default_value_t = 41)]
    nx: usize,
    #[arg(long, default_value_t = 6)]
    ntau: usize,
    /// Master seed; all randomness flows from here.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Use the SIMEX pilot instead of cross-validation.
    #[arg(long)]
    simex: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the quantile curve and write band CSVs, a JSON summary, and
    /// optional SVG slices.
    Fit {
        #[command(flatten)]
        data: DataArgs,
        /// Band levels alpha (repeatable).
        #[arg(long = "alpha", default_values_t = [0.1])]
        alphas: Vec<f64>,
        /// Bootstrap replicates.
        #[arg(long, default_value_t = 1000)]
        boot: usize,
        /// Manual bandwidth overrides.
        #[arg(long)]
        h: Option<f64>,
        #[arg(long)]
        h_w: Option<f64>,
        #[arg(long)]
        h_y: Option<f64>,
        /// Emit SVG band plots per tau slice.
        #[arg(long)]
        svg: bool,
        /// Output path prefix.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a Monte Carlo coverage study from a JSON config.
    Simulate {
        /// JSON config file (SimConfig fields).
        #[arg(long)]
        config: PathBuf,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
        /// Override the config's master seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print the selected bandwidth plan for a dataset as JSON.
    Bandwidth {
        #[command(flatten)]
        data: DataArgs,
    },
    /// Dump deconvolution-kernel values for debugging.
    KernelDump {
        /// Error model: laplace:B, gaussian:SD, empirical:PATH, or none.
        #[arg(long)]
        model: String,
        /// Bandwidth.
        #[arg(long)]
        h: f64,
        /// Evaluation points (repeatable).
        #[arg(long = "x", required = true, allow_hyphen_values = true)]
        xs: Vec<f64>,
        /// Output CSV path (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn tau_region(data: &DataArgs) -> Result<TauRegion, CliError> {
    match (&data.tau, &data.tau_range) {
        (Some(t), None) => Ok(TauRegion::Singleton(*t)),
        (None, Some(r)) => Ok(TauRegion::Interval(r[0], r[1])),
        (None, None) => Ok(TauRegion::Singleton(0.5)),
        _ => unreachable!("clap enforces the conflict"),
    }
}

#[allow(clippy::too_many_arguments)]
fn to_request(
    data: &DataArgs,
    alphas: Vec<f64>,
    boot: usize,
    h: Option<f64>,
    h_w: Option<f64>,
    h_y: Option<f64>,
    svg: bool,
    out: PathBuf,
) -> Result<FitRequest, CliError> {
    let error_override = data.error.as_deref().map(ErrorOverride::parse).transpose()?;
    Ok(FitRequest {
        data_path: data.data.clone(),
        aux_path: data.aux.clone(),
        repeated: data.repeated,
        log_shift: data.log_shift,
        error_override,
        alphas,
        tau_region: tau_region(data)?,
        x_region: data.x_range.as_ref().map(|r| (r[0], r[1])),
        nx: data.nx,
        ntau: data.ntau,
        boot_reps: boot,
        seed: data.seed,
        tuning: TuningParams::default(),
        h_override: h,
        hw_override: h_w,
        hy_override: h_y,
        use_simex: data.simex,
        svg,
        out_prefix: out,
    })
}

fn run(cli: Cli) -> Result<(), CliError> {
    let threads = cli
        .threads
        .or_else(|| {
            std::env::var("QUANTBAND_THREADS")
                .ok()
                .and_then(|v| v.parse().ok())
        })
        .filter(|&t| t > 0);
    if let Some(t) = threads {
        // Ignore the error if a pool already exists (e.g. in tests).
        let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
    }
    let quad = QuadratureRule::default_rule();
    match cli.command {
        Command::Fit {
            data,
            alphas,
            boot,
            h,
            h_w,
            h_y,
            svg,
            out,
        } => {
            let request = to_request(&data, alphas, boot, h, h_w, h_y, svg, out)?;
            let written = fit_command(&request, &quad)?;
            for path in written {
                println!("{}", path.display());
            }
        }
        Command::Simulate { config, out, seed } => {
            let path = simulate_command(&config, &out, seed, &quad)?;
            println!("{}", path.display());
        }
        Command::Bandwidth { data } => {
            let request = to_request(
                &data,
                vec![0.1],
                0,
                None,
                None,
                None,
                false,
                PathBuf::from("bandwidth"),
            )?;
            println!("{}", bandwidth_command(&request, &quad)?);
        }
        Command::KernelDump { model, h, xs, out } => {
            let csv = kernel_dump(&model, h, &xs, &quad)?;
            match out {
                Some(path) => std::fs::write(path, csv)?,
                None => print!("{csv}"),
            }
        }
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        eprintln!("error: {err}");
        std::process::exit(err.exit_code());
    }
}
