//! `mixprec`: trace generation, orthogonality reports, importance
//! aggregation, budgeted bit allocation, the timestep-sampling study, and
//! quantized-model evaluation for the bundled toy denoiser.
//!
//! Flag precedence: command line > `MIXPREC_OUT_DIR` (output directory
//! only) > `--config` TOML file > built-in default.
//!
//! Exit codes: 0 success, 2 infeasible budget, 3 invalid input, 4
//! internal invariant violation.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use mixprec_core::aggregation::RhoMode;
use mixprec_core::diffusion::SamplingFraction;
use mixprec_core::pipeline::{
    default_bit_choices, run_aggregate, run_allocate, run_gen_traces, run_orm_report,
    run_quantize_eval, run_sampling_study, AllocateConfig, BudgetSpec, GenTracesConfig,
    PipelineError, QuantizeEvalConfig, SamplingStudyConfig, SolverChoice, ToyConfig, TRACE_SUBDIR,
};
use mixprec_core::quantizer::Scheme;
use mixprec_core::trace::Dtype;

const DEFAULT_OUT_DIR: &str = "mixprec-out";

#[derive(Parser, Debug)]
#[command(
    name = "mixprec",
    version,
    about = "Mixed-precision bit allocation for iterative denoising models",
    propagate_version = true
)]
struct Cli {
    /// TOML file supplying defaults for any flag.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate an activation trace of the toy denoiser.
    GenTraces {
        #[command(flatten)]
        toy: ToyArgs,
        /// Keep only this fraction of timesteps (1, 1/2, 1/4, 1/8, 1/20).
        #[arg(long, value_parser = parse_fraction)]
        fraction: Option<SamplingFraction>,
        /// Skip the neighboring-timestep similarity summary.
        #[arg(long)]
        no_neighbor_similarity: bool,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Compute the per-timestep orthogonality matrices of a stored trace.
    Orm {
        #[command(flatten)]
        trace: TraceDirArgs,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Aggregate a stored trace into per-layer importance coefficients.
    Aggregate {
        #[command(flatten)]
        trace: TraceDirArgs,
        /// Normalization for the importance fold: paper or mean.
        #[arg(long, value_parser = parse_mode)]
        mode: Option<RhoMode>,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Allocate bit widths under a size budget from a stored trace.
    Allocate {
        #[command(flatten)]
        trace: TraceDirArgs,
        /// Normalization for the importance fold: paper or mean.
        #[arg(long, value_parser = parse_mode)]
        mode: Option<RhoMode>,
        #[command(flatten)]
        alloc: AllocArgs,
        #[command(flatten)]
        budget: BudgetArgs,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Measure importance drift under timestep subsampling across seeds.
    SamplingStudy {
        #[command(flatten)]
        toy: ToyArgs,
        /// Normalization for the importance fold: paper or mean.
        #[arg(long, value_parser = parse_mode)]
        mode: Option<RhoMode>,
        /// Number of trace seeds (base seed comes from --seed).
        #[arg(long)]
        seeds: Option<usize>,
        /// Fractions to study, comma separated (e.g. 1,1/2,1/4).
        #[arg(long, value_delimiter = ',', value_parser = parse_fraction)]
        fractions: Option<Vec<SamplingFraction>>,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Compare full-precision, uniform, and mixed-precision models.
    QuantizeEval {
        #[command(flatten)]
        toy: ToyArgs,
        /// Normalization for the importance fold: paper or mean.
        #[arg(long, value_parser = parse_mode)]
        mode: Option<RhoMode>,
        #[command(flatten)]
        alloc: AllocArgs,
        #[command(flatten)]
        budget: BudgetArgs,
        /// Weight quantization scheme: symmetric or asymmetric.
        #[arg(long, value_parser = parse_scheme)]
        scheme: Option<Scheme>,
        /// Activation fake-quantization width for the quantized runs.
        #[arg(long)]
        activation_bits: Option<u8>,
        /// Run activations at full precision in the quantized runs.
        #[arg(long)]
        fp_activations: bool,
        /// Apply a stored allocation.json instead of deriving one.
        #[arg(long, value_name = "FILE")]
        allocation: Option<PathBuf>,
        #[command(flatten)]
        out: OutArgs,
    },
}

#[derive(Args, Debug, Default)]
struct ToyArgs {
    /// Data dimension of the toy denoiser.
    #[arg(long)]
    data_dim: Option<usize>,
    /// Sinusoidal time-feature dimension (even).
    #[arg(long)]
    time_dim: Option<usize>,
    /// First hidden width.
    #[arg(long)]
    hidden1: Option<usize>,
    /// Second hidden width.
    #[arg(long)]
    hidden2: Option<usize>,
    /// Number of diffusion timesteps.
    #[arg(long)]
    timesteps: Option<usize>,
    /// Number of reverse chains to run.
    #[arg(long)]
    samples: Option<usize>,
    /// Base seed for weights and noise streams.
    #[arg(long)]
    seed: Option<u64>,
    /// Trace storage type: f32 or f64.
    #[arg(long, value_parser = parse_dtype)]
    dtype: Option<Dtype>,
    /// First beta of the linear noise schedule.
    #[arg(long)]
    beta_start: Option<f64>,
    /// Last beta of the linear noise schedule.
    #[arg(long)]
    beta_end: Option<f64>,
}

#[derive(Args, Debug, Default)]
struct OutArgs {
    /// Output directory.
    #[arg(long, env = "MIXPREC_OUT_DIR")]
    out_dir: Option<PathBuf>,
}

#[derive(Args, Debug, Default)]
struct TraceDirArgs {
    /// Directory holding manifest.json and trace.bin (default:
    /// <out-dir>/trace).
    #[arg(long)]
    trace_dir: Option<PathBuf>,
}

#[derive(Args, Debug, Default)]
struct AllocArgs {
    /// Candidate bit widths, comma separated (default 3,4,5,6,7,8).
    #[arg(long, value_delimiter = ',')]
    bit_choices: Option<Vec<u8>>,
    /// Ignore the widths pinned in the model manifest.
    #[arg(long)]
    no_manifest_pins: bool,
    /// Pin one layer as LAYER:BITS (repeatable); wins over the manifest.
    #[arg(long = "pin", value_parser = parse_pin)]
    pins: Vec<PinArg>,
    /// Solver: auto, dp, greedy, or brute-force.
    #[arg(long, value_parser = parse_solver)]
    solver: Option<SolverChoice>,
}

#[derive(Args, Debug, Default)]
struct BudgetArgs {
    /// Size budget in bits.
    #[arg(long)]
    budget_bits: Option<u64>,
    /// Size budget in Mb; 1 Mb = 8*10^6 bits.
    #[arg(long)]
    budget_mb: Option<f64>,
    /// Size budget equal to a uniform b-bit model.
    #[arg(long)]
    budget_uniform_bits: Option<u8>,
}

#[derive(Clone, Debug)]
struct PinArg {
    layer: usize,
    bits: u8,
}

fn parse_mode(s: &str) -> Result<RhoMode, String> {
    s.parse()
}

fn parse_fraction(s: &str) -> Result<SamplingFraction, String> {
    s.parse()
}

fn parse_scheme(s: &str) -> Result<Scheme, String> {
    s.parse()
}

fn parse_solver(s: &str) -> Result<SolverChoice, String> {
    s.parse()
}

fn parse_dtype(s: &str) -> Result<Dtype, String> {
    match s {
        "f32" => Ok(Dtype::F32),
        "f64" => Ok(Dtype::F64),
        other => Err(format!("unknown dtype {other:?} (expected f32 or f64)")),
    }
}

fn parse_pin(s: &str) -> Result<PinArg, String> {
    let (layer, bits) = s
        .split_once(':')
        .ok_or_else(|| format!("pin {s:?} is not LAYER:BITS"))?;
    Ok(PinArg {
        layer: layer
            .parse()
            .map_err(|e| format!("pin layer {layer:?}: {e}"))?,
        bits: bits
            .parse()
            .map_err(|e| format!("pin bits {bits:?}: {e}"))?,
    })
}

/// Optional defaults from the `--config` TOML file; any flag given on the
/// command line wins.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    out_dir: Option<PathBuf>,
    trace_dir: Option<PathBuf>,
    data_dim: Option<usize>,
    time_dim: Option<usize>,
    hidden1: Option<usize>,
    hidden2: Option<usize>,
    timesteps: Option<usize>,
    samples: Option<usize>,
    seed: Option<u64>,
    dtype: Option<String>,
    beta_start: Option<f64>,
    beta_end: Option<f64>,
    fraction: Option<String>,
    mode: Option<String>,
    bit_choices: Option<Vec<u8>>,
    budget_bits: Option<u64>,
    budget_mb: Option<f64>,
    budget_uniform_bits: Option<u8>,
    scheme: Option<String>,
    activation_bits: Option<u8>,
    seeds: Option<usize>,
    fractions: Option<Vec<String>>,
    solver: Option<String>,
}

impl FileConfig {
    fn load(path: Option<&PathBuf>) -> Result<Self, PipelineError> {
        let Some(path) = path else {
            return Ok(FileConfig::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| PipelineError::Io {
            path: path.clone(),
            source: e,
        })?;
        toml::from_str(&text)
            .map_err(|e| PipelineError::Config(format!("config file {}: {e}", path.display())))
    }
}

fn invalid(msg: String) -> PipelineError {
    PipelineError::Config(msg)
}

/// Prints to stdout, treating a closed pipe (`mixprec orm | head`) as a
/// normal end of output; the command's files are written before any
/// printing happens.
fn emit(text: &str) {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    if out.write_all(text.as_bytes()).is_err() {
        std::process::exit(0);
    }
}

fn emitln(text: &str) {
    emit(text);
    emit("\n");
}

/// Parses a string default from the config file with FromStr.
fn from_file<T>(value: &Option<String>, what: &str) -> Result<Option<T>, PipelineError>
where
    T: std::str::FromStr<Err = String>,
{
    value
        .as_deref()
        .map(|s| s.parse::<T>().map_err(|e| invalid(format!("{what}: {e}"))))
        .transpose()
}

fn toy_config(args: &ToyArgs, file: &FileConfig) -> Result<ToyConfig, PipelineError> {
    let d = ToyConfig::default();
    Ok(ToyConfig {
        data_dim: args.data_dim.or(file.data_dim).unwrap_or(d.data_dim),
        time_dim: args.time_dim.or(file.time_dim).unwrap_or(d.time_dim),
        hidden1: args.hidden1.or(file.hidden1).unwrap_or(d.hidden1),
        hidden2: args.hidden2.or(file.hidden2).unwrap_or(d.hidden2),
        timesteps: args.timesteps.or(file.timesteps).unwrap_or(d.timesteps),
        samples: args.samples.or(file.samples).unwrap_or(d.samples),
        seed: args.seed.or(file.seed).unwrap_or(d.seed),
        dtype: match args.dtype {
            Some(t) => t,
            None => match file.dtype.as_deref() {
                Some(s) => parse_dtype(s).map_err(|e| invalid(format!("dtype: {e}")))?,
                None => d.dtype,
            },
        },
        beta_start: args.beta_start.or(file.beta_start).unwrap_or(d.beta_start),
        beta_end: args.beta_end.or(file.beta_end).unwrap_or(d.beta_end),
    })
}

fn out_dir(args: &OutArgs, file: &FileConfig) -> PathBuf {
    args.out_dir
        .clone()
        .or_else(|| file.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR))
}

fn trace_dir(args: &TraceDirArgs, out: &OutArgs, file: &FileConfig) -> PathBuf {
    args.trace_dir
        .clone()
        .or_else(|| file.trace_dir.clone())
        .unwrap_or_else(|| out_dir(out, file).join(TRACE_SUBDIR))
}

fn mode_or(
    cli: Option<RhoMode>,
    file: &FileConfig,
    default: RhoMode,
) -> Result<RhoMode, PipelineError> {
    Ok(match cli {
        Some(m) => m,
        None => from_file::<RhoMode>(&file.mode, "mode")?.unwrap_or(default),
    })
}

fn bit_choices(args: &AllocArgs, file: &FileConfig) -> Vec<u8> {
    args.bit_choices
        .clone()
        .or_else(|| file.bit_choices.clone())
        .unwrap_or_else(default_bit_choices)
}

fn solver(args: &AllocArgs, file: &FileConfig) -> Result<SolverChoice, PipelineError> {
    Ok(match args.solver {
        Some(s) => s,
        None => from_file::<SolverChoice>(&file.solver, "solver")?.unwrap_or_default(),
    })
}

fn pins(args: &AllocArgs) -> Vec<(usize, u8)> {
    args.pins.iter().map(|p| (p.layer, p.bits)).collect()
}

/// Exactly one budget form, from flags first and the config file second;
/// `default` covers commands where the budget is optional.
fn budget_spec(
    args: &BudgetArgs,
    file: &FileConfig,
    default: Option<BudgetSpec>,
) -> Result<BudgetSpec, PipelineError> {
    let pick = |bits: Option<u64>, mb: Option<f64>, uniform: Option<u8>| {
        let mut specs = Vec::new();
        if let Some(b) = bits {
            specs.push(BudgetSpec::Bits(b));
        }
        if let Some(m) = mb {
            specs.push(BudgetSpec::Megabytes(m));
        }
        if let Some(u) = uniform {
            specs.push(BudgetSpec::UniformBits(u));
        }
        specs
    };
    let cli = pick(args.budget_bits, args.budget_mb, args.budget_uniform_bits);
    if cli.len() > 1 {
        return Err(invalid(
            "give exactly one of --budget-bits, --budget-mb, --budget-uniform-bits".into(),
        ));
    }
    if let Some(&spec) = cli.first() {
        return Ok(spec);
    }
    let filed = pick(file.budget_bits, file.budget_mb, file.budget_uniform_bits);
    if filed.len() > 1 {
        return Err(invalid("config file sets more than one budget form".into()));
    }
    if let Some(&spec) = filed.first() {
        return Ok(spec);
    }
    default.ok_or_else(|| {
        invalid("a budget is required: --budget-bits, --budget-mb, or --budget-uniform-bits".into())
    })
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    let file = FileConfig::load(cli.config.as_ref())?;
    match cli.command {
        Command::GenTraces {
            toy,
            fraction,
            no_neighbor_similarity,
            out,
        } => {
            let cfg = GenTracesConfig {
                toy: toy_config(&toy, &file)?,
                fraction: match fraction {
                    Some(f) => f,
                    None => from_file::<SamplingFraction>(&file.fraction, "fraction")?
                        .unwrap_or(SamplingFraction::Full),
                },
                neighbor_similarity: !no_neighbor_similarity,
                out_dir: out_dir(&out, &file),
            };
            let summary = run_gen_traces(&cfg)?;
            emit(&summary.summary);
        }
        Command::Orm { trace, out } => {
            let result = run_orm_report(&trace_dir(&trace, &out, &file), &out_dir(&out, &file))?;
            emit(&result.report);
            emitln(&format!("wrote {}", result.path.display()));
        }
        Command::Aggregate { trace, mode, out } => {
            let result = run_aggregate(
                &trace_dir(&trace, &out, &file),
                mode_or(mode, &file, RhoMode::Paper)?,
                &out_dir(&out, &file),
            )?;
            emit(&result.report);
            emitln(&format!("wrote {}", result.path.display()));
        }
        Command::Allocate {
            trace,
            mode,
            alloc,
            budget,
            out,
        } => {
            let cfg = AllocateConfig {
                trace_dir: trace_dir(&trace, &out, &file),
                mode: mode_or(mode, &file, RhoMode::Paper)?,
                bit_choices: bit_choices(&alloc, &file),
                budget: budget_spec(&budget, &file, None)?,
                use_manifest_pins: !alloc.no_manifest_pins,
                extra_pins: pins(&alloc),
                solver: solver(&alloc, &file)?,
                out_dir: out_dir(&out, &file),
            };
            let result = run_allocate(&cfg)?;
            emit(&result.allocation_report);
            if let Some(notice) = &result.notice {
                emitln(&format!("note: {notice}"));
            }
            for path in &result.files {
                emitln(&format!("wrote {}", path.display()));
            }
        }
        Command::SamplingStudy {
            toy,
            mode,
            seeds,
            fractions,
            out,
        } => {
            let default = SamplingStudyConfig::new(out_dir(&out, &file));
            let cfg = SamplingStudyConfig {
                toy: toy_config(&toy, &file)?,
                mode: mode_or(mode, &file, RhoMode::Mean)?,
                seeds: seeds.or(file.seeds).unwrap_or(default.seeds),
                fractions: match fractions {
                    Some(f) => f,
                    None => match &file.fractions {
                        Some(list) => list
                            .iter()
                            .map(|s| {
                                s.parse::<SamplingFraction>()
                                    .map_err(|e| invalid(format!("fractions: {e}")))
                            })
                            .collect::<Result<_, _>>()?,
                        None => default.fractions,
                    },
                },
                out_dir: default.out_dir,
            };
            let report = run_sampling_study(&cfg)?;
            emit(&report.report);
            emitln(&format!("wrote {}", report.path.display()));
        }
        Command::QuantizeEval {
            toy,
            mode,
            alloc,
            budget,
            scheme,
            activation_bits,
            fp_activations,
            allocation,
            out,
        } => {
            let cfg = QuantizeEvalConfig {
                toy: toy_config(&toy, &file)?,
                mode: mode_or(mode, &file, RhoMode::Paper)?,
                bit_choices: bit_choices(&alloc, &file),
                budget: budget_spec(&budget, &file, Some(BudgetSpec::UniformBits(4)))?,
                scheme: match scheme {
                    Some(s) => s,
                    None => {
                        from_file::<Scheme>(&file.scheme, "scheme")?.unwrap_or(Scheme::Symmetric)
                    }
                },
                activation_bits: if fp_activations {
                    None
                } else {
                    Some(activation_bits.or(file.activation_bits).unwrap_or(8))
                },
                use_manifest_pins: !alloc.no_manifest_pins,
                extra_pins: pins(&alloc),
                solver: solver(&alloc, &file)?,
                allocation_json: allocation,
                out_dir: out_dir(&out, &file),
            };
            let report = run_quantize_eval(&cfg)?;
            emit(&report.report);
            emitln(&format!("wrote {}", report.path.display()));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // --help and --version land here too; only real parse
            // failures are invalid input.
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 3,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
