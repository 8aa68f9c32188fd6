//! End-to-end commands shared by the CLI and the integration tests: trace
//! generation, orthogonality and importance reports, bit allocation, the
//! timestep-sampling study, and the quantization evaluation.
//!
//! Every command validates its inputs before any expensive computation,
//! writes reports atomically, and is deterministic: identical config plus
//! seed produces byte-identical files. Floats in reports are fixed at six
//! significant digits.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregation::{aggregate, gamma_rows, ImportanceScores, RhoMode};
use crate::allocator::{
    self, objective, solve_brute_force, solve_dp, solve_greedy, total_size, AllocError,
    AllocationProblem, BitAllocation, Solver,
};
use crate::diffusion::{
    generate_trace, run_reverse_chain, sample_timesteps, DiffusionError, DiffusionSchedule,
    SamplingFraction, ToyDenoiser, ToyModelParams,
};
use crate::orm::{orm_stack, OrmError};
use crate::quantizer::{
    apply_allocation, calibrate_asymmetric, LayerQuantStats, QuantError, QuantizerConfig, Scheme,
};
use crate::report::{fmt6, write_atomic};
use crate::trace::{read_trace, write_trace, Dtype, LayerMeta, TraceError};
use crate::Execution;

pub const TRACE_SUBDIR: &str = "trace";
pub const ORM_REPORT_FILE: &str = "orm_report.txt";
pub const IMPORTANCE_FILE: &str = "importance.txt";
pub const ALLOCATION_FILE: &str = "allocation.txt";
pub const ALLOCATION_JSON_FILE: &str = "allocation.json";
pub const SAMPLING_STUDY_FILE: &str = "sampling_study.txt";
pub const EVAL_FILE: &str = "eval.txt";

/// Toy-model generation parameters shared by every command that builds
/// the bundled denoiser.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyConfig {
    pub data_dim: usize,
    pub time_dim: usize,
    pub hidden1: usize,
    pub hidden2: usize,
    pub timesteps: usize,
    pub samples: usize,
    pub seed: u64,
    pub dtype: Dtype,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            data_dim: 8,
            time_dim: 4,
            hidden1: 32,
            hidden2: 48,
            timesteps: 20,
            samples: 64,
            seed: 7,
            dtype: Dtype::F32,
            beta_start: 1e-4,
            beta_end: 2e-2,
        }
    }
}

impl ToyConfig {
    fn model_params(&self) -> ToyModelParams {
        ToyModelParams {
            data_dim: self.data_dim,
            time_dim: self.time_dim,
            hidden1: self.hidden1,
            hidden2: self.hidden2,
            timesteps: self.timesteps,
            seed: self.seed,
        }
    }

    pub fn build(&self) -> Result<(ToyDenoiser, DiffusionSchedule), PipelineError> {
        if self.samples == 0 {
            return Err(PipelineError::Config("samples must be positive".into()));
        }
        let model = ToyDenoiser::seeded(&self.model_params())?;
        let schedule = DiffusionSchedule::linear(self.timesteps, self.beta_start, self.beta_end)?;
        Ok((model, schedule))
    }
}

/// How the size budget is given; everything resolves to bits.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BudgetSpec {
    Bits(u64),
    /// Model size in Mb as quoted in deployment tables; 1 Mb = 8*10^6
    /// bits.
    Megabytes(f64),
    /// The size of a uniform b-bit model: sum of param_count * b.
    UniformBits(u8),
}

impl BudgetSpec {
    pub fn resolve(&self, param_counts: &[u64]) -> Result<u64, PipelineError> {
        let bits = match *self {
            BudgetSpec::Bits(b) => b,
            BudgetSpec::Megabytes(mb) => {
                if !mb.is_finite() || mb <= 0.0 {
                    return Err(PipelineError::Config(format!(
                        "budget of {mb} Mb does not parse to a positive bit count"
                    )));
                }
                (mb * 8e6).round() as u64
            }
            BudgetSpec::UniformBits(b) => {
                if b == 0 || b > 32 {
                    return Err(PipelineError::Config(format!(
                        "uniform budget width {b} outside 1..=32"
                    )));
                }
                let total: u128 = param_counts.iter().map(|&p| p as u128 * b as u128).sum();
                total
                    .try_into()
                    .map_err(|_| PipelineError::Config("budget overflows u64".into()))?
            }
        };
        if bits == 0 {
            return Err(PipelineError::Config(
                "budget must be a positive number of bits".into(),
            ));
        }
        Ok(bits)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SolverChoice {
    /// Exact DP, falling back to greedy (with a notice) on instances past
    /// the DP guards.
    #[default]
    Auto,
    Dp,
    Greedy,
    BruteForce,
}

impl std::str::FromStr for SolverChoice {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "auto" => Ok(SolverChoice::Auto),
            "dp" => Ok(SolverChoice::Dp),
            "greedy" => Ok(SolverChoice::Greedy),
            "brute-force" => Ok(SolverChoice::BruteForce),
            other => Err(format!(
                "unknown solver {other:?} (expected auto, dp, greedy, or brute-force)"
            )),
        }
    }
}

fn solve_with_choice(
    problem: &AllocationProblem,
    choice: SolverChoice,
) -> Result<(BitAllocation, Option<String>), PipelineError> {
    match choice {
        SolverChoice::Dp => Ok((solve_dp(problem)?, None)),
        SolverChoice::Greedy => Ok((solve_greedy(problem)?, None)),
        SolverChoice::BruteForce => Ok((solve_brute_force(problem)?, None)),
        SolverChoice::Auto => match solve_dp(problem) {
            Ok(a) => Ok((a, None)),
            Err(AllocError::InstanceTooLarge { detail }) => {
                let notice = format!("dp refused ({detail}); solved with greedy instead");
                Ok((solve_greedy(problem)?, Some(notice)))
            }
            Err(e) => Err(e.into()),
        },
    }
}

/// Pinned widths for a trace's layers: manifest pins (unless disabled)
/// overlaid with explicit overrides.
fn resolve_pins(
    layers: &[LayerMeta],
    use_manifest_pins: bool,
    extra_pins: &[(usize, u8)],
) -> BTreeMap<usize, u8> {
    let mut pins = BTreeMap::new();
    if use_manifest_pins {
        for layer in layers {
            if let Some(bits) = layer.pinned_bits {
                pins.insert(layer.layer_id, bits);
            }
        }
    }
    for &(layer, bits) in extra_pins {
        pins.insert(layer, bits);
    }
    pins
}

fn write_report_file(dir: &Path, name: &str, contents: &str) -> Result<PathBuf, PipelineError> {
    std::fs::create_dir_all(dir).map_err(|e| PipelineError::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    let path = dir.join(name);
    write_atomic(&path, contents.as_bytes()).map_err(|e| PipelineError::Io {
        path: path.clone(),
        source: e,
    })?;
    Ok(path)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenTracesConfig {
    pub toy: ToyConfig,
    /// Restrict the written trace to this fraction of timesteps (original
    /// labels are kept).
    pub fraction: SamplingFraction,
    /// Append the neighboring-timestep similarity summary (costs one
    /// orthogonality pass over the fresh trace).
    pub neighbor_similarity: bool,
    pub out_dir: PathBuf,
}

impl GenTracesConfig {
    pub fn new(out_dir: PathBuf) -> Self {
        GenTracesConfig {
            toy: ToyConfig::default(),
            fraction: SamplingFraction::Full,
            neighbor_similarity: true,
            out_dir,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenSummary {
    pub trace_dir: PathBuf,
    pub summary: String,
}

/// Generates a toy trace and writes it under `out_dir/trace`.
pub fn run_gen_traces(cfg: &GenTracesConfig) -> Result<GenSummary, PipelineError> {
    let (model, schedule) = cfg.toy.build()?;
    let full = generate_trace(
        &model,
        &schedule,
        cfg.toy.samples,
        cfg.toy.seed,
        cfg.toy.dtype,
    )?;
    let trace = if cfg.fraction == SamplingFraction::Full {
        full
    } else {
        let labels = sample_timesteps(cfg.toy.timesteps, cfg.fraction);
        full.restrict(&labels)?
    };

    let trace_dir = cfg.out_dir.join(TRACE_SUBDIR);
    write_trace(&trace, &trace_dir)?;

    let m = trace.manifest();
    let mut summary = format!(
        "trace written to {}\nmodel {}: {} layers, T {}, samples {}, seed {}, dtype {}\ntimesteps traced: {} of {}\n",
        trace_dir.display(),
        m.model_name,
        m.num_layers,
        m.num_timesteps,
        m.num_samples,
        cfg.toy.seed,
        m.dtype,
        m.timestep_indices.len(),
        m.num_timesteps,
    );
    for layer in &m.layers {
        let pin = match layer.pinned_bits {
            Some(b) => format!(" pinned {b}"),
            None => String::new(),
        };
        summary.push_str(&format!(
            "layer {} {}: dim {}, params {}{}\n",
            layer.layer_id, layer.name, layer.feature_dim, layer.param_count, pin
        ));
    }
    if cfg.neighbor_similarity {
        let stack = orm_stack(&trace)?;
        let gamma = gamma_rows(&stack);
        let t_s = stack.len();
        if t_s >= 2 {
            let mut acc = 0.0;
            for t in 0..t_s - 1 {
                let mut layer_mean = 0.0;
                for i in 0..stack.dim() {
                    layer_mean += (gamma[[i, t]] - gamma[[i, t + 1]]).abs();
                }
                acc += layer_mean / stack.dim() as f64;
            }
            summary.push_str(&format!(
                "neighboring-timestep similarity: mean |gamma(t) - gamma(t+1)| = {} over {} adjacent traced pairs\n",
                fmt6(acc / (t_s - 1) as f64),
                t_s - 1
            ));
        }
    }
    Ok(GenSummary { trace_dir, summary })
}

#[derive(Debug, Clone, PartialEq)]
pub struct OrmReportOutput {
    pub path: PathBuf,
    pub report: String,
}

/// Computes the orthogonality stack of a stored trace and writes its
/// report.
pub fn run_orm_report(trace_dir: &Path, out_dir: &Path) -> Result<OrmReportOutput, PipelineError> {
    let trace = read_trace(trace_dir)?;
    let stack = orm_stack(&trace)?;
    let report = stack.render_report();
    let path = write_report_file(out_dir, ORM_REPORT_FILE, &report)?;
    Ok(OrmReportOutput { path, report })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregateOutput {
    pub path: PathBuf,
    pub report: String,
    pub scores: ImportanceScores,
}

/// Aggregates a stored trace into importance scores and writes the
/// report.
pub fn run_aggregate(
    trace_dir: &Path,
    mode: RhoMode,
    out_dir: &Path,
) -> Result<AggregateOutput, PipelineError> {
    let trace = read_trace(trace_dir)?;
    let stack = orm_stack(&trace)?;
    let scores = aggregate(&stack, mode);
    let names: Vec<String> = trace
        .manifest()
        .layers
        .iter()
        .map(|l| l.name.clone())
        .collect();
    let report = scores.render_report(&names);
    let path = write_report_file(out_dir, IMPORTANCE_FILE, &report)?;
    Ok(AggregateOutput {
        path,
        report,
        scores,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AllocateConfig {
    pub trace_dir: PathBuf,
    pub mode: RhoMode,
    pub bit_choices: Vec<u8>,
    pub budget: BudgetSpec,
    pub use_manifest_pins: bool,
    pub extra_pins: Vec<(usize, u8)>,
    pub solver: SolverChoice,
    pub out_dir: PathBuf,
}

impl AllocateConfig {
    pub fn new(trace_dir: PathBuf, budget: BudgetSpec, out_dir: PathBuf) -> Self {
        AllocateConfig {
            trace_dir,
            mode: RhoMode::Paper,
            bit_choices: default_bit_choices(),
            budget,
            use_manifest_pins: true,
            extra_pins: Vec::new(),
            solver: SolverChoice::Auto,
            out_dir,
        }
    }
}

/// The menu the allocator searches when none is given: three to eight
/// bits, the usual post-training range.
pub fn default_bit_choices() -> Vec<u8> {
    vec![3, 4, 5, 6, 7, 8]
}

/// Machine-readable allocation artifact, consumed by `quantize-eval` and
/// by external frameworks applying the allocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationRecord {
    pub solver: String,
    pub mode: String,
    pub bit_choices: Vec<u8>,
    pub budget_bits: u64,
    pub used_bits: u64,
    pub objective_value: f64,
    pub layers: Vec<AllocationLayerRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationLayerRecord {
    pub layer_id: usize,
    pub name: String,
    pub param_count: u64,
    pub theta: f64,
    pub coeff: f64,
    pub bits: u8,
    pub pinned: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AllocateOutput {
    pub scores: ImportanceScores,
    pub allocation: BitAllocation,
    pub budget_bits: u64,
    /// Set when the auto solver fell back to greedy.
    pub notice: Option<String>,
    pub importance_report: String,
    pub allocation_report: String,
    pub files: Vec<PathBuf>,
}

/// Full allocation pass over a stored trace: orthogonality, aggregation,
/// solve, and the three report files.
pub fn run_allocate(cfg: &AllocateConfig) -> Result<AllocateOutput, PipelineError> {
    let trace = read_trace(&cfg.trace_dir)?;
    let manifest = trace.manifest();
    let names: Vec<String> = manifest.layers.iter().map(|l| l.name.clone()).collect();
    let param_counts: Vec<u64> = manifest.layers.iter().map(|l| l.param_count).collect();
    let pins = resolve_pins(&manifest.layers, cfg.use_manifest_pins, &cfg.extra_pins);
    let budget_bits = cfg.budget.resolve(&param_counts)?;

    let stack = orm_stack(&trace)?;
    let scores = aggregate(&stack, cfg.mode);
    let problem = AllocationProblem::new(
        scores.theta.clone(),
        param_counts,
        cfg.bit_choices.clone(),
        budget_bits,
        pins,
    )?;
    let (allocation, notice) = solve_with_choice(&problem, cfg.solver)?;

    let importance_report = scores.render_report(&names);
    let allocation_report = allocator::render_report(&problem, &allocation, &names);
    let record = AllocationRecord {
        solver: allocation.solver.to_string(),
        mode: cfg.mode.to_string(),
        bit_choices: problem.bit_choices.clone(),
        budget_bits,
        used_bits: allocation.used_bits,
        objective_value: allocation.objective_value,
        layers: (0..names.len())
            .map(|i| AllocationLayerRecord {
                layer_id: i,
                name: names[i].clone(),
                param_count: problem.param_counts[i],
                theta: problem.theta[i],
                coeff: allocator::suffix_coefficients(&problem.theta)[i],
                bits: allocation.bits[i],
                pinned: problem.pinned.contains_key(&i),
            })
            .collect(),
    };
    let mut json = serde_json::to_string_pretty(&record)
        .map_err(|e| PipelineError::Config(format!("allocation record: {e}")))?;
    json.push('\n');

    let files = vec![
        write_report_file(&cfg.out_dir, IMPORTANCE_FILE, &importance_report)?,
        write_report_file(&cfg.out_dir, ALLOCATION_FILE, &allocation_report)?,
        write_report_file(&cfg.out_dir, ALLOCATION_JSON_FILE, &json)?,
    ];
    Ok(AllocateOutput {
        scores,
        allocation,
        budget_bits,
        notice,
        importance_report,
        allocation_report,
        files,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplingStudyConfig {
    pub toy: ToyConfig,
    /// The sampling-rate-stable normalization is the study default; the
    /// allocation default ("paper") grows with the timestep count, which
    /// is exactly the effect the study would drown in.
    pub mode: RhoMode,
    pub seeds: usize,
    pub fractions: Vec<SamplingFraction>,
    pub out_dir: PathBuf,
}

impl SamplingStudyConfig {
    pub fn new(out_dir: PathBuf) -> Self {
        SamplingStudyConfig {
            toy: ToyConfig::default(),
            mode: RhoMode::Mean,
            seeds: 5,
            fractions: SamplingFraction::ALL.to_vec(),
            out_dir,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapcRow {
    pub fraction: SamplingFraction,
    pub timestep_count: usize,
    /// Mean over layers of |theta_sampled - theta_full| / theta_full in
    /// percent; mean and population std across seeds.
    pub mapc_mean: f64,
    pub mapc_std: f64,
    /// Max over layers of the same percentage change.
    pub biggest_mean: f64,
    pub biggest_std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapcReport {
    pub rows: Vec<MapcRow>,
    pub seeds: usize,
    pub base_seed: u64,
    pub mode: RhoMode,
    pub report: String,
    pub path: PathBuf,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Measures how much the importance coefficients move when the
/// orthogonality matrices are computed on a sampled subset of timesteps
/// instead of the full trajectory, across several generation seeds.
pub fn run_sampling_study(cfg: &SamplingStudyConfig) -> Result<MapcReport, PipelineError> {
    if cfg.seeds == 0 {
        return Err(PipelineError::Config(
            "study needs at least one seed".into(),
        ));
    }
    if cfg.fractions.is_empty() {
        return Err(PipelineError::Config(
            "study needs at least one fraction".into(),
        ));
    }
    let (model, schedule) = cfg.toy.build()?;

    // per fraction, per seed: (mapc, biggest)
    let mut samples: Vec<Vec<(f64, f64)>> = vec![Vec::new(); cfg.fractions.len()];
    let mut counts: Vec<usize> = vec![0; cfg.fractions.len()];
    for k in 0..cfg.seeds {
        let seed = cfg.toy.seed.wrapping_add(k as u64);
        let trace = generate_trace(&model, &schedule, cfg.toy.samples, seed, cfg.toy.dtype)?;
        let full_stack = orm_stack(&trace)?;
        let theta_full = aggregate(&full_stack, cfg.mode).theta;
        for (fi, &fraction) in cfg.fractions.iter().enumerate() {
            let labels = sample_timesteps(cfg.toy.timesteps, fraction);
            counts[fi] = labels.len();
            // The stack over the restricted trace equals the full stack's
            // matrices at those labels, so select instead of recompute.
            let sub_stack = full_stack.restrict(&labels)?;
            let theta_sub = aggregate(&sub_stack, cfg.mode).theta;
            let mut sum = 0.0;
            let mut biggest = 0.0f64;
            for (ts, tf) in theta_sub.iter().zip(&theta_full) {
                let change = (ts - tf).abs() / tf * 100.0;
                sum += change;
                biggest = biggest.max(change);
            }
            let mapc = sum / theta_full.len() as f64;
            samples[fi].push((mapc, biggest));
        }
    }

    let rows: Vec<MapcRow> = cfg
        .fractions
        .iter()
        .enumerate()
        .map(|(fi, &fraction)| {
            let mapcs: Vec<f64> = samples[fi].iter().map(|&(m, _)| m).collect();
            let biggests: Vec<f64> = samples[fi].iter().map(|&(_, b)| b).collect();
            let (mapc_mean, mapc_std) = mean_std(&mapcs);
            let (biggest_mean, biggest_std) = mean_std(&biggests);
            MapcRow {
                fraction,
                timestep_count: counts[fi],
                mapc_mean,
                mapc_std,
                biggest_mean,
                biggest_std,
            }
        })
        .collect();

    let mut report = format!(
        "timestep sampling study: T {}, layers {}, samples {}, mode {}, {} seeds (base {})\n",
        cfg.toy.timesteps,
        model.num_layers(),
        cfg.toy.samples,
        cfg.mode,
        cfg.seeds,
        cfg.toy.seed
    );
    report.push_str("fraction  timesteps  mapc_pct (mean +- std)      biggest_pct (mean +- std)\n");
    for row in &rows {
        report.push_str(&format!(
            "{:<9} {:<10} {} +- {}    {} +- {}\n",
            row.fraction.to_string(),
            row.timestep_count,
            fmt6(row.mapc_mean),
            fmt6(row.mapc_std),
            fmt6(row.biggest_mean),
            fmt6(row.biggest_std)
        ));
    }
    let path = write_report_file(&cfg.out_dir, SAMPLING_STUDY_FILE, &report)?;
    Ok(MapcReport {
        rows,
        seeds: cfg.seeds,
        base_seed: cfg.toy.seed,
        mode: cfg.mode,
        report,
        path,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizeEvalConfig {
    pub toy: ToyConfig,
    pub mode: RhoMode,
    pub bit_choices: Vec<u8>,
    pub budget: BudgetSpec,
    /// Weight quantization scheme.
    pub scheme: Scheme,
    /// Activation fake-quantization width for the quantized runs; `None`
    /// runs activations at full precision.
    pub activation_bits: Option<u8>,
    pub use_manifest_pins: bool,
    pub extra_pins: Vec<(usize, u8)>,
    pub solver: SolverChoice,
    /// Reuse a stored allocation instead of deriving one from a fresh
    /// trace. Bits from the record are applied verbatim.
    pub allocation_json: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl QuantizeEvalConfig {
    pub fn new(out_dir: PathBuf) -> Self {
        QuantizeEvalConfig {
            toy: ToyConfig::default(),
            mode: RhoMode::Paper,
            bit_choices: default_bit_choices(),
            budget: BudgetSpec::UniformBits(4),
            scheme: Scheme::Symmetric,
            activation_bits: Some(8),
            use_manifest_pins: true,
            extra_pins: Vec::new(),
            solver: SolverChoice::Auto,
            allocation_json: None,
            out_dir,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub label: String,
    pub size_bits: u64,
    /// None for the full-precision reference row.
    pub mse_vs_fp: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// fp, uniform, mixed.
    pub rows: Vec<EvalRow>,
    pub mixed_bits: Vec<u8>,
    pub uniform_bits: u8,
    pub theta: Vec<f64>,
    /// (max theta - min theta) / min theta.
    pub theta_spread: f64,
    pub budget_bits: u64,
    pub layer_names: Vec<String>,
    pub pinned: BTreeMap<usize, u8>,
    pub mixed_weight_stats: Vec<LayerQuantStats>,
    pub notice: Option<String>,
    pub report: String,
    pub path: PathBuf,
}

fn batch_mse(a: &ndarray::Array2<f64>, b: &ndarray::Array2<f64>) -> f64 {
    debug_assert_eq!(a.dim(), b.dim());
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        let e = x - y;
        acc += e * e;
    }
    acc / a.len() as f64
}

/// Compares full-precision, uniform, and mixed-precision versions of the
/// toy model on identical reverse chains and reports sizes and output
/// error.
pub fn run_quantize_eval(cfg: &QuantizeEvalConfig) -> Result<EvalReport, PipelineError> {
    let (model, schedule) = cfg.toy.build()?;
    let names = model.layer_names();
    let param_counts = model.layer_param_counts();
    let budget_bits = cfg.budget.resolve(&param_counts)?;

    // Where the mixed bits come from: a stored record, or a fresh trace
    // aggregated and solved right here.
    let (mixed_bits, theta, pinned, notice) = match &cfg.allocation_json {
        Some(path) => {
            let bytes = std::fs::read(path).map_err(|e| PipelineError::Io {
                path: path.clone(),
                source: e,
            })?;
            let record: AllocationRecord = serde_json::from_slice(&bytes)
                .map_err(|e| PipelineError::Config(format!("allocation record: {e}")))?;
            if record.layers.len() != names.len() {
                return Err(PipelineError::Config(format!(
                    "allocation covers {} layers, model has {}",
                    record.layers.len(),
                    names.len()
                )));
            }
            for (i, l) in record.layers.iter().enumerate() {
                if l.name != names[i] || l.param_count != param_counts[i] {
                    return Err(PipelineError::Config(format!(
                        "allocation layer {i} ({}, {} params) does not match the model ({}, {} params)",
                        l.name, l.param_count, names[i], param_counts[i]
                    )));
                }
                if l.bits == 0 || l.bits > 32 {
                    return Err(PipelineError::Config(format!(
                        "allocation layer {i} has {} bits; valid range is 1..=32",
                        l.bits
                    )));
                }
            }
            let bits: Vec<u8> = record.layers.iter().map(|l| l.bits).collect();
            let theta: Vec<f64> = record.layers.iter().map(|l| l.theta).collect();
            let pins: BTreeMap<usize, u8> = record
                .layers
                .iter()
                .filter(|l| l.pinned)
                .map(|l| (l.layer_id, l.bits))
                .collect();
            (bits, theta, pins, None)
        }
        None => {
            let trace = generate_trace(
                &model,
                &schedule,
                cfg.toy.samples,
                cfg.toy.seed,
                cfg.toy.dtype,
            )?;
            let stack = orm_stack(&trace)?;
            let scores = aggregate(&stack, cfg.mode);
            let pins = resolve_pins(
                &model.manifest_layers(),
                cfg.use_manifest_pins,
                &cfg.extra_pins,
            );
            let problem = AllocationProblem::new(
                scores.theta.clone(),
                param_counts.clone(),
                cfg.bit_choices.clone(),
                budget_bits,
                pins.clone(),
            )?;
            let (allocation, notice) = solve_with_choice(&problem, cfg.solver)?;
            (allocation.bits, scores.theta, pins, notice)
        }
    };

    // Uniform compare point: the widest menu entry whose uniform size
    // stays inside the budget, ignoring pins (uniform means uniform).
    let mut menu = cfg.bit_choices.clone();
    menu.sort_unstable();
    menu.dedup();
    if menu.is_empty() {
        return Err(PipelineError::Config("bit choice menu is empty".into()));
    }
    let uniform_bits = menu
        .iter()
        .rev()
        .copied()
        .find(|&b| total_size(&param_counts, &vec![b; names.len()]) <= budget_bits as u128)
        .unwrap_or(menu[0]);

    // Three runs over identical chains: the noise streams depend only on
    // (seed, sample), so the runs differ in nothing but the model.
    let exec = Execution::default();
    let fp = run_reverse_chain(&model, &schedule, cfg.toy.samples, cfg.toy.seed, None, exec)?;

    let act_cfgs: Option<Vec<QuantizerConfig>> = match cfg.activation_bits {
        None => None,
        Some(bits) => {
            // Static calibration from the full-precision run's observed
            // ranges; two points produce the same grid as the full data.
            let mut cfgs = Vec::with_capacity(names.len());
            for &(lo, hi) in &fp.act_ranges {
                cfgs.push(calibrate_asymmetric(&[lo, hi], bits)?);
            }
            Some(cfgs)
        }
    };

    let flats = model.flat_weights();
    let run_quantized = |bits: &[u8]| -> Result<ndarray::Array2<f64>, PipelineError> {
        let alloc = BitAllocation {
            bits: bits.to_vec(),
            objective_value: objective(bits, &theta)?,
            used_bits: total_size(&param_counts, bits)
                .try_into()
                .map_err(|_| PipelineError::Config("model size overflows u64".into()))?,
            solver: Solver::Greedy,
        };
        let (qweights, _) = apply_allocation(&flats, &alloc, cfg.scheme)?;
        let qmodel = model.with_flat_weights(&qweights)?;
        let out = run_reverse_chain(
            &qmodel,
            &schedule,
            cfg.toy.samples,
            cfg.toy.seed,
            act_cfgs.as_deref(),
            exec,
        )?;
        Ok(out.x0)
    };

    let uniform_vec = vec![uniform_bits; names.len()];
    let x0_uniform = run_quantized(&uniform_vec)?;
    let x0_mixed = run_quantized(&mixed_bits)?;

    let mixed_alloc = BitAllocation {
        bits: mixed_bits.clone(),
        objective_value: objective(&mixed_bits, &theta)?,
        used_bits: total_size(&param_counts, &mixed_bits)
            .try_into()
            .map_err(|_| PipelineError::Config("model size overflows u64".into()))?,
        solver: Solver::Greedy,
    };
    let (_, mixed_weight_stats) = apply_allocation(&flats, &mixed_alloc, cfg.scheme)?;

    let fp_size: u64 = total_size(&param_counts, &vec![32u8; names.len()])
        .try_into()
        .map_err(|_| PipelineError::Config("model size overflows u64".into()))?;
    let uniform_size: u64 = total_size(&param_counts, &uniform_vec)
        .try_into()
        .map_err(|_| PipelineError::Config("model size overflows u64".into()))?;

    let rows = vec![
        EvalRow {
            label: "fp".into(),
            size_bits: fp_size,
            mse_vs_fp: None,
        },
        EvalRow {
            label: format!("uniform-{uniform_bits}"),
            size_bits: uniform_size,
            mse_vs_fp: Some(batch_mse(&x0_uniform, &fp.x0)),
        },
        EvalRow {
            label: "mixed".into(),
            size_bits: mixed_alloc.used_bits,
            mse_vs_fp: Some(batch_mse(&x0_mixed, &fp.x0)),
        },
    ];

    let theta_min = theta.iter().copied().fold(f64::INFINITY, f64::min);
    let theta_max = theta.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let theta_spread = (theta_max - theta_min) / theta_min;

    let mut report = format!(
        "quantization evaluation: T {}, samples {}, seed {}, weights {}, activations {}\n",
        cfg.toy.timesteps,
        cfg.toy.samples,
        cfg.toy.seed,
        cfg.scheme,
        match cfg.activation_bits {
            Some(b) => format!("{b}-bit asymmetric"),
            None => "full precision".into(),
        }
    );
    report.push_str(&format!(
        "budget_bits {}\ntheta spread (max-min)/min: {}\n",
        budget_bits,
        fmt6(theta_spread)
    ));
    report.push_str("layer  name          params   theta        bits  weight_mse\n");
    for i in 0..names.len() {
        let pin = if pinned.contains_key(&i) {
            " (pinned)"
        } else {
            ""
        };
        report.push_str(&format!(
            "{:<6} {:<13} {:<8} {:<12} {:<5} {}{}\n",
            i,
            names[i],
            param_counts[i],
            fmt6(theta[i]),
            mixed_bits[i],
            fmt6(mixed_weight_stats[i].mse),
            pin
        ));
    }
    report.push_str("run         size_bits   mse_vs_fp\n");
    for row in &rows {
        report.push_str(&format!(
            "{:<11} {:<11} {}\n",
            row.label,
            row.size_bits,
            row.mse_vs_fp.map_or_else(|| "-".into(), fmt6)
        ));
    }
    if let Some(n) = &notice {
        report.push_str(&format!("note: {n}\n"));
    }
    let path = write_report_file(&cfg.out_dir, EVAL_FILE, &report)?;

    Ok(EvalReport {
        rows,
        mixed_bits,
        uniform_bits,
        theta,
        theta_spread,
        budget_bits,
        layer_names: names,
        pinned,
        mixed_weight_stats,
        notice,
        report,
        path,
    })
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Orm(#[from] OrmError),
    #[error(transparent)]
    Alloc(#[from] AllocError),
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("i/o on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl PipelineError {
    /// Process exit code: 0 success, 2 infeasible budget, 3 invalid
    /// input, 4 internal invariant violation.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Alloc(AllocError::Infeasible { .. }) => 2,
            PipelineError::Alloc(AllocError::SizeOverflow) => 4,
            PipelineError::Orm(e) => match e {
                OrmError::ZeroActivation { .. }
                | OrmError::RowMismatch { .. }
                | OrmError::UnknownTimestep(_) => 3,
                // The remaining variants mean this crate built a broken
                // matrix from valid inputs.
                _ => 4,
            },
            _ => 3,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn budget_specs_resolve_to_bits() {
        let p = [100u64, 50];
        assert_eq!(BudgetSpec::Bits(1234).resolve(&p).unwrap(), 1234);
        assert_eq!(BudgetSpec::UniformBits(4).resolve(&p).unwrap(), 600);
        // 1 Mb = 8e6 bits.
        assert_eq!(BudgetSpec::Megabytes(0.25).resolve(&p).unwrap(), 2_000_000);
        assert!(BudgetSpec::Megabytes(-1.0).resolve(&p).is_err());
        assert!(BudgetSpec::Bits(0).resolve(&p).is_err());
        assert!(BudgetSpec::UniformBits(40).resolve(&p).is_err());
    }

    #[test]
    fn pins_merge_with_overrides_winning() {
        let layers = vec![
            LayerMeta {
                layer_id: 0,
                name: "a".into(),
                param_count: 1,
                feature_dim: 1,
                pinned_bits: Some(8),
            },
            LayerMeta {
                layer_id: 1,
                name: "b".into(),
                param_count: 1,
                feature_dim: 1,
                pinned_bits: None,
            },
        ];
        let pins = resolve_pins(&layers, true, &[(1, 6)]);
        assert_eq!(pins.get(&0), Some(&8));
        assert_eq!(pins.get(&1), Some(&6));
        let pins = resolve_pins(&layers, false, &[]);
        assert!(pins.is_empty());
    }

    #[test]
    fn solver_choice_parses() {
        assert_eq!("auto".parse::<SolverChoice>().unwrap(), SolverChoice::Auto);
        assert_eq!(
            "brute-force".parse::<SolverChoice>().unwrap(),
            SolverChoice::BruteForce
        );
        assert!("fast".parse::<SolverChoice>().is_err());
    }
}
