//! Cross-module integration: the packaged commands must equal the same
//! work done by hand with the library pieces, and the documented
//! edge-case behaviors must hold end to end.

use std::collections::BTreeMap;

use mixprec_core::aggregation::{aggregate, RhoMode};
use mixprec_core::allocator::{self, AllocationProblem};
use mixprec_core::diffusion::{
    generate_trace, sample_timesteps, DiffusionSchedule, SamplingFraction, ToyDenoiser,
    ToyModelParams,
};
use mixprec_core::orm::{orm_stack, OrmError};
use mixprec_core::pipeline::{
    run_allocate, run_gen_traces, run_orm_report, run_quantize_eval, AllocateConfig,
    AllocationRecord, BudgetSpec, GenTracesConfig, PipelineError, QuantizeEvalConfig, SolverChoice,
    ALLOCATION_JSON_FILE,
};
use mixprec_core::trace::read_trace;

fn default_toy() -> (ToyDenoiser, DiffusionSchedule) {
    let model = ToyDenoiser::seeded(&ToyModelParams::default()).unwrap();
    let schedule = DiffusionSchedule::linear(model.timesteps(), 1e-4, 2e-2).unwrap();
    (model, schedule)
}

/// The allocate command on a stored trace equals chaining the modules by
/// hand: same reports byte for byte, same bit vector.
#[test]
fn allocate_command_equals_manual_module_chain() {
    let tmp = tempfile::tempdir().unwrap();
    let mut gen = GenTracesConfig::new(tmp.path().to_path_buf());
    gen.toy.samples = 24;
    gen.neighbor_similarity = false;
    let summary = run_gen_traces(&gen).unwrap();

    let cfg = AllocateConfig::new(
        summary.trace_dir.clone(),
        BudgetSpec::UniformBits(4),
        tmp.path().join("cmd"),
    );
    let output = run_allocate(&cfg).unwrap();

    // By hand, with the same defaults the command uses.
    let trace = read_trace(&summary.trace_dir).unwrap();
    let manifest = trace.manifest();
    let names: Vec<String> = manifest.layers.iter().map(|l| l.name.clone()).collect();
    let params: Vec<u64> = manifest.layers.iter().map(|l| l.param_count).collect();
    let pins: BTreeMap<usize, u8> = manifest
        .layers
        .iter()
        .filter_map(|l| l.pinned_bits.map(|b| (l.layer_id, b)))
        .collect();
    let budget: u64 = params.iter().map(|p| p * 4).sum();
    let stack = orm_stack(&trace).unwrap();
    let scores = aggregate(&stack, RhoMode::Paper);
    let problem = AllocationProblem::new(
        scores.theta.clone(),
        params,
        vec![3, 4, 5, 6, 7, 8],
        budget,
        pins,
    )
    .unwrap();
    let manual = allocator::solve_dp(&problem).unwrap();

    assert_eq!(output.allocation.bits, manual.bits);
    assert_eq!(output.allocation.objective_value, manual.objective_value);
    assert_eq!(output.budget_bits, budget);
    assert_eq!(
        output.importance_report,
        scores.render_report(&names),
        "importance report drifted from the module rendering"
    );
    assert_eq!(
        output.allocation_report,
        allocator::render_report(&problem, &manual, &names),
        "allocation report drifted from the module rendering"
    );
}

/// Selecting matrices out of a full stack equals recomputing the stack on
/// a trace restricted to the same labels, bit for bit.
#[test]
fn stack_restriction_equals_restricted_trace() {
    let (model, schedule) = default_toy();
    let trace = generate_trace(&model, &schedule, 12, 3, mixprec_core::trace::Dtype::F32).unwrap();
    let full = orm_stack(&trace).unwrap();
    for fraction in [
        SamplingFraction::Half,
        SamplingFraction::Quarter,
        SamplingFraction::Twentieth,
    ] {
        let labels = sample_timesteps(model.timesteps(), fraction);
        let selected = full.restrict(&labels).unwrap();
        let recomputed = orm_stack(&trace.restrict(&labels).unwrap()).unwrap();
        assert_eq!(
            selected.matrices(),
            recomputed.matrices(),
            "fraction {fraction}"
        );
    }
    assert!(matches!(
        full.restrict(&[999]),
        Err(OrmError::UnknownTimestep(999))
    ));
}

/// gen-traces with a fraction writes the subset under the original
/// timestep labels.
#[test]
fn gen_traces_fraction_keeps_original_labels() {
    let tmp = tempfile::tempdir().unwrap();
    let mut gen = GenTracesConfig::new(tmp.path().to_path_buf());
    gen.toy.samples = 8;
    gen.fraction = SamplingFraction::Quarter;
    gen.neighbor_similarity = false;
    let summary = run_gen_traces(&gen).unwrap();
    let trace = read_trace(&summary.trace_dir).unwrap();
    assert_eq!(trace.timestep_indices(), vec![0, 4, 8, 12, 16]);
    assert_eq!(trace.manifest().num_timesteps, 20);

    let orm = run_orm_report(&summary.trace_dir, tmp.path()).unwrap();
    assert!(orm
        .report
        .starts_with("orthogonality matrices: 5 timesteps"));
}

/// An allocation record of uniform 4-bit widths makes the mixed run the
/// uniform run: identical outputs, identical error.
#[test]
fn uniform_allocation_record_collapses_mixed_onto_uniform() {
    let tmp = tempfile::tempdir().unwrap();

    // Build a genuine record first, then flatten it to uniform 4.
    let gen = {
        let mut g = GenTracesConfig::new(tmp.path().to_path_buf());
        g.toy.samples = 16;
        g.neighbor_similarity = false;
        g
    };
    let summary = run_gen_traces(&gen).unwrap();
    let alloc_cfg = AllocateConfig::new(
        summary.trace_dir,
        BudgetSpec::UniformBits(4),
        tmp.path().to_path_buf(),
    );
    run_allocate(&alloc_cfg).unwrap();
    let record_path = tmp.path().join(ALLOCATION_JSON_FILE);
    let mut record: AllocationRecord =
        serde_json::from_slice(&std::fs::read(&record_path).unwrap()).unwrap();
    for layer in &mut record.layers {
        layer.bits = 4;
        layer.pinned = false;
    }
    record.used_bits = record.layers.iter().map(|l| l.param_count * 4).sum();
    let flat_path = tmp.path().join("uniform4.json");
    std::fs::write(&flat_path, serde_json::to_vec_pretty(&record).unwrap()).unwrap();

    let mut eval_cfg = QuantizeEvalConfig::new(tmp.path().join("eval"));
    eval_cfg.toy.samples = 16;
    eval_cfg.allocation_json = Some(flat_path);
    let report = run_quantize_eval(&eval_cfg).unwrap();
    assert_eq!(report.uniform_bits, 4);
    assert_eq!(report.mixed_bits, vec![4; 6]);
    assert_eq!(
        report.rows[1].mse_vs_fp, report.rows[2].mse_vs_fp,
        "identical bit vectors must give identical chains"
    );
    assert_eq!(report.rows[1].size_bits, report.rows[2].size_bits);
}

/// A 32-bit "quantized" model is numerically the full-precision model.
#[test]
fn thirty_two_bit_quantization_is_near_identity() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = QuantizeEvalConfig::new(tmp.path().to_path_buf());
    cfg.toy.samples = 16;
    cfg.bit_choices = vec![32];
    cfg.budget = BudgetSpec::UniformBits(32);
    cfg.use_manifest_pins = false;
    cfg.activation_bits = None;
    let report = run_quantize_eval(&cfg).unwrap();
    for row in &report.rows[1..] {
        let mse = row.mse_vs_fp.unwrap();
        assert!(mse < 1e-10, "{}: mse {mse} is not near-identity", row.label);
    }
}

/// The Mb budget form is the bit budget divided by 8e6, end to end.
#[test]
fn megabyte_budget_matches_equivalent_bit_budget() {
    let tmp = tempfile::tempdir().unwrap();
    let mut gen = GenTracesConfig::new(tmp.path().to_path_buf());
    gen.toy.samples = 16;
    gen.neighbor_similarity = false;
    let summary = run_gen_traces(&gen).unwrap();

    let in_bits = {
        let cfg = AllocateConfig::new(
            summary.trace_dir.clone(),
            BudgetSpec::Bits(34528),
            tmp.path().join("bits"),
        );
        run_allocate(&cfg).unwrap()
    };
    let in_mb = {
        let cfg = AllocateConfig::new(
            summary.trace_dir.clone(),
            BudgetSpec::Megabytes(34528.0 / 8e6),
            tmp.path().join("mb"),
        );
        run_allocate(&cfg).unwrap()
    };
    assert_eq!(in_bits.budget_bits, in_mb.budget_bits);
    assert_eq!(in_bits.allocation.bits, in_mb.allocation.bits);
    assert_eq!(in_bits.allocation_report, in_mb.allocation_report);
}

/// Infeasible budgets and invalid inputs map to their exit codes.
#[test]
fn error_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let mut gen = GenTracesConfig::new(tmp.path().to_path_buf());
    gen.toy.samples = 8;
    gen.neighbor_similarity = false;
    let summary = run_gen_traces(&gen).unwrap();

    let infeasible = AllocateConfig::new(
        summary.trace_dir.clone(),
        BudgetSpec::Bits(700),
        tmp.path().join("x"),
    );
    let err = run_allocate(&infeasible).unwrap_err();
    assert_eq!(err.exit_code(), 2, "infeasible: {err}");

    let missing = AllocateConfig::new(
        tmp.path().join("no-such-trace"),
        BudgetSpec::Bits(1_000_000),
        tmp.path().join("y"),
    );
    let err = run_allocate(&missing).unwrap_err();
    assert_eq!(err.exit_code(), 3, "missing trace: {err}");

    let bad_budget = BudgetSpec::Megabytes(-2.0).resolve(&[10]).unwrap_err();
    assert_eq!(bad_budget.exit_code(), 3);
    assert!(matches!(bad_budget, PipelineError::Config(_)));
}

/// The solver choices all solve the default instance, and the forced
/// brute-force route agrees with dp.
#[test]
fn solver_choices_agree_on_the_default_instance() {
    let tmp = tempfile::tempdir().unwrap();
    let mut gen = GenTracesConfig::new(tmp.path().to_path_buf());
    gen.toy.samples = 16;
    gen.neighbor_similarity = false;
    let summary = run_gen_traces(&gen).unwrap();

    let mut bits = Vec::new();
    for (i, solver) in [
        SolverChoice::Auto,
        SolverChoice::Dp,
        SolverChoice::BruteForce,
    ]
    .into_iter()
    .enumerate()
    {
        let mut cfg = AllocateConfig::new(
            summary.trace_dir.clone(),
            BudgetSpec::UniformBits(4),
            tmp.path().join(format!("s{i}")),
        );
        cfg.solver = solver;
        let out = run_allocate(&cfg).unwrap();
        assert!(
            out.notice.is_none(),
            "no fallback expected on the toy instance"
        );
        bits.push(out.allocation.bits);
    }
    assert_eq!(bits[0], bits[1]);
    assert_eq!(bits[1], bits[2]);
}
