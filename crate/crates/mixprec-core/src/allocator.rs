//! Budgeted bit-width assignment.
//!
//! Given per-layer importance `theta`, parameter counts, a menu of bit
//! widths, and a total size budget in bits, pick one width per layer
//! maximizing
//!
//! ```text
//! sum_i b_i * c_i      where c_i = (sum_{j >= i} theta_j) / (L - i)
//! ```
//!
//! subject to `sum_i p_i * b_i <= budget`. The suffix-averaged coefficient
//! `c_i` makes early layers answer for the importance of everything
//! downstream of them: quantization error injected early propagates.
//!
//! Layers may be pinned to a fixed width (typically the boundary layers at
//! 8); pinned layers are charged against the budget but excluded from the
//! search. Three solvers share one problem type: exhaustive enumeration
//! (the oracle, exponential), dynamic programming over the residual budget
//! (exact), and a marginal-gain greedy (fast, near-optimal). All three
//! break objective ties toward the lexicographically largest bit vector so
//! equal-quality optima are reported identically.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::exec::{map_indexed, Execution};
use crate::report::fmt6;

/// Hard cap on brute-force candidates; beyond this the solver refuses.
const BRUTE_FORCE_MAX_CANDIDATES: u128 = 10_000_000;
/// Caps for the DP table: residual budget rows and total cells.
const DP_MAX_RESIDUAL: u128 = 4_000_000;
const DP_MAX_CELLS: u128 = 50_000_000;

#[derive(Debug, Clone, PartialEq)]
pub struct AllocationProblem {
    /// Importance per layer, positive and finite.
    pub theta: Vec<f64>,
    /// Parameters per layer; a zero-parameter layer costs nothing.
    pub param_counts: Vec<u64>,
    /// Candidate widths, sorted ascending, each in 1..=32.
    pub bit_choices: Vec<u8>,
    /// Total model size allowance in bits.
    pub budget_bits: u64,
    /// Layers forced to a fixed width (need not be in `bit_choices`).
    pub pinned: BTreeMap<usize, u8>,
}

impl AllocationProblem {
    pub fn new(
        theta: Vec<f64>,
        param_counts: Vec<u64>,
        mut bit_choices: Vec<u8>,
        budget_bits: u64,
        pinned: BTreeMap<usize, u8>,
    ) -> Result<Self, AllocError> {
        if theta.is_empty() {
            return Err(AllocError::NoLayers);
        }
        if theta.len() != param_counts.len() {
            return Err(AllocError::LengthMismatch {
                theta: theta.len(),
                params: param_counts.len(),
            });
        }
        for (i, &th) in theta.iter().enumerate() {
            if !th.is_finite() || th <= 0.0 {
                return Err(AllocError::BadTheta {
                    layer: i,
                    value: th,
                });
            }
        }
        bit_choices.sort_unstable();
        bit_choices.dedup();
        if bit_choices.is_empty() {
            return Err(AllocError::EmptyBitChoices);
        }
        if bit_choices[0] == 0 || *bit_choices.last().unwrap() > 32 {
            return Err(AllocError::BadBitChoice(if bit_choices[0] == 0 {
                0
            } else {
                *bit_choices.last().unwrap()
            }));
        }
        for (&layer, &bits) in &pinned {
            if layer >= theta.len() {
                return Err(AllocError::UnknownPinnedLayer(layer));
            }
            if bits == 0 || bits > 32 {
                return Err(AllocError::BadPinnedBits { layer, bits });
            }
        }
        let problem = AllocationProblem {
            theta,
            param_counts,
            bit_choices,
            budget_bits,
            pinned,
        };
        // Eager feasibility: the all-minimum assignment must fit.
        problem.min_achievable_bits()?;
        let min = problem.min_achievable_bits().expect("checked just above");
        if min > budget_bits as u128 {
            return Err(AllocError::Infeasible {
                budget_bits,
                min_achievable_bits: min,
            });
        }
        Ok(problem)
    }

    pub fn num_layers(&self) -> usize {
        self.theta.len()
    }

    /// Size in bits of the cheapest assignment (pins at their width, free
    /// layers at the smallest choice).
    pub fn min_achievable_bits(&self) -> Result<u128, AllocError> {
        let min_b = self.bit_choices[0];
        let mut total: u128 = 0;
        for i in 0..self.num_layers() {
            let b = self.pinned.get(&i).copied().unwrap_or(min_b);
            total += layer_size(self.param_counts[i], b);
        }
        Ok(total)
    }

    fn free_layers(&self) -> Vec<usize> {
        (0..self.num_layers())
            .filter(|i| !self.pinned.contains_key(i))
            .collect()
    }

    /// Completes a full bit vector from choices for the free layers.
    fn assemble(&self, free: &[usize], choices: &[u8]) -> Vec<u8> {
        let min_b = self.bit_choices[0];
        let mut bits = vec![min_b; self.num_layers()];
        for (&layer, &b) in self.pinned.iter() {
            bits[layer] = b;
        }
        for (slot, &layer) in free.iter().enumerate() {
            bits[layer] = choices[slot];
        }
        bits
    }
}

/// The result every solver returns.
#[derive(Debug, Clone, PartialEq)]
pub struct BitAllocation {
    pub bits: Vec<u8>,
    pub objective_value: f64,
    pub used_bits: u64,
    pub solver: Solver,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Solver {
    BruteForce,
    Dp,
    Greedy,
}

impl std::fmt::Display for Solver {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Solver::BruteForce => write!(f, "brute-force"),
            Solver::Dp => write!(f, "dp"),
            Solver::Greedy => write!(f, "greedy"),
        }
    }
}

/// Size in bits of one layer at a given width.
pub fn layer_size(param_count: u64, bits: u8) -> u128 {
    param_count as u128 * bits as u128
}

/// Total size in bits of a full assignment.
pub fn total_size(param_counts: &[u64], bits: &[u8]) -> u128 {
    param_counts
        .iter()
        .zip(bits)
        .map(|(&p, &b)| layer_size(p, b))
        .sum()
}

/// Depth coefficients: `c_i` averages the importance of layer `i` and
/// everything after it.
pub fn suffix_coefficients(theta: &[f64]) -> Vec<f64> {
    let n = theta.len();
    let mut out = vec![0.0; n];
    let mut suffix = 0.0;
    for i in (0..n).rev() {
        suffix += theta[i];
        out[i] = suffix / (n - i) as f64;
    }
    out
}

/// Objective value of a full assignment.
pub fn objective(bits: &[u8], theta: &[f64]) -> Result<f64, AllocError> {
    if bits.len() != theta.len() {
        return Err(AllocError::LengthMismatch {
            theta: theta.len(),
            params: bits.len(),
        });
    }
    let coeffs = suffix_coefficients(theta);
    Ok(bits.iter().zip(&coeffs).map(|(&b, &c)| b as f64 * c).sum())
}

/// Candidate ordering: higher objective wins; ties go to the
/// lexicographically larger bit vector.
fn better(obj_a: f64, bits_a: &[u8], obj_b: f64, bits_b: &[u8]) -> bool {
    match obj_a.total_cmp(&obj_b) {
        std::cmp::Ordering::Greater => true,
        std::cmp::Ordering::Less => false,
        std::cmp::Ordering::Equal => bits_a > bits_b,
    }
}

/// Exhaustive search over every free-layer assignment. The oracle the
/// other solvers are checked against; refuses instances past
/// 10^7 candidates.
pub fn solve_brute_force(problem: &AllocationProblem) -> Result<BitAllocation, AllocError> {
    solve_brute_force_with(problem, Execution::default())
}

/// [`solve_brute_force`] with an explicit execution strategy. The parallel
/// path shards the candidate range and reduces with a total order, so the
/// result is identical to the sequential scan.
pub fn solve_brute_force_with(
    problem: &AllocationProblem,
    exec: Execution,
) -> Result<BitAllocation, AllocError> {
    let free = problem.free_layers();
    let n_choices = problem.bit_choices.len() as u128;
    let total = n_choices
        .checked_pow(free.len() as u32)
        .filter(|&t| t <= BRUTE_FORCE_MAX_CANDIDATES)
        .ok_or_else(|| AllocError::InstanceTooLarge {
            detail: format!(
                "brute force would enumerate {}^{} assignments; use solve_dp or solve_greedy",
                n_choices,
                free.len()
            ),
        })?;
    let total = total as usize;

    let coeffs = suffix_coefficients(&problem.theta);
    let evaluate = |candidate: usize| -> Option<(f64, Vec<u8>, u128)> {
        // Mixed-radix decode: digit k selects the width of free layer k.
        let mut rem = candidate;
        let mut choices = Vec::with_capacity(free.len());
        for _ in 0..free.len() {
            choices.push(problem.bit_choices[rem % problem.bit_choices.len()]);
            rem /= problem.bit_choices.len();
        }
        let bits = problem.assemble(&free, &choices);
        let used = total_size(&problem.param_counts, &bits);
        if used > problem.budget_bits as u128 {
            return None;
        }
        let obj: f64 = bits.iter().zip(&coeffs).map(|(&b, &c)| b as f64 * c).sum();
        Some((obj, bits, used))
    };

    let shards = map_indexed(total, exec, evaluate);
    let mut best: Option<(f64, Vec<u8>, u128)> = None;
    for cand in shards.into_iter().flatten() {
        best = match best {
            None => Some(cand),
            Some(cur) => {
                if better(cand.0, &cand.1, cur.0, &cur.1) {
                    Some(cand)
                } else {
                    Some(cur)
                }
            }
        };
    }
    let (obj, bits, used) = best.expect("all-minimum assignment is feasible by construction");
    Ok(BitAllocation {
        bits,
        objective_value: obj,
        used_bits: used.try_into().map_err(|_| AllocError::SizeOverflow)?,
        solver: Solver::BruteForce,
    })
}

/// Exact solver: dynamic programming over the residual budget above the
/// all-minimum assignment, with costs scaled down by their gcd.
pub fn solve_dp(problem: &AllocationProblem) -> Result<BitAllocation, AllocError> {
    let free = problem.free_layers();
    let coeffs = suffix_coefficients(&problem.theta);
    let min_b = problem.bit_choices[0];
    let base = problem.min_achievable_bits()?;
    let residual = problem.budget_bits as u128 - base;

    // Per free layer, the affordable upgrades above min_b: (cost, gain, b).
    let mut upgrades: Vec<Vec<(u128, f64, u8)>> = Vec::with_capacity(free.len());
    for &layer in &free {
        let p = problem.param_counts[layer];
        let options = problem
            .bit_choices
            .iter()
            .map(|&b| {
                let cost = layer_size(p, b) - layer_size(p, min_b);
                (cost, (b - min_b) as f64 * coeffs[layer], b)
            })
            .filter(|&(cost, _, _)| cost <= residual)
            .collect();
        upgrades.push(options);
    }

    let mut g: u128 = 0;
    for opts in &upgrades {
        for &(cost, _, _) in opts {
            g = gcd(g, cost);
        }
    }
    if g == 0 {
        g = 1;
    }
    let rows = residual / g;
    if rows > DP_MAX_RESIDUAL || (rows + 1) * free.len().max(1) as u128 > DP_MAX_CELLS {
        return Err(AllocError::InstanceTooLarge {
            detail: format!(
                "dp table would need {} residual rows over {} layers; use solve_greedy",
                rows + 1,
                free.len()
            ),
        });
    }
    let rows = rows as usize;

    // dp[r] = best extra objective achievable with residual r using free
    // layers from the current one onward; filled back to front. choice
    // stores the picked option index per (layer, residual) for
    // reconstruction. Options are scanned in descending width with strict
    // improvement, so among equal-objective choices the largest width
    // wins, which together with backward filling yields the
    // lexicographically largest optimum.
    let mut next = vec![0.0f64; rows + 1];
    let mut cur = vec![0.0f64; rows + 1];
    let mut choice = vec![0u8; free.len() * (rows + 1)];
    for slot in (0..free.len()).rev() {
        for r in 0..=rows {
            let mut best_val = f64::NEG_INFINITY;
            let mut best_opt = 0u8;
            for (opt_idx, &(cost, gain, _)) in upgrades[slot].iter().enumerate().rev() {
                let scaled = (cost / g) as usize;
                if scaled <= r {
                    let val = gain + next[r - scaled];
                    if val > best_val {
                        best_val = val;
                        best_opt = opt_idx as u8;
                    }
                }
            }
            // Every layer always has the zero-cost min_b option.
            cur[r] = best_val;
            choice[slot * (rows + 1) + r] = best_opt;
        }
        std::mem::swap(&mut next, &mut cur);
    }

    let mut r = rows;
    let mut choices = Vec::with_capacity(free.len());
    for slot in 0..free.len() {
        let opt = choice[slot * (rows + 1) + r] as usize;
        let (cost, _, b) = upgrades[slot][opt];
        choices.push(b);
        r -= (cost / g) as usize;
    }

    let bits = problem.assemble(&free, &choices);
    let used = total_size(&problem.param_counts, &bits);
    debug_assert!(used <= problem.budget_bits as u128);
    Ok(BitAllocation {
        objective_value: objective(&bits, &problem.theta)?,
        used_bits: used.try_into().map_err(|_| AllocError::SizeOverflow)?,
        bits,
        solver: Solver::Dp,
    })
}

/// Greedy solver: start everything at the minimum width, then repeatedly
/// take the affordable single-step upgrade with the best
/// coefficient-per-bit ratio. Exact when every layer costs the same and
/// the width menu has no gaps; within a few percent otherwise.
pub fn solve_greedy(problem: &AllocationProblem) -> Result<BitAllocation, AllocError> {
    let free = problem.free_layers();
    let coeffs = suffix_coefficients(&problem.theta);
    let max_b = *problem.bit_choices.last().unwrap();

    let mut choices: Vec<u8> = vec![problem.bit_choices[0]; free.len()];
    // Zero-parameter layers upgrade for free.
    for (slot, &layer) in free.iter().enumerate() {
        if problem.param_counts[layer] == 0 {
            choices[slot] = max_b;
        }
    }
    let mut used = total_size(&problem.param_counts, &problem.assemble(&free, &choices));

    loop {
        let mut pick: Option<(f64, usize, u8, u128)> = None;
        for (slot, &layer) in free.iter().enumerate() {
            let cur_idx = problem
                .bit_choices
                .iter()
                .position(|&b| b == choices[slot])
                .expect("choice comes from the menu");
            if cur_idx + 1 >= problem.bit_choices.len() {
                continue;
            }
            let next_b = problem.bit_choices[cur_idx + 1];
            let p = problem.param_counts[layer];
            let step_cost = layer_size(p, next_b) - layer_size(p, choices[slot]);
            if used + step_cost > problem.budget_bits as u128 {
                continue;
            }
            let ratio = coeffs[layer] / p as f64; // p > 0 here
            let replace = match pick {
                None => true,
                Some((best_ratio, _, _, _)) => ratio > best_ratio,
            };
            if replace {
                pick = Some((ratio, slot, next_b, step_cost));
            }
        }
        match pick {
            Some((_, slot, next_b, step_cost)) => {
                choices[slot] = next_b;
                used += step_cost;
            }
            None => break,
        }
    }

    let bits = problem.assemble(&free, &choices);
    let used = total_size(&problem.param_counts, &bits);
    Ok(BitAllocation {
        objective_value: objective(&bits, &problem.theta)?,
        used_bits: used.try_into().map_err(|_| AllocError::SizeOverflow)?,
        bits,
        solver: Solver::Greedy,
    })
}

fn gcd(a: u128, b: u128) -> u128 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Plain-text rendering of an allocation against its problem.
pub fn render_report(
    problem: &AllocationProblem,
    alloc: &BitAllocation,
    names: &[String],
) -> String {
    assert_eq!(names.len(), problem.num_layers(), "one name per layer");
    let coeffs = suffix_coefficients(&problem.theta);
    let mut out = String::new();
    out.push_str(&format!("bit allocation ({} solver)\n", alloc.solver));
    out.push_str("layer  name          params   theta        coeff        bits  size_bits\n");
    for i in 0..problem.num_layers() {
        let pin = if problem.pinned.contains_key(&i) {
            " (pinned)"
        } else {
            ""
        };
        out.push_str(&format!(
            "{:<6} {:<13} {:<8} {:<12} {:<12} {:<5} {}{}\n",
            i,
            names[i],
            problem.param_counts[i],
            fmt6(problem.theta[i]),
            fmt6(coeffs[i]),
            alloc.bits[i],
            layer_size(problem.param_counts[i], alloc.bits[i]),
            pin
        ));
    }
    out.push_str(&format!(
        "used_bits {} of budget_bits {}\nobjective {}\n",
        alloc.used_bits,
        problem.budget_bits,
        fmt6(alloc.objective_value)
    ));
    out
}

#[derive(Debug, Error)]
pub enum AllocError {
    #[error("problem needs at least one layer")]
    NoLayers,
    #[error("got {theta} importance values but {params} layer entries")]
    LengthMismatch { theta: usize, params: usize },
    #[error("importance for layer {layer} is {value}; must be positive and finite")]
    BadTheta { layer: usize, value: f64 },
    #[error("bit choice menu is empty")]
    EmptyBitChoices,
    #[error("bit choice {0} outside 1..=32")]
    BadBitChoice(u8),
    #[error("pinned layer {0} does not exist")]
    UnknownPinnedLayer(usize),
    #[error("layer {layer} pinned to {bits} bits; valid range is 1..=32")]
    BadPinnedBits { layer: usize, bits: u8 },
    #[error("budget of {budget_bits} bits is infeasible; the cheapest assignment needs {min_achievable_bits} bits")]
    Infeasible {
        budget_bits: u64,
        min_achievable_bits: u128,
    },
    #[error("instance too large: {detail}")]
    InstanceTooLarge { detail: String },
    #[error("assignment size overflows u64")]
    SizeOverflow,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn problem(theta: Vec<f64>, params: Vec<u64>, bits: Vec<u8>, budget: u64) -> AllocationProblem {
        AllocationProblem::new(theta, params, bits, budget, BTreeMap::new()).unwrap()
    }

    #[test]
    fn suffix_coefficients_average_the_tail() {
        let c = suffix_coefficients(&[3.0, 2.0, 1.0]);
        assert_eq!(c, vec![2.0, 1.5, 1.0]);
    }

    #[test]
    fn objective_single_layer() {
        // L = 1, theta = 2, b = 4: c_0 = 2, objective 8.
        assert_eq!(objective(&[4], &[2.0]).unwrap(), 8.0);
    }

    #[test]
    fn objective_two_unit_layers() {
        // theta = (1, 1): c = (1, 1); bits (2, 2) score 4.
        assert_eq!(objective(&[2, 2], &[1.0, 1.0]).unwrap(), 4.0);
    }

    #[test]
    fn brute_force_hand_checked_instance() {
        // theta (3,2,1) => c = (2, 1.5, 1). Budget 140 of 10-param layers
        // over {2,4,8} affords 14 total bits: (8,4,2) scores
        // 16 + 6 + 2 = 24, beating (8,2,4)=23, (4,8,2)=22, (2,4,8)=15,
        // (4,4,4)=18, and every other feasible triple.
        let p = problem(vec![3.0, 2.0, 1.0], vec![10, 10, 10], vec![2, 4, 8], 140);
        let a = solve_brute_force(&p).unwrap();
        assert_eq!(a.bits, vec![8, 4, 2]);
        assert_eq!(a.objective_value, 24.0);
        assert_eq!(a.used_bits, 140);
    }

    #[test]
    fn dp_and_greedy_match_brute_force_on_hand_instance() {
        let p = problem(vec![3.0, 2.0, 1.0], vec![10, 10, 10], vec![2, 4, 8], 140);
        let d = solve_dp(&p).unwrap();
        assert_eq!(d.bits, vec![8, 4, 2]);
        assert_eq!(d.objective_value, 24.0);
        let g = solve_greedy(&p).unwrap();
        assert_eq!(g.bits, vec![8, 4, 2]);
    }

    #[test]
    fn pinned_layers_are_charged_and_fixed() {
        let mut pinned = BTreeMap::new();
        pinned.insert(0usize, 8u8);
        let p = AllocationProblem::new(
            vec![1.0, 1.0, 1.0],
            vec![10, 10, 10],
            vec![2, 4],
            120,
            pinned,
        )
        .unwrap();
        for a in [
            solve_brute_force(&p).unwrap(),
            solve_dp(&p).unwrap(),
            solve_greedy(&p).unwrap(),
        ] {
            assert_eq!(a.bits[0], 8);
            assert!(a.used_bits <= 120);
        }
    }

    #[test]
    fn infeasible_budget_reports_min_achievable() {
        let err = AllocationProblem::new(
            vec![1.0, 1.0],
            vec![100, 100],
            vec![4, 8],
            700,
            BTreeMap::new(),
        )
        .unwrap_err();
        match err {
            AllocError::Infeasible {
                budget_bits: 700,
                min_achievable_bits: 800,
            } => {}
            other => panic!("expected Infeasible, got {other:?}"),
        }
    }

    #[test]
    fn zero_param_layers_get_max_bits_for_free() {
        let p = problem(vec![1.0, 1.0], vec![0, 10], vec![2, 8], 20);
        for a in [
            solve_brute_force(&p).unwrap(),
            solve_dp(&p).unwrap(),
            solve_greedy(&p).unwrap(),
        ] {
            assert_eq!(a.bits[0], 8, "{:?}", a.solver);
            assert_eq!(a.bits[1], 2);
        }
    }

    #[test]
    fn tie_break_prefers_lexicographically_larger_bits() {
        // Both layers have identical coefficients and costs; (8, 2) and
        // (2, 8) score the same, so every solver must report (8, 2).
        let p = problem(vec![1.0, 1.0], vec![10, 10], vec![2, 8], 100);
        assert_eq!(solve_brute_force(&p).unwrap().bits, vec![8, 2]);
        assert_eq!(solve_dp(&p).unwrap().bits, vec![8, 2]);
        assert_eq!(solve_greedy(&p).unwrap().bits, vec![8, 2]);
    }

    #[test]
    fn brute_force_refuses_oversized_instances() {
        let p = problem(vec![1.0; 30], vec![1; 30], vec![2, 3, 4, 5], 10_000);
        assert!(matches!(
            solve_brute_force(&p),
            Err(AllocError::InstanceTooLarge { .. })
        ));
    }

    #[test]
    fn bad_inputs_are_rejected() {
        assert!(matches!(
            AllocationProblem::new(vec![], vec![], vec![4], 10, BTreeMap::new()),
            Err(AllocError::NoLayers)
        ));
        assert!(matches!(
            AllocationProblem::new(vec![1.0], vec![1], vec![], 10, BTreeMap::new()),
            Err(AllocError::EmptyBitChoices)
        ));
        assert!(matches!(
            AllocationProblem::new(vec![-1.0], vec![1], vec![4], 10, BTreeMap::new()),
            Err(AllocError::BadTheta { layer: 0, .. })
        ));
        assert!(matches!(
            AllocationProblem::new(vec![1.0], vec![1], vec![0, 4], 10, BTreeMap::new()),
            Err(AllocError::BadBitChoice(0))
        ));
        let mut pinned = BTreeMap::new();
        pinned.insert(5usize, 8u8);
        assert!(matches!(
            AllocationProblem::new(vec![1.0], vec![1], vec![4], 100, pinned),
            Err(AllocError::UnknownPinnedLayer(5))
        ));
    }

    #[test]
    fn parallel_and_sequential_brute_force_agree() {
        let p = problem(
            vec![2.0, 1.0, 4.0, 0.5],
            vec![7, 13, 5, 11],
            vec![2, 3, 5, 8],
            250,
        );
        let seq = solve_brute_force_with(&p, Execution::Sequential).unwrap();
        let par = solve_brute_force_with(&p, Execution::Parallel).unwrap();
        assert_eq!(seq.bits, par.bits);
        assert_eq!(seq.objective_value.to_bits(), par.objective_value.to_bits());
    }
}
