//! Collapses per-timestep orthogonality into one score per layer.
//!
//! For each layer `i` and timestep `t`, `gamma[i][t]` sums that layer's
//! orthogonality against every other layer; large gamma means the layer's
//! response is widely substitutable at that timestep. The gamma rows are
//! z-scored per layer so timesteps compete on relative, not absolute,
//! terms, turned into weights `w = exp(-z)` favoring the timesteps where
//! the layer is most distinctive, and folded into
//!
//! ```text
//! rho_i = (gamma_i . w_i) / ||w_i||      (norm depends on the mode)
//! theta_i = exp(-(rho_i - min_k rho_k))
//! ```
//!
//! `theta` is the importance coefficient the allocator consumes: close to
//! 1 for layers whose information nothing else carries, small for layers
//! that stay redundant across the trajectory. Subtracting the minimum
//! before exponentiating keeps the values in a safe floating-point range
//! and provably never reorders them.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;

use crate::orm::OrmStack;
use crate::report::fmt6;

/// Weight normalization used for `rho`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RhoMode {
    /// Divide by the L2 norm of the weights.
    #[default]
    Paper,
    /// Divide by the weight sum, making `rho` a weighted mean of gamma.
    Mean,
}

impl fmt::Display for RhoMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RhoMode::Paper => write!(f, "paper"),
            RhoMode::Mean => write!(f, "mean"),
        }
    }
}

impl FromStr for RhoMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "paper" => Ok(RhoMode::Paper),
            "mean" => Ok(RhoMode::Mean),
            other => Err(format!(
                "unknown rho mode {other:?} (expected paper or mean)"
            )),
        }
    }
}

/// Full output of the aggregation, kept per stage for reporting.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceScores {
    /// L x T_s: per-layer, per-timestep summed orthogonality.
    pub gamma: Array2<f64>,
    /// Per-layer weighted fold of gamma over timesteps.
    pub rho: Vec<f64>,
    /// Importance coefficients, `exp(-(rho - min rho))`, in (0, 1].
    pub theta: Vec<f64>,
    pub mode: RhoMode,
    /// Timestep labels for gamma's columns, in stack order.
    pub timestep_indices: Vec<usize>,
}

impl ImportanceScores {
    pub fn num_layers(&self) -> usize {
        self.theta.len()
    }

    /// Plain-text rendering: per layer, the gamma row and both scores.
    /// `names` must have one entry per layer.
    pub fn render_report(&self, names: &[String]) -> String {
        assert_eq!(names.len(), self.num_layers(), "one name per layer");
        let mut out = String::new();
        out.push_str(&format!(
            "importance scores: {} layers, {} timesteps, mode {}\n",
            self.num_layers(),
            self.timestep_indices.len(),
            self.mode
        ));
        let labels: Vec<String> = self
            .timestep_indices
            .iter()
            .map(|t| t.to_string())
            .collect();
        out.push_str(&format!("timesteps: {}\n", labels.join(" ")));
        for (i, name) in names.iter().enumerate() {
            let row: Vec<String> = self.gamma.row(i).iter().map(|&g| fmt6(g)).collect();
            out.push_str(&format!(
                "layer {i} {name}: gamma {} rho {} theta {}\n",
                row.join(" "),
                fmt6(self.rho[i]),
                fmt6(self.theta[i])
            ));
        }
        out
    }
}

/// L x T_s matrix of summed off-diagonal orthogonality: row `i`, column
/// `t` is the sum of `k[i][j]` over `j != i` at the stack's `t`-th
/// timestep. Entries land in [0, L-1] because each addend is in [0, 1].
pub fn gamma_rows(stack: &OrmStack) -> Array2<f64> {
    let dims = stack.dim();
    let mut gamma = Array2::zeros((dims, stack.len()));
    for (col, m) in stack.matrices().iter().enumerate() {
        for i in 0..dims {
            let mut sum = 0.0;
            for j in 0..dims {
                if j != i {
                    sum += m.get(i, j);
                }
            }
            gamma[[i, col]] = sum;
        }
    }
    gamma
}

/// Population z-score of one row. Degenerate rows (a single timestep, or
/// standard deviation below 1e-12) map to all zeros so every timestep gets
/// equal weight downstream.
pub fn zscore(row: &[f64]) -> Vec<f64> {
    let n = row.len();
    if n <= 1 {
        return vec![0.0; n];
    }
    let mean = row.iter().sum::<f64>() / n as f64;
    let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
    let sd = var.sqrt();
    if sd < 1e-12 {
        return vec![0.0; n];
    }
    row.iter().map(|&x| (x - mean) / sd).collect()
}

/// Runs the full aggregation over a stack.
pub fn aggregate(stack: &OrmStack, mode: RhoMode) -> ImportanceScores {
    let gamma = gamma_rows(stack);
    let dims = stack.dim();
    let mut rho = Vec::with_capacity(dims);
    for i in 0..dims {
        let row: Vec<f64> = gamma.row(i).iter().copied().collect();
        let z = zscore(&row);
        let w: Vec<f64> = z.iter().map(|&v| (-v).exp()).collect();
        let dot: f64 = row.iter().zip(&w).map(|(g, wv)| g * wv).sum();
        let norm = match mode {
            RhoMode::Paper => w.iter().map(|&v| v * v).sum::<f64>().sqrt(),
            RhoMode::Mean => w.iter().sum::<f64>(),
        };
        rho.push(dot / norm);
    }
    let min_rho = rho.iter().copied().fold(f64::INFINITY, f64::min);
    let theta: Vec<f64> = rho.iter().map(|&r| (-(r - min_rho)).exp()).collect();
    ImportanceScores {
        gamma,
        rho,
        theta,
        mode,
        timestep_indices: stack.timestep_indices(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::orm::OrmMatrix;
    use ndarray::arr2;

    fn stack_of(mats: Vec<(usize, Array2<f64>)>) -> OrmStack {
        OrmStack::new(
            mats.into_iter()
                .map(|(t, v)| OrmMatrix::new(t, v).unwrap())
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn zscore_of_one_two_three() {
        let z = zscore(&[1.0, 2.0, 3.0]);
        let r = 1.5f64.sqrt(); // population sd of {1,2,3} is sqrt(2/3)
        assert!((z[0] + r).abs() < 1e-15);
        assert_eq!(z[1], 0.0);
        assert!((z[2] - r).abs() < 1e-15);
    }

    #[test]
    fn zscore_degenerate_rows_are_zero() {
        assert_eq!(zscore(&[5.0]), vec![0.0]);
        assert_eq!(zscore(&[2.0, 2.0, 2.0]), vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn gamma_sums_off_diagonal() {
        let m = arr2(&[[1.0, 0.25, 0.5], [0.25, 1.0, 0.125], [0.5, 0.125, 1.0]]);
        let stack = stack_of(vec![(0, m)]);
        let g = gamma_rows(&stack);
        assert_eq!(g[[0, 0]], 0.75);
        assert_eq!(g[[1, 0]], 0.375);
        assert_eq!(g[[2, 0]], 0.625);
    }

    #[test]
    fn single_timestep_rho_equals_gamma_exactly() {
        let m = arr2(&[[1.0, 0.25, 0.5], [0.25, 1.0, 0.125], [0.5, 0.125, 1.0]]);
        let stack = stack_of(vec![(0, m)]);
        for mode in [RhoMode::Paper, RhoMode::Mean] {
            let s = aggregate(&stack, mode);
            // z = 0 and w = 1 exactly, so no roundoff enters.
            assert_eq!(s.rho, vec![0.75, 0.375, 0.625]);
            assert_eq!(s.theta[1], 1.0);
            assert!((s.theta[0] - (-(0.75f64 - 0.375)).exp()).abs() < 1e-15);
        }
    }

    #[test]
    fn constant_gamma_rows_hit_closed_form() {
        // Same matrix at every timestep: each layer's gamma row is
        // constant, z-scoring degenerates to zeros, and rho collapses to
        // sqrt(T) * gamma (paper) or gamma (mean).
        let m = arr2(&[[1.0, 0.3, 0.6], [0.3, 1.0, 0.2], [0.6, 0.2, 1.0]]);
        let t_s = 4usize;
        let stack = stack_of((0..t_s).map(|t| (t, m.clone())).collect());
        let g = [0.9, 0.5, 0.8];

        let paper = aggregate(&stack, RhoMode::Paper);
        for (rho, g) in paper.rho.iter().zip(&g) {
            let expect = (t_s as f64).sqrt() * g;
            assert!((rho - expect).abs() < 1e-10);
        }
        let mean = aggregate(&stack, RhoMode::Mean);
        for (rho, g) in mean.rho.iter().zip(&g) {
            assert!((rho - g).abs() < 1e-10);
        }
    }

    #[test]
    fn theta_is_positive_and_peaks_at_min_rho() {
        let a = arr2(&[[1.0, 0.9], [0.9, 1.0]]);
        let b = arr2(&[[1.0, 0.1], [0.1, 1.0]]);
        let stack = stack_of(vec![(0, a), (5, b)]);
        let s = aggregate(&stack, RhoMode::Paper);
        assert_eq!(s.timestep_indices, vec![0, 5]);
        let min_i = (0..2)
            .min_by(|&x, &y| s.rho[x].total_cmp(&s.rho[y]))
            .unwrap();
        assert_eq!(s.theta[min_i], 1.0);
        for &th in &s.theta {
            assert!(th > 0.0 && th <= 1.0);
        }
    }
}
