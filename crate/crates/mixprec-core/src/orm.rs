//! Orthogonality measurement between layer activations.
//!
//! For activation matrices `a` (n x d_i) and `b` (n x d_j) taken at the
//! same timestep, the metric is
//!
//! ```text
//! orm(a, b) = ||a^T b||_F^2 / (||a^T a||_F * ||b^T b||_F)
//! ```
//!
//! 0 means the two layers' responses are orthogonal (neither can stand in
//! for the other), 1 means fully linearly dependent. The value is invariant
//! to per-matrix scaling and to right-multiplication by an orthogonal
//! matrix.
//!
//! Two algebraically identical evaluation routes exist. The feature route
//! forms `d_i x d_j` cross-products; the sample route never leaves sample
//! space, using `||a^T b||_F^2 = <a a^T, b b^T>_F` on `n x n` Gram
//! matrices. [`orm_pair`] picks whichever is cheaper for the shapes at
//! hand; both stay public so they can be checked against each other.
//!
//! Every reduction here runs over a fixed index order, so results do not
//! depend on how pairs are scheduled across threads.

use std::fmt;

use ndarray::Array2;

use crate::exec::{map_indexed, Execution};
use crate::report::fmt6;
use crate::trace::ActivationTrace;

/// Self-products with Frobenius norm below this are degenerate: the metric
/// would divide by (numerical) zero.
pub const ZERO_DENOM_THRESHOLD: f64 = 1e-30;

/// Values may exceed [0, 1] by at most this much before clamping.
const RANGE_TOLERANCE: f64 = 1e-9;

/// `||a^T b||_F^2`, accumulated per-sample in fixed row-major order.
fn cross_frob_sq(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let (n, di) = a.dim();
    let dj = b.ncols();
    let mut m = vec![0.0f64; di * dj];
    for k in 0..n {
        let ar = a.row(k);
        let ar = ar.as_slice().expect("row of standard-layout array");
        let br = b.row(k);
        let br = br.as_slice().expect("row of standard-layout array");
        for (p, &ap) in ar.iter().enumerate() {
            let row = &mut m[p * dj..(p + 1) * dj];
            for (cell, &bq) in row.iter_mut().zip(br) {
                *cell += ap * bq;
            }
        }
    }
    m.iter().map(|v| v * v).sum()
}

/// `a a^T`, the n x n Gram matrix of sample dot products.
fn gram(a: &Array2<f64>) -> Array2<f64> {
    let n = a.nrows();
    let mut g = Array2::zeros((n, n));
    for k in 0..n {
        let rk = a.row(k);
        let rk = rk.as_slice().expect("row of standard-layout array");
        for l in k..n {
            let rl = a.row(l);
            let rl = rl.as_slice().expect("row of standard-layout array");
            let dot: f64 = rk.iter().zip(rl).map(|(x, y)| x * y).sum();
            g[[k, l]] = dot;
            g[[l, k]] = dot;
        }
    }
    g
}

/// Frobenius inner product, fixed row-major order.
fn frob_inner(x: &Array2<f64>, y: &Array2<f64>) -> f64 {
    x.iter().zip(y.iter()).map(|(a, b)| a * b).sum()
}

/// Pair-level failure; the trace-level API re-wraps this with context.
enum PairError {
    RowMismatch { left: usize, right: usize },
    ZeroLeft,
    ZeroRight,
}

fn check_rows(a: &Array2<f64>, b: &Array2<f64>) -> Result<(), PairError> {
    if a.nrows() != b.nrows() {
        return Err(PairError::RowMismatch {
            left: a.nrows(),
            right: b.nrows(),
        });
    }
    Ok(())
}

fn pair_feature_raw(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64, PairError> {
    check_rows(a, b)?;
    let da = cross_frob_sq(a, a).sqrt();
    if da < ZERO_DENOM_THRESHOLD {
        return Err(PairError::ZeroLeft);
    }
    let db = cross_frob_sq(b, b).sqrt();
    if db < ZERO_DENOM_THRESHOLD {
        return Err(PairError::ZeroRight);
    }
    Ok(cross_frob_sq(a, b) / (da * db))
}

fn pair_sample_raw(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64, PairError> {
    check_rows(a, b)?;
    let ga = gram(a);
    let gb = gram(b);
    let da = frob_inner(&ga, &ga).sqrt();
    if da < ZERO_DENOM_THRESHOLD {
        return Err(PairError::ZeroLeft);
    }
    let db = frob_inner(&gb, &gb).sqrt();
    if db < ZERO_DENOM_THRESHOLD {
        return Err(PairError::ZeroRight);
    }
    Ok(frob_inner(&ga, &gb) / (da * db))
}

fn pair_raw(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64, PairError> {
    // The feature route costs O(n * d_i * d_j), the sample route
    // O(n^2 * (d_i + d_j)); crossing point is n against the smaller width.
    if a.nrows() < a.ncols().min(b.ncols()) {
        pair_sample_raw(a, b)
    } else {
        pair_feature_raw(a, b)
    }
}

fn clamp_checked(value: f64) -> Result<f64, f64> {
    if !(-RANGE_TOLERANCE..=1.0 + RANGE_TOLERANCE).contains(&value) {
        return Err(value);
    }
    Ok(value.clamp(0.0, 1.0))
}

fn from_pair_error(e: PairError) -> OrmError {
    match e {
        PairError::RowMismatch { left, right } => OrmError::RowMismatch { left, right },
        PairError::ZeroLeft | PairError::ZeroRight => OrmError::ZeroActivation {
            timestep: None,
            layer: None,
        },
    }
}

/// Orthogonality of two activation matrices, clamped to [0, 1]. Picks the
/// cheaper evaluation route from the shapes.
pub fn orm_pair(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64, OrmError> {
    let raw = pair_raw(a, b).map_err(from_pair_error)?;
    clamp_checked(raw).map_err(|value| OrmError::OutOfRange {
        value,
        timestep: None,
        layer_i: None,
        layer_j: None,
    })
}

/// Feature-route evaluation, unclamped. Exposed for cross-checking.
pub fn orm_pair_feature(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64, OrmError> {
    pair_feature_raw(a, b).map_err(from_pair_error)
}

/// Sample-route (Gram) evaluation, unclamped. Exposed for cross-checking.
pub fn orm_pair_sample(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64, OrmError> {
    pair_sample_raw(a, b).map_err(from_pair_error)
}

/// Symmetric L x L orthogonality matrix for one timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct OrmMatrix {
    timestep: usize,
    values: Array2<f64>,
}

impl OrmMatrix {
    /// Wraps a precomputed matrix, checking the structural invariants:
    /// square, symmetric, unit diagonal, entries in [0, 1].
    pub fn new(timestep: usize, values: Array2<f64>) -> Result<Self, OrmError> {
        let (r, c) = values.dim();
        if r != c || r == 0 {
            return Err(OrmError::NotSquare { rows: r, cols: c });
        }
        for i in 0..r {
            for j in 0..r {
                let v = values[[i, j]];
                if i == j && v != 1.0 {
                    return Err(OrmError::BadDiagonal { layer: i, value: v });
                }
                if !(0.0..=1.0).contains(&v) {
                    return Err(OrmError::OutOfRange {
                        value: v,
                        timestep: Some(timestep),
                        layer_i: Some(i),
                        layer_j: Some(j),
                    });
                }
                if values[[j, i]] != v {
                    return Err(OrmError::NotSymmetric { i, j });
                }
            }
        }
        Ok(OrmMatrix { timestep, values })
    }

    /// Original timestep label this matrix was measured at.
    pub fn timestep(&self) -> usize {
        self.timestep
    }

    pub fn dim(&self) -> usize {
        self.values.nrows()
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[[i, j]]
    }
}

/// One orthogonality matrix per traced timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct OrmStack {
    matrices: Vec<OrmMatrix>,
}

impl OrmStack {
    /// Wraps matrices measured at distinct timesteps. [`orm_stack`] always
    /// produces ascending timestep order; hand-built stacks may use any
    /// order (aggregation does not depend on it).
    pub fn new(matrices: Vec<OrmMatrix>) -> Result<Self, OrmError> {
        if matrices.is_empty() {
            return Err(OrmError::EmptyStack);
        }
        let dim = matrices[0].dim();
        let mut seen = std::collections::BTreeSet::new();
        for m in &matrices {
            if m.dim() != dim {
                return Err(OrmError::MixedDims {
                    expected: dim,
                    found: m.dim(),
                });
            }
            if !seen.insert(m.timestep()) {
                return Err(OrmError::DuplicateTimestep(m.timestep()));
            }
        }
        Ok(OrmStack { matrices })
    }

    pub fn matrices(&self) -> &[OrmMatrix] {
        &self.matrices
    }

    pub fn len(&self) -> usize {
        self.matrices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matrices.is_empty()
    }

    /// Number of layers (side length of each matrix).
    pub fn dim(&self) -> usize {
        self.matrices[0].dim()
    }

    pub fn timestep_indices(&self) -> Vec<usize> {
        self.matrices.iter().map(|m| m.timestep()).collect()
    }

    /// Keeps only the matrices at the given timestep labels (stack order
    /// preserved). Errors on a label the stack does not hold. The result
    /// equals recomputing the stack from a trace restricted to `labels`,
    /// since each matrix depends only on its own timestep's activations.
    pub fn restrict(&self, labels: &[usize]) -> Result<OrmStack, OrmError> {
        let mut keep: Vec<usize> = Vec::with_capacity(labels.len());
        for &label in labels {
            let pos = self
                .matrices
                .iter()
                .position(|m| m.timestep() == label)
                .ok_or(OrmError::UnknownTimestep(label))?;
            keep.push(pos);
        }
        keep.sort_unstable();
        keep.dedup();
        OrmStack::new(keep.into_iter().map(|p| self.matrices[p].clone()).collect())
    }

    /// Plain-text rendering: one labeled matrix block per timestep.
    pub fn render_report(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "orthogonality matrices: {} timesteps, {} layers\n",
            self.len(),
            self.dim()
        ));
        for m in &self.matrices {
            out.push_str(&format!("\ntimestep {}\n", m.timestep()));
            for i in 0..m.dim() {
                let row: Vec<String> = (0..m.dim()).map(|j| fmt6(m.get(i, j))).collect();
                out.push_str(&row.join(" "));
                out.push('\n');
            }
        }
        out
    }
}

/// Work shared by every pair at one timestep position: per-layer
/// denominators, plus Gram matrices for the layers whose pairs may take
/// the sample route.
struct LayerProducts {
    denom: Vec<f64>,
    grams: Vec<Option<Array2<f64>>>,
}

fn layer_products(
    trace: &ActivationTrace,
    pos: usize,
    t: usize,
) -> Result<LayerProducts, OrmError> {
    let dims = trace.num_layers();
    let n = trace.manifest().num_samples;
    let mut denom = Vec::with_capacity(dims);
    let mut grams = Vec::with_capacity(dims);
    for i in 0..dims {
        let a = trace.tensor_at(pos, i);
        // The route choice below must mirror pair_raw: a pair goes through
        // Gram matrices exactly when n < min(d_i, d_j), which implies
        // n < d_i for both members, so caching grams for those layers
        // suffices. Denominators likewise follow each layer's own route so
        // a pair's three reductions stay consistent with orm_pair.
        if n < a.ncols() {
            let g = gram(a);
            let d = frob_inner(&g, &g).sqrt();
            denom.push(d);
            grams.push(Some(g));
        } else {
            denom.push(cross_frob_sq(a, a).sqrt());
            grams.push(None);
        }
        if denom[i] < ZERO_DENOM_THRESHOLD {
            return Err(OrmError::ZeroActivation {
                timestep: Some(t),
                layer: Some(i),
            });
        }
    }
    Ok(LayerProducts { denom, grams })
}

fn matrix_at(
    trace: &ActivationTrace,
    pos: usize,
    t: usize,
    exec: Execution,
) -> Result<OrmMatrix, OrmError> {
    let dims = trace.num_layers();
    let n = trace.manifest().num_samples;
    let products = layer_products(trace, pos, t)?;

    let pairs: Vec<(usize, usize)> = (0..dims)
        .flat_map(|i| (i + 1..dims).map(move |j| (i, j)))
        .collect();
    let computed = map_indexed(pairs.len(), exec, |idx| {
        let (i, j) = pairs[idx];
        let a = trace.tensor_at(pos, i);
        let b = trace.tensor_at(pos, j);
        let num = if n < a.ncols().min(b.ncols()) {
            let ga = products.grams[i].as_ref().expect("gram cached: n < d_i");
            let gb = products.grams[j].as_ref().expect("gram cached: n < d_j");
            frob_inner(ga, gb)
        } else {
            cross_frob_sq(a, b)
        };
        let raw = num / (products.denom[i] * products.denom[j]);
        clamp_checked(raw).map_err(|value| OrmError::OutOfRange {
            value,
            timestep: Some(t),
            layer_i: Some(i),
            layer_j: Some(j),
        })
    });

    let mut values = Array2::zeros((dims, dims));
    for i in 0..dims {
        values[[i, i]] = 1.0;
    }
    for (idx, result) in computed.into_iter().enumerate() {
        let (i, j) = pairs[idx];
        let v = result?;
        values[[i, j]] = v;
        values[[j, i]] = v;
    }
    Ok(OrmMatrix {
        timestep: t,
        values,
    })
}

/// Orthogonality matrix for one traced timestep label.
pub fn orm_matrix(trace: &ActivationTrace, t: usize) -> Result<OrmMatrix, OrmError> {
    let pos = trace
        .timestep_indices()
        .iter()
        .position(|&label| label == t)
        .ok_or(OrmError::UnknownTimestep(t))?;
    matrix_at(trace, pos, t, Execution::default())
}

/// Orthogonality matrices for every traced timestep, ascending.
pub fn orm_stack(trace: &ActivationTrace) -> Result<OrmStack, OrmError> {
    orm_stack_with(trace, Execution::default())
}

/// [`orm_stack`] with an explicit execution strategy. Results are
/// bit-identical across strategies.
pub fn orm_stack_with(trace: &ActivationTrace, exec: Execution) -> Result<OrmStack, OrmError> {
    let labels = trace.timestep_indices().to_vec();
    let results = map_indexed(labels.len(), exec, |pos| {
        // Pairs within each timestep run sequentially here; the outer
        // timestep loop is the parallel axis. Matrix work is itself
        // sequential per timestep, which keeps per-value reductions in
        // one task either way.
        matrix_at(trace, pos, labels[pos], Execution::Sequential)
    });
    let mut matrices = Vec::with_capacity(results.len());
    for r in results {
        matrices.push(r?);
    }
    OrmStack::new(matrices)
}

#[derive(Debug)]
pub enum OrmError {
    /// A layer's activations have (numerically) vanishing self-product, so
    /// the metric is undefined for any pair containing it.
    ZeroActivation {
        timestep: Option<usize>,
        layer: Option<usize>,
    },
    RowMismatch {
        left: usize,
        right: usize,
    },
    /// A computed value fell outside [0, 1] by more than the tolerance;
    /// this indicates broken input rather than roundoff.
    OutOfRange {
        value: f64,
        timestep: Option<usize>,
        layer_i: Option<usize>,
        layer_j: Option<usize>,
    },
    UnknownTimestep(usize),
    EmptyStack,
    NotSquare {
        rows: usize,
        cols: usize,
    },
    NotSymmetric {
        i: usize,
        j: usize,
    },
    BadDiagonal {
        layer: usize,
        value: f64,
    },
    MixedDims {
        expected: usize,
        found: usize,
    },
    DuplicateTimestep(usize),
}

impl fmt::Display for OrmError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OrmError::ZeroActivation { timestep, layer } => {
                write!(f, "zero activation: self-product norm below threshold")?;
                if let Some(t) = timestep {
                    write!(f, " at timestep {t}")?;
                }
                if let Some(i) = layer {
                    write!(f, ", layer {i}")?;
                }
                Ok(())
            }
            OrmError::RowMismatch { left, right } => {
                write!(f, "sample count mismatch: {left} rows vs {right} rows")
            }
            OrmError::OutOfRange {
                value,
                timestep,
                layer_i,
                layer_j,
            } => {
                write!(f, "orthogonality value {value} outside [0, 1] tolerance")?;
                if let Some(t) = timestep {
                    write!(f, " at timestep {t}")?;
                }
                if let (Some(i), Some(j)) = (layer_i, layer_j) {
                    write!(f, ", layers ({i}, {j})")?;
                }
                Ok(())
            }
            OrmError::UnknownTimestep(t) => write!(f, "timestep {t} is not in the trace"),
            OrmError::EmptyStack => write!(f, "stack needs at least one matrix"),
            OrmError::NotSquare { rows, cols } => {
                write!(f, "matrix must be square and nonempty, got {rows}x{cols}")
            }
            OrmError::NotSymmetric { i, j } => {
                write!(f, "matrix not symmetric at ({i}, {j})")
            }
            OrmError::BadDiagonal { layer, value } => {
                write!(f, "diagonal entry for layer {layer} is {value}, expected 1")
            }
            OrmError::MixedDims { expected, found } => {
                write!(f, "stack mixes {expected}- and {found}-layer matrices")
            }
            OrmError::DuplicateTimestep(t) => {
                write!(f, "stack lists timestep {t} twice")
            }
        }
    }
}

impl std::error::Error for OrmError {}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    // Identity columns against the all-ones column: cross products are
    // [[1], [1]], self products I and [[2]], so the value is
    // (1^2 + 1^2) / (sqrt(2) * 2) = 1/sqrt(2).
    const IDENTITY_VS_ONES: f64 = 0.7071067811865475;

    #[test]
    fn identity_vs_ones_matches_hand_expansion() {
        let a = arr2(&[[1.0, 0.0], [0.0, 1.0]]);
        let b = arr2(&[[1.0], [1.0]]);
        for v in [
            orm_pair(&a, &b).unwrap(),
            orm_pair_feature(&a, &b).unwrap(),
            orm_pair_sample(&a, &b).unwrap(),
        ] {
            assert!((v - IDENTITY_VS_ONES).abs() < 1e-15, "got {v}");
        }
    }

    #[test]
    fn self_pair_is_one() {
        let a = arr2(&[[0.3, -1.2, 0.7], [2.0, 0.1, -0.4]]);
        let v = orm_pair(&a, &a).unwrap();
        assert!((v - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn orthogonal_responses_give_zero() {
        // Disjoint supports: a lives on sample 0, b on sample 1.
        let a = arr2(&[[1.0, 2.0], [0.0, 0.0]]);
        let b = arr2(&[[0.0], [3.0]]);
        assert_eq!(orm_pair(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn routes_agree_on_tall_and_wide_inputs() {
        let a = arr2(&[
            [0.5, -0.2, 1.1, 0.0, 0.3],
            [1.0, 0.4, -0.7, 0.2, -0.1],
            [-0.3, 0.9, 0.05, -1.2, 0.6],
        ]);
        let b = arr2(&[[0.2, -1.0], [0.8, 0.3], [-0.5, 0.7]]);
        let f = orm_pair_feature(&a, &b).unwrap();
        let s = orm_pair_sample(&a, &b).unwrap();
        assert!(
            (f - s).abs() / f.max(1e-30) < 1e-8,
            "feature {f} sample {s}"
        );
    }

    #[test]
    fn zero_activation_is_rejected() {
        let a = Array2::zeros((2, 2));
        let b = arr2(&[[1.0], [2.0]]);
        assert!(matches!(
            orm_pair(&a, &b),
            Err(OrmError::ZeroActivation { .. })
        ));
    }

    #[test]
    fn row_mismatch_is_rejected() {
        let a = Array2::from_elem((2, 2), 1.0);
        let b = Array2::from_elem((3, 2), 1.0);
        assert!(matches!(
            orm_pair(&a, &b),
            Err(OrmError::RowMismatch { left: 2, right: 3 })
        ));
    }

    #[test]
    fn matrix_constructor_enforces_invariants() {
        let ok = arr2(&[[1.0, 0.5], [0.5, 1.0]]);
        assert!(OrmMatrix::new(3, ok).is_ok());

        let asym = arr2(&[[1.0, 0.5], [0.4, 1.0]]);
        assert!(matches!(
            OrmMatrix::new(0, asym),
            Err(OrmError::NotSymmetric { .. })
        ));

        let diag = arr2(&[[0.9, 0.5], [0.5, 1.0]]);
        assert!(matches!(
            OrmMatrix::new(0, diag),
            Err(OrmError::BadDiagonal { layer: 0, .. })
        ));

        let range = arr2(&[[1.0, 1.5], [1.5, 1.0]]);
        assert!(matches!(
            OrmMatrix::new(0, range),
            Err(OrmError::OutOfRange { .. })
        ));
    }

    #[test]
    fn stack_rejects_duplicates_and_mixed_dims() {
        let m = |t: usize| OrmMatrix::new(t, arr2(&[[1.0, 0.2], [0.2, 1.0]])).unwrap();
        assert!(OrmStack::new(vec![]).is_err());
        assert!(matches!(
            OrmStack::new(vec![m(1), m(1)]),
            Err(OrmError::DuplicateTimestep(1))
        ));
        let big = OrmMatrix::new(2, Array2::eye(3)).unwrap();
        assert!(matches!(
            OrmStack::new(vec![m(1), big]),
            Err(OrmError::MixedDims { .. })
        ));
    }

    #[test]
    fn unknown_timestep_is_reported() {
        use crate::trace::{ActivationTrace, Dtype, LayerMeta, TraceManifest};
        use std::collections::BTreeMap;

        let manifest = TraceManifest {
            model_name: "toy".into(),
            num_layers: 1,
            num_timesteps: 4,
            num_samples: 2,
            dtype: Dtype::F64,
            seed: None,
            timestep_indices: vec![0, 2],
            layers: vec![LayerMeta {
                layer_id: 0,
                name: "l".into(),
                param_count: 1,
                feature_dim: 1,
                pinned_bits: None,
            }],
        };
        let mut map = BTreeMap::new();
        map.insert((0usize, 0usize), arr2(&[[1.0], [2.0]]));
        map.insert((2usize, 0usize), arr2(&[[3.0], [4.0]]));
        let trace = ActivationTrace::from_map(manifest, map).unwrap();
        assert!(orm_matrix(&trace, 2).is_ok());
        assert!(matches!(
            orm_matrix(&trace, 1),
            Err(OrmError::UnknownTimestep(1))
        ));
    }
}
