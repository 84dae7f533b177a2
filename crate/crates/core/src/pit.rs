//! Permutation-invariant cosine embedding loss.
//!
//! Targets (one embedding per instrument in the mixture) are matched to the
//! encoder's output slots by a minimum-cost assignment over `1 − cos`, and
//! the loss is the total cost of that assignment. Slots left unmatched carry
//! neither loss nor gradient.

use std::fmt::Write as _;

use ndarray::{Array2, ArrayView1, ArrayView2};
use thiserror::Error;

/// Norms below this are treated as zero vectors.
pub const MIN_NORM: f64 = 1e-12;
/// Largest slot count accepted by [`brute_force_assign`].
pub const BRUTE_FORCE_MAX: usize = 8;

#[derive(Debug, Error, PartialEq)]
pub enum PitError {
    #[error("vector norm below {MIN_NORM}")]
    ZeroVector,
    #[error("{targets} targets exceed {slots} output slots")]
    TooManyTargets { targets: usize, slots: usize },
    #[error("cost matrix holds a non-finite entry")]
    NonFiniteCost,
    #[error("brute force limited to {BRUTE_FORCE_MAX} slots, got {0}")]
    TooLarge(usize),
    #[error("embedding widths differ: {0} vs {1}")]
    DimensionMismatch(usize, usize),
}

fn norm(v: ArrayView1<'_, f64>) -> f64 {
    v.dot(&v).sqrt()
}

/// Cosine similarity, clamped to `[-1, 1]`.
pub fn cosine(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> Result<f64, PitError> {
    if a.len() != b.len() {
        return Err(PitError::DimensionMismatch(a.len(), b.len()));
    }
    let (na, nb) = (norm(a), norm(b));
    if na < MIN_NORM || nb < MIN_NORM {
        return Err(PitError::ZeroVector);
    }
    Ok((a.dot(&b) / (na * nb)).clamp(-1.0, 1.0))
}

/// N × M matrix of assignment costs, rows = targets, columns = output slots.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    values: Array2<f64>,
}

impl CostMatrix {
    pub fn new(values: Array2<f64>) -> Result<Self, PitError> {
        let (n, m) = values.dim();
        if n > m {
            return Err(PitError::TooManyTargets { targets: n, slots: m });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(PitError::NonFiniteCost);
        }
        Ok(CostMatrix { values })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, PitError> {
        let m = rows.first().map_or(0, Vec::len);
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        if flat.len() != rows.len() * m {
            return Err(PitError::DimensionMismatch(flat.len(), rows.len() * m));
        }
        let values = Array2::from_shape_vec((rows.len(), m), flat).expect("shape checked");
        CostMatrix::new(values)
    }

    pub fn targets(&self) -> usize {
        self.values.nrows()
    }

    pub fn slots(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn get(&self, target: usize, slot: usize) -> f64 {
        self.values[[target, slot]]
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for row in self.values.outer_iter() {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.9}")).collect();
            let _ = writeln!(s, "{}", cells.join(","));
        }
        s
    }
}

/// Injective map from targets to output slots.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Assignment {
    /// `mapping[n]` is the slot assigned to target `n`.
    pub mapping: Vec<usize>,
}

impl Assignment {
    pub fn total(&self, cost: &CostMatrix) -> f64 {
        self.mapping
            .iter()
            .enumerate()
            .map(|(n, &j)| cost.get(n, j))
            .sum()
    }

    pub fn is_injective(&self, slots: usize) -> bool {
        let mut seen = vec![false; slots];
        self.mapping.iter().all(|&j| j < slots && !std::mem::replace(&mut seen[j], true))
    }
}

/// `cost[n][j] = 1 − cos(outputs[j], targets[n])`.
pub fn cost_matrix(targets: ArrayView2<'_, f64>, outputs: ArrayView2<'_, f64>) -> Result<CostMatrix, PitError> {
    let (n, m) = (targets.nrows(), outputs.nrows());
    if n > m {
        return Err(PitError::TooManyTargets { targets: n, slots: m });
    }
    if targets.ncols() != outputs.ncols() {
        return Err(PitError::DimensionMismatch(targets.ncols(), outputs.ncols()));
    }
    let mut values = Array2::zeros((n, m));
    for (i, t) in targets.outer_iter().enumerate() {
        for (j, o) in outputs.outer_iter().enumerate() {
            values[[i, j]] = 1.0 - cosine(o, t)?;
        }
    }
    CostMatrix::new(values)
}

/// Minimum-cost assignment by the Hungarian method (shortest augmenting
/// paths with dual potentials), O(M³). The N × M matrix is padded to M × M
/// with zero-cost dummy rows.
pub fn hungarian(cost: &CostMatrix) -> Result<Assignment, PitError> {
    let (n, m) = (cost.targets(), cost.slots());
    if cost.values.iter().any(|v| !v.is_finite()) {
        return Err(PitError::NonFiniteCost);
    }
    if m == 0 {
        return Ok(Assignment { mapping: Vec::new() });
    }
    let at = |i: usize, j: usize| if i < n { cost.values[[i, j]] } else { 0.0 };

    // 1-based rows/columns; column 0 is the virtual source.
    let mut u = vec![0.0f64; m + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut row_of = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=m {
        row_of[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let reduced = at(i0 - 1, j - 1) - u[i0] - v[j];
                if reduced < minv[j] {
                    minv[j] = reduced;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut mapping = vec![0usize; n];
    for j in 1..=m {
        let i = row_of[j];
        if (1..=n).contains(&i) {
            mapping[i - 1] = j - 1;
        }
    }
    Ok(Assignment { mapping })
}

/// Exhaustive search over all injective maps, visited in lexicographic
/// order so the first optimum found is the lexicographically smallest.
pub fn brute_force_assign(cost: &CostMatrix) -> Result<Assignment, PitError> {
    let (n, m) = (cost.targets(), cost.slots());
    if m > BRUTE_FORCE_MAX {
        return Err(PitError::TooLarge(m));
    }
    struct Search<'a> {
        cost: &'a CostMatrix,
        current: Vec<usize>,
        used: Vec<bool>,
        best: Option<(f64, Vec<usize>)>,
    }
    fn visit(s: &mut Search<'_>, partial: f64) {
        let n = s.current.len();
        if n == s.cost.targets() {
            if s.best.as_ref().map_or(true, |(b, _)| partial < *b) {
                s.best = Some((partial, s.current.clone()));
            }
            return;
        }
        for j in 0..s.cost.slots() {
            if s.used[j] {
                continue;
            }
            s.used[j] = true;
            s.current.push(j);
            visit(s, partial + s.cost.get(n, j));
            s.current.pop();
            s.used[j] = false;
        }
    }
    let mut search = Search {
        cost,
        current: Vec::with_capacity(n),
        used: vec![false; m],
        best: None,
    };
    visit(&mut search, 0.0);
    let (_, mapping) = search.best.expect("n <= m admits an injective map");
    Ok(Assignment { mapping })
}

#[derive(Clone, Debug, PartialEq)]
pub struct PitLossResult {
    pub loss: f64,
    pub assignment: Assignment,
    /// Gradient of the loss with respect to every output row (M × D).
    pub grads: Array2<f64>,
    pub cost: CostMatrix,
}

/// `min_π Σ_n (1 − cos(outputs[π(n)], targets[n]))` and its gradient with
/// respect to the outputs.
pub fn pit_loss(targets: ArrayView2<'_, f64>, outputs: ArrayView2<'_, f64>) -> Result<PitLossResult, PitError> {
    let cost = cost_matrix(targets, outputs)?;
    let assignment = hungarian(&cost)?;
    let loss = assignment.total(&cost);
    let mut grads = Array2::zeros(outputs.raw_dim());
    for (n, &j) in assignment.mapping.iter().enumerate() {
        let o = outputs.row(j);
        let t = targets.row(n);
        let (no, nt) = (norm(o), norm(t));
        let cos = o.dot(&t) / (no * nt);
        // d(1 - cos)/do = -(t / (|o||t|) - cos · o / |o|²)
        let mut g = grads.row_mut(j);
        g.zip_mut_with(&o, |g, &ov| *g += cos * ov / (no * no));
        g.zip_mut_with(&t, |g, &tv| *g -= tv / (no * nt));
    }
    Ok(PitLossResult {
        loss,
        assignment,
        grads,
        cost,
    })
}
