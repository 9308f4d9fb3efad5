//! Optimal bipartite assignment (Hungarian algorithm, O(n³)).
//!
//! Rectangular matrices are padded to square with zeros; padded pairs are
//! dropped from the result. Among all optimal assignments the solver returns
//! the one whose row-sorted `(row, col)` list is lexicographically smallest:
//! every optimal assignment uses only edges that are tight under the optimal
//! dual potentials, so the tie-break runs as a greedy search over perfect
//! matchings of that tight subgraph.

use std::collections::VecDeque;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Sense {
    Minimize,
    Maximize,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AssignmentError {
    #[error("cost matrix entry ({row}, {col}) is not finite: {value}")]
    NonFinite { row: usize, col: usize, value: f64 },
    #[error("cost matrix expects {expected} values for {rows}x{cols}, got {got}")]
    Shape {
        rows: usize,
        cols: usize,
        expected: usize,
        got: usize,
    },
    #[error("thresholded assignment needs a maximize-sense similarity matrix")]
    NotMaximize,
}

/// Dense row-major cost (or similarity) matrix with an optimization sense.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
    sense: Sense,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>, sense: Sense) -> Result<Self, AssignmentError> {
        if values.len() != rows * cols {
            return Err(AssignmentError::Shape {
                rows,
                cols,
                expected: rows * cols,
                got: values.len(),
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(AssignmentError::NonFinite {
                row: i / cols,
                col: i % cols,
                value: values[i],
            });
        }
        Ok(Self {
            rows,
            cols,
            values,
            sense,
        })
    }

    pub fn from_fn(
        rows: usize,
        cols: usize,
        sense: Sense,
        mut f: impl FnMut(usize, usize) -> f64,
    ) -> Result<Self, AssignmentError> {
        let mut values = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                values.push(f(r, c));
            }
        }
        Self::new(rows, cols, values, sense)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn sense(&self) -> Sense {
        self.sense
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols + col]
    }

    /// Sum of the entries selected by `pairs`.
    pub fn total(&self, pairs: &[(usize, usize)]) -> f64 {
        pairs.iter().map(|&(r, c)| self.get(r, c)).sum()
    }
}

/// Optimal assignment of size `min(rows, cols)`, sorted by row.
pub fn solve(costs: &CostMatrix) -> Vec<(usize, usize)> {
    let n = costs.rows.max(costs.cols);
    if costs.rows == 0 || costs.cols == 0 {
        return Vec::new();
    }
    let sign = match costs.sense {
        Sense::Minimize => 1.0,
        Sense::Maximize => -1.0,
    };
    let cost = |i: usize, j: usize| -> f64 {
        if i < costs.rows && j < costs.cols {
            sign * costs.get(i, j)
        } else {
            0.0
        }
    };

    let (row_to_col, u, v) = hungarian(n, &cost);
    let scale = costs.values.iter().fold(1.0f64, |m, x| m.max(x.abs()));
    let eps = 1e-9 * scale * n as f64;
    let tight = |i: usize, j: usize| (cost(i, j) - u[i] - v[j]).abs() <= eps;
    let row_to_col = lexicographic_refine(n, row_to_col, tight);

    row_to_col
        .into_iter()
        .enumerate()
        .filter(|&(r, c)| r < costs.rows && c < costs.cols)
        .collect()
}

/// Solves the full assignment on a maximize-sense similarity matrix, then drops
/// pairs whose similarity is below `floor`. A floor of `-inf` is identical to [`solve`].
pub fn solve_thresholded(similarity: &CostMatrix, floor: f64) -> Result<Vec<(usize, usize)>, AssignmentError> {
    if similarity.sense != Sense::Maximize {
        return Err(AssignmentError::NotMaximize);
    }
    Ok(solve(similarity)
        .into_iter()
        .filter(|&(r, c)| similarity.get(r, c) >= floor)
        .collect())
}

/// Shortest augmenting path Hungarian method on a square matrix.
/// Returns the row→column assignment and the row/column potentials.
fn hungarian(n: usize, cost: &dyn Fn(usize, usize) -> f64) -> (Vec<usize>, Vec<f64>, Vec<f64>) {
    // 1-based internally; index 0 is the virtual source
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![0; n];
    for j in 1..=n {
        row_to_col[owner[j] - 1] = j - 1;
    }
    (row_to_col, u[1..].to_vec(), v[1..].to_vec())
}

/// Moves a perfect matching of the tight graph to the lexicographically
/// smallest one: row by row, take the smallest tight column that still leaves
/// a perfect matching for the remaining rows.
fn lexicographic_refine(n: usize, mut row_to_col: Vec<usize>, tight: impl Fn(usize, usize) -> bool) -> Vec<usize> {
    let mut col_owner = vec![0; n];
    for (r, &c) in row_to_col.iter().enumerate() {
        col_owner[c] = r;
    }
    let mut parent: Vec<Option<(usize, usize)>> = vec![None; n];
    let mut queue = VecDeque::new();
    for r in 0..n {
        for c in 0..row_to_col[r] {
            let displaced = col_owner[c];
            if displaced < r || !tight(r, c) {
                continue;
            }
            // alternating path from `displaced` to the column `r` gives up
            let freed = row_to_col[r];
            parent.iter_mut().for_each(|p| *p = None);
            queue.clear();
            queue.push_back(displaced);
            parent[displaced] = Some((usize::MAX, usize::MAX));
            let mut end = None;
            'bfs: while let Some(x) = queue.pop_front() {
                for y in 0..n {
                    if y == c || !tight(x, y) {
                        continue;
                    }
                    if y == freed {
                        end = Some((x, y));
                        break 'bfs;
                    }
                    let next = col_owner[y];
                    if next > r && parent[next].is_none() {
                        parent[next] = Some((x, y));
                        queue.push_back(next);
                    }
                }
            }
            if let Some((mut x, mut y)) = end {
                loop {
                    row_to_col[x] = y;
                    col_owner[y] = x;
                    match parent[x] {
                        Some((px, py)) if px != usize::MAX => {
                            x = px;
                            y = py;
                        }
                        _ => break,
                    }
                }
                row_to_col[r] = c;
                col_owner[c] = r;
                break;
            }
        }
    }
    row_to_col
}
