//! Maximum-profit assignment of queries to clips.
//!
//! Every query takes exactly one clip and no clip serves two queries. The
//! solver is the potentials form of the Hungarian method, run on the profit
//! matrix padded to square with dummy entries well below every real profit.

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Largest `M_q x M_c` the brute-force oracle accepts.
pub const BRUTE_FORCE_MAX_QUERIES: usize = 6;
pub const BRUTE_FORCE_MAX_CLIPS: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentPlan {
    /// `columns[i]` is the clip assigned to query `i`.
    pub columns: Vec<usize>,
    pub clips: usize,
    pub total_profit: f64,
}

impl AssignmentPlan {
    fn new(pi: &Matrix, columns: Vec<usize>) -> Self {
        let total_profit = columns.iter().enumerate().map(|(i, &j)| pi[(i, j)]).sum();
        Self {
            columns,
            clips: pi.cols(),
            total_profit,
        }
    }

    /// The binary `M_q x M_c` assignment matrix.
    pub fn matrix(&self) -> Matrix {
        let mut a = Matrix::zeros(self.columns.len(), self.clips);
        for (i, &j) in self.columns.iter().enumerate() {
            a[(i, j)] = 1.0;
        }
        a
    }
}

fn validate(pi: &Matrix) -> Result<()> {
    if pi.rows() == 0 {
        return Err(Error::Empty("profit matrix".into()));
    }
    if pi.rows() > pi.cols() {
        return Err(Error::InfeasibleAssignment {
            queries: pi.rows(),
            clips: pi.cols(),
        });
    }
    if !pi.is_finite() {
        return Err(Error::NonFinite("profit matrix".into()));
    }
    Ok(())
}

pub fn solve_max_assignment(pi: &Matrix) -> Result<AssignmentPlan> {
    validate(pi)?;
    let (rows, n) = pi.shape();
    let lo = pi.as_slice().iter().copied().fold(f64::INFINITY, f64::min);
    let dummy = lo - 2.0;
    // minimise cost = -profit over the padded square matrix, 1-based as in
    // the classic formulation with column 0 as the free sentinel
    let cost = |i: usize, j: usize| if i < rows { -pi[(i, j)] } else { -dummy };
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
    let mut columns = vec![0; rows];
    for j in 1..=n {
        if owner[j] >= 1 && owner[j] <= rows {
            columns[owner[j] - 1] = j - 1;
        }
    }
    Ok(AssignmentPlan::new(pi, columns))
}

/// Exhaustive search over all injective row-to-column maps. The first plan
/// found in lexicographic column order wins ties.
pub fn brute_force_assignment(pi: &Matrix) -> Result<AssignmentPlan> {
    if pi.rows() > BRUTE_FORCE_MAX_QUERIES || pi.cols() > BRUTE_FORCE_MAX_CLIPS {
        return Err(Error::SizeGuard {
            rows: pi.rows(),
            cols: pi.cols(),
        });
    }
    validate(pi)?;
    let mut best: Option<(f64, Vec<usize>)> = None;
    let mut current = Vec::with_capacity(pi.rows());
    let mut used = vec![false; pi.cols()];
    search(pi, &mut current, &mut used, &mut best);
    let (_, columns) = best.expect("at least one injective map exists");
    Ok(AssignmentPlan::new(pi, columns))
}

fn search(
    pi: &Matrix,
    current: &mut Vec<usize>,
    used: &mut [bool],
    best: &mut Option<(f64, Vec<usize>)>,
) {
    let i = current.len();
    if i == pi.rows() {
        let total: f64 = current.iter().enumerate().map(|(r, &c)| pi[(r, c)]).sum();
        if best.as_ref().is_none_or(|(b, _)| total > *b) {
            *best = Some((total, current.clone()));
        }
        return;
    }
    for j in 0..pi.cols() {
        if !used[j] {
            used[j] = true;
            current.push(j);
            search(pi, current, used, best);
            current.pop();
            used[j] = false;
        }
    }
}
