//! Small dense linear programs, backed by `microlp`.

use microlp::{ComparisonOp, OptimizationDirection, Problem};

use crate::error::{Error, Result};

pub(crate) enum Cmp {
    Ge,
}

/// Maximizes `obj . w` subject to the given rows and `w` inside a box.
/// Returns `None` when infeasible.
pub(crate) fn maximize(
    obj: &[f64],
    constraints: &[(Vec<f64>, Cmp, f64)],
    bounds: (f64, f64),
) -> Result<Option<(Vec<f64>, f64)>> {
    let mut problem = Problem::new(OptimizationDirection::Maximize);
    let vars: Vec<_> = obj.iter().map(|&c| problem.add_var(c, bounds)).collect();
    for (row, cmp, rhs) in constraints {
        let terms: Vec<_> = row
            .iter()
            .zip(&vars)
            .filter(|(c, _)| **c != 0.0)
            .map(|(&c, &v)| (v, c))
            .collect();
        if terms.is_empty() {
            continue;
        }
        let op = match cmp {
            Cmp::Ge => ComparisonOp::Ge,
        };
        problem.add_constraint(terms.as_slice(), op, *rhs);
    }
    match problem.solve() {
        Ok(outcome) => {
            let sol = outcome
                .into_solution()
                .map_err(|_| Error::Lp("interrupted".into()))?;
            let w = vars.iter().map(|&v| sol.var_value(v)).collect();
            Ok(Some((w, sol.objective())))
        }
        Err(microlp::Error::Infeasible) => Ok(None),
        Err(e) => Err(Error::Lp(e.to_string())),
    }
}

/// Largest margin `t` with `rows . w >= t` for `w` in `[-1, 1]^d`.
/// Returns the witness and its margin.
pub(crate) fn max_margin(rows: &[Vec<f64>], d: usize) -> Result<(Vec<f64>, f64)> {
    // variables: w (d entries), t
    let mut obj = vec![0.0; d + 1];
    obj[d] = 1.0;
    let cons: Vec<_> = rows
        .iter()
        .map(|r| {
            let mut row = r.clone();
            row.push(-1.0);
            (row, Cmp::Ge, 0.0)
        })
        .collect();
    match maximize(&obj, &cons, (-1.0, 1.0))? {
        Some((mut w, t)) => {
            w.truncate(d);
            Ok((w, t))
        }
        None => Err(Error::Lp("margin program infeasible".into())),
    }
}

/// Indices of a subset of `rows` defining the same cone `{w : rows . w >= 0}`.
/// Rows are dropped one at a time when the remaining ones already imply them.
pub(crate) fn irredundant_rows(rows: &[Vec<f64>]) -> Result<Vec<usize>> {
    let mut keep: Vec<usize> = (0..rows.len()).collect();
    let mut k = 0;
    while k < keep.len() {
        let row = &rows[keep[k]];
        let scale = row.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let others: Vec<_> = keep
            .iter()
            .enumerate()
            .filter(|&(pos, _)| pos != k)
            .map(|(_, &i)| (rows[i].clone(), Cmp::Ge, 0.0))
            .collect();
        let neg: Vec<f64> = row.iter().map(|v| -v).collect();
        let redundant = match maximize(&neg, &others, (-1.0, 1.0))? {
            Some((_, v)) => v <= 1e-12 * scale.max(1.0),
            None => true,
        };
        if redundant {
            keep.remove(k);
        } else {
            k += 1;
        }
    }
    Ok(keep)
}
