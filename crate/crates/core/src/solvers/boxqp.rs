use crate::error::{Error, Result};
use crate::linalg::{cholesky, cholesky_solve, Matrix};

const MAX_ITER_FACTOR: usize = 50;

/// Exact minimizer of `½zᵀHz + gᵀz` subject to `|z_i| ≤ limit`, for SPD `H`,
/// by a primal active-set method started at `z = 0`.
pub fn solve_box_qp(h: &Matrix, g: &[f64], limit: f64) -> Result<Vec<f64>> {
    let n = g.len();
    if h.shape() != (n, n) {
        return Err(Error::dims(
            "solve_box_qp",
            format!("{n}x{n}"),
            format!("{:?}", h.shape()),
        ));
    }
    if !(limit > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "box limit must be > 0, got {limit}"
        )));
    }
    // bound[i]: 0 free, +1 at +limit, −1 at −limit
    let mut bound = vec![0i8; n];
    let mut z = vec![0.0; n];
    for _ in 0..MAX_ITER_FACTOR * (n + 1) {
        let free: Vec<usize> = (0..n).filter(|&i| bound[i] == 0).collect();
        // equality-constrained minimizer with working set fixed
        let mut target = z.clone();
        for i in 0..n {
            if bound[i] != 0 {
                target[i] = f64::from(bound[i]) * limit;
            }
        }
        if !free.is_empty() {
            let hff = Matrix::from_rows(
                &free
                    .iter()
                    .map(|&i| free.iter().map(|&j| h[(i, j)]).collect())
                    .collect::<Vec<_>>(),
            )?;
            let rhs: Vec<f64> = free
                .iter()
                .map(|&i| {
                    -(g[i]
                        + (0..n)
                            .filter(|&j| bound[j] != 0)
                            .map(|j| h[(i, j)] * target[j])
                            .sum::<f64>())
                })
                .collect();
            let l = cholesky(&hff).ok_or_else(|| {
                Error::InvalidArgument("box QP Hessian is not positive definite".into())
            })?;
            for (k, v) in cholesky_solve(&l, &rhs).into_iter().enumerate() {
                target[free[k]] = v;
            }
        }
        // largest feasible step towards the target
        let mut step = 1.0;
        let mut blocking = None;
        for &i in &free {
            let d = target[i] - z[i];
            if d > 0.0 && target[i] > limit {
                let s = (limit - z[i]) / d;
                if s < step {
                    step = s;
                    blocking = Some((i, 1i8));
                }
            } else if d < 0.0 && target[i] < -limit {
                let s = (-limit - z[i]) / d;
                if s < step {
                    step = s;
                    blocking = Some((i, -1i8));
                }
            }
        }
        for i in 0..n {
            z[i] += step * (target[i] - z[i]);
        }
        if let Some((i, side)) = blocking {
            bound[i] = side;
            z[i] = f64::from(side) * limit;
            continue;
        }
        // at the subproblem optimum: check multipliers of the working set
        let grad: Vec<f64> = (0..n)
            .map(|i| g[i] + h.row(i).iter().zip(&z).map(|(a, b)| a * b).sum::<f64>())
            .collect();
        let worst = (0..n)
            .filter(|&i| bound[i] != 0)
            .map(|i| (i, -f64::from(bound[i]) * grad[i]))
            .filter(|&(_, lam)| lam < 0.0)
            .min_by(|a, b| a.1.total_cmp(&b.1));
        match worst {
            Some((i, _)) => bound[i] = 0,
            None => return Ok(z),
        }
    }
    Err(Error::InvalidArgument(
        "box QP active-set iteration did not terminate".into(),
    ))
}
