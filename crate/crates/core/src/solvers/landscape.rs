use super::lower::{solve_lower, LowerConfig};
use super::upper::OptimTrace;
use crate::error::{Error, Result};
use crate::linalg::{dot, norm, top_eigenpairs, Matrix};
use crate::problem::BilevelProblem;

/// Affine plane through the mean of a path, spanned by its two leading
/// principal directions.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaPlane {
    pub mean: Vec<f64>,
    pub axes: [Vec<f64>; 2],
    /// path variance along each axis
    pub variances: [f64; 2],
    /// set when the path is collinear and the second axis is an arbitrary
    /// orthonormal completion
    pub degenerate: bool,
}

const COLLINEAR_RTOL: f64 = 1e-12;

impl PcaPlane {
    pub fn fit(points: &[Vec<f64>]) -> Result<PcaPlane> {
        let Some(first) = points.first() else {
            return Err(Error::DegeneratePath("empty path".into()));
        };
        let n = first.len();
        if n < 2 {
            return Err(Error::InvalidArgument(format!(
                "a plane needs at least 2 parameters, got {n}"
            )));
        }
        if points.iter().any(|p| p.len() != n) {
            return Err(Error::dims("PcaPlane::fit", n, "ragged path"));
        }
        let count = points.len() as f64;
        let mut mean = vec![0.0; n];
        for p in points {
            crate::linalg::axpy(1.0 / count, p, &mut mean);
        }
        let mut cov = Matrix::zeros(n, n);
        for p in points {
            let d: Vec<f64> = p.iter().zip(&mean).map(|(a, b)| a - b).collect();
            for i in 0..n {
                for j in 0..n {
                    cov[(i, j)] += d[i] * d[j] / count;
                }
            }
        }
        let pairs = top_eigenpairs(&cov, 2)?;
        let (l1, a1) = pairs[0].clone();
        if !(l1 > 0.0) {
            return Err(Error::DegeneratePath("all path points coincide".into()));
        }
        let (l2, a2) = pairs[1].clone();
        if l2 > COLLINEAR_RTOL * l1 {
            return Ok(PcaPlane {
                mean,
                axes: [a1, a2],
                variances: [l1, l2],
                degenerate: false,
            });
        }
        // completion: the coordinate direction least aligned with the first axis
        let k = (0..n)
            .min_by(|&i, &j| a1[i].abs().total_cmp(&a1[j].abs()))
            .unwrap_or(0);
        let mut e: Vec<f64> = (0..n).map(|i| if i == k { 1.0 } else { 0.0 }).collect();
        let c = dot(&e, &a1);
        crate::linalg::axpy(-c, &a1, &mut e);
        let ne = norm(&e);
        e.iter_mut().for_each(|v| *v /= ne);
        Ok(PcaPlane {
            mean,
            axes: [a1, e],
            variances: [l1, l2.max(0.0)],
            degenerate: true,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// `mean + u·axis₀ + v·axis₁`
    pub fn point(&self, u: f64, v: f64) -> Vec<f64> {
        self.mean
            .iter()
            .zip(self.axes[0].iter().zip(&self.axes[1]))
            .map(|(m, (a, b))| m + u * a + v * b)
            .collect()
    }

    /// Plane coordinates of `p` and its distance from the plane.
    pub fn project(&self, p: &[f64]) -> (f64, f64, f64) {
        let d: Vec<f64> = p.iter().zip(&self.mean).map(|(a, b)| a - b).collect();
        let u = dot(&d, &self.axes[0]);
        let v = dot(&d, &self.axes[1]);
        let back = self.point(u, v);
        let off = norm(&p.iter().zip(&back).map(|(a, b)| a - b).collect::<Vec<_>>());
        (u, v, off)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridPoint {
    pub u: f64,
    pub v: f64,
    pub p: Vec<f64>,
    pub f_u: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathPoint {
    pub u: f64,
    pub v: f64,
    pub off_plane: f64,
    pub f_u: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Landscape {
    pub plane: PcaPlane,
    /// half-widths of the grid along each axis
    pub extents: [f64; 2],
    pub count: usize,
    /// row-major over `(v, u)`: `grid[j·count + i]` has `u` index `i`
    pub grid: Vec<GridPoint>,
    pub path: Vec<PathPoint>,
}

impl Landscape {
    pub fn argmin(&self) -> Option<&GridPoint> {
        self.grid.iter().min_by(|a, b| a.f_u.total_cmp(&b.f_u))
    }

    pub fn value(&self, i: usize, j: usize) -> f64 {
        self.grid[j * self.count + i].f_u
    }
}

fn axis_values(count: usize, half: f64) -> Vec<f64> {
    if count == 1 {
        return vec![0.0];
    }
    (0..count)
        .map(|i| -half + 2.0 * half * i as f64 / (count - 1) as f64)
        .collect()
}

/// Evaluates `f` on a `count×count` grid of the plane spanning
/// `± span·(largest path coordinate)` per axis, and at the path points.
pub fn evaluate_landscape<F>(
    plane: &PcaPlane,
    path: &[Vec<f64>],
    count: usize,
    span: f64,
    mut f: F,
) -> Result<Landscape>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if count == 0 || !(span > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "grid needs count ≥ 1 and span > 0, got {count}, {span}"
        )));
    }
    let projected: Vec<(f64, f64, f64)> = path.iter().map(|p| plane.project(p)).collect();
    let reach_u = projected.iter().map(|c| c.0.abs()).fold(0.0, f64::max);
    let reach_v = projected.iter().map(|c| c.1.abs()).fold(0.0, f64::max);
    let fallback = if reach_u > 0.0 { reach_u } else { 1.0 };
    let extents = [
        span * fallback,
        span * if reach_v > 0.0 { reach_v } else { fallback },
    ];
    let us = axis_values(count, extents[0]);
    let vs = axis_values(count, extents[1]);
    let mut grid = Vec::with_capacity(count * count);
    for &v in &vs {
        for &u in &us {
            let p = plane.point(u, v);
            let f_u = f(&p)?;
            grid.push(GridPoint { u, v, p, f_u });
        }
    }
    let mut path_points = Vec::with_capacity(path.len());
    for (p, (u, v, off)) in path.iter().zip(projected) {
        path_points.push(PathPoint {
            u,
            v,
            off_plane: off,
            f_u: f(p)?,
        });
    }
    Ok(Landscape {
        plane: plane.clone(),
        extents,
        count,
        grid,
        path: path_points,
    })
}

/// `p ↦ f_U(z*(p), p)` with each lower solve warm-started from the previous
/// solution, falling back to `z_init` when a warm start fails.
pub fn loss_evaluator<'a>(
    problem: &'a BilevelProblem,
    lower: &'a LowerConfig,
    z_init: &'a [f64],
) -> impl FnMut(&[f64]) -> Result<f64> + 'a {
    let mut warm = z_init.to_vec();
    move |p| {
        let sol = match solve_lower(problem, p, &warm, lower) {
            Ok(s) => s,
            Err(_) => solve_lower(problem, p, z_init, lower)?,
        };
        let f = problem.upper_value(&sol.z, p)?;
        warm = sol.z;
        Ok(f)
    }
}

/// PCA projection of an optimization path with the loss evaluated on the
/// spanned grid.
pub fn pca_landscape(
    trace: &OptimTrace,
    problem: &BilevelProblem,
    lower: &LowerConfig,
    z_init: &[f64],
    count: usize,
    span: f64,
) -> Result<Landscape> {
    let path = trace.points();
    let plane = PcaPlane::fit(&path)?;
    evaluate_landscape(
        &plane,
        &path,
        count,
        span,
        loss_evaluator(problem, lower, z_init),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_path_gives_axis_direction() {
        let path: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64, 0.0, 0.0]).collect();
        let plane = PcaPlane::fit(&path).unwrap();
        assert!((plane.axes[0][0].abs() - 1.0).abs() < 1e-10);
        assert!(plane.degenerate);
        assert!(dot(&plane.axes[0], &plane.axes[1]).abs() < 1e-12);
        assert!((norm(&plane.axes[1]) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn triangle_spans_the_plane() {
        let path = vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]];
        let plane = PcaPlane::fit(&path).unwrap();
        assert!(!plane.degenerate);
        let f = |p: &[f64]| Ok(p[0] * p[0] + 3.0 * p[1]);
        let land = evaluate_landscape(&plane, &path, 5, 1.5, f).unwrap();
        for (pp, p) in land.path.iter().zip(&path) {
            assert!(pp.off_plane < 1e-12);
            assert!((pp.f_u - f(p).unwrap()).abs() < 1e-10);
            let back = plane.point(pp.u, pp.v);
            assert!((f(&back).unwrap() - pp.f_u).abs() < 1e-10);
        }
        assert_eq!(land.grid.len(), 25);
    }

    #[test]
    fn coincident_points_are_rejected() {
        let path = vec![vec![1.0, 1.0]; 4];
        assert!(matches!(
            PcaPlane::fit(&path),
            Err(Error::DegeneratePath(_))
        ));
        assert!(PcaPlane::fit(&[vec![1.0], vec![2.0]]).is_err());
    }
}
