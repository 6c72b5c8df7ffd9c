use alloc::vec;
use alloc::vec::Vec;

use super::{all_finite, axpy, norm2, Matrix};
use crate::error::{Error, Result};

/// A matrix-free linear map, enough for Golub-Kahan bidiagonalization.
pub trait LinearOperator {
    fn nrows(&self) -> usize;
    fn ncols(&self) -> usize;
    /// `out = A x`
    fn apply(&self, x: &[f64], out: &mut [f64]);
    /// `out = A^T y`
    fn apply_t(&self, y: &[f64], out: &mut [f64]);
}

impl LinearOperator for Matrix {
    fn nrows(&self) -> usize {
        self.rows()
    }

    fn ncols(&self) -> usize {
        self.cols()
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        for (r, o) in out.iter_mut().enumerate() {
            *o = super::dot(self.row(r), x);
        }
    }

    fn apply_t(&self, y: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        for (r, &yr) in y.iter().enumerate() {
            if yr != 0.0 {
                axpy(yr, self.row(r), out);
            }
        }
    }
}

/// `[A; damp * I]`, so that damped problems and restarts share one code path.
struct Damped<'a, Op: LinearOperator + ?Sized> {
    op: &'a Op,
    damp: f64,
}

impl<Op: LinearOperator + ?Sized> LinearOperator for Damped<'_, Op> {
    fn nrows(&self) -> usize {
        self.op.nrows() + self.op.ncols()
    }

    fn ncols(&self) -> usize {
        self.op.ncols()
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        let m = self.op.nrows();
        self.op.apply(x, &mut out[..m]);
        for (o, xi) in out[m..].iter_mut().zip(x) {
            *o = self.damp * xi;
        }
    }

    fn apply_t(&self, y: &[f64], out: &mut [f64]) {
        let m = self.op.nrows();
        self.op.apply_t(&y[..m], out);
        axpy(self.damp, &y[m..], out);
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LlsOptions {
    pub damp: f64,
    /// Relative residual of the damped normal equations at which to stop.
    pub tol: f64,
    /// Total LSMR iterations across restarts; `None` means `10 * cols`.
    pub max_iter: Option<usize>,
}

impl LlsOptions {
    pub fn new(damp: f64) -> Self {
        Self {
            damp,
            tol: 1e-10,
            max_iter: None,
        }
    }
}

impl Default for LlsOptions {
    fn default() -> Self {
        Self::new(0.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LlsSolution {
    pub x: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// `||A^T y - (A^T A + damp^2 I) x|| / ||A^T y||`
    pub relative_residual: f64,
}

/// `||A^T (y - A x) - damp^2 x||`, the residual of the damped normal equations.
pub fn damped_normal_residual(a: &Matrix, y: &[f64], damp: f64, x: &[f64]) -> f64 {
    let ax = a.matvec(x);
    let r: Vec<f64> = y.iter().zip(&ax).map(|(yi, ai)| yi - ai).collect();
    let mut g = a.t_matvec(&r);
    axpy(-damp * damp, x, &mut g);
    norm2(&g)
}

/// Minimizes `||A x - y||^2 + damp^2 ||x||^2` with LSMR.
///
/// LSMR runs on the stacked system `[A; damp I] x = [y; 0]`. When its
/// internal residual estimate says it is done, the true normal-equation
/// residual is recomputed and, if it is still above `tol`, LSMR is restarted
/// on the correction problem. If the iteration budget runs out the best
/// iterate seen is returned with `converged = false`.
pub fn solve_damped_lls(a: &Matrix, y: &[f64], opts: &LlsOptions) -> Result<LlsSolution> {
    if a.rows() != y.len() {
        return Err(Error::ShapeMismatch {
            what: "least-squares right-hand side",
            expected: a.rows(),
            found: y.len(),
        });
    }
    if a.cols() == 0 {
        return Err(Error::Empty("least-squares matrix columns"));
    }
    if !(opts.damp >= 0.0 && opts.damp.is_finite()) {
        return Err(Error::InvalidArgument(alloc::format!(
            "damp must be a finite non-negative number, got {}",
            opts.damp
        )));
    }
    if !(opts.tol > 0.0) {
        return Err(Error::InvalidArgument(alloc::format!(
            "tol must be positive, got {}",
            opts.tol
        )));
    }
    if !a.is_finite() {
        return Err(Error::NonFinite("least-squares matrix"));
    }
    if !all_finite(y) {
        return Err(Error::NonFinite("least-squares right-hand side"));
    }

    let n = a.cols();
    let m = a.rows();
    let scale = norm2(&a.t_matvec(y));
    if scale == 0.0 {
        return Ok(LlsSolution {
            x: vec![0.0; n],
            iterations: 0,
            converged: true,
            relative_residual: 0.0,
        });
    }

    let budget = opts.max_iter.unwrap_or(10 * n).max(1);
    let op = Damped {
        op: a,
        damp: opts.damp,
    };
    let target = opts.tol * scale;

    let mut x = vec![0.0; n];
    let mut best_x = x.clone();
    let mut best_res = scale;
    let mut used = 0usize;
    let mut stalls = 0usize;
    let mut rhs = vec![0.0; m + n];

    while used < budget {
        // correction problem: [A; damp I] delta ~ [y - A x; -damp x]
        a.apply(&x, &mut rhs[..m]);
        for (r, yi) in rhs[..m].iter_mut().zip(y) {
            *r = yi - *r;
        }
        for (r, xi) in rhs[m..].iter_mut().zip(&x) {
            *r = -opts.damp * xi;
        }
        let (delta, iters) = lsmr(&op, &rhs, 0.5 * target, budget - used);
        used += iters;
        axpy(1.0, &delta, &mut x);

        let res = damped_normal_residual(a, y, opts.damp, &x);
        if res < best_res {
            best_res = res;
            best_x.copy_from_slice(&x);
            stalls = 0;
        } else {
            stalls += 1;
        }
        if best_res <= target || iters == 0 || stalls >= 3 {
            break;
        }
    }

    Ok(LlsSolution {
        converged: best_res <= target,
        relative_residual: best_res / scale,
        x: best_x,
        iterations: used,
    })
}

fn sym_ortho(a: f64, b: f64) -> (f64, f64, f64) {
    let r = libm::hypot(a, b);
    if r == 0.0 {
        (1.0, 0.0, 0.0)
    } else {
        (a / r, b / r, r)
    }
}

/// Undamped LSMR (Fong & Saunders, 2011). Stops once the estimate of
/// `||A^T (b - A x)||` drops to `atol` or after `max_iter` iterations.
fn lsmr<Op: LinearOperator + ?Sized>(op: &Op, b: &[f64], atol: f64, max_iter: usize) -> (Vec<f64>, usize) {
    let m = op.nrows();
    let n = op.ncols();
    let mut x = vec![0.0; n];

    let mut u = b.to_vec();
    let mut beta = norm2(&u);
    if beta > 0.0 {
        super::scale(1.0 / beta, &mut u);
    }
    let mut v = vec![0.0; n];
    op.apply_t(&u, &mut v);
    let mut alpha = norm2(&v);
    if alpha > 0.0 {
        super::scale(1.0 / alpha, &mut v);
    }
    if alpha * beta == 0.0 {
        return (x, 0);
    }

    let mut zetabar = alpha * beta;
    let mut alphabar = alpha;
    let mut rho = 1.0;
    let mut rhobar = 1.0;
    let mut cbar = 1.0;
    let mut sbar = 0.0;
    let mut h = v.clone();
    let mut hbar = vec![0.0; n];
    let mut au = vec![0.0; m];
    let mut atv = vec![0.0; n];

    let mut iters = 0;
    while iters < max_iter {
        iters += 1;

        op.apply(&v, &mut au);
        for (ui, ai) in u.iter_mut().zip(&au) {
            *ui = ai - alpha * *ui;
        }
        beta = norm2(&u);
        if beta > 0.0 {
            super::scale(1.0 / beta, &mut u);
            op.apply_t(&u, &mut atv);
            for (vi, ai) in v.iter_mut().zip(&atv) {
                *vi = ai - beta * *vi;
            }
            alpha = norm2(&v);
            if alpha > 0.0 {
                super::scale(1.0 / alpha, &mut v);
            }
        }

        let rhoold = rho;
        let (c, s, r) = sym_ortho(alphabar, beta);
        rho = r;
        let thetanew = s * alpha;
        alphabar = c * alpha;

        let rhobarold = rhobar;
        let thetabar = sbar * rho;
        let (cb, sb, rb) = sym_ortho(cbar * rho, thetanew);
        cbar = cb;
        sbar = sb;
        rhobar = rb;
        let zeta = cbar * zetabar;
        zetabar *= -sbar;

        if rho == 0.0 || rhobar == 0.0 {
            break;
        }
        let hbar_scale = thetabar * rho / (rhoold * rhobarold);
        for (hb, hi) in hbar.iter_mut().zip(&h) {
            *hb = hi - hbar_scale * *hb;
        }
        axpy(zeta / (rho * rhobar), &hbar, &mut x);
        let h_scale = thetanew / rho;
        for (hi, vi) in h.iter_mut().zip(&v) {
            *hi = vi - h_scale * *hi;
        }

        if zetabar.abs() <= atol || alpha == 0.0 || beta == 0.0 {
            break;
        }
    }
    (x, iters)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_without_damping() {
        let a = Matrix::identity(2);
        let sol = solve_damped_lls(&a, &[3.0, 4.0], &LlsOptions::new(0.0)).unwrap();
        assert!(sol.converged);
        assert!((sol.x[0] - 3.0).abs() < 1e-12 && (sol.x[1] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn identity_with_unit_damping_halves() {
        let a = Matrix::identity(2);
        let sol = solve_damped_lls(&a, &[3.0, 4.0], &LlsOptions::new(1.0)).unwrap();
        assert!(sol.converged);
        assert!((sol.x[0] - 1.5).abs() < 1e-12 && (sol.x[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn zero_rhs_gives_zero() {
        let a = Matrix::from_fn(4, 3, |r, c| (r + c) as f64);
        let sol = solve_damped_lls(&a, &[0.0; 4], &LlsOptions::new(1.0)).unwrap();
        assert_eq!(sol.x, vec![0.0; 3]);
        assert!(sol.converged);
    }

    #[test]
    fn rejects_bad_inputs() {
        let a = Matrix::identity(2);
        assert!(matches!(
            solve_damped_lls(&a, &[1.0], &LlsOptions::new(1.0)),
            Err(Error::ShapeMismatch { .. })
        ));
        assert!(matches!(
            solve_damped_lls(&a, &[1.0, f64::INFINITY], &LlsOptions::new(1.0)),
            Err(Error::NonFinite(_))
        ));
        assert!(matches!(
            solve_damped_lls(&a, &[1.0, 1.0], &LlsOptions::new(-1.0)),
            Err(Error::InvalidArgument(_))
        ));
        assert!(matches!(
            solve_damped_lls(&Matrix::zeros(2, 0), &[1.0, 1.0], &LlsOptions::new(1.0)),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn exhausted_budget_reports_unconverged() {
        // ill-conditioned, one iteration is not enough
        let a = Matrix::from_fn(6, 4, |r, c| libm::pow((r + 1) as f64, c as f64) * 1e-3);
        let y = [1.0, -1.0, 2.0, 0.5, 3.0, -2.0];
        let opts = LlsOptions {
            damp: 0.0,
            tol: 1e-14,
            max_iter: Some(1),
        };
        let sol = solve_damped_lls(&a, &y, &opts).unwrap();
        assert!(!sol.converged);
        assert_eq!(sol.iterations, 1);
        assert!(sol.relative_residual < 1.0);
    }
}
