//! Dense symmetric linear-algebra kernels.
//!
//! Dimensions in this crate are tiny (n ≤ 10 in practice), so everything is
//! built on `nalgebra`'s dynamically sized matrices and plain fixed-point
//! iterations.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;

use crate::error::{Error, Result};

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

const DARE_TOL: f64 = 1e-12;
const DARE_MAX_ITER: usize = 1_000_000;
const DARE_BLOWUP: f64 = 1e14;
const LYAP_TOL: f64 = 1e-15;
const LYAP_MAX_DOUBLINGS: usize = 200;

/// Largest absolute entry.
pub fn max_abs(m: &Matrix) -> f64 {
    m.iter().fold(0.0_f64, |acc, x| acc.max(x.abs()))
}

pub fn symmetrize(m: &Matrix) -> Matrix {
    (m + m.transpose()) * 0.5
}

pub fn is_symmetric(m: &Matrix) -> bool {
    m.is_square() && max_abs(&(m - m.transpose())) <= 1e-12 * (1.0 + max_abs(m))
}

pub fn is_finite(m: &Matrix) -> bool {
    m.iter().all(|x| x.is_finite())
}

/// Eigenvalues of a symmetric matrix in ascending order.
pub fn sym_eigenvalues(m: &Matrix) -> Vec<f64> {
    let mut ev: Vec<f64> = SymmetricEigen::new(symmetrize(m)).eigenvalues.iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    ev
}

pub fn min_eigenvalue(m: &Matrix) -> f64 {
    sym_eigenvalues(m).first().copied().unwrap_or(0.0)
}

/// Smallest eigenvalue of a symmetric matrix together with a unit eigenvector.
fn min_eigenpair(m: &Matrix) -> (f64, Vector) {
    let eig = SymmetricEigen::new(symmetrize(m));
    let (idx, val) =
        eig.eigenvalues.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)).map(|(i, v)| (i, *v)).unwrap();
    (val, eig.eigenvectors.column(idx).into_owned())
}

/// Replaces negative eigenvalues by zero. Fails if an eigenvalue is below
/// `-tol * (1 + ‖M‖_max)`.
pub fn clip_psd(m: &Matrix, tol: f64) -> Result<Matrix> {
    let eig = SymmetricEigen::new(symmetrize(m));
    let scale = 1.0 + max_abs(m);
    let lmin = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    if lmin < -tol * scale {
        return Err(Error::NotPsd(lmin));
    }
    if lmin >= 0.0 {
        return Ok(symmetrize(m));
    }
    let clipped = eig.eigenvalues.map(|l| l.max(0.0));
    Ok(symmetrize(&(&eig.eigenvectors * Matrix::from_diagonal(&clipped) * eig.eigenvectors.transpose())))
}

/// Symmetric PSD square root via eigendecomposition.
pub fn sqrtm_psd(m: &Matrix) -> Result<Matrix> {
    if !m.is_square() {
        return Err(Error::Dimension(format!("sqrtm of {}x{} matrix", m.nrows(), m.ncols())));
    }
    let eig = SymmetricEigen::new(symmetrize(m));
    let lmin = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    if lmin < -1e-8 * (1.0 + max_abs(m)) {
        return Err(Error::NotPsd(lmin));
    }
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    Ok(symmetrize(&(&eig.eigenvectors * Matrix::from_diagonal(&roots) * eig.eigenvectors.transpose())))
}

pub fn eigenvalues(m: &Matrix) -> Vec<Complex64> {
    if m.nrows() == 0 {
        return Vec::new();
    }
    m.clone().complex_eigenvalues().iter().copied().collect()
}

pub fn spectral_radius(m: &Matrix) -> f64 {
    eigenvalues(m).iter().map(|z| z.norm()).fold(0.0, f64::max)
}

fn complex_rank(m: &DMatrix<Complex64>) -> usize {
    let sv = m.clone().svd(false, false).singular_values;
    let smax = sv.iter().copied().fold(0.0, f64::max);
    if smax == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > 1e-10 * smax).count()
}

fn to_complex(m: &Matrix) -> DMatrix<Complex64> {
    m.map(|x| Complex64::new(x, 0.0))
}

/// Eigenvalues of `a` with modulus at least one that fail the PBH rank test
/// `rank [A - λI; C] = n`.
fn unobservable_unstable_modes(a: &Matrix, c: &Matrix) -> Vec<Complex64> {
    let n = a.nrows();
    let ac = to_complex(a);
    let cc = to_complex(c);
    eigenvalues(a)
        .into_iter()
        .filter(|lam| lam.norm() >= 1.0 - 1e-12)
        .filter(|lam| {
            let mut stacked = DMatrix::<Complex64>::zeros(n + c.nrows(), n);
            let shifted = &ac - DMatrix::<Complex64>::identity(n, n) * *lam;
            stacked.view_mut((0, 0), (n, n)).copy_from(&shifted);
            stacked.view_mut((n, 0), (c.nrows(), n)).copy_from(&cc);
            complex_rank(&stacked) < n
        })
        .collect()
}

/// PBH detectability of `(A, C)`.
pub fn is_detectable(a: &Matrix, c: &Matrix) -> bool {
    unobservable_unstable_modes(a, c).is_empty()
}

/// PBH stabilizability of `(A, B)`, by duality with detectability of `(Aᵀ, Bᵀ)`.
pub fn is_stabilizable(a: &Matrix, b: &Matrix) -> bool {
    unobservable_unstable_modes(&a.transpose(), &b.transpose()).is_empty()
}

#[derive(Debug, Clone)]
pub struct DareSolution {
    pub p: Matrix,
    pub k: Matrix,
    pub iterations: usize,
}

fn riccati_gain(a: &Matrix, b: &Matrix, r: &Matrix, p: &Matrix) -> Result<Matrix> {
    let rt = r + b.transpose() * p * b;
    let rhs = -(b.transpose() * p * a);
    rt.clone()
        .cholesky()
        .map(|c| c.solve(&rhs))
        .or_else(|| rt.clone().lu().solve(&rhs))
        .ok_or_else(|| Error::Dimension("R + BᵀPB is singular".into()))
}

/// One backward step of the Riccati recursion:
/// `P⁺ = AᵀPA + Q - AᵀPB (R + BᵀPB)⁻¹ BᵀPA`, together with the gain
/// `K = -(R + BᵀPB)⁻¹ BᵀPA`.
pub fn riccati_step(a: &Matrix, b: &Matrix, q: &Matrix, r: &Matrix, p: &Matrix) -> Result<(Matrix, Matrix)> {
    let k = riccati_gain(a, b, r, p)?;
    let next = q + a.transpose() * p * a + a.transpose() * p * b * &k;
    Ok((symmetrize(&next), k))
}

/// Residual of the algebraic Riccati equation, max-norm.
pub fn dare_residual(a: &Matrix, b: &Matrix, q: &Matrix, r: &Matrix, p: &Matrix) -> f64 {
    match riccati_step(a, b, q, r, p) {
        Ok((next, _)) => max_abs(&(next - p)),
        Err(_) => f64::INFINITY,
    }
}

/// Stabilizing solution of the discrete algebraic Riccati equation by value
/// iteration of the finite-horizon recursion, started from `P = 0`.
pub fn solve_dare(a: &Matrix, b: &Matrix, q: &Matrix, r: &Matrix) -> Result<DareSolution> {
    let n = a.nrows();
    if !a.is_square() || b.nrows() != n || q.shape() != (n, n) || r.shape() != (b.ncols(), b.ncols()) {
        return Err(Error::Dimension(format!(
            "DARE with A {:?}, B {:?}, Q {:?}, R {:?}",
            a.shape(),
            b.shape(),
            q.shape(),
            r.shape()
        )));
    }
    let blowup = DARE_BLOWUP * (1.0 + max_abs(q));
    let mut p = Matrix::zeros(n, n);
    let mut last_change = f64::INFINITY;
    for it in 1..=DARE_MAX_ITER {
        let (next, _) = riccati_step(a, b, q, r, &p)?;
        last_change = max_abs(&(&next - &p));
        p = next;
        if !is_finite(&p) || max_abs(&p) > blowup {
            return Err(Error::NotStabilizable(format!("Riccati iterate grew beyond {blowup:e} after {it} steps")));
        }
        if last_change <= DARE_TOL * (1.0 + max_abs(&p)) {
            let k = riccati_gain(a, b, r, &p)?;
            let rho = spectral_radius(&(a + b * &k));
            if rho >= 1.0 {
                return Err(Error::NotStabilizable(format!("converged gain leaves spectral radius {rho}")));
            }
            debug_assert!(dare_residual(a, b, q, r, &p) <= 1e-9 * (1.0 + max_abs(&p)));
            return Ok(DareSolution { p, k, iterations: it });
        }
    }
    Err(Error::NonConvergence { iterations: DARE_MAX_ITER, last_change })
}

/// Solves `Σ = Acl Σ Aclᵀ + W` by the doubling form of the fixed-point
/// iteration `Σ ← Acl Σ Aclᵀ + W`: after `j` doublings the iterate equals the
/// `2^j`-th partial sum of the series.
pub fn solve_discrete_lyapunov(acl: &Matrix, w: &Matrix) -> Result<Matrix> {
    let n = acl.nrows();
    if !acl.is_square() || w.shape() != (n, n) {
        return Err(Error::Dimension(format!("Lyapunov with Acl {:?}, W {:?}", acl.shape(), w.shape())));
    }
    let rho = spectral_radius(acl);
    if rho >= 1.0 - 1e-9 {
        return Err(Error::UnstableMatrix(rho));
    }
    let mut sigma = symmetrize(w);
    let mut power = acl.clone();
    let mut last_change = f64::INFINITY;
    for _ in 0..LYAP_MAX_DOUBLINGS {
        let increment = &power * &sigma * power.transpose();
        last_change = max_abs(&increment);
        sigma += &increment;
        sigma = symmetrize(&sigma);
        power = &power * &power;
        if last_change <= LYAP_TOL * (1.0 + max_abs(&sigma)) {
            debug_assert!(lyapunov_residual(acl, w, &sigma) <= 1e-10 * (1.0 + max_abs(&sigma)));
            return Ok(sigma);
        }
    }
    Err(Error::NonConvergence { iterations: LYAP_MAX_DOUBLINGS, last_change })
}

pub fn lyapunov_residual(acl: &Matrix, w: &Matrix, sigma: &Matrix) -> f64 {
    max_abs(&(acl * sigma * acl.transpose() + w - sigma))
}

/// Solution of an equality-constrained quadratic program
/// `min zᵀHz + gᵀz  s.t.  Ceq z = 0` with `z = (x, u)`.
#[derive(Debug, Clone)]
pub struct KktSolution {
    pub x_opt: Vector,
    pub u_opt: Vector,
    /// Multiplier with the convention `2Hz + g + Ceqᵀ·multiplier = 0`.
    pub multiplier: Vector,
}

impl KktSolution {
    pub fn z(&self) -> Vector {
        let mut z = Vector::zeros(self.x_opt.len() + self.u_opt.len());
        z.rows_mut(0, self.x_opt.len()).copy_from(&self.x_opt);
        z.rows_mut(self.x_opt.len(), self.u_opt.len()).copy_from(&self.u_opt);
        z
    }
}

/// Solves the KKT system of `min zᵀHz + gᵀz s.t. Ceq z = 0`. The number of
/// constraint rows fixes the split `z = (x, u)`.
pub fn solve_equality_qp(h: &Matrix, g: &Vector, ceq: &Matrix) -> Result<KktSolution> {
    let d = h.nrows();
    let n = ceq.nrows();
    if !h.is_square() || g.len() != d || ceq.ncols() != d || n > d {
        return Err(Error::Dimension(format!("QP with H {:?}, g {}, Ceq {:?}", h.shape(), g.len(), ceq.shape())));
    }
    let mut kkt = Matrix::zeros(d + n, d + n);
    kkt.view_mut((0, 0), (d, d)).copy_from(&(h * 2.0));
    kkt.view_mut((0, d), (d, n)).copy_from(&ceq.transpose());
    kkt.view_mut((d, 0), (n, d)).copy_from(ceq);
    let sv = kkt.clone().svd(false, false).singular_values;
    let smax = sv.iter().copied().fold(0.0, f64::max);
    let smin = sv.iter().copied().fold(f64::INFINITY, f64::min);
    let cond = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    if cond > 1e14 {
        return Err(Error::SingularKkt(cond));
    }
    let mut rhs = Vector::zeros(d + n);
    rhs.rows_mut(0, d).copy_from(&(-g));
    let sol = kkt.lu().solve(&rhs).ok_or(Error::SingularKkt(cond))?;
    let l = d - n;
    Ok(KktSolution {
        x_opt: sol.rows(0, n).into_owned(),
        u_opt: sol.rows(n, l).into_owned(),
        multiplier: sol.rows(d, n).into_owned(),
    })
}

/// Finds `S̃ ≻ 0` with `Q₁ + S̃ - AᵀS̃A ≻ 0`.
///
/// Schur-stable `A` takes the Lyapunov route `AᵀS̃A - S̃ = -I`; otherwise a
/// projected subgradient ascent maximizes `λ_min(Q₁ + S̃ - AᵀS̃A)` over
/// `I ⪯ S̃ ⪯ cI`.
pub fn find_storage_shape(a: &Matrix, q1: &Matrix) -> Result<Matrix> {
    let n = a.nrows();
    if !a.is_square() || q1.shape() != (n, n) {
        return Err(Error::Dimension(format!("A {:?}, Q1 {:?}", a.shape(), q1.shape())));
    }
    let q1_half = sqrtm_psd(q1)?;
    if !is_detectable(a, &q1_half) {
        return Err(Error::NotDetectable);
    }
    let margin = |s: &Matrix| min_eigenvalue(&(q1 + s - a.transpose() * s * a));

    if spectral_radius(a) < 1.0 {
        let s = solve_discrete_lyapunov(&a.transpose(), &Matrix::identity(n, n))?;
        debug_assert!(margin(&s) >= 1e-8);
        return Ok(s);
    }

    const UPPER: f64 = 1e6;
    const ITERATIONS: usize = 10_000;
    const STALL_WINDOW: usize = 1_000;

    let mut s = Matrix::identity(n, n);
    let mut best = s.clone();
    let mut best_t = margin(&s);
    let mut last_improvement = 0;
    let step0 = 1.0 / (1.0 + max_abs(&(a.transpose() * a)));
    for it in 0..ITERATIONS {
        let f = q1 + &s - a.transpose() * &s * a;
        let (t, v) = min_eigenpair(&f);
        if t > best_t + 1e-12 * (1.0 + best_t.abs()) {
            best_t = t;
            best = s.clone();
            last_improvement = it;
        }
        if it - last_improvement > STALL_WINDOW {
            break;
        }
        let av = a * &v;
        let grad = &v * v.transpose() - &av * av.transpose();
        let norm = grad.norm();
        if norm < 1e-14 {
            break;
        }
        s += grad * (step0 / (norm * ((it + 1) as f64).sqrt()));
        s = project_spectrum(&s, 1.0, UPPER);
    }
    if best_t >= 1e-8 {
        Ok(best)
    } else {
        Err(Error::FeasibilitySearchFailed(best_t))
    }
}

fn project_spectrum(m: &Matrix, lo: f64, hi: f64) -> Matrix {
    let eig = SymmetricEigen::new(symmetrize(m));
    let clipped = eig.eigenvalues.map(|l| l.clamp(lo, hi));
    symmetrize(&(&eig.eigenvectors * Matrix::from_diagonal(&clipped) * eig.eigenvectors.transpose()))
}

/// Minimum-norm solution of an underdetermined (or square) system `M x = b`
/// and the residual norm it leaves.
pub fn min_norm_solve(m: &Matrix, b: &Vector) -> (Vector, f64) {
    let svd = m.clone().svd(true, true);
    let smax = svd.singular_values.iter().copied().fold(0.0, f64::max);
    let eps = 1e-12 * smax.max(1.0);
    let x = svd.solve(b, eps).unwrap_or_else(|_| Vector::zeros(m.ncols()));
    let res = (m * &x - b).norm();
    (x, res)
}

/// Builds a matrix from row vectors; rows must have equal length.
pub fn from_rows(rows: &[Vec<f64>]) -> Result<Matrix> {
    let nr = rows.len();
    let nc = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != nc) {
        return Err(Error::Dimension("ragged matrix rows".into()));
    }
    Ok(Matrix::from_fn(nr, nc, |i, j| rows[i][j]))
}

pub fn to_rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}
