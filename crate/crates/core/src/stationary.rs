//! Stationary pair `(Xˢ⋆, Uˢ⋆)`, the quadratic-plus-linear storage function
//! `λ(k, X)` and the residual of the mean-square dissipation inequality.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix, Vector};
use crate::metrics::mean_square_distance;
use crate::model::{
    expected_quad, quad_form, shift_problem, stage_cost_from_moments, trace_product, MomentState, ProblemSpec,
    ShiftedProblem, U, X, XS,
};

const GAMMA_HALVINGS: usize = 60;
const H_MIN_EIG: f64 = 1e-10;

/// The stationary pair, with control law
/// `Uˢ = K (Xˢ - x̃ˢ⋆ - xˢ) + ũˢ⋆ + uˢ = K (Xˢ - μˢ) + control_offset`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StationaryPair {
    #[serde(serialize_with = "serialize_matrix")]
    pub k: Matrix,
    #[serde(serialize_with = "serialize_vector")]
    pub x_s: Vector,
    #[serde(serialize_with = "serialize_vector")]
    pub u_s: Vector,
    #[serde(serialize_with = "serialize_vector")]
    pub x_tilde: Vector,
    #[serde(serialize_with = "serialize_vector")]
    pub u_tilde: Vector,
    #[serde(serialize_with = "serialize_vector")]
    pub mu_s: Vector,
    #[serde(serialize_with = "serialize_matrix")]
    pub sigma_s: Matrix,
    #[serde(serialize_with = "serialize_vector")]
    pub control_offset: Vector,
    /// `C⋆_ℓ = ℓ(Xˢ⋆(k), Uˢ⋆(k))`, constant in `k`.
    pub stationary_cost: f64,
}

impl StationaryPair {
    pub fn closed_loop(&self, spec: &ProblemSpec) -> Matrix {
        &spec.system.a + &spec.system.b * &self.k
    }

    pub fn control(&self, x: &Vector) -> Vector {
        &self.k * (x - &self.mu_s) + &self.control_offset
    }

    pub fn state_moments(&self) -> MomentState {
        MomentState::new(self.mu_s.clone(), self.sigma_s.clone())
    }

    pub fn control_cov(&self) -> Matrix {
        linalg::symmetrize(&(&self.k * &self.sigma_s * self.k.transpose()))
    }

    /// Joint moments of `(X, U) = (Xˢ⋆, Uˢ⋆)`.
    pub fn joint_xu(&self) -> MomentState {
        let n = self.mu_s.len();
        let l = self.control_offset.len();
        let mut cov = Matrix::zeros(n + l, n + l);
        let cross = &self.sigma_s * self.k.transpose();
        cov.view_mut((0, 0), (n, n)).copy_from(&self.sigma_s);
        cov.view_mut((0, n), (n, l)).copy_from(&cross);
        cov.view_mut((n, 0), (l, n)).copy_from(&cross.transpose());
        cov.view_mut((n, n), (l, l)).copy_from(&self.control_cov());
        MomentState::joint(&[(X, self.mu_s.clone()), (U, self.control_offset.clone())], cov).expect("block sizes agree")
    }

    /// Joint moments of `(X, U, Xˢ)` with `X = Xˢ`, `U = Uˢ` almost surely.
    pub fn perfectly_coupled(&self) -> MomentState {
        let n = self.mu_s.len();
        let l = self.control_offset.len();
        let mut t = Matrix::zeros(2 * n + l, n);
        t.view_mut((0, 0), (n, n)).fill_with_identity();
        t.view_mut((n, 0), (l, n)).copy_from(&self.k);
        t.view_mut((n + l, 0), (n, n)).fill_with_identity();
        let cov = linalg::symmetrize(&(&t * &self.sigma_s * t.transpose()));
        MomentState::joint(&[(X, self.mu_s.clone()), (U, self.control_offset.clone()), (XS, self.mu_s.clone())], cov)
            .expect("block sizes agree")
    }
}

/// Storage function data for
/// `λ(k,X) = E[‖X - (Xˢ(k) - x̃)‖²_{P+S} - ‖X - xˢ‖²_P + qᵀ(X - (Xˢ(k) - x̃))]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StorageData {
    #[serde(serialize_with = "serialize_matrix")]
    pub p: Matrix,
    #[serde(serialize_with = "serialize_matrix")]
    pub s: Matrix,
    #[serde(serialize_with = "serialize_matrix")]
    pub s_tilde: Matrix,
    #[serde(serialize_with = "serialize_vector")]
    pub q: Vector,
    /// Margin of `α(s) = r s`.
    pub r: f64,
    pub gamma: f64,
    #[serde(serialize_with = "serialize_matrix")]
    pub h: Matrix,
    #[serde(skip)]
    pub anchor: StationaryPair,
}

/// Output of [`build_storage`]: the shaped storage matrix, the cost Hessian
/// `H`, the deterministic optimum of `h_γ̃` on the steady-state manifold and
/// its multiplier.
#[derive(Debug, Clone, PartialEq)]
pub struct StorageShape {
    pub s_tilde: Matrix,
    pub gamma: f64,
    pub s: Matrix,
    pub h: Matrix,
    pub x_tilde: Vector,
    pub u_tilde: Vector,
    pub q: Vector,
    pub r: f64,
}

fn hessian(spec: &ProblemSpec, s_tilde: &Matrix, gamma: f64) -> Matrix {
    let (a, b) = (&spec.system.a, &spec.system.b);
    let (n, l) = (spec.n(), spec.l());
    let sg = s_tilde * gamma;
    let q_g = &spec.cost.q1 + &sg - a.transpose() * &sg * a;
    let r_g = &spec.cost.r1 - b.transpose() * &sg * b;
    let off = -(a.transpose() * &sg * b);
    let mut h = Matrix::zeros(n + l, n + l);
    h.view_mut((0, 0), (n, n)).copy_from(&q_g);
    h.view_mut((0, n), (n, l)).copy_from(&off);
    h.view_mut((n, 0), (l, n)).copy_from(&off.transpose());
    h.view_mut((n, n), (l, l)).copy_from(&r_g);
    linalg::symmetrize(&h)
}

/// Smallest eigenvalue of the Schur complement of the control block of `H`.
pub fn schur_margin(h: &Matrix, n: usize) -> Result<f64> {
    let l = h.nrows() - n;
    let hxx = h.view((0, 0), (n, n)).into_owned();
    let hxu = h.view((0, n), (n, l)).into_owned();
    let huu = h.view((n, n), (l, l)).into_owned();
    let solved = huu
        .cholesky()
        .ok_or_else(|| Error::NotPsd(linalg::min_eigenvalue(&h.view((n, n), (l, l)).into_owned())))?
        .solve(&hxu.transpose());
    Ok(linalg::min_eigenvalue(&(hxx - &hxu * solved)))
}

/// Builds `S = γ̃ S̃`, `H`, `(x̃ˢ⋆, ũˢ⋆)`, `q` and `r`.
pub fn build_storage(spec: &ProblemSpec, shift: &ShiftedProblem) -> Result<StorageShape> {
    let (a, b) = (&spec.system.a, &spec.system.b);
    let (n, l) = (spec.n(), spec.l());
    let s_tilde = linalg::find_storage_shape(a, &spec.cost.q1)?;

    let mut gamma = 1.0;
    let mut h = hessian(spec, &s_tilde, gamma);
    let mut halvings = 0;
    while linalg::min_eigenvalue(&h) < H_MIN_EIG {
        halvings += 1;
        if halvings > GAMMA_HALVINGS {
            return Err(Error::GammaSearchFailed);
        }
        gamma *= 0.5;
        h = hessian(spec, &s_tilde, gamma);
    }

    let mut g = Vector::zeros(n + l);
    g.rows_mut(0, n).copy_from(&shift.s_hat);
    g.rows_mut(n, l).copy_from(&shift.v_hat);
    let mut ceq = Matrix::zeros(n, n + l);
    ceq.view_mut((0, 0), (n, n)).copy_from(&(Matrix::identity(n, n) - a));
    ceq.view_mut((0, n), (n, l)).copy_from(&(-b));
    let kkt = linalg::solve_equality_qp(&h, &g, &ceq)?;
    let r = schur_margin(&h, n)?;

    Ok(StorageShape {
        s: &s_tilde * gamma,
        s_tilde,
        gamma,
        h,
        x_tilde: kkt.x_opt,
        u_tilde: kkt.u_opt,
        q: kkt.multiplier,
        r,
    })
}

/// Builds the stationary pair and its storage function.
pub fn certify(spec: &ProblemSpec) -> Result<(StationaryPair, StorageData)> {
    let (a, b) = (&spec.system.a, &spec.system.b);
    let shift = shift_problem(spec)?;
    let dare = linalg::solve_dare(a, b, &(&spec.cost.q1 + &spec.cost.q2), &(&spec.cost.r1 + &spec.cost.r2))?;
    let shape = build_storage(spec, &shift)?;
    let acl = a + b * &dare.k;
    let sigma_s = linalg::solve_discrete_lyapunov(&acl, &spec.noise_cov_state())?;

    let mu_s = &shift.x_s + &shape.x_tilde;
    let control_offset = &shift.u_s + &shape.u_tilde;
    let mut pair = StationaryPair {
        k: dare.k,
        x_s: shift.x_s.clone(),
        u_s: shift.u_s.clone(),
        x_tilde: shape.x_tilde.clone(),
        u_tilde: shape.u_tilde.clone(),
        mu_s,
        sigma_s,
        control_offset,
        stationary_cost: 0.0,
    };
    pair.stationary_cost = stage_cost_from_moments(&spec.cost, &pair.joint_xu())?;

    let storage = StorageData {
        p: dare.p,
        s: shape.s,
        s_tilde: shape.s_tilde,
        q: shape.q,
        r: shape.r,
        gamma: shape.gamma,
        h: shape.h,
        anchor: pair.clone(),
    };
    Ok((pair, storage))
}

pub fn build_stationary_pair(spec: &ProblemSpec) -> Result<StationaryPair> {
    certify(spec).map(|(pair, _)| pair)
}

/// `λ(k, X)` from the joint moments of `(X, Xˢ(k))`.
pub fn eval_storage(storage: &StorageData, joint: &MomentState) -> Result<f64> {
    let anchor = &storage.anchor;
    let mx = joint.mean_of(X)?;
    let ms = joint.mean_of(XS)?;
    let sxx = joint.cov_of(X, X)?;
    let sss = joint.cov_of(XS, XS)?;
    let sxs = joint.cov_of(X, XS)?;
    let diff_mean = &mx - &ms + &anchor.x_tilde;
    let diff_cov = &sxx + &sss - &sxs - sxs.transpose();
    let ps = &storage.p + &storage.s;
    Ok(expected_quad(&ps, &diff_mean, &diff_cov) - expected_quad(&storage.p, &(&mx - &anchor.x_s), &sxx)
        + storage.q.dot(&diff_mean))
}

/// Uniform lower bound `M ≤ λ(k, X)`, from minimizing the integrand pointwise
/// in `X` and averaging over the stationary law of `Xˢ⋆(k) - x̃ˢ⋆`.
pub fn storage_lower_bound(storage: &StorageData) -> Result<f64> {
    let anchor = &storage.anchor;
    let s_chol = storage.s.clone().cholesky().ok_or_else(|| Error::NotPsd(linalg::min_eigenvalue(&storage.s)))?;
    let s_inv = s_chol.inverse();
    let p = &storage.p;
    // d = a - xˢ where a = Xˢ - x̃
    let d_mean = &anchor.mu_s - &anchor.x_tilde - &anchor.x_s;
    let b_mean = p * &d_mean - &storage.q * 0.5;
    let quad = quad_form(&s_inv, &b_mean) + trace_product(&(p * &s_inv * p), &anchor.sigma_s);
    Ok(-quad - expected_quad(p, &d_mean, &anchor.sigma_s))
}

/// Joint moments of `(f(X,U,W), Xˢ(k+1))` when `X`, `Xˢ` are driven by the
/// same `W(k)`, with `Xˢ` following the stationary feedback.
pub fn successor_joint(spec: &ProblemSpec, pair: &StationaryPair, joint: &MomentState) -> Result<MomentState> {
    let (a, b, e) = (&spec.system.a, &spec.system.b, &spec.system.e);
    let n = spec.n();
    let bx = joint.block(X)?.clone();
    let bu = joint.block(U)?.clone();
    let bs = joint.block(XS)?.clone();
    if bx.len != n || bu.len != spec.l() || bs.len != n {
        return Err(Error::Dimension("successor blocks do not match the system".into()));
    }
    let acl = pair.closed_loop(spec);
    let d = joint.dim();
    let mut t = Matrix::zeros(2 * n, d);
    t.view_mut((0, bx.offset), (n, n)).copy_from(a);
    t.view_mut((0, bu.offset), (n, bu.len)).copy_from(b);
    t.view_mut((n, bs.offset), (n, n)).copy_from(&acl);

    let drift = spec.drift();
    let mean_x = a * joint.mean_of(X)? + b * joint.mean_of(U)? + &drift;
    let mean_s = &acl * joint.mean_of(XS)? + b * (&pair.control_offset - &pair.k * &pair.mu_s) + &drift;

    let mut ee = Matrix::zeros(2 * n, spec.m());
    ee.view_mut((0, 0), (n, spec.m())).copy_from(e);
    ee.view_mut((n, 0), (n, spec.m())).copy_from(e);
    let cov = &t * &joint.cov * t.transpose() + &ee * spec.noise.cov() * ee.transpose();
    MomentState::joint(&[(X, mean_x), (XS, mean_s)], linalg::symmetrize(&cov))
}

/// `ℓ(X,U) - C⋆ + λ(k,X) - λ(k+1, f(X,U,W)) - r E‖X - Xˢ‖²` for a joint
/// `(X, U, Xˢ)` state. Nonnegative up to rounding for every valid input.
pub fn dissipativity_residual(
    spec: &ProblemSpec,
    pair: &StationaryPair,
    storage: &StorageData,
    joint: &MomentState,
) -> Result<f64> {
    for label in [X, U, XS] {
        joint.block(label)?;
    }
    if linalg::min_eigenvalue(&joint.cov) < -1e-10 * (1.0 + linalg::max_abs(&joint.cov)) {
        return Err(Error::NotPsd(linalg::min_eigenvalue(&joint.cov)));
    }
    let stage = stage_cost_from_moments(&spec.cost, joint)?;
    let now = eval_storage(storage, joint)?;
    let next = eval_storage(storage, &successor_joint(spec, pair, joint)?)?;
    let msd = mean_square_distance(joint)?;
    Ok(stage - pair.stationary_cost + now - next - storage.r * msd)
}

pub(crate) fn serialize_matrix<S: serde::Serializer>(m: &Matrix, s: S) -> std::result::Result<S::Ok, S::Error> {
    serde::Serialize::serialize(&linalg::to_rows(m), s)
}

pub(crate) fn serialize_vector<S: serde::Serializer>(v: &Vector, s: S) -> std::result::Result<S::Ok, S::Error> {
    serde::Serialize::serialize(&v.iter().copied().collect::<Vec<_>>(), s)
}
