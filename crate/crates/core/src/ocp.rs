//! Exact finite-horizon solution of the stochastic OCP and exact propagation
//! of the coupled moments of `(X, Xˢ)`.
//!
//! With additive noise the cost splits into a deterministic problem for the
//! means (weights `Q1`, `R1` plus the linear terms) and a zero-mean problem for
//! the deviations (weights `Q1 + Q2`, `R1 + R2`). The optimal causal policy is
//! therefore `U(k) = K_k (X(k) - μ_X(k)) + ū_k`.

use crate::error::{Error, Result};
use crate::linalg::{self, riccati_step, Matrix, Vector};
use crate::model::{stage_cost_from_moments, MomentState, ProblemSpec, U, X, XS};
use crate::stationary::{eval_storage, successor_joint, StationaryPair, StorageData};

#[derive(Debug, Clone, PartialEq)]
pub struct AffinePolicy {
    /// Deviation gains `K_k`.
    pub gains: Vec<Matrix>,
    /// Points `μ_X(k)` the deviations are measured from.
    pub centers: Vec<Vector>,
    /// Mean controls `ū_k`.
    pub offsets: Vec<Vector>,
}

impl AffinePolicy {
    pub fn horizon(&self) -> usize {
        self.gains.len()
    }

    pub fn control(&self, k: usize, x: &Vector) -> Vector {
        &self.gains[k] * (x - &self.centers[k]) + &self.offsets[k]
    }

    /// The stationary feedback `K (X - μˢ) + offset` repeated `horizon` times.
    pub fn stationary(pair: &StationaryPair, horizon: usize) -> Self {
        Self {
            gains: vec![pair.k.clone(); horizon],
            centers: vec![pair.mu_s.clone(); horizon],
            offsets: vec![pair.control_offset.clone(); horizon],
        }
    }

    /// `ū_k ← ū_k + t·direction_k`.
    pub fn perturbed(&self, direction: &[Vector], t: f64) -> Self {
        let mut out = self.clone();
        for (o, d) in out.offsets.iter_mut().zip(direction) {
            *o += d * t;
        }
        out
    }

    fn check(&self, spec: &ProblemSpec) -> Result<()> {
        let (n, l) = (spec.n(), spec.l());
        let ok = self.centers.len() == self.horizon()
            && self.offsets.len() == self.horizon()
            && self.gains.iter().all(|g| g.shape() == (l, n))
            && self.centers.iter().all(|c| c.len() == n)
            && self.offsets.iter().all(|o| o.len() == l);
        if ok {
            Ok(())
        } else {
            Err(Error::Dimension("policy does not match the problem dimensions".into()))
        }
    }
}

/// Optimal affine policy for the horizon stored in `spec`.
pub fn solve_ocp(spec: &ProblemSpec) -> Result<AffinePolicy> {
    let (a, b) = (&spec.system.a, &spec.system.b);
    let cost = &spec.cost;
    let n = spec.n();
    let horizon = spec.horizon;
    let w_bar = spec.drift();

    // Mean part: V_k(μ) = μᵀΠμ + πᵀμ + const, zero terminal value.
    let mut pi = Matrix::zeros(n, n);
    let mut pi_lin = Vector::zeros(n);
    let mut feedback = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        let rt = &cost.r1 + b.transpose() * &pi * b;
        let chol = rt.clone().cholesky().ok_or_else(|| Error::NotPsd(linalg::min_eigenvalue(&rt)))?;
        let f_mat = -chol.solve(&(b.transpose() * &pi * a));
        let f_vec = -chol.solve(&((&cost.v + b.transpose() * (&pi * &w_bar * 2.0 + &pi_lin)) * 0.5));
        let g = a + b * &f_mat;
        let h = b * &f_vec + &w_bar;
        let next_lin = &cost.s
            + f_mat.transpose() * &cost.r1 * &f_vec * 2.0
            + f_mat.transpose() * &cost.v
            + g.transpose() * &pi * &h * 2.0
            + g.transpose() * &pi_lin;
        pi = linalg::symmetrize(&(&cost.q1 + f_mat.transpose() * &cost.r1 * &f_mat + g.transpose() * &pi * &g));
        pi_lin = next_lin;
        feedback.push((f_mat, f_vec));
    }
    feedback.reverse();

    // Deviation part: time-varying Riccati recursion, zero terminal weight.
    let q = &cost.q1 + &cost.q2;
    let r = &cost.r1 + &cost.r2;
    let mut p = Matrix::zeros(n, n);
    let mut gains = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        let (next, k) = riccati_step(a, b, &q, &r, &p)?;
        gains.push(k);
        p = next;
    }
    gains.reverse();

    let mut mu = spec.init.mean();
    let mut centers = Vec::with_capacity(horizon);
    let mut offsets = Vec::with_capacity(horizon);
    for (f_mat, f_vec) in &feedback {
        let nu = f_mat * &mu + f_vec;
        let next = a * &mu + b * &nu + &w_bar;
        centers.push(std::mem::replace(&mut mu, next));
        offsets.push(nu);
    }
    Ok(AffinePolicy { gains, centers, offsets })
}

/// Exact moments of the coupled pair `(X(k), Xˢ(k))` under a shared noise
/// sequence, with the joint `(X, U, Xˢ)` moments of every stage.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentTrajectory {
    /// Blocks `X`, `Xs`; length `N + 1`.
    pub states: Vec<MomentState>,
    /// Blocks `X`, `U`, `Xs`; length `N`.
    pub stages: Vec<MomentState>,
}

impl MomentTrajectory {
    pub fn horizon(&self) -> usize {
        self.stages.len()
    }

    pub fn control_moments(&self, k: usize) -> Result<(Vector, Matrix)> {
        let st = &self.stages[k];
        Ok((st.mean_of(U)?, st.cov_of(U, U)?))
    }
}

/// Independent `X(0) ~ init` and `Xˢ(0) ~ (μˢ, Σˢ)`.
pub fn initial_joint(spec: &ProblemSpec, pair: &StationaryPair) -> Result<MomentState> {
    MomentState::independent(&[(X, &spec.init.moments()), (XS, &pair.state_moments())])
}

pub fn propagate_moments(spec: &ProblemSpec, policy: &AffinePolicy, pair: &StationaryPair) -> Result<MomentTrajectory> {
    propagate_from(spec, policy, pair, initial_joint(spec, pair)?)
}

/// Joint `(X, U, Xˢ)` moments at a stage with `U = K (X - c) + ū`.
pub fn stage_joint(state: &MomentState, gain: &Matrix, center: &Vector, offset: &Vector) -> Result<MomentState> {
    let bx = state.block(X)?.clone();
    let bs = state.block(XS)?.clone();
    let (n, l) = (bx.len, gain.nrows());
    let d = state.dim();
    let mut t = Matrix::zeros(2 * n + l, d);
    t.view_mut((0, bx.offset), (n, n)).fill_with_identity();
    t.view_mut((n, bx.offset), (l, n)).copy_from(gain);
    t.view_mut((n + l, bs.offset), (n, n)).fill_with_identity();
    let mx = state.mean_of(X)?;
    let mu = gain * (&mx - center) + offset;
    let cov = linalg::symmetrize(&(&t * &state.cov * t.transpose()));
    MomentState::joint(&[(X, mx), (U, mu), (XS, state.mean_of(XS)?)], cov)
}

fn check_psd(state: &MomentState) -> Result<()> {
    let scale = 1.0 + linalg::max_abs(&state.cov);
    let lo = linalg::min_eigenvalue(&state.cov);
    if lo < -1e-10 * scale {
        Err(Error::NotPsd(lo))
    } else {
        Ok(())
    }
}

pub fn propagate_from(
    spec: &ProblemSpec,
    policy: &AffinePolicy,
    pair: &StationaryPair,
    initial: MomentState,
) -> Result<MomentTrajectory> {
    policy.check(spec)?;
    let mut states = Vec::with_capacity(policy.horizon() + 1);
    let mut stages = Vec::with_capacity(policy.horizon());
    let mut state = initial;
    for k in 0..policy.horizon() {
        let stage = stage_joint(&state, &policy.gains[k], &policy.centers[k], &policy.offsets[k])?;
        let next = successor_joint(spec, pair, &stage)?;
        check_psd(&next)?;
        states.push(state);
        stages.push(stage);
        state = next;
    }
    states.push(state);
    Ok(MomentTrajectory { states, stages })
}

/// `J_N`, the sum of the exact stage costs.
pub fn cost_of(spec: &ProblemSpec, trajectory: &MomentTrajectory) -> Result<f64> {
    trajectory.stages.iter().map(|st| stage_cost_from_moments(&spec.cost, st)).sum()
}

/// Rotated stage costs `ℓ(k) - C⋆ + λ(k) - λ(k+1)`.
pub fn rotated_stage_costs(
    spec: &ProblemSpec,
    trajectory: &MomentTrajectory,
    storage: &StorageData,
) -> Result<Vec<f64>> {
    let lam = trajectory.states.iter().map(|s| eval_storage(storage, s)).collect::<Result<Vec<_>>>()?;
    trajectory
        .stages
        .iter()
        .enumerate()
        .map(|(k, st)| {
            Ok(stage_cost_from_moments(&spec.cost, st)? - storage.anchor.stationary_cost + lam[k] - lam[k + 1])
        })
        .collect()
}

/// `J̃_N`, summed term by term.
pub fn rotated_cost(spec: &ProblemSpec, trajectory: &MomentTrajectory, storage: &StorageData) -> Result<f64> {
    Ok(rotated_stage_costs(spec, trajectory, storage)?.iter().sum())
}

/// Shifts the mean controls of an optimal policy along `direction` so that
/// the cost rises by exactly `delta`. The cost is quadratic in the step with
/// zero slope at the optimum.
pub fn near_optimal_policy(
    spec: &ProblemSpec,
    optimal: &AffinePolicy,
    pair: &StationaryPair,
    direction: &[Vector],
    delta: f64,
) -> Result<AffinePolicy> {
    if delta < 0.0 {
        return Err(Error::NegativeDelta(delta));
    }
    if delta == 0.0 {
        return Ok(optimal.clone());
    }
    let j0 = cost_of(spec, &propagate_moments(spec, optimal, pair)?)?;
    let probe = optimal.perturbed(direction, 1.0);
    let curvature = cost_of(spec, &propagate_moments(spec, &probe, pair)?)? - j0;
    if curvature <= 0.0 {
        return Err(Error::Dimension("perturbation direction does not change the cost".into()));
    }
    Ok(optimal.perturbed(direction, (delta / curvature).sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instances::{noiseless, reference_problem, scalar_problem, NoiseKind};
    use crate::metrics::mean_square_distance;
    use crate::model::Distribution;
    use crate::stationary::certify;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar(v: f64) -> Matrix {
        Matrix::from_element(1, 1, v)
    }

    fn vec1(v: f64) -> Vector {
        Vector::from_element(1, v)
    }

    #[test]
    fn one_step_problem() {
        let mut spec = reference_problem(NoiseKind::Gaussian);
        spec.horizon = 1;
        let policy = solve_ocp(&spec).unwrap();
        assert!(linalg::max_abs(&policy.gains[0]) == 0.0);
        let expected = -spec.cost.r1.clone().cholesky().unwrap().solve(&spec.cost.v) * 0.5;
        assert_relative_eq!(policy.offsets[0], expected, epsilon = 1e-14);
    }

    #[test]
    fn zero_horizon() {
        let spec = reference_problem(NoiseKind::Gaussian).with_horizon(0);
        let (pair, _) = certify(&spec).unwrap();
        let policy = solve_ocp(&spec).unwrap();
        let traj = propagate_moments(&spec, &policy, &pair).unwrap();
        assert_eq!(cost_of(&spec, &traj).unwrap(), 0.0);
        assert_eq!(traj.states.len(), 1);
    }

    /// Deterministic affine LQ by brute-force stacking: minimize over the
    /// whole control sequence at once.
    fn batch_deterministic(spec: &ProblemSpec, x0: &Vector) -> Vec<Vector> {
        let (a, b) = (&spec.system.a, &spec.system.b);
        let (n, l, horizon) = (spec.n(), spec.l(), spec.horizon);
        let w = spec.drift();
        // x_k = Φ_k x0 + Σ_j Γ_kj u_j + ψ_k
        let mut phi = vec![Matrix::identity(n, n)];
        let mut psi = vec![Vector::zeros(n)];
        let mut gamma = vec![Matrix::zeros(n, l * horizon)];
        for k in 0..horizon {
            let mut g = a * &gamma[k];
            g.view_mut((0, k * l), (n, l)).copy_from(b);
            gamma.push(g);
            phi.push(a * &phi[k]);
            psi.push(a * &psi[k] + &w);
        }
        let mut hess = Matrix::zeros(l * horizon, l * horizon);
        let mut grad = Vector::zeros(l * horizon);
        for k in 0..horizon {
            let off = &phi[k] * x0 + &psi[k];
            hess += gamma[k].transpose() * &spec.cost.q1 * &gamma[k] * 2.0;
            grad += gamma[k].transpose() * (&spec.cost.q1 * &off * 2.0 + &spec.cost.s);
            hess.view_mut((k * l, k * l), (l, l)).add_assign(&(&spec.cost.r1 * 2.0));
            grad.rows_mut(k * l, l).add_assign(&spec.cost.v);
        }
        let u = hess.lu().solve(&(-grad)).unwrap();
        (0..horizon).map(|k| u.rows(k * l, l).into_owned()).collect()
    }

    use std::ops::AddAssign;

    #[test]
    fn deterministic_degeneration() {
        let mut spec = noiseless(&reference_problem(NoiseKind::Gaussian));
        spec.init = Distribution::Dirac { point: Vector::from_vec(vec![0.5, 0.8]) };
        spec.horizon = 12;
        let policy = solve_ocp(&spec).unwrap();
        let batch = batch_deterministic(&spec, &spec.init.mean());
        for (u, v) in policy.offsets.iter().zip(&batch) {
            assert_relative_eq!(u, v, epsilon = 1e-8);
        }
    }

    #[test]
    fn mean_part_matches_batch_solution_with_drift() {
        let spec = reference_problem(NoiseKind::Gaussian).with_horizon(15);
        let policy = solve_ocp(&spec).unwrap();
        let batch = batch_deterministic(&spec, &spec.init.mean());
        for (u, v) in policy.offsets.iter().zip(&batch) {
            assert_relative_eq!(u, v, epsilon = 1e-8);
        }
    }

    fn two_point_cost(spec: &ProblemSpec, x0: [f64; 2], w: [f64; 2], k0: f64, u0: f64, u1: f64) -> f64 {
        // Exact enumeration over the four equally likely (X0, W0) outcomes.
        let (a, b) = (spec.system.a[(0, 0)], spec.system.b[(0, 0)]);
        let c = &spec.cost;
        let (q1, q2, r1, r2) = (c.q1[(0, 0)], c.q2[(0, 0)], c.r1[(0, 0)], c.r2[(0, 0)]);
        let (s, v) = (c.s[0], c.v[0]);
        let m0 = 0.5 * (x0[0] + x0[1]);
        let stage = |xs: &[f64], us: &[f64]| {
            let n = xs.len() as f64;
            let mx = xs.iter().sum::<f64>() / n;
            let mu = us.iter().sum::<f64>() / n;
            let vx = xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>() / n;
            let vu = us.iter().map(|u| (u - mu).powi(2)).sum::<f64>() / n;
            q1 * mx * mx + r1 * mu * mu + s * mx + v * mu + c.c + (q1 + q2) * vx + (r1 + r2) * vu
        };
        let us0: Vec<f64> = x0.iter().map(|x| k0 * (x - m0) + u0).collect();
        let mut xs1 = Vec::with_capacity(4);
        for (x, u) in x0.iter().zip(&us0) {
            for wv in w {
                xs1.push(a * x + b * u + wv);
            }
        }
        stage(&x0, &us0) + stage(&xs1, &[u1; 4])
    }

    fn two_point_instance() -> ProblemSpec {
        let mut spec = scalar_problem(
            Distribution::Gaussian { mean: vec1(0.2), cov: scalar(0.09) },
            Distribution::Gaussian { mean: vec1(1.0), cov: scalar(0.25) },
            2,
        );
        spec.system.a = scalar(0.9);
        spec.system.b = scalar(0.7);
        spec.cost.q2 = scalar(0.5);
        spec.cost.r1 = scalar(0.8);
        spec.cost.r2 = scalar(0.3);
        spec.cost.s = vec1(0.4);
        spec.cost.v = vec1(-0.2);
        spec.cost.c = 0.1;
        spec
    }

    #[test]
    fn beats_coarse_policy_grid() {
        let spec = two_point_instance();
        let (x0, w) = ([0.5, 1.5], [-0.1, 0.5]);
        let policy = solve_ocp(&spec).unwrap();
        let (pair, _) = certify(&spec).unwrap();
        let exact = cost_of(&spec, &propagate_moments(&spec, &policy, &pair).unwrap()).unwrap();
        let enumerated =
            two_point_cost(&spec, x0, w, policy.gains[0][(0, 0)], policy.offsets[0][0], policy.offsets[1][0]);
        assert_relative_eq!(exact, enumerated, epsilon = 1e-12);
        let grid: Vec<f64> = (0..40).map(|i| -2.0 + 4.0 * i as f64 / 39.0).collect();
        for &k0 in &grid {
            for &u0 in &grid {
                for &u1 in &grid {
                    assert!(exact <= two_point_cost(&spec, x0, w, k0, u0, u1) + 1e-12);
                }
            }
        }
    }

    #[test]
    fn stationary_coupled_trajectory_is_constant() {
        let spec = reference_problem(NoiseKind::Gaussian).with_horizon(10);
        let (pair, storage) = certify(&spec).unwrap();
        let n = spec.n();
        let mut cov = Matrix::zeros(2 * n, 2 * n);
        for (i, j) in [(0, 0), (0, n), (n, 0), (n, n)] {
            cov.view_mut((i, j), (n, n)).copy_from(&pair.sigma_s);
        }
        let init = MomentState::joint(&[(X, pair.mu_s.clone()), (XS, pair.mu_s.clone())], cov).unwrap();
        let policy = AffinePolicy::stationary(&pair, 10);
        let traj = propagate_from(&spec, &policy, &pair, init.clone()).unwrap();
        for st in &traj.states {
            assert_relative_eq!(st.mean, init.mean, epsilon = 1e-10);
            assert_relative_eq!(st.cov, init.cov, epsilon = 1e-10);
            assert!(mean_square_distance(st).unwrap().abs() <= 1e-10);
        }
        assert_relative_eq!(cost_of(&spec, &traj).unwrap(), 10.0 * pair.stationary_cost, epsilon = 1e-9);
        assert!(rotated_cost(&spec, &traj, &storage).unwrap().abs() <= 1e-9);
    }

    #[test]
    fn independent_identical_laws_decay_by_lyapunov_recursion() {
        let mut spec = reference_problem(NoiseKind::Gaussian).with_horizon(30);
        let (pair, _) = certify(&spec).unwrap();
        spec.init = Distribution::Gaussian { mean: pair.mu_s.clone(), cov: pair.sigma_s.clone() };
        let traj = propagate_moments(&spec, &AffinePolicy::stationary(&pair, 30), &pair).unwrap();
        let acl = pair.closed_loop(&spec);
        let mut delta = &pair.sigma_s * 2.0;
        for st in &traj.states {
            assert_relative_eq!(mean_square_distance(st).unwrap(), delta.trace(), epsilon = 1e-12);
            delta = &acl * &delta * acl.transpose();
        }
    }

    #[test]
    fn plateau_below_threshold_mid_horizon() {
        for horizon in [40, 50, 60, 70, 80] {
            let spec = reference_problem(NoiseKind::Gaussian).with_horizon(horizon);
            let (pair, _) = certify(&spec).unwrap();
            let traj = propagate_moments(&spec, &solve_ocp(&spec).unwrap(), &pair).unwrap();
            let msd: Vec<f64> = traj.states.iter().map(|s| mean_square_distance(s).unwrap()).collect();
            let third = horizon / 3;
            let best_mid = msd[third..horizon - third].iter().copied().fold(f64::INFINITY, f64::min);
            assert!(best_mid < 1e-2, "N={horizon}: {best_mid}");
            // The entry arc lasts about 23 steps, so the exact midpoint is on
            // the plateau from N = 50 on.
            if horizon >= 50 {
                assert!(msd[horizon / 2] < 1e-2, "N={horizon}: {}", msd[horizon / 2]);
            }
            // Arcs at both ends leave the plateau.
            assert!(msd[0] > 1.0 && msd[horizon] > 1.0);
        }
    }

    fn random_policy(rng: &mut ChaCha8Rng, spec: &ProblemSpec) -> AffinePolicy {
        let (n, l, h) = (spec.n(), spec.l(), spec.horizon);
        let mut r = |s: f64| s * (rng.random::<f64>() * 2.0 - 1.0);
        AffinePolicy {
            gains: (0..h).map(|_| Matrix::from_fn(l, n, |_, _| r(3.0))).collect(),
            centers: (0..h).map(|_| Vector::from_fn(n, |_, _| r(1.0))).collect(),
            offsets: (0..h).map(|_| Vector::from_fn(l, |_, _| r(2.0))).collect(),
        }
    }

    #[test]
    fn telescoping_and_lower_bound_chain() {
        let spec = reference_problem(NoiseKind::Gaussian).with_horizon(20);
        let (pair, storage) = certify(&spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..25 {
            let policy = random_policy(&mut rng, &spec);
            let traj = propagate_moments(&spec, &policy, &pair).unwrap();
            let rot = rotated_cost(&spec, &traj, &storage).unwrap();
            let j = cost_of(&spec, &traj).unwrap();
            let l0 = eval_storage(&storage, &traj.states[0]).unwrap();
            let ln = eval_storage(&storage, &traj.states[20]).unwrap();
            let closed = j - 20.0 * pair.stationary_cost + l0 - ln;
            assert!((rot - closed).abs() <= 1e-8 * (1.0 + closed.abs()), "{rot} vs {closed}");
            let chain: f64 = traj.states[..20].iter().map(|s| storage.r * mean_square_distance(s).unwrap()).sum();
            assert!(rot >= chain - 1e-6);
        }
    }

    #[test]
    fn near_optimal_hits_target() {
        let spec = reference_problem(NoiseKind::Gaussian).with_horizon(30);
        let (pair, _) = certify(&spec).unwrap();
        let opt = solve_ocp(&spec).unwrap();
        let j0 = cost_of(&spec, &propagate_moments(&spec, &opt, &pair).unwrap()).unwrap();
        let dir = vec![Vector::from_element(1, 1.0); 30];
        let pol = near_optimal_policy(&spec, &opt, &pair, &dir, 0.7).unwrap();
        let j = cost_of(&spec, &propagate_moments(&spec, &pol, &pair).unwrap()).unwrap();
        assert_relative_eq!(j - j0, 0.7, epsilon = 1e-8);
        assert!(near_optimal_policy(&spec, &opt, &pair, &dir, -1.0).is_err());
    }

    #[test]
    fn optimal_policy_beats_random_perturbations() {
        let spec = reference_problem(NoiseKind::Uniform).with_horizon(15);
        let (pair, _) = certify(&spec).unwrap();
        let opt = solve_ocp(&spec).unwrap();
        let j0 = cost_of(&spec, &propagate_moments(&spec, &opt, &pair).unwrap()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let mut pol = opt.clone();
            for g in pol.gains.iter_mut() {
                *g += Matrix::from_fn(1, 2, |_, _| 0.1 * (rng.random::<f64>() - 0.5));
            }
            for o in pol.offsets.iter_mut() {
                o[0] += 0.1 * (rng.random::<f64>() - 0.5);
            }
            let j = cost_of(&spec, &propagate_moments(&spec, &pol, &pair).unwrap()).unwrap();
            assert!(j >= j0 - 1e-10);
        }
    }
}
