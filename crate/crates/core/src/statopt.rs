//! Stationary optimization over affine feedback laws `U = K X + d`:
//! minimize `ℓ(X, U)` subject to `X` being invariant under the closed loop.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix, Vector};
use crate::metrics::wasserstein2_gaussian;
use crate::model::{stage_cost_from_moments, MomentState, ProblemSpec, U, X};
use crate::montecarlo::RngStream;
use crate::par::{map_indexed, Execution};
use crate::stationary::{serialize_matrix, serialize_vector, StationaryPair};

const STABILITY_MARGIN: f64 = 1e-6;
const PENALTY: f64 = 1e6;
/// Objective level assigned to non-stabilizing gains before the penalty.
const INFEASIBLE_BASE: f64 = 1e8;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AffineFeedback {
    #[serde(serialize_with = "serialize_matrix")]
    pub k: Matrix,
    #[serde(serialize_with = "serialize_vector")]
    pub d: Vector,
}

impl AffineFeedback {
    /// `K X + (offset - K μˢ)`.
    pub fn from_pair(pair: &StationaryPair) -> Self {
        Self { k: pair.k.clone(), d: &pair.control_offset - &pair.k * &pair.mu_s }
    }

    pub fn to_params(&self) -> Vec<f64> {
        self.k.iter().chain(self.d.iter()).copied().collect()
    }

    /// Inverse of [`Self::to_params`] (column-major `K`, then `d`).
    pub fn from_params(params: &[f64], l: usize, n: usize) -> Self {
        Self {
            k: Matrix::from_column_slice(l, n, &params[..l * n]),
            d: Vector::from_column_slice(&params[l * n..l * n + l]),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StationaryCandidate {
    pub feedback: AffineFeedback,
    #[serde(serialize_with = "serialize_vector")]
    pub mu: Vector,
    #[serde(serialize_with = "serialize_matrix")]
    pub sigma: Matrix,
    pub cost: f64,
}

impl StationaryCandidate {
    pub fn moments(&self) -> MomentState {
        MomentState::new(self.mu.clone(), self.sigma.clone())
    }
}

/// Invariant moments of the closed loop and their stage cost.
pub fn stationary_cost(spec: &ProblemSpec, fb: &AffineFeedback) -> Result<StationaryCandidate> {
    let (a, b) = (&spec.system.a, &spec.system.b);
    let n = spec.n();
    let acl = a + b * &fb.k;
    let rho = linalg::spectral_radius(&acl);
    if rho > 1.0 - STABILITY_MARGIN {
        return Err(Error::Infeasible(rho));
    }
    let rhs = b * &fb.d + spec.drift();
    let mu = (Matrix::identity(n, n) - &acl).lu().solve(&rhs).ok_or(Error::Infeasible(rho))?;
    let sigma = linalg::solve_discrete_lyapunov(&acl, &spec.noise_cov_state())?;
    let l = spec.l();
    let mut cov = Matrix::zeros(n + l, n + l);
    let cross = &sigma * fb.k.transpose();
    cov.view_mut((0, 0), (n, n)).copy_from(&sigma);
    cov.view_mut((0, n), (n, l)).copy_from(&cross);
    cov.view_mut((n, 0), (l, n)).copy_from(&cross.transpose());
    cov.view_mut((n, n), (l, l)).copy_from(&(&fb.k * &sigma * fb.k.transpose()));
    let joint = MomentState::joint(&[(X, mu.clone()), (U, &fb.k * &mu + &fb.d)], cov)?;
    let cost = stage_cost_from_moments(&spec.cost, &joint)?;
    Ok(StationaryCandidate { feedback: fb.clone(), mu, sigma, cost })
}

/// Stationary cost, or a penalty growing with `ρ(A + BK)` outside the
/// feasible set.
pub fn penalized_objective(spec: &ProblemSpec, params: &[f64]) -> f64 {
    let fb = AffineFeedback::from_params(params, spec.l(), spec.n());
    match stationary_cost(spec, &fb) {
        Ok(c) if c.cost.is_finite() => c.cost,
        _ => {
            let rho = linalg::spectral_radius(&(&spec.system.a + &spec.system.b * &fb.k));
            INFEASIBLE_BASE + PENALTY * (rho - 1.0 + STABILITY_MARGIN).max(0.0)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NelderMeadOptions {
    pub max_evals: usize,
    /// Stop once the simplex diameter falls below this.
    pub tol: f64,
}

impl Default for NelderMeadOptions {
    fn default() -> Self {
        Self { max_evals: 50_000, tol: 1e-10 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NelderMeadResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub evals: usize,
}

/// Downhill simplex with standard coefficients (1, 2, 1/2, 1/2) and an
/// axis-aligned initial simplex of edge `step`.
pub fn nelder_mead<F: Fn(&[f64]) -> f64>(f: F, x0: &[f64], step: f64, opts: NelderMeadOptions) -> NelderMeadResult {
    let dim = x0.len();
    let evals = std::cell::Cell::new(0usize);
    let eval = |x: &[f64]| {
        evals.set(evals.get() + 1);
        f(x)
    };
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(dim + 1);
    simplex.push((x0.to_vec(), eval(x0)));
    for i in 0..dim {
        let mut x = x0.to_vec();
        x[i] += step;
        let v = eval(&x);
        simplex.push((x, v));
    }
    let lerp = |a: &[f64], b: &[f64], t: f64| -> Vec<f64> { a.iter().zip(b).map(|(p, q)| p + t * (q - p)).collect() };

    loop {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let best = &simplex[0].0;
        let diameter = simplex[1..]
            .iter()
            .map(|(x, _)| x.iter().zip(best).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max))
            .fold(0.0, f64::max);
        if diameter <= opts.tol || evals.get() >= opts.max_evals {
            break;
        }
        let mut centroid = vec![0.0; dim];
        for (x, _) in &simplex[..dim] {
            for (c, v) in centroid.iter_mut().zip(x) {
                *c += v / dim as f64;
            }
        }
        let worst = simplex[dim].clone();
        let reflected = lerp(&centroid, &worst.0, -1.0);
        let fr = eval(&reflected);
        if fr < simplex[0].1 {
            let expanded = lerp(&centroid, &worst.0, -2.0);
            let fe = eval(&expanded);
            simplex[dim] = if fe < fr { (expanded, fe) } else { (reflected, fr) };
        } else if fr < simplex[dim - 1].1 {
            simplex[dim] = (reflected, fr);
        } else {
            let (target, ft) = if fr < worst.1 { (reflected, fr) } else { (worst.0.clone(), worst.1) };
            let contracted = lerp(&centroid, &target, 0.5);
            let fc = eval(&contracted);
            if fc < ft {
                simplex[dim] = (contracted, fc);
            } else {
                let anchor = simplex[0].0.clone();
                for entry in simplex.iter_mut().skip(1) {
                    let x = lerp(&anchor, &entry.0, 0.5);
                    let v = eval(&x);
                    *entry = (x, v);
                }
            }
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    let (x, value) = simplex.swap_remove(0);
    NelderMeadResult { x, value, evals: evals.get() }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RestartOutcome {
    pub start: Vec<f64>,
    pub candidate: StationaryCandidate,
    pub evals: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StatoptReport {
    /// Always `"affine"`: the search is restricted to `U = K X + d`.
    pub feedback_class: &'static str,
    pub best: StationaryCandidate,
    pub restarts: Vec<RestartOutcome>,
    pub reference_cost: f64,
    pub cost_gap: f64,
    pub max_mean_gap: f64,
    pub max_cov_gap: f64,
    /// Means and covariances within `1e-3` of the stationary pair.
    pub matches_pair: bool,
}

fn random_start(spec: &ProblemSpec, base: &AffineFeedback, stream: RngStream, jitter: f64) -> Option<Vec<f64>> {
    let mut rng = stream.rng();
    let base = base.to_params();
    for _ in 0..1000 {
        let p: Vec<f64> =
            base.iter().map(|v| v + jitter * (1.0 + v.abs()) * rng.sample::<f64, _>(StandardNormal)).collect();
        let fb = AffineFeedback::from_params(&p, spec.l(), spec.n());
        if stationary_cost(spec, &fb).is_ok() {
            return Some(p);
        }
    }
    None
}

fn refine(spec: &ProblemSpec, start: &[f64], opts: NelderMeadOptions) -> (Vec<f64>, usize) {
    let f = |p: &[f64]| penalized_objective(spec, p);
    let mut x = start.to_vec();
    let mut evals = 0;
    let mut step = 0.5;
    // Restart the simplex at the incumbent until it stops moving.
    for _ in 0..8 {
        let res =
            nelder_mead(f, &x, step, NelderMeadOptions { max_evals: opts.max_evals.saturating_sub(evals), ..opts });
        evals += res.evals;
        let moved = res.x.iter().zip(&x).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        x = res.x;
        step = (moved * 0.5).max(1e-4);
        if moved <= 1e-9 || evals >= opts.max_evals {
            break;
        }
    }
    (x, evals)
}

/// Multistart minimization. Restart 0 perturbs the Riccati feedback slightly,
/// the others draw random stabilizing feedbacks around it.
pub fn solve_stationary_problem(
    spec: &ProblemSpec,
    pair: &StationaryPair,
    restarts: usize,
    seed: u64,
    exec: Execution,
) -> Result<StatoptReport> {
    let base = AffineFeedback::from_pair(pair);
    let opts = NelderMeadOptions::default();
    let outcomes = map_indexed(exec, restarts.max(1), |i| {
        let jitter = if i == 0 { 0.05 } else { 0.5 };
        let start = random_start(spec, &base, RngStream::new(seed, i as u64), jitter)?;
        let (x, evals) = refine(spec, &start, opts);
        let fb = AffineFeedback::from_params(&x, spec.l(), spec.n());
        stationary_cost(spec, &fb).ok().map(|candidate| RestartOutcome { start, candidate, evals })
    });
    let restarts: Vec<RestartOutcome> = outcomes.into_iter().flatten().collect();
    let best = restarts
        .iter()
        .min_by(|a, b| a.candidate.cost.total_cmp(&b.candidate.cost))
        .ok_or(Error::NoStabilizingStart)?
        .candidate
        .clone();
    let max_mean_gap = (&best.mu - &pair.mu_s).amax();
    let max_cov_gap = linalg::max_abs(&(&best.sigma - &pair.sigma_s));
    Ok(StatoptReport {
        feedback_class: "affine",
        reference_cost: pair.stationary_cost,
        cost_gap: best.cost - pair.stationary_cost,
        matches_pair: max_mean_gap <= 1e-3 && max_cov_gap <= 1e-3,
        max_mean_gap,
        max_cov_gap,
        best,
        restarts,
    })
}

/// Central-difference gradient of the stationary cost in `(K, d)`.
pub fn cost_gradient(spec: &ProblemSpec, fb: &AffineFeedback, h: f64) -> Result<Vector> {
    let p = fb.to_params();
    let mut g = Vector::zeros(p.len());
    for i in 0..p.len() {
        let mut plus = p.clone();
        let mut minus = p.clone();
        plus[i] += h;
        minus[i] -= h;
        let fp = stationary_cost(spec, &AffineFeedback::from_params(&plus, spec.l(), spec.n()))?.cost;
        let fm = stationary_cost(spec, &AffineFeedback::from_params(&minus, spec.l(), spec.n()))?.cost;
        g[i] = (fp - fm) / (2.0 * h);
    }
    Ok(g)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UniquenessReport {
    pub reference_cost: f64,
    pub checked: usize,
    pub optimal: usize,
    pub max_distance: f64,
    /// Indices of cost-optimal candidates farther than `1e-3` in `W₂`.
    pub violators: Vec<usize>,
}

impl UniquenessReport {
    pub fn passed(&self) -> bool {
        self.violators.is_empty()
    }
}

/// Every candidate whose cost is within `1e-9` of `C⋆` must share the
/// stationary moments up to `W₂ ≤ 1e-3`.
pub fn verify_uniqueness(pair: &StationaryPair, candidates: &[StationaryCandidate]) -> Result<UniquenessReport> {
    let reference = pair.state_moments();
    let mut report = UniquenessReport {
        reference_cost: pair.stationary_cost,
        checked: candidates.len(),
        optimal: 0,
        max_distance: 0.0,
        violators: Vec::new(),
    };
    for (i, c) in candidates.iter().enumerate() {
        if c.cost > pair.stationary_cost + 1e-9 {
            continue;
        }
        report.optimal += 1;
        let w = wasserstein2_gaussian(&c.moments(), &reference)?;
        report.max_distance = report.max_distance.max(w);
        if w > 1e-3 {
            report.violators.push(i);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instances::{noiseless, reference_problem, scalar_problem, NoiseKind};
    use crate::model::Distribution;
    use crate::stationary::certify;
    use approx::assert_relative_eq;

    #[test]
    fn dare_candidate_reproduces_pair_cost() {
        let spec = reference_problem(NoiseKind::Gaussian);
        let (pair, _) = certify(&spec).unwrap();
        let c = stationary_cost(&spec, &AffineFeedback::from_pair(&pair)).unwrap();
        assert_relative_eq!(c.cost, pair.stationary_cost, epsilon = 1e-10);
        assert_relative_eq!(c.mu, pair.mu_s, epsilon = 1e-10);
        assert_relative_eq!(c.sigma, pair.sigma_s, epsilon = 1e-10);
    }

    #[test]
    fn local_perturbations_do_not_improve() {
        let spec = reference_problem(NoiseKind::Gaussian);
        let (pair, _) = certify(&spec).unwrap();
        let base = AffineFeedback::from_pair(&pair).to_params();
        for i in 0..base.len() {
            for sign in [-1.0, 1.0] {
                let mut p = base.clone();
                p[i] += sign * 1e-2;
                let c = stationary_cost(&spec, &AffineFeedback::from_params(&p, 1, 2)).unwrap();
                assert!(c.cost >= pair.stationary_cost - 1e-9);
            }
        }
    }

    #[test]
    fn unstable_feedback_is_infeasible() {
        let spec = reference_problem(NoiseKind::Gaussian);
        let fb = AffineFeedback { k: Matrix::zeros(1, 2), d: Vector::zeros(1) };
        assert!(matches!(stationary_cost(&spec, &fb), Err(Error::Infeasible(_))));
        assert!(penalized_objective(&spec, &fb.to_params()) >= INFEASIBLE_BASE);
    }

    #[test]
    fn nelder_mead_rosenbrock() {
        let f = |x: &[f64]| (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2);
        let res = nelder_mead(f, &[-1.2, 1.0], 0.5, NelderMeadOptions::default());
        assert!((res.x[0] - 1.0).abs() < 1e-6 && (res.x[1] - 1.0).abs() < 1e-6, "{:?}", res.x);
    }

    #[test]
    fn gradient_vanishes_at_dare_candidate() {
        let spec = reference_problem(NoiseKind::Gaussian);
        let (pair, _) = certify(&spec).unwrap();
        let g = cost_gradient(&spec, &AffineFeedback::from_pair(&pair), 1e-6).unwrap();
        assert!(g.norm() <= 1e-4, "{g}");
    }

    #[test]
    fn scalar_instance_recovers_riccati_gain() {
        let spec = scalar_problem(
            Distribution::Gaussian { mean: Vector::from_element(1, 0.2), cov: Matrix::from_element(1, 1, 1.0) },
            Distribution::Dirac { point: Vector::zeros(1) },
            5,
        );
        let (pair, _) = certify(&spec).unwrap();
        let rep = solve_stationary_problem(&spec, &pair, 4, 3, Execution::Parallel).unwrap();
        assert!((rep.best.feedback.k[(0, 0)] - pair.k[(0, 0)]).abs() < 1e-3);
        assert!(rep.matches_pair);
    }

    #[test]
    fn noiseless_instance_recovers_steady_state_qp() {
        let mut spec = noiseless(&reference_problem(NoiseKind::Gaussian));
        spec.cost.q2 = Matrix::zeros(2, 2);
        let (pair, _) = certify(&spec).unwrap();
        let rep = solve_stationary_problem(&spec, &pair, 4, 1, Execution::Parallel).unwrap();
        assert!((&rep.best.mu - &pair.x_tilde).amax() < 1e-6);
        let u = &rep.best.feedback.k * &rep.best.mu + &rep.best.feedback.d;
        assert!((u - &pair.u_tilde).amax() < 1e-6);
    }

    #[test]
    fn uniqueness_report_cases() {
        let spec = reference_problem(NoiseKind::Gaussian);
        let (pair, _) = certify(&spec).unwrap();
        let dare = stationary_cost(&spec, &AffineFeedback::from_pair(&pair)).unwrap();
        let mut far = dare.clone();
        far.mu[0] += 1.0;
        far.cost += 1e-4;
        let rep = verify_uniqueness(&pair, &[dare, far]).unwrap();
        assert_eq!(rep.optimal, 1);
        assert!(rep.max_distance < 1e-9);
        assert!(rep.passed());
    }

    #[test]
    fn params_round_trip() {
        let fb = AffineFeedback {
            k: Matrix::from_row_slice(2, 3, &[1., 2., 3., 4., 5., 6.]),
            d: Vector::from_vec(vec![7., 8.]),
        };
        assert_eq!(AffineFeedback::from_params(&fb.to_params(), 2, 3), fb);
    }
}
