//! Turnpike statistics: mean-square distance, Gaussian `W₂`, moment gaps and
//! the five counters with their horizon-dependent lower bounds.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::model::{MomentState, ProblemSpec, X, XS};
use crate::ocp::MomentTrajectory;
use crate::stationary::{eval_storage, storage_lower_bound, StationaryPair, StorageData};
use crate::statopt::AffineFeedback;

/// `E‖X - Xˢ‖²` from the joint moments of `(X, Xˢ)`.
pub fn mean_square_distance(joint: &MomentState) -> Result<f64> {
    let dm = joint.mean_of(X)? - joint.mean_of(XS)?;
    let cross = joint.cov_of(X, XS)?;
    let v = dm.norm_squared() + joint.cov_of(X, X)?.trace() + joint.cov_of(XS, XS)?.trace() - 2.0 * cross.trace();
    Ok(v.max(0.0))
}

/// `W₂` between the Gaussian laws with the given moments.
pub fn wasserstein2_gaussian(a: &MomentState, b: &MomentState) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Dimension(format!("W2 between dimensions {} and {}", a.dim(), b.dim())));
    }
    let root_b = linalg::sqrtm_psd(&b.cov)?;
    let inner = linalg::sqrtm_psd(&linalg::symmetrize(&(&root_b * &a.cov * &root_b)))?;
    let bures = a.cov.trace() + b.cov.trace() - 2.0 * inner.trace();
    Ok(((&a.mean - &b.mean).norm_squared() + bures).max(0.0).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepMetrics {
    pub k: usize,
    /// `E‖X(k) - Xˢ(k)‖²`.
    pub msd: f64,
    /// `W₂` of the Gaussian surrogates of the two marginals.
    pub w2: f64,
    /// `‖E X(k) - E Xˢ(k)‖`.
    pub mean_gap: f64,
    /// `|√Tr Cov X(k) - √Tr Cov Xˢ(k)|`.
    pub sd_gap: f64,
}

pub fn step_metrics(k: usize, joint: &MomentState) -> Result<StepMetrics> {
    let x = joint.marginal(X)?;
    let s = joint.marginal(XS)?;
    Ok(StepMetrics {
        k,
        msd: mean_square_distance(joint)?,
        w2: wasserstein2_gaussian(&x, &s)?,
        mean_gap: (&x.mean - &s.mean).norm(),
        sd_gap: (x.cov.trace().max(0.0).sqrt() - s.cov.trace().max(0.0).sqrt()).abs(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Metric {
    /// `L_ε`: steps with `E‖X - Xˢ‖² ≤ ε`.
    #[serde(rename = "L")]
    MeanSquare,
    /// `S_{ε,η}`: steps with `P(‖X - Xˢ‖ ≥ ε) ≤ η`.
    #[serde(rename = "S")]
    Probability,
    /// `D_ε`: steps with `W₂ ≤ ε`.
    #[serde(rename = "D")]
    Wasserstein,
    /// `M¹_ε`: steps with `‖E X - E Xˢ‖ ≤ ε`.
    #[serde(rename = "M1")]
    Mean,
    /// `M²_ε`: steps with `|√Tr Cov X - √Tr Cov Xˢ| ≤ ε`.
    #[serde(rename = "M2")]
    StdDev,
}

impl Metric {
    pub const ALL: [Metric; 5] =
        [Metric::MeanSquare, Metric::Probability, Metric::Wasserstein, Metric::Mean, Metric::StdDev];

    pub fn name(self) -> &'static str {
        match self {
            Metric::MeanSquare => "L",
            Metric::Probability => "S",
            Metric::Wasserstein => "D",
            Metric::Mean => "M1",
            Metric::StdDev => "M2",
        }
    }

    /// Argument `s` of `α(s) = r s` in the bound `N - (δ + C)/α(s)`.
    pub fn alpha_argument(self, eps: f64, eta: f64) -> f64 {
        match self {
            Metric::MeanSquare => eps,
            Metric::Probability => eps * eps * eta,
            Metric::Wasserstein | Metric::Mean => eps.sqrt(),
            Metric::StdDev => (2.0 * eps).sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CounterRow {
    pub metric: Metric,
    pub epsilon: f64,
    pub eta: Option<f64>,
    pub counter: usize,
    /// `max(N - (δ + C)/α, 0)`.
    pub bound: f64,
}

impl CounterRow {
    pub fn holds(&self) -> bool {
        self.counter as f64 >= self.bound
    }
}

/// Empirical exceedance probabilities `P(‖X(k) - Xˢ(k)‖ ≥ ε)` for one `ε`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Exceedance {
    pub epsilon: f64,
    pub per_step: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TurnpikeReport {
    pub horizon: usize,
    pub delta: f64,
    /// `C = λ(0, X₀) - M`.
    pub c: f64,
    pub r: f64,
    pub storage_floor: f64,
    pub steps: Vec<StepMetrics>,
    pub exceedance: Vec<Exceedance>,
    pub counters: Vec<CounterRow>,
    /// False when the noise or initial law is not Gaussian, in which case `D_ε`
    /// uses the moment surrogate.
    pub wasserstein_exact: bool,
}

impl TurnpikeReport {
    pub fn violations(&self) -> Vec<&CounterRow> {
        self.counters.iter().filter(|c| !c.holds()).collect()
    }

    pub fn counter(&self, metric: Metric, eps: f64) -> Option<usize> {
        self.counters.iter().find(|c| c.metric == metric && c.epsilon == eps).map(|c| c.counter)
    }
}

/// Smallest admissible `δ` for a policy of cost `J_N`, i.e. `max(J_N - N C⋆, 0)`.
pub fn effective_delta(j_n: f64, horizon: usize, stationary_cost: f64) -> f64 {
    (j_n - horizon as f64 * stationary_cost).max(0.0)
}

/// Number of steps `k < N` with `value(k) ≤ eps`.
fn count(values: impl Iterator<Item = f64>, eps: f64) -> usize {
    values.filter(|v| *v <= eps).count()
}

#[allow(clippy::too_many_arguments)]
pub fn turnpike_counters(
    spec: &ProblemSpec,
    trajectory: &MomentTrajectory,
    exceedance: &[Exceedance],
    pair: &StationaryPair,
    storage: &StorageData,
    j_n: f64,
    delta: f64,
    epsilons: &[f64],
    eta: f64,
) -> Result<TurnpikeReport> {
    let horizon = trajectory.horizon();
    let slack = j_n - horizon as f64 * pair.stationary_cost - delta;
    if delta < -1e-9 || slack > 1e-9 * (1.0 + j_n.abs()) {
        return Err(Error::NegativeDelta(delta - slack.max(0.0)));
    }
    let delta = delta.max(0.0);
    let c = eval_storage(storage, &trajectory.states[0])? - storage_lower_bound(storage)?;
    let steps = trajectory.states.iter().enumerate().map(|(k, st)| step_metrics(k, st)).collect::<Result<Vec<_>>>()?;
    let head = &steps[..horizon];
    let bound = |metric: Metric, eps: f64| {
        let alpha = storage.r * metric.alpha_argument(eps, eta);
        (horizon as f64 - (delta + c) / alpha).max(0.0)
    };

    let mut counters = Vec::new();
    for &eps in epsilons {
        let mut push = |metric: Metric, counter: usize, eta: Option<f64>| {
            counters.push(CounterRow { metric, epsilon: eps, eta, counter, bound: bound(metric, eps) });
        };
        push(Metric::MeanSquare, count(head.iter().map(|s| s.msd), eps), None);
        if let Some(ex) = exceedance.iter().find(|e| e.epsilon == eps) {
            push(Metric::Probability, count(ex.per_step[..horizon].iter().copied(), eta), Some(eta));
        }
        push(Metric::Wasserstein, count(head.iter().map(|s| s.w2), eps), None);
        push(Metric::Mean, count(head.iter().map(|s| s.mean_gap), eps), None);
        push(Metric::StdDev, count(head.iter().map(|s| s.sd_gap), eps), None);
    }

    Ok(TurnpikeReport {
        horizon,
        delta,
        c,
        r: storage.r,
        storage_floor: storage_lower_bound(storage)?,
        steps,
        exceedance: exceedance.to_vec(),
        counters,
        wasserstein_exact: spec.noise.is_gaussian_family() && spec.init.is_gaussian_family(),
    })
}

/// `L_ε` computed directly from the exact mean-square distances.
pub fn mean_square_counter(trajectory: &MomentTrajectory, eps: f64) -> Result<usize> {
    let vals =
        trajectory.states[..trajectory.horizon()].iter().map(mean_square_distance).collect::<Result<Vec<_>>>()?;
    Ok(count(vals.into_iter(), eps))
}

/// `E‖X̄ˢ(k) - Xˢ(k)‖²` for `k = 0..=steps` when two stationary feedback laws
/// are driven by the same noise from the joint initial law `initial`
/// (blocks `X` for the first law, `Xs` for the second).
pub fn stationary_convergence(
    spec: &ProblemSpec,
    first: &AffineFeedback,
    second: &AffineFeedback,
    initial: &MomentState,
    steps: usize,
) -> Result<Vec<f64>> {
    let (a, b, e) = (&spec.system.a, &spec.system.b, &spec.system.e);
    let n = spec.n();
    let drift = spec.drift();
    let mut t = Matrix::zeros(2 * n, 2 * n);
    t.view_mut((0, 0), (n, n)).copy_from(&(a + b * &first.k));
    t.view_mut((n, n), (n, n)).copy_from(&(a + b * &second.k));
    let mut ee = Matrix::zeros(2 * n, spec.m());
    ee.view_mut((0, 0), (n, spec.m())).copy_from(e);
    ee.view_mut((n, 0), (n, spec.m())).copy_from(e);
    let inj = &ee * spec.noise.cov() * ee.transpose();
    let mut shift = crate::linalg::Vector::zeros(2 * n);
    shift.rows_mut(0, n).copy_from(&(b * &first.d + &drift));
    shift.rows_mut(n, n).copy_from(&(b * &second.d + &drift));

    let mut state = MomentState::joint(&[(X, initial.mean_of(X)?), (XS, initial.mean_of(XS)?)], initial.cov.clone())?;
    let mut out = Vec::with_capacity(steps + 1);
    out.push(mean_square_distance(&state)?);
    for _ in 0..steps {
        state.mean = &t * &state.mean + &shift;
        state.cov = linalg::symmetrize(&(&t * &state.cov * t.transpose() + &inj));
        out.push(mean_square_distance(&state)?);
    }
    Ok(out)
}
