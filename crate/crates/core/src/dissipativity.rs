//! Randomized certification of the mean-square dissipation inequality on
//! joint moment states, and its deterministic special case on a grid.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix, Vector};
use crate::model::{deterministic_stage_cost, quad_form, MomentState, ProblemSpec, U, X, XS};
use crate::montecarlo::RngStream;
use crate::par::{map_indexed, Execution};
use crate::stationary::{certify, dissipativity_residual, StationaryPair, StorageData};

/// Residuals below this count as violations.
pub const RESIDUAL_FLOOR: f64 = -1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Coupling {
    /// `(X, U)` independent of `Xˢ`.
    Independent,
    /// Random cross-covariance between `(X, U)` and `Xˢ`.
    RandomPsdCross,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSpec {
    pub probes: usize,
    /// Means are drawn uniformly within this distance of the stationary means.
    pub mean_box: f64,
    pub cov_scale: f64,
    pub coupling: Coupling,
    pub seed: u64,
}

impl Default for ProbeSpec {
    fn default() -> Self {
        Self { probes: 10_000, mean_box: 3.0, cov_scale: 1.0, coupling: Coupling::RandomPsdCross, seed: 0 }
    }
}

/// Joint `(X, U, Xˢ)` moments with `Xˢ = L ξ`, `(X, U) = M₁ ξ + M₂ ζ` for
/// independent standard `ξ`, `ζ`, where `L L ᵀ = Σˢ`.
pub fn random_probe(pair: &StationaryPair, probe: &ProbeSpec, index: u64) -> Result<MomentState> {
    let mut rng = RngStream::new(probe.seed, index).rng();
    let n = pair.mu_s.len();
    let l = pair.control_offset.len();
    let scale = probe.cov_scale.sqrt();
    let mut gauss = |r: usize, c: usize| Matrix::from_fn(r, c, |_, _| scale * rng.sample::<f64, _>(StandardNormal));
    let m1 = match probe.coupling {
        Coupling::Independent => Matrix::zeros(n + l, n),
        Coupling::RandomPsdCross => gauss(n + l, n),
    };
    let m2 = gauss(n + l, n + l);
    let root = linalg::sqrtm_psd(&pair.sigma_s)?;
    let d = 2 * n + l;
    let mut cov = Matrix::zeros(d, d);
    cov.view_mut((0, 0), (n + l, n + l)).copy_from(&(&m1 * m1.transpose() + &m2 * m2.transpose()));
    let cross = &m1 * &root;
    cov.view_mut((0, n + l), (n + l, n)).copy_from(&cross);
    cov.view_mut((n + l, 0), (n, n + l)).copy_from(&cross.transpose());
    cov.view_mut((n + l, n + l), (n, n)).copy_from(&pair.sigma_s);
    let mut offset = || probe.mean_box * (2.0 * rng.random::<f64>() - 1.0);
    let mx = Vector::from_fn(n, |i, _| pair.mu_s[i] + offset());
    let mu = Vector::from_fn(l, |i, _| pair.control_offset[i] + offset());
    MomentState::joint(&[(X, mx), (U, mu), (XS, pair.mu_s.clone())], cov)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HistogramBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeReport {
    pub probes: usize,
    pub min_residual: f64,
    pub argmin: usize,
    pub coupled_residual: f64,
    pub histogram: Vec<HistogramBin>,
    pub passed: bool,
}

const BIN_EDGES: [f64; 7] = [f64::NEG_INFINITY, 0.0, 1e-6, 1e-3, 1.0, 1e3, f64::INFINITY];

pub fn run_probes(
    spec: &ProblemSpec,
    pair: &StationaryPair,
    storage: &StorageData,
    probe: &ProbeSpec,
    exec: Execution,
) -> Result<ProbeReport> {
    if !probe.cov_scale.is_finite() || probe.cov_scale <= 0.0 {
        return Err(Error::Invalid(vec!["covariance scale must be positive".into()]));
    }
    let residuals = map_indexed(exec, probe.probes, |i| {
        random_probe(pair, probe, i as u64).and_then(|j| dissipativity_residual(spec, pair, storage, &j))
    })
    .into_iter()
    .collect::<Result<Vec<f64>>>()?;
    let coupled_residual = dissipativity_residual(spec, pair, storage, &pair.perfectly_coupled())?;
    let (argmin, min_residual) =
        residuals.iter().copied().enumerate().min_by(|a, b| a.1.total_cmp(&b.1)).unwrap_or((0, f64::INFINITY));
    let histogram = BIN_EDGES
        .windows(2)
        .map(|w| HistogramBin {
            lower: w[0],
            upper: w[1],
            count: residuals.iter().filter(|r| **r >= w[0] && **r < w[1]).count(),
        })
        .collect();
    Ok(ProbeReport {
        probes: probe.probes,
        min_residual,
        argmin,
        coupled_residual,
        histogram,
        passed: min_residual >= RESIDUAL_FLOOR && coupled_residual.abs() <= 1e-9,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeterministicReport {
    pub grid_points: usize,
    /// Minimum of `ℓ(x,u) - ℓ(x̃,ũ) + λ(x) - λ(Ax+Bu) - r‖x - x̃‖²`.
    pub min_margin: f64,
    /// The same expression at `(x̃, ũ)`.
    pub margin_at_optimum: f64,
    /// Largest gap to the moment-based residual at the same points.
    pub max_moment_gap: f64,
    pub passed: bool,
}

fn grid_axis(points: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..points).map(|i| lo + (hi - lo) * i as f64 / (points - 1) as f64).collect()
}

/// Checks the deterministic strict dissipation inequality with storage
/// `λ(x) = ‖x‖²_S + qᵀx` on a grid over `[-2, 2]^{n+l}` (21 points per axis
/// for `n + l ≤ 3`, 5 otherwise).
pub fn deterministic_degeneration_check(spec: &ProblemSpec) -> Result<DeterministicReport> {
    if linalg::max_abs(&spec.noise.cov()) != 0.0 || spec.drift().amax() != 0.0 {
        return Err(Error::Invalid(vec!["deterministic check needs zero noise and zero drift".into()]));
    }
    let (pair, storage) = certify(spec)?;
    let (a, b) = (&spec.system.a, &spec.system.b);
    let (n, l) = (spec.n(), spec.l());
    let dim = n + l;
    let axis = grid_axis(if dim <= 3 { 21 } else { 5 }, -2.0, 2.0);
    let lam = |x: &Vector| quad_form(&storage.s, x) + storage.q.dot(x);
    let best = deterministic_stage_cost(&spec.cost, &pair.x_tilde, &pair.u_tilde);
    let margin = |x: &Vector, u: &Vector| {
        deterministic_stage_cost(&spec.cost, x, u) - best + lam(x)
            - lam(&(a * x + b * u))
            - storage.r * (x - &pair.x_tilde).norm_squared()
    };

    let total = axis.len().pow(dim as u32);
    let mut min_margin = f64::INFINITY;
    let mut max_gap: f64 = 0.0;
    let mut idx = vec![0usize; dim];
    for _ in 0..total {
        let z = Vector::from_fn(dim, |i, _| axis[idx[i]]);
        let x = z.rows(0, n).into_owned();
        let u = z.rows(n, l).into_owned();
        let m = margin(&x, &u);
        min_margin = min_margin.min(m);
        let joint = MomentState::independent(&[
            (X, &MomentState::dirac(x)),
            (U, &MomentState::dirac(u)),
            (XS, &MomentState::dirac(pair.mu_s.clone())),
        ])?;
        max_gap = max_gap.max((dissipativity_residual(spec, &pair, &storage, &joint)? - m).abs());
        for slot in idx.iter_mut() {
            *slot += 1;
            if *slot < axis.len() {
                break;
            }
            *slot = 0;
        }
    }
    let margin_at_optimum = margin(&pair.x_tilde, &pair.u_tilde);
    Ok(DeterministicReport {
        grid_points: total,
        min_margin,
        margin_at_optimum,
        max_moment_gap: max_gap,
        passed: min_margin >= -1e-9 && margin_at_optimum.abs() <= 1e-10,
    })
}
