//! Seeded simulation of coupled path pairs `(X, Xˢ)` driven by the same noise.
//!
//! Sample `i` draws from its own ChaCha8 stream `(seed, i)` in the order
//! `X₀`, `Xˢ₀`, `W(0..N)`, so results do not depend on thread count or on
//! how the samples are partitioned.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix, Vector};
use crate::metrics::Exceedance;
use crate::model::{Distribution, ProblemSpec};
use crate::ocp::AffinePolicy;
use crate::par::{chunked_fold, map_indexed, Execution};
use crate::stationary::StationaryPair;

const CHUNK: usize = 256;
/// Closed-loop steps used to draw `Xˢ₀` when the stationary law has no
/// closed form.
pub const BURN_IN: usize = 400;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngStream {
    pub seed: u64,
    pub stream: u64,
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        Self { seed, stream }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng
    }
}

/// Precomputed sampler for a [`Distribution`].
#[derive(Debug, Clone)]
pub enum Sampler {
    Gaussian { mean: Vector, root: Matrix },
    Uniform { lower: Vector, width: Vector },
    Dirac { point: Vector },
}

impl Sampler {
    pub fn new(dist: &Distribution) -> Result<Self> {
        Ok(match dist {
            Distribution::Gaussian { mean, cov } => {
                Sampler::Gaussian { mean: mean.clone(), root: linalg::sqrtm_psd(cov)? }
            }
            Distribution::UniformBox { lower, upper } => {
                Sampler::Uniform { lower: lower.clone(), width: upper - lower }
            }
            Distribution::Dirac { point } => Sampler::Dirac { point: point.clone() },
        })
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> Vector {
        match self {
            Sampler::Gaussian { mean, root } => {
                let xi = Vector::from_fn(mean.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
                mean + root * xi
            }
            Sampler::Uniform { lower, width } => {
                Vector::from_fn(lower.len(), |i, _| lower[i] + width[i] * rng.random::<f64>())
            }
            Sampler::Dirac { point } => point.clone(),
        }
    }
}

/// `count × horizon` i.i.d. draws from one stream.
pub fn sample_noise(noise: &Distribution, stream: RngStream, count: usize, horizon: usize) -> Result<Vec<Vec<Vector>>> {
    let sampler = Sampler::new(noise)?;
    let mut rng = stream.rng();
    Ok((0..count).map(|_| (0..horizon).map(|_| sampler.sample(&mut rng)).collect()).collect())
}

/// One coupled realization.
#[derive(Debug, Clone, PartialEq)]
pub struct CoupledPath {
    pub x: Vec<Vector>,
    pub u: Vec<Vector>,
    pub xs: Vec<Vector>,
    pub us: Vec<Vector>,
    pub w: Vec<Vector>,
}

pub struct Simulator<'a> {
    spec: &'a ProblemSpec,
    policy: &'a AffinePolicy,
    pair: &'a StationaryPair,
    noise: Sampler,
    init: Sampler,
    stationary_init: Option<Sampler>,
    seed: u64,
}

impl<'a> Simulator<'a> {
    pub fn new(spec: &'a ProblemSpec, policy: &'a AffinePolicy, pair: &'a StationaryPair, seed: u64) -> Result<Self> {
        // Gaussian noise keeps the stationary law Gaussian; otherwise draw Xˢ₀
        // by running the stationary closed loop from its mean.
        let stationary_init = if spec.noise.is_gaussian_family() {
            Some(Sampler::new(&Distribution::Gaussian { mean: pair.mu_s.clone(), cov: pair.sigma_s.clone() })?)
        } else {
            None
        };
        Ok(Self {
            spec,
            policy,
            pair,
            noise: Sampler::new(&spec.noise)?,
            init: Sampler::new(&spec.init)?,
            stationary_init,
            seed,
        })
    }

    pub fn horizon(&self) -> usize {
        self.policy.horizon()
    }

    fn step(&self, x: &Vector, u: &Vector, w: &Vector) -> Vector {
        let sys = &self.spec.system;
        &sys.a * x + &sys.b * u + &sys.e * w + &sys.z
    }

    fn draw_stationary(&self, rng: &mut ChaCha8Rng) -> Vector {
        match &self.stationary_init {
            Some(s) => s.sample(rng),
            None => {
                let mut xs = self.pair.mu_s.clone();
                for _ in 0..BURN_IN {
                    let w = self.noise.sample(rng);
                    xs = self.step(&xs, &self.pair.control(&xs), &w);
                }
                xs
            }
        }
    }

    /// Realization number `index`.
    pub fn path(&self, index: u64) -> CoupledPath {
        let mut rng = RngStream::new(self.seed, index).rng();
        let x0 = self.init.sample(&mut rng);
        let xs0 = self.draw_stationary(&mut rng);
        let w: Vec<Vector> = (0..self.horizon()).map(|_| self.noise.sample(&mut rng)).collect();
        self.replay(x0, xs0, w)
    }

    /// Runs both recursions on given initial states and noise.
    pub fn replay(&self, x0: Vector, xs0: Vector, w: Vec<Vector>) -> CoupledPath {
        let horizon = w.len().min(self.horizon());
        let mut x = Vec::with_capacity(horizon + 1);
        let mut xs = Vec::with_capacity(horizon + 1);
        let mut u = Vec::with_capacity(horizon);
        let mut us = Vec::with_capacity(horizon);
        x.push(x0);
        xs.push(xs0);
        for (k, wk) in w.iter().enumerate().take(horizon) {
            let uk = self.policy.control(k, &x[k]);
            let usk = self.pair.control(&xs[k]);
            x.push(self.step(&x[k], &uk, wk));
            xs.push(self.step(&xs[k], &usk, wk));
            u.push(uk);
            us.push(usk);
        }
        CoupledPath { x, u, xs, us, w }
    }

    /// Folds all `count` realizations in fixed-size chunks merged in order.
    pub fn fold<A, I, F, M>(&self, count: usize, exec: Execution, init: I, fold: F, merge: M) -> A
    where
        A: Send,
        I: Fn() -> A + Sync + Send,
        F: Fn(&mut A, &CoupledPath) + Sync + Send,
        M: Fn(&mut A, A),
    {
        chunked_fold(exec, count, CHUNK, init, |acc, i| fold(acc, &self.path(i as u64)), merge)
    }
}

/// All realizations stored as flat row-major arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct PathBundle {
    pub samples: usize,
    pub horizon: usize,
    pub n: usize,
    pub l: usize,
    pub m: usize,
    /// `[sample][k][i]`, `k = 0..=N`.
    pub x: Vec<f64>,
    pub xs: Vec<f64>,
    /// `[sample][k][i]`, `k = 0..N`.
    pub u: Vec<f64>,
    pub us: Vec<f64>,
    pub w: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ArrayHeader {
    name: String,
    shape: [usize; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BundleHeader {
    dtype: String,
    samples: usize,
    horizon: usize,
    arrays: Vec<ArrayHeader>,
}

impl PathBundle {
    fn at(data: &[f64], len: usize, dim: usize, s: usize, k: usize) -> &[f64] {
        let start = (s * len + k) * dim;
        &data[start..start + dim]
    }

    pub fn x_at(&self, s: usize, k: usize) -> &[f64] {
        Self::at(&self.x, self.horizon + 1, self.n, s, k)
    }

    pub fn xs_at(&self, s: usize, k: usize) -> &[f64] {
        Self::at(&self.xs, self.horizon + 1, self.n, s, k)
    }

    pub fn u_at(&self, s: usize, k: usize) -> &[f64] {
        Self::at(&self.u, self.horizon, self.l, s, k)
    }

    pub fn us_at(&self, s: usize, k: usize) -> &[f64] {
        Self::at(&self.us, self.horizon, self.l, s, k)
    }

    pub fn w_at(&self, s: usize, k: usize) -> &[f64] {
        Self::at(&self.w, self.horizon, self.m, s, k)
    }

    fn header(&self) -> BundleHeader {
        let (s, h) = (self.samples, self.horizon);
        let arr = |name: &str, len, dim| ArrayHeader { name: name.into(), shape: [s, len, dim] };
        BundleHeader {
            dtype: "<f8".into(),
            samples: s,
            horizon: h,
            arrays: vec![
                arr("X", h + 1, self.n),
                arr("Xs", h + 1, self.n),
                arr("U", h, self.l),
                arr("Us", h, self.l),
                arr("W", h, self.m),
            ],
        }
    }

    /// Little-endian `u64` header length, JSON header, then the arrays
    /// `X`, `Xs`, `U`, `Us`, `W` as little-endian `f64`.
    pub fn write_binary<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let header = serde_json::to_vec(&self.header()).expect("header serializes");
        out.write_all(&(header.len() as u64).to_le_bytes())?;
        out.write_all(&header)?;
        for arr in [&self.x, &self.xs, &self.u, &self.us, &self.w] {
            for v in arr.iter() {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn write_file(&self, path: &Path) -> std::io::Result<()> {
        let file = std::fs::File::create(path)?;
        let mut buf = std::io::BufWriter::new(file);
        self.write_binary(&mut buf)?;
        buf.flush()
    }

    pub fn read_binary<R: Read>(mut input: R) -> Result<Self> {
        let io = |e: std::io::Error| Error::Parse(e.to_string());
        let mut len = [0u8; 8];
        input.read_exact(&mut len).map_err(io)?;
        let mut header = vec![0u8; u64::from_le_bytes(len) as usize];
        input.read_exact(&mut header).map_err(io)?;
        let header: BundleHeader = serde_json::from_slice(&header).map_err(|e| Error::Parse(e.to_string()))?;
        if header.dtype != "<f8" || header.arrays.len() != 5 {
            return Err(Error::Parse("unsupported path bundle layout".into()));
        }
        let mut arrays = Vec::with_capacity(5);
        for a in &header.arrays {
            let count = a.shape.iter().product::<usize>();
            let mut bytes = vec![0u8; count * 8];
            input.read_exact(&mut bytes).map_err(io)?;
            arrays.push(
                bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                    .collect::<Vec<_>>(),
            );
        }
        let mut it = arrays.into_iter();
        let mut next = || it.next().expect("five arrays");
        Ok(PathBundle {
            samples: header.samples,
            horizon: header.horizon,
            n: header.arrays[0].shape[2],
            l: header.arrays[2].shape[2],
            m: header.arrays[4].shape[2],
            x: next(),
            xs: next(),
            u: next(),
            us: next(),
            w: next(),
        })
    }
}

fn flatten(parts: &[Vector], out: &mut Vec<f64>) {
    for p in parts {
        out.extend(p.iter());
    }
}

pub fn simulate_coupled(
    spec: &ProblemSpec,
    policy: &AffinePolicy,
    pair: &StationaryPair,
    seed: u64,
    count: usize,
    exec: Execution,
) -> Result<PathBundle> {
    let sim = Simulator::new(spec, policy, pair, seed)?;
    let paths = map_indexed(exec, count, |i| sim.path(i as u64));
    let mut bundle = PathBundle {
        samples: count,
        horizon: sim.horizon(),
        n: spec.n(),
        l: spec.l(),
        m: spec.m(),
        x: Vec::new(),
        xs: Vec::new(),
        u: Vec::new(),
        us: Vec::new(),
        w: Vec::new(),
    };
    for p in &paths {
        flatten(&p.x, &mut bundle.x);
        flatten(&p.xs, &mut bundle.xs);
        flatten(&p.u, &mut bundle.u);
        flatten(&p.us, &mut bundle.us);
        flatten(&p.w, &mut bundle.w);
    }
    Ok(bundle)
}

/// Fraction of samples with `‖X(k) - Xˢ(k)‖ ≥ ε`, for `k = 0..=N`.
pub fn empirical_exceedance(bundle: &PathBundle, eps: f64) -> Vec<f64> {
    (0..=bundle.horizon)
        .map(|k| {
            let hits = (0..bundle.samples)
                .filter(|&s| {
                    let d2: f64 = bundle.x_at(s, k).iter().zip(bundle.xs_at(s, k)).map(|(a, b)| (a - b).powi(2)).sum();
                    d2.sqrt() >= eps
                })
                .count();
            hits as f64 / bundle.samples.max(1) as f64
        })
        .collect()
}

/// Streaming per-step sums over coupled realizations.
#[derive(Debug, Clone, PartialEq)]
pub struct CoupledStats {
    pub count: usize,
    pub epsilons: Vec<f64>,
    sum_x: Vec<Vector>,
    sum_xx: Vec<Matrix>,
    sum_s: Vec<Vector>,
    sum_ss: Vec<Matrix>,
    sum_d2: Vec<f64>,
    sum_d4: Vec<f64>,
    exceed: Vec<Vec<u64>>,
}

impl CoupledStats {
    fn empty(n: usize, steps: usize, epsilons: &[f64]) -> Self {
        Self {
            count: 0,
            epsilons: epsilons.to_vec(),
            sum_x: vec![Vector::zeros(n); steps],
            sum_xx: vec![Matrix::zeros(n, n); steps],
            sum_s: vec![Vector::zeros(n); steps],
            sum_ss: vec![Matrix::zeros(n, n); steps],
            sum_d2: vec![0.0; steps],
            sum_d4: vec![0.0; steps],
            exceed: vec![vec![0; steps]; epsilons.len()],
        }
    }

    fn add(&mut self, path: &CoupledPath) {
        self.count += 1;
        for (k, (x, s)) in path.x.iter().zip(&path.xs).enumerate() {
            self.sum_x[k] += x;
            self.sum_xx[k] += x * x.transpose();
            self.sum_s[k] += s;
            self.sum_ss[k] += s * s.transpose();
            let d2 = (x - s).norm_squared();
            self.sum_d2[k] += d2;
            self.sum_d4[k] += d2 * d2;
            for (e, eps) in self.epsilons.iter().enumerate() {
                if d2.sqrt() >= *eps {
                    self.exceed[e][k] += 1;
                }
            }
        }
    }

    fn merge(&mut self, other: Self) {
        self.count += other.count;
        for k in 0..self.sum_d2.len() {
            self.sum_x[k] += &other.sum_x[k];
            self.sum_xx[k] += &other.sum_xx[k];
            self.sum_s[k] += &other.sum_s[k];
            self.sum_ss[k] += &other.sum_ss[k];
            self.sum_d2[k] += other.sum_d2[k];
            self.sum_d4[k] += other.sum_d4[k];
            for e in 0..self.epsilons.len() {
                self.exceed[e][k] += other.exceed[e][k];
            }
        }
    }

    pub fn steps(&self) -> usize {
        self.sum_d2.len()
    }

    fn nf(&self) -> f64 {
        self.count.max(1) as f64
    }

    pub fn mean_x(&self, k: usize) -> Vector {
        &self.sum_x[k] / self.nf()
    }

    pub fn mean_xs(&self, k: usize) -> Vector {
        &self.sum_s[k] / self.nf()
    }

    /// Sample covariance with divisor `count - 1`.
    pub fn cov_x(&self, k: usize) -> Matrix {
        let m = self.mean_x(k);
        (&self.sum_xx[k] - &m * m.transpose() * self.nf()) / (self.nf() - 1.0).max(1.0)
    }

    pub fn cov_xs(&self, k: usize) -> Matrix {
        let m = self.mean_xs(k);
        (&self.sum_ss[k] - &m * m.transpose() * self.nf()) / (self.nf() - 1.0).max(1.0)
    }

    pub fn msd(&self, k: usize) -> f64 {
        self.sum_d2[k] / self.nf()
    }

    /// Standard error of [`Self::msd`].
    pub fn msd_se(&self, k: usize) -> f64 {
        let m = self.msd(k);
        ((self.sum_d4[k] / self.nf() - m * m).max(0.0) / self.nf()).sqrt()
    }

    pub fn exceedance(&self) -> Vec<Exceedance> {
        self.epsilons
            .iter()
            .zip(&self.exceed)
            .map(|(eps, hits)| Exceedance {
                epsilon: *eps,
                per_step: hits.iter().map(|h| *h as f64 / self.nf()).collect(),
            })
            .collect()
    }
}

/// Per-step statistics of `count` coupled realizations without storing paths.
pub fn coupled_statistics(
    spec: &ProblemSpec,
    policy: &AffinePolicy,
    pair: &StationaryPair,
    seed: u64,
    count: usize,
    epsilons: &[f64],
    exec: Execution,
) -> Result<CoupledStats> {
    let sim = Simulator::new(spec, policy, pair, seed)?;
    let steps = sim.horizon() + 1;
    let n = spec.n();
    Ok(sim.fold(
        count,
        exec,
        || CoupledStats::empty(n, steps, epsilons),
        |acc, p| acc.add(p),
        |acc, other| acc.merge(other),
    ))
}
