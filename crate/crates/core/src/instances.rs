//! Built-in problem instances.

use crate::linalg::{Matrix, Vector};
use crate::model::{CostSpec, Distribution, ProblemSpec, SystemSpec};

/// Horizons of the reference sweep.
pub const REFERENCE_HORIZONS: [usize; 7] = [20, 30, 40, 50, 60, 70, 80];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NoiseKind {
    Gaussian,
    Uniform,
}

impl std::str::FromStr for NoiseKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "gaussian" => Ok(NoiseKind::Gaussian),
            "uniform" | "uniform_box" => Ok(NoiseKind::Uniform),
            other => Err(format!("unknown noise kind `{other}`")),
        }
    }
}

fn mat(rows: usize, cols: usize, data: &[f64]) -> Matrix {
    Matrix::from_row_slice(rows, cols, data)
}

fn vecf(data: &[f64]) -> Vector {
    Vector::from_row_slice(data)
}

/// Two-state, one-input reference instance with an open-loop unstable mode,
/// a variance penalty on the first state, and noise of mean 0.2 and variance
/// 0.03 per coordinate. Horizon 20.
pub fn reference_problem(noise: NoiseKind) -> ProblemSpec {
    let noise = match noise {
        NoiseKind::Gaussian => {
            Distribution::Gaussian { mean: vecf(&[0.2, 0.2]), cov: Matrix::from_diagonal(&vecf(&[0.03, 0.03])) }
        }
        NoiseKind::Uniform => Distribution::UniformBox { lower: vecf(&[-0.1, -0.1]), upper: vecf(&[0.5, 0.5]) },
    };
    ProblemSpec {
        system: SystemSpec {
            a: mat(2, 2, &[1.12, 0.0, 0.26, 0.88]),
            b: mat(2, 1, &[0.05, -0.05]),
            e: Matrix::identity(2, 2),
            z: Vector::zeros(2),
        },
        cost: CostSpec {
            q1: Matrix::from_diagonal(&vecf(&[1.0, 5.0])),
            q2: Matrix::from_diagonal(&vecf(&[5.0, 0.0])),
            r1: mat(1, 1, &[1.0]),
            r2: mat(1, 1, &[0.0]),
            s: vecf(&[1.0, 0.0]),
            v: vecf(&[-0.5]),
            c: 0.0,
        },
        noise,
        init: Distribution::Gaussian {
            mean: vecf(&[0.5, 0.8]),
            cov: Matrix::from_diagonal(&vecf(&[0.05 * 0.05, 0.08 * 0.08])),
        },
        horizon: REFERENCE_HORIZONS[0],
    }
}

/// Scalar instance `x⁺ = 0.5x + u + w` with unit weights.
pub fn scalar_problem(noise: Distribution, init: Distribution, horizon: usize) -> ProblemSpec {
    ProblemSpec {
        system: SystemSpec { a: mat(1, 1, &[0.5]), b: mat(1, 1, &[1.0]), e: mat(1, 1, &[1.0]), z: Vector::zeros(1) },
        cost: CostSpec {
            q1: mat(1, 1, &[1.0]),
            q2: mat(1, 1, &[0.0]),
            r1: mat(1, 1, &[1.0]),
            r2: mat(1, 1, &[0.0]),
            s: Vector::zeros(1),
            v: Vector::zeros(1),
            c: 0.0,
        },
        noise,
        init,
        horizon,
    }
}

/// Same instance with the noise replaced by a point mass at zero.
pub fn noiseless(spec: &ProblemSpec) -> ProblemSpec {
    ProblemSpec { noise: Distribution::Dirac { point: Vector::zeros(spec.m()) }, ..spec.clone() }
}
